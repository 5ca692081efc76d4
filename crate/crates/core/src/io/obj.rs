//! Wavefront OBJ export and a minimal parser for `v`/`f` lines.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::numkernel::Tensor;

/// `v x y z` lines with 9 significant digits, then 1-indexed `f a b c`.
pub fn encode_obj(vertices: &Tensor, faces: &[[usize; 3]]) -> Result<String> {
    if vertices.ndim() != 2 || vertices.cols() != 3 {
        return Err(invalid!("OBJ export expects n x 3 vertices, got {:?}", vertices.shape()));
    }
    let n = vertices.rows();
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
        return Err(invalid!("face {f:?} references a vertex beyond {n}"));
    }
    let mut s = String::with_capacity(40 * (n + faces.len()));
    for v in vertices.data().chunks_exact(3) {
        writeln!(s, "v {:.8e} {:.8e} {:.8e}", v[0], v[1], v[2]).expect("string write");
    }
    for f in faces {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
    }
    Ok(s)
}

/// Parses `v` and triangular `f` lines (`f a/b/c` forms keep the vertex
/// index); everything else is ignored.
pub fn decode_obj(text: &str) -> Result<(Tensor, Vec<[usize; 3]>)> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let bad = |what: &str| Error::Format(format!("OBJ line {}: {what}", lineno + 1));
        match it.next() {
            Some("v") => {
                for _ in 0..3 {
                    let t = it.next().ok_or_else(|| bad("vertex needs 3 coordinates"))?;
                    verts.push(t.parse::<f64>().map_err(|_| bad("bad coordinate"))?);
                }
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>().map_err(|_| bad("bad face index")))
                    .collect::<Result<_>>()?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(bad("only 1-indexed triangles are supported"));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    if verts.is_empty() {
        return Err(Error::Format("OBJ has no vertices".into()));
    }
    let n = verts.len() / 3;
    if faces.iter().flatten().any(|&i| i >= n) {
        return Err(Error::Format("OBJ face index out of range".into()));
    }
    Ok((Tensor::matrix(n, 3, verts), faces))
}

pub fn write_obj(path: &Path, vertices: &Tensor, faces: &[[usize; 3]]) -> Result<()> {
    std::fs::write(path, encode_obj(vertices, faces)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tetrahedron_roundtrip() {
        let v = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let f = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        let s = encode_obj(&v, &f).unwrap();
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 4);
        assert_eq!(s.lines().filter(|l| l.starts_with("f ")).count(), 4);
        let (v2, f2) = decode_obj(&s).unwrap();
        assert_eq!(v2, v);
        assert_eq!(f2, f);
    }

    #[test]
    fn nine_significant_digits() {
        let v = Tensor::from_rows(&[[0.123456789123, -98765.4321987, 1e-12 / 3.0]]);
        let (back, _) = decode_obj(&encode_obj(&v, &[]).unwrap()).unwrap();
        for (a, b) in v.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 5e-9 * a.abs());
        }
        assert!(encode_obj(&v, &[[0, 1, 2]]).is_err());
        assert!(decode_obj("f 1 2 3\n").is_err());
    }
}
