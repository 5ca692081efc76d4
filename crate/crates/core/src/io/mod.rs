//! On-disk formats: tensor blobs, PGM masks, depth rasters, OBJ meshes and
//! template files.

mod blob;

pub(crate) use blob::read_u32;
mod image;
mod obj;
mod template_file;

use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

pub use blob::{DType, TensorBlob};
pub use image::{decode_depth, decode_pgm, encode_depth, encode_pgm, read_pgm, write_pgm, DEPTH_MAGIC};
pub use obj::{decode_obj, encode_obj, write_obj};
pub use template_file::{load_template, save_template, TEMPLATE_SCHEMA_VERSION};

use crate::error::{Error, Result};

/// Writes blobs back to back; returns each blob's `(offset, length)`.
pub fn write_blob_file(path: &Path, blobs: &[TensorBlob]) -> Result<Vec<(u64, u64)>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut spans = Vec::with_capacity(blobs.len());
    let mut offset = 0u64;
    for b in blobs {
        b.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        let len = b.encoded_len() as u64;
        spans.push((offset, len));
        offset += len;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(spans)
}

/// Reads every blob of a file written by [`write_blob_file`].
pub fn read_blob_file(path: &Path) -> Result<Vec<TensorBlob>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let mut out = Vec::new();
    while !cur.is_empty() {
        out.push(TensorBlob::read_from(&mut cur).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

/// Reads the blob at `offset` of a blob file, checking its encoded length.
pub fn read_blob_at(path: &Path, offset: u64, length: u64) -> Result<TensorBlob> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let size = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if offset.checked_add(length).is_none_or(|end| end > size) {
        return Err(Error::Format(format!("{}: blob span {offset}+{length} exceeds file size {size}", path.display())));
    }
    let mut r = BufReader::new(file);
    r.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(path, e))?;
    let blob = TensorBlob::read_from(&mut r.by_ref().take(length))?;
    if blob.encoded_len() as u64 != length {
        return Err(Error::Format(format!("{}: blob at {offset} has length {} not {length}", path.display(), blob.encoded_len())));
    }
    Ok(blob)
}
