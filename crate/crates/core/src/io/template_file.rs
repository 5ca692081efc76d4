//! Template files: a JSON entry (`<name>.json`) naming tensor blobs stored
//! in a sibling blob file (`<name>.bin`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blob::TensorBlob;
use super::{read_blob_file, write_blob_file};
use crate::bodymodel::{KeypointSource, ModelTemplate, Taxon};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const TEMPLATE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TemplateEntry {
    schema_version: u32,
    taxon: Taxon,
    blob_file: String,
    parents: Vec<Option<usize>>,
    keypoint_map: Vec<KeypointSource>,
    head_tail: (usize, usize),
}

pub fn save_template(dir: &Path, name: &str, template: &ModelTemplate) -> Result<()> {
    template.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let faces = Tensor::matrix(template.faces.len(), 3, template.faces.iter().flatten().map(|&i| i as f64).collect());
    let blobs = [
        TensorBlob::f64("rest_vertices", &template.rest_vertices),
        TensorBlob::f64("faces", &faces),
        TensorBlob::f64("shape_basis", &template.shape_basis),
        TensorBlob::f64("skin_weights", &template.skin_weights),
        TensorBlob::f64("joint_regressor", &template.joint_regressor),
    ];
    let blob_file = format!("{name}.bin");
    write_blob_file(&dir.join(&blob_file), &blobs)?;
    let entry = TemplateEntry {
        schema_version: TEMPLATE_SCHEMA_VERSION,
        taxon: template.taxon,
        blob_file,
        parents: template.parents.clone(),
        keypoint_map: template.keypoint_map.clone(),
        head_tail: template.head_tail,
    };
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&entry)?).map_err(|e| Error::io(&path, e))
}

pub fn load_template(json_path: &Path) -> Result<ModelTemplate> {
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let entry: TemplateEntry = serde_json::from_str(&text)?;
    if entry.schema_version != TEMPLATE_SCHEMA_VERSION {
        return Err(Error::Format(format!("template schema version {} is not supported", entry.schema_version)));
    }
    let dir = json_path.parent().unwrap_or(Path::new("."));
    let blobs: BTreeMap<String, TensorBlob> = read_blob_file(&dir.join(&entry.blob_file))?.into_iter().map(|b| (b.name.clone(), b)).collect();
    let get = |name: &str| -> Result<Tensor> {
        blobs.get(name).ok_or_else(|| Error::Format(format!("template blob {name} missing")))?.to_tensor()
    };
    let faces = get("faces")?;
    let faces = faces
        .data()
        .chunks_exact(3)
        .map(|f| {
            let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
            if f.iter().zip(&idx).any(|(&v, &i)| v < 0.0 || v != i as f64) {
                return Err(Error::Format("template face indices must be nonnegative integers".into()));
            }
            Ok([idx[0], idx[1], idx[2]])
        })
        .collect::<Result<Vec<_>>>()?;
    let template = ModelTemplate {
        taxon: entry.taxon,
        rest_vertices: get("rest_vertices")?,
        faces,
        shape_basis: get("shape_basis")?,
        skin_weights: get("skin_weights")?,
        joint_regressor: get("joint_regressor")?,
        parents: entry.parents,
        keypoint_map: entry.keypoint_map,
        head_tail: entry.head_tail,
    };
    template.validate()?;
    Ok(template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::toy_template;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for taxon in Taxon::ALL {
            let t = toy_template(taxon);
            save_template(dir.path(), taxon.name(), &t).unwrap();
            let back = load_template(&dir.path().join(format!("{}.json", taxon.name()))).unwrap();
            assert_eq!(back, t);
        }
    }
}
