use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::GenConfig;
use super::sample::{cycle_consistency_filter, perturb_mask, sample_body_params, synthesize_sample, SampleRecord};
use crate::bodymodel::{BodyParams, ModelTemplate, Taxon};
use crate::camera::CameraSpec;
use crate::error::{invalid, Error, Result};
use crate::io::{encode_depth, load_template, save_template, write_blob_file, write_pgm, TensorBlob};
use crate::losses::{load_priors, save_priors, PriorDistribution};
use crate::numkernel::Tensor;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRIORS_FILE: &str = "priors.bin";

/// Ridge added to fitted covariances so they stay positive definite.
pub const PRIOR_RIDGE: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaxonStats {
    pub requested: usize,
    pub kept: usize,
    pub attempts: usize,
    pub dropped_iou: usize,
    pub dropped_degenerate: usize,
    pub truncated_kept: usize,
}

impl TaxonStats {
    pub fn drop_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            (self.dropped_iou + self.dropped_degenerate) as f64 / self.attempts as f64
        }
    }
}

/// Byte span of one blob inside a shard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobSpan {
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: usize,
    pub taxon: Taxon,
    pub family: usize,
    pub has_3d: bool,
    pub truncated: bool,
    /// IoU of the simulated segmentation against the rendered mask.
    pub iou: f64,
    /// Index of the generation attempt; with the master seed it determines
    /// the record.
    pub attempt: u64,
    pub shard: String,
    pub blobs: BTreeMap<String, BlobSpan>,
    pub mask_pgm: Option<String>,
    pub depth_raster: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub config: GenConfig,
    /// Shared intrinsics (translation zero); per-record translations are
    /// stored in the shards.
    pub camera: CameraSpec,
    /// Template JSON file per taxon name.
    pub templates: BTreeMap<String, String>,
    pub priors: String,
    pub stats: BTreeMap<String, TaxonStats>,
    pub family_counts: BTreeMap<usize, usize>,
    pub records: Vec<RecordEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!("{}: manifest schema version {} is not supported", path.display(), m.schema_version)));
        }
        Ok(m)
    }
}

/// Stream id of attempt `a` of `taxon`: every attempt draws from its own
/// ChaCha stream of the master seed.
pub fn attempt_rng(seed: u64, taxon: Taxon, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((taxon.index() as u64) << 48) | attempt);
    rng
}

/// Outcome of one generation attempt before acceptance.
#[derive(Clone, Debug)]
pub struct Attempt {
    pub record: SampleRecord,
    pub keep: bool,
    pub iou: f64,
}

/// Runs generation attempt `attempt` of `template.taxon`: sample, render,
/// perturb, filter. A pure function of its arguments.
pub fn run_attempt(seed: u64, attempt: u64, template: &ModelTemplate, config: &GenConfig) -> Result<Attempt> {
    let mut rng = attempt_rng(seed, template.taxon, attempt);
    let (params, camera, family) = sample_body_params(&mut rng, template.taxon, template, config)?;
    let record = synthesize_sample(&params, &camera, family, template, config)?;
    let perturbed = perturb_mask(&record.mask, &config.perturbation, &mut rng);
    let (keep, iou) = cycle_consistency_filter(&record, &perturbed, config.iou_threshold)?;
    Ok(Attempt { record, keep, iou })
}

/// Generates kept records for one taxon in attempt order. Attempts are
/// evaluated in parallel; acceptance is sequential, so the result does not
/// depend on the thread count.
fn generate_taxon(seed: u64, template: &ModelTemplate, config: &GenConfig) -> Result<(Vec<(u64, SampleRecord, f64)>, TaxonStats)> {
    let requested = config.count(template.taxon);
    let max_attempts = (requested * config.max_attempts_factor) as u64;
    let mut stats = TaxonStats { requested, ..TaxonStats::default() };
    let mut kept = Vec::with_capacity(requested);
    let mut next = 0u64;
    while kept.len() < requested {
        if next >= max_attempts {
            return Err(invalid!(
                "{}: only {} of {requested} records passed the filter after {max_attempts} attempts (iou_threshold {})",
                template.taxon,
                kept.len(),
                config.iou_threshold
            ));
        }
        let chunk = ((requested - kept.len()) as u64 + 8).min(max_attempts - next);
        let results: Vec<Result<Attempt>> = (next..next + chunk).into_par_iter().map(|a| run_attempt(seed, a, template, config)).collect();
        for (a, r) in (next..next + chunk).zip(results) {
            if kept.len() == requested {
                break;
            }
            let r = r?;
            stats.attempts += 1;
            if r.keep {
                stats.truncated_kept += usize::from(r.record.truncated);
                kept.push((a, r.record, r.iou));
            } else if r.record.degenerate {
                stats.dropped_degenerate += 1;
            } else {
                stats.dropped_iou += 1;
            }
        }
        next += chunk;
    }
    stats.kept = kept.len();
    Ok((kept, stats))
}

fn record_blobs(id: usize, r: &SampleRecord) -> Vec<TensorBlob> {
    let p = format!("r{id}");
    let image: Vec<f32> = r.image.data().iter().map(|&v| v as f32).collect();
    let mut blobs = vec![
        TensorBlob::f32(format!("{p}.image"), r.image.shape().to_vec(), &image),
        TensorBlob::f64(format!("{p}.beta"), &Tensor::row(r.params.beta.clone())),
        TensorBlob::f64(format!("{p}.theta"), &r.params.theta_tensor()),
        TensorBlob::f64(format!("{p}.translation"), &Tensor::row(r.camera.translation.to_vec())),
        TensorBlob::f64(format!("{p}.keypoints3d"), &r.keypoints3d),
        TensorBlob::f64(format!("{p}.keypoints2d"), &r.keypoints2d),
        TensorBlob::u8(format!("{p}.visible"), vec![r.visible.len()], r.visible.iter().map(|&v| u8::from(v)).collect()),
    ];
    if let Some(a) = &r.params.alpha {
        blobs.push(TensorBlob::f64(format!("{p}.alpha"), &Tensor::row(a.clone())));
    }
    blobs
}

fn blob_field(name: &str) -> &str {
    name.split_once('.').map_or(name, |(_, f)| f)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn mean_and_covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Tensor) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            let c = if rows.len() > 1 { rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0) } else { f64::from(u8::from(i == j)) };
            cov.set(i, j, c + if i == j { PRIOR_RIDGE } else { 0.0 });
        }
    }
    (mean, cov)
}

/// Fits the Eq. 6/7 statistics to a set of parameter samples: empirical
/// means and ridge-regularized covariances; for avian models θ̄ and ᾱ are
/// the empirical means.
pub fn fit_prior(taxon: Taxon, params: &[&BodyParams]) -> Result<PriorDistribution> {
    if params.is_empty() {
        return Err(invalid!("cannot fit a {taxon} prior to zero samples"));
    }
    let betas: Vec<Vec<f64>> = params.iter().map(|p| p.beta.clone()).collect();
    let thetas: Vec<Vec<f64>> = params.iter().map(|p| p.theta.iter().flatten().copied().collect()).collect();
    let (mu_beta, sigma_beta) = mean_and_covariance(&betas);
    let (mu_theta, sigma_theta) = mean_and_covariance(&thetas);
    let (theta_bar, alpha_bar) = if taxon.has_bone_scale() {
        let alphas: Vec<Vec<f64>> = params.iter().map(|p| p.alpha.clone().ok_or_else(|| invalid!("avian sample without alpha"))).collect::<Result<_>>()?;
        (Some(mu_theta.clone()), Some(mean_and_covariance(&alphas).0))
    } else {
        (None, None)
    };
    PriorDistribution::new(taxon, mu_beta, sigma_beta, mu_theta, sigma_theta, theta_bar, alpha_bar)
}

/// Generates, filters and writes a dataset: `manifest.json`, blob shards,
/// templates, fitted priors and (optionally) per-record PGM masks and
/// depth rasters. Output is a pure function of `(config, templates, seed)`.
pub fn build_dataset(config: &GenConfig, templates: &[ModelTemplate], out_dir: &Path, seed: u64) -> Result<Manifest> {
    config.validate()?;
    for (i, t) in templates.iter().enumerate() {
        t.validate()?;
        if t.taxon.index() != i {
            return Err(invalid!("templates must be ordered by taxon index"));
        }
    }
    create_dir(out_dir)?;
    create_dir(&out_dir.join("shards"))?;
    if config.write_rasters {
        create_dir(&out_dir.join("masks"))?;
        create_dir(&out_dir.join("depth"))?;
    }
    let mut template_files = BTreeMap::new();
    for t in templates {
        save_template(&out_dir.join("templates"), t.taxon.name(), t)?;
        template_files.insert(t.taxon.name().to_string(), format!("templates/{}.json", t.taxon.name()));
    }

    let mut all = Vec::new();
    let mut stats = BTreeMap::new();
    for t in templates {
        if config.count(t.taxon) == 0 {
            continue;
        }
        let (kept, s) = generate_taxon(seed, t, config)?;
        log::info!("{}: kept {} of {} attempts ({:.1}% dropped)", t.taxon, s.kept, s.attempts, 100.0 * s.drop_rate());
        stats.insert(t.taxon.name().to_string(), s);
        all.extend(kept);
    }

    let mut priors = Vec::new();
    for t in templates {
        let ps: Vec<&BodyParams> = all.iter().filter(|(_, r, _)| r.taxon == t.taxon).map(|(_, r, _)| &r.params).collect();
        if !ps.is_empty() {
            priors.push(fit_prior(t.taxon, &ps)?);
        }
    }
    if priors.is_empty() {
        return Err(invalid!("dataset has no records"));
    }
    save_priors(&out_dir.join(PRIORS_FILE), &priors)?;

    let mut records = Vec::with_capacity(all.len());
    let mut family_counts = BTreeMap::new();
    for (shard_index, chunk) in all.chunks(config.records_per_shard).enumerate() {
        let shard = format!("shards/shard-{shard_index:04}.bin");
        let first_id = shard_index * config.records_per_shard;
        let per_record: Vec<Vec<TensorBlob>> = chunk.iter().enumerate().map(|(k, (_, r, _))| record_blobs(first_id + k, r)).collect();
        let flat: Vec<TensorBlob> = per_record.iter().flatten().cloned().collect();
        let spans = write_blob_file(&out_dir.join(&shard), &flat)?;
        let mut span_iter = spans.into_iter();
        for (k, ((attempt, r, iou), blobs)) in chunk.iter().zip(&per_record).enumerate() {
            let id = first_id + k;
            let blob_spans = blobs
                .iter()
                .map(|b| {
                    let (offset, length) = span_iter.next().expect("one span per blob");
                    (blob_field(&b.name).to_string(), BlobSpan { offset, length })
                })
                .collect();
            let (mask_pgm, depth_raster) = if config.write_rasters {
                let m = format!("masks/{id:06}.pgm");
                write_pgm(&out_dir.join(&m), &r.mask)?;
                let d = format!("depth/{id:06}.depth");
                let path = out_dir.join(&d);
                std::fs::write(&path, encode_depth(r.camera.height, r.camera.width, &r.depth)?).map_err(|e| Error::io(&path, e))?;
                (Some(m), Some(d))
            } else {
                (None, None)
            };
            *family_counts.entry(r.family).or_insert(0) += 1;
            records.push(RecordEntry {
                id,
                taxon: r.taxon,
                family: r.family,
                has_3d: r.has_3d,
                truncated: r.truncated,
                iou: *iou,
                attempt: *attempt,
                shard: shard.clone(),
                blobs: blob_spans,
                mask_pgm,
                depth_raster,
            });
        }
    }

    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        name: config.name.clone(),
        seed,
        config: config.clone(),
        camera: config.camera(),
        templates: template_files,
        priors: PRIORS_FILE.into(),
        stats,
        family_counts,
        records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A record as read back for training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedRecord {
    pub id: usize,
    pub taxon: Taxon,
    pub family: usize,
    pub has_3d: bool,
    pub params: BodyParams,
    pub camera: CameraSpec,
    pub keypoints3d: Tensor,
    pub keypoints2d: Tensor,
    pub visible: Vec<bool>,
    /// `H x W x 2`.
    pub image: Tensor,
}

impl LoadedRecord {
    /// Channel 0 of the image: the ground-truth silhouette as `H x W`.
    pub fn mask_tensor(&self) -> Tensor {
        let (h, w) = (self.image.shape()[0], self.image.shape()[1]);
        Tensor::matrix(h, w, self.image.data().iter().step_by(2).copied().collect())
    }
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<LoadedRecord>,
    /// Indexed by taxon index; `None` for taxa absent from the dataset.
    pub templates: Vec<Option<ModelTemplate>>,
    pub priors: Vec<PriorDistribution>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let mut shards: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut records = Vec::with_capacity(manifest.records.len());
        for e in &manifest.records {
            if !shards.contains_key(&e.shard) {
                let path = dir.join(&e.shard);
                shards.insert(e.shard.clone(), std::fs::read(&path).map_err(|err| Error::io(&path, err))?);
            }
            let bytes = &shards[&e.shard];
            let get = |field: &str| -> Result<TensorBlob> {
                let span = e.blobs.get(field).ok_or_else(|| Error::Format(format!("record {} has no {field} blob", e.id)))?;
                let (start, end) = (span.offset as usize, (span.offset + span.length) as usize);
                if end > bytes.len() || start > end {
                    return Err(Error::Format(format!("{}: span {}+{} out of range", e.shard, span.offset, span.length)));
                }
                let blob = TensorBlob::read_from(&mut &bytes[start..end])?;
                if blob.name != format!("r{}.{field}", e.id) || blob.encoded_len() as u64 != span.length {
                    return Err(Error::Format(format!("{}: blob at {} is {:?}, expected r{}.{field}", e.shard, span.offset, blob.name, e.id)));
                }
                Ok(blob)
            };
            let t = get("translation")?.values();
            let params = BodyParams {
                beta: get("beta")?.values(),
                theta: get("theta")?.to_tensor()?.to_rows3(),
                alpha: if e.taxon.has_bone_scale() { Some(get("alpha")?.values()) } else { None },
                gamma: [0.0; 3],
            };
            records.push(LoadedRecord {
                id: e.id,
                taxon: e.taxon,
                family: e.family,
                has_3d: e.has_3d,
                params,
                camera: manifest.camera.with_translation([t[0], t[1], t[2]]),
                keypoints3d: get("keypoints3d")?.to_tensor()?,
                keypoints2d: get("keypoints2d")?.to_tensor()?,
                visible: get("visible")?.payload.iter().map(|&b| b != 0).collect(),
                image: get("image")?.to_tensor()?,
            });
        }
        let mut templates = vec![None; Taxon::ALL.len()];
        for (name, file) in &manifest.templates {
            let taxon: Taxon = name.parse()?;
            templates[taxon.index()] = Some(load_template(&dir.join(file))?);
        }
        let priors = load_priors(&dir.join(&manifest.priors))?;
        Ok(Self { dir: dir.to_path_buf(), manifest, records, templates, priors })
    }

    pub fn template(&self, taxon: Taxon) -> Result<&ModelTemplate> {
        self.templates.get(taxon.index()).and_then(Option::as_ref).ok_or(Error::UnknownTaxon(taxon.index()))
    }

    pub fn prior(&self, taxon: Taxon) -> Result<&PriorDistribution> {
        self.priors.iter().find(|p| p.taxon == taxon).ok_or(Error::UnknownTaxon(taxon.index()))
    }
}
