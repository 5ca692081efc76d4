use std::path::Path;

use super::*;
use crate::bodymodel::{toy_template, Taxon};
use crate::datagen::{build_dataset, Dataset, GenConfig};
use crate::network::NetworkConfig;

fn make(dir: &Path, name: &str, n: usize, has_3d: bool, seed: u64) -> Dataset {
    let ts: Vec<_> = Taxon::ALL.iter().map(|&t| toy_template(t)).collect();
    let cfg = GenConfig { name: name.into(), quadruped_count: n, avian_count: n, write_rasters: false, has_3d, ..GenConfig::default() };
    build_dataset(&cfg, &ts, &dir.join(name), seed).unwrap();
    Dataset::load(&dir.join(name)).unwrap()
}

fn setup(dir: &Path) -> (NetworkConfig, TrainingData) {
    let a = make(dir, "synth3d", 6, true, 1);
    let b = make(dir, "synth2d", 6, false, 2);
    let net = NetworkConfig::toy(a.template(Taxon::Quadruped).unwrap(), a.template(Taxon::Avian).unwrap());
    let data = TrainingData::from_datasets(&[a, b], &net).unwrap();
    (net, data)
}

fn config() -> TrainConfig {
    TrainConfig { stage1_steps: 6, stage2_steps: 4, batch_size: 4, seed: 5, checkpoint_every: 3, ..TrainConfig::default() }
}

fn run_all(net: &NetworkConfig, data: &TrainingData) -> (Trainer, Vec<Checkpoint>) {
    let mut t = Trainer::new(net.clone(), config()).unwrap();
    let mut cks = Vec::new();
    t.run_stage(data, Stage::One, &mut |c| {
        cks.push(c.clone());
        Ok(())
    })
    .unwrap();
    t.run_stage(data, Stage::Two, &mut |c| {
        cks.push(c.clone());
        Ok(())
    })
    .unwrap();
    (t, cks)
}

#[test]
fn deterministic_and_resume_equivalent() {
    let dir = tempfile::tempdir().unwrap();
    let (net, data) = setup(dir.path());
    let (a, cks_a) = run_all(&net, &data);
    let (b, _) = run_all(&net, &data);
    assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());
    // Stage 1: checkpoints at steps 3 and 6; stage 2: at step 3 and 4.
    assert_eq!(cks_a.iter().map(|c| (c.stage, c.step)).collect::<Vec<_>>(), vec![(Stage::One, 3), (Stage::One, 6), (Stage::Two, 3), (Stage::Two, 4)]);

    // Interrupt at stage 1 step 3, reload from bytes, finish.
    let path = dir.path().join("ck/mid.ckpt");
    cks_a[0].save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, cks_a[0]);
    let mut r = Trainer::from_checkpoint(loaded).unwrap();
    r.run(&data, None, &mut |_| Ok(())).unwrap();
    assert_eq!(r.checkpoint(), cks_a[1]);
    r.run_stage(&data, Stage::Two, &mut |_| Ok(())).unwrap();
    assert_eq!(r.checkpoint().to_bytes().unwrap(), a.checkpoint().to_bytes().unwrap());
    assert!(a.loss_trace.iter().all(|l| l.is_finite()));
}

#[test]
fn stage_one_never_consumes_2d_only_samples() {
    let dir = tempfile::tempdir().unwrap();
    let (net, data) = setup(dir.path());
    let mut t = Trainer::new(net, TrainConfig { stage1_steps: 5, batch_size: 4, ..TrainConfig::default() }).unwrap();
    let reports = t.run(&data, None, &mut |_| Ok(())).unwrap();
    assert!(reports.iter().all(|r| r.samples_2d_only == 0 && r.samples_3d == 4));
    assert_eq!(t.consumed_2d_only, 0);
    t.start_stage(Stage::Two);
    let sampler = data.sampler(&t.train_config, Stage::Two).unwrap();
    assert_eq!(sampler.probabilities(), &[0.5, 0.5]);
}

#[test]
fn checkpoint_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let (net, _) = setup(dir.path());
    let t = Trainer::new(net, config()).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    assert_eq!(&bytes[..8], b"ANIMERCK");
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), t.checkpoint());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut v2 = bytes;
    v2[8] = 2;
    assert!(Checkpoint::from_bytes(&v2).is_err());
}

#[test]
fn oracle_and_random_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make(dir.path(), "test", 8, true, 9);
    let preds: Vec<_> = ds.records.iter().map(oracle_prediction).collect();
    let r = evaluate_predictions(&ds, &preds).unwrap();
    for m in std::iter::once(&r.overall).chain(r.per_taxon.values()) {
        assert!(m.pa_mpjpe_mm.unwrap() <= 1e-9 && m.pa_mpvpe_mm.unwrap() <= 1e-9 && m.pa_cd_mm.unwrap() <= 1e-9, "{m:?}");
        for k in ["0.1", "0.15", "hth"] {
            assert_eq!(m.pck[k], Some(1.0));
        }
        assert!(m.auc.unwrap() >= 0.99);
    }
    let net = NetworkConfig::toy(ds.template(Taxon::Quadruped).unwrap(), ds.template(Taxon::Avian).unwrap());
    let state = crate::network::NetworkState::init(&net, 0).unwrap();
    let r = evaluate_model(&state, &net, &ds).unwrap();
    assert!(r.overall.pa_mpjpe_mm.unwrap().is_finite() && r.overall.auc.unwrap().is_finite());
    assert_eq!(r.per_taxon.len(), 2);
    let back: EvaluationReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);

    let two_d = make(dir.path(), "test2d", 4, false, 9);
    let preds: Vec<_> = two_d.records.iter().map(oracle_prediction).collect();
    let r = evaluate_predictions(&two_d, &preds).unwrap();
    assert_eq!(r.overall.pa_mpjpe_mm, None);
    assert_eq!(r.overall.pck["0.1"], Some(1.0));
}
