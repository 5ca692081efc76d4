use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;

use animer::bodymodel::{model_forward, toy_template, BodyParams, ModelTemplate, Taxon};
use animer::datagen::{build_dataset, Dataset, LoadedRecord};
use animer::io::write_obj;
use animer::network::{predict, NetworkConfig, PredictedParams};
use animer::trainer::{evaluate_model, Checkpoint, Stage, StepReport, Trainer, TrainingData};
use animer::Error;

use crate::files::{apply_network_overrides, load_gen_config, load_train_config, write_json};
use crate::{usage, EvalArgs, ExportObjArgs, Format, GenDataArgs, InferArgs, TrainArgs};

/// Rolling checkpoint written on cadence, at stage end and on divergence.
pub const LATEST: &str = "latest";
/// Checkpoint of the most recently completed stage.
pub const FINAL: &str = "final";

pub fn stage_checkpoint_name(stage: Stage) -> String {
    format!("stage{}", stage.number())
}

pub fn gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let (config, template_spec) = load_gen_config(args.config.as_deref())?;
    let templates = template_spec.build()?;
    let manifest = build_dataset(&config, &templates, &args.out, args.seed).with_context(|| format!("generating dataset in {}", args.out.display()))?;
    println!("dataset {:?}: {} records in {}", manifest.name, manifest.records.len(), args.out.display());
    for (taxon, s) in &manifest.stats {
        println!("  {taxon:<10} kept {:>6}/{:<6} attempts {:>7}  drop rate {:.3}", s.kept, s.requested, s.attempts, s.drop_rate());
    }
    Ok(())
}

fn load_datasets(dirs: &[PathBuf]) -> anyhow::Result<Vec<Dataset>> {
    dirs.iter().map(|d| Dataset::load(d).with_context(|| format!("loading dataset {}", d.display()))).collect()
}

/// The toy network sized to the datasets' templates and image resolution.
fn network_for(dataset: &Dataset) -> anyhow::Result<NetworkConfig> {
    let q = dataset.template(Taxon::Quadruped).context("dataset has no quadruped template")?;
    let a = dataset.template(Taxon::Avian).context("dataset has no avian template")?;
    let mut config = NetworkConfig::toy(q, a);
    config.image_height = dataset.manifest.camera.height;
    config.image_width = dataset.manifest.camera.width;
    Ok(config)
}

/// Resolves where training starts: a fresh trainer, or a checkpoint
/// continued within its stage or advanced to the next one.
fn prepare_trainer(args: &TrainArgs, stage: Stage, datasets: &[Dataset]) -> anyhow::Result<Trainer> {
    let resume_path = match (&args.checkpoint, args.resume) {
        (Some(p), _) => Some(p.clone()),
        (None, true) => Some(args.out.join(LATEST)),
        (None, false) => None,
    };
    let Some(path) = resume_path else {
        let mut file = load_train_config(args.config.as_deref())?;
        if let Some(seed) = args.seed {
            file.train.seed = seed;
        }
        let network = apply_network_overrides(&network_for(&datasets[0])?, &file.network_overrides)?;
        if stage == Stage::Two {
            log::warn!("stage 2 starts from a freshly initialized network (no --resume or --checkpoint)");
        }
        let mut trainer = Trainer::new(network, file.train)?;
        trainer.start_stage(stage);
        return Ok(trainer);
    };
    if args.seed.is_some() {
        return Err(usage!("--seed applies to fresh runs; a resumed run continues the checkpoint's RNG"));
    }
    let ck = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (ck_stage, ck_complete) = (ck.stage, ck.is_stage_complete());
    let mut trainer = Trainer::from_checkpoint(ck)?;
    if ck_stage == stage {
        if args.config.is_some() && !ck_complete {
            return Err(usage!("--config cannot change the configuration in the middle of stage {stage}"));
        }
        log::info!("resuming stage {stage} at step {}/{} from {}", trainer.step, trainer.stage_steps(), path.display());
        return Ok(trainer);
    }
    if ck_stage != Stage::One || stage != Stage::Two {
        return Err(usage!("checkpoint {} is in stage {ck_stage}; cannot continue with stage {stage}", path.display()));
    }
    if !ck_complete {
        return Err(usage!("checkpoint {} has not finished stage 1 (step {}/{})", path.display(), trainer.step, trainer.stage_steps()));
    }
    if args.config.is_some() {
        let file = load_train_config(args.config.as_deref())?;
        if !file.network_overrides.is_empty() {
            return Err(usage!("the network configuration is fixed by the checkpoint"));
        }
        trainer.train_config = file.train;
    }
    log::info!("starting stage 2 from {}", path.display());
    trainer.start_stage(Stage::Two);
    Ok(trainer)
}

fn loss_summary(reports: &[StepReport], trainer: &Trainer) -> serde_json::Value {
    let trace = &trainer.loss_trace;
    let ma = |lo: usize, hi: usize| -> Option<f64> { (hi > lo).then(|| trace[lo..hi].iter().sum::<f64>() / (hi - lo) as f64) };
    json!({
        "stage": trainer.stage.number(),
        "step": trainer.step,
        "stage_steps": trainer.stage_steps(),
        "steps_run": reports.len(),
        "skipped_updates": reports.iter().filter(|r| r.skipped).count(),
        "consumed_2d_only": trainer.consumed_2d_only,
        "loss_first10_mean": ma(0, trace.len().min(10)),
        "loss_last10_mean": ma(trace.len().saturating_sub(10), trace.len()),
        "loss_trace": trace,
    })
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let stage = Stage::try_from(args.stage).map_err(|e| usage!("{e}"))?;
    let datasets = load_datasets(&args.data)?;
    let mut trainer = prepare_trainer(args, stage, &datasets)?;
    let data = TrainingData::from_datasets(&datasets, &trainer.network_config)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let latest = args.out.join(LATEST);
    let mut save = |ck: &Checkpoint| -> animer::Result<()> {
        ck.save(&latest)?;
        if ck.is_stage_complete() {
            ck.save(&args.out.join(stage_checkpoint_name(ck.stage)))?;
            ck.save(&args.out.join(FINAL))?;
        }
        Ok(())
    };
    let reports = match trainer.run(&data, None, &mut save) {
        Ok(r) => r,
        Err(e @ Error::Diverged { .. }) => {
            // The trainer is left as it was before the failing step.
            trainer.checkpoint().save(&latest)?;
            return Err(anyhow::Error::new(e).context(format!("training aborted; last good state saved to {}", latest.display())));
        }
        Err(e) => return Err(e.into()),
    };
    if reports.is_empty() && trainer.is_stage_complete() {
        // Resumed a completed stage: make sure its artifacts exist.
        save(&trainer.checkpoint())?;
    }
    let summary = loss_summary(&reports, &trainer);
    write_json(&args.out.join(format!("{}-loss.json", stage_checkpoint_name(stage))), &summary)?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&json!({ "checkpoint": args.out.join(FINAL), "summary": { "stage": summary["stage"], "step": summary["step"], "steps_run": summary["steps_run"], "loss_first10_mean": summary["loss_first10_mean"], "loss_last10_mean": summary["loss_last10_mean"], "consumed_2d_only": summary["consumed_2d_only"] } }))?),
        Format::Table => {
            println!("stage {} complete: {} steps run, step {}/{}", stage, reports.len(), trainer.step, trainer.stage_steps());
            println!("  mean loss first 10 steps {}", summary["loss_first10_mean"]);
            println!("  mean loss last 10 steps  {}", summary["loss_last10_mean"]);
            println!("  2D-only samples consumed {}", trainer.consumed_2d_only);
            println!("  checkpoint               {}", args.out.join(FINAL).display());
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let report = evaluate_model(&ck.state, &ck.network_config, &dataset)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let mut p = args.checkpoint.clone().into_os_string();
        p.push(".metrics.json");
        PathBuf::from(p)
    });
    let json = report.to_json();
    std::fs::write(&out, format!("{json}\n")).with_context(|| format!("writing {}", out.display()))?;
    match args.format {
        Format::Json => println!("{json}"),
        Format::Table => print!("{}", report.to_table()),
    }
    log::info!("metrics written to {}", out.display());
    Ok(())
}

fn find_record(dataset: &Dataset, id: usize) -> anyhow::Result<&LoadedRecord> {
    dataset.records.iter().find(|r| r.id == id).ok_or_else(|| usage!("dataset {} has no record {id}", dataset.dir.display()))
}

fn prediction_json(record: &LoadedRecord, p: &PredictedParams) -> serde_json::Value {
    json!({
        "record": record.id,
        "taxon": record.taxon,
        "beta": p.beta,
        "theta": p.theta,
        "alpha": p.alpha,
        "camera": p.camera,
        "z": p.z,
    })
}

pub fn infer(args: &InferArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let record = find_record(&dataset, args.record)?;
    let pred = predict(&ck.state, &ck.network_config, &record.image, record.taxon)?;
    let value = prediction_json(record, &pred);
    if let Some(out) = &args.out {
        write_json(out, &value)?;
    }
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&value)?),
        Format::Table => {
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
            println!("record {} ({})", record.id, record.taxon);
            println!("  beta    {}", fmt(&pred.beta));
            for (j, t) in pred.theta.iter().enumerate() {
                println!("  theta{j:<2} {}", fmt(t));
            }
            if let Some(a) = &pred.alpha {
                println!("  alpha   {}", fmt(a));
            }
            println!("  camera  {}", fmt(&pred.camera));
        }
    }
    Ok(())
}

fn taxon_arg(s: &str) -> anyhow::Result<Taxon> {
    s.parse().map_err(|_| usage!("unknown taxon {s:?} (expected quadruped or avian)"))
}

pub fn export_obj(args: &ExportObjArgs) -> anyhow::Result<()> {
    let dataset = args.data.as_deref().map(|d| Dataset::load(d).with_context(|| format!("loading dataset {}", d.display()))).transpose()?;
    let (template, params): (ModelTemplate, BodyParams) = match (&args.taxon, args.record, &dataset) {
        (Some(_), Some(_), _) => return Err(usage!("--taxon (rest mesh) and --record are exclusive")),
        (Some(t), None, _) => {
            if args.checkpoint.is_some() {
                return Err(usage!("--checkpoint needs --data and --record"));
            }
            let taxon = taxon_arg(t)?;
            let template = match &dataset {
                Some(d) => d.template(taxon)?.clone(),
                None => toy_template(taxon),
            };
            let params = BodyParams::zeros(&template);
            (template, params)
        }
        (None, Some(id), Some(d)) => {
            let record = find_record(d, id)?;
            let template = d.template(record.taxon)?.clone();
            let params = match &args.checkpoint {
                Some(ck_path) => {
                    let ck = load_checkpoint(ck_path)?;
                    let p = predict(&ck.state, &ck.network_config, &record.image, record.taxon)?;
                    BodyParams { beta: p.beta, theta: p.theta, alpha: p.alpha, gamma: [0.0; 3] }
                }
                None => record.params.clone(),
            };
            (template, params)
        }
        _ => return Err(usage!("export-obj needs --taxon, or --data with --record")),
    };
    let mesh = model_forward(&template, &params)?;
    write_obj(&args.out, &mesh.vertices, &template.faces)?;
    println!("wrote {} ({} vertices, {} faces)", args.out.display(), mesh.vertices.shape()[0], template.faces.len());
    Ok(())
}
