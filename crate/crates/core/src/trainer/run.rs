use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, RngState};
use super::config::{Stage, TrainConfig};
use super::optim::{lr_at_step, AdamW};
use super::sampler::{DatasetInfo, WeightedSampler};
use crate::bodymodel::{ModelTemplate, Taxon};
use crate::camera::CameraSpec;
use crate::datagen::{Dataset, LoadedRecord};
use crate::error::{invalid, Error, Result};
use crate::losses::{batch_loss_graph, LossContext, PriorDistribution, SampleTargets, Targets2d, Targets3d};
use crate::network::{patchify, NetworkConfig, NetworkState};
use crate::numkernel::{Graph, Tensor};

/// RNG stream of the batch sampler; stream 0 of the same seed initializes
/// the network.
const SAMPLER_STREAM: u64 = 1;

/// One record in training form: image patches and loss targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub patches: Tensor,
    pub targets: SampleTargets,
}

impl PreparedSample {
    pub fn from_record(record: &LoadedRecord, config: &NetworkConfig) -> Result<Self> {
        let targets = SampleTargets {
            taxon: record.taxon,
            family: record.family,
            targets_3d: record.has_3d.then(|| Targets3d { params: record.params.clone(), keypoints3d: record.keypoints3d.clone() }),
            targets_2d: Targets2d { keypoints2d: record.keypoints2d.clone(), visible: record.visible.clone(), mask: record.mask_tensor() },
        };
        Ok(Self { patches: patchify(&record.image, config)?, targets })
    }
}

/// A named training dataset.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub name: String,
    pub has_3d: bool,
    pub samples: Vec<PreparedSample>,
}

/// All training inputs: datasets plus the templates, priors and camera
/// intrinsics they share.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub sets: Vec<TrainingSet>,
    /// Indexed by [`Taxon::index`].
    pub templates: Vec<ModelTemplate>,
    /// Indexed by [`Taxon::index`].
    pub priors: Vec<PriorDistribution>,
    pub camera: CameraSpec,
}

impl TrainingData {
    /// Every taxon must occur in some dataset; templates and intrinsics must
    /// agree across datasets; each taxon's prior comes from the first
    /// dataset that contains it. A dataset must be all-3D or all-2D.
    pub fn from_datasets(datasets: &[Dataset], config: &NetworkConfig) -> Result<Self> {
        let first = datasets.first().ok_or_else(|| invalid!("no training datasets"))?;
        let camera = first.manifest.camera.clone();
        let mut templates: Vec<Option<ModelTemplate>> = vec![None; Taxon::ALL.len()];
        let mut priors: Vec<Option<PriorDistribution>> = vec![None; Taxon::ALL.len()];
        let mut sets = Vec::with_capacity(datasets.len());
        for ds in datasets {
            if ds.manifest.camera != camera {
                return Err(invalid!("dataset {:?} uses different camera intrinsics", ds.manifest.name));
            }
            for taxon in Taxon::ALL {
                let Ok(t) = ds.template(taxon) else { continue };
                match &templates[taxon.index()] {
                    Some(existing) if existing != t => return Err(invalid!("dataset {:?} uses a different {taxon} template", ds.manifest.name)),
                    Some(_) => {}
                    None => templates[taxon.index()] = Some(t.clone()),
                }
                if priors[taxon.index()].is_none() && ds.records.iter().any(|r| r.taxon == taxon) {
                    priors[taxon.index()] = Some(ds.prior(taxon)?.clone());
                }
            }
            let has_3d = ds.records.first().is_some_and(|r| r.has_3d);
            if ds.records.iter().any(|r| r.has_3d != has_3d) {
                return Err(invalid!("dataset {:?} mixes 3D and 2D-only records", ds.manifest.name));
            }
            if sets.iter().any(|s: &TrainingSet| s.name == ds.manifest.name) {
                return Err(invalid!("two training datasets are named {:?}", ds.manifest.name));
            }
            let samples = ds.records.par_iter().map(|r| PreparedSample::from_record(r, config)).collect::<Result<Vec<_>>>()?;
            sets.push(TrainingSet { name: ds.manifest.name.clone(), has_3d, samples });
        }
        let templates = templates.into_iter().zip(Taxon::ALL).map(|(t, x)| t.ok_or_else(|| invalid!("no training dataset provides a {x} template"))).collect::<Result<_>>()?;
        let priors = priors.into_iter().zip(Taxon::ALL).map(|(p, x)| p.ok_or_else(|| invalid!("no training dataset contains {x} records"))).collect::<Result<_>>()?;
        Ok(Self { sets, templates, priors, camera })
    }

    pub fn infos(&self) -> Vec<DatasetInfo> {
        self.sets.iter().map(|s| DatasetInfo { name: s.name.clone(), len: s.samples.len(), has_3d: s.has_3d }).collect()
    }

    pub fn sampler(&self, config: &TrainConfig, stage: Stage) -> Result<WeightedSampler> {
        let weights: Vec<f64> = self.sets.iter().map(|s| config.weight_of(&s.name)).collect();
        WeightedSampler::new(&self.infos(), &weights, stage)
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Completed steps in the stage after this one.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_con: f64,
    pub samples_3d: usize,
    pub samples_2d_only: usize,
    /// The optimizer skipped the update (non-finite gradient).
    pub skipped: bool,
}

/// Two-stage trainer; all state needed for bit-exact resumption is in
/// [`Trainer::checkpoint`].
#[derive(Clone, Debug)]
pub struct Trainer {
    pub network_config: NetworkConfig,
    pub train_config: TrainConfig,
    pub state: NetworkState,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub stage: Stage,
    pub step: usize,
    pub loss_trace: Vec<f64>,
    pub consumed_2d_only: u64,
}

impl Trainer {
    /// Fresh network (initialized from `train_config.seed`) at stage 1,
    /// step 0.
    pub fn new(network_config: NetworkConfig, train_config: TrainConfig) -> Result<Self> {
        train_config.validate()?;
        let state = NetworkState::init(&network_config, train_config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Self { network_config, train_config, state, optimizer: AdamW::new(), rng, stage: Stage::One, step: 0, loss_trace: Vec::new(), consumed_2d_only: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train_config.validate()?;
        Ok(Self {
            rng: ck.rng.restore()?,
            network_config: ck.network_config,
            train_config: ck.train_config,
            state: ck.state,
            optimizer: ck.optimizer,
            stage: ck.stage,
            step: ck.step,
            loss_trace: ck.loss_trace,
            consumed_2d_only: ck.consumed_2d_only,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            step: self.step,
            network_config: self.network_config.clone(),
            train_config: self.train_config.clone(),
            state: self.state.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            loss_trace: self.loss_trace.clone(),
            consumed_2d_only: self.consumed_2d_only,
        }
    }

    pub fn stage_steps(&self) -> usize {
        self.train_config.stage_steps(self.stage)
    }

    pub fn is_stage_complete(&self) -> bool {
        self.step == self.stage_steps()
    }

    /// Switches to `stage` at step 0: the LR schedule restarts, the loss
    /// trace and 2D-only counter reset, the moments are kept unless
    /// `reset_moments_stage2`. The network and sampler RNG continue.
    pub fn start_stage(&mut self, stage: Stage) {
        self.stage = stage;
        self.step = 0;
        self.loss_trace.clear();
        self.consumed_2d_only = 0;
        if stage == Stage::Two && self.train_config.reset_moments_stage2 {
            self.optimizer = AdamW::new();
        }
    }

    /// One step: draw a batch, build the Eq. 3 graph, backpropagate and
    /// update. A non-finite loss aborts with [`Error::Diverged`] and leaves
    /// the trainer exactly as before the call.
    pub fn train_step(&mut self, data: &TrainingData, sampler: &WeightedSampler) -> Result<StepReport> {
        let total_steps = self.stage_steps();
        if self.step >= total_steps {
            return Err(invalid!("stage {} is already complete ({total_steps} steps)", self.stage));
        }
        let rng_before = self.rng.clone();
        let draws: Vec<(usize, usize)> = (0..self.train_config.batch_size).map(|_| sampler.draw(&mut self.rng)).collect();
        let batch: Vec<(Tensor, SampleTargets)> = draws
            .iter()
            .map(|&(d, i)| {
                let s = &data.sets[d].samples[i];
                (s.patches.clone(), s.targets.clone())
            })
            .collect();
        let samples_2d_only = draws.iter().filter(|&&(d, _)| !data.sets[d].has_3d).count();
        let ctx = LossContext { templates: &data.templates, priors: &data.priors, camera: &data.camera, weights: &self.train_config.loss_weights };
        let mut g = Graph::new();
        let vars = batch_loss_graph(&mut g, &self.state, &self.network_config, &batch, &ctx)?;
        let loss = g.value(vars.total).item();
        if !loss.is_finite() {
            self.rng = rng_before;
            return Err(Error::Diverged { step: self.step, loss });
        }
        let grads = g.backward(vars.total)?;
        let named: BTreeMap<String, Tensor> = g.params().into_iter().filter_map(|(name, v)| grads.wrt(v).map(|t| (name, t.clone()))).collect();
        let lr = lr_at_step(self.step, total_steps, self.train_config.base_lr)?;
        let applied = self.optimizer.step(&mut self.state.params, &named, lr, &self.train_config.optimizer)?;
        self.step += 1;
        self.loss_trace.push(loss);
        self.consumed_2d_only += samples_2d_only as u64;
        Ok(StepReport {
            step: self.step,
            lr,
            loss,
            loss_con: g.value(vars.loss_con).item(),
            samples_3d: batch.iter().filter(|(_, t)| t.targets_3d.is_some()).count(),
            samples_2d_only,
            skipped: !applied,
        })
    }

    /// Runs at most `max_steps` steps (all remaining when `None`) of the
    /// current stage. `on_checkpoint` receives a checkpoint every
    /// `checkpoint_every` steps and when the stage completes.
    pub fn run(&mut self, data: &TrainingData, max_steps: Option<usize>, on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>) -> Result<Vec<StepReport>> {
        let sampler = data.sampler(&self.train_config, self.stage)?;
        let end = max_steps.map_or(self.stage_steps(), |n| (self.step + n).min(self.stage_steps()));
        let every = self.train_config.checkpoint_every;
        let mut reports = Vec::with_capacity(end.saturating_sub(self.step));
        while self.step < end {
            let r = self.train_step(data, &sampler)?;
            if r.step % 50 == 0 || r.step == 1 {
                log::info!("stage {} step {}/{} lr {:.3e} loss {:.5} con {:.4}", self.stage, r.step, self.stage_steps(), r.lr, r.loss, r.loss_con);
            }
            let due = (every > 0 && r.step % every == 0) || self.is_stage_complete();
            reports.push(r);
            if due {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(reports)
    }

    /// [`Trainer::start_stage`] followed by a full [`Trainer::run`].
    pub fn run_stage(&mut self, data: &TrainingData, stage: Stage, on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>) -> Result<Vec<StepReport>> {
        self.start_stage(stage);
        self.run(data, None, on_checkpoint)
    }
}
