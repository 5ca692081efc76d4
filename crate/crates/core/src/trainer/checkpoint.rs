use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Stage, TrainConfig};
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::io::{read_u32, TensorBlob};
use crate::network::{NetworkConfig, NetworkState};
use crate::numkernel::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ANIMERCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key as lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// `u128` word position as a decimal string (JSON numbers are not
    /// guaranteed to carry 128 bits).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("invalid RNG state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// JSON block of a checkpoint; tensors follow as blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    step: usize,
    network: NetworkConfig,
    train: TrainConfig,
    rng: RngState,
    adam_steps: BTreeMap<String, u64>,
    loss_trace: Vec<f64>,
    consumed_2d_only: u64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Completed steps within `stage`.
    pub step: usize,
    pub network_config: NetworkConfig,
    pub train_config: TrainConfig,
    pub state: NetworkState,
    pub optimizer: AdamW,
    pub rng: RngState,
    /// Batch loss of every completed step of the stage.
    pub loss_trace: Vec<f64>,
    /// Samples drawn from datasets without 3D annotations so far.
    pub consumed_2d_only: u64,
}

const PARAM: &str = "param/";
const FIRST: &str = "adam_m/";
const SECOND: &str = "adam_v/";

impl Checkpoint {
    /// `"ANIMERCK"`, u32 version, u64 JSON length, JSON header, then f64
    /// blobs `param/<name>`, `adam_m/<name>`, `adam_v/<name>`. Little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            step: self.step,
            network: self.network_config.clone(),
            train: self.train_config.clone(),
            rng: self.rng.clone(),
            adam_steps: self.optimizer.steps.clone(),
            loss_trace: self.loss_trace.clone(),
            consumed_2d_only: self.consumed_2d_only,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let groups = [(PARAM, &self.state.params), (FIRST, &self.optimizer.first), (SECOND, &self.optimizer.second)];
        for (prefix, map) in groups {
            for (name, t) in map {
                TensorBlob::f64(format!("{prefix}{name}"), t).write_to(&mut out).expect("Vec write");
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fmt("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic (not an ANIMERCK file)"));
        }
        let version = read_u32(&mut r).map_err(|_| fmt("truncated version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| fmt("truncated header length"))?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| fmt("header length overflows"))?;
        if len > r.len() {
            return Err(fmt("header length exceeds file"));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let (mut params, mut first, mut second) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        while !r.is_empty() {
            let blob = TensorBlob::read_from(&mut r)?;
            let t: Tensor = blob.to_tensor()?;
            let (map, name) = if let Some(n) = blob.name.strip_prefix(PARAM) {
                (&mut params, n)
            } else if let Some(n) = blob.name.strip_prefix(FIRST) {
                (&mut first, n)
            } else if let Some(n) = blob.name.strip_prefix(SECOND) {
                (&mut second, n)
            } else {
                return Err(fmt(&format!("unexpected blob {:?}", blob.name)));
            };
            map.insert(name.to_string(), t);
        }
        let ck = Self {
            stage: header.stage,
            step: header.step,
            network_config: header.network,
            train_config: header.train,
            state: NetworkState { params },
            optimizer: AdamW { first, second, steps: header.adam_steps },
            rng: header.rng,
            loss_trace: header.loss_trace,
            consumed_2d_only: header.consumed_2d_only,
        };
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<()> {
        let fresh = NetworkState::init(&self.network_config, 0)?;
        let same_layout = fresh.params.len() == self.state.params.len()
            && fresh.params.iter().all(|(k, t)| self.state.params.get(k).is_some_and(|p| p.shape() == t.shape()));
        if !same_layout {
            return Err(Error::Format("checkpoint tensors do not match its network config".into()));
        }
        let o = &self.optimizer;
        let moments_ok = o.first.keys().eq(o.second.keys())
            && o.first.keys().eq(o.steps.keys())
            && o.first.iter().all(|(k, m)| self.state.params.get(k).is_some_and(|p| p.shape() == m.shape()));
        if !moments_ok {
            return Err(Error::Format("checkpoint optimizer moments are inconsistent".into()));
        }
        if self.loss_trace.len() != self.step || self.step > self.train_config.stage_steps(self.stage) {
            return Err(Error::Format("checkpoint step counter is inconsistent".into()));
        }
        self.rng.restore().map(|_| ())
    }

    /// Writes via a temporary file and rename, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn is_stage_complete(&self) -> bool {
        self.step == self.train_config.stage_steps(self.stage)
    }
}
