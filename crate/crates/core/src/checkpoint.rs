//! Checkpoints as a single safetensors file: parameter and optimizer tensors plus
//! string metadata carrying the full training setup and its fingerprint.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PmtModel;
use crate::objective::ScheduleState;
use crate::optim::{Adam, AdamConfig};
use crate::train::{snapshot, TrainSetup};

pub const CHECKPOINT_FORMAT: &str = "pmt-iqa-checkpoint/1";

const META_KEY: &str = "pmt_iqa";
const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    epoch: usize,
    fingerprint: String,
    setup: TrainSetup,
    schedule: ScheduleState,
    adam_config: AdamConfig,
    adam_step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Epochs completed.
    pub epoch: usize,
    pub setup: TrainSetup,
    pub fingerprint: String,
    pub schedule: ScheduleState,
    pub params: BTreeMap<String, Tensor>,
    pub adam_config: AdamConfig,
    pub adam_step: u64,
    pub adam_moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Checkpoint {
    pub fn capture(model: &PmtModel, opt: &Adam, setup: &TrainSetup, epoch: usize, schedule: ScheduleState) -> Result<Self> {
        let adam_moments = opt
            .moments()
            .iter()
            .map(|(k, (m, v))| Ok((k.clone(), (m.copy()?, v.copy()?))))
            .collect::<Result<_>>()?;
        Ok(Self {
            epoch,
            setup: setup.clone(),
            fingerprint: setup.fingerprint(),
            schedule,
            params: snapshot(model.store().tensors())?,
            adam_config: opt.config,
            adam_step: opt.step_count(),
            adam_moments,
        })
    }

    /// Rebuilds the model with the captured parameters.
    pub fn to_model(&self, device: &Device) -> Result<PmtModel> {
        let model = PmtModel::new(&self.setup.model, self.setup.precision.dtype(), device, 0)?;
        model.load_state(&self.params)?;
        Ok(model)
    }

    pub fn optimizer(&self) -> Adam {
        Adam::restore(self.adam_config, self.adam_step, self.adam_moments.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (k, v) in &self.params {
            tensors.push((format!("{PARAM}{k}"), v.clone()));
        }
        for (k, (m, v)) in &self.adam_moments {
            tensors.push((format!("{ADAM_M}{k}"), m.clone()));
            tensors.push((format!("{ADAM_V}{k}"), v.clone()));
        }
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            epoch: self.epoch,
            fingerprint: self.fingerprint.clone(),
            setup: self.setup.clone(),
            schedule: self.schedule,
            adam_config: self.adam_config,
            adam_step: self.adam_step,
        };
        // a single entry keeps the header bytes independent of hash-map ordering
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
        safetensors::serialize_to_file(tensors, Some(meta), path).map_err(|e| Error::InvalidCheckpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::InvalidCheckpoint { path: path.to_path_buf(), reason };
        let bytes = std::fs::read(path).map_err(|e| Error::MissingInput { path: path.to_path_buf(), reason: e.to_string() })?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let text = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad(format!("metadata lacks {META_KEY:?}")))?;
        let header: Header = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format {:?}", header.format)));
        }
        if header.setup.fingerprint() != header.fingerprint {
            return Err(bad("fingerprint does not match the embedded setup".into()));
        }
        let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut params = BTreeMap::new();
        let mut ms = BTreeMap::new();
        let mut vs = BTreeMap::new();
        for (k, v) in all {
            if let Some(n) = k.strip_prefix(PARAM) {
                params.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix(ADAM_M) {
                ms.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix(ADAM_V) {
                vs.insert(n.to_string(), v);
            }
        }
        let adam_moments = ms
            .into_iter()
            .map(|(k, m)| {
                let v = vs.remove(&k).ok_or_else(|| bad(format!("missing second moment for {k}")))?;
                Ok((k, (m, v)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            epoch: header.epoch,
            setup: header.setup,
            fingerprint: header.fingerprint,
            schedule: header.schedule,
            params,
            adam_config: header.adam_config,
            adam_step: header.adam_step,
            adam_moments,
        })
    }
}
