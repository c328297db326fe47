use std::path::Path;

use crate::container::{self, Named};
use crate::csl::MemoryBank;
use crate::encoder::{EncoderParams, ModelConfig};
use crate::error::{PatError, Result};
use crate::tensor::Tensor;

/// Everything needed to continue a run. Random draws are keyed by
/// `(seed, epoch, step, index)` rather than carried as generator state, so
/// the counters below are the only RNG state there is.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub params: EncoderParams<f32>,
    pub velocity: Vec<Tensor<f32>>,
    pub bank: MemoryBank<f32>,
}

const PARAM: &str = "param/";
const VELOCITY: &str = "velocity/";
const COUNTERS: &str = "state/counters";
const BANK_IDS: &str = "bank/ids";

fn bank_part(i: usize) -> String {
    format!("bank/part{i}")
}

fn counter(v: usize) -> Result<f32> {
    // counters are stored as f32 and must round-trip exactly
    if v > (1 << 24) {
        return Err(PatError::State(format!("counter {v} too large for the container")));
    }
    Ok(v as f32)
}

impl TrainState {
    pub fn to_named(&self) -> Result<Named> {
        let mut out = Vec::new();
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            out.push((format!("{PARAM}{name}"), t.clone()));
        }
        for (name, t) in self.params.names().iter().zip(&self.velocity) {
            out.push((format!("{VELOCITY}{name}"), t.clone()));
        }
        for (i, p) in self.bank.parts().iter().enumerate() {
            out.push((bank_part(i), p.clone()));
        }
        let ids = self.bank.ids().iter().map(|&i| counter(i)).collect::<Result<Vec<_>>>()?;
        out.push((BANK_IDS.into(), Tensor::new(vec![ids.len()], ids)?));
        let counters = vec![
            counter(self.epoch)?,
            counter(self.step)?,
            if self.bank.is_initialized() { 1.0 } else { 0.0 },
            counter(self.bank.epoch)?,
            self.bank.momentum(),
        ];
        out.push((COUNTERS.into(), Tensor::new(vec![counters.len()], counters)?));
        Ok(out)
    }

    pub fn from_named(model: &ModelConfig, named: &[(String, Tensor<f32>)]) -> Result<Self> {
        let strip = |prefix: &str| -> Vec<(String, Tensor<f32>)> {
            named
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        let params = EncoderParams::from_named(model, &strip(PARAM))?;
        let vel = EncoderParams::from_named(model, &strip(VELOCITY))?;
        let c = container::find(named, COUNTERS)?.data().to_vec();
        if c.len() != 5 {
            return Err(PatError::State("malformed checkpoint counters".into()));
        }
        let ids: Vec<usize> = container::find(named, BANK_IDS)?.data().iter().map(|&x| x as usize).collect();
        let parts = (0..model.num_parts)
            .map(|i| container::find(named, &bank_part(i)).cloned())
            .collect::<Result<Vec<_>>>()?;
        let bank = MemoryBank::from_parts(parts, ids, c[4], c[2] != 0.0, c[3] as usize)?;
        Ok(Self {
            epoch: c[0] as usize,
            step: c[1] as usize,
            params,
            velocity: vel.tensors().to_vec(),
            bank,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::save_container(path, &self.to_named()?)
    }

    pub fn load(model: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named(model, &container::load_container(path)?)
    }
}

/// Loads encoder parameters from either a full checkpoint or a bare
/// parameter container.
pub fn load_params(model: &ModelConfig, path: impl AsRef<Path>) -> Result<EncoderParams<f32>> {
    let named = container::load_container(path)?;
    if named.iter().any(|(n, _)| n.starts_with(PARAM)) {
        let stripped: Vec<(String, Tensor<f32>)> = named
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(PARAM).map(|s| (s.to_string(), t.clone())))
            .collect();
        EncoderParams::from_named(model, &stripped)
    } else {
        EncoderParams::from_named(model, &named)
    }
}
