use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{ensure, Error, Result};
use crate::nn::{AdamW, ParamStore};
use crate::scalar::Scalar;
use crate::trainer::config::TrainConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "state.json";

/// Loop position and bookkeeping. Random streams are derived from
/// `(seed, stream name, step)`, so the step counter is the whole RNG state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed training iterations.
    pub step: u64,
    /// Epoch of the next iteration.
    pub epoch: usize,
    pub best_iou: Option<f64>,
    /// Validations since the best IoU last improved.
    pub stale_validations: usize,
    pub seed: u64,
    pub optimizer_steps: u64,
    pub scalar: String,
}

#[derive(Clone, Debug)]
pub struct CheckpointRecord<S> {
    pub config: TrainConfig,
    pub model: Denoiser<S>,
    pub optimizer: AdamW<S>,
    pub state: TrainState,
}

fn write_archive<S: Scalar>(path: &Path, store: &ParamStore<S>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    store.write_archive(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_archive<S: Scalar>(path: &Path) -> Result<ParamStore<S>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    ParamStore::read_archive(BufReader::new(f)).map_err(|e| Error::format(path, e.to_string()))
}

impl<S: Scalar> CheckpointRecord<S> {
    /// Writes into a sibling temporary directory first and renames it over
    /// `dir`, so an interrupted save never leaves a half-written checkpoint.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = dir
            .file_name()
            .ok_or_else(|| crate::error::invalid!("checkpoint path {} has no name", dir.display()))?;
        let tmp = dir.with_file_name(format!(".{}.partial", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let cfg_path = tmp.join(CONFIG_FILE);
        fs::write(&cfg_path, self.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        write_archive(&tmp.join(PARAMS_FILE), self.model.params())?;
        write_archive(&tmp.join(OPTIMIZER_FILE), &self.optimizer.state_store(self.model.params()))?;
        let state_path = tmp.join(STATE_FILE);
        let json = serde_json::to_string_pretty(&self.state).expect("state serializes");
        fs::write(&state_path, json).map_err(|e| Error::io(&state_path, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = TrainConfig::from_toml(&text).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
        let state_path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: TrainState = serde_json::from_str(&text).map_err(|e| Error::format(&state_path, e.to_string()))?;
        ensure!(
            state.scalar == S::TAG,
            "checkpoint {} stores {} parameters, requested {}",
            dir.display(),
            state.scalar,
            S::TAG
        );
        let mut model: Denoiser<S> = config.build_model(0)?;
        let params_path = dir.join(PARAMS_FILE);
        model
            .params_mut()
            .load_from(&read_archive(&params_path)?)
            .map_err(|e| Error::format(&params_path, e.to_string()))?;
        let opt_path = dir.join(OPTIMIZER_FILE);
        let optimizer = AdamW::from_state(
            config.optimizer,
            state.optimizer_steps,
            model.params(),
            &read_archive(&opt_path)?,
        )
        .map_err(|e| Error::format(&opt_path, e.to_string()))?;
        Ok(Self {
            config,
            model,
            optimizer,
            state,
        })
    }
}

/// Loads only the network from a checkpoint directory.
pub fn load_model<S: Scalar>(dir: &Path) -> Result<(TrainConfig, Denoiser<S>)> {
    let rec = CheckpointRecord::<S>::load(dir)?;
    Ok((rec.config, rec.model))
}
