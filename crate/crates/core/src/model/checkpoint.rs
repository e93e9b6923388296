//! A checkpoint is a parameter file plus a `key=value` text sidecar at
//! `<path>.cfg` holding the architecture and an echo of the training config.

use std::fs;
use std::path::{Path, PathBuf};

use crate::aggregators::AggregatorKind;
use crate::error::{Error, Result};
use crate::numerics::{read_param_set, write_param_set};

use super::net::{GroundingModel, ModelConfig};
use super::train::TrainConfig;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn save_checkpoint(model: &GroundingModel<f32>, train: Option<&TrainConfig>, path: &Path) -> Result<()> {
    write_param_set(&model.to_param_set(), path)?;
    let c = &model.config;
    let mut text = format!(
        "aggregator={}\nclip_dim={}\nquery_dim={}\nhidden={}\nchannels={}\nconv_layers={}\nkernel={}\n",
        c.aggregator, c.clip_dim, c.query_dim, c.hidden, c.channels, c.conv_layers, c.kernel
    );
    if let Some(t) = train {
        text.push_str(&format!(
            "train.epochs={}\ntrain.batch_size={}\ntrain.learning_rate={}\ntrain.momentum={}\n\
             train.t_min={}\ntrain.t_max={}\ntrain.rca_probability={}\ntrain.seed={}\n",
            t.epochs, t.batch_size, t.learning_rate, t.momentum, t.t_min, t.t_max, t.rca_probability, t.seed
        ));
    }
    let side = sidecar_path(path);
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<GroundingModel<f32>> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let get = |key: &str| -> Result<String> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(|v| v.trim().to_string())
            .ok_or_else(|| Error::Missing(format!("{key} in {}", side.display())))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{key} in {} is not an integer", side.display())))
    };
    let config = ModelConfig {
        aggregator: get("aggregator")?.parse::<AggregatorKind>()?,
        clip_dim: num("clip_dim")?,
        query_dim: num("query_dim")?,
        hidden: num("hidden")?,
        channels: num("channels")?,
        conv_layers: num("conv_layers")?,
        kernel: num("kernel")?,
    };
    GroundingModel::from_param_set(config, &read_param_set(path)?)
}
