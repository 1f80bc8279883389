use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lstm::LstmParams;
use super::train::TrainingConfig;
use crate::error::{Error, Result};
use crate::stream::Channel;

const FORMAT: &str = "misdetect-lstm";
const VERSION: u32 = 1;

/// A trained model together with what is needed to feed it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: LstmParams,
    pub config: TrainingConfig,
    /// Channels concatenated, in order, to form each input vector.
    pub channels: Vec<Channel>,
    pub best_epoch: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    format: String,
    version: u32,
    input_dim: usize,
    hidden_dim: usize,
    channels: Vec<String>,
    best_epoch: usize,
    config: TrainingConfig,
    w_input: Vec<f64>,
    w_recurrent: Vec<f64>,
    bias: Vec<f64>,
    head_weights: Vec<f64>,
    head_bias: f64,
}

pub fn write_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let p = &checkpoint.params;
    let [w_input, w_recurrent, bias, head_weights, _] = p.slices().map(<[f64]>::to_vec);
    let file = File {
        format: FORMAT.into(),
        version: VERSION,
        input_dim: p.input_dim(),
        hidden_dim: p.hidden_dim(),
        channels: checkpoint.channels.iter().map(|c| c.name().to_string()).collect(),
        best_epoch: checkpoint.best_epoch,
        config: checkpoint.config.clone(),
        w_input,
        w_recurrent,
        bias,
        head_weights,
        head_bias: p.head_bias,
    };
    let mut text = serde_json::to_string(&file).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: File = serde_json::from_str(&text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::parse(
            1,
            format!("not a {FORMAT} v{VERSION} checkpoint (found {} v{})", file.format, file.version),
        ));
    }
    file.config.validate()?;
    let channels = file
        .channels
        .iter()
        .map(|c| c.parse::<Channel>())
        .collect::<Result<Vec<_>>>()?;
    let params = LstmParams::from_parts(
        file.input_dim,
        file.hidden_dim,
        file.w_input,
        file.w_recurrent,
        file.bias,
        file.head_weights,
        file.head_bias,
    )?;
    Ok(Checkpoint {
        params,
        config: file.config,
        channels,
        best_epoch: file.best_epoch,
    })
}
