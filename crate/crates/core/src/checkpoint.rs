//! `SGCKPT1` checkpoints: config echo, step counter and a named-parameter
//! table carrying values and both AdamW moments.

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::{AdamW, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGCKPT1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&state.config.to_text());
    w.u64(state.step as u64);
    w.u64(state.optimizer.t);
    let params = &state.model.params;
    w.u64(params.len() as u64);
    for (k, id) in params.ids().enumerate() {
        w.str(params.name(id));
        w.tensor(params.get(id));
        w.tensor(&state.optimizer.m[k]);
        w.tensor(&state.optimizer.v[k]);
    }
    w.buf
}

/// Rebuilds the architecture from the config echo and checks every stored
/// parameter name and shape against it.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let config = TrainConfig::from_text(&r.str()?)?;
    config.validate().map_err(|e| Error::Format(format!("stored config: {e}")))?;
    let step = r.u64()? as usize;
    let t = r.u64()?;
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let count = r.len(1)?;
    if count != model.params.len() {
        return Err(Error::Format(format!("{count} parameters, architecture has {}", model.params.len())));
    }
    let (mut values, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = r.str()?;
        if name != model.params.name(id) {
            return Err(Error::Format(format!("parameter '{name}', expected '{}'", model.params.name(id))));
        }
        let shape = model.params.get(id).shape();
        for dst in [&mut values, &mut m, &mut v] {
            let t = r.tensor()?;
            if t.shape() != shape {
                return Err(Error::Format(format!("'{name}' has shape {:?}, expected {shape:?}", t.shape())));
            }
            dst.push(t);
        }
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    model.params.assign(values)?;
    Ok(TrainState { config, model, optimizer: AdamW { m, v, t }, step })
}
