//! `model.json` (config, network layout, history, parameter manifest) next to
//! `params.bin` (flat little-endian `f64`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutoIvConfig, AutoIvModel, AutoIvNets, EpochRecord};
use crate::error::{Error, Result};
use crate::nets::{load_params, save_params, ParamManifest};

pub const MODEL_FORMAT: &str = "autoiv-model/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub config: AutoIvConfig,
    pub nets: AutoIvNets,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub params: ParamManifest,
}

/// Writes `model.json` and `params.bin` into `dir`, creating it if needed.
pub fn save_model(model: &AutoIvModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = save_params(&model.store, &dir.join("params.bin"))?;
    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        config: model.config.clone(),
        nets: model.nets.clone(),
        history: model.history.clone(),
        best_epoch: model.best_epoch,
        params,
    };
    let path = dir.join("model.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: &Path) -> Result<AutoIvModel> {
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: ModelManifest = serde_json::from_str(&text)?;
    if m.format != MODEL_FORMAT {
        return Err(Error::Format(format!("unsupported model format {:?}", m.format)));
    }
    let store = load_params(&m.params, &dir.join("params.bin"))?;
    let model = AutoIvModel {
        config: m.config,
        nets: m.nets,
        store,
        history: m.history,
        best_epoch: m.best_epoch,
    };
    let needed = model
        .nets
        .rep_params()
        .into_iter()
        .chain(model.nets.head_params())
        .chain(model.nets.f_x.param_ids())
        .chain(model.nets.f_emb.param_ids())
        .chain(model.nets.f_y.param_ids())
        .map(|id| id.0)
        .max()
        .unwrap_or(0);
    if needed >= model.store.len() {
        return Err(Error::Format("parameter blob is missing entries the networks reference".into()));
    }
    Ok(model)
}
