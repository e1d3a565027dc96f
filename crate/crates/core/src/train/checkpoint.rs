use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamSettings};
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::model::{read_container, write_container, Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// The frozen baseline θ0.
    Pretrained,
    /// Fine-tuned parameters θ.
    Sft,
}

/// Parameters plus optimizer state at the end of a training stage.
#[derive(Clone, Debug)]
pub struct TrainCheckpoint {
    pub model: Model,
    pub stage: Stage,
    pub optimizer: Adam,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    stage: Stage,
    config: ModelConfig,
    adam: AdamSettings,
    step: u64,
}

const PARAM: &str = "param.";
const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

impl TrainCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: "train".into(),
            stage: self.stage,
            config: self.model.config().clone(),
            adam: self.optimizer.settings,
            step: self.optimizer.step,
        };
        let params = self.model.params();
        let mut names = Vec::new();
        let mut arrays: Vec<&Array> = Vec::new();
        for (id, name, a) in params.iter() {
            names.push(format!("{PARAM}{name}"));
            arrays.push(a);
            if let (Some(m), Some(v)) = (&self.optimizer.m[id.0], &self.optimizer.v[id.0]) {
                names.push(format!("{MOMENT1}{name}"));
                arrays.push(m);
                names.push(format!("{MOMENT2}{name}"));
                arrays.push(v);
            }
        }
        let named: Vec<(&str, &Array)> = names.iter().map(String::as_str).zip(arrays).collect();
        write_container(path, &serde_json::to_value(header)?, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, arrays) = read_container(path)?;
        let header: Header = serde_json::from_value(header.clone())
            .map_err(|e| Error::Format(format!("{}: bad checkpoint header: {e}", path.display())))?;
        if header.kind != "train" {
            return Err(Error::Format(format!("{} is not a training checkpoint", path.display())));
        }
        let mut params = Vec::new();
        let mut moments = Vec::new();
        for (name, a) in arrays {
            if let Some(n) = name.strip_prefix(PARAM) {
                params.push((n.to_string(), a));
            } else {
                moments.push((name, a));
            }
        }
        let model = Model::from_parts(header.config, params)?;
        let mut optimizer = Adam::new(header.adam, model.params());
        optimizer.step = header.step;
        for (name, a) in moments {
            let (slot, n) = if let Some(n) = name.strip_prefix(MOMENT1) {
                (&mut optimizer.m, n)
            } else if let Some(n) = name.strip_prefix(MOMENT2) {
                (&mut optimizer.v, n)
            } else {
                return Err(Error::Format(format!("unexpected array {name}")));
            };
            let id = model
                .params()
                .id(n)
                .ok_or_else(|| Error::Format(format!("moment for unknown parameter {n}")))?;
            if a.shape() != model.params().get(id).shape() {
                return Err(Error::Format(format!("moment {name} has the wrong shape")));
            }
            slot[id.0] = Some(a);
        }
        Ok(Self {
            model,
            stage: header.stage,
            optimizer,
        })
    }
}
