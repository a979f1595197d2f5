use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FlowModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "depflow-flow";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk flow record: architecture, masks and every parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowCheckpoint {
    pub format: String,
    pub version: u32,
    pub flow: FlowModel,
}

impl FlowCheckpoint {
    pub fn new(flow: FlowModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            flow,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: FlowCheckpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let dim = ck.flow.dim;
        if ck.flow.layers.iter().any(|l| l.mask.len() != dim) {
            return Err(Error::Parse(
                "checkpoint mask width differs from dim".into(),
            ));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(flow: &FlowModel, path: &Path) -> Result<()> {
    let s = FlowCheckpoint::new(flow.clone()).to_json()?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FlowModel> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(FlowCheckpoint::from_json(&s)?.flow)
}
