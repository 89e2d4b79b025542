use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetMeta;
use crate::num::Real;

use super::network::{Architecture, Network};
use super::NnError;

pub const CHECKPOINT_FORMAT: &str = "stabcal-network";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture, flat weights and the dataset meta needed to normalize inputs
/// and denormalize outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub params: Vec<f64>,
    pub meta: Option<DatasetMeta>,
}

impl Checkpoint {
    pub fn new<T: Real>(net: &Network<T>, meta: Option<&DatasetMeta>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: net.architecture().clone(),
            params: net.params().iter().map(|p| p.to_f64_lossy()).collect(),
            meta: meta.cloned(),
        }
    }

    pub fn network<T: Real>(&self) -> Result<Network<T>, NnError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(NnError::Checkpoint(format!("unknown format \"{}\"", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let params = self.params.iter().map(|p| T::lit(*p)).collect();
        Network::from_params(self.architecture.clone(), params)
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, net: &Network<T>, meta: Option<&DatasetMeta>) -> Result<(), NnError> {
    fs::write(path, serde_json::to_string(&Checkpoint::new(net, meta))?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Network<T>, Option<DatasetMeta>), NnError> {
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    let net = ck.network()?;
    Ok((net, ck.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_cnn;

    #[test]
    fn round_trip_preserves_outputs() {
        let net = build_cnn::<f32>(2, 40, 2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_checkpoint(&path, &net, None).unwrap();
        let (back, meta) = load_checkpoint::<f32>(&path).unwrap();
        assert!(meta.is_none());
        assert_eq!(back.params(), net.params());
        let x: Vec<f32> = (0..80).map(|i| (i as f32 * 0.1).cos()).collect();
        assert_eq!(back.infer(&x).unwrap(), net.infer(&x).unwrap());
    }

    #[test]
    fn rejects_wrong_version_and_length() {
        let net = build_cnn::<f64>(1, 40, 1, 0).unwrap();
        let mut ck = Checkpoint::new(&net, None);
        ck.version = 99;
        assert!(ck.network::<f64>().is_err());
        ck.version = CHECKPOINT_VERSION;
        ck.params.pop();
        assert!(ck.network::<f64>().is_err());
    }
}
