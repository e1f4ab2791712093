//! Versioned JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamSet, ParamTensor, Real};
use super::{Architecture, Hyper, Matcher, Role};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub architecture: Architecture,
    pub role: Role,
    pub hyper: Hyper,
    pub vocab_size: usize,
    /// SHA-256 of the vocabulary file the model was trained with.
    pub vocab_checksum: String,
    pub seed: u64,
}

/// Header plus named tensors. Values are stored as f64, which represents
/// f32 parameters exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<ParamTensor<f64>>,
}

impl Checkpoint {
    pub fn from_matcher<F: Real>(model: &Matcher<F>, vocab_checksum: &str) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                architecture: model.architecture(),
                role: model.role(),
                hyper: *model.hyper(),
                vocab_size: model.vocab_size(),
                vocab_checksum: vocab_checksum.to_string(),
                seed: model.seed(),
            },
            tensors: model.params().cast::<f64>().tensors().to_vec(),
        }
    }

    /// Rebuilds the matcher, failing if the vocabulary differs from the
    /// one the checkpoint was trained with.
    pub fn into_matcher<F: Real>(self, vocab_checksum: &str) -> Result<Matcher<F>> {
        let h = &self.header;
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported checkpoint format version {}",
                h.format_version
            )));
        }
        if h.vocab_checksum != vocab_checksum {
            return Err(Error::Model(format!(
                "vocabulary checksum mismatch: checkpoint has {}, vocabulary is {}",
                h.vocab_checksum, vocab_checksum
            )));
        }
        let mut m = Matcher::<F>::new(h.architecture, h.role, h.hyper, h.vocab_size, h.seed)?;
        let params = ParamSet::<f64>::from_tensors(self.tensors).cast::<F>();
        if !params.all_finite() {
            return Err(Error::Model("checkpoint holds non-finite parameters".into()));
        }
        m.replace_params(params)?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Model(format!("{}: malformed checkpoint: {e}", path.display())))
    }
}

impl<F: Real> Matcher<F> {
    pub fn save(&self, path: &Path, vocab_checksum: &str) -> Result<()> {
        Checkpoint::from_matcher(self, vocab_checksum).save(path)
    }

    pub fn load(path: &Path, vocab_checksum: &str) -> Result<Self> {
        Checkpoint::load(path)?.into_matcher(vocab_checksum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Matcher<f32> {
        let hyper = Hyper {
            embed_dim: 4,
            hidden_dim: 4,
            layers: 1,
            heads: 1,
            conv_channels: 2,
            match_dim: 3,
            max_len: 4,
        };
        Matcher::new(Architecture::Recurrent, Role::LastUtteranceSelection, hyper, 10, 9).unwrap()
    }

    #[test]
    fn round_trip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = model();
        m.save(&path, "abc").unwrap();
        let back = Matcher::<f32>::load(&path, "abc").unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.role(), Role::LastUtteranceSelection);
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model().save(&path, "abc").unwrap();
        let err = Matcher::<f32>::load(&path, "xyz").unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn tampered_shapes_are_rejected() {
        let mut ck = Checkpoint::from_matcher(&model(), "v");
        ck.tensors[0].shape = vec![1, 40];
        assert!(ck.into_matcher::<f32>("v").is_err());
    }
}
