use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ImageTower, LitModel, TextTower, Tokenizer, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image tower digest mismatch: recorded {recorded}, computed {computed}")]
    DigestMismatch { recorded: String, computed: String },
}

/// JSON-of-arrays checkpoint: config echo, vocabulary, both towers, and the
/// image-tower digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub tokenizer: Tokenizer,
    pub text_tower: TextTower,
    pub image_tower: ImageTower,
    pub image_tower_digest: String,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, model: &LitModel) -> Self {
        Self {
            config: config.clone(),
            tokenizer: model.tokenizer.clone(),
            text_tower: model.text_tower.clone(),
            image_tower: model.image_tower.clone(),
            image_tower_digest: model.image_tower.digest(),
        }
    }

    pub fn into_model(self) -> LitModel {
        LitModel {
            tokenizer: self.tokenizer,
            text_tower: self.text_tower,
            image_tower: self.image_tower,
        }
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes)?;
        let computed = ckpt.image_tower.digest();
        if computed != ckpt.image_tower_digest {
            return Err(CheckpointError::DigestMismatch {
                recorded: ckpt.image_tower_digest,
                computed,
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::{generate_caption_set, CaptionTemplate};
    use crate::metadata::MetadataTable;

    fn checkpoint() -> Checkpoint {
        let table = MetadataTable::parse_csv(include_bytes!("../../data/six_species.csv")).unwrap();
        let captions = generate_caption_set(&table, &CaptionTemplate::default(), 3).unwrap();
        let cfg = TrainConfig::default();
        Checkpoint::new(&cfg, &LitModel::init(&cfg, &captions, 16))
    }

    #[test]
    fn bit_exact_round_trip() {
        let ckpt = checkpoint();
        let back = Checkpoint::from_json_bytes(&ckpt.to_json_bytes()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.image_tower.digest(), ckpt.image_tower_digest);
    }

    #[test]
    fn tampered_image_tower_rejected() {
        let mut ckpt = checkpoint();
        ckpt.image_tower_digest = "00".repeat(32);
        assert!(matches!(
            Checkpoint::from_json_bytes(&ckpt.to_json_bytes()),
            Err(CheckpointError::DigestMismatch { .. })
        ));
    }
}
