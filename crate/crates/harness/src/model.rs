//! Model bundle: every trained component in one checkpoint file.

use std::path::Path;

use crate::HarnessError;
use c2f_core::equinet::{Checkpoint, ExtractorWeights};
use c2f_core::global_register::DecoderWeights;
use c2f_core::local_register::{MatcherWeights, ScorerWeights};

/// The extractor plus whichever heads have been trained so far. The coarse
/// training stage produces extractor and decoder; the fine stage adds the
/// scorer and matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub extractor: ExtractorWeights,
    pub decoder: Option<DecoderWeights>,
    pub scorer: Option<ScorerWeights>,
    pub matcher: Option<MatcherWeights>,
}

impl ModelBundle {
    /// Fresh untrained bundle: seeded extractor, no heads.
    pub fn untrained(seed: u64) -> ModelBundle {
        ModelBundle {
            extractor: ExtractorWeights::desk_default(seed),
            decoder: None,
            scorer: None,
            matcher: None,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_section(self.extractor.to_section());
        if let Some(d) = &self.decoder {
            ck.push_section(d.to_section());
        }
        if let Some(s) = &self.scorer {
            ck.push_section(s.to_section());
        }
        if let Some(m) = &self.matcher {
            ck.push_section(m.to_section());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<ModelBundle, HarnessError> {
        let ext_section = ck.section("extractor").ok_or_else(|| {
            HarnessError::Config("checkpoint has no extractor section".to_string())
        })?;
        let extractor = ExtractorWeights::from_section(ext_section)?;
        let decoder = match ck.section("decoder") {
            Some(s) => Some(DecoderWeights::from_section(s)?),
            None => None,
        };
        let scorer = match ck.section("scorer") {
            Some(s) => Some(ScorerWeights::from_section(s)?),
            None => None,
        };
        let matcher = match ck.section("matcher") {
            Some(s) => Some(MatcherWeights::from_section(s)?),
            None => None,
        };
        Ok(ModelBundle { extractor, decoder, scorer, matcher })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        self.to_checkpoint().save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelBundle, HarnessError> {
        ModelBundle::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use c2f_core::local_register::{MatcherWeights, ScorerWeights};

    #[test]
    fn bundle_round_trips_with_and_without_heads() {
        let dir = tempfile::tempdir().unwrap();
        let bare = ModelBundle::untrained(3);
        let path = dir.path().join("bare.ckpt");
        bare.save(&path).unwrap();
        assert_eq!(ModelBundle::load(&path).unwrap(), bare);

        let full = ModelBundle {
            extractor: bare.extractor.clone(),
            decoder: Some(DecoderWeights::init(bare.extractor.global_channels(), 16, 1)),
            scorer: Some(ScorerWeights::init(bare.extractor.descriptor_channels(), 8, 2)),
            matcher: Some(MatcherWeights::init(8, 3)),
        };
        let path = dir.path().join("full.ckpt");
        full.save(&path).unwrap();
        assert_eq!(ModelBundle::load(&path).unwrap(), full);
    }

    #[test]
    fn checkpoint_without_extractor_is_rejected() {
        let ck = Checkpoint::new();
        assert!(matches!(
            ModelBundle::from_checkpoint(&ck),
            Err(HarnessError::Config(_))
        ));
    }
}
