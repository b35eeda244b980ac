use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, GaussianPolicy, ValueNet};
use crate::error::{Error, Result};
use crate::seeding::derive_seed;

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Position of a derived ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, stream: u64, rng: &ChaCha8Rng) -> Self {
        RngState { seed, stream, word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.stream));
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume or evaluate a training phase. Stored as JSON
/// with round-trip float formatting, so save → load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub phase: String,
    pub step: u64,
    pub policy: GaussianPolicy,
    pub value: Option<ValueNet>,
    pub policy_opt: Option<Adam>,
    pub value_opt: Option<Adam>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(phase: &str, policy: GaussianPolicy) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            phase: phase.to_string(),
            step: 0,
            policy,
            value: None,
            policy_opt: None,
            value_opt: None,
            rng: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.policy.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(Error::Numerical("refusing to save non-finite policy parameters".into()));
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {}", ck.format)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use rand::Rng;

    #[test]
    fn round_trip_is_exact_and_rng_resumes() {
        let mut rng = rng_from(42, 7);
        let policy = GaussianPolicy::new(20, &[16, 16], 7, -0.5, &mut rng);
        let _: f64 = rng.random();
        let mut ck = Checkpoint::new("sft", policy);
        ck.value = Some(ValueNet::new(20, &[8], &mut rng));
        ck.policy_opt = Some(Adam::new(1e-3));
        ck.rng = Some(RngState::capture(42, 7, &rng));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut resumed = back.rng.unwrap().restore();
        assert_eq!(resumed.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn missing_file_is_reported() {
        let err = Checkpoint::load(Path::new("/nonexistent/ck.json")).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}
