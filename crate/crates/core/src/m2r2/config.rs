use serde::{Deserialize, Serialize};

use crate::crl::CrlConfig;
use crate::error::{Error, Result};

/// Which PANet state is handed to the representation learner as `b`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BSource {
    /// The speaker's emotion state.
    #[default]
    Emotion,
    /// The global state.
    Global,
    /// The speaker's party state.
    Party,
}

/// Pipeline variants compared in the ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Both models, alternating.
    #[default]
    Full,
    /// The classifier alone on zero-filled inputs.
    NoM2r2,
    /// The classifier alone, party attention bypassed.
    NoPartyAttention,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "no_m2r2" => Ok(Mode::NoM2r2),
            "no_party_attention" => Ok(Mode::NoPartyAttention),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected full, no_m2r2 or no_party_attention)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoM2r2 => "no_m2r2",
            Mode::NoPartyAttention => "no_party_attention",
        }
    }

    pub fn augments(self) -> bool {
        self == Mode::Full
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanetDims {
    pub global_dim: usize,
    pub party_dim: usize,
    pub emotion_dim: usize,
    pub bidirectional: bool,
}

impl Default for PanetDims {
    fn default() -> Self {
        Self {
            global_dim: 32,
            party_dim: 32,
            emotion_dim: 16,
            bidirectional: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct M2r2Config {
    pub seed: u64,
    pub mode: Mode,
    /// Classifier epochs per outer iteration.
    pub n_e: usize,
    /// Representation-learner epochs per outer iteration.
    pub n_p: usize,
    pub max_iterations: usize,
    /// Convergence window `k` and threshold on validation accuracy.
    pub window: usize,
    pub epsilon: f64,
    pub panet: PanetDims,
    pub panet_lr: f64,
    pub panet_l2: f64,
    pub b_source: BSource,
    pub crl: CrlConfig,
}

impl Default for M2r2Config {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Full,
            n_e: 5,
            n_p: 5,
            max_iterations: 20,
            window: 3,
            epsilon: 1e-3,
            panet: PanetDims::default(),
            panet_lr: 1e-4,
            panet_l2: 1e-5,
            b_source: BSource::Emotion,
            crl: CrlConfig::default(),
        }
    }
}

impl M2r2Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_e == 0 || self.n_p == 0 || self.max_iterations == 0 {
            return Err(Error::Config("n_e, n_p and max_iterations must be >= 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.panet_lr > 0.0) || !(self.panet_l2 >= 0.0) {
            return Err(Error::Config("panet_lr must be > 0 and panet_l2 >= 0".into()));
        }
        let d = &self.panet;
        if d.global_dim == 0 || d.party_dim == 0 || d.emotion_dim == 0 {
            return Err(Error::Config("PANet dims must be >= 1".into()));
        }
        self.crl.validate()
    }

    /// Per-phase seeds, fixed offsets from the master seed.
    pub(crate) fn seed_for(&self, phase: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(phase)
    }
}
