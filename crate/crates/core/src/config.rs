//! Run configuration: one TOML document with a section per stage.

use serde::{Deserialize, Serialize};

use crate::datagen::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
    pub scale: ScaleConfig,
    pub bench: BenchConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    /// B; the in-batch negative count is `B - 1`.
    pub batch_size: usize,
    pub lr: f64,
    pub adagrad_eps: f64,
    /// Weight of the InfoNCE term.
    pub lambda: f64,
    pub seed: u64,
    /// Fraction of sessions (taken from the end) held out for evaluation.
    pub eval_fraction: f64,
    /// Ranking requests sampled per session and epoch during training.
    pub train_requests_per_session: usize,
    /// Ranking requests per evaluation session (0 = all eligible).
    pub eval_requests_per_session: usize,
    /// Evaluate only requests among the last `eval_tail` positions
    /// (0 = all).
    pub eval_tail: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Worker threads for evaluation; 1 is bit-exact and the default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Full,
            epochs: 20,
            batch_size: 16,
            lr: 0.01,
            adagrad_eps: 1e-10,
            lambda: 1.0,
            seed: 42,
            eval_fraction: 0.2,
            train_requests_per_session: 8,
            eval_requests_per_session: 16,
            eval_tail: 0,
            grad_clip: 0.0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: Variant::ALL.to_vec(),
        }
    }
}

/// Scaling sweep: every listed value is varied alone around the base
/// model and data config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleConfig {
    pub num_layers: Vec<usize>,
    pub hidden_dims: Vec<usize>,
    /// History lengths; sessions are generated at the longest and cropped.
    pub history_lens: Vec<usize>,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            num_layers: vec![1, 4, 12],
            hidden_dims: vec![32, 128],
            history_lens: vec![100, 1000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub warmup_iters: usize,
    /// At least 20.
    pub measured_iters: usize,
    /// Stream positions at which per-step latency is sampled.
    pub stream_positions: Vec<usize>,
    pub variants: Vec<crate::encoder::EncoderKind>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![128, 256, 512, 1024, 2048],
            hidden_dim: 32,
            num_layers: 2,
            warmup_iters: 3,
            measured_iters: 21,
            stream_positions: vec![10, 100, 1000],
            variants: vec![
                crate::encoder::EncoderKind::Linear,
                crate::encoder::EncoderKind::QuadraticReference,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    /// Record measured epoch wall time; off keeps metrics files
    /// byte-reproducible.
    pub timing: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: "qgs-out".into(),
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("train: {m}")));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be finite and >= 0", self.lr));
        }
        if !(self.adagrad_eps > 0.0) {
            return fail(format!("adagrad_eps {} must be > 0", self.adagrad_eps));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return fail(format!("eval_fraction {} not in [0, 1)", self.eval_fraction));
        }
        if !(self.grad_clip >= 0.0) {
            return fail(format!("grad_clip {} must be >= 0", self.grad_clip));
        }
        if self.threads == 0 {
            return fail("threads must be >= 1".into());
        }
        Ok(())
    }
}

impl RunConfig {
    /// Parses TOML; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.data.validate().map_err(cfg_err)?;
        self.model.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        if self.data.session_len > self.model.max_len {
            return Err(Error::Config(format!(
                "data.session_len {} exceeds model.max_len {}",
                self.data.session_len, self.model.max_len
            )));
        }
        if self.bench.measured_iters < 20 {
            return Err(Error::Config(format!(
                "bench.measured_iters {} must be >= 20",
                self.bench.measured_iters
            )));
        }
        if self.bench.lengths.is_empty() {
            return Err(Error::Config("bench.lengths is empty".into()));
        }
        Ok(())
    }
}
