//! Run configuration loaded from TOML.
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected so typos surface as errors rather than silently ignored settings.

use std::path::{Path, PathBuf};

use loract::bounds::ScalingConfig;
use loract::compress::{CompressionPolicy, Energy};
use loract::decompose::MethodKind;
use loract::linalg::{load_matrix, Matrix, SeededRng};
use loract::synth;
use loract::transformer::{ModelConfig, OptimizerConfig, Strategy, TaskConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    #[default]
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }

    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: Format,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("reports"), format: Format::Both }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Gaussian,
    ExactRank,
    LowRankNoise,
    /// Low-rank-plus-noise whose leading left singular vector is a single row.
    Coherent,
}

/// Where the matrix for `decompose` and `spectrum` comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSource {
    /// Fixture file (`.lrmx` binary or CSV); overrides the generator.
    pub input: Option<PathBuf>,
    pub generator: Generator,
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub noise: f64,
}

impl Default for MatrixSource {
    fn default() -> Self {
        MatrixSource { input: None, generator: Generator::LowRankNoise, m: 256, n: 128, rank: 8, noise: 0.001 }
    }
}

impl MatrixSource {
    pub fn load(&self, rng: &SeededRng) -> Result<Matrix, CliError> {
        if let Some(path) = &self.input {
            return Ok(load_matrix(path)?);
        }
        if self.m == 0 || self.n == 0 || self.rank == 0 || self.rank > self.m.min(self.n) {
            return Err(CliError::Config(format!(
                "matrix source needs 0 < rank <= min(m, n), got m = {}, n = {}, rank = {}",
                self.m, self.n, self.rank
            )));
        }
        let mut rng = rng.child("matrix");
        let (m, n, k) = (self.m, self.n, self.rank);
        let a = match self.generator {
            Generator::Gaussian => loract::linalg::gaussian_matrix(&mut rng, m, n),
            Generator::ExactRank => synth::exact_rank(&mut rng, m, n, k)?,
            Generator::LowRankNoise => synth::low_rank_plus_noise(&mut rng, m, n, k, self.noise)?,
            Generator::Coherent => {
                let spike = synth::coherent_spike(&mut rng, m, n, &synth::linear_spectrum(k, 10.0, 1.0))?;
                spike.add(&loract::linalg::gaussian_matrix(&mut rng, m, n).scale(self.noise))?
            }
        };
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeSection {
    pub source: MatrixSource,
    pub methods: Vec<MethodKind>,
    pub ks: Vec<usize>,
    /// Fixed sample count for the randomized methods.
    pub l: Option<usize>,
    /// Extra sampled rows beyond `k` when `l` is not set.
    pub oversample: usize,
    pub power_iters: usize,
}

impl Default for DecomposeSection {
    fn default() -> Self {
        DecomposeSection {
            source: MatrixSource::default(),
            methods: MethodKind::ALL.to_vec(),
            ks: vec![1, 2, 4, 8, 16, 32],
            l: None,
            oversample: 0,
            power_iters: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    pub source: MatrixSource,
    pub fractions: Vec<f64>,
    pub energy: Energy,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        SpectrumSection {
            source: MatrixSource::default(),
            fractions: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0],
            energy: Energy::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub strategy: Strategy,
    pub optimizer: OptimizerConfig,
    /// Compression ratios to sweep; each run uses `[policy]` with this ratio.
    pub ratios: Vec<f64>,
    pub track_grad_error: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 300,
            strategy: Strategy::PreNorm,
            optimizer: OptimizerConfig::default(),
            ratios: vec![1.0, 0.5, 0.25, 0.125],
            track_grad_error: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub range_finder_instances: usize,
    pub projection_trials: usize,
    pub projection_rows: Vec<usize>,
    pub projection_cols: usize,
    pub accumulation_instances: usize,
    pub accumulation_ratio: f64,
    pub scaling: ScalingConfig,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection {
            range_finder_instances: 1000,
            projection_trials: 500,
            projection_rows: vec![32, 64, 128],
            projection_cols: 32,
            accumulation_instances: 200,
            accumulation_ratio: 0.5,
            scaling: ScalingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemsweepSection {
    pub batches: Vec<usize>,
    pub seq_lens: Vec<usize>,
}

impl Default for MemsweepSection {
    fn default() -> Self {
        MemsweepSection { batches: vec![1, 2, 4, 8], seq_lens: vec![8, 16, 32] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub policy: CompressionPolicy,
    pub task: TaskConfig,
    pub train: TrainSection,
    pub decompose: DecomposeSection,
    pub spectrum: SpectrumSection,
    pub bounds: BoundsSection,
    pub memsweep: MemsweepSection,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, e: &dyn std::fmt::Display| CliError::Config(format!("[{name}] {e}"));
        self.model.validate().map_err(|e| field("model", &e))?;
        self.policy.validate().map_err(|e| field("policy", &e))?;
        self.task.validate().map_err(|e| field("task", &e))?;
        if let Some(r) = self.train.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(field("train", &format!("ratio {r} outside (0, 1]")));
        }
        if !(self.train.optimizer.lr > 0.0) {
            return Err(field("train", &"optimizer.lr must be positive"));
        }
        if !(self.bounds.accumulation_ratio > 0.0 && self.bounds.accumulation_ratio <= 1.0) {
            return Err(field("bounds", &"accumulation_ratio outside (0, 1]"));
        }
        if self.bounds.projection_rows.iter().any(|&m| m < 8) || self.bounds.projection_cols == 0 {
            return Err(field("bounds", &"projection_rows must be at least 8 and projection_cols positive"));
        }
        if let Some(f) = self.spectrum.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(field("spectrum", &format!("fraction {f} outside (0, 1]")));
        }
        if self.memsweep.batches.contains(&0) || self.memsweep.seq_lens.contains(&0) {
            return Err(field("memsweep", &"batches and seq_lens must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration,
    /// leaving out where and how the report is written.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { output: OutputConfig::default(), ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("configuration serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Training configuration for one run of the ratio sweep.
    pub fn train_config(&self, policy: CompressionPolicy) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            task: self.task.clone(),
            policy,
            strategy: self.train.strategy,
            optimizer: self.train.optimizer,
            steps: self.train.steps,
            seed: self.seed,
            track_grad_error: self.train.track_grad_error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::from_toml("seed = 1\n[model]\nwidht = 3\n", Path::new("x.toml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("widht") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn invalid_values_name_their_section() {
        let err = RunConfig::from_toml("[model]\nheads = 3\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("[model]"));
        let err = RunConfig::from_toml("[train]\nratios = [0.5, 0.0]\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("[train]"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.output.dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
seed = 7
[policy]
ratio = 0.25
method = "rsvd"
[train.optimizer]
lr = 0.001
[decompose.source]
generator = "exact_rank"
m = 64
n = 32
rank = 4
"#;
        let cfg = RunConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.policy.ratio, 0.25);
        assert_eq!(cfg.train.optimizer.lr, 0.001);
        assert_eq!(cfg.decompose.source.generator, Generator::ExactRank);
    }
}
