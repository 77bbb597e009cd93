//! Line-based `key = value` run configuration shared by the CLI commands.

use crate::denoiser::DenoiserConfig;
use crate::harness::task::{SyntheticTask, TaskKind};
use crate::probcore::TokenId;
use crate::sampler::{EntropyNorm, KlAverage, SamplerConfig};
use crate::{Error, Result};
use std::path::Path;

/// Every knob of a run, with desk-scale defaults. Unknown keys are errors so
/// sweep-script typos fail loudly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Model
    pub n_layers: usize,
    pub n_heads: usize,
    pub d: usize,
    pub d_ff: usize,
    pub l_max: usize,
    pub vocab: usize,
    // Task
    pub task: TaskKind,
    pub seq_len: usize,
    pub eos_token: TokenId,
    // Training
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub t_steps: usize,
    pub beta_max: f64,
    // Sampler
    pub r_f: f64,
    pub top_p: f64,
    pub tau_refine: f64,
    pub tau_decode: f64,
    pub t_refine: usize,
    pub commits_per_step: usize,
    /// 0 means whole-span decoding (no semi-AR blocks).
    pub block_size: usize,
    pub max_steps: usize,
    pub early_stop: bool,
    pub kl_average: KlAverage,
    pub entropy_norm: EntropyNorm,
    // Evaluation
    pub n_eval: usize,
    // Lipschitz probe
    pub probe_epsilons: Vec<f64>,
    pub probe_samples: usize,
    pub probe_seq_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_layers: 2,
            n_heads: 2,
            d: 16,
            d_ff: 32,
            l_max: 16,
            vocab: 8,
            task: TaskKind::Copy,
            seq_len: 4,
            eos_token: 7,
            train_steps: 1500,
            batch_size: 8,
            lr: 0.02,
            momentum: 0.9,
            t_steps: 8,
            beta_max: 0.9,
            r_f: 0.15,
            top_p: 0.9,
            tau_refine: 0.1,
            tau_decode: 0.1,
            t_refine: 20,
            commits_per_step: 1,
            block_size: 0,
            max_steps: 10_000,
            early_stop: true,
            kl_average: KlAverage::OpenOnly,
            entropy_norm: EntropyNorm::Nucleus,
            n_eval: 50,
            probe_epsilons: vec![0.01, 0.05, 0.1, 0.5, 1.0],
            probe_samples: 64,
            probe_seq_len: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser_config().validate()?;
        self.synthetic_task(0).validate()?;
        self.sampler_config().validate()?;
        if 2 * self.seq_len > self.l_max {
            return Err(Error::Config(format!(
                "prompt + generation length {} exceeds l_max {}",
                2 * self.seq_len,
                self.l_max
            )));
        }
        if self.train_steps == 0 || self.batch_size == 0 || self.t_steps == 0 {
            return Err(Error::Config(
                "train_steps, batch_size, t_steps must be >= 1".into(),
            ));
        }
        if self.n_eval == 0 {
            return Err(Error::Config("n_eval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d: self.d,
            d_ff: self.d_ff,
            l_max: self.l_max,
            v: self.vocab,
        }
    }

    pub fn synthetic_task(&self, seed: u64) -> SyntheticTask {
        SyntheticTask {
            kind: self.task,
            v: self.vocab,
            l: self.seq_len,
            eos_token: self.eos_token,
            seed,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            r_f: self.r_f,
            top_p: self.top_p,
            tau_refine: self.tau_refine,
            tau_decode: self.tau_decode,
            t_refine: self.t_refine,
            commits_per_step: self.commits_per_step,
            block_size: if self.block_size == 0 {
                None
            } else {
                Some(self.block_size)
            },
            kl_smoothing: 1e-10,
            max_steps: self.max_steps,
            early_stop_enabled: self.early_stop,
            kl_average: self.kl_average,
            entropy_norm: self.entropy_norm,
            inter_commit_refine: crate::sampler::InterCommitRefine::None,
        }
    }

    /// Parses the `key = value` format; `#` starts a comment, blank lines
    /// are skipped, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: String| Error::Config(format!("line {}: {what}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key = value".into()))?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)
                .map_err(|e| bad(format!("{key}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("unparseable value '{v}'")))
        }
        match key {
            "n_layers" => self.n_layers = num(value)?,
            "n_heads" => self.n_heads = num(value)?,
            "d" => self.d = num(value)?,
            "d_ff" => self.d_ff = num(value)?,
            "l_max" => self.l_max = num(value)?,
            "vocab" => self.vocab = num(value)?,
            "task" => self.task = TaskKind::parse(value)?,
            "seq_len" => self.seq_len = num(value)?,
            "eos_token" => self.eos_token = num(value)?,
            "train_steps" => self.train_steps = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "lr" => self.lr = num(value)?,
            "momentum" => self.momentum = num(value)?,
            "t_steps" => self.t_steps = num(value)?,
            "beta_max" => self.beta_max = num(value)?,
            "r_f" => self.r_f = num(value)?,
            "top_p" => self.top_p = num(value)?,
            "tau_refine" => self.tau_refine = num(value)?,
            "tau_decode" => self.tau_decode = num(value)?,
            "t_refine" => self.t_refine = num(value)?,
            "commits_per_step" => self.commits_per_step = num(value)?,
            "block_size" => self.block_size = num(value)?,
            "max_steps" => self.max_steps = num(value)?,
            "early_stop" => {
                self.early_stop = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(Error::Config(format!("expected true/false, got '{value}'"))),
                }
            }
            "kl_average" => {
                self.kl_average = match value {
                    "open" => KlAverage::OpenOnly,
                    "all" => KlAverage::AllPositions,
                    _ => return Err(Error::Config(format!("expected open/all, got '{value}'"))),
                }
            }
            "entropy_norm" => {
                self.entropy_norm = match value {
                    "nucleus" => EntropyNorm::Nucleus,
                    "full" => EntropyNorm::FullVocab,
                    _ => {
                        return Err(Error::Config(format!(
                            "expected nucleus/full, got '{value}'"
                        )))
                    }
                }
            }
            "n_eval" => self.n_eval = num(value)?,
            "probe_epsilons" => {
                self.probe_epsilons = value
                    .split(',')
                    .map(|v| num(v.trim()))
                    .collect::<Result<_>>()?
            }
            "probe_samples" => self.probe_samples = num(value)?,
            "probe_seq_len" => self.probe_seq_len = num(value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}
