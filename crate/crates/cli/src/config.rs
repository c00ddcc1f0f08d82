//! Run configuration: line-oriented `section.key = value` files plus
//! `--set` overrides, with every field defaulted.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use textdistill_core::admm::ADMMConfig;
use textdistill_core::filter::{FilterConfig, LabelCheckMode};
use textdistill_core::lm::{ModelConfig, TrainConfig};
use textdistill_core::target::DPConfig;

use crate::error::CliError;

/// `auto` or a fixed value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Auto<T> {
    Auto,
    Fixed(T),
}

impl<T: FromStr> FromStr for Auto<T> {
    type Err = T::Err;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            Ok(Auto::Auto)
        } else {
            s.parse().map(Auto::Fixed)
        }
    }
}

impl<T: Display> Display for Auto<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Auto::Auto => f.write_str("auto"),
            Auto::Fixed(v) => v.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSection {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab_cap: usize,
    pub n_max: usize,
    pub tied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataSection {
    /// Lines in the generated pretraining corpus.
    pub corpus_size: usize,
    /// Share of corpus lines that carry a label.
    pub labelled_fraction: f64,
    /// Class words per class allowed in labelled corpus lines.
    pub labelled_words: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub holdout_per_class: usize,
    /// Labelled examples per class for training the external label checker.
    pub checker_per_class: usize,
    /// Real examples per class for the real-data baseline.
    pub real_baseline: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DpSection {
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    /// One target over all classes instead of one per class.
    pub global: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmmSection {
    pub rho: Auto<f64>,
    pub t: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub init_steps: usize,
    pub k: usize,
    pub pool_per_class: Auto<usize>,
    pub n_tokens: Auto<usize>,
    /// Candidates per grid value when `rho = auto`.
    pub pilot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterSection {
    pub r: usize,
    pub mode: LabelCheckMode,
    pub tol: Auto<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheorySection {
    pub instances: usize,
    pub max_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    /// Pretraining corpus JSONL; generated when empty.
    pub corpus: Option<PathBuf>,
    /// Labelled real training set JSONL; generated when empty.
    pub dataset: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
    /// Data to fine-tune on; the filtered synthetic set when empty.
    pub finetune_data: Option<PathBuf>,
    /// Checkpoint used as the external label checker; trained on the
    /// checker split when empty.
    pub checker: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub data: DataSection,
    pub dp: DpSection,
    pub admm: AdmmSection,
    pub filter: FilterSection,
    pub finetune: FinetuneSection,
    pub theory: TheorySection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection {
                layers: 2,
                dim: 64,
                heads: 2,
                vocab_cap: 512,
                n_max: 32,
                tied: false,
            },
            pretrain: PretrainSection {
                steps: 600,
                lr: 3e-3,
                batch: 16,
            },
            data: DataSection {
                corpus_size: 4000,
                labelled_fraction: 0.05,
                labelled_words: 4,
                train_per_class: 100,
                test_per_class: 200,
                holdout_per_class: 100,
                checker_per_class: 100,
                real_baseline: 20,
            },
            dp: DpSection {
                epsilon: 0.05,
                delta: 1e-4,
                clip: 1.0,
                global: false,
            },
            admm: AdmmSection {
                rho: Auto::Auto,
                t: 30,
                inner_steps: 50,
                inner_lr: 0.008,
                init_steps: 50,
                k: 200,
                pool_per_class: Auto::Auto,
                n_tokens: Auto::Auto,
                pilot: 4,
            },
            filter: FilterSection {
                r: 20,
                mode: LabelCheckMode::LmLikelihood,
                tol: Auto::Auto,
            },
            finetune: FinetuneSection {
                steps: 200,
                lr: 1e-3,
                batch: 16,
                eval_every: 50,
            },
            theory: TheorySection {
                instances: 1000,
                max_dim: 6,
            },
            paths: PathsSection {
                out_dir: PathBuf::from("out"),
                corpus: None,
                dataset: None,
                test: None,
                holdout: None,
                finetune_data: None,
                checker: None,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

pub fn mode_name(m: LabelCheckMode) -> &'static str {
    match m {
        LabelCheckMode::LmLikelihood => "lm-likelihood",
        LabelCheckMode::ExternalClassifier => "external-classifier",
        LabelCheckMode::Off => "off",
    }
}

impl RunConfig {
    /// Sets one `section.key` (or `seed`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "model.layers" => self.model.layers = parse(key, v)?,
            "model.dim" => self.model.dim = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.vocab_cap" => self.model.vocab_cap = parse(key, v)?,
            "model.n_max" => self.model.n_max = parse(key, v)?,
            "model.tied" => self.model.tied = parse(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse(key, v)?,
            "data.corpus_size" => self.data.corpus_size = parse(key, v)?,
            "data.labelled_fraction" => self.data.labelled_fraction = parse(key, v)?,
            "data.labelled_words" => self.data.labelled_words = parse(key, v)?,
            "data.train_per_class" => self.data.train_per_class = parse(key, v)?,
            "data.test_per_class" => self.data.test_per_class = parse(key, v)?,
            "data.holdout_per_class" => self.data.holdout_per_class = parse(key, v)?,
            "data.checker_per_class" => self.data.checker_per_class = parse(key, v)?,
            "data.real_baseline" => self.data.real_baseline = parse(key, v)?,
            "dp.epsilon" => self.dp.epsilon = parse(key, v)?,
            "dp.delta" => self.dp.delta = parse(key, v)?,
            "dp.clip" => self.dp.clip = parse(key, v)?,
            "dp.global" => self.dp.global = parse(key, v)?,
            "admm.rho" => self.admm.rho = parse(key, v)?,
            "admm.t" => self.admm.t = parse(key, v)?,
            "admm.inner_steps" => self.admm.inner_steps = parse(key, v)?,
            "admm.inner_lr" => self.admm.inner_lr = parse(key, v)?,
            "admm.init_steps" => self.admm.init_steps = parse(key, v)?,
            "admm.k" => self.admm.k = parse(key, v)?,
            "admm.pool_per_class" => self.admm.pool_per_class = parse(key, v)?,
            "admm.n_tokens" => self.admm.n_tokens = parse(key, v)?,
            "admm.pilot" => self.admm.pilot = parse(key, v)?,
            "filter.r" => self.filter.r = parse(key, v)?,
            "filter.mode" => self.filter.mode = parse(key, v)?,
            "filter.tol" => self.filter.tol = parse(key, v)?,
            "finetune.steps" => self.finetune.steps = parse(key, v)?,
            "finetune.lr" => self.finetune.lr = parse(key, v)?,
            "finetune.batch" => self.finetune.batch = parse(key, v)?,
            "finetune.eval_every" => self.finetune.eval_every = parse(key, v)?,
            "theory.instances" => self.theory.instances = parse(key, v)?,
            "theory.max_dim" => self.theory.max_dim = parse(key, v)?,
            "paths.out_dir" => self.paths.out_dir = PathBuf::from(v),
            "paths.corpus" => self.paths.corpus = opt_path(v),
            "paths.dataset" => self.paths.dataset = opt_path(v),
            "paths.test" => self.paths.test = opt_path(v),
            "paths.holdout" => self.paths.holdout = opt_path(v),
            "paths.finetune_data" => self.paths.finetune_data = opt_path(v),
            "paths.checker" => self.paths.checker = opt_path(v),
            other => return Err(CliError::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a config file's lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected `key = value`", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Core(textdistill_core::Error::io(path, e)))?;
        self.apply_text(&text)
    }

    /// Every resolved setting as `(key, value)`, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let p = &self.pretrain;
        let d = &self.data;
        let a = &self.admm;
        let kv: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.vocab_cap", m.vocab_cap.to_string()),
            ("model.n_max", m.n_max.to_string()),
            ("model.tied", m.tied.to_string()),
            ("pretrain.steps", p.steps.to_string()),
            ("pretrain.lr", p.lr.to_string()),
            ("pretrain.batch", p.batch.to_string()),
            ("data.corpus_size", d.corpus_size.to_string()),
            ("data.labelled_fraction", d.labelled_fraction.to_string()),
            ("data.labelled_words", d.labelled_words.to_string()),
            ("data.train_per_class", d.train_per_class.to_string()),
            ("data.test_per_class", d.test_per_class.to_string()),
            ("data.holdout_per_class", d.holdout_per_class.to_string()),
            ("data.checker_per_class", d.checker_per_class.to_string()),
            ("data.real_baseline", d.real_baseline.to_string()),
            ("dp.epsilon", self.dp.epsilon.to_string()),
            ("dp.delta", self.dp.delta.to_string()),
            ("dp.clip", self.dp.clip.to_string()),
            ("dp.global", self.dp.global.to_string()),
            ("admm.rho", a.rho.to_string()),
            ("admm.t", a.t.to_string()),
            ("admm.inner_steps", a.inner_steps.to_string()),
            ("admm.inner_lr", a.inner_lr.to_string()),
            ("admm.init_steps", a.init_steps.to_string()),
            ("admm.k", a.k.to_string()),
            ("admm.pool_per_class", a.pool_per_class.to_string()),
            ("admm.n_tokens", a.n_tokens.to_string()),
            ("admm.pilot", a.pilot.to_string()),
            ("filter.r", self.filter.r.to_string()),
            ("filter.mode", mode_name(self.filter.mode).to_string()),
            ("filter.tol", self.filter.tol.to_string()),
            ("finetune.steps", self.finetune.steps.to_string()),
            ("finetune.lr", self.finetune.lr.to_string()),
            ("finetune.batch", self.finetune.batch.to_string()),
            ("finetune.eval_every", self.finetune.eval_every.to_string()),
            ("theory.instances", self.theory.instances.to_string()),
            ("theory.max_dim", self.theory.max_dim.to_string()),
            ("paths.out_dir", self.paths.out_dir.display().to_string()),
            ("paths.corpus", show_path(&self.paths.corpus)),
            ("paths.dataset", show_path(&self.paths.dataset)),
            ("paths.test", show_path(&self.paths.test)),
            ("paths.holdout", show_path(&self.paths.holdout)),
            ("paths.finetune_data", show_path(&self.paths.finetune_data)),
            ("paths.checker", show_path(&self.paths.checker)),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The resolved configuration in its own file format.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.model.layers,
            dim: self.model.dim,
            heads: self.model.heads,
            n_max: self.model.n_max,
            vocab_size,
            tied: self.model.tied,
            ..ModelConfig::default()
        }
    }

    pub fn dp_config(&self) -> DPConfig {
        DPConfig {
            epsilon: self.dp.epsilon,
            delta: self.dp.delta,
            clip: self.dp.clip,
        }
    }

    /// ADMM settings with `ρ` resolved by the caller.
    pub fn admm_config(&self, rho: f64) -> ADMMConfig {
        let a = &self.admm;
        ADMMConfig {
            rho,
            t: a.t,
            inner_steps: a.inner_steps,
            inner_lr: a.inner_lr,
            init_steps: a.init_steps,
            k: a.k,
            pool_per_class: match a.pool_per_class {
                Auto::Auto => 2 * self.filter.r,
                Auto::Fixed(n) => n,
            },
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            r: self.filter.r,
            mode: self.filter.mode,
            tol: match self.filter.tol {
                Auto::Auto => None,
                Auto::Fixed(t) => Some(t),
            },
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.pretrain.steps,
            lr: self.pretrain.lr,
            batch: self.pretrain.batch,
            eval_every: 0,
            linear_decay: true,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.finetune.steps,
            lr: self.finetune.lr,
            batch: self.finetune.batch,
            eval_every: self.finetune.eval_every,
            linear_decay: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.admm.t, c.admm.k, c.admm.inner_steps), (30, 200, 50));
        assert_eq!(c.admm.inner_lr, 0.008);
        assert_eq!((c.dp.epsilon, c.dp.delta, c.dp.clip), (0.05, 1e-4, 1.0));
        assert_eq!((c.finetune.steps, c.finetune.batch), (200, 16));
        assert_eq!(c.admm_config(1.0).pool_per_class, 40);
    }

    #[test]
    fn text_round_trip_and_comments() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nadmm.rho = 0.5  # inline\nfilter.mode = off\n\nseed=7\n")
            .unwrap();
        assert_eq!(c.admm.rho, Auto::Fixed(0.5));
        assert_eq!(c.filter.mode, LabelCheckMode::Off);
        assert_eq!(c.seed, 7);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_keys_and_values_are_usage_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("admm.nope", "1"), Err(CliError::Usage(_))));
        assert!(matches!(c.set("admm.t", "many"), Err(CliError::Usage(_))));
        assert!(matches!(c.apply_text("justtext"), Err(CliError::Usage(_))));
    }
}
