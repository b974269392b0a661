//! Flat `key = value` experiment description.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Unknown
//! keys are rejected so that typos fail loudly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flows::FlowKind;
use crate::nn::{Likelihood, ModelSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// One of `none`, `hf`, `planar`, `liniaf`, `ccliniaf`.
    pub flow: String,
    /// Number of combined matrices `K` for ccLinIAF.
    pub components: usize,
    /// Number of steps `T` for `hf` and `planar`.
    pub steps: usize,
    pub latent: usize,
    pub hidden: usize,
    pub likelihood: Likelihood,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// Candidate learning rates; when non-empty, `train` sweeps them and
    /// keeps the run with the best validation bound.
    pub lr_grid: Vec<f64>,
    pub seed: u64,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Use only the first `train_limit` training examples (0 = all).
    pub train_limit: usize,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            flow: "ccliniaf".into(),
            components: 5,
            steps: 1,
            latent: 40,
            hidden: 300,
            likelihood: Likelihood::Bernoulli,
            batch_size: 100,
            max_epochs: 5000,
            warmup_epochs: 200,
            patience: 100,
            learning_rate: 1e-3,
            lr_grid: Vec::new(),
            seed: 0,
            train_path: None,
            valid_path: None,
            test_path: None,
            train_limit: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Default learning-rate grid.
pub const LR_GRID: [f64; 3] = [1e-4, 3e-4, 1e-3];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a single `key=value` pair.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "flow" => self.flow = value.to_string(),
            "components" => self.components = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "latent" => self.latent = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "likelihood" => self.likelihood = value.parse()?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "lr_grid" => {
                self.lr_grid = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "seed" => self.seed = parse_num(key, value)?,
            "train_path" => self.train_path = opt_path(value),
            "valid_path" => self.valid_path = opt_path(value),
            "test_path" => self.test_path = opt_path(value),
            "train_limit" => self.train_limit = parse_num(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn flow_kind(&self) -> Result<FlowKind> {
        FlowKind::from_parts(&self.flow, self.steps, self.components)
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.flow_kind()?;
        kind.validate_latent(self.latent)?;
        let checks = [
            (self.components >= 1, "components must be at least 1"),
            (self.hidden >= 1, "hidden must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.max_epochs >= 1, "max_epochs must be at least 1"),
            (self.patience >= 1, "patience must be at least 1"),
            (
                self.learning_rate > 0.0 && self.learning_rate.is_finite(),
                "learning_rate must be positive",
            ),
            (
                self.lr_grid.iter().all(|&lr| lr > 0.0 && lr.is_finite()),
                "lr_grid entries must be positive",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, data_dim: usize) -> Result<ModelSpec> {
        let spec = ModelSpec {
            data_dim,
            latent: self.latent,
            hidden: self.hidden,
            flow: self.flow_kind()?,
            likelihood: self.likelihood,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical text form with every key in a fixed order. `output_dir` is
    /// left out so that identical experiments written to different places
    /// serialize identically; [`to_text`](Self::to_text) includes it.
    pub fn experiment_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let grid: Vec<String> = self.lr_grid.iter().map(f64::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "flow = {}", self.flow);
        let _ = writeln!(s, "components = {}", self.components);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "latent = {}", self.latent);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "likelihood = {}", self.likelihood);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "warmup_epochs = {}", self.warmup_epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "lr_grid = {}", grid.join(","));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "train_path = {}", path(&self.train_path));
        let _ = writeln!(s, "valid_path = {}", path(&self.valid_path));
        let _ = writeln!(s, "test_path = {}", path(&self.test_path));
        let _ = writeln!(s, "train_limit = {}", self.train_limit);
        s
    }

    pub fn to_text(&self) -> String {
        format!("{}output_dir = {}\n", self.experiment_text(), self.output_dir.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.components, 5);
        assert_eq!(c.latent, 40);
        assert_eq!(c.hidden, 300);
        assert_eq!(c.batch_size, 100);
        assert_eq!(c.max_epochs, 5000);
        assert_eq!(c.warmup_epochs, 200);
        assert_eq!(c.patience, 100);
        c.validate().unwrap();
    }

    #[test]
    fn parse_comments_and_round_trip() {
        let text = "# experiment\nflow = liniaf  # baseline\nlatent=8\n\nlr_grid = 1e-4, 3e-4\nseed = 7\ntrain_path = a.amat\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.flow_kind().unwrap(), FlowKind::LinIaf);
        assert_eq!(c.latent, 8);
        assert_eq!(c.lr_grid, vec![1e-4, 3e-4]);
        assert_eq!(c.train_path, Some(PathBuf::from("a.amat")));
        let again = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(TrainConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("latent = forty"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("patience = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("learning_rate = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("flow = nice"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("components = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("just words"), Err(Error::Config(_))));
    }

    #[test]
    fn experiment_text_ignores_output_dir() {
        let mut a = TrainConfig::default();
        let mut b = TrainConfig::default();
        a.output_dir = "x".into();
        b.output_dir = "y".into();
        assert_eq!(a.experiment_text(), b.experiment_text());
        assert_ne!(a.to_text(), b.to_text());
    }
}
