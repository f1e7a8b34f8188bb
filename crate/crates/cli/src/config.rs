//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Every problem in a file (syntax, unknown or duplicate keys, bad values,
//! missing required keys, violated constraints) is collected into one
//! [`Error::Config`] so a user sees them all at once.

use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use warpspace::eval::EvalConfig;
use warpspace::trainer::{Mode, TrainConfig};
use warpspace::Error;

/// Keys that must appear in every config file.
pub const REQUIRED: [&str; 5] = ["seed", "num_warpings", "latent_dim", "eps_min", "eps_max"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Seed of the random-directions baseline.
    pub baseline_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            eval: EvalConfig::for_training(&train),
            train,
            baseline_seed: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str, errors: &mut Vec<String>) -> Option<T> {
    match raw.parse() {
        Ok(v) => Some(v),
        Err(_) => {
            errors.push(format!("{key}: cannot parse {raw:?}"));
            None
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut errors = Vec::new();
        let mut entries: HashMap<String, String> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`", lineno + 1));
                continue;
            };
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if entries.insert(key.clone(), value).is_some() {
                errors.push(format!("line {}: duplicate key {key}", lineno + 1));
            }
        }
        for key in REQUIRED {
            if !entries.contains_key(key) {
                errors.push(format!("{key}: required key is missing"));
            }
        }

        let mut cfg = Self::default();
        let mut eval_eps = None;
        let mut keys: Vec<_> = entries.keys().cloned().collect();
        keys.sort();
        for key in keys {
            let raw = entries[&key].as_str();
            let t = &mut cfg.train;
            let e = &mut errors;
            match key.as_str() {
                "seed" => t.seed = parse_value(&key, raw, e).unwrap_or(t.seed),
                "generator_seed" => {
                    t.generator_seed = parse_value(&key, raw, e).unwrap_or(t.generator_seed)
                }
                "num_warpings" => {
                    t.num_warpings = parse_value(&key, raw, e).unwrap_or(t.num_warpings)
                }
                "supports_per_warping" => {
                    t.supports_per_warping =
                        parse_value(&key, raw, e).unwrap_or(t.supports_per_warping)
                }
                "latent_dim" => t.latent_dim = parse_value(&key, raw, e).unwrap_or(t.latent_dim),
                "image_size" => t.image_size = parse_value(&key, raw, e).unwrap_or(t.image_size),
                "batch_size" => t.batch_size = parse_value(&key, raw, e).unwrap_or(t.batch_size),
                "iterations" => t.iterations = parse_value(&key, raw, e).unwrap_or(t.iterations),
                "lambda" => t.lambda = parse_value(&key, raw, e).unwrap_or(t.lambda),
                "eps_min" => t.eps_min = parse_value(&key, raw, e).unwrap_or(t.eps_min),
                "eps_max" => t.eps_max = parse_value(&key, raw, e).unwrap_or(t.eps_max),
                "warp_lr" => t.warp_lr = parse_value(&key, raw, e).unwrap_or(t.warp_lr),
                "recon_lr" => t.recon_lr = parse_value(&key, raw, e).unwrap_or(t.recon_lr),
                "beta1" => t.beta1 = parse_value(&key, raw, e).unwrap_or(t.beta1),
                "beta2" => t.beta2 = parse_value(&key, raw, e).unwrap_or(t.beta2),
                "adam_eps" => t.adam_eps = parse_value(&key, raw, e).unwrap_or(t.adam_eps),
                "support_std" => t.support_std = parse_value(&key, raw, e).unwrap_or(t.support_std),
                "gamma0" => t.gamma0 = parse_value(&key, raw, e).unwrap_or(t.gamma0),
                "freeze_weights" => {
                    t.freeze_weights = parse_value(&key, raw, e).unwrap_or(t.freeze_weights)
                }
                "freeze_scales" => {
                    t.freeze_scales = parse_value(&key, raw, e).unwrap_or(t.freeze_scales)
                }
                "log_every" => t.log_every = parse_value(&key, raw, e).unwrap_or(t.log_every),
                "mode" => match Mode::parse(raw) {
                    Some(m) => t.mode = m,
                    None => e.push(format!(
                        "mode: expected `nonlinear` or `linear`, got {raw:?}"
                    )),
                },
                "n_codes" => {
                    cfg.eval.n_codes = parse_value(&key, raw, e).unwrap_or(cfg.eval.n_codes)
                }
                "eval_steps" => {
                    cfg.eval.steps = parse_value(&key, raw, e).unwrap_or(cfg.eval.steps)
                }
                "eps_eval" => eval_eps = parse_value(&key, raw, e),
                "accuracy_samples" => {
                    cfg.eval.accuracy_samples =
                        parse_value(&key, raw, e).unwrap_or(cfg.eval.accuracy_samples)
                }
                "baseline_seed" => {
                    cfg.baseline_seed = parse_value(&key, raw, e).unwrap_or(cfg.baseline_seed)
                }
                "out_dir" => cfg.out_dir = PathBuf::from(raw),
                other => errors.push(format!("{other}: unknown key")),
            }
        }
        cfg.eval.eps = eval_eps.unwrap_or(cfg.train.eps_max / 2.0);
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.train.violations();
        if self.eval.n_codes == 0 {
            v.push("n_codes must be >= 1".into());
        }
        if self.eval.accuracy_samples == 0 {
            v.push("accuracy_samples must be >= 1".into());
        }
        if !(self.eval.eps > 0.0 && self.eval.eps.is_finite()) {
            v.push(format!("eps_eval must be positive, got {}", self.eval.eps));
        }
        v
    }

    /// Every resolved setting as sorted `key = value` lines; parsing this
    /// text yields the same configuration.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let mut pairs = vec![
            ("accuracy_samples", self.eval.accuracy_samples.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("baseline_seed", self.baseline_seed.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps_eval", self.eval.eps.to_string()),
            ("eps_max", t.eps_max.to_string()),
            ("eps_min", t.eps_min.to_string()),
            ("eval_steps", self.eval.steps.to_string()),
            ("freeze_scales", t.freeze_scales.to_string()),
            ("freeze_weights", t.freeze_weights.to_string()),
            ("gamma0", t.gamma0.to_string()),
            ("generator_seed", t.generator_seed.to_string()),
            ("image_size", t.image_size.to_string()),
            ("iterations", t.iterations.to_string()),
            ("lambda", t.lambda.to_string()),
            ("latent_dim", t.latent_dim.to_string()),
            ("log_every", t.log_every.to_string()),
            ("mode", t.mode.as_str().to_string()),
            ("n_codes", self.eval.n_codes.to_string()),
            ("num_warpings", t.num_warpings.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("recon_lr", t.recon_lr.to_string()),
            ("seed", t.seed.to_string()),
            ("support_std", t.support_std.to_string()),
            ("supports_per_warping", t.supports_per_warping.to_string()),
            ("warp_lr", t.warp_lr.to_string()),
        ];
        pairs.sort();
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text, excluding the output directory so the
    /// same experiment written to different places shares a fingerprint.
    pub fn fingerprint(&self) -> String {
        let text: String = self
            .canonical()
            .lines()
            .filter(|l| !l.starts_with("out_dir "))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        "seed = 3\nnum_warpings = 4\nlatent_dim = 8\neps_min = 0.25\neps_max = 2.0\n";

    #[test]
    fn minimal_file_uses_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.train.num_warpings, 4);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.eval.eps, 1.0);
    }

    #[test]
    fn comments_and_whitespace() {
        let text = format!("# header\n\n{MINIMAL}  mode =  linear   # trailing\n");
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.train.mode, Mode::LinearBaseline);
    }

    #[test]
    fn canonical_round_trips() {
        let c =
            ExperimentConfig::parse(&format!("{MINIMAL}lambda = 0.5\nout_dir = runs/a\n")).unwrap();
        let again = ExperimentConfig::parse(&c.canonical()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.fingerprint(), c.fingerprint());
        let moved = ExperimentConfig {
            out_dir: "elsewhere".into(),
            ..c.clone()
        };
        assert_eq!(moved.fingerprint(), c.fingerprint());
        assert_eq!(c.fingerprint().len(), 64);
    }

    #[test]
    fn errors_are_aggregated() {
        let text = "seed = x\nnum_warpings = 1\nlatent_dim = 8\neps_max = 2\nbogus = 1\nno equals sign\nseed = 4\n";
        let Err(Error::Config(errs)) = ExperimentConfig::parse(text) else {
            panic!("expected config error");
        };
        let joined = errs.join("\n");
        for needle in [
            "eps_min",
            "bogus",
            "line 6",
            "duplicate key seed",
            "num_warpings",
        ] {
            assert!(joined.contains(needle), "{needle} missing from {joined}");
        }
    }
}
