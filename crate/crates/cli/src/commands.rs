//! Subcommand implementations. Every file is written under the chosen
//! output directory.

use crate::config::ExperimentConfig;
use crate::pgm;
use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use warpspace::checkpoint::Checkpoint;
use warpspace::eval::{self, EvalConfig, EvalReport};
use warpspace::generator::SyntheticGenerator;
use warpspace::network::WarpingNetwork;
use warpspace::trainer::{sample_latent, Mode, Trainer};
use warpspace::warp::{nonlinearity_coefficient, Sign};
use warpspace::Error;

pub const CHECKPOINT_FILE: &str = "checkpoint.wsck";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";

/// Exit status for an error, following the documented contract.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::TrainingAborted(_) => 3,
                Error::Checkpoint(_) | Error::ChecksumMismatch { .. } => 4,
                Error::DegenerateTraversal { .. } => 5,
                _ => 1,
            };
        }
    }
    1
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Reads a checkpoint; every failure maps to the checkpoint exit code.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

/// The experiment configuration recorded in a checkpoint.
pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<ExperimentConfig> {
    let text: String = ck
        .metadata
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k} = {v}\n")))
        .collect();
    if text.is_empty() {
        return Err(Error::Checkpoint("checkpoint carries no configuration".into()).into());
    }
    ExperimentConfig::parse(&text)
        .map_err(|e| Error::Checkpoint(format!("recorded configuration: {e}")).into())
}

fn checkpoint_for(
    cfg: &ExperimentConfig,
    network: WarpingNetwork,
    reconstructor: warpspace::reconstructor::Reconstructor,
) -> Checkpoint {
    let mut ck =
        Checkpoint::new(network, reconstructor).with_meta("fingerprint", cfg.fingerprint());
    for line in cfg.canonical().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            ck = ck.with_meta(format!("config.{k}"), v);
        }
    }
    ck
}

/// Trains from `cfg` and writes the checkpoint, training log, resolved
/// config and fingerprint into `out`.
pub fn train(cfg: &ExperimentConfig, out: &Path, verbose: bool) -> Result<PathBuf> {
    create_dir(out)?;
    let mut trainer = Trainer::new(cfg.train.clone())?;
    let log = trainer.run(cfg.train.iterations, |e| {
        if verbose {
            eprintln!(
                "iter {:>6}  loss {:.4}  acc {:.3}  reg_mae {:.4}",
                e.iteration, e.loss, e.cls_accuracy, e.reg_mae
            );
        }
    })?;
    let (_, network, reconstructor) = trainer.into_models();
    write(out, TRAINING_LOG_FILE, log.to_csv())?;
    write(out, "config.cfg", cfg.canonical())?;
    write(
        out,
        "config_fingerprint.txt",
        format!("{}\n", cfg.fingerprint()),
    )?;
    let ck = checkpoint_for(cfg, network, reconstructor);
    write(out, CHECKPOINT_FILE, ck.to_bytes()?)
}

/// Evaluation overrides from the command line.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOverrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub eps: Option<f64>,
}

impl EvalOverrides {
    fn apply(&self, cfg: &ExperimentConfig) -> (EvalConfig, u64) {
        let mut e = cfg.eval;
        e.steps = self.steps.unwrap_or(e.steps);
        e.eps = self.eps.unwrap_or(e.eps);
        (e, self.seed.unwrap_or(cfg.train.seed))
    }
}

/// Runs the full evaluation protocol on a checkpoint and writes CSV and JSON
/// reports into `out`.
pub fn eval(
    checkpoint: &Path,
    config: Option<&ExperimentConfig>,
    overrides: EvalOverrides,
    out: &Path,
) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let recorded = config_from_checkpoint(&ck)?;
    let cfg = config.unwrap_or(&recorded);
    let (eval_cfg, seed) = overrides.apply(cfg);
    if !(eval_cfg.eps > 0.0 && eval_cfg.eps.is_finite()) {
        return Err(Error::Config(vec![format!(
            "--eps must be positive, got {}",
            eval_cfg.eps
        )])
        .into());
    }
    // The generator must be the one the checkpoint was trained against.
    let generator = SyntheticGenerator::new(recorded.train.generator_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = eval::evaluate(
        &ck.network,
        &ck.reconstructor,
        &generator,
        &recorded.train,
        &eval_cfg,
        &mut rng,
    )?;

    create_dir(out)?;
    write(
        out,
        "eval_accuracy.csv",
        format!(
            "metric,value\naccuracy_percent,{}\ndiagonal_dominance,{}\n",
            report.accuracy, report.diagonal_dominance
        ),
    )?;
    write(out, "eval_correlation.csv", report.correlation.raw_csv())?;
    write(out, "eval_correlation_l1.csv", report.correlation.l1_csv())?;
    write(out, "eval_ranges.csv", report.correlation.ranges_csv())?;
    write(
        out,
        "eval_assignment.csv",
        report.correlation.assignment_csv(),
    )?;
    write(out, "eval_phi.csv", report.phi.to_csv())?;
    let bundle = json!({
        "config_fingerprint": recorded.fingerprint(),
        "mode": recorded.train.mode.as_str(),
        "seed": seed,
        "eval": eval_cfg,
        "report": report,
    });
    write(
        out,
        "eval_report.json",
        format!("{}\n", serde_json::to_string_pretty(&bundle)?),
    )?;
    Ok(report)
}

/// Traversal export parameters.
#[derive(Debug, Clone, Copy)]
pub struct TraverseArgs {
    pub k: usize,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub eps: Option<f64>,
}

/// Walks warping `k` both ways from a seeded code and writes one P2 image
/// per step plus a metadata file. A walk that hits a vanishing gradient is
/// exported up to the failing step before the error is returned.
pub fn traverse(checkpoint: &Path, args: TraverseArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = config_from_checkpoint(&ck)?;
    let k = args.k;
    if k >= ck.network.num_warpings() {
        return Err(Error::Config(vec![format!(
            "--k must be below the number of warpings ({}), got {k}",
            ck.network.num_warpings()
        )])
        .into());
    }
    let steps = args.steps.unwrap_or(cfg.eval.steps);
    let eps = args.eps.unwrap_or(cfg.eval.eps);
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(vec![format!("--eps must be positive, got {eps}")]).into());
    }
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let generator = SyntheticGenerator::new(cfg.train.generator_config())?;
    let z0 = sample_latent(&mut ChaCha8Rng::seed_from_u64(seed), generator.dim());
    let warp = ck.network.warping(k)?;

    let mut failure = None;
    let mut walk = |sign: Sign| -> Result<Vec<Vec<f64>>> {
        match warp.traverse(&z0, eps, steps, sign) {
            Ok(path) => Ok(path.into_points()),
            Err(Error::DegenerateTraversal {
                step,
                norm,
                partial,
            }) => {
                failure.get_or_insert(Error::DegenerateTraversal {
                    step,
                    norm,
                    partial: partial.clone(),
                });
                Ok(partial)
            }
            Err(e) => Err(e.into()),
        }
    };
    let negative = walk(Sign::Negative)?;
    let positive = walk(Sign::Positive)?;

    create_dir(out)?;
    let size = generator.image_size();
    let first = -(negative.len() as i64 - 1);
    let points: Vec<&Vec<f64>> = negative
        .iter()
        .rev()
        .chain(positive.iter().skip(1))
        .collect();
    let mut files = Vec::with_capacity(points.len());
    let mut attributes = Vec::with_capacity(points.len());
    for (i, z) in points.iter().enumerate() {
        let step = first + i as i64;
        let image = generator.generate(z)?;
        files.push(write(
            out,
            &format!("path{k}_step{step:+}.pgm"),
            pgm::encode(&image, size, size),
        )?);
        attributes.push(generator.attributes(z)?.to_array());
    }
    let owned: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    let phi = nonlinearity_coefficient(&owned).ok();
    let meta = json!({
        "path": k,
        "seed": seed,
        "steps": steps,
        "eps": eps,
        "first_step": first,
        "complete": failure.is_none(),
        "phi": phi,
        "points": owned,
        "attributes": attributes,
    });
    files.push(write(
        out,
        &format!("path{k}_meta.json"),
        format!("{}\n", serde_json::to_string_pretty(&meta)?),
    )?);
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(files),
    }
}

/// One row of the baseline comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub method: &'static str,
    pub accuracy: f64,
    pub diagonal_dominance: f64,
    pub max_phi: f64,
}

/// Trains the reconstructor against Random and Coord directions, the linear
/// baseline, and the non-linear warpings with identical budgets, evaluates
/// all four with one seed, and writes `baseline_table.csv`.
pub fn baseline(cfg: &ExperimentConfig, out: &Path, verbose: bool) -> Result<Vec<BaselineRow>> {
    let t = &cfg.train;
    let generator = SyntheticGenerator::new(t.generator_config())?;
    let mut candidates: Vec<(&'static str, Trainer)> = Vec::new();
    let fixed = |net: WarpingNetwork| -> Result<Trainer> {
        let cfg_fixed = cfg.train.clone();
        let rec = cfg_fixed.build_reconstructor()?;
        Ok(Trainer::with_models(
            cfg_fixed,
            generator.clone(),
            net,
            rec,
        )?)
    };
    candidates.push((
        "random",
        fixed(eval::random_baseline(
            t.num_warpings,
            t.latent_dim,
            cfg.baseline_seed,
        )?)?,
    ));
    if t.num_warpings <= t.latent_dim {
        candidates.push((
            "coord",
            fixed(eval::coord_baseline(t.num_warpings, t.latent_dim)?)?,
        ));
    }
    let mut linear = t.clone();
    linear.mode = Mode::LinearBaseline;
    candidates.push(("linear", Trainer::new(linear)?));
    let mut nonlinear = t.clone();
    nonlinear.mode = Mode::Nonlinear;
    candidates.push(("nonlinear", Trainer::new(nonlinear)?));

    let mut rows = Vec::new();
    for (method, mut trainer) in candidates {
        if verbose {
            eprintln!("training {method} ({} iterations)", t.iterations);
        }
        trainer.run(t.iterations, |_| {})?;
        let (_, net, rec) = trainer.into_models();
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let report = eval::evaluate(&net, &rec, &generator, t, &cfg.eval, &mut rng)?;
        rows.push(BaselineRow {
            method,
            accuracy: report.accuracy,
            diagonal_dominance: report.diagonal_dominance,
            max_phi: report.phi.max(),
        });
    }
    create_dir(out)?;
    let mut csv = String::from("method,accuracy,diagonal_dominance,max_phi\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.method, r.accuracy, r.diagonal_dominance, r.max_phi
        ));
    }
    write(out, "baseline_table.csv", csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let code = |e: Error| exit_code(&anyhow::Error::new(e).context("wrapped"));
        assert_eq!(code(Error::Config(vec!["x".into()])), 2);
        assert_eq!(code(Error::TrainingAborted("x".into())), 3);
        assert_eq!(code(Error::Checkpoint("x".into())), 4);
        assert_eq!(
            code(Error::DegenerateTraversal {
                step: 0,
                norm: 0.0,
                partial: vec![]
            }),
            5
        );
        assert_eq!(code(Error::InvalidArgument("x".into())), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }
}
