//! Joint optimization of the warping network and the reconstructor.
//!
//! Each sample draws a latent code, a warping index and a signed shift,
//! renders the image pair `(𝔊(z), 𝔊(z + δz))`, and asks the reconstructor to
//! recover the index (cross-entropy) and the signed shift (absolute error).
//! The batch-mean loss is backpropagated through the reconstructor, the
//! generator and the normalized shift into the warping parameters, and both
//! models take one Adam step.

use crate::autodiff::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, SyntheticGenerator};
use crate::network::{InitConfig, Trainable, WarpingNetwork};
use crate::parallel;
use crate::reconstructor::Reconstructor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Resampling attempts for a latent code that lands on a vanishing gradient.
pub const MAX_RESAMPLES: usize = 8;
/// Largest tolerated fraction of degenerate samples in a batch.
pub const MAX_DEGENERATE_FRACTION: f64 = 0.1;
/// Smallest accepted `eps_min`.
pub const MIN_EPS_MIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Learned RBF warpings.
    Nonlinear,
    /// One bipolar pair per warping with frozen tiny `γ` (global directions).
    LinearBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Nonlinear => "nonlinear",
            Mode::LinearBaseline => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nonlinear" => Some(Mode::Nonlinear),
            "linear" | "linear-baseline" => Some(Mode::LinearBaseline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_warpings: usize,
    pub supports_per_warping: usize,
    pub latent_dim: usize,
    pub image_size: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lambda: f64,
    pub eps_min: f64,
    pub eps_max: f64,
    pub warp_lr: f64,
    pub recon_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub support_std: f64,
    pub gamma0: f64,
    pub seed: u64,
    pub generator_seed: u64,
    pub mode: Mode,
    pub freeze_weights: bool,
    pub freeze_scales: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_warpings: 5,
            supports_per_warping: 2,
            latent_dim: 16,
            image_size: 16,
            batch_size: 32,
            iterations: 10_000,
            lambda: 0.25,
            eps_min: 0.25,
            eps_max: 2.0,
            warp_lr: 1e-3,
            recon_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            support_std: 2.0,
            gamma0: 0.01,
            seed: 0,
            generator_seed: 0,
            mode: Mode::Nonlinear,
            freeze_weights: false,
            freeze_scales: false,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Collects every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_warpings < 2 {
            v.push(format!(
                "num_warpings must be >= 2, got {}",
                self.num_warpings
            ));
        }
        if self.mode == Mode::Nonlinear
            && (self.supports_per_warping < 2 || !self.supports_per_warping.is_multiple_of(2))
        {
            v.push(format!(
                "supports_per_warping must be even and >= 2, got {}",
                self.supports_per_warping
            ));
        }
        if self.latent_dim < 1 {
            v.push("latent_dim must be >= 1".into());
        }
        if self.image_size < 4 {
            v.push(format!("image_size must be >= 4, got {}", self.image_size));
        }
        if self.batch_size < 1 {
            v.push("batch_size must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            v.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.eps_min.is_nan() || self.eps_min < MIN_EPS_MIN {
            v.push(format!(
                "eps_min must be >= {MIN_EPS_MIN}, got {}",
                self.eps_min
            ));
        }
        if !(self.eps_max > self.eps_min && self.eps_max.is_finite()) {
            v.push(format!(
                "eps_max must exceed eps_min, got eps_min={} eps_max={}",
                self.eps_min, self.eps_max
            ));
        }
        for (name, lr) in [("warp_lr", self.warp_lr), ("recon_lr", self.recon_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                v.push(format!("{name} must be positive, got {lr}"));
            }
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            v.push("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            v.push("adam_eps must be positive".into());
        }
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            v.push(format!("gamma0 must be positive, got {}", self.gamma0));
        }
        if self.support_std.is_nan() || self.support_std <= 0.0 {
            v.push("support_std must be positive".into());
        }
        if self.log_every < 1 {
            v.push("log_every must be >= 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            dim: self.latent_dim,
            image_size: self.image_size,
            seed: self.generator_seed,
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Independent seeds for the network, reconstructor and sampler.
    fn seeds(&self) -> [u64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        [rng.random(), rng.random(), rng.random()]
    }

    /// Fresh warping network for this configuration.
    pub fn build_network(&self) -> Result<WarpingNetwork> {
        let seed = self.seeds()[0];
        match self.mode {
            Mode::LinearBaseline => {
                WarpingNetwork::linear_directions_mode(self.num_warpings, self.latent_dim, seed)
            }
            Mode::Nonlinear => {
                let init = InitConfig {
                    support_std: self.support_std,
                    gamma0: self.gamma0,
                    ..InitConfig::default()
                };
                let mut net = WarpingNetwork::init(
                    self.num_warpings,
                    self.supports_per_warping,
                    self.latent_dim,
                    seed,
                    &init,
                )?;
                net.set_trainable(Trainable {
                    supports: true,
                    weights: !self.freeze_weights,
                    scales: !self.freeze_scales,
                });
                Ok(net)
            }
        }
    }

    pub fn build_reconstructor(&self) -> Result<Reconstructor> {
        Reconstructor::new(2, self.num_warpings, self.seeds()[1])
    }
}

/// One `(z, k, ε)` draw.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub z: Vec<f64>,
    pub k: usize,
    pub eps_signed: f64,
}

pub fn sample_latent(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `z ~ 𝒩(0, I)`, `k ~ U{0..K-1}`, `|ε| ~ U[ε_min, ε_max]` with a uniform sign.
pub fn sample(rng: &mut impl Rng, config: &TrainConfig) -> TrainSample {
    let z = sample_latent(rng, config.latent_dim);
    let k = rng.random_range(0..config.num_warpings);
    let magnitude = rng.random_range(config.eps_min..=config.eps_max);
    let eps_signed = if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    };
    TrainSample { z, k, eps_signed }
}

/// `CE(logits, k) + λ · |ε̃ - ε|`.
pub fn composite_loss(
    tape: &mut Tape,
    k: usize,
    logits: Var,
    eps_signed: f64,
    eps_pred: Var,
    lambda: f64,
) -> Result<Var> {
    let cls = tape.cross_entropy(logits, k)?;
    let reg = tape.mean_absolute_error(eps_pred, eps_signed)?;
    let reg = tape.scale(reg, lambda);
    tape.add(cls, reg)
}

/// Batch statistics of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub cls_accuracy: f64,
    pub reg_error: f64,
    /// Samples dropped after exhausting resampling.
    pub degenerate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub cls_accuracy: f64,
    pub reg_mae: f64,
}

/// Window-averaged training statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "iteration,loss,cls_accuracy,reg_mae";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.iteration, e.loss, e.cls_accuracy, e.reg_mae
            ));
        }
        s
    }
}

/// Per-sample forward/backward outcome.
struct SampleOutcome {
    loss: f64,
    correct: bool,
    abs_error: f64,
    /// Gradients for `[supports, weights, log_scales, reconstructor...]`.
    grads: Vec<Option<Vec<f64>>>,
}

/// Forward pass for one sample; returns the tape, the loss node, the
/// parameter nodes and the heads.
pub struct SampleGraph {
    pub tape: Tape,
    pub loss: Var,
    pub network: crate::network::NetworkVars,
    pub reconstructor: Vec<Var>,
    pub logits: Var,
    pub eps_pred: Var,
}

/// Builds the full per-sample graph: shift, render both images, stack,
/// reconstruct, composite loss.
pub fn sample_graph(
    network: &WarpingNetwork,
    reconstructor: &Reconstructor,
    generator: &SyntheticGenerator,
    sample: &TrainSample,
    lambda: f64,
) -> Result<SampleGraph> {
    let size = generator.image_size();
    let mut tape = Tape::new();
    let nvars = network.bind(&mut tape)?;
    let rvars = reconstructor.bind(&mut tape);
    let z_shifted =
        network.shift_on_tape(&mut tape, &nvars, sample.k, &sample.z, sample.eps_signed)?;
    let shifted = generator.generate_on_tape(&mut tape, z_shifted)?;
    let original = tape.constant(vec![1, 1, size, size], generator.generate(&sample.z)?)?;
    let pair = tape.concat_channels(original, shifted)?;
    let heads = reconstructor.forward(&mut tape, &rvars, pair)?;
    let loss = composite_loss(
        &mut tape,
        sample.k,
        heads.logits,
        sample.eps_signed,
        heads.shift,
        lambda,
    )?;
    Ok(SampleGraph {
        tape,
        loss,
        network: nvars,
        reconstructor: rvars,
        logits: heads.logits,
        eps_pred: heads.shift,
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

fn run_sample(
    network: &WarpingNetwork,
    reconstructor: &Reconstructor,
    generator: &SyntheticGenerator,
    sample: &TrainSample,
    lambda: f64,
) -> Result<SampleOutcome> {
    let g = sample_graph(network, reconstructor, generator, sample, lambda)?;
    let grads = g.tape.backward(g.loss)?;
    let mut all = vec![
        grads.get(g.network.supports).map(<[f64]>::to_vec),
        grads.get(g.network.weights).map(<[f64]>::to_vec),
        grads.get(g.network.log_scales).map(<[f64]>::to_vec),
    ];
    all.extend(
        g.reconstructor
            .iter()
            .map(|&v| grads.get(v).map(<[f64]>::to_vec)),
    );
    Ok(SampleOutcome {
        loss: g.tape.item(g.loss),
        correct: argmax(g.tape.value(g.logits)) == sample.k,
        abs_error: (g.tape.item(g.eps_pred) - sample.eps_signed).abs(),
        grads: all,
    })
}

/// Owns the models, optimizers and sampler state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    generator: SyntheticGenerator,
    network: WarpingNetwork,
    reconstructor: Reconstructor,
    warp_opt: Adam,
    recon_opt: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = SyntheticGenerator::new(config.generator_config())?;
        let network = config.build_network()?;
        let reconstructor = config.build_reconstructor()?;
        Self::with_models(config, generator, network, reconstructor)
    }

    /// Trains the given models (used for baselines whose warpings are fixed).
    pub fn with_models(
        config: TrainConfig,
        generator: SyntheticGenerator,
        network: WarpingNetwork,
        reconstructor: Reconstructor,
    ) -> Result<Self> {
        config.validate()?;
        if network.dim() != generator.dim() || reconstructor.num_classes() != network.num_warpings()
        {
            return Err(Error::Config(vec![format!(
                "component mismatch: network dim {} / generator dim {}, {} warpings / {} classes",
                network.dim(),
                generator.dim(),
                network.num_warpings(),
                reconstructor.num_classes()
            )]));
        }
        let warp_opt = Adam::new(config.adam(config.warp_lr), &network.parameter_sizes());
        let recon_opt = Adam::new(
            config.adam(config.recon_lr),
            &reconstructor.parameter_sizes(),
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seeds()[2]);
        Ok(Self {
            config,
            generator,
            network,
            reconstructor,
            warp_opt,
            recon_opt,
            rng,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &SyntheticGenerator {
        &self.generator
    }

    pub fn network(&self) -> &WarpingNetwork {
        &self.network
    }

    pub fn reconstructor(&self) -> &Reconstructor {
        &self.reconstructor
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn sample_batch(&mut self) -> Vec<TrainSample> {
        (0..self.config.batch_size)
            .map(|_| sample(&mut self.rng, &self.config))
            .collect()
    }

    // Replaces z for samples whose shift is undefined; keeps k and ε.
    fn repair(&mut self, batch: &mut [TrainSample]) -> Result<Vec<bool>> {
        let mut usable = Vec::with_capacity(batch.len());
        for s in batch.iter_mut() {
            let warp = self.network.warping(s.k)?;
            let mut ok = warp.shift(&s.z, s.eps_signed).is_ok();
            let mut attempts = 0;
            while !ok && attempts < MAX_RESAMPLES {
                s.z = sample_latent(&mut self.rng, self.config.latent_dim);
                ok = warp.shift(&s.z, s.eps_signed).is_ok();
                attempts += 1;
            }
            usable.push(ok);
        }
        Ok(usable)
    }

    /// One joint update on `batch`.
    pub fn train_step(&mut self, mut batch: Vec<TrainSample>) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let usable = self.repair(&mut batch)?;
        let (network, reconstructor, generator, lambda) = (
            &self.network,
            &self.reconstructor,
            &self.generator,
            self.config.lambda,
        );
        let outcomes = parallel::map_indexed(batch.len(), |i| {
            if !usable[i] {
                return Ok(None);
            }
            match run_sample(network, reconstructor, generator, &batch[i], lambda) {
                Ok(o) => Ok(Some(o)),
                Err(Error::DegenerateGradient { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        });
        let outcomes: Vec<Option<SampleOutcome>> = outcomes.into_iter().collect::<Result<_>>()?;
        let degenerate = outcomes.iter().filter(|o| o.is_none()).count();
        if degenerate as f64 > MAX_DEGENERATE_FRACTION * batch.len() as f64 {
            return Err(Error::TrainingAborted(format!(
                "{degenerate} of {} samples at iteration {} have a vanishing warping gradient (collapsed warping)",
                batch.len(),
                self.iteration
            )));
        }

        // Fixed-order reduction keeps the update bit-reproducible.
        let n_params = 3 + self.reconstructor.parameter_sizes().len();
        let mut sums: Vec<Option<Vec<f64>>> = vec![None; n_params];
        let (mut loss, mut correct, mut abs_err, mut used) = (0.0, 0usize, 0.0, 0usize);
        for o in outcomes.iter().flatten() {
            loss += o.loss;
            correct += o.correct as usize;
            abs_err += o.abs_error;
            used += 1;
            for (acc, g) in sums.iter_mut().zip(&o.grads) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                        None => *acc = Some(g.clone()),
                    }
                }
            }
        }
        let inv = 1.0 / used as f64;
        let mut net_params = self.network.parameters_mut();
        let mut rec_params = self.reconstructor.parameters_mut();
        let tensors = net_params.iter_mut().chain(rec_params.iter_mut());
        for (t, g) in tensors.zip(sums) {
            if let Some(mut g) = g {
                g.iter_mut().for_each(|v| *v *= inv);
                t.zero_grad();
                t.accumulate_grad(&g)?;
            }
        }
        self.warp_opt.step(&mut self.network.parameters_mut())?;
        self.recon_opt
            .step(&mut self.reconstructor.parameters_mut())?;
        self.iteration += 1;
        Ok(StepReport {
            loss: loss * inv,
            cls_accuracy: correct as f64 * inv,
            reg_error: abs_err * inv,
            degenerate,
        })
    }

    /// Runs `iterations` steps, logging window means every `log_every`
    /// iterations and at the final iteration.
    pub fn run(
        &mut self,
        iterations: usize,
        mut on_log: impl FnMut(&LogEntry),
    ) -> Result<TrainingLog> {
        let mut log = TrainingLog::default();
        let (mut loss, mut acc, mut mae, mut count) = (0.0, 0.0, 0.0, 0usize);
        for i in 0..iterations {
            let batch = self.sample_batch();
            let r = self.train_step(batch)?;
            loss += r.loss;
            acc += r.cls_accuracy;
            mae += r.reg_error;
            count += 1;
            if self.iteration.is_multiple_of(self.config.log_every) || i + 1 == iterations {
                let n = count as f64;
                let entry = LogEntry {
                    iteration: self.iteration,
                    loss: loss / n,
                    cls_accuracy: acc / n,
                    reg_mae: mae / n,
                };
                on_log(&entry);
                log.entries.push(entry);
                (loss, acc, mae, count) = (0.0, 0.0, 0.0, 0);
            }
        }
        Ok(log)
    }

    pub fn into_models(self) -> (SyntheticGenerator, WarpingNetwork, Reconstructor) {
        (self.generator, self.network, self.reconstructor)
    }
}

/// Models and log produced by [`train`].
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub generator: SyntheticGenerator,
    pub network: WarpingNetwork,
    pub reconstructor: Reconstructor,
    pub log: TrainingLog,
}

/// Full run of `config.iterations` steps from a fresh initialization.
pub fn train(config: &TrainConfig) -> Result<TrainedModels> {
    train_with_progress(config, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    on_log: impl FnMut(&LogEntry),
) -> Result<TrainedModels> {
    let mut trainer = Trainer::new(config.clone())?;
    let log = trainer.run(config.iterations, on_log)?;
    let (generator, network, reconstructor) = trainer.into_models();
    Ok(TrainedModels {
        generator,
        network,
        reconstructor,
        log,
    })
}

/// Flattens every tensor for bit comparisons.
pub fn snapshot(tensors: &[&Tensor]) -> Vec<u64> {
    tensors
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}
