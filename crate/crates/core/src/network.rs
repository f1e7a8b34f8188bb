//! The K trainable warpings stored as support tensor, weight matrix and
//! log-scale matrix.
//!
//! In bipolar mode only one weight and one log-scale per pair are stored;
//! the full `K × N` matrices are materialized by mirroring (`α, -α` and
//! `log γ, log γ`). The tying therefore holds exactly after any update.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::warp::{WarpingFunction, DEGENERATE_THRESHOLD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Scale used for frozen linear-regime pairs.
pub const LINEAR_GAMMA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    /// Standard deviation of the initial support vectors.
    pub support_std: f64,
    /// Free weights are drawn from `U[low, high)`.
    pub weight_range: (f64, f64),
    /// Initial RBF scale `γ₀`.
    pub gamma0: f64,
    pub bipolar: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            support_std: 2.0,
            weight_range: (0.5, 1.5),
            gamma0: 0.01,
            bipolar: true,
        }
    }
}

/// Which parameter groups receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub supports: bool,
    pub weights: bool,
    pub scales: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        supports: true,
        weights: true,
        scales: true,
    };
    pub const NONE: Self = Self {
        supports: false,
        weights: false,
        scales: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpingNetwork {
    num_warpings: usize,
    supports_per_warping: usize,
    dim: usize,
    bipolar: bool,
    /// `K × N × d`.
    supports: Tensor,
    /// `K × N/2` in bipolar mode, else `K × N`.
    weights: Tensor,
    /// Same layout as `weights`.
    log_scales: Tensor,
}

/// Tape handles for one forward pass through the network.
#[derive(Debug, Clone, Copy)]
pub struct NetworkVars {
    pub supports: Var,
    pub weights: Var,
    pub log_scales: Var,
    /// Mirrored `K × N` matrices.
    weight_matrix: Var,
    log_scale_matrix: Var,
}

impl WarpingNetwork {
    pub fn init(k: usize, n: usize, d: usize, seed: u64, cfg: &InitConfig) -> Result<Self> {
        let mut errs = Vec::new();
        if k < 2 {
            errs.push(format!("num_warpings must be >= 2, got {k}"));
        }
        if n < 1 || (cfg.bipolar && (n < 2 || !n.is_multiple_of(2))) {
            errs.push(format!(
                "supports_per_warping must be even and >= 2 in bipolar mode, got {n}"
            ));
        }
        if d < 1 {
            errs.push("latent dim must be >= 1".into());
        }
        if !(cfg.gamma0 > 0.0 && cfg.gamma0.is_finite()) {
            errs.push(format!("gamma0 must be positive, got {}", cfg.gamma0));
        }
        if !(cfg.support_std >= 0.0 && cfg.weight_range.0 <= cfg.weight_range.1) {
            errs.push("invalid support_std or weight_range".into());
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let supports: Vec<f64> = (0..k * n * d)
            .map(|_| cfg.support_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let free = if cfg.bipolar { n / 2 } else { n };
        let (lo, hi) = cfg.weight_range;
        let weights: Vec<f64> = (0..k * free)
            .map(|_| {
                if lo < hi {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            })
            .collect();
        let log_scales = vec![cfg.gamma0.ln(); k * free];
        Self::from_free_parts(
            k,
            n,
            d,
            cfg.bipolar,
            supports,
            weights,
            log_scales,
            Trainable::ALL,
        )
    }

    /// Assembles a network from its free parameters (bipolar: `K × N/2`
    /// weights and log-scales).
    #[allow(clippy::too_many_arguments)]
    pub fn from_free_parts(
        k: usize,
        n: usize,
        d: usize,
        bipolar: bool,
        supports: Vec<f64>,
        weights: Vec<f64>,
        log_scales: Vec<f64>,
        trainable: Trainable,
    ) -> Result<Self> {
        if bipolar && !n.is_multiple_of(2) {
            return Err(Error::Config(vec![format!(
                "supports_per_warping must be even in bipolar mode, got {n}"
            )]));
        }
        let free = if bipolar { n / 2 } else { n };
        let mut net = Self {
            num_warpings: k,
            supports_per_warping: n,
            dim: d,
            bipolar,
            supports: Tensor::new(vec![k, n, d], supports)?,
            weights: Tensor::new(vec![k, free], weights)?,
            log_scales: Tensor::new(vec![k, free], log_scales)?,
        };
        net.set_trainable(trainable);
        Ok(net)
    }

    /// One bipolar pair per warping with `γ` frozen at [`LINEAR_GAMMA`]; only
    /// the support vectors train. Every warping then has a constant direction.
    pub fn linear_directions_mode(k: usize, d: usize, seed: u64) -> Result<Self> {
        let cfg = InitConfig {
            gamma0: LINEAR_GAMMA,
            ..InitConfig::default()
        };
        let mut net = Self::init(k, 2, d, seed, &cfg)?;
        net.set_trainable(Trainable {
            supports: true,
            weights: false,
            scales: false,
        });
        Ok(net)
    }

    /// Frozen linear-regime network whose warping `k` points along
    /// `directions[k]` (pair `(u, -u)`, weight 1).
    pub fn fixed_linear(directions: &[Vec<f64>]) -> Result<Self> {
        let k = directions.len();
        let d = directions.first().map_or(0, Vec::len);
        let mut supports = Vec::with_capacity(k * 2 * d);
        for u in directions {
            if u.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "fixed_linear direction",
                    expected: d,
                    actual: u.len(),
                });
            }
            supports.extend_from_slice(u);
            supports.extend(u.iter().map(|x| -x));
        }
        if k < 2 || d < 1 {
            return Err(Error::Config(vec![format!(
                "need >= 2 directions of dim >= 1, got {k}×{d}"
            )]));
        }
        Self::from_free_parts(
            k,
            2,
            d,
            true,
            supports,
            vec![1.0; k],
            vec![LINEAR_GAMMA.ln(); k],
            Trainable::NONE,
        )
    }

    pub fn set_trainable(&mut self, t: Trainable) {
        self.supports.set_requires_grad(t.supports);
        self.weights.set_requires_grad(t.weights);
        self.log_scales.set_requires_grad(t.scales);
    }

    pub fn trainable(&self) -> Trainable {
        Trainable {
            supports: self.supports.requires_grad(),
            weights: self.weights.requires_grad(),
            scales: self.log_scales.requires_grad(),
        }
    }

    pub fn num_warpings(&self) -> usize {
        self.num_warpings
    }

    pub fn supports_per_warping(&self) -> usize {
        self.supports_per_warping
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_bipolar(&self) -> bool {
        self.bipolar
    }

    pub fn supports(&self) -> &Tensor {
        &self.supports
    }

    /// Free weights (`K × N/2` when bipolar).
    pub fn free_weights(&self) -> &Tensor {
        &self.weights
    }

    /// Free log-scales (`K × N/2` when bipolar).
    pub fn free_log_scales(&self) -> &Tensor {
        &self.log_scales
    }

    /// Parameter tensors in optimizer order: supports, weights, log-scales.
    pub fn parameters_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.supports, &mut self.weights, &mut self.log_scales]
    }

    pub fn parameter_sizes(&self) -> [usize; 3] {
        [
            self.supports.numel(),
            self.weights.numel(),
            self.log_scales.numel(),
        ]
    }

    /// Number of free parameters, trainable or not.
    pub fn parameter_count(&self) -> usize {
        self.parameter_sizes().iter().sum()
    }

    fn mirror(&self, free: &[f64], negate: bool) -> Vec<f64> {
        if !self.bipolar {
            return free.to_vec();
        }
        free.iter()
            .flat_map(|&v| [v, if negate { -v } else { v }])
            .collect()
    }

    /// Full `K × N` weight matrix 𝔸.
    pub fn weight_matrix(&self) -> Vec<f64> {
        self.mirror(self.weights.data(), true)
    }

    /// Full `K × N` log-scale matrix log 𝔾.
    pub fn log_scale_matrix(&self) -> Vec<f64> {
        self.mirror(self.log_scales.data(), false)
    }

    /// Current parameters of warping `k` as a standalone function.
    pub fn warping(&self, k: usize) -> Result<WarpingFunction> {
        if k >= self.num_warpings {
            return Err(Error::IndexOutOfRange {
                what: "warping index",
                index: k,
                len: self.num_warpings,
            });
        }
        let (n, d) = (self.supports_per_warping, self.dim);
        let centers = self.supports.data()[k * n * d..(k + 1) * n * d].to_vec();
        let weights = self.weight_matrix()[k * n..(k + 1) * n].to_vec();
        let log_scales = self.log_scale_matrix()[k * n..(k + 1) * n].to_vec();
        WarpingFunction::new(d, centers, weights, log_scales)
    }

    /// Unit direction `∇f^k(z) / ‖∇f^k(z)‖`.
    pub fn direction(&self, k: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.warping(k)?.direction(z)
    }

    /// Records the parameters on `tape`, including the mirrored matrices.
    pub fn bind(&self, tape: &mut Tape) -> Result<NetworkVars> {
        let supports = tape.param(&self.supports);
        let weights = tape.param(&self.weights);
        let log_scales = tape.param(&self.log_scales);
        let (weight_matrix, log_scale_matrix) = if self.bipolar {
            let n = self.supports_per_warping;
            let half = n / 2;
            let mut neg = vec![0.0; half * n];
            let mut pos = vec![0.0; half * n];
            for j in 0..half {
                neg[j * n + 2 * j] = 1.0;
                neg[j * n + 2 * j + 1] = -1.0;
                pos[j * n + 2 * j] = 1.0;
                pos[j * n + 2 * j + 1] = 1.0;
            }
            let neg = tape.constant(vec![half, n], neg)?;
            let pos = tape.constant(vec![half, n], pos)?;
            (tape.matmul(weights, neg)?, tape.matmul(log_scales, pos)?)
        } else {
            (weights, log_scales)
        };
        Ok(NetworkVars {
            supports,
            weights,
            log_scales,
            weight_matrix,
            log_scale_matrix,
        })
    }

    /// Differentiable `z + eps · ∇f^k(z) / ‖∇f^k(z)‖` as a `[1, d]` node.
    pub fn shift_on_tape(
        &self,
        tape: &mut Tape,
        vars: &NetworkVars,
        k: usize,
        z: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, d) = (self.supports_per_warping, self.dim);
        if k >= self.num_warpings {
            return Err(Error::IndexOutOfRange {
                what: "warping index",
                index: k,
                len: self.num_warpings,
            });
        }
        if z.len() != d {
            return Err(Error::DimensionMismatch {
                context: "shift_on_tape",
                expected: d,
                actual: z.len(),
            });
        }
        let centers = tape.select(vars.supports, k)?;
        let alpha = tape.select(vars.weight_matrix, k)?;
        let log_gamma = tape.select(vars.log_scale_matrix, k)?;
        let gamma = tape.exp(log_gamma);

        let z_rows = tape.constant(vec![n, d], z.repeat(n))?;
        let diff = tape.sub(z_rows, centers)?;
        let sq = tape.square(diff);
        let ones = tape.constant(vec![d, 1], vec![1.0; d])?;
        let dist = tape.matmul(sq, ones)?;
        let dist = tape.reshape(dist, vec![n])?;
        let scaled = tape.mul(gamma, dist)?;
        let neg = tape.scale(scaled, -1.0);
        let rbf = tape.exp(neg);
        let ag = tape.mul(alpha, gamma)?;
        let coef = tape.mul(ag, rbf)?;
        let coef = tape.scale(coef, -2.0);
        let coef = tape.reshape(coef, vec![1, n])?;
        let grad = tape.matmul(coef, diff)?;

        let grad_sq = tape.square(grad);
        let norm_sq = tape.reduce_sum(grad_sq);
        let norm = tape.sqrt(norm_sq);
        let norm_value = tape.item(norm);
        if norm_value.is_nan() || norm_value <= DEGENERATE_THRESHOLD {
            return Err(Error::DegenerateGradient {
                z: z.to_vec(),
                norm: norm_value,
            });
        }
        let eps = tape.scalar(eps);
        let factor = tape.div(eps, norm)?;
        let delta = tape.mul(grad, factor)?;
        let z0 = tape.constant(vec![1, d], z.to_vec())?;
        tape.add(z0, delta)
    }
}
