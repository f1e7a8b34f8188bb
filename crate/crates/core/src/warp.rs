//! Gaussian RBF warping functions and the latent paths they induce.
//!
//! A warping `f(z) = Σ α_i exp(-γ_i ‖z - s_i‖²)` is a scalar field over the
//! latent space. Its normalized gradient is a unit vector field; following it
//! with fixed-length steps traces a (generally curved) path. A pair of
//! centers with opposite weights and a shared scale is a *bipolar pair*; for
//! vanishing scale the pair's gradient direction becomes constant, recovering
//! a global linear direction.

use crate::error::{check_dim, Error, Result};
use crate::parallel;

/// Gradient norms at or below this are treated as degenerate (no direction).
pub const DEGENERATE_THRESHOLD: f64 = 1e-12;

/// One RBF field over ℝ^d.
///
/// Centers are stored row-major (`N × d`). Scales are stored as logarithms so
/// every `γ_i = exp(log_scale_i)` is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpingFunction {
    dim: usize,
    centers: Vec<f64>,
    weights: Vec<f64>,
    log_scales: Vec<f64>,
}

impl WarpingFunction {
    /// Builds a warping from flat row-major centers (`N × dim`).
    pub fn new(
        dim: usize,
        centers: Vec<f64>,
        weights: Vec<f64>,
        log_scales: Vec<f64>,
    ) -> Result<Self> {
        let n = weights.len();
        if dim == 0 || n == 0 {
            return Err(Error::InvalidArgument(
                "a warping needs dim >= 1 and at least one support vector".into(),
            ));
        }
        check_dim("warping log-scales", n, log_scales.len())?;
        check_dim("warping centers", n * dim, centers.len())?;
        if centers
            .iter()
            .chain(&weights)
            .chain(&log_scales)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("warping parameters"));
        }
        Ok(Self {
            dim,
            centers,
            weights,
            log_scales,
        })
    }

    /// A single RBF with center `center`, weight `weight` and scale `gamma`.
    pub fn single(center: &[f64], weight: f64, gamma: f64) -> Result<Self> {
        Self::new(
            center.len(),
            center.to_vec(),
            vec![weight],
            vec![gamma.ln()],
        )
    }

    /// Bipolar construction: each pair `(s⁺, s⁻)` gets weights `(α, -α)` and a
    /// shared scale `γ`.
    pub fn bipolar(
        pairs: &[(Vec<f64>, Vec<f64>)],
        weights: &[f64],
        gammas: &[f64],
    ) -> Result<Self> {
        check_dim("bipolar weights", pairs.len(), weights.len())?;
        check_dim("bipolar scales", pairs.len(), gammas.len())?;
        let dim = pairs.first().map_or(0, |p| p.0.len());
        let mut centers = Vec::with_capacity(pairs.len() * 2 * dim);
        let mut w = Vec::with_capacity(pairs.len() * 2);
        let mut ls = Vec::with_capacity(pairs.len() * 2);
        for ((pos, neg), (&a, &g)) in pairs.iter().zip(weights.iter().zip(gammas)) {
            check_dim("bipolar center", dim, pos.len())?;
            check_dim("bipolar center", dim, neg.len())?;
            centers.extend_from_slice(pos);
            centers.extend_from_slice(neg);
            w.extend([a, -a]);
            ls.extend([g.ln(), g.ln()]);
        }
        Self::new(dim, centers, w, ls)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_supports(&self) -> usize {
        self.weights.len()
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_scales(&self) -> &[f64] {
        &self.log_scales
    }

    pub fn gamma(&self, i: usize) -> f64 {
        self.log_scales[i].exp()
    }

    /// True when entries come in pairs with opposite weights and equal scales.
    pub fn is_bipolar(&self) -> bool {
        self.weights.len().is_multiple_of(2)
            && self.weights.chunks(2).all(|w| w[0] == -w[1])
            && self.log_scales.chunks(2).all(|g| g[0] == g[1])
    }

    fn sq_dist(&self, i: usize, z: &[f64]) -> f64 {
        self.center(i)
            .iter()
            .zip(z)
            .map(|(s, z)| (z - s) * (z - s))
            .sum()
    }

    /// `f(z)`.
    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        check_dim("eval_warp", self.dim, z.len())?;
        Ok((0..self.num_supports())
            .map(|i| self.weights[i] * (-self.gamma(i) * self.sq_dist(i, z)).exp())
            .sum())
    }

    /// Analytic gradient `∇f(z) = -2 Σ α_i γ_i exp(-γ_i ‖z - s_i‖²)(z - s_i)`.
    pub fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("grad_warp", self.dim, z.len())?;
        let mut grad = vec![0.0; self.dim];
        for i in 0..self.num_supports() {
            let gamma = self.gamma(i);
            let coef = -2.0 * self.weights[i] * gamma * (-gamma * self.sq_dist(i, z)).exp();
            for ((g, zj), sj) in grad.iter_mut().zip(z).zip(self.center(i)) {
                *g += coef * (zj - sj);
            }
        }
        Ok(grad)
    }

    /// Unit gradient direction at `z`.
    pub fn direction(&self, z: &[f64]) -> Result<Vec<f64>> {
        let grad = self.gradient(z)?;
        let norm = l2_norm(&grad);
        if norm.is_nan() || norm <= DEGENERATE_THRESHOLD {
            return Err(Error::DegenerateGradient {
                z: z.to_vec(),
                norm,
            });
        }
        Ok(grad.into_iter().map(|g| g / norm).collect())
    }

    /// Latent shift `δz = eps · ∇f(z) / ‖∇f(z)‖`.
    pub fn shift(&self, z: &[f64], eps: f64) -> Result<Vec<f64>> {
        if !(eps.is_finite() && eps != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "shift magnitude must be finite and nonzero, got {eps}"
            )));
        }
        Ok(self.direction(z)?.into_iter().map(|u| eps * u).collect())
    }

    /// Walks `n_steps` fixed-length steps from `z0` along `sign · ∇f`.
    pub fn traverse(&self, z0: &[f64], eps: f64, n_steps: usize, sign: Sign) -> Result<LatentPath> {
        check_dim("traverse", self.dim, z0.len())?;
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step magnitude must be positive, got {eps}"
            )));
        }
        let mut points = Vec::with_capacity(n_steps + 1);
        points.push(z0.to_vec());
        for step in 0..n_steps {
            let current = &points[step];
            let delta = match self.shift(current, sign.factor() * eps) {
                Ok(d) => d,
                Err(Error::DegenerateGradient { norm, .. }) => {
                    return Err(Error::DegenerateTraversal {
                        step,
                        norm,
                        partial: points,
                    })
                }
                Err(e) => return Err(e),
            };
            let next = current.iter().zip(&delta).map(|(p, d)| p + d).collect();
            points.push(next);
        }
        Ok(LatentPath {
            points,
            step_magnitude: eps,
            sign,
        })
    }

    /// `f` at many points; results in input order.
    pub fn eval_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<f64>> {
        parallel::map_indexed(zs.len(), |i| self.eval(&zs[i]))
            .into_iter()
            .collect()
    }

    /// `∇f` at many points; results in input order.
    pub fn gradient_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        parallel::map_indexed(zs.len(), |i| self.gradient(&zs[i]))
            .into_iter()
            .collect()
    }
}

/// Walk orientation along a gradient field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

/// An ordered sequence of latent codes separated by steps of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    points: Vec<Vec<f64>>,
    step_magnitude: f64,
    sign: Sign,
}

impl LatentPath {
    /// Joins a negative and a positive walk sharing the same start point into
    /// one path ordered from the far negative end to the far positive end.
    pub fn two_sided(negative: &LatentPath, positive: &LatentPath) -> Result<LatentPath> {
        if negative.points[0] != positive.points[0] {
            return Err(Error::InvalidArgument(
                "two-sided walk halves must share their start point".into(),
            ));
        }
        let mut points: Vec<Vec<f64>> = negative.points.iter().rev().cloned().collect();
        points.extend(positive.points.iter().skip(1).cloned());
        Ok(LatentPath {
            points,
            step_magnitude: positive.step_magnitude,
            sign: Sign::Positive,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec<f64>> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn step_magnitude(&self) -> f64 {
        self.step_magnitude
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    /// Arc length divided by endpoint distance; 1 for straight paths.
    pub fn nonlinearity_coefficient(&self) -> Result<f64> {
        nonlinearity_coefficient(&self.points)
    }
}

/// Arc length of `points` divided by the distance between its endpoints.
pub fn nonlinearity_coefficient(points: &[Vec<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::UndefinedRatio("path needs at least two points"));
    }
    let arc: f64 = points.windows(2).map(|w| distance(&w[0], &w[1])).sum();
    let chord = distance(&points[0], &points[points.len() - 1]);
    if chord == 0.0 {
        return Err(Error::UndefinedRatio("path endpoints coincide"));
    }
    Ok(arc / chord)
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2_norm(&diff)
}
