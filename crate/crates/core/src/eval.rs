//! Quantitative evaluation: reconstructor accuracy, attribute correlations
//! along two-sided walks, nonlinearity statistics, and fixed-direction
//! baselines.
//!
//! Every operation is read-only on the models. Work is spread over latent
//! codes with [`parallel::map_indexed`] and reduced in index order, so reports
//! are bit-identical for a given rng seed regardless of thread count.

use crate::error::{Error, Result};
use crate::generator::{SyntheticGenerator, ATTRIBUTE_NAMES, NUM_ATTRIBUTES};
use crate::network::WarpingNetwork;
use crate::parallel;
use crate::reconstructor::Reconstructor;
use crate::trainer::{sample, sample_latent, TrainConfig, TrainSample, MAX_RESAMPLES};
use crate::warp::{LatentPath, Sign};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// An attribute series whose standard deviation is at or below this is
/// treated as constant (its correlation is 0). Attributes live in `O(1)`
/// ranges; the tiny-scale linear regime leaves drifts around `1e-8`.
pub const CONSTANT_TOLERANCE: f64 = 1e-6;

/// Attributes along a two-sided walk: row `t + steps` is step `t ∈ -T..=T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeTrace {
    pub path_index: usize,
    pub steps: usize,
    pub rows: Vec<[f64; NUM_ATTRIBUTES]>,
}

impl AttributeTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Attributes of the starting code.
    pub fn origin(&self) -> &[f64; NUM_ATTRIBUTES] {
        &self.rows[self.steps]
    }

    pub fn column(&self, attribute: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[attribute]).collect()
    }

    /// Signed step indices `-T..=T`.
    pub fn step_indices(&self) -> Vec<f64> {
        let t = self.steps as f64;
        (0..self.rows.len()).map(|i| i as f64 - t).collect()
    }
}

/// Percentage of fresh samples whose classification head picks the right
/// warping. Samples are drawn like training samples (same `ε` range).
pub fn reconstructor_accuracy(
    net: &WarpingNetwork,
    reconstructor: &Reconstructor,
    gen: &SyntheticGenerator,
    sampling: &TrainConfig,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument(
            "accuracy needs at least one sample".into(),
        ));
    }
    let mut samples: Vec<TrainSample> = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut s = sample(rng, sampling);
        let warp = net.warping(s.k)?;
        for _ in 0..MAX_RESAMPLES {
            if warp.shift(&s.z, s.eps_signed).is_ok() {
                break;
            }
            s.z = sample_latent(rng, sampling.latent_dim);
        }
        samples.push(s);
    }
    let size = gen.image_size();
    let hits = parallel::map_indexed(samples.len(), |i| -> Result<bool> {
        let s = &samples[i];
        let shift = match net.warping(s.k)?.shift(&s.z, s.eps_signed) {
            Ok(d) => d,
            Err(Error::DegenerateGradient { .. }) => return Ok(false),
            Err(e) => return Err(e),
        };
        let shifted: Vec<f64> = s.z.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let mut stacked = gen.generate(&s.z)?;
        stacked.extend(gen.generate(&shifted)?);
        let (logits, _) = reconstructor.predict(&stacked, size)?;
        Ok(argmax(&logits) == s.k)
    });
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(100.0 * correct as f64 / n_samples as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Frozen linear-regime network along `K` random unit directions.
pub fn random_baseline(k: usize, d: usize, seed: u64) -> Result<WarpingNetwork> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..k)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect();
    WarpingNetwork::fixed_linear(&dirs)
}

/// Frozen linear-regime network along the first `K` standard basis vectors.
pub fn coord_baseline(k: usize, d: usize) -> Result<WarpingNetwork> {
    if k > d {
        return Err(Error::Config(vec![format!(
            "coord baseline needs num_warpings <= latent_dim, got {k} > {d}"
        )]));
    }
    let dirs: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            e
        })
        .collect();
    WarpingNetwork::fixed_linear(&dirs)
}

/// Two-sided walk of `T` steps each way from `z0` along warping `k`, with
/// the attributes at every point.
pub fn walk_and_trace(
    net: &WarpingNetwork,
    gen: &SyntheticGenerator,
    k: usize,
    z0: &[f64],
    eps: f64,
    steps: usize,
) -> Result<(LatentPath, AttributeTrace)> {
    let warp = net.warping(k)?;
    let neg = warp.traverse(z0, eps, steps, Sign::Negative)?;
    let pos = warp.traverse(z0, eps, steps, Sign::Positive)?;
    let path = LatentPath::two_sided(&neg, &pos)?;
    let rows = path
        .points()
        .iter()
        .map(|z| gen.attributes(z).map(|a| a.to_array()))
        .collect::<Result<_>>()?;
    Ok((
        path,
        AttributeTrace {
            path_index: k,
            steps,
            rows,
        },
    ))
}

/// Pearson correlation; 0 when either series has standard deviation at or
/// below `tolerance`.
pub fn pearson(x: &[f64], y: &[f64], tolerance: f64) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = y[..n].iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx / nf).sqrt() <= tolerance || (syy / nf).sqrt() <= tolerance {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Warping-by-attribute correlation summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    /// `K × A` mean Pearson correlations between step index and attribute.
    pub raw: Vec<[f64; NUM_ATTRIBUTES]>,
    /// `|raw|` with every nonzero row scaled to unit L1 norm.
    pub l1_normalized: Vec<[f64; NUM_ATTRIBUTES]>,
    /// `K × A` mean attribute range (max − min) along the walks.
    pub ranges: Vec<[f64; NUM_ATTRIBUTES]>,
    /// For each attribute, the warping with the largest `|raw|`.
    pub assignment: [usize; NUM_ATTRIBUTES],
    /// Walks skipped because they hit a vanishing gradient.
    pub skipped: usize,
}

impl CorrelationReport {
    /// Range of each attribute along its assigned warping.
    pub fn selected_ranges(&self) -> [f64; NUM_ATTRIBUTES] {
        std::array::from_fn(|a| self.ranges[self.assignment[a]][a])
    }

    /// Mean normalized correlation of assigned cells minus the mean of all
    /// other cells. A matrix that assigns every attribute to one warping
    /// with a flat row scores about 0; an identity-like matrix scores 1.
    pub fn diagonal_dominance(&self) -> f64 {
        let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
        for (k, row) in self.l1_normalized.iter().enumerate() {
            for (a, &v) in row.iter().enumerate() {
                if self.assignment[a] == k {
                    on += v;
                    n_on += 1;
                } else {
                    off += v;
                    n_off += 1;
                }
            }
        }
        let off_mean = if n_off == 0 { 0.0 } else { off / n_off as f64 };
        on / n_on as f64 - off_mean
    }

    pub fn matrix_csv(rows: &[[f64; NUM_ATTRIBUTES]]) -> String {
        let mut s = String::from("warping");
        for name in ATTRIBUTE_NAMES {
            s.push_str(",attr_");
            s.push_str(name);
        }
        s.push('\n');
        for (k, row) in rows.iter().enumerate() {
            s.push_str(&k.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn raw_csv(&self) -> String {
        Self::matrix_csv(&self.raw)
    }

    pub fn l1_csv(&self) -> String {
        Self::matrix_csv(&self.l1_normalized)
    }

    pub fn ranges_csv(&self) -> String {
        Self::matrix_csv(&self.ranges)
    }

    pub fn assignment_csv(&self) -> String {
        let mut s = String::from("attribute,warping,correlation,l1_normalized,range\n");
        for (a, name) in ATTRIBUTE_NAMES.iter().enumerate() {
            let k = self.assignment[a];
            s.push_str(&format!(
                "{name},{k},{},{},{}\n",
                self.raw[k][a], self.l1_normalized[k][a], self.ranges[k][a]
            ));
        }
        s
    }
}

fn draw_codes(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| sample_latent(rng, d)).collect()
}

/// Per-warping, per-code walks over a shared set of starting codes.
fn walk_all<T: Send>(
    net: &WarpingNetwork,
    gen: &SyntheticGenerator,
    codes: &[Vec<f64>],
    eps: f64,
    steps: usize,
    reduce: impl Fn(LatentPath, AttributeTrace) -> T + Sync + Send,
) -> Result<Vec<Option<T>>> {
    let n = codes.len();
    parallel::map_indexed(net.num_warpings() * n, |i| {
        match walk_and_trace(net, gen, i / n, &codes[i % n], eps, steps) {
            Ok((path, trace)) => Ok(Some(reduce(path, trace))),
            Err(Error::DegenerateTraversal { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    })
    .into_iter()
    .collect()
}

fn check_walk_args(n_codes: usize, eps: f64) -> Result<()> {
    if n_codes == 0 {
        return Err(Error::InvalidArgument(
            "need at least one latent code".into(),
        ));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "walk step must be positive, got {eps}"
        )));
    }
    Ok(())
}

/// Correlations between step index and attributes, averaged over `n_codes`
/// starting codes shared by all warpings.
pub fn correlation_report(
    net: &WarpingNetwork,
    gen: &SyntheticGenerator,
    n_codes: usize,
    steps: usize,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<CorrelationReport> {
    check_walk_args(n_codes, eps)?;
    let codes = draw_codes(rng, n_codes, gen.dim());
    let per_walk = walk_all(net, gen, &codes, eps, steps, |_, trace| {
        let idx = trace.step_indices();
        let mut corr = [0.0; NUM_ATTRIBUTES];
        let mut range = [0.0; NUM_ATTRIBUTES];
        for a in 0..NUM_ATTRIBUTES {
            let col = trace.column(a);
            corr[a] = pearson(&idx, &col, CONSTANT_TOLERANCE);
            let (lo, hi) = col
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                    (l.min(v), h.max(v))
                });
            range[a] = hi - lo;
        }
        (corr, range)
    })?;

    let k_total = net.num_warpings();
    let mut raw = vec![[0.0; NUM_ATTRIBUTES]; k_total];
    let mut ranges = vec![[0.0; NUM_ATTRIBUTES]; k_total];
    let mut skipped = 0;
    for k in 0..k_total {
        let mut used = 0usize;
        for walk in &per_walk[k * n_codes..(k + 1) * n_codes] {
            match walk {
                Some((c, r)) => {
                    for a in 0..NUM_ATTRIBUTES {
                        raw[k][a] += c[a];
                        ranges[k][a] += r[a];
                    }
                    used += 1;
                }
                None => skipped += 1,
            }
        }
        if used > 0 {
            for a in 0..NUM_ATTRIBUTES {
                raw[k][a] /= used as f64;
                ranges[k][a] /= used as f64;
            }
        }
    }
    let l1_normalized = raw
        .iter()
        .map(|row| {
            let norm: f64 = row.iter().map(|v| v.abs()).sum();
            if norm > 0.0 {
                row.map(|v| v.abs() / norm)
            } else {
                [0.0; NUM_ATTRIBUTES]
            }
        })
        .collect();
    let assignment = std::array::from_fn(|a| {
        let mut best = 0;
        for k in 1..k_total {
            if raw[k][a].abs() > raw[best][a].abs() {
                best = k;
            }
        }
        best
    });
    Ok(CorrelationReport {
        raw,
        l1_normalized,
        ranges,
        assignment,
        skipped,
    })
}

/// Mean nonlinearity coefficient per warping, sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiReport {
    /// `(warping, mean φ)` pairs, largest first.
    pub sorted: Vec<(usize, f64)>,
    /// Walks skipped because of a vanishing gradient or a zero chord.
    pub skipped: usize,
}

impl PhiReport {
    pub fn values(&self) -> Vec<f64> {
        self.sorted.iter().map(|&(_, v)| v).collect()
    }

    pub fn max(&self) -> f64 {
        self.sorted.first().map_or(f64::NAN, |&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,warping,phi\n");
        for (rank, (k, v)) in self.sorted.iter().enumerate() {
            s.push_str(&format!("{rank},{k},{v}\n"));
        }
        s
    }
}

pub fn phi_report(
    net: &WarpingNetwork,
    gen: &SyntheticGenerator,
    n_codes: usize,
    steps: usize,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<PhiReport> {
    check_walk_args(n_codes, eps)?;
    let codes = draw_codes(rng, n_codes, gen.dim());
    let per_walk = walk_all(net, gen, &codes, eps, steps, |path, _| {
        path.nonlinearity_coefficient().ok()
    })?;
    let mut sorted = Vec::new();
    let mut skipped = 0;
    for k in 0..net.num_warpings() {
        let (mut sum, mut used) = (0.0, 0usize);
        for walk in &per_walk[k * n_codes..(k + 1) * n_codes] {
            match walk {
                Some(Some(phi)) => {
                    sum += phi;
                    used += 1;
                }
                _ => skipped += 1,
            }
        }
        if used > 0 {
            sorted.push((k, sum / used as f64));
        }
    }
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(PhiReport { sorted, skipped })
}

/// Evaluation protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalConfig {
    pub n_codes: usize,
    pub steps: usize,
    pub eps: f64,
    pub accuracy_samples: usize,
}

impl EvalConfig {
    /// Defaults tied to a training configuration: 100 codes, 10 steps each
    /// way, step size half the largest training shift.
    pub fn for_training(config: &TrainConfig) -> Self {
        Self {
            n_codes: 100,
            steps: 10,
            eps: config.eps_max / 2.0,
            accuracy_samples: 2000,
        }
    }
}

/// All reports for one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correlation: CorrelationReport,
    pub diagonal_dominance: f64,
    pub phi: PhiReport,
}

/// Accuracy, correlations and φ, each from its own stream of `rng`.
pub fn evaluate(
    net: &WarpingNetwork,
    reconstructor: &Reconstructor,
    gen: &SyntheticGenerator,
    sampling: &TrainConfig,
    eval: &EvalConfig,
    rng: &mut impl Rng,
) -> Result<EvalReport> {
    let accuracy = reconstructor_accuracy(
        net,
        reconstructor,
        gen,
        sampling,
        eval.accuracy_samples,
        rng,
    )?;
    let correlation = correlation_report(net, gen, eval.n_codes, eval.steps, eval.eps, rng)?;
    let phi = phi_report(net, gen, eval.n_codes, eval.steps, eval.eps, rng)?;
    Ok(EvalReport {
        accuracy,
        diagonal_dominance: correlation.diagonal_dominance(),
        correlation,
        phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{InitConfig, WarpingNetwork};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn pearson_examples() {
        let x = [0.0, 1.0, 2.0, 3.0];
        assert!((pearson(&x, &[1.0, 3.0, 5.0, 7.0], 0.0) - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[7.0, 5.0, 3.0, 1.0], 0.0) + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&x, &[2.0; 4], CONSTANT_TOLERANCE), 0.0);
        assert_eq!(
            pearson(&x, &[2.0, 2.0, 2.0, 2.0 + 1e-9], CONSTANT_TOLERANCE),
            0.0
        );
    }

    #[test]
    fn baselines() {
        let c = coord_baseline(3, 5).unwrap();
        let d0 = c.direction(0, &[0.3, -0.2, 0.1, 0.0, 1.0]).unwrap();
        let d1 = c.direction(1, &[0.3, -0.2, 0.1, 0.0, 1.0]).unwrap();
        let dot: f64 = d0.iter().zip(&d1).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-6);
        assert!(matches!(coord_baseline(6, 5), Err(Error::Config(_))));

        let r = random_baseline(4, 7, 9).unwrap();
        for k in 0..4 {
            let s = &r.supports().data()[k * 14..k * 14 + 7];
            let n: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(r.trainable(), crate::network::Trainable::NONE);
    }

    #[test]
    fn trace_shape_and_origin() {
        let gen = SyntheticGenerator::axis_aligned(6, 8).unwrap();
        let net = coord_baseline(3, 6).unwrap();
        let z0 = [0.2, -0.1, 0.4, 0.0, 0.3, 1.0];
        let (path, trace) = walk_and_trace(&net, &gen, 1, &z0, 0.1, 0).unwrap();
        assert_eq!(path.len(), 1);
        assert_eq!(trace.rows, vec![gen.attributes(&z0).unwrap().to_array()]);
        let (path, trace) = walk_and_trace(&net, &gen, 1, &z0, 0.1, 4).unwrap();
        assert_eq!((path.len(), trace.len()), (9, 9));
        assert_eq!(trace.origin(), &gen.attributes(&z0).unwrap().to_array());
        let col = trace.column(1);
        assert!(col.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn coord_fixture_is_diagonal() {
        let gen = SyntheticGenerator::axis_aligned(8, 8).unwrap();
        let net = coord_baseline(5, 8).unwrap();
        let rep = correlation_report(&net, &gen, 40, 5, 0.05, &mut rng(1)).unwrap();
        for k in 0..5 {
            for a in 0..5 {
                if k == a {
                    assert!(rep.raw[k][a] > 0.99, "{:?}", rep.raw);
                } else {
                    assert!(rep.raw[k][a].abs() < 0.05, "{:?}", rep.raw);
                }
            }
            let s: f64 = rep.l1_normalized[k].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(rep.assignment, [0, 1, 2, 3, 4]);
        assert!(rep.diagonal_dominance() > 0.8);
        assert_eq!(rep.skipped, 0);
    }

    #[test]
    fn constant_attribute_column_is_zero() {
        // Attribute 4 reads latent coordinate 4, which no warping moves.
        let gen = SyntheticGenerator::axis_aligned(6, 8).unwrap();
        let net = coord_baseline(3, 6).unwrap();
        let rep = correlation_report(&net, &gen, 10, 3, 0.1, &mut rng(2)).unwrap();
        assert!(rep.raw.iter().all(|r| r[4] == 0.0 && r[3] == 0.0));
        assert!(rep.ranges.iter().all(|r| r[4] < 1e-6));
    }

    #[test]
    fn phi_linear_is_one_and_general_at_least_one() {
        let gen = SyntheticGenerator::new(crate::generator::GeneratorConfig {
            dim: 6,
            image_size: 8,
            seed: 3,
        })
        .unwrap();
        let lin = random_baseline(3, 6, 1).unwrap();
        let rep = phi_report(&lin, &gen, 20, 10, 1.0, &mut rng(0)).unwrap();
        assert!(
            rep.values().iter().all(|v| (v - 1.0).abs() < 1e-6),
            "{rep:?}"
        );

        let init = InitConfig {
            gamma0: 0.3,
            ..InitConfig::default()
        };
        let net = WarpingNetwork::init(3, 4, 6, 5, &init).unwrap();
        let rep = phi_report(&net, &gen, 20, 10, 1.0, &mut rng(0)).unwrap();
        assert!(rep.values().iter().all(|&v| v >= 1.0));
        assert!(rep.values().windows(2).all(|w| w[0] >= w[1]));
        assert!(rep.max() > 1.0 + 1e-6);
    }

    #[test]
    fn untrained_accuracy_near_chance_and_deterministic() {
        let cfg = TrainConfig {
            latent_dim: 6,
            image_size: 8,
            ..TrainConfig::default()
        };
        let gen = SyntheticGenerator::new(cfg.generator_config()).unwrap();
        let net = cfg.build_network().unwrap();
        let rec = cfg.build_reconstructor().unwrap();
        let a = reconstructor_accuracy(&net, &rec, &gen, &cfg, 300, &mut rng(7)).unwrap();
        let b = reconstructor_accuracy(&net, &rec, &gen, &cfg, 300, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn csv_headers() {
        let gen = SyntheticGenerator::axis_aligned(6, 8).unwrap();
        let net = coord_baseline(3, 6).unwrap();
        let rep = correlation_report(&net, &gen, 4, 2, 0.1, &mut rng(2)).unwrap();
        assert!(rep
            .raw_csv()
            .starts_with("warping,attr_cx,attr_cy,attr_sigma,attr_theta,attr_intensity\n0,"));
        assert_eq!(rep.assignment_csv().lines().count(), 6);
    }
}
