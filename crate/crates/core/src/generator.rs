//! Frozen, differentiable toy generator.
//!
//! A latent code is projected onto five factors by a fixed matrix `M` with
//! orthonormal rows, each factor is squashed into a bounded range with
//! `tanh`, and the resulting parameters render an oriented anisotropic
//! Gaussian blob. Because the factors are known exactly they double as
//! ground-truth attributes for evaluation.

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{check_dim, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::FRAC_PI_2;

pub const NUM_ATTRIBUTES: usize = 5;

/// Attribute names in factor order; also used as CSV column suffixes.
pub const ATTRIBUTE_NAMES: [&str; NUM_ATTRIBUTES] = ["cx", "cy", "sigma", "theta", "intensity"];

// Each render parameter is `mid + half · tanh(raw)`.
const MID: [f64; NUM_ATTRIBUTES] = [0.5, 0.5, 0.125, 0.0, 0.65];
const HALF: [f64; NUM_ATTRIBUTES] = [0.3, 0.3, 0.075, FRAC_PI_2, 0.35];

/// Ground-truth render parameters of one generated image.
///
/// Positions and scale are fractions of the image width; `theta` is the
/// major-axis orientation in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeVector {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub theta: f64,
    pub intensity: f64,
}

impl AttributeVector {
    pub fn to_array(self) -> [f64; NUM_ATTRIBUTES] {
        [self.cx, self.cy, self.sigma, self.theta, self.intensity]
    }

    pub fn from_array(a: [f64; NUM_ATTRIBUTES]) -> Self {
        Self {
            cx: a[0],
            cy: a[1],
            sigma: a[2],
            theta: a[3],
            intensity: a[4],
        }
    }

    fn from_raw(raw: &[f64]) -> Self {
        let mut a = [0.0; NUM_ATTRIBUTES];
        for (i, v) in a.iter_mut().enumerate() {
            *v = MID[i] + HALF[i] * raw[i].tanh();
        }
        Self::from_array(a)
    }
}

/// Construction parameters, recorded alongside checkpoints so evaluation can
/// rebuild the identical generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub dim: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Immutable latent-to-image map.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGenerator {
    config: GeneratorConfig,
    /// `NUM_ATTRIBUTES × dim`, row-major.
    factor_map: Vec<f64>,
}

impl SyntheticGenerator {
    /// Factor map from a seeded Gram-Schmidt QR of a Gaussian matrix. For
    /// `dim >= 5` the rows of `M` are orthonormal; for smaller `dim` (which
    /// cannot hold five orthonormal rows) its columns are.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        validate(&config)?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (n_vec, len) = if d >= NUM_ATTRIBUTES {
            (NUM_ATTRIBUTES, d)
        } else {
            (d, NUM_ATTRIBUTES)
        };
        let mut vecs: Vec<Vec<f64>> = (0..n_vec)
            .map(|_| (0..len).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        orthonormalize(&mut vecs);
        let mut map = vec![0.0; NUM_ATTRIBUTES * d];
        for (i, v) in vecs.iter().enumerate() {
            for (j, x) in v.iter().enumerate() {
                if d >= NUM_ATTRIBUTES {
                    map[i * d + j] = *x;
                } else {
                    map[j * d + i] = *x;
                }
            }
        }
        Ok(Self {
            config,
            factor_map: map,
        })
    }

    /// Uses an explicit `5 × dim` factor map (test fixtures).
    pub fn with_factor_map(dim: usize, image_size: usize, factor_map: Vec<f64>) -> Result<Self> {
        let config = GeneratorConfig {
            dim,
            image_size,
            seed: 0,
        };
        validate(&config)?;
        check_dim("factor map", NUM_ATTRIBUTES * dim, factor_map.len())?;
        Ok(Self { config, factor_map })
    }

    /// Factor `i` reads latent coordinate `i` (identity padded with zeros).
    pub fn axis_aligned(dim: usize, image_size: usize) -> Result<Self> {
        let mut map = vec![0.0; NUM_ATTRIBUTES * dim];
        for i in 0..NUM_ATTRIBUTES.min(dim) {
            map[i * dim + i] = 1.0;
        }
        Self::with_factor_map(dim, image_size, map)
    }

    pub fn config(&self) -> GeneratorConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    pub fn factor_map(&self) -> &[f64] {
        &self.factor_map
    }

    /// Unsquashed factors `M z`.
    pub fn raw_factors(&self, z: &[f64]) -> Result<[f64; NUM_ATTRIBUTES]> {
        check_dim("generator latent", self.dim(), z.len())?;
        let d = self.dim();
        let mut raw = [0.0; NUM_ATTRIBUTES];
        for (i, r) in raw.iter_mut().enumerate() {
            *r = self.factor_map[i * d..(i + 1) * d]
                .iter()
                .zip(z)
                .map(|(m, z)| m * z)
                .sum();
        }
        Ok(raw)
    }

    pub fn attributes(&self, z: &[f64]) -> Result<AttributeVector> {
        Ok(AttributeVector::from_raw(&self.raw_factors(z)?))
    }

    /// Renders `𝔊(z)` as a row-major `H × W` image with values in `[0, 1]`.
    pub fn generate(&self, z: &[f64]) -> Result<Vec<f64>> {
        let attrs = self.attributes(z)?;
        Ok(render(&attrs.to_array(), self.image_size(), false).0)
    }

    /// Differentiable rendering of a `[1, dim]` latent node into a
    /// `[1, 1, H, W]` image node.
    pub fn generate_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let d = self.dim();
        if tape.value(z).len() != d {
            return Err(Error::DimensionMismatch {
                context: "generator latent",
                expected: d,
                actual: tape.value(z).len(),
            });
        }
        let z = tape.reshape(z, vec![1, d])?;
        let mut transposed = vec![0.0; d * NUM_ATTRIBUTES];
        for i in 0..NUM_ATTRIBUTES {
            for j in 0..d {
                transposed[j * NUM_ATTRIBUTES + i] = self.factor_map[i * d + j];
            }
        }
        let m_t = tape.constant(vec![d, NUM_ATTRIBUTES], transposed)?;
        let raw = tape.matmul(z, m_t)?;
        let squashed = tape.tanh(raw);
        let half = tape.constant(vec![1, NUM_ATTRIBUTES], HALF.to_vec())?;
        let mid = tape.constant(vec![1, NUM_ATTRIBUTES], MID.to_vec())?;
        let scaled = tape.mul(squashed, half)?;
        let params = tape.add(scaled, mid)?;

        let p: [f64; NUM_ATTRIBUTES] = tape
            .value(params)
            .try_into()
            .expect("five render parameters");
        let size = self.image_size();
        let (image, partials) = render(&p, size, true);
        tape.custom(
            &[params],
            vec![1, 1, size, size],
            image,
            Box::new(RenderBackward { partials }),
        )
    }
}

fn validate(config: &GeneratorConfig) -> Result<()> {
    let mut errs = Vec::new();
    if config.dim == 0 {
        errs.push("generator dim must be >= 1".to_string());
    }
    if config.image_size < 4 {
        errs.push(format!(
            "image_size must be >= 4, got {}",
            config.image_size
        ));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

// Modified Gram-Schmidt, run twice for orthogonality at rounding level.
fn orthonormalize(vecs: &mut [Vec<f64>]) {
    for _ in 0..2 {
        for i in 0..vecs.len() {
            for j in 0..i {
                let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = vecs.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= dot * b;
                }
            }
            let norm = vecs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            vecs[i].iter_mut().for_each(|a| *a /= norm);
        }
    }
}

/// Renders the blob; optionally returns `∂pixel/∂param` laid out as
/// `NUM_ATTRIBUTES` consecutive planes of `size²` values.
fn render(p: &[f64; NUM_ATTRIBUTES], size: usize, with_partials: bool) -> (Vec<f64>, Vec<f64>) {
    let [cx, cy, sigma, theta, intensity] = *p;
    let (sin, cos) = theta.sin_cos();
    let inv_var = 1.0 / (sigma * sigma);
    let n = size * size;
    let mut image = vec![0.0; n];
    let mut partials = if with_partials {
        vec![0.0; NUM_ATTRIBUTES * n]
    } else {
        Vec::new()
    };
    for row in 0..size {
        let dy = (row as f64 + 0.5) / size as f64 - cy;
        for col in 0..size {
            let dx = (col as f64 + 0.5) / size as f64 - cx;
            // Coordinates along the major (σ) and minor (σ/2) axes.
            let a = dx * cos + dy * sin;
            let b = -dx * sin + dy * cos;
            let q = (a * a + 4.0 * b * b) * inv_var;
            let shape = (-0.5 * q).exp();
            let v = intensity * shape;
            let idx = row * size + col;
            image[idx] = v;
            if with_partials {
                let dv_dq = -0.5 * v;
                partials[idx] = dv_dq * (-2.0 * a * cos + 8.0 * b * sin) * inv_var;
                partials[n + idx] = dv_dq * (-2.0 * a * sin - 8.0 * b * cos) * inv_var;
                partials[2 * n + idx] = dv_dq * (-2.0 * q / sigma);
                partials[3 * n + idx] = dv_dq * (-6.0 * a * b * inv_var);
                partials[4 * n + idx] = shape;
            }
        }
    }
    (image, partials)
}

struct RenderBackward {
    partials: Vec<f64>,
}

impl CustomOp for RenderBackward {
    fn name(&self) -> &'static str {
        "render_blob"
    }

    fn backward(
        &self,
        _inputs: &[&[f64]],
        _output: &[f64],
        grad_output: &[f64],
        grad_inputs: &mut [Vec<f64>],
    ) {
        let n = grad_output.len();
        for (k, g) in grad_inputs[0].iter_mut().enumerate() {
            *g = self.partials[k * n..(k + 1) * n]
                .iter()
                .zip(grad_output)
                .map(|(p, go)| p * go)
                .sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_differences, max_relative_error};
    use crate::autodiff::Tensor;

    fn gen(dim: usize, size: usize) -> SyntheticGenerator {
        SyntheticGenerator::new(GeneratorConfig {
            dim,
            image_size: size,
            seed: 9,
        })
        .unwrap()
    }

    fn gaussian(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn factor_rows_are_orthonormal() {
        for d in [5, 8, 16, 64] {
            let g = gen(d, 16);
            let m = g.factor_map();
            for i in 0..NUM_ATTRIBUTES {
                for j in 0..NUM_ATTRIBUTES {
                    let dot: f64 = (0..d).map(|c| m[i * d + c] * m[j * d + c]).sum();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expected).abs() < 1e-10, "d={d} ({i},{j}) {dot}");
                }
            }
        }
    }

    #[test]
    fn small_dim_has_orthonormal_columns() {
        let d = 3;
        let g = gen(d, 16);
        let m = g.factor_map();
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..NUM_ATTRIBUTES)
                    .map(|r| m[r * d + i] * m[r * d + j])
                    .sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn origin_maps_to_midpoints() {
        let a = gen(8, 16).attributes(&[0.0; 8]).unwrap();
        assert_eq!(a.cx, 0.5);
        assert_eq!(a.cy, 0.5);
        assert_eq!(a.sigma, 0.125);
        assert_eq!(a.theta, 0.0);
        assert_eq!(a.intensity, 0.65);
    }

    #[test]
    fn first_row_moves_only_cx() {
        let g = gen(10, 16);
        let z: Vec<f64> = g.factor_map()[..10].iter().map(|m| 8.0 * m).collect();
        let a = g.attributes(&z).unwrap();
        assert!(a.cx > 0.8 - 1e-6 && a.cx < 0.8);
        assert!((a.cy - 0.5).abs() < 1e-12);
        assert!((a.sigma - 0.125).abs() < 1e-12);
        assert!(a.theta.abs() < 1e-12);
        assert!((a.intensity - 0.65).abs() < 1e-12);
    }

    #[test]
    fn invariant_to_null_space_components() {
        let g = gen(12, 16);
        let d = 12;
        let z = gaussian(1, d);
        // Project a random vector onto the orthogonal complement of M's rows.
        let mut w = gaussian(2, d);
        let m = g.factor_map();
        for i in 0..NUM_ATTRIBUTES {
            let dot: f64 = (0..d).map(|c| m[i * d + c] * w[c]).sum();
            (0..d).for_each(|c| w[c] -= dot * m[i * d + c]);
        }
        let moved: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a + 3.0 * b).collect();
        let (a, b) = (
            g.attributes(&z).unwrap().to_array(),
            g.attributes(&moved).unwrap().to_array(),
        );
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn attributes_stay_in_range() {
        let g = gen(6, 16);
        for s in 0..200 {
            let z: Vec<f64> = gaussian(s, 6).into_iter().map(|x| x * 5.0).collect();
            let a = g.attributes(&z).unwrap();
            assert!((0.2..=0.8).contains(&a.cx) && (0.2..=0.8).contains(&a.cy));
            assert!((0.05..=0.2).contains(&a.sigma));
            assert!(a.theta > -FRAC_PI_2 && a.theta < FRAC_PI_2);
            assert!((0.3..=1.0).contains(&a.intensity));
        }
    }

    #[test]
    fn centered_blob_peak() {
        // Odd size puts a pixel centre exactly at (0.5, 0.5).
        let g = gen(6, 15);
        let img = g.generate(&[0.0; 6]).unwrap();
        assert_eq!(img.len(), 225);
        assert!((img[7 * 15 + 7] - 0.65).abs() < 1e-15);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        // Even size: nearest pixel centre is offset by half a pixel on both axes.
        let img = gen(6, 16).generate(&[0.0; 6]).unwrap();
        let off: f64 = 1.0 / 32.0;
        let q = (off / 0.125).powi(2) + 4.0 * (off / 0.125).powi(2);
        assert!((img[7 * 16 + 7] - 0.65 * (-0.5 * q).exp()).abs() < 1e-15);
    }

    #[test]
    fn generate_is_deterministic() {
        let g = gen(7, 16);
        let z = gaussian(4, 7);
        let (a, b) = (g.generate(&z).unwrap(), g.generate(&z).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(gen(7, 16), gen(7, 16));
    }

    #[test]
    fn tape_render_matches_plain_render() {
        let g = gen(7, 16);
        let z = gaussian(5, 7);
        let mut tape = Tape::new();
        let zv = tape.constant(vec![1, 7], z.clone()).unwrap();
        let img = g.generate_on_tape(&mut tape, zv).unwrap();
        assert_eq!(tape.shape(img), &[1, 1, 16, 16]);
        let plain = g.generate(&z).unwrap();
        assert!(tape
            .value(img)
            .iter()
            .zip(&plain)
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn image_jacobian_matches_finite_differences() {
        let g = gen(6, 16);
        for seed in 0..4 {
            let z = gaussian(10 + seed, 6);
            // Random projection of the image turns the Jacobian check into a
            // gradient check.
            let proj = gaussian(100 + seed, 256);
            let objective = |zz: &[f64]| -> f64 {
                g.generate(zz)
                    .unwrap()
                    .iter()
                    .zip(&proj)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let leaf = Tensor::new(vec![1, 6], z.clone()).unwrap().with_grad();
            let mut tape = Tape::new();
            let zv = tape.param(&leaf);
            let img = g.generate_on_tape(&mut tape, zv).unwrap();
            let pv = tape.constant(vec![1, 1, 16, 16], proj.clone()).unwrap();
            let prod = tape.mul(img, pv).unwrap();
            let loss = tape.reduce_sum(prod);
            let grads = tape.backward(loss).unwrap();
            let numeric = central_differences(objective, &z, 1e-5);
            let err = max_relative_error(grads.get(zv).unwrap(), &numeric, 1e-8);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let g = gen(6, 16);
        assert!(matches!(
            g.attributes(&[0.0; 5]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            g.generate(&[0.0; 7]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
