//! Two-headed network that, given an image pair stacked along channels,
//! predicts which warping produced the change and the signed shift.
//!
//! Trunk: three 3×3 stride-2 convolutions (padding 1) with leaky-ReLU, then
//! global average pooling. Heads: a linear classifier over the warpings and a
//! scalar linear regressor.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRUNK_WIDTHS: [usize; 3] = [8, 16, 32];
pub const LEAKY_SLOPE: f64 = 0.1;
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PADDING: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor {
    in_channels: usize,
    num_classes: usize,
    /// Ordered named parameters; the order is the checkpoint and optimizer order.
    params: Vec<(String, Tensor)>,
}

/// Raw outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    /// `[1, K]`.
    pub logits: Var,
    /// `[1, 1]`.
    pub shift: Var,
}

impl Reconstructor {
    /// Kaiming-uniform trunk, `U(±1/√fan_in)` heads, zero biases.
    pub fn new(in_channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 || num_classes < 2 {
            return Err(Error::Config(vec![format!(
                "reconstructor needs >= 1 input channel and >= 2 classes, got {in_channels} and {num_classes}"
            )]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, bound: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let mut params = Vec::new();
        let mut cin = in_channels;
        for (i, &cout) in TRUNK_WIDTHS.iter().enumerate() {
            let fan_in = cin * KERNEL * KERNEL;
            let w = uniform(cout * fan_in, (6.0 / fan_in as f64).sqrt());
            params.push((
                format!("trunk.{i}.weight"),
                Tensor::new(vec![cout, cin, KERNEL, KERNEL], w)?,
            ));
            params.push((format!("trunk.{i}.bias"), Tensor::zeros(vec![cout])));
            cin = cout;
        }
        let bound = 1.0 / (cin as f64).sqrt();
        params.push((
            "cls.weight".into(),
            Tensor::new(vec![cin, num_classes], uniform(cin * num_classes, bound))?,
        ));
        params.push(("cls.bias".into(), Tensor::zeros(vec![1, num_classes])));
        params.push((
            "reg.weight".into(),
            Tensor::new(vec![cin, 1], uniform(cin, bound))?,
        ));
        params.push(("reg.bias".into(), Tensor::zeros(vec![1, 1])));
        for (_, p) in &mut params {
            p.set_requires_grad(true);
        }
        Ok(Self {
            in_channels,
            num_classes,
            params,
        })
    }

    /// Rebuilds from named tensors (e.g. a checkpoint), validating the
    /// architecture.
    pub fn from_named(params: Vec<(String, Tensor)>) -> Result<Self> {
        let err = |msg: String| Error::Checkpoint(format!("reconstructor: {msg}"));
        let expected_names: Vec<String> = (0..TRUNK_WIDTHS.len())
            .flat_map(|i| [format!("trunk.{i}.weight"), format!("trunk.{i}.bias")])
            .chain(["cls.weight", "cls.bias", "reg.weight", "reg.bias"].map(String::from))
            .collect();
        let names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
        if names.len() != expected_names.len()
            || names.iter().zip(&expected_names).any(|(a, b)| *a != b)
        {
            return Err(err(format!("unexpected parameter names {names:?}")));
        }
        let in_channels = params[0].1.shape().get(1).copied().unwrap_or(0);
        let num_classes = params[6].1.shape().get(1).copied().unwrap_or(0);
        let reference = Self::new(in_channels.max(1), num_classes.max(2), 0)?;
        for ((name, got), (_, want)) in params.iter().zip(&reference.params) {
            if got.shape() != want.shape() {
                return Err(err(format!(
                    "{name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        let mut out = Self {
            in_channels,
            num_classes,
            params,
        };
        for (_, p) in &mut out.params {
            p.set_requires_grad(true);
        }
        Ok(out)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn named_parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn named_parameters_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn parameter_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_sizes().iter().sum()
    }

    pub fn set_trainable(&mut self, on: bool) {
        for (_, p) in &mut self.params {
            p.set_requires_grad(on);
        }
    }

    /// Records every parameter on `tape`, in [`named_parameters`](Self::named_parameters) order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.param(t)).collect()
    }

    /// Forward pass over a `[1, in_channels, H, W]` node.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Heads> {
        let shape = tape.shape(input);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "reconstructor",
                detail: format!("expected [B, {}, H, W], got {shape:?}", self.in_channels),
            });
        }
        let mut h = input;
        for layer in 0..TRUNK_WIDTHS.len() {
            let conv = tape.conv2d(
                h,
                vars[2 * layer],
                Some(vars[2 * layer + 1]),
                STRIDE,
                PADDING,
            )?;
            h = tape.leaky_relu(conv, LEAKY_SLOPE);
        }
        let features = tape.global_avg_pool(h)?;
        let logits = tape.matmul(features, vars[6])?;
        let logits = tape.add(logits, vars[7])?;
        let shift = tape.matmul(features, vars[8])?;
        let shift = tape.add(shift, vars[9])?;
        Ok(Heads { logits, shift })
    }

    /// Tape-free convenience: logits and predicted shift for a stacked pair
    /// given as `in_channels` planes of `size × size`.
    pub fn predict(&self, stacked: &[f64], size: usize) -> Result<(Vec<f64>, f64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| tape.constant(t.shape().to_vec(), t.data().to_vec()))
            .collect::<Result<_>>()?;
        let input = tape.constant(vec![1, self.in_channels, size, size], stacked.to_vec())?;
        let heads = self.forward(&mut tape, &vars, input)?;
        Ok((tape.value(heads.logits).to_vec(), tape.item(heads.shift)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_differences, max_relative_error};

    fn input(size: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2 * size * size)
            .map(|_| rng.random_range(0.0..1.0))
            .collect()
    }

    #[test]
    fn head_shapes() {
        let r = Reconstructor::new(2, 5, 1).unwrap();
        let (logits, _) = r.predict(&input(16, 0), 16).unwrap();
        assert_eq!(logits.len(), 5);
        assert_eq!(r.named_parameters().len(), 10);
        assert_eq!(r.named_parameters()[0].1.shape(), &[8, 2, 3, 3]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let r = Reconstructor::new(2, 3, 1).unwrap();
        let mut tape = Tape::new();
        let vars = r.bind(&mut tape);
        let x = tape.constant(vec![1, 3, 8, 8], vec![0.0; 192]).unwrap();
        assert!(matches!(
            r.forward(&mut tape, &vars, x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn from_named_round_trip_and_validation() {
        let r = Reconstructor::new(2, 4, 3).unwrap();
        let back = Reconstructor::from_named(r.named_parameters().to_vec()).unwrap();
        assert_eq!(back, r);
        let mut broken = r.named_parameters().to_vec();
        broken.swap(0, 1);
        assert!(Reconstructor::from_named(broken).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let r = Reconstructor::new(2, 3, 7).unwrap();
        let x = input(8, 1);
        let loss_of = |rec: &Reconstructor, tape: &mut Tape, vars: &[Var]| -> Var {
            let inp = tape.constant(vec![1, 2, 8, 8], x.clone()).unwrap();
            let h = rec.forward(tape, vars, inp).unwrap();
            let ce = tape.cross_entropy(h.logits, 1).unwrap();
            let mae = tape.mean_absolute_error(h.shift, 0.8).unwrap();
            let mae = tape.scale(mae, 0.25);
            tape.add(ce, mae).unwrap()
        };
        let mut tape = Tape::new();
        let vars = r.bind(&mut tape);
        let loss = loss_of(&r, &mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        for (pi, (name, t)) in r.named_parameters().iter().enumerate() {
            let numeric = central_differences(
                |p| {
                    let mut rr = r.clone();
                    rr.parameters_mut()[pi].data_mut().copy_from_slice(p);
                    let mut tape = Tape::new();
                    let vars = rr.bind(&mut tape);
                    let l = loss_of(&rr, &mut tape, &vars);
                    tape.item(l)
                },
                t.data(),
                1e-5,
            );
            let err = max_relative_error(grads.get(vars[pi]).unwrap(), &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
