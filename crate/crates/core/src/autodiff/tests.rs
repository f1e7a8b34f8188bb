use super::gradcheck::{central_differences, max_relative_error};
use super::*;
use crate::error::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Builds `loss = build(tape, x)` for a single trainable leaf of `shape` and
/// compares its tape gradient with central differences.
fn check<F>(shape: Vec<usize>, x: Vec<f64>, build: F) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let leaf = Tensor::new(shape.clone(), x.clone()).unwrap().with_grad();
    let mut tape = Tape::new();
    let v = tape.param(&leaf);
    let loss = build(&mut tape, v);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(v).unwrap().to_vec();
    let numeric = central_differences(
        |p| {
            let t = Tensor::new(shape.clone(), p.to_vec()).unwrap();
            let mut tape = Tape::new();
            let v = tape.param(&t);
            let out = build(&mut tape, v);
            tape.item(out)
        },
        &x,
        1e-5,
    );
    max_relative_error(&analytic, &numeric, 1e-8)
}

#[test]
fn square_of_three() {
    let x = Tensor::scalar(3.0).with_grad();
    let mut tape = Tape::new();
    let v = tape.param(&x);
    let y = tape.mul(v, v).unwrap();
    assert_eq!(tape.item(y), 9.0);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(v).unwrap(), &[6.0]);
}

#[test]
fn conv_all_ones() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1, 4, 4], vec![1.0; 16]).unwrap();
    let k = tape.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let y = tape.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y), &[9.0; 4]);
}

#[test]
fn conv_stride_two_with_padding_shape() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 2, 16, 16], vec![0.5; 512]).unwrap();
    let k = tape.constant(vec![8, 2, 3, 3], vec![0.1; 144]).unwrap();
    let y = tape.conv2d(x, k, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 8, 8, 8]);
    // Interior output sees the full 2×3×3 window.
    assert!((tape.value(y)[8 + 1] - 0.9).abs() < 1e-12);
    // Corner output at (0,0) sees only a 2×2 patch per channel.
    assert!((tape.value(y)[0] - 0.4).abs() < 1e-12);
}

#[test]
fn concat_shape_rule() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![1, 3, 5, 4], vec![1.0; 60]).unwrap();
    let b = tape.constant(vec![1, 3, 5, 4], vec![2.0; 60]).unwrap();
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.shape(c), &[1, 6, 5, 4]);
    assert_eq!(tape.value(c)[59], 1.0);
    assert_eq!(tape.value(c)[60], 2.0);
    let bad = tape.constant(vec![1, 3, 4, 4], vec![0.0; 48]).unwrap();
    assert!(matches!(
        tape.concat_channels(a, bad),
        Err(Error::ShapeMismatch {
            op: "concat_channels",
            ..
        })
    ));
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let c = tape.constant(vec![4], vec![0.0; 4]).unwrap();
    assert!(matches!(
        tape.matmul(a, b),
        Err(Error::ShapeMismatch { op: "matmul", .. })
    ));
    assert!(matches!(
        tape.add(a, c),
        Err(Error::ShapeMismatch { op: "add", .. })
    ));
    assert!(matches!(
        tape.conv2d(a, b, None, 1, 0),
        Err(Error::ShapeMismatch { op: "conv2d", .. })
    ));
    assert!(matches!(
        tape.backward(a),
        Err(Error::ShapeMismatch { op: "backward", .. })
    ));
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = tape.constant(vec![4], vec![0.3; 4]).unwrap();
    let l = tape.cross_entropy(uniform, 2).unwrap();
    assert!((tape.item(l) - 4.0_f64.ln()).abs() < 1e-15);
    assert!((tape.item(l) - 1.3862944).abs() < 1e-7);

    let sat = tape.constant(vec![4], vec![0.0, 50.0, 0.0, 0.0]).unwrap();
    let l = tape.cross_entropy(sat, 1).unwrap();
    assert!(tape.item(l) < 1e-20);

    let bad = tape.constant(vec![2], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(
        tape.cross_entropy(bad, 0),
        Err(Error::NonFinite(_))
    ));
    assert!(matches!(
        tape.cross_entropy(uniform, 4),
        Err(Error::IndexOutOfRange { .. })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = random(&mut rng, 5);
    let err = check(vec![5], logits.clone(), |t, v| {
        t.cross_entropy(v, 3).unwrap()
    });
    assert!(err < 1e-6, "{err}");

    let x = Tensor::new(vec![5], logits.clone()).unwrap().with_grad();
    let mut tape = Tape::new();
    let v = tape.param(&x);
    let l = tape.cross_entropy(v, 3).unwrap();
    let g = tape.backward(l).unwrap();
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    for (j, gj) in g.get(v).unwrap().iter().enumerate() {
        let p = (logits[j] - max).exp() / sum;
        let expected = p - if j == 3 { 1.0 } else { 0.0 };
        assert!((gj - expected).abs() < 1e-15);
    }
}

#[test]
fn mean_absolute_error_examples() {
    let mut tape = Tape::new();
    let p = tape.constant(vec![1], vec![1.0]).unwrap();
    let l = tape.mean_absolute_error(p, 1.0).unwrap();
    assert_eq!(tape.item(l), 0.0);

    let x = Tensor::scalar(1.5).with_grad();
    let mut tape = Tape::new();
    let v = tape.param(&x);
    let l = tape.mean_absolute_error(v, 1.0).unwrap();
    assert_eq!(tape.item(l), 0.5);
    assert_eq!(tape.backward(l).unwrap().get(v).unwrap(), &[1.0]);

    let x = Tensor::scalar(1.0).with_grad();
    let mut tape = Tape::new();
    let v = tape.param(&x);
    let l = tape.mean_absolute_error(v, 1.0).unwrap();
    assert_eq!(tape.backward(l).unwrap().get(v).unwrap(), &[0.0]);
}

#[test]
fn unreachable_parameter_untouched_and_accumulation_doubles() {
    let mut used = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap().with_grad();
    let mut unused = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let a = tape.param(&used);
    let b = tape.param(&unused);
    let _ = tape.square(b);
    let sq = tape.square(a);
    let loss = tape.reduce_sum(sq);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(b).is_none());

    grads.accumulate_into(a, &mut used).unwrap();
    grads.accumulate_into(b, &mut unused).unwrap();
    assert!(unused.grad().is_none());
    let once = used.grad().unwrap().to_vec();
    let again = tape.backward(loss).unwrap();
    again.accumulate_into(a, &mut used).unwrap();
    let twice = used.grad().unwrap();
    assert_eq!(once, vec![1.0, -3.0]);
    assert!(twice.iter().zip(&once).all(|(t, o)| *t == 2.0 * o));
}

#[test]
fn frozen_leaf_gets_no_gradient() {
    let frozen = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&frozen);
    let s = tape.reduce_sum(v);
    let g = tape.backward(s).unwrap();
    assert!(g.get(v).is_none());
}

#[test]
fn elementwise_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = random(&mut rng, 6).into_iter().map(|v| v + 2.0).collect();
    let err = check(vec![2, 3], x, |t, v| {
        let c = t
            .constant(vec![2, 3], vec![0.3, -0.2, 0.9, 1.1, -0.7, 0.4])
            .unwrap();
        let s = t.scalar(1.7);
        let a = t.add(v, c).unwrap();
        let b = t.mul(a, s).unwrap();
        let e = t.exp(b);
        let q = t.sqrt(v);
        let r = t.div(e, q).unwrap();
        let th = t.tanh(r);
        let sub = t.sub(th, v).unwrap();
        let lr = t.leaky_relu(sub, 0.1);
        let sq = t.square(lr);
        let sc = t.scale(sq, -0.5);
        t.reduce_sum(sc)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn scalar_broadcast_gradients_sum() {
    let err = check(vec![1], vec![0.7], |t, v| {
        let c = t.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = t.mul(c, v).unwrap();
        let d = t.div(m, v).unwrap();
        let a = t.add(d, v).unwrap();
        let sq = t.square(a);
        t.reduce_sum(sq)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matmul_select_reshape_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 24);
    let w = random(&mut rng, 8);
    let err = check(vec![3, 2, 4], x, |t, v| {
        let row = t.select(v, 1).unwrap();
        let wv = t.constant(vec![4, 2], w.clone()).unwrap();
        let mm = t.matmul(row, wv).unwrap();
        let flat = t.reshape(mm, vec![1, 4]).unwrap();
        let back = t.reshape(v, vec![4, 6]).unwrap();
        let mm2 = t.matmul(flat, back).unwrap();
        let sq = t.square(mm2);
        t.reduce_sum(sq)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_pool_gradcheck_wrt_input_weight_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 2 * 7 * 7);
    let k = random(&mut rng, 3 * 2 * 9);
    let bias = random(&mut rng, 3);
    let run = |t: &mut Tape, xv: Var, kv: Var, bv: Var| {
        let y = t.conv2d(xv, kv, Some(bv), 2, 1).unwrap();
        let a = t.leaky_relu(y, 0.1);
        let p = t.global_avg_pool(a).unwrap();
        let sq = t.square(p);
        t.reduce_sum(sq)
    };
    let (kk, bb) = (k.clone(), bias.clone());
    let ex = check(vec![1, 2, 7, 7], x.clone(), |t, v| {
        let kv = t.constant(vec![3, 2, 3, 3], kk.clone()).unwrap();
        let bv = t.constant(vec![3], bb.clone()).unwrap();
        run(t, v, kv, bv)
    });
    let (xx, bb) = (x.clone(), bias.clone());
    let ek = check(vec![3, 2, 3, 3], k.clone(), |t, v| {
        let xv = t.constant(vec![1, 2, 7, 7], xx.clone()).unwrap();
        let bv = t.constant(vec![3], bb.clone()).unwrap();
        run(t, xv, v, bv)
    });
    let eb = check(vec![3], bias, |t, v| {
        let xv = t.constant(vec![1, 2, 7, 7], x.clone()).unwrap();
        let kv = t.constant(vec![3, 2, 3, 3], k.clone()).unwrap();
        run(t, xv, kv, v)
    });
    assert!(ex < 1e-6 && ek < 1e-6 && eb < 1e-6, "{ex} {ek} {eb}");
}

#[test]
fn concat_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, 2 * 3 * 3);
    let other = random(&mut rng, 2 * 2 * 3 * 3);
    let w = random(&mut rng, 2 * 3 * 3 * 3);
    let err = check(vec![2, 1, 3, 3], x, |t, v| {
        let o = t.constant(vec![2, 2, 3, 3], other.clone()).unwrap();
        let c = t.concat_channels(o, v).unwrap();
        let k = t.constant(vec![2, 3, 3, 3], w.clone()).unwrap();
        let y = t.conv2d(c, k, None, 1, 1).unwrap();
        let sq = t.square(y);
        t.reduce_sum(sq)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn repeated_forward_backward_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::new(vec![1, 1, 6, 6], random(&mut rng, 36))
            .unwrap()
            .with_grad();
        let k = Tensor::new(vec![2, 1, 3, 3], random(&mut rng, 18))
            .unwrap()
            .with_grad();
        let mut tape = Tape::new();
        let (xv, kv) = (tape.param(&x), tape.param(&k));
        let y = tape.conv2d(xv, kv, None, 2, 1).unwrap();
        let p = tape.global_avg_pool(y).unwrap();
        let s = tape.reduce_sum(p);
        let g = tape.backward(s).unwrap();
        (
            tape.item(s).to_bits(),
            g.get(kv)
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

struct Cube;

impl CustomOp for Cube {
    fn name(&self) -> &'static str {
        "cube"
    }

    fn backward(&self, inputs: &[&[f64]], _out: &[f64], g: &[f64], grad_inputs: &mut [Vec<f64>]) {
        for (j, gi) in grad_inputs[0].iter_mut().enumerate() {
            *gi = 3.0 * inputs[0][j] * inputs[0][j] * g[j];
        }
    }
}

#[test]
fn custom_op_routes_gradients() {
    let err = check(vec![3], vec![0.5, -1.0, 2.0], |t, v| {
        let value: Vec<f64> = t.value(v).iter().map(|x| x * x * x).collect();
        let c = t.custom(&[v], vec![3], value, Box::new(Cube)).unwrap();
        t.reduce_sum(c)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn kink_distance_covers_leaky_relu_and_abs_error() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![3], vec![0.5, -0.02, 2.0]).unwrap();
    assert_eq!(tape.min_kink_distance(), None);
    let h = tape.leaky_relu(x, 0.1);
    assert_eq!(tape.min_kink_distance(), Some(0.02));
    let s = tape.reduce_sum(h);
    tape.mean_absolute_error(s, 2.4995).unwrap();
    let d = tape.min_kink_distance().unwrap();
    assert!((d - 0.0015).abs() < 1e-12, "{d}");
}
