//! Central finite-difference gradient checking in double precision.

use std::sync::Arc;

use crate::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over all inputs.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares tape gradients of `f` with central differences.
///
/// `f` builds a scalar from the given leaves. Entries whose gradients are both
/// below `floor` are compared absolutely against `floor`, which keeps the
/// measure meaningful where the true gradient is (near) zero.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, floor: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(Arc::new(v.clone()), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(Arc::new(v.clone()), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_err: worst, checked })
}

/// Smooth, deterministic test values in about `[-1, 1]`.
pub fn probe_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let s = seed as f64;
    Tensor::from_fn(shape, |i| libm::sin(i as f64 * 0.731 + s * 1.913) * libm::cos(i as f64 * 0.217 + s))
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>);

fn square_sum(t: &mut Tape<f64>, v: Var) -> Result<Var, TensorError> {
    let s = t.mul(v, v)?;
    Ok(t.sum(s))
}

/// Finite-difference checks of every differentiable operation, each reduced
/// to a scalar through a sum of squares. Step `1e-6`, floor `1e-6`.
pub fn operation_suite() -> Result<Vec<(&'static str, GradCheck)>, TensorError> {
    let p = probe_tensor;
    let cases: Vec<Case> = vec![
        (
            "conv2d",
            vec![p(&[2, 2, 6, 5], 1), p(&[3, 2, 3, 3], 2), p(&[3], 3)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                square_sum(t, y)
            }),
        ),
        (
            "conv_transpose2d",
            vec![p(&[2, 3, 3, 4], 4), p(&[3, 2, 2, 2], 5), p(&[2], 6)],
            Box::new(|t, v| {
                let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0)?;
                square_sum(t, y)
            }),
        ),
        (
            "conv3d",
            vec![p(&[2, 2, 3, 3, 4], 7), p(&[2, 2, 3, 3, 3], 8), p(&[2], 9)],
            Box::new(|t, v| {
                let y = t.conv3d_same(v[0], v[1], Some(v[2]))?;
                square_sum(t, y)
            }),
        ),
        (
            "bilinear_sample",
            vec![
                p(&[1, 2, 4, 5], 10),
                Tensor::from_fn(&[1, 3, 4, 2], |i| 0.3 + 0.37 * (i as f64 % 7.0) + 0.05 * (i / 7) as f64),
            ],
            Box::new(|t, v| {
                let y = t.bilinear_sample(v[0], v[1])?;
                square_sum(t, y)
            }),
        ),
        (
            "elementwise",
            vec![p(&[3, 4], 11), p(&[3, 4], 12)],
            Box::new(|t, v| {
                let a = t.mul(v[0], v[1])?;
                let b = t.sigmoid(v[0]);
                let c = t.sub(a, b)?;
                let d = t.tanh(c);
                let e = t.scale(d, 1.5);
                let f = t.add_scalar(e, 0.25);
                let g = t.add(f, v[1])?;
                let h = t.relu(g);
                let i = t.abs(c);
                let j = t.add(h, i)?;
                let k = t.mean(j);
                let l = t.l1_mean(c);
                let m = t.add(k, l)?;
                let n = square_sum(t, v[0])?;
                t.add(m, n)
            }),
        ),
        (
            "concat_slice_reshape",
            vec![p(&[2, 2, 3, 3], 13), p(&[2, 3, 3, 3], 14)],
            Box::new(|t, v| {
                let c = t.concat(&[v[0], v[1], v[0]])?;
                let s = t.slice_channels(c, 1, 5)?;
                let r = t.reshape(s, &[2, 45])?;
                square_sum(t, r)
            }),
        ),
        (
            "batch_norm",
            vec![p(&[3, 2, 2, 2], 15), p(&[2], 16), p(&[2], 17), p(&[3, 2, 2, 2], 18)],
            Box::new(|t, v| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                let q = t.mul(y, v[3])?;
                let a = t.channel_affine(q, vec![0.5, -2.0], &[0.1, 0.2])?;
                square_sum(t, a)
            }),
        ),
        (
            "bce_with_logits",
            vec![p(&[2, 5], 19)],
            Box::new(|t, v| {
                let targets = Arc::new(Tensor::from_fn(&[2, 5], |i| (i % 3 == 0) as u8 as f64));
                let s = t.scale(v[0], 3.0);
                t.bce_with_logits(s, targets)
            }),
        ),
        (
            "conv_lstm",
            vec![
                p(&[1, 2, 4, 4], 20),
                p(&[12, 2, 3, 3], 21),
                p(&[12, 3, 1, 1], 22),
                p(&[12], 23),
                p(&[1, 3, 2, 2], 24),
            ],
            Box::new(|t, v| {
                let w = crate::ConvLstmWeights { input: v[1], hidden: v[2], bias: v[3], stride: 2 };
                let (mut h, mut c) = (v[4], v[4]);
                for _ in 0..2 {
                    (h, c) = crate::conv_lstm_cell(t, v[0], (h, c), &w)?;
                }
                let hc = t.add(h, c)?;
                square_sum(t, hc)
            }),
        ),
    ];
    cases.into_iter().map(|(name, inputs, f)| Ok((name, check(&inputs, 1e-6, 1e-6, |t, v| f(t, v))?))).collect()
}

/// Relative gap `|<conv(x), y> - <x, conv_transpose(y)>|` for a shared
/// kernel; zero for an exact adjoint pair.
pub fn adjoint_gap(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Result<f64, TensorError> {
    let mut tape = Tape::<f64>::new();
    let (xv, yv, wv) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(w.clone()));
    let cx = tape.conv2d(xv, wv, None, stride, pad)?;
    let ty = tape.conv_transpose2d(yv, wv, None, stride, pad)?;
    let lhs = tape.value(cx).dot(y);
    let rhs = x.dot(tape.value(ty));
    Ok((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12))
}
