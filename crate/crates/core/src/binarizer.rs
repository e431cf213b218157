//! Stochastic binarization bottleneck.

use ivc_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::{CodecError, Result};

/// Samples `b = +1` with probability `(1 + x) / 2`, `-1` otherwise.
///
/// The backward pass is the identity (straight-through on the expectation).
pub fn binarize_train<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rng: &mut R) -> Result<Var> {
    let sampled = sample(tape.value(x), rng)?;
    Ok(tape.straight_through(x, sampled)?)
}

/// The sampling half of [`binarize_train`], without a tape.
pub fn sample<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Result<Tensor> {
    if let Some(bad) = x.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(CodecError::invalid(format!("binarizer input {bad} lies outside [-1, 1]")));
    }
    let data = x.data().iter().map(|&v| if rng.gen::<f32>() < (1.0 + v) * 0.5 { 1.0 } else { -1.0 });
    Ok(Tensor::new(x.shape(), data.collect())?)
}

/// Deterministic binarization: `+1` iff `x >= 0`.
pub fn binarize_infer(x: &Tensor) -> Tensor {
    x.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn empirical_mean_tracks_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::full(&[100_000], 0.5f32);
        let b = sample(&x, &mut rng).unwrap();
        let mean = b.data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn boundaries_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(&[4], vec![1.0f32, 1.0, -1.0, -1.0]).unwrap();
        for _ in 0..50 {
            assert_eq!(sample(&x, &mut rng).unwrap().data(), &[1.0, 1.0, -1.0, -1.0]);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(&[2], vec![0.0f32, 1.5]).unwrap();
        assert!(sample(&x, &mut rng).is_err());
    }

    #[test]
    fn gradient_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![-0.3f32, 0.1, 0.9]).unwrap().into(), true);
        let b = binarize_train(&mut tape, x, &mut rng).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn inference_is_sign_with_zero_up() {
        let x = Tensor::new(&[4], vec![0.7f32, -0.2, 0.0, -0.0]).unwrap();
        let b = binarize_infer(&x);
        assert_eq!(b.data(), &[1.0, -1.0, 1.0, 1.0]);
        assert_eq!(binarize_infer(&b), b);
    }
}
