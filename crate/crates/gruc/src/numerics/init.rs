//! Weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Glorot (Xavier) uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
///
/// Rank-2 shapes are read as (fan_out, fan_in) to match the matvec layout.
/// Rank-1 shapes get fan_in = len, fan_out = 1, which covers the attention
/// score vectors. Draw order is row-major, so a given (rng, shape) pair always
/// produces the same tensor.
pub fn glorot_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [rows, cols] => (*cols, *rows),
        [len] => (*len, 1),
        _ => {
            let len: usize = shape.iter().product();
            (len, 1)
        }
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::from_shape(shape, data).expect("length matches shape by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn bounds_follow_fan_sum() {
        let mut rng = substream(3, "init-test");
        let t = glorot_uniform(&[16, 48], &mut rng);
        let limit = (6.0 / 64.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
        // With 768 draws the samples should come close to the bound.
        assert!(t.data().iter().any(|v| v.abs() > 0.8 * limit));
    }

    #[test]
    fn deterministic_per_stream() {
        let a = glorot_uniform(&[4, 4], &mut substream(9, "w"));
        let b = glorot_uniform(&[4, 4], &mut substream(9, "w"));
        assert_eq!(a.data(), b.data());
        let c = glorot_uniform(&[4, 4], &mut substream(9, "v"));
        assert_ne!(a.data(), c.data());
    }
}
