use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Affine map between int8 codes and reals: `x ≈ scale · (q − zero_point)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub const BITS: u32 = 8;

    pub fn quantize(&self, x: f64) -> i8 {
        ((x / self.scale).round() + self.zero_point as f64).clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale * (q as i32 - self.zero_point) as f64
    }
}

pub fn dequantize(q: &[i8], p: &QuantParams) -> Vec<f64> {
    q.iter().map(|&v| p.dequantize(v)).collect()
}

fn max_abs(x: &Tensor, what: &'static str) -> Result<f64> {
    if !x.all_finite() {
        return Err(Error::NonFinite(what));
    }
    Ok(x.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Symmetric per-tensor quantization: `scale = max|w| / 127` (1 for an
/// all-zero tensor), codes in `[−127, 127]`. The scale is rounded to `f32`
/// first so that it survives serialization unchanged.
pub fn quantize_weights(w: &Tensor) -> Result<(Vec<i8>, QuantParams)> {
    let m = max_abs(w, "quantize_weights")?;
    let scale = if m == 0.0 { 1.0 } else { (m / 127.0) as f32 as f64 };
    let p = QuantParams { scale, zero_point: 0 };
    let q = w
        .data()
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok((q, p))
}

/// Asymmetric per-tensor activation parameters over `[min(x, 0), max(x, 0)]`:
/// `scale = range / 255` and the lower end maps to −128. Widening the range
/// to include zero keeps the zero point inside int8 and makes zero exactly
/// representable. A tensor of zeros gets scale 1.
pub fn dynamic_activation_params(x: &Tensor) -> Result<QuantParams> {
    if !x.all_finite() {
        return Err(Error::NonFinite("dynamic_activation_params"));
    }
    let (lo, hi) = x
        .data()
        .iter()
        .fold((0.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        return Ok(QuantParams {
            scale: 1.0,
            zero_point: -128,
        });
    }
    let scale = (hi - lo) / 255.0;
    let zero_point = (-128.0 - (lo / scale).round()).clamp(-128.0, 127.0) as i32;
    Ok(QuantParams { scale, zero_point })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn weight_examples() {
        let (q, p) = quantize_weights(&Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(p.scale, 1.0);
        assert!(q.iter().all(|&v| v == 0));

        let (q, p) = quantize_weights(&Tensor::vector(vec![-1.27, 0.5, 1.27])).unwrap();
        assert!((p.scale - 0.01).abs() < 1e-9);
        assert_eq!(q, vec![-127, 50, 127]);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn weight_round_trip_bound() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let w = Tensor::vector((0..64).map(|_| rng.normal() * 3.0).collect());
            let (q, p) = quantize_weights(&w).unwrap();
            assert!(q.iter().all(|&v| v >= -127));
            for (a, b) in dequantize(&q, &p).iter().zip(w.data()) {
                assert!((a - b).abs() <= p.scale / 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn activation_examples() {
        let p = dynamic_activation_params(&Tensor::vector(vec![0.0, 1.0, 2.55])).unwrap();
        assert!((p.scale - 0.01).abs() < 1e-12);
        assert_eq!(p.zero_point, -128);

        let z = dynamic_activation_params(&Tensor::zeros(&[4])).unwrap();
        assert_eq!((z.scale, z.zero_point), (1.0, -128));
        assert_eq!(z.dequantize(z.quantize(0.0)), 0.0);

        for c in [-3.7, 0.25, 42.0] {
            let x = Tensor::vector(vec![c; 5]);
            let p = dynamic_activation_params(&x).unwrap();
            assert!((p.dequantize(p.quantize(c)) - c).abs() <= 1e-12 * c.abs());
        }
    }

    #[test]
    fn activation_round_trip_bound() {
        let mut rng = Rng::new(8);
        for _ in 0..50 {
            let shift = rng.normal() * 2.0;
            let x = Tensor::vector((0..40).map(|_| rng.normal() + shift).collect());
            let p = dynamic_activation_params(&x).unwrap();
            assert!((-128..=127).contains(&p.zero_point));
            for &v in x.data() {
                assert!((p.dequantize(p.quantize(v)) - v).abs() <= p.scale / 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        let x = Tensor::vector(vec![1.0, f64::NAN]);
        assert!(matches!(quantize_weights(&x), Err(Error::NonFinite(_))));
        assert!(matches!(dynamic_activation_params(&x), Err(Error::NonFinite(_))));
    }
}
