//! Numeric traits shared by every module.
//!
//! Two tiers:
//!
//! * [`Field`] covers exact-capable arithmetic (`+ - * /`, ordering, abs).
//!   Rationals such as `num_rational::Ratio<i64>` satisfy it, so metrics that
//!   only need field operations (ECE, AUC, CFG combination) can be checked
//!   exactly.
//! * [`Scalar`] adds transcendental functions (`ln`, `exp`, `sqrt`) and is
//!   implemented for `f32` and `f64` only.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, NumAssign, Signed, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Ordered field arithmetic. Blanket-implemented.
pub trait Field:
    Num + Signed + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn from_lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Field for T where
    T: Num + Signed + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
}

/// Floating-point scalar used by models, guidance and entropy.
pub trait Scalar:
    Field + Float + NumAssign + Sum + Display + Default + Serialize + DeserializeOwned
{
    /// Bytes per element in the little-endian weight format.
    const WIDTH: usize;
    /// Name written into serialized headers.
    const DTYPE: &'static str;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: usize = 4;
    const DTYPE: &'static str = "f32";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const WIDTH: usize = 8;
    const DTYPE: &'static str = "f64";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Numerically stable `log(softmax(x))`.
pub fn log_softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let sum: F = logits.iter().map(|&x| (x - max).exp()).sum();
    let log_norm = max + sum.ln();
    logits.iter().map(|&x| x - log_norm).collect()
}

/// Numerically stable softmax.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<F> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the maximum element; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax::<f64>(&[]), None);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0_f64, 999.0, -5.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[1000.0_f64, 999.0, -5.0]);
        assert!(lp.iter().all(|x| x.is_finite()));
        assert!((lp[0].exp() - p[0]).abs() < 1e-12);
    }

    #[test]
    fn rational_is_a_field() {
        use num_rational::Ratio;
        fn half<T: Field>(x: T) -> T {
            x / T::from_count(2)
        }
        assert_eq!(half(Ratio::new(3i64, 5)), Ratio::new(3, 10));
    }
}
