use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the numeric core is generic over.  `f32` is what the
/// model stack uses; `f64` exists so gradient checks and unit tests can run
/// the same code at higher precision.
pub trait Num:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64, for literals and config values.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any float scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float scalar converts to f64")
    }
}

impl Num for f32 {}
impl Num for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Num>() {
        let x = S::from_f64_lossy(0.25);
        assert_eq!(x.to_f64_lossy(), 0.25);
        assert!(S::neg_infinity() < S::zero());
    }

    #[test]
    fn both_scalars_roundtrip() {
        roundtrip::<f32>();
        roundtrip::<f64>();
    }
}
