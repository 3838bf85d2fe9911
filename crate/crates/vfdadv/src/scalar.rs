//! Scalar element types for tensors.
//!
//! All numeric code in this crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. 64-bit is the default throughout
//! (gradient checks and reports assume it); 32-bit is selectable where
//! throughput matters more than the last digits.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point element type of a tensor.
///
/// Adds to [`num_traits::Float`] the pieces the crate needs for
/// serialization (a dtype tag, little-endian byte layout) and for exact
/// conversions from `f64` configuration values.
pub trait Scalar:
    Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Dtype tag written into checkpoint and container manifests.
    const DTYPE: &'static str;
    /// Serialized size of one element in bytes.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Append the little-endian byte representation to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Read one value from exactly `Self::BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        1.5f64.write_le(&mut buf);
        (-0.25f64).write_le(&mut buf);
        assert_eq!(f64::read_le(&buf[0..8]), 1.5);
        assert_eq!(f64::read_le(&buf[8..16]), -0.25);

        let mut buf = Vec::new();
        3.25f32.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf), 3.25);
    }
}
