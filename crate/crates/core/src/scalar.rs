//! Scalar abstraction: every numeric path in the crate is generic over a
//! floating-point type, with `f32` used for training throughput and `f64`
//! for finite-difference gradient verification.

use rand::distributions::uniform::SampleUniform;

/// Floating-point scalar the whole pipeline is generic over.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + SampleUniform
    + Send
    + Sync
    + 'static
{
    /// Width tag used by the checkpoint container (4 = f32, 8 = f64).
    const BYTE_WIDTH: u8;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(v: usize) -> Self {
        Self::of_f64(v as f64)
    }
    fn to_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTE_WIDTH: u8 = 4;

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const BYTE_WIDTH: u8 = 8;

    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
