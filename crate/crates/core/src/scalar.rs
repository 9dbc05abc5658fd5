use std::fmt::{Debug, Display};
use std::io::{self, Read, Write};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type for all tensor math: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Dtype tag used by the tensor wire format (0 = f32, 1 = f64).
    const DTYPE_TAG: u8;
    /// Bytes per element on the wire.
    const BYTE_WIDTH: usize;

    fn write_le<W: Write>(self, w: &mut W) -> io::Result<()>;
    fn read_le<R: Read>(r: &mut R) -> io::Result<Self>;

    /// Shorthand for converting an `f64` constant into this scalar type.
    fn fromf(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant converts to scalar")
    }

    /// Shorthand for widening to `f64`.
    fn tof(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 0;
    const BYTE_WIDTH: usize = 4;

    fn write_le<W: Write>(self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }

    fn read_le<R: Read>(r: &mut R) -> io::Result<Self> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        Ok(f32::from_le_bytes(buf))
    }
}

impl Scalar for f64 {
    const DTYPE_TAG: u8 = 1;
    const BYTE_WIDTH: usize = 8;

    fn write_le<W: Write>(self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }

    fn read_le<R: Read>(r: &mut R) -> io::Result<Self> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }
}
