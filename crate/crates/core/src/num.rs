//! Scalar abstraction for the numeric pipeline.
//!
//! Delay corpora, histograms, HMM inference, and the statistical tests are
//! written against this trait so the same code runs at `f32` or `f64`
//! precision. Concrete aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float as NumFloat, FromPrimitive, ToPrimitive};

pub trait Float:
    NumFloat + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough route into `f64` for special functions that only
    /// exist at double precision.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable scalar")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("representable scalar")
    }
}

impl Float for f32 {}
impl Float for f64 {}
