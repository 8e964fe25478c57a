//! Scalar abstraction shared by the analytical modules.
//!
//! Everything that is pure numerics (kernels, stationary laws, fixed points,
//! the mean-field ODE) is written against [`Real`], so it runs in `f32` or
//! `f64`. The simulator is stochastic and always works in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the analytical routes.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot hold at all.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal out of range for scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Rounds `x` to 12 significant digits, the precision every exported number uses.
pub fn round_sig12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.11e}", x).parse().unwrap_or(x)
}

/// Formats `x` with 12 significant digits.
pub fn fmt_sig12(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{}", x);
    }
    let rounded = round_sig12(x);
    let abs = rounded.abs();
    if (1e-5..1e12).contains(&abs) {
        // shortest representation of the rounded value never exceeds 12 digits
        format!("{}", rounded)
    } else {
        let s = format!("{:.11e}", rounded);
        // trim trailing zeros of the mantissa
        match s.split_once('e') {
            Some((mant, exp)) if mant.contains('.') => {
                let mant = mant.trim_end_matches('0').trim_end_matches('.');
                format!("{}e{}", mant, exp)
            }
            _ => s,
        }
    }
}
