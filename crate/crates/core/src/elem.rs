//! Element types: FP32 and a 16-bit float whose flavor (IEEE binary16 or
//! bfloat16) is fixed once per process.

use std::fmt;
use std::sync::OnceLock;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type tag of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    F32,
    F16,
}

impl ElemType {
    /// Storage size of one element in bytes.
    pub fn bytes(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::F16 => 2,
        }
    }

    /// Machine epsilon (distance from 1.0 to the next representable value).
    pub fn epsilon(self) -> f64 {
        match self {
            ElemType::F32 => f32::EPSILON as f64,
            ElemType::F16 => half_flavor().epsilon(),
        }
    }
}

impl fmt::Display for ElemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElemType::F32 => "f32",
            ElemType::F16 => "f16",
        })
    }
}

impl std::str::FromStr for ElemType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "fp32" => Ok(ElemType::F32),
            "f16" | "fp16" => Ok(ElemType::F16),
            other => Err(Error::Parse(format!("unknown element type `{other}`"))),
        }
    }
}

/// Encoding used for 16-bit floats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HalfFlavor {
    #[default]
    Ieee,
    Bf16,
}

impl HalfFlavor {
    pub fn epsilon(self) -> f64 {
        match self {
            HalfFlavor::Ieee => f16::EPSILON.to_f64(),
            HalfFlavor::Bf16 => bf16::EPSILON.to_f64(),
        }
    }

    /// Rounds `x` to the nearest representable value (ties to even).
    pub fn round(self, x: f32) -> f32 {
        match self {
            HalfFlavor::Ieee => f16::from_f32(x).to_f32(),
            HalfFlavor::Bf16 => bf16::from_f32(x).to_f32(),
        }
    }

    pub fn encode(self, x: f32) -> u16 {
        match self {
            HalfFlavor::Ieee => f16::from_f32(x).to_bits(),
            HalfFlavor::Bf16 => bf16::from_f32(x).to_bits(),
        }
    }

    pub fn decode(self, bits: u16) -> f32 {
        match self {
            HalfFlavor::Ieee => f16::from_bits(bits).to_f32(),
            HalfFlavor::Bf16 => bf16::from_bits(bits).to_f32(),
        }
    }
}

static FLAVOR: OnceLock<HalfFlavor> = OnceLock::new();

/// Fixes the 16-bit flavor for the rest of the process.
///
/// Must be called before any F16 tensor is created. Setting the flavor that is
/// already active is a no-op; switching after the first use is an error.
pub fn set_half_flavor(flavor: HalfFlavor) -> Result<()> {
    let active = *FLAVOR.get_or_init(|| flavor);
    if active == flavor {
        Ok(())
    } else {
        Err(Error::FlavorLocked { active, requested: flavor })
    }
}

/// The active 16-bit flavor (IEEE binary16 unless configured otherwise).
pub fn half_flavor() -> HalfFlavor {
    *FLAVOR.get_or_init(HalfFlavor::default)
}

/// Scalar element stored in a tensor buffer.
///
/// Kernels compute in `f32`; `round` maps an `f32` result back onto the
/// element's representable set, so `T::round(x) == T::from_f32(x).to_f32()`.
pub trait Elem: Copy + Default + Send + Sync + PartialEq + fmt::Debug + 'static {
    const TYPE: ElemType;
    const BYTES: usize;

    fn to_f32(self) -> f32;
    fn from_f32(x: f32) -> Self;

    #[inline(always)]
    fn round(x: f32) -> f32 {
        Self::from_f32(x).to_f32()
    }

    fn zero() -> Self {
        Self::default()
    }
}

impl Elem for f32 {
    const TYPE: ElemType = ElemType::F32;
    const BYTES: usize = 4;

    #[inline(always)]
    fn to_f32(self) -> f32 {
        self
    }

    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        x
    }

    #[inline(always)]
    fn round(x: f32) -> f32 {
        x
    }
}

impl Elem for f16 {
    const TYPE: ElemType = ElemType::F16;
    const BYTES: usize = 2;

    #[inline(always)]
    fn to_f32(self) -> f32 {
        f16::to_f32(self)
    }

    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        f16::from_f32(x)
    }
}

impl Elem for bf16 {
    const TYPE: ElemType = ElemType::F16;
    const BYTES: usize = 2;

    #[inline(always)]
    fn to_f32(self) -> f32 {
        bf16::to_f32(self)
    }

    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        bf16::from_f32(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values_survive_half_rounding() {
        for flavor in [HalfFlavor::Ieee, HalfFlavor::Bf16] {
            for x in [0.0f32, 1.0, -2.0, 0.5, 3.0] {
                assert_eq!(flavor.round(x), x);
                assert_eq!(flavor.decode(flavor.encode(x)), x);
            }
        }
    }

    #[test]
    fn ieee_rounding_of_one_tenth() {
        // binary16 neighbours of 0.1 are 1638/16384 and 1639/16384; 0.1 * 16384
        // = 1638.4 so round-to-nearest picks 1638 * 2^-14.
        let r = HalfFlavor::Ieee.round(0.1);
        assert_eq!(r as f64, 1638.0 / 16384.0);
        assert!(((r as f64) - 0.1).abs() <= 2f64.powi(-11) * 0.1);
    }

    #[test]
    fn ties_round_to_even() {
        // 1 + 2^-11 sits halfway between 1 and 1 + 2^-10.
        assert_eq!(HalfFlavor::Ieee.round(1.0 + 2f32.powi(-11)), 1.0);
        // 1 + 3 * 2^-11 sits halfway between 1 + 2^-10 and 1 + 2^-9.
        assert_eq!(HalfFlavor::Ieee.round(1.0 + 3.0 * 2f32.powi(-11)), 1.0 + 2f32.powi(-9));
    }

    #[test]
    fn flavor_cannot_change_after_first_use() {
        let active = half_flavor();
        assert!(set_half_flavor(active).is_ok());
        let other = match active {
            HalfFlavor::Ieee => HalfFlavor::Bf16,
            HalfFlavor::Bf16 => HalfFlavor::Ieee,
        };
        assert!(matches!(set_half_flavor(other), Err(Error::FlavorLocked { .. })));
    }

    #[test]
    fn parse_elem() {
        assert_eq!("fp16".parse::<ElemType>().unwrap(), ElemType::F16);
        assert_eq!("F32".parse::<ElemType>().unwrap(), ElemType::F32);
        assert!("i8".parse::<ElemType>().is_err());
    }
}
