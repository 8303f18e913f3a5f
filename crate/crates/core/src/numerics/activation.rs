use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Element-wise nonlinearity applied between the FFN projections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    /// tanh approximation of GELU.
    Gelu,
    #[default]
    Silu,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
            Nonlinearity::Silu => x * sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = inner.tanh();
                let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            }
            Nonlinearity::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Nonlinearity::Relu),
            "gelu" => Ok(Nonlinearity::Gelu),
            "silu" => Ok(Nonlinearity::Silu),
            other => Err(Error::Config(format!(
                "unknown nonlinearity `{other}` (expected relu, gelu or silu)"
            ))),
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Gelu => "gelu",
            Nonlinearity::Silu => "silu",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sign_cases() {
        let out: Vec<f64> = [-1.0, 0.0, 2.0]
            .iter()
            .map(|&x| Nonlinearity::Relu.apply(x))
            .collect();
        assert_eq!(out, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn silu_zero_fixed_point() {
        assert_eq!(Nonlinearity::Silu.apply(0.0), 0.0);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        let h = 1e-6;
        let x = 0.5;
        let g = Nonlinearity::Gelu;
        let fd = (g.apply(x + h) - g.apply(x - h)) / (2.0 * h);
        assert!((g.derivative(x) - fd).abs() <= 1e-7);
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!("tanh".parse::<Nonlinearity>(), Err(Error::Config(_))));
        assert_eq!("SiLU".parse::<Nonlinearity>().unwrap(), Nonlinearity::Silu);
    }
}
