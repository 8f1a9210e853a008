use serde::{Deserialize, Serialize};

/// Smooth (at least C⁴) scalar activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `σ(x) = sin x + cos x`
    #[default]
    SinCos,
    Tanh,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::SinCos => x.sin() + x.cos(),
            Activation::Tanh => x.tanh(),
        }
    }

    /// `(σ, σ', σ'')` at `x`.
    pub fn eval2(self, x: f64) -> (f64, f64, f64) {
        match self {
            Activation::SinCos => {
                let (s, c) = x.sin_cos();
                (s + c, c - s, -(s + c))
            }
            Activation::Tanh => {
                let s = x.tanh();
                let d1 = 1.0 - s * s;
                (s, d1, -2.0 * s * d1)
            }
        }
    }

    /// Derivative of order `k ≤ 4`.
    pub fn derivative(self, x: f64, k: u8) -> f64 {
        match self {
            Activation::SinCos => {
                let (s, c) = x.sin_cos();
                match k % 4 {
                    0 => s + c,
                    1 => c - s,
                    2 => -s - c,
                    _ => s - c,
                }
            }
            Activation::Tanh => {
                let s = x.tanh();
                let d1 = 1.0 - s * s;
                let d2 = -2.0 * s * d1;
                let d3 = -2.0 * (d1 * d1 + s * d2);
                let d4 = -2.0 * (3.0 * d1 * d2 + s * d3);
                match k {
                    0 => s,
                    1 => d1,
                    2 => d2,
                    3 => d3,
                    4 => d4,
                    _ => panic!("activation derivatives are provided up to order 4"),
                }
            }
        }
    }
}
