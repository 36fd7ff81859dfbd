use serde::{Deserialize, Serialize};

use super::{coefficient, CoefficientFn};
use crate::error::{Error, Result};

/// `coef · Π z_i^{z_pow[i]} · Π y_j^{y_pow[j]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub z_pow: Vec<u32>,
    pub y_pow: Vec<u32>,
}

impl Monomial {
    fn eval(&self, z: &[f64], y: &[f64]) -> f64 {
        let mut v = self.coef;
        for (x, &k) in z.iter().zip(&self.z_pow) {
            v *= x.powi(k as i32);
        }
        for (x, &k) in y.iter().zip(&self.y_pow) {
            v *= x.powi(k as i32);
        }
        v
    }
}

/// A vector- or matrix-valued polynomial coefficient, one term list per
/// output component (row-major for matrices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyField {
    pub components: Vec<Vec<Monomial>>,
}

impl PolyField {
    /// Parses rows of the form `[coef, z exponents..., y exponents...]`.
    pub fn from_rows(rows: &[Vec<Vec<f64>>], d: usize, l: usize) -> Result<Self> {
        let components = rows
            .iter()
            .enumerate()
            .map(|(c, terms)| {
                terms
                    .iter()
                    .map(|t| {
                        if t.len() != 1 + d + l {
                            return Err(Error::InvalidModel(format!(
                                "component {c}: term {t:?} must have 1 + {d} + {l} entries"
                            )));
                        }
                        let pow = |x: f64| {
                            if x >= 0.0 && x.fract() == 0.0 && x <= 64.0 {
                                Ok(x as u32)
                            } else {
                                Err(Error::InvalidModel(format!(
                                    "component {c}: exponent {x} is not a small nonnegative integer"
                                )))
                            }
                        };
                        Ok(Monomial {
                            coef: t[0],
                            z_pow: t[1..1 + d].iter().map(|&x| pow(x)).collect::<Result<_>>()?,
                            y_pow: t[1 + d..].iter().map(|&x| pow(x)).collect::<Result<_>>()?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn eval(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        for (o, terms) in out.iter_mut().zip(&self.components) {
            *o = terms.iter().map(|m| m.eval(z, y)).sum();
        }
    }

    pub fn into_fn(self) -> CoefficientFn {
        coefficient(move |z, y, out| self.eval(z, y, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluates_rows() {
        // b(z, y) = -z + 0.5 y^2
        let f = PolyField::from_rows(&[vec![vec![-1.0, 1.0, 0.0], vec![0.5, 0.0, 2.0]]], 1, 1).unwrap();
        let mut out = [0.0];
        f.eval(&[2.0], &[3.0], &mut out);
        assert_eq!(out[0], -2.0 + 4.5);
    }

    #[test]
    fn rejects_fractional_exponent() {
        assert!(PolyField::from_rows(&[vec![vec![1.0, 0.5, 0.0]]], 1, 1).is_err());
        assert!(PolyField::from_rows(&[vec![vec![1.0, 1.0]]], 1, 1).is_err());
    }
}
