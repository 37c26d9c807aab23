use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the shear modulus is derived from Young's modulus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LameMode {
    /// mu = E nu / (1 - nu^2), as printed for the linear elasticity benchmark.
    #[serde(rename = "scaled")]
    Scaled,
    /// mu = E / (2 (1 + nu)).
    #[serde(rename = "standard")]
    Standard,
}

impl FromStr for LameMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled" => Ok(LameMode::Scaled),
            "standard" => Ok(LameMode::Standard),
            other => Err(Error::invalid(format!("unknown lame mode `{other}`"))),
        }
    }
}

impl fmt::Display for LameMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LameMode::Scaled => "scaled",
            LameMode::Standard => "standard",
        })
    }
}

/// Isotropic plane-strain material whose Lame parameters scale linearly
/// with a spatially varying Young's modulus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElasticMaterial {
    pub poisson: f64,
    pub mode: LameMode,
}

impl ElasticMaterial {
    pub fn new(poisson: f64, mode: LameMode) -> Result<Self> {
        if !(poisson > -1.0 && poisson < 0.5) {
            return Err(Error::invalid(format!("poisson ratio {poisson} outside (-1, 1/2)")));
        }
        Ok(ElasticMaterial { poisson, mode })
    }

    /// (d lambda / dE, d mu / dE); both are constants.
    pub fn lame_per_unit_modulus(&self) -> (f64, f64) {
        let nu = self.poisson;
        let lambda = nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let mu = match self.mode {
            LameMode::Scaled => nu / (1.0 - nu * nu),
            LameMode::Standard => 1.0 / (2.0 * (1.0 + nu)),
        };
        (lambda, mu)
    }

    pub fn lame(&self, young: f64) -> (f64, f64) {
        let (l, m) = self.lame_per_unit_modulus();
        (l * young, m * young)
    }

    /// Lame parameters at every quadrature point.
    pub fn lame_at_quad(&self, young: &[f64]) -> (Vec<f64>, Vec<f64>) {
        young.iter().map(|&e| self.lame(e)).unzip()
    }
}

impl Default for ElasticMaterial {
    fn default() -> Self {
        ElasticMaterial {
            poisson: 0.3,
            mode: LameMode::Scaled,
        }
    }
}
