use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular bus voltages `[v_r; v_i]` in per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageProfile {
    pub v: DVector<f64>,
}

impl VoltageProfile {
    pub fn new(v: DVector<f64>) -> Result<Self> {
        if v.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "profile length {} is odd",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("profile has non-finite entries".into()));
        }
        Ok(VoltageProfile { v })
    }

    pub fn from_complex(v: &[Complex64]) -> Self {
        let n = v.len();
        let mut out = DVector::zeros(2 * n);
        for (k, z) in v.iter().enumerate() {
            out[k] = z.re;
            out[n + k] = z.im;
        }
        VoltageProfile { v: out }
    }

    pub fn n_bus(&self) -> usize {
        self.v.len() / 2
    }

    pub fn phasor(&self, k: usize) -> Complex64 {
        Complex64::new(self.v[k], self.v[self.n_bus() + k])
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        (0..self.n_bus()).map(|k| self.phasor(k)).collect()
    }

    /// Rotates every phasor by `angle` radians.
    pub fn rotated(&self, angle: f64) -> Self {
        let r = Complex64::from_polar(1.0, angle);
        let v: Vec<Complex64> = self.to_complex().into_iter().map(|z| z * r).collect();
        Self::from_complex(&v)
    }
}

/// Formats a profile as `layout=rect n=<N_b>` followed by one value per line.
pub fn save_profile(p: &VoltageProfile) -> String {
    let mut out = format!("layout=rect n={}\n", p.n_bus());
    for x in p.v.iter() {
        out.push_str(&format!("{x:e}\n"));
    }
    out
}

/// Parses a profile file and checks it against a case with `n_bus` buses.
pub fn load_profile(text: &str, n_bus: usize) -> Result<VoltageProfile> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (_, header) = lines.next().ok_or(Error::Syntax {
        line: 1,
        message: "empty profile".into(),
    })?;
    let mut declared = None;
    let mut layout_ok = false;
    for tok in header.split_whitespace() {
        match tok.split_once('=') {
            Some(("layout", "rect")) => layout_ok = true,
            Some(("layout", other)) => {
                return Err(Error::Syntax {
                    line: 1,
                    message: format!("unsupported layout `{other}`"),
                })
            }
            Some(("n", n)) => {
                declared = Some(n.parse::<usize>().map_err(|_| Error::Syntax {
                    line: 1,
                    message: format!("bad bus count `{n}`"),
                })?)
            }
            _ => {
                return Err(Error::Syntax {
                    line: 1,
                    message: format!("unexpected header token `{tok}`"),
                })
            }
        }
    }
    let (true, Some(declared)) = (layout_ok, declared) else {
        return Err(Error::Syntax {
            line: 1,
            message: "header must be `layout=rect n=<N_b>`".into(),
        });
    };
    if declared != n_bus {
        return Err(Error::dims("profile bus count", n_bus, declared));
    }
    let mut values = Vec::with_capacity(2 * n_bus);
    for (line, l) in lines {
        values.push(l.parse::<f64>().map_err(|_| Error::Syntax {
            line,
            message: format!("expected a number, found `{l}`"),
        })?);
    }
    if values.len() != 2 * n_bus {
        return Err(Error::dims("profile values", 2 * n_bus, values.len()));
    }
    VoltageProfile::new(DVector::from_vec(values))
}
