use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::NetworkCase;
use crate::error::{Error, Result};

/// The two nonzero entries of each pi-model row, by internal bus index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchEnds {
    pub from: usize,
    pub to: usize,
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
}

/// Bus and branch admittances of the in-service network.
#[derive(Debug, Clone)]
pub struct AdmittanceModel {
    pub y_bus: DMatrix<Complex64>,
    pub y_from: DMatrix<Complex64>,
    pub y_to: DMatrix<Complex64>,
    /// `(from id, to id, parallel ordinal)` to branch row.
    pub branch_index: HashMap<(u32, u32, usize), usize>,
    /// Per branch row, its endpoints and pi-model coefficients.
    pub ends: Vec<BranchEnds>,
    pub bus_ids: Vec<u32>,
    /// Per bus, the incident branch rows in ascending row order.
    pub incident: Vec<Vec<usize>>,
}

impl AdmittanceModel {
    pub fn n_bus(&self) -> usize {
        self.y_bus.nrows()
    }

    pub fn n_branch(&self) -> usize {
        self.ends.len()
    }

    /// Row of the current leaving `bus` into branch `row`, as (bus index, coefficient) pairs.
    pub fn current_row(&self, row: usize, bus: usize) -> [(usize, Complex64); 2] {
        let e = &self.ends[row];
        if e.from == bus {
            [(e.from, e.yff), (e.to, e.yft)]
        } else {
            debug_assert_eq!(e.to, bus);
            [(e.from, e.ytf), (e.to, e.ytt)]
        }
    }
}

/// Assembles the pi-model admittances; off-status branches are skipped.
pub fn build_admittance(case: &NetworkCase) -> Result<AdmittanceModel> {
    let nb = case.n_bus();
    let idx: HashMap<u32, usize> = case
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();

    let mut ends = Vec::new();
    let mut branch_index = HashMap::new();
    let mut ordinal: HashMap<(u32, u32), usize> = HashMap::new();
    for br in case.active_branches() {
        if br.x == 0.0 {
            return Err(Error::ZeroReactance {
                from: br.from,
                to: br.to,
            });
        }
        let ys = Complex64::new(br.r, br.x).inv();
        let half_b = Complex64::new(0.0, br.total_charging_b / 2.0);
        let tap = Complex64::from_polar(br.tap_ratio, br.phase_shift_deg.to_radians());
        let row = ends.len();
        ends.push(BranchEnds {
            from: idx[&br.from],
            to: idx[&br.to],
            yff: (ys + half_b) / (br.tap_ratio * br.tap_ratio),
            yft: -ys / tap.conj(),
            ytf: -ys / tap,
            ytt: ys + half_b,
        });
        let k = ordinal.entry((br.from, br.to)).or_insert(0);
        branch_index.insert((br.from, br.to, *k), row);
        *k += 1;
    }

    let nl = ends.len();
    let zero = Complex64::new(0.0, 0.0);
    let mut y_from = DMatrix::from_element(nl, nb, zero);
    let mut y_to = DMatrix::from_element(nl, nb, zero);
    let mut y_bus = DMatrix::from_element(nb, nb, zero);
    let mut incident = vec![Vec::new(); nb];
    for (l, e) in ends.iter().enumerate() {
        y_from[(l, e.from)] += e.yff;
        y_from[(l, e.to)] += e.yft;
        y_to[(l, e.from)] += e.ytf;
        y_to[(l, e.to)] += e.ytt;
        y_bus[(e.from, e.from)] += e.yff;
        y_bus[(e.from, e.to)] += e.yft;
        y_bus[(e.to, e.from)] += e.ytf;
        y_bus[(e.to, e.to)] += e.ytt;
        incident[e.from].push(l);
        incident[e.to].push(l);
    }
    for (i, b) in case.buses.iter().enumerate() {
        y_bus[(i, i)] += Complex64::new(b.shunt_g, b.shunt_b) / case.base_mva;
    }

    Ok(AdmittanceModel {
        y_bus,
        y_from,
        y_to,
        branch_index,
        ends,
        bus_ids: case.bus_ids(),
        incident,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcase::fixtures::TWO_BUS;
    use crate::netcase::parse_case;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_bus_ybus_by_hand() {
        let case = parse_case(TWO_BUS).unwrap();
        let adm = build_admittance(&case).unwrap();
        let expect = [[c(0.0, -10.0), c(0.0, 10.0)], [c(0.0, 10.0), c(0.0, -10.0)]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((adm.y_bus[(i, j)] - expect[i][j]).norm() < 1e-12);
            }
        }
        // Shunt-free and series-only: rows sum to zero.
        for i in 0..2 {
            assert!(adm.y_bus.row(i).iter().sum::<Complex64>().norm() < 1e-12);
        }
    }

    #[test]
    fn nominal_tap_rows_rebuild_ybus() {
        let text = TWO_BUS.replace("1 2 0 0.1 0 0 0 0 0 0 1;", "1 2 0.02 0.1 0.04 0 0 0 0 0 1;");
        let case = parse_case(&text).unwrap();
        let adm = build_admittance(&case).unwrap();
        let rebuilt_from = adm.y_from.row(0).transpose();
        let rebuilt_to = adm.y_to.row(0).transpose();
        for j in 0..2 {
            assert!((adm.y_bus[(0, j)] - rebuilt_from[j]).norm() < 1e-12);
            assert!((adm.y_bus[(1, j)] - rebuilt_to[j]).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_reactance_rejected() {
        let text = TWO_BUS.replace("1 2 0 0.1 0", "1 2 0 0 0");
        let case = parse_case(&text).unwrap();
        assert!(matches!(
            build_admittance(&case),
            Err(Error::ZeroReactance { from: 1, to: 2 })
        ));
    }

    #[test]
    fn off_status_branch_dropped() {
        let text = TWO_BUS.replace(
            "1 2 0 0.1 0 0 0 0 0 0 1;",
            "1 2 0 0.1 0 0 0 0 0 0 1;\n  1 2 0 0 0 0 0 0 0 0 0;",
        );
        let case = parse_case(&text).unwrap();
        let adm = build_admittance(&case).unwrap();
        assert_eq!(adm.n_branch(), 1);
    }
}
