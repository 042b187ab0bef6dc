use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Branch, Bus, BusKind, Generator, NetworkCase};
use crate::error::{Error, Result};

const BUS_COLS: usize = 9;
const GEN_COLS: usize = 8;
const BRANCH_COLS: usize = 11;

struct Row {
    line: usize,
    values: Vec<f64>,
}

#[derive(Default)]
struct Sections {
    base_mva: Option<f64>,
    bus: Option<Vec<Row>>,
    gen: Option<Vec<Row>>,
    branch: Option<Vec<Row>>,
}

fn section_name(lhs: &str) -> &str {
    let lhs = lhs.trim();
    lhs.rsplit('.').next().unwrap_or(lhs).trim()
}

fn parse_numbers(chunk: &str, line: usize) -> Result<Vec<f64>> {
    chunk
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Syntax {
                line,
                message: format!("expected a number, found `{t}`"),
            })
        })
        .collect()
}

/// Parses the MATPOWER-style matrix format.
///
/// Only `baseMVA`, `bus`, `gen` and `branch` are interpreted; other matrices
/// (such as `gencost`) and `function` headers are skipped.
pub fn parse_case(text: &str) -> Result<NetworkCase> {
    let mut sections = Sections::default();
    // (section name, rows, line of the opening bracket)
    let mut open: Option<(String, Vec<Row>, usize)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('%').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }

        if let Some((_, rows, _)) = open.as_mut() {
            let (body, closes) = match content.find(']') {
                Some(p) => {
                    let rest = content[p + 1..].trim().trim_start_matches(';').trim();
                    if !rest.is_empty() {
                        return Err(Error::Syntax {
                            line,
                            message: format!("unexpected `{rest}` after `]`"),
                        });
                    }
                    (&content[..p], true)
                }
                None => (content, false),
            };
            for chunk in body.split(';') {
                if chunk.trim().is_empty() {
                    continue;
                }
                let values = parse_numbers(chunk, line)?;
                rows.push(Row { line, values });
            }
            if closes {
                let (name, rows, _) = open.take().unwrap();
                store(&mut sections, &name, rows, line)?;
            }
            continue;
        }

        if content.starts_with("function") {
            continue;
        }
        let Some((lhs, rhs)) = content.split_once('=') else {
            return Err(Error::Syntax {
                line,
                message: format!("expected `name = ...`, found `{content}`"),
            });
        };
        let name = section_name(lhs).to_string();
        let rhs = rhs.trim();
        if let Some(after) = rhs.strip_prefix('[') {
            let mut rows = Vec::new();
            let (body, closes) = match after.find(']') {
                Some(p) => (&after[..p], true),
                None => (after, false),
            };
            for chunk in body.split(';') {
                if !chunk.trim().is_empty() {
                    rows.push(Row {
                        line,
                        values: parse_numbers(chunk, line)?,
                    });
                }
            }
            if closes {
                store(&mut sections, &name, rows, line)?;
            } else {
                open = Some((name, rows, line));
            }
        } else if name == "baseMVA" {
            let v = rhs.trim_end_matches(';').trim();
            let v: f64 = v.parse().map_err(|_| Error::Syntax {
                line,
                message: format!("baseMVA must be a number, found `{v}`"),
            })?;
            sections.base_mva = Some(v);
        }
        // Other scalar assignments (e.g. `version = '2'`) carry nothing we use.
    }

    if let Some((name, _, line)) = open {
        return Err(Error::Syntax {
            line,
            message: format!("matrix `{name}` is never closed"),
        });
    }
    build(sections)
}

fn store(sections: &mut Sections, name: &str, rows: Vec<Row>, line: usize) -> Result<()> {
    let slot = match name {
        "bus" => &mut sections.bus,
        "gen" => &mut sections.gen,
        "branch" => &mut sections.branch,
        _ => return Ok(()),
    };
    if slot.is_some() {
        return Err(Error::Syntax {
            line,
            message: format!("matrix `{name}` defined twice"),
        });
    }
    *slot = Some(rows);
    Ok(())
}

fn require_cols(row: &Row, min: usize, what: &str) -> Result<()> {
    if row.values.len() < min {
        return Err(Error::Syntax {
            line: row.line,
            message: format!(
                "{what} row needs at least {min} columns, found {}",
                row.values.len()
            ),
        });
    }
    Ok(())
}

fn bus_id(v: f64, line: usize) -> Result<u32> {
    if v.fract() != 0.0 || v < 1.0 || v > u32::MAX as f64 {
        return Err(Error::Syntax {
            line,
            message: format!("bus id must be a positive integer, found {v}"),
        });
    }
    Ok(v as u32)
}

fn build(s: Sections) -> Result<NetworkCase> {
    let base_mva = s.base_mva.ok_or_else(|| Error::Syntax {
        line: 0,
        message: "missing `baseMVA`".into(),
    })?;
    let missing = |what: &str| Error::Syntax {
        line: 0,
        message: format!("missing `{what}` matrix"),
    };

    let mut buses = Vec::new();
    for row in s.bus.ok_or_else(|| missing("bus"))? {
        require_cols(&row, BUS_COLS, "bus")?;
        let v = &row.values;
        let kind = match BusKind::from_code(v[1]) {
            Some(k) => k,
            // MATPOWER type 4 marks an isolated bus; it has no place in the model.
            None => {
                return Err(Error::Syntax {
                    line: row.line,
                    message: format!("unsupported bus type {}", v[1]),
                })
            }
        };
        buses.push(Bus {
            id: bus_id(v[0], row.line)?,
            kind,
            p_demand: v[2],
            q_demand: v[3],
            shunt_g: v[4],
            shunt_b: v[5],
            v_mag_setpoint: v[7],
            v_angle_deg: v[8],
        });
    }

    let mut gens = Vec::new();
    for row in s.gen.ok_or_else(|| missing("gen"))? {
        require_cols(&row, GEN_COLS, "gen")?;
        let v = &row.values;
        gens.push(Generator {
            bus: bus_id(v[0], row.line)?,
            p_output: v[1],
            v_setpoint: v[5],
            in_service: v[7] > 0.0,
        });
    }

    let mut branches = Vec::new();
    for row in s.branch.ok_or_else(|| missing("branch"))? {
        require_cols(&row, BRANCH_COLS, "branch")?;
        let v = &row.values;
        branches.push(Branch {
            from: bus_id(v[0], row.line)?,
            to: bus_id(v[1], row.line)?,
            r: v[2],
            x: v[3],
            total_charging_b: v[4],
            tap_ratio: if v[8] == 0.0 { 1.0 } else { v[8] },
            phase_shift_deg: v[9],
            in_service: v[10] > 0.0,
        });
    }

    NetworkCase {
        base_mva,
        buses,
        branches,
        gens,
    }
    .validated()
}

/// Writes a case in the matrix format accepted by [`parse_case`].
pub fn emit_case(case: &NetworkCase) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "baseMVA = {};", case.base_mva);
    out.push_str("\n% bus_i type Pd Qd Gs Bs area Vm Va\nbus = [\n");
    for b in &case.buses {
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t{};",
            b.id,
            b.kind.code(),
            b.p_demand,
            b.q_demand,
            b.shunt_g,
            b.shunt_b,
            b.v_mag_setpoint,
            b.v_angle_deg
        );
    }
    out.push_str("];\n\n% bus Pg Qg Qmax Qmin Vg mBase status\ngen = [\n");
    for g in &case.gens {
        let _ = writeln!(
            out,
            "\t{}\t{}\t0\t0\t0\t{}\t{}\t{};",
            g.bus,
            g.p_output,
            g.v_setpoint,
            case.base_mva,
            u8::from(g.in_service)
        );
    }
    out.push_str("];\n\n% fbus tbus r x b rateA rateB rateC ratio angle status\nbranch = [\n");
    for br in &case.branches {
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t0\t0\t0\t{}\t{}\t{};",
            br.from,
            br.to,
            br.r,
            br.x,
            br.total_charging_b,
            br.tap_ratio,
            br.phase_shift_deg,
            u8::from(br.in_service)
        );
    }
    out.push_str("];\n");
    out
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct JsonBus {
    bus_i: f64,
    #[serde(rename = "type")]
    kind: f64,
    #[serde(rename = "Pd")]
    pd: f64,
    #[serde(rename = "Qd")]
    qd: f64,
    #[serde(rename = "Gs", default)]
    gs: f64,
    #[serde(rename = "Bs", default)]
    bs: f64,
    #[serde(default = "one")]
    area: f64,
    #[serde(rename = "Vm", default = "one")]
    vm: f64,
    #[serde(rename = "Va", default)]
    va: f64,
    #[serde(rename = "baseKV", default)]
    base_kv: f64,
    #[serde(default = "one")]
    zone: f64,
    #[serde(rename = "Vmax", default)]
    vmax: f64,
    #[serde(rename = "Vmin", default)]
    vmin: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonGen {
    bus: f64,
    #[serde(rename = "Pg")]
    pg: f64,
    #[serde(rename = "Qg", default)]
    qg: f64,
    #[serde(rename = "Qmax", default)]
    qmax: f64,
    #[serde(rename = "Qmin", default)]
    qmin: f64,
    #[serde(rename = "Vg", default = "one")]
    vg: f64,
    #[serde(rename = "mBase", default)]
    mbase: f64,
    #[serde(default = "one")]
    status: f64,
    #[serde(rename = "Pmax", default)]
    pmax: f64,
    #[serde(rename = "Pmin", default)]
    pmin: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonBranch {
    fbus: f64,
    tbus: f64,
    r: f64,
    x: f64,
    #[serde(default)]
    b: f64,
    #[serde(rename = "rateA", default)]
    rate_a: f64,
    #[serde(rename = "rateB", default)]
    rate_b: f64,
    #[serde(rename = "rateC", default)]
    rate_c: f64,
    #[serde(default)]
    ratio: f64,
    #[serde(default)]
    angle: f64,
    #[serde(default = "one")]
    status: f64,
    #[serde(default)]
    angmin: f64,
    #[serde(default)]
    angmax: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonCase {
    #[serde(rename = "baseMVA")]
    base_mva: f64,
    bus: Vec<JsonBus>,
    gen: Vec<JsonGen>,
    branch: Vec<JsonBranch>,
}

/// Parses the structured (JSON) case format. Field names match the matrix format's columns.
pub fn parse_case_json(text: &str) -> Result<NetworkCase> {
    let raw: JsonCase = serde_json::from_str(text).map_err(|e| Error::Syntax {
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut s = Sections {
        base_mva: Some(raw.base_mva),
        ..Sections::default()
    };
    // Reuse the matrix path so both formats share one set of conversions.
    s.bus = Some(
        raw.bus
            .iter()
            .map(|b| Row {
                line: 0,
                values: vec![
                    b.bus_i, b.kind, b.pd, b.qd, b.gs, b.bs, b.area, b.vm, b.va,
                ],
            })
            .collect(),
    );
    s.gen = Some(
        raw.gen
            .iter()
            .map(|g| Row {
                line: 0,
                values: vec![g.bus, g.pg, g.qg, g.qmax, g.qmin, g.vg, g.mbase, g.status],
            })
            .collect(),
    );
    s.branch = Some(
        raw.branch
            .iter()
            .map(|b| Row {
                line: 0,
                values: vec![
                    b.fbus, b.tbus, b.r, b.x, b.b, b.rate_a, b.rate_b, b.rate_c, b.ratio, b.angle,
                    b.status,
                ],
            })
            .collect(),
    );
    build(s)
}

/// Serializes a case to the structured format read by [`parse_case_json`].
pub fn to_case_json(case: &NetworkCase) -> String {
    let raw = JsonCase {
        base_mva: case.base_mva,
        bus: case
            .buses
            .iter()
            .map(|b| JsonBus {
                bus_i: b.id as f64,
                kind: b.kind.code() as f64,
                pd: b.p_demand,
                qd: b.q_demand,
                gs: b.shunt_g,
                bs: b.shunt_b,
                area: 1.0,
                vm: b.v_mag_setpoint,
                va: b.v_angle_deg,
                base_kv: 0.0,
                zone: 1.0,
                vmax: 1.1,
                vmin: 0.9,
            })
            .collect(),
        gen: case
            .gens
            .iter()
            .map(|g| JsonGen {
                bus: g.bus as f64,
                pg: g.p_output,
                qg: 0.0,
                qmax: 0.0,
                qmin: 0.0,
                vg: g.v_setpoint,
                mbase: case.base_mva,
                status: if g.in_service { 1.0 } else { 0.0 },
                pmax: 0.0,
                pmin: 0.0,
            })
            .collect(),
        branch: case
            .branches
            .iter()
            .map(|b| JsonBranch {
                fbus: b.from as f64,
                tbus: b.to as f64,
                r: b.r,
                x: b.x,
                b: b.total_charging_b,
                rate_a: 0.0,
                rate_b: 0.0,
                rate_c: 0.0,
                ratio: b.tap_ratio,
                angle: b.phase_shift_deg,
                status: if b.in_service { 1.0 } else { 0.0 },
                angmin: -360.0,
                angmax: 360.0,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("case serializes")
}
