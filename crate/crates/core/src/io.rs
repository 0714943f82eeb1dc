//! CSV time series and binary state snapshots.
//!
//! CSV files carry a header row and one row per record, numbers with 17
//! significant digits. Lines starting with `#` after the records hold
//! report-level values as `# key=value`.
//!
//! A snapshot is the text line `BSQS1`, `key=value` header lines closed by
//! `end`, then the payload: little-endian `f64` real-space samples of each
//! listed field, components outermost, then lateral rows, then vertical
//! nodes. The header records the payload length and its CRC-32.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::assembly::Spaces;
use crate::config::{Discretization, PhysicalParams, SweepParam};
use crate::energy::{EnergyReport, EnergyRow};
use crate::error::{Error, Result};
use crate::integrator::{State, Trajectory};
use crate::limit::{estimate_rate, DistanceReport, DistanceRow};
use crate::spectral::{LateralGrid, LateralTransform, SpectralField};
use crate::verification::ConvergenceReport;

/// Rows of numbers under named columns plus `key=value` notes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub notes: Vec<(String, String)>,
}

pub trait ToTable {
    fn to_table(&self) -> Table;
}

pub trait FromTable: Sized {
    fn from_table(t: &Table) -> Result<Self>;
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn columns(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// Renders a table as CSV.
pub fn render_csv(t: &Table) -> String {
    let mut out = t.columns.join(",");
    out.push('\n');
    for row in &t.rows {
        let cells: Vec<String> = row.iter().map(|&x| num(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    for (k, v) in &t.notes {
        let _ = writeln!(out, "# {k}={v}");
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Table> {
    let bad = |line: usize, reason: String| Error::Parse { line, reason };
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or_else(|| bad(1, "missing header row".into()))?;
    let columns: Vec<String> = head.split(',').map(|c| c.trim().to_string()).collect();
    let mut t = Table {
        columns,
        ..Table::default()
    };
    for (i, line) in lines {
        if let Some(note) = line.strip_prefix('#') {
            let (k, v) = note
                .trim()
                .split_once('=')
                .ok_or_else(|| bad(i + 1, "note without '='".into()))?;
            t.notes.push((k.to_string(), v.to_string()));
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !t.notes.is_empty() {
            return Err(bad(i + 1, "record after the notes".into()));
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|_| bad(i + 1, format!("not a number: '{c}'"))))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != t.columns.len() {
            return Err(bad(i + 1, format!("{} cells, expected {}", row.len(), t.columns.len())));
        }
        t.rows.push(row);
    }
    Ok(t)
}

/// Writes a report as CSV.
pub fn write_timeseries(report: &impl ToTable, path: &Path) -> Result<()> {
    fs::write(path, render_csv(&report.to_table()))?;
    Ok(())
}

pub fn read_timeseries<R: FromTable>(path: &Path) -> Result<R> {
    R::from_table(&parse_csv(&fs::read_to_string(path)?)?)
}

fn expect_columns(t: &Table, cols: &[&str]) -> Result<()> {
    if t.columns != columns(cols) {
        return Err(Error::Parse {
            line: 1,
            reason: format!("unexpected columns {:?}", t.columns),
        });
    }
    Ok(())
}

fn note<'a>(t: &'a Table, key: &str) -> Option<&'a str> {
    t.notes.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

impl ToTable for EnergyReport {
    fn to_table(&self) -> Table {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.n as f64,
                    r.t,
                    r.e,
                    r.d,
                    r.residual,
                    r.slip_norm,
                    r.elastic,
                    r.storage,
                    r.kinetic_b,
                    r.kinetic_f,
                    r.darcy,
                    r.viscous,
                    r.slip,
                    r.kelvin_voigt,
                ]
            })
            .collect();
        let notes = self
            .driven_constant
            .map(|c| vec![("driven_constant".to_string(), num(c))])
            .unwrap_or_default();
        Table {
            columns: columns(&EnergyReport::COLUMNS),
            rows,
            notes,
        }
    }
}

impl FromTable for EnergyReport {
    fn from_table(t: &Table) -> Result<Self> {
        expect_columns(t, &EnergyReport::COLUMNS)?;
        let rows = t
            .rows
            .iter()
            .map(|r| EnergyRow {
                n: r[0] as usize,
                t: r[1],
                e: r[2],
                d: r[3],
                residual: r[4],
                slip_norm: r[5],
                elastic: r[6],
                storage: r[7],
                kinetic_b: r[8],
                kinetic_f: r[9],
                darcy: r[10],
                viscous: r[11],
                slip: r[12],
                kelvin_voigt: r[13],
            })
            .collect();
        let driven_constant = match note(t, "driven_constant") {
            Some(v) => Some(v.parse::<f64>().map_err(|_| Error::Parse {
                line: 0,
                reason: format!("bad driven_constant '{v}'"),
            })?),
            None => None,
        };
        Ok(EnergyReport { rows, driven_constant })
    }
}

impl ToTable for DistanceReport {
    fn to_table(&self) -> Table {
        let rows = self
            .rows
            .iter()
            .map(|r| vec![r.value, r.d1, r.d2, r.d3, r.d4, r.rho_kinetic_b, r.rho_kinetic_f, r.delta_term])
            .collect();
        let mut notes = vec![("param".to_string(), self.param.name().to_string())];
        if let Ok(fits) = estimate_rate(self) {
            let names = ["D1", "D2", "D3", "D4", "delta_term"];
            for (name, fit) in names.iter().zip(fits) {
                notes.push((format!("slope_{name}"), format!("{} residual {}", num(fit.slope), num(fit.residual))));
            }
        }
        Table {
            columns: columns(&DistanceReport::COLUMNS),
            rows,
            notes,
        }
    }
}

impl FromTable for DistanceReport {
    fn from_table(t: &Table) -> Result<Self> {
        expect_columns(t, &DistanceReport::COLUMNS)?;
        let param = match note(t, "param") {
            Some("rho_joint") => SweepParam::RhoJoint,
            Some("delta") => SweepParam::Delta,
            Some("c0") => SweepParam::C0,
            other => {
                return Err(Error::Parse {
                    line: 0,
                    reason: format!("missing or unknown sweep parameter {other:?}"),
                })
            }
        };
        let rows = t
            .rows
            .iter()
            .map(|r| DistanceRow {
                value: r[0],
                d1: r[1],
                d2: r[2],
                d3: r[3],
                d4: r[4],
                rho_kinetic_b: r[5],
                rho_kinetic_f: r[6],
                delta_term: r[7],
            })
            .collect();
        Ok(DistanceReport { param, rows })
    }
}

impl ToTable for ConvergenceReport {
    fn to_table(&self) -> Table {
        let rows = self
            .levels
            .iter()
            .map(|l| {
                let mut r = vec![l.h, l.dt];
                r.extend(l.values);
                r
            })
            .collect();
        let mut notes = vec![("case".to_string(), self.case.clone())];
        for (name, fit) in ConvergenceReport::COLUMNS[2..].iter().zip(&self.orders) {
            let v = match fit {
                Some(f) => format!("{} residual {}", num(f.slope), num(f.residual)),
                None => "none".into(),
            };
            notes.push((format!("order_{name}"), v));
        }
        Table {
            columns: columns(&ConvergenceReport::COLUMNS),
            rows,
            notes,
        }
    }
}

/// Per-step diagnostics of a run.
impl ToTable for Trajectory {
    fn to_table(&self) -> Table {
        let rows = self
            .diagnostics
            .iter()
            .enumerate()
            .map(|(n, d)| {
                vec![
                    n as f64,
                    d.t,
                    d.energy,
                    d.dissipation_increment,
                    d.interface_residuals[0],
                    d.interface_residuals[1],
                    d.interface_residuals[2],
                    d.increment_norm,
                ]
            })
            .collect();
        Table {
            columns: columns(&["n", "t", "energy", "dissipation_increment", "ic1", "ic2", "ic4", "increment_norm"]),
            rows,
            notes: Vec::new(),
        }
    }
}

const MAGIC: &str = "BSQS1";

/// A state together with the grid and coefficients it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub disc: Discretization,
    pub params: PhysicalParams,
    pub state: State,
}

fn state_fields(s: &State) -> Vec<(&'static str, &SpectralField)> {
    let mut out = vec![("u", &s.u)];
    if let Some(w) = &s.w {
        out.push(("w", w));
    }
    out.extend([("p", &s.p), ("v", &s.v), ("pf", &s.pf)]);
    out
}

pub fn encode_snapshot(snap: &Snapshot) -> Result<Vec<u8>> {
    let tr = LateralTransform::new(LateralGrid::new(snap.disc.n1, snap.disc.n2));
    let mut payload = Vec::new();
    let mut list = Vec::new();
    for (name, f) in state_fields(&snap.state) {
        for x in tr.inverse(f)? {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        list.push(format!("{name}:{}:{}", f.comps, f.nvert));
    }
    let d = &snap.disc;
    let p = &snap.params;
    let mut head = format!("{MAGIC}\n");
    for (k, v) in [("n1", d.n1), ("n2", d.n2), ("nb", d.nb), ("nf", d.nf)] {
        let _ = writeln!(head, "{k}={v}");
    }
    let _ = writeln!(head, "dt={:?}", d.dt);
    let _ = writeln!(head, "t_end={:?}", d.t_end);
    let _ = writeln!(head, "t={:?}", snap.state.t);
    for (k, v) in PhysicalParams::KEYS.iter().zip(param_values(p)) {
        let _ = writeln!(head, "{k}={v:?}");
    }
    let _ = writeln!(head, "fields={}", list.join(","));
    let _ = writeln!(head, "payload_bytes={}", payload.len());
    let _ = writeln!(head, "crc32={:08x}", crc32fast::hash(&payload));
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

fn param_values(p: &PhysicalParams) -> [f64; 10] {
    [p.lambda, p.mu, p.alpha, p.c0, p.k_perm, p.nu, p.beta, p.rho_b, p.rho_f, p.delta]
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Snapshot> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(start, "unterminated header line"))?;
        *pos = start + end + 1;
        let line = std::str::from_utf8(&bytes[start..start + end]).map_err(|_| format_err(start, "header is not UTF-8"))?;
        Ok((start, line.to_string()))
    };
    let (_, magic) = next_line(&mut pos).map_err(|_| format_err(0, "missing magic"))?;
    if magic != MAGIC {
        return Err(format_err(0, format!("bad magic '{magic}'")));
    }
    let mut header = Vec::new();
    loop {
        let (off, line) = next_line(&mut pos)?;
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format_err(off, format!("bad header line '{line}'")))?;
        header.push((off, k.to_string(), v.to_string()));
    }
    let get = |key: &str| -> Result<(usize, &str)> {
        header
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(o, _, v)| (*o, v.as_str()))
            .ok_or_else(|| format_err(pos, format!("header lacks '{key}'")))
    };
    let int = |key: &str| -> Result<usize> {
        let (o, v) = get(key)?;
        v.parse().map_err(|_| format_err(o, format!("bad value for '{key}'")))
    };
    let real = |key: &str| -> Result<f64> {
        let (o, v) = get(key)?;
        v.parse().map_err(|_| format_err(o, format!("bad value for '{key}'")))
    };
    let disc = Discretization {
        n1: int("n1")?,
        n2: int("n2")?,
        nb: int("nb")?,
        nf: int("nf")?,
        dt: real("dt")?,
        t_end: real("t_end")?,
    };
    let mut vals = [0.0; 10];
    for (slot, key) in vals.iter_mut().zip(PhysicalParams::KEYS) {
        *slot = real(key)?;
    }
    let [lambda, mu, alpha, c0, k_perm, nu, beta, rho_b, rho_f, delta] = vals;
    let params = PhysicalParams {
        lambda,
        mu,
        alpha,
        c0,
        k_perm,
        nu,
        beta,
        rho_b,
        rho_f,
        delta,
    };
    let payload = &bytes[pos..];
    if payload.len() != int("payload_bytes")? {
        return Err(format_err(pos, format!("payload has {} bytes, header declares {}", payload.len(), int("payload_bytes")?)));
    }
    let (crc_off, crc) = get("crc32")?;
    let crc = u32::from_str_radix(crc, 16).map_err(|_| format_err(crc_off, "bad checksum field"))?;
    if crc32fast::hash(payload) != crc {
        return Err(format_err(pos, "checksum mismatch"));
    }

    let spaces = Spaces::new(&disc).map_err(|e| format_err(pos, format!("bad grid: {e}")))?;
    let (fields_off, list) = get("fields")?;
    let names: Vec<&str> = list.split(',').map(|f| f.split(':').next().unwrap_or("")).collect();
    let mut state = State::zeros(&spaces, names.contains(&"w"));
    state.t = real("t")?;
    let tr = LateralTransform::new(spaces.grid);
    let mut cursor = 0usize;
    for name in names {
        let target = match name {
            "u" => &mut state.u,
            "w" => state.w.as_mut().expect("allocated above"),
            "p" => &mut state.p,
            "v" => &mut state.v,
            "pf" => &mut state.pf,
            other => return Err(format_err(fields_off, format!("unknown field '{other}'"))),
        };
        let count = target.comps * spaces.grid.points() * target.nvert;
        let end = cursor + 8 * count;
        if end > payload.len() {
            return Err(format_err(pos + cursor, format!("payload too short for field '{name}'")));
        }
        let samples: Vec<f64> = payload[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *target = tr.forward(&samples, target.side, target.basis, target.comps, target.nvert)?;
        cursor = end;
    }
    if cursor != payload.len() {
        return Err(format_err(pos + cursor, "trailing payload bytes"));
    }
    Ok(Snapshot { disc, params, state })
}

pub fn write_snapshot(snap: &Snapshot, path: &Path) -> Result<()> {
    fs::write(path, encode_snapshot(snap)?)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    decode_snapshot(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SweepParam;

    #[test]
    fn empty_report_is_header_only() {
        let text = render_csv(&EnergyReport::default().to_table());
        assert_eq!(text, EnergyReport::COLUMNS.join(",") + "\n");
    }

    #[test]
    fn distance_report_round_trips() {
        let rows = (1..=3)
            .map(|i| DistanceRow {
                value: 10f64.powi(-i),
                d1: 0.1f64.powi(i) / 3.0,
                d2: 1e-300,
                d3: f64::MIN_POSITIVE,
                d4: 2.0,
                rho_kinetic_b: -0.0,
                rho_kinetic_f: 1.0 / 7.0,
                delta_term: 0.5f64.powi(i),
            })
            .collect();
        let r = DistanceReport {
            param: SweepParam::Delta,
            rows,
        };
        let back = DistanceReport::from_table(&parse_csv(&render_csv(&r.to_table())).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(parse_csv("a,b\n1,2,3\n").is_err());
        assert!(parse_csv("a,b\n1,x\n").is_err());
        assert!(parse_csv("").is_err());
    }
}
