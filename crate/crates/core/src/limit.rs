//! Singular-limit sweeps: inertia to zero at fixed damping, then damping,
//! then storage. Each member of a sweep is compared with the run in which
//! the swept parameters are exactly zero.

use rayon::prelude::*;

use crate::assembly::{Field, Spaces};
use crate::config::{RunConfig, SweepParam};
use crate::energy::EnergyForms;
use crate::error::{Error, Result};
use crate::integrator::{run, InitialData, Trajectory};
use crate::spectral::SpectralField;

/// `||grad xi||` for the fixed test displacement
/// `xi = (0, 0, sin(pi (1 - x3) / 2))` used by the damping-term diagnostic.
pub const TEST_FIELD_GRAD_NORM: f64 = std::f64::consts::PI / (2.0 * std::f64::consts::SQRT_2);

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub param: SweepParam,
    /// Strictly decreasing positive values.
    pub values: Vec<f64>,
    pub data: InitialData,
}

impl SweepSpec {
    pub fn reference(&self) -> RunConfig {
        self.member(0.0)
    }

    pub fn member(&self, value: f64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.physics = self.param.apply(cfg.physics, value);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidSweep("no sweep values".into()));
        }
        if let Some(v) = self.values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidSweep(format!("value {v} is not positive")));
        }
        if self.values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSweep("values must be strictly decreasing".into()));
        }
        if self.param == SweepParam::RhoJoint && self.base.physics.delta <= 0.0 {
            return Err(Error::OrderingViolation);
        }
        Ok(())
    }
}

/// Distances between a sweep member and the reference run, plus the sizes
/// of the terms that vanish in the limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceRow {
    pub value: f64,
    /// `sup_n ||u_a - u_b||_E`.
    pub d1: f64,
    /// `(sum_n dt ||grad (p_a - p_b)||^2)^(1/2)`.
    pub d2: f64,
    /// `(sum_n dt ||D(v_a - v_b)||^2)^(1/2)`.
    pub d3: f64,
    /// `(sum_n dt ||((v_a - v_b) - Dt (u_a - u_b)) . tau||^2_interface)^(1/2)`.
    pub d4: f64,
    /// `rho_b max_n ||Dt u||^2`.
    pub rho_kinetic_b: f64,
    /// `rho_f max_n ||v||^2`.
    pub rho_kinetic_f: f64,
    /// `delta max_n ||Dt u||_E ||grad xi||`.
    pub delta_term: f64,
}

impl DistanceRow {
    pub fn distances(&self) -> [f64; 4] {
        [self.d1, self.d2, self.d3, self.d4]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub param: SweepParam,
    pub rows: Vec<DistanceRow>,
}

impl DistanceReport {
    pub const COLUMNS: [&'static str; 8] = [
        "swept_value",
        "D1",
        "D2",
        "D3",
        "D4",
        "rho_kinetic_b",
        "rho_kinetic_f",
        "delta_term",
    ];
}

fn sub(a: &SpectralField, b: &SpectralField, scale: f64) -> SpectralField {
    let mut out = a.clone();
    for (x, y) in out.data.iter_mut().zip(&b.data) {
        *x = (*x - y) * scale;
    }
    out
}

fn check_pair(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.disc != b.disc {
        return Err(Error::GridMismatch("discretizations differ".into()));
    }
    if a.states.len() != b.states.len() {
        return Err(Error::GridMismatch(format!(
            "{} states against {}",
            a.states.len(),
            b.states.len()
        )));
    }
    if a.states.is_empty() {
        return Err(Error::GridMismatch("empty trajectory".into()));
    }
    Ok(())
}

/// The four distances between two trajectories on the same grid, with the
/// energy norm taken from the Lame parameters of `a`. The vanishing-term
/// fields describe `a`; `value` is left at 0 for the caller.
pub fn trajectory_distance(a: &Trajectory, b: &Trajectory) -> Result<DistanceRow> {
    check_pair(a, b)?;
    let spaces = Spaces::new(&a.disc)?;
    let forms = EnergyForms::new(&spaces);
    let p = &a.params;
    let dt = a.disc.dt;
    let n = a.states.len();
    let du: Vec<SpectralField> = (0..n).map(|i| sub(&a.states[i].u, &b.states[i].u, 1.0)).collect();
    let d1 = du
        .iter()
        .map(|d| forms.energy_norm_sq(p, d).sqrt())
        .fold(0.0, f64::max);
    let mut s2 = Vec::with_capacity(n);
    let mut s3 = Vec::with_capacity(n);
    let mut s4 = Vec::with_capacity(n);
    for i in 1..n {
        let (sa, sb) = (&a.states[i], &b.states[i]);
        s2.push(dt * forms.grad_norm_sq(&sub(&sa.p, &sb.p, 1.0)));
        let dv = sub(&sa.v, &sb.v, 1.0);
        s3.push(dt * forms.sym_grad_norm_sq(&dv));
        let rate = sub(&du[i], &du[i - 1], 1.0 / dt);
        s4.push(dt * slip_sq(&forms, &dv, &rate));
    }
    let total = |v: &[f64]| crate::energy::tree_sum(v).sqrt();
    let vanishing = vanishing_terms(&forms, a);
    Ok(DistanceRow {
        value: 0.0,
        d1,
        d2: total(&s2),
        d3: total(&s3),
        d4: total(&s4),
        rho_kinetic_b: vanishing.0,
        rho_kinetic_f: vanishing.1,
        delta_term: vanishing.2,
    })
}

// Interface norm squared of the tangential part of `v - r`.
fn slip_sq(forms: &EnergyForms, v: &SpectralField, r: &SpectralField) -> f64 {
    let g = forms.spaces.grid;
    let l = &forms.spaces.layout;
    let (iv, iu) = (l.interface_node(Field::V), l.interface_node(Field::U));
    let parts: Vec<f64> = (0..g.mode_count())
        .map(|slot| {
            let w = g.weight(g.mode(slot));
            w * (0..2)
                .map(|j| (v.profile(j, slot)[iv] - r.profile(j, slot)[iu]).norm_sqr())
                .sum::<f64>()
        })
        .collect();
    crate::energy::tree_sum(&parts)
}

fn vanishing_terms(forms: &EnergyForms, t: &Trajectory) -> (f64, f64, f64) {
    let p = &t.params;
    let dt = t.disc.dt;
    let mut kin_b: f64 = 0.0;
    let mut kin_f: f64 = 0.0;
    let mut rate_e: f64 = 0.0;
    for (i, s) in t.states.iter().enumerate() {
        if p.rho_f > 0.0 {
            kin_f = kin_f.max(forms.l2_norm_sq(Field::V, &s.v));
        }
        if i == 0 {
            continue;
        }
        let rate = sub(&s.u, &t.states[i - 1].u, 1.0 / dt);
        if p.rho_b > 0.0 {
            kin_b = kin_b.max(forms.l2_norm_sq(Field::U, &rate));
        }
        if p.delta > 0.0 {
            rate_e = rate_e.max(forms.energy_norm_sq(p, &rate));
        }
    }
    (
        p.rho_b * kin_b,
        p.rho_f * kin_f,
        p.delta * rate_e.sqrt() * TEST_FIELD_GRAD_NORM,
    )
}

/// Runs the reference and every member from the same data and sources and
/// reports member-to-reference distances in sweep order.
pub fn run_sweep(spec: &SweepSpec) -> Result<DistanceReport> {
    spec.validate()?;
    let mut cfgs = vec![spec.reference()];
    cfgs.extend(spec.values.iter().map(|&v| spec.member(v)));
    let mut runs: Vec<Trajectory> = cfgs
        .par_iter()
        .map(|c| run(c, &spec.data))
        .collect::<Result<_>>()?;
    let reference = runs.remove(0);
    let rows = runs
        .par_iter()
        .zip(&spec.values)
        .map(|(t, &value)| {
            trajectory_distance(t, &reference).map(|mut r| {
                r.value = value;
                r
            })
        })
        .collect::<Result<_>>()?;
    Ok(DistanceReport { param: spec.param, rows })
}

/// Least-squares slope of `log y` against `log x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
    /// The data do not look like a clean power law: the residual is not
    /// small compared to the slope.
    pub suspect: bool,
}

pub fn fit_power_law(x: &[f64], y: &[f64]) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            found: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let residual = (pts
        .iter()
        .map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(RateFit {
        slope,
        residual,
        suspect: residual >= 0.1 * slope.abs(),
    })
}

/// Log-log slopes of D1..D4 and of the damping term against the swept value.
pub fn estimate_rate(report: &DistanceReport) -> Result<[RateFit; 5]> {
    let x: Vec<f64> = report.rows.iter().map(|r| r.value).collect();
    let col = |f: &dyn Fn(&DistanceRow) -> f64| -> Result<RateFit> {
        let y: Vec<f64> = report.rows.iter().map(f).collect();
        fit_power_law(&x, &y)
    };
    Ok([
        col(&|r| r.d1)?,
        col(&|r| r.d2)?,
        col(&|r| r.d3)?,
        col(&|r| r.d4)?,
        if report.rows.iter().all(|r| r.delta_term > 0.0) {
            col(&|r| r.delta_term)?
        } else {
            RateFit {
                slope: f64::NAN,
                residual: f64::NAN,
                suspect: true,
            }
        },
    ])
}
