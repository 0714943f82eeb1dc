//! Manufactured solutions and convergence studies.
//!
//! A case prescribes closed-form fields. The volumetric sources follow by
//! exact differentiation of the governing equations and the interface
//! conditions are carried as defect data `g1..g4` wherever the fields do
//! not satisfy them.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::assembly::{Field, InterfaceDefects, ModeSources, Spaces, TimeStep};
use crate::config::expr::Var;
use crate::config::{Discretization, Expr, PhysicalParams, SourceSpec, SourceTerm};
use crate::energy::{interface_residual_modes, tree_sum, EnergyForms};
use crate::error::{Error, Result};
use crate::greens::reconstruct_fluid_pressure;
use crate::integrator::{SourceSampler, State, Stepper};
use crate::limit::{fit_power_law, RateFit};
use crate::mesh::{Basis, BoxSide};
use crate::spectral::{wavenumber, LateralTransform, ModeIndex, SpectralField};

type C = num_complex::Complex64;

const SPACE: [Var; 3] = [Var::X1, Var::X2, Var::X3];

/// Closed-form fields of a manufactured solution.
#[derive(Debug, Clone, PartialEq)]
pub struct ManufacturedCase {
    pub name: String,
    pub mode: ModeIndex,
    pub u: [Expr; 3],
    pub p: Expr,
    pub v: [Expr; 3],
    pub pf: Expr,
    /// Solve the steady problem; time derivatives are dropped.
    pub steady: bool,
}

/// Time factor shared by every field of a single-mode case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeProfile {
    Steady,
    Linear,
    Decay,
    Oscillating,
}

impl TimeProfile {
    fn expr(self) -> Expr {
        let t = Expr::var(Var::T);
        match self {
            TimeProfile::Steady => Expr::num(1.0),
            TimeProfile::Linear => Expr::num(1.0) + t,
            TimeProfile::Decay => (-t).exp(),
            TimeProfile::Oscillating => (2.0 * t).cos(),
        }
    }
}

/// Vertical profiles: low-degree polynomials that the elements reproduce
/// exactly, or smooth trigonometric and exponential ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerticalProfile {
    Polynomial,
    Smooth,
}

struct Profiles {
    u3: Expr,
    uh: Expr,
    p: Expr,
    psi: Expr,
    pf: Expr,
}

fn profiles(space: VerticalProfile) -> Profiles {
    let x3 = || Expr::var(Var::X3);
    let one = || Expr::num(1.0);
    match space {
        VerticalProfile::Polynomial => Profiles {
            u3: one() - x3().powi(2),
            uh: (one() - x3()) * (Expr::num(0.5) + x3()),
            p: one() - x3(),
            psi: (one() + x3()).powi(2),
            pf: Expr::num(0.5) + x3(),
        },
        VerticalProfile::Smooth => Profiles {
            u3: (Expr::num(PI / 2.0) * (one() - x3())).sin(),
            uh: (one() - x3()) * x3().exp(),
            p: (Expr::num(PI / 2.0) * x3()).cos(),
            psi: one() - (Expr::num(PI) * (one() + x3())).cos(),
            pf: x3().exp(),
        },
    }
}

// Tangential amplitudes of the horizontal displacement.
const UH: [f64; 2] = [0.5, -0.3];

fn phase(m: ModeIndex) -> Expr {
    Expr::num(2.0 * PI * m.k1 as f64) * Expr::var(Var::X1) + Expr::num(2.0 * PI * m.k2 as f64) * Expr::var(Var::X2)
}

impl ManufacturedCase {
    /// All fields zero.
    pub fn zero() -> Self {
        let z = || Expr::num(0.0);
        ManufacturedCase {
            name: "zero".into(),
            mode: ModeIndex::ZERO,
            u: [z(), z(), z()],
            p: z(),
            v: [z(), z(), z()],
            pf: z(),
            steady: true,
        }
    }

    /// One lateral mode: `u3, p, v3, pf` carry `cos`, the horizontal
    /// components carry `sin` of the phase. The fluid velocity is
    /// `v3 = psi cos`, `v_j = -(2 pi k_j / kappa^2) psi' sin`, so exactly
    /// divergence free; for the zero mode `v3 = 0` and `v_j = a_j psi`.
    pub fn single_mode(m: ModeIndex, space: VerticalProfile, time: TimeProfile) -> Self {
        let pr = profiles(space);
        let tau = time.expr();
        let kappa = wavenumber(m);
        let (cos, sin) = if kappa == 0.0 {
            (Expr::num(1.0), Expr::num(1.0))
        } else {
            (phase(m).cos(), phase(m).sin())
        };
        let lat = |e: Expr, f: &Expr| e * f.clone() * tau.clone();
        let dpsi = pr.psi.derivative(Var::X3).expect("polynomial and trigonometric profiles");
        let (v, v3) = if kappa == 0.0 {
            (
                [UH[0] * pr.psi.clone(), UH[1] * pr.psi.clone()],
                Expr::num(0.0),
            )
        } else {
            let a = |k: i64| -2.0 * PI * k as f64 / (kappa * kappa);
            (
                [a(m.k1) * dpsi.clone(), a(m.k2) * dpsi.clone()],
                pr.psi.clone(),
            )
        };
        ManufacturedCase {
            name: format!("mode({},{}) {:?} {:?}", m.k1, m.k2, space, time).to_lowercase(),
            mode: m,
            u: [
                lat(UH[0] * pr.uh.clone(), &sin),
                lat(UH[1] * pr.uh.clone(), &sin),
                lat(pr.u3, &cos),
            ],
            p: lat(pr.p, &cos),
            v: [lat(v[0].clone(), &sin), lat(v[1].clone(), &sin), lat(v3, &cos)],
            pf: lat(pr.pf, &cos),
            steady: time == TimeProfile::Steady,
        }
    }

    /// Laterally constant fields, linear in time, that satisfy every
    /// interface condition exactly for the given coefficients.
    pub fn compatible(p: &PhysicalParams) -> Self {
        let x3 = || Expr::var(Var::X3);
        let t = Expr::var(Var::T);
        let one = || Expr::num(1.0);
        let c = 1.0;
        let e = -(p.nu + p.beta) / (2.0 * p.nu + p.beta);
        let f = -p.nu * (1.0 + 2.0 * e) / p.mu;
        let slope = (p.alpha - 1.0) * c / (2.0 * p.mu + p.lambda);
        let z = || Expr::num(0.0);
        ManufacturedCase {
            name: "compatible".into(),
            mode: ModeIndex::ZERO,
            u: [
                f * (one() - x3()),
                z(),
                t * (-p.k_perm * c * (one() - x3().powi(2))) + slope * (x3() - one()),
            ],
            p: c * (one() - x3()),
            v: [(one() + x3()) + e * (one() + x3()).powi(2), z(), z()],
            pf: Expr::num(c) + x3(),
            steady: false,
        }
    }

    /// Steady smooth case whose fluid pressure is harmonic and carries the
    /// boundary data of the pressure reconstruction: `pf(0) = p(0) +
    /// 2 nu v3'(0)` and `pf'(-1) = nu lap v3(-1)`, so the fluid force is
    /// solenoidal.
    pub fn reconstruction(m: ModeIndex, p: &PhysicalParams) -> Result<Self> {
        let kappa = wavenumber(m);
        if kappa == 0.0 {
            return Err(Error::violation("mode", 0.0));
        }
        let mut case = ManufacturedCase::single_mode(m, VerticalProfile::Smooth, TimeProfile::Steady);
        let pr = profiles(VerticalProfile::Smooth);
        let at = |e: &Expr, x3: f64| e.eval([0.0, 0.0, x3], 0.0);
        let dpsi = pr.psi.derivative(Var::X3).expect("smooth");
        let ddpsi = dpsi.derivative(Var::X3).expect("smooth");
        let top = at(&pr.p, 0.0) + 2.0 * p.nu * at(&dpsi, 0.0);
        let flux = p.nu * (at(&ddpsi, -1.0) - kappa * kappa * at(&pr.psi, -1.0));
        let ek = (-kappa).exp();
        let a = (top + flux / kappa * ek) / (1.0 + ek * ek);
        let b = a * ek - flux / kappa;
        let x3 = || Expr::var(Var::X3);
        let profile = a * (kappa * x3()).exp() + b * (Expr::num(-kappa) * (x3() + Expr::num(1.0))).exp();
        case.pf = profile * phase(m).cos();
        case.name = format!("reconstruction mode({},{})", m.k1, m.k2);
        Ok(case)
    }
}

/// Interface defects as functions of `(x1, x2, t)`, evaluated on x3 = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectExprs {
    pub g1: Expr,
    pub g2: [Expr; 2],
    pub g3: [Expr; 3],
    pub g4: Expr,
}

/// Sources and interface defects of a manufactured case.
#[derive(Debug, Clone)]
pub struct ManufacturedData {
    pub body_force: [Expr; 3],
    pub mass_source: Expr,
    pub fluid_force: [Expr; 3],
    /// `None` solves without defect terms.
    pub defects: Option<DefectExprs>,
}

impl ManufacturedData {
    pub fn source_spec(&self) -> SourceSpec {
        let term = |e: &Expr| SourceTerm::Expr(e.clone());
        SourceSpec {
            body_force: [term(&self.body_force[0]), term(&self.body_force[1]), term(&self.body_force[2])],
            mass_source: term(&self.mass_source),
            fluid_force: [term(&self.fluid_force[0]), term(&self.fluid_force[1]), term(&self.fluid_force[2])],
        }
    }
}

fn d(e: &Expr, v: Var) -> Result<Expr> {
    e.derivative(v).ok_or_else(|| Error::NotDifferentiable(e.to_string()))
}

fn grad_matrix(f: &[Expr; 3]) -> Result<[[Expr; 3]; 3]> {
    let mut g: [[Expr; 3]; 3] = Default::default();
    for i in 0..3 {
        for j in 0..3 {
            g[i][j] = d(&f[i], SPACE[j])?;
        }
    }
    Ok(g)
}

// `a (G + G^T) + b tr(G) I - q I`.
fn stress(g: &[[Expr; 3]; 3], a: f64, b: f64, q: &Expr) -> [[Expr; 3]; 3] {
    let tr = g[0][0].clone() + g[1][1].clone() + g[2][2].clone();
    let mut s: [[Expr; 3]; 3] = Default::default();
    for i in 0..3 {
        for j in 0..3 {
            let mut e = a * (g[i][j].clone() + g[j][i].clone());
            if i == j {
                e = e + b * tr.clone() - q.clone();
            }
            s[i][j] = e;
        }
    }
    s
}

fn divergence_rows(s: &[[Expr; 3]; 3]) -> Result<[Expr; 3]> {
    let mut out: [Expr; 3] = Default::default();
    for i in 0..3 {
        let mut acc = Expr::num(0.0);
        for j in 0..3 {
            acc = acc + d(&s[i][j], SPACE[j])?;
        }
        out[i] = acc;
    }
    Ok(out)
}

fn check_divergence_free(case: &ManufacturedCase) -> Result<()> {
    let div: Vec<Expr> = (0..3).map(|k| d(&case.v[k], SPACE[k])).collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    let mut scale = 1.0f64;
    for a in 0..5 {
        for b in 0..5 {
            for c in 0..5 {
                let x = [a as f64 / 5.0 + 0.03, b as f64 / 5.0 + 0.07, -(c as f64) / 4.0];
                for t in [0.0, 0.7] {
                    worst = worst.max(div.iter().map(|e| e.eval(x, t)).sum::<f64>().abs());
                    scale = scale.max(case.v.iter().map(|e| e.eval(x, t).abs()).fold(0.0, f64::max));
                }
            }
        }
    }
    if worst > 1e-10 * scale {
        return Err(Error::NotDivergenceFree(worst));
    }
    Ok(())
}

/// Differentiates the fields through the momentum, fluid-content and
/// Stokes equations and evaluates the interface defects.
pub fn manufacture_sources(case: &ManufacturedCase, p: &PhysicalParams) -> Result<ManufacturedData> {
    check_divergence_free(case)?;
    let dt = |e: &Expr| -> Result<Expr> {
        if case.steady {
            Ok(Expr::num(0.0))
        } else {
            d(e, Var::T)
        }
    };
    let ut: [Expr; 3] = [dt(&case.u[0])?, dt(&case.u[1])?, dt(&case.u[2])?];
    let utt: [Expr; 3] = [dt(&ut[0])?, dt(&ut[1])?, dt(&ut[2])?];
    let vt: [Expr; 3] = [dt(&case.v[0])?, dt(&case.v[1])?, dt(&case.v[2])?];
    let damped: [Expr; 3] = std::array::from_fn(|k| case.u[k].clone() + p.delta * ut[k].clone());

    let sigma_b = stress(&grad_matrix(&damped)?, p.mu, p.lambda, &(p.alpha * case.p.clone()));
    let sigma_f = stress(&grad_matrix(&case.v)?, p.nu, 0.0, &case.pf);
    let div_b = divergence_rows(&sigma_b)?;
    let div_f = divergence_rows(&sigma_f)?;

    let body_force = std::array::from_fn(|k| p.rho_b * utt[k].clone() - div_b[k].clone());
    let fluid_force = std::array::from_fn(|k| p.rho_f * vt[k].clone() - div_f[k].clone());
    let mut lap = Expr::num(0.0);
    let mut div_ut = Expr::num(0.0);
    for j in 0..3 {
        lap = lap + d(&d(&case.p, SPACE[j])?, SPACE[j])?;
        div_ut = div_ut + d(&ut[j], SPACE[j])?;
    }
    let mass_source = p.c0 * dt(&case.p)? + p.alpha * div_ut - p.k_perm * lap;

    let slip = |j: usize| p.beta * (case.v[j].clone() - ut[j].clone());
    let defects = DefectExprs {
        g1: -p.k_perm * d(&case.p, Var::X3)? - (case.v[2].clone() - ut[2].clone()),
        g2: [sigma_f[0][2].clone() + slip(0), sigma_f[1][2].clone() + slip(1)],
        g3: std::array::from_fn(|i| sigma_f[i][2].clone() - sigma_b[i][2].clone()),
        g4: case.p.clone() + 2.0 * p.nu * d(&case.v[2], Var::X3)? - case.pf.clone(),
    };
    Ok(ManufacturedData {
        body_force,
        mass_source,
        fluid_force,
        defects: Some(defects),
    })
}

/// Per-slot defect values at time `t`.
pub fn defects_at(spaces: &Spaces, g: &DefectExprs, t: f64) -> Result<Vec<InterfaceDefects>> {
    let exprs: Vec<&Expr> = std::iter::once(&g.g1)
        .chain(&g.g2)
        .chain(&g.g3)
        .chain(std::iter::once(&g.g4))
        .collect();
    let grid = spaces.grid;
    let mut samples = Vec::with_capacity(exprs.len() * grid.points());
    for e in &exprs {
        for i1 in 0..grid.n1 {
            for i2 in 0..grid.n2 {
                samples.push(e.eval([i1 as f64 / grid.n1 as f64, i2 as f64 / grid.n2 as f64, 0.0], t));
            }
        }
    }
    let f = LateralTransform::new(grid).forward(&samples, BoxSide::Biot, Basis::Linear, exprs.len(), 1)?;
    Ok((0..grid.mode_count())
        .map(|slot| {
            let v = |k: usize| f.profile(k, slot)[0];
            InterfaceDefects {
                g1: v(0),
                g2: [v(1), v(2)],
                g3: [v(3), v(4), v(5)],
                g4: v(6),
            }
        })
        .collect())
}

fn sample_exprs(spaces: &Spaces, exprs: &[Expr], heights: &[f64], t: f64) -> Vec<f64> {
    let grid = spaces.grid;
    let mut out = Vec::with_capacity(exprs.len() * grid.points() * heights.len());
    for e in exprs {
        for i1 in 0..grid.n1 {
            for i2 in 0..grid.n2 {
                let (x1, x2) = (i1 as f64 / grid.n1 as f64, i2 as f64 / grid.n2 as f64);
                out.extend(heights.iter().map(|&x3| e.eval([x1, x2, x3], t)));
            }
        }
    }
    out
}

fn transform_at(spaces: &Spaces, f: Field, exprs: &[Expr], heights: &[f64], t: f64) -> Result<SpectralField> {
    LateralTransform::new(spaces.grid).forward(
        &sample_exprs(spaces, exprs, heights, t),
        f.side(),
        f.basis(),
        exprs.len(),
        heights.len(),
    )
}

fn nodal(spaces: &Spaces, f: Field, exprs: &[Expr], t: f64) -> Result<SpectralField> {
    let heights = spaces.meshes.side(f.side()).nodes(f.basis());
    transform_at(spaces, f, exprs, &heights, t)
}

/// Nodal interpolant of the manufactured fields at time `t`; `w` holds
/// the interpolated velocity of the displacement.
pub fn exact_state(case: &ManufacturedCase, spaces: &Spaces, p: &PhysicalParams, t: f64) -> Result<State> {
    let mut s = State::zeros(spaces, p.rho_b > 0.0);
    s.t = t;
    s.u = nodal(spaces, Field::U, &case.u, t)?;
    if s.w.is_some() && !case.steady {
        let ut: Vec<Expr> = case.u.iter().map(|e| d(e, Var::T)).collect::<Result<_>>()?;
        s.w = Some(nodal(spaces, Field::U, &ut, t)?);
    }
    s.p = nodal(spaces, Field::P, std::slice::from_ref(&case.p), t)?;
    s.v = nodal(spaces, Field::V, &case.v, t)?;
    s.pf = nodal(spaces, Field::Pf, std::slice::from_ref(&case.pf), t)?;
    Ok(s)
}

/// Errors of a discrete state against the manufactured fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldErrors {
    /// `||u - u*||_E`.
    pub u_energy: f64,
    pub p_h1: f64,
    pub v_h1: f64,
    pub pf_l2: f64,
}

// Gauss-quadrature sum over all slots of `reduce(values, gradients)` for
// the error of one field; gradient rows are `[d1, d2, d3]` per component.
fn error_sum(
    spaces: &Spaces,
    f: Field,
    discrete: &SpectralField,
    exact: &[Expr],
    t: f64,
    reduce: impl Fn(&[C], &[[C; 3]]) -> f64 + Sync,
) -> Result<f64> {
    let mesh = spaces.meshes.side(f.side());
    let quad = mesh.quadrature();
    let heights: Vec<f64> = quad.iter().map(|q| q.0).collect();
    let dx3: Vec<Expr> = exact.iter().map(|e| d(e, Var::X3)).collect::<Result<_>>()?;
    let vals = transform_at(spaces, f, exact, &heights, t)?;
    let ders = transform_at(spaces, f, &dx3, &heights, t)?;
    let grid = spaces.grid;
    let comps = exact.len();
    let parts: Vec<f64> = (0..grid.mode_count())
        .into_par_iter()
        .map(|slot| {
            let m = grid.mode(slot);
            let sym = grid.symbols(m);
            let mut acc = 0.0;
            let mut e = vec![C::default(); comps];
            let mut g = vec![[C::default(); 3]; comps];
            for (q, &(x, w)) in quad.iter().enumerate() {
                for c in 0..comps {
                    let prof = discrete.profile(c, slot);
                    e[c] = mesh.eval(f.basis(), prof, x, 0) - vals.profile(c, slot)[q];
                    let d3 = mesh.eval(f.basis(), prof, x, 1) - ders.profile(c, slot)[q];
                    g[c] = [C::new(0.0, sym[0]) * e[c], C::new(0.0, sym[1]) * e[c], d3];
                }
                acc += w * reduce(&e, &g);
            }
            grid.weight(m) * acc
        })
        .collect();
    Ok(tree_sum(&parts).max(0.0))
}

fn h1(e: &[C], g: &[[C; 3]]) -> f64 {
    e.iter().map(|z| z.norm_sqr()).sum::<f64>() + g.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>()
}

/// Energy norm of `u - u*`, full H1 norms of the pressure and velocity
/// errors and the L2 norm of the fluid pressure error.
pub fn field_errors(spaces: &Spaces, p: &PhysicalParams, s: &State, case: &ManufacturedCase) -> Result<FieldErrors> {
    let (mu, lam) = (p.mu, p.lambda);
    let energy = move |_: &[C], g: &[[C; 3]]| {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += 2.0 * mu * (0.5 * (g[i][j] + g[j][i])).norm_sqr();
            }
        }
        acc + lam * (g[0][0] + g[1][1] + g[2][2]).norm_sqr()
    };
    let t = s.t;
    Ok(FieldErrors {
        u_energy: error_sum(spaces, Field::U, &s.u, &case.u, t, energy)?.sqrt(),
        p_h1: error_sum(spaces, Field::P, &s.p, std::slice::from_ref(&case.p), t, h1)?.sqrt(),
        v_h1: error_sum(spaces, Field::V, &s.v, &case.v, t, h1)?.sqrt(),
        pf_l2: error_sum(spaces, Field::Pf, &s.pf, std::slice::from_ref(&case.pf), t, |e, _| e[0].norm_sqr())?
            .sqrt(),
    })
}

/// `||pi - pf||` in L2 of the fluid box, where `pi` is the fluid pressure
/// rebuilt from the pore-pressure trace and the fluid velocity by the
/// harmonic extensions.
pub fn reconstruction_error(spaces: &Spaces, p: &PhysicalParams, s: &State) -> Result<f64> {
    let grid = spaces.grid;
    let mesh = &spaces.meshes.fluid;
    let quad = mesh.quadrature();
    let parts = (0..grid.mode_count())
        .map(|slot| {
            let m = grid.mode(slot);
            let pi = reconstruct_fluid_pressure(m, s.p.profile(0, slot)[0], s.v.profile(2, slot), mesh, p)?;
            let pf = s.pf.profile(0, slot);
            let acc: f64 = quad
                .iter()
                .map(|&(x, w)| w * (pi.eval(x) - mesh.eval(Basis::Linear, pf, x, 0)).norm_sqr())
                .sum();
            Ok(grid.weight(m) * acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(tree_sum(&parts).max(0.0).sqrt())
}

/// Outcome of one manufactured solve.
#[derive(Debug, Clone)]
pub struct CaseRun {
    /// State before the last step (equal to `last` for steady cases).
    pub prev: State,
    pub last: State,
    pub errors: FieldErrors,
    /// Norms of the discrete interface residuals minus the defects, for
    /// mass conservation, tangential slip and normal stress.
    pub interface: [f64; 3],
    pub reconstruction: f64,
}

fn with_defects(sources: &mut [ModeSources], defects: Option<&Vec<InterfaceDefects>>) {
    if let Some(g) = defects {
        for (src, g) in sources.iter_mut().zip(g) {
            src.defects = Some(*g);
        }
    }
}

/// Solves a manufactured case: the steady problem once, or implicit steps
/// from the interpolated fields at t = 0 up to `disc.t_end`.
pub fn solve_manufactured(
    case: &ManufacturedCase,
    data: &ManufacturedData,
    p: &PhysicalParams,
    disc: &Discretization,
) -> Result<CaseRun> {
    let spaces = Spaces::new(disc)?;
    let sampler = SourceSampler::new(&spaces, &data.source_spec());
    let defects = |t: f64| data.defects.as_ref().map(|g| defects_at(&spaces, g, t)).transpose();
    let (prev, last, dt) = if case.steady {
        let stepper = Stepper::new(&spaces, p, TimeStep::Steady)?;
        let mut src = sampler.at(0.0, 0)?;
        with_defects(&mut src, defects(0.0)?.as_ref());
        let s = stepper.advance(&State::zeros(&spaces, p.rho_b > 0.0), &src)?;
        (s.clone(), s, 0.0)
    } else {
        let stepper = Stepper::new(&spaces, p, TimeStep::Implicit(disc.dt))?;
        let steps = disc.step_count()?;
        let mut prev = exact_state(case, &spaces, p, 0.0)?;
        let mut last = prev.clone();
        for n in 0..steps {
            let t = (n + 1) as f64 * disc.dt;
            let mut src = sampler.at(t, n + 1)?;
            with_defects(&mut src, defects(t)?.as_ref());
            let mut next = stepper.advance(&last, &src)?;
            next.t = t;
            prev = std::mem::replace(&mut last, next);
        }
        (prev, last, disc.dt)
    };

    let forms = EnergyForms::new(&spaces);
    let resid = interface_residual_modes(&forms, &prev, &last, p, dt);
    let g = match &data.defects {
        Some(g) => defects_at(&spaces, g, last.t)?,
        None => vec![InterfaceDefects::default(); spaces.grid.mode_count()],
    };
    let norm = |f: &(dyn Fn(&[C; 4], &InterfaceDefects) -> f64 + Sync)| {
        forms.parseval(|slot| f(&resid[slot], &g[slot])).max(0.0).sqrt()
    };
    let interface = [
        norm(&|r, g| (r[0] - g.g1).norm_sqr()),
        norm(&|r, g| (r[1] - g.g2[0]).norm_sqr() + (r[2] - g.g2[1]).norm_sqr()),
        norm(&|r, g| (r[3] - g.g4).norm_sqr()),
    ];
    Ok(CaseRun {
        errors: field_errors(&spaces, p, &last, case)?,
        reconstruction: reconstruction_error(&spaces, p, &last)?,
        prev,
        last,
        interface,
    })
}

/// Which discretization parameter a study refines.
#[derive(Debug, Clone, PartialEq)]
pub enum Refinement {
    /// `nb = nf = cells` per level at a fixed step.
    Vertical { cells: Vec<usize>, dt: f64 },
    /// Step sizes per level on a fixed vertical mesh.
    Temporal { cells: usize, dts: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct StudySpec {
    pub case: ManufacturedCase,
    pub params: PhysicalParams,
    /// Lateral samples per direction.
    pub lateral: usize,
    pub t_end: f64,
    pub refinement: Refinement,
}

/// Errors of one refinement level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelErrors {
    pub h: f64,
    pub dt: f64,
    /// In the order of [`ConvergenceReport::COLUMNS`] after `h` and `dt`.
    pub values: [f64; 8],
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub case: String,
    pub refinement: Refinement,
    pub levels: Vec<LevelErrors>,
    /// Observed orders against the refined parameter; `None` when fewer
    /// than three levels have a nonzero error.
    pub orders: [Option<RateFit>; 8],
}

impl ConvergenceReport {
    pub const COLUMNS: [&'static str; 10] = [
        "h",
        "dt",
        "u_energy",
        "p_h1",
        "v_h1",
        "pf_l2",
        "reconstruction",
        "ic1",
        "ic2",
        "ic4",
    ];

    /// Observed order of a named error column.
    pub fn order(&self, column: &str) -> Option<RateFit> {
        let i = Self::COLUMNS[2..].iter().position(|c| *c == column)?;
        self.orders[i]
    }
}

/// Runs every level of a study concurrently and fits the orders.
pub fn convergence_study(spec: &StudySpec) -> Result<ConvergenceReport> {
    let levels: Vec<(usize, f64)> = match &spec.refinement {
        Refinement::Vertical { cells, dt } => cells.iter().map(|&c| (c, *dt)).collect(),
        Refinement::Temporal { cells, dts } => dts.iter().map(|&dt| (*cells, dt)).collect(),
    };
    if levels.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            found: levels.len(),
        });
    }
    let data = manufacture_sources(&spec.case, &spec.params)?;
    let rows: Vec<LevelErrors> = levels
        .par_iter()
        .map(|&(cells, dt)| {
            let disc = Discretization {
                n1: spec.lateral,
                n2: spec.lateral,
                nb: cells,
                nf: cells,
                dt,
                t_end: spec.t_end,
            }
            .validate()?;
            let run = solve_manufactured(&spec.case, &data, &spec.params, &disc)?;
            let e = run.errors;
            Ok(LevelErrors {
                h: 1.0 / cells as f64,
                dt,
                values: [
                    e.u_energy,
                    e.p_h1,
                    e.v_h1,
                    e.pf_l2,
                    run.reconstruction,
                    run.interface[0],
                    run.interface[1],
                    run.interface[2],
                ],
            })
        })
        .collect::<Result<_>>()?;
    let x: Vec<f64> = rows
        .iter()
        .map(|r| match spec.refinement {
            Refinement::Vertical { .. } => r.h,
            Refinement::Temporal { .. } => r.dt,
        })
        .collect();
    let orders = std::array::from_fn(|k| {
        let y: Vec<f64> = rows.iter().map(|r| r.values[k]).collect();
        fit_power_law(&x, &y).ok()
    });
    Ok(ConvergenceReport {
        case: spec.case.name.clone(),
        refinement: spec.refinement.clone(),
        levels: rows,
        orders,
    })
}

/// The stock studies: vertical refinement of a steady and a time-dependent
/// smooth case, time refinement of a polynomial case and vertical
/// refinement of the pressure reconstruction.
pub fn standard_studies(params: &PhysicalParams) -> Result<Vec<StudySpec>> {
    let study = |case, t_end, refinement| StudySpec {
        case,
        params: *params,
        lateral: 4,
        t_end,
        refinement,
    };
    let cells = vec![4, 8, 16];
    Ok(vec![
        study(
            ManufacturedCase::single_mode(ModeIndex::new(1, 0), VerticalProfile::Smooth, TimeProfile::Steady),
            0.1,
            Refinement::Vertical { cells: cells.clone(), dt: 0.1 },
        ),
        study(
            ManufacturedCase::single_mode(ModeIndex::new(1, 1), VerticalProfile::Smooth, TimeProfile::Linear),
            0.5,
            Refinement::Vertical { cells: cells.clone(), dt: 0.125 },
        ),
        study(
            ManufacturedCase::single_mode(ModeIndex::new(1, 0), VerticalProfile::Polynomial, TimeProfile::Decay),
            0.5,
            Refinement::Temporal {
                cells: 4,
                dts: vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0],
            },
        ),
        study(
            ManufacturedCase::reconstruction(ModeIndex::new(1, 0), params)?,
            0.1,
            Refinement::Vertical { cells, dt: 0.1 },
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(cells: usize, dt: f64, t_end: f64) -> Discretization {
        Discretization {
            n1: 4,
            n2: 4,
            nb: cells,
            nf: cells,
            dt,
            t_end,
        }
    }

    #[test]
    fn zero_case_has_zero_data() {
        let data = manufacture_sources(&ManufacturedCase::zero(), &PhysicalParams::unit()).unwrap();
        assert!(data.body_force.iter().chain(&data.fluid_force).all(Expr::is_zero));
        assert!(data.mass_source.is_zero());
        let g = data.defects.unwrap();
        assert!(g.g1.is_zero() && g.g4.is_zero());
        assert!(g.g2.iter().chain(&g.g3).all(Expr::is_zero));
    }

    #[test]
    fn single_mode_velocity_is_solenoidal() {
        for m in [ModeIndex::ZERO, ModeIndex::new(1, 0), ModeIndex::new(1, -1)] {
            for space in [VerticalProfile::Polynomial, VerticalProfile::Smooth] {
                let case = ManufacturedCase::single_mode(m, space, TimeProfile::Decay);
                check_divergence_free(&case).unwrap();
            }
        }
    }

    #[test]
    fn compressible_velocity_rejected() {
        let mut case = ManufacturedCase::zero();
        case.v[2] = Expr::var(Var::X3) + Expr::num(1.0);
        assert!(matches!(
            manufacture_sources(&case, &PhysicalParams::unit()),
            Err(Error::NotDivergenceFree(_))
        ));
    }

    #[test]
    fn variable_exponent_is_not_differentiable() {
        let mut case = ManufacturedCase::zero();
        case.p = Expr::parse("2^x3").unwrap();
        assert!(matches!(
            manufacture_sources(&case, &PhysicalParams::unit()),
            Err(Error::NotDifferentiable(_))
        ));
    }

    #[test]
    fn polynomial_steady_case_is_reproduced() {
        let p = PhysicalParams::unit();
        let case = ManufacturedCase::single_mode(ModeIndex::new(1, 0), VerticalProfile::Polynomial, TimeProfile::Steady);
        let data = manufacture_sources(&case, &p).unwrap();
        let run = solve_manufactured(&case, &data, &p, &disc(3, 0.1, 0.1)).unwrap();
        let e = run.errors;
        for x in [e.u_energy, e.p_h1, e.v_h1, e.pf_l2] {
            assert!(x < 1e-9, "{e:?}");
        }
        assert!(run.interface.iter().all(|r| *r < 1e-9), "{:?}", run.interface);
    }

    #[test]
    fn exact_state_has_no_error() {
        let p = PhysicalParams::unit();
        let case = ManufacturedCase::single_mode(ModeIndex::new(1, 1), VerticalProfile::Polynomial, TimeProfile::Decay);
        let sp = Spaces::new(&disc(2, 0.1, 0.1)).unwrap();
        let s = exact_state(&case, &sp, &p, 0.3).unwrap();
        let e = field_errors(&sp, &p, &s, &case).unwrap();
        assert!(e.u_energy < 1e-12 && e.p_h1 < 1e-12 && e.v_h1 < 1e-12 && e.pf_l2 < 1e-12, "{e:?}");
    }

    #[test]
    fn too_few_levels_rejected() {
        let spec = StudySpec {
            case: ManufacturedCase::zero(),
            params: PhysicalParams::unit(),
            lateral: 4,
            t_end: 0.1,
            refinement: Refinement::Vertical { cells: vec![2, 4], dt: 0.1 },
        };
        assert!(matches!(convergence_study(&spec), Err(Error::InsufficientPoints { .. })));
    }
}
