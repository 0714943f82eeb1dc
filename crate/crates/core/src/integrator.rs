//! Initialization and implicit Euler time stepping of the full coupled
//! state, one independent complex solve per stored Fourier mode.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::assembly::{
    divergence_free_basis, finish_state, step_operators, step_rhs, FormBuilder, Field, ModeSolver,
    ModeSources, ModeState, Spaces, TimeStep,
};
use crate::config::expr::Var;
use crate::config::{Discretization, Expr, PhysicalParams, RunConfig, SourceSpec, SourceTerm};
use crate::energy::{self, EnergyForms};
use crate::error::{Error, Result};
use crate::mesh::{Basis, BoxSide};
use crate::spectral::{LateralTransform, SpectralField};

type C = Complex64;

/// One time slice of every discrete field in spectral form.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub t: f64,
    pub u: SpectralField,
    /// Elastic velocity; present iff the Biot box carries inertia.
    pub w: Option<SpectralField>,
    pub p: SpectralField,
    pub v: SpectralField,
    pub pf: SpectralField,
}

impl State {
    pub fn zeros(spaces: &Spaces, with_w: bool) -> Self {
        let g = spaces.grid;
        let l = &spaces.layout;
        let u = SpectralField::zeros(g, BoxSide::Biot, Basis::Quadratic, 3, l.nodes(Field::U));
        State {
            t: 0.0,
            w: with_w.then(|| u.clone()),
            u,
            p: SpectralField::zeros(g, BoxSide::Biot, Basis::Linear, 1, l.nodes(Field::P)),
            v: SpectralField::zeros(g, BoxSide::Fluid, Basis::Quadratic, 3, l.nodes(Field::V)),
            pf: SpectralField::zeros(g, BoxSide::Fluid, Basis::Linear, 1, l.nodes(Field::Pf)),
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, &SpectralField)> {
        let mut out = vec![("u", &self.u)];
        if let Some(w) = &self.w {
            out.push(("w", w));
        }
        out.extend([("p_b", &self.p), ("v", &self.v), ("p_f", &self.pf)]);
        out
    }

    fn field_of(&self, f: Field) -> Option<&SpectralField> {
        match f {
            Field::U => Some(&self.u),
            Field::W => self.w.as_ref(),
            Field::P => Some(&self.p),
            Field::V => Some(&self.v),
            Field::Pf => Some(&self.pf),
        }
    }

    fn field_of_mut(&mut self, f: Field) -> Option<&mut SpectralField> {
        match f {
            Field::U => Some(&mut self.u),
            Field::W => self.w.as_mut(),
            Field::P => Some(&mut self.p),
            Field::V => Some(&mut self.v),
            Field::Pf => Some(&mut self.pf),
        }
    }

    /// Gathers the full-node vector of one stored mode.
    pub fn mode_state(&self, spaces: &Spaces, slot: usize) -> ModeState {
        let l = &spaces.layout;
        let m = spaces.grid.mode(slot);
        let mut ms = ModeState::zeros(l, m);
        for f in [Field::U, Field::P, Field::V, Field::Pf, Field::W] {
            let Some(sf) = self.field_of(f) else { continue };
            let n = l.nodes(f);
            let dst = ms.field_mut(l, f);
            for k in 0..f.comps() {
                dst[k * n..(k + 1) * n].copy_from_slice(sf.profile(k, slot));
            }
        }
        ms
    }

    pub fn set_mode(&mut self, spaces: &Spaces, slot: usize, ms: &ModeState) {
        let l = &spaces.layout;
        for f in [Field::U, Field::P, Field::V, Field::Pf, Field::W] {
            let src = ms.field(l, f).to_vec();
            let Some(sf) = self.field_of_mut(f) else { continue };
            let n = l.nodes(f);
            for k in 0..f.comps() {
                sf.profile_mut(k, slot).copy_from_slice(&src[k * n..(k + 1) * n]);
            }
        }
    }

    /// Fills non-canonical stored modes from their conjugate partners and
    /// makes self-conjugate modes exactly real.
    pub fn symmetrize(&mut self) {
        self.u.enforce_hermitian();
        if let Some(w) = &mut self.w {
            w.enforce_hermitian();
        }
        self.p.enforce_hermitian();
        self.v.enforce_hermitian();
        self.pf.enforce_hermitian();
    }

    pub fn scaled(&self, a: f64) -> State {
        State {
            t: self.t,
            u: self.u.scaled(a),
            w: self.w.as_ref().map(|w| w.scaled(a)),
            p: self.p.scaled(a),
            v: self.v.scaled(a),
            pf: self.pf.scaled(a),
        }
    }
}

/// Initial data sampled on the grid: `u0`, `u1` at the quadratic Biot
/// nodes, `d0` at the linear Biot nodes, `v0` at the quadratic fluid
/// nodes, all laid out `((comp * n1 + i1) * n2 + i2) * nvert + node`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
    pub d0: Vec<f64>,
    pub v0: Vec<f64>,
    /// Exact divergence of `u0` at the linear Biot nodes when known in
    /// closed form; otherwise the discrete divergence is used.
    pub div_u0: Option<Vec<f64>>,
}

/// Samples `f(x, comp)` on the lateral grid times the nodes of one basis.
pub fn sample_on_nodes(
    disc: &Discretization,
    spaces: &Spaces,
    side: BoxSide,
    basis: Basis,
    comps: usize,
    f: impl Fn([f64; 3], usize) -> f64,
) -> Vec<f64> {
    let nodes = spaces.meshes.side(side).nodes(basis);
    let (n1, n2) = (disc.n1, disc.n2);
    let mut out = Vec::with_capacity(comps * n1 * n2 * nodes.len());
    for k in 0..comps {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let x1 = i1 as f64 / n1 as f64;
                let x2 = i2 as f64 / n2 as f64;
                for &x3 in &nodes {
                    out.push(f([x1, x2, x3], k));
                }
            }
        }
    }
    out
}

impl InitialData {
    pub fn zeros(spaces: &Spaces) -> Self {
        let l = &spaces.layout;
        let npts = spaces.grid.points();
        InitialData {
            u0: vec![0.0; 3 * npts * l.nodes(Field::U)],
            u1: vec![0.0; 3 * npts * l.nodes(Field::U)],
            d0: vec![0.0; npts * l.nodes(Field::P)],
            v0: vec![0.0; 3 * npts * l.nodes(Field::V)],
            div_u0: None,
        }
    }

    /// Samples closed-form initial data. The exact divergence of `u0` is
    /// kept for the fluid-content relation, and `v0` is projected onto the
    /// discretely divergence-free velocities.
    pub fn from_exprs(
        spaces: &Spaces,
        u0: &[Expr; 3],
        u1: &[Expr; 3],
        d0: &Expr,
        v0: &[Expr; 3],
    ) -> Result<Self> {
        let disc = &spaces.disc;
        let q = |e: &[Expr; 3], side| {
            sample_on_nodes(disc, spaces, side, Basis::Quadratic, 3, |x, k| e[k].eval(x, 0.0))
        };
        let div = [Var::X1, Var::X2, Var::X3]
            .iter()
            .enumerate()
            .map(|(k, &var)| u0[k].derivative(var))
            .collect::<Option<Vec<_>>>();
        let div_u0 = div.map(|d| {
            sample_on_nodes(disc, spaces, BoxSide::Biot, Basis::Linear, 1, |x, _| {
                d.iter().map(|e| e.eval(x, 0.0)).sum()
            })
        });
        let raw_v = q(v0, BoxSide::Fluid);
        let v0 = project_divergence_free(spaces, &raw_v)?;
        Ok(InitialData {
            u0: q(u0, BoxSide::Biot),
            u1: q(u1, BoxSide::Biot),
            d0: sample_on_nodes(disc, spaces, BoxSide::Biot, Basis::Linear, 1, |x, _| d0.eval(x, 0.0)),
            v0,
            div_u0,
        })
    }

    /// Initial data that reproduce a given state: `d0 = c0 p + alpha div u`
    /// with the discrete divergence.
    pub fn from_state(spaces: &Spaces, p: &PhysicalParams, s: &State) -> Result<Self> {
        let tr = LateralTransform::new(spaces.grid);
        let div = discrete_divergence(spaces, &s.u);
        let mut d = s.p.scaled(p.c0);
        for (a, b) in d.data.iter_mut().zip(&div.data) {
            *a += p.alpha * b;
        }
        let zeros = vec![0.0; 3 * spaces.grid.points() * spaces.layout.nodes(Field::U)];
        Ok(InitialData {
            u0: tr.inverse(&s.u)?,
            u1: match &s.w {
                Some(w) => tr.inverse(w)?,
                None => zeros,
            },
            d0: tr.inverse(&d)?,
            v0: tr.inverse(&s.v)?,
            div_u0: None,
        })
    }
}

/// Divergence of a displacement field at the linear nodes: lateral symbols
/// times nodal values plus the vertical derivative averaged over the two
/// cells meeting at each vertex.
pub fn discrete_divergence(spaces: &Spaces, u: &SpectralField) -> SpectralField {
    let l = &spaces.layout;
    let mesh = &spaces.meshes.biot;
    let h = mesh.h();
    let nb = l.nb;
    let mut out = SpectralField::zeros(spaces.grid, BoxSide::Biot, Basis::Linear, 1, nb + 1);
    for slot in 0..spaces.grid.mode_count() {
        let a = spaces.grid.symbols(spaces.grid.mode(slot));
        let (u1, u2, u3) = (u.profile(0, slot), u.profile(1, slot), u.profile(2, slot));
        let prof = out.profile_mut(0, slot);
        for (i, val) in prof.iter_mut().enumerate() {
            let q = 2 * i;
            // One-sided derivatives of the quadratic on the cells below/above.
            let below = (i > 0).then(|| (u3[q - 2] - 4.0 * u3[q - 1] + 3.0 * u3[q]) / h);
            let above = (i < nb).then(|| (-3.0 * u3[q] + 4.0 * u3[q + 1] - u3[q + 2]) / h);
            let d3 = match (below, above) {
                (Some(b), Some(a)) => 0.5 * (a + b),
                (Some(b), None) => b,
                (None, Some(a)) => a,
                (None, None) => C::new(0.0, 0.0),
            };
            *val = C::new(0.0, a[0]) * u1[q] + C::new(0.0, a[1]) * u2[q] + d3;
        }
    }
    out
}

/// Fluid-mass-orthogonal projection of sampled velocities onto the
/// discretely divergence-free fields vanishing at x3 = -1.
pub fn project_divergence_free(spaces: &Spaces, v: &[f64]) -> Result<Vec<f64>> {
    let tr = LateralTransform::new(spaces.grid);
    let l = &spaces.layout;
    let nv = l.nodes(Field::V);
    let mut f = tr.forward(v, BoxSide::Fluid, Basis::Quadratic, 3, nv)?;
    let mass = spaces.mass(Field::V).map(|x| C::new(x, 0.0));
    for slot in 0..spaces.grid.mode_count() {
        if !spaces.grid.is_canonical(slot) {
            continue;
        }
        let m = spaces.grid.mode(slot);
        let z = divergence_free_basis(spaces, m);
        let mut full = DVector::zeros(3 * nv);
        let mut mfull = DMatrix::zeros(3 * nv, 3 * nv);
        for k in 0..3 {
            full.rows_mut(k * nv, nv).copy_from_slice(f.profile(k, slot));
            mfull.view_mut((k * nv, k * nv), (nv, nv)).copy_from(&mass);
        }
        let zm = z.adjoint() * &mfull;
        let gram = &zm * &z;
        let coef = gram
            .lu()
            .solve(&(&zm * &full))
            .ok_or(Error::SingularSystem { mode: m })?;
        let proj = &z * coef;
        for k in 0..3 {
            f.profile_mut(k, slot)
                .copy_from_slice(proj.rows(k * nv, nv).as_slice());
        }
    }
    f.enforce_hermitian();
    tr.inverse(&f)
}

/// Relative size of the discrete divergence `(div v, q_f)` of a spectral
/// velocity, and its value at the bottom nodes.
fn divergence_residual(spaces: &Spaces, v: &SpectralField) -> f64 {
    let l = &spaces.layout;
    let nv = l.nodes(Field::V);
    let mut res = 0.0;
    let mut norm = 0.0;
    for slot in 0..spaces.grid.mode_count() {
        let m = spaces.grid.mode(slot);
        let mut b = FormBuilder::new(spaces, m, &[Field::Pf], &[Field::V]);
        b.div_trial(1.0, Field::Pf, Field::V);
        let mut x = DVector::zeros(3 * nv);
        for k in 0..3 {
            x.rows_mut(k * nv, nv).copy_from_slice(v.profile(k, slot));
        }
        res += (&b.mat * &x).norm_squared();
        norm += b.mat.norm_squared() * x.norm_squared();
    }
    if norm == 0.0 {
        0.0
    } else {
        (res / norm).sqrt()
    }
}

/// Sources sampled on the lateral grid at the quadratic vertical nodes,
/// components stacked in the real-space sample layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSources {
    pub fb: Vec<f64>,
    pub s: Vec<f64>,
    pub ff: Vec<f64>,
}

/// Mode coefficients of the sources at time `t`, step index `n`.
pub struct SourceSampler {
    spaces: Spaces,
    spec: SourceSpec,
    transform: LateralTransform,
}

impl SourceSampler {
    pub fn new(spaces: &Spaces, spec: &SourceSpec) -> Self {
        SourceSampler {
            spaces: spaces.clone(),
            spec: spec.clone(),
            transform: LateralTransform::new(spaces.grid),
        }
    }

    fn sample(&self, term: &SourceTerm, side: BoxSide, t: f64, n: usize) -> Vec<f64> {
        match term {
            SourceTerm::Expr(e) => {
                sample_on_nodes(&self.spaces.disc, &self.spaces, side, Basis::Quadratic, 1, |x, _| e.eval(x, t))
            }
            SourceTerm::Sampled(data) => data[n.min(data.len() - 1)].clone(),
        }
    }

    /// Real-space samples of the sources on the quadratic nodes.
    pub fn samples(&self, t: f64, n: usize) -> RealSources {
        let sp = &self.spaces;
        let npts = sp.grid.points();
        let grab = |term: &SourceTerm, side: BoxSide| {
            let len = npts * sp.meshes.side(side).node_count(Basis::Quadratic);
            if term.is_zero() {
                vec![0.0; len]
            } else {
                self.sample(term, side, t, n)
            }
        };
        let cat = |terms: &[SourceTerm; 3], side| terms.iter().flat_map(|f| grab(f, side)).collect();
        RealSources {
            fb: cat(&self.spec.body_force, BoxSide::Biot),
            s: grab(&self.spec.mass_source, BoxSide::Biot),
            ff: cat(&self.spec.fluid_force, BoxSide::Fluid),
        }
    }

    pub fn at(&self, t: f64, n: usize) -> Result<Vec<ModeSources>> {
        let sp = &self.spaces;
        let l = &sp.layout;
        let modes: Vec<_> = (0..sp.grid.mode_count())
            .map(|s| ModeSources::zeros(l, sp.grid.mode(s)))
            .collect();
        if self.spec.is_zero() {
            return Ok(modes);
        }
        let mut modes = modes;
        let nu = l.nodes(Field::U);
        let nv = l.nodes(Field::V);
        let mut put = |term: &SourceTerm, side, target: &dyn Fn(&mut ModeSources) -> &mut DVector<C>, k: usize| -> Result<()> {
            if term.is_zero() {
                return Ok(());
            }
            let n_vert = if side == BoxSide::Biot { nu } else { nv };
            let f = self
                .transform
                .forward(&self.sample(term, side, t, n), side, Basis::Quadratic, 1, n_vert)?;
            for (slot, ms) in modes.iter_mut().enumerate() {
                let dst = target(ms);
                dst.rows_mut(k * n_vert, n_vert).copy_from_slice(f.profile(0, slot));
            }
            Ok(())
        };
        for k in 0..3 {
            put(&self.spec.body_force[k], BoxSide::Biot, &|m| &mut m.fb, k)?;
            put(&self.spec.fluid_force[k], BoxSide::Fluid, &|m| &mut m.ff, k)?;
        }
        put(&self.spec.mass_source, BoxSide::Biot, &|m| &mut m.s, 0)?;
        Ok(modes)
    }
}

/// Factorized step systems of every canonical mode.
pub struct Stepper {
    pub spaces: Spaces,
    pub params: PhysicalParams,
    pub step: TimeStep,
    ops: Vec<Option<(ModeSolver, DMatrix<C>)>>,
}

impl Stepper {
    pub fn new(spaces: &Spaces, params: &PhysicalParams, step: TimeStep) -> Result<Self> {
        let grid = spaces.grid;
        let ops = (0..grid.mode_count())
            .into_par_iter()
            .map(|slot| {
                grid.is_canonical(slot).then(|| {
                    let o = step_operators(spaces, grid.mode(slot), params, step);
                    (ModeSolver::new(o.mode, o.matrix), o.prior)
                })
            })
            .collect();
        Ok(Stepper {
            spaces: spaces.clone(),
            params: *params,
            step,
            ops,
        })
    }

    /// Advances `state` with per-slot sources taken at the new time level.
    pub fn advance(&self, state: &State, sources: &[ModeSources]) -> Result<State> {
        let sp = &self.spaces;
        let l = &sp.layout;
        if sources.len() != sp.grid.mode_count() {
            return Err(Error::DimensionMismatch {
                expected: sp.grid.mode_count(),
                found: sources.len(),
            });
        }
        let solved: Vec<Option<ModeState>> = self
            .ops
            .par_iter()
            .enumerate()
            .map(|(slot, op)| -> Result<Option<ModeState>> {
                let Some((solver, prior_map)) = op else { return Ok(None) };
                let prior = state.mode_state(sp, slot);
                let ops = crate::assembly::StepOperators {
                    mode: solver.mode,
                    step: self.step,
                    matrix: DMatrix::zeros(0, 0),
                    prior: prior_map.clone(),
                };
                let rhs = step_rhs(sp, &ops, &prior, &sources[slot]);
                let red = solver.solve(&rhs)?;
                Ok(Some(finish_state(l, solver.mode, self.step, &red, &prior)))
            })
            .collect::<Result<_>>()?;
        let mut next = State::zeros(sp, self.params.rho_b > 0.0);
        next.t = match self.step {
            TimeStep::Implicit(dt) => state.t + dt,
            TimeStep::Steady => state.t,
        };
        for (slot, ms) in solved.iter().enumerate() {
            if let Some(ms) = ms {
                next.set_mode(sp, slot, ms);
            }
        }
        next.symmetrize();
        Ok(next)
    }
}

/// Builds the state at t = 0. Fields the model does not evolve from data
/// (the fluid pressure always, the pore pressure when c0 = 0, the fluid
/// velocity when rho_f = 0) come from one implicit solve from the data.
pub fn initialize(cfg: &RunConfig, data: &InitialData) -> Result<State> {
    let spaces = Spaces::new(&cfg.disc)?;
    let stepper = Stepper::new(&spaces, &cfg.physics, TimeStep::Implicit(cfg.disc.dt))?;
    let sources = SourceSampler::new(&spaces, &cfg.sources).at(0.0, 0)?;
    initialize_with(&stepper, data, &sources)
}

pub(crate) fn initialize_with(stepper: &Stepper, data: &InitialData, sources: &[ModeSources]) -> Result<State> {
    let sp = &stepper.spaces;
    let p = &stepper.params;
    let l = &sp.layout;
    let tr = LateralTransform::new(sp.grid);
    let npts = sp.grid.points();
    let check = |name: &str, v: &[f64], len: usize| {
        if v.len() != len {
            Err(Error::InvalidInitialData(format!(
                "{name} has {} samples, expected {len}",
                v.len()
            )))
        } else {
            Ok(())
        }
    };
    check("u0", &data.u0, 3 * npts * l.nodes(Field::U))?;
    check("u1", &data.u1, 3 * npts * l.nodes(Field::U))?;
    check("d0", &data.d0, npts * l.nodes(Field::P))?;
    check("v0", &data.v0, 3 * npts * l.nodes(Field::V))?;

    let mut s = State::zeros(sp, p.rho_b > 0.0);
    s.u = tr.forward(&data.u0, BoxSide::Biot, Basis::Quadratic, 3, l.nodes(Field::U))?;
    let scale = data.u0.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
    let top_u = (0..3 * npts).map(|b| data.u0[(b + 1) * l.nodes(Field::U) - 1].abs()).fold(0.0, f64::max);
    if top_u > 1e-12 * scale {
        return Err(Error::InvalidInitialData(format!(
            "u0 does not vanish on the top face (max {top_u:e})"
        )));
    }
    if let Some(w) = &mut s.w {
        *w = tr.forward(&data.u1, BoxSide::Biot, Basis::Quadratic, 3, l.nodes(Field::U))?;
    }

    // Fluid content relation.
    let d0 = tr.forward(&data.d0, BoxSide::Biot, Basis::Linear, 1, l.nodes(Field::P))?;
    let div = match &data.div_u0 {
        Some(d) => tr.forward(d, BoxSide::Biot, Basis::Linear, 1, l.nodes(Field::P))?,
        None => discrete_divergence(sp, &s.u),
    };
    let mut resid = d0.clone();
    for (r, d) in resid.data.iter_mut().zip(&div.data) {
        *r -= p.alpha * d;
    }
    if p.c0 > 0.0 {
        s.p = resid.scaled(1.0 / p.c0);
        let top = l.nodes(Field::P) - 1;
        for slot in 0..sp.grid.mode_count() {
            s.p.profile_mut(0, slot)[top] = C::new(0.0, 0.0);
        }
    } else {
        let mp = spaces_mass_norm(sp, &resid);
        let dn = spaces_mass_norm(sp, &d0);
        let tol = 1e-10 * (dn + 1.0);
        if mp > tol {
            return Err(Error::IncompatibleData {
                residual: mp,
                tolerance: tol,
            });
        }
    }

    if p.rho_f > 0.0 {
        s.v = tr.forward(&data.v0, BoxSide::Fluid, Basis::Quadratic, 3, l.nodes(Field::V))?;
        let vscale = data.v0.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
        let bottom = (0..3 * npts).map(|b| data.v0[b * l.nodes(Field::V)].abs()).fold(0.0, f64::max);
        if bottom > 1e-12 * vscale {
            return Err(Error::InvalidInitialData(format!(
                "v0 does not vanish on the bottom face (max {bottom:e})"
            )));
        }
        let r = divergence_residual(sp, &s.v);
        if r > 1e-10 {
            return Err(Error::InvalidInitialData(format!(
                "v0 is not discretely divergence free (relative residual {r:e})"
            )));
        }
    }

    let probe = stepper.advance(&s, sources)?;
    s.pf = probe.pf;
    if p.c0 == 0.0 {
        s.p = probe.p;
    }
    if p.rho_f == 0.0 {
        s.v = probe.v;
    }
    s.t = 0.0;
    Ok(s)
}

fn spaces_mass_norm(sp: &Spaces, f: &SpectralField) -> f64 {
    let m = sp.mass(Field::P);
    f.weighted_sum(|_, _, prof| {
        let mut acc = 0.0;
        for i in 0..prof.len() {
            for j in 0..prof.len() {
                acc += (prof[i].conj() * prof[j] * m[(i, j)]).re;
            }
        }
        acc
    })
    .max(0.0)
    .sqrt()
}

/// Per-step diagnostics recorded along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub t: f64,
    pub energy: f64,
    pub dissipation_increment: f64,
    /// Norms of the discrete residuals of mass conservation, tangential
    /// slip and normal stress balance on the interface.
    pub interface_residuals: [f64; 3],
    /// Energy norm of `u^{n+1} - u^n`.
    pub increment_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub params: PhysicalParams,
    pub disc: Discretization,
    pub states: Vec<State>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }
}

/// One implicit Euler step with sources at the new time level.
pub fn step(s: &State, cfg: &RunConfig, sources: &[ModeSources]) -> Result<State> {
    let spaces = Spaces::new(&cfg.disc)?;
    let stepper = Stepper::new(&spaces, &cfg.physics, TimeStep::Implicit(cfg.disc.dt))?;
    stepper.advance(s, sources)
}

/// Runs from initial data to `t_end`.
pub fn run(cfg: &RunConfig, data: &InitialData) -> Result<Trajectory> {
    cfg.validate()?;
    let spaces = Spaces::new(&cfg.disc)?;
    let stepper = Stepper::new(&spaces, &cfg.physics, TimeStep::Implicit(cfg.disc.dt))?;
    let sampler = SourceSampler::new(&spaces, &cfg.sources);
    let s0 = initialize_with(&stepper, data, &sampler.at(0.0, 0)?)?;
    let steps = cfg.disc.step_count()?;
    run_with(&stepper, &sampler, s0, 0, steps)
}

/// Continues from a given state for `steps` steps; `first` is the step
/// index of `start`.
pub fn run_from(cfg: &RunConfig, start: State, first: usize, steps: usize) -> Result<Trajectory> {
    let spaces = Spaces::new(&cfg.disc)?;
    let stepper = Stepper::new(&spaces, &cfg.physics, TimeStep::Implicit(cfg.disc.dt))?;
    let sampler = SourceSampler::new(&spaces, &cfg.sources);
    run_with(&stepper, &sampler, start, first, steps)
}

pub(crate) fn run_with(
    stepper: &Stepper,
    sampler: &SourceSampler,
    start: State,
    first: usize,
    steps: usize,
) -> Result<Trajectory> {
    let sp = &stepper.spaces;
    let p = stepper.params;
    let dt = sp.disc.dt;
    let forms = EnergyForms::new(sp);
    let mut states = Vec::with_capacity(steps + 1);
    let mut diagnostics = Vec::with_capacity(steps + 1);
    diagnostics.push(StepDiagnostics {
        t: start.t,
        energy: energy::energy_with(&forms, &start, &p).total(),
        dissipation_increment: 0.0,
        interface_residuals: [0.0; 3],
        increment_norm: 0.0,
    });
    states.push(start);
    for n in first..first + steps {
        let prev = states.last().expect("nonempty");
        let t = (n + 1) as f64 * dt;
        let mut next = stepper.advance(prev, &sampler.at(t, n + 1)?)?;
        next.t = t;
        let d = energy::dissipation_with(&forms, prev, &next, &p, dt);
        diagnostics.push(StepDiagnostics {
            t,
            energy: energy::energy_with(&forms, &next, &p).total(),
            dissipation_increment: d.total(),
            interface_residuals: energy::interface_residuals_with(&forms, prev, &next, &p, dt),
            increment_norm: energy::increment_norm_with(&forms, prev, &next, &p),
        });
        states.push(next);
    }
    Ok(Trajectory {
        params: p,
        disc: sp.disc,
        states,
        diagnostics,
    })
}

/// Random smooth admissible initial data: a few low lateral modes with
/// polynomial vertical profiles obeying the boundary conditions, `v0`
/// projected onto the discretely divergence-free fields and, when
/// `c0 = 0`, `d0` set to the compatible fluid content.
pub fn random_smooth_data(spaces: &Spaces, p: &PhysicalParams, seed: u64) -> Result<InitialData> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let disc = spaces.disc;
    let kmax = 2i64.min(disc.n1 as i64 / 2 - 1).min(disc.n2 as i64 / 2 - 1).max(1);
    let mut term = |vanish: f64| {
        let mut parts = Vec::new();
        for k1 in -kmax..=kmax {
            for k2 in -kmax..=kmax {
                let c: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                parts.push((k1, k2, c));
            }
        }
        move |x: [f64; 3]| -> f64 {
            let s = (x[2] - vanish).abs();
            parts
                .iter()
                .map(|&(k1, k2, c)| {
                    let ph = 2.0 * std::f64::consts::PI * (k1 as f64 * x[0] + k2 as f64 * x[1]);
                    let decay = 1.0 / (1 + k1 * k1 + k2 * k2) as f64;
                    decay * (c[0] * ph.cos() + c[1] * ph.sin()) * s * (c[2] + c[3] * x[2] + c[4] * x[2] * x[2])
                })
                .sum()
        }
    };
    let u0f: Vec<_> = (0..3).map(|_| term(1.0)).collect();
    let u1f: Vec<_> = (0..3).map(|_| term(1.0)).collect();
    let v0f: Vec<_> = (0..3).map(|_| term(-1.0)).collect();
    let d0f = term(1.0);
    let q = |fs: &Vec<_>, side| {
        sample_on_nodes(&disc, spaces, side, Basis::Quadratic, 3, |x, k| {
            let f: &dyn Fn([f64; 3]) -> f64 = &fs[k];
            f(x)
        })
    };
    let u0 = q(&u0f, BoxSide::Biot);
    let u1 = q(&u1f, BoxSide::Biot);
    let v0 = project_divergence_free(spaces, &q(&v0f, BoxSide::Fluid))?;
    let d0 = if p.c0 > 0.0 {
        sample_on_nodes(&disc, spaces, BoxSide::Biot, Basis::Linear, 1, |x, _| d0f(x))
    } else {
        let tr = LateralTransform::new(spaces.grid);
        let u = tr.forward(&u0, BoxSide::Biot, Basis::Quadratic, 3, spaces.layout.nodes(Field::U))?;
        tr.inverse(&discrete_divergence(spaces, &u).scaled(p.alpha))?
    };
    Ok(InitialData {
        u0,
        u1,
        d0,
        v0,
        div_u0: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(regime: (f64, f64, f64, f64), steps: usize) -> RunConfig {
        let disc = Discretization {
            n1: 4,
            n2: 4,
            nb: 4,
            nf: 4,
            dt: 0.05,
            t_end: 0.05 * steps as f64,
        };
        RunConfig::new(
            PhysicalParams::unit().with_regime(regime.0, regime.1, regime.2, regime.3),
            disc,
        )
    }

    #[test]
    fn zero_data_stays_zero() {
        let c = cfg((1.0, 1.0, 1.0, 1.0), 3);
        let sp = Spaces::new(&c.disc).unwrap();
        let traj = run(&c, &InitialData::zeros(&sp)).unwrap();
        assert_eq!(traj.states.len(), 4);
        for s in &traj.states {
            assert!(s.u.data.iter().chain(&s.v.data).all(|z| z.norm() == 0.0));
        }
    }

    #[test]
    fn storage_formula_recovers_pressure() {
        let mut c = cfg((0.0, 0.0, 0.0, 2.0), 1);
        c.physics.alpha = 1.0;
        let sp = Spaces::new(&c.disc).unwrap();
        let mut data = InitialData::zeros(&sp);
        data.d0.iter_mut().for_each(|d| *d = 2.0);
        let s = initialize(&c, &data).unwrap();
        let top = sp.layout.nodes(Field::P) - 1;
        for (j, z) in s.p.profile(0, 0).iter().enumerate() {
            let expect = if j == top { 0.0 } else { 1.0 };
            assert!((z - expect).norm() < 1e-14);
        }
    }

    #[test]
    fn incompatible_fluid_content_rejected() {
        let c = cfg((0.0, 0.0, 0.0, 0.0), 1);
        let sp = Spaces::new(&c.disc).unwrap();
        let mut data = InitialData::zeros(&sp);
        data.d0.iter_mut().for_each(|d| *d = 1.0);
        assert!(matches!(initialize(&c, &data), Err(Error::IncompatibleData { .. })));
    }

    #[test]
    fn source_free_runs_dissipate_in_every_regime() {
        for (i, &regime) in [
            (1.0, 1.0, 1.0, 1.0),
            (0.0, 0.0, 0.0, 0.0),
            (1.0, 0.0, 0.0, 1.0),
            (0.0, 1.0, 0.5, 0.0),
        ]
        .iter()
        .enumerate()
        {
            let c = cfg(regime, 4);
            let sp = Spaces::new(&c.disc).unwrap();
            let data = random_smooth_data(&sp, &c.physics, 10 + i as u64).unwrap();
            let traj = run(&c, &data).unwrap();
            let e0 = traj.diagnostics[0].energy;
            assert!(e0 > 0.0);
            for w in traj.diagnostics.windows(2) {
                let (a, b) = (w[0], w[1]);
                assert!(
                    b.energy + b.dissipation_increment <= a.energy + 1e-10 * e0.max(1.0),
                    "{regime:?}: {} + {} > {}",
                    b.energy,
                    b.dissipation_increment,
                    a.energy
                );
            }
        }
    }
}
