//! Per-mode assembly of the implicit Euler step system and of the
//! semigroup generator.
//!
//! Unknowns of one mode are stored over all vertical nodes in the order
//! `[u1, u2, u3, p_b, v1, v2, v3, p_f]`; essential nodes (u and p_b on the
//! top face, v on the bottom face) are removed when the system is formed.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::config::{Discretization, PhysicalParams};
use crate::error::{Error, Result};
use crate::mesh::{Basis, BoxSide, Grams, MeshPair};
use crate::spectral::{LateralGrid, ModeIndex};

type C = Complex64;

const I: C = C::new(0.0, 1.0);

fn c(x: f64) -> C {
    C::new(x, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    U,
    P,
    V,
    Pf,
    W,
}

impl Field {
    pub fn side(self) -> BoxSide {
        match self {
            Field::U | Field::P | Field::W => BoxSide::Biot,
            Field::V | Field::Pf => BoxSide::Fluid,
        }
    }

    pub fn basis(self) -> Basis {
        match self {
            Field::U | Field::V | Field::W => Basis::Quadratic,
            Field::P | Field::Pf => Basis::Linear,
        }
    }

    pub fn comps(self) -> usize {
        match self {
            Field::U | Field::V | Field::W => 3,
            Field::P | Field::Pf => 1,
        }
    }
}

/// Map from (field, component, vertical node) to positions in the full
/// per-mode vector and in the reduced vector of free unknowns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub nb: usize,
    pub nf: usize,
    free: Vec<usize>,
    to_free: Vec<Option<usize>>,
}

impl Layout {
    pub fn new(nb: usize, nf: usize) -> Self {
        let mut l = Layout {
            nb,
            nf,
            free: Vec::new(),
            to_free: Vec::new(),
        };
        let full = l.full_len();
        l.to_free = vec![None; full];
        for idx in 0..full {
            if !l.is_constrained(idx) {
                l.to_free[idx] = Some(l.free.len());
                l.free.push(idx);
            }
        }
        l
    }

    pub fn nodes(&self, f: Field) -> usize {
        match f {
            Field::U | Field::W => 2 * self.nb + 1,
            Field::P => self.nb + 1,
            Field::V => 2 * self.nf + 1,
            Field::Pf => self.nf + 1,
        }
    }

    pub fn len(&self, f: Field) -> usize {
        f.comps() * self.nodes(f)
    }

    /// Offset of a field in the full vector; `W` follows the unknowns.
    pub fn offset(&self, f: Field) -> usize {
        let (u, p, v, pf) = (
            self.len(Field::U),
            self.len(Field::P),
            self.len(Field::V),
            self.len(Field::Pf),
        );
        match f {
            Field::U => 0,
            Field::P => u,
            Field::V => u + p,
            Field::Pf => u + p + v,
            Field::W => u + p + v + pf,
        }
    }

    /// Length of the full unknown vector (without `W`).
    pub fn full_len(&self) -> usize {
        self.offset(Field::W)
    }

    pub fn index(&self, f: Field, comp: usize, node: usize) -> usize {
        self.offset(f) + comp * self.nodes(f) + node
    }

    fn is_constrained(&self, idx: usize) -> bool {
        for f in [Field::U, Field::P, Field::V] {
            let off = self.offset(f);
            if idx >= off && idx < off + self.len(f) {
                let node = (idx - off) % self.nodes(f);
                let outer = match f.side() {
                    BoxSide::Biot => self.nodes(f) - 1,
                    BoxSide::Fluid => 0,
                };
                return node == outer;
            }
        }
        false
    }

    pub fn free_len(&self) -> usize {
        self.free.len()
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    pub fn to_free(&self, idx: usize) -> Option<usize> {
        self.to_free[idx]
    }

    pub fn interface_node(&self, f: Field) -> usize {
        match f.side() {
            BoxSide::Biot => 0,
            BoxSide::Fluid => self.nodes(f) - 1,
        }
    }
}

/// Discretization-wide data shared by every mode.
#[derive(Debug, Clone)]
pub struct Spaces {
    pub disc: Discretization,
    pub grid: LateralGrid,
    pub meshes: MeshPair,
    pub layout: Layout,
    grams_b: Grams,
    grams_f: Grams,
}

impl Spaces {
    pub fn new(disc: &Discretization) -> Result<Self> {
        let meshes = MeshPair::new(disc.nb, disc.nf)?;
        Ok(Spaces {
            disc: *disc,
            grid: LateralGrid::new(disc.n1, disc.n2),
            grams_b: Grams::new(&meshes.biot),
            grams_f: Grams::new(&meshes.fluid),
            layout: Layout::new(disc.nb, disc.nf),
            meshes,
        })
    }

    pub fn grams(&self, side: BoxSide) -> &Grams {
        match side {
            BoxSide::Biot => &self.grams_b,
            BoxSide::Fluid => &self.grams_f,
        }
    }

    pub fn mass(&self, f: Field) -> &DMatrix<f64> {
        self.grams(f.side()).get(f.basis(), 0, f.basis(), 0)
    }
}

/// Accumulates sesquilinear forms into a dense matrix whose row and column
/// blocks are placed at caller-chosen offsets.
pub(crate) struct FormBuilder<'a> {
    spaces: &'a Spaces,
    symbols: [f64; 2],
    rows: Vec<(Field, usize)>,
    cols: Vec<(Field, usize)>,
    pub mat: DMatrix<C>,
}

/// Derivative applied to a test or trial function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Dx {
    Id,
    D(usize),
}

impl<'a> FormBuilder<'a> {
    pub fn new(
        spaces: &'a Spaces,
        m: ModeIndex,
        rows: &[Field],
        cols: &[Field],
    ) -> Self {
        let place = |fields: &[Field]| {
            let mut off = 0;
            fields
                .iter()
                .map(|&f| {
                    let here = off;
                    off += spaces.layout.len(f);
                    (f, here)
                })
                .collect::<Vec<_>>()
        };
        let rows = place(rows);
        let cols = place(cols);
        let nr = rows.iter().map(|&(f, _)| spaces.layout.len(f)).sum();
        let nc = cols.iter().map(|&(f, _)| spaces.layout.len(f)).sum();
        FormBuilder {
            spaces,
            symbols: spaces.grid.symbols(m),
            rows,
            cols,
            mat: DMatrix::zeros(nr, nc),
        }
    }

    fn row_off(&self, f: Field) -> usize {
        self.rows.iter().find(|r| r.0 == f).expect("row field").1
    }

    fn col_off(&self, f: Field) -> usize {
        self.cols.iter().find(|r| r.0 == f).expect("column field").1
    }

    fn sigma(&self, d: Dx) -> (C, u8) {
        match d {
            Dx::Id => (c(1.0), 0),
            Dx::D(2) => (c(1.0), 1),
            Dx::D(j) => (I * self.symbols[j], 0),
        }
    }

    /// Adds `coef * int d(trial_comp) conj(d(test_comp))`.
    pub fn add(&mut self, coef: C, test: (Field, usize, Dx), trial: (Field, usize, Dx)) {
        let (st, dt) = self.sigma(test.2);
        let (sr, dr) = self.sigma(trial.2);
        let factor = coef * sr * st.conj();
        if factor == c(0.0) {
            return;
        }
        let layout = &self.spaces.layout;
        let g = self
            .spaces
            .grams(test.0.side())
            .get(test.0.basis(), dt, trial.0.basis(), dr);
        let r0 = self.row_off(test.0) + test.1 * layout.nodes(test.0);
        let c0 = self.col_off(trial.0) + trial.1 * layout.nodes(trial.0);
        for j in 0..g.ncols() {
            for i in 0..g.nrows() {
                let v = g[(i, j)];
                if v != 0.0 {
                    self.mat[(r0 + i, c0 + j)] += factor * v;
                }
            }
        }
    }

    /// Adds `coef * trial_comp(0) conj(test_comp(0))`.
    pub fn point(&mut self, coef: C, test: (Field, usize), trial: (Field, usize)) {
        if coef == c(0.0) {
            return;
        }
        let layout = &self.spaces.layout;
        let r = self.row_off(test.0) + test.1 * layout.nodes(test.0) + layout.interface_node(test.0);
        let col = self.col_off(trial.0) + trial.1 * layout.nodes(trial.0) + layout.interface_node(trial.0);
        self.mat[(r, col)] += coef;
    }

    pub fn mass(&mut self, coef: f64, test: Field, trial: Field) {
        if coef == 0.0 {
            return;
        }
        for k in 0..test.comps() {
            self.add(c(coef), (test, k, Dx::Id), (trial, k, Dx::Id));
        }
    }

    /// `2 mu (D u, D xi) + lam (div u, div xi)`.
    pub fn strain(&mut self, mu: f64, lam: f64, test: Field, trial: Field) {
        for a in 0..3 {
            for b in 0..3 {
                if mu != 0.0 {
                    self.add(c(mu), (test, a, Dx::D(b)), (trial, a, Dx::D(b)));
                    self.add(c(mu), (test, a, Dx::D(b)), (trial, b, Dx::D(a)));
                }
                if lam != 0.0 {
                    self.add(c(lam), (test, a, Dx::D(a)), (trial, b, Dx::D(b)));
                }
            }
        }
    }

    pub fn grad(&mut self, coef: f64, test: Field, trial: Field) {
        if coef == 0.0 {
            return;
        }
        for d in 0..3 {
            self.add(c(coef), (test, 0, Dx::D(d)), (trial, 0, Dx::D(d)));
        }
    }

    /// `coef * (div trial, test)` with a scalar test field.
    pub fn div_trial(&mut self, coef: f64, test: Field, trial: Field) {
        if coef == 0.0 {
            return;
        }
        for k in 0..3 {
            self.add(c(coef), (test, 0, Dx::Id), (trial, k, Dx::D(k)));
        }
    }

    /// `coef * (trial, div test)` with a scalar trial field.
    pub fn div_test(&mut self, coef: f64, test: Field, trial: Field) {
        if coef == 0.0 {
            return;
        }
        for k in 0..3 {
            self.add(c(coef), (test, k, Dx::D(k)), (trial, 0, Dx::Id));
        }
    }
}

/// Implicit Euler step length, or the steady problem obtained by dropping
/// every time derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeStep {
    Implicit(f64),
    Steady,
}

impl TimeStep {
    pub fn rate(self) -> f64 {
        match self {
            TimeStep::Implicit(dt) => 1.0 / dt,
            TimeStep::Steady => 0.0,
        }
    }
}

/// Full-node state of one mode: unknowns in layout order plus the
/// elastic velocity `w` (zero when the Biot box carries no inertia).
#[derive(Debug, Clone, PartialEq)]
pub struct ModeState {
    pub mode: ModeIndex,
    pub x: DVector<C>,
    pub w: DVector<C>,
}

impl ModeState {
    pub fn zeros(layout: &Layout, mode: ModeIndex) -> Self {
        ModeState {
            mode,
            x: DVector::zeros(layout.full_len()),
            w: DVector::zeros(layout.len(Field::U)),
        }
    }

    pub fn field<'a>(&'a self, layout: &Layout, f: Field) -> &'a [C] {
        match f {
            Field::W => self.w.as_slice(),
            _ => {
                let off = layout.offset(f);
                &self.x.as_slice()[off..off + layout.len(f)]
            }
        }
    }

    pub fn comp<'a>(&'a self, layout: &Layout, f: Field, k: usize) -> &'a [C] {
        let n = layout.nodes(f);
        &self.field(layout, f)[k * n..(k + 1) * n]
    }

    pub fn field_mut<'a>(&'a mut self, layout: &Layout, f: Field) -> &'a mut [C] {
        match f {
            Field::W => self.w.as_mut_slice(),
            _ => {
                let off = layout.offset(f);
                &mut self.x.as_mut_slice()[off..off + layout.len(f)]
            }
        }
    }
}

/// Interface defect data of a manufactured solution: the amounts by which
/// it violates mass conservation (`g1`), BJS slip (`g2`), traction balance
/// (`g3`) and the normal stress condition (`g4`) on x3 = 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InterfaceDefects {
    pub g1: C,
    pub g2: [C; 2],
    pub g3: [C; 3],
    pub g4: C,
}

/// Mode coefficients of the sources at the new time level, sampled at the
/// quadratic nodes of their box.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSources {
    pub mode: ModeIndex,
    pub fb: DVector<C>,
    pub s: DVector<C>,
    pub ff: DVector<C>,
    pub defects: Option<InterfaceDefects>,
}

impl ModeSources {
    pub fn zeros(layout: &Layout, mode: ModeIndex) -> Self {
        ModeSources {
            mode,
            fb: DVector::zeros(layout.len(Field::U)),
            s: DVector::zeros(layout.nodes(Field::U)),
            ff: DVector::zeros(layout.len(Field::V)),
            defects: None,
        }
    }
}

/// Step operators of one mode: the reduced system matrix and the map from
/// the full prior state `[x; w]` to the reduced right-hand side.
#[derive(Debug, Clone)]
pub struct StepOperators {
    pub mode: ModeIndex,
    pub step: TimeStep,
    pub matrix: DMatrix<C>,
    pub prior: DMatrix<C>,
}

fn unknown_fields() -> [Field; 4] {
    [Field::U, Field::P, Field::V, Field::Pf]
}

/// Assembles the full-node step matrix and prior-state map.
fn full_step_operators(
    spaces: &Spaces,
    m: ModeIndex,
    p: &PhysicalParams,
    step: TimeStep,
) -> (DMatrix<C>, DMatrix<C>) {
    let s = step.rate();
    let mut a = FormBuilder::new(spaces, m, &unknown_fields(), &unknown_fields());
    let (u, pb, v, pf) = (Field::U, Field::P, Field::V, Field::Pf);

    // Biot momentum.
    a.mass(p.rho_b * s * s, u, u);
    a.strain((1.0 + p.delta * s) * p.mu, (1.0 + p.delta * s) * p.lambda, u, u);
    a.div_test(-p.alpha, u, pb);
    a.point(c(-1.0), (u, 2), (pb, 0));
    for j in 0..2 {
        a.point(c(-p.beta), (u, j), (v, j));
        a.point(c(p.beta * s), (u, j), (u, j));
    }
    // Fluid content.
    a.mass(p.c0 * s, pb, pb);
    a.div_trial(p.alpha * s, pb, u);
    a.grad(p.k_perm, pb, pb);
    a.point(c(-1.0), (pb, 0), (v, 2));
    a.point(c(s), (pb, 0), (u, 2));
    // Stokes momentum.
    a.mass(p.rho_f * s, v, v);
    a.strain(p.nu, 0.0, v, v);
    a.div_test(-1.0, v, pf);
    a.point(c(1.0), (v, 2), (pb, 0));
    for j in 0..2 {
        a.point(c(p.beta), (v, j), (v, j));
        a.point(c(-p.beta * s), (v, j), (u, j));
    }
    // Incompressibility.
    a.div_trial(-1.0, pf, v);

    let mut cols = unknown_fields().to_vec();
    cols.push(Field::W);
    let mut r = FormBuilder::new(spaces, m, &unknown_fields(), &cols);
    r.mass(p.rho_b * s * s, u, u);
    r.mass(p.rho_b * s, u, Field::W);
    r.strain(p.delta * s * p.mu, p.delta * s * p.lambda, u, u);
    for j in 0..2 {
        r.point(c(p.beta * s), (u, j), (u, j));
        r.point(c(-p.beta * s), (v, j), (u, j));
    }
    r.mass(p.c0 * s, pb, pb);
    r.div_trial(p.alpha * s, pb, u);
    r.point(c(s), (pb, 0), (u, 2));
    r.mass(p.rho_f * s, v, v);
    (a.mat, r.mat)
}

/// Reduced step operators for one mode.
pub fn step_operators(
    spaces: &Spaces,
    m: ModeIndex,
    p: &PhysicalParams,
    step: TimeStep,
) -> StepOperators {
    let layout = &spaces.layout;
    let (a, r) = full_step_operators(spaces, m, p, step);
    let free = layout.free_indices();
    let n = free.len();
    let matrix = DMatrix::from_fn(n, n, |i, j| a[(free[i], free[j])]);
    let prior = DMatrix::from_fn(n, r.ncols(), |i, j| r[(free[i], j)]);
    StepOperators {
        mode: m,
        step,
        matrix,
        prior,
    }
}

/// Full-node load vector `(F_b, xi) + (S, q) + (F_f, zeta)` plus the
/// interface defect terms of a manufactured solution.
pub fn load_vector(spaces: &Spaces, src: &ModeSources) -> DVector<C> {
    let layout = &spaces.layout;
    let mut out = DVector::zeros(layout.full_len());
    let mu = spaces.mass(Field::U);
    let nu = layout.nodes(Field::U);
    let nv = layout.nodes(Field::V);
    let mv = spaces.mass(Field::V);
    for k in 0..3 {
        let fb = src.fb.rows(k * nu, nu);
        let lb = mu.map(c) * fb;
        out.rows_mut(layout.index(Field::U, k, 0), nu).copy_from(&lb);
        let ff = src.ff.rows(k * nv, nv);
        let lf = mv.map(c) * ff;
        out.rows_mut(layout.index(Field::V, k, 0), nv).copy_from(&lf);
    }
    let mixed = spaces
        .grams(BoxSide::Biot)
        .get(Basis::Linear, 0, Basis::Quadratic, 0)
        .map(c);
    let ls = mixed * &src.s;
    out.rows_mut(layout.offset(Field::P), layout.nodes(Field::P)).copy_from(&ls);

    if let Some(g) = &src.defects {
        let ui = |k| layout.index(Field::U, k, layout.interface_node(Field::U));
        let vi = |k| layout.index(Field::V, k, layout.interface_node(Field::V));
        let pi = layout.index(Field::P, 0, layout.interface_node(Field::P));
        out[ui(2)] -= g.g4 - g.g3[2];
        out[vi(2)] += g.g4;
        for j in 0..2 {
            out[ui(j)] -= g.g2[j] - g.g3[j];
            out[vi(j)] += g.g2[j];
        }
        out[pi] += g.g1;
    }
    out
}

/// The complex linear system of one mode and one implicit step.
#[derive(Debug, Clone)]
pub struct ModeBlockSystem {
    pub mode: ModeIndex,
    pub step: TimeStep,
    pub layout: Layout,
    pub matrix: DMatrix<C>,
    pub rhs: DVector<C>,
}

fn prior_vector(prior: &ModeState) -> DVector<C> {
    let n = prior.x.len();
    let mut out = DVector::zeros(n + prior.w.len());
    out.rows_mut(0, n).copy_from(&prior.x);
    out.rows_mut(n, prior.w.len()).copy_from(&prior.w);
    out
}

/// Reduced right-hand side from step operators, prior state and sources.
pub fn step_rhs(spaces: &Spaces, ops: &StepOperators, prior: &ModeState, src: &ModeSources) -> DVector<C> {
    let layout = &spaces.layout;
    let load = load_vector(spaces, src);
    let mut rhs = &ops.prior * prior_vector(prior);
    for (i, &idx) in layout.free_indices().iter().enumerate() {
        rhs[i] += load[idx];
    }
    rhs
}

pub fn assemble_step_system(
    spaces: &Spaces,
    m: ModeIndex,
    p: &PhysicalParams,
    step: TimeStep,
    prior: &ModeState,
    src: &ModeSources,
) -> Result<ModeBlockSystem> {
    if prior.mode != m {
        return Err(Error::ModeMismatch {
            expected: m,
            found: prior.mode,
        });
    }
    if src.mode != m {
        return Err(Error::ModeMismatch {
            expected: m,
            found: src.mode,
        });
    }
    let layout = &spaces.layout;
    if prior.x.len() != layout.full_len()
        || prior.w.len() != layout.len(Field::U)
        || src.fb.len() != layout.len(Field::U)
        || src.s.len() != layout.nodes(Field::U)
        || src.ff.len() != layout.len(Field::V)
    {
        return Err(Error::MeshMismatch(format!(
            "mode data does not match meshes with nb = {}, nf = {}",
            layout.nb, layout.nf
        )));
    }
    let ops = step_operators(spaces, m, p, step);
    let rhs = step_rhs(spaces, &ops, prior, src);
    Ok(ModeBlockSystem {
        mode: m,
        step,
        layout: layout.clone(),
        matrix: ops.matrix,
        rhs,
    })
}

/// LU factorization of a step matrix, reusable across steps.
pub struct ModeSolver {
    pub mode: ModeIndex,
    matrix: DMatrix<C>,
    lu: nalgebra::LU<C, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ModeSolver {
    pub fn new(mode: ModeIndex, matrix: DMatrix<C>) -> Self {
        let lu = matrix.clone().lu();
        ModeSolver { mode, matrix, lu }
    }

    /// Solves with one round of iterative refinement, demanding a relative
    /// residual of at most 1e-11.
    pub fn solve(&self, rhs: &DVector<C>) -> Result<DVector<C>> {
        let bnorm = rhs.norm();
        if bnorm == 0.0 {
            return Ok(DVector::zeros(rhs.len()));
        }
        let singular = Error::SingularSystem { mode: self.mode };
        let mut x = self.lu.solve(rhs).ok_or(Error::SingularSystem { mode: self.mode })?;
        let mut res = rhs - &self.matrix * &x;
        if res.norm() > 1e-13 * bnorm {
            let dx = self.lu.solve(&res).ok_or(Error::SingularSystem { mode: self.mode })?;
            x += dx;
            res = rhs - &self.matrix * &x;
        }
        let rel = res.norm() / bnorm;
        if !rel.is_finite() || rel > 1e-11 {
            return Err(singular);
        }
        Ok(x)
    }
}

/// Expands a reduced solution to full nodes (zeros at essential nodes).
pub fn expand(layout: &Layout, reduced: &DVector<C>) -> DVector<C> {
    let mut x = DVector::zeros(layout.full_len());
    for (i, &idx) in layout.free_indices().iter().enumerate() {
        x[idx] = reduced[i];
    }
    x
}

/// Solves a step system and returns the new mode state; `w` is the
/// backward difference of `u` when the step is implicit.
pub fn solve_step_system(sys: &ModeBlockSystem, prior: &ModeState) -> Result<ModeState> {
    let solver = ModeSolver::new(sys.mode, sys.matrix.clone());
    let red = solver.solve(&sys.rhs)?;
    Ok(finish_state(&sys.layout, sys.mode, sys.step, &red, prior))
}

pub(crate) fn finish_state(
    layout: &Layout,
    mode: ModeIndex,
    step: TimeStep,
    reduced: &DVector<C>,
    prior: &ModeState,
) -> ModeState {
    let x = expand(layout, reduced);
    let nu = layout.len(Field::U);
    let w = match step {
        TimeStep::Implicit(dt) => (x.rows(0, nu) - prior.x.rows(0, nu)) / c(dt),
        TimeStep::Steady => DVector::zeros(nu),
    };
    ModeState { mode, x, w }
}

/// Stress diagnostics of the Biot box at one height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiotStressSample {
    pub strain: [[C; 3]; 3],
    pub sigma_e: [[C; 3]; 3],
    pub sigma_b: [[C; 3]; 3],
    pub fluid_content: C,
    pub darcy_flux: [C; 3],
}

/// Stress diagnostics of the fluid box at one height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidStressSample {
    pub strain: [[C; 3]; 3],
    pub sigma_f: [[C; 3]; 3],
}

fn gradient(spaces: &Spaces, m: ModeIndex, f: Field, prof: &[C], x3: f64) -> [[C; 3]; 3] {
    let a = spaces.grid.symbols(m);
    let mesh = spaces.meshes.side(f.side());
    let n = spaces.layout.nodes(f);
    let mut g = [[c(0.0); 3]; 3];
    for k in 0..3 {
        let comp = &prof[k * n..(k + 1) * n];
        let val = mesh.eval(f.basis(), comp, x3, 0);
        g[k][0] = I * a[0] * val;
        g[k][1] = I * a[1] * val;
        g[k][2] = mesh.eval(f.basis(), comp, x3, 1);
    }
    g
}

fn symmetric_part(g: &[[C; 3]; 3]) -> [[C; 3]; 3] {
    let mut d = [[c(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d[i][j] = 0.5 * (g[i][j] + g[j][i]);
        }
    }
    d
}

fn elastic(p: &PhysicalParams, d: &[[C; 3]; 3]) -> [[C; 3]; 3] {
    let tr = d[0][0] + d[1][1] + d[2][2];
    let mut s = [[c(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = 2.0 * p.mu * d[i][j];
        }
        s[i][i] += p.lambda * tr;
    }
    s
}

/// Stresses of one mode of the Biot fields at height `x3` in [0, 1].
/// `ut` is the mode's displacement velocity.
pub fn biot_stress(
    spaces: &Spaces,
    m: ModeIndex,
    p: &PhysicalParams,
    state: &ModeState,
    ut: &[C],
    x3: f64,
) -> BiotStressSample {
    let layout = &spaces.layout;
    let du = symmetric_part(&gradient(spaces, m, Field::U, state.field(layout, Field::U), x3));
    let dut = symmetric_part(&gradient(spaces, m, Field::U, ut, x3));
    let se = elastic(p, &du);
    let set = elastic(p, &dut);
    let mesh = &spaces.meshes.biot;
    let pp = state.field(layout, Field::P);
    let pv = mesh.eval(Basis::Linear, pp, x3, 0);
    let mut sb = [[c(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sb[i][j] = se[i][j] + p.delta * set[i][j];
        }
        sb[i][i] -= p.alpha * pv;
    }
    let a = spaces.grid.symbols(m);
    let div = du[0][0] + du[1][1] + du[2][2];
    BiotStressSample {
        strain: du,
        sigma_e: se,
        sigma_b: sb,
        fluid_content: p.c0 * pv + p.alpha * div,
        darcy_flux: [
            -p.k_perm * I * a[0] * pv,
            -p.k_perm * I * a[1] * pv,
            -p.k_perm * mesh.eval(Basis::Linear, pp, x3, 1),
        ],
    }
}

/// Stresses of one mode of the fluid fields at height `x3` in [-1, 0].
pub fn fluid_stress(
    spaces: &Spaces,
    m: ModeIndex,
    p: &PhysicalParams,
    state: &ModeState,
    x3: f64,
) -> FluidStressSample {
    let layout = &spaces.layout;
    let dv = symmetric_part(&gradient(spaces, m, Field::V, state.field(layout, Field::V), x3));
    let pf = spaces
        .meshes
        .fluid
        .eval(Basis::Linear, state.field(layout, Field::Pf), x3, 0);
    let mut s = [[c(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = 2.0 * p.nu * dv[i][j];
        }
        s[i][i] -= pf;
    }
    FluidStressSample { strain: dv, sigma_f: s }
}

/// Discrete generator of the damped inertial system for one mode, acting
/// on `(u, w, p_b, z)` where the fluid velocity is `v = Z z` with `Z` an
/// orthonormal basis of the discretely divergence-free velocities.
#[derive(Debug, Clone)]
pub struct Generator {
    pub mode: ModeIndex,
    pub g: DMatrix<C>,
    pub w: DMatrix<C>,
    pub z: DMatrix<C>,
}

/// Orthonormal basis of the free velocities with vanishing discrete
/// divergence.
pub fn divergence_free_basis(spaces: &Spaces, m: ModeIndex) -> DMatrix<C> {
    let layout = &spaces.layout;
    let mut b = FormBuilder::new(spaces, m, &[Field::Pf], &[Field::V]);
    b.div_trial(1.0, Field::Pf, Field::V);
    let nv = layout.nodes(Field::V);
    let free: Vec<usize> = (0..layout.len(Field::V)).filter(|i| i % nv != 0).collect();
    let cmat = DMatrix::from_fn(b.mat.nrows(), free.len(), |i, j| b.mat[(i, free[j])]);
    let gram = cmat.adjoint() * &cmat;
    let eig = gram.symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] <= 1e-12 * top)
        .collect();
    let mut z = DMatrix::zeros(layout.len(Field::V), keep.len());
    for (col, &k) in keep.iter().enumerate() {
        for (row, &idx) in free.iter().enumerate() {
            z[(idx, col)] = eig.eigenvectors[(row, k)];
        }
    }
    z
}

pub fn assemble_generator(spaces: &Spaces, m: ModeIndex, p: &PhysicalParams) -> Result<Generator> {
    for (name, v) in [("rho_b", p.rho_b), ("rho_f", p.rho_f), ("c0", p.c0), ("delta", p.delta)] {
        if !(v > 0.0) {
            return Err(Error::DegenerateParams(name));
        }
    }
    let (u, w, pb, v) = (Field::U, Field::W, Field::P, Field::V);
    let fields = [u, w, pb, v];
    let mut a = FormBuilder::new(spaces, m, &fields, &fields);
    a.strain(p.mu, p.lambda, u, w);
    a.strain(-p.mu, -p.lambda, w, u);
    a.strain(-p.delta * p.mu, -p.delta * p.lambda, w, w);
    a.div_test(p.alpha, w, pb);
    a.point(c(1.0), (w, 2), (pb, 0));
    for j in 0..2 {
        a.point(c(p.beta), (w, j), (v, j));
        a.point(c(-p.beta), (w, j), (w, j));
    }
    a.div_trial(-p.alpha, pb, w);
    a.grad(-p.k_perm, pb, pb);
    a.point(c(1.0), (pb, 0), (v, 2));
    a.point(c(-1.0), (pb, 0), (w, 2));
    a.strain(-p.nu, 0.0, v, v);
    a.point(c(-1.0), (v, 2), (pb, 0));
    for j in 0..2 {
        a.point(c(-p.beta), (v, j), (v, j));
        a.point(c(p.beta), (v, j), (w, j));
    }

    let mut x = FormBuilder::new(spaces, m, &fields, &fields);
    x.strain(p.mu, p.lambda, u, u);
    x.mass(p.rho_b, w, w);
    x.mass(p.c0, pb, pb);
    x.mass(p.rho_f, v, v);

    // Reduction: free u, w, p_b nodes, then divergence-free velocities.
    let layout = &spaces.layout;
    let z = divergence_free_basis(spaces, m);
    let nu = layout.len(u);
    let np = layout.len(pb);
    let nun = layout.nodes(u);
    let npn = layout.nodes(pb);
    let mut cols: Vec<Vec<(usize, C)>> = Vec::new();
    for i in 0..nu {
        if i % nun != nun - 1 {
            cols.push(vec![(i, c(1.0))]);
        }
    }
    for i in 0..nu {
        if i % nun != nun - 1 {
            cols.push(vec![(nu + i, c(1.0))]);
        }
    }
    for i in 0..np {
        if i % npn != npn - 1 {
            cols.push(vec![(2 * nu + i, c(1.0))]);
        }
    }
    for k in 0..z.ncols() {
        cols.push(
            (0..z.nrows())
                .filter(|&r| z[(r, k)] != c(0.0))
                .map(|r| (2 * nu + np + r, z[(r, k)]))
                .collect(),
        );
    }
    let t = {
        let mut t = DMatrix::zeros(a.mat.nrows(), cols.len());
        for (j, col) in cols.iter().enumerate() {
            for &(r, val) in col {
                t[(r, j)] = val;
            }
        }
        t
    };
    let ar = t.adjoint() * &a.mat * &t;
    let wr = t.adjoint() * &x.mat * &t;
    let g = wr
        .clone()
        .lu()
        .solve(&ar)
        .ok_or(Error::SingularSystem { mode: m })?;
    Ok(Generator { mode: m, g, w: wr, z })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spaces(nb: usize, nf: usize) -> Spaces {
        Spaces::new(&Discretization {
            n1: 4,
            n2: 4,
            nb,
            nf,
            dt: 0.1,
            t_end: 0.1,
        })
        .unwrap()
    }

    fn elastic_only(sp: &Spaces, m: ModeIndex, p: &PhysicalParams) -> DMatrix<C> {
        let mut b = FormBuilder::new(sp, m, &[Field::U], &[Field::U]);
        b.strain(p.mu, p.lambda, Field::U, Field::U);
        b.mat
    }

    #[test]
    fn layout_counts() {
        let l = Layout::new(4, 3);
        assert_eq!(l.full_len(), 3 * 9 + 5 + 3 * 7 + 4);
        assert_eq!(l.free_len(), l.full_len() - 3 - 1 - 3);
        assert_eq!(l.to_free(l.index(Field::U, 0, 8)), None);
        assert_eq!(l.to_free(l.index(Field::V, 2, 0)), None);
        assert!(l.to_free(l.index(Field::Pf, 0, 0)).is_some());
    }

    #[test]
    fn elastic_form_of_linear_compression() {
        // u = (0, 0, 1 - x3): D u = diag(0, 0, -1), a_E(u, u) = 2 mu + lambda.
        let sp = spaces(3, 2);
        let p = PhysicalParams::unit();
        let k = elastic_only(&sp, ModeIndex::ZERO, &p);
        let n = sp.layout.nodes(Field::U);
        let mut u = DVector::zeros(3 * n);
        for (j, x) in sp.meshes.biot.nodes(Basis::Quadratic).iter().enumerate() {
            u[2 * n + j] = c(1.0 - x);
        }
        let e = (u.adjoint() * &k * &u)[(0, 0)];
        assert!((e - c(3.0)).norm() < 1e-13);
    }

    #[test]
    fn zero_data_gives_zero_rhs_and_solution() {
        let sp = spaces(3, 3);
        let m = ModeIndex::new(1, 1);
        let p = PhysicalParams::unit();
        let prior = ModeState::zeros(&sp.layout, m);
        let src = ModeSources::zeros(&sp.layout, m);
        let sys = assemble_step_system(&sp, m, &p, TimeStep::Implicit(0.1), &prior, &src).unwrap();
        assert!(sys.rhs.iter().all(|z| *z == c(0.0)));
        let next = solve_step_system(&sys, &prior).unwrap();
        assert!(next.x.iter().all(|z| *z == c(0.0)));
    }

    #[test]
    fn mode_mismatch_is_reported() {
        let sp = spaces(2, 2);
        let m = ModeIndex::new(1, 0);
        let prior = ModeState::zeros(&sp.layout, ModeIndex::ZERO);
        let src = ModeSources::zeros(&sp.layout, m);
        let r = assemble_step_system(&sp, m, &PhysicalParams::unit(), TimeStep::Steady, &prior, &src);
        assert!(matches!(r, Err(Error::ModeMismatch { .. })));
    }

    #[test]
    fn elastic_block_is_hermitian_positive_definite() {
        let sp = spaces(4, 2);
        let mut p = PhysicalParams::unit().with_regime(0.0, 0.0, 0.0, 1.0);
        p.alpha = 1e-300;
        for slot in 0..sp.grid.mode_count() {
            let m = sp.grid.mode(slot);
            let ops = step_operators(&sp, m, &p, TimeStep::Implicit(0.1));
            let n = 3 * 2 * sp.layout.nb;
            let mut idx = Vec::new();
            for (i, &f) in sp.layout.free_indices().iter().enumerate() {
                if f < sp.layout.len(Field::U) {
                    idx.push(i);
                }
            }
            assert_eq!(idx.len(), n);
            let blk = DMatrix::from_fn(n, n, |i, j| ops.matrix[(idx[i], idx[j])]);
            assert!((&blk - blk.adjoint()).norm() < 1e-12 * blk.norm());
            let eig = blk.symmetric_eigen();
            assert!(eig.eigenvalues.min() > 0.0, "{m:?}");
        }
    }

    #[test]
    fn pressure_coupling_blocks_are_exact_adjoints() {
        let sp = spaces(3, 3);
        let m = ModeIndex::new(1, -1);
        let mut p = PhysicalParams::unit();
        p.alpha = 0.0;
        let dt = 0.5;
        let (a, _) = full_step_operators(&sp, m, &p, TimeStep::Implicit(dt));
        let l = &sp.layout;
        let pi = l.index(Field::P, 0, 0);
        let u3 = l.index(Field::U, 2, 0);
        let v3 = l.index(Field::V, 2, l.interface_node(Field::V));
        // Tested with (Dt u, p, v) the interface pressure terms cancel.
        assert_eq!(a[(u3, pi)], c(-1.0));
        assert_eq!(a[(u3, pi)], -a[(pi, u3)].conj() * dt);
        assert_eq!(a[(v3, pi)], c(1.0));
        assert_eq!(a[(v3, pi)], -a[(pi, v3)].conj());
    }

    #[test]
    fn slip_blocks_are_positive_semidefinite() {
        let sp = spaces(2, 2);
        let m = ModeIndex::new(1, 0);
        let mut p = PhysicalParams::unit();
        p.beta = 2.5;
        let s = 10.0;
        let fields = [Field::U, Field::V];
        let mut b = FormBuilder::new(&sp, m, &fields, &fields);
        for j in 0..2 {
            b.point(c(p.beta * s * s), (Field::U, j), (Field::U, j));
            b.point(c(-p.beta * s), (Field::U, j), (Field::V, j));
            b.point(c(p.beta), (Field::V, j), (Field::V, j));
            b.point(c(-p.beta * s), (Field::V, j), (Field::U, j));
        }
        let eig = b.mat.symmetric_eigen();
        assert!(eig.eigenvalues.min() > -1e-12);
    }

    #[test]
    fn velocity_pressure_schur_complement_is_positive() {
        let sp = spaces(2, 4);
        let p = PhysicalParams::unit();
        for m in [ModeIndex::ZERO, ModeIndex::new(1, 0), ModeIndex::new(1, 1)] {
            let mut b = FormBuilder::new(&sp, m, &[Field::V], &[Field::V]);
            b.strain(p.nu, 0.0, Field::V, Field::V);
            for j in 0..2 {
                b.point(c(p.beta), (Field::V, j), (Field::V, j));
            }
            let mut d = FormBuilder::new(&sp, m, &[Field::Pf], &[Field::V]);
            d.div_trial(1.0, Field::Pf, Field::V);
            let nv = sp.layout.nodes(Field::V);
            let free: Vec<usize> = (0..sp.layout.len(Field::V)).filter(|i| i % nv != 0).collect();
            let av = DMatrix::from_fn(free.len(), free.len(), |i, j| b.mat[(free[i], free[j])]);
            let cm = DMatrix::from_fn(d.mat.nrows(), free.len(), |i, j| d.mat[(i, free[j])]);
            let sol = av.lu().solve(&cm.adjoint()).unwrap();
            let schur = &cm * sol;
            let eig = schur.symmetric_eigen();
            assert!(eig.eigenvalues.min() > 1e-10, "{m:?}: {}", eig.eigenvalues.min());
        }
    }

    #[test]
    fn generator_rejects_degenerate_parameters() {
        let sp = spaces(2, 2);
        let p = PhysicalParams::unit().with_regime(0.0, 1.0, 1.0, 1.0);
        assert!(matches!(
            assemble_generator(&sp, ModeIndex::ZERO, &p),
            Err(Error::DegenerateParams("rho_b"))
        ));
    }
}
