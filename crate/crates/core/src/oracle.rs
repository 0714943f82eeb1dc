//! Dense real-space reference solver for one implicit step.
//!
//! All lateral sample points are coupled in one real matrix. Lateral
//! derivatives use the trigonometric differentiation matrix on the periodic
//! grid; the vertical elements are the ones of the spectral pipeline. The
//! result therefore agrees with the per-mode solves up to rounding, which is
//! what the tests exploit.

use nalgebra::{DMatrix, DVector};

use crate::assembly::{Field, Spaces};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::integrator::{RealSources, State};
use crate::mesh::Basis;
use crate::spectral::LateralTransform;

/// Largest number of unknowns the oracle will factorize.
pub const ORACLE_LIMIT: usize = 6000;

/// Periodic spectral differentiation on `n` points of the unit interval.
/// The Nyquist component is annihilated.
pub fn periodic_derivative(n: usize) -> DMatrix<f64> {
    let pi = std::f64::consts::PI;
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return 0.0;
        }
        let d = i as f64 - j as f64;
        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
        if n % 2 == 0 {
            pi * sign / (pi * d / n as f64).tan()
        } else {
            pi * sign / (pi * d / n as f64).sin()
        }
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Op {
    Val,
    X1,
    X2,
    X3,
}

const FIELDS: [Field; 4] = [Field::U, Field::P, Field::V, Field::Pf];

struct RealForm<'a> {
    spaces: &'a Spaces,
    npts: usize,
    d1: DMatrix<f64>,
    d2: DMatrix<f64>,
    offsets: Vec<(Field, usize)>,
    mat: DMatrix<f64>,
}

impl<'a> RealForm<'a> {
    fn new(spaces: &'a Spaces, cols: &[Field]) -> Self {
        let (n1, n2) = (spaces.grid.n1, spaces.grid.n2);
        let npts = n1 * n2;
        let eye = |n| DMatrix::<f64>::identity(n, n);
        let d1 = periodic_derivative(n1).kronecker(&eye(n2));
        let d2 = eye(n1).kronecker(&periodic_derivative(n2));
        let mut offsets = Vec::new();
        let mut off = 0;
        for &f in cols {
            offsets.push((f, off));
            off += f.comps() * npts * spaces.layout.nodes(f);
        }
        let rows = FIELDS.iter().map(|f| f.comps() * npts * spaces.layout.nodes(*f)).sum();
        RealForm {
            spaces,
            npts,
            d1,
            d2,
            offsets,
            mat: DMatrix::zeros(rows, off),
        }
    }

    fn at(&self, f: Field, k: usize, pt: usize, node: usize) -> usize {
        let off = self.offsets.iter().find(|o| o.0 == f).unwrap().1;
        off + (k * self.npts + pt) * self.spaces.layout.nodes(f) + node
    }

    fn lateral(&self, op: Op) -> Option<&DMatrix<f64>> {
        match op {
            Op::X1 => Some(&self.d1),
            Op::X2 => Some(&self.d2),
            _ => None,
        }
    }

    /// `coef * sum_pts int op(trial) op(test) dx3`.
    fn add(&mut self, coef: f64, test: (Field, usize, Op), trial: (Field, usize, Op)) {
        if coef == 0.0 {
            return;
        }
        let grams = self.spaces.grams(test.0.side());
        let g = grams
            .get(test.0.basis(), (test.2 == Op::X3) as u8, trial.0.basis(), (trial.2 == Op::X3) as u8)
            .clone();
        let n = self.npts;
        let lat = match (self.lateral(test.2), self.lateral(trial.2)) {
            (None, None) => DMatrix::identity(n, n),
            (Some(a), None) => a.transpose(),
            (None, Some(b)) => b.clone(),
            (Some(a), Some(b)) => a.transpose() * b,
        };
        for p in 0..n {
            for q in 0..n {
                let l = lat[(p, q)];
                if l == 0.0 {
                    continue;
                }
                for i in 0..g.nrows() {
                    let r = self.at(test.0, test.1, p, i);
                    for j in 0..g.ncols() {
                        let c = self.at(trial.0, trial.1, q, j);
                        self.mat[(r, c)] += coef * l * g[(i, j)];
                    }
                }
            }
        }
    }

    fn interface(&mut self, coef: f64, test: (Field, usize), trial: (Field, usize)) {
        if coef == 0.0 {
            return;
        }
        let l = &self.spaces.layout;
        let (ti, ri) = (l.interface_node(test.0), l.interface_node(trial.0));
        for p in 0..self.npts {
            let r = self.at(test.0, test.1, p, ti);
            let c = self.at(trial.0, trial.1, p, ri);
            self.mat[(r, c)] += coef;
        }
    }

    fn mass(&mut self, coef: f64, test: Field, trial: Field) {
        for k in 0..test.comps() {
            self.add(coef, (test, k, Op::Val), (trial, k, Op::Val));
        }
    }

    /// Symmetric-gradient and divergence parts of the elastic form.
    fn elastic(&mut self, mu: f64, lam: f64, test: Field, trial: Field) {
        let ops = [Op::X1, Op::X2, Op::X3];
        for a in 0..3 {
            for b in 0..3 {
                // D_ab = (d_b u_a + d_a u_b) / 2, so 2 mu D:D gives both terms with weight mu.
                self.add(mu, (test, a, ops[b]), (trial, a, ops[b]));
                self.add(mu, (test, a, ops[b]), (trial, b, ops[a]));
                self.add(lam, (test, a, ops[a]), (trial, b, ops[b]));
            }
        }
    }

    /// `coef * (scalar trial, div test)`.
    fn pressure_div(&mut self, coef: f64, test: Field, trial: Field) {
        let ops = [Op::X1, Op::X2, Op::X3];
        for k in 0..3 {
            self.add(coef, (test, k, ops[k]), (trial, 0, Op::Val));
        }
    }

    /// `coef * (div trial, scalar test)`.
    fn div_pressure(&mut self, coef: f64, test: Field, trial: Field) {
        let ops = [Op::X1, Op::X2, Op::X3];
        for k in 0..3 {
            self.add(coef, (test, 0, Op::Val), (trial, k, ops[k]));
        }
    }

    fn diffusion(&mut self, coef: f64, test: Field, trial: Field) {
        for op in [Op::X1, Op::X2, Op::X3] {
            self.add(coef, (test, 0, op), (trial, 0, op));
        }
    }
}

/// One implicit step of the coupled system assembled over every lateral
/// sample point at once. `sources` are the loads at the new time level.
pub fn dense_real_space_oracle(cfg: &RunConfig, prior: &State, sources: &RealSources) -> Result<State> {
    cfg.validate()?;
    let spaces = Spaces::new(&cfg.disc)?;
    let l = &spaces.layout;
    let npts = spaces.grid.points();
    let total = npts * l.full_len();
    if total > ORACLE_LIMIT {
        return Err(Error::TooLarge {
            dofs: total,
            limit: ORACLE_LIMIT,
        });
    }
    let p = &cfg.physics;
    let dt = cfg.disc.dt;
    let s = 1.0 / dt;
    let (u, pb, v, pf) = (Field::U, Field::P, Field::V, Field::Pf);

    let mut a = RealForm::new(&spaces, &FIELDS);
    a.mass(p.rho_b * s * s, u, u);
    a.elastic((1.0 + p.delta * s) * p.mu, (1.0 + p.delta * s) * p.lambda, u, u);
    a.pressure_div(-p.alpha, u, pb);
    a.interface(-1.0, (u, 2), (pb, 0));
    a.mass(p.c0 * s, pb, pb);
    a.div_pressure(p.alpha * s, pb, u);
    a.diffusion(p.k_perm, pb, pb);
    a.interface(-1.0, (pb, 0), (v, 2));
    a.interface(s, (pb, 0), (u, 2));
    a.mass(p.rho_f * s, v, v);
    a.elastic(p.nu, 0.0, v, v);
    a.pressure_div(-1.0, v, pf);
    a.interface(1.0, (v, 2), (pb, 0));
    for j in 0..2 {
        a.interface(-p.beta, (u, j), (v, j));
        a.interface(p.beta * s, (u, j), (u, j));
        a.interface(p.beta, (v, j), (v, j));
        a.interface(-p.beta * s, (v, j), (u, j));
    }
    a.div_pressure(-1.0, pf, v);

    let mut cols = FIELDS.to_vec();
    cols.push(Field::W);
    let mut r = RealForm::new(&spaces, &cols);
    r.mass(p.rho_b * s * s, u, u);
    r.mass(p.rho_b * s, u, Field::W);
    r.elastic(p.delta * s * p.mu, p.delta * s * p.lambda, u, u);
    r.mass(p.c0 * s, pb, pb);
    r.div_pressure(p.alpha * s, pb, u);
    r.interface(s, (pb, 0), (u, 2));
    r.mass(p.rho_f * s, v, v);
    for j in 0..2 {
        r.interface(p.beta * s, (u, j), (u, j));
        r.interface(-p.beta * s, (v, j), (u, j));
    }

    // Prior state and loads in real space.
    let tr = LateralTransform::new(spaces.grid);
    let mut prior_vec = Vec::with_capacity(r.mat.ncols());
    for f in [&prior.u, &prior.p, &prior.v, &prior.pf] {
        prior_vec.extend(tr.inverse(f)?);
    }
    let w_len = 3 * npts * l.nodes(u);
    match &prior.w {
        Some(w) => prior_vec.extend(tr.inverse(w)?),
        None => prior_vec.extend(std::iter::repeat_n(0.0, w_len)),
    }
    let prior_vec = DVector::from_vec(prior_vec);
    let mut rhs = &r.mat * prior_vec;

    let bq = spaces.meshes.biot.node_count(Basis::Quadratic);
    let fq = spaces.meshes.fluid.node_count(Basis::Quadratic);
    let expect = [(3 * npts * bq, sources.fb.len()), (npts * bq, sources.s.len()), (3 * npts * fq, sources.ff.len())];
    for (e, f) in expect {
        if e != f {
            return Err(Error::DimensionMismatch { expected: e, found: f });
        }
    }
    let mixed = spaces.grams(pb.side()).get(Basis::Linear, 0, Basis::Quadratic, 0);
    let loads: [(Field, &DMatrix<f64>, &[f64]); 3] = [
        (u, spaces.mass(u), &sources.fb),
        (pb, mixed, &sources.s),
        (v, spaces.mass(v), &sources.ff),
    ];
    for (f, m, data) in loads {
        let nq = m.ncols();
        for k in 0..f.comps() {
            for pt in 0..npts {
                let chunk = DVector::from_column_slice(&data[(k * npts + pt) * nq..][..nq]);
                let lv = m * chunk;
                for (i, val) in lv.iter().enumerate() {
                    rhs[a.at(f, k, pt, i)] += val;
                }
            }
        }
    }

    // Homogeneous constraints: clamped top of the Biot box, no-slip bottom.
    let mut free = Vec::new();
    for f in FIELDS {
        let n = l.nodes(f);
        let fixed = match f {
            Field::U | Field::P => Some(n - 1),
            Field::V => Some(0),
            _ => None,
        };
        for k in 0..f.comps() {
            for pt in 0..npts {
                for j in 0..n {
                    if Some(j) != fixed {
                        free.push(a.at(f, k, pt, j));
                    }
                }
            }
        }
    }
    let nfree = free.len();
    let mat = DMatrix::from_fn(nfree, nfree, |i, j| a.mat[(free[i], free[j])]);
    let b = DVector::from_fn(nfree, |i, _| rhs[free[i]]);
    let x = mat.lu().solve(&b).ok_or(Error::SingularSystem {
        mode: crate::spectral::ModeIndex::ZERO,
    })?;
    let mut full = vec![0.0; a.mat.ncols()];
    for (i, &idx) in free.iter().enumerate() {
        full[idx] = x[i];
    }

    let mut next = State::zeros(&spaces, prior.w.is_some() || p.rho_b > 0.0);
    next.t = prior.t + dt;
    let mut off = 0;
    for f in FIELDS {
        let n = l.nodes(f);
        let len = f.comps() * npts * n;
        let slice = &full[off..off + len];
        let field = tr.forward(slice, f.side(), f.basis(), f.comps(), n)?;
        if f == Field::U {
            if let Some(w) = &mut next.w {
                let old = tr.inverse(&prior.u)?;
                let vel: Vec<f64> = slice.iter().zip(&old).map(|(a, b)| (a - b) / dt).collect();
                *w = tr.forward(&vel, f.side(), f.basis(), 3, n)?;
            }
        }
        match f {
            Field::U => next.u = field,
            Field::P => next.p = field,
            Field::V => next.v = field,
            _ => next.pf = field,
        }
        off += len;
    }
    Ok(next)
}
