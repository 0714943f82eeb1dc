//! Uniform vertical meshes with continuous linear and quadratic elements.
//!
//! Quadratic nodes are numbered bottom to top with vertex `i` at `2i` and
//! the midpoint of cell `e` at `2e + 1`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoxSide {
    Biot,
    Fluid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    Linear,
    Quadratic,
}

impl Basis {
    pub fn name(self) -> &'static str {
        match self {
            Basis::Linear => "P1",
            Basis::Quadratic => "P2",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "P1" => Some(Basis::Linear),
            "P2" => Some(Basis::Quadratic),
            _ => None,
        }
    }

    fn local_count(self) -> usize {
        match self {
            Basis::Linear => 2,
            Basis::Quadratic => 3,
        }
    }

    // Local shape functions and reference derivatives at xi in [0, 1].
    fn shape(self, xi: f64) -> ([f64; 3], [f64; 3]) {
        match self {
            Basis::Linear => ([1.0 - xi, xi, 0.0], [-1.0, 1.0, 0.0]),
            Basis::Quadratic => (
                [
                    (1.0 - xi) * (1.0 - 2.0 * xi),
                    4.0 * xi * (1.0 - xi),
                    xi * (2.0 * xi - 1.0),
                ],
                [4.0 * xi - 3.0, 4.0 - 8.0 * xi, 4.0 * xi - 1.0],
            ),
        }
    }

    fn global(self, cell: usize, local: usize) -> usize {
        match self {
            Basis::Linear => cell + local,
            Basis::Quadratic => 2 * cell + local,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerticalMesh {
    pub side: BoxSide,
    pub cells: usize,
    pub lo: f64,
    pub hi: f64,
}

const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

impl VerticalMesh {
    /// Uniform mesh of the Biot box (0, 1) or the fluid box (-1, 0).
    pub fn uniform(side: BoxSide, cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::violation(
                match side {
                    BoxSide::Biot => "nb",
                    BoxSide::Fluid => "nf",
                },
                cells as f64,
            ));
        }
        let (lo, hi) = match side {
            BoxSide::Biot => (0.0, 1.0),
            BoxSide::Fluid => (-1.0, 0.0),
        };
        Ok(VerticalMesh { side, cells, lo, hi })
    }

    pub fn h(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    pub fn node_count(&self, basis: Basis) -> usize {
        match basis {
            Basis::Linear => self.cells + 1,
            Basis::Quadratic => 2 * self.cells + 1,
        }
    }

    pub fn nodes(&self, basis: Basis) -> Vec<f64> {
        let n = self.node_count(basis);
        let step = (self.hi - self.lo) / (n - 1) as f64;
        (0..n)
            .map(|i| if i == n - 1 { self.hi } else { self.lo + i as f64 * step })
            .collect()
    }

    /// Node index on x3 = 0.
    pub fn interface_node(&self, basis: Basis) -> usize {
        match self.side {
            BoxSide::Biot => 0,
            BoxSide::Fluid => self.node_count(basis) - 1,
        }
    }

    /// Node index on the outer boundary (top of the Biot box, bottom of the
    /// fluid box).
    pub fn outer_node(&self, basis: Basis) -> usize {
        match self.side {
            BoxSide::Biot => self.node_count(basis) - 1,
            BoxSide::Fluid => 0,
        }
    }

    /// Matrix `G[i, j] = int d^dt(test_i) d^dr(trial_j) dx3` with vertical
    /// derivative orders `dt`, `dr` in {0, 1}.
    pub fn gram(&self, test: Basis, dt: u8, trial: Basis, dr: u8) -> DMatrix<f64> {
        let h = self.h();
        let mut g = DMatrix::zeros(self.node_count(test), self.node_count(trial));
        for cell in 0..self.cells {
            for &(xi, w) in &GAUSS3 {
                let (vt, gt) = test.shape(xi);
                let (vr, gr) = trial.shape(xi);
                for a in 0..test.local_count() {
                    let ta = if dt == 1 { gt[a] / h } else { vt[a] };
                    for b in 0..trial.local_count() {
                        let rb = if dr == 1 { gr[b] / h } else { vr[b] };
                        g[(test.global(cell, a), trial.global(cell, b))] += w * h * ta * rb;
                    }
                }
            }
        }
        g
    }

    /// Value (`deriv = 0`) or vertical derivative (`deriv = 1`) of a nodal
    /// function at `x`. At interior vertices the cell above is used,
    /// matching the one-sided convention at the box ends.
    pub fn eval<T>(&self, basis: Basis, coeffs: &[T], x: f64, deriv: u8) -> T
    where
        T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + Default,
    {
        let h = self.h();
        let s = ((x - self.lo) / h).clamp(0.0, self.cells as f64);
        let cell = (s.floor() as usize).min(self.cells - 1);
        let xi = s - cell as f64;
        let (v, g) = basis.shape(xi);
        let mut acc = T::default();
        for a in 0..basis.local_count() {
            let phi = if deriv == 1 { g[a] / h } else { v[a] };
            acc = acc + coeffs[basis.global(cell, a)] * phi;
        }
        acc
    }

    /// Second derivative of a quadratic nodal function on one cell.
    pub fn second_derivative<T>(&self, coeffs: &[T], cell: usize) -> T
    where
        T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        let h2 = self.h() * self.h();
        let i = 2 * cell;
        coeffs[i] * (4.0 / h2) + coeffs[i + 1] * (-8.0 / h2) + coeffs[i + 2] * (4.0 / h2)
    }

    /// Gauss points and weights over the whole mesh (three per cell).
    pub fn quadrature(&self) -> Vec<(f64, f64)> {
        let h = self.h();
        let mut out = Vec::with_capacity(3 * self.cells);
        for cell in 0..self.cells {
            for &(xi, w) in &GAUSS3 {
                out.push((self.lo + (cell as f64 + xi) * h, w * h));
            }
        }
        out
    }
}

/// Vertical mesh pair for the two boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshPair {
    pub biot: VerticalMesh,
    pub fluid: VerticalMesh,
}

impl MeshPair {
    pub fn new(nb: usize, nf: usize) -> Result<Self> {
        Ok(MeshPair {
            biot: VerticalMesh::uniform(BoxSide::Biot, nb)?,
            fluid: VerticalMesh::uniform(BoxSide::Fluid, nf)?,
        })
    }

    pub fn side(&self, side: BoxSide) -> &VerticalMesh {
        match side {
            BoxSide::Biot => &self.biot,
            BoxSide::Fluid => &self.fluid,
        }
    }
}

/// All vertical Gram matrices of one mesh, indexed by
/// (test basis, test derivative, trial basis, trial derivative).
#[derive(Debug, Clone)]
pub struct Grams {
    mats: Vec<DMatrix<f64>>,
}

impl Grams {
    pub fn new(mesh: &VerticalMesh) -> Self {
        let mut mats = Vec::with_capacity(16);
        for tb in [Basis::Linear, Basis::Quadratic] {
            for td in 0..2u8 {
                for rb in [Basis::Linear, Basis::Quadratic] {
                    for rd in 0..2u8 {
                        mats.push(mesh.gram(tb, td, rb, rd));
                    }
                }
            }
        }
        Grams { mats }
    }

    pub fn get(&self, test: Basis, dt: u8, trial: Basis, dr: u8) -> &DMatrix<f64> {
        let b = |x: Basis| match x {
            Basis::Linear => 0,
            Basis::Quadratic => 1,
        };
        &self.mats[((b(test) * 2 + dt as usize) * 2 + b(trial)) * 2 + dr as usize]
    }
}
