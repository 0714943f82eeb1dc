//! Lateral Fourier bookkeeping.
//!
//! Real fields are sampled on the uniform periodic grid x1 = i1/n1,
//! x2 = i2/n2 and stored as a half spectrum: k1 in [0, n1/2], k2 in FFT
//! order. The forward transform carries the factor 1/(n1 n2), so the k = 0
//! coefficient is the lateral mean.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::mesh::{Basis, BoxSide, VerticalMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeIndex {
    pub k1: i64,
    pub k2: i64,
}

impl ModeIndex {
    pub const ZERO: ModeIndex = ModeIndex { k1: 0, k2: 0 };

    pub fn new(k1: i64, k2: i64) -> Self {
        ModeIndex { k1, k2 }
    }
}

/// kappa = 2 pi |k|.
pub fn wavenumber(m: ModeIndex) -> f64 {
    2.0 * PI * ((m.k1 * m.k1 + m.k2 * m.k2) as f64).sqrt()
}

/// Lateral sample counts and the layout of the stored half spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LateralGrid {
    pub n1: usize,
    pub n2: usize,
}

impl LateralGrid {
    pub fn new(n1: usize, n2: usize) -> Self {
        LateralGrid { n1, n2 }
    }

    pub fn points(&self) -> usize {
        self.n1 * self.n2
    }

    /// Number of stored half-spectrum modes.
    pub fn mode_count(&self) -> usize {
        (self.n1 / 2 + 1) * self.n2
    }

    pub fn mode(&self, slot: usize) -> ModeIndex {
        let j1 = slot / self.n2;
        let j2 = slot % self.n2;
        let k2 = if j2 <= self.n2 / 2 {
            j2 as i64
        } else {
            j2 as i64 - self.n2 as i64
        };
        ModeIndex::new(j1 as i64, k2)
    }

    pub fn slot(&self, m: ModeIndex) -> Option<usize> {
        let half1 = (self.n1 / 2) as i64;
        let half2 = (self.n2 / 2) as i64;
        if m.k1 < 0 || m.k1 > half1 || m.k2 <= -half2 || m.k2 > half2 {
            return None;
        }
        let j2 = m.k2.rem_euclid(self.n2 as i64) as usize;
        Some(m.k1 as usize * self.n2 + j2)
    }

    pub fn modes(&self) -> impl Iterator<Item = ModeIndex> + '_ {
        (0..self.mode_count()).map(move |s| self.mode(s))
    }

    /// Multiplicity of a stored mode in the full spectrum.
    pub fn weight(&self, m: ModeIndex) -> f64 {
        if m.k1 == 0 || m.k1 == (self.n1 / 2) as i64 {
            1.0
        } else {
            2.0
        }
    }

    /// Slot of the stored mode whose coefficient is the conjugate of this
    /// one (itself for self-conjugate modes, `None` when the partner lies
    /// outside the stored half).
    pub fn partner(&self, slot: usize) -> Option<usize> {
        let j1 = slot / self.n2;
        let j2 = slot % self.n2;
        if j1 == 0 || j1 == self.n1 / 2 {
            Some(j1 * self.n2 + (self.n2 - j2) % self.n2)
        } else {
            None
        }
    }

    /// Modes that must be solved; the remaining stored modes are the
    /// conjugates of canonical ones.
    pub fn is_canonical(&self, slot: usize) -> bool {
        match self.partner(slot) {
            None => true,
            Some(p) => p >= slot,
        }
    }

    /// Fourier symbols of the lateral derivatives, i a_j. The Nyquist
    /// wavenumber has symbol zero so derivatives of real fields stay real.
    pub fn symbols(&self, m: ModeIndex) -> [f64; 2] {
        let a = |k: i64, n: usize| {
            if k.unsigned_abs() as usize * 2 == n {
                0.0
            } else {
                2.0 * PI * k as f64
            }
        };
        [a(m.k1, self.n1), a(m.k2, self.n2)]
    }
}

/// Per-mode complex vertical profiles of one field.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    pub grid: LateralGrid,
    pub side: BoxSide,
    pub basis: Basis,
    pub comps: usize,
    /// Vertical node count of the field's basis.
    pub nvert: usize,
    /// Indexed `(comp * mode_count + slot) * nvert + node`.
    pub data: Vec<Complex64>,
}

impl SpectralField {
    pub fn zeros(grid: LateralGrid, side: BoxSide, basis: Basis, comps: usize, nvert: usize) -> Self {
        SpectralField {
            grid,
            side,
            basis,
            comps,
            nvert,
            data: vec![Complex64::new(0.0, 0.0); comps * grid.mode_count() * nvert],
        }
    }

    pub fn profile(&self, comp: usize, slot: usize) -> &[Complex64] {
        let start = (comp * self.grid.mode_count() + slot) * self.nvert;
        &self.data[start..start + self.nvert]
    }

    pub fn profile_mut(&mut self, comp: usize, slot: usize) -> &mut [Complex64] {
        let start = (comp * self.grid.mode_count() + slot) * self.nvert;
        &mut self.data[start..start + self.nvert]
    }

    pub fn same_shape(&self, other: &SpectralField) -> bool {
        self.grid == other.grid
            && self.side == other.side
            && self.basis == other.basis
            && self.comps == other.comps
            && self.nvert == other.nvert
    }

    pub fn scaled(&self, a: f64) -> SpectralField {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|z| *z *= a);
        out
    }

    /// Overwrites the non-canonical slots of the self-conjugate columns with
    /// the conjugates of their canonical partners; self-paired slots become real.
    pub fn enforce_hermitian(&mut self) {
        let grid = self.grid;
        for c in 0..self.comps {
            for slot in 0..grid.mode_count() {
                let Some(p) = grid.partner(slot) else { continue };
                if p < slot {
                    continue;
                }
                for j in 0..self.nvert {
                    let a = self.profile(c, slot)[j];
                    if p == slot {
                        self.profile_mut(c, slot)[j] = Complex64::new(a.re, 0.0);
                    } else {
                        self.profile_mut(c, p)[j] = a.conj();
                    }
                }
            }
        }
    }

    /// Parseval-weighted sum over modes of `f(slot, profile)`.
    pub fn weighted_sum(&self, mut f: impl FnMut(usize, usize, &[Complex64]) -> f64) -> f64 {
        let mut total = 0.0;
        for c in 0..self.comps {
            for slot in 0..self.grid.mode_count() {
                let w = self.grid.weight(self.grid.mode(slot));
                total += w * f(c, slot, self.profile(c, slot));
            }
        }
        total
    }
}

/// Cached FFT plans for one lateral grid.
pub struct LateralTransform {
    grid: LateralGrid,
    f1: Arc<dyn Fft<f64>>,
    f2: Arc<dyn Fft<f64>>,
    b1: Arc<dyn Fft<f64>>,
    b2: Arc<dyn Fft<f64>>,
}

impl LateralTransform {
    pub fn new(grid: LateralGrid) -> Self {
        let mut planner = FftPlanner::new();
        LateralTransform {
            grid,
            f1: planner.plan_fft_forward(grid.n1),
            f2: planner.plan_fft_forward(grid.n2),
            b1: planner.plan_fft_inverse(grid.n1),
            b2: planner.plan_fft_inverse(grid.n2),
        }
    }

    // In-place 2D transform of an n1 x n2 row-major array.
    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let (n1, n2) = (self.grid.n1, self.grid.n2);
        let (p1, p2) = if inverse { (&self.b1, &self.b2) } else { (&self.f1, &self.f2) };
        for row in buf.chunks_mut(n2) {
            p2.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n1];
        for i2 in 0..n2 {
            for i1 in 0..n1 {
                col[i1] = buf[i1 * n2 + i2];
            }
            p1.process(&mut col);
            for i1 in 0..n1 {
                buf[i1 * n2 + i2] = col[i1];
            }
        }
    }

    /// Samples laid out `((comp * n1 + i1) * n2 + i2) * nvert + node`.
    pub fn forward(
        &self,
        samples: &[f64],
        side: BoxSide,
        basis: Basis,
        comps: usize,
        nvert: usize,
    ) -> Result<SpectralField> {
        let grid = self.grid;
        let npts = grid.points();
        let expected = comps * npts * nvert;
        if samples.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: samples.len(),
            });
        }
        let mut out = SpectralField::zeros(grid, side, basis, comps, nvert);
        let scale = 1.0 / npts as f64;
        let mut buf = vec![Complex64::new(0.0, 0.0); npts];
        let kept = grid.mode_count();
        for c in 0..comps {
            for j in 0..nvert {
                for (p, b) in buf.iter_mut().enumerate() {
                    *b = Complex64::new(samples[(c * npts + p) * nvert + j], 0.0);
                }
                self.fft2(&mut buf, false);
                for slot in 0..kept {
                    out.profile_mut(c, slot)[j] = buf[slot] * scale;
                }
            }
        }
        out.enforce_hermitian();
        Ok(out)
    }

    pub fn inverse(&self, field: &SpectralField) -> Result<Vec<f64>> {
        let grid = self.grid;
        if field.grid != grid {
            return Err(Error::DimensionMismatch {
                expected: grid.mode_count(),
                found: field.grid.mode_count(),
            });
        }
        let mut f = field.clone();
        f.enforce_hermitian();
        let (n1, n2) = (grid.n1, grid.n2);
        let npts = grid.points();
        let nvert = f.nvert;
        let mut out = vec![0.0; f.comps * npts * nvert];
        let mut buf = vec![Complex64::new(0.0, 0.0); npts];
        for c in 0..f.comps {
            for j in 0..nvert {
                for i1 in 0..n1 {
                    for i2 in 0..n2 {
                        buf[i1 * n2 + i2] = if i1 <= n1 / 2 {
                            f.profile(c, i1 * n2 + i2)[j]
                        } else {
                            let s = (n1 - i1) * n2 + (n2 - i2) % n2;
                            f.profile(c, s)[j].conj()
                        };
                    }
                }
                self.fft2(&mut buf, true);
                for (p, b) in buf.iter().enumerate() {
                    out[(c * npts + p) * nvert + j] = b.re;
                }
            }
        }
        Ok(out)
    }
}

/// Forward transform with freshly planned FFTs.
pub fn forward_transform(
    grid: LateralGrid,
    samples: &[f64],
    side: BoxSide,
    basis: Basis,
    comps: usize,
    nvert: usize,
) -> Result<SpectralField> {
    LateralTransform::new(grid).forward(samples, side, basis, comps, nvert)
}

pub fn inverse_transform(field: &SpectralField) -> Result<Vec<f64>> {
    LateralTransform::new(field.grid).inverse(field)
}

/// Per-mode values at x3 = 0, indexed `comp * mode_count + slot`.
pub fn interface_trace(f: &SpectralField, mesh: &VerticalMesh) -> Result<Vec<Complex64>> {
    if mesh.side != f.side {
        return Err(Error::MeshMismatch(format!(
            "field lives on the {:?} box, mesh on the {:?} box",
            f.side, mesh.side
        )));
    }
    let nodes = mesh.nodes(f.basis);
    if nodes.len() != f.nvert {
        return Err(Error::MeshMismatch(format!(
            "field has {} vertical nodes, mesh {}",
            f.nvert,
            nodes.len()
        )));
    }
    let idx = nodes
        .iter()
        .position(|x| x.abs() < 1e-14)
        .ok_or(Error::NoInterfaceNode)?;
    let modes = f.grid.mode_count();
    let mut out = Vec::with_capacity(f.comps * modes);
    for c in 0..f.comps {
        for slot in 0..modes {
            out.push(f.profile(c, slot)[idx]);
        }
    }
    Ok(out)
}
