//! Harmonic extensions into the fluid box, mode by mode, and the fluid
//! pressure rebuilt from the pore pressure and the fluid velocity.
//!
//! For a lateral mode with wavenumber kappa every extension solves
//! `phi'' - kappa^2 phi = 0` on (-1, 0). Profiles are stored as
//! `P e^{kappa x3} + Q e^{-kappa (x3 + 1)}`, which stays bounded for any
//! kappa, instead of the textbook sinh/cosh pair.

use num_complex::Complex64 as C;

use crate::config::PhysicalParams;
use crate::error::{Error, Result};
use crate::mesh::{Basis, BoxSide, VerticalMesh};
use crate::spectral::{wavenumber, ModeIndex};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtensionProfile {
    pub mode: ModeIndex,
    pub kappa: f64,
    repr: Repr,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Repr {
    /// `a x3 + b`.
    Affine { a: C, b: C },
    /// `p e^{kappa x3} + q e^{-kappa (x3 + 1)}`.
    Exp { p: C, q: C },
}

impl ExtensionProfile {
    fn zero(mode: ModeIndex) -> Self {
        let kappa = wavenumber(mode);
        let repr = if kappa == 0.0 {
            Repr::Affine { a: C::default(), b: C::default() }
        } else {
            Repr::Exp { p: C::default(), q: C::default() }
        };
        ExtensionProfile { mode, kappa, repr }
    }

    /// Coefficients `(A, B)` of `A sinh(kappa x3) + B cosh(kappa x3)`, or
    /// of `A x3 + B` at kappa = 0.
    pub fn coefficients(&self) -> (C, C) {
        match self.repr {
            Repr::Affine { a, b } => (a, b),
            Repr::Exp { p, q } => {
                let e = (-self.kappa).exp();
                (p - q * e, p + q * e)
            }
        }
    }

    pub fn eval(&self, x3: f64) -> C {
        match self.repr {
            Repr::Affine { a, b } => a * x3 + b,
            Repr::Exp { p, q } => p * (self.kappa * x3).exp() + q * (-self.kappa * (x3 + 1.0)).exp(),
        }
    }

    pub fn derivative(&self, x3: f64) -> C {
        match self.repr {
            Repr::Affine { a, .. } => a,
            Repr::Exp { p, q } => {
                let k = self.kappa;
                (p * (k * x3).exp() - q * (-k * (x3 + 1.0)).exp()) * k
            }
        }
    }

    fn combine(self, other: ExtensionProfile) -> ExtensionProfile {
        let repr = match (self.repr, other.repr) {
            (Repr::Affine { a, b }, Repr::Affine { a: c, b: d }) => Repr::Affine { a: a + c, b: b + d },
            (Repr::Exp { p, q }, Repr::Exp { p: r, q: s }) => Repr::Exp { p: p + r, q: q + s },
            _ => unreachable!("profiles of one mode share a representation"),
        };
        ExtensionProfile { repr, ..self }
    }
}

/// `phi'(-1) = 0`, `phi(0) = h`.
pub fn dirichlet_extension(m: ModeIndex, h: C) -> ExtensionProfile {
    let kappa = wavenumber(m);
    let repr = if kappa == 0.0 {
        Repr::Affine { a: C::default(), b: h }
    } else {
        let e = (-kappa).exp();
        let p = h / (1.0 + e * e);
        Repr::Exp { p, q: p * e }
    };
    ExtensionProfile { mode: m, kappa, repr }
}

/// `phi(0) = 0`, `phi'(-1) = g`.
pub fn neumann_extension(m: ModeIndex, g: C) -> ExtensionProfile {
    let kappa = wavenumber(m);
    let repr = if kappa == 0.0 {
        Repr::Affine { a: g, b: C::default() }
    } else {
        let e = (-kappa).exp();
        let s = g / (kappa * (1.0 + e * e));
        Repr::Exp { p: s * e, q: -s }
    };
    ExtensionProfile { mode: m, kappa, repr }
}

/// Fluid pressure of one mode from the pore-pressure trace on the
/// interface and the vertical fluid velocity profile: the Dirichlet
/// extension of `p_b(0) + 2 nu v3'(0)` plus the Neumann extension of
/// `nu (v3'' - kappa^2 v3)(-1)`. Boundary derivatives come from the
/// adjacent element, so the Neumann datum is only first-order accurate.
pub fn reconstruct_fluid_pressure(
    m: ModeIndex,
    pb_trace: C,
    v3: &[C],
    mesh: &VerticalMesh,
    p: &PhysicalParams,
) -> Result<ExtensionProfile> {
    if mesh.side != BoxSide::Fluid || mesh.hi != 0.0 {
        return Err(Error::NoInterfaceNode);
    }
    let n = mesh.node_count(Basis::Quadratic);
    if v3.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: v3.len(),
        });
    }
    let kappa = wavenumber(m);
    let dv = mesh.eval(Basis::Quadratic, v3, 0.0, 1);
    let lap = mesh.second_derivative(v3, 0) - v3[0] * (kappa * kappa);
    let pi1 = dirichlet_extension(m, pb_trace);
    let pi2 = dirichlet_extension(m, dv * (2.0 * p.nu));
    let pi3 = neumann_extension(m, lap * p.nu);
    Ok(ExtensionProfile::zero(m).combine(pi1).combine(pi2).combine(pi3))
}

/// Which boundary-value problem a finite-difference reference solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtensionKind {
    Dirichlet,
    Neumann,
}

/// Reference solution of an extension problem on `points` uniform nodes
/// of [-1, 0] with the fourth-order compact (Numerov) scheme, improved by
/// one Richardson step against the grid with twice the resolution.
/// Returns node positions and values.
pub fn finite_difference_extension(m: ModeIndex, kind: ExtensionKind, data: C, points: usize) -> (Vec<f64>, Vec<C>) {
    let coarse = numerov(wavenumber(m), kind, data, points);
    let fine = numerov(wavenumber(m), kind, data, 2 * points - 1);
    let xs: Vec<f64> = (0..points).map(|i| -1.0 + i as f64 / (points - 1) as f64).collect();
    let vals = (0..points)
        .map(|i| (fine[2 * i] * 16.0 - coarse[i]) / 15.0)
        .collect();
    (xs, vals)
}

// Numerov on x_i = -1 + i h. The Neumann end uses a ghost node from the
// Taylor expansion with phi''' = kappa^2 phi' and phi^(5) = kappa^4 phi'.
fn numerov(kappa: f64, kind: ExtensionKind, data: C, points: usize) -> Vec<C> {
    let n = points;
    let h = 1.0 / (n - 1) as f64;
    let r = kappa * kappa * h * h / 12.0;
    let (off, diag) = (1.0 - r, -2.0 - 10.0 * r);
    // Tridiagonal system on nodes 0..n-2; node n-1 is the Dirichlet end.
    let (bottom, top) = match kind {
        ExtensionKind::Dirichlet => (C::default(), data),
        ExtensionKind::Neumann => (data, C::default()),
    };
    let m = n - 1;
    let mut lower = vec![off; m];
    let mut main = vec![diag; m];
    let mut upper = vec![off; m];
    let mut rhs = vec![C::default(); m];
    // Node 0: ghost phi_{-1} = phi_1 - 2 h g - h^3 k^2 g / 3 - h^5 k^4 g / 60.
    let k2 = kappa * kappa;
    let ghost = bottom * (2.0 * h + h.powi(3) * k2 / 3.0 + h.powi(5) * k2 * k2 / 60.0);
    upper[0] = 2.0 * off;
    rhs[0] = ghost * off;
    rhs[m - 1] -= top * off;
    lower[0] = 0.0;
    // Thomas algorithm.
    for i in 1..m {
        let w = lower[i] / main[i - 1];
        main[i] -= w * upper[i - 1];
        let prev = rhs[i - 1];
        rhs[i] -= prev * w;
    }
    let mut x = vec![C::default(); n];
    x[n - 1] = top;
    x[m - 1] = rhs[m - 1] / main[m - 1];
    for i in (0..m - 1).rev() {
        x[i] = (rhs[i] - x[i + 1] * upper[i]) / main[i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: C = C { re: 1.0, im: 0.0 };

    #[test]
    fn zero_mode_extensions_are_affine() {
        let d = dirichlet_extension(ModeIndex::ZERO, ONE);
        let n = neumann_extension(ModeIndex::ZERO, ONE);
        for x in [-1.0, -0.3, 0.0] {
            assert_eq!(d.eval(x), ONE);
            assert!((n.eval(x) - x).norm() < 1e-15);
        }
    }

    #[test]
    fn first_mode_values() {
        let m = ModeIndex::new(1, 0);
        let tau = 2.0 * std::f64::consts::PI;
        let d = dirichlet_extension(m, ONE);
        assert!((d.eval(-1.0).re - 1.0 / tau.cosh()).abs() < 1e-15);
        assert!((d.eval(-1.0).re - 3.7349e-3).abs() < 1e-7);
        let n = neumann_extension(m, ONE);
        assert!((n.eval(-1.0).re + tau.tanh() / tau).abs() < 1e-15);
        assert_eq!(n.eval(0.0), C::default());
        assert!((n.derivative(-1.0) - ONE).norm() < 1e-14);
        assert!(d.derivative(-1.0).norm() < 1e-14);
    }

    #[test]
    fn sinh_cosh_coefficients() {
        let m = ModeIndex::new(0, 1);
        let k = wavenumber(m);
        let (a, b) = dirichlet_extension(m, ONE).coefficients();
        assert!((a.re - k.tanh()).abs() < 1e-14 && (b.re - 1.0).abs() < 1e-14);
        let (a, b) = neumann_extension(m, ONE).coefficients();
        assert!((a.re - 1.0 / (k * k.cosh())).abs() < 1e-15 && b.norm() < 1e-15);
    }

    #[test]
    fn profiles_solve_the_mode_equation() {
        let eps = 1e-4;
        for m in [ModeIndex::new(1, 0), ModeIndex::new(2, 3)] {
            let k2 = wavenumber(m).powi(2);
            for f in [dirichlet_extension(m, ONE), neumann_extension(m, C::new(0.0, 2.0))] {
                for x in [-0.9, -0.5, -0.1] {
                    let fd = (f.eval(x + eps) - f.eval(x - eps)) / (2.0 * eps);
                    assert!((fd - f.derivative(x)).norm() < 1e-6 * (1.0 + f.derivative(x).norm()));
                    let second = (f.derivative(x + eps) - f.derivative(x - eps)) / (2.0 * eps);
                    let res = (second - f.eval(x) * k2).norm();
                    assert!(res < 1e-6 * k2 * k2 * (1.0 + f.eval(x).norm()), "{res:e}");
                }
            }
        }
    }

    #[test]
    fn huge_wavenumbers_stay_finite() {
        let m = ModeIndex::new(400, 300);
        let d = dirichlet_extension(m, ONE);
        let n = neumann_extension(m, ONE);
        for x in [-1.0, -0.5, -1e-3, 0.0] {
            assert!(d.eval(x).is_finite() && n.eval(x).is_finite());
        }
        assert!((d.eval(0.0) - ONE).norm() < 1e-15);
    }

    #[test]
    fn numerov_reference_matches_closed_form() {
        let m = ModeIndex::new(1, 0);
        for kind in [ExtensionKind::Dirichlet, ExtensionKind::Neumann] {
            let (xs, vals) = finite_difference_extension(m, kind, ONE, 1000);
            let exact = match kind {
                ExtensionKind::Dirichlet => dirichlet_extension(m, ONE),
                ExtensionKind::Neumann => neumann_extension(m, ONE),
            };
            let err = xs
                .iter()
                .zip(&vals)
                .map(|(x, v)| (exact.eval(*x) - v).norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "{kind:?}: {err:e}");
        }
    }

    #[test]
    fn zero_velocity_gives_pore_pressure_extension() {
        let mesh = VerticalMesh::uniform(BoxSide::Fluid, 4).unwrap();
        let m = ModeIndex::new(1, 1);
        let h = C::new(0.5, -0.25);
        let pi = reconstruct_fluid_pressure(m, h, &[C::default(); 9], &mesh, &PhysicalParams::unit()).unwrap();
        let d = dirichlet_extension(m, h);
        for x in [-1.0, -0.5, 0.0] {
            assert!((pi.eval(x) - d.eval(x)).norm() < 1e-15);
        }
        let biot = VerticalMesh::uniform(BoxSide::Biot, 4).unwrap();
        assert!(matches!(
            reconstruct_fluid_pressure(m, h, &[C::default(); 9], &biot, &PhysicalParams::unit()),
            Err(Error::NoInterfaceNode)
        ));
    }
}
