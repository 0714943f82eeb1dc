use bsqs::greens::{dirichlet_extension, finite_difference_extension, neumann_extension, ExtensionKind};
use bsqs::spectral::ModeIndex;
use num_complex::Complex64 as C;
use proptest::prelude::*;

fn max_error(m: ModeIndex, kind: ExtensionKind, data: C) -> f64 {
    let exact = match kind {
        ExtensionKind::Dirichlet => dirichlet_extension(m, data),
        ExtensionKind::Neumann => neumann_extension(m, data),
    };
    let (xs, vals) = finite_difference_extension(m, kind, data, 1000);
    xs.iter().zip(&vals).map(|(x, v)| (exact.eval(*x) - v).norm()).fold(0.0, f64::max)
}

#[test]
fn closed_forms_match_finite_differences() {
    for (k1, k2) in [(0, 0), (1, 0), (3, 4), (8, 8)] {
        let m = ModeIndex::new(k1, k2);
        for kind in [ExtensionKind::Dirichlet, ExtensionKind::Neumann] {
            let e = max_error(m, kind, C::new(1.0, 0.0));
            assert!(e <= 1e-8, "{m:?} {kind:?}: {e:e}");
        }
    }
}

#[test]
fn dirichlet_decay_is_monotone_in_kappa() {
    let mut last = f64::INFINITY;
    for k in 0..40 {
        let v = dirichlet_extension(ModeIndex::new(k, 0), C::new(1.0, 0.0)).eval(-1.0).norm();
        assert!(v < last);
        last = v;
    }
}

#[test]
fn boundary_conditions_hold() {
    for (k1, k2) in [(0, 0), (2, -1), (5, 5)] {
        let m = ModeIndex::new(k1, k2);
        let h = C::new(0.3, 0.7);
        let d = dirichlet_extension(m, h);
        assert!((d.eval(0.0) - h).norm() < 1e-15);
        assert!(d.derivative(-1.0).norm() < 1e-12);
        let n = neumann_extension(m, h);
        assert!(n.eval(0.0).norm() < 1e-15);
        assert!((n.derivative(-1.0) - h).norm() < 1e-12);
    }
}

proptest! {
    #[test]
    fn extensions_are_linear(k1 in -6i64..6, k2 in -6i64..6, a in -3.0f64..3.0, re in -1.0f64..1.0, im in -1.0f64..1.0, x in -1.0f64..0.0) {
        let m = ModeIndex::new(k1, k2);
        let h = C::new(re, im);
        let d1 = dirichlet_extension(m, h * a).eval(x);
        let d2 = dirichlet_extension(m, h).eval(x) * a;
        prop_assert!((d1 - d2).norm() <= 1e-14 * (1.0 + d2.norm()));
        let n1 = neumann_extension(m, h * a).eval(x);
        let n2 = neumann_extension(m, h).eval(x) * a;
        prop_assert!((n1 - n2).norm() <= 1e-14 * (1.0 + n2.norm()));
    }
}
