use bsqs::config::{Discretization, PhysicalParams};
use bsqs::spectral::ModeIndex;
use bsqs::verification::*;

fn print(r: &ConvergenceReport) {
    println!("{}", r.case);
    for l in &r.levels {
        println!("  h={:.4} dt={:.4} {:?}", l.h, l.dt, l.values.map(|v| format!("{v:.3e}")));
    }
    for (name, o) in ConvergenceReport::COLUMNS[2..].iter().zip(&r.orders) {
        println!("  {name}: {:?}", o.map(|f| (f.slope, f.residual)));
    }
}

fn params() -> PhysicalParams {
    PhysicalParams::unit()
}

fn vertical(case: ManufacturedCase, cells: Vec<usize>, dt: f64, t_end: f64) -> ConvergenceReport {
    let spec = StudySpec {
        case,
        params: params(),
        lateral: 4,
        t_end,
        refinement: Refinement::Vertical { cells, dt },
    };
    let r = convergence_study(&spec).unwrap();
    print(&r);
    r
}

fn at_least(r: &ConvergenceReport, column: &str, order: f64) {
    let fit = r.order(column).unwrap_or_else(|| panic!("no order for {column}"));
    assert!(fit.slope >= order, "{column}: order {} < {order}", fit.slope);
}

#[test]
fn steady_smooth_case_converges_vertically() {
    let case = ManufacturedCase::single_mode(ModeIndex::new(1, 0), VerticalProfile::Smooth, TimeProfile::Steady);
    let r = vertical(case, vec![4, 8, 16], 0.1, 0.1);
    at_least(&r, "u_energy", 2.0 - 0.1);
    at_least(&r, "v_h1", 1.9);
    at_least(&r, "pf_l2", 1.9);
    at_least(&r, "p_h1", 0.95);
}

#[test]
fn transient_smooth_case_converges_vertically() {
    let case = ManufacturedCase::single_mode(ModeIndex::new(1, 1), VerticalProfile::Smooth, TimeProfile::Linear);
    let r = vertical(case, vec![4, 8, 16], 0.125, 0.5);
    at_least(&r, "u_energy", 1.9);
    at_least(&r, "v_h1", 1.9);
    at_least(&r, "pf_l2", 1.9);
    at_least(&r, "p_h1", 0.95);
}

#[test]
fn transient_case_converges_in_time() {
    let case = ManufacturedCase::single_mode(ModeIndex::new(1, 0), VerticalProfile::Polynomial, TimeProfile::Decay);
    let spec = StudySpec {
        case,
        params: params(),
        lateral: 4,
        t_end: 0.5,
        refinement: Refinement::Temporal {
            cells: 4,
            dts: vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0],
        },
    };
    let r = convergence_study(&spec).unwrap();
    print(&r);
    at_least(&r, "u_energy", 0.9);
    at_least(&r, "p_h1", 0.9);
    at_least(&r, "v_h1", 0.9);
}

#[test]
fn reconstructed_pressure_converges() {
    let case = ManufacturedCase::reconstruction(ModeIndex::new(1, 0), &params()).unwrap();
    let data = manufacture_sources(&case, &params()).unwrap();
    let g = data.defects.as_ref().unwrap();
    assert!(g.g4.eval([0.2, 0.3, 0.0], 0.0).abs() < 1e-12);
    let r = vertical(case, vec![4, 8, 16], 0.1, 0.1);
    at_least(&r, "reconstruction", 1.0);
}

#[test]
fn compatible_case_needs_no_defects() {
    let p = params();
    let case = ManufacturedCase::compatible(&p);
    let mut data = manufacture_sources(&case, &p).unwrap();
    let g = data.defects.take().unwrap();
    for t in [0.0, 0.3] {
        let x = [0.4, 0.1, 0.0];
        let vals = [g.g1.eval(x, t), g.g2[0].eval(x, t), g.g2[1].eval(x, t), g.g3[0].eval(x, t), g.g3[1].eval(x, t), g.g3[2].eval(x, t), g.g4.eval(x, t)];
        assert!(vals.iter().all(|v| v.abs() < 1e-14), "{vals:?}");
    }
    let disc = Discretization {
        n1: 4,
        n2: 4,
        nb: 4,
        nf: 4,
        dt: 0.1,
        t_end: 0.5,
    };
    let run = solve_manufactured(&case, &data, &p, &disc).unwrap();
    let e = run.errors;
    println!("{e:?}");
    for x in [e.u_energy, e.p_h1, e.v_h1, e.pf_l2] {
        assert!(x < 1e-8, "{e:?}");
    }
}

#[test]
fn steady_elastic_case_matches_hand_derivation() {
    use bsqs::config::Expr;
    let p = PhysicalParams {
        lambda: 1.7,
        mu: 0.6,
        ..PhysicalParams::unit()
    };
    let w = Expr::parse("sin(pi*(1-x3)/2)*cos(2*pi*x1)").unwrap();
    let mut case = ManufacturedCase::zero();
    case.u[2] = w;
    let data = manufacture_sources(&case, &p).unwrap();
    let g = data.defects.unwrap();
    let pi = std::f64::consts::PI;
    let (lam, mu) = (p.lambda, p.mu);
    for x in [[0.1, 0.7, 0.3], [0.35, 0.2, 0.9], [0.8, 0.5, 0.05]] {
        let s = (2.0 * pi * x[0]).sin();
        let c = (2.0 * pi * x[0]).cos();
        let a = (pi * (1.0 - x[2]) / 2.0).sin();
        let b = (pi * (1.0 - x[2]) / 2.0).cos();
        let f1 = -(lam + mu) * pi * pi * s * b;
        let f3 = (4.0 * pi * pi * mu + (2.0 * mu + lam) * pi * pi / 4.0) * a * c;
        assert!((data.body_force[0].eval(x, 0.0) - f1).abs() < 1e-12);
        assert!(data.body_force[1].eval(x, 0.0).abs() < 1e-12);
        assert!((data.body_force[2].eval(x, 0.0) - f3).abs() < 1e-12);
        let on = [x[0], x[1], 0.0];
        assert!((g.g3[0].eval(on, 0.0) - 2.0 * pi * mu * s).abs() < 1e-12);
        assert!(g.g3[1].eval(on, 0.0).abs() < 1e-12);
        assert!(g.g3[2].eval(on, 0.0).abs() < 1e-12);
    }
}

#[test]
fn storage_source_includes_rate_and_darcy_terms() {
    use bsqs::config::Expr;
    let p = PhysicalParams {
        c0: 0.3,
        k_perm: 2.5,
        ..PhysicalParams::unit()
    };
    let mut case = ManufacturedCase::zero();
    case.steady = false;
    case.p = Expr::parse("exp(-t)*(1-x3)*cos(2*pi*x1)").unwrap();
    let data = manufacture_sources(&case, &p).unwrap();
    let pi = std::f64::consts::PI;
    for (x, t) in [([0.1, 0.2, 0.3], 0.0), ([0.6, 0.9, 0.75], 0.8)] {
        let pb = (-t as f64).exp() * (1.0 - x[2]) * (2.0 * pi * x[0]).cos();
        let expected = -p.c0 * pb + p.k_perm * 4.0 * pi * pi * pb;
        assert!((data.mass_source.eval(x, t) - expected).abs() < 1e-12);
    }
}

#[test]
fn zero_defects_reduce_to_the_plain_weak_form() {
    use bsqs::config::Expr;
    let p = params();
    let case = ManufacturedCase::single_mode(ModeIndex::new(1, 0), VerticalProfile::Smooth, TimeProfile::Decay);
    let mut data = manufacture_sources(&case, &p).unwrap();
    let disc = Discretization {
        n1: 4,
        n2: 4,
        nb: 4,
        nf: 4,
        dt: 0.1,
        t_end: 0.3,
    };
    data.defects = None;
    let plain = solve_manufactured(&case, &data, &p, &disc).unwrap();
    let z = Expr::num(0.0);
    data.defects = Some(DefectExprs {
        g1: z.clone(),
        g2: [z.clone(), z.clone()],
        g3: [z.clone(), z.clone(), z.clone()],
        g4: z,
    });
    let zeroed = solve_manufactured(&case, &data, &p, &disc).unwrap();
    assert_eq!(plain.last, zeroed.last);
}
