use bsqs::assembly::Spaces;
use bsqs::config::{Discretization, PhysicalParams, RunConfig, SweepParam};
use bsqs::error::Error;
use bsqs::integrator::{random_smooth_data, run};
use bsqs::limit::{estimate_rate, run_sweep, trajectory_distance, SweepSpec};

fn small() -> Discretization {
    Discretization {
        n1: 4,
        n2: 4,
        nb: 6,
        nf: 6,
        dt: 1.0 / 32.0,
        t_end: 0.25,
    }
}

fn spec(param: SweepParam, base: PhysicalParams, disc: Discretization, seed: u64) -> SweepSpec {
    let cfg = RunConfig::new(base, disc);
    let sp = Spaces::new(&disc).unwrap();
    // Data compatible with the storage-free reference.
    let mut p0 = base;
    p0.c0 = 0.0;
    let data = random_smooth_data(&sp, &p0, seed).unwrap();
    SweepSpec {
        base: cfg,
        param,
        values: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
        data,
    }
}

#[test]
fn sweeps_shrink_towards_the_limit() {
    let disc = small();
    for (name, param, base) in [
        ("rho", SweepParam::RhoJoint, PhysicalParams::unit().with_regime(0.0, 0.0, 0.1, 1.0)),
        ("delta", SweepParam::Delta, PhysicalParams::unit().with_regime(0.0, 0.0, 0.0, 1.0)),
        ("c0", SweepParam::C0, PhysicalParams::unit().with_regime(0.0, 0.0, 0.0, 0.0)),
    ] {
        let r = run_sweep(&spec(param, base, disc, 5)).unwrap();
        for k in 0..4 {
            let d: Vec<f64> = r.rows.iter().map(|row| row.distances()[k]).collect();
            assert!(d.windows(2).all(|w| w[1] < w[0]), "{name} D{}: {d:?}", k + 1);
        }
        let _ = estimate_rate(&r).unwrap();
    }
}

#[test]
fn rho_sweep_needs_damping_first() {
    let disc = Discretization { n1: 2, n2: 2, nb: 2, nf: 2, dt: 0.1, t_end: 0.2 };
    let s = spec(SweepParam::RhoJoint, PhysicalParams::unit().with_regime(0.0, 0.0, 0.0, 1.0), disc, 1);
    assert!(matches!(run_sweep(&s), Err(Error::OrderingViolation)));
    let mut bad = spec(SweepParam::Delta, PhysicalParams::unit(), disc, 1);
    bad.values = vec![1e-2, 1e-1];
    assert!(matches!(run_sweep(&bad), Err(Error::InvalidSweep(_))));
}

#[test]
fn distance_identities() {
    let disc = Discretization { n1: 4, n2: 4, nb: 4, nf: 4, dt: 0.1, t_end: 0.3 };
    let cfg = RunConfig::new(PhysicalParams::unit(), disc);
    let sp = Spaces::new(&disc).unwrap();
    let a = run(&cfg, &random_smooth_data(&sp, &cfg.physics, 9).unwrap()).unwrap();
    let zero = trajectory_distance(&a, &a).unwrap();
    assert_eq!(zero.distances(), [0.0; 4]);
    let eps = 1e-3;
    let mut b = a.clone();
    for s in &mut b.states {
        s.u = s.u.scaled(1.0 + eps);
    }
    let d = trajectory_distance(&b, &a).unwrap();
    let forms = bsqs::energy::EnergyForms::new(&sp);
    let sup = a
        .states
        .iter()
        .map(|s| forms.energy_norm_sq(&a.params, &s.u).sqrt())
        .fold(0.0, f64::max);
    assert!((d.d1 - eps * sup).abs() <= 1e-12 * sup);
    let again = trajectory_distance(&b, &a).unwrap();
    assert_eq!(d, again);
    let mut short = a.clone();
    short.states.pop();
    assert!(matches!(trajectory_distance(&short, &a), Err(Error::GridMismatch(_))));
}
