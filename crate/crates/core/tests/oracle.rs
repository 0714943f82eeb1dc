use bsqs::assembly::Spaces;
use bsqs::config::{Discretization, Expr, PhysicalParams, RunConfig, SourceTerm};
use bsqs::integrator::{initialize, random_smooth_data, step, SourceSampler, State};
use bsqs::oracle::dense_real_space_oracle;
use bsqs::spectral::SpectralField;

fn tiny(regime: (f64, f64, f64, f64)) -> RunConfig {
    let disc = Discretization {
        n1: 4,
        n2: 4,
        nb: 4,
        nf: 4,
        dt: 0.05,
        t_end: 0.05,
    };
    let mut cfg = RunConfig::new(
        PhysicalParams::unit().with_regime(regime.0, regime.1, regime.2, regime.3),
        disc,
    );
    let e = |s: &str| SourceTerm::Expr(Expr::parse(s).unwrap());
    cfg.sources.body_force[0] = e("sin(2*pi*x1)*(1-x3)*t");
    cfg.sources.mass_source = e("cos(2*pi*x2)*x3");
    cfg.sources.fluid_force[2] = e("cos(2*pi*(x1+x2))*(1+x3)");
    cfg
}

fn rel(a: &SpectralField, b: &SpectralField) -> f64 {
    let num: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.data.iter().map(|y| y.norm_sqr()).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn compare(regime: (f64, f64, f64, f64), seed: u64) -> f64 {
    let cfg = tiny(regime);
    let sp = Spaces::new(&cfg.disc).unwrap();
    let data = random_smooth_data(&sp, &cfg.physics, seed).unwrap();
    let s0 = initialize(&cfg, &data).unwrap();
    let sampler = SourceSampler::new(&sp, &cfg.sources);
    let t1 = cfg.disc.dt;
    let spectral = step(&s0, &cfg, &sampler.at(t1, 1).unwrap()).unwrap();
    let dense = dense_real_space_oracle(&cfg, &s0, &sampler.samples(t1, 1)).unwrap();
    let mut worst = rel(&spectral.u, &dense.u)
        .max(rel(&spectral.p, &dense.p))
        .max(rel(&spectral.v, &dense.v))
        .max(rel(&spectral.pf, &dense.pf));
    if let (Some(a), Some(b)) = (&spectral.w, &dense.w) {
        worst = worst.max(rel(a, b));
    }
    worst
}

#[test]
fn inertial_damped_step_matches_oracle() {
    let d = compare((1.0, 1.0, 1.0, 1.0), 1);
    assert!(d <= 1e-9, "{d:e}");
}

#[test]
fn quasi_static_damped_step_matches_oracle() {
    let d = compare((0.0, 0.0, 1.0, 1.0), 2);
    assert!(d <= 1e-9, "{d:e}");
}

#[test]
fn degenerate_step_matches_oracle() {
    let d = compare((0.0, 0.0, 0.0, 0.0), 3);
    assert!(d <= 1e-9, "{d:e}");
}

#[test]
fn laterally_constant_data_only_excites_the_zero_mode() {
    let mut cfg = tiny((1.0, 1.0, 1.0, 1.0));
    cfg.sources = Default::default();
    let sp = Spaces::new(&cfg.disc).unwrap();
    let mut prior = State::zeros(&sp, true);
    for (j, z) in prior.u.profile_mut(2, 0).iter_mut().enumerate() {
        let n = sp.layout.nodes(bsqs::assembly::Field::U);
        *z = (1.0 - j as f64 / (n - 1) as f64).into();
    }
    let sampler = SourceSampler::new(&sp, &cfg.sources);
    let dense = dense_real_space_oracle(&cfg, &prior, &sampler.samples(0.05, 1)).unwrap();
    let spectral = step(&prior, &cfg, &sampler.at(0.05, 1).unwrap()).unwrap();
    assert!(rel(&spectral.u, &dense.u) < 1e-10);
    for slot in 1..sp.grid.mode_count() {
        assert!(dense.u.profile(2, slot).iter().all(|z| z.norm() < 1e-12));
    }
}
