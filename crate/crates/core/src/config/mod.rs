//! Run configuration: physical coefficients, grid and time parameters,
//! source terms, initial data and run plan, plus the line-oriented text
//! format they are read from.
//!
//! ```text
//! # comment
//! physics.lambda = 1.0
//! grid.n1 = 8
//! time.dt = 0.015625
//! sources.fb3 = exp(-t)*cos(2*pi*x1)
//! run.u0_3 = sin(pi*(1 - x3)/2)*cos(2*pi*x1)
//! ```

pub mod expr;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

pub use expr::Expr;

use crate::error::{Error, Result};

/// Model coefficients. Every field must be stated explicitly in a config
/// file; which of them vanish selects the model regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub c0: f64,
    pub k_perm: f64,
    pub nu: f64,
    pub beta: f64,
    pub rho_b: f64,
    pub rho_f: f64,
    pub delta: f64,
}

impl PhysicalParams {
    /// All coefficients equal to one.
    pub fn unit() -> Self {
        PhysicalParams {
            lambda: 1.0,
            mu: 1.0,
            alpha: 1.0,
            c0: 1.0,
            k_perm: 1.0,
            nu: 1.0,
            beta: 1.0,
            rho_b: 1.0,
            rho_f: 1.0,
            delta: 1.0,
        }
    }

    /// Copy with the regime coefficients replaced.
    pub fn with_regime(mut self, rho_b: f64, rho_f: f64, delta: f64, c0: f64) -> Self {
        self.rho_b = rho_b;
        self.rho_f = rho_f;
        self.delta = delta;
        self.c0 = c0;
        self
    }

    pub(crate) const KEYS: [&'static str; 10] = [
        "lambda", "mu", "alpha", "c0", "k_perm", "nu", "beta", "rho_b", "rho_f", "delta",
    ];

    fn values(&self) -> [f64; 10] {
        [
            self.lambda,
            self.mu,
            self.alpha,
            self.c0,
            self.k_perm,
            self.nu,
            self.beta,
            self.rho_b,
            self.rho_f,
            self.delta,
        ]
    }

    fn strictly_positive(key: &str) -> bool {
        matches!(key, "lambda" | "mu" | "alpha" | "k_perm" | "nu" | "beta")
    }

    fn from_values(v: [f64; 10]) -> Self {
        PhysicalParams {
            lambda: v[0],
            mu: v[1],
            alpha: v[2],
            c0: v[3],
            k_perm: v[4],
            nu: v[5],
            beta: v[6],
            rho_b: v[7],
            rho_f: v[8],
            delta: v[9],
        }
    }
}

/// Checks the sign hypotheses and returns the parameters unchanged.
pub fn validate_params(p: PhysicalParams) -> Result<PhysicalParams> {
    for (key, value) in PhysicalParams::KEYS.iter().zip(p.values()) {
        let ok = if PhysicalParams::strictly_positive(key) {
            value > 0.0
        } else {
            value >= 0.0
        };
        if !ok || !value.is_finite() {
            return Err(Error::violation(key, value));
        }
    }
    Ok(p)
}

/// The fixed filtration geometry: Biot box (0,1)^3 above the fluid box
/// (0,1)^2 x (-1,0), laterally periodic, interface at x3 = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainSpec;

impl DomainSpec {
    pub const BIOT_X3: (f64, f64) = (0.0, 1.0);
    pub const FLUID_X3: (f64, f64) = (-1.0, 0.0);
    pub const INTERFACE_X3: f64 = 0.0;
    pub const TOP_X3: f64 = 1.0;
    pub const BOTTOM_X3: f64 = -1.0;
    pub const LATERAL_PERIOD: f64 = 1.0;
    pub const LATERALLY_PERIODIC: bool = true;
    /// Unit normal on the interface, outward from the fluid box.
    pub const NORMAL: [f64; 3] = [0.0, 0.0, 1.0];
    pub const TANGENTS: [[f64; 3]; 2] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    pub n1: usize,
    pub n2: usize,
    pub nb: usize,
    pub nf: usize,
    pub dt: f64,
    pub t_end: f64,
}

impl Default for Discretization {
    fn default() -> Self {
        Discretization {
            n1: 8,
            n2: 8,
            nb: 16,
            nf: 16,
            dt: 1e-2,
            t_end: 0.5,
        }
    }
}

impl Discretization {
    pub fn validate(self) -> Result<Self> {
        for (key, n) in [("n1", self.n1), ("n2", self.n2)] {
            if n < 4 || n % 2 != 0 {
                return Err(Error::violation(key, n as f64));
            }
        }
        for (key, n) in [("nb", self.nb), ("nf", self.nf)] {
            if n < 2 {
                return Err(Error::violation(key, n as f64));
            }
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::violation("dt", self.dt));
        }
        if !(self.t_end >= self.dt) || !self.t_end.is_finite() {
            return Err(Error::violation("t_end", self.t_end));
        }
        Ok(self)
    }

    /// Number of time steps, requiring t_end / dt to be an integer to 1e-9.
    pub fn step_count(&self) -> Result<usize> {
        let ratio = self.t_end / self.dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::violation("t_end", self.t_end));
        }
        Ok(n as usize)
    }
}

/// One scalar component of a source.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceTerm {
    Expr(Expr),
    /// Real samples per time step `n` (t = n dt), each laid out
    /// lateral-row-major with the vertical quadratic nodes innermost.
    Sampled(Arc<Vec<Vec<f64>>>),
}

impl SourceTerm {
    pub fn zero() -> Self {
        SourceTerm::Expr(Expr::Num(0.0))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SourceTerm::Expr(e) if e.is_zero())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    /// Body force on the Biot box.
    pub body_force: [SourceTerm; 3],
    /// Fluid mass source on the Biot box.
    pub mass_source: SourceTerm,
    /// Force on the fluid box.
    pub fluid_force: [SourceTerm; 3],
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            body_force: [SourceTerm::zero(), SourceTerm::zero(), SourceTerm::zero()],
            mass_source: SourceTerm::zero(),
            fluid_force: [SourceTerm::zero(), SourceTerm::zero(), SourceTerm::zero()],
        }
    }
}

impl SourceSpec {
    pub fn is_zero(&self) -> bool {
        self.body_force.iter().all(SourceTerm::is_zero)
            && self.mass_source.is_zero()
            && self.fluid_force.iter().all(SourceTerm::is_zero)
    }

    /// Checks sampled terms against the grid: one sample set per step
    /// (including t = 0) and the right number of points per set.
    pub fn validate(&self, disc: &Discretization) -> Result<()> {
        let steps = disc.step_count()?;
        let lateral = disc.n1 * disc.n2;
        let checks = self
            .body_force
            .iter()
            .chain(std::iter::once(&self.mass_source))
            .map(|s| (s, 2 * disc.nb + 1))
            .chain(self.fluid_force.iter().map(|s| (s, 2 * disc.nf + 1)));
        for (term, nvert) in checks {
            if let SourceTerm::Sampled(data) = term {
                if data.len() != steps + 1 {
                    return Err(Error::DimensionMismatch {
                        expected: steps + 1,
                        found: data.len(),
                    });
                }
                for slice in data.iter() {
                    if slice.len() != lateral * nvert {
                        return Err(Error::DimensionMismatch {
                            expected: lateral * nvert,
                            found: slice.len(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which coefficient a limit sweep drives to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// rho_b = rho_f = value
    RhoJoint,
    Delta,
    C0,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::RhoJoint => "rho_joint",
            SweepParam::Delta => "delta",
            SweepParam::C0 => "c0",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rho_joint" => Some(SweepParam::RhoJoint),
            "delta" => Some(SweepParam::Delta),
            "c0" => Some(SweepParam::C0),
            _ => None,
        }
    }

    /// Parameters with the swept coefficient(s) set to `value`.
    pub fn apply(self, p: PhysicalParams, value: f64) -> PhysicalParams {
        let mut q = p;
        match self {
            SweepParam::RhoJoint => {
                q.rho_b = value;
                q.rho_f = value;
            }
            SweepParam::Delta => q.delta = value,
            SweepParam::C0 => q.c0 = value,
        }
        q
    }
}

/// Initial data as closed-form expressions plus an optional sweep request.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub u0: [Expr; 3],
    pub u1: [Expr; 3],
    pub d0: Expr,
    pub v0: [Expr; 3],
    pub sweep: Option<(SweepParam, Vec<f64>)>,
}

impl Default for RunPlan {
    fn default() -> Self {
        let z = || Expr::Num(0.0);
        RunPlan {
            u0: [z(), z(), z()],
            u1: [z(), z(), z()],
            d0: z(),
            v0: [z(), z(), z()],
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub physics: PhysicalParams,
    pub disc: Discretization,
    pub sources: SourceSpec,
    pub plan: RunPlan,
}

impl RunConfig {
    pub fn new(physics: PhysicalParams, disc: Discretization) -> Self {
        RunConfig {
            physics,
            disc,
            sources: SourceSpec::default(),
            plan: RunPlan::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_params(self.physics)?;
        self.disc.validate()?;
        self.disc.step_count()?;
        self.sources.validate(&self.disc)?;
        if let Some((_, values)) = &self.plan.sweep {
            if values.is_empty() {
                return Err(Error::InvalidSweep("empty value list".into()));
            }
        }
        Ok(())
    }

    /// Renders the configuration in the text format accepted by
    /// [`parse_config`]. Sampled source terms have no text form and are
    /// written as comments.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let p = &self.physics;
        for (key, value) in PhysicalParams::KEYS.iter().zip(p.values()) {
            let _ = writeln!(out, "physics.{key} = {value:?}");
        }
        let d = &self.disc;
        let _ = writeln!(out, "grid.n1 = {}", d.n1);
        let _ = writeln!(out, "grid.n2 = {}", d.n2);
        let _ = writeln!(out, "grid.nb = {}", d.nb);
        let _ = writeln!(out, "grid.nf = {}", d.nf);
        let _ = writeln!(out, "time.dt = {:?}", d.dt);
        let _ = writeln!(out, "time.t_end = {:?}", d.t_end);
        let mut source = |key: String, term: &SourceTerm| match term {
            SourceTerm::Expr(e) => {
                let _ = writeln!(out, "sources.{key} = {e}");
            }
            SourceTerm::Sampled(_) => {
                let _ = writeln!(out, "# sources.{key} is sampled");
            }
        };
        for (i, t) in self.sources.body_force.iter().enumerate() {
            source(format!("fb{}", i + 1), t);
        }
        source("s".into(), &self.sources.mass_source);
        for (i, t) in self.sources.fluid_force.iter().enumerate() {
            source(format!("ff{}", i + 1), t);
        }
        let plan = &self.plan;
        for (name, exprs) in [("u0", &plan.u0), ("u1", &plan.u1), ("v0", &plan.v0)] {
            for (i, e) in exprs.iter().enumerate() {
                let _ = writeln!(out, "run.{name}_{} = {e}", i + 1);
            }
        }
        let _ = writeln!(out, "run.d0 = {}", plan.d0);
        if let Some((param, values)) = &plan.sweep {
            let _ = writeln!(out, "run.sweep = {}", param.name());
            let list: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "run.sweep_values = {}", list.join(", "));
        }
        out
    }
}

/// Parses the line-oriented configuration format and validates the
/// result. Physical keys are mandatory; grid and time keys default to
/// [`Discretization::default`].
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            reason: "expected 'section.key = value'".into(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !key.contains('.') {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("key '{key}' lacks a section"),
            });
        }
        if entries.insert(key.clone(), (line_no, value)).is_some() {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("duplicate key '{key}'"),
            });
        }
    }

    let mut take = |key: &str| entries.remove(key);
    let number = |key: &str, entry: (usize, String)| -> Result<f64> {
        entry.1.parse::<f64>().map_err(|_| Error::Parse {
            line: entry.0,
            reason: format!("'{key}' expects a number, found '{}'", entry.1),
        })
    };
    let integer = |key: &str, entry: (usize, String)| -> Result<usize> {
        entry.1.parse::<usize>().map_err(|_| Error::Parse {
            line: entry.0,
            reason: format!("'{key}' expects a non-negative integer, found '{}'", entry.1),
        })
    };
    let expression = |entry: (usize, String)| -> Result<Expr> {
        Expr::parse(&entry.1).map_err(|reason| Error::Parse {
            line: entry.0,
            reason,
        })
    };

    let mut phys = [0.0; 10];
    for (slot, key) in phys.iter_mut().zip(PhysicalParams::KEYS) {
        let full = format!("physics.{key}");
        let entry = take(&full).ok_or_else(|| Error::Parse {
            line: 0,
            reason: format!("missing required key '{full}'"),
        })?;
        *slot = number(key, entry)?;
    }
    let physics = PhysicalParams::from_values(phys);

    let mut disc = Discretization::default();
    for (key, slot) in [
        ("grid.n1", &mut disc.n1),
        ("grid.n2", &mut disc.n2),
        ("grid.nb", &mut disc.nb),
        ("grid.nf", &mut disc.nf),
    ] {
        if let Some(entry) = take(key) {
            *slot = integer(key, entry)?;
        }
    }
    if let Some(entry) = take("time.dt") {
        disc.dt = number("dt", entry)?;
    }
    if let Some(entry) = take("time.t_end") {
        disc.t_end = number("t_end", entry)?;
    }

    let mut sources = SourceSpec::default();
    for i in 0..3 {
        if let Some(entry) = take(&format!("sources.fb{}", i + 1)) {
            sources.body_force[i] = SourceTerm::Expr(expression(entry)?);
        }
        if let Some(entry) = take(&format!("sources.ff{}", i + 1)) {
            sources.fluid_force[i] = SourceTerm::Expr(expression(entry)?);
        }
    }
    if let Some(entry) = take("sources.s") {
        sources.mass_source = SourceTerm::Expr(expression(entry)?);
    }

    let mut plan = RunPlan::default();
    for i in 0..3 {
        if let Some(entry) = take(&format!("run.u0_{}", i + 1)) {
            plan.u0[i] = expression(entry)?;
        }
        if let Some(entry) = take(&format!("run.u1_{}", i + 1)) {
            plan.u1[i] = expression(entry)?;
        }
        if let Some(entry) = take(&format!("run.v0_{}", i + 1)) {
            plan.v0[i] = expression(entry)?;
        }
    }
    if let Some(entry) = take("run.d0") {
        plan.d0 = expression(entry)?;
    }
    let sweep_param = take("run.sweep");
    let sweep_values = take("run.sweep_values");
    match (sweep_param, sweep_values) {
        (Some((line, name)), Some((vline, list))) => {
            let param = SweepParam::parse(&name).ok_or_else(|| Error::Parse {
                line,
                reason: format!("unknown sweep parameter '{name}'"),
            })?;
            let values = list
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: vline,
                        reason: format!("bad sweep value '{}'", s.trim()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            plan.sweep = Some((param, values));
        }
        (None, None) => {}
        (Some((line, _)), None) | (None, Some((line, _))) => {
            return Err(Error::Parse {
                line,
                reason: "run.sweep and run.sweep_values must be given together".into(),
            })
        }
    }

    if let Some((key, (line, _))) = entries.into_iter().next() {
        return Err(Error::Parse {
            line,
            reason: format!("unknown key '{key}'"),
        });
    }

    let cfg = RunConfig {
        physics,
        disc,
        sources,
        plan,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = "\
physics.lambda = 1
physics.mu = 1
physics.alpha = 1
physics.c0 = 1
physics.k_perm = 1
physics.nu = 1
physics.beta = 1
physics.rho_b = 1
physics.rho_f = 1
physics.delta = 1
";

    #[test]
    fn unit_params_accepted() {
        let p = PhysicalParams::unit();
        assert_eq!(validate_params(p).unwrap(), p);
    }

    #[test]
    fn zero_viscosity_rejected() {
        let mut p = PhysicalParams::unit();
        p.nu = 0.0;
        match validate_params(p) {
            Err(Error::Violation { field, value }) => {
                assert_eq!(field, "nu");
                assert_eq!(value, 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fully_degenerate_regime_accepted() {
        let p = PhysicalParams::unit().with_regime(0.0, 0.0, 0.0, 0.0);
        assert!(validate_params(p).is_ok());
    }

    #[test]
    fn negative_storage_rejected() {
        let p = PhysicalParams::unit().with_regime(1.0, 1.0, 1.0, -1e-3);
        assert!(matches!(validate_params(p), Err(Error::Violation { field, .. }) if field == "c0"));
    }

    #[test]
    fn minimal_document_gets_default_dt() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.disc.dt, 1e-2);
        assert_eq!(cfg.physics, PhysicalParams::unit());
        assert!(cfg.sources.is_zero());
    }

    #[test]
    fn missing_physical_key_is_named() {
        let text = MINIMAL.replace("physics.mu = 1\n", "");
        match parse_config(&text) {
            Err(Error::Parse { reason, .. }) => assert!(reason.contains("mu"), "{reason}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_dt_is_a_violation() {
        let text = format!("{MINIMAL}time.dt = -1\n");
        match parse_config(&text) {
            Err(Error::Violation { field, value }) => {
                assert_eq!(field, "dt");
                assert_eq!(value, -1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_and_malformed_lines_rejected() {
        let text = format!("{MINIMAL}grid.n3 = 4\n");
        assert!(matches!(parse_config(&text), Err(Error::Parse { line: 11, .. })));
        let text = format!("{MINIMAL}this is not a key\n");
        assert!(matches!(parse_config(&text), Err(Error::Parse { line: 11, .. })));
        let text = format!("{MINIMAL}grid.n1 = 6\ngrid.n1 = 8\n");
        assert!(matches!(parse_config(&text), Err(Error::Parse { line: 12, .. })));
    }

    #[test]
    fn comments_sources_and_sweeps_parse() {
        let text = format!(
            "{MINIMAL}# a comment\ngrid.n1 = 4 # trailing\nsources.fb3 = exp(-t)*cos(2*pi*x1)\n\
             run.sweep = delta\nrun.sweep_values = 0.1, 0.01\n"
        );
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.disc.n1, 4);
        assert!(!cfg.sources.is_zero());
        assert_eq!(cfg.plan.sweep, Some((SweepParam::Delta, vec![0.1, 0.01])));
    }

    #[test]
    fn odd_lateral_count_rejected() {
        let text = format!("{MINIMAL}grid.n2 = 6\ngrid.n1 = 5\n");
        assert!(matches!(parse_config(&text), Err(Error::Violation { field, .. }) if field == "n1"));
    }

    #[test]
    fn validate_is_idempotent() {
        let p = PhysicalParams::unit().with_regime(0.0, 0.3, 0.0, 2.0);
        assert_eq!(validate_params(validate_params(p).unwrap()).unwrap(), p);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-10.0f64..10.0).prop_map(Expr::Num),
            Just(Expr::Pi),
            Just(Expr::Var(expr::Var::X1)),
            Just(Expr::Var(expr::Var::X3)),
            Just(Expr::Var(expr::Var::T)),
        ];
        leaf.prop_recursive(3, 16, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Bin(expr::BinOp::Mul, Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Bin(expr::BinOp::Sub, Box::new(a), Box::new(b))),
                inner.clone().prop_map(|a| Expr::Call(expr::Func::Sin, Box::new(a))),
            ]
        })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(
            lambda in 0.1f64..10.0, mu in 0.1f64..10.0, c0 in 0.0f64..2.0,
            rho in 0.0f64..1.0, delta in 0.0f64..1.0,
            steps in 1usize..40, nb in 2usize..20,
            fb in arb_expr(), d0 in arb_expr(),
        ) {
            let mut physics = PhysicalParams::unit().with_regime(rho, rho / 2.0, delta, c0);
            physics.lambda = lambda;
            physics.mu = mu;
            let disc = Discretization { n1: 4, n2: 8, nb, nf: nb + 1, dt: 0.125, t_end: 0.125 * steps as f64 };
            let mut cfg = RunConfig::new(physics, disc);
            cfg.sources.body_force[2] = SourceTerm::Expr(fb);
            cfg.plan.d0 = d0;
            cfg.plan.sweep = Some((SweepParam::C0, vec![0.1, 0.01]));
            let back = parse_config(&cfg.serialize()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
