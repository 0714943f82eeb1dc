//! `bsqs`: run, sweep, verify and audit the Biot-Stokes filtration solver.
//!
//! Exit status is 0 on success, 1 on usage errors (bad arguments, missing
//! or malformed config) and 2 when the solver or a validation check fails.
//! Errors go to standard error as `error[CODE]: message`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bsqs::assembly::Spaces;
use bsqs::config::{parse_config, RunConfig, SweepParam};
use bsqs::energy::audit;
use bsqs::greens::{dirichlet_extension, finite_difference_extension, neumann_extension, ExtensionKind};
use bsqs::integrator::{random_smooth_data, run, run_from, InitialData, Trajectory};
use bsqs::io::{read_snapshot, write_snapshot, write_timeseries, Snapshot};
use bsqs::limit::{run_sweep, SweepSpec};
use bsqs::spectral::ModeIndex;
use bsqs::verification::{convergence_study, standard_studies, ConvergenceReport};
use bsqs::{Complex64, Error};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bsqs", version, about = "Coupled Biot-Stokes filtration solver")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (falls back to BSQS_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Use random smooth initial data from this seed instead of the
    /// configured expressions.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time-step a configuration and write the trajectory and snapshots.
    Run {
        /// Also write a snapshot every this many steps.
        #[arg(long, default_value_t = 0)]
        snapshot_every: usize,
        /// Continue from a snapshot instead of the initial data.
        #[arg(long)]
        restart: Option<PathBuf>,
    },
    /// Run a singular-limit sweep against the limit configuration.
    Sweep {
        /// rho_joint, delta or c0; overrides run.sweep.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated decreasing values; overrides run.sweep_values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Manufactured-solution convergence studies.
    Verify,
    /// Run and audit the discrete energy balance.
    Audit,
    /// Compare the harmonic extensions with a finite-difference solve.
    GreensCheck {
        #[arg(long, default_value_t = 1000)]
        points: usize,
    },
}

enum Failure {
    Usage(String),
    Solver(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Solver(e)
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    global: Global,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.global.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn config(&self) -> Result<RunConfig, Failure> {
        let path = self
            .global
            .config
            .as_ref()
            .ok_or_else(|| Failure::Usage("--config is required".into()))?;
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        match parse_config(&text) {
            Ok(cfg) => Ok(cfg),
            Err(Error::Parse { line, reason }) => Err(Failure::Usage(format!("{}:{line}: {reason}", path.display()))),
            Err(e) => Err(Failure::Solver(e)),
        }
    }

    fn out_dir(&self) -> Result<PathBuf, Failure> {
        let dir = self
            .global
            .out
            .clone()
            .ok_or_else(|| Failure::Usage("--out is required".into()))?;
        fs::create_dir_all(&dir).map_err(|e| Failure::Solver(e.into()))?;
        Ok(dir)
    }

    fn initial_data(&self, cfg: &RunConfig) -> Result<InitialData, Failure> {
        let spaces = Spaces::new(&cfg.disc)?;
        Ok(match self.global.seed {
            Some(seed) => random_smooth_data(&spaces, &cfg.physics, seed)?,
            None => {
                let plan = &cfg.plan;
                InitialData::from_exprs(&spaces, &plan.u0, &plan.u1, &plan.d0, &plan.v0)?
            }
        })
    }
}

fn snapshot(cfg: &RunConfig, traj: &Trajectory, n: usize, first: usize, dir: &Path) -> bsqs::Result<()> {
    let snap = Snapshot {
        disc: cfg.disc,
        params: cfg.physics,
        state: traj.states[n].clone(),
    };
    write_snapshot(&snap, &dir.join(format!("snapshot_{:06}.bsqs", first + n)))
}

fn cmd_run(ctx: &Ctx, snapshot_every: usize, restart: Option<&Path>) -> Outcome {
    let cfg = ctx.config()?;
    cfg.validate()?;
    let dir = ctx.out_dir()?;
    let steps = cfg.disc.step_count()?;
    let (traj, first) = match restart {
        Some(path) => {
            let snap = read_snapshot(path)?;
            if snap.disc != cfg.disc || snap.params != cfg.physics {
                return Err(Failure::Solver(Error::GridMismatch(
                    "snapshot grid or coefficients differ from the configuration".into(),
                )));
            }
            let first = (snap.state.t / cfg.disc.dt).round() as usize;
            let remaining = steps.checked_sub(first).ok_or_else(|| {
                Failure::Solver(Error::GridMismatch("snapshot lies beyond t_end".into()))
            })?;
            (run_from(&cfg, snap.state, first, remaining)?, first)
        }
        None => (run(&cfg, &ctx.initial_data(&cfg)?)?, 0),
    };
    write_timeseries(&traj, &dir.join("trajectory.csv"))?;
    let last = traj.states.len() - 1;
    for n in 0..=last {
        let periodic = snapshot_every > 0 && (first + n) % snapshot_every == 0;
        if n == 0 || n == last || periodic {
            snapshot(&cfg, &traj, n, first, &dir)?;
        }
    }
    let d = traj.diagnostics.last().expect("at least the initial state");
    ctx.say(format!("run: {} steps to t = {}, energy {:.6e}", last, d.t, d.energy));
    Ok(())
}

fn cmd_audit(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config()?;
    cfg.validate()?;
    let dir = ctx.out_dir()?;
    let traj = run(&cfg, &ctx.initial_data(&cfg)?)?;
    let report = audit(&traj, &cfg.physics, &cfg.sources)?;
    write_timeseries(&report, &dir.join("energy.csv"))?;
    let worst = report.rows.iter().map(|r| r.residual).fold(f64::NEG_INFINITY, f64::max);
    ctx.say(format!("audit: {} rows, max residual {worst:.3e}", report.rows.len()));
    if let Some(c) = report.driven_constant {
        ctx.say(format!("audit: driven constant {c:.6e}"));
    }
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, param: Option<&str>, values: Option<Vec<f64>>) -> Outcome {
    let cfg = ctx.config()?;
    cfg.validate()?;
    let dir = ctx.out_dir()?;
    let planned = cfg.plan.sweep.clone();
    let param = match param {
        Some(name) => SweepParam::parse(name).ok_or_else(|| Failure::Usage(format!("unknown sweep parameter '{name}'")))?,
        None => planned
            .as_ref()
            .map(|s| s.0)
            .ok_or_else(|| Failure::Usage("no sweep parameter: set run.sweep or --param".into()))?,
    };
    let values = values
        .or_else(|| planned.map(|s| s.1))
        .ok_or_else(|| Failure::Usage("no sweep values: set run.sweep_values or --values".into()))?;
    let spec = SweepSpec {
        data: ctx.initial_data(&cfg)?,
        base: cfg,
        param,
        values,
    };
    let report = run_sweep(&spec)?;
    write_timeseries(&report, &dir.join(format!("sweep_{}.csv", param.name())))?;
    for r in &report.rows {
        ctx.say(format!(
            "{} = {:.1e}: D1 {:.3e} D2 {:.3e} D3 {:.3e} D4 {:.3e}",
            param.name(),
            r.value,
            r.d1,
            r.d2,
            r.d3,
            r.d4
        ));
    }
    Ok(())
}

fn cmd_verify(ctx: &Ctx) -> Outcome {
    let params = match &ctx.global.config {
        Some(_) => ctx.config()?.physics,
        None => bsqs::config::PhysicalParams::unit(),
    };
    let dir = ctx.out_dir()?;
    for (i, spec) in standard_studies(&params)?.iter().enumerate() {
        let report = convergence_study(spec)?;
        write_timeseries(&report, &dir.join(format!("verify_{i}.csv")))?;
        ctx.say(format!("verify: {}", report.case));
        for (name, fit) in ConvergenceReport::COLUMNS[2..].iter().zip(&report.orders) {
            if let Some(f) = fit {
                ctx.say(format!("  {name:<15} order {:.3}", f.slope));
            }
        }
    }
    Ok(())
}

fn cmd_greens(ctx: &Ctx, points: usize) -> Outcome {
    if points < 3 {
        return Err(Failure::Usage("--points must be at least 3".into()));
    }
    let modes = [(0, 0), (1, 0), (3, 4), (8, 8)];
    let mut csv = String::from("k1,k2,kind,max_error\n");
    let mut worst = 0.0f64;
    for (k1, k2) in modes {
        let m = ModeIndex::new(k1, k2);
        for kind in [ExtensionKind::Dirichlet, ExtensionKind::Neumann] {
            let data = Complex64::new(1.0, 0.0);
            let closed = match kind {
                ExtensionKind::Dirichlet => dirichlet_extension(m, data),
                ExtensionKind::Neumann => neumann_extension(m, data),
            };
            let (xs, vals) = finite_difference_extension(m, kind, data, points);
            let err = xs
                .iter()
                .zip(&vals)
                .map(|(&x, v)| (closed.eval(x) - v).norm())
                .fold(0.0, f64::max);
            worst = worst.max(err);
            csv.push_str(&format!("{k1},{k2},{kind:?},{err:.16e}\n"));
            ctx.say(format!("greens: mode ({k1},{k2}) {kind:?} max error {err:.3e}"));
        }
    }
    if let Some(dir) = &ctx.global.out {
        fs::create_dir_all(dir).map_err(|e| Failure::Solver(e.into()))?;
        fs::write(dir.join("greens.csv"), csv).map_err(|e| Failure::Solver(e.into()))?;
    }
    if worst > 1e-8 {
        return Err(Failure::Solver(Error::Violation {
            field: "greens_max_error".into(),
            value: worst,
        }));
    }
    Ok(())
}

fn threads(global: &Global) -> Result<Option<usize>, Failure> {
    if let Some(n) = global.threads {
        return Ok(Some(n));
    }
    match std::env::var("BSQS_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("BSQS_THREADS must be a positive integer, found '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Outcome {
    if let Some(n) = threads(&cli.global)? {
        if n == 0 {
            return Err(Failure::Usage("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot configure threads: {e}")))?;
    }
    let ctx = Ctx { global: cli.global };
    match cli.command {
        Command::Run { snapshot_every, restart } => cmd_run(&ctx, snapshot_every, restart.as_deref()),
        Command::Sweep { param, values } => cmd_sweep(&ctx, param.as_deref(), values),
        Command::Verify => cmd_verify(&ctx),
        Command::Audit => cmd_audit(&ctx),
        Command::GreensCheck { points } => cmd_greens(&ctx, points),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[USAGE]: {first}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error[USAGE]: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Solver(e)) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(2)
        }
    }
}
