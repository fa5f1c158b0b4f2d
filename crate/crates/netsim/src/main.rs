use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use netsim::experiment::{run_experiment, ExperimentConfig, Load, THREADS_ENV};
use netsim::files::{load_network, parse_state, resolve_policy, two_station_three_buffer};
use netsim::report::{self, format_cells};
use netsim::tables::{self, DESK_REPS, PUBLISHED_REPS};
use netsim_core::fluid::solve_fluid;
use netsim_core::network::uniformize;
use netsim_core::oracle::{euler_fluid, mm1_analytics, truncated_stationary};
use netsim_core::quadratic::{build_constraints, priority_zero_mask};
use netsim_core::{EstimatorKind, NetworkSpec};
use serde_json::json;

#[derive(Parser)]
#[command(name = "netsim", version, about = "Steady-state simulation of multiclass queueing networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicated runs over a load sweep, written as CSV and summary JSON.
    Simulate(SimulateArgs),
    /// Rerun one of the published tables on the two-station line.
    Table(TableArgs),
    /// Print U, c, p, ν and the least-squares residual as JSON.
    Nu(ModelArgs),
    /// Solve the fluid model from one state and print the path as JSON.
    FluidValue {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated buffer contents, e.g. "0,0,1".
        #[arg(long)]
        state: String,
    },
    /// Reference computations used to check the estimators.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Network JSON file; the built-in two-station line when omitted.
    #[arg(long)]
    network: Option<PathBuf>,
    /// fbfs, lbfs, inline policy JSON or a policy file.
    #[arg(long, default_value = "fbfs")]
    policy: String,
    /// Rescale arrivals so that the load station carries this load. The
    /// simulate command accepts a comma-separated sweep.
    #[arg(long, value_delimiter = ',')]
    rho2: Vec<f64>,
    /// Station (1-based) targeted by --rho2.
    #[arg(long, default_value_t = 2)]
    load_station: usize,
    /// Treat z_ij that vanish under the priority policy as known zeros.
    #[arg(long)]
    zero_mask: bool,
}

impl ModelArgs {
    fn base_network(&self) -> Result<NetworkSpec> {
        Ok(match &self.network {
            Some(p) => load_network(p)?,
            None => two_station_three_buffer(9.0),
        })
    }

    fn network(&self) -> Result<NetworkSpec> {
        let spec = self.base_network()?;
        Ok(match self.rho2.as_slice() {
            [] => spec,
            [rho] => spec.with_station_load(station_index(self.load_station)?, *rho)?,
            _ => bail!("only one --rho2 value is meaningful here"),
        })
    }
}

fn station_index(one_based: usize) -> Result<usize> {
    if one_based == 0 {
        bail!("stations are numbered from 1");
    }
    Ok(one_based - 1)
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Estimators besides the standard one (which always runs).
    #[arg(long, value_delimiter = ',', default_value = "standard,quadratic,fluid")]
    estimators: Vec<String>,
    #[arg(long, default_value_t = 100_000)]
    steps: u64,
    #[arg(long, default_value_t = 20)]
    batches: usize,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Sweep of arrival-rate multipliers instead of station loads.
    #[arg(long, value_delimiter = ',', conflicts_with = "rho2")]
    scale: Vec<f64>,
    #[arg(long, default_value = "netsim-out")]
    out: PathBuf,
    /// Worker threads (also read from NETSIM_THREADS).
    #[arg(long, env = THREADS_ENV)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TableArgs {
    /// 1: quadratic, 2: best possible quadratic, 3: fluid.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    paper: u8,
    /// Published replication count instead of the desk-scale default.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Run length for table 2.
    #[arg(long, default_value_t = 4_000_000)]
    diagnostic_steps: u64,
    #[arg(long, default_value_t = 100)]
    diagnostic_batches: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = THREADS_ENV)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Closed forms for M/M/1 and the Poisson-equation residuals.
    Mm1 {
        #[arg(long, default_value_t = 0.3)]
        lambda: f64,
        #[arg(long, default_value_t = 0.7)]
        mu: f64,
    },
    /// Stationary law of the chain truncated to a box.
    Truncated {
        #[command(flatten)]
        model: ModelArgs,
        /// Per-class caps, comma separated.
        #[arg(long)]
        caps: String,
    },
    /// Fluid value by small-step integration, next to the exact path.
    Euler {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        state: String,
        #[arg(long, default_value_t = 1e-4)]
        dt: f64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(a) => simulate(a),
        Command::Table(a) => table(a),
        Command::Nu(m) => nu(m),
        Command::FluidValue { model, state } => fluid_value(model, &state),
        Command::Oracle(o) => oracle(o),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let network = a.model.base_network()?;
    let policy = resolve_policy(&a.model.policy, &network)?;
    let station = station_index(a.model.load_station)?;
    let loads = if !a.scale.is_empty() {
        a.scale.iter().map(|&f| Load::ArrivalScale(f)).collect()
    } else if !a.model.rho2.is_empty() {
        a.model.rho2.iter().map(|&rho| Load::StationLoad { station, rho }).collect()
    } else {
        vec![Load::ArrivalScale(1.0)]
    };
    let estimators = a
        .estimators
        .iter()
        .map(|s| EstimatorKind::from_label(s.trim()).with_context(|| format!("unknown estimator {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    let cfg = ExperimentConfig {
        network,
        policy,
        estimators,
        steps: a.steps,
        batches: a.batches,
        reps: a.reps,
        seed: a.seed,
        loads,
        zero_mask: a.model.zero_mask,
        threads: a.threads,
    };
    let rep = run_experiment(&cfg)?;
    report::emit(&cfg, &rep, &a.out)?;
    print!("{}", format_cells(&rep.cells));
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn table(a: TableArgs) -> Result<()> {
    let reps = a.reps.unwrap_or(if a.full { PUBLISHED_REPS } else { DESK_REPS });
    if a.paper == 2 {
        let loads: Vec<f64> = tables::TABLE2.iter().map(|r| r.0).collect();
        let rows = tables::best_possible(&loads, a.diagnostic_steps, a.diagnostic_batches, a.seed)?;
        println!("{:>5}  {:>11}  {:>11}  {:>9}  {:>9}", "rho2", "standard", "quadratic", "reduction", "published");
        for (r, p) in rows.iter().zip(tables::TABLE2) {
            println!(
                "{:>5}  {:>11.4e}  {:>11.4e}  {:>9.1}  {:>9}{}",
                r.rho2,
                r.standard,
                r.quadratic,
                r.reduction,
                p.3,
                if r.regularized { "  (ridge)" } else { "" }
            );
        }
        if let Some(out) = a.out {
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("table2.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
        }
        return Ok(());
    }
    let mut cfg = if a.paper == 1 {
        tables::table1_config(reps, a.seed)
    } else {
        tables::table3_config(reps, a.seed)
    };
    cfg.threads = a.threads;
    let rep = run_experiment(&cfg)?;
    print!("{}", format_cells(&rep.cells));
    println!();
    println!("published:");
    if a.paper == 1 {
        for r in tables::TABLE1 {
            println!(
                "{:>6}  standard {:>6} var {:>8.2e}  quadratic {:>6} var {:>8.2e}  reduction {}",
                r.rho2, r.standard.0, r.standard.1, r.controlled.0, r.controlled.1, r.reduction
            );
        }
    } else {
        for r in tables::TABLE3 {
            println!("{:>6}  fluid {:>6} var {:>8.2e}  reduction {}", r.0, r.1, r.2, r.3);
        }
    }
    if let Some(out) = a.out {
        report::emit(&cfg, &rep, &out)?;
    }
    Ok(())
}

fn nu(m: ModelArgs) -> Result<()> {
    let spec = m.network()?;
    let policy = resolve_policy(&m.policy, &spec)?;
    let net = uniformize(&spec);
    let mask = m.zero_mask.then(|| priority_zero_mask(&net, &policy));
    let cv = build_constraints(&net, mask.as_deref())?.choose_nu()?;
    let u = cv.u();
    let out = json!({
        "classes": cv.num_classes(),
        "time_scale": net.time_scale(),
        "U": (0..u.rows()).map(|i| u.row(i).to_vec()).collect::<Vec<_>>(),
        "c": cv.c(),
        "p": cv.p(),
        "nu": cv.nu(),
        "residual": cv.residual(),
        "rank_deficient": cv.rank_deficient(),
        "zero_mask": cv.zero_mask(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn fluid_value(m: ModelArgs, state: &str) -> Result<()> {
    let spec = m.network()?;
    let policy = resolve_policy(&m.policy, &spec)?;
    let net = uniformize(&spec);
    let y: Vec<f64> = parse_state(state)?.iter().map(|v| *v as f64).collect();
    let path = solve_fluid(net.spec(), &policy, &y)?;
    let segments: Vec<_> = path
        .segments()
        .iter()
        .map(|s| json!({"start": s.start, "duration": s.duration, "phi": s.phi, "drift": s.drift, "allocation": s.allocation}))
        .collect();
    let out = json!({
        "state": y,
        "time_scale": net.time_scale(),
        "drain_time": path.drain_time(),
        "value": path.value(),
        "segments": segments,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn oracle(o: OracleCommand) -> Result<()> {
    let out = match o {
        OracleCommand::Mm1 { lambda, mu } => {
            let m = mm1_analytics(lambda, mu)?;
            let worst = (0..=50).map(|y| m.poisson_residual(y).abs()).fold(0.0, f64::max);
            json!({
                "lambda": m.lambda, "mu": m.mu, "alpha": m.alpha, "a": m.a,
                "tavc": m.tavc(), "max_poisson_residual_0_50": worst,
            })
        }
        OracleCommand::Truncated { model, caps } => {
            let spec = model.network()?;
            let policy = resolve_policy(&model.policy, &spec)?;
            let net = uniformize(&spec);
            let caps = parse_state(&caps)?;
            let chain = truncated_stationary(&net, &policy, &caps)?;
            let cv = build_constraints(&net, None)?;
            let worst = cv.constraint_residuals(&chain.zbar()).iter().fold(0.0f64, |m, r| m.max(r.abs()));
            json!({
                "states": chain.num_states(), "iterations": chain.iterations(), "residual": chain.residual(),
                "mean_population": chain.mean_population(), "ybar": chain.ybar(),
                "boundary_mass": chain.boundary_mass(), "max_constraint_residual": worst,
            })
        }
        OracleCommand::Euler { model, state, dt } => {
            let spec = model.network()?;
            let policy = resolve_policy(&model.policy, &spec)?;
            let net = uniformize(&spec);
            let y: Vec<f64> = parse_state(&state)?.iter().map(|v| *v as f64).collect();
            json!({
                "euler": euler_fluid(net.spec(), &policy, &y, dt)?,
                "exact": solve_fluid(net.spec(), &policy, &y)?.value(),
                "dt": dt,
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
