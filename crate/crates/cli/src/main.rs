use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cop_core::estimator::{gauss_newton, pmu_initializer, residual_norm, GnStatus};
use cop_core::experiments::{
    emit_report, perturbed_prior, run_cop_sweep, run_tve_experiment, sweep_scada, write_traces, Arm, ExperimentConfig, Results,
};
use cop_core::gain::{cop_metric, fmt_extended, CopModel};
use cop_core::measurement::{bitstring, random_true_state, synthesize_measurements, write_ensemble_csv, Layout, SelectionMask};
use cop_core::placement::{recover_fractional, Objective, PlacementProblem, Planner};
use cop_core::rng::{derive_seed, stream_rng, Stream};
use cop_core::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cop-place", version, about = "PMU placement and hybrid state estimation experiments")]
struct Cli {
    /// Built-in case (ieee14, ieee30, ieee118, two-bus) or a MATPOWER/JSON file.
    #[arg(long, global = true)]
    case: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Experiment configuration as JSON; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    scada_fraction: Option<f64>,
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long)]
    beta_min: Option<f64>,
    /// Randomized rounding samples.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// COP metric of each method for a range of PMU budgets.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Budgets, e.g. `3-13` or `2,4,6`. Default 1..N-1.
        #[arg(long)]
        budgets: Option<String>,
        /// Comma-separated methods.
        #[arg(long)]
        methods: Option<String>,
    },
    /// Monte-Carlo Gauss-Newton convergence study.
    Tve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_pmu: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        methods: Option<String>,
        /// Write one `iter,tve,rho,phi_k,bound` CSV per run here.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Place PMUs for one budget on the seeded SCADA draw.
    Place {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_pmu: usize,
        #[arg(long, default_value = "proposed")]
        method: String,
        #[arg(long)]
        dump_sdp: Option<PathBuf>,
    },
    /// Run one seeded estimation with a given or computed placement.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// PMU buses by case label, comma-separated.
        #[arg(long, conflicts_with = "n_pmu")]
        pmu: Option<String>,
        #[arg(long)]
        n_pmu: Option<usize>,
        #[arg(long, default_value = "proposed")]
        method: String,
        #[arg(long)]
        dump_measurements: Option<PathBuf>,
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Solve the placement relaxation alone and print the fractional solution.
    SolveSdp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_pmu: usize,
        /// `cop` or `accuracy`.
        #[arg(long, default_value = "cop")]
        objective: String,
        #[arg(long)]
        dump_sdp: Option<PathBuf>,
    },
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(f).collect()
}

fn parse_budgets(s: &str) -> Result<Vec<usize>> {
    let int = |x: &str| x.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad budget {x:?}")));
    if let Some((a, b)) = s.split_once('-') {
        return Ok((int(a)?..=int(b)?).collect());
    }
    parse_list(s, int)
}

fn config(cli: &Cli, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(c) = &cli.case {
        cfg.case = c.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(x) = common.scada_fraction {
        cfg.scada_fraction = x;
    }
    if let Some(x) = common.noise_variance {
        cfg.noise_variance = x;
    }
    if let Some(x) = common.beta_min {
        cfg.beta_min = x;
    }
    if let Some(x) = common.samples {
        cfg.rounding_samples = x;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn problem(cfg: &ExperimentConfig, n: usize, budget: usize) -> PlacementProblem {
    let mut p = PlacementProblem::new(n, budget, cfg.beta_min);
    p.samples = cfg.rounding_samples;
    p
}

fn objective(s: &str) -> Result<Objective> {
    match s {
        "cop" | "proposed" => Ok(Objective::Cop),
        "accuracy" => Ok(Objective::Accuracy),
        _ => Err(Error::Config(format!("unknown objective {s:?}"))),
    }
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        eprintln!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Sweep { common, budgets, methods } => {
            let mut cfg = config(&cli, common)?;
            if let Some(b) = budgets {
                cfg.sweep_budgets = Some(parse_budgets(b)?);
            }
            if let Some(m) = methods {
                cfg.methods = parse_list(m, Arm::parse)?;
            }
            let res = run_cop_sweep(&cfg)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&res)?);
            } else {
                println!("{:>5}  {:<14} {:>17} {:>17} {:>17}  note", "n_pmu", "method", "beta", "phi", "rho");
                for r in &res.rows {
                    let f = |x: Option<f64>| x.map(fmt_extended).unwrap_or_else(|| "-".into());
                    println!("{:>5}  {:<14} {:>17} {:>17} {:>17}  {}", r.n_pmu, r.method.name(), f(r.beta), f(r.phi), f(r.rho), r.note);
                }
            }
            print_files(&emit_report(&Results::Sweep(res), &cfg, &cli.out)?);
        }
        Command::Tve { common, n_pmu, trials, methods, trace_dir } => {
            let mut cfg = config(&cli, common)?;
            if cli.config.is_none() {
                cfg.methods = vec![Arm::Proposed, Arm::Accuracy, Arm::Observability, Arm::NoPmu];
            }
            if let Some(k) = n_pmu {
                cfg.n_pmu = *k;
            }
            if let Some(t) = trials {
                cfg.trials = *t;
            }
            if let Some(m) = methods {
                cfg.methods = parse_list(m, Arm::parse)?;
            }
            if cfg.methods.contains(&Arm::Exhaustive) {
                return Err(Error::Config("the convergence study does not run exhaustive search".into()));
            }
            cfg.validate()?;
            let res = run_tve_experiment(&cfg, trace_dir.is_some())?;
            if let Some(dir) = trace_dir {
                print_files(&write_traces(&res, dir)?);
            }
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&res.curves)?);
            } else {
                println!("{:<14} {:>10} {:>12} {:>14} {:>12}", "method", "diverged", "final TVE %", "iters to tgt", "converged");
                for c in &res.curves {
                    println!(
                        "{:<14} {:>10.3} {:>12.4} {:>14.3} {:>8}/{}",
                        c.method.name(),
                        c.divergence_fraction,
                        c.asymptotic_tve,
                        c.mean_iters_to_target,
                        c.converged,
                        c.trials
                    );
                }
                for c in res.curves.iter().filter(|c| c.skipped > 0) {
                    eprintln!("{}: no placement in {} trial(s), see tve_trials.csv", c.method.name(), c.skipped);
                }
            }
            print_files(&emit_report(&Results::Tve(res), &cfg, &cli.out)?);
        }
        Command::Place { common, n_pmu, method, dump_sdp } => {
            let cfg = config(&cli, common)?;
            let model = CopModel::new(cfg.load_grid()?, cfg.noise());
            let scada = sweep_scada(&model, &cfg)?;
            let prob = problem(&cfg, model.n_buses(), *n_pmu);
            let planner = Planner::new(&model, &scada, &prob)?;
            let seed = derive_seed(cfg.seed, Stream::Rounding, *n_pmu as u64);
            if let Some(path) = dump_sdp {
                planner.build_sdp(objective(method)?)?.program.dump(fs::File::create(path)?)?;
            }
            let res = match Arm::parse(method)? {
                Arm::Proposed => planner.sdp_rounding(Objective::Cop, seed)?,
                Arm::Accuracy => planner.sdp_rounding(Objective::Accuracy, seed)?,
                Arm::Exhaustive => planner.exhaustive_optimal(Objective::Cop)?,
                Arm::Observability => planner.baseline_observability(seed)?,
                Arm::NoPmu => return Err(Error::Config("no_pmu is not a placement method".into())),
            };
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&res)?);
            } else {
                let labels = model.grid.bus_labels();
                let buses: Vec<String> = (0..model.n_buses()).filter(|&b| res.pmu[b]).map(|b| labels[b].to_string()).collect();
                println!("method      {}", res.method.name());
                println!("pmu buses   {}", buses.join(","));
                println!("beta        {}", fmt_extended(res.cop.beta));
                println!("phi         {}", fmt_extended(res.cop.phi));
                println!("rho         {}", fmt_extended(res.cop.rho));
                println!("mse bound   {}", fmt_extended(res.cop.mse_bound));
                println!("feasible    {}{}", res.feasible, if res.repaired { " (repaired)" } else { "" });
                if let Some(b) = res.sdp_bound {
                    println!("sdp bound   {}", fmt_extended(b));
                }
            }
        }
        Command::Estimate { common, pmu, n_pmu, method, dump_measurements, trace_dir } => {
            let cfg = config(&cli, common)?;
            let model = CopModel::new(cfg.load_grid()?, cfg.noise());
            let n = model.n_buses();
            let scada = sweep_scada(&model, &cfg)?;
            let pmu_vec = match (pmu, n_pmu) {
                (Some(list), _) => {
                    let labels = model.grid.bus_labels();
                    let mut v = vec![false; n];
                    for lab in parse_list(list, |x| x.parse::<i64>().map_err(|_| Error::Config(format!("bad bus {x:?}"))))? {
                        let i = labels.iter().position(|&l| l == lab).ok_or_else(|| Error::Config(format!("no bus {lab}")))?;
                        v[i] = true;
                    }
                    v
                }
                (None, Some(k)) => {
                    let prob = problem(&cfg, n, *k);
                    let planner = Planner::new(&model, &scada, &prob)?;
                    let seed = derive_seed(cfg.seed, Stream::Rounding, *k as u64);
                    match Arm::parse(method)? {
                        Arm::Proposed => planner.sdp_rounding(Objective::Cop, seed)?.pmu,
                        Arm::Accuracy => planner.sdp_rounding(Objective::Accuracy, seed)?.pmu,
                        Arm::Exhaustive => planner.exhaustive_optimal(Objective::Cop)?.pmu,
                        Arm::Observability => planner.baseline_observability(seed)?.pmu,
                        Arm::NoPmu => vec![false; n],
                    }
                }
                (None, None) => vec![false; n],
            };
            let v_true = random_true_state(n, &mut stream_rng(cfg.seed, Stream::TrueState, 0));
            let prior = perturbed_prior(n, cfg.perturbation, cfg.seed, 0);
            let p = scada.placement(pmu_vec.clone());
            let mask = SelectionMask::from_placement(&p, &model.mats)?;
            let z = synthesize_measurements(&v_true, &model.mats, mask, model.noise.clone(), &mut stream_rng(cfg.seed, Stream::Noise, 0));
            if let Some(path) = dump_measurements {
                write_ensemble_csv(fs::File::create(path)?, &z, &Layout::new(&model.mats))?;
            }
            let v0 = pmu_initializer(&z.voltage_block(n), &prior, &pmu_vec)?;
            let (v_est, trace) = gauss_newton(&z, &model.mats, &v0, &cfg.gn, Some(&v_true))?;
            let cop = cop_metric(&model, &scada, &pmu_vec, cfg.beta_min);
            let mut trace = trace;
            if trace.status == GnStatus::Converged {
                let eps = residual_norm(&v_est, &z, &model.mats);
                let beta = trace.beta();
                trace.instrument(&v_est, &scada.m, beta, eps);
            }
            if let Some(dir) = trace_dir {
                fs::create_dir_all(dir)?;
                let path = dir.join("estimate.csv");
                trace.write_csv(fs::File::create(&path)?)?;
                print_files(&[path]);
            }
            let tve = trace.tve();
            if cli.json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&json!({
                        "pmu": bitstring(&pmu_vec),
                        "cop": cop,
                        "status": trace.status,
                        "iterations": trace.iterations(),
                        "tve": tve,
                        "diagnostic": trace.diagnostic,
                    }))?
                );
            } else {
                println!("pmu         {}", bitstring(&pmu_vec));
                println!("rho         {}", fmt_extended(cop.rho));
                println!("status      {:?} after {} iterations", trace.status, trace.iterations());
                if let Some(d) = &trace.diagnostic {
                    println!("diagnostic  {d}");
                }
                for (k, t) in tve.iter().enumerate() {
                    println!("iter {k:>3}  TVE {t:.6e} %");
                }
            }
        }
        Command::SolveSdp { common, n_pmu, objective: obj, dump_sdp } => {
            let cfg = config(&cli, common)?;
            let model = CopModel::new(cfg.load_grid()?, cfg.noise());
            let scada = sweep_scada(&model, &cfg)?;
            let prob = problem(&cfg, model.n_buses(), *n_pmu);
            let planner = Planner::new(&model, &scada, &prob)?;
            let sdp = planner.build_sdp(objective(obj)?)?;
            if let Some(path) = dump_sdp {
                sdp.program.dump(fs::File::create(path)?)?;
            }
            let sol = planner.solve_sdp(&sdp)?;
            let frac = recover_fractional(&sdp, &sol)?;
            let out = json!({
                "status": format!("{:?}", sol.status),
                "objective": sdp.unscale(sol.objective),
                "bound": sdp.unscale(sol.bound),
                "iterations": sol.iterations,
                "fractional": frac,
            });
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                println!("status      {:?} ({} Newton steps)", sol.status, sol.iterations);
                println!("objective   {}", fmt_extended(sdp.unscale(sol.objective)));
                println!("bound       {}", fmt_extended(sdp.unscale(sol.bound)));
                let labels = model.grid.bus_labels();
                for (b, x) in frac.iter().enumerate() {
                    println!("bus {:>4}  {x:.6}", labels[b]);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_parse() {
        assert_eq!(parse_budgets("3-5").unwrap(), vec![3, 4, 5]);
        assert_eq!(parse_budgets("2,4").unwrap(), vec![2, 4]);
        assert!(parse_budgets("x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
