//! Seeded experiment harness: COP sweeps over the PMU budget and Monte-Carlo
//! Gauss-Newton convergence studies, with CSV/SVG/JSON output.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cases;
use crate::error::{Error, Result};
use crate::estimator::{gauss_newton, pmu_initializer, residual_norm, GnOptions, GnStatus, GnTrace};
use crate::gain::{fmt_extended, CopModel, Scada};
use crate::grid::Grid;
use crate::measurement::{bitstring, random_true_state, sample_scada, synthesize_measurements, NoiseModel, SelectionMask, StateVector};
use crate::placement::{Objective, PlacementProblem, PlacementResult, Planner};
use crate::plot::LinePlot;
use crate::rng::{derive_seed, stream_rng, Stream};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "COP_PLACE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Proposed,
    Exhaustive,
    Accuracy,
    Observability,
    NoPmu,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::Proposed => "proposed",
            Arm::Exhaustive => "exhaustive",
            Arm::Accuracy => "accuracy",
            Arm::Observability => "observability",
            Arm::NoPmu => "no_pmu",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        Ok(match s {
            "proposed" => Arm::Proposed,
            "exhaustive" => Arm::Exhaustive,
            "accuracy" => Arm::Accuracy,
            "observability" => Arm::Observability,
            "no_pmu" | "no-pmu" => Arm::NoPmu,
            _ => return Err(Error::Config(format!("unknown method {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Built-in case name or path to a MATPOWER / JSON file.
    pub case: String,
    pub scada_fraction: f64,
    /// Measurement noise variance, shared by all blocks.
    pub noise_variance: f64,
    /// PMU budget for the convergence study.
    pub n_pmu: usize,
    /// Budgets for the sweep; `None` means `1..=N-1`.
    pub sweep_budgets: Option<Vec<usize>>,
    pub trials: usize,
    /// Standard deviation of the prior's real-part perturbation.
    pub perturbation: f64,
    pub beta_min: f64,
    pub seed: u64,
    pub rounding_samples: usize,
    pub methods: Vec<Arm>,
    pub gn: GnOptions,
    /// TVE level (percent) for the iterations-to-target statistic.
    pub tve_target: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            case: "ieee14".into(),
            scada_fraction: 0.15,
            noise_variance: 1e-4,
            n_pmu: 5,
            sweep_budgets: None,
            trials: 200,
            perturbation: 0.1,
            beta_min: 0.01,
            seed: 7,
            rounding_samples: crate::placement::DEFAULT_SAMPLES,
            methods: vec![Arm::Proposed, Arm::Exhaustive, Arm::Accuracy, Arm::Observability],
            gn: GnOptions::default(),
            tve_target: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.scada_fraction) {
            return bad("scada_fraction must lie in [0, 1]");
        }
        if !(self.noise_variance > 0.0) || !self.noise_variance.is_finite() {
            return bad("noise_variance must be positive");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if !(self.perturbation >= 0.0) || !(self.beta_min >= 0.0) || !(self.tve_target > 0.0) {
            return bad("perturbation, beta_min and tve_target must be non-negative (tve_target positive)");
        }
        if self.rounding_samples == 0 {
            return bad("rounding_samples must be at least 1");
        }
        self.gn.validate()
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel::uniform(self.noise_variance.sqrt())
    }

    pub fn load_grid(&self) -> Result<Grid> {
        cases::load(&self.case)
    }

    fn problem(&self, n: usize, budget: usize) -> PlacementProblem {
        let mut p = PlacementProblem::new(n, budget, self.beta_min);
        p.samples = self.rounding_samples;
        p
    }
}

/// Run `f` on a pool capped by `COP_PLACE_THREADS` when it is set.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV).ok().and_then(|s| s.parse::<usize>().ok()) {
        Some(k) if k > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

fn place(planner: &Planner, arm: Arm, seed: u64) -> Result<PlacementResult> {
    match arm {
        Arm::Proposed => planner.sdp_rounding(Objective::Cop, seed),
        Arm::Accuracy => planner.sdp_rounding(Objective::Accuracy, seed),
        Arm::Exhaustive => planner.exhaustive_optimal(Objective::Cop),
        Arm::Observability => planner.baseline_observability(seed),
        Arm::NoPmu => Err(Error::Config("no_pmu is not a placement method".into())),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n_pmu: usize,
    pub method: Arm,
    pub beta: Option<f64>,
    pub phi: Option<f64>,
    pub rho: Option<f64>,
    pub feasible: bool,
    pub placement: String,
    /// Relaxation bound on `rho` (SDP methods only).
    pub tau: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub scada_injection: String,
    pub scada_flow: String,
    /// Metered SCADA sites (bus injections plus line-end flows).
    pub scada_sites: usize,
    /// Real-valued SCADA measurements, two per site.
    pub scada_scalars: usize,
}

impl SweepResult {
    pub fn row(&self, n_pmu: usize, method: Arm) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.n_pmu == n_pmu && r.method == method)
    }
}

/// The SCADA configuration used by the sweep: one draw under `seed`.
pub fn sweep_scada(model: &CopModel, cfg: &ExperimentConfig) -> Result<Scada> {
    let (inj, flow) = sample_scada(&model.grid, cfg.scada_fraction, &mut stream_rng(cfg.seed, Stream::Scada, 0))?;
    Ok(model.scada(inj, flow))
}

/// For each budget, place PMUs with every configured method and record
/// `beta`, `phi` and `rho`. Methods that fail (infeasible critical
/// constraints, search guard) produce a row with the reason in `note`.
pub fn run_cop_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let model = CopModel::new(cfg.load_grid()?, cfg.noise());
    let scada = sweep_scada(&model, cfg)?;
    let n = model.n_buses();
    let budgets = cfg.sweep_budgets.clone().unwrap_or_else(|| (1..n).collect());
    let mut rows = Vec::new();
    for &k in &budgets {
        let problem = cfg.problem(n, k);
        let planner = Planner::new(&model, &scada, &problem)?;
        for &arm in &cfg.methods {
            if arm == Arm::NoPmu {
                continue;
            }
            let seed = derive_seed(cfg.seed, Stream::Rounding, k as u64);
            rows.push(match place(&planner, arm, seed) {
                Ok(r) => SweepRow {
                    n_pmu: k,
                    method: arm,
                    beta: Some(r.cop.beta),
                    phi: Some(r.cop.phi),
                    rho: Some(r.cop.rho),
                    feasible: r.feasible,
                    placement: bitstring(&r.pmu),
                    tau: r.sdp_bound.filter(|_| arm == Arm::Proposed),
                    note: if r.repaired { "repaired".into() } else { String::new() },
                },
                Err(e) => SweepRow {
                    n_pmu: k,
                    method: arm,
                    beta: None,
                    phi: None,
                    rho: None,
                    feasible: false,
                    placement: String::new(),
                    tau: None,
                    note: e.to_string(),
                },
            });
        }
    }
    let sites = scada.injection.iter().chain(&scada.flow).filter(|&&b| b).count();
    Ok(SweepResult {
        rows,
        scada_injection: bitstring(&scada.injection),
        scada_flow: bitstring(&scada.flow),
        scada_sites: sites,
        scada_scalars: 2 * sites,
    })
}

/// One Gauss-Newton run of one arm in one trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub method: Arm,
    pub n_pmu: usize,
    /// `None` when the arm could not place PMUs for this trial.
    pub status: Option<GnStatus>,
    /// Placement failure reason for skipped runs.
    pub note: String,
    pub iterations: usize,
    pub final_tve: f64,
    /// First iterate within `tve_target` percent of the run's own final
    /// estimate (converged runs only).
    pub iters_to_target: Option<usize>,
    #[serde(skip)]
    pub tve: Vec<f64>,
    #[serde(skip)]
    pub trace: Option<GnTrace>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TveCurve {
    pub method: Arm,
    /// Mean TVE per iteration over converged trials, `max_iters + 1` long;
    /// a run that stopped early holds its last value.
    pub mean_tve: Vec<f64>,
    pub divergence_fraction: f64,
    pub asymptotic_tve: f64,
    pub mean_iters_to_target: f64,
    pub converged: usize,
    /// Runs that reached the estimator.
    pub trials: usize,
    /// Trials where this arm found no placement (see the record notes).
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TveResult {
    pub curves: Vec<TveCurve>,
    pub records: Vec<TrialRecord>,
}

impl TveResult {
    pub fn curve(&self, arm: Arm) -> Option<&TveCurve> {
        self.curves.iter().find(|c| c.method == arm)
    }
}

/// `[1 + perturbation * eps; 0]` with `eps` standard normal.
pub fn perturbed_prior(n: usize, perturbation: f64, seed: u64, trial: u64) -> StateVector {
    let mut rng = stream_rng(seed, Stream::Prior, trial);
    let mut v = DVector::zeros(2 * n);
    for i in 0..n {
        let e: f64 = StandardNormal.sample(&mut rng);
        v[i] = 1.0 + perturbation * e;
    }
    StateVector(v)
}

fn run_trial(cfg: &ExperimentConfig, model: &CopModel, trial: usize, keep_traces: bool) -> Result<Vec<TrialRecord>> {
    let t = trial as u64;
    let n = model.n_buses();
    let (inj, flow) = sample_scada(&model.grid, cfg.scada_fraction, &mut stream_rng(cfg.seed, Stream::Scada, t))?;
    let scada = model.scada(inj, flow);
    let problem = cfg.problem(n, cfg.n_pmu);
    let planner = Planner::new(model, &scada, &problem)?;
    let v_true = random_true_state(n, &mut stream_rng(cfg.seed, Stream::TrueState, t));
    let prior = perturbed_prior(n, cfg.perturbation, cfg.seed, t);
    let mut out = Vec::new();
    for &arm in &cfg.methods {
        let placed = match arm {
            Arm::NoPmu => Ok(vec![false; n]),
            _ => place(&planner, arm, derive_seed(cfg.seed, Stream::Rounding, t)).map(|r| r.pmu),
        };
        let pmu = match placed {
            Ok(pmu) => pmu,
            Err(e) => {
                out.push(TrialRecord {
                    trial,
                    method: arm,
                    n_pmu: 0,
                    status: None,
                    note: e.to_string(),
                    iterations: 0,
                    final_tve: f64::NAN,
                    iters_to_target: None,
                    tve: Vec::new(),
                    trace: None,
                });
                continue;
            }
        };
        let p = scada.placement(pmu.clone());
        let mask = SelectionMask::from_placement(&p, &model.mats)?;
        let z = synthesize_measurements(&v_true, &model.mats, mask, model.noise.clone(), &mut stream_rng(cfg.seed, Stream::Noise, t));
        let v0 = pmu_initializer(&z.voltage_block(n), &prior, &pmu)?;
        let (v_end, mut trace) = gauss_newton(&z, &model.mats, &v0, &cfg.gn, Some(&v_true))?;
        if keep_traces && trace.status == GnStatus::Converged {
            let eps = residual_norm(&v_end, &z, &model.mats);
            let beta = trace.beta();
            trace.instrument(&v_end, &scada.m, beta, eps);
        }
        let tve = trace.tve();
        let scale = v_true.0.norm();
        let iters_to_target = (trace.status == GnStatus::Converged)
            .then(|| {
                trace
                    .iterates
                    .iter()
                    .position(|it| (&it.v - &v_end.0).norm() / scale * 100.0 < cfg.tve_target)
            })
            .flatten();
        out.push(TrialRecord {
            trial,
            method: arm,
            n_pmu: pmu.iter().filter(|&&b| b).count(),
            status: Some(trace.status),
            note: String::new(),
            iterations: trace.iterations(),
            final_tve: *tve.last().unwrap_or(&f64::NAN),
            iters_to_target,
            tve,
            trace: keep_traces.then_some(trace),
        });
    }
    Ok(out)
}

/// Monte-Carlo convergence study. Each trial draws its own SCADA subset,
/// true state, prior and noise; every arm sees the same draws. Divergent
/// or non-converged runs count towards the divergence fraction and are left
/// out of the mean curves.
pub fn run_tve_experiment(cfg: &ExperimentConfig, keep_traces: bool) -> Result<TveResult> {
    cfg.validate()?;
    let model = CopModel::new(cfg.load_grid()?, cfg.noise());
    if cfg.n_pmu > model.n_buses() {
        return Err(Error::Config(format!("n_pmu {} exceeds the bus count", cfg.n_pmu)));
    }
    let per_trial: Vec<Result<Vec<TrialRecord>>> = with_pool(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, &model, t, keep_traces))
            .collect()
    })?;
    let mut records = Vec::new();
    for r in per_trial {
        records.extend(r?);
    }
    let len = cfg.gn.max_iters + 1;
    let curves = cfg
        .methods
        .iter()
        .map(|&arm| {
            let all = records.iter().filter(|r| r.method == arm);
            let runs: Vec<&TrialRecord> = all.clone().filter(|r| r.status.is_some()).collect();
            let skipped = all.count() - runs.len();
            let ok: Vec<&&TrialRecord> = runs.iter().filter(|r| r.status == Some(GnStatus::Converged)).collect();
            let mut mean = vec![0.0; len];
            for r in &ok {
                for (k, m) in mean.iter_mut().enumerate() {
                    *m += r.tve.get(k).or(r.tve.last()).copied().unwrap_or(f64::NAN);
                }
            }
            let c = ok.len() as f64;
            mean.iter_mut().for_each(|m| *m = if ok.is_empty() { f64::NAN } else { *m / c });
            let hits: Vec<f64> = ok.iter().filter_map(|r| r.iters_to_target.map(|k| k as f64)).collect();
            TveCurve {
                method: arm,
                mean_tve: mean,
                divergence_fraction: (runs.len() - ok.len()) as f64 / runs.len().max(1) as f64,
                asymptotic_tve: if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| r.final_tve).sum::<f64>() / c },
                mean_iters_to_target: if hits.is_empty() { f64::NAN } else { hits.iter().sum::<f64>() / hits.len() as f64 },
                converged: ok.len(),
                trials: runs.len(),
                skipped,
            }
        })
        .collect();
    Ok(TveResult { curves, records })
}

pub enum Results {
    Sweep(SweepResult),
    Tve(TveResult),
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_extended).unwrap_or_default()
}

fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        fmt_extended(x)
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    config: &'a ExperimentConfig,
    seed: u64,
    results: T,
}

/// Write CSV tables, an SVG plot and `summary.json` into `dir`. Returns the
/// files written.
pub fn emit_report(results: &Results, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    match results {
        Results::Sweep(s) => {
            let csv_path = dir.join("sweep.csv");
            write_csv(
                &csv_path,
                &["n_pmu", "method", "beta", "phi", "rho", "feasible", "placement", "tau", "note"],
                s.rows.iter().map(|r| {
                    vec![
                        r.n_pmu.to_string(),
                        r.method.name().to_string(),
                        opt(r.beta),
                        opt(r.phi),
                        opt(r.rho),
                        r.feasible.to_string(),
                        r.placement.clone(),
                        opt(r.tau),
                        r.note.clone(),
                    ]
                }),
            )?;
            files.push(csv_path);
            let mut plot = LinePlot::new("COP metric vs PMU budget", "N_PMU", "rho (log)", true);
            for &arm in &cfg.methods {
                let pts = s
                    .rows
                    .iter()
                    .filter(|r| r.method == arm)
                    .filter_map(|r| r.rho.map(|x| (r.n_pmu as f64, x)))
                    .collect();
                plot = plot.series(arm.name(), pts);
            }
            let svg = dir.join("sweep.svg");
            fs::write(&svg, plot.to_svg())?;
            files.push(svg);
            let json = dir.join("summary.json");
            fs::write(&json, serde_json::to_string_pretty(&Summary { config: cfg, seed: cfg.seed, results: s })?)?;
            files.push(json);
        }
        Results::Tve(t) => {
            let curve_path = dir.join("tve.csv");
            let mut header = vec!["iter".to_string()];
            header.extend(t.curves.iter().map(|c| c.method.name().to_string()));
            let len = t.curves.first().map(|c| c.mean_tve.len()).unwrap_or(0);
            write_csv(
                &curve_path,
                &header.iter().map(String::as_str).collect::<Vec<_>>(),
                (0..len).map(|k| {
                    let mut row = vec![k.to_string()];
                    row.extend(t.curves.iter().map(|c| num(c.mean_tve[k])));
                    row
                }),
            )?;
            files.push(curve_path);
            let trials_path = dir.join("tve_trials.csv");
            write_csv(
                &trials_path,
                &["trial", "method", "n_pmu", "status", "iterations", "final_tve", "iters_to_target"],
                t.records.iter().map(|r| {
                    vec![
                        r.trial.to_string(),
                        r.method.name().to_string(),
                        r.n_pmu.to_string(),
                        r.status
                            .and_then(|st| serde_json::to_value(st).ok())
                            .and_then(|v| v.as_str().map(String::from))
                            .unwrap_or_else(|| "no_placement".into()),
                        r.iterations.to_string(),
                        num(r.final_tve),
                        r.iters_to_target.map(|k| k.to_string()).unwrap_or_default(),
                    ]
                }),
            )?;
            files.push(trials_path);
            let mut plot = LinePlot::new("Mean TVE over converged trials", "iteration", "TVE % (log)", true);
            for c in &t.curves {
                plot = plot.series(c.method.name(), c.mean_tve.iter().enumerate().map(|(k, &y)| (k as f64, y)).collect());
            }
            let svg = dir.join("tve.svg");
            fs::write(&svg, plot.to_svg())?;
            files.push(svg);
            let json = dir.join("summary.json");
            fs::write(&json, serde_json::to_string_pretty(&Summary { config: cfg, seed: cfg.seed, results: &t.curves })?)?;
            files.push(json);
        }
    }
    Ok(files)
}

/// One trace CSV per run with a kept trace: `trial{t}_{method}.csv`.
pub fn write_traces(t: &TveResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for r in &t.records {
        if let Some(trace) = &r.trace {
            let path = dir.join(format!("trial{}_{}.csv", r.trial, r.method.name()));
            trace.write_csv(fs::File::create(&path)?)?;
            files.push(path);
        }
    }
    Ok(files)
}
