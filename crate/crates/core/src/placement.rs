//! PMU placement: the COP-maximizing SDP relaxation (after the
//! Charnes-Cooper substitution `gamma = 1/phi`, `tau = beta/phi`,
//! `xi = gamma * pmu`), randomized rounding, exhaustive search for small
//! grids, and the accuracy / observability baselines.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gain::{beta_approx, beta_weighted, cop_metric, critical_check, critical_margin, phi_weighted, CopModel, CopReport, Scada};
use crate::grid::LocalSym;
use crate::linalg::{lambda_max, lambda_min, sqrt_psd, SymMatrix};
use crate::rng::{stream_rng, Stream};
use crate::sdp::{solve, LinearConstraint, LmiBlock, LmiProgram, SdpSolution, SdpStatus, SolverOptions, SymCoeff};

pub const DEFAULT_SAMPLES: usize = 1000;
pub const EXHAUSTIVE_LIMIT: u128 = 10_000_000;
const MAX_REPAIR_SWAPS: usize = 2_000;
pub const PLACEMENT_GAP_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct PlacementProblem {
    pub budget: usize,
    pub costs: Vec<f64>,
    pub cost_cap: f64,
    pub beta_min: f64,
    /// Rounding sample count `l*`.
    pub samples: usize,
}

impl PlacementProblem {
    /// Unit costs with the cost cap equal to the budget.
    pub fn new(n: usize, budget: usize, beta_min: f64) -> Self {
        PlacementProblem { budget, costs: vec![1.0; n], cost_cap: budget as f64, beta_min, samples: DEFAULT_SAMPLES }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.budget > n {
            return Err(Error::Config(format!("budget {} exceeds bus count {n}", self.budget)));
        }
        if self.costs.len() != n || self.costs.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::Config("cost vector must have N nonnegative entries".into()));
        }
        if !(self.beta_min > 0.0) {
            return Err(Error::Config("beta_min must be positive".into()));
        }
        Ok(())
    }

    /// Budget and cost constraints (critical constraints are separate).
    pub fn admissible(&self, pmu: &[bool]) -> bool {
        let count = pmu.iter().filter(|&&b| b).count();
        let cost: f64 = pmu.iter().zip(&self.costs).filter(|(b, _)| **b).map(|(_, c)| c).sum();
        count <= self.budget && cost <= self.cost_cap + 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SdpRounding,
    Exhaustive,
    Greedy,
    Accuracy,
    Observability,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::SdpRounding => "proposed",
            Method::Exhaustive => "exhaustive",
            Method::Greedy => "greedy",
            Method::Accuracy => "accuracy",
            Method::Observability => "observability",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlacementResult {
    pub method: Method,
    pub fractional: Option<Vec<f64>>,
    pub pmu: Vec<bool>,
    pub cop: CopReport,
    /// Rounding samples drawn (or candidates enumerated).
    pub samples: usize,
    /// SDP objective and certified bound in COP units.
    pub sdp_objective: Option<f64>,
    pub sdp_bound: Option<f64>,
    /// Budget, cost and (where enforced) critical constraints hold.
    pub feasible: bool,
    /// Rounding found no feasible sample and fell back to greedy repair.
    pub repaired: bool,
    pub elapsed_ms: u128,
}

/// Which objective a relaxation / rounding pass maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `rho = beta / phi`.
    Cop,
    /// `beta` alone.
    Accuracy,
}

/// A built SDP with the scale factors needed to map its solution back.
#[derive(Debug, Clone)]
pub struct PlacementSdp {
    pub program: LmiProgram,
    pub objective: Objective,
    /// Gain scale `s_G`.
    pub gain_scale: f64,
    /// Lipschitz scale `s_M`.
    pub m_scale: f64,
    pub n_buses: usize,
}

impl PlacementSdp {
    pub fn tau_index(&self) -> usize {
        self.n_buses
    }

    pub fn gamma_index(&self) -> Option<usize> {
        (self.objective == Objective::Cop).then_some(self.n_buses + 1)
    }

    /// SDP objective value in COP (or beta) units.
    pub fn unscale(&self, x: f64) -> f64 {
        match self.objective {
            Objective::Cop => x * self.gain_scale / self.m_scale,
            Objective::Accuracy => x * self.gain_scale,
        }
    }
}

/// Placement problem bound to a model and SCADA configuration.
pub struct Planner<'a> {
    pub model: &'a CopModel,
    pub scada: &'a Scada,
    pub problem: &'a PlacementProblem,
    pub solver: SolverOptions,
}

fn local_coeff(t: &LocalSym, scale: f64) -> SymCoeff {
    SymCoeff { idx: t.idx.clone(), vals: &t.vals * scale }
}

fn lex_then_score(a: &(Vec<bool>, f64), b: &(Vec<bool>, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl<'a> Planner<'a> {
    pub fn new(model: &'a CopModel, scada: &'a Scada, problem: &'a PlacementProblem) -> Result<Self> {
        problem.validate(model.n_buses())?;
        // The scaled COP objective is small and the gain block is badly
        // conditioned, so a tight relative gap costs many Newton steps for
        // digits the rounding step never uses.
        let solver = SolverOptions { gap_tol: PLACEMENT_GAP_TOL, ..SolverOptions::default() };
        Ok(Planner { model, scada, problem, solver })
    }

    fn n(&self) -> usize {
        self.model.n_buses()
    }

    fn gain_scale(&self) -> f64 {
        let full = self.model.gain_pmu(&vec![1.0; self.n()]) + &self.scada.s_prior;
        lambda_max(&full).unwrap_or(1.0).max(f64::MIN_POSITIVE)
    }

    /// Smallest positive `phi` any placement can have: by interlacing, the
    /// smallest positive top eigenvalue of the 2x2 per-bus blocks of `M`.
    pub fn phi_floor(&self) -> f64 {
        let n = self.n();
        let m = &self.scada.m;
        (0..n)
            .map(|b| {
                let sub = m.select_rows(&[b, n + b]).select_columns(&[b, n + b]);
                lambda_max(&sub).unwrap_or(0.0)
            })
            .filter(|&x| x > 1e-9 * self.scada.m_scale)
            .fold(f64::INFINITY, f64::min)
    }

    /// Assemble the relaxation. Variables: `xi_0..xi_{N-1}`, `tau`, and
    /// `gamma` for the COP objective.
    pub fn build_sdp(&self, objective: Objective) -> Result<PlacementSdp> {
        let n = self.n();
        let d = 2 * n;
        let p = self.problem;
        let sg = self.gain_scale();
        let sm = if self.scada.m_scale > 0.0 { self.scada.m_scale } else { 1.0 };
        let cop = objective == Objective::Cop;
        let n_vars = if cop { n + 2 } else { n + 1 };
        let tau = n;
        let gamma = n + 1;
        let mut prog = LmiProgram::new(n_vars);
        prog.var_names = (0..n).map(|i| format!("xi{}", i + 1)).collect();
        prog.var_names.push("tau".into());
        if cop {
            prog.var_names.push("gamma".into());
        }
        prog.objective[tau] = 1.0;

        let pmu_terms: Vec<SymCoeff> = (0..n).map(|b| local_coeff(self.model.pmu_term(b), 1.0 / sg)).collect();
        let s_scaled = &self.scada.s_prior / sg;
        let mut neg_id = SymCoeff::identity(d);
        neg_id.vals *= -1.0;

        // P(xi) + gamma S - tau I >= 0   (accuracy: S is constant)
        let mut obj_block = if cop {
            LmiBlock::zeros(d, "objective").term(gamma, SymCoeff::from_dense(&s_scaled))
        } else {
            LmiBlock::new(d, s_scaled.clone(), "objective")
        };
        for (b, t) in pmu_terms.iter().enumerate() {
            obj_block = obj_block.term(b, t.clone());
        }
        prog.blocks.push(obj_block.term(tau, neg_id));

        if cop {
            // [[I, R (gamma I - I_xi)], [(.)^T, gamma I]] >= 0,  R = M^{1/2}
            let r = sqrt_psd(&SymMatrix::symmetrized(&self.scada.m / sm))?.into_matrix();
            let mut constant = DMatrix::zeros(2 * d, 2 * d);
            constant.view_mut((0, 0), (d, d)).fill_with_identity();
            let mut g = DMatrix::zeros(2 * d, 2 * d);
            g.view_mut((0, d), (d, d)).copy_from(&r);
            g.view_mut((d, 0), (d, d)).copy_from(&r);
            g.view_mut((d, d), (d, d)).fill_with_identity();
            let mut schur = LmiBlock::new(2 * d, constant, "schur").term(gamma, SymCoeff::from_dense(&g));
            for b in 0..n {
                let mut a = DMatrix::zeros(2 * d, 2 * d);
                for col in [b, n + b] {
                    for row in 0..d {
                        a[(row, d + col)] = -r[(row, col)];
                        a[(d + col, row)] = -r[(row, col)];
                    }
                }
                schur = schur.term(b, SymCoeff::from_dense(&a));
            }
            prog.blocks.push(schur);
        }

        let bmin = p.beta_min / sg;
        for (k, pat) in self.scada.patterns.iter().enumerate() {
            let mut sk = self.scada.pattern_s(k) / sg;
            for i in 0..d {
                sk[(i, i)] -= bmin;
            }
            let label = format!("failure {pat:?}");
            let mut blk = if cop {
                LmiBlock::zeros(d, label).term(gamma, SymCoeff::from_dense(&sk))
            } else {
                LmiBlock::new(d, sk, label)
            };
            for (b, t) in pmu_terms.iter().enumerate() {
                blk = blk.term(b, t.clone());
            }
            prog.blocks.push(blk);
        }

        // scalar rows: 0 <= xi_n <= gamma (or 1), budget, cost
        let (upper, scale_var): (Vec<(usize, f64)>, Option<usize>) = if cop { (vec![(gamma, -1.0)], Some(gamma)) } else { (vec![], None) };
        for b in 0..n {
            prog.linear.push(LinearConstraint::new(vec![(b, -1.0)], 0.0, format!("xi{} >= 0", b + 1)));
            let mut c = vec![(b, 1.0)];
            c.extend(upper.iter().copied());
            prog.linear.push(LinearConstraint::new(c, if cop { 0.0 } else { 1.0 }, format!("xi{} <= bound", b + 1)));
        }
        let mut budget: Vec<(usize, f64)> = (0..n).map(|b| (b, 1.0)).collect();
        let mut cost: Vec<(usize, f64)> = (0..n).map(|b| (b, p.costs[b])).collect();
        let (brhs, crhs) = match scale_var {
            Some(gv) => {
                budget.push((gv, -(p.budget as f64)));
                cost.push((gv, -p.cost_cap));
                (0.0, 0.0)
            }
            None => (p.budget as f64, p.cost_cap),
        };
        prog.linear.push(LinearConstraint::new(budget, brhs, "budget"));
        prog.linear.push(LinearConstraint::new(cost, crhs, "cost"));
        if cop {
            // keeps the program bounded when phi can reach zero
            let floor = self.phi_floor() / sm;
            let cap = if floor.is_finite() { 1.0 / floor } else { 1.0 };
            prog.linear.push(LinearConstraint::new(vec![(gamma, 1.0)], cap * (1.0 + 1e-9), "gamma cap"));
        }

        Ok(PlacementSdp { program: prog, objective, gain_scale: sg, m_scale: sm, n_buses: n })
    }

    pub fn solve_sdp(&self, sdp: &PlacementSdp) -> Result<SdpSolution> {
        let mut sol = solve(&sdp.program, &self.solver)?;
        // Phase I struggles when the feasible set is very thin after
        // scaling; a binary placement that clears every failure pattern
        // gives an interior point directly.
        if matches!(sol.status, SdpStatus::Infeasible | SdpStatus::MaxIter) && sol.margin <= 0.0 {
            if let Some(y0) = self.interior_start(sdp) {
                let mut prog = sdp.program.clone();
                prog.start = Some(y0);
                let iters = sol.iterations;
                sol = solve(&prog, &self.solver)?;
                sol.iterations += iters;
            }
        }
        match sol.status {
            SdpStatus::Infeasible => Err(Error::Infeasible(format!(
                "no fractional placement clears beta_min; binding constraint: {}",
                sol.violated.as_deref().unwrap_or("unknown")
            ))),
            SdpStatus::MaxIter if sol.margin <= 0.0 => Err(Error::Infeasible(format!(
                "no feasible point found (not certified); most violated: {}",
                sol.violated.as_deref().unwrap_or("unknown")
            ))),
            SdpStatus::Unbounded => Err(Error::NoConvergence("placement SDP (unbounded)")),
            _ => Ok(sol),
        }
    }

    /// A strictly feasible point built from a binary placement that passes
    /// the critical checks: `xi = gamma (a V + b 1)` with `a` just below 1
    /// and a small uniform `b`, `gamma` at half the Schur-block limit and
    /// `tau` just below the objective block's smallest eigenvalue.
    fn interior_start(&self, sdp: &PlacementSdp) -> Option<Vec<f64>> {
        let n = self.n();
        let pmu = self.critical_guided(&(0..n).collect::<Vec<_>>());
        if !self.passes_critical(&pmu) {
            return None;
        }
        let k = pmu.iter().filter(|&&b| b).count();
        let (a, b) = (1.0 - 1e-3, 5e-4 * k.max(1) as f64 / n as f64);
        let w: Vec<f64> = pmu.iter().map(|&on| if on { a + b } else { b }).collect();
        let prog = &sdp.program;
        let mut y = vec![0.0; prog.n_vars];
        let scale = match sdp.objective {
            Objective::Accuracy => 1.0,
            Objective::Cop => {
                let d = 2 * n;
                let mut dmd = &self.scada.m / sdp.m_scale;
                for i in 0..d {
                    for j in 0..d {
                        dmd[(i, j)] *= (1.0 - w[i % n]) * (1.0 - w[j % n]);
                    }
                }
                let top = lambda_max(&dmd).ok()?;
                let cap = prog.linear.iter().find(|c| c.label == "gamma cap").map_or(f64::INFINITY, |c| c.rhs);
                let gamma = if top > 0.0 { (0.5 / top).min(0.5 * cap) } else { 0.5 * cap };
                if !gamma.is_finite() {
                    return None;
                }
                y[n + 1] = gamma;
                gamma
            }
        };
        for (yi, wi) in y.iter_mut().zip(&w) {
            *yi = scale * wi;
        }
        let obj = prog.blocks[0].eval(&y);
        let (lo, hi) = (lambda_min(&obj).ok()?, lambda_max(&obj).ok()?);
        y[n] = lo - 1e-6 * hi.abs().max(f64::MIN_POSITIVE);
        (prog.margin(&y).0 > 0.0).then_some(y)
    }

    /// Relax, solve, recover and round.
    pub fn sdp_rounding(&self, objective: Objective, seed: u64) -> Result<PlacementResult> {
        let start = Instant::now();
        let n = self.n();
        let method = match objective {
            Objective::Cop => Method::SdpRounding,
            Objective::Accuracy => Method::Accuracy,
        };
        if self.problem.budget == 0 {
            let mut r = self.result(method, vec![false; n], None, 0, start);
            r.fractional = Some(vec![0.0; n]);
            return Ok(r);
        }
        let sdp = self.build_sdp(objective)?;
        let sol = self.solve_sdp(&sdp)?;
        let frac = recover_fractional(&sdp, &sol)?;
        let mut res = self.randomized_round(&frac, objective, seed)?;
        res.method = method;
        res.sdp_objective = Some(sdp.unscale(sol.objective));
        res.sdp_bound = Some(sdp.unscale(sol.bound));
        res.elapsed_ms = start.elapsed().as_millis();
        Ok(res)
    }

    fn score(&self, pmu: &[bool], objective: Objective) -> f64 {
        let beta = beta_approx(self.model, self.scada, pmu);
        match objective {
            Objective::Accuracy => beta,
            Objective::Cop => {
                let w: Vec<f64> = pmu.iter().map(|&b| f64::from(u8::from(b))).collect();
                crate::gain::rho_of(beta, phi_weighted(&self.scada.m, &w)).0
            }
        }
    }

    fn passes_critical(&self, pmu: &[bool]) -> bool {
        critical_check(self.model, self.scada, pmu, self.problem.beta_min).iter().all(|&b| b)
    }

    /// Best admissible candidate passing the critical checks: score
    /// descending, ties to the lexicographically smallest vector.
    fn pick_best(&self, cands: Vec<Vec<bool>>, objective: Objective) -> Option<Vec<bool>> {
        let mut scored: Vec<(Vec<bool>, f64)> = cands
            .into_par_iter()
            .map(|c| {
                let s = self.score(&c, objective);
                (c, s)
            })
            .collect();
        scored.sort_by(lex_then_score);
        scored.into_iter().map(|(c, _)| c).find(|c| self.passes_critical(c))
    }

    fn result(&self, method: Method, pmu: Vec<bool>, fractional: Option<Vec<f64>>, samples: usize, start: Instant) -> PlacementResult {
        let cop = cop_metric(self.model, self.scada, &pmu, self.problem.beta_min);
        let feasible = self.problem.admissible(&pmu) && cop.all_critical_ok();
        PlacementResult {
            method,
            fractional,
            pmu,
            cop,
            samples,
            sdp_objective: None,
            sdp_bound: None,
            feasible,
            repaired: false,
            elapsed_ms: start.elapsed().as_millis(),
        }
    }

    /// Draw `l*` Bernoulli vectors with probabilities `frac`, drop those
    /// violating budget, cost or critical constraints, keep the best.
    /// Falls back to greedy repair when nothing survives.
    pub fn randomized_round(&self, frac: &[f64], objective: Objective, seed: u64) -> Result<PlacementResult> {
        let start = Instant::now();
        let n = self.n();
        if frac.len() != n {
            return Err(Error::Dimension("fractional placement length".into()));
        }
        let mut rng = stream_rng(seed, Stream::Rounding, 0);
        let mut unique = BTreeSet::new();
        for _ in 0..self.problem.samples {
            let s: Vec<bool> = frac.iter().map(|&p| rng.random_bool(p.clamp(0.0, 1.0))).collect();
            if self.problem.admissible(&s) {
                unique.insert(s);
            }
        }
        let method = match objective {
            Objective::Cop => Method::SdpRounding,
            Objective::Accuracy => Method::Accuracy,
        };
        if let Some(best) = self.pick_best(unique.into_iter().collect(), objective) {
            return Ok(self.result(method, best, Some(frac.to_vec()), self.problem.samples, start));
        }
        let mut res = self.greedy_repair(frac, objective, start)?;
        res.method = method;
        res.repaired = true;
        res.samples = self.problem.samples;
        Ok(res)
    }

    /// Candidates, keeping the best one that passes the critical checks:
    /// the largest admissible prefix by descending `frac`, its single-bus
    /// swaps (when there are at most `MAX_REPAIR_SWAPS`), and a
    /// critical-guided build that, while the checks fail, adds the
    /// admissible bus with the best `critical_margin` (ties to larger
    /// `frac`) and then fills the remaining budget by descending `frac`.
    fn greedy_repair(&self, frac: &[f64], objective: Objective, start: Instant) -> Result<PlacementResult> {
        let n = self.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));

        let mut prefix = vec![false; n];
        self.fill(&mut prefix, &order);

        let guided = self.critical_guided(&order);

        let mut cands = vec![guided.clone()];
        let (ins, outs): (Vec<usize>, Vec<usize>) = (0..n).partition(|&b| prefix[b]);
        if ins.len() * outs.len() <= MAX_REPAIR_SWAPS {
            for &i in &ins {
                for &o in &outs {
                    let mut c = prefix.clone();
                    c[i] = false;
                    c[o] = true;
                    if self.problem.admissible(&c) {
                        cands.push(c);
                    }
                }
            }
        }
        cands.push(prefix);
        let pmu = self.pick_best(cands, objective).unwrap_or(guided);
        Ok(self.result(Method::Greedy, pmu, Some(frac.to_vec()), 0, start))
    }

    /// While the critical checks fail, add the admissible bus with the
    /// best `critical_margin` (ties to earlier in `order`), then fill the
    /// remaining budget in `order`.
    fn critical_guided(&self, order: &[usize]) -> Vec<bool> {
        let n = self.n();
        let mut guided = vec![false; n];
        while !self.passes_critical(&guided) {
            let best = order
                .par_iter()
                .filter(|&&b| !guided[b])
                .filter_map(|&b| {
                    let mut c = guided.clone();
                    c[b] = true;
                    self.problem
                        .admissible(&c)
                        .then(|| (b, critical_margin(self.model, self.scada, &c, self.problem.beta_min)))
                })
                .collect::<Vec<_>>()
                .into_iter()
                .fold(None, |acc: Option<(usize, (usize, f64))>, (b, m)| match acc {
                    Some((_, bm)) if bm.0 > m.0 || (bm.0 == m.0 && bm.1 >= m.1) => acc,
                    _ => Some((b, m)),
                });
            match best {
                Some((b, _)) => guided[b] = true,
                None => break,
            }
        }
        self.fill(&mut guided, order);
        guided
    }

    /// Add buses in `order` while admissible.
    fn fill(&self, pmu: &mut [bool], order: &[usize]) {
        for &b in order {
            if !pmu[b] {
                pmu[b] = true;
                if !self.problem.admissible(pmu) {
                    pmu[b] = false;
                }
            }
        }
    }

    /// Number of subsets within the budget, as an upper bound on the search.
    pub fn search_size(&self) -> u128 {
        let n = self.n() as u128;
        let mut total = 0u128;
        let mut c = 1u128;
        for k in 0..=self.problem.budget as u128 {
            total = total.saturating_add(c);
            c = c.saturating_mul(n - k.min(n)) / (k + 1);
        }
        total
    }

    /// All maximal admissible placements: within budget and cost, and no
    /// further bus fits. With unit costs these are exactly the
    /// `budget`-subsets.
    pub fn maximal_candidates(&self) -> Result<Vec<Vec<bool>>> {
        let size = self.search_size();
        if size > EXHAUSTIVE_LIMIT {
            return Err(Error::SearchTooLarge { count: size, limit: EXHAUSTIVE_LIMIT });
        }
        let n = self.n();
        let mut out = Vec::new();
        let mut cur = vec![false; n];
        self.dfs(0, 0, 0.0, &mut cur, &mut out);
        Ok(out)
    }

    fn dfs(&self, i: usize, count: usize, cost: f64, cur: &mut Vec<bool>, out: &mut Vec<Vec<bool>>) {
        let n = self.n();
        let p = self.problem;
        if i == n {
            let maximal = (0..n).all(|b| cur[b] || count + 1 > p.budget || cost + p.costs[b] > p.cost_cap + 1e-12);
            if maximal {
                out.push(cur.clone());
            }
            return;
        }
        // lexicographic order: 0 before 1
        self.dfs(i + 1, count, cost, cur, out);
        if count < p.budget && cost + p.costs[i] <= p.cost_cap + 1e-12 {
            cur[i] = true;
            self.dfs(i + 1, count + 1, cost + p.costs[i], cur, out);
            cur[i] = false;
        }
    }

    /// COP argmax over maximal admissible placements that pass the critical
    /// checks.
    pub fn exhaustive_optimal(&self, objective: Objective) -> Result<PlacementResult> {
        let start = Instant::now();
        let cands = self.maximal_candidates()?;
        let count = cands.len();
        let best = self
            .pick_best(cands, objective)
            .ok_or_else(|| Error::Infeasible("no admissible placement passes every failure pattern".into()))?;
        Ok(self.result(Method::Exhaustive, best, None, count, start))
    }

    /// Greedy topological cover. SCADA-metered buses start covered; each
    /// step adds the PMU covering the most uncovered buses (ties broken at
    /// random under `seed`) until `beta > 0` or the budget runs out.
    pub fn baseline_observability(&self, seed: u64) -> Result<PlacementResult> {
        let start = Instant::now();
        let grid = &self.model.grid;
        let n = self.n();
        let mut covered = vec![false; n];
        for b in 0..n {
            if self.scada.injection[b] {
                covered[b] = true;
            }
        }
        for (ell, d) in grid.directed_lines().iter().enumerate() {
            if self.scada.flow[ell] {
                covered[d.from] = true;
                covered[d.to] = true;
            }
        }
        let mut rng = stream_rng(seed, Stream::Observability, 0);
        let mut pmu = vec![false; n];
        while beta_approx(self.model, self.scada, &pmu) <= 0.0 {
            let gain = |b: usize| {
                usize::from(!covered[b]) + grid.neighbors(b).iter().filter(|&&m| !covered[m]).count()
            };
            let mut options: Vec<usize> = (0..n)
                .filter(|&b| !pmu[b])
                .filter(|&b| {
                    let mut trial = pmu.clone();
                    trial[b] = true;
                    self.problem.admissible(&trial)
                })
                .collect();
            if options.is_empty() {
                break;
            }
            let best = options.iter().map(|&b| gain(b)).max().unwrap_or(0);
            options.retain(|&b| gain(b) == best);
            let &pick = options.choose(&mut rng).expect("nonempty");
            pmu[pick] = true;
            covered[pick] = true;
            for &m in grid.neighbors(pick) {
                covered[m] = true;
            }
        }
        let mut res = self.result(Method::Observability, pmu, None, 0, start);
        // the cover ignores failure patterns; feasibility here means observable
        res.feasible = res.cop.observable() && self.problem.admissible(&res.pmu);
        Ok(res)
    }
}

/// `pmu* = xi* / gamma*`, clamped to `[0, 1]` (accuracy relaxations carry
/// no `gamma` and return `xi*` directly).
pub fn recover_fractional(sdp: &PlacementSdp, sol: &SdpSolution) -> Result<Vec<f64>> {
    let n = sdp.n_buses;
    let gamma = match sdp.gamma_index() {
        Some(g) => sol.y[g],
        None => 1.0,
    };
    if gamma <= 1e-7 {
        return Err(Error::DegenerateSolution(gamma));
    }
    sol.y[..n]
        .iter()
        .map(|&x| {
            let v = x / gamma;
            if !(-1e-8..=1.0 + 1e-8).contains(&v) {
                Err(Error::Dimension(format!("recovered entry {v} outside [0, 1]")))
            } else {
                Ok(v.clamp(0.0, 1.0))
            }
        })
        .collect()
}

/// `beta / phi` of a fractional placement.
pub fn fractional_rho(model: &CopModel, scada: &Scada, w: &[f64]) -> f64 {
    let beta = beta_weighted(model, scada, w);
    crate::gain::rho_of(beta, phi_weighted(&scada.m, w)).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::measurement::{sample_scada, NoiseModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_bus() -> (CopModel, Scada) {
        let m = CopModel::new(cases::two_bus(), NoiseModel::default());
        // injection at bus 2, flow 1->2
        let s = m.scada(vec![false, true], vec![true, false]);
        (m, s)
    }

    fn ieee14(seed: u64) -> (CopModel, Scada) {
        let m = CopModel::new(cases::load("ieee14").unwrap(), NoiseModel::default());
        let (inj, flow) = sample_scada(&m.grid, 0.15, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s = m.scada(inj, flow);
        (m, s)
    }

    #[test]
    fn two_bus_exhaustive_sees_two_candidates() {
        let (m, s) = two_bus();
        let prob = PlacementProblem::new(2, 1, 0.01);
        let pl = Planner::new(&m, &s, &prob).unwrap();
        assert_eq!(pl.maximal_candidates().unwrap().len(), 2);
    }

    #[test]
    fn pattern_block_count() {
        let (m, s) = ieee14(1);
        let prob = PlacementProblem::new(14, 5, 0.01);
        let pl = Planner::new(&m, &s, &prob).unwrap();
        let sdp = pl.build_sdp(Objective::Cop).unwrap();
        assert_eq!(sdp.program.blocks.len(), 2 + s.patterns.len());
        assert_eq!(s.patterns.len(), 17);
        let acc = pl.build_sdp(Objective::Accuracy).unwrap();
        assert_eq!(acc.program.blocks.len(), 1 + s.patterns.len());
    }

    #[test]
    fn pmu_part_is_linear() {
        let (m, _) = ieee14(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..14).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..14).map(|_| rng.random_range(0.0..1.0)).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let lhs = m.gain_pmu(&ab);
        let rhs = m.gain_pmu(&a) + m.gain_pmu(&b);
        assert!((lhs - &rhs).norm() <= 1e-12 * rhs.norm());
    }

    #[test]
    fn recover_fractional_cases() {
        let (m, s) = two_bus();
        let prob = PlacementProblem::new(2, 1, 0.01);
        let pl = Planner::new(&m, &s, &prob).unwrap();
        let sdp = pl.build_sdp(Objective::Cop).unwrap();
        let mk = |y: Vec<f64>| SdpSolution {
            y,
            objective: 0.0,
            bound: 0.0,
            status: SdpStatus::Optimal,
            margin: 0.0,
            violated: None,
            iterations: 0,
            log: vec![],
        };
        assert_eq!(recover_fractional(&sdp, &mk(vec![0.5, 0.5, 0.0, 0.5])).unwrap(), vec![1.0, 1.0]);
        assert_eq!(recover_fractional(&sdp, &mk(vec![0.0, 0.0, 0.0, 0.5])).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(recover_fractional(&sdp, &mk(vec![0.0, 0.0, 0.0, 0.0])), Err(Error::DegenerateSolution(_))));
    }

    #[test]
    fn binary_fraction_rounds_to_itself() {
        let (m, s) = ieee14(1);
        let prob = PlacementProblem::new(14, 14, 0.01);
        let pl = Planner::new(&m, &s, &prob).unwrap();
        let frac: Vec<f64> = (0..14).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let r = pl.randomized_round(&frac, Objective::Cop, 5).unwrap();
        let expect: Vec<bool> = frac.iter().map(|&x| x == 1.0).collect();
        if r.feasible && !r.repaired {
            assert_eq!(r.pmu, expect);
        }
    }

    #[test]
    fn rounding_is_deterministic() {
        let (m, s) = ieee14(2);
        let prob = PlacementProblem { samples: 200, ..PlacementProblem::new(14, 6, 0.01) };
        let pl = Planner::new(&m, &s, &prob).unwrap();
        let frac = vec![0.4; 14];
        let a = pl.randomized_round(&frac, Objective::Cop, 9).unwrap();
        let b = pl.randomized_round(&frac, Objective::Cop, 9).unwrap();
        assert_eq!(a.pmu, b.pmu);
    }

    #[test]
    fn star_graph_observability_picks_hub() {
        let text = r#"{"buses": [1, 2, 3, 4, 5], "branches": [
            {"from": 1, "to": 2, "r": 0.01, "x": 0.1},
            {"from": 1, "to": 3, "r": 0.01, "x": 0.1},
            {"from": 1, "to": 4, "r": 0.01, "x": 0.1},
            {"from": 1, "to": 5, "r": 0.01, "x": 0.1}]}"#;
        let g = crate::grid::parse_case(text).unwrap();
        let m = CopModel::new(g, NoiseModel::default());
        let s = m.scada(vec![false; 5], vec![false; 8]);
        let prob = PlacementProblem::new(5, 1, 0.01);
        let pl = Planner::new(&m, &s, &prob).unwrap();
        let r = pl.baseline_observability(1).unwrap();
        assert_eq!(r.pmu, vec![true, false, false, false, false]);
        assert!(r.cop.observable());
    }

    #[test]
    fn search_guard() {
        let m = CopModel::new(cases::load("ieee118").unwrap(), NoiseModel::default());
        let s = m.scada(vec![false; 118], vec![false; m.mats.n_directed()]);
        let prob = PlacementProblem::new(118, 20, 0.01);
        let pl = Planner::new(&m, &s, &prob).unwrap();
        assert!(matches!(pl.maximal_candidates(), Err(Error::SearchTooLarge { .. })));
    }

    #[test]
    fn rejects_bad_problems() {
        let (m, s) = two_bus();
        assert!(Planner::new(&m, &s, &PlacementProblem::new(2, 3, 0.01)).is_err());
        assert!(Planner::new(&m, &s, &PlacementProblem::new(2, 1, 0.0)).is_err());
    }
}
