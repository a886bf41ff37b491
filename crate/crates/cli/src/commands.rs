//! The subcommands, plus the pipeline pieces they share.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use ctrldiffuse::approx_mdp::{estimate_finite_mdp, greedy_policy, q_value_iteration};
use ctrldiffuse::bounds::{self, ComplexityParams};
use ctrldiffuse::io::fmt_float;
use ctrldiffuse::policy_eval::{self, GapEcho, ReferenceOutcome, ReferenceSetup};
use ctrldiffuse::qlearn::{run_q_learning, LearnConfig, LearnOutcome};
use ctrldiffuse::{
    rng, ActionGrid, BoundReport, ComplexityReport, CostEstimate, DiffusionModel, FiniteMdp, GapReport, LipschitzRow, QMatrix,
    QTable, StateGrid,
};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::manifest::{Recorder, RunManifest};

const VI_MAX_SWEEPS: usize = 1_000_000;

/// Seeds of one pipeline row, derived from the master seed. Learning and
/// solving get a fresh seed per row; evaluation and the reference share one
/// seed across rows so that all evaluations see the same noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub learn: u64,
    pub solve: u64,
    pub eval: u64,
    pub reference: u64,
}

impl Seeds {
    pub fn new(master: u64, row: usize) -> Self {
        Seeds {
            learn: rng::derive_seed(rng::derive_seed(master, 0), row as u64),
            solve: rng::derive_seed(rng::derive_seed(master, 1), row as u64),
            eval: rng::derive_seed(master, 2),
            reference: rng::derive_seed(master, 3),
        }
    }
}

pub struct Grids {
    pub states: StateGrid,
    pub actions: ActionGrid,
}

pub struct LearnRun {
    pub grids: Grids,
    pub outcome: LearnOutcome<f64>,
    pub v_max: f64,
}

pub struct SolveRun {
    pub grids: Grids,
    pub mdp: FiniteMdp,
    pub q: QMatrix,
}

pub fn solve_at(cfg: &ExperimentConfig, model: &DiffusionModel, h: f64, seed: u64) -> Result<SolveRun, CliError> {
    let (states, actions) = cfg.grids(h)?;
    let scheme = cfg.learn_scheme(h, seed)?;
    let est = estimate_finite_mdp(model, &states, &actions, &scheme, cfg.samples_per_pair)?;
    let q = q_value_iteration(&est.mdp, cfg.vi_tolerance, VI_MAX_SWEEPS)?;
    Ok(SolveRun { grids: Grids { states, actions }, mdp: est.mdp, q })
}

pub fn learn_at(cfg: &ExperimentConfig, model: &DiffusionModel, h: f64, seeds: Seeds) -> Result<LearnRun, CliError> {
    let v_max = bounds::v_max(h, model.cost_bound_c, model.discount_beta)?;
    let solved = if cfg.track_reference { Some(solve_at(cfg, model, h, seeds.solve)?) } else { None };
    let (states, actions) = cfg.grids(h)?;
    let scheme = cfg.learn_scheme(h, seeds.learn)?;
    let mut lc = LearnConfig::new(cfg.learn_steps);
    lc.q_init = cfg.q_init.unwrap_or(v_max);
    lc.cost_at_representative = cfg.cost_at_representative;
    lc.x0 = Some(cfg.x0);
    if let Some(s) = &solved {
        lc.reference_q = Some(&s.q);
        lc.reference_mdp = Some(&s.mdp);
    }
    let outcome = run_q_learning(model, &states, &actions, &scheme, &lc, &mut rng::master(seeds.learn))?;
    Ok(LearnRun { grids: Grids { states, actions }, outcome, v_max })
}

pub fn evaluate_policy(cfg: &ExperimentConfig, model: &DiffusionModel, h: f64, grids: &Grids, policy: &[usize], seed: u64) -> Result<CostEstimate, CliError> {
    let scheme = cfg.eval_scheme(h, seed)?;
    let horizon = cfg.eval_horizon_for(model, h);
    Ok(policy_eval::evaluate_learned_control(model, &grids.states, &grids.actions, policy, cfg.x0, &scheme, cfg.eval_rollouts, horizon)?)
}

pub fn reference_at(cfg: &ExperimentConfig, model: &DiffusionModel, seeds: Seeds) -> Result<ReferenceOutcome<f64>, CliError> {
    let (states, actions) = cfg.reference_grids()?;
    let h = cfg.reference_h;
    let setup = ReferenceSetup {
        scheme: ctrldiffuse::SamplingScheme::new(h, cfg.reference_substeps, seeds.reference)?,
        eval_scheme: cfg.eval_scheme(h, seeds.eval)?,
        states,
        actions,
        n_samples_per_pair: cfg.reference_samples_per_pair,
        n_rollouts: cfg.eval_rollouts,
        horizon: cfg.eval_horizon_for(model, h),
        vi_tolerance: cfg.vi_tolerance,
        max_transitions: cfg.reference_max_transitions,
    };
    Ok(policy_eval::estimate_reference_optimum(model, cfg.x0, &setup)?)
}

/// The total bound at `h`; a failed quantization hypothesis gives `+∞`.
pub fn bound_at(cfg: &ExperimentConfig, model: &DiffusionModel, h: f64, grids: &Grids) -> Result<BoundReport, CliError> {
    let c = model.constants();
    Ok(bounds::total_error_bound_or_vacuous(
        c.bound_b,
        c.lipschitz_k,
        c.discount_beta,
        h,
        grids.states.l_x(),
        grids.actions.l_u(),
        cfg.n_const,
        cfg.regular,
    )?)
}

pub fn complexity_at(cfg: &ExperimentConfig, model: &DiffusionModel, h: f64, eps: f64, grids: &Grids) -> Result<ComplexityReport, CliError> {
    let params = ComplexityParams { cover_time: cfg.cover_time, psi: cfg.psi, eps, delta: cfg.delta, omega: cfg.omega };
    Ok(bounds::complexity_report(&params, h, model.discount_beta, model.cost_bound_c, grids.states.len(), grids.actions.len())?)
}

fn prepare(cfg: &ExperimentConfig) -> Result<DiffusionModel, CliError> {
    cfg.validate()?;
    cfg.model()
}

pub fn cmd_learn(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let model = prepare(cfg)?;
    let mut rec = Recorder::new("learn", &cfg.out)?;
    let run = rec.stage("learn", || learn_at(cfg, &model, cfg.h, Seeds::new(cfg.seed, 0)))?;
    rec.write("qtable.csv", |w| Ok(run.outcome.table.write_csv(w)?))?;
    rec.write("history.csv", |w| Ok(run.outcome.history.write_csv(w)?))?;
    rec.finish(cfg)
}

pub fn cmd_solve(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let model = prepare(cfg)?;
    let mut rec = Recorder::new("solve", &cfg.out)?;
    let run = rec.stage("solve", || solve_at(cfg, &model, cfg.h, Seeds::new(cfg.seed, 0).solve))?;
    rec.write("mdp.bin", |w| Ok(run.mdp.write_binary(w)?))?;
    rec.write("qstar.csv", |w| Ok(run.q.write_csv(w)?))?;
    rec.finish(cfg)
}

/// Reads either a learned table (`qtable.csv`) or a solved matrix
/// (`qstar.csv`), telling them apart by header.
pub fn read_q(path: &Path) -> Result<QMatrix, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Validation(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let rest = std::io::Cursor::new(header.clone()).chain(reader);
    if header.trim() == "state,action,value,visits" {
        Ok(QTable::read_csv(BufReader::new(rest))?.to_qmatrix())
    } else {
        Ok(QMatrix::read_csv(BufReader::new(rest))?)
    }
}

fn check_shape(q: &QMatrix, grids: &Grids, what: &str) -> Result<(), CliError> {
    if q.n_states() != grids.states.len() || q.n_actions() != grids.actions.len() {
        return Err(CliError::Validation(format!(
            "{what} is {}x{} but the configured grid is {}x{}",
            q.n_states(),
            q.n_actions(),
            grids.states.len(),
            grids.actions.len()
        )));
    }
    Ok(())
}

/// Gap of the greedy control of `q` against either the refined reference or,
/// when given, the greedy control of `reference_q` on the same grids.
pub fn cmd_evaluate(cfg: &ExperimentConfig, q_path: Option<&Path>, reference_q: Option<&Path>) -> Result<(RunManifest, GapReport), CliError> {
    let model = prepare(cfg)?;
    let seeds = Seeds::new(cfg.seed, 0);
    let mut rec = Recorder::new("evaluate", &cfg.out)?;
    let (states, actions) = cfg.grids(cfg.h)?;
    let grids = Grids { states, actions };
    let q_path = q_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("qtable.csv"));
    let q = read_q(&q_path)?;
    check_shape(&q, &grids, "Q table")?;
    let learned = rec.stage("evaluate", || evaluate_policy(cfg, &model, cfg.h, &grids, &greedy_policy(&q), seeds.eval))?;
    let reference = match reference_q {
        Some(p) => {
            let rq = read_q(p)?;
            check_shape(&rq, &grids, "reference Q table")?;
            rec.stage("reference", || evaluate_policy(cfg, &model, cfg.h, &grids, &greedy_policy(&rq), seeds.eval))?
        }
        None => rec.stage("reference", || reference_at(cfg, &model, seeds))?.estimate,
    };
    let bound = bound_at(cfg, &model, cfg.h, &grids)?;
    let report = policy_eval::compute_gap(&learned, &reference, &bound, echo(cfg, cfg.h, &grids, seeds));
    rec.write("gap_report.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        Ok(writeln!(w)?)
    })?;
    rec.write("gap_report.csv", |w| Ok(report.write_csv(w)?))?;
    Ok((rec.finish(cfg)?, report))
}

fn echo(cfg: &ExperimentConfig, h: f64, grids: &Grids, seeds: Seeds) -> GapEcho<f64> {
    GapEcho {
        h,
        substeps: cfg.learn_substeps(h),
        n_states: grids.states.len(),
        n_actions: grids.actions.len(),
        x0: cfg.x0,
        learn_seed: seeds.learn,
        eval_seed: seeds.eval,
        reference_seed: seeds.reference,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsRow {
    pub h: f64,
    pub l_x: f64,
    pub l_u: f64,
    pub report: BoundReport,
    /// `None` when the complexity hypotheses fail at this `h`.
    pub complexity: Option<ComplexityReport>,
}

pub const BOUNDS_CSV_HEADER: &str = "h,L_X,L_U,term_time,term_quant,term_pwc,total,T_linear,T_simplified,T_polynomial";

fn opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub fn bounds_rows(cfg: &ExperimentConfig, model: &DiffusionModel) -> Result<Vec<BoundsRow>, CliError> {
    cfg.h_values()
        .into_iter()
        .map(|h| {
            let (states, actions) = cfg.grids(h)?;
            let grids = Grids { states, actions };
            let report = bound_at(cfg, model, h, &grids)?;
            let complexity = complexity_at(cfg, model, h, cfg.eps, &grids)
                .map_err(|e| log::warn!("complexity at h = {h}: {e}"))
                .ok();
            Ok(BoundsRow { h, l_x: grids.states.l_x(), l_u: grids.actions.l_u(), report, complexity })
        })
        .collect()
}

pub fn format_bounds_table(rows: &[BoundsRow]) -> String {
    let mut s = format!(
        "{:>10} {:>10} {:>10} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "h", "L_X", "L_U", "time", "quant", "pwc", "total", "T_linear"
    );
    for r in rows {
        let t = r.complexity.map_or(f64::NAN, |c| c.t_linear);
        let _ = writeln!(
            s,
            "{:>10.4e} {:>10.4e} {:>10.4e} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e}",
            r.h, r.l_x, r.l_u, r.report.term_time, r.report.term_quant, r.report.term_pwc, r.report.total, t
        );
    }
    s
}

pub fn cmd_bounds(cfg: &ExperimentConfig) -> Result<(RunManifest, Vec<BoundsRow>), CliError> {
    let model = prepare(cfg)?;
    let mut rec = Recorder::new("bounds", &cfg.out)?;
    let rows = rec.stage("bounds", || bounds_rows(cfg, &model))?;
    rec.write("bounds.csv", |w| {
        writeln!(w, "{BOUNDS_CSV_HEADER}")?;
        for r in &rows {
            let c = r.complexity;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                fmt_float(r.h),
                fmt_float(r.l_x),
                fmt_float(r.l_u),
                fmt_float(r.report.term_time),
                fmt_float(r.report.term_quant),
                fmt_float(r.report.term_pwc),
                fmt_float(r.report.total),
                opt(c.map(|c| c.t_linear)),
                opt(c.map(|c| c.t_simplified)),
                opt(c.map(|c| c.t_polynomial))
            )?;
        }
        Ok(())
    })?;
    Ok((rec.finish(cfg)?, rows))
}

/// Learning and evaluation results for one `h`.
#[derive(Clone, Debug)]
pub struct PipelineRow {
    pub h: f64,
    pub n_states: usize,
    pub n_actions: usize,
    pub l_x: f64,
    pub l_u: f64,
    pub seeds: Seeds,
    pub bound: BoundReport,
    pub v_max: f64,
    pub learned: Option<LearnOutcome<f64>>,
    pub gap: Option<GapReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub h: f64,
    pub eps: f64,
    pub n_states: usize,
    pub n_actions: usize,
    pub l_x: f64,
    pub l_u: f64,
    pub learn_seed: u64,
    pub gap: Option<GapReport>,
    pub bound: Option<BoundReport>,
    pub complexity: Option<ComplexityReport>,
    pub q_min: Option<f64>,
    pub q_max: Option<f64>,
    pub min_visits: Option<u64>,
    pub unvisited: Option<usize>,
    pub error: Option<String>,
}

pub struct SweepData {
    pub rows: Vec<SweepRow>,
    /// One entry per `h`; `Err` holds the message of a failed row.
    pub pipelines: Vec<Result<PipelineRow, String>>,
    pub reference: Option<ReferenceOutcome<f64>>,
}

fn pipeline_row(cfg: &ExperimentConfig, model: &DiffusionModel, row: usize, h: f64, reference: Option<&CostEstimate>) -> Result<PipelineRow, CliError> {
    let seeds = Seeds::new(cfg.seed, row);
    let (states, actions) = cfg.grids(h)?;
    let grids = Grids { states, actions };
    let bound = bound_at(cfg, model, h, &grids)?;
    let v_max = bounds::v_max(h, model.cost_bound_c, model.discount_beta)?;
    let (learned, gap) = match reference {
        Some(reference) => {
            let run = learn_at(cfg, model, h, seeds).map_err(|e| e.in_stage("learn"))?;
            let policy = greedy_policy(&run.outcome.table.to_qmatrix());
            let est = evaluate_policy(cfg, model, h, &run.grids, &policy, seeds.eval).map_err(|e| e.in_stage("evaluate"))?;
            let gap = policy_eval::compute_gap(&est, reference, &bound, echo(cfg, h, &grids, seeds));
            (Some(run.outcome), Some(gap))
        }
        None => (None, None),
    };
    Ok(PipelineRow {
        h,
        n_states: grids.states.len(),
        n_actions: grids.actions.len(),
        l_x: grids.states.l_x(),
        l_u: grids.actions.l_u(),
        seeds,
        bound,
        v_max,
        learned,
        gap,
    })
}

/// Runs every sweep cell. Cell `k` is `(sweep_h[k / n_eps], sweep_eps[k % n_eps])`;
/// learning depends only on `h`, so it runs once per `h`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepData, CliError> {
    let model = prepare(cfg)?;
    let reference = if cfg.sweep_gap { Some(reference_at(cfg, &model, Seeds::new(cfg.seed, 0)).map_err(|e| e.in_stage("reference"))?) } else { None };
    let ref_est = reference.as_ref().map(|r| r.estimate);
    let hs = cfg.h_values();
    let epss = cfg.eps_values();
    let pipelines: Vec<Result<PipelineRow, String>> = hs
        .par_iter()
        .enumerate()
        .map(|(row, &h)| pipeline_row(cfg, &model, row, h, ref_est.as_ref()).map_err(|e| e.to_string()))
        .collect();

    let mut rows = Vec::with_capacity(hs.len() * epss.len());
    for (ih, (&h, p)) in hs.iter().zip(&pipelines).enumerate() {
        for (ie, &eps) in epss.iter().enumerate() {
            let cell = ih * epss.len() + ie;
            let mut row = SweepRow {
                cell,
                h,
                eps,
                n_states: 0,
                n_actions: 0,
                l_x: f64::NAN,
                l_u: f64::NAN,
                learn_seed: Seeds::new(cfg.seed, ih).learn,
                gap: None,
                bound: None,
                complexity: None,
                q_min: None,
                q_max: None,
                min_visits: None,
                unvisited: None,
                error: None,
            };
            match p {
                Ok(p) => {
                    row.n_states = p.n_states;
                    row.n_actions = p.n_actions;
                    row.l_x = p.l_x;
                    row.l_u = p.l_u;
                    row.gap = p.gap;
                    row.bound = Some(p.bound);
                    if let Some(l) = &p.learned {
                        let (lo, hi) = l.table.value_range();
                        row.q_min = Some(lo);
                        row.q_max = Some(hi);
                        row.min_visits = Some(l.table.min_visits());
                        row.unvisited = Some(l.unvisited.len());
                    }
                    let (states, actions) = cfg.grids(h)?;
                    match complexity_at(cfg, &model, h, eps, &Grids { states, actions }) {
                        Ok(c) => row.complexity = Some(c),
                        Err(e) => row.error = Some(format!("complexity: {e}")),
                    }
                }
                Err(e) => row.error = Some(e.clone()),
            }
            rows.push(row);
        }
    }
    Ok(SweepData { rows, pipelines, reference })
}

pub const SWEEP_CSV_HEADER: &str = "cell,h,eps,n_states,n_actions,L_X,L_U,learn_seed,w_learned,se_learned,w_reference,se_reference,gap,gap_se,\
bound_total,violation,term_time,term_quant,term_pwc,asymptotic,T_linear,T_simplified,T_polynomial,v_max,q_min,q_max,min_visits,unvisited,error";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<(), CliError> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        let g = r.gap;
        let b = r.bound;
        let c = r.complexity;
        let fields = [
            r.cell.to_string(),
            fmt_float(r.h),
            fmt_float(r.eps),
            r.n_states.to_string(),
            r.n_actions.to_string(),
            fmt_float(r.l_x),
            fmt_float(r.l_u),
            r.learn_seed.to_string(),
            opt(g.map(|g| g.w_learned)),
            opt(g.map(|g| g.se_learned)),
            opt(g.map(|g| g.w_reference)),
            opt(g.map(|g| g.se_reference)),
            opt(g.map(|g| g.gap)),
            opt(g.map(|g| g.gap_se)),
            opt(b.map(|b| b.total)),
            g.map(|g| g.violation.to_string()).unwrap_or_default(),
            opt(b.map(|b| b.term_time)),
            opt(b.map(|b| b.term_quant)),
            opt(b.map(|b| b.term_pwc)),
            opt(b.map(|b| b.asymptotic_c_form)),
            opt(c.map(|c| c.t_linear)),
            opt(c.map(|c| c.t_simplified)),
            opt(c.map(|c| c.t_polynomial)),
            opt(c.map(|c| c.v_max)),
            opt(r.q_min),
            opt(r.q_max),
            r.min_visits.map(|v| v.to_string()).unwrap_or_default(),
            r.unvisited.map(|v| v.to_string()).unwrap_or_default(),
            r.error.as_deref().map(|e| format!("\"{}\"", e.replace('"', "'"))).unwrap_or_default(),
        ];
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub struct SweepOutcome {
    pub manifest: RunManifest,
    pub rows: Vec<SweepRow>,
    pub failed: usize,
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome, CliError> {
    let mut rec = Recorder::new("sweep", &cfg.out)?;
    let data = rec.stage("sweep", || run_sweep(cfg))?;
    rec.write("sweep.csv", |w| write_sweep_csv(&data.rows, w))?;
    let failed = data.rows.iter().filter(|r| r.error.is_some()).count();
    Ok(SweepOutcome { manifest: rec.finish(cfg)?, rows: data.rows, failed })
}

pub fn cmd_wasserstein(cfg: &ExperimentConfig) -> Result<(RunManifest, Vec<LipschitzRow>), CliError> {
    let model = prepare(cfg)?;
    if cfg.state_pairs.is_empty() && cfg.action_pairs.is_empty() {
        return Err(CliError::Validation("wasserstein-check needs state_pairs or action_pairs".into()));
    }
    let mut rec = Recorder::new("wasserstein-check", &cfg.out)?;
    let scheme = cfg.learn_scheme(cfg.h, rng::derive_seed(cfg.seed, 4))?;
    let sp: Vec<(f64, f64, f64)> = cfg.state_pairs.iter().map(|p| (p[0], p[1], p[2])).collect();
    let ap: Vec<(f64, f64, f64)> = cfg.action_pairs.iter().map(|p| (p[0], p[1], p[2])).collect();
    let rows = rec.stage("lipschitz", || Ok(policy_eval::check_kernel_lipschitz(&model, &scheme, &sp, &ap, cfg.lipschitz_samples)?))?;
    rec.write("lipschitz.csv", |w| Ok(policy_eval::write_lipschitz_csv(&rows, w)?))?;
    rec.write("lipschitz.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &rows)?;
        Ok(writeln!(w)?)
    })?;
    Ok((rec.finish(cfg)?, rows))
}
