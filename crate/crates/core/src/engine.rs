//! The outer optimization loop.
//!
//! Each iteration refreshes a target-only neural-kernel GP (and, with
//! transfer on, the encoder/decoder transfer model), runs the multi-objective
//! acquisition search on each, splits the batch between the two Pareto sets
//! in proportion to the arms' improvement counts, evaluates, and credits each
//! arm with the number of its points that beat the pre-batch incumbent.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{mace_objectives, AcquisitionContext, Constraint, Moments, DEFAULT_BETA};
use crate::benchmarks::{compute_fom, EvalError, FomSpec, ProblemSpec};
use crate::error::{Error, Result};
use crate::gp::{FitConfig, GpModel};
use crate::neuk::NeuralKernel;
use crate::nsga2::{evolve, EvolutionConfig, Objectives};
use crate::transfer::{KatGpModel, KatTrainConfig, SourceCheckpoint};

/// Proposals closer than this (L∞, unit cube) to an evaluated point are
/// replaced by a uniform sample.
pub const DUPLICATE_TOL: f64 = 1e-6;
pub const CHECKPOINT_VERSION: u32 = 1;
const INITIAL_NOISE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Maximize the figure of merit; no constraints.
    Fom,
    /// Optimize the objective metric subject to the problem's constraints.
    Constrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "KAT")]
    Kat,
    #[serde(rename = "NEUK")]
    Neuk,
    #[serde(rename = "INIT")]
    Init,
    #[serde(rename = "RANDOM")]
    Random,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Kat => "KAT",
            Arm::Neuk => "NEUK",
            Arm::Init => "INIT",
            Arm::Random => "RANDOM",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub iterations: usize,
    pub initial_samples: usize,
    pub transfer: bool,
    pub seed: u64,
    pub beta: f64,
    /// Full fit of the target-only GPs at the first iteration.
    pub initial_fit: FitConfig,
    /// Adam steps of the warm-started refit on later iterations.
    pub refresh_steps: usize,
    pub search: EvolutionConfig,
    /// Training of the transfer model at the first iteration.
    pub transfer_initial: KatTrainConfig,
    /// Adam steps of the warm-started transfer refit on later iterations.
    pub transfer_refresh_steps: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Constrained,
            batch_size: 4,
            iterations: 30,
            initial_samples: 10,
            transfer: false,
            seed: 0,
            beta: DEFAULT_BETA,
            initial_fit: FitConfig::default(),
            refresh_steps: 200,
            search: EvolutionConfig::default(),
            transfer_initial: KatTrainConfig::default(),
            transfer_refresh_steps: 200,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.transfer && self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 with transfer on".into()));
        }
        if self.initial_samples == 0 && self.iterations > 0 {
            return Err(Error::Config("initial_samples must be at least 1".into()));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be a nonnegative number, got {}", self.beta)));
        }
        self.search.validate()
    }
}

/// Everything a run needs besides the optional source.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub engine: EngineConfig,
    /// Required in FOM mode.
    pub fom: Option<FomSpec>,
    pub trace_path: Option<PathBuf>,
    /// Written after every iteration; an existing file resumes the run.
    pub checkpoint_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(problem: ProblemSpec, engine: EngineConfig) -> Self {
        Self {
            problem,
            engine,
            fom: None,
            trace_path: None,
            checkpoint_path: None,
        }
    }
}

/// One evaluated point as seen by the weight update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    /// Objective (or FOM) in maximization convention; NaN on failure.
    pub objective: f64,
    pub feasible: bool,
    /// Total constraint violation; infinite on failure.
    pub violation: f64,
}

impl Outcome {
    pub fn failed() -> Self {
        Self {
            objective: f64::NAN,
            feasible: false,
            violation: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub quota_kat: usize,
    pub n_kat: usize,
    pub n_neuk: usize,
    pub n_fill: usize,
    pub improved_kat: usize,
    pub improved_neuk: usize,
    pub w1: f64,
    pub w2: f64,
    pub incumbent: Option<f64>,
}

/// Arm weights, incumbent and per-iteration history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StlState {
    pub w1: f64,
    pub w2: f64,
    /// Best objective (maximization convention) among feasible points.
    pub incumbent: Option<f64>,
    pub incumbent_point: Option<Vec<f64>>,
    /// Smallest total violation seen so far.
    pub min_violation: f64,
    pub iteration: usize,
    pub history: Vec<IterationLog>,
}

impl StlState {
    pub fn new(initial_weight: f64) -> Self {
        Self {
            w1: initial_weight,
            w2: initial_weight,
            incumbent: None,
            incumbent_point: None,
            min_violation: f64::INFINITY,
            iteration: 0,
            history: Vec::new(),
        }
    }

    /// Folds evaluated points into the incumbent and the minimum violation.
    pub fn absorb(&mut self, outcomes: &[(Outcome, Vec<f64>)]) {
        for (o, x) in outcomes {
            if o.violation < self.min_violation {
                self.min_violation = o.violation;
            }
            if o.feasible && o.objective.is_finite() && self.incumbent.is_none_or(|y| o.objective > y) {
                self.incumbent = Some(o.objective);
                self.incumbent_point = Some(x.clone());
            }
        }
    }

    /// Whether `o` beats the state as it stood before the batch.
    pub fn improves(&self, o: &Outcome, mode: Mode) -> bool {
        match (mode, self.incumbent) {
            (_, Some(y)) => o.feasible && o.objective > y,
            (Mode::Fom, None) => o.objective.is_finite(),
            (Mode::Constrained, None) => o.violation < self.min_violation,
        }
    }
}

/// Adds each arm's improvement count to its weight, then updates the
/// incumbent from both batches. Counts use the pre-batch state.
pub fn update_weights(
    state: &StlState,
    batch_1: &[(Outcome, Vec<f64>)],
    batch_2: &[(Outcome, Vec<f64>)],
    mode: Mode,
) -> (StlState, usize, usize) {
    let c1 = batch_1.iter().filter(|(o, _)| state.improves(o, mode)).count();
    let c2 = batch_2.iter().filter(|(o, _)| state.improves(o, mode)).count();
    let mut next = state.clone();
    next.w1 += c1 as f64;
    next.w2 += c2 as f64;
    next.absorb(batch_1);
    next.absorb(batch_2);
    (next, c1, c2)
}

/// Number of batch slots for the transfer arm.
pub fn transfer_quota(w1: f64, w2: f64, batch_size: usize) -> usize {
    if w1 + w2 <= 0.0 {
        return batch_size / 2;
    }
    ((w1 / (w1 + w2)) * batch_size as f64).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    EvalError,
}

impl fmt::Display for EvalStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalStatus::Ok => "ok",
            EvalStatus::EvalError => "eval_error",
        })
    }
}

/// One row of the evaluation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub arm: Arm,
    /// Physical coordinates.
    pub x: Vec<f64>,
    /// Raw metrics; NaN when the evaluation failed.
    pub metrics: Vec<f64>,
    pub feasible: bool,
    pub status: EvalStatus,
    pub objective: f64,
    pub incumbent: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub rows: Vec<TraceRow>,
    pub state: StlState,
    /// Physical coordinates of the incumbent.
    pub best_point: Option<Vec<f64>>,
    pub best_metrics: Option<Vec<f64>>,
}

impl RunResult {
    /// Running incumbent after each evaluation (NaN before feasibility).
    pub fn incumbent_trace(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.incumbent.unwrap_or(f64::NAN)).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    problem: String,
    seed: u64,
    state: StlState,
    /// Unit-cube coordinates of every evaluated point.
    points: Vec<Vec<f64>>,
    rows: Vec<TraceRow>,
    neuk: Vec<GpModel<NeuralKernel>>,
    kat: Option<KatGpModel>,
}

/// Seed for the stream used at `iteration`, independent of earlier draws.
fn iteration_seed(seed: u64, iteration: usize, salt: u64) -> u64 {
    let mut z = seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Problem<'a> {
    spec: &'a ProblemSpec,
    mode: Mode,
    fom: Option<&'a FomSpec>,
    constraints: Vec<(usize, Constraint)>,
}

impl Problem<'_> {
    /// Metrics the surrogates model, in order.
    fn modeled(&self, metrics: &[f64]) -> Vec<f64> {
        match self.mode {
            Mode::Fom => vec![compute_fom(metrics, self.fom.expect("validated"))],
            Mode::Constrained => metrics.to_vec(),
        }
    }

    fn n_modeled(&self) -> usize {
        match self.mode {
            Mode::Fom => 1,
            Mode::Constrained => self.spec.metrics.len(),
        }
    }

    fn outcome(&self, metrics: &[f64]) -> Outcome {
        match self.mode {
            Mode::Fom => Outcome {
                objective: compute_fom(metrics, self.fom.expect("validated")),
                feasible: true,
                violation: 0.0,
            },
            Mode::Constrained => Outcome {
                objective: self.spec.signed_objective(metrics),
                feasible: self.spec.is_feasible(metrics),
                violation: self.spec.total_violation(metrics),
            },
        }
    }

    /// `(index in the modeled vector, sign)` of the objective.
    fn objective_slot(&self) -> (usize, f64) {
        match self.mode {
            Mode::Fom => (0, 1.0),
            Mode::Constrained => {
                let s = if self.spec.metric_is_maximized(self.spec.objective_index()) { 1.0 } else { -1.0 };
                (self.spec.objective_index(), s)
            }
        }
    }

    fn model_constraints(&self) -> Vec<(usize, Constraint)> {
        match self.mode {
            Mode::Fom => Vec::new(),
            Mode::Constrained => self.constraints.clone(),
        }
    }
}

/// Gaussian beliefs per modeled metric at a set of unit-cube points.
type Beliefs = Vec<(DVector<f64>, DVector<f64>)>;

fn neuk_beliefs(models: &[GpModel<NeuralKernel>], x: &DMatrix<f64>) -> Result<Beliefs> {
    models
        .iter()
        .map(|m| m.posterior(x).map(|p| (p.mean, p.variance)))
        .collect()
}

fn kat_beliefs(model: &KatGpModel, x: &DMatrix<f64>) -> Result<Beliefs> {
    Ok(model.predict(x)?.into_iter().map(|p| (p.mean, p.variance)).collect())
}

/// Acquisition triple at each point. The objective is moved to
/// maximization convention, shifted by the worst observed value and scaled
/// by the observed spread so that the UCB term is comparable across models.
struct Scorer {
    slot: usize,
    sign: f64,
    offset: f64,
    scale: f64,
    incumbent: Option<f64>,
    constraints: Vec<(usize, Constraint)>,
    beta: f64,
}

impl Scorer {
    fn new(problem: &Problem, observed: &[f64], incumbent: Option<f64>, beta: f64) -> Self {
        let (slot, sign) = problem.objective_slot();
        let finite: Vec<f64> = observed.iter().copied().filter(|v| v.is_finite()).collect();
        let offset = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let offset = if offset.is_finite() { offset } else { 0.0 };
        let n = finite.len().max(1) as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self {
            slot,
            sign,
            offset,
            scale,
            incumbent: incumbent.map(|y| (y - offset) / scale),
            constraints: problem.model_constraints(),
            beta,
        }
    }

    fn score(&self, beliefs: &Beliefs, n: usize) -> Vec<Objectives> {
        (0..n)
            .map(|i| {
                let (m, v) = (&beliefs[self.slot].0, &beliefs[self.slot].1);
                let ctx = AcquisitionContext {
                    objective: Moments {
                        mean: (self.sign * m[i] - self.offset) / self.scale,
                        var: v[i] / (self.scale * self.scale),
                    },
                    constraints: self
                        .constraints
                        .iter()
                        .map(|(k, c)| {
                            (
                                Moments {
                                    mean: beliefs[*k].0[i],
                                    var: beliefs[*k].1[i],
                                },
                                *c,
                            )
                        })
                        .collect(),
                    incumbent: self.incumbent,
                    beta: self.beta,
                };
                mace_objectives(&ctx)
            })
            .collect()
    }
}

fn propose<F>(predict: F, scorer: &Scorer, dim: usize, cfg: &EvolutionConfig) -> Vec<Vec<f64>>
where
    F: Fn(&DMatrix<f64>) -> Result<Beliefs>,
{
    let objective = |pop: &[Vec<f64>]| -> Vec<Objectives> {
        let x = DMatrix::from_fn(pop.len(), dim, |i, j| pop[i][j]);
        match predict(&x) {
            Ok(b) => scorer.score(&b, pop.len()),
            Err(_) => vec![[f64::NAN; 3]; pop.len()],
        }
    };
    match evolve(objective, dim, cfg) {
        Ok(a) => a.points(),
        Err(_) => Vec::new(),
    }
}

fn is_duplicate(x: &[f64], seen: &[Vec<f64>]) -> bool {
    seen.iter()
        .any(|p| p.iter().zip(x).all(|(a, b)| (a - b).abs() <= DUPLICATE_TOL))
}

fn uniform_point<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.random::<f64>()).collect()
}

/// Picks `k` members uniformly without replacement.
fn pick<R: Rng>(pool: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let k = k.min(pool.len());
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i].clone()).collect()
}

fn fit_neuk(
    previous: Option<&[GpModel<NeuralKernel>]>,
    x: &DMatrix<f64>,
    ys: &[DVector<f64>],
    cfg: &EngineConfig,
    iteration: usize,
) -> Option<Vec<GpModel<NeuralKernel>>> {
    let d = x.ncols();
    ys.iter()
        .enumerate()
        .map(|(m, y)| {
            let seed = iteration_seed(cfg.seed, iteration, 100 + m as u64);
            let warm = previous.and_then(|p| p.get(m));
            let (model, fit) = match warm {
                Some(prev) => (
                    prev.with_data(x.clone(), y.clone()).ok()?,
                    FitConfig {
                        steps: cfg.refresh_steps,
                        restarts: 0,
                        learning_rate: cfg.initial_fit.learning_rate,
                        seed,
                    },
                ),
                None => (
                    GpModel::new(x.clone(), y.clone(), NeuralKernel::initialize(d, d, seed), INITIAL_NOISE).ok()?,
                    FitConfig { seed, ..cfg.initial_fit },
                ),
            };
            Some(model.fit(&fit))
        })
        .collect()
}

fn write_trace(path: &Path, problem: &ProblemSpec, rows: &[TraceRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(trace_header(problem)).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.iteration.to_string(), r.arm.to_string()];
        rec.extend(r.x.iter().map(|v| v.to_string()));
        rec.extend(r.metrics.iter().map(|v| v.to_string()));
        rec.push(r.feasible.to_string());
        rec.push(r.status.to_string());
        rec.push(r.objective.to_string());
        rec.push(r.incumbent.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Column names of the CSV trace.
pub fn trace_header(problem: &ProblemSpec) -> Vec<String> {
    let mut h = vec!["iteration".to_string(), "arm".to_string()];
    h.extend((0..problem.dim()).map(|i| format!("x{i}")));
    h.extend(problem.metric_names());
    h.extend(["feasible", "status", "objective", "incumbent"].map(String::from));
    h
}

/// Runs the loop. `source` must be given exactly when transfer is on.
pub fn run_kato(cfg: &RunConfig, source: Option<&SourceCheckpoint>) -> Result<RunResult> {
    let ec = &cfg.engine;
    ec.validate()?;
    cfg.problem.validate()?;
    match (ec.transfer, source) {
        (true, None) => return Err(Error::Config("transfer is on but no source was given".into())),
        (false, Some(_)) => return Err(Error::Config("a source was given but transfer is off".into())),
        _ => {}
    }
    if ec.mode == Mode::Fom {
        let fom = cfg
            .fom
            .as_ref()
            .ok_or_else(|| Error::Config("FOM mode needs a FOM spec".into()))?;
        fom.validate()?;
        if fom.terms.len() != cfg.problem.metrics.len() {
            return Err(Error::Config("FOM spec and problem disagree on the metric count".into()));
        }
    }
    let problem = Problem {
        spec: &cfg.problem,
        mode: ec.mode,
        fom: cfg.fom.as_ref(),
        constraints: cfg.problem.constraints(),
    };
    let dim = cfg.problem.dim();

    let resumed = match &cfg.checkpoint_path {
        Some(p) if p.exists() => {
            let c: Checkpoint = crate::transfer::load_json(p)?;
            if c.version != CHECKPOINT_VERSION || c.problem != cfg.problem.name || c.seed != ec.seed {
                return Err(Error::Config(format!("checkpoint {} does not match this run", p.display())));
            }
            Some(c)
        }
        _ => None,
    };

    let (mut state, mut points, mut rows, mut neuk, mut kat) = match resumed {
        Some(c) => (c.state, c.points, c.rows, Some(c.neuk), c.kat),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(ec.seed, 0, 1));
            let init: Vec<Vec<f64>> = (0..ec.initial_samples).map(|_| uniform_point(dim, &mut rng)).collect();
            let mut state = StlState::new(ec.initial_samples as f64);
            let mut rows = Vec::new();
            let evaluated = evaluate_batch(&cfg.problem, &init)?;
            for (z, res) in init.iter().zip(evaluated) {
                let (row, outcome) = make_row(&problem, 0, Arm::Init, z, res);
                state.absorb(&[(outcome, z.clone())]);
                rows.push(TraceRow {
                    incumbent: state.incumbent,
                    ..row
                });
            }
            (state, init, rows, None, None)
        }
    };
    if let Some(p) = &cfg.trace_path {
        write_trace(p, &cfg.problem, &rows)?;
    }

    while state.iteration < ec.iterations {
        let it = state.iteration + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(ec.seed, it, 2));

        // Training data: successful evaluations only.
        let ok: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].status == EvalStatus::Ok).collect();
        let (p1, p2) = if ok.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let x = DMatrix::from_fn(ok.len(), dim, |i, j| points[ok[i]][j]);
            let modeled: Vec<Vec<f64>> = ok.iter().map(|&i| problem.modeled(&rows[i].metrics)).collect();
            let ys: Vec<DVector<f64>> = (0..problem.n_modeled())
                .map(|m| DVector::from_fn(ok.len(), |i, _| modeled[i][m]))
                .collect();
            let observed: Vec<f64> = ok.iter().map(|&i| rows[i].objective).collect();
            let scorer = Scorer::new(&problem, &observed, state.incumbent, ec.beta);

            neuk = fit_neuk(neuk.as_deref(), &x, &ys, ec, it).or(neuk);
            let mut search = ec.search.clone();
            search.seed = iteration_seed(ec.seed, it, 3);
            let p2 = match &neuk {
                Some(models) if models.iter().all(|m| m.n() == ok.len()) => {
                    propose(|q| neuk_beliefs(models, q), &scorer, dim, &search)
                }
                _ => Vec::new(),
            };

            let p1 = if let Some(src) = source {
                let y_mat = DMatrix::from_fn(ok.len(), problem.n_modeled(), |i, m| modeled[i][m]);
                let trained = match kat.take() {
                    Some(prev) => prev.train(
                        &x,
                        &y_mat,
                        &KatTrainConfig {
                            steps: ec.transfer_refresh_steps,
                            ..ec.transfer_initial
                        },
                    ),
                    None => KatGpModel::new(
                        src.sources.clone(),
                        dim,
                        problem.n_modeled(),
                        iteration_seed(ec.seed, it, 4),
                    )
                    .and_then(|m| if ok.len() >= 2 { m.train(&x, &y_mat, &ec.transfer_initial) } else { Ok(m) }),
                };
                kat = trained.ok();
                let mut search = ec.search.clone();
                search.seed = iteration_seed(ec.seed, it, 5);
                match &kat {
                    Some(m) => propose(|q| kat_beliefs(m, q), &scorer, dim, &search),
                    None => Vec::new(),
                }
            } else {
                Vec::new()
            };
            (p1, p2)
        };

        // Batch split.
        let nb = ec.batch_size;
        let quota = if ec.transfer { transfer_quota(state.w1, state.w2, nb) } else { 0 };
        let mut take1 = quota.min(p1.len());
        let take2 = (nb - take1).min(p2.len());
        if take1 + take2 < nb {
            take1 = (nb - take2).min(p1.len());
        }
        let mut proposals: Vec<(Arm, Vec<f64>)> = Vec::with_capacity(nb);
        proposals.extend(pick(&p1, take1, &mut rng).into_iter().map(|x| (Arm::Kat, x)));
        proposals.extend(pick(&p2, take2, &mut rng).into_iter().map(|x| (Arm::Neuk, x)));
        let n_fill = nb - proposals.len();
        for _ in 0..n_fill {
            proposals.push((Arm::Random, uniform_point(dim, &mut rng)));
        }

        // Duplicate suppression; replacements keep their arm's credit.
        let mut seen = points.clone();
        let mut batch: Vec<(Arm, Arm, Vec<f64>)> = Vec::with_capacity(nb);
        for (arm, mut z) in proposals {
            let mut logged = arm;
            while is_duplicate(&z, &seen) {
                z = uniform_point(dim, &mut rng);
                logged = Arm::Random;
            }
            seen.push(z.clone());
            batch.push((arm, logged, z));
        }

        let zs: Vec<Vec<f64>> = batch.iter().map(|(_, _, z)| z.clone()).collect();
        let results = evaluate_batch(&cfg.problem, &zs)?;
        let mut a1 = Vec::new();
        let mut a2 = Vec::new();
        let mut new_rows = Vec::with_capacity(nb);
        for ((credit, logged, z), res) in batch.into_iter().zip(results) {
            let (row, outcome) = make_row(&problem, it, logged, &z, res);
            match credit {
                Arm::Kat => a1.push((outcome, z.clone())),
                Arm::Neuk => a2.push((outcome, z.clone())),
                _ => {}
            }
            new_rows.push((row, outcome, z));
        }
        let (mut next, c1, c2) = update_weights(&state, &a1, &a2, ec.mode);
        // Per-row running incumbent, in evaluation order.
        let mut running = state.clone();
        for (row, outcome, z) in new_rows {
            running.absorb(&[(outcome, z.clone())]);
            points.push(z);
            rows.push(TraceRow {
                incumbent: running.incumbent,
                ..row
            });
        }
        next.incumbent = running.incumbent;
        next.incumbent_point = running.incumbent_point;
        next.min_violation = running.min_violation;
        next.iteration = it;
        next.history.push(IterationLog {
            iteration: it,
            quota_kat: quota,
            n_kat: a1.len(),
            n_neuk: a2.len(),
            n_fill,
            improved_kat: c1,
            improved_neuk: c2,
            w1: next.w1,
            w2: next.w2,
            incumbent: next.incumbent,
        });
        state = next;

        if let Some(p) = &cfg.trace_path {
            write_trace(p, &cfg.problem, &rows)?;
        }
        if let Some(p) = &cfg.checkpoint_path {
            let c = Checkpoint {
                version: CHECKPOINT_VERSION,
                problem: cfg.problem.name.clone(),
                seed: ec.seed,
                state: state.clone(),
                points: points.clone(),
                rows: rows.clone(),
                neuk: neuk.clone().unwrap_or_default(),
                kat: kat.clone(),
            };
            crate::transfer::save_json(&c, p)?;
        }
    }

    let best = state
        .incumbent_point
        .as_ref()
        .and_then(|z| points.iter().position(|p| p == z))
        .map(|i| (rows[i].x.clone(), rows[i].metrics.clone()));
    Ok(RunResult {
        rows,
        best_point: best.as_ref().map(|b| b.0.clone()),
        best_metrics: best.map(|b| b.1),
        state,
    })
}

/// Evaluates `n` uniform points of `problem` and fits one neural-kernel GP
/// per metric, for reuse as a transfer source.
pub fn build_source(problem: &ProblemSpec, n: usize, seed: u64, fit: &FitConfig) -> Result<SourceCheckpoint> {
    if n < 2 {
        return Err(Error::Config("a source needs at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(seed, 0, 7));
    let dim = problem.dim();
    let mut zs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let z = uniform_point(dim, &mut rng);
        let y = problem.evaluate(&problem.to_physical(&z))?;
        zs.push(z);
        ys.push(y);
    }
    let x = DMatrix::from_fn(n, dim, |i, j| zs[i][j]);
    let y = DMatrix::from_fn(n, problem.metrics.len(), |i, k| ys[i][k]);
    let sources = crate::transfer::fit_source_gps(&x, &y, &FitConfig { seed, ..*fit })?;
    Ok(SourceCheckpoint::new(problem.name.clone(), problem.metric_names(), sources))
}

fn make_row(
    problem: &Problem,
    iteration: usize,
    arm: Arm,
    z: &[f64],
    res: std::result::Result<Vec<f64>, EvalError>,
) -> (TraceRow, Outcome) {
    let x = problem.spec.to_physical(z);
    match res {
        Ok(metrics) => {
            let o = problem.outcome(&metrics);
            (
                TraceRow {
                    iteration,
                    arm,
                    x,
                    feasible: o.feasible,
                    status: EvalStatus::Ok,
                    objective: o.objective,
                    incumbent: None,
                    metrics,
                },
                o,
            )
        }
        Err(_) => (
            TraceRow {
                iteration,
                arm,
                x,
                metrics: vec![f64::NAN; problem.spec.metrics.len()],
                feasible: false,
                status: EvalStatus::EvalError,
                objective: f64::NAN,
                incumbent: None,
            },
            Outcome::failed(),
        ),
    }
}

/// Evaluates unit-cube points. Analytic problems run inline; external
/// evaluators run one child per point concurrently. Results keep input order.
fn evaluate_batch(
    problem: &ProblemSpec,
    zs: &[Vec<f64>],
) -> Result<Vec<std::result::Result<Vec<f64>, EvalError>>> {
    let xs: Vec<Vec<f64>> = zs.iter().map(|z| clamp_to_box(problem, problem.to_physical(z))).collect();
    for x in &xs {
        assert!(problem.in_box(x), "proposed point left the design box");
    }
    Ok(match &problem.evaluator {
        crate::benchmarks::EvaluatorSpec::Analytic(_) => xs.iter().map(|x| problem.evaluate(x)).collect(),
        crate::benchmarks::EvaluatorSpec::Subprocess(_) => std::thread::scope(|s| {
            let handles: Vec<_> = xs.iter().map(|x| s.spawn(move || problem.evaluate(x))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(EvalError::Io("evaluator thread panicked".into()))))
                .collect()
        }),
    })
}

/// Guards against rounding in the unit-to-physical map.
fn clamp_to_box(problem: &ProblemSpec, mut x: Vec<f64>) -> Vec<f64> {
    for (i, v) in x.iter_mut().enumerate() {
        *v = v.clamp(problem.lower[i], problem.upper[i]);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(objective: f64) -> (Outcome, Vec<f64>) {
        (
            Outcome {
                objective,
                feasible: true,
                violation: 0.0,
            },
            vec![objective],
        )
    }

    #[test]
    fn weights_count_improvements() {
        let mut s = StlState::new(10.0);
        s.incumbent = Some(1.0);
        let a1 = vec![ok(2.0), ok(3.0), ok(0.5), ok(1.5), ok(1.0)];
        let a2 = vec![ok(0.1), ok(0.2)];
        let (n, c1, c2) = update_weights(&s, &a1, &a2, Mode::Constrained);
        assert_eq!((c1, c2), (3, 0));
        assert_eq!((n.w1, n.w2), (13.0, 10.0));
        assert_eq!(n.incumbent, Some(3.0));
    }

    #[test]
    fn no_improvement_is_null_update() {
        let mut s = StlState::new(4.0);
        s.incumbent = Some(5.0);
        s.min_violation = 0.0;
        let (n, _, _) = update_weights(&s, &[ok(1.0)], &[ok(4.9)], Mode::Constrained);
        assert_eq!(n.w1, 4.0);
        assert_eq!(n.w2, 4.0);
        assert_eq!(n.incumbent, Some(5.0));
    }

    #[test]
    fn infeasible_points_do_not_improve() {
        let mut s = StlState::new(1.0);
        s.incumbent = Some(0.0);
        let bad = (
            Outcome {
                objective: 9.0,
                feasible: false,
                violation: 1.0,
            },
            vec![0.0],
        );
        let (n, c1, _) = update_weights(&s, &[bad], &[], Mode::Constrained);
        assert_eq!(c1, 0);
        assert_eq!(n.incumbent, Some(0.0));
    }

    #[test]
    fn violation_counts_before_feasibility() {
        let mut s = StlState::new(1.0);
        s.min_violation = 2.0;
        let closer = (
            Outcome {
                objective: -1.0,
                feasible: false,
                violation: 1.0,
            },
            vec![0.0],
        );
        let farther = (
            Outcome {
                objective: -1.0,
                feasible: false,
                violation: 3.0,
            },
            vec![0.0],
        );
        let (n, c1, c2) = update_weights(&s, &[closer], &[farther], Mode::Constrained);
        assert_eq!((c1, c2), (1, 0));
        assert_eq!(n.min_violation, 1.0);
        assert_eq!(n.incumbent, None);
    }

    #[test]
    fn quota_is_floored() {
        assert_eq!(transfer_quota(10.0, 10.0, 5), 2);
        assert_eq!(transfer_quota(1.0, 3.0, 4), 1);
        assert_eq!(transfer_quota(0.0, 3.0, 4), 0);
    }

    #[test]
    fn iteration_seeds_differ() {
        assert_ne!(iteration_seed(1, 1, 2), iteration_seed(1, 2, 2));
        assert_ne!(iteration_seed(1, 1, 2), iteration_seed(2, 1, 2));
        assert_eq!(iteration_seed(7, 3, 4), iteration_seed(7, 3, 4));
    }
}
