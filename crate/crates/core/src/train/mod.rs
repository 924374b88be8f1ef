//! Desk-scale training of a single block on the synthetic tasks with a
//! prescribed attention pattern, and the cost-versus-size sweeps built on it.

mod grad;

pub use grad::{block_gradients, regularizer, Example, GradMode, Gradient, LossParts, Objective};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::BlockWeights;
use crate::constructions::{
    backcopy_sink_weights, block_cost, generic_diag_weights, generic_sink_weights, CostReport,
};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::tasks::{
    gen_backcopy, gen_generic, task_geometry, BackcopySpec, GenericGeometry, GenericSpec,
    LabeledSequence, Token,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetPattern {
    Sink,
    Diagonal,
}

impl TargetPattern {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetPattern::Sink => "sink",
            TargetPattern::Diagonal => "diagonal",
        }
    }
}

impl std::str::FromStr for TargetPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sink" => Ok(TargetPattern::Sink),
            "diag" | "diagonal" => Ok(TargetPattern::Diagonal),
            _ => Err(invalid(format!(
                "unknown pattern '{s}' (expected sink or diagonal)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskConfig {
    Backcopy(BackcopySpec),
    Generic(GenericSpec),
}

impl TaskConfig {
    pub fn dim(&self) -> usize {
        match self {
            TaskConfig::Backcopy(s) => s.d,
            TaskConfig::Generic(s) => s.d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Plain gradient descent.
    Gd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Entries uniform in ±scale/√d, biases zero.
    Random { scale: f64 },
    /// The explicit construction for the task and pattern, plus uniform noise.
    Construction { noise: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskConfig,
    pub n_seqs: usize,
    pub data_seed: u64,
    pub pattern: TargetPattern,
    pub mode: GradMode,
    pub reg_weight: f64,
    /// Weight of the query/key factors in the regularizer; `None` uses √d.
    pub qk_scale: Option<f64>,
    pub pattern_penalty: f64,
    pub margin_penalty: f64,
    /// Hinge target is κ·(1 + margin_slack).
    pub margin_slack: f64,
    pub kappa: f64,
    pub optimizer: Optimizer,
    /// Peak learning rate, cosine-decayed to zero.
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub init: Init,
    /// Relative task-loss threshold for convergence.
    pub tol: f64,
    /// Draw a fresh batch every step; the `data_seed` batch is then held out
    /// for evaluation only.
    pub resample: bool,
}

impl TrainConfig {
    /// Forced-pattern defaults used by the sweeps.
    pub fn new(task: TaskConfig, pattern: TargetPattern) -> Self {
        let kappa = match &task {
            TaskConfig::Backcopy(s) => s.kappa,
            TaskConfig::Generic(s) => s.kappa,
        };
        Self {
            task,
            n_seqs: 32,
            data_seed: 0,
            pattern,
            mode: GradMode::Forced,
            reg_weight: 1e-2,
            qk_scale: None,
            pattern_penalty: 0.0,
            margin_penalty: 100.0,
            margin_slack: 0.05,
            kappa,
            optimizer: Optimizer::Adam,
            lr: 0.02,
            steps: 6000,
            seed: 0,
            init: Init::Random { scale: 0.1 },
            tol: 1e-3,
            resample: true,
        }
    }

    pub fn qk_scale(&self) -> f64 {
        self.qk_scale
            .unwrap_or_else(|| (self.task.dim() as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        match &self.task {
            TaskConfig::Backcopy(s) => s.validate()?,
            TaskConfig::Generic(s) => s.validate()?,
        }
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !pos(self.lr) || self.steps == 0 || self.n_seqs == 0 {
            return Err(invalid("lr, steps and n_seqs must be positive"));
        }
        if !nonneg(self.reg_weight) || !nonneg(self.pattern_penalty) || !nonneg(self.margin_penalty)
        {
            return Err(invalid("penalty weights must be nonnegative"));
        }
        if !nonneg(self.margin_slack)
            || !nonneg(self.kappa)
            || !pos(self.tol)
            || !pos(self.qk_scale())
        {
            return Err(invalid(
                "margin slack, kappa, tol and qk_scale out of range",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task_loss: f64,
    /// Regularizer value with the configured query/key weight.
    pub reg_cost: f64,
    pub compliance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub weights: BlockWeights,
    pub cost: CostReport,
    /// 2·s·‖W_QK‖_* + 2‖W_VO‖_* + MLP with s the query/key weight.
    pub scaled_cost: f64,
    /// Smallest target margin on the evaluation batch.
    pub min_margin: f64,
    /// Losses of the final weights on the evaluation batch.
    pub final_eval: StepRecord,
    /// Mean squared norm of the target anchors; convergence compares the task
    /// loss against tol times this.
    pub target_energy: f64,
    pub converged: bool,
}

/// Keys each position should attend to under the pattern.
///
/// Backcopy copy-paste tokens read the preceding token. Grouped-task
/// copy-paste tokens read every earlier same-group dormant token, or fall back
/// to the pattern's default when there is none. Identical tokens tie.
pub fn target_sets(task: &TaskConfig, tokens: &[Token], pattern: TargetPattern) -> Vec<Vec<usize>> {
    let same = |t: usize| {
        (0..=t)
            .filter(|&s| tokens[s] == tokens[t])
            .collect::<Vec<_>>()
    };
    let fallback = |t: usize| match pattern {
        TargetPattern::Sink => vec![0],
        TargetPattern::Diagonal => match task {
            TaskConfig::Backcopy(_) => vec![t],
            TaskConfig::Generic(_) => same(t),
        },
    };
    (0..tokens.len())
        .map(|t| match tokens[t] {
            Token::Bos => vec![0],
            Token::Dormant { .. } => fallback(t),
            Token::CopyPaste { group } => match task {
                TaskConfig::Backcopy(_) => vec![t - 1],
                TaskConfig::Generic(_) => {
                    let prev: Vec<usize> = (1..t)
                        .filter(|&s| matches!(tokens[s], Token::Dormant { group: g, .. } if g == group))
                        .collect();
                    if prev.is_empty() {
                        fallback(t)
                    } else {
                        prev
                    }
                }
            },
        })
        .collect()
}

pub fn task_data(
    task: &TaskConfig,
    n_seqs: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<LabeledSequence>> {
    DataSource::new(task)?.batch(n_seqs, seed, exec)
}

pub fn examples(
    task: &TaskConfig,
    data: &[LabeledSequence],
    pattern: TargetPattern,
) -> Result<Vec<Example>> {
    data.iter()
        .map(|s| {
            Example::new(
                s.inputs.clone(),
                s.relaxed.clone(),
                target_sets(task, &s.tokens, pattern),
            )
        })
        .collect()
}

/// The explicit weights for (task, pattern), where one exists.
pub fn construction(
    task: &TaskConfig,
    pattern: TargetPattern,
    data: &[LabeledSequence],
) -> Result<BlockWeights> {
    match (task, pattern) {
        (TaskConfig::Backcopy(s), TargetPattern::Sink) => backcopy_sink_weights(s),
        (TaskConfig::Backcopy(_), TargetPattern::Diagonal) => {
            Err(invalid("no explicit diagonal construction for backcopy"))
        }
        (TaskConfig::Generic(s), TargetPattern::Sink) => {
            generic_sink_weights(&GenericGeometry::build(s)?)
        }
        (TaskConfig::Generic(s), TargetPattern::Diagonal) => {
            let g = GenericGeometry::build(s)?;
            let geo = task_geometry(&g, data)?;
            generic_diag_weights(&g, geo.delta_diag)
        }
    }
}

fn init_weights(cfg: &TrainConfig, data: &[LabeledSequence]) -> Result<BlockWeights> {
    let d = cfg.task.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = match cfg.init {
        Init::Random { .. } => BlockWeights::zeros(d, d),
        Init::Construction { .. } => construction(&cfg.task, cfg.pattern, data)?,
    };
    let amp = match cfg.init {
        Init::Random { scale } => scale / (d as f64).sqrt(),
        Init::Construction { noise } => noise,
    };
    if amp > 0.0 {
        for (f, slice) in grad::fields_mut(&mut w).into_iter().enumerate() {
            if matches!(cfg.init, Init::Random { .. }) && (f == 5 || f == 7) {
                continue;
            }
            for x in slice {
                *x += rng.random_range(-amp..=amp);
            }
        }
    }
    Ok(w)
}

struct Adam {
    m: BlockWeights,
    v: BlockWeights,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-12;

    fn new(w: &BlockWeights) -> Self {
        Self {
            m: grad::zeros_like(w),
            v: grad::zeros_like(w),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut BlockWeights, g: &BlockWeights, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let params = grad::fields_mut(w);
        let ms = grad::fields_mut(&mut self.m);
        let vs = grad::fields_mut(&mut self.v);
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grad::fields(g)) {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

pub fn scaled_cost(w: &BlockWeights, qk_scale: f64) -> Result<f64> {
    let c = block_cost(w)?;
    Ok(2.0 * qk_scale * c.qk_nuclear + 2.0 * c.vo_nuclear + c.mlp_frobsq)
}

/// Minimizes task loss + reg_weight·regularizer + pattern and margin
/// penalties by full-batch descent. The cross-entropy pattern penalty is
/// switched off once the run is compliant; the margin penalty stays, since in
/// forced mode it is the only thing holding the pattern.
pub fn train_block(cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let source = DataSource::new(&cfg.task)?;
    let eval_data = source.batch(cfg.n_seqs, cfg.data_seed, Exec::Sequential)?;
    let eval = examples(&cfg.task, &eval_data, cfg.pattern)?;
    let energy = eval_data
        .iter()
        .flat_map(|s| s.relaxed.iter().map(|r| r.anchor.norm_squared()))
        .sum::<f64>()
        / eval_data.iter().map(|s| s.len()).sum::<usize>() as f64;
    let mut w = init_weights(cfg, &eval_data)?;
    let qk_scale = cfg.qk_scale();
    let mut obj = Objective {
        mode: cfg.mode,
        reg_weight: cfg.reg_weight,
        qk_scale,
        pattern_penalty: cfg.pattern_penalty,
        margin_penalty: cfg.margin_penalty,
        margin_target: cfg.kappa * (1.0 + cfg.margin_slack),
        kappa: cfg.kappa,
    };
    let diverged = |step: usize| {
        move |e: Error| match e {
            Error::NonFinite(what) => Error::Divergence {
                step,
                what: what.to_string(),
            },
            e => e,
        }
    };
    let mut adam = Adam::new(&w);
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let fresh;
        let batch = if cfg.resample {
            let seed = cfg
                .data_seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(step as u64 + 1);
            fresh = examples(
                &cfg.task,
                &source.batch(cfg.n_seqs, seed, Exec::Sequential)?,
                cfg.pattern,
            )?;
            &fresh
        } else {
            &eval
        };
        let g = block_gradients(&w, batch, &obj, Exec::Sequential).map_err(diverged(step))?;
        steps.push(StepRecord {
            task_loss: g.loss.task,
            reg_cost: g.loss.reg,
            compliance: g.loss.compliance,
        });
        if obj.pattern_penalty > 0.0 && g.loss.compliance >= 0.99 && g.loss.task < cfg.tol * energy
        {
            obj.pattern_penalty = 0.0;
        }
        let lr =
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        match cfg.optimizer {
            Optimizer::Adam => adam.step(&mut w, &g.grad, lr),
            Optimizer::Gd => {
                for (p, g) in grad::fields_mut(&mut w)
                    .into_iter()
                    .zip(grad::fields(&g.grad))
                {
                    for (x, y) in p.iter_mut().zip(g) {
                        *x -= lr * y;
                    }
                }
            }
        }
    }
    let fin = block_gradients(&w, &eval, &obj, Exec::Sequential)
        .map_err(diverged(cfg.steps))?
        .loss;
    let final_eval = StepRecord {
        task_loss: fin.task,
        reg_cost: fin.reg,
        compliance: fin.compliance,
    };
    Ok(TrainTrace {
        cost: block_cost(&w)?,
        scaled_cost: scaled_cost(&w, qk_scale)?,
        converged: fin.task < cfg.tol * energy && fin.compliance >= 0.99,
        min_margin: min_target_margin(&w, &eval),
        final_eval,
        target_energy: energy,
        steps,
        weights: w,
    })
}

/// Draws task sequences; the grouped-task geometry is built once.
pub struct DataSource {
    task: TaskConfig,
    geometry: Option<GenericGeometry>,
}

impl DataSource {
    pub fn new(task: &TaskConfig) -> Result<Self> {
        let geometry = match task {
            TaskConfig::Backcopy(s) => {
                s.validate()?;
                None
            }
            TaskConfig::Generic(s) => Some(GenericGeometry::build(s)?),
        };
        Ok(Self {
            task: task.clone(),
            geometry,
        })
    }

    pub fn geometry(&self) -> Option<&GenericGeometry> {
        self.geometry.as_ref()
    }

    pub fn batch(&self, n_seqs: usize, seed: u64, exec: Exec) -> Result<Vec<LabeledSequence>> {
        match (&self.task, &self.geometry) {
            (TaskConfig::Backcopy(s), _) => gen_backcopy(s, n_seqs, seed, exec),
            (TaskConfig::Generic(_), Some(g)) => gen_generic(g, n_seqs, seed, exec),
            (TaskConfig::Generic(_), None) => unreachable!("geometry is built for grouped tasks"),
        }
    }
}

/// Smallest gap between the weakest target logit and the strongest
/// non-target logit, over all rows with a non-target key.
pub fn min_target_margin(w: &BlockWeights, batch: &[Example]) -> f64 {
    let mut best = f64::INFINITY;
    for e in batch {
        let s = crate::block::attention_scores(&e.z, &w.w_q, &w.w_k);
        for (i, set) in e.target_sets.iter().enumerate() {
            let lo = set.iter().map(|&j| s[(i, j)]).fold(f64::INFINITY, f64::min);
            let hi = (0..=i)
                .filter(|j| !set.contains(j))
                .map(|j| s[(i, j)])
                .fold(f64::NEG_INFINITY, f64::max);
            if hi.is_finite() {
                best = best.min(lo - hi);
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pattern: TargetPattern,
    pub d: usize,
    pub t: usize,
    /// Sweep abscissa: T for backcopy, r_eff(Σ_D)/δ² for the grouped task.
    pub x: f64,
    pub delta: Option<f64>,
    pub dormant_per_group: Option<usize>,
    pub scaled_cost: f64,
    pub total: f64,
    pub raw_frobsq: f64,
    pub qk_nuclear: f64,
    pub vo_nuclear: f64,
    pub mlp_frobsq: f64,
    pub task_loss: f64,
    pub compliance: f64,
    pub min_margin: f64,
    pub converged: bool,
}

/// Trains every configuration; runs are independent and single-threaded, and
/// the returned rows follow the input order.
pub fn run_sweep(configs: &[TrainConfig], exec: Exec) -> Vec<Result<SweepRow>> {
    exec.map(configs, sweep_row)
}

fn sweep_row(cfg: &TrainConfig) -> Result<SweepRow> {
    let tr = train_block(cfg)?;
    let last = tr.final_eval;
    let (t, x, delta, dpg) = match &cfg.task {
        TaskConfig::Backcopy(s) => (s.t, s.t as f64, None, None),
        TaskConfig::Generic(s) => {
            let g = GenericGeometry::build(s)?;
            let data = task_data(&cfg.task, cfg.n_seqs, cfg.data_seed, Exec::Sequential)?;
            let geo = task_geometry(&g, &data)?;
            let x = if s.delta > 0.0 {
                geo.r_eff / (s.delta * s.delta)
            } else {
                f64::INFINITY
            };
            (s.t, x, Some(s.delta), Some(s.dormant_per_group))
        }
    };
    Ok(SweepRow {
        pattern: cfg.pattern,
        d: cfg.task.dim(),
        t,
        x,
        delta,
        dormant_per_group: dpg,
        scaled_cost: tr.scaled_cost,
        total: tr.cost.total,
        raw_frobsq: tr.cost.raw_frobsq,
        qk_nuclear: tr.cost.qk_nuclear,
        vo_nuclear: tr.cost.vo_nuclear,
        mlp_frobsq: tr.cost.mlp_frobsq,
        task_loss: last.task_loss,
        compliance: last.compliance,
        min_margin: tr.min_margin,
        converged: tr.converged,
    })
}

/// Backcopy configurations over context lengths with d = T + |D| + |C| + 2.
pub fn backcopy_sweep_configs(
    ts: &[usize],
    n_dormant: usize,
    n_copy: usize,
    kappa: f64,
    pattern: TargetPattern,
) -> Vec<TrainConfig> {
    ts.iter()
        .map(|&t| {
            let spec = BackcopySpec {
                d: BackcopySpec::min_dim(t, n_dormant, n_copy),
                t,
                n_dormant,
                n_copy,
                kappa,
                frames: crate::tasks::Frames::StandardBasis,
            };
            TrainConfig::new(TaskConfig::Backcopy(spec), pattern)
        })
        .collect()
}

/// Grouped-task configurations over a (δ, dormant tokens per group) grid.
pub fn generic_sweep_configs(
    base: &GenericSpec,
    deltas: &[f64],
    counts: &[usize],
    pattern: TargetPattern,
) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for &delta in deltas {
        for &n in counts {
            let spec = GenericSpec {
                delta,
                dormant_per_group: n,
                ..base.clone()
            };
            out.push(TrainConfig::new(TaskConfig::Generic(spec), pattern));
        }
    }
    out
}

/// Least-squares slope of log y against log x.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (_, slope) = linear_fit(&lx, &ly)?;
    Ok(slope)
}

fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("need at least two finite (x, y) pairs"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("x values are all equal"));
    }
    Ok((my - sxy / sxx * mx, sxy / sxx))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("need at least two finite (x, y) pairs"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("constant series has no correlation"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Frames;

    fn small_backcopy(t: usize) -> TaskConfig {
        TaskConfig::Backcopy(BackcopySpec {
            d: BackcopySpec::min_dim(t, 2, 2),
            t,
            n_dormant: 2,
            n_copy: 2,
            kappa: 5.0,
            frames: Frames::StandardBasis,
        })
    }

    #[test]
    fn target_sets_follow_roles() {
        let task = small_backcopy(3);
        let toks = [
            Token::Bos,
            Token::Dormant { group: 0, index: 1 },
            Token::CopyPaste { group: 0 },
            Token::Dormant { group: 0, index: 0 },
        ];
        assert_eq!(
            target_sets(&task, &toks, TargetPattern::Sink),
            vec![vec![0], vec![0], vec![1], vec![0]]
        );
        assert_eq!(
            target_sets(&task, &toks, TargetPattern::Diagonal),
            vec![vec![0], vec![1], vec![1], vec![3]]
        );
    }

    #[test]
    fn construction_start_stays_close() {
        let mut cfg = TrainConfig::new(small_backcopy(6), TargetPattern::Sink);
        cfg.init = Init::Construction { noise: 1e-3 };
        cfg.qk_scale = Some(1.0);
        cfg.lr = 1e-3;
        cfg.steps = 200;
        cfg.n_seqs = 8;
        let reference = block_cost(
            &backcopy_sink_weights(match &cfg.task {
                TaskConfig::Backcopy(s) => s,
                _ => unreachable!(),
            })
            .unwrap(),
        )
        .unwrap()
        .total;
        let tr = train_block(&cfg).unwrap();
        assert!(tr.converged, "{:?}", tr.final_eval);
        assert!(
            (tr.cost.total - reference).abs() <= 0.1 * reference,
            "{} vs {reference}",
            tr.cost.total
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let mut cfg = TrainConfig::new(small_backcopy(4), TargetPattern::Diagonal);
        cfg.steps = 20;
        cfg.n_seqs = 4;
        let a = train_block(&cfg).unwrap();
        let b = train_block(&cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn divergence_reported() {
        let mut cfg = TrainConfig::new(small_backcopy(4), TargetPattern::Sink);
        cfg.optimizer = Optimizer::Gd;
        cfg.lr = 1e6;
        cfg.steps = 50;
        cfg.n_seqs = 2;
        match train_block(&cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|t| t.steps.len())
            ),
        }
    }

    #[test]
    fn fits() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
        assert!((pearson(&x, &[2.0, 4.0, 8.0, 16.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 4]).is_err());
    }
}
