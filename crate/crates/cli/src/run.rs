use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use sinkdiag::block::{AttentionMode, TokenMatrix};
use sinkdiag::constructions::{
    backcopy_sink_weights, block_cost, generic_bounds, generic_diag_weights, generic_sink_weights,
    thm2_bounds, verify_construction,
};
use sinkdiag::dump::{block_tensors, group_heads, read_dump, write_dump, Dtype, HeadData, HeadId};
use sinkdiag::head_patterns::{classify, mass_profile, pooled_fractions, CensusRow, Thresholds};
use sinkdiag::oversmoothing::{
    anti_smoothing_wvo, avg_cos_sim, estimate_stats, lambda_grid, theory_avg_sim, trace_conditions,
    uniform_attention_dynamics, uniformity_coefficient,
};
use sinkdiag::report::{config_hash, fmt_f64, write_json, Table};
use sinkdiag::sink_geometry::{bos_alignment_stats, sink_representable, value_rank_profile};
use sinkdiag::tasks::{task_geometry, BackcopySpec, Frames, GenericGeometry, GenericSpec};
use sinkdiag::train::{
    backcopy_sweep_configs, construction, generic_sweep_configs, loglog_slope, pearson, run_sweep,
    scaled_cost, task_data, train_block, GradMode, Init, Optimizer, SweepRow, TargetPattern,
    TaskConfig, TrainConfig,
};
use sinkdiag::{Exec, Matrix};

use crate::args::*;

/// Bad command-line input detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Ctx {
    out: PathBuf,
    exec: Exec,
    hash: String,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn csv(&self, name: &str, table: &Table) -> Result<PathBuf> {
        let p = self.path(name);
        table.write_csv(&p, &self.hash)?;
        Ok(p)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.path(name);
        write_json(&p, value)?;
        Ok(p)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::available()
    };
    let (name, hash) = match &cli.command {
        Command::Analyze(a) => ("analyze", config_hash(&("analyze", a))?),
        Command::Classify(a) => ("classify", config_hash(&("classify", a))?),
        Command::Oversmooth(a) => ("oversmooth", config_hash(&("oversmooth", a))?),
        Command::Construct(a) => ("construct", config_hash(&("construct", a))?),
        Command::Bounds(a) => ("bounds", config_hash(&("bounds", a))?),
        Command::Train(a) => ("train", config_hash(&("train", a))?),
        Command::Sweep(a) => ("sweep", config_hash(&("sweep", a))?),
        Command::Geometry(a) => ("geometry", config_hash(&("geometry", a))?),
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx {
        out: cli.out.clone(),
        exec,
        hash,
    };
    let written = match &cli.command {
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Classify(a) => classify_cmd(&ctx, a),
        Command::Oversmooth(a) => oversmooth(&ctx, a),
        Command::Construct(a) => construct(&ctx, a),
        Command::Bounds(a) => bounds(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Geometry(a) => geometry(&ctx, a),
    }?;
    for p in written {
        println!("{name}: wrote {}", p.display());
    }
    Ok(())
}

fn load_heads(path: &Path) -> Result<Vec<(HeadId, HeadData)>> {
    let tensors = read_dump(path).with_context(|| format!("reading {}", path.display()))?;
    let heads = group_heads(tensors)?;
    if heads.is_empty() {
        return Err(usage(format!(
            "{} holds no per-head tensors",
            path.display()
        )));
    }
    Ok(heads.into_iter().collect())
}

fn f(x: f64) -> String {
    fmt_f64(x)
}

fn analyze(ctx: &Ctx, a: &AnalyzeArgs) -> Result<Vec<PathBuf>> {
    let heads = load_heads(&a.input.dump)?;
    let mut t = Table::new([
        "layer",
        "head",
        "sequence",
        "sink",
        "diag",
        "lower1",
        "other",
        "uniformity",
        "bos_cos_median",
        "value_rank",
    ]);
    for (id, h) in &heads {
        let n = h.attention.len().max(h.tokens.len());
        for k in 0..n {
            let (mut cols, attn) = match h.attention.get(k) {
                Some(am) => {
                    let p = mass_profile(am, a.input.exclude_bos_row);
                    (
                        vec![f(p.sink), f(p.diag), f(p.lower1), f(p.other)],
                        f(uniformity_coefficient(am)),
                    )
                }
                None => (vec![String::new(); 4], String::new()),
            };
            cols.push(attn);
            let z = h.tokens.get(k);
            cols.push(match z {
                Some(z) if z.len() > 1 => f(bos_alignment_stats(z)?.median),
                _ => String::new(),
            });
            cols.push(match (z, &h.w_v) {
                (Some(z), Some(wv)) => f(value_rank_profile(z, wv, a.rank_tol)?),
                _ => String::new(),
            });
            let mut row = vec![id.layer.to_string(), id.head.to_string(), k.to_string()];
            row.extend(cols);
            t.push(row)?;
        }
    }
    Ok(vec![ctx.csv("analyze.csv", &t)?])
}

fn parse_thresholds(s: &str) -> Result<Thresholds> {
    if s == "default" {
        return Ok(Thresholds::default());
    }
    let v: Vec<f64> = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("bad threshold '{x}'")))
        })
        .collect::<Result<_>>()?;
    if v.len() != 4 || v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(usage(
            "thresholds need four values in [0, 1]: sink,diag,dual_joint,dual_lower_frac",
        ));
    }
    Ok(Thresholds {
        sink: v[0],
        diag: v[1],
        dual_joint: v[2],
        dual_lower_frac: v[3],
    })
}

fn classify_cmd(ctx: &Ctx, a: &ClassifyArgs) -> Result<Vec<PathBuf>> {
    let th = parse_thresholds(&a.thresholds)?;
    let heads = load_heads(&a.input.dump)?;
    let mut rows = Vec::new();
    for (id, h) in &heads {
        let labels = ctx.exec.map(&h.attention, |am| {
            classify(mass_profile(am, a.input.exclude_bos_row), th)
        });
        for (k, label) in labels.into_iter().enumerate() {
            rows.push(CensusRow {
                layer: id.layer,
                head: id.head,
                sequence: k,
                label,
            });
        }
    }
    if rows.is_empty() {
        return Err(usage("dump holds no attention maps"));
    }
    let mut t = Table::new([
        "layer", "head", "sequence", "label", "sink", "diag", "lower1", "other",
    ]);
    for r in &rows {
        let p = r.label.profile;
        t.push(vec![
            r.layer.to_string(),
            r.head.to_string(),
            r.sequence.to_string(),
            r.label.label.as_str().to_string(),
            f(p.sink),
            f(p.diag),
            f(p.lower1),
            f(p.other),
        ])?;
    }
    let pooled: serde_json::Map<String, serde_json::Value> = pooled_fractions(&rows)
        .iter()
        .map(|(p, x)| (p.as_str().to_string(), json!(x)))
        .collect();
    let summary = json!({ "thresholds": th, "rows": rows.len(), "pooled_fractions": pooled });
    Ok(vec![
        ctx.csv("census.csv", &t)?,
        ctx.json("census_summary.json", &summary)?,
    ])
}

fn oversmooth(ctx: &Ctx, a: &OversmoothArgs) -> Result<Vec<PathBuf>> {
    if a.lambda_points < 2 {
        return Err(usage("--lambda-points must be at least 2"));
    }
    match &a.dump {
        Some(path) => {
            let heads = load_heads(path)?;
            let grid = lambda_grid(a.lambda_points);
            let mut t = Table::new(["layer", "head", "lambda", "avg_sim"]);
            let mut conds = Vec::new();
            for (id, h) in &heads {
                let (Some(wv), Some(wo)) = (&h.w_v, &h.w_o) else {
                    continue;
                };
                if h.tokens.len() < 2 {
                    continue;
                }
                let mut stats = estimate_stats(&h.tokens)?;
                if let Some(b) = a.beta {
                    stats.beta = b;
                }
                let w = wo * wv;
                let len = h.tokens[0].len() - 1;
                let curve = theory_avg_sim(&stats, &w, len, &grid)?;
                for r in curve.rows() {
                    t.push(vec![
                        id.layer.to_string(),
                        id.head.to_string(),
                        r[0].clone(),
                        r[1].clone(),
                    ])?;
                }
                conds.push(json!({ "layer": id.layer, "head": id.head, "conditions": trace_conditions(&stats, &w)? }));
            }
            if t.rows.is_empty() {
                return Err(usage(
                    "no head carries tokens from two sequences together with Wv and Wo",
                ));
            }
            Ok(vec![
                ctx.csv("oversmooth.csv", &t)?,
                ctx.json("oversmooth_conditions.json", &conds)?,
            ])
        }
        None => {
            if a.d < a.t {
                return Err(usage("synthetic dynamics need d >= T"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let x0 = TokenMatrix(Matrix::from_fn(a.d, a.t, |_, _| {
                rng.random_range(-1.0..1.0)
            }));
            let w = anti_smoothing_wvo(&x0, a.scale)?;
            let traj = uniform_attention_dynamics(&x0, &w, a.layers)?;
            let mut t = Table::new(["layer", "avg_cos_sim"]);
            for (l, x) in traj.iter().enumerate() {
                t.push(vec![l.to_string(), f(avg_cos_sim(x)?)])?;
            }
            Ok(vec![ctx.csv("oversmooth_dynamics.csv", &t)?])
        }
    }
}

fn pattern(p: PatternArg) -> TargetPattern {
    match p {
        PatternArg::Sink => TargetPattern::Sink,
        PatternArg::Diagonal => TargetPattern::Diagonal,
    }
}

fn backcopy_spec(a: &TaskArgs, t: usize) -> BackcopySpec {
    BackcopySpec {
        d: a.d
            .unwrap_or_else(|| BackcopySpec::min_dim(t, a.n_dormant, a.n_copy)),
        t,
        n_dormant: a.n_dormant,
        n_copy: a.n_copy,
        kappa: a.kappa,
        frames: a
            .frame_seed
            .map_or(Frames::StandardBasis, |seed| Frames::RandomOrthogonal {
                seed,
            }),
    }
}

fn generic_spec(a: &TaskArgs, t: Option<usize>) -> GenericSpec {
    GenericSpec {
        d: a.d.unwrap_or(100),
        t: t.unwrap_or(50),
        n_groups: a.groups,
        phi: a.phi,
        delta: a.delta,
        eps_tol: a.eps,
        dormant_per_group: a.dormant_per_group,
        nuisance_rank: a.nuisance_rank,
        kappa: a.kappa,
        geometry_seed: a.geometry_seed,
    }
}

fn task_config(a: &TaskArgs, t: Option<usize>) -> TaskConfig {
    match a.task {
        TaskKind::Backcopy => TaskConfig::Backcopy(backcopy_spec(a, t.unwrap_or(16))),
        TaskKind::Generic => TaskConfig::Generic(generic_spec(a, t)),
    }
}

fn construct(ctx: &Ctx, a: &ConstructArgs) -> Result<Vec<PathBuf>> {
    let task = task_config(&a.task, a.t);
    let data = task_data(&task, a.task.n_seqs, a.task.seed, ctx.exec)?;
    let w = construction(&task, pattern(a.pattern), &data)?;
    let kappa = a.verify_kappa.unwrap_or(a.task.kappa);
    let tol = match task {
        TaskConfig::Backcopy(ref s) => 1e-9 * (s.d as f64).sqrt(),
        TaskConfig::Generic(_) => 1e-8,
    };
    let verify = verify_construction(&w, &data, AttentionMode::Hard { kappa }, tol, ctx.exec)?;
    let cost = block_cost(&w)?;
    let weights = ctx.path("weights.atnd");
    write_dump(&weights, Dtype::F64, &block_tensors("block", &w))?;
    let report = json!({
        "task": task,
        "pattern": pattern(a.pattern).as_str(),
        "cost": cost,
        "scaled_cost": scaled_cost(&w, (task.dim() as f64).sqrt())?,
        "verify": verify,
    });
    Ok(vec![weights, ctx.json("construct.json", &report)?])
}

fn bounds(ctx: &Ctx, a: &BoundsArgs) -> Result<Vec<PathBuf>> {
    let report = match task_config(&a.task, a.t) {
        TaskConfig::Backcopy(spec) => {
            let b = thm2_bounds(&spec, a.c1)?;
            let sink = match spec.frames {
                Frames::StandardBasis => Some(block_cost(&backcopy_sink_weights(&spec)?)?),
                Frames::RandomOrthogonal { .. } => None,
            };
            json!({ "task": "backcopy", "spec": spec, "bounds": b, "sink_construction_cost": sink })
        }
        TaskConfig::Generic(spec) => {
            let g = GenericGeometry::build(&spec)?;
            let data = sinkdiag::tasks::gen_generic(&g, a.task.n_seqs, a.task.seed, ctx.exec)?;
            let geo = task_geometry(&g, &data)?;
            let b = generic_bounds(&g, &geo)?;
            let sink = block_cost(&generic_sink_weights(&g)?)?;
            let diag = if geo.delta_diag.is_finite() {
                Some(block_cost(&generic_diag_weights(&g, geo.delta_diag)?)?)
            } else {
                None
            };
            json!({
                "task": "generic",
                "spec": spec,
                "r_eff": geo.r_eff,
                "r_eta": geo.r_eta,
                "delta_diag": if geo.delta_diag.is_finite() { json!(geo.delta_diag) } else { json!("inf") },
                "bounds": b,
                "sink_construction_cost": sink,
                "diag_construction_cost": diag,
            })
        }
    };
    Ok(vec![ctx.json("bounds.json", &report)?])
}

fn apply_optim(cfg: &mut TrainConfig, o: &OptimArgs) -> Result<()> {
    cfg.mode = match o.mode {
        ModeArg::Soft => GradMode::Soft,
        ModeArg::Forced => GradMode::Forced,
    };
    cfg.steps = o.steps;
    cfg.lr = o.lr;
    cfg.reg_weight = o.reg;
    cfg.margin_penalty = o.margin_penalty;
    cfg.margin_slack = o.margin_slack;
    cfg.pattern_penalty = o.pattern_penalty;
    cfg.qk_scale = o.qk_scale;
    cfg.optimizer = if o.gd { Optimizer::Gd } else { Optimizer::Adam };
    cfg.resample = !o.fixed_batch;
    if let Some(noise) = o.init_construction {
        cfg.init = Init::Construction { noise };
    }
    cfg.validate()?;
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = TrainConfig::new(task_config(&a.task, a.t), pattern(a.pattern));
    cfg.n_seqs = a.task.n_seqs;
    cfg.data_seed = a.task.seed;
    cfg.seed = a.task.seed;
    apply_optim(&mut cfg, &a.optim)?;
    let tr = train_block(&cfg)?;
    let mut t = Table::new(["step", "task_loss", "reg_cost", "compliance"]);
    for (k, s) in tr.steps.iter().enumerate() {
        t.push(vec![
            k.to_string(),
            f(s.task_loss),
            f(s.reg_cost),
            f(s.compliance),
        ])?;
    }
    let weights = ctx.path("weights.atnd");
    write_dump(&weights, Dtype::F64, &block_tensors("block", &tr.weights))?;
    let report = json!({
        "config": cfg,
        "cost": tr.cost,
        "scaled_cost": tr.scaled_cost,
        "final_eval": tr.final_eval,
        "min_margin": tr.min_margin,
        "converged": tr.converged,
    });
    Ok(vec![
        ctx.csv("train_trace.csv", &t)?,
        ctx.json("train.json", &report)?,
        weights,
    ])
}

const T_LADDER: [usize; 9] = [8, 12, 16, 24, 32, 48, 64, 96, 128];

fn parse_ts(s: &str) -> Result<Vec<usize>> {
    let bad = || usage(format!("bad --T value '{s}': use 8,16,32 or 8..64"));
    let ts: Vec<usize> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        T_LADDER
            .iter()
            .copied()
            .filter(|t| (lo..=hi).contains(t))
            .collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if ts.is_empty() || ts.contains(&0) {
        return Err(bad());
    }
    Ok(ts)
}

fn sweep(ctx: &Ctx, a: &SweepArgs) -> Result<Vec<PathBuf>> {
    let pat = pattern(a.pattern);
    let mut configs = match a.task.task {
        TaskKind::Backcopy => {
            let mut c = backcopy_sweep_configs(
                &parse_ts(a.ts.as_deref().unwrap_or("8..64"))?,
                a.task.n_dormant,
                a.task.n_copy,
                a.task.kappa,
                pat,
            );
            if let Some(seed) = a.task.frame_seed {
                for cfg in &mut c {
                    if let TaskConfig::Backcopy(s) = &mut cfg.task {
                        s.frames = Frames::RandomOrthogonal { seed };
                    }
                }
            }
            c
        }
        TaskKind::Generic => {
            if a.deltas.is_empty() || a.counts.is_empty() {
                return Err(usage("--deltas and --counts must be non-empty"));
            }
            let t = match a.ts.as_deref() {
                None => None,
                Some(s) => Some(
                    s.trim()
                        .parse()
                        .map_err(|_| usage("the grouped task takes a single --T value"))?,
                ),
            };
            generic_sweep_configs(&generic_spec(&a.task, t), &a.deltas, &a.counts, pat)
        }
    };
    for cfg in &mut configs {
        cfg.n_seqs = a.task.n_seqs;
        cfg.data_seed = a.task.seed;
        cfg.seed = a.task.seed;
        apply_optim(cfg, &a.optim)?;
    }
    let rows: Vec<SweepRow> = run_sweep(&configs, ctx.exec)
        .into_iter()
        .collect::<sinkdiag::Result<_>>()?;
    let mut t = Table::new([
        "pattern",
        "d",
        "T",
        "x",
        "delta",
        "dormant_per_group",
        "scaled_cost",
        "total",
        "raw_frobsq",
        "qk_nuclear",
        "vo_nuclear",
        "mlp_frobsq",
        "task_loss",
        "compliance",
        "min_margin",
        "converged",
    ]);
    let opt = |x: Option<String>| x.unwrap_or_default();
    for r in &rows {
        t.push(vec![
            r.pattern.as_str().to_string(),
            r.d.to_string(),
            r.t.to_string(),
            f(r.x),
            opt(r.delta.map(f)),
            opt(r.dormant_per_group.map(|n| n.to_string())),
            f(r.scaled_cost),
            f(r.total),
            f(r.raw_frobsq),
            f(r.qk_nuclear),
            f(r.vo_nuclear),
            f(r.mlp_frobsq),
            f(r.task_loss),
            f(r.compliance),
            f(r.min_margin),
            r.converged.to_string(),
        ])?;
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.x).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.scaled_cost).collect();
    let summary = if rows.len() >= 2 {
        let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        json!({
            "points": rows.len(),
            "loglog_slope": loglog_slope(&xs, &ys).ok(),
            "log_pearson": pearson(&lx, &ly).ok(),
        })
    } else {
        json!({ "points": rows.len() })
    };
    let task = match a.task.task {
        TaskKind::Backcopy => "backcopy",
        TaskKind::Generic => "generic",
    };
    Ok(vec![
        ctx.csv(&format!("sweep_{task}_{}.csv", pat.as_str()), &t)?,
        ctx.json(&format!("sweep_{task}_{}.json", pat.as_str()), &summary)?,
    ])
}

fn geometry(ctx: &Ctx, a: &GeometryArgs) -> Result<Vec<PathBuf>> {
    let heads = load_heads(&a.input.dump)?;
    let mut written = Vec::new();
    if a.bos_alignment || !a.sink_check {
        let mut t = Table::new([
            "layer", "head", "sequence", "n", "min", "q1", "median", "q3", "max",
        ]);
        for (id, h) in &heads {
            for (k, z) in h.tokens.iter().enumerate() {
                let s = bos_alignment_stats(z)?;
                t.push(vec![
                    id.layer.to_string(),
                    id.head.to_string(),
                    k.to_string(),
                    s.n.to_string(),
                    f(s.min),
                    f(s.q1),
                    f(s.median),
                    f(s.q3),
                    f(s.max),
                ])?;
            }
        }
        if t.rows.is_empty() {
            return Err(usage("dump holds no token matrices"));
        }
        written.push(ctx.csv("bos_alignment.csv", &t)?);
    }
    if a.sink_check {
        let mut t = Table::new([
            "layer",
            "head",
            "sequence",
            "representable",
            "boundary_tokens",
            "witness_margin",
        ]);
        for (id, h) in &heads {
            let reports = ctx.exec.map(&h.tokens, |z| {
                let queries: Vec<usize> = (1..z.len()).collect();
                sink_representable(z, &queries)
            });
            for (k, r) in reports.into_iter().enumerate() {
                let r = r?;
                t.push(vec![
                    id.layer.to_string(),
                    id.head.to_string(),
                    k.to_string(),
                    r.representable.to_string(),
                    r.boundary.len().to_string(),
                    r.witness_margin.map(f).unwrap_or_default(),
                ])?;
            }
        }
        written.push(ctx.csv("sink_check.csv", &t)?);
    }
    Ok(written)
}
