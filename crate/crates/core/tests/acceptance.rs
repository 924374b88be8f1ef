//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::time::Instant;

use microlp::{ComparisonOp, OptimizationDirection, Problem, SolveOutcome};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sinkdiag::block::{rms_norm, AttentionMap, AttentionMode, BlockWeights, TokenMatrix};
use sinkdiag::constructions::{
    backcopy_sink_weights, block_cost, generic_bounds, generic_diag_weights, generic_sink_weights,
    thm2_bounds, verify_construction,
};
use sinkdiag::head_patterns::{classify, mass_profile, MassProfile, Pattern, Thresholds};
use sinkdiag::oversmoothing::{
    anti_smoothing_wvo, avg_cos_sim, lambda_grid, span_preserving_update, theory_avg_sim,
    theory_pair_inner, trace_conditions, uniform_attention_dynamics, uniform_causal,
    uniformity_coefficient, TokenStats,
};
use sinkdiag::sink_geometry::sink_representable;
use sinkdiag::tasks::{
    gen_generic, task_geometry, BackcopySpec, Frames, GenericGeometry, GenericSpec, RelaxedTarget,
};
use sinkdiag::train::{
    backcopy_sweep_configs, block_gradients, generic_sweep_configs, loglog_slope, pearson,
    run_sweep, task_data, Example, GradMode, Objective, SweepRow, TargetPattern, TaskConfig,
};
use sinkdiag::{Exec, Matrix};

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn gaussian(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
    Matrix::from_fn(m, n, |_, _| StandardNormal.sample(rng))
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    gaussian(rng, n, n).qr().q()
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize, rank: usize, scale: f64) -> Matrix {
    let g = gaussian(rng, d, rank);
    &g * g.transpose() * (scale / rank as f64)
}

// ---------------------------------------------------------------------------

fn sample_stats(rng: &mut ChaCha8Rng, d: usize, beta: f64) -> TokenStats {
    let z_bar = DVector::from_fn(d, |_, _| StandardNormal.sample(rng)) * 0.6;
    let sigma_c = random_psd(rng, d, 3, 0.3);
    let b = random_psd(rng, d, d, 0.7);
    TokenStats::new(z_bar, &b + &sigma_c, sigma_c, beta).unwrap()
}

fn closed_form_vs_monte_carlo() -> Outcome {
    let (d, t, n) = (32, 16, 100_000);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let stats = sample_stats(&mut rng, d, 1.0);
    let w = gaussian(&mut rng, d, d) * (0.8 / (d as f64).sqrt());

    let triples: Vec<(usize, usize, f64)> = (0..20)
        .map(|_| {
            let i = rng.random_range(1..=t);
            let j = rng.random_range(1..=t);
            (i, j, rng.random_range(0.0..=1.0))
        })
        .collect();
    let lambdas = [0.0, 0.5, 1.0];

    let chol_c = stats.sigma_c.clone().cholesky().map(|c| c.l());
    let chol_c = chol_c.unwrap_or_else(|| {
        let e = stats.sigma_c.clone().symmetric_eigen();
        &e.eigenvectors * Matrix::from_diagonal(&e.eigenvalues.map(|x| x.max(0.0).sqrt()))
    });
    let chol_b = stats.b().cholesky().unwrap().l();
    let ones = DVector::from_element(t, 1.0);
    let mix_diff = uniform_causal(t).0.transpose() - Matrix::identity(t, t);

    let mut sum = vec![0.0; triples.len()];
    let mut sum_sq = vec![0.0; triples.len()];
    let mut sim = [0.0; 3];
    for _ in 0..n {
        let shared = &chol_c * gaussian(&mut rng, d, 1);
        let z = &stats.z_bar * ones.transpose()
            + &shared * ones.transpose()
            + &chol_b * gaussian(&mut rng, d, t);
        let wz = &w * &z;
        let p = &z * stats.beta + &wz;
        let q = &wz * &mix_diff;
        for (k, &(i, j, l)) in triples.iter().enumerate() {
            let yi = p.column(i - 1) + q.column(i - 1) * l;
            let yj = p.column(j - 1) + q.column(j - 1) * l;
            let v = yi.dot(&yj);
            sum[k] += v;
            sum_sq[k] += v * v;
        }
        for (s, &l) in sim.iter_mut().zip(&lambdas) {
            *s += avg_cos_sim(&TokenMatrix(&p + &q * l)).unwrap();
        }
    }
    let nf = n as f64;
    let mut worst_z: f64 = 0.0;
    for (k, &(i, j, l)) in triples.iter().enumerate() {
        let mean = sum[k] / nf;
        let se = ((sum_sq[k] / nf - mean * mean) / (nf - 1.0)).sqrt();
        let th = theory_pair_inner(&stats, &w, i, j, l).unwrap();
        worst_z = worst_z.max((mean - th).abs() / se);
    }
    let curve = theory_avg_sim(&stats, &w, t, &lambdas).unwrap();
    let worst_sim = curve
        .values
        .iter()
        .zip(&sim)
        .map(|(th, s)| (th - s / nf).abs())
        .fold(0.0, f64::max);
    (
        worst_z <= 3.0 && worst_sim <= 0.02,
        format!("max |z| = {worst_z:.2} over 20 triples, max avg-sim gap = {worst_sim:.4}"),
    )
}

fn monotonicity() -> Outcome {
    let grid = lambda_grid(21);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bad_inc = 0;
    let mut n_inc = 0;
    while n_inc < 50 {
        let d = rng.random_range(3..=10);
        let t = rng.random_range(2..=12);
        let beta = rng.random_range(0.3..2.0);
        let stats = sample_stats(&mut rng, d, beta);
        let mut w = gaussian(&mut rng, d, d) * (rng.random_range(0.2..1.5) / (d as f64).sqrt());
        if !trace_conditions(&stats, &w).unwrap().cond_i {
            w = -w;
        }
        if !trace_conditions(&stats, &w).unwrap().cond_i {
            continue;
        }
        n_inc += 1;
        if !theory_avg_sim(&stats, &w, t, &grid)
            .unwrap()
            .strictly_increasing()
        {
            bad_inc += 1;
        }
    }
    let mut bad_dec = 0;
    for _ in 0..20 {
        let d = rng.random_range(3..=10);
        let t = rng.random_range(2..=12);
        let stats = sample_stats(&mut rng, d, 1.0);
        let a = rng.random_range(0.2..0.6);
        let s = gaussian(&mut rng, d, d) * 0.05;
        let w = -(Matrix::identity(d, d) + &s - s.transpose()) * a;
        assert!(trace_conditions(&stats, &w).unwrap().cond_ii);
        if !theory_avg_sim(&stats, &w, t, &grid)
            .unwrap()
            .strictly_decreasing()
        {
            bad_dec += 1;
        }
    }
    (
        bad_inc == 0 && bad_dec == 0,
        format!("violations: {bad_inc}/50 increasing, {bad_dec}/20 decreasing"),
    )
}

// max t s.t. z_jᵀ W (z₀ - z_i) ≥ t for all j ∈ J, i ≥ 1, with |W_kl| ≤ 1
fn lp_margin(z: &Matrix, queries: &[usize]) -> f64 {
    let d = z.nrows();
    let mut p = Problem::new(OptimizationDirection::Maximize);
    let w: Vec<_> = (0..d * d).map(|_| p.add_var(0.0, (-1.0, 1.0))).collect();
    let t = p.add_var(1.0, (f64::NEG_INFINITY, 1.0));
    for &j in queries {
        for i in 1..z.ncols() {
            let mut row = vec![(t, -1.0)];
            for k in 0..d {
                for l in 0..d {
                    let c = z[(k, j)] * (z[(l, 0)] - z[(l, i)]);
                    if c != 0.0 {
                        row.push((w[k * d + l], c));
                    }
                }
            }
            p.add_constraint(row.as_slice(), ComparisonOp::Ge, 0.0);
        }
    }
    match p.solve().unwrap() {
        SolveOutcome::Solution(s) => s.objective(),
        SolveOutcome::Interrupted(_) => panic!("LP oracle interrupted"),
    }
}

fn sample_tokens(rng: &mut ChaCha8Rng, d: usize, t: usize) -> Matrix {
    let kind = rng.random_range(0..4);
    loop {
        let mut z = match kind {
            0 => gaussian(rng, d, t + 1),
            _ => Matrix::from_fn(d, t + 1, |_, _| rng.random_range(-1..=1) as f64),
        };
        if kind == 2 {
            // reuse or negate earlier columns to create ties and cones
            for c in 1..=t {
                let src = rng.random_range(0..c);
                match rng.random_range(0..3) {
                    0 => z.set_column(c, &z.column(src).into_owned()),
                    1 => z.set_column(c, &(-z.column(src))),
                    _ => {}
                }
            }
        }
        if z.column_iter().all(|c| c.amax() > 0.0) {
            return z;
        }
    }
}

fn representability_vs_lp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut agree, mut yes, mut no) = (0, 0, 0);
    let mut first_bad = None;
    for k in 0..500 {
        let d = rng.random_range(1..=6);
        let t = rng.random_range(1..=4);
        let nq = rng.random_range(1..=t.min(3));
        let mut qs: Vec<usize> = (1..=t).collect();
        for i in 0..nq {
            let j = rng.random_range(i..t);
            qs.swap(i, j);
        }
        qs.truncate(nq);
        let z = sample_tokens(&mut rng, d, t);
        let got = sink_representable(&TokenMatrix(z.clone()), &qs)
            .unwrap()
            .representable;
        let want = lp_margin(&z, &qs) > 1e-7;
        if got == want {
            agree += 1;
        } else if first_bad.is_none() {
            first_bad = Some(k);
        }
        if want {
            yes += 1;
        } else {
            no += 1;
        }
    }
    (
        agree == 500 && yes > 0 && no > 0,
        format!("{agree}/500 agree ({yes} representable, {no} not), first mismatch {first_bad:?}"),
    )
}

fn backcopy_exactness() -> Outcome {
    let mut worst_err: f64 = 0.0;
    let mut worst_cost: f64 = 0.0;
    let mut ok = true;
    let mut cases = 0;
    for t in [2, 4, 8, 16, 24, 32] {
        let min_d = BackcopySpec::min_dim(t, 5, 5);
        let mut ds = vec![min_d];
        if min_d < 64 {
            ds.push(64);
        }
        for d in ds {
            let spec = BackcopySpec {
                d,
                t,
                n_dormant: 5,
                n_copy: 5,
                kappa: 40.0,
                frames: Frames::StandardBasis,
            };
            let data = task_data(
                &TaskConfig::Backcopy(spec.clone()),
                16,
                t as u64,
                Exec::available(),
            )
            .unwrap();
            let w = backcopy_sink_weights(&spec).unwrap();
            let tol = 1e-9 * (d as f64).sqrt();
            let r = verify_construction(
                &w,
                &data,
                AttentionMode::Hard { kappa: 40.0 },
                tol,
                Exec::available(),
            )
            .unwrap();
            let cost = block_cost(&w).unwrap().nuclear_total;
            let lhs = thm2_bounds(&spec, None).unwrap().lhs;
            worst_err = worst_err.max(r.max_output_err / tol);
            worst_cost = worst_cost.max(cost / lhs);
            ok &= r.labels_ok && cost <= lhs * (1.0 + 1e-6);
            cases += 1;
        }
    }
    (
        ok,
        format!(
            "{cases} (d, T) cases, max err/tol = {worst_err:.2e}, max cost/bound = {worst_cost:.4}"
        ),
    )
}

fn sample_generic_spec(rng: &mut ChaCha8Rng, seed: u64) -> GenericSpec {
    let c = rng.random_range(1..=4);
    let phi = if rng.random_bool(0.3) {
        0.0
    } else {
        rng.random_range(0.0..=(0.05f64).min(0.125 / c as f64))
    };
    let delta = if rng.random_bool(0.1) {
        0.0
    } else {
        rng.random_range(0.05..=0.5)
    };
    let dpg = rng.random_range(1..=4);
    let nuisance_rank = if rng.random_bool(0.5) {
        None
    } else {
        Some(rng.random_range(1..=c * dpg))
    };
    let need = 1 + 2 * c + usize::from(phi > 0.0) + nuisance_rank.unwrap_or(c * dpg);
    GenericSpec {
        d: need + rng.random_range(0..=24),
        t: rng.random_range(6..=32),
        n_groups: c,
        phi,
        delta,
        eps_tol: rng.random_range(0.05..=0.25),
        dormant_per_group: dpg,
        nuisance_rank,
        kappa: rng.random_range(1.0..=20.0),
        geometry_seed: seed,
    }
}

fn generic_bound_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut violations = Vec::new();
    let (mut eq4, mut no_diag) = (0, 0);
    for k in 0..100u64 {
        let spec = sample_generic_spec(&mut rng, k);
        let g = GenericGeometry::build(&spec).unwrap();
        let data = gen_generic(&g, 12, k, Exec::available()).unwrap();
        let geo = task_geometry(&g, &data).unwrap();
        let b = generic_bounds(&g, &geo).unwrap();
        let mode = AttentionMode::Hard { kappa: spec.kappa };
        let sink = generic_sink_weights(&g).unwrap();
        let cs = block_cost(&sink).unwrap().total;
        if !verify_construction(&sink, &data, mode, 1e-8, Exec::available())
            .unwrap()
            .labels_ok
        {
            violations.push(format!("#{k} sink labels"));
        }
        if !(b.l_sink <= cs && cs <= b.u_sink) {
            violations.push(format!(
                "#{k} sink cost {cs:.3} outside [{:.3}, {:.3}]",
                b.l_sink, b.u_sink
            ));
        }
        if !(geo.delta_diag.is_finite() && geo.delta_diag > 0.0) {
            no_diag += 1;
            continue;
        }
        let diag = generic_diag_weights(&g, geo.delta_diag).unwrap();
        let cd = block_cost(&diag).unwrap().total;
        let r = verify_construction(&diag, &data, mode, 1e-8, Exec::available()).unwrap();
        if !r.labels_ok {
            violations.push(format!("#{k} diag labels, error {:.2e}", r.max_output_err));
        }
        if !(b.l_diag <= cd && cd <= b.u_diag) {
            violations.push(format!(
                "#{k} diag cost {cd:.3} outside [{:.3}, {:.3}]",
                b.l_diag, b.u_diag
            ));
        }
        if b.eq4_holds {
            eq4 += 1;
            if cs >= cd {
                violations.push(format!("#{k} sink {cs:.3} >= diag {cd:.3}"));
            }
        }
    }
    (
        violations.is_empty(),
        format!(
            "100 specs, {} violations{}, separation condition held in {eq4}, {no_diag} without a diagonal construction",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

fn sweep(configs: &[sinkdiag::train::TrainConfig]) -> Vec<SweepRow> {
    run_sweep(configs, Exec::available())
        .into_iter()
        .map(|r| r.unwrap())
        .collect()
}

fn backcopy_scaling() -> Outcome {
    let ts = [8, 12, 16, 24, 32, 48, 64];
    let start = Instant::now();
    let mut slopes = Vec::new();
    let mut feasible = true;
    for pattern in [TargetPattern::Sink, TargetPattern::Diagonal] {
        let rows = sweep(&backcopy_sweep_configs(&ts, 5, 5, 10.0, pattern));
        feasible &= rows.iter().all(|r| r.converged);
        let xs: Vec<f64> = rows.iter().map(|r| r.x).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.scaled_cost).collect();
        slopes.push(loglog_slope(&xs, &ys).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = (slopes[0] - 1.0).abs() <= 0.25 && (slopes[1] - 1.5).abs() <= 0.25 && secs <= 1800.0;
    (
        ok,
        format!(
            "slope sink = {:.3}, diagonal = {:.3}, all converged = {feasible}, {secs:.0} s",
            slopes[0], slopes[1]
        ),
    )
}

fn generic_scaling() -> Outcome {
    let base = GenericSpec {
        d: 100,
        t: 50,
        n_groups: 3,
        phi: 0.0,
        delta: 0.3,
        eps_tol: 0.1,
        dormant_per_group: 2,
        nuisance_rank: None,
        kappa: 10.0,
        geometry_seed: 0,
    };
    let deltas = [0.1, 0.15, 0.2, 0.3, 0.4];
    let counts = [2, 4];
    let start = Instant::now();
    let mut rows = Vec::new();
    for pattern in [TargetPattern::Sink, TargetPattern::Diagonal] {
        let mut configs = generic_sweep_configs(&base, &deltas, &counts, pattern);
        for c in &mut configs {
            c.n_seqs = 16;
            c.steps = 1000;
        }
        rows.push(sweep(&configs));
    }
    let sink: Vec<f64> = rows[0].iter().map(|r| r.scaled_cost).collect();
    let mean = sink.iter().sum::<f64>() / sink.len() as f64;
    let spread = (sink.iter().cloned().fold(f64::MIN, f64::max)
        - sink.iter().cloned().fold(f64::MAX, f64::min))
        / mean;
    let lx: Vec<f64> = rows[1].iter().map(|r| r.x.ln()).collect();
    let ly: Vec<f64> = rows[1].iter().map(|r| r.scaled_cost.ln()).collect();
    let rho = pearson(&lx, &ly).unwrap();
    (
        rho >= 0.9 && spread <= 0.2,
        format!(
            "pearson(log diag cost, log r_eff/δ²) = {rho:.3}, sink cost range/mean = {spread:.3}, {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn directions(x: &Matrix) -> Matrix {
    let mut u = x.clone();
    for mut c in u.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    u
}

fn anti_oversmoothing() -> Outcome {
    let (d, t) = (16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x0 = TokenMatrix(gaussian(&mut rng, d, t));
    let w = anti_smoothing_wvo(&x0, 1.0).unwrap();
    let traj = uniform_attention_dynamics(&x0, &w, 50).unwrap();
    let u0 = directions(&x0.0);
    let s0 = avg_cos_sim(&x0).unwrap();
    let mut tok_err: f64 = 0.0;
    let mut sim_drift: f64 = 0.0;
    for x in &traj {
        tok_err = tok_err.max((directions(&x.0) - &u0).amax());
        tok_err = tok_err.max((rms_norm(&x.0).unwrap() - rms_norm(&x0.0).unwrap()).amax());
        sim_drift = sim_drift.max((avg_cos_sim(x).unwrap() - s0).abs());
    }

    let q1 = random_orthogonal(&mut rng, t);
    let q2 = random_orthogonal(&mut rng, d - t);
    let (_, next) = span_preserving_update(&x0, &q1, &q2, 1.7).unwrap();
    let g0 = directions(&x0.0).transpose() * directions(&x0.0);
    let g1 = directions(&next.0).transpose() * directions(&next.0);
    let cos_err = (g1 - g0).amax();
    (
        tok_err <= 1e-6 && sim_drift <= 1e-6 && cos_err <= 1e-9,
        format!(
            "token drift {tok_err:.1e}, avg-sim drift {sim_drift:.1e}, cosine change {cos_err:.1e}"
        ),
    )
}

fn params(w: &mut BlockWeights) -> [&mut [f64]; 8] {
    [
        w.w_q.as_mut_slice(),
        w.w_k.as_mut_slice(),
        w.w_v.as_mut_slice(),
        w.w_o.as_mut_slice(),
        w.w_1.as_mut_slice(),
        w.b_1.as_mut_slice(),
        w.w_2.as_mut_slice(),
        w.b_2.as_mut_slice(),
    ]
}

fn gradient_check() -> Outcome {
    let (d, t) = (8, 6);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut r =
            |m: usize, n: usize, s: f64| Matrix::from_fn(m, n, |_, _| rng.random_range(-s..s));
        let w = BlockWeights {
            w_q: r(d, d, 0.8),
            w_k: r(d, d, 0.8),
            w_v: r(d, d, 0.5),
            w_o: r(d, d, 0.5),
            w_1: r(d, d, 0.5),
            b_1: r(d, 1, 0.3).column(0).into_owned(),
            w_2: r(d, d, 0.5),
            b_2: r(d, 1, 0.3).column(0).into_owned(),
        };
        let batch: Vec<Example> = (0..2)
            .map(|_| {
                let x = r(d, t + 1, 1.0);
                let y = r(d, t + 1, 1.0);
                let relaxed = (0..=t)
                    .map(|p| RelaxedTarget::exact(y.column(p).into_owned()))
                    .collect();
                let sets = (0..=t)
                    .map(|i| if i % 3 == 0 { vec![0] } else { vec![i] })
                    .collect();
                Example::new(TokenMatrix(x), relaxed, sets).unwrap()
            })
            .collect();
        for mode in [GradMode::Soft, GradMode::Forced] {
            let obj = Objective {
                mode,
                reg_weight: 0.01,
                qk_scale: 2.0,
                pattern_penalty: 0.2,
                margin_penalty: 0.1,
                margin_target: 2.5,
                kappa: 2.5,
            };
            let loss = |w: &BlockWeights| {
                block_gradients(w, &batch, &obj, Exec::Sequential)
                    .unwrap()
                    .loss
                    .total
            };
            let mut g = block_gradients(&w, &batch, &obj, Exec::Sequential)
                .unwrap()
                .grad;
            let analytic: Vec<Vec<f64>> = params(&mut g).iter().map(|s| s.to_vec()).collect();
            for (f, an) in analytic.iter().enumerate() {
                for (i, &a) in an.iter().enumerate() {
                    let mut wp = w.clone();
                    params(&mut wp)[f][i] += h;
                    let mut wm = w.clone();
                    params(&mut wm)[f][i] -= h;
                    let fd = (loss(&wp) - loss(&wm)) / (2.0 * h);
                    worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                }
            }
        }
    }
    (
        worst <= 1e-4,
        format!("max relative error {worst:.2e} over 5 seeds, both modes"),
    )
}

fn profile(sink: f64, diag: f64, lower1: f64) -> MassProfile {
    MassProfile {
        sink,
        diag,
        lower1,
        other: 1.0 - sink - diag - lower1,
    }
}

fn metric_identities() -> Outcome {
    let mut fails = Vec::new();
    for t in [1, 2, 5, 16, 64] {
        let u_uniform = uniformity_coefficient(&uniform_causal(t));
        let u_eye = uniformity_coefficient(&AttentionMap(Matrix::identity(t, t)));
        if (u_uniform - 1.0).abs() > 1e-12 || (u_eye - 1.0 / t as f64).abs() > 1e-12 {
            fails.push(format!("T={t}: u(A_u)={u_uniform}, u(I)={u_eye}"));
        }
    }
    let th = Thresholds::default();
    let mut sink_map = Matrix::zeros(4, 4);
    sink_map.column_mut(0).fill(1.0);
    let p = mass_profile(&AttentionMap(sink_map), false);
    if (p.sink - 1.0).abs() > 1e-12 {
        fails.push(format!("one-hot BOS sink mass {}", p.sink));
    }
    let p = mass_profile(&AttentionMap(Matrix::identity(5, 5)), true);
    if (p.diag - 1.0).abs() > 1e-12 {
        fails.push(format!("identity diag mass {}", p.diag));
    }
    let p = mass_profile(&uniform_causal(3), false);
    if (p.sink - (1.0 + 0.5 + 1.0 / 3.0) / 3.0).abs() > 1e-12 {
        fails.push(format!("A_u T=3 sink mass {}", p.sink));
    }
    let cases = [
        (profile(0.5, 0.1, 0.05), Pattern::Sink),
        (profile(0.55, 0.0, 0.10), Pattern::SinkLowerDiag),
        (profile(0.40, 0.0, 0.0), Pattern::Sink),
        (profile(0.0, 0.40, 0.0), Pattern::Diagonal),
        (profile(0.2, 0.3, 0.1), Pattern::Other),
    ];
    for (p, want) in cases {
        let got = classify(p, th).label;
        if got != want {
            fails.push(format!("{p:?}: {got:?} != {want:?}"));
        }
    }
    (
        fails.is_empty(),
        if fails.is_empty() {
            "all identities hold".into()
        } else {
            fails.join("; ")
        },
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        (
            "closed-form pair inner products vs Monte Carlo",
            closed_form_vs_monte_carlo,
        ),
        (
            "similarity monotone in λ under the trace conditions",
            monotonicity,
        ),
        (
            "sink representability agrees with the LP oracle",
            representability_vs_lp,
        ),
        (
            "backcopy sink construction exact and within its cost bound",
            backcopy_exactness,
        ),
        (
            "grouped-task constructions within their cost bounds",
            generic_bound_suite,
        ),
        ("backcopy trained cost scaling in T", backcopy_scaling),
        ("grouped-task trained cost scaling", generic_scaling),
        ("anti-oversmoothing constructions", anti_oversmoothing),
        ("block gradients vs finite differences", gradient_check),
        ("uniformity and head-label identities", metric_identities),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = check();
        println!(
            "{} {name}: {detail} [{:.1} s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!ok);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
