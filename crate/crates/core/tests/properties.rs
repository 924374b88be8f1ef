use nalgebra::DVector;
use proptest::prelude::*;

use sinkdiag::block::{AttentionMap, BlockWeights, TokenMatrix};
use sinkdiag::constructions::block_cost;
use sinkdiag::dump::{read_dump, write_dump, Dtype, Tensor};
use sinkdiag::head_patterns::{classify, mass_profile, MassProfile, Pattern, Thresholds};
use sinkdiag::sink_geometry::sink_representable;
use sinkdiag::tasks::{copy_paste_rms_ratios, gen_generic, GenericGeometry, GenericSpec};
use sinkdiag::{Exec, Matrix};

fn causal_map(t: usize) -> impl Strategy<Value = AttentionMap> {
    prop::collection::vec(0.0f64..1.0, t * t).prop_map(move |raw| {
        let mut a = Matrix::zeros(t, t);
        for i in 0..t {
            let s: f64 = (0..=i).map(|j| raw[i * t + j] + 1e-3).sum();
            for j in 0..=i {
                a[(i, j)] = (raw[i * t + j] + 1e-3) / s;
            }
        }
        AttentionMap(a)
    })
}

fn profiles() -> impl Strategy<Value = MassProfile> {
    (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b, c, e)| {
        let s = a + b + c + e + 1e-9;
        MassProfile {
            sink: a / s,
            diag: b / s,
            lower1: c / s,
            other: e / s,
        }
    })
}

fn thresholds() -> impl Strategy<Value = Thresholds> {
    (0.05f64..0.95, 0.05f64..0.95, 0.05f64..0.95, 0.0f64..0.5).prop_map(
        |(sink, diag, dual_joint, dual_lower_frac)| Thresholds {
            sink,
            diag,
            dual_joint,
            dual_lower_frac,
        },
    )
}

fn tensor() -> impl Strategy<Value = (Vec<u64>, bool)> {
    (prop::collection::vec(0u64..5, 0..=4), any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn profile_parts_sum_to_one(a in (1usize..9).prop_flat_map(causal_map), skip_bos in any::<bool>()) {
        let p = mass_profile(&a, skip_bos);
        if a.len() > usize::from(skip_bos) {
            prop_assert!((p.sink + p.diag + p.lower1 + p.other - 1.0).abs() < 1e-9);
        }
        for x in [p.sink, p.diag, p.lower1, p.other] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
        }
    }

    #[test]
    fn lowering_a_threshold_keeps_its_label(p in profiles(), th in thresholds(), f in 0.0f64..1.0) {
        let label = classify(p, th).label;
        let mut lower = th;
        match label {
            Pattern::Sink => lower.sink *= f,
            Pattern::Diagonal => lower.diag *= f,
            Pattern::SinkLowerDiag => {
                lower.dual_joint *= f;
                lower.dual_lower_frac *= f;
            }
            Pattern::Other => return Ok(()),
        }
        prop_assert_eq!(classify(p, lower).label, label);
    }

    #[test]
    fn dump_round_trip((dims, wide) in tensor(), seed in any::<u64>()) {
        let n: u64 = dims.iter().product();
        let mut x = seed;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let v = (x >> 11) as f64 / (1u64 << 53) as f64 * 200.0 - 100.0;
                if wide { v } else { v as f32 as f64 }
            })
            .collect();
        let t = Tensor::new(format!("t{}", dims.len()), dims, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.atnd");
        write_dump(&path, if wide { Dtype::F64 } else { Dtype::F32 }, std::slice::from_ref(&t)).unwrap();
        let back = read_dump(&path).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].dims, &t.dims);
        let same = back[0].data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn scaling_one_matrix_never_lowers_cost(
        raw in prop::collection::vec(-1.0f64..1.0, 6 * 36 + 12),
        which in 0usize..6,
        c in 1.0f64..4.0,
    ) {
        let m = |k: usize| Matrix::from_row_slice(6, 6, &raw[k * 36..(k + 1) * 36]);
        let mut w = BlockWeights {
            w_q: m(0),
            w_k: m(1),
            w_v: m(2),
            w_o: m(3),
            w_1: m(4),
            b_1: DVector::from_row_slice(&raw[216..222]),
            w_2: m(5),
            b_2: DVector::from_row_slice(&raw[222..228]),
        };
        let before = block_cost(&w).unwrap();
        let target = [&mut w.w_q, &mut w.w_k, &mut w.w_v, &mut w.w_o, &mut w.w_1, &mut w.w_2];
        *target.into_iter().nth(which).unwrap() *= c;
        let after = block_cost(&w).unwrap();
        prop_assert!(after.total >= before.total * (1.0 - 1e-12));
        prop_assert!(after.raw_frobsq >= before.raw_frobsq * (1.0 - 1e-12));
    }

    #[test]
    fn sink_witness_separates(raw in prop::collection::vec(-1.0f64..1.0, 5 * 4), nq in 1usize..=3) {
        let z = Matrix::from_row_slice(5, 4, &raw);
        prop_assume!(z.column_iter().all(|c| c.norm() > 1e-3));
        let qs: Vec<usize> = (1..=nq).collect();
        let r = sink_representable(&TokenMatrix(z), &qs).unwrap();
        if r.representable {
            prop_assert!(r.witness_margin.unwrap() > 0.0);
        } else {
            prop_assert!(r.witness_w.is_none());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn copy_paste_ratio_bounds(
        c in 1usize..=4,
        phi_frac in 0.0f64..1.0,
        delta in 0.0f64..=0.5,
        eps in 0.05f64..=0.25,
        dpg in 1usize..=4,
        extra in 0usize..10,
        t in 12usize..30,
        seed in 0u64..1000,
    ) {
        let phi = phi_frac * 0.05f64.min(0.125 / c as f64);
        let need = 1 + 2 * c + usize::from(phi > 0.0) + c * dpg;
        let spec = GenericSpec {
            d: need + extra,
            t,
            n_groups: c,
            phi,
            delta,
            eps_tol: eps,
            dormant_per_group: dpg,
            nuisance_rank: None,
            kappa: 5.0,
            geometry_seed: seed,
        };
        let g = GenericGeometry::build(&spec).unwrap();
        let data = gen_generic(&g, 12, seed, Exec::Sequential);
        prop_assume!(data.is_ok());
        let data = data.unwrap();
        for r in copy_paste_rms_ratios(&data) {
            prop_assert!((1.0 - 1e-9..=7.0 / 6.0 + 1e-9).contains(&r), "R = {r}");
        }
    }
}
