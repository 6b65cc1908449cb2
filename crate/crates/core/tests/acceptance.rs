//! Acceptance gate: end-to-end properties of the whole pipeline — one-kernel
//! attention, online/stable reduction equivalence, oracle equivalence across
//! the full variant corpus, the memory-complexity claims via traffic
//! counters, twin-matmul fusion, the algebra axiom suite, grid bijection,
//! and executor determinism / block write safety.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tensorfuse::algebra::{
    broken_otimes_algebra, check_algebra, run_online, run_online_trace, run_stable,
    softmax_algebra, ReductionAlgebra,
};
use tensorfuse::rewrite::{find_two_pass_patterns, rewrite_two_pass_to_online};
use tensorfuse::eval::{eval_naive, Bindings, Outputs};
use tensorfuse::exec::{execute, execute_unfused, ExecOptions};
use tensorfuse::grid::{GridLimits, LogicalGrid};
use tensorfuse::ir::{GraphBuilder, TensorGraph};
use tensorfuse::schedule::{schedule, KernelSchedule, SchedulerOptions};
use tensorfuse::tensor::{compare, DType};
use tensorfuse::variants::{self, AttentionSpec};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn fused_schedule(spec: &AttentionSpec, graph: &TensorGraph) -> KernelSchedule {
    let opts = SchedulerOptions { tile_cfg: variants::tile_hints(spec), ..Default::default() };
    schedule(graph, &softmax_algebra(), &opts).expect("schedulable")
}

fn exec_options(spec: &AttentionSpec) -> ExecOptions {
    let mut o = ExecOptions { tile_cfg: variants::tile_hints(spec), ..ExecOptions::default() };
    if spec.dtype == DType::F64 {
        // F64 tiles double the on-chip footprint; the default cap targets F32
        o.scratchpad_bytes *= 2;
    }
    o
}

fn worst_error(fused: &Outputs, oracle: &Outputs) -> (f64, f64) {
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for (name, t) in fused {
        let m = compare(t, &oracle[name]).expect("comparable outputs");
        max_abs = max_abs.max(m.max_abs);
        max_rel = max_rel.max(m.max_rel);
    }
    (max_abs, max_rel)
}

// --- 1. one-kernel attention --------------------------------------------

#[test]
fn attention_fuses_to_one_kernel_and_each_rewrite_is_necessary() {
    let spec = variants::spec_for("vanilla", 512, DType::F32).unwrap();
    let graph = variants::build_variant(&spec).unwrap();
    let tile_cfg = variants::tile_hints(&spec);

    let full = SchedulerOptions { tile_cfg: tile_cfg.clone(), ..Default::default() };
    let sched = schedule(&graph, &softmax_algebra(), &full).unwrap();
    assert_eq!(sched.kernel_count(), 1);
    assert!(sched.materialized_intermediates().is_empty());

    for (semantic, structural, tiled) in
        [(false, true, true), (true, false, true), (true, true, false)]
    {
        let opts = SchedulerOptions { semantic, structural, tiled, tile_cfg: tile_cfg.clone() };
        let sched = schedule(&graph, &softmax_algebra(), &opts).unwrap();
        assert!(
            sched.kernel_count() > 1,
            "semantic={semantic} structural={structural} tiled={tiled} still fused"
        );
    }
}

// --- 2. online = stable -------------------------------------------------

fn stable_f32(x: &[f32]) -> (f32, f32) {
    let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let d: f32 = x.iter().map(|&v| (v - m).exp()).sum();
    (m, d)
}

fn online_f32(x: &[f32]) -> (f32, f32) {
    let mut m = x[0];
    let mut acc = 1.0f32;
    for &v in &x[1..] {
        let m_new = m.max(v);
        if m_new != m {
            acc *= (m - m_new).exp();
            m = m_new;
        }
        acc += (v - m).exp();
    }
    (m, acc)
}

fn check_vector(x: &[f64], alg: &ReductionAlgebra) {
    let (ms, ds) = run_stable(x, alg).unwrap();
    let (mo, d_o) = run_online(x, alg).unwrap();
    assert!(rel(ms, mo) <= 1e-12, "online max drifted: {ms} vs {mo}");
    assert!(rel(ds, d_o) <= 1e-12, "online sum drifted: {ds} vs {d_o}");

    let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let (ms32, ds32) = stable_f32(&x32);
    let (mo32, do32) = online_f32(&x32);
    assert!(rel(ms32 as f64, mo32 as f64) <= 1e-5);
    assert!(rel(ds32 as f64, do32 as f64) <= 1e-5);
}

#[test]
fn online_reduction_matches_two_pass_over_ten_thousand_vectors() {
    let alg = softmax_algebra();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=4096);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        check_vector(&x, &alg);
    }

    // adversarial shapes
    check_vector(&[7.25], &alg);
    check_vector(&vec![3.5; 1024], &alg);
    let ascending: Vec<f64> = (0..2048).map(|i| -10.0 + i as f64 * 20.0 / 2047.0).collect();
    check_vector(&ascending, &alg);
    let mut dup_max: Vec<f64> = (0..512).map(|i| (i as f64).sin() * 9.0).collect();
    dup_max[17] = 10.0;
    dup_max[400] = 10.0;
    check_vector(&dup_max, &alg);
}

#[test]
fn online_accumulator_satisfies_the_closed_form_at_every_prefix() {
    let alg = softmax_algebra();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.gen_range(1..=64);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let trace = run_online_trace(&x, &alg).unwrap();
        assert_eq!(trace.len(), n);
        let mut sum_e = 0.0f64;
        for (j, st) in trace.iter().enumerate() {
            sum_e += x[j].exp();
            // do[j] = (⊕_{i≤j} E(x_i)) ⊗ E(⊖ m_j)
            let closed = sum_e * (-st.m).exp();
            assert!(
                rel(st.acc, closed) <= 1e-10,
                "prefix {j}: recurrence {} vs closed form {closed}",
                st.acc
            );
        }
    }
}

// --- 3. oracle equivalence across the corpus ----------------------------

#[test]
fn every_corpus_variant_matches_the_oracle_across_fifty_seeds() {
    for dtype in [DType::F32, DType::F64] {
        let tol = match dtype {
            DType::F32 => 1e-5,
            DType::F64 => 1e-10,
        };
        for spec in variants::corpus(dtype) {
            let graph = variants::build_variant(&spec).unwrap();
            let sched = fused_schedule(&spec, &graph);
            let eopts = exec_options(&spec);
            for seed in 0..50u64 {
                let bindings = variants::bindings(&graph, &spec, seed);
                let (fused, _, _) = execute(&sched, &bindings, &eopts).unwrap();
                let oracle = eval_naive(&graph, &bindings).unwrap();
                let (_, max_rel) = worst_error(&fused, &oracle);
                assert!(
                    max_rel <= tol,
                    "{} ({dtype:?}) seed {seed}: max_rel {max_rel:e} > {tol:e}",
                    spec.name
                );
            }
        }
    }
}

// --- 4. memory complexity -----------------------------------------------

#[test]
fn fused_attention_traffic_is_linear_and_unfused_is_quadratic() {
    let mut unfused_intermediates = Vec::new();
    let mut fused_totals = Vec::new();
    for n in [256usize, 512, 1024] {
        let spec = variants::spec_for("vanilla", n, DType::F32).unwrap();
        let graph = variants::build_variant(&spec).unwrap();
        let sched = fused_schedule(&spec, &graph);
        let bindings = variants::bindings(&graph, &spec, 0);

        let (_, fused, _) = execute(&sched, &bindings, &exec_options(&spec)).unwrap();
        assert_eq!(fused.intermediate_bytes_materialized, 0, "n={n}");
        fused_totals.push(fused.global_reads + fused.global_writes);

        let (_, unfused) = execute_unfused(&graph, &bindings).unwrap();
        assert!(
            unfused.intermediate_elements >= n * n,
            "n={n}: unfused must materialize at least the score matrix"
        );
        unfused_intermediates.push(unfused.intermediate_elements as i128);
    }

    // intermediates are a quadratic polynomial of n with integer
    // coefficients, so second differences D(n) = I(2n) − 2·I(n) scale by
    // exactly 4 per doubling; raw ratios approach 4 from below
    let [i256, i512, i1024] = unfused_intermediates[..] else { unreachable!() };
    let d256 = i512 - 2 * i256;
    let d512 = i1024 - 2 * i512;
    assert_eq!(d512, 4 * d256, "unfused growth is not exactly quadratic");
    for (small, large) in [(i256, i512), (i512, i1024)] {
        let ratio = large as f64 / small as f64;
        assert!((3.4..4.0).contains(&ratio), "raw unfused ratio {ratio}");
    }

    let [f256, f512, f1024] = fused_totals[..] else { unreachable!() };
    assert!(f512 as f64 / f256 as f64 <= 2.2);
    assert!(f1024 as f64 / f512 as f64 <= 2.2);
}

// --- 5. twin matmul ------------------------------------------------------

fn twin_matmul(m: usize, n: usize, k: usize, p: usize) -> TensorGraph {
    let mut b = GraphBuilder::new();
    let a = b.input("a", &[("m".into(), m), ("k".into(), k)], DType::F64).unwrap();
    let bb = b.input("b", &[("k".into(), k), ("n".into(), n)], DType::F64).unwrap();
    let d = b.input("d", &[("n".into(), n), ("p".into(), p)], DType::F64).unwrap();
    let c = b.contract("c", a, bb, &["k"]).unwrap();
    let e = b.contract("e", c, d, &["n"]).unwrap();
    b.output("out", e).unwrap();
    b.finish()
}

fn random_bindings(graph: &TensorGraph, seed: u64) -> Bindings {
    use tensorfuse::ir::OpKind;
    use tensorfuse::tensor::TensorData;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Bindings::new();
    for node in &graph.nodes {
        if !matches!(node.kind, OpKind::Input) {
            continue;
        }
        let extents = graph.extents_of(&node.dims);
        let len: usize = extents.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        b.insert(node.name.clone(), TensorData::new(node.dims.clone(), extents, data));
    }
    b
}

#[test]
fn twin_matmul_fuses_when_the_last_dim_tiles_fully() {
    let g = twin_matmul(512, 512, 512, 64);
    let sched = schedule(&g, &softmax_algebra(), &SchedulerOptions::default()).unwrap();
    assert_eq!(sched.kernel_count(), 1);
    assert!(sched.materialized_intermediates().is_empty());

    let bindings = random_bindings(&g, 11);
    let mut eopts = ExecOptions::default();
    eopts.scratchpad_bytes *= 2; // F64 tiles
    let (fused, traffic, _) = execute(&sched, &bindings, &eopts).unwrap();
    assert_eq!(traffic.intermediate_bytes_materialized, 0);
    let oracle = eval_naive(&g, &bindings).unwrap();
    let (_, max_rel) = worst_error(&fused, &oracle);
    assert!(max_rel <= 1e-10, "fused twin matmul drifted: {max_rel:e}");
}

#[test]
fn twin_matmul_declines_fusion_with_a_large_last_dim_but_stays_correct() {
    let g = twin_matmul(512, 512, 512, 4096);
    let mut opts = SchedulerOptions::default();
    opts.tile_cfg.set("p", 128).unwrap();
    let sched = schedule(&g, &softmax_algebra(), &opts).unwrap();
    assert_eq!(sched.kernel_count(), 2);
    assert_eq!(sched.materialized_intermediates().len(), 1);

    let bindings = random_bindings(&g, 12);
    let mut eopts = ExecOptions { tile_cfg: opts.tile_cfg.clone(), ..ExecOptions::default() };
    eopts.scratchpad_bytes *= 2; // F64 tiles
    let (outs, traffic, _) = execute(&sched, &bindings, &eopts).unwrap();
    assert!(traffic.intermediate_elements >= 512 * 512, "C must be materialized");
    let oracle = eval_naive(&g, &bindings).unwrap();
    let (_, max_rel) = worst_error(&outs, &oracle);
    assert!(max_rel <= 1e-10, "declined twin matmul drifted: {max_rel:e}");
}

// --- 6. ring / homomorphism suite ----------------------------------------

#[test]
fn softmax_algebra_passes_axioms_and_broken_algebras_are_rejected() {
    let samples = [-4.0, -1.5, -0.25, 0.0, 0.5, 1.0, 2.5];
    let report = check_algebra(&softmax_algebra(), &samples, 1e-12).unwrap();
    assert!(report.passed, "{report:?}");
    for a in &report.axioms {
        assert!(a.worst_residual <= 1e-12, "{}: {:e}", a.axiom, a.worst_residual);
    }

    let broken = check_algebra(&broken_otimes_algebra(), &samples, 1e-12).unwrap();
    assert!(!broken.passed);
    let dist = broken.axioms.iter().find(|a| a.axiom.contains("distributes")).unwrap();
    assert!(!dist.passed, "broken ⊗ must fail distributivity");
}

#[test]
fn the_online_rewrite_declines_non_homomorphic_patterns() {
    // a two-pass pattern whose body is exp(x + m), not E(x ⊕ ⊖m)
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[("m".into(), 8), ("n".into(), 32)], DType::F64).unwrap();
    let mx = b.reduce("mx", tensorfuse::ir::Combiner::Max, &["n"], x).unwrap();
    let mb = b.broadcast("mb", mx, &["m".into(), "n".into()]).unwrap();
    use tensorfuse::expr::{self, PointwiseExpr as E};
    let bad = b
        .pointwise("bad", expr::exp(expr::add(E::Arg(0), E::Arg(1))), &[x, mb])
        .unwrap();
    let d = b.reduce("d", tensorfuse::ir::Combiner::Sum, &["n"], bad).unwrap();
    b.output("out", d).unwrap();
    let g = b.finish();
    let (matches, diags) = find_two_pass_patterns(&g);
    assert!(matches.is_empty());
    assert!(
        diags.iter().any(|m| m.contains("non-homomorphic")),
        "decline must be diagnosed: {diags:?}"
    );

    // a genuine pattern, but an algebra whose E is not exp: the rewrite
    // itself must refuse
    let spec = variants::spec_for("vanilla", 256, DType::F64).unwrap();
    let attn = variants::build_variant(&spec).unwrap();
    let (matches, _) = find_two_pass_patterns(&attn);
    assert!(!matches.is_empty());
    let not_exp = ReductionAlgebra {
        name: "shifted-exp".into(),
        hom: Arc::new(|x: f64| x.exp() + 0.1),
        ..softmax_algebra()
    };
    let err = rewrite_two_pass_to_online(&attn, &matches[0], &not_exp, 0).unwrap_err();
    assert!(err.to_string().contains("non-homomorphic"), "{err}");
}

// --- 7. grid bijection ----------------------------------------------------

#[test]
fn grid_linearization_is_a_bijection_for_every_sampled_grid() {
    let grids: Vec<Vec<usize>> = vec![
        vec![70_000], // exceeds the 65535 per-axis physical limit
        vec![1, 70_000],
        vec![2, 35_000],
        vec![65_536],
        vec![99_999],
        vec![100, 100, 10],
        vec![7, 11, 13, 17],
        vec![1, 1, 1],
        vec![3; 10],
        vec![96, 1024],
    ];
    for axes in grids {
        let total: usize = axes.iter().product();
        assert!(total <= 100_000);
        assert!(axes.iter().any(|&n| n > 65_535) || total <= 100_000);
        let named: Vec<(String, usize)> =
            axes.iter().enumerate().map(|(i, &n)| (format!("d{i}"), n)).collect();
        let grid = LogicalGrid::new(named, GridLimits::default()).unwrap();
        assert_eq!(grid.total(), total);
        for id in 0..total {
            let coords = grid.delinearize(id).unwrap();
            for (c, (_, n)) in coords.iter().zip(&grid.axes) {
                assert!(c < n);
            }
            assert_eq!(grid.linearize(&coords).unwrap(), id, "axes {axes:?}");
        }
    }
}

// --- 8. determinism and block safety --------------------------------------

#[test]
fn serial_and_parallel_execution_are_bit_identical_with_disjoint_writes() {
    for spec in variants::corpus(DType::F32) {
        let graph = variants::build_variant(&spec).unwrap();
        let sched = fused_schedule(&spec, &graph);
        let bindings = variants::bindings(&graph, &spec, 5);

        let mut serial = exec_options(&spec);
        serial.trace = true;
        let (out_s, _, trace) = execute(&sched, &bindings, &serial).unwrap();

        let mut parallel = exec_options(&spec);
        parallel.parallel = true;
        let (out_p, _, _) = execute(&sched, &bindings, &parallel).unwrap();

        for (name, t) in &out_s {
            let bits_s: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
            let bits_p: Vec<u64> = out_p[name].data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_s, bits_p, "{}: {name} differs across modes", spec.name);
        }

        // the executor rejects overlapping write sets outright; the trace
        // additionally proves the blocks tile every written tensor exactly
        let trace = trace.expect("trace requested");
        let mut written: BTreeMap<String, usize> = BTreeMap::new();
        for block in &trace.blocks {
            for (name, elements) in &block.writes {
                *written.entry(name.clone()).or_default() += elements;
            }
        }
        assert!(!written.is_empty());
        for (name, elements) in &written {
            let node = sched
                .graph
                .nodes
                .iter()
                .find(|n| &n.name == name)
                .unwrap_or_else(|| panic!("{}: unknown written tensor {name}", spec.name));
            let full: usize = sched.graph.extents_of(&node.dims).iter().product();
            assert_eq!(*elements, full, "{}: {name} not tiled exactly", spec.name);
        }
    }
}
