//! Acceptance gate: one test per release criterion, each printing a PASS or
//! FAIL line with the measured value before asserting. Run with
//! `cargo test --test acceptance -- --nocapture` to see the report.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use fastenc::autodiff::finite_diff_check;
use fastenc::compress::{
    apply_prune, default_ratio_grid, distill, masks_from_kept, select_keep, sweep_csv,
    sweep_prune_tradeoff, synthetic_task, train, ImportanceScores, KDConfig, PruneSpec,
};
use fastenc::encoder::{compare_plans, ExecPlan, MaskSet, Model, ModelConfig};
use fastenc::model_io::{model_from_bytes, model_to_bytes, quantize_model};
use fastenc::qgemm::{
    gemm_i8_dynamic, quantize_activations_dynamic, quantize_weight_per_column, PackCache,
    QEpilogue,
};
use fastenc::runtime::{
    count_macs, count_macs_all, evaluate, instance_sweep, make_batches, run_multi_instance,
    sweep_csv as instance_csv, Batch, BatchMode, InstancePlan,
};
use fastenc::tensor::{gemm, Epilogue, Matrix};

fn report(criterion: u32, what: &str, ok: bool, detail: &str) {
    println!(
        "{} criterion {criterion}: {what} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn random_batches(cfg: &ModelConfig, n: usize, batch: usize, max_len: usize, seed: u64) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus: Vec<Vec<u32>> = (0..n * batch)
        .map(|_| {
            let len = rng.gen_range(max_len / 2..=max_len);
            (0..len).map(|_| rng.gen_range(0..cfg.vocab as u32)).collect()
        })
        .collect();
    make_batches(&corpus, batch, BatchMode::Dynamic, cfg.max_seq_len).unwrap()
}

fn random_scores(cfg: &ModelConfig, seed: u64) -> ImportanceScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImportanceScores {
        heads: (0..cfg.num_layers).map(|_| (0..cfg.num_heads).map(|_| rng.gen()).collect()).collect(),
        ffn_units: (0..cfg.num_layers).map(|_| (0..cfg.ffn_size).map(|_| rng.gen()).collect()).collect(),
        examples_seen: 1,
    }
}

#[test]
fn c01_prune_mask_equivalence() {
    let cfg = ModelConfig::new(4, 128, 8, 512, 100, 16, 4).unwrap();
    let model = Model::random(cfg.clone(), 101).unwrap();
    let scores = random_scores(&cfg, 11);
    let batches = random_batches(&cfg, 100, 2, 12, 7);
    let exec = ExecPlan::f32_unfused();
    let mut worst = 0.0f32;
    for rh in [1.0, 0.5, 0.25] {
        for rf in [1.0, 0.5, 0.25] {
            let kept = select_keep(&scores, &PruneSpec::new(rh, rf).unwrap());
            let pruned = apply_prune(&model, &kept).unwrap();
            let masks = masks_from_kept(&cfg, &kept);
            for batch in &batches {
                let a = model.forward(batch, &exec, Some(&masks)).unwrap();
                let b = pruned.forward(batch, &exec, None).unwrap();
                for r in 0..a.rows() {
                    for (x, y) in a.row(r).iter().zip(b.row(r)) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
    }
    report(
        1,
        "pruned logits match masked logits over 9 ratio pairs x 100 batches",
        worst <= 1e-5,
        &format!("max abs diff {worst:.3e}, tolerance 1e-5"),
    );
}

#[test]
fn c02_gradients_match_finite_differences() {
    let cfg = ModelConfig::new(2, 32, 4, 64, 50, 16, 3).unwrap();
    let w = Model::random(cfg.clone(), 202).unwrap().weights.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, s) = (4usize, 12usize);
    let mut tokens = Vec::new();
    let mut mask = Vec::new();
    for _ in 0..b {
        let len = rng.gen_range(6..=s);
        for p in 0..s {
            tokens.push(if p < len { rng.gen_range(0..50) } else { 0 });
            mask.push(u8::from(p < len));
        }
    }
    let batch = Batch { tokens, mask, seq_len: s, batch: b, origin: (0..b).collect() };
    let labels: Vec<u32> = (0..b).map(|_| rng.gen_range(0..3)).collect();
    let masks = MaskSet::<f64>::ones(&cfg);
    let rep = finite_diff_check(&cfg, &w, &batch, &labels, &masks, 100, 1e-5, 42).unwrap();
    report(
        2,
        "100 sampled parameter/mask coordinates vs central differences",
        !rep.vacuous && rep.max_rel_err <= 1e-4,
        &format!("max relative error {:.3e}, tolerance 1e-4", rep.max_rel_err),
    );
}

#[test]
fn c03_quantization_fidelity() {
    // Frobenius error of the int8 GEMM against f32 over 20 seeds.
    let mut worst_frob = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let a = Matrix::from_vec(64, 256, (0..64 * 256).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let w = Matrix::from_vec(256, 256, (0..256 * 256).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let cache = PackCache::new();
        let got = gemm_i8_dynamic(&a, &w, "w", &cache, None, QEpilogue::None).unwrap();
        let want = gemm(&a, &w, None, Epilogue::None).unwrap();
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for r in 0..64 {
            for (x, y) in got.row(r).iter().zip(want.row(r)) {
                num += ((x - y) as f64).powi(2);
                den += (*y as f64).powi(2);
            }
        }
        worst_frob = worst_frob.max((num / den).sqrt());
    }

    // Universal round-trip bound: |dequantized - original| <= scale / 2.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bound_holds = true;
    for _ in 0..50 {
        let m = Matrix::from_vec(4, 32, (0..128).map(|_| rng.gen_range(-10.0f32..10.0)).collect()).unwrap();
        let q = quantize_activations_dynamic(&m).unwrap();
        for r in 0..4 {
            for c in 0..32 {
                let deq = (q.values[r * 32 + c] as i32 - q.zero_point as i32) as f32 * q.scale;
                if (deq - m.get(r, c)).abs() > q.scale / 2.0 + 1e-6 {
                    bound_holds = false;
                }
            }
        }
        let w = Matrix::from_vec(16, 8, (0..128).map(|_| rng.gen_range(-3.0f32..3.0)).collect()).unwrap();
        let qw = quantize_weight_per_column(&w).unwrap();
        for r in 0..16 {
            for c in 0..8 {
                let deq = qw.values[r * 8 + c] as f32 * qw.col_scales[c];
                if (deq - w.get(r, c)).abs() > qw.col_scales[c] / 2.0 + 1e-6 {
                    bound_holds = false;
                }
            }
        }
    }

    // Argmax agreement on a trained toy classifier, 200 examples.
    let cfg = ModelConfig::new(2, 32, 4, 64, 32, 16, 2).unwrap();
    let data = synthetic_task(200, 32, 12, 33);
    let (model, _) = train(
        Model::random(cfg.clone(), 303).unwrap(),
        &data,
        &KDConfig { steps: 200, learning_rate: 0.05, ..KDConfig::default() },
    )
    .unwrap();
    let corpus: Vec<Vec<u32>> = data.iter().map(|e| e.tokens.clone()).collect();
    let batches = make_batches(&corpus, 8, BatchMode::Dynamic, 16).unwrap();
    let cmp = compare_plans(&model, &batches, &ExecPlan::f32_fused(), &ExecPlan::i8_fused()).unwrap();

    let ok = worst_frob <= 0.02 && bound_holds && cmp.agreement() >= 0.98;
    report(
        3,
        "int8 GEMM fidelity, round-trip bound, f32-vs-i8 agreement",
        ok,
        &format!(
            "worst Frobenius {worst_frob:.4} (<= 0.02), bound holds: {bound_holds}, agreement {:.4} (>= 0.98)",
            cmp.agreement()
        ),
    );
}

#[test]
fn c04_packing_cache_miss_count() {
    let cfg = ModelConfig::new(3, 32, 4, 64, 40, 16, 3).unwrap();
    let model = Model::random(cfg.clone(), 404).unwrap();
    let plan = ExecPlan::i8_fused();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let len = rng.gen_range(3..=10);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..40)).collect();
        model.forward(&Batch::single(&tokens, 0), &plan, None).unwrap();
    }
    let misses = model.pack_cache.misses();
    let expected = model.constant_weight_count(&plan);
    report(
        4,
        "1000 forwards pack each constant weight exactly once",
        misses == expected,
        &format!("misses {misses}, constant weights {expected}, hits {}", model.pack_cache.hits()),
    );
}

#[test]
fn c05_dynamic_batching_macs_and_speedup() {
    let cfg = ModelConfig::new(2, 64, 4, 128, 50, 128, 2).unwrap();
    let model = Model::random(cfg.clone(), 505).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let corpus: Vec<Vec<u32>> = (0..64)
        .map(|_| {
            let len = rng.gen_range(8..=128);
            (0..len).map(|_| rng.gen_range(0..50)).collect()
        })
        .collect();
    let fixed = make_batches(&corpus, 1, BatchMode::FixedPad(128), 128).unwrap();
    let dynamic = make_batches(&corpus, 1, BatchMode::Dynamic, 128).unwrap();

    let fixed_macs = count_macs_all(&cfg, &fixed);
    let dyn_macs = count_macs_all(&cfg, &dynamic);
    // Analytic expectation: each sequence costs exactly its own-length MACs
    // under batch-size-1 dynamic batching, the fixed-pad length otherwise.
    let expect_dyn: u64 = corpus
        .iter()
        .map(|s| {
            count_macs(
                &cfg,
                &Batch {
                    tokens: vec![0; s.len()],
                    mask: vec![1; s.len()],
                    seq_len: s.len(),
                    batch: 1,
                    origin: vec![0],
                },
            )
        })
        .sum();
    let expect_fixed = corpus.len() as u64
        * count_macs(
            &cfg,
            &Batch { tokens: vec![0; 128], mask: vec![1; 128], seq_len: 128, batch: 1, origin: vec![0] },
        );
    let macs_exact = dyn_macs == expect_dyn && fixed_macs == expect_fixed;

    let exec = ExecPlan::f32_fused();
    let time = |batches: &[Batch]| {
        let start = std::time::Instant::now();
        for b in batches {
            model.forward(b, &exec, None).unwrap();
        }
        start.elapsed().as_secs_f64()
    };
    // Warm up once so first-touch allocation noise lands outside the clock.
    time(&dynamic[..4.min(dynamic.len())]);
    let fixed_s = time(&fixed);
    let dyn_s = time(&dynamic);
    let speedup = fixed_s / dyn_s;

    report(
        5,
        "dynamic batching MAC arithmetic exact and wall speed-up >= 1.3x",
        macs_exact && speedup >= 1.3,
        &format!(
            "MACs exact: {macs_exact} (ratio {:.4}), wall {fixed_s:.3}s -> {dyn_s:.3}s = {speedup:.2}x",
            dyn_macs as f64 / fixed_macs as f64
        ),
    );
}

#[test]
fn c06_multi_instance_equivalence_and_sweep() {
    let cfg = ModelConfig::new(2, 32, 4, 64, 50, 32, 3).unwrap();
    let model = Model::random(cfg.clone(), 606).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let corpus: Vec<Vec<u32>> = (0..32)
        .map(|_| {
            let len = rng.gen_range(4..=20);
            (0..len).map(|_| rng.gen_range(0..50)).collect()
        })
        .collect();
    let exec = ExecPlan::f32_fused();
    let plans = [(1, 8), (2, 4), (4, 2), (8, 1)];
    let (base, _) = run_multi_instance(&model, &corpus, &InstancePlan::new(1, 8, 8).unwrap(), &exec).unwrap();
    let mut worst = 0.0f32;
    for (n, t) in plans {
        let (rows, _) = run_multi_instance(&model, &corpus, &InstancePlan::new(n, t, 8).unwrap(), &exec).unwrap();
        for (a, b) in rows.iter().zip(&base) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let sweep = instance_sweep(&model, &corpus, &plans, 8, &exec).unwrap();
    let csv = instance_csv(&sweep);
    let csv_ok = csv.starts_with("instances,threads_per_instance,seconds,speedup\n") && csv.lines().count() == 5;
    // Throughput ordering across N is machine-dependent: reported, not asserted.
    println!("instance sweep:\n{csv}");
    report(
        6,
        "logits identical across (N,T) plans; sweep CSV emitted",
        worst <= 1e-6 && csv_ok,
        &format!("max abs logit diff {worst:.3e} (<= 1e-6), csv rows ok: {csv_ok}"),
    );
}

#[test]
fn c07_fusion_equivalence() {
    let cfg = ModelConfig::new(3, 32, 4, 64, 50, 16, 3).unwrap();
    let model = Model::random(cfg.clone(), 707).unwrap();
    let batches = random_batches(&cfg, 50, 4, 12, 12);
    let unfused = ExecPlan::f32_unfused();
    let mut worst = 0.0f32;
    for plan in [
        ExecPlan { fused_qkv: true, ..unfused },
        ExecPlan { fused_attention: true, ..unfused },
        ExecPlan { fused_epilogue: true, ..unfused },
        ExecPlan::f32_fused(),
    ] {
        for batch in &batches {
            let a = model.forward(batch, &unfused, None).unwrap();
            let b = model.forward(batch, &plan, None).unwrap();
            for r in 0..a.rows() {
                for (x, y) in a.row(r).iter().zip(b.row(r)) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    report(
        7,
        "fused qkv/attention/epilogue plans match unfused over 50 batches",
        worst <= 1e-5,
        &format!("max abs logit diff {worst:.3e}, tolerance 1e-5"),
    );
}

#[test]
fn c08_toy_distillation() {
    let start = std::time::Instant::now();
    let vocab = 32;
    let data = synthetic_task(256, vocab, 12, 88);
    let teacher_cfg = ModelConfig::new(4, 32, 4, 64, vocab, 16, 2).unwrap();
    // 0.05 is the stable step size for this toy task: 0.1 with momentum 0.9
    // overshoots and the loss diverges.
    let (teacher, _) = train(
        Model::random(teacher_cfg, 808).unwrap(),
        &data,
        &KDConfig { steps: 400, learning_rate: 0.05, ..KDConfig::default() },
    )
    .unwrap();
    let t_acc = evaluate(&teacher, &data, &ExecPlan::f32_fused(), 8).unwrap().unwrap();

    let student_cfg = ModelConfig::new(2, 32, 4, 64, vocab, 16, 2).unwrap();
    let (student, losses) = distill(
        &teacher,
        Model::random(student_cfg, 909).unwrap(),
        &data,
        &KDConfig { steps: 800, learning_rate: 0.02, ..KDConfig::default() },
    )
    .unwrap();
    let s_acc = evaluate(&student, &data, &ExecPlan::f32_fused(), 8).unwrap().unwrap();
    let seconds = start.elapsed().as_secs_f64();

    let ok = t_acc >= 0.98 && s_acc >= 0.90 && losses[200] < losses[0] && seconds < 300.0;
    report(
        8,
        "teacher >= 0.98, 2-layer distilled student >= 0.90, loss decreasing",
        ok,
        &format!(
            "teacher {t_acc:.3}, student {s_acc:.3}, loss {:.4} -> {:.4} at step 200, {seconds:.1}s",
            losses[0], losses[200]
        ),
    );
}

#[test]
fn c09_prune_sweep_report() {
    let cfg = ModelConfig::new(2, 32, 4, 64, 32, 16, 2).unwrap();
    let data = synthetic_task(48, 32, 12, 14);
    let model = Model::random(cfg, 910).unwrap();
    let grid = default_ratio_grid();
    let points = sweep_prune_tradeoff(&model, &data, &grid).unwrap();

    let has_op_points = grid.contains(&(0.5, 0.25)) && grid.contains(&(0.5, 0.5));
    let mut monotone = true;
    for p in &points {
        for q in &points {
            let dominated = (p.head_ratio < q.head_ratio && p.ffn_ratio <= q.ffn_ratio)
                || (p.head_ratio <= q.head_ratio && p.ffn_ratio < q.ffn_ratio);
            if dominated && p.macs >= q.macs {
                monotone = false;
            }
        }
    }
    let csv = sweep_csv(&points);
    let csv_ok = csv.starts_with("head_ratio,ffn_ratio,mac_ratio,accuracy,seconds\n")
        && csv.lines().count() == grid.len() + 1;
    report(
        9,
        "prune sweep CSV with strictly decreasing MACs and reported operating points",
        has_op_points && monotone && csv_ok,
        &format!("operating points: {has_op_points}, MACs strictly monotone: {monotone}, csv ok: {csv_ok}"),
    );
}

#[test]
fn c10_model_file_round_trip_bit_identical() {
    let cfg = ModelConfig::new(2, 32, 4, 48, 40, 16, 3).unwrap();
    let generated = Model::random(cfg.clone(), 1010).unwrap();
    let kept = select_keep(&random_scores(&cfg, 3), &PruneSpec::new(0.5, 0.5).unwrap());
    let pruned = apply_prune(&generated, &kept).unwrap();
    let quantized = quantize_model(&pruned).unwrap();

    let mut ok = true;
    let mut detail = String::new();
    for (label, model) in [("generated", &generated), ("pruned", &pruned), ("quantized", &quantized)] {
        let bytes = model_to_bytes(model);
        let reloaded = model_from_bytes(&bytes).unwrap();
        let again = model_to_bytes(&reloaded);
        let same = again == bytes;
        ok &= same;
        detail.push_str(&format!("{label}: {} bytes, identical: {same}; ", bytes.len()));
    }
    report(10, "save -> load -> save is bit-identical", ok, detail.trim_end_matches("; "));
}
