//! Inference-time machinery: batch construction (fixed-pad, dynamic,
//! length-sorted dynamic), deterministic MAC accounting, multi-instance
//! scheduling over disjoint worker sets, and the benchmark harness that
//! emits the ablation and instance-sweep reports.

use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use thiserror::Error;

use crate::encoder::{argmax, EncoderError, ExecPlan, Model, ModelConfig};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("sequence {index} has length {len}, exceeding the limit {max}")]
    SequenceTooLong { index: usize, len: usize, max: usize },
    #[error("batch size must be >= 1")]
    ZeroBatchSize,
    #[error("instance plan invalid: {0}")]
    BadPlan(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// A labeled sequence; the unit of dataset files and evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u32,
}

pub fn token_corpus(data: &[Example]) -> Vec<Vec<u32>> {
    data.iter().map(|e| e.tokens.clone()).collect()
}

/// One padded batch of token rows. `tokens` and `mask` are row-major
/// `batch x seq_len`; mask is 1 for real tokens, 0 for padding. `origin[i]`
/// is the corpus index of row i, so outputs can be restored to input order
/// after sorted batching or sharding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
    pub seq_len: usize,
    pub batch: usize,
    pub origin: Vec<usize>,
}

impl Batch {
    /// Single unpadded sequence.
    pub fn single(tokens: &[u32], origin: usize) -> Batch {
        Batch {
            tokens: tokens.to_vec(),
            mask: vec![1; tokens.len()],
            seq_len: tokens.len(),
            batch: 1,
            origin: vec![origin],
        }
    }

    /// True (unpadded) length of row `i`.
    pub fn true_len(&self, i: usize) -> usize {
        self.mask[i * self.seq_len..(i + 1) * self.seq_len]
            .iter()
            .map(|&m| m as usize)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Pad every batch to the same fixed length.
    FixedPad(usize),
    /// Pad each batch only to its own longest sequence, input order kept.
    Dynamic,
    /// Sort by length first so batches mix similar lengths, then pad each
    /// batch to its own max. Output order is recovered through `origin`.
    DynamicSorted,
}

pub fn make_batches(
    corpus: &[Vec<u32>],
    batch_size: usize,
    mode: BatchMode,
    max_seq_len: usize,
) -> Result<Vec<Batch>, RuntimeError> {
    if batch_size == 0 {
        return Err(RuntimeError::ZeroBatchSize);
    }
    let limit = match mode {
        BatchMode::FixedPad(s) => s.min(max_seq_len),
        _ => max_seq_len,
    };
    for (index, seq) in corpus.iter().enumerate() {
        if seq.len() > limit {
            return Err(RuntimeError::SequenceTooLong { index, len: seq.len(), max: limit });
        }
    }

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if mode == BatchMode::DynamicSorted {
        // Stable sort: equal lengths stay in input order.
        order.sort_by_key(|&i| corpus[i].len());
    }

    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let natural = chunk.iter().map(|&i| corpus[i].len()).max().unwrap_or(0).max(1);
        let s = match mode {
            BatchMode::FixedPad(fixed) => fixed,
            _ => natural,
        };
        let mut tokens = Vec::with_capacity(chunk.len() * s);
        let mut mask = Vec::with_capacity(chunk.len() * s);
        for &i in chunk {
            let seq = &corpus[i];
            tokens.extend_from_slice(seq);
            tokens.extend(std::iter::repeat(0).take(s - seq.len()));
            mask.extend(std::iter::repeat(1u8).take(seq.len()));
            mask.extend(std::iter::repeat(0u8).take(s - seq.len()));
        }
        out.push(Batch {
            tokens,
            mask,
            seq_len: s,
            batch: chunk.len(),
            origin: chunk.to_vec(),
        });
    }
    Ok(out)
}

/// MACs one encoder layer spends on one row processed at padded length `s`:
/// 4·s·H·(A·d) for the Q/K/V/O projections, 2·s²·(A·d) for scores and
/// context, 2·s·H·F for the FFN. Pruned geometries enter through A·d and F.
pub fn layer_macs(cfg: &ModelConfig, s: usize) -> u64 {
    let (h, ad, f) = (cfg.hidden as u64, cfg.attn_dim() as u64, cfg.ffn_size as u64);
    let s = s as u64;
    4 * s * h * ad + 2 * s * s * ad + 2 * s * h * f
}

/// Multiply-accumulate count for running `batch` through the model. Counts
/// the arithmetic the kernels actually execute, so every row is charged at
/// the batch's padded length — that is what dynamic batching reduces.
/// Embedding lookup and layer norms contribute no MACs; the pooler adds H²
/// and the classifier H·C per row.
pub fn count_macs(cfg: &ModelConfig, batch: &Batch) -> u64 {
    let per_row = cfg.num_layers as u64 * layer_macs(cfg, batch.seq_len)
        + (cfg.hidden * cfg.hidden) as u64
        + (cfg.hidden * cfg.num_classes) as u64;
    batch.batch as u64 * per_row
}

pub fn count_macs_all(cfg: &ModelConfig, batches: &[Batch]) -> u64 {
    batches.iter().map(|b| count_macs(cfg, b)).sum()
}

/// How inference work is split across cores: N independent instances, each
/// owning T worker threads, with N·T capped by the physical core budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstancePlan {
    pub num_instances: usize,
    pub threads_per_instance: usize,
    pub core_budget: usize,
}

impl InstancePlan {
    pub fn new(num_instances: usize, threads_per_instance: usize, core_budget: usize) -> Result<Self, RuntimeError> {
        let plan = InstancePlan { num_instances, threads_per_instance, core_budget };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.num_instances == 0 || self.threads_per_instance == 0 {
            return Err(RuntimeError::BadPlan("instances and threads must be >= 1".into()));
        }
        if self.num_instances * self.threads_per_instance > self.core_budget {
            return Err(RuntimeError::BadPlan(format!(
                "{} instances x {} threads exceeds the core budget {}",
                self.num_instances, self.threads_per_instance, self.core_budget
            )));
        }
        Ok(())
    }
}

/// Contiguous shard boundaries: the first `len % n` shards get one extra.
fn shard_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    let base = len / n;
    let extra = len % n;
    let mut bounds = Vec::with_capacity(n);
    let mut lo = 0;
    for i in 0..n {
        let hi = lo + base + usize::from(i < extra);
        bounds.push((lo, hi));
        lo = hi;
    }
    bounds
}

#[cfg(target_os = "linux")]
fn pin_to_core(core: usize) -> bool {
    let online = unsafe { libc::sysconf(libc::_SC_NPROCESSORS_ONLN) };
    if online < 1 {
        return false;
    }
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(core % online as usize, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
fn pin_to_core(_core: usize) -> bool {
    false
}

/// Run the corpus through the model under an instance plan. The corpus is
/// split into N contiguous shards; each instance spawns T workers that pin
/// themselves to distinct cores (best-effort; a no-op where the platform has
/// no affinity API) and process single-sequence batches. Instances share
/// only the immutable model and its packing cache, so logits are identical
/// across plans; returns (logits rows in input order, wall seconds).
pub fn run_multi_instance(
    model: &Model,
    corpus: &[Vec<u32>],
    plan: &InstancePlan,
    exec: &ExecPlan,
) -> Result<(Vec<Vec<f32>>, f64), RuntimeError> {
    plan.validate()?;
    let start = Instant::now();
    let n = plan.num_instances;
    let t = plan.threads_per_instance;
    let out: Mutex<Vec<Option<Vec<f32>>>> = Mutex::new(vec![None; corpus.len()]);
    let failure: Mutex<Option<RuntimeError>> = Mutex::new(None);

    thread::scope(|scope| {
        for (ii, &(ilo, ihi)) in shard_bounds(corpus.len(), n).iter().enumerate() {
            let (out, failure) = (&out, &failure);
            scope.spawn(move || {
                thread::scope(|inner| {
                    for (wi, &(wlo, whi)) in shard_bounds(ihi - ilo, t).iter().enumerate() {
                        let (out, failure) = (out, failure);
                        inner.spawn(move || {
                            pin_to_core(ii * t + wi);
                            for idx in ilo + wlo..ilo + whi {
                                let batch = Batch::single(&corpus[idx], idx);
                                match model.forward(&batch, exec, None) {
                                    Ok(logits) => {
                                        out.lock().unwrap()[idx] = Some(logits.row(0).to_vec());
                                    }
                                    Err(e) => {
                                        let mut f = failure.lock().unwrap();
                                        if f.is_none() {
                                            *f = Some(e.into());
                                        }
                                        return;
                                    }
                                }
                            }
                        });
                    }
                });
            });
        }
    });

    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let rows = out
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every corpus row processed"))
        .collect();
    Ok((rows, start.elapsed().as_secs_f64()))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub instances: usize,
    pub threads_per_instance: usize,
    pub seconds: f64,
    pub speedup: f64,
}

/// Time the same corpus under each (N, T) split of the core budget and
/// report speed-up relative to the first row. Ordering across rows is
/// machine-dependent and is reported, never asserted.
pub fn instance_sweep(
    model: &Model,
    corpus: &[Vec<u32>],
    splits: &[(usize, usize)],
    core_budget: usize,
    exec: &ExecPlan,
) -> Result<Vec<SweepRow>, RuntimeError> {
    let mut rows: Vec<SweepRow> = Vec::with_capacity(splits.len());
    for &(n, t) in splits {
        let plan = InstancePlan::new(n, t, core_budget)?;
        let (_, seconds) = run_multi_instance(model, corpus, &plan, exec)?;
        let speedup = rows.first().map_or(1.0, |r0| r0.seconds / seconds);
        rows.push(SweepRow { instances: n, threads_per_instance: t, seconds, speedup });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("instances,threads_per_instance,seconds,speedup\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.3}\n",
            r.instances, r.threads_per_instance, r.seconds, r.speedup
        ));
    }
    s
}

/// Accuracy of the model over labeled data, batched dynamically.
pub fn evaluate(
    model: &Model,
    data: &[Example],
    exec: &ExecPlan,
    batch_size: usize,
) -> Result<Option<f64>, RuntimeError> {
    if data.is_empty() {
        return Ok(None);
    }
    let corpus = token_corpus(data);
    let mut correct = 0usize;
    for batch in make_batches(&corpus, batch_size, BatchMode::Dynamic, model.config.max_seq_len)? {
        let logits = model.forward(&batch, exec, None)?;
        for i in 0..batch.batch {
            correct += usize::from(argmax(logits.row(i)) == data[batch.origin[i]].label as usize);
        }
    }
    Ok(Some(correct as f64 / data.len() as f64))
}

/// One configuration in the ablation chain: a model, an execution plan and a
/// batching mode, timed and scored against the same labeled corpus.
pub struct AblationStage<'a> {
    pub label: String,
    pub model: &'a Model,
    pub exec: ExecPlan,
    pub batch_mode: BatchMode,
    pub batch_size: usize,
    pub instance_plan: Option<InstancePlan>,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub stage: String,
    pub seconds: f64,
    pub stage_speedup: f64,
    pub cumulative_speedup: f64,
    pub accuracy: f64,
    pub mac_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,seconds,stage_speedup,cumulative_speedup,accuracy,mac_ratio\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.3},{:.3},{:.4},{:.6}\n",
                r.stage, r.seconds, r.stage_speedup, r.cumulative_speedup, r.accuracy, r.mac_ratio
            ));
        }
        s
    }

    /// Human-readable table with a reference column: cumulative speed-ups
    /// measured for the same optimization chain on a 40-core server at full
    /// model scale. Display-only context — desk-scale timings are not
    /// expected to match it.
    pub fn printed(&self) -> String {
        const REFERENCE: [f64; 5] = [3.51, 32.64, 73.66, 129.29, 233.87];
        let mut s = format!(
            "{:<28} {:>9} {:>8} {:>8} {:>8} {:>9} {:>9}\n",
            "stage", "seconds", "stage_x", "cumul_x", "acc", "mac_ratio", "reference"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let reference = if i == 0 {
                "1.00x".to_string()
            } else if i - 1 < REFERENCE.len() {
                format!("{:.2}x", REFERENCE[i - 1])
            } else {
                "-".to_string()
            };
            s.push_str(&format!(
                "{:<28} {:>9.4} {:>7.2}x {:>7.2}x {:>8.4} {:>9.4} {:>9}\n",
                r.stage, r.seconds, r.stage_speedup, r.cumulative_speedup, r.accuracy, r.mac_ratio, reference
            ));
        }
        s
    }
}

/// Accuracy and wall time of one stage over a labeled corpus.
fn run_stage(stage: &AblationStage, corpus: &[Vec<u32>], labels: &[u32]) -> Result<(f64, f64, u64), RuntimeError> {
    let start = Instant::now();
    let mut correct = 0usize;
    let macs;
    match &stage.instance_plan {
        Some(plan) => {
            let (rows, _) = run_multi_instance(stage.model, corpus, plan, &stage.exec)?;
            for (row, &label) in rows.iter().zip(labels) {
                correct += usize::from(argmax(row) == label as usize);
            }
            // Multi-instance runs per-sequence batches.
            let batches = make_batches(corpus, 1, BatchMode::Dynamic, stage.model.config.max_seq_len)?;
            macs = count_macs_all(&stage.model.config, &batches);
        }
        None => {
            let batches = make_batches(corpus, stage.batch_size, stage.batch_mode, stage.model.config.max_seq_len)?;
            macs = count_macs_all(&stage.model.config, &batches);
            for batch in &batches {
                let logits = stage.model.forward(batch, &stage.exec, None)?;
                for i in 0..batch.batch {
                    let predicted = argmax(logits.row(i));
                    correct += usize::from(predicted == labels[batch.origin[i]] as usize);
                }
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let accuracy = if labels.is_empty() { f64::NAN } else { correct as f64 / labels.len() as f64 };
    Ok((seconds, accuracy, macs))
}

/// Time each stage of an optimization chain on the same labeled corpus.
/// Row 0 is the baseline: stage and cumulative speed-ups are 1.0 and MAC
/// ratio is relative to it.
pub fn run_ablation(
    stages: &[AblationStage],
    corpus: &[Vec<u32>],
    labels: &[u32],
) -> Result<BenchReport, RuntimeError> {
    let mut rows: Vec<BenchRow> = Vec::with_capacity(stages.len());
    let mut baseline = (0.0f64, 0u64);
    let mut prev_seconds = 0.0f64;
    for (i, stage) in stages.iter().enumerate() {
        let (seconds, accuracy, macs) = run_stage(stage, corpus, labels)?;
        if i == 0 {
            baseline = (seconds, macs);
        }
        rows.push(BenchRow {
            stage: stage.label.clone(),
            seconds,
            stage_speedup: if i == 0 { 1.0 } else { prev_seconds / seconds },
            cumulative_speedup: if i == 0 { 1.0 } else { baseline.0 / seconds },
            accuracy,
            mac_ratio: macs as f64 / baseline.1 as f64,
        });
        prev_seconds = seconds;
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::MaskSet;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn corpus_of_lengths(lengths: &[usize]) -> Vec<Vec<u32>> {
        lengths.iter().map(|&l| (0..l as u32).collect()).collect()
    }

    #[test]
    fn dynamic_pads_to_batch_max() {
        let batches = make_batches(&corpus_of_lengths(&[5, 3, 8]), 3, BatchMode::Dynamic, 128).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].seq_len, 8);
        assert_eq!(batches[0].batch, 3);
        assert_eq!(batches[0].true_len(0), 5);
        assert_eq!(batches[0].true_len(1), 3);
        assert_eq!(batches[0].true_len(2), 8);
    }

    #[test]
    fn fixed_pad_uses_fixed_length() {
        let batches = make_batches(&corpus_of_lengths(&[5, 3, 8]), 3, BatchMode::FixedPad(128), 128).unwrap();
        assert_eq!(batches[0].seq_len, 128);
    }

    #[test]
    fn sorted_batching_restores_order_via_origin() {
        let batches = make_batches(&corpus_of_lengths(&[8, 1, 8, 1]), 2, BatchMode::DynamicSorted, 128).unwrap();
        let mut widths: Vec<usize> = batches.iter().map(|b| b.seq_len).collect();
        widths.sort_unstable();
        assert_eq!(widths, vec![1, 8]);
        // Every corpus index appears exactly once and each row's content
        // matches the sequence at its origin.
        let mut seen = vec![false; 4];
        for b in &batches {
            for (row, &orig) in b.origin.iter().enumerate() {
                assert!(!seen[orig]);
                seen[orig] = true;
                let expect = corpus_of_lengths(&[8, 1, 8, 1])[orig].clone();
                assert_eq!(&b.tokens[row * b.seq_len..row * b.seq_len + expect.len()], &expect[..]);
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn overlong_sequence_rejected_with_index() {
        let err = make_batches(&corpus_of_lengths(&[4, 300]), 2, BatchMode::Dynamic, 128).unwrap_err();
        match err {
            RuntimeError::SequenceTooLong { index, len, max } => {
                assert_eq!((index, len, max), (1, 300, 128));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_corpus_gives_no_batches() {
        assert!(make_batches(&[], 4, BatchMode::Dynamic, 128).unwrap().is_empty());
    }

    // The formula's own arithmetic for one layer, s=1, H=4, F=8:
    // 4*1*4*4 + 2*1*1*4 + 2*1*4*8 = 64 + 8 + 64.
    #[test]
    fn layer_mac_formula_value() {
        let cfg = ModelConfig::new(1, 4, 1, 8, 10, 16, 2).unwrap();
        assert_eq!(layer_macs(&cfg, 1), 136);
    }

    #[test]
    fn macs_superlinear_in_sequence_length() {
        let cfg = ModelConfig::new(2, 32, 4, 64, 10, 256, 2).unwrap();
        assert!(layer_macs(&cfg, 16) > 2 * layer_macs(&cfg, 8));
    }

    #[test]
    fn halving_ffn_halves_only_the_ffn_term() {
        let cfg = ModelConfig::new(1, 32, 4, 64, 10, 64, 2).unwrap();
        let mut half = cfg.clone();
        half.ffn_size = 32;
        let s = 16u64;
        let ffn_full = 2 * s * 32 * 64;
        assert_eq!(layer_macs(&cfg, 16) - layer_macs(&half, 16), ffn_full / 2);
    }

    // count_macs must equal the multiplies the kernels execute. Enumerate
    // the GEMM shapes of the forward pass on a tiny config and compare.
    #[test]
    fn mac_count_matches_enumerated_kernel_shapes() {
        let cfg = ModelConfig::new(1, 4, 2, 8, 10, 16, 3).unwrap();
        let batch = Batch {
            tokens: vec![1, 2, 3, 4, 5, 0],
            mask: vec![1, 1, 1, 1, 1, 0],
            seq_len: 3,
            batch: 2,
            origin: vec![0, 1],
        };
        let (b, s) = (batch.batch as u64, batch.seq_len as u64);
        let (h, ad, d, a, f, c) = (4u64, 4u64, 2u64, 2u64, 8u64, 3u64);
        let mut macs = 0u64;
        // Per layer: QKV and output projections over all b*s rows.
        macs += 4 * (b * s) * h * ad;
        // Per example, per head: scores s x d x s and context s x s x d.
        macs += b * a * (s * d * s + s * s * d);
        // FFN up and down projections.
        macs += (b * s) * h * f + (b * s) * f * h;
        // Pooler (first token only) and classifier.
        macs += b * h * h + b * h * c;
        assert_eq!(count_macs(&cfg, &batch), macs);
    }

    #[test]
    fn shards_are_contiguous_and_balanced() {
        assert_eq!(shard_bounds(10, 2), vec![(0, 5), (5, 10)]);
        assert_eq!(shard_bounds(10, 3), vec![(0, 4), (4, 7), (7, 10)]);
        assert_eq!(shard_bounds(2, 4), vec![(0, 1), (1, 2), (2, 2), (2, 2)]);
    }

    #[test]
    fn plan_budget_enforced() {
        assert!(InstancePlan::new(4, 4, 8).is_err());
        assert!(InstancePlan::new(4, 2, 8).is_ok());
        assert!(InstancePlan::new(0, 1, 8).is_err());
    }

    fn toy_model(seed: u64) -> Model {
        Model::random(ModelConfig::new(2, 32, 4, 64, 50, 32, 3).unwrap(), seed).unwrap()
    }

    fn random_corpus(n: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(2..=16);
                (0..len).map(|_| rng.gen_range(0..vocab)).collect()
            })
            .collect()
    }

    #[test]
    fn multi_instance_plans_agree_exactly() {
        let model = toy_model(11);
        let corpus = random_corpus(24, 50, 7);
        let exec = ExecPlan::f32_fused();
        let (base, _) = run_multi_instance(&model, &corpus, &InstancePlan::new(1, 8, 8).unwrap(), &exec).unwrap();
        for (n, t) in [(2, 4), (4, 2), (8, 1)] {
            let (rows, _) =
                run_multi_instance(&model, &corpus, &InstancePlan::new(n, t, 8).unwrap(), &exec).unwrap();
            assert_eq!(rows, base, "plan ({n},{t}) diverged");
        }
    }

    #[test]
    fn multi_instance_matches_sequential_forward() {
        let model = toy_model(5);
        let corpus = random_corpus(10, 50, 9);
        let exec = ExecPlan::f32_unfused();
        let (rows, _) = run_multi_instance(&model, &corpus, &InstancePlan::new(2, 2, 4).unwrap(), &exec).unwrap();
        for (i, seq) in corpus.iter().enumerate() {
            let logits = model.forward(&Batch::single(seq, i), &exec, None).unwrap();
            assert_eq!(rows[i], logits.row(0));
        }
    }

    #[test]
    fn dynamic_batching_logits_match_fixed_pad() {
        let model = toy_model(3);
        let corpus = random_corpus(16, 50, 4);
        let exec = ExecPlan::f32_unfused();
        let masks: Option<&MaskSet> = None;
        let mut by_mode: Vec<Vec<Vec<f32>>> = Vec::new();
        for mode in [BatchMode::FixedPad(32), BatchMode::Dynamic, BatchMode::DynamicSorted] {
            let mut rows = vec![Vec::new(); corpus.len()];
            for batch in make_batches(&corpus, 4, mode, 32).unwrap() {
                let logits = model.forward(&batch, &exec, masks).unwrap();
                for i in 0..batch.batch {
                    rows[batch.origin[i]] = logits.row(i).to_vec();
                }
            }
            by_mode.push(rows);
        }
        for rows in &by_mode[1..] {
            for (a, b) in rows.iter().zip(&by_mode[0]) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn sweep_and_report_shapes() {
        let model = toy_model(2);
        let corpus = random_corpus(8, 50, 1);
        let rows = instance_sweep(
            &model,
            &corpus,
            &[(1, 8), (2, 4), (4, 2), (8, 1)],
            8,
            &ExecPlan::f32_fused(),
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].speedup, 1.0);
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("instances,threads_per_instance,seconds,speedup\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn ablation_baseline_row_is_unity() {
        let model = toy_model(6);
        let corpus = random_corpus(12, 50, 2);
        let labels: Vec<u32> = (0..12).map(|i| (i % 3) as u32).collect();
        let stages = vec![
            AblationStage {
                label: "baseline_fixed_pad_f32".into(),
                model: &model,
                exec: ExecPlan::f32_unfused(),
                batch_mode: BatchMode::FixedPad(32),
                batch_size: 4,
                instance_plan: None,
            },
            AblationStage {
                label: "dynamic_batching".into(),
                model: &model,
                exec: ExecPlan::f32_unfused(),
                batch_mode: BatchMode::Dynamic,
                batch_size: 4,
                instance_plan: None,
            },
        ];
        let report = run_ablation(&stages, &corpus, &labels).unwrap();
        assert_eq!(report.rows[0].cumulative_speedup, 1.0);
        assert_eq!(report.rows[0].stage_speedup, 1.0);
        assert_eq!(report.rows[0].mac_ratio, 1.0);
        assert!(report.rows[1].mac_ratio < 1.0);
        let csv = report.to_csv();
        assert!(csv.starts_with("stage,seconds,stage_speedup,cumulative_speedup,accuracy,mac_ratio\n"));
        assert!(report.printed().contains("reference"));
    }
}
