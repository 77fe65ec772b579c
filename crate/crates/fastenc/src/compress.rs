//! Compression pipeline: first-order head/FFN-unit importance scoring,
//! structured pruning with uniform per-layer keep ratios and weight
//! reconnection, soft-cross-entropy distillation, and the prune/accuracy
//! trade-off sweep.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, LossKind};
use crate::encoder::{EncoderError, ExecPlan, LayerWeights, MaskSet, Model, ModelConfig};
use crate::runtime::{
    count_macs_all, evaluate, make_batches, token_corpus, BatchMode, Example, RuntimeError,
};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("keep ratio {0} outside (0, 1]")]
    BadRatio(f64),
    #[error("kept-set invalid: {0}")]
    BadKeepSet(String),
    #[error("teacher and student disagree on {0}")]
    TeacherMismatch(String),
    #[error("distillation loss requires a teacher model")]
    MissingTeacher,
    #[error("logit matrices have different shapes: {0}x{1} vs {2}x{3}")]
    LogitShape(usize, usize, usize, usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f32),
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// Accumulated absolute mask gradients: how much the loss moves when a head
/// or FFN unit is attenuated. Absolute values are taken per batch, then
/// summed across batches.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    pub heads: Vec<Vec<f64>>,
    pub ffn_units: Vec<Vec<f64>>,
    pub examples_seen: usize,
}

const SCORING_BATCH: usize = 8;

/// Score every head and FFN unit by running the backward pass with all
/// masks at 1 and accumulating |mask gradient| batch by batch. With the
/// distillation loss a teacher is required (the model's own logits would
/// give identically zero gradients).
pub fn compute_importance(
    model: &Model,
    data: &[Example],
    loss_kind: LossKind,
    teacher: Option<&Model>,
) -> Result<ImportanceScores, CompressError> {
    if data.is_empty() {
        return Err(CompressError::EmptyDataset);
    }
    if matches!(loss_kind, LossKind::KdSoftCe { .. }) && teacher.is_none() {
        return Err(CompressError::MissingTeacher);
    }
    let cfg = &model.config;
    let masks = MaskSet::ones(cfg);
    let mut scores = ImportanceScores {
        heads: vec![vec![0.0; cfg.num_heads]; cfg.num_layers],
        ffn_units: vec![vec![0.0; cfg.ffn_size]; cfg.num_layers],
        examples_seen: 0,
    };
    let corpus = token_corpus(data);
    for batch in make_batches(&corpus, SCORING_BATCH, BatchMode::Dynamic, cfg.max_seq_len)? {
        let labels: Vec<u32> = batch.origin.iter().map(|&i| data[i].label).collect();
        let teacher_logits = match teacher {
            Some(t) => Some(t.forward(&batch, &ExecPlan::f32_unfused(), None)?),
            None => None,
        };
        let (_, g) = autodiff::backward(
            cfg,
            &model.weights,
            &batch,
            Some(&labels),
            teacher_logits.as_ref(),
            loss_kind,
            &masks,
        )?;
        for li in 0..cfg.num_layers {
            for (acc, &gm) in scores.heads[li].iter_mut().zip(&g.head_mask[li]) {
                *acc += gm.abs() as f64;
            }
            for (acc, &gm) in scores.ffn_units[li].iter_mut().zip(&g.ffn_mask[li]) {
                *acc += gm.abs() as f64;
            }
        }
        scores.examples_seen += batch.batch;
    }
    Ok(scores)
}

/// Uniform keep ratios applied to every layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneSpec {
    pub head_keep_ratio: f64,
    pub ffn_keep_ratio: f64,
}

impl PruneSpec {
    pub fn new(head_keep_ratio: f64, ffn_keep_ratio: f64) -> Result<Self, CompressError> {
        for r in [head_keep_ratio, ffn_keep_ratio] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(CompressError::BadRatio(r));
            }
        }
        Ok(PruneSpec { head_keep_ratio, ffn_keep_ratio })
    }

    /// Kept count at ratio `r` out of `n`: floor, but never below one.
    pub fn kept_count(n: usize, r: f64) -> usize {
        ((n as f64 * r).floor() as usize).clamp(1, n)
    }
}

/// Per-layer indices surviving the prune, ascending within each layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepSets {
    pub heads: Vec<Vec<usize>>,
    pub ffn_units: Vec<Vec<usize>>,
}

fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Descending by score; equal scores fall back to the lower index.
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = idx.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Top-k selection per layer at the spec's uniform ratios.
pub fn select_keep(scores: &ImportanceScores, spec: &PruneSpec) -> KeepSets {
    let kh = PruneSpec::kept_count(scores.heads[0].len(), spec.head_keep_ratio);
    let kf = PruneSpec::kept_count(scores.ffn_units[0].len(), spec.ffn_keep_ratio);
    KeepSets {
        heads: scores.heads.iter().map(|s| top_k(s, kh)).collect(),
        ffn_units: scores.ffn_units.iter().map(|s| top_k(s, kf)).collect(),
    }
}

fn check_kept(kept: &[Vec<usize>], layers: usize, limit: usize, what: &str) -> Result<usize, CompressError> {
    if kept.len() != layers {
        return Err(CompressError::BadKeepSet(format!(
            "{what}: {} layers of indices for {layers} layers",
            kept.len()
        )));
    }
    let count = kept[0].len();
    for (li, l) in kept.iter().enumerate() {
        if l.len() != count || l.is_empty() {
            return Err(CompressError::BadKeepSet(format!(
                "{what}: layer {li} keeps {} entries, expected {count} >= 1",
                l.len()
            )));
        }
        for w in l.windows(2) {
            if w[1] <= w[0] {
                return Err(CompressError::BadKeepSet(format!("{what}: layer {li} not strictly ascending")));
            }
        }
        if *l.last().unwrap() >= limit {
            return Err(CompressError::BadKeepSet(format!("{what}: layer {li} index out of range")));
        }
    }
    Ok(count)
}

fn select_cols(m: &Matrix<f32>, cols: &[usize]) -> Matrix<f32> {
    let mut out = Matrix::zeros(m.rows(), cols.len());
    for r in 0..m.rows() {
        let src = m.row(r);
        for (j, &c) in cols.iter().enumerate() {
            out.set(r, j, src[c]);
        }
    }
    out
}

fn select_rows(m: &Matrix<f32>, rows: &[usize]) -> Matrix<f32> {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Rebuild the model with only the kept heads and FFN units: weight slices
/// are regrouped into contiguous smaller tensors, so dense kernels shrink
/// instead of multiplying by zero. Forward output equals the masked model's
/// by construction.
pub fn apply_prune(model: &Model, kept: &KeepSets) -> Result<Model, CompressError> {
    let cfg = &model.config;
    let kh = check_kept(&kept.heads, cfg.num_layers, cfg.num_heads, "heads")?;
    let kf = check_kept(&kept.ffn_units, cfg.num_layers, cfg.ffn_size, "ffn units")?;
    let d = cfg.head_dim;

    let mut new_cfg = cfg.clone();
    new_cfg.num_heads = kh;
    new_cfg.ffn_size = kf;

    let mut weights = model.weights.clone();
    weights.layers.clear();
    for (li, lw) in model.weights.layers.iter().enumerate() {
        let head_cols: Vec<usize> =
            kept.heads[li].iter().flat_map(|&h| h * d..(h + 1) * d).collect();
        let units = &kept.ffn_units[li];
        weights.layers.push(LayerWeights {
            wq: select_cols(&lw.wq, &head_cols),
            bq: pick(&lw.bq, &head_cols),
            wk: select_cols(&lw.wk, &head_cols),
            bk: pick(&lw.bk, &head_cols),
            wv: select_cols(&lw.wv, &head_cols),
            bv: pick(&lw.bv, &head_cols),
            wo: select_rows(&lw.wo, &head_cols),
            bo: lw.bo.clone(),
            ln_attn_gamma: lw.ln_attn_gamma.clone(),
            ln_attn_beta: lw.ln_attn_beta.clone(),
            w1: select_cols(&lw.w1, units),
            b1: pick(&lw.b1, units),
            w2: select_rows(&lw.w2, units),
            b2: lw.b2.clone(),
            ln_ffn_gamma: lw.ln_ffn_gamma.clone(),
            ln_ffn_beta: lw.ln_ffn_beta.clone(),
        });
    }
    // Sliced weights invalidate any pre-quantized payloads.
    Ok(Model::new(new_cfg, weights)?)
}

/// The mask equivalent of a kept-set: 1 on survivors, 0 elsewhere.
pub fn masks_from_kept(cfg: &ModelConfig, kept: &KeepSets) -> MaskSet {
    let mut m = MaskSet::ones(cfg);
    for li in 0..cfg.num_layers {
        for h in 0..cfg.num_heads {
            if !kept.heads[li].contains(&h) {
                m.head[li][h] = 0.0;
            }
        }
        for u in 0..cfg.ffn_size {
            if !kept.ffn_units[li].contains(&u) {
                m.ffn[li][u] = 0.0;
            }
        }
    }
    m
}

/// Soft cross-entropy between temperature-softened teacher and student
/// distributions, averaged over rows, with its gradient w.r.t. the student
/// logits: (softmax(s/T) - softmax(t/T)) / (T * N).
pub fn kd_loss_and_grad(
    student_logits: &Matrix<f32>,
    teacher_logits: &Matrix<f32>,
    temperature: f32,
) -> Result<(f32, Matrix<f32>), CompressError> {
    if temperature <= 0.0 {
        return Err(CompressError::BadTemperature(temperature));
    }
    let (n, c) = (student_logits.rows(), student_logits.cols());
    if teacher_logits.rows() != n || teacher_logits.cols() != c {
        return Err(CompressError::LogitShape(n, c, teacher_logits.rows(), teacher_logits.cols()));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut total = 0.0f64;
    for r in 0..n {
        let log_p = log_softmax_scaled(student_logits.row(r), temperature);
        let log_q = log_softmax_scaled(teacher_logits.row(r), temperature);
        let g = grad.row_mut(r);
        for j in 0..c {
            let q = log_q[j].exp();
            total -= (q * log_p[j]) as f64;
            g[j] = (log_p[j].exp() - q) / (temperature * n as f32);
        }
    }
    Ok((total as f32 / n as f32, grad))
}

pub fn kd_loss(
    student_logits: &Matrix<f32>,
    teacher_logits: &Matrix<f32>,
    temperature: f32,
) -> Result<f32, CompressError> {
    kd_loss_and_grad(student_logits, teacher_logits, temperature).map(|(l, _)| l)
}

fn log_softmax_scaled(row: &[f32], t: f32) -> Vec<f32> {
    let scaled: Vec<f32> = row.iter().map(|&v| v / t).collect();
    let max = scaled.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let log_z = max + scaled.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
    scaled.iter().map(|&v| v - log_z).collect()
}

/// Hyperparameters for the toy SGD loops.
#[derive(Debug, Clone, Copy)]
pub struct KDConfig {
    pub temperature: f32,
    pub learning_rate: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for KDConfig {
    fn default() -> Self {
        KDConfig {
            temperature: 1.0,
            learning_rate: 0.1,
            steps: 1000,
            batch_size: 8,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl KDConfig {
    fn validate(&self) -> Result<(), CompressError> {
        if self.temperature <= 0.0 {
            return Err(CompressError::BadTemperature(self.temperature));
        }
        if self.learning_rate < 0.0 {
            return Err(CompressError::BadHyper(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(CompressError::BadHyper("batch size 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CompressError::BadHyper(format!("momentum {}", self.momentum)));
        }
        Ok(())
    }
}

enum Objective<'a> {
    SoftCe { teacher: &'a Model },
    HardCe,
}

/// Seeded SGD-with-momentum loop shared by distillation and the plain
/// cross-entropy trainer used to make toy teachers.
fn fit(
    mut model: Model,
    data: &[Example],
    cfg: &KDConfig,
    objective: Objective,
) -> Result<(Model, Vec<f32>), CompressError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CompressError::EmptyDataset);
    }
    let masks = MaskSet::ones(&model.config);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len(); // force a shuffle on the first step
    let mut velocity: Vec<Vec<f32>> = model
        .weights
        .param_slices_mut()
        .iter()
        .map(|(_, s)| vec![0.0; s.len()])
        .collect();
    let mut losses = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let chunk = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += cfg.batch_size;
        let corpus: Vec<Vec<u32>> = chunk.iter().map(|&i| data[i].tokens.clone()).collect();
        let batch = make_batches(&corpus, cfg.batch_size, BatchMode::Dynamic, model.config.max_seq_len)?
            .pop()
            .expect("nonempty chunk");
        let labels: Vec<u32> = chunk.iter().map(|&i| data[i].label).collect();

        let (loss, grads) = match &objective {
            Objective::SoftCe { teacher } => {
                // Teacher logits over the same padded batch, computed fresh.
                let mut remapped = batch.clone();
                remapped.origin = chunk.to_vec();
                let t_logits = teacher.forward(&remapped, &ExecPlan::f32_unfused(), None)?;
                autodiff::backward(
                    &model.config,
                    &model.weights,
                    &batch,
                    None,
                    Some(&t_logits),
                    LossKind::KdSoftCe { temperature: cfg.temperature },
                    &masks,
                )?
            }
            Objective::HardCe => autodiff::backward(
                &model.config,
                &model.weights,
                &batch,
                Some(&labels),
                None,
                LossKind::CrossEntropy,
                &masks,
            )?,
        };
        losses.push(loss);

        let mut grad_params = grads.params;
        let grad_slices = grad_params.param_slices_mut();
        for ((vel, (_, param)), (_, grad)) in velocity
            .iter_mut()
            .zip(model.weights.param_slices_mut())
            .zip(grad_slices)
        {
            for i in 0..param.len() {
                vel[i] = cfg.momentum * vel[i] + grad[i];
                param[i] -= cfg.learning_rate * vel[i];
            }
        }
    }
    // Weights changed in place; any cached packs or pre-quantized payloads
    // are stale.
    let trained = Model::new(model.config, model.weights)?;
    Ok((trained, losses))
}

/// Knowledge distillation: SGD on the soft cross-entropy between the frozen
/// teacher's logits and the student's, teacher logits computed on the fly.
/// Returns the trained student and the per-step loss curve; bit-for-bit
/// deterministic for a fixed seed.
pub fn distill(
    teacher: &Model,
    student: Model,
    data: &[Example],
    cfg: &KDConfig,
) -> Result<(Model, Vec<f32>), CompressError> {
    if teacher.config.num_classes != student.config.num_classes {
        return Err(CompressError::TeacherMismatch(format!(
            "class count: {} vs {}",
            teacher.config.num_classes, student.config.num_classes
        )));
    }
    if teacher.config.vocab != student.config.vocab {
        return Err(CompressError::TeacherMismatch(format!(
            "vocab: {} vs {}",
            teacher.config.vocab, student.config.vocab
        )));
    }
    fit(student, data, cfg, Objective::SoftCe { teacher })
}

/// Plain cross-entropy SGD; used to fit toy teachers for the pipeline tests.
pub fn train(model: Model, data: &[Example], cfg: &KDConfig) -> Result<(Model, Vec<f32>), CompressError> {
    fit(model, data, cfg, Objective::HardCe)
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub head_ratio: f64,
    pub ffn_ratio: f64,
    pub macs: u64,
    pub mac_ratio: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

/// Keep-ratio grid covering full strength down to quarter width, including
/// the half-heads operating points.
pub fn default_ratio_grid() -> Vec<(f64, f64)> {
    let ratios = [1.0, 0.75, 0.5, 0.25];
    let mut grid = Vec::with_capacity(16);
    for &h in &ratios {
        for &f in &ratios {
            grid.push((h, f));
        }
    }
    grid
}

/// Score once, then prune at every grid point and measure MACs and accuracy
/// over the dataset: the speed/accuracy trade-off curve.
pub fn sweep_prune_tradeoff(
    model: &Model,
    data: &[Example],
    grid: &[(f64, f64)],
) -> Result<Vec<SweepPoint>, CompressError> {
    if data.is_empty() {
        return Err(CompressError::EmptyDataset);
    }
    let scores = compute_importance(model, data, LossKind::CrossEntropy, None)?;
    let corpus = token_corpus(data);
    let exec = ExecPlan::f32_fused();
    let batches = make_batches(&corpus, SCORING_BATCH, BatchMode::Dynamic, model.config.max_seq_len)?;
    let base_macs = count_macs_all(&model.config, &batches);

    let mut out = Vec::with_capacity(grid.len());
    for &(head_ratio, ffn_ratio) in grid {
        let spec = PruneSpec::new(head_ratio, ffn_ratio)?;
        let pruned = apply_prune(model, &select_keep(&scores, &spec))?;
        let macs = count_macs_all(&pruned.config, &batches);
        let start = std::time::Instant::now();
        let accuracy = evaluate(&pruned, data, &exec, SCORING_BATCH)?.unwrap_or(f64::NAN);
        out.push(SweepPoint {
            head_ratio,
            ffn_ratio,
            macs,
            mac_ratio: macs as f64 / base_macs as f64,
            accuracy,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("head_ratio,ffn_ratio,mac_ratio,accuracy,seconds\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{:.6},{:.4},{:.6}\n",
            p.head_ratio, p.ffn_ratio, p.mac_ratio, p.accuracy, p.seconds
        ));
    }
    s
}

/// Two-class token task where the classes draw from disjoint vocabulary
/// halves: separable enough that tiny encoders fit it, with a pinch of
/// crossover noise so accuracy is not trivially 1.0 at step zero.
pub fn synthetic_task(n: usize, vocab: usize, max_len: usize, seed: u64) -> Vec<Example> {
    assert!(vocab >= 8 && max_len >= 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = vocab as u32 / 2;
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..2u32);
            let len = rng.gen_range(4..=max_len);
            let tokens = (0..len)
                .map(|_| {
                    let (lo, hi) = if (label == 0) != rng.gen_bool(0.05) {
                        (1, half)
                    } else {
                        (half, vocab as u32)
                    };
                    rng.gen_range(lo..hi)
                })
                .collect();
            Example { tokens, label }
        })
        .collect()
}
