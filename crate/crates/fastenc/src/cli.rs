//! Command-line driver: generate, evaluate, prune, distill, quantize and
//! benchmark models. Exit codes: 0 success, 1 usage error, 2 data/format
//! error, 3 internal invariant violation.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::LossKind;
use crate::compress::{
    self, apply_prune, default_ratio_grid, distill, select_keep, sweep_prune_tradeoff, KDConfig,
    PruneSpec,
};
use crate::encoder::{compare_plans, ExecPlan, Model, ModelConfig};
use crate::model_io::{
    load_dataset, load_model, quantize_model, save_model, validate_dataset, ModelIoError,
};
use crate::runtime::{
    count_macs_all, evaluate, instance_sweep, make_batches, run_multi_instance, sweep_csv,
    token_corpus, AblationStage, BatchMode, Example, InstancePlan,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Parser)]
#[command(name = "fastenc", version, about = "Encoder-classifier inference and compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded random model file
    Gen(GenArgs),
    /// Evaluate a model over a dataset
    Eval(EvalArgs),
    /// Structured pruning of heads and FFN units
    Prune(PruneArgs),
    /// Distill a teacher into a freshly initialized student
    Distill(DistillArgs),
    /// Convert a model's weight matrices to stored int8
    Quantize(QuantizeArgs),
    /// Benchmark suites: ablation chain, instance sweep, prune sweep
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ffn: usize,
    #[arg(long, default_value_t = 1000)]
    vocab: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 128)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    I8,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BatchModeArg {
    Fixed,
    Dynamic,
    Sorted,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
    #[arg(long, value_enum, default_value_t = BatchModeArg::Dynamic)]
    batch_mode: BatchModeArg,
    /// Single-sequence batches by default: the latency-optimal CPU setting
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Physical core budget that instances x threads may not exceed
    #[arg(long, default_value_t = 8)]
    cores: usize,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    keep_heads: f64,
    #[arg(long, default_value_t = 0.5)]
    keep_ffn: f64,
    /// Recompute importance scores even if a cached score file exists
    #[arg(long)]
    rescore: bool,
    /// Re-distill the pruned model with the unpruned model as teacher
    #[arg(long)]
    redistill: bool,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    /// Student geometry as layers,hidden,heads,ffn
    #[arg(long)]
    student_geometry: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 1.0)]
    temp: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Ablation,
    Instances,
    PruneSweep,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 8)]
    cores: usize,
    /// CSV report destination
    #[arg(long)]
    out: PathBuf,
}

enum CmdError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl From<ModelIoError> for CmdError {
    fn from(e: ModelIoError) -> Self {
        CmdError::Data(e.to_string())
    }
}

impl From<crate::encoder::EncoderError> for CmdError {
    fn from(e: crate::encoder::EncoderError) -> Self {
        CmdError::Data(e.to_string())
    }
}

impl From<crate::runtime::RuntimeError> for CmdError {
    fn from(e: crate::runtime::RuntimeError) -> Self {
        CmdError::Data(e.to_string())
    }
}

impl From<crate::compress::CompressError> for CmdError {
    fn from(e: crate::compress::CompressError) -> Self {
        CmdError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Data(e.to_string())
    }
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CmdError::Data(msg)) => {
            eprintln!("error: {msg}");
            EXIT_DATA
        }
        Err(CmdError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            EXIT_INTERNAL
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), CmdError> {
    let cfg = ModelConfig::new(a.layers, a.hidden, a.heads, a.ffn, a.vocab, a.max_seq_len, a.classes)
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    let model = Model::random(cfg, a.seed).map_err(|e| CmdError::Internal(e.to_string()))?;
    save_model(&model, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn load_validated(model_path: &PathBuf, data_path: &PathBuf) -> Result<(Model, Vec<Example>), CmdError> {
    let model = load_model(model_path)?;
    let data = load_dataset(data_path)?;
    validate_dataset(&data, &model.config)?;
    Ok((model, data))
}

fn batch_mode(mode: BatchModeArg, max_seq_len: usize) -> BatchMode {
    match mode {
        BatchModeArg::Fixed => BatchMode::FixedPad(max_seq_len),
        BatchModeArg::Dynamic => BatchMode::Dynamic,
        BatchModeArg::Sorted => BatchMode::DynamicSorted,
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), CmdError> {
    let plan = InstancePlan::new(a.instances, a.threads, a.cores)
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    let (model, data) = load_validated(&a.model, &a.data)?;
    if data.is_empty() {
        println!("accuracy: n/a (empty dataset)");
        return Ok(());
    }
    let mode = batch_mode(a.batch_mode, model.config.max_seq_len);
    let corpus = token_corpus(&data);
    let batches = make_batches(&corpus, a.batch_size, mode, model.config.max_seq_len)?;
    let macs = count_macs_all(&model.config, &batches);

    let run_one = |exec: &ExecPlan, label: &str| -> Result<(), CmdError> {
        let start = std::time::Instant::now();
        let accuracy = if a.instances > 1 {
            let (rows, _) = run_multi_instance(&model, &corpus, &plan, exec)?;
            let correct: usize = rows
                .iter()
                .zip(&data)
                .map(|(r, e)| usize::from(crate::encoder::argmax(r) == e.label as usize))
                .sum();
            correct as f64 / data.len() as f64
        } else {
            evaluate(&model, &data, exec, a.batch_size)?.unwrap_or(f64::NAN)
        };
        let seconds = start.elapsed().as_secs_f64();
        println!("{label}: accuracy {accuracy:.4}, {seconds:.4} s, {macs} MACs");
        Ok(())
    };

    match a.precision {
        PrecisionArg::F32 => run_one(&ExecPlan::f32_fused(), "f32")?,
        PrecisionArg::I8 => run_one(&ExecPlan::i8_fused(), "i8")?,
        PrecisionArg::Both => {
            run_one(&ExecPlan::f32_fused(), "f32")?;
            run_one(&ExecPlan::i8_fused(), "i8")?;
            let report = compare_plans(&model, &batches, &ExecPlan::f32_fused(), &ExecPlan::i8_fused())?;
            println!(
                "f32-vs-i8: argmax agreement {:.4}, mean cosine {:.6}",
                report.agreement(),
                report.mean_cosine()
            );
        }
    }
    Ok(())
}

fn cmd_prune(a: PruneArgs) -> Result<(), CmdError> {
    let spec = PruneSpec::new(a.keep_heads, a.keep_ffn).map_err(|e| CmdError::Usage(e.to_string()))?;
    let (model, data) = load_validated(&a.model, &a.data)?;

    // Importance scores are cached beside the model; --rescore ignores and
    // rewrites the cache.
    let score_path = a.model.with_extension("scores.json");
    let scores = if !a.rescore && score_path.exists() {
        let text = std::fs::read_to_string(&score_path)?;
        let (heads, ffn_units): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
            serde_json::from_str(&text).map_err(|e| CmdError::Data(format!("score cache: {e}")))?;
        if heads.len() != model.config.num_layers
            || heads.iter().any(|l| l.len() != model.config.num_heads)
            || ffn_units.iter().any(|l| l.len() != model.config.ffn_size)
        {
            return Err(CmdError::Data(format!(
                "score cache {} does not match the model; rerun with --rescore",
                score_path.display()
            )));
        }
        compress::ImportanceScores { heads, ffn_units, examples_seen: data.len() }
    } else {
        let scores = compress::compute_importance(&model, &data, LossKind::CrossEntropy, None)?;
        let text = serde_json::to_string(&(&scores.heads, &scores.ffn_units))
            .map_err(|e| CmdError::Internal(e.to_string()))?;
        std::fs::write(&score_path, text)?;
        scores
    };

    let kept = select_keep(&scores, &spec);
    let mut pruned = apply_prune(&model, &kept)?;
    if a.redistill {
        let kd = KDConfig {
            steps: a.steps,
            learning_rate: a.lr,
            seed: a.seed,
            ..KDConfig::default()
        };
        let (student, _) = distill(&model, pruned, &data, &kd)?;
        pruned = student;
    }
    save_model(&pruned, &a.out)?;
    println!(
        "wrote {} ({} heads, {} ffn units per layer)",
        a.out.display(),
        pruned.config.num_heads,
        pruned.config.ffn_size
    );
    Ok(())
}

fn cmd_distill(a: DistillArgs) -> Result<(), CmdError> {
    let geometry: Vec<usize> = a
        .student_geometry
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CmdError::Usage(format!("student geometry: {e}")))?;
    let [layers, hidden, heads, ffn] = geometry[..] else {
        return Err(CmdError::Usage(
            "student geometry must be layers,hidden,heads,ffn".into(),
        ));
    };
    let (teacher, data) = load_validated(&a.teacher, &a.data)?;
    let student_cfg = ModelConfig::new(
        layers,
        hidden,
        heads,
        ffn,
        teacher.config.vocab,
        teacher.config.max_seq_len,
        teacher.config.num_classes,
    )
    .map_err(|e| CmdError::Usage(e.to_string()))?;
    let student = Model::random(student_cfg, a.seed).map_err(|e| CmdError::Internal(e.to_string()))?;
    let kd = KDConfig {
        temperature: a.temp,
        learning_rate: a.lr,
        steps: a.steps,
        seed: a.seed,
        ..KDConfig::default()
    };
    let (trained, losses) = distill(&teacher, student, &data, &kd)?;
    save_model(&trained, &a.out)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    let curve_path = a.out.with_extension("loss.csv");
    std::fs::write(&curve_path, curve)?;
    println!("wrote {} and {}", a.out.display(), curve_path.display());
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> Result<(), CmdError> {
    let model = load_model(&a.model)?;
    let quantized = quantize_model(&model)?;
    save_model(&quantized, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), CmdError> {
    let (model, data) = load_validated(&a.model, &a.data)?;
    if data.is_empty() {
        return Err(CmdError::Data("benchmark needs a nonempty dataset".into()));
    }
    let corpus = token_corpus(&data);
    let csv = match a.suite {
        Suite::Instances => {
            let splits: Vec<(usize, usize)> = [1, 2, 4, 8]
                .into_iter()
                .filter(|&n| n <= a.cores)
                .map(|n| (n, a.cores / n))
                .collect();
            let rows = instance_sweep(&model, &corpus, &splits, a.cores, &ExecPlan::f32_fused())?;
            sweep_csv(&rows)
        }
        Suite::PruneSweep => {
            let points = sweep_prune_tradeoff(&model, &data, &default_ratio_grid())?;
            compress::sweep_csv(&points)
        }
        Suite::Ablation => {
            let labels: Vec<u32> = data.iter().map(|e| e.label).collect();
            // Stage 3's "distilled-size" stand-in: half the layers, same
            // widths, no re-training (accuracy honestly degrades).
            let mut small_cfg = model.config.clone();
            small_cfg.num_layers = (model.config.num_layers / 2).max(1);
            let mut small_weights = model.weights.clone();
            small_weights.layers.truncate(small_cfg.num_layers);
            let small = Model::new(small_cfg, small_weights)?;
            let small_i8 = quantize_model(&small)?;

            let scores = compress::compute_importance(&model, &data, LossKind::CrossEntropy, None)?;
            let spec = PruneSpec::new(0.5, 0.5).map_err(|e| CmdError::Internal(e.to_string()))?;
            let pruned = apply_prune(&small, &{
                let small_scores = compress::ImportanceScores {
                    heads: scores.heads[..small.config.num_layers].to_vec(),
                    ffn_units: scores.ffn_units[..small.config.num_layers].to_vec(),
                    examples_seen: scores.examples_seen,
                };
                select_keep(&small_scores, &spec)
            })?;
            let pruned_i8 = quantize_model(&pruned)?;

            let fixed = BatchMode::FixedPad(model.config.max_seq_len);
            let threads = a.cores.min(8);
            fn stage<'a>(label: &str, m: &'a Model, exec: ExecPlan, mode: BatchMode) -> AblationStage<'a> {
                AblationStage {
                    label: label.into(),
                    model: m,
                    exec,
                    batch_mode: mode,
                    batch_size: 8,
                    instance_plan: None,
                }
            }
            let mut stages = vec![
                stage("baseline_fixed_pad_f32", &model, ExecPlan::f32_unfused(), fixed),
                stage("dynamic_batching", &model, ExecPlan::f32_unfused(), BatchMode::DynamicSorted),
                stage("smaller_model", &small, ExecPlan::f32_unfused(), BatchMode::DynamicSorted),
                stage("int8_fused", &small_i8, ExecPlan::i8_fused(), BatchMode::DynamicSorted),
            ];
            stages.push(AblationStage {
                label: "multi_instance".into(),
                model: &small_i8,
                exec: ExecPlan::i8_fused(),
                batch_mode: BatchMode::Dynamic,
                batch_size: 1,
                instance_plan: Some(
                    InstancePlan::new(threads, 1, a.cores).map_err(|e| CmdError::Usage(e.to_string()))?,
                ),
            });
            stages.push(stage("pruned_50_50_int8", &pruned_i8, ExecPlan::i8_fused(), BatchMode::DynamicSorted));
            let report = crate::runtime::run_ablation(&stages, &corpus, &labels)?;
            print!("{}", report.printed());
            report.to_csv()
        }
    };
    std::fs::write(&a.out, &csv)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
