//! Command-line surface: dataset generation, training, evaluation,
//! inference, and the latency sweep. Every command maps errors to stable
//! exit codes (0 success, 1 usage, 2 data, 3 numeric) and takes all
//! randomness from `--seed`, never from the clock.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{self, BenchConfig};
use crate::boxes::center_to_corners;
use crate::checkpoint;
use crate::dataset::{generate_records, write_records, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    apply_graph_constraint, corpus_recall_at_k, exhaustive_score, gt_triplet_classes, hico_map,
    mean_recall_at_k, score_objects, EvalConfig, EvalImage, TripletPrediction,
};
use crate::model::synthetic_labels;
use crate::scenes::{annotate, sample_scene, Predicate};
use crate::text::Vocabulary;
use crate::train::{self, TrainConfig};

/// Seed used when `--seed` is omitted. A fixed constant, so two invocations
/// without the flag do the same thing.
pub const DEFAULT_SEED: u64 = 17;

#[derive(Parser)]
#[command(
    name = "relvit",
    version,
    about = "Open-vocabulary visual relationship detection on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test scene files with disjoint seed ranges.
    GenData(GenDataArgs),
    /// Train a model, writing checkpoints and a loss CSV.
    Train(TrainArgs),
    /// Score a checkpoint: recall, mean recall, and triplet-class mAP.
    Eval(EvalArgs),
    /// Rank triplet predictions for one scene.
    Infer(InferArgs),
    /// Latency sweep over the pair budget k.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory receiving train.jsonl, val.jsonl, and test.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Total scenes across the three splits (~80/10/10).
    #[arg(long, default_value_t = 1000)]
    scenes: usize,
    /// First scene seed; splits take consecutive, disjoint ranges.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Zipf skew (>= 0) on shape/color/size draws; 0 = uniform.
    #[arg(long, default_value_t = 0.0)]
    skew: f64,
    /// Keep only these predicates in stored triplets, comma separated
    /// (e.g. "left of,above"); scenes themselves are unchanged.
    #[arg(long)]
    predicates: Option<String>,
    /// Overwrite existing split files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file; the flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving checkpoints and loss.csv.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    warmup: Option<String>,
    #[arg(long)]
    lr_body: Option<String>,
    #[arg(long)]
    lr_text: Option<String>,
    #[arg(long)]
    eval_interval: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    rebalance: Option<String>,
    #[arg(long)]
    shared_projection: Option<String>,
    #[arg(long)]
    side: Option<String>,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    mlp_ratio: Option<String>,
    /// Comma-separated dataset paths.
    #[arg(long)]
    datasets: Option<String>,
    /// Comma-separated mixture weights, aligned with --datasets.
    #[arg(long)]
    mixture: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model to score (not needed with --oracle).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scene JSONL file to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Instances kept by selection.
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Pairs kept by selection.
    #[arg(long, default_value_t = 64)]
    k: usize,
    /// Recall budgets K, comma separated, ascending.
    #[arg(long, default_value = "5,10,20")]
    recall_at: String,
    /// Object query strings, one per line; defaults to the built-in
    /// category set.
    #[arg(long)]
    queries_objects: Option<PathBuf>,
    /// Predicate query strings, one per line; defaults to the built-in
    /// predicate set.
    #[arg(long)]
    queries_predicates: Option<PathBuf>,
    /// Metrics CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Inject ground truth as predictions instead of running a model —
    /// checks the metric pipeline end to end (all recalls hit 1.0 once K
    /// covers the densest image).
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene JSONL file.
    #[arg(long)]
    data: PathBuf,
    /// Which record of the scene file to run.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Keep at most this many relationship triplets.
    #[arg(long, default_value_t = 20)]
    top_n: usize,
    /// Drop predictions scoring below this.
    #[arg(long, default_value_t = 1e-3)]
    min_score: f64,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[arg(long)]
    queries_objects: Option<PathBuf>,
    #[arg(long)]
    queries_predicates: Option<PathBuf>,
    /// Keep only the best predicate per ordered pair.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    graph_constrained: bool,
    /// Predictions JSONL path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene JSONL file to time on; a sampled scene when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Pair budgets to sweep, comma separated; 0 = detection-only.
    #[arg(long, default_value = "0,4,16,64")]
    k: String,
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Seed for the sampled scene when --data is omitted.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    queries_objects: Option<PathBuf>,
    #[arg(long)]
    queries_predicates: Option<PathBuf>,
    /// Sweep CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse flags, dispatch, and turn the result into a process exit code.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print and exit 0; real flag errors are usage
            // errors and must exit 1 per the CLI contract.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => run_gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("relvit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run_gen_data(a: &GenDataArgs) -> Result<()> {
    if a.scenes < 3 {
        return Err(Error::Usage(format!(
            "need at least 3 scenes for three non-empty splits, got {}",
            a.scenes
        )));
    }
    let allowed: Option<Vec<Predicate>> = match &a.predicates {
        Some(list) => {
            let parsed: Vec<Predicate> = list
                .split(',')
                .map(|s| {
                    Predicate::parse(s.trim())
                        .map_err(|e| Error::Usage(format!("--predicates: {e}")))
                })
                .collect::<Result<_>>()?;
            if parsed.is_empty() {
                return Err(Error::Usage("predicate filter must not be empty".into()));
            }
            Some(parsed)
        }
        None => None,
    };

    let n_val = (a.scenes / 10).max(1);
    let n_test = (a.scenes / 10).max(1);
    let n_train = a.scenes - n_val - n_test;
    let splits = [("train", 0, n_train), ("val", n_train, n_val), ("test", n_train + n_val, n_test)];

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let paths: Vec<PathBuf> =
        splits.iter().map(|(name, _, _)| a.out.join(format!("{name}.jsonl"))).collect();
    if !a.force {
        if let Some(existing) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Usage(format!(
                "{} already exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }

    let mut all = Vec::with_capacity(a.scenes);
    for ((name, offset, count), path) in splits.iter().zip(&paths) {
        let records =
            generate_records(a.seed + *offset as u64, *count, a.skew, allowed.as_deref())?;
        write_records(path, &records)?;
        eprintln!("wrote {count} {name} scenes to {}", path.display());
        all.extend(records);
    }

    // Predicate frequency table over every generated triplet.
    let pooled = Dataset::from_records("generated", &all)?;
    let freqs = pooled.predicate_frequencies()?;
    let mut table = String::from("predicate,frequency\n");
    for (p, f) in Predicate::ALL.iter().zip(freqs) {
        table.push_str(&format!("{},{}\n", p.as_str(), f));
    }
    print!("{table}");
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    let overrides: [(&str, &Option<String>); 19] = [
        ("seed", &a.seed),
        ("batch_size", &a.batch_size),
        ("steps", &a.steps),
        ("warmup", &a.warmup),
        ("lr_body", &a.lr_body),
        ("lr_text", &a.lr_text),
        ("eval_interval", &a.eval_interval),
        ("m", &a.m),
        ("k", &a.k),
        ("rebalance", &a.rebalance),
        ("shared_projection", &a.shared_projection),
        ("side", &a.side),
        ("patch", &a.patch),
        ("dim", &a.dim),
        ("layers", &a.layers),
        ("heads", &a.heads),
        ("mlp_ratio", &a.mlp_ratio),
        ("datasets", &a.datasets),
        ("mixture", &a.mixture),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            config.set(key, v)?;
        }
    }
    let state = train::train(&config, &a.out, a.resume.as_deref())?;
    match &state.last_loss {
        Some(loss) => eprintln!("trained to step {} (total loss {:.4})", state.step, loss.total),
        None => eprintln!("wrote initial checkpoint at step {}", state.step),
    }
    Ok(())
}

/// Query strings from a file (one per line) or the built-in label set.
fn read_queries(path: Option<&Path>, default: &[String]) -> Result<Vec<String>> {
    let Some(path) = path else { return Ok(default.to_vec()) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let queries: Vec<String> =
        text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    if queries.is_empty() {
        return Err(Error::Usage(format!("{} contains no queries", path.display())));
    }
    Ok(queries)
}

/// Queries made only of out-of-vocabulary words still run — they all share
/// the fallback embedding — but the user should know.
fn warn_oov(vocab: &Vocabulary, queries: &[String]) -> Result<()> {
    for q in queries {
        let ids = vocab.tokenize(q)?;
        if ids.iter().all(|&id| id == vocab.oov_id()) {
            log::warn!("query {q:?} contains only out-of-vocabulary words");
        }
    }
    Ok(())
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| Error::Usage(format!("invalid {what} value {v:?}: {e}")))
        })
        .collect()
}

fn write_text(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(path) => fs::write(path, content).map_err(|e| Error::io(path, e)),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// Ground truth dressed up as predictions, every factor 1.0 — the metric
/// pipeline must score it perfectly.
fn oracle_images(dataset: &Dataset) -> Vec<EvalImage> {
    (0..dataset.len())
        .map(|idx| {
            let gt = dataset.ground_truth(idx).clone();
            let preds = gt
                .triplets
                .iter()
                .map(|t| TripletPrediction {
                    subject_idx: t.subject,
                    object_idx: t.object,
                    subject_box: gt.boxes[t.subject],
                    object_box: gt.boxes[t.object],
                    subject_category: gt.categories[t.subject].clone(),
                    object_category: gt.categories[t.object].clone(),
                    predicate: t.predicate.as_str().to_string(),
                    subject_category_id: 0,
                    object_category_id: 0,
                    predicate_id: t.predicate.index(),
                    subject_objectness: 1.0,
                    subject_class_prob: 1.0,
                    object_objectness: 1.0,
                    object_class_prob: 1.0,
                    pair_score: 1.0,
                    predicate_prob: 1.0,
                    combined: 1.0,
                })
                .collect();
            EvalImage { preds, gt }
        })
        .collect()
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let k_values = parse_usize_list(&a.recall_at, "recall budget")?;
    let config = EvalConfig { k_values: k_values.clone(), ..EvalConfig::default() };
    config.validate()?;
    let dataset = Dataset::load(&a.data)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("{} contains no scenes", a.data.display())));
    }

    // Two prediction sets per image: graph-constrained (best predicate per
    // ordered pair) and free (up to the per-pair cap).
    let (graph_images, free_images) = if a.oracle {
        let images = oracle_images(&dataset);
        (images.clone(), images)
    } else {
        let Some(ckpt) = &a.checkpoint else {
            return Err(Error::Usage("--checkpoint is required unless --oracle is set".into()));
        };
        let model = checkpoint::load(ckpt)?.model;
        let labels = synthetic_labels()?;
        let object_queries = read_queries(a.queries_objects.as_deref(), labels.objects())?;
        let predicate_queries =
            read_queries(a.queries_predicates.as_deref(), labels.predicates())?;
        warn_oov(&model.vocab, &object_queries)?;
        warn_oov(&model.vocab, &predicate_queries)?;

        let side = model.config.encoder.side;
        let mut graph_images = Vec::with_capacity(dataset.len());
        let mut free_images = Vec::with_capacity(dataset.len());
        for idx in 0..dataset.len() {
            let example = dataset.example(idx, side);
            let fwd =
                model.forward(&example.image, &object_queries, &predicate_queries, a.m, a.k)?;
            let raw = exhaustive_score(
                &fwd.selection,
                fwd.tape.value(fwd.p),
                fwd.tape.value(fwd.det_logits),
                fwd.tape.value(fwd.rel_logits),
                fwd.tape.value(fwd.boxes),
                &object_queries,
                &predicate_queries,
            )?;
            graph_images.push(EvalImage {
                preds: apply_graph_constraint(raw.clone(), true, config.per_pair_cap),
                gt: example.gt.clone(),
            });
            free_images.push(EvalImage {
                preds: apply_graph_constraint(raw, false, config.per_pair_cap),
                gt: example.gt,
            });
        }
        (graph_images, free_images)
    };

    let mut csv = String::from("metric,name,value\n");
    csv.push_str(&format!("count,images,{}\n", dataset.len()));
    for &k in &k_values {
        let g = corpus_recall_at_k(&graph_images, k, config.iou_threshold)?;
        let f = corpus_recall_at_k(&free_images, k, config.iou_threshold)?;
        csv.push_str(&format!("recall,R@{k}_graph,{}\n", g.value));
        csv.push_str(&format!("recall,R@{k}_free,{}\n", f.value));
    }
    for &k in &k_values {
        let g = mean_recall_at_k(&graph_images, k, config.iou_threshold)?;
        let f = mean_recall_at_k(&free_images, k, config.iou_threshold)?;
        csv.push_str(&format!("mean_recall,mR@{k}_graph,{}\n", g.value));
        csv.push_str(&format!("mean_recall,mR@{k}_free,{}\n", f.value));
    }
    let classes = gt_triplet_classes(&free_images);
    let map = hico_map(&free_images, &classes, config.rare_threshold, config.iou_threshold)?;
    csv.push_str(&format!("map,mAP,{}\n", map.map));
    csv.push_str(&format!("map,mAP_rare,{}\n", map.map_rare));
    csv.push_str(&format!("map,mAP_nonrare,{}\n", map.map_nonrare));
    csv.push_str(&format!("count,triplet_classes,{}\n", map.evaluated_classes));
    write_text(a.out.as_deref(), &csv)
}

#[derive(Serialize)]
struct ObjectRecord<'a> {
    kind: &'static str,
    box_corners: [f64; 4],
    category: &'a str,
    objectness: f64,
    class_prob: f64,
    score: f64,
}

#[derive(Serialize)]
struct RelationshipRecord<'a> {
    kind: &'static str,
    subject_box: [f64; 4],
    object_box: [f64; 4],
    subject: &'a str,
    predicate: &'a str,
    object: &'a str,
    subject_objectness: f64,
    subject_class_prob: f64,
    object_objectness: f64,
    object_class_prob: f64,
    pair_score: f64,
    predicate_prob: f64,
    score: f64,
}

fn run_infer(a: &InferArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let dataset = Dataset::load(&a.data)?;
    if a.index >= dataset.len() {
        return Err(Error::Usage(format!(
            "scene index {} out of range for {} scenes",
            a.index,
            dataset.len()
        )));
    }
    let labels = synthetic_labels()?;
    let object_queries = read_queries(a.queries_objects.as_deref(), labels.objects())?;
    let predicate_queries = read_queries(a.queries_predicates.as_deref(), labels.predicates())?;
    warn_oov(&model.vocab, &object_queries)?;
    warn_oov(&model.vocab, &predicate_queries)?;

    let example = dataset.example(a.index, model.config.encoder.side);
    let fwd = model.forward(&example.image, &object_queries, &predicate_queries, a.m, a.k)?;
    let p = fwd.tape.value(fwd.p);
    let det = fwd.tape.value(fwd.det_logits);
    let boxes = fwd.tape.value(fwd.boxes);
    let mut objects = score_objects(&fwd.selection, p, det, boxes, &object_queries)?;
    objects.sort_by(|x, y| {
        y.score.total_cmp(&x.score).then(x.index.cmp(&y.index))
    });
    let triplets = apply_graph_constraint(
        exhaustive_score(
            &fwd.selection,
            p,
            det,
            fwd.tape.value(fwd.rel_logits),
            boxes,
            &object_queries,
            &predicate_queries,
        )?,
        a.graph_constrained,
        EvalConfig::default().per_pair_cap,
    );

    let mut out = String::new();
    for o in objects.iter().filter(|o| o.score >= a.min_score) {
        let record = ObjectRecord {
            kind: "object",
            box_corners: center_to_corners(o.box_center),
            category: &o.category,
            objectness: o.objectness,
            class_prob: o.class_prob,
            score: o.score,
        };
        out.push_str(&serde_json::to_string(&record).map_err(|e| Error::parse("object record", e))?);
        out.push('\n');
    }
    for t in triplets.iter().filter(|t| t.combined >= a.min_score).take(a.top_n) {
        let record = RelationshipRecord {
            kind: "relationship",
            subject_box: center_to_corners(t.subject_box),
            object_box: center_to_corners(t.object_box),
            subject: &t.subject_category,
            predicate: &t.predicate,
            object: &t.object_category,
            subject_objectness: t.subject_objectness,
            subject_class_prob: t.subject_class_prob,
            object_objectness: t.object_objectness,
            object_class_prob: t.object_class_prob,
            pair_score: t.pair_score,
            predicate_prob: t.predicate_prob,
            score: t.combined,
        };
        out.push_str(
            &serde_json::to_string(&record).map_err(|e| Error::parse("relationship record", e))?,
        );
        out.push('\n');
    }
    write_text(a.out.as_deref(), &out)
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let side = model.config.encoder.side;
    let image = match &a.data {
        Some(path) => {
            let dataset = Dataset::load(path)?;
            if a.index >= dataset.len() {
                return Err(Error::Usage(format!(
                    "scene index {} out of range for {} scenes",
                    a.index,
                    dataset.len()
                )));
            }
            dataset.example(a.index, side).image
        }
        None => annotate(&sample_scene(a.seed, 0.0)?, side).image,
    };
    let labels = synthetic_labels()?;
    let object_queries = read_queries(a.queries_objects.as_deref(), labels.objects())?;
    let predicate_queries = read_queries(a.queries_predicates.as_deref(), labels.predicates())?;
    let config =
        BenchConfig { k_values: parse_usize_list(&a.k, "pair budget")?, trials: a.trials, m: a.m };
    let report = bench::run(&model, &image, &object_queries, &predicate_queries, &config)?;
    write_text(a.out.as_deref(), &report.to_csv())
}
