use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Subcommand, ValueEnum};

use ape_core::checkpoint::Checkpoint;
use ape_core::eval::{
    build_classifier, dataset_recall, zero_shot_accuracy, EvalSet, LabelMap, RecallDirection,
};
use ape_core::store::{Dataset, EmbeddingShard};
use ape_core::trainer::{append_metrics, MetricsRecord, RunState};
use ape_core::Error;

#[derive(Subcommand)]
pub enum EvalCommand {
    /// Zero-shot classification accuracy of a labelled image shard.
    Zeroshot(ZeroShotArgs),
    /// Retrieval recall@k over a paired shard.
    Recall(RecallArgs),
}

#[derive(Args)]
pub struct ZeroShotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image shard whose sample_id is the label.
    #[arg(long)]
    set: PathBuf,
    /// Template shard whose sample_id is the class index.
    #[arg(long)]
    templates: PathBuf,
    /// Label map sidecar, lines `eval_label→class_index`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Class names, one per line.
    #[arg(long)]
    class_names: Option<PathBuf>,
    /// Name under which the accuracy is recorded; defaults to the set's
    /// file stem.
    #[arg(long)]
    name: Option<String>,
    /// Append a metrics record to this JSON-lines file.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    ImageToText,
    TextToImage,
    Both,
}

impl From<Direction> for RecallDirection {
    fn from(d: Direction) -> Self {
        match d {
            Direction::ImageToText => RecallDirection::ImageToText,
            Direction::TextToImage => RecallDirection::TextToImage,
            Direction::Both => RecallDirection::Both,
        }
    }
}

#[derive(Args)]
pub struct RecallArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Paired shard; row i's text and image form the true pair.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    #[arg(long, value_enum, default_value = "image-to-text")]
    direction: Direction,
}

pub fn run(cmd: EvalCommand) -> Result<u8> {
    match cmd {
        EvalCommand::Zeroshot(a) => zeroshot(a),
        EvalCommand::Recall(a) => recall(a),
    }
}

fn base_record(ckpt: &Checkpoint) -> Result<MetricsRecord> {
    let step = if ckpt.run_state.is_empty() {
        0
    } else {
        serde_json::from_str::<RunState>(&ckpt.run_state)
            .map_err(|e| Error::Format(format!("checkpoint run state: {e}")))?
            .step
    };
    Ok(MetricsRecord {
        step,
        wall_time_s: None,
        train_loss: None,
        temperature: (-ckpt.head.log_scale.data()[0] as f64).exp(),
        lr: 0.0,
        eval: BTreeMap::new(),
        recall_at_1: None,
        recall_at_5: None,
        recall_at_10: None,
    })
}

fn zeroshot(a: ZeroShotArgs) -> Result<u8> {
    let ckpt = Checkpoint::read(&a.ckpt)?;
    let templates = EmbeddingShard::read(&a.templates)?;
    let names = match &a.class_names {
        Some(p) => Some(
            fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        ),
        None => None,
    };
    let name = a.name.clone().unwrap_or_else(|| {
        a.set
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "eval".into())
    });
    let set = EvalSet::from_shard(name.clone(), &EmbeddingShard::read(&a.set)?)?;
    let labels = a.labels.as_deref().map(LabelMap::read).transpose()?;
    let classifier = build_classifier(&ckpt.head, &templates, names)?;
    let acc = zero_shot_accuracy(&classifier, &set, &ckpt.head, labels.as_ref())?;
    println!("{name}\t{acc}");
    if let Some(path) = &a.metrics {
        let mut record = base_record(&ckpt)?;
        record.eval.insert(name, acc);
        append_metrics(path, &record)?;
    }
    Ok(0)
}

fn recall(a: RecallArgs) -> Result<u8> {
    let ckpt = Checkpoint::read(&a.ckpt)?;
    let data = Dataset::from_shards(vec![EmbeddingShard::read(&a.pairs)?])?;
    let values = dataset_recall(&ckpt.head, &data, &a.k, a.direction.into())?;
    for (k, v) in a.k.iter().zip(values) {
        println!("recall@{k}\t{v}");
    }
    Ok(0)
}
