use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use ape_core::checkpoint::Checkpoint;
use ape_core::head::{count_params as count, default_mlp_widths, HeadSpec, TextHeadSpec};
use ape_core::store::{inspect_shard, ShardReport};
use ape_core::trainer::{metrics_to_csv, read_metrics};
use ape_core::Error;

#[derive(Args)]
pub struct InspectArgs {
    #[arg(required = true)]
    shards: Vec<PathBuf>,
    /// Print the reports as JSON.
    #[arg(long)]
    json: bool,
}

fn print_report(r: &ShardReport) {
    println!("{}", r.path);
    println!("  bytes      {}", r.file_bytes);
    println!("  sha256     {}", r.sha256);
    if let Some(d) = &r.dims {
        println!(
            "  dims       d_img={} d_tok={} max_seq={} n_variants={}",
            d.d_img, d.d_tok, d.max_seq, d.n_variants
        );
    }
    if let Some(n) = r.record_count {
        println!("  records    {n}");
    }
    if let Some(c) = &r.checksum {
        println!("  checksum   {}", serde_json::to_string(c).unwrap_or_default().trim_matches('"'));
    }
    let fields = [
        ("tokens", &r.token_encodings),
        ("valid_len", &r.valid_len),
        ("img_norm", &r.image_norms),
        ("token_ids", &r.token_ids),
        ("sample_ids", &r.sample_ids),
    ];
    for (name, stats) in fields {
        if let Some(s) = stats {
            println!(
                "  {name:<10} n={} mean={:.6} std={:.6} min={:.6} max={:.6}",
                s.count, s.mean, s.std, s.min, s.max
            );
        }
    }
    println!("  errors     {}", r.errors.len());
    for e in &r.errors {
        println!("    {e}");
    }
}

/// Exit status 2 when any shard has errors.
pub fn inspect(a: InspectArgs) -> Result<u8> {
    let reports = a
        .shards
        .iter()
        .map(|p| inspect_shard(p))
        .collect::<ape_core::Result<Vec<_>>>()?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        for r in &reports {
            print_report(r);
        }
    }
    Ok(if reports.iter().any(|r| !r.errors.is_empty()) {
        2
    } else {
        0
    })
}

#[derive(Args)]
pub struct CountArgs {
    /// Read the architecture from a checkpoint.
    #[arg(long, conflicts_with_all = ["kind", "layers", "widths"])]
    ckpt: Option<PathBuf>,
    /// mlp or lookup.
    #[arg(long, default_value = "mlp")]
    kind: String,
    /// MLP depth; 0 is the identity.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Explicit comma-separated MLP widths, overriding --layers.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    d_tok: Option<usize>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    /// Image MLP widths, comma-separated.
    #[arg(long, value_delimiter = ',')]
    image_widths: Option<Vec<usize>>,
    /// Parameter count of the frozen text tower, for the ratio.
    #[arg(long)]
    text_tower: Option<u64>,
}

pub fn count_params(a: CountArgs) -> Result<u8> {
    let spec = match &a.ckpt {
        Some(p) => Checkpoint::read(p)?.head.spec(),
        None => {
            let text = match a.kind.as_str() {
                "mlp" => {
                    let widths = match &a.widths {
                        Some(w) => w.clone(),
                        None => {
                            let d_tok = a.d_tok.ok_or_else(|| {
                                Error::Config("--d-tok or --widths is required".into())
                            })?;
                            default_mlp_widths(d_tok, a.d_out.unwrap_or(d_tok), a.layers, a.hidden)
                        }
                    };
                    TextHeadSpec::Mlp { widths }
                }
                "lookup" => TextHeadSpec::Lookup {
                    vocab: a
                        .vocab
                        .ok_or_else(|| Error::Config("--vocab is required for lookup".into()))?,
                    d_out: a
                        .d_out
                        .ok_or_else(|| Error::Config("--d-out is required for lookup".into()))?,
                },
                other => return Err(Error::Config(format!("unknown head kind {other:?}")).into()),
            };
            HeadSpec {
                text,
                image: a.image_widths.clone(),
            }
        }
    };
    println!("{}", serde_json::to_string_pretty(&count(&spec, a.text_tower))?);
    Ok(0)
}

#[derive(Args)]
pub struct CsvArgs {
    /// metrics.jsonl of a run.
    metrics: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn export_csv(a: CsvArgs) -> Result<u8> {
    let csv = metrics_to_csv(&read_metrics(&a.metrics)?);
    match &a.out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(0)
}
