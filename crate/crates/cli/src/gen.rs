use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use ape_core::store::{gen_synthetic, gen_zero_shot, sha256_hex, EmbeddingShard, SyntheticSpec};

#[derive(Args)]
pub struct GenArgs {
    /// Training pairs.
    #[arg(long)]
    n: usize,
    /// Held-out pairs.
    #[arg(long, default_value_t = 512)]
    n_test: usize,
    /// Latent dimension.
    #[arg(long, default_value_t = 16)]
    latent: usize,
    /// Image and token embedding width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Image width, overriding --dim.
    #[arg(long)]
    d_img: Option<usize>,
    /// Token width, overriding --dim.
    #[arg(long)]
    d_tok: Option<usize>,
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
    /// Shortest valid sequence; shorter sequences are padded.
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Pass token encodings through a fixed random tanh layer.
    #[arg(long)]
    nonlinear: bool,
    #[arg(long, default_value_t = 1)]
    variants: usize,
    /// Token-id quantization levels per position.
    #[arg(long, default_value_t = 16)]
    bins: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a zero-shot task with this many classes.
    #[arg(long)]
    zero_shot_classes: Option<usize>,
    #[arg(long, default_value_t = 4)]
    templates: usize,
    #[arg(long, default_value_t = 32)]
    per_class: usize,
    /// Within-class latent spread of the zero-shot task.
    #[arg(long, default_value_t = 0.3)]
    spread: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ShardEntry {
    file: String,
    records: usize,
    sha256: String,
}

#[derive(Serialize)]
struct ZeroShotEntry {
    classes: usize,
    templates_per_class: usize,
    images_per_class: usize,
    spread: f64,
    class_names: String,
}

#[derive(Serialize)]
struct Manifest {
    generator: &'static str,
    spec: SyntheticSpec,
    vocab_size: usize,
    shards: Vec<ShardEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zero_shot: Option<ZeroShotEntry>,
}

fn write(dir: &Path, name: &str, shard: &EmbeddingShard) -> Result<ShardEntry> {
    let bytes = shard.to_bytes()?;
    let path = dir.join(name);
    fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(ShardEntry {
        file: name.to_string(),
        records: shard.len(),
        sha256: sha256_hex(&bytes),
    })
}

pub fn run(a: GenArgs) -> Result<u8> {
    let spec = SyntheticSpec {
        latent: a.latent,
        d_img: a.d_img.unwrap_or(a.dim),
        d_tok: a.d_tok.unwrap_or(a.dim),
        seq_len: a.seq_len,
        n_train: a.n,
        n_test: a.n_test,
        noise: a.noise,
        nonlinear: a.nonlinear,
        seed: a.seed,
        n_variants: a.variants,
        min_len: a.min_len,
        bins: a.bins,
    };
    let data = gen_synthetic(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut shards = vec![
        write(&a.out, "train.apes", &data.train)?,
        write(&a.out, "test.apes", &data.test)?,
    ];
    let zero_shot = match a.zero_shot_classes {
        None => None,
        Some(classes) => {
            let zs = gen_zero_shot(&spec, classes, a.templates, a.per_class, a.spread)?;
            shards.push(write(&a.out, "templates.apes", &zs.templates)?);
            shards.push(write(&a.out, "zeroshot.apes", &zs.eval)?);
            let names_path = a.out.join("classes.txt");
            fs::write(&names_path, zs.class_names.join("\n") + "\n")
                .with_context(|| format!("writing {}", names_path.display()))?;
            Some(ZeroShotEntry {
                classes,
                templates_per_class: a.templates,
                images_per_class: a.per_class,
                spread: a.spread,
                class_names: "classes.txt".into(),
            })
        }
    };
    let manifest = Manifest {
        generator: "synthetic",
        vocab_size: spec.vocab_size(),
        spec,
        shards,
        zero_shot,
    };
    let path = a.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    for s in &manifest.shards {
        println!("{}  {} records  {}", s.file, s.records, s.sha256);
    }
    Ok(0)
}
