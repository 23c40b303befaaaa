use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use ape_core::trainer::{
    self, config_with_overrides, read_metrics, TrainConfig, TrainOutcome, CONFIG_FILE,
    METRICS_FILE,
};
use ape_core::Error;

/// Flags that override config keys. Applied after `--set`, so they win.
#[derive(Args, Clone, Default)]
pub struct Overrides {
    /// Override any config key, e.g. `--set head.layers=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    accumulation: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    stop_after: Option<u64>,
    /// Strict-deterministic numeric mode.
    #[arg(long)]
    strict: bool,
}

impl Overrides {
    fn assignments(&self) -> Vec<String> {
        let mut out = self.set.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{k}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("steps", self.steps.map(|v| v.to_string()));
        push("warmup", self.warmup.map(|v| v.to_string()));
        push("lr", self.lr.map(float_literal));
        push("weight_decay", self.weight_decay.map(float_literal));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("accumulation", self.accumulation.map(|v| v.to_string()));
        push("eval_every", self.eval_every.map(|v| v.to_string()));
        push("checkpoint_every", self.checkpoint_every.map(|v| v.to_string()));
        push("stop_after", self.stop_after.map(|v| v.to_string()));
        if self.strict {
            out.push("strict=true".into());
        }
        out
    }
}

/// A TOML float literal (`1` would parse as an integer).
fn float_literal(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E', 'n', 'i']) {
        s
    } else {
        format!("{s}.0")
    }
}

/// Reads a config file, applies overrides and resolves relative data paths
/// against the file's directory.
fn load_config(path: &Path, overrides: &Overrides) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
    let mut cfg = config_with_overrides(&text, &overrides.assignments())
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    let dir = fs::canonicalize(dir).with_context(|| format!("resolving {}", dir.display()))?;
    cfg.rebase(&dir);
    Ok(cfg)
}

fn report(outcome: &TrainOutcome) {
    let state = if outcome.stopped_early { "stopped" } else { "finished" };
    println!("{state} at step {}", outcome.step);
    if let Some(r) = &outcome.last_record {
        if let Some(loss) = r.train_loss {
            println!("train_loss\t{loss}");
        }
        for (k, v) in [
            ("recall_at_1", r.recall_at_1),
            ("recall_at_5", r.recall_at_5),
            ("recall_at_10", r.recall_at_10),
        ] {
            if let Some(v) = v {
                println!("{k}\t{v}");
            }
        }
        for (name, acc) in &r.eval {
            println!("zero_shot.{name}\t{acc}");
        }
    }
    println!("checkpoint\t{}", outcome.last_checkpoint.display());
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

pub fn train(a: TrainArgs) -> Result<u8> {
    let cfg = load_config(&a.config, &a.overrides)?;
    report(&trainer::train(&cfg, &a.out)?);
    Ok(0)
}

#[derive(Args)]
pub struct ResumeArgs {
    /// Run directory of the interrupted run.
    #[arg(long)]
    run: PathBuf,
    /// Config to check against the run's own; only cadence keys may
    /// differ. Defaults to the run's recorded config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

pub fn resume(a: ResumeArgs) -> Result<u8> {
    let assignments = a.overrides.assignments();
    let cfg = match (&a.config, assignments.is_empty()) {
        (Some(p), _) => Some(load_config(p, &a.overrides)?),
        (None, true) => None,
        // overrides on top of the recorded config; its paths are already
        // resolved
        (None, false) => {
            let path = a.run.join(CONFIG_FILE);
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
            Some(config_with_overrides(&text, &assignments)?)
        }
    };
    report(&trainer::resume(&a.run, cfg.as_ref())?);
    Ok(0)
}

/// Hyperparameter grid. Every combination becomes one trial.
#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    /// Base run config, relative to the grid file.
    base: PathBuf,
    #[serde(default = "default_lrs")]
    lr: Vec<f64>,
    #[serde(default = "default_decays")]
    weight_decay: Vec<f64>,
    /// Warmup as a fraction of the total steps.
    #[serde(default = "default_warmups")]
    warmup_frac: Vec<f64>,
}

fn default_lrs() -> Vec<f64> {
    vec![1e-4, 3e-4, 1e-3]
}
fn default_decays() -> Vec<f64> {
    vec![0.01, 0.1]
}
fn default_warmups() -> Vec<f64> {
    vec![0.02, 0.05]
}

#[derive(Args)]
pub struct SweepArgs {
    /// Grid file (TOML): `base`, and optional `lr`, `weight_decay`,
    /// `warmup_frac` lists.
    #[arg(long)]
    grid: PathBuf,
    /// Parent directory; trial `i` runs in `<out>/trial-<i>`.
    #[arg(long)]
    out: PathBuf,
    /// Trials run at the same time.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Serialize)]
struct TrialResult {
    trial: String,
    lr: f64,
    weight_decay: f64,
    warmup: u64,
    exit_code: Option<i32>,
    best_recall_at_1: Option<f64>,
    final_recall_at_1: Option<f64>,
}

pub fn sweep(a: SweepArgs) -> Result<u8> {
    let text = fs::read_to_string(&a.grid)
        .map_err(|e| Error::Config(format!("reading {}: {e}", a.grid.display())))?;
    let grid: Grid =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.grid.display())))?;
    let base_path = a.grid.parent().unwrap_or(Path::new(".")).join(&grid.base);
    let base = load_config(&base_path, &a.overrides)?;
    if grid.lr.is_empty() || grid.weight_decay.is_empty() || grid.warmup_frac.is_empty() {
        return Err(Error::Config("every grid axis needs at least one value".into()).into());
    }

    let mut trials = Vec::new();
    for &lr in &grid.lr {
        for &wd in &grid.weight_decay {
            for &frac in &grid.warmup_frac {
                if !(0.0..1.0).contains(&frac) {
                    return Err(Error::Config(format!("warmup_frac {frac} outside [0, 1)")).into());
                }
                let warmup = (frac * base.steps as f64).round() as u64;
                trials.push((format!("trial-{:03}", trials.len()), lr, wd, warmup));
            }
        }
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let exe = std::env::current_exe().context("locating the ape executable")?;
    let overrides = a.overrides.assignments();
    let next = AtomicUsize::new(0);
    let codes = Mutex::new(vec![None; trials.len()]);
    thread::scope(|s| {
        for _ in 0..a.jobs.max(1).min(trials.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((name, lr, wd, warmup)) = trials.get(i) else { break };
                let mut cmd = Command::new(&exe);
                cmd.arg("train")
                    .arg("--config")
                    .arg(&base_path)
                    .arg("--out")
                    .arg(a.out.join(name));
                for o in &overrides {
                    cmd.arg("--set").arg(o);
                }
                cmd.arg("--set").arg(format!("lr={}", float_literal(*lr)));
                cmd.arg("--set").arg(format!("weight_decay={}", float_literal(*wd)));
                cmd.arg("--set").arg(format!("warmup={warmup}"));
                let log = a.out.join(format!("{name}.log"));
                let status = fs::File::create(&log).and_then(|f| {
                    let err = f.try_clone()?;
                    cmd.stdout(f).stderr(err).status()
                });
                let code = match status {
                    Ok(s) => s.code(),
                    Err(e) => {
                        eprintln!("{name}: could not start: {e}");
                        None
                    }
                };
                codes.lock().expect("no poisoned lock")[i] = code;
            });
        }
    });
    let codes = codes.into_inner().expect("no poisoned lock");

    let mut results = Vec::with_capacity(trials.len());
    for ((name, lr, wd, warmup), code) in trials.iter().zip(codes) {
        let metrics = read_metrics(&a.out.join(name).join(METRICS_FILE)).unwrap_or_default();
        let recalls: Vec<f64> = metrics.iter().filter_map(|r| r.recall_at_1).collect();
        results.push(TrialResult {
            trial: name.clone(),
            lr: *lr,
            weight_decay: *wd,
            warmup: *warmup,
            exit_code: code,
            best_recall_at_1: recalls.iter().copied().reduce(f64::max),
            final_recall_at_1: recalls.last().copied(),
        });
    }
    let summary = a.out.join("sweep.json");
    fs::write(&summary, serde_json::to_string_pretty(&results)? + "\n")
        .with_context(|| format!("writing {}", summary.display()))?;
    println!("trial\tlr\tweight_decay\twarmup\texit\tbest_recall_at_1");
    for r in &results {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.trial,
            r.lr,
            r.weight_decay,
            r.warmup,
            r.exit_code.map_or("-".into(), |c| c.to_string()),
            r.best_recall_at_1.map_or("-".into(), |v| v.to_string())
        );
    }
    // lowest trial index wins ties
    let best = results
        .iter()
        .filter(|r| r.exit_code == Some(0))
        .filter_map(|r| r.best_recall_at_1.map(|v| (r, v)))
        .fold(None::<(&TrialResult, f64)>, |acc, (r, v)| match acc {
            Some((_, b)) if b >= v => acc,
            _ => Some((r, v)),
        });
    if let Some((r, v)) = best {
        println!("best\t{}\trecall_at_1={v}", r.trial);
    }
    let failed = results.iter().filter(|r| r.exit_code != Some(0)).count();
    if failed > 0 {
        eprintln!("{failed} of {} trials failed; see the trial logs", results.len());
        return Ok(2);
    }
    Ok(0)
}
