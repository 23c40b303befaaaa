//! The training loop: batching, embedding-level gradient accumulation,
//! AdamW steps, periodic evaluation, checkpoints and the metrics log.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml          resolved config
//! seeds.json           seeds and numeric mode
//! metrics.jsonl        one MetricsRecord per evaluation
//! checkpoints/         step-XXXXXXXX.apec, last.apec, best.apec
//! subsets/             per-source sample_id lists of a mixture run
//! ```

mod accumulate;
mod config;
mod metrics;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{
    build_classifier, embed_all_images, embed_all_text, recall_at_ks, zero_shot_accuracy,
    EvalSet, LabelMap,
};
use crate::head::{AlignmentHead, HeadSpec, TextHeadSpec};
use crate::objective::contrastive_loss;
use crate::optim::{AdamWState, Schedule};
use crate::store::{
    write_atomic, write_index_list, read_index_list, BatchSampler, Dataset, EmbeddingShard,
    EpochPlan, MixturePlan, SamplerState,
};
use crate::tensor::{set_strict_deterministic, Tensor};

pub use accumulate::{accumulate_gradients, split_batch};
pub use config::{
    apply_override, config_with_overrides, DataConfig, HeadConfig, HeadKind, TrainConfig,
    ZeroShotConfig, CADENCE_KEYS,
};
pub use metrics::{
    append_metrics, metrics_to_csv, parse_metrics, read_metrics, truncate_metrics,
    MetricsRecord,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEEDS_FILE: &str = "seeds.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SUBSET_DIR: &str = "subsets";
pub const LAST_CHECKPOINT: &str = "last.apec";
pub const BEST_CHECKPOINT: &str = "best.apec";

/// Recall cut-offs reported in every record.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Trainer bookkeeping stored inside every checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    pub step: u64,
    pub sampler: SamplerState,
    /// Losses since the last metrics record.
    pub loss_sum: f64,
    pub loss_count: u64,
    pub best_recall_at_1: Option<f64>,
    /// Accumulated training time; stays 0 in strict mode.
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SeedRecord {
    seed: u64,
    data_seed: u64,
    strict: bool,
}

/// How a call to [`train`] or [`resume`] ended.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub step: u64,
    /// True when `stop_after` ended the run before `steps`.
    pub stopped_early: bool,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub last_record: Option<MetricsRecord>,
}

struct ZeroShotTask {
    name: String,
    templates: EmbeddingShard,
    set: EvalSet,
    labels: Option<LabelMap>,
    class_names: Option<Vec<String>>,
}

/// Data and resolved architecture of a run.
struct Prepared {
    config: TrainConfig,
    spec: HeadSpec,
    data: Dataset,
    plan: EpochPlan,
    /// Chosen sample_ids per mixture source.
    subsets: Option<Vec<Vec<u64>>>,
    validation: Option<Dataset>,
    zero_shot: Vec<ZeroShotTask>,
    schedule: Option<Schedule>,
}

fn read_shards(paths: &[PathBuf]) -> Result<Vec<EmbeddingShard>> {
    paths.iter().map(|p| EmbeddingShard::read(p)).collect()
}

fn max_token_id<'a>(shards: impl IntoIterator<Item = &'a EmbeddingShard>) -> Option<u32> {
    shards
        .into_iter()
        .flat_map(|s| &s.records)
        .flat_map(|r| r.token_ids.iter().copied())
        .max()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn prepare(config: &TrainConfig) -> Result<Prepared> {
    config.validate()?;
    let mut config = config.clone();

    let (data, plan, subsets, train_shards) = match &config.data.mixture {
        None => {
            let shards = read_shards(&config.data.train)?;
            let data = Dataset::from_shards(shards.clone())?;
            let plan = EpochPlan::All(data.len());
            (data, plan, None, shards)
        }
        Some(mix) => {
            let mut sources = Vec::with_capacity(mix.sources.len());
            for (s, src) in mix.sources.iter().enumerate() {
                if src.shards.is_empty() {
                    return Err(Error::Config(format!("mixture source {s} lists no shards")));
                }
                let shards = read_shards(&src.shards)?;
                let dims = shards[0].dims;
                let mut records: Vec<_> = shards.into_iter().flat_map(|s| s.records).collect();
                if let Some(list) = &src.index_list {
                    let keep: HashSet<u64> = read_index_list(list)?.into_iter().collect();
                    records.retain(|r| keep.contains(&r.sample_id));
                }
                sources.push(EmbeddingShard::new(dims, records)?);
            }
            let sizes: Vec<usize> = sources.iter().map(EmbeddingShard::len).collect();
            let weights: Vec<u64> = mix.sources.iter().map(|s| s.weight).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed());
            rng.set_stream(u64::MAX);
            let mplan = MixturePlan::new(&sizes, &weights, mix.epoch_size, &mut rng)?;
            let ids = mplan
                .subsets()
                .iter()
                .zip(&sources)
                .map(|(sub, shard)| sub.iter().map(|&i| shard.records[i].sample_id).collect())
                .collect();
            let data = Dataset::from_shards(sources.clone())?;
            (data, EpochPlan::Mixture(mplan), Some(ids), sources)
        }
    };
    let dims = data.dims();

    let validation = match &config.data.validation {
        Some(p) => Some(EmbeddingShard::read(p)?),
        None => None,
    };
    let mut zero_shot = Vec::with_capacity(config.zero_shot.len());
    for z in &config.zero_shot {
        let templates = EmbeddingShard::read(&z.templates)?;
        let set_shard = EmbeddingShard::read(&z.set)?;
        for (what, s) in [("templates", &templates), ("set", &set_shard)] {
            if s.dims.d_tok != dims.d_tok || s.dims.d_img != dims.d_img {
                return Err(Error::Shape(format!(
                    "zero-shot {} {what} has d_img {} / d_tok {}, training data {} / {}",
                    z.name, s.dims.d_img, s.dims.d_tok, dims.d_img, dims.d_tok
                )));
            }
        }
        zero_shot.push(ZeroShotTask {
            name: z.name.clone(),
            set: EvalSet::from_shard(z.name.clone(), &set_shard)?,
            templates,
            labels: z.labels.as_deref().map(LabelMap::read).transpose()?,
            class_names: z.class_names.as_deref().map(read_lines).transpose()?,
        });
    }
    if let Some(v) = &validation {
        if v.dims.d_tok != dims.d_tok || v.dims.d_img != dims.d_img {
            return Err(Error::Shape(format!(
                "validation shard has d_img {} / d_tok {}, training data {} / {}",
                v.dims.d_img, v.dims.d_tok, dims.d_img, dims.d_tok
            )));
        }
    }

    let max_id = max_token_id(
        train_shards
            .iter()
            .chain(validation.iter())
            .chain(zero_shot.iter().map(|z| &z.templates)),
    );
    let (d_img, d_tok) = (dims.d_img as usize, dims.d_tok as usize);
    let spec = config.head.resolve(d_img, d_tok, max_id)?;
    // Pin every derived default so the echoed config is self-contained.
    config.head.d_out = Some(spec.d_out());
    match (&spec.text, config.head.kind) {
        (TextHeadSpec::Lookup { vocab, .. }, _) => config.head.vocab = Some(*vocab),
        (TextHeadSpec::Mlp { .. }, _) => {
            config.head.hidden = Some(config.head.hidden.unwrap_or(2 * d_tok))
        }
    }
    if config.head.image_head {
        config.head.image_hidden = Some(config.head.image_hidden.unwrap_or(2 * d_img));
    }

    Ok(Prepared {
        schedule: config.schedule()?,
        config,
        spec,
        data,
        plan,
        subsets,
        validation: validation.map(|v| Dataset::from_shards(vec![v])).transpose()?,
        zero_shot,
    })
}

/// The state a run carries from step to step.
struct Session {
    prep: Prepared,
    dir: PathBuf,
    head: AlignmentHead<f32>,
    opt: AdamWState<f32>,
    sampler: BatchSampler,
    state: RunState,
}

impl Session {
    fn lr_at(&self, step: u64) -> Result<f64> {
        match &self.prep.schedule {
            Some(s) => s.lr_at(step),
            None => Ok(0.0),
        }
    }

    fn ckpt_dir(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_DIR)
    }

    fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let run_state = serde_json::to_string(&self.state)
            .map_err(|e| Error::Format(format!("run state: {e}")))?;
        Checkpoint {
            head: self.head.clone(),
            optimizer: Some(self.opt.clone()),
            run_state,
        }
        .to_bytes()
    }

    fn write_checkpoint(&self) -> Result<()> {
        let bytes = self.checkpoint_bytes()?;
        let dir = self.ckpt_dir();
        write_atomic(&dir.join(format!("step-{:08}.apec", self.state.step)), &bytes)?;
        write_atomic(&dir.join(LAST_CHECKPOINT), &bytes)
    }

    /// Embeds the next batch without consuming it and returns its loss.
    fn peek_loss(&self) -> Result<f64> {
        let batch = self.sampler.clone().next_batch(&self.prep.data)?;
        let parts = split_batch(&batch, self.prep.config.micro_batch())?;
        let mut txt = Vec::with_capacity(parts.len());
        let mut img = Vec::with_capacity(parts.len());
        for p in &parts {
            txt.push(self.head.embed_text(p)?);
            img.push(self.head.embed_image(&p.images)?);
        }
        contrastive_loss(
            &Tensor::concat_leading(&img)?,
            &Tensor::concat_leading(&txt)?,
            self.head.log_scale.data()[0],
        )
    }

    fn evaluate(&mut self, train_loss: Option<f64>) -> Result<MetricsRecord> {
        let mut eval = BTreeMap::new();
        for task in &self.prep.zero_shot {
            let classifier = build_classifier(&self.head, &task.templates, task.class_names.clone())?;
            let acc = zero_shot_accuracy(&classifier, &task.set, &self.head, task.labels.as_ref())?;
            eval.insert(task.name.clone(), acc);
        }
        let mut recall = [None; 3];
        if let Some(v) = &self.prep.validation {
            let txt = embed_all_text(&self.head, v)?;
            let img = embed_all_images(&self.head, &v.all()?.images)?;
            let ks: Vec<usize> = RECALL_KS.iter().copied().filter(|&k| k <= v.len()).collect();
            let r = recall_at_ks(&img, &txt, &ks, self.prep.config.recall_direction)?;
            for (slot, value) in recall.iter_mut().zip(r) {
                *slot = Some(value);
            }
        }
        let record = MetricsRecord {
            step: self.state.step,
            wall_time_s: (!self.prep.config.strict).then_some(self.state.wall_time_s),
            train_loss,
            temperature: (-self.head.log_scale.data()[0] as f64).exp(),
            lr: self.lr_at(self.state.step)?,
            eval,
            recall_at_1: recall[0],
            recall_at_5: recall[1],
            recall_at_10: recall[2],
        };
        append_metrics(&self.dir.join(METRICS_FILE), &record)?;
        if let Some(r1) = record.recall_at_1 {
            if self.state.best_recall_at_1.map_or(true, |b| r1 > b) {
                self.state.best_recall_at_1 = Some(r1);
                write_atomic(
                    &self.ckpt_dir().join(BEST_CHECKPOINT),
                    &self.checkpoint_bytes()?,
                )?;
            }
        }
        Ok(record)
    }

    fn step(&mut self) -> Result<()> {
        let step = self.state.step;
        let lr = self.lr_at(step)?;
        let batch = self.sampler.next_batch(&self.prep.data)?;
        self.state.sampler = self.sampler.state();
        let started = Instant::now();
        let parts = split_batch(&batch, self.prep.config.micro_batch())?;
        let lg = accumulate_gradients(&self.head, &parts).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!(
                "step {}: {m}; last good checkpoint kept in {}",
                step + 1,
                self.ckpt_dir().join(LAST_CHECKPOINT).display()
            )),
            other => other,
        })?;
        let decay = self.head.decay_mask();
        self.opt
            .step(&mut self.head.params_mut(), &lg.grads, &decay, lr)?;
        self.head.clamp_log_scale();
        if !self.prep.config.strict {
            self.state.wall_time_s += started.elapsed().as_secs_f64();
        }
        self.state.step += 1;
        self.state.loss_sum += lg.loss;
        self.state.loss_count += 1;
        Ok(())
    }

    fn run(mut self) -> Result<TrainOutcome> {
        let cfg = self.prep.config.clone();
        let mut last_record = None;
        let mut stopped_early = false;
        while self.state.step < cfg.steps {
            self.step()?;
            let s = self.state.step;
            let end = s == cfg.steps;
            if s % cfg.eval_every == 0 || end {
                let mean = self.state.loss_sum / self.state.loss_count as f64;
                self.state.loss_sum = 0.0;
                self.state.loss_count = 0;
                last_record = Some(self.evaluate(Some(mean))?);
            }
            let stop = cfg.stop_after == Some(s) && !end;
            if s % cfg.checkpoint_every() == 0 || end || stop {
                self.write_checkpoint()?;
            }
            if stop {
                stopped_early = true;
                break;
            }
        }
        let best = self.ckpt_dir().join(BEST_CHECKPOINT);
        Ok(TrainOutcome {
            step: self.state.step,
            stopped_early,
            last_checkpoint: self.ckpt_dir().join(LAST_CHECKPOINT),
            best_checkpoint: best.exists().then_some(best),
            last_record,
        })
    }
}

fn write_run_files(prep: &Prepared, dir: &Path) -> Result<()> {
    let cfg = &prep.config;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    let seeds = SeedRecord {
        seed: cfg.seed,
        data_seed: cfg.data_seed(),
        strict: cfg.strict,
    };
    let json = serde_json::to_string_pretty(&seeds)
        .map_err(|e| Error::Format(format!("seed record: {e}")))?;
    write_atomic(&dir.join(SEEDS_FILE), format!("{json}\n").as_bytes())?;
    if let Some(subsets) = &prep.subsets {
        let sub_dir = dir.join(SUBSET_DIR);
        fs::create_dir_all(&sub_dir)
            .map_err(|e| Error::io(format!("creating {}", sub_dir.display()), e))?;
        for (s, ids) in subsets.iter().enumerate() {
            write_index_list(&sub_dir.join(format!("source-{s}.txt")), ids)?;
        }
    }
    Ok(())
}

fn make_sampler(prep: &Prepared) -> Result<BatchSampler> {
    BatchSampler::new(
        prep.plan.clone(),
        prep.data.dims().n_variants,
        prep.config.batch_size,
        prep.config.data.drop_last,
        prep.config.data_seed(),
    )
}

/// Trains from scratch into `run_dir`, which must not already hold a run.
///
/// Writes the step-0 checkpoint and metrics record before the first update,
/// so `steps = 0` yields exactly one of each.
pub fn train(config: &TrainConfig, run_dir: &Path) -> Result<TrainOutcome> {
    let prep = prepare(config)?;
    if run_dir.join(METRICS_FILE).exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; resume it or pick another directory",
            run_dir.display()
        )));
    }
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)
        .map_err(|e| Error::io(format!("creating {}", ckpt_dir.display()), e))?;
    write_run_files(&prep, run_dir)?;
    set_strict_deterministic(prep.config.strict);

    let mut rng = ChaCha8Rng::seed_from_u64(prep.config.seed);
    let mut head = AlignmentHead::init(&prep.spec, prep.config.head.log_scale_init, &mut rng)?;
    head.clamp_log_scale();
    let opt = AdamWState::new(prep.config.adamw(), &head.params())?;
    let sampler = make_sampler(&prep)?;
    let mut session = Session {
        prep,
        dir: run_dir.to_path_buf(),
        head,
        opt,
        sampler,
        state: RunState::default(),
    };
    let loss0 = session.peek_loss()?;
    let record0 = session.evaluate(Some(loss0))?;
    session.write_checkpoint()?;
    let mut outcome = session.run()?;
    if outcome.last_record.is_none() {
        outcome.last_record = Some(record0);
    }
    Ok(outcome)
}

/// Continues the run in `run_dir` from its last checkpoint.
///
/// With `config`, every field other than the cadence keys must match the
/// run's recorded config; the differences are listed otherwise.
pub fn resume(run_dir: &Path, config: Option<&TrainConfig>) -> Result<TrainOutcome> {
    let saved = TrainConfig::read(&run_dir.join(CONFIG_FILE))?;
    let prep = match config {
        None => prepare(&saved)?,
        Some(c) => {
            let prep = prepare(c)?;
            let diff = saved.semantic_diff(&prep.config)?;
            if !diff.is_empty() {
                let lines: Vec<String> = diff
                    .iter()
                    .map(|(k, a, b)| format!("  {k}: {a} -> {b}"))
                    .collect();
                return Err(Error::Config(format!(
                    "config differs from the run being resumed:\n{}",
                    lines.join("\n")
                )));
            }
            write_atomic(&run_dir.join(CONFIG_FILE), prep.config.to_toml()?.as_bytes())?;
            prep
        }
    };
    let ckpt = Checkpoint::read(&run_dir.join(CHECKPOINT_DIR).join(LAST_CHECKPOINT))?;
    let state: RunState = serde_json::from_str(&ckpt.run_state)
        .map_err(|e| Error::Format(format!("checkpoint run state: {e}")))?;
    if ckpt.head.spec() != prep.spec {
        return Err(Error::Config(format!(
            "checkpoint head {:?} does not match config head {:?}",
            ckpt.head.spec(),
            prep.spec
        )));
    }
    let opt = ckpt
        .optimizer
        .ok_or_else(|| Error::Format("checkpoint carries no optimizer state".into()))?;
    let mut sampler = make_sampler(&prep)?;
    sampler.restore(state.sampler)?;
    truncate_metrics(&run_dir.join(METRICS_FILE), state.step)?;
    set_strict_deterministic(prep.config.strict);
    let session = Session {
        prep,
        dir: run_dir.to_path_buf(),
        head: ckpt.head,
        opt,
        sampler,
        state,
    };
    session.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{gen_synthetic, SyntheticSpec};

    fn write_data(dir: &Path, noise: f64) -> (PathBuf, PathBuf) {
        let mut spec = SyntheticSpec::new(4, 8, 3, 96, 32);
        spec.noise = noise;
        spec.seed = 3;
        let d = gen_synthetic(&spec).unwrap();
        let (tr, te) = (dir.join("train.apes"), dir.join("test.apes"));
        d.train.write(&tr).unwrap();
        d.test.write(&te).unwrap();
        (tr, te)
    }

    fn small_config(dir: &Path) -> TrainConfig {
        let (tr, te) = write_data(dir, 0.05);
        let mut c = TrainConfig::new(vec![tr], 16, 12, 3e-3);
        c.data.validation = Some(te);
        c.eval_every = 4;
        c.warmup = 2;
        c.head.layers = 2;
        c.strict = true;
        c
    }

    #[test]
    fn zero_steps_writes_initial_state_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config(dir.path());
        c.steps = 0;
        c.warmup = 0;
        let run = dir.path().join("run");
        let out = train(&c, &run).unwrap();
        assert_eq!(out.step, 0);
        let m = read_metrics(&run.join(METRICS_FILE)).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].step, 0);
        assert_eq!(m[0].lr, 0.0);
        let ck = Checkpoint::read(&out.last_checkpoint).unwrap();
        assert_eq!(ck.optimizer.unwrap().step, 0);
        assert!(run.join(CONFIG_FILE).exists() && run.join(SEEDS_FILE).exists());
    }

    #[test]
    fn records_follow_cadence_and_refuse_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_config(dir.path());
        let run = dir.path().join("run");
        train(&c, &run).unwrap();
        let steps: Vec<u64> = read_metrics(&run.join(METRICS_FILE))
            .unwrap()
            .iter()
            .map(|r| r.step)
            .collect();
        assert_eq!(steps, vec![0, 4, 8, 12]);
        assert!(run.join(CHECKPOINT_DIR).join("step-00000008.apec").exists());
        assert!(matches!(train(&c, &run), Err(Error::Config(_))));
    }

    #[test]
    fn resume_refuses_semantic_changes() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config(dir.path());
        c.stop_after = Some(4);
        let run = dir.path().join("run");
        let out = train(&c, &run).unwrap();
        assert!(out.stopped_early);
        let mut changed = c.clone();
        changed.weight_decay = 0.1;
        let err = resume(&run, Some(&changed)).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("weight_decay")), "{err}");
        let mut cadence = c.clone();
        cadence.eval_every = 6;
        cadence.stop_after = None;
        let out = resume(&run, Some(&cadence)).unwrap();
        assert_eq!(out.step, 12);
        assert!(!out.stopped_early);
    }
}
