use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RecallDirection;
use crate::head::{default_mlp_widths, HeadSpec, TextHeadSpec, DEFAULT_LOG_SCALE, MAX_LAYERS};
use crate::optim::{AdamWConfig, Schedule};
use crate::store::MixtureSpec;

/// Keys that only change when things happen, not what is computed. A
/// resumed run may change these.
pub const CADENCE_KEYS: &[&str] = &["eval_every", "checkpoint_every", "stop_after"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Mlp,
    Lookup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default)]
    pub kind: HeadKind,
    /// Text MLP depth.
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Hidden width; defaults to `2·d_tok`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Shared embedding width; defaults to `d_img`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_out: Option<usize>,
    /// Lookup vocabulary; defaults to one past the largest token id seen in
    /// the training, validation and template shards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
    #[serde(default)]
    pub image_head: bool,
    #[serde(default = "one")]
    pub image_layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_hidden: Option<usize>,
    #[serde(default = "default_log_scale")]
    pub log_scale_init: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Mlp,
            layers: default_layers(),
            hidden: None,
            d_out: None,
            vocab: None,
            image_head: false,
            image_layers: 1,
            image_hidden: None,
            log_scale_init: DEFAULT_LOG_SCALE,
        }
    }
}

impl HeadConfig {
    /// Concrete architecture for data of the given widths.
    pub fn resolve(&self, d_img: usize, d_tok: usize, max_token_id: Option<u32>) -> Result<HeadSpec> {
        let d_out = self.d_out.unwrap_or(d_img);
        let text = match self.kind {
            HeadKind::Mlp => {
                if self.layers == 0 || self.layers > MAX_LAYERS {
                    return Err(Error::Config(format!(
                        "head.layers = {} outside 1..={MAX_LAYERS}",
                        self.layers
                    )));
                }
                TextHeadSpec::Mlp {
                    widths: default_mlp_widths(d_tok, d_out, self.layers, self.hidden),
                }
            }
            HeadKind::Lookup => {
                let vocab = match (self.vocab, max_token_id) {
                    (Some(v), _) => v,
                    (None, Some(m)) => m as usize + 1,
                    (None, None) => {
                        return Err(Error::Config(
                            "lookup head needs head.vocab (no token ids in the data)".into(),
                        ))
                    }
                };
                TextHeadSpec::Lookup { vocab, d_out }
            }
        };
        let image = self.image_head.then(|| {
            default_mlp_widths(d_img, d_out, self.image_layers, self.image_hidden)
        });
        let spec = HeadSpec { text, image };
        spec.validate(Some(d_img))?;
        Ok(spec)
    }
}

/// Training data: either plain shards read in full or a weighted mixture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureSpec>,
    /// Paired shard scored by recall@k at every evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    #[serde(default = "yes")]
    pub drop_last: bool,
}

/// One zero-shot evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub name: String,
    /// Template shard; `sample_id` is the class index.
    pub templates: PathBuf,
    /// Image shard; `sample_id` is the label.
    pub set: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// One class name per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<PathBuf>,
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Head initialization seed.
    pub seed: u64,
    /// Shuffling and mixture-subset seed; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    /// Effective batch size `B`.
    pub batch_size: usize,
    /// Micro-batches per step `a`; each holds `B / a` samples.
    #[serde(default = "one")]
    pub accumulation: usize,
    /// Upper bound on `B·a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_budget: Option<usize>,
    /// Total optimizer steps `T`.
    pub steps: u64,
    #[serde(default)]
    pub warmup: u64,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub eval_every: u64,
    /// Defaults to `eval_every`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    /// Stop (with a checkpoint) after this step without finishing the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_after: Option<u64>,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub recall_direction: RecallDirection,
    #[serde(default)]
    pub head: HeadConfig,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zero_shot: Vec<ZeroShotConfig>,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_layers() -> usize {
    4
}
fn default_log_scale() -> f64 {
    DEFAULT_LOG_SCALE
}
fn default_beta1() -> f64 {
    AdamWConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamWConfig::default().beta2
}
fn default_eps() -> f64 {
    AdamWConfig::default().eps
}

impl TrainConfig {
    /// A config with defaults everywhere except the required fields.
    pub fn new(train: Vec<PathBuf>, batch_size: usize, steps: u64, lr: f64) -> Self {
        Self {
            seed: 0,
            data_seed: None,
            batch_size,
            accumulation: 1,
            memory_budget: None,
            steps,
            warmup: 0,
            lr,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            eval_every: steps.max(1),
            checkpoint_every: None,
            stop_after: None,
            strict: false,
            recall_direction: RecallDirection::default(),
            head: HeadConfig::default(),
            data: DataConfig {
                train,
                mixture: None,
                validation: None,
                drop_last: true,
            },
            zero_shot: Vec::new(),
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn checkpoint_every(&self) -> u64 {
        self.checkpoint_every.unwrap_or(self.eval_every)
    }

    pub fn micro_batch(&self) -> usize {
        self.batch_size / self.accumulation.max(1)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// The learning-rate schedule; `None` for a zero-step run.
    pub fn schedule(&self) -> Result<Option<Schedule>> {
        if self.steps == 0 {
            return Ok(None);
        }
        Schedule::new(self.lr, self.warmup, self.steps).map(Some)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.accumulation == 0 || self.batch_size % self.accumulation != 0 {
            return bad(format!(
                "accumulation {} must divide batch_size {}",
                self.accumulation, self.batch_size
            ));
        }
        if let Some(budget) = self.memory_budget {
            if self.batch_size * self.accumulation > budget {
                return bad(format!(
                    "batch_size·accumulation = {} exceeds memory_budget {budget}",
                    self.batch_size * self.accumulation
                ));
            }
        }
        if self.eval_every == 0 || self.checkpoint_every == Some(0) {
            return bad("eval_every and checkpoint_every must be at least 1".into());
        }
        if self.steps > 0 && self.steps < self.eval_every {
            return bad(format!(
                "steps {} shorter than eval_every {}",
                self.steps, self.eval_every
            ));
        }
        self.schedule()?;
        self.adamw().validate()?;
        if !self.head.log_scale_init.is_finite() {
            return bad("head.log_scale_init must be finite".into());
        }
        match (&self.data.mixture, self.data.train.is_empty()) {
            (Some(_), false) => return bad("set data.train or data.mixture, not both".into()),
            (None, true) => return bad("no training data: set data.train or data.mixture".into()),
            (Some(m), true) if m.sources.is_empty() => {
                return bad("data.mixture has no sources".into())
            }
            _ => {}
        }
        let mut names: Vec<&str> = self.zero_shot.iter().map(|z| z.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("zero-shot set names must be unique".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves every relative data path against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.train.iter_mut().for_each(fix);
        if let Some(v) = &mut self.data.validation {
            fix(v);
        }
        if let Some(m) = &mut self.data.mixture {
            for s in &mut m.sources {
                s.shards.iter_mut().for_each(fix);
                if let Some(i) = &mut s.index_list {
                    fix(i);
                }
            }
        }
        for z in &mut self.zero_shot {
            fix(&mut z.templates);
            fix(&mut z.set);
            if let Some(l) = &mut z.labels {
                fix(l);
            }
            if let Some(c) = &mut z.class_names {
                fix(c);
            }
        }
    }

    /// Fields that differ from `other`, as `(key, self value, other value)`,
    /// ignoring cadence-only keys.
    pub fn semantic_diff(&self, other: &Self) -> Result<Vec<(String, String, String)>> {
        let a = flatten(self)?;
        let b = flatten(other)?;
        let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        let missing = "<unset>".to_string();
        Ok(keys
            .into_iter()
            .filter(|k| !CADENCE_KEYS.contains(&k.as_str()))
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| {
                (
                    k.clone(),
                    a.get(k).unwrap_or(&missing).clone(),
                    b.get(k).unwrap_or(&missing).clone(),
                )
            })
            .collect())
    }
}

fn flatten(cfg: &TrainConfig) -> Result<BTreeMap<String, String>> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let value = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    walk("", &value, &mut out);
    Ok(out)
}

/// Applies `key.path=value` to a parsed config document. The value is read
/// as a TOML literal when it parses as one and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a config document, applies overrides in order and deserializes.
pub fn config_with_overrides(text: &str, overrides: &[String]) -> Result<TrainConfig> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    TrainConfig::deserialize(toml::Value::Table(doc)).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
batch_size = 16
steps = 100
warmup = 5
lr = 0.001
eval_every = 50

[data]
train = ["train.apes"]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = TrainConfig::from_toml(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.accumulation, 1);
        assert_eq!(c.head.layers, 4);
        assert_eq!(c.checkpoint_every(), 50);
        assert_eq!(c.data_seed(), 7);
        assert!(c.data.drop_last);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        assert!(matches!(TrainConfig::from_toml(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("[data]", "[head]\ndepth = 3\n[data]");
        assert!(TrainConfig::from_toml(&text).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = TrainConfig::from_toml(MINIMAL).unwrap();
        c.head.kind = HeadKind::Lookup;
        c.zero_shot.push(ZeroShotConfig {
            name: "synth".into(),
            templates: "t.apes".into(),
            set: "s.apes".into(),
            labels: None,
            class_names: None,
        });
        let back = TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation_rules() {
        let base = TrainConfig::from_toml(MINIMAL).unwrap();
        let mut c = base.clone();
        c.accumulation = 3;
        assert!(c.validate().is_err());
        c.accumulation = 4;
        c.validate().unwrap();
        c.memory_budget = Some(63);
        assert!(c.validate().is_err());
        c.memory_budget = Some(64);
        c.validate().unwrap();

        let mut c = base.clone();
        c.eval_every = 101;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.warmup = 100;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.steps = 0;
        c.validate().unwrap();
        assert!(c.schedule().unwrap().is_none());
    }

    #[test]
    fn overrides_win_and_parse_literals() {
        let c = config_with_overrides(
            MINIMAL,
            &[
                "lr=0.003".into(),
                "head.kind=lookup".into(),
                "head.image_head=true".into(),
                "data.validation=val.apes".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.lr, 0.003);
        assert_eq!(c.head.kind, HeadKind::Lookup);
        assert!(c.head.image_head);
        assert_eq!(c.data.validation, Some(PathBuf::from("val.apes")));
        assert!(config_with_overrides(MINIMAL, &["nope=1".into()]).is_err());
        assert!(config_with_overrides(MINIMAL, &["lr".into()]).is_err());
    }

    #[test]
    fn diff_ignores_cadence() {
        let a = TrainConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.eval_every = 10;
        b.checkpoint_every = Some(20);
        b.stop_after = Some(30);
        assert!(a.semantic_diff(&b).unwrap().is_empty());
        b.weight_decay = 0.1;
        let d = a.semantic_diff(&b).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].0, "weight_decay");
    }

    #[test]
    fn resolve_head_shapes() {
        let h = HeadConfig::default();
        let spec = h.resolve(64, 32, None).unwrap();
        assert_eq!(
            spec.text,
            TextHeadSpec::Mlp {
                widths: vec![32, 64, 64, 64, 64]
            }
        );
        let lookup = HeadConfig {
            kind: HeadKind::Lookup,
            ..HeadConfig::default()
        };
        assert_eq!(
            lookup.resolve(8, 4, Some(99)).unwrap().text,
            TextHeadSpec::Lookup { vocab: 100, d_out: 8 }
        );
        assert!(lookup.resolve(8, 4, None).is_err());
        let deep = HeadConfig {
            layers: 9,
            ..HeadConfig::default()
        };
        assert!(deep.resolve(8, 4, None).is_err());
    }
}
