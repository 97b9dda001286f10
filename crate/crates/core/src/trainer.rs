//! KL-constrained distillation of tactic adapters on a frozen base.
//!
//! Per head `h` the objective is `bc_h * CE(adapted, action) + alpha_h *
//! KL(base || adapted)`, each term averaged over batch rows. Only adapter
//! tensors are bound as trainable leaves, so the base cannot move.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterSet, AttachPoint, Fusion};
use crate::checkpoint::{Checkpoint, CheckpointError, Dtype};
use crate::error::NumericError;
use crate::graph::{Graph, Var};
use crate::policy::{ActionSample, BasePolicy, Head, Observation, PolicyError, TrunkCache, TrunkRows};
use crate::taxonomy::{TacticDistribution, TACTIC_DIM};
use crate::tensor::ParamStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_EMA_DECAY: f64 = 0.99;
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("non-finite {what} for head {head} at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    NonFinite {
        step: u64,
        head: String,
        what: String,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("i/o at step {step} on {path}: {source}")]
    Io {
        step: u64,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

type Result<T> = std::result::Result<T, TrainError>;

// ── configuration ─────────────────────────────────────────────────────

/// One weight per head, indexed by [`Head::index`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadWeights(pub [f64; 6]);

impl HeadWeights {
    pub const fn uniform(w: f64) -> Self {
        HeadWeights([w; 6])
    }

    /// Configurations A-D for the KL weights.
    pub fn preset(name: &str) -> Option<Self> {
        // order: action_type, delay, queued, selected_units, target_unit, location
        match name {
            "A" => Some(HeadWeights([1.0; 6])),
            "B" => Some(HeadWeights([10.0, 1.0, 10.0, 3.0, 1.0, 0.0])),
            "C" => Some(HeadWeights([10.0, 1.0, 10.0, 10.0, 10.0, 10.0])),
            "D" => Some(HeadWeights([100.0; 6])),
            _ => None,
        }
    }

    /// Default behavior-cloning weights.
    pub fn default_bc() -> Self {
        HeadWeights([30.0, 9.0, 1.0, 4.0, 4.0, 8.0])
    }

    pub fn get(&self, h: Head) -> f64 {
        self.0[h.index()]
    }

    pub fn set(&mut self, h: Head, w: f64) {
        self.0[h.index()] = w;
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        Head::ALL.iter().map(|h| (h.name().to_string(), self.get(*h))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradClipKind {
    GlobalNorm,
    MomentumNorm,
}

impl GradClipKind {
    pub fn name(self) -> &'static str {
        match self {
            GradClipKind::GlobalNorm => "global_norm",
            GradClipKind::MomentumNorm => "momentum_norm",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "global_norm" => Some(GradClipKind::GlobalNorm),
            "momentum_norm" => Some(GradClipKind::MomentumNorm),
            _ => None,
        }
    }
}

/// Forward is `KL(base || adapted)`; reverse swaps the arguments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    Forward,
    Reverse,
}

impl KlDirection {
    pub fn name(self) -> &'static str {
        match self {
            KlDirection::Forward => "forward",
            KlDirection::Reverse => "reverse",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub kl_head_weights: HeadWeights,
    /// Preset name the KL weights came from, if any.
    pub preset: Option<String>,
    pub bc_head_weights: HeadWeights,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warm_up_steps: u64,
    pub total_steps: u64,
    pub lr_decay: f64,
    pub lr_decay_interval: u64,
    pub grad_clip_threshold: f64,
    pub grad_clip_kind: GradClipKind,
    pub batch_size: usize,
    pub trajectory_length: usize,
    pub seed: u64,
    pub checkpoint_freq: u64,
    pub kl_direction: KlDirection,
    pub active_adaptors: Vec<AttachPoint>,
    pub fusion: Fusion,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 5000 steps with a 1000-step warmup.
    fn default() -> Self {
        Self {
            kl_head_weights: HeadWeights::preset("A").expect("preset A"),
            preset: Some("A".into()),
            bc_head_weights: HeadWeights::default_bc(),
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            warm_up_steps: 1000,
            total_steps: 5000,
            lr_decay: 1.0,
            lr_decay_interval: 10000,
            grad_clip_threshold: 1.4,
            grad_clip_kind: GradClipKind::MomentumNorm,
            batch_size: 16,
            trajectory_length: 8,
            seed: 0,
            checkpoint_freq: 1000,
            kl_direction: KlDirection::Forward,
            active_adaptors: AttachPoint::ALL.to_vec(),
            fusion: Fusion::Add,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "learning_rate",
    "weight_decay",
    "warm_up_steps",
    "use_warmup",
    "steps",
    "lr_decay",
    "lr_decay_interval",
    "grad_clip.type",
    "grad_clip.threshold",
    "batch_size",
    "trajectory_length",
    "seed",
    "save_ckpt_after_iter.freq",
    "kl_direction",
    "head_weights",
    "adaptor.active_adaptors",
    "adaptor.fusion_method",
    "adaptor.tactic_dim",
];

/// Flattens nested tables into dotted keys.
pub fn flatten_toml(table: &toml::Table) -> BTreeMap<String, toml::Value> {
    fn walk(prefix: &str, t: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(inner) => walk(&key, inner, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(TrainError::Config(format!("`{key}` must be a number"))),
    }
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(TrainError::Config(format!("`{key}` must be a non-negative integer"))),
    }
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| TrainError::Config(format!("`{key}` must be a string")))
}

impl TrainConfig {
    /// Parses a config file with dotted keys; unset keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        Self::from_flat(&flatten_toml(&table))
    }

    pub fn from_flat(flat: &BTreeMap<String, toml::Value>) -> Result<Self> {
        let unknown: Vec<String> = flat
            .keys()
            .filter(|k| {
                !CONFIG_KEYS.contains(&k.as_str())
                    && !k.strip_prefix("loss_weight.").is_some_and(is_weight_key)
                    && !k.strip_prefix("head_weights.").is_some_and(is_weight_key)
            })
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(TrainError::UnknownKeys(unknown));
        }
        let mut c = TrainConfig::default();
        let mut explicit_kl = false;
        for (k, v) in flat {
            match k.as_str() {
                "learning_rate" => c.learning_rate = as_f64(k, v)?,
                "weight_decay" => c.weight_decay = as_f64(k, v)?,
                "warm_up_steps" => c.warm_up_steps = as_u64(k, v)?,
                "use_warmup" => {
                    if !v.as_bool().ok_or_else(|| TrainError::Config("`use_warmup` must be a boolean".into()))? {
                        c.warm_up_steps = 0;
                    }
                }
                "steps" => c.total_steps = as_u64(k, v)?,
                "lr_decay" => c.lr_decay = as_f64(k, v)?,
                "lr_decay_interval" => c.lr_decay_interval = as_u64(k, v)?,
                "grad_clip.type" => {
                    let s = as_str(k, v)?;
                    c.grad_clip_kind = GradClipKind::from_name(s)
                        .ok_or_else(|| TrainError::Config(format!("unknown grad_clip.type `{s}`")))?;
                }
                "grad_clip.threshold" => c.grad_clip_threshold = as_f64(k, v)?,
                "batch_size" => c.batch_size = as_u64(k, v)? as usize,
                "trajectory_length" => c.trajectory_length = as_u64(k, v)? as usize,
                "seed" => c.seed = as_u64(k, v)?,
                "save_ckpt_after_iter.freq" => c.checkpoint_freq = as_u64(k, v)?,
                "kl_direction" => {
                    c.kl_direction = match as_str(k, v)? {
                        "forward" => KlDirection::Forward,
                        "reverse" => KlDirection::Reverse,
                        s => return Err(TrainError::Config(format!("unknown kl_direction `{s}`"))),
                    }
                }
                "head_weights" => {
                    let s = as_str(k, v)?;
                    c.kl_head_weights =
                        HeadWeights::preset(s).ok_or_else(|| TrainError::Config(format!("unknown preset `{s}`")))?;
                    c.preset = Some(s.to_string());
                }
                "adaptor.active_adaptors" => {
                    let arr = v
                        .as_array()
                        .ok_or_else(|| TrainError::Config("`adaptor.active_adaptors` must be a list".into()))?;
                    c.active_adaptors = arr
                        .iter()
                        .map(|x| {
                            let s = as_str(k, x)?;
                            AttachPoint::from_name(s)
                                .or_else(|| (s == "target_location").then_some(AttachPoint::Location))
                                .ok_or_else(|| TrainError::Config(format!("unknown adaptor `{s}`")))
                        })
                        .collect::<Result<_>>()?;
                }
                "adaptor.fusion_method" => {
                    let s = as_str(k, v)?;
                    c.fusion = Fusion::from_name(s).ok_or_else(|| TrainError::Config(format!("unknown fusion `{s}`")))?;
                }
                "adaptor.tactic_dim" => {
                    if as_u64(k, v)? != TACTIC_DIM as u64 {
                        return Err(TrainError::Config(format!("adaptor.tactic_dim must be {TACTIC_DIM}")));
                    }
                }
                _ => {}
            }
        }
        // explicit weights override a preset regardless of key order
        for (k, v) in flat {
            if let Some(h) = k.strip_prefix("loss_weight.").and_then(weight_head) {
                c.bc_head_weights.set(h, as_f64(k, v)?);
            }
            if let Some(h) = k.strip_prefix("head_weights.").and_then(weight_head) {
                if !explicit_kl {
                    if flat.contains_key("head_weights") {
                        return Err(TrainError::Config("give head_weights as a preset or a map, not both".into()));
                    }
                    c.kl_head_weights = HeadWeights::uniform(0.0);
                    c.preset = None;
                    explicit_kl = true;
                }
                c.kl_head_weights.set(h, as_f64(k, v)?);
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Dotted-key snapshot; parses back to an equal config.
    pub fn to_toml_string(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        line("learning_rate", fmt_f(self.learning_rate));
        line("weight_decay", fmt_f(self.weight_decay));
        line("warm_up_steps", self.warm_up_steps.to_string());
        line("steps", self.total_steps.to_string());
        line("lr_decay", fmt_f(self.lr_decay));
        line("lr_decay_interval", self.lr_decay_interval.to_string());
        line("grad_clip.type", format!("\"{}\"", self.grad_clip_kind.name()));
        line("grad_clip.threshold", fmt_f(self.grad_clip_threshold));
        line("batch_size", self.batch_size.to_string());
        line("trajectory_length", self.trajectory_length.to_string());
        line("seed", self.seed.to_string());
        line("save_ckpt_after_iter.freq", self.checkpoint_freq.to_string());
        line("kl_direction", format!("\"{}\"", self.kl_direction.name()));
        for h in Head::ALL {
            line(&format!("loss_weight.{}", h.name()), fmt_f(self.bc_head_weights.get(h)));
        }
        match self.preset.as_deref().filter(|p| HeadWeights::preset(p) == Some(self.kl_head_weights)) {
            Some(p) => line("head_weights", format!("\"{p}\"")),
            None => {
                for h in Head::ALL {
                    line(&format!("head_weights.{}", h.name()), fmt_f(self.kl_head_weights.get(h)));
                }
            }
        }
        let names: Vec<String> = self.active_adaptors.iter().map(|p| format!("\"{}\"", p.name())).collect();
        line("adaptor.active_adaptors", format!("[{}]", names.join(", ")));
        line("adaptor.fusion_method", format!("\"{}\"", self.fusion.name()));
        line("adaptor.tactic_dim", TACTIC_DIM.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (what, w) in [("head_weights", &self.kl_head_weights), ("loss_weight", &self.bc_head_weights)] {
            if let Some(h) = Head::ALL.iter().find(|h| !(w.get(**h) >= 0.0 && w.get(**h).is_finite())) {
                return bad(format!("{what}.{} must be a finite non-negative number", h.name()));
            }
        }
        if self.trajectory_length == 0 {
            return bad("trajectory_length must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.warm_up_steps > self.total_steps {
            return bad(format!("warm_up_steps {} exceeds steps {}", self.warm_up_steps, self.total_steps));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.lr_decay > 0.0) {
            return bad("learning_rate and lr_decay must be positive, weight_decay non-negative".into());
        }
        if self.lr_decay_interval == 0 {
            return bad("lr_decay_interval must be positive".into());
        }
        if !(self.grad_clip_threshold > 0.0) {
            return bad("grad_clip.threshold must be positive".into());
        }
        if self.active_adaptors.is_empty() {
            return bad("adaptor.active_adaptors is empty".into());
        }
        Ok(())
    }
}

fn fmt_f(x: f64) -> String {
    // `{:?}` always keeps a decimal point and round-trips exactly
    format!("{x:?}")
}

fn weight_head(name: &str) -> Option<Head> {
    Head::from_name(name)
}

fn is_weight_key(name: &str) -> bool {
    weight_head(name).is_some()
}

// ── data ──────────────────────────────────────────────────────────────

/// One tactic-labeled trajectory; `tau` is constant over its steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<ActionSample>,
    pub tau: TacticDistribution,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn traj_len(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.observations.len())
    }

    pub fn validate(&self, base: &BasePolicy) -> Result<()> {
        let l = self.traj_len();
        if self.is_empty() || l == 0 {
            return Err(TrainError::Dataset("dataset is empty".into()));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.observations.len() != l || t.actions.len() != l {
                return Err(TrainError::Dataset(format!("trajectory {i} does not have {l} steps")));
            }
            for (o, a) in t.observations.iter().zip(&t.actions) {
                o.validate(&base.dims)
                    .and_then(|_| a.validate(o, &base.dims))
                    .map_err(|e| TrainError::Dataset(format!("trajectory {i}: {e}")))?;
            }
        }
        Ok(())
    }

    /// One trajectory per JSON line.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for t in &self.trajectories {
            out.push_str(&serde_json::to_string(t).map_err(std::io::Error::other)?);
            out.push('\n');
        }
        fs::write(path, out)
    }

    pub fn read_jsonl(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let trajectories = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))
            })
            .collect::<std::io::Result<_>>()?;
        Ok(Self { trajectories })
    }
}

/// Per-row supervision targets in time-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets {
    /// Categorical index per head; unused for selected units.
    pub index: [Vec<usize>; 6],
    /// `rows * max_entities` in `{0, 1}`.
    pub selected: Vec<f64>,
}

impl BatchTargets {
    /// `actions[b][t]` laid out as row `t * B + b`.
    pub fn from_actions(actions: &[&[ActionSample]]) -> Self {
        let b = actions.len();
        let l = actions.first().map_or(0, |a| a.len());
        let rows: Vec<&ActionSample> = (0..l).flat_map(|t| (0..b).map(move |i| &actions[i][t])).collect();
        let index = Head::ALL.map(|h| rows.iter().map(|a| a.index(h).unwrap_or(0)).collect());
        let selected = rows
            .iter()
            .flat_map(|a| a.selected_units.iter().map(|&s| if s { 1.0 } else { 0.0 }))
            .collect();
        Self { index, selected }
    }
}

/// `B` trajectories of cached trunk rows with their labels.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub rows: TrunkRows,
    pub taus: Vec<TacticDistribution>,
    pub targets: BatchTargets,
}

impl TrainBatch {
    pub fn assemble(ds: &Dataset, cache: &TrunkCache, traj: &[usize]) -> Self {
        let actions: Vec<&[ActionSample]> = traj.iter().map(|&i| ds.trajectories[i].actions.as_slice()).collect();
        Self {
            rows: cache.gather(traj),
            taus: traj.iter().map(|&i| ds.trajectories[i].tau.clone()).collect(),
            targets: BatchTargets::from_actions(&actions),
        }
    }
}

// ── loss ──────────────────────────────────────────────────────────────

/// Per-row behavior-cloning loss `[rows]` for one head.
pub fn bc_rows(g: &mut Graph, head: Head, logits: Var, targets: &BatchTargets, mask: Option<&[bool]>) -> Result<Var> {
    let mask = if head.entity_masked() { mask } else { None };
    if head == Head::SelectedUnits {
        return Ok(g.bce_rows(logits, &targets.selected, mask)?);
    }
    let ls = g.log_softmax(logits, mask)?;
    let picked = g.pick(ls, &targets.index[head.index()])?;
    Ok(g.scale(picked, -1.0)?)
}

/// Scalar BC and KL nodes for one head.
///
/// `adapted` and `base` are `[rows, dim]` logits; `base` is treated as a
/// constant teacher. For selected units `targets.selected` is used and both
/// terms are per-entity Bernoulli quantities averaged over valid entities.
pub fn head_terms(
    g: &mut Graph,
    head: Head,
    adapted: Var,
    base: Var,
    targets: &BatchTargets,
    mask: Option<&[bool]>,
    direction: KlDirection,
) -> Result<(Var, Var)> {
    let bc = bc_rows(g, head, adapted, targets, mask)?;
    let mask = if head.entity_masked() { mask } else { None };
    let kl = match (head == Head::SelectedUnits, direction) {
        (true, KlDirection::Forward) => g.bernoulli_kl_rows(base, adapted, mask, true)?,
        (true, KlDirection::Reverse) => g.bernoulli_kl_rows(adapted, base, mask, false)?,
        (false, KlDirection::Forward) => g.kl_rows(base, adapted, mask, true)?,
        (false, KlDirection::Reverse) => g.kl_rows(adapted, base, mask, false)?,
    };
    Ok((g.mean(bc)?, g.mean(kl)?))
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub bc: [Var; 6],
    pub kl: [Var; 6],
}

/// Per-head breakdown of a batch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub bc: [f64; 6],
    pub kl: [f64; 6],
}

impl LossReport {
    fn from_graph(g: &Graph, v: &LossVars) -> Self {
        Self {
            total: g.scalar(v.total),
            bc: v.bc.map(|x| g.scalar(x)),
            kl: v.kl.map(|x| g.scalar(x)),
        }
    }

    /// First head with a non-finite term, as `(head, "bc" | "kl")`.
    pub fn non_finite(&self) -> Option<(Head, &'static str)> {
        Head::ALL.into_iter().find_map(|h| {
            if !self.bc[h.index()].is_finite() {
                Some((h, "bc"))
            } else if !self.kl[h.index()].is_finite() {
                Some((h, "kl"))
            } else {
                None
            }
        })
    }
}

/// Builds the full loss on `g`; adapter tensors must already be bound as `ap`.
pub fn loss_graph(
    g: &mut Graph,
    base: &BasePolicy,
    adapters: &AdapterSet,
    ap: &crate::tensor::Bound,
    batch: &TrainBatch,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    if let Some(name) = adapters.store.iter().find(|(_, t)| t.values().iter().any(|v| !v.is_finite())).map(|(n, _)| n) {
        let point = name.strip_prefix(crate::adapter::ADAPTER_PREFIX).unwrap_or(name);
        return Err(TrainError::NonFinite {
            step: 0,
            head: point.split('.').next().unwrap_or(point).to_string(),
            what: format!("adapter parameter `{name}`"),
            last_checkpoint: None,
        });
    }
    let d = &base.dims;
    let bp = base.store.bind(g);
    let (core, hi) = batch.rows.to_graph(g, d)?;
    let r = batch.rows.rows();
    let teacher = Head::ALL
        .map(|h| g.constant(vec![r, d.head_dim(h)], batch.rows.base_logits[h.index()].clone()))
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let teacher: [Var; 6] = teacher.try_into().expect("six heads");
    let (heads, _) = adapters.conditioned_heads(g, base, &bp, ap, core, &hi, Some(teacher), &batch.taus)?;
    let mut total = None;
    let mut bc = teacher;
    let mut kl = teacher;
    for h in Head::ALL {
        let i = h.index();
        let (b, k) = head_terms(g, h, heads[i], teacher[i], &batch.targets, Some(&hi.mask), cfg.kl_direction).map_err(
            |e| match e {
                TrainError::Numeric(NumericError::NonFinite(msg)) => TrainError::NonFinite {
                    step: 0,
                    head: h.name().into(),
                    what: msg,
                    last_checkpoint: None,
                },
                other => other,
            },
        )?;
        bc[i] = b;
        kl[i] = k;
        let wb = g.scale(b, cfg.bc_head_weights.get(h))?;
        let wk = g.scale(k, cfg.kl_head_weights.get(h))?;
        let term = g.add(wb, wk)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(LossVars {
        total: total.expect("six heads"),
        bc,
        kl,
    })
}

/// Evaluates the loss without gradients.
pub fn loss_batch(base: &BasePolicy, adapters: &AdapterSet, batch: &TrainBatch, cfg: &TrainConfig) -> Result<LossReport> {
    let mut g = Graph::new();
    let ap = adapters.store.bind(&mut g);
    let v = loss_graph(&mut g, base, adapters, &ap, batch, cfg)?;
    Ok(LossReport::from_graph(&g, &v))
}

// ── schedule, clipping, optimizer ─────────────────────────────────────

/// Linear warmup to `learning_rate`, then a step decay by `lr_decay` every
/// `lr_decay_interval` steps.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warm_up_steps {
        return cfg.learning_rate * step as f64 / cfg.warm_up_steps as f64;
    }
    let k = (step / cfg.lr_decay_interval) as i32;
    cfg.learning_rate * cfg.lr_decay.powi(k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Running mean of gradient norms for `momentum_norm` clipping.
    pub grad_norm_ema: Option<f64>,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            grad_norm_ema: None,
            weight_decay,
        }
    }

    fn write_into(&self, store: &ParamStore, ck: &mut Checkpoint) -> Result<()> {
        for (i, (name, t)) in store.iter().enumerate() {
            ck.push(format!("opt.m.{name}"), crate::Tensor::new(t.shape().to_vec(), self.m[i].clone())?);
            ck.push(format!("opt.v.{name}"), crate::Tensor::new(t.shape().to_vec(), self.v[i].clone())?);
        }
        ck.meta.insert("opt.step".into(), self.step.to_string());
        ck.meta.insert(
            "opt.grad_norm_ema".into(),
            self.grad_norm_ema.map_or("none".into(), |x| format!("{:016x}", x.to_bits())),
        );
        Ok(())
    }

    fn read_from(store: &ParamStore, ck: &Checkpoint, weight_decay: f64) -> Result<Self> {
        let mut s = Self::new(store, weight_decay);
        let missing = |k: &str| TrainError::Config(format!("checkpoint lacks `{k}`"));
        for (i, (name, _)) in store.iter().enumerate() {
            for (kind, dst) in [("m", &mut s.m[i]), ("v", &mut s.v[i])] {
                let key = format!("opt.{kind}.{name}");
                let t = ck.get(&key).ok_or_else(|| missing(&key))?;
                if t.len() != dst.len() {
                    return Err(TrainError::Config(format!("`{key}` has the wrong size")));
                }
                dst.copy_from_slice(t.values());
            }
        }
        s.step = ck
            .meta
            .get("opt.step")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| missing("opt.step"))?;
        s.grad_norm_ema = match ck.meta.get("opt.grad_norm_ema").map(String::as_str) {
            Some("none") => None,
            Some(hex) => Some(f64::from_bits(
                u64::from_str_radix(hex, 16).map_err(|_| missing("opt.grad_norm_ema"))?,
            )),
            None => return Err(missing("opt.grad_norm_ema")),
        };
        Ok(s)
    }
}

/// Outcome of one clipping call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipInfo {
    pub norm: f64,
    pub scale: f64,
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` in place and updates the norm EMA for `momentum_norm`.
pub fn clip_gradients(grads: &mut [Vec<f64>], opt: &mut OptimizerState, cfg: &TrainConfig) -> ClipInfo {
    let norm = global_norm(grads);
    let limit = match cfg.grad_clip_kind {
        GradClipKind::GlobalNorm => cfg.grad_clip_threshold,
        GradClipKind::MomentumNorm => {
            let m = match opt.grad_norm_ema {
                None => norm,
                Some(m) => CLIP_EMA_DECAY * m + (1.0 - CLIP_EMA_DECAY) * norm,
            };
            opt.grad_norm_ema = Some(m);
            cfg.grad_clip_threshold * m
        }
    };
    let scale = if norm > 0.0 { (limit / norm).min(1.0) } else { 1.0 };
    if scale < 1.0 {
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    ClipInfo { norm, scale }
}

/// Adam with decoupled weight decay; advances `opt.step`.
pub fn adam_update(store: &mut ParamStore, grads: &[Vec<f64>], opt: &mut OptimizerState, lr: f64) {
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let p = store.get_mut(id).values_mut();
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        for j in 0..p.len() {
            let g = grads[i][j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let upd = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            p[j] -= lr * (upd + opt.weight_decay * p[j]);
        }
    }
}

// ── steps ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub bc: BTreeMap<String, f64>,
    pub kl: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl StepMetrics {
    pub fn kl_of(&self, h: Head) -> f64 {
        self.kl[h.name()]
    }
}

/// Forward, backward into adapters, clip, update.
pub fn train_step(
    batch: &TrainBatch,
    base: &BasePolicy,
    adapters: &mut AdapterSet,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let ap = adapters.store.bind(&mut g);
    let v = loss_graph(&mut g, base, adapters, &ap, batch, cfg).map_err(|e| match e {
        TrainError::NonFinite { head, what, .. } => TrainError::NonFinite {
            step: opt.step + 1,
            head,
            what,
            last_checkpoint: None,
        },
        other => other,
    })?;
    let report = LossReport::from_graph(&g, &v);
    if let Some((h, what)) = report.non_finite() {
        return Err(TrainError::NonFinite {
            step: opt.step + 1,
            head: h.name().into(),
            what: what.into(),
            last_checkpoint: None,
        });
    }
    g.backward(v.total)?;
    let mut grads: Vec<Vec<f64>> = adapters
        .store
        .ids()
        .map(|id| g.grad(ap[id]).map_or_else(|| vec![0.0; adapters.store.get(id).len()], <[f64]>::to_vec))
        .collect();
    if grads.iter().flatten().any(|x| !x.is_finite()) {
        return Err(TrainError::NonFinite {
            step: opt.step + 1,
            head: "all".into(),
            what: "gradient".into(),
            last_checkpoint: None,
        });
    }
    let clip = clip_gradients(&mut grads, opt, cfg);
    let lr = lr_at(opt.step + 1, cfg);
    adam_update(&mut adapters.store, &grads, opt, lr);
    Ok(StepMetrics {
        step: opt.step,
        lr,
        loss: report.total,
        bc: Head::ALL.iter().map(|h| (h.name().to_string(), report.bc[h.index()])).collect(),
        kl: Head::ALL.iter().map(|h| (h.name().to_string(), report.kl[h.index()])).collect(),
        grad_norm: clip.norm,
        clip_scale: clip.scale,
    })
}

/// Trajectory indices for a 1-based step: an epoch-wise seeded shuffle.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = (n / batch_size).max(1) as u64;
    let epoch = (step - 1) / per_epoch;
    let slot = ((step - 1) % per_epoch) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    (0..batch_size).map(|i| perm[(slot * batch_size + i) % n]).collect()
}

// ── training loop ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `step_<N>` checkpoints and the metrics log go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in `checkpoint_dir`.
    pub resume: bool,
    /// Stop early after this step (the schedule still uses `total_steps`).
    pub stop_at: Option<u64>,
}

pub struct TrainOutcome {
    pub adapters: AdapterSet,
    pub optimizer: OptimizerState,
    /// Metrics of the steps run in this call.
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_stem(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step}"))
}

/// Highest `step_<N>.manifest` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<(u64, PathBuf)> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let n = name.strip_prefix("step_")?.strip_suffix(".manifest")?.parse::<u64>().ok()?;
            Some((n, dir.join(name)))
        })
        .max_by_key(|(n, _)| *n)
}

fn save_step(dir: &Path, adapters: &AdapterSet, opt: &OptimizerState) -> Result<PathBuf> {
    let mut ck = adapters.to_checkpoint();
    opt.write_into(&adapters.store, &mut ck)?;
    Ok(ck.save(&checkpoint_stem(dir, opt.step), Dtype::F64)?)
}

/// Loads adapters and optimizer state from a `step_<N>` checkpoint.
pub fn load_step(path: &Path, base: &BasePolicy, cfg: &TrainConfig) -> Result<(AdapterSet, OptimizerState)> {
    let ck = Checkpoint::load(path)?;
    let adapters = AdapterSet::from_checkpoint(&ck, &base.dims)?;
    let opt = OptimizerState::read_from(&adapters.store, &ck, cfg.weight_decay)?;
    Ok((adapters, opt))
}

/// Seeded adapter initialization for a config.
pub fn init_adapters(base: &BasePolicy, cfg: &TrainConfig) -> Result<AdapterSet> {
    Ok(AdapterSet::new(&base.dims, &cfg.active_adaptors, cfg.fusion, cfg.seed.wrapping_add(0x5eed))?)
}

/// Runs `cfg.total_steps` updates; deterministic given `(dataset, base, cfg)`.
pub fn train(dataset: &Dataset, base: &BasePolicy, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    dataset.validate(base)?;
    if dataset.traj_len() != cfg.trajectory_length {
        return Err(TrainError::Dataset(format!(
            "trajectories have {} steps, config expects {}",
            dataset.traj_len(),
            cfg.trajectory_length
        )));
    }
    let obs: Vec<Vec<Observation>> = dataset.trajectories.iter().map(|t| t.observations.clone()).collect();
    let cache = TrunkCache::build(base, &obs)?;

    let io = |step: u64, path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { step, path, source }
    };
    let mut last_checkpoint = None;
    let (mut adapters, mut opt) = match (&opts.checkpoint_dir, opts.resume) {
        (Some(dir), true) => match latest_checkpoint(dir) {
            Some((_, path)) => {
                let (a, o) = load_step(&path, base, cfg)?;
                last_checkpoint = Some(path);
                (a, o)
            }
            None => fresh(base, cfg)?,
        },
        _ => fresh(base, cfg)?,
    };

    let mut log = match &opts.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io(opt.step, dir))?;
            let path = dir.join(METRICS_FILE);
            // keep only lines up to the restored step
            let kept: String = if opt.step > 0 {
                fs::read_to_string(&path)
                    .unwrap_or_default()
                    .lines()
                    .filter(|l| serde_json::from_str::<StepMetrics>(l).is_ok_and(|m| m.step <= opt.step))
                    .map(|l| format!("{l}\n"))
                    .collect()
            } else {
                String::new()
            };
            fs::write(&path, kept).map_err(io(opt.step, &path))?;
            let f = fs::OpenOptions::new().append(true).open(&path).map_err(io(opt.step, &path))?;
            Some((path, std::io::BufWriter::new(f)))
        }
        None => None,
    };

    let end = opts.stop_at.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    while opt.step < end {
        let idx = batch_indices(dataset.len(), cfg.batch_size, cfg.seed, opt.step + 1);
        let batch = TrainBatch::assemble(dataset, &cache, &idx);
        let m = train_step(&batch, base, &mut adapters, &mut opt, cfg).map_err(|e| match e {
            TrainError::NonFinite { step, head, what, .. } => TrainError::NonFinite {
                step,
                head,
                what,
                last_checkpoint: last_checkpoint.clone(),
            },
            other => other,
        })?;
        if let Some((path, w)) = &mut log {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(w, "{line}").map_err(io(m.step, path))?;
        }
        metrics.push(m);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_freq > 0 && opt.step % cfg.checkpoint_freq == 0 {
                if let Some((path, w)) = &mut log {
                    w.flush().map_err(io(opt.step, path))?;
                }
                let p = save_step(dir, &adapters, &opt)?;
                last_checkpoint = Some(p.clone());
                checkpoints.push(p);
            }
        }
    }
    if let Some((path, w)) = &mut log {
        w.flush().map_err(io(opt.step, path))?;
    }
    Ok(TrainOutcome {
        adapters,
        optimizer: opt,
        metrics,
        checkpoints,
    })
}

fn fresh(base: &BasePolicy, cfg: &TrainConfig) -> Result<(AdapterSet, OptimizerState)> {
    let a = init_adapters(base, cfg)?;
    let o = OptimizerState::new(&a.store, cfg.weight_decay);
    Ok((a, o))
}

/// Reads a JSON-lines metrics log.
pub fn read_metrics(path: &Path) -> std::io::Result<Vec<StepMetrics>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}
