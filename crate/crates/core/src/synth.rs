//! Scripted archetype players, synthetic tactic-labeled trajectories, base
//! pre-training and modulation measurements.
//!
//! Every archetype has its own action-type marginal, a Gaussian location
//! blob, an aggression level that skews delay and queueing, and a preference
//! vector over entity features that drives target and selection choices.
//! Observations are procedural: an AR(1) walk over scalar features, random
//! entity sets of random size and a random spatial grid.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSet;
use crate::categorical::{js_divergence, sigmoid, softmax};
use crate::graph::Graph;
use crate::nn::Init;
use crate::par;
use crate::policy::{ActionSample, BasePolicy, Head, Observation, PolicyDims, TrunkCache, TrunkRows};
use crate::taxonomy::{blend, one_hot, LabeledReplay, TacticCategory, TacticDistribution, TACTIC_DIM};
use crate::trainer::{
    adam_update, bc_rows, clip_gradients, BatchTargets, Dataset, GradClipKind, OptimizerState, TrainConfig, TrainError,
    Trajectory,
};

type Result<T> = std::result::Result<T, TrainError>;

/// Minimum pairwise total variation between action-type marginals.
pub const MIN_SEPARATION: f64 = 0.3;
/// Probability mass the softened label puts on the true archetype.
pub const LABEL_CONFIDENCE: f64 = 0.9;

const SCALAR_AR: f64 = 0.9;
const SCALAR_NOISE: f64 = 0.3;
const PREFERENCE_SHARPNESS: f64 = 2.0;

/// Four favored action types per archetype; every action is favored by three.
const FAVORED: [[usize; 4]; TACTIC_DIM] = [
    [0, 2, 4, 8],
    [0, 5, 6, 11],
    [0, 7, 9, 10],
    [1, 2, 5, 9],
    [1, 4, 7, 11],
    [1, 6, 8, 10],
    [2, 3, 10, 11],
    [3, 4, 6, 9],
    [3, 5, 7, 8],
];

const AGGRESSION: [f64; TACTIC_DIM] = [0.5, 0.6, 0.3, 0.1, 0.95, 0.75, 0.5, 0.35, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationBias {
    /// `(row, col)` in cell units.
    pub center: [f64; 2],
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeScript {
    /// Taxonomy key, e.g. `early_pool`.
    pub category: String,
    pub action_type: Vec<f64>,
    pub location: LocationBias,
    pub aggression: f64,
    pub entity_preference: Vec<f64>,
}

impl ArchetypeScript {
    pub fn category_index(&self) -> Option<usize> {
        TacticCategory::from_key(&self.category).map(TacticCategory::index)
    }

    /// Aggressive scripts favor short delays.
    pub fn delay_dist(&self, d: &PolicyDims) -> Vec<f64> {
        let slope = 4.0 * self.aggression - 2.0;
        let span = (d.delays.max(2) - 1) as f64;
        let logits: Vec<f64> = (0..d.delays).map(|i| -slope * i as f64 / span * 2.0).collect();
        softmax(&logits, None).expect("finite logits")
    }

    pub fn queued_prob(&self) -> f64 {
        0.2 + 0.6 * self.aggression
    }

    /// Normalized Gaussian heat over the grid, row-major.
    pub fn location_dist(&self, grid: usize) -> Vec<f64> {
        let s2 = 2.0 * self.location.sigma * self.location.sigma;
        let w: Vec<f64> = (0..grid * grid)
            .map(|i| {
                let (r, c) = ((i / grid) as f64, (i % grid) as f64);
                let dr = r - self.location.center[0];
                let dc = c - self.location.center[1];
                (-(dr * dr + dc * dc) / s2).exp() + 1e-4
            })
            .collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    fn entity_scores(&self, obs: &Observation, d: &PolicyDims) -> Vec<f64> {
        (0..d.max_entities)
            .map(|e| {
                let f = &obs.entities[e * d.entity_dim..(e + 1) * d.entity_dim];
                PREFERENCE_SHARPNESS * f.iter().zip(&self.entity_preference).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn target_dist(&self, obs: &Observation, d: &PolicyDims) -> Vec<f64> {
        softmax(&self.entity_scores(obs, d), Some(&obs.mask)).expect("observation has a valid entity")
    }

    /// Independent selection probabilities; zero for invalid entities.
    pub fn select_probs(&self, obs: &Observation, d: &PolicyDims) -> Vec<f64> {
        self.entity_scores(obs, d)
            .iter()
            .zip(&obs.mask)
            .map(|(s, &m)| if m { sigmoid(*s) } else { 0.0 })
            .collect()
    }

    pub fn sample(&self, obs: &Observation, d: &PolicyDims, rng: &mut impl Rng) -> ActionSample {
        ActionSample {
            action_type: draw(rng, &self.action_type),
            delay: draw(rng, &self.delay_dist(d)),
            queued: usize::from(rng.random_bool(self.queued_prob())),
            selected_units: self.select_probs(obs, d).iter().map(|&p| p > 0.0 && rng.random_bool(p)).collect(),
            target_unit: draw(rng, &self.target_dist(obs, d)),
            location: draw(rng, &self.location_dist(d.grid)),
        }
    }

    /// Softened one-hot label for this archetype.
    pub fn label(&self) -> TacticDistribution {
        let k = self.category_index().expect("validated category");
        soft_label(k)
    }
}

pub fn soft_label(k: usize) -> TacticDistribution {
    let off = (1.0 - LABEL_CONFIDENCE) / (TACTIC_DIM - 1) as f64;
    let mut p = [off; TACTIC_DIM];
    p[k] = LABEL_CONFIDENCE;
    TacticDistribution::new(&p).expect("valid soft label")
}

fn draw(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// The nine archetypes in taxonomy order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptSet {
    #[serde(rename = "archetype")]
    pub scripts: Vec<ArchetypeScript>,
}

impl ScriptSet {
    /// Built-in scripts; needs twelve action types.
    pub fn default_for(d: &PolicyDims) -> Result<Self> {
        if d.action_types != 12 {
            return Err(TrainError::Config(format!(
                "default archetype scripts need 12 action types, dims have {}",
                d.action_types
            )));
        }
        let step = d.grid as f64 / 3.0;
        let scripts = TacticCategory::ALL
            .iter()
            .map(|cat| {
                let k = cat.index();
                let mut action_type = vec![0.025; 12];
                for &a in &FAVORED[k] {
                    action_type[a] = 0.2;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
                ArchetypeScript {
                    category: cat.key().to_string(),
                    action_type,
                    location: LocationBias {
                        center: [step * ((k / 3) as f64 + 0.5), step * ((k % 3) as f64 + 0.5)],
                        sigma: d.grid as f64 / 10.0,
                    },
                    aggression: AGGRESSION[k],
                    entity_preference: (0..d.entity_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                }
            })
            .collect();
        let set = ScriptSet { scripts };
        set.validate(d)?;
        Ok(set)
    }

    pub fn from_toml(text: &str, d: &PolicyDims) -> Result<Self> {
        let set: ScriptSet = toml::from_str(text).map_err(|e| TrainError::Config(format!("archetype scripts: {e}")))?;
        set.validate(d)?;
        Ok(set)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scripts serialize")
    }

    pub fn validate(&self, d: &PolicyDims) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(format!("archetype scripts: {m}")));
        if self.scripts.len() != TACTIC_DIM {
            return bad(format!("expected {TACTIC_DIM} archetypes, got {}", self.scripts.len()));
        }
        for (i, s) in self.scripts.iter().enumerate() {
            if s.category_index() != Some(i) {
                return bad(format!("archetype {i} has category `{}`, expected taxonomy order", s.category));
            }
            if s.action_type.len() != d.action_types
                || s.action_type.iter().any(|p| !(*p >= 0.0))
                || (s.action_type.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return bad(format!("`{}` action_type is not a distribution over {} actions", s.category, d.action_types));
            }
            if !(0.0..=1.0).contains(&s.aggression) {
                return bad(format!("`{}` aggression outside [0, 1]", s.category));
            }
            if !(s.location.sigma > 0.0) || s.location.center.iter().any(|c| !c.is_finite()) {
                return bad(format!("`{}` location bias is invalid", s.category));
            }
            if s.entity_preference.len() != d.entity_dim || s.entity_preference.iter().any(|x| !x.is_finite()) {
                return bad(format!("`{}` entity_preference needs {} finite values", s.category, d.entity_dim));
            }
        }
        for i in 0..self.scripts.len() {
            for j in i + 1..self.scripts.len() {
                let tv = total_variation(&self.scripts[i].action_type, &self.scripts[j].action_type);
                if tv < MIN_SEPARATION {
                    return bad(format!(
                        "`{}` and `{}` are too close (total variation {tv:.3} < {MIN_SEPARATION})",
                        self.scripts[i].category, self.scripts[j].category
                    ));
                }
            }
        }
        Ok(())
    }

    /// Equal-weight mixture of the action-type marginals.
    pub fn mixture_action_marginal(&self) -> Vec<f64> {
        let n = self.scripts.len() as f64;
        let a = self.scripts[0].action_type.len();
        (0..a).map(|i| self.scripts.iter().map(|s| s.action_type[i]).sum::<f64>() / n).collect()
    }
}

// ── generation ────────────────────────────────────────────────────────

fn traj_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Procedural observation sequence of length `l`.
pub fn observation_trajectory(d: &PolicyDims, l: usize, rng: &mut impl Rng) -> Vec<Observation> {
    let noise = Normal::new(0.0, SCALAR_NOISE).expect("valid normal");
    let mut scalar: Vec<f64> = (0..d.scalar_dim).map(|_| noise.sample(rng)).collect();
    (0..l)
        .map(|_| {
            scalar.iter_mut().for_each(|s| *s = SCALAR_AR * *s + noise.sample(rng));
            let n = rng.random_range(1..=d.max_entities);
            Observation {
                scalar: scalar.clone(),
                entities: (0..d.max_entities * d.entity_dim)
                    .map(|i| if i / d.entity_dim < n { rng.random_range(-1.0..1.0) } else { 0.0 })
                    .collect(),
                mask: (0..d.max_entities).map(|e| e < n).collect(),
                spatial: (0..d.cells()).map(|_| rng.random_range(0.0..1.0)).collect(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Archetype index of each trajectory.
    pub archetypes: Vec<usize>,
}

impl SyntheticData {
    pub fn labels(&self) -> Vec<LabeledReplay> {
        self.dataset
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| LabeledReplay::new(format!("synth-{i:05}"), t.tau.clone()).expect("valid id"))
            .collect()
    }
}

/// `n` trajectories of length `l`, archetypes assigned round-robin.
/// A pure function of its arguments.
pub fn generate_dataset(scripts: &ScriptSet, d: &PolicyDims, n: usize, l: usize, seed: u64) -> Result<SyntheticData> {
    scripts.validate(d)?;
    if n == 0 || l == 0 {
        return Err(TrainError::Dataset("need at least one trajectory of at least one step".into()));
    }
    let k = scripts.scripts.len();
    let trajectories = par::map_range(n, |i| {
        let mut rng = traj_rng(seed, i);
        let script = &scripts.scripts[i % k];
        let observations = observation_trajectory(d, l, &mut rng);
        let actions = observations.iter().map(|o| script.sample(o, d, &mut rng)).collect();
        Trajectory {
            observations,
            actions,
            tau: script.label(),
        }
    });
    Ok(SyntheticData {
        dataset: Dataset { trajectories },
        archetypes: (0..n).map(|i| i % k).collect(),
    })
}

/// Observation-only trajectories for evaluation.
pub fn eval_observations(d: &PolicyDims, n_traj: usize, l: usize, seed: u64) -> Vec<Vec<Observation>> {
    par::map_range(n_traj, |i| observation_trajectory(d, l, &mut traj_rng(seed ^ 0xe7a1, i)))
}

// ── base pre-training ─────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

pub struct PretrainOutcome {
    pub base: BasePolicy,
    /// Summed per-head BC loss per step.
    pub losses: Vec<f64>,
}

/// Mean per-head BC loss of a policy's own logits on a dataset.
pub fn bc_loss(base: &BasePolicy, ds: &Dataset) -> Result<[f64; 6]> {
    let obs: Vec<Vec<Observation>> = ds.trajectories.iter().map(|t| t.observations.clone()).collect();
    let cache = TrunkCache::build(base, &obs)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let rows = cache.gather(&idx);
    let actions: Vec<&[ActionSample]> = ds.trajectories.iter().map(|t| t.actions.as_slice()).collect();
    let targets = BatchTargets::from_actions(&actions);
    let mut g = Graph::new();
    let mut out = [0.0; 6];
    for h in Head::ALL {
        let lg = g.constant(vec![rows.rows(), base.dims.head_dim(h)], rows.base_logits[h.index()].clone())?;
        let r = bc_rows(&mut g, h, lg, &targets, Some(&rows.mask))?;
        let m = g.mean(r)?;
        out[h.index()] = g.scalar(m);
    }
    Ok(out)
}

/// Pure BC on the unlabeled mixture; returns a frozen, f32-rounded base.
pub fn pretrain_base(ds: &Dataset, d: &PolicyDims, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if ds.is_empty() {
        return Err(TrainError::Dataset("pre-training needs data".into()));
    }
    let mut base = BasePolicy::new(d.clone(), cfg.seed, Init::Uniform(0.1))?;
    ds.validate(&base)?;
    let clip_cfg = TrainConfig {
        grad_clip_kind: GradClipKind::GlobalNorm,
        grad_clip_threshold: 5.0,
        ..TrainConfig::default()
    };
    let mut opt = OptimizerState::new(&base.store, 0.0);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let idx = crate::trainer::batch_indices(ds.len(), cfg.batch_size, cfg.seed, step);
        let trajs: Vec<&[Observation]> = idx.iter().map(|&i| ds.trajectories[i].observations.as_slice()).collect();
        let actions: Vec<&[ActionSample]> = idx.iter().map(|&i| ds.trajectories[i].actions.as_slice()).collect();
        let targets = BatchTargets::from_actions(&actions);
        let mut g = Graph::new();
        let p = base.store.bind(&mut g);
        let tv = base.trunk_vars(&mut g, &p, &trajs, None)?;
        let heads = base.heads_vars(&mut g, &p, tv.core_out, &tv.inputs)?;
        let mut total = None;
        for h in Head::ALL {
            let r = bc_rows(&mut g, h, heads[h.index()], &targets, Some(&tv.inputs.mask))?;
            let m = g.mean(r)?;
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m)?,
            });
        }
        let total = total.expect("six heads");
        let loss = g.scalar(total);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                head: "all".into(),
                what: "pre-training loss".into(),
                last_checkpoint: None,
            });
        }
        losses.push(loss);
        g.backward(total)?;
        let mut grads: Vec<Vec<f64>> = base
            .store
            .ids()
            .map(|id| g.grad(p[id]).map_or_else(|| vec![0.0; base.store.get(id).len()], <[f64]>::to_vec))
            .collect();
        clip_gradients(&mut grads, &mut opt, &clip_cfg);
        let warm = (step as f64 / 20.0).min(1.0);
        adam_update(&mut base.store, &grads, &mut opt, cfg.learning_rate * warm);
    }
    base.store.round_to_f32();
    base.store.freeze();
    Ok(PretrainOutcome { base, losses })
}

// ── evaluation ────────────────────────────────────────────────────────

/// Expected per-head behavior of a conditioned policy over a set of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauProfile {
    pub action_type: Vec<f64>,
    pub location: Vec<f64>,
    /// Mean KL(base || conditioned) per head, in head order.
    pub kl_to_base: [f64; 6],
}

const EVAL_CHUNK: usize = 32;

/// Averages over `rows` of conditioned head marginals under `tau`.
/// `adapters == None` profiles the base itself.
pub fn profile_tau(
    base: &BasePolicy,
    adapters: Option<&AdapterSet>,
    cache: &TrunkCache,
    tau: &TacticDistribution,
) -> Result<TauProfile> {
    let d = &base.dims;
    let n_chunks = cache.n_traj.div_ceil(EVAL_CHUNK);
    let parts = par::map_range(n_chunks, |ci| -> Result<(Vec<f64>, Vec<f64>, [f64; 6])> {
        let idx: Vec<usize> = (ci * EVAL_CHUNK..((ci + 1) * EVAL_CHUNK).min(cache.n_traj)).collect();
        let rows = cache.gather(&idx);
        let logits = conditioned_logits(base, adapters, &rows, tau, idx.len())?;
        let mut act = vec![0.0; d.action_types];
        let mut loc = vec![0.0; d.cells()];
        let mut kl = [0.0; 6];
        for r in 0..rows.rows() {
            let m = &rows.mask[r * d.max_entities..(r + 1) * d.max_entities];
            for h in Head::ALL {
                let w = d.head_dim(h);
                let q = &logits[h.index()][r * w..(r + 1) * w];
                let p = &rows.base_logits[h.index()][r * w..(r + 1) * w];
                let mask = h.entity_masked().then_some(m);
                kl[h.index()] += if h == Head::SelectedUnits {
                    bernoulli_kl_mean(p, q, m)
                } else {
                    crate::categorical::kl_categorical(p, q, mask)?
                };
                if h == Head::ActionType || h == Head::Location {
                    let probs = softmax(q, None)?;
                    let acc = if h == Head::ActionType { &mut act } else { &mut loc };
                    acc.iter_mut().zip(&probs).for_each(|(a, p)| *a += p);
                }
            }
        }
        Ok((act, loc, kl))
    });
    let n = (cache.n_traj * cache.traj_len) as f64;
    let mut out = TauProfile {
        action_type: vec![0.0; d.action_types],
        location: vec![0.0; d.cells()],
        kl_to_base: [0.0; 6],
    };
    for part in parts {
        let (a, l, k) = part?;
        out.action_type.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        out.location.iter_mut().zip(&l).for_each(|(x, y)| *x += y);
        out.kl_to_base.iter_mut().zip(&k).for_each(|(x, y)| *x += y);
    }
    out.action_type.iter_mut().for_each(|x| *x /= n);
    out.location.iter_mut().for_each(|x| *x /= n);
    out.kl_to_base.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

fn bernoulli_kl_mean(p: &[f64], q: &[f64], mask: &[bool]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0;
    for ((a, b), &m) in p.iter().zip(q).zip(mask) {
        if m {
            let (lp1, lp0) = (log_sigmoid(*a), log_sigmoid(-a));
            let (lq1, lq0) = (log_sigmoid(*b), log_sigmoid(-b));
            acc += sigmoid(*a) * (lp1 - lq1) + sigmoid(-a) * (lp0 - lq0);
            n += 1;
        }
    }
    (acc / n.max(1) as f64).max(0.0)
}

fn log_sigmoid(x: f64) -> f64 {
    -crate::categorical::softplus(-x)
}

fn conditioned_logits(
    base: &BasePolicy,
    adapters: Option<&AdapterSet>,
    rows: &TrunkRows,
    tau: &TacticDistribution,
    b: usize,
) -> Result<[Vec<f64>; 6]> {
    let Some(a) = adapters else {
        return Ok(rows.base_logits.clone());
    };
    let mut g = Graph::new();
    let bp = base.store.bind(&mut g);
    let ap = a.store.bind(&mut g);
    let (core, hi) = rows.to_graph(&mut g, &base.dims)?;
    let r = rows.rows();
    let teacher = Head::ALL
        .map(|h| g.constant(vec![r, base.dims.head_dim(h)], rows.base_logits[h.index()].clone()))
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let taus = vec![tau.clone(); b];
    let (heads, _) = a.conditioned_heads(
        &mut g,
        base,
        &bp,
        &ap,
        core,
        &hi,
        Some(teacher.try_into().expect("six heads")),
        &taus,
    )?;
    Ok(heads.map(|v| g.value(v).to_vec()))
}

/// Per-head KL table for each `tau`; rows follow `taus`.
pub fn head_divergence_profile(
    base: &BasePolicy,
    adapters: &AdapterSet,
    taus: &[TacticDistribution],
    cache: &TrunkCache,
) -> Result<Vec<[f64; 6]>> {
    taus.iter()
        .map(|t| profile_tau(base, Some(adapters), cache, t).map(|p| p.kl_to_base))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridCheck {
    pub a: usize,
    pub b: usize,
    /// JS from the blended-conditioning marginal to the 50/50 mixture and to each pure archetype.
    pub js_mixture: f64,
    pub js_a: f64,
    pub js_b: f64,
}

impl HybridCheck {
    pub fn holds(&self, tol: f64) -> bool {
        self.js_mixture <= self.js_a.min(self.js_b) + tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_eval: usize,
    pub categories: Vec<String>,
    /// `M[k][j]`: JS between the e_k-conditioned action marginal and archetype j.
    pub match_matrix: Vec<Vec<f64>>,
    pub modulation_score: f64,
    pub diagonal_dominant: bool,
    /// Mean KL to base per head under each e_k; rows in taxonomy order.
    pub head_kl: Vec<[f64; 6]>,
    pub base_action_type: Vec<f64>,
    pub hybrid: HybridCheck,
}

impl EvalReport {
    /// Mean over conditioning vectors of the per-head KL.
    pub fn mean_head_kl(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        for row in &self.head_kl {
            out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        out.map(|x| x / self.head_kl.len() as f64)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "match matrix (JS, rows: conditioning e_k, cols: archetype j), n_eval = {}", self.n_eval);
        let _ = write!(s, "{:>14}", "");
        for j in 0..self.match_matrix.len() {
            let _ = write!(s, " {j:>7}");
        }
        s.push('\n');
        for (k, row) in self.match_matrix.iter().enumerate() {
            let _ = write!(s, "{:>14}", self.categories[k]);
            for (j, v) in row.iter().enumerate() {
                let mark = if j == k { '*' } else { ' ' };
                let _ = write!(s, " {v:>6.4}{mark}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "modulation score {:.4}  diagonal dominance {}",
            self.modulation_score,
            if self.diagonal_dominant { "yes" } else { "no" }
        );
        let _ = writeln!(s, "\nmean KL to base per head");
        let _ = write!(s, "{:>14}", "");
        for h in Head::ALL {
            let _ = write!(s, " {:>14}", h.name());
        }
        s.push('\n');
        for (k, row) in self.head_kl.iter().enumerate() {
            let _ = write!(s, "{:>14}", self.categories[k]);
            for v in row {
                let _ = write!(s, " {v:>14.6}");
            }
            s.push('\n');
        }
        let h = &self.hybrid;
        let _ = writeln!(
            s,
            "\nblend({}, {}): JS to mixture {:.4}, to {} {:.4}, to {} {:.4}",
            h.a, h.b, h.js_mixture, h.a, h.js_a, h.b, h.js_b
        );
        s
    }
}

/// Modulation score and dominance flag of a match matrix.
pub fn modulation_score(m: &[Vec<f64>]) -> (f64, bool) {
    let mut total = 0.0;
    let mut dominant = true;
    for (k, row) in m.iter().enumerate() {
        let other = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min);
        total += other - row[k];
        dominant &= row[k] < other;
    }
    (total / m.len() as f64, dominant)
}

/// Conditions on every e_k (and a 50/50 blend of `hybrid`) over `n_eval`
/// fresh observations, in trajectories of `traj_len` steps.
pub fn evaluate_modulation(
    base: &BasePolicy,
    adapters: &AdapterSet,
    scripts: &ScriptSet,
    n_eval: usize,
    traj_len: usize,
    seed: u64,
    hybrid: (usize, usize),
) -> Result<EvalReport> {
    let d = &base.dims;
    scripts.validate(d)?;
    let n_traj = n_eval.div_ceil(traj_len).max(1);
    let cache = TrunkCache::build(base, &eval_observations(d, n_traj, traj_len, seed))?;
    let mut m = Vec::with_capacity(TACTIC_DIM);
    let mut head_kl = Vec::with_capacity(TACTIC_DIM);
    for k in 0..TACTIC_DIM {
        let prof = profile_tau(base, Some(adapters), &cache, &one_hot(k).expect("k < 9"))?;
        m.push(scripts.scripts.iter().map(|s| js_divergence(&prof.action_type, &s.action_type)).collect());
        head_kl.push(prof.kl_to_base);
    }
    let (score, dominant) = modulation_score(&m);
    let base_prof = profile_tau(base, None, &cache, &one_hot(0).expect("0 < 9"))?;
    let (a, b) = hybrid;
    let tau = blend(&one_hot(a).expect("index"), &one_hot(b).expect("index"), 0.5)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let mixed = profile_tau(base, Some(adapters), &cache, &tau)?.action_type;
    let pa = &scripts.scripts[a].action_type;
    let pb = &scripts.scripts[b].action_type;
    let mix: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok(EvalReport {
        n_eval: n_traj * traj_len,
        categories: TacticCategory::ALL.iter().map(|c| c.key().to_string()).collect(),
        match_matrix: m,
        modulation_score: score,
        diagonal_dominant: dominant,
        head_kl,
        base_action_type: base_prof.action_type,
        hybrid: HybridCheck {
            a,
            b,
            js_mixture: js_divergence(&mixed, &mix),
            js_a: js_divergence(&mixed, pa),
            js_b: js_divergence(&mixed, pb),
        },
    })
}
