//! Toy-scale multi-head recurrent policy.
//!
//! Scalar, entity and spatial encoders feed a layer-normalized LSTM core
//! whose projected output drives six heads: action type, delay, queued,
//! selected units, target unit and location. Entity heads are pointer
//! scores over per-entity keys; the location head adds the projected core
//! output to a per-cell spatial skip.
//!
//! Batched graph methods work on time-major rows: with `B` trajectories of
//! length `L`, row `t * B + b` is step `t` of trajectory `b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::categorical::{sigmoid, softmax};
use crate::checkpoint::{Checkpoint, CheckpointError, Dtype};
use crate::error::NumericError;
use crate::graph::{Graph, Var};
use crate::nn::{Init, Linear, LstmCell, Mlp};
use crate::par;
use crate::tensor::{Bound, ParamId, ParamStore};

pub const BASE_PREFIX: &str = "base.";
const DIMS_META: &str = "policy_dims";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

type Result<T> = std::result::Result<T, PolicyError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(PolicyError::Invalid(msg.into()))
}

// ── heads and dimensions ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    ActionType,
    Delay,
    Queued,
    SelectedUnits,
    TargetUnit,
    Location,
}

impl Head {
    pub const ALL: [Head; 6] = [
        Head::ActionType,
        Head::Delay,
        Head::Queued,
        Head::SelectedUnits,
        Head::TargetUnit,
        Head::Location,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::ActionType => "action_type",
            Head::Delay => "delay",
            Head::Queued => "queued",
            Head::SelectedUnits => "selected_units",
            Head::TargetUnit => "target_unit",
            Head::Location => "location",
        }
    }

    /// Accepts `target_location` as an alias for the location head.
    pub fn from_name(name: &str) -> Option<Head> {
        match name {
            "target_location" => Some(Head::Location),
            _ => Head::ALL.into_iter().find(|h| h.name() == name),
        }
    }

    /// Whether logits of this head are masked by entity validity.
    pub fn entity_masked(self) -> bool {
        matches!(self, Head::SelectedUnits | Head::TargetUnit)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub scalar_dim: usize,
    pub entity_dim: usize,
    pub max_entities: usize,
    pub grid: usize,
    /// Side of the square patches averaged by the spatial encoder.
    pub patch: usize,
    pub action_types: usize,
    pub delays: usize,
    pub core_out: usize,
    pub lstm_hidden: usize,
    pub scalar_hidden: usize,
    pub entity_hidden: usize,
    pub spatial_hidden: usize,
    pub embed_dim: usize,
    pub key_dim: usize,
    pub head_hidden: usize,
    pub location_channels: usize,
}

impl PolicyDims {
    /// Desk-scale sizes used everywhere outside tests.
    pub fn toy() -> Self {
        Self {
            scalar_dim: 16,
            entity_dim: 8,
            max_entities: 16,
            grid: 8,
            patch: 2,
            action_types: 12,
            delays: 8,
            core_out: 64,
            lstm_hidden: 256,
            scalar_hidden: 256,
            entity_hidden: 64,
            spatial_hidden: 64,
            embed_dim: 256,
            key_dim: 32,
            head_hidden: 64,
            location_channels: 8,
        }
    }

    /// Very small sizes for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            scalar_dim: 4,
            entity_dim: 3,
            max_entities: 4,
            grid: 4,
            patch: 2,
            action_types: 5,
            delays: 3,
            core_out: 6,
            lstm_hidden: 5,
            scalar_hidden: 6,
            entity_hidden: 5,
            spatial_hidden: 4,
            embed_dim: 6,
            key_dim: 3,
            head_hidden: 5,
            location_channels: 2,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patches(&self) -> usize {
        (self.grid / self.patch).pow(2)
    }

    pub fn head_dim(&self, h: Head) -> usize {
        match h {
            Head::ActionType => self.action_types,
            Head::Delay => self.delays,
            Head::Queued => 2,
            Head::SelectedUnits | Head::TargetUnit => self.max_entities,
            Head::Location => self.cells(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.scalar_dim,
            self.entity_dim,
            self.max_entities,
            self.grid,
            self.patch,
            self.action_types,
            self.delays,
            self.core_out,
            self.lstm_hidden,
            self.scalar_hidden,
            self.entity_hidden,
            self.spatial_hidden,
            self.embed_dim,
            self.key_dim,
            self.head_hidden,
            self.location_channels,
        ];
        if all.contains(&0) {
            return invalid("policy dimensions must be positive");
        }
        if self.grid % self.patch != 0 {
            return invalid(format!("grid {} not divisible by patch {}", self.grid, self.patch));
        }
        Ok(())
    }
}

// ── observations and actions ──────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub scalar: Vec<f64>,
    /// `max_entities × entity_dim`, row-major.
    pub entities: Vec<f64>,
    pub mask: Vec<bool>,
    /// `grid × grid`, row-major.
    pub spatial: Vec<f64>,
}

impl Observation {
    pub fn validate(&self, d: &PolicyDims) -> Result<()> {
        if self.scalar.len() != d.scalar_dim {
            return invalid(format!("scalar has {} features, expected {}", self.scalar.len(), d.scalar_dim));
        }
        if self.entities.len() != d.max_entities * d.entity_dim || self.mask.len() != d.max_entities {
            return invalid(format!(
                "entity block {} / mask {} do not match {}x{}",
                self.entities.len(),
                self.mask.len(),
                d.max_entities,
                d.entity_dim
            ));
        }
        if !self.mask.iter().any(|&m| m) {
            return invalid("observation has no valid entity");
        }
        if self.spatial.len() != d.cells() {
            return invalid(format!("spatial grid has {} cells, expected {}", self.spatial.len(), d.cells()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.scalar) || !finite(&self.entities) || !finite(&self.spatial) {
            return invalid("observation contains non-finite values");
        }
        Ok(())
    }

    /// Means over non-overlapping `patch × patch` blocks, row-major.
    pub fn patch_means(&self, d: &PolicyDims) -> Vec<f64> {
        let per_side = d.grid / d.patch;
        let norm = (d.patch * d.patch) as f64;
        let mut out = vec![0.0; per_side * per_side];
        for r in 0..d.grid {
            for c in 0..d.grid {
                out[(r / d.patch) * per_side + c / d.patch] += self.spatial[r * d.grid + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= norm);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSample {
    pub action_type: usize,
    pub delay: usize,
    pub queued: usize,
    pub selected_units: Vec<bool>,
    pub target_unit: usize,
    pub location: usize,
}

impl ActionSample {
    /// `(row, col)` of the location cell.
    pub fn location_rc(&self, grid: usize) -> (usize, usize) {
        (self.location / grid, self.location % grid)
    }

    /// Categorical index for a head (selected units has none).
    pub fn index(&self, h: Head) -> Option<usize> {
        match h {
            Head::ActionType => Some(self.action_type),
            Head::Delay => Some(self.delay),
            Head::Queued => Some(self.queued),
            Head::SelectedUnits => None,
            Head::TargetUnit => Some(self.target_unit),
            Head::Location => Some(self.location),
        }
    }

    pub fn validate(&self, obs: &Observation, d: &PolicyDims) -> Result<()> {
        for h in Head::ALL {
            if let Some(i) = self.index(h) {
                if i >= d.head_dim(h) {
                    return invalid(format!("{} index {i} out of range", h.name()));
                }
            }
        }
        if !obs.mask[self.target_unit] {
            return invalid(format!("target unit {} is masked out", self.target_unit));
        }
        if self.selected_units.len() != d.max_entities {
            return invalid("selected_units has the wrong length");
        }
        if self.selected_units.iter().zip(&obs.mask).any(|(&s, &m)| s && !m) {
            return invalid("selected unit outside the valid entity mask");
        }
        Ok(())
    }
}

/// LSTM state of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Per-head logits for one observation, indexed by [`Head::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub logits: [Vec<f64>; 6],
    pub core_out: Vec<f64>,
    pub mask: Vec<bool>,
    pub state: RecurrentState,
}

impl PolicyOutput {
    pub fn head(&self, h: Head) -> &[f64] {
        &self.logits[h.index()]
    }

    pub fn head_mask(&self, h: Head) -> Option<&[bool]> {
        h.entity_masked().then_some(self.mask.as_slice())
    }
}

// ── network ───────────────────────────────────────────────────────────

/// Constant per-row inputs the heads need besides the core output.
#[derive(Clone, Debug)]
pub struct HeadInputs {
    pub rows: usize,
    /// `[rows * max_entities, key_dim]`.
    pub keys_target: Var,
    pub keys_select: Var,
    /// `[rows * cells, 1]`.
    pub grid: Var,
    /// `rows * max_entities`.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TrunkVars {
    /// `[rows, core_out]`, time-major.
    pub core_out: Var,
    pub inputs: HeadInputs,
    /// Final states `[B, lstm_hidden]`.
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Debug)]
pub struct BasePolicy {
    pub dims: PolicyDims,
    pub store: ParamStore,
    scalar: Mlp,
    entity: Mlp,
    spatial: Linear,
    fuse: Linear,
    lstm: LstmCell,
    out: Linear,
    action: Mlp,
    delay: Mlp,
    queued: Mlp,
    target_query: Linear,
    target_key: Linear,
    select_query: Linear,
    select_key: Linear,
    loc_conv: Linear,
    loc_core: Linear,
    loc_out: ParamId,
    /// Per-cell positional logit offset.
    loc_bias: ParamId,
}

/// Uniform ±0.1 initialization with the given dims; frozen on return.
pub fn init_base_with(dims: PolicyDims, seed: u64) -> Result<BasePolicy> {
    let mut p = BasePolicy::new(dims, seed, Init::Uniform(0.1))?;
    p.store.freeze();
    Ok(p)
}

/// Toy-scale base policy, uniform ±0.1, frozen.
pub fn init_base(seed: u64) -> BasePolicy {
    init_base_with(PolicyDims::toy(), seed).expect("toy dims are valid")
}

impl BasePolicy {
    /// Unfrozen policy with every weight and bias drawn from `init`.
    pub fn new(dims: PolicyDims, seed: u64, init: Init) -> Result<Self> {
        dims.validate()?;
        let d = &dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let ii = (init, init);
        let n = |x: &str| format!("{BASE_PREFIX}{x}");
        let scalar = Mlp::new(&mut s, &n("scalar"), &[d.scalar_dim, d.scalar_hidden, d.scalar_hidden], ii, true, &mut rng);
        let entity = Mlp::new(&mut s, &n("entity"), &[d.entity_dim, d.entity_hidden, d.entity_hidden], ii, true, &mut rng);
        let spatial = Linear::new(&mut s, &n("spatial"), d.patches(), d.spatial_hidden, ii, &mut rng);
        let fuse_in = d.scalar_hidden + d.entity_hidden + d.spatial_hidden;
        let fuse = Linear::new(&mut s, &n("fuse"), fuse_in, d.embed_dim, ii, &mut rng);
        let lstm = LstmCell::new(&mut s, &n("core.lstm"), d.embed_dim, d.lstm_hidden, init, &mut rng);
        let out = Linear::new(&mut s, &n("core.out"), d.lstm_hidden, d.core_out, ii, &mut rng);
        let hh = d.head_hidden;
        let action = Mlp::new(&mut s, &n("head.action_type"), &[d.core_out, hh, d.action_types], ii, false, &mut rng);
        let delay = Mlp::new(&mut s, &n("head.delay"), &[d.core_out, hh / 2, d.delays], ii, false, &mut rng);
        let queued = Mlp::new(&mut s, &n("head.queued"), &[d.core_out, hh / 2, 2], ii, false, &mut rng);
        let target_query = Linear::new(&mut s, &n("head.target_unit.query"), d.core_out, d.key_dim, ii, &mut rng);
        let target_key = Linear::new(&mut s, &n("head.target_unit.key"), d.entity_hidden, d.key_dim, ii, &mut rng);
        let select_query = Linear::new(&mut s, &n("head.selected_units.query"), d.core_out, d.key_dim, ii, &mut rng);
        let select_key = Linear::new(&mut s, &n("head.selected_units.key"), d.entity_hidden, d.key_dim, ii, &mut rng);
        let c = d.location_channels;
        let loc_conv = Linear::new(&mut s, &n("head.location.skip"), 1, c, ii, &mut rng);
        let loc_core = Linear::new(&mut s, &n("head.location.core"), d.core_out, c, ii, &mut rng);
        let loc_out = s.add(n("head.location.out.w"), crate::nn::init_tensor(&mut rng, vec![c, 1], c, init));
        let loc_bias = s.add(n("head.location.cell_bias"), crate::nn::init_tensor(&mut rng, vec![d.cells()], 1, init));
        s.unfreeze();
        Ok(Self {
            dims,
            store: s,
            scalar,
            entity,
            spatial,
            fuse,
            lstm,
            out,
            action,
            delay,
            queued,
            target_query,
            target_key,
            select_query,
            select_key,
            loc_conv,
            loc_core,
            loc_out,
            loc_bias,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn initial_state(&self) -> RecurrentState {
        RecurrentState {
            h: vec![0.0; self.dims.lstm_hidden],
            c: vec![0.0; self.dims.lstm_hidden],
        }
    }

    // ── graph-level pieces ────────────────────────────────────────────

    /// Encodes `obs` row by row: returns the core input `[n, embed_dim]` and
    /// per-entity embeddings `[n * max_entities, entity_hidden]`.
    pub fn encode_vars(&self, g: &mut Graph, p: &Bound, obs: &[&Observation]) -> Result<(Var, Var)> {
        let d = &self.dims;
        let n = obs.len();
        for o in obs {
            o.validate(d)?;
        }
        let scalars = g.constant(vec![n, d.scalar_dim], obs.iter().flat_map(|o| o.scalar.iter().copied()).collect())?;
        let ents = g.constant(
            vec![n * d.max_entities, d.entity_dim],
            obs.iter().flat_map(|o| o.entities.iter().copied()).collect(),
        )?;
        let mask: Vec<bool> = obs.iter().flat_map(|o| o.mask.iter().copied()).collect();
        let patches = g.constant(vec![n, d.patches()], obs.iter().flat_map(|o| o.patch_means(d)).collect())?;

        let s = self.scalar.forward(g, p, scalars)?;
        let e = self.entity.forward(g, p, ents)?;
        let pooled = g.group_masked_mean(e, &mask, d.max_entities)?;
        let sp = self.spatial.forward(g, p, patches)?;
        let sp = g.relu(sp)?;
        let cat = g.concat_cols(&[s, pooled, sp])?;
        let emb = self.fuse.forward(g, p, cat)?;
        Ok((g.relu(emb)?, e))
    }

    /// One recurrent step: `(core_out, h', c')`.
    pub fn core_step_vars(&self, g: &mut Graph, p: &Bound, emb: Var, h: Var, c: Var) -> Result<(Var, Var, Var)> {
        let (h2, c2) = self.lstm.forward(g, p, emb, h, c)?;
        let out = self.out.forward(g, p, h2)?;
        Ok((out, h2, c2))
    }

    /// Runs encoders and the core over `B` equal-length trajectories.
    pub fn trunk_vars(
        &self,
        g: &mut Graph,
        p: &Bound,
        trajs: &[&[Observation]],
        init: Option<&[RecurrentState]>,
    ) -> Result<TrunkVars> {
        let d = &self.dims;
        let b = trajs.len();
        let l = trajs.first().map_or(0, |t| t.len());
        if b == 0 || l == 0 || trajs.iter().any(|t| t.len() != l) {
            return invalid("trajectories must be non-empty and of equal length");
        }
        let hd = d.lstm_hidden;
        let (mut h, mut c) = match init {
            Some(states) => {
                if states.len() != b || states.iter().any(|s| s.h.len() != hd || s.c.len() != hd) {
                    return invalid("initial state does not match batch");
                }
                (
                    g.constant(vec![b, hd], states.iter().flat_map(|s| s.h.iter().copied()).collect())?,
                    g.constant(vec![b, hd], states.iter().flat_map(|s| s.c.iter().copied()).collect())?,
                )
            }
            None => (g.constant(vec![b, hd], vec![0.0; b * hd])?, g.constant(vec![b, hd], vec![0.0; b * hd])?),
        };
        let mut cores = Vec::with_capacity(l);
        let mut ents = Vec::with_capacity(l);
        for t in 0..l {
            let step: Vec<&Observation> = trajs.iter().map(|tr| &tr[t]).collect();
            let (emb, e) = self.encode_vars(g, p, &step)?;
            let (out, h2, c2) = self.core_step_vars(g, p, emb, h, c)?;
            cores.push(out);
            ents.push(e);
            h = h2;
            c = c2;
        }
        let core_out = g.concat_rows(&cores)?;
        let ent = g.concat_rows(&ents)?;
        let keys_target = self.target_key.forward(g, p, ent)?;
        let keys_select = self.select_key.forward(g, p, ent)?;
        let rows = b * l;
        let order = (0..l).flat_map(|t| trajs.iter().map(move |tr| &tr[t]));
        let grid = g.constant(vec![rows * d.cells(), 1], order.clone().flat_map(|o| o.spatial.iter().copied()).collect())?;
        let mask = order.flat_map(|o| o.mask.iter().copied()).collect();
        Ok(TrunkVars {
            core_out,
            inputs: HeadInputs {
                rows,
                keys_target,
                keys_select,
                grid,
                mask,
            },
            h,
            c,
        })
    }

    /// Head logits `[rows, head_dim]` indexed by [`Head::index`].
    pub fn heads_vars(&self, g: &mut Graph, p: &Bound, core: Var, hi: &HeadInputs) -> Result<[Var; 6]> {
        let d = &self.dims;
        let scale = 1.0 / (d.key_dim as f64).sqrt();
        let action = self.action.forward(g, p, core)?;
        let delay = self.delay.forward(g, p, core)?;
        let queued = self.queued.forward(g, p, core)?;
        let qt = self.target_query.forward(g, p, core)?;
        let target = g.group_dot(hi.keys_target, qt, d.max_entities)?;
        let target = g.scale(target, scale)?;
        let qs = self.select_query.forward(g, p, core)?;
        let select = g.group_dot(hi.keys_select, qs, d.max_entities)?;
        let select = g.scale(select, scale)?;
        let skip = self.loc_conv.forward(g, p, hi.grid)?;
        let skip = g.relu(skip)?;
        let cp = self.loc_core.forward(g, p, core)?;
        let cells = g.add_group(skip, cp, d.cells())?;
        let cells = g.relu(cells)?;
        let loc = g.matmul(cells, p[self.loc_out])?;
        let loc = g.reshape(loc, vec![hi.rows, d.cells()])?;
        let loc = g.add_row(loc, p[self.loc_bias])?;
        Ok([action, delay, queued, select, target, loc])
    }

    // ── value-level API ───────────────────────────────────────────────

    /// Core-input embedding of a single observation.
    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let (emb, _) = self.encode_vars(&mut g, &p, &[obs])?;
        Ok(g.value(emb).to_vec())
    }

    /// One core step from a precomputed embedding.
    pub fn core_step(&self, emb: &[f64], state: &RecurrentState) -> Result<(Vec<f64>, RecurrentState)> {
        let d = &self.dims;
        if emb.len() != d.embed_dim || state.h.len() != d.lstm_hidden || state.c.len() != d.lstm_hidden {
            return invalid("core_step dimensions do not match the policy");
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let e = g.constant(vec![1, d.embed_dim], emb.to_vec())?;
        let h = g.constant(vec![1, d.lstm_hidden], state.h.clone())?;
        let c = g.constant(vec![1, d.lstm_hidden], state.c.clone())?;
        let (out, h2, c2) = self.core_step_vars(&mut g, &p, e, h, c)?;
        Ok((
            g.value(out).to_vec(),
            RecurrentState {
                h: g.value(h2).to_vec(),
                c: g.value(c2).to_vec(),
            },
        ))
    }

    /// Full single-step forward pass.
    pub fn forward(&self, obs: &Observation, state: &RecurrentState) -> Result<PolicyOutput> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let tv = self.trunk_vars(&mut g, &p, &[std::slice::from_ref(obs)], Some(std::slice::from_ref(state)))?;
        let heads = self.heads_vars(&mut g, &p, tv.core_out, &tv.inputs)?;
        Ok(PolicyOutput {
            logits: heads.map(|v| g.value(v).to_vec()),
            core_out: g.value(tv.core_out).to_vec(),
            mask: obs.mask.clone(),
            state: RecurrentState {
                h: g.value(tv.h).to_vec(),
                c: g.value(tv.c).to_vec(),
            },
        })
    }

    // ── persistence ───────────────────────────────────────────────────

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.meta.insert(DIMS_META.into(), serde_json::to_string(&self.dims).expect("dims serialize"));
        ck
    }

    /// Rebuilds a frozen policy from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let dims = match ck.meta.get(DIMS_META) {
            Some(s) => serde_json::from_str(s).map_err(|e| PolicyError::Invalid(format!("bad {DIMS_META}: {e}")))?,
            None => PolicyDims::toy(),
        };
        let mut p = Self::new(dims, 0, Init::Zero)?;
        let base_tensors = ck.tensors.iter().filter(|(n, _)| n.starts_with(BASE_PREFIX)).count();
        if base_tensors != p.store.len() {
            return invalid(format!(
                "checkpoint has {base_tensors} base tensors, policy expects {}",
                p.store.len()
            ));
        }
        ck.load_into(&mut p.store)?;
        p.store.freeze();
        Ok(p)
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<std::path::PathBuf> {
        Ok(self.to_checkpoint().save(stem, Dtype::F32)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

// ── trunk cache ───────────────────────────────────────────────────────

/// Frozen-trunk features for every step of a trajectory set.
///
/// With the base frozen and adapters fused only at the core output and the
/// head logits, everything upstream of the heads is a constant per step,
/// so training and evaluation can start from these rows.
#[derive(Clone, Debug)]
pub struct TrunkCache {
    pub dims: PolicyDims,
    pub traj_len: usize,
    pub n_traj: usize,
    core_out: Vec<f64>,
    keys_target: Vec<f64>,
    keys_select: Vec<f64>,
    grid: Vec<f64>,
    mask: Vec<bool>,
    base_logits: [Vec<f64>; 6],
}

/// Cached rows for a batch of trajectories, time-major.
#[derive(Clone, Debug)]
pub struct TrunkRows {
    pub batch: usize,
    pub traj_len: usize,
    pub core_out: Vec<f64>,
    pub keys_target: Vec<f64>,
    pub keys_select: Vec<f64>,
    pub grid: Vec<f64>,
    pub mask: Vec<bool>,
    pub base_logits: [Vec<f64>; 6],
}

const CACHE_CHUNK: usize = 8;

impl TrunkCache {
    pub fn build(base: &BasePolicy, trajs: &[Vec<Observation>]) -> Result<Self> {
        let d = base.dims.clone();
        let l = trajs.first().map_or(0, Vec::len);
        if trajs.is_empty() || l == 0 || trajs.iter().any(|t| t.len() != l) {
            return invalid("trunk cache needs non-empty trajectories of equal length");
        }
        let n_chunks = trajs.len().div_ceil(CACHE_CHUNK);
        let chunks = par::map_range(n_chunks, |ci| -> Result<TrunkRows> {
            let part = &trajs[ci * CACHE_CHUNK..((ci + 1) * CACHE_CHUNK).min(trajs.len())];
            let refs: Vec<&[Observation]> = part.iter().map(Vec::as_slice).collect();
            let mut g = Graph::new();
            let p = base.store.bind(&mut g);
            let tv = base.trunk_vars(&mut g, &p, &refs, None)?;
            let heads = base.heads_vars(&mut g, &p, tv.core_out, &tv.inputs)?;
            Ok(TrunkRows {
                batch: part.len(),
                traj_len: l,
                core_out: g.value(tv.core_out).to_vec(),
                keys_target: g.value(tv.inputs.keys_target).to_vec(),
                keys_select: g.value(tv.inputs.keys_select).to_vec(),
                grid: g.value(tv.inputs.grid).to_vec(),
                mask: tv.inputs.mask,
                base_logits: heads.map(|v| g.value(v).to_vec()),
            })
        });
        let w = RowWidths::new(&d);
        let n = trajs.len() * l;
        let mut cache = TrunkCache {
            traj_len: l,
            n_traj: trajs.len(),
            core_out: vec![0.0; n * w.core],
            keys_target: vec![0.0; n * w.keys],
            keys_select: vec![0.0; n * w.keys],
            grid: vec![0.0; n * w.grid],
            mask: vec![false; n * w.mask],
            base_logits: Head::ALL.map(|h| vec![0.0; n * d.head_dim(h)]),
            dims: d.clone(),
        };
        for (ci, chunk) in chunks.into_iter().enumerate() {
            let chunk = chunk?;
            for t in 0..l {
                for b in 0..chunk.batch {
                    let src = t * chunk.batch + b;
                    let dst = (ci * CACHE_CHUNK + b) * l + t;
                    copy_row(&chunk.core_out, &mut cache.core_out, src, dst, w.core);
                    copy_row(&chunk.keys_target, &mut cache.keys_target, src, dst, w.keys);
                    copy_row(&chunk.keys_select, &mut cache.keys_select, src, dst, w.keys);
                    copy_row(&chunk.grid, &mut cache.grid, src, dst, w.grid);
                    copy_row(&chunk.mask, &mut cache.mask, src, dst, w.mask);
                    for h in Head::ALL {
                        let hw = d.head_dim(h);
                        copy_row(&chunk.base_logits[h.index()], &mut cache.base_logits[h.index()], src, dst, hw);
                    }
                }
            }
        }
        Ok(cache)
    }

    /// Time-major rows for the given trajectories.
    pub fn gather(&self, traj: &[usize]) -> TrunkRows {
        let d = &self.dims;
        let w = RowWidths::new(d);
        let l = self.traj_len;
        let order: Vec<usize> = (0..l).flat_map(|t| traj.iter().map(move |&i| i * l + t)).collect();
        let pick_f = |src: &[f64], width: usize| -> Vec<f64> {
            order.iter().flat_map(|&r| src[r * width..(r + 1) * width].iter().copied()).collect()
        };
        TrunkRows {
            batch: traj.len(),
            traj_len: l,
            core_out: pick_f(&self.core_out, w.core),
            keys_target: pick_f(&self.keys_target, w.keys),
            keys_select: pick_f(&self.keys_select, w.keys),
            grid: pick_f(&self.grid, w.grid),
            mask: order.iter().flat_map(|&r| self.mask[r * w.mask..(r + 1) * w.mask].iter().copied()).collect(),
            base_logits: Head::ALL.map(|h| pick_f(&self.base_logits[h.index()], d.head_dim(h))),
        }
    }
}

struct RowWidths {
    core: usize,
    keys: usize,
    grid: usize,
    mask: usize,
}

impl RowWidths {
    fn new(d: &PolicyDims) -> Self {
        Self {
            core: d.core_out,
            keys: d.max_entities * d.key_dim,
            grid: d.cells(),
            mask: d.max_entities,
        }
    }
}

fn copy_row<T: Copy>(src: &[T], dst: &mut [T], s: usize, d: usize, w: usize) {
    dst[d * w..(d + 1) * w].copy_from_slice(&src[s * w..(s + 1) * w]);
}

impl TrunkRows {
    pub fn rows(&self) -> usize {
        self.batch * self.traj_len
    }

    /// Registers the cached constants in `g`; returns the core output and head inputs.
    pub fn to_graph(&self, g: &mut Graph, d: &PolicyDims) -> Result<(Var, HeadInputs)> {
        let r = self.rows();
        let core = g.constant(vec![r, d.core_out], self.core_out.clone())?;
        let kt = g.constant(vec![r * d.max_entities, d.key_dim], self.keys_target.clone())?;
        let ks = g.constant(vec![r * d.max_entities, d.key_dim], self.keys_select.clone())?;
        let grid = g.constant(vec![r * d.cells(), 1], self.grid.clone())?;
        Ok((
            core,
            HeadInputs {
                rows: r,
                keys_target: kt,
                keys_select: ks,
                grid,
                mask: self.mask.clone(),
            },
        ))
    }
}

// ── sampling ──────────────────────────────────────────────────────────

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
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

/// Samples every head at `temperature`; selected units are independent
/// Bernoulli draws over valid entities.
pub fn sample_action(po: &PolicyOutput, seed: u64, temperature: f64) -> Result<ActionSample> {
    if !(temperature > 0.0) {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |h: Head| -> Result<usize> {
        let scaled: Vec<f64> = po.head(h).iter().map(|x| x / temperature).collect();
        let probs = softmax(&scaled, po.head_mask(h))?;
        Ok(sample_categorical(&mut rng, &probs))
    };
    let action_type = draw(Head::ActionType)?;
    let delay = draw(Head::Delay)?;
    let queued = draw(Head::Queued)?;
    let target_unit = draw(Head::TargetUnit)?;
    let location = draw(Head::Location)?;
    let selected_units = po
        .head(Head::SelectedUnits)
        .iter()
        .zip(&po.mask)
        .map(|(x, &m)| m && rng.random::<f64>() < sigmoid(x / temperature))
        .collect();
    Ok(ActionSample {
        action_type,
        delay,
        queued,
        selected_units,
        target_unit,
        location,
    })
}
