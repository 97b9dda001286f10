//! Tactic adapters: small MLPs from τ to an additive correction at each
//! attach point, with a zero final layer so a fresh adapter set leaves the
//! base policy unchanged.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::sigmoid;
use crate::checkpoint::{Checkpoint, CheckpointError, Dtype};
use crate::graph::{Graph, Var};
use crate::nn::{Init, Linear};
use crate::policy::{BasePolicy, Head, HeadInputs, Observation, PolicyDims, PolicyError, PolicyOutput, RecurrentState};
use crate::taxonomy::{TacticDistribution, TACTIC_DIM};
use crate::tensor::{Bound, ParamId, ParamStore, Tensor};

pub const HIDDEN1: usize = 64;
pub const HIDDEN2: usize = 32;
pub const ADAPTER_PREFIX: &str = "adapter.";

type Result<T> = std::result::Result<T, PolicyError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(PolicyError::Invalid(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachPoint {
    ActionType,
    Delay,
    Queued,
    SelectedUnits,
    TargetUnit,
    Location,
    Lstm,
}

impl AttachPoint {
    pub const ALL: [AttachPoint; 7] = [
        AttachPoint::ActionType,
        AttachPoint::Delay,
        AttachPoint::Queued,
        AttachPoint::SelectedUnits,
        AttachPoint::TargetUnit,
        AttachPoint::Location,
        AttachPoint::Lstm,
    ];

    pub fn head(self) -> Option<Head> {
        match self {
            AttachPoint::ActionType => Some(Head::ActionType),
            AttachPoint::Delay => Some(Head::Delay),
            AttachPoint::Queued => Some(Head::Queued),
            AttachPoint::SelectedUnits => Some(Head::SelectedUnits),
            AttachPoint::TargetUnit => Some(Head::TargetUnit),
            AttachPoint::Location => Some(Head::Location),
            AttachPoint::Lstm => None,
        }
    }

    pub fn name(self) -> &'static str {
        self.head().map_or("lstm", Head::name)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn out_dim(self, d: &PolicyDims) -> usize {
        self.head().map_or(d.core_out, |h| d.head_dim(h))
    }
}

impl fmt::Display for AttachPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Add,
    /// `base + sigmoid(g) * delta` with a learned scalar `g` per attach point.
    Gated,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Add => "add",
            Fusion::Gated => "gated",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "add" => Some(Fusion::Add),
            "gated" => Some(Fusion::Gated),
            _ => None,
        }
    }
}

/// Combines a base output with an adapter delta. `gate` is ignored for `add`.
pub fn fuse(base: &[f64], delta: &[f64], method: Fusion, gate: f64) -> Result<Vec<f64>> {
    if base.len() != delta.len() {
        return invalid(format!("fuse: base has {} values, delta {}", base.len(), delta.len()));
    }
    let s = match method {
        Fusion::Add => return Ok(base.iter().zip(delta).map(|(b, d)| b + d).collect()),
        Fusion::Gated => sigmoid(gate),
    };
    Ok(base.iter().zip(delta).map(|(b, d)| b + s * d).collect())
}

#[derive(Clone, Debug)]
pub struct AdapterModule {
    pub point: AttachPoint,
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
    pub gate: Option<ParamId>,
}

/// Trainable adapters for a set of active attach points.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub dims: PolicyDims,
    pub fusion: Fusion,
    pub tactic_dim: usize,
    pub modules: Vec<AdapterModule>,
    pub store: ParamStore,
}

impl AdapterSet {
    /// Hidden layers are He-uniform with zero bias; the output layer (and
    /// the gate, if any) start at exactly zero.
    pub fn new(dims: &PolicyDims, active: &[AttachPoint], fusion: Fusion, seed: u64) -> Result<Self> {
        let mut points: Vec<AttachPoint> = active.to_vec();
        points.sort();
        points.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hidden = (Init::Kaiming, Init::Zero);
        let modules = points
            .into_iter()
            .map(|point| {
                let n = format!("{ADAPTER_PREFIX}{point}");
                let l1 = Linear::new(&mut store, &format!("{n}.l1"), TACTIC_DIM, HIDDEN1, hidden, &mut rng);
                let l2 = Linear::new(&mut store, &format!("{n}.l2"), HIDDEN1, HIDDEN2, hidden, &mut rng);
                let out = Linear::new(
                    &mut store,
                    &format!("{n}.out"),
                    HIDDEN2,
                    point.out_dim(dims),
                    (Init::Zero, Init::Zero),
                    &mut rng,
                );
                let gate = (fusion == Fusion::Gated).then(|| store.add(format!("{n}.gate"), Tensor::zeros(vec![1])));
                AdapterModule { point, l1, l2, out, gate }
            })
            .collect();
        store.unfreeze();
        Ok(Self {
            dims: dims.clone(),
            fusion,
            tactic_dim: TACTIC_DIM,
            modules,
            store,
        })
    }

    pub fn active(&self) -> Vec<AttachPoint> {
        self.modules.iter().map(|m| m.point).collect()
    }

    pub fn module(&self, point: AttachPoint) -> Option<&AdapterModule> {
        self.modules.iter().find(|m| m.point == point)
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Single-τ delta for one module, before gating.
    pub fn adapter_forward(&self, tau: &TacticDistribution, point: AttachPoint) -> Result<Vec<f64>> {
        let m = self
            .module(point)
            .ok_or_else(|| PolicyError::Invalid(format!("attach point `{point}` is not active")))?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let t = g.constant(vec![1, TACTIC_DIM], tau.probs().to_vec())?;
        let v = self.module_forward(&mut g, &p, m, t)?;
        Ok(g.value(v).to_vec())
    }

    fn module_forward(&self, g: &mut Graph, p: &Bound, m: &AdapterModule, tau: Var) -> Result<Var> {
        let h = m.l1.forward(g, p, tau)?;
        let h = g.relu(h)?;
        let h = m.l2.forward(g, p, h)?;
        let h = g.relu(h)?;
        Ok(m.out.forward(g, p, h)?)
    }

    /// Per-trajectory deltas `[B, out_dim]` for every active point, gating applied.
    pub fn deltas(&self, g: &mut Graph, p: &Bound, taus: &[TacticDistribution]) -> Result<Vec<(AttachPoint, Var)>> {
        let t = g.constant(vec![taus.len(), TACTIC_DIM], taus.iter().flat_map(|t| t.probs().iter().copied()).collect())?;
        let mut out = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            let mut d = self.module_forward(g, p, m, t)?;
            if let Some(gid) = m.gate {
                let s = g.sigmoid(p[gid])?;
                d = g.mul_scalar_var(d, s)?;
            }
            out.push((m.point, d));
        }
        Ok(out)
    }

    /// Conditioned head logits over time-major rows of `taus.len()`
    /// trajectories. `base_logits`, when given, must be the base heads on
    /// `core` and saves recomputing them if the core is not adapted.
    #[allow(clippy::too_many_arguments)]
    pub fn conditioned_heads(
        &self,
        g: &mut Graph,
        base: &BasePolicy,
        bp: &Bound,
        ap: &Bound,
        core: Var,
        hi: &HeadInputs,
        base_logits: Option<[Var; 6]>,
        taus: &[TacticDistribution],
    ) -> Result<([Var; 6], Var)> {
        let deltas = self.deltas(g, ap, taus)?;
        let lstm = deltas.iter().find(|(pt, _)| *pt == AttachPoint::Lstm).map(|(_, v)| *v);
        let (core, mut heads) = match (lstm, base_logits) {
            (Some(d), _) => {
                let c = g.add_tiled(core, d)?;
                (c, base.heads_vars(g, bp, c, hi)?)
            }
            (None, Some(b)) => (core, b),
            (None, None) => (core, base.heads_vars(g, bp, core, hi)?),
        };
        for (pt, d) in deltas {
            if let Some(h) = pt.head() {
                heads[h.index()] = g.add_tiled(heads[h.index()], d)?;
            }
        }
        Ok((heads, core))
    }

    /// Single-step conditioned forward pass.
    pub fn conditioned_forward(
        &self,
        base: &BasePolicy,
        obs: &Observation,
        state: &RecurrentState,
        tau: &TacticDistribution,
    ) -> Result<PolicyOutput> {
        if base.dims != self.dims {
            return invalid("adapter dims do not match the base policy");
        }
        let mut g = Graph::new();
        let bp = base.store.bind(&mut g);
        let ap = self.store.bind(&mut g);
        let tv = base.trunk_vars(&mut g, &bp, &[std::slice::from_ref(obs)], Some(std::slice::from_ref(state)))?;
        let (heads, core) =
            self.conditioned_heads(&mut g, base, &bp, &ap, tv.core_out, &tv.inputs, None, std::slice::from_ref(tau))?;
        Ok(PolicyOutput {
            logits: heads.map(|v| g.value(v).to_vec()),
            core_out: g.value(core).to_vec(),
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
        let names: Vec<&str> = self.modules.iter().map(|m| m.point.name()).collect();
        ck.meta.insert("active_adaptors".into(), serde_json::to_string(&names).expect("names serialize"));
        ck.meta.insert("fusion_method".into(), self.fusion.name().into());
        ck.meta.insert("tactic_dim".into(), self.tactic_dim.to_string());
        ck
    }

    /// Rebuilds adapters for `dims` from `adapter.*` tensors and config meta.
    pub fn from_checkpoint(ck: &Checkpoint, dims: &PolicyDims) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| PolicyError::Invalid(format!("adapter checkpoint lacks meta `{k}`")))
        };
        let names: Vec<String> = serde_json::from_str(meta("active_adaptors")?)
            .map_err(|e| PolicyError::Invalid(format!("bad active_adaptors: {e}")))?;
        let active = names
            .iter()
            .map(|n| AttachPoint::from_name(n).ok_or_else(|| PolicyError::Invalid(format!("unknown attach point `{n}`"))))
            .collect::<Result<Vec<_>>>()?;
        let fusion_name = meta("fusion_method")?;
        let fusion =
            Fusion::from_name(fusion_name).ok_or_else(|| PolicyError::Invalid(format!("unknown fusion `{fusion_name}`")))?;
        if meta("tactic_dim")? != &TACTIC_DIM.to_string() {
            return invalid(format!("tactic_dim {} unsupported", meta("tactic_dim")?));
        }
        let mut set = Self::new(dims, &active, fusion, 0)?;
        let n = ck.tensors.iter().filter(|(n, _)| n.starts_with(ADAPTER_PREFIX)).count();
        if n != set.store.len() {
            return Err(PolicyError::Checkpoint(CheckpointError::Mismatch {
                name: ADAPTER_PREFIX.into(),
                msg: format!("checkpoint has {n} adapter tensors, config expects {}", set.store.len()),
            }));
        }
        ck.load_into(&mut set.store)?;
        set.store.unfreeze();
        Ok(set)
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<std::path::PathBuf> {
        Ok(self.to_checkpoint().save(stem, Dtype::F32)?)
    }

    pub fn load(path: &std::path::Path, dims: &PolicyDims) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, dims)
    }
}
