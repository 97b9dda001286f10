//! The nine tactical archetypes and the tactic distribution τ.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::categorical;

pub const TACTIC_DIM: usize = 9;
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxonomyError {
    #[error("expected {TACTIC_DIM} components, got {0}")]
    Dimension(usize),
    #[error("component {index} = {value} is not a probability")]
    OutOfRange { index: usize, value: f64 },
    #[error("components sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("category index {0} outside 0..{TACTIC_DIM}")]
    CategoryRange(usize),
    #[error("blend weight {0} outside [0, 1]")]
    BlendWeight(f64),
    #[error("empty replay id")]
    EmptyReplayId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TacticCategory(usize);

const NAMES: [&str; TACTIC_DIM] = [
    "Unclassified Strategy",
    "Standard Roach-based Strategy",
    "Spire-based Strategy",
    "Economic Three Base Strategy",
    "Early Pool Aggression",
    "+1 Zergling Strategy",
    "Nydus-based Strategy",
    "Lurker Transition Strategy",
    "Early/Mid-early Game All-in Strategy",
];

const KEYS: [&str; TACTIC_DIM] = [
    "unclassified",
    "roach",
    "spire",
    "three_base",
    "early_pool",
    "plus1_zergling",
    "nydus",
    "lurker",
    "all_in",
];

const DESCRIPTIONS: [&str; TACTIC_DIM] = [
    "Too short or no clear direction.",
    "Upgraded Roaches off Roach Warren, Evolution Chamber, Lair and Roach Speed; usually two bases.",
    "Lair into Spire and Mutalisks with several extractors.",
    "Fast third Hatchery and heavy Drone production.",
    "Spawning Pool at 12 supply or earlier, Zergling pressure, thin economy.",
    "Early Evolution Chamber, +1 Melee Attacks and mass Zerglings.",
    "Lair into Nydus Network and Nydus Worms.",
    "Lair, Hydralisk Den and Lurker Den for map control.",
    "Mass basic units on two or three bases without Lair.",
];

impl TacticCategory {
    pub const ALL: [TacticCategory; TACTIC_DIM] = [
        TacticCategory(0),
        TacticCategory(1),
        TacticCategory(2),
        TacticCategory(3),
        TacticCategory(4),
        TacticCategory(5),
        TacticCategory(6),
        TacticCategory(7),
        TacticCategory(8),
    ];

    pub fn new(index: usize) -> Result<Self, TaxonomyError> {
        if index < TACTIC_DIM {
            Ok(Self(index))
        } else {
            Err(TaxonomyError::CategoryRange(index))
        }
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn name(self) -> &'static str {
        NAMES[self.0]
    }

    /// Short snake_case identifier used in rule files and completion tokens.
    pub fn key(self) -> &'static str {
        KEYS[self.0]
    }

    pub fn description(self) -> &'static str {
        DESCRIPTIONS[self.0]
    }

    pub fn from_key(key: &str) -> Option<Self> {
        KEYS.iter().position(|k| *k == key).map(Self)
    }
}

/// A probability vector over the nine categories.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct TacticDistribution([f64; TACTIC_DIM]);

impl TacticDistribution {
    /// Validates the simplex invariants (components in [0, 1], sum 1 within 1e-9).
    pub fn new(probs: &[f64]) -> Result<Self, TaxonomyError> {
        if probs.len() != TACTIC_DIM {
            return Err(TaxonomyError::Dimension(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(TaxonomyError::OutOfRange { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(TaxonomyError::NotNormalized(sum));
        }
        let mut a = [0.0; TACTIC_DIM];
        a.copy_from_slice(probs);
        Ok(Self(a))
    }

    pub fn uniform() -> Self {
        Self([1.0 / TACTIC_DIM as f64; TACTIC_DIM])
    }

    pub fn probs(&self) -> &[f64; TACTIC_DIM] {
        &self.0
    }

    pub fn argmax(&self) -> TacticCategory {
        TacticCategory(categorical::argmax(&self.0))
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        categorical::entropy(&self.0)
    }
}

impl<'de> Deserialize<'de> for TacticDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        TacticDistribution::new(&v).map_err(serde::de::Error::custom)
    }
}

/// Softmax over classifier log-probabilities (or any real scores).
pub fn softmax_normalize(logprobs: &[f64]) -> Result<TacticDistribution, TaxonomyError> {
    if logprobs.len() != TACTIC_DIM {
        return Err(TaxonomyError::Dimension(logprobs.len()));
    }
    if let Some(i) = logprobs.iter().position(|v| !v.is_finite()) {
        return Err(TaxonomyError::NonFinite(i));
    }
    let mut a = [0.0; TACTIC_DIM];
    a.copy_from_slice(&categorical::softmax(logprobs, None).expect("finite, unmasked"));
    Ok(TacticDistribution(a))
}

pub fn one_hot(index: usize) -> Result<TacticDistribution, TaxonomyError> {
    let c = TacticCategory::new(index)?;
    let mut a = [0.0; TACTIC_DIM];
    a[c.index()] = 1.0;
    Ok(TacticDistribution(a))
}

/// `w·a + (1−w)·b`; `w` weights the first argument.
pub fn blend(a: &TacticDistribution, b: &TacticDistribution, w: f64) -> Result<TacticDistribution, TaxonomyError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(TaxonomyError::BlendWeight(w));
    }
    let mut out = [0.0; TACTIC_DIM];
    for (o, (x, y)) in out.iter_mut().zip(a.0.iter().zip(&b.0)) {
        *o = w * x + (1.0 - w) * y;
    }
    Ok(TacticDistribution(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledReplay {
    pub replay_id: String,
    pub tactic_dist: TacticDistribution,
}

impl LabeledReplay {
    pub fn new(replay_id: impl Into<String>, tactic_dist: TacticDistribution) -> Result<Self, TaxonomyError> {
        let replay_id = replay_id.into();
        if replay_id.trim().is_empty() {
            return Err(TaxonomyError::EmptyReplayId);
        }
        Ok(Self { replay_id, tactic_dist })
    }
}

pub fn write_labels<W: Write>(mut w: W, labels: &[LabeledReplay]) -> std::io::Result<()> {
    for l in labels {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_labels<R: BufRead>(r: R) -> Result<Vec<LabeledReplay>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| format!("line {}: {e}", i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: LabeledReplay = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
        if l.replay_id.trim().is_empty() {
            return Err(format!("line {}: empty replay id", i + 1));
        }
        out.push(l);
    }
    Ok(out)
}
