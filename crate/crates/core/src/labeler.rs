//! Tactic labels for build orders: a declarative rule scorer and an HTTP
//! client that reads per-category token log-probabilities from a
//! chat-completion endpoint.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::buildorder::BuildOrder;
use crate::par;
use crate::taxonomy::{softmax_normalize, LabeledReplay, TacticCategory, TacticDistribution, TaxonomyError, TACTIC_DIM};

pub const DEFAULT_RULES: &str = include_str!("../data/default_rules.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("rule set: {0}")]
    Rules(String),
    #[error("replay {replay_id}: endpoint failed after {attempts} attempt(s): {msg}")]
    Endpoint { replay_id: String, attempts: usize, msg: String },
    #[error("replay {replay_id}: malformed endpoint response: {msg}")]
    Protocol { replay_id: String, msg: String },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

// ── rule-based scorer ─────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    Has { action: String },
    Absent { action: String },
    FirstBySupply { action: String, max_supply: u32 },
    FirstByTime { action: String, max_time_s: u32 },
    Before { action: String, other: String },
    CountAtLeast { action: String, min: u32, until_s: Option<u32> },
}

impl Predicate {
    pub fn holds(&self, bo: &BuildOrder) -> bool {
        let first = |a: &str| bo.first(a).map(|i| &bo.entries[i]);
        match self {
            Predicate::Has { action } => bo.contains(action),
            Predicate::Absent { action } => !bo.contains(action),
            Predicate::FirstBySupply { action, max_supply } => first(action).is_some_and(|e| e.supply <= *max_supply),
            Predicate::FirstByTime { action, max_time_s } => first(action).is_some_and(|e| e.time_s <= *max_time_s),
            Predicate::Before { action, other } => match (bo.first(action), bo.first(other)) {
                (Some(a), Some(o)) => a < o,
                (Some(_), None) => true,
                _ => false,
            },
            Predicate::CountAtLeast { action, min, until_s } => bo.count_of(action, *until_s) >= *min,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub category: String,
    #[serde(flatten)]
    pub predicate: Predicate,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnclassifiedPrior {
    pub prior: f64,
    /// Orders with fewer entries than this get `short_bonus`.
    pub min_entries: usize,
    pub short_bonus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub unclassified: UnclassifiedPrior,
    #[serde(rename = "rule", default)]
    pub rules: Vec<Rule>,
}

fn default_temperature() -> f64 {
    1.0
}

impl RuleSet {
    pub fn from_toml(text: &str) -> Result<Self, LabelError> {
        let rs: RuleSet = toml::from_str(text).map_err(|e| LabelError::Rules(e.to_string()))?;
        rs.validate()?;
        Ok(rs)
    }

    pub fn default_rules() -> Self {
        Self::from_toml(DEFAULT_RULES).expect("bundled rule file is valid")
    }

    fn validate(&self) -> Result<(), LabelError> {
        if !(self.temperature > 0.0) {
            return Err(LabelError::Temperature(self.temperature));
        }
        let mut covered = [false; TACTIC_DIM];
        for (i, r) in self.rules.iter().enumerate() {
            let c = TacticCategory::from_key(&r.category)
                .ok_or_else(|| LabelError::Rules(format!("rule {}: unknown category `{}`", i + 1, r.category)))?;
            if c.index() == 0 {
                return Err(LabelError::Rules(format!(
                    "rule {}: unclassified scores through its prior, not rules",
                    i + 1
                )));
            }
            if !r.weight.is_finite() {
                return Err(LabelError::Rules(format!("rule {}: weight is not finite", i + 1)));
            }
            covered[c.index()] = true;
        }
        if let Some(k) = (1..TACTIC_DIM).find(|&k| !covered[k]) {
            return Err(LabelError::Rules(format!(
                "category `{}` has no rules",
                TacticCategory::ALL[k].key()
            )));
        }
        Ok(())
    }
}

/// Raw per-category scores.
pub fn score_rules(bo: &BuildOrder, rules: &RuleSet) -> [f64; TACTIC_DIM] {
    let mut s = [0.0; TACTIC_DIM];
    s[0] = rules.unclassified.prior;
    if bo.entries.len() < rules.unclassified.min_entries {
        s[0] += rules.unclassified.short_bonus;
    }
    for r in &rules.rules {
        if r.predicate.holds(bo) {
            if let Some(c) = TacticCategory::from_key(&r.category) {
                s[c.index()] += r.weight;
            }
        }
    }
    s
}

pub fn label_rule_based(bo: &BuildOrder, rules: &RuleSet, temperature: f64) -> Result<TacticDistribution, LabelError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(LabelError::Temperature(temperature));
    }
    let scaled: Vec<f64> = score_rules(bo, rules).iter().map(|s| s / temperature).collect();
    Ok(softmax_normalize(&scaled)?)
}

// ── endpoint client ───────────────────────────────────────────────────

pub const DEFAULT_PROMPT: &str = "You are an expert StarCraft II analyst. Classify the Zerg build order below into \
one of these tactical categories and answer with the category number only.\n\n{categories}\n\nBuild order \
(supply, time, action):\n{build_order}\n\nCategory:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEndpoint {
    pub base_url: String,
    pub model: String,
    /// `{categories}` and `{build_order}` are substituted.
    pub prompt_template: String,
    /// Completion token that stands for each category, by index.
    pub category_tokens: Vec<String>,
    pub timeout: Duration,
    pub retries: usize,
    pub top_logprobs: usize,
    pub max_in_flight: usize,
    pub api_key: Option<String>,
}

impl ClassifierEndpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            prompt_template: DEFAULT_PROMPT.into(),
            category_tokens: (0..TACTIC_DIM).map(|i| i.to_string()).collect(),
            timeout: Duration::from_secs(30),
            retries: 2,
            top_logprobs: 20,
            max_in_flight: 4,
            api_key: None,
        }
    }

    fn check(&self) -> Result<(), LabelError> {
        if self.timeout.is_zero() {
            return Err(LabelError::Rules("endpoint timeout must be positive".into()));
        }
        if self.category_tokens.len() != TACTIC_DIM {
            return Err(LabelError::Rules(format!(
                "endpoint needs {TACTIC_DIM} category tokens, got {}",
                self.category_tokens.len()
            )));
        }
        Ok(())
    }

    pub fn render_prompt(&self, bo: &BuildOrder) -> String {
        let cats: Vec<String> = TacticCategory::ALL
            .iter()
            .map(|c| format!("{}: {} ({})", self.category_tokens[c.index()], c.name(), c.description()))
            .collect();
        self.prompt_template
            .replace("{categories}", &cats.join("\n"))
            .replace("{build_order}", &bo.render_table())
    }

    fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.model,
            "prompt": prompt,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": true,
            "top_logprobs": self.top_logprobs,
        })
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// `(token, logprob)` candidates for the first completion token. Reads the
/// chat shape `logprobs.content[0].top_logprobs[]` or the legacy completion
/// shape `logprobs.top_logprobs[0]{token: lp}`.
fn first_token_candidates(v: &Value) -> Result<Vec<(String, f64)>, String> {
    let lp = v
        .pointer("/choices/0/logprobs")
        .ok_or("response lacks choices[0].logprobs")?;
    if let Some(list) = lp.pointer("/content/0/top_logprobs").and_then(Value::as_array) {
        return list
            .iter()
            .map(|c| {
                let tok = c.get("token").and_then(Value::as_str).ok_or("candidate without token")?;
                let l = c.get("logprob").and_then(Value::as_f64).ok_or("candidate without logprob")?;
                Ok((tok.to_string(), l))
            })
            .collect();
    }
    if let Some(map) = lp.pointer("/top_logprobs/0").and_then(Value::as_object) {
        return map
            .iter()
            .map(|(t, l)| Ok((t.clone(), l.as_f64().ok_or("non-numeric logprob")?)))
            .collect();
    }
    Err("no top_logprobs in response".into())
}

/// Maps candidates onto the nine categories. Categories absent from the
/// candidate list get `min(observed) − ln 9`.
pub fn logprobs_to_vector(candidates: &[(String, f64)], tokens: &[String]) -> Result<[f64; TACTIC_DIM], String> {
    let mut out = [f64::NEG_INFINITY; TACTIC_DIM];
    for (tok, lp) in candidates {
        if !lp.is_finite() {
            continue;
        }
        if let Some(k) = tokens.iter().position(|t| t.trim() == tok.trim()) {
            out[k] = out[k].max(*lp);
        }
    }
    let observed = out.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    if !observed.is_finite() {
        return Err("no category token among the returned candidates".into());
    }
    let fill = observed - (TACTIC_DIM as f64).ln();
    for v in &mut out {
        if !v.is_finite() {
            *v = fill;
        }
    }
    Ok(out)
}

pub fn label_via_endpoint(bo: &BuildOrder, ep: &ClassifierEndpoint) -> Result<TacticDistribution, LabelError> {
    ep.check()?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(ep.timeout))
        .build()
        .into();
    let body = ep.request_body(&ep.render_prompt(bo));
    let attempts = ep.retries + 1;
    let mut last = String::new();
    for _ in 0..attempts {
        let mut req = agent.post(&ep.url());
        if let Some(key) = &ep.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(&body) {
            Ok(mut resp) => {
                let protocol = |msg: String| LabelError::Protocol {
                    replay_id: bo.replay_id.clone(),
                    msg,
                };
                let v: Value = resp.body_mut().read_json().map_err(|e| protocol(e.to_string()))?;
                let cands = first_token_candidates(&v).map_err(protocol)?;
                let lps = logprobs_to_vector(&cands, &ep.category_tokens).map_err(protocol)?;
                return Ok(softmax_normalize(&lps)?);
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(LabelError::Endpoint {
        replay_id: bo.replay_id.clone(),
        attempts,
        msg: last,
    })
}

// ── corpus labeling ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum LabelStrategy {
    RuleBased { rules: RuleSet, temperature: f64 },
    Endpoint(ClassifierEndpoint),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LabelSummary {
    pub total: usize,
    pub labeled: usize,
    pub failed: usize,
    /// Argmax counts by category index.
    pub argmax_counts: [usize; TACTIC_DIM],
    /// Mean entropy in nats over labeled orders; 0 when none.
    pub mean_entropy: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CorpusLabels {
    /// Labels in corpus order, failures skipped.
    pub labels: Vec<LabeledReplay>,
    pub failures: Vec<LabelError>,
    pub summary: LabelSummary,
}

/// Labels every order, continuing past per-item failures. Rule labeling is
/// data-parallel; endpoint labeling keeps at most `max_in_flight` requests open.
pub fn label_corpus(corpus: &[BuildOrder], strategy: &LabelStrategy) -> CorpusLabels {
    let results: Vec<Result<TacticDistribution, LabelError>> = match strategy {
        LabelStrategy::RuleBased { rules, temperature } => {
            par::map_slice(corpus, |bo| label_rule_based(bo, rules, *temperature))
        }
        LabelStrategy::Endpoint(ep) => bounded_map(corpus, ep.max_in_flight.max(1), |bo| label_via_endpoint(bo, ep)),
    };
    let mut out = CorpusLabels::default();
    out.summary.total = corpus.len();
    let mut entropy = 0.0;
    for (bo, r) in corpus.iter().zip(results) {
        match r.and_then(|d| Ok(LabeledReplay::new(bo.replay_id.clone(), d)?)) {
            Ok(l) => {
                out.summary.argmax_counts[l.tactic_dist.argmax().index()] += 1;
                entropy += l.tactic_dist.entropy();
                out.labels.push(l);
            }
            Err(e) => out.failures.push(e),
        }
    }
    out.summary.labeled = out.labels.len();
    out.summary.failed = out.failures.len();
    if out.summary.labeled > 0 {
        out.summary.mean_entropy = entropy / out.summary.labeled as f64;
    }
    out
}

/// Runs `f` over `items` on `workers` threads; results come back in input order.
fn bounded_map<T: Sync, R: Send, F: Fn(&T) -> R + Sync>(items: &[T], workers: usize, f: F) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
