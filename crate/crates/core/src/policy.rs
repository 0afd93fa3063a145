//! Tabular softmax policy over the slot skeleton of a case.
//!
//! Every slot is a categorical choice whose logits live in a table keyed by
//! [`ContextKey`]. Tags are emitted structurally, so sampled traces are always
//! well formed; the policy only chooses content. Log-probabilities, their
//! gradients and the KL to a reference table are exact.

use crate::metrics::Disease;
use crate::synthcxr::{render_trace, skeleton, QuestionKind, SlotRole, SynthCase, SynthError};
use crate::trace::InterleavedTrace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

/// Logits are kept inside this symmetric range.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("group size must be at least 2, got {0}")]
    GroupSize(usize),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("malformed context key {0:?}")]
    Key(String),
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error("context {key} has {got} logits, expected {expected}")]
    Vocab { key: String, expected: usize, got: usize },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SlotType {
    Think,
    Answer,
}

/// Conditioning context of one slot.
///
/// Evidence and verdict slots are keyed by the observed-sign digest and the
/// disease under discussion, shared across question kinds so that what is
/// learned on close-ended questions carries over to open-ended ones. Only the
/// single-answer option pick is kind-specific.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    pub kind: Option<QuestionKind>,
    pub signs: String,
    pub subject: Option<Disease>,
    pub slot: SlotType,
}

impl ContextKey {
    pub fn for_slot(case: &SynthCase, role: SlotRole) -> Self {
        let signs = case.signs_digest();
        match role {
            SlotRole::Think(d) => ContextKey { kind: None, signs, subject: Some(d), slot: SlotType::Think },
            SlotRole::Verdict(d) => ContextKey { kind: None, signs, subject: Some(d), slot: SlotType::Answer },
            SlotRole::Choice => ContextKey {
                kind: Some(case.kind),
                signs,
                subject: None,
                slot: SlotType::Answer,
            },
        }
    }
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = self.kind.map_or("shared", QuestionKind::as_str);
        let subject = self.subject.map_or("-", Disease::name);
        let slot = match self.slot {
            SlotType::Think => "think",
            SlotType::Answer => "answer",
        };
        write!(f, "{kind}|{}|{subject}|{slot}", self.signs)
    }
}

impl FromStr for ContextKey {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PolicyError::Key(s.to_string());
        let parts: Vec<&str> = s.split('|').collect();
        let [kind, signs, subject, slot] = parts[..] else {
            return Err(bad());
        };
        let kind = match kind {
            "shared" => None,
            k => Some(k.parse::<QuestionKind>().map_err(|_| bad())?),
        };
        let subject = match subject {
            "-" => None,
            d => Some(d.parse::<Disease>().map_err(|_| bad())?),
        };
        let slot = match slot {
            "think" => SlotType::Think,
            "answer" => SlotType::Answer,
            _ => return Err(bad()),
        };
        if signs.is_empty() {
            return Err(bad());
        }
        Ok(ContextKey { kind, signs: signs.to_string(), subject, slot })
    }
}

/// One decision point of a trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub key: ContextKey,
    pub vocab_size: usize,
    pub allowed: Vec<usize>,
}

/// Slots of a case in trace order.
pub fn case_slots(case: &SynthCase) -> Vec<Slot> {
    skeleton(case)
        .into_iter()
        .map(|s| Slot {
            key: ContextKey::for_slot(case, s.role),
            vocab_size: s.vocab_size,
            allowed: s.allowed,
        })
        .collect()
}

/// Logit table. Missing entries read as all-zero logits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyParams {
    table: BTreeMap<ContextKey, Vec<f64>>,
}

/// Sparse gradient or update over table entries.
pub type SparseGrad = BTreeMap<ContextKey, Vec<f64>>;

impl PolicyParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.table.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Logits for a context, zeros if never touched.
    pub fn logits(&self, key: &ContextKey, vocab_size: usize) -> Vec<f64> {
        match self.table.get(key) {
            Some(v) => v.clone(),
            None => vec![0.0; vocab_size],
        }
    }

    /// Overwrites one entry, clamping into the allowed logit range.
    pub fn set_logits(&mut self, key: ContextKey, logits: Vec<f64>) {
        let clamped = logits.into_iter().map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect();
        self.table.insert(key, clamped);
    }

    /// Adds `scale * delta` to every listed entry, then clamps.
    pub fn apply(&mut self, delta: &SparseGrad, scale: f64) {
        for (key, d) in delta {
            let row = self.table.entry(key.clone()).or_insert_with(|| vec![0.0; d.len()]);
            for (z, g) in row.iter_mut().zip(d) {
                *z = (*z + scale * g).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            }
        }
    }

    /// Masked softmax of `logits / temperature` for a slot.
    pub fn probs(&self, slot: &Slot, temperature: f64) -> Vec<f64> {
        let row = self.table.get(&slot.key);
        let z = |a: usize| row.map_or(0.0, |r| r[a]) / temperature;
        let max = slot.allowed.iter().map(|a| z(*a)).fold(f64::NEG_INFINITY, f64::max);
        let mut p = vec![0.0; slot.vocab_size];
        let mut total = 0.0;
        for a in &slot.allowed {
            let e = (z(*a) - max).exp();
            p[*a] = e;
            total += e;
        }
        for a in &slot.allowed {
            p[*a] /= total;
        }
        p
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), PolicyError> {
        for (key, logits) in &self.table {
            let line = serde_json::json!({ "context": key.to_string(), "logits": logits });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self, PolicyError> {
        #[derive(Deserialize)]
        struct Line {
            context: String,
            logits: Vec<f64>,
        }
        let mut params = PolicyParams::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| PolicyError::Checkpoint { line: i + 1, reason };
            let parsed: Line = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            let key: ContextKey = parsed.context.parse().map_err(|e: PolicyError| err(e.to_string()))?;
            if parsed.logits.iter().any(|z| !z.is_finite()) {
                return Err(err("non-finite logit".into()));
            }
            params.set_logits(key, parsed.logits);
        }
        Ok(params)
    }
}

/// A sampled trace plus what is needed to re-score it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub case_id: String,
    pub trace: InterleavedTrace,
    pub slots: Arc<[Slot]>,
    pub actions: Vec<usize>,
    pub logprob_current: f64,
    /// Log-probability under the sampling snapshot; never updated.
    pub logprob_old: f64,
}

impl Trajectory {
    pub fn visited(&self) -> impl Iterator<Item = (&ContextKey, usize)> {
        self.slots.iter().zip(&self.actions).map(|(s, a)| (&s.key, *a))
    }
}

fn check_temperature(t: f64) -> Result<(), PolicyError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::Temperature(t))
    }
}

fn sample_index<R: Rng>(p: &[f64], allowed: &[usize], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for a in allowed {
        acc += p[*a];
        if u < acc {
            return *a;
        }
    }
    *allowed.last().expect("slot has at least one allowed action")
}

/// Builds a trajectory from chosen actions, scoring it under `params`.
pub fn trajectory_from_actions(
    params: &PolicyParams,
    case: &SynthCase,
    slots: Arc<[Slot]>,
    actions: Vec<usize>,
    temperature: f64,
) -> Result<Trajectory, PolicyError> {
    let trace = render_trace(case, &actions)?;
    let lp = slots_logprob(params, &slots, &actions, temperature);
    Ok(Trajectory {
        case_id: case.id.clone(),
        trace,
        slots,
        actions,
        logprob_current: lp,
        logprob_old: lp,
    })
}

/// Samples `g` trajectories using the caller's generator.
pub fn sample_group_with<R: Rng>(
    params: &PolicyParams,
    case: &SynthCase,
    g: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Trajectory>, PolicyError> {
    if g < 2 {
        return Err(PolicyError::GroupSize(g));
    }
    check_temperature(temperature)?;
    let slots: Arc<[Slot]> = case_slots(case).into();
    let probs: Vec<Vec<f64>> = slots.iter().map(|s| params.probs(s, temperature)).collect();
    (0..g)
        .map(|_| {
            let actions = slots
                .iter()
                .zip(&probs)
                .map(|(s, p)| sample_index(p, &s.allowed, rng))
                .collect();
            trajectory_from_actions(params, case, slots.clone(), actions, temperature)
        })
        .collect()
}

/// Samples `g` trajectories reproducibly from `seed`.
pub fn sample_group(
    params: &PolicyParams,
    case: &SynthCase,
    g: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Trajectory>, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_group_with(params, case, g, temperature, &mut rng)
}

/// Highest-probability action in every slot, lowest index on ties.
pub fn greedy_trajectory(params: &PolicyParams, case: &SynthCase) -> Result<Trajectory, PolicyError> {
    let slots: Arc<[Slot]> = case_slots(case).into();
    let actions = slots
        .iter()
        .map(|s| {
            let row = params.logits(&s.key, s.vocab_size);
            let mut best = s.allowed[0];
            for a in &s.allowed {
                if row[*a] > row[best] {
                    best = *a;
                }
            }
            best
        })
        .collect();
    trajectory_from_actions(params, case, slots, actions, 1.0)
}

fn slots_logprob(params: &PolicyParams, slots: &[Slot], actions: &[usize], temperature: f64) -> f64 {
    slots
        .iter()
        .zip(actions)
        .map(|(s, a)| params.probs(s, temperature)[*a].ln())
        .sum()
}

/// Sum of per-slot log-probabilities of the trajectory's actions.
pub fn logprob(params: &PolicyParams, trajectory: &Trajectory, temperature: f64) -> f64 {
    slots_logprob(params, &trajectory.slots, &trajectory.actions, temperature)
}

/// Gradient of [`logprob`] with respect to the logits: `(onehot - p) / T` per
/// visited slot, restricted to allowed actions.
pub fn grad_logprob(params: &PolicyParams, trajectory: &Trajectory, temperature: f64) -> SparseGrad {
    let mut grad = SparseGrad::new();
    for (slot, a) in trajectory.slots.iter().zip(&trajectory.actions) {
        let p = params.probs(slot, temperature);
        let row = grad.entry(slot.key.clone()).or_insert_with(|| vec![0.0; slot.vocab_size]);
        for j in &slot.allowed {
            let onehot = if j == a { 1.0 } else { 0.0 };
            row[*j] += (onehot - p[*j]) / temperature;
        }
    }
    grad
}

/// Exact KL(p || q) between two masked categoricals.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Mean over `slots` of the exact KL between the current and reference policy.
pub fn kl_to_ref(params: &PolicyParams, reference: &PolicyParams, slots: &[Slot], temperature: f64) -> f64 {
    if slots.is_empty() {
        return 0.0;
    }
    let total: f64 = slots
        .iter()
        .map(|s| categorical_kl(&params.probs(s, temperature), &reference.probs(s, temperature)))
        .sum();
    total / slots.len() as f64
}

/// Gradient of [`kl_to_ref`] with respect to the current logits.
pub fn grad_kl_to_ref(params: &PolicyParams, reference: &PolicyParams, slots: &[Slot], temperature: f64) -> SparseGrad {
    let mut grad = SparseGrad::new();
    if slots.is_empty() {
        return grad;
    }
    let n = slots.len() as f64;
    for s in slots {
        let p = params.probs(s, temperature);
        let q = reference.probs(s, temperature);
        let kl = categorical_kl(&p, &q);
        let row = grad.entry(s.key.clone()).or_insert_with(|| vec![0.0; s.vocab_size]);
        for j in &s.allowed {
            if p[*j] > 0.0 {
                row[*j] += p[*j] * (p[*j].ln() - q[*j].ln() - kl) / (temperature * n);
            }
        }
    }
    grad
}
