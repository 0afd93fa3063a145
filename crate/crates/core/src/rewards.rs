//! Rule-based trajectory rewards.
//!
//! The total reward of a trajectory is
//!
//! ```text
//! total = lambda * r_format + (1 - lambda) * r_final + r_proc
//! ```
//!
//! where `r_proc` is paid only when the gate holds: the format is correct, the
//! final answer is correct, and the batch metric strictly exceeds the running
//! EMA threshold. `r_proc` sums a BLEU-1/ROUGE-L think score over every
//! intermediate step plus an all-or-none bonus `gamma` for the intermediate
//! answers.

use crate::metrics::{bleu1, micro_f1, rouge_l, tokenize, LabelSet, TokenSeq};
use crate::trace::{ParsedOutcome, StepRef};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RewardError {
    #[error("{field} = {value} is outside {range}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        range: &'static str,
    },
}

fn check(field: &'static str, value: f64, ok: bool, range: &'static str) -> Result<(), RewardError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(RewardError::OutOfRange { field, value, range })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Format vs. final trade-off.
    pub lambda: f64,
    /// BLEU-1 weight inside the think score.
    pub alpha: f64,
    /// All-or-none answer bonus.
    pub gamma: f64,
    pub ema_decay: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda: 0.2,
            alpha: 0.3,
            gamma: 0.2,
            ema_decay: 0.9,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        check("lambda", self.lambda, (0.0..=1.0).contains(&self.lambda), "[0, 1]")?;
        check("alpha", self.alpha, (0.0..=1.0).contains(&self.alpha), "[0, 1]")?;
        check("gamma", self.gamma, self.gamma >= 0.0, "[0, inf)")?;
        check(
            "ema_decay",
            self.ema_decay,
            self.ema_decay > 0.0 && self.ema_decay < 1.0,
            "(0, 1)",
        )
    }
}

/// Which process reward a run pays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessMode {
    /// Gated process reward.
    #[default]
    Full,
    /// No process reward at all.
    AnswerOnly,
    /// Process reward on every trajectory, no gate.
    DirectThink,
}

/// Running exponential moving average of a batch metric, starting at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaTracker {
    value: f64,
    decay: f64,
    updates: u32,
}

impl EmaTracker {
    pub fn new(decay: f64) -> Result<Self, RewardError> {
        check("ema_decay", decay, decay > 0.0 && decay < 1.0, "(0, 1)")?;
        Ok(EmaTracker {
            value: 0.0,
            decay,
            updates: 0,
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn updates(&self) -> u32 {
        self.updates
    }

    /// `value <- decay * value + (1 - decay) * metric`.
    pub fn update(&mut self, metric: f64) -> Result<f64, RewardError> {
        check("batch_metric", metric, (0.0..=1.0).contains(&metric), "[0, 1]")?;
        self.value = ema_step(self.value, metric, self.decay);
        self.updates += 1;
        Ok(self.value)
    }

    /// Weighted average of all previous batch metrics: the running value with
    /// its zero-initialisation bias divided out. 0 before the first update.
    pub fn gate_threshold(&self) -> f64 {
        if self.updates == 0 {
            0.0
        } else {
            self.value / (1.0 - self.decay.powi(self.updates as i32))
        }
    }
}

pub fn ema_step(value: f64, metric: f64, decay: f64) -> f64 {
    decay * value + (1.0 - decay) * metric
}

/// Lowercases, collapses whitespace, strips surrounding punctuation and
/// reduces option answers like `"B. Edema"` or `"C, a"` to bare letters.
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    let stripped = collapsed.trim_matches(|c: char| !c.is_alphanumeric());

    let chars: Vec<char> = stripped.chars().collect();
    if chars.len() >= 3
        && chars[0].is_ascii_lowercase()
        && matches!(chars[1], '.' | ')' | ':')
        && chars[2] == ' '
    {
        return chars[0].to_string();
    }

    let parts: Vec<&str> = stripped
        .split(',')
        .map(|p| p.trim_matches(|c: char| !c.is_alphanumeric()))
        .collect();
    let is_letter = |p: &&str| p.len() == 1 && p.chars().all(|c| c.is_ascii_lowercase());
    if parts.len() > 1 && parts.iter().all(is_letter) {
        let mut letters: Vec<&str> = parts;
        letters.sort_unstable();
        letters.dedup();
        return letters.join(", ");
    }
    stripped.to_string()
}

pub fn format_reward(outcome: &ParsedOutcome) -> f64 {
    if outcome.format_ok {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalScore {
    pub reward: f64,
    /// Whether the final-answer prior of the gate holds.
    pub correct: bool,
    pub warning: Option<String>,
}

/// Binary match on normalised option answers. An answer that is not one of
/// the valid keys scores 0 with a warning.
pub fn final_reward_closed(pred: &str, gold: &str, valid_keys: &[String]) -> FinalScore {
    let p = normalize_answer(pred);
    let valid: Vec<String> = valid_keys.iter().map(|k| normalize_answer(k)).collect();
    let in_range = !valid.is_empty()
        && p.split(", ").all(|part| valid.iter().any(|k| k == part));
    if !in_range {
        return FinalScore {
            reward: 0.0,
            correct: false,
            warning: Some(format!("answer {pred:?} is not among the question's options")),
        };
    }
    let hit = p == normalize_answer(gold);
    FinalScore {
        reward: if hit { 1.0 } else { 0.0 },
        correct: hit,
        warning: None,
    }
}

pub fn final_reward_open(pred: &LabelSet, gold: &LabelSet) -> FinalScore {
    let f1 = micro_f1(pred, gold);
    FinalScore {
        reward: f1,
        correct: f1 > 0.0,
        warning: None,
    }
}

/// What the final answer of a trajectory is checked against.
#[derive(Debug, Clone, PartialEq)]
pub enum FinalTarget {
    Closed { gold: String, valid_keys: Vec<String> },
    Open { gold: LabelSet },
}

impl FinalTarget {
    pub fn score(&self, answer: Option<&str>) -> FinalScore {
        let Some(answer) = answer else {
            return FinalScore {
                reward: 0.0,
                correct: false,
                warning: Some("no terminal answer".into()),
            };
        };
        match self {
            FinalTarget::Closed { gold, valid_keys } => final_reward_closed(answer, gold, valid_keys),
            FinalTarget::Open { gold } => match LabelSet::parse_list(answer) {
                Ok(pred) => final_reward_open(&pred, gold),
                Err(e) => FinalScore {
                    reward: 0.0,
                    correct: false,
                    warning: Some(format!("unparseable label list: {e}")),
                },
            },
        }
    }

    /// Final score of a parsed output; falls back to the terminal answer when
    /// the format is broken.
    pub fn score_outcome(&self, outcome: &ParsedOutcome) -> FinalScore {
        match &outcome.trace {
            Some(t) => self.score(Some(t.final_answer())),
            None => self.score(outcome.terminal_answer.as_deref()),
        }
    }
}

pub fn think_reward(generated: &TokenSeq, gold: &TokenSeq, alpha: f64) -> f64 {
    alpha * bleu1(generated, gold) + (1.0 - alpha) * rouge_l(generated, gold)
}

/// `gamma` iff every intermediate answer matches after normalisation.
pub fn answer_bonus<A: AsRef<str>, B: AsRef<str>>(generated: &[A], gold: &[B], gamma: f64) -> f64 {
    let all_match = generated.len() == gold.len()
        && generated
            .iter()
            .zip(gold)
            .all(|(g, r)| normalize_answer(g.as_ref()) == normalize_answer(r.as_ref()));
    if all_match {
        gamma
    } else {
        0.0
    }
}

/// Strict comparison on the EMA prior.
pub fn gate(format_ok: bool, final_ok: bool, batch_metric: f64, ema_prev: f64) -> bool {
    format_ok && final_ok && batch_metric > ema_prev
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProcessReward {
    pub think_steps: Vec<f64>,
    pub answer_bonus: f64,
    pub total: f64,
}

/// Think scores over positionally aligned intermediate steps plus the answer
/// bonus, or zero when the gate is closed.
pub fn process_reward(
    generated: &[StepRef<'_>],
    gold: &[StepRef<'_>],
    gate_open: bool,
    config: &RewardConfig,
) -> ProcessReward {
    if !gate_open {
        return ProcessReward::default();
    }
    let think_steps: Vec<f64> = generated
        .iter()
        .zip(gold)
        .map(|(g, r)| think_reward(&tokenize(g.think), &tokenize(r.think), config.alpha))
        .collect();
    let gen_answers: Vec<&str> = generated.iter().map(|s| s.answer).collect();
    let gold_answers: Vec<&str> = gold.iter().map(|s| s.answer).collect();
    let bonus = answer_bonus(&gen_answers, &gold_answers, config.gamma);
    let total = think_steps.iter().sum::<f64>() + bonus;
    ProcessReward {
        think_steps,
        answer_bonus: bonus,
        total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_final: f64,
    pub r_proc: f64,
    pub gate: bool,
    pub r_think_steps: Vec<f64>,
    pub r_ans: f64,
    pub total: f64,
}

pub fn total_reward(
    r_format: f64,
    r_final: f64,
    gate_open: bool,
    process: ProcessReward,
    config: &RewardConfig,
) -> RewardBreakdown {
    let total = config.lambda * r_format + (1.0 - config.lambda) * r_final + process.total;
    RewardBreakdown {
        r_format,
        r_final,
        r_proc: process.total,
        gate: gate_open,
        r_think_steps: process.think_steps,
        r_ans: process.answer_bonus,
        total,
    }
}

/// Full reward of one parsed output given its precomputed final score and the
/// batch-level gate inputs.
pub fn score_outcome(
    outcome: &ParsedOutcome,
    gold_intermediate: &[StepRef<'_>],
    final_score: &FinalScore,
    batch_metric: f64,
    ema_threshold: f64,
    mode: ProcessMode,
    config: &RewardConfig,
) -> RewardBreakdown {
    let r_format = format_reward(outcome);
    let gate_open = match mode {
        ProcessMode::Full => gate(outcome.format_ok, final_score.correct, batch_metric, ema_threshold),
        ProcessMode::AnswerOnly => false,
        ProcessMode::DirectThink => true,
    };
    let process = match (&outcome.trace, gate_open) {
        (Some(trace), true) => {
            let (intermediate, _) = trace.split_intermediate_final();
            process_reward(&intermediate, gold_intermediate, true, config)
        }
        _ => ProcessReward::default(),
    };
    total_reward(r_format, final_score.reward, gate_open, process, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Disease;
    use crate::trace::parse_trace;
    use proptest::prelude::*;

    fn keys(k: &[&str]) -> Vec<String> {
        k.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn format_reward_examples() {
        let ok = parse_trace("<think>a</think><answer>b</answer><think>c</think><answer>d</answer>");
        assert_eq!(format_reward(&ok), 1.0);
        let bad = parse_trace("<think>a</think><answer>b</answer><think>c</think>");
        assert_eq!(format_reward(&bad), 0.0);
        assert_eq!(format_reward(&parse_trace("")), 0.0);
    }

    #[test]
    fn closed_final_examples() {
        let k = keys(&["A", "B", "C", "D"]);
        assert_eq!(final_reward_closed("B", "B", &k).reward, 1.0);
        assert_eq!(final_reward_closed("A", "B", &k).reward, 0.0);
        assert_eq!(final_reward_closed("b.", "B", &k).reward, 1.0);
        let out = final_reward_closed("E", "B", &k);
        assert_eq!(out.reward, 0.0);
        assert!(out.warning.is_some());
        assert_eq!(final_reward_closed("C, A", "A, C", &k).reward, 1.0);
    }

    #[test]
    fn open_final_examples() {
        use Disease::*;
        let s = |v: &[Disease]| LabelSet::new(v.iter().copied()).unwrap();
        assert_eq!(final_reward_open(&s(&[Edema]), &s(&[Edema])).reward, 1.0);
        assert_eq!(
            final_reward_open(&s(&[Edema, Pneumonia]), &s(&[Pneumonia, Atelectasis])).reward,
            0.5
        );
        let miss = final_reward_open(&s(&[]), &s(&[Edema]));
        assert_eq!(miss.reward, 0.0);
        assert!(!miss.correct);
    }

    #[test]
    fn think_reward_examples() {
        let a = tokenize("pleural effusion present");
        let b = tokenize("pleural effusion absent");
        assert_eq!(think_reward(&a, &a, 0.3), 1.0);
        assert!((think_reward(&a, &b, 0.3) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(think_reward(&a, &tokenize("x y"), 0.3), 0.0);
    }

    #[test]
    fn answer_bonus_examples() {
        assert_eq!(answer_bonus(&["yes", "no"], &["yes", "no"], 0.2), 0.2);
        assert_eq!(answer_bonus(&["yes", "yes"], &["yes", "no"], 0.2), 0.0);
        assert_eq!(answer_bonus::<&str, &str>(&[], &[], 0.2), 0.2);
        assert_eq!(answer_bonus(&["Yes."], &["yes"], 0.2), 0.2);
        assert_eq!(answer_bonus(&["yes"], &["yes", "no"], 0.2), 0.0);
    }

    #[test]
    fn gate_examples() {
        assert!(gate(true, true, 0.6, 0.5));
        assert!(!gate(true, true, 0.5, 0.5));
        assert!(!gate(false, true, 0.9, 0.0));
        assert!(!gate(true, false, 0.9, 0.0));
    }

    #[test]
    fn process_reward_examples() {
        let cfg = RewardConfig::default();
        let steps = [
            StepRef { think: "a b", answer: "keep" },
            StepRef { think: "c d", answer: "exclude" },
        ];
        assert_eq!(process_reward(&steps, &steps, false, &cfg).total, 0.0);

        // each generated think shares one of two tokens with gold, in order:
        // bleu1 = 1/2, rouge_l = 1/2 -> r_think = 0.5
        let gen = [
            StepRef { think: "a x", answer: "keep" },
            StepRef { think: "c y", answer: "exclude" },
        ];
        let pr = process_reward(&gen, &steps, true, &cfg);
        assert_eq!(pr.think_steps, vec![0.5, 0.5]);
        assert!((pr.total - 1.2).abs() < 1e-12);

        let pr = process_reward(&[], &[], true, &cfg);
        assert!((pr.total - 0.2).abs() < 1e-12);
    }

    #[test]
    fn surplus_generated_steps_earn_nothing() {
        let cfg = RewardConfig::default();
        let gold = [StepRef { think: "a", answer: "keep" }];
        let gen = [
            StepRef { think: "a", answer: "keep" },
            StepRef { think: "a", answer: "keep" },
        ];
        let pr = process_reward(&gen, &gold, true, &cfg);
        assert_eq!(pr.think_steps, vec![1.0]);
        assert_eq!(pr.answer_bonus, 0.0);
    }

    #[test]
    fn total_reward_examples() {
        let cfg = RewardConfig::default();
        let t = |f, fin, p: f64| {
            let pr = ProcessReward { total: p, ..Default::default() };
            total_reward(f, fin, p > 0.0, pr, &cfg).total
        };
        assert!((t(1.0, 1.0, 0.0) - 1.0).abs() < 1e-12);
        assert!((t(1.0, 0.0, 0.0) - 0.2).abs() < 1e-12);
        assert!((t(1.0, 1.0, 1.2) - 2.2).abs() < 1e-12);
    }

    #[test]
    fn ema_examples() {
        let mut ema = EmaTracker::new(0.9).unwrap();
        assert!((ema.update(0.5).unwrap() - 0.05).abs() < 1e-15);
        assert!((ema.update(0.5).unwrap() - 0.095).abs() < 1e-15);
        assert!(ema.update(1.5).is_err());
        assert_eq!(ema_step(0.3, 0.3, 0.9), 0.3);
        assert!(EmaTracker::new(1.0).is_err());
    }

    #[test]
    fn ema_threshold_is_debiased_average() {
        let mut ema = EmaTracker::new(0.9).unwrap();
        assert_eq!(ema.gate_threshold(), 0.0);
        ema.update(0.5).unwrap();
        assert!((ema.gate_threshold() - 0.5).abs() < 1e-12);
        ema.update(0.4).unwrap();
        // (0.9 * 0.1 * 0.5 + 0.1 * 0.4) / (1 - 0.81)
        assert!((ema.gate_threshold() - 0.085 / 0.19).abs() < 1e-12);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer(" B. "), "b");
        assert_eq!(normalize_answer("Pleural  Effusion"), "pleural effusion");
        assert_eq!(normalize_answer("yes"), normalize_answer("Yes."));
        assert_eq!(normalize_answer("B. Edema"), "b");
        assert_eq!(normalize_answer("a small effusion"), "a small effusion");
        assert_eq!(normalize_answer("C, a"), "a, c");
    }

    #[test]
    fn unparseable_final_answer_scores_zero() {
        let target = FinalTarget::Open {
            gold: LabelSet::new([Disease::Edema]).unwrap(),
        };
        let s = target.score(Some("Flu"));
        assert_eq!(s.reward, 0.0);
        assert!(s.warning.is_some());
        assert_eq!(target.score(None).reward, 0.0);
    }

    #[test]
    fn broken_format_still_scores_terminal_answer() {
        let cfg = RewardConfig::default();
        let target = FinalTarget::Closed {
            gold: "B".into(),
            valid_keys: keys(&["A", "B"]),
        };
        let out = parse_trace("preamble <think>x</think><answer>B</answer>");
        let fs = target.score_outcome(&out);
        assert_eq!(fs.reward, 1.0);
        let bd = score_outcome(&out, &[], &fs, 1.0, 0.0, ProcessMode::Full, &cfg);
        assert_eq!(bd.r_format, 0.0);
        assert!(!bd.gate);
        assert!((bd.total - 0.8).abs() < 1e-12);

        let out = parse_trace("<think>x</think><answer>B</answer><think>y</think>");
        let fs = target.score_outcome(&out);
        assert_eq!(fs.reward, 0.0);
    }

    #[test]
    fn breakdown_field_names() {
        let bd = total_reward(1.0, 1.0, false, ProcessReward::default(), &RewardConfig::default());
        let v = serde_json::to_value(&bd).unwrap();
        let mut names: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        names.sort();
        assert_eq!(
            names,
            ["gate", "r_ans", "r_final", "r_format", "r_proc", "r_think_steps", "total"]
        );
    }

    proptest! {
        #[test]
        fn closed_gate_zeroes_process(
            format_ok: bool, final_ok: bool, m in 0.0f64..=1.0, e in 0.0f64..=1.0,
            texts in prop::collection::vec("[a-z ]{0,12}", 0..5),
        ) {
            let g = gate(format_ok, final_ok, m, e);
            let steps: Vec<StepRef<'_>> =
                texts.iter().map(|t| StepRef { think: t, answer: t }).collect();
            let pr = process_reward(&steps, &steps, g, &RewardConfig::default());
            if !(format_ok && final_ok && m > e) {
                prop_assert!(!g);
                prop_assert_eq!(pr.total, 0.0);
            }
        }

        #[test]
        fn bonus_is_all_or_none(
            a in prop::collection::vec("(yes|no)", 0..5),
            b in prop::collection::vec("(yes|no)", 0..5),
            gamma in 0.0f64..1.0,
        ) {
            let v = answer_bonus(&a, &b, gamma);
            prop_assert!(v == 0.0 || v == gamma);
        }

        #[test]
        fn total_is_linear_in_components(
            f in 0.0f64..=1.0, fin in 0.0f64..=1.0, p in 0.0f64..3.0, lambda in 0.0f64..=1.0,
        ) {
            let cfg = RewardConfig { lambda, ..RewardConfig::default() };
            let total = |f: f64, fin: f64, p: f64| {
                let pr = ProcessReward { total: p, ..Default::default() };
                total_reward(f, fin, true, pr, &cfg).total
            };
            let h = 1e-3;
            let base = total(f, fin, p);
            prop_assert!(((total(f + h, fin, p) - base) / h - lambda).abs() < 1e-9);
            prop_assert!(((total(f, fin + h, p) - base) / h - (1.0 - lambda)).abs() < 1e-9);
            prop_assert!(((total(f, fin, p + h) - base) / h - 1.0).abs() < 1e-9);
        }

        #[test]
        fn ema_contracts_toward_metric(v in 0.0f64..=1.0, m in 0.0f64..=1.0, d in 0.01f64..0.99) {
            let next = ema_step(v, m, d);
            prop_assert!((next - m).abs() <= d * (v - m).abs() + 1e-15);
            prop_assert!((0.0..=1.0).contains(&next));
        }
    }
}
