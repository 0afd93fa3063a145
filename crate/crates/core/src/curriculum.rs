//! Two-phase GRPO trainer: close-ended questions first, then open-ended
//! diagnosis, with EMA-gated process rewards.
//!
//! Within a phase every step samples a batch, rolls out `G` trajectories per
//! case, scores them, takes one policy step and only then folds the batch
//! metric into the EMA. The EMA restarts at zero and the reference policy is
//! re-frozen at the start of each phase.

use crate::grpo::{update_step, GrpoConfig, GrpoError, TrajectoryGroup};
use crate::metrics::LabelSet;
use crate::policy::{greedy_trajectory, sample_group_with, PolicyError, PolicyParams};
use crate::rewards::{score_outcome, EmaTracker, ProcessMode, RewardBreakdown, RewardConfig, RewardError};
use crate::synthcxr::{generate_heldout, DatasetPartition, QuestionKind, SynthCase, SynthError};
use crate::trace::{parse_trace, serialize_trace};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum CurriculumError {
    #[error("config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("{phase} phase: case {id} has kind {kind}")]
    KindMismatch { phase: Phase, id: String, kind: QuestionKind },
    #[error("{0} phase has steps to run but an empty dataset")]
    EmptyDataset(Phase),
    #[error("step {step}: {source}")]
    Update { step: usize, source: GrpoError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("log sink: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Closed,
    Open,
}

impl Phase {
    fn salt(self) -> u64 {
        match self {
            Phase::Closed => 0xC105ED,
            Phase::Open => 0x0BE2,
        }
    }

    fn admits(self, kind: QuestionKind) -> bool {
        match self {
            Phase::Closed => kind.is_closed(),
            Phase::Open => kind == QuestionKind::Open,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Closed => "closed",
            Phase::Open => "open",
        })
    }
}

/// Flat training configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub n_closed: usize,
    pub n_open: usize,
    pub batch_size: usize,
    pub group_size: usize,
    pub temperature: f64,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub adv_std_floor: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub ema_decay: f64,
    pub mode: ProcessMode,
    /// Drives batch sampling and rollouts.
    pub seed: u64,
    /// Drives the split of the corpus into answer-only and reasoning cases.
    pub partition_seed: u64,
    pub reasoning_fraction: f64,
    /// Held-out cases per question kind.
    pub eval_cases: usize,
    pub eval_seed: u64,
    pub eval_noise: f64,
    /// Write one log line per trajectory with its reward breakdown.
    pub log_trajectories: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        let g = GrpoConfig::default();
        let r = RewardConfig::default();
        CurriculumConfig {
            n_closed: 100,
            n_open: 100,
            batch_size: 16,
            group_size: g.group_size,
            temperature: g.temperature,
            clip_epsilon: g.clip_epsilon,
            kl_beta: g.kl_beta,
            learning_rate: g.learning_rate,
            adv_std_floor: g.adv_std_floor,
            lambda: r.lambda,
            alpha: r.alpha,
            gamma: r.gamma,
            ema_decay: r.ema_decay,
            mode: ProcessMode::Full,
            seed: 0,
            partition_seed: 0,
            reasoning_fraction: 1.0,
            eval_cases: 200,
            eval_seed: 1,
            eval_noise: 0.1,
            log_trajectories: true,
        }
    }
}

impl CurriculumConfig {
    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            clip_epsilon: self.clip_epsilon,
            kl_beta: self.kl_beta,
            learning_rate: self.learning_rate,
            adv_std_floor: self.adv_std_floor,
            temperature: self.temperature,
        }
    }

    pub fn rewards(&self) -> RewardConfig {
        RewardConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            gamma: self.gamma,
            ema_decay: self.ema_decay,
        }
    }

    /// Checks every field, naming the first offending one.
    pub fn validate(&self) -> Result<(), CurriculumError> {
        let err = |field: &'static str, reason: &str| {
            Err(CurriculumError::Config { field, reason: reason.to_string() })
        };
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1");
        }
        if self.group_size < 2 {
            return err("group_size", "must be at least 2");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return err("temperature", "must be positive and finite");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return err("clip_epsilon", "must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return err("kl_beta", "must be finite and non-negative");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate", "must be finite and non-negative");
        }
        if !(self.adv_std_floor > 0.0 && self.adv_std_floor.is_finite()) {
            return err("adv_std_floor", "must be positive");
        }
        for (field, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("gamma", self.gamma)] {
            if !unit(v) {
                return err(field, "must lie in [0, 1]");
            }
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return err("ema_decay", "must lie in [0, 1)");
        }
        if !unit(self.reasoning_fraction) {
            return err("reasoning_fraction", "must lie in [0, 1]");
        }
        if !(0.0..0.5).contains(&self.eval_noise) {
            return err("eval_noise", "must lie in [0, 0.5)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// 1-based, counted across both phases.
    pub step: usize,
    pub phase: Phase,
    pub mean_reward: f64,
    pub batch_metric: f64,
    /// EMA after folding in this step's batch metric.
    pub ema: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub gate_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub step: usize,
    pub phase: Phase,
    pub case_id: String,
    pub index: usize,
    #[serde(flatten)]
    pub breakdown: RewardBreakdown,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header { timestamp: String },
    Step(StepStats),
    Trajectory(TrajectoryLog),
    PhaseEnd {
        phase: Phase,
        steps: usize,
        heldout: BTreeMap<String, f64>,
        final_ema: f64,
    },
}

/// Receives log records and checkpoints as training proceeds.
pub trait RunObserver {
    fn record(&mut self, record: &LogRecord) -> Result<(), CurriculumError>;

    fn checkpoint(&mut self, _label: &str, _params: &PolicyParams) -> Result<(), CurriculumError> {
        Ok(())
    }
}

/// Keeps every record in memory.
#[derive(Debug, Default)]
pub struct MemoryLog {
    pub records: Vec<LogRecord>,
    pub checkpoints: Vec<(String, PolicyParams)>,
}

impl RunObserver for MemoryLog {
    fn record(&mut self, record: &LogRecord) -> Result<(), CurriculumError> {
        self.records.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, label: &str, params: &PolicyParams) -> Result<(), CurriculumError> {
        self.checkpoints.push((label.to_string(), params.clone()));
        Ok(())
    }
}

/// Drops everything.
#[derive(Debug, Default)]
pub struct NullObserver;

impl RunObserver for NullObserver {
    fn record(&mut self, _record: &LogRecord) -> Result<(), CurriculumError> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub steps: Vec<StepStats>,
    pub heldout: BTreeMap<String, f64>,
    pub final_ema: f64,
}

/// Held-out cases drawn from seeds no corpus can produce.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutSets {
    pub binary: Vec<SynthCase>,
    pub single: Vec<SynthCase>,
    pub multiple: Vec<SynthCase>,
    pub open: Vec<SynthCase>,
}

impl HeldoutSets {
    pub fn generate(per_kind: usize, seed: u64, noise_rate: f64) -> Result<Self, SynthError> {
        Ok(HeldoutSets {
            binary: generate_heldout(per_kind, seed, QuestionKind::Binary, noise_rate)?,
            single: generate_heldout(per_kind, seed, QuestionKind::Single, noise_rate)?,
            multiple: generate_heldout(per_kind, seed, QuestionKind::Multiple, noise_rate)?,
            open: generate_heldout(per_kind, seed, QuestionKind::Open, noise_rate)?,
        })
    }
}

fn greedy_final(params: &PolicyParams, case: &SynthCase) -> Result<String, PolicyError> {
    Ok(greedy_trajectory(params, case)?.trace.final_answer().to_string())
}

fn closed_accuracy(params: &PolicyParams, cases: &[&SynthCase]) -> Result<f64, PolicyError> {
    if cases.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for c in cases {
        let pred = greedy_final(params, c)?;
        if c.final_target().score(Some(&pred)).correct {
            correct += 1;
        }
    }
    Ok(correct as f64 / cases.len() as f64)
}

/// Greedy-decoding metrics: accuracy on close-ended kinds, pooled micro-F1
/// and mean Jaccard on open-ended cases.
pub fn evaluate_heldout(params: &PolicyParams, sets: &HeldoutSets) -> Result<BTreeMap<String, f64>, PolicyError> {
    let mut out = BTreeMap::new();
    let closed: Vec<&SynthCase> = sets.binary.iter().chain(&sets.single).chain(&sets.multiple).collect();
    out.insert("closed_accuracy".into(), closed_accuracy(params, &closed)?);
    for (name, cases) in [
        ("binary_accuracy", &sets.binary),
        ("single_accuracy", &sets.single),
        ("multiple_accuracy", &sets.multiple),
    ] {
        let refs: Vec<&SynthCase> = cases.iter().collect();
        out.insert(name.into(), closed_accuracy(params, &refs)?);
    }

    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let mut jac = 0.0;
    for c in &sets.open {
        let pred = LabelSet::parse_list(&greedy_final(params, c)?).unwrap_or_else(|_| LabelSet::empty());
        let hit = pred.intersection_len(&c.gold_diseases);
        tp += hit;
        fp += pred.len() - hit;
        fneg += c.gold_diseases.len() - hit;
        jac += crate::metrics::jaccard(&pred, &c.gold_diseases);
    }
    let denom = 2 * tp + fp + fneg;
    out.insert(
        "open_micro_f1".into(),
        if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 },
    );
    out.insert(
        "open_jaccard".into(),
        if sets.open.is_empty() { 0.0 } else { jac / sets.open.len() as f64 },
    );
    Ok(out)
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_batch<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if batch <= n {
        sample(rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Runs `n_steps` GRPO steps of one phase.
///
/// `step_offset` is added to the logged step numbers so that logs of
/// consecutive phases number steps continuously.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    dataset: &[SynthCase],
    params: PolicyParams,
    reference: &PolicyParams,
    n_steps: usize,
    phase: Phase,
    config: &CurriculumConfig,
    heldout: &HeldoutSets,
    step_offset: usize,
    observer: &mut dyn RunObserver,
) -> Result<(PolicyParams, PhaseReport), CurriculumError> {
    config.validate()?;
    if let Some(c) = dataset.iter().find(|c| !phase.admits(c.kind)) {
        return Err(CurriculumError::KindMismatch { phase, id: c.id.clone(), kind: c.kind });
    }
    if n_steps > 0 && dataset.is_empty() {
        return Err(CurriculumError::EmptyDataset(phase));
    }
    let grpo = config.grpo();
    let rcfg = config.rewards();
    let mut ema = EmaTracker::new(config.ema_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, phase.salt()));
    let mut params = params;
    let mut steps = Vec::with_capacity(n_steps);

    for t in 0..n_steps {
        let step = step_offset + t + 1;
        let batch = sample_batch(dataset.len(), config.batch_size, &mut rng);

        let mut rollouts = Vec::with_capacity(batch.len());
        for &i in &batch {
            let case = &dataset[i];
            let trajs = sample_group_with(&params, case, grpo.group_size, grpo.temperature, &mut rng)?;
            let scored: Vec<_> = trajs
                .into_iter()
                .map(|traj| {
                    let outcome = parse_trace(&serialize_trace(&traj.trace));
                    let fs = case.final_target().score_outcome(&outcome);
                    (traj, outcome, fs)
                })
                .collect();
            rollouts.push((case, scored));
        }

        let n_traj: usize = rollouts.iter().map(|(_, s)| s.len()).sum();
        let batch_metric = rollouts
            .iter()
            .flat_map(|(_, s)| s.iter().map(|(_, _, fs)| fs.reward))
            .sum::<f64>()
            / n_traj as f64;
        let threshold = ema.gate_threshold();

        let mut groups = Vec::with_capacity(rollouts.len());
        let mut gates = 0usize;
        for (case, scored) in rollouts {
            let gold = case.gold_intermediate();
            let mut trajectories = Vec::with_capacity(scored.len());
            let mut rewards = Vec::with_capacity(scored.len());
            for (index, (traj, outcome, fs)) in scored.into_iter().enumerate() {
                let bd = score_outcome(&outcome, &gold, &fs, batch_metric, threshold, config.mode, &rcfg);
                gates += bd.gate as usize;
                rewards.push(bd.total);
                if config.log_trajectories {
                    observer.record(&LogRecord::Trajectory(TrajectoryLog {
                        step,
                        phase,
                        case_id: case.id.clone(),
                        index,
                        breakdown: bd,
                    }))?;
                }
                trajectories.push(traj);
            }
            groups.push(
                TrajectoryGroup::new(trajectories, rewards, grpo.adv_std_floor)
                    .map_err(|source| CurriculumError::Update { step, source })?,
            );
        }

        let (next, stats) =
            update_step(&params, reference, &groups, &grpo).map_err(|source| CurriculumError::Update { step, source })?;
        params = next;
        ema.update(batch_metric)?;

        let s = StepStats {
            step,
            phase,
            mean_reward: stats.mean_reward,
            batch_metric,
            ema: ema.value(),
            clip_fraction: stats.clip_fraction,
            kl: stats.kl,
            gate_rate: gates as f64 / n_traj as f64,
        };
        observer.record(&LogRecord::Step(s.clone()))?;
        steps.push(s);
    }

    let report = PhaseReport {
        phase,
        steps,
        heldout: evaluate_heldout(&params, heldout)?,
        final_ema: ema.value(),
    };
    observer.record(&LogRecord::PhaseEnd {
        phase,
        steps: report.steps.len(),
        heldout: report.heldout.clone(),
        final_ema: report.final_ema,
    })?;
    Ok((params, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumOutcome {
    pub params: PolicyParams,
    pub initial_heldout: BTreeMap<String, f64>,
    pub closed: PhaseReport,
    pub open: PhaseReport,
}

/// Closed phase on the close-ended reasoning cases, then open phase on the
/// open-ended ones, starting from a uniform policy.
pub fn run_curriculum(
    partition: &DatasetPartition,
    config: &CurriculumConfig,
    observer: &mut dyn RunObserver,
) -> Result<CurriculumOutcome, CurriculumError> {
    config.validate()?;
    let heldout = HeldoutSets::generate(config.eval_cases, config.eval_seed, config.eval_noise)?;
    let params = PolicyParams::new();
    let initial_heldout = evaluate_heldout(&params, &heldout)?;
    observer.checkpoint("initial", &params)?;

    let reference = params.clone();
    let (params, closed) = train_phase(
        &partition.d_r_closed,
        params,
        &reference,
        config.n_closed,
        Phase::Closed,
        config,
        &heldout,
        0,
        observer,
    )?;
    observer.checkpoint("closed", &params)?;

    let reference = params.clone();
    let (params, open) = train_phase(
        &partition.d_r_open,
        params,
        &reference,
        config.n_open,
        Phase::Open,
        config,
        &heldout,
        config.n_closed,
        observer,
    )?;
    observer.checkpoint("open", &params)?;

    Ok(CurriculumOutcome { params, initial_heldout, closed, open })
}

/// Gate decisions and raw EMA values for a sequence of batch metrics, as the
/// trainer computes them.
pub fn gate_trail(metrics: &[f64], decay: f64) -> Result<Vec<(bool, f64)>, RewardError> {
    let mut ema = EmaTracker::new(decay)?;
    let mut out = Vec::with_capacity(metrics.len());
    for m in metrics {
        let open = crate::rewards::gate(true, true, *m, ema.gate_threshold());
        ema.update(*m)?;
        out.push((open, ema.value()));
    }
    Ok(out)
}
