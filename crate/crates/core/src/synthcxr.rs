//! Deterministic synthetic chest-finding environment.
//!
//! Each case has a gold disease set, a noisy multiset of observed radiographic
//! signs standing in for the image, a templated findings section and a gold
//! interleaved chain. Four question kinds are generated:
//!
//! * `Binary`: "is disease d present?" answered in one think/answer pair.
//! * `Single`: four options, exactly one correct; one pair per option then a
//!   final pair naming the option letter.
//! * `Multiple`: four options, one to three correct; one pair per option then
//!   the retained letters.
//! * `Open`: a pair listing candidate diseases implied by the observed signs,
//!   one pair per candidate, then the confirmed label list.
//!
//! Chains are rendered from a list of slot actions (see [`skeleton`] and
//! [`render_trace`]), which is also how the policy writes its traces.

use crate::metrics::{tokenize, Disease, LabelSet};
use crate::rewards::FinalTarget;
use crate::trace::{parse_trace, serialize_trace, InterleavedTrace, StepRef, TraceError, TraceMode};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("noise_rate {0} outside [0, 0.5)")]
    NoiseRate(f64),
    #[error("reasoning_fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("case {id}: {reason}")]
    Inconsistent { id: String, reason: String },
    #[error("wrong number of slot actions: expected {expected}, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action {action} not allowed in slot {slot}")]
    Action { slot: usize, action: usize },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("unknown question kind {0:?}")]
    UnknownKind(String),
}

/// Why a report was excluded by [`screen_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ScreenRejection {
    #[error("report has no FINDINGS: marker")]
    MissingFindings,
    #[error("report has no IMPRESSION: marker after FINDINGS:")]
    MissingImpression,
    #[error("IMPRESSION: appears only before FINDINGS:")]
    OutOfOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Binary,
    Single,
    Multiple,
    Open,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 4] = [
        QuestionKind::Binary,
        QuestionKind::Single,
        QuestionKind::Multiple,
        QuestionKind::Open,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Binary => "binary",
            QuestionKind::Single => "single",
            QuestionKind::Multiple => "multiple",
            QuestionKind::Open => "open",
        }
    }

    pub fn is_closed(self) -> bool {
        self != QuestionKind::Open
    }

    pub fn trace_mode(self) -> TraceMode {
        match self {
            QuestionKind::Binary => TraceMode::Binary,
            QuestionKind::Single | QuestionKind::Multiple => TraceMode::CloseEnded,
            QuestionKind::Open => TraceMode::OpenEnded,
        }
    }

    fn salt(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for QuestionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuestionKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QuestionKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s.trim().to_lowercase())
            .ok_or_else(|| SynthError::UnknownKind(s.to_string()))
    }
}

/// Radiographic signs each disease produces. Several signs are shared.
pub fn signs_of(d: Disease) -> &'static [&'static str] {
    match d {
        Disease::Atelectasis => &["volume_loss", "linear_opacity"],
        Disease::Cardiomegaly => &["cardiac_enlargement"],
        Disease::Consolidation => &["airspace_opacity", "air_bronchogram"],
        Disease::Edema => &["vascular_congestion", "interstitial_markings"],
        Disease::EnlargedCardiomediastinum => &["mediastinal_widening", "cardiac_enlargement"],
        Disease::Fracture => &["cortical_break"],
        Disease::LungLesion => &["nodular_density"],
        Disease::LungOpacity => &["airspace_opacity"],
        Disease::PleuralEffusion => &["costophrenic_blunting", "meniscus_sign"],
        Disease::PleuralOther => &["pleural_thickening", "costophrenic_blunting"],
        Disease::Pneumonia => &["air_bronchogram", "lobar_opacity"],
        Disease::Pneumothorax => &["pleural_line", "absent_lung_markings"],
        Disease::SupportDevices => &["device_tubing"],
        Disease::NoFinding => &[],
    }
}

/// Every disease except "No Finding".
pub fn pathologies() -> impl Iterator<Item = Disease> {
    Disease::ALL.into_iter().filter(|d| *d != Disease::NoFinding)
}

/// All sign tokens, sorted.
pub fn sign_vocabulary() -> Vec<&'static str> {
    let set: BTreeSet<&'static str> = pathologies().flat_map(|d| signs_of(d).iter().copied()).collect();
    set.into_iter().collect()
}

/// Ordered label catalog with its sign map.
#[derive(Debug, Clone, PartialEq)]
pub struct DiseaseCatalog {
    pub labels: Vec<Disease>,
    pub sign_map: BTreeMap<Disease, Vec<&'static str>>,
}

impl DiseaseCatalog {
    pub fn standard() -> Self {
        DiseaseCatalog {
            labels: Disease::ALL.to_vec(),
            sign_map: Disease::ALL.iter().map(|d| (*d, signs_of(*d).to_vec())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Present,
    Absent,
}

pub const PARAPHRASES: usize = 2;

/// Fixed evidence sentences keyed by disease, polarity and paraphrase.
pub fn evidence_sentence(d: Disease, polarity: Polarity, paraphrase: usize) -> &'static str {
    use Disease::*;
    use Polarity::*;
    let pair: [&'static str; 2] = match (d, polarity) {
        (Atelectasis, Present) => [
            "Linear opacity with volume loss at the lung base indicates atelectasis.",
            "Basal volume loss and linear opacity are consistent with atelectasis.",
        ],
        (Atelectasis, Absent) => [
            "Lung volumes are preserved without linear opacity, arguing against atelectasis.",
            "No volume loss is seen, so atelectasis is not supported.",
        ],
        (Cardiomegaly, Present) => [
            "The cardiac silhouette is enlarged, indicating cardiomegaly.",
            "Cardiac enlargement is present, consistent with cardiomegaly.",
        ],
        (Cardiomegaly, Absent) => [
            "The cardiac silhouette is normal in size, arguing against cardiomegaly.",
            "Heart size is within normal limits, so cardiomegaly is not supported.",
        ],
        (Consolidation, Present) => [
            "Airspace opacity with air bronchograms indicates consolidation.",
            "Dense airspace opacity containing air bronchograms is consistent with consolidation.",
        ],
        (Consolidation, Absent) => [
            "No dense airspace opacity is present, arguing against consolidation.",
            "Air bronchograms are absent, so consolidation is not supported.",
        ],
        (Edema, Present) => [
            "Vascular congestion with interstitial markings indicates pulmonary edema.",
            "Interstitial markings and vascular congestion are consistent with edema.",
        ],
        (Edema, Absent) => [
            "Pulmonary vasculature is normal, arguing against edema.",
            "No interstitial markings are seen, so edema is not supported.",
        ],
        (EnlargedCardiomediastinum, Present) => [
            "The mediastinum is widened with cardiac enlargement, indicating an enlarged cardiomediastinum.",
            "Mediastinal widening is present, consistent with an enlarged cardiomediastinum.",
        ],
        (EnlargedCardiomediastinum, Absent) => [
            "The mediastinal contour is normal, arguing against an enlarged cardiomediastinum.",
            "No mediastinal widening is seen, so an enlarged cardiomediastinum is not supported.",
        ],
        (Fracture, Present) => [
            "A cortical break in a rib indicates a fracture.",
            "Cortical discontinuity of the ribs is consistent with a fracture.",
        ],
        (Fracture, Absent) => [
            "The osseous structures are intact, arguing against a fracture.",
            "No cortical break is seen, so a fracture is not supported.",
        ],
        (LungLesion, Present) => [
            "A nodular density in the lung indicates a lung lesion.",
            "A focal nodular density is consistent with a lung lesion.",
        ],
        (LungLesion, Absent) => [
            "No nodular density is present, arguing against a lung lesion.",
            "The lungs contain no focal nodule, so a lung lesion is not supported.",
        ],
        (LungOpacity, Present) => [
            "Hazy airspace opacity indicates a lung opacity.",
            "An area of airspace opacity is consistent with lung opacity.",
        ],
        (LungOpacity, Absent) => [
            "The lungs are clear of airspace opacity, arguing against lung opacity.",
            "No airspace opacity is seen, so lung opacity is not supported.",
        ],
        (PleuralEffusion, Present) => [
            "Blunting of the costophrenic angle with a meniscus sign indicates a pleural effusion.",
            "A meniscus sign and costophrenic blunting are consistent with pleural effusion.",
        ],
        (PleuralEffusion, Absent) => [
            "The costophrenic angles are sharp, arguing against a pleural effusion.",
            "No meniscus sign is seen, so pleural effusion is not supported.",
        ],
        (PleuralOther, Present) => [
            "Pleural thickening with costophrenic blunting indicates another pleural abnormality.",
            "Pleural thickening is consistent with a pleural abnormality other than effusion.",
        ],
        (PleuralOther, Absent) => [
            "The pleural surfaces are smooth, arguing against another pleural abnormality.",
            "No pleural thickening is seen, so another pleural abnormality is not supported.",
        ],
        (Pneumonia, Present) => [
            "Lobar opacity with air bronchograms indicates pneumonia.",
            "A lobar opacity containing air bronchograms is consistent with pneumonia.",
        ],
        (Pneumonia, Absent) => [
            "No lobar opacity is present, arguing against pneumonia.",
            "The lobes are clear, so pneumonia is not supported.",
        ],
        (Pneumothorax, Present) => [
            "A visible pleural line with absent lung markings indicates a pneumothorax.",
            "Absent peripheral lung markings beyond a pleural line are consistent with pneumothorax.",
        ],
        (Pneumothorax, Absent) => [
            "Lung markings extend to the chest wall, arguing against a pneumothorax.",
            "No pleural line is seen, so a pneumothorax is not supported.",
        ],
        (SupportDevices, Present) => [
            "Tubing projects over the chest, indicating support devices.",
            "Device tubing is visible, consistent with support devices.",
        ],
        (SupportDevices, Absent) => [
            "No tubes or lines project over the chest, arguing against support devices.",
            "No device tubing is seen, so support devices are not supported.",
        ],
        (NoFinding, Present) => [
            "The lungs are clear and the cardiomediastinal silhouette is normal.",
            "No acute cardiopulmonary abnormality is seen.",
        ],
        (NoFinding, Absent) => [
            "Abnormal findings are present in the chest.",
            "The chest radiograph is not normal.",
        ],
    };
    pair[paraphrase % PARAPHRASES]
}

/// Index of a think action: polarity-major, then paraphrase.
pub fn think_action(polarity: Polarity, paraphrase: usize) -> usize {
    let p = match polarity {
        Polarity::Present => 0,
        Polarity::Absent => 1,
    };
    p * PARAPHRASES + paraphrase
}

pub fn think_action_parts(action: usize) -> (Polarity, usize) {
    let polarity = if action / PARAPHRASES == 0 {
        Polarity::Present
    } else {
        Polarity::Absent
    };
    (polarity, action % PARAPHRASES)
}

pub const THINK_VOCAB: usize = 2 * PARAPHRASES;
pub const VERDICT_VOCAB: usize = 2;
pub const VERDICT_ABSENT: usize = 0;
pub const VERDICT_PRESENT: usize = 1;
pub const CHOICE_VOCAB: usize = Disease::ALL.len();

/// What a policy-filled slot decides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotRole {
    /// Evidence sentence about a disease.
    Think(Disease),
    /// Present/absent verdict about a disease.
    Verdict(Disease),
    /// The single-answer option pick, over the disease catalog.
    Choice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    pub role: SlotRole,
    pub vocab_size: usize,
    /// Sorted action indices the slot may take.
    pub allowed: Vec<usize>,
}

fn verdict_text(kind: QuestionKind, d: Disease, action: usize) -> String {
    let present = action == VERDICT_PRESENT;
    match kind {
        QuestionKind::Binary => if present { "yes" } else { "no" }.to_string(),
        QuestionKind::Single | QuestionKind::Multiple => {
            format!("{}: {}", d, if present { "retained" } else { "excluded" })
        }
        QuestionKind::Open => format!("{}: {}", d, if present { "confirmed" } else { "rejected" }),
    }
}

pub fn option_letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

fn sign_text(sign: &str) -> String {
    sign.replace('_', " ")
}

/// Diseases with at least one sign among the observed ones, catalog order.
pub fn candidates(observed: &[String]) -> Vec<Disease> {
    pathologies()
        .filter(|d| signs_of(*d).iter().any(|s| observed.iter().any(|o| o == s)))
        .collect()
}

/// One synthetic diagnostic case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CaseRecord", into = "CaseRecord")]
pub struct SynthCase {
    pub id: String,
    pub kind: QuestionKind,
    pub gold_diseases: LabelSet,
    /// Sorted multiset of sign tokens.
    pub observed_signs: Vec<String>,
    pub findings_text: String,
    /// Option diseases (Single/Multiple), the queried disease (Binary), or
    /// empty (Open).
    pub options: Vec<Disease>,
    pub gold_trace: InterleavedTrace,
    pub gold_final: String,
}

/// JSONL form of a case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub kind: QuestionKind,
    pub gold_diseases: LabelSet,
    pub observed_signs: Vec<String>,
    pub findings_text: String,
    pub options: Vec<Disease>,
    pub trace_text: String,
    pub gold_final: String,
}

impl From<SynthCase> for CaseRecord {
    fn from(c: SynthCase) -> Self {
        CaseRecord {
            trace_text: serialize_trace(&c.gold_trace),
            id: c.id,
            kind: c.kind,
            gold_diseases: c.gold_diseases,
            observed_signs: c.observed_signs,
            findings_text: c.findings_text,
            options: c.options,
            gold_final: c.gold_final,
        }
    }
}

impl TryFrom<CaseRecord> for SynthCase {
    type Error = SynthError;

    fn try_from(r: CaseRecord) -> Result<Self, Self::Error> {
        let bad = |reason: &str| SynthError::Inconsistent {
            id: r.id.clone(),
            reason: reason.to_string(),
        };
        let outcome = parse_trace(&r.trace_text);
        let trace = outcome.trace.ok_or_else(|| bad("trace_text is not a well-formed trace"))?;
        let want_options = match r.kind {
            QuestionKind::Binary => 1,
            QuestionKind::Single | QuestionKind::Multiple => 4,
            QuestionKind::Open => 0,
        };
        if r.options.len() != want_options {
            return Err(bad("option count does not match question kind"));
        }
        let case = SynthCase {
            gold_trace: trace.with_mode(r.kind.trace_mode()),
            id: r.id,
            kind: r.kind,
            gold_diseases: r.gold_diseases,
            observed_signs: r.observed_signs,
            findings_text: r.findings_text,
            options: r.options,
            gold_final: r.gold_final,
        };
        let expected_pairs = case.skeleton_pairs();
        if case.gold_trace.num_pairs() != expected_pairs {
            return Err(SynthError::Inconsistent {
                id: case.id,
                reason: format!(
                    "trace has {} pairs, kind implies {}",
                    case.gold_trace.num_pairs(),
                    expected_pairs
                ),
            });
        }
        Ok(case)
    }
}

impl SynthCase {
    /// Diseases the intermediate steps talk about, in step order.
    pub fn subjects(&self) -> Vec<Disease> {
        match self.kind {
            QuestionKind::Binary | QuestionKind::Single | QuestionKind::Multiple => self.options.clone(),
            QuestionKind::Open => candidates(&self.observed_signs),
        }
    }

    fn skeleton_pairs(&self) -> usize {
        match self.kind {
            QuestionKind::Binary => 1,
            QuestionKind::Single | QuestionKind::Multiple => self.options.len() + 1,
            QuestionKind::Open => candidates(&self.observed_signs).len() + 2,
        }
    }

    /// Answer keys a close-ended final answer may use.
    pub fn answer_keys(&self) -> Vec<String> {
        match self.kind {
            QuestionKind::Binary => vec!["yes".into(), "no".into()],
            QuestionKind::Single | QuestionKind::Multiple => {
                (0..self.options.len()).map(|i| option_letter(i).to_string()).collect()
            }
            QuestionKind::Open => Vec::new(),
        }
    }

    pub fn final_target(&self) -> FinalTarget {
        match self.kind {
            QuestionKind::Open => FinalTarget::Open {
                gold: self.gold_diseases.clone(),
            },
            _ => FinalTarget::Closed {
                gold: self.gold_final.clone(),
                valid_keys: self.answer_keys(),
            },
        }
    }

    pub fn gold_intermediate(&self) -> Vec<StepRef<'_>> {
        self.gold_trace.split_intermediate_final().0
    }

    /// Sorted, de-duplicated observed signs joined with `+`.
    pub fn signs_digest(&self) -> String {
        let set: BTreeSet<&str> = self.observed_signs.iter().map(String::as_str).collect();
        if set.is_empty() {
            "-".to_string()
        } else {
            set.into_iter().collect::<Vec<_>>().join("+")
        }
    }

    pub fn question_text(&self) -> String {
        match self.kind {
            QuestionKind::Binary => format!("Is there evidence of {}?", self.options[0]),
            QuestionKind::Single => format!(
                "Which finding is present? {}",
                self.lettered_options()
            ),
            QuestionKind::Multiple => format!(
                "Which findings are present? Select all that apply. {}",
                self.lettered_options()
            ),
            QuestionKind::Open => "Which diseases are present in this radiograph?".into(),
        }
    }

    fn lettered_options(&self) -> String {
        self.options
            .iter()
            .enumerate()
            .map(|(i, d)| format!("{}. {}", option_letter(i), d))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// A raw report with FINDINGS and IMPRESSION sections.
    pub fn report_text(&self) -> String {
        format!(
            "EXAMINATION: Chest radiograph. FINDINGS: {} IMPRESSION: {}.",
            self.findings_text,
            self.gold_diseases.to_list_string()
        )
    }
}

/// Slots a trajectory fills for this case, in trace order.
pub fn skeleton(case: &SynthCase) -> Vec<SlotSpec> {
    let think = |d| SlotSpec {
        role: SlotRole::Think(d),
        vocab_size: THINK_VOCAB,
        allowed: (0..THINK_VOCAB).collect(),
    };
    let verdict = |d| SlotSpec {
        role: SlotRole::Verdict(d),
        vocab_size: VERDICT_VOCAB,
        allowed: (0..VERDICT_VOCAB).collect(),
    };
    let mut slots = Vec::new();
    for d in case.subjects() {
        slots.push(think(d));
        slots.push(verdict(d));
    }
    if case.kind == QuestionKind::Single {
        let mut allowed: Vec<usize> = case.options.iter().map(|d| d.index()).collect();
        allowed.sort_unstable();
        slots.push(SlotSpec {
            role: SlotRole::Choice,
            vocab_size: CHOICE_VOCAB,
            allowed,
        });
    }
    slots
}

/// Builds the interleaved trace a sequence of slot actions produces.
pub fn render_trace(case: &SynthCase, actions: &[usize]) -> Result<InterleavedTrace, SynthError> {
    let slots = skeleton(case);
    if actions.len() != slots.len() {
        return Err(SynthError::ActionCount {
            expected: slots.len(),
            got: actions.len(),
        });
    }
    for (i, (slot, a)) in slots.iter().zip(actions).enumerate() {
        if slot.allowed.binary_search(a).is_err() {
            return Err(SynthError::Action { slot: i, action: *a });
        }
    }

    let subjects = case.subjects();
    let mut pairs: Vec<(String, String)> = Vec::new();
    if case.kind == QuestionKind::Open {
        let think = if case.observed_signs.is_empty() {
            "No abnormal signs are observed.".to_string()
        } else {
            let set: BTreeSet<&str> = case.observed_signs.iter().map(String::as_str).collect();
            let list: Vec<String> = set.into_iter().map(sign_text).collect();
            format!("Observed signs: {}.", list.join(", "))
        };
        let answer = if subjects.is_empty() {
            "Possible diseases: none".to_string()
        } else {
            let names: Vec<&str> = subjects.iter().map(|d| d.name()).collect();
            format!("Possible diseases: {}", names.join(", "))
        };
        pairs.push((think, answer));
    }

    let mut present = Vec::new();
    for (k, d) in subjects.iter().enumerate() {
        let (polarity, para) = think_action_parts(actions[2 * k]);
        let verdict = actions[2 * k + 1];
        if verdict == VERDICT_PRESENT {
            present.push(k);
        }
        pairs.push((
            evidence_sentence(*d, polarity, para).to_string(),
            verdict_text(case.kind, *d, verdict),
        ));
    }

    let letters = |idx: &[usize]| -> String {
        idx.iter().map(|i| option_letter(*i).to_string()).collect::<Vec<_>>().join(", ")
    };
    let retained = if present.is_empty() {
        "Retained options: none.".to_string()
    } else {
        format!("Retained options: {}.", letters(&present))
    };
    match case.kind {
        QuestionKind::Binary => {}
        QuestionKind::Single => {
            let choice = Disease::from_index(actions[actions.len() - 1]).expect("allowed index");
            let pos = case.options.iter().position(|d| *d == choice).expect("choice among options");
            pairs.push((
                format!("{retained} The findings best support option {} ({}).", option_letter(pos), choice),
                option_letter(pos).to_string(),
            ));
        }
        QuestionKind::Multiple => {
            let answer = if present.is_empty() { "None".to_string() } else { letters(&present) };
            pairs.push((retained, answer));
        }
        QuestionKind::Open => {
            let confirmed: Vec<Disease> = present.iter().map(|k| subjects[*k]).collect();
            let answer = if confirmed.is_empty() {
                Disease::NoFinding.name().to_string()
            } else {
                confirmed.iter().map(|d| d.name()).collect::<Vec<_>>().join(", ")
            };
            pairs.push((format!("Confirmed diseases: {answer}."), answer));
        }
    }
    Ok(InterleavedTrace::from_pairs(&pairs, Some(case.kind.trace_mode()))?)
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-case seed for training corpora: top bit clear.
pub fn corpus_seed(base: u64, index: u64) -> u64 {
    mix(base, index) & !(1u64 << 63)
}

/// Per-case seed for held-out sets: top bit set, so never equal to a corpus seed.
pub fn heldout_seed(base: u64, index: u64) -> u64 {
    mix(base ^ 0x5EED_0F_4E1D_0u64, index) | (1u64 << 63)
}

fn paraphrase_for(seed: u64, d: Disease) -> usize {
    (mix(seed, 0x1000 + d.index() as u64) % PARAPHRASES as u64) as usize
}

/// Gold slot actions for a case generated from `seed`.
fn gold_actions(case: &SynthCase, seed: u64) -> Vec<usize> {
    let mut actions = Vec::new();
    for d in case.subjects() {
        let present = case.gold_diseases.contains(d);
        let polarity = if present { Polarity::Present } else { Polarity::Absent };
        actions.push(think_action(polarity, paraphrase_for(seed, d)));
        actions.push(if present { VERDICT_PRESENT } else { VERDICT_ABSENT });
    }
    if case.kind == QuestionKind::Single {
        let gold = case
            .options
            .iter()
            .find(|d| case.gold_diseases.contains(**d))
            .expect("single case has its gold among options");
        actions.push(gold.index());
    }
    actions
}

/// Generates one case. Identical arguments give identical cases.
pub fn gen_case(seed: u64, kind: QuestionKind, noise_rate: f64) -> Result<SynthCase, SynthError> {
    if !(0.0..0.5).contains(&noise_rate) {
        return Err(SynthError::NoiseRate(noise_rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, kind.salt()));
    let pool: Vec<Disease> = pathologies().collect();

    let allow_no_finding = matches!(kind, QuestionKind::Binary | QuestionKind::Open);
    let gold: Vec<Disease> = if allow_no_finding && rng.gen_bool(0.15) {
        vec![Disease::NoFinding]
    } else {
        let size = match kind {
            QuestionKind::Single => 1,
            _ => {
                let u: f64 = rng.gen();
                if u < 0.5 {
                    1
                } else if u < 0.85 {
                    2
                } else {
                    3
                }
            }
        };
        pool.choose_multiple(&mut rng, size).copied().collect()
    };
    let gold_set = LabelSet::new(gold.iter().copied()).expect("sampled gold set is valid");

    let options: Vec<Disease> = match kind {
        QuestionKind::Binary => {
            let members: Vec<Disease> = gold_set.iter().filter(|d| *d != Disease::NoFinding).collect();
            let subject = if !members.is_empty() && rng.gen_bool(0.5) {
                *members.choose(&mut rng).expect("non-empty")
            } else {
                let others: Vec<Disease> =
                    pool.iter().copied().filter(|d| !gold_set.contains(*d)).collect();
                *others.choose(&mut rng).expect("non-empty")
            };
            vec![subject]
        }
        QuestionKind::Single | QuestionKind::Multiple => {
            let others: Vec<Disease> = pool.iter().copied().filter(|d| !gold_set.contains(*d)).collect();
            let mut opts: Vec<Disease> = gold_set.iter().collect();
            opts.extend(others.choose_multiple(&mut rng, 4 - opts.len()).copied());
            opts.shuffle(&mut rng);
            opts
        }
        QuestionKind::Open => Vec::new(),
    };

    let gold_signs: Vec<&str> = gold_set.iter().flat_map(|d| signs_of(d).iter().copied()).collect();
    let mut observed: Vec<String> = Vec::new();
    for s in &gold_signs {
        // draw unconditionally so the stream does not depend on noise_rate
        let u: f64 = rng.gen();
        if u >= noise_rate {
            observed.push(s.to_string());
        }
    }
    let u: f64 = rng.gen();
    let distractors: Vec<&str> = sign_vocabulary()
        .into_iter()
        .filter(|s| !gold_signs.contains(s))
        .collect();
    let pick = distractors.choose(&mut rng).copied();
    if u < noise_rate {
        if let Some(s) = pick {
            observed.push(s.to_string());
        }
    }
    observed.sort();

    let findings_text = gold_set
        .iter()
        .map(|d| evidence_sentence(d, Polarity::Present, paraphrase_for(seed, d)))
        .collect::<Vec<_>>()
        .join(" ");

    let mut case = SynthCase {
        id: format!("{}-{}", kind.as_str(), seed),
        kind,
        gold_diseases: gold_set,
        observed_signs: observed,
        findings_text,
        options,
        // placeholder until the gold chain is rendered below
        gold_trace: InterleavedTrace::from_pairs(&[("", "")], None)?,
        gold_final: String::new(),
    };
    let trace = build_gold_trace(&case, seed)?;
    case.gold_final = match kind {
        QuestionKind::Open => case.gold_diseases.to_list_string(),
        _ => trace.final_answer().to_string(),
    };
    case.gold_trace = trace;
    Ok(case)
}

/// The gold chain: true polarity for every subject with the case's paraphrase
/// choice, correct option or confirmed list at the end.
pub fn build_gold_trace(case: &SynthCase, seed: u64) -> Result<InterleavedTrace, SynthError> {
    let actions = gold_actions(case, seed);
    let mut trace = render_trace(case, &actions)?;
    if case.kind == QuestionKind::Open {
        // the report states the full gold set even when a sign was missed
        let (mid, fin) = trace.split_intermediate_final();
        let answer = case.gold_diseases.to_list_string();
        let mut pairs: Vec<(String, String)> =
            mid.iter().map(|s| (s.think.to_string(), s.answer.to_string())).collect();
        pairs.push((format!("Confirmed diseases: {answer}."), answer));
        let _ = fin;
        trace = InterleavedTrace::from_pairs(&pairs, Some(TraceMode::OpenEnded))?;
    }
    Ok(trace)
}

/// Cases cycling through `kinds`, with seeds derived from `seed`.
pub fn generate_corpus(
    n: usize,
    seed: u64,
    kinds: &[QuestionKind],
    noise_rate: f64,
) -> Result<Vec<SynthCase>, SynthError> {
    if kinds.is_empty() {
        return Ok(Vec::new());
    }
    (0..n)
        .map(|i| gen_case(corpus_seed(seed, i as u64), kinds[i % kinds.len()], noise_rate))
        .collect()
}

/// Held-out cases of one kind from a seed range disjoint from any corpus.
pub fn generate_heldout(
    n: usize,
    seed: u64,
    kind: QuestionKind,
    noise_rate: f64,
) -> Result<Vec<SynthCase>, SynthError> {
    (0..n)
        .map(|i| gen_case(heldout_seed(seed ^ kind.salt(), i as u64), kind, noise_rate))
        .collect()
}

/// Text strictly between the first `FINDINGS:` and the first `IMPRESSION:`
/// after it, trimmed.
pub fn screen_report(raw: &str) -> Result<String, ScreenRejection> {
    const FINDINGS: &str = "FINDINGS:";
    const IMPRESSION: &str = "IMPRESSION:";
    let start = raw.find(FINDINGS).ok_or(ScreenRejection::MissingFindings)? + FINDINGS.len();
    match raw[start..].find(IMPRESSION) {
        Some(end) => Ok(raw[start..start + end].trim().to_string()),
        None if raw[..start].contains(IMPRESSION) => Err(ScreenRejection::OutOfOrder),
        None => Err(ScreenRejection::MissingImpression),
    }
}

/// True iff the findings have strictly more than `min_tokens` tokens.
pub fn token_filter(findings: &str, min_tokens: usize) -> bool {
    tokenize(findings).len() > min_tokens
}

fn primary_label(case: &SynthCase) -> Disease {
    case.gold_diseases.iter().next().unwrap_or(Disease::NoFinding)
}

/// Downsamples every (kind, primary label) stratum to the smallest stratum
/// count. Output is sorted by id.
pub fn balance_labels(cases: &[SynthCase], seed: u64) -> Vec<SynthCase> {
    let mut strata: BTreeMap<(QuestionKind, Disease), Vec<&SynthCase>> = BTreeMap::new();
    for c in cases {
        strata.entry((c.kind, primary_label(c))).or_default().push(c);
    }
    let Some(min) = strata.values().map(Vec::len).min() else {
        return Vec::new();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<SynthCase> = Vec::with_capacity(min * strata.len());
    for members in strata.values_mut() {
        members.sort_by(|a, b| a.id.cmp(&b.id));
        members.shuffle(&mut rng);
        out.extend(members.iter().take(min).map(|c| (*c).clone()));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

/// Answer-only cases and reasoning cases split by question family.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetPartition {
    pub d_a: Vec<SynthCase>,
    pub d_r_closed: Vec<SynthCase>,
    pub d_r_open: Vec<SynthCase>,
}

/// Seeded exact-count split: `round(fraction * n)` cases become reasoning cases.
pub fn partition(cases: &[SynthCase], reasoning_fraction: f64, seed: u64) -> Result<DatasetPartition, SynthError> {
    if !(0.0..=1.0).contains(&reasoning_fraction) {
        return Err(SynthError::Fraction(reasoning_fraction));
    }
    let mut sorted: Vec<&SynthCase> = cases.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n_r = (reasoning_fraction * sorted.len() as f64).round() as usize;

    let mut part = DatasetPartition::default();
    for (i, c) in sorted.into_iter().enumerate() {
        let target = if i >= n_r {
            &mut part.d_a
        } else if c.kind.is_closed() {
            &mut part.d_r_closed
        } else {
            &mut part.d_r_open
        };
        target.push(c.clone());
    }
    for v in [&mut part.d_a, &mut part.d_r_closed, &mut part.d_r_open] {
        v.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(part)
}
