//! Text and set similarity metrics used for rewards and evaluation.
//!
//! All scores lie in `[0, 1]`. Sentence-level, unsmoothed BLEU; ROUGE
//! F-measures use equal precision/recall weighting.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("\"No Finding\" cannot be combined with other labels")]
    NoFindingConflict,
    #[error("ROUGE-N supports n in {{1, 2}}, got {0}")]
    InvalidN(usize),
    #[error("k must be positive")]
    ZeroK,
    #[error("duplicate label {0} in ranked predictions")]
    DuplicateRanked(Disease),
    #[error("degenerate box ({x_min}, {y_min}, {x_max}, {y_max})")]
    DegenerateBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
}

/// Lowercased word tokens with punctuation removed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: AsRef<str>> FromIterator<S> for TokenSeq {
    /// Each item is run through [`tokenize`], so invariants hold for any input.
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSeq(
            iter.into_iter()
                .flat_map(|s| tokenize(s.as_ref()).0)
                .collect(),
        )
    }
}

/// Splits on whitespace and punctuation, drops punctuation, lowercases.
pub fn tokenize(text: &str) -> TokenSeq {
    TokenSeq(
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .collect(),
    )
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap count between candidate and reference n-grams.
fn clipped_overlap(cand: &[String], reference: &[String], n: usize) -> usize {
    let ref_counts = ngram_counts(reference, n);
    ngram_counts(cand, n)
        .into_iter()
        .map(|(g, c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum()
}

fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Sentence BLEU with uniform weights over 1..=max_n and brevity penalty.
pub fn bleu(candidate: &TokenSeq, reference: &TokenSeq, max_n: usize) -> f64 {
    let c = candidate.len();
    if c == 0 || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        if c < n {
            return 0.0;
        }
        let overlap = clipped_overlap(&candidate.0, &reference.0, n);
        if overlap == 0 {
            return 0.0;
        }
        log_sum += (overlap as f64 / (c - n + 1) as f64).ln();
    }
    let bp = (1.0 - reference.len() as f64 / c as f64).min(0.0).exp();
    bp * (log_sum / max_n as f64).exp()
}

pub fn bleu1(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    bleu(candidate, reference, 1)
}

/// Longest common subsequence length.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&candidate.0, &reference.0) as f64;
    f_measure(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

pub fn rouge_n(candidate: &TokenSeq, reference: &TokenSeq, n: usize) -> Result<f64, MetricError> {
    if !(1..=2).contains(&n) {
        return Err(MetricError::InvalidN(n));
    }
    if candidate.len() < n || reference.len() < n {
        return Ok(0.0);
    }
    let overlap = clipped_overlap(&candidate.0, &reference.0, n) as f64;
    let p = overlap / (candidate.len() - n + 1) as f64;
    let r = overlap / (reference.len() - n + 1) as f64;
    Ok(f_measure(p, r))
}

/// The 14-label chest finding catalog, in canonical order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(try_from = "String", into = "String")]
pub enum Disease {
    Atelectasis,
    Cardiomegaly,
    Consolidation,
    Edema,
    EnlargedCardiomediastinum,
    Fracture,
    LungLesion,
    LungOpacity,
    PleuralEffusion,
    PleuralOther,
    Pneumonia,
    Pneumothorax,
    SupportDevices,
    NoFinding,
}

impl Disease {
    pub const ALL: [Disease; 14] = [
        Disease::Atelectasis,
        Disease::Cardiomegaly,
        Disease::Consolidation,
        Disease::Edema,
        Disease::EnlargedCardiomediastinum,
        Disease::Fracture,
        Disease::LungLesion,
        Disease::LungOpacity,
        Disease::PleuralEffusion,
        Disease::PleuralOther,
        Disease::Pneumonia,
        Disease::Pneumothorax,
        Disease::SupportDevices,
        Disease::NoFinding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Disease::Atelectasis => "Atelectasis",
            Disease::Cardiomegaly => "Cardiomegaly",
            Disease::Consolidation => "Consolidation",
            Disease::Edema => "Edema",
            Disease::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            Disease::Fracture => "Fracture",
            Disease::LungLesion => "Lung Lesion",
            Disease::LungOpacity => "Lung Opacity",
            Disease::PleuralEffusion => "Pleural Effusion",
            Disease::PleuralOther => "Pleural Other",
            Disease::Pneumonia => "Pneumonia",
            Disease::Pneumothorax => "Pneumothorax",
            Disease::SupportDevices => "Support Devices",
            Disease::NoFinding => "No Finding",
        }
    }

    /// Position in the canonical catalog.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Disease> {
        Disease::ALL.get(i).copied()
    }
}

impl fmt::Display for Disease {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Disease {
    type Err = MetricError;

    /// Case-insensitive, whitespace-insensitive match against catalog names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: Vec<String> = tokenize(s).0;
        Disease::ALL
            .iter()
            .copied()
            .find(|d| tokenize(d.name()).0 == key)
            .ok_or_else(|| MetricError::UnknownLabel(s.to_string()))
    }
}

impl TryFrom<String> for Disease {
    type Error = MetricError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Disease> for String {
    fn from(d: Disease) -> String {
        d.name().to_string()
    }
}

/// A set of catalog labels; "No Finding" never co-occurs with another label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<Disease>", into = "Vec<Disease>")]
pub struct LabelSet(BTreeSet<Disease>);

impl LabelSet {
    pub fn new<I: IntoIterator<Item = Disease>>(labels: I) -> Result<Self, MetricError> {
        let set: BTreeSet<Disease> = labels.into_iter().collect();
        if set.len() > 1 && set.contains(&Disease::NoFinding) {
            return Err(MetricError::NoFindingConflict);
        }
        Ok(LabelSet(set))
    }

    pub fn empty() -> Self {
        LabelSet(BTreeSet::new())
    }

    /// Parses names like `"Edema, Pleural Effusion"`.
    pub fn parse_list(text: &str) -> Result<Self, MetricError> {
        let labels = text
            .split([',', ';'])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Disease>, _>>()?;
        LabelSet::new(labels)
    }

    pub fn contains(&self, d: Disease) -> bool {
        self.0.contains(&d)
    }

    pub fn iter(&self) -> impl Iterator<Item = Disease> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn intersection_len(&self, other: &LabelSet) -> usize {
        self.0.intersection(&other.0).count()
    }

    /// Comma-separated names in catalog order.
    pub fn to_list_string(&self) -> String {
        self.iter().map(Disease::name).collect::<Vec<_>>().join(", ")
    }
}

impl TryFrom<Vec<Disease>> for LabelSet {
    type Error = MetricError;

    fn try_from(v: Vec<Disease>) -> Result<Self, Self::Error> {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<Disease> {
    fn from(s: LabelSet) -> Vec<Disease> {
        s.0.into_iter().collect()
    }
}

pub fn micro_f1(pred: &LabelSet, gold: &LabelSet) -> f64 {
    let tp = pred.intersection_len(gold);
    let fp = pred.len() - tp;
    let fn_ = gold.len() - tp;
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn jaccard(pred: &LabelSet, gold: &LabelSet) -> f64 {
    let inter = pred.intersection_len(gold);
    let union = pred.len() + gold.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, MetricError> {
        let ok = [x_min, y_min, x_max, y_max]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && x_min < x_max
            && y_min < y_max;
        if !ok {
            return Err(MetricError::DegenerateBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

pub fn recall_at_k(ranked: &[Disease], gold: &LabelSet, k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let mut seen = BTreeSet::new();
    for d in ranked {
        if !seen.insert(*d) {
            return Err(MetricError::DuplicateRanked(*d));
        }
    }
    if gold.is_empty() {
        return Ok(1.0);
    }
    let hits = ranked.iter().take(k).filter(|d| gold.contains(**d)).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> TokenSeq {
        tokenize(s)
    }

    fn labels(names: &[Disease]) -> LabelSet {
        LabelSet::new(names.iter().copied()).unwrap()
    }

    /// Brute-force LCS: longest subsequence of `a` (by bitmask) that is also a
    /// subsequence of `b`.
    fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
        fn is_subseq(s: &[u8], t: &[u8]) -> bool {
            let mut it = t.iter();
            s.iter().all(|c| it.any(|x| x == c))
        }
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| a[i])
                .collect();
            if sub.len() > best && is_subseq(&sub, b) {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(
            toks("Pleural effusion, present.").tokens(),
            ["pleural", "effusion", "present"]
        );
        assert!(toks("").is_empty());
        assert_eq!(
            toks("FINDINGS: clear lungs").tokens(),
            ["findings", "clear", "lungs"]
        );
        assert_eq!(toks("x-ray  (AP)").tokens(), ["x", "ray", "ap"]);
    }

    #[test]
    fn bleu1_examples() {
        let a = toks("pleural effusion present");
        assert_eq!(bleu1(&a, &a), 1.0);
        let b = toks("pleural effusion absent");
        assert!((bleu1(&a, &b) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu1(&toks("a"), &toks("b c")), 0.0);
        assert_eq!(bleu1(&toks(""), &toks("b c")), 0.0);
    }

    #[test]
    fn bleu1_brevity_penalty() {
        // candidate of 1 matching token vs reference of 2: BP = exp(1 - 2)
        let v = bleu1(&toks("a"), &toks("a b"));
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        // clipping: "a a a" vs "a" has precision 1/3
        let v = bleu1(&toks("a a a"), &toks("a"));
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        let abc = toks("a b c");
        assert_eq!(rouge_l(&abc, &abc), 1.0);
        assert!((rouge_l(&abc, &toks("a c d")) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("a"), &toks("")), 0.0);

        assert_eq!(rouge_n(&abc, &abc, 1).unwrap(), 1.0);
        assert_eq!(rouge_n(&abc, &toks("a c d"), 2).unwrap(), 0.0);
        let v = rouge_n(&toks("a b"), &abc, 2).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_n(&abc, &toks("a"), 2).unwrap(), 0.0);
        assert_eq!(rouge_n(&abc, &abc, 3), Err(MetricError::InvalidN(3)));
    }

    #[test]
    fn set_metric_examples() {
        use Disease::*;
        assert_eq!(micro_f1(&labels(&[Pneumonia]), &labels(&[Pneumonia])), 1.0);
        assert_eq!(
            micro_f1(&labels(&[Edema, Pneumonia]), &labels(&[Pneumonia, Atelectasis])),
            0.5
        );
        assert_eq!(micro_f1(&LabelSet::empty(), &labels(&[Edema])), 0.0);
        assert_eq!(micro_f1(&LabelSet::empty(), &LabelSet::empty()), 1.0);

        assert_eq!(jaccard(&labels(&[Pneumonia]), &labels(&[Pneumonia, Edema])), 0.5);
        assert_eq!(jaccard(&labels(&[Edema]), &labels(&[Edema])), 1.0);
        assert_eq!(jaccard(&labels(&[Edema]), &labels(&[Fracture])), 0.0);
        assert_eq!(jaccard(&LabelSet::empty(), &LabelSet::empty()), 1.0);
    }

    #[test]
    fn label_parsing() {
        assert_eq!("pleural  EFFUSION".parse::<Disease>(), Ok(Disease::PleuralEffusion));
        assert!(matches!("Flu".parse::<Disease>(), Err(MetricError::UnknownLabel(_))));
        assert_eq!(
            LabelSet::new([Disease::NoFinding, Disease::Edema]),
            Err(MetricError::NoFindingConflict)
        );
        let s = LabelSet::parse_list("Pneumonia, Edema").unwrap();
        assert_eq!(s.to_list_string(), "Edema, Pneumonia");
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"["Edema","Pneumonia"]"#);
        assert!(serde_json::from_str::<LabelSet>(r#"["Edema","Flu"]"#).is_err());
    }

    /// Exhaustive counting over all subset pairs of a 4-label universe.
    #[test]
    fn set_metrics_match_counting_oracle() {
        let universe = [
            Disease::Atelectasis,
            Disease::Edema,
            Disease::Fracture,
            Disease::Pneumonia,
        ];
        let subset = |mask: u32| -> Vec<Disease> {
            (0..4).filter(|i| mask & (1 << i) != 0).map(|i| universe[i]).collect()
        };
        let mut pairs = 0;
        for pm in 0..16u32 {
            for gm in 0..16u32 {
                pairs += 1;
                let (p, g) = (subset(pm), subset(gm));
                let tp = p.iter().filter(|d| g.contains(d)).count() as f64;
                let fp = p.len() as f64 - tp;
                let fn_ = g.len() as f64 - tp;
                let union = (pm | gm).count_ones() as f64;
                let f1 = if p.is_empty() && g.is_empty() {
                    1.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fn_)
                };
                let jac = if union == 0.0 { 1.0 } else { tp / union };
                let (ps, gs) = (labels(&p), labels(&g));
                assert!((micro_f1(&ps, &gs) - f1).abs() < 1e-12);
                assert!((jaccard(&ps, &gs) - jac).abs() < 1e-12);
            }
        }
        assert_eq!(pairs, 256);
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        let c = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let d = BBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        assert_eq!(iou(&c, &d), 0.0);
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(-1.0, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn recall_examples() {
        use Disease::*;
        assert_eq!(recall_at_k(&[Edema, Pneumonia], &labels(&[Edema]), 1), Ok(1.0));
        assert_eq!(
            recall_at_k(&[Pneumonia, Fracture], &labels(&[Edema, Pneumonia]), 1),
            Ok(0.5)
        );
        assert_eq!(recall_at_k(&[Fracture], &labels(&[Edema]), 1), Ok(0.0));
        assert_eq!(recall_at_k(&[Fracture], &labels(&[Edema]), 0), Err(MetricError::ZeroK));
        assert!(recall_at_k(&[Edema, Edema], &labels(&[Edema]), 1).is_err());
        assert_eq!(recall_at_k(&[Fracture], &LabelSet::empty(), 3), Ok(1.0));
    }

    fn small_seq() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..4, 0..=8)
    }

    fn to_seq(v: &[u8]) -> TokenSeq {
        TokenSeq(v.iter().map(|b| format!("w{b}")).collect())
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in small_seq(), b in small_seq()) {
            prop_assert_eq!(lcs_len(&a, &b), lcs_brute(&a, &b));
        }

        #[test]
        fn text_metrics_bounded(a in small_seq(), b in small_seq()) {
            let (ca, cb) = (to_seq(&a), to_seq(&b));
            for v in [
                bleu1(&ca, &cb),
                bleu(&ca, &cb, 2),
                rouge_l(&ca, &cb),
                rouge_n(&ca, &cb, 1).unwrap(),
                rouge_n(&ca, &cb, 2).unwrap(),
            ] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if !a.is_empty() {
                prop_assert_eq!(bleu1(&ca, &ca), 1.0);
                prop_assert_eq!(rouge_l(&ca, &ca), 1.0);
            }
            // LCS-based F is 1 only when the sequences coincide
            if rouge_l(&ca, &cb) == 1.0 {
                prop_assert_eq!(&a, &b);
            }
        }

        #[test]
        fn iou_symmetric(
            x in 0.0f64..50.0, y in 0.0f64..50.0, w in 0.5f64..30.0, h in 0.5f64..30.0,
            x2 in 0.0f64..50.0, y2 in 0.0f64..50.0, w2 in 0.5f64..30.0, h2 in 0.5f64..30.0,
        ) {
            let a = BBox::new(x, y, x + w, y + h).unwrap();
            let b = BBox::new(x2, y2, x2 + w2, y2 + h2).unwrap();
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
        }
    }
}
