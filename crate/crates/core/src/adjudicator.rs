//! Reconciles expert, Glasgow and Minnesota diagnoses with measured ECG
//! features into a per-class decision.
//!
//! Rules, in order, for each class:
//!
//! * `1a` expert and at least one automatic classifier agree: accept.
//! * `1b` a single automatic classifier is the only positive source: reject.
//!   No positive source at all is rejected under `absent`.
//! * What remains is pending: (i) both classifiers without the expert, or
//!   (ii) the expert alone.
//! * `2a`–`2d` reject pending ST with HR < 100, SB with HR > 50, RBBB/LBBB
//!   with QRS < 115 ms and 1dAVb with PR < 190 ms.
//! * `3a` accepts expert-only RBBB, 1dAVb, SB and ST; `3b` accepts
//!   expert-only AF when SDNN > 646.
//! * `4` anything still pending goes to manual review. A pending class whose
//!   rule needs an absent measure is routed to review under `missing`.

use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use serde::{Deserialize, Deserializer, Serialize};

use crate::classes::{Abnormality, N_CLASSES};
use crate::error::{Error, Result};

pub const ST_MIN_HEART_RATE: f64 = 100.0;
pub const SB_MAX_HEART_RATE: f64 = 50.0;
pub const BBB_MIN_QRS_MS: f64 = 115.0;
pub const AVB_MIN_PR_MS: f64 = 190.0;
pub const AF_MIN_SDNN: f64 = 646.0;

/// Diagnosis flags from the three sources, in class order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFlags {
    pub expert: [bool; N_CLASSES],
    pub glasgow: [bool; N_CLASSES],
    pub minnesota: [bool; N_CLASSES],
}

/// Measured features; any may be absent. SDNN shares the dataset's unit
/// (milliseconds for generated data).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExamMeasures {
    #[serde(default)]
    pub heart_rate: Option<f64>,
    #[serde(default)]
    pub qrs_ms: Option<f64>,
    #[serde(default)]
    pub pr_ms: Option<f64>,
    #[serde(default)]
    pub sdnn: Option<f64>,
}

impl ExamMeasures {
    /// Present values must be finite and positive.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("heart_rate", self.heart_rate),
            ("qrs_ms", self.qrs_ms),
            ("pr_ms", self.pr_ms),
            ("sdnn", self.sdnn),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Input(format!("{name} must be positive and finite, got {v}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DecisionState {
    Accepted,
    Rejected,
    NeedsReview,
}

impl DecisionState {
    pub const ALL: [DecisionState; 3] = [Self::Accepted, Self::Rejected, Self::NeedsReview];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Accepted => "Accepted",
            Self::Rejected => "Rejected",
            Self::NeedsReview => "NeedsReview",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleId {
    #[serde(rename = "1a")]
    AgreeAccept,
    #[serde(rename = "1b")]
    LoneClassifierReject,
    #[serde(rename = "absent")]
    Absent,
    #[serde(rename = "2a")]
    SlowTachycardia,
    #[serde(rename = "2b")]
    FastBradycardia,
    #[serde(rename = "2c")]
    NarrowQrs,
    #[serde(rename = "2d")]
    ShortPr,
    #[serde(rename = "3a")]
    MedicalAccept,
    #[serde(rename = "3b")]
    IrregularAccept,
    #[serde(rename = "4")]
    Review,
    #[serde(rename = "missing")]
    MissingData,
}

impl RuleId {
    pub const ALL: [RuleId; 11] = [
        Self::AgreeAccept,
        Self::LoneClassifierReject,
        Self::Absent,
        Self::SlowTachycardia,
        Self::FastBradycardia,
        Self::NarrowQrs,
        Self::ShortPr,
        Self::MedicalAccept,
        Self::IrregularAccept,
        Self::Review,
        Self::MissingData,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AgreeAccept => "1a",
            Self::LoneClassifierReject => "1b",
            Self::Absent => "absent",
            Self::SlowTachycardia => "2a",
            Self::FastBradycardia => "2b",
            Self::NarrowQrs => "2c",
            Self::ShortPr => "2d",
            Self::MedicalAccept => "3a",
            Self::IrregularAccept => "3b",
            Self::Review => "4",
            Self::MissingData => "missing",
        }
    }

    /// The state every decision under this rule carries.
    pub fn state(self) -> DecisionState {
        match self {
            Self::AgreeAccept | Self::MedicalAccept | Self::IrregularAccept => DecisionState::Accepted,
            Self::LoneClassifierReject
            | Self::Absent
            | Self::SlowTachycardia
            | Self::FastBradycardia
            | Self::NarrowQrs
            | Self::ShortPr => DecisionState::Rejected,
            Self::Review | Self::MissingData => DecisionState::NeedsReview,
        }
    }

    fn is_step2(self) -> bool {
        matches!(
            self,
            Self::SlowTachycardia | Self::FastBradycardia | Self::NarrowQrs | Self::ShortPr
        )
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassDecision {
    pub state: DecisionState,
    pub rule: RuleId,
    /// Which sources made the class pending, if it got that far.
    pub pending: Option<PendingCase>,
}

/// The two ways a class can survive step 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PendingCase {
    /// Both automatic classifiers, not the expert.
    Automatic,
    /// The expert alone.
    Medical,
}

/// One decision per class, in class order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelDecision(pub [ClassDecision; N_CLASSES]);

impl LabelDecision {
    pub fn get(&self, class: Abnormality) -> ClassDecision {
        self.0[class.index()]
    }
}

fn decided(rule: RuleId, pending: Option<PendingCase>) -> ClassDecision {
    ClassDecision {
        state: rule.state(),
        rule,
        pending,
    }
}

/// Measures that are absent or unusable count as missing.
fn usable(v: Option<f64>) -> Option<f64> {
    v.filter(|x| x.is_finite() && *x > 0.0)
}

fn adjudicate_class(class: Abnormality, e: bool, g: bool, m: bool, measures: &ExamMeasures) -> ClassDecision {
    use Abnormality::*;
    if e && (g || m) {
        return decided(RuleId::AgreeAccept, None);
    }
    let case = match (e, g, m) {
        (false, false, false) => return decided(RuleId::Absent, None),
        (false, true, false) | (false, false, true) => return decided(RuleId::LoneClassifierReject, None),
        (false, true, true) => PendingCase::Automatic,
        _ => PendingCase::Medical,
    };
    let pending = Some(case);

    // step 2: reject on a contradicting measurement
    let step2 = match class {
        SinusTachycardia => Some((measures.heart_rate, RuleId::SlowTachycardia)),
        SinusBradycardia => Some((measures.heart_rate, RuleId::FastBradycardia)),
        Rbbb | Lbbb => Some((measures.qrs_ms, RuleId::NarrowQrs)),
        FirstDegreeAvBlock => Some((measures.pr_ms, RuleId::ShortPr)),
        AtrialFibrillation => None,
    };
    if let Some((value, rule)) = step2 {
        let Some(v) = usable(value) else {
            return decided(RuleId::MissingData, pending);
        };
        let reject = match class {
            SinusTachycardia => v < ST_MIN_HEART_RATE,
            SinusBradycardia => v > SB_MAX_HEART_RATE,
            Rbbb | Lbbb => v < BBB_MIN_QRS_MS,
            FirstDegreeAvBlock => v < AVB_MIN_PR_MS,
            AtrialFibrillation => unreachable!(),
        };
        if reject {
            return decided(rule, pending);
        }
    }

    // step 3: accept what the expert alone diagnosed
    if case == PendingCase::Medical {
        match class {
            Rbbb | FirstDegreeAvBlock | SinusBradycardia | SinusTachycardia => {
                return decided(RuleId::MedicalAccept, pending);
            }
            AtrialFibrillation => {
                let Some(sdnn) = usable(measures.sdnn) else {
                    return decided(RuleId::MissingData, pending);
                };
                if sdnn > AF_MIN_SDNN {
                    return decided(RuleId::IrregularAccept, pending);
                }
            }
            Lbbb => {}
        }
    }
    decided(RuleId::Review, pending)
}

pub fn adjudicate(flags: &SourceFlags, measures: &ExamMeasures) -> LabelDecision {
    LabelDecision(Abnormality::ALL.map(|c| {
        let i = c.index();
        adjudicate_class(c, flags.expert[i], flags.glasgow[i], flags.minnesota[i], measures)
    }))
}

fn id_from_json<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "id must be a string or number, got {other}"
        ))),
    }
}

/// One input line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationInput {
    #[serde(deserialize_with = "id_from_json")]
    pub id: String,
    #[serde(flatten)]
    pub flags: SourceFlags,
    #[serde(flatten)]
    pub measures: ExamMeasures,
}

impl AdjudicationInput {
    pub fn parse(line: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(line)?;
        rec.measures.validate()?;
        Ok(rec)
    }
}

/// One output line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    pub class: Abnormality,
    pub state: DecisionState,
    pub rule_id: RuleId,
}

pub fn decision_records(id: &str, d: &LabelDecision) -> Vec<DecisionRecord> {
    Abnormality::ALL
        .iter()
        .map(|&class| {
            let c = d.get(class);
            DecisionRecord {
                id: id.to_string(),
                class,
                state: c.state,
                rule_id: c.rule,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub medical: usize,
    pub automatic: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: Abnormality,
    pub by_rule: BTreeMap<String, usize>,
    pub by_state: BTreeMap<String, usize>,
    /// Step-2 rejections split by which sources made the class pending.
    pub step2_by_source: BTreeMap<String, SourceCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationSummary {
    pub exams: usize,
    pub malformed: usize,
    pub classes: Vec<ClassSummary>,
}

impl AdjudicationSummary {
    fn new() -> Self {
        Self {
            exams: 0,
            malformed: 0,
            classes: Abnormality::ALL
                .iter()
                .map(|&class| ClassSummary {
                    class,
                    by_rule: RuleId::ALL.iter().map(|r| (r.as_str().to_string(), 0)).collect(),
                    by_state: DecisionState::ALL.iter().map(|s| (s.as_str().to_string(), 0)).collect(),
                    step2_by_source: BTreeMap::new(),
                })
                .collect(),
        }
    }

    fn add(&mut self, d: &LabelDecision) {
        self.exams += 1;
        for (summary, c) in self.classes.iter_mut().zip(d.0.iter()) {
            *summary.by_rule.get_mut(c.rule.as_str()).unwrap() += 1;
            *summary.by_state.get_mut(c.state.as_str()).unwrap() += 1;
            if c.rule.is_step2() {
                let counts = summary.step2_by_source.entry(c.rule.as_str().to_string()).or_default();
                match c.pending {
                    Some(PendingCase::Medical) => counts.medical += 1,
                    _ => counts.automatic += 1,
                }
            }
        }
    }

    /// Rules as rows, classes as columns.
    pub fn table(&self) -> String {
        let mut out = format!("{:<8}", "rule");
        for c in &self.classes {
            out += &format!("{:>8}", c.class.abbrev());
        }
        out.push('\n');
        for r in RuleId::ALL {
            out += &format!("{:<8}", r.as_str());
            for c in &self.classes {
                out += &format!("{:>8}", c.by_rule[r.as_str()]);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub decisions: Vec<(String, LabelDecision)>,
    pub summary: AdjudicationSummary,
    /// One message per skipped line.
    pub diagnostics: Vec<String>,
}

impl BatchOutcome {
    pub fn records(&self) -> Vec<DecisionRecord> {
        self.decisions
            .iter()
            .flat_map(|(id, d)| decision_records(id, d))
            .collect()
    }
}

pub fn batch_adjudicate(exams: &[AdjudicationInput]) -> BatchOutcome {
    let mut summary = AdjudicationSummary::new();
    let decisions = exams
        .iter()
        .map(|e| {
            let d = adjudicate(&e.flags, &e.measures);
            summary.add(&d);
            (e.id.clone(), d)
        })
        .collect();
    BatchOutcome {
        decisions,
        summary,
        diagnostics: Vec::new(),
    }
}

/// Parses and adjudicates JSON lines; unparsable lines are skipped, logged
/// and counted. Blank lines are ignored.
pub fn batch_adjudicate_lines<I, S>(lines: I) -> BatchOutcome
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut good = Vec::new();
    let mut diagnostics = Vec::new();
    for (n, line) in lines.into_iter().enumerate() {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        match AdjudicationInput::parse(line) {
            Ok(rec) => good.push(rec),
            Err(e) => {
                let msg = format!("line {}: {e}", n + 1);
                warn!("skipping malformed record, {msg}");
                diagnostics.push(msg);
            }
        }
    }
    let mut out = batch_adjudicate(&good);
    out.summary.malformed = diagnostics.len();
    out.diagnostics = diagnostics;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Abnormality::*;

    fn flags(class: Abnormality, e: bool, g: bool, m: bool) -> SourceFlags {
        let mut f = SourceFlags::default();
        f.expert[class.index()] = e;
        f.glasgow[class.index()] = g;
        f.minnesota[class.index()] = m;
        f
    }

    fn measures(hr: f64, qrs: f64, pr: f64, sdnn: f64) -> ExamMeasures {
        ExamMeasures {
            heart_rate: Some(hr),
            qrs_ms: Some(qrs),
            pr_ms: Some(pr),
            sdnn: Some(sdnn),
        }
    }

    fn normal() -> ExamMeasures {
        measures(75.0, 90.0, 160.0, 30.0)
    }

    fn rule(class: Abnormality, f: SourceFlags, m: ExamMeasures) -> (DecisionState, RuleId) {
        let d = adjudicate(&f, &m).get(class);
        (d.state, d.rule)
    }

    #[test]
    fn documented_examples() {
        use DecisionState::*;
        assert_eq!(
            rule(Rbbb, flags(Rbbb, true, true, false), normal()),
            (Accepted, RuleId::AgreeAccept)
        );
        assert_eq!(
            rule(Lbbb, flags(Lbbb, false, false, true), normal()),
            (Rejected, RuleId::LoneClassifierReject)
        );
        let st = flags(SinusTachycardia, true, false, false);
        assert_eq!(
            rule(SinusTachycardia, st, measures(95.0, 90.0, 160.0, 30.0)),
            (Rejected, RuleId::SlowTachycardia)
        );
        let sb = flags(SinusBradycardia, true, false, false);
        assert_eq!(
            rule(SinusBradycardia, sb, measures(45.0, 90.0, 160.0, 30.0)),
            (Accepted, RuleId::MedicalAccept)
        );
        let af = flags(AtrialFibrillation, true, false, false);
        assert_eq!(
            rule(AtrialFibrillation, af, measures(80.0, 90.0, 160.0, 700.0)),
            (Accepted, RuleId::IrregularAccept)
        );
        assert_eq!(
            rule(AtrialFibrillation, af, measures(80.0, 90.0, 160.0, 600.0)),
            (NeedsReview, RuleId::Review)
        );
        let lbbb = flags(Lbbb, false, true, true);
        assert_eq!(
            rule(Lbbb, lbbb, measures(80.0, 130.0, 160.0, 30.0)),
            (NeedsReview, RuleId::Review)
        );
    }

    #[test]
    fn missing_measure_routes_to_review() {
        let st = flags(SinusTachycardia, true, false, false);
        let m = ExamMeasures {
            heart_rate: None,
            ..normal()
        };
        assert_eq!(adjudicate(&st, &m).get(SinusTachycardia).rule, RuleId::MissingData);
        let af = flags(AtrialFibrillation, true, false, false);
        let m = ExamMeasures { sdnn: None, ..normal() };
        assert_eq!(
            adjudicate(&af, &m).get(AtrialFibrillation).state,
            DecisionState::NeedsReview
        );
        // an accepted class never needs the measure
        let agreed = flags(SinusTachycardia, true, true, true);
        assert_eq!(
            adjudicate(&agreed, &ExamMeasures::default()).get(SinusTachycardia).rule,
            RuleId::AgreeAccept
        );
    }

    #[test]
    fn boundaries_are_strict() {
        let st = flags(SinusTachycardia, true, false, false);
        let hr = |v| rule(SinusTachycardia, st, measures(v, 90.0, 160.0, 30.0)).1;
        assert_eq!(hr(99.9), RuleId::SlowTachycardia);
        assert_eq!(hr(100.0), RuleId::MedicalAccept);
        let af = flags(AtrialFibrillation, true, false, false);
        let sd = |v| rule(AtrialFibrillation, af, measures(80.0, 90.0, 160.0, v)).1;
        assert_eq!(sd(646.1), RuleId::IrregularAccept);
        assert_eq!(sd(646.0), RuleId::Review);
    }

    #[test]
    fn id_may_be_numeric_and_fields_required() {
        let line = r#"{"id": 17, "expert": [false,true,false,false,false,false],
            "glasgow": [false,true,false,false,false,false], "minnesota": [false,false,false,false,false,false],
            "heart_rate": 70, "qrs_ms": null}"#;
        let rec = AdjudicationInput::parse(line).unwrap();
        assert_eq!(rec.id, "17");
        assert_eq!(rec.measures.qrs_ms, None);
        let missing = r#"{"id": "a", "expert": [false,false,false,false,false,false]}"#;
        let bad_value = line.replace("70", "-3");
        let out = batch_adjudicate_lines([line, missing, "", "not json", bad_value.as_str()]);
        assert_eq!(out.decisions.len(), 1);
        assert_eq!(out.summary.malformed, 3);
        assert_eq!(out.records()[1].rule_id, RuleId::AgreeAccept);
    }

    #[test]
    fn all_negative_is_rejected_everywhere() {
        let exams: Vec<_> = (0..5)
            .map(|i| AdjudicationInput {
                id: i.to_string(),
                flags: SourceFlags::default(),
                measures: normal(),
            })
            .collect();
        let s = batch_adjudicate(&exams).summary;
        for c in &s.classes {
            assert_eq!(c.by_state["Rejected"], 5);
            assert_eq!(c.by_state["NeedsReview"], 0);
        }
    }

    fn arb_measure() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![Just(None), (1.0f64..1000.0).prop_map(Some)]
    }

    fn arb_input() -> impl Strategy<Value = (SourceFlags, ExamMeasures)> {
        (
            any::<[bool; 6]>(),
            any::<[bool; 6]>(),
            any::<[bool; 6]>(),
            (arb_measure(), arb_measure(), arb_measure(), arb_measure()),
        )
            .prop_map(|(expert, glasgow, minnesota, (heart_rate, qrs_ms, pr_ms, sdnn))| {
                (
                    SourceFlags {
                        expert,
                        glasgow,
                        minnesota,
                    },
                    ExamMeasures {
                        heart_rate,
                        qrs_ms,
                        pr_ms,
                        sdnn,
                    },
                )
            })
    }

    proptest! {
        #[test]
        fn classifier_swap_is_invisible((f, m) in arb_input()) {
            let swapped = SourceFlags { glasgow: f.minnesota, minnesota: f.glasgow, ..f };
            prop_assert_eq!(adjudicate(&f, &m), adjudicate(&swapped, &m));
        }

        #[test]
        fn rule_and_state_agree((f, m) in arb_input()) {
            for c in adjudicate(&f, &m).0 {
                prop_assert_eq!(c.state, c.rule.state());
            }
        }

        #[test]
        fn lowering_rate_only_rejects_tachycardia(
            (f, m) in arb_input(), hr in 1.0f64..200.0, lower in 0.0f64..1.0
        ) {
            let high = ExamMeasures { heart_rate: Some(hr), ..m };
            let low = ExamMeasures { heart_rate: Some(hr * lower + 0.01), ..m };
            let before = adjudicate(&f, &high).get(SinusTachycardia).state;
            let after = adjudicate(&f, &low).get(SinusTachycardia).state;
            if before == DecisionState::Rejected {
                prop_assert_eq!(after, DecisionState::Rejected);
            }
        }

        #[test]
        fn raising_rate_only_rejects_bradycardia(
            (f, m) in arb_input(), hr in 1.0f64..200.0, raise in 1.0f64..3.0
        ) {
            let before = adjudicate(&f, &ExamMeasures { heart_rate: Some(hr), ..m }).get(SinusBradycardia).state;
            let after = adjudicate(&f, &ExamMeasures { heart_rate: Some(hr * raise), ..m }).get(SinusBradycardia).state;
            if before == DecisionState::Rejected {
                prop_assert_eq!(after, DecisionState::Rejected);
            }
        }

        #[test]
        fn summary_counts_cover_every_exam(inputs in proptest::collection::vec(arb_input(), 0..30)) {
            let exams: Vec<_> = inputs.iter().enumerate().map(|(i, (f, m))| AdjudicationInput {
                id: i.to_string(), flags: *f, measures: *m,
            }).collect();
            let s = batch_adjudicate(&exams).summary;
            for c in &s.classes {
                prop_assert_eq!(c.by_rule.values().sum::<usize>(), exams.len());
                prop_assert_eq!(c.by_state.values().sum::<usize>(), exams.len());
            }
        }
    }
}
