use serde::{Deserialize, Serialize};

use crate::error::FieldError;

pub const LYMPH_NODE_REGIONS: usize = 14;
pub const DLT_KINDS: usize = 5;
pub const RESPONSE_LEVELS: usize = 4;

pub const T_STAGE_RANGE: (u8, u8) = (1, 4);
pub const N_STAGE_RANGE: (u8, u8) = (0, 3);
pub const AJCC_RANGE: (u8, u8) = (1, 4);
pub const GRADE_RANGE: (u8, u8) = (1, 4);
pub const SMOKING_RANGE: (u8, u8) = (0, 2);

pub const DLT_NAMES: [&str; DLT_KINDS] = [
    "hematological",
    "neurological",
    "dermatological",
    "gastrointestinal",
    "other",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Race {
    White,
    Black,
    Hispanic,
    Other,
}

impl Race {
    pub const ALL: [Race; 4] = [Race::White, Race::Black, Race::Hispanic, Race::Other];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hpv {
    Negative,
    Positive,
    Unknown,
}

impl Hpv {
    pub const ALL: [Hpv; 3] = [Hpv::Negative, Hpv::Positive, Hpv::Unknown];

    pub fn code(self) -> u8 {
        match self {
            Hpv::Negative => 0,
            Hpv::Positive => 1,
            Hpv::Unknown => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsite {
    BaseOfTongue,
    Tonsil,
    GlossopharyngealSulcus,
    SoftPalate,
    PharyngealWall,
    NotOtherwiseSpecified,
}

impl Subsite {
    pub const ALL: [Subsite; 6] = [
        Subsite::BaseOfTongue,
        Subsite::Tonsil,
        Subsite::GlossopharyngealSulcus,
        Subsite::SoftPalate,
        Subsite::PharyngealWall,
        Subsite::NotOtherwiseSpecified,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Subsite::BaseOfTongue => "BOT",
            Subsite::Tonsil => "tonsil",
            Subsite::GlossopharyngealSulcus => "GPS",
            Subsite::SoftPalate => "soft_palate",
            Subsite::PharyngealWall => "pharyngeal_wall",
            Subsite::NotOtherwiseSpecified => "NOS",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.code().eq_ignore_ascii_case(s))
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).unwrap()
    }
}

/// Baseline covariates for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientFeatures {
    pub age: f64,
    pub is_male: bool,
    pub race: Race,
    pub hpv: Hpv,
    /// 0 never, 1 former, 2 current.
    pub smoking_status: u8,
    pub pack_years: f64,
    pub lymph_node_regions: [bool; LYMPH_NODE_REGIONS],
    pub t_stage: u8,
    pub n_stage: u8,
    pub ajcc_stage: u8,
    pub pathological_grade: u8,
    pub subsite: Subsite,
    pub bilateral: bool,
    /// Gy.
    pub total_dose: f64,
    /// Gy per visit.
    pub dose_fraction: f64,
    pub aspiration_pre: bool,
}

fn check_range(errors: &mut Vec<FieldError>, column: &str, v: u8, (lo, hi): (u8, u8)) {
    if v < lo || v > hi {
        errors.push(FieldError {
            row: None,
            column: column.to_string(),
            message: format!("{v} outside [{lo}, {hi}]"),
        });
    }
}

fn check_finite(errors: &mut Vec<FieldError>, column: &str, v: f64) {
    if !v.is_finite() {
        errors.push(FieldError {
            row: None,
            column: column.to_string(),
            message: "not a finite number".into(),
        });
    }
}

impl PatientFeatures {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        check_finite(&mut errors, "age", self.age);
        if self.age.is_finite() && !(0.0..=120.0).contains(&self.age) {
            errors.push(FieldError {
                row: None,
                column: "age".into(),
                message: format!("{} outside [0, 120]", self.age),
            });
        }
        check_range(&mut errors, "smoking", self.smoking_status, SMOKING_RANGE);
        check_finite(&mut errors, "pack_years", self.pack_years);
        if self.pack_years < 0.0 {
            errors.push(FieldError {
                row: None,
                column: "pack_years".into(),
                message: format!("{} is negative", self.pack_years),
            });
        }
        check_range(&mut errors, "t_stage", self.t_stage, T_STAGE_RANGE);
        check_range(&mut errors, "n_stage", self.n_stage, N_STAGE_RANGE);
        check_range(&mut errors, "ajcc", self.ajcc_stage, AJCC_RANGE);
        check_range(&mut errors, "grade", self.pathological_grade, GRADE_RANGE);
        check_finite(&mut errors, "total_dose", self.total_dose);
        if !(self.total_dose > 0.0) {
            errors.push(FieldError {
                row: None,
                column: "total_dose".into(),
                message: format!("{} must be positive", self.total_dose),
            });
        }
        check_finite(&mut errors, "dose_fraction", self.dose_fraction);
        if !(self.dose_fraction > 0.0) {
            errors.push(FieldError {
                row: None,
                column: "dose_fraction".into(),
                message: format!("{} must be positive", self.dose_fraction),
            });
        }
        errors
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Induction chemotherapy.
    Ic,
    /// Concurrent chemotherapy with radiation.
    Cc,
    /// Neck dissection.
    Nd,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Ic, Stage::Cc, Stage::Nd];

    pub fn index(self) -> usize {
        match self {
            Stage::Ic => 0,
            Stage::Cc => 1,
            Stage::Nd => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::Ic => "IC",
            Stage::Cc => "CC",
            Stage::Nd => "ND",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ic" => Some(Stage::Ic),
            "cc" => Some(Stage::Cc),
            "nd" => Some(Stage::Nd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    UserFixed,
    PolicyDecided,
    #[default]
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreatmentSequence {
    pub ic: bool,
    pub cc: bool,
    pub nd: bool,
    #[serde(default)]
    pub provenance: [Provenance; 3],
}

impl TreatmentSequence {
    pub fn new(ic: bool, cc: bool, nd: bool) -> Self {
        TreatmentSequence {
            ic,
            cc,
            nd,
            provenance: [Provenance::GroundTruth; 3],
        }
    }

    /// All eight sequences, ordered (no < yes) with IC most significant.
    pub fn all() -> [TreatmentSequence; 8] {
        std::array::from_fn(|i| TreatmentSequence::new(i & 4 != 0, i & 2 != 0, i & 1 != 0))
    }

    pub fn decision(&self, stage: Stage) -> bool {
        match stage {
            Stage::Ic => self.ic,
            Stage::Cc => self.cc,
            Stage::Nd => self.nd,
        }
    }

    pub fn set(&mut self, stage: Stage, value: bool, provenance: Provenance) {
        match stage {
            Stage::Ic => self.ic = value,
            Stage::Cc => self.cc = value,
            Stage::Nd => self.nd = value,
        }
        self.provenance[stage.index()] = provenance;
    }

    /// Index 0..8 with IC as the most significant bit.
    pub fn code(&self) -> usize {
        (self.ic as usize) << 2 | (self.cc as usize) << 1 | self.nd as usize
    }

    pub fn treatment_count(&self) -> usize {
        self.ic as usize + self.cc as usize + self.nd as usize
    }

    pub fn same_decisions(&self, other: &TreatmentSequence) -> bool {
        self.code() == other.code()
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.ic, "IC"), (self.cc, "CC"), (self.nd, "ND")]
            .iter()
            .filter(|(d, _)| *d)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "None".into()
        } else {
            parts.join(" + ")
        }
    }
}

/// Ordinal response level: 0 progressive, 1 stable, 2 partial, 3 complete.
pub const RESPONSE_STABLE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionState {
    pub primary_response: u8,
    pub nodal_response: u8,
    pub dlt: [bool; DLT_KINDS],
}

impl TransitionState {
    pub fn stable() -> Self {
        TransitionState {
            primary_response: RESPONSE_STABLE,
            nodal_response: RESPONSE_STABLE,
            dlt: [false; DLT_KINDS],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// Overall survival.
    Os,
    /// Locoregional control.
    Lrc,
    /// Freedom from distant metastasis.
    Fdm,
}

impl Endpoint {
    pub const ALL: [Endpoint; 3] = [Endpoint::Os, Endpoint::Lrc, Endpoint::Fdm];

    pub fn index(self) -> usize {
        match self {
            Endpoint::Os => 0,
            Endpoint::Lrc => 1,
            Endpoint::Fdm => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Endpoint::Os => "OS",
            Endpoint::Lrc => "LRC",
            Endpoint::Fdm => "FDM",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventTime {
    pub event: bool,
    /// Months to event or last follow-up.
    pub months: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    /// Indexed by [`Endpoint::index`].
    pub endpoints: [EventTime; 3],
    /// Feeding tube within six months.
    pub ft: bool,
    pub aspiration_post: bool,
}

impl OutcomeRecord {
    pub fn endpoint(&self, e: Endpoint) -> EventTime {
        self.endpoints[e.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub features: PatientFeatures,
    pub sequence: TreatmentSequence,
    pub after_ic: TransitionState,
    pub after_cc: TransitionState,
    pub outcome: OutcomeRecord,
}

impl CohortRecord {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = self.features.validate();
        for (prefix, t) in [("ic", &self.after_ic), ("cc", &self.after_cc)] {
            for (col, v) in [("pr", t.primary_response), ("nr", t.nodal_response)] {
                if v > 3 {
                    errors.push(FieldError {
                        row: None,
                        column: format!("{col}_{prefix}"),
                        message: format!("{v} outside [0, 3]"),
                    });
                }
            }
        }
        if !self.sequence.ic
            && (self.after_ic.primary_response != RESPONSE_STABLE
                || self.after_ic.nodal_response != RESPONSE_STABLE)
        {
            errors.push(FieldError {
                row: None,
                column: "pr_ic".into(),
                message: "response after IC must be stable when IC was not given".into(),
            });
        }
        for e in Endpoint::ALL {
            let t = self.outcome.endpoint(e);
            if !(t.months > 0.0) || !t.months.is_finite() {
                errors.push(FieldError {
                    row: None,
                    column: format!("{}_months", e.label().to_lowercase()),
                    message: format!("{} must be a positive number of months", t.months),
                });
            }
        }
        errors
    }

    /// Value of a named binary endpoint, for stratification and evaluation.
    pub fn binary(&self, which: BinaryEndpoint) -> bool {
        match which {
            BinaryEndpoint::Decision(s) => self.sequence.decision(s),
            BinaryEndpoint::Event(e) => self.outcome.endpoint(e).event,
            BinaryEndpoint::FeedingTube => self.outcome.ft,
            BinaryEndpoint::AspirationPost => self.outcome.aspiration_post,
            BinaryEndpoint::DltAfterIc(k) => self.after_ic.dlt[k],
            BinaryEndpoint::DltAfterCc(k) => self.after_cc.dlt[k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryEndpoint {
    Decision(Stage),
    Event(Endpoint),
    FeedingTube,
    AspirationPost,
    DltAfterIc(usize),
    DltAfterCc(usize),
}

impl BinaryEndpoint {
    pub fn all() -> Vec<BinaryEndpoint> {
        let mut v: Vec<BinaryEndpoint> = Stage::ALL.iter().map(|&s| Self::Decision(s)).collect();
        v.extend(Endpoint::ALL.iter().map(|&e| Self::Event(e)));
        v.push(Self::FeedingTube);
        v.push(Self::AspirationPost);
        v.extend((0..DLT_KINDS).map(Self::DltAfterIc));
        v.extend((0..DLT_KINDS).map(Self::DltAfterCc));
        v
    }

    pub fn name(&self) -> String {
        match self {
            Self::Decision(s) => format!("decision_{}", s.label()),
            Self::Event(e) => format!("{}_event", e.label()),
            Self::FeedingTube => "ft".into(),
            Self::AspirationPost => "asp_post".into(),
            Self::DltAfterIc(k) => format!("dlt_after_ic_{}", DLT_NAMES[*k]),
            Self::DltAfterCc(k) => format!("dlt_after_cc_{}", DLT_NAMES[*k]),
        }
    }
}
