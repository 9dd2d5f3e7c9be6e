//! The six ECG abnormalities, in the fixed order used by every label vector,
//! weight file and report.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const N_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Abnormality {
    /// First-degree AV block.
    #[serde(rename = "1dAVb")]
    FirstDegreeAvBlock,
    /// Right bundle branch block.
    #[serde(rename = "RBBB")]
    Rbbb,
    /// Left bundle branch block.
    #[serde(rename = "LBBB")]
    Lbbb,
    /// Sinus bradycardia.
    #[serde(rename = "SB")]
    SinusBradycardia,
    /// Atrial fibrillation.
    #[serde(rename = "AF")]
    AtrialFibrillation,
    /// Sinus tachycardia.
    #[serde(rename = "ST")]
    SinusTachycardia,
}

impl Abnormality {
    pub const ALL: [Abnormality; N_CLASSES] = [
        Abnormality::FirstDegreeAvBlock,
        Abnormality::Rbbb,
        Abnormality::Lbbb,
        Abnormality::SinusBradycardia,
        Abnormality::AtrialFibrillation,
        Abnormality::SinusTachycardia,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            Abnormality::FirstDegreeAvBlock => "1dAVb",
            Abnormality::Rbbb => "RBBB",
            Abnormality::Lbbb => "LBBB",
            Abnormality::SinusBradycardia => "SB",
            Abnormality::AtrialFibrillation => "AF",
            Abnormality::SinusTachycardia => "ST",
        }
    }
}

impl fmt::Display for Abnormality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for Abnormality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Abnormality::ALL
            .into_iter()
            .find(|c| c.abbrev().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown abnormality {s:?}")))
    }
}

/// Per-class prevalence of the large routine-care dataset (train + validation).
pub const PREVALENCE_TRAIN: [f64; N_CLASSES] = [0.015, 0.026, 0.015, 0.016, 0.017, 0.023];

/// Per-class prevalence of the cardiologist-annotated test set.
pub const PREVALENCE_TEST: [f64; N_CLASSES] = [0.035, 0.038, 0.035, 0.023, 0.014, 0.044];
