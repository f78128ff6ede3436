use serde::{Deserialize, Serialize};

/// A decoded label sequence with its accumulated log-score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub log_score: f64,
    /// Set when decoding hit its length limit without finishing.
    #[serde(default)]
    pub truncated: bool,
}

impl Hypothesis {
    pub fn new(ids: Vec<usize>, log_score: f64) -> Self {
        Hypothesis {
            ids,
            log_score,
            truncated: false,
        }
    }
}
