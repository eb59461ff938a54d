use serde::{Deserialize, Serialize};

/// One `(features, label)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}
