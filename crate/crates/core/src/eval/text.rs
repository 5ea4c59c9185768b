use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMetric {
    ExactMatch,
    #[default]
    NormalizedOverlap,
}

impl TextMetric {
    pub fn from_name(name: &str) -> Result<Self, EvalError> {
        match name {
            "exact_match" => Ok(TextMetric::ExactMatch),
            "normalized_overlap" => Ok(TextMetric::NormalizedOverlap),
            other => Err(EvalError::UnknownMetric(other.into())),
        }
    }
}

/// Scores generated text against a reference in [0, 1].
pub fn evaluate_text(generated: &str, reference: &str, metric: TextMetric) -> f64 {
    match metric {
        TextMetric::ExactMatch => {
            let g: Vec<&str> = generated.split_whitespace().collect();
            let r: Vec<&str> = reference.split_whitespace().collect();
            if g == r {
                1.0
            } else {
                0.0
            }
        }
        TextMetric::NormalizedOverlap => token_f1(generated, reference),
    }
}

/// F1 over token multisets.
fn token_f1(generated: &str, reference: &str) -> f64 {
    let g: Vec<&str> = generated.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if g.is_empty() && r.is_empty() {
        return 1.0;
    }
    if g.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &g {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / g.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}
