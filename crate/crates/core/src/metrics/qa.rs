use serde::{Deserialize, Serialize};

use super::{bleu, MetricsError};

/// Multiple-choice question scored by BLEU-nearest choice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub choices: Vec<String>,
    pub correct_indices: Vec<usize>,
}

impl QaItem {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.choices.is_empty() {
            return Err(MetricsError::InvalidItem("no choices".into()));
        }
        if self.correct_indices.is_empty() {
            return Err(MetricsError::InvalidItem("no correct indices".into()));
        }
        if let Some(i) = self.correct_indices.iter().find(|&&i| i >= self.choices.len()) {
            return Err(MetricsError::InvalidItem(format!(
                "correct index {i} out of range for {} choices",
                self.choices.len()
            )));
        }
        Ok(())
    }

    /// Index of the choice most similar to `response`; ties go to the lowest
    /// index.
    pub fn nearest_choice(&self, response: &str) -> Result<usize, MetricsError> {
        self.validate()?;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, choice) in self.choices.iter().enumerate() {
            let s = bleu(response, &[choice])?;
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok(best.0)
    }
}

pub fn qa_score(item: &QaItem, model_response: &str) -> Result<bool, MetricsError> {
    let chosen = item.nearest_choice(model_response)?;
    Ok(item.correct_indices.contains(&chosen))
}

/// Fraction of correct verdicts.
pub fn qa_accuracy(verdicts: &[bool]) -> Option<f64> {
    if verdicts.is_empty() {
        return None;
    }
    Some(verdicts.iter().filter(|&&v| v).count() as f64 / verdicts.len() as f64)
}
