//! Scoring: modality classification accuracy, BLEU, BLEU-matched multiple
//! choice QA, CLIP aggregation and the eligibility gate.

mod accuracy;
mod bleu;
mod qa;

use thiserror::Error;

pub use accuracy::{modality_accuracy, ModalityConfusion};
pub use bleu::{bleu, tokenize, MAX_ORDER};
pub use qa::{qa_accuracy, qa_score, QaItem};

use crate::model::Modality;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("no items are eligible for accuracy")]
    EmptyEligibleSet,
    #[error("every score is missing")]
    AllMissing,
    #[error("invalid QA item: {0}")]
    InvalidItem(String),
}

/// Only predictions matching the ground-truth modality get quality scores.
pub fn eligibility_gate(ground: Modality, predicted: Modality) -> bool {
    ground == predicted
}

/// Mean over present scores plus the number of missing ones. Sums run in
/// input order.
pub fn aggregate_clip(scores: &[Option<f64>]) -> Result<(f64, usize), MetricsError> {
    let present: Vec<f64> = scores.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(MetricsError::AllMissing);
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((mean, scores.len() - present.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_aggregation() {
        assert_eq!(aggregate_clip(&[Some(20.0), Some(24.0)]).unwrap(), (22.0, 0));
        assert_eq!(aggregate_clip(&[Some(17.5)]).unwrap(), (17.5, 0));
        assert_eq!(aggregate_clip(&[Some(10.0), None, Some(30.0), None]).unwrap(), (20.0, 2));
        assert_eq!(aggregate_clip(&[None, None]), Err(MetricsError::AllMissing));
        assert_eq!(aggregate_clip(&[]), Err(MetricsError::AllMissing));
    }

    #[test]
    fn gate() {
        assert!(eligibility_gate(Modality::Image, Modality::Image));
        assert!(!eligibility_gate(Modality::Image, Modality::Speech));
    }

    #[test]
    fn gated_mean_matches_subset_mean() {
        use Modality::*;
        let items = [
            (Image, Image, 20.0),
            (Image, Text, 99.0),
            (Image, Image, 30.0),
            (Speech, Speech, 0.5),
            (Image, Speech, 50.0),
            (Image, Image, 25.0),
            (Text, Text, 1.0),
            (Image, Image, 21.0),
            (Image, Text, 77.0),
            (Image, Image, 24.0),
        ];
        let gated: Vec<Option<f64>> = items
            .iter()
            .filter(|(g, _, _)| *g == Image)
            .map(|(g, p, s)| eligibility_gate(*g, *p).then_some(*s))
            .collect();
        let (mean, missing) = aggregate_clip(&gated).unwrap();
        // subset oracle: image rows predicted image are 20, 30, 25, 21, 24
        assert_eq!(missing, 3);
        assert!((mean - 24.0).abs() < 1e-12);
    }
}
