use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::model::Modality;

/// Ground truth × prediction counts, indexed text, image, speech.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfusion {
    pub counts: [[u64; 3]; 3],
    /// Items with no prediction at all, by ground-truth row.
    pub unpredicted: [u64; 3],
    pub n_correct: u64,
    pub n_total: u64,
}

/// `A = n_correct / n_total` over eligible items. By default items whose
/// ground truth is text are not eligible. A missing prediction counts as
/// wrong.
pub fn modality_accuracy(
    pairs: &[(Modality, Option<Modality>)],
    include_text_ground: bool,
) -> Result<(f64, ModalityConfusion), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput("modality pairs"));
    }
    let mut confusion = ModalityConfusion::default();
    for &(ground, predicted) in pairs {
        match predicted {
            Some(p) => confusion.counts[ground.index()][p.index()] += 1,
            None => confusion.unpredicted[ground.index()] += 1,
        }
        if ground == Modality::Text && !include_text_ground {
            continue;
        }
        confusion.n_total += 1;
        if predicted == Some(ground) {
            confusion.n_correct += 1;
        }
    }
    if confusion.n_total == 0 {
        return Err(MetricsError::EmptyEligibleSet);
    }
    Ok((confusion.n_correct as f64 / confusion.n_total as f64, confusion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Modality::*;

    #[test]
    fn eight_of_ten() {
        let mut pairs = vec![(Image, Some(Image)); 8];
        pairs.push((Speech, Some(Text)));
        pairs.push((Image, Some(Speech)));
        let (a, c) = modality_accuracy(&pairs, false).unwrap();
        assert_eq!(a, 0.8);
        assert_eq!((c.n_correct, c.n_total), (8, 10));
    }

    #[test]
    fn all_correct() {
        let pairs = [(Image, Some(Image)), (Speech, Some(Speech)), (Text, Some(Text))];
        assert_eq!(modality_accuracy(&pairs, false).unwrap().0, 1.0);
        assert_eq!(modality_accuracy(&pairs, true).unwrap().0, 1.0);
    }

    #[test]
    fn text_only_has_no_eligible_items() {
        assert_eq!(
            modality_accuracy(&[(Text, Some(Text))], false),
            Err(MetricsError::EmptyEligibleSet)
        );
        assert!(modality_accuracy(&[], false).is_err());
    }

    #[test]
    fn flag_changes_eligibility() {
        let pairs = [
            (Text, Some(Text)),
            (Text, Some(Image)),
            (Text, Some(Text)),
            (Image, Some(Image)),
            (Image, Some(Text)),
            (Speech, Some(Speech)),
            (Speech, None),
        ];
        // brute-force recount
        let count = |include: bool| {
            let eligible: Vec<_> = pairs.iter().filter(|(g, _)| include || *g != Text).collect();
            let correct = eligible.iter().filter(|(g, p)| Some(*g) == *p).count();
            correct as f64 / eligible.len() as f64
        };
        assert_eq!(modality_accuracy(&pairs, false).unwrap().0, count(false));
        assert_eq!(modality_accuracy(&pairs, true).unwrap().0, count(true));
        assert_eq!(count(false), 0.5);
        assert_eq!(count(true), 4.0 / 7.0);
    }

    fn m() -> impl Strategy<Value = Modality> {
        prop_oneof![Just(Text), Just(Image), Just(Speech)]
    }

    proptest! {
        #[test]
        fn diagonal_sums_to_correct(pairs in proptest::collection::vec((m(), proptest::option::of(m())), 1..40)) {
            if let Ok((_, c)) = modality_accuracy(&pairs, false) {
                let diag: u64 = (1..3).map(|i| c.counts[i][i]).sum();
                prop_assert_eq!(diag, c.n_correct);
                prop_assert!(c.n_correct <= c.n_total);
            }
        }

        #[test]
        fn invariant_under_relabeling_text_rows(
            pairs in proptest::collection::vec((m(), proptest::option::of(m())), 1..40),
            relabel in proptest::collection::vec(proptest::option::of(m()), 40),
        ) {
            let relabeled: Vec<_> = pairs
                .iter()
                .zip(&relabel)
                .map(|(&(g, p), &r)| if g == Text { (g, r) } else { (g, p) })
                .collect();
            prop_assert_eq!(
                modality_accuracy(&pairs, false).map(|x| x.0),
                modality_accuracy(&relabeled, false).map(|x| x.0)
            );
        }
    }
}
