use std::collections::HashMap;

use super::MetricsError;

pub const MAX_ORDER: usize = 4;

/// Lowercases, splits on whitespace and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            current.push(c);
            continue;
        }
        if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU-4.
///
/// Modified n-gram precisions with clipping against the maximum reference
/// count, uniform weights over orders `1..=min(4, c)` where `c` is the
/// candidate length, and add-one smoothing `1 / (total + 1)` for orders
/// `n >= 2` with no matches. A zero unigram precision gives 0. The brevity
/// penalty `exp(1 - r / c)` applies when `c < r`, with `r` the closest
/// reference length (shorter wins ties).
pub fn bleu(candidate: &str, references: &[&str]) -> Result<f64, MetricsError> {
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return Err(MetricsError::EmptyInput("candidate"));
    }
    if references.is_empty() {
        return Err(MetricsError::EmptyInput("references"));
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    if refs.iter().any(Vec::is_empty) {
        return Err(MetricsError::EmptyInput("reference"));
    }

    let orders = MAX_ORDER.min(cand.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cand_counts = ngram_counts(&cand, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (gram, count) in ngram_counts(r, n) {
                let e = max_ref.entry(gram).or_insert(0);
                *e = (*e).max(count);
            }
        }
        let clipped: usize = cand_counts
            .iter()
            .map(|(gram, &count)| count.min(max_ref.get(gram).copied().unwrap_or(0)))
            .sum();
        let total = cand.len() + 1 - n;
        let precision = if clipped > 0 {
            clipped as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += precision.ln();
    }
    let geo = (log_sum / orders as f64).exp();

    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok((bp * geo).min(1.0))
}
