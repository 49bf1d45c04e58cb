use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatagenError;
use crate::model::{InstructionRecord, Modality};

/// Per-route quantities in text, image, speech order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RouteCounts {
    pub text: usize,
    pub image: usize,
    pub speech: usize,
}

impl RouteCounts {
    pub fn from_array(a: [usize; 3]) -> Self {
        Self {
            text: a[0],
            image: a[1],
            speech: a[2],
        }
    }

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Image => self.image,
            Modality::Speech => self.speech,
        }
    }

    pub fn total(&self) -> usize {
        self.text + self.image + self.speech
    }

    pub fn of(records: &[InstructionRecord]) -> Self {
        let mut c = [0; 3];
        for r in records {
            c[r.output.modality().index()] += 1;
        }
        Self::from_array(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixRatios {
    pub text: f64,
    pub image: f64,
    pub speech: f64,
}

impl Default for MixRatios {
    fn default() -> Self {
        Self::thirds()
    }
}

impl MixRatios {
    pub fn thirds() -> Self {
        Self {
            text: 1.0 / 3.0,
            image: 1.0 / 3.0,
            speech: 1.0 / 3.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.text, self.image, self.speech]
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let a = self.as_array();
        if a.iter().any(|r| !r.is_finite() || *r < 0.0) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatagenError::InvalidRatios(a));
        }
        Ok(())
    }
}

impl std::str::FromStr for MixRatios {
    type Err = DatagenError;

    /// `a,b,c` in text, image, speech order.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatagenError::InvalidConfig(format!("ratios {s:?}: {e}")))?;
        let [text, image, speech] = parts[..] else {
            return Err(DatagenError::InvalidConfig(format!("ratios {s:?}: expected three values")));
        };
        let r = Self { text, image, speech };
        r.validate()?;
        Ok(r)
    }
}

/// Largest-remainder apportionment of `total` over `ratios`. Ties on the
/// remainder go to the earlier route.
pub fn apportion(total: usize, ratios: &MixRatios) -> Result<RouteCounts, DatagenError> {
    ratios.validate()?;
    let quotas = ratios.as_array().map(|r| r * total as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(RouteCounts::from_array(counts))
}

/// Subsamples each route to its apportioned count, then shuffles the union.
pub fn mix_dataset(
    text: &[InstructionRecord],
    image: &[InstructionRecord],
    speech: &[InstructionRecord],
    target_total: usize,
    ratios: &MixRatios,
    rng_seed: u64,
) -> Result<(Vec<InstructionRecord>, RouteCounts), DatagenError> {
    let counts = apportion(target_total, ratios)?;
    let sources = [text, image, speech];
    for (m, src) in Modality::ALL.iter().zip(sources) {
        if let Some(bad) = src.iter().find(|r| r.output.modality() != *m) {
            return Err(DatagenError::WrongRoute {
                expected: *m,
                instruction: bad.instruction.clone(),
            });
        }
        if src.len() < counts.get(*m) {
            return Err(DatagenError::InsufficientSource {
                route: *m,
                needed: counts.get(*m),
                available: src.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(target_total);
    for (m, src) in Modality::ALL.iter().zip(sources) {
        let mut idx = sample_indices(&mut rng, src.len(), counts.get(*m)).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| src[i].clone()));
    }
    out.shuffle(&mut rng);
    Ok((out, counts))
}

/// Holds out `round(n_m * val_fraction)` records of each modality. Both
/// halves keep input order.
pub fn split_dataset(
    records: &[InstructionRecord],
    val_fraction: f64,
    rng_seed: u64,
) -> Result<(Vec<InstructionRecord>, Vec<InstructionRecord>), DatagenError> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DatagenError::InvalidConfig(format!(
            "val_fraction {val_fraction} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut is_val = vec![false; records.len()];
    for m in Modality::ALL {
        let positions: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].output.modality() == m)
            .collect();
        let k = (positions.len() as f64 * val_fraction).round() as usize;
        for j in sample_indices(&mut rng, positions.len(), k) {
            is_val[positions[j]] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = records.iter().cloned().zip(is_val).partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(r, _)| r).collect(),
        val.into_iter().map(|(r, _)| r).collect(),
    ))
}
