//! Alignment F1, random baseline, flip rate, accuracy and skewness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model_client::{LabelValue, PredictedLabel};
use crate::rationale_parser::{MaskOrigin, RationaleMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn of(pred: &RationaleMask, gold: &RationaleMask) -> Result<Self> {
        if pred.len() != gold.len() {
            return Err(Error::Contract(format!(
                "mask lengths differ: {} vs {}",
                pred.len(),
                gold.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.bits.iter().zip(&gold.bits) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn score(&self) -> AlignmentScore {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        AlignmentScore {
            precision,
            recall,
            f1,
        }
    }
}

/// Word-level precision, recall and F1 of `pred` against the human mask.
/// A zero denominator yields 0.
pub fn f1_against_human(pred: &RationaleMask, gold: &RationaleMask) -> Result<AlignmentScore> {
    Ok(Confusion::of(pred, gold)?.score())
}

/// Mean and population standard deviation, both already scaled to percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Unweighted mean of per-example F1 values (in [0, 1]), reported ×100.
pub fn macro_f1(f1s: &[f64]) -> Result<MeanStd> {
    if f1s.is_empty() {
        return Err(Error::Contract("macro F1 over zero examples".into()));
    }
    let ms = mean_std(f1s);
    Ok(MeanStd {
        mean: ms.mean * 100.0,
        std: ms.std * 100.0,
    })
}

/// F1 of the pooled confusion counts, ×100.
pub fn micro_f1(confusions: &[Confusion]) -> Result<f64> {
    if confusions.is_empty() {
        return Err(Error::Contract("micro F1 over zero examples".into()));
    }
    let total = confusions.iter().fold(Confusion::default(), |a, c| Confusion {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    Ok(total.score().f1 * 100.0)
}

/// `k` distinct positions out of `len`, uniformly.
pub fn random_mask(len: usize, k: usize, rng: &mut ChaCha8Rng, origin: MaskOrigin) -> RationaleMask {
    let k = k.min(len);
    RationaleMask::from_indices(len, rand::seq::index::sample(rng, len, k), origin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    /// Mean and standard deviation over seeds of the macro F1.
    pub summary: MeanStd,
    pub per_seed: Vec<f64>,
    pub examples: usize,
    pub excluded_degenerate: usize,
}

/// Random Top-Var baseline with seeds `0..seeds`.
pub fn random_baseline(dataset: &Dataset, seeds: usize) -> Result<RandomBaseline> {
    let list: Vec<u64> = (0..seeds as u64).collect();
    random_baseline_with_seeds(dataset, &list)
}

/// For each seed, picks |human rationale| random words per example and
/// computes macro F1 against the human mask. Examples are visited in dataset
/// order from one generator per seed.
pub fn random_baseline_with_seeds(dataset: &Dataset, seeds: &[u64]) -> Result<RandomBaseline> {
    if seeds.is_empty() {
        return Err(Error::Config("random baseline needs at least one seed".into()));
    }
    let usable: Vec<_> = dataset.examples.iter().filter(|e| !e.is_degenerate()).collect();
    let golds: Vec<RationaleMask> = usable.iter().map(|e| RationaleMask::human(e)).collect();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f1s = golds
            .iter()
            .map(|gold| {
                let pred = random_mask(gold.len(), gold.popcount(), &mut rng, MaskOrigin::Random);
                Ok(f1_against_human(&pred, gold)?.f1)
            })
            .collect::<Result<Vec<_>>>()?;
        per_seed.push(macro_f1(&f1s)?.mean);
    }
    Ok(RandomBaseline {
        summary: mean_std(&per_seed),
        per_seed,
        examples: usable.len(),
        excluded_degenerate: dataset.examples.len() - usable.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipOutcome {
    pub example_id: String,
    pub original: PredictedLabel,
    pub masked: PredictedLabel,
    pub flipped: bool,
    pub masked_word_count: usize,
}

impl FlipOutcome {
    pub fn new(
        example_id: impl Into<String>,
        original: PredictedLabel,
        masked: PredictedLabel,
        masked_word_count: usize,
    ) -> Self {
        let flipped = original.value != masked.value;
        FlipOutcome {
            example_id: example_id.into(),
            original,
            masked,
            flipped,
            masked_word_count,
        }
    }
}

/// Percentage of outcomes whose prediction changed. An INVALID masked
/// prediction counts as a flip; INVALID originals must be filtered out first.
pub fn flip_rate(outcomes: &[FlipOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Contract("flip rate over zero outcomes".into()));
    }
    if let Some(o) = outcomes.iter().find(|o| !o.original.value.is_valid()) {
        return Err(Error::Contract(format!(
            "outcome {} has an INVALID original prediction",
            o.example_id
        )));
    }
    let flips = outcomes.iter().filter(|o| o.flipped).count();
    Ok(100.0 * flips as f64 / outcomes.len() as f64)
}

/// Percentage of predictions equal to the gold label; INVALID is wrong.
pub fn accuracy(preds: &[LabelValue], golds: &[String]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("accuracy over zero examples".into()));
    }
    let correct = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| matches!(p, LabelValue::Label(l) if l == *g))
        .count();
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

/// Fisher-Pearson coefficient of skewness `m3 / m2^(3/2)` using biased
/// central moments.
pub fn fisher_pearson_skewness(values: &[f64]) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::Contract(format!(
            "skewness needs at least 3 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (m2, m3) = values.iter().fold((0.0, 0.0), |(a2, a3), v| {
        let d = v - mean;
        (a2 + d * d, a3 + d * d * d)
    });
    let (m2, m3) = (m2 / n, m3 / n);
    if m2 == 0.0 {
        return Err(Error::Contract("skewness undefined for zero variance".into()));
    }
    Ok(m3 / m2.powf(1.5))
}

/// Rounds a percentage the way reports print it.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Example, Task};

    fn mask(len: usize, idx: &[usize]) -> RationaleMask {
        RationaleMask::from_indices(len, idx.iter().copied(), MaskOrigin::Prompting)
    }

    fn label(s: &str) -> PredictedLabel {
        PredictedLabel {
            value: if s == "INVALID" {
                LabelValue::Invalid
            } else {
                LabelValue::Label(s.into())
            },
            raw: s.into(),
        }
    }

    #[test]
    fn identical_masks_score_one() {
        let m = mask(5, &[1, 4]);
        assert_eq!(f1_against_human(&m, &m).unwrap().f1, 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        assert_eq!(
            f1_against_human(&mask(5, &[0]), &mask(5, &[1, 2])).unwrap().f1,
            0.0
        );
    }

    #[test]
    fn half_overlap() {
        let s = f1_against_human(&mask(6, &[1, 2]), &mask(6, &[1, 3])).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_masks_score_zero() {
        let s = f1_against_human(&mask(4, &[]), &mask(4, &[])).unwrap();
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(f1_against_human(&mask(3, &[]), &mask(4, &[])).is_err());
    }

    #[test]
    fn macro_average() {
        assert_eq!(macro_f1(&[1.0, 0.0]).unwrap().mean, 50.0);
        assert!((macro_f1(&[0.3, 0.3, 0.3]).unwrap().mean - 30.0).abs() < 1e-12);
        assert!(macro_f1(&[]).is_err());
    }

    #[test]
    fn micro_pools_counts() {
        let a = Confusion { tp: 1, fp: 1, fn_: 0 };
        let b = Confusion { tp: 1, fp: 0, fn_: 2 };
        // P = 2/3, R = 2/4
        let expect = 2.0 * (2.0 / 3.0) * 0.5 / (2.0 / 3.0 + 0.5) * 100.0;
        assert!((micro_f1(&[a, b]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn full_rationale_random_baseline_is_perfect() {
        let ex = Example::new(
            "e",
            Task::Bios,
            [("bio".into(), "a b c d".into())],
            Task::Bios.default_labels(),
            "nurse",
            0..4,
        )
        .unwrap();
        let ds = Dataset::new("d", vec![ex], 0.13).unwrap();
        let rb = random_baseline(&ds, 10).unwrap();
        assert!(rb.per_seed.iter().all(|&v| v == 100.0));
        assert_eq!(rb.summary.std, 0.0);
    }

    #[test]
    fn flip_rates() {
        let mut outcomes: Vec<FlipOutcome> = (0..10)
            .map(|i| FlipOutcome::new(format!("e{i}"), label("neutral"), label("neutral"), 1))
            .collect();
        for o in outcomes.iter_mut().take(3) {
            *o = FlipOutcome::new(o.example_id.clone(), label("neutral"), label("entailment"), 1);
        }
        assert_eq!(flip_rate(&outcomes).unwrap(), 30.0);

        let all_invalid: Vec<_> = (0..4)
            .map(|i| FlipOutcome::new(format!("e{i}"), label("nurse"), label("INVALID"), 2))
            .collect();
        assert_eq!(flip_rate(&all_invalid).unwrap(), 100.0);
        assert!(flip_rate(&[]).is_err());
        let bad = [FlipOutcome::new("x", label("INVALID"), label("nurse"), 1)];
        assert!(flip_rate(&bad).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let g: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let all: Vec<LabelValue> = g.iter().cloned().map(LabelValue::Label).collect();
        assert_eq!(accuracy(&all, &g).unwrap(), 100.0);
        let none = vec![LabelValue::Invalid; 3];
        assert_eq!(accuracy(&none, &g).unwrap(), 0.0);
        let one = vec![
            LabelValue::Label("a".into()),
            LabelValue::Invalid,
            LabelValue::Label("x".into()),
        ];
        assert_eq!(round2(accuracy(&one, &g).unwrap()), 33.33);
        assert!(accuracy(&one[..2], &g).is_err());
    }

    #[test]
    fn skewness_basics() {
        assert_eq!(fisher_pearson_skewness(&[-1.0, 0.0, 1.0]).unwrap(), 0.0);
        assert!(fisher_pearson_skewness(&[1.0, 1.0, 1.0]).is_err());
        assert!(fisher_pearson_skewness(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn skewness_hand_computed() {
        // mean 4; deviations -3 -2 -1 0 6; m2 = 50/5 = 10; m3 = 180/5 = 36
        let g1 = fisher_pearson_skewness(&[1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        assert!((g1 - 36.0 / 10f64.powf(1.5)).abs() < 1e-12);
    }
}
