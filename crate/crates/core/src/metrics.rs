//! Scoring: noise and FGSM impact scores, the weighted vulnerability score,
//! and robustness-curve extraction.
//!
//! Impact scores are relative accuracy degradation,
//! `(baseline - attacked) / baseline * 100`; negative values are kept as-is
//! when an "attack" improves accuracy. The vulnerability score is the convex
//! combination `w1 * noise_impact + w2 * fgsm_impact`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHandle;
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::exec::parallel_map;
use crate::noise::{derive_seed, perturb, NoiseKind, NoiseLevel};
use crate::sweep::SweepConfig;

/// Baseline accuracy plus per-attack accuracies, all percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub baseline: f64,
    pub per_attack: BTreeMap<String, f64>,
}

/// Convex weighting of the two impact scores: `w1 + w2 = 1`, both `>= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub w1: f64,
    pub w2: f64,
}

impl ScoreWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        if !w1.is_finite() || !w2.is_finite() || w1 < 0.0 || w2 < 0.0 {
            return Err(Error::InvalidWeights(format!(
                "weights must be finite and non-negative, got ({w1}, {w2})"
            )));
        }
        if (w1 + w2 - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(format!(
                "w1 + w2 must equal 1, got {w1} + {w2} = {}",
                w1 + w2
            )));
        }
        Ok(ScoreWeights { w1, w2 })
    }

    /// `w2` is implied as `1 - w1`.
    pub fn from_w1(w1: f64) -> Result<Self> {
        if !w1.is_finite() || !(0.0..=1.0).contains(&w1) {
            return Err(Error::InvalidWeights(format!("w1 {w1} outside [0, 1]")));
        }
        Ok(ScoreWeights { w1, w2: 1.0 - w1 })
    }
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights { w1: 0.5, w2: 0.5 }
    }
}

fn impact(acc_baseline: f64, acc_attacked: f64) -> Result<f64> {
    if !acc_baseline.is_finite() || !acc_attacked.is_finite() {
        return Err(Error::Precondition("non-finite accuracy".into()));
    }
    if acc_baseline <= 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((acc_baseline - acc_attacked) / acc_baseline * 100.0)
}

/// `(Acc_baseline - Acc_noise) / Acc_baseline * 100`.
pub fn noise_impact_score(acc_baseline: f64, acc_noise: f64) -> Result<f64> {
    impact(acc_baseline, acc_noise)
}

/// `(Acc_baseline - Acc_fgsm) / Acc_baseline * 100`.
pub fn fgsm_impact_score(acc_baseline: f64, acc_fgsm: f64) -> Result<f64> {
    impact(acc_baseline, acc_fgsm)
}

/// `w1 * noise_impact + w2 * fgsm_impact`.
pub fn vulnerability_score(noise_impact: f64, fgsm_impact: f64, weights: ScoreWeights) -> f64 {
    weights.w1 * noise_impact + weights.w2 * fgsm_impact
}

/// How to collapse per-kind noise impacts into one number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    Mean,
    Worst,
}

/// Mean or maximum of the per-kind impact scores.
pub fn aggregate_noise_impact(
    per_kind: &BTreeMap<NoiseKind, f64>,
    mode: AggregateMode,
) -> Result<f64> {
    if per_kind.is_empty() {
        return Err(Error::EmptyAggregate(
            "no per-kind noise impacts to aggregate".into(),
        ));
    }
    Ok(match mode {
        AggregateMode::Mean => per_kind.values().sum::<f64>() / per_kind.len() as f64,
        AggregateMode::Worst => per_kind
            .values()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Complete score breakdown, serialized as the `score.json` artifact.
///
/// The `vulnerability` map carries one entry per noise kind plus `mean` and
/// `worst` aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub baseline: f64,
    pub noise_accuracy: BTreeMap<String, f64>,
    pub fgsm_accuracy: f64,
    pub noise_impact: BTreeMap<String, f64>,
    pub fgsm_impact: f64,
    pub w1: f64,
    pub w2: f64,
    pub vulnerability: BTreeMap<String, f64>,
}

impl ScoreReport {
    /// Computes every score from raw accuracies.
    pub fn build(
        baseline: f64,
        noise_accuracy: &BTreeMap<NoiseKind, f64>,
        fgsm_accuracy: f64,
        weights: ScoreWeights,
    ) -> Result<Self> {
        if noise_accuracy.is_empty() {
            return Err(Error::EmptyAggregate("no noise accuracies given".into()));
        }
        let fgsm = fgsm_impact_score(baseline, fgsm_accuracy)?;
        let mut noise_impacts = BTreeMap::new();
        let mut vulnerability = BTreeMap::new();
        for (kind, acc) in noise_accuracy {
            let ni = noise_impact_score(baseline, *acc)?;
            vulnerability.insert(kind.name().to_string(), vulnerability_score(ni, fgsm, weights));
            noise_impacts.insert(*kind, ni);
        }
        for (label, mode) in [("mean", AggregateMode::Mean), ("worst", AggregateMode::Worst)] {
            let agg = aggregate_noise_impact(&noise_impacts, mode)?;
            vulnerability.insert(label.to_string(), vulnerability_score(agg, fgsm, weights));
        }
        Ok(ScoreReport {
            baseline,
            noise_accuracy: noise_accuracy
                .iter()
                .map(|(k, v)| (k.name().to_string(), *v))
                .collect(),
            fgsm_accuracy,
            noise_impact: noise_impacts
                .iter()
                .map(|(k, v)| (k.name().to_string(), *v))
                .collect(),
            fgsm_impact: fgsm,
            w1: weights.w1,
            w2: weights.w2,
            vulnerability,
        })
    }

    /// Re-derives each vulnerability entry from the serialized impacts and
    /// checks it against the stored value.
    pub fn check_consistency(&self, tolerance: f64) -> Result<()> {
        let weights = ScoreWeights::new(self.w1, self.w2)?;
        for (name, impact) in &self.noise_impact {
            let expect = vulnerability_score(*impact, self.fgsm_impact, weights);
            let stored = self.vulnerability.get(name).ok_or_else(|| {
                Error::Config(format!("vulnerability entry '{name}' missing"))
            })?;
            if (stored - expect).abs() > tolerance {
                return Err(Error::Config(format!(
                    "vulnerability '{name}' is {stored}, recomputes to {expect}"
                )));
            }
        }
        Ok(())
    }
}

/// Accuracy (percent) over `items` under fresh noise of `kind` at `level`,
/// using the sweep's seed derivation so results line up with sweep records.
pub fn noise_accuracy_at_level(
    handle: &ClassifierHandle,
    items: &[LabeledImage],
    kind: NoiseKind,
    level: NoiseLevel,
    master_seed: u64,
    workers: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Precondition("no items to evaluate".into()));
    }
    let results = parallel_map(items.len(), workers, |i| -> Result<bool> {
        let item = &items[i];
        let image = if level.value() == 0.0 {
            item.image.clone()
        } else {
            let seed = derive_seed(master_seed, &item.id, kind, level);
            perturb(&item.image, kind, level, seed)?
        };
        Ok(handle.predict(&image)?.label == item.label)
    });
    let mut correct = 0usize;
    for r in results {
        correct += r? as usize;
    }
    Ok(correct as f64 / items.len() as f64 * 100.0)
}

/// Accuracy at every grid level `0, step, 2*step, ..., max_level`.
///
/// The level-0 entry is the clean accuracy by construction.
pub fn robustness_curve(
    handle: &ClassifierHandle,
    items: &[LabeledImage],
    kind: NoiseKind,
    config: &SweepConfig,
    workers: usize,
) -> Result<Vec<(f64, f64)>> {
    config.validate()?;
    let mut levels = vec![NoiseLevel::ZERO];
    levels.extend(config.levels());
    let mut curve = Vec::with_capacity(levels.len());
    for level in levels {
        let accuracy =
            noise_accuracy_at_level(handle, items, kind, level, config.master_seed, workers)?;
        curve.push((level.value(), accuracy));
    }
    Ok(curve)
}
