//! Composite noise patches and the saliency pattern derived from them.
//!
//! A patch is the elementwise mean, at a canonical shape, of the effective
//! noise fields captured at each image's misclassification threshold.
//! Salt-and-pepper replacement noise enters as its effective delta, so all
//! three kinds share the additive representation. The saliency pattern is
//! the channel-reduced magnitude of the patch, normalized to a unit peak.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{PerturbationField, Shape};
use crate::noise::NoiseKind;
use crate::sweep::SweepRecord;

/// Average threshold-level perturbation for one noise kind.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePatch {
    pub kind: NoiseKind,
    pub field: PerturbationField,
    pub contributing_count: usize,
    pub canonical_shape: Shape,
    /// Mean of the contributing scalar thresholds (report metadata).
    pub mean_threshold: f64,
}

/// Per-pixel importance in `[0, 1]`, channel-reduced; the peak weight is
/// exactly 1 unless the source patch is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyPattern {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl SaliencyPattern {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(Error::shape_mismatch(height * width, weights.len()));
        }
        if weights
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0 || *w > 1.0)
        {
            return Err(Error::Precondition("saliency weight outside [0, 1]".into()));
        }
        Ok(SaliencyPattern {
            height,
            width,
            weights,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights as a single-channel perturbation field (for NIT1 persistence).
    pub fn to_field(&self) -> PerturbationField {
        PerturbationField::new(self.height, self.width, 1, self.weights.clone())
            .expect("weights are finite")
    }

    pub fn from_field(field: &PerturbationField) -> Result<Self> {
        let shape = field.shape();
        if shape.channels != 1 {
            return Err(Error::Dimension(format!(
                "saliency field must be single-channel, got {shape}"
            )));
        }
        SaliencyPattern::new(shape.height, shape.width, field.data().to_vec())
    }
}

/// Pixel subset selected by a saliency cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major pixel membership.
    pub fn contains(&self, pixel: usize) -> bool {
        self.bits[pixel]
    }

    pub fn selected_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Averages the threshold noise fields of `kind` onto `canonical_shape`.
///
/// Records without a threshold (censored or clean-incorrect) are excluded.
/// Contributions sum in sorted `image_id` order, so the mean is bit-exact
/// under input permutation.
pub fn build_patch(
    records: &[SweepRecord],
    kind: NoiseKind,
    canonical_shape: Shape,
) -> Result<NoisePatch> {
    let mut contributing: Vec<&SweepRecord> = records
        .iter()
        .filter(|r| r.kind == kind && r.contributes())
        .collect();
    if contributing.is_empty() {
        return Err(Error::EmptyAggregate(format!(
            "no contributing {kind} records to average"
        )));
    }
    contributing.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut sum = vec![0.0f64; canonical_shape.len()];
    let mut threshold_sum = 0.0;
    for record in &contributing {
        let field = record
            .noise_field_at_threshold
            .as_ref()
            .expect("contributing record has a field");
        if field.shape().channels != canonical_shape.channels {
            return Err(Error::shape_mismatch(canonical_shape, field.shape()));
        }
        let resized;
        let data = if field.shape().height == canonical_shape.height
            && field.shape().width == canonical_shape.width
        {
            field.data()
        } else {
            resized = field.resize_bilinear(canonical_shape.height, canonical_shape.width)?;
            resized.data()
        };
        for (acc, v) in sum.iter_mut().zip(data) {
            *acc += v;
        }
        threshold_sum += record.threshold.expect("contributing record").value();
    }
    let count = contributing.len();
    let inv = 1.0 / count as f64;
    let mean: Vec<f64> = sum.into_iter().map(|v| v * inv).collect();
    Ok(NoisePatch {
        kind,
        field: PerturbationField::new(
            canonical_shape.height,
            canonical_shape.width,
            canonical_shape.channels,
            mean,
        )?,
        contributing_count: count,
        canonical_shape,
        mean_threshold: threshold_sum * inv,
    })
}

/// Channel-mean magnitude of the patch, normalized so the peak weight is 1
/// (all zeros for an identically zero patch).
pub fn build_saliency(patch: &NoisePatch) -> SaliencyPattern {
    let shape = patch.field.shape();
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut weights = vec![0.0f64; h * w];
    for (pixel, weight) in weights.iter_mut().enumerate() {
        let base = pixel * c;
        let sum: f64 = patch.field.data()[base..base + c]
            .iter()
            .map(|v| v.abs())
            .sum();
        *weight = sum / c as f64;
    }
    let max = weights.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for w in &mut weights {
            *w /= max;
        }
    }
    SaliencyPattern {
        height: h,
        width: w,
        weights,
    }
}

/// Selects the `ceil(top_fraction * pixel_count)` highest-weight pixels;
/// ties at the cutoff go to the lower row-major index.
pub fn percentile_mask(saliency: &SaliencyPattern, top_fraction: f64) -> Result<PixelMask> {
    if !top_fraction.is_finite() || top_fraction <= 0.0 || top_fraction > 1.0 {
        return Err(Error::Precondition(format!(
            "top_fraction {top_fraction} outside (0, 1]"
        )));
    }
    let n = saliency.weights.len();
    let k = ((top_fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        saliency.weights[b]
            .partial_cmp(&saliency.weights[a])
            .expect("weights are finite")
            .then(a.cmp(&b))
    });
    let mut bits = vec![false; n];
    for &pixel in &order[..k] {
        bits[pixel] = true;
    }
    Ok(PixelMask {
        height: saliency.height,
        width: saliency.width,
        bits,
    })
}

/// Sidecar metadata persisted next to each patch.
#[derive(Debug, Serialize, Deserialize)]
pub struct PatchSidecar {
    pub kind: NoiseKind,
    pub contributing_count: usize,
    /// `[height, width, channels]`
    pub canonical_shape: [usize; 3],
    pub mean_threshold: f64,
}

/// Writes `<kind>.nit`, `<kind>_saliency.nit`, and `<kind>.json` into `dir`.
pub fn save_patch(patch: &NoisePatch, saliency: &SaliencyPattern, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let kind = patch.kind.name();
    fs::write(dir.join(format!("{kind}.nit")), patch.field.to_nit1_bytes())?;
    fs::write(
        dir.join(format!("{kind}_saliency.nit")),
        saliency.to_field().to_nit1_bytes(),
    )?;
    let sidecar = PatchSidecar {
        kind: patch.kind,
        contributing_count: patch.contributing_count,
        canonical_shape: [
            patch.canonical_shape.height,
            patch.canonical_shape.width,
            patch.canonical_shape.channels,
        ],
        mean_threshold: patch.mean_threshold,
    };
    fs::write(
        dir.join(format!("{kind}.json")),
        serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

/// Loads a patch and saliency pair previously written by [`save_patch`].
pub fn load_patch(dir: &Path, kind: NoiseKind) -> Result<(NoisePatch, SaliencyPattern)> {
    let name = kind.name();
    let sidecar: PatchSidecar =
        serde_json::from_slice(&fs::read(dir.join(format!("{name}.json")))?)
            .map_err(|e| Error::format("patch sidecar", e.to_string()))?;
    if sidecar.kind != kind {
        return Err(Error::format(
            "patch sidecar",
            format!("kind mismatch: file says {}, expected {kind}", sidecar.kind),
        ));
    }
    let field = PerturbationField::from_nit1_bytes(&fs::read(dir.join(format!("{name}.nit")))?)?;
    let saliency_field =
        PerturbationField::from_nit1_bytes(&fs::read(dir.join(format!("{name}_saliency.nit")))?)?;
    let [h, w, c] = sidecar.canonical_shape;
    let canonical_shape = Shape::new(h, w, c);
    if field.shape() != canonical_shape {
        return Err(Error::shape_mismatch(canonical_shape, field.shape()));
    }
    // f32 persistence can nudge unit weights past 1; clamp on ingest.
    let weights = saliency_field
        .data()
        .iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let saliency = SaliencyPattern::new(
        saliency_field.shape().height,
        saliency_field.shape().width,
        weights,
    )?;
    Ok((
        NoisePatch {
            kind,
            field,
            contributing_count: sidecar.contributing_count,
            canonical_shape,
            mean_threshold: sidecar.mean_threshold,
        },
        saliency,
    ))
}
