//! Attack application strategies: composite-patch, saliency-masked, and
//! FGSM, plus accuracy evaluation under each.

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHandle;
use crate::composite::{percentile_mask, NoisePatch, SaliencyPattern};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::exec::parallel_map;
use crate::image::ImageTensor;

/// Which attack to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Patch,
    Saliency,
    Fgsm,
}

/// Attack parameters. `epsilon` is the L-infinity budget for FGSM and the
/// scale factor for the patch attack; the saliency attack perturbs only the
/// masked top fraction of pixels, each by `saliency_strength`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub top_fraction: f64,
    pub saliency_strength: f64,
}

impl AttackParams {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Precondition(format!(
                "epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        if !self.top_fraction.is_finite() || self.top_fraction <= 0.0 || self.top_fraction > 1.0 {
            return Err(Error::Precondition(format!(
                "top_fraction {} outside (0, 1]",
                self.top_fraction
            )));
        }
        if !self.saliency_strength.is_finite() || self.saliency_strength < 0.0 {
            return Err(Error::Precondition(format!(
                "saliency_strength {} must be >= 0",
                self.saliency_strength
            )));
        }
        Ok(())
    }
}

/// `sign` with `sign(0) = 0`, so zero gradients leave the image untouched.
#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fast gradient sign method: `clamp01(x + epsilon * sign(grad_x L))`.
pub fn fgsm(handle: &ClassifierHandle, item: &LabeledImage, epsilon: f64) -> Result<ImageTensor> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::Precondition(format!("epsilon {epsilon} must be >= 0")));
    }
    let grad = handle.loss_input_gradient(&item.image, item.label)?;
    let shape = grad.shape();
    let signs = crate::image::PerturbationField::new(
        shape.height,
        shape.width,
        shape.channels,
        grad.data().iter().map(|g| sign(*g)).collect(),
    )?;
    item.image.apply_perturbation(&signs, epsilon)
}

/// Composite-patch attack: `clamp01(image + scale * patch)`, with the patch
/// resized onto the image shape when needed.
pub fn apply_patch_attack(
    item: &LabeledImage,
    patch: &NoisePatch,
    scale: f64,
) -> Result<ImageTensor> {
    if !scale.is_finite() {
        return Err(Error::Precondition(format!("non-finite scale {scale}")));
    }
    let target = item.image.shape();
    if patch.field.shape().channels != target.channels {
        return Err(Error::shape_mismatch(target, patch.field.shape()));
    }
    let resized;
    let field = if patch.field.shape() == target {
        &patch.field
    } else {
        resized = patch.field.resize_bilinear(target.height, target.width)?;
        &resized
    };
    item.image.apply_perturbation(field, scale)
}

/// Saliency-masked attack: inside the top-fraction mask each pixel moves by
/// `saliency_strength` along the channel-wise sign of the patch; pixels
/// outside the mask are untouched.
pub fn apply_saliency_attack(
    item: &LabeledImage,
    saliency: &SaliencyPattern,
    patch: &NoisePatch,
    params: &AttackParams,
) -> Result<ImageTensor> {
    params.validate()?;
    let shape = item.image.shape();
    if saliency.height() != shape.height || saliency.width() != shape.width {
        return Err(Error::shape_mismatch(
            format!("{}x{} saliency", shape.height, shape.width),
            format!("{}x{}", saliency.height(), saliency.width()),
        ));
    }
    if patch.field.shape() != shape {
        return Err(Error::shape_mismatch(shape, patch.field.shape()));
    }
    let mask = percentile_mask(saliency, params.top_fraction)?;
    let strength = params.saliency_strength;
    ImageTensor::from_fn(shape.height, shape.width, shape.channels, |y, x, ch| {
        let v = item.image.get(y, x, ch);
        if mask.contains(y * shape.width + x) {
            v + strength * sign(patch.field.get(y, x, ch))
        } else {
            v
        }
    })
}

/// Artifacts an attack may need; which ones are required depends on the kind.
#[derive(Clone, Copy, Default)]
pub struct AttackArtifacts<'a> {
    pub patch: Option<&'a NoisePatch>,
    pub saliency: Option<&'a SaliencyPattern>,
}

/// Accuracy of the classifier over `items` under one attack, next to the
/// clean baseline over the same items. Accuracies are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEvaluation {
    pub attack: String,
    pub params: AttackParams,
    pub n_items: usize,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
}

/// Applies the attack per item and measures accuracy (percent correct).
pub fn evaluate_attack(
    handle: &ClassifierHandle,
    items: &[LabeledImage],
    params: &AttackParams,
    artifacts: AttackArtifacts<'_>,
    workers: usize,
) -> Result<AttackEvaluation> {
    params.validate()?;
    if items.is_empty() {
        return Err(Error::Precondition("no items to evaluate".into()));
    }
    let attack = match params.kind {
        AttackKind::Fgsm => {
            if !handle.supports_gradient() {
                return Err(Error::MissingCapability(
                    "fgsm requires the gradient capability".into(),
                ));
            }
            "fgsm".to_string()
        }
        AttackKind::Patch => {
            let patch = artifacts
                .patch
                .ok_or_else(|| Error::Config("patch attack requires a noise patch".into()))?;
            format!("patch_{}", patch.kind)
        }
        AttackKind::Saliency => {
            let patch = artifacts
                .patch
                .ok_or_else(|| Error::Config("saliency attack requires a noise patch".into()))?;
            if artifacts.saliency.is_none() {
                return Err(Error::Config(
                    "saliency attack requires a saliency pattern".into(),
                ));
            }
            format!("saliency_{}", patch.kind)
        }
    };

    let results = parallel_map(items.len(), workers, |i| -> Result<(bool, bool)> {
        let item = &items[i];
        let attacked = match params.kind {
            AttackKind::Fgsm => fgsm(handle, item, params.epsilon)?,
            AttackKind::Patch => {
                apply_patch_attack(item, artifacts.patch.expect("checked above"), params.epsilon)?
            }
            AttackKind::Saliency => apply_saliency_attack(
                item,
                artifacts.saliency.expect("checked above"),
                artifacts.patch.expect("checked above"),
                params,
            )?,
        };
        let clean_ok = handle.predict(&item.image)?.label == item.label;
        let attacked_ok = handle.predict(&attacked)?.label == item.label;
        Ok((clean_ok, attacked_ok))
    });

    let mut clean_correct = 0usize;
    let mut attacked_correct = 0usize;
    for r in results {
        let (clean_ok, attacked_ok) = r?;
        clean_correct += clean_ok as usize;
        attacked_correct += attacked_ok as usize;
    }
    let n = items.len() as f64;
    Ok(AttackEvaluation {
        attack,
        params: *params,
        n_items: items.len(),
        accuracy: attacked_correct as f64 / n * 100.0,
        baseline_accuracy: clean_correct as f64 / n * 100.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::MicroMlp;
    use crate::composite::build_saliency;
    use crate::image::{PerturbationField, Shape};
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;

    fn item(label: usize, image: ImageTensor) -> LabeledImage {
        LabeledImage {
            image,
            label,
            class_name: format!("c{label}"),
            id: format!("item-{label}"),
        }
    }

    fn patch_of(field: Vec<f64>, h: usize, w: usize) -> NoisePatch {
        NoisePatch {
            kind: crate::noise::NoiseKind::Gaussian,
            field: PerturbationField::new(h, w, 1, field).unwrap(),
            contributing_count: 1,
            canonical_shape: Shape::new(h, w, 1),
            mean_threshold: 0.2,
        }
    }

    fn random_handle(shape: Shape, classes: usize, seed: u64) -> ClassifierHandle {
        let model = MicroMlp::init(shape.len(), 6, classes, seed).unwrap();
        ClassifierHandle::builtin(
            model,
            (0..classes).map(|i| format!("c{i}")).collect(),
            shape,
        )
        .unwrap()
    }

    #[test]
    fn fgsm_delta_follows_gradient_signs() {
        // sign([0.3, -0.2, 0.0]) * 0.1 = [0.1, -0.1, 0.0]
        let g = [0.3, -0.2, 0.0];
        let deltas: Vec<f64> = g.iter().map(|v| 0.1 * super::sign(*v)).collect();
        assert_eq!(deltas, vec![0.1, -0.1, 0.0]);
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let img = ImageTensor::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as f64 / 8.0).unwrap();
        let handle = random_handle(img.shape(), 3, 4);
        let it = item(1, img.clone());
        let out = fgsm(&handle, &it, 0.0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn fgsm_respects_linf_budget_exactly() {
        for seed in 0..20u64 {
            let img =
                ImageTensor::from_fn(4, 4, 1, |y, x, _| ((y * 4 + x + seed as usize) % 16) as f64 / 15.0)
                    .unwrap();
            let handle = random_handle(img.shape(), 3, seed);
            let it = item((seed % 3) as usize, img.clone());
            let eps = 0.07;
            let out = fgsm(&handle, &it, eps).unwrap();
            let max_diff = out
                .data()
                .iter()
                .zip(img.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff <= eps + 1e-12, "seed {seed}: {max_diff}");
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn fgsm_requires_gradient_capability() {
        // Capability gating is checked before any adapter I/O; exercised
        // end-to-end in the external adapter integration tests.
        let img = ImageTensor::constant(2, 2, 1, 0.5).unwrap();
        let handle = random_handle(img.shape(), 2, 0);
        assert!(handle.supports_gradient());
        let it = item(0, img);
        assert!(fgsm(&handle, &it, -0.1).is_err());
    }

    #[test]
    fn patch_attack_zero_scale_and_zero_patch_are_identity() {
        let img = ImageTensor::from_fn(2, 2, 1, |y, x, _| (y + x) as f64 / 2.0).unwrap();
        let it = item(0, img.clone());
        let patch = patch_of(vec![0.4, -0.4, 0.2, -0.2], 2, 2);
        assert_eq!(apply_patch_attack(&it, &patch, 0.0).unwrap(), img);
        let zero = patch_of(vec![0.0; 4], 2, 2);
        assert_eq!(apply_patch_attack(&it, &zero, 3.0).unwrap(), img);
    }

    #[test]
    fn patch_attack_matches_apply_perturbation() {
        let img = ImageTensor::from_fn(2, 2, 1, |y, x, _| 0.25 * (y * 2 + x) as f64).unwrap();
        let it = item(0, img.clone());
        let patch = patch_of(vec![0.1, -0.3, 0.5, -0.7], 2, 2);
        let via_attack = apply_patch_attack(&it, &patch, 1.0).unwrap();
        let via_imagecore = img.apply_perturbation(&patch.field, 1.0).unwrap();
        assert_eq!(via_attack, via_imagecore);
    }

    #[test]
    fn patch_attack_resizes_to_the_image_shape() {
        let img = ImageTensor::constant(4, 4, 1, 0.5).unwrap();
        let it = item(0, img);
        let patch = patch_of(vec![0.2, 0.2, 0.2, 0.2], 2, 2);
        let out = apply_patch_attack(&it, &patch, 1.0).unwrap();
        assert!(out.data().iter().all(|v| (*v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn saliency_attack_hand_fixture() {
        // 1x4 image; weights pick pixels {1, 2}; patch signs [+, -, +, -];
        // strength 0.2 shifts pixel 1 by -0.2 and pixel 2 by +0.2.
        let img = ImageTensor::new(1, 4, 1, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let it = item(0, img);
        let saliency = SaliencyPattern::new(1, 4, vec![0.1, 0.9, 0.5, 0.2]).unwrap();
        let patch = patch_of(vec![0.3, -0.3, 0.3, -0.3], 1, 4);
        let params = AttackParams {
            kind: AttackKind::Saliency,
            epsilon: 0.0,
            top_fraction: 0.5,
            saliency_strength: 0.2,
        };
        let out = apply_saliency_attack(&it, &saliency, &patch, &params).unwrap();
        assert_eq!(out.data(), &[0.5, 0.3, 0.7, 0.5]);
    }

    #[test]
    fn saliency_attack_zero_strength_is_identity() {
        let img = ImageTensor::constant(2, 2, 1, 0.4).unwrap();
        let it = item(0, img.clone());
        let patch = patch_of(vec![0.5, -0.5, 0.5, -0.5], 2, 2);
        let saliency = build_saliency(&patch);
        let params = AttackParams {
            kind: AttackKind::Saliency,
            epsilon: 0.0,
            top_fraction: 0.5,
            saliency_strength: 0.0,
        };
        assert_eq!(
            apply_saliency_attack(&it, &saliency, &patch, &params).unwrap(),
            img
        );
    }

    #[test]
    fn saliency_attack_full_mask_is_a_sign_patch_attack() {
        let img = ImageTensor::constant(2, 2, 1, 0.5).unwrap();
        let it = item(0, img.clone());
        let patch = patch_of(vec![0.9, -0.1, 0.0, -0.8], 2, 2);
        let params = AttackParams {
            kind: AttackKind::Saliency,
            epsilon: 0.0,
            top_fraction: 1.0,
            saliency_strength: 0.25,
        };
        let saliency = build_saliency(&patch);
        let out = apply_saliency_attack(&it, &saliency, &patch, &params).unwrap();
        // Every pixel moves by strength * sign(field).
        assert_eq!(out.data(), &[0.75, 0.25, 0.5, 0.25]);
    }

    #[test]
    fn saliency_attack_touches_only_masked_pixels() {
        let img = ImageTensor::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as f64 / 10.0).unwrap();
        let it = item(0, img.clone());
        let field: Vec<f64> = (0..9).map(|i| if i % 2 == 0 { 0.4 } else { -0.4 }).collect();
        let patch = patch_of(field, 3, 3);
        let weights: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
        let saliency = SaliencyPattern::new(3, 3, weights).unwrap();
        let params = AttackParams {
            kind: AttackKind::Saliency,
            epsilon: 0.0,
            top_fraction: 0.34,
            saliency_strength: 0.05,
        };
        let mask = percentile_mask(&saliency, params.top_fraction).unwrap();
        let out = apply_saliency_attack(&it, &saliency, &patch, &params).unwrap();
        for p in 0..9 {
            let changed = out.data()[p] != img.data()[p];
            assert_eq!(changed, mask.contains(p), "pixel {p}");
        }
    }

    #[test]
    fn evaluate_noop_attack_equals_baseline() {
        let items: Vec<LabeledImage> = (0..8)
            .map(|i| {
                item(
                    i % 3,
                    ImageTensor::from_fn(3, 3, 1, |y, x, _| ((y * 3 + x + i) % 9) as f64 / 8.0)
                        .unwrap(),
                )
            })
            .collect();
        let handle = random_handle(items[0].image.shape(), 3, 11);
        let zero = patch_of(vec![0.0; 9], 3, 3);
        let params = AttackParams {
            kind: AttackKind::Patch,
            epsilon: 1.0,
            top_fraction: 1.0,
            saliency_strength: 0.0,
        };
        let eval = evaluate_attack(
            &handle,
            &items,
            &params,
            AttackArtifacts {
                patch: Some(&zero),
                saliency: None,
            },
            2,
        )
        .unwrap();
        assert_eq!(eval.accuracy, eval.baseline_accuracy);
        assert_eq!(eval.n_items, 8);
        assert_eq!(eval.attack, "patch_gaussian");
    }

    #[test]
    fn accuracy_is_percent_correct() {
        // 19 of 20 correct -> 95.0: constant classifier, one mislabeled item.
        let img = ImageTensor::constant(2, 2, 1, 0.5).unwrap();
        let model = MicroMlp::from_weights(
            Array2::zeros((2, 4)),
            Array1::zeros(2),
            Array2::zeros((2, 2)),
            Array1::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let handle = ClassifierHandle::builtin(
            model,
            vec!["a".into(), "b".into()],
            img.shape(),
        )
        .unwrap();
        let mut items: Vec<LabeledImage> = (0..19).map(|_| item(0, img.clone())).collect();
        items.push(item(1, img.clone()));
        let zero = patch_of(vec![0.0; 4], 2, 2);
        let params = AttackParams {
            kind: AttackKind::Patch,
            epsilon: 1.0,
            top_fraction: 1.0,
            saliency_strength: 0.0,
        };
        let eval = evaluate_attack(
            &handle,
            &items,
            &params,
            AttackArtifacts {
                patch: Some(&zero),
                saliency: None,
            },
            1,
        )
        .unwrap();
        assert!((eval.accuracy - 95.0).abs() < 1e-12);
    }

    #[test]
    fn missing_artifacts_are_configuration_errors() {
        let img = ImageTensor::constant(2, 2, 1, 0.5).unwrap();
        let handle = random_handle(img.shape(), 2, 1);
        let items = vec![item(0, img)];
        let params = AttackParams {
            kind: AttackKind::Patch,
            epsilon: 1.0,
            top_fraction: 0.5,
            saliency_strength: 0.1,
        };
        assert!(matches!(
            evaluate_attack(&handle, &items, &params, AttackArtifacts::default(), 1),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn fgsm_like_outputs_stay_normalized(
            px in proptest::collection::vec(0.0f64..=1.0, 9),
            eps in 0.0f64..0.5,
            seed in any::<u64>(),
        ) {
            let img = ImageTensor::new(3, 3, 1, px).unwrap();
            let handle = random_handle(img.shape(), 3, seed);
            let it = item(0, img.clone());
            let out = fgsm(&handle, &it, eps).unwrap();
            let max_diff = out
                .data()
                .iter()
                .zip(img.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            prop_assert!(max_diff <= eps + 1e-12);
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
