//! Parameterized noise models and the seeding scheme used by sweeps.
//!
//! Level semantics are dimensionless on a `[0, 1]` scale:
//! - gaussian: standard deviation in normalized pixel units,
//! - uniform: half-width amplitude,
//! - salt & pepper: per-pixel corruption probability.
//!
//! Each level is a fresh, independent draw seeded from
//! `(master_seed, image_id, kind, level)`, so any single level of a sweep
//! can be reproduced in isolation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, PerturbationField, Shape};
use crate::rng::{self, SplitMix64};

/// The three supported noise families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    SaltPepper,
    Uniform,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Gaussian, NoiseKind::SaltPepper, NoiseKind::Uniform];

    /// Stable identifier used in file names, CSV cells, and seed derivation.
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::SaltPepper => "salt_pepper",
            NoiseKind::Uniform => "uniform",
        }
    }

    /// Human-readable label for report tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "Gaussian Noise",
            NoiseKind::SaltPepper => "Salt and Pepper",
            NoiseKind::Uniform => "Uniform Noise",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            NoiseKind::Gaussian => 0,
            NoiseKind::SaltPepper => 1,
            NoiseKind::Uniform => 2,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "salt_pepper" => Ok(NoiseKind::SaltPepper),
            "uniform" => Ok(NoiseKind::Uniform),
            other => Err(Error::Config(format!(
                "unknown noise kind '{other}' (expected gaussian, salt_pepper, or uniform)"
            ))),
        }
    }
}

/// Dimensionless noise intensity in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub const ZERO: NoiseLevel = NoiseLevel(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::Precondition(format!(
                "noise level {value} outside [0, 1]"
            )));
        }
        Ok(NoiseLevel(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    /// Level quantized to 1e-6 units; the grid the seeding scheme keys on,
    /// so a level reached as `i * step` and the same level typed on a
    /// command line derive identical seeds.
    pub fn micro_units(&self) -> u64 {
        (self.0 * 1e6).round() as u64
    }
}

impl fmt::Display for NoiseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Derives the 64-bit seed for one `(image, kind, level)` draw.
///
/// SplitMix64 absorption over the concatenated encoding of all four
/// arguments; stable across platforms and runs.
pub fn derive_seed(master_seed: u64, image_id: &str, kind: NoiseKind, level: NoiseLevel) -> u64 {
    let mut acc = rng::absorb(0x4e4f_4953_4500_0001, master_seed);
    acc = rng::absorb_bytes(acc, image_id.as_bytes());
    acc = rng::absorb(acc, kind.tag());
    rng::absorb(acc, level.micro_units())
}

/// One concrete noise draw, ready to apply to an image.
///
/// Gaussian and uniform noise are additive fields. Salt & pepper is a
/// replacement: masked pixels are forced to a {0, 1} target across all
/// channels, which clamped addition cannot express.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseRealization {
    Additive(PerturbationField),
    Replacement(ReplacementNoise),
}

/// Per-pixel replacement plan for salt & pepper noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplacementNoise {
    shape: Shape,
    /// One flag per pixel (`h * w`); true means the pixel is replaced.
    mask: Vec<bool>,
    /// Replacement target per pixel; only meaningful where masked.
    targets: Vec<f64>,
}

impl ReplacementNoise {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

impl NoiseRealization {
    pub fn shape(&self) -> Shape {
        match self {
            NoiseRealization::Additive(f) => f.shape(),
            NoiseRealization::Replacement(r) => r.shape,
        }
    }

    /// Applies the draw: `clamp01(image + field)` for additive noise,
    /// masked-pixel replacement for salt & pepper.
    pub fn apply(&self, image: &ImageTensor) -> Result<ImageTensor> {
        if image.shape() != self.shape() {
            return Err(Error::shape_mismatch(self.shape(), image.shape()));
        }
        match self {
            NoiseRealization::Additive(field) => image.apply_perturbation(field, 1.0),
            NoiseRealization::Replacement(rep) => {
                let (h, w, c) = (image.height(), image.width(), image.channels());
                ImageTensor::from_fn(h, w, c, |y, x, ch| {
                    let p = y * w + x;
                    if rep.mask[p] {
                        rep.targets[p]
                    } else {
                        image.get(y, x, ch)
                    }
                })
            }
        }
    }
}

/// Draws one noise realization of the given kind, level, and shape.
pub fn sample_noise(
    kind: NoiseKind,
    level: NoiseLevel,
    shape: Shape,
    seed: u64,
) -> Result<NoiseRealization> {
    if shape.is_empty() {
        return Err(Error::Dimension(format!("empty noise shape {shape}")));
    }
    let mut rng = SplitMix64::new(seed);
    let p = level.value();
    match kind {
        NoiseKind::Gaussian => {
            let mut gauss = BoxMuller::new();
            let data: Vec<f64> = (0..shape.len()).map(|_| p * gauss.next(&mut rng)).collect();
            Ok(NoiseRealization::Additive(PerturbationField::new(
                shape.height,
                shape.width,
                shape.channels,
                data,
            )?))
        }
        NoiseKind::Uniform => {
            let data: Vec<f64> = (0..shape.len())
                .map(|_| p * (2.0 * rng.next_f64() - 1.0))
                .collect();
            Ok(NoiseRealization::Additive(PerturbationField::new(
                shape.height,
                shape.width,
                shape.channels,
                data,
            )?))
        }
        NoiseKind::SaltPepper => {
            let pixels = shape.pixel_count();
            let mut mask = vec![false; pixels];
            let mut targets = vec![0.0; pixels];
            for i in 0..pixels {
                if rng.next_f64() < p {
                    mask[i] = true;
                    targets[i] = if rng.next_f64() < 0.5 { 0.0 } else { 1.0 };
                }
            }
            Ok(NoiseRealization::Replacement(ReplacementNoise {
                shape,
                mask,
                targets,
            }))
        }
    }
}

/// Perturbs an image with a fresh draw of the given kind and level.
pub fn perturb(image: &ImageTensor, kind: NoiseKind, level: NoiseLevel, seed: u64) -> Result<ImageTensor> {
    sample_noise(kind, level, image.shape(), seed)?.apply(image)
}

/// Box-Muller transform over the SplitMix64 stream. Pinned by name so the
/// byte-level output is reproducible; the second variate of each pair is
/// cached.
struct BoxMuller {
    spare: Option<f64>,
}

impl BoxMuller {
    fn new() -> Self {
        BoxMuller { spare: None }
    }

    fn next(&mut self, rng: &mut SplitMix64) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - rng.next_f64();
        let u2 = rng.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn level(v: f64) -> NoiseLevel {
        NoiseLevel::new(v).unwrap()
    }

    #[test]
    fn derive_seed_is_deterministic() {
        let a = derive_seed(42, "img7", NoiseKind::Gaussian, level(0.25));
        let b = derive_seed(42, "img7", NoiseKind::Gaussian, level(0.25));
        assert_eq!(a, b);
    }

    #[test]
    fn derive_seed_separates_kinds_and_levels() {
        let base = derive_seed(42, "img7", NoiseKind::Gaussian, level(0.25));
        for kind in [NoiseKind::SaltPepper, NoiseKind::Uniform] {
            assert_ne!(base, derive_seed(42, "img7", kind, level(0.25)));
        }
        assert_ne!(base, derive_seed(42, "img7", NoiseKind::Gaussian, level(0.26)));
        assert_ne!(base, derive_seed(43, "img7", NoiseKind::Gaussian, level(0.25)));
        assert_ne!(base, derive_seed(42, "img8", NoiseKind::Gaussian, level(0.25)));
    }

    #[test]
    fn derive_seed_pinned_fixtures() {
        // Frozen from the definition; guards cross-platform stability.
        let cases = [
            (42u64, "img7", NoiseKind::Gaussian, 0.25, 0x0b18_e444_b3d8_73a5u64),
            (42u64, "img7", NoiseKind::SaltPepper, 0.25, 0x588b_a2e1_0e90_a6a2u64),
            (42u64, "img7", NoiseKind::Uniform, 0.25, 0x8780_46c9_4d6e_ea6bu64),
            (42u64, "img7", NoiseKind::Gaussian, 0.26, 0xcbaa_8dc9_db6e_ce21u64),
            (7u64, "a-000", NoiseKind::Gaussian, 0.01, 0x35ff_7e63_a05e_b6ddu64),
        ];
        for (master, id, kind, lv, expected) in cases {
            assert_eq!(
                derive_seed(master, id, kind, level(lv)),
                expected,
                "seed drifted for ({master}, {id}, {kind}, {lv})"
            );
        }
    }

    #[test]
    fn micro_units_match_grid_arithmetic() {
        // Level reached as i*step must share micro units with the typed value.
        let stepped = NoiseLevel::new(13.0 * 0.01).unwrap();
        let typed = NoiseLevel::new(0.13).unwrap();
        assert_eq!(stepped.micro_units(), typed.micro_units());
    }

    #[test]
    fn zero_level_is_identity_for_all_kinds() {
        let img = ImageTensor::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64 / 15.0).unwrap();
        for kind in NoiseKind::ALL {
            let out = perturb(&img, kind, NoiseLevel::ZERO, 99).unwrap();
            assert_eq!(out, img, "kind {kind}");
            match sample_noise(kind, NoiseLevel::ZERO, img.shape(), 99).unwrap() {
                NoiseRealization::Additive(f) => assert!(f.is_zero()),
                NoiseRealization::Replacement(r) => assert_eq!(r.masked_count(), 0),
            }
        }
    }

    #[test]
    fn salt_pepper_level_one_replaces_every_pixel() {
        let img = ImageTensor::constant(10, 10, 1, 0.5).unwrap();
        let real = sample_noise(NoiseKind::SaltPepper, level(1.0), img.shape(), 1).unwrap();
        match &real {
            NoiseRealization::Replacement(r) => assert_eq!(r.masked_count(), 100),
            _ => panic!("salt_pepper must be a replacement"),
        }
        let out = real.apply(&img).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn perturb_is_bit_identical_across_runs() {
        let img = ImageTensor::from_fn(8, 8, 1, |y, x, _| ((y + x) % 2) as f64).unwrap();
        let seed = derive_seed(42, "img7", NoiseKind::Gaussian, level(0.25));
        let a = perturb(&img, NoiseKind::Gaussian, level(0.25), seed).unwrap();
        let b = perturb(&img, NoiseKind::Gaussian, level(0.25), seed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_range_level() {
        assert!(NoiseLevel::new(-0.1).is_err());
        assert!(NoiseLevel::new(1.1).is_err());
        assert!(NoiseLevel::new(f64::NAN).is_err());
    }

    #[test]
    fn gaussian_moments_match_level() {
        // Law of large numbers at level 0.3 over 1e5 draws.
        let real = sample_noise(
            NoiseKind::Gaussian,
            level(0.3),
            Shape::new(250, 400, 1),
            1234,
        )
        .unwrap();
        let NoiseRealization::Additive(f) = real else {
            panic!("gaussian must be additive");
        };
        let n = f.data().len() as f64;
        let mean = f.data().iter().sum::<f64>() / n;
        let var = f.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.3).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn uniform_range_respects_amplitude() {
        let real = sample_noise(NoiseKind::Uniform, level(0.4), Shape::new(50, 50, 1), 7).unwrap();
        let NoiseRealization::Additive(f) = real else {
            panic!("uniform must be additive");
        };
        assert!(f.data().iter().all(|v| v.abs() <= 0.4));
    }

    proptest! {
        #[test]
        fn perturbed_images_stay_normalized(
            seed in any::<u64>(),
            lv in 0.0f64..=1.0,
            kind_idx in 0usize..3,
        ) {
            let img = ImageTensor::from_fn(6, 6, 1, |y, x, _| (y * 6 + x) as f64 / 35.0).unwrap();
            let kind = NoiseKind::ALL[kind_idx];
            let out = perturb(&img, kind, NoiseLevel::new(lv).unwrap(), seed).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn salt_pepper_fraction_tracks_probability(seed in any::<u64>(), p in 0.05f64..0.95) {
            // 3-sigma binomial band over a 100x100 image.
            let real = sample_noise(
                NoiseKind::SaltPepper,
                NoiseLevel::new(p).unwrap(),
                Shape::new(100, 100, 1),
                seed,
            ).unwrap();
            let NoiseRealization::Replacement(r) = real else { panic!() };
            let frac = r.masked_count() as f64 / 10_000.0;
            let sigma = (p * (1.0 - p) / 10_000.0).sqrt();
            prop_assert!((frac - p).abs() <= 3.0 * sigma + 1e-9);
        }
    }
}
