//! Incremental threshold search: for each image and noise kind, the first
//! grid level at which the classifier misclassifies.
//!
//! Levels run `step, 2*step, ...` up to `max_level` on a 1e-6 micro-unit
//! grid, each level a fresh seeded draw, so the threshold is a function of
//! the level alone and any single level can be re-run in isolation. The
//! scan is linear by construction: misclassification is not monotone under
//! fresh draws, so "first failure" is only defined by the schedule itself.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHandle;
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::exec::parallel_map;
use crate::image::PerturbationField;
use crate::noise::{derive_seed, perturb, NoiseKind, NoiseLevel};

/// Sweep schedule and seeding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Grid increment; must be a positive multiple of 1e-6.
    pub step: f64,
    /// Highest level scanned, at most 1.0.
    pub max_level: f64,
    /// Noise families to sweep, in report order.
    pub kinds: Vec<NoiseKind>,
    pub master_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            step: 0.01,
            max_level: 1.0,
            kinds: NoiseKind::ALL.to_vec(),
            master_seed: 42,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.step.is_finite() || !self.max_level.is_finite() {
            return Err(Error::Precondition("non-finite sweep bounds".into()));
        }
        if !(self.step > 0.0 && self.step <= self.max_level && self.max_level <= 1.0) {
            return Err(Error::Precondition(format!(
                "need 0 < step <= max_level <= 1, got step {} max {}",
                self.step, self.max_level
            )));
        }
        let micro = self.step * 1e6;
        if (micro - micro.round()).abs() > 1e-3 || micro.round() < 1.0 {
            return Err(Error::Precondition(format!(
                "step {} is not a multiple of 1e-6",
                self.step
            )));
        }
        Ok(())
    }

    fn step_micro(&self) -> u64 {
        (self.step * 1e6).round() as u64
    }

    fn max_micro(&self) -> u64 {
        (self.max_level * 1e6).round() as u64
    }

    /// The full level grid `step, 2*step, ..., <= max_level`, as exact
    /// decimal values.
    pub fn levels(&self) -> Vec<NoiseLevel> {
        let step = self.step_micro();
        let max = self.max_micro();
        (1..)
            .map(|i| i * step)
            .take_while(|m| *m <= max)
            .map(|m| NoiseLevel::new(m as f64 / 1_000_000.0).expect("grid level in range"))
            .collect()
    }
}

/// Per-image threshold result.
///
/// `threshold`, `misclassified_as`, and `noise_field_at_threshold` are
/// present together or absent together; the field is the effective delta
/// `perturbed - clean` at the threshold level.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub image_id: String,
    pub kind: NoiseKind,
    pub threshold: Option<NoiseLevel>,
    pub original_class: String,
    pub misclassified_as: Option<String>,
    /// False when the classifier is already wrong on the clean image; such
    /// records carry no threshold and are excluded from patch averaging.
    pub clean_correct: bool,
    pub noise_field_at_threshold: Option<PerturbationField>,
}

impl SweepRecord {
    /// True when this record contributes to composite-patch averaging.
    pub fn contributes(&self) -> bool {
        self.clean_correct && self.threshold.is_some() && self.noise_field_at_threshold.is_some()
    }
}

/// Scans levels in increasing order and returns at the first misclassification.
pub fn find_threshold(
    handle: &ClassifierHandle,
    item: &LabeledImage,
    kind: NoiseKind,
    config: &SweepConfig,
) -> Result<SweepRecord> {
    config.validate()?;
    let mut record = SweepRecord {
        image_id: item.id.clone(),
        kind,
        threshold: None,
        original_class: item.class_name.clone(),
        misclassified_as: None,
        clean_correct: false,
        noise_field_at_threshold: None,
    };

    let clean = handle.predict(&item.image)?;
    record.clean_correct = clean.label == item.label;
    if !record.clean_correct {
        return Ok(record);
    }

    for level in config.levels() {
        let seed = derive_seed(config.master_seed, &item.id, kind, level);
        let perturbed = perturb(&item.image, kind, level, seed)?;
        let pred = handle.predict(&perturbed)?;
        if pred.label != item.label {
            record.threshold = Some(level);
            record.misclassified_as = Some(handle.class_names()[pred.label].clone());
            record.noise_field_at_threshold = Some(perturbed.delta_from(&item.image)?);
            return Ok(record);
        }
    }
    Ok(record)
}

/// A failed (item, kind) evaluation inside a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub image_id: String,
    pub kind: NoiseKind,
    pub error: String,
}

/// All records and failures of one sweep run, in (item, kind) order.
#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    pub failures: Vec<SweepFailure>,
}

/// Runs `find_threshold` over every (item, kind) pair.
///
/// Pairs evaluate in parallel across `workers`; output order is
/// (item order, kind order) regardless of schedule. Failures are collected
/// rather than aborting the remaining pairs.
pub fn run_sweep(
    handle: &ClassifierHandle,
    items: &[LabeledImage],
    config: &SweepConfig,
    workers: usize,
) -> SweepOutcome {
    let pairs: Vec<(&LabeledImage, NoiseKind)> = items
        .iter()
        .flat_map(|item| config.kinds.iter().map(move |k| (item, *k)))
        .collect();
    let results = parallel_map(pairs.len(), workers, |i| {
        let (item, kind) = pairs[i];
        find_threshold(handle, item, kind, config)
    });

    let mut outcome = SweepOutcome::default();
    for ((item, kind), result) in pairs.into_iter().zip(results) {
        match result {
            Ok(record) => outcome.records.push(record),
            Err(e) => outcome.failures.push(SweepFailure {
                image_id: item.id.clone(),
                kind,
                error: e.to_string(),
            }),
        }
    }
    outcome
}

#[derive(Serialize, Deserialize)]
struct RecordOnDisk {
    image_id: String,
    kind: NoiseKind,
    threshold: Option<f64>,
    original_class: String,
    misclassified_as: Option<String>,
    clean_correct: bool,
    /// Relative path of the NIT1 noise field, when present.
    noise_field: Option<String>,
}

fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Persists sweep records: `records.json`, a CSV projection, and one NIT1
/// file per threshold noise field under `fields/`.
pub fn save_sweep(records: &[SweepRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("fields"))?;
    let mut used = std::collections::BTreeSet::new();
    let mut on_disk = Vec::with_capacity(records.len());
    for record in records {
        let field_path = match &record.noise_field_at_threshold {
            Some(field) => {
                let base = format!("{}_{}", sanitize_id(&record.image_id), record.kind);
                let mut name = format!("{base}.nit");
                let mut counter = 2;
                while !used.insert(name.clone()) {
                    name = format!("{base}-{counter}.nit");
                    counter += 1;
                }
                fs::write(dir.join("fields").join(&name), field.to_nit1_bytes())?;
                Some(format!("fields/{name}"))
            }
            None => None,
        };
        on_disk.push(RecordOnDisk {
            image_id: record.image_id.clone(),
            kind: record.kind,
            threshold: record.threshold.map(|l| l.value()),
            original_class: record.original_class.clone(),
            misclassified_as: record.misclassified_as.clone(),
            clean_correct: record.clean_correct,
            noise_field: field_path,
        });
    }

    let json = serde_json::to_vec_pretty(&on_disk).expect("records serialize");
    fs::write(dir.join("records.json"), json)?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record([
        "image_id",
        "kind",
        "threshold",
        "original_class",
        "misclassified_as",
        "clean_correct",
    ])
    .expect("csv header");
    for r in records {
        csv.write_record([
            r.image_id.as_str(),
            r.kind.name(),
            &r.threshold.map(|l| l.to_string()).unwrap_or_default(),
            r.original_class.as_str(),
            r.misclassified_as.as_deref().unwrap_or(""),
            if r.clean_correct { "true" } else { "false" },
        ])
        .expect("csv record");
    }
    fs::write(
        dir.join("records.csv"),
        csv.into_inner().expect("csv buffer"),
    )?;
    Ok(())
}

/// Loads records previously written by [`save_sweep`].
pub fn load_sweep(dir: &Path) -> Result<Vec<SweepRecord>> {
    let json = fs::read(dir.join("records.json"))?;
    let on_disk: Vec<RecordOnDisk> = serde_json::from_slice(&json)
        .map_err(|e| Error::format("sweep records", e.to_string()))?;
    on_disk
        .into_iter()
        .map(|r| {
            let field = match &r.noise_field {
                Some(rel) => Some(PerturbationField::from_nit1_bytes(&fs::read(dir.join(rel))?)?),
                None => None,
            };
            let threshold = r.threshold.map(NoiseLevel::new).transpose()?;
            if threshold.is_some() != field.is_some()
                || threshold.is_some() != r.misclassified_as.is_some()
            {
                return Err(Error::format(
                    "sweep records",
                    format!(
                        "record '{}' has inconsistent threshold fields",
                        r.image_id
                    ),
                ));
            }
            Ok(SweepRecord {
                image_id: r.image_id,
                kind: r.kind,
                threshold,
                original_class: r.original_class,
                misclassified_as: r.misclassified_as,
                clean_correct: r.clean_correct,
                noise_field_at_threshold: field,
            })
        })
        .collect()
}
