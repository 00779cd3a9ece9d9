//! Dataset generation, ingestion, and stratified sampling.
//!
//! The procedural generator renders twelve geometric grayscale templates
//! (bars, crosses, disks, gradients, ...) with per-sample jitter and
//! translation, giving a deterministic, license-free stand-in for a real
//! image corpus. On-disk datasets are described by a CSV manifest
//! (`path,label` header, paths relative to the manifest) referencing 8-bit
//! binary PGM (P5) or PPM (P6) images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{self, SplitMix64};

/// One evaluation unit: an image with its ground-truth class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageTensor,
    /// 0-based class index.
    pub label: usize,
    pub class_name: String,
    /// Stable unique identifier; feeds per-image seed derivation.
    pub id: String,
}

/// Names of the procedural class templates, in label order.
pub const TEMPLATE_NAMES: [&str; 12] = [
    "h-bars", "v-bars", "cross", "checker", "disk", "frame", "h-grad", "v-grad", "stripes",
    "rings", "triangle", "plus",
];

const FG: f64 = 0.85;
const BG: f64 = 0.15;
const JITTER: f64 = 0.05;

fn template_value(class: usize, y: usize, x: usize, side: usize) -> f64 {
    let s = side as f64;
    let (yf, xf) = (y as f64, x as f64);
    let center = (s - 1.0) / 2.0;
    let band = (side / 8).max(1) as f64;
    let on = |cond: bool| if cond { FG } else { BG };
    match class {
        0 => on((y / (side / 8).max(1)) % 2 == 0),
        1 => on((x / (side / 8).max(1)) % 2 == 0),
        2 => {
            let d1 = (yf - xf).abs();
            let d2 = (yf + xf - (s - 1.0)).abs();
            on(d1 < band || d2 < band)
        }
        3 => {
            let cell = (side / 4).max(1);
            on((y / cell + x / cell) % 2 == 0)
        }
        4 => {
            let r = ((yf - center).powi(2) + (xf - center).powi(2)).sqrt();
            on(r <= s / 3.0)
        }
        5 => {
            let m = (side / 8).max(1);
            let edge = y.min(x).min(side - 1 - y).min(side - 1 - x);
            on(edge >= m && edge < 2 * m)
        }
        6 => xf / (s - 1.0),
        7 => yf / (s - 1.0),
        8 => on(((y + x) / (side / 8).max(1)) % 2 == 0),
        9 => {
            let r = ((yf - center).powi(2) + (xf - center).powi(2)).sqrt();
            on((r / band) as usize % 2 == 0)
        }
        10 => on(x <= y),
        11 => on((yf - center).abs() < band || (xf - center).abs() < band),
        _ => unreachable!("template index out of range"),
    }
}

/// Generates `num_classes * per_class` grayscale images deterministically
/// from the arguments. Each class is one geometric template; samples get
/// +-0.05 additive jitter and an integer translation of at most `side / 8`.
pub fn generate_procedural(
    num_classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if num_classes < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if num_classes > TEMPLATE_NAMES.len() {
        return Err(Error::Unsupported(format!(
            "only {} class templates available, {num_classes} requested",
            TEMPLATE_NAMES.len()
        )));
    }
    if per_class < 1 {
        return Err(Error::Precondition("per_class must be >= 1".into()));
    }
    if side < 8 {
        return Err(Error::Precondition(format!(
            "side must be >= 8, got {side}"
        )));
    }

    let max_shift = (side / 8) as i64;
    let mut out = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let name = TEMPLATE_NAMES[class];
        for sample in 0..per_class {
            let sample_seed = rng::absorb(
                rng::absorb(rng::absorb(0x4441_5441_5345_5401, seed), class as u64),
                sample as u64,
            );
            let mut r = SplitMix64::new(sample_seed);
            let dy = r.next_below(2 * max_shift as u64 + 1) as i64 - max_shift;
            let dx = r.next_below(2 * max_shift as u64 + 1) as i64 - max_shift;
            let image = ImageTensor::from_fn(side, side, 1, |y, x, _| {
                let sy = (y as i64 - dy).clamp(0, side as i64 - 1) as usize;
                let sx = (x as i64 - dx).clamp(0, side as i64 - 1) as usize;
                template_value(class, sy, sx, side) + (2.0 * r.next_f64() - 1.0) * JITTER
            })?;
            let mut id = String::new();
            let _ = write!(id, "{name}-{sample:03}");
            out.push(LabeledImage {
                image,
                label: class,
                class_name: name.to_string(),
                id,
            });
        }
    }
    Ok(out)
}

/// Ordered class names of a dataset, indexed by label.
///
/// Errors if labels have gaps or a label maps to conflicting names.
pub fn class_names(items: &[LabeledImage]) -> Result<Vec<String>> {
    let num = items.iter().map(|i| i.label + 1).max().unwrap_or(0);
    let mut names: Vec<Option<&str>> = vec![None; num];
    for item in items {
        match names[item.label] {
            None => names[item.label] = Some(&item.class_name),
            Some(existing) if existing == item.class_name => {}
            Some(existing) => {
                return Err(Error::Config(format!(
                    "label {} maps to both '{}' and '{}'",
                    item.label, existing, item.class_name
                )))
            }
        }
    }
    names
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            n.map(str::to_string)
                .ok_or_else(|| Error::Config(format!("no items carry label {i}")))
        })
        .collect()
}

/// A parsed dataset manifest: ordered class list plus image entries.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
}

#[derive(Clone, Debug)]
pub struct ManifestItem {
    /// Image path relative to the manifest file.
    pub path: PathBuf,
    pub class_name: String,
    /// 1-based line in the manifest (header is line 1).
    pub line: u64,
}

impl DatasetManifest {
    /// Parses manifest CSV. Classes are collected in order of first
    /// appearance; blank labels are rejected.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        {
            let headers = reader.headers().map_err(|e| Error::Ingestion {
                path: origin.to_path_buf(),
                line: 1,
                message: format!("unreadable header: {e}"),
            })?;
            if headers.len() < 2 || &headers[0] != "path" || &headers[1] != "label" {
                return Err(Error::Ingestion {
                    path: origin.to_path_buf(),
                    line: 1,
                    message: format!("expected header 'path,label', got '{}'", headers.iter().collect::<Vec<_>>().join(",")),
                });
            }
        }
        let mut classes: Vec<String> = Vec::new();
        let mut items = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Ingestion {
                path: origin.to_path_buf(),
                line: e
                    .position()
                    .map(|p| p.line())
                    .unwrap_or(0),
                message: format!("malformed CSV record: {e}"),
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() < 2 {
                return Err(Error::Ingestion {
                    path: origin.to_path_buf(),
                    line,
                    message: "expected two fields: path,label".into(),
                });
            }
            let path = &record[0];
            let label = &record[1];
            if label.is_empty() {
                return Err(Error::Ingestion {
                    path: origin.to_path_buf(),
                    line,
                    message: format!("missing class name for '{path}'"),
                });
            }
            if !classes.iter().any(|c| c == label) {
                classes.push(label.to_string());
            }
            items.push(ManifestItem {
                path: PathBuf::from(path),
                class_name: label.to_string(),
                line,
            });
        }
        Ok(DatasetManifest { classes, items })
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Loads every referenced image, resolving paths against `base_dir`.
    ///
    /// Items naming a class absent from `classes` (possible for manifests
    /// built programmatically) are rejected with their line number.
    pub fn load(&self, base_dir: &Path) -> Result<Vec<LabeledImage>> {
        let mut out = Vec::with_capacity(self.items.len());
        for item in &self.items {
            let label = self.class_index(&item.class_name).ok_or_else(|| Error::Ingestion {
                path: base_dir.join("<manifest>"),
                line: item.line,
                message: format!("unknown class name '{}'", item.class_name),
            })?;
            let full = base_dir.join(&item.path);
            let image = load_pnm(&full).map_err(|e| Error::Ingestion {
                path: full.clone(),
                line: item.line,
                message: e.to_string(),
            })?;
            out.push(LabeledImage {
                image,
                label,
                class_name: item.class_name.clone(),
                id: item.path.to_string_lossy().into_owned(),
            });
        }
        Ok(out)
    }
}

/// Reads a manifest file and loads all referenced images, in manifest order.
pub fn load_manifest(manifest_path: &Path) -> Result<Vec<LabeledImage>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::Ingestion {
        path: manifest_path.to_path_buf(),
        line: 0,
        message: format!("cannot read manifest: {e}"),
    })?;
    let manifest = DatasetManifest::parse(&text, manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest.load(base)
}

/// Parses an 8-bit binary PGM (P5) or PPM (P6) file into a normalized image.
fn load_pnm(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path)?;
    parse_pnm(&bytes)
}

fn parse_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    let bad = |m: String| Error::format("PNM", m);
    if bytes.len() < 2 {
        return Err(bad("file too short for magic".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(bad(format!(
                "unsupported magic {:?} (expected P5 or P6)",
                String::from_utf8_lossy(other)
            )))
        }
    };

    // Header tokens (width, height, maxval) separated by whitespace, with
    // '#' comments running to end of line.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("missing numeric header field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|e| bad(format!("bad header field '{text}': {e}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("unsupported maxval {maxval} (expected 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad(format!("degenerate size {width}x{height}")));
    }
    // Single whitespace byte separates header from payload.
    if pos >= bytes.len() || !matches!(bytes[pos], b' ' | b'\t' | b'\r' | b'\n') {
        return Err(bad("missing whitespace before pixel data".into()));
    }
    pos += 1;
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(bad(format!(
            "payload holds {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload[..expected].iter().map(|b| *b as f64 / 255.0).collect();
    ImageTensor::new(height, width, channels, data)
}

/// Stratified sample: `max(#classes, round(fraction * n))` items total, at
/// least one per represented class, uniform within class, deterministic for
/// a fixed seed. Output preserves the input order of the selected items, so
/// `fraction = 1.0` returns an order-stable copy.
pub fn sample_stratified(
    items: &[LabeledImage],
    fraction: f64,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if items.is_empty() {
        return Err(Error::Precondition("cannot sample from an empty dataset".into()));
    }
    if !fraction.is_finite() || fraction <= 0.0 || fraction > 1.0 {
        return Err(Error::Precondition(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let n = items.len();

    // Group item indices by label, labels in ascending order.
    let mut by_class: Vec<(usize, Vec<usize>)> = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        match by_class.binary_search_by_key(&item.label, |(l, _)| *l) {
            Ok(slot) => by_class[slot].1.push(idx),
            Err(slot) => by_class.insert(slot, (item.label, vec![idx])),
        }
    }
    let num_classes = by_class.len();
    let target = ((fraction * n as f64).round() as usize).max(num_classes);

    // Proportional quota with a floor of one per class, balanced to the
    // target by largest remainder; class label breaks ties.
    let quotas: Vec<f64> = by_class
        .iter()
        .map(|(_, idxs)| target as f64 * idxs.len() as f64 / n as f64)
        .collect();
    let mut alloc: Vec<usize> = by_class
        .iter()
        .zip(&quotas)
        .map(|((_, idxs), q)| (q.floor() as usize).clamp(1, idxs.len()))
        .collect();
    let mut assigned: usize = alloc.iter().sum();
    while assigned != target {
        let mut order: Vec<usize> = (0..num_classes).collect();
        if assigned < target {
            order.sort_by(|&a, &b| {
                let fa = quotas[a] - quotas[a].floor();
                let fb = quotas[b] - quotas[b].floor();
                fb.partial_cmp(&fa)
                    .expect("finite quotas")
                    .then(by_class[a].0.cmp(&by_class[b].0))
            });
            let mut moved = false;
            for c in order {
                if assigned == target {
                    break;
                }
                if alloc[c] < by_class[c].1.len() {
                    alloc[c] += 1;
                    assigned += 1;
                    moved = true;
                }
            }
            debug_assert!(moved, "target exceeds dataset size");
        } else {
            order.sort_by(|&a, &b| {
                let fa = quotas[a] - quotas[a].floor();
                let fb = quotas[b] - quotas[b].floor();
                fa.partial_cmp(&fb)
                    .expect("finite quotas")
                    .then(by_class[b].0.cmp(&by_class[a].0))
            });
            let mut moved = false;
            for c in order {
                if assigned == target {
                    break;
                }
                if alloc[c] > 1 {
                    alloc[c] -= 1;
                    assigned -= 1;
                    moved = true;
                }
            }
            debug_assert!(moved, "cannot shrink below one per class");
        }
    }

    // Uniform within-class selection via a per-class seeded shuffle; full
    // classes are taken verbatim so no RNG state is consumed for them.
    let mut selected: Vec<usize> = Vec::with_capacity(target);
    for ((label, idxs), take) in by_class.iter().zip(&alloc) {
        if *take == idxs.len() {
            selected.extend_from_slice(idxs);
        } else {
            let mut pool = idxs.clone();
            let class_seed = rng::absorb(rng::absorb(0x5354_5241_5401_0001, seed), *label as u64);
            SplitMix64::new(class_seed).shuffle(&mut pool);
            selected.extend_from_slice(&pool[..*take]);
        }
    }
    selected.sort_unstable();
    Ok(selected.into_iter().map(|i| items[i].clone()).collect())
}

/// Deterministic train/holdout split: within each class (input order), every
/// `holdout_every`-th item lands in the holdout set.
pub fn split_holdout(
    items: &[LabeledImage],
    holdout_every: usize,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if holdout_every < 2 {
        return Err(Error::Precondition(
            "holdout_every must be >= 2 so both splits are non-empty".into(),
        ));
    }
    let mut seen_per_class: std::collections::BTreeMap<usize, usize> = Default::default();
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for item in items {
        let ordinal = seen_per_class.entry(item.label).or_insert(0);
        if *ordinal % holdout_every == holdout_every - 1 {
            holdout.push(item.clone());
        } else {
            train.push(item.clone());
        }
        *ordinal += 1;
    }
    Ok((train, holdout))
}
