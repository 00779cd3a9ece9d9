//! The model function: prediction, analytic input gradients, and a trainable
//! built-in micro-classifier.
//!
//! The built-in model is a one-hidden-layer tanh MLP with a softmax head,
//! trained by full-batch gradient descent on mean cross-entropy — the
//! smallest architecture with nontrivial input gradients. External
//! classifiers join through the wire protocol in [`crate::external`].
//!
//! # NMP1 model format
//!
//! ```text
//! magic   4 bytes        "NMP1"
//! dims    3 x u32 LE     input, hidden, classes
//! W1      hidden*input   f32 LE, row-major
//! b1      hidden         f32 LE
//! W2      classes*hidden f32 LE, row-major
//! b2      classes        f32 LE
//! ```

use std::io::{Read, Write};
use std::sync::Mutex;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::external::ExternalBackend;
use crate::image::{ImageTensor, PerturbationField, Shape};
use crate::rng::{self, SplitMix64};

/// Magic bytes opening every NMP1 stream.
pub const NMP1_MAGIC: &[u8; 4] = b"NMP1";

/// Numerically stable softmax; output sums to 1 for any finite logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the maximum element; ties break toward the lowest index.
pub fn argmax_tie_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A classification outcome: winning label plus the full probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let label = argmax_tie_low(&probs);
        Prediction { label, probs }
    }
}

/// One-hidden-layer tanh MLP with a softmax readout.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroMlp {
    /// hidden x input
    w1: Array2<f64>,
    b1: Array1<f64>,
    /// classes x hidden
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl MicroMlp {
    /// Seeded initialization: every weight uniform in
    /// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn init(input_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || num_classes < 2 {
            return Err(Error::Precondition(format!(
                "bad MLP dims: input {input_dim}, hidden {hidden_dim}, classes {num_classes}"
            )));
        }
        let mut rng = SplitMix64::new(rng::absorb(0x4d4c_5001_0000_0001, seed));
        let mut uniform = |bound: f64| (2.0 * rng.next_f64() - 1.0) * bound;
        let bound1 = 1.0 / (input_dim as f64).sqrt();
        let w1 = Array2::from_shape_fn((hidden_dim, input_dim), |_| uniform(bound1));
        let b1 = Array1::from_shape_fn(hidden_dim, |_| uniform(bound1));
        let bound2 = 1.0 / (hidden_dim as f64).sqrt();
        let w2 = Array2::from_shape_fn((num_classes, hidden_dim), |_| uniform(bound2));
        let b2 = Array1::from_shape_fn(num_classes, |_| uniform(bound2));
        Ok(MicroMlp { w1, b1, w2, b2 })
    }

    /// Builds a model from explicit weight matrices (testing and NMP1 I/O).
    pub fn from_weights(
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
    ) -> Result<Self> {
        let (hidden, _input) = w1.dim();
        let (classes, hidden2) = w2.dim();
        if b1.len() != hidden || hidden2 != hidden || b2.len() != classes {
            return Err(Error::shape_mismatch(
                "compatible W1/b1/W2/b2 dimensions",
                format!(
                    "W1 {:?}, b1 {}, W2 {:?}, b2 {}",
                    w1.dim(),
                    b1.len(),
                    w2.dim(),
                    b2.len()
                ),
            ));
        }
        for arr in [w1.iter(), w2.iter()] {
            if arr.into_iter().any(|v| !v.is_finite()) {
                return Err(Error::Precondition("non-finite weight".into()));
            }
        }
        if b1.iter().chain(b2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite bias".into()));
        }
        Ok(MicroMlp { w1, b1, w2, b2 })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.nrows()
    }

    fn logits(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let hidden = (self.w1.dot(&x) + &self.b1).mapv(f64::tanh);
        self.w2.dot(&hidden) + &self.b2
    }

    /// Softmax prediction over a flattened input vector.
    pub fn predict_vec(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.input_dim() {
            return Err(Error::shape_mismatch(self.input_dim(), x.len()));
        }
        let logits = self.logits(ArrayView1::from(x));
        Ok(Prediction::from_probs(softmax(logits.as_slice().unwrap())))
    }

    /// Analytic gradient of `cross_entropy(softmax(f(x)), true_label)` with
    /// respect to the input vector.
    pub fn input_gradient_vec(&self, x: &[f64], true_label: usize) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape_mismatch(self.input_dim(), x.len()));
        }
        if true_label >= self.num_classes() {
            return Err(Error::Precondition(format!(
                "label {true_label} out of range for {} classes",
                self.num_classes()
            )));
        }
        let x = ArrayView1::from(x);
        let a1 = self.w1.dot(&x) + &self.b1;
        let h = a1.mapv(f64::tanh);
        let logits = self.w2.dot(&h) + &self.b2;
        let mut err = Array1::from_vec(softmax(logits.as_slice().unwrap()));
        err[true_label] -= 1.0;
        let dh = self.w2.t().dot(&err);
        let da = &dh * &h.mapv(|t| 1.0 - t * t);
        Ok(self.w1.t().dot(&da).to_vec())
    }

    /// Mean cross-entropy of the model over a prepared batch.
    fn batch_loss(probs: &Array2<f64>, labels: &[usize]) -> f64 {
        let n = labels.len() as f64;
        labels
            .iter()
            .enumerate()
            .map(|(i, y)| -probs[(i, *y)].ln())
            .sum::<f64>()
            / n
    }

    pub fn write_nmp1(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(NMP1_MAGIC)?;
        for dim in [self.input_dim(), self.hidden_dim(), self.num_classes()] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::format("NMP1", format!("dimension {dim} exceeds u32")))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        for arr in [
            self.w1.iter().collect::<Vec<_>>(),
            self.b1.iter().collect(),
            self.w2.iter().collect(),
            self.b2.iter().collect(),
        ] {
            for v in arr {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_nmp1_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_nmp1(&mut buf).expect("vec write cannot fail");
        buf
    }

    pub fn read_nmp1(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::format("NMP1", format!("truncated magic: {e}")))?;
        if &magic != NMP1_MAGIC {
            return Err(Error::format("NMP1", format!("bad magic {magic:?}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)
                .map_err(|e| Error::format("NMP1", format!("truncated header: {e}")))?;
            *d = u32::from_le_bytes(buf) as usize;
        }
        let [input, hidden, classes] = dims;
        if input == 0 || hidden == 0 || classes < 2 {
            return Err(Error::format(
                "NMP1",
                format!("degenerate dims {input}/{hidden}/{classes}"),
            ));
        }
        let mut read_block = |count: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count);
            let mut buf = [0u8; 4];
            for _ in 0..count {
                r.read_exact(&mut buf)
                    .map_err(|e| Error::format("NMP1", format!("truncated weights: {e}")))?;
                let v = f32::from_le_bytes(buf) as f64;
                if !v.is_finite() {
                    return Err(Error::format("NMP1", format!("non-finite weight {v}")));
                }
                out.push(v);
            }
            Ok(out)
        };
        let w1 = Array2::from_shape_vec((hidden, input), read_block(hidden * input)?)
            .expect("shape matches count");
        let b1 = Array1::from_vec(read_block(hidden)?);
        let w2 = Array2::from_shape_vec((classes, hidden), read_block(classes * hidden)?)
            .expect("shape matches count");
        let b2 = Array1::from_vec(read_block(classes)?);
        MicroMlp::from_weights(w1, b1, w2, b2)
    }

    pub fn from_nmp1_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_nmp1(&mut &bytes[..])
    }
}

/// Trained model plus the recorded per-epoch training loss.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: MicroMlp,
    pub epoch_losses: Vec<f64>,
}

/// Full-batch gradient descent on mean cross-entropy.
///
/// Deterministic: seeded init, no minibatch shuffling. `epochs = 0` returns
/// the untouched initialization. A non-finite loss aborts with the failing
/// epoch.
pub fn train_micro(
    dataset: &[LabeledImage],
    hidden_dim: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainResult> {
    if dataset.is_empty() {
        return Err(Error::Precondition("cannot train on an empty dataset".into()));
    }
    let shape = dataset[0].image.shape();
    if let Some(bad) = dataset.iter().find(|i| i.image.shape() != shape) {
        return Err(Error::shape_mismatch(shape, bad.image.shape()));
    }
    if !learning_rate.is_finite() || learning_rate <= 0.0 {
        return Err(Error::Precondition(format!(
            "learning rate {learning_rate} must be positive"
        )));
    }
    let num_classes = dataset.iter().map(|i| i.label + 1).max().unwrap();
    if num_classes < 2 {
        return Err(Error::Precondition("need at least 2 classes to train".into()));
    }
    let n = dataset.len();
    let d = shape.len();

    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (i, item) in dataset.iter().enumerate() {
        x.row_mut(i).assign(&ArrayView1::from(item.image.data()));
        labels.push(item.label);
    }
    let mut onehot = Array2::zeros((n, num_classes));
    for (i, y) in labels.iter().enumerate() {
        onehot[(i, *y)] = 1.0;
    }

    let mut model = MicroMlp::init(d, hidden_dim, num_classes, seed)?;
    let mut losses = Vec::with_capacity(epochs);
    let inv_n = 1.0 / n as f64;

    for epoch in 0..epochs {
        let a1 = x.dot(&model.w1.t()) + &model.b1;
        let h = a1.mapv(f64::tanh);
        let z = h.dot(&model.w2.t()) + &model.b2;
        let probs = softmax_rows(&z);

        let loss = MicroMlp::batch_loss(&probs, &labels);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        losses.push(loss);

        let dz = (&probs - &onehot) * inv_n;
        let gw2 = dz.t().dot(&h);
        let gb2 = dz.sum_axis(Axis(0));
        let dh = dz.dot(&model.w2);
        let da = &dh * &h.mapv(|t| 1.0 - t * t);
        let gw1 = da.t().dot(&x);
        let gb1 = da.sum_axis(Axis(0));

        model.w2 -= &(gw2 * learning_rate);
        model.b2 -= &(gb2 * learning_rate);
        model.w1 -= &(gw1 * learning_rate);
        model.b1 -= &(gb1 * learning_rate);
    }

    let finite = model.w1.iter().all(|v| v.is_finite())
        && model.b1.iter().all(|v| v.is_finite())
        && model.w2.iter().all(|v| v.is_finite())
        && model.b2.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::TrainingDiverged {
            epoch: epochs,
            loss: f64::NAN,
        });
    }
    Ok(TrainResult {
        model,
        epoch_losses: losses,
    })
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// What a classifier can do. Prediction is always available; analytic input
/// gradients are optional.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capabilities {
    pub predict: bool,
    pub gradient: bool,
}

enum Backend {
    Builtin(MicroMlp),
    External(Mutex<ExternalBackend>),
}

/// The model function: class names, expected input shape, and a prediction
/// (optionally gradient) backend.
///
/// Built-in backends are pure given frozen weights and safe to call
/// concurrently; external backends serialize to one in-flight request per
/// process.
pub struct ClassifierHandle {
    class_names: Vec<String>,
    input_shape: Shape,
    capabilities: Capabilities,
    backend: Backend,
}

impl ClassifierHandle {
    /// Wraps a built-in model. The flattened input shape must match the
    /// model's input dimension, and `class_names` its output dimension.
    pub fn builtin(model: MicroMlp, class_names: Vec<String>, input_shape: Shape) -> Result<Self> {
        if input_shape.len() != model.input_dim() {
            return Err(Error::shape_mismatch(
                format!("input dim {}", model.input_dim()),
                format!("{input_shape} = {} elements", input_shape.len()),
            ));
        }
        if class_names.len() != model.num_classes() {
            return Err(Error::shape_mismatch(
                format!("{} classes", model.num_classes()),
                format!("{} names", class_names.len()),
            ));
        }
        Ok(ClassifierHandle {
            class_names,
            input_shape,
            capabilities: Capabilities {
                predict: true,
                gradient: true,
            },
            backend: Backend::Builtin(model),
        })
    }

    pub(crate) fn external(backend: ExternalBackend) -> Self {
        let hello = backend.hello();
        ClassifierHandle {
            class_names: hello.classes.clone(),
            input_shape: hello.input_shape,
            capabilities: hello.capabilities,
            backend: Backend::External(Mutex::new(backend)),
        }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    pub fn supports_gradient(&self) -> bool {
        self.capabilities.gradient
    }

    fn check_shape(&self, image: &ImageTensor) -> Result<()> {
        if image.shape() != self.input_shape {
            return Err(Error::shape_mismatch(self.input_shape, image.shape()));
        }
        Ok(())
    }

    /// Classifies an image. Deterministic for fixed weights and input.
    pub fn predict(&self, image: &ImageTensor) -> Result<Prediction> {
        self.check_shape(image)?;
        match &self.backend {
            Backend::Builtin(model) => model.predict_vec(image.data()),
            Backend::External(chan) => {
                let probs = chan
                    .lock()
                    .expect("external channel poisoned")
                    .predict(image)?;
                self.validate_probs(&probs)?;
                Ok(Prediction::from_probs(probs))
            }
        }
    }

    /// Gradient of the classification loss with respect to the input image.
    pub fn loss_input_gradient(
        &self,
        image: &ImageTensor,
        true_label: usize,
    ) -> Result<PerturbationField> {
        if !self.capabilities.gradient {
            return Err(Error::MissingCapability(
                "classifier does not provide input gradients".into(),
            ));
        }
        self.check_shape(image)?;
        if true_label >= self.num_classes() {
            return Err(Error::Precondition(format!(
                "label {true_label} out of range for {} classes",
                self.num_classes()
            )));
        }
        let data = match &self.backend {
            Backend::Builtin(model) => model.input_gradient_vec(image.data(), true_label)?,
            Backend::External(chan) => chan
                .lock()
                .expect("external channel poisoned")
                .gradient(image, true_label)?,
        };
        let s = self.input_shape;
        PerturbationField::new(s.height, s.width, s.channels, data)
    }

    fn validate_probs(&self, probs: &[f64]) -> Result<()> {
        if probs.len() != self.num_classes() {
            return Err(Error::Protocol(format!(
                "adapter returned {} probabilities for {} classes",
                probs.len(),
                self.num_classes()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Protocol("negative or non-finite probability".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Protocol(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_procedural;
    use proptest::prelude::*;

    fn toy_model(b2: Vec<f64>) -> MicroMlp {
        // W2 and W1 zero: logits equal b2 regardless of input.
        let classes = b2.len();
        MicroMlp::from_weights(
            Array2::zeros((4, 4)),
            Array1::zeros(4),
            Array2::zeros((classes, 4)),
            Array1::from_vec(b2),
        )
        .unwrap()
    }

    #[test]
    fn softmax_of_fixed_logits() {
        // Hand value: softmax(3, 0, 0) = (e^3, 1, 1) / (e^3 + 2).
        let e3 = 3.0f64.exp();
        let z = e3 + 2.0;
        let probs = softmax(&[3.0, 0.0, 0.0]);
        assert!((probs[0] - e3 / z).abs() < 1e-12);
        assert!((probs[1] - 1.0 / z).abs() < 1e-12);
        assert!((probs[0] - 0.9094).abs() < 5e-5);
        assert!((probs[1] - 0.0453).abs() < 5e-5);
    }

    #[test]
    fn predict_with_bias_only_logits() {
        let model = toy_model(vec![3.0, 0.0, 0.0]);
        let img = ImageTensor::constant(2, 2, 1, 0.5).unwrap();
        let handle =
            ClassifierHandle::builtin(model, vec!["a".into(), "b".into(), "c".into()], img.shape())
                .unwrap();
        let pred = handle.predict(&img).unwrap();
        assert_eq!(pred.label, 0);
        assert!((pred.probs[0] - 0.9094).abs() < 5e-5);
    }

    #[test]
    fn uniform_probs_tie_break_to_lowest_index() {
        let model = toy_model(vec![0.0; 4]);
        let img = ImageTensor::constant(2, 2, 1, 0.3).unwrap();
        let handle = ClassifierHandle::builtin(
            model,
            (0..4).map(|i| format!("c{i}")).collect(),
            img.shape(),
        )
        .unwrap();
        let pred = handle.predict(&img).unwrap();
        assert_eq!(pred.label, 0);
        assert!(pred.probs.iter().all(|p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn predict_is_deterministic() {
        let model = MicroMlp::init(16, 8, 3, 5).unwrap();
        let img = ImageTensor::from_fn(4, 4, 1, |y, x, _| ((y * 4 + x) as f64) / 15.0).unwrap();
        let a = model.predict_vec(img.data()).unwrap();
        let b = model.predict_vec(img.data()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_rejects_shape_mismatch() {
        let model = toy_model(vec![0.0, 0.0]);
        let handle =
            ClassifierHandle::builtin(model, vec!["a".into(), "b".into()], Shape::new(2, 2, 1))
                .unwrap();
        let img = ImageTensor::constant(3, 3, 1, 0.5).unwrap();
        assert!(matches!(
            handle.predict(&img),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    /// Central finite difference of the cross-entropy loss, used as the
    /// independent gradient oracle.
    fn fd_gradient(model: &MicroMlp, x: &[f64], label: usize, step: f64) -> Vec<f64> {
        let loss = |x: &[f64]| -> f64 {
            let p = model.predict_vec(x).unwrap().probs;
            -p[label].ln()
        };
        (0..x.len())
            .map(|i| {
                let mut hi = x.to_vec();
                let mut lo = x.to_vec();
                hi[i] += step;
                lo[i] -= step;
                (loss(&hi) - loss(&lo)) / (2.0 * step)
            })
            .collect()
    }

    fn guarded_rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut worst = 0.0f64;
        for seed in 0..10u64 {
            let model = MicroMlp::init(12, 6, 3, seed).unwrap();
            let mut rng = SplitMix64::new(seed ^ 0xABCD);
            let x: Vec<f64> = (0..12).map(|_| rng.next_f64()).collect();
            let label = (rng.next_below(3)) as usize;
            let analytic = model.input_gradient_vec(&x, label).unwrap();
            let numeric = fd_gradient(&model, &x, label, 1e-4);
            for (a, n) in analytic.iter().zip(&numeric) {
                worst = worst.max(guarded_rel_err(*a, *n));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn saturated_softmax_has_vanishing_gradient() {
        // Logits (50, 0, 0): output is one-hot at class 0 to double precision.
        let model = toy_model(vec![50.0, 0.0, 0.0]);
        let x = vec![0.2, 0.4, 0.6, 0.8];
        let grad = model.input_gradient_vec(&x, 0).unwrap();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "norm {norm}");
    }

    #[test]
    fn gradient_closed_form_at_tanh_origin() {
        // With x = 0 and b1 = 0 the hidden layer is exactly linear
        // (tanh'(0) = 1), so grad_x = W1^T W2^T (p - y) with p = softmax(b2).
        let w1 = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w2 = Array2::from_shape_vec((2, 2), vec![0.7, -0.4, 0.2, 0.5]).unwrap();
        let b2 = Array1::from_vec(vec![0.3, -0.1]);
        let model = MicroMlp::from_weights(w1, Array1::zeros(2), w2.clone(), b2.clone()).unwrap();

        let x = vec![0.0, 0.0];
        let grad = model.input_gradient_vec(&x, 1).unwrap();

        let p = softmax(b2.as_slice().unwrap());
        let e = [p[0], p[1] - 1.0];
        let expected = [
            w2[(0, 0)] * e[0] + w2[(1, 0)] * e[1],
            w2[(0, 1)] * e[0] + w2[(1, 1)] * e[1],
        ];
        for (g, want) in grad.iter().zip(expected) {
            assert!((g - want).abs() < 1e-12, "got {g}, want {want}");
        }
    }

    #[test]
    fn gradient_requires_valid_label() {
        let model = toy_model(vec![0.0, 0.0]);
        assert!(model.input_gradient_vec(&[0.0; 4], 5).is_err());
    }

    #[test]
    fn training_zero_epochs_returns_initialization() {
        let data = generate_procedural(3, 4, 8, 9).unwrap();
        let trained = train_micro(&data, 6, 0, 0.5, 11).unwrap();
        let init = MicroMlp::init(64, 6, 3, 11).unwrap();
        assert_eq!(trained.model, init);
        assert!(trained.epoch_losses.is_empty());
    }

    #[test]
    fn training_loss_is_finite_and_decreasing_on_default_config() {
        let data = generate_procedural(3, 12, 16, 42).unwrap();
        let result = train_micro(&data, 16, 40, 0.5, 42).unwrap();
        assert_eq!(result.epoch_losses.len(), 40);
        assert!(result.epoch_losses.iter().all(|l| l.is_finite()));
        for pair in result.epoch_losses.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "loss increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn training_divergence_is_reported_with_epoch() {
        // Conflicting labels on identical images force residual loss; an
        // absurd learning rate then drives the logits to saturation and the
        // cross-entropy to infinity.
        let img = ImageTensor::constant(8, 8, 1, 0.5).unwrap();
        let data = vec![
            LabeledImage {
                image: img.clone(),
                label: 0,
                class_name: "a".into(),
                id: "a0".into(),
            },
            LabeledImage {
                image: img,
                label: 1,
                class_name: "b".into(),
                id: "b0".into(),
            },
        ];
        match train_micro(&data, 4, 200, 1e9, 1) {
            Err(Error::TrainingDiverged { epoch, .. }) => assert!(epoch < 200),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_rejects_mixed_shapes() {
        let mut data = generate_procedural(2, 2, 8, 1).unwrap();
        data[3].image = ImageTensor::constant(16, 16, 1, 0.5).unwrap();
        assert!(matches!(
            train_micro(&data, 4, 1, 0.5, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nmp1_roundtrip_is_stable_after_first_quantization() {
        let model = MicroMlp::init(10, 5, 3, 77).unwrap();
        let once = MicroMlp::from_nmp1_bytes(&model.to_nmp1_bytes()).unwrap();
        let twice = MicroMlp::from_nmp1_bytes(&once.to_nmp1_bytes()).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.input_dim(), 10);
        assert_eq!(once.hidden_dim(), 5);
        assert_eq!(once.num_classes(), 3);
    }

    #[test]
    fn nmp1_rejects_corruption() {
        let bytes = MicroMlp::init(4, 3, 2, 0).unwrap().to_nmp1_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(MicroMlp::from_nmp1_bytes(&bad_magic).is_err());
        assert!(MicroMlp::from_nmp1_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-50.0f64..50.0, 2..12)) {
            let probs = softmax(&logits);
            let sum: f64 = probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(probs.iter().all(|p| *p >= 0.0));
        }

        #[test]
        fn argmax_ignores_sub_maximum_permutations(
            tail in proptest::collection::vec(0.0f64..0.9, 3..8),
            swap in (0usize..3, 0usize..3),
        ) {
            // Max sits at index 0; permuting later, strictly smaller entries
            // never changes the winner.
            let mut values = vec![1.0];
            values.extend(tail);
            let base = argmax_tie_low(&values);
            let (i, j) = swap;
            values.swap(1 + i.min(values.len() - 2), 1 + j.min(values.len() - 2));
            prop_assert_eq!(base, 0);
            prop_assert_eq!(argmax_tie_low(&values), 0);
        }
    }
}
