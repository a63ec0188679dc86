//! Quantitative evaluation: a supervised texture classifier, label
//! distribution scores, histogram divergences with bootstrap error bars,
//! class coverage, and parameter-memory comparison.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetMode, TextureDataset};
use crate::error::CoreError;
use crate::networks::{self, ArchitectureSpec, ConvLayer};
use crate::params::ParamSet;
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::train::{Adam, AdamConfig};

/// Default histogram resolution for divergence estimates.
pub const DEFAULT_BINS: usize = 50;
/// Default number of bootstrap resamples.
pub const DEFAULT_RESAMPLES: usize = 1000;
/// Additive smoothing applied to normalized histogram masses.
pub const SMOOTHING_EPS: f64 = 1e-10;

/// A named batch of per-sample scalar statistic values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticSample {
    name: String,
    values: Vec<f64>,
}

impl StatisticSample {
    /// Validates that at least one value exists and all are finite.
    pub fn new(name: &str, values: Vec<f64>) -> Result<Self, CoreError> {
        if values.is_empty() {
            return Err(CoreError::data(format!("statistic {name} has no values")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::data(format!("statistic {name} has non-finite value {v}")));
        }
        Ok(StatisticSample { name: name.to_string(), values })
    }

    #[must_use]
    pub fn name(&self) -> &str {
        &self.name
    }

    #[must_use]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Row-stochastic class-probability matrix `[n, C]`.
#[derive(Clone, Debug)]
pub struct LabelDistribution {
    probs: Tensor,
}

impl LabelDistribution {
    /// Validates non-negative entries and unit row sums (tolerance `1e-6`).
    pub fn new(probs: Tensor) -> Result<Self, CoreError> {
        let shape = probs.shape();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(CoreError::config(format!(
                "label distribution must be [n, classes], got {shape:?}"
            )));
        }
        let c = shape[1];
        for (i, row) in probs.data().chunks(c).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(CoreError::data(format!("row {i} has a negative probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CoreError::data(format!("row {i} sums to {sum}, expected 1")));
            }
        }
        Ok(LabelDistribution { probs })
    }

    /// Row-wise softmax of an `[n, C]` logit matrix.
    #[must_use]
    pub fn from_logits(logits: &Tensor) -> Self {
        let shape = logits.shape().to_vec();
        assert_eq!(shape.len(), 2, "logits must be [n, classes]");
        let c = shape[1];
        let mut data = logits.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        LabelDistribution { probs: Tensor::new(shape, data) }
    }

    #[must_use]
    pub fn num_samples(&self) -> usize {
        self.probs.shape()[0]
    }

    #[must_use]
    pub fn num_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    #[must_use]
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.num_classes();
        &self.probs.data()[i * c..(i + 1) * c]
    }

    /// Column means: the marginal class distribution.
    #[must_use]
    pub fn marginal(&self) -> Vec<f64> {
        let (n, c) = (self.num_samples(), self.num_classes());
        let mut m = vec![0.0; c];
        for row in self.probs.data().chunks(c) {
            for (mj, &p) in m.iter_mut().zip(row) {
                *mj += p;
            }
        }
        for mj in &mut m {
            *mj /= n as f64;
        }
        m
    }

    /// Argmax class of each row (first maximum on ties).
    #[must_use]
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.num_samples())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// `exp` of the mean per-row KL divergence to the marginal, with `0·log 0`
/// taken as 0. Uniform rows give 1; `n = C` distinct one-hot rows give `C`.
#[must_use]
pub fn inception_score(dist: &LabelDistribution) -> f64 {
    let marginal = dist.marginal();
    let n = dist.num_samples();
    let mut mean_kl = 0.0;
    for i in 0..n {
        let mut kl = 0.0;
        for (&p, &m) in dist.row(i).iter().zip(&marginal) {
            if p > 0.0 {
                kl += p * (p / m).ln();
            }
        }
        mean_kl += kl;
    }
    mean_kl /= n as f64;
    mean_kl.exp()
}

/// Normalized histogram over `bins` equal-width bins spanning `[lo, hi]`.
fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut mass = vec![0.0; bins];
    let width = hi - lo;
    for &v in values {
        let idx = (((v - lo) / width) * bins as f64) as usize;
        mass[idx.min(bins - 1)] += 1.0;
    }
    let n = values.len() as f64;
    for m in &mut mass {
        *m /= n;
    }
    mass
}

/// KL divergence between histograms of raw value slices (no validation).
fn kl_between(real: &[f64], synth: &[f64], bins: usize) -> f64 {
    let lo = real.iter().chain(synth).cloned().fold(f64::INFINITY, f64::min);
    let hi = real.iter().chain(synth).cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return 0.0;
    }
    let p = histogram(real, lo, hi, bins);
    let q = histogram(synth, lo, hi, bins);
    let z = 1.0 + bins as f64 * SMOOTHING_EPS;
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(&q) {
        let ps = (pi + SMOOTHING_EPS) / z;
        let qs = (qi + SMOOTHING_EPS) / z;
        kl += ps * (ps / qs).ln();
    }
    kl
}

/// KL(real ‖ synthetic) in nats over shared equal-width bins spanning the
/// union of both ranges; a degenerate (zero-width) range yields 0.
pub fn histogram_kl(
    real: &StatisticSample,
    synth: &StatisticSample,
    bins: usize,
) -> Result<f64, CoreError> {
    if real.name() != synth.name() {
        return Err(CoreError::config(format!(
            "statistic mismatch: {} vs {}",
            real.name(),
            synth.name()
        )));
    }
    if bins == 0 {
        return Err(CoreError::config("histogram needs at least one bin"));
    }
    if real.len() < 2 || synth.len() < 2 {
        return Err(CoreError::config("divergence estimation needs at least 2 values per side"));
    }
    Ok(kl_between(real.values(), synth.values(), bins))
}

/// A divergence point estimate with its bootstrap standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub kl: f64,
    pub std: f64,
}

/// Bootstraps [`histogram_kl`]: both samples are independently resampled
/// with replacement at their original sizes, one dedicated RNG stream per
/// resample, and the population standard deviation of the resampled KLs is
/// reported alongside the point estimate.
pub fn bootstrap_std(
    real: &StatisticSample,
    synth: &StatisticSample,
    bins: usize,
    resamples: usize,
    seed: u64,
) -> Result<KlEstimate, CoreError> {
    if resamples == 0 {
        return Err(CoreError::config("bootstrap needs at least one resample"));
    }
    let kl = histogram_kl(real, synth, bins)?;
    let (rv, sv) = (real.values(), synth.values());
    let mut kls = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let mut rng = rng::bootstrap_rng(seed, r as u64);
        let a: Vec<f64> = (0..rv.len()).map(|_| rv[rng.gen_range(0..rv.len())]).collect();
        let b: Vec<f64> = (0..sv.len()).map(|_| sv[rng.gen_range(0..sv.len())]).collect();
        kls.push(kl_between(&a, &b, bins));
    }
    let mean = kls.iter().sum::<f64>() / kls.len() as f64;
    let var = kls.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / kls.len() as f64;
    Ok(KlEstimate { kl, std: var.sqrt() })
}

/// Per-class prediction counts plus the list of classes never predicted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub counts: Vec<usize>,
    pub empty_classes: Vec<usize>,
}

/// Histogram of predicted classes over a synthetic batch.
pub fn coverage_histogram(
    predictions: &[usize],
    classes: usize,
) -> Result<CoverageReport, CoreError> {
    let mut counts = vec![0usize; classes];
    for &p in predictions {
        if p >= classes {
            return Err(CoreError::data(format!("prediction {p} out of range for {classes} classes")));
        }
        counts[p] += 1;
    }
    let empty_classes = (0..classes).filter(|&c| counts[c] == 0).collect();
    Ok(CoverageReport { counts, empty_classes })
}

/// Parameter memory of one shared model with `d`-dimensional global codes
/// versus one dedicated single-texture model per exemplar for `n` exemplars.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub shared_params: usize,
    pub per_texture_params: usize,
    pub ratio: f64,
}

#[must_use]
pub fn memory_report(d_global: usize, textures: usize) -> MemoryReport {
    let shared = networks::ours_param_estimate(d_global);
    let dedicated = networks::dts_param_estimate(textures);
    MemoryReport {
        shared_params: shared,
        per_texture_params: dedicated,
        ratio: dedicated as f64 / shared as f64,
    }
}

/// Classifier training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub batch: usize,
    pub max_steps: u64,
    pub lr: f64,
    /// Accuracy is probed every this many steps.
    pub check_every: u64,
    /// Number of fresh random-crop batches per accuracy probe.
    pub eval_rounds: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            batch: 32,
            max_steps: 2000,
            lr: 1e-3,
            check_every: 25,
            eval_rounds: 4,
            seed: 0,
        }
    }
}

/// Supervised texture classifier: the texture discriminator's conv ladder
/// (without normalization) widened to `C` output channels, globally pooled
/// to logits.
pub struct TextureClassifier {
    layers: Vec<ConvLayer>,
    pub classes: usize,
}

impl TextureClassifier {
    #[must_use]
    pub fn build(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        arch: &ArchitectureSpec,
        classes: usize,
    ) -> Self {
        let mut specs = arch.disc_tex.clone();
        for s in &mut specs {
            s.sn = false;
        }
        specs.last_mut().expect("non-empty ladder").c_out = classes;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                ConvLayer::build_with_rank(params, rng, &format!("cls.{i}."), s, arch.ndim)
            })
            .collect();
        TextureClassifier { layers, classes }
    }

    /// `[N, C]` logits: conv ladder followed by global average pooling.
    pub fn logits(&self, tape: &mut Tape, params: &mut ParamSet, images: NodeId) -> NodeId {
        let mut x = images;
        for layer in &self.layers {
            x = layer.forward(tape, params, x, false);
        }
        while tape.shape(x).len() > 2 {
            x = tape.mean_axis(x, 2);
        }
        x
    }

    /// Softmax class probabilities for a batch of images.
    pub fn distribution(&self, params: &mut ParamSet, images: &Tensor) -> LabelDistribution {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let logits = self.logits(&mut tape, params, x);
        LabelDistribution::from_logits(tape.value(logits))
    }

    /// Argmax class per image.
    pub fn predict(&self, params: &mut ParamSet, images: &Tensor) -> Vec<usize> {
        self.distribution(params, images).predictions()
    }
}

/// A trained classifier with its parameters and stopping diagnostics.
pub struct ClassifierOutcome {
    pub classifier: TextureClassifier,
    pub params: ParamSet,
    pub steps: u64,
    /// False when the step cap was hit before a clean 100%-accuracy probe;
    /// downstream scores should then be treated as lower bounds.
    pub reached_full_accuracy: bool,
}

/// Trains the classifier on random crops until a probe of fresh batches is
/// fully correct or `max_steps` is reached.
pub fn train_classifier(
    dataset: &TextureDataset,
    arch: &ArchitectureSpec,
    config: &ClassifierConfig,
) -> Result<ClassifierOutcome, CoreError> {
    if dataset.mode() != DatasetMode::Labeled || dataset.num_classes() < 2 {
        return Err(CoreError::config("classifier training needs a labeled multi-class dataset"));
    }
    let mut init_rng = rng::stream_rng(config.seed, rng::STREAM_INIT);
    let mut data_rng = rng::stream_rng(config.seed, rng::STREAM_DATA);
    let mut params = ParamSet::new();
    let classifier = TextureClassifier::build(&mut params, &mut init_rng, arch, dataset.num_classes());
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    });
    for step in 1..=config.max_steps {
        let (x, labels) = dataset.sample_batch(config.batch, &mut data_rng);
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let logits = classifier.logits(&mut tape, &mut params, xn);
        let loss = tape.cross_entropy(logits, &labels);
        let value = tape.value(loss).scalar();
        if !value.is_finite() {
            return Err(CoreError::numerical(format!(
                "classifier loss diverged at step {step}: {value}"
            )));
        }
        let grads = tape.backward(loss, &|i| params.is_trainable(i));
        adam.step(&mut params, &grads);
        if step % config.check_every == 0 {
            let mut all_correct = true;
            'probe: for _ in 0..config.eval_rounds {
                let (ex, el) = dataset.sample_batch(config.batch, &mut data_rng);
                let preds = classifier.predict(&mut params, &ex);
                if preds != el {
                    all_correct = false;
                    break 'probe;
                }
            }
            if all_correct {
                return Ok(ClassifierOutcome {
                    classifier,
                    params,
                    steps: step,
                    reached_full_accuracy: true,
                });
            }
        }
    }
    Ok(ClassifierOutcome {
        classifier,
        params,
        steps: config.max_steps,
        reached_full_accuracy: false,
    })
}

/// Renders class counts as a bar chart image `[3, H, W]` in the `[-1, 1]`
/// value convention, with the count above each bar and the class index below.
#[must_use]
pub fn render_bar_chart(counts: &[usize]) -> Tensor {
    let classes = counts.len().max(1);
    let (bar_w, gap, margin, plot_h) = (14usize, 6usize, 8usize, 100usize);
    let top = 9; // count label strip
    let bottom = 8; // class index strip
    let w = 2 * margin + classes * bar_w + (classes - 1) * gap;
    let h = top + plot_h + 1 + bottom;
    let mut canvas = Tensor::full(vec![3, h, w], -1.0);
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    let baseline = top + plot_h;
    for x in 0..w {
        for c in 0..3 {
            canvas.data_mut()[(c * h + baseline) * w + x] = 1.0;
        }
    }
    for (k, &count) in counts.iter().enumerate() {
        let x0 = margin + k * (bar_w + gap);
        let bar_h = (count as f64 / peak as f64 * plot_h as f64).round() as usize;
        for y in (baseline - bar_h)..baseline {
            for x in x0..x0 + bar_w {
                for c in 0..3 {
                    canvas.data_mut()[(c * h + y) * w + x] = 1.0;
                }
            }
        }
        let label = count.to_string();
        let lx = x0 + (bar_w.saturating_sub(crate::io::text_width(&label))) / 2;
        // Two pixels of clearance above the bar top (glyphs are 5 rows tall).
        crate::io::draw_text(&mut canvas, baseline - bar_h - 8, lx, &label, 1.0);
        let idx = k.to_string();
        let ix = x0 + (bar_w.saturating_sub(crate::io::text_width(&idx))) / 2;
        crate::io::draw_text(&mut canvas, baseline + 2, ix, &idx, 1.0);
    }
    canvas
}
