//! Augmentation, Adam, the training loop and the evaluation harnesses.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::angles::{k_to_theta, loss_to_degrees, Angle, LossMode};
use crate::beams::{sample, BeamTensor};
use crate::data::{split_indices, Dataset};
use crate::imageops::{optimal_padding, pad, rotate, Image, Interpolation, PadMode};
use crate::net::model::{AnglePredictor, BicConfig, BicModel, DEFAULT_EDGE_FACTOR};
use crate::net::tape::Graph;
use crate::net::tensor::Tensor;
use crate::net::checkpoint::save_checkpoint;
use crate::rbt::RawTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationRegime {
    /// `θ` drawn from the multiples of `360° / B`.
    Finite,
    /// `θ` drawn uniformly from `[0°, 360°)`.
    Continuous,
}

impl RotationRegime {
    pub fn name(self) -> &'static str {
        match self {
            RotationRegime::Finite => "finite",
            RotationRegime::Continuous => "continuous",
        }
    }
}

impl FromStr for RotationRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finite" => Ok(RotationRegime::Finite),
            "continuous" => Ok(RotationRegime::Continuous),
            other => Err(Error::Config(format!("unknown rotation regime `{other}`"))),
        }
    }
}

/// Beam length relative to the image width `W` and padding `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeamLength {
    /// `W/2 − δ`.
    A,
    /// `W/2`.
    B,
    /// `W/2 + δ`, shortened when the widened beam would leave the grid.
    C,
    Fixed(usize),
}

impl BeamLength {
    pub fn resolve(self, width: usize, pad: usize, thickness: usize) -> Result<usize> {
        let half = width / 2;
        let d = match self {
            BeamLength::A => half.saturating_sub(pad),
            BeamLength::B => half,
            BeamLength::C => {
                let grid = width + 2 * pad;
                let room = (grid - 1 - grid / 2).saturating_sub(thickness);
                (half + pad).min(room)
            }
            BeamLength::Fixed(d) => d,
        };
        if d < 3 {
            return Err(Error::Config(format!("beam length {d} is too short")));
        }
        Ok(d)
    }
}

impl fmt::Display for BeamLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeamLength::A => write!(f, "A"),
            BeamLength::B => write!(f, "B"),
            BeamLength::C => write!(f, "C"),
            BeamLength::Fixed(d) => write!(f, "{d}"),
        }
    }
}

impl FromStr for BeamLength {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(BeamLength::A),
            "B" | "b" => Ok(BeamLength::B),
            "C" | "c" => Ok(BeamLength::C),
            n => n
                .parse()
                .map(BeamLength::Fixed)
                .map_err(|_| Error::Config(format!("beam_length must be A, B, C or a count, got `{n}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub num_beams: usize,
    pub beam_length: BeamLength,
    pub thickness: usize,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss_mode: LossMode,
    pub rotation_regime: RotationRegime,
    pub iterations: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub edge_factor: f64,
    pub pad_mode: PadMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            num_beams: 32,
            beam_length: BeamLength::B,
            thickness: 1,
            latent_dim: 128,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            loss_mode: LossMode::CircleOnly,
            rotation_regime: RotationRegime::Finite,
            iterations: 1000,
            seed: 0,
            split_fraction: 0.8,
            edge_factor: DEFAULT_EDGE_FACTOR,
            pad_mode: PadMode::Zero,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "batch_size",
        "num_beams",
        "beam_length",
        "thickness",
        "latent_dim",
        "learning_rate",
        "beta1",
        "beta2",
        "loss_mode",
        "rotation_regime",
        "iterations",
        "seed",
        "split_fraction",
        "edge_factor",
        "pad_mode",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "num_beams" => self.num_beams = parse_value(key, value)?,
            "beam_length" => self.beam_length = value.parse()?,
            "thickness" => self.thickness = parse_value(key, value)?,
            "latent_dim" => self.latent_dim = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "loss_mode" => self.loss_mode = value.parse()?,
            "rotation_regime" => self.rotation_regime = value.parse()?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "split_fraction" => self.split_fraction = parse_value(key, value)?,
            "edge_factor" => self.edge_factor = parse_value(key, value)?,
            "pad_mode" => self.pad_mode = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.num_beams == 0 {
            return bad("num_beams must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction <= 1.0) {
            return bad("split_fraction must lie in (0, 1]");
        }
        if self.loss_mode.uses_prior() && self.rotation_regime != RotationRegime::Finite {
            return bad("the prior loss needs rotation_regime = finite");
        }
        Ok(())
    }

    /// All keys as `key = value` lines, parseable by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let values = [
            self.batch_size.to_string(),
            self.num_beams.to_string(),
            self.beam_length.to_string(),
            self.thickness.to_string(),
            self.latent_dim.to_string(),
            format!("{:?}", self.learning_rate),
            format!("{:?}", self.beta1),
            format!("{:?}", self.beta2),
            self.loss_mode.name().to_string(),
            self.rotation_regime.name().to_string(),
            self.iterations.to_string(),
            self.seed.to_string(),
            format!("{:?}", self.split_fraction),
            format!("{:?}", self.edge_factor),
            self.pad_mode.name().to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Model configuration for square images of side `width` with
    /// `channels` channels.
    pub fn model_config(&self, width: usize, channels: usize) -> Result<BicConfig> {
        let pad = optimal_padding(width);
        let beam_length = self.beam_length.resolve(width, pad, self.thickness)?;
        Ok(BicConfig {
            image_size: width,
            pad,
            pad_mode: self.pad_mode,
            channels,
            num_beams: self.num_beams,
            beam_length,
            thickness: self.thickness,
            latent_dim: self.latent_dim,
            edge_factor: self.edge_factor,
        })
    }
}

/// A rotated training or evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Image,
    pub theta: Angle,
    pub k: Option<usize>,
}

/// Draws a rotation for the regime.
pub fn draw_rotation(regime: RotationRegime, num_beams: usize, rng: &mut impl Rng) -> (Angle, Option<usize>) {
    match regime {
        RotationRegime::Finite => {
            let k = rng.random_range(0..num_beams);
            (k_to_theta(k, num_beams), Some(k))
        }
        RotationRegime::Continuous => (Angle::from_degrees(rng.random_range(0.0..360.0)), None),
    }
}

/// Rotates a square (padded) image by a random angle of the regime.
pub fn augment(img: &Image, regime: RotationRegime, num_beams: usize, rng: &mut impl Rng) -> Result<Augmented> {
    let (theta, k) = draw_rotation(regime, num_beams, rng);
    let image = rotate(img, theta, Interpolation::Bilinear)?;
    Ok(Augmented { image, theta, k })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamParams {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of completed steps.
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, hp: AdamParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((pv, &gv), (mv, vv)) in it {
            *mv = hp.beta1 * *mv + (1.0 - hp.beta1) * gv;
            *vv = hp.beta2 * *vv + (1.0 - hp.beta2) * gv * gv;
            let mh = *mv / c1;
            let vh = *vv / c2;
            *pv -= hp.learning_rate * mh / (vh.sqrt() + hp.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub circle: f64,
    /// Cross-entropy of the prior; zero when the mode does not use it.
    pub prior: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BicModel,
    pub curve: Vec<LossRecord>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Checks that all images share one square size and channel count.
pub fn dataset_geometry(ds: &Dataset) -> Result<(usize, usize)> {
    let first = ds.images.first().ok_or(Error::EmptyDataset)?;
    for img in &ds.images {
        if !img.is_square() {
            return Err(Error::NonSquareImage {
                width: img.width(),
                height: img.height(),
            });
        }
        if img.width() != first.width() || img.channels() != first.channels() {
            return Err(Error::ShapeMismatch(format!(
                "dataset mixes {}x{}x{} and {}x{}x{} images",
                first.width(),
                first.width(),
                first.channels(),
                img.width(),
                img.width(),
                img.channels()
            )));
        }
    }
    Ok((first.width(), first.channels()))
}

/// Offset that separates the batch-sampling stream from the split stream.
const BATCH_STREAM: u64 = 0x5eed_ba7c;

/// Trains a fresh model on the training split of `ds`.
///
/// Every iteration draws `batch_size` training images with replacement,
/// rotates each by a random angle of the regime and takes one Adam step on
/// the batch-mean loss. With a prior-based loss mode the unrotated image is
/// encoded as well and the wrapped-diagonal logits of the pair are scored
/// against the drawn rotation index.
pub fn train(config: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let (width, channels) = dataset_geometry(ds)?;
    let mconf = config.model_config(width, channels)?;
    let mut model = BicModel::new(mconf.clone(), config.seed)?;
    let (train_idx, test_idx) = split_indices(ds.len(), config.split_fraction, config.seed);
    if train_idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let padded: Vec<Image> = ds.images.iter().map(|i| pad(i, mconf.pad, mconf.pad_mode)).collect();
    let base_beams: Vec<Option<BeamTensor>> = if config.loss_mode.uses_prior() {
        padded.iter().map(|i| sample(i, model.mask()).map(Some)).collect::<Result<_>>()?
    } else {
        vec![None; padded.len()]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ BATCH_STREAM);
    let hp = AdamParams::from_config(config);
    let mut adam = AdamState::new(model.params());
    let epoch_len = train_idx.len().div_ceil(config.batch_size);
    let mut curve = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let mut query = Vec::with_capacity(config.batch_size);
        let mut reference = Vec::new();
        let mut thetas = Vec::with_capacity(config.batch_size);
        let mut ks = Vec::new();
        for _ in 0..config.batch_size {
            let idx = train_idx[rng.random_range(0..train_idx.len())];
            let aug = augment(&padded[idx], config.rotation_regime, config.num_beams, &mut rng)?;
            query.push(sample(&aug.image, model.mask())?);
            thetas.push(aug.theta.radians());
            if let (Some(b), Some(k)) = (&base_beams[idx], aug.k) {
                reference.push(b.clone());
                ks.push(k);
            }
        }

        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let x = g.constant(model.beams_input(&query.iter().collect::<Vec<_>>())?);
        let f = model.forward(&mut g, &bound, x).map_err(|e| Error::NonFiniteLoss {
            iteration: it,
            detail: e.to_string(),
        })?;
        let circle = g.circle_loss(f.z, &thetas)?;
        let (mut loss, mut prior_value) = (circle, 0.0);
        if config.loss_mode.uses_prior() {
            let xr = g.constant(model.beams_input(&reference.iter().collect::<Vec<_>>())?);
            let er = model.encode(&mut g, &bound, xr)?;
            let logits = model.prior_logits(&mut g, er, f.embeddings)?;
            let prior = g.softmax_cross_entropy(logits, &ks)?;
            prior_value = g.value(prior).item();
            let (wc, wp) = config.loss_mode.weights(it / epoch_len + 1);
            let a = g.scale(circle, wc);
            let b = g.scale(prior, wp);
            loss = g.add(a, b)?;
        }
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!("loss = {loss_value}"),
            });
        }
        g.backward(loss)?;
        let grads: Vec<Tensor> = bound
            .ids
            .iter()
            .zip(model.params())
            .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        if let Some(i) = grads.iter().position(|t| !t.all_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!("non-finite gradient for {}", model.names()[i]),
            });
        }
        adam_step(model.params_mut(), &grads, &mut adam, hp)?;
        curve.push(LossRecord {
            iteration: it + 1,
            loss: loss_value,
            circle: g.value(circle).item(),
            prior: prior_value,
        });
    }
    Ok(TrainOutcome {
        model,
        curve,
        train_indices: train_idx,
        test_indices: test_idx,
    })
}

/// Trains and writes `model.ckpt`, `loss.csv` and `config.txt` into `out`.
pub fn train_to_dir(config: &TrainConfig, ds: &Dataset, out: impl AsRef<Path>) -> Result<TrainOutcome> {
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let outcome = train(config, ds)?;
    save_checkpoint(&outcome.model, out.join("model.ckpt"))?;
    write_loss_curve(out.join("loss.csv"), &outcome.curve)?;
    fs::write(out.join("config.txt"), config.to_text())?;
    Ok(outcome)
}

/// Mean loss over the last `n` records.
pub fn tail_mean(curve: &[LossRecord], n: usize) -> f64 {
    let tail = &curve[curve.len().saturating_sub(n)..];
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
}

pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss", "circle_loss", "prior_loss"])?;
    for r in curve {
        w.write_record([
            r.iteration.to_string(),
            format!("{:?}", r.loss),
            format!("{:?}", r.circle),
            format!("{:?}", r.prior),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A rotated image with its ground-truth angle.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub image: Image,
    pub theta: Angle,
}

/// Pads each image and rotates it `per_image` times by angles of the
/// regime. Deterministic per seed.
pub fn build_eval_cases(
    images: &[Image],
    pad_by: usize,
    pad_mode: PadMode,
    regime: RotationRegime,
    num_beams: usize,
    per_image: usize,
    seed: u64,
) -> Result<Vec<EvalCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images.len() * per_image);
    for img in images {
        let padded = pad(img, pad_by, pad_mode);
        for _ in 0..per_image {
            let aug = augment(&padded, regime, num_beams, &mut rng)?;
            out.push(EvalCase {
                image: aug.image,
                theta: aug.theta,
            });
        }
    }
    Ok(out)
}

/// Width of one error histogram bin in degrees.
pub const HISTOGRAM_BIN_DEG: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub mean_loss: f64,
    /// Mean of the per-sample angular distances.
    pub mean_error_deg: f64,
    /// Mean of `loss_to_degrees` of the per-sample circle losses.
    pub mean_error_deg_via_loss: f64,
    /// Sample counts per 10° error bin over `[0°, 180°]`.
    pub histogram: Vec<usize>,
}

/// Scores predictions against the case labels.
pub fn evaluate(predictor: &dyn AnglePredictor, cases: &[EvalCase]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images: Vec<Image> = cases.iter().map(|c| c.image.clone()).collect();
    score(cases, &predictor.predict_batch(&images)?)
}

/// Scores precomputed predictions, one per case.
pub fn score(cases: &[EvalCase], preds: &[Angle]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != cases.len() {
        return Err(Error::SizeMismatch {
            expected: cases.len(),
            found: preds.len(),
        });
    }
    let bins = (180.0 / HISTOGRAM_BIN_DEG) as usize;
    let mut histogram = vec![0usize; bins];
    let (mut loss, mut err, mut err_via_loss) = (0.0, 0.0, 0.0);
    for (case, pred) in cases.iter().zip(preds) {
        let e = case.theta.distance_degrees(*pred);
        let l = 2.0 - 2.0 * e.to_radians().cos();
        loss += l;
        err += e;
        err_via_loss += loss_to_degrees(l.clamp(0.0, 4.0))?;
        histogram[((e / HISTOGRAM_BIN_DEG) as usize).min(bins - 1)] += 1;
    }
    let n = cases.len() as f64;
    Ok(EvalReport {
        count: cases.len(),
        mean_loss: loss / n,
        mean_error_deg: err / n,
        mean_error_deg_via_loss: err_via_loss / n,
        histogram,
    })
}

pub fn write_eval_report(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["count", "mean_loss", "mean_error_deg", "mean_error_deg_via_loss"])?;
    w.write_record([
        report.count.to_string(),
        format!("{:?}", report.mean_loss),
        format!("{:?}", report.mean_error_deg),
        format!("{:?}", report.mean_error_deg_via_loss),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn write_histogram(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_start_deg", "bin_end_deg", "count"])?;
    for (i, n) in report.histogram.iter().enumerate() {
        let lo = i as f64 * HISTOGRAM_BIN_DEG;
        w.write_record([lo.to_string(), (lo + HISTOGRAM_BIN_DEG).to_string(), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Always predicts the same angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedAngle(pub Angle);

impl AnglePredictor for FixedAngle {
    fn predict(&self, _img: &Image) -> Result<Angle> {
        Ok(self.0)
    }
}

/// Returns a fixed list of angles in call order; with the labels of an
/// evaluation set it acts as a perfect oracle.
#[derive(Debug)]
pub struct Replay {
    angles: Vec<Angle>,
    next: Cell<usize>,
}

impl Replay {
    pub fn new(angles: Vec<Angle>) -> Self {
        Self {
            angles,
            next: Cell::new(0),
        }
    }

    pub fn labels_of(cases: &[EvalCase]) -> Self {
        Self::new(cases.iter().map(|c| c.theta).collect())
    }
}

impl AnglePredictor for Replay {
    fn predict(&self, _img: &Image) -> Result<Angle> {
        let i = self.next.get();
        let a = *self
            .angles
            .get(i)
            .ok_or_else(|| Error::DomainError("replay predictor ran out of angles".into()))?;
        self.next.set(i + 1);
        Ok(a)
    }
}

/// Uniformly random angles.
#[derive(Debug)]
pub struct UniformRandom {
    rng: RefCell<ChaCha8Rng>,
}

impl UniformRandom {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl AnglePredictor for UniformRandom {
    fn predict(&self, _img: &Image) -> Result<Angle> {
        Ok(Angle::from_degrees(self.rng.borrow_mut().random_range(0.0..360.0)))
    }
}

/// Predicts `θ̂` and rotates the image back by `−θ̂`.
pub fn canonicalize(predictor: &dyn AnglePredictor, img: &Image) -> Result<(Image, Angle)> {
    let theta = predictor.predict(img)?;
    Ok((rotate(img, -theta, Interpolation::Bilinear)?, theta))
}

/// Absolute input gradient of the circle loss towards `target`, summed
/// over channels and scaled to a maximum of 1. The map lives on the padded
/// grid the model samples from; pixels outside all beams are exactly 0.
pub fn saliency(model: &BicModel, img: &Image, target: Angle) -> Result<Image> {
    let grad = model.input_gradient(img, target)?;
    let (w, h, ch) = (grad.width(), grad.height(), grad.channels());
    let mut out = Image::zeros(w, h, 1).with_pad(grad.pad());
    let mut max = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            let v: f64 = (0..ch).map(|k| grad.get(r, c, k).abs()).sum();
            out.set(r, c, 0, v);
            max = max.max(v);
        }
    }
    if max > 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v /= max);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityPoint {
    pub dx: i64,
    pub dy: i64,
    pub mean_deviation_deg: f64,
}

/// Predictions for `imgs`, split over up to `threads` scoped threads.
pub fn predict_parallel<P: AnglePredictor + Sync>(p: &P, imgs: &[Image], threads: usize) -> Result<Vec<Angle>> {
    let threads = threads.max(1);
    if threads == 1 || imgs.len() < 2 {
        return p.predict_batch(imgs);
    }
    let chunk = imgs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Angle>>> = std::thread::scope(|s| {
        let handles: Vec<_> = imgs.chunks(chunk).map(|c| s.spawn(move || p.predict_batch(c))).collect();
        handles.into_iter().map(|h| h.join().expect("prediction thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(imgs.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Mean angular deviation of the predictions for translated copies of the
/// images from the predictions for the originals, for every integer shift
/// `(dx, dy)` with `|dx|, |dy| ≤ max_shift`. Translations are applied to
/// the padded images and fill with zeros.
pub fn stability_sweep<P: AnglePredictor + Sync>(
    predictor: &P,
    images: &[Image],
    max_shift: usize,
    threads: usize,
) -> Result<Vec<StabilityPoint>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = predict_parallel(predictor, images, threads)?;
    let m = max_shift as i64;
    let mut out = Vec::with_capacity((2 * max_shift + 1).pow(2));
    for dy in -m..=m {
        for dx in -m..=m {
            let shifted: Vec<Image> = images.iter().map(|i| i.translate(dy, dx)).collect();
            let preds = predict_parallel(predictor, &shifted, threads)?;
            let dev = preds
                .iter()
                .zip(&base)
                .map(|(a, b)| a.distance_degrees(*b))
                .sum::<f64>()
                / images.len() as f64;
            out.push(StabilityPoint {
                dx,
                dy,
                mean_deviation_deg: dev,
            });
        }
    }
    Ok(out)
}

/// Largest mean deviation over shifts with `|dx|, |dy| ≤ radius`.
pub fn worst_deviation_within(curve: &[StabilityPoint], radius: i64) -> f64 {
    curve
        .iter()
        .filter(|p| p.dx.abs() <= radius && p.dy.abs() <= radius)
        .map(|p| p.mean_deviation_deg)
        .fold(0.0, f64::max)
}

pub fn write_stability_curve(path: impl AsRef<Path>, curve: &[StabilityPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dx", "dy", "mean_deviation_deg"])?;
    for p in curve {
        w.write_record([p.dx.to_string(), p.dy.to_string(), format!("{:?}", p.mean_deviation_deg)])?;
    }
    w.flush()?;
    Ok(())
}

/// Pre-context beam embeddings of `img` rotated by each orbit angle,
/// stacked into a `|orbit|·B × L` matrix.
pub fn orbit_embeddings(model: &BicModel, img: &Image, orbit: &[Angle]) -> Result<RawTensor> {
    let prepared = model.prepare(img)?;
    let mut rows = Vec::new();
    for &theta in orbit {
        let rotated = rotate(&prepared, theta, Interpolation::Bilinear)?;
        for row in model.embeddings(&rotated)? {
            rows.extend(row);
        }
    }
    let l = model.config().latent_dim;
    RawTensor::from_f64(&[rows.len() / l, l], &rows)
}

pub fn export_embeddings(model: &BicModel, img: &Image, orbit: &[Angle], path: impl AsRef<Path>) -> Result<RawTensor> {
    let t = orbit_embeddings(model, img, orbit)?;
    t.save(path)?;
    Ok(t)
}

/// Key-value summary lines, e.g. for printing the resolved configuration.
pub fn describe(pairs: &[(&str, String)]) -> String {
    let map: BTreeMap<&str, &String> = pairs.iter().map(|(k, v)| (*k, v)).collect();
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
