//! FER2013 ingestion, preprocessing, augmentation and test-time augmentation.
//!
//! Images are `[H, W, C]` tensors; grayscale images have `C = 1`. Pixel
//! coordinates refer to pixel centres, and geometric transforms act about the
//! image centre `((W-1)/2, (H-1)/2)`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowError};
use crate::seed::stream;
use crate::tensor::Tensor;

pub const FER_SIDE: usize = 48;
pub const FER_PIXELS: usize = FER_SIDE * FER_SIDE;
pub const NUM_CLASSES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Emotion {
    Anger,
    Disgust,
    Fear,
    Happiness,
    Sadness,
    Surprise,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; NUM_CLASSES] = [
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Fear,
        Emotion::Happiness,
        Emotion::Sadness,
        Emotion::Surprise,
        Emotion::Neutral,
    ];

    pub fn from_label(label: u8) -> Option<Self> {
        Self::ALL.get(label as usize).copied()
    }

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Disgust => "disgust",
            Emotion::Fear => "fear",
            Emotion::Happiness => "happiness",
            Emotion::Sadness => "sadness",
            Emotion::Surprise => "surprise",
            Emotion::Neutral => "neutral",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Training,
    PublicTest,
    PrivateTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Training, Split::PublicTest, Split::PrivateTest];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Training => "Training",
            Split::PublicTest => "PublicTest",
            Split::PrivateTest => "PrivateTest",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.tag() == s)
            .ok_or_else(|| Error::Value(format!("unknown usage tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FerRecord {
    pub label: Emotion,
    /// Row-major 48×48 intensities.
    pub pixels: Vec<u8>,
    pub split: Split,
}

impl FerRecord {
    /// `[48, 48, 1]` tensor with raw 0–255 intensities.
    pub fn image(&self) -> Tensor {
        Tensor::from_parts(
            vec![FER_SIDE, FER_SIDE, 1],
            self.pixels.iter().map(|&p| f64::from(p)).collect(),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FerDataset {
    pub training: Vec<FerRecord>,
    pub public_test: Vec<FerRecord>,
    pub private_test: Vec<FerRecord>,
}

impl FerDataset {
    pub fn split(&self, split: Split) -> &[FerRecord] {
        match split {
            Split::Training => &self.training,
            Split::PublicTest => &self.public_test,
            Split::PrivateTest => &self.private_test,
        }
    }

    fn push(&mut self, rec: FerRecord) {
        match rec.split {
            Split::Training => self.training.push(rec),
            Split::PublicTest => self.public_test.push(rec),
            Split::PrivateTest => self.private_test.push(rec),
        }
    }

    pub fn len(&self) -> usize {
        self.training.len() + self.public_test.len() + self.private_test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records of all splits in file order within each split.
    pub fn records(&self) -> impl Iterator<Item = &FerRecord> {
        self.training.iter().chain(&self.public_test).chain(&self.private_test)
    }

    /// Per-class counts over every split.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for r in self.records() {
            counts[r.label as usize] += 1;
        }
        counts
    }
}

fn parse_row(fields: &csv::StringRecord) -> std::result::Result<FerRecord, String> {
    if fields.len() != 3 {
        return Err(format!("expected 3 fields, found {}", fields.len()));
    }
    let label: u8 = fields[0]
        .trim()
        .parse()
        .map_err(|_| format!("bad label {:?}", &fields[0]))?;
    let label = Emotion::from_label(label).ok_or_else(|| format!("label {label} outside 0..7"))?;
    let pixels = fields[1]
        .split_ascii_whitespace()
        .map(|p| p.parse::<u8>().map_err(|_| format!("bad pixel value {p:?}")))
        .collect::<std::result::Result<Vec<u8>, String>>()?;
    if pixels.len() != FER_PIXELS {
        return Err(format!("expected {FER_PIXELS} pixels, found {}", pixels.len()));
    }
    let split = fields[2].trim().parse::<Split>().map_err(|e| e.to_string())?;
    Ok(FerRecord { label, pixels, split })
}

/// Parses `emotion,pixels,Usage` rows. A header line is optional. Every
/// malformed row is reported with its 1-based line number.
pub fn parse_fer_csv<R: Read>(input: R) -> Result<FerDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut data = FerDataset::default();
    let mut errors = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec.position().map_or(i as u64 + 1, |p| p.line()) as usize;
        if i == 0 && rec.get(0).is_some_and(|f| f.trim() == "emotion") {
            continue;
        }
        match parse_row(&rec) {
            Ok(r) => data.push(r),
            Err(message) => errors.push(RowError { row, message }),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Parse(errors));
    }
    Ok(data)
}

/// Writes records back in the input format, with header.
pub fn write_fer_csv<'a, W: Write>(records: impl IntoIterator<Item = &'a FerRecord>, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["emotion", "pixels", "Usage"])?;
    for r in records {
        let pixels = r.pixels.iter().map(u8::to_string).collect::<Vec<_>>().join(" ");
        wtr.write_record([r.label.label().to_string(), pixels, r.split.tag().to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Value(format!("expected an [H, W, C] image, got {s:?}"))),
    }
}

/// Bilinear resize with half-pixel centres: output pixel `i` samples input
/// coordinate `(i + 0.5)·in/out − 0.5`, clamped to the valid range.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Value("resize target must be positive".into()));
    }
    let src = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let data = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oi in 0..out_h {
        let (y0, y1, fy) = src(oi, h, out_h);
        for oj in 0..out_w {
            let (x0, x1, fx) = src(oj, w, out_w);
            for ch in 0..c {
                let at = |y: usize, x: usize| data[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w, c], out))
}

/// Replicates a single-channel image into three channels.
pub fn gray_to_rgb(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = image_dims(img)?;
    if c != 1 {
        return Err(Error::Value(format!("expected one channel, got {c}")));
    }
    let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
    Ok(Tensor::from_parts(vec![h, w, 3], data))
}

/// Floors toward zero and clamps to 255. Negative or non-finite values are
/// rejected.
pub fn quantize_truncate(img: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = img.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Value(format!("cannot truncate {bad} to 0..=255")));
    }
    Ok(img.map(|v| v.trunc().min(255.0)))
}

/// Geometric transform, applied as flip, shift, rotation, then zoom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    /// Horizontal mirror.
    pub flip: bool,
    /// Shift in pixels, positive to the right.
    pub dx: f64,
    /// Shift in pixels, positive downwards.
    pub dy: f64,
    /// Radians, positive counter-clockwise as displayed.
    pub rotation: f64,
    /// Magnification; 1.1 enlarges content by 10%.
    pub zoom: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: false,
        dx: 0.0,
        dy: 0.0,
        rotation: 0.0,
        zoom: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Resamples `img` bilinearly through the inverse map; samples falling
    /// outside the image read zero.
    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        let (h, w, c) = image_dims(img)?;
        if !(self.zoom.is_finite() && self.zoom > 0.0) {
            return Err(Error::Value(format!("zoom must be positive, got {}", self.zoom)));
        }
        if self.is_identity() {
            return Ok(img.clone());
        }
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = self.rotation.sin_cos();
        let data = img.data();
        let sample = |y: isize, x: isize, ch: usize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                data[(y as usize * w + x as usize) * c + ch]
            }
        };
        let mut out = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                // undo zoom, rotation, shift and flip in turn
                let (x4, y4) = ((j as f64 - cx) / self.zoom, (i as f64 - cy) / self.zoom);
                let (x3, y3) = (cos * x4 - sin * y4, sin * x4 + cos * y4);
                let (x2, y2) = (x3 - self.dx, y3 - self.dy);
                let x1 = if self.flip { -x2 } else { x2 };
                let (sx, sy) = (x1 + cx, y2 + cy);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                for ch in 0..c {
                    let mut v = sample(y0, x0, ch) * (1.0 - fx) * (1.0 - fy);
                    if fx > 0.0 {
                        v += sample(y0, x0 + 1, ch) * fx * (1.0 - fy);
                    }
                    if fy > 0.0 {
                        v += sample(y0 + 1, x0, ch) * (1.0 - fx) * fy;
                        if fx > 0.0 {
                            v += sample(y0 + 1, x0 + 1, ch) * fx * fy;
                        }
                    }
                    out.push(v);
                }
            }
        }
        Ok(Tensor::from_parts(vec![h, w, c], out))
    }
}

/// Training-time augmentation ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum shift as a fraction of width/height.
    pub shift_frac: f64,
    /// Zoom sampled from `[1 - zoom_frac, 1 + zoom_frac]`.
    pub zoom_frac: f64,
    pub flip: bool,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        rotation_deg: 0.0,
        shift_frac: 0.0,
        zoom_frac: 0.0,
        flip: false,
    };

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rotation_deg, self.shift_frac, self.zoom_frac];
        if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || self.zoom_frac >= 1.0 {
            return Err(Error::config("augmentation ranges must be nonnegative (zoom below 1)"));
        }
        Ok(())
    }

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }

    pub fn sample<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Transform {
        let mut sym = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let rotation = sym(self.rotation_deg).to_radians();
        let dx = sym(self.shift_frac) * w as f64;
        let dy = sym(self.shift_frac) * h as f64;
        let zoom = 1.0 + sym(self.zoom_frac);
        let flip = self.flip && rng.gen_bool(0.5);
        Transform { flip, dx, dy, rotation, zoom }
    }
}

/// Applies a transform sampled from `cfg`.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.is_none() {
        return Ok(img.clone());
    }
    let (h, w, _) = image_dims(img)?;
    cfg.sample(h, w, rng).apply(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub shift_px: f64,
    pub rotation: f64,
    pub zoom: f64,
    pub identity_weight: f64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            shift_px: 10.0,
            rotation: 0.4,
            zoom: 1.1,
            identity_weight: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaPlan {
    pub transforms: Vec<Transform>,
    pub weights: Vec<f64>,
}

impl TtaPlan {
    pub fn identity() -> Self {
        Self {
            transforms: vec![Transform::IDENTITY],
            weights: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.transforms.is_empty() || self.transforms.len() != self.weights.len() {
            return Err(Error::config("TTA plan needs one weight per transform and at least one transform"));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("TTA weights must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Two batches: flip × x-shift × y-shift × rotation, then flip × zoom ×
/// rotation. Exact repeats are dropped so each distinct transform is counted
/// once; the identity gets `identity_weight`, every other transform 1.
pub fn tta_enumerate(cfg: &TtaConfig) -> TtaPlan {
    let (s, r) = (cfg.shift_px, cfg.rotation);
    let mut transforms: Vec<Transform> = Vec::new();
    let mut push = |t: Transform| {
        if !transforms.contains(&t) {
            transforms.push(t);
        }
    };
    for flip in [false, true] {
        for dx in [-s, 0.0, s] {
            for dy in [-s, 0.0, s] {
                for rotation in [-r, 0.0, r] {
                    push(Transform { flip, dx, dy, rotation, zoom: 1.0 });
                }
            }
        }
    }
    for flip in [false, true] {
        for zoom in [1.0, cfg.zoom] {
            for rotation in [-r, 0.0, r] {
                push(Transform { flip, dx: 0.0, dy: 0.0, rotation, zoom });
            }
        }
    }
    let weights = transforms
        .iter()
        .map(|t| if t.is_identity() { cfg.identity_weight } else { 1.0 })
        .collect();
    TtaPlan { transforms, weights }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaPrediction {
    pub probabilities: Vec<f64>,
    pub class: usize,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Weighted mean of per-transform class probabilities, in plan order.
pub fn tta_aggregate(logit_sets: &[Vec<f64>], plan: &TtaPlan) -> Result<TtaPrediction> {
    if logit_sets.len() != plan.weights.len() || logit_sets.is_empty() {
        return Err(Error::Value(format!(
            "{} logit sets for a plan of {}",
            logit_sets.len(),
            plan.weights.len()
        )));
    }
    let total: f64 = plan.weights.iter().sum();
    if total == 0.0 {
        return Err(Error::Value("TTA weights sum to zero".into()));
    }
    let k = logit_sets[0].len();
    if logit_sets.iter().any(|l| l.len() != k) || k == 0 {
        return Err(Error::Value("logit sets differ in length".into()));
    }
    let mut acc = vec![0.0; k];
    for (logits, &wt) in logit_sets.iter().zip(&plan.weights) {
        for (a, p) in acc.iter_mut().zip(softmax(logits)) {
            *a += wt * p;
        }
    }
    let probabilities: Vec<f64> = acc.into_iter().map(|a| a / total).collect();
    Ok(TtaPrediction {
        class: argmax(&probabilities),
        probabilities,
    })
}

/// Preprocessing: bilinear resize, truncation to integers, optional RGB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub size: usize,
    pub rgb: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { size: 224, rgb: true }
    }
}

pub fn preprocess(img: &Tensor, cfg: &PreprocessConfig) -> Result<Tensor> {
    let resized = resize_bilinear(img, cfg.size, cfg.size)?;
    let quantized = quantize_truncate(&resized)?;
    if cfg.rgb {
        gray_to_rgb(&quantized)
    } else {
        Ok(quantized)
    }
}

/// Preprocessed images of one split stacked as `[N, S, S, C]`, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplit {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

pub fn prepare_split(records: &[FerRecord], cfg: &PreprocessConfig) -> Result<PreparedSplit> {
    if records.is_empty() {
        return Err(Error::Empty("split"));
    }
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for r in records {
        let t = preprocess(&r.image(), cfg)?;
        shape = t.shape().to_vec();
        data.extend_from_slice(t.data());
    }
    shape.insert(0, records.len());
    Ok(PreparedSplit {
        images: Tensor::new(shape, data)?,
        labels: records.iter().map(|r| r.label.label()).collect(),
    })
}

/// A labelled image set for training and evaluation, pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        Samples {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Downscaled `[side, side, 1]` images from FER records.
    pub fn from_records(records: &[FerRecord], side: usize) -> Result<Samples> {
        let mut images = Vec::with_capacity(records.len());
        for r in records {
            images.push(resize_bilinear(&r.image(), side, side)?.map(|v| v / 255.0));
        }
        Ok(Samples {
            images,
            labels: records.iter().map(|r| r.label as usize).collect(),
        })
    }
}

/// Class-patterned toy images: each class has a fixed random template;
/// samples add uniform noise of amplitude `noise` and clamp to `[0, 1]`.
pub fn synthetic_samples(count: usize, shape: [usize; 3], classes: usize, noise: f64, seed: u64) -> Samples {
    let templates: Vec<Tensor> = (0..classes)
        .map(|k| Tensor::random_uniform(shape, 0.0, 1.0, &mut stream(seed, &[0, k as u64])))
        .collect();
    let mut rng = stream(seed, &[1]);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let k = i % classes;
        if noise > 0.0 {
            let jitter = Tensor::random_uniform(shape, -noise, noise, &mut rng);
            images.push(templates[k].zip_map(&jitter, |a, b| (a + b).clamp(0.0, 1.0)).expect("same shape"));
        } else {
            images.push(templates[k].clone());
        }
        labels.push(k);
    }
    Samples { images, labels }
}

/// Synthetic FER-format records, `per_split` records per split with labels
/// cycling through the classes.
pub fn synthetic_fer(per_split: [usize; 3], seed: u64) -> FerDataset {
    let s = synthetic_samples(NUM_CLASSES, [FER_SIDE, FER_SIDE, 1], NUM_CLASSES, 0.0, seed);
    let mut rng = stream(seed, &[2]);
    let mut data = FerDataset::default();
    for (split, &n) in Split::ALL.iter().zip(&per_split) {
        for i in 0..n {
            let k = i % NUM_CLASSES;
            let pixels = s.images[k]
                .data()
                .iter()
                .map(|&v| (v * 200.0 + rng.gen_range(0.0..55.0)) as u8)
                .collect();
            data.push(FerRecord {
                label: Emotion::ALL[k],
                pixels,
                split: *split,
            });
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(label: &str, pixels: &str, usage: &str) -> String {
        format!("{label},{pixels},{usage}\n")
    }

    fn zeros() -> String {
        vec!["0"; FER_PIXELS].join(" ")
    }

    #[test]
    fn parses_rows_and_header() {
        let text = format!(
            "emotion,pixels,Usage\n{}{}",
            row("0", &zeros(), "Training"),
            row("3", &vec!["255"; FER_PIXELS].join(" "), "PrivateTest")
        );
        let data = parse_fer_csv(text.as_bytes()).unwrap();
        assert_eq!(data.training.len(), 1);
        assert_eq!(data.training[0].label, Emotion::Anger);
        assert!(data.training[0].pixels.iter().all(|&p| p == 0));
        assert_eq!(data.private_test[0].label, Emotion::Happiness);
        assert_eq!(data.class_counts(), [1, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn itemizes_bad_rows() {
        let short = vec!["1"; 2303].join(" ");
        let text = format!(
            "emotion,pixels,Usage\n{}{}{}{}",
            row("0", &zeros(), "Training"),
            row("2", &short, "Training"),
            row("9", &zeros(), "PublicTest"),
            row("1", &zeros(), "Validation"),
        );
        let Err(Error::Parse(errs)) = parse_fer_csv(text.as_bytes()) else {
            panic!("expected parse errors");
        };
        let rows: Vec<usize> = errs.iter().map(|e| e.row).collect();
        assert_eq!(rows, vec![3, 4, 5]);
        assert!(errs[0].message.contains("2303"));
        assert!(errs[2].message.contains("Validation"));
        let bad = parse_fer_csv("0,1 2\n".as_bytes()).unwrap_err();
        assert!(bad.to_string().contains("row 1"));
    }

    #[test]
    fn csv_round_trip() {
        let data = synthetic_fer([5, 2, 2], 3);
        let mut buf = Vec::new();
        write_fer_csv(data.records(), &mut buf).unwrap();
        assert_eq!(parse_fer_csv(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn bilinear_examples() {
        let c = Tensor::full([5, 3, 1], 42.0);
        assert!(resize_bilinear(&c, 11, 7).unwrap().data().iter().all(|&v| (v - 42.0).abs() < 1e-12));

        let img = Tensor::new([2, 2, 1], vec![0.0, 100.0, 100.0, 0.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        // sample points 0.25 and 0.75 along each axis for the centre block
        let centre = [out.get(&[1, 1, 0]), out.get(&[1, 2, 0]), out.get(&[2, 1, 0]), out.get(&[2, 2, 0])];
        assert_eq!(centre, [37.5, 62.5, 62.5, 37.5]);
        assert_eq!(centre.iter().sum::<f64>() / 4.0, 50.0);
        assert_eq!(out.get(&[0, 0, 0]), 0.0);
        assert_eq!(out.get(&[0, 3, 0]), 100.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = Tensor::random_uniform([6, 5, 2], 10.0, 20.0, &mut rng);
        let up = resize_bilinear(&r, 17, 13).unwrap();
        let (lo, hi) = r.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(up.data().iter().all(|&v| v >= lo && v <= hi));
        assert!(resize_bilinear(&r, 0, 3).is_err());
    }

    #[test]
    fn truncation_and_rgb() {
        let t = Tensor::vector(vec![3.7, 3.0, 255.9, 0.0, 300.0]).reshape([1, 5, 1]).unwrap();
        assert_eq!(quantize_truncate(&t).unwrap().data(), &[3.0, 3.0, 255.0, 0.0, 255.0]);
        assert!(quantize_truncate(&Tensor::vector(vec![-0.1])).is_err());
        assert!(quantize_truncate(&Tensor::vector(vec![f64::NAN])).is_err());

        let g = Tensor::new([1, 2, 1], vec![1.0, 2.0]).unwrap();
        let rgb = gray_to_rgb(&g).unwrap();
        assert_eq!(rgb.shape(), &[1, 2, 3]);
        assert_eq!(rgb.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn truncation_lowers_mean_by_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let field = Tensor::random_uniform([100, 100, 1], 0.0, 254.0, &mut rng);
        let shift = (quantize_truncate(&field).unwrap().sum() - field.sum()) / field.len() as f64;
        assert!((shift + 0.5).abs() < 0.02, "{shift}");
    }

    #[test]
    fn rotation_by_quarter_turn_matches_permutation() {
        let n = 5;
        let img = Tensor::new([n, n, 1], (0..n * n).map(|v| (v * v % 17) as f64).collect()).unwrap();
        let rot = Transform {
            rotation: std::f64::consts::FRAC_PI_2,
            ..Transform::IDENTITY
        };
        let out = rot.apply(&img).unwrap();
        for i in 0..n {
            for j in 0..n {
                // counter-clockwise: output (i, j) reads input (j, n-1-i)
                let expected = img.get(&[j, n - 1 - i, 0]);
                assert!((out.get(&[i, j, 0]) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn flip_and_shift() {
        let img = Tensor::new([2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = Transform { flip: true, ..Transform::IDENTITY }.apply(&img).unwrap();
        assert_eq!(f.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        let s = Transform { dx: 1.0, ..Transform::IDENTITY }.apply(&img).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
        let z = Transform { zoom: 0.0, ..Transform::IDENTITY };
        assert!(z.apply(&img).is_err());
    }

    #[test]
    fn augmentation_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::random_uniform([8, 8, 1], 0.0, 1.0, &mut rng);
        assert!(augment(&img, &AugmentConfig::NONE, &mut rng).unwrap().bit_eq(&img));
        let cfg = AugmentConfig {
            rotation_deg: 10.0,
            shift_frac: 0.1,
            zoom_frac: 0.1,
            flip: true,
        };
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&img));
        let bad = AugmentConfig { shift_frac: -0.1, ..cfg };
        assert!(augment(&img, &bad, &mut rng).is_err());
    }

    #[test]
    fn default_tta_plan() {
        let plan = tta_enumerate(&TtaConfig::default());
        plan.validate().unwrap();
        assert_eq!(plan.len(), 60);
        assert_eq!(plan.weights.iter().sum::<f64>(), 62.0);
        let ids: Vec<usize> = (0..plan.len()).filter(|&i| plan.transforms[i].is_identity()).collect();
        assert_eq!(ids.len(), 1);
        assert_eq!(plan.weights[ids[0]], 3.0);
        for (i, t) in plan.transforms.iter().enumerate() {
            assert!(!plan.transforms[..i].contains(t));
        }
        assert_eq!(plan, tta_enumerate(&TtaConfig::default()));
        assert_eq!(TtaPlan::from_toml(&plan.to_toml().unwrap()).unwrap(), plan);
    }

    #[test]
    fn tta_aggregation() {
        let plan = TtaPlan {
            transforms: vec![Transform::IDENTITY, Transform { flip: true, ..Transform::IDENTITY }],
            weights: vec![3.0, 1.0],
        };
        let logits = vec![0.3, -1.0, 2.0];
        let same = tta_aggregate(&[logits.clone(), logits.clone()], &plan).unwrap();
        for (a, b) in same.probabilities.iter().zip(softmax(&logits)) {
            assert!((a - b).abs() < 1e-15);
        }
        let mixed = tta_aggregate(&[vec![5.0, 0.0, 0.0], vec![0.0, 0.0, 50.0]], &plan).unwrap();
        assert_eq!(mixed.class, 0);
        assert!(tta_aggregate(&[logits], &plan).is_err());
        let zero = TtaPlan { weights: vec![0.0, 0.0], ..plan };
        assert!(tta_aggregate(&[vec![1.0], vec![1.0]], &zero).is_err());
        let single = tta_aggregate(&[vec![0.1, 0.9]], &TtaPlan::identity()).unwrap();
        assert_eq!(single.probabilities, softmax(&[0.1, 0.9]));
    }

    #[test]
    fn preprocess_is_deterministic() {
        let data = synthetic_fer([3, 1, 1], 8);
        let cfg = PreprocessConfig { size: 56, rgb: true };
        let a = prepare_split(&data.training, &cfg).unwrap();
        let b = prepare_split(&data.training, &cfg).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.images.shape(), &[3, 56, 56, 3]);
        assert!(a.images.data().iter().all(|v| v.fract() == 0.0 && (0.0..=255.0).contains(v)));
    }

    #[test]
    fn synthetic_samples_are_balanced() {
        let s = synthetic_samples(21, [4, 4, 1], 7, 0.1, 1);
        assert_eq!(s.len(), 21);
        assert!((0..7).all(|k| s.labels.iter().filter(|&&l| l == k).count() == 3));
        assert_eq!(s, synthetic_samples(21, [4, 4, 1], 7, 0.1, 1));
    }
}
