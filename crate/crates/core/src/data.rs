//! Datasets: synthetic nuisance blobs, IDX image files, train-split
//! normalization and image augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[N, feature shape..]`
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Shape of one input.
    pub fn feature_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels of the rows in `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let width: usize = self.feature_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("row {i} out of {}", self.len())));
            }
            data.extend_from_slice(&self.inputs.data()[i * width..(i + 1) * width]);
            labels.push(self.labels[i]);
        }
        let shape: Vec<usize> = std::iter::once(indices.len())
            .chain(self.feature_shape().iter().copied())
            .collect();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The same rows with labels replaced.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.inputs.clone(), labels, self.classes, self.split)
    }
}

/// Per-channel mean and standard deviation of a training split. Flat inputs
/// treat every feature as a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channel count and the length of each channel's contiguous block.
fn channel_layout(feature_shape: &[usize]) -> (usize, usize) {
    match feature_shape {
        [c, rest @ ..] if !rest.is_empty() => (*c, rest.iter().product()),
        _ => (feature_shape.iter().product(), 1),
    }
}

impl Normalization {
    pub const MEAN: &'static str = "data.mean";
    pub const STD: &'static str = "data.std";

    /// Fits on a training split. A constant channel gets standard deviation 1.
    pub fn fit(train: &LabeledDataset) -> Result<Self> {
        if train.split != Split::Train {
            return Err(Error::Data(
                "normalization must be fitted on the training split".into(),
            ));
        }
        let (channels, block) = channel_layout(train.feature_shape());
        let count = (train.len() * block) as f64;
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for_each_channel(&train.inputs, channels, block, |c, x| mean[c] += x);
        mean.iter_mut().for_each(|m| *m /= count);
        for_each_channel(&train.inputs, channels, block, |c, x| {
            sq[c] += (x - mean[c]).powi(2)
        });
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, dataset: &LabeledDataset) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            inputs: self.apply_tensor(&dataset.inputs)?,
            ..dataset.clone()
        })
    }

    /// Normalizes a batch `[N, feature shape..]`.
    pub fn apply_tensor(&self, inputs: &Tensor) -> Result<Tensor> {
        let (channels, block) = channel_layout(&inputs.shape()[1..]);
        if channels != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                lhs: inputs.shape().to_vec(),
                rhs: vec![self.mean.len()],
            });
        }
        let mut out = inputs.clone();
        for (k, x) in out.data_mut().iter_mut().enumerate() {
            let c = (k / block) % channels;
            *x = (*x - self.mean[c]) / self.std[c];
        }
        Ok(out)
    }

    pub fn to_entries(&self) -> Result<Vec<(String, Tensor)>> {
        Ok(vec![
            (Self::MEAN.to_string(), Tensor::vector(self.mean.clone())?),
            (Self::STD.to_string(), Tensor::vector(self.std.clone())?),
        ])
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))
        };
        let (mean, std) = (get(Self::MEAN)?, get(Self::STD)?);
        if mean.len() != std.len() {
            return Err(Error::Checkpoint(
                "normalization statistics disagree in length".into(),
            ));
        }
        Ok(Self { mean, std })
    }
}

fn for_each_channel(inputs: &Tensor, channels: usize, block: usize, mut f: impl FnMut(usize, f64)) {
    for (k, &x) in inputs.data().iter().enumerate() {
        f((k / block) % channels, x);
    }
}

/// Gaussian class blobs in a few informative dimensions, padded with
/// class-independent unit-variance nuisance dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub informative: usize,
    pub nuisance: usize,
    /// Standard deviation around each class center.
    pub noise: f64,
    pub train: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Class centers at pairwise distance 2: a regular simplex when it fits in
/// the informative subspace, otherwise a regular polygon (or evenly spaced
/// points on a line).
fn blob_centers(classes: usize, dims: usize) -> Vec<Vec<f64>> {
    let k = classes as f64;
    (0..classes)
        .map(|c| {
            let mut center = vec![0.0; dims];
            if classes <= dims {
                for (j, x) in center.iter_mut().enumerate().take(classes) {
                    let e = if j == c { 1.0 } else { 0.0 };
                    *x = std::f64::consts::SQRT_2 * (e - 1.0 / k);
                }
            } else if dims >= 2 {
                let radius = 1.0 / (std::f64::consts::PI / k).sin();
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k;
                center[0] = radius * angle.cos();
                center[1] = radius * angle.sin();
            } else {
                center[0] = 2.0 * c as f64 - (k - 1.0);
            }
            center
        })
        .collect()
}

/// Draws `count` blob samples; label of row `i` is `i mod classes`. The
/// train and test splits use separate streams of the same seed.
pub fn synth_nuisance_blobs(spec: &BlobSpec, split: Split) -> Result<LabeledDataset> {
    if spec.classes < 2 || spec.informative == 0 {
        return Err(Error::Config(format!(
            "blobs need at least 2 classes and 1 informative dimension, got {} and {}",
            spec.classes, spec.informative
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!(
            "blob noise must be non-negative, got {}",
            spec.noise
        )));
    }
    let count = match split {
        Split::Train => spec.train,
        Split::Test => spec.test,
    };
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split as u64);
    let centers = blob_centers(spec.classes, spec.informative);
    let width = spec.informative + spec.nuisance;
    let mut data = Vec::with_capacity(count * width);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let c = i % spec.classes;
        for &mu in &centers[c] {
            data.push(mu + spec.noise * rng.sample::<f64, _>(StandardNormal));
        }
        for _ in 0..spec.nuisance {
            data.push(rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(c);
    }
    LabeledDataset::new(
        Tensor::new([count, width], data)?,
        labels,
        spec.classes,
        split,
    )
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_header(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, usize)> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::Data(format!(
            "{what}: bad magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (1..=rank)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 4 * (rank + 1);
    let expected = dims.iter().product::<usize>();
    if bytes.len() - offset != expected {
        return Err(Error::Data(format!(
            "{what}: header promises {expected} bytes, file holds {}",
            bytes.len() - offset
        )));
    }
    Ok((dims, offset))
}

/// Reads an IDX image file (`[N, rows, cols]` unsigned bytes) and its label
/// file. Pixels are scaled to `[0, 1]`; images become `[N, 1, rows, cols]`.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    limit: Option<usize>,
    split: Split,
) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images)?;
    let label_bytes = fs::read(labels)?;
    let (dims, image_offset) = idx_header(&image_bytes, IDX_IMAGES, "images")?;
    let (label_dims, label_offset) = idx_header(&label_bytes, IDX_LABELS, "labels")?;
    if dims[0] != label_dims[0] {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            dims[0], label_dims[0]
        )));
    }
    let n = limit.map_or(dims[0], |l| l.min(dims[0]));
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (rows, cols) = (dims[1], dims[2]);
    let pixels = image_bytes[image_offset..image_offset + n * rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[label_offset..label_offset + n]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledDataset::new(
        Tensor::new([n, 1, rows, cols], pixels)?,
        labels,
        classes,
        split,
    )
}

pub fn write_idx_images(
    path: impl AsRef<Path>,
    count: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(Error::Data(format!(
            "{} pixels for {count}×{rows}×{cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IDX_IMAGES, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Zero-pads each image by `pad`, takes a uniformly placed window of extent
/// `crop = [height, width]` and mirrors it horizontally with probability
/// `hflip_prob`.
pub fn augment<R: Rng + ?Sized>(
    batch: &Tensor,
    pad: usize,
    crop: [usize; 2],
    hflip_prob: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let &[n, c, h, w] = batch.shape() else {
        return Err(Error::InvalidShape {
            shape: batch.shape().to_vec(),
            reason: "augmentation needs [N, C, H, W] images".into(),
        });
    };
    let [crop_h, crop_w] = crop;
    if crop_h == 0 || crop_w == 0 || crop_h > h + 2 * pad || crop_w > w + 2 * pad {
        return Err(Error::Data(format!(
            "crop {crop_h}×{crop_w} does not fit a {h}×{w} image padded by {pad}"
        )));
    }
    if !(0.0..=1.0).contains(&hflip_prob) {
        return Err(Error::Data(format!(
            "flip probability {hflip_prob} outside [0, 1]"
        )));
    }
    let src = batch.data();
    let mut out = vec![0.0; n * c * crop_h * crop_w];
    for i in 0..n {
        let top = rng.random_range(0..=h + 2 * pad - crop_h);
        let left = rng.random_range(0..=w + 2 * pad - crop_w);
        let flip = hflip_prob > 0.0 && rng.random_bool(hflip_prob);
        for ch in 0..c {
            for r in 0..crop_h {
                let Some(sr) = (top + r).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for col in 0..crop_w {
                    let Some(sc) = (left + col).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    let dc = if flip { crop_w - 1 - col } else { col };
                    out[((i * c + ch) * crop_h + r) * crop_w + dc] =
                        src[((i * c + ch) * h + sr) * w + sc];
                }
            }
        }
    }
    Tensor::new([n, c, crop_h, crop_w], out)
}

/// Image augmentation applied to each training batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub pad: usize,
    #[serde(default)]
    pub hflip_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Blobs(BlobSpec),
    Idx(IdxSpec),
}

impl DataSpec {
    /// Raw (unnormalized) train and test splits.
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DataSpec::Blobs(spec) => Ok((
                synth_nuisance_blobs(spec, Split::Train)?,
                synth_nuisance_blobs(spec, Split::Test)?,
            )),
            DataSpec::Idx(spec) => {
                let train = load_idx(
                    &spec.train_images,
                    &spec.train_labels,
                    spec.limit,
                    Split::Train,
                )?;
                let test = load_idx(&spec.test_images, &spec.test_labels, None, Split::Test)?;
                let classes = train.classes.max(test.classes);
                Ok((
                    LabeledDataset { classes, ..train },
                    LabeledDataset { classes, ..test },
                ))
            }
        }
    }

    pub fn augmentation(&self) -> Option<&AugmentSpec> {
        match self {
            DataSpec::Idx(spec) => spec.augment.as_ref(),
            DataSpec::Blobs(_) => None,
        }
    }
}
