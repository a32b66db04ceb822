//! Datasets, random-label assignment, IDX ingestion and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::InputShape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[count, ...sample shape]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Present on training data once assigned; fixed for the lifetime of a run.
    pub rnd_labels: Option<Vec<usize>>,
    pub split: Split,
    pub classes: usize,
    pub shape: InputShape,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, shape: InputShape, split: Split) -> Result<Self> {
        let count = inputs.shape().first().copied().unwrap_or(0);
        if count != labels.len() {
            return Err(Error::Validation(format!("{count} inputs but {} labels", labels.len())));
        }
        if inputs.shape()[1..] != shape.dims()[..] {
            return Err(Error::Validation(format!("inputs {:?} do not match sample shape {:?}", inputs.shape(), shape.dims())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("class label {bad} out of range for {classes} classes")));
        }
        Ok(Self { inputs, labels, rnd_labels: None, split, classes, shape })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn with_rnd_labels(mut self, rnd: Vec<usize>) -> Result<Self> {
        if self.split == Split::Test {
            return Err(Error::Validation("random labels belong to the training split only".into()));
        }
        if rnd.len() != self.len() {
            return Err(Error::Validation(format!("{} random labels for {} samples", rnd.len(), self.len())));
        }
        self.rnd_labels = Some(rnd);
        Ok(self)
    }

    /// Inputs, class labels and (if assigned) random labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>, Option<Vec<usize>>) {
        let x = self.inputs.select_rows(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        let s = self.rnd_labels.as_ref().map(|r| indices.iter().map(|&i| r[i]).collect());
        (x, y, s)
    }
}

/// Gaussian class clusters: one mean per class, drawn with per-coordinate
/// standard deviation `mean_scale`; samples add isotropic noise of `std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shape: InputShape,
    pub std: f64,
    #[serde(default = "default_mean_scale")]
    pub mean_scale: f64,
    pub seed: u64,
}

fn default_mean_scale() -> f64 {
    1.0
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("dataset.classes", "need at least 2 classes"));
        }
        if !(self.std > 0.0) {
            return Err(Error::config("dataset.std", format!("cluster std {} must be > 0", self.std)));
        }
        if !(self.mean_scale > 0.0) {
            return Err(Error::config("dataset.mean_scale", "mean scale must be > 0"));
        }
        if self.train_per_class == 0 {
            return Err(Error::config("dataset.train_per_class", "need at least one training sample per class"));
        }
        Ok(())
    }
}

/// Draws disjoint train and test sets from the same class means.
pub fn gen_blobs(spec: &BlobSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.shape.size();
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..dim).map(|_| spec.mean_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>())
        .collect();
    let mut draw = |per_class: usize, split: Split| -> Result<Dataset> {
        let mut data = Vec::with_capacity(per_class * spec.classes * dim);
        let mut labels = Vec::with_capacity(per_class * spec.classes);
        for _ in 0..per_class {
            for (c, mean) in means.iter().enumerate() {
                data.extend(mean.iter().map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.std * z
                }));
                labels.push(c);
            }
        }
        let mut shape = vec![labels.len()];
        shape.extend(spec.shape.dims());
        Dataset::new(Tensor::new(shape, data)?, labels, spec.classes, spec.shape, split)
    };
    let train = draw(spec.train_per_class, Split::Train)?;
    let test = draw(spec.test_per_class, Split::Test)?;
    Ok((train, test))
}

/// I.i.d. uniform labels over `0..n`.
pub fn assign_rnd_labels<R: Rng + ?Sized>(count: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::config("rnd_labels", format!("need at least 2 random labels, got {n}")));
    }
    Ok((0..count).map(|_| rng.random_range(0..n)).collect())
}

/// Shuffled sample indices split into consecutive batches; the final batch may be short.
pub fn batches<R: Rng + ?Sized>(len: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// On-disk record of a run's random labels: `labels[i]` is the label of training sample `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RndLabelFile {
    pub n: usize,
    pub labels: Vec<usize>,
}

impl RndLabelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if let Some(&bad) = file.labels.iter().find(|&&l| l >= file.n) {
            return Err(Error::Validation(format!("random label {bad} out of range for n = {}", file.n)));
        }
        Ok(file)
    }
}

/// A decoded IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_UBYTE: u8 = 0x08;

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let fmt = |offset: usize, message: String| Error::Format { offset, message };
    if bytes.len() < 4 {
        return Err(fmt(bytes.len(), format!("file too short for an IDX header ({} bytes)", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt(0, format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(fmt(2, format!("unsupported element type 0x{:02x}; only unsigned bytes are read", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(fmt(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(fmt(bytes.len(), format!("truncated header: need {header} bytes")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let end = header + count;
    if bytes.len() < end {
        return Err(fmt(bytes.len(), format!("truncated payload: dims {dims:?} need {count} bytes after offset {header}")));
    }
    if bytes.len() > end {
        return Err(fmt(end, format!("{} trailing bytes", bytes.len() - end)));
    }
    Ok(IdxArray { dims, data: bytes[header..end].to_vec() })
}

pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    let count: usize = array.dims.iter().product();
    if count != array.data.len() || array.dims.is_empty() || array.dims.len() > 255 {
        return Err(Error::Validation(format!("dims {:?} do not describe {} bytes", array.dims, array.data.len())));
    }
    let mut out = vec![0, 0, IDX_UBYTE, array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::Validation(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?)
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(array)?)?;
    Ok(())
}

/// Builds a dataset from an image file (magic `0x00000803`, or `0x00000804` for multi-channel)
/// and a label file (magic `0x00000801`). Pixels are scaled to `[0, 1]`.
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray, classes: usize, split: Split) -> Result<Dataset> {
    let (count, shape) = match images.dims[..] {
        [n, h, w] => (n, InputShape::Image { channels: 1, height: h, width: w }),
        [n, c, h, w] => (n, InputShape::Image { channels: c, height: h, width: w }),
        _ => return Err(Error::Format { offset: 3, message: format!("image file must have 3 or 4 dimensions, has {}", images.dims.len()) }),
    };
    if labels.dims.len() != 1 {
        return Err(Error::Format { offset: 3, message: format!("label file must have 1 dimension, has {}", labels.dims.len()) });
    }
    if labels.dims[0] != count {
        return Err(Error::Validation(format!("{count} images but {} labels", labels.dims[0])));
    }
    let y: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!("label {bad} ≥ class count {classes}")));
    }
    let mut tshape = vec![count];
    tshape.extend(shape.dims());
    let x = Tensor::new(tshape, images.data.iter().map(|&b| b as f64 / 255.0).collect())?;
    Dataset::new(x, y, classes, shape, split)
}

pub fn load_idx_dataset(images: &Path, labels: &Path, classes: usize, split: Split) -> Result<Dataset> {
    dataset_from_idx(&read_idx(images)?, &read_idx(labels)?, classes, split)
}
