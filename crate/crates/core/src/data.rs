//! Image classification datasets.
//!
//! File layout: `u64` little-endian header length, a JSON header, the images
//! as little-endian `f32` in `[N, C, H, W]` order, then one little-endian
//! `u16` label per image.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "splitvit-dataset";
const FORMAT_VERSION: u32 = 1;

/// Disjoint index sets covering a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<u16>,
    pub classes: usize,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.images.ndim() != 4 || self.images.shape()[0] != n {
            return Err(Error::shape(
                "dataset",
                format!("{:?} images for {n} labels", self.images.shape()),
            ));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y as usize >= self.classes) {
            return Err(Error::contract(format!("label {y} outside {} classes", self.classes)));
        }
        let mut seen = vec![false; n];
        for &i in self.split.train.iter().chain(&self.split.val).chain(&self.split.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::contract(format!("split index {i} repeated or out of range")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("split does not cover every sample"));
        }
        Ok(())
    }

    /// Images `[b, C, H, W]` and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.images.len() / self.len().max(1);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let (c, h, w) = self.image_dims();
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("non-empty batch");
        (images, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let (channels, height, width) = self.image_dims();
        let header = serde_json::to_vec(&Header {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            count: self.len(),
            channels,
            height,
            width,
            classes: self.classes,
            split: self.split.clone(),
        })?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(&(header.len() as u64).to_le_bytes())?;
        put(&header)?;
        for &v in self.images.data() {
            put(&(v as f32).to_le_bytes())?;
        }
        for &y in &self.labels {
            put(&y.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut read = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            Ok(buf)
        };
        let len = u64::from_le_bytes(read(8)?.try_into().expect("eight bytes"));
        if len > 1 << 32 {
            return Err(Error::Config(format!("{}: implausible header length {len}", path.display())));
        }
        let header: Header = serde_json::from_slice(&read(len as usize)?)?;
        if header.format != FORMAT || header.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: not a version {FORMAT_VERSION} dataset file",
                path.display()
            )));
        }
        let values = header.count * header.channels * header.height * header.width;
        let images: Vec<f64> = read(values * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
            .collect();
        let labels = read(header.count * 2)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("two bytes")))
            .collect();
        let ds = Dataset {
            images: Tensor::new(
                vec![header.count, header.channels, header.height, header.width],
                images,
            )?,
            labels,
            classes: header.classes,
            split: header.split,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Class-conditional patch textures.
///
/// Every class owns a fixed Gaussian texture on `signal_patches` randomly
/// placed patches. A sample shows its class texture at a random amplitude
/// in `[0.75, 1.25]`, fresh Gaussian textures of strength `clutter` on the
/// remaining patches, and pixel noise of standard deviation `noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub signal_patches: usize,
    pub clutter: f64,
    pub noise: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            samples_per_class: 250,
            channels: 3,
            height: 32,
            width: 32,
            patch: 8,
            signal_patches: 4,
            clutter: 1.0,
            noise: 1.5,
            val_fraction: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-class texture on its chosen patches, laid out as full images.
pub fn class_templates(spec: &SyntheticSpec) -> Result<Vec<Tensor>> {
    check_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = (spec.height / spec.patch, spec.width / spec.patch);
    let patches = grid.0 * grid.1;
    Ok((0..spec.classes)
        .map(|_| {
            let mut order: Vec<usize> = (0..patches).collect();
            order.shuffle(&mut rng);
            let mut t = Tensor::zeros(&[spec.channels, spec.height, spec.width]);
            for &p in &order[..spec.signal_patches] {
                for_patch(spec, grid, p, |i| t.data_mut()[i] = normal(&mut rng));
            }
            t
        })
        .collect())
}

fn for_patch(spec: &SyntheticSpec, grid: (usize, usize), p: usize, mut f: impl FnMut(usize)) {
    let (py, px) = (p / grid.1, p % grid.1);
    for c in 0..spec.channels {
        for y in py * spec.patch..(py + 1) * spec.patch {
            for x in px * spec.patch..(px + 1) * spec.patch {
                f((c * spec.height + y) * spec.width + x);
            }
        }
    }
}

fn check_spec(spec: &SyntheticSpec) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
    if spec.classes == 0 || spec.classes > u16::MAX as usize + 1 {
        return bad("class count out of range");
    }
    if spec.samples_per_class == 0 || spec.channels == 0 || spec.patch == 0 {
        return bad("sizes must be positive");
    }
    if !spec.height.is_multiple_of(spec.patch) || !spec.width.is_multiple_of(spec.patch) || spec.height == 0 || spec.width == 0 {
        return bad("image sides must be positive multiples of the patch size");
    }
    if spec.signal_patches == 0 || spec.signal_patches > (spec.height / spec.patch) * (spec.width / spec.patch) {
        return bad("signal patch count out of range");
    }
    let fractions_ok = spec.val_fraction >= 0.0 && spec.test_fraction >= 0.0 && spec.val_fraction + spec.test_fraction < 1.0;
    if !fractions_ok {
        return bad("validation and test fractions must leave training samples");
    }
    Ok(())
}

/// Deterministic synthetic dataset with a per-class stratified split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let templates = class_templates(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let grid = (spec.height / spec.patch, spec.width / spec.patch);
    let per = spec.channels * spec.height * spec.width;
    let total = spec.classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(total * per);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % spec.classes;
        let template = &templates[class];
        let amplitude = 0.75 + 0.5 * rand::Rng::random::<f64>(&mut rng);
        let mut img: Vec<f64> = template.data().iter().map(|&t| amplitude * t).collect();
        for p in 0..grid.0 * grid.1 {
            let mut signal = false;
            for_patch(spec, grid, p, |j| signal |= template.data()[j] != 0.0);
            if !signal {
                for_patch(spec, grid, p, |j| img[j] = spec.clutter * normal(&mut rng));
            }
        }
        images.extend(img.into_iter().map(|v| (v + spec.noise * normal(&mut rng)) as f32 as f64));
        labels.push(class as u16);
    }
    let mut split = Split::default();
    let n_val = (spec.samples_per_class as f64 * spec.val_fraction).round() as usize;
    let n_test = (spec.samples_per_class as f64 * spec.test_fraction).round() as usize;
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2));
    for class in 0..spec.classes {
        let mut members: Vec<usize> = (class..total).step_by(spec.classes).collect();
        members.shuffle(&mut split_rng);
        split.test.extend(&members[..n_test]);
        split.val.extend(&members[n_test..n_test + n_val]);
        split.train.extend(&members[n_test + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    let ds = Dataset {
        images: Tensor::new(vec![total, spec.channels, spec.height, spec.width], images)?,
        labels,
        classes: spec.classes,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            samples_per_class: 10,
            channels: 1,
            height: 8,
            width: 8,
            patch: 4,
            signal_patches: 2,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        let other = SyntheticSpec { seed: 5, ..small() };
        assert_ne!(generate_synthetic(&small()).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn templates_differ() {
        let t = class_templates(&SyntheticSpec::default()).unwrap();
        for i in 0..t.len() {
            for j in 0..i {
                assert!(t[i].max_abs_diff(&t[j]) > 0.0);
            }
        }
    }

    #[test]
    fn split_is_stratified_and_exhaustive() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.split.test.len(), 6);
        assert_eq!(ds.split.val.len(), 3);
        assert_eq!(ds.split.train.len(), 21);
        for class in 0..3u16 {
            let in_test = ds.split.test.iter().filter(|&&i| ds.labels[i] == class).count();
            assert_eq!(in_test, 2);
        }
    }

    #[test]
    fn file_round_trip() {
        let ds = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn rejects_overlapping_split() {
        let mut ds = generate_synthetic(&small()).unwrap();
        let dup = ds.split.train[0];
        ds.split.test.push(dup);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn batch_gathers_rows() {
        let ds = generate_synthetic(&small()).unwrap();
        let (x, y) = ds.batch(&[3, 0]);
        assert_eq!(x.shape(), &[2, 1, 8, 8]);
        assert_eq!(y, vec![0, 0]);
        assert_eq!(&x.data()[..64], &ds.images.data()[3 * 64..4 * 64]);
    }
}
