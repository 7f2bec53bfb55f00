//! CIFAR-10/100 binary ingestion, channel normalization, stratified
//! subsetting and a synthetic separable dataset for fast runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor3::Tensor3;

/// Per-channel (R, G, B) means used to normalize CIFAR images.
pub const CIFAR_MEANS: [f64; 3] = [0.4914, 0.4822, 0.4465];
/// Per-channel (R, G, B) standard deviations used to normalize CIFAR images.
pub const CIFAR_STDS: [f64; 3] = [0.2023, 0.1994, 0.2010];

/// Environment variable overriding the dataset directory.
pub const DATA_DIR_ENV: &str = "TADAF_DATA_DIR";

const SIDE: usize = 32;
const PIXELS: usize = SIDE * SIDE * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Cifar10,
    Cifar100,
}

impl Flavor {
    pub fn num_classes(self) -> usize {
        match self {
            Flavor::Cifar10 => 10,
            Flavor::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            Flavor::Cifar10 => 1,
            Flavor::Cifar100 => 2,
        }
    }

    pub fn record_size(self) -> usize {
        self.label_bytes() + PIXELS
    }

    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (Flavor::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (Flavor::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (Flavor::Cifar100, Split::Train) => vec!["train.bin"],
            (Flavor::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            Flavor::Cifar10 => "cifar-10-batches-bin",
            Flavor::Cifar100 => "cifar-100-binary",
        }
    }
}

impl std::str::FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Flavor::Cifar10),
            "cifar100" => Ok(Flavor::Cifar100),
            other => Err(Error::Config(format!("unknown dataset flavor `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled images, all `h x w x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor3>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor3>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {bad} with {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.dims().0, t.dims().1))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Mean of each channel over every pixel of every image.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        let mut count = 0usize;
        for img in &self.images {
            let plane = img.dims().0 * img.dims().1;
            for (c, sum) in sums.iter_mut().enumerate() {
                *sum += img.slice_data(c).iter().sum::<f64>();
            }
            count += plane;
        }
        sums.map(|s| s / count.max(1) as f64)
    }
}

/// Resolves the directory to read from: the environment override if set,
/// otherwise `dir`. Either may hold the batch files directly or inside the
/// canonical extracted subdirectory.
pub fn resolve_dir(dir: &Path, flavor: Flavor) -> PathBuf {
    let base = std::env::var_os(DATA_DIR_ENV).map_or_else(|| dir.to_path_buf(), PathBuf::from);
    let nested = base.join(flavor.subdir());
    if nested.is_dir() {
        nested
    } else {
        base
    }
}

/// Parses a CIFAR binary batch: per record, label byte(s) then 3072 pixel
/// bytes in channel-planar, row-major order. Pixels are scaled to `[0, 1]`
/// and left unnormalized.
pub fn parse_records(bytes: &[u8], flavor: Flavor) -> Result<(Vec<Tensor3>, Vec<usize>)> {
    let rec = flavor.record_size();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / rec);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for chunk in bytes.chunks_exact(rec) {
        // CIFAR-100 records carry (coarse, fine); the fine label is used.
        let label = usize::from(chunk[flavor.label_bytes() - 1]);
        if label >= flavor.num_classes() {
            return Err(Error::Format(format!("label {label} out of range")));
        }
        // The file's channel-planar order is exactly the 32x32x3 tensor layout.
        let data = chunk[flavor.label_bytes()..]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        images.push(Tensor3::from_vec(SIDE, SIDE, 3, data)?);
        labels.push(label);
    }
    Ok((images, labels))
}

/// Reads a split and normalizes it with [`CIFAR_MEANS`] / [`CIFAR_STDS`].
pub fn load_cifar(dir: &Path, flavor: Flavor, split: Split) -> Result<Dataset> {
    let root = resolve_dir(dir, flavor);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in flavor.files(split) {
        let path = root.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (imgs, labs) = parse_records(&bytes, flavor)?;
        for img in imgs {
            images.push(normalize(&img, &CIFAR_MEANS, &CIFAR_STDS)?);
        }
        labels.extend(labs);
    }
    Dataset::new(images, labels, flavor.num_classes(), split)
}

/// `out[i, j, c] = (img[i, j, c] - means[c]) / stds[c]`.
pub fn normalize(img: &Tensor3, means: &[f64; 3], stds: &[f64; 3]) -> Result<Tensor3> {
    if stds.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::Argument(format!("standard deviations must be positive: {stds:?}")));
    }
    per_channel(img, |c, v| (v - means[c]) / stds[c])
}

/// Inverse of [`normalize`].
pub fn denormalize(img: &Tensor3, means: &[f64; 3], stds: &[f64; 3]) -> Result<Tensor3> {
    per_channel(img, |c, v| v * stds[c] + means[c])
}

fn per_channel(img: &Tensor3, f: impl Fn(usize, f64) -> f64) -> Result<Tensor3> {
    let (m, n, p) = img.dims();
    if p != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {p}")));
    }
    let plane = m * n;
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| f(idx / plane, v))
        .collect();
    Tensor3::from_vec(m, n, p, data)
}

/// Deterministic stratified sample of `k` indices: every class contributes
/// `k / K` items, the first `k % K` classes (in a seeded order) one more.
/// Classes too small to meet their quota hand the shortfall to others.
pub fn subset_indices(d: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > d.len() {
        return Err(Error::Argument(format!("subset of {k} from {} items", d.len())));
    }
    if k < d.num_classes {
        return Err(Error::Argument(format!(
            "cannot stratify {k} items over {} classes",
            d.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes];
    for (i, &l) in d.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    let mut class_order: Vec<usize> = (0..d.num_classes).collect();
    class_order.shuffle(&mut rng);

    let base = k / d.num_classes;
    let extra = k % d.num_classes;
    let mut quota = vec![0usize; d.num_classes];
    for (rank, &c) in class_order.iter().enumerate() {
        quota[c] = (base + usize::from(rank < extra)).min(by_class[c].len());
    }
    let mut missing = k - quota.iter().sum::<usize>();
    while missing > 0 {
        for &c in &class_order {
            if missing > 0 && quota[c] < by_class[c].len() {
                quota[c] += 1;
                missing -= 1;
            }
        }
    }

    let mut picked: Vec<usize> = by_class
        .iter()
        .zip(&quota)
        .flat_map(|(pool, &q)| pool[..q].iter().copied())
        .collect();
    picked.shuffle(&mut rng);
    Ok(picked)
}

pub fn subset(d: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    Ok(d.select(&subset_indices(d, k, seed)?))
}

/// Writes one index per line.
pub fn write_indices(path: &Path, indices: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(indices.len() * 6);
    for i in indices {
        text.push_str(&i.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|e| Error::Format(format!("bad index `{l}`: {e}")))
        })
        .collect()
}

/// Noise level of [`synth_dataset`].
pub const SYNTH_NOISE: f64 = 0.25;

/// Frequency pairs `(a, b)` with `1 <= a, b <= side / 2`, in a fixed order.
fn synth_frequencies(side: usize) -> Vec<(usize, usize)> {
    let half = side / 2;
    let mut out = Vec::with_capacity(half * half);
    for s in 2..=2 * half {
        for a in 1..=half {
            if s > a && s - a >= 1 && s - a <= half {
                out.push((a, s - a));
            }
        }
    }
    out
}

/// Class templates: template `k` is `cos(2 pi (a i + b j) / side + 2 pi c / 3)`
/// for the `k`-th frequency pair. Distinct pairs are mutually orthogonal.
pub fn synth_templates(classes: usize, side: usize) -> Result<Vec<Tensor3>> {
    let freqs = synth_frequencies(side);
    if classes < 2 || classes > freqs.len() {
        return Err(Error::Argument(format!(
            "{classes} classes on {side}x{side} images (need 2..={})",
            freqs.len()
        )));
    }
    Ok(freqs[..classes]
        .iter()
        .map(|&(a, b)| {
            Tensor3::from_fn(side, side, 3, |i, j, c| {
                let phase = 2.0 * std::f64::consts::PI
                    * (((a * i + b * j) as f64) / side as f64 + c as f64 / 3.0);
                phase.cos()
            })
        })
        .collect())
}

/// `per_class` noisy copies (Gaussian, sd [`SYNTH_NOISE`]) of each class
/// template, ordered class by class.
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    dims: (usize, usize),
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    synth_dataset_with_noise(classes, per_class, dims, seed, split, SYNTH_NOISE)
}

pub fn synth_dataset_with_noise(
    classes: usize,
    per_class: usize,
    dims: (usize, usize),
    seed: u64,
    split: Split,
    noise: f64,
) -> Result<Dataset> {
    let (m, n) = dims;
    if m != n {
        return Err(Error::Argument(format!("synthetic images must be square, got {m}x{n}")));
    }
    let templates = synth_templates(classes, m)?;
    let normal = Normal::new(0.0, noise)
        .map_err(|e| Error::Argument(format!("noise level {noise}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (k, t) in templates.iter().enumerate() {
        for _ in 0..per_class {
            let data = t.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
            images.push(Tensor3::from_vec(m, n, 3, data)?);
            labels.push(k);
        }
    }
    Dataset::new(images, labels, classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record10(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, PIXELS));
        r
    }

    #[test]
    fn zero_pixels_normalize_to_negative_ratios() {
        let (imgs, labels) = parse_records(&record10(3, 0), Flavor::Cifar10).unwrap();
        assert_eq!(labels, vec![3]);
        let img = normalize(&imgs[0], &CIFAR_MEANS, &CIFAR_STDS).unwrap();
        for c in 0..3 {
            let want = -CIFAR_MEANS[c] / CIFAR_STDS[c];
            assert!(img.slice_data(c).iter().all(|&v| v == want));
        }
        assert!((img.get(0, 0, 0) - (-0.4914 / 0.2023)).abs() < 1e-15);
    }

    #[test]
    fn pixel_layout_is_channel_planar() {
        let mut r = vec![7u8];
        r.extend((0..PIXELS).map(|i| (i % 251) as u8));
        let (imgs, _) = parse_records(&r, Flavor::Cifar10).unwrap();
        let img = &imgs[0];
        // Byte index c*1024 + i*32 + j holds pixel (row i, col j, channel c).
        for (i, j, c) in [(0, 1, 0), (5, 7, 1), (31, 31, 2)] {
            let byte = ((c * 1024 + i * 32 + j) % 251) as f64;
            assert_eq!(img.get(i, j, c), byte / 255.0);
        }
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut r = vec![4u8, 77u8];
        r.extend(std::iter::repeat_n(0u8, PIXELS));
        let (_, labels) = parse_records(&r, Flavor::Cifar100).unwrap();
        assert_eq!(labels, vec![77]);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        assert!(matches!(
            parse_records(&vec![0u8; PIXELS], Flavor::Cifar10),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let img = Tensor3::from_fn(4, 4, 3, |i, j, c| (i + 2 * j + c) as f64 / 10.0);
        assert_eq!(normalize(&img, &[0.0; 3], &[1.0; 3]).unwrap(), img);

        let at_means = Tensor3::from_fn(2, 2, 3, |_, _, c| CIFAR_MEANS[c]);
        let z = normalize(&at_means, &CIFAR_MEANS, &CIFAR_STDS).unwrap();
        assert_eq!(z.max_abs(), 0.0);

        let ones = Tensor3::ones(1, 1, 3);
        let r = normalize(&ones, &CIFAR_MEANS, &CIFAR_STDS).unwrap().get(0, 0, 0);
        assert!((r - 2.5141).abs() < 1e-4);

        assert!(matches!(
            normalize(&img, &[0.0; 3], &[1.0, 0.0, 1.0]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn normalize_round_trip() {
        let img = Tensor3::from_fn(5, 5, 3, |i, j, c| ((i * 13 + j * 7 + c) % 256) as f64 / 255.0);
        let back = denormalize(
            &normalize(&img, &CIFAR_MEANS, &CIFAR_STDS).unwrap(),
            &CIFAR_MEANS,
            &CIFAR_STDS,
        )
        .unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    fn labelled(counts: &[usize]) -> Dataset {
        let mut labels = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c, n));
        }
        let images = labels.iter().map(|_| Tensor3::zeros(1, 1, 3)).collect();
        Dataset::new(images, labels, counts.len(), Split::Train).unwrap()
    }

    #[test]
    fn subset_is_stratified_and_deterministic() {
        let d = labelled(&[500; 10]);
        let s = subset(&d, 1000, 7).unwrap();
        assert_eq!(s.class_counts(), vec![100; 10]);

        let odd = subset(&d, 1003, 7).unwrap();
        let counts = odd.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 1003);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);

        assert_eq!(subset_indices(&d, 1000, 7).unwrap(), subset_indices(&d, 1000, 7).unwrap());
        assert_ne!(subset_indices(&d, 1000, 7).unwrap(), subset_indices(&d, 1000, 8).unwrap());

        let mut all = subset_indices(&d, d.len(), 1).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
    }

    #[test]
    fn subset_errors() {
        let d = labelled(&[5; 4]);
        assert!(matches!(subset(&d, 3, 0), Err(Error::Argument(_))));
        assert!(matches!(subset(&d, 21, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn indices_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.txt");
        write_indices(&path, &[3, 1, 4, 1, 5]).unwrap();
        assert_eq!(read_indices(&path).unwrap(), vec![3, 1, 4, 1, 5]);
    }

    #[test]
    fn synth_balanced_and_orthogonal() {
        let d = synth_dataset(2, 10, (8, 8), 0, Split::Train).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.class_counts(), vec![10, 10]);

        let t = synth_templates(6, 8).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let dot: f64 = t[a].data().iter().zip(t[b].data()).map(|(x, y)| x * y).sum();
                if a == b {
                    assert!(dot > 1.0);
                } else {
                    assert!(dot.abs() < 1e-9, "templates {a},{b}: {dot}");
                }
            }
        }
        assert!(synth_dataset(2, 1, (8, 6), 0, Split::Train).is_err());
        assert!(synth_dataset(1, 1, (8, 8), 0, Split::Train).is_err());
    }
}
