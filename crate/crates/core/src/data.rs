//! Image datasets: CIFAR-10 binary batches, the raw tensor format and a
//! synthetic oriented-grating task.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::atomic_write;
use crate::error::{Error, Result};
use crate::gating::SeededRng;
use crate::tensor::Tensor;

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const RAW_MAGIC: &[u8; 8] = b"HIAPDS1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Cifar10Binary,
    RawTensor,
}

/// Images stored as one flat `[n, C, H, W]` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= num_classes) {
            Some(&label) => Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Stacks the given samples into `[b, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor::new([indices.len(), self.channels, self.height, self.width], data).expect("consistent sizes");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (t, labels) = self.batch(indices);
        Dataset {
            images: t.into_data(),
            labels,
            ..*self
        }
    }

    /// Keeps only samples of `classes`, relabelled to their position in the
    /// list.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut out = self.select(&keep);
        for y in &mut out.labels {
            *y = classes.iter().position(|c| c == y).expect("filtered");
        }
        out
    }

    /// Deterministic split into `(train, held_out)` with `fraction` held out.
    pub fn split(&self, fraction: f64, rng: &mut SeededRng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let held = ((self.len() as f64) * fraction).round() as usize;
        let (a, b) = idx.split_at(held);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        (self.select(&b), self.select(&a))
    }

    pub fn take_first(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

fn cifar_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(path, "directory holds no .bin batches"));
    }
    Ok(files)
}

/// Reads CIFAR-10 binary batches: 3073-byte records of one label byte and
/// 3072 channel-planar pixel bytes. Pixels are normalized per channel.
///
/// `path` may be a single batch file or a directory of `*.bin` batches.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for file in cifar_files(path)? {
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                &file,
                format!("truncated: {} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::format(&file, format!("record {r}: label {label} is not a CIFAR-10 class")));
            }
            labels.push(label);
            for (c, px) in rec[1..].chunks_exact(plane).enumerate() {
                images.extend(px.iter().map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
            }
        }
    }
    Ok(Dataset {
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        images,
        labels,
    })
}

/// Serializes a dataset to the raw tensor format.
pub fn encode_raw_tensor(ds: &Dataset) -> Result<Vec<u8>> {
    let u32_of = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::invalid(what, "exceeds u32"));
    let mut out = Vec::with_capacity(24 + ds.images.len() * 4 + ds.len() * 2);
    out.extend_from_slice(RAW_MAGIC);
    for (v, what) in [(ds.len(), "count"), (ds.channels, "channels"), (ds.height, "height"), (ds.width, "width")] {
        out.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
    }
    for v in &ds.images {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        let y = u16::try_from(y).map_err(|_| Error::invalid("labels", format!("{y} exceeds u16")))?;
        out.extend_from_slice(&y.to_le_bytes());
    }
    Ok(out)
}

pub fn write_raw_tensor(path: &Path, ds: &Dataset) -> Result<()> {
    atomic_write(path, &encode_raw_tensor(ds)?)
}

pub fn load_raw_tensor(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..8] != RAW_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (count, channels, height, width) = (word(0), word(1), word(2), word(3));
    let pixels = count * channels * height * width;
    let need = 24 + pixels * 4 + count * 2;
    if bytes.len() != need {
        return Err(Error::format(
            path,
            format!("truncated: expected {need} bytes, found {}", bytes.len()),
        ));
    }
    let images = bytes[24..24 + pixels * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = bytes[24 + pixels * 4..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")) as usize)
        .collect();
    Ok(Dataset {
        channels,
        height,
        width,
        images,
        labels,
    })
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Cifar10Binary => load_cifar10_binary(path),
        DataFormat::RawTensor => load_raw_tensor(path),
    }
}

/// Two-class task: a faint sinusoidal grating, horizontal for class 0 and
/// vertical for class 1, with random frequency, phase, colour and heavy
/// pixel noise. Pixels are roughly zero-mean, unit-variance.
pub fn synthetic_gratings(n: usize, channels: usize, side: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = SeededRng::new(seed);
    let gauss = Normal::new(0.0, noise).expect("valid std");
    let mut images = Vec::with_capacity(n * channels * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let freq = rng.random_range(1.5..4.5) * std::f64::consts::TAU / side as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.5..1.0);
        let colour: Vec<f64> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in 0..channels {
            for y in 0..side {
                for x in 0..side {
                    let t = if label == 0 { y } else { x } as f64;
                    let v = amp * (freq * t + phase).sin() * (0.5 + 0.5 * colour[c].abs()) + 0.3 * colour[c];
                    images.push((v + gauss.sample(&mut rng)) as f32);
                }
            }
        }
        labels.push(label);
    }
    Dataset {
        channels,
        height: side,
        width: side,
        images,
        labels,
    }
}

/// Random horizontal flip and a random crop from a zero-padded copy.
pub fn augment(image: &mut [f32], channels: usize, side: usize, pad: usize, rng: &mut SeededRng) {
    let flip = rng.random_bool(0.5);
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    if !flip && dx == 0 && dy == 0 {
        return;
    }
    let src = image.to_vec();
    let s = side as isize;
    for c in 0..channels {
        let plane = &src[c * side * side..(c + 1) * side * side];
        for y in 0..s {
            for x in 0..s {
                let sx = if flip { s - 1 - x } else { x } + dx;
                let sy = y + dy;
                let v = if (0..s).contains(&sx) && (0..s).contains(&sy) { plane[(sy * s + sx) as usize] } else { 0.0 };
                image[c * side * side + (y * s + x) as usize] = v;
            }
        }
    }
}

/// Shuffled mini-batch indices for one epoch. The last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_bytes(records: usize, label: u8) -> Vec<u8> {
        let mut out = Vec::new();
        for r in 0..records {
            out.push(label);
            out.extend((0..3072).map(|i| ((i + r) % 256) as u8));
        }
        out
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        fs::write(&p, cifar_bytes(10, 3)).unwrap();
        let ds = load_cifar10_binary(&p).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.image_len(), 3 * 32 * 32);
        assert_eq!(ds.labels, vec![3; 10]);
        // pixel 0 of record 0 is byte 0 in the red plane
        assert!((ds.images[0] - (0.0 - 0.4914) / 0.2470).abs() < 1e-6);
        // first green pixel of record 0 is byte 1024 % 256 = 0
        assert!((ds.images[1024] - (0.0 - 0.4822) / 0.2435).abs() < 1e-6);
        // directory form
        assert_eq!(load_cifar10_binary(dir.path()).unwrap(), ds);
        assert!(ds.check_labels(2).is_err());
    }

    #[test]
    fn cifar_truncated_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        fs::write(&p, vec![0u8; 3072]).unwrap();
        let err = load_cifar10_binary(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        fs::write(&p, cifar_bytes(1, 10)).unwrap();
        assert!(load_cifar10_binary(&p).is_err());
    }

    #[test]
    fn raw_tensor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.raw");
        let mut ds = synthetic_gratings(6, 3, 8, 1.0, 4);
        ds.images[0] = f32::MIN_POSITIVE;
        ds.images[1] = -0.0;
        write_raw_tensor(&p, &ds).unwrap();
        let back = load_raw_tensor(&p).unwrap();
        assert_eq!(back.labels, ds.labels);
        let bits = |d: &Dataset| d.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ds));

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_raw_tensor(&p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(load_raw_tensor(&p).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn filter_and_split() {
        let mut ds = synthetic_gratings(10, 1, 4, 1.0, 1);
        ds.labels = (0..10).map(|i| i % 5).collect();
        let f = ds.filter_classes(&[3, 1]);
        assert_eq!(f.len(), 4);
        assert!(f.labels.iter().all(|&y| y < 2));
        assert_eq!(f.image(0), ds.image(1));
        let (a, b) = ds.split(0.3, &mut SeededRng::new(0));
        assert_eq!((a.len(), b.len()), (7, 3));
        let (a2, _) = ds.split(0.3, &mut SeededRng::new(0));
        assert_eq!(a, a2);
    }

    #[test]
    fn augment_flip_and_shift() {
        let side = 4;
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let mut rng = SeededRng::new(0);
        for _ in 0..20 {
            let mut x = img.clone();
            augment(&mut x, 1, side, 1, &mut rng);
            // every value is zero padding or one of the originals
            assert!(x.iter().all(|v| *v == 0.0 || img.contains(v)));
        }
        let mut x = img.clone();
        augment(&mut x, 1, side, 0, &mut SeededRng::new(3));
        assert!(x == img || x[..4] == [3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn batches_cover_everything() {
        let b = epoch_batches(10, 4, &mut SeededRng::new(2));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
