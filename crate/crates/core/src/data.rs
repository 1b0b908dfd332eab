//! Labelled datasets: IDX and CSV files, and seeded synthetic class blobs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf },
    Synthetic(SyntheticSpec),
    Derived,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, provenance: Provenance) -> Result<Self> {
        let ds = Self {
            samples,
            num_classes,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.samples.first() {
            for s in &self.samples {
                if s.label >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: s.label,
                        num_classes: self.num_classes,
                    });
                }
                if s.input.shape() != first.input.shape() {
                    return Err(Error::shape(format!(
                        "sample shapes differ: {:?} vs {:?}",
                        s.input.shape(),
                        first.input.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.input.shape())
    }

    pub fn inputs(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.input.clone()).collect()
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
            num_classes: self.num_classes,
            provenance: Provenance::Derived,
        }
    }
}

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedFile(path.to_path_buf()))
}

/// Loads an IDX image file (`[count, rows, cols]` u8) and its label file.
/// Pixels are scaled to `[0, 1]`; each sample has shape `[1, 1, rows, cols]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = fs::read(ip)?;
    let lb = fs::read(lp)?;
    let magic = read_be_u32(&ib, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = read_be_u32(&lb, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(&ib, 4, ip)? as usize;
    let rows = read_be_u32(&ib, 8, ip)? as usize;
    let cols = read_be_u32(&ib, 12, ip)? as usize;
    let label_count = read_be_u32(&lb, 4, lp)? as usize;
    if count != label_count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let pixels = ib
        .get(16..16 + count * rows * cols)
        .ok_or_else(|| Error::TruncatedFile(ip.to_path_buf()))?;
    let labels = lb
        .get(8..8 + count)
        .ok_or_else(|| Error::TruncatedFile(lp.to_path_buf()))?;
    let plane = rows * cols;
    let samples = (0..count)
        .map(|i| {
            let data = pixels[i * plane..(i + 1) * plane]
                .iter()
                .map(|&p| p as f32 / 255.0)
                .collect();
            Ok(Sample {
                input: Tensor::from_f32(vec![1, 1, rows, cols], data)?,
                label: labels[i] as usize,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    Dataset::new(
        samples,
        num_classes,
        Provenance::Idx {
            images: ip.to_path_buf(),
            labels: lp.to_path_buf(),
        },
    )
}

/// Writes single-channel samples as an IDX pair; values are clamped to
/// `[0, 1]` and scaled to bytes.
pub fn save_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let shape = ds.sample_shape().ok_or(Error::EmptyEvalSet)?;
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 {
        return Err(Error::shape(format!(
            "IDX export needs [1, 1, H, W] samples, got {shape:?}"
        )));
    }
    let mut ib = Vec::new();
    ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), shape[2], shape[3]] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    let mut lb = Vec::new();
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for s in &ds.samples {
        ib.extend(
            s.input
                .f32_values()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        lb.push(
            u8::try_from(s.label)
                .map_err(|_| Error::Config("IDX labels must fit in a byte".into()))?,
        );
    }
    fs::write(images, ib)?;
    fs::write(labels, lb)?;
    Ok(())
}

/// Loads rows of `label, v1, .., vK` with `K = product(shape)`.
pub fn load_csv(path: impl AsRef<Path>, shape: &[usize]) -> Result<Dataset> {
    let path = path.as_ref();
    let width: usize = shape.iter().product();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            row: 0,
            column: 0,
            message: e.to_string(),
        })?;
    let mut samples = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != width + 1 {
            return Err(Error::Parse {
                row,
                column: record.len(),
                message: format!("expected {} columns, found {}", width + 1, record.len()),
            });
        }
        let label = record[0].parse::<usize>().map_err(|e| Error::Parse {
            row,
            column: 1,
            message: format!("label: {e}"),
        })?;
        let values = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(c, v)| {
                v.parse::<f32>().map_err(|e| Error::Parse {
                    row,
                    column: c + 2,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            input: Tensor::from_f32(shape.to_vec(), values)?,
            label,
        });
    }
    let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(1);
    Dataset::new(
        samples,
        num_classes,
        Provenance::Csv {
            path: path.to_path_buf(),
        },
    )
}

/// Writes `label, values..` rows using shortest round-trip float formatting.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in &ds.samples {
        write!(out, "{}", s.label)?;
        for v in s.input.f32_values().iter() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Gaussian class blobs.
///
/// Each class gets a fixed mean image; a sample is its class mean plus i.i.d.
/// `N(0, noise^2)` pixel noise. Class means are placed around a constant
/// 0.5 background and rescaled so the closest pair sits exactly
/// `separation * noise` apart. With `difficulty_spread > 0` every sample's
/// deviation from the background is shrunk by a random factor in
/// `[1 - difficulty_spread, 1]`, mixing easy and hard samples.
///
/// `dc_share` is the fraction of each mean's squared deviation carried by
/// per-channel constant offsets; the rest is a spatial pattern. Pooled
/// features only see the offsets, so a nonzero share makes classes partly
/// separable after global pooling.
///
/// The class means depend only on `seed`; `split` selects an independent
/// noise stream so train / calibration / evaluation sets share classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples: usize,
    /// Per-sample shape, `[1, C, H, W]`.
    pub shape: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub split: u64,
    #[serde(default = "default_separation")]
    pub separation: f32,
    #[serde(default = "default_noise")]
    pub noise: f32,
    #[serde(default)]
    pub difficulty_spread: f32,
    #[serde(default)]
    pub dc_share: f32,
}

fn default_separation() -> f32 {
    6.0
}

fn default_noise() -> f32 {
    0.25
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, samples: usize, shape: Vec<usize>, seed: u64) -> Self {
        Self {
            num_classes,
            samples,
            shape,
            seed,
            split: 0,
            separation: default_separation(),
            noise: default_noise(),
            difficulty_spread: 0.0,
            dc_share: 0.0,
        }
    }

    pub fn with_split(mut self, split: u64) -> Self {
        self.split = split;
        self
    }

    /// Background-relative class mean images.
    pub fn class_means(&self) -> Vec<Vec<f32>> {
        let dim: usize = self.shape.iter().product();
        let channels = if self.shape.len() == 4 {
            self.shape[1]
        } else {
            1
        };
        let plane = dim / channels;
        let share = self.dc_share.clamp(0.0, 1.0) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter()
                .map(move |x| if n > 0.0 { x / n } else { 0.0 })
        };
        let mut dev: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| {
                let pattern: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let offsets: Vec<f64> = (0..channels).map(|_| rng.sample(StandardNormal)).collect();
                let dc: Vec<f64> = (0..dim).map(|i| offsets[i / plane]).collect();
                unit(pattern)
                    .zip(unit(dc))
                    .map(|(p, d)| (1.0 - share).sqrt() * p + share.sqrt() * d)
                    .collect()
            })
            .collect();
        let mut closest = f64::INFINITY;
        for a in 0..dev.len() {
            for b in a + 1..dev.len() {
                let d: f64 = dev[a]
                    .iter()
                    .zip(&dev[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                closest = closest.min(d);
            }
        }
        if closest.is_finite() && closest > 0.0 {
            let k = self.separation as f64 * self.noise as f64 / closest;
            dev.iter_mut().flatten().for_each(|v| *v *= k);
        }
        dev.into_iter()
            .map(|d| d.into_iter().map(|v| v as f32).collect())
            .collect()
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.samples == 0 || spec.shape.contains(&0) {
        return Err(Error::Config(
            "synthetic spec needs positive counts and dims".into(),
        ));
    }
    let means = spec.class_means();
    let stream = spec.seed ^ (spec.split.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let samples = (0..spec.samples)
        .map(|i| {
            let label = i % spec.num_classes;
            let contrast = 1.0 - spec.difficulty_spread * rng.random::<f32>();
            let data = means[label]
                .iter()
                .map(|&m| 0.5 + contrast * m + spec.noise * rng.sample::<f32, _>(StandardNormal))
                .collect();
            Ok(Sample {
                input: Tensor::from_f32(spec.shape.clone(), data)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        samples,
        spec.num_classes,
        Provenance::Synthetic(spec.clone()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx(dir: &Path, count: u32, labels: u32, truncate: bool) -> (PathBuf, PathBuf) {
        let (ip, lp) = (dir.join("img.idx"), dir.join("lbl.idx"));
        let mut ib = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, 2, 3] {
            ib.extend_from_slice(&v.to_be_bytes());
        }
        ib.extend((0..count * 6).map(|i| if i == 0 { 255 } else { (i % 256) as u8 }));
        if truncate {
            ib.truncate(ib.len() - 1);
        }
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&labels.to_be_bytes());
        lb.extend((0..labels).map(|i| (i % 3) as u8));
        fs::write(&ip, ib).unwrap();
        fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 4, 4, false);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.sample_shape().unwrap(), &[1, 1, 2, 3]);
        assert_eq!(ds.samples[0].input.as_f32().unwrap()[0], 1.0);
        assert_eq!(ds.num_classes, 3);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 4, 3, false);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::CountMismatch {
                images: 4,
                labels: 3
            })
        ));
        let (ip, lp) = write_idx(dir.path(), 4, 4, true);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::TruncatedFile(_))));
        assert!(matches!(load_idx(&lp, &lp), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "1, 0.5, -1.25, 3, 0.000001\n").unwrap();
        let ds = load_csv(&p, &[1, 4]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(
            ds.samples[0].input.as_f32().unwrap(),
            &[0.5, -1.25, 3.0, 0.000001]
        );
        let q = dir.path().join("e.csv");
        save_csv(&ds, &q).unwrap();
        assert_eq!(load_csv(&q, &[1, 4]).unwrap().samples, ds.samples);

        fs::write(&p, "0,1,2,3,4\n1,1,2,3\n").unwrap();
        match load_csv(&p, &[1, 4]) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&p, "0,1,2,x,4\n").unwrap();
        assert!(matches!(
            load_csv(&p, &[1, 4]),
            Err(Error::Parse {
                row: 1,
                column: 4,
                ..
            })
        ));
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SyntheticSpec::new(3, 12, vec![1, 1, 4, 4], 5);
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SyntheticSpec {
            seed: 6,
            ..spec.clone()
        })
        .unwrap();
        assert_ne!(a.samples, c.samples);
        let d = gen_synthetic(&spec.clone().with_split(1)).unwrap();
        assert_ne!(a.samples, d.samples);
    }

    #[test]
    fn class_means_are_separated() {
        let spec = SyntheticSpec {
            separation: 4.0,
            ..SyntheticSpec::new(5, 10, vec![1, 2, 3, 3], 9)
        };
        let m = spec.class_means();
        let mut closest = f32::INFINITY;
        for a in 0..5 {
            for b in a + 1..5 {
                let d: f32 = m[a]
                    .iter()
                    .zip(&m[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f32>()
                    .sqrt();
                closest = closest.min(d);
            }
        }
        assert!((closest - 4.0 * spec.noise).abs() < 1e-4);
    }
}
