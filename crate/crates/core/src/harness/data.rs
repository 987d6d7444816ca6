//! Synthetic latent datasets.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DigError, Result};
use crate::tensor::Tensor;

const MIXTURE_COMPONENTS: usize = 4;
const MIXTURE_STD: f64 = 0.1;
const PIXEL_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianMixture,
    Checkerboard,
    TwoClassBlobs,
}

impl FromStr for DatasetKind {
    type Err = DigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_mixture" => Ok(Self::GaussianMixture),
            "checkerboard" => Ok(Self::Checkerboard),
            "two_class_blobs" => Ok(Self::TwoClassBlobs),
            other => Err(DigError::Unknown {
                what: "dataset",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianMixture => "gaussian_mixture",
            Self::Checkerboard => "checkerboard",
            Self::TwoClassBlobs => "two_class_blobs",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// Each `[C × I × I]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Flattened images, one row per sample.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.images.iter().map(|x| x.data().to_vec()).collect()
    }

    /// Mean and variance of every channel over all samples and pixels.
    pub fn channel_moments(&self) -> Vec<(f64, f64)> {
        let c = self.images.first().map_or(0, |x| x.shape()[0]);
        (0..c)
            .map(|ch| {
                let values: Vec<f64> = self
                    .images
                    .iter()
                    .flat_map(|x| {
                        let plane = x.len() / c;
                        x.data()[ch * plane..(ch + 1) * plane].to_vec()
                    })
                    .collect();
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (mean, var)
            })
            .collect()
    }
}

fn mixture_prototype(k: usize, c: usize, i: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * i * i);
    for ch in 0..c {
        for r in 0..i {
            for col in 0..i {
                let (y, x) = ((r as f64 + 0.5) / i as f64, (col as f64 + 0.5) / i as f64);
                let angle = PI * k as f64 / MIXTURE_COMPONENTS as f64 + 0.3 * ch as f64;
                let u = x * angle.cos() + y * angle.sin();
                out.push((2.0 * PI * (u + 0.25 * k as f64)).sin());
            }
        }
    }
    out
}

fn gauss<R: Rng>(rng: &mut R, std: f64) -> f64 {
    std * rng.sample::<f64, _>(StandardNormal)
}

fn sample_image<R: Rng>(kind: DatasetKind, index: usize, c: usize, i: usize, rng: &mut R) -> (Vec<f64>, usize) {
    match kind {
        DatasetKind::GaussianMixture => {
            let k = rng.gen_range(0..MIXTURE_COMPONENTS);
            let img = mixture_prototype(k, c, i)
                .into_iter()
                .map(|v| v + gauss(rng, MIXTURE_STD))
                .collect();
            (img, k)
        }
        DatasetKind::Checkerboard => {
            let cell = rng.gen_range(1..=2);
            let (dr, dc) = (rng.gen_range(0..2 * cell), rng.gen_range(0..2 * cell));
            let mut img = Vec::with_capacity(c * i * i);
            for ch in 0..c {
                for r in 0..i {
                    for col in 0..i {
                        let parity = ((r + dr) / cell + (col + dc) / cell + ch) % 2;
                        img.push(if parity == 0 { 1.0 } else { -1.0 } + gauss(rng, PIXEL_NOISE));
                    }
                }
            }
            (img, cell - 1)
        }
        DatasetKind::TwoClassBlobs => {
            let label = index % 2;
            let half = i as f64 / 2.0;
            let cy = rng.gen_range(0.0..i as f64);
            let cx = half * (label as f64 + rng.gen_range(0.0..1.0));
            let width = (i as f64 / 6.0).max(0.75);
            let mut img = Vec::with_capacity(c * i * i);
            for _ in 0..c {
                for r in 0..i {
                    for col in 0..i {
                        let d2 = (r as f64 + 0.5 - cy).powi(2) + (col as f64 + 0.5 - cx).powi(2);
                        img.push((-d2 / (2.0 * width * width)).exp() + gauss(rng, PIXEL_NOISE));
                    }
                }
            }
            (img, label)
        }
    }
}

/// `n` images of shape `[C × I × I]`, standardized per channel. Labels
/// are taken modulo `classes`.
pub fn make_toy_dataset(
    kind: DatasetKind,
    n: usize,
    channels: usize,
    image: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || channels == 0 || image == 0 || classes == 0 {
        return Err(DigError::Config("dataset needs n, channels, image and classes ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for index in 0..n {
        let (img, label) = sample_image(kind, index, channels, image, &mut rng);
        raw.push(img);
        labels.push(label % classes);
    }
    let plane = image * image;
    for ch in 0..channels {
        let span = ch * plane..(ch + 1) * plane;
        let count = (n * plane) as f64;
        let mean = raw.iter().map(|x| x[span.clone()].iter().sum::<f64>()).sum::<f64>() / count;
        let var = raw
            .iter()
            .map(|x| x[span.clone()].iter().map(|v| (v - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / count;
        let inv = 1.0 / var.sqrt().max(1e-12);
        for x in raw.iter_mut() {
            for v in &mut x[span.clone()] {
                *v = (*v - mean) * inv;
            }
        }
    }
    let images = raw
        .into_iter()
        .map(|x| Tensor::new(&[channels, image, image], x))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        kind,
        images,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [DatasetKind; 3] = [
        DatasetKind::GaussianMixture,
        DatasetKind::Checkerboard,
        DatasetKind::TwoClassBlobs,
    ];

    #[test]
    fn fixed_seed_reproduces_dataset() {
        for kind in KINDS {
            let a = make_toy_dataset(kind, 50, 2, 8, 2, 3).unwrap();
            let b = make_toy_dataset(kind, 50, 2, 8, 2, 3).unwrap();
            assert_eq!(a, b);
            let c = make_toy_dataset(kind, 50, 2, 8, 2, 4).unwrap();
            assert_ne!(a.images, c.images);
        }
    }

    #[test]
    fn blob_labels_are_balanced() {
        for n in [1, 2, 7, 100, 101] {
            let d = make_toy_dataset(DatasetKind::TwoClassBlobs, n, 1, 8, 2, 0).unwrap();
            let ones = d.labels.iter().filter(|&&l| l == 1).count() as i64;
            assert!(d.labels.iter().all(|&l| l < 2));
            assert!((2 * ones - n as i64).abs() <= 1);
        }
    }

    #[test]
    fn channels_are_standardized() {
        for kind in KINDS {
            let d = make_toy_dataset(kind, 300, 3, 8, 2, 1).unwrap();
            for (mean, var) in d.channel_moments() {
                assert!(mean.abs() < 1e-9);
                assert!((0.8..=1.2).contains(&var), "{kind}: {var}");
            }
        }
    }

    #[test]
    fn mixture_uses_every_component() {
        let d = make_toy_dataset(DatasetKind::GaussianMixture, 400, 1, 8, 4, 2).unwrap();
        for k in 0..4 {
            let count = d.labels.iter().filter(|&&l| l == k).count();
            assert!(count > 60, "component {k}: {count}");
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in KINDS {
            assert_eq!(kind.to_string().parse::<DatasetKind>().unwrap(), kind);
        }
        assert!(matches!("mnist".parse::<DatasetKind>(), Err(DigError::Unknown { .. })));
        assert!(make_toy_dataset(DatasetKind::Checkerboard, 0, 1, 8, 2, 0).is_err());
    }
}
