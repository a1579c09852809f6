//! LPIPS-style perceptual distance over a fixed bank of seeded random filters.
//!
//! This is a structural stand-in: the filters are not trained and the
//! distance is not calibrated against human judgements.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::PixelImage;
use crate::util;
use crate::{Error, Result};

pub const DEFAULT_BANK_SEED: u64 = 3;
const LAYERS: usize = 3;
const FILTERS: usize = 8;
const KERNEL: usize = 3;
const NORM_EPS: f64 = 1e-10;

/// One convolution layer: `weights[out][in][ky][kx]` flattened.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ConvLayer {
    in_channels: usize,
    weights: Vec<f64>,
}

impl ConvLayer {
    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * KERNEL + ky) * KERNEL + kx]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerceptualBank {
    pub seed: u64,
    layers: Vec<ConvLayer>,
}

/// Channel-major feature map `[c][y][x]`.
#[derive(Debug, Clone, PartialEq)]
struct FeatureMap {
    channels: usize,
    w: usize,
    h: usize,
    data: Vec<f64>,
}

/// Unit-normalized feature maps of every layer for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    width: usize,
    height: usize,
    layers: Vec<FeatureMap>,
}

impl PerceptualBank {
    pub fn new(seed: u64) -> Self {
        let mut rng = util::rng_from(seed, &[0x1B15]);
        let mut layers = Vec::with_capacity(LAYERS);
        let mut in_channels = 3;
        for _ in 0..LAYERS {
            let fan_in = (in_channels * KERNEL * KERNEL) as f64;
            let scale = 1.0 / fan_in.sqrt();
            let weights = (0..FILTERS * in_channels * KERNEL * KERNEL)
                .map(|_| rng.gen_range(-1.0..1.0) * scale)
                .collect();
            layers.push(ConvLayer {
                in_channels,
                weights,
            });
            in_channels = FILTERS;
        }
        Self { seed, layers }
    }

    pub fn features(&self, img: &PixelImage) -> FeatureStack {
        let (w, h) = (img.width(), img.height());
        let mut data = vec![0.0; 3 * w * h];
        for (i, px) in img.rgb().iter().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = 2.0 * px[c] - 1.0;
            }
        }
        let mut current = FeatureMap {
            channels: 3,
            w,
            h,
            data,
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let raw = conv_relu(&current, layer);
            layers.push(unit_normalize(&raw));
            current = raw;
        }
        FeatureStack {
            width: w,
            height: h,
            layers,
        }
    }
}

impl Default for PerceptualBank {
    fn default() -> Self {
        Self::new(DEFAULT_BANK_SEED)
    }
}

/// 3x3 convolution, stride 2, zero padding 1, then ReLU.
fn conv_relu(input: &FeatureMap, layer: &ConvLayer) -> FeatureMap {
    let ow = input.w.div_ceil(2);
    let oh = input.h.div_ceil(2);
    let mut data = vec![0.0; FILTERS * ow * oh];
    let plane = input.w * input.h;
    for o in 0..FILTERS {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..input.channels {
                    for ky in 0..KERNEL {
                        let y = (2 * oy + ky) as isize - 1;
                        if y < 0 || y >= input.h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let x = (2 * ox + kx) as isize - 1;
                            if x < 0 || x >= input.w as isize {
                                continue;
                            }
                            let v = input.data[i * plane + y as usize * input.w + x as usize];
                            acc += layer.weight(o, i, ky, kx) * v;
                        }
                    }
                }
                data[o * ow * oh + oy * ow + ox] = acc.max(0.0);
            }
        }
    }
    FeatureMap {
        channels: FILTERS,
        w: ow,
        h: oh,
        data,
    }
}

/// Scale the channel vector at each spatial position to unit length.
fn unit_normalize(map: &FeatureMap) -> FeatureMap {
    let plane = map.w * map.h;
    let mut data = map.data.clone();
    for p in 0..plane {
        let norm = (0..map.channels)
            .map(|c| map.data[c * plane + p].powi(2))
            .sum::<f64>()
            .sqrt();
        for c in 0..map.channels {
            data[c * plane + p] /= norm + NORM_EPS;
        }
    }
    FeatureMap { data, ..*map }
}

impl FeatureStack {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Mean over layers of the mean squared difference of normalized features.
    pub fn distance(&self, other: &FeatureStack) -> Result<f64> {
        if self.dims() != other.dims() || self.layers.len() != other.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "feature stacks for {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let mut total = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            let sq: f64 = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            total += sq / a.data.len() as f64;
        }
        Ok(total / self.layers.len() as f64)
    }
}

/// LPIPS-style distance in unit scale (not multiplied by 100).
pub fn perceptual_distance(a: &PixelImage, b: &PixelImage, bank: &PerceptualBank) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    bank.features(a).distance(&bank.features(b))
}
