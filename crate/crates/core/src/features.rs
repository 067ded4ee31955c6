//! Fixed convolutional feature bank (VGG-style blocks of 3x3 convolutions).
//!
//! Block `b` ends with an optional 2x2 max-pool applied before block `b + 1`;
//! [`extract`] at block `b` returns the activations before that pool, so
//! with every block pooling, block `b` has stride `2^(b-1)`.

use std::path::Path;

use autodiff::{kernels, weights, Conv2dConfig, Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::raster::Image;
use crate::{Error, Result};

pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 64, 64];
pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, k, k]`.
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub layers: Vec<ConvLayer>,
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub blocks: Vec<Block>,
    pub leaky_slope: f32,
    pub seed: Option<u64>,
}

/// Shape of a seeded bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub channels: Vec<usize>,
    pub convs_per_block: usize,
    pub seed: u64,
}

impl BankConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            channels: DEFAULT_CHANNELS.to_vec(),
            convs_per_block: 2,
            seed,
        }
    }
}

/// Features of one image: `[1, C, h, w]` plus input pixels per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor<f32>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// Per-cell sum over channels of `|self - other|`, row-major.
    pub fn l1_difference(&self, other: &FeatureMap) -> Result<Vec<f32>> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::dimension("feature maps differ in shape"));
        }
        let (c, cells) = (self.channels(), self.height() * self.width());
        let (a, b) = (self.data.data(), other.data.data());
        let mut out = vec![0.0f32; cells];
        for ch in 0..c {
            for (i, o) in out.iter_mut().enumerate() {
                *o += (a[ch * cells + i] - b[ch * cells + i]).abs();
            }
        }
        Ok(out)
    }
}

impl FeatureBank {
    pub fn seeded(config: &BankConfig) -> Result<Self> {
        if config.channels.len() < 4 || config.convs_per_block == 0 || config.channels.contains(&0) {
            return Err(Error::config(
                "a feature bank needs at least 4 blocks with at least one conv and one channel each",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut cin = 3;
        for &cout in &config.channels {
            let mut layers = Vec::with_capacity(config.convs_per_block);
            for _ in 0..config.convs_per_block {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let weight = Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.gen_range(-bound..bound) as f32);
                layers.push(ConvLayer {
                    weight,
                    bias: Tensor::zeros(&[cout]),
                });
                cin = cout;
            }
            blocks.push(Block { layers, downsample: true });
        }
        let bank = Self {
            blocks,
            leaky_slope: LEAKY_SLOPE,
            seed: Some(config.seed),
        };
        if bank.stride(4)? != 8 {
            return Err(Error::config("block 4 must have stride 8"));
        }
        Ok(bank)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Input pixels per feature cell at the output of `block` (1-based).
    pub fn stride(&self, block: usize) -> Result<usize> {
        if block == 0 || block > self.blocks.len() {
            return Err(Error::config(format!(
                "block {block} outside 1..={}",
                self.blocks.len()
            )));
        }
        Ok(self.blocks[..block - 1]
            .iter()
            .map(|b| if b.downsample { 2 } else { 1 })
            .product())
    }

    pub fn validate(&self) -> Result<()> {
        let mut cin = 3;
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, layer) in block.layers.iter().enumerate() {
                let s = layer.weight.shape();
                if s.len() != 4 || s[1] != cin || s[2] != s[3] || s[2] % 2 == 0 || layer.bias.shape() != [s[0]] {
                    return Err(Error::format(format!(
                        "block {} layer {}: weight {:?} / bias {:?} do not chain from {cin} channels",
                        b + 1,
                        l + 1,
                        s,
                        layer.bias.shape()
                    )));
                }
                cin = s[0];
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = Params::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, layer) in block.layers.iter().enumerate() {
                params.push(format!("block{}.conv{}.weight", b + 1, l + 1), layer.weight.clone());
                params.push(format!("block{}.conv{}.bias", b + 1, l + 1), layer.bias.clone());
            }
        }
        let meta = json!({
            "kind": "feature-bank",
            "channels": self.blocks.iter().map(|b| b.layers.iter().map(ConvLayer::out_channels).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "kernels": self.blocks.iter().map(|b| b.layers.iter().map(ConvLayer::kernel).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "downsample": self.blocks.iter().map(|b| b.downsample).collect::<Vec<_>>(),
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
        });
        weights::save(path, &params, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, params) = weights::load(path).map_err(Error::from_weights)?;
        let meta = &manifest.meta;
        let channels: Vec<Vec<usize>> = serde_json::from_value(meta["channels"].clone())
            .map_err(|e| Error::format(format!("bank manifest channels: {e}")))?;
        let downsample: Vec<bool> = serde_json::from_value(meta["downsample"].clone())
            .map_err(|e| Error::format(format!("bank manifest downsample: {e}")))?;
        let leaky_slope = meta["leaky_slope"].as_f64().unwrap_or(LEAKY_SLOPE as f64) as f32;
        let seed = meta["seed"].as_u64();
        if downsample.len() != channels.len() {
            return Err(Error::format("bank manifest: block lists differ in length"));
        }
        let expected: usize = channels.iter().map(|b| 2 * b.len()).sum();
        if expected != params.len() {
            return Err(Error::format(format!(
                "bank manifest lists {expected} tensors, file has {}",
                params.len()
            )));
        }
        let mut tensors = params.tensors().iter();
        let mut blocks = Vec::with_capacity(channels.len());
        for (b, (outs, &down)) in channels.iter().zip(&downsample).enumerate() {
            let mut layers = Vec::with_capacity(outs.len());
            for (l, &out) in outs.iter().enumerate() {
                let weight = tensors.next().cloned().unwrap_or_else(|| Tensor::zeros(&[1]));
                let bias = tensors.next().cloned().unwrap_or_else(|| Tensor::zeros(&[1]));
                if weight.shape().first() != Some(&out) {
                    return Err(Error::format(format!(
                        "block {} layer {}: manifest says {out} channels, weight is {:?}",
                        b + 1,
                        l + 1,
                        weight.shape()
                    )));
                }
                layers.push(ConvLayer { weight, bias });
            }
            blocks.push(Block { layers, downsample: down });
        }
        let bank = Self {
            blocks,
            leaky_slope,
            seed,
        };
        bank.validate()?;
        Ok(bank)
    }
}

pub fn image_tensor(image: &Image) -> Tensor<f32> {
    Tensor::new(&[1, 3, image.height(), image.width()], image.to_planar()).expect("planar length matches")
}

/// Forward pass through blocks `1..=block`.
pub fn extract(bank: &FeatureBank, image: &Image, block: usize) -> Result<FeatureMap> {
    let stride = bank.stride(block)?;
    if image.width() % stride != 0 || image.height() % stride != 0 {
        return Err(Error::dimension(format!(
            "{}x{} image is not divisible by block {block} stride {stride}",
            image.width(),
            image.height()
        )));
    }
    let slope = bank.leaky_slope;
    let mut x = image_tensor(image);
    for (b, blk) in bank.blocks[..block].iter().enumerate() {
        if b > 0 && bank.blocks[b - 1].downsample {
            x = kernels::max_pool2(&x)?;
        }
        for layer in &blk.layers {
            let cfg = Conv2dConfig::same(layer.kernel(), 1);
            x = kernels::conv2d(&x, &layer.weight, cfg)?;
            x = kernels::bias_add(&x, &layer.bias)?;
            x = x.map(|v| if v > 0.0 { v } else { slope * v });
        }
    }
    Ok(FeatureMap { data: x, stride })
}
