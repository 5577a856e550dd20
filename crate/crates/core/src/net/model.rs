//! Trunk of conv-norm-relu blocks with 1x1 task heads upsampled to crop
//! resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bmn::{Block, NormMode};
use super::layers::{bilinear_resize, bilinear_resize_backward, Conv2d};
use super::loss::Prediction;
use super::tensor::{Param, Real, Tensor4};
use crate::error::{Error, Result};
use crate::mesh::DEFAULT_PART_COUNT;
use crate::rig::KEYPOINT_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub blocks: Vec<BlockSpec>,
    pub norm: NormMode,
    /// Body part count K.
    pub parts: usize,
    pub crop_size: usize,
    /// Learning-rate factor of the heatmap, offset and segment head weights.
    pub head_multiplier: f64,
    /// Index of an earlier block whose output is concatenated with the
    /// upsampled trunk output before the heads.
    pub skip_from: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        let b = |channels, stride| BlockSpec { channels, stride };
        NetConfig {
            blocks: vec![b(16, 2), b(24, 1), b(32, 2), b(32, 1), b(48, 2), b(64, 1), b(64, 1)],
            norm: NormMode::BmnHard,
            parts: DEFAULT_PART_COUNT,
            crop_size: 64,
            head_multiplier: 10.0,
            skip_from: None,
            learning_rate: 0.005,
            momentum: 0.9,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.channels == 0 || b.stride == 0 || b.stride > 2) {
            return bad("blocks need positive channels and stride 1 or 2");
        }
        if self.parts == 0 || self.parts >= 255 || self.crop_size < 8 {
            return bad("part count and crop size");
        }
        if !(self.head_multiplier >= 1.0) {
            return bad("head multiplier must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rate and momentum");
        }
        if let Some(s) = self.skip_from {
            if s + 1 >= self.blocks.len() {
                return bad("skip source must precede the last block");
            }
        }
        Ok(())
    }

    /// Total downsampling factor of the trunk.
    pub fn output_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn head_channels(&self) -> [usize; 6] {
        [KEYPOINT_COUNT, 2 * KEYPOINT_COUNT, 1, self.parts, 2 * self.parts, 3]
    }
}

pub const HEAD_NAMES: [&str; 6] = ["heatmap", "offsets", "segment", "parts", "uv", "normal"];
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct MicroNet<T> {
    pub config: NetConfig,
    pub blocks: Vec<Block<T>>,
    pub heads: Vec<Conv2d<T>>,
    cache: Option<NetCache>,
}

#[derive(Debug, Clone)]
struct NetCache {
    /// Spatial size of the trunk output.
    feat_hw: (usize, usize),
    skip_shape: Option<[usize; 4]>,
    out_hw: (usize, usize),
}

impl<T: Real> MicroNet<T> {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut cin = 3;
        for b in &config.blocks {
            blocks.push(Block::new(cin, b.channels, b.stride, config.norm, &mut rng));
            cin = b.channels;
        }
        if let Some(s) = config.skip_from {
            cin += config.blocks[s].channels;
        }
        let mut heads = Vec::with_capacity(6);
        for (h, c) in config.head_channels().into_iter().enumerate() {
            let mut conv = Conv2d::new_normal(1, cin, c, HEAD_INIT_STD, &mut rng);
            if h < 3 {
                conv.weight.lr_mult = config.head_multiplier;
            }
            heads.push(conv);
        }
        Ok(MicroNet {
            config,
            blocks,
            heads,
            cache: None,
        })
    }

    /// `x` holds images in [0, 1]; `z` per-sample domain scores used by
    /// hard mixture normalization.
    pub fn forward(&mut self, x: &Tensor4<T>, z: &[T], train: bool) -> Result<Prediction<T>> {
        if x.c != 3 {
            return Err(Error::ShapeMismatch(format!("input has {} channels", x.c)));
        }
        if z.len() != x.n {
            return Err(Error::ShapeMismatch(format!("{} domain scores for batch {}", z.len(), x.n)));
        }
        let mut h = x.map(|v| v - T::from_f64(0.5));
        let mut skip = None;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            h = b.forward(&h, z, train)?;
            if self.config.skip_from == Some(i) {
                skip = Some(h.clone());
            }
        }
        let feat_hw = (h.h, h.w);
        let mut skip_shape = None;
        if let Some(s) = skip {
            let up = bilinear_resize(&h, s.h, s.w);
            skip_shape = Some(s.shape());
            h = Tensor4::concat_channels(&[&up, &s])?;
        }
        let (oh, ow) = (x.h, x.w);
        let mut outs = Vec::with_capacity(6);
        for head in &mut self.heads {
            let y = head.forward(&h)?;
            outs.push(bilinear_resize(&y, oh, ow));
        }
        self.cache = Some(NetCache {
            feat_hw,
            skip_shape,
            out_hw: (h.h, h.w),
        });
        let mut it = outs.into_iter();
        let mut next = || it.next().unwrap();
        let p = Prediction {
            heatmap: next(),
            offsets: next(),
            instance: next(),
            parts: next(),
            uv: next(),
            normal: next(),
        };
        for t in p.heads() {
            t.check_finite("network output")?;
        }
        Ok(p)
    }

    /// Accumulates parameter gradients from the gradient of the loss with
    /// respect to the last prediction.
    pub fn backward(&mut self, grad: &Prediction<T>) -> Result<()> {
        let cache = self.cache.take().ok_or_else(|| Error::ShapeMismatch("network backward before forward".into()))?;
        let (fh, fw) = cache.out_hw;
        let mut dh: Option<Tensor4<T>> = None;
        for (head, g) in self.heads.iter_mut().zip(grad.heads()) {
            let dy = bilinear_resize_backward(g, fh, fw);
            let d = head.backward(&dy)?;
            match &mut dh {
                None => dh = Some(d),
                Some(acc) => acc.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += *b),
            }
        }
        let mut dh = dh.expect("six heads");
        let mut dskip = None;
        if let Some(ss) = cache.skip_shape {
            let c_last = self.config.blocks.last().unwrap().channels;
            let dup = dh.slice_channels(0, c_last);
            dskip = Some(dh.slice_channels(c_last, ss[3]));
            dh = bilinear_resize_backward(&dup, cache.feat_hw.0, cache.feat_hw.1);
        }
        for i in (0..self.blocks.len()).rev() {
            if self.config.skip_from == Some(i) {
                if let Some(ds) = dskip.take() {
                    dh.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += *b);
                }
            }
            dh = self.blocks[i].backward(&dh)?;
        }
        Ok(())
    }

    pub fn named_params(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.params_mut().into_iter().map(|(n, p)| (format!("block{i}.{n}"), p)));
        }
        for (h, conv) in HEAD_NAMES.iter().zip(self.heads.iter_mut()) {
            v.extend(conv.params_mut().into_iter().map(|(n, p)| (format!("head.{h}.{n}"), p)));
        }
        v
    }

    pub fn named_buffers(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.buffers_mut().into_iter().map(|(n, p)| (format!("block{i}.{n}"), p)));
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Domain scores of each block in the last forward pass.
    pub fn last_domain_scores(&self) -> Vec<Vec<T>> {
        self.blocks.iter().filter_map(|b| b.last_z().map(|z| z.to_vec())).collect()
    }
}
