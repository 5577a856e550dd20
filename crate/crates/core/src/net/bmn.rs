//! Batch mixture normalization and the conv-norm-relu trunk block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, sigmoid, BatchNorm, Conv2d};
use super::tensor::{Param, Real, Tensor4};
use crate::error::{Error, Result};

/// Masks two branches by a per-sample domain score, normalizes them jointly
/// and merges them: `y = split_sum(BN([z * s, (1 - z) * r]))`.
#[derive(Debug, Clone)]
pub struct BatchMixtureNorm<T> {
    pub c: usize,
    /// Normalization over the 2c masked channels.
    pub bn: BatchNorm<T>,
    cache: Option<BmnCache<T>>,
}

#[derive(Debug, Clone)]
struct BmnCache<T> {
    s: Tensor4<T>,
    r: Tensor4<T>,
    z: Vec<T>,
}

impl<T: Real> BatchMixtureNorm<T> {
    pub fn new(c: usize) -> Self {
        BatchMixtureNorm {
            c,
            bn: BatchNorm::new(2 * c),
            cache: None,
        }
    }

    /// The masked, concatenated input of the joint normalization.
    pub fn masked(s: &Tensor4<T>, r: &Tensor4<T>, z: &[T]) -> Result<Tensor4<T>> {
        if !s.same_shape(r) {
            return Err(Error::ShapeMismatch("mixture branches differ in shape".into()));
        }
        if z.len() != s.n {
            return Err(Error::ShapeMismatch(format!("{} domain scores for batch {}", z.len(), s.n)));
        }
        for &v in z {
            if !(v >= T::ZERO && v <= T::ONE) {
                return Err(Error::DomainScore(v.to_f64()));
            }
        }
        let c = s.c;
        let mut m = Tensor4::zeros(s.n, s.h, s.w, 2 * c);
        let per = s.h * s.w;
        for n in 0..s.n {
            let (zs, zr) = (z[n], T::ONE - z[n]);
            for p in 0..per {
                let src = (n * per + p) * c;
                let dst = (n * per + p) * 2 * c;
                for k in 0..c {
                    m.data[dst + k] = zs * s.data[src + k];
                    m.data[dst + c + k] = zr * r.data[src + k];
                }
            }
        }
        Ok(m)
    }

    pub fn forward(&mut self, s: &Tensor4<T>, r: &Tensor4<T>, z: &[T], train: bool) -> Result<Tensor4<T>> {
        let m = Self::masked(s, r, z)?;
        let b = self.bn.forward(&m, train)?;
        let c = self.c;
        let mut y = Tensor4::zeros(s.n, s.h, s.w, c);
        for (yr, br) in y.data.chunks_mut(c).zip(b.data.chunks(2 * c)) {
            for k in 0..c {
                yr[k] = br[k] + br[c + k];
            }
        }
        self.cache = Some(BmnCache {
            s: s.clone(),
            r: r.clone(),
            z: z.to_vec(),
        });
        Ok(y)
    }

    /// Returns gradients with respect to s, r and z.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
        let cache = self.cache.take().ok_or_else(|| Error::ShapeMismatch("mixture norm backward before forward".into()))?;
        let c = self.c;
        let mut db = Tensor4::zeros(dy.n, dy.h, dy.w, 2 * c);
        for (br, yr) in db.data.chunks_mut(2 * c).zip(dy.data.chunks(c)) {
            br[..c].copy_from_slice(yr);
            br[c..].copy_from_slice(yr);
        }
        let dm = self.bn.backward(&db)?;
        let mut ds = Tensor4::zeros(dy.n, dy.h, dy.w, c);
        let mut dr = Tensor4::zeros(dy.n, dy.h, dy.w, c);
        let mut dz = vec![T::ZERO; dy.n];
        let per = dy.h * dy.w;
        for n in 0..dy.n {
            let (zs, zr) = (cache.z[n], T::ONE - cache.z[n]);
            for p in 0..per {
                let src = (n * per + p) * 2 * c;
                let dst = (n * per + p) * c;
                for k in 0..c {
                    let (gs, gr) = (dm.data[src + k], dm.data[src + c + k]);
                    ds.data[dst + k] = zs * gs;
                    dr.data[dst + k] = zr * gr;
                    dz[n] += gs * cache.s.data[dst + k] - gr * cache.r.data[dst + k];
                }
            }
        }
        Ok((ds, dr, dz))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    BatchNorm,
    /// Mixture normalization with z taken from the batch domain flags.
    BmnHard,
    /// Mixture normalization with z from a learned gate head.
    BmnLearned,
}

#[derive(Debug, Clone)]
enum Norm<T> {
    Bn(BatchNorm<T>),
    Bmn {
        bmn: BatchMixtureNorm<T>,
        gate: Option<Conv2d<T>>,
    },
}

/// conv -> norm -> relu.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub conv: Conv2d<T>,
    norm: Norm<T>,
    cache: Option<BlockCache<T>>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    y: Tensor4<T>,
    in_hw: (usize, usize),
    z: Vec<T>,
}

impl<T: Real> Block<T> {
    pub fn new(cin: usize, cout: usize, stride: usize, mode: NormMode, rng: &mut impl Rng) -> Self {
        match mode {
            NormMode::BatchNorm => Block {
                conv: Conv2d::new(3, cin, cout, stride, false, rng),
                norm: Norm::Bn(BatchNorm::new(cout)),
                cache: None,
            },
            NormMode::BmnHard | NormMode::BmnLearned => Block {
                conv: Conv2d::new(3, cin, 2 * cout, stride, false, rng),
                norm: Norm::Bmn {
                    bmn: BatchMixtureNorm::new(cout),
                    gate: (mode == NormMode::BmnLearned).then(|| Conv2d::new(1, cin, 1, 1, true, rng)),
                },
                cache: None,
            },
        }
    }

    pub fn out_channels(&self) -> usize {
        match &self.norm {
            Norm::Bn(bn) => bn.c,
            Norm::Bmn { bmn, .. } => bmn.c,
        }
    }

    /// `z_hard` holds per-sample domain scores (1 = simulated) and is used
    /// unless the block has a learned gate.
    pub fn forward(&mut self, x: &Tensor4<T>, z_hard: &[T], train: bool) -> Result<Tensor4<T>> {
        let a = self.conv.forward(x)?;
        let (pre, z) = match &mut self.norm {
            Norm::Bn(bn) => (bn.forward(&a, train)?, Vec::new()),
            Norm::Bmn { bmn, gate } => {
                let c = bmn.c;
                let s = a.slice_channels(0, c);
                let r = a.slice_channels(c, c);
                let z = match gate {
                    Some(g) => {
                        let logits = global_avg_pool(&g.forward(x)?);
                        logits.data.iter().map(|&v| sigmoid(v)).collect()
                    }
                    None => z_hard.to_vec(),
                };
                (bmn.forward(&s, &r, &z, train)?, z)
            }
        };
        let y = relu(&pre);
        self.cache = Some(BlockCache {
            y: y.clone(),
            in_hw: (x.h, x.w),
            z,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.take().ok_or_else(|| Error::ShapeMismatch("block backward before forward".into()))?;
        let dpre = relu_backward(&cache.y, dy);
        match &mut self.norm {
            Norm::Bn(bn) => {
                let da = bn.backward(&dpre)?;
                self.conv.backward(&da)
            }
            Norm::Bmn { bmn, gate } => {
                let (ds, dr, dz) = bmn.backward(&dpre)?;
                let da = Tensor4::concat_channels(&[&ds, &dr])?;
                let mut dx = self.conv.backward(&da)?;
                if let Some(g) = gate {
                    let dlogit: Vec<T> = dz.iter().zip(&cache.z).map(|(&d, &z)| d * z * (T::ONE - z)).collect();
                    let dl = Tensor4::from_vec(dz.len(), 1, 1, 1, dlogit)?;
                    let dg = global_avg_pool_backward(&dl, cache.in_hw.0, cache.in_hw.1);
                    let dxg = g.backward(&dg)?;
                    for (a, b) in dx.data.iter_mut().zip(&dxg.data) {
                        *a += *b;
                    }
                }
                Ok(dx)
            }
        }
    }

    /// Domain scores used in the last forward pass (empty for plain norm).
    pub fn last_z(&self) -> Option<&[T]> {
        self.cache.as_ref().map(|c| c.z.as_slice())
    }

    /// Which outputs of the last forward pass were positive.
    pub fn active_pattern(&self) -> Vec<bool> {
        self.cache.as_ref().map_or_else(Vec::new, |c| c.y.data.iter().map(|&v| v > T::ZERO).collect())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v: Vec<(String, &mut Param<T>)> =
            self.conv.params_mut().into_iter().map(|(n, p)| (format!("conv.{n}"), p)).collect();
        match &mut self.norm {
            Norm::Bn(bn) => v.extend(bn.params_mut().into_iter().map(|(n, p)| (format!("bn.{n}"), p))),
            Norm::Bmn { bmn, gate } => {
                v.extend(bmn.bn.params_mut().into_iter().map(|(n, p)| (format!("bn.{n}"), p)));
                if let Some(g) = gate {
                    v.extend(g.params_mut().into_iter().map(|(n, p)| (format!("gate.{n}"), p)));
                }
            }
        }
        v
    }

    /// Running statistics as (name, mean or var buffer).
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let bn = match &mut self.norm {
            Norm::Bn(bn) => bn,
            Norm::Bmn { bmn, .. } => &mut bmn.bn,
        };
        vec![
            ("bn.running_mean".to_string(), &mut bn.running_mean),
            ("bn.running_var".to_string(), &mut bn.running_var),
        ]
    }
}
