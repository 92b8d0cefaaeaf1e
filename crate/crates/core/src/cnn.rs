//! U-shaped convolutional path: encoder with max-pooling, decoder with
//! transposed convolutions and concatenated skips, and the additive fusion
//! points where transformer taps enter.
//!
//! Level `l` of the pyramid lives at `1 / 2^l` of the input resolution with
//! `base * 2^l` channels. Level 0 always bypasses fusion.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvTranspose, Norm};
use crate::params::{Bound, Init, ParamStore};
use crate::swin::EncoderTaps;
use crate::tensor::{Scalar, Tensor};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub num_classes: usize,
    /// Negative-side slope of the leaky-ramp nonlinearity.
    pub leaky_slope: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            levels: 5,
            base_channels: 16,
            kernel: 3,
            num_classes: 3,
            leaky_slope: 0.01,
        }
    }
}

impl CnnConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every input extent must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("cnn: need at least 2 levels, got {}", self.levels)));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("cnn: channel counts must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("cnn: kernel {} must be odd", self.kernel)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("cnn: need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }

    /// Checks input extents, reporting the padding each axis would need.
    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let div = self.divisor();
        let bad: Vec<String> = ['d', 'h', 'w']
            .iter()
            .zip(dims)
            .filter(|(_, e)| e % div != 0)
            .map(|(a, e)| format!("{a}: {e} needs +{}", (div - e % div) % div))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "input extents must be multiples of {div} ({})",
                bad.join(", ")
            )))
        }
    }
}

/// Two convolutions, each followed by instance normalization and a leaky ramp.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        Self {
            conv1: Conv::new(store, init, &format!("{name}.conv1"), cin, cout, kernel),
            norm1: Norm::new(store, &format!("{name}.norm1"), cout),
            conv2: Conv::new(store, init, &format!("{name}.conv2"), cout, cout, kernel),
            norm2: Norm::new(store, &format!("{name}.norm2"), cout),
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var, slope: f64) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = self.norm1.instance(g, p, h)?;
        let h = g.leaky_relu(h, slope);
        let h = self.conv2.forward(g, p, h)?;
        let h = self.norm2.instance(g, p, h)?;
        Ok(g.leaky_relu(h, slope))
    }
}

#[derive(Clone, Debug)]
pub struct CnnWeights {
    pub encoder: Vec<ConvBlock>,
    /// `up[l]` maps level `l + 1` to level `l`.
    pub up: Vec<ConvTranspose>,
    /// `decoder[l]` consumes `[up, skip]` at level `l`.
    pub decoder: Vec<ConvBlock>,
    pub head: Conv,
}

impl CnnWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, cfg: &CnnConfig) -> Self {
        let mut encoder = Vec::with_capacity(cfg.levels);
        let mut cin = cfg.in_channels;
        for l in 0..cfg.levels {
            encoder.push(ConvBlock::new(
                store,
                init,
                &format!("{prefix}.enc{l}"),
                cin,
                cfg.channels(l),
                cfg.kernel,
            ));
            cin = cfg.channels(l);
        }
        let mut up = Vec::with_capacity(cfg.levels - 1);
        let mut decoder = Vec::with_capacity(cfg.levels - 1);
        for l in 0..cfg.levels - 1 {
            up.push(ConvTranspose::new(
                store,
                init,
                &format!("{prefix}.up{l}"),
                cfg.channels(l + 1),
                cfg.channels(l),
            ));
            decoder.push(ConvBlock::new(
                store,
                init,
                &format!("{prefix}.dec{l}"),
                2 * cfg.channels(l),
                cfg.channels(l),
                cfg.kernel,
            ));
        }
        let head = Conv::new(store, init, &format!("{prefix}.head"), cfg.channels(0), cfg.num_classes, 1);
        Self {
            encoder,
            up,
            decoder,
            head,
        }
    }
}

/// Pointwise projections that bring transformer taps to pyramid widths.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    /// `(level, tap index, projection)` for every fused level.
    pub links: Vec<FusionLink>,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionLink {
    pub level: usize,
    pub tap: usize,
    pub proj: Conv,
}

impl FusionWeights {
    /// One link per level `l >= 1` that a tap lands on, given each tap's
    /// level and channel width.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        cfg: &CnnConfig,
        tap_levels: &[(usize, usize)],
    ) -> Self {
        let links = tap_levels
            .iter()
            .enumerate()
            .filter(|(_, &(level, _))| level >= 1 && level < cfg.levels)
            .map(|(tap, &(level, width))| FusionLink {
                level,
                tap,
                proj: Conv::new(store, init, &format!("{prefix}.proj{level}"), width, cfg.channels(level), 1),
            })
            .collect();
        Self { links }
    }

    pub fn link_for_level(&self, level: usize) -> Option<&FusionLink> {
        self.links.iter().find(|l| l.level == level)
    }
}

/// Encoder feature maps, finest first, each `(N, C_l, D_l, H_l, W_l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

pub(crate) fn encode_graph<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    cfg: &CnnConfig,
    w: &CnnWeights,
    x: Var,
) -> Result<Vec<Var>> {
    let shape = g.shape(x);
    if shape.len() != 5 || shape[1] != cfg.in_channels {
        return Err(Error::Shape(format!(
            "cnn encoder expects (N, {}, D, H, W), got {shape:?}",
            cfg.in_channels
        )));
    }
    cfg.check_input([shape[2], shape[3], shape[4]])?;
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut h = w.encoder[0].forward(g, p, x, cfg.leaky_slope)?;
    levels.push(h);
    for block in &w.encoder[1..] {
        let pooled = g.max_pool3d(h)?;
        h = block.forward(g, p, pooled, cfg.leaky_slope)?;
        levels.push(h);
    }
    Ok(levels)
}

/// Reorders tokens `(N, D, H, W, C)` into feature maps `(N, C, D, H, W)`.
pub(crate) fn tokens_to_channels<T: Scalar>(g: &Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 5 {
        return Err(Error::Shape(format!("expected token tensor (N, D, H, W, C), got {s:?}")));
    }
    let (n, c) = (s[0], s[4]);
    let spatial = s[1] * s[2] * s[3];
    let mut index = Vec::with_capacity(n * c * spatial);
    for i in 0..n {
        for ch in 0..c {
            for v in 0..spatial {
                index.push(((i * spatial + v) * c + ch) as u32);
            }
        }
    }
    g.gather(x, Rc::new(index), &[n, c, s[1], s[2], s[3]])
}

/// Adds projected taps onto the pyramid. `taps[i]` is `None` to feed zeros.
pub(crate) fn fuse_graph<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    fusion: &FusionWeights,
    pyramid: &[Var],
    taps: &[Option<Var>],
) -> Result<Vec<Var>> {
    let mut fused = pyramid.to_vec();
    for link in &fusion.links {
        let Some(&level_var) = pyramid.get(link.level) else {
            continue;
        };
        let level_shape = g.shape(level_var);
        let add = match taps.get(link.tap).copied().flatten() {
            Some(tap) => {
                let tap = tokens_to_channels(g, tap)?;
                let ts = g.shape(tap);
                if ts[2..] != level_shape[2..] {
                    return Err(Error::Config(format!(
                        "tap {} has extent {:?} but level {} is {:?}",
                        link.tap,
                        &ts[2..],
                        link.level,
                        &level_shape[2..]
                    )));
                }
                link.proj.forward(g, p, tap)?
            }
            None => g.constant(Tensor::zeros(&level_shape)),
        };
        fused[link.level] = g.add(level_var, add)?;
    }
    Ok(fused)
}

pub(crate) fn decode_graph<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    cfg: &CnnConfig,
    w: &CnnWeights,
    fused: &[Var],
) -> Result<Var> {
    if fused.len() != cfg.levels {
        return Err(Error::Shape(format!(
            "decoder expects {} levels, got {}",
            cfg.levels,
            fused.len()
        )));
    }
    let mut h = fused[cfg.levels - 1];
    for l in (0..cfg.levels - 1).rev() {
        let up = w.up[l].forward(g, p, h)?;
        let cat = g.concat_channels(up, fused[l])?;
        h = w.decoder[l].forward(g, p, cat, cfg.leaky_slope)?;
    }
    w.head.forward(g, p, h)
}

fn batch_tensor<T: Scalar>(volume: &Volume<T>) -> Tensor<T> {
    let d = volume.dims();
    Tensor::from_vec(&[1, volume.channels(), d[0], d[1], d[2]], volume.data().to_vec()).expect("volume shape")
}

/// Applies one convolution block to `(N, C, D, H, W)` features.
pub fn conv_block<T: Scalar>(x: &Tensor<T>, store: &ParamStore<T>, block: &ConvBlock, slope: f64) -> Result<Tensor<T>> {
    let g = Graph::new();
    let p = store.bind(&g);
    let xv = g.constant(x.clone());
    let y = block.forward(&g, &p, xv, slope)?;
    Ok((*g.value(y)).clone())
}

/// 2x2x2 max pooling with stride 2.
pub fn downsample<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let y = g.max_pool3d(g.constant(x.clone()))?;
    Ok((*g.value(y)).clone())
}

/// Stride-2 transposed convolution.
pub fn upsample<T: Scalar>(x: &Tensor<T>, store: &ParamStore<T>, up: &ConvTranspose) -> Result<Tensor<T>> {
    let g = Graph::new();
    let p = store.bind(&g);
    let y = up.forward(&g, &p, g.constant(x.clone()))?;
    Ok((*g.value(y)).clone())
}

pub fn cnn_encode<T: Scalar>(
    volume: &Volume<T>,
    cfg: &CnnConfig,
    store: &ParamStore<T>,
    weights: &CnnWeights,
) -> Result<FeaturePyramid<T>> {
    cfg.validate()?;
    let g = Graph::new();
    let p = store.bind(&g);
    let x = g.constant(batch_tensor(volume));
    let levels = encode_graph(&g, &p, cfg, weights, x)?;
    Ok(FeaturePyramid {
        levels: levels.iter().map(|&v| (*g.value(v)).clone()).collect(),
    })
}

/// Adds projected transformer taps onto the lower pyramid levels.
pub fn fuse_taps<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    taps: &EncoderTaps<T>,
    store: &ParamStore<T>,
    fusion: &FusionWeights,
) -> Result<FeaturePyramid<T>> {
    let g = Graph::new();
    let p = store.bind(&g);
    let levels: Vec<Var> = pyramid.levels.iter().map(|t| g.constant(t.clone())).collect();
    let n = pyramid.levels.first().map_or(1, |t| t.shape()[0]);
    let mut tap_vars = Vec::with_capacity(taps.taps.len());
    for tap in &taps.taps {
        let d = tap.dims();
        if n != 1 {
            return Err(Error::Shape("fuse_taps: token grids carry a single sample".into()));
        }
        tap_vars.push(Some(g.constant(Tensor::from_vec(
            &[1, d.d, d.h, d.w, tap.channels()],
            tap.values().to_vec(),
        )?)));
    }
    for link in &fusion.links {
        if link.level < levels.len() && link.tap >= tap_vars.len() {
            return Err(Error::Config(format!("no tap available for fused level {}", link.level)));
        }
    }
    let fused = fuse_graph(&g, &p, fusion, &levels, &tap_vars)?;
    Ok(FeaturePyramid {
        levels: fused.iter().map(|&v| (*g.value(v)).clone()).collect(),
    })
}

/// Decoder from a fused pyramid to `(N, K, D, H, W)` logits.
pub fn cnn_decode<T: Scalar>(
    fused: &FeaturePyramid<T>,
    cfg: &CnnConfig,
    store: &ParamStore<T>,
    weights: &CnnWeights,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let p = store.bind(&g);
    let levels: Vec<Var> = fused.levels.iter().map(|t| g.constant(t.clone())).collect();
    let y = decode_graph(&g, &p, cfg, weights, &levels)?;
    Ok((*g.value(y)).clone())
}
