//! The assembled network: CNN path, transformer path, fusion and decoder,
//! plus the single-encoder ablations.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{softmax_channels, Graph, LossParts, Var};
use crate::cnn::{self, CnnConfig, CnnWeights, FusionWeights};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::swin::{self, PlanCache, SwinConfig, SwinWeights, STAGES};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Hybrid,
    CnnOnly,
    SwinOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Hybrid, Mode::CnnOnly, Mode::SwinOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Hybrid => "hybrid",
            Mode::CnnOnly => "cnn_only",
            Mode::SwinOnly => "swin_only",
        }
    }

    fn uses_swin(self) -> bool {
        self != Mode::CnnOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Mode::Hybrid),
            "cnn_only" => Ok(Mode::CnnOnly),
            "swin_only" => Ok(Mode::SwinOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected hybrid, cnn_only or swin_only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub in_channels: usize,
    pub num_classes: usize,
    pub cnn: CnnConfig,
    pub swin: SwinConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hybrid,
            in_channels: 1,
            num_classes: 3,
            cnn: CnnConfig::default(),
            swin: SwinConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for 8^3 inputs used by gradient checks and smoke runs.
    pub fn micro(num_classes: usize) -> Self {
        Self {
            mode: Mode::Hybrid,
            in_channels: 1,
            num_classes,
            cnn: CnnConfig {
                in_channels: 1,
                levels: 4,
                base_channels: 2,
                kernel: 3,
                num_classes,
                leaky_slope: 0.01,
            },
            swin: SwinConfig {
                in_channels: 1,
                patch: [1, 1, 1],
                embed_dim: 4,
                heads: [1, 1, 2, 2],
                window: [2, 2, 2],
                mlp_ratio: 2.0,
                use_relative_bias: true,
            },
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Sets class and channel counts consistently on every sub-config.
    pub fn with_io(mut self, in_channels: usize, num_classes: usize) -> Self {
        self.in_channels = in_channels;
        self.num_classes = num_classes;
        self.cnn.in_channels = in_channels;
        self.cnn.num_classes = num_classes;
        self.swin.in_channels = in_channels;
        self
    }

    /// Pyramid level each transformer tap lands on, if the patch size is an
    /// isotropic power of two.
    pub fn tap_levels(&self) -> Option<Vec<usize>> {
        let p = self.swin.patch[0];
        if self.swin.patch.iter().any(|&q| q != p) || !p.is_power_of_two() {
            return None;
        }
        let base = p.trailing_zeros() as usize;
        Some((0..STAGES).map(|s| base + s).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.cnn.num_classes != self.num_classes
            || self.cnn.in_channels != self.in_channels
            || self.swin.in_channels != self.in_channels
        {
            return Err(Error::Config("class/channel counts disagree between sub-configs".into()));
        }
        self.cnn.validate()?;
        if self.mode.uses_swin() {
            self.swin.validate()?;
            let levels = self.tap_levels().ok_or_else(|| {
                Error::Config(format!(
                    "patch {:?} must be an isotropic power of two to align taps with pyramid levels",
                    self.swin.patch
                ))
            })?;
            let fused = levels.iter().filter(|&&l| l >= 1 && l < self.cnn.levels).count();
            if fused == 0 {
                return Err(Error::Config("no transformer tap aligns with a fused pyramid level".into()));
            }
            if self.mode == Mode::SwinOnly {
                for l in 1..self.cnn.levels {
                    if !levels.contains(&l) {
                        return Err(Error::Config(format!(
                            "swin_only needs a transformer tap at pyramid level {l}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every input extent must be a multiple of this.
    pub fn input_divisor(&self) -> usize {
        let mut div = self.cnn.divisor();
        if self.mode.uses_swin() {
            for &p in &self.swin.patch {
                div = lcm(div, p);
            }
        }
        div
    }

    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        self.cnn.check_input(dims)?;
        if self.mode.uses_swin() {
            self.swin.tap_dims(dims)?;
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    cnn: CnnWeights,
    swin: SwinWeights,
    fusion: FusionWeights,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes every parameter from `seed`.
    ///
    /// All three modes allocate the same parameters in the same order, so
    /// equal seeds give equal weights across ablations.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let cnn = CnnWeights::new(&mut store, &mut init, "cnn", &config.cnn);
        let swin = SwinWeights::new(&mut store, &mut init, "swin", &config.swin);
        let tap_levels: Vec<(usize, usize)> = match config.tap_levels() {
            Some(levels) => levels
                .into_iter()
                .enumerate()
                .map(|(s, l)| (l, config.swin.stage_width(s)))
                .collect(),
            None => Vec::new(),
        };
        let fusion = FusionWeights::new(&mut store, &mut init, "fuse", &config.cnn, &tap_levels);
        Ok(Self {
            config,
            store,
            cnn,
            swin,
            fusion,
        })
    }

    /// Rebuilds a model around previously saved weights.
    pub fn from_store(config: ModelConfig, loaded: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if loaded.len() != model.store.len() {
            return Err(Error::Config(format!(
                "expected {} weight arrays, found {}",
                model.store.len(),
                loaded.len()
            )));
        }
        for (name, tensor) in loaded.iter() {
            model.store.set(name, tensor.clone())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cnn_weights(&self) -> &CnnWeights {
        &self.cnn
    }

    pub fn swin_weights(&self) -> &SwinWeights {
        &self.swin
    }

    pub fn fusion_weights(&self) -> &FusionWeights {
        &self.fusion
    }

    /// Same weights, different mode.
    pub fn with_mode(&self, mode: Mode) -> Result<Self> {
        let config = self.config.clone().with_mode(mode);
        config.validate()?;
        Ok(Self {
            config,
            ..self.clone()
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            cnn: self.cnn.clone(),
            swin: self.swin.clone(),
            fusion: self.fusion.clone(),
        }
    }

    /// Records the forward pass of `x: (N, Cin, D, H, W)` on `g`.
    pub fn forward_graph(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 5 {
            return Err(Error::Shape(format!("model input must be (N, C, D, H, W), got {shape:?}")));
        }
        self.config.check_input([shape[2], shape[3], shape[4]])?;
        let cfg = &self.config;
        let fused = match cfg.mode {
            Mode::Hybrid | Mode::CnnOnly => {
                let pyramid = cnn::encode_graph(g, p, &cfg.cnn, &self.cnn, x)?;
                let taps: Vec<Option<Var>> = if cfg.mode == Mode::Hybrid {
                    let mut cache = PlanCache::new();
                    swin::encoder_graph(g, p, &mut cache, &cfg.swin, &self.swin, x)?
                        .into_iter()
                        .map(|(v, _)| Some(v))
                        .collect()
                } else {
                    vec![None; STAGES]
                };
                cnn::fuse_graph(g, p, &self.fusion, &pyramid, &taps)?
            }
            Mode::SwinOnly => {
                let stem = self.cnn.encoder[0].forward(g, p, x, cfg.cnn.leaky_slope)?;
                let mut cache = PlanCache::new();
                let taps = swin::encoder_graph(g, p, &mut cache, &cfg.swin, &self.swin, x)?;
                let mut levels = vec![stem];
                for l in 1..cfg.cnn.levels {
                    let link = self
                        .fusion
                        .link_for_level(l)
                        .ok_or_else(|| Error::Config(format!("no tap for pyramid level {l}")))?;
                    let tap = cnn::tokens_to_channels(g, taps[link.tap].0)?;
                    levels.push(link.proj.forward(g, p, tap)?);
                }
                levels
            }
        };
        cnn::decode_graph(g, p, &cfg.cnn, &self.cnn, &fused)
    }

    /// Logits `(N, K, D, H, W)` for a batch `(N, Cin, D, H, W)`.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.store.bind(&g);
        let x = g.constant(input.clone());
        let y = self.forward_graph(&g, &p, x)?;
        Ok((*g.value(y)).clone())
    }

    /// Loss on a batch and the gradient of every parameter, in store order.
    pub fn loss_and_grads(&self, input: &Tensor<T>, labels: &[u8]) -> Result<(LossParts, Vec<Vec<T>>)> {
        let g = Graph::new();
        let p = self.store.bind(&g);
        let x = g.constant(input.clone());
        let y = self.forward_graph(&g, &p, x)?;
        let (loss, parts) = g.segmentation_loss(y, labels)?;
        let grads = g.backward(loss)?;
        Ok((parts, p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect()))
    }

    pub fn loss(&self, input: &Tensor<T>, labels: &[u8]) -> Result<LossParts> {
        let g = Graph::new();
        let p = self.store.bind(&g);
        let x = g.constant(input.clone());
        let y = self.forward_graph(&g, &p, x)?;
        Ok(g.segmentation_loss(y, labels)?.1)
    }
}

impl Model<f32> {
    /// Logits for a single volume, zero-padding to a compatible extent and
    /// cropping back.
    pub fn forward_volume(&self, volume: &Volume<f32>) -> Result<Tensor<f32>> {
        let dims = volume.dims();
        let div = self.config.input_divisor();
        let padded_dims = dims.map(|e| e.div_ceil(div) * div);
        let padded = volume.pad_to(padded_dims)?;
        let input = Tensor::from_vec(
            &[1, padded.channels(), padded_dims[0], padded_dims[1], padded_dims[2]],
            padded.into_data(),
        )?;
        let logits = self.logits(&input)?;
        if padded_dims == dims {
            return Ok(logits);
        }
        let k = self.config.num_classes;
        let vol = Volume::new(k, padded_dims, volume.spacing(), logits.into_data())?.crop_to(dims)?;
        Tensor::from_vec(&[1, k, dims[0], dims[1], dims[2]], vol.into_data())
    }

    /// Per-voxel class map for one volume.
    pub fn predict(&self, volume: &Volume<f32>) -> Result<LabelVolume> {
        let logits = self.forward_volume(volume)?;
        let labels = argmax_channels(&logits)?;
        LabelVolume::new(1, volume.dims(), volume.spacing(), labels)
    }
}

/// Argmax over the class axis of `(1, K, D, H, W)`; ties go to the lowest class.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() < 3 || s[0] != 1 {
        return Err(Error::Shape(format!("argmax expects (1, K, ...), got {s:?}")));
    }
    let k = s[1];
    if k > u8::MAX as usize + 1 {
        return Err(Error::Config(format!("{k} classes do not fit in u8 labels")));
    }
    let n: usize = s[2..].iter().product();
    let data = logits.data();
    Ok((0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if data[c * n + v] > data[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Per-voxel class probabilities `(N, K, S)` in `f64`.
pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let s = logits.shape();
    softmax_channels(logits.data(), s[0], s[1], s[2..].iter().product())
}
