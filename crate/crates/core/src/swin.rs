//! Shifted-window transformer encoder path.
//!
//! Patch partition plus a linear embedding feed four stages. Each stage runs
//! a regular-window block followed by a shifted-window block and emits a
//! normalized tap; stages are joined by 2x2x2 patch merging with an `8C -> 2C`
//! linear reduction. Tap `s` therefore sits at `1 / (patch * 2^s)` of the
//! input resolution with `C * 2^s` channels.

use std::collections::HashMap;
use std::rc::Rc;

use crate::autograd::{self, Graph, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::geometry::{
    build_window_mask, crop, cyclic_shift, merge_neighborhoods, pad_to_multiple, pad_to_window, patch_partition,
    window_partition, window_reverse, AttentionMask, GridDims, TokenGrid, WindowBatch, WindowSpec,
};
use crate::layers::{Linear, Norm};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::volume::Volume;

pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SwinConfig {
    pub in_channels: usize,
    pub patch: [usize; 3],
    pub embed_dim: usize,
    pub heads: [usize; STAGES],
    pub window: [usize; 3],
    pub mlp_ratio: f64,
    pub use_relative_bias: bool,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            patch: [2, 2, 2],
            embed_dim: 24,
            heads: [3, 6, 12, 24],
            window: [4, 4, 4],
            mlp_ratio: 4.0,
            use_relative_bias: true,
        }
    }
}

impl SwinConfig {
    pub fn stage_width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn mlp_hidden(&self, stage: usize) -> usize {
        ((self.stage_width(stage) as f64) * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("swin: channel counts must be positive".into()));
        }
        if self.patch.contains(&0) || self.window.contains(&0) {
            return Err(Error::Config("swin: patch and window extents must be positive".into()));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return Err(Error::Config(format!("swin: mlp_ratio {} must be positive", self.mlp_ratio)));
        }
        for s in 0..STAGES {
            let width = self.stage_width(s);
            let heads = self.heads[s];
            if heads == 0 || !width.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "swin: stage {s} width {width} is not divisible by {heads} heads"
                )));
            }
            if self.mlp_hidden(s) == 0 {
                return Err(Error::Config(format!("swin: stage {s} MLP has no hidden units")));
            }
        }
        Ok(())
    }

    /// Token-grid extents of the four taps for an input of extent `input`.
    pub fn tap_dims(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let mut dims = [0; 3];
        for a in 0..3 {
            if !input[a].is_multiple_of(self.patch[a]) {
                return Err(Error::NotDivisible {
                    axis: ['d', 'h', 'w'][a],
                    extent: input[a],
                    divisor: self.patch[a],
                });
            }
            dims[a] = input[a] / self.patch[a];
        }
        let mut out = vec![dims];
        for _ in 1..STAGES {
            dims = dims.map(|e| e.div_ceil(2));
            out.push(dims);
        }
        Ok(out)
    }
}

/// Parameters of one transformer layer (W-MSA or SW-MSA plus MLP).
#[derive(Clone, Copy, Debug)]
pub struct BlockWeights {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_table: Option<ParamId>,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockWeights {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        window: [usize; 3],
        relative_bias: bool,
    ) -> Self {
        let norm1 = Norm::new(store, &format!("{name}.norm1"), width);
        let qkv = Linear::new(store, init, &format!("{name}.qkv"), width, 3 * width, true);
        let proj = Linear::new(store, init, &format!("{name}.proj"), width, width, true);
        let rel_table = relative_bias.then(|| {
            store.insert(
                format!("{name}.rel_bias"),
                Tensor::zeros(&[relative_table_len(window), heads]),
            )
        });
        let norm2 = Norm::new(store, &format!("{name}.norm2"), width);
        let fc1 = Linear::new(store, init, &format!("{name}.fc1"), width, hidden, true);
        let fc2 = Linear::new(store, init, &format!("{name}.fc2"), hidden, width, true);
        Self {
            norm1,
            qkv,
            proj,
            rel_table,
            norm2,
            fc1,
            fc2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageWeights {
    /// Regular-window layer then shifted-window layer.
    pub blocks: [BlockWeights; 2],
    pub tap_norm: Norm,
}

#[derive(Clone, Debug)]
pub struct SwinWeights {
    pub embed: Linear,
    pub stages: Vec<StageWeights>,
    /// `8C -> 2C` reductions between consecutive stages.
    pub merges: Vec<Linear>,
}

impl SwinWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, cfg: &SwinConfig) -> Self {
        let patch_len = cfg.in_channels * cfg.patch.iter().product::<usize>();
        let embed = Linear::new(store, init, &format!("{prefix}.embed"), patch_len, cfg.embed_dim, true);
        let mut stages = Vec::with_capacity(STAGES);
        let mut merges = Vec::with_capacity(STAGES - 1);
        for s in 0..STAGES {
            let width = cfg.stage_width(s);
            let block = |store: &mut ParamStore<T>, init: &mut Init, layer: usize| {
                BlockWeights::new(
                    store,
                    init,
                    &format!("{prefix}.stage{s}.layer{layer}"),
                    width,
                    cfg.heads[s],
                    cfg.mlp_hidden(s),
                    cfg.window,
                    cfg.use_relative_bias,
                )
            };
            let blocks = [block(store, init, 0), block(store, init, 1)];
            let tap_norm = Norm::new(store, &format!("{prefix}.stage{s}.tap_norm"), width);
            stages.push(StageWeights { blocks, tap_norm });
            if s + 1 < STAGES {
                merges.push(Linear::new(
                    store,
                    init,
                    &format!("{prefix}.merge{s}"),
                    8 * width,
                    2 * width,
                    false,
                ));
            }
        }
        Self { embed, stages, merges }
    }
}

/// Per-stage encoder outputs, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTaps<T> {
    pub taps: Vec<TokenGrid<T>>,
    /// Per-axis downsampling factor of each tap relative to the input volume.
    pub factors: Vec<[usize; 3]>,
}

pub fn relative_table_len(window: [usize; 3]) -> usize {
    window.iter().map(|&w| 2 * w - 1).product()
}

/// Row of the relative-position table for every (query, key) pair in a window.
pub fn relative_position_index(window: [usize; 3]) -> Vec<u32> {
    let [wd, wh, ww] = window;
    let coords: Vec<[usize; 3]> = (0..wd)
        .flat_map(|d| (0..wh).flat_map(move |h| (0..ww).map(move |w| [d, h, w])))
        .collect();
    let mut index = Vec::with_capacity(coords.len() * coords.len());
    for ci in &coords {
        for cj in &coords {
            let rd = ci[0] + wd - 1 - cj[0];
            let rh = ci[1] + wh - 1 - cj[1];
            let rw = ci[2] + ww - 1 - cj[2];
            index.push(((rd * (2 * wh - 1) + rh) * (2 * ww - 1) + rw) as u32);
        }
    }
    index
}

/// Repeats a single-sample gather map for `n` samples.
fn replicate(index: &[u32], n: usize, in_stride: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(index.len() * n);
    for i in 0..n {
        let off = (i * in_stride) as u32;
        out.extend(index.iter().map(|&v| if v == GATHER_ZERO { v } else { v + off }));
    }
    out
}

/// Gather maps and mask for one windowed layer on a given grid.
pub(crate) struct WindowPlan<T> {
    pub padded: GridDims,
    pub num_windows: usize,
    pub to_windows: Vec<u32>,
    pub from_windows: Vec<u32>,
    pub mask: Option<Rc<Tensor<T>>>,
}

impl<T: Scalar> WindowPlan<T> {
    pub fn new(dims: GridDims, channels: usize, spec: &WindowSpec) -> Result<Self> {
        let iota = TokenGrid::iota(dims, channels);
        let (padded_grid, record) = pad_to_window(&iota, spec);
        let rolled = cyclic_shift(&padded_grid, spec.shift.map(|s| s as isize));
        let batch = window_partition(&rolled, spec)?;
        let num_windows = batch.num_windows();
        let to_windows = batch.into_values();

        let padded = record.padded();
        let slots = TokenGrid::iota(padded, channels).into_values();
        let back = window_reverse(&WindowBatch::new(padded, *spec, channels, slots)?)?;
        let back = cyclic_shift(&back, spec.shift.map(|s| -(s as isize)));
        let from_windows = crop(&back, &record)?.into_values();

        let mask = build_window_mask(padded, dims, spec)?;
        let mask = (!mask.is_zero()).then(|| Rc::new(mask_tensor(&mask)));
        Ok(Self {
            padded,
            num_windows,
            to_windows,
            from_windows,
            mask,
        })
    }
}

fn mask_tensor<T: Scalar>(mask: &AttentionMask) -> Tensor<T> {
    Tensor::from_vec(
        &[mask.num_windows(), mask.tokens(), mask.tokens()],
        mask.values().iter().map(|&v| T::cast_from(v)).collect(),
    )
    .expect("mask shape")
}

/// Memoized geometry for one forward pass.
pub(crate) struct PlanCache<T> {
    windows: HashMap<(GridDims, usize, [usize; 3], [usize; 3]), Rc<WindowPlan<T>>>,
    rel_index: HashMap<[usize; 3], Rc<Vec<u32>>>,
}

impl<T: Scalar> PlanCache<T> {
    pub fn new() -> Self {
        Self {
            windows: HashMap::new(),
            rel_index: HashMap::new(),
        }
    }

    fn window(&mut self, dims: GridDims, channels: usize, spec: &WindowSpec) -> Result<Rc<WindowPlan<T>>> {
        let key = (dims, channels, spec.window, spec.shift);
        if let Some(p) = self.windows.get(&key) {
            return Ok(Rc::clone(p));
        }
        let plan = Rc::new(WindowPlan::new(dims, channels, spec)?);
        self.windows.insert(key, Rc::clone(&plan));
        Ok(plan)
    }

    fn rel_index(&mut self, window: [usize; 3]) -> Rc<Vec<u32>> {
        Rc::clone(
            self.rel_index
                .entry(window)
                .or_insert_with(|| Rc::new(relative_position_index(window))),
        )
    }
}

/// qkv projection, windowed attention and output projection on `(B, T, C)`.
pub(crate) fn attention_graph<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    block: &BlockWeights,
    windows: Var,
    mask: Option<Rc<Tensor<T>>>,
    rel_index: Rc<Vec<u32>>,
    heads: usize,
) -> Result<Var> {
    let qkv = block.qkv.forward(g, p, windows)?;
    let table = block.rel_table.map(|t| (p.var(t), rel_index));
    let attended = g.window_attention(qkv, table, mask, heads)?;
    block.proj.forward(g, p, attended)
}

/// One pre-norm transformer layer on tokens `(N, D, H, W, C)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_graph<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    cache: &mut PlanCache<T>,
    block: &BlockWeights,
    x: Var,
    n: usize,
    dims: GridDims,
    spec: &WindowSpec,
    heads: usize,
) -> Result<Var> {
    let c = *g.shape(x).last().expect("token tensor");
    let plan = cache.window(dims, c, spec)?;
    let tokens = spec.tokens_per_window();
    let per_sample = dims.numel() * c;

    let h = block.norm1.layer(g, p, x)?;
    let to = Rc::new(replicate(&plan.to_windows, n, per_sample));
    let win = g.gather(h, to, &[n * plan.num_windows, tokens, c])?;
    let attended = attention_graph(g, p, block, win, plan.mask.clone(), cache.rel_index(spec.window), heads)?;
    let from = Rc::new(replicate(&plan.from_windows, n, plan.padded.numel() * c));
    let back = g.gather(attended, from, &[n, dims.d, dims.h, dims.w, c])?;
    let x = g.add(x, back)?;

    let h = block.norm2.layer(g, p, x)?;
    let h = block.fc1.forward(g, p, h)?;
    let h = g.gelu(h);
    let h = block.fc2.forward(g, p, h)?;
    g.add(x, h)
}

/// Patch merging on tokens `(N, D, H, W, C)`, padding odd extents first.
pub(crate) fn merge_graph<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    reduce: &Linear,
    x: Var,
    n: usize,
    dims: GridDims,
) -> Result<(Var, GridDims)> {
    let c = *g.shape(x).last().expect("token tensor");
    let iota = TokenGrid::iota(dims, c);
    let (padded, _) = pad_to_multiple(&iota, [2, 2, 2]);
    let merged = merge_neighborhoods(&padded)?;
    let out_dims = merged.dims();
    let index = Rc::new(replicate(merged.values(), n, dims.numel() * c));
    let gathered = g.gather(x, index, &[n, out_dims.d, out_dims.h, out_dims.w, 8 * c])?;
    Ok((reduce.forward(g, p, gathered)?, out_dims))
}

/// Full encoder on a batch `(N, Cin, D, H, W)`; returns the four normalized
/// taps as `(N, D_s, H_s, W_s, C_s)` tokens with their grid extents.
pub(crate) fn encoder_graph<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    cache: &mut PlanCache<T>,
    cfg: &SwinConfig,
    weights: &SwinWeights,
    x: Var,
) -> Result<Vec<(Var, GridDims)>> {
    let shape = g.shape(x);
    if shape.len() != 5 || shape[1] != cfg.in_channels {
        return Err(Error::Shape(format!(
            "swin encoder expects (N, {}, D, H, W), got {shape:?}",
            cfg.in_channels
        )));
    }
    let n = shape[0];
    let vol_dims = [shape[2], shape[3], shape[4]];
    let iota = Volume::new(
        cfg.in_channels,
        vol_dims,
        [1.0; 3],
        (0..(cfg.in_channels * vol_dims.iter().product::<usize>()) as u32).collect(),
    )?;
    let patches = patch_partition(&iota, cfg.patch)?;
    let mut dims = patches.dims();
    let patch_len = patches.channels();
    let index = Rc::new(replicate(patches.values(), n, iota.data().len()));
    let tokens = g.gather(x, index, &[n, dims.d, dims.h, dims.w, patch_len])?;
    let mut x = weights.embed.forward(g, p, tokens)?;

    let regular = WindowSpec::regular(cfg.window)?;
    let shifted = WindowSpec::shifted(cfg.window)?;
    let mut taps = Vec::with_capacity(STAGES);
    for (s, stage) in weights.stages.iter().enumerate() {
        x = block_graph(g, p, cache, &stage.blocks[0], x, n, dims, &regular, cfg.heads[s])?;
        x = block_graph(g, p, cache, &stage.blocks[1], x, n, dims, &shifted, cfg.heads[s])?;
        taps.push((stage.tap_norm.layer(g, p, x)?, dims));
        if let Some(reduce) = weights.merges.get(s) {
            let (merged, next) = merge_graph(g, p, reduce, x, n, dims)?;
            x = merged;
            dims = next;
        }
    }
    Ok(taps)
}

fn grid_var<T: Scalar>(g: &Graph<T>, grid: &TokenGrid<T>) -> Var {
    let d = grid.dims();
    g.constant(
        Tensor::from_vec(&[1, d.d, d.h, d.w, grid.channels()], grid.values().to_vec()).expect("grid shape"),
    )
}

fn var_grid<T: Scalar>(g: &Graph<T>, v: Var, dims: GridDims) -> Result<TokenGrid<T>> {
    let t = g.value(v);
    let c = *t.shape().last().expect("tokens");
    TokenGrid::new(dims, c, t.data().to_vec())
}

/// Per-token affine map of a partitioned grid to the embedding width.
pub fn linear_embed<T: Scalar>(tokens: &TokenGrid<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<TokenGrid<T>> {
    let g = Graph::new();
    let x = grid_var(&g, tokens);
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = g.linear(x, w, Some(b))?;
    var_grid(&g, y, tokens.dims())
}

/// Multi-head attention inside each window, including the qkv and output
/// projections of `block`.
pub fn window_attention<T: Scalar>(
    batch: &WindowBatch<T>,
    mask: &AttentionMask,
    store: &ParamStore<T>,
    block: &BlockWeights,
    heads: usize,
) -> Result<WindowBatch<T>> {
    if mask.num_windows() != batch.num_windows() || mask.tokens() != batch.tokens_per_window() {
        return Err(Error::Shape(format!(
            "mask ({}, {}) does not match batch ({}, {})",
            mask.num_windows(),
            mask.tokens(),
            batch.num_windows(),
            batch.tokens_per_window()
        )));
    }
    let g = Graph::new();
    let p = store.bind(&g);
    let c = batch.channels();
    let x = g.constant(Tensor::from_vec(
        &[batch.num_windows(), batch.tokens_per_window(), c],
        batch.values().to_vec(),
    )?);
    let mask = (!mask.is_zero()).then(|| Rc::new(mask_tensor(mask)));
    let rel = Rc::new(relative_position_index(batch.spec().window));
    let y = attention_graph(&g, &p, block, x, mask, rel, heads)?;
    WindowBatch::new(batch.source(), batch.spec(), c, g.value(y).data().to_vec())
}

/// Softmax attention weights `(num_windows, heads, T, T)` that
/// [`window_attention`] applies.
pub fn attention_probabilities<T: Scalar>(
    batch: &WindowBatch<T>,
    mask: &AttentionMask,
    store: &ParamStore<T>,
    block: &BlockWeights,
    heads: usize,
) -> Result<Vec<T>> {
    let g = Graph::new();
    let p = store.bind(&g);
    let x = g.constant(Tensor::from_vec(
        &[batch.num_windows(), batch.tokens_per_window(), batch.channels()],
        batch.values().to_vec(),
    )?);
    let qkv = block.qkv.forward(&g, &p, x)?;
    let mask = (!mask.is_zero()).then(|| mask_tensor(mask));
    let table = block.rel_table.map(|t| store.get(t));
    let rel = relative_position_index(batch.spec().window);
    autograd::attention_probs(&g.value(qkv), table.map(|t| (t, rel.as_slice())), mask.as_ref(), heads)
}

/// One transformer layer on a single grid. With `shifted == false` the
/// spec's shift is ignored.
pub fn swin_block<T: Scalar>(
    grid: &TokenGrid<T>,
    spec: &WindowSpec,
    store: &ParamStore<T>,
    block: &BlockWeights,
    heads: usize,
    shifted: bool,
) -> Result<TokenGrid<T>> {
    let spec = if shifted { *spec } else { WindowSpec::regular(spec.window)? };
    let g = Graph::new();
    let p = store.bind(&g);
    let x = grid_var(&g, grid);
    let mut cache = PlanCache::new();
    let y = block_graph(&g, &p, &mut cache, block, x, 1, grid.dims(), &spec, heads)?;
    var_grid(&g, y, grid.dims())
}

/// Patch merging followed by the linear `8C -> 2C` reduction (`weight: (8C, 2C)`).
pub fn patch_merge_reduce<T: Scalar>(grid: &TokenGrid<T>, weight: &Tensor<T>) -> Result<TokenGrid<T>> {
    let merged = merge_neighborhoods(grid)?;
    let g = Graph::new();
    let x = grid_var(&g, &merged);
    let w = g.constant(weight.clone());
    let y = g.linear(x, w, None)?;
    var_grid(&g, y, merged.dims())
}

/// Runs the encoder on one volume and returns its four taps.
pub fn encoder_forward<T: Scalar>(
    volume: &Volume<T>,
    cfg: &SwinConfig,
    store: &ParamStore<T>,
    weights: &SwinWeights,
) -> Result<EncoderTaps<T>> {
    cfg.validate()?;
    cfg.tap_dims(volume.dims())?;
    let g = Graph::new();
    let p = store.bind(&g);
    let d = volume.dims();
    let x = g.constant(Tensor::from_vec(
        &[1, volume.channels(), d[0], d[1], d[2]],
        volume.data().to_vec(),
    )?);
    let mut cache = PlanCache::new();
    let taps = encoder_graph(&g, &p, &mut cache, cfg, weights, x)?;
    let mut out = EncoderTaps {
        taps: Vec::with_capacity(taps.len()),
        factors: Vec::with_capacity(taps.len()),
    };
    for (s, (v, dims)) in taps.into_iter().enumerate() {
        out.taps.push(var_grid(&g, v, dims)?);
        out.factors.push(cfg.patch.map(|pt| pt << s));
    }
    Ok(out)
}

