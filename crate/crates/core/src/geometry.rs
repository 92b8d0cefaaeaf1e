//! Index algebra for shifted-window attention.
//!
//! All routines are pure data movement over [`TokenGrid`]s and are generic
//! over the element type, so the same code permutes feature values and
//! integer index grids (the autodiff layer builds its gather maps by running
//! these functions on a grid of flat indices).
//!
//! Token grids are `(D, H, W, C)` with the raster order d-major, then h,
//! then w. Windows are enumerated in raster order over window coordinates and
//! tokens inside a window are again raster ordered.

use crate::error::{Error, Result};
use crate::tensor::Element;
use crate::volume::Volume;

/// Additive attention bias for pairs that must not interact.
pub const MASK_NEG: f64 = -10_000.0;

const AXES: [char; 3] = ['d', 'h', 'w'];

/// Region id given to padded tokens; never produced by the 27 real regions.
const PAD_REGION: u32 = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(d: usize, h: usize, w: usize) -> Result<Self> {
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("grid dims must be positive, got ({d}, {h}, {w})")));
        }
        Ok(Self { d, h, w })
    }

    pub fn from_array(a: [usize; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn numel(self) -> usize {
        self.d * self.h * self.w
    }

    #[inline]
    fn flat(self, d: usize, h: usize, w: usize) -> usize {
        (d * self.h + h) * self.w + w
    }
}

/// Window extent and cyclic shift per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowSpec {
    pub fn new(window: [usize; 3], shift: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if window[a] == 0 {
                return Err(Error::Config(format!("window extent on axis {} is zero", AXES[a])));
            }
            if shift[a] >= window[a] {
                return Err(Error::Config(format!(
                    "shift {} on axis {} must be smaller than the window extent {}",
                    shift[a], AXES[a], window[a]
                )));
            }
        }
        Ok(Self { window, shift })
    }

    /// Unshifted windows (W-MSA).
    pub fn regular(window: [usize; 3]) -> Result<Self> {
        Self::new(window, [0; 3])
    }

    /// Windows displaced by half their extent (SW-MSA).
    pub fn shifted(window: [usize; 3]) -> Result<Self> {
        Self::new(window, window.map(|w| w / 2))
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s != 0)
    }
}

/// 3D lattice of token vectors, `(D, H, W, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    dims: GridDims,
    channels: usize,
    values: Vec<T>,
}

impl<T: Element> TokenGrid<T> {
    pub fn new(dims: GridDims, channels: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("token grid needs at least one channel".into()));
        }
        if values.len() != dims.numel() * channels {
            return Err(Error::Shape(format!(
                "token grid {:?} x {channels} needs {} values, got {}",
                dims.to_array(),
                dims.numel() * channels,
                values.len()
            )));
        }
        Ok(Self {
            dims,
            channels,
            values,
        })
    }

    pub fn filled(dims: GridDims, channels: usize, value: T) -> Self {
        Self {
            dims,
            channels,
            values: vec![value; dims.numel() * channels],
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn token(&self, d: usize, h: usize, w: usize) -> &[T] {
        let start = self.dims.flat(d, h, w) * self.channels;
        &self.values[start..start + self.channels]
    }

    fn token_mut(&mut self, d: usize, h: usize, w: usize) -> &mut [T] {
        let start = self.dims.flat(d, h, w) * self.channels;
        &mut self.values[start..start + self.channels]
    }
}

impl TokenGrid<u32> {
    /// Grid whose every element holds its own flat position.
    pub fn iota(dims: GridDims, channels: usize) -> Self {
        let n = dims.numel() * channels;
        assert!(n < u32::MAX as usize, "index grid too large");
        Self {
            dims,
            channels,
            values: (0..n as u32).collect(),
        }
    }
}

/// Tokens cut into non-overlapping windows, `(num_windows, tokens, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch<T> {
    source: GridDims,
    spec: WindowSpec,
    channels: usize,
    values: Vec<T>,
}

impl<T: Element> WindowBatch<T> {
    pub fn new(source: GridDims, spec: WindowSpec, channels: usize, values: Vec<T>) -> Result<Self> {
        check_divisible(source, &spec)?;
        if values.len() != source.numel() * channels {
            return Err(Error::Shape(format!(
                "window batch for {:?} x {channels} needs {} values, got {}",
                source.to_array(),
                source.numel() * channels,
                values.len()
            )));
        }
        Ok(Self {
            source,
            spec,
            channels,
            values,
        })
    }

    /// Grid dims (after any padding) the windows were cut from.
    pub fn source(&self) -> GridDims {
        self.source
    }

    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_windows(&self) -> usize {
        window_counts(self.source, &self.spec).iter().product()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.spec.tokens_per_window()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn window(&self, index: usize) -> &[T] {
        let len = self.tokens_per_window() * self.channels;
        &self.values[index * len..(index + 1) * len]
    }
}

/// Pairwise additive bias per window, `(num_windows, tokens, tokens)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    num_windows: usize,
    tokens: usize,
    values: Vec<f64>,
}

impl AttentionMask {
    pub fn zeros(num_windows: usize, tokens: usize) -> Self {
        Self {
            num_windows,
            tokens,
            values: vec![0.0; num_windows * tokens * tokens],
        }
    }

    pub fn num_windows(&self) -> usize {
        self.num_windows
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, window: usize, i: usize, j: usize) -> f64 {
        self.values[(window * self.tokens + i) * self.tokens + j]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// What [`pad_to_window`] added on the high side of each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub original: GridDims,
    pub pad: [usize; 3],
}

impl PadRecord {
    pub fn is_empty(&self) -> bool {
        self.pad == [0; 3]
    }

    pub fn padded(&self) -> GridDims {
        GridDims {
            d: self.original.d + self.pad[0],
            h: self.original.h + self.pad[1],
            w: self.original.w + self.pad[2],
        }
    }
}

fn check_divisible(dims: GridDims, spec: &WindowSpec) -> Result<()> {
    let extents = dims.to_array();
    for a in 0..3 {
        if !extents[a].is_multiple_of(spec.window[a]) {
            return Err(Error::NotDivisible {
                axis: AXES[a],
                extent: extents[a],
                divisor: spec.window[a],
            });
        }
    }
    Ok(())
}

fn window_counts(dims: GridDims, spec: &WindowSpec) -> [usize; 3] {
    let e = dims.to_array();
    [0, 1, 2].map(|a| e[a] / spec.window[a])
}

/// Splits a channel-first volume into non-overlapping patches.
///
/// Each output token is the concatenation of its patch's voxels in raster
/// order, every voxel contributing its `C` channel values consecutively.
pub fn patch_partition<T: Element>(volume: &Volume<T>, patch: [usize; 3]) -> Result<TokenGrid<T>> {
    let dims = volume.dims();
    for a in 0..3 {
        if patch[a] == 0 {
            return Err(Error::Config(format!("patch size on axis {} is zero", AXES[a])));
        }
        if !dims[a].is_multiple_of(patch[a]) {
            return Err(Error::NotDivisible {
                axis: AXES[a],
                extent: dims[a],
                divisor: patch[a],
            });
        }
    }
    let grid = GridDims::new(dims[0] / patch[0], dims[1] / patch[1], dims[2] / patch[2])?;
    let cin = volume.channels();
    let channels = cin * patch.iter().product::<usize>();
    let mut values = Vec::with_capacity(grid.numel() * channels);
    for gd in 0..grid.d {
        for gh in 0..grid.h {
            for gw in 0..grid.w {
                for pd in 0..patch[0] {
                    for ph in 0..patch[1] {
                        for pw in 0..patch[2] {
                            let (d, h, w) =
                                (gd * patch[0] + pd, gh * patch[1] + ph, gw * patch[2] + pw);
                            for c in 0..cin {
                                values.push(volume.get(c, d, h, w));
                            }
                        }
                    }
                }
            }
        }
    }
    TokenGrid::new(grid, channels, values)
}

pub fn window_partition<T: Element>(grid: &TokenGrid<T>, spec: &WindowSpec) -> Result<WindowBatch<T>> {
    check_divisible(grid.dims, spec)?;
    let [nd, nh, nw] = window_counts(grid.dims, spec);
    let [wd, wh, ww] = spec.window;
    let mut values = Vec::with_capacity(grid.values.len());
    for bd in 0..nd {
        for bh in 0..nh {
            for bw in 0..nw {
                for td in 0..wd {
                    for th in 0..wh {
                        let (d, h) = (bd * wd + td, bh * wh + th);
                        let start = grid.dims.flat(d, h, bw * ww) * grid.channels;
                        values.extend_from_slice(&grid.values[start..start + ww * grid.channels]);
                    }
                }
            }
        }
    }
    WindowBatch::new(grid.dims, *spec, grid.channels, values)
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<T: Element>(batch: &WindowBatch<T>) -> Result<TokenGrid<T>> {
    let dims = batch.source;
    check_divisible(dims, &batch.spec)?;
    let [nd, nh, nw] = window_counts(dims, &batch.spec);
    let [wd, wh, ww] = batch.spec.window;
    let c = batch.channels;
    let mut out = TokenGrid::filled(dims, c, T::PAD);
    let mut src = 0;
    for bd in 0..nd {
        for bh in 0..nh {
            for bw in 0..nw {
                for td in 0..wd {
                    for th in 0..wh {
                        let (d, h) = (bd * wd + td, bh * wh + th);
                        let start = dims.flat(d, h, bw * ww) * c;
                        out.values[start..start + ww * c]
                            .copy_from_slice(&batch.values[src..src + ww * c]);
                        src += ww * c;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Rolls the grid so that `out[(i - s) mod D] = in[i]` on every axis.
///
/// Positive shifts move content towards the origin; `cyclic_shift(x, -s)`
/// undoes `cyclic_shift(x, s)`.
pub fn cyclic_shift<T: Element>(grid: &TokenGrid<T>, shift: [isize; 3]) -> TokenGrid<T> {
    let e = grid.dims.to_array();
    let s = [0, 1, 2].map(|a| shift[a].rem_euclid(e[a] as isize) as usize);
    if s == [0; 3] {
        return grid.clone();
    }
    let mut out = TokenGrid::filled(grid.dims, grid.channels, T::PAD);
    for d in 0..e[0] {
        let od = (d + e[0] - s[0]) % e[0];
        for h in 0..e[1] {
            let oh = (h + e[1] - s[1]) % e[1];
            for w in 0..e[2] {
                let ow = (w + e[2] - s[2]) % e[2];
                out.token_mut(od, oh, ow).copy_from_slice(grid.token(d, h, w));
            }
        }
    }
    out
}

/// Pads the high side of every axis up to a multiple of `multiple`.
pub fn pad_to_multiple<T: Element>(grid: &TokenGrid<T>, multiple: [usize; 3]) -> (TokenGrid<T>, PadRecord) {
    let e = grid.dims.to_array();
    let pad = [0, 1, 2].map(|a| (multiple[a] - e[a] % multiple[a]) % multiple[a]);
    let record = PadRecord {
        original: grid.dims,
        pad,
    };
    if record.is_empty() {
        return (grid.clone(), record);
    }
    let padded = record.padded();
    let mut out = TokenGrid::filled(padded, grid.channels, T::PAD);
    for d in 0..e[0] {
        for h in 0..e[1] {
            let src = grid.dims.flat(d, h, 0) * grid.channels;
            let dst = padded.flat(d, h, 0) * grid.channels;
            let len = e[2] * grid.channels;
            out.values[dst..dst + len].copy_from_slice(&grid.values[src..src + len]);
        }
    }
    (out, record)
}

/// Zero-pads the high side of each axis to the next multiple of the window.
pub fn pad_to_window<T: Element>(grid: &TokenGrid<T>, spec: &WindowSpec) -> (TokenGrid<T>, PadRecord) {
    pad_to_multiple(grid, spec.window)
}

/// Undoes [`pad_to_window`] / [`pad_to_multiple`].
pub fn crop<T: Element>(grid: &TokenGrid<T>, record: &PadRecord) -> Result<TokenGrid<T>> {
    if grid.dims != record.padded() {
        return Err(Error::Shape(format!(
            "pad record expects grid {:?}, got {:?}",
            record.padded().to_array(),
            grid.dims.to_array()
        )));
    }
    if record.is_empty() {
        return Ok(grid.clone());
    }
    let o = record.original;
    let mut values = Vec::with_capacity(o.numel() * grid.channels);
    for d in 0..o.d {
        for h in 0..o.h {
            let src = grid.dims.flat(d, h, 0) * grid.channels;
            values.extend_from_slice(&grid.values[src..src + o.w * grid.channels]);
        }
    }
    TokenGrid::new(o, grid.channels, values)
}

/// Concatenates every 2x2x2 neighborhood into one token of `8C` channels.
///
/// Neighbors are ordered by their raster offset inside the neighborhood; the
/// linear channel reduction that usually follows lives with the encoder.
pub fn merge_neighborhoods<T: Element>(grid: &TokenGrid<T>) -> Result<TokenGrid<T>> {
    let e = grid.dims.to_array();
    for a in 0..3 {
        if !e[a].is_multiple_of(2) {
            return Err(Error::NotDivisible {
                axis: AXES[a],
                extent: e[a],
                divisor: 2,
            });
        }
    }
    let out_dims = GridDims::new(e[0] / 2, e[1] / 2, e[2] / 2)?;
    let c = grid.channels;
    let mut values = Vec::with_capacity(grid.values.len());
    for d in 0..out_dims.d {
        for h in 0..out_dims.h {
            for w in 0..out_dims.w {
                for a in 0..2 {
                    for b in 0..2 {
                        for k in 0..2 {
                            values.extend_from_slice(grid.token(2 * d + a, 2 * h + b, 2 * w + k));
                        }
                    }
                }
            }
        }
    }
    TokenGrid::new(out_dims, 8 * c, values)
}

/// Region id of a token at original position `pos` on one axis.
///
/// After the roll by `shift`, the tokens that wrapped around (originally in
/// `[0, s)`) sit at the high end of the last window; they get their own
/// segment. The other boundary, at `P - w + s` in original coordinates, maps
/// onto a window boundary.
fn axis_segment(pos: usize, padded: usize, window: usize, shift: usize) -> u32 {
    if shift == 0 || pos < shift {
        0
    } else if pos < padded - window + shift {
        1
    } else {
        2
    }
}

/// Mask for windows cut from a grid padded from `valid` up to `padded`.
///
/// Two tokens may attend to each other iff they come from the same contiguous
/// region of the unshifted grid, where padding forms a region of its own.
pub fn build_window_mask(padded: GridDims, valid: GridDims, spec: &WindowSpec) -> Result<AttentionMask> {
    check_divisible(padded, spec)?;
    let p = padded.to_array();
    let v = valid.to_array();
    if (0..3).any(|a| v[a] > p[a]) {
        return Err(Error::Shape(format!("valid dims {v:?} exceed padded dims {p:?}")));
    }
    let has_pad = v != p;
    let tokens = spec.tokens_per_window();
    let num_windows: usize = window_counts(padded, spec).iter().product();
    if !spec.is_shifted() && !has_pad {
        return Ok(AttentionMask::zeros(num_windows, tokens));
    }

    let mut ids = TokenGrid::filled(padded, 1, 0u32);
    for d in 0..p[0] {
        for h in 0..p[1] {
            for w in 0..p[2] {
                let id = if d >= v[0] || h >= v[1] || w >= v[2] {
                    PAD_REGION
                } else {
                    let sd = axis_segment(d, p[0], spec.window[0], spec.shift[0]);
                    let sh = axis_segment(h, p[1], spec.window[1], spec.shift[1]);
                    let sw = axis_segment(w, p[2], spec.window[2], spec.shift[2]);
                    sd * 9 + sh * 3 + sw
                };
                ids.token_mut(d, h, w)[0] = id;
            }
        }
    }
    let rolled = cyclic_shift(&ids, spec.shift.map(|s| s as isize));
    let windows = window_partition(&rolled, spec)?;

    let mut values = Vec::with_capacity(num_windows * tokens * tokens);
    for b in 0..num_windows {
        let win = windows.window(b);
        for i in 0..tokens {
            for j in 0..tokens {
                values.push(if win[i] == win[j] { 0.0 } else { MASK_NEG });
            }
        }
    }
    Ok(AttentionMask {
        num_windows,
        tokens,
        values,
    })
}

/// Shifted-window attention mask for an unpadded grid.
pub fn build_shift_mask(dims: GridDims, spec: &WindowSpec) -> Result<AttentionMask> {
    build_window_mask(dims, dims, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_f(dims: [usize; 3], c: usize) -> TokenGrid<f64> {
        let dims = GridDims::from_array(dims).unwrap();
        let values = (0..dims.numel() * c).map(|v| v as f64).collect();
        TokenGrid::new(dims, c, values).unwrap()
    }

    #[test]
    fn patch_partition_shapes() {
        let vol = Volume::filled(1, [8, 8, 8], [1.0; 3], 0.5f32);
        let g = patch_partition(&vol, [2, 2, 2]).unwrap();
        assert_eq!(g.dims().to_array(), [4, 4, 4]);
        assert_eq!(g.channels(), 8);

        let g = patch_partition(&vol, [1, 1, 1]).unwrap();
        assert_eq!(g.dims().to_array(), [8, 8, 8]);
        assert_eq!(g.channels(), 1);
    }

    #[test]
    fn patch_partition_first_token_raster() {
        let data: Vec<f64> = (0..64).map(|v| v as f64).collect();
        let vol = Volume::new(1, [4, 4, 4], [1.0; 3], data).unwrap();
        let g = patch_partition(&vol, [2, 2, 2]).unwrap();
        // voxels (0,0,0),(0,0,1),(0,1,0),(0,1,1),(1,0,0),(1,0,1),(1,1,0),(1,1,1)
        assert_eq!(g.token(0, 0, 0), &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
    }

    #[test]
    fn patch_partition_names_axis() {
        let vol = Volume::filled(1, [8, 6, 8], [1.0; 3], 0.0f32);
        let err = patch_partition(&vol, [2, 4, 2]).unwrap_err();
        assert!(matches!(err, Error::NotDivisible { axis: 'h', .. }), "{err}");
    }

    #[test]
    fn window_partition_counts() {
        let g = grid_f([4, 4, 4], 1);
        let b = window_partition(&g, &WindowSpec::regular([4, 4, 4]).unwrap()).unwrap();
        assert_eq!(b.num_windows(), 1);
        assert_eq!(b.values(), g.values());

        let b = window_partition(&g, &WindowSpec::regular([2, 2, 2]).unwrap()).unwrap();
        assert_eq!(b.num_windows(), 8);
        let expected: Vec<f64> = [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]
            .iter()
            .map(|&(d, h, w)| (d * 16 + h * 4 + w) as f64)
            .collect();
        assert_eq!(b.window(0), &expected[..]);

        let g = grid_f([2, 4, 6], 2);
        let b = window_partition(&g, &WindowSpec::regular([2, 2, 2]).unwrap()).unwrap();
        assert_eq!(b.num_windows(), 6);
    }

    #[test]
    fn window_partition_rejects_ragged() {
        let g = grid_f([4, 3, 4], 1);
        let err = window_partition(&g, &WindowSpec::regular([2, 2, 2]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NotDivisible { axis: 'h', .. }));
    }

    #[test]
    fn single_window_reverse_is_identity() {
        let g = grid_f([2, 2, 2], 3);
        let b = window_partition(&g, &WindowSpec::regular([2, 2, 2]).unwrap()).unwrap();
        assert_eq!(window_reverse(&b).unwrap(), g);
    }

    #[test]
    fn shift_examples() {
        let g = grid_f([3, 2, 2], 1);
        assert_eq!(cyclic_shift(&g, [0, 0, 0]), g);

        let ab = TokenGrid::new(GridDims::new(2, 1, 1).unwrap(), 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(cyclic_shift(&ab, [1, 0, 0]).values(), &[2.0, 1.0]);

        let g = grid_f([2, 2, 2], 2);
        let twice = cyclic_shift(&cyclic_shift(&g, [1, 1, 1]), [1, 1, 1]);
        assert_eq!(twice, g);
    }

    #[test]
    fn shift_moves_content_towards_origin() {
        let g = grid_f([4, 1, 1], 1);
        let s = cyclic_shift(&g, [1, 0, 0]);
        // out[(i - 1) mod 4] = in[i]
        assert_eq!(s.values(), &[1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn zero_shift_mask_is_zero() {
        let dims = GridDims::new(4, 8, 4).unwrap();
        let m = build_shift_mask(dims, &WindowSpec::regular([2, 4, 2]).unwrap()).unwrap();
        assert!(m.is_zero());
        assert_eq!(m.num_windows(), 2 * 2 * 2);
    }

    #[test]
    fn mask_on_line_of_four() {
        // Shifted frame holds original tokens [1, 2 | 3, 0]; only token 0
        // wrapped, so the second window separates it from token 3.
        let dims = GridDims::new(4, 1, 1).unwrap();
        let spec = WindowSpec::new([2, 1, 1], [1, 0, 0]).unwrap();
        let m = build_shift_mask(dims, &spec).unwrap();
        assert_eq!(m.values(), &[0.0, 0.0, 0.0, 0.0, 0.0, MASK_NEG, MASK_NEG, 0.0]);
    }

    #[test]
    fn padding_record_and_crop() {
        let g = grid_f([4, 4, 4], 2);
        let (p, rec) = pad_to_window(&g, &WindowSpec::regular([2, 2, 2]).unwrap());
        assert!(rec.is_empty());
        assert_eq!(p, g);

        let g = grid_f([3, 4, 4], 2);
        let (p, rec) = pad_to_window(&g, &WindowSpec::regular([2, 2, 2]).unwrap());
        assert_eq!(rec.pad, [1, 0, 0]);
        assert_eq!(p.dims().to_array(), [4, 4, 4]);
        assert!(p.token(3, 0, 0).iter().all(|&v| v == 0.0));
        assert_eq!(crop(&p, &rec).unwrap(), g);
    }

    #[test]
    fn padded_tokens_are_isolated() {
        let valid = GridDims::new(3, 2, 2).unwrap();
        let padded = GridDims::new(4, 2, 2).unwrap();
        let spec = WindowSpec::regular([2, 2, 2]).unwrap();
        let m = build_window_mask(padded, valid, &spec).unwrap();
        // second window holds d = 2 (real) and d = 3 (pad)
        for i in 0..8 {
            for j in 0..8 {
                let same = (i < 4) == (j < 4);
                assert_eq!(m.get(1, i, j), if same { 0.0 } else { MASK_NEG });
                assert_eq!(m.get(0, i, j), 0.0);
            }
        }
    }

    #[test]
    fn merge_examples() {
        let g = grid_f([4, 4, 4], 3);
        let m = merge_neighborhoods(&g).unwrap();
        assert_eq!(m.dims().to_array(), [2, 2, 2]);
        assert_eq!(m.channels(), 24);
        assert_eq!(m.values().len(), g.values().len());

        let g = grid_f([2, 2, 2], 1);
        let m = merge_neighborhoods(&g).unwrap();
        assert_eq!(m.values(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);

        let err = merge_neighborhoods(&grid_f([2, 3, 2], 1)).unwrap_err();
        assert!(matches!(err, Error::NotDivisible { axis: 'h', .. }));
    }

    #[test]
    fn window_spec_validation() {
        assert!(WindowSpec::new([2, 2, 2], [2, 0, 0]).is_err());
        assert!(WindowSpec::new([0, 2, 2], [0, 0, 0]).is_err());
        let s = WindowSpec::shifted([4, 4, 3]).unwrap();
        assert_eq!(s.shift, [2, 2, 1]);
    }
}
