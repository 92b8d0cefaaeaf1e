//! Self-check suites that compare the fast code paths against slow, direct
//! oracles. Used by the `check` subcommand and the test suite.

use std::fmt::{self, Write as _};
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::{decode_volume, encode_volume};
use crate::error::{Error, Result};
use crate::geometry::{
    build_window_mask, cyclic_shift, merge_neighborhoods, window_partition, window_reverse, GridDims, TokenGrid,
    WindowBatch, WindowSpec, MASK_NEG,
};
use crate::metrics::{dice_masks, surface_scores};
use crate::model::{Model, ModelConfig};
use crate::params::{Init, ParamStore};
use crate::swin::{self, relative_position_index, BlockWeights, PlanCache};
use crate::tensor::{Scalar, Tensor};
use crate::volume::Volume;

/// Slow reference implementations.
pub mod oracles {
    use super::*;

    /// Attention mask from first principles: for each window of the rolled,
    /// padded grid, a pair may attend iff both tokens are padding, or both are
    /// real and their offset is the same before and after the roll on every
    /// axis (no wrap-around seam between them).
    pub fn brute_force_mask(padded: [usize; 3], valid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Vec<f64> {
        let counts = [0, 1, 2].map(|a| padded[a] / window[a]);
        let t = window.iter().product::<usize>();
        let mut out = Vec::new();
        for bz in 0..counts[0] {
            for by in 0..counts[1] {
                for bx in 0..counts[2] {
                    let mut rolled = Vec::with_capacity(t);
                    let mut original = Vec::with_capacity(t);
                    for z in 0..window[0] {
                        for y in 0..window[1] {
                            for x in 0..window[2] {
                                let r = [bz * window[0] + z, by * window[1] + y, bx * window[2] + x];
                                let o = [0, 1, 2].map(|a| (r[a] + shift[a]) % padded[a]);
                                rolled.push(r);
                                original.push(o);
                            }
                        }
                    }
                    let real = |o: &[usize; 3]| (0..3).all(|a| o[a] < valid[a]);
                    for i in 0..t {
                        for j in 0..t {
                            let (ri, rj) = (real(&original[i]), real(&original[j]));
                            let ok = match (ri, rj) {
                                (false, false) => true,
                                (true, true) => (0..3).all(|a| {
                                    original[i][a] as isize - original[j][a] as isize
                                        == rolled[i][a] as isize - rolled[j][a] as isize
                                }),
                                _ => false,
                            };
                            out.push(if ok { 0.0 } else { MASK_NEG });
                        }
                    }
                }
            }
        }
        out
    }

    /// Relative-position table row for every ordered token pair of a window.
    pub fn relative_index(window: [usize; 3]) -> Vec<u32> {
        let mut coords = Vec::new();
        for z in 0..window[0] {
            for y in 0..window[1] {
                for x in 0..window[2] {
                    coords.push([z as isize, y as isize, x as isize]);
                }
            }
        }
        let span = window.map(|w| 2 * w as isize - 1);
        let mut out = Vec::new();
        for a in &coords {
            for b in &coords {
                let r = [0, 1, 2].map(|k| a[k] - b[k] + window[k] as isize - 1);
                out.push(((r[0] * span[1] + r[1]) * span[2] + r[2]) as u32);
            }
        }
        out
    }

    /// Dense per-window attention on packed `(B, T, 3C)` projections.
    /// Returns the `(B, T, C)` output and `(B, heads, T, T)` weights.
    #[allow(clippy::too_many_arguments)]
    pub fn dense_attention(
        qkv: &[f64],
        b: usize,
        t: usize,
        c: usize,
        heads: usize,
        bias: Option<(&[f64], &[u32])>,
        mask: Option<(&[f64], usize)>,
    ) -> (Vec<f64>, Vec<f64>) {
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let at = |w: usize, tok: usize, part: usize, h: usize, k: usize| qkv[(w * t + tok) * 3 * c + part * c + h * dh + k];
        let mut out = vec![0.0; b * t * c];
        let mut probs = vec![0.0; b * heads * t * t];
        for w in 0..b {
            for h in 0..heads {
                for i in 0..t {
                    let mut logits = vec![0.0; t];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for k in 0..dh {
                            s += at(w, i, 0, h, k) * at(w, j, 1, h, k);
                        }
                        s *= scale;
                        if let Some((table, index)) = bias {
                            s += table[index[i * t + j] as usize * heads + h];
                        }
                        if let Some((m, nw)) = mask {
                            s += m[((w % nw) * t + i) * t + j];
                        }
                        *l = s;
                    }
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..t {
                        let p = e[j] / z;
                        probs[((w * heads + h) * t + i) * t + j] = p;
                        for k in 0..dh {
                            out[(w * t + i) * c + h * dh + k] += p * at(w, j, 2, h, k);
                        }
                    }
                }
            }
        }
        (out, probs)
    }

    /// Direct same-padded convolution. `x: (N, Ci, D, H, W)`, `w: (Co, Ci, k, k, k)`.
    pub fn conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [n, ci, d, h, wd] = [0, 1, 2, 3, 4].map(|i| x.shape()[i]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let r = (k / 2) as isize;
        let mut out = vec![0.0; n * co * d * h * wd];
        for s in 0..n {
            for o in 0..co {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut acc = b.data()[o];
                            for i in 0..ci {
                                for a in 0..k {
                                    for bb in 0..k {
                                        for cc in 0..k {
                                            let (zz, yy, xw) = (
                                                z as isize + a as isize - r,
                                                y as isize + bb as isize - r,
                                                xx as isize + cc as isize - r,
                                            );
                                            if zz < 0
                                                || yy < 0
                                                || xw < 0
                                                || zz >= d as isize
                                                || yy >= h as isize
                                                || xw >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xv = x.data()
                                                [(((s * ci + i) * d + zz as usize) * h + yy as usize) * wd + xw as usize];
                                            let wv = w.data()[(((o * ci + i) * k + a) * k + bb) * k + cc];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out[(((s * co + o) * d + z) * h + y) * wd + xx] = acc;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[n, co, d, h, wd], out).expect("shape")
    }

    /// Transposed convolution by zero-stuffing: inputs are spread onto the
    /// even positions of a doubled grid, then each output voxel correlates
    /// with the kernel tap that lands on a stuffed input.
    pub fn conv_transpose3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [n, ci, d, h, wd] = [0, 1, 2, 3, 4].map(|i| x.shape()[i]);
        let co = w.shape()[1];
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * wd);
        let mut stuffed = vec![0.0; n * ci * d2 * h2 * w2];
        for s in 0..n {
            for i in 0..ci {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            stuffed[(((s * ci + i) * d2 + 2 * z) * h2 + 2 * y) * w2 + 2 * xx] =
                                x.data()[(((s * ci + i) * d + z) * h + y) * wd + xx];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; n * co * d2 * h2 * w2];
        for s in 0..n {
            for o in 0..co {
                for z in 0..d2 {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let mut acc = b.data()[o];
                            for i in 0..ci {
                                for a in 0..2 {
                                    for bb in 0..2 {
                                        for cc in 0..2 {
                                            if z < a || y < bb || xx < cc {
                                                continue;
                                            }
                                            let sv = stuffed[(((s * ci + i) * d2 + z - a) * h2 + y - bb) * w2 + xx - cc];
                                            acc += sv * w.data()[(((i * co + o) * 2 + a) * 2 + bb) * 2 + cc];
                                        }
                                    }
                                }
                            }
                            out[(((s * co + o) * d2 + z) * h2 + y) * w2 + xx] = acc;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[n, co, d2, h2, w2], out).expect("shape")
    }

    /// Patch merging plus linear reduction written as one loop nest over
    /// `(D, H, W, C)` tokens and a `(8C, C_out)` weight.
    pub fn merge_reduce(tokens: &[f64], dims: [usize; 3], c: usize, weight: &[f64], c_out: usize) -> Vec<f64> {
        let [d, h, w] = dims;
        let mut out = Vec::new();
        for z in 0..d / 2 {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let mut acc = vec![0.0; c_out];
                    let mut slot = 0;
                    for a in 0..2 {
                        for b in 0..2 {
                            for k in 0..2 {
                                let base = (((2 * z + a) * h + 2 * y + b) * w + 2 * x + k) * c;
                                for ch in 0..c {
                                    for (o, v) in acc.iter_mut().enumerate() {
                                        *v += tokens[base + ch] * weight[(slot * c + ch) * c_out + o];
                                    }
                                }
                                slot += 1;
                            }
                        }
                    }
                    out.extend(acc);
                }
            }
        }
        out
    }

    /// Boundary voxels by explicit 6-neighbor offsets.
    pub fn surface(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<[f64; 3]> {
        let [d, h, w] = dims;
        let mut pts = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !mask[(z * h + y) * w + x] {
                        continue;
                    }
                    let offsets: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
                    let edge = offsets.iter().any(|o| {
                        let p = [z as isize + o[0], y as isize + o[1], x as isize + o[2]];
                        if p[0] < 0 || p[1] < 0 || p[2] < 0 || p[0] >= d as isize || p[1] >= h as isize || p[2] >= w as isize {
                            return true;
                        }
                        !mask[((p[0] as usize) * h + p[1] as usize) * w + p[2] as usize]
                    });
                    if edge {
                        pts.push([z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]);
                    }
                }
            }
        }
        pts
    }

    fn nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let dz = p[0] - q[0];
                        let dy = p[1] - q[1];
                        let dx = p[2] - q[2];
                        dz * dz + dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    /// All-pairs ASD and HD95; `None` if either surface is empty.
    pub fn surface_distances(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Option<(f64, f64)> {
        let (sa, sb) = (surface(a, dims, spacing), surface(b, dims, spacing));
        if sa.is_empty() || sb.is_empty() {
            return None;
        }
        let ab = nearest(&sa, &sb);
        let ba = nearest(&sb, &sa);
        let (mut sum_ab, mut sum_ba) = (0.0, 0.0);
        for v in &ab {
            sum_ab += v;
        }
        for v in &ba {
            sum_ba += v;
        }
        let asd = (sum_ab + sum_ba) / (ab.len() + ba.len()) as f64;
        let mut pooled: Vec<f64> = ab.into_iter().chain(ba).collect();
        pooled.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
        let scaled = 95.0 * (pooled.len() - 1) as f64;
        let lo = (scaled / 100.0).floor() as usize;
        let frac = (scaled - lo as f64 * 100.0) / 100.0;
        let hd = if frac == 0.0 || lo + 1 >= pooled.len() {
            pooled[lo]
        } else {
            pooled[lo] + (pooled[lo + 1] - pooled[lo]) * frac
        };
        Some((asd, hd))
    }

    pub fn dice(a: &[bool], b: &[bool]) -> f64 {
        let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
        let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
        if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Geometry,
    Attention,
    Gradients,
    Kernels,
    Metrics,
    Io,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Geometry,
        Suite::Attention,
        Suite::Gradients,
        Suite::Kernels,
        Suite::Metrics,
        Suite::Io,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Geometry => "geometry",
            Suite::Attention => "attention",
            Suite::Gradients => "gradients",
            Suite::Kernels => "kernels",
            Suite::Metrics => "metrics",
            Suite::Io => "io",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown suite {s:?} (expected one of: geometry, attention, gradients, kernels, metrics, io)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOptions {
    /// Corrupts the fixtures so the suite is expected to fail.
    pub inject_fault: bool,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let _ = writeln!(
                out,
                "{} {}/{}: {}",
                if r.passed { "PASS" } else { "FAIL" },
                self.suite,
                r.name,
                r.detail
            );
        }
        let failed = self.results.iter().filter(|r| !r.passed).count();
        let _ = writeln!(
            out,
            "suite {}: {} passed, {} failed ({:.2}s)",
            self.suite,
            self.results.len() - failed,
            failed,
            self.seconds
        );
        out
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

fn record(results: &mut Vec<CheckResult>, name: &str, outcome: Result<String, String>) {
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    results.push(CheckResult {
        name: name.to_string(),
        passed,
        detail,
    });
}

fn err<E: fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn run_suite(suite: Suite, opts: CheckOptions) -> SuiteReport {
    let start = Instant::now();
    let results = match suite {
        Suite::Geometry => geometry_suite(opts),
        Suite::Attention => attention_suite(opts),
        Suite::Gradients => gradient_suite(opts),
        Suite::Kernels => kernel_suite(opts),
        Suite::Metrics => metrics_suite(opts),
        Suite::Io => io_suite(opts),
    };
    SuiteReport {
        suite,
        results,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::cast_from(v * std)
        })
        .collect()
}

fn geometry_suite(opts: CheckOptions) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let roundtrip = (|| -> Result<String, String> {
        let n = 120;
        for case in 0..n {
            let window = [0; 3].map(|_| rng.random_range(1..=4usize));
            let dims = window.map(|w| w * rng.random_range(1..=3usize));
            let c = rng.random_range(1..=3usize);
            let dims = GridDims::from_array(dims).map_err(err)?;
            let shift = window.map(|w| rng.random_range(0..w));
            let spec = WindowSpec::new(window, shift).map_err(err)?;
            let grid = TokenGrid::iota(dims, c);
            let rolled = cyclic_shift(&grid, shift.map(|s| s as isize));
            let batch = window_partition(&rolled, &spec).map_err(err)?;
            let back = window_reverse(&batch).map_err(err)?;
            let unrolled = cyclic_shift(&back, shift.map(|s| -(s as isize)));
            if unrolled != grid {
                return Err(format!("case {case}: dims {dims:?} window {window:?} shift {shift:?} did not roundtrip"));
            }
        }
        Ok(format!("{n} random (dims, window, shift) configs roundtrip exactly"))
    })();
    record(&mut results, "partition_roundtrip", roundtrip);

    let masks = (|| -> Result<String, String> {
        let mut configs = vec![([4, 4, 4], [4, 4, 4], [2, 2, 2])];
        for _ in 0..63 {
            let window = [0; 3].map(|_| rng.random_range(1..=4usize));
            let valid = window.map(|w| rng.random_range(1..=3 * w));
            let padded = [0, 1, 2].map(|a| valid[a].div_ceil(window[a]) * window[a]);
            configs.push((padded, valid, window));
        }
        for (padded, valid, window) in &configs {
            let spec = WindowSpec::shifted(*window).map_err(err)?;
            let mask = build_window_mask(
                GridDims::from_array(*padded).map_err(err)?,
                GridDims::from_array(*valid).map_err(err)?,
                &spec,
            )
            .map_err(err)?;
            let mut shift = spec.shift;
            if opts.inject_fault {
                shift[0] += 1;
            }
            let oracle = oracles::brute_force_mask(*padded, *valid, *window, shift);
            if mask.values() != oracle.as_slice() {
                let bad = mask.values().iter().zip(&oracle).filter(|(a, b)| a != b).count();
                return Err(format!(
                    "padded {padded:?} valid {valid:?} window {window:?}: {bad} entries differ from the region oracle"
                ));
            }
        }
        Ok(format!(
            "{} configs (incl. 4^3 grid, 2^3 window, shift 1) match the region oracle entry for entry",
            configs.len()
        ))
    })();
    record(&mut results, "shift_mask_oracle", masks);

    let rel = (|| -> Result<String, String> {
        for window in [[1, 1, 1], [2, 2, 2], [2, 3, 4], [4, 4, 4]] {
            if relative_position_index(window) != oracles::relative_index(window) {
                return Err(format!("window {window:?}: relative index differs"));
            }
        }
        Ok("relative position index matches pairwise offsets".into())
    })();
    record(&mut results, "relative_index", rel);
    results
}

fn block_store<T: Scalar>(
    seed: u64,
    width: usize,
    heads: usize,
    window: [usize; 3],
    bias: bool,
) -> (ParamStore<T>, BlockWeights) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let block = BlockWeights::new(&mut store, &mut init, "block", width, heads, 2 * width, window, bias);
    // Give every parameter a generic value so no term is trivially zero.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let n = t.numel();
        let noise: Vec<T> = random_normal(&mut rng, n, 0.3);
        for (v, e) in t.data_mut().iter_mut().zip(noise) {
            *v = *v + e;
        }
    }
    (store, block)
}

fn attention_suite(opts: CheckOptions) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let windows = 24;

    let rows = (|| -> Result<String, String> {
        let mut worst_sum = 0.0f64;
        let mut worst_masked = 0.0f64;
        let mut masked_pairs = 0usize;
        for case in 0..windows {
            let window = [0; 3].map(|_| rng.random_range(1..=3usize) * 2);
            let heads = rng.random_range(1..=2usize);
            let c = 4 * heads;
            let dims = GridDims::from_array(window.map(|w| 2 * w)).map_err(err)?;
            let spec = WindowSpec::shifted(window).map_err(err)?;
            let (store, block) = block_store::<f32>(case as u64, c, heads, window, true);
            let grid = TokenGrid::new(dims, c, random_normal(&mut rng, dims.numel() * c, 1.0)).map_err(err)?;
            let batch = window_partition(&cyclic_shift(&grid, spec.shift.map(|s| s as isize)), &spec).map_err(err)?;
            let mask = build_window_mask(dims, dims, &spec).map_err(err)?;
            let probs = swin::attention_probabilities(&batch, &mask, &store, &block, heads).map_err(err)?;
            let t = spec.tokens_per_window();
            for (r, row) in probs.chunks(t).enumerate() {
                let s: f64 = row.iter().map(|&p| p as f64).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
                let w = r / (heads * t);
                let i = r % t;
                for (j, &p) in row.iter().enumerate() {
                    let blocked = mask.get(w, i, j) != 0.0;
                    let blocked = if opts.inject_fault { !blocked } else { blocked };
                    if blocked {
                        masked_pairs += 1;
                        worst_masked = worst_masked.max(p as f64);
                    }
                }
            }
        }
        if worst_sum > 1e-5 {
            return Err(format!("softmax row sum off by {worst_sum:e}"));
        }
        if worst_masked >= 1e-8 {
            return Err(format!("masked pair weight {worst_masked:e} over {masked_pairs} masked pairs"));
        }
        Ok(format!(
            "{windows} shifted configs: max |row sum - 1| = {worst_sum:.2e}, max masked weight = {worst_masked:.2e} over {masked_pairs} pairs"
        ))
    })();
    record(&mut results, "softmax_and_mask", rows);

    let perm = (|| -> Result<String, String> {
        let mut worst = 0.0f64;
        for case in 0..windows {
            let window = [0; 3].map(|_| rng.random_range(1..=3usize));
            let heads = rng.random_range(1..=3usize);
            let c = 2 * heads;
            let spec = WindowSpec::regular(window).map_err(err)?;
            let dims = GridDims::from_array(window).map_err(err)?;
            let t = spec.tokens_per_window();
            let (store, block) = block_store::<f64>(100 + case as u64, c, heads, window, false);
            let tokens: Vec<f64> = random_normal(&mut rng, t * c, 1.0);
            let mut order: Vec<usize> = (0..t).collect();
            for i in (1..t).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<f64> = order.iter().flat_map(|&i| tokens[i * c..(i + 1) * c].to_vec()).collect();
            let mask = build_window_mask(dims, dims, &spec).map_err(err)?;
            let run = |v: Vec<f64>| -> Result<Vec<f64>, String> {
                let b = WindowBatch::new(dims, spec, c, v).map_err(err)?;
                Ok(swin::window_attention(&b, &mask, &store, &block, heads).map_err(err)?.into_values())
            };
            let a = run(tokens.clone())?;
            let b = run(permuted)?;
            for (k, &src) in order.iter().enumerate() {
                for ch in 0..c {
                    worst = worst.max((b[k * c + ch] - a[src * c + ch]).abs());
                }
            }
        }
        if opts.inject_fault {
            worst += 1.0;
        }
        if worst > 1e-6 {
            return Err(format!("permuted output differs by {worst:e}"));
        }
        Ok(format!("{windows} random windows, bias off: max deviation {worst:.2e}"))
    })();
    record(&mut results, "permutation_equivariance", perm);

    let dense = (|| -> Result<String, String> {
        let mut worst = 0.0f64;
        for case in 0..windows {
            let window = [0; 3].map(|_| rng.random_range(1..=2usize) * 2);
            let heads = rng.random_range(1..=2usize);
            let c = 3 * heads;
            let dims = GridDims::from_array(window.map(|w| 2 * w)).map_err(err)?;
            let spec = WindowSpec::shifted(window).map_err(err)?;
            let mask = build_window_mask(dims, dims, &spec).map_err(err)?;
            let nw = mask.num_windows();
            let t = spec.tokens_per_window();
            let qkv: Vec<f64> = random_normal(&mut rng, nw * t * 3 * c, 1.0);
            let table: Vec<f64> = random_normal(&mut rng, swin::relative_table_len(window) * heads, 0.5);
            let index = relative_position_index(window);
            let g = Graph::<f64>::new();
            let q = g.constant(Tensor::from_vec(&[nw, t, 3 * c], qkv.clone()).map_err(err)?);
            let tb = g.constant(Tensor::from_vec(&[table.len() / heads, heads], table.clone()).map_err(err)?);
            let m = Tensor::from_vec(&[nw, t, t], mask.values().to_vec()).map_err(err)?;
            let y = g
                .window_attention(q, Some((tb, Rc::new(index.clone()))), Some(Rc::new(m)), heads)
                .map_err(err)?;
            let (expect, _) = oracles::dense_attention(
                &qkv,
                nw,
                t,
                c,
                heads,
                Some((&table, &oracles::relative_index(window))),
                Some((mask.values(), nw)),
            );
            for (a, b) in g.value(y).data().iter().zip(&expect) {
                worst = worst.max((a - b).abs());
            }
            let _ = case;
        }
        if worst > 1e-9 {
            return Err(format!("windowed attention differs from dense oracle by {worst:e}"));
        }
        Ok(format!("{windows} masked, biased configs match dense attention within {worst:.2e}"))
    })();
    record(&mut results, "dense_oracle", dense);
    results
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `grads` against central differences of `loss` at `count`
/// sampled coordinates (every tensor at least once, then uniform draws).
/// A `count` covering every coordinate checks them all.
pub fn finite_difference_check(
    store: &mut ParamStore<f64>,
    grads: &[Vec<f64>],
    loss: &dyn Fn(&ParamStore<f64>) -> Result<f64>,
    count: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    let total: usize = grads.iter().map(Vec::len).sum();
    let mut picks: Vec<(usize, usize)> = if count >= total {
        (0..ids.len()).flat_map(|i| (0..grads[i].len()).map(move |j| (i, j))).collect()
    } else {
        (0..ids.len()).map(|i| (i, rng.random_range(0..grads[i].len()))).collect()
    };
    while picks.len() < count.min(total) {
        let i = rng.random_range(0..ids.len());
        picks.push((i, rng.random_range(0..grads[i].len())));
    }
    let mut worst = 0.0f64;
    for &(i, j) in &picks {
        let orig = store.get(ids[i]).data()[j];
        store.get_mut(ids[i]).data_mut()[j] = orig + step;
        let up = loss(store)?;
        store.get_mut(ids[i]).data_mut()[j] = orig - step;
        let down = loss(store)?;
        store.get_mut(ids[i]).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(grads[i][j], numeric));
    }
    Ok(GradCheck {
        checked: picks.len(),
        max_rel_error: worst,
    })
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Shape of a transformer-layer gradient check.
#[derive(Clone, Copy, Debug)]
pub struct BlockCase {
    pub dims: [usize; 3],
    pub window: [usize; 3],
    pub width: usize,
    pub heads: usize,
    pub shifted: bool,
    /// Random loss weights; plain sum otherwise.
    pub weighted: bool,
}

impl Default for BlockCase {
    fn default() -> Self {
        Self {
            dims: [4, 4, 4],
            window: [2, 2, 2],
            width: 4,
            heads: 2,
            shifted: true,
            weighted: true,
        }
    }
}

/// Gradient check of one transformer layer with generic weights.
pub fn block_gradient_check(case: BlockCase, samples: usize, fault: bool) -> Result<GradCheck> {
    let BlockCase {
        dims,
        window,
        width: c,
        heads,
        shifted,
        weighted,
    } = case;
    let shape = [1, dims[0], dims[1], dims[2], c];
    let dims = GridDims::from_array(dims)?;
    let spec = if shifted {
        WindowSpec::shifted(window)?
    } else {
        WindowSpec::regular(window)?
    };
    let (mut store, block) = block_store::<f64>(7, c, heads, window, true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_vec(&shape, random_normal(&mut rng, dims.numel() * c, 1.0))?;
    let w = if weighted {
        random_normal(&mut rng, dims.numel() * c, 1.0)
    } else {
        vec![1.0; dims.numel() * c]
    };
    let w = Rc::new(Tensor::from_vec(&shape, w)?);
    let run = |store: &ParamStore<f64>, backward: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let g = Graph::new();
        let p = store.bind(&g);
        let xv = g.constant(x.clone());
        let mut cache = PlanCache::new();
        let y = swin::block_graph(&g, &p, &mut cache, &block, xv, 1, dims, &spec, heads)?;
        let l = g.weighted_sum(y, Rc::clone(&w))?;
        let value = g.value(l).data()[0];
        if !backward {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(l)?;
        Ok((value, p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect()))
    };
    let (_, mut grads) = run(&store, true)?;
    if fault {
        grads[0].iter_mut().for_each(|g| *g += 1.0);
    }
    finite_difference_check(&mut store, &grads, &|s| Ok(run(s, false)?.0), samples, FD_STEP, 9)
}

/// Gradient check of the full micro model (8^3 input) on the training loss.
pub fn model_gradient_check(samples: usize, fault: bool) -> Result<GradCheck> {
    let cfg = ModelConfig::micro(3);
    let mut model: Model<f64> = Model::new(cfg, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Move the zero-initialized tables and norms off their special values.
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let t = model.params_mut().get_mut(id);
        let n = t.numel();
        let noise: Vec<f64> = random_normal(&mut rng, n, 0.05);
        for (v, e) in t.data_mut().iter_mut().zip(noise) {
            *v += e;
        }
    }
    let n = 8 * 8 * 8;
    let x = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..n).map(|_| rng.random::<f64>()).collect())?;
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..3u8)).collect();
    let (_, mut grads) = model.loss_and_grads(&x, &labels)?;
    if fault {
        grads[0].iter_mut().for_each(|g| *g += 1.0);
    }
    let cfg = model.config().clone();
    let mut store = model.params().clone();
    let loss = |s: &ParamStore<f64>| -> Result<f64> {
        let m = Model::from_store(cfg.clone(), s.clone())?;
        Ok(m.loss(&x, &labels)?.total)
    };
    finite_difference_check(&mut store, &grads, &loss, samples, FD_STEP, 5)
}

fn gradient_suite(opts: CheckOptions) -> Vec<CheckResult> {
    let mut results = Vec::new();
    for (name, run) in [
        (
            "swin_block",
            (|n, f| block_gradient_check(BlockCase::default(), n, f)) as fn(usize, bool) -> Result<GradCheck>,
        ),
        ("micro_model", model_gradient_check),
    ] {
        let outcome = match run(64, opts.inject_fault) {
            Ok(g) if g.max_rel_error < GRAD_TOLERANCE => Ok(format!(
                "{} sampled parameters, max relative error {:.2e}",
                g.checked, g.max_rel_error
            )),
            Ok(g) => Err(format!(
                "{} sampled parameters, max relative error {:.2e} >= {GRAD_TOLERANCE:e}",
                g.checked, g.max_rel_error
            )),
            Err(e) => Err(e.to_string()),
        };
        record(&mut results, name, outcome);
    }
    results
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn kernel_suite(opts: CheckOptions) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let fault = if opts.inject_fault { 1e-3 } else { 0.0 };

    let conv = (|| -> Result<String, String> {
        let mut worst = 0.0f64;
        for k in [1, 3, 5] {
            let (n, ci, co) = (2, 3, 2);
            let dims = [3, 4, 5];
            let x = Tensor::from_vec(&[n, ci, dims[0], dims[1], dims[2]], random_normal(&mut rng, n * ci * 60, 1.0)).map_err(err)?;
            let w = Tensor::from_vec(&[co, ci, k, k, k], random_normal(&mut rng, co * ci * k * k * k, 1.0)).map_err(err)?;
            let b = Tensor::from_vec(&[co], random_normal(&mut rng, co, 1.0)).map_err(err)?;
            let g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv3d(xv, wv, bv).map_err(err)?;
            let expect = oracles::conv3d(&x, &w, &b);
            worst = worst.max(max_diff(g.value(y).data(), expect.data()) + fault);
        }
        if worst > 1e-6 {
            return Err(format!("convolution differs from direct sum by {worst:e}"));
        }
        Ok(format!("kernels 1, 3, 5 match the direct sum within {worst:.2e}"))
    })();
    record(&mut results, "conv3d", conv);

    let convt = (|| -> Result<String, String> {
        let (n, ci, co) = (2, 3, 4);
        let x = Tensor::from_vec(&[n, ci, 2, 3, 2], random_normal(&mut rng, n * ci * 12, 1.0)).map_err(err)?;
        let w = Tensor::from_vec(&[ci, co, 2, 2, 2], random_normal(&mut rng, ci * co * 8, 1.0)).map_err(err)?;
        let b = Tensor::from_vec(&[co], random_normal(&mut rng, co, 1.0)).map_err(err)?;
        let g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv_transpose3d(xv, wv, bv).map_err(err)?;
        let expect = oracles::conv_transpose3d(&x, &w, &b);
        let worst = max_diff(g.value(y).data(), expect.data()) + fault;
        if worst > 1e-6 {
            return Err(format!("transposed convolution differs from zero-stuffing oracle by {worst:e}"));
        }
        Ok(format!("matches the zero-stuffing oracle within {worst:.2e}"))
    })();
    record(&mut results, "conv_transpose3d", convt);

    let merge = (|| -> Result<String, String> {
        let (c, c_out) = (3, 6);
        let dims = GridDims::new(4, 2, 6).map_err(err)?;
        let tokens: Vec<f64> = random_normal(&mut rng, dims.numel() * c, 1.0);
        let weight: Vec<f64> = random_normal(&mut rng, 8 * c * c_out, 1.0);
        let grid = TokenGrid::new(dims, c, tokens.clone()).map_err(err)?;
        let w = Tensor::from_vec(&[8 * c, c_out], weight.clone()).map_err(err)?;
        let got = swin::patch_merge_reduce(&grid, &w).map_err(err)?;
        let expect = oracles::merge_reduce(&tokens, dims.to_array(), c, &weight, c_out);
        let worst = max_diff(got.values(), &expect) + fault;
        // The plain merge must also be a pure regrouping of the input.
        let merged = merge_neighborhoods(&grid).map_err(err)?;
        if merged.values().len() != tokens.len() {
            return Err("merge changed the number of values".into());
        }
        if worst > 1e-6 {
            return Err(format!("patch-merge reduction differs from loop oracle by {worst:e}"));
        }
        Ok(format!("matches the loop oracle within {worst:.2e}"))
    })();
    record(&mut results, "patch_merge_reduce", merge);
    results
}

/// Random binary mask: either Bernoulli noise or a union of boxes.
pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<bool> {
    let n = dims.iter().product();
    if rng.random_bool(0.5) {
        let p = rng.random_range(0.0..0.6);
        (0..n).map(|_| rng.random_bool(p)).collect()
    } else {
        let mut m = vec![false; n];
        for _ in 0..rng.random_range(0..4) {
            let lo = dims.map(|e| rng.random_range(0..e));
            let hi = [0, 1, 2].map(|a| rng.random_range(lo[a]..dims[a]) + 1);
            for z in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    for x in lo[2]..hi[2] {
                        m[(z * dims[1] + y) * dims[2] + x] = true;
                    }
                }
            }
        }
        m
    }
}

fn metrics_suite(opts: CheckOptions) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let pairs = 60;

    let brute = (|| -> Result<String, String> {
        let mut defined = 0;
        for case in 0..pairs {
            let dims = [0; 3].map(|_| rng.random_range(1..=16usize));
            let spacing = [0; 3].map(|_| rng.random_range(0.25..3.0));
            let a = random_mask(&mut rng, dims);
            let b = random_mask(&mut rng, dims);
            let fast = surface_scores(&a, &b, dims, spacing).map(|s| (s.asd, s.hd95));
            let mut slow = oracles::surface_distances(&a, &b, dims, spacing);
            if opts.inject_fault {
                slow = slow.map(|(x, y)| (x + 1.0, y));
            }
            if fast != slow {
                return Err(format!("case {case} dims {dims:?}: fast {fast:?} vs brute force {slow:?}"));
            }
            if dice_masks(&a, &b) != oracles::dice(&a, &b) {
                return Err(format!("case {case}: dice differs"));
            }
            defined += fast.is_some() as usize;
        }
        Ok(format!(
            "{pairs} random mask pairs up to 16^3 ({defined} with both surfaces) equal the all-pairs oracle exactly"
        ))
    })();
    record(&mut results, "brute_force_equality", brute);

    let scaling = (|| -> Result<String, String> {
        let mut checked = 0;
        for case in 0..pairs {
            let dims = [0; 3].map(|_| rng.random_range(2..=12usize));
            let spacing = [0; 3].map(|_| rng.random_range(0.25..3.0));
            let a = random_mask(&mut rng, dims);
            let b = random_mask(&mut rng, dims);
            let base = surface_scores(&a, &b, dims, spacing);
            for c in [0.5, 2.0, 4.0] {
                let scaled = surface_scores(&a, &b, dims, spacing.map(|s| s * c));
                let expect = base.map(|s| (s.asd * c, s.hd95 * c));
                if scaled.map(|s| (s.asd, s.hd95)) != expect {
                    return Err(format!("case {case}: scaling spacing by {c} broke exact proportionality"));
                }
                checked += 1;
            }
        }
        Ok(format!("{checked} (pair, factor) combinations scale exactly; Dice is spacing-free"))
    })();
    record(&mut results, "spacing_scaling", scaling);
    results
}

fn io_suite(opts: CheckOptions) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(51);

    let volumes = (|| -> Result<String, String> {
        for _ in 0..20 {
            let dims = [0; 3].map(|_| rng.random_range(1..=9usize));
            let spacing = [0; 3].map(|_| rng.random_range(0.25..4.0f32) as f64);
            let n: usize = dims.iter().product();
            let img: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
            let v = Volume::new(1, dims, spacing, img).map_err(err)?;
            let mut bytes = encode_volume(&v);
            if opts.inject_fault {
                let last = bytes.len() - 1;
                bytes[last] ^= 1;
            }
            let back: Volume<f32> = decode_volume(&bytes, "mem").map_err(err)?;
            let same = back.dims() == v.dims()
                && back.spacing() == v.spacing()
                && back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(format!("float volume {dims:?} did not roundtrip bit-exactly"));
            }
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let l = Volume::new(1, dims, spacing, labels).map_err(err)?;
            if decode_volume::<u8>(&encode_volume(&l), "mem").map_err(err)? != l {
                return Err(format!("label volume {dims:?} did not roundtrip"));
            }
        }
        let header = encode_volume(&Volume::filled(1, [4, 4, 4], [1.0; 3], 0.0f32));
        if header.len() != 32 + 256 {
            return Err(format!("4^3 float file is {} bytes, expected 32 + 256", header.len()));
        }
        Ok("40 random volumes roundtrip bit-exactly; 4^3 float file = 32-byte header + 256 bytes".into())
    })();
    record(&mut results, "volume_roundtrip", volumes);

    let errors = (|| -> Result<String, String> {
        let good = encode_volume(&Volume::filled(1, [2, 2, 2], [1.0; 3], 1u8));
        let mut magic = good.clone();
        magic[0] = b'X';
        let mut version = good.clone();
        version[4] = 7;
        let kinds = [
            decode_volume::<u8>(&magic, "m").map(|_| ()),
            decode_volume::<u8>(&version, "m").map(|_| ()),
            decode_volume::<u8>(&good[..good.len() - 3], "m").map(|_| ()),
        ]
        .map(|r| r.err().map(|e| e.kind()));
        let expect = [Some("bad_magic"), Some("bad_version"), Some("truncated")];
        if kinds != expect {
            return Err(format!("error kinds {kinds:?}, expected {expect:?}"));
        }
        Ok("bad magic, bad version and truncation give distinct errors".into())
    })();
    record(&mut results, "volume_errors", errors);

    let ckpt = (|| -> Result<String, String> {
        let model: Model<f32> = Model::new(ModelConfig::micro(3), 17).map_err(err)?;
        let x = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|_| rng.random::<f32>()).collect()).map_err(err)?;
        let before = model.logits(&x).map_err(err)?;
        let mut bytes = Checkpoint::from_model(&model, 3, 17).encode();
        if opts.inject_fault {
            let last = bytes.len() - 1;
            bytes[last] ^= 0x40;
        }
        let restored = Checkpoint::decode(&bytes, "mem").map_err(err)?.to_model().map_err(err)?;
        let after = restored.logits(&x).map_err(err)?;
        let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err("reloaded model gives different logits".into());
        }
        Ok("save -> load -> forward is bit-identical".into())
    })();
    record(&mut results, "checkpoint_reload", ckpt);
    results
}
