use cats_core::autograd::Graph;
use cats_core::checks::{self, oracles, BlockCase};
use cats_core::cnn::{cnn_encode, conv_block, downsample, fuse_taps, upsample, CnnConfig, CnnWeights, FusionWeights};
use cats_core::geometry::{cyclic_shift, window_partition, GridDims, TokenGrid, WindowBatch, WindowSpec, build_window_mask};
use cats_core::params::{Init, ParamStore};
use cats_core::swin::{
    encoder_forward, linear_embed, patch_merge_reduce, swin_block, window_attention, BlockWeights, EncoderTaps,
    SwinConfig, SwinWeights,
};
use cats_core::{Tensor, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn zero_all(store: &mut ParamStore<f64>, keep: &[&str]) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if keep.iter().any(|k| store.name(id).contains(k)) {
            continue;
        }
        store.get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn embed_identity_zero_and_width() {
    let dims = GridDims::new(4, 4, 4).unwrap();
    let grid = TokenGrid::new(dims, 8, random_vec(64 * 8, 1)).unwrap();
    let mut eye = Tensor::<f64>::zeros(&[8, 8]);
    for i in 0..8 {
        eye.data_mut()[i * 8 + i] = 1.0;
    }
    let out = linear_embed(&grid, &eye, &Tensor::zeros(&[8])).unwrap();
    assert_eq!(out, grid);

    let w = Tensor::from_vec(&[8, 24], random_vec(8 * 24, 2)).unwrap();
    let out = linear_embed(&grid, &w, &Tensor::zeros(&[24])).unwrap();
    assert_eq!((out.dims(), out.channels()), (dims, 24));

    let out = linear_embed(&grid, &Tensor::zeros(&[8, 24]), &Tensor::zeros(&[24])).unwrap();
    assert!(out.values().iter().all(|&v| v == 0.0));
}

fn block(width: usize, heads: usize, window: [usize; 3], seed: u64) -> (ParamStore<f64>, BlockWeights) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let b = BlockWeights::new(&mut store, &mut init, "b", width, heads, 2 * width, window, true);
    (store, b)
}

/// Value projection followed by the output projection, token by token.
fn project_values(store: &ParamStore<f64>, b: &BlockWeights, tokens: &[f64], c: usize) -> Vec<f64> {
    let qkv_w = store.get(b.qkv.weight).data();
    let qkv_b = store.get(b.qkv.bias.unwrap()).data();
    let proj_w = store.get(b.proj.weight).data();
    let proj_b = store.get(b.proj.bias.unwrap()).data();
    let mut out = Vec::new();
    for tok in tokens.chunks(c) {
        let v: Vec<f64> = (0..c)
            .map(|o| qkv_b[2 * c + o] + (0..c).map(|i| tok[i] * qkv_w[i * 3 * c + 2 * c + o]).sum::<f64>())
            .collect();
        out.extend((0..c).map(|o| proj_b[o] + (0..c).map(|i| v[i] * proj_w[i * c + o]).sum::<f64>()));
    }
    out
}

#[test]
fn singleton_windows_return_projected_values() {
    let c = 4;
    let dims = GridDims::new(2, 2, 2).unwrap();
    let spec = WindowSpec::regular([1, 1, 1]).unwrap();
    let (store, b) = block(c, 2, [1, 1, 1], 3);
    let tokens = random_vec(8 * c, 4);
    let batch = WindowBatch::new(dims, spec, c, tokens.clone()).unwrap();
    let mask = build_window_mask(dims, dims, &spec).unwrap();
    let out = window_attention(&batch, &mask, &store, &b, 2).unwrap();
    let expect = project_values(&store, &b, &tokens, c);
    for (a, e) in out.values().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn identical_tokens_give_identical_outputs() {
    let c = 6;
    let dims = GridDims::new(2, 2, 2).unwrap();
    let spec = WindowSpec::regular([2, 2, 2]).unwrap();
    let (store, b) = block(c, 3, [2, 2, 2], 5);
    let row = random_vec(c, 6);
    let tokens: Vec<f64> = (0..8).flat_map(|_| row.clone()).collect();
    let batch = WindowBatch::new(dims, spec, c, tokens).unwrap();
    let mask = build_window_mask(dims, dims, &spec).unwrap();
    let out = window_attention(&batch, &mask, &store, &b, 3).unwrap();
    let expect = project_values(&store, &b, &row, c);
    for tok in out.values().chunks(c) {
        for (a, e) in tok.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn shifted_attention_matches_dense_oracle() {
    let c = 4;
    let heads = 2;
    let window = [2, 2, 2];
    let dims = GridDims::new(2, 2, 4).unwrap();
    let spec = WindowSpec::shifted(window).unwrap();
    let (mut store, b) = block(c, heads, window, 7);
    let table = store.get_mut(b.rel_table.unwrap());
    let n = table.numel();
    table.data_mut().copy_from_slice(&random_vec(n, 8));
    let grid = TokenGrid::new(dims, c, random_vec(dims.numel() * c, 9)).unwrap();
    let batch = window_partition(&cyclic_shift(&grid, [-1, -1, -1]), &spec).unwrap();
    assert_eq!(batch.num_windows(), 2);
    let mask = build_window_mask(dims, dims, &spec).unwrap();
    let out = window_attention(&batch, &mask, &store, &b, heads).unwrap();

    // Dense oracle on the projected q, k, v.
    let w = store.get(b.qkv.weight).data();
    let bias = store.get(b.qkv.bias.unwrap()).data();
    let qkv: Vec<f64> = batch
        .values()
        .chunks(c)
        .flat_map(|tok| {
            (0..3 * c)
                .map(|o| bias[o] + (0..c).map(|i| tok[i] * w[i * 3 * c + o]).sum::<f64>())
                .collect::<Vec<_>>()
        })
        .collect();
    let (attn, _) = oracles::dense_attention(
        &qkv,
        2,
        8,
        c,
        heads,
        Some((store.get(b.rel_table.unwrap()).data(), &oracles::relative_index(window))),
        Some((mask.values(), 2)),
    );
    let pw = store.get(b.proj.weight).data();
    let pb = store.get(b.proj.bias.unwrap()).data();
    for (t, tok) in attn.chunks(c).enumerate() {
        for o in 0..c {
            let e = pb[o] + (0..c).map(|i| tok[i] * pw[i * c + o]).sum::<f64>();
            assert!((out.values()[t * c + o] - e).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_branches_leave_block_input_unchanged() {
    let c = 4;
    let (mut store, b) = block(c, 2, [2, 2, 2], 10);
    zero_all(&mut store, &["norm"]);
    let dims = GridDims::new(4, 4, 4).unwrap();
    let grid = TokenGrid::new(dims, c, random_vec(64 * c, 11)).unwrap();
    let spec = WindowSpec::shifted([2, 2, 2]).unwrap();
    for shifted in [false, true] {
        assert_eq!(swin_block(&grid, &spec, &store, &b, 2, shifted).unwrap(), grid);
    }
}

#[test]
fn zero_shift_equals_unshifted_block() {
    let c = 4;
    let (store, b) = block(c, 1, [2, 2, 2], 12);
    let dims = GridDims::new(4, 2, 4).unwrap();
    let grid = TokenGrid::new(dims, c, random_vec(dims.numel() * c, 13)).unwrap();
    let spec = WindowSpec::new([2, 2, 2], [0, 0, 0]).unwrap();
    assert_eq!(
        swin_block(&grid, &spec, &store, &b, 1, false).unwrap(),
        swin_block(&grid, &spec, &store, &b, 1, true).unwrap()
    );
}

#[test]
fn micro_block_gradients_on_every_weight() {
    let case = BlockCase {
        dims: [2, 2, 2],
        window: [2, 2, 2],
        width: 4,
        heads: 1,
        shifted: true,
        weighted: false,
    };
    let r = checks::block_gradient_check(case, usize::MAX, false).unwrap();
    assert!(r.checked > 150, "checked {}", r.checked);
    assert!(r.max_rel_error < 1e-4, "max relative error {}", r.max_rel_error);
}

#[test]
fn patch_merge_examples() {
    let dims = GridDims::new(4, 4, 4).unwrap();
    let grid = TokenGrid::new(dims, 3, random_vec(64 * 3, 14)).unwrap();
    let out = patch_merge_reduce(&grid, &Tensor::from_vec(&[24, 6], random_vec(144, 15)).unwrap()).unwrap();
    assert_eq!((out.dims().to_array(), out.channels()), ([2, 2, 2], 6));
    let out = patch_merge_reduce(&grid, &Tensor::zeros(&[24, 6])).unwrap();
    assert!(out.values().iter().all(|&v| v == 0.0));

    // Average then duplicate: every output channel is the mean of the 8 parents.
    let grid = TokenGrid::new(GridDims::new(2, 2, 2).unwrap(), 1, (1..=8).map(f64::from).collect()).unwrap();
    let out = patch_merge_reduce(&grid, &Tensor::filled(&[8, 2], 0.125)).unwrap();
    assert_eq!(out.values(), &[4.5, 4.5]);
}

fn default_swin() -> (SwinConfig, ParamStore<f32>, SwinWeights) {
    let cfg = SwinConfig::default();
    let mut store = ParamStore::new();
    let w = SwinWeights::new(&mut store, &mut Init::new(0), "swin", &cfg);
    (cfg, store, w)
}

fn ramp_volume(scale: f32) -> Volume<f32> {
    let data = (0..32 * 32 * 32).map(|i| scale * ((i * 7919) % 1000) as f32 / 1000.0).collect();
    Volume::new(1, [32; 3], [1.0; 3], data).unwrap()
}

fn tap_shapes(t: &EncoderTaps<f32>) -> Vec<([usize; 3], usize)> {
    t.taps.iter().map(|g| (g.dims().to_array(), g.channels())).collect()
}

#[test]
fn encoder_tap_shapes_and_determinism() {
    let (cfg, store, w) = default_swin();
    let a = encoder_forward(&ramp_volume(1.0), &cfg, &store, &w).unwrap();
    let expect = vec![([16; 3], 24), ([8; 3], 48), ([4; 3], 96), ([2; 3], 192)];
    assert_eq!(tap_shapes(&a), expect);
    let b = encoder_forward(&ramp_volume(1.0), &cfg, &store, &w).unwrap();
    assert!(a.taps.iter().zip(&b.taps).all(|(x, y)| x
        .values()
        .iter()
        .zip(y.values())
        .all(|(p, q)| p.to_bits() == q.to_bits())));
    let c = encoder_forward(&ramp_volume(2.0), &cfg, &store, &w).unwrap();
    assert_eq!(tap_shapes(&c), expect);
    assert_ne!(a.taps[0], c.taps[0]);
}

fn default_cnn() -> (CnnConfig, ParamStore<f32>, CnnWeights) {
    let cfg = CnnConfig::default();
    let mut store = ParamStore::new();
    let w = CnnWeights::new(&mut store, &mut Init::new(1), "cnn", &cfg);
    (cfg, store, w)
}

fn batch(v: &Volume<f32>) -> Tensor<f32> {
    let d = v.dims();
    Tensor::from_vec(&[1, v.channels(), d[0], d[1], d[2]], v.data().to_vec()).unwrap()
}

#[test]
fn conv_block_shape_and_zero_weights() {
    let (cfg, mut store, w) = default_cnn();
    let x = batch(&ramp_volume(1.0));
    let y = conv_block(&x, &store, &w.encoder[0], cfg.leaky_slope).unwrap();
    assert_eq!(y.shape(), &[1, 16, 32, 32, 32]);
    for conv in [w.encoder[0].conv1, w.encoder[0].conv2] {
        store.get_mut(conv.weight).data_mut().fill(0.0);
    }
    let y = conv_block(&x, &store, &w.encoder[0], cfg.leaky_slope).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn convolution_matches_sliding_window_on_5_cubed() {
    let x = Tensor::from_vec(&[1, 1, 5, 5, 5], random_vec(125, 16)).unwrap();
    let w = Tensor::from_vec(&[1, 1, 3, 3, 3], random_vec(27, 17)).unwrap();
    let b = Tensor::from_vec(&[1], vec![0.25]).unwrap();
    let g = Graph::new();
    let y = g.conv3d(g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone())).unwrap();
    assert!(g.value(y).max_abs_diff(&oracles::conv3d(&x, &w, &b)) < 1e-6);
}

#[test]
fn pooling_examples() {
    let c = downsample(&Tensor::<f32>::filled(&[1, 2, 4, 4, 4], 3.5)).unwrap();
    assert!(c.data().iter().all(|&v| v == 3.5));
    let block = Tensor::from_vec(&[1, 1, 2, 2, 2], (1..=8).map(|v| v as f32).collect()).unwrap();
    assert_eq!(downsample(&block).unwrap().data(), &[8.0]);
    let big = downsample(&Tensor::<f32>::zeros(&[1, 1, 32, 32, 32])).unwrap();
    assert_eq!(big.shape(), &[1, 1, 16, 16, 16]);
}

#[test]
fn upsample_examples() {
    let (_, mut store, w) = default_cnn();
    let up = w.up[0];
    let x = Tensor::from_vec(&[1, 32, 4, 4, 4], random_vec(32 * 64, 18).into_iter().map(|v| v as f32).collect())
        .unwrap();
    let y = upsample(&x, &store, &up).unwrap();
    assert_eq!(y.shape(), &[1, 16, 8, 8, 8]);
    store.get_mut(up.weight).data_mut().fill(0.0);
    let y = upsample(&x, &store, &up).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn transposed_convolution_matches_zero_stuffing_on_3_cubed() {
    let x = Tensor::from_vec(&[1, 2, 3, 3, 3], random_vec(54, 19)).unwrap();
    let w = Tensor::from_vec(&[2, 3, 2, 2, 2], random_vec(48, 20)).unwrap();
    let b = Tensor::from_vec(&[3], random_vec(3, 21)).unwrap();
    let g = Graph::new();
    let y = g
        .conv_transpose3d(g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()))
        .unwrap();
    assert!(g.value(y).max_abs_diff(&oracles::conv_transpose3d(&x, &w, &b)) < 1e-6);
}

#[test]
fn pyramid_shapes_determinism_and_finiteness() {
    let (cfg, store, w) = default_cnn();
    let v = ramp_volume(1.0);
    let p = cnn_encode(&v, &cfg, &store, &w).unwrap();
    let shapes: Vec<Vec<usize>> = p.levels.iter().map(|t| t.shape()[1..].to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![16, 32, 32, 32],
            vec![32, 16, 16, 16],
            vec![64, 8, 8, 8],
            vec![128, 4, 4, 4],
            vec![256, 2, 2, 2]
        ]
    );
    assert!(p.levels.iter().all(|t| t.is_finite()));
    assert_eq!(cnn_encode(&v, &cfg, &store, &w).unwrap(), p);
}

fn micro_cnn() -> CnnConfig {
    CnnConfig {
        levels: 3,
        base_channels: 2,
        ..CnnConfig::default()
    }
}

#[test]
fn fusion_examples() {
    let cfg = micro_cnn();
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(2);
    let w = CnnWeights::new(&mut store, &mut init, "cnn", &cfg);
    // One tap per level, each as wide as the level it lands on.
    let fusion = FusionWeights::new(&mut store, &mut init, "fuse", &cfg, &[(0, 2), (1, 4), (2, 8)]);
    let v = Volume::new(1, [8; 3], [1.0; 3], random_vec(512, 22)).unwrap();
    let p = cnn_encode(&v, &cfg, &store, &w).unwrap();

    let to_tokens = |t: &Tensor<f64>, scale: f64| {
        let s = t.shape();
        let (c, n) = (s[1], s[2] * s[3] * s[4]);
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for i in 0..n {
                out[i * c + ch] = scale * t.data()[ch * n + i];
            }
        }
        TokenGrid::new(GridDims::new(s[2], s[3], s[4]).unwrap(), c, out).unwrap()
    };
    let taps = |scale: f64| EncoderTaps {
        taps: p.levels.iter().map(|t| to_tokens(t, scale)).collect(),
        factors: vec![[1; 3], [2; 3], [4; 3]],
    };

    // Zero taps: nothing changes.
    let fused = fuse_taps(&p, &taps(0.0), &store, &fusion).unwrap();
    assert_eq!(fused, p);

    // Identity projections with taps = -pyramid: fused levels >= 1 vanish,
    // level 0 is untouched.
    for link in &fusion.links {
        let c = cfg.channels(link.level);
        let wt = store.get_mut(link.proj.weight);
        wt.data_mut().fill(0.0);
        for i in 0..c {
            wt.data_mut()[i * c + i] = 1.0;
        }
    }
    let fused = fuse_taps(&p, &taps(-1.0), &store, &fusion).unwrap();
    assert_eq!(fused.levels[0], p.levels[0]);
    for l in 1..cfg.levels {
        assert!(fused.levels[l].data().iter().all(|&v| v == 0.0), "level {l}");
    }
}
