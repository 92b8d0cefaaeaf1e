use cats_core::checks::oracles;
use cats_core::geometry::{
    build_window_mask, crop, cyclic_shift, merge_neighborhoods, pad_to_window, window_partition, window_reverse,
    GridDims, TokenGrid, WindowSpec,
};
use cats_core::metrics::{dice_masks, surface_scores};
use cats_core::model::argmax_channels;
use cats_core::Tensor;
use proptest::prelude::*;

fn axis() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=4, 1usize..=3).prop_map(|(w, k)| (w, w * k))
}

fn grid_case() -> impl Strategy<Value = ([usize; 3], [usize; 3], usize)> {
    (axis(), axis(), axis(), 1usize..=3).prop_map(|(a, b, c, ch)| ([a.0, b.0, c.0], [a.1, b.1, c.1], ch))
}

fn mask_pair(max: usize) -> impl Strategy<Value = ([usize; 3], Vec<bool>, Vec<bool>)> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(d, h, w)| {
        let n = d * h * w;
        (
            Just([d, h, w]),
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_then_reverse_is_identity((window, dims, ch) in grid_case(), shift in any::<[u8; 3]>()) {
        let dims = GridDims::from_array(dims).unwrap();
        let grid = TokenGrid::iota(dims, ch);
        let shift = [0, 1, 2].map(|a| (shift[a] as usize % window[a]) as isize);
        let rolled = cyclic_shift(&grid, shift);
        let spec = WindowSpec::regular(window).unwrap();
        let back = window_reverse(&window_partition(&rolled, &spec).unwrap()).unwrap();
        prop_assert_eq!(cyclic_shift(&back, shift.map(|s| -s)), grid);
    }

    #[test]
    fn pad_then_crop_is_identity(d in 1usize..7, h in 1usize..7, w in 1usize..7, win in 1usize..4) {
        let grid = TokenGrid::iota(GridDims::new(d, h, w).unwrap(), 2);
        let spec = WindowSpec::regular([win; 3]).unwrap();
        let (padded, record) = pad_to_window(&grid, &spec);
        for e in padded.dims().to_array() {
            prop_assert_eq!(e % win, 0);
        }
        prop_assert_eq!(crop(&padded, &record).unwrap(), grid);
    }

    #[test]
    fn merge_preserves_values(d in 1usize..4, h in 1usize..4, w in 1usize..4, ch in 1usize..3) {
        let grid = TokenGrid::iota(GridDims::new(2 * d, 2 * h, 2 * w).unwrap(), ch);
        let merged = merge_neighborhoods(&grid).unwrap();
        prop_assert_eq!(merged.channels(), 8 * ch);
        let mut a = grid.values().to_vec();
        let mut b = merged.values().to_vec();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mask_matches_oracle_and_is_symmetric(window in prop::array::uniform3(1usize..4), extra in prop::array::uniform3(0usize..8)) {
        let valid = [0, 1, 2].map(|a| 1 + extra[a]);
        let padded = [0, 1, 2].map(|a| valid[a].div_ceil(window[a]) * window[a]);
        let spec = WindowSpec::shifted(window).unwrap();
        let mask = build_window_mask(
            GridDims::from_array(padded).unwrap(),
            GridDims::from_array(valid).unwrap(),
            &spec,
        )
        .unwrap();
        let oracle = oracles::brute_force_mask(padded, valid, window, spec.shift);
        prop_assert_eq!(mask.values(), oracle.as_slice());
        let t = mask.tokens();
        for w in 0..mask.num_windows() {
            for i in 0..t {
                prop_assert_eq!(mask.get(w, i, i), 0.0);
                for j in 0..t {
                    prop_assert_eq!(mask.get(w, i, j), mask.get(w, j, i));
                }
            }
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded((_, a, b) in mask_pair(6)) {
        let d = dice_masks(&a, &b);
        prop_assert_eq!(d, dice_masks(&b, &a));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice_masks(&a, &a), 1.0);
    }

    #[test]
    fn surface_distances_are_symmetric_and_ordered((dims, a, b) in mask_pair(6)) {
        let ab = surface_scores(&a, &b, dims, [1.0, 1.5, 0.5]);
        let ba = surface_scores(&b, &a, dims, [1.0, 1.5, 0.5]);
        prop_assert_eq!(ab, ba);
        if let Some(s) = ab {
            prop_assert!(s.asd >= 0.0 && s.hd95 >= 0.0);
            prop_assert!(s.hd95 <= max_distance(&a, &b, dims, [1.0, 1.5, 0.5]));
            prop_assert_eq!(surface_scores(&a, &a, dims, [1.0; 3]).unwrap().asd, 0.0);
        }
    }

    #[test]
    fn surface_distances_ignore_translation((dims, a, b) in mask_pair(5), off in prop::array::uniform3(0usize..3)) {
        let big = [0, 1, 2].map(|i| dims[i] + off[i]);
        let moved = |m: &[bool]| {
            let mut out = vec![false; big.iter().product()];
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        out[((z + off[0]) * big[1] + y + off[1]) * big[2] + x + off[2]] = m[(z * dims[1] + y) * dims[2] + x];
                    }
                }
            }
            out
        };
        // Padding changes which voxels touch the border, so compare on
        // masks that already stay clear of it.
        let interior = |m: &[bool]| -> Vec<bool> {
            let mut out = m.to_vec();
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        if z == 0 || y == 0 || x == 0 || z + 1 == dims[0] || y + 1 == dims[1] || x + 1 == dims[2] {
                            out[(z * dims[1] + y) * dims[2] + x] = false;
                        }
                    }
                }
            }
            out
        };
        let (a, b) = (interior(&a), interior(&b));
        let here = surface_scores(&a, &b, dims, [1.0; 3]);
        let there = surface_scores(&moved(&a), &moved(&b), big, [1.0; 3]);
        prop_assert_eq!(here, there);
    }

    #[test]
    fn argmax_ignores_constant_offsets(values in proptest::collection::vec(-5.0f32..5.0, 3 * 8), c in -100.0f32..100.0) {
        let t = Tensor::from_vec(&[1, 3, 2, 2, 2], values.clone()).unwrap();
        let shifted = Tensor::from_vec(&[1, 3, 2, 2, 2], values.iter().map(|v| v + c).collect()).unwrap();
        // Offsets can merge nearly equal values in f32; only compare clear winners.
        let a = argmax_channels(&t).unwrap();
        let b = argmax_channels(&shifted).unwrap();
        for v in 0..8 {
            let mut col: Vec<f32> = (0..3).map(|k| values[k * 8 + v]).collect();
            col.sort_by(f32::total_cmp);
            if col[2] - col[1] > 1e-3 {
                prop_assert_eq!(a[v], b[v]);
            }
        }
    }
}

fn max_distance(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> f64 {
    let sa = oracles::surface(a, dims, spacing);
    let sb = oracles::surface(b, dims, spacing);
    let d = |p: &[f64; 3], q: &[f64; 3]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&sa, &sb).max(directed(&sb, &sa))
}
