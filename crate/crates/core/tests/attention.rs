mod common;

use std::sync::Arc;

use common::{fd_error_store, maps, msa_store, random, rng, run_csw, weights};
use mosformer_core::attention::{csw_msa, w_msa, IfTrans, IfTransConfig, NeighborUpdate};
use mosformer_core::tensor::nn::{Ctx, Init};
use mosformer_core::tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

#[test]
fn joint_window_matches_brute_force() {
    // s = 1, M = 2, d = 4, one head: 12 tokens per joint window.
    let (store, msa) = msa_store(4, 1, 2, 1, 1.0);
    let xs = maps(3, 4, 4, 4, 10);
    let got = run_csw(&store, &msa, &xs, 0);
    let w = weights(&store, "a", 1, 4, 2);
    let mut worst = 0.0f64;
    for wy in 0..2 {
        for wx in 0..2 {
            let mut toks = Vec::new();
            let mut pos = Vec::new();
            for x in &xs {
                for ty in 0..2 {
                    for tx in 0..2 {
                        let (y, xx) = (wy * 2 + ty, wx * 2 + tx);
                        let base = (y * 4 + xx) * 4;
                        toks.push(x.data()[base..base + 4].to_vec());
                        pos.push((y as isize, xx as isize));
                    }
                }
            }
            assert_eq!(toks.len(), 12);
            let want = common::attention(&toks, &pos, &w, |_, _| true);
            for (k, row) in want.iter().enumerate() {
                let (s, t) = (k / 4, k % 4);
                let (y, xx) = (wy * 2 + t / 2, wx * 2 + t % 2);
                for c in 0..4 {
                    worst = worst.max((got[s].get(&[0, y, xx, c]) - row[c]).abs());
                }
            }
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn shifted_layer_matches_displaced_windows() {
    for (h, w, m, heads, d) in [(4, 4, 2, 1, 4), (8, 8, 4, 2, 8), (6, 9, 3, 2, 4)] {
        let shift = m / 2;
        let (store, msa) = msa_store(d, heads, m, 2, 1.0);
        let xs = maps(3, h, w, d, 20);
        let got = run_csw(&store, &msa, &xs, shift);
        let flat: Vec<Vec<f64>> = xs.iter().map(|x| x.data().to_vec()).collect();
        let want = common::displaced_window_attention(&flat, h, w, &weights(&store, "a", heads, d, m), shift);
        for (g, wnt) in got.iter().zip(&want) {
            let err = g.data().iter().zip(wnt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{h}×{w} M={m}: {err}");
        }
    }
}

#[test]
fn single_slice_equals_window_attention_bitwise() {
    let (store, msa) = msa_store(8, 2, 4, 3, 1.0);
    let x = random(&[2, 8, 12, 8], 30);
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &store, false);
    let v = g.constant(x);
    for shift in [0, 2] {
        let a = csw_msa(ctx, &[v], &msa, shift, &[0]).unwrap()[0].value();
        let b = w_msa(ctx, v, &msa, shift).unwrap().value();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn replicated_slices_without_bias_match_single_slice() {
    let (mut store, msa) = msa_store(4, 2, 2, 4, 1.0);
    store.set_value(msa.bias_table, Tensor::zeros(&[2, 9])).unwrap();
    let x = random(&[1, 4, 4, 4], 40);
    let single = run_csw(&store, &msa, std::slice::from_ref(&x), 0);
    let triple = run_csw(&store, &msa, &[x.clone(), x.clone(), x.clone()], 0);
    assert!(triple[1].max_abs_diff(&single[0]) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permutation_equivariance(seed in 0u64..1000, perm_seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let (mut store, msa) = msa_store(4, 2, 2, seed, 1.0);
        store.set_value(msa.bias_table, Tensor::zeros(&[2, 9])).unwrap();
        let t = 12;
        let tokens = random(&[1, t, 4], seed + 7);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng(perm_seed));
        let permuted = Tensor::from_fn(&[1, t, 4], |i| tokens.data()[perm[i / 4] * 4 + i % 4]);
        let bias = Arc::new(vec![0u32; 2 * t * t]);
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, &store, false);
        let a = msa.attend(ctx, g.constant(tokens), &bias, None).unwrap().value();
        let b = msa.attend(ctx, g.constant(permuted), &bias, None).unwrap().value();
        for i in 0..t {
            for c in 0..4 {
                prop_assert!((b.data()[i * 4 + c] - a.data()[perm[i] * 4 + c]).abs() < 1e-12);
            }
        }
    }
}

fn block(s: usize, m: usize, dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, IfTrans) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cfg = IfTransConfig {
        window: m,
        dim,
        heads,
        s,
        mlp_ratio: 4.0,
        neighbor_update: NeighborUpdate::Joint,
    };
    let b = IfTrans::new(&mut store, &mut Init { rng: &mut r }, "ift.k1", cfg).unwrap();
    // Replace the small default init so every path contributes visibly.
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        let name = store.get(id).name.clone();
        let v = random(&shape, seed * 1000 + k as u64);
        let v = if name.contains("gamma") { v.map(|x| 1.0 + 0.2 * x) } else { v.map(|x| 0.5 * x) };
        store.set_value(id, v).unwrap();
    }
    (store, b)
}

fn run_block(store: &ParamStore<f64>, b: &IfTrans, xs: &[Tensor<f64>]) -> Tensor<f64> {
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, store, false);
    let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
    b.forward(ctx, &vars).unwrap().value()
}

#[test]
fn zero_output_projections_give_identity() {
    let (mut store, b) = block(1, 2, 8, 2, 5);
    for l in &b.layers {
        for id in [l.msa.proj.weight, l.msa.proj.bias, l.mlp2.weight, l.mlp2.bias] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }
    let xs: Vec<_> = (0..3).map(|s| random(&[2, 8, 4, 6], 50 + s)).collect();
    let y = run_block(&store, &b, &xs);
    assert_eq!(y.data(), xs[1].data());
}

/// Reference two-layer block on one slice, written with plain loops.
fn swin_block_oracle(store: &ParamStore<f64>, x: &Tensor<f64>, m: usize, dim: usize, heads: usize) -> Vec<f64> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    // [d, H, W] → [H, W, d]
    let mut cur: Vec<f64> = (0..h * w * dim).map(|i| x.data()[(i % dim) * h * w + i / dim]).collect();
    for (l, shift) in [(0, 0), (1, m / 2)] {
        let p = format!("ift.k1.l{l}");
        let get = |n: &str| store.value(store.id(&format!("{p}.{n}")).unwrap()).data().to_vec();
        let normed = common::layer_norm(&cur, &get("ln1.gamma"), &get("ln1.beta"), 1e-5);
        let attn = common::displaced_window_attention(&[normed], h, w, &weights(store, &p, heads, dim, m), shift);
        let x1: Vec<f64> = cur.iter().zip(&attn[0]).map(|(a, b)| a + b).collect();
        let n2 = common::layer_norm(&x1, &get("ln2.gamma"), &get("ln2.beta"), 1e-5);
        let hid: Vec<f64> = common::affine(&n2, &get("mlp1.weight"), &get("mlp1.bias"), dim)
            .into_iter()
            .map(common::gelu)
            .collect();
        let out = common::affine(&hid, &get("mlp2.weight"), &get("mlp2.bias"), 4 * dim);
        cur = x1.iter().zip(&out).map(|(a, b)| a + b).collect();
    }
    // back to [d, H, W]
    (0..h * w * dim).map(|i| cur[(i % (h * w)) * dim + i / (h * w)]).collect()
}

#[test]
fn single_slice_block_matches_reference() {
    let (store, b) = block(0, 4, 8, 2, 6);
    let x = random(&[1, 8, 8, 12], 60);
    let y = run_block(&store, &b, std::slice::from_ref(&x));
    let want = swin_block_oracle(&store, &x, 4, 8, 2);
    let err = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
}

#[test]
fn block_gradient_matches_finite_differences() {
    let (store, b) = block(1, 2, 4, 2, 7);
    let xs: Vec<_> = (0..3).map(|s| random(&[1, 4, 4, 4], 70 + s)).collect();
    let err = fd_error_store(&store, |g, st| {
        let ctx = Ctx::new(g, st, true);
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        common::probe(b.forward(ctx, &vars).unwrap(), 71)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn block_input_gradient() {
    let (store, b) = block(1, 2, 4, 1, 8);
    let store: &'static ParamStore<f64> = Box::leak(Box::new(store));
    let xs: Vec<_> = (0..3).map(|s| random(&[1, 4, 4, 4], 80 + s)).collect();
    let err = common::fd_error(&xs, |g, v| {
        let ctx = Ctx::new(g, store, true);
        common::probe(b.forward(ctx, v).unwrap(), 81)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn block_keeps_shape_at_every_scale() {
    // Desk-scale pyramid extents for 64×64 inputs, window 4.
    for (k, (hw, dim, heads)) in [(32, 16, 1), (16, 32, 2), (8, 64, 4), (4, 128, 8)].into_iter().enumerate() {
        let mut r = rng(k as u64);
        let mut store = ParamStore::<f32>::new();
        let cfg = IfTransConfig {
            window: 4,
            dim,
            heads,
            s: 1,
            mlp_ratio: 4.0,
            neighbor_update: NeighborUpdate::Joint,
        };
        let b = IfTrans::new(&mut store, &mut Init { rng: &mut r }, &format!("ift.k{}", k + 1), cfg).unwrap();
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, &store, false);
        let xs: Vec<_> = (0..3).map(|s| g.constant(random(&[2, dim, hw, hw], s).cast::<f32>())).collect();
        assert_eq!(b.forward(ctx, &xs).unwrap().shape(), vec![2, dim, hw, hw]);
    }
}

#[test]
fn wrong_slice_count_is_rejected() {
    let (store, b) = block(1, 2, 4, 1, 9);
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &store, false);
    let x = g.constant(random(&[1, 4, 4, 4], 0));
    assert!(b.forward(ctx, &[x, x]).is_err());
}
