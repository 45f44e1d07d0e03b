mod common;

use std::sync::Arc;

use common::{fd_error, probe, random};
use mosformer_core::tensor::{concat, kernels, permute_index, Graph, Tensor};
use rand::Rng;
use mosformer_core::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_inconsistent_buffers() {
    assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
}

#[test]
fn matmul_identity() {
    let g = Graph::no_grad();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(i.matmul(b).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_selector_row() {
    let g = Graph::no_grad();
    let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
    let b = g.constant(t(&[2, 1], &[5.0, 7.0]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[5.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let g = Graph::<f64>::no_grad();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient() {
    let err = fd_error(&[random(&[3, 4], 1), random(&[4, 2], 2)], |_, v| {
        probe(v[0].matmul(v[1]).unwrap(), 3)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn bmm_gradients_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let err = fd_error(&[random(&sa, 4), random(&sb, 5)], |_, v| {
            probe(v[0].bmm(v[1], ta, tb).unwrap(), 6)
        });
        assert!(err < 1e-6, "trans {ta}/{tb}: {err}");
    }
}

#[test]
fn softmax_uniform_and_stable() {
    let g = Graph::no_grad();
    let y = g.constant(t(&[3], &[0.0, 0.0, 0.0])).softmax_lastdim().value();
    for &v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = g.constant(t(&[2], &[1000.0, 1000.0])).softmax_lastdim().value();
    assert_eq!(y.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_matches_scalar_oracle() {
    let g = Graph::no_grad();
    let y = g.constant(t(&[3], &[1.0, 2.0, 3.0])).softmax_lastdim().value();
    for (a, b) in y.data().iter().zip(common::softmax(&[1.0, 2.0, 3.0])) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradient() {
    let err = fd_error(&[random(&[3, 5], 7)], |_, v| probe(v[0].softmax_lastdim(), 8));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn layer_norm_examples() {
    let g = Graph::no_grad();
    let ones = g.constant(Tensor::ones(&[2]));
    let zeros = g.constant(Tensor::zeros(&[2]));
    let y = g.constant(t(&[1, 2], &[4.0, 4.0])).layer_norm(ones, zeros, 1e-5).unwrap().value();
    assert_eq!(y.data(), &[0.0, 0.0]);
    let y = g.constant(t(&[1, 2], &[1.0, 3.0])).layer_norm(ones, zeros, 1e-5).unwrap().value();
    assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_matches_loop_oracle() {
    let (x, gm, bt) = (random(&[4, 6], 9), random(&[6], 10), random(&[6], 11));
    let g = Graph::no_grad();
    let y = g
        .constant(x.clone())
        .layer_norm(g.constant(gm.clone()), g.constant(bt.clone()), 1e-5)
        .unwrap()
        .value();
    let want = common::layer_norm(x.data(), gm.data(), bt.data(), 1e-5);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_gradient() {
    let err = fd_error(&[random(&[3, 5], 12), random(&[5], 13), random(&[5], 14)], |_, v| {
        probe(v[0].layer_norm(v[1], v[2], 1e-5).unwrap(), 15)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn composite_graph_gradient() {
    // layer norm → matmul → softmax → scalar
    let inputs = [random(&[4, 6], 16), random(&[6], 17), random(&[6], 18), random(&[6, 3], 19)];
    let err = fd_error(&inputs, |_, v| {
        let h = v[0].layer_norm(v[1], v[2], 1e-5).unwrap();
        probe(h.matmul(v[3]).unwrap().softmax_lastdim(), 20)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_identity_kernel() {
    let g = Graph::no_grad();
    let x = random(&[1, 1, 3, 3], 21);
    let y = g
        .constant(x.clone())
        .conv2d(g.constant(Tensor::ones(&[1, 1, 1, 1])), None, 1, 0)
        .unwrap()
        .value();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_counting_window() {
    let g = Graph::<f64>::no_grad();
    let y = g
        .constant(Tensor::ones(&[1, 1, 4, 4]))
        .conv2d(g.constant(Tensor::ones(&[1, 1, 2, 2])), None, 2, 0)
        .unwrap()
        .value();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[4.0; 4]);
}

#[test]
fn conv_matches_direct_loops() {
    let g = Graph::no_grad();
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (1, 2, 5)] {
        let x = random(&[2, 3, 7, 6], 22);
        let w = random(&[4, 3, k, k], 23);
        let b = random(&[4], 24);
        let y = g
            .constant(x.clone())
            .conv2d(g.constant(w.clone()), Some(g.constant(b.clone())), stride, pad)
            .unwrap()
            .value();
        let want = common::conv2d(&x, &w, Some(b.data()), stride, pad);
        assert_eq!(y.shape(), want.shape());
        assert!(y.max_abs_diff(&want) < 1e-10, "stride {stride} pad {pad} k {k}");
    }
}

#[test]
fn conv_rejects_empty_output() {
    let g = Graph::<f64>::no_grad();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(x.conv2d(w, None, 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn conv_gradient() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let err = fd_error(&[random(&[2, 2, 5, 5], 25), random(&[3, 2, k, k], 26), random(&[3], 27)], |_, v| {
            probe(v[0].conv2d(v[1], Some(v[2]), stride, pad).unwrap(), 28)
        });
        assert!(err < 1e-4, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn elementwise_gradients() {
    let ins = [random(&[2, 3], 30), random(&[2, 3], 31)];
    let cases: Vec<(&str, f64)> = vec![
        ("add", fd_error(&ins, |_, v| probe(v[0].add(v[1]).unwrap(), 1))),
        ("sub", fd_error(&ins, |_, v| probe(v[0].sub(v[1]).unwrap(), 1))),
        ("mul", fd_error(&ins, |_, v| probe(v[0].mul(v[1]).unwrap(), 1))),
        ("scale", fd_error(&ins[..1], |_, v| probe(v[0].scale(-2.5), 1))),
        ("relu", fd_error(&ins[..1], |_, v| probe(v[0].relu(), 1))),
        ("gelu", fd_error(&ins[..1], |_, v| probe(v[0].gelu(), 1))),
        ("sum", fd_error(&ins[..1], |_, v| v[0].mul(v[0]).unwrap().sum_all())),
        ("mean", fd_error(&ins[..1], |_, v| v[0].mul(v[0]).unwrap().mean_all())),
    ];
    for (name, err) in cases {
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn broadcast_and_bias_gradients() {
    let err = fd_error(&[random(&[2, 3, 4], 32), random(&[3, 4], 33)], |_, v| {
        probe(v[0].add_broadcast(v[1]).unwrap(), 2)
    });
    assert!(err < 1e-6, "{err}");
    let err = fd_error(&[random(&[2, 3, 4], 34), random(&[3], 35)], |_, v| {
        probe(v[0].add_bias(v[1], 1).unwrap(), 2)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn indexing_gradients() {
    let x = random(&[2, 3, 4], 36);
    let index: Arc<Vec<u32>> = Arc::new(vec![0, 5, 5, u32::MAX, 23, 7]);
    let err = fd_error(std::slice::from_ref(&x), |_, v| probe(v[0].gather(index.clone(), &[2, 3]).unwrap(), 3));
    assert!(err < 1e-6, "gather {err}");
    let err = fd_error(std::slice::from_ref(&x), |_, v| probe(v[0].permute(&[2, 0, 1]).unwrap(), 3));
    assert!(err < 1e-6, "permute {err}");
    let err = fd_error(std::slice::from_ref(&x), |_, v| probe(v[0].narrow(1, 1, 2).unwrap(), 3));
    assert!(err < 1e-6, "narrow {err}");
    let err = fd_error(&[x.clone(), random(&[2, 2, 4], 37)], |_, v| {
        probe(concat(&[v[0], v[1]], 1).unwrap(), 3)
    });
    assert!(err < 1e-6, "concat {err}");
}

#[test]
fn permute_moves_elements() {
    let g = Graph::no_grad();
    let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
    assert_eq!(x.permute(&[1, 0]).unwrap().value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    assert!(x.permute(&[0, 0]).is_err());
}

#[test]
fn batch_norm_gradients() {
    let err = fd_error(&[random(&[3, 2, 3, 3], 38), random(&[2], 39), random(&[2], 40)], |_, v| {
        probe(v[0].batch_norm_train(v[1], v[2], 1e-5).unwrap().0, 4)
    });
    assert!(err < 1e-4, "train {err}");
    let mean = [0.1, -0.2];
    let var = [0.5, 2.0];
    let err = fd_error(&[random(&[3, 2, 3, 3], 41), random(&[2], 42), random(&[2], 43)], |_, v| {
        probe(v[0].batch_norm_eval(v[1], v[2], &mean, &var, 1e-5).unwrap(), 4)
    });
    assert!(err < 1e-6, "eval {err}");
}

#[test]
fn batch_norm_statistics() {
    let g = Graph::no_grad();
    let x = random(&[4, 2, 3, 3], 44);
    let (y, mean, var) = g
        .constant(x.clone())
        .batch_norm_train(g.constant(Tensor::ones(&[2])), g.constant(Tensor::zeros(&[2])), 1e-5)
        .unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..9).map(move |i| (n, i)))
            .map(|(n, i)| x.data()[(n * 2 + c) * 9 + i])
            .collect();
        let m = vals.iter().sum::<f64>() / 36.0;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 36.0;
        assert!((mean[c] - m).abs() < 1e-12 && (var[c] - v).abs() < 1e-12);
    }
    let y = y.value();
    let ch0: f64 = (0..4).flat_map(|n| (0..9).map(move |i| (n, i))).map(|(n, i)| y.data()[n * 18 + i]).sum::<f64>();
    assert!(ch0.abs() < 1e-9);
}

#[test]
fn upsample_examples_and_gradient() {
    let g = Graph::<f64>::no_grad();
    let c = g.constant(Tensor::full(&[1, 2, 3, 3], 1.5)).upsample_bilinear(6, 6).unwrap().value();
    assert!(c.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    // Half-pixel centres: 2 → 4 along a ramp [0, 1] gives [0, .25, .75, 1].
    let r = g.constant(t(&[1, 1, 1, 2], &[0.0, 1.0])).upsample_bilinear(1, 4).unwrap().value();
    assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    let err = fd_error(&[random(&[2, 2, 3, 4], 45)], |_, v| probe(v[0].upsample_bilinear(6, 8).unwrap(), 5));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn linear_gradient() {
    let err = fd_error(&[random(&[5, 4], 46), random(&[4, 3], 47), random(&[3], 48)], |_, v| {
        probe(v[0].linear(v[1], Some(v[2])).unwrap(), 6)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradients_sum_over_reuse() {
    let g = Graph::new();
    let x = g.variable(t(&[1], &[3.0]));
    let y = x.mul(x).unwrap().add(x).unwrap().sum_all();
    let grads = g.backward(y);
    assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let x = g.constant(t(&[1], &[3.0]));
    let w = g.variable(t(&[1], &[2.0]));
    let grads = g.backward(x.mul(w).unwrap().sum_all());
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(w).unwrap().data(), &[3.0]);
}

fn gemm_case(m: usize, n: usize, k: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let a = random(&[m, k], seed).into_vec();
    let b = random(&[k, n], seed + 1).into_vec();
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in 0u64..10_000) {
        let g = Graph::no_grad();
        let x = random(&[rows, cols], seed).map(|v| v * 50.0);
        let y = g.constant(x).softmax_lastdim().value();
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gemm_matches_reference(m in 1usize..40, n in 1usize..40, k in 1usize..40, seed in 0u64..1000) {
        let (a, b) = gemm_case(m, n, k, seed);
        let mut c = vec![0.0; m * n];
        kernels::gemm(false, false, m, n, k, &a, &b, &mut c);
        let want = kernels::gemm_reference(m, n, k, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposes(m in 1usize..20, n in 1usize..20, k in 1usize..20, seed in 0u64..1000) {
        let (a, b) = gemm_case(m, n, k, seed);
        let want = kernels::gemm_reference(m, n, k, &a, &b);
        let at = kernels::transpose(&a, m, k);
        let bt = kernels::transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        kernels::gemm(true, true, m, n, k, &at, &bt, &mut c);
        for (x, y) in c.iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_random_chains(rows in 1usize..4, cols in 2usize..5, seed in 0u64..1000) {
        let inputs = [random(&[rows, cols], seed), random(&[cols, cols], seed + 1)];
        let err = fd_error(&inputs, |_, v| {
            probe(v[0].matmul(v[1]).unwrap().gelu().softmax_lastdim(), seed + 2)
        });
        prop_assert!(err < 1e-4, "{}", err);
    }
}

/// Kernels must give the same bits whether or not work is split across
/// threads.
#[test]
fn parallel_and_sequential_agree_bitwise() {
    let x = random(&[4, 8, 32, 32], 50).map(|v| v as f32 as f64);
    let w = random(&[16, 8, 3, 3], 51);
    let run = || {
        let g = Graph::new();
        let xv = g.variable(x.clone());
        let wv = g.variable(w.clone());
        let y = xv.conv2d(wv, None, 1, 1).unwrap();
        let loss = probe(y.softmax_lastdim(), 52);
        let grads = g.backward(loss);
        (y.value(), grads.get(xv).unwrap(), grads.get(wv).unwrap())
    };
    kernels::set_parallel(false);
    let seq = run();
    kernels::set_parallel(true);
    let par = run();
    assert_eq!(seq.0.data(), par.0.data());
    assert_eq!(seq.1.data(), par.1.data());
    assert_eq!(seq.2.data(), par.2.data());
}

proptest! {
    #[test]
    fn permute_matches_index_gather(dims in prop::collection::vec(1usize..4, 1..6), seed in 0u64..1000) {
        let rank = dims.len();
        let mut axes: Vec<usize> = (0..rank).collect();
        let mut r = common::rng(seed);
        for i in (1..rank).rev() {
            axes.swap(i, r.random_range(0..=i));
        }
        let x = common::random(&dims, seed);
        let g = Graph::<f64>::no_grad();
        let got = g.constant(x.clone()).permute(&axes).unwrap().value();
        let index = permute_index(&dims, &axes).unwrap();
        let want: Vec<f64> = index.iter().map(|&i| x.data()[i as usize]).collect();
        prop_assert_eq!(got.data(), &want[..]);
    }
}

#[test]
fn relu_passes_non_finite_values_through() {
    let g = Graph::<f64>::no_grad();
    let x = g.constant(Tensor::new(vec![4], vec![f64::NAN, -1.0, 2.0, f64::INFINITY]).unwrap());
    let y = x.relu().value();
    assert!(y.data()[0].is_nan());
    assert_eq!(&y.data()[1..], &[0.0, 2.0, f64::INFINITY]);
}
