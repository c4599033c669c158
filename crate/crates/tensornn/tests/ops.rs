use binsep_tensornn::gradcheck::{finite_diff_check, finite_diff_check_params};
use binsep_tensornn::layers::{attention, BatchNorm2d, Conv2d, Linear, MultiHeadAttention};
use binsep_tensornn::{Ctx, CustomOp, Graph, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-3;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so ±h never crosses a ReLU kink.
fn rand_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Weighted sum with fixed random weights turns any output into a scalar with a generic gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.input(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn brute_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for bi in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.get(&[bi, ci, iy as usize, ix as usize]) * w.get(&[o, ci, i, j]);
                                }
                            }
                        }
                    }
                    out.set(&[bi, o, y, xx], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
    let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w), g.input(Tensor::zeros(&[3])));
    let y = g.conv2d(xv, wv, Some(bv), 1, (0, 0)).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_all_ones_interior() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(&[1, 1, 5, 5]));
    let w = g.input(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, 1, (1, 1)).unwrap();
    assert_eq!(g.value(y).get(&[0, 0, 2, 2]), 9.0);
    assert_eq!(g.value(y).get(&[0, 0, 0, 0]), 4.0);
}

#[test]
fn conv_matches_loop_oracle_and_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let bv = g.input(Tensor::new(&[3], b.clone()).unwrap());
        let y = g.conv2d(xv, wv, Some(bv), 2, (1, 1)).unwrap();
        let oracle = brute_conv(&x, &w, &b, 2, 1);
        assert_eq!(g.value(y).shape(), oracle.shape());
        for (a, o) in g.value(y).data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-6);
        }
        let wt = w.clone();
        let err = finite_diff_check(
            |g, x| {
                let wv = g.input(wt.clone());
                let y = g.conv2d(x, wv, None, 2, (1, 1))?;
                probe(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: input grad err {err}");
        let xt = x.clone();
        let err = finite_diff_check(
            |g, w| {
                let xv = g.input(xt.clone());
                let y = g.conv2d(xv, w, None, 2, (1, 1))?;
                probe(g, y, seed)
            },
            &w,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: weight grad err {err}");
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> = <x, convT(y)> for shared weights
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
        let w = rand_tensor(&mut rng, &[4, 3, 4, 4]);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let cx = g.conv2d(xv, wv, None, 2, (1, 1)).unwrap();
        let y = rand_tensor(&mut rng, g.shape(cx));
        let yv = g.input(y.clone());
        let ty = g.conv_transpose2d(yv, wv, None, 2, (1, 1)).unwrap();
        assert_eq!(g.shape(ty), x.shape());
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

        let wt = w.clone();
        let err = finite_diff_check(
            |g, y| {
                let wv = g.input(wt.clone());
                let o = g.conv_transpose2d(y, wv, None, 2, (1, 1))?;
                probe(g, o, seed)
            },
            &y,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: {err}");
        let yt = y.clone();
        let err = finite_diff_check(
            |g, w| {
                let yv = g.input(yt.clone());
                let o = g.conv_transpose2d(yv, w, None, 2, (1, 1))?;
                probe(g, o, seed)
            },
            &w,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn batchnorm_normalizes_and_rejects_single_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_fn(&[4, 2, 3, 3], |_| rng.gen_range(2.0..5.0));
    let mut g = Graph::new();
    let xv = g.input(x);
    let (gam, bet) = (g.input(Tensor::ones(&[2])), g.input(Tensor::zeros(&[2])));
    let (y, stats) = g.batchnorm2d_train(xv, gam, bet, 1e-5).unwrap();
    let yd = g.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..9).map(move |i| (n, i))).map(|(n, i)| yd.data()[(n * 2 + c) * 9 + i]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }
    assert!(stats.mean.iter().all(|m| (2.0..5.0).contains(m)));

    let one = g.input(Tensor::ones(&[1, 2, 3, 3]));
    assert!(g.batchnorm2d_train(one, gam, bet, 1e-5).is_err());
}

#[test]
fn batchnorm_on_normalized_channel_is_near_identity() {
    // channel with mean 0 and (biased) variance 1 over the batch
    let vals = [1.0, -1.0, 1.0, -1.0];
    let x = Tensor::from_f64(&[2, 1, 1, 2], &vals).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let (gam, bet) = (g.input(Tensor::ones(&[1])), g.input(Tensor::zeros(&[1])));
    let (y, _) = g.batchnorm2d_train(xv, gam, bet, 1e-5).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batchnorm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 3]);
        let gam = Tensor::from_fn(&[2], |_| rng.gen_range(0.5..1.5));
        let bet = rand_tensor(&mut rng, &[2]);
        let (gt, bt) = (gam.clone(), bet.clone());
        let err = finite_diff_check(
            |g, x| {
                let (gv, bv) = (g.input(gt.clone()), g.input(bt.clone()));
                let (y, _) = g.batchnorm2d_train(x, gv, bv, 1e-5)?;
                probe(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: {err}");
        let xt = x.clone();
        let err = finite_diff_check(
            |g, gm| {
                let (xv, bv) = (g.input(xt.clone()), g.input(bet.clone()));
                let (y, _) = g.batchnorm2d_train(xv, gm, bv, 1e-5)?;
                probe(g, y, seed)
            },
            &gam,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: gamma {err}");
        // eval mode with fixed statistics
        let err = finite_diff_check(
            |g, x| {
                let (gv, bv) = (g.input(gam.clone()), g.input(bet.clone()));
                let y = g.batchnorm2d_eval(x, gv, bv, &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
                probe(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: eval {err}");
    }
}

#[test]
fn activation_values() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[3], &[1.0, -1.0, 0.0]).unwrap());
    let l = g.leaky_relu(x, 0.2).unwrap();
    assert_eq!(g.value(l).data(), &[1.0, -0.2, 0.0]);
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[1.0, 0.0, 0.0]);
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[2], 0.5);
}

#[test]
fn elementwise_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = rand_nonzero(&mut rng, &[3, 4]);
        let ops: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>)> = vec![
            ("leaky_relu", Box::new(|g, x| g.leaky_relu(x, 0.2))),
            ("relu", Box::new(|g, x| g.relu(x))),
            ("sigmoid", Box::new(|g, x| g.sigmoid(x))),
            ("abs", Box::new(|g, x| g.abs(x))),
            ("square", Box::new(|g, x| g.square(x))),
            ("softmax", Box::new(|g, x| g.softmax(x))),
            ("mean_axis", Box::new(|g, x| g.mean_axis(x, 0))),
            ("permute", Box::new(|g, x| g.permute(x, &[1, 0]))),
            ("slice", Box::new(|g, x| g.slice(x, 1, 1, 2))),
            ("repeat", Box::new(|g, x| g.repeat_interleave(x, 2))),
            ("concat", Box::new(|g, x| {
                let y = g.scale(x, 2.0)?;
                g.concat(&[x, y], 1)
            })),
            ("expand", Box::new(|g, x| {
                let m = g.mean_axis(x, 1)?;
                g.expand(m, 1, 5)
            })),
            ("sqrt", Box::new(|g, x| {
                let s = g.square(x)?;
                g.sqrt(s)
            })),
        ];
        for (name, f) in &ops {
            let err = finite_diff_check(
                |g, x| {
                    let y = f(g, x)?;
                    probe(g, y, seed)
                },
                &x,
                H,
            )
            .unwrap();
            assert!(err < GRAD_TOL, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn linear_softmax_layernorm_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
    let w = g.input(Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
    let b = g.input(Tensor::zeros(&[3]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let u = g.input(Tensor::full(&[2, 4], 3.7));
    let s = g.softmax(u).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = g.input(rand_tensor(&mut rng, &[5, 16]));
    let (gm, bt) = (g.input(Tensor::ones(&[16])), g.input(Tensor::zeros(&[16])));
    let ln = g.layer_norm(r, gm, bt, 1e-5).unwrap();
    for row in g.value(ln).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn linear_layernorm_matmul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let b = rand_tensor(&mut rng, &[5]);
        let (wt, bt) = (w.clone(), b.clone());
        let err = finite_diff_check(
            |g, x| {
                let (wv, bv) = (g.input(wt.clone()), g.input(bt.clone()));
                let y = g.linear(x, wv, Some(bv))?;
                probe(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "linear x seed {seed}: {err}");
        let xt = x.clone();
        let err = finite_diff_check(
            |g, w| {
                let xv = g.input(xt.clone());
                let y = g.linear(xv, w, None)?;
                probe(g, y, seed)
            },
            &w,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "linear w seed {seed}: {err}");

        let gam = rand_tensor(&mut rng, &[4]);
        let err = finite_diff_check(
            |g, x| {
                let (gv, bv) = (g.input(gam.clone()), g.input(Tensor::zeros(&[4])));
                let y = g.layer_norm(x, gv, bv, 1e-5)?;
                probe(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "layer_norm seed {seed}: {err}");

        let other = rand_tensor(&mut rng, &[2, 5, 4]);
        for trans_b in [false, true] {
            let o = if trans_b { other.clone() } else { other.clone().permute(&[0, 2, 1]).unwrap() };
            let ot = o.clone();
            let err = finite_diff_check(
                |g, a| {
                    let bv = g.input(ot.clone());
                    let y = g.matmul(a, bv, trans_b)?;
                    probe(g, y, seed)
                },
                &x,
                H,
            )
            .unwrap();
            assert!(err < GRAD_TOL, "matmul a seed {seed}: {err}");
            let xt = x.clone();
            let err = finite_diff_check(
                |g, bm| {
                    let av = g.input(xt.clone());
                    let y = g.matmul(av, bm, trans_b)?;
                    probe(g, y, seed)
                },
                &o,
                H,
            )
            .unwrap();
            assert!(err < GRAD_TOL, "matmul b seed {seed}: {err}");
        }
    }
}

fn identity_mha(store: &mut ParamStore<f64>, d: usize, heads: usize) -> MultiHeadAttention {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mha = MultiHeadAttention::new(store, &mut rng, "mha", d, heads).unwrap();
    for p in ["q", "k", "v", "out"] {
        *store.tensor_mut(&format!("mha.{p}.weight")).unwrap() =
            Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    }
    mha
}

#[test]
fn mha_single_key_returns_value() {
    let mut store = ParamStore::new();
    let mha = identity_mha(&mut store, 4, 2);
    let mut ctx = Ctx::new(&store, false);
    let q = ctx.graph.input(Tensor::from_f64(&[1, 2, 4], &[0.3, -1.0, 2.0, 0.1, 5.0, 4.0, 3.0, 2.0]).unwrap());
    let kv = ctx.graph.input(Tensor::from_f64(&[1, 1, 4], &[0.5, -0.5, 1.5, 2.5]).unwrap());
    let y = mha.forward(&mut ctx, q, kv).unwrap();
    let out = ctx.graph.value(y);
    for row in out.data().chunks(4) {
        assert_eq!(row, &[0.5, -0.5, 1.5, 2.5]);
    }
}

#[test]
fn mha_equidistant_keys_average_values() {
    let mut store = ParamStore::new();
    let mha = identity_mha(&mut store, 2, 1);
    let mut ctx = Ctx::new(&store, false);
    // query (1, 0) scores equal for keys (0, 1) and (0, -1)
    let q = ctx.graph.input(Tensor::from_f64(&[1, 1, 2], &[1.0, 0.0]).unwrap());
    let kv = ctx.graph.input(Tensor::from_f64(&[1, 2, 2], &[0.0, 1.0, 0.0, -1.0]).unwrap());
    let y = mha.forward(&mut ctx, q, kv).unwrap();
    let out = ctx.graph.value(y).data();
    assert!(out[0].abs() < 1e-15 && out[1].abs() < 1e-15);
}

/// Direct per-head attention with explicit loops.
fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let (lq, d) = (q.shape()[0], q.shape()[1]);
    let lk = k.shape()[0];
    let dh = d / heads;
    let mut out = vec![0.0; lq * d];
    for h in 0..heads {
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| (0..dh).map(|t| q.get(&[i, h * dh + t]) * k.get(&[j, h * dh + t])).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                out[i * d + h * dh + t] = (0..lk).map(|j| e[j] / z * v.get(&[j, h * dh + t])).sum();
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_oracle_and_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let q = rand_tensor(&mut rng, &[3, 8]);
        let k = rand_tensor(&mut rng, &[5, 8]);
        let v = rand_tensor(&mut rng, &[5, 8]);
        let mut g = Graph::new();
        let qv = g.input(q.clone().reshape(&[1, 3, 8]).unwrap());
        let kv = g.input(k.clone().reshape(&[1, 5, 8]).unwrap());
        let vv = g.input(v.clone().reshape(&[1, 5, 8]).unwrap());
        let o = attention(&mut g, qv, kv, vv, 2).unwrap();
        for (a, b) in g.value(o).data().iter().zip(naive_attention(&q, &k, &v, 2)) {
            assert!((a - b).abs() < 1e-12);
        }
        let (kt, vt) = (k.clone(), v.clone());
        let q3 = q.clone().reshape(&[1, 3, 8]).unwrap();
        let err = finite_diff_check(
            |g, q| {
                let kv = g.input(kt.clone().reshape(&[1, 5, 8])?);
                let vv = g.input(vt.clone().reshape(&[1, 5, 8])?);
                let o = attention(g, q, kv, vv, 2)?;
                probe(g, o, seed)
            },
            &q3,
            H,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn mha_parameter_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", 8, 2).unwrap();
        let q = rand_tensor(&mut rng, &[2, 3, 8]);
        let kv = rand_tensor(&mut rng, &[2, 5, 8]);
        let err = finite_diff_check_params(
            &store,
            |ctx| {
                let qv = ctx.graph.input(q.clone());
                let kvv = ctx.graph.input(kv.clone());
                let y = mha.forward(ctx, qv, kvv)?;
                probe(&mut ctx.graph, y, seed)
            },
            H,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn indivisible_heads_rejected() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(MultiHeadAttention::new(&mut store, &mut rng, "m", 10, 4).is_err());
}

#[test]
fn gradcheck_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let err = finite_diff_check(
        |g, x| {
            let s = g.square(x)?;
            g.sum(s)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_two_layer_conv_net() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let mut store = ParamStore::new();
        let c1 = Conv2d::new(&mut store, &mut rng, "c1", 2, 4, (3, 3), 1, (1, 1)).unwrap();
        let bn = BatchNorm2d::new(&mut store, "bn", 4).unwrap();
        let c2 = Conv2d::new(&mut store, &mut rng, "c2", 4, 2, (3, 3), 2, (1, 1)).unwrap();
        let head = Linear::new(&mut store, &mut rng, "head", 3, 1, true).unwrap();
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
        let err = finite_diff_check_params(
            &store,
            |ctx| {
                let xv = ctx.graph.input(x.clone());
                let h = c1.forward(ctx, xv)?;
                let h = bn.forward(ctx, h)?;
                let h = ctx.graph.sigmoid(h)?;
                let h = c2.forward(ctx, h)?;
                let h = ctx.graph.slice(h, 3, 0, 3)?;
                let h = head.forward(ctx, h)?;
                let h = ctx.graph.square(h)?;
                ctx.graph.mean(h)
            },
            H,
            10,
            &mut rng,
        )
        .unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: {err}");
    }
}

struct WrongSquare;

impl CustomOp<f64> for WrongSquare {
    fn name(&self) -> &'static str {
        "wrong_square"
    }
    fn backward(&self, inputs: &[&Tensor<f64>], _out: &Tensor<f64>, grad: &Tensor<f64>) -> Vec<Option<Tensor<f64>>> {
        // should be 2x·g
        vec![Some(grad.zip_map(inputs[0], |g, x| 3.0 * x * g).unwrap())]
    }
}

#[test]
fn gradcheck_flags_wrong_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_nonzero(&mut rng, &[6]);
    let err = finite_diff_check(
        |g, x| {
            let val = g.value(x).map(|v| v * v);
            let y = g.custom(&[x], val, Box::new(WrongSquare))?;
            g.sum(y)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err > 1e-1, "negative control not detected: {err}");
}

#[test]
fn finite_check_mode_catches_nan() {
    let mut g = Graph::<f64>::new().with_finite_checks(true);
    let x = g.input(Tensor::from_f64(&[1], &[-1.0]).unwrap());
    assert!(g.sqrt(x).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[3, 4], vals).unwrap());
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
            let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let mut g = Graph::new();
            let (xv, wv) = (g.input(x), g.input(w));
            let y = g.conv2d(xv, wv, None, 1, (1, 1)).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
