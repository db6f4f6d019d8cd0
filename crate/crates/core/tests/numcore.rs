mod common;

use std::sync::Arc;

use common::{assert_close, named, random, random_away_from_zero};
use indexmap::IndexMap;
use proptest::prelude::*;
use rfn_core::error::{Result, RfnError};
use rfn_core::numcore::gradcheck::{analytic_gradient, compare, numeric_gradient};
use rfn_core::numcore::{
    grad_check, GradCheckConfig, Graph, KernelForm, OptState, ParamStore, PlaneMap, PoolMode, ResumeMode, SgdConfig,
    Tensor, Var,
};
use rfn_core::rng::Rng;
use rfn_core::rotation::AngleSet;

/// `Σ_i w_i · v_i` with fixed pseudo-random weights, so every output
/// element influences the scalar differently.
fn project(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let len = g.value(v).len();
    let flat = g.reshape(v, &[1, len])?;
    let w = Tensor::from_fn(&[len, 1], |i| ((i as f64) * 0.7311).sin() + 0.1);
    let w = g.constant(w);
    let out = g.linear(flat, w)?;
    g.sum(out)
}

fn check(inputs: Vec<(&str, Tensor<f64>)>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let report = grad_check(&f, &named(inputs), &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report}");
    report.max_rel_error()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (b, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * oh * ow * cout];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..cin {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at(&[n, iy as usize, ix as usize, ci]) * k.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    (vec![b, oh, ow, cout], out)
}

fn eval_linear(x: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let out = g.linear(xv, wv)?;
    Ok(g.value(out).clone())
}

fn eval_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let out = g.conv2d(xv, kv, stride, pad)?;
    Ok(g.value(out).clone())
}

#[test]
fn linear_identity_and_hand_dot_product() {
    let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(eval_linear(&x, &eye).unwrap().data(), &[1.0, 2.0]);
    let w = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
    assert_eq!(eval_linear(&x, &w).unwrap().data(), &[11.0]);
}

#[test]
fn linear_matches_triple_loop_on_3x5_by_5x2() {
    let mut rng = Rng::new(11);
    let a = random(&[3, 5], -1.0, 1.0, &mut rng);
    let b = random(&[5, 2], -1.0, 1.0, &mut rng);
    assert_close(eval_linear(&a, &b).unwrap().data(), &naive_matmul(&a, &b), 1e-12);
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let err = eval_linear(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 1])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, RfnError::Shape { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
}

#[test]
fn conv_identity_kernel() {
    let mut rng = Rng::new(3);
    let x = random(&[2, 5, 5, 1], -1.0, 1.0, &mut rng);
    let k = Tensor::full(&[1, 1, 1, 1], 1.0);
    assert_eq!(eval_conv(&x, &k, 1, 0).unwrap(), x);
}

#[test]
fn conv_impulse_response_reproduces_kernel() {
    let mut x = Tensor::<f64>::zeros(&[1, 7, 7, 1]);
    x.set(&[0, 3, 3, 0], 1.0);
    let k = Tensor::from_fn(&[3, 3, 1, 1], |i| i as f64 + 1.0);
    let out = eval_conv(&x, &k, 1, 1).unwrap();
    // Cross-correlation: the response around the delta is the kernel flipped.
    for dy in 0..3 {
        for dx in 0..3 {
            assert_eq!(out.at(&[0, 2 + dy, 2 + dx, 0]), k.at(&[2 - dy, 2 - dx, 0, 0]));
        }
    }
    assert_eq!(out.sum(), k.sum());
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let err = eval_conv(&Tensor::zeros(&[1, 4, 4, 2]), &Tensor::zeros(&[3, 3, 3, 1]), 1, 1).unwrap_err();
    assert!(matches!(err, RfnError::Shape { .. }));
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = Rng::new(5);
    let x = random(&[2, 6, 6, 3], -1.0, 1.0, &mut rng);
    let k = random(&[3, 3, 3, 4], -1.0, 1.0, &mut rng);
    let (shape, want) = naive_conv(&x, &k, 2, 1);
    let got = eval_conv(&x, &k, 2, 1).unwrap();
    assert_eq!(got.shape(), &shape[..]);
    assert_close(got.data(), &want, 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn linear_agrees_with_oracle(m in 1usize..6, k in 1usize..8, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = random(&[m, k], -2.0, 2.0, &mut rng);
        let b = random(&[k, n], -2.0, 2.0, &mut rng);
        let got = eval_linear(&a, &b).unwrap();
        prop_assert_eq!(got.shape(), &[m, n][..]);
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_agrees_with_oracle(
        batch in 1usize..3,
        side in 1usize..8,
        cin in 1usize..4,
        cout in 1usize..4,
        half in 0usize..3,
        stride in 1usize..3,
        pad_extra in 0usize..3,
        seed in any::<u64>(),
    ) {
        let kernel = 2 * half + 1;
        let pad = pad_extra.min(kernel / 2);
        prop_assume!(side + 2 * pad >= kernel);
        let mut rng = Rng::new(seed);
        let x = random(&[batch, side, side, cin], -1.0, 1.0, &mut rng);
        let k = random(&[kernel, kernel, cin, cout], -1.0, 1.0, &mut rng);
        let (shape, want) = naive_conv(&x, &k, stride, pad);
        let got = eval_conv(&x, &k, stride, pad).unwrap();
        prop_assert_eq!(got.shape(), &shape[..]);
        for (a, b) in got.data().iter().zip(want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn activation_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[3], vec![-1.0, 2.0, 0.0]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[2], 0.5);
    let mut g32 = Graph::<f32>::new();
    let one = g32.constant(Tensor::scalar(1.0f32));
    let s1 = g32.sigmoid(one).unwrap();
    assert!((g32.value(s1).item() as f64 - 0.731_058_578_630_004_9).abs() < 1e-6);
}

#[test]
fn sigmoid_stays_strictly_inside_unit_interval() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[4], vec![-200.0, -40.0, 40.0, 200.0]).unwrap());
    let s = g.sigmoid(x).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0), "{:?}", g.value(s).data());
}

#[test]
fn grad_linear() {
    let mut rng = Rng::new(21);
    let err = check(
        vec![("x", random(&[3, 5], -1.0, 1.0, &mut rng)), ("w", random(&[5, 2], -1.0, 1.0, &mut rng))],
        |g, v| {
            let y = g.linear(v[0], v[1])?;
            project(g, y)
        },
    );
    assert!(err < 1e-6);
}

#[test]
fn grad_conv2d_strided_and_padded() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let mut rng = Rng::new(30 + stride as u64 * 3 + pad as u64);
        check(
            vec![
                ("x", random(&[1, 5, 5, 2], -1.0, 1.0, &mut rng)),
                ("k", random(&[3, 3, 2, 2], -1.0, 1.0, &mut rng)),
            ],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                project(g, y)
            },
        );
    }
}

#[test]
fn grad_bias_and_activations() {
    let mut rng = Rng::new(41);
    check(
        vec![("x", random_away_from_zero(&[4, 5], &mut rng)), ("b", random(&[5], -0.01, 0.01, &mut rng))],
        |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y)
        },
    );
    check(vec![("x", random_away_from_zero(&[6, 4], &mut rng))], |g, v| {
        let y = g.relu(v[0])?;
        project(g, y)
    });
    check(vec![("x", random(&[6, 4], -3.0, 3.0, &mut rng))], |g, v| {
        let y = g.sigmoid(v[0])?;
        project(g, y)
    });
}

#[test]
fn grad_elementwise_and_reductions() {
    let mut rng = Rng::new(43);
    let a = random(&[2, 3, 2], -1.0, 1.0, &mut rng);
    let b = random(&[2, 3, 2], -1.0, 1.0, &mut rng);
    check(vec![("a", a.clone()), ("b", b.clone())], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y)
    });
    check(vec![("a", a.clone())], |g, v| {
        let y = g.scale(v[0], -1.7)?;
        project(g, y)
    });
    check(vec![("a", a.clone()), ("b", b.clone())], |g, v| {
        let y = g.mean_of(&[v[0], v[1], v[0]])?;
        project(g, y)
    });
    check(vec![("a", a.clone())], |g, v| {
        let r = g.reshape(v[0], &[3, 4])?;
        project(g, r)
    });
    check(vec![("a", a.clone())], |g, v| {
        let s = g.sum(v[0])?;
        g.scale(s, 0.5)
    });
    check(vec![("a", a)], |g, v| g.mean(v[0]));
}

#[test]
fn grad_rotation_both_paths() {
    for n in [4usize, 8] {
        let maps = AngleSet::new(n).unwrap().plane_maps(4);
        let mut rng = Rng::new(50 + n as u64);
        check(vec![("x", random(&[2, 4, 4, 2], -1.0, 1.0, &mut rng))], move |g, v| {
            let y = g.rotate_channels(v[0], maps.clone())?;
            project(g, y)
        });
    }
}

#[test]
fn grad_pooling_and_stack_ops() {
    let mut rng = Rng::new(61);
    for mode in [PoolMode::GlobalMax, PoolMode::GlobalAvg] {
        check(vec![("x", random(&[2, 3, 3, 4], -1.0, 1.0, &mut rng))], move |g, v| {
            let y = g.global_pool(v[0], mode)?;
            project(g, y)
        });
    }
    check(
        vec![("w", random(&[2, 3], 0.1, 0.9, &mut rng)), ("s", random(&[2, 2, 2, 6], -1.0, 1.0, &mut rng))],
        |g, v| {
            let y = g.scale_stack(v[0], v[1])?;
            project(g, y)
        },
    );
    for mode in [ResumeMode::Sum, ResumeMode::Max] {
        check(vec![("s", random(&[2, 2, 2, 8], -1.0, 1.0, &mut rng))], move |g, v| {
            let y = g.resume(v[0], 4, mode)?;
            project(g, y)
        });
    }
}

#[test]
fn grad_losses() {
    let mut rng = Rng::new(71);
    check(vec![("logits", random(&[4, 3], -2.0, 2.0, &mut rng))], |g, v| {
        g.classification_loss(v[0], &[0, 2, 1, 2])
    });
    // Differences stay away from the |x| = 1 kink of smooth L1.
    let target = Tensor::from_fn(&[3, 2], |i| [0.0, 0.2, -0.4, 1.0, 3.0, -2.5][i]);
    let pred = Tensor::from_fn(&[3, 2], |i| [0.3, -0.5, -0.1, 2.5, 0.2, -2.6][i]);
    check(vec![("p", pred)], move |g, v| g.regression_loss(v[0], &target));
    for form in [KernelForm::Distance, KernelForm::Similarity] {
        check(
            vec![("a", random(&[3, 5], -1.0, 1.0, &mut rng)), ("b", random(&[3, 5], -1.0, 1.0, &mut rng))],
            move |g, v| {
                let p = g.invariance_pair(v[0], v[1], 0.8, form)?;
                project(g, p)
            },
        );
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = Rng::new(81);
    let logits = random::<f64>(&[3, 4], -2.0, 2.0, &mut rng);
    let labels = [3usize, 0, 1];
    let mut g = Graph::new();
    let l = g.param(logits.clone());
    let loss = g.classification_loss(l, &labels).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(l).unwrap();
    for r in 0..3 {
        let row: Vec<f64> = (0..4).map(|c| logits.at(&[r, c])).collect();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..4 {
            let onehot = if c == labels[r] { 1.0 } else { 0.0 };
            let want = (row[c].exp() / z - onehot) / 3.0;
            assert!((grad.at(&[r, c]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn scaled_gradient_sentinel_fails_check() {
    let mut rng = Rng::new(91);
    let inputs = named(vec![("x", random(&[2, 4], -1.0, 1.0, &mut rng)), ("w", random(&[4, 3], -1.0, 1.0, &mut rng))]);
    let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let y = g.linear(v[0], v[1])?;
        project(g, y)
    };
    let config = GradCheckConfig::default();
    let (_, analytic) = analytic_gradient(&f, &inputs).unwrap();
    let numeric = numeric_gradient(&f, &inputs, config.epsilon).unwrap();
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    assert!(compare(&names, &analytic, &numeric, &config).passed());
    let doubled: Vec<Tensor<f64>> = analytic.iter().map(|t| t.map(|v| 2.0 * v)).collect();
    let report = compare(&names, &doubled, &numeric, &config);
    assert!(!report.passed(), "{report}");
}

#[test]
fn non_finite_perturbation_names_the_parameter() {
    let inputs = named(vec![("ok", Tensor::full(&[2], 0.5)), ("edge", Tensor::full(&[1], 1.0))]);
    let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let big = g.scale(v[1], 1.7e308)?;
        let s = g.sum(v[0])?;
        let t = g.sum(big)?;
        g.add(s, t)
    };
    let config = GradCheckConfig {
        epsilon: 0.1,
        ..GradCheckConfig::default()
    };
    match grad_check(&f, &inputs, &config) {
        Err(RfnError::GradCheck { param, index }) => {
            assert_eq!(param, "edge");
            assert_eq!(index, 0);
        }
        other => panic!("expected a gradient-check diagnostic, got {other:?}"),
    }
}

#[test]
fn overflow_is_an_error() {
    let x = Tensor::new(&[1, 1], vec![1e200]).unwrap();
    let err = eval_linear(&x, &x).unwrap_err();
    assert!(matches!(err, RfnError::NonFinite { .. }), "{err}");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = Rng::new(101);
    let x = random::<f32>(&[2, 6, 6, 3], -1.0, 1.0, &mut rng);
    let k = random::<f32>(&[3, 3, 3, 5], -1.0, 1.0, &mut rng);
    let run = || {
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, 1, 1).unwrap();
        let y = g.relu(y).unwrap();
        let p = g.global_pool(y, PoolMode::GlobalAvg).unwrap();
        g.value(p).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn gradients_accumulate_over_shared_uses_and_skip_disconnected_params() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[2], vec![1.0, -3.0]).unwrap());
    let unused = g.param(Tensor::full(&[2], 4.0));
    let c = g.constant(Tensor::full(&[2], 1.0));
    let twice = g.add(x, x).unwrap();
    let y = g.add(twice, c).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    assert!(g.grad(unused).is_none());
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(y).unwrap().shape(), g.shape(y));
}

fn store(name: &str, values: &[f64]) -> ParamStore<f64> {
    let mut s = IndexMap::new();
    s.insert(name.to_string(), Tensor::new(&[values.len()], values.to_vec()).unwrap());
    s
}

#[test]
fn sgd_zero_gradient_is_fixed_point() {
    let config = SgdConfig {
        learning_rate: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    let mut opt = OptState::<f64>::new(&config);
    let mut params = store("w", &[1.5, -2.0]);
    let before = params.clone();
    opt.step(&mut params, &store("w", &[0.0, 0.0])).unwrap();
    assert_eq!(params, before);
}

#[test]
fn sgd_single_step_by_hand() {
    let config = SgdConfig {
        learning_rate: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    let mut opt = OptState::<f64>::new(&config);
    let mut params = store("w", &[1.0]);
    opt.step(&mut params, &store("w", &[0.5])).unwrap();
    assert!((params["w"].item() - 0.95).abs() < 1e-15);
}

#[test]
fn sgd_momentum_by_hand() {
    let (lr, mu, wd, grad, p0) = (0.1, 0.9, 0.0005, 0.5, 1.0);
    let config = SgdConfig {
        learning_rate: lr,
        momentum: mu,
        weight_decay: wd,
    };
    let mut opt = OptState::<f64>::new(&config);
    let mut params = store("w", &[p0]);
    opt.step(&mut params, &store("w", &[grad])).unwrap();
    let v1 = grad + wd * p0;
    let p1 = p0 - lr * v1;
    assert!((params["w"].item() - p1).abs() < 1e-15);
    opt.step(&mut params, &store("w", &[grad])).unwrap();
    // 1.9·g plus the two decay contributions.
    let v2 = 1.9 * grad + mu * wd * p0 + wd * p1;
    assert!((opt.velocity("w").unwrap().item() - v2).abs() < 1e-15);
    assert!((params["w"].item() - (p1 - lr * v2)).abs() < 1e-15);
}

#[test]
fn sgd_rejects_mismatched_shapes_and_unknown_names() {
    let mut opt = OptState::<f64>::new(&SgdConfig::default());
    let mut params = store("w", &[1.0, 2.0]);
    assert!(opt.step(&mut params, &store("w", &[1.0])).is_err());
    assert!(opt.step(&mut params, &store("v", &[1.0, 1.0])).is_err());
}

#[test]
fn plane_map_side_is_reported() {
    let maps: Arc<[PlaneMap]> = AngleSet::new(3).unwrap().plane_maps(5);
    assert!(maps.iter().all(|m| m.side() == 5));
}
