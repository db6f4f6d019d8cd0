mod common;

use std::f64::consts::FRAC_PI_2;

use common::{named, random};
use rfn_core::error::Result;
use rfn_core::numcore::{grad_check, GradCheckConfig, Graph, PoolMode, Real, ResumeMode, Tensor, Var};
use rfn_core::rfn::{
    attention_weights, global_pool, param_count, resume, rfn_forward, scale_stack, GateVars, RfnBlock, RfnConfig,
    RfnParams,
};
use rfn_core::rng::Rng;
use rfn_core::rotation::rotate_map;

fn cfg(n: usize, r: usize) -> RfnConfig {
    RfnConfig {
        n,
        r,
        ..RfnConfig::default()
    }
}

/// Rotates every channel of an `[S, S, C]` map by a quarter turn.
fn rot90<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (side, c) = (s[0], s[2]);
    let mut out = Tensor::zeros(s);
    for ch in 0..c {
        let plane = Tensor::from_fn(&[side, side], |p| x.data()[p * c + ch]);
        let r = rotate_map(&plane, FRAC_PI_2).unwrap();
        for p in 0..side * side {
            out.data_mut()[p * c + ch] = r.data()[p];
        }
    }
    out
}

fn params(config: &RfnConfig, channels: usize, std: f64, seed: u64) -> RfnParams<f32> {
    RfnParams::truncated_normal(config, channels, std, &mut Rng::new(seed)).unwrap()
}

fn params64(config: &RfnConfig, channels: usize, std: f64, seed: u64) -> RfnParams<f64> {
    let p = params(config, channels, std, seed);
    RfnParams {
        w1: p.w1.cast(),
        w2: p.w2.map(|w| w.cast()),
    }
}

#[test]
fn pooling_examples() {
    let m = Tensor::full(&[3, 3, 4], -2.5f32);
    for mode in [PoolMode::GlobalMax, PoolMode::GlobalAvg] {
        assert_eq!(global_pool(&m, mode).unwrap().data(), &[-2.5; 4]);
    }
    let mut peak = Tensor::<f32>::zeros(&[4, 4, 1]);
    peak.set(&[2, 1, 0], 9.0);
    assert_eq!(global_pool(&peak, PoolMode::GlobalMax).unwrap().item(), 9.0);
}

#[test]
fn average_pool_matches_sum_divide_oracle() {
    let mut rng = Rng::new(1);
    let m = random::<f32>(&[5, 5, 6], -1.0, 1.0, &mut rng);
    let got = global_pool(&m, PoolMode::GlobalAvg).unwrap();
    for ch in 0..6 {
        let total: f64 = (0..25).map(|p| m.data()[p * 6 + ch] as f64).sum();
        assert!((got.data()[ch] as f64 - total / 25.0).abs() < 1e-6);
    }
}

#[test]
fn zero_gate_gives_half() {
    let p = RfnParams::<f32>::zeros(&cfg(4, 8), 8).unwrap();
    let mut rng = Rng::new(2);
    let g = random::<f32>(&[32], -5.0, 5.0, &mut rng);
    assert_eq!(attention_weights(&g, &p).unwrap().data(), &[0.5; 4]);
}

#[test]
fn gate_length_is_angle_count() {
    let config = cfg(4, 8);
    let p = params(&config, 8, 0.3, 3);
    let mut rng = Rng::new(4);
    for _ in 0..5 {
        let g = random::<f32>(&[32], -3.0, 3.0, &mut rng);
        assert_eq!(attention_weights(&g, &p).unwrap().len(), 4);
    }
}

#[test]
fn two_angle_gate_by_hand() {
    // G = [2, 1]; W1 = [[1, -1], [0.5, 2]] → G·W1 = [2.5, 0] after relu (−2 + 2 = 0).
    // W2 = [[0.4, -0.8], [7, 7]] → [1.0, -2.0] → sigmoid.
    let config = cfg(2, 1);
    let p = RfnParams::from_tensors(
        &config,
        1,
        Tensor::new(&[2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
        Some(Tensor::new(&[2, 2], vec![0.4, -0.8, 7.0, 7.0]).unwrap()),
    )
    .unwrap();
    let w = attention_weights(&Tensor::new(&[2], vec![2.0f64, 1.0]).unwrap(), &p).unwrap();
    assert!((w.data()[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    assert!((w.data()[1] - 1.0 / (1.0 + 2.0f64.exp())).abs() < 1e-15);
}

#[test]
fn scale_stack_examples() {
    let mut rng = Rng::new(5);
    let stack = random::<f64>(&[2, 3, 3, 2], -1.0, 1.0, &mut rng);
    assert_eq!(scale_stack(&Tensor::full(&[2], 1.0), &stack).unwrap(), stack);
    assert!(scale_stack(&Tensor::zeros(&[2]), &stack).unwrap().data().iter().all(|&v| v == 0.0));
    let w = Tensor::new(&[2], vec![0.25, 0.75]).unwrap();
    let got = scale_stack(&w, &stack).unwrap();
    let slab = stack.len() / 2;
    for (i, (&g, &s)) in got.data().iter().zip(stack.data()).enumerate() {
        assert_eq!(g, [0.25, 0.75][i / slab] * s);
    }
    assert!(scale_stack(&Tensor::zeros(&[3]), &stack).is_err());
}

#[test]
fn resume_examples() {
    let mut rng = Rng::new(6);
    let slab = random::<f64>(&[3, 3, 2], -1.0, 1.0, &mut rng);
    let stack = Tensor::new(&[4, 3, 3, 2], slab.data().repeat(4)).unwrap();
    let sum = resume(&stack, ResumeMode::Sum).unwrap();
    for (a, b) in sum.data().iter().zip(slab.data()) {
        assert!((a - 4.0 * b).abs() < 1e-15);
    }
    assert_eq!(resume(&stack, ResumeMode::Max).unwrap(), slab);
    assert!(resume(&Tensor::<f64>::zeros(&[0, 3, 3, 2]), ResumeMode::Sum).is_err());
}

#[test]
fn resume_matches_loop_oracle() {
    let mut rng = Rng::new(7);
    let stack = random::<f64>(&[4, 3, 3, 5], -1.0, 1.0, &mut rng);
    let slab = 45;
    let sum = resume(&stack, ResumeMode::Sum).unwrap();
    let max = resume(&stack, ResumeMode::Max).unwrap();
    for p in 0..slab {
        let vals: Vec<f64> = (0..4).map(|k| stack.data()[k * slab + p]).collect();
        let s = vals[0] + vals[1] + vals[2] + vals[3];
        assert!((sum.data()[p] - s).abs() < 1e-15);
        assert_eq!(max.data()[p], vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
}

#[test]
fn shapes_preserved_over_the_ablation_grid() {
    let channels = 16;
    let mut rng = Rng::new(8);
    let x = random::<f32>(&[8, 8, channels], -1.0, 1.0, &mut rng);
    for n in [2, 4, 6, 8] {
        for r in [0, 4, 8, 16, 32] {
            for pooling in [PoolMode::GlobalMax, PoolMode::GlobalAvg] {
                for resume_mode in [ResumeMode::Sum, ResumeMode::Max] {
                    let config = RfnConfig {
                        n,
                        r,
                        pooling,
                        resume: resume_mode,
                        ..RfnConfig::default()
                    };
                    let p = params(&config, channels, 0.1, (n * 100 + r) as u64);
                    let out = rfn_forward(&x, &p, &config).unwrap();
                    assert_eq!(out.ri.shape(), x.shape());
                    assert_eq!(out.rs.shape(), x.shape());
                    assert_eq!(out.weights.len(), n);
                    assert!(out.weights.data().iter().all(|&w| w > 0.0 && w < 1.0));
                }
            }
        }
    }
}

#[test]
fn uniform_gate_makes_ri_quarter_turn_invariant() {
    let mut rng = Rng::new(9);
    for resume_mode in [ResumeMode::Sum, ResumeMode::Max] {
        let config = RfnConfig {
            uniform_weights: true,
            resume: resume_mode,
            ..cfg(4, 8)
        };
        let x = random::<f32>(&[8, 8, 4], -1.0, 1.0, &mut rng);
        let p = params(&config, 4, 0.1, 10);
        let a = rfn_forward(&x, &p, &config).unwrap();
        let b = rfn_forward(&rot90(&x), &p, &config).unwrap();
        assert!(a.ri.max_abs_diff(&b.ri) <= 1e-5, "{resume_mode:?}");

        let x64 = x.cast::<f64>();
        let p64 = params64(&config, 4, 0.1, 10);
        let a = rfn_forward(&x64, &p64, &config).unwrap();
        let b = rfn_forward(&rot90(&x64), &p64, &config).unwrap();
        assert!(a.ri.max_abs_diff(&b.ri) <= 1e-12, "{resume_mode:?}");
    }
}

#[test]
fn rs_is_quarter_turn_invariant_for_any_gate() {
    let config = cfg(4, 4);
    let mut rng = Rng::new(11);
    let x = random::<f32>(&[6, 6, 2], -1.0, 1.0, &mut rng);
    let p = params(&config, 2, 1.0, 12);
    let a = rfn_forward(&x, &p, &config).unwrap();
    let b = rfn_forward(&rot90(&x), &p, &config).unwrap();
    assert!(a.rs.max_abs_diff(&b.rs) <= 1e-5);
    let x64 = x.cast::<f64>();
    let p64 = params64(&config, 2, 1.0, 12);
    let a = rfn_forward(&x64, &p64, &config).unwrap();
    let b = rfn_forward(&rot90(&x64), &p64, &config).unwrap();
    assert!(a.rs.max_abs_diff(&b.rs) <= 1e-12);
}

#[test]
fn single_angle_degenerates_to_scaled_input() {
    let config = cfg(1, 1);
    let mut rng = Rng::new(13);
    let x = random::<f32>(&[5, 5, 3], -1.0, 1.0, &mut rng);
    let p = params(&config, 3, 0.5, 14);
    let out = rfn_forward(&x, &p, &config).unwrap();
    assert_eq!(out.rs, x);
    let w = out.weights.item();
    assert!(out.ri.data().iter().zip(x.data()).all(|(&ri, &xv)| ri == w * xv));
}

#[test]
fn weights_stay_inside_unit_interval_under_extreme_inputs() {
    let config = cfg(4, 2);
    let mut rng = Rng::new(15);
    let p = params(&config, 2, 80.0, 16);
    for scale in [1.0, 1e3, 1e6] {
        let x = random::<f32>(&[4, 4, 2], -scale, scale, &mut rng);
        let out = rfn_forward(&x, &p, &config).unwrap();
        assert!(out.weights.data().iter().all(|&w| w > 0.0 && w < 1.0), "{:?}", out.weights);
    }
}

#[test]
fn param_count_examples() {
    assert_eq!(param_count(&cfg(4, 8), 8).unwrap(), 32 * 4 + 4 * 4);
    assert_eq!(param_count(&cfg(4, 8), 8).unwrap(), 144);
    assert_eq!(param_count(&cfg(4, 0), 8).unwrap(), 128);
    assert!(param_count(&cfg(3, 7), 8).is_err());
    for r in [0, 4, 8, 16] {
        let counts: Vec<usize> = [2, 4, 6, 8].iter().map(|&n| param_count(&cfg(n, r), 16).unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "r={r}: {counts:?}");
    }
}

#[test]
fn instantiated_params_match_count() {
    for (n, r, c) in [(4, 8, 8), (4, 0, 8), (2, 4, 16), (8, 32, 16), (6, 3, 1)] {
        let config = cfg(n, r);
        assert_eq!(params(&config, c, 0.01, 17).count(), param_count(&config, c).unwrap());
        assert_eq!(RfnBlock::new(config.clone(), c, 4).unwrap().param_count(), param_count(&config, c).unwrap());
    }
}

#[test]
fn full_block_passes_finite_differences() {
    for (n, r, pooling, resume_mode) in [
        (4, 4, PoolMode::GlobalMax, ResumeMode::Sum),
        (4, 0, PoolMode::GlobalAvg, ResumeMode::Max),
        (8, 8, PoolMode::GlobalAvg, ResumeMode::Sum),
    ] {
        let config = RfnConfig {
            n,
            r,
            pooling,
            resume: resume_mode,
            ..RfnConfig::default()
        };
        let (side, c) = (4, 2);
        let block = RfnBlock::new(config.clone(), c, side).unwrap();
        let p = params64(&config, c, 0.5, 18 + n as u64);
        let mut rng = Rng::new(19);
        let mut inputs = vec![("x", random::<f64>(&[2, side, side, c], -1.0, 1.0, &mut rng)), ("w1", p.w1)];
        if let Some(w2) = p.w2 {
            inputs.push(("w2", w2));
        }
        let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let gate = GateVars {
                w1: v[1],
                w2: v.get(2).copied(),
            };
            let nodes = block.forward_graph(g, v[0], &gate)?;
            let len = g.value(nodes.ri).len();
            let ri = g.reshape(nodes.ri, &[1, len])?;
            let rs = g.reshape(nodes.rs, &[1, len])?;
            let w = g.constant(Tensor::from_fn(&[len, 1], |i| (i as f64 * 0.37).cos()));
            let a = g.linear(ri, w)?;
            let b = g.linear(rs, w)?;
            let b = g.scale(b, 0.3)?;
            let s = g.add(a, b)?;
            g.sum(s)
        };
        let report = grad_check(&f, &named(inputs), &GradCheckConfig::with_tolerance(1e-4)).unwrap();
        assert!(report.passed(), "n={n} r={r}\n{report}");
    }
}
