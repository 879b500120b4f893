mod common;

use common::{fd_check, rand_tensor};
use factorizephys::fsam::{
    fsam_apply, fsam_bypass, fsam_forward, fsam_forward_with_recons, map_from_matrix, map_to_matrix, FsamConfig,
    FsamError, FsamParams, FsamVars, MappingSpec,
};
use factorizephys::nmf::{GradMode, NmfConfig};
use factorizephys::params::{ConvParams, ConvVars};
use factorizephys::tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn all_mappings(k: usize) -> Vec<MappingSpec> {
    let mut v = vec![MappingSpec::TauToM, MappingSpec::KappaToM, MappingSpec::TauKappaToM];
    for p in 1..k {
        if k % p == 0 {
            v.push(MappingSpec::TsmFrameDepth { frame_depth: p });
        }
    }
    v
}

/// Position of `e[c, t, a, b]` in the matrix, written out per variant.
fn oracle_index(m: &MappingSpec, [k, t, a, b]: [usize; 4], [ci, ti, ai, bi]: [usize; 4]) -> (usize, usize) {
    match *m {
        MappingSpec::TauToM => (ti, (ci * a + ai) * b + bi),
        MappingSpec::KappaToM => (ci, (ti * a + ai) * b + bi),
        MappingSpec::TauKappaToM => (ti * k + ci, ai * b + bi),
        MappingSpec::TsmFrameDepth { frame_depth: p } => (ci % p, (((ci / p) * t + ti) * a + ai) * b + bi),
    }
}

#[test]
fn mapping_matches_index_oracle() {
    let shape = [4, 3, 2, 5];
    let e = Tensor::<f64>::from_fn(&shape, |i| i as f64);
    for m in all_mappings(4) {
        let v = map_to_matrix(&e, &m).unwrap();
        let cols = v.shape()[1];
        for ci in 0..4 {
            for ti in 0..3 {
                for ai in 0..2 {
                    for bi in 0..5 {
                        let (r, c) = oracle_index(&m, shape, [ci, ti, ai, bi]);
                        let src = ((ci * 3 + ti) * 2 + ai) * 5 + bi;
                        assert_eq!(v.data()[r * cols + c], src as f64, "{m}");
                    }
                }
            }
        }
    }
}

#[test]
fn illegal_frame_depths_are_rejected() {
    let e = Tensor::<f64>::zeros(&[6, 2, 2, 2]);
    for p in [0, 4, 6, 7] {
        assert!(matches!(
            map_to_matrix(&e, &MappingSpec::TsmFrameDepth { frame_depth: p }),
            Err(FsamError::FrameDepth { .. })
        ));
    }
}

fn embed(n: usize, shape: [usize; 4], seed: u64) -> Tensor<f64> {
    rand_tensor(&[n, shape[0], shape[1], shape[2], shape[3]], seed)
}

fn params(k: usize, cfg: &FsamConfig, seed: u64) -> FsamParams<f64> {
    FsamParams::init(k, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn recons(e: &Tensor<f64>, p: &FsamParams<f64>, cfg: &FsamConfig) -> Vec<Tensor<f64>> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(e.clone()).unwrap();
    let vars = p.register(&mut tape).unwrap();
    let mut out = Vec::new();
    fsam_forward_with_recons(&mut tape, x, &vars, cfg, &mut out).unwrap();
    out
}

/// Largest `|ad − bc| / max(|ad|, |bc|)` over every 2×2 minor.
fn worst_minor(v: &Tensor<f64>) -> f64 {
    let (m, n) = (v.shape()[0], v.shape()[1]);
    let d = v.data();
    let mut worst = 0.0f64;
    for i in 0..m {
        for k in i + 1..m {
            for j in 0..n {
                for l in j + 1..n {
                    let ad = d[i * n + j] * d[k * n + l];
                    let bc = d[i * n + l] * d[k * n + j];
                    let scale = ad.abs().max(bc.abs());
                    if scale > 0.0 {
                        worst = worst.max((ad - bc).abs() / scale);
                    }
                }
            }
        }
    }
    worst
}

#[test]
fn rank_one_reconstructions_have_vanishing_minors() {
    let shape = [6, 10, 3, 3];
    let cfg = FsamConfig::default();
    let e = embed(2, shape, 1);
    let p = params(6, &cfg, 2);
    let rs = recons(&e, &p, &cfg);
    assert_eq!(rs.len(), 2);
    for r in &rs {
        assert_eq!(r.shape(), &[10, 54]);
        assert!(worst_minor(r) < 1e-4);
    }
}

#[test]
fn higher_rank_reconstructions_are_not_rank_one() {
    let shape = [6, 10, 3, 3];
    let cfg = FsamConfig {
        nmf: NmfConfig { rank: 3, ..Default::default() },
        ..Default::default()
    };
    let e = embed(1, shape, 3);
    let rs = recons(&e, &params(6, &cfg, 4), &cfg);
    assert!(worst_minor(&rs[0]) > 1e-3);
}

#[test]
fn output_shape_and_determinism() {
    let shape = [4, 8, 3, 3];
    for m in all_mappings(4) {
        let cfg = FsamConfig { mapping: m, ..Default::default() };
        let e = embed(2, shape, 5);
        let p = params(4, &cfg, 6);
        let a = fsam_apply(&e, &p, &cfg).unwrap();
        let b = fsam_apply(&e, &p, &cfg).unwrap();
        assert_eq!(a.shape(), e.shape());
        assert!(a.is_finite());
        assert_eq!(a, b, "{m}");
    }
}

#[test]
fn samples_are_processed_independently() {
    let shape = [4, 6, 2, 2];
    let cfg = FsamConfig::default();
    let p = params(4, &cfg, 7);
    let both = embed(2, shape, 8);
    let out = fsam_apply(&both, &p, &cfg).unwrap();
    let half = both.len() / 2;
    for s in 0..2 {
        let single = Tensor::new(vec![1, 4, 6, 2, 2], both.data()[s * half..(s + 1) * half].to_vec()).unwrap();
        let alone = fsam_apply(&single, &p, &cfg).unwrap();
        assert_eq!(alone.data(), &out.data()[s * half..(s + 1) * half]);
    }
}

#[test]
fn bypass_is_identity() {
    let e = embed(1, [3, 4, 2, 2], 9);
    assert_eq!(fsam_bypass(&e), e);
}

#[test]
fn zero_post_conv_reduces_to_residual() {
    let shape = [4, 6, 3, 3];
    let cfg = FsamConfig::default();
    let mut p = params(4, &cfg, 10);
    p.post = ConvParams::zeros(&cfg.post_spec(4));
    let e = embed(1, shape, 11);
    assert_eq!(fsam_apply(&e, &p, &cfg).unwrap(), e);
}

fn weighted_graph<'a>(
    cfg: &'a FsamConfig,
    base: &'a FsamParams<f64>,
    e: &'a Tensor<f64>,
    g: &'a Tensor<f64>,
    train_pre: bool,
) -> impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'a {
    move |t, v| {
        let fixed = base.register(t).unwrap();
        let (pre, post) = if train_pre {
            (ConvVars { weight: v[0], bias: Some(v[1]) }, ConvVars { weight: v[2], bias: Some(v[3]) })
        } else {
            (fixed.pre, ConvVars { weight: v[0], bias: Some(v[1]) })
        };
        let x = t.constant(e.clone()).unwrap();
        let y = fsam_forward(t, x, &FsamVars { pre, post }, cfg).unwrap();
        let gw = t.constant(g.clone()).unwrap();
        let p = t.mul(y, gw).unwrap();
        t.sum(p).unwrap()
    }
}

#[test]
fn detached_factorization_passes_gradient_to_post_only() {
    let shape = [3, 6, 2, 2];
    let cfg = FsamConfig::default();
    let base = params(3, &cfg, 12);
    let e = embed(2, shape, 13).map(|x| x + 0.2);
    let g = embed(2, shape, 14);

    let mut tape = Tape::new();
    let x = tape.constant(e.clone()).unwrap();
    let vars = base.register(&mut tape).unwrap();
    let y = fsam_forward(&mut tape, x, &vars, &cfg).unwrap();
    let gw = tape.constant(g.clone()).unwrap();
    let p = tape.mul(y, gw).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    let grad = |v: Var| tape.grad(v).map(|g| g.sq_norm()).unwrap_or(0.0);
    assert!(grad(vars.post.weight) > 0.0);
    assert!(grad(vars.post.bias.unwrap()) > 0.0);
    assert_eq!(grad(vars.pre.weight), 0.0);
    assert_eq!(grad(vars.pre.bias.unwrap()), 0.0);

    let f = weighted_graph(&cfg, &base, &e, &g, false);
    let post = [base.post.weight.clone(), base.post.bias.clone().unwrap()];
    assert!(fd_check(&post, &f, None) < 1e-4);
}

#[test]
fn single_step_one_step_mode_matches_fd_everywhere() {
    let shape = [3, 5, 2, 2];
    let cfg = FsamConfig {
        nmf: NmfConfig { steps: 1, grad_mode: GradMode::OneStep, ..Default::default() },
        ..Default::default()
    };
    let base = params(3, &cfg, 15);
    let e = embed(1, shape, 16).map(|x| x + 0.3);
    let g = embed(1, shape, 17);
    let f = weighted_graph(&cfg, &base, &e, &g, true);
    let all = [
        base.pre.weight.clone(),
        base.pre.bias.clone().unwrap(),
        base.post.weight.clone(),
        base.post.bias.clone().unwrap(),
    ];
    assert!(fd_check(&all, &f, None) < 1e-4);
}

#[test]
fn rank_above_matrix_side_is_rejected() {
    let cfg = FsamConfig {
        nmf: NmfConfig { rank: 5, ..Default::default() },
        ..Default::default()
    };
    let p = params(3, &cfg, 18);
    let e = embed(1, [3, 4, 2, 2], 19);
    assert!(matches!(fsam_apply(&e, &p, &cfg), Err(FsamError::RankTooLarge { rank: 5, m: 4, .. })));
}

fn shapes() -> impl Strategy<Value = [usize; 4]> {
    (1usize..9, 1usize..8, 1usize..5, 1usize..5).prop_map(|(k, t, a, b)| [k, t, a, b])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_mapping_round_trips_bitwise(shape in shapes(), seed in 0u64..10_000) {
        let e = rand_tensor(&shape, seed).map(f64::abs);
        for m in all_mappings(shape[0]) {
            let v = map_to_matrix(&e, &m).unwrap();
            let l = m.layout(shape).unwrap();
            prop_assert_eq!(v.shape(), &[l.m, l.n]);
            prop_assert_eq!(l.m * l.n, e.len());
            let back = map_from_matrix(&v, &m, shape).unwrap();
            prop_assert_eq!(back, e.clone());
        }
    }

    #[test]
    fn fsam_preserves_shape_and_finiteness(shape in shapes(), seed in 0u64..10_000) {
        let cfg = FsamConfig::default();
        let p = params(shape[0], &cfg, seed);
        let e = embed(1, shape, seed + 1);
        let y = fsam_apply(&e, &p, &cfg).unwrap();
        prop_assert_eq!(y.shape(), e.shape());
        prop_assert!(y.is_finite());
    }
}
