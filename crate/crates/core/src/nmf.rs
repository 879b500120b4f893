//! Nonnegative matrix factorization `V ≈ W H` by multiplicative updates.
//!
//! The detached solver works on plain [`Tensor`]s. [`factorize_on_tape`]
//! wires the result into an autodiff [`Tape`] either as a constant
//! (`GradMode::None`) or with the last update recorded so gradients reach `V`
//! through exactly one step (`GradMode::OneStep`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NmfError {
    #[error("matrix to factorize has a negative entry {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("invalid NMF configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NmfError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Reconstruction is a constant for differentiation.
    #[default]
    None,
    /// The final update and the product `W H` are recorded on the tape.
    OneStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmfConfig {
    pub rank: usize,
    pub steps: usize,
    pub delta: f64,
    pub seed: u64,
    pub grad_mode: GradMode,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            steps: 6,
            delta: 1e-6,
            seed: 0,
            grad_mode: GradMode::None,
        }
    }
}

impl NmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(NmfError::Config("rank must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(NmfError::Config("steps must be >= 1".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(NmfError::Config(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Basis `w` (M×L) and coefficients `h` (L×N), both entrywise nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair<T> {
    pub w: Tensor<T>,
    pub h: Tensor<T>,
}

impl<T: Scalar> FactorPair<T> {
    pub fn rank(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn reconstruct(&self) -> Tensor<T> {
        self.w.matmul(&self.h).expect("factor shapes agree")
    }

    pub fn is_nonnegative(&self) -> bool {
        self.w.data().iter().chain(self.h.data()).all(|&v| v >= T::zero())
    }
}

/// Seeded uniform initialization on `(0.01, 1.0]`.
pub fn nmf_init<T: Scalar>(m: usize, n: usize, cfg: &NmfConfig) -> FactorPair<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |_| T::of(1.0 - 0.99 * rng.random::<f64>());
    let w = Tensor::from_fn(&[m, cfg.rank], &mut draw);
    let h = Tensor::from_fn(&[cfg.rank, n], &mut draw);
    FactorPair { w, h }
}

fn check_nonnegative<T: Scalar>(v: &Tensor<T>) -> Result<()> {
    let (_, n) = dims(v)?;
    if let Some((i, &x)) = v.data().iter().enumerate().find(|(_, &x)| x < T::zero()) {
        return Err(NmfError::NegativeEntry {
            row: i / n,
            col: i % n,
            value: x.as_f64(),
        });
    }
    Ok(())
}

fn dims<T: Scalar>(v: &Tensor<T>) -> Result<(usize, usize)> {
    match v.shape() {
        &[m, n] => Ok((m, n)),
        s => Err(TensorError::InvalidShape {
            op: "nmf",
            msg: format!("expected a matrix, got shape {:?}", s),
        }
        .into()),
    }
}

fn check_factors<T: Scalar>(v: &Tensor<T>, fp: &FactorPair<T>) -> Result<()> {
    let (m, n) = dims(v)?;
    let l = fp.w.shape().get(1).copied().unwrap_or(0);
    if fp.w.shape() != [m, l] || fp.h.shape() != [l, n] {
        return Err(TensorError::ShapeMismatch {
            op: "nmf",
            expected: vec![m, l, n],
            got: [fp.w.shape(), fp.h.shape()].concat(),
        }
        .into());
    }
    Ok(())
}

/// `a ∘ num ⊘ (den + delta)`, elementwise.
fn mu_apply<T: Scalar>(base: &Tensor<T>, num: &Tensor<T>, den: &Tensor<T>, delta: T) -> Tensor<T> {
    let data = base
        .data()
        .iter()
        .zip(num.data())
        .zip(den.data())
        .map(|((&b, &n), &d)| b * n / (d + delta))
        .collect();
    Tensor::new(base.shape().to_vec(), data).expect("same shape")
}

fn mu_step_unchecked<T: Scalar>(v: &Tensor<T>, fp: &FactorPair<T>, delta: T) -> Result<FactorPair<T>> {
    let wt = fp.w.t()?;
    let h = mu_apply(&fp.h, &wt.matmul(v)?, &wt.matmul(&fp.w)?.matmul(&fp.h)?, delta);
    let ht = h.t()?;
    let w = mu_apply(&fp.w, &v.matmul(&ht)?, &fp.w.matmul(&h.matmul(&ht)?)?, delta);
    Ok(FactorPair { w, h })
}

/// One multiplicative update, coefficients first:
/// `H' = H ∘ WᵀV ⊘ (WᵀWH + δ)`, then `W' = W ∘ VH'ᵀ ⊘ (WH'H'ᵀ + δ)`.
pub fn mu_step<T: Scalar>(v: &Tensor<T>, fp: &FactorPair<T>, delta: T) -> Result<FactorPair<T>> {
    check_nonnegative(v)?;
    check_factors(v, fp)?;
    mu_step_unchecked(v, fp, delta)
}

/// `‖V − WH‖²_F`.
pub fn reconstruction_error<T: Scalar>(v: &Tensor<T>, fp: &FactorPair<T>) -> Result<T> {
    check_factors(v, fp)?;
    let r = fp.reconstruct();
    Ok(v.data().iter().zip(r.data()).map(|(&a, &b)| (a - b) * (a - b)).sum())
}

fn run_steps<T: Scalar>(v: &Tensor<T>, cfg: &NmfConfig, steps: usize) -> Result<FactorPair<T>> {
    cfg.validate()?;
    check_nonnegative(v)?;
    let (m, n) = dims(v)?;
    let delta = T::of(cfg.delta);
    let mut fp = nmf_init(m, n, cfg);
    for _ in 0..steps {
        fp = mu_step_unchecked(v, &fp, delta)?;
    }
    Ok(fp)
}

/// Seeded init followed by `cfg.steps` updates; returns the factors and `V̂ = WH`.
pub fn factorize<T: Scalar>(v: &Tensor<T>, cfg: &NmfConfig) -> Result<(FactorPair<T>, Tensor<T>)> {
    let fp = run_steps(v, cfg, cfg.steps)?;
    let recon = fp.reconstruct();
    Ok((fp, recon))
}

/// Records a single update of `fp` against the tape variable `v` and returns
/// the reconstruction `W'H'`. `fp` enters as a constant.
pub fn mu_step_on_tape<T: Scalar>(tape: &mut Tape<T>, v: Var, fp: &FactorPair<T>, delta: T) -> Result<Var> {
    check_nonnegative(tape.value(v))?;
    check_factors(tape.value(v), fp)?;
    let wt = tape.constant(fp.w.t()?)?;
    let w = tape.constant(fp.w.clone())?;
    let h = tape.constant(fp.h.clone())?;
    let den_h = tape.constant(fp.w.t()?.matmul(&fp.w)?.matmul(&fp.h)?.map(|x| x + delta))?;
    let wtv = tape.matmul(wt, v)?;
    let num_h = tape.mul(h, wtv)?;
    let h1 = tape.div(num_h, den_h)?;
    let h1t = tape.transpose(h1)?;
    let vht = tape.matmul(v, h1t)?;
    let hht = tape.matmul(h1, h1t)?;
    let whht = tape.matmul(w, hht)?;
    let den_w = tape.add_scalar(whht, delta)?;
    let num_w = tape.mul(w, vht)?;
    let w1 = tape.div(num_w, den_w)?;
    Ok(tape.matmul(w1, h1)?)
}

/// Factorization of the matrix held by `v`, returned as a tape variable
/// holding `V̂`. Under `GradMode::None` it is a constant; under
/// `GradMode::OneStep` the first `steps - 1` updates run detached and the
/// last one is recorded.
pub fn factorize_on_tape<T: Scalar>(tape: &mut Tape<T>, v: Var, cfg: &NmfConfig) -> Result<Var> {
    match cfg.grad_mode {
        GradMode::None => {
            let (_, recon) = factorize(tape.value(v), cfg)?;
            Ok(tape.constant(recon)?)
        }
        GradMode::OneStep => {
            let fp = run_steps(tape.value(v), cfg, cfg.steps - 1)?;
            mu_step_on_tape(tape, v, &fp, T::of(cfg.delta))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank1() -> Tensor<f64> {
        // w = [1, 2]^T, h = [3, 4]
        Tensor::new(vec![2, 2], vec![3.0, 4.0, 6.0, 8.0]).unwrap()
    }

    fn random_matrix(m: usize, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[m, n], |_| rng.random::<f64>())
    }

    #[test]
    fn init_is_deterministic_and_positive() {
        let cfg = NmfConfig { rank: 3, seed: 42, ..Default::default() };
        let a = nmf_init::<f32>(5, 7, &cfg);
        let b = nmf_init::<f32>(5, 7, &cfg);
        assert_eq!(a, b);
        assert!(a.w.data().iter().chain(a.h.data()).all(|&v| v > 0.0 && v <= 1.0));
        let c = nmf_init::<f32>(5, 7, &NmfConfig { seed: 43, ..cfg });
        assert_ne!(a, c);
    }

    #[test]
    fn exact_rank_one_converges() {
        let v = rank1();
        let cfg = NmfConfig { steps: 50, ..Default::default() };
        let (fp, _) = factorize(&v, &cfg).unwrap();
        assert!(reconstruction_error(&v, &fp).unwrap() < 1e-8);
    }

    #[test]
    fn identity_reaches_best_rank_one_error() {
        let v = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let cfg = NmfConfig { steps: 500, ..Default::default() };
        let (fp, _) = factorize(&v, &cfg).unwrap();
        let e = reconstruction_error(&v, &fp).unwrap();
        assert!((e - 1.0).abs() < 1e-3, "{e}");
    }

    #[test]
    fn zero_matrix_reconstructs_to_zero() {
        let v = Tensor::<f64>::zeros(&[3, 4]);
        let (fp, recon) = factorize(&v, &NmfConfig::default()).unwrap();
        assert!(reconstruction_error(&v, &fp).unwrap() < 1e-6);
        assert!(recon.data().iter().all(|&x| x.abs() < 1e-3));
    }

    #[test]
    fn negative_input_is_rejected() {
        let v = Tensor::new(vec![1, 2], vec![1.0f32, -0.5]).unwrap();
        match factorize(&v, &NmfConfig::default()).unwrap_err() {
            NmfError::NegativeEntry { row: 0, col: 1, .. } => {}
            e => panic!("unexpected {e:?}"),
        }
        let fp = nmf_init(1, 2, &NmfConfig::default());
        assert!(mu_step(&v, &fp, 1e-6).is_err());
    }

    #[test]
    fn bad_config_is_rejected() {
        let v = rank1();
        assert!(factorize(&v, &NmfConfig { rank: 0, ..Default::default() }).is_err());
        assert!(factorize(&v, &NmfConfig { steps: 0, ..Default::default() }).is_err());
        assert!(factorize(&v, &NmfConfig { delta: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn more_steps_do_not_hurt() {
        let v = random_matrix(8, 12, 3);
        let one = factorize(&v, &NmfConfig { steps: 1, ..Default::default() }).unwrap().0;
        let six = factorize(&v, &NmfConfig { steps: 6, ..Default::default() }).unwrap().0;
        assert!(reconstruction_error(&v, &six).unwrap() <= reconstruction_error(&v, &one).unwrap());
    }

    #[test]
    fn reconstruction_error_against_triple_loop() {
        let v = random_matrix(6, 9, 4);
        let fp = nmf_init::<f64>(6, 9, &NmfConfig { rank: 2, seed: 9, ..Default::default() });
        let mut naive = 0.0f64;
        for i in 0..6 {
            for j in 0..9 {
                let mut s = 0.0;
                for l in 0..2 {
                    s += fp.w.data()[i * 2 + l] * fp.h.data()[l * 9 + j];
                }
                naive += (v.data()[i * 9 + j] - s).powi(2);
            }
        }
        let got = reconstruction_error(&v, &fp).unwrap();
        assert!((got - naive).abs() <= 1e-6 * naive);
        let zeros = FactorPair {
            w: Tensor::zeros(&[6, 2]),
            h: Tensor::zeros(&[2, 9]),
        };
        assert!((reconstruction_error(&v, &zeros).unwrap() - v.sq_norm()).abs() < 1e-12);
        let bad = FactorPair {
            w: Tensor::zeros(&[5, 2]),
            h: Tensor::zeros(&[2, 9]),
        };
        assert!(reconstruction_error(&v, &bad).is_err());
    }

    #[test]
    fn detached_mode_gives_zero_gradient() {
        let v0 = random_matrix(4, 5, 5);
        let mut tape = Tape::new();
        let v = tape.param(v0).unwrap();
        let r = factorize_on_tape(&mut tape, v, &NmfConfig::default()).unwrap();
        assert!(!tape.requires_grad(r));
        // attach the loss to v through a zero-weighted path so backward runs
        let z = tape.mul_scalar(v, 0.0).unwrap();
        let both = tape.add(r, z).unwrap();
        let s = tape.sum(both).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 0.0));
    }
}
