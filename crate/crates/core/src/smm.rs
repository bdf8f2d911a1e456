//! Student-T mixture output head and the composite training loss.

use std::f64::consts::PI;

use numkit::{Rng, Tensor};
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};

use crate::backbone::Parameters;
use crate::error::{ensure, Error, Result};

/// Floor for squared scales.
pub const PARAM_EPS: f64 = f64::EPSILON;
/// Floor for the degrees-of-freedom excess over 2: one ulp at 2, so `2 + floor > 2`.
pub const NU_EPS: f64 = 2.0 * f64::EPSILON;

/// Mixture parameters at a single point.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub tau: Vec<f64>,
    pub nu: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn student_t_log_density(x: f64, mu: f64, tau: f64, nu: f64) -> f64 {
    let z = x - mu;
    statrs::function::gamma::ln_gamma((nu + 1.0) / 2.0)
        - statrs::function::gamma::ln_gamma(nu / 2.0)
        - 0.5 * (nu * PI * tau).ln()
        - (nu + 1.0) / 2.0 * (z * z / (nu * tau)).ln_1p()
}

impl MixtureParams {
    /// Builds parameters from raw head pre-activations, one value per component.
    pub fn from_preactivations(nu: &[f64], mu: &[f64], tau: &[f64], logits: &[f64]) -> Self {
        let lse = log_sum_exp(logits.iter().copied());
        MixtureParams {
            pi: logits.iter().map(|l| (l - lse).exp()).collect(),
            mu: mu.to_vec(),
            tau: tau.iter().map(|t| softplus(*t).max(PARAM_EPS)).collect(),
            nu: nu.iter().map(|n| 2.0 + softplus(*n).max(NU_EPS)).collect(),
        }
    }

    pub fn num_components(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        ensure!(k >= 1, Input, "mixture needs at least one component");
        ensure!(
            self.mu.len() == k && self.tau.len() == k && self.nu.len() == k,
            Input,
            "mixture parameter lengths differ"
        );
        let total: f64 = self.pi.iter().sum();
        ensure!(
            (total - 1.0).abs() <= 1e-9 && self.pi.iter().all(|p| *p >= 0.0),
            Input,
            "mixture weights must form a simplex (sum {total})"
        );
        ensure!(self.tau.iter().all(|t| *t > 0.0), Input, "squared scales must be positive");
        ensure!(self.nu.iter().all(|n| *n > 2.0), Input, "degrees of freedom must exceed 2");
        ensure!(self.mu.iter().all(|m| m.is_finite()), Input, "locations must be finite");
        Ok(())
    }

    pub fn log_prob(&self, x: f64) -> Result<f64> {
        self.validate()?;
        let terms = (0..self.pi.len())
            .map(move |k| self.pi[k].ln() + student_t_log_density(x, self.mu[k], self.tau[k], self.nu[k]));
        Ok(log_sum_exp(terms))
    }

    pub fn mean(&self) -> f64 {
        self.pi.iter().zip(&self.mu).map(|(p, m)| p * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let second: f64 = (0..self.pi.len())
            .map(|k| self.pi[k] * (self.tau[k] * self.nu[k] / (self.nu[k] - 2.0) + self.mu[k] * self.mu[k]))
            .sum();
        second - mean * mean
    }

    /// Draws one component index from `pi`.
    fn pick(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (k, p) in self.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.pi.len() - 1
    }

    pub fn sample_one(&self, rng: &mut Rng) -> Result<f64> {
        let k = self.pick(rng);
        let t = StudentT::new(self.nu[k])
            .map_err(|e| Error::Input(format!("degrees of freedom {}: {e}", self.nu[k])))?
            .sample(rng);
        Ok(self.mu[k] + self.tau[k].sqrt() * t)
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Vec<f64>> {
        ensure!(n >= 1, Input, "sample count must be >= 1");
        self.validate()?;
        (0..n).map(|_| self.sample_one(rng)).collect()
    }
}

/// Batched mixture parameters, each `[..., K]`, tracked for gradients.
#[derive(Debug, Clone)]
pub struct MixtureTensors {
    pub log_pi: Tensor,
    pub mu: Tensor,
    pub tau: Tensor,
    pub nu: Tensor,
}

/// Weights of the four parameter heads, each `[D_h, K]` plus a `[K]` bias.
pub struct HeadParams<'a> {
    pub nu: (&'a Tensor, &'a Tensor),
    pub mu: (&'a Tensor, &'a Tensor),
    pub tau: (&'a Tensor, &'a Tensor),
    pub pi: (&'a Tensor, &'a Tensor),
}

impl<'a> HeadParams<'a> {
    pub fn from_parameters(params: &'a Parameters) -> Result<Self> {
        let pair = |h: &str| -> Result<(&'a Tensor, &'a Tensor)> {
            Ok((params.get(&format!("head.{h}.weight"))?, params.get(&format!("head.{h}.bias"))?))
        };
        Ok(HeadParams {
            nu: pair("nu")?,
            mu: pair("mu")?,
            tau: pair("tau")?,
            pi: pair("pi")?,
        })
    }
}

/// Maps features `[..., D_h]` to mixture parameters `[..., K]`.
pub fn compute_params(h: &Tensor, head: &HeadParams<'_>) -> Result<MixtureTensors> {
    let lin = |(w, b): (&Tensor, &Tensor)| -> Result<Tensor> { Ok(h.matmul(w)?.add(b)?) };
    Ok(MixtureTensors {
        nu: lin(head.nu)?.softplus().clamp_min(NU_EPS).add_scalar(2.0),
        mu: lin(head.mu)?,
        tau: lin(head.tau)?.softplus().clamp_min(PARAM_EPS),
        log_pi: lin(head.pi)?.log_softmax_last()?,
    })
}

/// Repeats `x: [...]` along a new last axis of length `k`.
fn expand_last(x: &Tensor, k: usize) -> Result<Tensor> {
    let mut shape = x.shape().to_vec();
    shape.push(1);
    Ok(x.reshape(&shape)?.matmul(&Tensor::full(&[1, k], 1.0))?)
}

impl MixtureTensors {
    pub fn num_components(&self) -> usize {
        *self.mu.shape().last().unwrap_or(&0)
    }

    /// Number of points (all leading axes flattened).
    pub fn len(&self) -> usize {
        self.mu.numel() / self.num_components().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Log-density of `x: [...]` under the mixture at each point.
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.num_components();
        let z = expand_last(x, k)?.sub(&self.mu)?;
        let nu_tau = self.nu.mul(&self.tau)?;
        let half_nu1 = self.nu.add_scalar(1.0).mul_scalar(0.5);
        let log_norm = half_nu1
            .lgamma()?
            .sub(&self.nu.mul_scalar(0.5).lgamma()?)?
            .sub(&nu_tau.mul_scalar(PI).log()?.mul_scalar(0.5))?;
        let kernel = z.square().div(&nu_tau)?.add_scalar(1.0).log()?.mul(&half_nu1)?;
        Ok(self.log_pi.add(&log_norm.sub(&kernel)?)?.logsumexp_last()?)
    }

    pub fn mean(&self) -> Result<Tensor> {
        Ok(self.log_pi.exp()?.mul(&self.mu)?.sum_last()?)
    }

    /// Parameters at flattened point `i`, detached.
    pub fn point(&self, i: usize) -> MixtureParams {
        let k = self.num_components();
        let slice = |t: &Tensor| t.data()[i * k..(i + 1) * k].to_vec();
        MixtureParams {
            pi: slice(&self.log_pi).into_iter().map(f64::exp).collect(),
            mu: slice(&self.mu),
            tau: slice(&self.tau),
            nu: slice(&self.nu),
        }
    }
}

/// Robust-loss shape parameter; `f64::NEG_INFINITY` selects the Welsch case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_nll: f64,
    #[serde(with = "alpha_serde")]
    pub alpha: f64,
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_nll: 0.5755,
            alpha: 0.0,
            delta: 0.1010,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.lambda_nll),
            Config,
            "lambda_nll must lie in [0, 1], got {}",
            self.lambda_nll
        );
        check_robust(self.alpha, self.delta)
    }
}

/// Accepts a number or the string "-inf".
mod alpha_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s.trim() == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => s
                .trim()
                .parse()
                .map_err(|_| serde::de::Error::custom(format!("invalid alpha {s:?}"))),
        }
    }
}

fn check_robust(alpha: f64, delta: f64) -> Result<()> {
    ensure!(!alpha.is_nan() && alpha <= 2.0, Config, "alpha must be <= 2, got {alpha}");
    ensure!(delta > 0.0 && delta.is_finite(), Config, "delta must be positive, got {delta}");
    Ok(())
}

pub fn robust_loss(x: f64, x_hat: f64, alpha: f64, delta: f64) -> Result<f64> {
    check_robust(alpha, delta)?;
    let r2 = ((x - x_hat) / delta).powi(2);
    Ok(if alpha == 2.0 {
        0.5 * r2
    } else if alpha == 0.0 {
        (0.5 * r2).ln_1p()
    } else if alpha == f64::NEG_INFINITY {
        -(-0.5 * r2).exp_m1()
    } else {
        let a2 = (alpha - 2.0).abs();
        a2 / alpha * ((r2 / a2 + 1.0).powf(alpha / 2.0) - 1.0)
    })
}

/// Elementwise robust loss on tensors of equal shape.
pub fn robust_loss_tensor(x: &Tensor, x_hat: &Tensor, alpha: f64, delta: f64) -> Result<Tensor> {
    check_robust(alpha, delta)?;
    let r2 = x.sub(x_hat)?.mul_scalar(1.0 / delta).square();
    Ok(if alpha == 2.0 {
        r2.mul_scalar(0.5)
    } else if alpha == 0.0 {
        r2.mul_scalar(0.5).add_scalar(1.0).log()?
    } else if alpha == f64::NEG_INFINITY {
        r2.mul_scalar(-0.5).exp()?.neg().add_scalar(1.0)
    } else {
        let a2 = (alpha - 2.0).abs();
        r2.mul_scalar(1.0 / a2)
            .add_scalar(1.0)
            .powf(alpha / 2.0)?
            .add_scalar(-1.0)
            .mul_scalar(a2 / alpha)
    })
}

/// Mean over kept points of `λ·NLL + (1−λ)·robust(x, mixture mean)`.
///
/// `targets` has the leading shape of the mixture tensors; `keep` flags the
/// points that count.
pub fn composite_loss(mix: &MixtureTensors, targets: &Tensor, keep: &[bool], cfg: &LossConfig) -> Result<Tensor> {
    Ok(composite_loss_parts(mix, targets, keep, cfg)?.0)
}

/// The composite loss together with the plain mean NLL over kept points.
pub fn composite_loss_parts(
    mix: &MixtureTensors,
    targets: &Tensor,
    keep: &[bool],
    cfg: &LossConfig,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    ensure!(
        keep.len() == targets.numel() && targets.numel() == mix.len(),
        Input,
        "loss inputs disagree: {} targets, {} flags, {} mixture points",
        targets.numel(),
        keep.len(),
        mix.len()
    );
    let count = keep.iter().filter(|k| **k).count();
    ensure!(count > 0, Input, "every timestep is masked");
    let zeros = Tensor::zeros(targets.shape());
    let masked_mean = |t: Tensor| -> Result<Tensor> {
        Ok(t.where_mask(keep, &zeros)?.sum_all().mul_scalar(1.0 / count as f64))
    };
    let nll = masked_mean(mix.log_prob(targets)?.neg())?;
    let lambda = cfg.lambda_nll;
    let loss = if lambda == 1.0 {
        nll.clone()
    } else {
        let robust = masked_mean(robust_loss_tensor(targets, &mix.mean()?, cfg.alpha, cfg.delta)?)?;
        if lambda == 0.0 {
            robust
        } else {
            nll.mul_scalar(lambda).add(&robust.mul_scalar(1.0 - lambda))?
        }
    };
    Ok((loss, nll))
}

#[cfg(test)]
mod tests {
    use super::*;
    use numkit::finite_difference_check_many;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn single(mu: f64, tau: f64, nu: f64) -> MixtureParams {
        MixtureParams {
            pi: vec![1.0],
            mu: vec![mu],
            tau: vec![tau],
            nu: vec![nu],
        }
    }

    fn random_params(rng: &mut Rng, k: usize) -> MixtureParams {
        let pre = |rng: &mut Rng| (0..k).map(|_| rng.normal()).collect::<Vec<_>>();
        let (n, m, t, l) = (pre(rng), pre(rng), pre(rng), pre(rng));
        MixtureParams::from_preactivations(&n, &m, &t, &l)
    }

    /// Adaptive Simpson quadrature.
    fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
            let m = 0.5 * (a + b);
            let fm = f(m);
            (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
        }
        #[allow(clippy::too_many_arguments)]
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, whole: f64, m: f64, fm: f64, tol: f64, depth: u32) -> f64 {
            let (lm, flm, left) = simpson(f, a, fa, m, fm);
            let (rm, frm, right) = simpson(f, m, fm, b, fb);
            let delta = left + right - whole;
            if depth == 0 || delta.abs() <= 15.0 * tol {
                return left + right + delta / 15.0;
            }
            rec(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1) + rec(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
        }
        // Fixed panels first so no narrow peak falls between the initial nodes.
        let panels = 400;
        let h = (b - a) / panels as f64;
        (0..panels)
            .map(|i| {
                let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
                let (fa, fb) = (f(lo), f(hi));
                let (m, fm, whole) = simpson(f, lo, fa, hi, fb);
                rec(f, lo, fa, hi, fb, whole, m, fm, tol / panels as f64, 40)
            })
            .sum()
    }

    #[test]
    fn zero_head_gives_reference_values() {
        let p = MixtureParams::from_preactivations(&[0.0; 3], &[0.0; 3], &[0.0; 3], &[0.0; 3]);
        for k in 0..3 {
            assert!((p.nu[k] - 2.6931).abs() < 1e-4);
            assert!((p.tau[k] - 0.6931).abs() < 1e-4);
            assert!((p.pi[k] - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(p.mu[k], 0.0);
        }
        let q = MixtureParams::from_preactivations(&[-800.0], &[0.0], &[-800.0], &[0.0]);
        assert_eq!(q.tau[0], f64::EPSILON);
        assert!(q.nu[0] > 2.0);
    }

    #[test]
    fn tensor_head_matches_scalar_head() {
        let mut rng = Rng::new(1);
        let w: Vec<Tensor> = (0..4)
            .map(|_| Tensor::new((0..6).map(|_| rng.normal()).collect(), &[3, 2]).unwrap())
            .collect();
        let b: Vec<Tensor> = (0..4)
            .map(|_| Tensor::new((0..2).map(|_| rng.normal()).collect(), &[2]).unwrap())
            .collect();
        let head = HeadParams {
            nu: (&w[0], &b[0]),
            mu: (&w[1], &b[1]),
            tau: (&w[2], &b[2]),
            pi: (&w[3], &b[3]),
        };
        let h = Tensor::new((0..12).map(|_| rng.normal()).collect(), &[4, 3]).unwrap();
        let mix = compute_params(&h, &head).unwrap();
        let x = Tensor::new(vec![0.3, -1.0, 2.0, 0.0], &[4]).unwrap();
        let lp = mix.log_prob(&x).unwrap();
        for i in 0..4 {
            let pre = |j: usize| {
                let row = &h.data()[i * 3..i * 3 + 3];
                (0..2)
                    .map(|k| (0..3).map(|d| row[d] * w[j].data()[d * 2 + k]).sum::<f64>() + b[j].data()[k])
                    .collect::<Vec<_>>()
            };
            let p = MixtureParams::from_preactivations(&pre(0), &pre(1), &pre(2), &pre(3));
            let q = mix.point(i);
            for k in 0..2 {
                assert!((p.pi[k] - q.pi[k]).abs() < 1e-12 && (p.tau[k] - q.tau[k]).abs() < 1e-12);
                assert!((p.nu[k] - q.nu[k]).abs() < 1e-12 && (p.mu[k] - q.mu[k]).abs() < 1e-12);
            }
            assert!((p.log_prob(x.data()[i]).unwrap() - lp.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn logit_shift_invariance() {
        let a = MixtureParams::from_preactivations(&[0.0; 3], &[0.0; 3], &[0.0; 3], &[0.1, -2.0, 1.5]);
        let b = MixtureParams::from_preactivations(&[0.0; 3], &[0.0; 3], &[0.0; 3], &[7.1, 5.0, 8.5]);
        for k in 0..3 {
            assert!((a.pi[k] - b.pi[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_reference_value_and_symmetry() {
        let p = single(0.0, 1.0, 3.0);
        let expect = (1.0 / (0.886227 * (3.0 * PI).sqrt())).ln();
        assert!((p.log_prob(0.0).unwrap() - expect).abs() < 1e-6);
        assert!((p.log_prob(0.0).unwrap() + 1.000889).abs() < 1e-6);
        let q = single(1.5, 0.7, 4.2);
        for a in [0.1, 1.0, 7.5, 300.0] {
            assert_eq!(q.log_prob(1.5 + a).unwrap(), q.log_prob(1.5 - a).unwrap());
        }
        assert!(single(0.0, 0.0, 3.0).log_prob(0.0).is_err());
        assert!(single(0.0, 1.0, 2.0).log_prob(0.0).is_err());
    }

    #[test]
    fn log_prob_stays_finite_far_out() {
        let p = single(0.0, f64::EPSILON, 2.0 + NU_EPS);
        assert!(p.log_prob(1e8).unwrap().is_finite());
        let mut rng = Rng::new(2);
        let q = random_params(&mut rng, 3);
        assert!(q.log_prob(-1e8).unwrap().is_finite());
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let k = 1 + rng.below(4);
            let mut p = random_params(&mut rng, k);
            // Keep the mass inside the integration window.
            p.mu.iter_mut().for_each(|m| *m *= 2.0);
            p.nu.iter_mut().for_each(|n| *n += 1.0);
            let f = |x: f64| p.log_prob(x).unwrap().exp();
            let total = integrate(&f, -50.0, 50.0, 1e-8);
            assert!((total - 1.0).abs() <= 1e-3, "{total}");
        }
    }

    #[test]
    fn moments() {
        let p = MixtureParams {
            pi: vec![0.5, 0.5],
            mu: vec![-1.0, 3.0],
            tau: vec![1.0, 1.0],
            nu: vec![5.0, 5.0],
        };
        assert_eq!(p.mean(), 1.0);
        assert!((single(0.0, 1.0, 4.0).variance() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_mean() {
        let mut rng = Rng::new(4);
        let p = MixtureParams {
            pi: vec![0.3, 0.7],
            mu: vec![-2.0, 1.0],
            tau: vec![0.5, 2.0],
            nu: vec![6.0, 9.0],
        };
        let xs = p.sample(&mut rng, 1_000_000).unwrap();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - p.mean()).abs() < 4.0 * p.variance().sqrt() / 1000.0);
    }

    #[test]
    fn degenerate_sampling_and_determinism() {
        let p = MixtureParams {
            pi: vec![0.0, 1.0],
            mu: vec![5.0, -3.0],
            tau: vec![1.0, f64::EPSILON],
            nu: vec![3.0, 3.0],
        };
        let xs = p.sample(&mut Rng::new(5), 10_000).unwrap();
        assert!(xs.iter().all(|x| (x + 3.0).abs() < 1e-3));
        let q = random_params(&mut Rng::new(6), 3);
        assert_eq!(q.sample(&mut Rng::new(7), 100).unwrap(), q.sample(&mut Rng::new(7), 100).unwrap());
        assert!(q.sample(&mut Rng::new(7), 0).is_err());
    }

    #[test]
    fn empirical_cdf_matches_analytic() {
        let mut rng = Rng::new(8);
        let p = random_params(&mut rng, 2);
        let mut xs = p.sample(&mut rng, 100_000).unwrap();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let cdf = |x: f64| -> f64 {
            (0..2)
                .map(|k| {
                    let t = StudentsT::new(p.mu[k], p.tau[k].sqrt(), p.nu[k]).unwrap();
                    p.pi[k] * t.cdf(x)
                })
                .sum()
        };
        let mut sup: f64 = 0.0;
        for q in 1..100 {
            let i = q * xs.len() / 100;
            let cdf = cdf(xs[i]);
            sup = sup.max((cdf - i as f64 / n).abs()).max((cdf - (i + 1) as f64 / n).abs());
        }
        assert!(sup < 0.01, "{sup}");
    }

    #[test]
    fn robust_loss_cases() {
        assert_eq!(robust_loss(2.0, 0.0, 2.0, 1.0).unwrap(), 2.0);
        for a in [2.0, 1.0, 0.0, -3.0, f64::NEG_INFINITY] {
            assert_eq!(robust_loss(1.3, 1.3, a, 0.5).unwrap(), 0.0);
        }
        assert!((robust_loss(2f64.sqrt(), 0.0, 0.0, 1.0).unwrap() - 0.69315).abs() < 1e-5);
        assert!(robust_loss(1.0, 0.0, 2.5, 1.0).is_err());
        assert!(robust_loss(1.0, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn robust_loss_limits() {
        for i in 0..=200 {
            let r = -10.0 + 0.1 * i as f64;
            let quad = robust_loss(r, 0.0, 2.0, 1.0).unwrap();
            // The gap to the quadratic case shrinks roughly linearly in 2 - α.
            let gap = |a: f64| (robust_loss(r, 0.0, a, 1.0).unwrap() - quad).abs();
            if r.abs() >= 0.5 {
                assert!(gap(1.9999) <= gap(1.999) / 5.0, "{r}");
            }
            assert!((robust_loss(r, 0.0, 2.0 - 1e-6, 1.0).unwrap() - quad).abs() < 1e-3);
            let cauchy = robust_loss(r, 0.0, 0.0, 1.0).unwrap();
            assert!((robust_loss(r, 0.0, 1e-6, 1.0).unwrap() - cauchy).abs() < 1e-4);
        }
    }

    #[test]
    fn tensor_robust_loss_matches_scalar() {
        let x = Tensor::new(vec![0.0, 0.5, -2.0, 7.0], &[4]).unwrap();
        let y = Tensor::new(vec![0.1, 0.4, 1.0, -3.0], &[4]).unwrap();
        for a in [2.0, 1.0, 0.0, -2.0, f64::NEG_INFINITY] {
            let t = robust_loss_tensor(&x, &y, a, 0.3).unwrap();
            for i in 0..4 {
                let s = robust_loss(x.data()[i], y.data()[i], a, 0.3).unwrap();
                assert!((t.data()[i] - s).abs() < 1e-12);
            }
        }
    }

    fn toy_mix(rng: &mut Rng, n: usize, k: usize, grad: bool) -> MixtureTensors {
        let mut t = |f: fn(f64) -> f64| {
            let data = (0..n * k).map(|_| f(rng.normal())).collect();
            if grad {
                Tensor::param(data, &[n, k]).unwrap()
            } else {
                Tensor::new(data, &[n, k]).unwrap()
            }
        };
        let log_pi_raw = t(|x| x);
        MixtureTensors {
            mu: t(|x| x),
            tau: t(|x| 0.2 + x.abs()),
            nu: t(|x| 3.0 + x.abs()),
            log_pi: log_pi_raw.log_softmax_last().unwrap(),
        }
    }

    #[test]
    fn composite_loss_endpoints_and_hand_case() {
        let mut rng = Rng::new(9);
        let mix = toy_mix(&mut rng, 3, 2, false);
        let x = Tensor::new(vec![0.2, -0.7, 1.1], &[3]).unwrap();
        let keep = [true; 3];
        let nll: f64 = (0..3).map(|i| -mix.point(i).log_prob(x.data()[i]).unwrap()).sum::<f64>() / 3.0;
        let rob = |a: f64, d: f64| -> f64 {
            (0..3)
                .map(|i| robust_loss(x.data()[i], mix.point(i).mean(), a, d).unwrap())
                .sum::<f64>()
                / 3.0
        };
        let at = |l: f64| {
            let cfg = LossConfig { lambda_nll: l, ..Default::default() };
            composite_loss(&mix, &x, &keep, &cfg).unwrap().item().unwrap()
        };
        assert_eq!(at(1.0), mix.log_prob(&x).unwrap().neg().mean_all().unwrap().item().unwrap());
        assert!((at(1.0) - nll).abs() < 1e-12);
        assert!((at(0.0) - rob(0.0, 0.1010)).abs() < 1e-12);
        assert!((at(0.5755) - (0.5755 * nll + 0.4245 * rob(0.0, 0.1010))).abs() < 1e-9);
        assert!(composite_loss(&mix, &x, &[false; 3], &LossConfig::default()).is_err());
    }

    #[test]
    fn masked_points_are_ignored() {
        let mut rng = Rng::new(10);
        let mix = toy_mix(&mut rng, 3, 2, false);
        let x = Tensor::new(vec![0.2, -0.7, 1.1], &[3]).unwrap();
        let y = Tensor::new(vec![0.2, 99.0, 1.1], &[3]).unwrap();
        let keep = [true, false, true];
        let cfg = LossConfig::default();
        let a = composite_loss(&mix, &x, &keep, &cfg).unwrap().item().unwrap();
        let b = composite_loss(&mix, &y, &keep, &cfg).unwrap().item().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn composite_loss_gradcheck() {
        let mut rng = Rng::new(11);
        let base = toy_mix(&mut rng, 4, 3, false);
        let x = Tensor::new(vec![0.2, -0.7, 1.1, 3.0], &[4]).unwrap();
        let keep = [true, true, false, true];
        for alpha in [0.0, 1.0, 2.0, -1.5, f64::NEG_INFINITY] {
            let cfg = LossConfig { alpha, delta: 0.5, ..Default::default() };
            let inputs = [base.log_pi.clone(), base.mu.clone(), base.tau.clone(), base.nu.clone()];
            let errs = finite_difference_check_many(
                |ts| {
                    let mix = MixtureTensors {
                        log_pi: ts[0].log_softmax_last()?,
                        mu: ts[1].clone(),
                        tau: ts[2].clone(),
                        nu: ts[3].clone(),
                    };
                    Ok(composite_loss(&mix, &x, &keep, &cfg).unwrap())
                },
                &inputs,
                1e-6,
            )
            .unwrap();
            assert!(errs.iter().all(|e| *e < 1e-4), "{alpha}: {errs:?}");
        }
    }

    #[test]
    fn alpha_sentinel_round_trips() {
        let cfg = LossConfig { alpha: f64::NEG_INFINITY, ..Default::default() };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"-inf\""));
        let back: LossConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back.alpha, f64::NEG_INFINITY);
        let parsed: LossConfig = serde_json::from_str(r#"{"alpha": 1.5}"#).unwrap();
        assert_eq!(parsed.alpha, 1.5);
        assert_eq!(parsed.delta, 0.1010);
    }
}
