//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn finite_item(t: &Tensor, what: &str) -> Result<f64> {
    let v = t.item()?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite(format!("{what} evaluated to {v}")));
    }
    Ok(v)
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let errs = finite_difference_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Like [`finite_difference_check`] for a function of several tensors; returns the
/// max relative error per input.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let all: Vec<Vec<usize>> = xs.iter().map(|x| (0..x.numel()).collect()).collect();
    check_coordinates(f, xs, eps, &all)
}

/// Like [`finite_difference_check_many`] but probes at most `max_probes`
/// coordinates per input, chosen uniformly without replacement.
pub fn finite_difference_check_sampled<F>(f: F, xs: &[Tensor], eps: f64, max_probes: usize, rng: &mut Rng) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let picks: Vec<Vec<usize>> = xs
        .iter()
        .map(|x| {
            let mut idx: Vec<usize> = (0..x.numel()).collect();
            let k = max_probes.min(idx.len());
            for i in 0..k {
                let j = i + rng.below(idx.len() - i);
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx.sort_unstable();
            idx
        })
        .collect();
    check_coordinates(f, xs, eps, &picks)
}

fn check_coordinates<F>(f: F, xs: &[Tensor], eps: f64, coords: &[Vec<usize>]) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let leaves: Vec<Tensor> = xs
        .iter()
        .map(|x| Tensor::param(x.data().to_vec(), x.shape()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    finite_item(&loss, "loss")?;
    if loss.requires_grad() {
        loss.backward()?;
    }

    let mut consts: Vec<Tensor> = xs.iter().map(Tensor::detach).collect();
    let mut out = Vec::with_capacity(xs.len());
    for (idx, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let base = xs[idx].data().to_vec();
        let mut worst = 0.0f64;
        for &i in &coords[idx] {
            let mut probe = base.clone();
            probe[i] = base[i] + eps;
            consts[idx] = Tensor::new(probe.clone(), leaf.shape())?;
            let plus = finite_item(&f(&consts)?, "perturbed loss")?;
            probe[i] = base[i] - eps;
            consts[idx] = Tensor::new(probe, leaf.shape())?;
            let minus = finite_item(&f(&consts)?, "perturbed loss")?;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(err);
        }
        consts[idx] = xs[idx].detach();
        out.push(worst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_check_agrees_with_full_check() {
        let x = Tensor::new((0..12).map(|i| i as f64 * 0.3 - 1.0).collect(), &[3, 4]).unwrap();
        let f = |xs: &[Tensor]| Ok(xs[0].sigmoid().square().sum_all());
        let full = finite_difference_check_many(f, std::slice::from_ref(&x), 1e-6).unwrap();
        let sampled = finite_difference_check_sampled(f, std::slice::from_ref(&x), 1e-6, 5, &mut Rng::new(1)).unwrap();
        assert!(full[0] < 1e-8 && sampled[0] <= full[0]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // clamp at a kink: the one-sided analytic gradient disagrees with the centered difference.
        let x = Tensor::new(vec![0.0, 2.0], &[2]).unwrap();
        let err = finite_difference_check(|x| Ok(x.clamp_min(0.0).sum_all()), &x, 1e-4).unwrap();
        assert!(err > 0.4);
    }
}
