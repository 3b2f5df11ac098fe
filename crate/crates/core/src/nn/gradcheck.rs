//! Central finite-difference verification of hand-written backward passes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::Parameterized;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; tensors at or below this
    /// size are checked exhaustively.
    pub max_coords_per_param: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, max_coords_per_param: 64, floor: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (parameter, max relative error within it)
    pub per_param: Vec<(String, f64)>,
    /// (parameter, flat index, analytic, numeric) of the worst coordinate
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic gradients against `(f(θ+ε) − f(θ−ε)) / 2ε` on every
/// trainable parameter and returns the largest
/// `|analytic − numeric| / max(|numeric|, floor)`.
///
/// `loss_and_grad` must zero nothing itself; gradients are zeroed before it
/// runs and read back afterwards. `loss` evaluates the same scalar without
/// touching gradients.
pub fn grad_check<M, G, L>(
    model: &mut M,
    mut loss_and_grad: G,
    mut loss: L,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    M: Parameterized + ?Sized,
    G: FnMut(&mut M) -> f64,
    L: FnMut(&mut M) -> f64,
{
    model.visit_trainable_mut("", &mut |_, p| p.zero_grad());
    loss_and_grad(model);
    let mut analytic = Vec::new();
    model.visit_trainable_mut("", &mut |name, p| analytic.push((name.to_string(), p.grad.clone())));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for (k, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.data().len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst_here: f64 = 0.0;
        for idx in coords {
            let f_plus = perturbed(model, k, idx, opts.eps, &mut loss);
            let f_minus = perturbed(model, k, idx, -opts.eps, &mut loss);
            let numeric = (f_plus - f_minus) / (2.0 * opts.eps);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / numeric.abs().max(opts.floor);
            report.coords_checked += 1;
            worst_here = worst_here.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
        report.per_param.push((name.clone(), worst_here));
    }
    report
}

fn perturbed<M, L>(model: &mut M, target: usize, idx: usize, delta: f64, loss: &mut L) -> f64
where
    M: Parameterized + ?Sized,
    L: FnMut(&mut M) -> f64,
{
    let mut original = 0.0;
    nudge(model, target, idx, |v| {
        original = *v;
        *v += delta;
    });
    let f = loss(model);
    nudge(model, target, idx, |v| *v = original);
    f
}

fn nudge<M: Parameterized + ?Sized>(model: &mut M, target: usize, idx: usize, mut op: impl FnMut(&mut f64)) {
    let mut k = 0;
    model.visit_trainable_mut("", &mut |_, p| {
        if k == target {
            op(&mut p.value.data_mut()[idx]);
        }
        k += 1;
    });
}
