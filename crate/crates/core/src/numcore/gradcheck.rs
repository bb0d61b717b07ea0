//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever calls the forward closure, so it is independent
//! of every backward kernel it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::graph::{Graph, Var};
use super::param::ParamStore;
use super::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Small enough that probes rarely straddle a leaky-ReLU kink, large
    /// enough that f64 round-off stays far below the tolerances.
    pub step: f64,
    /// Coordinates probed per tensor (all of them when the tensor is smaller).
    pub max_coords: usize,
    pub seed: u64,
    /// Forward and backward differences disagreeing by more than this share
    /// signal a leaky-ReLU kink inside the probe interval.
    pub kink_ratio: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            max_coords: 24,
            seed: 0,
            kink_ratio: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords: usize,
    /// Coordinates re-probed with a smaller step around a kink.
    pub refined: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the probed coordinates.
    pub rel_error: f64,
    /// `‖a − n‖` over the probed coordinates.
    pub abs_error: f64,
    /// `max(‖a‖, ‖n‖)` over the probed coordinates.
    pub scale: f64,
    /// Round-off budget of the finite differences over the probed coordinates.
    pub noise: f64,
}

impl GradCheckEntry {
    /// The discrepancy is no larger than finite-difference round-off, so the
    /// relative error carries no signal (e.g. shifts cancelled by a following
    /// batch norm, whose gradient is structurally zero).
    pub fn within_noise(&self) -> bool {
        self.abs_error <= self.noise
    }

    /// Both gradients are below the round-off budget, so the relative error
    /// is meaningless.
    pub fn vanishing(&self) -> bool {
        self.scale <= self.noise
    }

    /// Agreement within `tol` relative, or within the round-off budget.
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol || self.within_noise()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Largest relative error over all entries, including those whose
    /// discrepancy is within round-off.
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    /// Entry with the largest relative error among those whose gradient
    /// stands above round-off.
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| !e.vanishing())
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.passes(tol))
    }

    /// One-line summary: tensor count, the worst non-vanishing entry, and
    /// how many entries pass only on the round-off budget.
    pub fn summary(&self) -> String {
        let mut out = format!("{} tensors", self.entries.len());
        if let Some(w) = self.worst() {
            out += &format!(", worst {} at {:.2e}", w.name, w.rel_error);
        }
        let vanishing = self.entries.iter().filter(|e| e.vanishing()).count();
        if vanishing > 0 {
            out += &format!(", {vanishing} vanishing");
        }
        out
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = norm_diff(analytic, numeric);
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn entry(name: String, analytic: &[f64], numeric: &[f64], refined: usize, floor: f64) -> GradCheckEntry {
    GradCheckEntry {
        name,
        coords: analytic.len(),
        refined,
        rel_error: relative_error(analytic, numeric),
        abs_error: norm_diff(analytic, numeric),
        scale: norm(analytic).max(norm(numeric)),
        noise: floor * (analytic.len() as f64).sqrt(),
    }
}

type Forward<'f> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'f;

fn eval_loss(
    forward: &Forward<'_>,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    coeffs: &[f64],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = forward(&mut g, store, &vars)?;
    let loss = g.dot(out, coeffs.to_vec())?;
    Ok(g.value(loss).data()[0])
}

const MIN_STEP: f64 = 1e-9;

/// Central difference of `f` at 0. A single kink within `±h` biases it by
/// exactly half the gap between the one-sided differences, while on smooth
/// stretches that gap is only `h·f''`; a large gap therefore retries with a
/// tenfold smaller step. Returns the derivative and whether it was refined.
fn central_difference(f: &mut dyn FnMut(f64) -> Result<f64>, l0: f64, step: f64, kink_ratio: f64) -> Result<(f64, bool)> {
    let mut h = step;
    loop {
        let up = f(h)?;
        let down = f(-h)?;
        let fwd = (up - l0) / h;
        let bwd = (l0 - down) / h;
        let noise = 100.0 * f64::EPSILON * l0.abs().max(1.0) / h;
        let smooth = (fwd - bwd).abs() <= kink_ratio * fwd.abs().max(bwd.abs()) + noise;
        if smooth || h / 10.0 < MIN_STEP {
            return Ok(((up - down) / (2.0 * h), h < step));
        }
        h /= 10.0;
    }
}

/// Checks gradients of `Σ R ⊙ forward(inputs)` for a fixed random `R` w.r.t.
/// every input and every non-frozen parameter in `store`.
pub fn check_gradients(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    forward: &Forward<'_>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = forward(&mut g, store, &vars)?;
    let out_shape = g.shape(out);
    let coeffs = Tensor::<f64>::randn(out_shape, 1.0, &mut rng).into_data();
    let loss = g.dot(out, coeffs.clone())?;
    // Round-off in a central difference is about ε·|L|/h per coordinate.
    let floor = 100.0 * f64::EPSILON * g.value(loss).data()[0].abs().max(1.0) / opts.step;
    g.backward(loss)?;
    let l0 = eval_loss(forward, store, inputs, &coeffs)?;

    let mut entries = Vec::new();

    for (k, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        let n = t.shape().numel();
        let zeros = vec![0.0; n];
        let analytic = g.grad(*v).unwrap_or(&zeros).to_vec();
        let picks = sample(&mut rng, n, opts.max_coords.min(n)).into_vec();
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        let mut refined = 0;
        for &i in &picks {
            let mut probe = inputs.to_vec();
            let mut f = |d: f64| {
                probe[k].data_mut()[i] = t.data()[i] + d;
                eval_loss(forward, store, &probe, &coeffs)
            };
            let (d, r) = central_difference(&mut f, l0, opts.step, opts.kink_ratio)?;
            refined += r as usize;
            a.push(analytic[i]);
            num.push(d);
        }
        entries.push(entry(format!("input[{k}]"), &a, &num, refined, floor));
    }

    let param_grads: Vec<(super::param::ParamId, Vec<f64>)> = g
        .param_vars()
        .filter_map(|(id, v)| g.grad(v).map(|gr| (id, gr.to_vec())))
        .collect();
    for (id, analytic) in param_grads {
        if store.param(id).frozen {
            continue;
        }
        let n = analytic.len();
        let picks = sample(&mut rng, n, opts.max_coords.min(n)).into_vec();
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        let mut refined = 0;
        for &i in &picks {
            let orig = store.param(id).tensor.data()[i];
            let mut f = |d: f64| {
                store.param_mut(id).tensor.data_mut()[i] = orig + d;
                let l = eval_loss(forward, store, inputs, &coeffs);
                store.param_mut(id).tensor.data_mut()[i] = orig;
                l
            };
            let (d, r) = central_difference(&mut f, l0, opts.step, opts.kink_ratio)?;
            refined += r as usize;
            a.push(analytic[i]);
            num.push(d);
        }
        entries.push(entry(store.param(id).name.clone(), &a, &num, refined, floor));
    }
    Ok(GradCheckReport { entries })
}

/// Random input of the given shape for checks.
pub fn random_input(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}
