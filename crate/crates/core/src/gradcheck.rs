//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Coordinates sampled per input tensor (all of them when the tensor is
    /// smaller).
    pub coords_per_input: usize,
    pub seed: u64,
    /// When a coordinate fails at `step`, retry at `step / 100`; a pass
    /// there marks the coordinate as straddling a non-differentiable point
    /// (e.g. a ReLU kink) rather than as a failure.
    pub refine_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            coords_per_input: 24,
            seed: 0,
            refine_kinks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub failures: Vec<GradMismatch>,
    /// Coordinates that only agreed after step refinement.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.failures.extend(other.failures);
        self.kinks += other.kinks;
    }
}

/// `|a - n| <= max(rel_tol * max(|a|, |n|), abs_floor)`.
pub fn grads_agree(analytic: f64, numeric: f64, cfg: &GradCheckConfig) -> bool {
    let tol = (cfg.rel_tol * analytic.abs().max(numeric.abs())).max(cfg.abs_floor);
    (analytic - numeric).abs() <= tol
}

fn eval_scalar<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).item()
}

/// Compares reverse-mode gradients of the scalar produced by `build` with
/// central differences on sampled coordinates of every input.
pub fn check_gradients<F>(inputs: &[Tensor], build: &F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let coords: Vec<usize> = if n <= cfg.coords_per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.coords_per_input).into_vec()
        };
        for c in coords {
            let analytic = grads.get(*var).map_or(0.0, |t| t.data()[c]);
            let mut central = |h: f64| {
                let orig = work[i].data()[c];
                work[i].data_mut()[c] = orig + h;
                let plus = eval_scalar(&work, build);
                work[i].data_mut()[c] = orig - h;
                let minus = eval_scalar(&work, build);
                work[i].data_mut()[c] = orig;
                (plus - minus) / (2.0 * h)
            };
            let mut numeric = central(cfg.step);
            report.checked += 1;
            if !grads_agree(analytic, numeric, cfg) && cfg.refine_kinks {
                let fine = central(cfg.step / 100.0);
                if grads_agree(analytic, fine, cfg) {
                    report.kinks += 1;
                    numeric = fine;
                }
            }
            report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
            if !grads_agree(analytic, numeric, cfg) {
                report.failures.push(GradMismatch {
                    input: i,
                    coord: c,
                    analytic,
                    numeric,
                });
            }
        }
    }
    report
}
