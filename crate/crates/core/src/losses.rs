//! Training objectives.
//!
//! Each loss comes in two forms: a graph builder that returns a scalar
//! [`Var`] for training, and a value-level function over plain tensors that
//! validates its inputs and returns a [`LossValue`]. All expectations are
//! batch means, and probabilities are clamped to `[1e-7, 1 - 1e-7]` before
//! any logarithm.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cross-entropy weight in the forward objective.
    pub alpha1: f64,
    /// Adversarial weight in the forward objective.
    pub alpha2: f64,
    /// Self-distillation weight in the backward objective.
    pub alpha3: f64,
    /// Adversarial weight in the backward objective.
    pub alpha4: f64,
    /// Distillation temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            alpha4: 1.0,
            tau: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub batch_size: usize,
}

fn clamped_ln(g: &mut Graph, p: Var) -> Var {
    let c = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    g.ln(c)
}

fn one_minus(g: &mut Graph, p: Var) -> Var {
    let n = g.scale(p, -1.0);
    g.add_scalar(n, 1.0)
}

/// Mean of `-log softmax(logits)[label]` over a `[B, 2]` batch.
pub fn ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let ls = g.log_softmax(logits);
    let picked = g.gather_cols(ls, labels);
    let m = g.mean_all(picked);
    g.scale(m, -1.0)
}

/// `mean_src log p + mean_tgt log(1 - p)`; the discriminator maximises it.
pub fn adv(g: &mut Graph, p_src: Var, p_tgt: Var) -> Var {
    let ls = clamped_ln(g, p_src);
    let a = g.mean_all(ls);
    let q = one_minus(g, p_tgt);
    let lt = clamped_ln(g, q);
    let b = g.mean_all(lt);
    g.add(a, b)
}

/// Non-saturating extractor objective `-mean_tgt log p - mean_src log(1 - p)`:
/// minimising it pushes target features toward "source" and vice versa.
pub fn adv_confusion(g: &mut Graph, p_src: Var, p_tgt: Var) -> Var {
    let lt = clamped_ln(g, p_tgt);
    let a = g.mean_all(lt);
    let q = one_minus(g, p_src);
    let ls = clamped_ln(g, q);
    let b = g.mean_all(ls);
    let s = g.add(a, b);
    g.scale(s, -1.0)
}

/// `softmax(logits / tau)`.
pub fn distill_prob(g: &mut Graph, logits: Var, tau: f64) -> Var {
    let z = g.scale(logits, 1.0 / tau);
    g.softmax(z)
}

/// `-mean Σ_k P(k) log P′(k)` with teacher `P` and student `P′` both
/// softened at `tau`. With `detach_teacher` the teacher probabilities are
/// constants; otherwise gradient also flows through the teacher logits.
pub fn sd(g: &mut Graph, teacher_logits: Var, student_logits: Var, tau: f64, detach_teacher: bool) -> Var {
    let t = if detach_teacher {
        g.detach(teacher_logits)
    } else {
        teacher_logits
    };
    let p = distill_prob(g, t, tau);
    let zs = g.scale(student_logits, 1.0 / tau);
    let lq = g.log_softmax(zs);
    let prod = g.mul(p, lq);
    let b = g.shape(prod)[0];
    let s = g.sum_all(prod);
    g.scale(s, -1.0 / b as f64)
}

/// Mean prediction entropy of `softmax(logits)`.
pub fn entropy(g: &mut Graph, logits: Var) -> Var {
    let p = g.softmax(logits);
    let lp = g.log_softmax(logits);
    let prod = g.mul(p, lp);
    let b = g.shape(prod)[0];
    let s = g.sum_all(prod);
    g.scale(s, -1.0 / b as f64)
}

pub const MMD_BANDWIDTH_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

/// Flat indices (into an `n × n` matrix of squared distances) of the pair
/// or two pairs whose distance is the median over `i < j`.
fn median_pairs(sq: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| i * n + j))
        .collect();
    idx.sort_by(|&a, &b| sq[a].total_cmp(&sq[b]).then(a.cmp(&b)));
    let m = idx.len();
    if m % 2 == 1 {
        vec![idx[m / 2]]
    } else {
        vec![idx[m / 2 - 1], idx[m / 2]]
    }
}

/// Median of the pairwise distances between the rows of an `n × n`
/// squared-distance matrix.
pub fn median_distance(sq: &[f64], n: usize) -> f64 {
    let picks = median_pairs(sq, n);
    picks.iter().map(|&i| sq[i].max(0.0).sqrt()).sum::<f64>() / picks.len() as f64
}

/// Biased squared MMD between `[n_s, d]` and `[n_t, d]` feature batches
/// under an equal-weight mixture of Gaussian kernels
/// `exp(-|x - y|² / (2 σ²))`, `σ ∈ m × {0.5, 1, 2}` where `m` is the median
/// pairwise distance of the pooled batch. The bandwidth is part of the
/// graph; if every point coincides it falls back to the constant 1.
pub fn mmd(g: &mut Graph, fs: Var, ft: Var) -> Var {
    let (ns, nt) = (g.shape(fs)[0], g.shape(ft)[0]);
    let z = g.concat_rows(&[fs, ft]);
    let d2 = g.pairwise_sq_dist(z);
    let n = ns + nt;
    let picks = median_pairs(g.value(d2).data(), n);
    let med = if median_distance(g.value(d2).data(), n) > 0.0 {
        let p = g.pick(d2, &picks);
        let r = g.powf(p, 0.5);
        g.mean_all(r)
    } else {
        g.constant(Tensor::scalar(1.0))
    };
    // 1 / med², shared by every bandwidth.
    let inv = g.powf(med, -2.0);
    let mut kernels = Vec::new();
    for s in MMD_BANDWIDTH_SCALES {
        let e = g.mul_scalar_var(d2, inv);
        let e = g.scale(e, -1.0 / (2.0 * s * s));
        kernels.push(g.exp(e));
    }
    let mut k = kernels[0];
    for &other in &kernels[1..] {
        k = g.add(k, other);
    }
    let k = g.scale(k, 1.0 / MMD_BANDWIDTH_SCALES.len() as f64);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = match (i < ns, j < ns) {
                (true, true) => 1.0 / (ns * ns) as f64,
                (false, false) => 1.0 / (nt * nt) as f64,
                _ => -1.0 / (ns * nt) as f64,
            };
        }
    }
    g.dot_const(k, w)
}

/// Identity forward, gradient scaled by `-lambda` backward.
pub fn gradient_reversal(g: &mut Graph, f: Var, lambda: f64) -> Var {
    g.grad_reverse(f, lambda)
}

fn check_logits(t: &Tensor, what: &str) -> Result<usize> {
    if t.shape().len() != 2 || t.shape()[1] != 2 {
        return Err(Error::Shape(format!("{what}: expected [B, 2], got {:?}", t.shape())));
    }
    if t.shape()[0] == 0 {
        return Err(Error::Size(format!("{what}: empty batch")));
    }
    Ok(t.shape()[0])
}

fn check_probs(t: &Tensor, what: &str) -> Result<usize> {
    if t.is_empty() {
        return Err(Error::Size(format!("{what}: empty batch")));
    }
    if let Some(p) = t.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("{what}: probability {p} outside [0, 1]")));
    }
    Ok(t.len())
}

fn eval(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g);
    g.value(v).item()
}

pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    let b = check_logits(logits, "loss_ce")?;
    if labels.len() != b {
        return Err(Error::Size(format!("loss_ce: {b} logits vs {} labels", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Domain(format!("loss_ce: label {l} outside {{0, 1}}")));
    }
    let value = eval(|g| {
        let x = g.constant(logits.clone());
        ce(g, x, labels)
    });
    Ok(LossValue { value, batch_size: b })
}

pub fn loss_adv(p_src: &Tensor, p_tgt: &Tensor) -> Result<LossValue> {
    let ns = check_probs(p_src, "loss_adv source")?;
    let nt = check_probs(p_tgt, "loss_adv target")?;
    let value = eval(|g| {
        let (a, b) = (g.constant(p_src.clone()), g.constant(p_tgt.clone()));
        adv(g, a, b)
    });
    Ok(LossValue {
        value,
        batch_size: ns + nt,
    })
}

/// Forward-stage objective value `α₁·ce − α₂·adv`: the extractor lowers it
/// by confusing the discriminator.
pub fn loss_fas(ce: LossValue, adv: LossValue, w: &LossWeights) -> LossValue {
    LossValue {
        value: w.alpha1 * ce.value - w.alpha2 * adv.value,
        batch_size: ce.batch_size.max(adv.batch_size),
    }
}

/// Backward-stage objective value `α₃·sd − α₄·adv`.
pub fn loss_bas(sd: LossValue, adv: LossValue, w: &LossWeights) -> LossValue {
    LossValue {
        value: w.alpha3 * sd.value - w.alpha4 * adv.value,
        batch_size: sd.batch_size.max(adv.batch_size),
    }
}

pub fn distill_prob_values(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let p = distill_prob(&mut g, x, tau);
    Ok(g.value(p).clone())
}

pub fn loss_sd(teacher: &Tensor, student: &Tensor, tau: f64) -> Result<LossValue> {
    let bt = check_logits(teacher, "loss_sd teacher")?;
    let bs = check_logits(student, "loss_sd student")?;
    if bt != bs {
        return Err(Error::Size(format!("loss_sd: teacher batch {bt} vs student batch {bs}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    let value = eval(|g| {
        let (t, s) = (g.constant(teacher.clone()), g.constant(student.clone()));
        sd(g, t, s, tau, true)
    });
    Ok(LossValue { value, batch_size: bt })
}

pub fn loss_entropy_min(logits: &Tensor) -> Result<LossValue> {
    let b = check_logits(logits, "loss_entropy_min")?;
    let value = eval(|g| {
        let x = g.constant(logits.clone());
        entropy(g, x)
    });
    Ok(LossValue { value, batch_size: b })
}

pub fn loss_mmd(fs: &Tensor, ft: &Tensor) -> Result<LossValue> {
    for (t, what) in [(fs, "source"), (ft, "target")] {
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("loss_mmd {what}: expected [n, d]")));
        }
        if t.shape()[0] < 2 {
            return Err(Error::Size(format!("loss_mmd {what}: need at least 2 samples")));
        }
    }
    if fs.shape()[1] != ft.shape()[1] {
        return Err(Error::Shape("loss_mmd: feature widths differ".into()));
    }
    let value = eval(|g| {
        let (a, b) = (g.constant(fs.clone()), g.constant(ft.clone()));
        mmd(g, a, b)
    });
    Ok(LossValue {
        value,
        batch_size: fs.shape()[0] + ft.shape()[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn cross_entropy_values() {
        close(loss_ce(&t(&[1, 2], &[0.0, 0.0]), &[1]).unwrap().value, 2f64.ln(), 1e-12);
        close(loss_ce(&t(&[1, 2], &[1.0, 0.0]), &[0]).unwrap().value, 0.313262, 1e-6);
        assert!(loss_ce(&t(&[1, 2], &[60.0, 0.0]), &[0]).unwrap().value < 1e-20);
        assert!(matches!(loss_ce(&t(&[1, 2], &[0.0, 0.0]), &[2]), Err(Error::Domain(_))));
    }

    #[test]
    fn adversarial_values() {
        let half = t(&[2], &[0.5, 0.5]);
        close(loss_adv(&half, &half).unwrap().value, -1.386294, 1e-6);
        let v = loss_adv(&t(&[2], &[0.8, 0.6]), &t(&[2], &[0.3, 0.1])).unwrap().value;
        let oracle = 0.5 * (0.8f64.ln() + 0.6f64.ln()) + 0.5 * (0.7f64.ln() + 0.9f64.ln());
        close(v, oracle, 1e-12);
        close(v, -0.598003, 1e-6);
        let perfect = loss_adv(&t(&[1], &[1.0]), &t(&[1], &[0.0])).unwrap().value;
        assert!(perfect <= 0.0 && perfect > -1e-6);
        assert!(matches!(
            loss_adv(&Tensor::zeros(&[0]), &half),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn combined_objectives() {
        let w = LossWeights::default();
        let ce = LossValue { value: 0.7, batch_size: 2 };
        let adv = LossValue { value: -1.4, batch_size: 2 };
        close(loss_fas(ce, adv, &w).value, 2.1, 1e-12);
        let no_adv = LossWeights { alpha2: 0.0, ..w };
        close(loss_fas(ce, adv, &no_adv).value, 0.7, 0.0);
        let sd = LossValue { value: 0.69, batch_size: 2 };
        let adv = LossValue { value: -1.39, batch_size: 2 };
        close(loss_bas(sd, adv, &w).value, 2.08, 1e-12);
        close(loss_bas(sd, adv, &LossWeights { alpha4: 0.0, ..w }).value, 0.69, 0.0);
        close(loss_bas(sd, adv, &LossWeights { alpha3: 0.0, ..w }).value, 1.39, 0.0);
    }

    #[test]
    fn distillation_probabilities() {
        let p = distill_prob_values(&t(&[1, 2], &[1.0, 0.0]), 0.5).unwrap();
        close(p.data()[0], 0.880797, 1e-6);
        close(p.data()[1], 0.119203, 1e-6);
        let p = distill_prob_values(&t(&[1, 2], &[3.0, 3.0]), 0.7).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = distill_prob_values(&t(&[1, 2], &[1.0, 0.0]), 1e4).unwrap();
        close(p.data()[0], 0.5, 1e-3);
        assert!(matches!(
            distill_prob_values(&t(&[1, 2], &[1.0, 0.0]), 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn self_distillation_values() {
        let v = loss_sd(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.0, 1.0]), 0.5).unwrap();
        let hi = 1.0 / (1.0 + (-2.0f64).exp());
        let oracle = -(hi * (1.0 - hi).ln() + (1.0 - hi) * hi.ln());
        close(v.value, oracle, 1e-12);
        close(oracle, 1.888522, 1e-6);
        let z = t(&[1, 2], &[0.0, 0.0]);
        close(loss_sd(&z, &z, 0.5).unwrap().value, 2f64.ln(), 1e-12);
        assert!(matches!(
            loss_sd(&t(&[1, 2], &[0.0, 0.0]), &t(&[2, 2], &[0.0; 4]), 0.5),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn entropy_values() {
        close(loss_entropy_min(&t(&[1, 2], &[0.0, 0.0])).unwrap().value, 2f64.ln(), 1e-12);
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let oracle = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        close(loss_entropy_min(&t(&[1, 2], &[1.0, 0.0])).unwrap().value, oracle, 1e-12);
        close(oracle, 0.582203, 1e-6);
        assert!(loss_entropy_min(&t(&[1, 2], &[50.0, 0.0])).unwrap().value < 1e-15);
    }

    #[test]
    fn mmd_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![6, 3], (0..18).map(|_| rng.random::<f64>()).collect()).unwrap();
        close(loss_mmd(&x, &x).unwrap().value, 0.0, 1e-9);
        assert!(matches!(
            loss_mmd(&t(&[1, 2], &[0.0, 0.0]), &x),
            Err(Error::Shape(_)) | Err(Error::Size(_))
        ));
    }

    #[test]
    fn permutation_invariance() {
        let logits = t(&[3, 2], &[0.3, -1.0, 2.0, 0.5, -0.2, 0.1]);
        let perm = t(&[3, 2], &[-0.2, 0.1, 0.3, -1.0, 2.0, 0.5]);
        let a = loss_ce(&logits, &[0, 1, 1]).unwrap().value;
        let b = loss_ce(&perm, &[1, 0, 1]).unwrap().value;
        close(a, b, 1e-12);
        let a = loss_entropy_min(&logits).unwrap().value;
        let b = loss_entropy_min(&perm).unwrap().value;
        close(a, b, 1e-12);
        let a = loss_sd(&logits, &perm, 0.5).unwrap().value;
        let perm2 = t(&[3, 2], &[2.0, 0.5, -0.2, 0.1, 0.3, -1.0]);
        let b = loss_sd(&perm, &perm2, 0.5).unwrap().value;
        close(a, b, 1e-12);
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn assert_grads(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let report = check_gradients(&inputs, &build, &GradCheckConfig::default());
        assert!(report.checked >= 20, "only {} coordinates", report.checked);
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = rand_tensor(&mut rng, &[12, 2], -2.0, 2.0);
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        assert_grads(vec![logits.clone()], |g, v| ce(g, v[0], &labels));
        assert_grads(vec![logits.clone()], |g, v| entropy(g, v[0]));
        let other = rand_tensor(&mut rng, &[12, 2], -2.0, 2.0);
        assert_grads(vec![logits.clone(), other.clone()], |g, v| sd(g, v[0], v[1], 0.5, false));
        let fixed = logits.clone();
        assert_grads(vec![other], move |g, v| {
            let t = g.constant(fixed.clone());
            sd(g, t, v[0], 0.5, true)
        });

        let ps = rand_tensor(&mut rng, &[12], 0.05, 0.95);
        let pt = rand_tensor(&mut rng, &[12], 0.05, 0.95);
        assert_grads(vec![ps.clone(), pt.clone()], |g, v| adv(g, v[0], v[1]));
        assert_grads(vec![ps, pt], |g, v| adv_confusion(g, v[0], v[1]));

        let fs = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let ft = rand_tensor(&mut rng, &[6, 3], 0.0, 2.0);
        assert_grads(vec![fs, ft], |g, v| mmd(g, v[0], v[1]));
    }

    #[test]
    fn teacher_detach_blocks_teacher_gradient() {
        let mut g = Graph::new();
        let t = g.param(t(&[1, 2], &[1.0, 0.0]));
        let s = g.param(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let l = sd(&mut g, t, s, 0.5, true);
        let grads = g.backward(l);
        assert!(grads.get(t).is_none());
        assert!(grads.get(s).is_some());
    }

    #[test]
    fn reversal_lambda_zero_kills_gradient() {
        let mut g = Graph::new();
        let f = g.param(t(&[2], &[0.4, -0.3]));
        let r = gradient_reversal(&mut g, f, 0.0);
        let sq = g.mul(r, r);
        let s = g.sum_all(sq);
        let grads = g.backward(s);
        assert_eq!(grads.get(f).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn weights_validation() {
        LossWeights::default().validate().unwrap();
        let bad = LossWeights { tau: -1.0, ..Default::default() };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("tau"));
        assert!(LossWeights { alpha3: -0.1, ..Default::default() }.validate().is_err());
    }
}
