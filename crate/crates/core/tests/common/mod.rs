//! Shared fixtures: a two-moons domain pair over plain 2-D vectors.

#![allow(dead_code)]

use biadapt_core::eval::auc;
use biadapt_core::nets::ModelState;
use biadapt_core::synthdata::Label;
use biadapt_core::tensor::Tensor;
use biadapt_core::trainer::Pool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct Moons {
    pub x: Vec<Tensor>,
    pub y: Vec<Label>,
}

/// `n` points per moon with Gaussian jitter, rotated by `angle` radians
/// and shifted by `shift`.
pub fn moons(n: usize, noise: f64, angle: f64, shift: [f64; 2], seed: u64) -> Moons {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, s) = (angle.cos(), angle.sin());
    let jitter = Normal::new(0.0, noise).unwrap();
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let fake = i % 2 == 1;
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (mut px, mut py) = if fake {
            (1.0 - t.cos(), 0.5 - t.sin())
        } else {
            (t.cos(), t.sin())
        };
        px += jitter.sample(&mut rng);
        py += jitter.sample(&mut rng);
        let (qx, qy) = (c * px - s * py + shift[0], s * px + c * py + shift[1]);
        x.push(Tensor::new(vec![2], vec![qx, qy]).unwrap());
        y.push(if fake { Label::Fake } else { Label::Real });
    }
    Moons { x, y }
}

pub fn pool(m: &Moons) -> Pool {
    Pool::labeled(m.x.clone(), m.y.clone()).unwrap()
}

pub fn stack(xs: &[Tensor]) -> Tensor {
    let refs: Vec<&Tensor> = xs.iter().collect();
    Tensor::stack(&refs).unwrap()
}

/// AUC of the deployed detector's fake logit margin.
pub fn detector_auc(state: &ModelState, m: &Moons) -> f64 {
    let logits = state.logits(&stack(&m.x)).unwrap();
    let scores: Vec<f64> = logits.data().chunks(2).map(|r| r[1] - r[0]).collect();
    auc(&scores, &m.y).unwrap()
}
