//! Bi-directional adaptation: a forward stage that trains `F` and `G` on
//! labeled source data while aligning source and target features against
//! the discriminator `Q`, then a backward stage that refines a student copy
//! `F′` on the unlabeled target by self-distillation from the frozen teacher
//! `F`, with the same adversarial alignment, copying `F′` into `F` at the
//! end of every epoch.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::nets::{self, Bound, ModelState, ParamSet};
use crate::synthdata::{Label, LabeledSample, Scenario, UnlabeledSample};
use crate::tensor::Tensor;

macro_rules! str_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), s
                    ))),
                }
            }
        }
    };
}

str_enum!(Adapter { Fa => "FA", Grl => "GRL", Mmd => "MMD", None => "none" });
str_enum!(BackwardObjective { Sd => "SD", Ent => "ENT", None => "none" });
str_enum!(TeacherUpdate { Copy => "copy", Ema => "ema" });
str_enum!(Stage { Forward => "forward", Backward => "backward" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Forward-stage epochs (T₁).
    pub t1: usize,
    /// Backward-stage epochs (T₂).
    pub t2: usize,
    pub lr_forward: f64,
    pub lr_backward: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Source and target batch size in the forward stage.
    pub batch_forward: usize,
    /// Source and target batch size in the backward stage.
    pub batch_backward: usize,
    pub seed: u64,
    pub adapter: Adapter,
    pub backward_objective: BackwardObjective,
    pub teacher_update: TeacherUpdate,
    pub ema_decay: f64,
    /// Treat teacher predictions as constants in the distillation loss.
    pub detach_teacher: bool,
    /// Update the classifier during the backward stage.
    pub train_classifier_backward: bool,
}

impl TrainConfig {
    pub fn paper_parity() -> Self {
        Self {
            weights: LossWeights::default(),
            t1: 20,
            t2: 10,
            lr_forward: 0.001,
            lr_backward: 0.0001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_forward: 32,
            batch_backward: 24,
            seed: 0,
            adapter: Adapter::Fa,
            backward_objective: BackwardObjective::Sd,
            teacher_update: TeacherUpdate::Copy,
            ema_decay: 0.9,
            detach_teacher: true,
            train_classifier_backward: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [("lr_forward", self.lr_forward), ("lr_backward", self.lr_backward)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_forward < 2 || self.batch_backward < 2 {
            return fail("batch sizes must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay {} must lie in [0, 1]", self.ema_decay));
        }
        Ok(())
    }

    /// Same pipeline with adaptation switched off (source-only training).
    pub fn baseline(&self) -> Self {
        Self {
            weights: LossWeights {
                alpha2: 0.0,
                ..self.weights
            },
            adapter: Adapter::None,
            backward_objective: BackwardObjective::None,
            t2: 0,
            ..self.clone()
        }
    }
}

/// Training pool with an audited label accessor.
#[derive(Debug)]
pub struct Pool {
    inputs: Vec<Tensor>,
    labels: Option<Vec<Label>>,
    label_reads: AtomicUsize,
}

impl Pool {
    pub fn labeled(inputs: Vec<Tensor>, labels: Vec<Label>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Size(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Self::build(inputs, Some(labels))
    }

    pub fn unlabeled(inputs: Vec<Tensor>) -> Result<Self> {
        Self::build(inputs, None)
    }

    fn build(inputs: Vec<Tensor>, labels: Option<Vec<Label>>) -> Result<Self> {
        if inputs.len() < 2 {
            return Err(Error::Size("a training pool needs at least 2 samples".into()));
        }
        if inputs.iter().any(|t| t.shape() != inputs[0].shape()) {
            return Err(Error::Shape("pool samples differ in shape".into()));
        }
        Ok(Self {
            inputs,
            labels,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn from_labeled(samples: &[LabeledSample]) -> Result<Self> {
        Self::labeled(
            samples.iter().map(|s| s.image.to_tensor()).collect(),
            samples.iter().map(|s| s.label).collect(),
        )
    }

    pub fn from_unlabeled(samples: &[UnlabeledSample]) -> Result<Self> {
        Self::unlabeled(samples.iter().map(|s| s.image.to_tensor()).collect())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Reads one label; every call is counted.
    pub fn label(&self, i: usize) -> Option<Label> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let parts: Vec<&Tensor> = idx.iter().map(|&i| &self.inputs[i]).collect();
        Tensor::stack(&parts).expect("pool samples share a shape")
    }

    pub fn all(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

/// Labeled source pool and label-free target pool.
#[derive(Debug)]
pub struct TrainData {
    pub source: Pool,
    pub target: Pool,
}

impl TrainData {
    pub fn from_scenario(s: &Scenario) -> Result<Self> {
        let source = match &s.source.train {
            crate::synthdata::Samples::Labeled(v) => Pool::from_labeled(v)?,
            crate::synthdata::Samples::Unlabeled(_) => {
                return Err(Error::Config("source domain must be labeled".into()))
            }
        };
        Ok(Self {
            source,
            target: Pool::from_unlabeled(s.target_pool())?,
        })
    }
}

/// Endless stream of shuffled index batches; reshuffles when exhausted.
struct Loader {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Loader {
    fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        let mut l = Self {
            n,
            batch: batch.min(n),
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        l.reshuffle();
        l
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        // A trailing remainder of fewer than 2 samples is dropped.
        if self.n - self.pos < 2 {
            self.reshuffle();
        }
        let end = (self.pos + self.batch).min(self.n);
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

fn steps_per_epoch(data: &TrainData, batch: usize) -> usize {
    let per = |n: usize| n.div_ceil(batch.min(n));
    per(data.source.len()).max(per(data.target.len()))
}

fn stream_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// SGD with momentum and L2 weight decay (`d = g + wd·θ`,
/// `v ← μ·v + d` (first step `v = d`), `θ ← θ − lr·v`).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: ParamSet::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let fresh = !self.velocity.contains_key(name);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + self.weight_decay * *pv;
                *vv = if fresh { d } else { self.momentum * *vv + d };
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub loss_ce: f64,
    pub loss_adv: f64,
    pub loss_sd: f64,
    pub disc_acc: f64,
}

impl StepRecord {
    fn check(&self) -> Result<()> {
        const LIMIT: f64 = 1e4;
        for (name, v) in [
            ("loss_ce", self.loss_ce),
            ("loss_adv", self.loss_adv),
            ("loss_sd", self.loss_sd),
        ] {
            if !v.is_finite() || v.abs() > LIMIT {
                return Err(Error::Divergence {
                    record: Box::new(self.clone()),
                    reason: format!("{name} = {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub stage: Stage,
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_adv: f64,
    pub loss_sd: f64,
    pub disc_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<EpochSnapshot>,
}

pub const TRACE_HEADER: &str = "epoch,step,loss_ce,loss_adv,loss_sd,disc_acc";

impl TrainTrace {
    pub fn extend(&mut self, other: TrainTrace) {
        self.records.extend(other.records);
        self.snapshots.extend(other.snapshots);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.step, r.loss_ce, r.loss_adv, r.loss_sd, r.disc_acc
            ));
        }
        s
    }

    fn close_epoch(&mut self, stage: Stage, epoch: usize, from: usize) {
        let recs = &self.records[from..];
        if recs.is_empty() {
            return;
        }
        let n = recs.len() as f64;
        let mean = |f: fn(&StepRecord) -> f64| recs.iter().map(f).sum::<f64>() / n;
        self.snapshots.push(EpochSnapshot {
            stage,
            epoch,
            loss_ce: mean(|r| r.loss_ce),
            loss_adv: mean(|r| r.loss_adv),
            loss_sd: mean(|r| r.loss_sd),
            disc_acc: mean(|r| r.disc_acc),
        });
    }
}

/// Source and target mini-batches for one step.
pub struct StepBatch<'a> {
    pub xs: Tensor,
    pub ys: Vec<usize>,
    pub xt: Tensor,
    /// Gradient-reversal coefficient (GRL adapter only).
    pub grl_lambda: f64,
    pub dropout: Option<&'a mut ChaCha8Rng>,
}

/// Optimiser state of one stage.
pub struct StageOptim {
    pub extractor: Sgd,
    pub classifier: Sgd,
    pub discriminator: Sgd,
}

impl StageOptim {
    pub fn new(cfg: &TrainConfig, stage: Stage) -> Self {
        let lr = match stage {
            Stage::Forward => cfg.lr_forward,
            Stage::Backward => cfg.lr_backward,
        };
        let mk = || Sgd::new(lr, cfg.momentum, cfg.weight_decay);
        Self {
            extractor: mk(),
            classifier: mk(),
            discriminator: mk(),
        }
    }
}

fn discriminator_accuracy(p_src: &[f64], p_tgt: &[f64]) -> f64 {
    let hits = p_src.iter().filter(|&&p| p > 0.5).count() + p_tgt.iter().filter(|&&p| p < 0.5).count();
    hits as f64 / (p_src.len() + p_tgt.len()) as f64
}

/// Sub-update (b): with the extractor fixed, one ascent step on the adversarial loss over
/// `θ_Q`. Returns `(adv, disc_acc)` measured before the update.
fn discriminator_step(
    state: &mut ModelState,
    opt: &mut Sgd,
    extractor: &ParamSet,
    xs: &Tensor,
    xt: &Tensor,
    update: bool,
) -> (f64, f64) {
    let ns = xs.shape()[0];
    let mut g = Graph::new();
    let fp = Bound::new(&mut g, extractor, false);
    let xv = g.constant(concat_batches(xs, xt));
    let f = nets::extract(&mut g, &state.backbone, &fp, xv, None).features;
    let f = g.detach(f);
    let qp = Bound::new(&mut g, &state.q, update);
    let p = nets::discriminate(&mut g, &qp, f);
    let n = g.shape(p)[0];
    let ps = g.slice_rows(p, 0, ns);
    let pt = g.slice_rows(p, ns, n);
    let adv = losses::adv(&mut g, ps, pt);
    let acc = discriminator_accuracy(g.value(ps).data(), g.value(pt).data());
    let adv_value = g.value(adv).item();
    if update {
        let neg = g.scale(adv, -1.0);
        let grads = g.backward(neg);
        let gq = qp.grads(&g, &grads);
        opt.step(&mut state.q, &gq);
    }
    (adv_value, acc)
}

fn concat_batches(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data).expect("batch shapes agree")
}

/// Sum of weighted terms, or `None` when every weight is zero.
fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let t = if w == 1.0 { v } else { g.scale(v, w) };
        acc = Some(match acc {
            Some(a) => g.add(a, t),
            None => t,
        });
    }
    acc
}

/// Adversarial weight of a stage and whether `Q` takes a separate ascent
/// step (sub-update (b)).
fn adversarial_weight(cfg: &TrainConfig, stage: Stage) -> (f64, bool) {
    let w = cfg.weights;
    match stage {
        Stage::Forward => {
            let align = w.alpha2 > 0.0 && cfg.adapter != Adapter::None;
            (if align { w.alpha2 } else { 0.0 }, align && cfg.adapter == Adapter::Fa)
        }
        Stage::Backward => (w.alpha4, w.alpha4 > 0.0),
    }
}

fn uses_reversal(cfg: &TrainConfig, stage: Stage) -> bool {
    stage == Stage::Forward && cfg.adapter == Adapter::Grl && adversarial_weight(cfg, stage).0 > 0.0
}

/// One alternating adaptation step: (a) extractor and classifier update with `θ_Q`
/// fixed, then (b) discriminator update with the extractor fixed, on
/// recomputed features. `epoch`/`step` only label the record.
pub fn adversarial_step(
    state: &mut ModelState,
    opt: &mut StageOptim,
    batch: StepBatch<'_>,
    cfg: &TrainConfig,
    stage: Stage,
    epoch: usize,
    step: usize,
) -> Result<StepRecord> {
    let mut rec = StepRecord {
        stage,
        epoch,
        step,
        loss_ce: 0.0,
        loss_adv: 0.0,
        loss_sd: 0.0,
        disc_acc: 0.0,
    };
    let (xs, xt) = (batch.xs.clone(), batch.xt.clone());
    extractor_substep(state, opt, batch, cfg, &mut rec)?;
    if !uses_reversal(cfg, stage) {
        discriminator_substep(state, &mut opt.discriminator, &xs, &xt, cfg, &mut rec)?;
    }
    rec.check()?;
    Ok(rec)
}

/// Sub-update (a): one step on the extractor of `rec.stage` (and the
/// classifier when it trains) with `θ_Q` held fixed. The GRL adapter is the
/// exception: its reversed gradient updates `θ_Q` in the same pass.
/// Fills the loss fields of `rec`.
pub fn extractor_substep(
    state: &mut ModelState,
    opt: &mut StageOptim,
    batch: StepBatch<'_>,
    cfg: &TrainConfig,
    rec: &mut StepRecord,
) -> Result<()> {
    let StepBatch {
        xs,
        ys,
        xt,
        grl_lambda,
        dropout,
    } = batch;
    if xs.shape().is_empty() || xs.shape()[0] == 0 || xt.shape().is_empty() || xt.shape()[0] == 0 {
        return Err(Error::Size("empty step batch".into()));
    }
    state.check_input(&xs)?;
    state.check_input(&xt)?;
    let stage = rec.stage;
    let w = cfg.weights;
    let ns = xs.shape()[0];
    let (alpha_adv, _) = adversarial_weight(cfg, stage);
    let mut g = Graph::new();
    let train_g = stage == Stage::Forward || cfg.train_classifier_backward;
    let extractor = match stage {
        Stage::Forward => &state.f,
        Stage::Backward => &state.f_prime,
    };
    let fp = Bound::new(&mut g, extractor, true);
    let gp = Bound::new(&mut g, &state.g, train_g);
    let grl = stage == Stage::Forward && cfg.adapter == Adapter::Grl && alpha_adv > 0.0;
    let qp = Bound::new(&mut g, &state.q, grl);
    let needs_target = alpha_adv > 0.0 || stage == Stage::Backward;
    let input = if needs_target {
        concat_batches(&xs, &xt)
    } else {
        xs.clone()
    };
    let xv = g.constant(input);
    let feats = nets::extract(&mut g, &state.backbone, &fp, xv, dropout).features;
    let n_all = g.shape(feats)[0];
    let fs = if needs_target {
        g.slice_rows(feats, 0, ns)
    } else {
        feats
    };
    let logits_s = nets::classify(&mut g, &gp, fs);
    let ce = losses::ce(&mut g, logits_s, &ys);
    rec.loss_ce = g.value(ce).item();

    let mut terms: Vec<(f64, Var)> = Vec::new();
    if stage == Stage::Forward {
        terms.push((w.alpha1, ce));
    }
    if alpha_adv > 0.0 {
        match (stage, cfg.adapter) {
            (Stage::Forward, Adapter::Mmd) => {
                let ft = g.slice_rows(feats, ns, n_all);
                let m = losses::mmd(&mut g, fs, ft);
                terms.push((alpha_adv, m));
            }
            (Stage::Forward, Adapter::Grl) => {
                let r = losses::gradient_reversal(&mut g, feats, grl_lambda);
                let p = nets::discriminate(&mut g, &qp, r);
                let ps = g.slice_rows(p, 0, ns);
                let pt = g.slice_rows(p, ns, n_all);
                let adv = losses::adv(&mut g, ps, pt);
                rec.loss_adv = g.value(adv).item();
                rec.disc_acc = discriminator_accuracy(g.value(ps).data(), g.value(pt).data());
                // Q descends on -adv; the reversal makes F ascend on it.
                let neg = g.scale(adv, -1.0);
                terms.push((alpha_adv, neg));
            }
            _ => {
                let p = nets::discriminate(&mut g, &qp, feats);
                let ps = g.slice_rows(p, 0, ns);
                let pt = g.slice_rows(p, ns, n_all);
                let conf = losses::adv_confusion(&mut g, ps, pt);
                terms.push((alpha_adv, conf));
            }
        }
    }
    if stage == Stage::Backward {
        let ft = g.slice_rows(feats, ns, n_all);
        let student = nets::classify(&mut g, &gp, ft);
        match cfg.backward_objective {
            BackwardObjective::Sd => {
                let tp = Bound::new(&mut g, &state.f, false);
                let xtv = g.constant(xt.clone());
                let tf = nets::extract(&mut g, &state.backbone, &tp, xtv, None).features;
                let teacher = nets::classify(&mut g, &gp, tf);
                let sd = losses::sd(&mut g, teacher, student, w.tau, cfg.detach_teacher);
                rec.loss_sd = g.value(sd).item();
                terms.push((w.alpha3, sd));
            }
            BackwardObjective::Ent => {
                let e = losses::entropy(&mut g, student);
                rec.loss_sd = g.value(e).item();
                terms.push((w.alpha3, e));
            }
            BackwardObjective::None => {}
        }
    }

    rec.check()?;
    if let Some(obj) = weighted_sum(&mut g, &terms) {
        let v = g.value(obj).item();
        if !v.is_finite() {
            return Err(Error::Divergence {
                record: Box::new(rec.clone()),
                reason: format!("objective = {v}"),
            });
        }
        let grads = g.backward(obj);
        let gf = fp.grads(&g, &grads);
        let gg = train_g.then(|| gp.grads(&g, &grads));
        let gq = grl.then(|| qp.grads(&g, &grads));
        drop(g);
        let extractor = match stage {
            Stage::Forward => &mut state.f,
            Stage::Backward => &mut state.f_prime,
        };
        opt.extractor.step(extractor, &gf);
        if let Some(gg) = gg {
            opt.classifier.step(&mut state.g, &gg);
        }
        if let Some(gq) = gq {
            opt.discriminator.step(&mut state.q, &gq);
        }
    }
    Ok(())
}

/// Sub-update (b): with the extractor of `rec.stage` fixed, one ascent step
/// on the adversarial loss over `θ_Q` (skipped when the stage has no
/// discriminator game). Records `loss_adv` and `disc_acc` measured before
/// the update.
pub fn discriminator_substep(
    state: &mut ModelState,
    opt: &mut Sgd,
    xs: &Tensor,
    xt: &Tensor,
    cfg: &TrainConfig,
    rec: &mut StepRecord,
) -> Result<()> {
    state.check_input(xs)?;
    state.check_input(xt)?;
    let (_, q_update) = adversarial_weight(cfg, rec.stage);
    let extractor = match rec.stage {
        Stage::Forward => state.f.clone(),
        Stage::Backward => state.f_prime.clone(),
    };
    let (adv, acc) = discriminator_step(state, opt, &extractor, xs, xt, q_update);
    rec.loss_adv = adv;
    rec.disc_acc = acc;
    Ok(())
}

/// Gradient-reversal coefficient schedule `2 / (1 + e^{-10 p}) − 1`.
pub fn grl_lambda(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

fn run_stage(
    state: &mut ModelState,
    data: &TrainData,
    cfg: &TrainConfig,
    stage: Stage,
    epochs: usize,
    epoch_offset: usize,
    step_offset: usize,
) -> Result<TrainTrace> {
    let mut trace = TrainTrace::default();
    if epochs == 0 {
        return Ok(trace);
    }
    if !data.source.has_labels() {
        return Err(Error::Config("source pool must carry labels".into()));
    }
    let tag = stage.name();
    let batch = match stage {
        Stage::Forward => cfg.batch_forward,
        Stage::Backward => cfg.batch_backward,
    };
    let mut src = Loader::new(data.source.len(), batch, stream_rng(cfg.seed, &[tag, "source"]));
    let mut tgt = Loader::new(data.target.len(), batch, stream_rng(cfg.seed, &[tag, "target"]));
    let mut drop_rng = stream_rng(cfg.seed, &[tag, "dropout"]);
    let use_dropout = state.backbone.dropout > 0.0;
    let steps = steps_per_epoch(data, batch);
    let total = (epochs * steps) as f64;
    let mut opt = StageOptim::new(cfg, stage);
    let mut step = step_offset;
    for e in 0..epochs {
        let epoch = epoch_offset + e;
        let first = trace.records.len();
        for s in 0..steps {
            let si = src.next_batch();
            let ti = tgt.next_batch();
            let ys = si
                .iter()
                .map(|&i| data.source.label(i).map(Label::index))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Config("source pool lost its labels".into()))?;
            let batch = StepBatch {
                xs: data.source.batch(&si),
                ys,
                xt: data.target.batch(&ti),
                grl_lambda: grl_lambda((e * steps + s) as f64 / total),
                dropout: use_dropout.then_some(&mut drop_rng),
            };
            let rec = adversarial_step(state, &mut opt, batch, cfg, stage, epoch, step)?;
            trace.records.push(rec);
            step += 1;
        }
        if stage == Stage::Backward {
            teacher_sync(state, cfg)?;
        }
        trace.close_epoch(stage, epoch, first);
    }
    Ok(trace)
}

/// T₁ epochs of forward adaptation over `θ_F`, `θ_G`, `θ_Q`. On return the
/// student is synchronised with the trained teacher (`θ_F′ = θ_F`), so the
/// deployed detector `G∘F′` reflects this stage.
pub fn forward_adaptation_stage(
    state: &mut ModelState,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if cfg.t1 == 0 {
        return Ok(TrainTrace::default());
    }
    let trace = run_stage(state, data, cfg, Stage::Forward, cfg.t1, 0, 0)?;
    state.init_student_from_teacher();
    Ok(trace)
}

/// T₂ epochs of backward adaptation over `θ_F′`, `θ_G`, `θ_Q` with the
/// teacher `θ_F` frozen inside each epoch and synchronised at its end.
pub fn backward_adaptation_stage(
    state: &mut ModelState,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    state.init_student_from_teacher();
    let forward_steps = steps_per_epoch(data, cfg.batch_forward);
    run_stage(state, data, cfg, Stage::Backward, cfg.t2, cfg.t1, cfg.t1 * forward_steps)
}

/// End-of-epoch teacher update: copy (`θ_F ← θ_F′`) or exponential moving
/// average (`θ_F ← d·θ_F + (1 − d)·θ_F′`).
pub fn teacher_sync(state: &mut ModelState, cfg: &TrainConfig) -> Result<()> {
    nets::max_param_diff(&state.f, &state.f_prime)?;
    match cfg.teacher_update {
        TeacherUpdate::Copy => state.f = state.f_prime.clone(),
        TeacherUpdate::Ema => {
            let d = cfg.ema_decay;
            for (k, t) in state.f.iter_mut() {
                let s = &state.f_prime[k];
                for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
                    *a = d * *a + (1.0 - d) * b;
                }
            }
        }
    }
    Ok(())
}

/// Runs the forward then the backward stage, calling `on_stage` with the
/// state after each (e.g. to checkpoint it).
pub fn train(
    state: &mut ModelState,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_stage: impl FnMut(Stage, &ModelState, &TrainTrace) -> Result<()>,
) -> Result<TrainTrace> {
    let mut trace = forward_adaptation_stage(state, data, cfg)?;
    on_stage(Stage::Forward, state, &trace)?;
    let back = backward_adaptation_stage(state, data, cfg)?;
    trace.extend(back);
    on_stage(Stage::Backward, state, &trace)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::BackboneConfig;
    use rand::Rng;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            t1: 2,
            t2: 2,
            lr_forward: 0.05,
            lr_backward: 0.01,
            batch_forward: 8,
            batch_backward: 8,
            ..TrainConfig::paper_parity()
        }
    }

    fn toy_data(seed: u64) -> TrainData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = |shift: f64, n: usize| -> (Vec<Tensor>, Vec<Label>) {
            (0..n)
                .map(|i| {
                    let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
                    let c = if label == Label::Real { -1.0 } else { 1.0 };
                    let x = vec![c + rng.random_range(-0.5..0.5) + shift, rng.random_range(-1.0..1.0)];
                    (Tensor::new(vec![2], x).unwrap(), label)
                })
                .unzip()
        };
        let (xs, ys) = pts(0.0, 20);
        let (xt, yt) = pts(1.5, 18);
        TrainData {
            source: Pool::labeled(xs, ys).unwrap(),
            // Labels present but must never be read.
            target: Pool::labeled(xt, yt).unwrap(),
        }
    }

    fn toy_state() -> ModelState {
        ModelState::init(BackboneConfig::mlp(2, 6), 3).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for a in [Adapter::Fa, Adapter::Grl, Adapter::Mmd, Adapter::None] {
            assert_eq!(a.name().parse::<Adapter>().unwrap(), a);
        }
        assert!("fa".parse::<Adapter>().is_err());
        assert_eq!("ENT".parse::<BackwardObjective>().unwrap(), BackwardObjective::Ent);
    }

    #[test]
    fn sgd_matches_hand_rolled_update() {
        let mut p = ParamSet::new();
        p.insert("w".into(), Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let g: ParamSet = [("w".to_string(), Tensor::new(vec![2], vec![0.5, 0.25]).unwrap())].into();
        let mut opt = Sgd::new(0.1, 0.9, 0.01);
        opt.step(&mut p, &g);
        // v = g + wd θ; θ -= lr v
        let v1 = [0.5 + 0.01 * 1.0, 0.25 + 0.01 * -2.0];
        let t1 = [1.0 - 0.1 * v1[0], -2.0 - 0.1 * v1[1]];
        assert_eq!(p["w"].data(), &t1);
        opt.step(&mut p, &g);
        let v2 = [0.9 * v1[0] + 0.5 + 0.01 * t1[0], 0.9 * v1[1] + 0.25 + 0.01 * t1[1]];
        assert_eq!(p["w"].data(), &[t1[0] - 0.1 * v2[0], t1[1] - 0.1 * v2[1]]);
    }

    #[test]
    fn zero_epochs_leave_state_unchanged() {
        let data = toy_data(0);
        let mut s = toy_state();
        let before = s.clone();
        let cfg = TrainConfig { t1: 0, t2: 0, ..toy_cfg() };
        let tr = forward_adaptation_stage(&mut s, &data, &cfg).unwrap();
        assert!(tr.records.is_empty());
        assert_eq!(s, before);
        s.f_prime.get_mut("mlp.fc1.w").unwrap().data_mut()[0] = 9.0;
        backward_adaptation_stage(&mut s, &data, &cfg).unwrap();
        assert_eq!(nets::max_param_diff(&s.f, &s.f_prime).unwrap(), 0.0);
    }

    #[test]
    fn loader_covers_pool_and_cycles() {
        let mut l = Loader::new(10, 4, ChaCha8Rng::seed_from_u64(0));
        let mut seen: Vec<usize> = (0..3).flat_map(|_| l.next_batch()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(l.next_batch().len(), 4);
    }

    #[test]
    fn trace_is_ordered_and_finite() {
        let data = toy_data(1);
        let mut s = toy_state();
        let tr = train(&mut s, &data, &toy_cfg(), |_, _, _| Ok(())).unwrap();
        assert!(!tr.records.is_empty());
        for w in tr.records.windows(2) {
            assert!((w[0].epoch, w[0].step) < (w[1].epoch, w[1].step));
        }
        assert!(tr
            .records
            .iter()
            .all(|r| [r.loss_ce, r.loss_adv, r.loss_sd, r.disc_acc].iter().all(|v| v.is_finite())));
        assert_eq!(data.target.label_reads(), 0);
        assert!(data.source.label_reads() > 0);
        let csv = tr.to_csv();
        assert!(csv.starts_with(TRACE_HEADER));
        assert_eq!(csv.lines().count(), tr.records.len() + 1);
    }

    #[test]
    fn teacher_sync_modes() {
        let mut s = toy_state();
        for t in s.f_prime.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        let mut copy = s.clone();
        teacher_sync(&mut copy, &toy_cfg()).unwrap();
        assert_eq!(copy.f, copy.f_prime);

        let mut ema0 = s.clone();
        let cfg = TrainConfig {
            teacher_update: TeacherUpdate::Ema,
            ema_decay: 0.0,
            ..toy_cfg()
        };
        teacher_sync(&mut ema0, &cfg).unwrap();
        assert_eq!(ema0.f, copy.f);

        let mut scalar = s.clone();
        scalar.f.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 1.0));
        scalar.f_prime.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        teacher_sync(&mut scalar, &TrainConfig { ema_decay: 0.9, ..cfg }).unwrap();
        assert!(scalar.f.values().all(|t| t.data().iter().all(|&v| v == 0.9)));

        let mut bad = s;
        bad.f_prime.remove("mlp.fc1.w");
        assert!(matches!(teacher_sync(&mut bad, &toy_cfg()), Err(Error::StateCorruption(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy_data(2);
        let mut s = toy_state();
        let cfg = TrainConfig { lr_forward: 1e6, t1: 5, ..toy_cfg() };
        match forward_adaptation_stage(&mut s, &data, &cfg) {
            Err(Error::Divergence { record, .. }) => assert_eq!(record.stage, Stage::Forward),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
