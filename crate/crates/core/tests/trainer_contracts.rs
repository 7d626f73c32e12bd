mod common;

use biadapt_core::autodiff::Graph;
use biadapt_core::losses::{self, LossWeights};
use biadapt_core::nets::{self, BackboneConfig, Bound, ModelState, ParamSet};
use biadapt_core::tensor::Tensor;
use biadapt_core::trainer::*;
use common::{moons, pool, stack, Moons};

fn cfg() -> TrainConfig {
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

fn domains(seed: u64) -> (Moons, Moons) {
    (
        moons(12, 0.1, 0.0, [0.0, 0.0], seed),
        moons(10, 0.1, 0.6, [1.0, 0.5], seed + 1),
    )
}

fn data(seed: u64) -> TrainData {
    let (s, t) = domains(seed);
    // The target pool keeps its labels so that any read is counted.
    TrainData {
        source: pool(&s),
        target: pool(&t),
    }
}

fn state(seed: u64) -> ModelState {
    ModelState::init(BackboneConfig::mlp(2, 6), seed).unwrap()
}

fn record(stage: Stage) -> StepRecord {
    StepRecord {
        stage,
        epoch: 0,
        step: 0,
        loss_ce: 0.0,
        loss_adv: 0.0,
        loss_sd: 0.0,
        disc_acc: 0.0,
    }
}

fn step_batch(n: usize, seed: u64) -> StepBatch<'static> {
    let (s, t) = domains(seed);
    StepBatch {
        xs: stack(&s.x[..n]),
        ys: s.y[..n].iter().map(|l| l.index()).collect(),
        xt: stack(&t.x[..n]),
        grl_lambda: 1.0,
        dropout: None,
    }
}

/// A state whose student has drifted from the teacher, as mid-epoch.
fn backward_state() -> ModelState {
    let mut s = state(1);
    for t in s.f_prime.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 1.1);
    }
    s
}

#[test]
fn discriminator_is_frozen_during_extractor_substep() {
    for (stage, mut s) in [(Stage::Forward, state(0)), (Stage::Backward, backward_state())] {
        let c = cfg();
        let before = s.clone();
        let mut opt = StageOptim::new(&c, stage);
        extractor_substep(&mut s, &mut opt, step_batch(8, 3), &c, &mut record(stage)).unwrap();
        assert_eq!(s.q, before.q, "{stage}");
        let moved = match stage {
            Stage::Forward => s.f != before.f,
            Stage::Backward => s.f_prime != before.f_prime,
        };
        assert!(moved, "{stage}: extractor did not move");
    }
}

#[test]
fn extractor_and_classifier_are_frozen_during_discriminator_substep() {
    for (stage, mut s) in [(Stage::Forward, state(0)), (Stage::Backward, backward_state())] {
        let c = cfg();
        let before = s.clone();
        let b = step_batch(8, 3);
        let mut opt = Sgd::new(c.lr_forward, c.momentum, c.weight_decay);
        discriminator_substep(&mut s, &mut opt, &b.xs, &b.xt, &c, &mut record(stage)).unwrap();
        assert_eq!((&s.f, &s.f_prime, &s.g), (&before.f, &before.f_prime, &before.g), "{stage}");
        assert_ne!(s.q, before.q, "{stage}: discriminator did not move");
    }
}

#[test]
fn teacher_is_frozen_within_backward_steps_and_copied_at_sync() {
    let c = cfg();
    let mut s = backward_state();
    let teacher = s.f.clone();
    let mut opt = StageOptim::new(&c, Stage::Backward);
    for step in 0..4 {
        adversarial_step(&mut s, &mut opt, step_batch(8, step), &c, Stage::Backward, 0, step as usize).unwrap();
        assert_eq!(s.f, teacher, "step {step}");
    }
    assert_ne!(s.f_prime, teacher);
    teacher_sync(&mut s, &c).unwrap();
    assert_eq!(s.f, s.f_prime);
    assert_eq!(nets::max_param_diff(&s.f, &s.f_prime).unwrap(), 0.0);
}

#[test]
fn zero_adversarial_weight_leaves_discriminator_unchanged() {
    let d = data(0);
    let mut s = state(0);
    let q = s.q.clone();
    let c = TrainConfig {
        weights: LossWeights {
            alpha2: 0.0,
            alpha4: 0.0,
            ..LossWeights::default()
        },
        ..cfg()
    };
    forward_adaptation_stage(&mut s, &d, &c).unwrap();
    assert_eq!(s.q, q);
    backward_adaptation_stage(&mut s, &d, &c).unwrap();
    assert_eq!(s.q, q);
}

#[test]
fn disabled_alignment_reduces_to_supervised_training() {
    let run = |adapter: Adapter, alpha2: f64| {
        let mut s = state(4);
        let c = TrainConfig {
            adapter,
            weights: LossWeights {
                alpha2,
                ..LossWeights::default()
            },
            ..cfg()
        };
        forward_adaptation_stage(&mut s, &data(4), &c).unwrap();
        s
    };
    let plain = run(Adapter::None, 1.0);
    for (adapter, alpha2) in [(Adapter::None, 0.0), (Adapter::Fa, 0.0), (Adapter::Grl, 0.0), (Adapter::Mmd, 0.0)] {
        let s = run(adapter, alpha2);
        assert_eq!((&s.f, &s.g), (&plain.f, &plain.g), "{adapter} with alpha2 {alpha2}");
    }
    assert_ne!(run(Adapter::Fa, 1.0).f, plain.f);
}

#[test]
fn empty_backward_objective_leaves_student_unchanged() {
    let d = data(2);
    let mut s = state(2);
    let c = TrainConfig {
        backward_objective: BackwardObjective::None,
        weights: LossWeights {
            alpha4: 0.0,
            ..LossWeights::default()
        },
        ..cfg()
    };
    forward_adaptation_stage(&mut s, &d, &c).unwrap();
    let after_forward = s.clone();
    let trace = backward_adaptation_stage(&mut s, &d, &c).unwrap();
    assert!(!trace.records.is_empty());
    assert_eq!(s, after_forward);
}

#[test]
fn no_backward_epochs_leave_student_equal_to_teacher() {
    let d = data(5);
    let mut s = state(5);
    let c = TrainConfig { t2: 0, ..cfg() };
    forward_adaptation_stage(&mut s, &d, &c).unwrap();
    s.f_prime.values_mut().for_each(|t| t.data_mut()[0] += 1.0);
    backward_adaptation_stage(&mut s, &d, &c).unwrap();
    assert_eq!(s.f_prime, s.f);
}

#[test]
fn baseline_config_is_source_only_training() {
    let d = data(6);
    let base = cfg().baseline();
    let mut a = state(6);
    let q = a.q.clone();
    let trace = train(&mut a, &d, &base, |_, _, _| Ok(())).unwrap();
    assert!(trace.records.iter().all(|r| r.stage == Stage::Forward));
    assert_eq!(a.q, q);
    assert_eq!(a.f, a.f_prime);

    let mut b = state(6);
    let plain = TrainConfig {
        adapter: Adapter::None,
        ..cfg()
    };
    forward_adaptation_stage(&mut b, &d, &plain).unwrap();
    assert_eq!((&a.f, &a.g), (&b.f, &b.g));
}

#[test]
fn training_never_reads_target_labels() {
    for adapter in [Adapter::Fa, Adapter::Grl, Adapter::Mmd] {
        for objective in [BackwardObjective::Sd, BackwardObjective::Ent] {
            let d = data(7);
            let mut s = state(7);
            let c = TrainConfig {
                adapter,
                backward_objective: objective,
                ..cfg()
            };
            train(&mut s, &d, &c, |_, _, _| Ok(())).unwrap();
            assert_eq!(d.target.label_reads(), 0, "{adapter}/{objective}");
            assert!(d.source.label_reads() > 0);
        }
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let run = || {
        let mut s = state(8);
        let mut stages = Vec::new();
        let trace = train(&mut s, &data(8), &cfg(), |stage, st, _| {
            stages.push((stage, st.to_bytes()));
            Ok(())
        })
        .unwrap();
        (s.to_bytes(), trace, stages)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.2.len(), 2);
}

#[test]
fn checkpoint_callback_failure_keeps_forward_checkpoint() {
    let mut seen = Vec::new();
    let err = train(&mut state(9), &data(9), &cfg(), |stage, _, _| {
        seen.push(stage);
        if stage == Stage::Backward {
            Err(biadapt_core::Error::Config("disk full".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert!(err.to_string().contains("disk full"));
    assert_eq!(seen, vec![Stage::Forward, Stage::Backward]);
}

#[test]
fn deployed_detector_ignores_teacher_and_discriminator() {
    let mut s = state(10);
    train(&mut s, &data(10), &cfg(), |_, _, _| Ok(())).unwrap();
    let (m, _) = domains(11);
    let x = stack(&m.x);
    let before = s.logits(&x).unwrap();
    for set in [&mut s.f, &mut s.q] {
        set.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    }
    assert_eq!(s.logits(&x).unwrap(), before);
}

fn supervised_objective(s: &ModelState, f: &ParamSet, g: &ParamSet, xs: &Tensor, ys: &[usize]) -> f64 {
    let mut graph = Graph::new();
    let fp = Bound::new(&mut graph, f, false);
    let gp = Bound::new(&mut graph, g, false);
    let x = graph.constant(xs.clone());
    let feats = nets::extract(&mut graph, &s.backbone, &fp, x, None).features;
    let logits = nets::classify(&mut graph, &gp, feats);
    let ce = losses::ce(&mut graph, logits, ys);
    graph.value(ce).item()
}

/// Central differences of the supervised objective for every coordinate of
/// one parameter set.
fn numeric_grad(
    s: &ModelState,
    which: usize,
    xs: &Tensor,
    ys: &[usize],
) -> ParamSet {
    const H: f64 = 1e-6;
    let base = if which == 0 { &s.f } else { &s.g };
    let mut out = ParamSet::new();
    for (name, t) in base {
        let mut grad = Tensor::zeros(t.shape());
        for i in 0..t.len() {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p.get_mut(name).unwrap().data_mut()[i] += delta;
                if which == 0 {
                    supervised_objective(s, &p, &s.g, xs, ys)
                } else {
                    supervised_objective(s, &s.f, &p, xs, ys)
                }
            };
            grad.data_mut()[i] = (eval(H) - eval(-H)) / (2.0 * H);
        }
        out.insert(name.clone(), grad);
    }
    out
}

#[test]
fn single_step_matches_hand_rolled_sgd() {
    let c = TrainConfig {
        adapter: Adapter::None,
        lr_forward: 0.02,
        ..cfg()
    };
    let mut s = ModelState::init(BackboneConfig::mlp(2, 4), 12).unwrap();
    let b = step_batch(8, 12);
    let (xs, ys) = (b.xs.clone(), b.ys.clone());
    let before = s.clone();
    let loss_before = supervised_objective(&before, &before.f, &before.g, &xs, &ys);
    let grads = [numeric_grad(&before, 0, &xs, &ys), numeric_grad(&before, 1, &xs, &ys)];

    let mut opt = StageOptim::new(&c, Stage::Forward);
    adversarial_step(&mut s, &mut opt, b, &c, Stage::Forward, 0, 0).unwrap();

    // First momentum step: v = g + wd·θ, θ ← θ − lr·v.
    for (set, (old, new)) in [(&before.f, &s.f), (&before.g, &s.g)].into_iter().enumerate() {
        for (name, t) in old {
            let g = &grads[set][name];
            for i in 0..t.len() {
                let theta = t.data()[i];
                let want = theta - c.lr_forward * (g.data()[i] + c.weight_decay * theta);
                let got = new[name].data()[i];
                assert!((got - want).abs() < 1e-10, "{name}[{i}]: {got} vs {want}");
            }
        }
    }
    let loss_after = supervised_objective(&s, &s.f, &s.g, &xs, &ys);
    assert!(loss_after < loss_before, "{loss_after} >= {loss_before}");
}

#[test]
fn source_without_labels_is_rejected() {
    let (s, t) = domains(13);
    let d = TrainData {
        source: Pool::unlabeled(s.x.clone()).unwrap(),
        target: pool(&t),
    };
    assert!(forward_adaptation_stage(&mut state(13), &d, &cfg()).is_err());
}
