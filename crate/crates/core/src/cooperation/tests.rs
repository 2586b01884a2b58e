use super::*;
use crate::models::{init_mlp, MlpConfig, Part};
use crate::numerics::sgd_step;
use crate::rng;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn cfg() -> MlpConfig {
    MlpConfig {
        input_dim: 5,
        hidden_widths: vec![7, 6],
        num_classes: 4,
        bn_after_hidden: true,
    }
}

fn batch(seed: u64, n: usize) -> (Tensor<f64>, Vec<usize>) {
    let mut r = rng::stream(&[seed, 500]);
    let x: Vec<f64> = (0..n * 5).map(|_| r.sample(StandardNormal)).collect();
    let y = (0..n).map(|i| i % 4).collect();
    (Tensor::from_f64(&[n, 5], &x).unwrap(), y)
}

fn mlp() -> Mlp<f64> {
    Mlp::new(cfg()).unwrap()
}

fn heads(ids: &[usize]) -> ClassifierSet<f64> {
    let ups: Vec<(usize, ParamSet<f64>)> = ids
        .iter()
        .map(|&i| (i, classifier_of(&init_mlp(&cfg(), 100 + i as u64).unwrap())))
        .collect();
    build_classifier_set(&ups).unwrap()
}

fn gen_value(set: &ClassifierSet<f64>, own: usize) -> f64 {
    let m = mlp();
    let p = init_mlp::<f64>(&cfg(), 1).unwrap();
    let (x, y) = batch(2, 12);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &p, true);
    let xv = tape.constant(x);
    let out = m.forward_tape(&mut tape, &bound, &p, xv, BnMode::Train).unwrap();
    let l = inter_client_loss(&mut tape, out.features, set, own, &y).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn fusion_examples() {
    let on = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
    let off = Tensor::<f64>::from_f64(&[1, 2], &[3.0, 1.0]).unwrap();
    let f = fuse_predictions(&on, &off, FusionRule::default()).unwrap();
    assert_eq!(f.data(), &[4.0, 3.0]);
    let zero = Tensor::zeros(&[1, 2]);
    assert!(fuse_predictions(&on, &zero, FusionRule::default()).unwrap().bitwise_eq(&on));
    let bad = Tensor::zeros(&[2, 2]);
    assert!(matches!(fuse_predictions(&on, &bad, FusionRule::default()), Err(Error::Shape(_))));
    assert!(FusionRule::new(0.0, 1.0).is_err());
    assert!(FusionRule::new(1.0, -1.0).is_err());
    assert_eq!(FusionRule::new(0.5, 0.5).unwrap(), FusionRule::mean());
}

#[test]
fn empty_or_own_only_set_gives_zero() {
    assert_eq!(gen_value(&ClassifierSet::new(), 0), 0.0);
    assert_eq!(gen_value(&heads(&[3]), 3), 0.0);
    assert!(gen_value(&heads(&[3]), 0) > 0.0);
}

#[test]
fn identical_foreign_heads_add_linearly() {
    let one = classifier_of(&init_mlp(&cfg(), 40).unwrap());
    let single = build_classifier_set(&[(1, one.clone())]).unwrap();
    let double = build_classifier_set(&[(1, one.clone()), (2, one)]).unwrap();
    let (a, b) = (gen_value(&single, 0), gen_value(&double, 0));
    assert!((b - 2.0 * a).abs() < 1e-12);
}

#[test]
fn inter_client_loss_matches_manual_cross_entropy() {
    let set = heads(&[1, 2]);
    let m = mlp();
    let p = init_mlp::<f64>(&cfg(), 1).unwrap();
    let (x, y) = batch(2, 12);
    let feats = m.forward(&p, &x, BnMode::Train).unwrap().features;
    let mut want = 0.0;
    for (_, h) in set.entries() {
        let w = h.get("head.weight").unwrap();
        let b = h.get("head.bias").unwrap();
        let z = feats.matmul(w).unwrap();
        for (r, &label) in y.iter().enumerate() {
            let logits: Vec<f64> = (0..4).map(|c| z.at(r, c) + b.data()[c]).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            want += (lse - logits[label]) / y.len() as f64;
        }
    }
    assert!((gen_value(&set, 0) - want).abs() < 1e-12);
}

#[test]
fn inter_client_loss_checks_contract_and_width() {
    let m = mlp();
    let p = init_mlp::<f64>(&cfg(), 1).unwrap();
    let (x, y) = batch(2, 6);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &p, true);
    let xv = tape.constant(x.clone());
    let out = m.forward_tape(&mut tape, &bound, &p, xv, BnMode::Train).unwrap();
    let wide = MlpConfig { hidden_widths: vec![7, 9], ..cfg() };
    let other = build_classifier_set(&[(1, classifier_of(&init_mlp(&wide, 3).unwrap()))]).unwrap();
    assert!(matches!(
        inter_client_loss(&mut tape, out.features, &other, 0, &y),
        Err(Error::Shape(_))
    ));
    let loose = ClassifierSet { entries: vec![(1, classifier_of(&init_mlp(&cfg(), 3).unwrap()))] };
    assert!(matches!(
        inter_client_loss(&mut tape, out.features, &loose, 0, &y),
        Err(Error::Contract(_))
    ));
}

#[test]
fn gradients_reach_the_extractor_only() {
    let set = heads(&[1, 2]);
    let m = mlp();
    let p = init_mlp::<f64>(&cfg(), 1).unwrap();
    let (x, y) = batch(3, 10);
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &p, true);
    let xv = tape.constant(x);
    let out = m.forward_tape(&mut tape, &bound, &p, xv, BnMode::Train).unwrap();
    let l = inter_client_loss(&mut tape, out.features, &set, 0, &y).unwrap();
    tape.backward(l).unwrap();
    let grads = bound.grads(&tape);
    let mut extractor_nonzero = false;
    for (name, g) in &grads {
        let part = p.role(name).unwrap().part;
        let nonzero = g.iter().any(|v| *v != 0.0);
        if part == Part::Classifier {
            assert!(!nonzero, "own head {name} got gradient from L_gen");
        } else {
            extractor_nonzero |= nonzero;
        }
    }
    assert!(extractor_nonzero);

    // Adaptation leaves the foreign heads untouched.
    let before = set.clone();
    let mut q = p.clone();
    let (x, y) = batch(4, 10);
    adaptation_step(&m, &mut q, &x, &y, &set, 0, 1.0, 0.1).unwrap();
    assert_eq!(set, before);
    assert!(!q.bitwise_eq(&p));
}

#[test]
fn adaptation_loss_reduces_to_cross_entropy() {
    let m = mlp();
    let p = init_mlp::<f64>(&cfg(), 5).unwrap();
    let (x, y) = batch(6, 8);
    let eval = |set: &ClassifierSet<f64>, mu: f64| {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &p, true);
        let xv = tape.constant(x.clone());
        let t = adaptation_loss(&mut tape, &m, &bound, &p, xv, &y, set, 0, mu).unwrap();
        (tape.value(t.loss).data()[0], t.ce, t.gen)
    };
    let (l0, ce0, g0) = eval(&heads(&[1, 2]), 0.0);
    assert_eq!(l0, ce0);
    assert_eq!(g0, 0.0);
    let (le, cee, _) = eval(&ClassifierSet::new(), 3.0);
    assert_eq!(le, cee);
    assert_eq!(le, l0);
    let (l1, ce1, g1) = eval(&heads(&[1, 2]), 1.0);
    assert!((l1 - (ce1 + g1)).abs() < 1e-12);
    let (l2, _, g2) = eval(&heads(&[1, 2]), 2.5);
    assert!((l2 - (ce1 + 2.5 * g2)).abs() < 1e-12);

    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &p, true);
    let xv = tape.constant(x.clone());
    assert!(adaptation_loss(&mut tape, &m, &bound, &p, xv, &y, &ClassifierSet::new(), 0, -1.0).is_err());
}

#[test]
fn mutual_step_with_matching_teacher_barely_moves() {
    let m = mlp();
    let on = init_mlp::<f64>(&cfg(), 7).unwrap();
    let off = init_mlp::<f64>(&cfg(), 8).unwrap();
    let (x, _) = batch(9, 10);
    // Each student's teacher is a frozen copy of the student itself.
    let (mut a, mut b) = (on.clone(), off.clone());
    let s = mutual_learning_step(&m, &mut a, &mut b, &clone_frozen(&off), &clone_frozen(&on), &x, 0.1).unwrap();
    assert!(s.kl_online.abs() < 1e-12 && s.kl_offline.abs() < 1e-12);
    for (n, t) in a.iter() {
        assert!(t.max_abs_diff(on.get(n).unwrap()) < 1e-8);
    }
    for (n, t) in b.iter() {
        assert!(t.max_abs_diff(off.get(n).unwrap()) < 1e-8);
    }
}

#[test]
fn mutual_step_with_zero_rate_is_identity_and_teachers_are_immutable() {
    let m = mlp();
    let on = init_mlp::<f64>(&cfg(), 7).unwrap();
    let off = init_mlp::<f64>(&cfg(), 8).unwrap();
    let (t_on, t_off) = (clone_frozen(&on), clone_frozen(&off));
    let (x, _) = batch(9, 10);
    let (mut a, mut b) = (on.clone(), off.clone());
    mutual_learning_step(&m, &mut a, &mut b, &t_on, &t_off, &x, 0.0).unwrap();
    assert!(a.bitwise_eq(&on) && b.bitwise_eq(&off));
    let (snap_on, snap_off) = (t_on.clone(), t_off.clone());
    for _ in 0..5 {
        mutual_learning_step(&m, &mut a, &mut b, &t_on, &t_off, &x, 0.1).unwrap();
    }
    assert!(t_on.bitwise_eq(&snap_on) && t_off.bitwise_eq(&snap_off));
    assert!(!a.bitwise_eq(&on));
    // Running statistics are not touched by distillation.
    for (n, t) in a.iter().filter(|(n, _)| a.is_buffer(n)) {
        assert!(t.bitwise_eq(on.get(n).unwrap()));
    }
}

#[test]
fn mutual_step_rejects_unfrozen_teachers() {
    let m = mlp();
    let on = init_mlp::<f64>(&cfg(), 7).unwrap();
    let (x, _) = batch(9, 4);
    let (mut a, mut b) = (on.clone(), on.clone());
    let r = mutual_learning_step(&m, &mut a, &mut b, &on, &clone_frozen(&on), &x, 0.1);
    assert!(matches!(r, Err(Error::Contract(_))));
    let r = mutual_learning_step(&m, &mut a, &mut b, &clone_frozen(&on), &on, &x, 0.1);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn mutual_step_is_a_descent_direction() {
    let m = mlp();
    for seed in 0..20 {
        let on = init_mlp::<f64>(&cfg(), 2 * seed).unwrap();
        let off = init_mlp::<f64>(&cfg(), 2 * seed + 1).unwrap();
        let (t_on, t_off) = (clone_frozen(&on), clone_frozen(&off));
        let (x, _) = batch(seed, 16);
        let (mut a, mut b) = (on.clone(), off.clone());
        let s = mutual_learning_step(&m, &mut a, &mut b, &t_on, &t_off, &x, 1e-3).unwrap();
        assert!(distillation_gap(&m, &a, &t_off, &x).unwrap() <= s.kl_online);
        assert!(distillation_gap(&m, &b, &t_on, &x).unwrap() <= s.kl_offline);
    }
}

#[test]
fn classifier_sets_are_frozen_copies() {
    let mut src = classifier_of(&init_mlp::<f64>(&cfg(), 1).unwrap());
    let set = build_classifier_set(&[(4, src.clone()), (1, src.clone())]).unwrap();
    assert_eq!(set.ids(), vec![1, 4]);
    src.get_mut("head.bias").unwrap().data_mut()[0] = 99.0;
    assert_ne!(set.get(1).unwrap().get("head.bias").unwrap().data()[0], 99.0);
    let mut entry = set.get(4).unwrap().clone();
    assert!(entry.all_frozen());
    assert!(entry.get_mut("head.weight").is_err());
    let before = entry.clone();
    let grads = entry.trainable_names().map(|n| (n.to_string(), vec![1.0])).collect();
    sgd_step(&mut entry, &grads, 1.0).unwrap();
    assert!(entry.bitwise_eq(&before));
    assert!(build_classifier_set::<f64>(&[]).unwrap().is_empty());
    assert!(matches!(
        build_classifier_set(&[(2, src.clone()), (2, src)]),
        Err(Error::Duplicate(_))
    ));
    assert_eq!(set.foreign(1).map(|(i, _)| *i).collect::<Vec<_>>(), vec![4]);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #[test]
    fn sum_and_mean_fusion_agree_on_argmax(
        on in proptest::collection::vec(-10.0f64..10.0, 6),
        off in proptest::collection::vec(-10.0f64..10.0, 6),
    ) {
        let a = Tensor::from_f64(&[1, 6], &on).unwrap();
        let b = Tensor::from_f64(&[1, 6], &off).unwrap();
        let s = fuse_predictions::<f64>(&a, &b, FusionRule::default()).unwrap();
        let m = fuse_predictions::<f64>(&a, &b, FusionRule::mean()).unwrap();
        prop_assert_eq!(argmax(s.data()), argmax(m.data()));
    }
}
