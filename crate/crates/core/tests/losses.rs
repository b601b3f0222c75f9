use cdkd::losses::{argmax_rows, cd_loss, ce_loss, channel_weights, gkd_loss, kd_loss, total_loss, LossBreakdown};
use cdkd::oracle::{oracle_gkd, oracle_kd};
use cdkd::optim::{edt_weight, EdtParams};
use cdkd::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn logits_strategy(n: usize, k: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-6.0f32..6.0, n * k)
}

/// Labels that the teacher gets wrong on every row.
fn wrong_labels(teacher: &Tensor, k: usize) -> Vec<usize> {
    argmax_rows(teacher).iter().map(|&p| (p + 1) % k).collect()
}

#[test]
fn cd_of_identical_features_is_zero_with_zero_gradient() {
    let tape = Tape::new();
    let x = t(&[3, 5, 4, 4], (0..240).map(|i| ((i * 37 % 17) as f32 - 8.0) / 3.0).collect()).with_requires_grad();
    let xs = tape.leaf(&x);
    let xt = tape.constant(x.detached());
    let loss = cd_loss(&channel_weights(xs).unwrap(), &channel_weights(xt).unwrap()).unwrap();
    assert_eq!(loss.item(), 0.0);
    tape.backward(loss).unwrap();
    assert!(tape.grad(xs).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn cd_two_channel_example() {
    let tape = Tape::new();
    let ws = tape.constant(t(&[1, 2, 1, 1], vec![1.0, 0.0]));
    let wt = tape.constant(t(&[1, 2, 1, 1], vec![0.0, 1.0]));
    let loss = cd_loss(&channel_weights(ws).unwrap(), &channel_weights(wt).unwrap()).unwrap();
    assert_eq!(loss.item(), 1.0);
}

#[test]
fn kd_of_saturated_teacher_against_uniform_student_is_ln2() {
    let tape = Tape::new();
    let s = tape.constant(t(&[1, 2], vec![0.0, 0.0]));
    let te = tape.constant(t(&[1, 2], vec![200.0, 0.0]));
    let v = kd_loss(s, te, 1.0).unwrap().item() as f64;
    assert!((v - std::f64::consts::LN_2).abs() < 1e-6, "{v}");
}

#[test]
fn ce_limits() {
    let tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros([3, 7]));
    let v = ce_loss(uniform, &[0, 3, 6]).unwrap().item() as f64;
    assert!((v - 7f64.ln()).abs() < 1e-6);
    let mut confident = vec![0.0f32; 6];
    confident[1] = 50.0;
    confident[3 + 2] = 50.0;
    let v = ce_loss(tape.constant(t(&[2, 3], confident)), &[1, 2]).unwrap().item();
    assert!(v <= 1e-6);
}

#[test]
fn gkd_with_teacher_wrong_everywhere_is_exactly_zero() {
    let tape = Tape::new();
    let teacher = t(&[4, 3], vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0]);
    let labels = wrong_labels(&teacher, 3);
    let s = t(&[4, 3], (0..12).map(|i| i as f32 * 0.3).collect()).with_requires_grad();
    let sv = tape.leaf(&s);
    let (loss, correct) = gkd_loss(sv, tape.constant(teacher), &labels, 4.0).unwrap();
    assert_eq!((loss.item(), correct), (0.0, 0));
}

#[test]
fn gkd_single_correct_row_matches_that_rows_kl() {
    let tape = Tape::new();
    let s = vec![0.3, -1.0, 0.5, 2.0, 0.1, -0.4];
    let te = vec![1.5, 0.2, -0.3, 0.0, 0.7, 0.1];
    let labels = [0, 0];
    let (loss, correct) = gkd_loss(tape.constant(t(&[2, 3], s.clone())), tape.constant(t(&[2, 3], te.clone())), &labels, 2.0).unwrap();
    assert_eq!(correct, 1);
    let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let row0 = oracle_kd(&f(&s[..3]), &f(&te[..3]), 1, 3, 2.0);
    assert!((loss.item() as f64 - row0).abs() < 1e-6);
    let masked = oracle_gkd(&f(&s), &f(&te), &labels, 2, 3, 2.0);
    assert!((masked - row0).abs() < 1e-12);
}

#[test]
fn teacher_argmax_ties_go_to_the_lowest_index() {
    assert_eq!(argmax_rows(&t(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0])), vec![0, 1]);
}

#[test]
fn total_loss_example() {
    let tape = Tape::new();
    let c = |v: f32| tape.constant(Tensor::scalar(v));
    let (total, b) = total_loss(&tape, &[c(0.4), c(0.6)], c(0.2), c(1.0), 0.5, 2).unwrap();
    assert!((total.item() as f64 - 1.45).abs() < 1e-6);
    assert!(b.identity_residual() <= 1e-6);
    let (total, _) = total_loss(&tape, &[c(0.4)], c(0.2), c(1.0), 0.0, 0).unwrap();
    assert!((total.item() - 1.2).abs() < 1e-6);
    assert!(total_loss(&tape, &[], c(0.0), c(1.0), 0.5, 0).is_err());
    assert!(LossBreakdown::compose(&[], 0.0, 1.0, -1.0, 0).is_err());
}

#[test]
fn edt_examples() {
    let p = EdtParams {
        alpha: 1.0,
        lambda: 0.5,
        n_decay: 30,
        stepwise: false,
    };
    assert_eq!(edt_weight(&p, 0), 1.0);
    assert!((edt_weight(&p, 30) - 0.5).abs() < 1e-12);
    assert!((edt_weight(&p, 15) - 0.5f64.sqrt()).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative(s in logits_strategy(4, 5), te in logits_strategy(4, 5), labels in prop::collection::vec(0usize..5, 4), temp in 0.5f32..8.0) {
        let tape = Tape::new();
        let sv = tape.constant(t(&[4, 5], s.clone()));
        let tv = tape.constant(t(&[4, 5], te.clone()));
        prop_assert!(kd_loss(sv, tv, temp).unwrap().item() >= 0.0);
        prop_assert!(gkd_loss(sv, tv, &labels, temp).unwrap().0.item() >= 0.0);
        prop_assert!(ce_loss(sv, &labels).unwrap().item() >= 0.0);
        let a = tape.constant(t(&[4, 5, 1, 1], s));
        let b = tape.constant(t(&[4, 5, 1, 1], te));
        prop_assert!(cd_loss(&channel_weights(a).unwrap(), &channel_weights(b).unwrap()).unwrap().item() >= 0.0);
    }

    #[test]
    fn gkd_equals_kd_when_teacher_is_always_right(s in logits_strategy(6, 4), te in logits_strategy(6, 4), temp in 0.5f32..8.0) {
        let tape = Tape::new();
        let teacher = t(&[6, 4], te);
        let labels = argmax_rows(&teacher);
        let sv = tape.constant(t(&[6, 4], s));
        let tv = tape.constant(teacher);
        let (g, correct) = gkd_loss(sv, tv, &labels, temp).unwrap();
        prop_assert_eq!(correct, 6);
        prop_assert_eq!(g.item().to_bits(), kd_loss(sv, tv, temp).unwrap().item().to_bits());
    }

    #[test]
    fn gkd_ignores_student_rows_where_the_teacher_is_wrong(
        s in logits_strategy(6, 4),
        te in logits_strategy(6, 4),
        wrong in prop::collection::vec(any::<bool>(), 6),
        noise in logits_strategy(6, 4),
    ) {
        let teacher = t(&[6, 4], te);
        let pred = argmax_rows(&teacher);
        let labels: Vec<usize> = pred.iter().zip(&wrong).map(|(&p, &w)| if w { (p + 1) % 4 } else { p }).collect();
        let mut perturbed = s.clone();
        for (i, &w) in wrong.iter().enumerate() {
            if w {
                for j in 0..4 {
                    perturbed[i * 4 + j] += noise[i * 4 + j];
                }
            }
        }
        let eval = |logits: Vec<f32>| {
            let tape = Tape::new();
            let x = t(&[6, 4], logits).with_requires_grad();
            let xv = tape.leaf(&x);
            let (loss, _) = gkd_loss(xv, tape.constant(teacher.clone()), &labels, 3.0).unwrap();
            let v = loss.item();
            let g = if loss.requires_grad() {
                tape.backward(loss).unwrap();
                tape.grad(xv).unwrap().data().to_vec()
            } else {
                vec![0.0; 24]
            };
            (v, g)
        };
        let (v0, g0) = eval(s);
        let (v1, g1) = eval(perturbed);
        prop_assert_eq!(v0.to_bits(), v1.to_bits());
        for (i, &w) in wrong.iter().enumerate() {
            if w {
                prop_assert!(g0[i * 4..i * 4 + 4].iter().all(|&g| g == 0.0));
                prop_assert!(g1[i * 4..i * 4 + 4].iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn gkd_invariant_to_teacher_row_shifts(s in logits_strategy(5, 4), te in logits_strategy(5, 4), shifts in prop::collection::vec(-20.0f32..20.0, 5)) {
        let tape = Tape::new();
        let teacher = t(&[5, 4], te.clone());
        let labels = argmax_rows(&teacher);
        let shifted: Vec<f32> = te.iter().enumerate().map(|(i, &v)| v + shifts[i / 4]).collect();
        let sv = tape.constant(t(&[5, 4], s));
        let (a, ca) = gkd_loss(sv, tape.constant(teacher), &labels, 4.0).unwrap();
        let (b, cb) = gkd_loss(sv, tape.constant(t(&[5, 4], shifted)), &labels, 4.0).unwrap();
        prop_assert_eq!(ca, cb);
        prop_assert!((a.item() - b.item()).abs() <= 1e-6);
    }

    #[test]
    fn edt_is_non_increasing(alpha in 0.0f64..5.0, lambda in 0.01f64..=1.0, n_decay in 1usize..50, stepwise in any::<bool>()) {
        let p = EdtParams { alpha, lambda, n_decay, stepwise };
        prop_assert_eq!(edt_weight(&p, 0), alpha);
        for e in 0..120 {
            prop_assert!(edt_weight(&p, e + 1) <= edt_weight(&p, e));
        }
    }
}
