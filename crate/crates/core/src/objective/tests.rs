use super::*;
use crate::autodiff::{gradcheck, DEFAULT_STEP};
use crate::testutil::{rand_tensor, rng};
use proptest::prelude::*;
use rand::Rng;

fn eval(logits: &[f64], target: &[f64], shape: &[usize], f: fn(&Graph<f64>, Var, &Tensor<f64>) -> Result<Var>) -> f64 {
    let g = Graph::new();
    let x = g.constant(Tensor::from_f64(shape, logits).unwrap());
    g.item(f(&g, x, &Tensor::from_f64(shape, target).unwrap()).unwrap())
}

#[test]
fn dice_examples() {
    let y = [1.0, 1.0, 0.0, 0.0];
    assert!((eval(&[0.0; 4], &y, &[1, 2, 2, 1], dice_loss) - 0.4).abs() < 1e-12);

    let mut r = rng(1);
    let y: Vec<f64> = (0..64 * 64).map(|_| if r.gen::<f64>() < 0.1 { 1.0 } else { 0.0 }).collect();
    let hit: Vec<f64> = y.iter().map(|&t| if t > 0.5 { 40.0 } else { -40.0 }).collect();
    let miss: Vec<f64> = hit.iter().map(|x| -x).collect();
    assert!(eval(&hit, &y, &[1, 64, 64, 1], dice_loss) < 1e-3);
    assert!(eval(&miss, &y, &[1, 64, 64, 1], dice_loss) > 0.99);
}

#[test]
fn dice_is_averaged_per_sample() {
    // sample 0 perfect-ish, sample 1 the 0.4 case
    let logits = [40.0, -40.0, -40.0, -40.0, 0.0, 0.0, 0.0, 0.0];
    let y = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let l = eval(&logits, &y, &[2, 2, 2, 1], dice_loss);
    assert!((l - 0.5 * (0.0 + 0.4)).abs() < 1e-12);
}

#[test]
fn ce_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((eval(&[0.0; 3], &[1.0, 0.0, 1.0], &[3], ce_loss) - ln2).abs() < 1e-15);
    assert!(eval(&[60.0, -60.0], &[1.0, 0.0], &[2], ce_loss) < 1e-20);
    let x: [f64; 3] = [0.3, -1.7, 2.2];
    let y = [1.0, 0.0, 0.0];
    let want: f64 = x
        .iter()
        .zip(&y)
        .map(|(&x, &y)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 3.0;
    assert!((eval(&x, &y, &[3], ce_loss) - want).abs() < 1e-12);
}

#[test]
fn segmentation_loss_gradients_match_finite_differences() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[2, 3, 3, 1]).map(|v| 2.0 * v);
    let y = Tensor::new(&[2, 3, 3, 1], (0..18).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    for f in [dice_loss, ce_loss] {
        let rep = gradcheck(std::slice::from_ref(&x), DEFAULT_STEP, |g, v| f(g, v[0], &y)).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}

fn terms(g: &Graph<f64>, vals: [f64; 5]) -> (LossTerms, Vec<Var>) {
    let v: Vec<Var> = vals.iter().map(|&x| g.param(Tensor::scalar(x))).collect();
    (
        LossTerms {
            v2t: Some(v[0]),
            t2v: Some(v[1]),
            ccl: Some(v[2]),
            dice: v[3],
            ce: v[4],
        },
        v,
    )
}

#[test]
fn total_loss_examples() {
    let g = Graph::new();
    let w = LossWeights::default();
    let (t, _) = terms(&g, [0.0; 5]);
    assert_eq!(g.item(total_loss(&g, &t, &w).unwrap()), 0.0);
    let (t, _) = terms(&g, [1.0; 5]);
    assert!((g.item(total_loss(&g, &t, &w).unwrap()) - 12.2).abs() < 1e-12);
}

#[test]
fn zero_lambda_removes_a_term_from_the_gradient() {
    let g = Graph::new();
    let (t, v) = terms(&g, [0.3, 0.4, 0.5, 0.6, 0.7]);
    let w = LossWeights::from([1.0, 1.0, 0.0, 5.0]);
    let grads = g.backward(total_loss(&g, &t, &w).unwrap()).unwrap();
    let got: Vec<f64> = v.iter().map(|&x| grads.wrt(x).item()).collect();
    assert_eq!(got, vec![1.0, 1.0, 0.0, 5.0, 5.0]);
}

#[test]
fn negative_weights_are_rejected() {
    assert!(LossWeights::from([1.0, -1.0, 0.2, 5.0]).validate().is_err());
}

#[test]
fn total_loss_is_linear_in_each_term() {
    let w = LossWeights::default();
    let at = |vals: [f64; 5]| {
        let g = Graph::new();
        let (t, _) = terms(&g, vals);
        g.item(total_loss(&g, &t, &w).unwrap())
    };
    let base = [0.3, 0.4, 0.5, 0.6, 0.7];
    for i in 0..5 {
        let mut a = base;
        a[i] += 1.0;
        let mut b = base;
        b[i] += 2.0;
        let (d1, d2) = (at(a) - at(base), at(b) - at(a));
        assert!((d1 - d2).abs() < 1e-12);
    }
}

#[test]
fn metric_examples() {
    let y = [true, true, false, false, true, false];
    let m = metrics(&y, &y).unwrap();
    assert_eq!((m.dice, m.miou, m.dice_fg, m.iou_fg), (1.0, 1.0, 1.0, 1.0));

    let p = [true, true, false, false];
    let t = [false, false, true, true];
    assert_eq!(metrics(&p, &t).unwrap().iou_fg, 0.0);

    // half of a 4-pixel target covered, no false positives
    let p = [true, true, false, false, false, false];
    let t = [true, true, true, true, false, false];
    let m = metrics(&p, &t).unwrap();
    assert!((m.dice_fg - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.iou_fg, 0.5);

    // both empty counts as a perfect foreground score
    let m = metrics(&[false; 4], &[false; 4]).unwrap();
    assert_eq!(m.iou_fg, 1.0);
    assert!(metrics(&[true], &[true, false]).is_err());
}

#[test]
fn report_aggregates_and_writes_csv() {
    let a = metrics(&[true, false], &[true, true]).unwrap();
    let b = metrics(&[true, true], &[true, true]).unwrap();
    let r = MetricReport::from_samples(vec!["s0".into(), "s1".into()], vec![a, b]);
    assert!((r.miou - 0.5 * (a.miou + b.miou)).abs() < 1e-15);
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sample_id,dice,miou"));
    assert_eq!(lines.count(), 2);
}

/// Set-based oracle: per-class IoU/Dice from explicit index sets.
fn oracle(p: &[bool], y: &[bool]) -> (f64, f64) {
    let score = |cls: bool| {
        let ps: std::collections::BTreeSet<usize> = (0..p.len()).filter(|&i| p[i] == cls).collect();
        let ys: std::collections::BTreeSet<usize> = (0..y.len()).filter(|&i| y[i] == cls).collect();
        let inter = ps.intersection(&ys).count();
        let union = ps.union(&ys).count();
        let dice = if ps.len() + ys.len() == 0 { 1.0 } else { 2.0 * inter as f64 / (ps.len() + ys.len()) as f64 };
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        (dice, iou)
    };
    let (f, b) = (score(true), score(false));
    ((f.0 + b.0) / 2.0, (f.1 + b.1) / 2.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metrics_match_pixel_counting(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let (p, y): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let m = metrics(&p, &y).unwrap();
        let (dice, miou) = oracle(&p, &y);
        prop_assert_eq!(m.dice, dice);
        prop_assert_eq!(m.miou, miou);
    }
}
