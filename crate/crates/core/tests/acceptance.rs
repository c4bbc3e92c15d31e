//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; `cargo test --test acceptance -- 2 3`
//! runs a subset. Exits nonzero if any selected criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedfuse::autodiff::{concat, finite_diff_check, Tape, Var};
use fedfuse::client_trainer::{gt_segments, set_loss, supervised_loss, train_client, SetLossConfig, TrainConfig};
use fedfuse::dataset_io::label_files_in;
use fedfuse::distill::{
    distill_global, distill_into, distill_objective, kl_cls_loss, mask_distill_loss, teacher_logits,
    teacher_logits_on, DiceDenominator, DistillConfig, TeacherBundle,
};
use fedfuse::harness::{run_ablation, run_experiment, Axis, ExperimentConfig, Run, FEDAVG_MODEL, GLOBAL_MODEL};
use fedfuse::inconsistency::{
    class_proportions, inconsistency_scores, predict_pseudo_labels, select_unstable, ClassProportionMatrix,
    DEFAULT_EPS,
};
use fedfuse::matching::hungarian_match;
use fedfuse::metrics::{pixel_agreement, ConfusionMatrix};
use fedfuse::optim::AdamWConfig;
use fedfuse::params::BoundParams;
use fedfuse::scenegen::{make_domain, DomainSpec};
use fedfuse::segmodel::{semantic_inference, LabelMap, LogitPair, SegModel, SegModelConfig, IGNORE};
use fedfuse::{Error, Result, Tensor};

type Outcome = std::result::Result<String, String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `sum(out * w)` with fixed pseudo-random weights, so every output entry
/// contributes with a different coefficient.
fn project<'t>(out: Var<'t>) -> Result<Var<'t>> {
    let shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = random_tensor(&shape, &mut rng, 1.0);
    Ok(out.mul(out.tape().constant(w))?.sum_all()?)
}

fn tiny_model() -> SegModelConfig {
    // 2 x 4 x 4 features, 3 queries
    SegModelConfig {
        num_classes: 3,
        num_queries: 3,
        feature_channels: 2,
        backbone_depth: 1,
        embed_dim: 4,
        height: 8,
        width: 8,
    }
}

fn random_labels(h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

fn bind<'t>(model: &SegModel, name: &str, tape: &'t Tape, v: Var<'t>) -> BoundParams<'t> {
    let mut p = model.params.on_tape(tape, false);
    p.replace(name, v);
    p
}

struct FdTally {
    checks: usize,
    worst: f64,
    worst_name: String,
}

impl FdTally {
    fn record(&mut self, name: &str, err: f64) {
        self.checks += 1;
        if err > self.worst || err.is_nan() {
            self.worst = err;
            self.worst_name = name.to_string();
        }
    }
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-6;
    // attention projections have entries near 1e-8; a 1e-6 step leaves
    // them dominated by roundoff
    const H_MODEL: f64 = 1e-4;
    let mut t = FdTally {
        checks: 0,
        worst: 0.0,
        worst_name: String::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..3 {
        let a = random_tensor(&[3, 4], &mut rng, 1.0);
        let b = random_tensor(&[3, 4], &mut rng, 1.0);
        let pos = a.map(|v| v.abs() + 0.5);
        let m = random_tensor(&[4, 2], &mut rng, 1.0);
        let img = random_tensor(&[2, 4, 4], &mut rng, 1.0);
        let wconv = random_tensor(&[2, 2, 3, 3], &mut rng, 0.5);
        let bconv = random_tensor(&[2], &mut rng, 0.5);
        let row = random_tensor(&[4], &mut rng, 1.0);
        macro_rules! check {
            ($name:expr, $x:expr, |$tape:ident, $v:ident| $body:expr) => {{
                let err = finite_diff_check(
                    |$tape: &Tape, $v: Var<'_>| -> Result<Var<'_>> { project($body) },
                    &$x,
                    H,
                )
                .map_err(fail)?;
                t.record(&format!("{} #{trial}", $name), err);
            }};
        }
        check!("add", a, |tp, v| v.add(tp.constant(b.clone()))?);
        check!("sub", a, |tp, v| tp.constant(b.clone()).sub(v)?);
        check!("mul", a, |tp, v| v.mul(tp.constant(b.clone()))?);
        check!("div/numerator", a, |tp, v| v.div(tp.constant(pos.clone()))?);
        check!("div/denominator", pos, |tp, v| tp.constant(b.clone()).div(v)?);
        check!("scale", a, |_tp, v| v.scale(-1.7)?);
        check!("add_scalar", a, |_tp, v| v.add_scalar(0.3)?.mul(v)?);
        check!("neg", a, |_tp, v| v.neg()?.mul(v)?);
        check!("matmul/left", a, |tp, v| v.matmul(tp.constant(m.clone()))?);
        check!("matmul/right", m, |tp, v| tp.constant(a.clone()).matmul(v)?);
        check!("conv2d/input", img, |tp, v| v.conv2d(tp.constant(wconv.clone()), Some(tp.constant(bconv.clone())), 1)?);
        check!("conv2d/weight", wconv, |tp, v| tp.constant(img.clone()).conv2d(v, Some(tp.constant(bconv.clone())), 2)?);
        check!("conv2d/bias", bconv, |tp, v| tp.constant(img.clone()).conv2d(tp.constant(wconv.clone()), Some(v), 1)?);
        check!("relu", a, |_tp, v| v.relu()?);
        check!("sigmoid", a, |_tp, v| v.sigmoid()?);
        check!("softplus", a, |_tp, v| v.softplus()?);
        check!("softmax", a, |_tp, v| v.softmax(1)?);
        check!("log_softmax", a, |_tp, v| v.log_softmax(0)?);
        check!("exp", a, |_tp, v| v.exp()?);
        check!("ln", pos, |_tp, v| v.ln()?);
        check!("sum_axis", a, |_tp, v| v.sum_axis(0)?);
        check!("mean_axis", a, |_tp, v| v.mean_axis(1)?);
        check!("reshape", a, |_tp, v| v.reshape(&[2, 6])?.softmax(1)?);
        check!("transpose", a, |tp, v| v.transpose()?.matmul(tp.constant(b.clone()))?);
        check!("broadcast", row, |_tp, v| v.broadcast(&[3, 4])?.sigmoid()?);
        check!("sum_all", a, |_tp, v| v.mul(v)?.sum_all()?);
        check!("mean_all", a, |_tp, v| v.exp()?.mean_all()?);
        check!("concat", a, |tp, v| concat(&[v, tp.constant(b.clone()), v], 0)?);
    }

    let loss_cfg = SetLossConfig::default();
    let model_cfg = tiny_model();
    for trial in 0..3 {
        // set-prediction loss with respect to both heads
        let labels = random_labels(8, 8, 3, &mut rng);
        let gt = gt_segments(&labels, 4, 4, 3).map_err(fail)?;
        let cls = random_tensor(&[3, 4], &mut rng, 2.0);
        let mask = random_tensor(&[3, 4, 4], &mut rng, 2.0);
        let err = finite_diff_check(|tp: &Tape, v: Var<'_>| -> Result<Var<'_>> { Ok(set_loss(v, tp.constant(mask.clone()), &gt, &loss_cfg)?.0) }, &cls, H).map_err(fail)?;
        t.record(&format!("set_loss/cls #{trial}"), err);
        let err = finite_diff_check(|tp: &Tape, v: Var<'_>| -> Result<Var<'_>> { Ok(set_loss(tp.constant(cls.clone()), v, &gt, &loss_cfg)?.0) }, &mask, H).map_err(fail)?;
        t.record(&format!("set_loss/mask #{trial}"), err);

        // distillation terms
        let teacher_cls = random_tensor(&[3, 4], &mut rng, 2.0);
        let teacher_mask = random_tensor(&[3, 4, 4], &mut rng, 2.0);
        let tau = rng.random_range(0.5..2.0);
        let err = finite_diff_check(|_tp: &Tape, v: Var<'_>| kl_cls_loss(&teacher_cls, v, tau), &cls, H).map_err(fail)?;
        t.record(&format!("kl_cls_loss #{trial}"), err);
        for den in [DiceDenominator::Linear, DiceDenominator::Squared] {
            let err = finite_diff_check(
                |_tp: &Tape, v: Var<'_>| -> Result<Var<'_>> {
                    let (b, d) = mask_distill_loss(&teacher_mask, v, den)?;
                    Ok(b.add(d)?)
                },
                &mask,
                H,
            )
            .map_err(fail)?;
            t.record(&format!("mask_distill_loss/{den:?} #{trial}"), err);
        }

        // full model: supervised and distillation objectives per parameter tensor
        let model = SegModel::init(model_cfg, 40 + trial).map_err(fail)?;
        let image = random_tensor(&[3, 8, 8], &mut rng, 1.0).map(|v| v.abs());
        let bundle = TeacherBundle {
            cls: teacher_cls.clone(),
            mask: teacher_mask.clone(),
            queries_per_client: 3,
            clients: 1,
        };
        let distill_cfg = DistillConfig::default();
        for (name, _) in model_cfg.param_layout() {
            let x = model.params.get(&name).unwrap().clone();
            let err = finite_diff_check(
                |tp: &Tape, v: Var<'_>| -> Result<Var<'_>> {
                    let p = bind(&model, &name, tp, v);
                    Ok(supervised_loss(&model, tp, &p, &image, &gt, &loss_cfg)?.0)
                },
                &x,
                H_MODEL,
            )
            .map_err(fail)?;
            t.record(&format!("model/supervised/{name} #{trial}"), err);
            let err = finite_diff_check(
                |tp: &Tape, v: Var<'_>| -> Result<Var<'_>> {
                    let p = bind(&model, &name, tp, v);
                    let (c, m) = model.forward_on(&p, tp.constant(image.clone()))?;
                    Ok(distill_objective(c, m, &bundle, &distill_cfg)?.0)
                },
                &x,
                H_MODEL,
            )
            .map_err(fail)?;
            t.record(&format!("model/distill/{name} #{trial}"), err);
        }
    }
    let detail = format!("{} checks, worst relative error {:.2e} ({})", t.checks, t.worst, t.worst_name);
    if t.worst <= TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 2

fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let (n, m) = (cost.len(), cost[0].len());
    // assign the smaller side injectively into the larger one
    let (small, large, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if n <= m {
        (n, m, Box::new(|i, j| cost[i][j]))
    } else {
        (m, n, Box::new(|i, j| cost[j][i]))
    };
    fn go(k: usize, small: usize, large: usize, used: &mut Vec<bool>, acc: f64, at: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
        if k == small {
            *best = best.min(acc);
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                go(k + 1, small, large, used, acc + at(k, j), at, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, small, large, &mut vec![false; large], 0.0, &*at, &mut best);
    best
}

fn set_iou(pred: &LabelMap, gt: &LabelMap, class: u8) -> Option<f64> {
    let valid = |i: &usize| gt.ids[*i] != IGNORE;
    let p: HashSet<usize> = (0..pred.ids.len()).filter(valid).filter(|&i| pred.ids[i] == class).collect();
    let g: HashSet<usize> = (0..gt.ids.len()).filter(valid).filter(|&i| gt.ids[i] == class).collect();
    let union = p.union(&g).count();
    (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
}

fn scoring_oracle(logits: &LogitPair, out_h: usize, out_w: usize) -> Vec<u8> {
    let (q, width) = (logits.cls.shape()[0], logits.cls.shape()[1]);
    let (mh, mw) = (logits.mask.shape()[1], logits.mask.shape()[2]);
    let c = width - 1;
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            let (fy, fx) = (y * mh / out_h, x * mw / out_w);
            let mut best = (0u8, f64::NEG_INFINITY);
            for class in 0..c {
                let mut score = 0.0;
                for qi in 0..q {
                    let row = &logits.cls.data()[qi * width..(qi + 1) * width];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    let p = (row[class] - mx).exp() / z;
                    let m = logits.mask.data()[qi * mh * mw + fy * mw + fx];
                    score += p / (1.0 + (-m).exp());
                }
                if score > best.1 {
                    best = (class as u8, score);
                }
            }
            out.push(best.0);
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..1000 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let pairs = hungarian_match(&cost).map_err(fail)?;
        let rows: HashSet<usize> = pairs.iter().map(|p| p.0).collect();
        let cols: HashSet<usize> = pairs.iter().map(|p| p.1).collect();
        if pairs.len() != n.min(m) || rows.len() != pairs.len() || cols.len() != pairs.len() {
            return Err(format!("matrix {trial} ({n}x{m}): invalid assignment {pairs:?}"));
        }
        let got: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        let want = brute_force_assignment(&cost);
        if (got - want).abs() > 1e-9 {
            return Err(format!("matrix {trial} ({n}x{m}): cost {got} vs brute force {want}"));
        }
    }
    for trial in 0..100 {
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
        let c = rng.random_range(2..6u8);
        let pred = random_labels(h, w, c, &mut rng);
        let mut gt = random_labels(h, w, c, &mut rng);
        for id in gt.ids.iter_mut() {
            if rng.random_bool(0.1) {
                *id = IGNORE;
            }
        }
        let mut cm = ConfusionMatrix::new(c as usize);
        cm.accumulate(&pred, &gt).map_err(fail)?;
        let iou = cm.iou();
        for class in 0..c {
            let want = set_iou(&pred, &gt, class);
            let got = iou[class as usize];
            let same = match (got, want) {
                (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            if !same {
                return Err(format!("label pair {trial}, class {class}: {got:?} vs set-based {want:?}"));
            }
        }
    }
    for trial in 0..100 {
        let q = rng.random_range(1..=4);
        let c = rng.random_range(2..=5);
        let (mh, mw) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let k = rng.random_range(1..=3);
        let logits = LogitPair {
            cls: random_tensor(&[q, c + 1], &mut rng, 3.0),
            mask: random_tensor(&[q, mh, mw], &mut rng, 3.0),
        };
        let got = semantic_inference(&logits, mh * k, mw * k).map_err(fail)?;
        if got.ids != scoring_oracle(&logits, mh * k, mw * k) {
            return Err(format!("logit pair {trial}: semantic inference disagrees with the scoring loop"));
        }
    }
    Ok("1000 assignments, 100 IoU label pairs, 100 semantic-inference logit pairs".into())
}

// ---------------------------------------------------------------- 3

/// Scalar re-implementation: proportions, population sigma, gamma.
fn gamma_oracle(counts: &[Vec<u64>], eps: f64) -> Vec<f64> {
    let m = counts[0].len();
    let rows: Vec<Vec<f64>> = counts
        .iter()
        .filter(|r| r.iter().sum::<u64>() > 0)
        .map(|r| {
            let total: u64 = r.iter().sum();
            r.iter().map(|&v| v as f64 / total as f64).collect()
        })
        .collect();
    let k = rows.len() as f64;
    (0..m)
        .map(|j| {
            if rows.is_empty() {
                return 0.0;
            }
            let mut mu = 0.0;
            for r in &rows {
                mu += r[j];
            }
            mu /= k;
            let mut var = 0.0;
            for r in &rows {
                var += (r[j] - mu) * (r[j] - mu);
            }
            let sigma = (var / k).sqrt();
            if sigma == 0.0 {
                0.0
            } else {
                sigma / (mu + eps)
            }
        })
        .collect()
}

fn criterion_3() -> Outcome {
    // p1 = [0.2, 0.8], p2 = [0.4, 0.6]
    let p = ClassProportionMatrix::from_counts(vec![3, 4], vec![vec![1, 4], vec![2, 3]]).map_err(fail)?;
    let report = inconsistency_scores(&p, 0.0, 1.0).map_err(fail)?;
    let want = [1.0 / 3.0, 1.0 / 7.0];
    for (g, w) in report.gamma.iter().zip(want) {
        if (g - w).abs() > 1e-12 {
            return Err(format!("worked example: gamma {:?}, expected {want:?}", report.gamma));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for trial in 0..500 {
        let k = rng.random_range(2..=6);
        let m = rng.random_range(1..=5);
        let counts: Vec<Vec<u64>> = (0..k)
            .map(|_| (0..m).map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(0..1000) }).collect())
            .collect();
        let eps = if rng.random_bool(0.5) { 0.0 } else { DEFAULT_EPS };
        let classes: Vec<u8> = (0..m as u8).collect();
        let p = ClassProportionMatrix::from_counts(classes.clone(), counts.clone()).map_err(fail)?;
        let got = inconsistency_scores(&p, eps, 0.5).map_err(fail)?;
        for (g, w) in got.gamma.iter().zip(gamma_oracle(&counts, eps)) {
            let err = (g - w).abs();
            if !(err <= 1e-12) {
                return Err(format!("instance {trial}: gamma {g} vs oracle {w}"));
            }
            worst = worst.max(err);
        }
        // a class whose gamma equals the threshold is not selected
        if let Some(j) = got.gamma.iter().position(|&g| g > 0.0) {
            let at = inconsistency_scores(&p, eps, got.gamma[j]).map_err(fail)?;
            if at.unstable.contains(&classes[j]) {
                return Err(format!("instance {trial}: gamma == threshold was selected"));
            }
        }
    }
    if select_unstable(&[3, 4, 5], &[0.5, 0.5000000001, 0.2], 0.5) != [4] {
        return Err("threshold comparison is not strict".into());
    }
    Ok(format!("worked example exact, 500 random instances within {worst:.1e}, strict threshold"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::new();
    for _ in 0..20 {
        let t = random_tensor(&[5, 7], &mut rng, 4.0);
        let kl = kl_cls_loss(&t, tape.constant(t.clone()), rng.random_range(0.5..3.0)).map_err(fail)?.item();
        if kl.abs() > 1e-12 {
            return Err(format!("KL(t, t) = {kl}"));
        }
    }

    let client_cfg = SegModelConfig {
        height: 16,
        width: 16,
        num_queries: 2,
        ..tiny_model()
    };
    let mut spec = DomainSpec::street("identity", 16, vec![0.0, 0.0, 0.3]);
    spec.palette.truncate(3);
    spec.class_freq = vec![0.0, 0.0, 1.0];
    let data = make_domain(&spec, 6, 4).map_err(fail)?.without_labels();
    let clients = [SegModel::init(client_cfg, 1).map_err(fail)?, SegModel::init(client_cfg, 2).map_err(fail)?];
    let zero = DistillConfig {
        lambda_cls: 0.0,
        lambda_mask: 0.0,
        iterations: 5,
        ..DistillConfig::default()
    };
    let mut student = SegModel::init(client_cfg.with_queries(4), 3).map_err(fail)?;
    let before = student.clone();
    distill_into(&mut student, &clients, &data, &zero, 0).map_err(fail)?;
    if student != before {
        return Err("zero-weight distillation changed the student".into());
    }

    // teacher parameters bound as trainable still receive no gradient
    let image = &data.scenes[0].image;
    let tape = Tape::new();
    let bound: Vec<BoundParams<'_>> = clients.iter().map(|c| c.params.on_tape(&tape, true)).collect();
    let pairs: Vec<(&SegModel, &BoundParams<'_>)> = clients.iter().zip(&bound).collect();
    let x = tape.constant(image.clone());
    let (t_cls, t_mask) = teacher_logits_on(&pairs, x, true).map_err(fail)?;
    let bundle = TeacherBundle {
        cls: t_cls.value(),
        mask: t_mask.value(),
        queries_per_client: 2,
        clients: 2,
    };
    let sp = student.params.on_tape(&tape, true);
    let (s_cls, s_mask) = student.forward_on(&sp, x).map_err(fail)?;
    let (loss, _) = distill_objective(s_cls, s_mask, &bundle, &DistillConfig::default()).map_err(fail)?;
    let grads = tape.backward(loss).map_err(fail)?;
    for (c, b) in clients.iter().zip(&bound) {
        if let Some(name) = c.params.names().find(|n| grads.get(b.var(n)).is_some()) {
            return Err(format!("teacher parameter `{name}` received a gradient"));
        }
    }

    for k in [2, 3, 4] {
        let one = teacher_logits(std::slice::from_ref(&clients[0]), image, true).map_err(fail)?;
        let many = teacher_logits(&vec![clients[0].clone(); k], image, true).map_err(fail)?;
        let q = client_cfg.num_queries;
        let (cw, plane) = (one.cls.shape()[1], one.mask.len() / q);
        for block in 0..k {
            let cls_rows = &many.cls.data()[block * q * cw..(block + 1) * q * cw];
            let mask_rows = &many.mask.data()[block * q * plane..(block + 1) * q * plane];
            if cls_rows != one.cls.data() || mask_rows != one.mask.data() {
                return Err(format!("K={k} identical clients: block {block} differs from the single bundle"));
            }
        }
    }
    Ok("KL(t,t)=0, zero-weight no-op, no teacher gradients, identical-client bundles tile exactly".into())
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let model_cfg = SegModelConfig::default();
    let fast = AdamWConfig::with_lr(3e-3);
    let mut teacher_spec = DomainSpec::street("teacher_domain", 32, vec![0.0, 0.0, 0.0, 0.4, 0.3, 0.3]);
    teacher_spec.color_shift = [0.03, -0.02, 0.0];
    let teacher_data = make_domain(&teacher_spec, 300, 50).map_err(fail)?;
    let train = TrainConfig {
        iterations: 600,
        batch_size: 4,
        optimizer: fast,
        ..TrainConfig::default()
    };
    let (teacher, _) = train_client(&teacher_data, model_cfg, &train, 51, 52).map_err(fail)?;
    let mut server_spec = DomainSpec::street("self_server", 32, vec![0.0, 0.0, 0.0, 0.4, 0.3, 0.3]);
    server_spec.color_shift = [-0.02, 0.02, 0.03];
    let server = make_domain(&server_spec, 200, 53).map_err(fail)?.without_labels();
    let probes = make_domain(&server_spec, 50, 54).map_err(fail)?;
    let cfg = DistillConfig {
        iterations: 2000,
        optimizer: fast,
        ..DistillConfig::default()
    };
    let (student, _) = distill_global(std::slice::from_ref(&teacher), &server, model_cfg, &cfg, 55, 56).map_err(fail)?;
    let seg = |m: &SegModel| probes.images().map(|im| m.segment(im)).collect::<Result<Vec<_>>>();
    let agreement = pixel_agreement(&seg(&student).map_err(fail)?, &seg(&teacher).map_err(fail)?).map_err(fail)?;
    let detail = format!("student/teacher pixel agreement {:.2}% on 50 probes (need > 90%)", 100.0 * agreement);
    if agreement > 0.9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 6, 7, 9

const SEEDS: [u64; 3] = [0, 1, 2];

struct ToyRuns {
    root: tempfile::TempDir,
    done: BTreeMap<u64, PathBuf>,
}

impl ToyRuns {
    fn new() -> Self {
        ToyRuns {
            root: tempfile::tempdir().expect("temp dir"),
            done: BTreeMap::new(),
        }
    }

    fn config(&self, seed: u64, dir: &str) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            output_dir: self.root.path().join(dir),
            ..ExperimentConfig::toy()
        }
    }

    fn run(&mut self, seed: u64) -> Result<PathBuf> {
        if let Some(dir) = self.done.get(&seed) {
            return Ok(dir.clone());
        }
        let cfg = self.config(seed, &format!("seed_{seed}"));
        let dir = cfg.output_dir.clone();
        run_experiment(cfg)?;
        self.done.insert(seed, dir.clone());
        Ok(dir)
    }
}

fn averages(dir: &Path, seed: u64) -> Result<BTreeMap<String, f64>> {
    let cfg = ExperimentConfig {
        seed,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::toy()
    };
    let run = Run::open(cfg)?;
    Ok(run
        .summaries()?
        .into_iter()
        .map(|s| (s.model, 100.0 * s.summary.average_miou))
        .collect())
}

fn criterion_6(runs: &mut ToyRuns) -> Outcome {
    let mut lines = Vec::new();
    let (mut a_ok, mut b_ok) = (0, 0);
    for seed in SEEDS {
        let dir = runs.run(seed).map_err(fail)?;
        let avg = averages(&dir, seed).map_err(fail)?;
        let global = avg[GLOBAL_MODEL];
        let fedavg = avg[FEDAVG_MODEL];
        let (best_name, best) = avg
            .iter()
            .filter(|(k, _)| k.as_str() != GLOBAL_MODEL && k.as_str() != FEDAVG_MODEL)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.clone(), *v))
            .ok_or("no client rows")?;
        let a = global >= best;
        let b = global >= fedavg;
        a_ok += usize::from(a);
        b_ok += usize::from(b);
        lines.push(format!(
            "seed {seed}: global {global:.1}, best client {best_name} {best:.1}, FedAvg {fedavg:.1} [(a) {} (b) {}]",
            if a { "ok" } else { "no" },
            if b { "ok" } else { "no" }
        ));
    }
    let detail = format!("(a) {a_ok}/3 seeds, (b) {b_ok}/3 seeds; {}", lines.join("; "));
    if a_ok >= 2 && b_ok == 3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(runs: &mut ToyRuns) -> Outcome {
    let seed = SEEDS[0];
    runs.run(seed).map_err(fail)?;
    let cfg = runs.config(seed, &format!("seed_{seed}"));
    let results = run_ablation(cfg, &Axis::ALL).map_err(fail)?;
    let row = |name: &str| {
        results
            .iter()
            .find(|r| r.row.name == name)
            .map(|r| 100.0 * r.summary.average_miou)
            .ok_or_else(|| format!("missing ablation row {name}"))
    };
    let table: Vec<String> = results
        .iter()
        .map(|r| format!("{} {:.1}", r.row.name, 100.0 * r.summary.average_miou))
        .collect();
    let (full, dice_only, all_losses) = (row("full")?, row("KL+Dice")?, row("KL+BCE+Dice")?);
    let detail = format!(
        "seed {seed}: {}; Dice-only is {:.1} below full (need >= 10), KL+BCE+Dice - Dice-only = {:.1}",
        table.join(", "),
        full - dice_only,
        all_losses - dice_only
    );
    if full - dice_only >= 10.0 && all_losses >= dice_only {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Outcome {
    let model_cfg = SegModelConfig::default();
    let train = TrainConfig {
        iterations: 400,
        batch_size: 4,
        optimizer: AdamWConfig::with_lr(3e-3),
        ..TrainConfig::default()
    };
    // class 5 is absent from the third client only
    let freqs = [[0.35, 0.35, 0.30], [0.30, 0.30, 0.40], [0.55, 0.45, 0.0]];
    let shifts = [[0.05, 0.0, -0.03], [-0.04, 0.03, 0.0], [0.0, -0.04, 0.05]];
    let mut clients = Vec::new();
    for (i, (f, s)) in freqs.iter().zip(shifts).enumerate() {
        let mut spec = DomainSpec::street(&format!("detect_{i}"), 32, vec![0.0, 0.0, 0.0, f[0], f[1], f[2]]);
        spec.color_shift = s;
        let data = make_domain(&spec, 200, 80 + i as u64).map_err(fail)?;
        clients.push(train_client(&data, model_cfg, &train, 7, 90 + i as u64).map_err(fail)?.0);
    }
    let server_spec = DomainSpec::street("detect_server", 32, vec![0.0, 0.0, 0.0, 0.4, 0.3, 0.3]);
    let server = make_domain(&server_spec, 100, 99).map_err(fail)?.without_labels();
    let labels = predict_pseudo_labels(&clients, &server).map_err(fail)?;
    let classes = [3u8, 4, 5];
    let p = class_proportions(&labels, &classes).map_err(fail)?;
    let report = inconsistency_scores(&p, DEFAULT_EPS, f64::INFINITY).map_err(fail)?;
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| report.gamma[b].total_cmp(&report.gamma[a]));
    let (top, runner_up) = (order[0], order[1]);
    let detail = format!("gamma {:?} for classes {classes:?}", report.gamma.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>());
    if classes[top] != 5 || report.gamma[top] <= report.gamma[runner_up] {
        return Err(format!("{detail}: class 5 is not the unique maximum"));
    }
    let threshold = 0.5 * (report.gamma[top] + report.gamma[runner_up]);
    let selected = select_unstable(&classes, &report.gamma, threshold);
    if selected != [5] {
        return Err(format!("{detail}: threshold {threshold:.3} selects {selected:?}"));
    }
    Ok(format!("{detail}; threshold {threshold:.3} selects [5]"))
}

fn read_reports(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.join("reports")];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::Contract(format!("{}: {e}", d.display())))? {
            let path = entry.map_err(|e| Error::Contract(e.to_string()))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") && !path.ends_with("ablation.csv") {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).map_err(|e| Error::Contract(e.to_string()))?);
            }
        }
    }
    Ok(out)
}

fn criterion_9(runs: &mut ToyRuns) -> Outcome {
    let seed = SEEDS[0];
    let first = runs.run(seed).map_err(fail)?;
    let cfg = runs.config(seed, "seed_0_repeat");
    let second = cfg.output_dir.clone();
    run_experiment(cfg).map_err(fail)?;
    let (a, b) = (read_reports(&first).map_err(fail)?, read_reports(&second).map_err(fail)?);
    if a.is_empty() || a != b {
        let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
        return Err(format!("report CSVs differ between identical runs: {differing:?}"));
    }
    for dir in [&first, &second] {
        let run = Run::open(runs.config(seed, dir.file_name().unwrap().to_str().unwrap())).map_err(fail)?;
        let writes = &run.manifest.checkpoint_writes;
        let clients: Vec<String> = run.cfg.clients.iter().map(|c| c.id.clone()).collect();
        if clients.iter().any(|c| writes.get(c) != Some(&1)) || writes.len() != clients.len() + 2 || writes.values().any(|&n| n != 1) {
            return Err(format!("checkpoint write counts {writes:?}"));
        }
        let server_dir = run.data_dir(&run.cfg.server.id);
        let labels = label_files_in(&server_dir).map_err(fail)?;
        if !labels.is_empty() {
            return Err(format!("{} label files in the server set", labels.len()));
        }
        if run.manifest.completed_stages() != 6 {
            return Err("pipeline did not complete".into());
        }
    }
    // resuming a finished run executes nothing
    let before = Run::open(runs.config(seed, "seed_0_repeat")).map_err(fail)?.manifest;
    let after = run_experiment(runs.config(seed, "seed_0_repeat")).map_err(fail)?;
    if before != after {
        return Err("rerunning a completed run changed its manifest".into());
    }
    Ok(format!(
        "{} report CSVs byte-identical across two runs; each of 5 checkpoints written once; no server label files; rerun is a no-op",
        a.len()
    ))
}

// ---------------------------------------------------------------- driver

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut runs = ToyRuns::new();
    let mut failures = 0;
    let mut crit_6_7 = Duration::ZERO;
    type Criterion<'a> = (u32, &'a str, Duration, Box<dyn FnMut(&mut ToyRuns) -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "gradient correctness", Duration::from_secs(60), Box::new(|_| criterion_1())),
        (2, "oracle equivalence", Duration::from_secs(60), Box::new(|_| criterion_2())),
        (3, "inconsistency arithmetic", Duration::from_secs(10), Box::new(|_| criterion_3())),
        (4, "distillation identities", Duration::from_secs(10), Box::new(|_| criterion_4())),
        (5, "self-distillation sanity", Duration::from_secs(600), Box::new(|_| criterion_5())),
        (6, "global vs clients and FedAvg", Duration::from_secs(1800), Box::new(criterion_6)),
        (7, "loss ablation", Duration::from_secs(1800), Box::new(criterion_7)),
        (8, "unstable-class detection", Duration::from_secs(120), Box::new(|_| criterion_8())),
        (9, "determinism and one-shot contract", Duration::from_secs(1800), Box::new(criterion_9)),
    ];
    for (n, name, budget, mut check) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = check(&mut runs);
        let elapsed = start.elapsed();
        // criteria 6 and 7 share one budget
        let over = if n == 6 || n == 7 {
            crit_6_7 += elapsed;
            crit_6_7 > budget
        } else {
            elapsed > budget
        };
        let (ok, detail) = match outcome {
            Ok(d) if over => (false, format!("{d}; over the {}s budget", budget.as_secs())),
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        failures += usize::from(!ok);
        println!(
            "[{}] criterion {n} ({name}): {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
