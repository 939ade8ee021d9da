//! Release gate: gradient checks on every differentiable operation and on the
//! full training objective, plus loop oracles for mixing, the EMA teacher,
//! the quality estimate, the loss arithmetic and mIoU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Domain, LabelMap, Sample, IGNORE};
use crate::eval::ConfusionMatrix;
use crate::losses::{ce_loss, ce_loss_weighted, total_loss, StreamLosses};
use crate::mixing::{build_mask, compose_strategy, mix, select_classes, Pseudo, Stream, Strategy};
use crate::model::{Architecture, Params};
use crate::numerics::{grad_check_with_fault, softmax_channel_values, Graph, OpKind, Tensor, Var};
use crate::teacher::{quality, TeacherState};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
pub const INSTANCES: usize = 20;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    /// Differentiable operations the check depends on.
    pub uses: Vec<OpKind>,
    pub passed: bool,
    pub detail: String,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// Values kept at least 0.05 away from zero so ReLU kinks stay out of the
/// finite-difference stencil.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

fn random_labels(n: usize, classes: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n).map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..classes) }).collect()
}

fn grad_check_op(
    name: &'static str,
    uses: &[OpKind],
    fault: Option<OpKind>,
    mut instance: impl FnMut(&mut ChaCha8Rng) -> (Box<dyn Fn(&mut Graph<f64>, Var) -> Var>, Tensor<f64>),
) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6C4 + name.len() as u64);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (f, x) = instance(&mut rng);
        worst = worst.max(grad_check_with_fault(f, &x, GRAD_EPS, fault));
    }
    Check {
        name,
        uses: uses.to_vec(),
        passed: worst < GRAD_TOLERANCE,
        detail: format!("max relative error {worst:.2e} over {INSTANCES} instances"),
    }
}

/// `sum(y * r)` for a fixed random `r`, which exercises every output entry.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Var {
    let rv = g.constant(r.clone());
    let m = g.mul(y, rv).expect("shapes agree");
    g.sum(m)
}

fn gradient_checks(fault: Option<OpKind>) -> Vec<Check> {
    use OpKind::*;
    let mut out = Vec::new();
    out.push(grad_check_op("grad.conv2d", &[Conv2d, Mul, Sum], fault, |rng| {
        let (x, w, b, r) = (off_kink(&[2, 2, 5, 5], rng), random(&[3, 2, 3, 3], rng), random(&[3], rng), random(&[2, 3, 5, 5], rng));
        let which = rng.random_range(0..3);
        let target = [&x, &w, &b][which].clone();
        let f = move |g: &mut Graph<f64>, v: Var| {
            let mut leaves = [None, None, None];
            leaves[which] = Some(v);
            let [xv, wv, bv] = [&x, &w, &b].map(|t| t.clone()).map(|t| g.constant(t));
            let pick = |k: usize, c: Var| leaves[k].unwrap_or(c);
            let y = g.conv2d(pick(0, xv), pick(1, wv), pick(2, bv)).expect("conv shapes");
            project(g, y, &r)
        };
        (Box::new(f), target)
    }));
    out.push(grad_check_op("grad.relu", &[Relu, Mul, Sum], fault, |rng| {
        let (x, r) = (off_kink(&[2, 3, 4, 4], rng), random(&[2, 3, 4, 4], rng));
        let f = move |g: &mut Graph<f64>, v: Var| {
            let y = g.relu(v);
            project(g, y, &r)
        };
        (Box::new(f), x)
    }));
    out.push(grad_check_op("grad.softmax", &[SoftmaxChannel, Mul, Sum], fault, |rng| {
        let (x, r) = (random(&[2, 4, 3, 3], rng), random(&[2, 4, 3, 3], rng));
        let f = move |g: &mut Graph<f64>, v: Var| {
            let y = g.softmax_channel(v).expect("4-d input");
            project(g, y, &r)
        };
        (Box::new(f), x)
    }));
    out.push(grad_check_op("grad.cross_entropy", &[CrossEntropy], fault, |rng| {
        let x = random(&[2, 4, 3, 3], rng);
        let labels = random_labels(18, 4, rng);
        let weights = vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let f = move |g: &mut Graph<f64>, v: Var| g.cross_entropy(v, &labels, &weights).expect("labels in range");
        (Box::new(f), x)
    }));
    out.push(grad_check_op("grad.mul", &[Mul, Sum], fault, |rng| {
        let (x, y) = (random(&[3, 4], rng), random(&[3, 4], rng));
        let f = move |g: &mut Graph<f64>, v: Var| {
            let c = g.constant(y.clone());
            let a = g.mul(v, c).expect("shapes agree");
            let b = g.mul(a, v).expect("shapes agree");
            g.sum(b)
        };
        (Box::new(f), x)
    }));
    out.push(grad_check_op("grad.add", &[Add, Mul, Sum], fault, |rng| {
        let (x, y, r) = (random(&[3, 4], rng), random(&[3, 4], rng), random(&[3, 4], rng));
        let f = move |g: &mut Graph<f64>, v: Var| {
            let c = g.constant(y.clone());
            let a = g.add(v, c).expect("shapes agree");
            project(g, a, &r)
        };
        (Box::new(f), x)
    }));
    out.push(grad_check_op("grad.scale", &[Scale, Mul, Sum], fault, |rng| {
        let (x, r, s) = (random(&[3, 4], rng), random(&[3, 4], rng), rng.random_range(-2.0..2.0));
        let f = move |g: &mut Graph<f64>, v: Var| {
            let a = g.scale(v, s);
            project(g, a, &r)
        };
        (Box::new(f), x)
    }));
    out.push(grad_check_op("grad.sum", &[Sum], fault, |rng| {
        let x = random(&[5, 3], rng);
        (Box::new(|g: &mut Graph<f64>, v: Var| g.sum(v)), x)
    }));
    out.push(grad_check_op("grad.objective", &[Conv2d, Relu, CrossEntropy, Scale, Add], fault, objective_instance));
    out
}

/// Full four-stream objective on a tiny model, differentiated with respect
/// to one randomly chosen parameter tensor.
fn objective_instance(rng: &mut ChaCha8Rng) -> (Box<dyn Fn(&mut Graph<f64>, Var) -> Var>, Tensor<f64>) {
    let arch = Architecture::new(3, &[4], 3).expect("valid");
    let mut params = Params::<f64>::init(rng.random(), arch);
    for (_, t) in params.tensors.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let which = rng.random_range(0..params.tensors.len());
    let images: Vec<Tensor<f64>> = (0..4).map(|_| random(&[2, 3, 8, 8], rng)).collect();
    let labels: Vec<Vec<LabelMap>> = (0..4)
        .map(|_| (0..2).map(|_| LabelMap::from_vec(8, 8, random_labels(64, 3, rng)).expect("sized")).collect())
        .collect();
    let q: Vec<[f64; 2]> = (0..2).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let target = params.tensors[which].1.clone();
    let f = move |g: &mut Graph<f64>, v: Var| {
        let vars: Vec<Var> =
            params.tensors.iter().enumerate().map(|(i, (_, t))| if i == which { v } else { g.constant(t.clone()) }).collect();
        let stream = |g: &mut Graph<f64>, k: usize| {
            let x = g.constant(images[k].clone());
            params.forward(g, &vars, x).expect("model forward")
        };
        let ls = stream(g, 0);
        let ls = ce_loss(g, ls, &labels[0], 1.0).expect("ce");
        let lt = stream(g, 1);
        let lt = ce_loss(g, lt, &labels[1], 1.0).expect("ce");
        let li = stream(g, 2);
        let li = ce_loss_weighted(g, li, &labels[2], &q[0]).expect("ce");
        let la = stream(g, 3);
        let la = ce_loss_weighted(g, la, &labels[3], &q[1]).expect("ce");
        let streams = StreamLosses { source: Some(ls), labeled_target: Some(lt), inter: Some(li), intra: Some(la) };
        total_loss(g, streams, 1.0, 2.0).expect("weights").0
    };
    (Box::new(f), target)
}

fn status(name: &'static str, failures: Vec<String>, total: usize) -> Check {
    Check {
        name,
        uses: Vec::new(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() { format!("{total} instances agree") } else { failures.join("; ") },
    }
}

fn sample(image: Tensor<f32>, label: LabelMap, domain: Domain, id: u32) -> Sample {
    Sample { image, label: Some(label), domain, id }
}

fn random_image(rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| rng.random::<f32>()).collect()).expect("sized")
}

fn random_label_map(rng: &mut ChaCha8Rng) -> LabelMap {
    let classes = rng.random_range(1..=5);
    LabelMap::from_vec(8, 8, (0..64).map(|_| rng.random_range(0..classes)).collect()).expect("sized")
}

/// Pixel loop: donor where `classes` contains the donor label, recipient elsewhere.
fn loop_mix(donor: &Sample, recipient_img: &Tensor<f32>, recipient_lbl: &LabelMap, classes: &[u8]) -> (Vec<f32>, Vec<u8>, Vec<bool>) {
    let mut image = recipient_img.data().to_vec();
    let mut label = recipient_lbl.data().to_vec();
    let mut mask = vec![false; 64];
    for y in 0..8 {
        for x in 0..8 {
            let p = y * 8 + x;
            if classes.contains(&donor.truth().get(y, x)) {
                mask[p] = true;
                label[p] = donor.truth().get(y, x);
                for c in 0..3 {
                    image[c * 64 + p] = donor.image.data()[c * 64 + p];
                }
            }
        }
    }
    (image, label, mask)
}

fn mixing_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x313);
    let mut failures = Vec::new();
    for i in 0..200 {
        let src = sample(random_image(&mut rng), random_label_map(&mut rng), Domain::Source, 0);
        let tgt = sample(random_image(&mut rng), random_label_map(&mut rng), Domain::Target, 1);
        let (u_img, u_lbl) = (random_image(&mut rng), random_label_map(&mut rng));
        let (u2_img, u2_lbl) = (random_image(&mut rng), random_label_map(&mut rng));
        let seed = rng.random::<u64>();

        let mut draw = ChaCha8Rng::seed_from_u64(seed);
        let c1 = select_classes(src.truth(), &mut draw).expect("classes present");
        let c2 = select_classes(tgt.truth(), &mut draw).expect("classes present");
        for (classes, donor) in [(&c1, &src), (&c2, &tgt)] {
            let present = donor.truth().classes_present();
            if classes.len() != present.len().div_ceil(2) || !classes.iter().all(|c| present.contains(c)) {
                failures.push(format!("instance {i}: selected {classes:?} from {present:?}"));
            }
        }
        let m1 = build_mask(src.truth(), &c1);
        let (img, lbl) = mix(&src.image, src.truth(), &u_img, &u_lbl, &m1).expect("shapes agree");
        let (ei, el, em) = loop_mix(&src, &u_img, &u_lbl, &c1);
        if img.data() != &ei[..] || lbl.data() != &el[..] || m1.data() != &em[..] {
            failures.push(format!("instance {i}: mix disagrees with the pixel loop"));
        }

        let pseudo = [
            Pseudo { image: &u_img, id: 7, label: &u_lbl, quality: 0.5 },
            Pseudo { image: &u2_img, id: 8, label: &u2_lbl, quality: 0.25 },
        ];
        for strategy in Strategy::ALL {
            let mut draw = ChaCha8Rng::seed_from_u64(seed);
            let batches = compose_strategy(strategy, &src, &tgt, &pseudo, &mut draw).expect("compose");
            let (inter_img, inter_lbl, _) = loop_mix(&src, &u_img, &u_lbl, &c1);
            let expected: Vec<(Vec<f32>, Vec<u8>, Stream, f64)> = match strategy {
                Strategy::OneXuTwoStreams => {
                    let (b, l, _) = loop_mix(&tgt, &u_img, &u_lbl, &c2);
                    vec![(inter_img, inter_lbl, Stream::Inter, 0.5), (b, l, Stream::Intra, 0.5)]
                }
                Strategy::TwoXuTwoStreams => {
                    let (b, l, _) = loop_mix(&tgt, &u2_img, &u2_lbl, &c2);
                    vec![(inter_img, inter_lbl, Stream::Inter, 0.5), (b, l, Stream::Intra, 0.25)]
                }
                Strategy::OneXuOneStream => {
                    let mid_img = Tensor::from_vec(&[3, 8, 8], inter_img).expect("sized");
                    let mid_lbl = LabelMap::from_vec(8, 8, inter_lbl).expect("sized");
                    let (b, l, _) = loop_mix(&tgt, &mid_img, &mid_lbl, &c2);
                    vec![(b, l, Stream::Combined, 0.5)]
                }
            };
            let agree = batches.len() == expected.len()
                && batches.iter().zip(&expected).all(|(b, (img, lbl, stream, q))| {
                    b.image.data() == &img[..] && b.label.data() == &lbl[..] && b.stream == *stream && b.quality == *q
                });
            if !agree {
                failures.push(format!("instance {i}: {} disagrees with the pixel loop", strategy.name()));
            }
        }
    }
    status("mixing", failures, 200)
}

fn ema_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE3A);
    let arch = Architecture::new(3, &[4, 4], 5).expect("valid");
    let student = Params::<f64>::init(1, arch.clone());
    let start = Params::<f64>::init(2, arch);
    let alpha = rng.random_range(0.5..0.999);
    let mut teacher = TeacherState::new(&start, alpha, 0.5).expect("valid");
    let mut worst = 0.0f64;
    for _ in 0..50 {
        teacher.ema_update(&student).expect("same layout");
    }
    let an = alpha.powi(50);
    for (((_, phi), (_, phi0)), (_, theta)) in teacher.params.tensors.iter().zip(&start.tensors).zip(&student.tensors) {
        for ((&p, &p0), &t) in phi.data().iter().zip(phi0.data()).zip(theta.data()) {
            worst = worst.max((p - (t + an * (p0 - t))).abs());
        }
    }
    let passed = worst < 1e-10;
    Check { name: "ema", uses: Vec::new(), passed, detail: format!("50 steps at alpha {alpha:.4}: max deviation {worst:.2e}") }
}

fn quality_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9A);
    let mut failures = Vec::new();
    let (c, h, w) = (5, 6, 6);
    for i in 0..200 {
        let spread = rng.random_range(1.0..12.0);
        let tau = rng.random_range(0.3..0.99);
        let logits: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-spread..spread)).collect();
        let probs = softmax_channel_values(&Tensor::from_vec(&[1, c, h, w], logits.clone()).expect("sized"));
        let mut confident = 0;
        for p in 0..h * w {
            let z: Vec<f64> = (0..c).map(|k| logits[k * h * w + p]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
            if 1.0 / denom > tau {
                confident += 1;
            }
        }
        let expected = confident as f64 / (h * w) as f64;
        let got = quality(&probs, tau)[0];
        if got != expected {
            failures.push(format!("map {i}: {got} vs {expected}"));
        }
    }
    status("quality", failures, 200)
}

fn loss_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let mut failures = Vec::new();
    let (n, c, hw) = (2, 4, 9);
    let loop_ce = |logits: &[f64], labels: &[u8], weights: &[f64]| {
        let (mut total, mut valid) = (0.0, 0usize);
        for i in 0..n {
            for p in 0..hw {
                let y = labels[i * hw + p];
                if y == IGNORE {
                    continue;
                }
                let z: Vec<f64> = (0..c).map(|k| logits[(i * c + k) * hw + p]).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += weights[if weights.len() == 1 { 0 } else { i }] * (lse - z[y as usize]);
                valid += 1;
            }
        }
        if valid == 0 {
            0.0
        } else {
            total / valid as f64
        }
    };
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    for i in 0..50 {
        let mut g = Graph::<f64>::new();
        let mut terms = Vec::new();
        let mut vars = Vec::new();
        for k in 0..4 {
            let logits = random(&[n, c, 3, 3], &mut rng);
            let labels: Vec<LabelMap> =
                (0..n).map(|_| LabelMap::from_vec(3, 3, random_labels(hw, c as u8, &mut rng)).expect("sized")).collect();
            let flat: Vec<u8> = labels.iter().flat_map(|l| l.data().to_vec()).collect();
            let weights: Vec<f64> = if k < 2 { vec![1.0] } else { (0..n).map(|_| rng.random_range(0.0..1.0)).collect() };
            let v = g.constant(logits.clone());
            let loss = if k < 2 { ce_loss(&mut g, v, &labels, 1.0) } else { ce_loss_weighted(&mut g, v, &labels, &weights) }
                .expect("valid labels");
            let expected = loop_ce(logits.data(), &flat, &weights);
            let got = g.value(loss).data()[0];
            if rel(got, expected) >= 1e-9 && (got - expected).abs() > 1e-12 {
                failures.push(format!("instance {i} stream {k}: {got} vs {expected}"));
            }
            terms.push(expected);
            vars.push(loss);
        }
        let (lambda, mu) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let streams = StreamLosses { source: Some(vars[0]), labeled_target: Some(vars[1]), inter: Some(vars[2]), intra: Some(vars[3]) };
        let (_, breakdown) = total_loss(&mut g, streams, lambda, mu).expect("valid weights");
        let direct = terms[0] + terms[1] + lambda * terms[2] + mu * terms[3];
        if rel(breakdown.total, direct) >= 1e-9 {
            failures.push(format!("instance {i}: total {} vs {direct}", breakdown.total));
        }
    }
    status("losses", failures, 50)
}

fn miou_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10);
    let mut failures = Vec::new();
    for i in 0..100 {
        let c = rng.random_range(2..6u8);
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..c)).collect();
        let truth = random_labels(64, c, &mut rng);
        let mut cm = ConfusionMatrix::new(c as usize);
        let to_map = |v: &[u8]| LabelMap::from_vec(8, 8, v.to_vec()).expect("sized");
        cm.accumulate(&to_map(&pred), &to_map(&truth)).expect("sized");
        let mut ious = Vec::new();
        for k in 0..c {
            let (mut inter, mut union) = (0, 0);
            for (&p, &t) in pred.iter().zip(&truth) {
                if t == IGNORE {
                    continue;
                }
                inter += (p == k && t == k) as usize;
                union += (p == k || t == k) as usize;
            }
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let expected = ious.iter().sum::<f64>() / ious.len() as f64;
        match cm.miou() {
            Ok(r) if (r.mean - expected).abs() < 1e-12 => {}
            other => failures.push(format!("instance {i}: {other:?} vs {expected}")),
        }
    }
    status("miou", failures, 100)
}

/// Every check, optionally with the backward rule of `fault` corrupted.
pub fn run_selfcheck(fault: Option<OpKind>) -> Vec<Check> {
    let mut checks = gradient_checks(fault);
    checks.extend([mixing_check(), ema_check(), quality_check(), loss_check(), miou_check()]);
    checks
}
