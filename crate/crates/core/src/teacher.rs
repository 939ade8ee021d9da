//! Mean teacher: an exponential moving average of the student that labels
//! clean unlabeled images and scores how confident those labels are.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::{argmax_labels, Params};
use crate::numerics::{softmax_channel_values, Real, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_TAU: f64 = 0.968;

#[derive(Clone, Debug)]
pub struct TeacherState<T> {
    pub params: Params<T>,
    alpha: f64,
    tau: f64,
    step: usize,
}

impl<T: Real> TeacherState<T> {
    /// Starts as an exact copy of the student.
    pub fn new(student: &Params<T>, alpha: f64, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {alpha}")));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("confidence threshold must lie in (0, 1), got {tau}")));
        }
        Ok(TeacherState { params: student.clone(), alpha, tau, step: 0 })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
    pub fn ema_update(&mut self, student: &Params<T>) -> Result<()> {
        if student.arch != self.params.arch || student.tensors.len() != self.params.tensors.len() {
            return Err(Error::Shape("student and teacher parameter layouts differ".into()));
        }
        let a = T::of(self.alpha);
        let b = T::of(1.0 - self.alpha);
        for ((_, phi), (_, theta)) in self.params.tensors.iter_mut().zip(&student.tensors) {
            if phi.shape() != theta.shape() {
                return Err(Error::Shape(format!("EMA pair {:?} vs {:?}", phi.shape(), theta.shape())));
            }
            phi.data_mut().iter_mut().zip(theta.data()).for_each(|(p, &t)| *p = a * *p + b * t);
        }
        self.step += 1;
        Ok(())
    }

    /// Pseudo-labels and quality for a batch of clean images `[N, 3, H, W]`.
    /// Runs without recording any gradient state.
    pub fn pseudo_label(&self, images: &Tensor<T>) -> Result<Vec<(LabelMap, f64)>> {
        let probs = softmax_channel_values(&self.params.infer(images)?);
        let qualities = quality(&probs, self.tau);
        Ok(argmax_labels(&probs).into_iter().zip(qualities).collect())
    }
}

/// Fraction of pixels per image whose maximum class probability exceeds
/// `tau` strictly, for probabilities `[N, C, H, W]`.
pub fn quality<T: Real>(probs: &Tensor<T>, tau: f64) -> Vec<f64> {
    let [n, c, h, w] = probs.dims4();
    let hw = h * w;
    let tau = T::of(tau);
    (0..n)
        .map(|i| {
            let confident = (0..hw)
                .filter(|&p| {
                    let top = (0..c).map(|ch| probs.data()[(i * c + ch) * hw + p]).fold(T::neg_infinity(), T::max);
                    top > tau
                })
                .count();
            confident as f64 / hw as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Architecture {
        Architecture::new(3, &[2], 3).unwrap()
    }

    fn filled(value: f64) -> Params<f64> {
        let mut p = Params::zeros(arch());
        p.tensors.iter_mut().for_each(|(_, t)| t.data_mut().fill(value));
        p
    }

    #[test]
    fn ema_single_step_at_default_alpha() {
        let mut t = TeacherState::new(&filled(0.0), 0.99, DEFAULT_TAU).unwrap();
        t.ema_update(&filled(1.0)).unwrap();
        for (_, x) in &t.params.tensors {
            assert!(x.data().iter().all(|&v| (v - 0.01).abs() < 1e-15));
        }
        assert_eq!(t.step(), 1);
    }

    #[test]
    fn zero_alpha_copies_student() {
        let mut t = TeacherState::new(&filled(0.3), 0.0, DEFAULT_TAU).unwrap();
        t.ema_update(&filled(-2.5)).unwrap();
        assert_eq!(t.params, filled(-2.5));
    }

    #[test]
    fn ema_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut phi0 = Params::<f64>::init(1, arch());
        phi0.tensors.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0)));
        let theta = Params::<f64>::init(2, arch());
        let alpha = 0.9;
        let mut t = TeacherState::new(&phi0, alpha, DEFAULT_TAU).unwrap();
        for _ in 0..50 {
            t.ema_update(&theta).unwrap();
        }
        let decay = alpha.powi(50);
        for (((_, got), (_, th)), (_, p0)) in t.params.tensors.iter().zip(&theta.tensors).zip(&phi0.tensors) {
            for ((g, th), p0) in got.data().iter().zip(th.data()).zip(p0.data()) {
                assert!((g - (th + decay * (p0 - th))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_bad_hyperparameters_and_layouts() {
        assert!(TeacherState::new(&filled(0.0), 1.0, 0.5).is_err());
        assert!(TeacherState::new(&filled(0.0), 0.5, 1.0).is_err());
        let mut t = TeacherState::new(&filled(0.0), 0.5, 0.5).unwrap();
        let other = Params::<f64>::zeros(Architecture::new(3, &[4], 3).unwrap());
        assert!(t.ema_update(&other).is_err());
    }

    fn probs_with_max(maxes: &[f64]) -> Tensor<f64> {
        // two classes; first channel carries the maximum
        let n = maxes.len();
        let mut data = maxes.to_vec();
        data.extend(maxes.iter().map(|m| 1.0 - m));
        Tensor::from_vec(&[1, 2, 1, n], data).unwrap()
    }

    #[test]
    fn quality_counts_confident_fraction() {
        assert_eq!(quality(&probs_with_max(&[0.99, 0.99, 0.99, 0.5]), 0.968), vec![0.75]);
        assert_eq!(quality(&probs_with_max(&[0.99, 0.999, 0.98]), 0.968), vec![1.0]);
        // strict inequality at the threshold
        assert_eq!(quality(&probs_with_max(&[0.75, 0.8]), 0.75), vec![0.5]);
    }

    #[test]
    fn quality_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Tensor<f64> = Tensor::from_vec(&[1, 5, 16, 16], (0..1280).map(|_| rng.random_range(-6.0..6.0)).collect()).unwrap();
        let probs = softmax_channel_values(&logits);
        let mut count = 0;
        for p in 0..256 {
            let denom: f64 = (0..5).map(|c| logits.data()[c * 256 + p].exp()).sum();
            let top = (0..5).map(|c| logits.data()[c * 256 + p].exp() / denom).fold(0.0, f64::max);
            if top > 0.968 {
                count += 1;
            }
        }
        assert_eq!(quality(&probs, 0.968)[0], count as f64 / 256.0);
    }

    #[test]
    fn pseudo_labels_follow_teacher_prediction() {
        let student = Params::<f64>::init(4, arch());
        let t = TeacherState::new(&student, 0.99, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let out = t.pseudo_label(&x).unwrap();
        let labels = student.predict(&x).unwrap();
        for ((l, q), expected) in out.iter().zip(labels) {
            assert_eq!(l, &expected);
            assert!((0.0..=1.0).contains(q));
        }
    }

    proptest! {
        #[test]
        fn quality_is_bounded_and_monotone_in_tau(seed in 0u64..1000, t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::from_vec(&[2, 4, 4, 4], (0..128).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            let probs = softmax_channel_values(&logits);
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            for (a, b) in quality(&probs, lo).into_iter().zip(quality(&probs, hi)) {
                prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
                prop_assert!(a >= b);
            }
        }

        #[test]
        fn ema_stays_within_bounds(seed in 0u64..1000, alpha in 0.0f64..0.999) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut phi = Params::<f64>::zeros(arch());
            let mut theta = Params::<f64>::zeros(arch());
            for p in [&mut phi, &mut theta] {
                p.tensors.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..3.0)));
            }
            let mut t = TeacherState::new(&phi, alpha, 0.5).unwrap();
            t.ema_update(&theta).unwrap();
            for (_, x) in &t.params.tensors {
                prop_assert!(x.data().iter().all(|&v| (-2.0..=3.0).contains(&v)));
            }
        }
    }
}
