//! Confusion matrices and intersection-over-union.

use crate::data::{LabelMap, IGNORE};
use crate::error::{Error, Result};

/// `C x C` counts, rows are ground truth and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image; ignored ground-truth pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == IGNORE {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::Config(format!("class index out of range for {} classes", self.classes)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging confusion matrices of different sizes");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// Per-class IoU (`None` when a class is absent from both truth and
    /// prediction) and the mean over the defined classes.
    pub fn miou(&self) -> Result<MiouReport> {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let diag = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let denom = row + col - diag;
                (denom > 0).then(|| diag as f64 / denom as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::NoEvaluatedPixels);
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok(MiouReport { per_class, mean })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(data: Vec<u8>) -> LabelMap {
        let n = data.len();
        LabelMap::from_vec(1, n, data).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal_with_unit_miou() {
        let truth = map(vec![0, 1, 2, 3, 4, 0, 0]);
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&truth, &truth).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(cm.get(i, j) > 0, i == j);
            }
        }
        assert_eq!(cm.miou().unwrap().mean, 1.0);
    }

    #[test]
    fn ignored_truth_leaves_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&map(vec![0, 1, 2]), &map(vec![IGNORE; 3])).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
        assert!(matches!(cm.miou(), Err(Error::NoEvaluatedPixels)));
        assert!(cm.accumulate(&map(vec![0]), &map(vec![0, 1])).is_err());
    }

    #[test]
    fn hand_computed_two_class_example() {
        // cm = [[2, 2], [0, 4]]
        let truth = map(vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let pred = map(vec![0, 0, 1, 1, 1, 1, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (2, 2, 0, 4));
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(4.0 / 6.0)]);
        assert!((r.mean - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn constant_prediction_against_uniform_truth() {
        let c = 4;
        let truth = map((0..40).map(|i| (i % c) as u8).collect());
        let pred = map(vec![1; 40]);
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, &truth).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class[1], Some(1.0 / c as f64));
        assert_eq!(r.per_class[0], Some(0.0));
        assert!((r.mean - 0.25 / 4.0).abs() < 1e-15);
    }

    fn loop_oracle(pred: &[u8], truth: &[u8], c: usize) -> Vec<u64> {
        let mut counts = vec![0; c * c];
        for i in 0..pred.len() {
            if truth[i] != IGNORE {
                counts[truth[i] as usize * c + pred[i] as usize] += 1;
            }
        }
        counts
    }

    #[test]
    fn random_pairs_match_loop_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let pred: Vec<u8> = (0..100).map(|_| rng.random_range(0..5)).collect();
            let truth: Vec<u8> = (0..100).map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..5) }).collect();
            let mut cm = ConfusionMatrix::new(5);
            cm.accumulate(&map(pred.clone()), &map(truth.clone())).unwrap();
            assert_eq!(cm.counts, loop_oracle(&pred, &truth, 5));
            assert_eq!(cm.total(), truth.iter().filter(|&&t| t != IGNORE).count() as u64);
        }
    }

    proptest! {
        #[test]
        fn permuting_classes_permutes_iou(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<u8> = (0..60).map(|_| rng.random_range(0..5)).collect();
            let truth: Vec<u8> = (0..60).map(|_| rng.random_range(0..5)).collect();
            let mut perm: Vec<u8> = (0..5).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let mut a = ConfusionMatrix::new(5);
            a.accumulate(&map(pred.clone()), &map(truth.clone())).unwrap();
            let mut b = ConfusionMatrix::new(5);
            b.accumulate(
                &map(pred.iter().map(|&v| perm[v as usize]).collect()),
                &map(truth.iter().map(|&v| perm[v as usize]).collect()),
            ).unwrap();
            let (ra, rb) = (a.miou().unwrap(), b.miou().unwrap());
            prop_assert!((ra.mean - rb.mean).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ra.mean));
            for k in 0..5 {
                prop_assert_eq!(ra.per_class[k], rb.per_class[perm[k] as usize]);
            }
        }

        #[test]
        fn accumulation_order_does_not_matter(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<(LabelMap, LabelMap)> = (0..4)
                .map(|_| (map((0..10).map(|_| rng.random_range(0..3)).collect()), map((0..10).map(|_| rng.random_range(0..3)).collect())))
                .collect();
            let mut fwd = ConfusionMatrix::new(3);
            pairs.iter().for_each(|(p, t)| fwd.accumulate(p, t).unwrap());
            let mut rev = ConfusionMatrix::new(3);
            pairs.iter().rev().for_each(|(p, t)| rev.accumulate(p, t).unwrap());
            let mut merged = ConfusionMatrix::new(3);
            for (p, t) in &pairs {
                let mut one = ConfusionMatrix::new(3);
                one.accumulate(p, t).unwrap();
                merged.merge(&one);
            }
            prop_assert_eq!(&fwd, &rev);
            prop_assert_eq!(&fwd, &merged);
        }
    }
}
