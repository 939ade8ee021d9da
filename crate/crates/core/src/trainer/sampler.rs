use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::seeds;

use super::config::TrainConfig;

/// Pool indices drawn for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub sources: Vec<usize>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Draws mini-batches from the three training pools, each pool with its own
/// random stream so that switching one stream off leaves the others intact.
///
/// Sources and unlabeled images are drawn uniformly with replacement.
/// Labeled target images cycle through reshuffled passes over the pool, or,
/// with class balancing on, are drawn by first picking a class uniformly and
/// then an image containing it.
pub struct BatchSampler {
    n_source: usize,
    n_unlabeled: usize,
    src_rng: ChaCha8Rng,
    lbl_rng: ChaCha8Rng,
    unl_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    by_class: Option<Vec<Vec<usize>>>,
    counts: (usize, usize, usize),
}

impl BatchSampler {
    pub fn new(split: &DatasetSplit, config: &TrainConfig) -> Result<Self> {
        let s = &config.switches;
        let need_src = s.use_ls || s.mixing();
        let need_lbl = s.use_lt || s.mixing();
        let empty = |name: &str| Err(Error::Config(format!("the {name} pool is empty but an enabled loss stream needs it")));
        if need_src && split.source.is_empty() {
            return empty("source");
        }
        if need_lbl && split.labeled_target.is_empty() {
            return empty("labeled target");
        }
        if s.mixing() && split.unlabeled_target.is_empty() {
            return empty("unlabeled target");
        }
        let by_class = config.class_balanced.then(|| {
            let mut lists = vec![Vec::new(); 256];
            for (i, sample) in split.labeled_target.iter().enumerate() {
                for c in sample.truth().classes_present() {
                    lists[c as usize].push(i);
                }
            }
            lists.into_iter().filter(|l| !l.is_empty()).collect()
        });
        let counts = (
            if need_src { config.n_src } else { 0 },
            if need_lbl { config.n_lbl_tgt } else { 0 },
            if s.mixing() { config.n_unl_tgt * config.strategy.unlabeled_per_unit() } else { 0 },
        );
        Ok(BatchSampler {
            n_source: split.source.len(),
            n_unlabeled: split.unlabeled_target.len(),
            src_rng: seeds::rng(&[config.seed, 0x5C]),
            lbl_rng: seeds::rng(&[config.seed, 0x7A]),
            unl_rng: seeds::rng(&[config.seed, 0x0B]),
            order: (0..split.labeled_target.len()).collect(),
            cursor: usize::MAX,
            by_class,
            counts,
        })
    }

    fn next_labeled(&mut self) -> usize {
        if let Some(lists) = &self.by_class {
            let list = &lists[self.lbl_rng.random_range(0..lists.len())];
            return list[self.lbl_rng.random_range(0..list.len())];
        }
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.lbl_rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn next_batch(&mut self) -> Batch {
        let (ns, nl, nu) = self.counts;
        let sources = (0..ns).map(|_| self.src_rng.random_range(0..self.n_source)).collect();
        let labeled = (0..nl).map(|_| self.next_labeled()).collect();
        let unlabeled = (0..nu).map(|_| self.unl_rng.random_range(0..self.n_unlabeled)).collect();
        Batch { sources, labeled, unlabeled }
    }
}
