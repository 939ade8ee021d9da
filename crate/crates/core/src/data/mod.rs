//! Synthetic two-domain segmentation benchmark ("ToyShift") and dataset I/O.
//!
//! Scenes hold 1-3 non-overlapping shapes (circle, square, triangle,
//! stripe-bar) over a textured background. A source and a target
//! [`DomainSpec`] render the same geometry with different palettes, noise
//! and texture, so the shift between domains is purely appearance-level.

mod io;
mod render;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seeds;

pub use io::{load_dataset, read_pgm, read_tensor, save_dataset, write_pgm, write_ppm, write_ppm_bytes, write_tensor, SaveOptions};
pub use render::{rasterize, render_image, sample_geometry, DomainSpec, Shape, ShapeKind, CLASS_NAMES, NUM_CLASSES};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

pub const DEFAULT_SIZE: usize = 48;

/// Per-pixel class indices, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} map", data.len())));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    /// Distinct non-ignored classes present, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0u8..=254).filter(|&c| seen[c as usize]).collect()
    }

    /// Checks every non-ignored value is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
            Some(v) => Err(Error::Config(format!("label {v} is out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// One image with its label; `label` is `None` when withheld on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` planar RGB in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: Option<LabelMap>,
    pub domain: Domain,
    pub id: u32,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    /// Ground truth; panics for a sample whose labels were withheld.
    pub fn truth(&self) -> &LabelMap {
        self.label.as_ref().unwrap_or_else(|| panic!("labels of sample {} are withheld", self.id))
    }
}

/// The four pools used for training and evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub source: Vec<Sample>,
    pub labeled_target: Vec<Sample>,
    pub unlabeled_target: Vec<Sample>,
    pub eval_target: Vec<Sample>,
}

/// Geometry of scene `id` under `seed`, independent of the domain.
pub fn scene_geometry(seed: u64, id: u32, size: usize) -> Vec<Shape> {
    sample_geometry(&mut seeds::rng(&[seed, 0x6E0, id as u64]), size)
}

fn domain_salt(spec: &DomainSpec) -> u64 {
    spec.name.bytes().fold(0xA11u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64))
}

/// Renders one scene in one domain.
pub fn render_sample(spec: &DomainSpec, domain: Domain, seed: u64, id: u32, size: usize) -> Sample {
    let shapes = scene_geometry(seed, id, size);
    let label = rasterize(&shapes, size);
    let mut rng = seeds::rng(&[seed, domain_salt(spec), id as u64]);
    let data = render_image(spec, &shapes, &label, size, &mut rng);
    Sample { image: Tensor::from_vec(&[3, size, size], data).expect("3 planes"), label: Some(label), domain, id }
}

/// Renders scenes `first_id .. first_id + count`.
pub fn generate_domain(spec: &DomainSpec, domain: Domain, count: usize, seed: u64, first_id: u32, size: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    if size < 8 {
        return Err(Error::Config(format!("image size {size} is below the minimum of 8")));
    }
    Ok((0..count as u32).map(|i| render_sample(spec, domain, seed, first_id + i, size)).collect())
}

/// Partitions target samples into a labeled subset of `n_labeled` and the
/// unlabeled remainder (which keeps its labels in memory for diagnostics).
pub fn split_target(samples: Vec<Sample>, n_labeled: usize, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if n_labeled == 0 || n_labeled >= samples.len() {
        return Err(Error::Config(format!(
            "n_labeled must lie in 1..{}, got {n_labeled}",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seeds::rng(&[seed, 0x5917]));
    let mut chosen = vec![false; samples.len()];
    order[..n_labeled].iter().for_each(|&i| chosen[i] = true);
    let (labeled, unlabeled) = samples.into_iter().zip(chosen).partition::<Vec<_>, _>(|(_, c)| *c);
    Ok((labeled.into_iter().map(|(s, _)| s).collect(), unlabeled.into_iter().map(|(s, _)| s).collect()))
}

/// Benchmark construction parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub size: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    pub n_labeled: usize,
    pub split_seed: u64,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            seed: 0,
            size: DEFAULT_SIZE,
            n_source: 500,
            n_target: 500,
            n_eval: 100,
            n_labeled: 8,
            split_seed: 0,
            source: DomainSpec::source(),
            target: DomainSpec::target(),
        }
    }
}

impl BenchmarkSpec {
    pub fn manifest(&self) -> String {
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("size = {}", self.size),
            format!("n_source = {}", self.n_source),
            format!("n_target = {}", self.n_target),
            format!("n_eval = {}", self.n_eval),
            format!("n_labeled = {}", self.n_labeled),
            format!("split_seed = {}", self.split_seed),
        ];
        lines.extend(self.source.manifest_lines("source"));
        lines.extend(self.target.manifest_lines("target"));
        lines.join("\n") + "\n"
    }

    /// Generates all pools. Source scenes and target scenes use distinct
    /// geometry streams; evaluation scenes continue the target id range.
    pub fn build(&self) -> Result<DatasetSplit> {
        let source = generate_domain(&self.source, Domain::Source, self.n_source, seeds::derive(&[self.seed, 1]), 0, self.size)?;
        let target_seed = seeds::derive(&[self.seed, 2]);
        let target = generate_domain(&self.target, Domain::Target, self.n_target, target_seed, 0, self.size)?;
        let eval_target = generate_domain(&self.target, Domain::Target, self.n_eval, target_seed, self.n_target as u32, self.size)?;
        let (labeled_target, unlabeled_target) = split_target(target, self.n_labeled, self.split_seed)?;
        Ok(DatasetSplit { source, labeled_target, unlabeled_target, eval_target })
    }
}
