//! The four-stream training loop: teacher pseudo-labels on clean unlabeled
//! images, mixed batches, student forward passes, the weighted objective,
//! backward, AdamW with warmup and the EMA teacher update.

mod config;
pub mod grid;
mod optim;
mod sampler;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{DatasetSplit, LabelMap, Sample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, MiouReport};
use crate::losses::{ce_loss, ce_loss_weighted, total_loss, LossBreakdown, StreamLosses};
use crate::mixing::{compose_strategy, dump_mixed, MixedBatch, Pseudo, Stream, Strategy};
use crate::model::{save_checkpoint, Architecture, Params, Role};
use crate::numerics::{Graph, Real, Tensor};
use crate::seeds;
use crate::teacher::TeacherState;

pub use config::{kv_pairs, LossSwitches, Precision, TrainConfig, CONFIG_KEYS};
pub use optim::{warmup_lr, AdamW};
pub use sampler::{Batch, BatchSampler};

/// Stacks `[3, H, W]` images into an `[N, 3, H, W]` tensor of element type `T`.
pub fn stack_images<T: Real>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    Ok(Tensor::stack(images)?.cast())
}

/// What one training step did.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub losses: LossBreakdown,
    pub q_mean: f64,
    pub lr_encoder: f64,
    pub lr_head: f64,
    /// Recorded operations carrying a backward rule.
    pub records: usize,
    pub student_forwards: usize,
    /// Distinct unlabeled images the teacher labeled.
    pub teacher_images: usize,
}

/// Mutable state of one training run.
pub struct Trainer<'d, T> {
    pub config: TrainConfig,
    data: &'d DatasetSplit,
    pub student: Params<T>,
    pub teacher: TeacherState<T>,
    optimizer: AdamW<T>,
    sampler: BatchSampler,
    step: usize,
    dump_dir: Option<PathBuf>,
    abort_dir: Option<PathBuf>,
}

impl<'d, T: Real> Trainer<'d, T> {
    pub fn new(config: TrainConfig, data: &'d DatasetSplit) -> Result<Self> {
        config.validate()?;
        for sample in data.source.iter().chain(&data.labeled_target).chain(&data.eval_target) {
            sample.truth().validate(NUM_CLASSES)?;
        }
        let arch = Architecture::new(3, &config.widths, NUM_CLASSES)?;
        let student = Params::init(config.seed, arch);
        let teacher = TeacherState::new(&student, config.alpha, config.tau)?;
        let optimizer = AdamW::new(&student, (config.beta1, config.beta2), config.adam_eps, config.weight_decay);
        let sampler = BatchSampler::new(data, &config)?;
        Ok(Trainer { config, data, student, teacher, optimizer, sampler, step: 0, dump_dir: None, abort_dir: None })
    }

    /// Write every mixed sample under `dir` for visual inspection.
    pub fn dump_mixed_to(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    /// Where to write the offending batch if the loss turns non-finite.
    pub fn abort_dump_to(&mut self, dir: impl Into<PathBuf>) {
        self.abort_dir = Some(dir.into());
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optimizer
    }

    fn pick<'a>(pool: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
        idx.iter().map(|&i| &pool[i]).collect()
    }

    /// Teacher pseudo-labels and mixed samples for one step.
    fn build_mixed(&self, batch: &Batch) -> Result<(Vec<MixedBatch>, Vec<f64>)> {
        let sources = Self::pick(&self.data.source, &batch.sources);
        let labeled = Self::pick(&self.data.labeled_target, &batch.labeled);
        let unlabeled = Self::pick(&self.data.unlabeled_target, &batch.unlabeled);
        let clean = stack_images::<T>(&unlabeled.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let pseudo = self.teacher.pseudo_label(&clean)?;
        let qualities: Vec<f64> = pseudo.iter().map(|(_, q)| *q).collect();

        let strategy = self.config.strategy;
        let per_unit = strategy.unlabeled_per_unit();
        let mut rng = seeds::rng(&[self.config.seed, 0x313, self.step as u64]);
        let mut mixed = Vec::new();
        for unit in 0..self.config.n_unl_tgt {
            let recipients: Vec<Pseudo<'_>> = (unit * per_unit..(unit + 1) * per_unit)
                .map(|k| Pseudo { image: &unlabeled[k].image, id: unlabeled[k].id, label: &pseudo[k].0, quality: pseudo[k].1 })
                .collect();
            let source = sources[unit % sources.len()];
            let target = labeled[unit % labeled.len()];
            mixed.extend(compose_strategy(strategy, source, target, &recipients, &mut rng)?);
        }
        Ok((mixed, qualities))
    }

    /// One optimization step.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let batch = self.sampler.next_batch();
        let switches = self.config.switches;
        let (mixed, qualities) = if switches.mixing() { self.build_mixed(&batch)? } else { (Vec::new(), Vec::new()) };
        if let Some(dir) = &self.dump_dir {
            for (k, m) in mixed.iter().enumerate() {
                dump_mixed(dir, &format!("step{:06}_{k}_{:?}", self.step, m.stream).to_lowercase(), m)?;
            }
        }

        let mut graph = Graph::<T>::new();
        let vars = self.student.register(&mut graph);
        let mut forwards = 0;
        let mut supervised = |graph: &mut Graph<T>, samples: Vec<&Sample>| -> Result<_> {
            let images = graph.constant(stack_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?);
            let labels: Vec<LabelMap> = samples.iter().map(|s| s.truth().clone()).collect();
            let logits = self.student.forward(graph, &vars, images)?;
            forwards += 1;
            ce_loss(graph, logits, &labels, T::one())
        };
        let mut streams = StreamLosses::default();
        if switches.use_ls {
            streams.source = Some(supervised(&mut graph, Self::pick(&self.data.source, &batch.sources))?);
        }
        if switches.use_lt {
            streams.labeled_target = Some(supervised(&mut graph, Self::pick(&self.data.labeled_target, &batch.labeled))?);
        }
        let mut mixed_stream = |graph: &mut Graph<T>, kind: Stream| -> Result<_> {
            let parts: Vec<&MixedBatch> = mixed.iter().filter(|m| m.stream == kind).collect();
            let images = graph.constant(stack_images(&parts.iter().map(|m| &m.image).collect::<Vec<_>>())?);
            let labels: Vec<LabelMap> = parts.iter().map(|m| m.label.clone()).collect();
            let weights: Vec<T> = parts.iter().map(|m| T::of(m.quality)).collect();
            let logits = self.student.forward(graph, &vars, images)?;
            forwards += 1;
            ce_loss_weighted(graph, logits, &labels, &weights)
        };
        if self.config.strategy == Strategy::OneXuOneStream {
            if switches.mixing() {
                streams.inter = Some(mixed_stream(&mut graph, Stream::Combined)?);
            }
        } else {
            if switches.use_inter {
                streams.inter = Some(mixed_stream(&mut graph, Stream::Inter)?);
            }
            if switches.use_intra {
                streams.intra = Some(mixed_stream(&mut graph, Stream::Intra)?);
            }
        }
        let (loss, breakdown) = total_loss(&mut graph, streams, self.config.lambda, self.config.mu)?;
        if !breakdown.total.is_finite() {
            return Err(self.abort(&batch, &mixed, &breakdown));
        }
        graph.backward(loss)?;
        let records = graph.num_records();
        let grads: Vec<Vec<T>> = vars
            .iter()
            .zip(&self.student.tensors)
            .map(|(&v, (_, t))| graph.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect();
        drop(graph);

        let warmup = self.config.warmup();
        let lr_encoder = warmup_lr(self.step, self.config.lr_encoder, warmup);
        let lr_head = warmup_lr(self.step, self.config.lr_head, warmup);
        let head: Vec<bool> = (0..self.student.tensors.len()).map(|i| self.student.is_head(i)).collect();
        self.optimizer.step(&mut self.student, &grads, |i| if head[i] { lr_head } else { lr_encoder });
        self.teacher.ema_update(&self.student)?;
        self.step += 1;

        let q_mean = if qualities.is_empty() { 0.0 } else { qualities.iter().sum::<f64>() / qualities.len() as f64 };
        Ok(StepReport {
            step: self.step,
            losses: breakdown,
            q_mean,
            lr_encoder,
            lr_head,
            records,
            student_forwards: forwards,
            teacher_images: qualities.len(),
        })
    }

    fn abort(&self, batch: &Batch, mixed: &[MixedBatch], losses: &LossBreakdown) -> Error {
        let mut detail = format!(
            "losses {losses:?}; source ids {:?}, labeled ids {:?}, unlabeled ids {:?}",
            batch.sources.iter().map(|&i| self.data.source[i].id).collect::<Vec<_>>(),
            batch.labeled.iter().map(|&i| self.data.labeled_target[i].id).collect::<Vec<_>>(),
            batch.unlabeled.iter().map(|&i| self.data.unlabeled_target[i].id).collect::<Vec<_>>(),
        );
        if let Some(dir) = &self.abort_dir {
            let dir = dir.join(format!("abort_step{}", self.step));
            let written = mixed.iter().enumerate().try_for_each(|(k, m)| dump_mixed(&dir, &format!("mixed{k}"), m));
            match written {
                Ok(()) => {
                    let _ = write!(detail, "; batch written to {}", dir.display());
                }
                Err(e) => {
                    let _ = write!(detail, "; could not write batch: {e}");
                }
            }
        }
        Error::NonFinite { step: self.step, detail }
    }
}

/// Confusion matrix and IoU of `params` on labeled samples.
pub fn evaluate<T: Real>(params: &Params<T>, samples: &[Sample]) -> Result<(ConfusionMatrix, MiouReport)> {
    let mut cm = ConfusionMatrix::new(params.arch.num_classes);
    for chunk in samples.chunks(10) {
        let images = stack_images::<T>(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        for (pred, sample) in params.predict(&images)?.iter().zip(chunk) {
            cm.accumulate(pred, sample.truth())?;
        }
    }
    let report = cm.miou()?;
    Ok((cm, report))
}

/// Output locations and console behavior of [`run`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub dump_mixed: Option<PathBuf>,
    /// One line per evaluation on standard output.
    pub progress: bool,
}

/// Outcome of a full run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub final_miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub best_miou: f64,
    pub best_step: usize,
    /// `(step, mIoU)` for every evaluation, starting with step 0.
    pub evals: Vec<(usize, f64)>,
    pub losses: Vec<LossBreakdown>,
    pub metrics_csv: String,
    pub checkpoints: Vec<PathBuf>,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "step,l_s,l_t,l_inter,l_intra,total,q_mean,lr,eval_miou";

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains for `config.iters` steps, evaluating on the target evaluation pool
/// at step 0, every `eval_every` steps and at the end.
pub fn run<T: Real>(config: &TrainConfig, data: &DatasetSplit, options: &RunOptions) -> Result<RunReport> {
    let started = Instant::now();
    if data.eval_target.is_empty() {
        return Err(Error::Config("the target evaluation pool is empty".into()));
    }
    let mut trainer = Trainer::<T>::new(config.clone(), data)?;
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("config.resolved"), &config.to_kv())?;
        trainer.abort_dump_to(dir);
    }
    if let Some(dir) = &options.dump_mixed {
        trainer.dump_mixed_to(dir);
    }

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let (_, initial) = evaluate(&trainer.student, &data.eval_target)?;
    let _ = writeln!(csv, "0,,,,,,,,{}", initial.mean);
    if options.progress {
        println!("step {:>6}  mIoU {:6.2}", 0, 100.0 * initial.mean);
    }
    let mut evals = vec![(0, initial.mean)];
    let mut last = initial;
    let (mut best_miou, mut best_step) = (last.mean, 0);
    let mut best_params = trainer.student.clone();
    let mut losses = Vec::with_capacity(config.iters);

    for _ in 0..config.iters {
        let report = trainer.train_step()?;
        let l = &report.losses;
        let step = report.step;
        let _ = write!(csv, "{step},{},{},{},{},{},{},{},", l.l_s, l.l_t, l.l_inter, l.l_intra, l.total, report.q_mean, report.lr_encoder);
        losses.push(report.losses);
        if step % config.eval_every == 0 || step == config.iters {
            let (_, r) = evaluate(&trainer.student, &data.eval_target)?;
            let _ = write!(csv, "{}", r.mean);
            evals.push((step, r.mean));
            if options.progress {
                println!(
                    "step {step:>6}  mIoU {:6.2}  loss {:.4}  q {:.3}  ({:.0}s)",
                    100.0 * r.mean,
                    l.total,
                    report.q_mean,
                    started.elapsed().as_secs_f64()
                );
            }
            if r.mean > best_miou {
                best_miou = r.mean;
                best_step = step;
                best_params = trainer.student.clone();
            }
            last = r;
        }
        csv.push('\n');
    }

    let mut checkpoints = Vec::new();
    if let Some(dir) = &options.out_dir {
        write_file(&dir.join("metrics.csv"), &csv)?;
        for (name, params, role) in [
            ("best.ckpt", &best_params, Role::Student),
            ("student_final.ckpt", &trainer.student, Role::Student),
            ("teacher_final.ckpt", &trainer.teacher.params, Role::Teacher),
        ] {
            let path = dir.join(name);
            save_checkpoint(&path, params, role)?;
            checkpoints.push(path);
        }
    }
    let report = RunReport {
        final_miou: last.mean,
        per_class: last.per_class,
        best_miou,
        best_step,
        evals,
        losses,
        metrics_csv: csv,
        checkpoints,
        seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &options.out_dir {
        write_file(&dir.join("report.txt"), &format_report(&report))?;
    }
    Ok(report)
}

/// Runs at the configured precision.
pub fn run_any(config: &TrainConfig, data: &DatasetSplit, options: &RunOptions) -> Result<RunReport> {
    match config.precision {
        Precision::F32 => run::<f32>(config, data, options),
        Precision::F64 => run::<f64>(config, data, options),
    }
}

pub fn format_report(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "final_miou = {}", report.final_miou);
    let _ = writeln!(s, "best_miou = {}", report.best_miou);
    let _ = writeln!(s, "best_step = {}", report.best_step);
    for (name, iou) in crate::data::CLASS_NAMES.iter().zip(&report.per_class) {
        let _ = writeln!(s, "iou.{name} = {}", iou.map_or("n/a".to_string(), |v| v.to_string()));
    }
    let _ = writeln!(s, "seconds = {:.1}", report.seconds);
    for path in &report.checkpoints {
        let _ = writeln!(s, "checkpoint = {}", path.display());
    }
    s
}
