//! Ablation grids: loss switches, mixing strategies and loss weights.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::mixing::Strategy;

use super::{run_any, LossSwitches, RunOptions, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Losses,
    Strategies,
    Weights,
}

impl GridKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "losses" => Some(GridKind::Losses),
            "strategies" => Some(GridKind::Strategies),
            "weights" => Some(GridKind::Weights),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GridKind::Losses => "losses",
            GridKind::Strategies => "strategies",
            GridKind::Weights => "weights",
        }
    }

    /// Row labels and configs derived from `base`.
    pub fn rows(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        match self {
            GridKind::Losses => {
                let sw = |use_ls, use_lt, use_inter, use_intra| LossSwitches { use_ls, use_lt, use_inter, use_intra };
                [
                    ("Ls", sw(true, false, false, false)),
                    ("Lt", sw(false, true, false, false)),
                    ("Ls+Lt", sw(true, true, false, false)),
                    ("Lt+Lintra", sw(false, true, false, true)),
                    ("Ls+Lt+Linter", sw(true, true, true, false)),
                    ("Ls+Lt+Lintra", sw(true, true, false, true)),
                    ("Ls+Lt+Linter+Lintra", LossSwitches::ALL),
                ]
                .into_iter()
                .map(|(name, switches)| (name.to_string(), TrainConfig { switches, ..base.clone() }))
                .collect()
            }
            GridKind::Strategies => Strategy::ALL
                .into_iter()
                .map(|strategy| (strategy.name().to_string(), TrainConfig { strategy, ..base.clone() }))
                .collect(),
            GridKind::Weights => [(0.1, 1.0), (2.0, 1.0), (1.0, 1.0), (1.0, 2.0), (1.0, 0.1)]
                .into_iter()
                .map(|(lambda, mu)| (format!("lambda={lambda},mu={mu}"), TrainConfig { lambda, mu, ..base.clone() }))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub name: String,
    /// Final mIoU per seed, in seed order.
    pub mious: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSummary {
    pub kind: GridKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<GridRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every `(config, seed)` pair on up to `jobs` threads and returns the
/// final mIoU of each, in input order.
pub fn run_configs(configs: &[TrainConfig], data: &DatasetSplit, jobs: usize) -> Result<Vec<f64>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let outcome = run_any(&configs[i], data, &RunOptions::default()).map(|r| r.final_miou);
                results.lock().expect("grid worker panicked")[i] = Some(outcome);
            });
        }
    });
    results
        .into_inner()
        .expect("grid worker panicked")
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::Config("grid cell did not run".into()))))
        .collect()
}

/// Every row of `kind` over every seed.
pub fn run_grid(base: &TrainConfig, data: &DatasetSplit, kind: GridKind, seeds: &[u64], jobs: usize) -> Result<GridSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("a grid needs at least one seed".into()));
    }
    let rows = kind.rows(base);
    let configs: Vec<TrainConfig> = rows
        .iter()
        .flat_map(|(_, c)| seeds.iter().map(move |&seed| TrainConfig { seed, ..c.clone() }))
        .collect();
    let mious = run_configs(&configs, data, jobs)?;
    let rows = rows
        .into_iter()
        .zip(mious.chunks(seeds.len()))
        .map(|((name, _), m)| GridRow { name, mious: m.to_vec(), median: median(m) })
        .collect();
    Ok(GridSummary { kind, seeds: seeds.to_vec(), rows })
}

impl GridSummary {
    pub fn row(&self, name: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row");
        for seed in &self.seeds {
            let _ = write!(s, ",seed{seed}");
        }
        s.push_str(",median\n");
        for r in &self.rows {
            s.push_str(&r.name.replace(',', ";"));
            for m in &r.mious {
                let _ = write!(s, ",{m}");
            }
            let _ = writeln!(s, ",{}", r.median);
        }
        s
    }

    /// Median mIoU in points per row.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | median mIoU | seeds |\n|---|---:|---|\n", self.kind.name());
        for r in &self.rows {
            let per: Vec<String> = r.mious.iter().map(|m| format!("{:.2}", 100.0 * m)).collect();
            let _ = writeln!(s, "| {} | {:.2} | {} |", r.name, 100.0 * r.median, per.join(" "));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_sets() {
        let base = TrainConfig::default();
        let losses = GridKind::Losses.rows(&base);
        assert_eq!(losses.len(), 7);
        assert_eq!(losses[2].1.switches, LossSwitches { use_ls: true, use_lt: true, use_inter: false, use_intra: false });
        assert_eq!(losses[6].1.switches, LossSwitches::ALL);
        let weights: Vec<(f64, f64)> = GridKind::Weights.rows(&base).iter().map(|(_, c)| (c.lambda, c.mu)).collect();
        assert_eq!(weights, vec![(0.1, 1.0), (2.0, 1.0), (1.0, 1.0), (1.0, 2.0), (1.0, 0.1)]);
        assert_eq!(GridKind::Strategies.rows(&base).len(), 3);
        assert_eq!(GridKind::parse("bogus"), None);
        for (_, c) in GridKind::Losses.rows(&base) {
            c.validate().unwrap();
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
