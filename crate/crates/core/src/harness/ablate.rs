//! Ablation grid runner: trains each strategy over a seed set, in
//! parallel workers, and aggregates accuracy/memory statistics per cell.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, Family};
use crate::error::{Error, Result};
use crate::mtsa::Insertion;
use crate::report::RunReport;

use super::task::{DomainData, TaskSpec};
use super::train::{train, Strategy, StrategyKind, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub trainable_scalars: usize,
    pub trainable_param_bytes: usize,
    pub mean_retained_total: f64,
    pub mean_backbone_retained: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub cells: Vec<CellResult>,
}

/// Train every grid cell on every seed. Cells are independent; `threads`
/// bounds worker parallelism (the SHERL_THREADS environment variable in
/// the CLI).
pub fn ablate(
    grid: &[Strategy],
    backbone: &Backbone,
    task: &TaskSpec,
    data: &DomainData,
    base_cfg: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<ComparisonTable> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = grid
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| seeds.iter().map(move |&s| (ci, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<RunReport>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let (ci, seed) = jobs[j];
                let mut cfg = base_cfg.clone();
                cfg.seed = seed;
                let out = train(&grid[ci], backbone, task, data, &cfg, "target")
                    .map(|o| o.report);
                results.lock().expect("results lock")[j] = Some(out);
            });
        }
    });

    let results = results.into_inner().expect("results lock");
    let mut cells = Vec::with_capacity(grid.len());
    for (ci, strategy) in grid.iter().enumerate() {
        let mut accuracies = Vec::new();
        let mut retained = Vec::new();
        let mut backbone_retained = Vec::new();
        let mut trainable_scalars = 0;
        let mut trainable_bytes = 0;
        for (j, &(jc, _)) in jobs.iter().enumerate() {
            if jc != ci {
                continue;
            }
            let report = results[j]
                .as_ref()
                .expect("job completed")
                .as_ref()
                .map_err(|e| Error::Config(format!("cell {}: {e}", strategy.label())))?;
            accuracies.push(report.metrics.final_test_accuracy);
            retained.push(report.memory.total_retained() as f64);
            backbone_retained.push(report.memory.backbone_retained as f64);
            trainable_scalars = report.metrics.trainable_scalars;
            trainable_bytes = report.memory.trainable_param_bytes;
        }
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        cells.push(CellResult {
            label: strategy.label(),
            strategy: strategy.clone(),
            seeds: seeds.to_vec(),
            mean_accuracy: mean,
            min_accuracy: accuracies.iter().cloned().fold(f64::INFINITY, f64::min),
            max_accuracy: accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            accuracies,
            trainable_scalars,
            trainable_param_bytes: trainable_bytes,
            mean_retained_total: retained.iter().sum::<f64>() / retained.len() as f64,
            mean_backbone_retained: backbone_retained.iter().sum::<f64>()
                / backbone_retained.len() as f64,
        });
    }
    Ok(ComparisonTable { cells })
}

/// Train the adapter on an encoder-decoder backbone under one insertion
/// pattern (standard, single-layer, or cumulative multi-layer).
pub fn insertion_experiment(
    backbone: &Backbone,
    pattern: Insertion,
    task: &TaskSpec,
    data: &DomainData,
    cfg: &TrainConfig,
) -> Result<RunReport> {
    if backbone.spec.family != Family::EncoderDecoder {
        return Err(Error::Config(
            "insertion experiment expects an encoder-decoder backbone".into(),
        ));
    }
    let strategy = Strategy {
        kind: StrategyKind::Sherl {
            aggregator: crate::mtsa::Aggregator::Mtsa,
        },
        insertion: pattern,
        reduction: 4,
    };
    Ok(train(&strategy, backbone, task, data, cfg, "target")?.report)
}
