//! `sherl` command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 numeric divergence during training.

mod plot;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sherl_core::backbones::{Backbone, BackboneSpec};
use sherl_core::configfile::{parse_run_file, RunFile};
use sherl_core::error::Error;
use sherl_core::harness::{ablate, generate_task, train, ComparisonTable, Strategy};
use sherl_core::verify::{run_suite, Suite};
use sherl_core::weights;

#[derive(Parser)]
#[command(
    name = "sherl",
    about = "Memory-efficient transfer-learning experiments: training runs, \
             ablation grids, and verification suites"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one training run from a config file and write a report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides [train].seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train every grid cell from the config's [ablate] section over k
    /// seeds; writes a CSV table and an accuracy-memory scatter plot.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Number of seeds (1..=k).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a verification suite: gradcheck | invariants | memory | all.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Build a deterministic frozen backbone and save its weights.
    Backbone {
        /// transformer | cnn | encoder_decoder
        #[arg(long)]
        family: String,
        #[arg(long)]
        layers: usize,
        /// Comma-separated source drop positions.
        #[arg(long, default_value = "")]
        drop: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        model_dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 8)]
        seq_len: usize,
        #[arg(long, default_value_t = 8)]
        dec_len: usize,
        #[arg(long, default_value_t = 16)]
        input_dim: usize,
        /// CNN stage channels, comma-separated (stem first).
        #[arg(long, default_value = "8,16,32")]
        stages: String,
        /// CNN input as CxHxW.
        #[arg(long, default_value = "3x16x16")]
        input: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => cmd_run(&config, seed, &out),
        Command::Ablate { config, seeds, out } => cmd_ablate(&config, seeds, &out),
        Command::Verify { suite } => cmd_verify(&suite),
        Command::Backbone {
            family,
            layers,
            drop,
            seed,
            out,
            model_dim,
            heads,
            seq_len,
            dec_len,
            input_dim,
            stages,
            input,
        } => cmd_backbone(
            &family, layers, &drop, seed, &out, model_dim, heads, seq_len, dec_len, input_dim,
            &stages, &input,
        ),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}

fn exit_code_of(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::ConfigParse { .. }) => 2,
        Some(Error::Divergence { .. }) => 3,
        _ => 1,
    }
}

fn worker_threads() -> usize {
    std::env::var("SHERL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get().min(8))
                .unwrap_or(1)
        })
}

fn load_config(path: &Path) -> anyhow::Result<RunFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(parse_run_file(&text)?)
}

fn build_backbone(rf: &RunFile, config_dir: &Path) -> anyhow::Result<Backbone> {
    let mut bb = Backbone::build(&rf.backbone)?;
    if let Some(wf) = &rf.weights_file {
        let path = if wf.is_absolute() {
            wf.clone()
        } else {
            config_dir.join(wf)
        };
        let entries = weights::load(&path)?;
        bb.load_params(&entries)?;
    }
    Ok(bb)
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path) -> anyhow::Result<ExitCode> {
    let rf = load_config(config)?;
    let mut train_cfg = rf.train.clone();
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let bb = build_backbone(&rf, config.parent().unwrap_or(Path::new(".")))?;
    let data = generate_task(&rf.task, &rf.backbone)?;
    let outcome = train(&rf.strategy, &bb, &rf.task, &data.target, &train_cfg, "target")?;
    std::fs::create_dir_all(out)?;
    let report_path = out.join("report.json");
    std::fs::write(&report_path, outcome.report.to_json())?;
    println!(
        "run {}: test accuracy {:.4}, retained {} bytes (backbone {}), report {}",
        rf.strategy.label(),
        outcome.report.metrics.final_test_accuracy,
        outcome.report.memory.total_retained(),
        outcome.report.memory.backbone_retained,
        report_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(config: &Path, seeds: u64, out: &Path) -> anyhow::Result<ExitCode> {
    let rf = load_config(config)?;
    let options = rf
        .ablate
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [ablate] section".into()))?;
    let mut grid: Vec<Strategy> = options.strategies.clone();
    for &r in &options.reductions {
        grid.push(Strategy::sherl(r));
    }
    let seed_list: Vec<u64> = (1..=seeds.max(1)).collect();
    let bb = build_backbone(&rf, config.parent().unwrap_or(Path::new(".")))?;
    let data = generate_task(&rf.task, &rf.backbone)?;
    let table = ablate(
        &grid,
        &bb,
        &rf.task,
        &data.target,
        &rf.train,
        &seed_list,
        worker_threads(),
    )?;

    std::fs::create_dir_all(out)?;
    let csv_path = out.join("ablate.csv");
    std::fs::write(&csv_path, table_csv(&table))?;
    let svg_path = out.join("ablate.svg");
    std::fs::write(&svg_path, plot::accuracy_memory_svg(&table))?;
    for cell in &table.cells {
        println!(
            "{:<28} mean {:.4}  [{:.4}, {:.4}]  params {:>8}  retained {:>10.0}",
            cell.label,
            cell.mean_accuracy,
            cell.min_accuracy,
            cell.max_accuracy,
            cell.trainable_scalars,
            cell.mean_retained_total
        );
    }
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(ExitCode::SUCCESS)
}

fn table_csv(table: &ComparisonTable) -> String {
    let mut s = String::from(
        "label,reduction,insertion,seeds,mean_accuracy,min_accuracy,max_accuracy,\
         trainable_scalars,trainable_param_bytes,mean_retained_total,mean_backbone_retained\n",
    );
    for c in &table.cells {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{},{},{:.1},{:.1}\n",
            c.label,
            c.strategy.reduction,
            c.strategy.insertion.label(),
            c.seeds.len(),
            c.mean_accuracy,
            c.min_accuracy,
            c.max_accuracy,
            c.trainable_scalars,
            c.trainable_param_bytes,
            c.mean_retained_total,
            c.mean_backbone_retained
        ));
    }
    s
}

fn cmd_verify(suite: &str) -> anyhow::Result<ExitCode> {
    let suite = Suite::parse(suite).ok_or_else(|| {
        Error::Config(format!(
            "unknown suite `{suite}`: expected gradcheck | invariants | memory | all"
        ))
    })?;
    let results = run_suite(suite);
    let mut first_failure: Option<String> = None;
    for r in &results {
        println!(
            "[{}] {:<40} {}",
            if r.passed { "pass" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.passed && first_failure.is_none() {
            first_failure = Some(r.name.clone());
        }
    }
    match first_failure {
        Some(name) => {
            eprintln!("verification failed: {name}");
            Ok(ExitCode::from(1))
        }
        None => {
            println!("{} checks passed", results.len());
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_backbone(
    family: &str,
    layers: usize,
    drop: &str,
    seed: u64,
    out: &Path,
    model_dim: usize,
    heads: usize,
    seq_len: usize,
    dec_len: usize,
    input_dim: usize,
    stages: &str,
    input: &str,
) -> anyhow::Result<ExitCode> {
    let drop_mask: BTreeSet<usize> = if drop.is_empty() {
        BTreeSet::new()
    } else {
        drop.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad drop index `{p}`")))
            })
            .collect::<Result<_, _>>()?
    };
    let spec = match family {
        "transformer" => {
            BackboneSpec::transformer(layers, model_dim, heads, seq_len, input_dim, drop_mask, seed)
        }
        "cnn" => {
            let stage_channels: Vec<usize> = stages
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad stage channels `{p}`")))
                })
                .collect::<Result<_, _>>()?;
            let dims: Vec<usize> = input
                .split('x')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad input shape `{input}`")))
                })
                .collect::<Result<_, _>>()?;
            if dims.len() != 3 {
                return Err(Error::Config(format!("input must be CxHxW, got `{input}`")).into());
            }
            BackboneSpec::cnn(stage_channels, (dims[0], dims[1], dims[2]), drop_mask, seed)
        }
        "encoder_decoder" => BackboneSpec::encoder_decoder(
            layers, model_dim, heads, seq_len, dec_len, input_dim, drop_mask, seed,
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown family `{other}`: expected transformer | cnn | encoder_decoder"
            ))
            .into())
        }
    };
    let bb = Backbone::build(&spec)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    weights::save(out, &bb.param_tensors())?;
    println!(
        "built {family} backbone: {} sources after drop mask, {} parameters, wrote {}",
        spec.effective_sources(),
        bb.num_param_scalars(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}
