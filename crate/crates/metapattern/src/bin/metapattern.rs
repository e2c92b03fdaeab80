//! Command-line entry point: data generation, training, evaluation, pattern
//! extraction, gradient verification, and the ablation benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metapattern::config::RunConfig;
use metapattern::data;
use metapattern::error::{Error, Result};
use metapattern::eval;
use metapattern::gradcheck;
use metapattern::models::FusionMode;
use metapattern::tensor::Tensor;
use metapattern::trainer::{self, TrainMode};

#[derive(Parser)]
#[command(name = "metapattern", version, about = "Learnable pattern extraction for presentation-attack detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset on disk.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        domains: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a model from a TOML config; writes config.resolved,
    /// history.csv and checkpoint.mpck into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset with a trained checkpoint; with --protocol loo,
    /// retrain per fold (leave-one-domain-out) and write report.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        protocol: Option<String>,
        /// Directory for report.csv (protocol mode).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the trained extractor on one PNG and write the pattern map.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every differentiable primitive against central finite
    /// differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the ablation matrix (fusion mode x trainer mode x K grid) with
    /// leave-one-domain-out evaluation.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Directory for bench.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn worker_threads() -> usize {
    match std::env::var("MPLAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
            Ok(n) => n,
        },
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

fn load_or_generate(cfg: &RunConfig) -> Result<data::Dataset> {
    if cfg.data.path.is_empty() {
        data::generate_dataset(
            cfg.data.domains,
            cfg.data.per_class,
            cfg.hfn.input_size,
            cfg.seed,
        )
    } else {
        data::load_dataset(Path::new(&cfg.data.path))
    }
}

fn cmd_gen_data(out: &Path, domains: usize, per_class: usize, seed: u64, size: usize) -> Result<()> {
    let ds = data::generate_dataset(domains, per_class, size, seed)?;
    data::write_dataset(&ds, out)?;
    println!(
        "wrote {} samples ({} domains, {} per class) to {}",
        ds.len(),
        domains,
        per_class,
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved"), cfg.to_resolved_toml()?)?;

    let ds = load_or_generate(&cfg)?;
    let heldout = if cfg.data.heldout_domain >= 0 {
        let d = cfg.data.heldout_domain as usize;
        if d >= ds.domain_count() {
            return Err(Error::Config(format!(
                "heldout_domain {d} out of range (dataset has {} domains)",
                ds.domain_count()
            )));
        }
        Some(d)
    } else {
        None
    };
    let train_domains: Vec<usize> = (0..ds.domain_count())
        .filter(|d| Some(*d) != heldout)
        .collect();
    let heldout_ds = heldout.map(|d| ds.subset_domains(&[d]));

    println!("training mode={} on domains {:?}", cfg.mode, train_domains);
    let outcome = trainer::train(&cfg, &ds, &train_domains, heldout_ds.as_ref(), Some(out))?;
    trainer::write_history_csv(&outcome.history, &out.join("history.csv"))?;
    let ck = trainer::make_checkpoint(&cfg, &outcome.phi, &outcome.theta, cfg.train.steps as u64)?;
    trainer::save_checkpoint(&ck, &out.join("checkpoint.mpck"))?;

    let last = outcome.history.last().unwrap();
    print!("done: {} iterations, final loss {:.6}", last.iter, last.loss);
    if let (Some(auc), Some(hter)) = (last.heldout_auc, last.heldout_hter) {
        print!(", held-out auc {auc:.4} hter {hter:.4}");
    }
    println!();
    Ok(())
}

fn print_report_table(reports: &[eval::FoldReport]) {
    println!("fold  test_domain      auc     hter      far      frr  threshold");
    for r in reports {
        println!(
            "{:>4}  {:<12} {:>7.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
            r.fold, r.test_domain, r.auc, r.hter, r.far, r.frr, r.threshold
        );
    }
    let n = reports.len() as f64;
    let mean_auc: f64 = reports.iter().map(|r| r.auc).sum::<f64>() / n;
    let mean_hter: f64 = reports.iter().map(|r| r.hter).sum::<f64>() / n;
    println!("mean  {:<12} {:>7.4} {:>8.4}", "", mean_auc, mean_hter);
}

fn run_loo(cfg: &RunConfig, ds: &data::Dataset) -> Result<Vec<eval::FoldReport>> {
    eval::run_protocol(ds, worker_threads(), |test_domain, train_domains| {
        let outcome = trainer::train(cfg, ds, train_domains, None, None)?;
        let mut outcome = outcome;
        let test = ds.subset_domains(&[test_domain]);
        trainer::score_with(cfg, outcome.mode, &mut outcome.phi, &mut outcome.theta, &test)
    })
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path, protocol: Option<&str>, out: &Path) -> Result<()> {
    let ck = trainer::load_checkpoint(checkpoint)?;
    let cfg = ck.config()?;
    let mode = TrainMode::parse(&cfg.mode)?;
    let ds = data::load_dataset(data_dir)?;

    match protocol {
        None => {
            let mut phi = ck.phi;
            let mut theta = ck.theta;
            let scored = trainer::score_with(&cfg, mode, &mut phi, &mut theta, &ds)?;
            let report = eval::fold_report(0, "all", &scored)?;
            print_report_table(std::slice::from_ref(&report));
        }
        Some("loo") => {
            let reports = run_loo(&cfg, &ds)?;
            std::fs::create_dir_all(out)?;
            let path = out.join("report.csv");
            eval::write_report_csv(&reports, &path)?;
            print_report_table(&reports);
            println!("wrote {}", path.display());
        }
        Some(p) => {
            return Err(Error::InvalidArg(format!(
                "unknown protocol '{p}' (expected 'loo')"
            )))
        }
    }
    Ok(())
}

fn cmd_extract(checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let ck = trainer::load_checkpoint(checkpoint)?;
    let cfg = ck.config()?;
    let mode = TrainMode::parse(&cfg.mode)?;
    let img = data::load_png(image)?;
    let shape = img.shape().to_vec();
    let batch = Tensor::new(vec![1, shape[0], shape[1], shape[2]], img.data().to_vec())?;
    let mut phi = ck.phi;
    let pattern = trainer::pattern_for_eval(mode, &mut phi, &cfg.extractor, &batch)?;
    let single = Tensor::new(shape, pattern.data().to_vec())?;
    data::save_png(&single, out)?;
    println!("wrote pattern map to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64) -> Result<()> {
    let results = gradcheck::run_suite(trials, seed)?;
    let mut failed = false;
    for r in &results {
        println!(
            "{:<24} trials {:>4}  coords {:>6}  max rel err {:.3e}  {}",
            r.name,
            r.trials,
            r.coords_checked,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        failed |= !r.passed();
    }
    if failed {
        return Err(Error::NonFinite("gradient check failed".into()));
    }
    println!("all checks passed");
    Ok(())
}

fn cmd_bench(config: &Path, out: &Path) -> Result<()> {
    let base = RunConfig::from_file(config)?;
    let ds = load_or_generate(&base)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("bench.csv");
    let mut rows = Vec::new();

    let fusions = [FusionMode::Hfm, FusionMode::Concat];
    let cells: Vec<(String, usize)> = [1usize, 2, 4, 8]
        .iter()
        .map(|&k| ("meta".to_string(), k))
        .chain(
            ["joint_erm", "fixed_identity", "fixed_colorlbp"]
                .iter()
                .map(|m| (m.to_string(), 0)),
        )
        .collect();

    for fusion in fusions {
        for (mode, k) in &cells {
            let mut cfg = base.clone();
            cfg.mode = mode.clone();
            cfg.hfn.fusion_mode = fusion;
            if *k > 0 {
                cfg.train.k_inner = *k;
            }
            let fusion_name = match fusion {
                FusionMode::Hfm => "hfm",
                FusionMode::Concat => "concat",
            };
            println!("cell: mode={mode} fusion={fusion_name} k={k}");
            let reports = run_loo(&cfg, &ds)?;
            for r in &reports {
                rows.push(format!(
                    "{mode},{fusion_name},{k},{},{},{:.6},{:.6}",
                    r.fold, r.test_domain, r.auc, r.hter
                ));
            }
            print_report_table(&reports);
        }
    }

    let mut text = String::from("mode,fusion,k,fold,test_domain,auc,hter\n");
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            domains,
            per_class,
            seed,
            size,
        } => cmd_gen_data(&out, domains, per_class, seed, size),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval {
            checkpoint,
            data,
            protocol,
            out,
        } => cmd_eval(&checkpoint, &data, protocol.as_deref(), &out),
        Command::Extract {
            checkpoint,
            image,
            out,
        } => cmd_extract(&checkpoint, &image, &out),
        Command::Gradcheck { trials, seed } => cmd_gradcheck(trials, seed),
        Command::Bench { config, out } => cmd_bench(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
