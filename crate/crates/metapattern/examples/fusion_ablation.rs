//! Compare the top-down fusion module against plain channel concatenation on
//! a small leave-one-domain-out run.
//!
//!     cargo run --release --example fusion_ablation

use metapattern::config::RunConfig;
use metapattern::models::FusionMode;
use metapattern::{data, eval, trainer};
use metapattern::Result;

fn loo_mean_auc(cfg: &RunConfig, ds: &data::Dataset) -> Result<f64> {
    let reports = eval::run_protocol(ds, 1, |test_domain, train_domains| {
        let mut outcome = trainer::train(cfg, ds, train_domains, None, None)?;
        let test = ds.subset_domains(&[test_domain]);
        trainer::score_with(cfg, outcome.mode, &mut outcome.phi, &mut outcome.theta, &test)
    })?;
    Ok(reports.iter().map(|r| r.auc).sum::<f64>() / reports.len() as f64)
}

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.mode = "joint_erm".into();
    cfg.hfn.input_size = 32;
    cfg.train.steps = 30;
    cfg.data.domains = 3;
    cfg.data.per_class = 8;

    let ds = data::generate_dataset(cfg.data.domains, cfg.data.per_class, cfg.hfn.input_size, cfg.seed)?;

    for mode in [FusionMode::Hfm, FusionMode::Concat] {
        cfg.hfn.fusion_mode = mode;
        let auc = loo_mean_auc(&cfg, &ds)?;
        println!("{mode:?}: mean held-out auc {auc:.4}");
    }
    println!("(30 steps is a smoke test; see the bench subcommand for the full matrix)");
    Ok(())
}
