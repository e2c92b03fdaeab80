//! Leave-one-domain-out protocol: train once per fold on the remaining
//! domains, score the held-out one, and report AUC / HTER per fold.
//!
//!     cargo run --release --example evaluate_loo

use metapattern::config::RunConfig;
use metapattern::{data, eval, trainer};
use metapattern::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.mode = "joint_erm".into();
    cfg.hfn.input_size = 32;
    cfg.train.steps = 30;
    cfg.data.domains = 3;
    cfg.data.per_class = 8;

    let ds = data::generate_dataset(cfg.data.domains, cfg.data.per_class, cfg.hfn.input_size, cfg.seed)?;

    let reports = eval::run_protocol(&ds, 1, |test_domain, train_domains| {
        let mut outcome = trainer::train(&cfg, &ds, train_domains, None, None)?;
        let test = ds.subset_domains(&[test_domain]);
        trainer::score_with(&cfg, outcome.mode, &mut outcome.phi, &mut outcome.theta, &test)
    })?;

    println!("fold  test_domain      auc     hter");
    for r in &reports {
        println!("{:>4}  {:<12} {:>7.4} {:>8.4}", r.fold, r.test_domain, r.auc, r.hter);
    }
    let mean: f64 = reports.iter().map(|r| r.auc).sum::<f64>() / reports.len() as f64;
    println!("mean held-out auc {mean:.4}");
    Ok(())
}
