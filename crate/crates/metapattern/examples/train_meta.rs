//! Short bi-level training run: the pattern extractor learns in the inner
//! loop, the fusion network in the outer loop, and a held-out domain is
//! scored along the way.
//!
//!     cargo run --release --example train_meta

use metapattern::config::RunConfig;
use metapattern::data;
use metapattern::trainer;
use metapattern::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.mode = "meta".into();
    cfg.seed = 3;
    cfg.hfn.input_size = 32;
    cfg.train.steps = 40;
    cfg.train.k_inner = 2;
    cfg.train.eval_every = 10;
    cfg.data.domains = 3;
    cfg.data.per_class = 8;

    let ds = data::generate_dataset(cfg.data.domains, cfg.data.per_class, cfg.hfn.input_size, cfg.seed)?;
    let heldout = ds.subset_domains(&[2]);
    let outcome = trainer::train(&cfg, &ds, &[0, 1], Some(&heldout), None)?;

    println!("iter  loss      heldout_auc  heldout_hter");
    for row in &outcome.history {
        if let (Some(auc), Some(hter)) = (row.heldout_auc, row.heldout_hter) {
            println!("{:>4}  {:.6}  {:>11.4}  {:>12.4}", row.iter, row.loss, auc, hter);
        }
    }

    let first = outcome.history.first().unwrap().loss;
    let last = outcome.history.last().unwrap().loss;
    println!("loss moved from {first:.4} to {last:.4} over {} steps", outcome.history.len());
    Ok(())
}
