//! Save a trained model, reload it, and confirm the reloaded model scores a
//! batch bit-identically.
//!
//!     cargo run --release --example checkpointing

use metapattern::config::RunConfig;
use metapattern::{data, trainer};
use metapattern::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.mode = "joint_erm".into();
    cfg.hfn.input_size = 32;
    cfg.train.steps = 5;
    cfg.data.domains = 2;
    cfg.data.per_class = 4;

    let ds = data::generate_dataset(cfg.data.domains, cfg.data.per_class, cfg.hfn.input_size, cfg.seed)?;
    let mut outcome = trainer::train(&cfg, &ds, &[0, 1], None, None)?;

    let path = std::env::temp_dir().join("metapattern-example.mpck");
    let ck = trainer::make_checkpoint(&cfg, &outcome.phi, &outcome.theta, 5)?;
    trainer::save_checkpoint(&ck, &path)?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let loaded = trainer::load_checkpoint(&path)?;
    let cfg2 = loaded.config()?;
    assert_eq!(cfg2.mode, cfg.mode);

    let before = trainer::score_with(&cfg, outcome.mode, &mut outcome.phi, &mut outcome.theta, &ds)?;
    let mut phi = loaded.phi;
    let mut theta = loaded.theta;
    let after = trainer::score_with(&cfg2, outcome.mode, &mut phi, &mut theta, &ds)?;
    assert_eq!(before, after);
    println!("reloaded model scores all {} samples bit-identically", before.len());
    Ok(())
}
