//! Run the learnable extractor and the handcrafted LBP map on the same image
//! and write all three as PNGs for side-by-side inspection.
//!
//!     cargo run --release --example extract_pattern

use metapattern::data;
use metapattern::models::{self, ExtractorSpec};
use metapattern::tensor::Tensor;
use metapattern::Result;

fn main() -> Result<()> {
    let ds = data::generate_dataset(2, 2, 64, 11)?;
    let idx = ds.indices(0, data::GENUINE)[0];
    let (batch, _) = ds.batch(&[idx])?;

    let spec = ExtractorSpec::default();
    let mut phi = models::build_extractor::<f32>(&spec, &mut data::substream(11, "phi"))?;
    let learned = models::extract_pattern(&mut phi, &spec, &batch)?;
    let lbp = models::color_lbp_map(&batch)?;

    let dir = std::env::temp_dir().join("metapattern-example-patterns");
    std::fs::create_dir_all(&dir)?;
    for (name, t) in [("input", &batch), ("learned", &learned), ("colorlbp", &lbp)] {
        let shape = t.shape()[1..].to_vec();
        let single = Tensor::new(shape, t.data().to_vec())?;
        let path = dir.join(format!("{name}.png"));
        data::save_png(&single, &path)?;
        println!("wrote {}", path.display());
    }

    let mean = |t: &Tensor<f32>| t.data().iter().sum::<f32>() / t.numel() as f32;
    println!(
        "means: input {:.3}, learned {:.3} (untrained, near 0.5 after sigmoid), lbp {:.3}",
        mean(&batch),
        mean(&learned),
        mean(&lbp)
    );
    Ok(())
}
