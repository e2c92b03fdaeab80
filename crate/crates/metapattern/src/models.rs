//! The learnable pattern extractor, the two-stream hierarchical fusion
//! network, and the handcrafted ColorLBP baseline map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_bn, init_conv, init_linear, Binding, ParameterSet};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Extractor instantiations: 1/2/3 convolutional layers, vanilla or
/// central-difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorVariant {
    Conv1,
    Conv2,
    Conv3,
    Cdc1,
    Cdc2,
    Cdc3,
}

impl ExtractorVariant {
    pub fn layer_count(self) -> usize {
        match self {
            ExtractorVariant::Conv1 | ExtractorVariant::Cdc1 => 1,
            ExtractorVariant::Conv2 | ExtractorVariant::Cdc2 => 2,
            ExtractorVariant::Conv3 | ExtractorVariant::Cdc3 => 3,
        }
    }

    pub fn is_cdc(self) -> bool {
        matches!(
            self,
            ExtractorVariant::Cdc1 | ExtractorVariant::Cdc2 | ExtractorVariant::Cdc3
        )
    }

    pub fn parse(s: &str) -> Result<ExtractorVariant> {
        match s.to_ascii_lowercase().as_str() {
            "conv1" => Ok(ExtractorVariant::Conv1),
            "conv2" => Ok(ExtractorVariant::Conv2),
            "conv3" => Ok(ExtractorVariant::Conv3),
            "cdc1" => Ok(ExtractorVariant::Cdc1),
            "cdc2" => Ok(ExtractorVariant::Cdc2),
            "cdc3" => Ok(ExtractorVariant::Cdc3),
            other => Err(Error::InvalidArg(format!(
                "unknown extractor variant '{other}'"
            ))),
        }
    }
}

/// Shallow pattern extractor: 3-channel image in, same-size 3-channel map
/// out, final sigmoid keeping values in (0,1).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSpec {
    pub variant: ExtractorVariant,
    pub hidden_channels: usize,
    /// Central-difference weight for the CDC variants; 0 is a vanilla conv.
    pub cdc_theta: f64,
    /// Insert a batch norm between the last convolution and the sigmoid.
    /// Off by default; the reference layout ends Conv -> Sigmoid.
    pub extra_bn: bool,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec {
            variant: ExtractorVariant::Conv2,
            hidden_channels: 16,
            cdc_theta: 0.7,
            extra_bn: false,
        }
    }
}

pub fn build_extractor<T: Real>(spec: &ExtractorSpec, rng: &mut impl Rng) -> Result<ParameterSet<T>> {
    if spec.hidden_channels == 0 {
        return Err(Error::InvalidArg("hidden_channels must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.cdc_theta) {
        return Err(Error::InvalidArg(format!(
            "cdc_theta must be in [0,1], got {}",
            spec.cdc_theta
        )));
    }
    let h = spec.hidden_channels;
    let mut p = ParameterSet::new();
    match spec.variant.layer_count() {
        1 => {
            init_conv(&mut p, "c1", 3, 3, 3, true, rng);
        }
        2 => {
            init_conv(&mut p, "c1", h, 3, 3, true, rng);
            init_bn(&mut p, "bn1", h);
            init_conv(&mut p, "c2", 3, h, 3, true, rng);
        }
        3 => {
            init_conv(&mut p, "c1", h, 3, 3, true, rng);
            init_bn(&mut p, "bn1", h);
            init_conv(&mut p, "c2", h, h, 3, true, rng);
            init_bn(&mut p, "bn2", h);
            init_conv(&mut p, "c3", 3, h, 3, true, rng);
        }
        _ => unreachable!(),
    }
    if spec.extra_bn {
        init_bn(&mut p, "bn_out", 3);
    }
    Ok(p)
}

/// Forward pass of the pattern extractor. Input (N,3,H,W), output the same
/// shape, values in (0,1).
pub fn extractor_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &mut Binding<'_, T>,
    spec: &ExtractorSpec,
    x: Var,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!(
            "extractor expects (N,3,H,W), got {shape:?}"
        )));
    }
    let theta = if spec.variant.is_cdc() {
        T::from_f64(spec.cdc_theta)
    } else {
        T::zero()
    };
    let mut y = x;
    match spec.variant.layer_count() {
        1 => {
            y = bind.conv(tape, "c1", y, 1, 1, theta)?;
        }
        2 => {
            y = bind.conv(tape, "c1", y, 1, 1, theta)?;
            y = bind.batchnorm(tape, "bn1", y)?;
            y = tape.relu(y)?;
            y = bind.conv(tape, "c2", y, 1, 1, theta)?;
        }
        3 => {
            y = bind.conv(tape, "c1", y, 1, 1, theta)?;
            y = bind.batchnorm(tape, "bn1", y)?;
            y = tape.relu(y)?;
            y = bind.conv(tape, "c2", y, 1, 1, theta)?;
            y = bind.batchnorm(tape, "bn2", y)?;
            y = tape.relu(y)?;
            y = bind.conv(tape, "c3", y, 1, 1, theta)?;
        }
        _ => unreachable!(),
    }
    if spec.extra_bn {
        y = bind.batchnorm(tape, "bn_out", y)?;
    }
    tape.sigmoid(y)
}

/// Convenience wrapper: run the extractor in eval mode on raw images.
pub fn extract_pattern<T: Real>(
    params: &mut ParameterSet<T>,
    spec: &ExtractorSpec,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut bind = Binding::frozen(params, false);
    let x = tape.leaf(images.clone(), false);
    let y = extractor_forward(&mut tape, &mut bind, spec, x)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Progressive per-hierarchy fusion with 1x1 alignment convolutions and
    /// nearest upsampling.
    Hfm,
    /// Ablation arm: every stage map upsampled to a common size, channel
    /// concatenation, one 1x1 convolution.
    Concat,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<FusionMode> {
        match s.to_ascii_lowercase().as_str() {
            "hfm" => Ok(FusionMode::Hfm),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::InvalidArg(format!("unknown fusion mode '{other}'"))),
        }
    }
}

/// Two-stream backbone plan. The stem downsamples by 4 (two stride-2
/// convolutions) and each stage by 2, so with three stages the shallowest
/// fused map sits at input/8: 8x8 for 64-pixel inputs, 32x32 for 256.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HfnSpec {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub fusion_width: usize,
    pub fusion_mode: FusionMode,
    pub input_size: usize,
}

impl Default for HfnSpec {
    fn default() -> Self {
        HfnSpec {
            stem_channels: 16,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            fusion_width: 64,
            fusion_mode: FusionMode::Hfm,
            input_size: 64,
        }
    }
}

impl HfnSpec {
    /// Side length of the predicted pixel map: input/8 under the fixed
    /// stem/stage stride plan (no extra resizing in the pixel head).
    pub fn pixel_map_size(&self) -> usize {
        self.input_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 3 {
            return Err(Error::InvalidArg(
                "exactly 3 stages are required (3 fusion hierarchies)".into(),
            ));
        }
        if self.blocks_per_stage == 0 || self.stem_channels == 0 || self.fusion_width == 0 {
            return Err(Error::InvalidArg("zero-sized backbone plan".into()));
        }
        // stem /4 plus three stride-2 stages
        if self.input_size % 32 != 0 || self.input_size < 32 {
            return Err(Error::InvalidArg(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

const STREAMS: [&str; 2] = ["rgb", "mp"];

fn init_stream<T: Real>(p: &mut ParameterSet<T>, stream: &str, spec: &HfnSpec, rng: &mut impl Rng) {
    let sc = spec.stem_channels;
    init_conv(p, &format!("{stream}.stem.c1"), sc, 3, 3, true, rng);
    init_bn(p, &format!("{stream}.stem.bn1"), sc);
    init_conv(p, &format!("{stream}.stem.c2"), sc, sc, 3, true, rng);
    init_bn(p, &format!("{stream}.stem.bn2"), sc);
    let mut in_c = sc;
    for (si, &out_c) in spec.stage_channels.iter().enumerate() {
        for bi in 0..spec.blocks_per_stage {
            let pre = format!("{stream}.s{si}.b{bi}");
            let block_in = if bi == 0 { in_c } else { out_c };
            init_conv(p, &format!("{pre}.c1"), out_c, block_in, 3, true, rng);
            init_bn(p, &format!("{pre}.bn1"), out_c);
            init_conv(p, &format!("{pre}.c2"), out_c, out_c, 3, true, rng);
            init_bn(p, &format!("{pre}.bn2"), out_c);
            if bi == 0 {
                // projection shortcut across the stride/channel change
                init_conv(p, &format!("{pre}.proj"), out_c, block_in, 1, true, rng);
                init_bn(p, &format!("{pre}.projbn"), out_c);
            }
        }
        in_c = out_c;
    }
}

pub fn build_hfn<T: Real>(spec: &HfnSpec, rng: &mut impl Rng) -> Result<ParameterSet<T>> {
    spec.validate()?;
    let mut p = ParameterSet::new();
    for stream in STREAMS {
        init_stream(&mut p, stream, spec, rng);
    }
    let fw = spec.fusion_width;
    match spec.fusion_mode {
        FusionMode::Hfm => {
            // hierarchy 1 = deepest stage; hierarchies 2 and 3 also align the
            // previous fusion result
            for (hier, &c) in spec.stage_channels.iter().rev().enumerate() {
                let pre = format!("fuse{}", hier + 1);
                init_conv(&mut p, &format!("{pre}.ct"), fw, c, 1, true, rng);
                init_conv(&mut p, &format!("{pre}.cb"), fw, c, 1, true, rng);
                if hier > 0 {
                    init_conv(&mut p, &format!("{pre}.cp"), fw, fw, 1, true, rng);
                }
            }
        }
        FusionMode::Concat => {
            let total: usize = spec.stage_channels.iter().sum::<usize>() * 2;
            init_conv(&mut p, "fusecat", fw, total, 1, true, rng);
        }
    }
    init_conv(&mut p, "pixhead", 1, fw, 1, true, rng);
    let feat = spec.stage_channels.last().unwrap() * 2;
    init_linear(&mut p, "fc", feat, 2, rng);
    Ok(p)
}

fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &mut Binding<'_, T>,
    prefix: &str,
    x: Var,
    stride: usize,
    project: bool,
) -> Result<Var> {
    let zero = T::zero();
    let mut y = bind.conv(tape, &format!("{prefix}.c1"), x, stride, 1, zero)?;
    y = bind.batchnorm(tape, &format!("{prefix}.bn1"), y)?;
    y = tape.relu(y)?;
    y = bind.conv(tape, &format!("{prefix}.c2"), y, 1, 1, zero)?;
    y = bind.batchnorm(tape, &format!("{prefix}.bn2"), y)?;
    let skip = if project {
        let s = bind.conv(tape, &format!("{prefix}.proj"), x, stride, 0, zero)?;
        bind.batchnorm(tape, &format!("{prefix}.projbn"), s)?
    } else {
        x
    };
    let sum = tape.add(y, skip)?;
    tape.relu(sum)
}

/// Run one backbone stream, returning the output of each stage,
/// shallowest first.
fn stream_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &mut Binding<'_, T>,
    spec: &HfnSpec,
    stream: &str,
    x: Var,
) -> Result<Vec<Var>> {
    let zero = T::zero();
    let mut y = bind.conv(tape, &format!("{stream}.stem.c1"), x, 2, 1, zero)?;
    y = bind.batchnorm(tape, &format!("{stream}.stem.bn1"), y)?;
    y = tape.relu(y)?;
    y = bind.conv(tape, &format!("{stream}.stem.c2"), y, 2, 1, zero)?;
    y = bind.batchnorm(tape, &format!("{stream}.stem.bn2"), y)?;
    y = tape.relu(y)?;
    let mut stages = Vec::with_capacity(spec.stage_channels.len());
    for si in 0..spec.stage_channels.len() {
        for bi in 0..spec.blocks_per_stage {
            let pre = format!("{stream}.s{si}.b{bi}");
            let (stride, project) = if bi == 0 { (2, true) } else { (1, false) };
            y = block_forward(tape, bind, &pre, y, stride, project)?;
        }
        stages.push(y);
    }
    Ok(stages)
}

/// One fusion hierarchy: m = C(m_t) + C(m_b) + U(C(m_prev)), where each C is
/// a learned 1x1 channel alignment and U nearest upsampling. `m_prev = None`
/// is the m_0 = 0 case: the third term is omitted.
pub fn hfm_fuse<T: Real>(
    tape: &mut Tape<T>,
    bind: &mut Binding<'_, T>,
    prefix: &str,
    m_t: Var,
    m_b: Var,
    m_prev: Option<Var>,
) -> Result<Var> {
    let zero = T::zero();
    if tape.value(m_t).shape() != tape.value(m_b).shape() {
        return Err(Error::Shape(format!(
            "hfm_fuse: stream maps differ: {:?} vs {:?}",
            tape.value(m_t).shape(),
            tape.value(m_b).shape()
        )));
    }
    let ct = bind.conv(tape, &format!("{prefix}.ct"), m_t, 1, 0, zero)?;
    let cb = bind.conv(tape, &format!("{prefix}.cb"), m_b, 1, 0, zero)?;
    let mut acc = tape.add(ct, cb)?;
    if let Some(prev) = m_prev {
        let target = tape.value(m_t).shape()[2];
        let source = tape.value(prev).shape()[2];
        if source == 0 || target % source != 0 {
            return Err(Error::InvalidArg(format!(
                "hfm_fuse: non-integer upsample factor from {source} to {target}"
            )));
        }
        let cp = bind.conv(tape, &format!("{prefix}.cp"), prev, 1, 0, zero)?;
        let up = tape.upsample_nearest(cp, target / source)?;
        acc = tape.add(acc, up)?;
    }
    Ok(acc)
}

/// Network output vars for one batch: class probabilities and pixel map.
pub struct PredictionVars {
    pub probs: Var,
    pub map: Var,
}

/// Network output values.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// (N,2) softmax probabilities; row sums are 1.
    pub probs: Tensor<T>,
    /// (N,1,P,P) pixel map, values in [0,1].
    pub map: Tensor<T>,
}

/// Full two-stream forward pass: RGB image batch plus same-shape pattern
/// batch in, class probabilities and pixel map out.
pub fn hfn_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &mut Binding<'_, T>,
    spec: &HfnSpec,
    x: Var,
    mp: Var,
) -> Result<PredictionVars> {
    if tape.value(x).shape() != tape.value(mp).shape() {
        return Err(Error::Shape(format!(
            "hfn_forward: image batch {:?} and pattern batch {:?} must share shape",
            tape.value(x).shape(),
            tape.value(mp).shape()
        )));
    }
    let top = stream_forward(tape, bind, spec, "rgb", x)?;
    let bottom = stream_forward(tape, bind, spec, "mp", mp)?;

    let fused = match spec.fusion_mode {
        FusionMode::Hfm => {
            // top-down: hierarchy 1 is the deepest stage, the last fusion has
            // the shallowest (largest) resolution
            let mut prev: Option<Var> = None;
            let n_stages = top.len();
            for hier in 1..=n_stages {
                let si = n_stages - hier;
                let m = hfm_fuse(tape, bind, &format!("fuse{hier}"), top[si], bottom[si], prev)?;
                prev = Some(m);
            }
            prev.unwrap()
        }
        FusionMode::Concat => {
            let target = tape.value(top[0]).shape()[2];
            let mut maps = Vec::new();
            for &m in top.iter().chain(bottom.iter()) {
                let side = tape.value(m).shape()[2];
                let up = if side == target {
                    m
                } else {
                    tape.upsample_nearest(m, target / side)?
                };
                maps.push(up);
            }
            let cat = tape.concat_channels(&maps)?;
            bind.conv(tape, "fusecat", cat, 1, 0, T::zero())?
        }
    };

    let pix = bind.conv(tape, "pixhead", fused, 1, 0, T::zero())?;
    let map = tape.sigmoid(pix)?;

    let top_feat = tape.global_avg_pool(*top.last().unwrap())?;
    let bottom_feat = tape.global_avg_pool(*bottom.last().unwrap())?;
    let feat = tape.concat_channels(&[top_feat, bottom_feat])?;
    let logits = bind.linear(tape, "fc", feat)?;
    let probs = tape.softmax_last(logits)?;
    Ok(PredictionVars { probs, map })
}

/// Joint training loss: BCE on the class probabilities plus MSE between the
/// pixel map and a constant 0/1 target map, equally weighted.
pub fn compute_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: &PredictionVars,
    labels: &[u8],
) -> Result<Var> {
    let bce = tape.bce_loss(pred.probs, labels)?;
    let map_shape = tape.value(pred.map).shape().to_vec();
    if map_shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "compute_loss: {} maps but {} labels",
            map_shape[0],
            labels.len()
        )));
    }
    let per = map_shape[1..].iter().product::<usize>();
    let mut target = Vec::with_capacity(labels.len() * per);
    for &l in labels {
        if l > 1 {
            return Err(Error::InvalidArg(format!(
                "compute_loss: label {l} outside {{0,1}}"
            )));
        }
        target.extend(std::iter::repeat(T::from_f64(l as f64)).take(per));
    }
    let target = tape.leaf(Tensor::new(map_shape, target)?, false);
    let mse = tape.mse_loss(pred.map, target)?;
    tape.add(bce, mse)
}

/// Per-channel local binary pattern map, P=8 neighbors at radius 1, the
/// greater-or-equal convention, bits packed clockwise from the top-left
/// neighbor (top-left = most significant bit), normalized by /255. Borders
/// use edge replication.
pub fn color_lbp_map<T: Real>(images: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = images.dims4("color_lbp_map")?;
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!(
            "color_lbp_map needs at least 3x3 images, got {h}x{w}"
        )));
    }
    // clockwise from top-left
    const OFFSETS: [(isize, isize); 8] = [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, 1),
        (1, 1),
        (1, 0),
        (1, -1),
        (0, -1),
    ];
    let src = images.data();
    let mut out = vec![T::zero(); src.len()];
    let norm = T::from_f64(1.0 / 255.0);
    for plane_idx in 0..n * c {
        let plane = &src[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut out[plane_idx * h * w..(plane_idx + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let center = plane[y as usize * w + x as usize];
                let mut code = 0u32;
                for (bit, (dy, dx)) in OFFSETS.iter().enumerate() {
                    let ny = (y + dy).clamp(0, h as isize - 1) as usize;
                    let nx = (x + dx).clamp(0, w as isize - 1) as usize;
                    if plane[ny * w + nx] >= center {
                        code |= 1 << (7 - bit);
                    }
                }
                dst[y as usize * w + x as usize] = T::from_f64(code as f64) * norm;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
