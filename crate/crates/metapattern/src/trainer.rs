//! Bi-level training of the pattern extractor (phi) and the fusion network
//! (theta), the two ERM baselines used in ablations, and the checkpoint
//! container.
//!
//! One outer iteration in meta mode: split the source domains, take K plain
//! SGD steps on phi against the held-out split with theta frozen, then one
//! momentum-SGD step on theta against the remaining domains with the updated
//! phi frozen (first-order: no gradient flows back into phi), and keep the
//! updated phi.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{substream, BalancedSampler, Dataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::models::{
    build_extractor, build_hfn, color_lbp_map, compute_loss, extract_pattern, extractor_forward,
    hfn_forward, ExtractorSpec, HfnSpec,
};
use crate::nn::{collect_grads, Binding, ParameterSet};
use crate::tensor::{Real, SgdState, Tape, Tensor, Var};

/// Input of the frozen second stream in the fixed-pattern baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternKind {
    /// Second stream sees the raw image.
    Identity,
    /// Second stream sees the handcrafted local-binary-pattern map.
    ColorLbp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Bi-level optimization of phi and theta.
    Meta,
    /// phi and theta updated together on pooled batches.
    JointErm,
    /// theta only, on a fixed handcrafted pattern.
    Fixed(PatternKind),
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "meta" => Ok(TrainMode::Meta),
            "joint_erm" => Ok(TrainMode::JointErm),
            "fixed_identity" => Ok(TrainMode::Fixed(PatternKind::Identity)),
            "fixed_colorlbp" => Ok(TrainMode::Fixed(PatternKind::ColorLbp)),
            m => Err(Error::Config(format!("unknown trainer mode '{m}'"))),
        }
    }

    pub fn uses_extractor(self) -> bool {
        matches!(self, TrainMode::Meta | TrainMode::JointErm)
    }
}

/// Loss closure shared by every step function: given one tape, bindings for
/// phi and theta, and a batch, produce the scalar loss. The bindings decide
/// which side tracks gradients, so the same closure serves inner steps,
/// outer steps, and the ERM baselines.
pub trait LossFn<T: Real, B> {
    fn loss(
        &mut self,
        tape: &mut Tape<T>,
        phi: &mut Binding<'_, T>,
        theta: &mut Binding<'_, T>,
        batch: &B,
    ) -> Result<Var>;
}

impl<T: Real, B, F> LossFn<T, B> for F
where
    F: FnMut(&mut Tape<T>, &mut Binding<'_, T>, &mut Binding<'_, T>, &B) -> Result<Var>,
{
    fn loss(
        &mut self,
        tape: &mut Tape<T>,
        phi: &mut Binding<'_, T>,
        theta: &mut Binding<'_, T>,
        batch: &B,
    ) -> Result<Var> {
        self(tape, phi, theta, batch)
    }
}

/// Draw one domain uniformly for the phi split; the rest train theta.
pub fn split_domains(
    domains: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if domains.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "domain split needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    let pick = rng.gen_range(0..domains.len());
    let d_phi = vec![domains[pick]];
    let d_theta = domains
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pick)
        .map(|(_, &d)| d)
        .collect();
    Ok((d_phi, d_theta))
}

/// K plain-SGD steps on phi with theta frozen. Theta is bit-identical
/// afterwards (its gradients are never formed and its batch-norm running
/// statistics are not touched). K = 0 leaves phi unchanged.
pub fn inner_update<T: Real, B>(
    phi: &mut ParameterSet<T>,
    theta: &mut ParameterSet<T>,
    k: usize,
    alpha: T,
    mut next_batch: impl FnMut() -> Result<B>,
    loss_fn: &mut impl LossFn<T, B>,
) -> Result<()> {
    for _ in 0..k {
        let batch = next_batch()?;
        let mut tape = Tape::new();
        let (loss, bound) = {
            let mut pb = Binding::new(phi, true, true);
            let mut tb = Binding::frozen(theta, true);
            let loss = loss_fn.loss(&mut tape, &mut pb, &mut tb, &batch)?;
            (loss, pb.into_bound())
        };
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &bound);
        phi.apply_grads(&grads, alpha, T::zero())?;
    }
    Ok(())
}

/// One outer iteration: inner_update on the phi split, then one momentum-SGD
/// step on theta with the updated phi frozen. Returns the outer loss.
#[allow(clippy::too_many_arguments)]
pub fn meta_train_step<T: Real, B>(
    phi: &mut ParameterSet<T>,
    theta: &mut ParameterSet<T>,
    k: usize,
    alpha: T,
    momentum: T,
    inner_batch: impl FnMut() -> Result<B>,
    outer_batch: &B,
    loss_fn: &mut impl LossFn<T, B>,
) -> Result<T> {
    inner_update(phi, theta, k, alpha, inner_batch, loss_fn)?;
    let mut tape = Tape::new();
    let (loss, bound) = {
        let mut pb = Binding::frozen(phi, true);
        let mut tb = Binding::new(theta, true, true);
        let loss = loss_fn.loss(&mut tape, &mut pb, &mut tb, outer_batch)?;
        (loss, tb.into_bound())
    };
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &bound);
    theta.apply_grads(&grads, alpha, momentum)?;
    Ok(value)
}

/// One pooled-batch ERM step. `train_phi` selects joint training of both
/// parameter sets versus theta only (fixed-pattern baselines and the K=0
/// degenerate case).
pub fn erm_step<T: Real, B>(
    phi: &mut ParameterSet<T>,
    theta: &mut ParameterSet<T>,
    train_phi: bool,
    alpha: T,
    momentum: T,
    batch: &B,
    loss_fn: &mut impl LossFn<T, B>,
) -> Result<T> {
    let mut tape = Tape::new();
    let (loss, phi_bound, theta_bound) = {
        let mut pb = if train_phi {
            Binding::new(phi, true, true)
        } else {
            Binding::frozen(phi, true)
        };
        let mut tb = Binding::new(theta, true, true);
        let loss = loss_fn.loss(&mut tape, &mut pb, &mut tb, batch)?;
        (loss, pb.into_bound(), tb.into_bound())
    };
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    if train_phi {
        let grads = collect_grads(&tape, &phi_bound);
        phi.apply_grads(&grads, alpha, momentum)?;
    }
    let grads = collect_grads(&tape, &theta_bound);
    theta.apply_grads(&grads, alpha, momentum)?;
    Ok(value)
}

/// One image batch: (N,3,H,W) images and their labels.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// The full two-stream objective as a [`LossFn`] over image batches.
pub struct ModelObjective {
    pub mode: TrainMode,
    pub extractor: ExtractorSpec,
    pub hfn: HfnSpec,
}

impl LossFn<f32, ImageBatch> for ModelObjective {
    fn loss(
        &mut self,
        tape: &mut Tape<f32>,
        phi: &mut Binding<'_, f32>,
        theta: &mut Binding<'_, f32>,
        batch: &ImageBatch,
    ) -> Result<Var> {
        let x = tape.leaf(batch.images.clone(), false);
        let pattern = match self.mode {
            TrainMode::Meta | TrainMode::JointErm => {
                extractor_forward(tape, phi, &self.extractor, x)?
            }
            TrainMode::Fixed(PatternKind::Identity) => x,
            TrainMode::Fixed(PatternKind::ColorLbp) => {
                tape.leaf(color_lbp_map(&batch.images)?, false)
            }
        };
        let pred = hfn_forward(tape, theta, &self.hfn, x, pattern)?;
        compute_loss(tape, &pred, &batch.labels)
    }
}

/// Eval-mode second-stream input for a trained model.
pub fn pattern_for_eval(
    mode: TrainMode,
    phi: &mut ParameterSet<f32>,
    spec: &ExtractorSpec,
    images: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    match mode {
        TrainMode::Meta | TrainMode::JointErm => extract_pattern(phi, spec, images),
        TrainMode::Fixed(PatternKind::Identity) => Ok(images.clone()),
        TrainMode::Fixed(PatternKind::ColorLbp) => color_lbp_map(images),
    }
}

#[derive(Clone, Debug)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss: f64,
    pub heldout_auc: Option<f64>,
    pub heldout_hter: Option<f64>,
}

/// CSV with header `iter,loss,heldout_auc,heldout_hter`; missing metrics are
/// empty fields.
pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "iter,loss,heldout_auc,heldout_hter")?;
    for r in rows {
        let auc = r.heldout_auc.map(|v| format!("{v:.6}")).unwrap_or_default();
        let hter = r.heldout_hter.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(f, "{},{:.9},{},{}", r.iter, r.loss, auc, hter)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub phi: ParameterSet<f32>,
    pub theta: ParameterSet<f32>,
    pub history: Vec<HistoryRow>,
    pub mode: TrainMode,
}

fn draw_batch(
    ds: &Dataset,
    samplers: &mut BTreeMap<usize, BalancedSampler>,
    domains: &[usize],
) -> Result<ImageBatch> {
    let mut indices = Vec::new();
    for d in domains {
        let s = samplers
            .get_mut(d)
            .ok_or_else(|| Error::Data(format!("no sampler for domain {d}")))?;
        indices.extend(s.next_batch());
    }
    let (images, labels) = ds.batch(&indices)?;
    Ok(ImageBatch { images, labels })
}

/// Run the configured trainer on the given training domains of `ds`.
/// `heldout` supplies the dataset scored at `train.eval_every` cadence.
/// `out_dir` enables periodic checkpoints when `train.checkpoint_every` > 0.
pub fn train(
    cfg: &RunConfig,
    ds: &Dataset,
    train_domains: &[usize],
    heldout: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mode = TrainMode::parse(&cfg.mode)?;
    if train_domains.is_empty() {
        return Err(Error::Data("no training domains".into()));
    }
    if mode == TrainMode::Meta && train_domains.len() < 2 {
        return Err(Error::Data(
            "meta mode needs at least 2 training domains".into(),
        ));
    }

    let mut phi = if mode.uses_extractor() {
        build_extractor::<f32>(&cfg.extractor, &mut substream(cfg.seed, "init-phi"))?
    } else {
        ParameterSet::new()
    };
    let mut theta = build_hfn::<f32>(&cfg.hfn, &mut substream(cfg.seed, "init-theta"))?;

    let mut samplers = BTreeMap::new();
    for &d in train_domains {
        let rng = substream(cfg.seed, &format!("sampler-{}", ds.domain_names[d]));
        samplers.insert(
            d,
            BalancedSampler::new(ds, &[d], cfg.train.batch_per_class, rng)?,
        );
    }
    let mut split_rng = substream(cfg.seed, "split");

    let mut objective = ModelObjective {
        mode,
        extractor: cfg.extractor.clone(),
        hfn: cfg.hfn.clone(),
    };
    let alpha = cfg.train.alpha as f32;
    let momentum = cfg.train.momentum as f32;

    let mut history = Vec::with_capacity(cfg.train.steps);
    for t in 1..=cfg.train.steps {
        let loss = match mode {
            TrainMode::Meta => {
                let (d_phi, d_theta) = split_domains(train_domains, &mut split_rng)?;
                let outer = draw_batch(ds, &mut samplers, &d_theta)?;
                meta_train_step(
                    &mut phi,
                    &mut theta,
                    cfg.train.k_inner,
                    alpha,
                    momentum,
                    || draw_batch(ds, &mut samplers, &d_phi),
                    &outer,
                    &mut objective,
                )?
            }
            TrainMode::JointErm => {
                let batch = draw_batch(ds, &mut samplers, train_domains)?;
                erm_step(&mut phi, &mut theta, true, alpha, momentum, &batch, &mut objective)?
            }
            TrainMode::Fixed(_) => {
                let batch = draw_batch(ds, &mut samplers, train_domains)?;
                erm_step(&mut phi, &mut theta, false, alpha, momentum, &batch, &mut objective)?
            }
        };

        let mut row = HistoryRow {
            iter: t,
            loss: loss as f64,
            heldout_auc: None,
            heldout_hter: None,
        };
        if cfg.train.eval_every > 0 && t % cfg.train.eval_every == 0 {
            if let Some(hd) = heldout {
                let scored = score_with(cfg, mode, &mut phi, &mut theta, hd)?;
                row.heldout_auc = Some(eval::auc(&scored)?);
                row.heldout_hter = Some(eval::hter(&scored)?);
            }
        }
        history.push(row);

        if cfg.train.checkpoint_every > 0 && t % cfg.train.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                let ck = make_checkpoint(cfg, &phi, &theta, t as u64)?;
                save_checkpoint(&ck, &dir.join("checkpoint.mpck"))?;
            }
        }
    }

    Ok(TrainOutcome {
        phi,
        theta,
        history,
        mode,
    })
}

/// Score a dataset with the current model in eval mode.
pub fn score_with(
    cfg: &RunConfig,
    mode: TrainMode,
    phi: &mut ParameterSet<f32>,
    theta: &mut ParameterSet<f32>,
    ds: &Dataset,
) -> Result<Vec<(f64, u8)>> {
    let ext = cfg.extractor.clone();
    eval::score_dataset(theta, &cfg.hfn, ds, cfg.train.eval_batch, |images| {
        pattern_for_eval(mode, phi, &ext, images)
    })
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug)]
pub struct Checkpoint {
    pub phi: ParameterSet<f32>,
    pub theta: ParameterSet<f32>,
    pub iteration: u64,
    /// Config snapshot and any run metadata, stored verbatim.
    pub meta: serde_json::Value,
}

pub fn make_checkpoint(
    cfg: &RunConfig,
    phi: &ParameterSet<f32>,
    theta: &ParameterSet<f32>,
    iteration: u64,
) -> Result<Checkpoint> {
    let meta = serde_json::json!({
        "config": serde_json::to_value(cfg)
            .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?,
    });
    Ok(Checkpoint {
        phi: phi.clone(),
        theta: theta.clone(),
        iteration,
        meta,
    })
}

impl Checkpoint {
    pub fn config(&self) -> Result<RunConfig> {
        let value = self
            .meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint("no config snapshot in checkpoint".into()))?;
        serde_json::from_value(value.clone())
            .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct MetaBlob {
    iteration: u64,
    trainable: BTreeMap<String, bool>,
    momentum: BTreeMap<String, f64>,
    meta: serde_json::Value,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let name_bytes = name.as_bytes();
    if name_bytes.len() > u16::MAX as usize {
        return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
    }
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(crate::tensor::Dtype::F32 as u8);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        Real::to_le_bytes(v, out);
    }
    Ok(())
}

/// Serialize to the container format: magic, version, tensor count, tensors
/// (name, dtype, dims, raw little-endian data), then a length-prefixed JSON
/// blob with the iteration counter, trainability flags, optimizer momenta,
/// and the caller's metadata. Optimizer velocities ride along as tensors
/// named `v.<set>.<param>`.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut trainable = BTreeMap::new();
    let mut momentum = BTreeMap::new();
    for (set_name, set) in [("phi", &ck.phi), ("theta", &ck.theta)] {
        for (name, p) in set.iter() {
            let full = format!("{set_name}.{name}");
            tensors.push((full.clone(), p.value.clone()));
            trainable.insert(full.clone(), p.trainable);
            if let Some(opt) = &p.opt {
                momentum.insert(full.clone(), opt.momentum as f64);
                tensors.push((
                    format!("v.{full}"),
                    Tensor::new(vec![opt.velocity.len()], opt.velocity.clone())?,
                ));
            }
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        push_tensor(&mut out, name, t)?;
    }
    let blob = serde_json::to_vec(&MetaBlob {
        iteration: ck.iteration,
        trainable,
        momentum,
        meta: ck.meta.clone(),
    })
    .map_err(|e| Error::Checkpoint(format!("metadata encode: {e}")))?;
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = c.u32()? as usize;
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = crate::tensor::Dtype::from_code(c.u8()?)?;
        if dtype != crate::tensor::Dtype::F32 {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': only f32 checkpoints are produced by this build"
            )));
        }
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(f32::from_le_slice).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let blob_len = c.u32()? as usize;
    let blob: MetaBlob = serde_json::from_slice(c.take(blob_len)?)
        .map_err(|e| Error::Checkpoint(format!("metadata decode: {e}")))?;

    let mut phi = ParameterSet::new();
    let mut theta = ParameterSet::new();
    let mut velocities: Vec<(String, Vec<f32>)> = Vec::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("v.") {
            velocities.push((rest.to_string(), t.into_data()));
        } else {
            let trainable = *blob.trainable.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("tensor '{name}' missing from trainability map"))
            })?;
            if let Some(rest) = name.strip_prefix("phi.") {
                phi.insert(rest, t, trainable);
            } else if let Some(rest) = name.strip_prefix("theta.") {
                theta.insert(rest, t, trainable);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor '{name}'")));
            }
        }
    }
    for (full, velocity) in velocities {
        let mu = *blob
            .momentum
            .get(&full)
            .ok_or_else(|| Error::Checkpoint(format!("velocity '{full}' has no momentum")))?;
        let set = if full.starts_with("phi.") { &mut phi } else { &mut theta };
        let short = full.split_once('.').unwrap().1;
        let param = set.get_mut(short)?;
        if velocity.len() != param.value.numel() {
            return Err(Error::Checkpoint(format!(
                "velocity '{full}' length mismatch"
            )));
        }
        let mut state = SgdState::new(mu as f32, velocity.len())?;
        state.velocity = velocity;
        param.opt = Some(state);
    }
    Ok(Checkpoint {
        phi,
        theta,
        iteration: blob.iteration,
        meta: blob.meta,
    })
}

/// Atomic write: serialize, write to a sibling temp file, rename over the
/// target.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("mpck.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// L = (theta * phi * x - y)^2 on a single (x, y) pair.
    struct ScalarToy;

    impl LossFn<f64, (f64, f64)> for ScalarToy {
        fn loss(
            &mut self,
            tape: &mut Tape<f64>,
            phi: &mut Binding<'_, f64>,
            theta: &mut Binding<'_, f64>,
            batch: &(f64, f64),
        ) -> Result<Var> {
            let p = phi.var(tape, "p")?;
            let t = theta.var(tape, "t")?;
            let prod = tape.mul(p, t)?;
            let pred = tape.scale(prod, batch.0)?;
            let target = tape.leaf(Tensor::scalar(batch.1), false);
            let diff = tape.sub(pred, target)?;
            tape.mul(diff, diff)
        }
    }

    fn scalar_sets() -> (ParameterSet<f64>, ParameterSet<f64>) {
        let mut phi = ParameterSet::new();
        phi.insert("p", Tensor::scalar(1.0), true);
        let mut theta = ParameterSet::new();
        theta.insert("t", Tensor::scalar(1.0), true);
        (phi, theta)
    }

    #[test]
    fn scalar_bilevel_oracle() {
        // brute-force chain rule: dL/dphi = 2 theta^2 phi x^2 = 2 at the
        // start, so phi^1 = 1 - 0.1*2 = 0.8; then dL/dtheta at phi = 0.8 is
        // 2 * theta * phi^2 = 1.28, theta' = 1 - 0.128 = 0.872
        let (mut phi, mut theta) = scalar_sets();
        let loss = meta_train_step(
            &mut phi,
            &mut theta,
            1,
            0.1,
            0.0,
            || Ok((1.0, 0.0)),
            &(1.0, 0.0),
            &mut ScalarToy,
        )
        .unwrap();
        assert!((phi.value("p").unwrap().data()[0] - 0.8).abs() < 1e-12);
        assert!((theta.value("t").unwrap().data()[0] - 0.872).abs() < 1e-12);
        // outer loss evaluated at phi-hat before the theta update
        assert!((loss - 0.64).abs() < 1e-12);
    }

    #[test]
    fn inner_update_freezes_theta_and_k0_is_identity() {
        let (mut phi, mut theta) = scalar_sets();
        let theta_before = theta.clone();
        inner_update(&mut phi, &mut theta, 3, 0.1, || Ok((1.0, 0.0)), &mut ScalarToy).unwrap();
        assert!(theta.bitwise_eq(&theta_before));
        assert!(phi.value("p").unwrap().data()[0] < 1.0);

        let (mut phi0, mut theta0) = scalar_sets();
        let phi_before = phi0.clone();
        inner_update(&mut phi0, &mut theta0, 0, 0.1, || Ok((1.0, 0.0)), &mut ScalarToy).unwrap();
        assert!(phi0.bitwise_eq(&phi_before));
    }

    #[test]
    fn meta_k0_equals_erm_with_frozen_phi() {
        let (mut phi_a, mut theta_a) = scalar_sets();
        let (mut phi_b, mut theta_b) = scalar_sets();
        for step in 0..10 {
            let batch = (1.0 + step as f64 * 0.1, 0.3);
            meta_train_step(
                &mut phi_a,
                &mut theta_a,
                0,
                0.05,
                0.9,
                || unreachable!("K=0 draws no inner batches"),
                &batch,
                &mut ScalarToy,
            )
            .unwrap();
            erm_step(&mut phi_b, &mut theta_b, false, 0.05, 0.9, &batch, &mut ScalarToy).unwrap();
            assert!(theta_a.bitwise_eq(&theta_b), "diverged at step {step}");
            assert!(phi_a.bitwise_eq(&phi_b));
        }
    }

    #[test]
    fn joint_erm_mu0_matches_plain_sgd_on_combined_vector() {
        let (mut phi, mut theta) = scalar_sets();
        erm_step(&mut phi, &mut theta, true, 0.1, 0.0, &(1.0, 0.0), &mut ScalarToy).unwrap();
        // dL/dphi = dL/dtheta = 2 at the start
        assert!((phi.value("p").unwrap().data()[0] - 0.8).abs() < 1e-12);
        assert!((theta.value("t").unwrap().data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn split_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let domains = [0usize, 1, 2];
        let mut counts = [0usize; 3];
        for _ in 0..1000 {
            let (d_phi, d_theta) = split_domains(&domains, &mut rng).unwrap();
            assert_eq!(d_phi.len(), 1);
            assert_eq!(d_theta.len(), 2);
            assert!(!d_theta.contains(&d_phi[0]));
            counts[d_phi[0]] += 1;
        }
        for c in counts {
            let freq = c as f64 / 1000.0;
            assert!((freq - 1.0 / 3.0).abs() < 0.05, "frequency {freq}");
        }
        assert!(split_domains(&[0], &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = RunConfig::default();
        let mut rng = substream(1, "t");
        let phi = build_extractor::<f32>(&cfg.extractor, &mut rng).unwrap();
        let mut theta = ParameterSet::new();
        theta.insert("w", Tensor::new(vec![2], vec![0.5, -0.25]).unwrap(), true);
        let mut st = SgdState::new(0.9f32, 2).unwrap();
        st.velocity = vec![0.125, -2.0];
        theta.get_mut("w").unwrap().opt = Some(st);

        let ck = make_checkpoint(&cfg, &phi, &theta, 42).unwrap();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.iteration, 42);
        assert!(back.phi.bitwise_eq(&phi));
        assert!(back.theta.bitwise_eq(&theta));
        let opt = back.theta.get("w").unwrap().opt.as_ref().unwrap();
        assert_eq!(opt.velocity, vec![0.125, -2.0]);
        assert_eq!(opt.momentum, 0.9);
        // re-encode of the decoded checkpoint is byte-identical
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        // config snapshot survives
        let cfg2 = back.config().unwrap();
        assert_eq!(cfg2.train.k_inner, cfg.train.k_inner);
    }

    #[test]
    fn checkpoint_corruption_errors_are_distinct() {
        let cfg = RunConfig::default();
        let theta = ParameterSet::<f32>::new();
        let ck = make_checkpoint(&cfg, &ParameterSet::new(), &theta, 0).unwrap();
        let bytes = encode_checkpoint(&ck).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let e = decode_checkpoint(&bad_magic).unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");

        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        let e = decode_checkpoint(&bad_version).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");

        let truncated = &bytes[..bytes.len() - 3];
        let e = decode_checkpoint(truncated).unwrap_err().to_string();
        assert!(e.contains("truncated") || e.contains("decode"), "{e}");
    }

    fn tiny_cfg(mode: &str, steps: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.mode = mode.into();
        cfg.train.steps = steps;
        cfg.train.batch_per_class = 1;
        cfg.train.k_inner = 1;
        cfg.extractor.hidden_channels = 2;
        cfg.hfn.stem_channels = 2;
        cfg.hfn.stage_channels = vec![2, 2, 2];
        cfg.hfn.blocks_per_stage = 1;
        cfg.hfn.fusion_width = 2;
        cfg.hfn.input_size = 32;
        cfg
    }

    #[test]
    fn tiny_training_runs_in_every_mode() {
        let ds = crate::data::generate_dataset(3, 3, 32, 7).unwrap();
        for mode in ["meta", "joint_erm", "fixed_identity", "fixed_colorlbp"] {
            let cfg = tiny_cfg(mode, 2);
            let out = train(&cfg, &ds, &[0, 1], Some(&ds.subset_domains(&[2])), None).unwrap();
            assert_eq!(out.history.len(), 2);
            for r in &out.history {
                assert!(r.loss.is_finite());
            }
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = crate::data::generate_dataset(2, 3, 32, 8).unwrap();
        let cfg = tiny_cfg("meta", 3);
        let a = train(&cfg, &ds, &[0, 1], None, None).unwrap();
        let b = train(&cfg, &ds, &[0, 1], None, None).unwrap();
        assert!(a.theta.bitwise_eq(&b.theta));
        assert!(a.phi.bitwise_eq(&b.phi));
        assert_eq!(a.history.last().unwrap().loss, b.history.last().unwrap().loss);
    }
}
