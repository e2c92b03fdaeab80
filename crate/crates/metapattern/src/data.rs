//! Synthetic multi-domain benchmark data.
//!
//! Genuine samples are smooth procedural "faces" (radial gradient plus soft
//! blobs); spoof samples start from the same renderer and add recapture
//! artifacts (moire grating, specular highlight, quantization banding, extra
//! blur). Every sample then passes through a per-domain camera pipeline
//! (channel gains, gamma, sensor noise, optional blur), so domains differ in
//! global statistics while the genuine/spoof cue is domain-independent.
//!
//! Labels: genuine = 1, spoof = 0.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GENUINE: u8 = 1;
pub const SPOOF: u8 = 0;

/// Deterministic named substream of a master seed.
pub fn substream(master_seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Camera pipeline of one domain.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Per-channel gain, each in [0.6, 1.4].
    pub gain: [f64; 3],
    /// Gamma exponent in [0.7, 1.5].
    pub gamma: f64,
    /// Additive Gaussian noise sigma in [0, 0.08].
    pub noise_sigma: f64,
    /// Box blur radius, 0 / 1 / 2.
    pub blur_radius: usize,
}

impl DomainSpec {
    /// Domain `idx` of `count`. Parameters are spread on fixed grids (with a
    /// little seeded jitter) so any two domains differ in global color
    /// statistics.
    pub fn for_index(master_seed: u64, idx: usize, count: usize) -> DomainSpec {
        let mut rng = substream(master_seed, &format!("domain-{idx}"));
        let t = if count > 1 {
            idx as f64 / (count - 1) as f64
        } else {
            0.5
        };
        // rotate which channel carries the strong gain so domains are
        // linearly separable from channel means
        let hi = 0.6 + 0.8 * (0.75 + 0.25 * rng.gen::<f64>());
        let lo = 0.6 + 0.8 * (0.10 + 0.15 * rng.gen::<f64>());
        let mid = 0.6 + 0.8 * (0.40 + 0.20 * rng.gen::<f64>());
        let mut gain = [mid, mid, mid];
        gain[idx % 3] = hi;
        gain[(idx + 1) % 3] = lo;
        DomainSpec {
            name: format!("domain{idx}"),
            gain,
            gamma: 0.7 + 0.8 * t,
            noise_sigma: 0.01 + 0.05 * rng.gen::<f64>(),
            blur_radius: idx % 3,
        }
    }
}

/// One labeled image, fully in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    /// (3,H,W), values in [0,1].
    pub image: Tensor<f32>,
    pub label: u8,
    pub domain: usize,
    pub path: Option<PathBuf>,
}

/// A set of samples grouped by domain index.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub domain_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domain_count(&self) -> usize {
        self.domain_names.len()
    }

    /// Indices of all samples in `domain` with `label`.
    pub fn indices(&self, domain: usize, label: u8) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == domain && s.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Stack the given samples into an (N,3,H,W) batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let first = &self.samples[indices[0]].image;
        let (c, h, w) = match first.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Shape(format!("sample must be 3-d, got {s:?}"))),
        };
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
            if s.image.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "inconsistent sample shapes: {:?} vs {:?}",
                    s.image.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// New dataset restricted to the given domains (domain indices are
    /// remapped to the new order).
    pub fn subset_domains(&self, domains: &[usize]) -> Dataset {
        let mut names = Vec::new();
        let mut remap = vec![usize::MAX; self.domain_names.len()];
        for &d in domains {
            remap[d] = names.len();
            names.push(self.domain_names[d].clone());
        }
        let samples = self
            .samples
            .iter()
            .filter(|s| remap[s.domain] != usize::MAX)
            .map(|s| Sample {
                domain: remap[s.domain],
                ..s.clone()
            })
            .collect();
        Dataset {
            samples,
            domain_names: names,
        }
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// In-place per-channel box blur with edge replication.
fn box_blur(img: &mut [f64], h: usize, w: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let norm = 1.0 / ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let src = img.to_vec();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let ny = (y + dy).clamp(0, h as isize - 1) as usize;
                    let nx = (x + dx).clamp(0, w as isize - 1) as usize;
                    acc += src[ny * w + nx];
                }
            }
            img[(y as usize) * w + x as usize] = acc * norm;
        }
    }
}

/// Procedural genuine sample: radial luminance gradient with a few soft
/// color blobs, unique per call through the caller's RNG.
fn render_base(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0f64; 3 * size * size];
    let cx = size as f64 * rng.gen_range(0.35..0.65);
    let cy = size as f64 * rng.gen_range(0.35..0.65);
    let falloff = size as f64 * rng.gen_range(0.6..0.9);
    let base = [
        rng.gen_range(0.45..0.75),
        rng.gen_range(0.35..0.65),
        rng.gen_range(0.30..0.60),
    ];
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let lum = (1.0 - d / falloff).max(0.15);
            for c in 0..3 {
                img[c * size * size + y * size + x] = clamp01(base[c] * lum + 0.1);
            }
        }
    }
    let blobs = rng.gen_range(3..7);
    for _ in 0..blobs {
        let bx = rng.gen_range(0.0..size as f64);
        let by = rng.gen_range(0.0..size as f64);
        let sigma = size as f64 * rng.gen_range(0.05..0.18);
        let amp = [
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.25..0.25),
        ];
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    let p = &mut img[c * size * size + y * size + x];
                    *p = clamp01(*p + amp[c] * g);
                }
            }
        }
    }
    img
}

/// Recapture artifacts layered onto a genuine base.
fn apply_spoof_cues(img: &mut [f64], size: usize, rng: &mut ChaCha8Rng) {
    let plane = size * size;
    // moire grating
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq = rng.gen_range(0.55..0.95);
    let amp = rng.gen_range(0.06..0.12);
    let (sin_a, cos_a) = angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let phase = (x as f64 * cos_a + y as f64 * sin_a) * freq;
            let m = amp * phase.sin();
            for c in 0..3 {
                let p = &mut img[c * plane + y * size + x];
                *p = clamp01(*p + m);
            }
        }
    }
    // specular highlight
    let hx = rng.gen_range(0.2..0.8) * size as f64;
    let hy = rng.gen_range(0.2..0.8) * size as f64;
    let hs = size as f64 * rng.gen_range(0.08..0.15);
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f64 - hx).powi(2) + (y as f64 - hy).powi(2);
            let g = 0.5 * (-d2 / (2.0 * hs * hs)).exp();
            for c in 0..3 {
                let p = &mut img[c * plane + y * size + x];
                *p = clamp01(*p + g);
            }
        }
    }
    // 4-bit banding
    for v in img.iter_mut() {
        *v = (*v * 15.0).round() / 15.0;
    }
    // display/recapture softness
    for c in 0..3 {
        box_blur(&mut img[c * plane..(c + 1) * plane], size, size, 1);
    }
}

/// Per-domain camera pipeline: gains, gamma, blur, noise.
fn apply_domain(img: &mut [f64], size: usize, spec: &DomainSpec, rng: &mut ChaCha8Rng) {
    let plane = size * size;
    for c in 0..3 {
        let chan = &mut img[c * plane..(c + 1) * plane];
        for v in chan.iter_mut() {
            *v = clamp01((*v * spec.gain[c]).powf(spec.gamma));
        }
        box_blur(chan, size, size, spec.blur_radius);
    }
    for v in img.iter_mut() {
        let n: f64 = crate::nn::randn::<f64>(rng);
        *v = clamp01(*v + spec.noise_sigma * n);
    }
}

/// Render one sample of the given class in the given domain.
pub fn render_sample(
    spec: &DomainSpec,
    label: u8,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    if size < 8 {
        return Err(Error::InvalidArg(format!("image size {size} too small")));
    }
    let mut img = render_base(size, rng);
    match label {
        GENUINE => {}
        SPOOF => apply_spoof_cues(&mut img, size, rng),
        l => return Err(Error::InvalidArg(format!("label {l} outside {{0,1}}"))),
    }
    apply_domain(&mut img, size, spec, rng);
    let data: Vec<f32> = img.into_iter().map(|v| v as f32).collect();
    Tensor::new(vec![3, size, size], data)
}

/// Build a whole benchmark in memory: `domains` domains, `per_class` samples
/// of each class per domain.
pub fn generate_dataset(
    domains: usize,
    per_class: usize,
    size: usize,
    master_seed: u64,
) -> Result<Dataset> {
    if domains == 0 || per_class == 0 {
        return Err(Error::InvalidArg("domains and per_class must be positive".into()));
    }
    let mut ds = Dataset::default();
    for d in 0..domains {
        let spec = DomainSpec::for_index(master_seed, d, domains);
        let mut rng = substream(master_seed, &format!("samples-{}", spec.name));
        for label in [GENUINE, SPOOF] {
            for _ in 0..per_class {
                let image = render_sample(&spec, label, size, &mut rng)?;
                ds.samples.push(Sample {
                    image,
                    label,
                    domain: d,
                    path: None,
                });
            }
        }
        ds.domain_names.push(spec.name);
    }
    Ok(ds)
}

/// Write a dataset to `<root>/<domain>/<id>.png` plus `<root>/manifest.csv`
/// with header `path,label,domain` (paths relative to the root).
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let domain = &ds.domain_names[s.domain];
        let rel = format!("{domain}/{i:05}.png");
        let full = root.join(&rel);
        fs::create_dir_all(full.parent().unwrap())?;
        save_png(&s.image, &full)?;
        manifest.push((rel, s.label, domain.clone()));
    }
    let mut f = fs::File::create(root.join("manifest.csv"))?;
    writeln!(f, "path,label,domain")?;
    for (path, label, domain) in manifest {
        writeln!(f, "{path},{label},{domain}")?;
    }
    Ok(())
}

/// Load a dataset previously written by [`write_dataset`] (or anything with
/// the same layout).
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = root.join("manifest.csv");
    let file = fs::File::open(&manifest)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", manifest.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("manifest is empty".into()))??;
    if header.trim() != "path,label,domain" {
        return Err(Error::Data(format!(
            "manifest header must be 'path,label,domain', got '{header}'"
        )));
    }
    let mut ds = Dataset::default();
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Data(format!(
                "manifest row {}: expected 3 fields, got {}",
                row + 2,
                parts.len()
            )));
        }
        let label: u8 = parts[1]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("manifest row {}: bad label '{}'", row + 2, parts[1])))?;
        if label > 1 {
            return Err(Error::Data(format!(
                "manifest row {}: label {label} outside {{0,1}}",
                row + 2
            )));
        }
        let domain_name = parts[2].trim().to_string();
        let domain = match ds.domain_names.iter().position(|n| n == &domain_name) {
            Some(d) => d,
            None => {
                ds.domain_names.push(domain_name);
                ds.domain_names.len() - 1
            }
        };
        let path = root.join(parts[0].trim());
        let image = load_png(&path)
            .map_err(|e| Error::Data(format!("manifest row {}: {e}", row + 2)))?;
        ds.samples.push(Sample {
            image,
            label,
            domain,
            path: Some(path),
        });
    }
    if ds.samples.is_empty() {
        return Err(Error::Data("manifest has no rows".into()));
    }
    Ok(ds)
}

/// Save a (3,H,W) tensor in [0,1] as an RGB8 PNG.
pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("save_png expects (3,H,W), got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Shape(format!("save_png expects 3 channels, got {c}")));
    }
    let plane = h * w;
    let data = image.data();
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            buf.push((data[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Data("png buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Load an RGB PNG as a (3,H,W) tensor in [0,1].
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px.0[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Class- and domain-balanced batch sampler, without replacement inside an
/// epoch: every batch holds `per_class` genuine and `per_class` spoof
/// samples from each listed domain. Pools are reshuffled independently when
/// they run out.
pub struct BalancedSampler {
    /// pools[domain][class] = shuffled index queue
    pools: Vec<[Vec<usize>; 2]>,
    sources: Vec<[Vec<usize>; 2]>,
    per_class: usize,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(ds: &Dataset, domains: &[usize], per_class: usize, rng: ChaCha8Rng) -> Result<BalancedSampler> {
        if per_class == 0 {
            return Err(Error::InvalidArg("per_class must be positive".into()));
        }
        let mut sources = Vec::new();
        for &d in domains {
            if d >= ds.domain_count() {
                return Err(Error::Data(format!("domain index {d} out of range")));
            }
            let spoof = ds.indices(d, SPOOF);
            let genuine = ds.indices(d, GENUINE);
            if spoof.is_empty() || genuine.is_empty() {
                return Err(Error::Data(format!(
                    "domain '{}' is missing a class",
                    ds.domain_names[d]
                )));
            }
            sources.push([spoof, genuine]);
        }
        Ok(BalancedSampler {
            pools: vec![[Vec::new(), Vec::new()]; sources.len()],
            sources,
            per_class,
            rng,
        })
    }

    /// Dataset indices of the next batch, grouped by domain then class.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.pools.len() * 2 * self.per_class);
        for (pool, source) in self.pools.iter_mut().zip(&self.sources) {
            for class in 0..2 {
                for _ in 0..self.per_class {
                    if pool[class].is_empty() {
                        let mut fresh = source[class].clone();
                        fresh.shuffle(&mut self.rng);
                        pool[class] = fresh;
                    }
                    out.push(pool[class].pop().unwrap());
                }
            }
        }
        out
    }

    pub fn batch_size(&self) -> usize {
        self.pools.len() * 2 * self.per_class
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(2, 3, 16, 9).unwrap();
        let b = generate_dataset(2, 3, 16, 9).unwrap();
        assert_eq!(a.len(), 12);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn samples_are_in_range_and_distinct() {
        let ds = generate_dataset(3, 2, 16, 1).unwrap();
        for s in &ds.samples {
            for &v in s.image.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert_ne!(ds.samples[0].image, ds.samples[1].image);
    }

    #[test]
    fn domains_separate_on_channel_means() {
        // nearest-centroid on per-channel means must beat chance clearly
        let ds = generate_dataset(3, 8, 16, 5).unwrap();
        let mean3 = |s: &Sample| {
            let plane = 16 * 16;
            let d = s.image.data();
            [0, 1, 2].map(|c| {
                d[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32
            })
        };
        let mut centroids = vec![[0.0f32; 3]; 3];
        let mut counts = [0usize; 3];
        for s in &ds.samples {
            let m = mean3(s);
            for c in 0..3 {
                centroids[s.domain][c] += m[c];
            }
            counts[s.domain] += 1;
        }
        for d in 0..3 {
            for c in 0..3 {
                centroids[d][c] /= counts[d] as f32;
            }
        }
        let mut correct = 0;
        for s in &ds.samples {
            let m = mean3(s);
            let best = (0..3)
                .min_by(|&a, &b| {
                    let da: f32 = (0..3).map(|c| (m[c] - centroids[a][c]).powi(2)).sum();
                    let db: f32 = (0..3).map(|c| (m[c] - centroids[b][c]).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == s.domain {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.6, "domain separation accuracy {acc}");
    }

    #[test]
    fn png_round_trip_is_exact_at_8_bits() {
        let dir = tempdir().unwrap();
        let ds = generate_dataset(1, 1, 16, 2).unwrap();
        let path = dir.path().join("x.png");
        save_png(&ds.samples[0].image, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), &[3, 16, 16]);
        for (&a, &b) in ds.samples[0].image.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempdir().unwrap();
        let ds = generate_dataset(2, 2, 16, 3).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.domain_names, ds.domain_names);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.domain, b.domain);
            for (&x, &y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn manifest_errors_carry_row_numbers() {
        let dir = tempdir().unwrap();
        std::fs::write(
            dir.path().join("manifest.csv"),
            "path,label,domain\na.png,7,d0\n",
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn balanced_batches_without_replacement() {
        let ds = generate_dataset(2, 4, 16, 4).unwrap();
        let rng = substream(0, "sampler");
        let mut s = BalancedSampler::new(&ds, &[0, 1], 2, rng).unwrap();
        assert_eq!(s.batch_size(), 8);
        let b1 = s.next_batch();
        let b2 = s.next_batch();
        // 4 per class per domain, 2 drawn per batch: two batches exhaust each
        // pool exactly once, so no index repeats across them
        let mut all: Vec<usize> = b1.iter().chain(&b2).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 16);
        // class balance inside a batch
        let genuine = b1.iter().filter(|&&i| ds.samples[i].label == GENUINE).count();
        assert_eq!(genuine, 4);
    }
}
