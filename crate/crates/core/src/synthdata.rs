//! Seeded synthetic paired cohorts: bags of patch embeddings with spatial
//! centroids, profile vectors, labels, and a shifted external cohort.
//!
//! All randomness comes from ChaCha8. Prototypes, label shuffles and every
//! sample draw from separate streams of one seed, so a sample never depends
//! on the order in which others are generated.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

pub const SAMPLE_MAGIC: &[u8; 6] = b"MOMKD1";
pub const SAMPLE_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "momkd-synth";

const PROTOTYPE_STREAM: u64 = 0;
const SAMPLE_STREAM_BASE: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub d_in: usize,
    pub g_dim: usize,
    pub pos_fraction: f64,
    pub signal_patch_fraction: f64,
    pub noise_sigma: f64,
    /// Norm of the class prototypes and background means in patch space.
    pub prototype_scale: f64,
    pub background_components: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 50,
            n_test: 100,
            patches_min: 30,
            patches_max: 120,
            d_in: 64,
            g_dim: 32,
            pos_fraction: 0.3,
            signal_patch_fraction: 0.15,
            noise_sigma: 0.5,
            prototype_scale: 3.0,
            background_components: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("every split needs at least one sample".into());
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return bad(format!("patch range [{}, {}] is empty", self.patches_min, self.patches_max));
        }
        if self.d_in < 2 || self.g_dim == 0 {
            return bad(format!("d_in = {} must be at least 2 and g_dim = {} positive", self.d_in, self.g_dim));
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction < 1.0) {
            return bad(format!("pos_fraction must lie in (0, 1), got {}", self.pos_fraction));
        }
        if !(self.signal_patch_fraction >= 0.0 && self.signal_patch_fraction < 1.0) {
            return bad(format!("signal_patch_fraction must lie in [0, 1), got {}", self.signal_patch_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(self.prototype_scale > 0.0 && self.prototype_scale.is_finite()) {
            return bad(format!("prototype_scale must be positive, got {}", self.prototype_scale));
        }
        if self.background_components == 0 {
            return bad("background_components must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Radians, applied in the plane of the positive prototype and a random
    /// orthogonal direction.
    pub feature_rotation_angle: f64,
    /// Length of a random offset added to background patches.
    pub background_shift: f64,
    pub signal_fraction_delta: f64,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            feature_rotation_angle: 1.2,
            background_shift: 3.0,
            signal_fraction_delta: -0.05,
            seed: 1,
        }
    }
}

impl ShiftConfig {
    pub fn is_identity(&self) -> bool {
        self.feature_rotation_angle == 0.0 && self.background_shift == 0.0 && self.signal_fraction_delta == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub label: u8,
    /// `I × D_in`.
    pub embeddings: Tensor,
    /// `I × 2`, in `[0, 1]²`.
    pub centroids: Tensor,
    /// `1 × G`.
    pub profile: Tensor,
}

impl PairedSample {
    pub fn num_patches(&self) -> usize {
        self.embeddings.rows()
    }
}

/// Generator state that later transformations need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Negative then positive class prototype in patch space.
    pub patch_prototypes: [Vec<f64>; 2],
    pub background_means: Vec<Vec<f64>>,
    /// Per split, per sample: `'1'` marks a signal patch.
    pub signal_masks: [Vec<String>; 3],
    pub shifts: Vec<ShiftConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn split(&self, s: SplitName) -> &[PairedSample] {
        match s {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: SplitName) -> &mut Vec<PairedSample> {
        match s {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn d_in(&self) -> usize {
        self.config.d_in
    }

    pub fn g_dim(&self) -> usize {
        self.config.g_dim
    }
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn direction(rng: &mut ChaCha8Rng, d: usize, length: f64) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d);
        let n = norm(&v);
        if n > 1e-6 {
            return v.iter().map(|x| x * length / n).collect();
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Prototypes {
    patch: [Vec<f64>; 2],
    background: Vec<Vec<f64>>,
    profile: [Vec<f64>; 2],
}

fn draw_prototypes(cfg: &SynthConfig) -> Prototypes {
    let mut rng = stream(cfg.seed, PROTOTYPE_STREAM);
    let s = cfg.prototype_scale;
    let patch = [direction(&mut rng, cfg.d_in, s), direction(&mut rng, cfg.d_in, s)];
    let background = (0..cfg.background_components).map(|_| direction(&mut rng, cfg.d_in, s)).collect();
    let profile = [gaussian(&mut rng, cfg.g_dim), gaussian(&mut rng, cfg.g_dim)];
    Prototypes {
        patch,
        background,
        profile,
    }
}

fn noisy<'a>(rng: &mut ChaCha8Rng, mean: &'a [f64], sigma: f64) -> impl Iterator<Item = f64> + 'a {
    let noise = gaussian(rng, mean.len());
    mean.iter().zip(noise).map(move |(m, z)| m + sigma * z)
}

fn balanced_labels(n: usize, pos_fraction: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n_pos = ((pos_fraction * n as f64).round() as usize).min(n);
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(rng);
    labels
}

struct RawSample {
    label: u8,
    embeddings: Vec<f64>,
    centroids: Vec<f64>,
    raw_profile: Vec<f64>,
    mask: Vec<bool>,
}

fn draw_sample(cfg: &SynthConfig, protos: &Prototypes, label: u8, rng: &mut ChaCha8Rng) -> RawSample {
    let i = rng.random_range(cfg.patches_min..=cfg.patches_max);
    let n_signal = (cfg.signal_patch_fraction * i as f64).round() as usize;
    let mut mask = vec![false; i];
    for k in index::sample(rng, i, n_signal) {
        mask[k] = true;
    }
    let mut embeddings = Vec::with_capacity(i * cfg.d_in);
    for &signal in &mask {
        let mean = if signal {
            &protos.patch[label as usize]
        } else {
            &protos.background[rng.random_range(0..protos.background.len())]
        };
        embeddings.extend(noisy(rng, mean, cfg.noise_sigma).map(f32_round));
    }
    let centroids = (0..2 * i).map(|_| f32_round(rng.random::<f64>())).collect();
    let raw_profile = noisy(rng, &protos.profile[label as usize], cfg.noise_sigma).collect();
    RawSample {
        label,
        embeddings,
        centroids,
        raw_profile,
        mask,
    }
}

/// Rounds `values` to `f32` so that their sum is preserved to within one
/// rounding step. Equal inputs round identically.
fn diffuse_to_f32(values: &[f64]) -> Vec<f64> {
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(values[a].total_cmp(&values[b])));
    for i in order {
        match groups.last_mut() {
            Some((v, members)) if *v == values[i] => members.push(i),
            _ => groups.push((values[i], vec![i])),
        }
    }
    let mut out = vec![0.0; values.len()];
    let mut carry = 0.0;
    for (v, members) in groups {
        let near = f32_round(v);
        let other = if near > v {
            (near as f32).next_down() as f64
        } else if near < v {
            (near as f32).next_up() as f64
        } else {
            near
        };
        let k = members.len() as f64;
        let pick = if (carry + k * (v - near)).abs() <= (carry + k * (v - other)).abs() {
            near
        } else {
            other
        };
        carry += k * (v - pick);
        members.into_iter().for_each(|i| out[i] = pick);
    }
    out
}

/// Generates all three splits from `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let protos = draw_prototypes(cfg);
    let sizes = [cfg.n_train, cfg.n_val, cfg.n_test];
    let mut raw: Vec<Vec<RawSample>> = Vec::new();
    let mut global = 0u64;
    for (s, &n) in sizes.iter().enumerate() {
        let labels = balanced_labels(n, cfg.pos_fraction, &mut stream(cfg.seed, 1 + s as u64));
        let part = labels
            .into_iter()
            .map(|label| {
                let mut rng = stream(cfg.seed, SAMPLE_STREAM_BASE + global);
                global += 1;
                draw_sample(cfg, &protos, label, &mut rng)
            })
            .collect();
        raw.push(part);
    }

    let g = cfg.g_dim;
    let n_train = raw[0].len() as f64;
    let mut mean = vec![0.0; g];
    let mut std = vec![0.0; g];
    for j in 0..g {
        mean[j] = raw[0].iter().map(|r| r.raw_profile[j]).sum::<f64>() / n_train;
        let var = raw[0].iter().map(|r| (r.raw_profile[j] - mean[j]).powi(2)).sum::<f64>() / n_train;
        std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let z = |r: &RawSample| -> Vec<f64> { (0..g).map(|j| (r.raw_profile[j] - mean[j]) / std[j]).collect() };
    let mut profiles: Vec<Vec<Vec<f64>>> = raw.iter().map(|part| part.iter().map(z).collect()).collect();
    for j in 0..g {
        let column: Vec<f64> = profiles[0].iter().map(|p| p[j]).collect();
        for (p, q) in profiles[0].iter_mut().zip(diffuse_to_f32(&column)) {
            p[j] = q;
        }
    }
    for part in profiles.iter_mut().skip(1) {
        part.iter_mut().flatten().for_each(|v| *v = f32_round(*v));
    }

    let mut ds = Dataset {
        config: cfg.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        provenance: Provenance {
            patch_prototypes: protos.patch.clone(),
            background_means: protos.background.clone(),
            signal_masks: Default::default(),
            shifts: Vec::new(),
        },
    };
    for (s, (part, profs)) in SplitName::ALL.into_iter().zip(raw.into_iter().zip(profiles)) {
        let mut masks = Vec::with_capacity(part.len());
        let mut samples = Vec::with_capacity(part.len());
        for (k, (r, p)) in part.into_iter().zip(profs).enumerate() {
            let i = r.mask.len();
            masks.push(r.mask.iter().map(|&m| if m { '1' } else { '0' }).collect());
            samples.push(PairedSample {
                id: format!("{}-{k:05}", s.name()),
                label: r.label,
                embeddings: Tensor::matrix(i, cfg.d_in, r.embeddings)?,
                centroids: Tensor::matrix(i, 2, r.centroids)?,
                profile: Tensor::row(p),
            });
        }
        ds.provenance.signal_masks[s as usize] = masks;
        *ds.split_mut(s) = samples;
    }
    Ok(ds)
}

fn rotate_in_plane(x: &mut [f64], u: &[f64], v: &[f64], angle: f64) {
    let a = dot(x, u);
    let b = dot(x, v);
    let (s, c) = angle.sin_cos();
    let na = c * a - s * b;
    let nb = s * a + c * b;
    for ((xi, ui), vi) in x.iter_mut().zip(u).zip(v) {
        *xi += (na - a) * ui + (nb - b) * vi;
    }
}

/// Applies a cohort shift to bag features only; labels and profiles are kept.
///
/// The fraction change regenerates patches, the offset moves background
/// patches, and the rotation acts on every patch. Results are not rounded
/// to `f32`.
pub fn shift(ds: &Dataset, cfg: &ShiftConfig) -> Result<Dataset> {
    if cfg.is_identity() {
        return Ok(ds.clone());
    }
    let frac = ds.config.signal_patch_fraction + cfg.signal_fraction_delta;
    if cfg.signal_fraction_delta != 0.0 && !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!("shifted signal fraction {frac} must lie in (0, 1)")));
    }
    let d = ds.d_in();
    let mut out = ds.clone();
    let mut rng = stream(cfg.seed, 0);
    let u: Vec<f64> = {
        let p = &ds.provenance.patch_prototypes[1];
        let n = norm(p);
        p.iter().map(|x| x / n).collect()
    };
    let v: Vec<f64> = {
        let mut w = direction(&mut rng, d, 1.0);
        let proj = dot(&w, &u);
        w.iter_mut().zip(&u).for_each(|(wi, ui)| *wi -= proj * ui);
        let n = norm(&w);
        w.iter().map(|x| x / n).collect()
    };
    let offset = direction(&mut rng, d, 1.0);

    let mut all_masks = std::mem::take(&mut out.provenance.signal_masks);
    let mut global = 0u64;
    for s in SplitName::ALL {
        let masks = &mut all_masks[s as usize];
        if masks.len() != ds.split(s).len() {
            return Err(Error::Data(format!("provenance lacks signal masks for split {s}")));
        }
        for (sample, mask_str) in out.split_mut(s).iter_mut().zip(masks.iter_mut()) {
            let mut srng = stream(cfg.seed, SAMPLE_STREAM_BASE + global);
            global += 1;
            let mut mask: Vec<bool> = mask_str.chars().map(|c| c == '1').collect();
            let i = sample.num_patches();
            if mask.len() != i {
                return Err(Error::Data(format!("signal mask of {} has wrong length", sample.id)));
            }
            if cfg.signal_fraction_delta != 0.0 {
                let target = (frac * i as f64).round() as usize;
                let current = mask.iter().filter(|&&m| m).count();
                let flip_to = target > current;
                let mut candidates: Vec<usize> = (0..i).filter(|&k| mask[k] != flip_to).collect();
                candidates.shuffle(&mut srng);
                for &k in candidates.iter().take(target.abs_diff(current)) {
                    mask[k] = flip_to;
                    let mean = if flip_to {
                        &ds.provenance.patch_prototypes[sample.label as usize]
                    } else {
                        let bg = &ds.provenance.background_means;
                        &bg[srng.random_range(0..bg.len())]
                    };
                    let row: Vec<f64> = noisy(&mut srng, mean, ds.config.noise_sigma).collect();
                    sample.embeddings.row_slice_mut(k).copy_from_slice(&row);
                }
            }
            for (k, &signal) in mask.iter().enumerate() {
                let row = sample.embeddings.row_slice_mut(k);
                if !signal && cfg.background_shift != 0.0 {
                    row.iter_mut().zip(&offset).for_each(|(x, o)| *x += cfg.background_shift * o);
                }
                if cfg.feature_rotation_angle != 0.0 {
                    rotate_in_plane(row, &u, &v, cfg.feature_rotation_angle);
                }
            }
            *mask_str = mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
        }
    }
    out.provenance.signal_masks = all_masks;
    out.provenance.shifts.push(cfg.clone());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u16,
    pub seed: u64,
    pub config: SynthConfig,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// SHA-256 over the sample files in manifest order.
    pub content_hash: String,
    pub provenance: Provenance,
}

impl Manifest {
    pub fn files(&self, s: SplitName) -> &[String] {
        match s {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_sample(s: &PairedSample) -> Result<Vec<u8>> {
    let (i, d) = s.embeddings.dims2();
    let g = s.profile.len();
    if s.centroids.dims2() != (i, 2) {
        return Err(Error::shape("encode_sample", format!("{} centroids for {i} patches", s.centroids.rows())));
    }
    let mut buf = Vec::with_capacity(21 + 4 * (i * (d + 2) + g));
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    for n in [i, d, g] {
        let n = u32::try_from(n).map_err(|_| Error::Data(format!("dimension {n} exceeds u32")))?;
        buf.extend_from_slice(&n.to_le_bytes());
    }
    buf.push(s.label);
    for v in s.embeddings.data().iter().chain(s.centroids.data()).chain(s.profile.data()) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_sample(bytes: &[u8], id: &str, path: &Path) -> Result<PairedSample> {
    let fail = |r: String| Error::format(path, r);
    if bytes.len() < 21 {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..6] != SAMPLE_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != SAMPLE_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (i, d, g) = (u32_at(8), u32_at(12), u32_at(16));
    let label = bytes[20];
    if label > 1 {
        return Err(fail(format!("label byte {label} is not 0 or 1")));
    }
    let count = i
        .checked_mul(d + 2)
        .and_then(|n| n.checked_add(g))
        .ok_or_else(|| fail("dimensions overflow".into()))?;
    let body = &bytes[21..];
    if body.len() != 4 * count {
        return Err(fail(format!("expected {} payload bytes, found {}", 4 * count, body.len())));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let (emb, rest) = vals.split_at(i * d);
    let (cen, prof) = rest.split_at(2 * i);
    Ok(PairedSample {
        id: id.to_string(),
        label,
        embeddings: Tensor::matrix(i, d, emb.to_vec())?,
        centroids: Tensor::matrix(i, 2, cen.to_vec())?,
        profile: Tensor::row(prof.to_vec()),
    })
}

/// Writes one `.bin` file per sample plus `manifest.json`. Values are stored
/// as `f32`.
pub fn save(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut hasher = Sha256::new();
    let mut lists: [Vec<String>; 3] = Default::default();
    for s in SplitName::ALL {
        for sample in ds.split(s) {
            let file = format!("{}.bin", sample.id);
            let bytes = encode_sample(sample)?;
            hasher.update(&bytes);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            lists[s as usize].push(file);
        }
    }
    let [train, val, test] = lists;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: SAMPLE_VERSION,
        seed: ds.config.seed,
        config: ds.config.clone(),
        train,
        val,
        test,
        content_hash: hex(&hasher.finalize()),
        provenance: ds.provenance.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != MANIFEST_FORMAT || m.version != SAMPLE_VERSION {
        return Err(Error::format(&path, format!("unsupported manifest {} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Reads a dataset written by [`save`], checking every header against the
/// manifest and the content hash against the files.
pub fn load(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let mut hasher = Sha256::new();
    let mut ds = Dataset {
        config: m.config.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        provenance: m.provenance.clone(),
    };
    for s in SplitName::ALL {
        for file in m.files(s) {
            let path = dir.join(file);
            if !path.is_file() {
                return Err(Error::Data(format!("manifest lists {file} but it is missing from {}", dir.display())));
            }
            let mut bytes = Vec::new();
            fs::File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            hasher.update(&bytes);
            let id = file.strip_suffix(".bin").unwrap_or(file);
            let sample = decode_sample(&bytes, id, &path)?;
            if sample.embeddings.cols() != m.config.d_in || sample.profile.len() != m.config.g_dim {
                return Err(Error::format(
                    &path,
                    format!(
                        "dimensions ({}, {}) disagree with manifest ({}, {})",
                        sample.embeddings.cols(),
                        sample.profile.len(),
                        m.config.d_in,
                        m.config.g_dim
                    ),
                ));
            }
            ds.split_mut(s).push(sample);
        }
    }
    let hash = hex(&hasher.finalize());
    if hash != m.content_hash {
        return Err(Error::Data(format!(
            "content hash {hash} does not match manifest {} in {}",
            m.content_hash,
            dir.display()
        )));
    }
    Ok(ds)
}
