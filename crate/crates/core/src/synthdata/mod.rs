//! Synthetic stand-in for generator images: smooth random content carrying a
//! per-generator periodic fingerprint, JPEG augmentation, cropping without
//! resampling, and forensic feature extraction.

mod features;
mod jpeg;

pub use features::{
    block_dct_magnitudes, dct_bins, dct_feature_index, extract_features, highpass_residual,
    FEATURE_DIM, MIN_FEATURE_SIZE,
};
pub use jpeg::{dct2, idct2, jpeg_degrade, quality_scale, quant_table, LUMINANCE_BASE_TABLE};

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::BufRead;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::types::{ClassId, LabeledDataset, LabeledSample, Split};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImagePatch {
    pub const MIN_SIDE: usize = 8;

    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height < Self::MIN_SIDE || width < Self::MIN_SIDE {
            return Err(Error::Size {
                height,
                width,
                min: Self::MIN_SIDE,
            });
        }
        if pixels.len() != height * width {
            return Err(Error::dim(height * width, pixels.len()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm<R: BufRead>(mut input: R) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            line: 1,
            msg: format!("PGM: {msg}"),
        };
        let mut header = Vec::new();
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            header.clear();
            if input.read_until(b'\n', &mut header)? == 0 {
                return Err(bad("truncated header"));
            }
            let text = String::from_utf8_lossy(&header);
            let text = text.split('#').next().unwrap_or("");
            tokens.extend(text.split_whitespace().map(str::to_owned));
        }
        if tokens.len() != 4 || tokens[0] != "P5" {
            return Err(bad("expected a binary P5 header on its own lines"));
        }
        let parse = |t: &str| t.parse::<usize>().map_err(|_| bad("bad dimension"));
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let mut pixels = vec![0u8; width * height];
        input.read_exact(&mut pixels).map_err(|_| bad("truncated pixel data"))?;
        Self::new(height, width, pixels)
    }
}

/// Per-generator fingerprint: an additive 2-D periodic pattern plus pixel
/// noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorProfile {
    pub name: String,
    /// Pattern period in pixels (≥ 2).
    pub period: u32,
    /// Peak pattern amplitude in intensity levels, in `(0, 30]`.
    pub amplitude: f64,
    /// Pattern offset in pixels along (y, x).
    pub phase: (u32, u32),
    pub noise_std: f64,
}

impl GeneratorProfile {
    pub fn new(name: impl Into<String>, period: u32, amplitude: f64, phase: (u32, u32), noise_std: f64) -> Self {
        Self {
            name: name.into(),
            period,
            amplitude,
            phase,
            noise_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::Profile(format!("{}: period must be ≥ 2", self.name)));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 30.0) {
            return Err(Error::Profile(format!("{}: amplitude must be in (0, 30]", self.name)));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Profile(format!("{}: noise_std must be positive", self.name)));
        }
        Ok(())
    }
}

/// `amplitude · cos(2π(y+φy)/P) · cos(2π(x+φx)/P)`.
pub fn periodic_pattern(profile: &GeneratorProfile, y: usize, x: usize) -> f64 {
    let p = f64::from(profile.period);
    let ay = 2.0 * PI * ((y as u64 + u64::from(profile.phase.0)) % u64::from(profile.period)) as f64 / p;
    let ax = 2.0 * PI * ((x as u64 + u64::from(profile.phase.1)) % u64::from(profile.period)) as f64 / p;
    profile.amplitude * ay.cos() * ax.cos()
}

const CONTENT_STD: f64 = 60.0;
const BLUR_RADIUS: usize = 3;

/// Seeded smooth random content around 128: white noise, two passes of a
/// wrap-around box blur, then a level shift.
pub fn base_field(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed, &[0x6261_7365]);
    let normal = Normal::new(0.0, CONTENT_STD).expect("positive std");
    let mut f: Vec<f64> = (0..size * size).map(|_| normal.sample(&mut rng)).collect();
    let mut tmp = vec![0.0; size * size];
    let k = (2 * BLUR_RADIUS + 1) as f64;
    for _ in 0..2 {
        for y in 0..size {
            for x in 0..size {
                let s: f64 = (0..=2 * BLUR_RADIUS)
                    .map(|d| f[y * size + (x + size + d - BLUR_RADIUS) % size])
                    .sum();
                tmp[y * size + x] = s / k;
            }
        }
        for y in 0..size {
            for x in 0..size {
                let s: f64 = (0..=2 * BLUR_RADIUS)
                    .map(|d| tmp[((y + size + d - BLUR_RADIUS) % size) * size + x])
                    .sum();
                f[y * size + x] = s / k;
            }
        }
    }
    f.iter_mut().for_each(|v| *v += 128.0);
    f
}

fn to_pixel(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Base content alone, quantized to 8 bits.
pub fn base_patch(size: usize, seed: u64) -> Result<ImagePatch> {
    ImagePatch::new(size, size, base_field(size, seed).into_iter().map(to_pixel).collect())
}

/// Base content plus the profile's pattern plus Gaussian pixel noise,
/// rounded and clamped to `[0, 255]`.
pub fn synth_patch(profile: &GeneratorProfile, size: usize, seed: u64) -> Result<ImagePatch> {
    if size < ImagePatch::MIN_SIDE {
        return Err(Error::Size {
            height: size,
            width: size,
            min: ImagePatch::MIN_SIDE,
        });
    }
    let base = base_field(size, seed);
    let mut noise_rng = rng_from(seed, &[0x6e6f_6973]);
    let noise = (profile.noise_std > 0.0)
        .then(|| Normal::new(0.0, profile.noise_std))
        .transpose()
        .map_err(|e| Error::Profile(e.to_string()))?;
    let pixels = base
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let n = noise.map_or(0.0, |d| d.sample(&mut noise_rng));
            to_pixel(b + periodic_pattern(profile, i / size, i % size) + n)
        })
        .collect();
    ImagePatch::new(size, size, pixels)
}

/// JPEG qualities drawn by [`augment`], alongside "no compression".
pub const AUGMENT_QUALITIES: [u8; 5] = [75, 80, 85, 90, 95];

/// Uniform draw over the five qualities and no compression.
pub fn augment_branch(seed: u64) -> Option<u8> {
    let k = rng_from(seed, &[0x6175_676d]).random_range(0..=AUGMENT_QUALITIES.len());
    AUGMENT_QUALITIES.get(k).copied()
}

pub fn augment(patch: &ImagePatch, seed: u64) -> Result<(Option<u8>, ImagePatch)> {
    match augment_branch(seed) {
        Some(q) => Ok((Some(q), jpeg_degrade(patch, q)?)),
        None => Ok((None, patch.clone())),
    }
}

/// Top-left corner drawn uniformly over all valid offsets; pixels are copied,
/// never resampled.
pub fn random_crop(patch: &ImagePatch, crop: usize, seed: u64) -> Result<ImagePatch> {
    if patch.height < crop || patch.width < crop {
        return Err(Error::Size {
            height: patch.height,
            width: patch.width,
            min: crop,
        });
    }
    let (oy, ox) = crop_offset(patch.height, patch.width, crop, seed);
    let mut pixels = Vec::with_capacity(crop * crop);
    for y in oy..oy + crop {
        pixels.extend_from_slice(&patch.pixels[y * patch.width + ox..y * patch.width + ox + crop]);
    }
    ImagePatch::new(crop, crop, pixels)
}

fn crop_offset(height: usize, width: usize, crop: usize, seed: u64) -> (usize, usize) {
    let mut rng = rng_from(seed, &[0x6372_6f70]);
    (rng.random_range(0..=height - crop), rng.random_range(0..=width - crop))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Test samples per unseen class.
    pub unseen_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 500,
            val: 100,
            test: 100,
            unseen_test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seen: Vec<GeneratorProfile>,
    pub unseen: Vec<GeneratorProfile>,
    pub counts: SplitCounts,
    /// Side of the synthesized patch before cropping.
    pub patch_size: usize,
    pub crop_size: usize,
}

impl DatasetSpec {
    /// Five seen and two unseen generators with well separated fingerprints.
    pub fn desk_scale() -> Self {
        Self {
            seen: default_seen_profiles(),
            unseen: default_unseen_profiles(),
            counts: SplitCounts::default(),
            patch_size: 80,
            crop_size: 64,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.seen.is_empty() {
            return Err(Error::Profile("at least one seen profile required".into()));
        }
        let mut keys = BTreeSet::new();
        for p in self.seen.iter().chain(&self.unseen) {
            p.validate()?;
            if !keys.insert((p.period, p.amplitude.to_bits())) {
                return Err(Error::Profile(format!(
                    "duplicate (period, amplitude) = ({}, {})",
                    p.period, p.amplitude
                )));
            }
        }
        if self.crop_size < MIN_FEATURE_SIZE || self.patch_size < self.crop_size {
            return Err(Error::Param(format!(
                "need {MIN_FEATURE_SIZE} ≤ crop_size ≤ patch_size, got crop {} patch {}",
                self.crop_size, self.patch_size
            )));
        }
        Ok(())
    }
}

pub fn default_seen_profiles() -> Vec<GeneratorProfile> {
    vec![
        GeneratorProfile::new("gen-a", 2, 6.0, (0, 0), 1.5),
        GeneratorProfile::new("gen-b", 3, 9.0, (1, 0), 1.5),
        GeneratorProfile::new("gen-c", 4, 12.0, (0, 1), 1.5),
        GeneratorProfile::new("gen-d", 6, 15.0, (2, 3), 1.5),
        GeneratorProfile::new("gen-e", 8, 18.0, (1, 5), 1.5),
    ]
}

pub fn default_unseen_profiles() -> Vec<GeneratorProfile> {
    vec![
        GeneratorProfile::new("gen-u1", 5, 24.0, (0, 0), 6.0),
        GeneratorProfile::new("gen-u2", 2, 20.0, (1, 1), 8.0),
    ]
}

/// Synthesize, augment, crop, and describe one sample.
pub fn make_sample_features(
    profile: &GeneratorProfile,
    patch_size: usize,
    crop_size: usize,
    seed: u64,
    quality: Option<Option<u8>>,
) -> Result<crate::types::FeatureVector> {
    let patch = synth_patch(profile, patch_size, seed)?;
    let patch = match quality {
        None => augment(&patch, seed)?.1,
        Some(Some(q)) => jpeg_degrade(&patch, q)?,
        Some(None) => patch,
    };
    extract_features(&random_crop(&patch, crop_size, seed)?)
}

struct Job<'a> {
    profile: &'a GeneratorProfile,
    class: ClassId,
    split: Split,
    seen: bool,
    index: usize,
    quality: Option<Option<u8>>,
}

fn run_jobs(jobs: &[Job<'_>], patch_size: usize, crop_size: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    jobs.par_iter()
        .map(|j| {
            let s = derive_seed(seed, &[u64::from(j.class.0), j.split as u64, j.index as u64]);
            Ok(LabeledSample {
                features: make_sample_features(j.profile, patch_size, crop_size, s, j.quality)?,
                label: j.class,
                split: j.split,
                seen: j.seen,
            })
        })
        .collect()
}

/// Seen classes get ids `0..S` and train/val/test samples; unseen classes
/// get ids `S..S+U` and test samples only. Samples are ordered by class,
/// split, then index.
pub fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut jobs = Vec::new();
    let mut table = BTreeMap::new();
    for (i, p) in spec.seen.iter().chain(&spec.unseen).enumerate() {
        let class = ClassId(i as u32);
        let seen = i < spec.seen.len();
        table.insert(class, p.name.clone());
        let splits: &[(Split, usize)] = if seen {
            &[
                (Split::Train, spec.counts.train),
                (Split::Val, spec.counts.val),
                (Split::Test, spec.counts.test),
            ]
        } else {
            &[(Split::Test, spec.counts.unseen_test)]
        };
        for &(split, n) in splits {
            jobs.extend((0..n).map(|index| Job {
                profile: p,
                class,
                split,
                seen,
                index,
                quality: None,
            }));
        }
    }
    let samples = run_jobs(&jobs, spec.patch_size, spec.crop_size, seed)?;
    LabeledDataset::new(samples, table)
}

/// Many-class surrogate pretext task: each class has its own fingerprint
/// and a fixed JPEG quality (or none), so classes differ in both pattern and
/// quantization traces. All samples are in the train split.
pub fn pretext_profiles(classes: usize) -> Vec<(GeneratorProfile, Option<u8>)> {
    const QUALITIES: [Option<u8>; 6] = [None, Some(95), Some(90), Some(85), Some(80), Some(75)];
    (0..classes)
        .map(|i| {
            let period = 2 + (i % 9) as u32;
            let amplitude = 4.0 + 3.0 * (i / 9) as f64 + 1.5 * (i % 4) as f64;
            let noise = 1.0 + 0.5 * (i % 5) as f64;
            let profile = GeneratorProfile::new(
                format!("cam-{i:02}"),
                period,
                amplitude.min(30.0),
                ((i % 3) as u32, (i % 2) as u32),
                noise,
            );
            (profile, QUALITIES[i % QUALITIES.len()])
        })
        .collect()
}

pub fn build_pretext_dataset(
    classes: usize,
    per_class: usize,
    patch_size: usize,
    crop_size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::Param(format!("pretext task needs ≥ 2 classes, got {classes}")));
    }
    if crop_size < MIN_FEATURE_SIZE || patch_size < crop_size {
        return Err(Error::Param("need 32 ≤ crop_size ≤ patch_size".into()));
    }
    let profiles = pretext_profiles(classes);
    let mut table = BTreeMap::new();
    let mut jobs = Vec::new();
    for (i, (p, q)) in profiles.iter().enumerate() {
        let class = ClassId(i as u32);
        table.insert(class, p.name.clone());
        jobs.extend((0..per_class).map(|index| Job {
            profile: p,
            class,
            split: Split::Train,
            seen: true,
            index,
            quality: Some(*q),
        }));
    }
    let samples = run_jobs(&jobs, patch_size, crop_size, derive_seed(seed, &[0x7072_6574]))?;
    LabeledDataset::new(samples, table)
}
