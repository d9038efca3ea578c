//! Deterministic synthetic spine radiographs.
//!
//! The mask is a smooth vertical band whose centreline bows according to the
//! view. The image adds soft band edges, vertebra-like banding, rib-like
//! distractor curves, an illumination gradient, blur and noise, all harsher
//! at lower quality.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pgm::{self, dequantize, quantize};
use super::{minmax_normalize, Quality, SegmentationSample, View};
use crate::error::{invalid, Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Dims, Tensor};

/// Fraction of the height left clear above and below the band.
const BAND_MARGIN: f64 = 0.06;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Geometry of one band; all lengths in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct BandShape {
    pub size: usize,
    /// Main bow amplitude (negative bows left).
    pub amplitude: f64,
    pub phase: f64,
    pub second_harmonic: f64,
    pub second_phase: f64,
    pub drift: f64,
    pub half_width: f64,
    pub width_swing: f64,
    pub width_phase: f64,
}

impl BandShape {
    pub fn centre(&self, y: f64) -> f64 {
        let s = self.size as f64;
        s / 2.0
            + self.amplitude * (PI * y / s + self.phase).sin()
            + self.second_harmonic * (2.0 * PI * y / s + self.second_phase).sin()
            + self.drift * (y / s - 0.5)
    }

    pub fn half_width_at(&self, y: f64) -> f64 {
        let s = self.size as f64;
        (self.half_width + self.width_swing * (2.0 * PI * y / s + self.width_phase).sin()).clamp(0.03 * s, 0.08 * s)
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        let s = self.size as f64;
        (BAND_MARGIN * s).round() as usize..((1.0 - BAND_MARGIN) * s).round() as usize
    }

    pub fn mask(&self) -> BinaryMask {
        let rows = self.rows();
        BinaryMask::from_fn(self.size, self.size, |y, x| {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            rows.contains(&y) && (xc - self.centre(yc)).abs() <= self.half_width_at(yc)
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = uniform(rng, lo, hi);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Samples the band for one view. Width profile and drift come from the
/// patient stream, so the three views of a patient share them.
pub fn band_shape(seed: u64, view: View, size: usize) -> BandShape {
    let s = size as f64;
    let mut patient = ChaCha8Rng::seed_from_u64(seed);
    let half_width = uniform(&mut patient, 0.045, 0.065) * s;
    let width_swing = uniform(&mut patient, 0.0, 0.012) * s;
    let width_phase = uniform(&mut patient, 0.0, 2.0 * PI);
    let drift = uniform(&mut patient, -0.02, 0.02) * s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + view.index() as u64);
    let phase = uniform(&mut rng, -0.2, 0.2);
    let (amplitude, second_harmonic) = match view {
        View::Coronal => (signed(&mut rng, 0.0, 0.04) * s, signed(&mut rng, 0.02, 0.05) * s),
        View::LeftBending => (-uniform(&mut rng, 0.08, 0.15) * s, uniform(&mut rng, -0.015, 0.015) * s),
        View::RightBending => (uniform(&mut rng, 0.08, 0.15) * s, uniform(&mut rng, -0.015, 0.015) * s),
    };
    let second_phase = uniform(&mut rng, 0.0, 2.0 * PI);
    BandShape { size, amplitude, phase, second_harmonic, second_phase, drift, half_width, width_swing, width_phase }
}

struct QualityProfile {
    contrast: (f64, f64),
    ribs: (usize, usize),
    noise: f64,
    blur: f64,
}

fn profile(q: Quality) -> QualityProfile {
    match q {
        Quality::High => QualityProfile { contrast: (0.45, 0.6), ribs: (1, 3), noise: 0.01, blur: 0.6 },
        Quality::Medium => QualityProfile { contrast: (0.32, 0.45), ribs: (3, 5), noise: 0.025, blur: 0.8 },
        Quality::Low => QualityProfile { contrast: (0.22, 0.32), ribs: (5, 7), noise: 0.04, blur: 1.0 },
    }
}

fn smoothstep(edge: f64, softness: f64, d: f64) -> f64 {
    1.0 / (1.0 + (-(edge - d) / softness).exp())
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] =
                k.iter().enumerate().map(|(j, w)| w * img[y * size + clamp(x as isize + j as isize - r)]).sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] =
                k.iter().enumerate().map(|(j, w)| w * tmp[clamp(y as isize + j as isize - r) * size + x]).sum();
        }
    }
    out
}

/// One synthetic radiograph. The image is min-max normalised and quantised
/// to 8-bit levels, so it survives a PGM round trip unchanged.
pub fn generate_sample(seed: u64, view: View, size: usize, quality: Quality) -> Result<SegmentationSample> {
    if size < 32 || !size.is_power_of_two() {
        return Err(invalid!("sample size {size} must be a power of two >= 32"));
    }
    let shape = band_shape(seed, view, size);
    let mask = shape.mask();
    let prof = profile(quality);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(16 + view.index() as u64);
    let s = size as f64;

    let base = uniform(&mut rng, 0.2, 0.35);
    let (gx, gy) = (uniform(&mut rng, -0.15, 0.15), uniform(&mut rng, -0.15, 0.15));
    let contrast = uniform(&mut rng, prof.contrast.0, prof.contrast.1);
    let period = uniform(&mut rng, 0.07, 0.1) * s;
    let period_phase = uniform(&mut rng, 0.0, 2.0 * PI);
    let n_ribs = rng.random_range(prof.ribs.0..=prof.ribs.1);
    let ribs: Vec<(f64, f64, f64)> = (0..n_ribs)
        .map(|_| (uniform(&mut rng, 0.1, 0.9) * s, uniform(&mut rng, 0.1, 0.35) / s, uniform(&mut rng, 0.06, 0.14)))
        .collect();
    let rows = shape.rows();
    let (top, bottom) = (rows.start as f64, rows.end as f64);

    let mut img = vec![0.0; size * size];
    for y in 0..size {
        let yc = y as f64 + 0.5;
        let c = shape.centre(yc);
        let hw = shape.half_width_at(yc);
        let vertical = smoothstep(0.0, 0.6, top - yc) * smoothstep(0.0, 0.6, yc - bottom);
        let banding = 1.0 - 0.2 * (0.5 + 0.5 * (2.0 * PI * yc / period + period_phase).cos());
        for x in 0..size {
            let xc = x as f64 + 0.5;
            let mut v = base + gx * (xc / s - 0.5) + gy * (yc / s - 0.5);
            v += contrast * banding * vertical * smoothstep(hw, 0.6, (xc - c).abs());
            for &(ry, curve, strength) in &ribs {
                let d = yc - (ry + curve * (xc - c).powi(2));
                v += strength * (-d * d / 2.0).exp();
            }
            img[y * size + x] = v;
        }
    }
    let mut img = blur(&img, size, prof.blur);
    let noise = Normal::new(0.0, prof.noise).map_err(|e| invalid!("{e}"))?;
    for v in img.iter_mut() {
        *v += noise.sample(&mut rng);
    }
    let raw = Tensor::from_vec(Dims::new(1, 1, size, size), img.iter().map(|&v| v as f32).collect())?;
    let image = minmax_normalize(&raw)?.map(|v| dequantize(quantize(v as f64)));
    Ok(SegmentationSample { id: String::new(), view, quality, image, mask })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown split `{s}`")))
    }
}

/// Proportions of high, medium and low quality patients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityMix(pub [f64; 3]);

impl Default for QualityMix {
    fn default() -> Self {
        Self([0.5, 0.3, 0.2])
    }
}

impl QualityMix {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("quality mix `{s}`: {e}")))?;
        let arr: [f64; 3] =
            parts.try_into().map_err(|_| Error::Config(format!("quality mix `{s}` needs three values")))?;
        let mix = Self(arr);
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.0.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("quality mix {:?} must be non-negative with a positive sum", self.0)));
        }
        Ok(())
    }

    fn pick(&self, u: f64) -> Quality {
        let total: f64 = self.0.iter().sum();
        let mut acc = 0.0;
        for (q, w) in Quality::ALL.iter().zip(self.0) {
            acc += w / total;
            if u < acc {
                return *q;
            }
        }
        *Quality::ALL.iter().zip(self.0).rev().find(|(_, w)| *w > 0.0).expect("positive weight").0
    }

    pub fn to_text(&self) -> String {
        format!("{},{},{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub view: View,
    pub split: Split,
    pub quality: Quality,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn image_file(&self) -> PathBuf {
        PathBuf::from(self.split.as_str()).join(format!("{}_{}.pgm", self.id, self.view))
    }

    pub fn mask_file(&self) -> PathBuf {
        PathBuf::from(self.split.as_str()).join(format!("{}_{}_mask.pgm", self.id, self.view))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub per_view: usize,
    pub size: usize,
    pub quality_mix: QualityMix,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { per_view: 24, size: 64, quality_mix: QualityMix::default(), seed: 0 }
    }
}

impl SynthConfig {
    /// Patients per split: `per_view` for training and a quarter of that
    /// (at least one) for validation and test.
    pub fn split_sizes(&self) -> [(Split, usize); 3] {
        let held_out = (self.per_view / 4).max(1);
        [(Split::Train, self.per_view), (Split::Val, held_out), (Split::Test, held_out)]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<SegmentationSample> {
        self.entries.iter().zip(&self.samples).filter(|(e, _)| e.split == split).map(|(_, s)| s.clone()).collect()
    }
}

/// Generates every split. Each patient owns one seed shared by its three
/// views, and patients never cross splits.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.per_view == 0 {
        return Err(invalid!("per_view must be >= 1"));
    }
    cfg.quality_mix.validate()?;
    let mut entries = Vec::new();
    let mut samples = Vec::new();
    let mut patient = 0u64;
    for (split, count) in cfg.split_sizes() {
        for _ in 0..count {
            let seed = splitmix64(cfg.seed ^ splitmix64(patient));
            let u = ChaCha8Rng::seed_from_u64(splitmix64(seed)).random::<f64>();
            let quality = cfg.quality_mix.pick(u);
            let id = format!("p{patient:04}");
            for view in View::ALL {
                let mut sample = generate_sample(seed, view, cfg.size, quality)?;
                sample.id = id.clone();
                samples.push(sample);
                entries.push(ManifestEntry { id: id.clone(), view, split, quality, seed });
            }
            patient += 1;
        }
    }
    Ok(Dataset { entries, samples })
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tview\tsplit\tquality\tseed";

pub fn manifest_to_tsv(entries: &[ManifestEntry]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", e.id, e.view, e.split, e.quality, e.seed);
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(MANIFEST_HEADER) {
        return Err(Error::Format("manifest header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("manifest row has {} fields: `{line}`", f.len())));
            }
            Ok(ManifestEntry {
                id: f[0].to_string(),
                view: f[1].parse()?,
                split: f[2].parse()?,
                quality: f[3].parse()?,
                seed: f[4].parse().map_err(|_| Error::Format(format!("bad seed `{}`", f[4])))?,
            })
        })
        .collect()
}

pub fn write_dataset(root: &Path, data: &Dataset) -> Result<()> {
    for split in Split::ALL {
        fs::create_dir_all(root.join(split.as_str()))?;
    }
    for (e, s) in data.entries.iter().zip(&data.samples) {
        pgm::write_pgm(&root.join(e.image_file()), &pgm::image_to_grey(&s.image))?;
        pgm::write_pgm(&root.join(e.mask_file()), &pgm::mask_to_grey(&s.mask))?;
    }
    fs::write(root.join(MANIFEST_FILE), manifest_to_tsv(&data.entries))?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    parse_manifest(&text)
}

/// Loads one split from disk, in manifest order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<SegmentationSample>> {
    let mut out = Vec::new();
    for e in read_manifest(root)?.into_iter().filter(|e| e.split == split) {
        let image = pgm::grey_to_image(&pgm::read_pgm(&root.join(e.image_file()))?);
        let mask = pgm::grey_to_mask(&pgm::read_pgm(&root.join(e.mask_file()))?);
        let sample = SegmentationSample { id: e.id, view: e.view, quality: e.quality, image, mask };
        sample.validate()?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::Format(format!("split `{split}` under {} is empty", root.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_is_deterministic_and_bounded() {
        let a = generate_sample(7, View::Coronal, 64, Quality::Low).unwrap();
        let b = generate_sample(7, View::Coronal, 64, Quality::Low).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = a.image.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(generate_sample(7, View::Coronal, 48, Quality::Low).is_err());
        assert!(generate_sample(7, View::Coronal, 16, Quality::Low).is_err());
    }

    #[test]
    fn views_share_patient_width_profile() {
        let a = band_shape(3, View::LeftBending, 64);
        let b = band_shape(3, View::RightBending, 64);
        assert_eq!((a.half_width, a.drift), (b.half_width, b.drift));
        assert!(a.amplitude < 0.0 && b.amplitude > 0.0);
    }

    #[test]
    fn quality_mix_parsing() {
        assert_eq!(QualityMix::parse("1, 0, 0").unwrap().pick(0.99), Quality::High);
        assert_eq!(QualityMix::parse("0,0,1").unwrap().pick(0.0), Quality::Low);
        assert!(QualityMix::parse("1,2").is_err());
        assert!(QualityMix::parse("-1,1,1").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = SynthConfig { per_view: 2, size: 32, ..Default::default() };
        let data = generate_dataset(&cfg).unwrap();
        assert_eq!(data.entries.len(), 3 * (2 + 1 + 1));
        assert_eq!(parse_manifest(&manifest_to_tsv(&data.entries)).unwrap(), data.entries);
        assert!(parse_manifest("id\tview\n").is_err());
    }
}
