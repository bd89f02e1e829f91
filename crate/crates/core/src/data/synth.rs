use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dir::{IMAGE_DIR, MANIFEST, MASK_DIR, MASK_SUFFIX};
use super::split::{carve_validation, DatasetSplit};
use super::{Sample, SampleSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_AREA: f64 = 0.05;
pub const MAX_AREA: f64 = 0.60;
const MAX_TRIES: usize = 200;

/// Star-shaped region `|p − c| ≤ r(θ)` with
/// `r(θ) = radius · (1 + Σ_k a_k cos(kθ + φ_k))`, harmonics `k = 2, 3, …`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub harmonics: Vec<(f64, f64)>,
}

impl Blob {
    pub fn boundary_radius(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(i, &(a, phi))| a * ((i + 2) as f64 * theta + phi).cos())
            .sum();
        self.radius * (1.0 + wobble)
    }

    /// Negative inside, zero on the boundary, positive outside (radial, not
    /// Euclidean, distance).
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        dx.hypot(dy) - self.boundary_radius(dy.atan2(dx))
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub sample: Sample,
    /// Interleaved 8-bit RGB, row-major.
    pub rgb: Vec<u8>,
    pub blobs: Vec<Blob>,
    pub hair_strokes: usize,
    pub ruler: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    pub n: usize,
    pub size: usize,
    /// Use the training ids as the validation set too (overfitting runs)
    /// instead of carving a held-out fifth.
    pub val_is_train: bool,
}

impl SynthOptions {
    pub fn new(seed: u64, size: usize) -> Self {
        Self {
            seed,
            n: 8,
            size,
            val_is_train: false,
        }
    }

    /// Parses `seed=7,n=8[,size=64][,val=train|carve]`.
    pub fn parse(spec: &str, default_size: usize) -> Result<Self> {
        let mut o = Self::new(0, default_size);
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synth option {part:?} is not key=value")))?;
            let num = || {
                v.parse::<u64>()
                    .map_err(|_| Error::Config(format!("synth option {k}: {v:?} is not an integer")))
            };
            match k {
                "seed" => o.seed = num()?,
                "n" => o.n = num()? as usize,
                "size" => o.size = num()? as usize,
                "val" => {
                    o.val_is_train = match v {
                        "train" => true,
                        "carve" => false,
                        _ => return Err(Error::Config(format!("synth option val must be train or carve, got {v:?}"))),
                    }
                }
                _ => return Err(Error::Config(format!("unknown synth option {k:?}"))),
            }
        }
        Ok(o)
    }
}

pub fn sample_id(i: usize) -> String {
    format!("synth_{i:05}")
}

fn sample_blobs(rng: &mut ChaCha8Rng, size: usize) -> Vec<Blob> {
    let s = size as f64;
    let count = if rng.gen_bool(0.3) { 2 } else { 1 };
    (0..count)
        .map(|_| Blob {
            cx: rng.gen_range(0.25..0.75) * s,
            cy: rng.gen_range(0.25..0.75) * s,
            radius: rng.gen_range(0.12..0.38) * s,
            harmonics: (0..3)
                .map(|_| (rng.gen_range(-0.12..0.12), rng.gen_range(0.0..TAU)))
                .collect(),
        })
        .collect()
}

/// Mask sampled at pixel centres.
pub fn rasterize(blobs: &[Blob], size: usize) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            mask[y * size + x] = u8::from(blobs.iter().any(|b| b.signed_distance(px, py) <= 0.0));
        }
    }
    mask
}

fn area_ok(mask: &[u8]) -> bool {
    let frac = mask.iter().map(|&v| v as usize).sum::<usize>() as f64 / mask.len() as f64;
    (MIN_AREA..=MAX_AREA).contains(&frac)
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn paint_disk(rgb: &mut [f64], size: usize, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(size));
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(size));
    for y in y0..y1 {
        for x in x0..x1 {
            if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r {
                rgb[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
            }
        }
    }
}

fn generate_one(seed: u64, index: usize, size: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let s = size as f64;

    let mut blobs = sample_blobs(&mut rng, size);
    let mut mask = rasterize(&blobs, size);
    for _ in 0..MAX_TRIES {
        if area_ok(&mask) {
            break;
        }
        blobs = sample_blobs(&mut rng, size);
        mask = rasterize(&blobs, size);
    }
    if !area_ok(&mask) {
        blobs = vec![Blob {
            cx: s / 2.0,
            cy: s / 2.0,
            radius: 0.25 * s,
            harmonics: vec![],
        }];
        mask = rasterize(&blobs, size);
    }

    let skin_r = rng.gen_range(190.0..235.0);
    let skin = [skin_r, skin_r * rng.gen_range(0.72..0.85), skin_r * rng.gen_range(0.6..0.75)];
    let dark_r = rng.gen_range(80.0..150.0);
    let mut lesion = [dark_r, dark_r * rng.gen_range(0.55..0.7), dark_r * rng.gen_range(0.45..0.6)];
    if rng.gen_bool(0.25) {
        let k = rng.gen_range(0.35..0.55);
        for c in 0..3 {
            lesion[c] = skin[c] + k * (lesion[c] - skin[c]);
        }
    }
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(1.0..4.0) * TAU / s,
                rng.gen_range(1.0..4.0) * TAU / s,
                rng.gen_range(0.0..TAU),
                rng.gen_range(2.0..6.0),
            )
        })
        .collect();

    let mut rgb = vec![0f64; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * px + fy * py + ph).sin()).sum();
            let sd = blobs
                .iter()
                .map(|b| b.signed_distance(px, py))
                .fold(f64::INFINITY, f64::min);
            // darkened rim just outside the boundary softens the edge
            let w = if sd <= 0.0 { 1.0 } else { (0.5 * (1.0 - sd / 2.0)).max(0.0) };
            for c in 0..3 {
                let noise = rng.gen_range(-4.0..4.0);
                let base = skin[c] + texture;
                let inner = lesion[c] + 0.6 * texture + rng.gen_range(-8.0..8.0);
                rgb[(y * size + x) * 3 + c] = base + w * (inner - base) + noise;
            }
        }
    }

    let hair_strokes = if rng.gen_bool(0.5) { rng.gen_range(1..=5) } else { 0 };
    for _ in 0..hair_strokes {
        let p: Vec<(f64, f64)> = (0..3).map(|_| (rng.gen_range(0.0..s), rng.gen_range(0.0..s))).collect();
        let width = rng.gen_range(0.5..1.2);
        let shade = rng.gen_range(25.0..60.0);
        let steps = 4 * size;
        for t in 0..=steps {
            let t = t as f64 / steps as f64;
            let u = 1.0 - t;
            let x = u * u * p[0].0 + 2.0 * u * t * p[1].0 + t * t * p[2].0;
            let y = u * u * p[0].1 + 2.0 * u * t * p[1].1 + t * t * p[2].1;
            paint_disk(&mut rgb, size, x, y, width, [shade, shade * 0.9, shade * 0.8]);
        }
    }

    let ruler = rng.gen_bool(0.3);
    if ruler {
        let spacing = rng.gen_range(4..=6);
        let along_bottom = rng.gen_bool(0.5);
        for (k, pos) in (spacing..size).step_by(spacing).enumerate() {
            let len = if k % 5 == 0 { 6.min(size / 4) } else { 3.min(size / 6) };
            for d in 0..len {
                let (x, y) = if along_bottom { (pos, size - 1 - d) } else { (d, pos) };
                rgb[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&[40.0, 40.0, 40.0]);
            }
        }
    }

    let rgb: Vec<u8> = rgb.into_iter().map(clamp_u8).collect();
    let hw = size * size;
    let mut planar = vec![0f32; 3 * hw];
    for (i, px) in rgb.chunks(3).enumerate() {
        for c in 0..3 {
            planar[c * hw + i] = f32::from(px[c]) / 255.0;
        }
    }
    SynthSample {
        sample: Sample {
            id: sample_id(index),
            image: Tensor::new(vec![3, size, size], planar).expect("image size"),
            mask,
        },
        rgb,
        blobs,
        hair_strokes,
        ruler,
    }
}

/// `n` deterministic synthetic lesion images of side `size`.
pub fn synth_generate(n: usize, size: usize, seed: u64) -> Vec<SynthSample> {
    (0..n).map(|i| generate_one(seed, i, size)).collect()
}

/// Writes the on-disk dataset layout read by [`super::DirectorySource`].
pub fn write_corpus(dir: &Path, samples: &[SynthSample]) -> Result<()> {
    let io = |p: &Path, e| Error::io(p, e);
    let (img_dir, mask_dir) = (dir.join(IMAGE_DIR), dir.join(MASK_DIR));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| io(d, e))?;
    }
    let mut manifest = String::new();
    for s in samples {
        let size = s.sample.size() as u32;
        let id = &s.sample.id;
        let img_path = img_dir.join(format!("{id}.png"));
        RgbImage::from_raw(size, size, s.rgb.clone())
            .expect("rgb buffer size")
            .save(&img_path)
            .map_err(|e| Error::Image {
                path: img_path.clone(),
                source: e,
            })?;
        let mask_path = mask_dir.join(format!("{id}{MASK_SUFFIX}"));
        GrayImage::from_raw(size, size, s.sample.mask.iter().map(|&v| v * 255).collect())
            .expect("mask buffer size")
            .save(&mask_path)
            .map_err(|e| Error::Image {
                path: mask_path.clone(),
                source: e,
            })?;
        manifest.push_str(&format!("{id}\ttrain\n"));
    }
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, manifest).map_err(|e| io(&mpath, e))
}

/// In-memory synthetic corpus.
pub struct SynthSource {
    opts: SynthOptions,
    samples: Vec<Sample>,
    index: HashMap<String, usize>,
    split: DatasetSplit,
}

impl SynthSource {
    pub fn new(opts: SynthOptions) -> Result<Self> {
        if opts.size == 0 || !opts.size.is_multiple_of(4) {
            return Err(Error::Config(format!("synthetic image size {} must be a positive multiple of 4", opts.size)));
        }
        let samples: Vec<Sample> = synth_generate(opts.n, opts.size, opts.seed)
            .into_iter()
            .map(|s| s.sample)
            .collect();
        let index = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let split = if opts.val_is_train {
            DatasetSplit {
                train: ids.clone(),
                val: ids,
                test: vec![],
                seed: opts.seed,
            }
        } else {
            carve_validation(DatasetSplit {
                train: ids,
                seed: opts.seed,
                ..Default::default()
            })
        };
        Ok(Self {
            opts,
            samples,
            index,
            split,
        })
    }
}

impl SampleSource for SynthSource {
    fn describe(&self) -> String {
        format!("synth:seed={},n={},size={}", self.opts.seed, self.opts.n, self.opts.size)
    }

    fn split(&self) -> &DatasetSplit {
        &self.split
    }

    fn size(&self) -> usize {
        self.opts.size
    }

    fn load(&self, id: &str) -> Result<Sample> {
        self.index
            .get(id)
            .map(|&i| self.samples[i].clone())
            .ok_or_else(|| Error::Data(format!("unknown sample id {id}")))
    }
}
