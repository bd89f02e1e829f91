//! Segmentation samples, dataset sources and batching.
//!
//! A source is opened from a textual spec through [`open_source`]: either
//! `synth:key=value,...` for a generated corpus or a directory path with the
//! `images/`, `masks/` layout written by [`write_corpus`].

mod dir;
mod split;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use dir::{DirectoryOptions, DirectorySource, MissingReport};
pub use split::{carve_validation, DatasetSplit, SplitKind, VAL_FRACTION};
pub use synth::{synth_generate, write_corpus, Blob, SynthOptions, SynthSample, SynthSource};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its binary mask, both at the working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, S, S]`, RGB, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `S·S` values in `{0, 1}`.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn mask_tensor(&self) -> Tensor<f32> {
        let s = self.size();
        Tensor::new(vec![1, s, s], self.mask.iter().map(|&v| f32::from(v)).collect()).expect("mask size")
    }
}

/// A dataset with a fixed split and per-id loading.
pub trait SampleSource {
    fn describe(&self) -> String;
    fn split(&self) -> &DatasetSplit;
    /// Side length of every loaded sample.
    fn size(&self) -> usize;
    fn load(&self, id: &str) -> Result<Sample>;

    fn load_all(&self, ids: &[String]) -> Result<Vec<Sample>> {
        ids.iter().map(|id| self.load(id)).collect()
    }
}

type Opener = fn(&str, usize, &DirectoryOptions) -> Result<Box<dyn SampleSource>>;

/// Scheme-prefixed sources; anything unmatched is treated as a directory.
const SOURCES: &[(&str, Opener)] = &[("synth:", open_synth)];

fn open_synth(spec: &str, size: usize, _: &DirectoryOptions) -> Result<Box<dyn SampleSource>> {
    let opts = SynthOptions::parse(spec, size)?;
    Ok(Box::new(SynthSource::new(opts)?))
}

pub fn source_schemes() -> Vec<&'static str> {
    SOURCES.iter().map(|(s, _)| *s).collect()
}

/// Opens `spec` at working resolution `size`.
pub fn open_source(spec: &str, size: usize, opts: &DirectoryOptions) -> Result<Box<dyn SampleSource>> {
    for (scheme, open) in SOURCES {
        if let Some(rest) = spec.strip_prefix(scheme) {
            return open(rest, size, opts);
        }
    }
    Ok(Box::new(DirectorySource::open(std::path::Path::new(spec), size, opts)?))
}

/// Ids grouped into batches of `batch_size`, the last one possibly shorter.
/// With `shuffle`, the order is a seeded permutation; otherwise input order.
pub fn batch_iter(ids: &[String], batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<String>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order = ids.to_vec();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Stacked images `[N, 3, S, S]` and masks `[N, 1, S, S]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let masks: Vec<_> = samples.iter().map(Sample::mask_tensor).collect();
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: Tensor::stack(&images)?,
            masks: Tensor::stack(&masks.iter().collect::<Vec<_>>())?,
        })
    }

    pub fn load(source: &dyn SampleSource, ids: &[String]) -> Result<Self> {
        Self::from_samples(&source.load_all(ids)?)
    }
}
