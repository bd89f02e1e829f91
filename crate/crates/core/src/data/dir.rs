use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::split::{carve_validation, DatasetSplit, SplitKind};
use super::{Sample, SampleSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";
pub const MASK_SUFFIX: &str = "_segmentation.png";
const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "JPG"];

#[derive(Debug, Clone, Default)]
pub struct DirectoryOptions {
    /// Skip ids whose image or mask is missing instead of failing.
    pub allow_missing: bool,
    pub seed: u64,
}

/// Ids whose image or mask could not be found.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MissingReport {
    pub missing_image: Vec<String>,
    pub missing_mask: Vec<String>,
}

impl MissingReport {
    pub fn is_empty(&self) -> bool {
        self.missing_image.is_empty() && self.missing_mask.is_empty()
    }

    fn describe(&self) -> String {
        let list = |v: &[String]| {
            let mut s = v.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
            if v.len() > 10 {
                s.push_str(&format!(", … ({} total)", v.len()));
            }
            s
        };
        let mut parts = Vec::new();
        if !self.missing_image.is_empty() {
            parts.push(format!("no image for: {}", list(&self.missing_image)));
        }
        if !self.missing_mask.is_empty() {
            parts.push(format!("no mask for: {}", list(&self.missing_mask)));
        }
        parts.join("; ")
    }
}

#[derive(Debug, Clone)]
struct Entry {
    image: PathBuf,
    mask: PathBuf,
}

/// Dataset on disk: `images/<id>.{jpg,png}`, `masks/<id>_segmentation.png`,
/// and an optional `manifest.tsv` of `id<TAB>split[<TAB>image<TAB>mask]`
/// lines. Without a manifest every paired id is a training id.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    root: PathBuf,
    size: usize,
    split: DatasetSplit,
    entries: BTreeMap<String, Entry>,
    pub report: MissingReport,
}

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

fn listed_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e));
        if ext_ok {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

impl DirectorySource {
    pub fn open(root: &Path, size: usize, opts: &DirectoryOptions) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Data(format!("dataset directory {} does not exist", root.display())));
        }
        let image_dir = root.join(IMAGE_DIR);
        let mask_dir = root.join(MASK_DIR);
        for d in [&image_dir, &mask_dir] {
            if !d.is_dir() {
                return Err(Error::Data(format!("missing directory {}", d.display())));
            }
        }
        let manifest = root.join(MANIFEST);
        // (id, split, explicit image, explicit mask)
        let rows: Vec<(String, SplitKind, Option<PathBuf>, Option<PathBuf>)> = if manifest.is_file() {
            let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let mut rows = Vec::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.trim_end_matches('\r');
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() < 2 || cols.len() == 3 || cols.len() > 4 {
                    return Err(Error::Data(format!(
                        "{}:{}: expected id<TAB>split[<TAB>image<TAB>mask]",
                        manifest.display(),
                        n + 1
                    )));
                }
                let split = SplitKind::parse(cols[1])
                    .map_err(|e| Error::Data(format!("{}:{}: {e}", manifest.display(), n + 1)))?;
                let paths = (cols.len() == 4).then(|| (root.join(cols[2]), root.join(cols[3])));
                let (img, mask) = paths.map_or((None, None), |(a, b)| (Some(a), Some(b)));
                rows.push((cols[0].to_string(), split, img, mask));
            }
            rows
        } else {
            let mut ids = listed_ids(&image_dir)?;
            for m in listed_ids(&mask_dir)? {
                if let Some(id) = m.strip_suffix("_segmentation") {
                    ids.push(id.to_string());
                }
            }
            ids.sort();
            ids.dedup();
            ids.into_iter().map(|id| (id, SplitKind::Train, None, None)).collect()
        };

        let mut split = DatasetSplit {
            seed: opts.seed,
            ..Default::default()
        };
        let mut entries = BTreeMap::new();
        let mut report = MissingReport::default();
        for (id, kind, img, mask) in rows {
            let image = img.filter(|p| p.is_file()).or_else(|| find_image(&image_dir, &id));
            let mask = mask
                .or_else(|| Some(mask_dir.join(format!("{id}{MASK_SUFFIX}"))))
                .filter(|p| p.is_file());
            match (image, mask) {
                (Some(image), Some(mask)) => {
                    if entries.insert(id.clone(), Entry { image, mask }).is_some() {
                        return Err(Error::Data(format!("duplicate id {id}")));
                    }
                    match kind {
                        SplitKind::Train => split.train.push(id),
                        SplitKind::Val => split.val.push(id),
                        SplitKind::Test => split.test.push(id),
                    }
                }
                (image, mask) => {
                    if image.is_none() {
                        report.missing_image.push(id.clone());
                    }
                    if mask.is_none() {
                        report.missing_mask.push(id);
                    }
                }
            }
        }
        if !report.is_empty() && !opts.allow_missing {
            return Err(Error::Data(format!(
                "unpaired samples under {}: {} (pass --allow-missing to skip them)",
                root.display(),
                report.describe()
            )));
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("no samples found under {}", root.display())));
        }
        split.check_disjoint()?;
        Ok(Self {
            root: root.to_path_buf(),
            size,
            split: carve_validation(split),
            entries,
            report,
        })
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Bilinear resize to `size×size`, scaled to `[0, 1]`, as `[3, S, S]`.
pub(crate) fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let s = size as u32;
    let img = if img.dimensions() == (s, s) {
        img
    } else {
        image::imageops::resize(&img, s, s, FilterType::Triangle)
    };
    let hw = size * size;
    let mut data = vec![0f32; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// Nearest-neighbour resize, then `≥ 128 → 1`.
pub(crate) fn load_mask(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let s = size as u32;
    let img = if img.dimensions() == (s, s) {
        img
    } else {
        image::imageops::resize(&img, s, s, FilterType::Nearest)
    };
    Ok(img.pixels().map(|p| u8::from(p[0] >= 128)).collect())
}

impl SampleSource for DirectorySource {
    fn describe(&self) -> String {
        self.root.display().to_string()
    }

    fn split(&self) -> &DatasetSplit {
        &self.split
    }

    fn size(&self) -> usize {
        self.size
    }

    fn load(&self, id: &str) -> Result<Sample> {
        let e = self
            .entries
            .get(id)
            .ok_or_else(|| Error::Data(format!("unknown sample id {id}")))?;
        Ok(Sample {
            id: id.to_string(),
            image: load_image(&e.image, self.size)?,
            mask: load_mask(&e.mask, self.size)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn write_pair(root: &Path, id: &str, size: u32, mask_on: impl Fn(u32, u32) -> bool) {
        let img = RgbImage::from_fn(size, size, |x, y| Rgb([(x * 7) as u8, (y * 5) as u8, 200]));
        img.save(root.join(IMAGE_DIR).join(format!("{id}.png"))).unwrap();
        let m = GrayImage::from_fn(size, size, |x, y| Luma([if mask_on(x, y) { 255 } else { 0 }]));
        m.save(root.join(MASK_DIR).join(format!("{id}{MASK_SUFFIX}"))).unwrap();
    }

    fn layout() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        std::fs::create_dir(d.path().join(IMAGE_DIR)).unwrap();
        std::fs::create_dir(d.path().join(MASK_DIR)).unwrap();
        d
    }

    #[test]
    fn empty_directory_is_no_samples_error() {
        let d = layout();
        let err = DirectorySource::open(d.path(), 16, &DirectoryOptions::default()).unwrap_err();
        assert!(err.to_string().contains("no samples"), "{err}");
    }

    #[test]
    fn missing_mask_directory_names_path() {
        let d = tempfile::tempdir().unwrap();
        std::fs::create_dir(d.path().join(IMAGE_DIR)).unwrap();
        let err = DirectorySource::open(d.path(), 16, &DirectoryOptions::default()).unwrap_err();
        assert!(err.to_string().contains(MASK_DIR), "{err}");
    }

    #[test]
    fn identity_resize_preserves_mask_pixels() {
        let d = layout();
        write_pair(d.path(), "a", 16, |x, y| x < 5 && y < 9);
        let src = DirectorySource::open(d.path(), 16, &DirectoryOptions::default()).unwrap();
        let s = src.load("a").unwrap();
        assert_eq!(s.mask.iter().filter(|&&v| v == 1).count(), 45);
        assert!(s.mask.iter().all(|&v| v <= 1));
        assert_eq!(s.image.get(&[0, 0, 3]), 21.0 / 255.0);
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(src.load("a").unwrap(), s);
    }

    #[test]
    fn resizing_to_working_size() {
        let d = layout();
        write_pair(d.path(), "a", 40, |x, _| x >= 20);
        let s = DirectorySource::open(d.path(), 16, &DirectoryOptions::default())
            .unwrap()
            .load("a")
            .unwrap();
        assert_eq!(s.image.shape(), &[3, 16, 16]);
        assert_eq!(s.mask.iter().filter(|&&v| v == 1).count(), 8 * 16);
    }

    #[test]
    fn unpaired_ids_reported_unless_allowed() {
        let d = layout();
        for i in 0..5 {
            write_pair(d.path(), &format!("ok{i}"), 8, |_, _| true);
        }
        RgbImage::new(8, 8).save(d.path().join(IMAGE_DIR).join("lonely.png")).unwrap();
        let err = DirectorySource::open(d.path(), 8, &DirectoryOptions::default()).unwrap_err();
        assert!(err.to_string().contains("lonely"), "{err}");
        let src = DirectorySource::open(
            d.path(),
            8,
            &DirectoryOptions {
                allow_missing: true,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(src.report.missing_mask, vec!["lonely".to_string()]);
        assert_eq!(src.split().train.len() + src.split().val.len(), 5);
        assert_eq!(src.split().val.len(), 1);
    }

    #[test]
    fn manifest_controls_split() {
        let d = layout();
        for i in 0..6 {
            write_pair(d.path(), &format!("m{i}"), 8, |_, _| false);
        }
        std::fs::write(
            d.path().join(MANIFEST),
            "# id\tsplit\nm0\ttrain\nm1\ttrain\nm2\tval\nm3\ttest\nm4\ttest\n",
        )
        .unwrap();
        let src = DirectorySource::open(d.path(), 8, &DirectoryOptions::default()).unwrap();
        let s = src.split();
        assert_eq!(s.train, vec!["m0", "m1"]);
        assert_eq!(s.val, vec!["m2"]);
        assert_eq!(s.test, vec!["m3", "m4"]);
        std::fs::write(d.path().join(MANIFEST), "m0\tholdout\n").unwrap();
        assert!(DirectorySource::open(d.path(), 8, &DirectoryOptions::default()).is_err());
    }
}
