//! Synthetic class-imbalanced image datasets, their on-disk layout, and
//! triplet sampling.
//!
//! Every image is uniform background noise with one class-specific glyph
//! stamped at a random position. Pixel values are multiples of 1/255 so that
//! the 8-bit PGM files on disk hold them exactly.
//!
//! Directory layout: `manifest.csv` (`id,filename,label`), one binary PGM
//! (`P5`) per image, and optional `train.txt` / `test.txt` id lists.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Manifest { path: String, line: usize, reason: String },
    #[error("{path}: malformed PGM: {reason}")]
    Pgm { path: String, reason: String },
    #[error("{path}: dataset is empty")]
    Empty { path: String },
    #[error("{path}: manifest lists {manifest} images but the directory holds {files} image files")]
    CountMismatch { path: String, manifest: usize, files: usize },
    #[error("class {class} has {members} member(s); a query class needs at least 2")]
    TooFewMembers { class: usize, members: usize },
    #[error("no negative available: all images share class {0}")]
    NoNegative(usize),
    #[error("triplet count must be at least 1")]
    ZeroCount,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Shapes available as class glyphs, in class order.
pub const GLYPHS: [&str; 8] = ["wedge", "disc", "cross", "ring", "square", "saltire", "bars", "diamond"];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Images per class; class `i` has `class_counts[i]` members.
    pub class_counts: Vec<usize>,
    pub image_size: usize,
    pub roi_size: usize,
    /// Background noise amplitude in `[0, 1]`.
    pub noise_level: f64,
    /// Intensity added on glyph pixels.
    pub contrast: f64,
    /// Largest offset in pixels of the glyph from the image centre along
    /// each axis; values past the border are clamped.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            class_counts: vec![200, 40, 20, 40],
            image_size: 64,
            roi_size: 16,
            noise_level: 0.5,
            contrast: 0.5,
            jitter: 6,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Inclusive range of the glyph's top-left coordinate on each axis.
    pub fn offset_range(&self) -> (usize, usize) {
        let centre = (self.image_size - self.roi_size) / 2;
        let hi = (centre + self.jitter).min(self.image_size - self.roi_size);
        (centre.saturating_sub(self.jitter), hi)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.class_counts.len() < 2 {
            return bad(format!("need at least 2 classes, got {}", self.class_counts.len()));
        }
        if self.class_counts.len() > GLYPHS.len() {
            return bad(format!("at most {} classes are supported", GLYPHS.len()));
        }
        if let Some((c, &n)) = self.class_counts.iter().enumerate().find(|(_, &n)| n < 2) {
            return bad(format!("class {c} has {n} images; every class needs at least 2"));
        }
        if self.roi_size < 3 || self.roi_size >= self.image_size {
            return bad(format!("roi_size {} must be in [3, image_size {})", self.roi_size, self.image_size));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad(format!("noise_level {} must lie in [0, 1]", self.noise_level));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad(format!("contrast {} must lie in (0, 1]", self.contrast));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: u32,
    /// Row-major `image_size^2` grayscale values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn class_counts(&self) -> Vec<usize> {
        let classes = self.images.iter().map(|i| i.label + 1).max().unwrap_or(0);
        let mut counts = vec![0; classes];
        for img in &self.images {
            counts[img.label] += 1;
        }
        counts
    }

    pub fn by_id(&self) -> BTreeMap<u32, &LabeledImage> {
        self.images.iter().map(|i| (i.id, i)).collect()
    }
}

/// Train/test id lists.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

/// Boolean mask of a glyph inside an `roi x roi` box.
pub fn glyph_mask(class: usize, roi: usize) -> Vec<bool> {
    let r = roi as f64;
    let c = (r - 1.0) / 2.0;
    let t = (r / 6.0).max(1.0);
    let mut mask = Vec::with_capacity(roi * roi);
    for y in 0..roi {
        for x in 0..roi {
            let (fy, fx) = (y as f64, x as f64);
            let (dy, dx) = (fy - c, fx - c);
            let rad = (dy * dy + dx * dx).sqrt();
            let on = match class {
                // right triangle, apex top-left
                0 => fx <= fy,
                1 => rad <= r / 2.0,
                2 => dx.abs() <= t / 2.0 + 0.01 || dy.abs() <= t / 2.0 + 0.01,
                3 => rad <= r / 2.0 && rad >= r / 2.0 - t,
                4 => fx < t || fy < t || fx > r - 1.0 - t || fy > r - 1.0 - t,
                5 => (dx - dy).abs() <= t / 2.0 + 0.01 || (dx + dy).abs() <= t / 2.0 + 0.01,
                6 => (y / (t as usize).max(1)).is_multiple_of(2),
                _ => dx.abs() + dy.abs() <= r / 2.0,
            };
            mask.push(on);
        }
    }
    mask
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Deterministic dataset for `spec`. Labels are assigned to ids in a
/// seeded random order so that id order carries no class information.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut labels: Vec<usize> = spec
        .class_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut order_rng);
    let masks: Vec<Vec<bool>> = (0..spec.class_counts.len()).map(|c| glyph_mask(c, spec.roi_size)).collect();
    let s = spec.image_size;
    let images = labels
        .into_iter()
        .enumerate()
        .map(|(id, label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(id as u64 + 1);
            let mut pixels: Vec<f64> = (0..s * s).map(|_| spec.noise_level * rng.gen::<f64>()).collect();
            let (lo, hi) = spec.offset_range();
            let oy = rng.gen_range(lo..=hi);
            let ox = rng.gen_range(lo..=hi);
            for (i, &on) in masks[label].iter().enumerate() {
                if on {
                    let (y, x) = (oy + i / spec.roi_size, ox + i % spec.roi_size);
                    pixels[y * s + x] += spec.contrast;
                }
            }
            pixels.iter_mut().for_each(|p| *p = quantize(*p));
            LabeledImage {
                id: id as u32,
                pixels,
                label,
            }
        })
        .collect();
    Ok(Dataset { image_size: s, images })
}

/// Stratified split: in each class, `round(test_fraction * n)` members
/// (clamped so both sides keep at least one) go to the test list.
pub fn split_dataset(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<Split, DataError> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DataError::Spec(format!("test_fraction {test_fraction} must lie in [0, 1)")));
    }
    let mut per_class: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for img in &dataset.images {
        per_class.entry(img.label).or_default().push(img.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B17);
    let mut split = Split::default();
    for (_, mut ids) in per_class {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let mut t = (test_fraction * n as f64).round() as usize;
        if test_fraction > 0.0 && n >= 2 {
            t = t.clamp(1, n - 1);
        }
        split.test.extend_from_slice(&ids[..t]);
        split.train.extend_from_slice(&ids[t..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Query, positive and negative image ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub q: u32,
    pub p: u32,
    pub n: u32,
}

/// Random triplets over `(id, label)` pairs. The query is uniform over all
/// images, the positive uniform over the other members of its class, and
/// the negative class is drawn with probability proportional to the inverse
/// class size, so small classes serve as negatives more often than their
/// share.
pub fn sample_triplets(items: &[(u32, usize)], count: usize, seed: u64) -> Result<Vec<Triplet>, DataError> {
    if count == 0 {
        return Err(DataError::ZeroCount);
    }
    let mut members: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for &(id, label) in items {
        members.entry(label).or_default().push(id);
    }
    if members.is_empty() {
        return Err(DataError::Empty { path: "<triplet pool>".into() });
    }
    if members.len() < 2 {
        return Err(DataError::NoNegative(*members.keys().next().unwrap()));
    }
    let classes: Vec<usize> = members.keys().copied().collect();
    let inv: Vec<f64> = classes.iter().map(|c| 1.0 / members[c].len() as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (q, label) = items[rng.gen_range(0..items.len())];
        let same = &members[&label];
        if same.len() < 2 {
            return Err(DataError::TooFewMembers {
                class: label,
                members: same.len(),
            });
        }
        let p = loop {
            let cand = same[rng.gen_range(0..same.len())];
            if cand != q {
                break cand;
            }
        };
        let total: f64 = classes.iter().zip(&inv).filter(|(c, _)| **c != label).map(|(_, w)| w).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut neg_class = *classes.iter().rev().find(|&&c| c != label).unwrap();
        for (c, w) in classes.iter().zip(&inv) {
            if *c == label {
                continue;
            }
            if u < *w {
                neg_class = *c;
                break;
            }
            u -= w;
        }
        let pool = &members[&neg_class];
        let n = pool[rng.gen_range(0..pool.len())];
        out.push(Triplet { q, p, n });
    }
    Ok(out)
}

/// Stacks images into an `(N, 1, S, S)` tensor.
pub fn to_batch(images: &[&LabeledImage], size: usize) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(vec![images.len(), 1, size, size], data).expect("image sizes agree")
}

pub fn filename_for(id: u32) -> String {
    format!("img_{id:06}.pgm")
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary 8-bit PGM into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &str) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bad = |reason: &str| DataError::Pgm {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != w * h {
        return Err(bad(&format!("raster has {} bytes, expected {}", raster.len(), w * h)));
    }
    Ok((w, h, raster.to_vec()))
}

fn to_u8(pixels: &[f64]) -> Vec<u8> {
    pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Reads one grayscale image in `[0, 1]`.
pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, px) = decode_pgm(&bytes, &path.display().to_string())?;
    Ok((w, h, px.into_iter().map(|b| b as f64 / 255.0).collect()))
}

pub fn save_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), DataError> {
    fs::write(path, encode_pgm(width, height, pixels)).map_err(io_err(path))
}

pub fn save_dataset(dir: &Path, dataset: &Dataset, split: Option<&Split>) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from("id,filename,label\n");
    for img in &dataset.images {
        let name = filename_for(img.id);
        manifest.push_str(&format!("{},{},{}\n", img.id, name, img.label));
        let s = dataset.image_size;
        save_pgm(&dir.join(&name), s, s, &to_u8(&img.pixels))?;
    }
    let mpath = dir.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    if let Some(split) = split {
        for (name, ids) in [("train.txt", &split.train), ("test.txt", &split.test)] {
            let p = dir.join(name);
            let body: String = ids.iter().map(|id| format!("{id}\n")).collect();
            fs::write(&p, body).map_err(io_err(&p))?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let shown = dir.display().to_string();
    if !dir.is_dir() {
        return Err(DataError::Io {
            path: shown,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let mpath = dir.join("manifest.csv");
    if !mpath.exists() {
        let any = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if !any {
            return Err(DataError::Empty { path: shown });
        }
    }
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let mp = mpath.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "id,filename,label" => {}
        _ => {
            return Err(DataError::Manifest {
                path: mp,
                line: 1,
                reason: "expected header `id,filename,label`".into(),
            })
        }
    }
    let mut images = Vec::new();
    let mut size = None;
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DataError::Manifest {
            path: mp.clone(),
            line: i + 1,
            reason,
        };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", cols.len())));
        }
        let id: u32 = cols[0].parse().map_err(|_| bad(format!("bad id `{}`", cols[0])))?;
        let label: usize = cols[2].parse().map_err(|_| bad(format!("bad label `{}`", cols[2])))?;
        if !seen.insert(id) {
            return Err(bad(format!("duplicate id {id}")));
        }
        let (w, h, pixels) = load_pgm(&dir.join(cols[1]))?;
        if w != h || *size.get_or_insert(w) != w {
            return Err(DataError::Pgm {
                path: dir.join(cols[1]).display().to_string(),
                reason: format!("{w}x{h} does not match the dataset image size"),
            });
        }
        images.push(LabeledImage { id, pixels, label });
    }
    if images.is_empty() {
        return Err(DataError::Empty { path: shown });
    }
    let files = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .count();
    if files != images.len() {
        return Err(DataError::CountMismatch {
            path: mp,
            manifest: images.len(),
            files,
        });
    }
    Ok(Dataset {
        image_size: size.unwrap_or(0),
        images,
    })
}

fn read_ids(path: &Path) -> Result<Vec<u32>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| DataError::Manifest {
                path: path.display().to_string(),
                line: i + 1,
                reason: format!("bad id `{l}`"),
            })
        })
        .collect()
}

pub fn load_split(dir: &Path) -> Result<Split, DataError> {
    Ok(Split {
        train: read_ids(&dir.join("train.txt"))?,
        test: read_ids(&dir.join("test.txt"))?,
    })
}
