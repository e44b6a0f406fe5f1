//! Dataset handling: a seeded synthetic 9-class texture generator, a
//! directory loader for P6 pixmap images, and the 60:20:20 stratified
//! split.
//!
//! The synthetic classes are procedural texture families (oriented
//! stripes, blobs, checkers) with class-specific color tints; the last
//! class ("Negative") is low-contrast noise and is generated with eight
//! times the per-class count to mirror the class imbalance of the weed
//! dataset this stands in for.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{FloatTensor, Shape};

pub const NUM_CLASSES: usize = 9;

pub const DEFAULT_CLASS_NAMES: [&str; NUM_CLASSES] = [
    "chinese_apple",
    "lantana",
    "parkinsonia",
    "parthenium",
    "prickly_acacia",
    "rubber_vine",
    "siam_weed",
    "snake_weed",
    "negative",
];

/// Images (3 x H x W in [0, 1]) with labels in [0, 9).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<FloatTensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Vec<FloatTensor>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset("images and labels differ in length".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange(bad, class_names.len()));
        }
        Ok(Dataset { images, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn texture_pixel(class: usize, x: f32, y: f32, phase: f32, freq: f32) -> [f32; 3] {
    // per-class dominant tint, strongest in a distinct channel
    let tints: [[f32; 3]; 8] = [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.2, 0.2, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.2, 1.0],
        [0.2, 1.0, 1.0],
        [0.9, 0.6, 0.2],
        [0.5, 0.5, 1.0],
    ];
    let angle = class as f32 * std::f32::consts::PI / 8.0;
    let t = x * angle.cos() + y * angle.sin();
    let v = match class % 4 {
        // oriented stripes
        0 => 0.5 + 0.5 * (freq * t + phase).sin(),
        // blobs
        1 => {
            let a = (freq * x + phase).sin();
            let b = (freq * y + phase).cos();
            0.5 + 0.5 * a * b
        }
        // checker
        2 => {
            let a = ((freq * x + phase).sin() > 0.0) as i32 as f32;
            let b = ((freq * y + phase).sin() > 0.0) as i32 as f32;
            if a == b {
                0.85
            } else {
                0.15
            }
        }
        // radial rings
        _ => {
            let r = (x * x + y * y).sqrt();
            0.5 + 0.5 * (freq * r + phase).sin()
        }
    };
    let tint = tints[class % 8];
    [v * tint[0], v * tint[1], v * tint[2]]
}

fn synth_image(class: usize, size: usize, rng: &mut Rng) -> FloatTensor {
    let mut data = vec![0.0f32; 3 * size * size];
    let phase = rng.uniform(0.0, std::f32::consts::TAU);
    let noise_amp = 0.06;
    if class == NUM_CLASSES - 1 {
        // negative: mid-gray noise with no structure
        for v in &mut data {
            *v = (0.5 + rng.uniform(-0.25, 0.25)).clamp(0.0, 1.0);
        }
    } else {
        let freq = 2.0 + (class % 4) as f32 * 1.5 + rng.uniform(-0.2, 0.2);
        for py in 0..size {
            for px in 0..size {
                let x = px as f32 / size as f32 * std::f32::consts::TAU;
                let y = py as f32 / size as f32 * std::f32::consts::TAU;
                let rgb = texture_pixel(class, x, y, phase, freq);
                for (c, &v) in rgb.iter().enumerate() {
                    data[(c * size + py) * size + px] =
                        (v + rng.uniform(-noise_amp, noise_amp)).clamp(0.0, 1.0);
                }
            }
        }
    }
    FloatTensor::new(Shape::new(&[3, size, size]).unwrap(), data).unwrap()
}

/// Seeded synthetic dataset: `per_class` images for each of the first 8
/// classes and `8 * per_class` for the negative class.
pub fn generate_synthetic(seed: u64, per_class: usize, size: usize) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::Dataset("per-class count must be >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for class in 0..NUM_CLASSES {
        let count = if class == NUM_CLASSES - 1 { per_class * 8 } else { per_class };
        let mut crng = rng.fork(class as u64);
        for _ in 0..count {
            images.push(synth_image(class, size, &mut crng));
            labels.push(class);
        }
    }
    Dataset::new(
        images,
        labels,
        DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    )
}

// ---------------------------------------------------------------------------
// P6 pixmap i/o
// ---------------------------------------------------------------------------

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    // skip whitespace and '#' comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::MalformedImage("unexpected end of header".into()));
    }
    Ok(bytes[start..*pos].to_vec())
}

fn parse_dim(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::MalformedImage("bad header integer".into()))
}

/// Parse a binary P6 pixmap (8-bit) into a (3, h, w) tensor in [0, 1].
pub fn parse_ppm(bytes: &[u8]) -> Result<FloatTensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::MalformedImage("missing P6 magic".into()));
    }
    let mut pos = 2usize;
    let w = parse_dim(&read_token(bytes, &mut pos)?)?;
    let h = parse_dim(&read_token(bytes, &mut pos)?)?;
    let maxval = parse_dim(&read_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::MalformedImage(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::MalformedImage("truncated pixel data".into()));
    }
    let mut data = vec![0.0f32; need];
    for py in 0..h {
        for px in 0..w {
            for c in 0..3 {
                let v = bytes[pos + (py * w + px) * 3 + c];
                data[(c * h + py) * w + px] = v as f32 / 255.0;
            }
        }
    }
    FloatTensor::new(Shape::new(&[3, h, w])?, data)
}

/// Serialize a (3, h, w) tensor in [0, 1] as a binary P6 pixmap.
pub fn write_ppm(img: &FloatTensor) -> Result<Vec<u8>> {
    let dims = img.shape.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(Error::ShapeMismatch("expected (3, h, w) image".into()));
    }
    let (h, w) = (dims[1], dims[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for py in 0..h {
        for px in 0..w {
            for c in 0..3 {
                let v = (img.data[(c * h + py) * w + px] * 255.0).round().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

fn resize_nearest(img: &FloatTensor, size: usize) -> Result<FloatTensor> {
    let dims = img.shape.dims();
    let (h, w) = (dims[1], dims[2]);
    if (h, w) == (size, size) {
        return Ok(img.clone());
    }
    let mut data = vec![0.0f32; 3 * size * size];
    for py in 0..size {
        for px in 0..size {
            let sy = (py * h) / size;
            let sx = (px * w) / size;
            for c in 0..3 {
                data[(c * size + py) * size + px] = img.data[(c * h + sy) * w + sx];
            }
        }
    }
    FloatTensor::new(Shape::new(&[3, size, size])?, data)
}

/// Load `<root>/<class_name>/*.ppm`, one subdirectory per class, resizing
/// every image to `size` x `size` by nearest neighbor. Class order is the
/// sorted subdirectory names.
pub fn load_image_dir(root: &Path, size: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        names.push(
            dir.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
        }
        for f in files {
            let mut bytes = Vec::new();
            fs::File::open(&f)?.read_to_end(&mut bytes)?;
            let img = parse_ppm(&bytes)
                .map_err(|e| Error::MalformedImage(format!("{}: {e}", f.display())))?;
            images.push(resize_nearest(&img, size)?);
            labels.push(label);
        }
    }
    Dataset::new(images, labels, names)
}

/// Write a dataset out in the `load_image_dir` layout.
pub fn save_image_dir(d: &Dataset, root: &Path) -> Result<()> {
    for (i, (img, &label)) in d.images.iter().zip(&d.labels).enumerate() {
        let dir = root.join(&d.class_names[label]);
        fs::create_dir_all(&dir)?;
        let bytes = write_ppm(img)?;
        fs::File::create(dir.join(format!("{i:05}.ppm")))?.write_all(&bytes)?;
    }
    Ok(())
}

/// Stratified seeded 60:20:20 split; remainders go to the training set.
pub fn split(d: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if d.is_empty() {
        return Err(Error::Dataset("cannot split an empty dataset".into()));
    }
    let mut rng = Rng::new(seed);
    let mut train = (Vec::new(), Vec::new());
    let mut val = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for class in 0..d.class_names.len() {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_val = n / 5;
        let n_test = n / 5;
        for (k, &i) in idx.iter().enumerate() {
            let bucket = if k < n - n_val - n_test {
                &mut train
            } else if k < n - n_test {
                &mut val
            } else {
                &mut test
            };
            bucket.0.push(d.images[i].clone());
            bucket.1.push(d.labels[i]);
        }
    }
    let names = d.class_names.clone();
    Ok((
        Dataset::new(train.0, train.1, names.clone())?,
        Dataset::new(val.0, val.1, names.clone())?,
        Dataset::new(test.0, test.1, names)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(42, 3, 16).unwrap();
        let b = generate_synthetic(42, 3, 16).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(43, 3, 16).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn imbalance_rule() {
        let d = generate_synthetic(1, 100, 8).unwrap();
        assert_eq!(d.len(), 100 * 8 + 800);
        assert_eq!(d.per_class_counts()[8], 800);
    }

    #[test]
    fn nearest_centroid_separates_some_classes() {
        // linear sanity oracle: classes must be learnable from raw pixels
        let d = generate_synthetic(7, 12, 16).unwrap();
        let (train, _, test) = split(&d, 7).unwrap();
        let dim = train.images[0].data.len();
        let mut centroids = vec![vec![0.0f32; dim]; NUM_CLASSES];
        let counts = train.per_class_counts();
        for (img, &l) in train.images.iter().zip(&train.labels) {
            for (c, &v) in centroids[l].iter_mut().zip(&img.data) {
                *c += v;
            }
        }
        for (cent, &n) in centroids.iter_mut().zip(&counts) {
            for c in cent.iter_mut() {
                *c /= n.max(1) as f32;
            }
        }
        let mut correct = vec![0usize; NUM_CLASSES];
        let mut totals = vec![0usize; NUM_CLASSES];
        for (img, &l) in test.images.iter().zip(&test.labels) {
            let pred = (0..NUM_CLASSES)
                .min_by(|&a, &b| {
                    let da: f32 = centroids[a].iter().zip(&img.data).map(|(c, v)| (c - v).powi(2)).sum();
                    let db: f32 = centroids[b].iter().zip(&img.data).map(|(c, v)| (c - v).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            totals[l] += 1;
            if pred == l {
                correct[l] += 1;
            }
        }
        let above_chance = (0..NUM_CLASSES)
            .filter(|&c| totals[c] > 0 && correct[c] as f32 / totals[c] as f32 > 1.0 / NUM_CLASSES as f32)
            .count();
        assert!(above_chance >= 2, "only {above_chance} classes above chance");
    }

    #[test]
    fn ppm_round_trip_lossless_to_8bit() {
        let d = generate_synthetic(3, 1, 8).unwrap();
        let img = &d.images[0];
        let bytes = write_ppm(img).unwrap();
        let back = parse_ppm(&bytes).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // second round trip is exact
        let bytes2 = write_ppm(&back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn ppm_rejects_bad_magic() {
        assert!(matches!(parse_ppm(b"P5\n1 1\n255\n\0"), Err(Error::MalformedImage(_))));
        assert!(parse_ppm(b"P6\n2 2\n255\n\0\0\0").is_err()); // truncated
    }

    #[test]
    fn image_dir_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let d = generate_synthetic(5, 1, 8).unwrap();
        save_image_dir(&d, tmp.path()).unwrap();
        let loaded = load_image_dir(tmp.path(), 8).unwrap();
        assert_eq!(loaded.len(), d.len());
        assert_eq!(loaded.class_names.len(), NUM_CLASSES);
    }

    #[test]
    fn split_is_60_20_20_and_partitions() {
        let images: Vec<FloatTensor> = (0..1000)
            .map(|i| {
                FloatTensor::new(Shape::new(&[3, 1, 1]).unwrap(), vec![i as f32; 3]).unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..1000).map(|i| i % 5).collect();
        let names: Vec<String> = (0..9).map(|i| format!("c{i}")).collect();
        let d = Dataset::new(images, labels, names).unwrap();
        let (train, val, test) = split(&d, 9).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (600, 200, 200));
        // stratification within one sample per class
        for c in 0..5 {
            assert!((train.per_class_counts()[c] as i64 - 120).abs() <= 1);
            assert!((val.per_class_counts()[c] as i64 - 40).abs() <= 1);
            assert!((test.per_class_counts()[c] as i64 - 40).abs() <= 1);
        }
        // disjoint and exhaustive by unique pixel value
        let mut seen: Vec<f32> = Vec::new();
        for part in [&train, &val, &test] {
            for img in &part.images {
                seen.push(img.data[0]);
            }
        }
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen.len(), 1000);
        assert!(seen.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let d = generate_synthetic(11, 4, 8).unwrap();
        let a = split(&d, 5).unwrap();
        let b = split(&d, 5).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }
}
