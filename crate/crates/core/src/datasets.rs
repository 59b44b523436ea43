//! Dataset ingestion, deterministic splitting and the synthetic
//! spatial-vs-spectral task.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

pub const IMAGE_SIZE: usize = 64;

/// The ten EuroSAT land-cover classes in label order.
pub const EUROSAT_CLASSES: [&str; 10] = [
    "AnnualCrop",
    "Forest",
    "HerbaceousVegetation",
    "Highway",
    "Industrial",
    "Pasture",
    "PermanentCrop",
    "Residential",
    "River",
    "SeaLake",
];

#[derive(Clone, Debug)]
pub struct Sample {
    /// `3×64×64`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Counters for files the loader had to skip or fix up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub skipped: usize,
    pub resized: usize,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Decodes an RGB image into a `3×64×64` tensor in `[0, 1]`, resizing when
/// needed. Returns whether a resize happened.
pub fn decode_image(path: &Path) -> std::result::Result<(Tensor<f32>, bool), image::ImageError> {
    let img = image::open(path)?.to_rgb8();
    let size = IMAGE_SIZE as u32;
    let resized = img.width() != size || img.height() != size;
    let img = if resized {
        image::imageops::resize(&img, size, size, FilterType::Triangle)
    } else {
        img
    };
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px[c] as f32 / 255.0;
        }
    }
    let t = Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], data).expect("64×64 RGB buffer");
    Ok((t, resized))
}

/// Loads `<root>/<ClassName>/*.{png,jpg}`. Labels follow the sorted class
/// directory names; files are read in sorted order.
pub fn load_directory(root: &Path) -> Result<(LabeledDataset, LoadReport)> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} contains no class directories", root.display())));
    }
    let mut report = LoadReport::default();
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("non UTF-8 class directory {}", dir.display())))?
            .to_string();
        let before = samples.len();
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image_file(p)) {
            match decode_image(&file) {
                Ok((image, resized)) => {
                    if resized {
                        warn!("{} is not {IMAGE_SIZE}×{IMAGE_SIZE}; resized", file.display());
                        report.resized += 1;
                    }
                    let fname = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                    samples.push(Sample {
                        image,
                        label,
                        path: format!("{name}/{fname}"),
                    });
                }
                Err(e) => {
                    warn!("skipping unreadable {}: {e}", file.display());
                    report.skipped += 1;
                }
            }
        }
        if samples.len() == before {
            return Err(Error::Data(format!("class directory {} has no readable images", dir.display())));
        }
        class_names.push(name);
    }
    Ok((LabeledDataset { class_names, samples }, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub fractions: (f64, f64, f64),
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: (0.70, 0.15, 0.15),
            seed: 42,
            stratified: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Split name for every sample index, `None` for indices not assigned.
    pub fn assignment(&self, n: usize) -> Vec<Option<&'static str>> {
        let mut out = vec![None; n];
        for (name, idx) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in idx {
                out[i] = Some(name);
            }
        }
        out
    }
}

/// Validation and test counts round to nearest, halves down; the remainder
/// goes to training. Each split then lies within one sample of its exact
/// share.
fn partition_sizes(n: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    // the epsilon absorbs products such as 10 * 0.15 = 1.5000000000000002
    let round = |f: f64| (n as f64 * f - 0.5 - 1e-9).ceil().max(0.0) as usize;
    let val = round(spec.fractions.1).min(n);
    let test = round(spec.fractions.2).min(n - val);
    (n - val - test, val, test)
}

pub fn split_labels(labels: &[usize], num_classes: usize, spec: &SplitSpec) -> Result<Split> {
    if labels.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let (a, b, c) = spec.fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {:?} must be in [0, 1] and sum to 1", spec.fractions)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {num_classes} classes")));
    }
    let mut rng = rng::stream(spec.seed, rng::SPLIT);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        (0..num_classes)
            .map(|k| labels.iter().enumerate().filter(|(_, &y)| y == k).map(|(i, _)| i).collect())
            .collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (k, mut group) in groups.into_iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        if spec.stratified && group.len() < 3 {
            return Err(Error::Data(format!(
                "class {k} has {} samples; stratified splitting needs at least 3",
                group.len()
            )));
        }
        group.shuffle(&mut rng);
        let (_, nv, nt) = partition_sizes(group.len(), spec);
        split.val.extend_from_slice(&group[..nv]);
        split.test.extend_from_slice(&group[nv..nv + nt]);
        split.train.extend_from_slice(&group[nv + nt..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<Split> {
    split_labels(&ds.labels(), ds.num_classes(), spec)
}

/// One line per sample: `<relative-path>\t<split>\t<label>`.
pub fn manifest(ds: &LabeledDataset, split: &Split) -> String {
    let names = split.assignment(ds.len());
    let mut out = String::new();
    for (s, name) in ds.samples.iter().zip(names) {
        let _ = writeln!(out, "{}\t{}\t{}", s.path, name.unwrap_or("unused"), s.label);
    }
    out
}

/// Class names of the synthetic task, in label order.
pub const SYNTH_CLASSES: [&str; 4] = ["diagonal", "green", "horizontal", "red"];
pub const SYNTH_NOISE: f64 = 0.1;
const LINE_WIDTH: usize = 3;
const BACKGROUND: f32 = 0.3;
const LINE: f32 = 0.8;

fn spatial_image(diagonal: bool, rng: &mut StreamRng) -> Vec<f32> {
    let n = IMAGE_SIZE;
    let mut gray = vec![BACKGROUND; n * n];
    if diagonal {
        let offset = rng.random_range(0..n);
        for i in 0..n {
            for d in 0..LINE_WIDTH {
                gray[i * n + (i + offset + d) % n] = LINE;
            }
        }
    } else {
        let top = rng.random_range(0..=n - LINE_WIDTH);
        gray[top * n..(top + LINE_WIDTH) * n].fill(LINE);
    }
    [gray.clone(), gray.clone(), gray].concat()
}

/// Isotropic blob texture in `[0, 1]`.
fn blob_texture(rng: &mut StreamRng) -> Vec<f32> {
    let n = IMAGE_SIZE;
    let mut t = vec![0.0f32; n * n];
    for _ in 0..14 {
        let cy = rng.random_range(0.0..n as f32);
        let cx = rng.random_range(0.0..n as f32);
        let r = rng.random_range(3.0..9.0f32);
        let amp = rng.random_range(0.3..1.0f32);
        for y in 0..n {
            for x in 0..n {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                t[y * n + x] += amp * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }
    for v in &mut t {
        *v = v.min(1.0);
    }
    t
}

fn spectral_image(red: bool, rng: &mut StreamRng) -> Vec<f32> {
    let base: Vec<f32> = blob_texture(rng).iter().map(|t| 0.3 + 0.5 * t).collect();
    let (r, g) = if red { (1.0, 0.6) } else { (0.6, 1.0) };
    let scaled = |k: f32| base.iter().map(|v| v * k).collect::<Vec<_>>();
    [scaled(r), scaled(g), scaled(0.5)].concat()
}

/// Four-class 64×64 RGB task: `diagonal` and `horizontal` gray lines on a
/// gray background differ only in orientation; `red` and `green` blob
/// textures share one spatial process and differ only in color. Every pixel
/// gets Gaussian noise with σ = 0.1 before clamping to `[0, 1]`.
pub fn synth_generate(n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("valid noise level");
    let mut samples = Vec::with_capacity(4 * n_per_class);
    for (label, name) in SYNTH_CLASSES.iter().enumerate() {
        for i in 0..n_per_class {
            let mut rng = rng::substream(seed, &format!("{}/{name}", rng::SYNTH), i as u64);
            let mut data = match *name {
                "diagonal" => spatial_image(true, &mut rng),
                "horizontal" => spatial_image(false, &mut rng),
                "red" => spectral_image(true, &mut rng),
                _ => spectral_image(false, &mut rng),
            };
            for v in &mut data {
                *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
            samples.push(Sample {
                image: Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], data)?,
                label,
                path: format!("{name}/{i:05}.png"),
            });
        }
    }
    Ok(LabeledDataset {
        class_names: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
        samples,
    })
}

/// Writes a dataset as `<root>/<class>/<file>.png`, the layout
/// [`load_directory`] reads.
pub fn write_png_tree(ds: &LabeledDataset, root: &Path) -> Result<()> {
    for name in &ds.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    for s in &ds.samples {
        let d = s.image.data();
        let mut img = image::RgbImage::new(IMAGE_SIZE as u32, IMAGE_SIZE as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            for c in 0..3 {
                px[c] = (d[c * hw + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        let path = root.join(&s.path);
        img.save(&path)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}
