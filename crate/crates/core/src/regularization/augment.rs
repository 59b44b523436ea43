use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Training-time transform pipeline for `3×H×W` images in `[0, 1]`.
///
/// Stages run in a fixed order: 90° rotation, flips, brightness, contrast,
/// saturation, Gaussian blur, random erasing, then per-channel
/// normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub rotation_90s: bool,
    pub hflip: bool,
    pub vflip: bool,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - jitter_range, 1 + jitter_range]`.
    pub jitter_range: f64,
    /// Odd kernel size; 0 disables blurring.
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
    pub erase_prob: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_90s: true,
            hflip: true,
            vflip: true,
            jitter_range: 0.30,
            blur_kernel: 3,
            blur_sigma: (0.1, 2.0),
            erase_prob: 0.3,
            erase_area: (0.02, 0.33),
            erase_aspect: (0.3, 3.3),
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    /// No stochastic stage; only normalization with the given statistics.
    pub fn normalize_only(mean: [f64; 3], std: [f64; 3]) -> Self {
        AugmentConfig {
            rotation_90s: false,
            hflip: false,
            vflip: false,
            jitter_range: 0.0,
            blur_kernel: 0,
            erase_prob: 0.0,
            normalize_mean: mean,
            normalize_std: std,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.jitter_range) {
            return Err(Error::Config(format!("jitter range {} outside [0, 1)", self.jitter_range)));
        }
        if !(0.0..=1.0).contains(&self.erase_prob) {
            return Err(Error::Config(format!("erase probability {} outside [0, 1]", self.erase_prob)));
        }
        if self.blur_kernel != 0 && self.blur_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("blur kernel {} must be odd", self.blur_kernel)));
        }
        let (lo, hi) = self.blur_sigma;
        if self.blur_kernel != 0 && !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("invalid blur sigma range {:?}", self.blur_sigma)));
        }
        if self.normalize_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

fn check_image(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(Error::shape(format!("expected a 3×H×W RGB image, got shape {s:?}"))),
    }
}

pub fn normalize(image: &Tensor<f32>, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<f32>> {
    let (h, w) = check_image(image)?;
    let mut out = image.clone();
    for (c, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (mean[c] as f32, std[c] as f32);
        for v in plane {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Rotates every channel by 90° counter-clockwise.
fn rotate90(data: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(n * n).zip(out.chunks_mut(n * n)) {
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = src[j * n + (n - 1 - i)];
            }
        }
    }
    out
}

fn flip_horizontal(data: &mut [f32], w: usize) {
    for row in data.chunks_mut(w) {
        row.reverse();
    }
}

fn flip_vertical(data: &mut [f32], h: usize, w: usize) {
    for plane in data.chunks_mut(h * w) {
        for i in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - i) * w);
            top[i * w..(i + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

fn grayscale(data: &[f32], hw: usize) -> Vec<f32> {
    (0..hw)
        .map(|p| 0.299 * data[p] + 0.587 * data[hw + p] + 0.114 * data[2 * hw + p])
        .collect()
}

fn clamp_unit(data: &mut [f32]) {
    for v in data {
        *v = v.clamp(0.0, 1.0);
    }
}

fn color_jitter<R: Rng + ?Sized>(data: &mut [f32], hw: usize, range: f64, rng: &mut R) {
    let factor = Uniform::new_inclusive(1.0 - range, 1.0 + range).expect("valid jitter range");
    let brightness = factor.sample(rng) as f32;
    let contrast = factor.sample(rng) as f32;
    let saturation = factor.sample(rng) as f32;

    for v in data.iter_mut() {
        *v *= brightness;
    }
    clamp_unit(data);

    let mean = grayscale(data, hw).iter().sum::<f32>() / hw as f32;
    for v in data.iter_mut() {
        *v = (*v - mean) * contrast + mean;
    }
    clamp_unit(data);

    let gray = grayscale(data, hw);
    for plane in data.chunks_mut(hw) {
        for (v, &g) in plane.iter_mut().zip(&gray) {
            *v = g + saturation * (*v - g);
        }
    }
    clamp_unit(data);
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(data: &mut [f32], h: usize, w: usize, kernel: usize, sigma: f64) {
    let r = (kernel / 2) as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    let mut tmp = vec![0.0f32; h * w];
    for plane in data.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-r..=r)
                    .zip(&k)
                    .map(|(d, &kv)| kv * plane[y * w + reflect(x as isize + d, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = (-r..=r)
                    .zip(&k)
                    .map(|(d, &kv)| kv * tmp[reflect(y as isize + d, h) * w + x])
                    .sum();
            }
        }
    }
}

fn random_erase<R: Rng + ?Sized>(data: &mut [f32], h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) {
    let area = (h * w) as f64;
    let (rlo, rhi) = (cfg.erase_aspect.0.ln(), cfg.erase_aspect.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.erase_area.0..=cfg.erase_area.1);
        let aspect = rng.random_range(rlo..=rhi).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        for plane in data.chunks_mut(h * w) {
            for y in top..top + eh {
                for v in &mut plane[y * w + left..y * w + left + ew] {
                    *v = rng.random::<f32>();
                }
            }
        }
        return;
    }
}

/// Applies the configured transform pipeline; deterministic for a given
/// generator state.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<f32>> {
    let (h, w) = check_image(image)?;
    cfg.validate()?;
    let mut data = image.data().to_vec();

    if cfg.rotation_90s {
        if h != w {
            return Err(Error::shape(format!("90° rotation needs a square image, got {h}×{w}")));
        }
        for _ in 0..rng.random_range(0..4) {
            data = rotate90(&data, h);
        }
    }
    if cfg.hflip && rng.random_bool(0.5) {
        flip_horizontal(&mut data, w);
    }
    if cfg.vflip && rng.random_bool(0.5) {
        flip_vertical(&mut data, h, w);
    }
    if cfg.jitter_range > 0.0 {
        color_jitter(&mut data, h * w, cfg.jitter_range, rng);
    }
    if cfg.blur_kernel > 1 {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        gaussian_blur(&mut data, h, w, cfg.blur_kernel, sigma);
    }
    if cfg.erase_prob > 0.0 && rng.random_bool(cfg.erase_prob) {
        random_erase(&mut data, h, w, cfg, rng);
    }
    normalize(&Tensor::new(&[3, h, w], data)?, cfg.normalize_mean, cfg.normalize_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn image(seed: u64) -> Tensor<f32> {
        Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut stream(seed, "img"))
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let img = image(1);
        let cfg = AugmentConfig::normalize_only([0.0; 3], [1.0; 3]);
        let out = augment(&img, &cfg, &mut stream(2, "aug")).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn four_rotations_restore_the_image() {
        let img = image(3);
        let mut d = img.data().to_vec();
        for _ in 0..4 {
            d = rotate90(&d, 64);
        }
        assert_eq!(d, img.data());
        assert_ne!(rotate90(img.data(), 64), img.data());
    }

    #[test]
    fn imagenet_normalization_of_gray_image() {
        let img = Tensor::<f32>::full(&[3, 64, 64], 0.5);
        let out = normalize(&img, IMAGENET_MEAN, IMAGENET_STD).unwrap();
        for c in 0..3 {
            let want = ((0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]) as f32;
            assert!(out.data()[c * 4096..(c + 1) * 4096].iter().all(|&v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn full_pipeline_is_deterministic_and_shape_preserving() {
        let img = image(4);
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let a = augment(&img, &cfg, &mut stream(seed, "aug")).unwrap();
            let b = augment(&img, &cfg, &mut stream(seed, "aug")).unwrap();
            assert_eq!(a.shape(), &[3, 64, 64]);
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let img = Tensor::<f32>::zeros(&[1, 64, 64]);
        assert!(matches!(
            augment(&img, &AugmentConfig::default(), &mut stream(0, "a")),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut d = vec![0.25f32; 3 * 8 * 8];
        gaussian_blur(&mut d, 8, 8, 3, 1.3);
        assert!(d.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn vertical_flip_twice_is_identity() {
        let img = image(5);
        let mut d = img.data().to_vec();
        flip_vertical(&mut d, 64, 64);
        assert_ne!(d, img.data());
        flip_vertical(&mut d, 64, 64);
        assert_eq!(d, img.data());
    }
}
