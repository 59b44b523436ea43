use rand::Rng;

use crate::engine::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Ctx;

pub const DEFAULT_BLOCK_SIZE: usize = 7;
pub const DEFAULT_STAGE_RATES: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

#[derive(Clone, Debug, PartialEq)]
pub struct DropBlockConfig {
    pub drop_rate: f64,
    pub block_size: usize,
    /// Per-stage rates, shallow to deep.
    pub stage_rates: Vec<f64>,
}

impl Default for DropBlockConfig {
    fn default() -> Self {
        DropBlockConfig {
            drop_rate: DEFAULT_STAGE_RATES[0],
            block_size: DEFAULT_BLOCK_SIZE,
            stage_rates: DEFAULT_STAGE_RATES.to_vec(),
        }
    }
}

impl DropBlockConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate(self.drop_rate)?;
        for &r in &self.stage_rates {
            check_rate(r)?;
        }
        if self.stage_rates.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "DropBlock stage rates must be non-decreasing, got {:?}",
                self.stage_rates
            )));
        }
        if self.block_size == 0 || self.block_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "DropBlock block size must be odd and >= 1, got {}",
                self.block_size
            )));
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("drop rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Per-position seed probability that makes the expected dropped fraction
/// approximately `rate` for `block`×`block` blocks on an `h`×`w` map.
pub fn seed_probability(rate: f64, block: usize, h: usize, w: usize) -> f64 {
    let valid = ((h - block + 1) * (w - block + 1)) as f64;
    (rate * (h * w) as f64 / ((block * block) as f64 * valid)).min(1.0)
}

/// Keep mask shared by all channels of each sample: `batch × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeepMask {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub keep: Vec<bool>,
    /// Effective block size after clamping to the map.
    pub block: usize,
}

impl KeepMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn dropped_fraction(&self) -> f64 {
        1.0 - self.kept() as f64 / self.keep.len() as f64
    }

    /// `total / kept`, or zero when everything was dropped.
    pub fn rescale(&self) -> f64 {
        match self.kept() {
            0 => 0.0,
            k => self.keep.len() as f64 / k as f64,
        }
    }
}

/// Samples block seeds over the positions where a full block fits, then
/// zeroes the block anchored at each seed.
pub fn sample_keep_mask<R: Rng + ?Sized>(
    batch: usize,
    h: usize,
    w: usize,
    rate: f64,
    block_size: usize,
    rng: &mut R,
) -> Result<KeepMask> {
    check_rate(rate)?;
    if block_size == 0 {
        return Err(Error::Config("DropBlock block size must be >= 1".into()));
    }
    let block = block_size.min(h).min(w);
    let mut keep = vec![true; batch * h * w];
    if rate > 0.0 {
        let gamma = seed_probability(rate, block, h, w);
        for b in 0..batch {
            let plane = &mut keep[b * h * w..(b + 1) * h * w];
            for i in 0..=h - block {
                for j in 0..=w - block {
                    if rng.random::<f64>() < gamma {
                        for row in plane[i * w..].chunks_mut(w).take(block) {
                            row[j..j + block].fill(false);
                        }
                    }
                }
            }
        }
    }
    Ok(KeepMask {
        batch,
        h,
        w,
        keep,
        block,
    })
}

fn mask_values<T: Real>(shape: &[usize], mask: &KeepMask) -> Vec<T> {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let scale = T::from_f64_lossy(mask.rescale());
    let mut out = Vec::with_capacity(b * c * hw);
    for bi in 0..b {
        let plane = &mask.keep[bi * hw..(bi + 1) * hw];
        for _ in 0..c {
            out.extend(plane.iter().map(|&k| if k { scale } else { T::zero() }));
        }
    }
    out
}

/// DropBlock on a plain tensor. Identity when not training or when
/// `rate == 0`.
pub fn dropblock<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    block_size: usize,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    let (b, _, h, w) = x.dims4()?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = sample_keep_mask(b, h, w, rate, block_size, rng)?;
    let m = mask_values::<T>(x.shape(), &mask);
    let data = x.data().iter().zip(m).map(|(&v, k)| v * k).collect();
    Tensor::new(x.shape(), data)
}

/// DropBlock recorded on the forward tape.
pub fn dropblock_on_tape<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, rate: f64, block_size: usize) -> Result<Var> {
    check_rate(rate)?;
    if !ctx.training || rate == 0.0 {
        return Ok(x);
    }
    let shape = ctx.tape.shape(x).to_vec();
    let (b, _, h, w) = ctx.tape.value(x).dims4()?;
    let mask = sample_keep_mask(b, h, w, rate, block_size, ctx.rng)?;
    let m = ctx.tape.constant(Tensor::new(&shape, mask_values(&shape, &mask))?);
    ctx.tape.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_rate_and_eval_mode_are_identity() {
        let mut rng = stream(1, "t");
        let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        assert_eq!(dropblock(&x, 0.0, 7, true, &mut rng).unwrap(), x);
        assert_eq!(dropblock(&x, 0.5, 7, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn rate_of_one_is_rejected() {
        let mut rng = stream(1, "t");
        let x = Tensor::<f64>::ones(&[1, 1, 8, 8]);
        assert!(matches!(dropblock(&x, 1.0, 7, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn block_is_clamped_on_small_maps() {
        let mut rng = stream(3, "t");
        let m = sample_keep_mask(4, 4, 4, 0.2, 7, &mut rng).unwrap();
        assert_eq!(m.block, 4);
    }

    #[test]
    fn fully_dropped_batch_yields_zeros() {
        let mask = KeepMask {
            batch: 1,
            h: 2,
            w: 2,
            keep: vec![false; 4],
            block: 2,
        };
        assert_eq!(mask.rescale(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(DropBlockConfig::default().validate().is_ok());
        let bad = DropBlockConfig {
            stage_rates: vec![0.2, 0.1],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let even = DropBlockConfig {
            block_size: 4,
            ..Default::default()
        };
        assert!(even.validate().is_err());
    }
}
