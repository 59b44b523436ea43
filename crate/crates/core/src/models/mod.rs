//! The three classifiers: a plain three-block CNN (`baseline`), a seven-block
//! CNN with CBAM (`cbam7`) and a residual network whose blocks fuse
//! coordinate attention with squeeze-excitation (`balanced12`).

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::attention::{BalancedAttnBlock, CbamBlock, CBAM_REDUCTION};
use crate::datasets::IMAGE_SIZE;
use crate::engine::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{dropout, BatchNorm2d, Conv2d, Ctx, Linear};
use crate::regularization::{dropblock_on_tape, DropBlockConfig};
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Cbam7,
    Balanced12,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Cbam7, Variant::Balanced12];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cbam7 => "cbam7",
            Variant::Balanced12 => "balanced12",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?} (expected baseline, cbam7 or balanced12)")))
    }
}

/// Number of leading conv blocks followed by a 2×2 max-pool in `cbam7`.
const CBAM7_POOLED_BLOCKS: usize = 5;

/// Architecture description. Two models built from equal specs have the
/// same parameter names and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub num_classes: usize,
    /// Per conv block for the plain variants, per stage for `balanced12`.
    pub channels: Vec<usize>,
    /// Residual blocks per stage; empty for the plain variants.
    pub blocks: Vec<usize>,
    /// Width of the hidden head layer; 0 means global pooling straight
    /// into the classifier.
    pub hidden: usize,
    pub dropout: f64,
    pub dropblock: Option<DropBlockConfig>,
}

impl ModelSpec {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        match variant {
            Variant::Baseline => ModelSpec {
                variant,
                num_classes,
                channels: vec![32, 64, 128],
                blocks: Vec::new(),
                hidden: 512,
                dropout: 0.5,
                dropblock: None,
            },
            Variant::Cbam7 => ModelSpec {
                variant,
                num_classes,
                channels: vec![32, 64, 128, 256, 512, 512, 512],
                blocks: Vec::new(),
                hidden: 512,
                dropout: 0.4,
                dropblock: None,
            },
            Variant::Balanced12 => ModelSpec {
                variant,
                num_classes,
                channels: vec![64, 128, 256, 512],
                blocks: vec![3, 3, 3, 2],
                hidden: 0,
                dropout: 0.0,
                dropblock: Some(DropBlockConfig::default()),
            },
        }
    }

    pub fn with_channels(mut self, channels: Vec<usize>) -> Self {
        self.channels = channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{} spec: {msg}", self.variant)));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channels must be non-empty and positive, got {:?}", self.channels));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.variant {
            Variant::Baseline | Variant::Cbam7 => {
                let pooled = self.pooled_blocks();
                if IMAGE_SIZE >> pooled == 0 {
                    return bad(format!("{pooled} pooling stages shrink a {IMAGE_SIZE}px input to nothing"));
                }
                if !self.blocks.is_empty() || self.dropblock.is_some() {
                    return bad("plain variants take neither residual blocks nor DropBlock".into());
                }
            }
            Variant::Balanced12 => {
                if self.blocks.len() != self.channels.len() || self.blocks.contains(&0) {
                    return bad(format!(
                        "need one positive block count per stage, got {:?} for {} stages",
                        self.blocks,
                        self.channels.len()
                    ));
                }
                if let Some(db) = &self.dropblock {
                    db.validate()?;
                    if db.stage_rates.len() != self.channels.len() {
                        return bad(format!(
                            "{} DropBlock rates for {} stages",
                            db.stage_rates.len(),
                            self.channels.len()
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn pooled_blocks(&self) -> usize {
        match self.variant {
            Variant::Baseline => self.channels.len(),
            Variant::Cbam7 => self.channels.len().min(CBAM7_POOLED_BLOCKS),
            Variant::Balanced12 => 0,
        }
    }

    /// Stable `key = value` rendering; the checkpoint header stores it and
    /// the digest is taken over it.
    pub fn canonical(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = format!(
            "variant = {}\nnum_classes = {}\nchannels = {}\nblocks = {}\nhidden = {}\ndropout = {}\n",
            self.variant,
            self.num_classes,
            join(&self.channels),
            join(&self.blocks),
            self.hidden,
            self.dropout
        );
        if let Some(db) = &self.dropblock {
            let rates: Vec<String> = db.stage_rates.iter().map(f64::to_string).collect();
            s += &format!("dropblock_size = {}\ndropblock_rates = {}\n", db.block_size, rates.join(","));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("model spec line without '=': {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("model spec lacks {k:?}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("model spec {k:?} is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::Format(format!("model spec {k:?} has a bad entry {x:?}"))))
                .collect()
        };
        let dropout = get("dropout")?
            .parse()
            .map_err(|_| Error::Format("model spec dropout is not a number".into()))?;
        let dropblock = match kv.get("dropblock_size") {
            None => None,
            Some(bs) => {
                let stage_rates = get("dropblock_rates")?
                    .split(',')
                    .map(|x| x.trim().parse().map_err(|_| Error::Format(format!("bad DropBlock rate {x:?}"))))
                    .collect::<Result<Vec<f64>>>()?;
                Some(DropBlockConfig {
                    block_size: bs.parse().map_err(|_| Error::Format("bad DropBlock size".into()))?,
                    stage_rates,
                    ..DropBlockConfig::default()
                })
            }
        };
        let spec = ModelSpec {
            variant: get("variant")?.parse()?,
            num_classes: num("num_classes")?,
            channels: list("channels")?,
            blocks: list("blocks")?,
            hidden: num("hidden")?,
            dropout,
            dropblock,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Hex sha256 of [`ModelSpec::canonical`].
    pub fn digest(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    cbam: Option<CbamBlock>,
    pool: bool,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    attn: BalancedAttnBlock,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    drop_rate: f64,
}

#[derive(Clone, Debug)]
enum Body {
    Plain(Vec<ConvBlock>),
    Residual {
        stem: (Conv2d, BatchNorm2d),
        blocks: Vec<ResBlock>,
    },
}

#[derive(Clone, Debug)]
struct Head {
    hidden: Option<Linear>,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    store: ParamStore<T>,
    body: Body,
    head: Head,
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized model. All initial values come from the
    /// `init` stream of `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, rng::INIT);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let (body, features) = match spec.variant {
            Variant::Baseline | Variant::Cbam7 => {
                let mut blocks = Vec::new();
                let mut in_c = 3;
                for (i, &c) in spec.channels.iter().enumerate() {
                    let name = format!("block{i}");
                    let cbam = if spec.variant == Variant::Cbam7 && i >= 1 {
                        Some(CbamBlock::new(s, &format!("{name}.cbam"), c, CBAM_REDUCTION, r)?)
                    } else {
                        None
                    };
                    blocks.push(ConvBlock {
                        conv: Conv2d::new(s, &format!("{name}.conv"), in_c, c, 3, 1, 1, false, r)?,
                        bn: BatchNorm2d::new(s, &format!("{name}.bn"), c)?,
                        cbam,
                        pool: i < spec.pooled_blocks(),
                    });
                    in_c = c;
                }
                (Body::Plain(blocks), in_c)
            }
            Variant::Balanced12 => {
                let c0 = spec.channels[0];
                let stem = (
                    Conv2d::new(s, "stem.conv", 3, c0, 3, 1, 1, false, r)?,
                    BatchNorm2d::new(s, "stem.bn", c0)?,
                );
                let mut blocks = Vec::new();
                let mut in_c = c0;
                for (stage, (&c, &n)) in spec.channels.iter().zip(&spec.blocks).enumerate() {
                    let rate = spec.dropblock.as_ref().map_or(0.0, |d| d.stage_rates[stage]);
                    for j in 0..n {
                        let name = format!("stage{stage}.block{j}");
                        let stride = if stage > 0 && j == 0 { 2 } else { 1 };
                        let shortcut = if stride != 1 || in_c != c {
                            Some((
                                Conv2d::new(s, &format!("{name}.shortcut.conv"), in_c, c, 1, stride, 0, false, r)?,
                                BatchNorm2d::new(s, &format!("{name}.shortcut.bn"), c)?,
                            ))
                        } else {
                            None
                        };
                        blocks.push(ResBlock {
                            conv1: Conv2d::new(s, &format!("{name}.conv1"), in_c, c, 3, stride, 1, false, r)?,
                            bn1: BatchNorm2d::new(s, &format!("{name}.bn1"), c)?,
                            conv2: Conv2d::new(s, &format!("{name}.conv2"), c, c, 3, 1, 1, false, r)?,
                            bn2: BatchNorm2d::new(s, &format!("{name}.bn2"), c)?,
                            attn: BalancedAttnBlock::new(s, &format!("{name}.attn"), c, r)?,
                            shortcut,
                            drop_rate: rate,
                        });
                        in_c = c;
                    }
                }
                (Body::Residual { stem, blocks }, in_c)
            }
        };
        let head = if spec.hidden > 0 {
            Head {
                hidden: Some(Linear::new(s, "head.fc1", features, spec.hidden, r)?),
                out: Linear::new(s, "head.fc2", spec.hidden, spec.num_classes, r)?,
            }
        } else {
            Head {
                hidden: None,
                out: Linear::new(s, "head.fc", features, spec.num_classes, r)?,
            }
        };
        Ok(Model {
            spec: spec.clone(),
            store,
            body,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            store: self.store.cast(),
            body: self.body.clone(),
            head: self.head.clone(),
        }
    }

    /// Records the forward pass on `tape` and returns the `b×K` logits.
    /// Dropout and DropBlock draw their masks from `rng` when training;
    /// batch-norm running statistics are updated in training mode only.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, training: bool, rng: &mut StreamRng) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != IMAGE_SIZE || shape[3] != IMAGE_SIZE {
            return Err(Error::shape(format!(
                "{} expects input b×3×{IMAGE_SIZE}×{IMAGE_SIZE}, got {shape:?}",
                self.spec.variant
            )));
        }
        let mut ctx = Ctx {
            tape,
            store: &mut self.store,
            training,
            rng,
        };
        let c = &mut ctx;
        let mut h = x;
        match &self.body {
            Body::Plain(blocks) => {
                for b in blocks {
                    h = b.conv.forward(c, h)?;
                    h = b.bn.forward(c, h)?;
                    h = c.tape.relu(h);
                    if let Some(cbam) = &b.cbam {
                        h = cbam.forward(c, h)?;
                    }
                    if b.pool {
                        h = c.tape.max_pool2d(h)?;
                    }
                }
            }
            Body::Residual { stem, blocks } => {
                h = stem.0.forward(c, h)?;
                h = stem.1.forward(c, h)?;
                h = c.tape.relu(h);
                h = c.tape.max_pool2d(h)?;
                let block_size = self.spec.dropblock.as_ref().map_or(1, |d| d.block_size);
                for b in blocks {
                    let skip = match &b.shortcut {
                        Some((conv, bn)) => {
                            let s = conv.forward(c, h)?;
                            bn.forward(c, s)?
                        }
                        None => h,
                    };
                    let mut y = b.conv1.forward(c, h)?;
                    y = b.bn1.forward(c, y)?;
                    y = c.tape.relu(y);
                    y = b.conv2.forward(c, y)?;
                    y = b.bn2.forward(c, y)?;
                    y = b.attn.forward(c, y)?;
                    y = c.tape.add(y, skip)?;
                    y = c.tape.relu(y);
                    h = dropblock_on_tape(c, y, b.drop_rate, block_size)?;
                }
            }
        }
        let pooled = c.tape.global_avg_pool(h)?;
        let (b, ch) = (c.tape.shape(pooled)[0], c.tape.shape(pooled)[1]);
        let mut f = c.tape.reshape(pooled, &[b, ch])?;
        if let Some(fc1) = &self.head.hidden {
            f = fc1.forward(c, f)?;
            f = c.tape.relu(f);
            f = dropout(c, f, self.spec.dropout)?;
        }
        self.head.out.forward(c, f)
    }

    /// Eval-mode logits for a batch tensor.
    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        // eval mode draws no masks; the stream is never consulted
        let mut rng = rng::stream(0, rng::DROPBLOCK);
        let y = self.forward(&mut tape, x, false, &mut rng)?;
        Ok(tape.value(y).clone())
    }

    fn attention_blocks(&self) -> Result<Vec<&BalancedAttnBlock>> {
        match &self.body {
            Body::Residual { blocks, .. } => Ok(blocks.iter().map(|b| &b.attn).collect()),
            Body::Plain(_) => Err(Error::Contract(format!(
                "{} has no fusion weights; only balanced12 does",
                self.spec.variant
            ))),
        }
    }

    /// `σ(α)` of every residual block, in forward order.
    pub fn alphas(&self) -> Result<Vec<f64>> {
        Ok(self
            .attention_blocks()?
            .into_iter()
            .map(|a| a.fusion_weight(&self.store))
            .collect())
    }

    /// Raw `α` logits of every residual block.
    pub fn alpha_logits(&self) -> Result<Vec<f64>> {
        Ok(self.attention_blocks()?.into_iter().map(|a| a.alpha(&self.store)).collect())
    }

    /// Per-block attention modules, for inspection and weight surgery.
    pub fn balanced_blocks(&self) -> Result<Vec<BalancedAttnBlock>> {
        Ok(self.attention_blocks()?.into_iter().cloned().collect())
    }
}

/// Mean of a slice, `None` when empty.
pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> ModelSpec {
        let spec = ModelSpec::new(variant, 4);
        match variant {
            Variant::Baseline => spec.with_channels(vec![4, 8, 8]),
            Variant::Cbam7 => spec.with_channels(vec![4, 4, 8, 8, 8, 8, 8]),
            Variant::Balanced12 => spec.with_channels(vec![8, 8, 16, 16]),
        }
    }

    #[test]
    fn unknown_variant_is_config_error() {
        assert!(matches!("resnet".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn spec_text_round_trips() {
        for v in Variant::ALL {
            let spec = ModelSpec::new(v, 10);
            assert_eq!(ModelSpec::parse(&spec.canonical()).unwrap(), spec);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = small(Variant::Balanced12);
        let a = Model::<f32>::build(&spec, 3).unwrap();
        let b = Model::<f32>::build(&spec, 3).unwrap();
        let c = Model::<f32>::build(&spec, 4).unwrap();
        let values = |m: &Model<f32>| m.store().iter().map(|(_, p)| p.value().clone()).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn logits_are_finite_and_eval_is_pure() {
        let mut rng = rng::stream(0, "test");
        let x = Tensor::<f32>::randn(&[2, 3, 64, 64], 1.0, &mut rng);
        for v in Variant::ALL {
            let mut m = Model::<f32>::build(&small(v), 1).unwrap();
            let y1 = m.predict(&x).unwrap();
            let y2 = m.predict(&x).unwrap();
            assert_eq!(y1.shape(), &[2, 4]);
            assert!(y1.all_finite());
            assert_eq!(y1, y2, "{v}");
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut m = Model::<f32>::build(&small(Variant::Baseline), 1).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        assert!(matches!(m.predict(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn fresh_fusion_weights_are_one_half() {
        let m = Model::<f32>::build(&small(Variant::Balanced12), 1).unwrap();
        let a = m.alphas().unwrap();
        assert_eq!(a.len(), 11);
        assert!(a.iter().all(|&w| w == 0.5));
        let plain = Model::<f32>::build(&small(Variant::Cbam7), 1).unwrap();
        assert!(matches!(plain.alphas(), Err(Error::Contract(_))));
    }
}
