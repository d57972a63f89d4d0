//! Desk-scale encoder, decoder and segmentation network.
//!
//! The encoder/decoder pair plays the role of a pretrained feature
//! extractor: it is fitted once by [`pretrain_autoencoder`] and never updated
//! afterwards. All three networks are generic over the element type so the
//! same weights can be evaluated in `f64` for gradient verification.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, Optimizer, OptimizerKind, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Network sizes shared by every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Channels per encoder stage; each stage halves the resolution.
    pub stage_channels: Vec<usize>,
    pub seg_width: usize,
    pub seg_dilations: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 8,
            stage_channels: vec![16, 32, 64],
            seg_width: 16,
            seg_dilations: vec![1, 2, 4, 1],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_channels.len();
        if stages < 2 {
            return Err(Error::Config("encoder needs at least 2 stages".into()));
        }
        let factor = 1usize << stages;
        if !self.image_size.is_multiple_of(factor) || self.image_size / factor < 2 {
            return Err(Error::Config(format!(
                "image size {} incompatible with {} stages",
                self.image_size, stages
            )));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("class count {} outside 2..=255", self.num_classes)));
        }
        if self.seg_width == 0 || self.seg_dilations.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("zero-width network layer".into()));
        }
        Ok(())
    }

    /// Spatial size of the deepest encoder features.
    pub fn latent_size(&self) -> usize {
        self.image_size >> self.stage_channels.len()
    }

    pub fn latent_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

fn check_image(x: &[usize], what: &str) -> Result<()> {
    if x.len() != 4 || x[1] != 3 {
        return Err(Error::Shape(format!("{what}: expected (B, 3, H, W) image, got {x:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    params: ParamSet<T>,
    stages: Vec<(Conv2d, Conv2d)>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = 3;
        let stages = arch
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let down = Conv2d::new(
                    &mut params,
                    &format!("stage{i}.down"),
                    cin,
                    c,
                    3,
                    Conv2dSpec { stride: 2, padding: 1, dilation: 1 },
                    Init::He,
                    &mut rng,
                );
                let refine = Conv2d::new(&mut params, &format!("stage{i}.conv"), c, c, 3, Conv2dSpec::same(3, 1), Init::He, &mut rng);
                cin = c;
                (down, refine)
            })
            .collect();
        Self { params, stages }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Per-stage features, deepest last.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let mut h = x;
        let mut feats = Vec::with_capacity(self.stages.len());
        for (down, refine) in &self.stages {
            h = down.forward(p, h).relu();
            h = refine.forward(p, h).relu();
            feats.push(h);
        }
        feats
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        check_image(x.shape(), "encode")?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self
            .forward(&p, tape.constant(x.clone()))
            .into_iter()
            .map(|v| (*v.value()).clone())
            .collect())
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            params: cast_params(&self.params),
            stages: self.stages.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    params: ParamSet<T>,
    stages: Vec<(Conv2d, Conv2d)>,
    out: Conv2d,
    latent_channels: usize,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0de);
        let mut params = ParamSet::new();
        let ch = &arch.stage_channels;
        let stages = (0..ch.len())
            .rev()
            .map(|l| {
                let cout = ch[l.saturating_sub(1)];
                let reduce =
                    Conv2d::new(&mut params, &format!("up{l}.reduce"), ch[l], cout, 3, Conv2dSpec::same(3, 1), Init::He, &mut rng);
                let refine =
                    Conv2d::new(&mut params, &format!("up{l}.refine"), cout, cout, 3, Conv2dSpec::same(3, 1), Init::He, &mut rng);
                (reduce, refine)
            })
            .collect();
        let out = Conv2d::new(&mut params, "out", ch[0], 3, 3, Conv2dSpec::same(3, 1), Init::He, &mut rng);
        Self {
            params,
            stages,
            out,
            latent_channels: arch.latent_channels(),
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Unclamped reconstruction, used for pretraining.
    pub fn forward_raw<'t>(&self, p: &Bound<'t, T>, f: Var<'t, T>) -> Var<'t, T> {
        let mut h = f;
        for (reduce, refine) in &self.stages {
            h = reduce.forward(p, h).relu().upsample_nearest(2);
            h = refine.forward(p, h).relu();
        }
        self.out.forward(p, h)
    }

    /// Image in `[0, 1]`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, f: Var<'t, T>) -> Var<'t, T> {
        self.forward_raw(p, f).clamp(T::zero(), T::one())
    }

    pub fn decode(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, _, _) = f.dims4()?;
        if c != self.latent_channels {
            return Err(Error::Shape(format!(
                "decoder expects {} latent channels, got {c}",
                self.latent_channels
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok((*self.forward(&p, tape.constant(f.clone())).value()).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            params: cast_params(&self.params),
            stages: self.stages.clone(),
            out: self.out.clone(),
            latent_channels: self.latent_channels,
        }
    }
}

/// Dilated fully convolutional segmenter producing `(B, K, H, W)` logits.
#[derive(Debug, Clone)]
pub struct SegNet<T: Scalar> {
    params: ParamSet<T>,
    body: Vec<Conv2d>,
    classifier: Conv2d,
    num_classes: usize,
}

impl<T: Scalar> SegNet<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e9);
        let mut params = ParamSet::new();
        let mut cin = 3;
        let body = arch
            .seg_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let conv = Conv2d::new(&mut params, &format!("body{i}"), cin, arch.seg_width, 3, Conv2dSpec::same(3, d), Init::He, &mut rng);
                cin = arch.seg_width;
                conv
            })
            .collect();
        let classifier = Conv2d::new(&mut params, "classifier", cin, arch.num_classes, 1, Conv2dSpec::default(), Init::He, &mut rng);
        Self {
            params,
            body,
            classifier,
            num_classes: arch.num_classes,
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Width of the penultimate feature layer.
    pub fn feature_width(&self) -> usize {
        self.classifier.in_channels
    }

    /// Logits and penultimate features.
    pub fn forward_with_features<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let mut h = x;
        for conv in &self.body {
            h = conv.forward(p, h).relu();
        }
        (self.classifier.forward(p, h), h)
    }

    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.forward_with_features(p, x).0
    }

    pub fn segment(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image(x.shape(), "segment")?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok((*self.forward(&p, tape.constant(x.clone())).value()).clone())
    }

    /// Per-pixel argmax labels, `B·H·W` entries.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<u8>> {
        Ok(argmax_channels(&self.segment(x)?))
    }

    pub fn cast<U: Scalar>(&self) -> SegNet<U> {
        SegNet {
            params: cast_params(&self.params),
            body: self.body.clone(),
            classifier: self.classifier.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Argmax along the channel axis of `(B, K, H, W)` scores.
pub fn argmax_channels<T: Scalar>(scores: &Tensor<T>) -> Vec<u8> {
    let (b, k, h, w) = scores.dims4().expect("4-d scores");
    let hw = h * w;
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = T::neg_infinity();
            for c in 0..k {
                let v = scores.data()[(bi * k + c) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

pub(crate) fn cast_params<T: Scalar, U: Scalar>(src: &ParamSet<T>) -> ParamSet<U> {
    let mut out = ParamSet::new();
    for p in src.iter() {
        out.add(p.name.clone(), p.value.cast());
    }
    out
}

/// Autoencoder fitting schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean squared reconstruction error per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean absolute error of the clamped reconstruction on the corpus.
    pub final_mae: f64,
}

/// Fits the encoder/decoder pair to reconstruct `corpus` (each `(1, 3, H, W)`).
pub fn pretrain_autoencoder(
    corpus: &[Tensor<f32>],
    arch: &ArchConfig,
    cfg: &PretrainConfig,
) -> Result<(Encoder<f32>, Decoder<f32>, PretrainReport)> {
    arch.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("autoencoder corpus is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || cfg.lr <= 0.0 {
        return Err(Error::Config("pretraining needs positive epochs, batch size and rate".into()));
    }
    for img in corpus {
        let (_, c, h, w) = img.dims4()?;
        if c != 3 || h != arch.image_size || w != arch.image_size {
            return Err(Error::Shape(format!(
                "corpus image {:?} does not match image size {}",
                img.shape(),
                arch.image_size
            )));
        }
    }
    let mut enc = Encoder::<f32>::new(arch, cfg.seed);
    let mut dec = Decoder::<f32>::new(arch, cfg.seed);
    let mut opt_e = Optimizer::new(OptimizerKind::adam(), cfg.lr, enc.params());
    let mut opt_d = Optimizer::new(OptimizerKind::adam(), cfg.lr, dec.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xae);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<Tensor<f32>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let x = Tensor::stack_batch(&items)?;
            let tape = Tape::new();
            let pe = enc.params().bind(&tape, true);
            let pd = dec.params().bind(&tape, true);
            let xv = tape.constant(x);
            let feats = enc.forward(&pe, xv);
            let recon = dec.forward_raw(&pd, *feats.last().expect("stages"));
            let loss = (recon - xv).square().mean_all();
            total += loss.item() as f64;
            batches += 1;
            let grads = tape.backward(loss);
            let ge = pe.grads(&grads);
            let gd = pd.grads(&grads);
            drop(grads);
            drop(tape);
            opt_e.step(enc.params_mut(), &ge);
            opt_d.step(dec.params_mut(), &gd);
        }
        let mean = total / batches as f64;
        info!("autoencoder epoch {epoch}: mse {mean:.5}");
        epoch_loss.push(mean);
    }
    let final_mae = reconstruction_mae(&enc, &dec, corpus)?;
    Ok((enc, dec, PretrainReport { epoch_loss, final_mae }))
}

/// Mean absolute error of `decode(encode(x))` over `images`.
pub fn reconstruction_mae<T: Scalar>(enc: &Encoder<T>, dec: &Decoder<T>, images: &[Tensor<T>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in images.chunks(16) {
        let x = Tensor::stack_batch(chunk)?;
        let feats = enc.encode(&x)?;
        let recon = dec.decode(feats.last().expect("stages"))?;
        total += recon
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .sum::<f64>();
        count += x.numel();
    }
    Ok(total / count.max(1) as f64)
}
