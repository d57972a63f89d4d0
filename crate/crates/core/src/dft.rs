//! Semantic-conditioned feature transformer and the hallucination pipeline.
//!
//! Segmentation predictions on the source image are embedded into a latent
//! map, which the transformer turns into per-location scale `γ`, shift `β`
//! and blend offset `α`. These steer how the style features are perturbed
//! and how the AdaIN-merged features are mixed back with the source
//! features before decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::featstats::adain;
use crate::nets::{argmax_channels, cast_params, Decoder, Encoder, SegNet};
use crate::nn::{Bound, Conv2d, Init, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// `(B, K, H, W)` class probabilities; every pixel sums to one.
pub type ProbMap<T> = Tensor<T>;
/// `(B, D, h, w)` embedded predictions at feature resolution.
pub type LatentMap<T> = Tensor<T>;

const PROB_SUM_TOL: f64 = 1e-3;

/// Per-location transform parameters, each `(B, C, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HallucinationParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub alpha: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct ParamsVar<'t, T: Scalar> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
    pub alpha: Var<'t, T>,
}

/// Embedding plus the two-layer head. The last head layer starts at zero so
/// an untrained transformer yields `γ = 1`, `β = 0`, `α = 0`.
#[derive(Debug, Clone)]
pub struct DftWeights<T: Scalar> {
    params: ParamSet<T>,
    embed: Conv2d,
    head_hidden: Conv2d,
    head_out: Conv2d,
    num_classes: usize,
    embed_dim: usize,
    channels: usize,
    alpha_max: f64,
}

impl<T: Scalar> DftWeights<T> {
    pub fn new(num_classes: usize, embed_dim: usize, channels: usize, alpha_max: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 || embed_dim == 0 || channels == 0 {
            return Err(Error::Config("transformer needs K ≥ 2 and non-zero widths".into()));
        }
        if !(alpha_max > 0.0 && alpha_max.is_finite()) {
            return Err(Error::Config(format!("alpha bound must be positive, got {alpha_max}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1f7);
        let mut params = ParamSet::new();
        let embed = Conv2d::new(&mut params, "embed", num_classes, embed_dim, 1, Conv2dSpec::default(), Init::He, &mut rng);
        let head_hidden = Conv2d::new(&mut params, "head.hidden", embed_dim, embed_dim, 3, Conv2dSpec::same(3, 1), Init::He, &mut rng);
        let head_out = Conv2d::new(&mut params, "head.out", embed_dim, 3 * channels, 3, Conv2dSpec::same(3, 1), Init::Zeros, &mut rng);
        Ok(Self {
            params,
            embed,
            head_hidden,
            head_out,
            num_classes,
            embed_dim,
            channels,
            alpha_max,
        })
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

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    /// Zeroes the embedding layer.
    pub fn zero_embedding(&mut self) {
        for id in [self.embed.weight_id(), self.embed.bias_id()] {
            self.params.get_mut(id).data_mut().fill(T::zero());
        }
    }

    /// `tanh(embed(probs))` for probabilities already at feature resolution.
    pub fn embed_var<'t>(&self, p: &Bound<'t, T>, probs: Var<'t, T>) -> Var<'t, T> {
        self.embed.forward(p, probs).tanh()
    }

    pub fn params_var<'t>(&self, p: &Bound<'t, T>, phi: Var<'t, T>) -> ParamsVar<'t, T> {
        let h = self.head_hidden.forward(p, phi).relu();
        let raw = self.head_out.forward(p, h);
        let c = self.channels;
        ParamsVar {
            gamma: raw.narrow(1, 0, c).add_scalar(T::one()),
            beta: raw.narrow(1, c, c),
            alpha: raw.narrow(1, 2 * c, c).tanh().mul_scalar(T::lit(self.alpha_max)),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DftWeights<U> {
        DftWeights {
            params: cast_params(&self.params),
            embed: self.embed.clone(),
            head_hidden: self.head_hidden.clone(),
            head_out: self.head_out.clone(),
            num_classes: self.num_classes,
            embed_dim: self.embed_dim,
            channels: self.channels,
            alpha_max: self.alpha_max,
        }
    }
}

fn check_probs<T: Scalar>(probs: &Tensor<T>, classes: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, k, h, w) = probs
        .dims4()
        .map_err(|_| Error::Shape(format!("probabilities must be (B, K, H, W), got {:?}", probs.shape())))?;
    if k != classes {
        return Err(Error::Config(format!("expected {classes} class channels, got {k}")));
    }
    let hw = h * w;
    for bi in 0..b {
        for p in 0..hw {
            let mut s = 0.0;
            for c in 0..k {
                let v = probs.data()[(bi * k + c) * hw + p].as_f64();
                if !(v >= -PROB_SUM_TOL) || !v.is_finite() {
                    return Err(Error::InvalidInput(format!("invalid probability {v}")));
                }
                s += v;
            }
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidInput(format!("class probabilities sum to {s}, not 1")));
            }
        }
    }
    Ok((b, k, h, w))
}

/// Resizes every plane of a 4-d tensor. Integer downscaling averages each
/// block; any other ratio uses bilinear interpolation with pixel-centre
/// alignment. Both keep per-pixel distributions normalized.
pub fn resample<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resample target must be non-empty".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(t.clone());
    }
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    if h % out_h == 0 && w % out_w == 0 {
        let (fy, fx) = (h / out_h, w / out_w);
        let norm = T::lit((fy * fx) as f64);
        for plane in t.data().chunks(h * w) {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut s = T::zero();
                    for y in oy * fy..(oy + 1) * fy {
                        for x in ox * fx..(ox + 1) * fx {
                            s = s + plane[y * w + x];
                        }
                    }
                    out.push(s / norm);
                }
            }
        }
    } else {
        let coord = |o: usize, n_in: usize, n_out: usize| {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::lit(src - i0 as f64))
        };
        for plane in t.data().chunks(h * w) {
            for oy in 0..out_h {
                let (y0, y1, ty) = coord(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1, tx) = coord(ox, w, out_w);
                    let top = plane[y0 * w + x0] * (T::one() - tx) + plane[y0 * w + x1] * tx;
                    let bot = plane[y1 * w + x0] * (T::one() - tx) + plane[y1 * w + x1] * tx;
                    out.push(top * (T::one() - ty) + bot * ty);
                }
            }
        }
    }
    Tensor::new(vec![b, c, out_h, out_w], out)
}

/// One-hot encoding of per-pixel argmax, same shape as `scores`.
pub fn hard_probs<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let (b, k, h, w) = scores.dims4().expect("4-d scores");
    let hw = h * w;
    let labels = argmax_channels(scores);
    let mut out = Tensor::zeros(vec![b, k, h, w]);
    for bi in 0..b {
        for p in 0..hw {
            let c = labels[bi * hw + p] as usize;
            out.data_mut()[(bi * k + c) * hw + p] = T::one();
        }
    }
    out
}

/// Zeroes all class channels of `probs` except `keep`.
pub fn mask_classes<T: Scalar>(probs: &mut Tensor<T>, keep: usize) -> Result<()> {
    let (b, k, h, w) = probs.dims4()?;
    if keep >= k {
        return Err(Error::Config(format!("class {keep} out of range for {k} classes")));
    }
    let hw = h * w;
    for bi in 0..b {
        for c in (0..k).filter(|&c| c != keep) {
            probs.data_mut()[(bi * k + c) * hw..(bi * k + c + 1) * hw].fill(T::zero());
        }
    }
    Ok(())
}

/// Resamples `probs` to `target_hw` and embeds them.
pub fn embed_predictions<T: Scalar>(
    probs: &ProbMap<T>,
    target_hw: (usize, usize),
    weights: &DftWeights<T>,
) -> Result<LatentMap<T>> {
    check_probs(probs, weights.num_classes)?;
    let small = resample(probs, target_hw.0, target_hw.1)?;
    let tape = Tape::new();
    let p = weights.params.bind(&tape, false);
    Ok((*weights.embed_var(&p, tape.constant(small)).value()).clone())
}

pub fn generate_params<T: Scalar>(phi: &LatentMap<T>, weights: &DftWeights<T>) -> Result<HallucinationParams<T>> {
    let (_, d, _, _) = phi.dims4()?;
    if d != weights.embed_dim {
        return Err(Error::Shape(format!("latent map has {d} channels, expected {}", weights.embed_dim)));
    }
    let tape = Tape::new();
    let p = weights.params.bind(&tape, false);
    let pv = weights.params_var(&p, tape.constant(phi.clone()));
    Ok(HallucinationParams {
        gamma: (*pv.gamma.value()).clone(),
        beta: (*pv.beta.value()).clone(),
        alpha: (*pv.alpha.value()).clone(),
    })
}

/// Gaussian noise shaped like `f_style`, projected per batch element onto
/// the orthogonal complement of that element and scaled to unit norm.
pub fn orthogonal_unit_noise<T: Scalar, R: Rng + ?Sized>(f_style: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let (b, _, _, _) = f_style.dims4()?;
    let per = f_style.numel() / b;
    if per < 2 {
        return Err(Error::Degenerate("orthogonal noise needs at least 2 entries per element".into()));
    }
    let mut out = Vec::with_capacity(f_style.numel());
    for fb in f_style.data().chunks(per) {
        let f: Vec<f64> = fb.iter().map(|v| v.as_f64()).collect();
        let ff: f64 = f.iter().map(|v| v * v).sum();
        if ff == 0.0 {
            return Err(Error::Degenerate("style features have zero norm".into()));
        }
        loop {
            let mut n: Vec<f64> = (0..per).map(|_| rng.sample(StandardNormal)).collect();
            let proj = n.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() / ff;
            for (nv, fv) in n.iter_mut().zip(&f) {
                *nv -= proj * fv;
            }
            let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                out.extend(n.iter().map(|v| T::lit(v / norm)));
                break;
            }
        }
    }
    Tensor::new(f_style.shape().to_vec(), out)
}

/// [`orthogonal_unit_noise`] drawn from a fresh generator seeded with `seed`.
pub fn orthogonal_unit_noise_seeded<T: Scalar>(f_style: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    orthogonal_unit_noise(f_style, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `γ ⊙ (z ⊙ f_style + 1) + β`.
pub fn perturb_style_var<'t, T: Scalar>(
    f_style: Var<'t, T>,
    z: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
) -> Var<'t, T> {
    gamma * (z * f_style).add_scalar(T::one()) + beta
}

pub fn perturb_style<T: Scalar>(
    f_style: &Tensor<T>,
    z: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let shape = f_style.shape();
    for (name, t) in [("noise", z), ("gamma", gamma), ("beta", beta)] {
        if t.shape() != shape {
            return Err(Error::Shape(format!("{name} shape {:?} differs from style {shape:?}", t.shape())));
        }
    }
    let tape = Tape::new();
    let c = |t: &Tensor<T>| tape.constant(t.clone());
    Ok((*perturb_style_var(c(f_style), c(z), c(gamma), c(beta)).value()).clone())
}

/// `(σ1 + α) ⊙ f_src + (σ2 − α) ⊙ merged`.
pub fn blend_var<'t, T: Scalar>(
    f_src: Var<'t, T>,
    merged: Var<'t, T>,
    alpha: Option<Var<'t, T>>,
    sigma1: f64,
    sigma2: f64,
) -> Var<'t, T> {
    match alpha {
        Some(a) => f_src * a.add_scalar(T::lit(sigma1)) + merged * (-a).add_scalar(T::lit(sigma2)),
        None => f_src.mul_scalar(T::lit(sigma1)) + merged.mul_scalar(T::lit(sigma2)),
    }
}

pub fn blend<T: Scalar>(
    f_src: &Tensor<T>,
    merged: &Tensor<T>,
    alpha: &Tensor<T>,
    sigma1: f64,
    sigma2: f64,
) -> Result<Tensor<T>> {
    if f_src.shape() != merged.shape() || f_src.shape() != alpha.shape() {
        return Err(Error::Shape("blend inputs must share one shape".into()));
    }
    let tape = Tape::new();
    let c = |t: &Tensor<T>| tape.constant(t.clone());
    Ok((*blend_var(c(f_src), c(merged), Some(c(alpha)), sigma1, sigma2).value()).clone())
}

/// How the style features are altered before merging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StyleMode {
    /// Plain AdaIN with the style features.
    Plain,
    /// Additive orthogonal noise of relative magnitude `scale`, no transformer.
    Noise { scale: f64 },
    /// Transformer-driven perturbation; `orthogonal_noise` toggles `z`,
    /// `use_alpha` toggles the learned blend offset.
    Transformer { orthogonal_noise: bool, use_alpha: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HallucinateOptions {
    pub sigma1: f64,
    pub sigma2: f64,
    pub mode: StyleMode,
    /// Embed one-hot argmax predictions instead of soft probabilities.
    pub hard_predictions: bool,
    /// Zero every probability channel except this class before embedding.
    pub keep_class: Option<usize>,
}

impl Default for HallucinateOptions {
    fn default() -> Self {
        Self {
            sigma1: 0.4,
            sigma2: 0.4,
            mode: StyleMode::Transformer {
                orthogonal_noise: true,
                use_alpha: true,
            },
            hard_predictions: false,
            keep_class: None,
        }
    }
}

/// Frozen networks used during hallucination.
#[derive(Debug, Clone, Copy)]
pub struct HallucinationNets<'a, T: Scalar> {
    pub encoder: &'a Encoder<T>,
    pub decoder: &'a Decoder<T>,
    pub segmenter: &'a SegNet<T>,
}

/// Every intermediate of one hallucination pass recorded on a tape.
pub struct HallucinationTrace<'t, T: Scalar> {
    pub src_feats: Vec<Var<'t, T>>,
    /// Style features per stage, batch size of the style input.
    pub style_feats: Vec<Var<'t, T>>,
    pub src_logits: Var<'t, T>,
    pub params: Option<ParamsVar<'t, T>>,
    pub noise: Option<Tensor<T>>,
    pub style_perturbed: Var<'t, T>,
    pub merged: Var<'t, T>,
    pub blended: Var<'t, T>,
    pub stylized: Var<'t, T>,
}

impl<T: Scalar> HallucinationTrace<'_, T> {
    pub fn f_src(&self) -> Var<'_, T> {
        *self.src_feats.last().expect("stages")
    }
}

fn check_pair<T: Scalar>(x_src: &Tensor<T>, x_style: &Tensor<T>) -> Result<usize> {
    let (b, c, h, w) = x_src.dims4()?;
    let (bs, cs, hs, ws) = x_style.dims4()?;
    if c != 3 || cs != 3 {
        return Err(Error::Shape("images must have 3 channels".into()));
    }
    if (h, w) != (hs, ws) {
        return Err(Error::Shape(format!("source {h}×{w} and style {hs}×{ws} sizes differ")));
    }
    if bs != 1 && bs != b {
        return Err(Error::Shape(format!("style batch {bs} must be 1 or {b}")));
    }
    Ok(b)
}

/// Records the full hallucination of `x_src` with style `x_style` on `tape`.
/// The encoder, decoder and segmenter are constants; the transformer
/// parameters in `dft` (when given) carry gradients if they were bound as
/// trainable.
pub fn hallucinate_traced<'t, T: Scalar, R: Rng + ?Sized>(
    tape: &'t Tape<T>,
    nets: HallucinationNets<'_, T>,
    dft: Option<(&DftWeights<T>, &Bound<'t, T>)>,
    x_src: &Tensor<T>,
    x_style: &Tensor<T>,
    opts: &HallucinateOptions,
    rng: &mut R,
) -> Result<HallucinationTrace<'t, T>> {
    let b = check_pair(x_src, x_style)?;
    let pe = nets.encoder.params().bind(tape, false);
    let pd = nets.decoder.params().bind(tape, false);
    let pg = nets.segmenter.params().bind(tape, false);
    let xs = tape.constant(x_src.clone());
    let src_feats = nets.encoder.forward(&pe, xs);
    let style_feats = nets.encoder.forward(&pe, tape.constant(x_style.clone()));
    let src_logits = nets.segmenter.forward(&pg, xs);
    let f_src = *src_feats.last().expect("stages");
    let latent_shape = f_src.shape();
    let f_style = style_feats.last().expect("stages").broadcast_as(&latent_shape);

    let mut params = None;
    let mut noise = None;
    let style_perturbed = match opts.mode {
        StyleMode::Plain => f_style,
        StyleMode::Noise { scale } => {
            let fs = f_style.value();
            let z = orthogonal_unit_noise(&fs, rng)?;
            let per = fs.numel() / b;
            let mut scaled = z.clone();
            for (zb, fb) in scaled.data_mut().chunks_mut(per).zip(fs.data().chunks(per)) {
                let norm = T::lit(scale) * fb.iter().map(|&v| v * v).sum::<T>().sqrt();
                zb.iter_mut().for_each(|v| *v = *v * norm);
            }
            noise = Some(z);
            f_style + tape.constant(scaled)
        }
        StyleMode::Transformer { orthogonal_noise, .. } => {
            let (weights, bound) =
                dft.ok_or_else(|| Error::Config("transformer mode needs transformer weights".into()))?;
            if weights.channels != latent_shape[1] {
                return Err(Error::Shape(format!(
                    "transformer built for {} channels, features have {}",
                    weights.channels, latent_shape[1]
                )));
            }
            let logits = src_logits.value();
            let mut probs = if opts.hard_predictions {
                hard_probs(&logits)
            } else {
                crate::autograd::channel_softmax(&logits)
            };
            if let Some(keep) = opts.keep_class {
                mask_classes(&mut probs, keep)?;
            }
            let small = resample(&probs, latent_shape[2], latent_shape[3])?;
            let phi = weights.embed_var(bound, tape.constant(small));
            let pv = weights.params_var(bound, phi);
            params = Some(pv);
            let z = if orthogonal_noise {
                orthogonal_unit_noise(&f_style.value(), rng)?
            } else {
                Tensor::zeros(latent_shape.clone())
            };
            let out = perturb_style_var(f_style, tape.constant(z.clone()), pv.gamma, pv.beta);
            noise = Some(z);
            out
        }
    };
    let merged = adain(f_src, style_perturbed)?;
    let alpha = match (opts.mode, params) {
        (StyleMode::Transformer { use_alpha: true, .. }, Some(pv)) => Some(pv.alpha),
        _ => None,
    };
    let blended = blend_var(f_src, merged, alpha, opts.sigma1, opts.sigma2);
    let stylized = nets.decoder.forward(&pd, blended);
    Ok(HallucinationTrace {
        src_feats,
        style_feats,
        src_logits,
        params,
        noise,
        style_perturbed,
        merged,
        blended,
        stylized,
    })
}

/// Stylized images for `x_src`, with noise drawn from `seed`.
pub fn hallucinate<T: Scalar>(
    nets: HallucinationNets<'_, T>,
    dft: Option<&DftWeights<T>>,
    x_src: &Tensor<T>,
    x_style: &Tensor<T>,
    opts: &HallucinateOptions,
    seed: u64,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = dft.map(|w| w.params.bind(&tape, false));
    let pair = dft.zip(bound.as_ref());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = hallucinate_traced(&tape, nets, pair, x_src, x_style, opts, &mut rng)?;
    let out = (*trace.stylized.value()).clone();
    Ok(out)
}

/// `Dec(w·f_src + (1 − w)·AdaIN(f_src, f_style))` with a global weight.
pub fn uniform_hallucinate<T: Scalar>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    x_src: &Tensor<T>,
    x_style: &Tensor<T>,
    w: f64,
) -> Result<Tensor<T>> {
    check_pair(x_src, x_style)?;
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("uniform weight {w} outside [0, 1]")));
    }
    let tape = Tape::new();
    let pe = encoder.params().bind(&tape, false);
    let pd = decoder.params().bind(&tape, false);
    let f_src = *encoder.forward(&pe, tape.constant(x_src.clone())).last().expect("stages");
    let f_style = encoder.forward(&pe, tape.constant(x_style.clone())).last().expect("stages").broadcast_as(&f_src.shape());
    let merged = adain(f_src, f_style)?;
    let blended = blend_var(f_src, merged, None, w, 1.0 - w);
    Ok((*decoder.forward(&pd, blended).value()).clone())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::nets::ArchConfig;

    fn arch() -> ArchConfig {
        ArchConfig {
            image_size: 16,
            num_classes: 3,
            stage_channels: vec![4, 6],
            seg_width: 5,
            seg_dilations: vec![1, 2],
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_embedding_with_uniform_probs_gives_zero_latent() {
        let mut w = DftWeights::<f64>::new(4, 8, 6, 0.5, 0).unwrap();
        w.zero_embedding();
        let probs = Tensor::full(vec![1, 4, 8, 8], 0.25);
        let phi = embed_predictions(&probs, (2, 2), &w).unwrap();
        assert_eq!(phi.shape(), &[1, 8, 2, 2]);
        assert!(phi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unnormalized_probabilities_are_rejected() {
        let w = DftWeights::<f64>::new(2, 4, 3, 0.5, 0).unwrap();
        let probs = Tensor::full(vec![1, 2, 4, 4], 0.7);
        assert!(matches!(embed_predictions(&probs, (2, 2), &w), Err(Error::InvalidInput(_))));
        let wrong_k = Tensor::full(vec![1, 3, 4, 4], 1.0 / 3.0);
        assert!(matches!(embed_predictions(&wrong_k, (2, 2), &w), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_transformer_is_identity_transform() {
        let w = DftWeights::<f64>::new(3, 8, 6, 0.5, 9).unwrap();
        let phi = randn(&[2, 8, 3, 3], 1).map(|v| v.tanh());
        let hp = generate_params(&phi, &w).unwrap();
        assert_eq!(hp.gamma.shape(), &[2, 6, 3, 3]);
        assert!(hp.gamma.data().iter().all(|&v| v == 1.0));
        assert!(hp.beta.data().iter().all(|&v| v == 0.0));
        assert!(hp.alpha.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_stays_within_bound() {
        let mut w = DftWeights::<f64>::new(3, 4, 2, 0.3, 0).unwrap();
        let id = w.head_out.bias_id();
        w.params_mut().get_mut(id).data_mut().fill(50.0);
        let hp = generate_params(&randn(&[1, 4, 2, 2], 3), &w).unwrap();
        assert!(hp.alpha.data().iter().all(|&a| a.abs() <= 0.3));
    }

    #[test]
    fn perturbation_with_identity_params() {
        let f = randn(&[1, 2, 2, 2], 4);
        let z = randn(&[1, 2, 2, 2], 5);
        let one = Tensor::ones(vec![1, 2, 2, 2]);
        let zero = Tensor::zeros(vec![1, 2, 2, 2]);
        let out = perturb_style(&f, &z, &one, &zero).unwrap();
        for i in 0..8 {
            assert_eq!(out.data()[i], z.data()[i] * f.data()[i] + 1.0);
        }
        assert!(perturb_style(&f, &z, &one, &Tensor::zeros(vec![1, 2, 2, 1])).is_err());
    }

    #[test]
    fn zero_style_features_are_degenerate() {
        let f = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        assert!(matches!(orthogonal_unit_noise_seeded(&f, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn perturbation_hand_cases() {
        let f = Tensor::new(vec![1, 1, 1, 2], vec![0.5f64, 2.0]).unwrap();
        let z = Tensor::new(vec![1, 1, 1, 2], vec![1.0f64, 0.0]).unwrap();
        let gamma = Tensor::full(vec![1, 1, 1, 2], 2.0);
        let beta = Tensor::full(vec![1, 1, 1, 2], -1.0);
        // 2·(0.5 + 1) − 1 = 2 and 2·(0 + 1) − 1 = 1
        assert_eq!(perturb_style(&f, &z, &gamma, &beta).unwrap().data(), &[2.0, 1.0]);
        let collapse = perturb_style(&f, &z, &Tensor::zeros(vec![1, 1, 1, 2]), &Tensor::full(vec![1, 1, 1, 2], 0.7)).unwrap();
        assert_eq!(collapse.data(), &[0.7, 0.7]);
    }

    #[test]
    fn blend_limits() {
        let f = randn(&[1, 2, 3, 3], 6);
        let m = randn(&[1, 2, 3, 3], 7);
        let a0 = Tensor::zeros(vec![1, 2, 3, 3]);
        assert_eq!(blend(&f, &m, &a0, 1.0, 0.0).unwrap(), f);
        let out = blend(&f, &f, &a0, 0.3, 0.7).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-12);
        // with α the mix stays a convex combination of the two inputs' sum
        let a = Tensor::full(vec![1, 2, 3, 3], 0.2);
        let out = blend(&f, &m, &a, 0.4, 0.4).unwrap();
        for i in 0..18 {
            let want = 0.6 * f.data()[i] + 0.2 * m.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_keeps_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Tensor::<f64>::randn(vec![1, 3, 6, 6], &mut rng);
        let probs = crate::autograd::channel_softmax(&logits);
        for (h, w) in [(3, 3), (4, 5), (6, 6), (9, 9)] {
            let r = resample(&probs, h, w).unwrap();
            for p in 0..h * w {
                let s: f64 = (0..3).map(|c| r.data()[c * h * w + p]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let blocks = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(resample(&blocks, 1, 1).unwrap().data(), &[4.0]);
    }

    #[test]
    fn uniform_weight_one_decodes_source_features() {
        let a = arch();
        let enc = Encoder::<f64>::new(&a, 1);
        let dec = Decoder::<f64>::new(&a, 1);
        let x = Tensor::rand_uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let style = Tensor::rand_uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let out = uniform_hallucinate(&enc, &dec, &x, &style, 1.0).unwrap();
        let direct = dec.decode(enc.encode(&x).unwrap().last().unwrap()).unwrap();
        assert_eq!(out, direct);
        assert!(uniform_hallucinate(&enc, &dec, &x, &style, 1.5).is_err());
    }

    #[test]
    fn hallucination_is_seeded_and_shaped() {
        let a = arch();
        let enc = Encoder::<f32>::new(&a, 1);
        let dec = Decoder::<f32>::new(&a, 1);
        let seg = SegNet::<f32>::new(&a, 1);
        let dft = DftWeights::new(3, 4, 6, 0.5, 1).unwrap();
        let nets = HallucinationNets { encoder: &enc, decoder: &dec, segmenter: &seg };
        let x = Tensor::rand_uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let style = Tensor::rand_uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let opts = HallucinateOptions::default();
        let a1 = hallucinate(nets, Some(&dft), &x, &style, &opts, 7).unwrap();
        let a2 = hallucinate(nets, Some(&dft), &x, &style, &opts, 7).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.shape(), &[2, 3, 16, 16]);
        assert!(a1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(hallucinate(nets, None, &x, &style, &opts, 7).is_err());
        let bad_style = Tensor::zeros(vec![3, 3, 16, 16]);
        assert!(hallucinate(nets, Some(&dft), &x, &bad_style, &opts, 7).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn noise_is_orthogonal_unit(seed in 0u64..100_000, b in 1usize..3, c in 1usize..5, hw in 1usize..5) {
            let f = randn(&[b, c, hw, hw], seed);
            let per = c * hw * hw;
            prop_assume!(per > 1);
            let z = orthogonal_unit_noise_seeded(&f, seed + 1).unwrap();
            prop_assert_eq!(&z, &orthogonal_unit_noise_seeded(&f, seed + 1).unwrap());
            for (zb, fb) in z.data().chunks(per).zip(f.data().chunks(per)) {
                let dot: f64 = zb.iter().zip(fb).map(|(a, b)| a * b).sum();
                let norm: f64 = zb.iter().map(|a| a * a).sum::<f64>().sqrt();
                prop_assert!(dot.abs() <= 1e-6);
                prop_assert!((norm - 1.0).abs() <= 1e-6);
            }
        }
    }
}
