#![allow(dead_code)]

use ashplus_core::autograd::Tape;
use ashplus_core::dft::{hallucinate_traced, DftWeights, HallucinateOptions, HallucinationNets};
use ashplus_core::nets::{ArchConfig, Decoder, Encoder, SegNet};
use ashplus_core::objectives::{ash_plus_loss, LossBreakdown};
use ashplus_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tiny networks with fewer than 2,000 parameters in total.
pub struct ToyNets {
    pub enc: Encoder<f64>,
    pub dec: Decoder<f64>,
    pub seg: SegNet<f64>,
    pub dft: DftWeights<f64>,
    pub x: Tensor<f64>,
    pub style: Tensor<f64>,
}

impl ToyNets {
    pub fn new(seed: u64) -> Self {
        let arch = ArchConfig {
            image_size: 8,
            num_classes: 3,
            stage_channels: vec![3, 4],
            seg_width: 4,
            seg_dilations: vec![1, 2],
        };
        let mut dft = DftWeights::new(3, 4, 4, 0.5, seed).unwrap();
        // the output head starts at zero; randomize it so every layer gets gradient
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let names: Vec<String> = dft.params().iter().map(|p| p.name.clone()).collect();
        let mut named = dft.params().to_named();
        for (name, t) in named.iter_mut() {
            if name.starts_with("head.out") {
                *t = Tensor::randn(t.shape().to_vec(), &mut rng).scale(0.3);
            }
        }
        assert_eq!(names.len(), named.len());
        dft.params_mut().load_named(&named).unwrap();
        let mut img_rng = ChaCha8Rng::seed_from_u64(seed + 200);
        Self {
            enc: Encoder::new(&arch, seed),
            dec: Decoder::new(&arch, seed),
            seg: SegNet::new(&arch, seed),
            dft,
            x: Tensor::rand_uniform(vec![2, 3, 8, 8], 0.0, 1.0, &mut img_rng),
            style: Tensor::rand_uniform(vec![1, 3, 8, 8], 0.0, 1.0, &mut img_rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.enc.params().count() + self.dec.params().count() + self.seg.params().count() + self.dft.params().count()
    }

    pub fn loss_with(&self, dft: &DftWeights<f64>) -> f64 {
        let tape = Tape::new();
        let bound = dft.params().bind(&tape, false);
        let nets = HallucinationNets { encoder: &self.enc, decoder: &self.dec, segmenter: &self.seg };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trace = hallucinate_traced(&tape, nets, Some((dft, &bound)), &self.x, &self.style, &HallucinateOptions::default(), &mut rng).unwrap();
        ash_plus_loss(&tape, &trace, &self.enc, &self.seg).unwrap().total.item()
    }

    /// Recorded loss terms of one transformer pass.
    pub fn breakdown(&self) -> LossBreakdown {
        let tape = Tape::new();
        let bound = self.dft.params().bind(&tape, false);
        let nets = HallucinationNets { encoder: &self.enc, decoder: &self.dec, segmenter: &self.seg };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trace = hallucinate_traced(&tape, nets, Some((&self.dft, &bound)), &self.x, &self.style, &HallucinateOptions::default(), &mut rng).unwrap();
        ash_plus_loss(&tape, &trace, &self.enc, &self.seg).unwrap().breakdown(0.0)
    }

    /// Analytic gradients per transformer parameter tensor.
    pub fn grads(&self) -> Vec<Tensor<f64>> {
        let tape = Tape::new();
        let bound = self.dft.params().bind(&tape, true);
        let nets = HallucinationNets { encoder: &self.enc, decoder: &self.dec, segmenter: &self.seg };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trace = hallucinate_traced(&tape, nets, Some((&self.dft, &bound)), &self.x, &self.style, &HallucinateOptions::default(), &mut rng).unwrap();
        let loss = ash_plus_loss(&tape, &trace, &self.enc, &self.seg).unwrap().total;
        let g = tape.backward(loss);
        bound.grads(&g)
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central-difference check of the transformer loss; returns
/// `(probed, worst relative error)`.
pub fn probe_ash_plus_gradients(seed: u64, probes: usize) -> (usize, f64) {
    let toy = ToyNets::new(seed);
    let grads = toy.grads();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for _ in 0..probes {
        let ti = rng.random_range(0..grads.len());
        let ei = rng.random_range(0..grads[ti].numel());
        let mut named = toy.dft.params().to_named();
        let base = named[ti].1.data()[ei];
        named[ti].1.data_mut()[ei] = base + h;
        let mut plus = toy.dft.clone();
        plus.params_mut().load_named(&named).unwrap();
        named[ti].1.data_mut()[ei] = base - h;
        let mut minus = toy.dft.clone();
        minus.params_mut().load_named(&named).unwrap();
        let numeric = (toy.loss_with(&plus) - toy.loss_with(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(grads[ti].data()[ei], numeric));
    }
    (probes, worst)
}
