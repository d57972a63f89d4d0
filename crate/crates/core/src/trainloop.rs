//! Training drivers: source-only, uniform hallucination and the alternating
//! transformer/segmenter schedule, plus the ablation and sigma sweeps.

use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::NetBundle;
use crate::config::TrainConfig;
use crate::dft::{hallucinate, hallucinate_traced, uniform_hallucinate, DftWeights, HallucinationNets};
use crate::error::{Error, Result};
use crate::metrics::{avg_miou, evaluate, write_eval_csv, DomainEval};
use crate::nets::{Decoder, Encoder, SegNet};
use crate::nn::{Optimizer, ParamSet};
use crate::objectives::{ash_plus_loss, consistency_loss, seg_loss, LossBreakdown};
use crate::synthdata::Dataset;
use crate::tensor::{Scalar, Tensor};

/// Pretrained, frozen feature encoder and image decoder.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: Encoder<f32>,
    pub decoder: Decoder<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    SourceOnly,
    Uniform,
    AshPlus,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::SourceOnly => "source-only",
            RunMode::Uniform => "uniform",
            RunMode::AshPlus => "ash-plus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Source-only segmenter update before the joint phase.
    Warmup,
    Hallucinate,
    TransformerStep,
    SegmenterStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepEvent {
    pub iter: usize,
    pub phase: Phase,
    /// Parameter fingerprints after the phase, when the observer asks.
    pub segmenter: Option<u64>,
    pub transformer: Option<u64>,
}

/// Receives every phase of every iteration in order.
pub trait TrainObserver {
    fn wants_fingerprints(&self) -> bool {
        false
    }
    fn on_step(&mut self, _event: &StepEvent) {}
}

impl TrainObserver for () {}

impl TrainObserver for Vec<StepEvent> {
    fn wants_fingerprints(&self) -> bool {
        true
    }
    fn on_step(&mut self, event: &StepEvent) {
        self.push(*event);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: RunMode,
    pub config: TrainConfig,
    /// One entry per segmenter update, warm-up included.
    pub losses: Vec<LossBreakdown>,
    pub evals: Vec<DomainEval>,
    /// Mean of the per-domain mIoU values; `None` without targets.
    pub avg_miou: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub nets: NetBundle,
}

impl TrainOutcome {
    pub fn segmenter(&self) -> &SegNet<f32> {
        self.nets.segmenter.as_ref().expect("training always yields a segmenter")
    }
}

/// Per-epoch shuffled batches over a dataset.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            batch: batch.min(n),
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn check_finite(b: &LossBreakdown, iter: usize) -> Result<()> {
    let vals = [b.seg, b.cont, b.content, b.style_pos, b.style_neg];
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("non-finite loss at iteration {iter}: {b:?}")))
    }
}

fn check_inputs(source: &Dataset, styles: &[Tensor<f32>], cfg: &TrainConfig, needs_styles: bool) -> Result<()> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Config(format!("source dataset {} is empty", source.name)));
    }
    if source.num_classes != cfg.num_classes || source.image_size != cfg.image_size {
        return Err(Error::Config(format!(
            "source has {} classes at {} px, config expects {} at {} px",
            source.num_classes, source.image_size, cfg.num_classes, cfg.image_size
        )));
    }
    if needs_styles {
        if styles.is_empty() {
            return Err(Error::Config("style pool is empty".into()));
        }
        let want = [1, 3, cfg.image_size, cfg.image_size];
        if let Some(bad) = styles.iter().find(|s| s.shape() != want) {
            return Err(Error::Shape(format!("style image {:?}, expected {want:?}", bad.shape())));
        }
    }
    Ok(())
}

fn fingerprint(want: bool, p: Option<&ParamSet<f32>>) -> Option<u64> {
    if want {
        p.map(ParamSet::fingerprint)
    } else {
        None
    }
}

/// One segmenter update on `seg(x) + cont(G(x_sty), G(x))`, the second term
/// only when stylized images are given. Returns `(seg, cont)`.
fn segmenter_step(
    seg: &mut SegNet<f32>,
    opt: &mut Optimizer<f32>,
    cfg: &TrainConfig,
    x: &Tensor<f32>,
    labels: &[u8],
    x_sty: Option<&Tensor<f32>>,
) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let pg = seg.params().bind(&tape, true);
    let logits = seg.forward(&pg, tape.constant(x.clone()));
    let seg_term = seg_loss(logits, labels)?;
    let mut total = seg_term.mul_scalar(cfg.seg_weight as f32);
    let mut cont_value = 0.0;
    if let Some(xs) = x_sty {
        let logits_sty = seg.forward(&pg, tape.constant(xs.clone()));
        let src_probs = if cfg.detach_source_probs { logits.detach() } else { logits }.softmax_channels();
        let cont = consistency_loss(logits_sty.softmax_channels(), src_probs)?;
        cont_value = cont.item() as f64;
        total = total + cont.mul_scalar(cfg.cont_weight as f32);
        if cfg.seg_on_stylized {
            total = total + seg_loss(logits_sty, labels)?.mul_scalar(cfg.seg_weight as f32);
        }
    }
    let seg_value = seg_term.item() as f64;
    let grads = tape.backward(total);
    let g = pg.grads(&grads);
    drop(grads);
    drop(tape);
    opt.step(seg.params_mut(), &g);
    Ok((seg_value, cont_value))
}

/// Trains a segmenter in `mode` and evaluates it on every target domain.
///
/// Every mode first runs `warmup_iters` source-only updates. The joint
/// phase then runs `iter_num` iterations; under [`RunMode::AshPlus`] with the
/// adversarial toggle each iteration hallucinates a batch, takes one
/// transformer step on the transformer loss, then one segmenter step with the
/// stylized batch held fixed. A configuration with stylization disabled
/// trains source-only whatever the mode.
pub fn train(
    mode: RunMode,
    source: &Dataset,
    styles: &[Tensor<f32>],
    ae: Option<&Autoencoder>,
    targets: &[Dataset],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let opts = cfg.hallucinate_options();
    let mode = if opts.is_none() { RunMode::SourceOnly } else { mode };
    let needs_ae = mode != RunMode::SourceOnly;
    check_inputs(source, styles, cfg, needs_ae)?;
    let ae = match (needs_ae, ae) {
        (true, Some(ae)) => Some(ae),
        (true, None) => return Err(Error::Config(format!("{} training needs a pretrained autoencoder", mode.name()))),
        (false, _) => None,
    };
    let arch = cfg.arch();
    if let Some(ae) = ae {
        if ae.encoder.num_stages() != arch.stage_channels.len() {
            return Err(Error::Config("autoencoder does not match the configured stages".into()));
        }
    }
    let started = Instant::now();
    let want_fp = observer.wants_fingerprints();

    let mut seg = SegNet::<f32>::new(&arch, stream_seed(cfg.seed, 10));
    let mut opt_g = Optimizer::new(cfg.optimizer_kind(), cfg.lr_g, seg.params());
    let adversarial = mode == RunMode::AshPlus && cfg.enable_adversarial;
    let mut dft = if adversarial {
        Some(DftWeights::<f32>::new(
            cfg.num_classes,
            cfg.embed_dim,
            arch.latent_channels(),
            cfg.alpha_max,
            stream_seed(cfg.seed, 11),
        )?)
    } else {
        None
    };
    let mut opt_dft = dft.as_ref().map(|w| Optimizer::new(cfg.optimizer_kind(), cfg.lr_dft, w.params()));

    let mut data_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2));
    let mut sampler = BatchSampler::new(source.len(), cfg.batch_size);
    let total_iters = cfg.warmup_iters + cfg.iter_num;
    let mut losses = Vec::with_capacity(total_iters);

    for iter in 0..total_iters {
        let idx = sampler.next(&mut data_rng);
        let (x, labels) = source.batch(&idx)?;
        let joint = iter >= cfg.warmup_iters && mode != RunMode::SourceOnly;
        if !joint {
            let (s, _) = segmenter_step(&mut seg, &mut opt_g, cfg, &x, &labels, None)?;
            let b = LossBreakdown::from_terms(s, 0.0, 0.0, 0.0, 0.0);
            check_finite(&b, iter)?;
            losses.push(b);
            observer.on_step(&StepEvent {
                iter,
                phase: Phase::Warmup,
                segmenter: fingerprint(want_fp, Some(seg.params())),
                transformer: fingerprint(want_fp, dft.as_ref().map(|w| w.params())),
            });
            continue;
        }
        let ae = ae.expect("joint phase has an autoencoder");
        let opts = opts.as_ref().expect("joint phase has options");
        let style = &styles[data_rng.random_range(0..styles.len())];

        let mut terms = None;
        let x_sty = match (mode, dft.as_mut()) {
            (RunMode::Uniform, _) => uniform_hallucinate(&ae.encoder, &ae.decoder, &x, style, cfg.uniform_w)?,
            (_, Some(weights)) => {
                let tape = Tape::new();
                let pw = weights.params().bind(&tape, true);
                let nets = HallucinationNets {
                    encoder: &ae.encoder,
                    decoder: &ae.decoder,
                    segmenter: &seg,
                };
                let trace = hallucinate_traced(&tape, nets, Some((&*weights, &pw)), &x, style, opts, &mut noise_rng)?;
                let t = ash_plus_loss(&tape, &trace, &ae.encoder, &seg)?;
                let stylized = (*trace.stylized.value()).clone();
                observer.on_step(&StepEvent {
                    iter,
                    phase: Phase::Hallucinate,
                    segmenter: fingerprint(want_fp, Some(seg.params())),
                    transformer: fingerprint(want_fp, Some(weights.params())),
                });
                terms = Some(t.breakdown(0.0));
                let grads = tape.backward(t.total);
                let gw = pw.grads(&grads);
                drop(grads);
                drop(trace);
                drop(tape);
                opt_dft.as_mut().expect("optimizer with weights").step(weights.params_mut(), &gw);
                observer.on_step(&StepEvent {
                    iter,
                    phase: Phase::TransformerStep,
                    segmenter: fingerprint(want_fp, Some(seg.params())),
                    transformer: fingerprint(want_fp, Some(weights.params())),
                });
                stylized
            }
            (_, None) => {
                let nets = HallucinationNets {
                    encoder: &ae.encoder,
                    decoder: &ae.decoder,
                    segmenter: &seg,
                };
                hallucinate(nets, None, &x, style, opts, noise_rng.random())?
            }
        };
        if terms.is_none() {
            observer.on_step(&StepEvent {
                iter,
                phase: Phase::Hallucinate,
                segmenter: fingerprint(want_fp, Some(seg.params())),
                transformer: None,
            });
        }
        let (s, c) = segmenter_step(&mut seg, &mut opt_g, cfg, &x, &labels, Some(&x_sty))?;
        let b = match terms {
            Some(t) => LossBreakdown::from_terms(s, t.cont, t.content, t.style_pos, t.style_neg),
            None => LossBreakdown::from_terms(s, c, 0.0, 0.0, 0.0),
        };
        check_finite(&b, iter)?;
        losses.push(b);
        observer.on_step(&StepEvent {
            iter,
            phase: Phase::SegmenterStep,
            segmenter: fingerprint(want_fp, Some(seg.params())),
            transformer: fingerprint(want_fp, dft.as_ref().map(|w| w.params())),
        });
        if (iter + 1) % 100 == 0 {
            info!(
                "{} iter {}/{}: seg {:.4} cont {:.4} ash+ {:.4}",
                mode.name(),
                iter + 1,
                total_iters,
                b.seg,
                b.cont,
                b.ash_plus
            );
        }
    }

    let evals = evaluate_all(&seg, targets, cfg.eval_batch)?;
    let avg = if evals.is_empty() {
        None
    } else {
        Some(avg_miou(&evals.iter().map(|e| e.miou).collect::<Vec<_>>())?)
    };
    let nets = NetBundle {
        encoder: ae.map(|a| a.encoder.clone()),
        decoder: ae.map(|a| a.decoder.clone()),
        segmenter: Some(seg),
        dft,
    };
    Ok(TrainOutcome {
        record: RunRecord {
            mode,
            config: cfg.clone(),
            losses,
            evals,
            avg_miou: avg,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        nets,
    })
}

/// Runs `steps` transformer updates on one fixed batch, style image and
/// noise draw while the segmenter stays frozen. Returns the loss breakdown
/// before each update and after the last one (`steps + 1` entries).
#[allow(clippy::too_many_arguments)]
pub fn transformer_probe(
    ae: &Autoencoder,
    segmenter: &SegNet<f32>,
    dft: &mut DftWeights<f32>,
    x: &Tensor<f32>,
    style: &Tensor<f32>,
    cfg: &TrainConfig,
    steps: usize,
    noise_seed: u64,
) -> Result<Vec<LossBreakdown>> {
    let opts = cfg
        .hallucinate_options()
        .ok_or_else(|| Error::Config("transformer probe needs stylization enabled".into()))?;
    let mut opt = Optimizer::new(cfg.optimizer_kind(), cfg.lr_dft, dft.params());
    let nets = HallucinationNets {
        encoder: &ae.encoder,
        decoder: &ae.decoder,
        segmenter,
    };
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let tape = Tape::new();
        let pw = dft.params().bind(&tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let trace = hallucinate_traced(&tape, nets, Some((&*dft, &pw)), x, style, &opts, &mut rng)?;
        let terms = ash_plus_loss(&tape, &trace, &ae.encoder, segmenter)?;
        let b = terms.breakdown(0.0);
        check_finite(&b, step)?;
        out.push(b);
        if step == steps {
            break;
        }
        let grads = tape.backward(terms.total);
        let g = pw.grads(&grads);
        drop(grads);
        drop(trace);
        drop(tape);
        opt.step(dft.params_mut(), &g);
    }
    Ok(out)
}

pub fn evaluate_all<T: Scalar>(seg: &SegNet<T>, targets: &[Dataset], batch: usize) -> Result<Vec<DomainEval>> {
    targets.iter().map(|t| evaluate(seg, t, batch)).collect()
}

pub fn train_source_only(source: &Dataset, targets: &[Dataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(RunMode::SourceOnly, source, &[], None, targets, cfg, &mut ())
}

pub fn train_uniform(
    source: &Dataset,
    styles: &[Tensor<f32>],
    ae: &Autoencoder,
    targets: &[Dataset],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train(RunMode::Uniform, source, styles, Some(ae), targets, cfg, &mut ())
}

pub fn train_ashplus(
    source: &Dataset,
    styles: &[Tensor<f32>],
    ae: &Autoencoder,
    targets: &[Dataset],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train(RunMode::AshPlus, source, styles, Some(ae), targets, cfg, &mut ())
}

/// The five cumulative ablation settings, in order.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let toggles = [
        ("baseline", false, false, false, false),
        ("+stylization", true, false, false, false),
        ("+noise", true, true, false, false),
        ("+transformer", true, true, true, false),
        ("+alpha", true, true, true, true),
    ];
    toggles
        .iter()
        .map(|&(name, s, n, a, al)| {
            let cfg = TrainConfig {
                enable_stylization: s,
                enable_orthogonal_noise: n,
                enable_adversarial: a,
                enable_alpha: al,
                ..base.clone()
            };
            (name, cfg)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub record: RunRecord,
}

pub fn ablation_suite(
    source: &Dataset,
    styles: &[Tensor<f32>],
    ae: &Autoencoder,
    targets: &[Dataset],
    base: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    ablation_configs(base)
        .into_iter()
        .map(|(name, cfg)| {
            info!("ablation row {name}");
            let out = train(RunMode::AshPlus, source, styles, Some(ae), targets, &cfg, &mut ())?;
            Ok(AblationRow {
                name: name.to_string(),
                record: out.record,
            })
        })
        .collect()
}

/// Pairs summing to one.
pub const GRID_COMPLEMENTARY: [(f64, f64); 4] = [(0.0, 1.0), (0.25, 0.75), (0.5, 0.5), (0.75, 0.25)];

/// Pairs including totals above and below one.
pub const GRID_EXTENDED: [(f64, f64); 8] = [
    (0.1, 0.9),
    (0.4, 0.6),
    (0.4, 0.4),
    (0.5, 0.5),
    (0.6, 0.4),
    (0.7, 0.3),
    (0.75, 1.5),
    (0.25, 0.5),
];

/// Grid by name: `synthia-default` is [`GRID_COMPLEMENTARY`], `gta5-default`
/// is [`GRID_EXTENDED`].
pub fn named_grid(name: &str) -> Option<&'static [(f64, f64)]> {
    match name {
        "synthia-default" | "complementary" => Some(&GRID_COMPLEMENTARY),
        "gta5-default" | "extended" => Some(&GRID_EXTENDED),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub sigma1: f64,
    pub sigma2: f64,
    pub record: RunRecord,
}

pub fn sigma_sweep(
    source: &Dataset,
    styles: &[Tensor<f32>],
    ae: &Autoencoder,
    targets: &[Dataset],
    base: &TrainConfig,
    grid: &[(f64, f64)],
) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&(sigma1, sigma2)| {
            info!("sigma sweep ({sigma1}, {sigma2})");
            let cfg = TrainConfig {
                sigma1,
                sigma2,
                ..base.clone()
            };
            let out = train(RunMode::AshPlus, source, styles, Some(ae), targets, &cfg, &mut ())?;
            Ok(SweepRow {
                sigma1,
                sigma2,
                record: out.record,
            })
        })
        .collect()
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::ingest(path, e.to_string())
}

/// `iter, seg, cont, content, style_pos, style_neg, ash_plus`, values in
/// shortest round-trip form.
pub fn write_losses_csv(losses: &[LossBreakdown], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["iter", "seg", "cont", "content", "style_pos", "style_neg", "ash_plus"])
        .map_err(|e| csv_err(path, e))?;
    for (i, b) in losses.iter().enumerate() {
        w.write_record([
            i.to_string(),
            b.seg.to_string(),
            b.cont.to_string(),
            b.content.to_string(),
            b.style_pos.to_string(),
            b.style_neg.to_string(),
            b.ash_plus.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_losses_csv(path: &Path) -> Result<Vec<LossBreakdown>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let v: Vec<f64> = (1..7)
            .map(|i| row.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| csv_err(path, "malformed row")))
            .collect::<Result<_>>()?;
        out.push(LossBreakdown {
            seg: v[0],
            cont: v[1],
            content: v[2],
            style_pos: v[3],
            style_neg: v[4],
            ash_plus: v[5],
        });
    }
    Ok(out)
}

/// Rows of `name, sigma1, sigma2, <domain mIoU …>, average` for a set of runs.
pub fn write_runs_csv(rows: &[(String, f64, f64, &RunRecord)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let domains: Vec<String> = rows
        .first()
        .map(|r| r.3.evals.iter().map(|e| e.domain.clone()).collect())
        .unwrap_or_default();
    let mut header = vec!["name".to_string(), "sigma1".into(), "sigma2".into()];
    header.extend(domains.iter().cloned());
    header.push("average".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (name, s1, s2, rec) in rows {
        let mut row = vec![name.clone(), s1.to_string(), s2.to_string()];
        row.extend(rec.evals.iter().map(|e| format!("{:.6}", e.miou)));
        row.push(rec.avg_miou.map(|a| format!("{a:.6}")).unwrap_or_default());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Summary written next to every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub seed: u64,
    pub iterations: usize,
    pub avg_miou: Option<f64>,
    pub domains: Vec<String>,
    pub miou: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl RunSummary {
    pub fn of(rec: &RunRecord) -> Self {
        Self {
            mode: rec.mode,
            seed: rec.config.seed,
            iterations: rec.losses.len(),
            avg_miou: rec.avg_miou,
            domains: rec.evals.iter().map(|e| e.domain.clone()).collect(),
            miou: rec.evals.iter().map(|e| e.miou).collect(),
            wall_clock_secs: rec.wall_clock_secs,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| csv_err(path, e))
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const CONFIG_FILE: &str = "config.toml";

/// Writes config, per-iteration losses, evaluation, summary and checkpoint
/// into `dir`.
pub fn save_run(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rec = &outcome.record;
    rec.config.save(&dir.join(CONFIG_FILE))?;
    write_losses_csv(&rec.losses, &dir.join(METRICS_FILE))?;
    write_eval_csv(&rec.evals, &dir.join(EVAL_FILE))?;
    let summary = toml::to_string(&RunSummary::of(rec)).expect("summary serializes");
    let spath = dir.join(SUMMARY_FILE);
    std::fs::write(&spath, summary).map_err(|e| Error::io(&spath, e))?;
    outcome
        .nets
        .save(&rec.config, rec.losses.len() as u64, &dir.join(CHECKPOINT_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ArchConfig;
    use crate::synthdata::{generate_domain, generate_style_pool, DomainSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            image_size: 32,
            stage_channels: vec![4, 8],
            seg_width: 6,
            seg_dilations: vec![1, 2],
            embed_dim: 4,
            batch_size: 2,
            iter_num: 3,
            warmup_iters: 2,
            ..TrainConfig::default()
        }
    }

    fn fixtures(cfg: &TrainConfig) -> (Dataset, Vec<Tensor<f32>>, Autoencoder) {
        let spec = DomainSpec::default_world(cfg.image_size);
        let ds = generate_domain(&spec, 6, 3).unwrap();
        let styles = generate_style_pool(3, cfg.image_size, 4).unwrap();
        let arch: ArchConfig = cfg.arch();
        let ae = Autoencoder {
            encoder: Encoder::new(&arch, 5),
            decoder: Decoder::new(&arch, 6),
        };
        (ds, styles, ae)
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = BatchSampler::new(6, 2);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next(&mut rng)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn alternating_schedule_order() {
        let cfg = tiny_cfg();
        let (ds, styles, ae) = fixtures(&cfg);
        let mut events: Vec<StepEvent> = Vec::new();
        let out = train(RunMode::AshPlus, &ds, &styles, Some(&ae), std::slice::from_ref(&ds), &cfg, &mut events).unwrap();
        assert_eq!(out.record.losses.len(), 5);
        let phases: Vec<Phase> = events.iter().map(|e| e.phase).collect();
        assert_eq!(&phases[..2], &[Phase::Warmup, Phase::Warmup]);
        for chunk in phases[2..].chunks(3) {
            assert_eq!(chunk, &[Phase::Hallucinate, Phase::TransformerStep, Phase::SegmenterStep]);
        }
        for w in events[2..].chunks(3) {
            // transformer step leaves G alone; segmenter step leaves the transformer alone
            assert_eq!(w[0].segmenter, w[1].segmenter);
            assert_ne!(w[0].transformer, w[1].transformer);
            assert_eq!(w[1].transformer, w[2].transformer);
            assert_ne!(w[1].segmenter, w[2].segmenter);
        }
        for b in &out.record.losses[2..] {
            assert_eq!(b.ash_plus.to_bits(), b.composed_ash_plus().to_bits());
            assert!(b.content > 0.0);
        }
        assert!(out.nets.dft.is_some());
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny_cfg();
        let (ds, styles, ae) = fixtures(&cfg);
        let a = train_ashplus(&ds, &styles, &ae, std::slice::from_ref(&ds), &cfg).unwrap();
        let b = train_ashplus(&ds, &styles, &ae, std::slice::from_ref(&ds), &cfg).unwrap();
        assert_eq!(a.record.losses, b.record.losses);
        assert_eq!(a.record.evals, b.record.evals);
    }

    #[test]
    fn source_only_has_no_transformer_and_needs_no_styles() {
        let cfg = tiny_cfg();
        let (ds, _, _) = fixtures(&cfg);
        let out = train_source_only(&ds, &[], &cfg).unwrap();
        assert!(out.nets.dft.is_none() && out.nets.encoder.is_none());
        assert_eq!(out.record.losses.len(), 5);
        assert!(out.record.avg_miou.is_none());
        assert!(out.record.losses.iter().all(|b| b.cont == 0.0));
    }

    #[test]
    fn uniform_and_missing_inputs() {
        let cfg = tiny_cfg();
        let (ds, styles, ae) = fixtures(&cfg);
        let out = train_uniform(&ds, &styles, &ae, &[], &cfg).unwrap();
        assert!(out.record.losses[2..].iter().all(|b| b.cont >= 0.0 && b.content == 0.0));
        assert!(train(RunMode::AshPlus, &ds, &styles, None, &[], &cfg, &mut ()).is_err());
        assert!(train_ashplus(&ds, &[], &ae, &[], &cfg).is_err());
    }

    #[test]
    fn ablation_rows_and_grids() {
        let rows = ablation_configs(&TrainConfig::default());
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|(_, c)| c.validate().is_ok()));
        assert_eq!(rows[0].1.style_mode(), None);
        assert_eq!(named_grid("synthia-default").unwrap().len(), 4);
        assert_eq!(named_grid("gta5-default").unwrap().len(), 8);
        assert!(named_grid("other").is_none());
    }

    #[test]
    fn losses_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let losses = vec![
            LossBreakdown::from_terms(0.1, 1.0 / 3.0, 2.5, 0.7, 1e-9),
            LossBreakdown::from_terms(f64::MIN_POSITIVE, 0.0, 0.0, 0.0, 0.0),
        ];
        write_losses_csv(&losses, &path).unwrap();
        assert_eq!(read_losses_csv(&path).unwrap(), losses);
    }
}
