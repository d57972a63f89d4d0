//! Segmentation metrics and post-training analyses.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::dft::{hallucinate, DftWeights, HallucinateOptions, HallucinationNets};
use crate::error::{Error, Result};
use crate::nets::SegNet;
use crate::objectives::IGNORE_LABEL;
use crate::synthdata::Dataset;
use crate::tensor::{Scalar, Tensor};

/// `K × K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds per-pixel joint counts; pixels whose truth is the ignore label
    /// are skipped.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::InvalidLabel {
                    label: t.max(p) as u32,
                    classes: k,
                });
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let diag: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        diag as f64 / self.total().max(1) as f64
    }
}

/// `TP / (TP + FP + FN)` per class; `None` when the class appears in
/// neither truth nor prediction.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let k = cm.num_classes;
    (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

/// Mean IoU over present classes; zero when no class is present.
pub fn miou(cm: &ConfusionMatrix) -> f64 {
    let present: Vec<f64> = iou_per_class(cm).into_iter().flatten().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn avg_miou(per_domain: &[f64]) -> Result<f64> {
    if per_domain.is_empty() {
        return Err(Error::InvalidInput("average of no domains".into()));
    }
    Ok(per_domain.iter().sum::<f64>() / per_domain.len() as f64)
}

/// `100 · (ours − theirs) / ours`.
pub fn rel_diff(ours: f64, theirs: f64) -> f64 {
    100.0 * (ours - theirs) / ours
}

/// Evaluation of one segmenter on one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub domain: String,
    pub confusion: ConfusionMatrix,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn evaluate<T: Scalar>(segmenter: &SegNet<T>, ds: &Dataset, batch_size: usize) -> Result<DomainEval> {
    if ds.num_classes != segmenter.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, segmenter {}",
            ds.num_classes,
            segmenter.num_classes()
        )));
    }
    let mut cm = ConfusionMatrix::new(ds.num_classes);
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk)?;
        let pred = segmenter.predict(&x.cast())?;
        cm.accumulate(&pred, &labels)?;
    }
    Ok(DomainEval {
        domain: ds.name.clone(),
        iou: iou_per_class(&cm),
        miou: miou(&cm),
        confusion: cm,
    })
}

/// Writes `domain, iou_0 … iou_{K−1}, miou` rows; absent classes are blank.
pub fn write_eval_csv(evals: &[DomainEval], path: &Path) -> Result<()> {
    let k = evals.first().map(|e| e.iou.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut header = vec!["domain".to_string()];
    header.extend((0..k).map(|c| format!("iou_{c}")));
    header.push("miou".into());
    w.write_record(&header).map_err(|e| Error::ingest(path, e.to_string()))?;
    for e in evals {
        let mut row = vec![e.domain.clone()];
        row.extend(e.iou.iter().map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default()));
        row.push(format!("{:.6}", e.miou));
        w.write_record(&row).map_err(|e| Error::ingest(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain-text table of per-domain mIoU plus their average, in percent.
pub fn summary_table(evals: &[DomainEval]) -> String {
    let mut out = String::from("domain        mIoU\n");
    for e in evals {
        out.push_str(&format!("{:<12} {:6.2}\n", e.domain, 100.0 * e.miou));
    }
    if let Ok(avg) = avg_miou(&evals.iter().map(|e| e.miou).collect::<Vec<_>>()) {
        out.push_str(&format!("{:<12} {:6.2}\n", "average", 100.0 * avg));
    }
    out
}

/// Stylization difference when the transformer sees only one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDiff {
    /// `|X_stylized − X_s|`, same shape as the input.
    pub map: Tensor<f32>,
    pub total: f64,
    /// Pixels of the unmasked prediction assigned to the class.
    pub predicted_pixels: usize,
    /// `total / predicted_pixels`; `None` when the class is not predicted.
    pub normalized: Option<f64>,
}

pub fn classwise_style_diff(
    x_s: &Tensor<f32>,
    x_style: &Tensor<f32>,
    class_k: usize,
    nets: HallucinationNets<'_, f32>,
    dft: &DftWeights<f32>,
    opts: &HallucinateOptions,
    seed: u64,
) -> Result<ClassDiff> {
    let k = nets.segmenter.num_classes();
    if class_k >= k {
        return Err(Error::Config(format!("class {class_k} out of range for {k} classes")));
    }
    let predicted_pixels = nets
        .segmenter
        .predict(x_s)?
        .iter()
        .filter(|&&p| p as usize == class_k)
        .count();
    let masked = HallucinateOptions {
        keep_class: Some(class_k),
        ..*opts
    };
    let stylized = hallucinate(nets, Some(dft), x_s, x_style, &masked, seed)?;
    let map = stylized.zip_map(x_s, |a, b| (a - b).abs());
    let total = map.data().iter().map(|&v| v as f64).sum::<f64>();
    Ok(ClassDiff {
        normalized: (predicted_pixels > 0).then(|| total / predicted_pixels as f64),
        map,
        total,
        predicted_pixels,
    })
}

/// Penultimate-layer features of sampled pixels with their true class.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub width: usize,
    pub rows: Vec<(Vec<f32>, u8)>,
}

/// Samples `n_pixels` labelled pixels uniformly from up to `max_images`
/// randomly chosen images.
pub fn dump_features(
    segmenter: &SegNet<f32>,
    ds: &Dataset,
    n_pixels: usize,
    max_images: usize,
    seed: u64,
) -> Result<FeatureDump> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("feature dump needs a non-empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_img = max_images.clamp(1, ds.len());
    let mut chosen = sample(&mut rng, ds.len(), n_img).into_vec();
    chosen.sort_unstable();
    let hw = ds.image_size * ds.image_size;
    let candidates: Vec<(usize, usize)> = chosen
        .iter()
        .flat_map(|&i| (0..hw).map(move |p| (i, p)))
        .filter(|&(i, p)| ds.samples[i].label[p] != IGNORE_LABEL)
        .collect();
    if candidates.len() < n_pixels {
        return Err(Error::InvalidInput(format!(
            "{n_pixels} pixels requested, only {} labelled pixels available",
            candidates.len()
        )));
    }
    let mut picks: Vec<(usize, usize)> = sample(&mut rng, candidates.len(), n_pixels)
        .into_iter()
        .map(|j| candidates[j])
        .collect();
    picks.sort_unstable();
    let width = segmenter.feature_width();
    let mut rows = Vec::with_capacity(n_pixels);
    let mut cached: Option<(usize, Tensor<f32>)> = None;
    for (i, p) in picks {
        if cached.as_ref().map(|c| c.0) != Some(i) {
            let tape = Tape::new();
            let pg = segmenter.params().bind(&tape, false);
            let (_, feats) = segmenter.forward_with_features(&pg, tape.constant(ds.samples[i].image.clone()));
            cached = Some((i, (*feats.value()).clone()));
        }
        let feats = &cached.as_ref().expect("cached").1;
        let v = (0..width).map(|c| feats.data()[c * hw + p]).collect();
        rows.push((v, ds.samples[i].label[p]));
    }
    Ok(FeatureDump { width, rows })
}

pub fn write_feature_csv(dump: &FeatureDump, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header: Vec<String> = (0..dump.width).map(|c| format!("f{c}")).chain(["class".to_string()]).collect();
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for (v, c) in &dump.rows {
        let line: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{},{c}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_counts_and_ignore() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[2; 10], &[2; 10]).unwrap();
        assert_eq!(cm.get(2, 2), 10);
        let before = cm.clone();
        cm.accumulate(&[1; 4], &[IGNORE_LABEL; 4]).unwrap();
        assert_eq!(cm, before);
        assert!(cm.accumulate(&[1; 3], &[1; 4]).is_err());
        assert!(cm.accumulate(&[3], &[1]).is_err());
    }

    #[test]
    fn iou_hand_cases() {
        // class 0: TP 2, FN 1 (truth 0 → pred 1), FP 1 (truth 1 → pred 0)
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 0], &[0, 0, 0, 1]).unwrap();
        assert_eq!(iou_per_class(&cm)[0], Some(0.5));
        let mut perfect = ConfusionMatrix::new(4);
        perfect.accumulate(&[0, 1, 1, 3], &[0, 1, 1, 3]).unwrap();
        assert_eq!(iou_per_class(&perfect), vec![Some(1.0), Some(1.0), None, Some(1.0)]);
        assert_eq!(miou(&perfect), 1.0);
        let mut disjoint = ConfusionMatrix::new(2);
        disjoint.accumulate(&[1, 1], &[0, 0]).unwrap();
        assert_eq!(iou_per_class(&disjoint)[0], Some(0.0));
    }

    #[test]
    fn miou_is_mean_of_present_classes() {
        // class 0: TP 1, FN 4 → 0.2; class 1: TP 3, FN 2 → 0.6; class 2: only false positives → 0
        let truth = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let pred = [0, 2, 2, 2, 2, 1, 1, 1, 2, 2];
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &truth).unwrap();
        let iou = iou_per_class(&cm);
        assert!((iou[0].unwrap() - 0.2).abs() < 1e-12);
        assert!((iou[1].unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(iou[2], Some(0.0));
        assert_eq!(iou[3], None);
        assert!((miou(&cm) - 0.8 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn averages_and_relative_difference() {
        assert_eq!(avg_miou(&[0.37]).unwrap(), 0.37);
        assert!(avg_miou(&[]).is_err());
        assert_eq!(rel_diff(12.5, 12.5), 0.0);
        assert!(rel_diff(10.0, 8.0) > 0.0 && rel_diff(8.0, 10.0) < 0.0);
    }
}
