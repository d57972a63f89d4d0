//! Static figures and a markdown summary over finished run directories.

use std::path::{Path, PathBuf};

use ashplus_core::trainloop::{read_losses_csv, RunSummary, METRICS_FILE, SUMMARY_FILE};
use ashplus_core::LossBreakdown;
use plotters::coord::Shift;
use plotters::prelude::*;

use crate::layout;
use crate::{CliError, CliResult};

/// Fill colour of the run-comparison bars.
pub const BAR_COLOR: RGBColor = RGBColor(31, 119, 180);
const CLASSWISE_FILE: &str = "classwise.csv";

struct RunData {
    label: String,
    summary: Option<RunSummary>,
    losses: Vec<LossBreakdown>,
    /// `(class, normalized difference)` for classes present in the prediction.
    classwise: Vec<(usize, f64)>,
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("cannot render {}: {e}", path.display()))
}

fn labels_for(dirs: &[PathBuf]) -> Vec<String> {
    let names: Vec<String> = dirs
        .iter()
        .map(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| d.display().to_string()))
        .collect();
    names
        .iter()
        .zip(dirs)
        .map(|(n, d)| {
            if names.iter().filter(|m| *m == n).count() > 1 {
                d.display().to_string()
            } else {
                n.clone()
            }
        })
        .collect()
}

fn read_classwise(path: &Path) -> CliResult<Vec<(usize, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::ingestion(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::ingestion(format!("{}: {e}", path.display())))?;
        let bad = || CliError::ingestion(format!("{}: malformed row", path.display()));
        let class: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if let Some(v) = rec.get(3).filter(|v| !v.is_empty()) {
            out.push((class, v.parse().map_err(|_| bad())?));
        }
    }
    Ok(out)
}

fn load_run(dir: &Path, label: String) -> CliResult<RunData> {
    layout::require_dir(dir, "run")?;
    let summary_path = dir.join(SUMMARY_FILE);
    let classwise_path = dir.join(CLASSWISE_FILE);
    if !summary_path.is_file() && !classwise_path.is_file() {
        return Err(CliError::ingestion(format!(
            "run directory {} has neither {SUMMARY_FILE} nor {CLASSWISE_FILE}",
            dir.display()
        )));
    }
    let summary = summary_path.is_file().then(|| RunSummary::load(&summary_path)).transpose()?;
    let metrics = dir.join(METRICS_FILE);
    let losses = if metrics.is_file() { read_losses_csv(&metrics)? } else { Vec::new() };
    let classwise = if classwise_path.is_file() { read_classwise(&classwise_path)? } else { Vec::new() };
    Ok(RunData {
        label,
        summary,
        losses,
        classwise,
    })
}

fn bar_chart(path: &Path, title: &str, y_desc: &str, labels: &[String], values: &[f64]) -> CliResult<()> {
    let draw = |root: DrawingArea<SVGBackend, Shift>| -> Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let top = values.iter().copied().fold(0.0, f64::max).max(1e-6) * 1.15;
        let n = labels.len();
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d((0..n).into_segmented(), 0.0..top)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .y_desc(y_desc)
            .x_label_formatter(&|v| match v {
                SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
                _ => String::new(),
            })
            .draw()?;
        chart.draw_series(values.iter().enumerate().map(|(i, &v)| {
            let mut bar = Rectangle::new([(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), v)], BAR_COLOR.filled());
            bar.set_margin(0, 0, 12, 12);
            bar
        }))?;
        root.present()?;
        Ok(())
    };
    draw(SVGBackend::new(path, (900, 500)).into_drawing_area()).map_err(|e| plot_err(path, e))
}

fn domain_chart(path: &Path, runs: &[(&str, &RunSummary)]) -> CliResult<()> {
    let domains = &runs[0].1.domains;
    let draw = |root: DrawingArea<SVGBackend, Shift>| -> Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let top = runs
            .iter()
            .flat_map(|(_, s)| s.miou.iter().map(|v| 100.0 * v))
            .fold(0.0, f64::max)
            .max(1e-6)
            * 1.15;
        let nd = domains.len();
        let mut chart = ChartBuilder::on(&root)
            .caption("mIoU per target domain", ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(-0.5..nd as f64 - 0.5, 0.0..top)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(nd)
            .y_desc("mIoU (%)")
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 {
                    domains.get(i as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .draw()?;
        let width = 0.8 / runs.len() as f64;
        for (r, (label, summary)) in runs.iter().enumerate() {
            let color = Palette99::pick(r).to_rgba();
            chart
                .draw_series(summary.miou.iter().enumerate().map(|(d, &v)| {
                    let x0 = d as f64 - 0.4 + r as f64 * width;
                    Rectangle::new([(x0, 0.0), (x0 + width, 100.0 * v)], color.filled())
                }))?
                .label(*label)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw(SVGBackend::new(path, (1000, 520)).into_drawing_area()).map_err(|e| plot_err(path, e))
}

fn loss_chart(path: &Path, runs: &[&RunData]) -> CliResult<()> {
    let draw = |root: DrawingArea<SVGBackend, Shift>| -> Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let len = runs.iter().map(|r| r.losses.len()).max().unwrap_or(1).max(2);
        let top = runs
            .iter()
            .flat_map(|r| r.losses.iter().map(|l| l.seg))
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
            .max(1e-6)
            * 1.05;
        let mut chart = ChartBuilder::on(&root)
            .caption("Segmentation loss", ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(0..len - 1, 0.0..top)?;
        chart.configure_mesh().x_desc("segmenter update").y_desc("cross-entropy").draw()?;
        for (r, run) in runs.iter().enumerate() {
            let color = Palette99::pick(r).to_rgba();
            chart
                .draw_series(LineSeries::new(run.losses.iter().enumerate().map(|(i, l)| (i, l.seg)), color.stroke_width(1)))?
                .label(run.label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw(SVGBackend::new(path, (1000, 520)).into_drawing_area()).map_err(|e| plot_err(path, e))
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

/// Writes the figures and `report.md` into `out`; overwrites earlier output.
pub fn render(dirs: &[PathBuf], out: &Path) -> CliResult<()> {
    let labels = labels_for(dirs);
    let runs: Vec<RunData> = dirs
        .iter()
        .zip(labels)
        .map(|(d, l)| load_run(d, l))
        .collect::<CliResult<_>>()?;
    layout::create_out(out)?;
    let mut md = String::from("# Run report\n\n");

    let trained: Vec<(&str, &RunSummary)> = runs
        .iter()
        .filter_map(|r| r.summary.as_ref().map(|s| (r.label.as_str(), s)))
        .collect();
    if !trained.is_empty() {
        let labels: Vec<String> = trained.iter().map(|(l, _)| l.to_string()).collect();
        let values: Vec<f64> = trained.iter().map(|(_, s)| 100.0 * s.avg_miou.unwrap_or(0.0)).collect();
        bar_chart(&out.join("miou_bars.svg"), "Average target mIoU", "mIoU (%)", &labels, &values)?;
        let domains = &trained[0].1.domains;
        if !domains.is_empty() && trained.iter().all(|(_, s)| &s.domains == domains) {
            domain_chart(&out.join("domain_miou.svg"), &trained)?;
        }
        md.push_str("| run | mode | seed | updates | avg mIoU |");
        for d in domains {
            md.push_str(&format!(" {d} |"));
        }
        md.push_str("\n|---|---|---|---|---|");
        md.push_str(&"---|".repeat(domains.len()));
        md.push('\n');
        for (label, s) in &trained {
            md.push_str(&format!("| {label} | {} | {} | {} | {} |", s.mode.name(), s.seed, s.iterations, fmt_pct(s.avg_miou)));
            for i in 0..domains.len() {
                md.push_str(&format!(" {} |", fmt_pct(s.miou.get(i).copied())));
            }
            md.push('\n');
        }
        md.push_str("\nFigures: `miou_bars.svg`, `domain_miou.svg`");
    }
    let with_losses: Vec<&RunData> = runs.iter().filter(|r| !r.losses.is_empty()).collect();
    if !with_losses.is_empty() {
        loss_chart(&out.join("losses.svg"), &with_losses)?;
        md.push_str(", `losses.svg`");
    }
    md.push('\n');
    for (i, r) in runs.iter().enumerate().filter(|(_, r)| !r.classwise.is_empty()) {
        let file = format!("classwise_{i}.svg");
        let labels: Vec<String> = r.classwise.iter().map(|(c, _)| format!("class {c}")).collect();
        let values: Vec<f64> = r.classwise.iter().map(|(_, v)| *v).collect();
        bar_chart(&out.join(&file), &format!("Stylization difference per class ({})", r.label), "normalized |difference|", &labels, &values)?;
        md.push_str(&format!("\n## Class-conditioned stylization: {}\n\n| class | normalized difference |\n|---|---|\n", r.label));
        for (c, v) in &r.classwise {
            md.push_str(&format!("| {c} | {v:.4} |\n"));
        }
        md.push_str(&format!("\nFigure: `{file}`\n"));
    }
    layout::write_text(&out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}
