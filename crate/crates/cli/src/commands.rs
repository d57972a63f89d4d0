use std::path::Path;
use std::thread;

use ashplus_core::dft::HallucinationNets;
use ashplus_core::metrics::{classwise_style_diff, dump_features, evaluate, summary_table, write_eval_csv, write_feature_csv, DomainEval};
use ashplus_core::nets::{pretrain_autoencoder, ArchConfig, SegNet};
use ashplus_core::synthdata::{
    generate_style_pool, make_shift_suite, save_dataset, save_png, save_style_pool, Dataset, DomainSpec,
};
use ashplus_core::trainloop::{
    ablation_suite, named_grid, save_run, sigma_sweep, train, write_runs_csv, RunRecord, TrainOutcome, EVAL_FILE,
};
use ashplus_core::{Autoencoder, NetBundle, RunMode, TrainConfig};
use log::info;

use crate::layout::{self, SOURCE_DIR, STYLES_DIR, TARGETS_DIR};
use crate::{report, AeArgs, Cli, CliError, CliResult, Command, Device};

/// Autoencoder checkpoint written by `pretrain-ae` and by training commands
/// that pretrain on the fly.
pub const AE_FILE: &str = "autoencoder.ckpt";
/// Offset between the data seed and the style-pool seed.
const STYLE_SEED_OFFSET: u64 = 100;

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData(_) => "gen-data",
        Command::PretrainAe => "pretrain-ae",
        Command::TrainSource => "train-source",
        Command::TrainUniform(_) => "train-uniform",
        Command::TrainAshplus(_) => "train-ashplus",
        Command::Ablate(_) => "ablate",
        Command::SweepSigma(_) => "sweep-sigma",
        Command::Eval(_) => "eval",
        Command::AnalyzeClasswise(_) => "analyze-classwise",
        Command::DumpFeatures(_) => "dump-features",
        Command::Report(_) => "report",
    }
}

/// Settings shared by every command after flag resolution.
struct Ctx<'a> {
    cli: &'a Cli,
    cfg: TrainConfig,
    workers: usize,
}

impl Ctx<'_> {
    fn out(&self) -> &Path {
        &self.cli.common.out
    }

    fn data(&self) -> CliResult<&Path> {
        self.cli
            .common
            .data
            .as_deref()
            .ok_or_else(|| CliError::config("--data is required for this command"))
    }
}

fn resolve(cli: &Cli) -> CliResult<Ctx<'_>> {
    let c = &cli.common;
    if c.device == Device::Accel {
        return Err(CliError::config("no accelerator backend is built in; use --device cpu"));
    }
    if c.workers == 0 {
        return Err(CliError::config("--workers must be at least 1"));
    }
    let mut cfg = match &c.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let workers = if c.deterministic { 1 } else { c.workers };
    Ok(Ctx { cli, cfg, workers })
}

/// Prints the resolved invocation and writes it next to the outputs.
fn echo_resolved(ctx: &Ctx<'_>, with_config: bool) -> CliResult<()> {
    let c = &ctx.cli.common;
    let mut table = toml::Table::new();
    table.insert("command".into(), command_name(&ctx.cli.command).into());
    let path = |p: &Option<std::path::PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let mut flags = toml::Table::new();
    flags.insert("out".into(), c.out.display().to_string().into());
    for (key, value) in [("data", path(&c.data)), ("style_pool", path(&c.style_pool)), ("config", path(&c.config))] {
        if let Some(v) = value {
            flags.insert(key.into(), v.into());
        }
    }
    flags.insert("device".into(), "cpu".into());
    flags.insert("workers".into(), (ctx.workers as i64).into());
    flags.insert("deterministic".into(), c.deterministic.into());
    table.insert("flags".into(), flags.into());
    table.insert("args".into(), command_args(&ctx.cli.command).into());
    if with_config {
        let cfg = toml::Table::try_from(&ctx.cfg).map_err(|e| CliError::runtime(e.to_string()))?;
        table.insert("config".into(), cfg.into());
    }
    let text = toml::to_string(&table).map_err(|e| CliError::runtime(e.to_string()))?;
    println!("{text}");
    layout::create_out(ctx.out())?;
    layout::write_text(&ctx.out().join(layout::RESOLVED_FILE), &text)
}

fn command_args(cmd: &Command) -> toml::Table {
    let mut t = toml::Table::new();
    let mut put = |k: &str, v: toml::Value| {
        t.insert(k.into(), v);
    };
    let ae = |a: &AeArgs| a.ae.as_ref().map(|p| p.display().to_string());
    match cmd {
        Command::GenData(a) => {
            put("spec", a.spec.clone().into());
            put("targets", (a.targets as i64).into());
            put("shift", a.shift.into());
            put("num_source", (a.num_source as i64).into());
            put("num_target", (a.num_target as i64).into());
            put("num_styles", (a.num_styles as i64).into());
        }
        Command::TrainUniform(a) | Command::TrainAshplus(a) | Command::Ablate(a) => {
            if let Some(p) = ae(a) {
                put("ae", p.into());
            }
        }
        Command::SweepSigma(a) => {
            put("grid", a.grid.clone().into());
            if let Some(p) = ae(&a.ae) {
                put("ae", p.into());
            }
        }
        Command::Eval(a) => put("checkpoint", a.checkpoint.display().to_string().into()),
        Command::AnalyzeClasswise(a) => {
            put("checkpoint", a.ckpt.checkpoint.display().to_string().into());
            put("image", (a.image as i64).into());
            put("style", (a.style as i64).into());
        }
        Command::DumpFeatures(a) => {
            put("checkpoint", a.ckpt.checkpoint.display().to_string().into());
            put("pixels", (a.pixels as i64).into());
            put("images", (a.images as i64).into());
            put("domain", a.domain.clone().into());
        }
        Command::Report(a) => {
            let runs: Vec<toml::Value> = a.runs.iter().map(|p| p.display().to_string().into()).collect();
            put("runs", runs.into());
        }
        Command::PretrainAe | Command::TrainSource => {}
    }
    t
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let ctx = resolve(cli)?;
    let uses_config = !matches!(cli.command, Command::Report(_));
    echo_resolved(&ctx, uses_config)?;
    match &cli.command {
        Command::GenData(a) => gen_data(&ctx, a)?,
        Command::PretrainAe => pretrain_ae(&ctx)?,
        Command::TrainSource => train_mode(&ctx, RunMode::SourceOnly, None)?,
        Command::TrainUniform(a) => train_mode(&ctx, RunMode::Uniform, Some(a))?,
        Command::TrainAshplus(a) => train_mode(&ctx, RunMode::AshPlus, Some(a))?,
        Command::Ablate(a) => ablate(&ctx, a)?,
        Command::SweepSigma(a) => sweep(&ctx, a)?,
        Command::Eval(a) => eval(&ctx, &a.checkpoint)?,
        Command::AnalyzeClasswise(a) => classwise(&ctx, a)?,
        Command::DumpFeatures(a) => dump(&ctx, a)?,
        Command::Report(a) => report::render(&a.runs, ctx.out())?,
    }
    layout::write_manifest(ctx.out())
}

fn gen_data(ctx: &Ctx<'_>, a: &crate::GenDataArgs) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let base = if a.spec == "default" {
        DomainSpec::default_world(cfg.image_size)
    } else {
        let path = Path::new(&a.spec);
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::ingestion(format!("cannot read domain spec {}: {e}", path.display())))?;
        toml::from_str::<DomainSpec>(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
    };
    base.validate()?;
    let (source, targets) = make_shift_suite(&base, a.targets, a.shift, a.num_source, a.num_target, cfg.seed)?;
    let styles = generate_style_pool(a.num_styles, base.image_size, cfg.seed.wrapping_add(STYLE_SEED_OFFSET))?;
    let out = ctx.out();
    save_dataset(&source, &out.join(SOURCE_DIR))?;
    for t in &targets {
        save_dataset(t, &out.join(TARGETS_DIR).join(&t.name))?;
    }
    save_style_pool(&styles, &out.join(STYLES_DIR))?;
    info!("wrote {} source, {} target domains and {} styles to {}", source.len(), targets.len(), styles.len(), out.display());
    Ok(())
}

fn pretrain_ae(ctx: &Ctx<'_>) -> CliResult<()> {
    let data = ctx.data()?;
    let source = layout::load_source(data)?;
    let styles = layout::load_styles(Some(data), ctx.cli.common.style_pool.as_deref())?;
    fit_autoencoder(&ctx.cfg, &source, &styles, ctx.out()).map(|_| ())
}

fn fit_autoencoder(cfg: &TrainConfig, source: &Dataset, styles: &[ashplus_core::Tensor<f32>], out: &Path) -> CliResult<Autoencoder> {
    let mut corpus = source.images();
    corpus.extend(styles.iter().cloned());
    let (encoder, decoder, report) = pretrain_autoencoder(&corpus, &cfg.arch(), &cfg.pretrain())?;
    println!("autoencoder reconstruction MAE {:.4}", report.final_mae);
    let mut text = String::from("epoch,mse\n");
    for (i, l) in report.epoch_loss.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    layout::write_text(&out.join("ae_loss.csv"), &text)?;
    let bundle = NetBundle {
        encoder: Some(encoder),
        decoder: Some(decoder),
        ..NetBundle::default()
    };
    bundle.save(cfg, cfg.ae_epochs as u64, &out.join(AE_FILE))?;
    Ok(Autoencoder {
        encoder: bundle.encoder.expect("set above"),
        decoder: bundle.decoder.expect("set above"),
    })
}

fn load_autoencoder(path: &Path, cfg: &TrainConfig) -> CliResult<Autoencoder> {
    let (bundle, ckpt) = NetBundle::load(path)?;
    if ckpt.config.arch() != cfg.arch() {
        return Err(CliError::config(format!(
            "autoencoder {} was built for a different architecture than the configuration",
            path.display()
        )));
    }
    match (bundle.encoder, bundle.decoder) {
        (Some(encoder), Some(decoder)) => Ok(Autoencoder { encoder, decoder }),
        _ => Err(CliError::ingestion(format!("{} holds no encoder/decoder pair", path.display()))),
    }
}

/// Inputs of a training command.
struct Inputs {
    source: Dataset,
    targets: Vec<Dataset>,
    styles: Vec<ashplus_core::Tensor<f32>>,
    ae: Option<Autoencoder>,
}

fn load_inputs(ctx: &Ctx<'_>, ae_args: Option<&AeArgs>) -> CliResult<Inputs> {
    let data = ctx.data()?;
    let source = layout::load_source(data)?;
    let targets = layout::load_targets(data)?;
    let (styles, ae) = match ae_args {
        None => (Vec::new(), None),
        Some(a) => {
            let styles = layout::load_styles(Some(data), ctx.cli.common.style_pool.as_deref())?;
            let ae = match &a.ae {
                Some(p) => load_autoencoder(p, &ctx.cfg)?,
                None => fit_autoencoder(&ctx.cfg, &source, &styles, ctx.out())?,
            };
            (styles, Some(ae))
        }
    };
    Ok(Inputs {
        source,
        targets,
        styles,
        ae,
    })
}

fn train_mode(ctx: &Ctx<'_>, mode: RunMode, ae_args: Option<&AeArgs>) -> CliResult<()> {
    let inputs = load_inputs(ctx, ae_args)?;
    let outcome: TrainOutcome = train(
        mode,
        &inputs.source,
        &inputs.styles,
        inputs.ae.as_ref(),
        &inputs.targets,
        &ctx.cfg,
        &mut (),
    )?;
    save_run(&outcome, ctx.out())?;
    print!("{}", summary_table(&outcome.record.evals));
    Ok(())
}

fn slug(name: &str) -> String {
    name.trim_start_matches('+').replace(|c: char| !c.is_ascii_alphanumeric(), "-")
}

fn ablate(ctx: &Ctx<'_>, a: &AeArgs) -> CliResult<()> {
    let inputs = load_inputs(ctx, Some(a))?;
    let ae = inputs.ae.as_ref().expect("loaded with autoencoder");
    let rows = ablation_suite(&inputs.source, &inputs.styles, ae, &inputs.targets, &ctx.cfg)?;
    let table: Vec<(String, f64, f64, &RunRecord)> = rows
        .iter()
        .map(|r| (r.name.clone(), r.record.config.sigma1, r.record.config.sigma2, &r.record))
        .collect();
    write_runs_csv(&table, &ctx.out().join("ablation.csv"))?;
    for (i, r) in rows.iter().enumerate() {
        let dir = ctx.out().join("runs").join(format!("{i}-{}", slug(&r.name)));
        save_record(&r.record, &dir)?;
        println!("{:<14} {:6.2}", r.name, 100.0 * r.record.avg_miou.unwrap_or(f64::NAN));
    }
    Ok(())
}

fn sweep(ctx: &Ctx<'_>, a: &crate::SweepArgs) -> CliResult<()> {
    let grid = named_grid(&a.grid)
        .ok_or_else(|| CliError::config(format!("unknown grid {:?}; use synthia-default or gta5-default", a.grid)))?;
    let inputs = load_inputs(ctx, Some(&a.ae))?;
    let ae = inputs.ae.as_ref().expect("loaded with autoencoder");
    let rows = sigma_sweep(&inputs.source, &inputs.styles, ae, &inputs.targets, &ctx.cfg, grid)?;
    let table: Vec<(String, f64, f64, &RunRecord)> = rows
        .iter()
        .map(|r| (a.grid.clone(), r.sigma1, r.sigma2, &r.record))
        .collect();
    write_runs_csv(&table, &ctx.out().join("sweep.csv"))?;
    for r in &rows {
        let dir = ctx.out().join("runs").join(format!("s1_{}-s2_{}", r.sigma1, r.sigma2));
        save_record(&r.record, &dir)?;
        println!("sigma1 {:<5} sigma2 {:<5} {:6.2}", r.sigma1, r.sigma2, 100.0 * r.record.avg_miou.unwrap_or(f64::NAN));
    }
    Ok(())
}

/// Losses, evaluation and summary of a run whose networks are not kept.
fn save_record(rec: &RunRecord, dir: &Path) -> CliResult<()> {
    layout::create_out(dir)?;
    rec.config.save(&dir.join(ashplus_core::trainloop::CONFIG_FILE))?;
    ashplus_core::trainloop::write_losses_csv(&rec.losses, &dir.join(ashplus_core::trainloop::METRICS_FILE))?;
    write_eval_csv(&rec.evals, &dir.join(EVAL_FILE))?;
    let summary = toml::to_string(&ashplus_core::trainloop::RunSummary::of(rec)).map_err(|e| CliError::runtime(e.to_string()))?;
    layout::write_text(&dir.join(ashplus_core::trainloop::SUMMARY_FILE), &summary)
}

/// Evaluates domains on up to `workers` threads; results keep domain order.
/// Parameters are reference-counted per thread, so each worker rebuilds its
/// own segmenter from the named tensors.
fn evaluate_parallel(seg: &SegNet<f32>, arch: &ArchConfig, domains: &[Dataset], batch: usize, workers: usize) -> CliResult<Vec<DomainEval>> {
    if workers <= 1 || domains.len() <= 1 {
        return domains.iter().map(|d| evaluate(seg, d, batch).map_err(CliError::from)).collect();
    }
    let named = seg.params().to_named();
    let per = domains.len().div_ceil(workers);
    let results: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = domains
            .chunks(per)
            .map(|chunk| {
                let named = named.clone();
                s.spawn(move || {
                    let mut local = SegNet::<f32>::new(arch, 0);
                    local.params_mut().load_named(&named)?;
                    chunk.iter().map(|d| evaluate(&local, d, batch)).collect::<ashplus_core::Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(domains.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn load_bundle(path: &Path) -> CliResult<(NetBundle, TrainConfig)> {
    if !path.is_file() {
        return Err(CliError::ingestion(format!("checkpoint {} does not exist", path.display())));
    }
    let (bundle, ckpt) = NetBundle::load(path)?;
    Ok((bundle, ckpt.config))
}

fn eval(ctx: &Ctx<'_>, checkpoint: &Path) -> CliResult<()> {
    let (bundle, run_cfg) = load_bundle(checkpoint)?;
    let seg = bundle
        .segmenter
        .ok_or_else(|| CliError::ingestion(format!("{} holds no segmenter", checkpoint.display())))?;
    let targets = layout::load_targets(ctx.data()?)?;
    let evals = evaluate_parallel(&seg, &run_cfg.arch(), &targets, ctx.cfg.eval_batch, ctx.workers)?;
    write_eval_csv(&evals, &ctx.out().join(EVAL_FILE))?;
    let table = summary_table(&evals);
    layout::write_text(&ctx.out().join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn classwise(ctx: &Ctx<'_>, a: &crate::ClasswiseArgs) -> CliResult<()> {
    let path = &a.ckpt.checkpoint;
    let (bundle, run_cfg) = load_bundle(path)?;
    let (Some(encoder), Some(decoder), Some(segmenter), Some(dft)) = (&bundle.encoder, &bundle.decoder, &bundle.segmenter, &bundle.dft)
    else {
        return Err(CliError::ingestion(format!(
            "{} must hold encoder, decoder, segmenter and transformer (an adversarial run)",
            path.display()
        )));
    };
    let data = ctx.data()?;
    let source = layout::load_source(data)?;
    let styles = layout::load_styles(Some(data), ctx.cli.common.style_pool.as_deref())?;
    if a.image >= source.len() || a.style >= styles.len() {
        return Err(CliError::config(format!(
            "image {} / style {} out of range ({} images, {} styles)",
            a.image,
            a.style,
            source.len(),
            styles.len()
        )));
    }
    let opts = run_cfg
        .hallucinate_options()
        .ok_or_else(|| CliError::config("checkpoint configuration has stylization disabled"))?;
    let (x, _) = source.batch(&[a.image])?;
    let nets = HallucinationNets {
        encoder,
        decoder,
        segmenter,
    };
    let mut csv = String::from("# normalization: pixels predicted for the class by the unmasked segmenter\nclass,predicted_pixels,total,normalized\n");
    for k in 0..segmenter.num_classes() {
        let diff = classwise_style_diff(&x, &styles[a.style], k, nets, dft, &opts, ctx.cfg.seed)?;
        save_png(&diff.map, &ctx.out().join(format!("class_{k:02}.png")))?;
        let norm = diff.normalized.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{k},{},{},{norm}\n", diff.predicted_pixels, diff.total));
        println!("class {k}: predicted {} px, normalized difference {}", diff.predicted_pixels, if norm.is_empty() { "absent" } else { &norm });
    }
    layout::write_text(&ctx.out().join("classwise.csv"), &csv)
}

fn dump(ctx: &Ctx<'_>, a: &crate::DumpArgs) -> CliResult<()> {
    let (bundle, _) = load_bundle(&a.ckpt.checkpoint)?;
    let seg = bundle
        .segmenter
        .ok_or_else(|| CliError::ingestion(format!("{} holds no segmenter", a.ckpt.checkpoint.display())))?;
    let data = ctx.data()?;
    let ds = if a.domain == "source" {
        layout::load_source(data)?
    } else {
        layout::load_targets(data)?
            .into_iter()
            .find(|t| t.name == a.domain)
            .ok_or_else(|| CliError::config(format!("no target domain named {:?}", a.domain)))?
    };
    let dump = dump_features(&seg, &ds, a.pixels, a.images, ctx.cfg.seed)?;
    write_feature_csv(&dump, &ctx.out().join("features.csv"))?;
    println!("{} feature rows of width {} from {}", dump.rows.len(), dump.width, ds.name);
    Ok(())
}
