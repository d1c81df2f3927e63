use std::io::Write;
use std::path::{Path, PathBuf};

use gda_core::data::{
    generate_domain_dataset, read_ppm, write_ppm, DatasetManifest, Samples, Split, MANIFEST_FILE,
    SEALED_MANIFEST_FILE,
};
use gda_core::fmt9;
use gda_core::gradsuite::run_gradient_suite;
use gda_core::models::{load_checkpoint, load_generator, save_checkpoint, save_generator, Generator, ModelBundle};
use gda_core::pipeline::{
    ablation_run, adapt_generator, bn_discrepancy, evaluate, export_features_csv, mmd_curve, train_source,
    write_ablation_csv, write_adapt_log, write_bn_curve_csv, write_mmd_curve_csv, write_source_log, Kernel,
    Variant,
};
use gda_core::spectrum::{specmix, SpecMixConfig};
use log::info;
use serde_json::{json, Value};

use crate::config::CliConfig;
use crate::error::{CliError, Context, Result};
use crate::{Command, Common, KernelArg, SplitArg, TrainFlags};

pub fn dispatch(common: &Common, command: Command) -> Result<Value> {
    let mut cfg = CliConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    match command {
        Command::GenData { count } => gen_data(cfg, common, count),
        Command::TrainSource { data, split, train } => {
            apply(&mut cfg, &train);
            if !data.is_empty() {
                cfg.data = data;
            }
            train_source_cmd(cfg, common, split)
        }
        Command::Adapt { model, data, split, train } => {
            apply(&mut cfg, &train);
            merge(&mut cfg, model, None, data, None);
            adapt_cmd(cfg, common, split)
        }
        Command::Eval {
            model,
            generator,
            data,
            split,
            report,
            roc,
        } => {
            merge(&mut cfg, model, generator, data, None);
            eval_cmd(cfg, common, split, report, roc)
        }
        Command::Specmix {
            input,
            reference,
            eta,
            lambda,
        } => {
            if let Some(eta) = eta {
                cfg.train.eta = eta;
            }
            specmix_cmd(cfg, common, &input, &reference, lambda)
        }
        Command::AnalyzeStats {
            model,
            generator,
            data,
            reference,
            split,
            kernel,
            features_block,
        } => {
            merge(&mut cfg, model, generator, data, reference);
            analyze_cmd(cfg, common, split, kernel, features_block)
        }
        Command::Ablate { model, data, train } => {
            apply(&mut cfg, &train);
            merge(&mut cfg, model, None, data, None);
            ablate_cmd(cfg, common)
        }
        Command::GradCheck { trials, inject_fault } => grad_check_cmd(cfg, common, trials, inject_fault),
    }
}

fn apply(cfg: &mut CliConfig, f: &TrainFlags) {
    let t = &mut cfg.train;
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.epochs {
        t.source_epochs = v;
    }
    if let Some(v) = f.steps {
        t.adapt_steps = v;
    }
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.source_lr {
        t.source_lr = v;
    }
    if let Some(v) = f.eta {
        t.eta = v;
    }
    if let Some(v) = f.lambda_ent {
        t.lambda_ent = v;
    }
    if let Some(v) = f.lambda_ph {
        t.lambda_ph = v;
    }
    if f.no_dsc {
        t.use_dsc = false;
    }
}

fn merge(
    cfg: &mut CliConfig,
    model: Option<PathBuf>,
    generator: Option<PathBuf>,
    data: Option<PathBuf>,
    reference: Option<PathBuf>,
) {
    if model.is_some() {
        cfg.model = model;
    }
    if generator.is_some() {
        cfg.generator = generator;
    }
    if let Some(d) = data {
        cfg.data = vec![d];
    }
    if reference.is_some() {
        cfg.reference = reference;
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| CliError::Invalid(format!("--{flag} is required")))
}

fn single_data(cfg: &CliConfig) -> Result<&Path> {
    match cfg.data.as_slice() {
        [one] => Ok(one),
        [] => Err(CliError::Invalid("--data is required".into())),
        _ => Err(CliError::Invalid("exactly one --data directory expected".into())),
    }
}

fn out_dir(common: &Common) -> Result<&Path> {
    required(&common.out, "out")
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).runtime(&format!("cannot create {}", dir.display()))
}

/// Loads one split of a dataset directory. Labeled reads fall back to the
/// sealed manifest of an unlabeled domain.
fn load_dataset(dir: &Path, split: SplitArg, labeled: bool) -> Result<Samples> {
    let sealed = dir.join(SEALED_MANIFEST_FILE);
    let path = if labeled && sealed.exists() {
        sealed
    } else {
        dir.join(MANIFEST_FILE)
    };
    let manifest = DatasetManifest::load(&path).invalid("dataset")?;
    let manifest = match split {
        SplitArg::All => manifest,
        SplitArg::Train => manifest.split(Split::Train),
        SplitArg::Test => manifest.split(Split::Test),
    };
    if manifest.records.is_empty() {
        return Err(CliError::Invalid(format!("{}: no records in the {split:?} split", dir.display())));
    }
    let samples = Samples::load(dir, &manifest).invalid("dataset")?;
    if labeled && samples.labels().is_none() {
        return Err(CliError::Invalid(format!("{}: dataset carries no labels", dir.display())));
    }
    Ok(samples)
}

/// The explicit generator when given, else the one stored in the bundle.
fn load_models(cfg: &CliConfig) -> Result<(ModelBundle, Option<Generator>)> {
    let model = required(&cfg.model, "model")?;
    let mut bundle = load_checkpoint(model).invalid(&format!("checkpoint {}", model.display()))?;
    let generator = match &cfg.generator {
        Some(p) => Some(load_generator(p).invalid(&format!("generator {}", p.display()))?),
        None => bundle.g.take(),
    };
    Ok((bundle, generator))
}

fn gen_data(mut cfg: CliConfig, common: &Common, count: Option<usize>) -> Result<Value> {
    for (i, d) in cfg.domains.iter_mut().enumerate() {
        if let Some(seed) = common.seed {
            d.seed = seed.wrapping_add(i as u64);
        }
        if let Some(c) = count {
            d.count_per_class = c;
        }
    }
    cfg.validate()?;
    if cfg.domains.is_empty() {
        return Err(CliError::Invalid("no domains configured".into()));
    }
    let out = out_dir(common)?;
    prepare_dir(out)?;
    let mut written = Vec::new();
    for d in &cfg.domains {
        let dir = out.join(&d.name);
        let m = generate_domain_dataset(d, &dir).runtime(&format!("domain {}", d.name))?;
        info!("{}: {} samples in {}", d.name, m.records.len(), dir.display());
        written.push(json!({"name": d.name, "samples": m.records.len(), "labeled": d.labeled}));
    }
    cfg.persist(&out.join("config.json"))?;
    Ok(json!({"command": "gen-data", "out": out, "domains": written}))
}

fn train_source_cmd(cfg: CliConfig, common: &Common, split: SplitArg) -> Result<Value> {
    cfg.validate()?;
    if cfg.data.is_empty() {
        return Err(CliError::Invalid("--data is required".into()));
    }
    let parts = cfg
        .data
        .iter()
        .map(|d| load_dataset(d, split, true))
        .collect::<Result<Vec<_>>>()?;
    let data = Samples::concat(&parts);
    let out = out_dir(common)?;
    prepare_dir(out)?;
    let (bundle, log) = train_source(&cfg.train, &data).runtime("source training")?;
    let model = out.join("model.gdac");
    save_checkpoint(&bundle, &model).runtime("checkpoint")?;
    write_source_log(&log, &out.join("source_log.csv")).runtime("log")?;
    cfg.persist(&out.join("config.json"))?;
    let last = log.last().expect("at least one epoch");
    Ok(json!({
        "command": "train-source",
        "model": model,
        "samples": data.len(),
        "epochs": log.len(),
        "final_loss": last.loss,
    }))
}

fn adapt_cmd(cfg: CliConfig, common: &Common, split: SplitArg) -> Result<Value> {
    cfg.validate()?;
    let (bundle, _) = load_models(&cfg)?;
    let target = load_dataset(single_data(&cfg)?, split, false)?.unlabeled();
    let out = out_dir(common)?;
    prepare_dir(out)?;
    let outcome = adapt_generator(&cfg.train, &bundle, &target).runtime("adaptation")?;
    let path = out.join("generator.gdac");
    save_generator(&outcome.generator, &path).runtime("checkpoint")?;
    write_adapt_log(&outcome.log, &out.join("adapt_log.csv")).runtime("log")?;
    write_stylized_stats(&bundle, &outcome.stylized_ema, &out.join("stylized_stats.csv"))?;
    cfg.persist(&out.join("config.json"))?;
    let (first, last) = (outcome.log.first().expect("steps"), outcome.log.last().expect("steps"));
    Ok(json!({
        "command": "adapt",
        "generator": path,
        "steps": outcome.log.len(),
        "stat_first": first.stat,
        "stat_last": last.stat,
        "total_last": last.total,
    }))
}

/// Exponential average of the stylized batch moments, one row per channel.
fn write_stylized_stats(bundle: &ModelBundle, ema: &[gda_core::objectives::StoredStats], path: &Path) -> Result<()> {
    let mut text = String::from("layer,channel,mean,var\n");
    for (bn, s) in bundle.bn_registry().iter().zip(ema) {
        for (c, (m, v)) in s.mean.data().iter().zip(s.var.data()).enumerate() {
            text.push_str(&format!("{},{c},{},{}\n", bn.name, fmt9(*m), fmt9(*v)));
        }
    }
    std::fs::write(path, text).runtime(&path.display().to_string())
}

/// `<dir>/<stem>.config.json` next to a file output.
fn sidecar(file: &Path) -> PathBuf {
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    file.with_file_name(format!("{stem}.config.json"))
}

fn eval_cmd(
    cfg: CliConfig,
    common: &Common,
    split: SplitArg,
    report: Option<PathBuf>,
    roc: Option<PathBuf>,
) -> Result<Value> {
    cfg.validate()?;
    let (bundle, generator) = load_models(&cfg)?;
    let data = load_dataset(single_data(&cfg)?, split, true)?;
    let (report, roc, config_path) = match (&common.out, report) {
        (Some(out), report) => (
            report.unwrap_or_else(|| out.join("report.csv")),
            roc.or_else(|| Some(out.join("roc.csv"))),
            out.join("config.json"),
        ),
        (None, Some(report)) => {
            let side = sidecar(&report);
            (report, roc, side)
        }
        (None, None) => return Err(CliError::Invalid("--report or --out is required".into())),
    };
    if let Some(out) = &common.out {
        prepare_dir(out)?;
    }
    let r = evaluate(&bundle, generator.as_ref(), &data).runtime("evaluation")?;
    r.write_csv(&report).runtime("report")?;
    if let Some(roc) = &roc {
        r.write_roc_csv(roc).runtime("roc")?;
    }
    cfg.persist(&config_path)?;
    Ok(json!({
        "command": "eval",
        "report": report,
        "samples": data.len(),
        "stylized": generator.is_some(),
        "hter": r.hter,
        "auc": r.auc,
        "eer_threshold": r.eer_threshold,
        "hter_at_0.5": r.hter_at_half,
    }))
}

fn specmix_cmd(cfg: CliConfig, common: &Common, input: &Path, reference: &Path, lambda: Option<f64>) -> Result<Value> {
    cfg.validate()?;
    let out = required(&common.out, "out")?;
    let x = read_ppm(input).invalid("input")?;
    let r = read_ppm(reference).invalid("reference")?;
    if x.shape() != r.shape() {
        return Err(CliError::Invalid(format!(
            "input {:?} and reference {:?} differ in size",
            x.shape(),
            r.shape()
        )));
    }
    let lambda = match lambda {
        Some(l) if (0.0..=1.0).contains(&l) => l,
        Some(l) => return Err(CliError::Invalid(format!("lambda {l} outside [0, 1]"))),
        None => SpecMixConfig::new(cfg.train.eta, cfg.train.seed)
            .invalid("specmix")?
            .sampler()
            .sample_lambda(),
    };
    let mixed = specmix(&x, &r, lambda).runtime("specmix")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    write_ppm(out, &mixed).runtime("output")?;
    cfg.persist(&sidecar(out))?;
    Ok(json!({"command": "specmix", "out": out, "lambda": lambda, "eta": cfg.train.eta, "seed": cfg.train.seed}))
}

fn mean_d(points: &[gda_core::pipeline::BnCurvePoint]) -> f64 {
    points.iter().map(|p| p.d_mean).sum::<f64>() / points.len() as f64
}

fn analyze_cmd(
    cfg: CliConfig,
    common: &Common,
    split: SplitArg,
    kernel: KernelArg,
    features_block: Option<usize>,
) -> Result<Value> {
    cfg.validate()?;
    if matches!(features_block, Some(b) if !(1..=3).contains(&b)) {
        return Err(CliError::Invalid("--features-block must lie in 1..=3".into()));
    }
    let (bundle, generator) = load_models(&cfg)?;
    let target = load_dataset(single_data(&cfg)?, split, false)?;
    let reference = load_dataset(required(&cfg.reference, "reference")?, split, false)?;
    let kernel = match kernel {
        KernelArg::Linear => Kernel::Linear,
        KernelArg::Rbf => Kernel::RbfMedian,
    };
    let out = out_dir(common)?;
    prepare_dir(out)?;
    let bn_raw = bn_discrepancy(&bundle, &target, None).runtime("bn discrepancy")?;
    write_bn_curve_csv(&bn_raw, &out.join("bn_raw.csv")).runtime("bn curve")?;
    let mmd_raw = mmd_curve(&bundle, &reference, &target, None, kernel).runtime("mmd")?;
    write_mmd_curve_csv(&mmd_raw, &out.join("mmd_raw.csv")).runtime("mmd curve")?;
    let mut summary = json!({
        "command": "analyze-stats",
        "bn_mean_raw": mean_d(&bn_raw),
        "mmd_raw": mmd_raw,
    });
    if let Some(g) = &generator {
        let bn = bn_discrepancy(&bundle, &target, Some(g)).runtime("bn discrepancy")?;
        write_bn_curve_csv(&bn, &out.join("bn_stylized.csv")).runtime("bn curve")?;
        let m = mmd_curve(&bundle, &reference, &target, Some(g), kernel).runtime("mmd")?;
        write_mmd_curve_csv(&m, &out.join("mmd_stylized.csv")).runtime("mmd curve")?;
        summary["bn_mean_stylized"] = json!(mean_d(&bn));
        summary["mmd_stylized"] = json!(m);
    }
    if let Some(b) = features_block {
        let p = out.join(format!("features_raw_block{b}.csv"));
        export_features_csv(&bundle, None, &target, b, &p).runtime("features")?;
        if let Some(g) = &generator {
            let p = out.join(format!("features_stylized_block{b}.csv"));
            export_features_csv(&bundle, Some(g), &target, b, &p).runtime("features")?;
        }
    }
    cfg.persist(&out.join("config.json"))?;
    Ok(summary)
}

fn ablate_cmd(cfg: CliConfig, common: &Common) -> Result<Value> {
    cfg.validate()?;
    let (bundle, _) = load_models(&cfg)?;
    let dir = single_data(&cfg)?;
    let train = load_dataset(dir, SplitArg::Train, false)?.unlabeled();
    let test = load_dataset(dir, SplitArg::Test, true)?;
    let out = out_dir(common)?;
    prepare_dir(out)?;
    let rows = ablation_run(&cfg.train, &bundle, &train, &test, &Variant::ALL).runtime("ablation")?;
    write_ablation_csv(&rows, &out.join("ablation.csv")).runtime("ablation table")?;
    cfg.persist(&out.join("config.json"))?;
    let rows: Vec<Value> = rows
        .iter()
        .map(|r| json!({"config": r.config, "hter": r.hter, "auc": r.auc}))
        .collect();
    Ok(json!({"command": "ablate", "rows": rows}))
}

fn grad_check_cmd(cfg: CliConfig, common: &Common, trials: usize, inject_fault: bool) -> Result<Value> {
    if trials == 0 {
        return Err(CliError::Invalid("--trials must be positive".into()));
    }
    let report = run_gradient_suite(cfg.train.seed, trials, inject_fault).runtime("gradient suite")?;
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{:<28} {:>6} {:>14}  status", "check", "trials", "max_rel_error");
    for r in &report.rows {
        let status = if r.passed { "ok" } else { "FAIL" };
        let _ = writeln!(err, "{:<28} {:>6} {:>14.3e}  {status}", r.name, r.trials, r.max_rel_error);
    }
    if let Some(out) = &common.out {
        prepare_dir(out)?;
        std::fs::write(out.join("grad_check.csv"), report.csv()).runtime("grad_check.csv")?;
        cfg.persist(&out.join("config.json"))?;
    }
    let failed: Vec<&str> = report.failures().iter().map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} of {} gradient checks exceed {:e}: {}",
            failed.len(),
            report.rows.len(),
            report.tolerance,
            failed.join(", ")
        )));
    }
    let worst = report.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(json!({
        "command": "grad-check",
        "checks": report.rows.len(),
        "trials": trials,
        "max_rel_error": worst,
        "passed": true,
    }))
}
