use super::*;
use crate::data::{render_sample, Class, Samples, Style};
use crate::models::Module;

fn synthetic(style: &Style, per_class: usize, seed: u64) -> Samples {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut depths = Vec::new();
    for i in 0..2 * per_class {
        let class = if i % 2 == 0 { Class::Live } else { Class::Spoof };
        let (img, d) = render_sample(class, style, seed.wrapping_mul(1000) + i as u64);
        images.push(img);
        depths.push(d);
        labels.push(class.label() as usize);
    }
    Samples::from_parts(images, Some(labels), Some(depths))
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        source_epochs: 2,
        adapt_steps: 5,
        lr: 1e-3,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn config_defaults_and_json() {
    let c: TrainConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(c, TrainConfig::default());
    assert_eq!(c.lr, 1e-4);
    assert_eq!((c.lambda_ent, c.lambda_ph, c.eta), (0.01, 0.01, 0.1));
    assert_eq!((c.batch_size, c.source_epochs, c.adapt_steps), (32, 20, 2000));
    let err = serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1, "gamma": 2}"#).unwrap_err();
    assert!(err.to_string().contains("gamma"));
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    for bad in [
        TrainConfig { eta: 1.5, ..c.clone() },
        TrainConfig { lr: 0.0, ..c.clone() },
        TrainConfig { batch_size: 1, ..c.clone() },
        TrainConfig { bn_alpha: 0.0, ..c.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
    }
}

#[test]
fn variant_algebra() {
    let c = TrainConfig::default();
    assert!(Variant::Baseline.configure(&c).is_none());
    let nsc = Variant::Nsc.configure(&c).unwrap();
    assert!(!nsc.use_dsc && nsc.eta == 0.0);
    let dsc = Variant::NscDsc.configure(&c).unwrap();
    assert!(dsc.use_dsc && dsc.eta == 0.0);
    // The semantic-consistency row is the full config with SpecMix switched off.
    assert_eq!(dsc, TrainConfig { eta: 0.0, ..c.clone() });
    assert_eq!(Variant::Full.configure(&c).unwrap(), c);
}

#[test]
fn source_training_is_deterministic_and_learns() {
    let data = synthetic(&Style::source(), 16, 1);
    let cfg = tiny_cfg();
    let (a, log) = train_source(&cfg, &data).unwrap();
    let (b, _) = train_source(&cfg, &data).unwrap();
    assert_eq!(a.state(), b.state());
    assert_eq!(log.len(), 2);
    assert!(a.bn_registry().iter().all(|bn| bn.num_updates == 8));
    assert!(train_source(&cfg, &data.unlabeled()).is_err());
}

#[test]
fn adaptation_keeps_source_frozen() {
    let src = synthetic(&Style::source(), 16, 2);
    let tgt = synthetic(&Style::target(), 8, 3).unlabeled();
    let cfg = tiny_cfg();
    let (bundle, _) = train_source(&cfg, &src).unwrap();
    let before = bundle.state();
    let out = adapt_generator(&cfg, &bundle, &tgt).unwrap();
    assert_eq!(bundle.state(), before);
    assert_eq!(out.log.len(), cfg.adapt_steps);
    assert_eq!(out.stylized_ema.len(), 5);
    let fresh = crate::models::build_generator(cfg.seed);
    assert_ne!(fresh.state(), out.generator.state());
    for r in &out.log {
        let w = cfg.weights();
        let t = r.stat + r.per + w.lambda_ent * (r.ent1 + r.ent2) + w.lambda_ph * r.ph;
        assert!((t - r.total).abs() < 1e-9 * t.abs().max(1.0));
    }
    // The statistics-only variant carries no semantic terms.
    let nsc = Variant::Nsc.configure(&cfg).unwrap();
    let out = adapt_generator(&nsc, &bundle, &tgt).unwrap();
    assert!(out.log.iter().all(|r| r.per == 0.0 && r.ph == 0.0));
}

#[test]
fn adaptation_rejects_untrained_bundle() {
    let tgt = synthetic(&Style::target(), 4, 3);
    let bundle = crate::models::build_source_bundle(0);
    assert!(matches!(
        adapt_generator(&tiny_cfg(), &bundle, &tgt),
        Err(PipelineError::Invalid(_))
    ));
}

#[test]
fn evaluation_report_is_consistent() {
    let src = synthetic(&Style::source(), 16, 4);
    let cfg = tiny_cfg();
    let (bundle, _) = train_source(&cfg, &src).unwrap();
    let r = evaluate(&bundle, None, &src).unwrap();
    let again = evaluate(&bundle, None, &src).unwrap();
    assert_eq!(r, again);
    assert!((0.0..=1.0).contains(&r.auc) && (0.0..=1.0).contains(&r.hter));
    let scores = score(&bundle, None, &src).unwrap();
    assert_eq!(r.auc, metrics::roc_auc(&scores, src.labels().unwrap()).unwrap());
    assert!(evaluate(&bundle, None, &src.unlabeled()).is_err());
    let rows = ablation_run(&cfg, &bundle, &src, &src, &[Variant::Baseline]).unwrap();
    assert_eq!((rows[0].auc, rows[0].hter), (r.auc, r.hter));
}

#[test]
fn discrepancy_and_exports() {
    let src = synthetic(&Style::source(), 16, 5);
    let cfg = tiny_cfg();
    let (bundle, _) = train_source(&cfg, &src).unwrap();
    let curve = bn_discrepancy(&bundle, &src.unlabeled(), None).unwrap();
    let names: Vec<&str> = curve.iter().map(|p| p.layer.as_str()).collect();
    assert_eq!(names, ["F.bn1", "F.bn2", "F.bn3", "R.bn1", "R.bn2"]);
    assert!(curve.iter().all(|p| p.d_mean.is_finite() && p.d_var >= 0.0));
    let m = mmd_curve(&bundle, &src, &src, None, Kernel::Linear).unwrap();
    assert!(m.iter().all(|v| v.abs() < 1e-9));

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_features_csv(&bundle, None, &src, 1, &p1).unwrap();
    export_features_csv(&bundle, None, &src, 1, &p2).unwrap();
    let text = std::fs::read_to_string(&p1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), src.len() + 1);
    assert!(lines[0].starts_with("index,label,domain,f0,f1,"));
    assert!(lines[0].ends_with(",f31"));
    assert!(export_features_csv(&bundle, None, &src, 4, &p1).is_err());
}
