use semfield_core::config::RunConfig;
use semfield_core::experiments::{ablation_checks, fit_and_evaluate, label_checks, median, report_csv, report_markdown, summarize, RunRecord, SegScore, Variant};
use semfield_core::grid::{EvalRange, RangeMetrics};
use semfield_core::scene::build_sequence;
use semfield_core::train::{FitOptions, LabelViews};

fn metrics(iou: f64) -> RangeMetrics {
    RangeMetrics {
        range: EvalRange { extent: [1.0, 1.0, 1.0] },
        iou,
        precision: iou,
        recall: 1.0,
        class_iou: vec![None, Some(iou)],
        miou: iou,
        true_positive: 1,
        false_positive: 0,
        false_negative: 0,
    }
}

fn record(variant: Variant, seed: u64, iou: [f64; 3], seg: [f64; 4]) -> RunRecord {
    RunRecord {
        variant: variant.name().into(),
        seed,
        ranges: iou.iter().map(|&v| metrics(v)).collect(),
        seg: [0, 5, 10, 15]
            .iter()
            .zip(seg)
            .map(|(&offset, accuracy)| SegScore {
                offset,
                accuracy,
                pseudo_accuracy: 0.88,
            })
            .collect(),
        final_loss: None,
    }
}

#[test]
fn median_of_odd_even_and_empty() {
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&mut []).is_nan());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ABLATION.iter().chain(&Variant::LABELS) {
        assert_eq!(Variant::parse(v.name()), Some(*v));
    }
    assert_eq!(Variant::parse("everything"), None);
}

#[test]
fn variants_change_only_their_switch() {
    let base = RunConfig::reference();
    assert_eq!(Variant::Full.apply(&base), base);

    let sem = Variant::SemanticOnly.apply(&base);
    assert!(!sem.train.use_photometric && sem.train.use_semantic);
    assert_eq!((sem.loss.lambda_ph, sem.loss.lambda_eas), (0.0, 0.0));
    assert_eq!((sem.field, sem.render, sem.scene), (base.field.clone(), base.render.clone(), base.scene.clone()));

    let ph = Variant::PhotometricOnly.apply(&base);
    assert!(!ph.train.use_semantic && ph.train.use_photometric);
    assert_eq!(ph.loss.lambda_seg, 0.0);

    let fixed = Variant::FixedOffset.apply(&base);
    assert_eq!(fixed.train.fixed_side_offset, Some(base.train.side_offset_range.0));
    let mut back = fixed.clone();
    back.train.fixed_side_offset = None;
    assert_eq!(back, base);

    assert_eq!(Variant::FrontOnlyLabels.apply(&base).train.label_views, LabelViews::FrontOnly);
    assert_eq!(Variant::InputOnlyLabels.apply(&base).train.label_views, LabelViews::InputOnly);
}

#[test]
fn checks_use_medians_over_seeds() {
    let mut recs = Vec::new();
    for seed in 0..3 {
        // one outlier seed per variant must not flip the median
        let bump = if seed == 2 { 0.5 } else { 0.0 };
        recs.push(record(Variant::Full, seed, [0.5, 0.4, 0.3], [0.95, 0.9, 0.85, 0.8]));
        recs.push(record(Variant::SemanticOnly, seed, [0.3 + bump, 0.3, 0.2], [0.9; 4]));
        recs.push(record(Variant::PhotometricOnly, seed, [0.45, 0.4, 0.3 + bump], [0.1; 4]));
        recs.push(record(Variant::FixedOffset, seed, [0.5, 0.4, 0.25], [0.9; 4]));
        recs.push(record(Variant::FrontOnlyLabels, seed, [0.5; 3], [0.94, 0.88, 0.8, 0.75]));
        recs.push(record(Variant::InputOnlyLabels, seed, [0.5; 3], [0.93, 0.85, 0.78, 0.7]));
    }
    let summary = summarize(&recs);
    assert_eq!(summary["full"].seeds, 3);
    assert_eq!(summary["semantic_only"].iou, vec![0.3, 0.3, 0.2]);
    let ab = ablation_checks(&summary);
    assert_eq!(ab.len(), 3);
    assert!(ab.iter().all(|c| c.holds), "{ab:?}");
    let lab = label_checks(&summary);
    assert_eq!(lab.len(), 5);
    assert!(lab.iter().all(|c| c.holds), "{lab:?}");

    recs.push(record(Variant::PhotometricOnly, 3, [0.9; 3], [0.1; 4]));
    recs.push(record(Variant::PhotometricOnly, 4, [0.9; 3], [0.1; 4]));
    let ab = ablation_checks(&summarize(&recs));
    assert!(!ab[1].holds && ab[1].name.contains("photometric_only"), "{ab:?}");
}

#[test]
fn label_checks_flag_rising_accuracy_and_weak_plus_zero() {
    let recs = vec![
        record(Variant::Full, 0, [0.5; 3], [0.80, 0.85, 0.7, 0.6]),
        record(Variant::FrontOnlyLabels, 0, [0.5; 3], [0.9, 0.8, 0.7, 0.65]),
        record(Variant::InputOnlyLabels, 0, [0.5; 3], [0.9, 0.8, 0.7, 0.5]),
    ];
    let checks = label_checks(&summarize(&recs));
    let failing: Vec<&str> = checks.iter().filter(|c| !c.holds).map(|c| c.name.as_str()).collect();
    assert_eq!(
        failing,
        vec!["full >= front_only >= input_only accuracy at +15", "full accuracy non-increasing with offset", "full +0 accuracy >= pseudo-label accuracy"]
    );
}

#[test]
fn reports_list_every_run() {
    let recs = vec![record(Variant::Full, 0, [0.5, 0.4, 0.3], [0.9; 4]), record(Variant::Full, 1, [0.7, 0.6, 0.5], [0.9; 4])];
    let md = report_markdown(&recs);
    assert!(md.contains("| full | 2 | 60.00 | 50.00 | 40.00 | 40.00 |"), "{md}");
    assert!(md.contains("| pseudo-labels | 88.00 | 88.00 | 88.00 | 88.00 |"), "{md}");
    let csv = report_csv(&recs);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("variant,seed,iou_0,precision_0,recall_0,miou_0,"));
    assert!(lines[0].ends_with("seg_acc_15,pseudo_acc_15"));
    assert!(lines[2].starts_with("full,1,0.7,"));
}

#[test]
fn short_fit_produces_a_complete_record() {
    let mut cfg = RunConfig::reference();
    for s in [
        "scene.dims=[32,32,12]",
        "scene.trajectory.num_steps=20",
        "rig.width=32",
        "rig.height=16",
        "field.feature_dim=4",
        "field.hidden=[8]",
        "render.samples=8",
        "train.n_frames=4",
        "train.side_offset_range=[5,14]",
        "train.patch_size=4",
        "train.steps=3",
        "eval.forward=16",
        "eval.half_width=8",
        "eval.street_z=4",
        "eval.seg_offsets=[0,5]",
    ] {
        cfg.set(s).unwrap();
    }
    let seq = build_sequence(&cfg.dataset()).unwrap();
    let rec = fit_and_evaluate(&cfg, &seq, "full", &FitOptions::default()).unwrap();
    assert_eq!(rec.ranges.len(), 3);
    assert_eq!(rec.seg.iter().map(|s| s.offset).collect::<Vec<_>>(), vec![0, 5]);
    assert_eq!(rec.final_loss.unwrap().step, 3);
    for m in &rec.ranges {
        assert!((0.0..=1.0).contains(&m.iou) && (0.0..=1.0).contains(&m.miou));
    }
    let back: RunRecord = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
    assert_eq!(back, rec);
}
