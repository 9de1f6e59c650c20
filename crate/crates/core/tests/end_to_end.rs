use nalgebra::DMatrix;
use tempfile::TempDir;
use torq::metrics::{emit_report, evaluate, read_report, Method};
use torq::synth::{generate, split_tokens};
use torq::{
    build_inter_rotation, calibrate, BlockShape, CalibReport, CalibrationConfig, Distribution, EqualizationConfig,
    MxFormat, ScaleMode, SynthConfig,
};

fn lognormal(seed: u64, tokens: usize) -> torq::BlockTensor {
    generate(&SynthConfig {
        tokens,
        shape: BlockShape::new(16, 32).unwrap(),
        seed,
        dist: Distribution::LogNormal { mu: 0.0, sigma: 1.0 },
    })
    .unwrap()
}

#[test]
fn full_calibration_beats_rtn_on_lognormal_data() {
    let fmt = MxFormat::mxfp4();
    let data = lognormal(11, 192);
    let (calib, eval) = split_tokens(&data, 96).unwrap();
    let bundle = calibrate(&calib, &CalibrationConfig::default(), &fmt, "lognormal").unwrap();
    assert!(bundle.meta.converged);
    assert!(bundle.meta.inter_steps < 16);

    let trace = &bundle.meta.loss_trace;
    assert!(trace.len() >= 2);
    assert!(trace.last().unwrap() < trace.first().unwrap(), "{trace:?}");

    let rtn = evaluate(&eval, &fmt, Method::Rtn).unwrap();
    let full = evaluate(&eval, &fmt, Method::Rotated(&bundle, ScaleMode::DynamicAligned)).unwrap();
    assert!(full.mse < rtn.mse, "full {} rtn {}", full.mse, rtn.mse);
    assert!(full.code_loss < rtn.code_loss);
}

#[test]
fn balanced_covariance_needs_no_inter_steps() {
    let rot = build_inter_rotation(&DMatrix::identity(12, 12), &EqualizationConfig::default()).unwrap();
    assert!(rot.steps.is_empty());
    assert!(rot.converged);
    assert_eq!(rot.matrix, DMatrix::identity(12, 12));
}

#[test]
fn reports_survive_a_disk_round_trip() {
    let fmt = MxFormat::mxfp4();
    let data = lognormal(4, 48);
    let bundle = calibrate(&data, &CalibrationConfig::default(), &fmt, "lognormal").unwrap();
    let report = CalibReport::build(&data, &bundle, ScaleMode::DynamicAligned, None, None).unwrap();

    let dir = TempDir::new().unwrap();
    let json = dir.path().join("r.json");
    let prefix = dir.path().join("hist");
    emit_report(&report, &json, Some(&prefix)).unwrap();
    assert_eq!(read_report(&json).unwrap(), report);

    let first = std::fs::read(&json).unwrap();
    emit_report(&report, &json, Some(&prefix)).unwrap();
    assert_eq!(std::fs::read(&json).unwrap(), first);

    for side in ["before", "after"] {
        let csv = std::fs::read_to_string(dir.path().join(format!("hist.{side}.csv"))).unwrap();
        let total: f64 = csv
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
