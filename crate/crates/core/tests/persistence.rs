mod common;

use common::criteria::{self, micro_config};
use growclip::pipeline::{read_log, resume_pipeline, run_pipeline, Mode, Phase};
use growclip::Error;

#[test]
fn round_trip_repeat_and_resume() {
    let o = criteria::determinism();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config();
    cfg.mode = Mode::Twp;
    run_pipeline(&cfg, dir.path(), Some(1)).unwrap();
    cfg.train.lr *= 2.0;
    let err = resume_pipeline(&cfg, dir.path(), 1).unwrap_err();
    assert!(matches!(err, Error::ResumeMismatch(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn single_step_has_no_growth_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config();
    cfg.data.steps = 1;
    run_pipeline(&cfg, dir.path(), None).unwrap();
    let log = read_log(&dir.path().join("metrics.jsonl")).unwrap();
    assert!(log.iter().all(|r| matches!(r.phase, Phase::Train | Phase::Eval)));
    assert!(dir.path().join("checkpoints/step-1.ckpt").exists());
}

#[test]
fn every_mode_runs() {
    for mode in [Mode::Tfs, Mode::Twp, Mode::Sap, Mode::Nas] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config();
        cfg.data.steps = 2;
        cfg.mode = mode;
        let s = run_pipeline(&cfg, dir.path(), None).unwrap();
        assert_eq!(s.steps.len(), 2, "{mode:?}");
        let log = read_log(&dir.path().join("metrics.jsonl")).unwrap();
        let searched = log.iter().any(|r| r.phase == Phase::Selected);
        assert_eq!(searched, mode == Mode::Nas, "{mode:?}");
    }
}

#[test]
fn frozen_growclip_keeps_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config();
    cfg.data.steps = 2;
    cfg.selection.frozen = growclip::model::GrowthFactor::ALL.to_vec();
    let s = run_pipeline(&cfg, dir.path(), None).unwrap();
    assert_eq!(s.steps[1].spec, cfg.base);
}
