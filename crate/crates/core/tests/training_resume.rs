use ccgs::corpus::{generate_synthetic_corpus, SynthConfig};
use ccgs::model::CcgsModel;
use ccgs::numcore::checkpoint::{self, Precision};
use ccgs::training::{fit, TrainConfig, Trainer};

fn cfg(steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.model.encoder.d = 12;
    cfg.model.encoder.d_v = 12;
    cfg.model.encoder.buckets = 256;
    cfg.steps = steps;
    cfg.seed = 21;
    cfg
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let corpus = generate_synthetic_corpus(
        &SynthConfig {
            n_videos: 6,
            n_questions: 12,
            ..SynthConfig::default()
        },
        4,
    )
    .unwrap();

    let mut full = Trainer::new(cfg(12), &corpus).unwrap();
    let straight = fit(&mut full, None).unwrap();

    let mut first = Trainer::new(cfg(5), &corpus).unwrap();
    fit(&mut first, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.bin");
    checkpoint::save(&path, &first.model.params, Precision::F64).unwrap();

    let (params, _) = checkpoint::load(&path).unwrap();
    assert_eq!(params.step(), 5);
    let model = CcgsModel::with_params(cfg(12).model, params).unwrap();
    let mut resumed = Trainer::with_model(cfg(12), &corpus, model).unwrap();
    let tail = fit(&mut resumed, None).unwrap();

    assert_eq!(tail.log.len(), 7);
    assert_eq!(tail.log[..], straight.log[5..]);
    assert_eq!(
        checkpoint::encode(&tail.last, Precision::F64),
        checkpoint::encode(&straight.last, Precision::F64)
    );
}

#[test]
fn different_seeds_diverge() {
    let corpus = generate_synthetic_corpus(&SynthConfig::default(), 1).unwrap();
    let mut a = Trainer::new(cfg(3), &corpus).unwrap();
    let mut other = cfg(3);
    other.seed = 22;
    let mut b = Trainer::new(other, &corpus).unwrap();
    let la = fit(&mut a, None).unwrap().log;
    let lb = fit(&mut b, None).unwrap().log;
    assert_ne!(la, lb);
}
