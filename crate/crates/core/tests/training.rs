use soa_core::model::{init_params, Component, ModelConfig};
use soa_core::surgery::ModelCheckpoint;
use soa_core::synthdata::{sample_corpus, Corpus, DomainSpec, Utterance};
use soa_core::training::{run_stage, StageConfig};
use soa_core::SoaError;

fn labeled(n: usize, seed: u64) -> Corpus {
    sample_corpus(&DomainSpec::source(seed), n, (3, 5), true, seed).unwrap()
}

fn fresh(seed: u64) -> ModelCheckpoint {
    let cfg = ModelConfig::toy();
    let params = init_params(&cfg, seed).unwrap();
    ModelCheckpoint::new(cfg, params, vec![]).unwrap()
}

fn params_of(c: &ModelCheckpoint, comp: Component) -> Vec<(String, Vec<u64>)> {
    c.params
        .iter()
        .filter(|(k, _)| comp.owns(k))
        .map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn finetune_keeps_feature_encoder_bit_identical() {
    let corpus = labeled(8, 1);
    let start = fresh(1);
    let out = run_stage(&StageConfig::finetune(6, 1), &start, &[corpus]).unwrap();
    let m2 = &out.checkpoint;
    for c in [Component::FeatureEncoder, Component::Quantizer] {
        assert_eq!(params_of(&start, c), params_of(m2, c), "{} changed", c.name());
    }
    assert_ne!(params_of(&start, Component::ContextualEncoder), params_of(m2, Component::ContextualEncoder));
    assert!(m2.has_component(Component::CtcHead));
    let theta = start.component_digest(Component::FeatureEncoder);
    assert!(out.log.iter().all(|r| r.theta_checksum == theta));
    assert_eq!(m2.lineage.last().unwrap().label.as_deref(), Some("M2"));
}

#[test]
fn continual_keeps_contextual_encoder_and_head_bit_identical() {
    let corpus = labeled(8, 2);
    let m2 = run_stage(&StageConfig::finetune(2, 2), &fresh(2), std::slice::from_ref(&corpus)).unwrap().checkpoint;
    let target = sample_corpus(&DomainSpec::target(2), 8, (3, 5), false, 2).unwrap();
    let out = run_stage(&StageConfig::continual(4, 2), &m2, &[corpus.unlabeled(), target]).unwrap();
    let m3 = &out.checkpoint;
    for c in [Component::ContextualEncoder, Component::CtcHead] {
        assert_eq!(params_of(&m2, c), params_of(m3, c), "{} changed", c.name());
    }
    assert_ne!(params_of(&m2, Component::FeatureEncoder), params_of(m3, Component::FeatureEncoder));
    let phi = m2.component_digest(Component::ContextualEncoder);
    assert!(out.log.iter().all(|r| r.phi_checksum == phi));
}

#[test]
fn zero_steps_is_identity() {
    let start = fresh(3);
    let corpus = labeled(4, 3).unlabeled();
    let out = run_stage(&StageConfig::pretrain(0, 3), &start, &[corpus]).unwrap();
    assert_eq!(out.checkpoint.params, start.params);
    assert!(out.log.is_empty());
}

#[test]
fn stages_are_deterministic() {
    let corpus = labeled(6, 4).unlabeled();
    let start = fresh(4);
    let cfg = StageConfig::pretrain(3, 4);
    let a = run_stage(&cfg, &start, std::slice::from_ref(&corpus)).unwrap();
    let b = run_stage(&cfg, &start, &[corpus]).unwrap();
    assert_eq!(a.checkpoint.digest(), b.checkpoint.digest());
    let la: Vec<u64> = a.log.iter().map(|r| r.loss.to_bits()).collect();
    let lb: Vec<u64> = b.log.iter().map(|r| r.loss.to_bits()).collect();
    assert_eq!(la, lb);
}

#[test]
fn finetune_loss_trends_down() {
    let corpus = labeled(24, 5);
    let mut cfg = StageConfig::finetune(200, 5);
    cfg.finetune_mask_prob = 0.0;
    let out = run_stage(&cfg, &fresh(5), &[corpus]).unwrap();
    let mean = |r: &[soa_core::training::LogRow]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&out.log[..20]), mean(&out.log[180..]));
    assert!(tail < 0.7 * head, "loss {head} -> {tail}");
}

#[test]
fn pretrain_loss_is_finite_and_bounded() {
    let corpus = labeled(8, 6).unlabeled();
    let out = run_stage(&StageConfig::pretrain(10, 6), &fresh(6), &[corpus]).unwrap();
    for r in &out.log {
        assert!(r.loss.is_finite() && r.loss > 0.0, "step {} loss {}", r.step, r.loss);
    }
}

#[test]
fn data_contract_violations() {
    let corpus = labeled(4, 7);
    let err = run_stage(&StageConfig::pretrain(1, 7), &fresh(7), std::slice::from_ref(&corpus)).unwrap_err();
    assert!(matches!(err, SoaError::DataContract(_)));
    assert_eq!(err.exit_code(), 3);
    let err = run_stage(&StageConfig::finetune(1, 7), &fresh(7), &[corpus.unlabeled()]).unwrap_err();
    assert!(matches!(err, SoaError::DataContract(_)));
    assert!(run_stage(&StageConfig::pretrain(1, 7), &fresh(7), &[]).is_err());
}

#[test]
fn infeasible_ctc_samples_are_skipped() {
    let mut corpus = labeled(1, 8);
    let u = &corpus.utterances[0];
    corpus.utterances = vec![Utterance { waveform: u.waveform.clone(), transcript: Some(vec![0; 64]), snr_db: None }];
    let mut cfg = StageConfig::finetune(2, 8);
    cfg.batch_size = 3;
    let out = run_stage(&cfg, &fresh(8), &[corpus]).unwrap();
    assert_eq!(out.skipped, 6);
    assert!(out.log.iter().all(|r| r.loss.is_nan()));
}

#[test]
fn broken_freeze_sets_are_rejected() {
    let mut cfg = StageConfig::continual(1, 9);
    cfg.freeze.clear();
    let err = run_stage(&cfg, &fresh(9), &[labeled(2, 9).unlabeled()]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
