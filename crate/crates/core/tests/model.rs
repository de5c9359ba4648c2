mod common;

use common::*;
use maskdiff::checkpoint::*;
use maskdiff::model::*;
use maskdiff::{Error, MaskPredictor, SpecialTokens};

#[test]
fn initialisation_is_seeded() {
    let cfg = tiny_config(AttentionMode::Bidirectional);
    let a: ParameterSet<f64> = init_params(&cfg, 3).unwrap();
    let b: ParameterSet<f64> = init_params(&cfg, 3).unwrap();
    let c: ParameterSet<f64> = init_params(&cfg, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let m = Model::new(cfg.clone(), a.clone()).unwrap();
    assert_eq!(m.forward(&[1, 2, 3]).unwrap(), Model::new(cfg, b).unwrap().forward(&[1, 2, 3]).unwrap());
}

#[test]
fn zero_init_gives_uniform_over_real_tokens() {
    let cfg = ModelConfig { init_std: 0.0, ..tiny_config(AttentionMode::Bidirectional) };
    let model: Model<f64> = Model::init(cfg, 1).unwrap();
    let p = model.predict(&[1, 4, 2]).unwrap();
    for pos in 0..3 {
        for tok in 0..4 {
            assert!((p.log_prob(pos, tok) + 4f64.ln()).abs() < 1e-12);
        }
        assert!(p.log_prob(pos, TINY_SPECIAL.mask) < -1e8);
    }
}

#[test]
fn parameter_counts() {
    let special = SpecialTokens { mask: 1, eos: 0 };
    let desk = ModelConfig::desk(29, special);
    let params: ParameterSet<f32> = init_params(&desk, 0).unwrap();
    let (l, d, f) = (4usize, 128usize, 344usize);
    let per_layer = 4 * d * d + 3 * d * f + 2 * d;
    assert_eq!(params.count_nonembedding(), l * per_layer + d);
    assert_eq!(desk.nonembedding_count(), params.count_nonembedding());
    assert_eq!(params.count_total(), params.count_nonembedding() + 2 * 29 * d);
    assert_eq!(params.len(), 3 + 8 * l);
}

#[test]
fn output_shape_and_mask_exclusion() {
    let model = random_model(2);
    let logits = model.forward(&[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(logits.shape(), &[5, TINY_VOCAB]);
    let p = model.predict(&[4, 4, 4]).unwrap();
    for pos in 0..3 {
        assert_eq!(p.argmax(pos) == TINY_SPECIAL.mask, false);
        let total: f64 = p.log_probs(pos).iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

fn row(model: &Model<f64>, seq: &[u32], pos: usize) -> Vec<f64> {
    model.predict(seq).unwrap().log_probs(pos).to_vec()
}

#[test]
fn bidirectional_rows_see_the_future() {
    let model = random_model(5);
    let a = row(&model, &[1, 2, 3, 1], 0);
    let b = row(&model, &[1, 2, 3, 2], 0);
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn causal_rows_ignore_the_future() {
    let model = random_causal_model(5);
    for pos in 0..3 {
        let a = row(&model, &[1, 2, 3, 1], pos);
        let b = row(&model, &[1, 2, 3, 2], pos);
        assert_eq!(a, b);
    }
    let a = row(&model, &[1, 2, 3, 1], 3);
    let b = row(&model, &[1, 2, 3, 2], 3);
    assert_ne!(a, b);
}

#[test]
fn batched_prediction_matches_single() {
    let model = random_model(6);
    let seqs = vec![vec![1, 2], vec![3, 4, 1, 2], vec![], vec![2]];
    let batch = model.predict_batch(&seqs).unwrap();
    for (s, p) in seqs.iter().zip(&batch) {
        assert_eq!(p.len(), s.len());
        if !s.is_empty() {
            let single = model.predict(s).unwrap();
            for pos in 0..s.len() {
                for (x, y) in single.log_probs(pos).iter().zip(p.log_probs(pos)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = random_model(7);
    assert!(matches!(model.forward(&[9]), Err(Error::Precondition(_))));
    assert!(matches!(model.forward(&[1; 40]), Err(Error::Length { len: 40, max: 32 })));
    let bad = ModelConfig { n_heads: 3, ..tiny_config(AttentionMode::Bidirectional) };
    assert!(matches!(Model::<f32>::init(bad, 0), Err(Error::Config(_))));
    let same_ids = ModelConfig { eos_id: 4, ..tiny_config(AttentionMode::Bidirectional) };
    assert!(same_ids.validate().is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let model = random_model(8);
    let seqs = vec![vec![1, 4, 2, 3], vec![4, 4, 1]];
    for (name, err) in gradient_check(&model, &seqs, 3, 9) {
        assert!(err <= 1e-4, "{name}: {err}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_config(AttentionMode::Causal);
    let model: Model<f32> = Model::init(cfg.clone(), 10).unwrap();
    let record = CheckpointRecord { model: cfg, vocab: Some("abc".into()), iteration: 17 };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &record, &model.params).unwrap();
    let (rec, loaded) = load_checkpoint(&path).unwrap();
    assert_eq!(rec, record);
    assert_eq!(loaded, model);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"MDLM");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    assert_eq!(bytes, checkpoint_bytes(&record, &model.params).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = tiny_config(AttentionMode::Bidirectional);
    let model: Model<f32> = Model::init(cfg.clone(), 11).unwrap();
    let record = CheckpointRecord { model: cfg, vocab: None, iteration: 0 };
    let bytes = checkpoint_bytes(&record, &model.params).unwrap();

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(parse_checkpoint(&wrong_magic), Err(Error::Checkpoint(_))));
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(matches!(parse_checkpoint(&wrong_version), Err(Error::Checkpoint(_))));
    assert!(parse_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    assert!(parse_checkpoint(&bytes[..2]).is_err());

    let mut fewer = model.params.clone();
    let mut map = std::collections::BTreeMap::new();
    for (k, v) in fewer.iter_mut() {
        if k != "head" {
            map.insert(k.to_string(), v.clone());
        }
    }
    let partial = checkpoint_bytes(&record, &ParameterSet::from_map(map)).unwrap();
    assert!(matches!(parse_checkpoint(&partial), Err(Error::Checkpoint(_))));
}
