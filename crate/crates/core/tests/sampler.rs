mod common;

use common::*;
use maskdiff::rng::{seeded, substream};
use maskdiff::sampler::*;
// Disambiguates from proptest's `Strategy` trait.
use maskdiff::sampler::Strategy;
use maskdiff::{Error, MaskPredictor, Prediction, Result, SpecialTokens};
use proptest::prelude::*;

/// Predicts `script[i - prompt_len]` with certainty at every generated position.
struct Scripted {
    prompt_len: usize,
    script: Vec<u32>,
}

const SCRIPT_SPECIAL: SpecialTokens = SpecialTokens { mask: 1, eos: 0 };
const SCRIPT_VOCAB: usize = 12;

impl MaskPredictor for Scripted {
    fn vocab_size(&self) -> usize {
        SCRIPT_VOCAB
    }
    fn special(&self) -> SpecialTokens {
        SCRIPT_SPECIAL
    }
    fn predict_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<Prediction>> {
        Ok(seqs
            .iter()
            .map(|s| {
                let mut lp = vec![-30.0; s.len() * SCRIPT_VOCAB];
                for i in 0..s.len() {
                    let tok = if i >= self.prompt_len { self.script[i - self.prompt_len] } else { s[i] };
                    lp[i * SCRIPT_VOCAB + tok as usize] = 0.0;
                }
                Prediction::new(SCRIPT_VOCAB, lp)
            })
            .collect())
    }
}

fn prompts(n: usize) -> Vec<Vec<u32>> {
    let mut rng = seeded(77);
    (0..n).map(|i| random_x0(1 + i % 4, &mut rng)).collect()
}

#[test]
fn single_step_takes_argmax_of_one_pass() {
    let model = random_model(1);
    let prompt = vec![2, 3];
    let cfg = SamplerConfig::diffusion(6, 1);
    let out = generate(&model, &prompt, &cfg, &mut seeded(0)).unwrap();
    assert_eq!(out.forward_passes, 1);
    let mut input = prompt.clone();
    input.extend([TINY_SPECIAL.mask; 6]);
    let pred = model.predict(&input).unwrap();
    let expected: Vec<u32> = (2..8).map(|i| pred.argmax(i)).collect();
    assert_eq!(out.raw, expected);
    assert_eq!(out.trace.records.len(), 6);
}

#[test]
fn random_strategy_remasks_half_in_one_step() {
    let uniform = Uniform { vocab: 4, special: SpecialTokens { mask: 3, eos: 0 } };
    let cfg = SamplerConfig::diffusion(4, 2).with_strategy(Strategy::Random);
    let mut rng = seeded(3);
    let mut kept = 0;
    let runs = 10_000;
    for _ in 0..runs {
        let out = generate(&uniform, &[0], &cfg, &mut rng).unwrap();
        kept += out.trace.per_step_counts(0)[0];
        assert_eq!(out.trace.records.len(), 4);
    }
    let remasked = 1.0 - kept as f64 / (4 * runs) as f64;
    assert!((remasked - 0.5).abs() < 0.02, "{remasked}");
}

#[test]
fn one_position_per_step_when_steps_equal_length() {
    let model = random_model(4);
    for strategy in [Strategy::LowConfidence, Strategy::RandomCount] {
        let cfg = SamplerConfig::diffusion(7, 7).with_strategy(strategy);
        let out = generate(&model, &[1, 2], &cfg, &mut seeded(5)).unwrap();
        assert_eq!(out.trace.per_step_counts(0), vec![1; 7]);
        let mut positions: Vec<usize> = out.trace.records.iter().map(|r| r.position).collect();
        positions.sort();
        assert_eq!(positions, (0..7).collect::<Vec<_>>());
    }
}

#[test]
fn low_confidence_remask_examples() {
    let keep_all = remask_low_confidence(&[0.1, 0.2, 0.3], &[false; 3], 0.0).unwrap();
    assert_eq!(keep_all, vec![false; 3]);
    let r = remask_low_confidence(&[0.9, 0.2, 0.6, 0.4], &[false; 4], 0.5).unwrap();
    assert_eq!(r, vec![false, true, false, true]);
    let r = remask_low_confidence(&[0.0, 0.2, 0.6, 0.4], &[true, false, false, false], 0.5).unwrap();
    assert_eq!(r, vec![false, true, false, true]);
    let ties = remask_low_confidence(&[0.5; 4], &[false; 4], 0.5).unwrap();
    assert_eq!(ties, vec![false, false, true, true]);
    assert!(remask_low_confidence(&[0.5], &[false, false], 0.5).is_err());
}

#[test]
fn eos_zeroing_behaviour() {
    let mut c = vec![0.9, 0.8];
    eos_zeroing_hook(&mut c, &[3, 4], 0, true);
    assert_eq!(c, vec![0.9, 0.8]);
    eos_zeroing_hook(&mut c, &[0, 0], 0, false);
    assert_eq!(c, vec![0.9, 0.8]);
    let mut c = vec![0.99, 0.3, 0.98, 0.2];
    let predicted = [0, 5, 0, 6];
    eos_zeroing_hook(&mut c, &predicted, 0, true);
    let remask = remask_low_confidence(&c, &[false; 4], 0.5).unwrap();
    assert_eq!(remask, vec![true, false, true, false]);
}

#[test]
fn eos_postprocessing() {
    assert_eq!(postprocess_eos(&[2, 3], 0), vec![2, 3]);
    assert_eq!(postprocess_eos(&[2, 3, 0, 4], 0), vec![2, 3]);
    assert_eq!(postprocess_eos(&[0, 4], 0), Vec::<u32>::new());
}

fn reference_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

#[test]
fn guidance_combination() {
    let out = cfg_combine(&[0.0, 1.0], &[0.0, 0.0], 1.0, 2).unwrap();
    let expected = reference_softmax(&[0.0, 2.0]);
    assert!((out[0] - expected[0]).abs() < 1e-15 && (out[1] - expected[1]).abs() < 1e-15);
    let cond = [-1.2, -0.3, -2.5, -0.9, -0.1, -4.0];
    let uncond = [-0.7, -1.1, -0.2, -3.0, -0.5, -0.6];
    let plain = cfg_combine(&cond, &uncond, 0.0, 3).unwrap();
    let reference: Vec<f64> = cond.chunks(3).flat_map(reference_softmax).collect();
    assert_eq!(plain, reference);
    for w in [0.5, 1.0, 1.5, 2.0] {
        let out = cfg_combine(&cond, &uncond, w, 3).unwrap();
        for row in out.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert!(matches!(cfg_combine(&cond, &uncond[..3], 1.0, 3), Err(Error::Tensor(_))));
}

#[test]
fn zero_guidance_matches_unguided_sampling() {
    let model = random_model(6);
    let base = SamplerConfig::diffusion(6, 3);
    let guided = SamplerConfig { cfg_scale: 0.0, ..base.clone() };
    let a = generate(&model, &[2, 3, 1], &base, &mut seeded(1)).unwrap();
    let b = generate(&model, &[2, 3, 1], &guided, &mut seeded(1)).unwrap();
    assert_eq!(a, b);
    let strong = SamplerConfig { cfg_scale: 1.5, ..base };
    let c = generate(&model, &[2, 3, 1], &strong, &mut seeded(1)).unwrap();
    assert_eq!(c.forward_passes, 2 * a.forward_passes);
}

#[test]
fn semi_ar_with_one_block_equals_diffusion() {
    let model = random_model(7);
    for (i, p) in prompts(10).iter().enumerate() {
        let cfg = SamplerConfig::diffusion(8, 4);
        let a = generate_diffusion(&model, p, &cfg, &mut substream(9, i as u64)).unwrap();
        let b = generate(&model, p, &cfg.clone().with_mode(Mode::SemiAr { block_len: 8 }), &mut substream(9, i as u64)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn block_of_one_equals_autoregressive() {
    let model = random_model(8);
    for (i, p) in prompts(10).iter().enumerate() {
        let cfg = SamplerConfig::diffusion(6, 6);
        let a = generate(&model, p, &cfg.clone().with_mode(Mode::Block { block_len: 1 }), &mut substream(1, i as u64)).unwrap();
        let b = generate_autoregressive(&model, p, cfg.max_blocks, &cfg, &mut substream(1, i as u64)).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.truncated, b.truncated);
    }
}

#[test]
fn semi_ar_trace_has_two_monotone_groups() {
    let model = random_model(10);
    let cfg = SamplerConfig::diffusion(8, 8).with_mode(Mode::SemiAr { block_len: 4 });
    let out = generate(&model, &[2], &cfg, &mut seeded(2)).unwrap();
    assert_eq!(out.raw.len(), 8);
    assert_eq!(out.trace.records.len(), 8);
    let blocks: Vec<usize> = out.trace.records.iter().map(|r| r.block).collect();
    assert_eq!(blocks, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    for b in 0..2 {
        let steps: Vec<usize> = out.trace.records.iter().filter(|r| r.block == b).map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] <= w[1]));
        assert!(out.trace.records.iter().filter(|r| r.block == b).all(|r| r.position / 4 == b));
    }
    let bad = SamplerConfig::diffusion(8, 8).with_mode(Mode::SemiAr { block_len: 3 });
    assert!(matches!(generate(&model, &[2], &bad, &mut seeded(2)), Err(Error::Config(_))));
}

#[test]
fn block_mode_stops_after_eos_block() {
    let pred = Scripted { prompt_len: 1, script: vec![5, 6, 7, 0, 8, 9, 10, 11] };
    let cfg = SamplerConfig::diffusion(4, 4).with_mode(Mode::Block { block_len: 2 });
    let out = generate(&pred, &[3], &cfg, &mut seeded(0)).unwrap();
    assert_eq!(out.raw, vec![5, 6, 7, 0]);
    assert_eq!(out.tokens, vec![5, 6, 7]);
    assert!(!out.truncated);
    let blocks: Vec<usize> = out.trace.records.iter().map(|r| r.block).collect();
    assert_eq!(blocks.iter().max(), Some(&1));

    let endless = Scripted { prompt_len: 1, script: vec![5; 64] };
    let capped = SamplerConfig { max_blocks: 3, ..cfg };
    let out = generate(&endless, &[3], &capped, &mut seeded(0)).unwrap();
    assert_eq!(out.raw.len(), 6);
    assert!(out.truncated);
}

#[test]
fn autoregressive_stops_on_eos() {
    let pred = Scripted { prompt_len: 2, script: vec![0, 5, 6] };
    let cfg = SamplerConfig::diffusion(3, 3);
    let out = generate_autoregressive(&pred, &[3, 4], 3, &cfg, &mut seeded(0)).unwrap();
    assert!(out.tokens.is_empty());
    assert_eq!(out.forward_passes, 1);
    let pred = Scripted { prompt_len: 2, script: vec![7, 5, 6, 8] };
    let out = generate_autoregressive(&pred, &[3, 4], 3, &cfg, &mut seeded(0)).unwrap();
    assert_eq!(out.tokens, vec![7, 5, 6]);
    assert!(out.truncated);
}

#[test]
fn causal_model_decodes_autoregressively_only() {
    let model = random_causal_model(11);
    let cfg = SamplerConfig::diffusion(4, 4);
    assert!(matches!(generate(&model, &[1], &cfg, &mut seeded(0)), Err(Error::Config(_))));
    let out = generate_autoregressive(&model, &[], 4, &cfg, &mut seeded(0)).unwrap();
    assert!(out.raw.len() <= 4);
    let first = model.predict(&[TINY_SPECIAL.eos]).unwrap().argmax(0);
    assert_eq!(out.raw[0], first);
}

#[test]
fn invalid_inputs() {
    let model = random_model(12);
    let cfg = SamplerConfig::diffusion(4, 4);
    assert!(matches!(generate(&model, &[TINY_SPECIAL.mask], &cfg, &mut seeded(0)), Err(Error::Precondition(_))));
    let long = vec![1u32; 30];
    assert!(matches!(generate(&model, &long, &cfg, &mut seeded(0)), Err(Error::Length { .. })));
    let zero = SamplerConfig::diffusion(4, 0);
    assert!(matches!(generate(&model, &[1], &zero, &mut seeded(0)), Err(Error::Config(_))));
    let over = SamplerConfig::diffusion(4, 5);
    assert!(matches!(generate(&model, &[1], &over, &mut seeded(0)), Err(Error::Config(_))));
}

#[test]
fn trace_serialisation() {
    let model = random_model(13);
    let out = generate(&model, &[2], &SamplerConfig::diffusion(3, 3), &mut seeded(0)).unwrap();
    let tsv = out.trace.to_tsv(|t| format!("<{t}>"));
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, r) in lines.iter().zip(&out.trace.records) {
        assert_eq!(*line, format!("{}\t{}\t{}\t<{}>", r.step, r.position, r.token, r.token));
    }
}

#[test]
fn infill_fills_only_masks() {
    let model = random_model(14);
    let m = TINY_SPECIAL.mask;
    let seq = vec![m, 2, m, 3];
    let out = infill(&model, &seq, &SamplerConfig::diffusion(2, 2), &mut seeded(0)).unwrap();
    assert_eq!(out.raw.len(), 2);
    assert!(out.raw.iter().all(|&t| t != m));
    assert!(infill(&model, &[2, 3], &SamplerConfig::diffusion(1, 1), &mut seeded(0)).is_err());
}

#[test]
fn oracle_sampling_recovers_the_data_distribution() {
    let oracle = ExactConditional::random(3, 3, &mut seeded(15));
    let cfg = SamplerConfig { temperature: 1.0, ..SamplerConfig::diffusion(3, 3).with_strategy(Strategy::RandomCount) };
    let n = 40_000;
    let mut counts = vec![0usize; oracle.probs.len()];
    let mut rng = seeded(16);
    for _ in 0..n {
        let out = generate(&oracle, &[], &cfg, &mut rng).unwrap();
        assert_eq!(out.trace.per_step_counts(0), vec![1, 1, 1]);
        counts[oracle.index_of(&out.raw)] += 1;
    }
    let tv: f64 = counts.iter().zip(&oracle.probs).map(|(&c, &p)| (c as f64 / n as f64 - p).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.03, "total variation {tv}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sampling_is_deterministic_and_traces_are_complete(
        seed in 0u64..1000,
        len in 1usize..8,
        steps_frac in 0.0f64..1.0,
        strat in 0usize..3,
        temp in prop::sample::select(vec![0.0, 1.0]),
    ) {
        let model = random_model(seed % 7);
        let steps = 1 + ((len - 1) as f64 * steps_frac) as usize;
        let strategy = [Strategy::Random, Strategy::RandomCount, Strategy::LowConfidence][strat];
        let cfg = SamplerConfig { temperature: temp, ..SamplerConfig::diffusion(len, steps).with_strategy(strategy) };
        let a = generate(&model, &[2, 3], &cfg, &mut seeded(seed)).unwrap();
        let b = generate(&model, &[2, 3], &cfg, &mut seeded(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        let mut positions: Vec<usize> = a.trace.records.iter().map(|r| r.position).collect();
        positions.sort();
        prop_assert_eq!(positions, (0..len).collect::<Vec<_>>());
        prop_assert!(a.raw.iter().all(|&t| t != TINY_SPECIAL.mask));
        prop_assert!(a.forward_passes <= steps);
    }
}
