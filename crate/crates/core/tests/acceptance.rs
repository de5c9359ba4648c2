//! Acceptance checks, one PASS/FAIL line each. Exits nonzero if any fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use maskdiff::bench::*;
use maskdiff::data::TaskKind;
use maskdiff::diffusion::{ao_arm_exact, exact_bound_l, exact_bound_t};
use maskdiff::likelihood::{estimate_cond_nll, estimate_cond_nll_time};
use maskdiff::recipes::*;
use maskdiff::rng::{seeded, substream};
use maskdiff::sampler::*;
use maskdiff::train::flops;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const COPY_PRETRAIN_ITERS: usize = 400;
const COPY_SFT_ITERS: usize = 2400;
const ARITH_PRETRAIN_ITERS: usize = 400;
const ARITH_SFT_ITERS: usize = 2400;
const ARITH_HELDOUT: usize = 400;
const REVERSAL_PAIRS: usize = 100;
const REVERSAL_MDM_ITERS: usize = 5000;
const REVERSAL_AR_ITERS: usize = 600;
const THROUGHPUT_LEN: usize = 128;
const THROUGHPUT_ITEMS: usize = 6;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_secs: u64) -> (bool, String) {
    (elapsed.as_secs_f64() < limit_secs as f64, format!("{:.1}s of {limit_secs}s", elapsed.as_secs_f64()))
}

fn bound_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(1001);
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let model = random_model(1100 + i);
        let len = rng.random_range(1..=6);
        let x0 = random_x0(len, &mut rng);
        let t = exact_bound_t(&model, &x0).unwrap();
        let l = exact_bound_l(&model, &x0).unwrap();
        worst = worst.max((t - l).abs());
    }
    let (fast, time) = within(start.elapsed(), 60);
    verdict(worst <= 1e-9 && fast, format!("max |time form - count form| = {worst:.2e}; {time}"))
}

fn ao_arm_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(1002);
    let (mut worst_eq, mut worst_jensen): (f64, f64) = (0.0, f64::INFINITY);
    for len in 2..=4 {
        for i in 0..10u64 {
            let model = random_model(1200 + 10 * len as u64 + i);
            let x0 = random_x0(len, &mut rng);
            let ao = ao_arm_exact(&model, &x0).unwrap();
            let bound = exact_bound_t(&model, &x0).unwrap();
            worst_eq = worst_eq.max((ao.expected_order_nll - bound).abs());
            worst_jensen = worst_jensen.min(ao.expected_order_nll - ao.exact_mixture_nll);
        }
    }
    let (fast, time) = within(start.elapsed(), 120);
    verdict(
        worst_eq <= 1e-9 && worst_jensen >= -1e-9 && fast,
        format!("max |order mean - bound| = {worst_eq:.2e}; min (order mean - mixture) = {worst_jensen:.3e}; {time}"),
    )
}

fn variance_ordering() -> Verdict {
    let start = Instant::now();
    let mut wins = 0;
    for i in 0..20u64 {
        let model = random_model(1300 + i);
        let mut rng = seeded(1400 + i);
        let r0 = random_x0(6, &mut rng);
        let count = estimate_cond_nll(&model, &[], &r0, 128, &mut rng).unwrap();
        let time = estimate_cond_nll_time(&model, &[], &r0, 128, &mut rng).unwrap();
        wins += (count.variance() <= time.variance()) as usize;
    }
    let (fast, time) = within(start.elapsed(), 120);
    verdict(wins >= 18 && fast, format!("count form no noisier on {wins}/20 instances; {time}"))
}

fn oracle_recovery() -> Verdict {
    let start = Instant::now();
    let oracle = ExactConditional::random(3, 3, &mut seeded(1500));
    let cfg = SamplerConfig { temperature: 1.0, ..SamplerConfig::diffusion(3, 3).with_strategy(Strategy::RandomCount) };
    let n = 100_000;
    let mut counts = vec![0usize; oracle.probs.len()];
    let mut rng = seeded(1501);
    let mut one_per_step = true;
    for _ in 0..n {
        let out = generate(&oracle, &[], &cfg, &mut rng).unwrap();
        one_per_step &= out.trace.per_step_counts(0) == [1, 1, 1];
        counts[oracle.index_of(&out.raw)] += 1;
    }
    let tv: f64 = counts.iter().zip(&oracle.probs).map(|(&c, &p)| (c as f64 / n as f64 - p).abs()).sum::<f64>() / 2.0;
    let (fast, time) = within(start.elapsed(), 300);
    verdict(tv < 0.02 && one_per_step && fast, format!("total variation {tv:.4} over {n} draws; {time}"))
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let model = random_model(1600);
    let seqs = vec![vec![1, 4, 2, 3, 4], vec![4, 4, 1], vec![2, 3]];
    let errs = gradient_check(&model, &seqs, 4, 1601);
    let (name, worst) = errs.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let (fast, time) = within(start.elapsed(), 60);
    verdict(
        worst <= 1e-4 && fast && errs.len() == model.params.len(),
        format!("{} groups, worst relative error {worst:.2e} ({name}); {time}", errs.len()),
    )
}

/// Everything criteria 6 to 9 produce; compared byte for byte on a rerun.
struct Artifacts {
    checkpoints: Vec<(String, Vec<u8>)>,
    reports: Vec<(String, String)>,
    copy_scores: Vec<(f64, f64)>,
    reversal: Vec<BenchReport>,
    reversal_secs: f64,
    remask: Vec<(f64, f64)>,
    steps: BenchReport,
}

fn produce_artifacts() -> Artifacts {
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();

    let mut copy_scores = Vec::new();
    let mut copy_runs = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        let run = train_task(&TaskRecipe::desk(TaskKind::Copy, COPY_PRETRAIN_ITERS, COPY_SFT_ITERS), seed).unwrap();
        let recipe = TaskRecipe::desk(TaskKind::Copy, COPY_PRETRAIN_ITERS, COPY_SFT_ITERS);
        let em = exact_match(&run.model, &run.vocab, &run.heldout, &recipe.eval_sampler(), seed).unwrap();
        copy_scores.push((em, start.elapsed().as_secs_f64()));
        checkpoints.push((format!("copy-{seed}"), run.checkpoint_bytes().unwrap()));
        reports.push((format!("copy-{seed}"), format!("{em:.6}\n{}", run.sft_log.to_tsv(false))));
        copy_runs.push(run);
    }

    let start = Instant::now();
    let mut reversal = Vec::new();
    for seed in SEEDS {
        let run = train_reversal(&ReversalRecipe::desk(REVERSAL_PAIRS, REVERSAL_MDM_ITERS, REVERSAL_AR_ITERS), seed).unwrap();
        let report = bench_reversal(&run.mdm, &run.ar, &run.data, &run.vocab).unwrap();
        for (tag, m) in [("mdm", &run.mdm), ("ar", &run.ar)] {
            checkpoints.push((format!("reversal-{tag}-{seed}"), maskdiff::checkpoint::checkpoint_bytes(&m.record, &m.model.params).unwrap()));
        }
        reports.push((format!("reversal-{seed}"), report.to_tsv()));
        reversal.push(report);
    }
    let reversal_secs = start.elapsed().as_secs_f64();

    let mut remask = Vec::new();
    for seed in SEEDS {
        let recipe = TaskRecipe { heldout: ARITH_HELDOUT, ..TaskRecipe::desk(TaskKind::Arithmetic, ARITH_PRETRAIN_ITERS, ARITH_SFT_ITERS) };
        let run = train_task(&recipe, seed).unwrap();
        let tasks = [TaskSet { kind: TaskKind::Arithmetic, items: run.heldout.clone() }];
        let report = bench_remasking(&run.model, &run.vocab, &tasks, &recipe.eval_sampler(), &[seed]).unwrap();
        remask.push((report.get("arithmetic/random", "exact_match").unwrap(), report.get("arithmetic/low_confidence", "exact_match").unwrap()));
        checkpoints.push((format!("arithmetic-{seed}"), run.checkpoint_bytes().unwrap()));
        reports.push((format!("remask-{seed}"), report.to_tsv()));
    }

    let copy = &copy_runs[0];
    let task = TaskSet { kind: TaskKind::Copy, items: copy.heldout[..THROUGHPUT_ITEMS].to_vec() };
    let steps = bench_steps_throughput(&copy.model, &copy.vocab, &task, &[THROUGHPUT_LEN], &SamplerConfig::diffusion(THROUGHPUT_LEN, THROUGHPUT_LEN), 0).unwrap();
    reports.push(("steps".to_string(), steps.to_tsv()));

    Artifacts { checkpoints, reports, copy_scores, reversal, reversal_secs, remask, steps }
}

fn trainability(a: &Artifacts) -> Verdict {
    let ok = a.copy_scores.iter().all(|&(em, secs)| em >= 0.9 && secs < 900.0);
    let detail: Vec<String> = a.copy_scores.iter().map(|(em, secs)| format!("{em:.2} in {secs:.0}s")).collect();
    verdict(ok, format!("copy exact match per seed: {}", detail.join(", ")))
}

fn reversal_symmetry(a: &Artifacts) -> Verdict {
    let mut good = 0;
    let mut detail = Vec::new();
    for r in &a.reversal {
        let g = |c: &str| r.get(c, "exact_match").unwrap_or(0.0);
        let (af, ar, mf, mr) = (g("ar/forward"), g("ar/reversal"), g("mdm/forward"), g("mdm/reversal"));
        let ok = af >= 0.9 && ar <= 0.2 && (mf - mr).abs() <= 0.15 && mf >= 0.5 && mr >= 0.5;
        good += ok as usize;
        detail.push(format!("ar {af:.2}/{ar:.2} mdm {mf:.2}/{mr:.2}"));
    }
    let (fast, time) = within(Duration::from_secs_f64(a.reversal_secs), 1800);
    verdict(good >= 2 && fast, format!("{good}/3 seeds (forward/reversal): {}; {time}", detail.join(", ")))
}

fn remask_ordering(a: &Artifacts) -> Verdict {
    let n = a.remask.len() as f64;
    let random = a.remask.iter().map(|r| r.0).sum::<f64>() / n;
    let low = a.remask.iter().map(|r| r.1).sum::<f64>() / n;
    verdict(low >= random, format!("arithmetic exact match: low_confidence {low:.3}, random {random:.3}"))
}

fn throughput(a: &Artifacts) -> Verdict {
    let rate = |n: usize| a.steps.timing(&format!("copy/L={THROUGHPUT_LEN}/N={n}"), "tokens_per_sec").unwrap();
    let full = rate(THROUGHPUT_LEN);
    let half = rate(THROUGHPUT_LEN / 2) / full;
    let eighth = rate(THROUGHPUT_LEN / 8) / full;
    verdict(half >= 1.5 && eighth >= 4.0, format!("speedup N=L/2 {half:.2}x, N=L/8 {eighth:.2}x ({full:.0} tokens/s at N=L)"))
}

fn determinism(first: &Artifacts, second: &Artifacts) -> Verdict {
    let mut diffs = Vec::new();
    for ((name, a), (_, b)) in first.checkpoints.iter().zip(&second.checkpoints) {
        if a != b {
            diffs.push(name.clone());
        }
    }
    for ((name, a), (_, b)) in first.reports.iter().zip(&second.reports) {
        if a != b {
            diffs.push(format!("{name} report"));
        }
    }
    let same_shape = first.checkpoints.len() == second.checkpoints.len() && first.reports.len() == second.reports.len();
    verdict(
        diffs.is_empty() && same_shape,
        format!("{} checkpoints and {} reports compared; differing: {:?}", first.checkpoints.len(), first.reports.len(), diffs),
    )
}

fn mode_coherence() -> Verdict {
    let model = random_model(1700);
    let mut rng = seeded(1701);
    let prompts: Vec<Vec<u32>> = (0..10).map(|i| random_x0(1 + i % 4, &mut rng)).collect();
    let mut semi = 0;
    let mut block = 0;
    for (i, p) in prompts.iter().enumerate() {
        let cfg = SamplerConfig::diffusion(8, 8);
        let a = generate_diffusion(&model, p, &cfg, &mut substream(1702, i as u64)).unwrap();
        let b = generate(&model, p, &cfg.clone().with_mode(Mode::SemiAr { block_len: 8 }), &mut substream(1702, i as u64)).unwrap();
        semi += (a == b) as usize;
        let c = generate(&model, p, &cfg.clone().with_mode(Mode::Block { block_len: 1 }), &mut substream(1703, i as u64)).unwrap();
        let d = generate_autoregressive(&model, p, cfg.max_blocks, &cfg, &mut substream(1703, i as u64)).unwrap();
        block += (c.raw == d.raw && c.tokens == d.tokens) as usize;
    }
    verdict(semi == 10 && block == 10, format!("semi_ar(L) = diffusion on {semi}/10, block(1) = autoregressive on {block}/10"))
}

fn flops_accounting() -> Verdict {
    let f = flops(0.97e9, 37.75e9);
    let shown = format!("{f:.2e}");
    verdict(shown == "2.20e20", format!("6 * 0.97e9 * 37.75e9 = {f:.4e} (shown as {shown})"))
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!("{} [{n:>2}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    report(1, "bound equivalence", bound_equivalence());
    report(2, "any-order equivalence and mixture bound", ao_arm_equivalence());
    report(3, "estimator variance ordering", variance_ordering());
    report(4, "oracle reverse-sampling recovery", oracle_recovery());
    report(5, "gradient correctness", gradient_correctness());
    let first = produce_artifacts();
    report(6, "end-to-end trainability", trainability(&first));
    report(7, "reversal symmetry", reversal_symmetry(&first));
    report(8, "remasking ablation", remask_ordering(&first));
    report(9, "throughput trade-off", throughput(&first));
    let second = produce_artifacts();
    report(10, "determinism", determinism(&first, &second));
    report(11, "sampling-mode coherence", mode_coherence());
    report(12, "flops accounting", flops_accounting());

    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
