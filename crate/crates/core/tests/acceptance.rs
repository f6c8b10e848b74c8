//! The ten acceptance criteria, run in order by one test so the timing
//! criterion never shares the CPU with a training run. Each criterion
//! prints one PASS/FAIL line; the test fails if any criterion does.
//!
//! MNIST is read from `HRVQ_MNIST_DIR`, defaulting to `data/mnist` at the
//! workspace root.

use std::path::PathBuf;
use std::time::Instant;

use hrvq::bench::{self, RunResult};
use hrvq::codebook::{CodePath, IndexMap};
use hrvq::io::{load_mnist_dir, Checkpoint, Dataset, Split};
use hrvq::model::{HrvqModel, LossWeights, ModelConfig, Quantizer, TrainConfig, Trainer};
use hrvq::prior::{causality_check, prior_train, sample_codes, PriorConfig, PriorData, PriorModel, SampleRequest};
use hrvq::seeded_rng;
use hrvq::tensor::Tensor;
use rand::Rng as _;

mod common;
use common::full_loss::{full_loss_errors, routing_violations, tiny};
use common::ops::op_corpus;
use common::quant::{near_tie, oracle, random_codebook, random_vec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("HRVQ_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// Reduced-width MNIST configuration every trained criterion shares:
/// 32 hidden units, one residual block, 6000 training and 1000 held-out
/// images, 8 epochs, seed 1. The hierarchy, latent, beta, learning rate and
/// EMA decay are the standard three-layer MNIST settings.
fn desk_config() -> TrainConfig {
    let mut c = TrainConfig::mnist();
    c.model.hidden = 32;
    c.model.residual_hidden = 32;
    c.model.residual_blocks = 1;
    c.epochs = 8;
    c.seed = 1;
    c.train_limit = Some(6000);
    c.eval_limit = Some(1000);
    c
}

struct Runs {
    hier64: RunResult,
    flat64: RunResult,
    hier512: RunResult,
    flat512: RunResult,
    heldout: Dataset,
    test: Dataset,
}

fn train_runs() -> hrvq::Result<Runs> {
    let dir = mnist_dir();
    let all = load_mnist_dir(&dir, Split::Train)?;
    let test = load_mnist_dir(&dir, Split::Test)?;
    let base = desk_config();
    let (train, heldout) = base.split(&all)?;
    let data = bench::Split { train: &train, heldout: &heldout };
    let run = |label: &str, cfg: TrainConfig| {
        let r = bench::train_and_evaluate(label, cfg, data)?;
        println!(
            "  trained {label}: held-out mse {:.5}, perplexity {:?}, used {:?}, {:.0} s",
            r.heldout_mse,
            r.perplexity.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>(),
            r.used_fraction.iter().map(|u| (u * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            r.wall_ms / 1e3
        );
        Ok::<_, hrvq::Error>(r)
    };
    Ok(Runs {
        hier64: run("hierarchical 4x16x64", base.clone())?,
        flat64: run("flat 64", base.clone().flat(64))?,
        hier512: run("hierarchical 8x64x512", base.clone().hierarchy(3, 8))?,
        flat512: run("flat 512", base.clone().flat(512))?,
        heldout,
        test,
    })
}

fn residual_identity() -> Outcome {
    let t0 = Instant::now();
    let mut rng = seeded_rng(2024);
    let mut worst = 0.0f32;
    for case in 0..10_000u64 {
        let (n, m, d) = (rng.random_range(1..=4), rng.random_range(2..=8), rng.random_range(1..=16));
        let cb = random_codebook(n, m, d, case);
        let z = random_vec(d, case ^ 0xABCD);
        let q = cb.quantize(&z).unwrap();
        for j in 0..d {
            let sum: f32 = (0..n).map(|i| q.codewords[i * d + j]).sum::<f32>() + q.residual[j];
            worst = worst.max((z[j] - sum).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst < 1e-5 && secs < 10.0, format!("max |xi0 - (sum e + xin)| = {worst:e} over 10000 cases in {secs:.2} s"))
}

fn reduction_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut maps_equal = true;
    for seed in 0..5u64 {
        let cfg = ModelConfig { quantizer: Quantizer::Hierarchical, ..tiny(1, Quantizer::Flat) };
        let hier = HrvqModel::new(cfg.clone(), &mut seeded_rng(seed)).unwrap();
        let flat = HrvqModel::new(ModelConfig { quantizer: Quantizer::Flat, ..cfg }, &mut seeded_rng(seed)).unwrap();
        let x = common::full_loss::images(seed);
        let weights = LossWeights::flat(0.25);
        let a = hier.forward(&x, &weights).unwrap();
        let b = flat.forward(&x, &weights).unwrap();
        maps_equal &= a.maps == b.maps;
        worst = worst.max((a.loss.total as f64 - b.loss.total as f64).abs());
    }

    // The same through training: a one-layer hierarchy without combined
    // terms and the flat baseline step in lockstep.
    let mut data_rng = seeded_rng(77);
    let images = Tensor::from_fn([24, 1, 8, 8], |_| data_rng.random::<f32>());
    let spec = hrvq::io::DatasetSpec {
        name: "synthetic".into(),
        channels: 1,
        height: 8,
        width: 8,
        train_count: 24,
        test_count: 0,
        sources: vec![],
    };
    let data = Dataset::new(spec, images, vec![]).unwrap();
    let mut base = TrainConfig::mnist();
    base.model = tiny(1, Quantizer::Flat);
    base.dataset = "synthetic".into();
    base.batch_size = 8;
    base.holdout = 0.0;
    let mut h = base.clone().hierarchy(1, 6);
    h.combined_terms = false;
    let (mut th, mut tf) = (Trainer::new(h).unwrap(), Trainer::new(base.flat(6)).unwrap());
    for _ in 0..6 {
        let (lh, lf) = (th.step(&data).unwrap(), tf.step(&data).unwrap());
        worst = worst.max((lh.loss.total as f64 - lf.loss.total as f64).abs());
    }
    let (qh, qf) = (
        th.model.encode_codes(&data.images).unwrap(),
        tf.model.encode_codes(&data.images).unwrap(),
    );
    maps_equal &= qh == qf;
    outcome(
        maps_equal && worst <= 1e-6,
        format!("index maps identical: {maps_equal}; max loss difference {worst:e} over 5 forwards and 6 training steps"),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut rng = seeded_rng(99);
    let (mut matched, mut ties) = (0, 0);
    for case in 0..1000u64 {
        let (n, m, d) = (rng.random_range(1..=4), rng.random_range(2..=8), rng.random_range(1..=16));
        let cb = random_codebook(n, m, d, case + 50_000);
        let z = random_vec(d, case + 90_000);
        let (path, _) = oracle(&cb, &z);
        if near_tie(&cb, &path, &z) {
            ties += 1;
            continue;
        }
        let q = cb.quantize(&z).unwrap();
        if q.path.indices() == path.as_slice() && q.distance_evals == (n * m) as u64 {
            matched += 1;
        }
    }
    let compared = 1000 - ties;
    let round_trips = (0..64u64).all(|v| {
        let p = CodePath::from_composite(v, 3, 4).unwrap();
        let map = IndexMap::from_composites(1, 1, 3, 4, &[v as u32]).unwrap();
        p.composite(4) == v && map.path(0, 0) == p && map.composites() == vec![v as u32]
    });
    outcome(
        matched == compared && round_trips,
        format!("{matched}/{compared} paths match the per-layer scan ({ties} near-ties skipped); all 64 composites round-trip: {round_trips}"),
    )
}

fn gradient_correctness() -> Outcome {
    let ops = op_corpus();
    let worst_op = ops.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let mut cases = Vec::new();
    for seed in 0..3 {
        cases.push((format!("hierarchical seed {seed}"), full_loss_errors(tiny(3, Quantizer::Hierarchical), LossWeights::uniform(3, 0.25), seed)));
    }
    let unequal = LossWeights { beta0: 0.7, betas: vec![0.1, 0.4], combined: true };
    cases.push(("unequal betas".into(), full_loss_errors(tiny(2, Quantizer::Hierarchical), unequal, 7)));
    cases.push(("flat".into(), full_loss_errors(tiny(1, Quantizer::Flat), LossWeights::flat(0.25), 11)));
    let mut worst_loss = (String::new(), 0.0f64);
    for (case, errs) in &cases {
        for (name, e) in errs {
            if *e > worst_loss.1 {
                worst_loss = (format!("{case} {name}"), *e);
            }
        }
    }
    let routing = routing_violations();
    outcome(
        worst_op.1 < 1e-3 && worst_loss.1 < 1e-3 && routing.is_empty(),
        format!(
            "{} ops, worst {} {:e}; full loss worst {} {:e}; stop-gradient violations {:?}",
            ops.len(),
            worst_op.0,
            worst_op.1,
            worst_loss.0,
            worst_loss.1,
            routing
        ),
    )
}

fn search_cost(runs: &Runs) -> Outcome {
    let t0 = Instant::now();
    let samples = 10_000.min(runs.test.len());
    let models = [("hierarchical_3x8", &runs.hier512.model), ("flat_512", &runs.flat512.model)];
    let report = bench::decode_timing(&models, &runs.test.images, samples, 256, false).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (h, f) = (&report.rows[0], &report.rows[1]);
    let locations = (samples * 16 * 16) as u64;
    let counters = h.distance_evals == locations * 24 && f.distance_evals == locations * 512;
    let ratio = report.counter_ratio(1, 0).unwrap();
    let speedup = f.search_ms / h.search_ms;
    let total = f.total_ms() / h.total_ms();
    outcome(
        counters && ratio == 512.0 / 24.0 && speedup >= 2.0 && samples == 10_000 && secs < 300.0,
        format!(
            "counters {} / {} (ratio {ratio:.3}); code search {:.0} ms vs {:.0} ms = {speedup:.1}x; end to end {total:.2}x; {secs:.0} s",
            h.distance_evals, f.distance_evals, h.search_ms, f.search_ms
        ),
    )
}

fn desk_training(runs: &Runs) -> Outcome {
    let (h, f) = (runs.hier64.heldout_mse, runs.flat64.heldout_mse);
    let minutes = (runs.hier64.wall_ms + runs.flat64.wall_ms) / 6e4;
    outcome(
        h < 0.01 && h <= f && runs.hier64.epochs <= 20 && minutes < 30.0,
        format!("hierarchical {{4,16,64}} {h:.5} vs flat-64 {f:.5} after {} epochs, {minutes:.1} min", runs.hier64.epochs),
    )
}

fn layer_detail(runs: &Runs) -> Outcome {
    let model = &runs.hier64.model;
    let x = &runs.heldout.images;
    let mse: Vec<f64> = (1..=3).map(|l| bench::mse(&model.reconstruct(x, l).unwrap(), x).unwrap()).collect();
    outcome(mse[0] < mse[1] && mse[1] < mse[2], format!("MSE from layers 1, 2, 3: {:.5} < {:.5} < {:.5}", mse[0], mse[1], mse[2]))
}

fn collapse(runs: &Runs) -> Outcome {
    let used = runs.flat512.used_fraction[0];
    let ppl = runs.hier512.perplexity[0];
    let (m512, m64) = (runs.hier512.heldout_mse, runs.hier64.heldout_mse);
    let parts = [used < 0.5, ppl > 0.75 * 8.0, m512 <= m64];
    outcome(
        parts.iter().all(|&p| p),
        format!(
            "flat-512 used fraction {used:.3} (< 0.5: {}); hierarchical layer-1 perplexity {ppl:.2} (> 6: {}); MSE 512-budget {m512:.5} vs 64-budget {m64:.5} (<=: {})",
            parts[0], parts[1], parts[2]
        ),
    )
}

fn prior_sanity() -> Outcome {
    const ENTROPY: f64 = 0.5623;
    let side = 4;
    let mut rng = seeded_rng(31);
    let grids = 2500;
    let symbols = (0..grids * side * side).map(|_| rng.random_bool(0.25) as u32).collect();
    let data = PriorData::new(side, side, symbols, vec![]).unwrap();
    let (train, heldout) = data.split_holdout(0.2);
    let cfg = PriorConfig { embed: 4, hidden: 16, blocks: 2, kernel: 3, batch_size: 64, epochs: 6, ..PriorConfig::new(2, side, side) };
    let mut prior = PriorModel::new(cfg, &mut seeded_rng(32)).unwrap();
    prior_train(&mut prior, &train, &heldout, |_| Ok(())).unwrap();
    let nll = prior.nll(&heldout).unwrap();
    let rel = (nll - ENTROPY).abs() / ENTROPY;
    let violations = causality_check(&prior).unwrap().violations.len();

    let draws = 10_000 / (side * side);
    let s = sample_codes(&prior, &SampleRequest { count: draws, temperature: 1.0, seed: 33, label: None }).unwrap();
    let n = s.grids.symbols.len() as f64;
    let empirical = s.grids.symbols.iter().filter(|&&v| v == 1).count() as f64 / n;
    let learned = s.probs.chunks(2).map(|p| p[1] as f64).sum::<f64>() / n;
    let gap = (empirical - learned).abs();
    outcome(
        rel <= 0.05 && violations == 0 && gap <= 0.02,
        format!(
            "held-out NLL {nll:.4} ({:.2}% from {ENTROPY}); causality violations {violations}; symbol-1 frequency {empirical:.4} vs learned {learned:.4} over {} draws",
            rel * 100.0,
            n
        ),
    )
}

fn persistence(runs: &Runs) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");

    // A trained model survives a save and load bit for bit.
    let model_ck = runs.hier64.model.to_checkpoint(&desk_config());
    model_ck.save(&path).unwrap();
    let (loaded, _) = HrvqModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let model_bitwise = loaded.to_checkpoint(&desk_config()).to_bytes() == model_ck.to_bytes();

    // A training run interrupted mid-epoch resumes on the same curve.
    let mut cfg = desk_config();
    cfg.model.hidden = 8;
    cfg.model.residual_hidden = 8;
    cfg.batch_size = 32;
    let data = runs.heldout.take(200).unwrap();
    let mut a = Trainer::new(cfg).unwrap();
    for _ in 0..5 {
        a.step(&data).unwrap();
    }
    let path = dir.path().join("train.ckpt");
    a.to_checkpoint().save(&path).unwrap();
    let mut b = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let trainer_bitwise = b.to_checkpoint().to_bytes() == std::fs::read(&path).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let (la, lb) = (a.step(&data).unwrap(), b.step(&data).unwrap());
        worst = worst.max((la.loss.total as f64 - lb.loss.total as f64).abs());
    }
    outcome(
        model_bitwise && trainer_bitwise && worst <= 1e-6,
        format!("model round trip bitwise: {model_bitwise}; trainer round trip bitwise: {trainer_bitwise}; resumed loss gap {worst:e}"),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "residual identity", residual_identity());
    report(2, "reduction equivalence", reduction_equivalence());
    report(3, "oracle equivalence", oracle_equivalence());
    report(4, "gradient correctness", gradient_correctness());
    match train_runs() {
        Ok(runs) => {
            report(5, "search cost", search_cost(&runs));
            report(6, "desk-scale training", desk_training(&runs));
            report(7, "layer detail", layer_detail(&runs));
            report(8, "collapse", collapse(&runs));
            report(9, "prior sanity", prior_sanity());
            report(10, "persistence", persistence(&runs));
        }
        Err(e) => {
            let why = format!("MNIST unavailable at {}: {e}", mnist_dir().display());
            for (n, name) in [(5, "search cost"), (6, "desk-scale training"), (7, "layer detail"), (8, "collapse")] {
                report(n, name, outcome(false, why.clone()));
            }
            report(9, "prior sanity", prior_sanity());
            report(10, "persistence", outcome(false, why));
        }
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} {}", r.0, r.1)).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
