//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (run with `-- --nocapture` to see them).

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::*;
use neuroscope_core::testkit::{self, rel_err};
use neuroscope_core::*;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Criterion 1: the parallel impact kernels agree with the sequential
/// weight-zeroing oracle for every neuron of every site on a random toy
/// layer (1e-5 relative; 1e-6 for the FFN and value sites).
#[test]
fn c1_parallel_sequential_equivalence() {
    let start = Instant::now();
    let config = ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_inter: 32,
        vocab_size: 259,
        max_seq_len: 16,
        rms_eps: 1e-5,
    };
    let model = ModelBundle::init_random(config, 0).unwrap();
    let tokens = TokenSequence::new(vec![BOS, 97, 120, 45, 200, 13, 75, 160]);
    assert_eq!(tokens.len(), 8);
    let trace = model.forward(&tokens).unwrap();
    let impacts = trace_impacts(&model, &trace).unwrap();

    let mut worst: BTreeMap<Site, f64> = BTreeMap::new();
    for (site_idx, site) in Site::ALL.into_iter().enumerate() {
        let tol = match site {
            Site::FfnInter | Site::AttnV => 1e-6,
            _ => 1e-5,
        };
        for (flat, &parallel) in impacts[0][site_idx].iter().enumerate() {
            let id = NeuronId::from_flat(0, site, flat, &config);
            let oracle = sequential_oracle(&model, &tokens, id, Scope::LayerLocal).unwrap();
            let err = rel_err(parallel as f64, oracle as f64);
            let entry = worst.entry(site).or_insert(0.0);
            *entry = entry.max(err);
            assert!(
                err < tol,
                "{id}: parallel {parallel} vs oracle {oracle} (rel {err:.3e} > {tol:.0e})"
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "[PASS] C1 parallel-sequential equivalence: worst rel err per site {:?} in {elapsed:?}",
        worst
    );
}

/// Criterion 2: reverse-mode gradients match 64-bit central finite
/// differences at 200 sampled coordinates, relative error <= 1e-3 each.
#[test]
fn c2_gradient_correctness() {
    let start = Instant::now();
    let model = ModelBundle::init_random(toy_config(), 5).unwrap();
    let batch: Vec<TokenSequence> = synth("grad", b"defghijk", 99, 4).sentences;
    let grads = backward(&model, &batch).unwrap();
    let checks = testkit::sample_gradient_checks(&model, &grads, &batch, 200, 1e-3, 12345);
    assert_eq!(checks.len(), 200);
    let mut worst = 0.0f64;
    for check in &checks {
        let scale = check.analytic.abs().max(check.numeric.abs());
        if scale >= 1e-8 {
            worst = worst.max((check.analytic - check.numeric).abs() / scale);
        }
        assert!(
            check.within(1e-3),
            "tensor {} flat {}: analytic {} vs fd {}",
            check.tensor,
            check.flat,
            check.analytic,
            check.numeric
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "[PASS] C2 gradient correctness: 200 coordinates, worst rel err {worst:.3e} in {elapsed:?}"
    );
}

/// Criterion 3: 200 masked training steps with Shared, Exclusive, and
/// Random masks leave every unmasked parameter bitwise unchanged.
#[test]
fn c3_mask_soundness() {
    let start = Instant::now();
    let s = setup();
    let corpus = combine(&[&s.alpha, &s.beta]);
    let exclusive_union = s
        .profile
        .exclusive
        .values()
        .fold(NeuronSet::new(), |acc, v| acc.union(v));
    let random = sample_random_neurons(&s.model, exclusive_union.len(), 77, &NeuronSet::new())
        .unwrap();
    let cases = [
        ("shared", s.profile.shared.clone()),
        ("exclusive", exclusive_union),
        ("random", random),
    ];
    let cfg = TrainConfig {
        learning_rate: 0.02,
        steps: 200,
        batch_size: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    for (name, set) in &cases {
        let mask = GradientMask::from_set(set, &s.model.config).unwrap();
        let (trained, _) = train_masked(&s.model, &corpus, &mask, &cfg).unwrap();
        let mut moved = 0usize;
        for ((before, after), flags) in s
            .model
            .param_slices()
            .iter()
            .zip(trained.param_slices())
            .zip(mask.flags())
        {
            for ((&b, &a), &on) in before.iter().zip(after.iter()).zip(flags) {
                if !on {
                    assert_eq!(
                        a.to_bits(),
                        b.to_bits(),
                        "{name}: frozen parameter moved"
                    );
                } else if a != b {
                    moved += 1;
                }
            }
        }
        assert!(moved > 0, "{name}: mask updated nothing");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!("[PASS] C3 mask soundness: 3 masks x 200 steps, frozen parameters bitwise intact in {elapsed:?}");
}

/// Criterion 4: closed-form metric identities.
#[test]
fn c4_metric_identities() {
    // agnostic score at the parity point
    let imps: BTreeMap<String, Option<f64>> = [
        ("a".to_string(), Some(1.0)),
        ("b".to_string(), Some(1.0)),
        ("c".to_string(), Some(1.0)),
    ]
    .into_iter()
    .collect();
    let score = agnostic_score(&imps).unwrap();
    assert!((score - 2.0f64.ln()).abs() < 1e-9, "score {score}");

    // shared ratio on the {10; 4,6,5} example
    let shared: NeuronSet = (0..10).map(|i| NeuronId::ffn(0, i)).collect();
    let excl = |lo: usize, n: usize| -> NeuronSet {
        (lo..lo + n).map(|i| NeuronId::ffn(1, i)).collect()
    };
    let profile = LanguageNeuronProfile {
        mode: ClassifyMode::SetDifference,
        languages: BTreeMap::new(),
        shared,
        exclusive: [
            ("x".to_string(), excl(0, 4)),
            ("y".to_string(), excl(8, 6)),
            ("z".to_string(), excl(20, 5)),
        ]
        .into_iter()
        .collect(),
    };
    assert_eq!(shared_ratio(&profile), Some(2.0));

    // uniform-logit model has perplexity == vocab_size
    let config = toy_config();
    let mut model = ModelBundle::init_random(config, 1).unwrap();
    model.token_embedding = Matrix::zeros(config.vocab_size, config.d_model);
    model.position_embedding = Matrix::zeros(config.max_seq_len, config.d_model);
    let corpus = synth("u", b"qrst", 5, 5);
    let ppl = model.perplexity(&corpus, None).unwrap();
    let expected = config.vocab_size as f64;
    assert!(
        (ppl - expected).abs() / expected < 1e-3,
        "ppl {ppl} vs {expected}"
    );
    println!(
        "[PASS] C4 metric identities: ln2 score, ratio 2.0, uniform ppl {ppl:.4} ~ {expected}"
    );
}

/// Criterion 5: detection via the parallel kernels equals detection via the
/// sequential oracle on a 20-sentence synthetic corpus at q = 0.01.
#[test]
fn c5_detection_equivalence() {
    let start = Instant::now();
    let s = setup();
    let probe = synth_language(
        &SynthSpec {
            language: "probe".to_string(),
            alphabet: BETA_ALPHABET.to_vec(),
            min_len: 8,
            max_len: 16,
            seed: 56,
        },
        20,
        20,
    );
    let dc = DetectionConfig {
        criterion: Criterion::RankTopQ(0.01),
        tau: 0.5,
        scope: Scope::LayerLocal,
    };
    let parallel = detect_language_neurons(&s.model, &probe, &dc).unwrap();
    let oracle = testkit::detect_language_neurons_by_oracle(&s.model, &probe, &dc).unwrap();
    assert_eq!(parallel, oracle, "pipelines disagree");
    assert!(!parallel.is_empty(), "probe should detect something");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}");
    println!(
        "[PASS] C5 detection equivalence: both pipelines found the same {} neuron(s) in {elapsed:?}",
        parallel.len()
    );
}

/// Criterion 6: ablating a language's detected set hurts that language far
/// more than equal-size random ablations (median over 10 seeds below the
/// detected delta and below 20% of it).
#[test]
fn c6_random_deactivation_control() {
    let start = Instant::now();
    let s = setup();
    for (lang, corpus) in [("alpha", &s.alpha), ("beta", &s.beta)] {
        let set = &s.sets[lang];
        let detected = delta_ppl(&s.model, corpus, set).unwrap();
        let controls: Vec<f64> = (0..10u64)
            .map(|seed| random_control(&s.model, corpus, set.len(), seed, set).unwrap())
            .collect();
        let med = median(&controls);
        assert!(
            detected > med,
            "{lang}: detected {detected} not above random median {med}"
        );
        assert!(
            med < 0.2 * detected,
            "{lang}: random median {med} not below 20% of detected {detected}"
        );
        println!(
            "  {lang}: detected dppl {detected:.4}, random median {med:.4} ({:.1}%)",
            100.0 * med / detected
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}");
    println!("[PASS] C6 random-deactivation control in {elapsed:?}");
}

/// Criterion 7: continual training on the strategy chosen by the score
/// ladder reduces held-out perplexity on both languages, and random masks of
/// equal size improve strictly less on average over 5 seeds.
#[test]
fn c7_targeted_training_analog() {
    let start = Instant::now();
    let s = setup();
    let strategy = select_strategy(s.score, &StrategyThresholds::default());
    let strategy_set = match strategy {
        Strategy::All => s
            .sets
            .values()
            .fold(NeuronSet::new(), |acc, v| acc.union(v)),
        Strategy::Shared => s.profile.shared.clone(),
        Strategy::Exclusive => s
            .profile
            .exclusive
            .values()
            .fold(NeuronSet::new(), |acc, v| acc.union(v)),
        Strategy::Random(_) => unreachable!("ladder never yields random"),
    };

    let continual = combine(&[
        &synth("alpha", ALPHA_ALPHABET, 21, 40),
        &synth("beta", BETA_ALPHABET, 22, 40),
    ]);
    let held_alpha = synth("alpha", ALPHA_ALPHABET, 31, 20);
    let held_beta = synth("beta", BETA_ALPHABET, 32, 20);
    let before_alpha = s.model.perplexity(&held_alpha, None).unwrap();
    let before_beta = s.model.perplexity(&held_beta, None).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        steps: 200,
        batch_size: 8,
        seed: 2000,
        ..TrainConfig::default()
    };

    let run = |set: &NeuronSet| -> (f64, f64) {
        let mask = GradientMask::from_set(set, &s.model.config).unwrap();
        let (trained, _) = train_masked(&s.model, &continual, &mask, &cfg).unwrap();
        (
            trained.perplexity(&held_alpha, None).unwrap(),
            trained.perplexity(&held_beta, None).unwrap(),
        )
    };

    let (after_alpha, after_beta) = run(&strategy_set);
    assert!(
        after_alpha < before_alpha,
        "alpha held-out ppl {before_alpha} -> {after_alpha} did not improve"
    );
    assert!(
        after_beta < before_beta,
        "beta held-out ppl {before_beta} -> {after_beta} did not improve"
    );
    let strategy_gain = (before_alpha - after_alpha + before_beta - after_beta) / 2.0;

    let mut random_gains = Vec::new();
    for seed in 0..5u64 {
        let rset =
            sample_random_neurons(&s.model, strategy_set.len(), 7000 + seed, &NeuronSet::new())
                .unwrap();
        let (ra, rb) = run(&rset);
        random_gains.push((before_alpha - ra + before_beta - rb) / 2.0);
    }
    let mean_random = random_gains.iter().sum::<f64>() / random_gains.len() as f64;
    assert!(
        strategy_gain > mean_random,
        "strategy gain {strategy_gain} not above mean random gain {mean_random}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 900.0, "took {elapsed:?}");
    println!(
        "[PASS] C7 targeted-training analog: strategy {strategy} gain {strategy_gain:.4} vs mean random {mean_random:.4} \
         (alpha {before_alpha:.3}->{after_alpha:.3}, beta {before_beta:.3}->{after_beta:.3}) in {elapsed:?}"
    );
}

/// Criterion 8: classification invariants over 1000 randomly generated
/// profiles.
#[test]
fn c8_set_algebra_properties() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let config = toy_config();
    let mut checked = 0usize;
    for _ in 0..1000 {
        let n_langs = rng.random_range(2..=5);
        let mut map = BTreeMap::new();
        for i in 0..n_langs {
            let size = rng.random_range(0..30);
            let set: NeuronSet = (0..size)
                .map(|_| NeuronId::ffn(rng.random_range(0..2), rng.random_range(0..32)))
                .collect();
            map.insert(format!("lang{i}"), set);
        }
        let eq3 = classify(&map, ClassifyMode::SetDifference).unwrap();
        let strict = classify(&map, ClassifyMode::StrictUnique).unwrap();
        for (lang, set) in &map {
            // partition invariants
            assert!(eq3.exclusive[lang].intersection(&eq3.shared).is_empty());
            assert_eq!(
                eq3.exclusive[lang].union(&eq3.shared),
                set.union(&eq3.shared)
            );
            assert!(eq3.shared.is_subset(set));
            // mode containment
            assert!(strict.exclusive[lang].is_subset(&eq3.exclusive[lang]));
        }
        // adding a language can only shrink the shared set
        let extra_size = rng.random_range(0..30);
        let extra: NeuronSet = (0..extra_size)
            .map(|_| NeuronId::ffn(rng.random_range(0..2), rng.random_range(0..32)))
            .collect();
        let mut grown_map = map.clone();
        grown_map.insert("zz_extra".to_string(), extra);
        let grown = classify(&grown_map, ClassifyMode::SetDifference).unwrap();
        assert!(grown.shared.is_subset(&eq3.shared));
        // fraction sanity on the first language
        let first = map.values().next().unwrap();
        let frac = neuron_fraction(first, &config);
        assert!((0.0..=1.0).contains(&frac));
        checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!("[PASS] C8 set-algebra properties over {checked} random profiles in {elapsed:?}");
}

/// Criterion 9: the reference CLI pipeline run twice produces byte-identical
/// artifacts.
#[test]
fn c9_cli_determinism() {
    let start = Instant::now();
    let config = fixture_path("toy.toml");
    let dir = tempfile::tempdir().unwrap();

    let run_pipeline = |out: &std::path::Path| {
        for cmd in ["detect", "score", "train"] {
            let (code, _, err) = run_cli(&[
                cmd,
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(code, 0, "{cmd} failed: {err}");
        }
    };
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    run_pipeline(&out1);
    run_pipeline(&out2);

    let mut names: Vec<String> = std::fs::read_dir(&out1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in &names {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs between runs");
    }
    let elapsed = start.elapsed();
    println!(
        "[PASS] C9 determinism: {} artifacts byte-identical across two runs in {elapsed:?}",
        names.len()
    );
}
