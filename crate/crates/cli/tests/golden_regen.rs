//! Regenerates the checked-in fixtures and goldens. Run explicitly after a
//! deliberate change to the reference setup:
//!
//! ```text
//! cargo test -p neuroscope-cli --test golden_regen -- --ignored --nocapture
//! ```
//!
//! The detection goldens come from the brute-force oracle pipeline, not from
//! the CLI: the CLI's parallel path has to reproduce them byte for byte.
//! Score and report goldens are captured from a reference CLI run.

mod common;

use common::*;
use neuroscope_core::{testkit, write_model};
use std::fs;

#[test]
#[ignore]
fn regen_fixtures_and_goldens() {
    fs::create_dir_all(fixture_path("")).unwrap();
    fs::create_dir_all(golden_path("")).unwrap();

    // 1. the pretrained checkpoint the bundled config loads
    let model = build_checkpoint();
    write_model(fixture_path("model.nscp"), &model).unwrap();
    println!("wrote {}", fixture_path("model.nscp").display());

    // 2. detection goldens via the sequential-oracle pipeline
    let dc = bundled_detection();
    for (lang, seed) in [("alpha", 11u64), ("beta", 12u64)] {
        let alphabet = if lang == "alpha" {
            ALPHA_ALPHABET
        } else {
            BETA_ALPHABET
        };
        let corpus = synth(lang, alphabet, seed, 20);
        let set = testkit::detect_language_neurons_by_oracle(&model, &corpus, &dc).unwrap();
        let path = golden_path(&format!("neurons.{lang}.txt"));
        set.write_file(&path, &model.config).unwrap();
        println!("wrote {} ({} neurons)", path.display(), set.len());
    }

    // 3. score + report goldens from a reference CLI run
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = fixture_path("toy.toml");
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
    let (code, _, err) = run_cli(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "report failed: {err}");

    for name in ["score.kv", "report.txt"] {
        fs::copy(out.join(name), golden_path(name)).unwrap();
        println!("wrote {}", golden_path(name).display());
    }
}
