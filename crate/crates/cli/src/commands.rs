//! The six batch commands. Every artifact is plain text (or the weight
//! container), written without timestamps so identical inputs and seeds
//! reproduce byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use neuroscope_core::{
    classify, delta_ppl, detect_language_neurons, importance, neuron_fraction, random_control,
    sample_random_neurons, select_strategy, shared_ratio, train_masked, write_model,
    Criterion, Error as CoreError, GradientMask, ImportanceReport, LanguageCorpus,
    LanguageImportance, LanguageNeuronProfile, NeuronSet, RandomControl, Strategy,
};

use crate::config::{Resolved, StrategyArg};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PRECONDITION: u8 = 3;
pub const EXIT_UNDEFINED: u8 = 4;

/// Command failure, split by exit-code category.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or flags (exit 2).
    Config(String),
    /// A library precondition rejected the run (exit 3).
    Run(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Run(_) => EXIT_PRECONDITION,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Run(e) => write!(f, "precondition failed: {e}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Run(e)
    }
}

type CmdResult = Result<u8, CliError>;

// ---------------------------------------------------------------------------
// small kv-file helpers
// ---------------------------------------------------------------------------

fn write_kv(path: &Path, title: &str, pairs: &[(String, String)]) -> Result<(), CliError> {
    let mut text = format!("# {title}\n");
    for (k, v) in pairs {
        let _ = writeln!(text, "{k} = {v}");
    }
    fs::write(path, text).map_err(|e| CliError::Run(e.into()))
}

fn read_kv(path: &Path) -> Option<Vec<(String, String)>> {
    let text = fs::read_to_string(path).ok()?;
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once(" = ") {
            pairs.push((k.to_string(), v.to_string()));
        }
    }
    Some(pairs)
}

fn kv_get<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "undefined".to_string(),
    }
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Run(e.into()))
}

fn set_file(out: &Path, language: &str) -> PathBuf {
    out.join(format!("neurons.{language}.txt"))
}

// ---------------------------------------------------------------------------
// shared pipeline stages
// ---------------------------------------------------------------------------

fn detect_all(r: &Resolved) -> Result<BTreeMap<String, NeuronSet>, CliError> {
    detect_on(r, &r.languages)
}

fn detect_on(
    r: &Resolved,
    corpora: &BTreeMap<String, LanguageCorpus>,
) -> Result<BTreeMap<String, NeuronSet>, CliError> {
    let mut sets = BTreeMap::new();
    for (lang, corpus) in corpora {
        let set = detect_language_neurons(&r.model, corpus, &r.detection)?;
        sets.insert(lang.clone(), set);
    }
    Ok(sets)
}

fn write_sets(r: &Resolved, sets: &BTreeMap<String, NeuronSet>) -> Result<(), CliError> {
    for (lang, set) in sets {
        set.write_file(set_file(&r.out_dir, lang), &r.model.config)?;
    }
    Ok(())
}

fn profile_pairs(r: &Resolved, profile: &LanguageNeuronProfile) -> Vec<(String, String)> {
    let config = &r.model.config;
    let mut pairs = vec![
        ("global_seed".to_string(), r.seed.to_string()),
        ("model.config_hash".to_string(), config.hash()),
        (
            "mode".to_string(),
            match profile.mode {
                neuroscope_core::ClassifyMode::SetDifference => "eq3".to_string(),
                neuroscope_core::ClassifyMode::StrictUnique => "unique".to_string(),
            },
        ),
    ];
    for (lang, set) in &profile.languages {
        pairs.push((format!("language.{lang}.set_size"), set.len().to_string()));
        pairs.push((
            format!("language.{lang}.fraction"),
            neuron_fraction(set, config).to_string(),
        ));
        let excl = &profile.exclusive[lang];
        pairs.push((
            format!("language.{lang}.exclusive_size"),
            excl.len().to_string(),
        ));
        pairs.push((
            format!("language.{lang}.exclusive_fraction"),
            neuron_fraction(excl, config).to_string(),
        ));
    }
    pairs.push(("shared.size".to_string(), profile.shared.len().to_string()));
    pairs.push((
        "shared.fraction".to_string(),
        neuron_fraction(&profile.shared, config).to_string(),
    ));
    pairs.push((
        "shared_ratio".to_string(),
        fmt_opt(shared_ratio(profile)),
    ));
    pairs
}

/// Detection + evaluation corpora for scoring: identical by default, split
/// into train/holdout when the config asks for held-out deltas.
fn score_corpora(
    r: &Resolved,
) -> (
    BTreeMap<String, LanguageCorpus>,
    BTreeMap<String, LanguageCorpus>,
) {
    if !r.score_holdout {
        return (r.languages.clone(), r.languages.clone());
    }
    let mut detect = BTreeMap::new();
    let mut eval = BTreeMap::new();
    for (lang, corpus) in &r.languages {
        let (train, held) = corpus.split_holdout(r.holdout_fraction);
        let held = if held.is_empty() {
            train.clone()
        } else {
            held
        };
        detect.insert(lang.clone(), train);
        eval.insert(lang.clone(), held);
    }
    (detect, eval)
}

struct ScoreOutcome {
    sets: BTreeMap<String, NeuronSet>,
    profile: LanguageNeuronProfile,
    report: ImportanceReport,
}

fn compute_score(r: &Resolved) -> Result<ScoreOutcome, CliError> {
    let (detect_corpora, eval_corpora) = score_corpora(r);
    let sets = detect_on(r, &detect_corpora)?;
    let profile = classify(&sets, r.mode)?;

    // Controls draw from neurons unrelated to any analyzed language.
    let exclude = sets
        .values()
        .fold(NeuronSet::new(), |acc, s| acc.union(s));

    let mut per_language = Vec::new();
    let mut imps = BTreeMap::new();
    let mut random_controls = Vec::new();
    for (lang, eval_corpus) in &eval_corpora {
        let n_shared = profile.shared.len();
        let excl = &profile.exclusive[lang];
        let n_excl = excl.len();
        let dppl_shared = delta_ppl(&r.model, eval_corpus, &profile.shared)?;
        let dppl_excl = delta_ppl(&r.model, eval_corpus, excl)?;
        let imp = if n_shared > 0 && n_excl > 0 {
            importance(dppl_shared, n_shared, dppl_excl, n_excl)?
        } else {
            None
        };
        imps.insert(lang.clone(), imp);
        per_language.push(LanguageImportance {
            language: lang.clone(),
            dppl_shared,
            dppl_exclusive: dppl_excl,
            n_shared,
            n_exclusive: n_excl,
            imp,
        });

        for (matched, size) in [("shared", n_shared), ("exclusive", n_excl)] {
            if size == 0 {
                continue;
            }
            for s in 0..r.control_seeds {
                let seed = r.seed.wrapping_add(s as u64);
                let dppl = random_control(&r.model, eval_corpus, size, seed, &exclude)?;
                random_controls.push(RandomControl {
                    language: lang.clone(),
                    matched: matched.to_string(),
                    size,
                    seed,
                    dppl,
                });
            }
        }
    }
    let score = neuroscope_core::agnostic_score(&imps);
    let report = ImportanceReport {
        per_language,
        agnostic_score: score,
        random_controls,
    };
    report.verify_self_consistency()?;
    Ok(ScoreOutcome {
        sets,
        profile,
        report,
    })
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

pub fn cmd_detect(r: &Resolved) -> CmdResult {
    ensure_out_dir(&r.out_dir)?;
    let sets = detect_all(r)?;
    write_sets(r, &sets)?;

    let mut pairs = vec![
        ("global_seed".to_string(), r.seed.to_string()),
        ("model".to_string(), r.model_desc.clone()),
        ("model.config_hash".to_string(), r.model.config.hash()),
        (
            "detection.criterion".to_string(),
            match r.detection.criterion {
                Criterion::RankTopQ(q) => format!("topq:{q}"),
                Criterion::AbsoluteSigma(s) => format!("sigma:{s}"),
            },
        ),
        ("detection.tau".to_string(), r.detection.tau.to_string()),
        (
            "detection.scope".to_string(),
            match r.detection.scope {
                neuroscope_core::Scope::LayerLocal => "layer".to_string(),
                neuroscope_core::Scope::FinalOutput => "final".to_string(),
            },
        ),
    ];
    for (lang, corpus) in &r.languages {
        pairs.push((
            format!("corpus.{lang}.seed"),
            r.corpus_seeds[lang].to_string(),
        ));
        pairs.push((
            format!("corpus.{lang}.sentences"),
            corpus.len().to_string(),
        ));
        pairs.push((
            format!("corpus.{lang}.shortfall"),
            corpus.shortfall.to_string(),
        ));
        let set = &sets[lang];
        pairs.push((format!("neurons.{lang}.count"), set.len().to_string()));
        pairs.push((
            format!("neurons.{lang}.fraction"),
            neuron_fraction(set, &r.model.config).to_string(),
        ));
    }
    if matches!(r.detection.criterion, Criterion::RankTopQ(q) if q == 0.0) {
        pairs.push((
            "note".to_string(),
            "criterion selects nothing (q = 0); all sets are empty".to_string(),
        ));
    }
    write_kv(
        &r.out_dir.join("detect_summary.txt"),
        "neuroscope detect summary",
        &pairs,
    )?;
    println!("detect: wrote {} set file(s) to {}", sets.len(), r.out_dir.display());
    Ok(EXIT_OK)
}

pub fn cmd_classify(r: &Resolved) -> CmdResult {
    ensure_out_dir(&r.out_dir)?;
    let mut sets = BTreeMap::new();
    for lang in r.languages.keys() {
        let path = set_file(&r.out_dir, lang);
        let set = NeuronSet::read_file(&path, Some(&r.model.config))?;
        sets.insert(lang.clone(), set);
    }
    let profile = classify(&sets, r.mode)?;
    let pairs = profile_pairs(r, &profile);
    write_kv(&r.out_dir.join("profile.txt"), "neuroscope profile", &pairs)?;
    let ratio = shared_ratio(&profile);
    println!(
        "classify: shared {} of {} language sets, ratio {}",
        profile.shared.len(),
        profile.languages.len(),
        fmt_opt(ratio)
    );
    Ok(if ratio.is_none() {
        EXIT_UNDEFINED
    } else {
        EXIT_OK
    })
}

pub fn cmd_ablate(r: &Resolved, set_path: &Path, language: &str) -> CmdResult {
    ensure_out_dir(&r.out_dir)?;
    let corpus = r.languages.get(language).ok_or_else(|| {
        CliError::Config(format!("language {language:?} is not in the config"))
    })?;
    let set = NeuronSet::read_file(set_path, Some(&r.model.config))?;
    let mask = neuroscope_core::AblationMask::from_set(&set, &r.model.config)?;
    let base = r.model.perplexity(corpus, None)?;
    let ablated = r.model.perplexity(corpus, Some(&mask))?;
    let pairs = vec![
        ("global_seed".to_string(), r.seed.to_string()),
        ("model.config_hash".to_string(), r.model.config.hash()),
        ("language".to_string(), language.to_string()),
        ("set_file".to_string(), set_path.display().to_string()),
        ("set_size".to_string(), set.len().to_string()),
        ("ppl_base".to_string(), base.to_string()),
        ("ppl_ablated".to_string(), ablated.to_string()),
        ("dppl".to_string(), (ablated - base).to_string()),
    ];
    write_kv(
        &r.out_dir.join(format!("ablate.{language}.txt")),
        "neuroscope ablation",
        &pairs,
    )?;
    println!(
        "ablate: {language} ppl {base} -> {ablated} (delta {})",
        ablated - base
    );
    Ok(EXIT_OK)
}

pub fn cmd_score(r: &Resolved) -> CmdResult {
    ensure_out_dir(&r.out_dir)?;
    let outcome = compute_score(r)?;
    write_sets(r, &outcome.sets)?;
    write_kv(
        &r.out_dir.join("profile.txt"),
        "neuroscope profile",
        &profile_pairs(r, &outcome.profile),
    )?;

    // machine-readable report, context in comments so the parser skips it
    let mut kv_text = String::new();
    let _ = writeln!(kv_text, "# neuroscope score report");
    let _ = writeln!(kv_text, "# global_seed = {}", r.seed);
    let _ = writeln!(kv_text, "# model = {}", r.model_desc);
    let _ = writeln!(kv_text, "# model.config_hash = {}", r.model.config.hash());
    let _ = writeln!(kv_text, "# control_seeds = {}", r.control_seeds);
    let _ = writeln!(kv_text, "# holdout = {}", r.score_holdout);
    kv_text.push_str(&outcome.report.to_kv());
    fs::write(r.out_dir.join("score.kv"), &kv_text).map_err(|e| CliError::Run(e.into()))?;

    // human-readable summary
    let mut text = String::new();
    let _ = writeln!(text, "ablation importance");
    let _ = writeln!(
        text,
        "{:<10} {:>8} {:>8} {:>14} {:>14} {:>12}",
        "language", "|shared|", "|excl|", "dppl_shared", "dppl_excl", "imp"
    );
    for lang in &outcome.report.per_language {
        let _ = writeln!(
            text,
            "{:<10} {:>8} {:>8} {:>14.6} {:>14.6} {:>12}",
            lang.language,
            lang.n_shared,
            lang.n_exclusive,
            lang.dppl_shared,
            lang.dppl_exclusive,
            match lang.imp {
                Some(v) => format!("{v:.6}"),
                None => "undefined".to_string(),
            }
        );
    }
    let _ = writeln!(
        text,
        "agnostic_score = {}",
        fmt_opt(outcome.report.agnostic_score)
    );
    for ((language, matched), median) in outcome.report.control_medians() {
        let _ = writeln!(text, "random median ({language}, {matched}) = {median:.6}");
    }
    fs::write(r.out_dir.join("score.txt"), &text).map_err(|e| CliError::Run(e.into()))?;
    print!("{text}");

    let undefined = outcome.report.agnostic_score.is_none()
        || outcome.report.per_language.iter().any(|l| l.imp.is_none());
    Ok(if undefined { EXIT_UNDEFINED } else { EXIT_OK })
}

pub fn cmd_train(r: &Resolved) -> CmdResult {
    ensure_out_dir(&r.out_dir)?;

    // per-language holdout slices for before/after perplexity
    let mut train_slices = Vec::new();
    let mut holdouts = BTreeMap::new();
    for (lang, corpus) in &r.languages {
        let (train, held) = corpus.split_holdout(r.holdout_fraction);
        let held = if held.is_empty() {
            corpus.clone()
        } else {
            held
        };
        holdouts.insert(lang.clone(), held);
        train_slices.push(train);
    }
    let combined = LanguageCorpus {
        language: "combined".to_string(),
        sentences: train_slices
            .iter()
            .flat_map(|c| c.sentences.iter().cloned())
            .collect(),
        source: "combined training slices".to_string(),
        sample_seed: r.seed,
        shortfall: false,
    };

    // resolve the strategy and the neuron set it trains
    let mut score_line = "not computed".to_string();
    let (strategy, strategy_source, set) = match r.strategy {
        StrategyArg::Auto => {
            let outcome = compute_score(r)?;
            let score = match outcome.report.agnostic_score {
                Some(s) => s,
                None => {
                    eprintln!("cannot choose a strategy: agnostic score is undefined");
                    return Ok(EXIT_UNDEFINED);
                }
            };
            score_line = score.to_string();
            let strategy = select_strategy(score, &r.train.thresholds);
            let set = strategy_set(&outcome.profile, strategy, r)?;
            (strategy, "auto", set)
        }
        StrategyArg::Explicit(strategy @ Strategy::Random(_)) => {
            let set = strategy_set_random(strategy, r)?;
            (strategy, "explicit", set)
        }
        StrategyArg::Explicit(strategy) => {
            let sets = detect_all(r)?;
            let profile = classify(&sets, r.mode)?;
            let set = strategy_set(&profile, strategy, r)?;
            (strategy, "explicit", set)
        }
    };

    let mask = GradientMask::from_set(&set, &r.model.config)?;
    let mut pre_ppl = BTreeMap::new();
    for (lang, held) in &holdouts {
        pre_ppl.insert(lang.clone(), r.model.perplexity(held, None)?);
    }

    let mut cfg = r.train;
    cfg.strategy = strategy;
    let (trained, trace) = train_masked(&r.model, &combined, &mask, &cfg)?;

    // built-in post-check: parameters outside the mask must be untouched
    let mut frozen_moved = 0usize;
    for ((before, after), flags) in r
        .model
        .param_slices()
        .iter()
        .zip(trained.param_slices())
        .zip(mask.flags())
    {
        for ((&b, &a), &on) in before.iter().zip(after.iter()).zip(flags) {
            if !on && a.to_bits() != b.to_bits() {
                frozen_moved += 1;
            }
        }
    }

    write_model(r.out_dir.join("model_trained.nscp"), &trained)?;
    let mut trace_text = String::new();
    for (step, loss) in trace.losses.iter().enumerate() {
        let _ = writeln!(trace_text, "{step} {loss}");
    }
    fs::write(r.out_dir.join("loss_trace.txt"), &trace_text)
        .map_err(|e| CliError::Run(e.into()))?;

    let mut pairs = vec![
        ("global_seed".to_string(), r.seed.to_string()),
        ("model".to_string(), r.model_desc.clone()),
        ("model.config_hash".to_string(), r.model.config.hash()),
        ("strategy".to_string(), strategy.to_string()),
        ("strategy_source".to_string(), strategy_source.to_string()),
        ("agnostic_score".to_string(), score_line),
        ("set_size".to_string(), set.len().to_string()),
        (
            "trainable_params".to_string(),
            mask.trainable_count().to_string(),
        ),
        ("train.seed".to_string(), cfg.seed.to_string()),
        ("train.steps".to_string(), cfg.steps.to_string()),
        (
            "train.learning_rate".to_string(),
            cfg.learning_rate.to_string(),
        ),
        ("train.batch_size".to_string(), cfg.batch_size.to_string()),
        (
            "train.final_loss".to_string(),
            trace.losses.last().copied().unwrap_or(f64::NAN).to_string(),
        ),
        ("train.final_ppl".to_string(), trace.final_ppl.to_string()),
        (
            "mask_soundness".to_string(),
            if frozen_moved == 0 {
                "pass".to_string()
            } else {
                format!("FAIL ({frozen_moved} frozen parameters moved)")
            },
        ),
    ];
    for (lang, before) in &pre_ppl {
        let after = trained.perplexity(&holdouts[lang], None)?;
        pairs.push((format!("ppl.{lang}.before"), before.to_string()));
        pairs.push((format!("ppl.{lang}.after"), after.to_string()));
        pairs.push((format!("ppl.{lang}.improved"), (after < *before).to_string()));
    }
    write_kv(
        &r.out_dir.join("train_summary.txt"),
        "neuroscope train summary",
        &pairs,
    )?;
    println!(
        "train: strategy {strategy}, {} neurons, {} steps; wrote {}",
        set.len(),
        cfg.steps,
        r.out_dir.join("model_trained.nscp").display()
    );
    if frozen_moved > 0 {
        eprintln!("mask soundness check failed: {frozen_moved} frozen parameters moved");
        return Err(CliError::Run(CoreError::InvalidArgument(
            "mask soundness post-check failed".into(),
        )));
    }
    Ok(EXIT_OK)
}

fn strategy_set(
    profile: &LanguageNeuronProfile,
    strategy: Strategy,
    r: &Resolved,
) -> Result<NeuronSet, CliError> {
    match strategy {
        Strategy::All => Ok(profile
            .languages
            .values()
            .fold(NeuronSet::new(), |acc, s| acc.union(s))),
        Strategy::Shared => Ok(profile.shared.clone()),
        Strategy::Exclusive => Ok(profile
            .exclusive
            .values()
            .fold(NeuronSet::new(), |acc, s| acc.union(s))),
        Strategy::Random(_) => strategy_set_random(strategy, r),
    }
}

fn strategy_set_random(strategy: Strategy, r: &Resolved) -> Result<NeuronSet, CliError> {
    match strategy {
        Strategy::Random(n) => Ok(sample_random_neurons(
            &r.model,
            n,
            r.train.seed,
            &NeuronSet::new(),
        )?),
        _ => unreachable!("only called for Random"),
    }
}

pub fn cmd_report(out_dir: &Path) -> CmdResult {
    if !out_dir.is_dir() {
        return Err(CliError::Run(CoreError::InvalidArgument(format!(
            "output dir {} does not exist",
            out_dir.display()
        ))));
    }
    let detect = read_kv(&out_dir.join("detect_summary.txt"));
    let profile = read_kv(&out_dir.join("profile.txt"));
    let score = read_kv(&out_dir.join("score.kv"));
    let train = read_kv(&out_dir.join("train_summary.txt"));
    if detect.is_none() && profile.is_none() && score.is_none() && train.is_none() {
        return Err(CliError::Run(CoreError::InvalidArgument(format!(
            "no artifacts found in {}",
            out_dir.display()
        ))));
    }

    let mut text = String::new();
    let _ = writeln!(text, "neuroscope run report");
    let _ = writeln!(text, "=====================");
    for (title, section) in [
        ("detection", &detect),
        ("classification", &profile),
        ("score", &score),
        ("training", &train),
    ] {
        let _ = writeln!(text, "\n[{title}]");
        match section {
            Some(pairs) => {
                for (k, v) in pairs {
                    let _ = writeln!(text, "  {k} = {v}");
                }
            }
            None => {
                let _ = writeln!(text, "  absent");
            }
        }
    }

    // CSV summary over whatever stages are present
    let mut langs: Vec<String> = Vec::new();
    if let Some(pairs) = &detect {
        for (k, _) in pairs {
            if let Some(rest) = k.strip_prefix("neurons.") {
                if let Some(lang) = rest.strip_suffix(".count") {
                    langs.push(lang.to_string());
                }
            }
        }
    } else if let Some(pairs) = &profile {
        for (k, _) in pairs {
            if let Some(rest) = k.strip_prefix("language.") {
                if let Some(lang) = rest.strip_suffix(".set_size") {
                    langs.push(lang.to_string());
                }
            }
        }
    }
    let mut csv = String::from(
        "language,detected,exclusive,shared,dppl_shared,dppl_exclusive,imp,ppl_before,ppl_after\n",
    );
    let lookup = |section: &Option<Vec<(String, String)>>, key: String| -> String {
        section
            .as_ref()
            .and_then(|pairs| kv_get(pairs, &key).map(str::to_string))
            .unwrap_or_else(|| "absent".to_string())
    };
    for lang in &langs {
        let _ = writeln!(
            csv,
            "{lang},{},{},{},{},{},{},{},{}",
            lookup(&detect, format!("neurons.{lang}.count")),
            lookup(&profile, format!("language.{lang}.exclusive_size")),
            lookup(&profile, "shared.size".to_string()),
            lookup(&score, format!("language.{lang}.dppl_shared")),
            lookup(&score, format!("language.{lang}.dppl_exclusive")),
            lookup(&score, format!("language.{lang}.imp")),
            lookup(&train, format!("ppl.{lang}.before")),
            lookup(&train, format!("ppl.{lang}.after")),
        );
    }

    fs::write(out_dir.join("report.txt"), &text).map_err(|e| CliError::Run(e.into()))?;
    fs::write(out_dir.join("summary.csv"), &csv).map_err(|e| CliError::Run(e.into()))?;
    print!("{text}");
    Ok(EXIT_OK)
}
