//! Command-line front end: `gradcheck`, `lemma`, `train` and `ablate`.
//!
//! Exit codes: 0 success, 1 check failure or runtime error, 2 usage or
//! configuration error. Every invocation that gets past argument parsing
//! writes `manifest.json` into the output directory.

pub mod config;
pub mod csv;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::experiment::{
    run_ablation_suite, train_seed_with, Ablation, AblationSuite, ExperimentConfig,
};
use crate::gradients::gradcheck_suite;
use crate::lemma::{build_balanced_support, find_cycle, LemmaInstance};
use crate::metrics::{MetricsRecord, LOG_COLUMNS};
use config::KeyValues;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Largest accepted relative gradient error.
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "moelab",
    version,
    about = "Mixture-of-Experts balance-loss lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Build a balanced support, perturb it along a cycle and certify it.
    Lemma(LemmaArgs),
    /// Train one preset for every configured seed and write CSV logs.
    Train(RunArgs),
    /// Train all five presets and write per-run logs plus summary.csv.
    Ablate(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Flat key = value file; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(
        long,
        value_name = "PATH",
        env = "MOELAB_OUTDIR",
        default_value = "moelab-out"
    )]
    pub outdir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Seed of the first instance.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Finite-difference step.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct LemmaArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Rows (tokens).
    #[arg(long = "N")]
    pub tokens: Option<usize>,
    /// Columns (experts).
    #[arg(long = "n")]
    pub experts: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Write every Nth step to the CSV logs.
    #[arg(long, value_name = "N")]
    pub log_every: Option<usize>,
    /// Preset for `train` (ignored by `ablate`).
    #[arg(long)]
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub outdir: PathBuf,
    pub version: String,
    pub duration_secs: f64,
    pub exit_code: i32,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Human-readable output goes to `out`, errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let start = Instant::now();
    let (name, outdir) = match &cli.command {
        Command::Gradcheck(a) => ("gradcheck", a.common.outdir.clone()),
        Command::Lemma(a) => ("lemma", a.common.outdir.clone()),
        Command::Train(a) => ("train", a.common.outdir.clone()),
        Command::Ablate(a) => ("ablate", a.common.outdir.clone()),
    };
    let result = match &cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Lemma(a) => cmd_lemma(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
    };
    let (code, config) = match result {
        Ok(outcome) => (outcome.code, outcome.config),
        Err(e) => {
            eprintln!("error: {e}");
            (exit_code_for(&e), serde_json::Value::Null)
        }
    };
    let manifest = RunManifest {
        command: name.to_string(),
        config,
        outdir: outdir.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: start.elapsed().as_secs_f64(),
        exit_code: code,
    };
    if let Err(e) = write_manifest(&outdir, &manifest) {
        eprintln!("error: writing manifest: {e}");
        return code.max(EXIT_FAILURE);
    }
    code
}

pub fn exit_code_for(err: &LabError) -> i32 {
    match err {
        LabError::Config(_)
        | LabError::InvalidArgument(_)
        | LabError::Unknown { .. }
        | LabError::Shape(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

struct Outcome {
    code: i32,
    config: serde_json::Value,
}

fn write_manifest(outdir: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(outdir)?;
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| LabError::Config(e.to_string()))?;
    std::fs::write(outdir.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::load(p),
        None => Ok(KeyValues::default()),
    }
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<Outcome> {
    let mut kv = load_config(args.common.config.as_deref())?;
    let seed = args.seed.or(kv.take("seed")?).unwrap_or(1);
    let h = args.h.or(kv.take("h")?).unwrap_or(1e-4);
    let count = args.count.or(kv.take("count")?).unwrap_or(20);
    kv.finish()?;
    if !(h.is_finite() && h > 0.0) {
        return Err(LabError::InvalidArgument(format!(
            "h must be positive, got {h}"
        )));
    }
    let report = gradcheck_suite(seed, count, h)?;
    for inst in &report.instances {
        writeln!(
            out,
            "seed={} {} max_rel_err={:.3e}",
            inst.seed, inst.description, inst.max_rel_err
        )?;
    }
    let max = report.max_rel_err();
    let passed = max <= GRADCHECK_TOL;
    let relation = if passed { "<=" } else { ">" };
    writeln!(out, "h={h:e} instances={count}")?;
    writeln!(out, "max_rel_err = {max:.3e} {relation} {GRADCHECK_TOL:e}")?;
    if passed {
        writeln!(out, "PASS")?;
    } else if let Some(worst) = report.worst() {
        writeln!(
            out,
            "FAIL: worst instance seed={} ({})",
            worst.seed, worst.description
        )?;
    }
    Ok(Outcome {
        code: if passed { EXIT_OK } else { EXIT_FAILURE },
        config: serde_json::json!({ "seed": seed, "h": h, "count": count, "tolerance": GRADCHECK_TOL }),
    })
}

fn cmd_lemma(args: &LemmaArgs, out: &mut dyn Write) -> Result<Outcome> {
    let mut kv = load_config(args.common.config.as_deref())?;
    let tokens = args.tokens.or(kv.take("N")?).unwrap_or(4);
    let experts = args.experts.or(kv.take("n")?).unwrap_or(4);
    let k = args.k.or(kv.take("k")?).unwrap_or(2);
    let delta = args.delta.or(kv.take("delta")?).unwrap_or(0.1);
    kv.finish()?;
    let config = serde_json::json!({ "N": tokens, "n": experts, "k": k, "delta": delta });
    writeln!(out, "N={tokens} n={experts} k={k} delta={delta}")?;

    if k == 1 {
        let support = build_balanced_support(tokens, experts, k)?;
        if find_cycle(&support).is_none() {
            writeln!(out, "no cycle: a k = 1 support is a forest")?;
        }
        return Err(LabError::InvalidArgument(
            "k = 1 rejected: each row holds a single score of 1, so no row variance can be raised"
                .into(),
        ));
    }
    let inst = LemmaInstance::build(tokens, experts, k, delta)?;
    let Some(cycle) = &inst.cycle else {
        writeln!(
            out,
            "no cycle: the support graph is a forest, nothing to certify"
        )?;
        return Ok(Outcome {
            code: EXIT_OK,
            config,
        });
    };
    let cert = inst.certify().expect("cycle present")?;
    writeln!(out, "cycle: {cycle}")?;
    for c in &cert.clauses {
        let verdict = if c.passed { "pass" } else { "FAIL" };
        writeln!(
            out,
            "{}: {verdict} (max deviation {:.3e})",
            c.name, c.max_deviation
        )?;
    }
    let shown: Vec<String> = cert
        .cycle_row_variances
        .iter()
        .map(|v| format!("{v}"))
        .collect();
    writeln!(
        out,
        "cycle-row variance: [{}] expected 2*delta^2/k = {}",
        shown.join(", "),
        cert.expected_variance
    )?;
    let passed = cert.passed();
    writeln!(out, "{}", if passed { "PASS" } else { "FAIL" })?;
    Ok(Outcome {
        code: if passed { EXIT_OK } else { EXIT_FAILURE },
        config,
    })
}

/// Defaults, then the config file, then flags.
pub fn resolve_experiment(args: &RunArgs) -> Result<(ExperimentConfig, usize)> {
    let mut config = ExperimentConfig::default();
    let mut kv = load_config(args.common.config.as_deref())?;
    kv.apply_experiment(&mut config)?;
    let file_log_every = kv.take("log_every")?;
    kv.finish()?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(ablation) = args.ablation {
        config.ablation = ablation;
    }
    let log_every = args.log_every.or(file_log_every).unwrap_or(1);
    if log_every == 0 {
        return Err(LabError::Config("log_every must be >= 1".into()));
    }
    config.validate()?;
    Ok((config, log_every))
}

pub fn log_path(outdir: &Path, ablation: Ablation, seed: u64) -> PathBuf {
    outdir.join(format!("log_{}_{seed}.csv", ablation.name()))
}

fn config_json(config: &ExperimentConfig, log_every: usize) -> serde_json::Value {
    let mut value = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    if let Some(map) = value.as_object_mut() {
        map.insert("log_every".into(), log_every.into());
    }
    value
}

fn cmd_train(args: &RunArgs, out: &mut dyn Write) -> Result<Outcome> {
    let (config, log_every) = resolve_experiment(args)?;
    let outdir = &args.common.outdir;
    std::fs::create_dir_all(outdir)?;
    for &seed in &config.seeds {
        let path = log_path(outdir, config.ablation, seed);
        let mut file = BufWriter::new(File::create(&path)?);
        csv::write_header(&mut file)?;
        let mut rows = 0usize;
        let result = train_seed_with(&config, seed, |r| {
            if r.step % log_every == 0 {
                rows += 1;
                csv::write_row(&mut file, r)?;
            }
            Ok(())
        });
        // flush what was logged even when training aborted
        file.flush()?;
        let log = result?;
        let last = log.records.last();
        writeln!(
            out,
            "wrote {} ({rows} rows{})",
            path.display(),
            last.map(|r| format!(", final loss_h={:.6}, maxvio={:.4}", r.loss_h, r.maxvio))
                .unwrap_or_default()
        )?;
    }
    Ok(Outcome {
        code: EXIT_OK,
        config: config_json(&config, log_every),
    })
}

fn thinned(records: &[MetricsRecord], every: usize) -> Vec<MetricsRecord> {
    records
        .iter()
        .filter(|r| r.step % every == 0)
        .cloned()
        .collect()
}

/// `summary.csv`: one row per preset with seed-averaged finals and the
/// maxvio-curve RMSE against OnlyAux.
pub fn write_summary<W: Write>(out: &mut W, suite: &AblationSuite) -> Result<()> {
    let mut head = vec!["ablation"];
    head.extend(&LOG_COLUMNS[1..]);
    head.push("rmse_maxvio_vs_onlyaux");
    writeln!(out, "{}", head.join(","))?;
    for (ablation, summary) in &suite.summaries {
        let mut fields = vec![ablation.name().to_string()];
        fields.extend(
            LOG_COLUMNS[1..]
                .iter()
                .map(|c| csv::real(summary.finals[c])),
        );
        fields.push(csv::real(summary.rmse_maxvio_vs_onlyaux));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

fn cmd_ablate(args: &RunArgs, out: &mut dyn Write) -> Result<Outcome> {
    let (config, log_every) = resolve_experiment(args)?;
    let outdir = &args.common.outdir;
    std::fs::create_dir_all(outdir)?;
    let suite = run_ablation_suite(&config)?;
    for (ablation, logs) in &suite.logs {
        for log in logs {
            let mut file = BufWriter::new(File::create(log_path(outdir, *ablation, log.seed))?);
            csv::write_log(&mut file, &thinned(&log.records, log_every))?;
            file.flush()?;
        }
    }
    let summary_path = outdir.join("summary.csv");
    let mut file = BufWriter::new(File::create(&summary_path)?);
    write_summary(&mut file, &suite)?;
    file.flush()?;

    writeln!(
        out,
        "{:<12} {:>10} {:>10} {:>14} {:>10} {:>10}",
        "ablation", "maxvio", "overlap", "score_var", "loss_h", "rmse_vs_aux"
    )?;
    for (ablation, s) in &suite.summaries {
        writeln!(
            out,
            "{:<12} {:>10.4} {:>10.4} {:>14.4} {:>10.4} {:>10.4}",
            ablation.name(),
            s.finals["maxvio"],
            s.finals["expert_overlap"],
            s.finals["score_variance"],
            s.finals["loss_h"],
            s.rmse_maxvio_vs_onlyaux
        )?;
    }
    writeln!(
        out,
        "wrote {} logs and {}",
        suite.logs.values().map(Vec::len).sum::<usize>(),
        summary_path.display()
    )?;
    Ok(Outcome {
        code: EXIT_OK,
        config: config_json(&config, log_every),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(
            std::iter::once("moelab").chain(args.iter().copied()),
            &mut buf,
        );
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn lemma_reference_instance() {
        let dir = tempfile::tempdir().unwrap();
        let outdir = dir.path().to_str().unwrap();
        let (code, text) = run_capture(&[
            "lemma", "--N", "2", "--n", "2", "--k", "2", "--delta", "0.25", "--outdir", outdir,
        ]);
        assert_eq!(code, EXIT_OK, "{text}");
        assert!(text.contains("expected 2*delta^2/k = 0.0625"), "{text}");
        assert!(text.contains("[0.0625, 0.0625]"), "{text}");
        assert!(text.trim_end().ends_with("PASS"));
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn lemma_rejects_single_expert_routing() {
        let dir = tempfile::tempdir().unwrap();
        let outdir = dir.path().to_str().unwrap();
        let (code, text) = run_capture(&[
            "lemma", "--N", "4", "--n", "4", "--k", "1", "--outdir", outdir,
        ]);
        assert_eq!(code, EXIT_USAGE);
        assert!(text.contains("no cycle"), "{text}");
    }

    #[test]
    fn lemma_forest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let outdir = dir.path().to_str().unwrap();
        let (code, text) = run_capture(&[
            "lemma", "--N", "2", "--n", "3", "--k", "2", "--outdir", outdir,
        ]);
        assert_eq!(code, EXIT_OK);
        assert!(text.contains("no cycle"), "{text}");
    }

    #[test]
    fn usage_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let outdir = dir.path().to_str().unwrap();
        assert_eq!(run_capture(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(
            run_capture(&["train", "--steps", "many", "--outdir", outdir]).0,
            EXIT_USAGE
        );
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, "wat = 1\n").unwrap();
        let (code, _) = run_capture(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--outdir",
            outdir,
        ]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(
            &cfg,
            "steps = 40\nseeds = 1,2,3\nlog_every = 5\nablation = only_aux\n",
        )
        .unwrap();
        let args = RunArgs {
            common: CommonArgs {
                config: Some(cfg),
                outdir: dir.path().to_path_buf(),
            },
            seed: Some(11),
            steps: Some(3),
            log_every: None,
            ablation: None,
        };
        let (config, log_every) = resolve_experiment(&args).unwrap();
        assert_eq!(config.steps, 3);
        assert_eq!(config.seeds, vec![11]);
        assert_eq!(log_every, 5);
        assert_eq!(config.ablation, Ablation::OnlyAux);
    }

    #[test]
    fn zero_steps_write_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let outdir = dir.path().to_str().unwrap();
        let (code, _) = run_capture(&["train", "--steps", "0", "--seed", "7", "--outdir", outdir]);
        assert_eq!(code, EXIT_OK);
        let text = std::fs::read_to_string(dir.path().join("log_ours_7.csv")).unwrap();
        assert_eq!(text, format!("{}\n", csv::header()));
    }

    #[test]
    fn train_log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("small.cfg");
        std::fs::write(
            &cfg,
            "d = 6\nd_out = 3\nn = 4\nn_domains = 3\nN_batch = 32\nsteps = 12\n",
        )
        .unwrap();
        let outdir = dir.path().to_str().unwrap();
        let (code, text) = run_capture(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--outdir",
            outdir,
        ]);
        assert_eq!(code, EXIT_OK, "{text}");
        let file = File::open(dir.path().join("log_ours_5.csv")).unwrap();
        let parsed = csv::read_log(std::io::BufReader::new(file)).unwrap();

        let mut kv = KeyValues::load(&cfg).unwrap();
        let mut config = ExperimentConfig::default();
        kv.apply_experiment(&mut config).unwrap();
        let log = crate::experiment::train_seed(&config, 5).unwrap();
        assert_eq!(parsed.len(), log.records.len());
        for (p, r) in parsed.iter().zip(&log.records) {
            assert_eq!(p.step, r.step);
            for c in &LOG_COLUMNS[1..] {
                let (a, b) = (p.value(c).unwrap(), r.value(c).unwrap());
                assert!(
                    (a - b).abs() <= 5e-9 * b.abs().max(1e-300),
                    "{c}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn divergence_flushes_partial_log_and_fails() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("hot.cfg");
        std::fs::write(
            &cfg,
            "d = 6\nd_out = 3\nn = 4\nn_domains = 3\nN_batch = 32\nsteps = 50\nlr = 1e6\n",
        )
        .unwrap();
        let outdir = dir.path().to_str().unwrap();
        let (code, _) = run_capture(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "1",
            "--outdir",
            outdir,
        ]);
        assert_eq!(code, EXIT_FAILURE);
        let text = std::fs::read_to_string(dir.path().join("log_ours_1.csv")).unwrap();
        let rows = text.lines().count() - 1;
        assert!((1..50).contains(&rows), "{rows} rows");
    }
}
