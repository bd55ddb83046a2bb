//! `infl`: train key-locked federated models, attack trained checkpoints,
//! verify the security analysis, and inspect client partitions.
//!
//! Exit codes: 0 success, 1 invalid input (flags, config, keys, corrupt
//! files), 2 runtime failure, 3 verification checks failed. Every failure
//! also prints a one-line JSON record to stderr.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use infl_core::config::parse_config_file;
use infl_core::experiment::{
    run_attack, run_partition, run_train, run_verify, AttackOptions, VerifyOptions,
};
use infl_core::threatlab::AttackKind;
use infl_core::Error;

#[derive(Parser)]
#[command(name = "infl", version, about = "Federated learning with key-locked decoder layers")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a config file and write checkpoint, key files, round
    /// log, and summary under the configured output directory.
    Train {
        /// Config file (sectioned key=value text).
        #[arg(long)]
        config: PathBuf,
        /// Base preset the config overrides: demo, perturbation,
        /// proteomic, or spatial.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Evaluate adversaries against a trained checkpoint; writes
    /// attacks.json and attacks.csv next to it.
    Attack {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Key file, or a directory of per-client .keys files. With keys
        /// the full scorecard runs; without, only adversary outputs are
        /// scored.
        #[arg(long)]
        keys: Option<PathBuf>,
        /// identity_key, random_key, or strip_inr. Omit to run all three.
        #[arg(long, value_parser = parse_kind)]
        kind: Option<AttackKind>,
    },
    /// Re-derive the security analysis on freshly drawn locked layers
    /// and check every law; exits 3 if any check fails.
    Verify {
        /// Blend weight of the plain affine path, in [0, 1).
        #[arg(long)]
        alpha: Option<f64>,
        /// Frequency levels of the coordinate encoding.
        #[arg(long)]
        levels: Option<usize>,
        /// Monte-Carlo trials per statistical check.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Compute the client shards training would use and write
    /// shards.json under the configured output directory.
    Partition {
        /// Config file (sectioned key=value text).
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<AttackKind, String> {
    match s {
        "identity_key" => Ok(AttackKind::IdentityKey),
        "random_key" => Ok(AttackKind::RandomKey),
        "strip_inr" => Ok(AttackKind::StripInr),
        other => Err(format!(
            "unknown attack kind {other:?} (expected identity_key, random_key, or strip_inr)"
        )),
    }
}

fn out_root() -> Option<PathBuf> {
    std::env::var_os("INFL_OUT_ROOT").map(PathBuf::from)
}

fn error_record(code: i32, detail: &str) -> String {
    serde_json::json!({ "status": "error", "exit_code": code, "detail": detail }).to_string()
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::Invalid { .. }
        | Error::KeyMismatch { .. }
        | Error::Decode { .. } => 1,
        _ => 2,
    }
}

fn fmt_value(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-3..1e6).contains(&a) {
        format!("{v:.6}")
    } else {
        format!("{v:.3e}")
    }
}

fn fmt_acc(acc: Option<f64>) -> String {
    acc.map(|a| format!(" accuracy {a:.4}")).unwrap_or_default()
}

fn cmd_train(config: &Path, preset: Option<&str>) -> infl_core::Result<i32> {
    let loaded = parse_config_file(config, preset)?;
    for note in &loaded.notes {
        eprintln!("config: {note}");
    }
    let out = run_train(&loaded.config, out_root().as_deref())?;
    println!("method {} seed {} rounds {}", out.summary.method, out.summary.seed, out.summary.rounds.len());
    println!("wrote {}", out.paths.checkpoint.display());
    println!("wrote {}", out.paths.rounds_csv.display());
    println!("wrote {}", out.paths.summary_json.display());
    for p in &out.paths.key_files {
        println!("wrote {}", p.display());
    }
    println!("final loss {}{}", fmt_value(out.summary.final_loss), fmt_acc(out.summary.final_accuracy));
    Ok(0)
}

fn cmd_attack(checkpoint: &Path, keys: Option<&Path>, kind: Option<AttackKind>) -> infl_core::Result<i32> {
    let mut opts = AttackOptions::default();
    if let Some(k) = kind {
        opts.kinds = vec![k];
    }
    let out = run_attack(checkpoint, keys, &opts)?;
    for r in &out.artifact.reports {
        println!(
            "{}: authorized loss {}{} | attacked loss {}{}",
            r.kind.name(),
            fmt_value(r.authorized_loss),
            fmt_acc(r.authorized_accuracy),
            fmt_value(r.attacked_loss),
            fmt_acc(r.attacked_accuracy),
        );
        if let Some(g) = &r.grad_mismatch {
            println!(
                "{}: gradient gap {}{}",
                r.kind.name(),
                fmt_value(g.l2_gap),
                g.cosine.map(|c| format!(" cosine {c:.4}")).unwrap_or_default(),
            );
        }
    }
    for r in &out.artifact.keyless {
        println!(
            "{}: attacked loss {}{} (no keys supplied; authorized reference unavailable)",
            r.kind.name(),
            fmt_value(r.attacked_loss),
            fmt_acc(r.attacked_accuracy),
        );
    }
    println!("wrote {}", out.json_path.display());
    println!("wrote {}", out.csv_path.display());
    Ok(0)
}

fn cmd_verify(alpha: Option<f64>, levels: Option<usize>, trials: Option<usize>) -> infl_core::Result<i32> {
    let mut opts = VerifyOptions::default();
    if let Some(a) = alpha {
        opts.alpha = a;
    }
    if let Some(l) = levels {
        opts.levels = l;
    }
    if let Some(t) = trials {
        opts.trials = t;
    }
    let report = run_verify(&opts)?;
    println!("alpha {} levels {} trials {}", report.alpha, report.levels, report.trials);
    for row in &report.rows {
        println!(
            "[{}] {}: {} ({})",
            if row.pass { "PASS" } else { "FAIL" },
            row.name,
            fmt_value(row.observed),
            row.check.describe(),
        );
    }
    if report.all_pass {
        println!("verify: all {} checks passed", report.rows.len());
        Ok(0)
    } else {
        let failed = report.rows.iter().filter(|r| !r.pass).count();
        println!("verify: {failed} of {} checks FAILED", report.rows.len());
        Ok(3)
    }
}

fn cmd_partition(config: &Path) -> infl_core::Result<i32> {
    let loaded = parse_config_file(config, None)?;
    for note in &loaded.notes {
        eprintln!("config: {note}");
    }
    let out = run_partition(&loaded.config, out_root().as_deref())?;
    let sizes: Vec<String> = out.manifest.sizes.iter().map(|s| s.to_string()).collect();
    println!(
        "{} clients over {} training samples; shard sizes {}",
        out.manifest.n_clients,
        out.manifest.n_train,
        sizes.join(","),
    );
    println!("wrote {}", out.path.display());
    Ok(0)
}

fn run(cli: Cli) -> infl_core::Result<i32> {
    match cli.cmd {
        Command::Train { config, preset } => cmd_train(&config, preset.as_deref()),
        Command::Attack { checkpoint, keys, kind } => {
            cmd_attack(&checkpoint, keys.as_deref(), kind)
        }
        Command::Verify { alpha, levels, trials } => cmd_verify(alpha, levels, trials),
        Command::Partition { config } => cmd_partition(&config),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                e.exit();
            }
            let _ = e.print();
            eprintln!("{}", error_record(1, "invalid command line arguments"));
            std::process::exit(1);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            eprintln!("{}", error_record(code, &e.to_string()));
            std::process::exit(code);
        }
    }
}
