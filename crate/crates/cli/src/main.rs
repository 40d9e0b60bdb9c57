use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use metasp_core::config::{apply_overrides, parse_config, toy_spec, ExperimentSpec};
use metasp_core::experiment::{format_table, report, run_experiment};
use metasp_core::oracle::write_oracle_report;
use metasp_core::suite::{
    digits_oracle_suite, gradcheck_suite, loo_suite, DigitsOracleConfig, GradcheckConfig, LooSuiteConfig,
};
use metasp_core::Error;

#[derive(Parser, Debug)]
#[command(name = "metasp", version, about = "Influence-aware rehearsal for continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every method over every seed and write per-run and aggregate reports.
    Run(RunArgs),
    /// Compare meta influence with the exact influence function and leave-one-out retraining.
    Oracle(OracleArgs),
    /// Finite-difference checks of gradients, Hessian-vector products and influence.
    Gradcheck(GradcheckArgs),
    /// Rebuild the aggregate report from per-run metrics under a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON experiment description; the built-in split-Gaussian experiment when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One method or a comma-separated list.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    buffer_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    metasp_epochs: Option<usize>,
    #[arg(long)]
    pseudo_iters: Option<usize>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other key by dotted path, e.g. `--set train.lr=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut o: Vec<(String, String)> = Vec::new();
        if let Some(m) = &self.method {
            let list: Vec<String> = m.split(',').map(|s| format!("{:?}", s.trim())).collect();
            o.push(("methods".into(), format!("[{}]", list.join(","))));
            o.push(("train.method".into(), list[0].clone()));
        }
        if let Some(s) = &self.setting {
            o.push(("train.setting".into(), format!("{s:?}")));
        }
        let numeric = [
            ("train.buffer_capacity", self.buffer_size),
            ("train.epochs_per_task", self.epochs),
            ("train.metasp_last_epochs", self.metasp_epochs),
            ("train.pseudo_iterations", self.pseudo_iters),
        ];
        for (key, v) in numeric {
            if let Some(v) = v {
                o.push((key.into(), v.to_string()));
            }
        }
        if let Some(s) = self.seed {
            o.push(("seeds".into(), format!("[{s}]")));
        }
        if let Some(s) = &self.seeds {
            let list: Vec<String> = s.iter().map(u64::to_string).collect();
            o.push(("seeds".into(), format!("[{}]", list.join(","))));
        }
        if let Some(out) = &self.out {
            o.push(("output_dir".into(), format!("{:?}", out.display().to_string())));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            o.push((k.trim().into(), v.trim().into()));
        }
        Ok(o)
    }
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Digits CSV: label followed by pixel intensities in [0, 1].
    #[arg(long)]
    digits: PathBuf,
    #[arg(long, default_value = "oracle_out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    /// Minimum sign agreement and rank correlation for success.
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_spec(args: &RunArgs) -> Result<ExperimentSpec> {
    let base = match &args.config {
        Some(path) => parse_config(path)?,
        None => toy_spec("runs"),
    };
    Ok(apply_overrides(&base, &args.overrides()?)?)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let spec = load_spec(args)?;
    let methods: Vec<&str> = spec.methods().iter().map(|m| m.name()).collect();
    eprintln!(
        "running {} x {} seeds into {}",
        methods.join(", "),
        spec.seeds.len(),
        spec.output_dir.display()
    );
    let result = run_experiment(&spec)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", format_table(&result.aggregate));
    Ok(())
}

fn write_report(path: &Path, rows: &[metasp_core::oracle::OracleRow], zero_band: f64) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_oracle_report(BufWriter::new(f), rows, zero_band)?;
    Ok(())
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let loo_cfg = LooSuiteConfig {
        seed: args.seed,
        ..Default::default()
    };
    let loo = loo_suite(&loo_cfg)?;
    write_report(&args.out.join("oracle_report_logistic.csv"), &loo.rows, loo_cfg.zero_band)?;
    let loo_rate = loo.agreement.rate().unwrap_or(0.0);
    println!(
        "logistic (q = {}): spearman(exact, loo) = {:.4}, sign agreement = {:.4}",
        loo.num_params, loo.spearman, loo_rate
    );

    let digits_cfg = DigitsOracleConfig {
        seed: args.seed,
        hidden: args.hidden,
        l2: args.l2,
        ..DigitsOracleConfig::new(&args.digits)
    };
    let digits = digits_oracle_suite(&digits_cfg)?;
    write_report(&args.out.join("oracle_report.csv"), &digits.rows, digits_cfg.zero_band)?;
    let a = digits.agreement;
    let rate = a.rate().unwrap_or(0.0);
    println!(
        "digits (q = {}, damping {}, |grad| {:.2e}): TP {} TN {} FP {} FN {} excluded {}, agreement {:.4}, spearman {:.4}",
        digits.num_params,
        digits.damping_used,
        digits.grad_norm,
        a.true_positive,
        a.true_negative,
        a.false_positive,
        a.false_negative,
        a.excluded,
        rate,
        digits.spearman
    );
    let summary = serde_json::json!({
        "logistic": {"spearman": loo.spearman, "sign_agreement": loo_rate},
        "digits": {
            "num_params": digits.num_params,
            "damping": digits.damping_used,
            "grad_norm": digits.grad_norm,
            "true_positive": a.true_positive,
            "true_negative": a.true_negative,
            "false_positive": a.false_positive,
            "false_negative": a.false_negative,
            "excluded": a.excluded,
            "sign_agreement": rate,
            "spearman": digits.spearman,
        },
    });
    let path = args.out.join("oracle_summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::Io { path, source: e })?;

    let mut failures = Vec::new();
    if loo.spearman < args.threshold || loo_rate < args.threshold {
        failures.push("logistic leave-one-out");
    }
    if rate < args.threshold {
        failures.push("digits sign agreement");
    }
    if !failures.is_empty() {
        return Err(Error::Oracle(format!("below {}: {}", args.threshold, failures.join(", "))).into());
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig {
        instances: args.instances,
        seed: args.seed,
        ..Default::default()
    };
    let r = gradcheck_suite(&cfg)?;
    for (name, s, tol) in [
        ("gradient", r.gradient, cfg.grad_rel_tol),
        ("hvp", r.hvp, cfg.grad_rel_tol),
        ("influence", r.influence, cfg.influence_rel_tol),
    ] {
        println!(
            "{name:<10} checked {:>5}  failed {:>3}  max rel {:.2e} (tol {tol:.0e})  max abs {:.2e}",
            s.checked, s.failed, s.max_rel_err, s.max_abs_err
        );
    }
    if !r.passed() {
        return Err(Error::Numeric {
            context: "finite-difference check".into(),
            index: None,
        }
        .into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report { out } => report(out)
            .map(|agg| print!("{}", format_table(&agg)))
            .map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
