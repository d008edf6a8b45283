use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tabbench::data::{default_cache_dir, fetch_dataset};
use tabbench::protocol::{adtm_csv, adtm_curves, execute, load_results, result_matrices, CellEvent};
use tabbench::stats::{rank_summary, summary_stats, RankSummary, SummaryStats};
use tabbench::{DatasetResult, RunManifest};

#[derive(Parser)]
#[command(name = "bench", version, about = "Tabular deep learning benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of a manifest, resuming from persisted cells.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        max_trials: Option<usize>,
        #[arg(long)]
        max_hours: Option<f64>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average ranks, Friedman test, Nemenyi groups and win counts.
    Rank {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Mean normalized distance to the best objective per trial.
    Adtm {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Per-dataset error rate and AUC of two methods side by side.
    Compare {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
    /// Download a CSV into the content-checked cache.
    Fetch {
        #[arg(long)]
        url: String,
        #[arg(long, env = "BENCH_CACHE_DIR")]
        cache: Option<PathBuf>,
    },
}

/// Fatal error in user-supplied configuration or input.
const EXIT_CONFIG: u8 = 1;
/// The run finished but some cells failed.
const EXIT_PARTIAL: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            manifest,
            max_trials,
            max_hours,
            parallelism,
            seed,
            out,
        } => run(&manifest, max_trials, max_hours, parallelism, seed, out),
        Command::Rank { results, alpha } => rank(&results, alpha),
        Command::Adtm { results, trials } => adtm(&results, trials),
        Command::Compare { results, a, b } => compare(&results, &a, &b),
        Command::Fetch { url, cache } => {
            let cache = cache.unwrap_or_else(default_cache_dir);
            let path = fetch_dataset(&url, &cache).with_context(|| format!("fetching {url}"))?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run(
    path: &Path,
    max_trials: Option<usize>,
    max_hours: Option<f64>,
    parallelism: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let mut m = RunManifest::load(path)?;
    if let Some(n) = max_trials {
        m.budget.max_trials = n;
    }
    if let Some(h) = max_hours {
        m.budget.max_hours = h;
    }
    if let Some(p) = parallelism {
        if p == 0 {
            bail!("--parallelism must be at least 1");
        }
        m.parallelism = Some(p);
    }
    if let Some(s) = seed {
        m.master_seed = s;
    }
    if let Some(o) = out {
        m.out_dir = o;
    }
    m.validate()?;
    let total = m.datasets.len() * m.methods.len() * m.outer_folds;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let progress = |e: &CellEvent| {
        let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
        let auc = e.test_auc.map_or_else(|| "failed".to_string(), |a| format!("auc {a:.4}"));
        let how = if e.resumed { "resumed" } else { "done" };
        eprintln!(
            "[{n}/{total}] {} {} {} fold {}: {auc} ({how}, {:.1}s)",
            e.dataset,
            e.method,
            e.mode.tag(),
            e.fold,
            e.elapsed_s
        );
    };
    let outcome = execute(&m, &progress)?;
    eprintln!("matrix written to {}", m.out_dir.join(format!("matrix_{}.csv", m.mode.tag())).display());
    if outcome.failed_cells > 0 {
        eprintln!("{} of {total} cells failed", outcome.failed_cells);
        return Ok(ExitCode::from(EXIT_PARTIAL));
    }
    Ok(ExitCode::SUCCESS)
}

fn load(dir: &Path) -> Result<Vec<DatasetResult>> {
    let results = load_results(dir).with_context(|| format!("reading results from {}", dir.display()))?;
    if results.is_empty() {
        bail!("no persisted cells under {}", dir.display());
    }
    Ok(results)
}

fn write_report(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn rank(dir: &Path, alpha: f64) -> Result<ExitCode> {
    let results = load(dir)?;
    let (auc, wall) = result_matrices(&results)?;
    let ranks = rank_summary(&auc, alpha)?;
    let summary = summary_stats(&auc, Some(&wall), 0)?;

    write_report(&dir.join("rank_report.json"), &serde_json::to_string_pretty(&ranks)?)?;
    let mut cd = String::from("method,mean_rank,group\n");
    for (name, r, g) in ranks.cd_rows() {
        writeln!(cd, "{name},{r},{g}")?;
    }
    write_report(&dir.join("cd_diagram.csv"), &cd)?;
    write_report(&dir.join("summary.csv"), &summary_csv(&summary))?;
    print!("{}", rank_text(&ranks, &summary));
    Ok(ExitCode::SUCCESS)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_csv(s: &SummaryStats) -> String {
    let mut out = String::from(
        "method,mean_rank,n_datasets,mean_auc,median_auc,mad,ci_low,ci_high,mean_wall_time_s,median_wall_time_s\n",
    );
    for m in &s.methods {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            m.method,
            opt(m.mean_rank),
            m.n_datasets,
            m.mean_auc,
            m.median_auc,
            m.mad,
            m.ci_low,
            m.ci_high,
            opt(m.mean_wall_time_s),
            opt(m.median_wall_time_s)
        ));
    }
    out
}

fn rank_text(r: &RankSummary, s: &SummaryStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} methods over {} datasets ({} incomplete dropped)", r.k, r.n, r.n_dropped);
    if let (Some(chi2), Some(p)) = (r.chi2, r.p) {
        let _ = writeln!(out, "Friedman chi2 = {chi2:.4}, p = {p:.4e}");
    }
    let _ = writeln!(out, "Nemenyi CD at alpha {} = {:.4}", r.alpha, r.cd);
    let _ = writeln!(
        out,
        "{:<24} {:>9} {:>5} {:>9} {:>9} {:>8} {:>19}",
        "method", "mean rank", "wins", "mean AUC", "med AUC", "MAD", "95% CI of median"
    );
    let mut order: Vec<usize> = (0..r.k).collect();
    order.sort_by(|&a, &b| r.ranks[a].total_cmp(&r.ranks[b]));
    for j in order {
        let m = &s.methods[j];
        let _ = writeln!(
            out,
            "{:<24} {:>9.3} {:>5} {:>9.4} {:>9.4} {:>8.4}    [{:.4}, {:.4}]",
            r.methods[j], r.ranks[j], r.wins[j], m.mean_auc, m.median_auc, m.mad, m.ci_low, m.ci_high
        );
    }
    for (g, members) in r.groups.iter().enumerate() {
        let _ = writeln!(out, "group {g}: {}", members.join(", "));
    }
    out
}

fn adtm(dir: &Path, trials: usize) -> Result<ExitCode> {
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let curves = adtm_curves(&load(dir)?, trials)?;
    if curves.is_empty() {
        bail!("no tuned results with trials under {}", dir.display());
    }
    let csv = adtm_csv(&curves);
    write_report(&dir.join("adtm.csv"), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn compare(dir: &Path, a: &str, b: &str) -> Result<ExitCode> {
    let results = load(dir)?;
    let pick = |name: &str| -> Result<Vec<&DatasetResult>> {
        let found: Vec<&DatasetResult> = results.iter().filter(|r| r.label() == name).collect();
        if found.is_empty() {
            let mut known: Vec<String> = results.iter().map(DatasetResult::label).collect();
            known.sort();
            known.dedup();
            bail!("unknown method {name:?}; available: {}", known.join(", "));
        }
        Ok(found)
    };
    let (ra, rb) = (pick(a)?, pick(b)?);
    let mut datasets: Vec<&str> = ra.iter().chain(&rb).map(|r| r.dataset.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    let mut csv = String::from("dataset,error_rate_A,error_rate_B,auc_A,auc_B\n");
    for d in datasets {
        let ca = ra.iter().find(|r| r.dataset == d);
        let cb = rb.iter().find(|r| r.dataset == d);
        writeln!(
            csv,
            "{d},{},{},{},{}",
            opt(ca.and_then(|r| r.mean_test_error_rate)),
            opt(cb.and_then(|r| r.mean_test_error_rate)),
            opt(ca.and_then(|r| r.mean_test_auc)),
            opt(cb.and_then(|r| r.mean_test_auc)),
        )?;
    }
    write_report(&dir.join(format!("compare_{a}_vs_{b}.csv")), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}
