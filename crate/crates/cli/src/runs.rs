use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Args;
use his_core::config::{AblationMode, RunConfig};
use his_core::trainer::{read_summary, run_to_dir, RunSummary, SUMMARY_FILE};

use crate::{parse_modes, CliError};

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML file with RunConfig keys; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation: Option<AblationMode>,
    /// Output directory; defaults to `$HIS_OUT_DIR/<env>_<mode>_s<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite a completed run in the output directory.
    #[arg(long)]
    pub force: bool,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated modes, at least two.
    #[arg(long, default_value = "full,share")]
    pub modes: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Grid axis `key=v1,v2,...`; repeat for more axes.
    #[arg(long = "param", value_name = "KEY=V1,V2", required = true)]
    pub params: Vec<String>,
    #[arg(long, default_value = "0")]
    pub seeds: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub force: bool,
}

fn out_root() -> PathBuf {
    std::env::var_os("HIS_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if args.set.is_empty() {
        return Ok(base);
    }
    base.with_overrides(&args.set)
        .map_err(|e| CliError::Usage(format!("--set: {e}")))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|e| CliError::Usage(format!("seed {t:?}: {e}")))
        })
        .collect()
}

fn override_one(cfg: &RunConfig, key: &str, value: &str) -> Result<RunConfig, CliError> {
    cfg.with_overrides(&[format!("{key}={value}")])
        .map_err(|e| CliError::Usage(e.to_string()))
}

/// Refuses to replace a completed run unless forced.
fn guard(dir: &Path, force: bool) -> Result<(), CliError> {
    let summary = dir.join(SUMMARY_FILE);
    if !force && summary.exists() {
        if let Ok(s) = read_summary(&summary) {
            if s.completed {
                return Err(CliError::Usage(format!(
                    "{} holds a completed run; pass --force to overwrite",
                    dir.display()
                )));
            }
        }
    }
    Ok(())
}

fn train(cfg: &RunConfig, dir: &Path) -> Result<RunSummary, CliError> {
    run_to_dir(cfg, dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

pub fn run(a: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.ablation {
        cfg.ablation = m;
    }
    if a.print_config {
        crate::emit(cfg.to_toml_string().trim_end());
        return Ok(());
    }
    let dir = a
        .out
        .unwrap_or_else(|| out_root().join(format!("{}_{}_s{}", cfg.env, cfg.ablation, cfg.seed)));
    guard(&dir, a.force)?;
    let s = train(&cfg, &dir)?;
    crate::emit_fmt!(
        "{}: {} steps, final return {}, steps to threshold {}",
        dir.display(),
        s.stats.total_steps,
        s.stats.final_eval_return.unwrap_or(s.stats.final_ret_mean),
        s.stats
            .steps_to_threshold
            .map_or("-".to_string(), |v| v.to_string())
    );
    Ok(())
}

/// One training job of an ablation or sweep.
struct Job {
    cfg: RunConfig,
    dir: PathBuf,
    labels: Vec<String>,
}

struct Outcome {
    labels: Vec<String>,
    seed: u64,
    summary: Option<RunSummary>,
    error: Option<String>,
}

/// Runs jobs on `jobs` worker threads; per-run failures are recorded and the
/// rest continue. Results come back in job order.
fn run_all(list: Vec<Job>, jobs: usize, force: bool) -> Vec<Outcome> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..list.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(list.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = list.get(k) else { break };
                let res = guard(&job.dir, force).and_then(|_| train(&job.cfg, &job.dir));
                let outcome = match res {
                    Ok(s) => Outcome {
                        labels: job.labels.clone(),
                        seed: job.cfg.seed,
                        summary: Some(s),
                        error: None,
                    },
                    Err(e) => {
                        eprintln!("run {} failed: {e}", job.dir.display());
                        let summary = read_summary(&job.dir.join(SUMMARY_FILE)).ok();
                        Outcome {
                            labels: job.labels.clone(),
                            seed: job.cfg.seed,
                            summary,
                            error: Some(e.to_string()),
                        }
                    }
                };
                results.lock().expect("no poisoned workers")[k] = Some(outcome);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect()
}

fn final_return(s: &RunSummary) -> f64 {
    s.stats.final_eval_return.unwrap_or(s.stats.final_ret_mean)
}

fn opt_str<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn io_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

fn variance(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Some(v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
}

pub fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let base = load_config(&a.cfg)?;
    let modes = parse_modes(&a.modes)?;
    if modes.len() < 2 {
        return Err(CliError::Usage("ablate needs at least two modes".into()));
    }
    let seeds = parse_seeds(&a.seeds)?;
    let root = a
        .out
        .unwrap_or_else(|| out_root().join(format!("ablate_{}", base.env)));
    let mut list = Vec::new();
    for &mode in &modes {
        for &seed in &seeds {
            let cfg = RunConfig {
                ablation: mode,
                seed,
                ..base.clone()
            };
            list.push(Job {
                cfg,
                dir: root.join(format!("{mode}_s{seed}")),
                labels: vec![mode.to_string()],
            });
        }
    }
    let outcomes = run_all(list, a.jobs, a.force);

    let path = root.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io_err(&path))?;
    w.write_record([
        "mode",
        "seed",
        "completed",
        "final_return",
        "steps_to_threshold",
    ])
    .map_err(io_err(&path))?;
    for o in &outcomes {
        let s = o.summary.as_ref();
        w.write_record([
            o.labels[0].clone(),
            o.seed.to_string(),
            (o.error.is_none()).to_string(),
            opt_str(s.map(final_return)),
            opt_str(s.and_then(|s| s.stats.steps_to_threshold)),
        ])
        .map_err(io_err(&path))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;

    let path = root.join("medians.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io_err(&path))?;
    w.write_record([
        "mode",
        "runs",
        "reached",
        "median_final_return",
        "median_steps_to_threshold",
        "return_variance",
    ])
    .map_err(io_err(&path))?;
    crate::emit_fmt!(
        "{:<16}{:>6}{:>9}{:>16}{:>16}{:>14}",
        "mode",
        "runs",
        "reached",
        "median_return",
        "median_steps",
        "variance"
    );
    let mut variances = Vec::new();
    for &mode in &modes {
        let rows: Vec<&RunSummary> = outcomes
            .iter()
            .filter(|o| o.labels[0] == mode.as_str())
            .filter_map(|o| o.summary.as_ref())
            .collect();
        let mut rets: Vec<f64> = rows.iter().map(|s| final_return(s)).collect();
        let var = variance(&rets);
        variances.push((mode, var));
        // runs that never reached the threshold count as the full budget
        let mut steps: Vec<f64> = rows
            .iter()
            .map(|s| {
                s.stats
                    .steps_to_threshold
                    .map_or(f64::INFINITY, |v| v as f64)
            })
            .collect();
        let reached = steps.iter().filter(|v| v.is_finite()).count();
        let med_ret = median(&mut rets);
        let med_steps = median(&mut steps);
        w.write_record([
            mode.to_string(),
            rows.len().to_string(),
            reached.to_string(),
            opt_str(med_ret),
            opt_str(med_steps),
            opt_str(var),
        ])
        .map_err(io_err(&path))?;
        crate::emit_fmt!(
            "{:<16}{:>6}{:>9}{:>16}{:>16}{:>14}",
            mode.as_str(),
            rows.len(),
            reached,
            med_ret.map_or("-".into(), |v| format!("{v:.4}")),
            med_steps.map_or("-".into(), |v| v.to_string()),
            var.map_or("-".into(), |v| format!("{v:.3e}"))
        );
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    let find = |m: AblationMode| variances.iter().find(|v| v.0 == m).and_then(|v| v.1);
    if let (Some(full), Some(nobc)) = (find(AblationMode::Full), find(AblationMode::NoBc)) {
        crate::emit_fmt!(
            "no_bc return variance {} full ({nobc:.3e} vs {full:.3e})",
            if nobc > full {
                "exceeds"
            } else {
                "does not exceed"
            }
        );
    }
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} run(s) failed; see comparison.csv");
    }
    Ok(())
}

/// `key=v1,v2` into its axis. Commas inside `[...]` stay with their value.
fn parse_axis(spec: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, vals) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--param {spec:?} is not key=v1,v2")))?;
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in vals.chars() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur.trim().to_string());
    if out.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!(
            "--param {spec:?} has an empty value"
        )));
    }
    Ok((key.trim().to_string(), out))
}

pub fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let base = load_config(&a.cfg)?;
    let axes = a
        .params
        .iter()
        .map(|p| parse_axis(p))
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = parse_seeds(&a.seeds)?;
    let root = a
        .out
        .unwrap_or_else(|| out_root().join(format!("sweep_{}", base.env)));

    let mut points: Vec<Vec<String>> = vec![Vec::new()];
    for (_, vals) in &axes {
        points = points
            .iter()
            .flat_map(|p| {
                vals.iter()
                    .map(move |v| [p.clone(), vec![v.clone()]].concat())
            })
            .collect();
    }
    let mut list = Vec::new();
    for (k, point) in points.iter().enumerate() {
        let mut cfg = base.clone();
        for ((key, _), v) in axes.iter().zip(point) {
            cfg = override_one(&cfg, key, v)?;
        }
        for &seed in &seeds {
            let cfg = RunConfig {
                seed,
                ..cfg.clone()
            };
            list.push(Job {
                cfg,
                dir: root.join(format!("point{k:03}_s{seed}")),
                labels: point.clone(),
            });
        }
    }
    let outcomes = run_all(list, a.jobs, a.force);

    let path = root.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io_err(&path))?;
    let mut header: Vec<String> = axes.iter().map(|(k, _)| k.clone()).collect();
    header.extend(["seed", "completed", "final_return", "steps_to_threshold"].map(String::from));
    w.write_record(&header).map_err(io_err(&path))?;
    for o in &outcomes {
        let s = o.summary.as_ref();
        let mut row = o.labels.clone();
        row.extend([
            o.seed.to_string(),
            o.error.is_none().to_string(),
            opt_str(s.map(final_return)),
            opt_str(s.and_then(|s| s.stats.steps_to_threshold)),
        ]);
        w.write_record(&row).map_err(io_err(&path))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    crate::emit_fmt!("{} runs, results in {}", outcomes.len(), path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_keeps_bracketed_lists() {
        let (k, v) = parse_axis("hidden_sizes=[32,32],[64]").unwrap();
        assert_eq!(k, "hidden_sizes");
        assert_eq!(v, vec!["[32,32]", "[64]"]);
        assert!(parse_axis("lr_actor").is_err());
        assert!(parse_axis("lr_actor=1e-3,").is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut [1.0, f64::INFINITY]), Some(f64::INFINITY));
        assert_eq!(median(&mut []), None);
    }
}
