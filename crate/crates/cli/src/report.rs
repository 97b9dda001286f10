//! Consolidated tables over training runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tacticraft_core::policy::Head;
use tacticraft_core::synth::EvalReport;
use tacticraft_core::trainer::{read_metrics, StepMetrics, TrainConfig};

/// Evaluation report picked up from a run directory.
pub const EVAL_FILE: &str = "eval.json";
pub const CONFIG_FILE: &str = "config.toml";

pub struct Run {
    pub name: String,
    pub preset: Option<String>,
    pub metrics: Vec<StepMetrics>,
    pub eval: Option<EvalReport>,
}

#[derive(Debug)]
pub struct Summary {
    pub name: String,
    pub preset: String,
    pub steps: u64,
    pub loss: f64,
    pub kl: [f64; 6],
    pub modulation: Option<(f64, bool)>,
}

/// Accepts a metrics file or a run directory holding one.
pub fn load_run(path: &Path) -> std::io::Result<Run> {
    let file = if path.is_dir() {
        path.join(tacticraft_core::trainer::METRICS_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.display().to_string());
    let preset = std::fs::read_to_string(dir.join(CONFIG_FILE))
        .ok()
        .and_then(|t| TrainConfig::from_toml_str(&t).ok())
        .and_then(|c| c.preset);
    let eval = std::fs::read_to_string(dir.join(EVAL_FILE))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    Ok(Run {
        name,
        preset,
        metrics: read_metrics(&file)?,
        eval,
    })
}

pub fn load_runs(paths: &[PathBuf]) -> std::io::Result<Vec<Run>> {
    paths.iter().map(|p| load_run(p)).collect()
}

/// Means over the last tenth of the logged steps.
pub fn summarize(run: &Run) -> Summary {
    let n = run.metrics.len();
    let tail = &run.metrics[n - (n / 10).max(1).min(n)..];
    let k = tail.len().max(1) as f64;
    let mut kl = [0.0; 6];
    for m in tail {
        for h in Head::ALL {
            kl[h.index()] += m.kl_of(h) / k;
        }
    }
    Summary {
        name: run.name.clone(),
        preset: run.preset.clone().unwrap_or_else(|| "-".into()),
        steps: run.metrics.last().map_or(0, |m| m.step),
        loss: tail.iter().map(|m| m.loss).sum::<f64>() / k,
        kl,
        modulation: run.eval.as_ref().map(|e| (e.modulation_score, e.diagonal_dominant)),
    }
}

fn curve_rows(run: &Run, every: u64) -> impl Iterator<Item = &StepMetrics> {
    let last = run.metrics.last().map_or(0, |m| m.step);
    run.metrics
        .iter()
        .filter(move |m| (every > 0 && m.step % every == 0) || m.step == last)
}

/// Per head, whether the first preset-D run sits at or below the first preset-A run.
pub fn d_vs_a(sums: &[Summary]) -> Option<[bool; 6]> {
    let a = sums.iter().find(|s| s.preset == "A")?;
    let d = sums.iter().find(|s| s.preset == "D")?;
    Some(std::array::from_fn(|i| d.kl[i] <= a.kl[i]))
}

pub fn render_text(runs: &[Run], every: u64) -> String {
    let sums: Vec<Summary> = runs.iter().map(summarize).collect();
    let mut s = String::new();
    let _ = write!(s, "{:<16} {:>6} {:>8} {:>12}", "run", "preset", "steps", "loss");
    for h in Head::ALL {
        let _ = write!(s, " {:>14}", format!("kl.{}", h.name()));
    }
    let _ = writeln!(s, " {:>10} {:>9}", "modulation", "dominant");
    for x in &sums {
        let _ = write!(s, "{:<16} {:>6} {:>8} {:>12.6}", x.name, x.preset, x.steps, x.loss);
        for v in x.kl {
            let _ = write!(s, " {v:>14.6e}");
        }
        match x.modulation {
            Some((m, d)) => {
                let _ = writeln!(s, " {m:>10.4} {:>9}", if d { "yes" } else { "no" });
            }
            None => {
                let _ = writeln!(s, " {:>10} {:>9}", "-", "-");
            }
        }
    }
    if let Some(flags) = d_vs_a(&sums) {
        let _ = write!(s, "{:<16} {:>6} {:>8} {:>12}", "D<=A", "", "", "");
        for f in flags {
            let _ = write!(s, " {:>14}", if f { "yes" } else { "NO" });
        }
        s.push('\n');
    }
    for run in runs {
        let _ = writeln!(s, "\n{}", run.name);
        let _ = write!(s, "{:>8} {:>10} {:>12} {:>10}", "step", "lr", "loss", "grad_norm");
        for h in Head::ALL {
            let _ = write!(s, " {:>14}", format!("kl.{}", h.name()));
        }
        s.push('\n');
        for m in curve_rows(run, every) {
            let _ = write!(s, "{:>8} {:>10.3e} {:>12.6} {:>10.4}", m.step, m.lr, m.loss, m.grad_norm);
            for h in Head::ALL {
                let _ = write!(s, " {:>14.6e}", m.kl_of(h));
            }
            s.push('\n');
        }
    }
    s
}

/// Long format: `table,run,step,metric,value`.
pub fn render_csv(runs: &[Run], every: u64) -> String {
    let sums: Vec<Summary> = runs.iter().map(summarize).collect();
    let mut s = String::from("table,run,step,metric,value\n");
    for x in &sums {
        let mut row = |metric: &str, v: String| {
            let _ = writeln!(s, "summary,{},{},{metric},{v}", x.name, x.steps);
        };
        row("preset", x.preset.clone());
        row("loss", x.loss.to_string());
        for h in Head::ALL {
            row(&format!("kl.{}", h.name()), x.kl[h.index()].to_string());
        }
        if let Some((m, d)) = x.modulation {
            row("modulation_score", m.to_string());
            row("diagonal_dominant", d.to_string());
        }
    }
    if let Some(flags) = d_vs_a(&sums) {
        for h in Head::ALL {
            let _ = writeln!(s, "compare,D_vs_A,,kl.{}.d_le_a,{}", h.name(), flags[h.index()]);
        }
    }
    for run in runs {
        for m in curve_rows(run, every) {
            let mut row = |metric: &str, v: f64| {
                let _ = writeln!(s, "curve,{},{},{metric},{v}", run.name, m.step);
            };
            row("lr", m.lr);
            row("loss", m.loss);
            row("grad_norm", m.grad_norm);
            for h in Head::ALL {
                row(&format!("bc.{}", h.name()), m.bc[h.name()]);
                row(&format!("kl.{}", h.name()), m.kl_of(h));
            }
        }
    }
    s
}
