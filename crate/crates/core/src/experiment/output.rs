use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::runner::{
    BenchResult, Experiment, FrequencyResult, ProfileResult, ReinitRow, RunRecord,
};
use crate::analysis::{layer_heatmap, layer_mean_frequency};
use crate::data::save_checkpoint;
use crate::error::{Error, Result};

/// Sample mean and standard error; the error is `None` for fewer than two
/// values.
pub fn mean_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-epoch CSV. The last three columns are wall-clock measurements.
pub fn epochs_csv(record: &RunRecord) -> String {
    let mut s = String::from(
        "epoch,lr,train_loss,train_acc,test_loss,test_acc,selection,stop_layer,backward_time_s,cumulative_backward_time_s,epoch_time_s\n",
    );
    for e in &record.epochs {
        let (sel, stop) = match &e.selection {
            Some(sel) => (sel.to_string(), sel.stop_layer().to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.lr,
            e.train_loss,
            e.train_acc,
            opt(e.test_loss),
            opt(e.test_acc),
            sel,
            stop,
            e.backward_time_s,
            e.cumulative_backward_time_s,
            e.epoch_time_s
        );
    }
    s
}

fn stat(values: &[f64]) -> Value {
    let (mean, stderr) = mean_stderr(values);
    json!({ "mean": mean, "stderr": stderr })
}

pub fn summary_json(exp: &Experiment, records: &[RunRecord]) -> Value {
    let runs: Vec<Value> = records
        .iter()
        .map(|r| {
            json!({
                "seed": r.seed,
                "final_test_acc": r.final_test.accuracy,
                "final_test_loss": r.final_test.loss,
                "final_train_loss": r.epochs.last().map(|e| e.train_loss),
                "backward_time_s": r.total_backward_time_s,
                "total_time_s": r.total_time_s,
            })
        })
        .collect();
    let acc: Vec<f64> = records.iter().map(|r| r.final_test.accuracy).collect();
    let bt: Vec<f64> = records.iter().map(|r| r.total_backward_time_s).collect();
    let tt: Vec<f64> = records.iter().map(|r| r.total_time_s).collect();
    let test_set = match exp.config.test_subset {
        Some(n) => format!("first {n} samples"),
        None => "full".to_string(),
    };
    json!({
        "config": exp.config.raw,
        "network": {
            "family": exp.net.family(),
            "parametric_layers": exp.net.num_parametric(),
            "params": exp.net.param_count(),
        },
        "data": {
            "source": exp.train.source().to_string(),
            "train_size": exp.train.len(),
            "test_size": exp.test.len(),
            "test_set": test_set,
        },
        "runs": runs,
        "test_acc": stat(&acc),
        "backward_time_s": stat(&bt),
        "total_time_s": stat(&tt),
    })
}

/// Writes `summary.json`, `epochs_seed<k>.csv` and `final_seed<k>.lws`.
/// Returns the paths written, in a fixed order.
pub fn emit_results(
    exp: &Experiment,
    records: &[RunRecord],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    emit_with_extra(exp, records, out_dir, Value::Null)
}

fn emit_with_extra(
    exp: &Experiment,
    records: &[RunRecord],
    out_dir: &Path,
    extra: Value,
) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Input("no run records to emit".into()));
    }
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    let mut summary = summary_json(exp, records);
    if let (Value::Object(s), Value::Object(e)) = (&mut summary, extra) {
        s.extend(e);
    }
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("json values serialize");
    write(&path, text + "\n")?;
    written.push(path);
    for r in records {
        let path = out_dir.join(format!("epochs_seed{}.csv", r.seed));
        write(&path, epochs_csv(r))?;
        written.push(path);
        let path = out_dir.join(format!("final_seed{}.lws", r.seed));
        let last = r.epochs.last().map(|e| e.epoch).unwrap_or(0) as u64;
        save_checkpoint(&r.params, r.seed, last, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn reinit_csv(rows: &[ReinitRow]) -> String {
    let mut s = String::from("mode,percent,seed,test_accuracy\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.point.mode.as_str(),
            r.point.percent,
            r.seed,
            r.point.test_accuracy
        );
    }
    s
}

pub fn emit_reinit(
    exp: &Experiment,
    rows: &[ReinitRow],
    records: &[RunRecord],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = emit_results(exp, records, out_dir)?;
    let path = out_dir.join("reinit_sweep.csv");
    write(&path, reinit_csv(rows))?;
    written.push(path);
    Ok(written)
}

fn alpha_label(alpha: f64) -> String {
    alpha.to_string().replace('.', "p")
}

/// Heatmaps go to `alpha<a>/seed<k>/active_freq_layer<i>.csv` (bias vectors
/// in `active_freq_layer<i>_bias.csv`); per-layer means to
/// `active_freq_layer_means.csv`.
pub fn emit_frequency(
    exp: &Experiment,
    result: &FrequencyResult,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = emit_results(exp, &result.records, out_dir)?;
    let mut means = String::from("alpha,seed,layer,mean_frequency\n");
    for (seed, map) in &result.maps {
        let dir = out_dir
            .join(format!("alpha{}", alpha_label(map.alpha)))
            .join(format!("seed{seed}"));
        ensure_dir(&dir)?;
        for h in layer_heatmap(map, &exp.net)? {
            let path = dir.join(format!("active_freq_layer{}.csv", h.layer));
            write(&path, h.to_csv())?;
            written.push(path);
            let path = dir.join(format!("active_freq_layer{}_bias.csv", h.layer));
            write(&path, h.bias_csv())?;
            written.push(path);
        }
        for (i, m) in layer_mean_frequency(map, &exp.net)?.iter().enumerate() {
            let _ = writeln!(means, "{},{seed},{},{m}", map.alpha, i + 1);
        }
    }
    let path = out_dir.join("active_freq_layer_means.csv");
    write(&path, means)?;
    written.push(path);
    Ok(written)
}

/// Profiles go to `seed<k>/grad_profile_epoch<t>.csv`.
pub fn emit_profiles(
    exp: &Experiment,
    result: &ProfileResult,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = emit_results(exp, &result.records, out_dir)?;
    for (seed, profile) in &result.profiles {
        let dir = out_dir.join(format!("seed{seed}"));
        ensure_dir(&dir)?;
        let path = dir.join(format!(
            "grad_profile_epoch{}.csv",
            profile.epoch.unwrap_or(0)
        ));
        write(&path, profile.to_csv())?;
        written.push(path);
    }
    Ok(written)
}

/// Policy runs use the usual file names; the baseline goes to `full/`.
pub fn emit_bench(exp: &Experiment, result: &BenchResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let per_seed: Vec<Value> = result
        .policy_records
        .iter()
        .zip(&result.full_records)
        .map(|(p, f)| {
            json!({
                "seed": p.seed,
                "policy_backward_time_s": p.total_backward_time_s,
                "full_backward_time_s": f.total_backward_time_s,
                "ratio": p.total_backward_time_s / f.total_backward_time_s,
            })
        })
        .collect();
    let full_acc: Vec<f64> = result
        .full_records
        .iter()
        .map(|r| r.final_test.accuracy)
        .collect();
    let extra = json!({
        "bench": {
            "backward_time_ratio": result.time_ratio(),
            "per_seed": per_seed,
            "full_test_acc": stat(&full_acc),
            "stop_layer_median_s": result.stop_layer_timings,
        }
    });
    let mut written = emit_with_extra(exp, &result.policy_records, out_dir, extra)?;
    let full_dir = out_dir.join("full");
    written.extend(emit_results(exp, &result.full_records, &full_dir)?);
    let mut csv = String::from("stop_layer,median_backward_s\n");
    for t in &result.stop_layer_timings {
        let _ = writeln!(csv, "{},{}", t.stop_layer, t.median_s);
    }
    let path = out_dir.join("bench_backward.csv");
    write(&path, csv)?;
    written.push(path);
    Ok(written)
}
