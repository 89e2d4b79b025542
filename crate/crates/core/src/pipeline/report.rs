use std::fmt::Write;
use std::path::Path;

use crate::datagen::DatasetMeta;
use crate::nn::TrainingReport;
use crate::playback::MismatchScore;
use crate::sensitivity::SensitivityResult;

use super::*;

const REQUIRED: [&str; 9] = [
    VALIDATION_PRE,
    COMPARISON_PRE_SVG,
    SENSITIVITY_JSON,
    "dataset/meta.json",
    CNN_CHECKPOINT,
    TRAINING_CNN,
    LOSS_SVG,
    CALIBRATION_REPORT,
    COMPARISON_POST_SVG,
];

/// Artifacts `summary.md` is built from that are absent in `out`.
pub fn required_artifacts(out: &Path) -> Vec<String> {
    REQUIRED
        .iter()
        .filter(|a| !out.join(a).exists())
        .map(|a| a.to_string())
        .collect()
}

fn score_row(s: &mut String, label: &str, score: &MismatchScore, threshold: f64) {
    let verdict = if needs_calibration(score, threshold) {
        "calibration needed"
    } else {
        "no calibration needed"
    };
    let _ = writeln!(
        s,
        "| {label} | {:.4} | {:.4} | {:.4} | {verdict} |",
        score.nrmse_p, score.nrmse_q, score.combined
    );
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.prec$}"))
}

fn training_line(s: &mut String, label: &str, r: &TrainingReport) {
    let _ = writeln!(
        s,
        "- {label}: {} weights, {} epochs run, best epoch {}, best validation loss {:.4} (normalized {:.4}){}",
        r.n_params,
        r.epochs_run,
        r.best_epoch,
        r.best_val_loss,
        r.best_val_loss / r.loss_normalizer,
        if r.stopped_early { ", stopped early" } else { "" }
    );
}

/// Markdown summary of a completed run. A pure function of the artifacts,
/// so unchanged inputs render byte-identically.
pub fn render_summary(out: &Path) -> Result<String, PipelineError> {
    let missing = required_artifacts(out);
    if !missing.is_empty() {
        return Err(PipelineError::MissingArtifacts(missing));
    }
    let report: CalibrationReport = read_json(&out.join(CALIBRATION_REPORT))?;
    let sens: SensitivityResult<f64> = read_json(&out.join(SENSITIVITY_JSON))?;
    let meta: DatasetMeta = read_json(&out.join("dataset/meta.json"))?;
    let cnn: TrainingReport = read_json(&out.join(TRAINING_CNN))?;
    let mlp: Option<TrainingReport> = if out.join(TRAINING_MLP).exists() {
        Some(read_json(&out.join(TRAINING_MLP))?)
    } else {
        None
    };

    let mut s = String::new();
    let _ = writeln!(s, "# Calibration summary\n");
    let _ = writeln!(s, "Event: `{}`\n", report.event);

    let _ = writeln!(s, "## Event playback\n");
    let _ = writeln!(s, "Mismatch threshold: {}\n", report.mismatch_threshold);
    let _ = writeln!(s, "| model | NRMSE P | NRMSE Q | combined | verdict |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    score_row(&mut s, "original", &report.pre, report.mismatch_threshold);
    match (&report.post, &report.post_error) {
        (Some(p), _) => score_row(&mut s, "CNN-calibrated", p, report.mismatch_threshold),
        (None, Some(e)) => {
            let _ = writeln!(s, "| CNN-calibrated | - | - | - | replay failed: {e} |");
        }
        _ => {}
    }
    if let Some(p) = &report.post_mlp {
        score_row(&mut s, "MLP-calibrated", p, report.mismatch_threshold);
    }
    if let Some(r) = report.improvement_ratio {
        let _ = writeln!(s, "\nPost/pre combined mismatch ratio: {r:.4}");
    }

    let _ = writeln!(s, "\n## Sensitivity ranking\n");
    let _ = writeln!(
        s,
        "Relative step {}, keep ratio {}, response scaling `{:?}`.\n",
        sens.delta_fraction, sens.keep_ratio, sens.response_scaling
    );
    let _ = writeln!(s, "| parameter | base value | S | selected |");
    let _ = writeln!(s, "|---|---|---|---|");
    let mut ranked = sens.results.clone();
    ranked.sort_by(|a, b| b.s.total_cmp(&a.s).then_with(|| a.name.cmp(&b.name)));
    for r in &ranked {
        let sel = if sens.selected.contains(&r.name) { "yes" } else { "no" };
        let _ = writeln!(s, "| {} | {} | {:.6} | {sel} |", r.name, r.p0, r.s);
    }
    for name in &sens.unscreenable {
        let _ = writeln!(s, "| {name} | 0 | - | unscreenable |");
    }

    let _ = writeln!(s, "\n## Test-split absolute error (% of base value)\n");
    let _ = writeln!(
        s,
        "{} samples, split {}/{}/{} (train/validation/test).\n",
        meta.n,
        meta.split.as_ref().map_or(0, |x| x.train.len()),
        meta.split.as_ref().map_or(0, |x| x.val.len()),
        meta.split.as_ref().map_or(0, |x| x.test.len()),
    );
    let _ = writeln!(s, "| parameter | CNN mean | CNN max | MLP mean | MLP max |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    if let Some(t) = &cnn.test {
        for (j, pe) in t.params.iter().enumerate() {
            let m = mlp.as_ref().and_then(|r| r.test.as_ref()).map(|t| &t.params[j]);
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {} | {} |",
                pe.name,
                pe.mean_abs_pct,
                pe.max_abs_pct,
                opt(m.map(|p| p.mean_abs_pct), 2),
                opt(m.map(|p| p.max_abs_pct), 2)
            );
        }
    }

    let _ = writeln!(s, "\n## Parameter estimates\n");
    let _ = writeln!(s, "| parameter | original | CNN-predicted | MLP-predicted |");
    let _ = writeln!(s, "|---|---|---|---|");
    for row in &report.parameters {
        let clamp = |c: bool| if c { " (clamped)" } else { "" };
        let mlp = match row.mlp {
            Some(v) => format!("{v:.4}{}", clamp(row.mlp_clamped.unwrap_or(false))),
            None => "n/a".into(),
        };
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4}{} | {mlp} |",
            row.name,
            row.original,
            row.cnn,
            clamp(row.cnn_clamped)
        );
    }

    let _ = writeln!(s, "\n## Training\n");
    training_line(&mut s, "CNN", &cnn);
    if let Some(m) = &mlp {
        training_line(&mut s, "MLP", m);
    }

    let _ = writeln!(s, "\n## Plots\n");
    let _ = writeln!(s, "- Playback before calibration: [{COMPARISON_PRE_SVG}]({COMPARISON_PRE_SVG})");
    let _ = writeln!(s, "- Playback after calibration: [{COMPARISON_POST_SVG}]({COMPARISON_POST_SVG})");
    let _ = writeln!(s, "- Loss curves: [{LOSS_SVG}]({LOSS_SVG})");

    let _ = writeln!(s, "\n## Files\n");
    let mut files: Vec<&str> = report.artifacts.iter().map(String::as_str).collect();
    files.push(CALIBRATION_REPORT);
    for f in files {
        let _ = writeln!(s, "- [{f}]({f})");
    }
    let _ = writeln!(s, "- [{TIMINGS}]({TIMINGS}) (wall-clock stage durations, vary between runs)");
    Ok(s)
}
