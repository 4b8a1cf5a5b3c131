//! Cross-run comparison tables.
//!
//! A report merges the `metrics.csv` of several run directories, keyed by
//! (modality, ε), and shows each run's clean/robust accuracy next to its
//! delta against the first run (the baseline). Output comes in three
//! renderings: a merged CSV, an aligned plain-text table with ↑/↓ delta
//! arrows, and a gnuplot-compatible data file (one indexed block per
//! run × modality, rows sorted by ε) for robustness-vs-ε curves.
//!
//! Accuracies render as percentages with two decimals; deltas are
//! percentage points. The underlying counts stay exact rationals in each
//! run's own `metrics.csv`.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::Epsilon;
use crate::error::{Error, Result};
use crate::pipeline::CSV_HEADER;

/// One parsed row of a run's `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub stage: String,
    pub modality: String,
    pub scorer: String,
    pub alignment: String,
    pub lora: String,
    pub lambda: String,
    pub epsilon: String,
    pub clean_correct: u64,
    pub clean_total: u64,
    pub robust_correct: u64,
    pub robust_total: u64,
    pub seed: String,
    pub config_hash: String,
}

impl MetricsRow {
    pub fn clean_acc(&self) -> f64 {
        self.clean_correct as f64 / self.clean_total as f64
    }

    pub fn robust_acc(&self) -> f64 {
        self.robust_correct as f64 / self.robust_total as f64
    }
}

fn parse_count_pair(field: &str, label: &str, what: &str) -> Result<(u64, u64)> {
    let err = || {
        Error::Report(format!(
            "{label}: {what} field {field:?} is not an exact correct/total rational"
        ))
    };
    let (c, t) = field.split_once('/').ok_or_else(err)?;
    let c: u64 = c.parse().map_err(|_| err())?;
    let t: u64 = t.parse().map_err(|_| err())?;
    if t == 0 || c > t {
        return Err(err());
    }
    Ok((c, t))
}

/// Parse a `metrics.csv` body. The header must match [`CSV_HEADER`]
/// exactly; anything else is a schema mismatch.
pub fn parse_metrics_csv(label: &str, text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Report(format!("{label}: metrics CSV is empty")))?;
    if header != CSV_HEADER {
        return Err(Error::Report(format!(
            "{label}: schema mismatch, header is {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::Report(format!(
                "{label}: row {} has {} fields, expected 12",
                n + 2,
                fields.len()
            )));
        }
        let (clean_correct, clean_total) = parse_count_pair(fields[8], label, "clean_acc")?;
        let (robust_correct, robust_total) = parse_count_pair(fields[9], label, "robust_acc")?;
        rows.push(MetricsRow {
            run_id: fields[0].to_string(),
            stage: fields[1].to_string(),
            modality: fields[2].to_string(),
            scorer: fields[3].to_string(),
            alignment: fields[4].to_string(),
            lora: fields[5].to_string(),
            lambda: fields[6].to_string(),
            epsilon: fields[7].to_string(),
            clean_correct,
            clean_total,
            robust_correct,
            robust_total,
            seed: fields[10].to_string(),
            config_hash: fields[11].to_string(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Report(format!("{label}: metrics CSV has no rows")));
    }
    Ok(rows)
}

/// One run's labeled rows.
#[derive(Debug, Clone)]
pub struct RunTable {
    pub label: String,
    pub rows: Vec<MetricsRow>,
}

/// The three renderings of a merged comparison.
#[derive(Debug, Clone)]
pub struct Report {
    pub merged_csv: String,
    pub text_table: String,
    pub gnuplot_data: String,
}

fn pct(correct: u64, total: u64) -> String {
    format!("{:.2}", 100.0 * correct as f64 / total as f64)
}

/// Signed percentage-point delta with a table-style arrow: `↑` for gains,
/// `↓` for losses, `±0.00` for no change.
fn delta(run: (u64, u64), base: (u64, u64)) -> String {
    let d = 100.0 * (run.0 as f64 / run.1 as f64 - base.0 as f64 / base.1 as f64);
    let rendered = format!("{:.2}", d.abs());
    if rendered == "0.00" {
        "±0.00".to_string()
    } else if d > 0.0 {
        format!("↑{rendered}")
    } else {
        format!("↓{rendered}")
    }
}

fn key_of(row: &MetricsRow) -> (String, String) {
    (row.modality.clone(), row.epsilon.clone())
}

/// Check one run covers exactly the baseline's (modality, ε) keys, each
/// once, and return its rows in baseline key order.
fn align_rows<'a>(
    baseline_keys: &[(String, String)],
    run: &'a RunTable,
) -> Result<Vec<&'a MetricsRow>> {
    let mut aligned = Vec::with_capacity(baseline_keys.len());
    for key in baseline_keys {
        let matches: Vec<&MetricsRow> =
            run.rows.iter().filter(|r| &key_of(r) == key).collect();
        match matches.len() {
            1 => aligned.push(matches[0]),
            0 => {
                return Err(Error::Report(format!(
                    "{}: schema mismatch, no row for modality {} at ε {}",
                    run.label, key.0, key.1
                )))
            }
            n => {
                return Err(Error::Report(format!(
                    "{}: {n} rows for modality {} at ε {}; comparison needs single-model runs",
                    run.label, key.0, key.1
                )))
            }
        }
    }
    if run.rows.len() != baseline_keys.len() {
        return Err(Error::Report(format!(
            "{}: schema mismatch, run has {} rows but the baseline covers {} (modality, ε) cells",
            run.label,
            run.rows.len(),
            baseline_keys.len()
        )));
    }
    Ok(aligned)
}

/// Merge runs into the three renderings. The first run is the baseline;
/// with a single run no delta columns are emitted.
pub fn build_report(runs: &[RunTable]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Report("report needs at least one run directory".into()));
    }
    let baseline = &runs[0];
    let mut baseline_keys = Vec::new();
    for row in &baseline.rows {
        let key = key_of(row);
        if baseline_keys.contains(&key) {
            return Err(Error::Report(format!(
                "{}: duplicate rows for modality {} at ε {}; comparison needs single-model runs",
                baseline.label, key.0, key.1
            )));
        }
        baseline_keys.push(key);
    }
    let mut aligned: Vec<Vec<&MetricsRow>> = vec![baseline.rows.iter().collect()];
    for run in &runs[1..] {
        aligned.push(align_rows(&baseline_keys, run)?);
    }

    let with_deltas = runs.len() > 1;
    let merged_csv = render_merged_csv(runs, &aligned, with_deltas);
    let text_table = render_text_table(runs, &aligned, with_deltas);
    let gnuplot_data = render_gnuplot(runs, &aligned)?;
    Ok(Report { merged_csv, text_table, gnuplot_data })
}

fn render_merged_csv(runs: &[RunTable], aligned: &[Vec<&MetricsRow>], with_deltas: bool) -> String {
    let mut out = String::from("run,stage,modality,epsilon,clean_pct,robust_pct");
    if with_deltas {
        out.push_str(",clean_delta,robust_delta");
    }
    out.push('\n');
    for (r, run) in runs.iter().enumerate() {
        for (k, row) in aligned[r].iter().enumerate() {
            let base = aligned[0][k];
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                run.label,
                row.stage,
                row.modality,
                row.epsilon,
                pct(row.clean_correct, row.clean_total),
                pct(row.robust_correct, row.robust_total),
            );
            if with_deltas {
                let _ = write!(
                    out,
                    ",{},{}",
                    csv_delta(row.clean_correct, row.clean_total, base.clean_correct, base.clean_total),
                    csv_delta(row.robust_correct, row.robust_total, base.robust_correct, base.robust_total),
                );
            }
            out.push('\n');
        }
    }
    out
}

/// Plain signed two-decimal delta for the CSV (no arrows there).
fn csv_delta(c: u64, t: u64, bc: u64, bt: u64) -> String {
    let d = 100.0 * (c as f64 / t as f64 - bc as f64 / bt as f64);
    let rendered = format!("{d:.2}");
    // avoid the "-0.00" artifact
    if rendered == "-0.00" {
        "0.00".to_string()
    } else {
        rendered
    }
}

fn render_text_table(runs: &[RunTable], aligned: &[Vec<&MetricsRow>], with_deltas: bool) -> String {
    let mut header = vec![
        "run".to_string(),
        "stage".to_string(),
        "modality".to_string(),
        "epsilon".to_string(),
        "clean".to_string(),
        "robust".to_string(),
    ];
    if with_deltas {
        header.push("Δclean".to_string());
        header.push("Δrobust".to_string());
    }
    let mut table: Vec<Vec<String>> = vec![header];
    for (r, run) in runs.iter().enumerate() {
        for (k, row) in aligned[r].iter().enumerate() {
            let base = aligned[0][k];
            let mut cells = vec![
                run.label.clone(),
                row.stage.clone(),
                row.modality.clone(),
                row.epsilon.clone(),
                pct(row.clean_correct, row.clean_total),
                pct(row.robust_correct, row.robust_total),
            ];
            if with_deltas {
                if r == 0 {
                    cells.push("-".to_string());
                    cells.push("-".to_string());
                } else {
                    cells.push(delta(
                        (row.clean_correct, row.clean_total),
                        (base.clean_correct, base.clean_total),
                    ));
                    cells.push(delta(
                        (row.robust_correct, row.robust_total),
                        (base.robust_correct, base.robust_total),
                    ));
                }
            }
            table.push(cells);
        }
    }

    let cols = table[0].len();
    let mut widths = vec![0usize; cols];
    for row in &table {
        for (c, cell) in row.iter().enumerate() {
            widths[c] = widths[c].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let pad = widths[c] - cell.chars().count();
                format!("{cell}{}", " ".repeat(pad))
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    out
}

/// Gnuplot data: one indexed block per run × modality, columns
/// `eps_value clean_pct robust_pct`, rows sorted by ε value.
fn render_gnuplot(runs: &[RunTable], aligned: &[Vec<&MetricsRow>]) -> Result<String> {
    let mut out = String::from("# columns: eps_value clean_pct robust_pct\n");
    for (r, run) in runs.iter().enumerate() {
        let mut modalities = Vec::new();
        for row in &aligned[r] {
            if !modalities.contains(&row.modality) {
                modalities.push(row.modality.clone());
            }
        }
        for modality in &modalities {
            let mut pts = Vec::new();
            for row in aligned[r].iter().filter(|row| &row.modality == modality) {
                let eps = Epsilon::parse(&row.epsilon)?;
                pts.push((
                    eps.value,
                    pct(row.clean_correct, row.clean_total),
                    pct(row.robust_correct, row.robust_total),
                    row.stage.clone(),
                ));
            }
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite ε"));
            let stage = &pts[0].3;
            let _ = writeln!(out, "\n# run {} stage {stage} modality {modality}", run.label);
            for (v, c, rb, _) in &pts {
                let _ = writeln!(out, "{v} {c} {rb}");
            }
        }
    }
    Ok(out)
}

/// Read each directory's `metrics.csv` and build the comparison. Labels
/// are the directory paths as given.
pub fn report_dirs(dirs: &[impl AsRef<Path>]) -> Result<Report> {
    let mut runs = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let dir = dir.as_ref();
        let label = dir.display().to_string();
        let csv_path = dir.join("metrics.csv");
        let text = std::fs::read_to_string(&csv_path).map_err(|e| {
            Error::Report(format!("{label}: cannot read {}: {e}", csv_path.display()))
        })?;
        let rows = parse_metrics_csv(&label, &text)?;
        runs.push(RunTable { label, rows });
    }
    build_report(&runs)
}
