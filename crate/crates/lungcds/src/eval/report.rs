//! Report assembly: per-case score rows, grid aggregation, and rendering.
//!
//! Rows are the unit of persistence (`cases.jsonl`, one JSON object per
//! line); the grids are re-derived from them, so a report can always be
//! re-rendered from the dump. Aggregates are plain means over scored cases;
//! cells with no scored cases render as `--`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::InputMode;
use crate::case::{Language, TaskId};

use super::metrics::WinRateMatrix;
use super::RunMode;

/// One case's scores under one run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScoreRow {
    pub model: String,
    pub mode: RunMode,
    pub input_mode: InputMode,
    pub task: TaskId,
    pub language: Language,
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Which scorer produced the f1 column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_scorer: Option<String>,
}

impl CaseScoreRow {
    pub fn empty(
        model: &str,
        mode: RunMode,
        input_mode: InputMode,
        task: TaskId,
        language: Language,
        case_id: &str,
    ) -> Self {
        CaseScoreRow {
            model: model.to_string(),
            mode,
            input_mode,
            task,
            language,
            case_id: case_id.to_string(),
            exact: None,
            t_correct: None,
            n_correct: None,
            m_correct: None,
            rq: None,
            precision: None,
            f1: None,
            error: None,
            f1_scorer: None,
        }
    }
}

/// Serialize rows as one JSON object per line, sorted for determinism.
pub fn rows_to_jsonl(rows: &[CaseScoreRow]) -> String {
    let mut sorted: Vec<&CaseScoreRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (format!("{:?}", a.input_mode).as_str(), &a.model, format!("{:?}", a.mode))
            .cmp(&(format!("{:?}", b.input_mode).as_str(), &b.model, format!("{:?}", b.mode)))
            .then_with(|| a.task.to_string().cmp(&b.task.to_string()))
            .then_with(|| a.language.to_string().cmp(&b.language.to_string()))
            .then_with(|| a.case_id.cmp(&b.case_id))
    });
    let mut out = String::new();
    for row in sorted {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    out
}

pub fn rows_from_jsonl(raw: &str) -> Result<Vec<CaseScoreRow>, serde_json::Error> {
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

fn pct(values: impl Iterator<Item = bool>) -> Option<f64> {
    mean(values.map(|b| if b { 100.0 } else { 0.0 }))
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct CellAggregates {
    pub acc: Option<f64>,
    pub t_acc: Option<f64>,
    pub n_acc: Option<f64>,
    pub m_acc: Option<f64>,
    pub rq: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub cases: usize,
    pub errored: usize,
}

/// Aggregate the rows for one (model, mode, input_mode, task, language) cell.
pub fn aggregate_cell(rows: &[&CaseScoreRow]) -> CellAggregates {
    CellAggregates {
        acc: pct(rows.iter().filter_map(|r| r.exact)),
        t_acc: pct(rows.iter().filter_map(|r| r.t_correct)),
        n_acc: pct(rows.iter().filter_map(|r| r.n_correct)),
        m_acc: pct(rows.iter().filter_map(|r| r.m_correct)),
        rq: mean(rows.iter().filter_map(|r| r.rq)),
        precision: mean(rows.iter().filter_map(|r| r.precision)),
        f1: mean(rows.iter().filter_map(|r| r.f1)),
        cases: rows.len(),
        errored: rows.iter().filter(|r| r.error.is_some()).count(),
    }
}

type CellKey = (InputMode, String, RunMode, TaskId, Language);

fn cell_map(rows: &[CaseScoreRow]) -> BTreeMap<CellKey, Vec<&CaseScoreRow>> {
    let mut map: BTreeMap<CellKey, Vec<&CaseScoreRow>> = BTreeMap::new();
    for row in rows {
        map.entry((
            row.input_mode,
            row.model.clone(),
            row.mode,
            row.task,
            row.language,
        ))
        .or_default()
        .push(row);
    }
    map
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "--".to_string(),
    }
}

fn input_mode_title(mode: InputMode) -> &'static str {
    match mode {
        InputMode::ImageDirect => "Image input",
        InputMode::TextOnly => "Text input",
    }
}

fn mode_suffix(mode: RunMode) -> &'static str {
    match mode {
        RunMode::Direct => "",
        RunMode::Pipeline => " + pipeline",
    }
}

/// Render the main grid (markdown) and the long-format CSV.
///
/// The grid groups rows by input mode; each (model, mode) row carries the
/// twelve task-metric-language columns, with absent cells as `--`. A second
/// grid reports per-component staging accuracy.
pub fn build_report(rows: &[CaseScoreRow], win_rates: Option<&WinRateMatrix>) -> (String, String) {
    let cells = cell_map(rows);
    let mut md = String::new();
    md.push_str("# Evaluation report\n");

    // Collect (input_mode, model, mode) row identities in order.
    let mut row_keys: Vec<(InputMode, String, RunMode)> = Vec::new();
    for (im, model, mode, _, _) in cells.keys() {
        let key = (*im, model.clone(), *mode);
        if !row_keys.contains(&key) {
            row_keys.push(key);
        }
    }

    let langs = [Language::Zh, Language::En];
    let agg = |im: InputMode, model: &str, mode: RunMode, task: TaskId, lang: Language| {
        cells
            .get(&(im, model.to_string(), mode, task, lang))
            .map(|rows| aggregate_cell(rows))
            .unwrap_or_default()
    };

    for im in [InputMode::ImageDirect, InputMode::TextOnly] {
        let section: Vec<_> = row_keys.iter().filter(|(m, _, _)| *m == im).collect();
        if section.is_empty() {
            continue;
        }
        md.push_str(&format!("\n## {}\n\n", input_mode_title(im)));
        md.push_str(
            "| Model | Staging Acc ZH | Staging Acc EN | RQ ZH | RQ EN | Treatment Prec ZH | Treatment Prec EN | Treatment F1 ZH | Treatment F1 EN | E2E Prec ZH | E2E Prec EN | E2E F1 ZH | E2E F1 EN |\n",
        );
        md.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
        for (_, model, mode) in &section {
            let mut line = format!("| {}{} |", model, mode_suffix(*mode));
            for (task, metric) in [
                (TaskId::TnmStaging, "acc"),
                (TaskId::TnmStaging, "rq"),
                (TaskId::TreatmentRecommendation, "precision"),
                (TaskId::TreatmentRecommendation, "f1"),
                (TaskId::EndToEnd, "precision"),
                (TaskId::EndToEnd, "f1"),
            ] {
                for lang in langs {
                    let a = agg(im, model, *mode, task, lang);
                    let v = match metric {
                        "acc" => a.acc,
                        "rq" => a.rq,
                        "precision" => a.precision,
                        _ => a.f1,
                    };
                    line.push_str(&format!(" {} |", fmt_cell(v)));
                }
            }
            md.push_str(&line);
            md.push('\n');
        }

        // Per-component staging accuracy for this section.
        let any_staging = section.iter().any(|(im2, model, mode)| {
            langs
                .iter()
                .any(|l| cells.contains_key(&(*im2, model.clone(), *mode, TaskId::TnmStaging, *l)))
        });
        if any_staging {
            md.push_str("\nPer-component staging accuracy:\n\n");
            md.push_str("| Model | T ZH | T EN | N ZH | N EN | M ZH | M EN |\n");
            md.push_str("|---|---|---|---|---|---|---|\n");
            for (_, model, mode) in &section {
                let mut line = format!("| {}{} |", model, mode_suffix(*mode));
                for metric in ["t", "n", "m"] {
                    for lang in langs {
                        let a = agg(im, model, *mode, TaskId::TnmStaging, lang);
                        let v = match metric {
                            "t" => a.t_acc,
                            "n" => a.n_acc,
                            _ => a.m_acc,
                        };
                        line.push_str(&format!(" {} |", fmt_cell(v)));
                    }
                }
                md.push_str(&line);
                md.push('\n');
            }
        }
    }

    if let Some(w) = win_rates {
        md.push_str("\n## Pairwise win rates\n\n");
        md.push_str("| vs |");
        for name in &w.names {
            md.push_str(&format!(" {name} |"));
        }
        md.push('\n');
        md.push_str("|---|");
        md.push_str(&"---|".repeat(w.names.len()));
        md.push('\n');
        for (i, name) in w.names.iter().enumerate() {
            md.push_str(&format!("| {name} |"));
            for j in 0..w.names.len() {
                md.push_str(&format!(" {:.3} |", w.values[i][j]));
            }
            md.push('\n');
        }
    }

    if let Some(scorer) = rows.iter().find_map(|r| r.f1_scorer.as_deref()) {
        md.push_str(&format!("\nF1 scorer: {scorer}\n"));
    }

    // Long-format CSV: one aggregate value per line.
    let mut csv = String::from("input_mode,model,mode,task,language,metric,value,cases,errored\n");
    for ((im, model, mode, task, lang), cell_rows) in &cells {
        let a = aggregate_cell(cell_rows);
        let im_s = match im {
            InputMode::ImageDirect => "image",
            InputMode::TextOnly => "text",
        };
        let mode_s = match mode {
            RunMode::Direct => "direct",
            RunMode::Pipeline => "pipeline",
        };
        for (metric, value) in [
            ("acc", a.acc),
            ("t_acc", a.t_acc),
            ("n_acc", a.n_acc),
            ("m_acc", a.m_acc),
            ("rq", a.rq),
            ("precision", a.precision),
            ("f1", a.f1),
        ] {
            if let Some(v) = value {
                csv.push_str(&format!(
                    "{im_s},{model},{mode_s},{task},{lang},{metric},{v:.6},{},{}\n",
                    a.cases, a.errored
                ));
            }
        }
    }
    (md, csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, task: TaskId, lang: Language, exact: Option<bool>) -> CaseScoreRow {
        let mut r = CaseScoreRow::empty(
            model,
            RunMode::Direct,
            InputMode::TextOnly,
            task,
            lang,
            "c1",
        );
        r.exact = exact;
        r.t_correct = exact;
        r.n_correct = exact;
        r.m_correct = exact;
        r.rq = exact.map(|b| if b { 90.0 } else { 40.0 });
        r
    }

    #[test]
    fn aggregates_mean_case_scores() {
        let rows = [row("m", TaskId::TnmStaging, Language::Zh, Some(true)),
            row("m", TaskId::TnmStaging, Language::Zh, Some(true)),
            row("m", TaskId::TnmStaging, Language::Zh, Some(false)),
            row("m", TaskId::TnmStaging, Language::Zh, Some(false))];
        let refs: Vec<&CaseScoreRow> = rows.iter().collect();
        let a = aggregate_cell(&refs);
        assert_eq!(a.acc, Some(50.0));
        assert_eq!(a.rq, Some(65.0));
    }

    #[test]
    fn report_renders_missing_cells_as_dashes() {
        let rows = vec![row("m", TaskId::TnmStaging, Language::Zh, Some(true))];
        let (md, csv) = build_report(&rows, None);
        assert!(md.contains("| m |"), "{md}");
        assert!(md.contains("--"), "EN and treatment cells absent: {md}");
        assert!(csv.contains("text,m,direct,staging,zh,acc,100.000000,1,0"));
    }

    #[test]
    fn jsonl_round_trips_and_sorts() {
        let rows = vec![
            row("b", TaskId::TnmStaging, Language::Zh, Some(true)),
            row("a", TaskId::EndToEnd, Language::En, None),
        ];
        let jsonl = rows_to_jsonl(&rows);
        let back = rows_from_jsonl(&jsonl).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].model, "a");
        // Serialization is stable.
        assert_eq!(jsonl, rows_to_jsonl(&back));
    }

    #[test]
    fn paired_mode_rows_render() {
        let mut rows = vec![row("m", TaskId::TnmStaging, Language::Zh, Some(true))];
        let mut piped = row("m", TaskId::TnmStaging, Language::Zh, Some(true));
        piped.mode = RunMode::Pipeline;
        rows.push(piped);
        let (md, _) = build_report(&rows, None);
        assert!(md.contains("| m |"));
        assert!(md.contains("| m + pipeline |"));
    }
}
