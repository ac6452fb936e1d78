//! Results files (CSV with a one-line JSON header) and their rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sweep::{median, SweepTable};
use super::EvalReport;
use crate::error::{Error, Result};
use crate::heads::HeadVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    CrossEval,
    StageSweep,
    HeadSweep,
}

impl ExperimentKind {
    /// Label columns, then `seed`, then numeric columns.
    pub fn columns(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            ExperimentKind::CrossEval => (
                &["model", "strategy", "regime"],
                &["id_original", "id_masked", "ood_original", "ood_masked"],
            ),
            ExperimentKind::StageSweep => (&["model", "stage"], &["id_test", "ood_test"]),
            ExperimentKind::HeadSweep => (&["model", "strategy", "head", "regime"], &["id_test", "ood_test"]),
        }
    }

    pub fn header(self) -> Vec<String> {
        let (labels, values) = self.columns();
        labels
            .iter()
            .chain(&["seed"])
            .chain(values)
            .map(|s| s.to_string())
            .collect()
    }

    fn default_title(self) -> &'static str {
        match self {
            ExperimentKind::CrossEval => "Results: Early Masking vs Baseline",
            ExperimentKind::StageSweep => "Feature masking at different stages",
            ExperimentKind::HeadSweep => "Varying the ViT representation",
        }
    }
}

fn default_id_name() -> String {
    "CUB-analog".into()
}

fn default_ood_name() -> String {
    "OOD".into()
}

/// The JSON line heading every results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsMeta {
    pub experiment: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default = "default_id_name")]
    pub id_name: String,
    #[serde(default = "default_ood_name")]
    pub ood_name: String,
}

impl ResultsMeta {
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            title: None,
            id_name: default_id_name(),
            ood_name: default_ood_name(),
        }
    }

    pub fn title(&self) -> &str {
        self.title.as_deref().unwrap_or(self.experiment.default_title())
    }
}

/// One CSV row, in [`ExperimentKind::header`] order.
pub type ResultsRow = Vec<String>;

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsFile {
    pub meta: ResultsMeta,
    pub rows: Vec<ResultsRow>,
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

impl ResultsFile {
    pub fn from_reports(meta: ResultsMeta, reports: &[EvalReport]) -> Self {
        let rows = reports
            .iter()
            .map(|r| {
                vec![
                    r.meta.model_id.clone(),
                    r.meta.strategy.clone(),
                    r.meta.regime.clone(),
                    r.meta.seed.to_string(),
                    num(r.id_original),
                    num(r.id_masked),
                    num(r.ood_original),
                    num(r.ood_masked),
                ]
            })
            .collect();
        Self { meta, rows }
    }

    /// Rows of a sweep table, prefixed with `model`.
    pub fn from_sweep(meta: ResultsMeta, model: &str, table: &SweepTable) -> Self {
        let mut rows = Vec::new();
        for row in &table.rows {
            for (seed, id, ood) in &row.per_seed {
                let mut r = vec![model.to_string()];
                r.extend(row.labels.iter().cloned());
                r.extend([seed.to_string(), num(*id), num(*ood)]);
                rows.push(r);
            }
        }
        Self { meta, rows }
    }

    /// Median of every numeric column per distinct label tuple, in first-seen order.
    pub fn aggregate(&self) -> Vec<(Vec<String>, Vec<f64>)> {
        let (labels, values) = self.meta.experiment.columns();
        let nl = labels.len();
        let mut groups: Vec<(Vec<String>, Vec<Vec<f64>>)> = Vec::new();
        for row in &self.rows {
            let key = row[..nl].to_vec();
            let vals = row[nl + 1..].iter().map(|v| v.parse::<f64>().unwrap_or(f64::NAN));
            let idx = match groups.iter().position(|g| g.0 == key) {
                Some(i) => i,
                None => {
                    groups.push((key, vec![Vec::new(); values.len()]));
                    groups.len() - 1
                }
            };
            for (col, v) in groups[idx].1.iter_mut().zip(vals) {
                col.push(v);
            }
        }
        groups
            .into_iter()
            .map(|(k, cols)| (k, cols.iter().map(|c| median(c)).collect()))
            .collect()
    }
}

pub fn write_results(path: &Path, file: &ResultsFile) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = serde_json::to_string(&file.meta)?;
    out.push('\n');
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(file.meta.experiment.header())?;
    for r in &file.rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::Results {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    out.push_str(&String::from_utf8_lossy(&body));
    fs::write(path, out)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<ResultsFile> {
    let bad = |message: String| Error::Results {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path)?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let meta: ResultsMeta =
        serde_json::from_str(first).map_err(|e| bad(format!("metadata line: {e}")))?;
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let expected = meta.experiment.header();
    if header != expected {
        return Err(bad(format!("expected columns {}, found {}", expected.join(","), header.join(","))));
    }
    let nl = meta.experiment.columns().0.len();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row: Vec<String> = rec.iter().map(str::to_string).collect();
        if row.len() != expected.len() {
            return Err(bad(format!("row {} has {} fields", i + 1, row.len())));
        }
        for v in &row[nl + 1..] {
            let x: f64 = v.parse().map_err(|_| bad(format!("row {}: `{v}` is not a number", i + 1)))?;
            if !(0.0..=100.0).contains(&x) {
                return Err(bad(format!("row {}: accuracy {x} outside [0, 100]", i + 1)));
            }
        }
        rows.push(row);
    }
    Ok(ResultsFile { meta, rows })
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "-".into()
    }
}

fn strategy_display(label: &str, hyphenated: bool) -> String {
    match label {
        "baseline" => "Baseline".into(),
        "early" if hyphenated => "Early-Masked".into(),
        "early" => "Masked".into(),
        "late" => "Late-Masked".into(),
        other => match other.strip_prefix("late@") {
            Some(_) if hyphenated => "Late-Masked".into(),
            Some(stage) => format!("Late-Masked ({stage})"),
            None => other.into(),
        },
    }
}

fn regime_display(label: &str) -> &str {
    match label {
        "frozen" => "Frozen",
        "fine_tune" => "Fine-tuned",
        other => other,
    }
}

fn head_display(label: &str) -> String {
    label
        .parse::<HeadVariant>()
        .map(|h| h.display_name().to_string())
        .unwrap_or_else(|_| label.to_string())
}

fn table_line(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn separator(n: usize) -> String {
    format!("|{}\n", "---|".repeat(n))
}

/// Blanks a leading cell equal to the previous row's, like a merged column.
fn blank_repeats(rows: &mut [Vec<String>], col: usize) {
    for i in (1..rows.len()).rev() {
        if rows[i][..=col] == rows[i - 1][..=col] {
            rows[i][col].clear();
        }
    }
}

fn render_table(file: &ResultsFile) -> String {
    let meta = &file.meta;
    let (id, ood) = (&meta.id_name, &meta.ood_name);
    let agg = file.aggregate();
    let (header, mut rows): (Vec<String>, Vec<Vec<String>>) = match meta.experiment {
        ExperimentKind::CrossEval => {
            let multi_regime = agg.iter().any(|(k, _)| k[2] != agg[0].0[2]);
            let header = vec![
                "Model".into(),
                "Training".into(),
                format!("{id}(%) Test on original"),
                format!("{id}(%) Test on masked"),
                format!("{ood}(%) Test on original"),
                format!("{ood}(%) Test on masked"),
            ];
            let rows = agg
                .iter()
                .map(|(k, v)| {
                    let mut training = strategy_display(&k[1], false);
                    if multi_regime {
                        training = format!("{training} ({})", regime_display(&k[2]));
                    }
                    let mut r = vec![k[0].clone(), training];
                    r.extend(v.iter().map(|x| fmt(*x)));
                    r
                })
                .collect();
            (header, rows)
        }
        ExperimentKind::StageSweep => {
            let header = vec![
                "Backbone".into(),
                "Feature Masking".into(),
                format!("{id}(%)"),
                format!("{ood}(%)"),
            ];
            let rows = agg
                .iter()
                .map(|(k, v)| vec![k[0].clone(), k[1].clone(), fmt(v[0]), fmt(v[1])])
                .collect();
            (header, rows)
        }
        ExperimentKind::HeadSweep => {
            let header = vec![
                "Backbone".into(),
                "Training".into(),
                "Representation".into(),
                format!("{id}(%) Frozen"),
                format!("{id}(%) Fine-tuned"),
                format!("{ood}(%) Frozen"),
                format!("{ood}(%) Fine-tuned"),
            ];
            let mut keys: Vec<&[String]> = Vec::new();
            for (k, _) in &agg {
                if !keys.contains(&&k[..3]) {
                    keys.push(&k[..3]);
                }
            }
            let cell = |key: &[String], regime: &str, col: usize| {
                agg.iter()
                    .find(|(k, _)| &k[..3] == key && k[3] == regime)
                    .map(|(_, v)| fmt(v[col]))
                    .unwrap_or_else(|| "-".into())
            };
            let rows = keys
                .iter()
                .map(|k| {
                    vec![
                        k[0].clone(),
                        strategy_display(&k[1], true),
                        head_display(&k[2]),
                        cell(k, "frozen", 0),
                        cell(k, "fine_tune", 0),
                        cell(k, "frozen", 1),
                        cell(k, "fine_tune", 1),
                    ]
                })
                .collect();
            (header, rows)
        }
    };
    let label_cols = match meta.experiment {
        ExperimentKind::HeadSweep => 2,
        _ => 1,
    };
    for col in (0..label_cols).rev() {
        blank_repeats(&mut rows, col);
    }
    let mut out = table_line(&header);
    out.push_str(&separator(header.len()));
    for r in &rows {
        out.push_str(&table_line(r));
    }
    out
}

/// Markdown document with one table per results file, in the given order.
pub fn render_markdown(files: &[ResultsFile]) -> String {
    let mut out = String::from("# Results\n");
    for f in files {
        let _ = write!(out, "\n## {}\n\n{}", f.meta.title(), render_table(f));
    }
    out
}

/// Aggregated (median over seeds) table as CSV.
pub fn render_tables_csv(file: &ResultsFile) -> Result<String> {
    let (labels, values) = file.meta.experiment.columns();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(labels.iter().chain(values))?;
    for (k, v) in file.aggregate() {
        let mut rec = k;
        rec.extend(v.iter().map(|x| format!("{x:.2}")));
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage_fixture() -> ResultsFile {
        let mut meta = ResultsMeta::new(ExperimentKind::StageSweep);
        meta.id_name = "CUB".into();
        meta.ood_name = "Waterbird".into();
        let rows = [("L", "88.73", "77.19"), ("L-1", "89.35", "81.22"), ("0", "90.73", "87.95")]
            .iter()
            .map(|(s, a, b)| vec!["ConvNeXt-S".into(), s.to_string(), "0".into(), a.to_string(), b.to_string()])
            .collect();
        ResultsFile { meta, rows }
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(render_markdown(&[]), "# Results\n");
    }

    #[test]
    fn stage_table_has_three_rows() {
        let md = render_markdown(&[stage_fixture()]);
        let lines: Vec<&str> = md.lines().filter(|l| l.starts_with('|')).collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "| Backbone | Feature Masking | CUB(%) | Waterbird(%) |");
        assert_eq!(lines[3], "|  | L-1 | 89.35 | 81.22 |");
    }

    #[test]
    fn file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let f = stage_fixture();
        write_results(&p, &f).unwrap();
        assert_eq!(read_results(&p).unwrap(), f);

        fs::write(&p, "{\"experiment\":\"stage_sweep\"}\nmodel,stage,seed,id_test\n").unwrap();
        assert!(matches!(read_results(&p), Err(Error::Results { .. })));
        fs::write(&p, "not json\n").unwrap();
        assert!(matches!(read_results(&p), Err(Error::Results { .. })));
        fs::write(&p, "{\"experiment\":\"stage_sweep\"}\nmodel,stage,seed,id_test,ood_test\nm,L,0,x,1\n").unwrap();
        assert!(read_results(&p).is_err());
    }

    #[test]
    fn aggregate_takes_medians_per_group() {
        let mut f = stage_fixture();
        f.rows.push(vec!["ConvNeXt-S".into(), "L".into(), "1".into(), "90.00".into(), "70.00".into()]);
        f.rows.push(vec!["ConvNeXt-S".into(), "L".into(), "2".into(), "80.00".into(), "75.00".into()]);
        let agg = f.aggregate();
        assert_eq!(agg.len(), 3);
        assert_eq!(agg[0].1, vec![88.73, 75.0]);
    }
}
