use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ks::{ks_two_sample, KsMethod};
use super::metrics::{bias_correct, mae, mean, pearson_r, population_std, r_squared, survival_association};
use super::plots::{pad_boxplot_svg, scatter_svg};
use crate::data::format_number;
use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_TEXT_FILE: &str = "summary.txt";
pub const SUMMARY_JSON_FILE: &str = "summary.json";
pub const SCATTER_FILE: &str = "scatter.svg";
pub const BOXPLOT_FILE: &str = "pad_boxplot.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub id: String,
    pub chronological_age: f64,
    pub predicted_age: f64,
    /// `predicted_age - chronological_age`.
    pub pad: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad_corrected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    /// `None` when undefined (fewer than 3 records or zero variance).
    pub pearson_r: Option<f64>,
    pub r_p_value: Option<f64>,
    pub mae: f64,
    pub r_squared: Option<f64>,
    pub pad_mean: f64,
    /// Population standard deviation.
    pub pad_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad_corrected_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad_corrected_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalBlock {
    pub survival_r: f64,
    pub survival_p: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    pub n_ours: usize,
    pub n_external: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub method: KsMethod,
    #[serde(skip)]
    pub external_pads: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cohort: String,
    pub records: Vec<RecordRow>,
    pub aggregates: Aggregates,
    pub survival: Option<SurvivalBlock>,
    pub comparison: Option<Comparison>,
}

fn defined<T>(r: Result<T>, what: &str) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Validation(msg)) => {
            log::warn!("{what} undefined: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Assemble a report from `(id, chronological, predicted)` rows.
/// `survival` pairs with `rows` and may be empty.
pub fn build_report(
    cohort: &str,
    rows: &[(String, f64, f64)],
    survival: &[Option<f64>],
    correct_bias: bool,
) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Validation(format!("cohort `{cohort}` has no records to evaluate")));
    }
    let chron: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let pred: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let pads: Vec<f64> = rows.iter().map(|r| r.2 - r.1).collect();
    let corrected = if correct_bias {
        defined(bias_correct(&chron, &pads), "bias correction")?
    } else {
        None
    };
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, (id, c, p))| RecordRow {
            id: id.clone(),
            chronological_age: *c,
            predicted_age: *p,
            pad: pads[i],
            pad_corrected: corrected.as_ref().map(|v| v[i]),
        })
        .collect();

    let corr = defined(pearson_r(&chron, &pred), "pearson r")?;
    let aggregates = Aggregates {
        n: rows.len(),
        pearson_r: corr.map(|c| c.r),
        r_p_value: corr.map(|c| c.p),
        mae: mae(&pred, &chron)?,
        r_squared: defined(r_squared(&pred, &chron), "r squared")?,
        pad_mean: mean(&pads),
        pad_std: population_std(&pads),
        pad_corrected_mean: corrected.as_ref().map(|v| mean(v)),
        pad_corrected_std: corrected.as_ref().map(|v| population_std(v)),
    };

    let (sp, sm): (Vec<f64>, Vec<f64>) = pads
        .iter()
        .zip(survival)
        .filter_map(|(p, s)| s.map(|s| (*p, s)))
        .unzip();
    let survival = if sp.is_empty() {
        None
    } else {
        defined(survival_association(&sp, &sm), "survival association")?.map(|c| SurvivalBlock {
            survival_r: c.r,
            survival_p: c.p,
            n: c.n,
        })
    };

    Ok(EvalReport {
        cohort: cohort.to_string(),
        records,
        aggregates,
        survival,
        comparison: None,
    })
}

impl EvalReport {
    pub fn pads(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.pad).collect()
    }

    /// Compare this report's PADs with another model's predictions for the
    /// same subjects (`id -> predicted_age`) by a two-sample KS test.
    pub fn compare_with(&mut self, label: &str, external: &[(String, f64)]) -> Result<()> {
        let mut unknown = Vec::new();
        let mut ext_pads = Vec::with_capacity(external.len());
        for (id, pred) in external {
            match self.records.iter().find(|r| &r.id == id) {
                Some(r) => ext_pads.push(pred - r.chronological_age),
                None => unknown.push(id.clone()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Validation(format!(
                "external predictions for ids not in cohort `{}`: {}",
                self.cohort,
                unknown.join(", ")
            )));
        }
        let ks = ks_two_sample(&self.pads(), &ext_pads)?;
        self.comparison = Some(Comparison {
            label: label.to_string(),
            n_ours: self.records.len(),
            n_external: ext_pads.len(),
            statistic: ks.statistic,
            p_value: ks.p_value,
            method: ks.method,
            external_pads: ext_pads,
        });
        Ok(())
    }

    pub fn records_csv(&self) -> String {
        let corrected = self.records.iter().any(|r| r.pad_corrected.is_some());
        let mut out = String::from("id,chronological_age,predicted_age,pad");
        out.push_str(if corrected { ",pad_corrected\n" } else { "\n" });
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{}",
                r.id,
                format_number(r.chronological_age),
                format_number(r.predicted_age),
                format_number(r.pad)
            );
            if corrected {
                let _ = write!(out, ",{}", r.pad_corrected.map(format_number).unwrap_or_default());
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            cohort: &'a str,
            aggregates: &'a Aggregates,
            survival: &'a Option<SurvivalBlock>,
            comparison: &'a Option<Comparison>,
        }
        let s = Summary {
            cohort: &self.cohort,
            aggregates: &self.aggregates,
            survival: &self.survival,
            comparison: &self.comparison,
        };
        serde_json::to_string_pretty(&s).expect("summary serialises") + "\n"
    }

    /// Plain-text summary: an accuracy table followed by a brain-PAD table.
    pub fn render_summary(&self) -> String {
        let a = &self.aggregates;
        let mut out = String::new();
        let _ = writeln!(out, "Brain age evaluation: cohort {} (n = {})", self.cohort, a.n);
        out.push('\n');
        let _ = writeln!(out, "{:<14}{}", "Metric", "Value");
        let r = match (a.pearson_r, a.r_p_value) {
            (Some(r), Some(p)) => format!("{r:.2} (p = {})", format_p(p)),
            _ => "n/a (insufficient n)".to_string(),
        };
        let _ = writeln!(out, "{:<14}{r}", "Test R");
        let _ = writeln!(out, "{:<14}{:.2}", "Test MAE", a.mae);
        let r2 = a.r_squared.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(out, "{:<14}{r2}", "Test R²");
        if let Some(s) = &self.survival {
            let _ = writeln!(
                out,
                "{:<14}{:.2} (p = {}, n = {})",
                "Survival R",
                s.survival_r,
                format_p(s.survival_p),
                s.n
            );
        }
        out.push('\n');
        out.push_str(&render_pad_block(a.pad_mean, a.pad_std));
        if let (Some(m), Some(s)) = (a.pad_corrected_mean, a.pad_corrected_std) {
            let _ = writeln!(out, "{:<14}{m:.2}", "Mean (corr.)");
            let _ = writeln!(out, "{:<14}{s:.2}", "Std (corr.)");
        }
        if let Some(c) = &self.comparison {
            let method = match c.method {
                KsMethod::Exact => "exact",
                KsMethod::Asymptotic => "asymptotic",
            };
            let _ = writeln!(
                out,
                "{:<14}{:.2} (p = {}, {method}, vs {}, n = {}/{})",
                "KS Statistic",
                c.statistic,
                format_p(c.p_value),
                c.label,
                c.n_ours,
                c.n_external
            );
        }
        out
    }

    /// Write the per-record table, summaries and figures into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let chron: Vec<f64> = self.records.iter().map(|r| r.chronological_age).collect();
        let pred: Vec<f64> = self.records.iter().map(|r| r.predicted_age).collect();
        let pads = self.pads();
        let mut groups: Vec<(&str, &[f64])> = vec![("this model", &pads)];
        if let Some(c) = &self.comparison {
            groups.push((&c.label, &c.external_pads));
        }
        let files = [
            (RECORDS_FILE, self.records_csv()),
            (SUMMARY_TEXT_FILE, self.render_summary()),
            (SUMMARY_JSON_FILE, self.summary_json()),
            (
                SCATTER_FILE,
                scatter_svg(&chron, &pred, &format!("Predicted vs chronological age ({})", self.cohort)),
            ),
            (BOXPLOT_FILE, pad_boxplot_svg(&groups, &format!("Brain-PAD ({})", self.cohort))),
        ];
        let mut written = Vec::new();
        for (name, text) in files {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// The brain-PAD mean/std block of the summary.
pub fn render_pad_block(mean: f64, std: f64) -> String {
    format!("{:<14}{}\n{:<14}{mean:.2}\n{:<14}{std:.2}\n", "Brain-PAD", "Value", "Mean", "Std")
}

fn format_p(p: f64) -> String {
    if p >= 1e-3 {
        format!("{p:.4}")
    } else {
        format!("{p:.2e}")
    }
}

/// Read `id,predicted_age` rows (other columns are ignored).
pub fn read_predictions(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let headers = reader.headers().map_err(|e| Error::format(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::format(path, format!("missing `{name}` column")))
    };
    let (id_col, pred_col) = (col("id")?, col("predicted_age")?);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::format(path, e))?;
        let line = i + 2;
        let id = row.get(id_col).unwrap_or("").trim().to_string();
        let pred: f64 = row
            .get(pred_col)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("line {line}: predicted_age is not a number")))?;
        out.push((id, pred));
    }
    Ok(out)
}

/// Parse a `records.csv` written by [`EvalReport::write`].
pub fn read_records(path: &Path) -> Result<Vec<RecordRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<(String, f64, f64)> {
        [(23.5, 30.25), (41.0, 38.0), (55.0, 60.5), (67.25, 61.0), (80.0, 84.125), (33.0, 29.0)]
            .iter()
            .enumerate()
            .map(|(i, (c, p))| (format!("r{i}"), *c, *p))
            .collect()
    }

    #[test]
    fn aggregates_recompute_from_table() {
        let report = build_report("test", &rows(), &[], false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let back = read_records(&dir.path().join(RECORDS_FILE)).unwrap();
        assert_eq!(back, report.records);
        let again = build_report(
            "test",
            &back.iter().map(|r| (r.id.clone(), r.chronological_age, r.predicted_age)).collect::<Vec<_>>(),
            &[],
            false,
        )
        .unwrap();
        assert_eq!(again.aggregates, report.aggregates);
        for r in &back {
            assert_eq!(r.pad, r.predicted_age - r.chronological_age);
        }
    }

    #[test]
    fn single_record_flags_correlation() {
        let report = build_report("test", &rows()[..1], &[], false).unwrap();
        let a = &report.aggregates;
        assert_eq!((a.pearson_r, a.r_p_value, a.r_squared), (None, None, None));
        assert_eq!(a.mae, 6.75);
        assert_eq!(a.pad_std, 0.0);
        assert!(report.render_summary().contains("n/a (insufficient n)"));
    }

    #[test]
    fn pad_block_rendering() {
        let text = render_pad_block(-6.19, 27.29);
        assert_eq!(text, "Brain-PAD     Value\nMean          -6.19\nStd           27.29\n");
    }

    #[test]
    fn survival_and_comparison_blocks() {
        let survival: Vec<Option<f64>> = vec![Some(12.0), Some(30.0), None, Some(8.0), Some(22.0), Some(15.0)];
        let mut report = build_report("patient", &rows(), &survival, true).unwrap();
        let s = report.survival.as_ref().unwrap();
        assert_eq!(s.n, 5);
        let pads = report.pads();
        let kept: Vec<f64> = [0, 1, 3, 4, 5].iter().map(|&i| pads[i]).collect();
        let months = [12.0, 30.0, 8.0, 22.0, 15.0];
        assert_eq!(s.survival_r, pearson_r(&kept, &months).unwrap().r);
        assert!(report.aggregates.pad_corrected_mean.unwrap().abs() < 1e-12);

        let ext: Vec<(String, f64)> = rows().iter().map(|r| (r.0.clone(), r.1 + 10.0)).collect();
        report.compare_with("baseline", &ext).unwrap();
        let c = report.comparison.as_ref().unwrap();
        assert_eq!(c.method, KsMethod::Exact);
        let summary = report.render_summary();
        assert!(summary.contains("KS Statistic"));
        assert!(summary.contains("Survival R"));
        assert!(report.compare_with("x", &[("nope".into(), 1.0)]).is_err());
    }

    #[test]
    fn rendering_is_byte_stable() {
        let a = build_report("test", &rows(), &[], false).unwrap();
        let b = build_report("test", &rows(), &[], false).unwrap();
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.write(da.path()).unwrap();
        b.write(db.path()).unwrap();
        for f in [RECORDS_FILE, SUMMARY_TEXT_FILE, SUMMARY_JSON_FILE, SCATTER_FILE, BOXPLOT_FILE] {
            assert_eq!(fs::read(da.path().join(f)).unwrap(), fs::read(db.path().join(f)).unwrap());
        }
    }
}
