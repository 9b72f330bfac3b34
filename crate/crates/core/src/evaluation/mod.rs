//! Accuracy metrics, brain-PAD statistics, distribution comparison and the
//! evaluation report.

pub mod generative;
pub mod ks;
pub mod metrics;
pub mod plots;
mod report;

pub use ks::{ks_two_sample, KsMethod, KsResult};
pub use metrics::{bias_correct, mae, pearson_r, population_std, r_squared, survival_association, Correlation};
pub use report::{
    build_report, read_predictions, read_records, render_pad_block, Aggregates, Comparison, EvalReport, RecordRow,
    SurvivalBlock, BOXPLOT_FILE, RECORDS_FILE, SCATTER_FILE, SUMMARY_JSON_FILE, SUMMARY_TEXT_FILE,
};

pub use generative::{interpolate_pair, interpolation_weights, inversions, reconstruct_set, Interpolation, Reconstruction};

use crate::data::{Cohort, ImageSet, Manifest};
use crate::error::{Error, Result};
use crate::networks::ModelBundle;

pub const PREDICT_BATCH: usize = 32;

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Also report PADs residualised on chronological age.
    pub bias_correct: bool,
}

/// Evaluation-mode age predictions for every image in `set`.
pub fn predict_set(model: &ModelBundle, set: &ImageSet) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(PREDICT_BATCH) {
        let x = set.batch(chunk, model.dtype(), model.device())?;
        out.extend(model.predict_ages(&x)?);
    }
    Ok(out)
}

/// Predict every record of `cohort` and assemble the report. All records
/// must carry a chronological age.
pub fn evaluate(model: &ModelBundle, manifest: &Manifest, cohort: Cohort, opts: &EvalOptions) -> Result<EvalReport> {
    let records = manifest.cohort(cohort);
    if records.is_empty() {
        return Err(Error::Validation(format!("manifest has no `{cohort}` records")));
    }
    let unlabeled: Vec<&str> = records
        .iter()
        .filter(|r| r.age_years.is_none())
        .map(|r| r.id.as_str())
        .collect();
    if !unlabeled.is_empty() {
        return Err(Error::Validation(format!(
            "records without age_years in cohort `{cohort}`: {}",
            unlabeled.join(", ")
        )));
    }
    let set = ImageSet::load(&records, model.image_size())?;
    let preds = predict_set(model, &set)?;
    let rows: Vec<(String, f64, f64)> = records
        .iter()
        .zip(&preds)
        .map(|(r, p)| (r.id.clone(), r.age_years.expect("checked"), *p))
        .collect();
    let survival: Vec<Option<f64>> = records.iter().map(|r| r.survival_months).collect();
    build_report(cohort.as_str(), &rows, &survival, opts.bias_correct)
}
