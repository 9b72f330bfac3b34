//! Command-line front end. Every subcommand parses its flags, calls into the
//! `brain_diffae` library and writes the results plus a `provenance.json`.

pub mod args;

use std::fs;
use std::path::{Path, PathBuf};

use brain_diffae::data::{
    self, load_manifest, load_volume, normalize_and_resize, preprocess::medial_indices, write_manifest, write_png16,
    write_synth_dataset, Cohort, ImageSet, Manifest, SampleRecord, SynthConfig,
};
use brain_diffae::diffusion::ReverseStepConfig;
use brain_diffae::evaluation::{
    self, build_report, interpolate_pair, interpolation_weights, predict_set, read_predictions, reconstruct_set,
    EvalOptions, EvalReport,
};
use brain_diffae::networks::{ModelBundle, ModelConfig};
use brain_diffae::schedule::ScheduleSpec;
use brain_diffae::training::{self, TrainConfig};
use brain_diffae::{Error, Result};
use candle_core::Device;
use clap::error::ErrorKind;
use clap::Parser;
use serde::{Deserialize, Serialize};

use args::*;

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const RECONSTRUCTION_FILE: &str = "reconstruction.csv";
pub const INTERPOLATION_FILE: &str = "interpolation.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    /// 0 success, 1 usage or validation error, 2 runtime failure.
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

impl CommandResult {
    fn failure(exit_code: i32, summary: String) -> Self {
        Self {
            exit_code,
            artifacts: Vec::new(),
            summary,
        }
    }
}

struct Output {
    artifacts: Vec<PathBuf>,
    summary: String,
}

/// Parse `argv` (program name first) and run the subcommand.
pub fn run<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            return CommandResult::failure(code, e.render().to_string());
        }
    };
    let name = cli.command.name();
    match dispatch(&cli.command) {
        Ok(out) => CommandResult {
            exit_code: 0,
            artifacts: out.artifacts,
            summary: out.summary,
        },
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            CommandResult::failure(code, format!("{name}: {e}"))
        }
    }
}

fn dispatch(cmd: &Command) -> Result<Output> {
    match cmd {
        Command::SynthData(a) => synth(cmd, a),
        Command::Preprocess(a) => preprocess(cmd, a),
        Command::Train(a) => train(cmd, a),
        Command::Predict(a) => predict(cmd, a),
        Command::Evaluate(a) => evaluate(cmd, a),
        Command::Reconstruct(a) => reconstruct(cmd, a),
        Command::Interpolate(a) => interpolate(cmd, a),
        Command::Stats(a) => stats(cmd, a),
    }
}

/// `--out`, else `$BRAIN_DIFFAE_OUT_DIR/<command>`, else `out/<command>`.
pub fn output_dir(cmd: &str, out: &OutArg) -> PathBuf {
    if let Some(p) = &out.out {
        return p.clone();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(cmd),
        _ => PathBuf::from("out").join(cmd),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(path, contents).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

#[derive(Serialize)]
struct ProvenanceRecord<'a, C: Serialize> {
    command: &'a str,
    code_version: &'a str,
    seed: Option<u64>,
    config: &'a C,
}

/// Write `provenance.json`: command, code version, seed and the effective
/// configuration. No timestamps, so reruns are byte-identical.
pub fn write_provenance<C: Serialize>(dir: &Path, command: &str, seed: Option<u64>, config: &C) -> Result<PathBuf> {
    let rec = ProvenanceRecord {
        command,
        code_version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
    };
    let mut text = serde_json::to_string_pretty(&rec).map_err(|e| Error::Contract(e.to_string()))?;
    text.push('\n');
    write_file(&dir.join(PROVENANCE_FILE), text)
}

fn load_model(dir: &Path) -> Result<ModelBundle> {
    ModelBundle::load(dir, &Device::Cpu)
}

fn record<'a>(manifest: &'a Manifest, id: &str) -> Result<&'a SampleRecord> {
    manifest
        .get(id)
        .ok_or_else(|| Error::Validation(format!("record `{id}` not in manifest")))
}

fn synth(cmd: &Command, a: &SynthArgs) -> Result<Output> {
    let dir = output_dir(cmd.name(), &a.out);
    let cfg = SynthConfig {
        n: a.n,
        n_test: a.n_test,
        seed: a.seed,
        age_range: [a.age_min, a.age_max],
        image_size: a.size,
        unlabeled_fraction: a.unlabeled_fraction,
    };
    cfg.validate()?;
    let out = write_synth_dataset(&dir, &cfg)?;
    let mut artifacts: Vec<PathBuf> = out
        .phantoms
        .iter()
        .map(|p| dir.join("images").join(format!("{}.png", p.id)))
        .collect();
    artifacts.push(out.manifest.clone());
    artifacts.push(out.ground_truth.clone());
    artifacts.push(write_provenance(&dir, cmd.name(), Some(a.seed), &cfg)?);
    let labeled = out.phantoms.iter().filter(|p| p.labeled).count();
    Ok(Output {
        artifacts,
        summary: format!(
            "wrote {} phantoms ({labeled} labeled) to {}\n",
            out.phantoms.len(),
            out.manifest.display()
        ),
    })
}

fn preprocess(cmd: &Command, a: &PreprocessArgs) -> Result<Output> {
    if a.slices == 0 {
        return Err(Error::Config("--slices must be at least 1".into()));
    }
    let manifest = load_manifest(&a.manifest)?;
    let dir = output_dir(cmd.name(), &a.out);
    let images = dir.join("images");
    create_dir(&images)?;
    let mut records = Vec::new();
    let mut artifacts = Vec::new();
    let mut constant = Vec::new();
    for r in &manifest.records {
        let volume = load_volume(&r.image_path)?;
        let indices = medial_indices(volume.depth(), a.slices)?;
        for &k in &indices {
            let slice = normalize_and_resize(&volume.slice(k)?, a.size)?;
            let id = if a.slices == 1 {
                r.id.clone()
            } else {
                format!("{}_s{k:03}", r.id)
            };
            if slice.constant_input {
                constant.push(id.clone());
            }
            let path = images.join(format!("{id}.png"));
            write_png16(&path, &slice.image)?;
            artifacts.push(path.clone());
            records.push(SampleRecord {
                id,
                image_path: path,
                ..r.clone()
            });
        }
    }
    let manifest_path = dir.join("manifest.csv");
    write_manifest(&manifest_path, &records)?;
    artifacts.push(manifest_path.clone());
    artifacts.push(write_provenance(&dir, cmd.name(), None, a)?);
    let mut summary = format!(
        "extracted {} slices from {} volumes into {}\n",
        records.len(),
        manifest.records.len(),
        manifest_path.display()
    );
    if !constant.is_empty() {
        summary.push_str(&format!("constant slices written as zeros: {}\n", constant.join(", ")));
    }
    Ok(Output { artifacts, summary })
}

/// Training configuration file. Missing tables take their defaults; a
/// `[model]` table replaces the preset wholesale.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub preset: Option<String>,
    pub model: Option<ModelConfig>,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
}

impl TrainFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply command-line overrides and resolve the preset into `model`.
    pub fn merge(mut self, a: &TrainArgs) -> Result<Self> {
        let t = &mut self.train;
        if let Some(s) = a.steps {
            t.max_steps = Some(s);
            t.epochs = None;
        }
        if let Some(e) = a.epochs {
            t.epochs = Some(e);
            t.max_steps = None;
        }
        if a.steps.is_some() && a.epochs.is_some() {
            return Err(Error::Config("pass either --steps or --epochs, not both".into()));
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = a.lr {
            t.learning_rate = v;
        }
        if let Some(v) = a.seed {
            t.seed = v;
        }
        if let Some(v) = a.age_loss_weight {
            t.age_loss_weight = v;
        }
        if let Some(v) = a.unlabeled_fraction {
            t.unlabeled_fraction = Some(v);
        }
        if let Some(v) = a.checkpoint_interval {
            t.checkpoint_interval = v;
        }
        if let Some(v) = a.precision {
            t.precision = v;
        }
        if let Some(v) = a.ema_decay {
            t.ema_decay = Some(v);
        }
        if let Some(p) = &a.preset {
            self.preset = Some(p.clone());
            self.model = None;
        }
        if self.model.is_none() {
            let name = self.preset.get_or_insert_with(|| "reduced".to_string());
            self.model = Some(ModelConfig::preset(name)?);
        }
        self.train.validate()?;
        Ok(self)
    }
}

fn train(cmd: &Command, a: &TrainArgs) -> Result<Output> {
    let manifest = load_manifest(&a.manifest)?;
    let dir = output_dir(cmd.name(), &a.out);
    create_dir(&dir)?;
    let mut artifacts = Vec::new();
    let fitted = if let Some(ckpt) = &a.resume {
        if a.config.is_some() || a.preset.is_some() {
            log::warn!("--resume uses the checkpoint's stored configuration; --config/--preset ignored");
        }
        training::resume_fit(&manifest, ckpt, &Device::Cpu, Some(&dir))?
    } else {
        let file = match &a.config {
            Some(p) => TrainFile::read(p)?,
            None => TrainFile::default(),
        }
        .merge(a)?;
        let text = toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))?;
        artifacts.push(write_file(&dir.join(CONFIG_FILE), text)?);
        let model = ModelBundle::new(
            file.model.clone().expect("resolved by merge"),
            file.schedule.build()?,
            file.train.seed,
            file.train.precision.dtype(),
            &Device::Cpu,
        )?;
        training::fit(&manifest, &file.train, model, Some(&dir))?
    };
    let prov = &fitted.model.provenance;
    artifacts.push(dir.join(training::METRICS_FILE));
    artifacts.push(dir.join("model"));
    let seed = prov
        .train_config
        .as_ref()
        .and_then(|c| c.get("seed"))
        .and_then(|s| s.as_u64());
    artifacts.push(write_provenance(&dir, cmd.name(), seed, &prov.train_config)?);
    let mut summary = format!("trained {} steps; model saved to {}\n", prov.train_steps, dir.join("model").display());
    if let Some(last) = fitted.log.last() {
        summary.push_str(&format!(
            "final losses: diffusion {:.4}, age {:.4}, total {:.4}\n",
            last.diffusion_term, last.age_term, last.total
        ));
    }
    Ok(Output { artifacts, summary })
}

/// `id,predicted_age` rows for the selected records.
pub fn predictions_csv(ids: &[String], preds: &[f64]) -> String {
    let mut s = String::from("id,predicted_age\n");
    for (id, p) in ids.iter().zip(preds) {
        s.push_str(&format!("{id},{}\n", data::format_number(*p)));
    }
    s
}

fn predict(cmd: &Command, a: &PredictArgs) -> Result<Output> {
    let manifest = load_manifest(&a.io.manifest)?;
    let model = load_model(&a.io.model)?;
    let records: Vec<&SampleRecord> = match a.cohort {
        Some(c) => manifest.cohort(c),
        None => manifest.records.iter().collect(),
    };
    if records.is_empty() {
        return Err(Error::Validation("no records selected".into()));
    }
    let set = ImageSet::load(&records, model.image_size())?;
    let preds = predict_set(&model, &set)?;
    let dir = output_dir(cmd.name(), &a.out);
    create_dir(&dir)?;
    let artifacts = vec![
        write_file(&dir.join(PREDICTIONS_FILE), predictions_csv(&set.ids, &preds))?,
        write_provenance(&dir, cmd.name(), None, a)?,
    ];
    Ok(Output {
        artifacts,
        summary: format!("predicted {} records\n", preds.len()),
    })
}

fn attach_comparison(report: &mut EvalReport, c: &CompareArgs) -> Result<()> {
    if let Some(path) = &c.compare {
        let label = c.compare_label.clone().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "external".into())
        });
        report.compare_with(&label, &read_predictions(path)?)?;
    }
    Ok(())
}

fn write_report<A: Serialize>(cmd: &Command, report: &EvalReport, out: &OutArg, args: &A) -> Result<Output> {
    let dir = output_dir(cmd.name(), out);
    create_dir(&dir)?;
    let mut artifacts = report.write(&dir)?;
    artifacts.push(write_provenance(&dir, cmd.name(), None, args)?);
    Ok(Output {
        artifacts,
        summary: report.render_summary(),
    })
}

fn evaluate(cmd: &Command, a: &EvaluateArgs) -> Result<Output> {
    let manifest = load_manifest(&a.io.manifest)?;
    let model = load_model(&a.io.model)?;
    let opts = EvalOptions {
        bias_correct: a.compare.bias_correct,
    };
    let mut report = evaluation::evaluate(&model, &manifest, a.cohort, &opts)?;
    attach_comparison(&mut report, &a.compare)?;
    write_report(cmd, &report, &a.out, a)
}

/// Join a predictions file to the manifest's `cohort` records and build the
/// report without touching a model.
pub fn report_from_predictions(
    manifest: &Manifest,
    cohort: Cohort,
    predictions: &[(String, f64)],
    bias_correct: bool,
) -> Result<EvalReport> {
    let records = manifest.cohort(cohort);
    if records.is_empty() {
        return Err(Error::Validation(format!("manifest has no `{cohort}` records")));
    }
    let lookup: std::collections::HashMap<&str, f64> = predictions.iter().map(|(id, p)| (id.as_str(), *p)).collect();
    let mut rows = Vec::with_capacity(records.len());
    let mut bad = Vec::new();
    for r in &records {
        match (r.age_years, lookup.get(r.id.as_str())) {
            (Some(age), Some(&p)) => rows.push((r.id.clone(), age, p)),
            _ => bad.push(r.id.as_str()),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation(format!(
            "records without age_years or prediction in cohort `{cohort}`: {}",
            bad.join(", ")
        )));
    }
    let survival: Vec<Option<f64>> = records.iter().map(|r| r.survival_months).collect();
    build_report(cohort.as_str(), &rows, &survival, bias_correct)
}

fn stats(cmd: &Command, a: &StatsArgs) -> Result<Output> {
    let manifest = load_manifest(&a.manifest)?;
    let preds = read_predictions(&a.predictions)?;
    let mut report = report_from_predictions(&manifest, a.cohort, &preds, a.compare.bias_correct)?;
    attach_comparison(&mut report, &a.compare)?;
    write_report(cmd, &report, &a.out, a)
}

fn reconstruct(cmd: &Command, a: &ReconstructArgs) -> Result<Output> {
    let manifest = load_manifest(&a.io.manifest)?;
    let model = load_model(&a.io.model)?;
    let records: Vec<&SampleRecord> = if a.ids.is_empty() {
        manifest.cohort(a.cohort).into_iter().take(a.n).collect()
    } else {
        a.ids.iter().map(|id| record(&manifest, id)).collect::<Result<_>>()?
    };
    if records.is_empty() {
        return Err(Error::Validation("no records selected".into()));
    }
    let set = ImageSet::load(&records, model.image_size())?;
    let cfg = ReverseStepConfig::evenly_spaced(model.schedule().num_steps(), a.steps, a.eta)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let rec = reconstruct_set(&model, &set, &idx, &cfg, a.seed)?;
    let dir = output_dir(cmd.name(), &a.out);
    let images = dir.join("images");
    create_dir(&images)?;
    let mut artifacts = Vec::new();
    let mut csv = String::from("id,mean_abs_error\n");
    for ((id, img), err) in set.ids.iter().zip(&rec.images).zip(&rec.errors) {
        let path = images.join(format!("{id}.png"));
        write_png16(&path, img)?;
        artifacts.push(path);
        csv.push_str(&format!("{id},{}\n", data::format_number(*err)));
    }
    artifacts.push(write_file(&dir.join(RECONSTRUCTION_FILE), csv)?);
    artifacts.push(write_provenance(&dir, cmd.name(), Some(a.seed), a)?);
    Ok(Output {
        artifacts,
        summary: format!(
            "reconstructed {} images, mean absolute error {:.4}\n",
            rec.images.len(),
            rec.mean_error()
        ),
    })
}

fn interpolate(cmd: &Command, a: &InterpolateArgs) -> Result<Output> {
    let manifest = load_manifest(&a.io.manifest)?;
    let model = load_model(&a.io.model)?;
    let pair = [record(&manifest, &a.a)?, record(&manifest, &a.b)?];
    let set = ImageSet::load(&pair, model.image_size())?;
    let lambdas = interpolation_weights(a.steps)?;
    let cfg = ReverseStepConfig::evenly_spaced(model.schedule().num_steps(), a.inference_steps, 0.0)?;
    let interp = interpolate_pair(&model, &set, 0, 1, &lambdas, &cfg, a.seed)?;
    let dir = output_dir(cmd.name(), &a.out);
    let images = dir.join("images");
    create_dir(&images)?;
    let mut artifacts = Vec::new();
    let mut csv = String::from("index,lambda,predicted_age\n");
    for (i, ((lam, img), age)) in interp.lambdas.iter().zip(&interp.images).zip(&interp.ages).enumerate() {
        let path = images.join(format!("step_{i:02}.png"));
        write_png16(&path, img)?;
        artifacts.push(path);
        csv.push_str(&format!("{i},{},{}\n", data::format_number(*lam), data::format_number(*age)));
    }
    artifacts.push(write_file(&dir.join(INTERPOLATION_FILE), csv)?);
    artifacts.push(write_provenance(&dir, cmd.name(), Some(a.seed), a)?);
    let ages: Vec<String> = interp.ages.iter().map(|x| format!("{x:.2}")).collect();
    Ok(Output {
        artifacts,
        summary: format!(
            "{} -> {}: predicted ages {}\nendpoint predictions: {:.2}, {:.2}\n",
            a.a,
            a.b,
            ages.join(", "),
            interp.endpoint_ages[0],
            interp.endpoint_ages[1]
        ),
    })
}
