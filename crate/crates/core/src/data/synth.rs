//! Synthetic aging phantoms: concentric soft ellipses where the central
//! "ventricle" grows and the outer "cortical band" thins with age.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image_io::{write_png16, GrayImage};
use super::manifest::{format_number, write_manifest, Cohort, SampleRecord};
use crate::error::{Error, Result};
use crate::rng;

pub const BACKGROUND: f32 = 0.0;
pub const INTERIOR: f32 = 0.6;
pub const CORTEX: f32 = 0.9;
pub const VENTRICLE: f32 = 0.15;
const NOISE_STD: f64 = 0.02;
const JITTER_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of training-cohort phantoms.
    pub n: usize,
    /// Number of additional held-out (test cohort, always labeled) phantoms.
    #[serde(default)]
    pub n_test: usize,
    pub seed: u64,
    pub age_range: [f64; 2],
    pub image_size: usize,
    /// Fraction of training records written without an age.
    pub unlabeled_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 100,
            n_test: 0,
            seed: 0,
            age_range: [20.0, 90.0],
            image_size: 32,
            unlabeled_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.age_range;
        if self.n + self.n_test == 0 {
            return Err(Error::Config("synthetic set must contain at least one phantom".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(Error::Config(format!("invalid age range [{lo}, {hi}]")));
        }
        if self.image_size < 4 {
            return Err(Error::Config(format!("image size {} too small", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::Config("unlabeled_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub id: String,
    pub age: f64,
    pub cohort: Cohort,
    pub labeled: bool,
    pub image: GrayImage,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Anatomy parameters at relative age `a` in `[0, 1]`.
pub fn ventricle_radius(a: f64) -> f64 {
    0.10 + 0.22 * a
}

pub fn cortex_thickness(a: f64) -> f64 {
    0.16 - 0.09 * a
}

/// Render one phantom. `a` is the relative age; `rng` supplies shape jitter
/// and pixel noise.
pub fn render_phantom<R: Rng>(a: f64, size: usize, rng: &mut R) -> GrayImage {
    let jitter = Normal::new(0.0, JITTER_STD).expect("valid std");
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let a = (a + jitter.sample(rng)).clamp(0.0, 1.0);
    let rx = 0.66 * (1.0 + jitter.sample(rng));
    let ry = 0.78 * (1.0 + jitter.sample(rng));
    let vr = ventricle_radius(a);
    let band = 1.0 - cortex_thickness(a);
    // Edge softness of roughly one pixel, expressed in normalised radius.
    let soft = 2.0 / (size as f64 * rx.min(ry));

    let mut pixels = Vec::with_capacity(size * size);
    for r in 0..size {
        let v = (r as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        for c in 0..size {
            let u = (c as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let rho = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
            let brain = sigmoid((1.0 - rho) / soft);
            let cortex = sigmoid((rho - band) / soft);
            let vent = sigmoid((vr - rho) / soft);
            let tissue = INTERIOR as f64 + (CORTEX - INTERIOR) as f64 * cortex;
            let tissue = tissue * (1.0 - vent) + VENTRICLE as f64 * vent;
            let val = BACKGROUND as f64 + brain * tissue + noise.sample(rng);
            pixels.push(val.clamp(0.0, 1.0) as f32);
        }
    }
    GrayImage {
        width: size,
        height: size,
        pixels,
    }
}

fn relative_age(age: f64, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        (age - lo) / (hi - lo)
    } else {
        0.5
    }
}

fn generate_cohort(cfg: &SynthConfig, n: usize, cohort: Cohort, stream: u64) -> Vec<Phantom> {
    let mut rng = rng::stream(cfg.seed, stream);
    let [lo, hi] = cfg.age_range;
    let ages: Vec<f64> = (0..n)
        .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect();
    let mut labeled = vec![true; n];
    if cohort == Cohort::Train {
        let n_unlabeled = (cfg.unlabeled_fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[..n_unlabeled] {
            labeled[i] = false;
        }
    }
    let prefix = match cohort {
        Cohort::Train => "syn",
        Cohort::Test => "syn-test",
        Cohort::Patient => "syn-pat",
    };
    ages.into_iter()
        .zip(labeled)
        .enumerate()
        .map(|(i, (age, labeled))| Phantom {
            id: format!("{prefix}-{i:05}"),
            age,
            cohort,
            labeled,
            image: render_phantom(relative_age(age, cfg.age_range), cfg.image_size, &mut rng),
        })
        .collect()
}

/// Deterministic phantoms: `n` training records followed by `n_test` test records.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Phantom>> {
    cfg.validate()?;
    let mut out = generate_cohort(cfg, cfg.n, Cohort::Train, 10);
    out.extend(generate_cohort(cfg, cfg.n_test, Cohort::Test, 11));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub ground_truth: PathBuf,
    pub phantoms: Vec<Phantom>,
}

/// Write `images/<id>.png`, `manifest.csv` and `ground_truth.csv` (true ages
/// for every record, including unlabeled ones) under `dir`.
pub fn write_synth_dataset(dir: &Path, cfg: &SynthConfig) -> Result<SynthOutput> {
    let phantoms = synth_generate(cfg)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(phantoms.len());
    let mut truth = String::from("id,age_years\n");
    for p in &phantoms {
        let path = images.join(format!("{}.png", p.id));
        write_png16(&path, &p.image)?;
        records.push(SampleRecord {
            id: p.id.clone(),
            image_path: path,
            age_years: p.labeled.then_some(p.age),
            cohort: p.cohort,
            survival_months: None,
        });
        truth.push_str(&format!("{},{}\n", p.id, format_number(p.age)));
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    let ground_truth = dir.join("ground_truth.csv");
    std::fs::write(&ground_truth, truth).map_err(|e| Error::io(&ground_truth, e))?;
    Ok(SynthOutput {
        manifest,
        ground_truth,
        phantoms,
    })
}

/// Pixels darker than the interior/ventricle midpoint inside the central box.
pub fn ventricle_area(img: &GrayImage) -> usize {
    let threshold = (INTERIOR + VENTRICLE) / 2.0;
    let s = img.width;
    let mut count = 0;
    for r in 0..img.height {
        let v = (r as f64 + 0.5) / img.height as f64 * 2.0 - 1.0;
        for c in 0..s {
            let u = (c as f64 + 0.5) / s as f64 * 2.0 - 1.0;
            if u.abs() < 0.4 && v.abs() < 0.4 && img.get(r, c) < threshold {
                count += 1;
            }
        }
    }
    count
}
