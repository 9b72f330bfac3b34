//! Dataset manifest: a CSV file with header
//! `id,image_path,age_years,cohort,survival_months`. Empty fields mean absent;
//! relative image paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["id", "image_path", "age_years", "cohort", "survival_months"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Train,
    Test,
    Patient,
}

impl Cohort {
    pub fn as_str(&self) -> &'static str {
        match self {
            Cohort::Train => "train",
            Cohort::Test => "test",
            Cohort::Patient => "patient",
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Cohort {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Cohort::Train),
            "test" => Ok(Cohort::Test),
            "patient" => Ok(Cohort::Patient),
            other => Err(format!("unknown cohort `{other}` (expected train, test or patient)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// Resolved path (absolute, or relative to the working directory).
    pub image_path: PathBuf,
    pub age_years: Option<f64>,
    pub cohort: Cohort,
    pub survival_months: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn counts(&self) -> BTreeMap<Cohort, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.cohort).or_insert(0) += 1;
        }
        counts
    }

    /// One-line summary like `train=1600 (labeled 1280) test=400 patient=0`.
    pub fn summary(&self) -> String {
        let counts = self.counts();
        [Cohort::Train, Cohort::Test, Cohort::Patient]
            .iter()
            .map(|c| {
                let n = counts.get(c).copied().unwrap_or(0);
                let labeled = self
                    .records
                    .iter()
                    .filter(|r| r.cohort == *c && r.age_years.is_some())
                    .count();
                format!("{c}={n} (labeled {labeled})")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn cohort(&self, cohort: Cohort) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.cohort == cohort).collect()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

fn parse_optional(field: &str, name: &str, line: usize) -> Result<Option<f64>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    let v: f64 = field.parse().map_err(|_| Error::Manifest {
        line,
        msg: format!("{name} `{field}` is not a number"),
    })?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Manifest {
            line,
            msg: format!("{name} must be a non-negative number, got {field}"),
        });
    }
    Ok(Some(v))
}

/// Parse and validate a manifest, checking that every image exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let manifest = parse_manifest(path)?;
    let missing: Vec<PathBuf> = manifest
        .records
        .iter()
        .filter(|r| !r.image_path.is_file())
        .map(|r| r.image_path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    log::info!("{}: {}", path.display(), manifest.summary());
    Ok(manifest)
}

/// Parse and validate a manifest without touching the image files.
pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());

    let header = reader.headers().map_err(|e| Error::Manifest { line: 1, msg: e.to_string() })?;
    let header: Vec<&str> = header.iter().map(str::trim).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Manifest {
            line: 1,
            msg: format!("header must be `{}`, got `{}`", MANIFEST_HEADER.join(","), header.join(",")),
        });
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut unlabeled_test = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Manifest {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != MANIFEST_HEADER.len() {
            return Err(Error::Manifest {
                line,
                msg: format!("expected {} fields, found {}", MANIFEST_HEADER.len(), row.len()),
            });
        }
        let id = row[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Manifest { line, msg: "empty id".into() });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Manifest { line, msg: format!("duplicate id `{id}`") });
        }
        let raw_path = row[1].trim();
        if raw_path.is_empty() {
            return Err(Error::Manifest { line, msg: format!("record `{id}` has no image_path") });
        }
        let image_path = if Path::new(raw_path).is_absolute() {
            PathBuf::from(raw_path)
        } else {
            base.join(raw_path)
        };
        let age_years = parse_optional(&row[2], "age_years", line)?;
        let cohort: Cohort = row[3].parse().map_err(|msg| Error::Manifest { line, msg })?;
        let survival_months = parse_optional(&row[4], "survival_months", line)?;
        if cohort == Cohort::Test && age_years.is_none() {
            unlabeled_test.push((line, id.clone()));
        }
        records.push(SampleRecord {
            id,
            image_path,
            age_years,
            cohort,
            survival_months,
        });
    }
    if let Some(&(line, _)) = unlabeled_test.first() {
        let listed: Vec<String> = unlabeled_test
            .iter()
            .map(|(l, id)| format!("`{id}` (line {l})"))
            .collect();
        return Err(Error::Manifest {
            line,
            msg: format!("test records without age_years: {}", listed.join(", ")),
        });
    }
    Ok(Manifest { records })
}

/// Write records; image paths are stored relative to `path`'s directory when possible.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format(path, e);
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in records {
        let rel = r.image_path.strip_prefix(base).unwrap_or(&r.image_path);
        w.write_record([
            r.id.clone(),
            rel.to_string_lossy().into_owned(),
            r.age_years.map(format_number).unwrap_or_default(),
            r.cohort.to_string(),
            r.survival_months.map(format_number).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Shortest decimal that round-trips.
pub fn format_number(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("manifest.csv");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "id,image_path,age_years,cohort,survival_months\n");
        let m = load_manifest(&p).unwrap();
        assert!(m.records.is_empty());
        assert!(m.counts().is_empty());
    }

    #[test]
    fn unlabeled_test_record_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "id,image_path,age_years,cohort,survival_months\na,a.png,40,train,\nb,b.png,,test,\n",
        );
        match parse_manifest(&p) {
            Err(Error::Manifest { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("`b`"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "id,image_path,age_years,cohort,survival_months\na,a.png,40,train,\na,b.png,41,train,\n",
        );
        assert!(matches!(parse_manifest(&p), Err(Error::Manifest { line: 3, .. })));

        let p = write(
            dir.path(),
            "id,image_path,age_years,cohort,survival_months\na,a.png,forty,train,\n",
        );
        assert!(matches!(parse_manifest(&p), Err(Error::Manifest { line: 2, .. })));

        let p = write(dir.path(), "id,path\n");
        assert!(matches!(parse_manifest(&p), Err(Error::Manifest { line: 1, .. })));

        let p = write(
            dir.path(),
            "id,image_path,age_years,cohort,survival_months\na,a.png,40,control,\n",
        );
        assert!(matches!(parse_manifest(&p), Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn missing_files_reported_together() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"x").unwrap();
        let p = write(
            dir.path(),
            "id,image_path,age_years,cohort,survival_months\na,a.png,1,train,\nb,b.png,2,train,\nc,c.png,,train,\n",
        );
        match load_manifest(&p) {
            Err(Error::MissingFiles(v)) => assert_eq!(v.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn write_then_parse_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let records = vec![
            SampleRecord {
                id: "s1".into(),
                image_path: dir.path().join("img/s1.png"),
                age_years: Some(63.25),
                cohort: Cohort::Patient,
                survival_months: Some(18.5),
            },
            SampleRecord {
                id: "s2".into(),
                image_path: dir.path().join("img/s2.png"),
                age_years: None,
                cohort: Cohort::Train,
                survival_months: None,
            },
        ];
        write_manifest(&p, &records).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("s1,img/s1.png,63.25,patient,18.5"));
        assert_eq!(parse_manifest(&p).unwrap().records, records);
    }
}
