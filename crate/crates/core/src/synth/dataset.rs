use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    decode_pgm, encode_pgm, generate_image, generate_report, Anomaly, AnomalyKind, Artifact,
    ArtifactKind, GrayImage, TORSO_AXES,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Pretraining domain: the corner glyph follows the label.
    Source,
    /// Fine-tuning domain: the corner glyph is a coin flip.
    Target,
}

impl Domain {
    /// Probability of the corner glyph given the label.
    pub fn glyph_probability(self, label: u8) -> f64 {
        match (self, label) {
            (Domain::Source, 1) => 0.9,
            (Domain::Source, _) => 0.1,
            (Domain::Target, _) => 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub domain: Domain,
    pub n: usize,
    pub abnormal_prior: f64,
    pub seed: u64,
    pub image_size: usize,
}

impl GenerateOptions {
    pub fn new(domain: Domain, n: usize, seed: u64) -> Self {
        Self {
            domain,
            n,
            abnormal_prior: 0.6,
            seed,
            image_size: super::DEFAULT_IMAGE_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    /// Relative to the manifest's directory.
    pub image: String,
    pub report: String,
    pub label: u8,
    pub image_sha256: String,
    pub report_sha256: String,
    pub anomalies: Vec<Anomaly>,
    pub artifacts: Vec<Artifact>,
}

impl CaseRecord {
    pub fn has_artifact(&self, kind: ArtifactKind) -> bool {
        self.artifacts.iter().any(|a| a.kind == kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: Domain,
    pub seed: u64,
    pub image_size: usize,
    /// Fraction of abnormal cases.
    pub class_prior: f64,
    pub cases: Vec<CaseRecord>,
}

impl DatasetManifest {
    pub fn labels(&self) -> Vec<u8> {
        self.cases.iter().map(|c| c.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub case_id: String,
    pub image: GrayImage,
    pub report: String,
    pub label: u8,
    pub anomalies: Vec<Anomaly>,
    pub artifacts: Vec<Artifact>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn place_anomalies(rng: &mut ChaCha8Rng, size: usize) -> Vec<Anomaly> {
    let count = if rng.gen_bool(0.75) { 1 } else { 2 };
    let mut kinds = AnomalyKind::ALL.to_vec();
    kinds.shuffle(rng);
    let s = size as f64;
    let mut out: Vec<Anomaly> = Vec::new();
    for &kind in kinds.iter().take(count) {
        for _ in 0..50 {
            let radius = f64::from(rng.gen_range(3u8..=5)) * s / 64.0;
            let (u, v): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if u * u + v * v > 1.0 {
                continue;
            }
            let center = [
                (s / 2.0 + u * 0.6 * TORSO_AXES.0 * s).round(),
                (s / 2.0 + v * 0.6 * TORSO_AXES.1 * s).round(),
            ];
            let clear = out.iter().all(|o| {
                let d = ((o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2)).sqrt();
                d > o.radius + radius + 6.0
            });
            if clear {
                out.push(Anomaly {
                    center,
                    radius,
                    kind,
                });
                break;
            }
        }
    }
    out
}

/// Generates `n` cases under `out_dir` (images/, reports/, manifest.json).
///
/// Exactly `round(n * abnormal_prior)` cases are abnormal, in shuffled order.
pub fn generate_dataset(out_dir: &Path, options: &GenerateOptions) -> Result<DatasetManifest> {
    if options.n < 10 {
        return Err(Error::usage(format!("dataset needs at least 10 cases, got {}", options.n)));
    }
    if !(0.0..=1.0).contains(&options.abnormal_prior) {
        return Err(Error::usage("abnormal prior must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let n_abnormal = (options.n as f64 * options.abnormal_prior).round() as usize;
    let mut labels: Vec<u8> = (0..options.n).map(|i| u8::from(i < n_abnormal)).collect();
    labels.shuffle(&mut rng);

    for sub in ["images", "reports"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut cases = Vec::with_capacity(options.n);
    for (i, &label) in labels.iter().enumerate() {
        let case_id = format!("c{i}");
        let image_seed: u64 = rng.gen();
        let report_seed: u64 = rng.gen();
        let anomalies = if label == 1 {
            place_anomalies(&mut rng, options.image_size)
        } else {
            Vec::new()
        };
        let mut artifact_kinds = Vec::new();
        if rng.gen_bool(options.domain.glyph_probability(label)) {
            artifact_kinds.push(ArtifactKind::CornerGlyph);
        }
        if rng.gen_bool(0.5) {
            artifact_kinds.push(ArtifactKind::BackgroundOffset);
        }
        let (image, artifacts) =
            generate_image(image_seed, options.image_size, &anomalies, &artifact_kinds)?;
        let kinds: Vec<AnomalyKind> = anomalies.iter().map(|a| a.kind).collect();
        let report = generate_report(label, &kinds, report_seed)?;

        let image_rel = format!("images/{case_id}.pgm");
        let report_rel = format!("reports/{case_id}.txt");
        let image_bytes = encode_pgm(&image);
        let image_path = out_dir.join(&image_rel);
        fs::write(&image_path, &image_bytes).map_err(|e| Error::io(&image_path, e))?;
        let report_path = out_dir.join(&report_rel);
        fs::write(&report_path, report.as_bytes()).map_err(|e| Error::io(&report_path, e))?;
        cases.push(CaseRecord {
            case_id,
            image: image_rel,
            report: report_rel,
            label,
            image_sha256: sha256_hex(&image_bytes),
            report_sha256: sha256_hex(report.as_bytes()),
            anomalies,
            artifacts,
        });
    }
    let manifest = DatasetManifest {
        domain: options.domain,
        seed: options.seed,
        image_size: options.image_size,
        class_prior: n_abnormal as f64 / options.n as f64,
        cases,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A validated manifest plus its directory; cases are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

/// Reads and validates a manifest. `path` may be the manifest file or the
/// directory holding it. Case files are checked for existence here and
/// for checksums when each case is loaded.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Malformed(format!("{}: {e}", file.display())))?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    for c in &manifest.cases {
        if c.label > 1 || (c.label == 1) == c.anomalies.is_empty() {
            return Err(Error::Malformed(format!(
                "case {} has label {} with {} anomalies",
                c.case_id,
                c.label,
                c.anomalies.len()
            )));
        }
        for rel in [&c.image, &c.report] {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::MissingFile {
                    case_id: c.case_id.clone(),
                    path: p,
                });
            }
        }
    }
    Ok(Dataset { manifest, root })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.cases.is_empty()
    }

    pub fn record(&self, index: usize) -> &CaseRecord {
        &self.manifest.cases[index]
    }

    pub fn index_of(&self, case_id: &str) -> Option<usize> {
        self.manifest.cases.iter().position(|c| c.case_id == case_id)
    }

    fn read_checked(&self, case_id: &str, rel: &str, digest: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                case_id: case_id.to_string(),
                path: path.clone(),
            },
            _ => Error::io(&path, e),
        })?;
        if sha256_hex(&bytes) != digest {
            return Err(Error::Checksum {
                case_id: case_id.to_string(),
                path,
            });
        }
        Ok(bytes)
    }

    pub fn load_image(&self, index: usize) -> Result<GrayImage> {
        let rec = self.record(index);
        let bytes = self.read_checked(&rec.case_id, &rec.image, &rec.image_sha256)?;
        let image = decode_pgm(&bytes)
            .map_err(|e| Error::Malformed(format!("case {}: {e}", rec.case_id)))?;
        Ok(image)
    }

    pub fn load_report(&self, index: usize) -> Result<String> {
        let rec = self.record(index);
        let bytes = self.read_checked(&rec.case_id, &rec.report, &rec.report_sha256)?;
        String::from_utf8(bytes)
            .map_err(|_| Error::Malformed(format!("case {}: report is not UTF-8", rec.case_id)))
    }

    pub fn case(&self, index: usize) -> Result<SyntheticCase> {
        let rec = self.record(index);
        Ok(SyntheticCase {
            case_id: rec.case_id.clone(),
            image: self.load_image(index)?,
            report: self.load_report(index)?,
            label: rec.label,
            anomalies: rec.anomalies.clone(),
            artifacts: rec.artifacts.clone(),
        })
    }

    /// Lazily loads each case in manifest order.
    pub fn cases(&self) -> impl Iterator<Item = Result<SyntheticCase>> + '_ {
        (0..self.len()).map(move |i| self.case(i))
    }
}
