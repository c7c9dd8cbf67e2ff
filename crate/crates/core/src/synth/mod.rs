//! Synthetic paired image + report cases with planted anomalies and
//! structured-noise artifacts.

mod dataset;
mod pgm;
mod report;

pub use dataset::{
    generate_dataset, load_manifest, CaseRecord, Dataset, DatasetManifest, Domain, GenerateOptions,
    SyntheticCase, MANIFEST_FILE,
};
pub use pgm::{decode_pgm, encode_pgm};
pub use report::generate_report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// Grayscale raster, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// `H×W×1` tensor for the image encoder.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 1], self.pixels.clone()).expect("pixel count")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    SpineDegeneration,
    Cardiomegaly,
    Nodule,
    Opacity,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::SpineDegeneration,
        AnomalyKind::Cardiomegaly,
        AnomalyKind::Nodule,
        AnomalyKind::Opacity,
    ];

    /// The report word that names this finding.
    pub fn keyword(self) -> &'static str {
        match self {
            AnomalyKind::SpineDegeneration => "degenerative",
            AnomalyKind::Cardiomegaly => "enlarged",
            AnomalyKind::Nodule => "nodule",
            AnomalyKind::Opacity => "opacity",
        }
    }

    pub fn keywords() -> Vec<&'static str> {
        Self::ALL.iter().map(|k| k.keyword()).collect()
    }
}

/// A planted bright blob.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    /// `[row, col]` in pixels.
    pub center: [f64; 2],
    pub radius: f64,
    pub kind: AnomalyKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// Fixed block of "writing" in the top-left corner.
    CornerGlyph,
    /// Raised background level over the whole image.
    BackgroundOffset,
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    pub region: Region,
}

const GLYPH: [&str; 7] = [
    "###..#...##",
    "#..#.#..#..",
    "#..#.#..#..",
    "###..#..#.#",
    "#.#..#..#.#",
    "#..#.#..#..",
    "#..#.####..",
];
const GLYPH_OFFSET: usize = 2;
const GLYPH_INTENSITY: f64 = 0.3;

/// Where the corner glyph is drawn.
pub fn glyph_region() -> Region {
    Region {
        top: GLYPH_OFFSET,
        left: GLYPH_OFFSET,
        height: GLYPH.len(),
        width: GLYPH[0].len(),
    }
}

const BACKGROUND: f64 = 0.06;
const TORSO: f64 = 0.32;
const BLOB_AMPLITUDE: f64 = 0.7;
const NOISE_SD: f64 = 0.015;

/// Semi-axes of the torso ellipse as fractions of the image size.
pub(crate) const TORSO_AXES: (f64, f64) = (0.45, 0.42);

/// Renders one case: dark background, bright torso ellipse, a Gaussian blob
/// per anomaly and the requested artifacts. Pixel values are quantized to
/// the 8-bit grid so a PGM round trip is exact.
pub fn generate_image(
    seed: u64,
    size: usize,
    anomalies: &[Anomaly],
    artifacts: &[ArtifactKind],
) -> Result<(GrayImage, Vec<Artifact>)> {
    if size < 32 {
        return Err(Error::usage(format!("image size must be at least 32, got {size}")));
    }
    for a in anomalies {
        if !(a.radius > 0.0) || a.radius * 2.0 >= size as f64 {
            return Err(Error::usage(format!(
                "anomaly radius {} does not fit a {size}×{size} image",
                a.radius
            )));
        }
        let inside = |v: f64| v >= 0.0 && v <= (size - 1) as f64;
        if !inside(a.center[0]) || !inside(a.center[1]) {
            return Err(Error::usage(format!(
                "anomaly center {:?} outside a {size}×{size} image",
                a.center
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    let s = size as f64;
    let offset = if artifacts.contains(&ArtifactKind::BackgroundOffset) {
        rng.gen_range(0.04..0.12)
    } else {
        0.0
    };
    let center = (
        s / 2.0 + rng.gen_range(-1.5..1.5),
        s / 2.0 + rng.gen_range(-1.5..1.5),
    );
    let axes = (TORSO_AXES.0 * s, TORSO_AXES.1 * s);

    let mut pixels = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64, c as f64);
            let e = ((y - center.0) / axes.0).powi(2) + ((x - center.1) / axes.1).powi(2);
            // one-pixel soft edge
            let edge = ((1.0 - e.sqrt()) * axes.1).clamp(0.0, 1.0);
            let mut v = BACKGROUND + offset + edge * TORSO;
            for a in anomalies {
                let sigma = a.radius / 2.0;
                let d2 = (y - a.center[0]).powi(2) + (x - a.center[1]).powi(2);
                v += BLOB_AMPLITUDE * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            v += noise.sample(&mut rng);
            pixels[r * size + c] = v;
        }
    }

    let mut placed = Vec::new();
    for &kind in artifacts {
        let region = match kind {
            ArtifactKind::CornerGlyph => {
                let region = glyph_region();
                for (i, line) in GLYPH.iter().enumerate() {
                    for (j, ch) in line.bytes().enumerate() {
                        if ch == b'#' {
                            pixels[(region.top + i) * size + region.left + j] = GLYPH_INTENSITY;
                        }
                    }
                }
                region
            }
            ArtifactKind::BackgroundOffset => Region {
                top: 0,
                left: 0,
                height: size,
                width: size,
            },
        };
        placed.push(Artifact { kind, region });
    }
    for p in &mut pixels {
        *p = f64::from(pgm::quantize(*p)) / 255.0;
    }
    Ok((
        GrayImage {
            height: size,
            width: size,
            pixels,
        },
        placed,
    ))
}
