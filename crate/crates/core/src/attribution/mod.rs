use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, ModelInput};
use crate::tensor::Tensor;
use crate::text::PAD_ID;

pub const DEFAULT_STEPS: usize = 64;
pub const ACCEPTANCE_STEPS: usize = 256;

/// A scalar function of an image together with its input gradient.
pub trait LogitModel {
    fn logit_and_gradient(&self, input: &Tensor) -> Result<(f64, Tensor)>;
}

/// The classifier's logit as a function of the pixels, with the report
/// held fixed.
pub struct ImageLogit<'a> {
    pub model: &'a Classifier,
    pub tokens: &'a [usize],
}

impl LogitModel for ImageLogit<'_> {
    fn logit_and_gradient(&self, input: &Tensor) -> Result<(f64, Tensor)> {
        self.model.logit_image_gradient(input, self.tokens)
    }
}

/// `F(x) = w·x + b`.
#[derive(Clone, Debug)]
pub struct LinearLogit {
    pub weights: Tensor,
    pub bias: f64,
}

impl LogitModel for LinearLogit {
    fn logit_and_gradient(&self, input: &Tensor) -> Result<(f64, Tensor)> {
        if input.shape() != self.weights.shape() {
            return Err(Error::dim(format!(
                "input {:?} does not match weights {:?}",
                input.shape(),
                self.weights.shape()
            )));
        }
        let f = self
            .weights
            .data()
            .iter()
            .zip(input.data())
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias;
        Ok((f, self.weights.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Zeros,
    Custom,
}

/// Per-pixel integrated gradients for an `H×W` (or `H×W×1`) input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap2D {
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub values: Vec<f64>,
    pub baseline: Baseline,
    pub steps: usize,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl AttributionMap2D {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn completeness_gap(&self) -> f64 {
        (self.total() - (self.f_input - self.f_baseline)).abs()
    }

    /// Gap divided by `|F(x) − F(x')|`; falls back to the absolute gap
    /// when the output difference vanishes.
    pub fn relative_completeness_gap(&self) -> f64 {
        let diff = (self.f_input - self.f_baseline).abs();
        if diff < 1e-12 {
            self.completeness_gap()
        } else {
            self.completeness_gap() / diff
        }
    }

    pub fn to_json(&self, case_id: &str) -> Result<String> {
        Ok(serde_json::to_string(&AttributionExport {
            case_id: case_id.to_string(),
            shape: [self.height, self.width],
            baseline: self.baseline.clone(),
            steps: self.steps,
            f_input: self.f_input,
            f_baseline: self.f_baseline,
            values: self.values.clone(),
        })?)
    }

    pub fn from_json(json: &str) -> Result<(String, Self)> {
        let e: AttributionExport =
            serde_json::from_str(json).map_err(|e| Error::Malformed(e.to_string()))?;
        if e.values.len() != e.shape[0] * e.shape[1] {
            return Err(Error::Malformed(format!(
                "{} values for shape {:?}",
                e.values.len(),
                e.shape
            )));
        }
        Ok((
            e.case_id,
            Self {
                height: e.shape[0],
                width: e.shape[1],
                values: e.values,
                baseline: e.baseline,
                steps: e.steps,
                f_input: e.f_input,
                f_baseline: e.f_baseline,
            },
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct AttributionExport {
    case_id: String,
    shape: [usize; 2],
    baseline: Baseline,
    steps: usize,
    f_input: f64,
    f_baseline: f64,
    values: Vec<f64>,
}

fn map_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] | [h, w, 1] => Ok((*h, *w)),
        _ => Err(Error::dim(format!("expected an H×W or H×W×1 image, got {shape:?}"))),
    }
}

/// Integrated gradients from an all-zero baseline.
pub fn integrated_gradients(
    model: &dyn LogitModel,
    image: &Tensor,
    steps: usize,
) -> Result<AttributionMap2D> {
    let baseline = Tensor::zeros(image.shape());
    let mut map = integrated_gradients_from(model, image, &baseline, steps)?;
    map.baseline = Baseline::Zeros;
    Ok(map)
}

/// Left Riemann sum at `x' + (k/m)(x − x')`, `k = 1..=m`.
pub fn integrated_gradients_from(
    model: &dyn LogitModel,
    image: &Tensor,
    baseline: &Tensor,
    steps: usize,
) -> Result<AttributionMap2D> {
    if steps < 1 {
        return Err(Error::usage("integrated gradients needs at least one step"));
    }
    if image.shape() != baseline.shape() {
        return Err(Error::usage(format!(
            "baseline shape {:?} differs from image shape {:?}",
            baseline.shape(),
            image.shape()
        )));
    }
    let (height, width) = map_dims(image.shape())?;
    let delta: Vec<f64> = image
        .data()
        .iter()
        .zip(baseline.data())
        .map(|(x, b)| x - b)
        .collect();
    let mut acc = vec![0.0; delta.len()];
    let mut f_input = 0.0;
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let point: Vec<f64> = baseline
            .data()
            .iter()
            .zip(&delta)
            .map(|(b, d)| b + alpha * d)
            .collect();
        let point = Tensor::new(image.shape().to_vec(), point)?;
        let (f, grad) = model.logit_and_gradient(&point)?;
        for (a, g) in acc.iter_mut().zip(grad.data()) {
            *a += g;
        }
        if k == steps {
            f_input = f;
        }
    }
    let (f_baseline, _) = model.logit_and_gradient(baseline)?;
    let values = acc
        .iter()
        .zip(&delta)
        .map(|(a, d)| d * a / steps as f64)
        .collect();
    Ok(AttributionMap2D {
        height,
        width,
        values,
        baseline: Baseline::Custom,
        steps,
        f_input,
        f_baseline,
    })
}

/// Gradient of the classifier logit with respect to each looked-up
/// embedding row, `max_len × D`.
pub fn text_input_gradients(model: &Classifier, input: ModelInput<'_>) -> Result<Tensor> {
    Ok(model.logit_text_gradient(input)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub index: usize,
    pub raw: f64,
    pub normalized: f64,
}

/// One score per token instance of a document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub scores: Vec<TokenScore>,
    /// False when every raw score is zero.
    pub normalized: bool,
}

impl TokenAttribution {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn normalized_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.normalized).collect()
    }

    /// `tokens` holds the surface form of each scored instance.
    pub fn to_json(&self, case_id: &str, tokens: &[String]) -> Result<String> {
        if tokens.len() != self.scores.len() {
            return Err(Error::usage(format!(
                "{} tokens for {} scores",
                tokens.len(),
                self.scores.len()
            )));
        }
        #[derive(Serialize)]
        struct Row<'a> {
            index: usize,
            token: &'a str,
            raw: f64,
            normalized: f64,
        }
        #[derive(Serialize)]
        struct Export<'a> {
            case_id: &'a str,
            tokens: Vec<Row<'a>>,
        }
        let rows = self
            .scores
            .iter()
            .zip(tokens)
            .map(|(s, t)| Row {
                index: s.index,
                token: t,
                raw: s.raw,
                normalized: s.normalized,
            })
            .collect();
        Ok(serde_json::to_string(&Export {
            case_id,
            tokens: rows,
        })?)
    }
}

/// Squared row norms of `grad` over the first `true_length` rows, each
/// divided by their total. PAD ids inside that span are masked to zero.
pub fn token_importance(grad: &Tensor, ids: &[usize], true_length: usize) -> Result<TokenAttribution> {
    if grad.rank() != 2 {
        return Err(Error::dim(format!("gradient matrix of shape {:?}", grad.shape())));
    }
    let (rows, dim) = (grad.shape()[0], grad.shape()[1]);
    if true_length > rows || true_length > ids.len() {
        return Err(Error::dim(format!(
            "true length {true_length} exceeds {rows} gradient rows or {} ids",
            ids.len()
        )));
    }
    let raw: Vec<f64> = (0..true_length)
        .map(|j| {
            if ids[j] == PAD_ID {
                0.0
            } else {
                grad.data()[j * dim..(j + 1) * dim].iter().map(|g| g * g).sum()
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let normalized = total > 0.0;
    let scores = raw
        .iter()
        .enumerate()
        .map(|(index, &r)| TokenScore {
            index,
            raw: r,
            normalized: if normalized { r / total } else { 0.0 },
        })
        .collect();
    Ok(TokenAttribution { scores, normalized })
}

/// Gradients and importance scores in one call.
pub fn explain_text(model: &Classifier, input: ModelInput<'_>, true_length: usize) -> Result<TokenAttribution> {
    let grad = text_input_gradients(model, input)?;
    token_importance(&grad, input.tokens, true_length)
}
