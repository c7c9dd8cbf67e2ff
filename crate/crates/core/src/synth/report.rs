use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AnomalyKind;
use crate::error::{Error, Result};

const NORMAL_FINDINGS: &[&str] = &[
    "No acute abnormality.",
    "No acute cardiopulmonary abnormality is seen.",
    "Heart size is within normal limits.",
    "The cardiomediastinal silhouette is normal in size and contour.",
    "No focal airspace consolidation is identified.",
];

const FILLER: &[&str] = &[
    "Frontal view of the chest was obtained.",
    "Comparison is made to the prior study.",
    "The lungs are clear bilaterally.",
    "There is no pneumothorax or pleural effusion.",
    "Mediastinal contours are within normal limits.",
    "Visualized osseous structures are intact.",
    "The trachea is midline.",
    "Soft tissues are unremarkable.",
];

fn finding_templates(kind: AnomalyKind) -> &'static [&'static str] {
    match kind {
        AnomalyKind::SpineDegeneration => &[
            "There are degenerative changes in the spine.",
            "Mild degenerative changes of the thoracic spine are present.",
            "Multilevel degenerative disease of the spine is seen.",
        ],
        AnomalyKind::Cardiomegaly => &[
            "Borderline enlarged heart.",
            "The heart is mildly enlarged.",
            "The cardiac silhouette appears enlarged.",
        ],
        AnomalyKind::Nodule => &[
            "A small nodule is seen in the right lung.",
            "There is a nodule in the left upper lobe.",
            "A rounded nodule projects over the mid lung.",
        ],
        AnomalyKind::Opacity => &[
            "There is a patchy opacity at the lung base.",
            "An ill defined opacity is present in the right lung.",
            "Focal opacity is noted in the lower lobe.",
        ],
    }
}

/// Builds a templated report.
///
/// Abnormal reports contain one finding sentence per kind (each carrying the
/// kind's keyword); normal reports lead with a negation sentence. Filler
/// sentences pad the report towards roughly 27 words.
pub fn generate_report(label: u8, kinds: &[AnomalyKind], seed: u64) -> Result<String> {
    if (label == 1) == kinds.is_empty() || label > 1 {
        return Err(Error::usage(format!(
            "label {label} inconsistent with {} anomaly kinds",
            kinds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences: Vec<&str> = Vec::new();
    if label == 0 {
        sentences.push(NORMAL_FINDINGS.choose(&mut rng).expect("non-empty"));
    } else {
        for &kind in kinds {
            sentences.push(finding_templates(kind).choose(&mut rng).expect("non-empty"));
        }
    }
    let target = rng.gen_range(20..=32);
    let mut filler: Vec<&str> = FILLER.to_vec();
    filler.shuffle(&mut rng);
    let words = |s: &[&str]| s.iter().map(|x| x.split_whitespace().count()).sum::<usize>();
    for f in filler {
        if words(&sentences) >= target {
            break;
        }
        let at = rng.gen_range(0..=sentences.len());
        sentences.insert(at, f);
    }
    Ok(sentences.join(" "))
}
