use std::fmt::Write;

use crate::attribution::{AttributionMap2D, TokenAttribution};
use crate::detection::DetectionResult;
use crate::error::{Error, Result};
use crate::synth::GrayImage;

pub const BUCKETS: usize = 5;

/// Terminal background colors, dimmest first.
const TERMINAL_SHADES: [u8; BUCKETS] = [236, 52, 88, 160, 196];

fn gray_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Fraction of pixels whose `|attribution|` is strictly below each pixel's.
pub fn heat_opacity(map: &AttributionMap2D) -> Vec<f64> {
    let mags: Vec<f64> = map.values.iter().map(|v| v.abs()).collect();
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let denom = (mags.len().max(2) - 1) as f64;
    mags.iter()
        .map(|m| sorted.partition_point(|s| s < m) as f64 / denom)
        .collect()
}

/// SVG with the image as one rect per pixel, an optional heat layer and one
/// `circle` element per detection circle. Circle attributes carry the
/// detection values verbatim; the group translation moves them to pixel
/// centres.
pub fn render_overlay_svg(
    case_id: &str,
    image: &GrayImage,
    result: &DetectionResult,
    heat: Option<&AttributionMap2D>,
) -> Result<String> {
    if result.case_id != case_id {
        return Err(Error::usage(format!(
            "detection result is for {}, not {case_id}",
            result.case_id
        )));
    }
    let (h, w) = (image.height, image.width);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {w} {h}\">",
        w * 4,
        h * 4
    );
    let _ = writeln!(out, "<g id=\"base\" shape-rendering=\"crispEdges\">");
    for r in 0..h {
        for c in 0..w {
            let g = gray_level(image.get(r, c));
            let _ = writeln!(
                out,
                "<rect x=\"{c}\" y=\"{r}\" width=\"1\" height=\"1\" fill=\"rgb({g},{g},{g})\"/>"
            );
        }
    }
    out.push_str("</g>\n");
    if let Some(map) = heat {
        if (map.height, map.width) != (h, w) {
            return Err(Error::usage(format!(
                "heat map {}×{} does not match image {h}×{w}",
                map.height, map.width
            )));
        }
        let _ = writeln!(out, "<g id=\"heat\" shape-rendering=\"crispEdges\">");
        for (i, o) in heat_opacity(map).iter().enumerate() {
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"1\" height=\"1\" fill=\"rgb(255,64,0)\" fill-opacity=\"{o}\"/>",
                i % w,
                i / w
            );
        }
        out.push_str("</g>\n");
    }
    let _ = writeln!(
        out,
        "<g id=\"overlay\" transform=\"translate(0.5 0.5)\" fill=\"none\" stroke=\"rgb(0,255,128)\" stroke-width=\"0.4\">"
    );
    for circle in &result.circles {
        let _ = writeln!(
            out,
            "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" data-members=\"{}\"/>",
            circle.center[1], circle.center[0], circle.radius, circle.member_count
        );
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

/// Copy of `image` with each circle's outline drawn at full intensity.
pub fn rasterize_circles(image: &GrayImage, result: &DetectionResult) -> GrayImage {
    let mut out = image.clone();
    for circle in &result.circles {
        for r in 0..image.height {
            for c in 0..image.width {
                let d = ((r as f64 - circle.center[0]).powi(2) + (c as f64 - circle.center[1]).powi(2)).sqrt();
                if (d - circle.radius).abs() <= 0.5 {
                    out.pixels[r * image.width + c] = 1.0;
                }
            }
        }
    }
    out
}

/// Bucket per score: zero scores are dimmest; positive scores are split at
/// the quartiles of the document's positive scores into buckets 1..=4.
pub fn score_buckets(scores: &[f64]) -> Vec<usize> {
    let positive: Vec<f64> = scores.iter().copied().filter(|&s| s > 0.0).collect();
    if positive.is_empty() {
        return vec![0; scores.len()];
    }
    let cuts: Vec<f64> = (1..BUCKETS - 1)
        .map(|j| crate::detection::quantile(&positive, j as f64 / (BUCKETS - 1) as f64))
        .collect();
    scores
        .iter()
        .map(|&s| {
            if s > 0.0 {
                1 + cuts.iter().filter(|&&t| s >= t).count()
            } else {
                0
            }
        })
        .collect()
}

fn check_alignment(tokens: &[String], scores: &TokenAttribution) -> Result<()> {
    if tokens.len() != scores.len() {
        return Err(Error::usage(format!(
            "{} tokens but {} scores",
            tokens.len(),
            scores.len()
        )));
    }
    Ok(())
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Self-contained HTML page; each token's score is its hover text.
pub fn render_text_heatmap_html(case_id: &str, tokens: &[String], scores: &TokenAttribution) -> Result<String> {
    check_alignment(tokens, scores)?;
    let values = scores.normalized_scores();
    let buckets = score_buckets(&values);
    let mut out = String::new();
    let _ = writeln!(out, "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">");
    let _ = writeln!(out, "<title>{}</title>\n<style>", escape_html(case_id));
    out.push_str("body { font-family: sans-serif; line-height: 1.8; }\n");
    for b in 0..BUCKETS {
        let _ = writeln!(
            out,
            ".b{b} {{ background: rgba(255, 80, 0, {}); padding: 1px 2px; }}",
            b as f64 / (BUCKETS - 1) as f64
        );
    }
    out.push_str("</style>\n</head>\n<body>\n<p>\n");
    for ((token, score), b) in tokens.iter().zip(&values).zip(&buckets) {
        let _ = writeln!(
            out,
            "<span class=\"b{b}\" title=\"{score:.4}\">{}</span>",
            escape_html(token)
        );
    }
    out.push_str("</p>\n</body>\n</html>\n");
    Ok(out)
}

/// One line of text with 256-color background shading per token.
pub fn render_text_heatmap_terminal(tokens: &[String], scores: &TokenAttribution) -> Result<String> {
    check_alignment(tokens, scores)?;
    let buckets = score_buckets(&scores.normalized_scores());
    let mut out = String::new();
    for (i, (token, b)) in tokens.iter().zip(&buckets).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "\x1b[48;5;{}m{token}\x1b[0m", TERMINAL_SHADES[*b]);
    }
    Ok(out)
}
