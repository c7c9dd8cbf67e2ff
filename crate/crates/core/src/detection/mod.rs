use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{integrated_gradients, AttributionMap2D, LogitModel, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_K_MAX: usize = 6;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const MAX_ITERATIONS: usize = 100;

pub type Point = [f64; 2];

/// Quantile of `|attribution|` at which a pixel turns into a signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SightSensitivity(f64);

impl SightSensitivity {
    pub fn new(q: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&q) {
            return Err(Error::usage(format!("sight sensitivity {q} outside [0, 1)")));
        }
        Ok(Self(q))
    }

    pub fn q(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalPointSet {
    /// `(row, col)` in row-major order.
    pub points: Vec<[usize; 2]>,
    pub threshold: f64,
}

impl SignalPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coordinates(&self) -> Vec<Point> {
        self.points.iter().map(|p| [p[0] as f64, p[1] as f64]).collect()
    }
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn extract_signals(map: &AttributionMap2D, sensitivity: SightSensitivity) -> Result<SignalPointSet> {
    if map.values.is_empty() {
        return Err(Error::usage("attribution map is empty"));
    }
    let mags: Vec<f64> = map.values.iter().map(|v| v.abs()).collect();
    let threshold = quantile(&mags, sensitivity.q());
    let points = mags
        .iter()
        .enumerate()
        .filter(|(_, &m)| m >= threshold)
        .map(|(i, _)| [i / map.width, i % map.width])
        .collect();
    Ok(SignalPointSet { points, threshold })
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Point>,
    /// Cluster index of each input point.
    pub assignments: Vec<usize>,
    pub wcss: f64,
    /// WCSS after each Lloyd iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }
}

pub fn wcss(points: &[Point], centroids: &[Point], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(&p, &a)| dist2(p, centroids[a]))
        .sum()
}

fn nearest(p: Point, centroids: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, &centroid) in centroids.iter().enumerate() {
        let d = dist2(p, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Distinct first picks tried by [`kmeans_cluster`].
pub const RESTARTS: usize = 10;

/// Greedy farthest-point seeding from `points[first]`; ties go to the
/// lowest index.
pub fn farthest_point_init(points: &[Point], k: usize, first: usize) -> Vec<Point> {
    let mut centroids = vec![points[first]];
    let mut min_d: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let mut far = 0;
        for i in 1..points.len() {
            if min_d[i] > min_d[far] {
                far = i;
            }
        }
        let c = points[far];
        centroids.push(c);
        for (d, &p) in min_d.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }
    centroids
}

fn means(points: &[Point], assignments: &[usize], k: usize) -> (Vec<Point>, Vec<usize>) {
    let mut sums = vec![[0.0, 0.0]; k];
    let mut counts = vec![0usize; k];
    for (&p, &a) in points.iter().zip(assignments) {
        sums[a][0] += p[0];
        sums[a][1] += p[1];
        counts[a] += 1;
    }
    let centroids = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { [f64::NAN; 2] } else { [s[0] / n as f64, s[1] / n as f64] })
        .collect();
    (centroids, counts)
}

fn lloyd(points: &[Point], mut centroids: Vec<Point>) -> Clustering {
    let k = centroids.len();
    let mut assignments: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let (mut next, mut counts) = means(points, &assignments, k);
        while let Some(empty) = counts.iter().position(|&n| n == 0) {
            let mut far = None;
            let mut far_d = -1.0;
            for (i, &p) in points.iter().enumerate() {
                let a = assignments[i];
                if counts[a] < 2 {
                    continue;
                }
                let d = dist2(p, next[a]);
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
            let i = far.expect("k ≤ n leaves a cluster with two members");
            assignments[i] = empty;
            (next, counts) = means(points, &assignments, k);
        }
        centroids = next;
        history.push(wcss(points, &centroids, &assignments));
        let reassigned: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
        if reassigned == assignments || iterations >= MAX_ITERATIONS {
            break;
        }
        assignments = reassigned;
    }
    Clustering {
        wcss: *history.last().expect("at least one iteration"),
        centroids,
        assignments,
        history,
        iterations,
    }
}

/// Lloyd's algorithm from farthest-point seeds. Equidistant points join the
/// lowest-index centroid; an emptied cluster takes over the point lying
/// farthest from its own centroid. Up to [`RESTARTS`] first picks, drawn
/// from `seed`, are tried and the lowest final WCSS is kept.
pub fn kmeans_cluster(points: &[Point], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::usage("k must be at least 1"));
    }
    if k > points.len() {
        return Err(Error::usage(format!("k = {k} exceeds {} points", points.len())));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tries = if k == 1 { 1 } else { RESTARTS.min(points.len()) };
    let mut best: Option<Clustering> = None;
    for &first in &order[..tries] {
        let run = lloyd(points, farthest_point_init(points, k, first));
        if best.as_ref().map_or(true, |b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Smallest `k` whose step to `k + 1` removes less than `epsilon` of the
/// WCSS beyond what splitting structureless planar data would remove
/// (`W_{k+1} ≈ k/(k+1)·W_k`).
pub fn choose_cluster_count(points: &[Point], k_max: usize, epsilon: f64, seed: u64) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::usage("cannot choose a cluster count for zero points"));
    }
    if k_max == 0 {
        return Err(Error::usage("k_max must be at least 1"));
    }
    let top = k_max.min(points.len());
    let mut prev = kmeans_cluster(points, 1, seed)?.wcss;
    for k in 1..top {
        if prev <= f64::EPSILON {
            return Ok(k);
        }
        let next = kmeans_cluster(points, k + 1, seed)?.wcss;
        let excess = k as f64 / (k + 1) as f64 - next / prev;
        if excess < epsilon {
            return Ok(k);
        }
        prev = next;
    }
    Ok(top)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionCircle {
    pub center: Point,
    pub radius: f64,
    pub member_count: usize,
    /// Summed `|attribution|` of the members; zero when unknown.
    #[serde(default)]
    pub mass: f64,
}

/// One circle per cluster, largest first; equal sizes in row-major order of
/// their centres. `weights` gives each point's mass.
pub fn bounding_circles(points: &[Point], clustering: &Clustering, weights: Option<&[f64]>) -> Vec<DetectionCircle> {
    let mut circles: Vec<DetectionCircle> = (0..clustering.k())
        .map(|c| {
            let members = clustering.members(c);
            let center = clustering.centroids[c];
            let radius = members
                .iter()
                .map(|&i| dist2(points[i], center).sqrt())
                .fold(0.0, f64::max);
            let mass = weights.map_or(0.0, |w| members.iter().map(|&i| w[i]).sum());
            DetectionCircle {
                center,
                radius,
                member_count: members.len(),
                mass,
            }
        })
        .collect();
    circles.sort_by(|a, b| {
        b.member_count
            .cmp(&a.member_count)
            .then(a.center[0].total_cmp(&b.center[0]))
            .then(a.center[1].total_cmp(&b.center[1]))
    });
    circles
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub q: f64,
    pub k_max: usize,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            q: 0.98,
            k_max: DEFAULT_K_MAX,
            epsilon: DEFAULT_EPSILON,
            steps: DEFAULT_STEPS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub case_id: String,
    pub sensitivity_q: f64,
    pub threshold: f64,
    pub k: usize,
    pub circles: Vec<DetectionCircle>,
    pub points: Vec<[usize; 2]>,
}

impl DetectionResult {
    /// The circle whose members carry the most attribution.
    pub fn strongest(&self) -> Option<&DetectionCircle> {
        self.circles
            .iter()
            .fold(None, |best: Option<&DetectionCircle>, c| match best {
                Some(b) if b.mass >= c.mass => Some(b),
                _ => Some(c),
            })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Thresholding, cluster-count selection, clustering and circles over an
/// existing map.
pub fn detect_from_map(case_id: &str, map: &AttributionMap2D, params: &DetectParams) -> Result<DetectionResult> {
    let sensitivity = SightSensitivity::new(params.q)?;
    let signals = extract_signals(map, sensitivity)?;
    let mut result = DetectionResult {
        case_id: case_id.to_string(),
        sensitivity_q: params.q,
        threshold: signals.threshold,
        k: 0,
        circles: Vec::new(),
        points: signals.points.clone(),
    };
    if signals.is_empty() {
        return Ok(result);
    }
    let coords = signals.coordinates();
    let weights: Vec<f64> = signals
        .points
        .iter()
        .map(|p| map.get(p[0], p[1]).abs())
        .collect();
    let k = choose_cluster_count(&coords, params.k_max, params.epsilon, params.seed)?;
    let clustering = kmeans_cluster(&coords, k, params.seed)?;
    result.k = k;
    result.circles = bounding_circles(&coords, &clustering, Some(&weights));
    Ok(result)
}

/// Integrated gradients followed by [`detect_from_map`].
pub fn detect(
    case_id: &str,
    model: &dyn LogitModel,
    image: &Tensor,
    params: &DetectParams,
) -> Result<(AttributionMap2D, DetectionResult)> {
    SightSensitivity::new(params.q)?;
    let map = integrated_gradients(model, image, params.steps)?;
    let result = detect_from_map(case_id, &map, params)?;
    Ok((map, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Baseline;

    fn map_of(h: usize, w: usize, values: Vec<f64>) -> AttributionMap2D {
        AttributionMap2D {
            height: h,
            width: w,
            values,
            baseline: Baseline::Zeros,
            steps: 1,
            f_input: 0.0,
            f_baseline: 0.0,
        }
    }

    #[test]
    fn q_zero_keeps_every_pixel() {
        let m = map_of(3, 3, (0..9).map(|i| i as f64 - 4.0).collect());
        let s = extract_signals(&m, SightSensitivity::new(0.0).unwrap()).unwrap();
        assert_eq!(s.len(), 9);
    }

    #[test]
    fn q_outside_range_rejected() {
        assert!(SightSensitivity::new(1.0).is_err());
        assert!(SightSensitivity::new(-0.1).is_err());
        assert!(SightSensitivity::new(f64::NAN).is_err());
    }

    #[test]
    fn uniform_map_keeps_ties() {
        let m = map_of(4, 4, vec![0.3; 16]);
        let s = extract_signals(&m, SightSensitivity::new(0.9).unwrap()).unwrap();
        assert_eq!(s.len(), 16);
    }

    #[test]
    fn pair_circle_by_hand() {
        let pts = [[0.0, 0.0], [0.0, 4.0]];
        let c = kmeans_cluster(&pts, 1, 0).unwrap();
        let circles = bounding_circles(&pts, &c, None);
        assert_eq!(circles[0].center, [0.0, 2.0]);
        assert_eq!(circles[0].radius, 2.0);
    }

    #[test]
    fn k_equal_to_n_has_zero_wcss() {
        let pts = [[1.0, 2.0], [5.0, 1.0], [3.0, 3.0], [0.0, 9.0]];
        let c = kmeans_cluster(&pts, 4, 3).unwrap();
        assert_eq!(c.wcss, 0.0);
        let circles = bounding_circles(&pts, &c, None);
        assert!(circles.iter().all(|c| c.radius == 0.0 && c.member_count == 1));
    }

    #[test]
    fn coincident_points_need_one_cluster() {
        let pts = vec![[2.0, 2.0]; 7];
        assert_eq!(choose_cluster_count(&pts, 6, 0.05, 0).unwrap(), 1);
        let c = kmeans_cluster(&pts, 3, 0).unwrap();
        assert_eq!(c.members(0).len() + c.members(1).len() + c.members(2).len(), 7);
    }

    #[test]
    fn empty_inputs_are_usage_errors() {
        assert!(choose_cluster_count(&[], 3, 0.05, 0).is_err());
        assert!(kmeans_cluster(&[[0.0, 0.0]], 2, 0).is_err());
    }

    #[test]
    fn empty_signal_set_gives_no_circles() {
        let m = map_of(2, 2, vec![f64::NAN; 4]);
        let r = detect_from_map("c0", &m, &DetectParams::default()).unwrap();
        assert!(r.points.is_empty() && r.circles.is_empty() && r.k == 0);
    }
}
