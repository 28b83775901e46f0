//! Log-depth denormalization and the depth evaluation metric suite.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

/// Mapping between normalized log depth in [0, 1] and metric depth in meters:
/// `D_m = d_max * exp(-alpha * (1 - d_hat))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPostprocessConfig {
    pub d_max: f64,
    pub alpha: f64,
}

impl Default for DepthPostprocessConfig {
    fn default() -> Self {
        DepthPostprocessConfig {
            d_max: 80.0,
            alpha: 3.7,
        }
    }
}

impl DepthPostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_max.is_finite() && self.d_max > 0.0 && self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "depth postprocess parameters must be positive (d_max={}, alpha={})",
                self.d_max, self.alpha
            )));
        }
        Ok(())
    }

    /// Smallest representable metric depth, `d_max * exp(-alpha)`.
    pub fn min_depth(&self) -> f64 {
        self.d_max * (-self.alpha).exp()
    }
}

/// An H x W depth raster with a per-pixel validity mask. Values are either
/// normalized log depth in [0, 1] or metric meters depending on context.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || mask.len() != height * width {
            return Err(Error::Shape(format!(
                "depth map buffers do not match {height}x{width}"
            )));
        }
        Ok(DepthMap {
            height,
            width,
            values,
            mask,
        })
    }

    pub fn dense(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; values.len()];
        DepthMap::new(height, width, values, mask)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Converts a single normalized log-depth value to meters.
pub fn denormalize_value(d_hat: f64, config: &DepthPostprocessConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&d_hat) {
        return Err(Error::Domain(format!(
            "normalized depth {d_hat} outside [0, 1]"
        )));
    }
    Ok(config.d_max * (-config.alpha * (1.0 - d_hat)).exp())
}

/// Converts normalized log depth in [0, 1] to metric meters. The mask is
/// carried through unchanged.
pub fn denormalize_depth(pred: &DepthMap, config: &DepthPostprocessConfig) -> Result<DepthMap> {
    config.validate()?;
    let mut values = Vec::with_capacity(pred.values.len());
    for &v in &pred.values {
        values.push(denormalize_value(v, config)?);
    }
    DepthMap::new(pred.height, pred.width, values, pred.mask.clone())
}

/// Converts metric depth to normalized log depth via the inverse mapping
/// `d_hat = 1 + ln(d / d_max) / alpha`, clipped to [0, 1]. Non-finite or
/// non-positive entries become invalid in the returned mask. Also reports how
/// many valid pixels were clipped at the far end.
pub fn normalize_ground_truth(
    depth_m: &DepthMap,
    config: &DepthPostprocessConfig,
) -> Result<(DepthMap, usize)> {
    config.validate()?;
    let mut values = vec![0.0; depth_m.values.len()];
    let mut mask = vec![false; depth_m.values.len()];
    let mut clipped = 0usize;
    for (i, &d) in depth_m.values.iter().enumerate() {
        if !depth_m.mask[i] || !d.is_finite() || d <= 0.0 {
            continue;
        }
        let raw = 1.0 + (d / config.d_max).ln() / config.alpha;
        if raw > 1.0 {
            clipped += 1;
        }
        values[i] = raw.clamp(0.0, 1.0);
        mask[i] = true;
    }
    Ok((DepthMap::new(depth_m.height, depth_m.width, values, mask)?, clipped))
}

/// Average absolute error restricted to ground truth at or below a cut-off
/// distance; absent when no valid pixel qualifies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffError {
    pub cutoff_m: f64,
    pub avg_abs_err: Option<f64>,
}

/// The full evaluation record of one prediction/ground-truth comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub si_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub cutoff_errors: Vec<CutoffError>,
    pub valid_pixel_count: usize,
}

impl MetricReport {
    /// Flat JSON object with the canonical field names; cut-off entries
    /// appear as `avg_err_10m`-style keys.
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = json!({
            "abs_rel": self.abs_rel,
            "sq_rel": self.sq_rel,
            "rmse": self.rmse,
            "rmse_log": self.rmse_log,
            "si_log": self.si_log,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
            "valid_pixel_count": self.valid_pixel_count,
        });
        let map = obj.as_object_mut().expect("object literal");
        for c in &self.cutoff_errors {
            let key = format!("avg_err_{}m", format_cutoff(c.cutoff_m));
            map.insert(
                key,
                c.avg_abs_err.map(|v| json!(v)).unwrap_or(serde_json::Value::Null),
            );
        }
        obj
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "abs_rel".to_string(),
            "sq_rel".into(),
            "rmse".into(),
            "rmse_log".into(),
            "si_log".into(),
            "delta1".into(),
            "delta2".into(),
            "delta3".into(),
        ];
        for c in &self.cutoff_errors {
            cols.push(format!("avg_err_{}m", format_cutoff(c.cutoff_m)));
        }
        cols.push("valid_pixel_count".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.abs_rel.to_string(),
            self.sq_rel.to_string(),
            self.rmse.to_string(),
            self.rmse_log.to_string(),
            self.si_log.to_string(),
            self.delta1.to_string(),
            self.delta2.to_string(),
            self.delta3.to_string(),
        ];
        for c in &self.cutoff_errors {
            cols.push(
                c.avg_abs_err
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
        }
        cols.push(self.valid_pixel_count.to_string());
        cols.join(",")
    }
}

fn format_cutoff(c: f64) -> String {
    if c.fract() == 0.0 {
        format!("{}", c as i64)
    } else {
        format!("{c}")
    }
}

/// Running sums that accumulate metric contributions pixel by pixel, so that
/// multi-frame aggregation equals pooling all valid pixels into one map.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    cutoffs: Vec<f64>,
    n: usize,
    sum_abs_rel: f64,
    sum_sq_rel: f64,
    sum_sq: f64,
    sum_log_sq: f64,
    sum_d: f64,
    sum_d_sq: f64,
    delta_hits: [usize; 3],
    cutoff_sums: Vec<f64>,
    cutoff_counts: Vec<usize>,
}

impl MetricAccumulator {
    pub fn new(cutoffs: &[f64]) -> Self {
        MetricAccumulator {
            cutoffs: cutoffs.to_vec(),
            n: 0,
            sum_abs_rel: 0.0,
            sum_sq_rel: 0.0,
            sum_sq: 0.0,
            sum_log_sq: 0.0,
            sum_d: 0.0,
            sum_d_sq: 0.0,
            delta_hits: [0; 3],
            cutoff_sums: vec![0.0; cutoffs.len()],
            cutoff_counts: vec![0; cutoffs.len()],
        }
    }

    /// Adds one (prediction, ground truth) pixel pair in meters. Both must be
    /// strictly positive.
    pub fn push(&mut self, pred: f64, gt: f64) -> Result<()> {
        if !(pred > 0.0 && gt > 0.0) {
            return Err(Error::Domain(format!(
                "metric depths must be positive (pred={pred}, gt={gt})"
            )));
        }
        let diff = pred - gt;
        let abs_diff = diff.abs();
        self.n += 1;
        self.sum_abs_rel += abs_diff / gt;
        self.sum_sq_rel += diff * diff / gt;
        self.sum_sq += diff * diff;
        let d = pred.ln() - gt.ln();
        self.sum_log_sq += d * d;
        self.sum_d += d;
        self.sum_d_sq += d * d;
        let ratio = (pred / gt).max(gt / pred);
        let mut bound = 1.25;
        for k in 0..3 {
            if ratio < bound {
                self.delta_hits[k] += 1;
            }
            bound *= 1.25;
        }
        for (i, &c) in self.cutoffs.iter().enumerate() {
            if gt <= c {
                self.cutoff_sums[i] += abs_diff;
                self.cutoff_counts[i] += 1;
            }
        }
        Ok(())
    }

    /// Adds every valid pixel of a prediction/ground-truth map pair.
    pub fn push_maps(&mut self, pred_m: &DepthMap, gt_m: &DepthMap, mask: &[bool]) -> Result<()> {
        if pred_m.height != gt_m.height || pred_m.width != gt_m.width {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred_m.height, pred_m.width, gt_m.height, gt_m.width
            )));
        }
        if mask.len() != gt_m.values.len() {
            return Err(Error::Shape("mask length mismatch".into()));
        }
        for (i, &m) in mask.iter().enumerate() {
            if m && gt_m.mask[i] && pred_m.mask[i] {
                self.push(pred_m.values[i], gt_m.values[i])?;
            }
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.n
    }

    pub fn finalize(&self) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::EmptyMask(
                "no valid pixels to evaluate metrics on".into(),
            ));
        }
        let n = self.n as f64;
        let mean_d = self.sum_d / n;
        Ok(MetricReport {
            abs_rel: self.sum_abs_rel / n,
            sq_rel: self.sum_sq_rel / n,
            rmse: (self.sum_sq / n).sqrt(),
            rmse_log: (self.sum_log_sq / n).sqrt(),
            si_log: self.sum_d_sq / n - mean_d * mean_d,
            delta1: self.delta_hits[0] as f64 / n,
            delta2: self.delta_hits[1] as f64 / n,
            delta3: self.delta_hits[2] as f64 / n,
            cutoff_errors: self
                .cutoffs
                .iter()
                .zip(self.cutoff_sums.iter().zip(&self.cutoff_counts))
                .map(|(&c, (&s, &k))| CutoffError {
                    cutoff_m: c,
                    avg_abs_err: (k > 0).then(|| s / k as f64),
                })
                .collect(),
            valid_pixel_count: self.n,
        })
    }
}

/// Evaluates the metric suite over the valid pixels of a prediction against
/// ground truth, both in meters. `mask` marks evaluable ground truth;
/// cut-offs filter by ground-truth depth.
pub fn compute_metrics(
    pred_m: &DepthMap,
    gt_m: &DepthMap,
    mask: &[bool],
    cutoffs: &[f64],
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(cutoffs);
    acc.push_maps(pred_m, gt_m, mask)?;
    acc.finalize()
}

/// The standard cut-off distances in meters.
pub const DEFAULT_CUTOFFS: [f64; 3] = [10.0, 20.0, 30.0];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DepthPostprocessConfig {
        DepthPostprocessConfig::default()
    }

    #[test]
    fn denormalize_endpoints() {
        assert_relative_eq!(denormalize_value(1.0, &cfg()).unwrap(), 80.0, epsilon = 1e-9);
        let near = denormalize_value(0.0, &cfg()).unwrap();
        assert_relative_eq!(near, 80.0 * (-3.7f64).exp(), epsilon = 1e-12);
        assert!((near - 1.978).abs() < 1e-3);
        assert_relative_eq!(
            denormalize_value(0.5, &cfg()).unwrap(),
            80.0 * (-1.85f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn denormalize_rejects_out_of_range() {
        assert!(denormalize_value(-0.01, &cfg()).is_err());
        assert!(denormalize_value(1.01, &cfg()).is_err());
    }

    #[test]
    fn denormalize_is_monotone() {
        let mut prev = 0.0;
        let mut d_hat = 0.0;
        while d_hat <= 1.0 {
            let m = denormalize_value(d_hat, &cfg()).unwrap();
            if d_hat > 0.0 {
                assert!(m > prev);
            }
            prev = m;
            d_hat += 0.01;
        }
    }

    #[test]
    fn normalize_roundtrip_identity_over_working_range() {
        let c = cfg();
        let mut d = 2.0;
        while d <= 80.0 {
            let gt = DepthMap::dense(1, 1, vec![d]).unwrap();
            let (norm, clipped) = normalize_ground_truth(&gt, &c).unwrap();
            assert_eq!(clipped, 0);
            let back = denormalize_value(norm.values[0], &c).unwrap();
            assert_relative_eq!(back, d, epsilon = 1e-9);
            d += 0.37;
        }
    }

    #[test]
    fn normalize_clips_far_depth_and_masks_non_finite() {
        let c = cfg();
        let gt = DepthMap::dense(1, 3, vec![160.0, f64::NAN, -3.0]).unwrap();
        let (norm, clipped) = normalize_ground_truth(&gt, &c).unwrap();
        assert_eq!(clipped, 1);
        assert_eq!(norm.values[0], 1.0);
        assert!(norm.mask[0]);
        assert!(!norm.mask[1]);
        assert!(!norm.mask[2]);
    }

    #[test]
    fn perfect_prediction_scores_zero_errors() {
        let gt = DepthMap::dense(4, 4, (1..=16).map(|v| v as f64).collect()).unwrap();
        let mask = vec![true; 16];
        let r = compute_metrics(&gt, &gt, &mask, &DEFAULT_CUTOFFS).unwrap();
        assert_eq!(r.abs_rel, 0.0);
        assert_eq!(r.sq_rel, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.rmse_log, 0.0);
        assert_eq!(r.si_log, 0.0);
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!(r.valid_pixel_count, 16);
    }

    #[test]
    fn uniform_ratio_prediction_hits_delta_fixture() {
        let gt = DepthMap::dense(3, 3, vec![10.0; 9]).unwrap();
        let pred = DepthMap::dense(3, 3, vec![13.0; 9]).unwrap();
        let mask = vec![true; 9];
        let r = compute_metrics(&pred, &gt, &mask, &DEFAULT_CUTOFFS).unwrap();
        // 1.3 < 1.5625 = 1.25^2
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 1.0);
        assert_eq!(r.delta3, 1.0);
        assert_relative_eq!(r.abs_rel, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn single_pixel_fixture() {
        let gt = DepthMap::dense(1, 1, vec![10.0]).unwrap();
        let pred = DepthMap::dense(1, 1, vec![12.0]).unwrap();
        let r = compute_metrics(&pred, &gt, &[true], &DEFAULT_CUTOFFS).unwrap();
        assert_relative_eq!(r.abs_rel, 0.2, epsilon = 1e-12);
        assert_relative_eq!(r.sq_rel, 0.4, epsilon = 1e-12);
        assert_relative_eq!(r.rmse, 2.0, epsilon = 1e-12);
        assert_eq!(r.cutoff_errors[0].avg_abs_err, Some(2.0));
    }

    #[test]
    fn empty_mask_is_an_error_and_empty_cutoff_absent() {
        let gt = DepthMap::dense(2, 2, vec![50.0; 4]).unwrap();
        let pred = DepthMap::dense(2, 2, vec![49.0; 4]).unwrap();
        assert!(matches!(
            compute_metrics(&pred, &gt, &[false; 4], &DEFAULT_CUTOFFS),
            Err(crate::Error::EmptyMask(_))
        ));
        // all ground truth above every cutoff: cut-off entries absent, not zero
        let r = compute_metrics(&pred, &gt, &[true; 4], &DEFAULT_CUTOFFS).unwrap();
        for c in &r.cutoff_errors {
            assert_eq!(c.avg_abs_err, None);
        }
    }

    #[test]
    fn si_log_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt_vals: Vec<f64> = (0..64).map(|_| rng.gen_range(2.0..60.0)).collect();
        let pred_vals: Vec<f64> = gt_vals.iter().map(|v| v * rng.gen_range(0.8..1.2)).collect();
        let gt = DepthMap::dense(8, 8, gt_vals).unwrap();
        let pred = DepthMap::dense(8, 8, pred_vals.clone()).unwrap();
        let mask = vec![true; 64];
        let base = compute_metrics(&pred, &gt, &mask, &DEFAULT_CUTOFFS).unwrap();
        for scale in [0.5, 2.0, 7.3] {
            let scaled =
                DepthMap::dense(8, 8, pred_vals.iter().map(|v| v * scale).collect()).unwrap();
            let r = compute_metrics(&scaled, &gt, &mask, &DEFAULT_CUTOFFS).unwrap();
            assert_relative_eq!(r.si_log, base.si_log, epsilon = 1e-9);
        }
    }

    #[test]
    fn delta_monotonicity_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let gt_vals: Vec<f64> = (0..64).map(|_| rng.gen_range(2.0..80.0)).collect();
            let pred_vals: Vec<f64> = (0..64).map(|_| rng.gen_range(2.0..80.0)).collect();
            let gt = DepthMap::dense(8, 8, gt_vals).unwrap();
            let pred = DepthMap::dense(8, 8, pred_vals).unwrap();
            let r = compute_metrics(&pred, &gt, &[true; 64], &DEFAULT_CUTOFFS).unwrap();
            assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);
            assert!(r.abs_rel >= 0.0 && r.sq_rel >= 0.0 && r.rmse >= 0.0);
            assert!(r.si_log >= -1e-15);
        }
    }

    /// Straight per-pixel loop computing each metric definition directly.
    fn naive_metrics(pred: &[f64], gt: &[f64], mask: &[bool], cutoffs: &[f64]) -> MetricReport {
        let pairs: Vec<(f64, f64)> = pred
            .iter()
            .zip(gt)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&p, &g), _)| (p, g))
            .collect();
        let n = pairs.len() as f64;
        let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
        let d_mean = mean(&|p, g| p.ln() - g.ln());
        MetricReport {
            abs_rel: mean(&|p, g| (p - g).abs() / g),
            sq_rel: mean(&|p, g| (p - g) * (p - g) / g),
            rmse: mean(&|p, g| (p - g) * (p - g)).sqrt(),
            rmse_log: mean(&|p, g| (p.ln() - g.ln()) * (p.ln() - g.ln())).sqrt(),
            si_log: mean(&|p, g| (p.ln() - g.ln()) * (p.ln() - g.ln())) - d_mean * d_mean,
            delta1: mean(&|p, g| if (p / g).max(g / p) < 1.25 { 1.0 } else { 0.0 }),
            delta2: mean(&|p, g| if (p / g).max(g / p) < 1.25f64.powi(2) { 1.0 } else { 0.0 }),
            delta3: mean(&|p, g| if (p / g).max(g / p) < 1.25f64.powi(3) { 1.0 } else { 0.0 }),
            cutoff_errors: cutoffs
                .iter()
                .map(|&c| {
                    let hits: Vec<f64> = pairs
                        .iter()
                        .filter(|&&(_, g)| g <= c)
                        .map(|&(p, g)| (p - g).abs())
                        .collect();
                    CutoffError {
                        cutoff_m: c,
                        avg_abs_err: (!hits.is_empty())
                            .then(|| hits.iter().sum::<f64>() / hits.len() as f64),
                    }
                })
                .collect(),
            valid_pixel_count: pairs.len(),
        }
    }

    #[test]
    fn metrics_match_naive_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let n = 16 * 16;
            let gt_vals: Vec<f64> = (0..n).map(|_| rng.gen_range(2.0..80.0)).collect();
            let pred_vals: Vec<f64> = (0..n).map(|_| rng.gen_range(2.0..80.0)).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() > 0.2).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let gt = DepthMap::dense(16, 16, gt_vals.clone()).unwrap();
            let pred = DepthMap::dense(16, 16, pred_vals.clone()).unwrap();
            let got = compute_metrics(&pred, &gt, &mask, &DEFAULT_CUTOFFS).unwrap();
            let expect = naive_metrics(&pred_vals, &gt_vals, &mask, &DEFAULT_CUTOFFS);
            assert_relative_eq!(got.abs_rel, expect.abs_rel, epsilon = 1e-12);
            assert_relative_eq!(got.sq_rel, expect.sq_rel, epsilon = 1e-12);
            assert_relative_eq!(got.rmse, expect.rmse, epsilon = 1e-12);
            assert_relative_eq!(got.rmse_log, expect.rmse_log, epsilon = 1e-12);
            assert_relative_eq!(got.si_log, expect.si_log, epsilon = 1e-12);
            assert_eq!(got.delta1, expect.delta1);
            assert_eq!(got.delta2, expect.delta2);
            assert_eq!(got.delta3, expect.delta3);
            for (a, b) in got.cutoff_errors.iter().zip(&expect.cutoff_errors) {
                match (a.avg_abs_err, b.avg_abs_err) {
                    (Some(x), Some(y)) => assert_relative_eq!(x, y, epsilon = 1e-12),
                    (x, y) => assert_eq!(x, y),
                }
            }
        }
    }

    #[test]
    fn json_and_csv_have_canonical_field_names() {
        let gt = DepthMap::dense(1, 1, vec![5.0]).unwrap();
        let r = compute_metrics(&gt, &gt, &[true], &DEFAULT_CUTOFFS).unwrap();
        let j = r.to_json();
        for key in [
            "abs_rel",
            "sq_rel",
            "rmse",
            "rmse_log",
            "si_log",
            "delta1",
            "delta2",
            "delta3",
            "avg_err_10m",
            "avg_err_20m",
            "avg_err_30m",
            "valid_pixel_count",
        ] {
            assert!(j.get(key).is_some(), "missing key {key}");
        }
        assert!(r.csv_header().contains("avg_err_20m"));
        assert_eq!(
            r.csv_header().split(',').count(),
            r.csv_row().split(',').count()
        );
    }
}
