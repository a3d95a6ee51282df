//! Time-of-arrival front end: first-peak selection on correlation profiles and
//! conversion of delays to metric ranges.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default peak threshold, as a fraction of full scale.
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.4;

/// Correlation magnitude per delay bin on a full-scale reference where a
/// unit-amplitude line-of-sight tap peaks at 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationProfile {
    sample_period: f64,
    first_bin_delay: f64,
    magnitudes: Vec<f64>,
}

impl CorrelationProfile {
    pub fn new(sample_period: f64, first_bin_delay: f64, magnitudes: Vec<f64>) -> Result<Self> {
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sample period {sample_period} must be > 0"
            )));
        }
        if !first_bin_delay.is_finite() {
            return Err(Error::InvalidArgument("first bin delay must be finite".into()));
        }
        if magnitudes.is_empty() {
            return Err(Error::InvalidArgument("correlation profile is empty".into()));
        }
        if magnitudes.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidArgument(
                "correlation magnitudes must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            sample_period,
            first_bin_delay,
            magnitudes,
        })
    }

    /// Copy rescaled so that the largest bin is exactly 1.
    pub fn normalized(&self) -> Self {
        let max = self.peak();
        let mut out = self.clone();
        if max > 0.0 {
            out.magnitudes.iter_mut().for_each(|m| *m /= max);
        }
        out
    }

    pub fn peak(&self) -> f64 {
        self.magnitudes.iter().copied().fold(0.0, f64::max)
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn first_bin_delay(&self) -> f64 {
        self.first_bin_delay
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn delay_of_bin(&self, bin: usize) -> f64 {
        self.first_bin_delay + bin as f64 * self.sample_period
    }

    /// Reads the columnar profile format: a `sample_period_s,first_bin_delay_s`
    /// header followed by one magnitude per line.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (mut line_no, mut header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty profile file"))?;
        // Optional column-name line.
        if header.starts_with(|c: char| c.is_ascii_alphabetic() || c == '#') {
            (line_no, header) = lines
                .next()
                .ok_or_else(|| Error::parse(path, line_no + 1, "missing profile header values"))?;
        }
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::parse(
                path,
                line_no,
                "expected `sample_period_s,first_bin_delay_s`",
            ));
        }
        let parse_f = |s: &str, line: usize| {
            s.parse::<f64>()
                .map_err(|e| Error::parse(path, line, format!("invalid number `{s}`: {e}")))
        };
        let period = parse_f(fields[0], line_no)?;
        let first = parse_f(fields[1], line_no)?;
        let mags = lines.map(|(n, l)| parse_f(l, n)).collect::<Result<Vec<_>>>()?;
        Self::new(period, first, mags).map_err(|e| Error::parse(path, line_no, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("sample_period_s,first_bin_delay_s\n");
        let _ = writeln!(out, "{:e},{:e}", self.sample_period, self.first_bin_delay);
        for m in &self.magnitudes {
            let _ = writeln!(out, "{m:e}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Index of the first local maximum whose magnitude reaches `threshold` of full
/// scale. On a normalized profile this is a fraction of the maximum.
///
/// A local maximum is strictly greater than its neighbors; a plateau counts as
/// one peak located at its first bin, and boundary bins only have one neighbor.
pub fn pick_toa_bin(profile: &CorrelationProfile, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let m = profile.magnitudes();
    let mut i = 0;
    while i < m.len() {
        let mut j = i;
        while j + 1 < m.len() && m[j + 1] == m[i] {
            j += 1;
        }
        let left_ok = i == 0 || m[i - 1] < m[i];
        let right_ok = j + 1 == m.len() || m[j + 1] < m[i];
        if left_ok && right_ok && m[i] >= threshold {
            return Ok(i);
        }
        i = j + 1;
    }
    Err(Error::NoPeak { threshold })
}

/// Delay, in seconds, of the first peak reaching the threshold.
pub fn pick_toa(profile: &CorrelationProfile, threshold: f64) -> Result<f64> {
    pick_toa_bin(profile, threshold).map(|bin| profile.delay_of_bin(bin))
}

pub fn delay_to_distance(delay: f64) -> Result<f64> {
    if !(delay.is_finite() && delay >= 0.0) {
        return Err(Error::InvalidArgument(format!("delay {delay} s must be non-negative")));
    }
    Ok(delay * SPEED_OF_LIGHT)
}

/// `d − ‖p − L‖`.
pub fn range_residual(position: &Vector3<f64>, station: &Vector3<f64>, distance: f64) -> f64 {
    distance - (position - station).norm()
}

/// Gradient of [`range_residual`] w.r.t. the position, `None` where the
/// position coincides with the station.
pub fn range_gradient(position: &Vector3<f64>, station: &Vector3<f64>) -> Option<Vector3<f64>> {
    let diff = position - station;
    let norm = diff.norm();
    (norm > 1e-12).then(|| -diff / norm)
}

/// One metric range to a base station.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub timestamp_ns: i64,
    pub station_id: u32,
    /// Meters.
    pub distance: f64,
    /// Square meters.
    pub variance: f64,
}

impl RangeMeasurement {
    pub fn new(timestamp_ns: i64, station_id: u32, distance: f64, sigma: f64) -> Result<Self> {
        if !(distance.is_finite() && distance > 0.0) {
            return Err(Error::InvalidArgument(format!("range {distance} m must be > 0")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("range sigma {sigma} m must be > 0")));
        }
        Ok(Self {
            timestamp_ns,
            station_id,
            distance,
            variance: sigma * sigma,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }
}

pub const RANGES_HEADER: &str = "timestamp_ns,station_id,distance_m,sigma_m";

pub fn write_ranges(path: &Path, ranges: &[RangeMeasurement]) -> Result<()> {
    let mut out = String::with_capacity(ranges.len() * 40);
    out.push_str(RANGES_HEADER);
    out.push('\n');
    for r in ranges {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?}",
            r.timestamp_ns,
            r.station_id,
            r.distance,
            r.sigma()
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_ranges(path: &Path) -> Result<Vec<RangeMeasurement>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with(|c: char| c.is_ascii_alphabetic() || c == '#')) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 4 columns, got {}", f.len()),
            ));
        }
        let bad = |e: &dyn std::fmt::Display| Error::parse(path, i + 1, e.to_string());
        let ts = f[0].parse::<i64>().map_err(|e| bad(&e))?;
        let id = f[1].parse::<u32>().map_err(|e| bad(&e))?;
        let d = f[2].parse::<f64>().map_err(|e| bad(&e))?;
        let s = f[3].parse::<f64>().map_err(|e| bad(&e))?;
        out.push(RangeMeasurement::new(ts, id, d, s).map_err(|e| bad(&e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(m: &[f64]) -> CorrelationProfile {
        CorrelationProfile::new(1e-9, 0.0, m.to_vec()).unwrap()
    }

    #[test]
    fn first_peak_above_threshold_not_global_max() {
        let p = profile(&[0.1, 0.9, 0.5, 1.0, 0.2]);
        assert_eq!(pick_toa(&p, 0.4).unwrap(), 1e-9);
    }

    #[test]
    fn boundary_peak() {
        let p = profile(&[0.2, 0.3, 1.0]);
        assert_eq!(pick_toa(&p, 0.5).unwrap(), 2e-9);
        let p = profile(&[1.0, 0.3, 0.2]);
        assert_eq!(pick_toa_bin(&p, 0.5).unwrap(), 0);
    }

    #[test]
    fn nothing_above_threshold() {
        let p = profile(&[0.3, 0.1, 0.25, 0.3, 0.05]);
        assert!(matches!(pick_toa(&p, 0.4), Err(Error::NoPeak { .. })));
        // After normalization the same shape has a peak at bin 0.
        assert_eq!(pick_toa_bin(&p.normalized(), 0.4).unwrap(), 0);
    }

    #[test]
    fn plateau_resolves_to_first_bin() {
        let p = profile(&[0.1, 0.8, 0.8, 0.8, 0.2, 1.0]);
        assert_eq!(pick_toa_bin(&p, 0.4).unwrap(), 1);
        // A shoulder (rising plateau) is not a peak.
        let p = profile(&[0.1, 0.6, 0.6, 1.0, 0.2]);
        assert_eq!(pick_toa_bin(&p, 0.4).unwrap(), 3);
    }

    #[test]
    fn threshold_must_be_a_fraction() {
        let p = profile(&[0.1, 1.0]);
        assert!(matches!(pick_toa(&p, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(pick_toa(&p, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn profile_validation() {
        assert!(CorrelationProfile::new(1e-9, 0.0, vec![]).is_err());
        assert!(CorrelationProfile::new(1e-9, 0.0, vec![-0.1, 1.0]).is_err());
        assert!(CorrelationProfile::new(0.0, 0.0, vec![1.0]).is_err());
        let p = CorrelationProfile::new(1e-9, 0.0, vec![0.5, 2.0]).unwrap();
        assert_eq!(p.normalized().magnitudes(), &[0.25, 1.0]);
        let zero = CorrelationProfile::new(1e-9, 0.0, vec![0.0, 0.0]).unwrap();
        assert!(matches!(pick_toa(&zero, 0.4), Err(Error::NoPeak { .. })));
    }

    #[test]
    fn delay_conversion() {
        assert_eq!(delay_to_distance(0.0).unwrap(), 0.0);
        assert!((delay_to_distance(1e-8).unwrap() - 2.997_924_58).abs() < 1e-12);
        assert!(matches!(delay_to_distance(-1e-9), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn range_residual_examples() {
        let l = Vector3::new(3.0, 4.0, 0.0);
        assert_eq!(range_residual(&Vector3::zeros(), &l, 5.0), 0.0);
        assert_eq!(range_residual(&Vector3::zeros(), &l, 6.0), 1.0);
        assert_eq!(range_residual(&l, &l, 0.0), 0.0);
        assert!(range_gradient(&l, &l).is_none());
    }

    #[test]
    fn profile_text_round_trip() {
        let p = CorrelationProfile::new(5e-10, 1e-9, vec![0.1, 0.7, 1.0, 0.3]).unwrap();
        let back = CorrelationProfile::parse(&p.to_text(), Path::new("mem")).unwrap();
        assert_eq!(p, back);
        let err = CorrelationProfile::parse("1e-9,0\n0.1\nabc\n", Path::new("f.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn ranges_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranges.csv");
        let ranges = vec![
            RangeMeasurement::new(0, 1, 12.247_448_713_915_89, 0.173).unwrap(),
            RangeMeasurement::new(200_000_000, 5, 7.1, 0.75).unwrap(),
        ];
        write_ranges(&path, &ranges).unwrap();
        let back = read_ranges(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].distance, ranges[0].distance);
        assert_eq!(back[1].sigma(), 0.75);
    }

    proptest! {
        #[test]
        fn pick_is_scale_invariant(
            mags in proptest::collection::vec(0.0..1.0f64, 1..40),
            scale in 1e-3..1e3f64,
            thr in 0.05..0.95f64,
        ) {
            prop_assume!(mags.iter().any(|m| *m > 0.0));
            let a = CorrelationProfile::new(1e-9, 0.0, mags.clone()).unwrap().normalized();
            let b = CorrelationProfile::new(1e-9, 0.0, mags.iter().map(|m| m * scale).collect())
                .unwrap()
                .normalized();
            prop_assert_eq!(pick_toa_bin(&a, thr).ok(), pick_toa_bin(&b, thr).ok());
        }

        #[test]
        fn residual_translation_invariant(
            p in proptest::array::uniform3(-50.0..50.0f64),
            l in proptest::array::uniform3(-50.0..50.0f64),
            t in proptest::array::uniform3(-50.0..50.0f64),
            d in 0.0..100.0f64,
        ) {
            let (p, l, t) = (Vector3::from(p), Vector3::from(l), Vector3::from(t));
            let a = range_residual(&p, &l, d);
            let b = range_residual(&(p + t), &(l + t), d);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn delay_conversion_is_linear(a in 0.0..1e-6f64, b in 0.0..1e-6f64) {
            let sum = delay_to_distance(a + b).unwrap();
            let parts = delay_to_distance(a).unwrap() + delay_to_distance(b).unwrap();
            prop_assert!((sum - parts).abs() <= 1e-12 * sum.max(1.0));
        }
    }
}
