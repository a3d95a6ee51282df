//! Trajectory accuracy metrics.
//!
//! Both trajectories are expressed in the same world frame, so no alignment is
//! applied. ATE is the RMS position error over associated pairs; RPE compares
//! the relative motion between pairs `delta` steps apart.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{associate_nearest, TimestampIndex};
use crate::manifold::Pose3;
use crate::sim::GroundTruthTrajectory;

/// An estimated pose and the ground-truth pose associated with it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePair {
    pub timestamp_ns: i64,
    pub estimate: Pose3,
    pub truth: Pose3,
}

/// Summary of per-update solver times, seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub sum: f64,
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl TimingSummary {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let sum: f64 = samples.iter().sum();
        Self {
            sum,
            mean: sum / n as f64,
            median,
            count: n,
        }
    }
}

/// Field names are part of the `metrics.json` format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Meters.
    pub ate: f64,
    pub rmse_x: f64,
    pub rmse_y: f64,
    pub rmse_z: f64,
    /// Meters.
    pub rpe_translation: f64,
    /// Degrees.
    pub rpe_rotation: f64,
    pub n_poses_evaluated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingSummary>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Ate {
    pub ate: f64,
    pub rmse_x: f64,
    pub rmse_y: f64,
    pub rmse_z: f64,
}

/// Pairs every estimated pose with the nearest ground-truth sample within
/// `max_gap_ns`; estimates without a match are dropped.
pub fn associate(estimate: &[(i64, Pose3)], truth: &GroundTruthTrajectory, max_gap_ns: i64) -> Result<Vec<PosePair>> {
    let index = TimestampIndex::new(truth.timestamps())?;
    if index.is_empty() {
        return Err(Error::EmptyEvaluation("ground truth is empty".into()));
    }
    let mut pairs: Vec<PosePair> = estimate
        .iter()
        .filter_map(|&(t, pose)| {
            associate_nearest(&index, t, max_gap_ns).ok().map(|k| PosePair {
                timestamp_ns: t,
                estimate: pose,
                truth: truth.samples()[k].pose,
            })
        })
        .collect();
    pairs.sort_by_key(|p| p.timestamp_ns);
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation(format!(
            "none of {} estimated poses lies within {max_gap_ns} ns of ground truth",
            estimate.len()
        )));
    }
    Ok(pairs)
}

pub fn compute_ate(pairs: &[PosePair]) -> Result<Ate> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation("no associated poses".into()));
    }
    let mut sq = [0.0; 3];
    for p in pairs {
        let e = p.estimate.translation - p.truth.translation;
        for (s, v) in sq.iter_mut().zip(e.iter()) {
            *s += v * v;
        }
    }
    let n = pairs.len() as f64;
    let [x, y, z] = sq.map(|s| s / n);
    Ok(Ate {
        ate: (x + y + z).sqrt(),
        rmse_x: x.sqrt(),
        rmse_y: y.sqrt(),
        rmse_z: z.sqrt(),
    })
}

/// `(RPE_p [m], RPE_R [deg])` over pairs `delta` apart in the given order.
pub fn compute_rpe(pairs: &[PosePair], delta: usize) -> Result<(f64, f64)> {
    if delta == 0 {
        return Err(Error::InvalidArgument("RPE delta must be at least 1".into()));
    }
    if pairs.len() <= delta {
        return Err(Error::EmptyEvaluation(format!(
            "RPE with delta {delta} needs at least {} poses, got {}",
            delta + 1,
            pairs.len()
        )));
    }
    let (mut sq_t, mut sq_r) = (0.0, 0.0);
    for (a, b) in pairs.iter().zip(&pairs[delta..]) {
        let rel_est = a.estimate.inverse().compose(&b.estimate);
        let rel_gt = a.truth.inverse().compose(&b.truth);
        let e = rel_gt.inverse().compose(&rel_est);
        sq_t += e.translation.norm_squared();
        sq_r += e.rotation.angle().powi(2);
    }
    let n = (pairs.len() - delta) as f64;
    Ok(((sq_t / n).sqrt(), (sq_r / n).sqrt().to_degrees()))
}

/// ATE and RPE of an estimated trajectory against ground truth.
pub fn evaluate(
    estimate: &[(i64, Pose3)],
    truth: &GroundTruthTrajectory,
    max_gap_ns: i64,
    rpe_delta: usize,
) -> Result<MetricsReport> {
    let pairs = associate(estimate, truth, max_gap_ns)?;
    let ate = compute_ate(&pairs)?;
    let (rpe_translation, rpe_rotation) = compute_rpe(&pairs, rpe_delta)?;
    Ok(MetricsReport {
        ate: ate.ate,
        rmse_x: ate.rmse_x,
        rmse_y: ate.rmse_y,
        rmse_z: ate.rmse_z,
        rpe_translation,
        rpe_rotation,
        n_poses_evaluated: pairs.len(),
        timing: None,
    })
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub station_count: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedReport {
    pub json: String,
    pub table: String,
}

const COLUMNS: [&str; 8] = ["scenario", "BS count", "ATE", "E_x", "E_y", "E_z", "RPE_p", "RPE_R"];

/// Aligned text table, one line per row, metrics to four decimals.
pub fn render_table(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            let m = &r.metrics;
            [
                r.scenario.clone(),
                r.station_count.to_string(),
                format!("{:.4}", m.ate),
                format!("{:.4}", m.rmse_x),
                format!("{:.4}", m.rmse_y),
                format!("{:.4}", m.rmse_z),
                format!("{:.4}", m.rpe_translation),
                format!("{:.4}", m.rpe_rotation),
            ]
        })
        .collect();
    let mut width = COLUMNS.map(str::len);
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        for (k, (c, w)) in row.iter().zip(width).enumerate() {
            if k == 0 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "  {c:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, &COLUMNS);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

pub fn render_report(row: &ReportRow) -> RenderedReport {
    RenderedReport {
        json: serde_json::to_string_pretty(row).expect("report serializes"),
        table: render_table(std::slice::from_ref(row)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::Rotation3;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn pair(t: i64, est: Pose3, gt: Pose3) -> PosePair {
        PosePair {
            timestamp_ns: t,
            estimate: est,
            truth: gt,
        }
    }

    fn at(x: f64, y: f64, z: f64) -> Pose3 {
        Pose3::new(Rotation3::identity(), Vector3::new(x, y, z))
    }

    fn wavy(n: usize) -> Vec<Pose3> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                Pose3::new(
                    Rotation3::exp(&Vector3::new(0.1 * t.sin(), 0.05 * t, 0.3 * t)),
                    Vector3::new(t.cos(), t.sin(), 0.1 * t),
                )
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = wavy(50);
        let pairs: Vec<_> = gt.iter().enumerate().map(|(i, p)| pair(i as i64, *p, *p)).collect();
        let a = compute_ate(&pairs).unwrap();
        assert_eq!(a, Ate::default());
        assert_eq!(compute_rpe(&pairs, 1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn constant_offset() {
        let gt = wavy(20);
        let pairs: Vec<_> = gt
            .iter()
            .enumerate()
            .map(|(i, p)| {
                pair(
                    i as i64,
                    Pose3::new(p.rotation, p.translation + Vector3::new(0.1, 0.0, 0.0)),
                    *p,
                )
            })
            .collect();
        let a = compute_ate(&pairs).unwrap();
        assert!((a.ate - 0.1).abs() < 1e-12 && (a.rmse_x - 0.1).abs() < 1e-12);
        assert!(a.rmse_y < 1e-12 && a.rmse_z < 1e-12);
    }

    #[test]
    fn two_pair_ate() {
        let pairs = [
            pair(0, at(0.3, 0.0, 0.0), at(0.0, 0.0, 0.0)),
            pair(1, at(1.0, 0.4, 0.0), at(1.0, 0.0, 0.0)),
        ];
        let expected = ((0.09 + 0.16) / 2.0f64).sqrt();
        assert!((compute_ate(&pairs).unwrap().ate - expected).abs() < 1e-12);
        assert!((expected - 0.35355).abs() < 1e-5);
    }

    #[test]
    fn single_yaw_step() {
        let gt = wavy(100);
        let yaw = Pose3::new(Rotation3::rot_z(0.5f64.to_radians()), Vector3::zeros());
        let pairs: Vec<_> = gt
            .iter()
            .enumerate()
            .map(|(i, p)| pair(i as i64, if i >= 40 { yaw.compose(p) } else { *p }, *p))
            .collect();
        let (_, r) = compute_rpe(&pairs, 1).unwrap();
        assert!((r - 0.5 / 99f64.sqrt()).abs() < 1e-9, "{r}");
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(compute_ate(&[]), Err(Error::EmptyEvaluation(_))));
        let one = [pair(0, at(0.0, 0.0, 0.0), at(0.0, 0.0, 0.0))];
        assert!(matches!(compute_rpe(&one, 1), Err(Error::EmptyEvaluation(_))));
        let gt = GroundTruthTrajectory::new(vec![crate::sim::GroundTruthSample {
            timestamp_ns: 0,
            pose: Pose3::identity(),
            velocity: Vector3::zeros(),
        }])
        .unwrap();
        assert!(matches!(
            associate(&[(1_000_000_000, Pose3::identity())], &gt, 10),
            Err(Error::EmptyEvaluation(_))
        ));
    }

    #[test]
    fn association_drops_unmatched_estimates() {
        let samples = (0..10)
            .map(|i| crate::sim::GroundTruthSample {
                timestamp_ns: i * 10,
                pose: at(i as f64, 0.0, 0.0),
                velocity: Vector3::zeros(),
            })
            .collect();
        let gt = GroundTruthTrajectory::new(samples).unwrap();
        let est = [
            (52, at(5.0, 0.0, 0.0)),
            (21, at(2.0, 0.0, 0.0)),
            (500, at(0.0, 0.0, 0.0)),
        ];
        let pairs = associate(&est, &gt, 3).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].timestamp_ns, 21);
        assert_eq!(compute_ate(&pairs).unwrap().ate, 0.0);
    }

    #[test]
    fn timing_summary() {
        let t = TimingSummary::from_samples(&[0.4, 0.1, 0.2, 0.3]);
        assert!((t.sum - 1.0).abs() < 1e-15);
        assert!((t.mean - 0.25).abs() < 1e-15);
        assert!((t.median - 0.25).abs() < 1e-15);
        assert_eq!(TimingSummary::from_samples(&[3.0, 1.0, 2.0]).median, 2.0);
    }

    fn best_row() -> ReportRow {
        ReportRow {
            scenario: "mmmagic-78GHz".into(),
            station_count: 5,
            metrics: MetricsReport {
                ate: 0.1312,
                rmse_x: 0.0516,
                rmse_y: 0.0422,
                rmse_z: 0.1131,
                rpe_translation: 0.0052,
                rpe_rotation: 0.4571,
                n_poses_evaluated: 1441,
                timing: None,
            },
        }
    }

    #[test]
    fn table_row_layout() {
        let r = render_report(&best_row());
        let lines: Vec<&str> = r.table.lines().collect();
        assert_eq!(lines.len(), 3);
        let header: Vec<&str> = lines[0].split("  ").map(str::trim).filter(|s| !s.is_empty()).collect();
        assert_eq!(header, COLUMNS);
        let cells: Vec<&str> = lines[2].split_whitespace().collect();
        assert_eq!(
            cells,
            [
                "mmmagic-78GHz",
                "5",
                "0.1312",
                "0.0516",
                "0.0422",
                "0.1131",
                "0.0052",
                "0.4571"
            ]
        );
        assert!(lines.iter().all(|l| l.chars().count() == lines[0].chars().count()));

        let zero = ReportRow {
            scenario: "indoor-28GHz".into(),
            station_count: 2,
            metrics: MetricsReport::default(),
        };
        let table = render_table(&[zero]);
        let cells: Vec<&str> = table.lines().nth(2).unwrap().split_whitespace().collect();
        assert!(cells[2..].iter().all(|c| *c == "0.0000"));
    }

    #[test]
    fn json_round_trip() {
        let mut row = best_row();
        row.metrics.timing = Some(TimingSummary::from_samples(&[0.0036, 0.0041, 0.0012]));
        let back: ReportRow = serde_json::from_str(&render_report(&row).json).unwrap();
        assert_eq!(back, row);
    }

    fn arb_pose() -> impl Strategy<Value = Pose3> {
        (prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(-5.0f64..5.0))
            .prop_map(|(w, t)| Pose3::new(Rotation3::exp(&Vector3::from(w)), Vector3::from(t)))
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<PosePair>> {
        prop::collection::vec((arb_pose(), arb_pose()), 2..30).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (e, g))| pair(i as i64, e, g))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn ate_decomposes_per_axis(pairs in arb_pairs()) {
            let a = compute_ate(&pairs).unwrap();
            let sum = a.rmse_x.powi(2) + a.rmse_y.powi(2) + a.rmse_z.powi(2);
            prop_assert!((a.ate.powi(2) - sum).abs() <= 1e-9 * sum.max(1e-300));
        }

        #[test]
        fn rpe_ignores_a_global_rigid_offset(pairs in arb_pairs(), offset in arb_pose()) {
            let moved: Vec<_> = pairs
                .iter()
                .map(|p| PosePair { estimate: offset.compose(&p.estimate), ..*p })
                .collect();
            let (t0, r0) = compute_rpe(&pairs, 1).unwrap();
            let (t1, r1) = compute_rpe(&moved, 1).unwrap();
            prop_assert!((t0 - t1).abs() < 1e-9 * t0.max(1.0));
            prop_assert!((r0 - r1).abs() < 1e-9 * r0.max(1.0));
        }

        #[test]
        fn ate_is_order_independent(pairs in arb_pairs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = compute_ate(&pairs).unwrap();
            let b = compute_ate(&shuffled).unwrap();
            prop_assert!((a.ate - b.ate).abs() < 1e-12 * a.ate.max(1.0));
        }
    }
}
