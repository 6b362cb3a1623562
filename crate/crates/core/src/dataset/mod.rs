//! Expert roll-out recording, training labels, and batch serving.

mod loader;
mod recorder;
mod store;

pub use loader::{BatchIter, LoadedDataset, LoadedEpisode, SampleIndex, SampleNeeds};
pub use recorder::{record_dataset, RecorderConfig};
pub use store::{DatasetManifest, EpisodeMeta};

use crate::error::{CoreError, Result};
use crate::geometry::{Polyline, Vec2};
use crate::simworld::RoutingCommand;

/// Distance-to-front class boundaries in meters: [0,10), [10,20), [20,30),
/// [30,40), [40,100]; anything at or beyond 100 m (including the clear-lane
/// sentinel) clamps into the last class.
pub const DISTANCE_BINS: [f64; 4] = [10.0, 20.0, 30.0, 40.0];
pub const NUM_DISTANCE_CLASSES: usize = 5;

/// Waypoint label arc offsets along the future expert path.
pub const WAYPOINT_NEAR_M: f64 = 5.0;
pub const WAYPOINT_FAR_M: f64 = 10.0;

/// Time horizon bounding the future path used for waypoint labels. When
/// the expert covers the full far offset within the horizon the labels are
/// the plain arc-length points; when it is slowing or stopped the labels
/// compress toward the origin, so "hold still" is representable (a stopped
/// vehicle otherwise labels as "keep moving" and braking becomes
/// unlearnable).
pub const WAYPOINT_HORIZON_S: f64 = 2.5;

/// Bin a front-vehicle distance. Left-closed bins; infinity and d >= 100
/// clamp to class 4. Negative distances are rejected.
pub fn distance_to_class(d: f64) -> Result<u32> {
    if d.is_nan() || d < 0.0 {
        return Err(CoreError::validation(format!("distance must be >= 0 or inf, got {d}")));
    }
    for (i, &edge) in DISTANCE_BINS.iter().enumerate() {
        if d < edge {
            return Ok(i as u32);
        }
    }
    Ok((NUM_DISTANCE_CLASSES - 1) as u32)
}

/// Near/far waypoint pair in the ego frame (+y forward, +x right), meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaypointPair {
    pub near: Vec2,
    pub far: Vec2,
}

impl WaypointPair {
    pub fn is_finite(&self) -> bool {
        self.near.is_finite() && self.far.is_finite()
    }
}

/// One recorded simulation step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub timestamp: f64,
    pub ego_pose: (f64, f64, f64),
    pub sensors: crate::simworld::SensorRecord,
    pub expert_control: crate::simworld::ControlSignal,
    pub routing_command: RoutingCommand,
    pub distance_to_front: f64,
    pub light_state: u8,
    /// Future-path waypoint label; absent near the episode end.
    pub waypoints: Option<WaypointPair>,
    pub distance_class: u32,
}

/// Waypoint targets for record `t` of a pose trajectory sampled at `dt`:
/// points on the future driven path at fixed arc lengths, rotated into the
/// ego frame at `t` (+y forward, +x right).
///
/// The sample is skipped (`None`) when the whole remaining trajectory is
/// shorter than the far offset. The path actually resampled is bounded by
/// [`WAYPOINT_HORIZON_S`]; when the bounded path is shorter than the far
/// offset the targets compress proportionally (near at min(5, L/2), far at
/// min(10, L)), collapsing to the origin for a standing vehicle.
pub fn waypoint_targets(poses: &[(f64, f64, f64)], t: usize, dt: f64) -> Option<WaypointPair> {
    if t + 1 >= poses.len() {
        return None;
    }
    let dedup = |pts: &mut Vec<Vec2>, p: Vec2| {
        if pts.is_empty() || p.dist(*pts.last().unwrap()) > 1e-9 {
            pts.push(p);
        }
    };
    // Full remaining path decides sample validity.
    let mut full = Vec::new();
    for &(x, y, _) in &poses[t..] {
        dedup(&mut full, Vec2::new(x, y));
    }
    if full.len() < 2 || Polyline::new(full.clone()).length() < WAYPOINT_FAR_M {
        return None;
    }
    // Horizon-bounded path provides the labels.
    let horizon_steps = (WAYPOINT_HORIZON_S / dt).ceil() as usize;
    let end = (t + horizon_steps + 1).min(poses.len());
    let mut pts = Vec::new();
    for &(x, y, _) in &poses[t..end] {
        dedup(&mut pts, Vec2::new(x, y));
    }
    let pose = crate::geometry::Pose::new(poses[t].0, poses[t].1, poses[t].2);
    if pts.len() < 2 {
        // No motion within the horizon at all.
        return Some(WaypointPair { near: Vec2::ZERO, far: Vec2::ZERO });
    }
    let future = Polyline::new(pts);
    let len = future.length();
    let near_s = WAYPOINT_NEAR_M.min(len / 2.0);
    let far_s = WAYPOINT_FAR_M.min(len);
    Some(WaypointPair {
        near: pose.to_ego(future.point_at(near_s)),
        far: pose.to_ego(future.point_at(far_s)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_bins() {
        assert_eq!(distance_to_class(15.0).unwrap(), 1);
        assert_eq!(distance_to_class(0.0).unwrap(), 0);
        assert_eq!(distance_to_class(f64::INFINITY).unwrap(), 4);
        assert_eq!(distance_to_class(9.999).unwrap(), 0);
        assert_eq!(distance_to_class(10.0).unwrap(), 1);
        assert_eq!(distance_to_class(40.0).unwrap(), 4);
        assert_eq!(distance_to_class(99.0).unwrap(), 4);
        assert_eq!(distance_to_class(250.0).unwrap(), 4);
        assert!(distance_to_class(-1.0).is_err());
        assert!(distance_to_class(f64::NAN).is_err());
    }

    #[test]
    fn straight_line_waypoints() {
        // Heading north (+y), 7 m/s at dt 0.1: the horizon covers the far
        // offset, so labels are the plain arc-length points.
        let poses: Vec<(f64, f64, f64)> =
            (0..30).map(|i| (0.0, i as f64 * 0.7, std::f64::consts::FRAC_PI_2)).collect();
        let wp = waypoint_targets(&poses, 0, 0.1).unwrap();
        assert!(wp.near.x.abs() < 1e-9);
        assert!((wp.near.y - 5.0).abs() < 1e-9);
        assert!(wp.far.x.abs() < 1e-9);
        assert!((wp.far.y - 10.0).abs() < 1e-9);
    }

    #[test]
    fn left_turn_has_negative_x() {
        // Quarter circle to the left, radius 10, starting heading east.
        let r = 10.0;
        let poses: Vec<(f64, f64, f64)> = (0..40)
            .map(|i| {
                let a = i as f64 * 0.05;
                (r * a.sin(), r * (1.0 - a.cos()), a)
            })
            .collect();
        let wp = waypoint_targets(&poses, 0, 0.1).unwrap();
        assert!(wp.far.x < -0.1, "left-turn far waypoint should be left (x<0): {:?}", wp.far);
        assert!(wp.far.y > 0.0);
    }

    #[test]
    fn short_future_skipped() {
        let poses: Vec<(f64, f64, f64)> = (0..5).map(|i| (i as f64, 0.0, 0.0)).collect();
        assert!(waypoint_targets(&poses, 0, 0.1).is_none());
        // Standstill for the whole remaining log.
        let poses = vec![(0.0, 0.0, 0.0); 50];
        assert!(waypoint_targets(&poses, 0, 0.1).is_none());
    }

    #[test]
    fn stopped_now_but_moving_later_labels_collapse() {
        // Standing still for 5 s, then driving off: the sample is valid
        // (plenty of eventual path) but the horizon-bounded labels sit at
        // the origin, encoding "hold".
        let mut poses = vec![(0.0, 0.0, std::f64::consts::FRAC_PI_2); 50];
        for i in 0..60 {
            poses.push((0.0, i as f64 * 0.5, std::f64::consts::FRAC_PI_2));
        }
        let wp = waypoint_targets(&poses, 0, 0.1).unwrap();
        assert!(wp.near.norm() < 1e-9);
        assert!(wp.far.norm() < 1e-9);
    }

    #[test]
    fn slow_driving_compresses_labels() {
        // 2 m/s: the 2.5 s horizon covers 5 m, so far sits at 5 m and near
        // at 2.5 m along the path.
        let poses: Vec<(f64, f64, f64)> =
            (0..100).map(|i| (0.0, i as f64 * 0.2, std::f64::consts::FRAC_PI_2)).collect();
        let wp = waypoint_targets(&poses, 0, 0.1).unwrap();
        assert!((wp.near.y - 2.5).abs() < 1e-9, "near {:?}", wp.near);
        assert!((wp.far.y - 5.0).abs() < 1e-9, "far {:?}", wp.far);
    }
}
