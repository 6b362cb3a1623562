//! Scripted expert autopilot: pure-pursuit steering on the route
//! centerline, speed-limit / headway / signal-envelope longitudinal rule.
//! Generates imitation data and calibrates the benchmark ceiling.

use thiserror::Error;

use crate::geometry::Vec2;

use super::map::LightPhase;
use super::route::{RouteSpec, RoutingCommand};
use super::{ControlSignal, World, MAX_STEER_RAD, WHEELBASE};

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("ego left the route (lateral offset {lateral:.2} m)")]
    RouteLost { lateral: f64 },
}

#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub lookahead_base: f64,
    pub lookahead_gain: f64,
    pub lookahead_max: f64,
    pub comfort_decel: f64,
    pub turn_speed: f64,
    pub recovery_dist: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        ExpertParams {
            lookahead_base: 2.5,
            lookahead_gain: 0.35,
            lookahead_max: 8.0,
            comfort_decel: 2.5,
            turn_speed: 4.5,
            recovery_dist: 5.0,
        }
    }
}

/// Arc position and lateral offset of the ego on a route.
pub fn route_progress(world: &World, route: &RouteSpec) -> (f64, f64) {
    route.centerline.project(world.ego.pose.pos)
}

/// One control decision of the scripted expert.
pub fn expert_policy(
    world: &World,
    route: &RouteSpec,
    params: &ExpertParams,
) -> Result<ControlSignal, ExpertError> {
    let (s, lateral) = route_progress(world, route);
    if lateral > params.recovery_dist {
        return Err(ExpertError::RouteLost { lateral });
    }
    let ego = world.ego;
    let v = ego.speed;

    // Pure pursuit toward a speed-scaled lookahead point.
    let lookahead =
        (params.lookahead_base + params.lookahead_gain * v).clamp(params.lookahead_base, params.lookahead_max);
    let target = route.centerline.point_at(s + lookahead);
    let t_ego = ego.pose.to_ego(target);
    let alpha = t_ego.x.atan2(t_ego.y.max(0.01));
    let delta = (2.0 * WHEELBASE * alpha.sin()).atan2(lookahead);
    let steer = (delta / MAX_STEER_RAD).clamp(-1.0, 1.0);

    // Longitudinal target: posted limit, turn slowdown, headway, signal.
    let edge = world.ego_edge();
    let mut v_target = world.graph.edges[edge].speed_limit;
    let ahead_cmd = route.command_at(s + 4.0);
    if matches!(ahead_cmd, RoutingCommand::Left | RoutingCommand::Right) {
        v_target = v_target.min(params.turn_speed);
    }

    // Headway rule against every other vehicle in the forward corridor.
    let fwd = ego.pose.forward();
    let right = ego.pose.right();
    for npc in world.npcs() {
        let d = npc.state().pose.pos - ego.pose.pos;
        let lon = d.dot(fwd);
        let lat = d.dot(right);
        if lon > 0.5 && lon < 30.0 && lat.abs() < 2.2 {
            v_target = v_target.min(((lon - 7.0) / 1.1).max(0.0));
        }
    }

    // Signal envelope toward the governing stop line.
    if let Some(light) = world.graph.light_of_edge(edge) {
        let cl = world.graph.centerline(edge);
        let (s_edge, _) = cl.project(ego.pose.pos);
        let d_stop = cl.length() - s_edge;
        if d_stop >= 1.0 {
            let phase = light.phase_at(world.sim_time);
            let must_stop = match phase {
                LightPhase::Red => true,
                LightPhase::Yellow => v * v <= 2.0 * params.comfort_decel * d_stop,
                LightPhase::Green => false,
            };
            if must_stop {
                let v_allow = (2.0 * params.comfort_decel * (d_stop - 2.0).max(0.0)).sqrt();
                v_target = v_target.min(v_allow);
            }
        }
    }

    let err = v_target - v;
    let (throttle, brake) = if err >= -0.2 {
        ((0.5 * err).clamp(0.0, 1.0), 0.0)
    } else {
        (0.0, (-0.6 * err).clamp(0.0, 1.0))
    };
    // Hold position when stopped at a line.
    let brake = if v < 0.05 && v_target < 0.05 { brake.max(0.25) } else { brake };

    Ok(ControlSignal { steer, throttle, brake })
}

/// Convenience for tests: route-following waypoints at fixed arc offsets,
/// expressed in the ego frame (the "ground-truth policy" the networks
/// imitate).
pub fn route_waypoints(world: &World, route: &RouteSpec, near_m: f64, far_m: f64) -> (Vec2, Vec2) {
    let (s, _) = route_progress(world, route);
    let near = world.ego.pose.to_ego(route.centerline.point_at(s + near_m));
    let far = world.ego.pose.to_ego(route.centerline.point_at(s + far_m));
    (near, far)
}
