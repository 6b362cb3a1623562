//! Deterministic 2-D driving world: kinematic-bicycle ego, lane-following
//! NPC traffic with car-following and signal compliance, patrolling
//! pedestrians, and cycling traffic lights.

mod expert;
mod map;
mod npc;
mod render;
mod route;
mod towns;

pub use expert::{expert_policy, route_progress, route_waypoints, ExpertError, ExpertParams};
pub use map::{
    LightPhase, RoadEdge, RoadGraph, RoadNode, TrafficLight, DEFAULT_INTERSECTION_RADIUS,
    DEFAULT_LANE_WIDTH,
};
pub use npc::{NpcVehicle, Pedestrian};
pub use render::{
    observe, Augment, AuxGroundTruth, Frame, Observation, RenderConfig, SegClass, SensorRecord,
    NUM_SEG_CLASSES,
};
pub use route::{plan_route, random_route, RouteSpec, RoutingCommand};
pub use towns::{build_test_town, build_train_town, grid_town, load_map};

use crate::error::{CoreError, Result};
use crate::geometry::{Obb, Pose};
use crate::rng::{self, DetRng};

// Vehicle geometry and ego dynamics limits. The paper leaves dynamics
// unspecified; these are round numbers.
pub const VEHICLE_HALF_LEN: f64 = 2.1;
pub const VEHICLE_HALF_WID: f64 = 0.9;
pub const WHEELBASE: f64 = 2.6;
pub const MAX_STEER_RAD: f64 = 35.0 * std::f64::consts::PI / 180.0;
pub const MAX_ACCEL: f64 = 3.0;
pub const MAX_DECEL: f64 = 8.0;
pub const MAX_SPEED: f64 = 15.0;
pub const PEDESTRIAN_RADIUS: f64 = 0.3;

/// Driving command triple. Steering is dimensionless in [-1,1], positive
/// steering turns the vehicle to the right (heading decreases).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSignal {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
}

impl ControlSignal {
    pub const COAST: ControlSignal = ControlSignal { steer: 0.0, throttle: 0.0, brake: 0.0 };

    pub fn new(steer: f64, throttle: f64, brake: f64) -> Self {
        ControlSignal { steer, throttle, brake }
    }

    pub fn is_finite(&self) -> bool {
        self.steer.is_finite() && self.throttle.is_finite() && self.brake.is_finite()
    }

    pub fn clamped(&self) -> ControlSignal {
        ControlSignal {
            steer: self.steer.clamp(-1.0, 1.0),
            throttle: self.throttle.clamp(0.0, 1.0),
            brake: self.brake.clamp(0.0, 1.0),
        }
    }
}

/// Pose plus speed of one actor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorState {
    pub pose: Pose,
    pub speed: f64,
}

impl ActorState {
    pub fn obb(&self) -> Obb {
        Obb {
            center: self.pose.pos,
            heading: self.pose.heading,
            half_len: VEHICLE_HALF_LEN,
            half_wid: VEHICLE_HALF_WID,
        }
    }
}

/// Snapshot of everything observable at one instant.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub sim_time: f64,
    pub ego: ActorState,
    pub npc_vehicles: Vec<ActorState>,
    pub pedestrians: Vec<ActorState>,
    pub light_phases: Vec<LightPhase>,
}

/// Full simulation instance: state plus behavior internals. One `World` per
/// episode; instances share nothing, so episodes may run concurrently.
pub struct World {
    pub graph: RoadGraph,
    pub sim_time: f64,
    pub ego: ActorState,
    pub last_control: ControlSignal,
    npcs: Vec<NpcVehicle>,
    pedestrians: Vec<Pedestrian>,
    rng: DetRng,
}

/// Spawn parameters for a world instance.
#[derive(Debug, Clone)]
pub struct WorldParams {
    pub npc_vehicles: usize,
    pub pedestrians: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        // Mirrors the benchmark traffic mix of 20 vehicles + 20 pedestrians.
        WorldParams { npc_vehicles: 20, pedestrians: 20 }
    }
}

impl World {
    /// Create a world with the ego placed at arc position `s` on `edge`.
    pub fn new(graph: RoadGraph, seed: u64, params: &WorldParams, ego_edge: usize, ego_s: f64) -> Self {
        let mut rng = rng::substream(seed, "world");
        let cl = graph.centerline(ego_edge);
        let pos = cl.point_at(ego_s);
        let heading = cl.tangent_at(ego_s).angle();
        let ego = ActorState { pose: Pose { pos, heading }, speed: 0.0 };

        let npcs = npc::spawn_vehicles(&graph, &mut rng, params.npc_vehicles, pos);
        let pedestrians = npc::spawn_pedestrians(&graph, &mut rng, params.pedestrians);

        World {
            graph,
            sim_time: 0.0,
            ego,
            last_control: ControlSignal::COAST,
            npcs,
            pedestrians,
            rng,
        }
    }

    pub fn npcs(&self) -> &[NpcVehicle] {
        &self.npcs
    }

    pub fn pedestrians(&self) -> &[Pedestrian] {
        &self.pedestrians
    }

    pub fn snapshot(&self) -> WorldState {
        WorldState {
            sim_time: self.sim_time,
            ego: self.ego,
            npc_vehicles: self.npcs.iter().map(|n| n.state()).collect(),
            pedestrians: self.pedestrians.iter().map(|p| p.state()).collect(),
            light_phases: self
                .graph
                .lights
                .iter()
                .map(|l| l.phase_at(self.sim_time))
                .collect(),
        }
    }

    /// Advance the world by `dt`. The ego follows the kinematic bicycle
    /// model under `control` (explicit Euler, position before heading and
    /// speed); NPCs follow their lanes; lights advance with sim time.
    pub fn step(&mut self, control: &ControlSignal, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CoreError::validation(format!("dt must be positive, got {dt}")));
        }
        if !control.is_finite() {
            return Err(CoreError::validation("non-finite control"));
        }
        let c = control.clamped();

        // Ego bicycle update.
        let v = self.ego.speed;
        let th = self.ego.pose.heading;
        self.ego.pose.pos.x += v * th.cos() * dt;
        self.ego.pose.pos.y += v * th.sin() * dt;
        let steer_angle = -c.steer * MAX_STEER_RAD;
        self.ego.pose.heading =
            crate::geometry::wrap_angle(th + v / WHEELBASE * steer_angle.tan() * dt);
        let accel = c.throttle * MAX_ACCEL - c.brake * MAX_DECEL;
        self.ego.speed = (v + accel * dt).clamp(0.0, MAX_SPEED);
        self.last_control = c;

        // NPC traffic.
        let ego_state = self.ego;
        npc::step_vehicles(&self.graph, &mut self.npcs, &ego_state, self.sim_time, dt, &mut self.rng);
        for p in self.pedestrians.iter_mut() {
            p.step(dt);
        }

        self.sim_time += dt;
        Ok(())
    }

    /// Yaw rate implied by the last applied control (the proprioceptive
    /// sensor value).
    pub fn ego_yaw_rate(&self) -> f64 {
        let steer_angle = -self.last_control.steer * MAX_STEER_RAD;
        self.ego.speed / WHEELBASE * steer_angle.tan()
    }

    /// Edge the ego currently belongs to (nearest lane with compatible
    /// heading).
    pub fn ego_edge(&self) -> usize {
        self.graph.nearest_edge(self.ego.pose.pos, self.ego.pose.heading).0
    }

    /// Center-to-center gap to the nearest vehicle ahead in the ego's lane;
    /// infinity when the lane ahead is clear.
    pub fn distance_to_front(&self) -> f64 {
        let edge = self.ego_edge();
        let cl = self.graph.centerline(edge);
        let (s_ego, _) = cl.project(self.ego.pose.pos);
        let mut best = f64::INFINITY;
        for n in &self.npcs {
            let (s, d) = cl.project(n.state().pose.pos);
            if d <= self.graph.lane_width / 2.0 && s > s_ego {
                best = best.min(s - s_ego);
            }
        }
        best
    }

    /// Light governing the ego's current segment, if any.
    pub fn governing_light(&self) -> Option<&TrafficLight> {
        self.graph.light_of_edge(self.ego_edge())
    }

    /// Binary light label: 0 when a governing light shows red or yellow,
    /// 1 for green or when no light governs the segment.
    pub fn light_state(&self) -> u8 {
        match self.governing_light() {
            Some(l) => match l.phase_at(self.sim_time) {
                LightPhase::Green => 1,
                _ => 0,
            },
            None => 1,
        }
    }

    /// First colliding NPC vehicle, if the ego currently overlaps one.
    pub fn vehicle_collision(&self) -> Option<usize> {
        let ego_box = self.ego.obb();
        self.npcs.iter().position(|n| ego_box.intersects(&n.state().obb()))
    }

    /// Pedestrian the ego currently touches, if any.
    pub fn pedestrian_collision(&self) -> Option<usize> {
        let ego_box = self.ego.obb();
        self.pedestrians.iter().position(|p| {
            let pos = p.state().pose.pos;
            // Inflate the footprint by the pedestrian radius.
            let inflated = Obb {
                center: ego_box.center,
                heading: ego_box.heading,
                half_len: ego_box.half_len + PEDESTRIAN_RADIUS,
                half_wid: ego_box.half_wid + PEDESTRIAN_RADIUS,
            };
            inflated.contains(pos)
        })
    }

    pub fn ego_on_road(&self) -> bool {
        self.graph.is_on_road(self.ego.pose.pos)
    }

    /// Place the ego at a pose directly (tests and scripted scenarios).
    pub fn set_ego(&mut self, pose: Pose, speed: f64) {
        self.ego = ActorState { pose, speed };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_world() -> World {
        let g = build_train_town();
        World::new(g, 1, &WorldParams { npc_vehicles: 0, pedestrians: 0 }, 0, 10.0)
    }

    #[test]
    fn zero_input_is_a_fixed_point() {
        let mut w = quiet_world();
        let before = w.ego;
        w.step(&ControlSignal::COAST, 0.1).unwrap();
        assert_eq!(w.ego.pose.pos, before.pose.pos);
        assert_eq!(w.ego.speed, 0.0);
    }

    #[test]
    fn straight_line_kinematics() {
        let mut w = quiet_world();
        w.set_ego(Pose::new(0.0, 0.0, 0.0), 5.0);
        w.step(&ControlSignal::new(0.0, 0.0, 0.0), 0.1).unwrap();
        assert!((w.ego.pose.pos.x - 0.5).abs() < 1e-12);
        assert!(w.ego.pose.pos.y.abs() < 1e-12);
    }

    #[test]
    fn steer_sign_convention() {
        // Negative steer turns left: heading increases.
        let mut w = quiet_world();
        w.set_ego(Pose::new(0.0, 0.0, 0.0), 5.0);
        w.step(&ControlSignal::new(-0.5, 0.0, 0.0), 0.1).unwrap();
        assert!(w.ego.pose.heading > 0.0);
        let mut w = quiet_world();
        w.set_ego(Pose::new(0.0, 0.0, 0.0), 5.0);
        w.step(&ControlSignal::new(0.5, 0.0, 0.0), 0.1).unwrap();
        assert!(w.ego.pose.heading < 0.0);
    }

    #[test]
    fn non_finite_control_rejected() {
        let mut w = quiet_world();
        let err = w.step(&ControlSignal::new(f64::NAN, 0.0, 0.0), 0.1).unwrap_err();
        assert!(matches!(err, CoreError::Validation(_)));
    }

    #[test]
    fn npc_count_is_preserved() {
        let g = build_train_town();
        let mut w = World::new(g, 3, &WorldParams { npc_vehicles: 8, pedestrians: 5 }, 0, 10.0);
        for _ in 0..200 {
            w.step(&ControlSignal::COAST, 0.1).unwrap();
        }
        assert_eq!(w.npcs().len(), 8);
        assert_eq!(w.pedestrians().len(), 5);
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let g = build_train_town();
            let mut w = World::new(g, 9, &WorldParams { npc_vehicles: 6, pedestrians: 4 }, 0, 10.0);
            for i in 0..100 {
                let c = ControlSignal::new(((i as f64) * 0.1).sin() * 0.2, 0.4, 0.0);
                w.step(&c, 0.1).unwrap();
            }
            let s = w.snapshot();
            (s.ego.pose.pos, s.npc_vehicles.iter().map(|n| n.pose.pos).collect::<Vec<_>>())
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn distance_to_front_sentinel() {
        let w = quiet_world();
        assert!(w.distance_to_front().is_infinite());
    }
}
