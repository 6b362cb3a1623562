//! Scripted traffic: lane-following NPC vehicles with car-following and
//! signal compliance, plus sidewalk-patrolling pedestrians.

use crate::geometry::{Polyline, Vec2};
use crate::rng::{self, DetRng};
use rand::Rng;

use super::map::{LightPhase, RoadGraph};
use super::route::junction_curve;
use super::{ActorState, Pose};

const FOLLOW_LOOKAHEAD: f64 = 30.0;
const FOLLOW_STANDSTILL_GAP: f64 = 7.0;
const FOLLOW_TIME_GAP: f64 = 1.1;
const COMFORT_DECEL: f64 = 3.0;
const JUNCTION_SPEED: f64 = 4.5;

/// One path segment: a lane portion of an edge, or a junction connector.
#[derive(Debug, Clone)]
struct PathSeg {
    edge: Option<usize>,
    s0: f64,
    s1: f64,
}

/// Lane-bound scripted vehicle.
pub struct NpcVehicle {
    path: Polyline,
    segs: Vec<PathSeg>,
    s: f64,
    speed: f64,
}

impl NpcVehicle {
    fn new(graph: &RoadGraph, edge: usize, s: f64) -> Self {
        let cl = graph.centerline(edge);
        let segs = vec![PathSeg { edge: Some(edge), s0: 0.0, s1: cl.length() }];
        NpcVehicle { path: Polyline::new(cl.points().to_vec()), segs, s, speed: 0.0 }
    }

    pub fn state(&self) -> ActorState {
        let pos = self.path.point_at(self.s);
        let heading = self.path.tangent_at(self.s).angle();
        ActorState { pose: Pose { pos, heading }, speed: self.speed }
    }

    /// Edge under the current arc position, when on a lane.
    pub fn current_edge(&self) -> Option<usize> {
        self.segs.iter().find(|seg| self.s >= seg.s0 && self.s < seg.s1).and_then(|seg| seg.edge)
    }

    fn last_edge(&self) -> usize {
        self.segs.iter().rev().find_map(|s| s.edge).expect("path always ends on a lane")
    }

    fn extend(&mut self, graph: &RoadGraph, rng: &mut DetRng) {
        let cur = self.last_edge();
        let end_node = graph.edges[cur].to;
        let back = graph.edges[cur].from;
        let options: Vec<usize> = graph
            .outgoing_edges(end_node)
            .iter()
            .copied()
            .filter(|&e| graph.edges[e].to != back)
            .collect();
        let next = if options.is_empty() {
            // Dead end for forward movement: U-turn.
            *graph
                .outgoing_edges(end_node)
                .iter()
                .find(|&&e| graph.edges[e].to == back)
                .expect("strongly connected graph")
        } else {
            options[rng.gen_range(0..options.len())]
        };

        let mut pts = self.path.points().to_vec();
        let base = self.path.length();
        let cur_cl = graph.centerline(cur);
        let next_cl = graph.centerline(next);
        let p1 = cur_cl.point_at(cur_cl.length());
        let d1 = cur_cl.tangent_at(cur_cl.length());
        let p2 = next_cl.point_at(0.0);
        let d2 = next_cl.tangent_at(0.0);
        let curve = junction_curve(p1, d1, p2, d2);
        pts.extend_from_slice(&curve[1..]);
        let with_curve = Polyline::new(pts.clone());
        let curve_end = with_curve.length();
        self.segs.push(PathSeg { edge: None, s0: base, s1: curve_end });
        pts.extend_from_slice(&next_cl.points()[1..]);
        self.path = Polyline::new(pts);
        self.segs.push(PathSeg { edge: Some(next), s0: curve_end, s1: self.path.length() });
    }

    fn trim(&mut self) {
        // Drop fully passed geometry to keep projections cheap.
        if self.s < 80.0 {
            return;
        }
        let cut = self.s - 20.0;
        let keep_from = self.path.point_at(cut);
        let mut pts = vec![keep_from];
        let cum_pts = self.path.points();
        let mut acc = Polyline::new(self.path.points().to_vec());
        let _ = &mut acc;
        let mut running = 0.0;
        for i in 1..cum_pts.len() {
            running += cum_pts[i].dist(cum_pts[i - 1]);
            if running > cut {
                pts.push(cum_pts[i]);
            }
        }
        if pts.len() < 2 {
            return;
        }
        self.path = Polyline::new(pts);
        for seg in self.segs.iter_mut() {
            seg.s0 -= cut;
            seg.s1 -= cut;
        }
        self.segs.retain(|seg| seg.s1 > 0.0);
        self.s -= cut;
    }

    fn target_speed(
        &self,
        graph: &RoadGraph,
        others: &[(Vec2, f64)],
        ego: &ActorState,
        sim_time: f64,
    ) -> f64 {
        let me = self.state();
        let fwd = me.pose.forward();
        let right = me.pose.right();

        // Posted limit, slower through junction connectors.
        let mut target = match self.current_edge() {
            Some(e) => graph.edges[e].speed_limit,
            None => JUNCTION_SPEED,
        };

        // Car following against every other vehicle (and the ego) that sits
        // ahead in our corridor.
        let mut blockers = others.to_vec();
        blockers.push((ego.pose.pos, ego.speed));
        for (pos, _) in blockers {
            let d = pos - me.pose.pos;
            let lon = d.dot(fwd);
            let lat = d.dot(right);
            if lon > 0.5 && lon < FOLLOW_LOOKAHEAD && lat.abs() < 2.2 {
                let gap = lon - FOLLOW_STANDSTILL_GAP;
                target = target.min((gap / FOLLOW_TIME_GAP).max(0.0));
            }
        }

        // Signal compliance: braking envelope toward the stop line.
        if let Some(seg) =
            self.segs.iter().find(|seg| self.s >= seg.s0 && self.s < seg.s1)
        {
            if let Some(edge) = seg.edge {
                if let Some(light) = graph.light_of_edge(edge) {
                    let d_stop = seg.s1 - self.s;
                    let phase = light.phase_at(sim_time);
                    let must_stop = match phase {
                        LightPhase::Red => true,
                        LightPhase::Yellow => {
                            // Stop unless already too close to stop comfortably.
                            self.speed * self.speed <= 2.0 * COMFORT_DECEL * d_stop
                        }
                        LightPhase::Green => false,
                    };
                    if must_stop {
                        let v_allow = (2.0 * COMFORT_DECEL * (d_stop - 1.0).max(0.0)).sqrt();
                        target = target.min(v_allow);
                    }
                }
            }
        }
        target
    }
}

/// Sidewalk patroller: walks back and forth along a segment parallel to a
/// road, never entering the drivable surface.
pub struct Pedestrian {
    a: Vec2,
    b: Vec2,
    t: f64,
    dir: f64,
    speed: f64,
}

impl Pedestrian {
    pub fn state(&self) -> ActorState {
        let ab = self.b - self.a;
        let pos = self.a + ab * self.t;
        let heading = (ab * self.dir).angle();
        ActorState { pose: Pose { pos, heading }, speed: self.speed }
    }

    pub fn step(&mut self, dt: f64) {
        let len = self.a.dist(self.b).max(1e-6);
        self.t += self.dir * self.speed * dt / len;
        if self.t >= 1.0 {
            self.t = 1.0;
            self.dir = -1.0;
        } else if self.t <= 0.0 {
            self.t = 0.0;
            self.dir = 1.0;
        }
    }
}

pub(super) fn spawn_vehicles(
    graph: &RoadGraph,
    rng: &mut DetRng,
    count: usize,
    ego_pos: Vec2,
) -> Vec<NpcVehicle> {
    let mut out: Vec<NpcVehicle> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < count * 200 {
        attempts += 1;
        let edge = rng.gen_range(0..graph.edges.len());
        let cl = graph.centerline(edge);
        if cl.length() < 20.0 {
            continue;
        }
        let s = rng::uniform(rng, 5.0, cl.length() - 5.0);
        let pos = cl.point_at(s);
        if pos.dist(ego_pos) < 15.0 {
            continue;
        }
        if out.iter().any(|n| n.state().pose.pos.dist(pos) < 12.0) {
            continue;
        }
        out.push(NpcVehicle::new(graph, edge, s));
    }
    out
}

pub(super) fn spawn_pedestrians(
    graph: &RoadGraph,
    rng: &mut DetRng,
    count: usize,
) -> Vec<Pedestrian> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let edge = rng.gen_range(0..graph.edges.len());
        let e = &graph.edges[edge];
        let a = graph.nodes[e.from].pos;
        let b = graph.nodes[e.to].pos;
        let dir = (b - a).normalized();
        let side = Vec2::new(dir.y, -dir.x) * (graph.lane_width + 1.2);
        let len = a.dist(b);
        let lo = rng::uniform(rng, 0.15, 0.45);
        let hi = rng::uniform(rng, 0.55, 0.85);
        out.push(Pedestrian {
            a: a + dir * (len * lo) + side,
            b: a + dir * (len * hi) + side,
            t: rng::uniform(rng, 0.0, 1.0),
            dir: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            speed: rng::uniform(rng, 0.9, 1.4),
        });
    }
    out
}

pub(super) fn step_vehicles(
    graph: &RoadGraph,
    npcs: &mut [NpcVehicle],
    ego: &ActorState,
    sim_time: f64,
    dt: f64,
    rng: &mut DetRng,
) {
    let states: Vec<(Vec2, f64)> =
        npcs.iter().map(|n| (n.state().pose.pos, n.speed)).collect();
    for i in 0..npcs.len() {
        // Everyone except vehicle i acts as a potential blocker.
        let mut others = states.clone();
        others.remove(i);
        let target = npcs[i].target_speed(graph, &others, ego, sim_time);
        let npc = &mut npcs[i];
        let accel = ((target - npc.speed) * 1.8).clamp(-super::MAX_DECEL, 2.5);
        npc.speed = (npc.speed + accel * dt).max(0.0);
        npc.s += npc.speed * dt;
        if npc.s + 40.0 > npc.path.length() {
            npc.extend(graph, rng);
        }
        npc.trim();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::build_train_town;

    #[test]
    fn npc_stays_on_road() {
        let g = build_train_town();
        let mut rng = rng::seeded(5);
        let mut npcs = spawn_vehicles(&g, &mut rng, 6, Vec2::new(-1000.0, -1000.0));
        assert_eq!(npcs.len(), 6);
        let ego = ActorState { pose: Pose::new(-1000.0, -1000.0, 0.0), speed: 0.0 };
        for _ in 0..600 {
            step_vehicles(&g, &mut npcs, &ego, 0.0, 0.1, &mut rng);
        }
        for n in &npcs {
            let pos = n.state().pose.pos;
            assert!(g.is_on_road(pos), "npc left the road at {pos:?}");
        }
    }

    #[test]
    fn npc_brakes_for_blocker() {
        let g = build_train_town();
        let mut rng = rng::seeded(6);
        let mut npcs = vec![NpcVehicle::new(&g, 0, 10.0)];
        // Ego parked 20 m ahead in the same lane.
        let cl = g.centerline(0);
        let stop_pos = cl.point_at(30.0);
        let heading = cl.tangent_at(30.0).angle();
        let ego = ActorState { pose: Pose { pos: stop_pos, heading }, speed: 0.0 };
        for _ in 0..300 {
            step_vehicles(&g, &mut npcs, &ego, 0.0, 0.1, &mut rng);
        }
        // NPC must be held behind the ego, not pass through it.
        assert!(npcs[0].s < 30.0 - 4.0, "npc ran through a stopped vehicle: s={}", npcs[0].s);
    }

    #[test]
    fn pedestrians_stay_off_road() {
        let g = build_train_town();
        let mut rng = rng::seeded(7);
        let mut peds = spawn_pedestrians(&g, &mut rng, 10);
        for _ in 0..1000 {
            for p in peds.iter_mut() {
                p.step(0.1);
            }
        }
        for p in &peds {
            assert!(!g.is_on_road(p.state().pose.pos));
        }
    }
}
