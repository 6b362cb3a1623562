//! Road graph: nodes, directed lane segments, traffic lights, and the
//! plain-text map format.
//!
//! Roads are two-way: each direction is its own directed edge whose lane
//! centerline runs offset to the right of the node-to-node axis
//! (right-hand traffic). Lane centerlines stop `intersection_radius`
//! short of each node; the junction box itself is road surface.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::geometry::{Polyline, Vec2};

pub const DEFAULT_LANE_WIDTH: f64 = 4.0;
pub const DEFAULT_INTERSECTION_RADIUS: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadNode {
    pub pos: Vec2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadEdge {
    pub from: usize,
    pub to: usize,
    pub speed_limit: f64,
}

/// Signal head governing the *end* of one directed edge (the approach into
/// the intersection at `edge.to`). Phase durations cycle green -> yellow ->
/// red; `offset` shifts the cycle in time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficLight {
    pub edge: usize,
    pub green: f64,
    pub yellow: f64,
    pub red: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightPhase {
    Green,
    Yellow,
    Red,
}

impl TrafficLight {
    pub fn cycle(&self) -> f64 {
        self.green + self.yellow + self.red
    }

    pub fn phase_at(&self, t: f64) -> LightPhase {
        let c = (t + self.offset).rem_euclid(self.cycle());
        if c < self.green {
            LightPhase::Green
        } else if c < self.green + self.yellow {
            LightPhase::Yellow
        } else {
            LightPhase::Red
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoadGraph {
    pub name: String,
    pub lane_width: f64,
    pub intersection_radius: f64,
    pub nodes: Vec<RoadNode>,
    pub edges: Vec<RoadEdge>,
    pub lights: Vec<TrafficLight>,
    /// Lane centerline per edge (setback applied, offset to the right).
    centerlines: Vec<Polyline>,
    /// Light index per edge, if any.
    light_by_edge: Vec<Option<usize>>,
    /// Outgoing edge ids per node.
    outgoing: Vec<Vec<usize>>,
    /// Incoming edge ids per node.
    incoming: Vec<Vec<usize>>,
}

impl PartialEq for RoadGraph {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.lane_width == other.lane_width
            && self.intersection_radius == other.intersection_radius
            && self.nodes == other.nodes
            && self.edges == other.edges
            && self.lights == other.lights
    }
}

impl RoadGraph {
    pub fn build(
        name: impl Into<String>,
        lane_width: f64,
        intersection_radius: f64,
        nodes: Vec<RoadNode>,
        edges: Vec<RoadEdge>,
        lights: Vec<TrafficLight>,
    ) -> Result<Self> {
        let name = name.into();
        let mut g = RoadGraph {
            name,
            lane_width,
            intersection_radius,
            nodes,
            edges,
            lights,
            centerlines: Vec::new(),
            light_by_edge: Vec::new(),
            outgoing: Vec::new(),
            incoming: Vec::new(),
        };
        g.derive()?;
        g.validate()?;
        Ok(g)
    }

    fn derive(&mut self) -> Result<()> {
        let n = self.nodes.len();
        self.outgoing = vec![Vec::new(); n];
        self.incoming = vec![Vec::new(); n];
        self.centerlines.clear();
        for (i, e) in self.edges.iter().enumerate() {
            if e.from >= n || e.to >= n {
                return Err(CoreError::parse("map", format!("edge {i} references unknown node")));
            }
            self.outgoing[e.from].push(i);
            self.incoming[e.to].push(i);
            let a = self.nodes[e.from].pos;
            let b = self.nodes[e.to].pos;
            let dir = (b - a).normalized();
            let right = Vec2::new(dir.y, -dir.x);
            let off = right * (self.lane_width / 2.0);
            let len = a.dist(b);
            let setback = self.intersection_radius.min(len / 2.0 - 1.0).max(0.0);
            let p0 = a + dir * setback + off;
            let p1 = b - dir * setback + off;
            self.centerlines.push(Polyline::new(vec![p0, p1]));
        }
        self.light_by_edge = vec![None; self.edges.len()];
        for (i, l) in self.lights.iter().enumerate() {
            if l.edge >= self.edges.len() {
                return Err(CoreError::parse("map", format!("light {i} references unknown edge")));
            }
            self.light_by_edge[l.edge] = Some(i);
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.nodes.len() < 2 {
            return Err(CoreError::parse("map", "need at least two nodes"));
        }
        for (i, e) in self.edges.iter().enumerate() {
            if e.from == e.to {
                return Err(CoreError::parse("map", format!("edge {i} is a self-loop")));
            }
            if e.speed_limit <= 0.0 || !e.speed_limit.is_finite() {
                return Err(CoreError::parse("map", format!("edge {i} has invalid speed limit")));
            }
        }
        // Signalized intersections: every approach into a node with >= 3
        // incident roads must carry a light.
        for (nid, _) in self.nodes.iter().enumerate() {
            if self.approach_count(nid) >= 3 {
                for &e in &self.incoming[nid] {
                    if self.light_by_edge[e].is_none() {
                        return Err(CoreError::parse(
                            "map",
                            format!("node {nid} has >=3 roads but edge {e} lacks a light"),
                        ));
                    }
                }
            }
        }
        // Strong connectivity: forward and reverse reachability from node 0.
        let fwd = self.reachable(0, false);
        let rev = self.reachable(0, true);
        if fwd.iter().any(|r| !r) || rev.iter().any(|r| !r) {
            return Err(CoreError::parse("map", "graph is not strongly connected"));
        }
        Ok(())
    }

    fn reachable(&self, start: usize, reverse: bool) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(nid) = stack.pop() {
            let list = if reverse { &self.incoming[nid] } else { &self.outgoing[nid] };
            for &e in list {
                let next = if reverse { self.edges[e].from } else { self.edges[e].to };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        seen
    }

    /// Number of distinct neighbor roads at a node.
    pub fn approach_count(&self, node: usize) -> usize {
        let mut neighbors: Vec<usize> = self.incoming[node]
            .iter()
            .map(|&e| self.edges[e].from)
            .chain(self.outgoing[node].iter().map(|&e| self.edges[e].to))
            .collect();
        neighbors.sort_unstable();
        neighbors.dedup();
        neighbors.len()
    }

    pub fn centerline(&self, edge: usize) -> &Polyline {
        &self.centerlines[edge]
    }

    pub fn light_of_edge(&self, edge: usize) -> Option<&TrafficLight> {
        self.light_by_edge[edge].map(|i| &self.lights[i])
    }

    pub fn outgoing_edges(&self, node: usize) -> &[usize] {
        &self.outgoing[node]
    }

    pub fn incoming_edges(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    pub fn edge_dir(&self, edge: usize) -> Vec2 {
        let e = &self.edges[edge];
        (self.nodes[e.to].pos - self.nodes[e.from].pos).normalized()
    }

    /// Stop-line position of an edge (end of its lane centerline).
    pub fn stop_line(&self, edge: usize) -> Vec2 {
        let cl = &self.centerlines[edge];
        cl.point_at(cl.length())
    }

    /// True when `p` lies on the drivable surface (road body of any edge, or
    /// a junction box). Rendering uses the same primitives, so pixels and
    /// this predicate agree.
    pub fn is_on_road(&self, p: Vec2) -> bool {
        for e in &self.edges {
            let a = self.nodes[e.from].pos;
            let b = self.nodes[e.to].pos;
            let ab = b - a;
            let len = ab.norm();
            let dir = ab * (1.0 / len);
            let d = p - a;
            let lon = d.dot(dir);
            let lat = d.dot(Vec2::new(dir.y, -dir.x));
            if (0.0..=len).contains(&lon) && lat.abs() <= self.lane_width {
                return true;
            }
        }
        let box_half = self.junction_half();
        for n in &self.nodes {
            if (p.x - n.pos.x).abs() <= box_half && (p.y - n.pos.y).abs() <= box_half {
                return true;
            }
        }
        false
    }

    pub fn junction_half(&self) -> f64 {
        self.intersection_radius - 1.0
    }

    /// Edge whose lane best matches a pose (distance + heading agreement).
    pub fn nearest_edge(&self, pos: Vec2, heading: f64) -> (usize, f64, f64) {
        let mut best = (0usize, f64::INFINITY, 0.0);
        let h = Vec2::from_angle(heading);
        for (i, cl) in self.centerlines.iter().enumerate() {
            let (s, d) = cl.project(pos);
            let align = cl.tangent_at(s).dot(h);
            // Opposing lanes sit a lane-width apart; heading penalty keeps
            // association on the correct side.
            let score = d + if align < 0.0 { 10.0 } else { 0.0 };
            if score < best.1 {
                best = (i, score, s);
            }
        }
        (best.0, best.1, best.2)
    }

    // -- text format ---------------------------------------------------------

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# ensdrive road map\n");
        out.push_str(&format!("format_version {}\n", crate::FORMAT_VERSION));
        out.push_str(&format!("name {}\n", self.name));
        out.push_str(&format!("lane_width {}\n", self.lane_width));
        out.push_str(&format!("intersection_radius {}\n", self.intersection_radius));
        out.push_str("\n[nodes]\n");
        for (i, n) in self.nodes.iter().enumerate() {
            out.push_str(&format!("{} {} {}\n", i, n.pos.x, n.pos.y));
        }
        out.push_str("\n[edges]\n");
        for (i, e) in self.edges.iter().enumerate() {
            out.push_str(&format!("{} {} {} {}\n", i, e.from, e.to, e.speed_limit));
        }
        out.push_str("\n[lights]\n");
        for l in &self.lights {
            out.push_str(&format!("{} {} {} {} {}\n", l.edge, l.green, l.yellow, l.red, l.offset));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            Header,
            Nodes,
            Edges,
            Lights,
        }
        let mut section = Section::Header;
        let mut name = String::new();
        let mut lane_width = DEFAULT_LANE_WIDTH;
        let mut radius = DEFAULT_INTERSECTION_RADIUS;
        let mut nodes: HashMap<usize, Vec2> = HashMap::new();
        let mut edges: HashMap<usize, RoadEdge> = HashMap::new();
        let mut lights = Vec::new();

        let bad = |line: usize, msg: &str| CoreError::parse("map", format!("line {line}: {msg}"));

        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[nodes]" => {
                    section = Section::Nodes;
                    continue;
                }
                "[edges]" => {
                    section = Section::Edges;
                    continue;
                }
                "[lights]" => {
                    section = Section::Lights;
                    continue;
                }
                _ => {}
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match section {
                Section::Header => match fields[0] {
                    "format_version" => {
                        let v: u32 = fields
                            .get(1)
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad(ln, "bad format_version"))?;
                        if v != crate::FORMAT_VERSION {
                            return Err(bad(ln, &format!("unsupported format_version {v}")));
                        }
                    }
                    "name" => name = fields.get(1).unwrap_or(&"").to_string(),
                    "lane_width" => {
                        lane_width = fields
                            .get(1)
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad(ln, "bad lane_width"))?
                    }
                    "intersection_radius" => {
                        radius = fields
                            .get(1)
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad(ln, "bad intersection_radius"))?
                    }
                    k => return Err(bad(ln, &format!("unknown header key `{k}`"))),
                },
                Section::Nodes => {
                    if fields.len() != 3 {
                        return Err(bad(ln, "node needs: id x y"));
                    }
                    let id: usize = fields[0].parse().map_err(|_| bad(ln, "bad node id"))?;
                    let x: f64 = fields[1].parse().map_err(|_| bad(ln, "bad x"))?;
                    let y: f64 = fields[2].parse().map_err(|_| bad(ln, "bad y"))?;
                    nodes.insert(id, Vec2::new(x, y));
                }
                Section::Edges => {
                    if fields.len() != 4 {
                        return Err(bad(ln, "edge needs: id from to speed_limit"));
                    }
                    let id: usize = fields[0].parse().map_err(|_| bad(ln, "bad edge id"))?;
                    let from: usize = fields[1].parse().map_err(|_| bad(ln, "bad from"))?;
                    let to: usize = fields[2].parse().map_err(|_| bad(ln, "bad to"))?;
                    let sl: f64 = fields[3].parse().map_err(|_| bad(ln, "bad speed limit"))?;
                    edges.insert(id, RoadEdge { from, to, speed_limit: sl });
                }
                Section::Lights => {
                    if fields.len() != 5 {
                        return Err(bad(ln, "light needs: edge green yellow red offset"));
                    }
                    let edge: usize = fields[0].parse().map_err(|_| bad(ln, "bad edge id"))?;
                    let g: f64 = fields[1].parse().map_err(|_| bad(ln, "bad green"))?;
                    let y: f64 = fields[2].parse().map_err(|_| bad(ln, "bad yellow"))?;
                    let r: f64 = fields[3].parse().map_err(|_| bad(ln, "bad red"))?;
                    let o: f64 = fields[4].parse().map_err(|_| bad(ln, "bad offset"))?;
                    lights.push(TrafficLight { edge, green: g, yellow: y, red: r, offset: o });
                }
            }
        }

        let n = nodes.len();
        let mut node_list = Vec::with_capacity(n);
        for i in 0..n {
            let pos =
                *nodes.get(&i).ok_or_else(|| CoreError::parse("map", format!("missing node {i}")))?;
            node_list.push(RoadNode { pos });
        }
        let m = edges.len();
        let mut edge_list = Vec::with_capacity(m);
        for i in 0..m {
            let e = edges
                .get(&i)
                .ok_or_else(|| CoreError::parse("map", format!("missing edge {i}")))?
                .clone();
            edge_list.push(e);
        }
        RoadGraph::build(name, lane_width, radius, node_list, edge_list, lights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node_road() -> RoadGraph {
        RoadGraph::build(
            "strip",
            4.0,
            7.0,
            vec![
                RoadNode { pos: Vec2::new(0.0, 0.0) },
                RoadNode { pos: Vec2::new(100.0, 0.0) },
            ],
            vec![
                RoadEdge { from: 0, to: 1, speed_limit: 7.0 },
                RoadEdge { from: 1, to: 0, speed_limit: 7.0 },
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn centerlines_offset_right() {
        let g = two_node_road();
        // Eastbound edge: right of travel is -y.
        let cl = g.centerline(0);
        assert!(cl.points()[0].y < 0.0);
        // Westbound edge: right of travel is +y.
        let cl = g.centerline(1);
        assert!(cl.points()[0].y > 0.0);
    }

    #[test]
    fn on_road_predicate() {
        let g = two_node_road();
        assert!(g.is_on_road(Vec2::new(50.0, 3.9)));
        assert!(!g.is_on_road(Vec2::new(50.0, 4.1)));
        assert!(!g.is_on_road(Vec2::new(-8.0, 0.0)));
    }

    #[test]
    fn text_round_trip() {
        let g = two_node_road();
        let text = g.to_text();
        let g2 = RoadGraph::from_text(&text).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn unsignalized_t_junction_rejected() {
        let nodes = vec![
            RoadNode { pos: Vec2::new(0.0, 0.0) },
            RoadNode { pos: Vec2::new(100.0, 0.0) },
            RoadNode { pos: Vec2::new(0.0, 100.0) },
            RoadNode { pos: Vec2::new(-100.0, 0.0) },
        ];
        let mut edges = Vec::new();
        for (a, b) in [(0, 1), (0, 2), (0, 3)] {
            edges.push(RoadEdge { from: a, to: b, speed_limit: 7.0 });
            edges.push(RoadEdge { from: b, to: a, speed_limit: 7.0 });
        }
        let err = RoadGraph::build("t", 4.0, 7.0, nodes, edges, vec![]).unwrap_err();
        assert!(err.to_string().contains("lacks a light"));
    }

    #[test]
    fn light_phase_cycle() {
        let l = TrafficLight { edge: 0, green: 7.0, yellow: 2.0, red: 27.0, offset: 0.0 };
        assert_eq!(l.phase_at(0.0), LightPhase::Green);
        assert_eq!(l.phase_at(6.9), LightPhase::Green);
        assert_eq!(l.phase_at(7.5), LightPhase::Yellow);
        assert_eq!(l.phase_at(10.0), LightPhase::Red);
        assert_eq!(l.phase_at(36.1), LightPhase::Green);
    }
}
