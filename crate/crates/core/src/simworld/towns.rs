//! The two bundled towns: a 4x4 grid for training and a differently shaped
//! 3x5 grid (with two roads removed) for held-out evaluation. Both are also
//! shipped as plain-text map files under `assets/maps/`.

use crate::error::Result;
use crate::geometry::Vec2;

use super::map::{RoadEdge, RoadGraph, RoadNode, TrafficLight};

const TRAIN_TOWN_TEXT: &str = include_str!("../../assets/maps/train_town.map");
const TEST_TOWN_TEXT: &str = include_str!("../../assets/maps/test_town.map");

/// Load one of the bundled maps ("train-town" or "test-town"), or read a
/// map file from disk when given a path.
pub fn load_map(id: &str) -> Result<RoadGraph> {
    match id {
        "train-town" => RoadGraph::from_text(TRAIN_TOWN_TEXT),
        "test-town" => RoadGraph::from_text(TEST_TOWN_TEXT),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                crate::CoreError::parse("map", format!("cannot read `{path}`: {e}"))
            })?;
            RoadGraph::from_text(&text)
        }
    }
}

/// Build a rectangular grid town. `skip` removes undirected roads (pairs of
/// grid-adjacent node indices) to vary the topology.
pub fn grid_town(
    name: &str,
    cols: usize,
    rows: usize,
    spacing: f64,
    speed_limit: f64,
    skip: &[(usize, usize)],
) -> Result<RoadGraph> {
    let mut nodes = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            nodes.push(RoadNode { pos: Vec2::new(c as f64 * spacing, r as f64 * spacing) });
        }
    }
    let idx = |c: usize, r: usize| r * cols + c;
    let skipped = |a: usize, b: usize| skip.contains(&(a, b)) || skip.contains(&(b, a));

    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let a = idx(c, r);
            if c + 1 < cols && !skipped(a, idx(c + 1, r)) {
                edges.push(RoadEdge { from: a, to: idx(c + 1, r), speed_limit });
                edges.push(RoadEdge { from: idx(c + 1, r), to: a, speed_limit });
            }
            if r + 1 < rows && !skipped(a, idx(c, r + 1)) {
                edges.push(RoadEdge { from: a, to: idx(c, r + 1), speed_limit });
                edges.push(RoadEdge { from: idx(c, r + 1), to: a, speed_limit });
            }
        }
    }

    // Protected signal plan: at every node with >= 3 roads each approach
    // gets its own green slot (7s green, 2s yellow, 3s clearance).
    let slot = 12.0;
    let mut lights = Vec::new();
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, e) in edges.iter().enumerate() {
        incoming[e.to].push(i);
    }
    for (nid, inc) in incoming.iter().enumerate() {
        let mut neighbors: Vec<usize> = inc.iter().map(|&e| edges[e].from).collect();
        neighbors.sort_unstable();
        neighbors.dedup();
        if neighbors.len() < 3 {
            continue;
        }
        // Order approaches by compass angle for a stable assignment.
        let mut ordered: Vec<usize> = inc.clone();
        ordered.sort_by(|&a, &b| {
            let da = nodes[edges[a].from].pos - nodes[nid].pos;
            let db = nodes[edges[b].from].pos - nodes[nid].pos;
            da.angle().partial_cmp(&db.angle()).unwrap()
        });
        let k = ordered.len() as f64;
        let cycle = slot * k;
        for (i, &e) in ordered.iter().enumerate() {
            lights.push(TrafficLight {
                edge: e,
                green: 7.0,
                yellow: 2.0,
                red: cycle - 9.0,
                offset: cycle - slot * i as f64,
            });
        }
    }

    RoadGraph::build(name, 4.0, 7.0, nodes, edges, lights)
}

pub fn build_train_town() -> RoadGraph {
    grid_town("train-town", 4, 4, 80.0, 7.0, &[]).expect("train town must be valid")
}

pub fn build_test_town() -> RoadGraph {
    // Different footprint, spacing and two missing roads; still strongly
    // connected.
    grid_town("test-town", 5, 3, 70.0, 7.0, &[(1, 6), (8, 13)]).expect("test town must be valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn sync_or_check(built: &RoadGraph, rel: &str) {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(rel);
        if std::env::var("ENSDRIVE_REGEN_MAPS").is_ok() {
            std::fs::write(&path, built.to_text()).unwrap();
        }
        let on_disk = RoadGraph::from_text(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(
            built, &on_disk,
            "bundled map file {rel} is out of sync; rerun with ENSDRIVE_REGEN_MAPS=1"
        );
    }

    #[test]
    fn bundled_maps_match_builders() {
        sync_or_check(&build_train_town(), "assets/maps/train_town.map");
        sync_or_check(&build_test_town(), "assets/maps/test_town.map");
    }

    #[test]
    fn bundled_maps_load_by_id() {
        assert_eq!(load_map("train-town").unwrap().name, "train-town");
        assert_eq!(load_map("test-town").unwrap().name, "test-town");
    }

    #[test]
    fn towns_differ() {
        let a = build_train_town();
        let b = build_test_town();
        assert_ne!(a.nodes.len(), b.nodes.len());
    }
}
