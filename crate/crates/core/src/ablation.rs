//! Feature-layer ablation attribution: zero one embedding before fusion,
//! measure the absolute waypoint shift |dx| + |dy| per horizon, and average
//! it along typed path segments (straight, left turn, right turn).

use crate::agent::Agent;
use crate::error::{CoreError, Result};
use crate::evaluation::{AgentDriver, Driver};
use crate::fusion::Role;
use crate::rng;
use crate::simworld::{
    expert_policy, observe, random_route, route_progress, Augment, ExpertParams, RoadGraph,
    RoutingCommand, World,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathType {
    Straight,
    Left,
    Right,
}

impl PathType {
    pub const ALL: [PathType; 3] = [PathType::Left, PathType::Right, PathType::Straight];

    pub fn name(self) -> &'static str {
        match self {
            PathType::Straight => "straight",
            PathType::Left => "left_turn",
            PathType::Right => "right_turn",
        }
    }

    /// A point belongs to a turn type while inside that command's window;
    /// follow and straight-through both count as straight.
    fn of_command(c: RoutingCommand) -> PathType {
        match c {
            RoutingCommand::Left => PathType::Left,
            RoutingCommand::Right => PathType::Right,
            _ => PathType::Straight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Horizon {
    Short,
    Long,
}

impl Horizon {
    pub fn name(self) -> &'static str {
        match self {
            Horizon::Short => "short",
            Horizon::Long => "long",
        }
    }
}

/// Zero one role's embedding before fusion and return the absolute
/// waypoint error (|dx|+|dy|) for the near (short) and far (long) points.
pub fn ablate_once(
    agent: &mut Agent,
    embeddings: &[(Role, Tensor)],
    command: RoutingCommand,
    role: Role,
) -> Result<(f64, f64)> {
    let base = agent.waypoints_from_embeddings(embeddings, command, None)?;
    let ablated = agent.waypoints_from_embeddings(embeddings, command, Some(role))?;
    let short = (base.near.x - ablated.near.x).abs() + (base.near.y - ablated.near.y).abs();
    let long = (base.far.x - ablated.far.x).abs() + (base.far.y - ablated.far.y).abs();
    Ok((short, long))
}

/// Arithmetic mean of per-point ablation values over a path segment, per
/// horizon. Empty segments are invalid input.
pub fn average_contribution(values: &[(f64, f64)]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(CoreError::validation("average over an empty path segment"));
    }
    let m = values.len() as f64;
    let short = values.iter().map(|v| v.0).sum::<f64>() / m;
    let long = values.iter().map(|v| v.1).sum::<f64>() / m;
    Ok((short, long))
}

/// One recorded evaluation point: embeddings plus location metadata.
pub struct AblationPoint {
    pub path_type: PathType,
    pub command: RoutingCommand,
    /// Arc position along the route.
    pub s: f64,
    pub embeddings: Vec<(Role, Tensor)>,
}

/// Per-(path, horizon, role) trace for plots: (arc position, value).
#[derive(Debug, Clone)]
pub struct AblationTrace {
    pub path_type: PathType,
    pub horizon: Horizon,
    pub role: Role,
    pub points: Vec<(f64, f64)>,
}

/// The 6 x p matrix plus plot traces.
pub struct AblationReport {
    pub agent_label: String,
    pub map: String,
    pub config_hash: String,
    pub roles: Vec<Role>,
    /// Averaged T values; `None` when no segment of the type exists.
    pub matrix: Vec<((PathType, Horizon), Vec<Option<f64>>)>,
    pub traces: Vec<AblationTrace>,
    pub points_per_type: Vec<(PathType, usize)>,
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub routes: usize,
    pub base_seed: u64,
    /// Record every k-th step to keep point counts manageable.
    pub stride: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { routes: 4, base_seed: 5000, stride: 2 }
    }
}

/// Collect evaluation points along expert-driven traversals of seeded
/// routes: the expert guarantees every turn type is actually traversed,
/// while the agent's perception stack records its embeddings at each step.
pub fn collect_points(
    driver: &mut AgentDriver,
    graph: &RoadGraph,
    cfg: &AblationConfig,
) -> Result<Vec<AblationPoint>> {
    let mut points = Vec::new();
    let expert_params = ExpertParams::default();
    for i in 0..cfg.routes {
        let seed = cfg.base_seed.wrapping_add(i as u64);
        let mut route_rng = rng::substream(seed, "ablate-route");
        let route = random_route(graph, &mut route_rng, 150.0, 420.0)?;
        driver.reset();
        let mut world = World::new(
            graph.clone(),
            seed,
            &crate::simworld::WorldParams::default(),
            route.edges[0],
            1.0,
        );
        let render = crate::simworld::RenderConfig::default();
        let goal = route.goal_pos();
        let mut step = 0usize;
        while world.sim_time < 240.0 {
            let obs = observe(&world, &render);
            let (s_route, _) = route_progress(&world, &route);
            let command = route.command_at(s_route);
            // Push through the agent's buffers; record embeddings at the
            // configured stride.
            driver.observe_only(&obs)?;
            if step % cfg.stride == 0 {
                let embeddings = driver.current_embeddings()?;
                points.push(AblationPoint {
                    path_type: PathType::of_command(command),
                    command,
                    s: s_route,
                    embeddings,
                });
            }
            let control = expert_policy(&world, &route, &expert_params)
                .map_err(|e| CoreError::validation(format!("expert failed during collection: {e}")))?;
            world.step(&control, 0.1)?;
            if world.ego.pose.pos.dist(goal) < 2.0 {
                break;
            }
            step += 1;
        }
    }
    Ok(points)
}

/// Build the full report: the 6 x p matrix in (path type x horizon) rows
/// and per-path plot traces of ablation value against arc length.
pub fn ablation_report(
    driver: &mut AgentDriver,
    graph: &RoadGraph,
    cfg: &AblationConfig,
    config_hash: &str,
) -> Result<AblationReport> {
    let points = collect_points(driver, graph, cfg)?;
    let label = driver.label();
    let agent = driver.agent_mut();
    let roles = agent.roles();
    let hash_before = agent.param_hash();

    // Per-point ablation values, bucketed by path type and role.
    let mut per_cell: std::collections::HashMap<(PathType, usize), Vec<(f64, f64)>> =
        std::collections::HashMap::new();
    let mut traces: std::collections::HashMap<(PathType, Horizon, usize), Vec<(f64, f64)>> =
        std::collections::HashMap::new();
    for p in &points {
        for (ri, role) in roles.iter().enumerate() {
            let (short, long) = ablate_once(agent, &p.embeddings, p.command, *role)?;
            per_cell.entry((p.path_type, ri)).or_default().push((short, long));
            traces.entry((p.path_type, Horizon::Short, ri)).or_default().push((p.s, short));
            traces.entry((p.path_type, Horizon::Long, ri)).or_default().push((p.s, long));
        }
    }
    assert_eq!(agent.param_hash(), hash_before, "attribution must not mutate the agent");

    let mut matrix = Vec::new();
    for path in PathType::ALL {
        for horizon in [Horizon::Short, Horizon::Long] {
            let mut row = Vec::with_capacity(roles.len());
            for ri in 0..roles.len() {
                row.push(match per_cell.get(&(path, ri)) {
                    Some(vals) if !vals.is_empty() => {
                        let (short, long) = average_contribution(vals)?;
                        Some(match horizon {
                            Horizon::Short => short,
                            Horizon::Long => long,
                        })
                    }
                    _ => None,
                });
            }
            matrix.push(((path, horizon), row));
        }
    }

    let mut trace_list = Vec::new();
    for ((path, horizon, ri), mut pts) in traces {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        trace_list.push(AblationTrace { path_type: path, horizon, role: roles[ri], points: pts });
    }
    trace_list.sort_by_key(|t| {
        (
            t.path_type as usize,
            t.horizon as usize,
            roles.iter().position(|r| *r == t.role).unwrap(),
        )
    });

    let mut points_per_type = Vec::new();
    for path in PathType::ALL {
        let n = points.iter().filter(|p| p.path_type == path).count();
        points_per_type.push((path, n));
    }

    Ok(AblationReport {
        agent_label: label,
        map: graph.name.clone(),
        config_hash: config_hash.to_string(),
        roles,
        matrix,
        traces: trace_list,
        points_per_type,
    })
}

impl AblationReport {
    /// Machine-readable structured text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("format_version {}\n", crate::FORMAT_VERSION));
        out.push_str(&format!("config_hash {}\n", if self.config_hash.is_empty() { "-" } else { &self.config_hash }));
        out.push_str(&format!("agent {}\n", self.agent_label));
        out.push_str(&format!("map {}\n", self.map));
        out.push_str(&format!(
            "roles {}\n",
            self.roles.iter().map(|r| r.symbol()).collect::<Vec<_>>().join(",")
        ));
        for (path, n) in &self.points_per_type {
            out.push_str(&format!("points_{} {}\n", path.name(), n));
        }
        out.push_str("[matrix]\n");
        for ((path, horizon), row) in &self.matrix {
            let cells: Vec<String> = row
                .iter()
                .map(|v| match v {
                    Some(x) => format!("{x:.6}"),
                    None => "null".into(),
                })
                .collect();
            out.push_str(&format!("{} {} {}\n", path.name(), horizon.name(), cells.join(" ")));
        }
        out
    }

    /// Aligned table mirroring the published layout: rows are path type x
    /// prediction horizon, columns are the embedding roles.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("Ablation ({}, map {})\n", self.agent_label, self.map));
        out.push_str(&format!("{:<12} {:<10}", "Path Type", "Prediction"));
        for r in &self.roles {
            out.push_str(&format!(" {:>10}", r.symbol()));
        }
        out.push('\n');
        for ((path, horizon), row) in &self.matrix {
            let h = match horizon {
                Horizon::Short => "short term",
                Horizon::Long => "long term",
            };
            out.push_str(&format!("{:<12} {:<10}", path.name(), h));
            for v in row {
                match v {
                    Some(x) => out.push_str(&format!(" {:>10.4}", x)),
                    None => out.push_str(&format!(" {:>10}", "null (no segment)")),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Emit one plot per (path type, horizon) with a curve per role.
    pub fn render_plots(&self, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
        let mut written = Vec::new();
        for path_type in PathType::ALL {
            for horizon in [Horizon::Short, Horizon::Long] {
                let mut plot = crate::plot::LinePlot::new(
                    format!("ablation {} {}", path_type.name(), horizon.name()),
                    "arc (m)",
                    "abs err (m)",
                );
                let mut any = false;
                for t in &self.traces {
                    if t.path_type == path_type && t.horizon == horizon && !t.points.is_empty() {
                        plot.add_series(t.role.symbol(), t.points.clone());
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let file = dir.join(format!("ablation_{}_{}.png", path_type.name(), horizon.name()));
                plot.render_png(&file)?;
                written.push(file);
            }
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ApnConfig;
    use crate::agent::AgentConfig;
    use crate::fusion::{Combination, MergeMethod};
    use crate::perception::BrnConfig;

    fn tiny_agent(merge: MergeMethod) -> Agent {
        let cfg = AgentConfig {
            combination: Combination::Brn,
            merge,
            embed_dim: 8,
            brn: BrnConfig { frame_side: 64, stack_depth: 3, base_width: 2, embed_dim: 8 },
            apn: ApnConfig { feature_dim: 8, branch_widths: [8, 8, 8], hidden_dim: 4 },
            seq_len: 3,
        };
        Agent::new(cfg, 3, None, None).unwrap()
    }

    #[test]
    fn single_point_average_is_identity_and_empty_rejected() {
        let v = vec![(0.4, 0.7)];
        assert_eq!(average_contribution(&v).unwrap(), (0.4, 0.7));
        let v = vec![(0.5, 0.25); 9];
        assert_eq!(average_contribution(&v).unwrap(), (0.5, 0.25));
        assert!(average_contribution(&[]).is_err());
    }

    #[test]
    fn absent_role_rejected() {
        let mut agent = tiny_agent(MergeMethod::ConvUnconstrained);
        let embeds = vec![(Role::Reflex, Tensor::full(&[1, 8], 0.2))];
        let err =
            ablate_once(&mut agent, &embeds, RoutingCommand::Follow, Role::Affordance).unwrap_err();
        assert!(err.to_string().contains("not part of combination"));
    }

    #[test]
    fn ablation_never_mutates_parameters() {
        let mut agent = tiny_agent(MergeMethod::Concat);
        let before = agent.param_hash();
        let embeds = vec![(Role::Reflex, Tensor::full(&[1, 8], -0.4))];
        for _ in 0..3 {
            let (s, l) = ablate_once(&mut agent, &embeds, RoutingCommand::Left, Role::Reflex).unwrap();
            assert!(s >= 0.0 && l >= 0.0);
        }
        assert_eq!(agent.param_hash(), before);
    }

    #[test]
    fn zero_weight_role_attributes_exactly_zero() {
        // Four-role agent with a selector kernel that ignores a role: its
        // ablation value is identically zero.
        let cfg = AgentConfig {
            combination: Combination::DpnBrnMpn,
            merge: MergeMethod::ConvUnconstrained,
            embed_dim: 8,
            brn: BrnConfig { frame_side: 64, stack_depth: 3, base_width: 2, embed_dim: 8 },
            apn: ApnConfig { feature_dim: 8, branch_widths: [8, 8, 8], hidden_dim: 4 },
            seq_len: 3,
        };
        let mpn = crate::perception::Mpn::new(
            crate::perception::MpnConfig {
                frame_side: 64,
                latent_dim: 8,
                seq_len: 3,
                ..Default::default()
            },
            1,
        );
        let dpn = crate::perception::Dpn::new(
            crate::perception::DpnConfig { frame_side: 64, latent_dim: 8, ..Default::default() },
            2,
        );
        let mut agent = Agent::new(cfg, 4, Some(mpn), Some(dpn)).unwrap();
        // Kernel selects only the reflex embedding.
        agent.set_fusion_kernel(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        let embeds: Vec<(Role, Tensor)> = Role::ALL
            .iter()
            .enumerate()
            .map(|(i, r)| (*r, Tensor::full(&[1, 8], 0.1 + i as f64 * 0.2)))
            .collect();
        let (s, l) =
            ablate_once(&mut agent, &embeds, RoutingCommand::Follow, Role::CurrentLatent).unwrap();
        assert_eq!((s, l), (0.0, 0.0), "zero-kernel role must attribute exactly zero");
        let (s, l) =
            ablate_once(&mut agent, &embeds, RoutingCommand::Follow, Role::Affordance).unwrap();
        assert_eq!((s, l), (0.0, 0.0));
        // The selected role attributes non-zero.
        let (s, l) = ablate_once(&mut agent, &embeds, RoutingCommand::Follow, Role::Reflex).unwrap();
        assert!(s > 0.0 || l > 0.0);
    }
}
