//! Benchmark report persistence (structured text plus aligned table) and
//! the cross-combination comparison table.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::evaluation::MetricsReport;
use crate::fusion::Combination;

/// A benchmark report as persisted to disk, self-describing enough for the
/// comparison stage to refuse incompatible artifacts.
#[derive(Debug, Clone)]
pub struct SavedReport {
    pub agent_label: String,
    pub combination: String,
    pub map: String,
    pub config_hash: String,
    pub frame_side: usize,
    pub embed_dim: usize,
    pub episodes: usize,
    pub rc_mean: f64,
    pub inkm_mean: f64,
    pub rows: Vec<(u64, f64, Option<f64>, String)>,
}

/// Serialize a benchmark result (machine-readable structured text).
pub fn benchmark_to_text(
    r: &MetricsReport,
    combination: &str,
    frame_side: usize,
    embed_dim: usize,
) -> String {
    let mut out = String::new();
    out.push_str(&format!("format_version {}\n", crate::FORMAT_VERSION));
    out.push_str(&format!(
        "config_hash {}\n",
        if r.config_hash.is_empty() { "-" } else { &r.config_hash }
    ));
    out.push_str(&format!("agent {}\n", r.agent_label));
    out.push_str(&format!("combination {combination}\n"));
    out.push_str(&format!("map {}\n", r.map));
    out.push_str(&format!("frame_side {frame_side}\n"));
    out.push_str(&format!("embed_dim {embed_dim}\n"));
    out.push_str(&format!("episodes {}\n", r.rows.len()));
    out.push_str(&format!("rc_mean {:.6}\n", r.rc_mean));
    out.push_str(&format!("inkm_mean {:.6}\n", r.inkm_mean));
    out.push_str(&format!("inkm_undefined {}\n", r.inkm_undefined));
    out.push_str("[episodes]\n");
    for row in &r.rows {
        let inkm = match row.in_per_km {
            Some(v) => format!("{v:.6}"),
            None => "null".into(),
        };
        out.push_str(&format!(
            "idx={} seed={} route_m={:.2} driven_m={:.2} rc={:.4} inkm={} infractions={} termination={} hash={}\n",
            row.index,
            row.seed,
            row.route_m,
            row.driven_m,
            row.rc_percent,
            inkm,
            row.infractions,
            row.termination.name(),
            row.result_hash,
        ));
    }
    out
}

/// Human-readable aligned table for one benchmark.
pub fn benchmark_to_table(r: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("Benchmark: {} on {} ({} episodes)\n", r.agent_label, r.map, r.rows.len()));
    out.push_str(&format!(
        "{:>4} {:>6} {:>9} {:>9} {:>8} {:>9} {:>12} {:>12}\n",
        "ep", "seed", "route(m)", "driven(m)", "RC(%)", "IN/km", "infractions", "termination"
    ));
    for row in &r.rows {
        let inkm = match row.in_per_km {
            Some(v) => format!("{v:.2}"),
            None => "n/a".into(),
        };
        out.push_str(&format!(
            "{:>4} {:>6} {:>9.1} {:>9.1} {:>8.2} {:>9} {:>12} {:>12}\n",
            row.index,
            row.seed,
            row.route_m,
            row.driven_m,
            row.rc_percent,
            inkm,
            row.infractions,
            row.termination.name(),
        ));
    }
    out.push_str(&format!("mean RC {:.2}%  mean IN/km {:.2}\n", r.rc_mean, r.inkm_mean));
    out
}

pub fn read_benchmark_report(path: &Path) -> Result<SavedReport> {
    let text = std::fs::read_to_string(path).map_err(|_| CoreError::MissingArtifact {
        artifact: path.display().to_string(),
        stage: "evaluate".into(),
    })?;
    let mut rep = SavedReport {
        agent_label: String::new(),
        combination: String::new(),
        map: String::new(),
        config_hash: String::new(),
        frame_side: 0,
        embed_dim: 0,
        episodes: 0,
        rc_mean: 0.0,
        inkm_mean: 0.0,
        rows: Vec::new(),
    };
    let mut in_rows = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "[episodes]" {
            in_rows = true;
            continue;
        }
        if !in_rows {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| CoreError::parse("report", format!("bad line `{line}`")))?;
            match k {
                "format_version" => {}
                "config_hash" => rep.config_hash = if v == "-" { String::new() } else { v.into() },
                "agent" => rep.agent_label = v.into(),
                "combination" => rep.combination = v.into(),
                "map" => rep.map = v.into(),
                "frame_side" => rep.frame_side = v.parse().map_err(|_| CoreError::parse("report", "bad frame_side"))?,
                "embed_dim" => rep.embed_dim = v.parse().map_err(|_| CoreError::parse("report", "bad embed_dim"))?,
                "episodes" => rep.episodes = v.parse().map_err(|_| CoreError::parse("report", "bad episodes"))?,
                "rc_mean" => rep.rc_mean = v.parse().map_err(|_| CoreError::parse("report", "bad rc_mean"))?,
                "inkm_mean" => rep.inkm_mean = v.parse().map_err(|_| CoreError::parse("report", "bad inkm_mean"))?,
                "inkm_undefined" => {}
                other => return Err(CoreError::parse("report", format!("unknown key `{other}`"))),
            }
        } else {
            let mut seed = 0u64;
            let mut rc = 0.0;
            let mut inkm = None;
            let mut term = String::new();
            for field in line.split_whitespace() {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| CoreError::parse("report", format!("bad field `{field}`")))?;
                match k {
                    "seed" => seed = v.parse().map_err(|_| CoreError::parse("report", "bad seed"))?,
                    "rc" => rc = v.parse().map_err(|_| CoreError::parse("report", "bad rc"))?,
                    "inkm" if v != "null" => {
                        inkm = Some(v.parse().map_err(|_| CoreError::parse("report", "bad inkm"))?)
                    }
                    "termination" => term = v.into(),
                    _ => {}
                }
            }
            rep.rows.push((seed, rc, inkm, term));
        }
    }
    Ok(rep)
}

/// Comparison table across combinations (rows in canonical combination
/// order, columns route completion and infractions per km). Refuses to mix
/// artifacts with different frame sizes or embedding widths.
pub fn comparison_table(reports: &[SavedReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(CoreError::validation("no benchmark reports to compare"));
    }
    let (f0, d0) = (reports[0].frame_side, reports[0].embed_dim);
    for r in reports {
        if r.frame_side != f0 || r.embed_dim != d0 {
            return Err(CoreError::validation(format!(
                "refusing to compare incompatible artifacts: {}x{} D={} vs {}x{} D={}",
                f0, f0, d0, r.frame_side, r.frame_side, r.embed_dim
            )));
        }
    }
    let mut out = String::new();
    out.push_str(&format!("Benchmark comparison on {} ({} episodes each)\n", reports[0].map, reports[0].episodes));
    out.push_str(&format!(
        "{:<14} {:>22} {:>24}\n",
        "Model", "Route Completion (%)", "No. of Infractions/Km"
    ));
    // Canonical row order.
    for combo in Combination::ALL {
        for r in reports.iter().filter(|r| r.combination == combo.name()) {
            out.push_str(&format!(
                "{:<14} {:>22.2} {:>24.2}\n",
                r.combination, r.rc_mean, r.inkm_mean
            ));
        }
    }
    Ok(out)
}

/// Machine-readable comparison.
pub fn comparison_text(reports: &[SavedReport]) -> Result<String> {
    comparison_table(reports)?; // runs compatibility checks
    let mut out = String::new();
    out.push_str(&format!("format_version {}\n", crate::FORMAT_VERSION));
    out.push_str("[rows]\n");
    for combo in Combination::ALL {
        for r in reports.iter().filter(|r| r.combination == combo.name()) {
            out.push_str(&format!(
                "combination={} rc_mean={:.6} inkm_mean={:.6} episodes={}\n",
                r.combination, r.rc_mean, r.inkm_mean, r.episodes
            ));
        }
    }
    Ok(out)
}
