//! On-disk dataset format.
//!
//! One directory per episode. Frames are raw little-endian f32 with a
//! plain-text sidecar shape header; class maps are raw u8 with the same
//! sidecar scheme; per-step scalars and labels are newline-delimited
//! `key=value` text. A root manifest lists the episodes and the recording
//! parameters. Everything carries a format_version.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::simworld::{ControlSignal, Frame, RoutingCommand, SensorRecord};

use super::{StepRecord, WaypointPair};

#[derive(Debug, Clone)]
pub struct EpisodeMeta {
    pub dir: String,
    pub steps: usize,
    pub map: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub dt: f64,
    pub frame_h: usize,
    pub frame_w: usize,
    pub seed: u64,
    pub maps: Vec<String>,
    pub total_steps: usize,
    pub episodes: Vec<EpisodeMeta>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("format_version {}\n", crate::FORMAT_VERSION));
        let hash = if self.config_hash.is_empty() { "-" } else { &self.config_hash };
        out.push_str(&format!("config_hash {hash}\n"));
        out.push_str(&format!("dt {}\n", self.dt));
        out.push_str(&format!("frame_h {}\n", self.frame_h));
        out.push_str(&format!("frame_w {}\n", self.frame_w));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("maps {}\n", self.maps.join(",")));
        out.push_str(&format!("total_steps {}\n", self.total_steps));
        out.push_str("[episodes]\n");
        for e in &self.episodes {
            out.push_str(&format!("{} steps={} map={} seed={}\n", e.dir, e.steps, e.map, e.seed));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = DatasetManifest {
            config_hash: String::new(),
            dt: 0.0,
            frame_h: 0,
            frame_w: 0,
            seed: 0,
            maps: Vec::new(),
            total_steps: 0,
            episodes: Vec::new(),
        };
        let mut in_eps = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "[episodes]" {
                in_eps = true;
                continue;
            }
            if !in_eps {
                let (k, v) = line
                    .split_once(' ')
                    .ok_or_else(|| CoreError::parse("manifest", format!("bad line `{line}`")))?;
                match k {
                    "format_version" => {
                        let ver: u32 = v.parse().map_err(|_| CoreError::parse("manifest", "bad version"))?;
                        if ver != crate::FORMAT_VERSION {
                            return Err(CoreError::parse("manifest", format!("unsupported version {ver}")));
                        }
                    }
                    "config_hash" => m.config_hash = if v == "-" { String::new() } else { v.to_string() },
                    "dt" => m.dt = v.parse().map_err(|_| CoreError::parse("manifest", "bad dt"))?,
                    "frame_h" => m.frame_h = v.parse().map_err(|_| CoreError::parse("manifest", "bad frame_h"))?,
                    "frame_w" => m.frame_w = v.parse().map_err(|_| CoreError::parse("manifest", "bad frame_w"))?,
                    "seed" => m.seed = v.parse().map_err(|_| CoreError::parse("manifest", "bad seed"))?,
                    "maps" => m.maps = v.split(',').map(str::to_string).collect(),
                    "total_steps" => {
                        m.total_steps =
                            v.parse().map_err(|_| CoreError::parse("manifest", "bad total_steps"))?
                    }
                    other => return Err(CoreError::parse("manifest", format!("unknown key `{other}`"))),
                }
            } else {
                let mut fields = line.split_whitespace();
                let dir = fields
                    .next()
                    .ok_or_else(|| CoreError::parse("manifest", "empty episode line"))?
                    .to_string();
                let mut steps = 0;
                let mut map = String::new();
                let mut seed = 0;
                for f in fields {
                    let (k, v) = f
                        .split_once('=')
                        .ok_or_else(|| CoreError::parse("manifest", format!("bad field `{f}`")))?;
                    match k {
                        "steps" => steps = v.parse().map_err(|_| CoreError::parse("manifest", "bad steps"))?,
                        "map" => map = v.to_string(),
                        "seed" => seed = v.parse().map_err(|_| CoreError::parse("manifest", "bad seed"))?,
                        other => {
                            return Err(CoreError::parse("manifest", format!("unknown episode field `{other}`")))
                        }
                    }
                }
                m.episodes.push(EpisodeMeta { dir, steps, map, seed });
            }
        }
        Ok(m)
    }
}

/// Write a raw array with its sidecar shape header.
fn write_array(path: &Path, bytes: &[u8], dims: &[usize], dtype: &str) -> Result<()> {
    fs::write(path, bytes)?;
    let sidecar = path.with_extension(format!(
        "{}.shape",
        path.extension().and_then(|e| e.to_str()).unwrap_or("bin")
    ));
    let mut f = fs::File::create(sidecar)?;
    writeln!(f, "format_version {}", crate::FORMAT_VERSION)?;
    writeln!(f, "dtype {dtype}")?;
    writeln!(f, "dims {}", dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "))?;
    Ok(())
}

fn read_sidecar(path: &Path, want_dtype: &str) -> Result<Vec<usize>> {
    let sidecar = path.with_extension(format!(
        "{}.shape",
        path.extension().and_then(|e| e.to_str()).unwrap_or("bin")
    ));
    let text = fs::read_to_string(&sidecar)
        .map_err(|e| CoreError::parse("sidecar", format!("{}: {e}", sidecar.display())))?;
    let mut dims = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("dims ") {
            dims = rest
                .split_whitespace()
                .map(|d| d.parse().map_err(|_| CoreError::parse("sidecar", "bad dim")))
                .collect::<Result<_>>()?;
        } else if let Some(d) = line.strip_prefix("dtype ") {
            if d != want_dtype {
                return Err(CoreError::parse("sidecar", format!("dtype {d}, expected {want_dtype}")));
            }
        }
    }
    if dims.is_empty() {
        return Err(CoreError::parse("sidecar", "missing dims"));
    }
    Ok(dims)
}

pub(super) struct EpisodeWriter {
    dir: PathBuf,
    frames: Vec<f32>,
    segs: Vec<u8>,
    records: Vec<StepRecord>,
    h: usize,
    w: usize,
}

impl EpisodeWriter {
    pub fn new(dir: PathBuf, h: usize, w: usize) -> Self {
        EpisodeWriter { dir, frames: Vec::new(), segs: Vec::new(), records: Vec::new(), h, w }
    }

    pub fn push(&mut self, frame: &Frame, seg: &[u8], record: StepRecord) {
        debug_assert_eq!(frame.data.len(), self.h * self.w);
        self.frames.extend_from_slice(&frame.data);
        self.segs.extend_from_slice(seg);
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn finalize(self) -> Result<usize> {
        fs::create_dir_all(&self.dir)?;
        let n = self.records.len();
        let mut bytes = Vec::with_capacity(self.frames.len() * 4);
        for v in &self.frames {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_array(&self.dir.join("frames.f32"), &bytes, &[n, self.h, self.w], "f32le")?;
        write_array(&self.dir.join("seg.u8"), &self.segs, &[n, self.h, self.w], "u8")?;

        let mut text = String::new();
        text.push_str(&format!("format_version {}\n", crate::FORMAT_VERSION));
        for (i, r) in self.records.iter().enumerate() {
            text.push_str(&format_record(i, r));
            text.push('\n');
        }
        fs::write(self.dir.join("records.txt"), text)?;
        Ok(n)
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn format_record(i: usize, r: &StepRecord) -> String {
    let wp = match &r.waypoints {
        Some(w) => format!(
            "wp=1 wnx={} wny={} wfx={} wfy={}",
            fmt_f(w.near.x),
            fmt_f(w.near.y),
            fmt_f(w.far.x),
            fmt_f(w.far.y)
        ),
        None => "wp=0".to_string(),
    };
    format!(
        "t={i} time={} x={} y={} heading={} speed={} steering={} yaw_rate={} \
         ex_steer={} ex_throttle={} ex_brake={} cmd={} dist={} dist_class={} light={} {wp}",
        fmt_f(r.timestamp),
        fmt_f(r.ego_pose.0),
        fmt_f(r.ego_pose.1),
        fmt_f(r.ego_pose.2),
        fmt_f(r.sensors.speed),
        fmt_f(r.sensors.steering),
        fmt_f(r.sensors.yaw_rate),
        fmt_f(r.expert_control.steer),
        fmt_f(r.expert_control.throttle),
        fmt_f(r.expert_control.brake),
        r.routing_command.name(),
        fmt_f(r.distance_to_front),
        r.distance_class,
        r.light_state,
    )
}

fn parse_f(v: &str) -> Result<f64> {
    if v == "inf" {
        return Ok(f64::INFINITY);
    }
    v.parse().map_err(|_| CoreError::parse("records", format!("bad float `{v}`")))
}

pub(super) fn parse_records(text: &str) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("format_version") {
            continue;
        }
        let mut kv = std::collections::HashMap::new();
        for f in line.split_whitespace() {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| CoreError::parse("records", format!("bad field `{f}`")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k).copied().ok_or_else(|| CoreError::parse("records", format!("missing `{k}`")))
        };
        let waypoints = if get("wp")? == "1" {
            Some(WaypointPair {
                near: crate::geometry::Vec2::new(parse_f(get("wnx")?)?, parse_f(get("wny")?)?),
                far: crate::geometry::Vec2::new(parse_f(get("wfx")?)?, parse_f(get("wfy")?)?),
            })
        } else {
            None
        };
        let cmd = match get("cmd")? {
            "follow" => RoutingCommand::Follow,
            "straight" => RoutingCommand::Straight,
            "left" => RoutingCommand::Left,
            "right" => RoutingCommand::Right,
            other => return Err(CoreError::parse("records", format!("unknown command `{other}`"))),
        };
        out.push(StepRecord {
            timestamp: parse_f(get("time")?)?,
            ego_pose: (parse_f(get("x")?)?, parse_f(get("y")?)?, parse_f(get("heading")?)?),
            sensors: SensorRecord {
                speed: parse_f(get("speed")?)?,
                steering: parse_f(get("steering")?)?,
                yaw_rate: parse_f(get("yaw_rate")?)?,
            },
            expert_control: ControlSignal {
                steer: parse_f(get("ex_steer")?)?,
                throttle: parse_f(get("ex_throttle")?)?,
                brake: parse_f(get("ex_brake")?)?,
            },
            routing_command: cmd,
            distance_to_front: parse_f(get("dist")?)?,
            light_state: get("light")?
                .parse()
                .map_err(|_| CoreError::parse("records", "bad light"))?,
            waypoints,
            distance_class: get("dist_class")?
                .parse()
                .map_err(|_| CoreError::parse("records", "bad dist_class"))?,
        });
    }
    Ok(out)
}

pub(super) fn read_frames(dir: &Path, h: usize, w: usize) -> Result<(usize, Vec<f32>)> {
    let path = dir.join("frames.f32");
    let dims = read_sidecar(&path, "f32le")?;
    if dims.len() != 3 || dims[1] != h || dims[2] != w {
        return Err(CoreError::parse("frames", format!("unexpected dims {dims:?}")));
    }
    let bytes = fs::read(&path)?;
    if bytes.len() != dims.iter().product::<usize>() * 4 {
        return Err(CoreError::parse("frames", "size mismatch with sidecar"));
    }
    let mut data = Vec::with_capacity(bytes.len() / 4);
    for c in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    }
    Ok((dims[0], data))
}

pub(super) fn read_segs(dir: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let path = dir.join("seg.u8");
    let dims = read_sidecar(&path, "u8")?;
    if dims.len() != 3 || dims[1] != h || dims[2] != w {
        return Err(CoreError::parse("seg", format!("unexpected dims {dims:?}")));
    }
    let bytes = fs::read(&path)?;
    if bytes.len() != dims.iter().product::<usize>() {
        return Err(CoreError::parse("seg", "size mismatch with sidecar"));
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = DatasetManifest {
            config_hash: "abc123".into(),
            dt: 0.1,
            frame_h: 64,
            frame_w: 64,
            seed: 7,
            maps: vec!["train-town".into()],
            total_steps: 100,
            episodes: vec![EpisodeMeta { dir: "ep_00000".into(), steps: 100, map: "train-town".into(), seed: 9 }],
        };
        let m2 = DatasetManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(m2.config_hash, m.config_hash);
        assert_eq!(m2.episodes.len(), 1);
        assert_eq!(m2.episodes[0].steps, 100);
    }

    #[test]
    fn record_line_round_trip() {
        let r = StepRecord {
            timestamp: 1.5,
            ego_pose: (3.0, -2.0, 0.7),
            sensors: SensorRecord { speed: 5.0, steering: -0.2, yaw_rate: 0.1 },
            expert_control: ControlSignal::new(-0.2, 0.4, 0.0),
            routing_command: RoutingCommand::Left,
            distance_to_front: f64::INFINITY,
            light_state: 1,
            waypoints: Some(WaypointPair {
                near: crate::geometry::Vec2::new(-0.5, 4.9),
                far: crate::geometry::Vec2::new(-2.0, 9.5),
            }),
            distance_class: 4,
        };
        let line = format_record(0, &r);
        let parsed = parse_records(&line).unwrap();
        assert_eq!(parsed.len(), 1);
        let p = &parsed[0];
        assert_eq!(p.routing_command, RoutingCommand::Left);
        assert!(p.distance_to_front.is_infinite());
        assert!((p.waypoints.unwrap().far.x + 2.0).abs() < 1e-6);
    }
}
