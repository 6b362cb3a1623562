//! In-memory dataset access and seeded batch serving.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::rng::{self, DetRng};
use crate::simworld::{Augment, RoutingCommand};
use crate::tensor::Tensor;

use super::store::{parse_records, read_frames, read_segs, DatasetManifest, EpisodeMeta};
use super::StepRecord;

pub struct LoadedEpisode {
    pub meta: EpisodeMeta,
    pub frames: Vec<f32>,
    pub segs: Vec<u8>,
    pub records: Vec<StepRecord>,
}

pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<LoadedEpisode>,
    pub h: usize,
    pub w: usize,
}

/// Anchor of one training sample: episode index plus time index of the
/// newest input frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleIndex {
    pub ep: usize,
    pub t: usize,
}

/// What a sample must provide; controls anchor validity.
#[derive(Debug, Clone, Copy)]
pub struct SampleNeeds {
    /// Frames t-depth+1 ..= t.
    pub stack_depth: usize,
    /// Frame/sensor sequence of this length ending at t.
    pub seq_len: usize,
    /// Frame and sensors at t+1 (next-frame prediction target).
    pub next_frame: bool,
    /// Waypoint labels at t.
    pub waypoints: bool,
}

impl LoadedDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.txt");
        if !manifest_path.exists() {
            return Err(CoreError::MissingArtifact {
                artifact: manifest_path.display().to_string(),
                stage: "gen-data".into(),
            });
        }
        let manifest = DatasetManifest::from_text(&std::fs::read_to_string(&manifest_path)?)?;
        let (h, w) = (manifest.frame_h, manifest.frame_w);
        let mut episodes = Vec::with_capacity(manifest.episodes.len());
        for meta in &manifest.episodes {
            let dir = root.join(&meta.dir);
            let (n, frames) = read_frames(&dir, h, w)?;
            let segs = read_segs(&dir, h, w)?;
            let records = parse_records(&std::fs::read_to_string(dir.join("records.txt"))?)?;
            if n != records.len() {
                return Err(CoreError::parse(
                    "dataset",
                    format!("{}: {} frames but {} records", meta.dir, n, records.len()),
                ));
            }
            episodes.push(LoadedEpisode { meta: meta.clone(), frames, segs, records });
        }
        Ok(LoadedDataset { manifest, episodes, h, w })
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.records.len()).sum()
    }

    /// All anchors satisfying `needs`, in deterministic (episode, time) order.
    pub fn sample_indices(&self, needs: &SampleNeeds) -> Vec<SampleIndex> {
        let past = needs.stack_depth.max(needs.seq_len).max(1) - 1;
        let mut out = Vec::new();
        for (ep, e) in self.episodes.iter().enumerate() {
            let len = e.records.len();
            for t in past..len {
                if needs.next_frame && t + 1 >= len {
                    continue;
                }
                if needs.waypoints && e.records[t].waypoints.is_none() {
                    continue;
                }
                out.push(SampleIndex { ep, t });
            }
        }
        out
    }

    /// Split anchors by episode so validation never shares an episode with
    /// training. `val_frac` of episodes (at least one) go to validation.
    pub fn split_by_episode(
        &self,
        indices: Vec<SampleIndex>,
        val_frac: f64,
    ) -> (Vec<SampleIndex>, Vec<SampleIndex>) {
        let n_eps = self.episodes.len();
        let n_val = ((n_eps as f64 * val_frac).round() as usize).clamp(1, n_eps.saturating_sub(1).max(1));
        let val_start = n_eps - n_val;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for idx in indices {
            if idx.ep >= val_start {
                val.push(idx);
            } else {
                train.push(idx);
            }
        }
        (train, val)
    }

    fn frame_slice(&self, ep: usize, t: usize) -> &[f32] {
        let hw = self.h * self.w;
        &self.episodes[ep].frames[t * hw..(t + 1) * hw]
    }

    /// Stacked consecutive frames ending at t: (batch, depth, h, w).
    pub fn stack_batch(
        &self,
        idx: &[SampleIndex],
        depth: usize,
        augment: Option<(&mut DetRng, bool)>,
    ) -> Tensor {
        let hw = self.h * self.w;
        let mut data = Vec::with_capacity(idx.len() * depth * hw);
        let augments = self.sample_augments(idx.len(), augment);
        for (bi, s) in idx.iter().enumerate() {
            for d in 0..depth {
                let t = s.t + 1 + d - depth;
                let src = self.frame_slice(s.ep, t);
                push_frame(&mut data, src, augments.get(bi).copied());
            }
        }
        Tensor::new(&[idx.len(), depth, self.h, self.w], data)
    }

    /// Frame sequence of length n ending at t, plus the next frame as the
    /// prediction target: (inputs[n], sensors[n], target_frame,
    /// target_sensors).
    #[allow(clippy::type_complexity)]
    pub fn sequence_batch(
        &self,
        idx: &[SampleIndex],
        n: usize,
        augment: Option<(&mut DetRng, bool)>,
    ) -> (Vec<Tensor>, Vec<Tensor>, Tensor, Tensor) {
        let hw = self.h * self.w;
        let b = idx.len();
        let augments = self.sample_augments(b, augment);
        let mut inputs = Vec::with_capacity(n);
        let mut sensors = Vec::with_capacity(n);
        for k in 0..n {
            let mut fdata = Vec::with_capacity(b * hw);
            let mut sdata = Vec::with_capacity(b * 3);
            for (bi, s) in idx.iter().enumerate() {
                let t = s.t + 1 + k - n;
                push_frame(&mut fdata, self.frame_slice(s.ep, t), augments.get(bi).copied());
                sdata.extend_from_slice(&self.episodes[s.ep].records[t].sensors.to_vec());
            }
            inputs.push(Tensor::new(&[b, 1, self.h, self.w], fdata));
            sensors.push(Tensor::new(&[b, 3], sdata));
        }
        let mut tdata = Vec::with_capacity(b * hw);
        let mut tsdata = Vec::with_capacity(b * 3);
        for (bi, s) in idx.iter().enumerate() {
            push_frame(&mut tdata, self.frame_slice(s.ep, s.t + 1), augments.get(bi).copied());
            tsdata.extend_from_slice(&self.episodes[s.ep].records[s.t + 1].sensors.to_vec());
        }
        (
            inputs,
            sensors,
            Tensor::new(&[b, 1, self.h, self.w], tdata),
            Tensor::new(&[b, 3], tsdata),
        )
    }

    fn sample_augments(&self, n: usize, augment: Option<(&mut DetRng, bool)>) -> Vec<(Augment, u64)> {
        match augment {
            None => Vec::new(),
            Some((rng, heldout)) => (0..n)
                .map(|_| {
                    let a = if heldout {
                        Augment::sample_heldout(rng)
                    } else {
                        Augment::sample_train(rng)
                    };
                    let noise_seed: u64 = rand::Rng::gen(rng);
                    (a, noise_seed)
                })
                .collect(),
        }
    }

    pub fn seg_targets(&self, idx: &[SampleIndex]) -> Vec<u32> {
        let hw = self.h * self.w;
        let mut out = Vec::with_capacity(idx.len() * hw);
        for s in idx {
            out.extend(self.episodes[s.ep].segs[s.t * hw..(s.t + 1) * hw].iter().map(|&c| c as u32));
        }
        out
    }

    pub fn distance_targets(&self, idx: &[SampleIndex]) -> Vec<u32> {
        idx.iter().map(|s| self.episodes[s.ep].records[s.t].distance_class).collect()
    }

    pub fn light_targets(&self, idx: &[SampleIndex]) -> Vec<f64> {
        idx.iter().map(|s| self.episodes[s.ep].records[s.t].light_state as f64).collect()
    }

    pub fn commands(&self, idx: &[SampleIndex]) -> Vec<RoutingCommand> {
        idx.iter().map(|s| self.episodes[s.ep].records[s.t].routing_command).collect()
    }

    /// Waypoint targets (batch, 4): near_x, near_y, far_x, far_y.
    pub fn waypoint_targets(&self, idx: &[SampleIndex]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * 4);
        for s in idx {
            let wp = self.episodes[s.ep].records[s.t]
                .waypoints
                .expect("anchor filtered for waypoint availability");
            data.extend_from_slice(&[wp.near.x, wp.near.y, wp.far.x, wp.far.y]);
        }
        Tensor::new(&[idx.len(), 4], data)
    }

    pub fn record(&self, s: SampleIndex) -> &StepRecord {
        &self.episodes[s.ep].records[s.t]
    }

    /// Histogram over distance classes across every record.
    pub fn distance_class_histogram(&self) -> [usize; super::NUM_DISTANCE_CLASSES] {
        let mut h = [0usize; super::NUM_DISTANCE_CLASSES];
        for e in &self.episodes {
            for r in &e.records {
                h[r.distance_class as usize] += 1;
            }
        }
        h
    }
}

fn push_frame(out: &mut Vec<f64>, src: &[f32], augment: Option<(Augment, u64)>) {
    match augment {
        None => out.extend(src.iter().map(|&v| v as f64)),
        Some((a, noise_seed)) => {
            let mut nrng = rng::seeded(noise_seed);
            for &v in src {
                let noise =
                    if a.noise_sigma > 0.0 { rng::normal(&mut nrng) * a.noise_sigma } else { 0.0 };
                out.push((v as f64 + a.brightness + noise).clamp(0.0, 1.0));
            }
        }
    }
}

/// Seeded shuffled mini-batch iterator; identical seed yields identical
/// batch order.
pub struct BatchIter {
    order: Vec<SampleIndex>,
    batch: usize,
    pos: usize,
}

impl BatchIter {
    pub fn new(mut indices: Vec<SampleIndex>, batch: usize, seed: u64) -> Self {
        assert!(batch > 0);
        let mut rng = rng::substream(seed, "batch-shuffle");
        // Fisher-Yates.
        for i in (1..indices.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            indices.swap(i, j);
        }
        BatchIter { order: indices, batch, pos: 0 }
    }

    /// Next batch, rewrapping at the end of an epoch (never returns an
    /// empty slice for a non-empty index set).
    pub fn next_batch(&mut self) -> &[SampleIndex] {
        if self.order.is_empty() {
            return &[];
        }
        if self.pos + self.batch > self.order.len() {
            self.pos = 0;
        }
        let s = &self.order[self.pos..(self.pos + self.batch).min(self.order.len())];
        self.pos += self.batch;
        s
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::super::recorder::{record_dataset, RecorderConfig};
    use super::*;
    use crate::simworld::WorldParams;

    fn tiny_dataset() -> (tempfile::TempDir, LoadedDataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RecorderConfig {
            n_steps: 260,
            world: WorldParams { npc_vehicles: 3, pedestrians: 2 },
            ..Default::default()
        };
        record_dataset(&["train-town".into()], &cfg, 21, dir.path()).unwrap();
        let ds = LoadedDataset::open(dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn load_and_index() {
        let (_dir, ds) = tiny_dataset();
        assert!(ds.total_steps() >= 260);
        let needs = SampleNeeds { stack_depth: 3, seq_len: 5, next_frame: true, waypoints: true };
        let idx = ds.sample_indices(&needs);
        assert!(!idx.is_empty());
        // Stack is the suffix of the sequence when both are requested.
        let s = idx[0];
        let stack = ds.stack_batch(&[s], 3, None);
        let (seq, _, _, _) = ds.sequence_batch(&[s], 5, None);
        let hw = ds.h * ds.w;
        for k in 0..3 {
            let from_stack = &stack.data()[k * hw..(k + 1) * hw];
            let from_seq = seq[2 + k].data();
            assert_eq!(from_stack, &from_seq[..hw]);
        }
    }

    #[test]
    fn label_audit_distance_recompute() {
        let (_dir, ds) = tiny_dataset();
        for e in &ds.episodes {
            for r in &e.records {
                assert_eq!(
                    r.distance_class,
                    super::super::distance_to_class(r.distance_to_front).unwrap()
                );
            }
        }
    }

    #[test]
    fn fixed_shuffle_seed_reproduces_batches() {
        let (_dir, ds) = tiny_dataset();
        let needs = SampleNeeds { stack_depth: 3, seq_len: 1, next_frame: false, waypoints: false };
        let idx = ds.sample_indices(&needs);
        let mut a = BatchIter::new(idx.clone(), 8, 3);
        let mut b = BatchIter::new(idx, 8, 3);
        for _ in 0..5 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn split_keeps_episodes_apart() {
        let (_dir, ds) = tiny_dataset();
        let needs = SampleNeeds { stack_depth: 1, seq_len: 1, next_frame: false, waypoints: false };
        let idx = ds.sample_indices(&needs);
        let (train, val) = ds.split_by_episode(idx, 0.25);
        assert!(!val.is_empty());
        if !train.is_empty() {
            let train_eps: std::collections::HashSet<_> = train.iter().map(|s| s.ep).collect();
            let val_eps: std::collections::HashSet<_> = val.iter().map(|s| s.ep).collect();
            assert!(train_eps.is_disjoint(&val_eps));
        }
    }
}
