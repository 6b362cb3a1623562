//! The assembled driving agent: behavior-reflex encoder plus fusion plus
//! action network (trainable together), with optional frozen world-model
//! and direct-perception networks supplying their embeddings.

use std::collections::HashMap;
use std::path::Path;

use crate::action::{ActionNetwork, ApnConfig};
use crate::autodiff::Var;
use crate::checkpoint::Checkpoint;
use crate::dataset::{BatchIter, LoadedDataset, SampleIndex, SampleNeeds, WaypointPair};
use crate::error::{CoreError, Result};
use crate::fusion::{Combination, Fusion, MergeMethod, Role};
use crate::nn::{Adam, ParamSet, Session};
use crate::perception::{Brn, BrnConfig, Dpn, Mpn};
use crate::rng;
use crate::simworld::RoutingCommand;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub combination: Combination,
    pub merge: MergeMethod,
    pub embed_dim: usize,
    pub brn: BrnConfig,
    pub apn: ApnConfig,
    /// World-model sequence length (frames fed to the recurrence).
    pub seq_len: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            combination: Combination::DpnBrnMpn,
            merge: MergeMethod::ConvUnconstrained,
            embed_dim: crate::fusion::EMBED_DIM,
            brn: BrnConfig::default(),
            apn: ApnConfig::default(),
            seq_len: 5,
        }
    }
}

/// Frozen embeddings of one sample, canonical-order subset.
#[derive(Debug, Clone)]
pub struct FrozenSample {
    pub current_latent: Option<Tensor>,
    pub predicted_latent: Option<Tensor>,
    pub affordance: Option<Tensor>,
}

/// Precomputed frozen-network embeddings, shared across agent trainings on
/// the same dataset and checkpoints.
pub struct FrozenFeatures {
    map: HashMap<(usize, usize), FrozenSample>,
}

impl FrozenFeatures {
    /// Run the frozen networks over every anchor once, in small batches.
    pub fn precompute(
        data: &LoadedDataset,
        anchors: &[SampleIndex],
        mpn: Option<&mut Mpn>,
        dpn: Option<&mut Dpn>,
        seq_len: usize,
        stack_depth: usize,
    ) -> Result<Self> {
        let mut map: HashMap<(usize, usize), FrozenSample> = anchors
            .iter()
            .map(|s| {
                ((s.ep, s.t), FrozenSample {
                    current_latent: None,
                    predicted_latent: None,
                    affordance: None,
                })
            })
            .collect();
        let unique: Vec<SampleIndex> = {
            let mut seen = std::collections::HashSet::new();
            anchors.iter().copied().filter(|s| seen.insert((s.ep, s.t))).collect()
        };
        if let Some(mpn) = mpn {
            for chunk in unique.chunks(16) {
                let (frames, sensors, _, _) = data.sequence_batch(chunk, seq_len, None);
                let (current, predicted, _) = mpn.predict_next(&frames, &sensors)?;
                let d = mpn.cfg.latent_dim;
                for (i, s) in chunk.iter().enumerate() {
                    let entry = map.get_mut(&(s.ep, s.t)).unwrap();
                    entry.current_latent = Some(slice_row(&current, i, d));
                    entry.predicted_latent = Some(slice_row(&predicted, i, d));
                }
            }
        }
        if let Some(dpn) = dpn {
            for chunk in unique.chunks(16) {
                let stack = data.stack_batch(chunk, stack_depth, None);
                let delta = dpn.embed(&stack);
                let d = dpn.cfg.latent_dim;
                for (i, s) in chunk.iter().enumerate() {
                    map.get_mut(&(s.ep, s.t)).unwrap().affordance = Some(slice_row(&delta, i, d));
                }
            }
        }
        Ok(FrozenFeatures { map })
    }

    pub fn get(&self, s: SampleIndex) -> Option<&FrozenSample> {
        self.map.get(&(s.ep, s.t))
    }

    /// Batch tensor of one role over the given anchors.
    fn role_batch(&self, idx: &[SampleIndex], role: Role, dim: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * dim);
        for s in idx {
            let fs = self
                .get(*s)
                .ok_or_else(|| CoreError::validation("missing precomputed features for anchor"))?;
            let t = match role {
                Role::CurrentLatent => fs.current_latent.as_ref(),
                Role::PredictedLatent => fs.predicted_latent.as_ref(),
                Role::Affordance => fs.affordance.as_ref(),
                Role::Reflex => None,
            }
            .ok_or_else(|| CoreError::validation(format!("role {:?} not precomputed", role)))?;
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::new(&[idx.len(), dim], data))
    }
}

fn slice_row(t: &Tensor, row: usize, dim: usize) -> Tensor {
    Tensor::new(&[1, dim], t.data()[row * dim..(row + 1) * dim].to_vec())
}

pub struct Agent {
    pub cfg: AgentConfig,
    /// Trainable parameters: behavior reflex + fusion + action branches.
    pub params: ParamSet,
    brn: Brn,
    fusion: Fusion,
    apn: ActionNetwork,
    /// Frozen perception networks (present per the combination).
    pub mpn: Option<Mpn>,
    pub dpn: Option<Dpn>,
    /// File hashes of the frozen checkpoints this agent was trained
    /// against.
    pub mpn_ckpt_hash: Option<String>,
    pub dpn_ckpt_hash: Option<String>,
}

impl Agent {
    pub fn new(cfg: AgentConfig, seed: u64, mpn: Option<Mpn>, dpn: Option<Dpn>) -> Result<Self> {
        if cfg.combination.uses_mpn() && mpn.is_none() {
            return Err(CoreError::validation(format!(
                "combination {} requires a world-model checkpoint",
                cfg.combination.name()
            )));
        }
        if cfg.combination.uses_dpn() && dpn.is_none() {
            return Err(CoreError::validation(format!(
                "combination {} requires a direct-perception checkpoint",
                cfg.combination.name()
            )));
        }
        let mut params = ParamSet::new();
        let mut r = rng::substream(seed, "agent-init");
        let brn = Brn::new(&mut params, &mut r, cfg.brn.clone());
        let fusion = Fusion::new(
            &mut params,
            &mut r,
            cfg.merge,
            cfg.combination.roles(),
            cfg.embed_dim,
        );
        let apn = ActionNetwork::new(&mut params, &mut r, cfg.apn.clone());
        Ok(Agent {
            cfg,
            params,
            brn,
            fusion,
            apn,
            mpn,
            dpn,
            mpn_ckpt_hash: None,
            dpn_ckpt_hash: None,
        })
    }

    pub fn roles(&self) -> Vec<Role> {
        self.cfg.combination.roles()
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    /// Set the unconstrained fusion kernel directly (attribution fixtures).
    pub fn set_fusion_kernel(&mut self, weights: &[f64]) -> Result<()> {
        self.fusion.set_conv_kernel(&mut self.params, weights)
    }

    pub fn param_hash(&self) -> String {
        crate::checkpoint::hex(&self.params.content_hash())
    }

    /// Behavior-reflex embedding of a frame stack (eval mode, frozen
    /// running statistics).
    pub fn reflex_embedding(&mut self, stack: &Tensor) -> Tensor {
        let brn = &self.brn;
        let mut s = Session::eval(&mut self.params);
        let x = s.input(stack.clone());
        let e = brn.embed(&mut s, x);
        s.tape.value(e).clone()
    }

    /// Compute the embedding set for one observation window, canonical
    /// order. `stack` is (1, stack_depth, side, side); the sequences are
    /// only consulted when the combination includes the world model.
    pub fn embeddings(
        &mut self,
        stack: &Tensor,
        frames_seq: &[Tensor],
        sensors_seq: &[Tensor],
    ) -> Result<Vec<(Role, Tensor)>> {
        let mut out = Vec::new();
        if self.cfg.combination.uses_mpn() {
            let mpn = self.mpn.as_mut().expect("checked at construction");
            let (current, predicted, _) = mpn.predict_next(frames_seq, sensors_seq)?;
            out.push((Role::CurrentLatent, current));
            out.push((Role::PredictedLatent, predicted));
        }
        // Behavior reflex (always present).
        let eta = {
            let brn = &self.brn;
            let mut s = Session::eval(&mut self.params);
            let x = s.input(stack.clone());
            let e = brn.embed(&mut s, x);
            s.tape.value(e).clone()
        };
        out.push((Role::Reflex, eta));
        if self.cfg.combination.uses_dpn() {
            let dpn = self.dpn.as_mut().expect("checked at construction");
            out.push((Role::Affordance, dpn.embed(stack)));
        }
        debug_assert_eq!(
            out.iter().map(|(r, _)| *r).collect::<Vec<_>>(),
            self.roles(),
            "embedding roles must follow canonical order"
        );
        Ok(out)
    }

    /// Fuse an embedding set and predict waypoints for one command.
    /// `ablate` replaces that role's embedding with zeros before fusion.
    pub fn waypoints_from_embeddings(
        &mut self,
        embeddings: &[(Role, Tensor)],
        command: RoutingCommand,
        ablate: Option<Role>,
    ) -> Result<WaypointPair> {
        let roles = self.roles();
        if embeddings.len() != roles.len() {
            return Err(CoreError::validation(format!(
                "expected {} embeddings, got {}",
                roles.len(),
                embeddings.len()
            )));
        }
        if let Some(r) = ablate {
            if !roles.contains(&r) {
                return Err(CoreError::validation(format!(
                    "role {:?} not part of combination {}",
                    r,
                    self.cfg.combination.name()
                )));
            }
        }
        let fusion = &self.fusion;
        let apn = &self.apn;
        let mut s = Session::eval(&mut self.params);
        let vars: Vec<Var> = embeddings
            .iter()
            .map(|(role, t)| {
                let tensor = if ablate == Some(*role) { Tensor::zeros(t.shape()) } else { t.clone() };
                s.input(tensor)
            })
            .collect();
        let alpha = fusion.forward(&mut s, &vars);
        let wp = apn.waypoints_for(&mut s, alpha, command);
        let v = s.tape.value(wp).data();
        Ok(WaypointPair {
            near: crate::geometry::Vec2::new(v[0], v[1]),
            far: crate::geometry::Vec2::new(v[2], v[3]),
        })
    }

    /// Full pipeline for one observation window.
    pub fn predict(
        &mut self,
        stack: &Tensor,
        frames_seq: &[Tensor],
        sensors_seq: &[Tensor],
        command: RoutingCommand,
    ) -> Result<WaypointPair> {
        let embeds = self.embeddings(stack, frames_seq, sensors_seq)?;
        self.waypoints_from_embeddings(&embeds, command, None)
    }

    // -- persistence ---------------------------------------------------------

    pub fn save(&self, path: &Path, extra_meta: &[(String, String)]) -> Result<()> {
        let mut c = Checkpoint::new("agent");
        c.set_meta("combination", self.cfg.combination.name());
        c.set_meta("merge", self.cfg.merge.name());
        c.set_meta("embed_dim", self.cfg.embed_dim.to_string());
        c.set_meta("seq_len", self.cfg.seq_len.to_string());
        c.set_meta("brn_frame_side", self.cfg.brn.frame_side.to_string());
        c.set_meta("brn_stack_depth", self.cfg.brn.stack_depth.to_string());
        c.set_meta("brn_base_width", self.cfg.brn.base_width.to_string());
        c.set_meta("apn_hidden", self.cfg.apn.hidden_dim.to_string());
        c.set_meta(
            "apn_widths",
            format!(
                "{},{},{}",
                self.cfg.apn.branch_widths[0],
                self.cfg.apn.branch_widths[1],
                self.cfg.apn.branch_widths[2]
            ),
        );
        if let Some(h) = &self.mpn_ckpt_hash {
            c.set_meta("mpn_ckpt_hash", h.clone());
        }
        if let Some(h) = &self.dpn_ckpt_hash {
            c.set_meta("dpn_ckpt_hash", h.clone());
        }
        for (k, v) in extra_meta {
            c.set_meta(k.clone(), v.clone());
        }
        c.capture_params("agent.", &self.params);
        c.save(path)
    }

    /// Load an agent checkpoint; the frozen networks are reloaded from
    /// their own checkpoint files, verified against the hashes recorded at
    /// training time.
    pub fn load(path: &Path, mpn_path: Option<&Path>, dpn_path: Option<&Path>) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        if c.kind != "agent" {
            return Err(CoreError::parse("checkpoint", format!("expected kind agent, got {}", c.kind)));
        }
        let meta = |k: &str| -> Result<&str> {
            c.meta_value(k)
                .ok_or_else(|| CoreError::parse("checkpoint", format!("missing meta `{k}`")))
        };
        let combination = Combination::parse(meta("combination")?)?;
        let merge = MergeMethod::parse(meta("merge")?)?;
        let parse_usize = |k: &str| -> Result<usize> {
            meta(k)?.parse().map_err(|_| CoreError::parse("checkpoint", format!("bad meta `{k}`")))
        };
        let widths: Vec<usize> = meta("apn_widths")?
            .split(',')
            .map(|v| v.parse().map_err(|_| CoreError::parse("checkpoint", "bad apn_widths")))
            .collect::<Result<_>>()?;
        let cfg = AgentConfig {
            combination,
            merge,
            embed_dim: parse_usize("embed_dim")?,
            brn: BrnConfig {
                frame_side: parse_usize("brn_frame_side")?,
                stack_depth: parse_usize("brn_stack_depth")?,
                base_width: parse_usize("brn_base_width")?,
                embed_dim: parse_usize("embed_dim")?,
            },
            apn: ApnConfig {
                feature_dim: parse_usize("embed_dim")?,
                branch_widths: [widths[0], widths[1], widths[2]],
                hidden_dim: parse_usize("apn_hidden")?,
            },
            seq_len: parse_usize("seq_len")?,
        };

        let mpn = if combination.uses_mpn() {
            let p = mpn_path.ok_or_else(|| CoreError::MissingArtifact {
                artifact: "world-model checkpoint".into(),
                stage: "train-mpn".into(),
            })?;
            if let Some(want) = c.meta_value("mpn_ckpt_hash") {
                let got = crate::checkpoint::file_hash(p)?;
                if want != got {
                    return Err(CoreError::validation(format!(
                        "frozen world-model checkpoint hash mismatch: agent trained against {want}, file is {got}"
                    )));
                }
            }
            Some(Mpn::load(p)?)
        } else {
            None
        };
        let dpn = if combination.uses_dpn() {
            let p = dpn_path.ok_or_else(|| CoreError::MissingArtifact {
                artifact: "direct-perception checkpoint".into(),
                stage: "train-dpn".into(),
            })?;
            if let Some(want) = c.meta_value("dpn_ckpt_hash") {
                let got = crate::checkpoint::file_hash(p)?;
                if want != got {
                    return Err(CoreError::validation(format!(
                        "frozen direct-perception checkpoint hash mismatch: agent trained against {want}, file is {got}"
                    )));
                }
            }
            Some(Dpn::load(p)?)
        } else {
            None
        };

        let mut agent = Agent::new(cfg, 0, mpn, dpn)?;
        c.restore_params("agent.", &mut agent.params)?;
        agent.mpn_ckpt_hash = c.meta_value("mpn_ckpt_hash").map(str::to_string);
        agent.dpn_ckpt_hash = c.meta_value("dpn_ckpt_hash").map(str::to_string);
        Ok(agent)
    }
}

/// Imitation-training settings.
#[derive(Debug, Clone)]
pub struct AgentTrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Cap on the anchor pool per command (bounds the frozen-feature
    /// precomputation).
    pub pool_per_command: usize,
}

impl Default for AgentTrainOpts {
    fn default() -> Self {
        AgentTrainOpts { steps: 800, batch: 8, lr: 1e-3, seed: 0, pool_per_command: 4000 }
    }
}

/// Candidate anchors per command bucket (deterministically subsampled).
pub fn command_buckets(
    data: &LoadedDataset,
    cfg: &AgentConfig,
    pool_per_command: usize,
    seed: u64,
) -> [Vec<SampleIndex>; 4] {
    let needs = SampleNeeds {
        stack_depth: cfg.brn.stack_depth,
        seq_len: if cfg.combination.uses_mpn() { cfg.seq_len } else { 1 },
        next_frame: false,
        waypoints: true,
    };
    let anchors = data.sample_indices(&needs);
    let mut buckets: [Vec<SampleIndex>; 4] = Default::default();
    for a in anchors {
        buckets[data.record(a).routing_command.index()].push(a);
    }
    // Deterministic thinning keeps the frozen-feature cache bounded.
    let mut rng = rng::substream(seed, "bucket-thin");
    for b in buckets.iter_mut() {
        if b.len() > pool_per_command {
            for i in (1..b.len()).rev() {
                let j = rand::Rng::gen_range(&mut rng, 0..=i);
                b.swap(i, j);
            }
            b.truncate(pool_per_command);
            b.sort_by_key(|s| (s.ep, s.t));
        }
    }
    buckets
}

/// Train the behavior-reflex, fusion and action parameters by imitation:
/// mean absolute error on both waypoints, routed through the gated branch.
/// The frozen networks' parameters never enter the graph. Each step draws
/// its batch from one command bucket, cycling over the commands present.
pub fn train_agent(
    data: &LoadedDataset,
    cfg: AgentConfig,
    mpn: Option<Mpn>,
    dpn: Option<Dpn>,
    features: &FrozenFeatures,
    buckets: &[Vec<SampleIndex>; 4],
    opts: &AgentTrainOpts,
) -> Result<(Agent, Vec<f64>)> {
    let mut agent = Agent::new(cfg, opts.seed, mpn, dpn)?;
    let present: Vec<usize> = (0..4).filter(|&i| !buckets[i].is_empty()).collect();
    if present.is_empty() {
        return Err(CoreError::validation("no labeled samples in any command bucket"));
    }
    if present.len() < 4 {
        eprintln!(
            "warning: dataset covers only {}/4 routing commands; missing branches train on nothing",
            present.len()
        );
    }
    let mut iters: Vec<(RoutingCommand, BatchIter)> = present
        .iter()
        .map(|&i| {
            (
                RoutingCommand::from_index(i).unwrap(),
                BatchIter::new(buckets[i].clone(), opts.batch, opts.seed.wrapping_add(i as u64)),
            )
        })
        .collect();
    let mut adam = Adam::new(opts.lr);
    let mut curve = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let slot = step % iters.len();
        let (command, iter) = &mut iters[slot];
        let idx: Vec<SampleIndex> = iter.next_batch().to_vec();
        let stack = data.stack_batch(&idx, agent.cfg.brn.stack_depth, None);
        let targets = data.waypoint_targets(&idx);
        let roles = agent.cfg.combination.roles();
        let frozen: Vec<(Role, Tensor)> = roles
            .iter()
            .filter(|r| **r != Role::Reflex)
            .map(|r| Ok((*r, features.role_batch(&idx, *r, agent.cfg.embed_dim)?)))
            .collect::<Result<_>>()?;

        let loss = {
            let Agent { params, brn, fusion, apn, .. } = &mut agent;
            let mut s = Session::train(params);
            let x = s.input(stack);
            let mut vars: Vec<Var> = Vec::with_capacity(roles.len());
            let mut frozen_iter = frozen.iter();
            for role in &roles {
                if *role == Role::Reflex {
                    vars.push(brn.embed(&mut s, x));
                } else {
                    let (_, t) = frozen_iter.next().expect("frozen role order");
                    vars.push(s.input(t.clone()));
                }
            }
            let alpha = fusion.forward(&mut s, &vars);
            let wp = apn.waypoints_for(&mut s, alpha, *command);
            let t = s.input(targets);
            let diff = s.tape.sub(wp, t);
            let absd = s.tape.abs(diff);
            let loss = s.tape.mean_all(absd);
            let loss_val = s.tape.value(loss).item();
            let grads = s.tape.backward(loss);
            let pairs = s.param_grads(&grads);
            drop(s);
            adam.step(params, pairs);
            loss_val
        };
        if !loss.is_finite() {
            return Err(CoreError::Diverged { step, loss });
        }
        curve.push(loss);
    }
    Ok((agent, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{record_dataset, RecorderConfig};
    use crate::perception::{DpnConfig, MpnConfig};
    use crate::simworld::WorldParams;

    fn tiny_world_cfg() -> (tempfile::TempDir, LoadedDataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RecorderConfig {
            n_steps: 420,
            world: WorldParams { npc_vehicles: 3, pedestrians: 2 },
            ..Default::default()
        };
        record_dataset(&["train-town".into()], &cfg, 31, dir.path()).unwrap();
        let ds = LoadedDataset::open(dir.path()).unwrap();
        (dir, ds)
    }

    fn tiny_agent_cfg(combo: Combination) -> AgentConfig {
        AgentConfig {
            combination: combo,
            merge: MergeMethod::ConvUnconstrained,
            embed_dim: 16,
            brn: BrnConfig { frame_side: 64, stack_depth: 3, base_width: 2, embed_dim: 16 },
            apn: ApnConfig { feature_dim: 16, branch_widths: [16, 16, 8], hidden_dim: 8 },
            seq_len: 3,
        }
    }

    fn tiny_mpn() -> Mpn {
        Mpn::new(
            MpnConfig { frame_side: 64, latent_dim: 16, seq_len: 3, msssim_scales: 3, ..Default::default() },
            7,
        )
    }

    fn tiny_dpn() -> Dpn {
        Dpn::new(DpnConfig { frame_side: 64, latent_dim: 16, ..Default::default() }, 8)
    }

    #[test]
    fn missing_frozen_nets_rejected() {
        let err = Agent::new(tiny_agent_cfg(Combination::DpnBrnMpn), 1, None, None).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("world-model"));
        let err = Agent::new(tiny_agent_cfg(Combination::DpnBrn), 1, None, None).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("direct-perception"));
        assert!(Agent::new(tiny_agent_cfg(Combination::Brn), 1, None, None).is_ok());
    }

    #[test]
    fn training_leaves_frozen_nets_untouched_and_halves_loss() {
        let (_dir, ds) = tiny_world_cfg();
        let cfg = tiny_agent_cfg(Combination::DpnBrnMpn);
        let mut mpn = tiny_mpn();
        let mut dpn = tiny_dpn();
        let mpn_hash_before = mpn.param_hash();
        let dpn_hash_before = dpn.param_hash();

        let buckets = command_buckets(&ds, &cfg, 200, 3);
        let anchors: Vec<SampleIndex> = buckets.iter().flatten().copied().collect();
        let features = FrozenFeatures::precompute(
            &ds,
            &anchors,
            Some(&mut mpn),
            Some(&mut dpn),
            cfg.seq_len,
            cfg.brn.stack_depth,
        )
        .unwrap();

        let opts = AgentTrainOpts { steps: 60, batch: 4, lr: 2e-3, seed: 5, pool_per_command: 200 };
        let (agent, curve) =
            train_agent(&ds, cfg, Some(mpn), Some(dpn), &features, &buckets, &opts).unwrap();
        assert_eq!(curve.len(), 60);
        assert_eq!(agent.mpn.as_ref().unwrap().param_hash(), mpn_hash_before);
        assert_eq!(agent.dpn.as_ref().unwrap().param_hash(), dpn_hash_before);
        // Early loss should exceed late loss on this easy fit.
        let head: f64 = curve[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = curve[curve.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not decrease: head {head}, tail {tail}");
    }

    #[test]
    fn follow_only_training_leaves_other_branches_at_init() {
        let (_dir, ds) = tiny_world_cfg();
        let cfg = tiny_agent_cfg(Combination::Brn);
        // Restrict every bucket except Follow to empty.
        let mut buckets = command_buckets(&ds, &cfg, 500, 3);
        buckets[1].clear();
        buckets[2].clear();
        buckets[3].clear();
        assert!(!buckets[0].is_empty());
        let features = FrozenFeatures::precompute(&ds, &[], None, None, 1, 3).unwrap();

        let reference = Agent::new(cfg.clone(), 9, None, None).unwrap();
        let ref_named: std::collections::HashMap<String, Tensor> = reference
            .params
            .iter_named()
            .map(|(n, t, _)| (n.to_string(), t.clone()))
            .collect();

        let opts = AgentTrainOpts { steps: 30, batch: 4, lr: 2e-3, seed: 9, pool_per_command: 500 };
        let (agent, _) = train_agent(&ds, cfg, None, None, &features, &buckets, &opts).unwrap();
        for (name, tensor, _) in agent.params.iter_named() {
            let is_inactive_branch = name.starts_with("apn.straight.")
                || name.starts_with("apn.left.")
                || name.starts_with("apn.right.");
            if is_inactive_branch {
                assert_eq!(
                    tensor.data(),
                    ref_named[name].data(),
                    "{name} moved despite having no training data"
                );
            }
        }
        // The follow branch did move.
        let moved = agent
            .params
            .iter_named()
            .filter(|(n, _, _)| n.starts_with("apn.follow."))
            .any(|(n, t, _)| t.data() != ref_named[n].data());
        assert!(moved);
    }

    #[test]
    fn agent_checkpoint_round_trip_with_hash_verification() {
        let dir = tempfile::tempdir().unwrap();
        let mpn_path = dir.path().join("mpn.ckpt");
        let dpn_path = dir.path().join("dpn.ckpt");
        let agent_path = dir.path().join("agent.ckpt");

        let mpn = tiny_mpn();
        mpn.save(&mpn_path, &[]).unwrap();
        let dpn = tiny_dpn();
        dpn.save(&dpn_path, &[]).unwrap();

        let mut agent =
            Agent::new(tiny_agent_cfg(Combination::DpnBrnMpn), 2, Some(Mpn::load(&mpn_path).unwrap()), Some(Dpn::load(&dpn_path).unwrap()))
                .unwrap();
        agent.mpn_ckpt_hash = Some(crate::checkpoint::file_hash(&mpn_path).unwrap());
        agent.dpn_ckpt_hash = Some(crate::checkpoint::file_hash(&dpn_path).unwrap());
        agent.save(&agent_path, &[]).unwrap();

        let restored = Agent::load(&agent_path, Some(&mpn_path), Some(&dpn_path)).unwrap();
        assert_eq!(restored.param_hash(), agent.param_hash());

        // Tamper with the frozen checkpoint: load must refuse.
        let mut other = tiny_mpn();
        other.params.set(crate::nn::ParamRef(0), {
            let shape = other.params.get(crate::nn::ParamRef(0)).shape().to_vec();
            Tensor::full(&shape, 0.123)
        });
        other.save(&mpn_path, &[]).unwrap();
        let err = Agent::load(&agent_path, Some(&mpn_path), Some(&dpn_path)).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"));
    }

    #[test]
    fn ablation_requires_present_role() {
        let mut agent = Agent::new(tiny_agent_cfg(Combination::Brn), 3, None, None).unwrap();
        let eta = Tensor::full(&[1, 16], 0.1);
        let embeds = vec![(Role::Reflex, eta)];
        let err = agent
            .waypoints_from_embeddings(&embeds, RoutingCommand::Follow, Some(Role::Affordance))
            .unwrap_err();
        assert!(err.to_string().contains("not part of combination"));
        // Ablating the present role works and zeroes the feature path.
        let ok = agent
            .waypoints_from_embeddings(&embeds, RoutingCommand::Follow, Some(Role::Reflex))
            .unwrap();
        assert!(ok.is_finite());
    }
}
