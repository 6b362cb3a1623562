//! Run configuration: a flat, human-readable key=value file with sections.
//! Parsing is strict (unknown sections or keys are rejected), the
//! serialization is canonical so parse -> serialize -> parse is the
//! identity, and every stage derives a content hash for artifact
//! provenance and skip-if-done checks.

use crate::error::{CoreError, Result};
use crate::fusion::{Combination, MergeMethod};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [run]
    pub out_dir: String,
    pub seed: u64,
    // [world]
    pub map_train: String,
    pub map_test: String,
    pub frame_h: usize,
    pub frame_w: usize,
    pub dt: f64,
    pub npc_vehicles: usize,
    pub pedestrians: usize,
    // [dataset]
    pub dataset_steps: usize,
    pub noise_prob: f64,
    pub noise_mag: f64,
    // [model]
    pub embed_dim: usize,
    pub seq_len: usize,
    pub stack_depth: usize,
    pub msssim_scales: usize,
    pub lambda_sensor: f64,
    pub brn_base_width: usize,
    // [train_mpn]
    pub mpn_steps: usize,
    pub mpn_batch: usize,
    pub mpn_lr: f64,
    // [train_dpn]
    pub dpn_steps: usize,
    pub dpn_batch: usize,
    pub dpn_lr: f64,
    // [train_agent]
    pub combination: Combination,
    pub merge: MergeMethod,
    pub agent_steps: usize,
    pub agent_batch: usize,
    pub agent_lr: f64,
    pub pool_per_command: usize,
    // [eval]
    pub eval_episodes: usize,
    pub eval_base_seed: u64,
    pub route_min_m: f64,
    pub route_max_m: f64,
    pub timeout_factor: f64,
    // [ablate]
    pub ablate_routes: usize,
    pub ablate_stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: "out".into(),
            seed: 7,
            map_train: "train-town".into(),
            map_test: "test-town".into(),
            frame_h: 64,
            frame_w: 64,
            dt: 0.1,
            npc_vehicles: 20,
            pedestrians: 20,
            dataset_steps: 50_000,
            noise_prob: 0.04,
            noise_mag: 0.35,
            embed_dim: 128,
            seq_len: 5,
            stack_depth: 3,
            msssim_scales: 3,
            lambda_sensor: 0.1,
            brn_base_width: 8,
            mpn_steps: 1600,
            mpn_batch: 8,
            mpn_lr: 1e-3,
            dpn_steps: 1800,
            dpn_batch: 8,
            dpn_lr: 1e-3,
            combination: Combination::DpnBrnMpn,
            merge: MergeMethod::ConvUnconstrained,
            agent_steps: 1000,
            agent_batch: 8,
            agent_lr: 1e-3,
            pool_per_command: 3000,
            eval_episodes: 15,
            eval_base_seed: 1000,
            route_min_m: 150.0,
            route_max_m: 420.0,
            timeout_factor: 3.0,
            ablate_routes: 4,
            ablate_stride: 2,
        }
    }
}

fn fmt_f(v: f64) -> String {
    // Canonical float text (round-trips exactly for the values we use).
    let s = format!("{v}");
    s
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        format!(
            "# ensdrive run configuration\n\
             format_version = {fv}\n\
             \n[run]\n\
             out_dir = {out_dir}\n\
             seed = {seed}\n\
             \n[world]\n\
             map_train = {map_train}\n\
             map_test = {map_test}\n\
             frame_h = {frame_h}\n\
             frame_w = {frame_w}\n\
             dt = {dt}\n\
             npc_vehicles = {npc}\n\
             pedestrians = {ped}\n\
             \n[dataset]\n\
             steps = {dsteps}\n\
             noise_prob = {nprob}\n\
             noise_mag = {nmag}\n\
             \n[model]\n\
             embed_dim = {embed}\n\
             seq_len = {seq}\n\
             stack_depth = {stack}\n\
             msssim_scales = {scales}\n\
             lambda_sensor = {lam}\n\
             brn_base_width = {brnw}\n\
             \n[train_mpn]\n\
             steps = {msteps}\n\
             batch = {mbatch}\n\
             lr = {mlr}\n\
             \n[train_dpn]\n\
             steps = {psteps}\n\
             batch = {pbatch}\n\
             lr = {plr}\n\
             \n[train_agent]\n\
             combination = {combo}\n\
             merge = {merge}\n\
             steps = {asteps}\n\
             batch = {abatch}\n\
             lr = {alr}\n\
             pool_per_command = {pool}\n\
             \n[eval]\n\
             episodes = {eps}\n\
             base_seed = {bs}\n\
             route_min_m = {rmin}\n\
             route_max_m = {rmax}\n\
             timeout_factor = {tf}\n\
             \n[ablate]\n\
             routes = {aroutes}\n\
             stride = {astride}\n",
            fv = crate::FORMAT_VERSION,
            out_dir = self.out_dir,
            seed = self.seed,
            map_train = self.map_train,
            map_test = self.map_test,
            frame_h = self.frame_h,
            frame_w = self.frame_w,
            dt = fmt_f(self.dt),
            npc = self.npc_vehicles,
            ped = self.pedestrians,
            dsteps = self.dataset_steps,
            nprob = fmt_f(self.noise_prob),
            nmag = fmt_f(self.noise_mag),
            embed = self.embed_dim,
            seq = self.seq_len,
            stack = self.stack_depth,
            scales = self.msssim_scales,
            lam = fmt_f(self.lambda_sensor),
            brnw = self.brn_base_width,
            msteps = self.mpn_steps,
            mbatch = self.mpn_batch,
            mlr = fmt_f(self.mpn_lr),
            psteps = self.dpn_steps,
            pbatch = self.dpn_batch,
            plr = fmt_f(self.dpn_lr),
            combo = self.combination.name(),
            merge = self.merge.name(),
            asteps = self.agent_steps,
            abatch = self.agent_batch,
            alr = fmt_f(self.agent_lr),
            pool = self.pool_per_command,
            eps = self.eval_episodes,
            bs = self.eval_base_seed,
            rmin = fmt_f(self.route_min_m),
            rmax = fmt_f(self.route_max_m),
            tf = fmt_f(self.timeout_factor),
            aroutes = self.ablate_routes,
            astride = self.ablate_stride,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.to_string();
                let known =
                    ["run", "world", "dataset", "model", "train_mpn", "train_dpn", "train_agent", "eval", "ablate"];
                if !known.contains(&section.as_str()) {
                    return Err(CoreError::parse("config", format!("line {}: unknown section [{section}]", ln + 1)));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| CoreError::parse("config", format!("line {}: expected key = value", ln + 1)))?;
            let bad = |what: &str| CoreError::parse("config", format!("line {}: bad {what} `{value}`", ln + 1));
            macro_rules! num {
                ($what:literal) => {
                    value.parse().map_err(|_| bad($what))?
                };
            }
            match (section.as_str(), key) {
                ("", "format_version") => {
                    let v: u32 = num!("format_version");
                    if v != crate::FORMAT_VERSION {
                        return Err(CoreError::parse("config", format!("unsupported format_version {v}")));
                    }
                }
                ("run", "out_dir") => cfg.out_dir = value.to_string(),
                ("run", "seed") => cfg.seed = num!("seed"),
                ("world", "map_train") => cfg.map_train = value.to_string(),
                ("world", "map_test") => cfg.map_test = value.to_string(),
                ("world", "frame_h") => cfg.frame_h = num!("frame_h"),
                ("world", "frame_w") => cfg.frame_w = num!("frame_w"),
                ("world", "dt") => cfg.dt = num!("dt"),
                ("world", "npc_vehicles") => cfg.npc_vehicles = num!("npc_vehicles"),
                ("world", "pedestrians") => cfg.pedestrians = num!("pedestrians"),
                ("dataset", "steps") => cfg.dataset_steps = num!("steps"),
                ("dataset", "noise_prob") => cfg.noise_prob = num!("noise_prob"),
                ("dataset", "noise_mag") => cfg.noise_mag = num!("noise_mag"),
                ("model", "embed_dim") => cfg.embed_dim = num!("embed_dim"),
                ("model", "seq_len") => cfg.seq_len = num!("seq_len"),
                ("model", "stack_depth") => cfg.stack_depth = num!("stack_depth"),
                ("model", "msssim_scales") => cfg.msssim_scales = num!("msssim_scales"),
                ("model", "lambda_sensor") => cfg.lambda_sensor = num!("lambda_sensor"),
                ("model", "brn_base_width") => cfg.brn_base_width = num!("brn_base_width"),
                ("train_mpn", "steps") => cfg.mpn_steps = num!("steps"),
                ("train_mpn", "batch") => cfg.mpn_batch = num!("batch"),
                ("train_mpn", "lr") => cfg.mpn_lr = num!("lr"),
                ("train_dpn", "steps") => cfg.dpn_steps = num!("steps"),
                ("train_dpn", "batch") => cfg.dpn_batch = num!("batch"),
                ("train_dpn", "lr") => cfg.dpn_lr = num!("lr"),
                ("train_agent", "combination") => cfg.combination = Combination::parse(value)?,
                ("train_agent", "merge") => cfg.merge = MergeMethod::parse(value)?,
                ("train_agent", "steps") => cfg.agent_steps = num!("steps"),
                ("train_agent", "batch") => cfg.agent_batch = num!("batch"),
                ("train_agent", "lr") => cfg.agent_lr = num!("lr"),
                ("train_agent", "pool_per_command") => cfg.pool_per_command = num!("pool_per_command"),
                ("eval", "episodes") => cfg.eval_episodes = num!("episodes"),
                ("eval", "base_seed") => cfg.eval_base_seed = num!("base_seed"),
                ("eval", "route_min_m") => cfg.route_min_m = num!("route_min_m"),
                ("eval", "route_max_m") => cfg.route_max_m = num!("route_max_m"),
                ("eval", "timeout_factor") => cfg.timeout_factor = num!("timeout_factor"),
                ("ablate", "routes") => cfg.ablate_routes = num!("routes"),
                ("ablate", "stride") => cfg.ablate_stride = num!("stride"),
                (sec, k) => {
                    return Err(CoreError::parse(
                        "config",
                        format!("line {}: unknown key `{k}` in section [{sec}]", ln + 1),
                    ))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reject invalid values before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::validation(m));
        if self.frame_h != self.frame_w {
            return err(format!("frames must be square, got {}x{}", self.frame_h, self.frame_w));
        }
        if !self.frame_h.is_power_of_two() || self.frame_h < 32 {
            return err(format!("frame side must be a power of two >= 32, got {}", self.frame_h));
        }
        if !(1..=5).contains(&self.msssim_scales) {
            return err(format!("msssim_scales must be 1..=5, got {}", self.msssim_scales));
        }
        let min_side = 11 << (self.msssim_scales - 1);
        if self.frame_h < min_side {
            return err(format!(
                "frame side {} too small for {} similarity scales (needs >= {min_side})",
                self.frame_h, self.msssim_scales
            ));
        }
        if self.seq_len < 2 {
            return err("seq_len must be at least 2".into());
        }
        if self.stack_depth == 0 || self.dataset_steps == 0 {
            return err("stack_depth and dataset steps must be positive".into());
        }
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return err(format!("dt must be positive, got {}", self.dt));
        }
        for (name, v) in [
            ("mpn_steps", self.mpn_steps),
            ("dpn_steps", self.dpn_steps),
            ("agent_steps", self.agent_steps),
            ("eval_episodes", self.eval_episodes),
            ("ablate_routes", self.ablate_routes),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("mpn_lr", self.mpn_lr), ("dpn_lr", self.dpn_lr), ("agent_lr", self.agent_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.route_min_m >= self.route_max_m || self.route_min_m <= 0.0 {
            return err("route length band must satisfy 0 < min < max".into());
        }
        Ok(())
    }

    fn sha(text: &str) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        crate::checkpoint::hex(&h.finalize())[..16].to_string()
    }

    /// Hash of the full canonical serialization.
    pub fn config_hash(&self) -> String {
        Self::sha(&self.to_text())
    }

    /// Stage-scoped hashes: each covers exactly the fields that influence
    /// that stage's artifact (plus its upstream hashes), so unrelated
    /// config edits do not invalidate artifacts.
    pub fn dataset_hash(&self) -> String {
        Self::sha(&format!(
            "dataset|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.map_train,
            self.frame_h,
            self.frame_w,
            self.dt,
            self.npc_vehicles,
            self.pedestrians,
            self.dataset_steps,
            self.noise_prob,
            self.noise_mag,
            self.seed
        ))
    }

    pub fn mpn_hash(&self) -> String {
        Self::sha(&format!(
            "mpn|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.dataset_hash(),
            self.embed_dim,
            self.seq_len,
            self.msssim_scales,
            self.lambda_sensor,
            self.mpn_steps,
            self.mpn_batch,
            self.mpn_lr,
            self.seed
        ))
    }

    pub fn dpn_hash(&self) -> String {
        Self::sha(&format!(
            "dpn|{}|{}|{}|{}|{}|{}|{}",
            self.dataset_hash(),
            self.embed_dim,
            self.stack_depth,
            self.dpn_steps,
            self.dpn_batch,
            self.dpn_lr,
            self.seed
        ))
    }

    pub fn agent_hash(&self, combination: Combination, seed: u64) -> String {
        Self::sha(&format!(
            "agent|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.dataset_hash(),
            if combination.uses_mpn() { self.mpn_hash() } else { "-".into() },
            if combination.uses_dpn() { self.dpn_hash() } else { "-".into() },
            combination.name(),
            self.merge.name(),
            self.brn_base_width,
            self.agent_steps,
            self.agent_batch,
            self.agent_lr,
            self.pool_per_command,
            seed
        ))
    }
}
