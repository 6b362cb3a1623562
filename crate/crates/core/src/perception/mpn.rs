//! Mediated-perception network: frame encoder, recurrent latent predictor
//! fused with proprioceptive sensors, and frame decoder. Produces the
//! current embedding and the one-step-ahead prediction; trained offline on
//! next-frame structural similarity plus a sensor-prediction term, then
//! frozen.

use std::path::Path;

use crate::autodiff::Var;
use crate::checkpoint::Checkpoint;
use crate::dataset::{LoadedDataset, SampleIndex, SampleNeeds};
use crate::error::{CoreError, Result};
use crate::nn::{msssim_graph, Adam, GruCell, Linear, MsSsimConfig, ParamSet, Session};
use crate::rng;
use crate::tensor::Tensor;

use super::autoenc::{AutoencSpec, Decoder, Encoder};
use super::TrainOpts;

#[derive(Debug, Clone, PartialEq)]
pub struct MpnConfig {
    pub frame_side: usize,
    pub latent_dim: usize,
    /// Input sequence length n; the network predicts frame n+1.
    pub seq_len: usize,
    pub sensor_dim: usize,
    pub msssim_scales: usize,
    pub lambda_sensor: f64,
}

impl Default for MpnConfig {
    fn default() -> Self {
        MpnConfig {
            frame_side: 64,
            latent_dim: 128,
            seq_len: 5,
            sensor_dim: 3,
            msssim_scales: 3,
            lambda_sensor: 0.1,
        }
    }
}

impl MpnConfig {
    fn spec(&self) -> AutoencSpec {
        AutoencSpec {
            side: self.frame_side,
            in_channels: 1,
            out_channels: 1,
            latent_dim: self.latent_dim,
        }
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("frame_side".into(), self.frame_side.to_string()),
            ("latent_dim".into(), self.latent_dim.to_string()),
            ("seq_len".into(), self.seq_len.to_string()),
            ("sensor_dim".into(), self.sensor_dim.to_string()),
            ("msssim_scales".into(), self.msssim_scales.to_string()),
            ("lambda_sensor".into(), self.lambda_sensor.to_string()),
        ]
    }

    pub fn from_ckpt(c: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            c.meta_value(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CoreError::parse("checkpoint", format!("missing meta `{k}`")))
        };
        Ok(MpnConfig {
            frame_side: get("frame_side")? as usize,
            latent_dim: get("latent_dim")? as usize,
            seq_len: get("seq_len")? as usize,
            sensor_dim: get("sensor_dim")? as usize,
            msssim_scales: get("msssim_scales")? as usize,
            lambda_sensor: get("lambda_sensor")?,
        })
    }
}

pub struct Mpn {
    pub cfg: MpnConfig,
    pub params: ParamSet,
    encoder: Encoder,
    decoder: Decoder,
    gru: GruCell,
    sensor_head: Linear,
}

/// Teacher-forced recurrence over encoded frames: the hidden state after
/// consuming step i is the latent prediction for step i+1.
#[allow(clippy::too_many_arguments)]
fn rollout(
    encoder: &Encoder,
    gru: &GruCell,
    latent_dim: usize,
    s: &mut Session,
    inputs: &[Tensor],
    sensors: &[Tensor],
) -> Result<(Vec<Var>, Vec<Var>)> {
    if inputs.len() != sensors.len() || inputs.is_empty() {
        return Err(CoreError::validation(format!(
            "frame/sensor sequences must align and be non-empty, got {} vs {}",
            inputs.len(),
            sensors.len()
        )));
    }
    let mut latents = Vec::with_capacity(inputs.len());
    let mut hiddens = Vec::with_capacity(inputs.len());
    let mut sensor_vars = Vec::with_capacity(inputs.len());
    for (f, sen) in inputs.iter().zip(sensors) {
        let x = s.input(f.clone());
        latents.push(encoder.forward(s, x));
        sensor_vars.push(s.input(sen.clone()));
    }
    let b = s.tape.value(latents[0]).shape()[0];
    let mut h = s.input(Tensor::zeros(&[b, latent_dim]));
    for (&l, &sen) in latents.iter().zip(&sensor_vars) {
        let x = s.tape.concat_cols(&[l, sen]);
        h = gru.forward(s, x, h);
        hiddens.push(h);
    }
    Ok((latents, hiddens))
}

/// Next-frame objective: every hidden state decodes to the following frame
/// scored by 1 - similarity; the final hidden state predicts the next
/// sensor row under a squared-error term weighted by `lambda_sensor`.
#[allow(clippy::too_many_arguments)]
fn sequence_loss(
    encoder: &Encoder,
    decoder: &Decoder,
    gru: &GruCell,
    sensor_head: &Linear,
    cfg: &MpnConfig,
    s: &mut Session,
    inputs: &[Tensor],
    sensors: &[Tensor],
    target_frame: &Tensor,
    target_sensors: &Tensor,
    ms_cfg: &MsSsimConfig,
) -> Result<Var> {
    let n = inputs.len();
    let (_, hiddens) = rollout(encoder, gru, cfg.latent_dim, s, inputs, sensors)?;

    let mut total: Option<Var> = None;
    for (i, &h) in hiddens.iter().enumerate() {
        let x_hat = decoder.forward(s, h);
        let target = if i + 1 < n { inputs[i + 1].clone() } else { target_frame.clone() };
        let t = s.input(target);
        let sim = msssim_graph(&mut s.tape, x_hat, t, ms_cfg);
        let one = s.input(Tensor::scalar(1.0));
        let term = s.tape.sub(one, sim);
        total = Some(match total {
            Some(acc) => s.tape.add(acc, term),
            None => term,
        });
    }
    let mut loss = total.expect("at least one step");

    if cfg.lambda_sensor > 0.0 {
        let s_hat = sensor_head.forward(s, *hiddens.last().unwrap());
        let t = s.input(target_sensors.clone());
        let d = s.tape.sub(s_hat, t);
        let sq = s.tape.mul(d, d);
        let mse = s.tape.mean_all(sq);
        let weighted = s.tape.mul_scalar(mse, cfg.lambda_sensor);
        loss = s.tape.add(loss, weighted);
    }
    Ok(loss)
}

impl Mpn {
    pub fn new(cfg: MpnConfig, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut r = rng::substream(seed, "mpn-init");
        let encoder = Encoder::new(&mut params, &mut r, "enc", cfg.spec());
        let decoder = Decoder::new(&mut params, &mut r, "dec", cfg.spec());
        // The predicted latent doubles as the hidden state, which pins the
        // hidden size to the latent size.
        let gru = GruCell::new(
            &mut params,
            &mut r,
            "gru",
            cfg.latent_dim + cfg.sensor_dim,
            cfg.latent_dim,
        );
        let sensor_head = Linear::new(&mut params, &mut r, "sensor_head", cfg.latent_dim, cfg.sensor_dim, true);
        Mpn { cfg, params, encoder, decoder, gru, sensor_head }
    }

    /// Encode a batch of frames (batch, 1, side, side) -> (batch, latent).
    pub fn encode(&mut self, frames: &Tensor) -> Tensor {
        let encoder = &self.encoder;
        let mut s = Session::eval(&mut self.params);
        let x = s.input(frames.clone());
        let lat = encoder.forward(&mut s, x);
        s.tape.value(lat).clone()
    }

    /// One-step prediction from raw tensors: consumes aligned frame and
    /// sensor sequences, returns (current latent, predicted next latent,
    /// predicted next sensors).
    pub fn predict_next(
        &mut self,
        frames: &[Tensor],
        sensors: &[Tensor],
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let encoder = &self.encoder;
        let gru = &self.gru;
        let sensor_head = &self.sensor_head;
        let latent_dim = self.cfg.latent_dim;
        let mut s = Session::eval(&mut self.params);
        let (latents, hiddens) = rollout(encoder, gru, latent_dim, &mut s, frames, sensors)?;
        let h = *hiddens.last().unwrap();
        let s_hat = sensor_head.forward(&mut s, h);
        let current = s.tape.value(*latents.last().unwrap()).clone();
        Ok((current, s.tape.value(h).clone(), s.tape.value(s_hat).clone()))
    }

    /// One-step prediction from already-encoded latents (closed-loop
    /// drivers cache per-frame latents so each frame is encoded once).
    pub fn predict_next_encoded(
        &mut self,
        latents: &[Tensor],
        sensors: &[Tensor],
    ) -> Result<(Tensor, Tensor)> {
        if latents.len() != sensors.len() || latents.is_empty() {
            return Err(CoreError::validation("latent/sensor sequences must align and be non-empty"));
        }
        let gru = &self.gru;
        let sensor_head = &self.sensor_head;
        let latent_dim = self.cfg.latent_dim;
        let mut s = Session::eval(&mut self.params);
        let b = latents[0].shape()[0];
        let mut h = s.input(Tensor::zeros(&[b, latent_dim]));
        for (l, sen) in latents.iter().zip(sensors) {
            let lv = s.input(l.clone());
            let sv = s.input(sen.clone());
            let x = s.tape.concat_cols(&[lv, sv]);
            h = gru.forward(&mut s, x, h);
        }
        let s_hat = sensor_head.forward(&mut s, h);
        Ok((s.tape.value(h).clone(), s.tape.value(s_hat).clone()))
    }

    /// Decode a latent batch to frames.
    pub fn decode(&mut self, latent: &Tensor) -> Tensor {
        let decoder = &self.decoder;
        let mut s = Session::eval(&mut self.params);
        let l = s.input(latent.clone());
        let y = decoder.forward(&mut s, l);
        s.tape.value(y).clone()
    }

    /// One optimizer step on one batch; returns the loss value.
    pub fn train_step(
        &mut self,
        inputs: &[Tensor],
        sensors: &[Tensor],
        target_frame: &Tensor,
        target_sensors: &Tensor,
        ms_cfg: &MsSsimConfig,
        adam: &mut Adam,
    ) -> Result<f64> {
        let Mpn { params, encoder, decoder, gru, sensor_head, cfg } = self;
        let mut s = Session::train(params);
        let loss = sequence_loss(
            encoder,
            decoder,
            gru,
            sensor_head,
            cfg,
            &mut s,
            inputs,
            sensors,
            target_frame,
            target_sensors,
            ms_cfg,
        )?;
        let loss_val = s.tape.value(loss).item();
        let grads = s.tape.backward(loss);
        let pairs = s.param_grads(&grads);
        drop(s);
        adam.step(params, pairs);
        Ok(loss_val)
    }

    /// Loss of one batch without updating parameters.
    pub fn eval_loss(
        &mut self,
        inputs: &[Tensor],
        sensors: &[Tensor],
        target_frame: &Tensor,
        target_sensors: &Tensor,
        ms_cfg: &MsSsimConfig,
    ) -> Result<f64> {
        let Mpn { params, encoder, decoder, gru, sensor_head, cfg } = self;
        let mut s = Session::eval(params);
        let loss = sequence_loss(
            encoder,
            decoder,
            gru,
            sensor_head,
            cfg,
            &mut s,
            inputs,
            sensors,
            target_frame,
            target_sensors,
            ms_cfg,
        )?;
        Ok(s.tape.value(loss).item())
    }

    pub fn save(&self, path: &Path, extra_meta: &[(String, String)]) -> Result<()> {
        let mut c = Checkpoint::new("mpn");
        for (k, v) in self.cfg.to_meta() {
            c.set_meta(k, v);
        }
        for (k, v) in extra_meta {
            c.set_meta(k.clone(), v.clone());
        }
        c.capture_params("mpn.", &self.params);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        if c.kind != "mpn" {
            return Err(CoreError::parse("checkpoint", format!("expected kind mpn, got {}", c.kind)));
        }
        let cfg = MpnConfig::from_ckpt(&c)?;
        let mut net = Mpn::new(cfg, 0);
        c.restore_params("mpn.", &mut net.params)?;
        Ok(net)
    }

    pub fn param_hash(&self) -> String {
        crate::checkpoint::hex(&self.params.content_hash())
    }

    #[cfg(test)]
    pub(crate) fn gru_cell(&self) -> &GruCell {
        &self.gru
    }

    #[cfg(test)]
    pub(crate) fn sensor_head_layer(&self) -> &Linear {
        &self.sensor_head
    }
}

/// Train the world-model network offline. Returns the network and its loss
/// curve. Aborts with a diagnostic when the loss stops being finite.
pub fn train_mpn(data: &LoadedDataset, cfg: MpnConfig, opts: &TrainOpts) -> Result<(Mpn, Vec<f64>)> {
    let ms_cfg = MsSsimConfig::with_scales(cfg.msssim_scales);
    ms_cfg.validate_side(cfg.frame_side, cfg.frame_side)?;
    let needs = SampleNeeds {
        stack_depth: 1,
        seq_len: cfg.seq_len,
        next_frame: true,
        waypoints: false,
    };
    let indices = data.sample_indices(&needs);
    if indices.is_empty() {
        return Err(CoreError::validation("dataset has no usable sequence samples"));
    }
    let mut net = Mpn::new(cfg.clone(), opts.seed);
    let mut iter = crate::dataset::BatchIter::new(indices, opts.batch, opts.seed);
    let mut adam = Adam::new(opts.lr);
    let mut aug_rng = rng::substream(opts.seed, "mpn-augment");
    let mut curve = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let idx: Vec<SampleIndex> = iter.next_batch().to_vec();
        let (inputs, sensors, target_frame, target_sensors) =
            data.sequence_batch(&idx, cfg.seq_len, Some((&mut aug_rng, false)));
        let loss =
            net.train_step(&inputs, &sensors, &target_frame, &target_sensors, &ms_cfg, &mut adam)?;
        if !loss.is_finite() {
            return Err(CoreError::Diverged { step, loss });
        }
        curve.push(loss);
    }
    Ok((net, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> MpnConfig {
        MpnConfig { frame_side: 32, latent_dim: 16, seq_len: 3, msssim_scales: 2, ..Default::default() }
    }

    #[test]
    fn constant_sequence_fixed_point() {
        // With the update gate forced open (z ~ 1 keeps the old hidden
        // state), the hidden state is a fixed point regardless of input.
        let cfg = tiny_cfg();
        let mut net = Mpn::new(cfg, 1);
        let hd = 16;
        let mut b = net.params.get(net.gru_cell().b_ih).data().to_vec();
        for v in b.iter_mut().take(2 * hd).skip(hd) {
            *v = 30.0;
        }
        let gru_b = net.gru_cell().b_ih;
        net.params.set(gru_b, Tensor::new(&[3 * hd], b));

        let gru = &net.gru;
        let mut s = Session::eval(&mut net.params);
        let l = s.input(Tensor::full(&[1, 16], 0.3));
        let sen = s.input(Tensor::zeros(&[1, 3]));
        let x = s.tape.concat_cols(&[l, sen]);
        let h0 = s.input(Tensor::full(&[1, 16], 0.25));
        let h1 = gru.forward(&mut s, x, h0);
        let h2 = gru.forward(&mut s, x, h1);
        let v1 = s.tape.value(h1).data().to_vec();
        let v2 = s.tape.value(h2).data().to_vec();
        for (a, b) in v1.iter().zip(&v2) {
            assert!((a - b).abs() < 1e-6, "hidden drifted: {a} vs {b}");
        }
    }

    #[test]
    fn predict_next_shapes_and_order_sensitivity() {
        let cfg = tiny_cfg();
        let mut net = Mpn::new(cfg.clone(), 2);
        let frames: Vec<Tensor> = (0..3)
            .map(|k| {
                Tensor::new(
                    &[1, 1, 32, 32],
                    (0..1024).map(|i| (((i + k * 131) as f64) * 0.013).sin().abs()).collect(),
                )
            })
            .collect();
        let sensors: Vec<Tensor> =
            (0..3).map(|k| Tensor::new(&[1, 3], vec![k as f64, 0.1, -0.1])).collect();
        let (cur, next, s_hat) = net.predict_next(&frames, &sensors).unwrap();
        assert_eq!(cur.shape(), &[1, 16]);
        assert_eq!(next.shape(), &[1, 16]);
        assert_eq!(s_hat.shape(), &[1, 3]);

        let mut rev_f = frames.clone();
        rev_f.reverse();
        let mut rev_s = sensors.clone();
        rev_s.reverse();
        let (_, next_rev, _) = net.predict_next(&rev_f, &rev_s).unwrap();
        assert_ne!(next.data(), next_rev.data(), "recurrence must be order-dependent");
    }

    #[test]
    fn mismatched_sequences_rejected() {
        let cfg = tiny_cfg();
        let mut net = Mpn::new(cfg, 3);
        let f = vec![Tensor::zeros(&[1, 1, 32, 32])];
        let err = net.predict_next(&f, &[]).unwrap_err();
        assert!(matches!(err, CoreError::Validation(_)));
    }

    #[test]
    fn zero_sensor_weight_freezes_sensor_head() {
        let cfg = MpnConfig { lambda_sensor: 0.0, ..tiny_cfg() };
        let mut net = Mpn::new(cfg, 5);
        let head_w = net.sensor_head_layer().w;
        let before = net.params.get(head_w).clone();
        let frames: Vec<Tensor> = (0..3).map(|_| Tensor::full(&[2, 1, 32, 32], 0.4)).collect();
        let sensors: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(&[2, 3])).collect();
        let mut adam = Adam::new(1e-2);
        let ms = MsSsimConfig::with_scales(2);
        net.train_step(
            &frames,
            &sensors,
            &Tensor::full(&[2, 1, 32, 32], 0.6),
            &Tensor::zeros(&[2, 3]),
            &ms,
            &mut adam,
        )
        .unwrap();
        assert_eq!(net.params.get(head_w).data(), before.data());
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mpn.ckpt");
        let cfg = tiny_cfg();
        let mut net = Mpn::new(cfg, 4);
        let frame = Tensor::new(&[1, 1, 32, 32], (0..1024).map(|i| (i % 7) as f64 / 7.0).collect());
        let before = net.encode(&frame);
        net.save(&path, &[("seed".into(), "4".into())]).unwrap();
        let mut restored = Mpn::load(&path).unwrap();
        let after = restored.encode(&frame);
        assert_eq!(before.data(), after.data());
    }
}
