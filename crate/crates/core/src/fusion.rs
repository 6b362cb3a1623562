//! Embedding fusion: merges the perception embeddings (any subset, in
//! canonical order) into one feature vector by one of four strategies:
//! a 1xp convolution with free or simplex-constrained weights, stacked
//! concatenation through a shrinking fully connected ladder, or
//! self-attention over the embeddings followed by averaging.

use crate::autodiff::Var;
use crate::error::{CoreError, Result};
use crate::nn::{Linear, ParamRef, ParamSet, Session};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Embedding width shared by every producer and the fused feature.
pub const EMBED_DIM: usize = 128;

/// The four embedding roles, in their canonical fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Current world-model latent.
    CurrentLatent,
    /// One-step-ahead world-model prediction.
    PredictedLatent,
    /// Behavior-reflex embedding.
    Reflex,
    /// Direct-perception (affordance) embedding.
    Affordance,
}

impl Role {
    pub const ALL: [Role; 4] =
        [Role::CurrentLatent, Role::PredictedLatent, Role::Reflex, Role::Affordance];

    pub fn symbol(self) -> &'static str {
        match self {
            Role::CurrentLatent => "ell_t",
            Role::PredictedLatent => "ell_t1",
            Role::Reflex => "eta_t",
            Role::Affordance => "delta_t",
        }
    }
}

/// Model combinations benchmarked against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Combination {
    Brn,
    MpnBrn,
    DpnBrn,
    DpnBrnMpn,
}

impl Combination {
    pub const ALL: [Combination; 4] =
        [Combination::Brn, Combination::MpnBrn, Combination::DpnBrn, Combination::DpnBrnMpn];

    /// Roles present, in canonical order.
    pub fn roles(self) -> Vec<Role> {
        match self {
            Combination::Brn => vec![Role::Reflex],
            Combination::MpnBrn => vec![Role::CurrentLatent, Role::PredictedLatent, Role::Reflex],
            Combination::DpnBrn => vec![Role::Reflex, Role::Affordance],
            Combination::DpnBrnMpn => Role::ALL.to_vec(),
        }
    }

    pub fn uses_mpn(self) -> bool {
        matches!(self, Combination::MpnBrn | Combination::DpnBrnMpn)
    }

    pub fn uses_dpn(self) -> bool {
        matches!(self, Combination::DpnBrn | Combination::DpnBrnMpn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Combination::Brn => "brn",
            Combination::MpnBrn => "mpn+brn",
            Combination::DpnBrn => "dpn+brn",
            Combination::DpnBrnMpn => "dpn+brn+mpn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "brn" => Ok(Combination::Brn),
            "mpn+brn" => Ok(Combination::MpnBrn),
            "dpn+brn" => Ok(Combination::DpnBrn),
            "dpn+brn+mpn" => Ok(Combination::DpnBrnMpn),
            other => Err(CoreError::validation(format!(
                "unknown combination `{other}` (expected brn, mpn+brn, dpn+brn, dpn+brn+mpn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeMethod {
    ConvUnconstrained,
    ConvConstrained,
    Concat,
    Attention,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 4] = [
        MergeMethod::ConvUnconstrained,
        MergeMethod::ConvConstrained,
        MergeMethod::Concat,
        MergeMethod::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::ConvUnconstrained => "conv_unconstrained",
            MergeMethod::ConvConstrained => "conv_constrained",
            MergeMethod::Concat => "concat",
            MergeMethod::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv_unconstrained" => Ok(MergeMethod::ConvUnconstrained),
            "conv_constrained" => Ok(MergeMethod::ConvConstrained),
            "concat" => Ok(MergeMethod::Concat),
            "attention" => Ok(MergeMethod::Attention),
            other => Err(CoreError::validation(format!("unknown merge method `{other}`"))),
        }
    }
}

/// Widths of the concatenation ladder: linear interpolation from p*d down
/// to d over three layers.
pub fn concat_ladder(p: usize, d: usize) -> [usize; 3] {
    let start = (p * d) as f64;
    let end = d as f64;
    let at = |k: f64| (start + (end - start) * k / 3.0).round() as usize;
    [at(1.0), at(2.0), at(3.0)]
}

enum Params {
    /// Kernel weights, one per embedding; the constrained variant stores
    /// free logits mapped through a normalized exponential so the simplex
    /// constraint holds by construction after every optimizer step.
    Conv { kernel: ParamRef, constrained: bool },
    Concat { layers: Vec<Linear> },
    Attention { wq: Linear, wk: Linear, wv: Linear },
}

/// One fusion head. Parameters are registered into the caller's set (they
/// train with the action network).
pub struct Fusion {
    pub method: MergeMethod,
    pub roles: Vec<Role>,
    pub dim: usize,
    params: Params,
}

impl Fusion {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut DetRng,
        method: MergeMethod,
        roles: Vec<Role>,
        dim: usize,
    ) -> Self {
        assert!(!roles.is_empty() && roles.len() <= 4, "fusion takes 1..=4 embeddings");
        let p = roles.len();
        let params = match method {
            MergeMethod::ConvUnconstrained => {
                // Start at the uniform average.
                let kernel = ps.add("fusion.kernel", Tensor::full(&[1, p], 1.0 / p as f64));
                Params::Conv { kernel, constrained: false }
            }
            MergeMethod::ConvConstrained => {
                let kernel = ps.add("fusion.kernel_logits", Tensor::zeros(&[1, p]));
                Params::Conv { kernel, constrained: true }
            }
            MergeMethod::Concat => {
                let widths = concat_ladder(p, dim);
                let mut layers = Vec::with_capacity(3);
                let mut w_in = p * dim;
                for (i, &w_out) in widths.iter().enumerate() {
                    layers.push(Linear::new(ps, rng, &format!("fusion.fc{i}"), w_in, w_out, true));
                    w_in = w_out;
                }
                Params::Concat { layers }
            }
            MergeMethod::Attention => Params::Attention {
                wq: Linear::new(ps, rng, "fusion.wq", dim, dim, false),
                wk: Linear::new(ps, rng, "fusion.wk", dim, dim, false),
                wv: Linear::new(ps, rng, "fusion.wv", dim, dim, false),
            },
        };
        Fusion { method, roles, dim, params }
    }

    pub fn p(&self) -> usize {
        self.roles.len()
    }

    /// Merge per-role embeddings (each (batch, dim), canonical order) into
    /// the fused feature (batch, dim).
    pub fn forward(&self, s: &mut Session, embeddings: &[Var]) -> Var {
        assert_eq!(embeddings.len(), self.p(), "embedding count must match configured roles");
        for &e in embeddings {
            let shape = s.tape.value(e).shape();
            assert_eq!(shape[1], self.dim, "embedding width {} != {}", shape[1], self.dim);
        }
        match &self.params {
            Params::Conv { kernel, constrained } => {
                let k = s.p(*kernel);
                let weights = if *constrained { s.tape.softmax(k) } else { k };
                let mut acc: Option<Var> = None;
                for (j, &e) in embeddings.iter().enumerate() {
                    let wj = s.tape.narrow_cols(weights, j, 1);
                    let scaled = s.tape.scale_by_scalar(e, wj);
                    acc = Some(match acc {
                        Some(a) => s.tape.add(a, scaled),
                        None => scaled,
                    });
                }
                acc.unwrap()
            }
            Params::Concat { layers } => {
                let mut h = s.tape.concat_cols(embeddings);
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(s, h);
                    if i + 1 < layers.len() {
                        h = s.tape.relu(h);
                    }
                }
                h
            }
            Params::Attention { .. } => {
                let (outputs, _) = self.attention_parts(s, embeddings);
                let mut acc: Option<Var> = None;
                for &o in &outputs {
                    acc = Some(match acc {
                        Some(a) => s.tape.add(a, o),
                        None => o,
                    });
                }
                let sum = acc.unwrap();
                s.tape.mul_scalar(sum, 1.0 / self.p() as f64)
            }
        }
    }

    /// Per-token attention outputs and attention weight rows (each row
    /// (batch, p), softmax-normalized). Raw dot-product scores, no scaling.
    pub fn attention_parts(&self, s: &mut Session, embeddings: &[Var]) -> (Vec<Var>, Vec<Var>) {
        let (wq, wk, wv) = match &self.params {
            Params::Attention { wq, wk, wv } => (wq, wk, wv),
            _ => panic!("attention_parts on a non-attention fusion"),
        };
        let p = embeddings.len();
        let queries: Vec<Var> = embeddings.iter().map(|&e| wq.forward(s, e)).collect();
        let keys: Vec<Var> = embeddings.iter().map(|&e| wk.forward(s, e)).collect();
        let values: Vec<Var> = embeddings.iter().map(|&e| wv.forward(s, e)).collect();
        let mut outputs = Vec::with_capacity(p);
        let mut weight_rows = Vec::with_capacity(p);
        for j in 0..p {
            let scores: Vec<Var> = (0..p).map(|b| s.tape.row_dot(queries[j], keys[b])).collect();
            let score_row = s.tape.concat_cols(&scores);
            let attn = s.tape.softmax(score_row);
            weight_rows.push(attn);
            let mut acc: Option<Var> = None;
            for (b, &v) in values.iter().enumerate() {
                let a_b = s.tape.narrow_cols(attn, b, 1);
                let contrib = s.tape.mul_col_broadcast(a_b, v);
                acc = Some(match acc {
                    Some(x) => s.tape.add(x, contrib),
                    None => contrib,
                });
            }
            outputs.push(acc.unwrap());
        }
        (outputs, weight_rows)
    }

    /// Resolved convolution weights (after the simplex map when
    /// constrained); only meaningful for the convolution strategies.
    pub fn conv_weights(&self, ps: &ParamSet) -> Option<Vec<f64>> {
        match &self.params {
            Params::Conv { kernel, constrained } => {
                let raw = ps.get(*kernel).data().to_vec();
                if *constrained {
                    let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = raw.iter().map(|&v| (v - mx).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    Some(exps.into_iter().map(|e| e / z).collect())
                } else {
                    Some(raw)
                }
            }
            _ => None,
        }
    }

    /// Overwrite the (unconstrained) kernel; used by attribution fixtures.
    pub fn set_conv_kernel(&self, ps: &mut ParamSet, weights: &[f64]) -> Result<()> {
        match &self.params {
            Params::Conv { kernel, constrained: false } => {
                if weights.len() != self.p() {
                    return Err(CoreError::validation(format!(
                        "kernel length {} != embedding count {}",
                        weights.len(),
                        self.p()
                    )));
                }
                ps.set(*kernel, Tensor::new(&[1, weights.len()], weights.to_vec()));
                Ok(())
            }
            _ => Err(CoreError::validation("kernel override requires the unconstrained convolution")),
        }
    }

    #[cfg(test)]
    pub(crate) fn raw_params(&self) -> &Params {
        &self.params
    }
}

/// Plain convolution merge of raw embedding tensors (the strategy's math
/// without the parameter plumbing): alpha[d] = sum_j kernel[j] * e_j[d].
pub fn merge_conv(embeddings: &[Tensor], kernel: &[f64]) -> Result<Tensor> {
    if embeddings.is_empty() || embeddings.len() != kernel.len() {
        return Err(CoreError::validation(format!(
            "kernel length {} must match embedding count {}",
            kernel.len(),
            embeddings.len()
        )));
    }
    let shape = embeddings[0].shape().to_vec();
    let mut out = Tensor::zeros(&shape);
    for (e, &k) in embeddings.iter().zip(kernel) {
        if e.shape() != shape.as_slice() {
            return Err(CoreError::validation("embedding shapes differ"));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(e.data()) {
            *o += k * v;
        }
    }
    Ok(out)
}
