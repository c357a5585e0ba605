//! Expert banks with top-K softplus/softmax gating.
//!
//! A bank decouples its input across `n` experts and fuses the expert
//! outputs with per-row gate weights. The same machinery runs on encoder
//! features and on classifier logits, each bank with its own parameters.
//! Output width always equals input width, so a bank can be inserted or
//! removed without touching the surrounding layers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{LeafError, Result};
use crate::nn::{BoundParams, LinearLayer, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpertKind {
    /// Single affine map `in -> in`.
    Linear,
    /// `in -> in/r -> ReLU -> in`.
    Bottleneck,
    /// Bottleneck plus an identity skip.
    Residual,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 3] = [ExpertKind::Linear, ExpertKind::Bottleneck, ExpertKind::Residual];
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertKind::Linear => "linear",
            ExpertKind::Bottleneck => "bottleneck",
            ExpertKind::Residual => "residual",
        })
    }
}

impl FromStr for ExpertKind {
    type Err = LeafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ExpertKind::Linear),
            "bottleneck" => Ok(ExpertKind::Bottleneck),
            "residual" => Ok(ExpertKind::Residual),
            other => Err(LeafError::config(format!("unknown expert kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expert {
    kind: ExpertKind,
    first: LinearLayer,
    second: Option<LinearLayer>,
}

impl Expert {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: ExpertKind,
        width: usize,
        bottleneck_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match kind {
            ExpertKind::Linear => Ok(Self {
                kind,
                first: LinearLayer::new(store, &format!("{name}.fc"), width, width, rng)?,
                second: None,
            }),
            ExpertKind::Bottleneck | ExpertKind::Residual => {
                let hidden = (width / bottleneck_ratio).max(1);
                let first = LinearLayer::new(store, &format!("{name}.down"), width, hidden, rng)?;
                let second = LinearLayer::new(store, &format!("{name}.up"), hidden, width, rng)?;
                Ok(Self {
                    kind,
                    first,
                    second: Some(second),
                })
            }
        }
    }

    pub fn kind(&self) -> ExpertKind {
        self.kind
    }

    /// Every parameter owned by this expert.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.first.weight, self.first.bias];
        if let Some(s) = &self.second {
            ids.extend([s.weight, s.bias]);
        }
        ids
    }

    /// Layer producing the expert's output (the `up` projection, or the
    /// only layer of a linear expert).
    pub fn output_layer(&self) -> LinearLayer {
        self.second.unwrap_or(self.first)
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, params, x)?;
        let Some(second) = &self.second else {
            return Ok(h);
        };
        let h = tape.relu(h)?;
        let out = second.forward(tape, params, h)?;
        match self.kind {
            ExpertKind::Residual => tape.add(out, x),
            _ => Ok(out),
        }
    }
}

/// Per-row expert weights produced by a gate.
#[derive(Debug, Clone)]
pub struct GateDecision {
    /// `batch x n`; each row is a probability vector with exactly `n - K` zeros.
    pub weights: Var,
    /// `active_mask[row][j]` is true when expert `j` survived top-K.
    pub active_mask: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankConfig {
    pub width: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub kind: ExpertKind,
    pub bottleneck_ratio: usize,
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(LeafError::param("expert width must be >= 1"));
        }
        if self.num_experts == 0 {
            return Err(LeafError::param("num_experts must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(LeafError::param(format!(
                "top_k = {} must lie in 1..={}",
                self.top_k, self.num_experts
            )));
        }
        if self.bottleneck_ratio == 0 {
            return Err(LeafError::param("bottleneck_ratio must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertBank {
    config: BankConfig,
    experts: Vec<Expert>,
    gate_weight: ParamId,
}

impl ExpertBank {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: BankConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let experts = (0..config.num_experts)
            .map(|j| {
                Expert::new(
                    store,
                    &format!("{name}.expert{j}"),
                    config.kind,
                    config.width,
                    config.bottleneck_ratio,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let gate_weight = store.add(
            format!("{name}.gate"),
            crate::nn::xavier_uniform(rng, config.width, config.num_experts),
        );
        Ok(Self {
            config,
            experts,
            gate_weight,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn gate_weight(&self) -> ParamId {
        self.gate_weight
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn top_k(&self) -> usize {
        self.config.top_k
    }

    /// Changes K without touching parameters.
    pub fn set_top_k(&mut self, k: usize) -> Result<()> {
        let cfg = BankConfig {
            top_k: k,
            ..self.config
        };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.1 != self.config.width {
            return Err(LeafError::Shape {
                op: "expert_bank",
                left: shape,
                right: (self.config.width, self.config.num_experts),
            });
        }
        Ok(())
    }

    /// `softmax(topk(softplus(x · w_gate)))`, row by row.
    pub fn gate(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<GateDecision> {
        self.check_input(tape, x)?;
        let logits = tape.matmul(x, params.get(self.gate_weight))?;
        let activated = tape.softplus(logits)?;
        let masked = tape.topk_mask(activated, self.config.top_k)?;
        let weights = tape.softmax_rows(masked)?;
        let w = tape.value(weights);
        let active_mask = (0..w.rows())
            .map(|r| w.row(r).iter().map(|&v| v > 0.0).collect())
            .collect();
        Ok(GateDecision {
            weights,
            active_mask,
        })
    }

    /// `Σ_j G(x)_j · E_j(x)`.
    pub fn fuse(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let decision = self.gate(tape, params, x)?;
        self.fuse_with(tape, params, x, &decision)
    }

    pub fn fuse_with(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: Var,
        decision: &GateDecision,
    ) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (j, expert) in self.experts.iter().enumerate() {
            let out = expert.forward(tape, params, x)?;
            let w = tape.slice_cols(decision.weights, j, j + 1)?;
            let term = tape.mul(out, w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        Ok(acc.expect("bank has at least one expert"))
    }

    /// Overwrites expert `j` so that it computes the identity map: a linear
    /// expert gets `W = I, b = 0`; bottleneck experts get zeroed `up`
    /// weights (a residual expert then passes its input through).
    pub fn set_expert_identity(&self, store: &mut ParamStore, j: usize) {
        let expert = &self.experts[j];
        match expert.kind {
            ExpertKind::Linear => {
                *store.get_mut(expert.first.weight) = Tensor::identity(self.config.width);
                *store.get_mut(expert.first.bias) = Tensor::zeros(1, self.config.width);
            }
            ExpertKind::Bottleneck | ExpertKind::Residual => {
                let up = expert.output_layer();
                let (r, c) = store.get(up.weight).shape();
                *store.get_mut(up.weight) = Tensor::zeros(r, c);
                *store.get_mut(up.bias) = Tensor::zeros(1, c);
            }
        }
    }
}
