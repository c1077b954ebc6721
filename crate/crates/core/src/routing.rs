//! Gate networks, top-k routing, the load-balancing auxiliary loss, and
//! batch-prioritized dispatch under expert capacity.
//!
//! Three gate designs are supported: a linear gate (the 1x1 convolution,
//! applied per token), a cosine-similarity gate against learned latent
//! codes, and an L2-distance variant of the same two-layer design.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{top_k, Element, Graph, Tensor, Var};

/// Gate architecture. Cosine and L2 project tokens to `proj_dim` and score
/// them against `num_experts` learned codes, divided by `temperature`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GateKind {
    Linear,
    Cosine {
        proj_dim: usize,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    L2 {
        proj_dim: usize,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
}

fn default_temperature() -> f64 {
    1.0
}

impl GateKind {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            GateKind::Linear => Ok(()),
            GateKind::Cosine { proj_dim, temperature } | GateKind::L2 { proj_dim, temperature } => {
                if *proj_dim == 0 || *proj_dim > dim {
                    return Err(Error::InvalidArgument(format!(
                        "gate proj_dim {proj_dim} must be in [1, {dim}]"
                    )));
                }
                if *temperature <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "gate temperature {temperature} must be positive"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Gate parameters bound into a graph (the model owns the tensors).
#[derive(Debug, Clone)]
pub enum GateVars {
    /// logits = x W + b
    Linear { w: Var, b: Var },
    /// logits = normalize(x P) . normalize(codes)^T / temperature
    Cosine { proj: Var, codes: Var, temperature: f64 },
    /// logits = -|| x P - codes ||_2 / temperature
    L2 { proj: Var, codes: Var, temperature: f64 },
}

/// Per-token routing outcome: full softmax probabilities plus the chosen
/// experts. `topk_weights[t][j] == probs[t][topk_indices[t][j]]`; the
/// weights are the raw softmax values — they are not renormalized after
/// the top-k cut.
#[derive(Debug, Clone)]
pub struct RoutingDecision<E: Element> {
    pub probs: Tensor<E>,
    pub topk_indices: Vec<Vec<usize>>,
    pub topk_weights: Vec<Vec<E>>,
}

impl<E: Element> RoutingDecision<E> {
    pub fn tokens(&self) -> usize {
        self.topk_indices.len()
    }

    pub fn num_experts(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.topk_indices.first().map_or(0, |r| r.len())
    }

    /// Max gate weight of a token (its first choice, since choices are
    /// stored in descending weight order).
    pub fn max_weight(&self, token: usize) -> E {
        self.topk_weights[token][0]
    }
}

/// Per-expert slot budget. `Factor(f)` grants each expert
/// `ceil(f * T * k / N)` slots; `Unlimited` never drops a token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CapacityConfig {
    Unlimited,
    Factor(f64),
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig::Unlimited
    }
}

impl CapacityConfig {
    pub fn slots(&self, tokens: usize, k: usize, num_experts: usize) -> Option<usize> {
        match self {
            CapacityConfig::Unlimited => None,
            CapacityConfig::Factor(f) => {
                let raw = f * tokens as f64 * k as f64 / num_experts as f64;
                Some(raw.ceil() as usize)
            }
        }
    }
}

/// One token-choice admitted to an expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment<E> {
    pub token: usize,
    /// Which of the token's k choices this was (0 = strongest).
    pub rank: usize,
    pub weight: E,
}

/// Output of batch-prioritized dispatch: per-expert admitted token-choices
/// in processing order, plus the dropped choices.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan<E> {
    pub per_expert: Vec<Vec<Assignment<E>>>,
    pub dropped: Vec<(usize, usize)>,
    pub slots: Option<usize>,
}

impl<E: Element> DispatchPlan<E> {
    pub fn assigned_count(&self) -> usize {
        self.per_expert.iter().map(Vec::len).sum()
    }
}

/// Record the gate logits for `x` ([T, d]) as graph ops, so gradients flow
/// into the gate parameters. Returns the logits var.
pub fn gate_logits<E: Element>(g: &mut Graph<E>, x: Var, gate: &GateVars) -> Result<Var> {
    match gate {
        GateVars::Linear { w, b } => g.linear(x, *w, Some(*b)),
        GateVars::Cosine { proj, codes, temperature } => {
            let z = g.matmul(x, *proj)?;
            let zn = g.l2_normalize_rows(z, 1e-12)?;
            let cn = g.l2_normalize_rows(*codes, 1e-12)?;
            let sim = g.matmul_nt(zn, cn)?;
            Ok(g.scale(sim, 1.0 / temperature))
        }
        GateVars::L2 { proj, codes, temperature } => {
            // ||z - c||^2 = ||z||^2 - 2 z.c + ||c||^2, rowwise vs codes
            let z = g.matmul(x, *proj)?;
            let zz = g.mul(z, z)?;
            let znorm = g.sum_axis1(zz)?;
            let cc = g.mul(*codes, *codes)?;
            let cnorm = g.sum_axis1(cc)?;
            let cross = g.matmul_nt(z, *codes)?;
            let m2 = g.scale(cross, -2.0);
            let with_c = g.add_row(m2, cnorm)?;
            let sq = g.add_col(with_c, znorm)?;
            let dist = g.sqrt(sq);
            Ok(g.scale(dist, -1.0 / temperature))
        }
    }
}

/// Route tokens already bound in a graph: records gate -> softmax ops and
/// extracts the concrete decision. The probs var stays differentiable.
pub fn route_in_graph<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    gate: &GateVars,
    k: usize,
) -> Result<(Var, RoutingDecision<E>)> {
    let logits = gate_logits(g, x, gate)?;
    let n = *g.shape(logits).last().unwrap();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "route: k={k} out of range for {n} experts"
        )));
    }
    if !g.value(logits).iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gate logits"));
    }
    let probs = g.softmax(logits);
    let pv = g.value(probs);
    let mut topk_indices = Vec::with_capacity(g.shape(probs)[0]);
    let mut topk_weights = Vec::with_capacity(g.shape(probs)[0]);
    for row in pv.chunks_exact(n) {
        let (idx, w) = top_k(row, k)?;
        topk_indices.push(idx);
        topk_weights.push(w);
    }
    let decision = RoutingDecision {
        probs: g.tensor(probs),
        topk_indices,
        topk_weights,
    };
    Ok((probs, decision))
}

/// Standalone gate parameters for routing outside a model.
#[derive(Debug, Clone)]
pub enum GateParams<E: Element> {
    Linear { w: Tensor<E>, b: Tensor<E> },
    Cosine { proj: Tensor<E>, codes: Tensor<E>, temperature: f64 },
    L2 { proj: Tensor<E>, codes: Tensor<E>, temperature: f64 },
}

impl<E: Element> GateParams<E> {
    pub fn bind(&self, g: &mut Graph<E>) -> GateVars {
        match self {
            GateParams::Linear { w, b } => GateVars::Linear {
                w: g.leaf(w),
                b: g.leaf(b),
            },
            GateParams::Cosine { proj, codes, temperature } => GateVars::Cosine {
                proj: g.leaf(proj),
                codes: g.leaf(codes),
                temperature: *temperature,
            },
            GateParams::L2 { proj, codes, temperature } => GateVars::L2 {
                proj: g.leaf(proj),
                codes: g.leaf(codes),
                temperature: *temperature,
            },
        }
    }
}

/// Route a token matrix through a gate: softmax over experts, then top-k
/// with ties broken toward the lower expert index.
pub fn route<E: Element>(
    x: &Tensor<E>,
    gate: &GateParams<E>,
    k: usize,
) -> Result<RoutingDecision<E>> {
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let gv = gate.bind(&mut g);
    let (_probs, decision) = route_in_graph(&mut g, xv, &gv, k)?;
    Ok(decision)
}

/// Load-balance auxiliary loss as graph ops: CV^2 of per-expert importance
/// plus CV^2 of the soft load. Importance is fully differentiable; the
/// soft-load mask treats the chosen indices as constants.
pub fn load_balance_loss_in_graph<E: Element>(
    g: &mut Graph<E>,
    probs: Var,
    decision: &RoutingDecision<E>,
) -> Result<Var> {
    let n = decision.num_experts();
    let t = decision.tokens();
    let mut mask = vec![E::ZERO; t * n];
    for (ti, row) in decision.topk_indices.iter().enumerate() {
        for &e in row {
            mask[ti * n + e] = E::ONE;
        }
    }
    let importance = g.sum_axis0(probs)?;
    let cv_imp = g.cv_squared(importance)?;
    let mask_c = g.constant(vec![t, n], mask)?;
    let selected = g.mul(probs, mask_c)?;
    let soft_load = g.sum_axis0(selected)?;
    let cv_load = g.cv_squared(soft_load)?;
    g.add(cv_imp, cv_load)
}

/// Value-level load-balance loss of a routing decision.
pub fn load_balance_loss<E: Element>(decision: &RoutingDecision<E>) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let probs = g.leaf(&decision.probs);
    let loss = load_balance_loss_in_graph(&mut g, probs, decision)?;
    Ok(g.tensor(loss))
}

/// Load-balance loss of one MoE layer over a whole batch: the per-image
/// decisions are stacked into one routing table (importance and load sum
/// over every token the layer processed), matching the batch-level
/// auxiliary loss the training objective uses.
pub fn batch_load_balance_in_graph<E: Element>(
    g: &mut Graph<E>,
    parts: &[(Var, &RoutingDecision<E>)],
) -> Result<Var> {
    match parts {
        [] => Err(Error::InvalidArgument(
            "batch_load_balance: no decisions".into(),
        )),
        [(probs, decision)] => load_balance_loss_in_graph(g, *probs, decision),
        many => {
            let vars: Vec<Var> = many.iter().map(|(v, _)| *v).collect();
            let cat = g.concat_rows(&vars)?;
            let merged = RoutingDecision {
                probs: g.tensor(cat),
                topk_indices: many
                    .iter()
                    .flat_map(|(_, d)| d.topk_indices.iter().cloned())
                    .collect(),
                topk_weights: many
                    .iter()
                    .flat_map(|(_, d)| d.topk_weights.iter().cloned())
                    .collect(),
            };
            load_balance_loss_in_graph(g, cat, &merged)
        }
    }
}

/// Batch Prioritized Routing. Tokens are processed in descending order of
/// their max gate weight (ties: lower token index first); each token's
/// choices are tried in rank order and dropped individually when the
/// expert is full. No re-routing to non-chosen experts.
pub fn bpr_dispatch<E: Element>(
    decision: &RoutingDecision<E>,
    capacity: CapacityConfig,
) -> DispatchPlan<E> {
    let t = decision.tokens();
    let n = decision.num_experts();
    let k = decision.k();
    let slots = capacity.slots(t, k, n);

    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        decision
            .max_weight(b)
            .total_cmp(&decision.max_weight(a))
            .then_with(|| a.cmp(&b))
    });

    let mut per_expert: Vec<Vec<Assignment<E>>> = vec![Vec::new(); n];
    let mut dropped = Vec::new();
    for &token in &order {
        for (rank, (&expert, &weight)) in decision.topk_indices[token]
            .iter()
            .zip(&decision.topk_weights[token])
            .enumerate()
        {
            let full = slots.is_some_and(|s| per_expert[expert].len() >= s);
            if full {
                dropped.push((token, rank));
            } else {
                per_expert[expert].push(Assignment { token, rank, weight });
            }
        }
    }
    DispatchPlan {
        per_expert,
        dropped,
        slots,
    }
}

/// Weighted recombination of expert outputs: y[t] = sum over admitted
/// choices of weight * expert_output. Tokens whose every choice was
/// dropped come back as the zero vector (the block's skip connection
/// carries their signal).
pub fn combine<E: Element>(
    plan: &DispatchPlan<E>,
    expert_outputs: &[Tensor<E>],
    tokens: usize,
) -> Result<Tensor<E>> {
    if expert_outputs.len() != plan.per_expert.len() {
        return Err(Error::ShapeMismatch {
            op: "combine",
            expected: vec![plan.per_expert.len()],
            got: vec![expert_outputs.len()],
        });
    }
    let dim = expert_outputs
        .iter()
        .find(|t| t.numel() > 0)
        .map(|t| t.shape()[1]);
    let Some(dim) = dim else {
        return Err(Error::InvalidArgument(
            "combine: no expert produced output".into(),
        ));
    };
    let mut out = vec![E::ZERO; tokens * dim];
    for (assignments, outputs) in plan.per_expert.iter().zip(expert_outputs) {
        if assignments.is_empty() {
            continue;
        }
        if outputs.shape() != [assignments.len(), dim] {
            return Err(Error::ShapeMismatch {
                op: "combine",
                expected: vec![assignments.len(), dim],
                got: outputs.shape().to_vec(),
            });
        }
        for (a, row) in assignments.iter().zip(outputs.data().chunks_exact(dim)) {
            for (o, &v) in out[a.token * dim..(a.token + 1) * dim].iter_mut().zip(row) {
                *o = *o + a.weight * v;
            }
        }
    }
    Tensor::new(vec![tokens, dim], out)
}
