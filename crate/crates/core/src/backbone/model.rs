//! Parameter store, deterministic initialization, and the forward pass.
//!
//! Model construction runs one shared layout pass that registers every
//! parameter (name, shape, metadata) in a fixed order; materializing
//! builds draw initial values from a seeded generator in that same order,
//! so identical seeds give bitwise-identical models. Accounting uses the
//! layout pass alone and never allocates parameter data.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::moe::{
    convnext_block_forward, vit_block_forward, AttentionVars, ConvNextBlockVars, ExpertVars,
    FfnVars, LinearVars, MoeBranchVars, NormVars, RoutingInfo, VitBlockVars,
};
use crate::routing::{CapacityConfig, GateVars};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::trace::{RoutingTrace, TraceRecord};

use super::spec::{ArchSpec, IsoBlockKind, ModelSpec, PlacementStrategy};

pub const LN_EPS: f64 = 1e-6;

pub type PId = usize;

/// Coarse origin of a parameter, used by the cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embed,
    Stem,
    Block(usize),
    Downsample(usize),
    MoeGate(usize),
    MoeExpert { block: usize, expert: usize },
    Head,
}

#[derive(Debug, Clone, Copy)]
pub struct ParamMeta {
    pub group: ParamGroup,
    pub no_decay: bool,
}

#[derive(Debug, Clone)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub meta: ParamMeta,
}

impl LayoutEntry {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub meta: ParamMeta,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

trait ParamSink {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init, meta: ParamMeta) -> PId;
}

struct LayoutSink {
    entries: Vec<LayoutEntry>,
}

impl ParamSink for LayoutSink {
    fn add(&mut self, name: String, shape: Vec<usize>, _init: Init, meta: ParamMeta) -> PId {
        self.entries.push(LayoutEntry { name, shape, meta });
        self.entries.len() - 1
    }
}

struct MaterializeSink<'a, E: Element> {
    entries: Vec<ParamEntry<E>>,
    rng: &'a mut ChaCha8Rng,
}

/// Normal(0, std) truncated to two standard deviations.
fn trunc_normal<E: Element>(rng: &mut ChaCha8Rng, std: f64) -> E {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return E::from_f64(z * std);
        }
    }
}

impl<E: Element> ParamSink for MaterializeSink<'_, E> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init, meta: ParamMeta) -> PId {
        let numel: usize = shape.iter().product();
        let data: Vec<E> = match init {
            Init::TruncNormal(std) => (0..numel).map(|_| trunc_normal(self.rng, std)).collect(),
            Init::Zeros => vec![E::ZERO; numel],
            Init::Ones => vec![E::ONE; numel],
            Init::Const(v) => vec![E::from_f64(v); numel],
        };
        let tensor = Tensor::new(shape, data).expect("layout shapes are consistent");
        self.entries.push(ParamEntry { name, tensor, meta });
        self.entries.len() - 1
    }
}

// ── reference tree (indices into the store) ─────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LinearRef {
    pub w: PId,
    pub b: Option<PId>,
}

#[derive(Debug, Clone, Copy)]
pub struct NormRef {
    pub gamma: PId,
    pub beta: PId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnRef {
    pub q: LinearRef,
    pub k: LinearRef,
    pub v: LinearRef,
    pub o: LinearRef,
}

#[derive(Debug, Clone)]
pub enum GateRef {
    Linear(LinearRef),
    Projected {
        proj: PId,
        codes: PId,
        temperature: f64,
        l2: bool,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertRef {
    pub fc1: LinearRef,
    pub fc2: LinearRef,
}

#[derive(Debug, Clone)]
pub struct MoeRef {
    pub gate: GateRef,
    pub experts: Vec<ExpertRef>,
    pub top_k: usize,
    pub capacity: CapacityConfig,
}

#[derive(Debug, Clone)]
pub enum FfnRef {
    Dense(ExpertRef),
    Moe(MoeRef),
}

impl FfnRef {
    pub fn is_moe(&self) -> bool {
        matches!(self, FfnRef::Moe(_))
    }
}

#[derive(Debug, Clone)]
pub struct VitBlockRef {
    pub norm1: NormRef,
    pub attn: AttnRef,
    pub norm2: NormRef,
    pub ffn: FfnRef,
}

#[derive(Debug, Clone)]
pub struct ConvBlockRef {
    pub dw_kernel: PId,
    pub dw_bias: PId,
    pub norm: NormRef,
    pub ffn: FfnRef,
    pub layer_scale: Option<PId>,
}

#[derive(Debug, Clone)]
pub enum IsoBlockRef {
    Vit(VitBlockRef),
    Conv(ConvBlockRef),
}

#[derive(Debug, Clone)]
pub struct IsoRef {
    pub patch: LinearRef,
    pub cls: Option<PId>,
    pub pos: Option<PId>,
    pub heads: usize,
    pub blocks: Vec<IsoBlockRef>,
    pub final_norm: NormRef,
    pub head: LinearRef,
}

#[derive(Debug, Clone)]
pub struct HierRef {
    pub stem: LinearRef,
    pub stem_norm: NormRef,
    /// Between stages i and i+1, i in 0..3: norm then strided linear.
    pub downsamples: Vec<(NormRef, LinearRef)>,
    /// All blocks in global order.
    pub blocks: Vec<ConvBlockRef>,
    pub final_norm: NormRef,
    pub head: LinearRef,
}

#[derive(Debug, Clone)]
pub enum NetRef {
    Iso(IsoRef),
    Hier(HierRef),
}

// ── layout construction (shared by build and accounting) ────────────────

struct RefBuilder<'a> {
    sink: &'a mut dyn ParamSink,
}

impl<'a> RefBuilder<'a> {
    fn linear(
        &mut self,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: ParamGroup,
    ) -> LinearRef {
        let w = self.sink.add(
            format!("{name}.w"),
            vec![d_in, d_out],
            Init::TruncNormal(0.02),
            ParamMeta { group, no_decay: false },
        );
        let b = bias.then(|| {
            self.sink.add(
                format!("{name}.b"),
                vec![d_out],
                Init::Zeros,
                ParamMeta { group, no_decay: true },
            )
        });
        LinearRef { w, b }
    }

    fn norm(&mut self, name: &str, d: usize, group: ParamGroup) -> NormRef {
        let gamma = self.sink.add(
            format!("{name}.g"),
            vec![d],
            Init::Ones,
            ParamMeta { group, no_decay: true },
        );
        let beta = self.sink.add(
            format!("{name}.b"),
            vec![d],
            Init::Zeros,
            ParamMeta { group, no_decay: true },
        );
        NormRef { gamma, beta }
    }

    fn expert(&mut self, name: &str, d: usize, hidden: usize, group: ParamGroup) -> ExpertRef {
        ExpertRef {
            fc1: self.linear(&format!("{name}.fc1"), d, hidden, true, group),
            fc2: self.linear(&format!("{name}.fc2"), hidden, d, true, group),
        }
    }

    fn gate(&mut self, name: &str, d: usize, spec: &ModelSpec, block: usize) -> GateRef {
        let moe = spec.moe.as_ref().expect("gate only built for MoE blocks");
        let group = ParamGroup::MoeGate(block);
        match &moe.gate {
            crate::routing::GateKind::Linear => {
                GateRef::Linear(self.linear(name, d, moe.num_experts, true, group))
            }
            crate::routing::GateKind::Cosine { proj_dim, temperature } => GateRef::Projected {
                proj: self.sink.add(
                    format!("{name}.proj"),
                    vec![d, *proj_dim],
                    Init::TruncNormal(0.02),
                    ParamMeta { group, no_decay: false },
                ),
                codes: self.sink.add(
                    format!("{name}.codes"),
                    vec![moe.num_experts, *proj_dim],
                    Init::TruncNormal(0.02),
                    ParamMeta { group, no_decay: false },
                ),
                temperature: *temperature,
                l2: false,
            },
            crate::routing::GateKind::L2 { proj_dim, temperature } => GateRef::Projected {
                proj: self.sink.add(
                    format!("{name}.proj"),
                    vec![d, *proj_dim],
                    Init::TruncNormal(0.02),
                    ParamMeta { group, no_decay: false },
                ),
                codes: self.sink.add(
                    format!("{name}.codes"),
                    vec![moe.num_experts, *proj_dim],
                    Init::TruncNormal(0.02),
                    ParamMeta { group, no_decay: false },
                ),
                temperature: *temperature,
                l2: true,
            },
        }
    }

    fn ffn(
        &mut self,
        name: &str,
        d: usize,
        dense_ratio: f64,
        spec: &ModelSpec,
        block: usize,
        is_moe: bool,
    ) -> Result<FfnRef> {
        if !is_moe {
            let hidden = ((dense_ratio * d as f64).round() as usize).max(1);
            return Ok(FfnRef::Dense(self.expert(
                &format!("{name}.mlp"),
                d,
                hidden,
                ParamGroup::Block(block),
            )));
        }
        let moe = spec
            .moe
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("MoE block without moe settings".into()))?;
        moe.gate.validate(d)?;
        let hidden = ((moe.mlp_ratio * d as f64).round() as usize).max(1);
        let gate = self.gate(&format!("{name}.gate"), d, spec, block);
        let experts = (0..moe.num_experts)
            .map(|e| {
                self.expert(
                    &format!("{name}.experts.{e}"),
                    d,
                    hidden,
                    ParamGroup::MoeExpert { block, expert: e },
                )
            })
            .collect();
        Ok(FfnRef::Moe(MoeRef {
            gate,
            experts,
            top_k: moe.top_k,
            capacity: moe.capacity,
        }))
    }

    fn vit_block(
        &mut self,
        idx: usize,
        d: usize,
        dense_ratio: f64,
        spec: &ModelSpec,
        is_moe: bool,
    ) -> Result<VitBlockRef> {
        let name = format!("blocks.{idx}");
        let g = ParamGroup::Block(idx);
        Ok(VitBlockRef {
            norm1: self.norm(&format!("{name}.norm1"), d, g),
            attn: AttnRef {
                q: self.linear(&format!("{name}.attn.q"), d, d, true, g),
                k: self.linear(&format!("{name}.attn.k"), d, d, true, g),
                v: self.linear(&format!("{name}.attn.v"), d, d, true, g),
                o: self.linear(&format!("{name}.attn.o"), d, d, true, g),
            },
            norm2: self.norm(&format!("{name}.norm2"), d, g),
            ffn: self.ffn(&name, d, dense_ratio, spec, idx, is_moe)?,
        })
    }

    fn conv_block(
        &mut self,
        idx: usize,
        d: usize,
        dense_ratio: f64,
        spec: &ModelSpec,
        is_moe: bool,
    ) -> Result<ConvBlockRef> {
        let name = format!("blocks.{idx}");
        let g = ParamGroup::Block(idx);
        let dw_kernel = self.sink.add(
            format!("{name}.dw.k"),
            vec![d, 7, 7],
            Init::TruncNormal(0.02),
            ParamMeta { group: g, no_decay: false },
        );
        let dw_bias = self.sink.add(
            format!("{name}.dw.b"),
            vec![d],
            Init::Zeros,
            ParamMeta { group: g, no_decay: true },
        );
        let norm = self.norm(&format!("{name}.norm"), d, g);
        let ffn = self.ffn(&name, d, dense_ratio, spec, idx, is_moe)?;
        // layer scale only on the dense branch; the MoE branch has its own
        // skip and no scaling (Fig. 2 right: conv, norm, gated experts)
        let layer_scale = (!is_moe).then(|| {
            self.sink.add(
                format!("{name}.gamma"),
                vec![d],
                Init::Const(1e-6),
                ParamMeta { group: g, no_decay: true },
            )
        });
        Ok(ConvBlockRef {
            dw_kernel,
            dw_bias,
            norm,
            ffn,
            layer_scale,
        })
    }
}

fn build_refs(spec: &ModelSpec, sink: &mut dyn ParamSink) -> Result<NetRef> {
    spec.validate()?;
    let moe_blocks = spec.moe_blocks()?;
    let mut b = RefBuilder { sink };
    match &spec.arch {
        ArchSpec::Isotropic(s) => {
            let d = s.dim;
            let patch_in = 3 * s.patch_size * s.patch_size;
            let patch = b.linear("patch", patch_in, d, true, ParamGroup::Stem);
            let (cls, pos, tokens) = match s.block {
                IsoBlockKind::Transformer => {
                    let t = s.patch_tokens() + 1;
                    let cls = b.sink.add(
                        "cls".into(),
                        vec![1, d],
                        Init::TruncNormal(0.02),
                        ParamMeta { group: ParamGroup::Embed, no_decay: true },
                    );
                    let pos = b.sink.add(
                        "pos".into(),
                        vec![t, d],
                        Init::TruncNormal(0.02),
                        ParamMeta { group: ParamGroup::Embed, no_decay: true },
                    );
                    (Some(cls), Some(pos), t)
                }
                IsoBlockKind::ConvNext => (None, None, s.patch_tokens()),
            };
            let _ = tokens;
            let mut blocks = Vec::with_capacity(s.depth);
            for i in 0..s.depth {
                let is_moe = moe_blocks.contains(&i);
                let block = match s.block {
                    IsoBlockKind::Transformer => {
                        IsoBlockRef::Vit(b.vit_block(i, d, s.mlp_ratio, spec, is_moe)?)
                    }
                    IsoBlockKind::ConvNext => {
                        IsoBlockRef::Conv(b.conv_block(i, d, s.mlp_ratio, spec, is_moe)?)
                    }
                };
                blocks.push(block);
            }
            let final_norm = b.norm("norm", d, ParamGroup::Head);
            let head = b.linear("head", d, s.num_classes, true, ParamGroup::Head);
            Ok(NetRef::Iso(IsoRef {
                patch,
                cls,
                pos,
                heads: s.heads,
                blocks,
                final_norm,
                head,
            }))
        }
        ArchSpec::Hierarchical(s) => {
            let stem = b.linear("stem", 3 * 16, s.dims[0], true, ParamGroup::Stem);
            let stem_norm = b.norm("stem.norm", s.dims[0], ParamGroup::Stem);
            let mut blocks = Vec::with_capacity(s.total_blocks());
            let mut downsamples = Vec::new();
            let mut global = 0usize;
            for stage in 0..4 {
                if stage > 0 {
                    let dn = b.norm(
                        &format!("downsample.{stage}.norm"),
                        s.dims[stage - 1],
                        ParamGroup::Downsample(stage),
                    );
                    let dl = b.linear(
                        &format!("downsample.{stage}"),
                        s.dims[stage - 1] * 4,
                        s.dims[stage],
                        true,
                        ParamGroup::Downsample(stage),
                    );
                    downsamples.push((dn, dl));
                }
                for _ in 0..s.depths[stage] {
                    let is_moe = moe_blocks.contains(&global);
                    blocks.push(b.conv_block(global, s.dims[stage], s.mlp_ratio, spec, is_moe)?);
                    global += 1;
                }
            }
            let final_norm = b.norm("norm", s.dims[3], ParamGroup::Head);
            let head = b.linear("head", s.dims[3], s.num_classes, true, ParamGroup::Head);
            Ok(NetRef::Hier(HierRef {
                stem,
                stem_norm,
                downsamples,
                blocks,
                final_norm,
                head,
            }))
        }
    }
}

/// Parameter names, shapes, and metadata, without allocating data.
pub fn param_layout(spec: &ModelSpec) -> Result<Vec<LayoutEntry>> {
    let mut sink = LayoutSink { entries: Vec::new() };
    build_refs(spec, &mut sink)?;
    Ok(sink.entries)
}

// ── model ────────────────────────────────────────────────────────────────

/// Per-layer routing byproducts of one image forward.
pub struct LayerRouting<E: Element> {
    pub layer_id: usize,
    pub grid: [usize; 2],
    pub info: RoutingInfo<E>,
}

pub struct ImageForward<E: Element> {
    pub logits: Var,
    pub routing: Vec<LayerRouting<E>>,
}

pub struct ClassifyOutput<E: Element> {
    pub logits: Tensor<E>,
    pub trace: Option<RoutingTrace>,
    /// Mean over the batch of the per-image aux-loss sum.
    pub aux: Tensor<E>,
}

#[derive(Clone)]
pub struct Model<E: Element> {
    pub spec: ModelSpec,
    pub refs: NetRef,
    params: Vec<ParamEntry<E>>,
}

impl<E: Element> Model<E> {
    /// Deterministically initialize a model from a seed. Returns warnings
    /// for ignored settings (a NoMoE placement with moe settings present).
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<(Self, Vec<String>)> {
        use rand::SeedableRng;
        let mut warnings = Vec::new();
        if spec.placement == PlacementStrategy::NoMoE && spec.moe.is_some() {
            warnings.push(
                "placement 'none' ignores the provided moe settings; building dense".to_string(),
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_655f_696e_6974);
        let mut sink = MaterializeSink { entries: Vec::new(), rng: &mut rng };
        let refs = build_refs(spec, &mut sink)?;
        Ok((
            Model {
                spec: spec.clone(),
                refs,
                params: sink.entries,
            },
            warnings,
        ))
    }

    pub fn params(&self) -> &[ParamEntry<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamEntry<E>] {
        &mut self.params
    }

    pub fn num_params(&self) -> u64 {
        self.params.iter().map(|p| p.tensor.numel() as u64).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(on);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Bind every parameter into a graph, in store order.
    pub fn bind(&self, g: &mut Graph<E>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(&p.tensor)).collect()
    }

    /// Accumulate `scale *` the leaf gradients of a completed backward
    /// pass into the parameter tensors.
    pub fn accumulate_grads(&mut self, g: &Graph<E>, binding: &[Var], scale: E) {
        let mut buf: Vec<E> = Vec::new();
        for (p, &v) in self.params.iter_mut().zip(binding) {
            if let Some(grad) = g.grad(v) {
                buf.clear();
                buf.extend(grad.iter().map(|&x| x * scale));
                p.tensor.accumulate_grad(&buf);
            }
        }
    }

    fn lin(&self, r: LinearRef, vars: &[Var]) -> LinearVars {
        LinearVars {
            w: vars[r.w],
            b: r.b.map(|i| vars[i]),
        }
    }

    fn nrm(&self, r: NormRef, vars: &[Var]) -> NormVars {
        NormVars {
            gamma: vars[r.gamma],
            beta: vars[r.beta],
        }
    }

    fn expert_vars(&self, r: &ExpertRef, vars: &[Var]) -> ExpertVars {
        ExpertVars {
            fc1: self.lin(r.fc1, vars),
            fc2: self.lin(r.fc2, vars),
        }
    }

    fn ffn_vars(&self, r: &FfnRef, vars: &[Var]) -> FfnVars {
        match r {
            FfnRef::Dense(e) => FfnVars::Dense(self.expert_vars(e, vars)),
            FfnRef::Moe(m) => FfnVars::Moe(MoeBranchVars {
                gate: match &m.gate {
                    GateRef::Linear(l) => GateVars::Linear {
                        w: vars[l.w],
                        b: vars[l.b.expect("linear gate has bias")],
                    },
                    GateRef::Projected { proj, codes, temperature, l2 } => {
                        if *l2 {
                            GateVars::L2 {
                                proj: vars[*proj],
                                codes: vars[*codes],
                                temperature: *temperature,
                            }
                        } else {
                            GateVars::Cosine {
                                proj: vars[*proj],
                                codes: vars[*codes],
                                temperature: *temperature,
                            }
                        }
                    }
                },
                experts: m.experts.iter().map(|e| self.expert_vars(e, vars)).collect(),
                top_k: m.top_k,
                capacity: m.capacity,
            }),
        }
    }

    /// Forward one [3, H, W] image already bound as `image`. Records
    /// routing info per MoE layer.
    pub fn forward_image(
        &self,
        g: &mut Graph<E>,
        vars: &[Var],
        image: Var,
    ) -> Result<ImageForward<E>> {
        self.forward_image_with(g, vars, image, None)
    }

    /// Forward with an optional per-block skip mask (stochastic depth:
    /// a skipped block passes its input through unchanged).
    pub fn forward_image_with(
        &self,
        g: &mut Graph<E>,
        vars: &[Var],
        image: Var,
        skip: Option<&[bool]>,
    ) -> Result<ImageForward<E>> {
        let skipped = |i: usize| skip.is_some_and(|s| s.get(i).copied().unwrap_or(false));
        let mut routing: Vec<LayerRouting<E>> = Vec::new();
        let logits = match (&self.refs, &self.spec.arch) {
            (NetRef::Iso(net), ArchSpec::Isotropic(s)) => {
                let side = s.image_size / s.patch_size;
                let tokens = g.chw_to_tokens(image)?;
                let patches = g.space_to_depth(tokens, s.image_size, s.image_size, s.patch_size)?;
                let mut x = g.linear(patches, vars[net.patch.w], net.patch.b.map(|i| vars[i]))?;
                if let Some(cls) = net.cls {
                    x = g.concat_rows(&[vars[cls], x])?;
                }
                if let Some(pos) = net.pos {
                    x = g.add(x, vars[pos])?;
                }
                let seq_len = *g.shape(x).first().unwrap();
                for (idx, blk) in net.blocks.iter().enumerate() {
                    if skipped(idx) {
                        continue;
                    }
                    match blk {
                        IsoBlockRef::Vit(vb) => {
                            let block_vars = VitBlockVars {
                                norm1: self.nrm(vb.norm1, vars),
                                attn: AttentionVars {
                                    heads: net.heads,
                                    q: self.lin(vb.attn.q, vars),
                                    k: self.lin(vb.attn.k, vars),
                                    v: self.lin(vb.attn.v, vars),
                                    o: self.lin(vb.attn.o, vars),
                                },
                                norm2: self.nrm(vb.norm2, vars),
                            };
                            let ffn = self.ffn_vars(&vb.ffn, vars);
                            let (y, info) = vit_block_forward(g, x, &block_vars, &ffn, LN_EPS)?;
                            x = y;
                            if let Some(info) = info {
                                routing.push(LayerRouting {
                                    layer_id: idx,
                                    grid: [1, seq_len],
                                    info,
                                });
                            }
                        }
                        IsoBlockRef::Conv(cb) => {
                            let block_vars = ConvNextBlockVars {
                                dw_kernel: vars[cb.dw_kernel],
                                dw_bias: vars[cb.dw_bias],
                                norm: self.nrm(cb.norm, vars),
                                layer_scale: cb.layer_scale.map(|i| vars[i]),
                            };
                            let ffn = self.ffn_vars(&cb.ffn, vars);
                            let (y, info) =
                                convnext_block_forward(g, x, &block_vars, &ffn, side, side, LN_EPS)?;
                            x = y;
                            if let Some(info) = info {
                                routing.push(LayerRouting {
                                    layer_id: idx,
                                    grid: [side, side],
                                    info,
                                });
                            }
                        }
                    }
                }
                let normed =
                    g.layer_norm_affine(x, vars[net.final_norm.gamma], vars[net.final_norm.beta], LN_EPS)?;
                let pooled = if net.cls.is_some() {
                    g.slice_rows(normed, 0, 1)?
                } else {
                    g.mean_rows(normed)?
                };
                g.linear(pooled, vars[net.head.w], net.head.b.map(|i| vars[i]))?
            }
            (NetRef::Hier(net), ArchSpec::Hierarchical(s)) => {
                let tokens = g.chw_to_tokens(image)?;
                let patches = g.space_to_depth(tokens, s.image_size, s.image_size, 4)?;
                let mut x = g.linear(patches, vars[net.stem.w], net.stem.b.map(|i| vars[i]))?;
                x = g.layer_norm_affine(
                    x,
                    vars[net.stem_norm.gamma],
                    vars[net.stem_norm.beta],
                    LN_EPS,
                )?;
                let mut global = 0usize;
                for stage in 0..4 {
                    if stage > 0 {
                        let (dn, dl) = &net.downsamples[stage - 1];
                        let prev = s.stage_grid(stage - 1);
                        let n = g.layer_norm_affine(x, vars[dn.gamma], vars[dn.beta], LN_EPS)?;
                        let grouped = g.space_to_depth(n, prev, prev, 2)?;
                        x = g.linear(grouped, vars[dl.w], dl.b.map(|i| vars[i]))?;
                    }
                    let side = s.stage_grid(stage);
                    for _ in 0..s.depths[stage] {
                        if skipped(global) {
                            global += 1;
                            continue;
                        }
                        let cb = &net.blocks[global];
                        let block_vars = ConvNextBlockVars {
                            dw_kernel: vars[cb.dw_kernel],
                            dw_bias: vars[cb.dw_bias],
                            norm: self.nrm(cb.norm, vars),
                            layer_scale: cb.layer_scale.map(|i| vars[i]),
                        };
                        let ffn = self.ffn_vars(&cb.ffn, vars);
                        let (y, info) =
                            convnext_block_forward(g, x, &block_vars, &ffn, side, side, LN_EPS)?;
                        x = y;
                        if let Some(info) = info {
                            routing.push(LayerRouting {
                                layer_id: global,
                                grid: [side, side],
                                info,
                            });
                        }
                        global += 1;
                    }
                }
                let pooled = g.mean_rows(x)?;
                let normed = g.layer_norm_affine(
                    pooled,
                    vars[net.final_norm.gamma],
                    vars[net.final_norm.beta],
                    LN_EPS,
                )?;
                g.linear(normed, vars[net.head.w], net.head.b.map(|i| vars[i]))?
            }
            _ => unreachable!("refs always match the arch family"),
        };
        Ok(ImageForward { logits, routing })
    }

    /// Batch-level auxiliary loss: per MoE layer, stack every image's
    /// routing table and take the load-balance loss of the stack; sum
    /// over layers. Returns None when the forwards hit no MoE layer.
    pub fn batch_aux(
        &self,
        g: &mut Graph<E>,
        forwards: &[ImageForward<E>],
    ) -> Result<Option<Var>> {
        let mut by_layer: std::collections::BTreeMap<usize, Vec<(Var, &crate::routing::RoutingDecision<E>)>> =
            std::collections::BTreeMap::new();
        for fwd in forwards {
            for lr in &fwd.routing {
                by_layer
                    .entry(lr.layer_id)
                    .or_default()
                    .push((lr.info.probs, &lr.info.decision));
            }
        }
        let mut acc: Option<Var> = None;
        for (_layer, parts) in by_layer {
            let layer_aux = crate::routing::batch_load_balance_in_graph(g, &parts)?;
            acc = Some(match acc {
                Some(a) => g.add(a, layer_aux)?,
                None => layer_aux,
            });
        }
        Ok(acc)
    }

    /// Slice image `b` out of a [B, 3, H, W] batch tensor.
    pub fn image_tensor(images: &Tensor<E>, b: usize) -> Result<Tensor<E>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "image_tensor",
                expected: vec![0, 3, 0, 0],
                got: s.to_vec(),
            });
        }
        let chw = s[1] * s[2] * s[3];
        Tensor::new(
            vec![s[1], s[2], s[3]],
            images.data()[b * chw..(b + 1) * chw].to_vec(),
        )
    }

    /// Forward a [B, 3, H, W] batch for inference: per-image graphs, no
    /// gradients. `labels`, when given, are stored in the trace records.
    pub fn forward_classify(
        &self,
        images: &Tensor<E>,
        labels: Option<&[usize]>,
        record_trace: bool,
    ) -> Result<ClassifyOutput<E>> {
        let s = images.shape().to_vec();
        if s.len() != 4 || s[2] != self.spec.arch.image_size() || s[3] != self.spec.arch.image_size()
        {
            return Err(Error::ShapeMismatch {
                op: "forward_classify",
                expected: vec![
                    0,
                    3,
                    self.spec.arch.image_size(),
                    self.spec.arch.image_size(),
                ],
                got: s,
            });
        }
        let batch = s[0];
        if let Some(l) = labels {
            if l.len() != batch {
                return Err(Error::InvalidArgument(format!(
                    "labels ({}) do not match batch ({batch})",
                    l.len()
                )));
            }
        }
        let classes = self.spec.arch.num_classes();
        let mut logits = Vec::with_capacity(batch * classes);
        let mut trace = record_trace.then(RoutingTrace::default);
        // chunked so graph value storage stays bounded; the aux loss is
        // batch-level within a chunk and image-weighted across chunks
        let chunk = 16usize;
        let mut aux_weighted = 0.0f64;
        for start in (0..batch).step_by(chunk) {
            let end = (start + chunk).min(batch);
            let mut g = Graph::new();
            let vars = self.bind(&mut g);
            let mut forwards = Vec::with_capacity(end - start);
            for b in start..end {
                let image = Self::image_tensor(images, b)?;
                let img = g.leaf(&image);
                let fwd = self.forward_image(&mut g, &vars, img)?;
                let row = g.value(fwd.logits);
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("forward_classify logits"));
                }
                logits.extend_from_slice(row);
                if let Some(trace) = trace.as_mut() {
                    for lr in &fwd.routing {
                        trace.records.push(layer_trace_record(
                            b as u64,
                            labels.map(|l| l[b] as u32),
                            lr,
                        ));
                    }
                }
                forwards.push(fwd);
            }
            if let Some(aux) = self.batch_aux(&mut g, &forwards)? {
                aux_weighted += g.value(aux)[0].to_f64() * (end - start) as f64;
            }
        }
        Ok(ClassifyOutput {
            logits: Tensor::new(vec![batch, classes], logits)?,
            trace,
            aux: Tensor::scalar(E::from_f64(aux_weighted / batch as f64)),
        })
    }
}

/// Convert one layer's routing info into a trace record.
pub fn layer_trace_record<E: Element>(
    image_id: u64,
    class_id: Option<u32>,
    lr: &LayerRouting<E>,
) -> TraceRecord {
    TraceRecord {
        image_id,
        class_id,
        layer_id: lr.layer_id as u32,
        grid: lr.grid,
        topk: lr
            .info
            .decision
            .topk_indices
            .iter()
            .map(|row| row.iter().map(|&e| e as u32).collect())
            .collect(),
        weights: lr
            .info
            .decision
            .topk_weights
            .iter()
            .map(|row| row.iter().map(|&w| w.to_f64() as f32).collect())
            .collect(),
    }
}
