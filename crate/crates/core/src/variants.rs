//! Attention-variant corpus: graph builders for vanilla/masked/biased
//! attention, grouped-query attention, differential attention, and
//! Evoformer row-gated attention, all expressed as idiomatic decomposed
//! graphs (matmul → scale → score mods → stable softmax → matmul). Nothing
//! here is pre-fused; fusion must be discovered by the scheduler. Masks are
//! precomputed 0/1 input tensors applied via `where(mask, −∞, score)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Bindings;
use crate::expr::{self, PointwiseExpr as E};
use crate::grid::TileConfig;
use crate::ir::{Combiner, GraphBuilder, NodeId, OpKind, TensorGraph};
use crate::tensor::{DType, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskRule {
    None,
    Causal,
    /// keep iff q ≥ kv and q − kv ≤ w
    SlidingWindow(usize),
    /// keep iff kv < p (shared prefix) or kv ≤ q (causal afterwards)
    PrefixLm(usize),
    /// causal and same document, fixed partition into `docs` documents
    Document(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VariantKind {
    Plain,
    /// additive per-head positional bias, slopes 2^(−8(h+1)/H)
    Alibi,
    /// scores pass through cap·tanh(s/cap) before softmax
    Softcap { cap: f64 },
    /// output = attn0 − lambda·attn1, two softmax stacks over shared V
    DiffAttn { lambda: f64 },
    /// row attention with two additive biases (one broadcast along the
    /// extra sequence dim) and a sigmoid output gate
    Evoformer { seqs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub name: String,
    pub batch: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub seq: usize,
    pub head_dim: usize,
    pub dtype: DType,
    pub mask: MaskRule,
    pub kind: VariantKind,
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("batch", self.batch),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("seq", self.seq),
            ("head_dim", self.head_dim),
        ] {
            if v == 0 {
                return Err(Error::Shape(format!("{what} must be ≥ 1")));
            }
        }
        if self.heads % self.kv_heads != 0 {
            return Err(Error::Shape(format!(
                "heads {} not divisible by kv_heads {}",
                self.heads, self.kv_heads
            )));
        }
        if let VariantKind::Evoformer { seqs } = self.kind {
            if seqs == 0 {
                return Err(Error::Shape("evoformer needs ≥ 1 sequence".into()));
            }
        }
        Ok(())
    }

    /// grouped (g, hg) head layout instead of a flat h dim
    fn grouped(&self) -> bool {
        self.kv_heads != self.heads
    }
}

pub const VARIANT_NAMES: [&str; 11] = [
    "vanilla", "causal", "window", "prefixlm", "docmask", "alibi", "softcap", "mha", "gqa",
    "diffattn", "evoformer",
];

pub const CORPUS_SIZES: [usize; 3] = [256, 512, 1024];

/// Spec for a named variant at sequence length n. Single-head where the
/// variant is about masking/score mods; multi-head where heads are the point.
pub fn spec_for(name: &str, n: usize, dtype: DType) -> Result<AttentionSpec> {
    let base = AttentionSpec {
        name: format!("{name}-n{n}"),
        batch: 1,
        heads: 1,
        kv_heads: 1,
        seq: n,
        head_dim: 64,
        dtype,
        mask: MaskRule::None,
        kind: VariantKind::Plain,
    };
    let spec = match name {
        "vanilla" => base,
        "causal" => AttentionSpec { mask: MaskRule::Causal, ..base },
        "window" => AttentionSpec { mask: MaskRule::SlidingWindow(256), ..base },
        "prefixlm" => AttentionSpec { mask: MaskRule::PrefixLm(256), ..base },
        "docmask" => AttentionSpec { mask: MaskRule::Document(12), ..base },
        "alibi" => AttentionSpec { heads: 2, kv_heads: 2, kind: VariantKind::Alibi, ..base },
        "softcap" => AttentionSpec { kind: VariantKind::Softcap { cap: 30.0 }, ..base },
        "mha" => AttentionSpec { heads: 2, kv_heads: 2, ..base },
        "gqa" => AttentionSpec { heads: 16, kv_heads: 2, ..base },
        "diffattn" => AttentionSpec { kind: VariantKind::DiffAttn { lambda: 0.5 }, ..base },
        "evoformer" => AttentionSpec {
            heads: 4,
            kv_heads: 4,
            kind: VariantKind::Evoformer { seqs: 2 },
            ..base
        },
        _ => return Err(Error::UnknownVariant(name.to_string())),
    };
    Ok(spec)
}

/// Deterministic full corpus: every variant at every corpus size.
pub fn corpus(dtype: DType) -> Vec<AttentionSpec> {
    let mut out = Vec::new();
    for name in VARIANT_NAMES {
        for n in CORPUS_SIZES {
            out.push(spec_for(name, n, dtype).expect("builtin variant"));
        }
    }
    out
}

/// Tile hints shipped with every variant: batch/head-like dims are
/// grid-parallel (tile 1), keeping per-block scratchpad small.
pub fn tile_hints(spec: &AttentionSpec) -> TileConfig {
    let mut cfg = TileConfig::empty();
    for d in ["b", "h", "g", "hg", "s"] {
        cfg.set(d, 1).expect("positive tile");
    }
    let _ = spec;
    cfg
}

fn dim(name: &str, extent: usize) -> (String, usize) {
    (name.to_string(), extent)
}

/// cap·tanh(x/cap) with tanh composed from exp: tanh(y) = (e−1)/(e+1),
/// e = exp(2y); denominator ≥ 1, so the division is total.
fn softcap_expr(cap: f64) -> E {
    let e = || expr::exp(expr::scale(2.0 / cap, E::arg(0)));
    expr::scale(
        cap,
        expr::div(
            expr::sub(e(), expr::constant(1.0)),
            expr::add(e(), expr::constant(1.0)),
        ),
    )
}

/// 1/(1+exp(−g)); denominator ≥ 1.
fn sigmoid_expr(g: E) -> E {
    expr::div(
        expr::constant(1.0),
        expr::add(expr::constant(1.0), expr::exp(expr::neg(g))),
    )
}

struct Stack<'a> {
    spec: &'a AttentionSpec,
    /// dims shared by q/k/v ahead of the sequence dims (batch + heads)
    head_dims: Vec<(String, usize)>,
    /// head dims absent from k/v (the query-group dim for GQA)
    q_only: Vec<String>,
}

impl<'a> Stack<'a> {
    /// score matmul → scale → score mods → stable softmax → value matmul
    fn build(
        &self,
        gb: &mut GraphBuilder,
        sfx: &str,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        // (bias node, whether it must be broadcast up to score dims)
        extra_bias: &[(NodeId, bool)],
    ) -> Result<NodeId> {
        let spec = self.spec;
        let n = |base: &str| format!("{base}{sfx}");
        let s = gb.contract(&n("s"), q, k, &["dk"])?;
        let scale = 1.0 / (spec.head_dim as f64).sqrt();
        let mut sc = gb.pointwise(&n("s_scaled"), expr::scale(scale, E::arg(0)), &[s])?;
        let score_dims: Vec<String> = {
            let mut d: Vec<String> =
                self.head_dims.iter().map(|(name, _)| name.clone()).collect();
            d.push("m".into());
            d.push("n".into());
            d
        };
        if let VariantKind::Alibi = spec.kind {
            let bias = gb.input(
                "bias",
                &[dim("h", spec.heads), dim("m", spec.seq), dim("n", spec.seq)],
                spec.dtype,
            )?;
            let bb = gb.broadcast(&n("bias_b"), bias, &score_dims)?;
            sc = gb.pointwise(&n("s_bias"), expr::add(E::arg(0), E::arg(1)), &[sc, bb])?;
        }
        if let VariantKind::Softcap { cap } = spec.kind {
            sc = gb.pointwise(&n("s_capped"), softcap_expr(cap), &[sc])?;
        }
        for (i, &(b, needs_bcast)) in extra_bias.iter().enumerate() {
            let b = if needs_bcast {
                gb.broadcast(&format!("bias{i}_b{sfx}"), b, &score_dims)?
            } else {
                b
            };
            sc = gb.pointwise(&format!("s_bias{i}{sfx}"), expr::add(E::arg(0), E::arg(1)), &[sc, b])?;
        }
        if spec.mask != MaskRule::None {
            let mask = gb.input("mask", &[dim("m", spec.seq), dim("n", spec.seq)], spec.dtype)?;
            let mb = gb.broadcast(&n("mask_b"), mask, &score_dims)?;
            sc = gb.pointwise(
                &n("s_masked"),
                expr::where_(E::arg(0), expr::constant(f64::NEG_INFINITY), E::arg(1)),
                &[mb, sc],
            )?;
        }
        let mx = gb.reduce(&n("mx"), Combiner::Max, &["n"], sc)?;
        let mxb = gb.broadcast(&n("mx_b"), mx, &score_dims)?;
        let p_num = gb.pointwise(&n("p_num"), expr::exp(expr::sub(E::arg(0), E::arg(1))), &[sc, mxb])?;
        let p_den = gb.pointwise(&n("p_den"), expr::exp(expr::sub(E::arg(0), E::arg(1))), &[sc, mxb])?;
        let d = gb.reduce(&n("d"), Combiner::Sum, &["n"], p_den)?;
        let db = gb.broadcast(&n("d_b"), d, &score_dims)?;
        let y = gb.pointwise(&n("y"), expr::div(E::arg(0), E::arg(1)), &[p_num, db])?;
        gb.contract(&n("o"), y, v, &["n"])
    }

    fn q_dims(&self) -> Vec<(String, usize)> {
        let mut d = self.head_dims.clone();
        d.push(dim("m", self.spec.seq));
        d.push(dim("dk", self.spec.head_dim));
        d
    }

    fn kv_dims(&self, last: &str) -> Vec<(String, usize)> {
        let mut d: Vec<(String, usize)> = self
            .head_dims
            .iter()
            .filter(|(name, _)| !self.q_only.contains(name))
            .cloned()
            .collect();
        d.push(dim("n", self.spec.seq));
        d.push(dim(last, self.spec.head_dim));
        d
    }
}

/// Build the decomposed graph for a variant spec.
pub fn build_variant(spec: &AttentionSpec) -> Result<TensorGraph> {
    spec.validate()?;
    let mut gb = GraphBuilder::new();
    let stack = match spec.kind {
        VariantKind::Evoformer { seqs } => Stack {
            spec,
            head_dims: vec![dim("s", seqs), dim("h", spec.heads)],
            q_only: vec![],
        },
        _ if spec.grouped() => Stack {
            spec,
            head_dims: vec![
                dim("b", spec.batch),
                dim("g", spec.kv_heads),
                dim("hg", spec.heads / spec.kv_heads),
            ],
            q_only: vec!["hg".into()],
        },
        _ => Stack {
            spec,
            head_dims: vec![dim("b", spec.batch), dim("h", spec.heads)],
            q_only: vec![],
        },
    };

    match spec.kind {
        VariantKind::DiffAttn { lambda } => {
            let v = gb.input("v", &stack.kv_dims("dv"), spec.dtype)?;
            let mut attn = Vec::new();
            for i in 0..2 {
                let q = gb.input(&format!("q{i}"), &stack.q_dims(), spec.dtype)?;
                let k = gb.input(&format!("k{i}"), &stack.kv_dims("dk"), spec.dtype)?;
                attn.push(stack.build(&mut gb, &format!("_{i}"), q, k, v, &[])?);
            }
            let diff = gb.pointwise(
                "diff",
                expr::sub(E::arg(0), expr::scale(lambda, E::arg(1))),
                &[attn[0], attn[1]],
            )?;
            gb.output("out", diff)?;
        }
        VariantKind::Evoformer { seqs } => {
            let q = gb.input("q", &stack.q_dims(), spec.dtype)?;
            let k = gb.input("k", &stack.kv_dims("dk"), spec.dtype)?;
            let v = gb.input("v", &stack.kv_dims("dv"), spec.dtype)?;
            // full bias needs no broadcast; the pair bias lacks the extra
            // sequence dim and is broadcast along it
            let bias_full = gb.input(
                "bias_full",
                &[dim("s", seqs), dim("h", spec.heads), dim("m", spec.seq), dim("n", spec.seq)],
                spec.dtype,
            )?;
            let bias_pair = gb.input(
                "bias_pair",
                &[dim("h", spec.heads), dim("m", spec.seq), dim("n", spec.seq)],
                spec.dtype,
            )?;
            let o = stack.build(&mut gb, "", q, k, v, &[(bias_full, false), (bias_pair, true)])?;
            let mut gate_dims = stack.q_dims();
            gate_dims.last_mut().unwrap().0 = "dv".into();
            let gate = gb.input("gate", &gate_dims, spec.dtype)?;
            let gated = gb.pointwise(
                "gated",
                expr::mul(E::arg(0), sigmoid_expr(E::arg(1))),
                &[o, gate],
            )?;
            gb.output("out", gated)?;
        }
        _ => {
            let q = gb.input("q", &stack.q_dims(), spec.dtype)?;
            let k = gb.input("k", &stack.kv_dims("dk"), spec.dtype)?;
            let v = gb.input("v", &stack.kv_dims("dv"), spec.dtype)?;
            let o = stack.build(&mut gb, "", q, k, v, &[])?;
            gb.output("out", o)?;
        }
    }
    let g = gb.finish();
    let diags = g.validate();
    if let Some(d) = diags.first() {
        return Err(Error::Graph(format!("variant {}: {}", spec.name, d.message)));
    }
    Ok(g)
}

/// Mask predicate: true iff query row `q` may attend to key column `kv`.
pub fn mask_keeps(rule: MaskRule, q: usize, kv: usize, n: usize) -> bool {
    match rule {
        MaskRule::None => true,
        MaskRule::Causal => kv <= q,
        MaskRule::SlidingWindow(w) => q >= kv && q - kv <= w,
        MaskRule::PrefixLm(p) => kv < p || kv <= q,
        MaskRule::Document(docs) => {
            let doc = |i: usize| i * docs / n;
            kv <= q && doc(q) == doc(kv)
        }
    }
}

fn mask_tensor(rule: MaskRule, n: usize) -> TensorData {
    let mut data = Vec::with_capacity(n * n);
    for q in 0..n {
        for kv in 0..n {
            // 1 marks a dropped position: where(mask, −∞, score)
            data.push(if mask_keeps(rule, q, kv, n) { 0.0 } else { 1.0 });
        }
    }
    TensorData::new(vec!["m".into(), "n".into()], vec![n, n], data)
}

fn alibi_bias(heads: usize, n: usize) -> TensorData {
    let mut data = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        let slope = 2f64.powf(-8.0 * (h as f64 + 1.0) / heads as f64);
        for q in 0..n {
            for kv in 0..n {
                data.push(-slope * (q as f64 - kv as f64).abs());
            }
        }
    }
    TensorData::new(
        vec!["h".into(), "m".into(), "n".into()],
        vec![heads, n, n],
        data,
    )
}

/// Deterministic bindings: uniform [−1, 1] for data inputs (seeded, in node
/// order), deterministic tensors for the mask and ALiBi bias.
pub fn bindings(graph: &TensorGraph, spec: &AttentionSpec, seed: u64) -> Bindings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Bindings::new();
    for node in &graph.nodes {
        if !matches!(node.kind, OpKind::Input) {
            continue;
        }
        let t = match node.name.as_str() {
            "mask" => mask_tensor(spec.mask, spec.seq),
            "bias" if matches!(spec.kind, VariantKind::Alibi) => {
                alibi_bias(spec.heads, spec.seq)
            }
            _ => {
                let extents = graph.extents_of(&node.dims);
                let len: usize = extents.iter().product();
                let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
                TensorData::new(node.dims.clone(), extents, data)
            }
        };
        b.insert(node.name.clone(), t);
    }
    b
}
