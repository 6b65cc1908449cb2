//! Line-oriented textual DSL for tensor graphs.
//!
//! One node per line: `out = op(in1, in2) dims=[...]`, `#` starts a comment.
//! Inputs declare dim extents (`q = input() dims=[m=512, dk=64] dtype=f32`);
//! every other line references previously defined names. Pointwise ops nest
//! (`p = exp(sub(s, mb))`) and collapse into a single Pointwise node, so
//! parsing an emitted graph reproduces it node for node. Scheduled graphs
//! (containing online-reduction nodes) are not serializable.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::expr::PointwiseExpr;
use crate::ir::{Combiner, GraphBuilder, NodeId, OpKind, TensorGraph};
use crate::tensor::DType;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    LPar,
    RPar,
    LBrack,
    RBrack,
    Comma,
    Eq,
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn lex(line: usize, s: &str) -> Result<Vec<Tok>> {
    let mut toks = Vec::new();
    let b = s.as_bytes();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        match c {
            ' ' | '\t' => i += 1,
            '(' => {
                toks.push(Tok::LPar);
                i += 1;
            }
            ')' => {
                toks.push(Tok::RPar);
                i += 1;
            }
            '[' => {
                toks.push(Tok::LBrack);
                i += 1;
            }
            ']' => {
                toks.push(Tok::RBrack);
                i += 1;
            }
            ',' => {
                toks.push(Tok::Comma);
                i += 1;
            }
            '=' => {
                toks.push(Tok::Eq);
                i += 1;
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < b.len() && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_') {
                    i += 1;
                }
                let word = &s[start..i];
                match word {
                    "inf" => toks.push(Tok::Num(f64::INFINITY)),
                    "nan" => toks.push(Tok::Num(f64::NAN)),
                    _ => toks.push(Tok::Ident(word.to_string())),
                }
            }
            _ if c.is_ascii_digit() || c == '-' || c == '+' => {
                let start = i;
                i += 1;
                // "-inf" / "+inf"
                if s[i..].starts_with("inf") {
                    i += 3;
                    toks.push(Tok::Num(if c == '-' {
                        f64::NEG_INFINITY
                    } else {
                        f64::INFINITY
                    }));
                    continue;
                }
                while i < b.len()
                    && ((b[i] as char).is_ascii_digit()
                        || matches!(b[i], b'.' | b'e' | b'E')
                        || (matches!(b[i], b'-' | b'+') && matches!(b[i - 1], b'e' | b'E')))
                {
                    i += 1;
                }
                let v: f64 = s[start..i]
                    .parse()
                    .map_err(|_| err(line, format!("bad number {:?}", &s[start..i])))?;
                toks.push(Tok::Num(v));
            }
            _ => return Err(err(line, format!("unexpected character {c:?}"))),
        }
    }
    Ok(toks)
}

struct Cursor {
    toks: Vec<Tok>,
    at: usize,
    line: usize,
}

impl Cursor {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at)
    }

    fn next(&mut self) -> Result<Tok> {
        let t = self.toks.get(self.at).cloned().ok_or_else(|| {
            err(self.line, "unexpected end of line")
        })?;
        self.at += 1;
        Ok(t)
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        let got = self.next()?;
        if got != want {
            return Err(err(self.line, format!("expected {want:?}, found {got:?}")));
        }
        Ok(())
    }

    fn ident(&mut self) -> Result<String> {
        match self.next()? {
            Tok::Ident(s) => Ok(s),
            t => Err(err(self.line, format!("expected identifier, found {t:?}"))),
        }
    }

    fn done(&self) -> bool {
        self.at == self.toks.len()
    }
}

const POINTWISE_OPS: [&str; 10] =
    ["add", "sub", "mul", "div", "neg", "exp", "max", "min", "where", "scale"];

/// `[a, b]` or `[a=1, b=2]`; extents are None when omitted.
fn parse_dims(c: &mut Cursor) -> Result<Vec<(String, Option<usize>)>> {
    c.expect(Tok::LBrack)?;
    let mut out = Vec::new();
    if c.peek() == Some(&Tok::RBrack) {
        c.next()?;
        return Ok(out);
    }
    loop {
        let name = c.ident()?;
        let extent = if c.peek() == Some(&Tok::Eq) {
            c.next()?;
            match c.next()? {
                Tok::Num(v) if v >= 1.0 && v.fract() == 0.0 => Some(v as usize),
                t => return Err(err(c.line, format!("expected extent, found {t:?}"))),
            }
        } else {
            None
        };
        out.push((name, extent));
        match c.next()? {
            Tok::Comma => continue,
            Tok::RBrack => break,
            t => return Err(err(c.line, format!("expected ',' or ']', found {t:?}"))),
        }
    }
    Ok(out)
}

fn parse_expr(
    c: &mut Cursor,
    names: &BTreeMap<String, NodeId>,
    inputs: &mut Vec<NodeId>,
) -> Result<PointwiseExpr> {
    use PointwiseExpr as E;
    match c.next()? {
        Tok::Num(v) => Ok(E::Const(v)),
        Tok::Ident(w) if POINTWISE_OPS.contains(&w.as_str()) => {
            c.expect(Tok::LPar)?;
            let mut args = Vec::new();
            if w == "scale" {
                // first argument is a literal factor
                let factor = match c.next()? {
                    Tok::Num(v) => v,
                    t => return Err(err(c.line, format!("scale needs a literal factor, found {t:?}"))),
                };
                c.expect(Tok::Comma)?;
                let e = parse_expr(c, names, inputs)?;
                c.expect(Tok::RPar)?;
                return Ok(E::Scale(factor, Box::new(e)));
            }
            loop {
                args.push(parse_expr(c, names, inputs)?);
                match c.next()? {
                    Tok::Comma => continue,
                    Tok::RPar => break,
                    t => return Err(err(c.line, format!("expected ',' or ')', found {t:?}"))),
                }
            }
            let want = match w.as_str() {
                "neg" | "exp" => 1,
                "where" => 3,
                _ => 2,
            };
            if args.len() != want {
                return Err(err(c.line, format!("{w} takes {want} arguments, got {}", args.len())));
            }
            let mut a = args.into_iter();
            let two = |f: fn(Box<E>, Box<E>) -> E, a: &mut std::vec::IntoIter<E>| {
                f(Box::new(a.next().unwrap()), Box::new(a.next().unwrap()))
            };
            Ok(match w.as_str() {
                "add" => two(E::Add, &mut a),
                "sub" => two(E::Sub, &mut a),
                "mul" => two(E::Mul, &mut a),
                "div" => two(E::Div, &mut a),
                "max" => two(E::Max2, &mut a),
                "min" => two(E::Min2, &mut a),
                "neg" => E::Neg(Box::new(a.next().unwrap())),
                "exp" => E::Exp(Box::new(a.next().unwrap())),
                "where" => E::Where(
                    Box::new(a.next().unwrap()),
                    Box::new(a.next().unwrap()),
                    Box::new(a.next().unwrap()),
                ),
                _ => unreachable!(),
            })
        }
        Tok::Ident(name) => {
            let id = *names
                .get(&name)
                .ok_or_else(|| err(c.line, format!("unknown node {name:?}")))?;
            let slot = match inputs.iter().position(|&i| i == id) {
                Some(s) => s,
                None => {
                    inputs.push(id);
                    inputs.len() - 1
                }
            };
            Ok(E::Arg(slot))
        }
        t => Err(err(c.line, format!("expected expression, found {t:?}"))),
    }
}

/// Parse a DSL program into a validated graph.
pub fn parse(text: &str) -> Result<TensorGraph> {
    let mut gb = GraphBuilder::new();
    let mut names: BTreeMap<String, NodeId> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut c = Cursor { toks: lex(line_no, line)?, at: 0, line: line_no };
        let lhs = c.ident()?;
        c.expect(Tok::Eq)?;
        let head = match c.peek() {
            Some(Tok::Ident(w)) => w.clone(),
            _ => String::new(),
        };
        let id = match head.as_str() {
            "input" => {
                c.next()?;
                c.expect(Tok::LPar)?;
                c.expect(Tok::RPar)?;
                let mut dims: Vec<(String, usize)> = Vec::new();
                let mut dtype = DType::F64;
                while !c.done() {
                    match c.ident()?.as_str() {
                        "dims" => {
                            c.expect(Tok::Eq)?;
                            for (name, ext) in parse_dims(&mut c)? {
                                let ext = ext.ok_or_else(|| {
                                    err(line_no, format!("input dim {name} needs an extent"))
                                })?;
                                dims.push((name, ext));
                            }
                        }
                        "dtype" => {
                            c.expect(Tok::Eq)?;
                            dtype = match c.ident()?.as_str() {
                                "f32" => DType::F32,
                                "f64" => DType::F64,
                                t => return Err(err(line_no, format!("unknown dtype {t:?}"))),
                            };
                        }
                        k => return Err(err(line_no, format!("unknown attribute {k:?}"))),
                    }
                }
                gb.input(&lhs, &dims, dtype)
            }
            "output" => {
                c.next()?;
                c.expect(Tok::LPar)?;
                let src = c.ident()?;
                c.expect(Tok::RPar)?;
                let src = *names
                    .get(&src)
                    .ok_or_else(|| err(line_no, format!("unknown node {src:?}")))?;
                gb.output(&lhs, src)
            }
            "sum_reduce" | "max_reduce" => {
                let comb = if head == "sum_reduce" { Combiner::Sum } else { Combiner::Max };
                c.next()?;
                c.expect(Tok::LPar)?;
                let src = c.ident()?;
                c.expect(Tok::RPar)?;
                let src = *names
                    .get(&src)
                    .ok_or_else(|| err(line_no, format!("unknown node {src:?}")))?;
                let kw = c.ident()?;
                if kw != "dims" {
                    return Err(err(line_no, format!("expected dims, found {kw:?}")));
                }
                c.expect(Tok::Eq)?;
                let dims: Vec<String> =
                    parse_dims(&mut c)?.into_iter().map(|(n, _)| n).collect();
                let refs: Vec<&str> = dims.iter().map(|s| s.as_str()).collect();
                gb.reduce(&lhs, comb, &refs, src)
            }
            "contract" => {
                c.next()?;
                c.expect(Tok::LPar)?;
                let a = c.ident()?;
                c.expect(Tok::Comma)?;
                let b = c.ident()?;
                c.expect(Tok::RPar)?;
                let a = *names.get(&a).ok_or_else(|| err(line_no, format!("unknown node {a:?}")))?;
                let b = *names.get(&b).ok_or_else(|| err(line_no, format!("unknown node {b:?}")))?;
                let kw = c.ident()?;
                if kw != "dims" {
                    return Err(err(line_no, format!("expected dims, found {kw:?}")));
                }
                c.expect(Tok::Eq)?;
                let dims: Vec<String> =
                    parse_dims(&mut c)?.into_iter().map(|(n, _)| n).collect();
                let refs: Vec<&str> = dims.iter().map(|s| s.as_str()).collect();
                gb.contract(&lhs, a, b, &refs)
            }
            "broadcast" => {
                c.next()?;
                c.expect(Tok::LPar)?;
                let src = c.ident()?;
                c.expect(Tok::RPar)?;
                let src = *names
                    .get(&src)
                    .ok_or_else(|| err(line_no, format!("unknown node {src:?}")))?;
                let kw = c.ident()?;
                if kw != "dims" {
                    return Err(err(line_no, format!("expected dims, found {kw:?}")));
                }
                c.expect(Tok::Eq)?;
                let dims: Vec<String> =
                    parse_dims(&mut c)?.into_iter().map(|(n, _)| n).collect();
                gb.broadcast(&lhs, src, &dims)
            }
            _ => {
                let mut inputs = Vec::new();
                let e = parse_expr(&mut c, &names, &mut inputs)?;
                if inputs.is_empty() {
                    return Err(err(line_no, "pointwise expression references no nodes"));
                }
                gb.pointwise(&lhs, e, &inputs)
            }
        }
        .map_err(|e| err(line_no, e.to_string()))?;
        if !c.done() {
            return Err(err(line_no, "trailing tokens"));
        }
        if names.insert(lhs.clone(), id).is_some() {
            return Err(err(line_no, format!("duplicate node name {lhs:?}")));
        }
    }
    let g = gb.finish();
    if let Some(d) = g.validate().first() {
        return Err(err(0, d.message.clone()));
    }
    Ok(g)
}

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn expr_src(e: &PointwiseExpr, arg_names: &[&str]) -> String {
    use PointwiseExpr as E;
    let r = |x: &E| expr_src(x, arg_names);
    match e {
        E::Arg(i) => arg_names[*i].to_string(),
        E::Const(v) => fmt_num(*v),
        E::Add(a, b) => format!("add({}, {})", r(a), r(b)),
        E::Sub(a, b) => format!("sub({}, {})", r(a), r(b)),
        E::Mul(a, b) => format!("mul({}, {})", r(a), r(b)),
        E::Div(a, b) => format!("div({}, {})", r(a), r(b)),
        E::Neg(a) => format!("neg({})", r(a)),
        E::Exp(a) => format!("exp({})", r(a)),
        E::Max2(a, b) => format!("max({}, {})", r(a), r(b)),
        E::Min2(a, b) => format!("min({}, {})", r(a), r(b)),
        E::Where(c, a, b) => format!("where({}, {}, {})", r(c), r(a), r(b)),
        E::Scale(f, a) => format!("scale({}, {})", fmt_num(*f), r(a)),
    }
}

/// Serialize a graph back to DSL text, one line per node in id order.
pub fn emit(g: &TensorGraph) -> Result<String> {
    let mut out = String::new();
    for node in &g.nodes {
        let arg_names: Vec<&str> =
            node.inputs.iter().map(|&i| g.nodes[i].name.as_str()).collect();
        let line = match &node.kind {
            OpKind::Input => {
                let dims: Vec<String> = node
                    .dims
                    .iter()
                    .map(|d| format!("{d}={}", g.extent(d)))
                    .collect();
                let dtype = match node.dtype {
                    DType::F32 => "f32",
                    DType::F64 => "f64",
                };
                format!("{} = input() dims=[{}] dtype={dtype}", node.name, dims.join(", "))
            }
            OpKind::Pointwise(e) => format!("{} = {}", node.name, expr_src(e, &arg_names)),
            OpKind::Reduce { combiner, dims } => {
                let op = match combiner {
                    Combiner::Sum => "sum_reduce",
                    Combiner::Max => "max_reduce",
                };
                format!("{} = {op}({}) dims=[{}]", node.name, arg_names[0], dims.join(", "))
            }
            OpKind::Contract { reduced } => format!(
                "{} = contract({}, {}) dims=[{}]",
                node.name,
                arg_names[0],
                arg_names[1],
                reduced.join(", ")
            ),
            OpKind::Broadcast => {
                format!("{} = broadcast({}) dims=[{}]", node.name, arg_names[0], node.dims.join(", "))
            }
            OpKind::Output => format!("{} = output({})", node.name, arg_names[0]),
            OpKind::Online { .. } => {
                return Err(Error::Graph(format!(
                    "cannot serialize scheduled graph: node {} is an online reduction",
                    node.name
                )))
            }
        };
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::eval_naive;
    use crate::tensor::TensorData;
    use crate::variants::{build_variant, spec_for, VARIANT_NAMES};

    fn isomorphic(a: &TensorGraph, b: &TensorGraph) {
        assert_eq!(a.nodes.len(), b.nodes.len());
        assert_eq!(a.extents, b.extents);
        assert_eq!(a.outputs, b.outputs);
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.kind, y.kind, "node {}", x.name);
            assert_eq!(x.inputs, y.inputs, "node {}", x.name);
            assert_eq!(x.dims, y.dims, "node {}", x.name);
            assert_eq!(x.dtype, y.dtype, "node {}", x.name);
        }
    }

    #[test]
    fn every_variant_round_trips() {
        for name in VARIANT_NAMES {
            let g = build_variant(&spec_for(name, 32, DType::F32).unwrap()).unwrap();
            let text = emit(&g).unwrap();
            let g2 = parse(&text).unwrap_or_else(|e| panic!("{name}: {e}\n{text}"));
            isomorphic(&g, &g2);
            // emission is a fixed point
            assert_eq!(text, emit(&g2).unwrap());
        }
    }

    #[test]
    fn hand_written_program_evaluates() {
        let text = "\
# tiny softmax-weighted sum
x = input() dims=[m=2, n=4]
mx = max_reduce(x) dims=[n]
mb = broadcast(mx) dims=[m, n]
p = exp(sub(x, mb))
d = sum_reduce(p) dims=[n]
db = broadcast(d) dims=[m, n]
y = div(p, db)
out = output(y)
";
        let g = parse(text).unwrap();
        let mut b = crate::eval::Bindings::new();
        b.insert(
            "x".into(),
            TensorData::new(vec!["m".into(), "n".into()], vec![2, 4], vec![0.0; 8]),
        );
        let out = eval_naive(&g, &b).unwrap();
        assert!(out["out"].data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "x = input() dims=[m=4]\ny = add(x, z)\n";
        match parse(bad) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("unknown node"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse("x = input( dims=[m=4]") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let g = parse("\n# nothing\n  x = input() dims=[m=2] # trailing\nout = output(x)\n").unwrap();
        assert_eq!(g.nodes.len(), 2);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let bad = "x = input() dims=[m=2]\nx = input() dims=[n=2]\n";
        assert!(matches!(parse(bad), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn negative_infinity_round_trips() {
        let text = "x = input() dims=[m=2]\ny = where(x, -inf, scale(-0.5, x))\nout = output(y)\n";
        let g = parse(text).unwrap();
        let text2 = emit(&g).unwrap();
        isomorphic(&g, &parse(&text2).unwrap());
    }
}
