//! Test-only oracles and fixture builders shared by the integration tests.
//!
//! Nothing here calls into the library's evaluator or scorer; each oracle is
//! a direct transcription of the definition it checks.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use prof_core::noise::NoisySet;
use prof_core::trajectory::{save_dataset, DataFormat, Dataset, Trajectory};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// reference expression evaluator

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Var {
    Obs,
    Act,
    Next,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::Obs => "obs",
            Var::Act => "act",
            Var::Next => "next",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

const OPS: [(Op, &str); 13] = [
    (Op::Add, "+"),
    (Op::Sub, "-"),
    (Op::Mul, "*"),
    (Op::Div, "/"),
    (Op::Pow, "^"),
    (Op::Lt, "<"),
    (Op::Le, "<="),
    (Op::Gt, ">"),
    (Op::Ge, ">="),
    (Op::Eq, "=="),
    (Op::Ne, "!="),
    (Op::And, "and"),
    (Op::Or, "or"),
];

const UNARY: [&str; 6] = ["abs", "exp", "log", "sqrt", "tanh", "sq"];
const FOLDS: [&str; 5] = ["min", "max", "sum", "norm1", "norm2"];

#[derive(Debug, Clone)]
pub enum RArg {
    Scalar(RExpr),
    /// `(var, start, end)`; `None` bounds mean the whole vector.
    Slice(Var, Option<(usize, usize)>),
}

#[derive(Debug, Clone)]
pub enum RExpr {
    Num(f64),
    Idx(Var, usize),
    Local(usize),
    Neg(Box<RExpr>),
    Not(Box<RExpr>),
    Bin(Op, Box<RExpr>, Box<RExpr>),
    If(Box<RExpr>, Box<RExpr>, Box<RExpr>),
    Unary(&'static str, Box<RExpr>),
    Clip(Box<RExpr>, Box<RExpr>, Box<RExpr>),
    Fold(&'static str, Vec<RArg>),
    Dot(Var, usize, Var, usize, usize),
}

#[derive(Debug, Clone)]
pub struct RProgram {
    pub lets: Vec<RExpr>,
    pub result: RExpr,
}

pub struct Inputs<'a> {
    pub obs: &'a [f64],
    pub act: &'a [f64],
    pub next: &'a [f64],
}

impl Inputs<'_> {
    fn get(&self, v: Var) -> &[f64] {
        match v {
            Var::Obs => self.obs,
            Var::Act => self.act,
            Var::Next => self.next,
        }
    }
}

fn ok(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn b(x: bool) -> f64 {
    if x {
        1.0
    } else {
        0.0
    }
}

/// Naive tree walk. `None` means the program errors.
pub fn ref_eval(e: &RExpr, x: &Inputs, locals: &[f64]) -> Option<f64> {
    match e {
        RExpr::Num(v) => Some(*v),
        RExpr::Idx(v, i) => ok(x.get(*v)[*i]),
        RExpr::Local(i) => Some(locals[*i]),
        RExpr::Neg(a) => Some(-ref_eval(a, x, locals)?),
        RExpr::Not(a) => Some(b(ref_eval(a, x, locals)? == 0.0)),
        RExpr::Bin(Op::And, l, r) => {
            if ref_eval(l, x, locals)? == 0.0 {
                Some(0.0)
            } else {
                Some(b(ref_eval(r, x, locals)? != 0.0))
            }
        }
        RExpr::Bin(Op::Or, l, r) => {
            if ref_eval(l, x, locals)? != 0.0 {
                Some(1.0)
            } else {
                Some(b(ref_eval(r, x, locals)? != 0.0))
            }
        }
        RExpr::Bin(op, l, r) => {
            let p = ref_eval(l, x, locals)?;
            let q = ref_eval(r, x, locals)?;
            ok(match op {
                Op::Add => p + q,
                Op::Sub => p - q,
                Op::Mul => p * q,
                Op::Div => p / q,
                Op::Pow => p.powf(q),
                Op::Lt => b(p < q),
                Op::Le => b(p <= q),
                Op::Gt => b(p > q),
                Op::Ge => b(p >= q),
                Op::Eq => b(p == q),
                Op::Ne => b(p != q),
                Op::And | Op::Or => unreachable!(),
            })
        }
        RExpr::If(c, t, f) => {
            if ref_eval(c, x, locals)? != 0.0 {
                ref_eval(t, x, locals)
            } else {
                ref_eval(f, x, locals)
            }
        }
        RExpr::Unary(name, a) => {
            let v = ref_eval(a, x, locals)?;
            ok(match *name {
                "abs" => v.abs(),
                "exp" => v.exp(),
                "log" => v.ln(),
                "sqrt" => v.sqrt(),
                "tanh" => v.tanh(),
                "sq" => v * v,
                _ => unreachable!(),
            })
        }
        RExpr::Clip(v, lo, hi) => {
            let v = ref_eval(v, x, locals)?;
            let lo = ref_eval(lo, x, locals)?;
            let hi = ref_eval(hi, x, locals)?;
            ok(v.max(lo).min(hi))
        }
        RExpr::Fold(name, args) => {
            let mut vals = Vec::new();
            for a in args {
                match a {
                    RArg::Scalar(e) => vals.push(ref_eval(e, x, locals)?),
                    RArg::Slice(v, range) => {
                        let full = x.get(*v);
                        let (s, t) = range.unwrap_or((0, full.len()));
                        for &y in &full[s..t] {
                            vals.push(ok(y)?);
                        }
                    }
                }
            }
            ok(match *name {
                "min" => vals.iter().copied().fold(f64::INFINITY, f64::min),
                "max" => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                "sum" => vals.iter().sum(),
                "norm1" => vals.iter().map(|v| v.abs()).sum(),
                "norm2" => vals.iter().map(|v| v * v).sum::<f64>().sqrt(),
                _ => unreachable!(),
            })
        }
        RExpr::Dot(u, i, v, j, len) => {
            let p = &x.get(*u)[*i..i + len];
            let q = &x.get(*v)[*j..j + len];
            ok(p.iter().zip(q).map(|(a, b)| a * b).sum())
        }
    }
}

pub fn ref_run(p: &RProgram, x: &Inputs) -> Option<f64> {
    let mut locals = Vec::new();
    for e in &p.lets {
        locals.push(ref_eval(e, x, &locals)?);
    }
    ref_eval(&p.result, x, &locals)
}

fn render_num(v: f64, out: &mut String) {
    if v < 0.0 {
        write!(out, "(-{:?})", -v).unwrap();
    } else {
        write!(out, "{v:?}").unwrap();
    }
}

fn render_arg(a: &RArg, out: &mut String) {
    match a {
        RArg::Scalar(e) => render(e, out),
        RArg::Slice(v, None) => out.push_str(v.name()),
        RArg::Slice(v, Some((s, t))) => write!(out, "{}[{s}:{t}]", v.name()).unwrap(),
    }
}

/// Source text, parenthesized so precedence never matters.
pub fn render(e: &RExpr, out: &mut String) {
    match e {
        RExpr::Num(v) => render_num(*v, out),
        RExpr::Idx(v, i) => write!(out, "{}[{i}]", v.name()).unwrap(),
        RExpr::Local(i) => write!(out, "v{i}").unwrap(),
        RExpr::Neg(a) => {
            out.push_str("(-");
            render(a, out);
            out.push(')');
        }
        RExpr::Not(a) => {
            out.push_str("(not ");
            render(a, out);
            out.push(')');
        }
        RExpr::Bin(op, l, r) => {
            let sym = OPS.iter().find(|(o, _)| o == op).unwrap().1;
            out.push('(');
            render(l, out);
            write!(out, " {sym} ").unwrap();
            render(r, out);
            out.push(')');
        }
        RExpr::If(c, t, f) => {
            out.push_str("(if ");
            render(c, out);
            out.push_str(" then ");
            render(t, out);
            out.push_str(" else ");
            render(f, out);
            out.push(')');
        }
        RExpr::Unary(name, a) => {
            write!(out, "{name}(").unwrap();
            render(a, out);
            out.push(')');
        }
        RExpr::Clip(v, lo, hi) => {
            out.push_str("clip(");
            render(v, out);
            out.push_str(", ");
            render(lo, out);
            out.push_str(", ");
            render(hi, out);
            out.push(')');
        }
        RExpr::Fold(name, args) => {
            write!(out, "{name}(").unwrap();
            for (k, a) in args.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                render_arg(a, out);
            }
            out.push(')');
        }
        RExpr::Dot(u, i, v, j, len) => {
            write!(out, "dot({}[{i}:{}], {}[{j}:{}])", u.name(), i + len, v.name(), j + len).unwrap();
        }
    }
}

pub fn render_program(p: &RProgram) -> String {
    let mut s = String::new();
    for (i, e) in p.lets.iter().enumerate() {
        write!(s, "let v{i} = ").unwrap();
        render(e, &mut s);
        s.push_str(";\n");
    }
    s.push_str("return ");
    render(&p.result, &mut s);
    s.push(';');
    s
}

/// Random programs over fixed input dimensions.
pub struct ExprGen {
    pub rng: ChaCha8Rng,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub max_depth: usize,
}

impl ExprGen {
    pub fn new(seed: u64, obs_dim: usize, act_dim: usize, max_depth: usize) -> Self {
        ExprGen { rng: ChaCha8Rng::seed_from_u64(seed), obs_dim, act_dim, max_depth }
    }

    fn var(&mut self) -> Var {
        if self.act_dim == 0 {
            *[Var::Obs, Var::Next].choose(&mut self.rng).unwrap()
        } else {
            *[Var::Obs, Var::Act, Var::Next].choose(&mut self.rng).unwrap()
        }
    }

    fn dim(&self, v: Var) -> usize {
        if v == Var::Act {
            self.act_dim
        } else {
            self.obs_dim
        }
    }

    fn leaf(&mut self, locals: usize) -> RExpr {
        match self.rng.gen_range(0..10) {
            0..=3 => {
                let v = match self.rng.gen_range(0..6) {
                    0 => 0.0,
                    1 => 1.0,
                    2 => self.rng.gen_range(-3i32..=3) as f64,
                    _ => self.rng.gen_range(-5.0..5.0),
                };
                RExpr::Num(v)
            }
            4 if locals > 0 => RExpr::Local(self.rng.gen_range(0..locals)),
            _ => {
                let v = self.var();
                let d = self.dim(v);
                RExpr::Idx(v, self.rng.gen_range(0..d))
            }
        }
    }

    fn slice(&mut self) -> RArg {
        let v = self.var();
        let d = self.dim(v);
        if self.rng.gen_bool(0.3) {
            RArg::Slice(v, None)
        } else {
            let s = self.rng.gen_range(0..d);
            let t = self.rng.gen_range(s + 1..=d);
            RArg::Slice(v, Some((s, t)))
        }
    }

    pub fn expr(&mut self, depth: usize, locals: usize) -> RExpr {
        if depth <= 1 || self.rng.gen_bool(0.2) {
            return self.leaf(locals);
        }
        let d = depth - 1;
        match self.rng.gen_range(0..20) {
            0..=6 => {
                let op = OPS[self.rng.gen_range(0..OPS.len())].0;
                RExpr::Bin(op, Box::new(self.expr(d, locals)), Box::new(self.expr(d, locals)))
            }
            7 => RExpr::Neg(Box::new(self.expr(d, locals))),
            8 => RExpr::Not(Box::new(self.expr(d, locals))),
            9 | 10 => RExpr::If(
                Box::new(self.expr(d, locals)),
                Box::new(self.expr(d, locals)),
                Box::new(self.expr(d, locals)),
            ),
            11..=13 => RExpr::Unary(UNARY[self.rng.gen_range(0..UNARY.len())], Box::new(self.expr(d, locals))),
            14 => RExpr::Clip(
                Box::new(self.expr(d, locals)),
                Box::new(self.expr(d, locals)),
                Box::new(self.expr(d, locals)),
            ),
            15..=17 => {
                let name = FOLDS[self.rng.gen_range(0..FOLDS.len())];
                let n = self.rng.gen_range(1..=3);
                let args = (0..n)
                    .map(|_| if self.rng.gen_bool(0.5) { self.slice() } else { RArg::Scalar(self.expr(d, locals)) })
                    .collect();
                RExpr::Fold(name, args)
            }
            _ => {
                let u = self.var();
                let v = self.var();
                let len = self.rng.gen_range(1..=self.dim(u).min(self.dim(v)));
                let i = self.rng.gen_range(0..=self.dim(u) - len);
                let j = self.rng.gen_range(0..=self.dim(v) - len);
                RExpr::Dot(u, i, v, j, len)
            }
        }
    }

    pub fn program(&mut self) -> RProgram {
        let n_lets = if self.rng.gen_bool(0.3) { self.rng.gen_range(1..=3) } else { 0 };
        let depth = self.max_depth;
        let lets = (0..n_lets)
            .map(|i| {
                let d = self.rng.gen_range(1..=depth);
                self.expr(d, i)
            })
            .collect();
        let result = self.expr(depth, n_lets);
        RProgram { lets, result }
    }

    /// Random input vector; a few entries are exact zeros so that division
    /// and logarithm errors actually occur.
    pub fn vector(&mut self, dim: usize) -> Vec<f64> {
        (0..dim)
            .map(|_| if self.rng.gen_bool(0.1) { 0.0 } else { self.rng.gen_range(-4.0..4.0) })
            .collect()
    }
}

/// `|a - b| <= 1e-12 * max(1, |a|)`.
pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(1.0)
}

// ---------------------------------------------------------------------------
// dominance oracle

pub struct OracleScore {
    pub lambda: f64,
    pub offline_hits: u64,
    pub noisy_hits: u64,
    pub score: f64,
}

/// Brute-force dominance score from plain return lists.
pub fn oracle_score(expert: &[f64], offline: &[f64], noisy: &[f64], delta: f64) -> OracleScore {
    let mut m = expert[0];
    for &r in expert {
        if r < m {
            m = r;
        }
    }
    let lambda = if m < 0.0 { (1.0 - delta) * m } else { (1.0 + delta) * m };
    let mut offline_hits = 0u64;
    for &r in offline {
        if r <= lambda {
            offline_hits += 1;
        }
    }
    let mut noisy_hits = 0u64;
    for &r in noisy {
        if r < lambda {
            noisy_hits += 1;
        }
    }
    let score = 0.5 * (offline_hits as f64 / offline.len() as f64 + noisy_hits as f64 / noisy.len() as f64);
    OracleScore { lambda, offline_hits, noisy_hits, score }
}

/// A trajectory whose `obs[0]` sequence equals `rewards` so that the reward
/// `obs[0]` returns exactly their sum.
pub fn planted(rewards: &[f32]) -> Trajectory {
    let mut states: Vec<f32> = rewards.to_vec();
    states.push(0.0);
    Trajectory::new(1, 1, states, vec![0.0; rewards.len()], Some(rewards.to_vec())).unwrap()
}

pub fn planted_set(rows: &[Vec<f32>]) -> Dataset {
    Dataset::new(1, 1, rows.iter().map(|r| planted(r)).collect()).unwrap()
}

pub fn planted_noisy(rows: &[Vec<f32>]) -> NoisySet {
    NoisySet::from_members(rows.iter().map(|r| planted(r)).collect(), vec![0.0], vec![0.0], 0).unwrap()
}

// ---------------------------------------------------------------------------
// one-dimensional point mass

pub const GOAL: f64 = 1.0;
pub const POINT_MASS_STEPS: usize = 50;

/// 200 trajectories of a point mass driven toward `GOAL` by a proportional
/// controller. Trajectory `i` uses gain `i / 199` and action noise that
/// shrinks with the gain, so quality grows with the index. Starts are spread
/// on both sides of the goal. Stored rewards are `-|next - GOAL|`.
pub fn point_mass_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = 200;
    let mut trajs = Vec::with_capacity(count);
    for i in 0..count {
        let q = i as f64 / (count - 1) as f64;
        let mut x: f64 = rng.gen_range(-2.0..4.0);
        let mut states = vec![x as f32];
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        for _ in 0..POINT_MASS_STEPS {
            let jitter: f64 = rng.gen_range(-1.0..1.0) * 0.3 * (1.0 - q);
            let a = (0.5 * q * (GOAL - x) + jitter).clamp(-0.5, 0.5);
            x += a;
            actions.push(a as f32);
            states.push(x as f32);
            rewards.push(-(x - GOAL).abs() as f32);
        }
        trajs.push(Trajectory::new(1, 1, states, actions, Some(rewards)).unwrap());
    }
    Dataset::new(1, 1, trajs).unwrap()
}

// ---------------------------------------------------------------------------
// files

pub fn write_binary(ds: &Dataset, path: &Path) {
    save_dataset(ds, path, DataFormat::BinaryV1).unwrap();
}

pub fn fence(src: &str) -> String {
    format!("Here is the reward.\n```python\n{src}\n```\n")
}

/// Paths of the checked-in fixtures.
pub fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}
