use std::fmt;

/// One of the three input vectors of a reward function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Input {
    Obs,
    Act,
    Next,
}

impl Input {
    pub fn name(self) -> &'static str {
        match self {
            Input::Obs => "obs",
            Input::Act => "act",
            Input::Next => "next",
        }
    }

    pub(crate) fn from_name(s: &str) -> Option<Input> {
        match s {
            "obs" => Some(Input::Obs),
            "act" => Some(Input::Act),
            "next" => Some(Input::Next),
            _ => None,
        }
    }
}

/// Half-open element range of an input vector, bounds-checked at compile time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slice {
    pub input: Input,
    pub start: usize,
    pub end: usize,
    /// Written as a bare vector name (`obs`) rather than `obs[i:j]`.
    pub whole: bool,
}

impl Slice {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
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

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Abs,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sq,
    Clip,
    Min,
    Max,
    Sum,
    Dot,
    Norm1,
    Norm2,
}

impl Builtin {
    pub const ALL: [Builtin; 13] = [
        Builtin::Abs,
        Builtin::Exp,
        Builtin::Log,
        Builtin::Sqrt,
        Builtin::Tanh,
        Builtin::Sq,
        Builtin::Clip,
        Builtin::Min,
        Builtin::Max,
        Builtin::Sum,
        Builtin::Dot,
        Builtin::Norm1,
        Builtin::Norm2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Abs => "abs",
            Builtin::Exp => "exp",
            Builtin::Log => "log",
            Builtin::Sqrt => "sqrt",
            Builtin::Tanh => "tanh",
            Builtin::Sq => "sq",
            Builtin::Clip => "clip",
            Builtin::Min => "min",
            Builtin::Max => "max",
            Builtin::Sum => "sum",
            Builtin::Dot => "dot",
            Builtin::Norm1 => "norm1",
            Builtin::Norm2 => "norm2",
        }
    }

    pub fn from_name(s: &str) -> Option<Builtin> {
        Builtin::ALL.into_iter().find(|b| b.name() == s)
    }

    /// Whether vector (slice) arguments are accepted.
    pub fn takes_vectors(self) -> bool {
        matches!(self, Builtin::Min | Builtin::Max | Builtin::Sum | Builtin::Dot | Builtin::Norm1 | Builtin::Norm2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arg {
    Scalar(Expr),
    Vector(Slice),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Index(Input, usize),
    /// Reference to the let-binding at this position.
    Local(usize),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    If(Box<Expr>, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Arg>),
}

/// A parsed reward program: ordered let-bindings and a result expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub lets: Vec<(String, Expr)>,
    pub result: Expr,
}

impl Program {
    /// Upper bound on evaluation steps (every node, plus one per vector element).
    pub fn static_cost(&self) -> usize {
        fn cost(e: &Expr) -> usize {
            match e {
                Expr::Num(_) | Expr::Index(..) | Expr::Local(_) => 1,
                Expr::Neg(a) | Expr::Not(a) => 1 + cost(a),
                Expr::Binary(_, a, b) => 1 + cost(a) + cost(b),
                Expr::If(c, a, b) => 1 + cost(c) + cost(a).max(cost(b)),
                Expr::Call(_, args) => {
                    1 + args
                        .iter()
                        .map(|a| match a {
                            Arg::Scalar(e) => cost(e),
                            Arg::Vector(s) => s.len(),
                        })
                        .sum::<usize>()
                }
            }
        }
        self.lets.iter().map(|(_, e)| cost(e)).sum::<usize>() + cost(&self.result)
    }

    pub fn references(&self, input: Input) -> bool {
        fn walk(e: &Expr, input: Input) -> bool {
            match e {
                Expr::Index(i, _) => *i == input,
                Expr::Num(_) | Expr::Local(_) => false,
                Expr::Neg(a) | Expr::Not(a) => walk(a, input),
                Expr::Binary(_, a, b) => walk(a, input) || walk(b, input),
                Expr::If(c, a, b) => walk(c, input) || walk(a, input) || walk(b, input),
                Expr::Call(_, args) => args.iter().any(|a| match a {
                    Arg::Scalar(e) => walk(e, input),
                    Arg::Vector(s) => s.input == input,
                }),
            }
        }
        self.lets.iter().any(|(_, e)| walk(e, input)) || walk(&self.result, input)
    }
}

// Fully parenthesized rendering; re-parsing it yields the same tree.
struct Render<'a> {
    expr: &'a Expr,
    lets: &'a [(String, Expr)],
}

fn num(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    if v < 0.0 || (v == 0.0 && v.is_sign_negative()) {
        write!(f, "(-{:?})", -v)
    } else {
        write!(f, "{v:?}")
    }
}

impl fmt::Display for Render<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sub = |e| Render { expr: e, lets: self.lets };
        match self.expr {
            Expr::Num(v) => num(f, *v),
            Expr::Index(i, k) => write!(f, "{}[{k}]", i.name()),
            Expr::Local(k) => f.write_str(&self.lets[*k].0),
            Expr::Neg(a) => write!(f, "(-{})", sub(a)),
            Expr::Not(a) => write!(f, "(not {})", sub(a)),
            Expr::Binary(op, a, b) => write!(f, "({} {} {})", sub(a), op.symbol(), sub(b)),
            Expr::If(c, a, b) => write!(f, "(if {} then {} else {})", sub(c), sub(a), sub(b)),
            Expr::Call(b, args) => {
                write!(f, "{}(", b.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    match a {
                        Arg::Scalar(e) => write!(f, "{}", sub(e))?,
                        Arg::Vector(s) if s.whole => f.write_str(s.input.name())?,
                        Arg::Vector(s) => write!(f, "{}[{}:{}]", s.input.name(), s.start, s.end)?,
                    }
                }
                f.write_str(")")
            }
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, e) in &self.lets {
            writeln!(f, "let {name} = {};", Render { expr: e, lets: &self.lets })?;
        }
        write!(f, "return {};", Render { expr: &self.result, lets: &self.lets })
    }
}
