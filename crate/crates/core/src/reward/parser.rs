use super::ast::{Arg, BinOp, Builtin, Expr, Input, Program, Slice};
use super::lexer::{tokenize, Pos, Tok, Token};
use super::{Arity, CompileError};

pub(crate) struct Dims {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub arity: Arity,
}

struct Parser<'a> {
    toks: Vec<Token>,
    at: usize,
    dims: &'a Dims,
    lets: Vec<(String, Expr)>,
}

type PResult<T> = Result<T, CompileError>;

fn parse_err(pos: Pos, message: impl Into<String>) -> CompileError {
    CompileError::Parse { line: pos.line, col: pos.col, message: message.into() }
}

pub(crate) fn parse_program(src: &str, dims: &Dims) -> PResult<Program> {
    let toks = tokenize(src)?;
    let mut p = Parser { toks, at: 0, dims, lets: Vec::new() };
    p.program()
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        let i = (self.at + k).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].pos
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == tok {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> PResult<()> {
        if self.eat(&tok) {
            Ok(())
        } else {
            Err(parse_err(self.pos(), format!("expected {what}, found {}", describe(self.peek()))))
        }
    }

    fn program(&mut self) -> PResult<Program> {
        while self.eat(&Tok::Let) {
            let pos = self.pos();
            let name = match self.bump().tok {
                Tok::Ident(n) => n,
                other => return Err(parse_err(pos, format!("expected a name after `let`, found {}", describe(&other)))),
            };
            if Input::from_name(&name).is_some() || Builtin::from_name(&name).is_some() {
                return Err(parse_err(pos, format!("`{name}` is reserved and cannot be rebound")));
            }
            if self.lets.iter().any(|(n, _)| *n == name) {
                return Err(parse_err(pos, format!("`{name}` is already bound")));
            }
            self.expect(Tok::Assign, "`=`")?;
            let e = self.expr()?;
            self.expect(Tok::Semi, "`;` after let-binding")?;
            self.lets.push((name, e));
        }
        self.eat(&Tok::Return);
        if *self.peek() == Tok::Eof {
            return Err(parse_err(self.pos(), "missing result expression"));
        }
        let result = self.expr()?;
        self.eat(&Tok::Semi);
        if *self.peek() != Tok::Eof {
            return Err(parse_err(self.pos(), format!("unexpected {} after result expression", describe(self.peek()))));
        }
        Ok(Program { lets: std::mem::take(&mut self.lets), result })
    }

    fn expr(&mut self) -> PResult<Expr> {
        if *self.peek() == Tok::If {
            return self.if_expr();
        }
        self.or_expr()
    }

    fn if_expr(&mut self) -> PResult<Expr> {
        self.expect(Tok::If, "`if`")?;
        let c = self.expr()?;
        self.expect(Tok::Then, "`then`")?;
        let a = self.expr()?;
        self.expect(Tok::Else, "`else`")?;
        let b = self.expr()?;
        Ok(Expr::If(Box::new(c), Box::new(a), Box::new(b)))
    }

    fn or_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.and_expr()?;
        while self.eat(&Tok::Or) {
            let rhs = self.and_expr()?;
            lhs = Expr::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.not_expr()?;
        while self.eat(&Tok::And) {
            let rhs = self.not_expr()?;
            lhs = Expr::Binary(BinOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> PResult<Expr> {
        if self.eat(&Tok::Not) {
            return Ok(Expr::Not(Box::new(self.not_expr()?)));
        }
        self.cmp_expr()
    }

    fn cmp_op(&self) -> Option<BinOp> {
        Some(match self.peek() {
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            Tok::EqEq => BinOp::Eq,
            Tok::Ne => BinOp::Ne,
            _ => return None,
        })
    }

    fn cmp_expr(&mut self) -> PResult<Expr> {
        let lhs = self.add_expr()?;
        let Some(op) = self.cmp_op() else { return Ok(lhs) };
        self.bump();
        let rhs = self.add_expr()?;
        if self.cmp_op().is_some() {
            return Err(parse_err(self.pos(), "comparisons cannot be chained; combine them with `and`"));
        }
        Ok(Expr::Binary(op, Box::new(lhs), Box::new(rhs)))
    }

    fn add_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.mul_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.mul_expr()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn mul_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.eat(&Tok::Minus) {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat(&Tok::Plus) {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> PResult<Expr> {
        let base = self.atom()?;
        if self.eat(&Tok::Caret) {
            let exp = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn input(&self, name: &str, pos: Pos) -> PResult<Option<(Input, usize)>> {
        let Some(input) = Input::from_name(name) else { return Ok(None) };
        let dim = match input {
            Input::Obs | Input::Next => self.dims.obs_dim,
            Input::Act => {
                if self.dims.arity == Arity::StateOnly {
                    return Err(CompileError::Arity { line: pos.line, col: pos.col });
                }
                self.dims.act_dim
            }
        };
        Ok(Some((input, dim)))
    }

    fn index_literal(&mut self) -> PResult<usize> {
        let pos = self.pos();
        match self.bump().tok {
            Tok::Int(n, _) => usize::try_from(n).map_err(|_| parse_err(pos, "index too large")),
            other => Err(parse_err(pos, format!("indices must be non-negative integer literals, found {}", describe(&other)))),
        }
    }

    fn atom(&mut self) -> PResult<Expr> {
        let pos = self.pos();
        match self.bump().tok {
            Tok::Num(v) | Tok::Int(_, v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::If => {
                self.at -= 1;
                self.if_expr()
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    return self.call(&name, pos);
                }
                if let Some((input, dim)) = self.input(&name, pos)? {
                    if *self.peek() != Tok::LBracket {
                        return Err(parse_err(pos, format!(
                            "`{name}` is a vector; index it or pass it to a vector builtin"
                        )));
                    }
                    self.bump();
                    let k = self.index_literal()?;
                    if *self.peek() == Tok::Colon {
                        return Err(parse_err(pos, "slices are only allowed as arguments of vector builtins"));
                    }
                    self.expect(Tok::RBracket, "`]`")?;
                    if k >= dim {
                        return Err(CompileError::Bounds {
                            line: pos.line,
                            col: pos.col,
                            message: format!("{name}[{k}] is out of range for dimension {dim}"),
                        });
                    }
                    return Ok(Expr::Index(input, k));
                }
                match self.lets.iter().position(|(n, _)| *n == name) {
                    Some(i) => Ok(Expr::Local(i)),
                    None => Err(parse_err(pos, format!("unknown identifier `{name}`"))),
                }
            }
            other => Err(parse_err(pos, format!("expected an expression, found {}", describe(&other)))),
        }
    }

    /// Parses `obs`, `obs[i:j]` as a vector argument when one starts here.
    fn try_slice(&mut self) -> PResult<Option<Slice>> {
        let Tok::Ident(name) = self.peek().clone() else { return Ok(None) };
        let pos = self.pos();
        let next = self.peek_at(1).clone();
        let is_slice = matches!(next, Tok::LBracket) && matches!(self.peek_at(3), Tok::Colon);
        let is_whole = matches!(next, Tok::Comma | Tok::RParen);
        if !(is_slice || is_whole) {
            return Ok(None);
        }
        let Some((input, dim)) = self.input(&name, pos)? else { return Ok(None) };
        self.bump();
        if is_whole {
            return Ok(Some(Slice { input, start: 0, end: dim, whole: true }));
        }
        self.bump();
        let start = self.index_literal()?;
        self.expect(Tok::Colon, "`:`")?;
        let end = self.index_literal()?;
        self.expect(Tok::RBracket, "`]`")?;
        if start >= end || end > dim {
            return Err(CompileError::Bounds {
                line: pos.line,
                col: pos.col,
                message: format!("slice {name}[{start}:{end}] is empty or exceeds dimension {dim}"),
            });
        }
        Ok(Some(Slice { input, start, end, whole: false }))
    }

    fn call(&mut self, name: &str, pos: Pos) -> PResult<Expr> {
        let builtin = Builtin::from_name(name)
            .ok_or_else(|| parse_err(pos, format!("unknown function `{name}`")))?;
        self.expect(Tok::LParen, "`(`")?;
        let mut args = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                let arg_pos = self.pos();
                match self.try_slice()? {
                    Some(s) if builtin.takes_vectors() => args.push(Arg::Vector(s)),
                    Some(_) => {
                        return Err(parse_err(arg_pos, format!("`{name}` takes scalar arguments only")))
                    }
                    None => args.push(Arg::Scalar(self.expr()?)),
                }
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
        }
        self.expect(Tok::RParen, "`)`")?;
        check_arity(builtin, &args, pos)?;
        Ok(Expr::Call(builtin, args))
    }
}

fn check_arity(b: Builtin, args: &[Arg], pos: Pos) -> PResult<()> {
    let elements: usize = args
        .iter()
        .map(|a| match a {
            Arg::Scalar(_) => 1,
            Arg::Vector(s) => s.len(),
        })
        .sum();
    let bad = |msg: String| Err(parse_err(pos, msg));
    match b {
        Builtin::Abs | Builtin::Exp | Builtin::Log | Builtin::Sqrt | Builtin::Tanh | Builtin::Sq => {
            if args.len() != 1 {
                return bad(format!("`{}` takes exactly one argument", b.name()));
            }
        }
        Builtin::Clip => {
            if args.len() != 3 {
                return bad("`clip` takes (value, low, high)".into());
            }
        }
        Builtin::Dot => match args {
            [Arg::Vector(a), Arg::Vector(c)] if a.len() == c.len() => {}
            [Arg::Vector(_), Arg::Vector(_)] => return bad("`dot` needs two slices of equal length".into()),
            _ => return bad("`dot` takes exactly two vector slices".into()),
        },
        Builtin::Min | Builtin::Max => {
            if elements == 0 {
                return bad(format!("`{}` needs at least one element", b.name()));
            }
        }
        Builtin::Sum | Builtin::Norm1 | Builtin::Norm2 => {
            if args.is_empty() {
                return bad(format!("`{}` needs at least one argument", b.name()));
            }
        }
    }
    Ok(())
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Num(v) | Tok::Int(_, v) => format!("number `{v}`"),
        Tok::Ident(n) => format!("`{n}`"),
        Tok::Eof => "end of input".into(),
        other => format!("{other:?}").to_lowercase(),
    }
}
