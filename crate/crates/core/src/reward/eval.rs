use super::ast::{Arg, BinOp, Builtin, Expr, Input, Program, Slice};
use super::EvalError;

struct Machine<'a> {
    obs: &'a [f64],
    act: &'a [f64],
    next: &'a [f64],
    locals: Vec<f64>,
    steps: usize,
    budget: usize,
}

#[inline]
fn finite(v: f64) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite)
    }
}

fn truth(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl Machine<'_> {
    #[inline]
    fn tick(&mut self, n: usize) -> Result<(), EvalError> {
        self.steps += n;
        if self.steps > self.budget {
            Err(EvalError::BudgetExceeded { budget: self.budget })
        } else {
            Ok(())
        }
    }

    fn vector(&self, input: Input) -> &[f64] {
        match input {
            Input::Obs => self.obs,
            Input::Act => self.act,
            Input::Next => self.next,
        }
    }

    fn slice(&mut self, s: &Slice) -> Result<&[f64], EvalError> {
        self.tick(s.len())?;
        let v = &self.vector(s.input)[s.start..s.end];
        if v.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    fn eval(&mut self, e: &Expr) -> Result<f64, EvalError> {
        self.tick(1)?;
        match e {
            Expr::Num(v) => Ok(*v),
            Expr::Index(i, k) => finite(self.vector(*i)[*k]),
            Expr::Local(k) => Ok(self.locals[*k]),
            Expr::Neg(a) => Ok(-self.eval(a)?),
            Expr::Not(a) => Ok(truth(self.eval(a)? == 0.0)),
            Expr::Binary(BinOp::And, a, b) => {
                if self.eval(a)? == 0.0 {
                    return Ok(0.0);
                }
                Ok(truth(self.eval(b)? != 0.0))
            }
            Expr::Binary(BinOp::Or, a, b) => {
                if self.eval(a)? != 0.0 {
                    return Ok(1.0);
                }
                Ok(truth(self.eval(b)? != 0.0))
            }
            Expr::Binary(op, a, b) => {
                let x = self.eval(a)?;
                let y = self.eval(b)?;
                finite(match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Pow => x.powf(y),
                    BinOp::Lt => truth(x < y),
                    BinOp::Le => truth(x <= y),
                    BinOp::Gt => truth(x > y),
                    BinOp::Ge => truth(x >= y),
                    BinOp::Eq => truth(x == y),
                    BinOp::Ne => truth(x != y),
                    BinOp::And | BinOp::Or => unreachable!("short-circuit operators handled above"),
                })
            }
            Expr::If(c, a, b) => {
                if self.eval(c)? != 0.0 {
                    self.eval(a)
                } else {
                    self.eval(b)
                }
            }
            Expr::Call(b, args) => self.call(*b, args),
        }
    }

    fn scalar(&mut self, a: &Arg) -> Result<f64, EvalError> {
        match a {
            Arg::Scalar(e) => self.eval(e),
            Arg::Vector(_) => unreachable!("parser rejects vectors for scalar builtins"),
        }
    }

    /// Folds every element of every argument, left to right.
    fn fold(&mut self, args: &[Arg], init: f64, f: impl Fn(f64, f64) -> f64) -> Result<f64, EvalError> {
        let mut acc = init;
        for a in args {
            match a {
                Arg::Scalar(e) => {
                    let v = self.eval(e)?;
                    acc = f(acc, v);
                }
                Arg::Vector(s) => {
                    for &v in self.slice(s)? {
                        acc = f(acc, v);
                    }
                }
            }
            finite(acc)?;
        }
        Ok(acc)
    }

    fn call(&mut self, b: Builtin, args: &[Arg]) -> Result<f64, EvalError> {
        let v = match b {
            Builtin::Abs => self.scalar(&args[0])?.abs(),
            Builtin::Exp => self.scalar(&args[0])?.exp(),
            Builtin::Log => self.scalar(&args[0])?.ln(),
            Builtin::Sqrt => self.scalar(&args[0])?.sqrt(),
            Builtin::Tanh => self.scalar(&args[0])?.tanh(),
            Builtin::Sq => {
                let x = self.scalar(&args[0])?;
                x * x
            }
            Builtin::Clip => {
                let x = self.scalar(&args[0])?;
                let lo = self.scalar(&args[1])?;
                let hi = self.scalar(&args[2])?;
                x.max(lo).min(hi)
            }
            Builtin::Min => self.fold(args, f64::INFINITY, f64::min)?,
            Builtin::Max => self.fold(args, f64::NEG_INFINITY, f64::max)?,
            Builtin::Sum => self.fold(args, 0.0, |acc, v| acc + v)?,
            Builtin::Norm1 => self.fold(args, 0.0, |acc, v| acc + v.abs())?,
            Builtin::Norm2 => self.fold(args, 0.0, |acc, v| acc + v * v)?.sqrt(),
            Builtin::Dot => {
                let (Arg::Vector(l), Arg::Vector(r)) = (&args[0], &args[1]) else {
                    unreachable!("parser enforces two slices for dot")
                };
                self.tick(l.len() + r.len())?;
                let x = &self.vector(l.input)[l.start..l.end];
                let y = &self.vector(r.input)[r.start..r.end];
                let mut acc = 0.0;
                for (a, b) in x.iter().zip(y) {
                    acc += a * b;
                }
                acc
            }
        };
        finite(v)
    }
}

pub(crate) fn run(
    program: &Program,
    budget: usize,
    obs: &[f64],
    act: &[f64],
    next: &[f64],
) -> Result<f64, EvalError> {
    let mut m = Machine { obs, act, next, locals: Vec::with_capacity(program.lets.len()), steps: 0, budget };
    for (_, e) in &program.lets {
        let v = m.eval(e)?;
        m.locals.push(v);
    }
    m.eval(&program.result)
}
