use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ExecState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ge => ord != Less,
            CmpOp::Eq => ord == Equal,
            CmpOp::Ne => ord != Equal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Literal {
    Num(f64),
    Str(String),
    Bool(bool),
}

impl Literal {
    pub fn to_value(&self) -> Value {
        match self {
            Literal::Num(n) => serde_json::Number::from_f64(*n).map(Value::Number).unwrap_or(Value::Null),
            Literal::Str(s) => Value::String(s.clone()),
            Literal::Bool(b) => Value::Bool(*b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Atom {
    /// `M["k"] op literal`; false when `k` is absent.
    Metric { key: String, op: CmpOp, value: Literal },
    /// `C["k"] op literal`; absent keys and type clashes are errors.
    Context { key: String, op: CmpOp, value: Literal },
    /// `"k" in C`
    InContext(String),
    /// `"k" not in C`
    NotInContext(String),
    /// Bare identifier: the boolean `C["name"]`, false when absent.
    Flag(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    Atom(Atom),
    Not(Box<Condition>),
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConditionError {
    #[error("type mismatch in `{atom}`: {detail}")]
    TypeMismatch { atom: String, detail: String },
}

fn mismatch(atom: &Atom, detail: impl Into<String>) -> ConditionError {
    ConditionError::TypeMismatch { atom: atom.to_string(), detail: detail.into() }
}

impl Atom {
    pub fn eval(&self, state: &ExecState) -> Result<bool, ConditionError> {
        match self {
            Atom::Metric { key, op, value } => {
                let Literal::Num(rhs) = value else {
                    return Err(mismatch(self, "metrics compare against numbers only"));
                };
                Ok(match state.metadata.get(key) {
                    Some(lhs) => lhs.partial_cmp(rhs).is_some_and(|o| op.holds(o)),
                    None => false,
                })
            }
            Atom::Context { key, op, value } => {
                let lhs = state.context.get(key).ok_or_else(|| mismatch(self, format!("C[\"{key}\"] is absent")))?;
                let ord = match (lhs, value) {
                    (Value::Number(n), Literal::Num(r)) => {
                        n.as_f64().and_then(|l| l.partial_cmp(r)).ok_or_else(|| mismatch(self, "not comparable"))?
                    }
                    (Value::String(l), Literal::Str(r)) => l.as_str().cmp(r.as_str()),
                    (Value::Bool(l), Literal::Bool(r)) if matches!(op, CmpOp::Eq | CmpOp::Ne) => l.cmp(r),
                    (l, _) => return Err(mismatch(self, format!("C[\"{key}\"] = {l} does not compare with {value}"))),
                };
                Ok(op.holds(ord))
            }
            Atom::InContext(k) => Ok(state.context.contains_key(k)),
            Atom::NotInContext(k) => Ok(!state.context.contains_key(k)),
            Atom::Flag(k) => match state.context.get(k) {
                None => Ok(false),
                Some(Value::Bool(b)) => Ok(*b),
                Some(other) => Err(mismatch(self, format!("flag C[\"{k}\"] is {other}, not a boolean"))),
            },
        }
    }
}

impl Condition {
    pub fn atom(a: Atom) -> Self {
        Condition::Atom(a)
    }

    pub fn metric(key: &str, op: CmpOp, value: f64) -> Self {
        Condition::Atom(Atom::Metric { key: key.into(), op, value: Literal::Num(value) })
    }

    pub fn not(c: Condition) -> Self {
        Condition::Not(Box::new(c))
    }

    pub fn and(a: Condition, b: Condition) -> Self {
        Condition::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Condition, b: Condition) -> Self {
        Condition::Or(Box::new(a), Box::new(b))
    }

    /// Evaluates with short-circuiting `and`/`or`. Never mutates `state`.
    pub fn eval(&self, state: &ExecState) -> Result<bool, ConditionError> {
        match self {
            Condition::Atom(a) => a.eval(state),
            Condition::Not(c) => Ok(!c.eval(state)?),
            Condition::And(a, b) => Ok(a.eval(state)? && b.eval(state)?),
            Condition::Or(a, b) => Ok(a.eval(state)? || b.eval(state)?),
        }
    }

    /// Metric keys the condition reads.
    pub fn metric_keys(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_metrics(&mut out);
        out
    }

    fn collect_metrics(&self, out: &mut Vec<String>) {
        match self {
            Condition::Atom(Atom::Metric { key, .. }) => {
                if !out.contains(key) {
                    out.push(key.clone())
                }
            }
            Condition::Atom(_) => {}
            Condition::Not(c) => c.collect_metrics(out),
            Condition::And(a, b) | Condition::Or(a, b) => {
                a.collect_metrics(out);
                b.collect_metrics(out);
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Condition::Or(..) => 1,
            Condition::And(..) => 2,
            Condition::Not(_) => 3,
            Condition::Atom(_) => 4,
        }
    }
}

pub(crate) fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Num(n) => write!(f, "{n}"),
            Literal::Str(s) => f.write_str(&quote(s)),
            Literal::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Metric { key, op, value } => write!(f, "M[{}] {} {}", quote(key), op.symbol(), value),
            Atom::Context { key, op, value } => write!(f, "C[{}] {} {}", quote(key), op.symbol(), value),
            Atom::InContext(k) => write!(f, "{} in C", quote(k)),
            Atom::NotInContext(k) => write!(f, "{} not in C", quote(k)),
            Atom::Flag(k) => f.write_str(k),
        }
    }
}

/// Canonical text; parenthesizes only where re-parsing would change the tree.
impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let child = |f: &mut fmt::Formatter<'_>, c: &Condition, min: u8| -> fmt::Result {
            if c.precedence() < min {
                write!(f, "({c})")
            } else {
                write!(f, "{c}")
            }
        };
        match self {
            Condition::Atom(a) => write!(f, "{a}"),
            Condition::Not(c) => {
                f.write_str("not ")?;
                child(f, c, 3)
            }
            Condition::And(a, b) => {
                child(f, a, 2)?;
                f.write_str(" and ")?;
                child(f, b, 3)
            }
            Condition::Or(a, b) => {
                child(f, a, 1)?;
                f.write_str(" or ")?;
                child(f, b, 2)
            }
        }
    }
}
