//! Small expression language used in specification values:
//! numbers, identifiers, quoted strings, lists `[a, b]` and calls
//! `name(x, key=value)` that nest freely.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Ident(String),
    Str(String),
    List(Vec<Expr>),
    Call(String, Vec<Arg>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arg {
    pub key: Option<String>,
    pub value: Expr,
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Ident(s) => f.write_str(s),
            Expr::Str(s) => write!(f, "{s:?}"),
            Expr::List(items) => {
                f.write_str("[")?;
                for (i, x) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{x}")?;
                }
                f.write_str("]")
            }
            Expr::Call(name, args) => {
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    if let Some(k) = &a.key {
                        write!(f, "{k}=")?;
                    }
                    write!(f, "{}", a.value)?;
                }
                f.write_str(")")
            }
        }
    }
}

impl Expr {
    pub fn describe(&self) -> &'static str {
        match self {
            Expr::Num(_) => "a number",
            Expr::Ident(_) => "a name",
            Expr::Str(_) => "a string",
            Expr::List(_) => "a list",
            Expr::Call(..) => "a call",
        }
    }

    /// The head name of an identifier or call.
    pub fn head(&self) -> Option<&str> {
        match self {
            Expr::Ident(s) | Expr::Call(s, _) => Some(s),
            _ => None,
        }
    }

    pub fn args(&self) -> &[Arg] {
        match self {
            Expr::Call(_, a) => a,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Str(String),
    Open(char),
    Close(char),
    Comma,
    Eq,
}

fn tokenize(s: &str) -> Result<Vec<Token>, String> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' | '[' => {
                out.push(Token::Open(c));
                i += 1;
            }
            ')' | ']' => {
                out.push(Token::Close(c));
                i += 1;
            }
            ',' => {
                out.push(Token::Comma);
                i += 1;
            }
            '=' => {
                out.push(Token::Eq);
                i += 1;
            }
            '"' => {
                let mut text = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err("unterminated string".into()),
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            match chars.get(i + 1) {
                                Some(&e @ ('"' | '\\')) => text.push(e),
                                Some('n') => text.push('\n'),
                                Some(o) => return Err(format!("unknown escape '\\{o}'")),
                                None => return Err("unterminated string".into()),
                            }
                            i += 2;
                        }
                        Some(&ch) => {
                            text.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(Token::Str(text));
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let start = i;
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    let exp_sign = (d == '-' || d == '+') && matches!(chars[i - 1], 'e' | 'E');
                    if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let v = text.parse::<f64>().map_err(|_| format!("malformed number '{text}'"))?;
                out.push(Token::Num(v));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token::Ident(chars[start..i].iter().collect()));
            }
            other => return Err(format!("unexpected character '{other}'")),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr, String> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Expr::Num(v)),
            Some(Token::Str(s)) => Ok(Expr::Str(s)),
            Some(Token::Open('[')) => {
                let items = self.sequence(']', |p| p.expr())?;
                Ok(Expr::List(items))
            }
            Some(Token::Ident(name)) => {
                if self.peek() == Some(&Token::Open('(')) {
                    self.pos += 1;
                    let args = self.sequence(')', |p| p.arg())?;
                    Ok(Expr::Call(name, args))
                } else {
                    Ok(Expr::Ident(name))
                }
            }
            Some(t) => Err(format!("unexpected {}", token_text(&t))),
            None => Err("unexpected end of value".into()),
        }
    }

    fn arg(&mut self) -> Result<Arg, String> {
        if let (Some(Token::Ident(k)), Some(Token::Eq)) = (self.tokens.get(self.pos), self.tokens.get(self.pos + 1)) {
            let key = k.clone();
            self.pos += 2;
            return Ok(Arg {
                key: Some(key),
                value: self.expr()?,
            });
        }
        Ok(Arg {
            key: None,
            value: self.expr()?,
        })
    }

    fn sequence<T>(&mut self, close: char, mut item: impl FnMut(&mut Self) -> Result<T, String>) -> Result<Vec<T>, String> {
        let mut out = Vec::new();
        if self.peek() == Some(&Token::Close(close)) {
            self.pos += 1;
            return Ok(out);
        }
        loop {
            out.push(item(self)?);
            match self.next() {
                Some(Token::Comma) => {}
                Some(Token::Close(c)) if c == close => return Ok(out),
                Some(t) => return Err(format!("expected ',' or '{close}', found {}", token_text(&t))),
                None => return Err(format!("missing '{close}'")),
            }
        }
    }
}

fn token_text(t: &Token) -> String {
    match t {
        Token::Num(v) => format!("number {v}"),
        Token::Ident(s) => format!("'{s}'"),
        Token::Str(s) => format!("string {s:?}"),
        Token::Open(c) | Token::Close(c) => format!("'{c}'"),
        Token::Comma => "','".into(),
        Token::Eq => "'='".into(),
    }
}

pub fn parse_expr(s: &str) -> Result<Expr, String> {
    let tokens = tokenize(s)?;
    let mut p = Parser { tokens, pos: 0 };
    let e = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(format!("trailing input at {}", token_text(t)));
    }
    Ok(e)
}

/// Looks up a call argument by keyword, falling back to position.
pub fn arg<'a>(args: &'a [Arg], key: &str, position: usize) -> Option<&'a Expr> {
    args.iter()
        .find(|a| a.key.as_deref() == Some(key))
        .or_else(|| args.get(position).filter(|a| a.key.is_none()))
        .map(|a| &a.value)
}

/// Errors on keywords outside `allowed` and on more positional arguments than it holds.
pub fn check_args(call: &str, args: &[Arg], allowed: &[&str]) -> Result<(), String> {
    for (i, a) in args.iter().enumerate() {
        match &a.key {
            Some(k) if !allowed.contains(&k.as_str()) => {
                return Err(format!("{call}() has no argument '{k}' (expected {})", allowed.join(", ")))
            }
            None if i >= allowed.len() => return Err(format!("{call}() takes at most {} arguments", allowed.len())),
            _ => {}
        }
    }
    Ok(())
}

pub fn as_num(e: &Expr, what: &str) -> Result<f64, String> {
    match e {
        Expr::Num(v) => Ok(*v),
        other => Err(format!("{what} must be a number, found {}", other.describe())),
    }
}

pub fn as_count(e: &Expr, what: &str) -> Result<usize, String> {
    let v = as_num(e, what)?;
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(format!("{what} must be a non-negative integer, got {v}"));
    }
    Ok(v as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_calls_and_strings() {
        let e = parse_expr(r#"hierarchical(pi=truncated_normal(lo=-1, hi=2), levels=3, groupings="a, b (c)")"#).unwrap();
        let Expr::Call(name, args) = &e else { panic!() };
        assert_eq!(name, "hierarchical");
        assert_eq!(args.len(), 3);
        assert_eq!(arg(args, "groupings", 9), Some(&Expr::Str("a, b (c)".into())));
        assert_eq!(parse_expr(&e.to_string()).unwrap(), e);
    }

    #[test]
    fn numbers_with_exponents() {
        assert_eq!(parse_expr("-2.5e-3").unwrap(), Expr::Num(-2.5e-3));
        assert_eq!(parse_expr("[1, K]").unwrap(), Expr::List(vec![Expr::Num(1.0), Expr::Ident("K".into())]));
    }

    #[test]
    fn malformed_inputs() {
        assert!(parse_expr("f(1").is_err());
        assert!(parse_expr("f(1))").is_err());
        assert!(parse_expr("\"open").is_err());
        assert!(parse_expr("").is_err());
    }
}
