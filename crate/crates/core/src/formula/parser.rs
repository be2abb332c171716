//! Recursive-descent parser for the formula language.
//!
//! ```text
//! formula := term (("+" | "-") term)*
//! term    := [number "*"] atom
//! atom    := ident | "uniform" | "(" formula ")"
//!          | "union(" formula "," formula ")"
//!          | "intersection(" formula "," formula ")"
//!          | "supersede(" formula "," formula ")"
//!          | "classifier(" ident ["," integer] ")"
//! ```
//!
//! Numbers may carry a sign. The first term may also take a bare sign, as in
//! `-M + 2*N`.

use super::ast::{Atom, Expr, Span, TermExpr};
use super::FormulaError;

pub const KEYWORDS: [&str; 5] = ["union", "intersection", "supersede", "classifier", "uniform"];

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    LParen,
    RParen,
    Comma,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Lexeme {
    tok: Tok,
    span: Span,
    text: String,
}

fn lex(src: &str) -> Result<Vec<Lexeme>, FormulaError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let (mut line, mut col) = (1, 1);
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        let here = |end: usize| Span {
            start,
            end,
            line,
            col,
        };
        if c.is_whitespace() {
            i += 1;
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            continue;
        }
        let mut j = i + 1;
        let tok = match c {
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            c if c.is_ascii_alphabetic() || c == '_' => {
                while j < chars.len() && (chars[j].1.is_ascii_alphanumeric() || chars[j].1 == '_') {
                    j += 1;
                }
                Tok::Ident(src[start..offset(&chars, j, src)].to_string())
            }
            c if c.is_ascii_digit() || c == '.' => {
                let digits = |mut k: usize| {
                    while k < chars.len() && chars[k].1.is_ascii_digit() {
                        k += 1;
                    }
                    k
                };
                j = digits(i);
                if j < chars.len() && chars[j].1 == '.' {
                    j = digits(j + 1);
                }
                if j < chars.len() && matches!(chars[j].1, 'e' | 'E') {
                    let mut k = j + 1;
                    if k < chars.len() && matches!(chars[k].1, '+' | '-') {
                        k += 1;
                    }
                    let end = digits(k);
                    if end > k {
                        j = end;
                    }
                }
                let text = &src[start..offset(&chars, j, src)];
                match text.parse::<f64>() {
                    Ok(v) if v.is_finite() => Tok::Num(v),
                    _ => {
                        return Err(FormulaError::parse(
                            here(start + text.len()),
                            format!("invalid number `{text}`"),
                        ))
                    }
                }
            }
            other => {
                return Err(FormulaError::parse(
                    here(start + other.len_utf8()),
                    format!("unexpected character `{other}`"),
                ))
            }
        };
        let end = offset(&chars, j, src);
        out.push(Lexeme {
            tok,
            span: here(end),
            text: src[start..end].to_string(),
        });
        col += j - i;
        i = j;
    }
    out.push(Lexeme {
        tok: Tok::Eof,
        span: Span {
            start: src.len(),
            end: src.len(),
            line,
            col,
        },
        text: String::new(),
    });
    Ok(out)
}

fn offset(chars: &[(usize, char)], idx: usize, src: &str) -> usize {
    chars.get(idx).map_or(src.len(), |&(o, _)| o)
}

struct Parser {
    toks: Vec<Lexeme>,
    pos: usize,
}

/// Parses formula text into a syntax tree without resolving names.
pub fn parse_expr(src: &str) -> Result<Expr, FormulaError> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
    };
    let e = p.formula()?;
    p.expect(Tok::Eof, "`+`, `-` or end of input")?;
    Ok(e)
}

impl Parser {
    fn peek(&self) -> &Lexeme {
        &self.toks[self.pos]
    }

    fn peek_at(&self, ahead: usize) -> &Tok {
        &self.toks[(self.pos + ahead).min(self.toks.len() - 1)].tok
    }

    fn bump(&mut self) -> Lexeme {
        let l = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        l
    }

    fn unexpected(&self, wanted: &str) -> FormulaError {
        let l = self.peek();
        FormulaError::parse(l.span, format!("expected {wanted}, found {}", l.tok.describe()))
    }

    fn expect(&mut self, tok: Tok, wanted: &str) -> Result<Lexeme, FormulaError> {
        if self.peek().tok == tok {
            Ok(self.bump())
        } else {
            Err(self.unexpected(wanted))
        }
    }

    fn formula(&mut self) -> Result<Expr, FormulaError> {
        let first = self.term(1.0, true)?;
        let mut span = first.span;
        let mut terms = vec![first];
        loop {
            let sign = match self.peek().tok {
                Tok::Plus => 1.0,
                Tok::Minus => -1.0,
                _ => break,
            };
            self.bump();
            let t = self.term(sign, false)?;
            span = span.to(t.span);
            terms.push(t);
        }
        Ok(Expr { terms, span })
    }

    fn term(&mut self, sign: f64, leading: bool) -> Result<TermExpr, FormulaError> {
        let start = self.peek().span;
        let mut coefficient = sign;
        let signed_number = matches!(self.peek().tok, Tok::Plus | Tok::Minus)
            && matches!(self.peek_at(1), Tok::Num(_));
        if signed_number || matches!(self.peek().tok, Tok::Num(_)) {
            if signed_number && self.bump().tok == Tok::Minus {
                coefficient = -coefficient;
            }
            let Tok::Num(v) = self.bump().tok else {
                unreachable!("checked above")
            };
            coefficient *= v;
            self.expect(Tok::Star, "`*` after coefficient")?;
        } else if leading
            && matches!(self.peek().tok, Tok::Plus | Tok::Minus)
            && self.bump().tok == Tok::Minus
        {
            coefficient = -coefficient;
        }
        let (atom, end) = self.atom()?;
        Ok(TermExpr {
            coefficient,
            atom,
            span: start.to(end),
        })
    }

    fn atom(&mut self) -> Result<(Atom, Span), FormulaError> {
        let l = self.peek().clone();
        match &l.tok {
            Tok::LParen => {
                self.bump();
                let e = self.formula()?;
                let close = self.expect(Tok::RParen, "`)`")?;
                Ok((Atom::Group(Box::new(e)), close.span))
            }
            Tok::Ident(name) => {
                self.bump();
                let call = |p: &mut Parser| p.expect(Tok::LParen, &format!("`(` after `{name}`"));
                match name.as_str() {
                    "uniform" => Ok((Atom::Uniform { span: l.span }, l.span)),
                    "union" | "intersection" | "supersede" => {
                        call(self)?;
                        let a = self.formula()?;
                        self.expect(Tok::Comma, "`,`")?;
                        let b = self.formula()?;
                        let close = self.expect(Tok::RParen, "`)`")?;
                        let (a, b) = (Box::new(a), Box::new(b));
                        let atom = match name.as_str() {
                            "union" => Atom::Union(a, b),
                            "intersection" => Atom::Intersection(a, b),
                            _ => Atom::Supersede(a, b),
                        };
                        Ok((atom, close.span))
                    }
                    "classifier" => {
                        call(self)?;
                        let id = self.peek().clone();
                        let Tok::Ident(cname) = id.tok else {
                            return Err(self.unexpected("classifier name"));
                        };
                        self.bump();
                        let mut top_k = None;
                        if self.peek().tok == Tok::Comma {
                            self.bump();
                            let n = self.peek().clone();
                            let k = match n.tok {
                                Tok::Num(_) if n.text.bytes().all(|b| b.is_ascii_digit()) => {
                                    n.text.parse::<usize>().ok().filter(|&k| k >= 1)
                                }
                                _ => None,
                            };
                            let Some(k) = k else {
                                return Err(self.unexpected("positive integer top_k"));
                            };
                            self.bump();
                            top_k = Some(k);
                        }
                        let close = self.expect(Tok::RParen, "`)`")?;
                        Ok((
                            Atom::Classifier {
                                name: cname,
                                top_k,
                                span: id.span,
                            },
                            close.span,
                        ))
                    }
                    _ => Ok((
                        Atom::Source {
                            name: name.clone(),
                            span: l.span,
                        },
                        l.span,
                    )),
                }
            }
            _ => Err(self.unexpected("a source, `(` or an operator")),
        }
    }
}
