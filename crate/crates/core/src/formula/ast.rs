use std::fmt;

/// Location of a syntax element in formula source text.
///
/// `start..end` are byte offsets; `line` and `col` (1-based, columns counted
/// in characters) locate `start`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub line: usize,
    pub col: usize,
}

impl Span {
    /// Span covering both `self` and `other`.
    pub fn to(self, other: Span) -> Span {
        Span {
            end: other.end,
            ..self
        }
    }

    /// The covered slice of `src`, if the span lies within it.
    pub fn snippet<'a>(&self, src: &'a str) -> Option<&'a str> {
        src.get(self.start..self.end)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

/// A signed sum of weighted atoms.
///
/// Equality ignores spans, so a reparsed pretty-print compares equal to the
/// original tree.
#[derive(Debug, Clone)]
pub struct Expr {
    pub terms: Vec<TermExpr>,
    pub span: Span,
}

#[derive(Debug, Clone)]
pub struct TermExpr {
    pub coefficient: f64,
    pub atom: Atom,
    pub span: Span,
}

#[derive(Debug, Clone)]
pub enum Atom {
    Source { name: String, span: Span },
    Uniform { span: Span },
    Group(Box<Expr>),
    Union(Box<Expr>, Box<Expr>),
    Intersection(Box<Expr>, Box<Expr>),
    Classifier {
        name: String,
        top_k: Option<usize>,
        span: Span,
    },
    Supersede(Box<Expr>, Box<Expr>),
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms
    }
}

impl PartialEq for TermExpr {
    fn eq(&self, other: &Self) -> bool {
        self.coefficient == other.coefficient && self.atom == other.atom
    }
}

impl PartialEq for Atom {
    fn eq(&self, other: &Self) -> bool {
        use Atom::*;
        match (self, other) {
            (Source { name: a, .. }, Source { name: b, .. }) => a == b,
            (Uniform { .. }, Uniform { .. }) => true,
            (Group(a), Group(b)) => a == b,
            (Union(a1, a2), Union(b1, b2))
            | (Intersection(a1, a2), Intersection(b1, b2))
            | (Supersede(a1, a2), Supersede(b1, b2)) => a1 == b1 && a2 == b2,
            (
                Classifier {
                    name: a, top_k: ka, ..
                },
                Classifier {
                    name: b, top_k: kb, ..
                },
            ) => a == b && ka == kb,
            _ => false,
        }
    }
}

impl Expr {
    /// Builds an expression from `(coefficient, atom)` pairs with empty spans.
    pub fn sum(terms: impl IntoIterator<Item = (f64, Atom)>) -> Self {
        Self {
            terms: terms
                .into_iter()
                .map(|(coefficient, atom)| TermExpr {
                    coefficient,
                    atom,
                    span: Span::default(),
                })
                .collect(),
            span: Span::default(),
        }
    }

    /// A single unit-weight atom.
    pub fn atom(atom: Atom) -> Self {
        Self::sum([(1.0, atom)])
    }

    /// Visits every atom, outermost first.
    pub fn walk<'a>(&'a self, visit: &mut dyn FnMut(&'a Atom)) {
        for t in &self.terms {
            visit(&t.atom);
            match &t.atom {
                Atom::Group(e) => e.walk(visit),
                Atom::Union(a, b) | Atom::Intersection(a, b) | Atom::Supersede(a, b) => {
                    a.walk(visit);
                    b.walk(visit);
                }
                _ => {}
            }
        }
    }

    /// Rebuilds the tree bottom-up, letting `f` replace any atom.
    pub fn map_atoms(&self, f: &mut dyn FnMut(&Atom) -> Option<Atom>) -> Expr {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let atom = match &t.atom {
                    Atom::Group(e) => Atom::Group(Box::new(e.map_atoms(f))),
                    Atom::Union(a, b) => {
                        Atom::Union(Box::new(a.map_atoms(f)), Box::new(b.map_atoms(f)))
                    }
                    Atom::Intersection(a, b) => {
                        Atom::Intersection(Box::new(a.map_atoms(f)), Box::new(b.map_atoms(f)))
                    }
                    Atom::Supersede(a, b) => {
                        Atom::Supersede(Box::new(a.map_atoms(f)), Box::new(b.map_atoms(f)))
                    }
                    other => other.clone(),
                };
                TermExpr {
                    coefficient: t.coefficient,
                    atom: f(&atom).unwrap_or(atom),
                    span: t.span,
                }
            })
            .collect();
        Expr {
            terms,
            span: self.span,
        }
    }
}

impl Atom {
    pub fn source(name: impl Into<String>) -> Self {
        Atom::Source {
            name: name.into(),
            span: Span::default(),
        }
    }

    pub fn classifier(name: impl Into<String>, top_k: Option<usize>) -> Self {
        Atom::Classifier {
            name: name.into(),
            top_k,
            span: Span::default(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            let c = t.coefficient;
            let negative = c.is_sign_negative();
            match (i, negative) {
                (0, true) => f.write_str("-")?,
                (0, false) => {}
                (_, true) => f.write_str(" - ")?,
                (_, false) => f.write_str(" + ")?,
            }
            let magnitude = c.abs();
            if magnitude != 1.0 {
                write!(f, "{magnitude}*")?;
            }
            write!(f, "{}", t.atom)?;
        }
        Ok(())
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Source { name, .. } => f.write_str(name),
            Atom::Uniform { .. } => f.write_str("uniform"),
            Atom::Group(e) => write!(f, "({e})"),
            Atom::Union(a, b) => write!(f, "union({a}, {b})"),
            Atom::Intersection(a, b) => write!(f, "intersection({a}, {b})"),
            Atom::Supersede(a, b) => write!(f, "supersede({a}, {b})"),
            Atom::Classifier {
                name,
                top_k: Some(k),
                ..
            } => write!(f, "classifier({name}, {k})"),
            Atom::Classifier { name, .. } => write!(f, "classifier({name})"),
        }
    }
}
