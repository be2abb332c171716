use std::fmt;
use std::str::FromStr;

use super::ast::{Atom, Expr};
use super::FormulaError;

/// Decoding schemes from earlier work expressed as formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// `M + λ*(Mp - Mn)`
    Dexperts,
    /// `M + λ*Ma`
    Preadd,
    /// `M + λ*Ma`
    Cfg,
    /// `M + λ1*A1 - λ2*A2`
    Cognac,
    /// `M + classifier(C)`
    Fudge,
    /// `M + λ*classifier(C)`
    FudgeScaled,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Dexperts,
        Preset::Preadd,
        Preset::Cfg,
        Preset::Cognac,
        Preset::Fudge,
        Preset::FudgeScaled,
    ];

    /// Number of named sources and of strengths.
    pub fn arity(self) -> (usize, usize) {
        match self {
            Preset::Dexperts => (3, 1),
            Preset::Preadd | Preset::Cfg => (2, 1),
            Preset::Cognac => (3, 2),
            Preset::Fudge => (2, 0),
            Preset::FudgeScaled => (2, 1),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Dexperts => "dexperts",
            Preset::Preadd => "preadd",
            Preset::Cfg => "cfg",
            Preset::Cognac => "cognac",
            Preset::Fudge => "fudge",
            Preset::FudgeScaled => "fudge_scaled",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| format!("unknown preset `{s}`"))
    }
}

/// Builds the formula of `preset` over the named sources and strengths.
pub fn preset(preset: Preset, sources: &[&str], strengths: &[f64]) -> Result<Expr, FormulaError> {
    let (ns, nl) = preset.arity();
    if sources.len() != ns || strengths.len() != nl {
        return Err(FormulaError::PresetArity {
            preset: preset.to_string(),
            expected: format!("{ns} source(s) and {nl} strength(s)"),
            got: format!("{} and {}", sources.len(), strengths.len()),
        });
    }
    let s = |i: usize| Atom::source(sources[i]);
    Ok(match preset {
        Preset::Dexperts => Expr::sum([
            (1.0, s(0)),
            (
                strengths[0],
                Atom::Group(Box::new(Expr::sum([(1.0, s(1)), (-1.0, s(2))]))),
            ),
        ]),
        Preset::Preadd | Preset::Cfg => Expr::sum([(1.0, s(0)), (strengths[0], s(1))]),
        Preset::Cognac => Expr::sum([(1.0, s(0)), (strengths[0], s(1)), (-strengths[1], s(2))]),
        Preset::Fudge => Expr::sum([(1.0, s(0)), (1.0, Atom::classifier(sources[1], None))]),
        Preset::FudgeScaled => Expr::sum([
            (1.0, s(0)),
            (strengths[0], Atom::classifier(sources[1], None)),
        ]),
    })
}

/// Replaces every occurrence of source `target` (a large model conditioned
/// on attribute a2) by `(big_a1 + small_a2 - small_a1)`, i.e.
/// `log M(x|a2) ≈ log M(x|a1) + log m(x|a2) − log m(x|a1)`.
pub fn attribute_transfer_rewrite(
    expr: &Expr,
    target: &str,
    big_a1: &str,
    small_a1: &str,
    small_a2: &str,
) -> Expr {
    expr.map_atoms(&mut |atom| match atom {
        Atom::Source { name, .. } if name == target => Some(Atom::Group(Box::new(Expr::sum([
            (1.0, Atom::source(big_a1)),
            (1.0, Atom::source(small_a2)),
            (-1.0, Atom::source(small_a1)),
        ])))),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_expr;

    #[test]
    fn presets_match_their_formulas() {
        let cases: [(Preset, &[&str], &[f64], &str); 6] = [
            (Preset::Preadd, &["M", "Ma"], &[0.6], "M + 0.6*Ma"),
            (Preset::Cfg, &["M", "Ma"], &[2.0], "M + 2*Ma"),
            (Preset::Fudge, &["M", "C"], &[], "M + classifier(C)"),
            (Preset::FudgeScaled, &["M", "C"], &[0.5], "M + 0.5*classifier(C)"),
            (Preset::Cognac, &["M", "A1", "A2"], &[1.0, 1.0], "M + A1 - A2"),
            (Preset::Dexperts, &["M", "P", "N"], &[0.3], "M + 0.3*(P - N)"),
        ];
        for (p, srcs, ls, text) in cases {
            assert_eq!(preset(p, srcs, ls).unwrap(), parse_expr(text).unwrap(), "{p}");
        }
    }

    #[test]
    fn arity_is_checked() {
        assert!(matches!(
            preset(Preset::Preadd, &["M"], &[0.6]),
            Err(FormulaError::PresetArity { .. })
        ));
        assert!(matches!(
            preset(Preset::Fudge, &["M", "C"], &[1.0]),
            Err(FormulaError::PresetArity { .. })
        ));
        assert_eq!("fudge_scaled".parse::<Preset>(), Ok(Preset::FudgeScaled));
        assert!("pplm".parse::<Preset>().is_err());
    }

    #[test]
    fn attribute_transfer_replaces_every_occurrence() {
        let e = parse_expr("M2 + 0.5*union(M2, X)").unwrap();
        let r = attribute_transfer_rewrite(&e, "M2", "B1", "S1", "S2");
        assert_eq!(
            r,
            parse_expr("(B1 + S2 - S1) + 0.5*union((B1 + S2 - S1), X)").unwrap()
        );
    }
}
