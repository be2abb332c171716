use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ast::{Atom, Expr, Span};
use super::parser::KEYWORDS;
use super::FormulaError;
use crate::dist::{TokenId, DEFAULT_FLOOR};
use crate::providers::{SharedClassifier, SharedProvider};

/// Tokens scored exactly by a classifier term unless the formula says
/// otherwise.
pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Raw,
    KlOptimal,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::KlOptimal => "kl_optimal",
        })
    }
}

impl FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Self::Raw),
            "kl_optimal" => Ok(Self::KlOptimal),
            other => Err(format!("unknown normalization mode `{other}`")),
        }
    }
}

/// Named providers and classifiers over one vocabulary.
#[derive(Clone, Default)]
pub struct Registry {
    vocab_size: usize,
    providers: BTreeMap<String, SharedProvider>,
    classifiers: BTreeMap<String, SharedClassifier>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("vocab_size", &self.vocab_size)
            .field("providers", &self.providers.keys().collect::<Vec<_>>())
            .field("classifiers", &self.classifiers.keys().collect::<Vec<_>>())
            .finish()
    }
}

fn valid_ident(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !KEYWORDS.contains(&name)
}

impl Registry {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn check_name(&self, name: &str) -> Result<(), FormulaError> {
        if !valid_ident(name) {
            return Err(FormulaError::Registry(format!(
                "`{name}` is not a usable identifier"
            )));
        }
        if self.providers.contains_key(name) || self.classifiers.contains_key(name) {
            return Err(FormulaError::Registry(format!("duplicate name `{name}`")));
        }
        Ok(())
    }

    pub fn add_provider(&mut self, provider: SharedProvider) -> Result<(), FormulaError> {
        let name = provider.name().to_string();
        self.check_name(&name)?;
        if provider.vocab_size() != self.vocab_size {
            return Err(FormulaError::Registry(format!(
                "provider `{name}` has {} tokens, registry has {}",
                provider.vocab_size(),
                self.vocab_size
            )));
        }
        self.providers.insert(name, provider);
        Ok(())
    }

    pub fn add_classifier(&mut self, classifier: SharedClassifier) -> Result<(), FormulaError> {
        let name = classifier.name().to_string();
        self.check_name(&name)?;
        self.classifiers.insert(name, classifier);
        Ok(())
    }

    pub fn with_provider(mut self, provider: SharedProvider) -> Result<Self, FormulaError> {
        self.add_provider(provider)?;
        Ok(self)
    }

    pub fn with_classifier(mut self, classifier: SharedClassifier) -> Result<Self, FormulaError> {
        self.add_classifier(classifier)?;
        Ok(self)
    }

    pub fn provider(&self, name: &str) -> Option<&SharedProvider> {
        self.providers.get(name)
    }

    pub fn classifier(&self, name: &str) -> Option<&SharedClassifier> {
        self.classifiers.get(name)
    }

    pub fn providers(&self) -> impl Iterator<Item = &SharedProvider> {
        self.providers.values()
    }

    pub fn classifiers(&self) -> impl Iterator<Item = &SharedClassifier> {
        self.classifiers.values()
    }
}

/// What a term reads log-probabilities from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceId {
    Provider(usize),
    Classifier(usize),
    Uniform,
}

/// A distribution that evaluation fetches and caches per context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceKey {
    Provider(usize),
    /// `Q_C` of a classifier, scored exactly on the `top_k` best tokens.
    Classifier { index: usize, top_k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetOp {
    Union,
    Intersection,
}

/// Per-token weight `f'(x)` of a term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weight {
    Ones,
    /// One half of a union or intersection pair. With
    /// `I1(x) = [Q_first(x) > Q_second(x)]`, union gives the first half `I1`
    /// and the second `1 − I1`; intersection swaps them.
    Indicator {
        op: SetOp,
        first: bool,
        other: SourceId,
    },
    /// `λ (log Q_C − log U)`; contributes nothing to the weight sum.
    Classifier { top_k: Option<usize> },
    /// Rebalanced leading term with weight `λ_1 − Σ_{i≥2} λ_i f'_i(x)`.
    Balance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub coefficient: f64,
    pub weight: Weight,
    pub source: SourceId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Model,
    Pair,
    Classifier,
    Supersede,
    Balanced,
}

/// A top-level construct: the granularity at which speculative generation
/// schedules evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub kind: UnitKind,
    pub label: String,
    pub terms: Vec<Term>,
    /// Proposal terms of a `supersede` unit.
    pub proposal: Vec<Term>,
}

pub(crate) type ScaleFn = dyn Fn(&[TokenId]) -> f64 + Send + Sync;

/// A compiled formula bound to concrete providers.
#[derive(Clone)]
pub struct Formula {
    pub(crate) expr: Expr,
    pub(crate) mode: Normalization,
    pub(crate) floor: f64,
    pub(crate) top_k: usize,
    pub(crate) rebalanced: bool,
    pub(crate) vocab_size: usize,
    pub(crate) providers: Vec<SharedProvider>,
    pub(crate) classifiers: Vec<SharedClassifier>,
    pub(crate) units: Vec<Unit>,
    pub(crate) scales: Vec<Option<Arc<ScaleFn>>>,
    pub(crate) ranking: SourceId,
}

impl fmt::Debug for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Formula")
            .field("expr", &self.expr.to_string())
            .field("mode", &self.mode)
            .field("rebalanced", &self.rebalanced)
            .field("units", &self.units)
            .finish_non_exhaustive()
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.expr)
    }
}

struct Lowering<'r> {
    registry: &'r Registry,
    providers: Vec<SharedProvider>,
    classifiers: Vec<SharedClassifier>,
}

impl Lowering<'_> {
    fn provider(&mut self, name: &str, span: Span) -> Result<SourceId, FormulaError> {
        if let Some(i) = self.providers.iter().position(|p| p.name() == name) {
            return Ok(SourceId::Provider(i));
        }
        match self.registry.provider(name) {
            Some(p) => {
                self.providers.push(p.clone());
                Ok(SourceId::Provider(self.providers.len() - 1))
            }
            None if self.registry.classifier(name).is_some() => Err(FormulaError::unsupported(
                span,
                format!("`{name}` is a classifier; write classifier({name})"),
            )),
            None => Err(FormulaError::Name {
                name: name.to_string(),
                span,
            }),
        }
    }

    fn classifier(&mut self, name: &str, span: Span) -> Result<SourceId, FormulaError> {
        if let Some(i) = self.classifiers.iter().position(|c| c.name() == name) {
            return Ok(SourceId::Classifier(i));
        }
        match self.registry.classifier(name) {
            Some(c) => {
                self.classifiers.push(c.clone());
                Ok(SourceId::Classifier(self.classifiers.len() - 1))
            }
            None if self.registry.provider(name).is_some() => Err(FormulaError::unsupported(
                span,
                format!("`{name}` is a model, not a classifier"),
            )),
            None => Err(FormulaError::Name {
                name: name.to_string(),
                span,
            }),
        }
    }

    /// The single unit-weight source an operator argument must reduce to.
    fn single_source(&mut self, e: &Expr, op: &str) -> Result<SourceId, FormulaError> {
        let [t] = e.terms.as_slice() else {
            return Err(FormulaError::unsupported(
                e.span,
                format!("{op} arguments must be single sources"),
            ));
        };
        if t.coefficient != 1.0 {
            return Err(FormulaError::unsupported(
                t.span,
                format!("{op} arguments cannot carry coefficients"),
            ));
        }
        match &t.atom {
            Atom::Source { name, span } => self.provider(name, *span),
            Atom::Uniform { .. } => Ok(SourceId::Uniform),
            Atom::Group(inner) => self.single_source(inner, op),
            Atom::Classifier { span, .. } => Err(FormulaError::unsupported(
                *span,
                format!("classifier terms cannot appear inside {op}"),
            )),
            _ => Err(FormulaError::unsupported(
                t.span,
                format!("{op} arguments must be single sources"),
            )),
        }
    }

    /// Lowers `e` scaled by `mult` into one unit per top-level construct.
    fn units(
        &mut self,
        e: &Expr,
        mult: f64,
        in_supersede: bool,
        out: &mut Vec<Unit>,
    ) -> Result<(), FormulaError> {
        for t in &e.terms {
            let c = mult * t.coefficient;
            let label = format!("{}", Expr::sum([(c, t.atom.clone())]));
            let unit = |kind, terms| Unit {
                kind,
                label: label.clone(),
                terms,
                proposal: Vec::new(),
            };
            match &t.atom {
                Atom::Source { name, span } => {
                    let source = self.provider(name, *span)?;
                    out.push(unit(
                        UnitKind::Model,
                        vec![Term {
                            coefficient: c,
                            weight: Weight::Ones,
                            source,
                        }],
                    ));
                }
                Atom::Uniform { .. } => out.push(unit(
                    UnitKind::Model,
                    vec![Term {
                        coefficient: c,
                        weight: Weight::Ones,
                        source: SourceId::Uniform,
                    }],
                )),
                Atom::Group(inner) => self.units(inner, c, in_supersede, out)?,
                Atom::Union(a, b) | Atom::Intersection(a, b) => {
                    let (op, name) = match &t.atom {
                        Atom::Union(..) => (SetOp::Union, "union"),
                        _ => (SetOp::Intersection, "intersection"),
                    };
                    let first = self.single_source(a, name)?;
                    let second = self.single_source(b, name)?;
                    out.push(unit(
                        UnitKind::Pair,
                        vec![
                            Term {
                                coefficient: c,
                                weight: Weight::Indicator {
                                    op,
                                    first: true,
                                    other: second,
                                },
                                source: first,
                            },
                            Term {
                                coefficient: c,
                                weight: Weight::Indicator {
                                    op,
                                    first: false,
                                    other: first,
                                },
                                source: second,
                            },
                        ],
                    ));
                }
                Atom::Classifier { name, top_k, span } => {
                    let source = self.classifier(name, *span)?;
                    out.push(unit(
                        UnitKind::Classifier,
                        vec![Term {
                            coefficient: c,
                            weight: Weight::Classifier { top_k: *top_k },
                            source,
                        }],
                    ));
                }
                Atom::Supersede(a, b) => {
                    if in_supersede {
                        return Err(FormulaError::unsupported(
                            t.span,
                            "supersede cannot be nested",
                        ));
                    }
                    let mut proposal = Vec::new();
                    self.units(a, c, true, &mut proposal)?;
                    let mut authoritative = Vec::new();
                    self.units(b, c, true, &mut authoritative)?;
                    out.push(Unit {
                        kind: UnitKind::Supersede,
                        label: label.clone(),
                        terms: authoritative.into_iter().flat_map(|u| u.terms).collect(),
                        proposal: proposal.into_iter().flat_map(|u| u.terms).collect(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl Formula {
    /// Compiles a syntax tree in raw mode with the default floor and top-k.
    pub fn compile(expr: &Expr, registry: &Registry) -> Result<Self, FormulaError> {
        if registry.vocab_size() < 2 {
            return Err(FormulaError::Registry(
                "registry vocabulary needs at least 2 tokens".into(),
            ));
        }
        let mut lowering = Lowering {
            registry,
            providers: Vec::new(),
            classifiers: Vec::new(),
        };
        let mut units = Vec::new();
        lowering.units(expr, 1.0, false, &mut units)?;
        let ranking = units
            .iter()
            .flat_map(|u| &u.terms)
            .find(|t| !matches!(t.weight, Weight::Classifier { .. }))
            .map_or(SourceId::Uniform, |t| t.source);
        Ok(Self {
            expr: expr.clone(),
            mode: Normalization::Raw,
            floor: DEFAULT_FLOOR,
            top_k: DEFAULT_TOP_K,
            rebalanced: false,
            vocab_size: registry.vocab_size(),
            scales: vec![None; units.len()],
            providers: lowering.providers,
            classifiers: lowering.classifiers,
            units,
            ranking,
        })
    }

    pub fn with_mode(mut self, mode: Normalization) -> Self {
        self.mode = mode;
        self
    }

    /// Default number of tokens a classifier term scores exactly.
    pub fn with_top_k(mut self, top_k: usize) -> Result<Self, FormulaError> {
        if top_k == 0 {
            return Err(FormulaError::Registry("top_k must be at least 1".into()));
        }
        self.top_k = top_k;
        Ok(self)
    }

    /// Lower clamp for combined logits; must be negative and finite.
    pub fn with_floor(mut self, floor: f64) -> Result<Self, FormulaError> {
        if !(floor.is_finite() && floor < 0.0) {
            return Err(FormulaError::Registry(format!(
                "floor must be negative and finite, got {floor}"
            )));
        }
        self.floor = floor;
        Ok(self)
    }

    /// Multiplies every coefficient of unit `unit` by `scale(ctx)`.
    pub fn with_context_scale(
        mut self,
        unit: usize,
        scale: impl Fn(&[TokenId]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self, FormulaError> {
        let slot = self.scales.get_mut(unit).ok_or_else(|| {
            FormulaError::Registry(format!("formula has no unit {unit}"))
        })?;
        *slot = Some(Arc::new(scale));
        Ok(self)
    }

    /// Replaces the leading weight `f_1` by `f_1 − Σ_{i≥2} f_i` so that the
    /// weight sum equals `λ_1` at every token.
    ///
    /// The result is a single unit: every term's weight now depends on the
    /// others, so the formula no longer splits into independently
    /// schedulable parts.
    pub fn rebalanced(&self) -> Result<Self, FormulaError> {
        if self.rebalanced {
            return Ok(self.clone());
        }
        let first = self
            .units
            .first()
            .filter(|u| u.kind == UnitKind::Model)
            .ok_or_else(|| {
                FormulaError::RebalanceUnsupported(
                    "the first term must be a plain model term".into(),
                )
            })?;
        if first.terms[0].weight != Weight::Ones {
            return Err(FormulaError::RebalanceUnsupported(
                "the first term must be a plain model term".into(),
            ));
        }
        if self.scales.iter().skip(1).any(Option::is_some) {
            return Err(FormulaError::RebalanceUnsupported(
                "context scales on later terms".into(),
            ));
        }
        let mut terms: Vec<Term> = self.units.iter().flat_map(|u| u.terms.clone()).collect();
        terms[0].weight = Weight::Balance;
        let mut out = self.clone();
        out.rebalanced = true;
        out.units = vec![Unit {
            kind: if terms.len() == 1 {
                UnitKind::Model
            } else {
                UnitKind::Balanced
            },
            label: self.expr.to_string(),
            terms,
            proposal: Vec::new(),
        }];
        out.scales = vec![self.scales[0].clone()];
        Ok(out)
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn mode(&self) -> Normalization {
        self.mode
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn is_rebalanced(&self) -> bool {
        self.rebalanced
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    /// Authoritative terms in declaration order.
    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.units.iter().flat_map(|u| &u.terms)
    }

    pub fn providers(&self) -> &[SharedProvider] {
        &self.providers
    }

    pub fn classifiers(&self) -> &[SharedClassifier] {
        &self.classifiers
    }

    /// Source whose ranking picks the tokens a classifier scores exactly.
    pub fn ranking_source(&self) -> SourceId {
        self.ranking
    }

    pub fn source_name(&self, id: SourceId) -> &str {
        match id {
            SourceId::Provider(i) => self.providers[i].name(),
            SourceId::Classifier(i) => self.classifiers[i].name(),
            SourceId::Uniform => "uniform",
        }
    }

    pub fn key_name(&self, key: SourceKey) -> &str {
        match key {
            SourceKey::Provider(i) => self.providers[i].name(),
            SourceKey::Classifier { index, .. } => self.classifiers[index].name(),
        }
    }

    pub(crate) fn scale(&self, unit: usize, ctx: &[TokenId]) -> f64 {
        self.scales[unit].as_ref().map_or(1.0, |s| s(ctx))
    }

    fn keys_of(&self, terms: &[Term]) -> Vec<SourceKey> {
        let mut providers = Vec::new();
        let mut classifiers = Vec::new();
        let add_provider = |id: SourceId, out: &mut Vec<SourceKey>| {
            if let SourceId::Provider(i) = id {
                if !out.contains(&SourceKey::Provider(i)) {
                    out.push(SourceKey::Provider(i));
                }
            }
        };
        for t in terms {
            match (t.weight, t.source) {
                (Weight::Classifier { top_k }, SourceId::Classifier(index)) => {
                    add_provider(self.ranking, &mut providers);
                    let key = SourceKey::Classifier {
                        index,
                        top_k: top_k.unwrap_or(self.top_k),
                    };
                    if !classifiers.contains(&key) {
                        classifiers.push(key);
                    }
                }
                (_, source) => add_provider(source, &mut providers),
            }
        }
        providers.extend(classifiers);
        providers
    }

    /// Distributions unit `unit` reads, providers before classifiers.
    pub fn unit_keys(&self, unit: usize) -> Vec<SourceKey> {
        self.keys_of(&self.units[unit].terms)
    }

    /// Distributions the proposal of a supersede unit reads.
    pub fn proposal_keys(&self, unit: usize) -> Vec<SourceKey> {
        self.keys_of(&self.units[unit].proposal)
    }

    /// Relative cost of evaluating `keys` once.
    pub fn keys_cost(&self, keys: &[SourceKey]) -> f64 {
        keys.iter()
            .map(|&k| match k {
                SourceKey::Provider(i) => self.providers[i].cost_hint(),
                SourceKey::Classifier { index, .. } => self.classifiers[index].cost_hint(),
            })
            .sum()
    }
}
