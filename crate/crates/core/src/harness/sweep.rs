use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::stats::mean_stderr;
use super::{HarnessError, TemplateError};
use crate::dist::{mix_keys, SamplingPolicy, TokenId, Tokenizer};
use crate::engine::{generate, perplexity, GenerationConfig};
use crate::formula::{parse_expr, Formula, Normalization, Registry};
use crate::providers::{SharedClassifier, SharedProvider};
use crate::speculative::{
    speculative_generate, CalibrationConfig, SpeculativeFactors, TuningReport, DEFAULT_S_MAX,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Perplexity of the continuation under the `reference` provider.
    Perplexity,
    CallsPerToken,
    /// Mean score of the continuation under the configured scorer.
    AttributeScore,
    /// Fraction of speculated tokens that survived validation.
    Acceptance,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Perplexity => "perplexity",
            Self::CallsPerToken => "calls_per_token",
            Self::AttributeScore => "attribute_score",
            Self::Acceptance => "acceptance",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speculation {
    #[default]
    None,
    /// Factors tuned per cell on a calibration run over the sweep prompts.
    Tuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptSpec {
    Tokens(Vec<TokenId>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    WordLength,
    Classifier { name: String },
}

fn default_samples() -> usize {
    1
}

fn default_max_tokens() -> usize {
    32
}

fn default_calibration() -> usize {
    10
}

fn default_s_max() -> usize {
    DEFAULT_S_MAX
}

/// A formula template such as `"M + {lambda}*Ma"` evaluated on every
/// combination of slot values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub formula: String,
    pub slots: BTreeMap<String, Vec<f64>>,
    pub prompts: Vec<PromptSpec>,
    pub metrics: Vec<Metric>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_samples")]
    pub samples_per_prompt: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub policy: SamplingPolicy,
    #[serde(default)]
    pub mode: Normalization,
    #[serde(default)]
    pub speculation: Speculation,
    #[serde(default = "default_calibration")]
    pub calibration_samples: usize,
    #[serde(default = "default_s_max")]
    pub s_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerSpec>,
}

impl SweepSpec {
    pub fn new(formula: impl Into<String>, prompts: Vec<PromptSpec>) -> Self {
        Self {
            formula: formula.into(),
            slots: BTreeMap::new(),
            prompts,
            metrics: Vec::new(),
            max_tokens: default_max_tokens(),
            samples_per_prompt: 1,
            seed: 0,
            policy: SamplingPolicy::Full,
            mode: Normalization::Raw,
            speculation: Speculation::None,
            calibration_samples: default_calibration(),
            s_max: DEFAULT_S_MAX,
            reference: None,
            scorer: None,
        }
    }

    pub fn with_slot(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.slots.insert(name.into(), values);
        self
    }

    pub fn with_metrics(mut self, metrics: impl IntoIterator<Item = Metric>) -> Self {
        self.metrics.extend(metrics);
        self
    }
}

/// Scores generated text for the presence of an attribute.
pub trait AttributeScorer: Send + Sync {
    /// Recorded in report metadata.
    fn name(&self) -> String;

    /// Deterministic score in `[0, 1]`.
    fn score(&self, tokens: &[TokenId]) -> Result<f64, HarnessError>;
}

/// `1 − x/10`, clamped to `[0, 1]`, where `x` is the mean word length of
/// the decoded text. Text without words scores 1.
#[derive(Debug, Clone)]
pub struct WordLengthScorer {
    tokenizer: Tokenizer,
}

impl WordLengthScorer {
    pub fn new(tokenizer: Tokenizer) -> Self {
        Self { tokenizer }
    }

    pub fn score_text(text: &str) -> f64 {
        let lens: Vec<usize> = text.split_whitespace().map(|w| w.chars().count()).collect();
        if lens.is_empty() {
            return 1.0;
        }
        let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        (1.0 - mean / 10.0).clamp(0.0, 1.0)
    }
}

impl AttributeScorer for WordLengthScorer {
    fn name(&self) -> String {
        "word_length".into()
    }

    fn score(&self, tokens: &[TokenId]) -> Result<f64, HarnessError> {
        let text = self
            .tokenizer
            .decode(tokens)
            .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        Ok(Self::score_text(&text))
    }
}

/// A classifier's attribute probability for the generated tokens alone.
#[derive(Debug, Clone)]
pub struct ClassifierScorer {
    classifier: SharedClassifier,
}

impl ClassifierScorer {
    pub fn new(classifier: SharedClassifier) -> Self {
        Self { classifier }
    }
}

impl AttributeScorer for ClassifierScorer {
    fn name(&self) -> String {
        format!("classifier:{}", self.classifier.name())
    }

    fn score(&self, tokens: &[TokenId]) -> Result<f64, HarnessError> {
        Ok(self.classifier.score(tokens))
    }
}

/// Replaces every `{slot}` in `template` by the slot's value.
pub fn instantiate_template(
    template: &str,
    values: &BTreeMap<String, f64>,
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find(['{', '}']) {
        if rest[open..].starts_with('}') {
            return Err(TemplateError::Malformed(format!("unmatched `}}` in {template:?}")));
        }
        out.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| TemplateError::Malformed(format!("unclosed `{{` in {template:?}")))?;
        let name = rest[open + 1..open + close].trim();
        if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
            return Err(TemplateError::Malformed(format!("bad slot name {name:?}")));
        }
        let v = values.get(name).ok_or_else(|| TemplateError::Unresolved { slot: name.into() })?;
        out.push_str(&format!("{v}"));
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn template_slots(template: &str) -> Result<Vec<String>, TemplateError> {
    // Instantiating with every slot unresolved reports the first one.
    let mut seen = BTreeMap::new();
    loop {
        match instantiate_template(template, &seen) {
            Ok(_) => return Ok(seen.into_keys().collect()),
            Err(TemplateError::Unresolved { slot }) => {
                seen.insert(slot, 0.0);
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub formula: String,
    pub providers: Vec<String>,
    pub classifiers: Vec<String>,
    pub scorer: Option<String>,
    pub cells: usize,
    pub spec: SweepSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub cell: usize,
    pub slots: BTreeMap<String, f64>,
    /// Slot value over the sum of the formula's top-level coefficients;
    /// absent when that sum is zero.
    pub relative_strength: BTreeMap<String, f64>,
    pub formula: String,
    pub metric: Metric,
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

impl ReportRow {
    fn flat(&self, slot_names: &[String]) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("cell".into(), self.cell.into());
        m.insert("formula".into(), self.formula.clone().into());
        m.insert("metric".into(), self.metric.to_string().into());
        m.insert("value".into(), self.value.into());
        m.insert("stderr".into(), self.stderr.into());
        m.insert("n".into(), self.n.into());
        for s in slot_names {
            m.insert(format!("slot.{s}"), self.slots.get(s).copied().into());
            m.insert(
                format!("relative.{s}"),
                self.relative_strength.get(s).copied().into(),
            );
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
}

impl Report {
    fn slot_names(&self) -> Vec<String> {
        self.metadata.spec.slots.keys().cloned().collect()
    }

    /// JSON lines: the metadata object, then one flat object per row.
    pub fn to_jsonl(&self) -> String {
        let names = self.slot_names();
        let mut out = serde_json::to_string(&self.metadata).expect("metadata serializes");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Value::Object(r.flat(&names)).to_string());
            out.push('\n');
        }
        out
    }

    /// CSV with the same columns as the JSON-lines rows.
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let names = self.slot_names();
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| HarnessError::Io(e.to_string());
        let mut header: Option<Vec<String>> = None;
        for r in &self.rows {
            let m = r.flat(&names);
            if header.is_none() {
                let h: Vec<String> = m.keys().cloned().collect();
                w.write_record(&h).map_err(io)?;
                header = Some(h);
            }
            let cells: Vec<String> = m
                .values()
                .map(|v| match v {
                    Value::Null => String::new(),
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            w.write_record(&cells).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Io(e.to_string()))
    }

    /// Rows for one metric, in cell order.
    pub fn column(&self, metric: Metric) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.metric == metric).collect()
    }
}

fn validate(spec: &SweepSpec) -> Result<(), HarnessError> {
    let invalid = |m: &str| Err(HarnessError::InvalidSpec(m.into()));
    if spec.slots.is_empty() {
        return invalid("a sweep needs at least one slot");
    }
    if spec.prompts.is_empty() {
        return invalid("a sweep needs at least one prompt");
    }
    if spec.metrics.is_empty() {
        return invalid("a sweep needs at least one metric");
    }
    if spec.samples_per_prompt == 0 || spec.max_tokens == 0 {
        return invalid("samples_per_prompt and max_tokens must be at least 1");
    }
    let used = template_slots(&spec.formula)?;
    for s in &used {
        match spec.slots.get(s) {
            None => return Err(TemplateError::Unresolved { slot: s.clone() }.into()),
            Some(v) if v.is_empty() => {
                return invalid(&format!("slot `{s}` has no values"));
            }
            Some(v) if v.iter().any(|x| !x.is_finite()) => {
                return invalid(&format!("slot `{s}` has a non-finite value"));
            }
            Some(_) => {}
        }
    }
    if let Some(s) = spec.slots.keys().find(|s| !used.contains(s)) {
        return Err(TemplateError::Unused { slot: s.clone() }.into());
    }
    if spec.metrics.contains(&Metric::Perplexity) && spec.reference.is_none() {
        return invalid("the perplexity metric needs a reference provider");
    }
    if spec.metrics.contains(&Metric::AttributeScore) && spec.scorer.is_none() {
        return invalid("the attribute_score metric needs a scorer");
    }
    if spec.metrics.contains(&Metric::Acceptance) && spec.speculation == Speculation::None {
        return invalid("the acceptance metric needs speculation");
    }
    Ok(())
}

fn cells(slots: &BTreeMap<String, Vec<f64>>) -> Vec<BTreeMap<String, f64>> {
    let mut out = vec![BTreeMap::new()];
    for (name, values) in slots {
        out = out
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |&v| {
                    let mut c = cell.clone();
                    c.insert(name.clone(), v);
                    c
                })
            })
            .collect();
    }
    out
}

struct Sample {
    values: BTreeMap<Metric, f64>,
}

struct Cell<'a> {
    spec: &'a SweepSpec,
    prompts: &'a [Vec<TokenId>],
    reference: Option<&'a SharedProvider>,
    scorer: Option<&'a dyn AttributeScorer>,
}

impl Cell<'_> {
    fn run(
        &self,
        index: usize,
        slots: &BTreeMap<String, f64>,
        registry: &Registry,
    ) -> Result<Vec<ReportRow>, HarnessError> {
        let spec = self.spec;
        let text = instantiate_template(&spec.formula, slots)?;
        let expr = parse_expr(&text)?;
        let f = Formula::compile(&expr, registry)?.with_mode(spec.mode);
        let total: f64 = expr.terms.iter().map(|t| t.coefficient).sum();
        let relative_strength = if total == 0.0 {
            BTreeMap::new()
        } else {
            slots.iter().map(|(k, v)| (k.clone(), v / total)).collect()
        };
        let seed = mix_keys(&[spec.seed, index as u64]);
        let factors = match spec.speculation {
            Speculation::None => None,
            Speculation::Tuned => {
                let cal = CalibrationConfig {
                    prompts: self.prompts.to_vec(),
                    samples: spec.calibration_samples,
                    max_tokens: spec.max_tokens,
                    seed,
                    policy: spec.policy.clone(),
                };
                Some(TuningReport::tune(&f, &cal, spec.s_max)?.1)
            }
        };
        let jobs: Vec<(usize, usize)> = (0..self.prompts.len())
            .flat_map(|p| (0..spec.samples_per_prompt).map(move |k| (p, k)))
            .collect();
        let samples: Vec<Sample> = jobs
            .par_iter()
            .map(|&(p, k)| self.sample(&f, factors.as_ref(), p, mix_keys(&[seed, p as u64, k as u64])))
            .collect::<Result<_, _>>()?;
        Ok(spec
            .metrics
            .iter()
            .map(|&metric| {
                let values: Vec<f64> = samples.iter().filter_map(|s| s.values.get(&metric).copied()).collect();
                let (value, stderr) = mean_stderr(&values);
                ReportRow {
                    cell: index,
                    slots: slots.clone(),
                    relative_strength: relative_strength.clone(),
                    formula: text.clone(),
                    metric,
                    value,
                    stderr,
                    n: values.len(),
                }
            })
            .collect())
    }

    fn sample(
        &self,
        f: &Formula,
        factors: Option<&SpeculativeFactors>,
        prompt: usize,
        seed: u64,
    ) -> Result<Sample, HarnessError> {
        let spec = self.spec;
        let prompt = &self.prompts[prompt];
        let cfg = GenerationConfig::new(spec.max_tokens)
            .with_seed(seed)
            .with_policy(spec.policy.clone());
        let mut values = BTreeMap::new();
        let result = match factors {
            None => generate(f, prompt, &cfg)?,
            Some(s) => {
                let run = speculative_generate(f, prompt, s, &cfg)?;
                let validated: u64 = run.units.iter().map(|u| u.validated).sum();
                let accepted: u64 = run.units.iter().map(|u| u.accepted).sum();
                if validated > 0 {
                    values.insert(Metric::Acceptance, accepted as f64 / validated as f64);
                }
                run.result
            }
        };
        for &metric in &spec.metrics {
            let v = match metric {
                Metric::CallsPerToken => result.calls_per_token(),
                Metric::Perplexity => {
                    let reference = self.reference.expect("checked by validate");
                    let text = [prompt.as_slice(), &result.tokens].concat();
                    perplexity(reference.as_ref(), &text, prompt.len())?
                }
                Metric::AttributeScore => {
                    self.scorer.expect("checked by validate").score(&result.tokens)?
                }
                Metric::Acceptance => continue,
            };
            values.insert(metric, v);
        }
        Ok(Sample { values })
    }
}

/// Runs every cell of `spec` against `registry`. Text prompts are encoded
/// with `tokenizer`, which also decodes text for the word-length scorer.
pub fn run_sweep(
    spec: &SweepSpec,
    registry: &Registry,
    tokenizer: &Tokenizer,
) -> Result<Report, HarnessError> {
    validate(spec)?;
    let prompts: Vec<Vec<TokenId>> = spec
        .prompts
        .iter()
        .map(|p| match p {
            PromptSpec::Tokens(t) => Ok(t.clone()),
            PromptSpec::Text(s) => tokenizer
                .encode(s)
                .map_err(|e| HarnessError::InvalidSpec(format!("prompt {s:?}: {e}"))),
        })
        .collect::<Result<_, _>>()?;
    let reference = spec
        .reference
        .as_ref()
        .map(|name| {
            registry.provider(name).ok_or_else(|| {
                HarnessError::InvalidSpec(format!("unknown reference provider `{name}`"))
            })
        })
        .transpose()?;
    let scorer: Option<Box<dyn AttributeScorer>> = match &spec.scorer {
        None => None,
        Some(ScorerSpec::WordLength) => Some(Box::new(WordLengthScorer::new(tokenizer.clone()))),
        Some(ScorerSpec::Classifier { name }) => {
            let c = registry.classifier(name).ok_or_else(|| {
                HarnessError::InvalidSpec(format!("unknown classifier `{name}`"))
            })?;
            Some(Box::new(ClassifierScorer::new(c.clone())))
        }
    };
    let cell = Cell {
        spec,
        prompts: &prompts,
        reference,
        scorer: scorer.as_deref(),
    };
    let grid = cells(&spec.slots);
    let rows: Vec<Vec<ReportRow>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, slots)| cell.run(i, slots, registry))
        .collect::<Result<_, _>>()?;
    Ok(Report {
        metadata: ReportMetadata {
            seed: spec.seed,
            formula: spec.formula.clone(),
            providers: registry.providers().map(|p| p.name().to_string()).collect(),
            classifiers: registry.classifiers().map(|c| c.name().to_string()).collect(),
            scorer: scorer.map(|s| s.name()),
            cells: grid.len(),
            spec: spec.clone(),
        },
        rows: rows.into_iter().flatten().collect(),
    })
}
