//! Per-example circuit checks against the fixed positional layout.
//!
//! A rule owns four prompt positions: head, `>`, tail and the `,` or `|`
//! closing it. Completion: at each output `>` the strongest last-layer link
//! must come from the rule the slot applies, with query and key both
//! decoding to that rule's head and the value to its tail. Chaining: at each
//! output `,` before a real slot, the strongest link must come from the rule
//! whose head is the next literal, and query, key and value must all decode
//! to that literal.
//!
//! "Decodes to a literal" means the literal ranks highest among the letters
//! of the full decoding: query and key vectors also carry the structural
//! token of their position (`>`, `,`, `_`), which often outranks the
//! literal. `strict` records the plain top-1 reading alongside. Start: in some layer, the strongest link into the position before
//! the output comes from the query head and carries it. Final decision: the
//! strongest last-layer link into `-` reads a chain tail (earlier tails are
//! read one step later, on the `,` that holds their copy) and the emitted
//! decision is right. Negatives have no tail to find, so only the decision
//! counts; the query decoding is reported but not required.

use serde::{Deserialize, Serialize};

use super::{decode_qkv, trace, AttentionLink, PinvCache, QkvDecoding, SThresholds, DEFAULT_TOP_K};
use crate::error::{Error, Result};
use crate::model::{generate, ActivationTrace, ModelParams};
use crate::taskgen::{Dataset, Example};
use crate::vocab::{self, Layout, Supervision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportThresholds {
    /// Links shown per target position.
    pub link: f32,
    pub s: SThresholds,
    pub top_k: usize,
}

impl Default for ReportThresholds {
    fn default() -> Self {
        ReportThresholds {
            link: 0.4,
            s: SThresholds::default(),
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkClass {
    PositionalCopy,
    RuleCompletion,
    RuleChaining,
    Start,
    FinalDecision,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedLink {
    pub link: AttentionLink,
    pub class: LinkClass,
}

/// Links into one output-producing position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub dst: usize,
    /// Token at `dst`.
    pub token: char,
    /// Token the model emits from `dst`.
    pub emits: char,
    pub links: Vec<ClassifiedLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub class: LinkClass,
    pub slot: Option<usize>,
    pub dst: usize,
    /// Literal the mechanism should retrieve.
    pub expected: char,
    /// Strongest last-layer link into `dst`, decoded.
    pub link: AttentionLink,
    pub source_ok: bool,
    pub query_ok: bool,
    pub key_ok: bool,
    pub value_ok: bool,
    pub passed: bool,
    /// Pass under plain top-1 decodings.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitReport {
    pub prompt: String,
    pub generated: String,
    pub label: bool,
    pub chain_len: usize,
    pub targets: Vec<TargetReport>,
    pub completion: Vec<CheckResult>,
    pub chaining: Vec<CheckResult>,
    pub start: CheckResult,
    pub final_decision: CheckResult,
}

impl CircuitReport {
    pub fn completion_passed(&self) -> usize {
        self.completion.iter().filter(|c| c.passed).count()
    }

    pub fn chaining_passed(&self) -> usize {
        self.chaining.iter().filter(|c| c.passed).count()
    }
}

fn top1(tokens: &[super::DecodedToken]) -> Option<char> {
    tokens.first().map(|d| d.token)
}

fn top_literal(tokens: &[super::DecodedToken]) -> Option<char> {
    tokens.iter().map(|d| d.token).find(char::is_ascii_uppercase)
}

/// Strongest link of `layer` (1-based) into `dst`, over all heads.
fn strongest_link(trace: &ActivationTrace, layer: usize, dst: usize) -> AttentionLink {
    let lt = &trace.layers[layer - 1];
    let mut best = (0usize, 0usize, f32::NEG_INFINITY);
    for (head, p) in lt.patterns.iter().enumerate() {
        for (src, &w) in p.row(dst).iter().enumerate().take(dst + 1) {
            if w > best.2 {
                best = (head, src, w);
            }
        }
    }
    AttentionLink {
        layer,
        head: best.0,
        src: best.1,
        dst,
        strength: best.2,
        decoded: None,
    }
}

struct Ctx<'a> {
    params: &'a ModelParams<f32>,
    example: &'a Example,
    layout: Layout,
    trace: ActivationTrace,
    thresholds: ReportThresholds,
}

impl Ctx<'_> {
    fn decoded_link(&self, dst: usize, cache: &mut PinvCache) -> Result<(AttentionLink, QkvDecoding)> {
        self.decoded_link_in(self.trace.layers.len(), dst, cache)
    }

    fn decoded_link_in(&self, layer: usize, dst: usize, cache: &mut PinvCache) -> Result<(AttentionLink, QkvDecoding)> {
        let mut link = strongest_link(&self.trace, layer, dst);
        let vocab_size = self.params.config.vocab_size;
        let d = decode_qkv(self.params, &self.trace, &link, &self.thresholds.s, vocab_size, cache)?;
        let k = self.thresholds.top_k;
        let cut = |v: &Vec<super::DecodedToken>| v.iter().take(k).cloned().collect();
        link.decoded = Some(QkvDecoding {
            q: cut(&d.q),
            k: cut(&d.k),
            v: cut(&d.v),
        });
        Ok((link, d))
    }

    fn token_at(&self, pos: usize) -> u8 {
        self.trace.tokens[pos]
    }

    /// Prompt positions owned by rule `j`.
    fn rule_positions(&self, j: usize) -> std::ops::RangeInclusive<usize> {
        self.layout.rule_head(j)..=self.layout.rule_tail(j) + 1
    }

    /// Indices of the rules applied by the reference chain, in order.
    fn chain_rules(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.example.q0;
        while out.len() < self.layout.m && cur != self.example.q1 {
            match self.example.rules.iter().position(|r| r.head == cur) {
                Some(j) => {
                    out.push(j);
                    cur = self.example.rules[j].tail;
                }
                None => break,
            }
        }
        out
    }

    fn completion(&self, cache: &mut PinvCache) -> Result<Vec<CheckResult>> {
        let chain = self.chain_rules();
        let mut out = Vec::with_capacity(chain.len());
        for (slot, &j) in chain.iter().enumerate() {
            let rule = self.example.rules[j];
            let dst = self.layout.slot_implies(slot);
            let (link, d) = self.decoded_link(dst, cache)?;
            let head = rule.head.as_char();
            let source_ok = self.rule_positions(j).contains(&link.src);
            let tail = rule.tail.as_char();
            let query_ok = top_literal(&d.q) == Some(head);
            let key_ok = top_literal(&d.k) == Some(head);
            let value_ok = top_literal(&d.v) == Some(tail);
            let strict = source_ok
                && top1(&d.q) == Some(head)
                && top1(&d.k) == Some(head)
                && top1(&d.v) == Some(tail);
            out.push(CheckResult {
                class: LinkClass::RuleCompletion,
                slot: Some(slot),
                dst,
                expected: rule.tail.as_char(),
                link,
                source_ok,
                query_ok,
                key_ok,
                value_ok,
                passed: source_ok && query_ok && key_ok && value_ok,
                strict,
            });
        }
        Ok(out)
    }

    fn chaining(&self, cache: &mut PinvCache) -> Result<Vec<CheckResult>> {
        let chain = self.chain_rules();
        let mut out = Vec::new();
        for slot in 0..chain.len().saturating_sub(1) {
            let next = chain[slot + 1];
            let dst = self.layout.slot_comma(slot);
            let (link, d) = self.decoded_link(dst, cache)?;
            let lit = self.example.rules[next].head.as_char();
            let source_ok = self.rule_positions(next).contains(&link.src);
            let query_ok = top_literal(&d.q) == Some(lit);
            let key_ok = top_literal(&d.k) == Some(lit);
            let value_ok = top_literal(&d.v) == Some(lit);
            let strict = source_ok && [&d.q, &d.k, &d.v].iter().all(|v| top1(v) == Some(lit));
            out.push(CheckResult {
                class: LinkClass::RuleChaining,
                slot: Some(slot + 1),
                dst,
                expected: lit,
                link,
                source_ok,
                query_ok,
                key_ok,
                value_ok,
                passed: source_ok && query_ok && key_ok && value_ok,
                strict,
            });
        }
        Ok(out)
    }

    fn start(&self, cache: &mut PinvCache) -> Result<CheckResult> {
        let dst = self.layout.prompt_len() - 1;
        let layers = self.trace.layers.len();
        let from_head = (1..=layers).find(|&l| strongest_link(&self.trace, l, dst).src == self.layout.query_head());
        let (link, d) = self.decoded_link_in(from_head.unwrap_or(layers), dst, cache)?;
        let q0 = self.example.q0.as_char();
        let source_ok = from_head.is_some();
        let strict = source_ok && top1(&d.v) == Some(q0);
        let value_ok = top_literal(&d.v) == Some(q0);
        Ok(CheckResult {
            class: LinkClass::Start,
            slot: Some(0),
            dst,
            expected: q0,
            link,
            source_ok,
            query_ok: true,
            key_ok: true,
            value_ok,
            passed: source_ok && value_ok,
            strict,
        })
    }

    fn final_decision(&self, generated: &[u8], cache: &mut PinvCache) -> Result<CheckResult> {
        let dst = self.layout.dash();
        let (link, d) = self.decoded_link(dst, cache)?;
        let q1 = self.example.q1;
        let m = self.layout.m;
        // where slot i's tail is read: its own position for the last slot,
        // the following `,` for the others
        let read_at = |i: usize| if i + 1 == m { self.layout.slot_tail(i) } else { self.layout.slot_comma(i) };
        // the slot whose tail reached the query tail
        let chain = self.chain_rules().len();
        let source_ok = !self.example.label || (chain > 0 && link.src == read_at(chain - 1));
        let query_ok = top_literal(&d.q) == Some(q1.as_char());
        let decision = if self.example.label { vocab::TRUE } else { vocab::FALSE };
        let value_ok = generated.last() == Some(&decision);
        Ok(CheckResult {
            class: LinkClass::FinalDecision,
            slot: None,
            dst,
            expected: q1.as_char(),
            link,
            source_ok,
            query_ok,
            key_ok: true,
            value_ok,
            passed: source_ok && value_ok,
            strict: source_ok && value_ok && top1(&d.q) == Some(q1.as_char()),
        })
    }

    fn classify(&self, link: &AttentionLink) -> LinkClass {
        if link.layer < self.trace.layers.len() {
            return LinkClass::PositionalCopy;
        }
        let l = &self.layout;
        if link.dst == l.prompt_len() - 1 {
            LinkClass::Start
        } else if link.dst == l.dash() {
            LinkClass::FinalDecision
        } else if l.output_implies_positions().contains(&link.dst) {
            LinkClass::RuleCompletion
        } else if l.output_comma_positions().contains(&link.dst) {
            LinkClass::RuleChaining
        } else {
            LinkClass::Other
        }
    }
}

fn context<'a>(
    params: &'a ModelParams<f32>,
    example: &'a Example,
    thresholds: ReportThresholds,
) -> Result<(Ctx<'a>, Vec<u8>)> {
    if example.supervision() != Supervision::Cot {
        return Err(Error::Input("circuit reports need chain-of-thought examples".into()));
    }
    let layout = Layout::cot(example.m());
    let prompt = example.prompt_tokens();
    let full = generate(params, &prompt, layout.output_len())?;
    let generated = full[prompt.len()..].to_vec();
    let trace = trace(params, &full)?;
    Ok((
        Ctx {
            params,
            example,
            layout,
            trace,
            thresholds,
        },
        generated,
    ))
}

/// Generates the example's output greedily, traces it, and scores every
/// stage of the expected circuit.
pub fn circuit_report(
    params: &ModelParams<f32>,
    example: &Example,
    thresholds: &ReportThresholds,
    cache: &mut PinvCache,
) -> Result<CircuitReport> {
    let (ctx, generated) = context(params, example, *thresholds)?;
    let l = ctx.layout;
    let mut targets = Vec::new();
    for dst in l.prompt_len() - 1..l.seq_len() - 1 {
        let mut links = Vec::new();
        for layer in 1..=ctx.trace.layers.len() {
            for mut link in super::attention_links(&ctx.trace, layer, thresholds.link, Some(&[dst]))? {
                link.decoded = Some(decode_qkv(params, &ctx.trace, &link, &thresholds.s, thresholds.top_k, cache)?);
                let class = ctx.classify(&link);
                links.push(ClassifiedLink { link, class });
            }
        }
        targets.push(TargetReport {
            dst,
            token: vocab::token_char(ctx.token_at(dst)).unwrap_or('?'),
            emits: vocab::token_char(ctx.token_at(dst + 1)).unwrap_or('?'),
            links,
        });
    }
    let completion = ctx.completion(cache)?;
    let chaining = ctx.chaining(cache)?;
    Ok(CircuitReport {
        prompt: example.prompt(),
        generated: vocab::decode(&generated)?,
        label: example.label,
        chain_len: ctx.chain_rules().len(),
        targets,
        start: ctx.start(cache)?,
        final_decision: ctx.final_decision(&generated, cache)?,
        completion,
        chaining,
    })
}

/// Pass counts of each check over a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CircuitStats {
    pub examples: usize,
    pub completion_pairs: usize,
    pub completion_passed: usize,
    pub completion_source_ok: usize,
    pub completion_query_ok: usize,
    pub completion_key_ok: usize,
    pub completion_value_ok: usize,
    pub chaining_pairs: usize,
    pub chaining_passed: usize,
    pub chaining_source_ok: usize,
    pub chaining_query_ok: usize,
    pub chaining_key_ok: usize,
    pub chaining_value_ok: usize,
    pub completion_strict: usize,
    pub chaining_strict: usize,
    pub start_passed: usize,
    pub final_passed: usize,
}

fn rate(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

impl CircuitStats {
    pub fn completion_rate(&self) -> f64 {
        rate(self.completion_passed, self.completion_pairs)
    }

    pub fn chaining_rate(&self) -> f64 {
        rate(self.chaining_passed, self.chaining_pairs)
    }

    /// Completion pass rate under plain top-1 decodings.
    pub fn completion_strict_rate(&self) -> f64 {
        rate(self.completion_strict, self.completion_pairs)
    }

    pub fn chaining_strict_rate(&self) -> f64 {
        rate(self.chaining_strict, self.chaining_pairs)
    }

    pub fn start_rate(&self) -> f64 {
        rate(self.start_passed, self.examples)
    }

    pub fn final_rate(&self) -> f64 {
        rate(self.final_passed, self.examples)
    }
}

/// Runs the completion, chaining, start and final-decision checks on every example.
pub fn dataset_circuit_stats(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    thresholds: &ReportThresholds,
    cache: &mut PinvCache,
) -> Result<CircuitStats> {
    let mut s = CircuitStats::default();
    for example in &dataset.examples {
        let (ctx, generated) = context(params, example, *thresholds)?;
        s.examples += 1;
        for c in ctx.completion(cache)? {
            s.completion_pairs += 1;
            s.completion_passed += c.passed as usize;
            s.completion_source_ok += c.source_ok as usize;
            s.completion_query_ok += c.query_ok as usize;
            s.completion_key_ok += c.key_ok as usize;
            s.completion_value_ok += c.value_ok as usize;
            s.completion_strict += c.strict as usize;
        }
        for c in ctx.chaining(cache)? {
            s.chaining_pairs += 1;
            s.chaining_passed += c.passed as usize;
            s.chaining_source_ok += c.source_ok as usize;
            s.chaining_query_ok += c.query_ok as usize;
            s.chaining_key_ok += c.key_ok as usize;
            s.chaining_value_ok += c.value_ok as usize;
            s.chaining_strict += c.strict as usize;
        }
        s.start_passed += ctx.start(cache)?.passed as usize;
        s.final_passed += ctx.final_decision(&generated, cache)?.passed as usize;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taskgen::{parse_prompt, Literal};

    fn guiding() -> Example {
        let (rules, q0, q1) = parse_prompt("C>D,A>B,B>C,E>F,D>E|A>F").unwrap();
        Example {
            rules,
            q0,
            q1,
            label: true,
            break_point: 5,
            target: "A>B,B>C,C>D,D>E,E>F-1".into(),
            origin: None,
        }
    }

    #[test]
    fn untrained_model_still_gets_a_report() {
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 1).unwrap();
        let mut cache = PinvCache::new();
        let r = circuit_report(&p, &guiding(), &ReportThresholds::default(), &mut cache).unwrap();
        assert_eq!(r.chain_len, 5);
        assert_eq!(r.completion.len(), 5);
        assert_eq!(r.chaining.len(), 4);
        assert_eq!(r.targets.len(), 21);
        assert_eq!(r.targets[0].dst, 23);
        assert_eq!(r.completion[0].dst, 25);
        assert_eq!(r.chaining[0].dst, 27);
        assert_eq!(r.final_decision.dst, 43);
        assert!(r.completion_passed() + r.chaining_passed() <= 1);
        for t in &r.targets {
            for l in &t.links {
                assert_eq!(l.link.dst, t.dst);
                assert!(l.link.strength >= 0.4 && l.link.decoded.is_some());
            }
        }
    }

    #[test]
    fn chain_follows_the_rules() {
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 1).unwrap();
        let e = guiding();
        let (ctx, generated) = context(&p, &e, ReportThresholds::default()).unwrap();
        assert_eq!(generated.len(), 21);
        // A>B is rule 1, B>C rule 2, C>D rule 0, D>E rule 4, E>F rule 3
        assert_eq!(ctx.chain_rules(), vec![1, 2, 0, 4, 3]);
        assert_eq!(ctx.token_at(1), Literal::from_char('C').unwrap().token());
    }
}
