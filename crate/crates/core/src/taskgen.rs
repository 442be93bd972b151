//! Synthetic propositional inference task.
//!
//! An instance is `m` single-literal implications plus a query `q0>q1`; the
//! query holds iff a chain of rules leads from `q0` to `q1`. Negatives are
//! built by breaking an `m`-rule chain with one extra literal; positives are
//! derived from negatives by re-pointing the query tail.
//!
//! All sampling goes through one [`ChaCha8Rng`] per generator, in this order
//! for each candidate: `m + 2` literals (partial Fisher-Yates over `0..n`),
//! break point `b` in `1..=m`, replacement coin, then a Fisher-Yates shuffle
//! of the rule list.

use std::collections::HashSet;
use std::fmt;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{self, Supervision, NUM_LETTERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Literal(pub u8);

impl Literal {
    pub fn from_char(ch: char) -> Option<Literal> {
        ch.is_ascii_uppercase()
            .then(|| ch as u8 - b'A')
            .filter(|&id| (id as usize) < NUM_LETTERS)
            .map(Literal)
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }

    pub fn token(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// A Horn clause `head > tail`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rule {
    pub head: Literal,
    pub tail: Literal,
}

impl Rule {
    pub fn new(head: Literal, tail: Literal) -> Rule {
        Rule { head, tail }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}>{}", self.head, self.tail)
    }
}

/// Which end of the broken rule received the extra literal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Head,
    Tail,
}

/// How a generated example was built. Absent for examples read back from text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origin {
    /// The `m + 2` sampled literals `l1..l{m+2}`.
    pub literals: Vec<Literal>,
    /// 1-based index of the broken rule in the unshuffled chain.
    pub break_point: usize,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub rules: Vec<Rule>,
    pub q0: Literal,
    pub q1: Literal,
    pub label: bool,
    /// Break point `b` for generated negatives, chain length otherwise.
    pub break_point: usize,
    /// Supervision target (CoT string or single decision character).
    pub target: String,
    pub origin: Option<Origin>,
}

impl Example {
    /// Rules and query without the leading `@`, e.g. `C>D,A>B,B>C,E>F,D>E|A>F`.
    pub fn prompt(&self) -> String {
        let rules: Vec<String> = self.rules.iter().map(Rule::to_string).collect();
        format!("{}|{}>{}", rules.join(","), self.q0, self.q1)
    }

    /// Prompt token ids including the leading `@`.
    pub fn prompt_tokens(&self) -> Vec<u8> {
        let mut ids = vec![vocab::BOS];
        ids.extend(vocab::encode(&self.prompt()).expect("prompt uses vocabulary characters"));
        ids
    }

    /// Full sequence: `@`, prompt and target.
    pub fn tokens(&self) -> Vec<u8> {
        let mut ids = self.prompt_tokens();
        ids.extend(vocab::encode(&self.target).expect("target uses vocabulary characters"));
        ids
    }

    pub fn m(&self) -> usize {
        self.rules.len()
    }

    pub fn supervision(&self) -> Supervision {
        if self.target.len() == 1 {
            Supervision::Binary
        } else {
            Supervision::Cot
        }
    }

    /// Parses a `PROMPT\tTARGET` line.
    pub fn parse_line(line: &str) -> Result<Example> {
        let (prompt, target) = line
            .split_once('\t')
            .ok_or_else(|| Error::Input(format!("missing tab separator in {line:?}")))?;
        let (rules, q0, q1) = parse_prompt(prompt)?;
        vocab::encode(target)?;
        let label = match target.chars().last() {
            Some('1') => true,
            Some('0') => false,
            _ => return Err(Error::Input(format!("target {target:?} does not end in a decision"))),
        };
        let chain = build_cot(&rules, q0, q1, rules.len()).chain_len;
        Ok(Example {
            rules,
            q0,
            q1,
            label,
            break_point: chain,
            target: target.to_string(),
            origin: None,
        })
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}", self.prompt(), self.target)
    }
}

/// Parses `A>B,...|X>Y` (an optional leading `@` is accepted).
pub fn parse_prompt(prompt: &str) -> Result<(Vec<Rule>, Literal, Literal)> {
    let body = prompt.strip_prefix('@').unwrap_or(prompt);
    let offset = prompt.len() - body.len();
    vocab::encode(body).map_err(|e| match e {
        Error::Encoding { ch, position } => Error::Encoding {
            ch,
            position: position + offset,
        },
        other => other,
    })?;
    let (rules_part, query) = body
        .split_once('|')
        .ok_or_else(|| Error::Input(format!("prompt {prompt:?} has no '|'")))?;
    let parse_rule = |s: &str| -> Result<Rule> {
        let mut chars = s.chars();
        let (h, op, t, rest) = (chars.next(), chars.next(), chars.next(), chars.next());
        match (h.and_then(Literal::from_char), op, t.and_then(Literal::from_char), rest) {
            (Some(head), Some('>'), Some(tail), None) => Ok(Rule::new(head, tail)),
            _ => Err(Error::Input(format!("malformed implication {s:?} in {prompt:?}"))),
        }
    };
    let rules = rules_part.split(',').map(parse_rule).collect::<Result<Vec<_>>>()?;
    let q = parse_rule(query)?;
    Ok((rules, q.head, q.tail))
}

/// Result of forward chaining from the query head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cot {
    pub text: String,
    pub label: bool,
    pub chain_len: usize,
}

/// Greedy forward chaining from `q0`, padded to `m` slots with `_>_`.
///
/// Produces `s0,s1,...,s{m-1}-d`, `4m + 1` characters.
pub fn build_cot(rules: &[Rule], q0: Literal, q1: Literal, m: usize) -> Cot {
    let mut slots = Vec::with_capacity(m);
    let mut current = q0;
    while slots.len() < m && current != q1 {
        match rules.iter().find(|r| r.head == current) {
            Some(rule) => {
                slots.push(rule.to_string());
                current = rule.tail;
            }
            None => break,
        }
    }
    let chain_len = slots.len();
    slots.resize(m, "_>_".to_string());
    let label = current == q1;
    Cot {
        text: format!("{}-{}", slots.join(","), if label { '1' } else { '0' }),
        label,
        chain_len,
    }
}

/// Outcome of the exhaustive path search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleVerdict {
    pub reachable: bool,
    /// One witness path (empty when unreachable).
    pub path: Vec<Rule>,
    /// Exactly one simple path exists.
    pub unique: bool,
}

/// Enumerates every simple path from `q0` to `q1` in the rule digraph.
pub fn oracle_label(rules: &[Rule], q0: Literal, q1: Literal) -> OracleVerdict {
    fn walk(
        rules: &[Rule],
        at: Literal,
        goal: Literal,
        visited: &mut Vec<Literal>,
        path: &mut Vec<Rule>,
        found: &mut Vec<Vec<Rule>>,
    ) {
        if at == goal && !path.is_empty() {
            found.push(path.clone());
            return;
        }
        for rule in rules.iter().filter(|r| r.head == at) {
            if visited.contains(&rule.tail) {
                continue;
            }
            visited.push(rule.tail);
            path.push(*rule);
            walk(rules, rule.tail, goal, visited, path, found);
            path.pop();
            visited.pop();
        }
    }

    let mut found = Vec::new();
    if q0 != q1 {
        walk(rules, q0, q1, &mut vec![q0], &mut Vec::new(), &mut found);
    }
    let unique = found.len() == 1;
    OracleVerdict {
        reachable: !found.is_empty(),
        path: found.into_iter().next().unwrap_or_default(),
        unique,
    }
}

/// Number of distinct negatives: `P(n, m+2) * m * 2 * m!`.
pub fn count_space(n: usize, m: usize) -> Result<BigUint> {
    validate(n, m)?;
    let perms: BigUint = ((n - m - 1)..=n).map(BigUint::from).product();
    let shuffles: BigUint = (1..=m).map(BigUint::from).product();
    Ok(perms * BigUint::from(m) * BigUint::from(2u32) * shuffles)
}

fn validate(n: usize, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Config("m must be at least 1".into()));
    }
    if n > NUM_LETTERS {
        return Err(Error::Config(format!("n = {n} exceeds the {NUM_LETTERS} available literals")));
    }
    if n < m + 2 {
        return Err(Error::Config(format!("n = {n} is smaller than m + 2 = {}", m + 2)));
    }
    Ok(())
}

/// Builds a negative from explicit choices: literals `l1..l{m+2}`, the
/// 1-based break point, the replaced side, and the order in which the
/// unshuffled chain rules appear (`order[i]` is the chain index placed at `i`).
pub fn negative_from_parts(literals: &[Literal], break_point: usize, side: Side, order: &[usize]) -> Result<Example> {
    let m = order.len();
    if literals.len() != m + 2 {
        return Err(Error::Config(format!("expected {} literals, got {}", m + 2, literals.len())));
    }
    if !(1..=m).contains(&break_point) {
        return Err(Error::Config(format!("break point {break_point} outside 1..={m}")));
    }
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..m).collect::<Vec<_>>() {
        return Err(Error::Config("rule order is not a permutation".into()));
    }
    let extra = literals[m + 1];
    let mut chain: Vec<Rule> = (0..m).map(|i| Rule::new(literals[i], literals[i + 1])).collect();
    match side {
        Side::Head => chain[break_point - 1].head = extra,
        Side::Tail => chain[break_point - 1].tail = extra,
    }
    let rules: Vec<Rule> = order.iter().map(|&i| chain[i]).collect();
    let (q0, q1) = (literals[0], literals[m]);
    let cot = build_cot(&rules, q0, q1, m);
    Ok(Example {
        rules,
        q0,
        q1,
        label: false,
        break_point,
        target: cot.text,
        origin: Some(Origin {
            literals: literals.to_vec(),
            break_point,
            side,
        }),
    })
}

/// Whether a negative can be turned into a positive with at least one rule in its chain.
pub fn is_convertible(neg: &Example) -> bool {
    matches!(&neg.origin, Some(o) if !neg.label && o.break_point >= 2)
}

/// Re-points the query tail so the broken chain becomes a valid proof.
///
/// Tail-replaced negatives get `q1 = l{m+2}` (chain length `b`); head-replaced
/// negatives get `q1 = l_b` (chain length `b - 1`).
pub fn to_positive(neg: &Example) -> Result<Example> {
    let origin = neg
        .origin
        .as_ref()
        .ok_or_else(|| Error::Rejected("example carries no generation record".into()))?;
    if neg.label {
        return Err(Error::Rejected("example is already positive".into()));
    }
    let b = origin.break_point;
    if b < 2 {
        return Err(Error::Rejected(format!("break point {b} leaves no valid implication")));
    }
    let m = neg.rules.len();
    let (q1, chain_len) = match origin.side {
        Side::Tail => (origin.literals[m + 1], b),
        Side::Head => (origin.literals[b - 1], b - 1),
    };
    let cot = build_cot(&neg.rules, neg.q0, q1, m);
    debug_assert!(cot.label && cot.chain_len == chain_len);
    Ok(Example {
        rules: neg.rules.clone(),
        q0: neg.q0,
        q1,
        label: true,
        break_point: chain_len,
        target: cot.text,
        origin: neg.origin.clone(),
    })
}

/// Stateful example generator; owns its PRNG.
#[derive(Debug, Clone)]
pub struct Generator {
    n: usize,
    m: usize,
    rng: ChaCha8Rng,
}

impl Generator {
    pub fn new(n: usize, m: usize, seed: u64) -> Result<Generator> {
        validate(n, m)?;
        Ok(Generator {
            n,
            m,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Draws a negative example.
    pub fn negative(&mut self) -> Example {
        let (n, m) = (self.n, self.m);
        let mut pool: Vec<u8> = (0..n as u8).collect();
        for i in 0..m + 2 {
            let j = self.rng.random_range(i..n);
            pool.swap(i, j);
        }
        let literals: Vec<Literal> = pool[..m + 2].iter().map(|&id| Literal(id)).collect();
        let b = self.rng.random_range(1..=m);
        let side = if self.rng.random_bool(0.5) { Side::Head } else { Side::Tail };
        let order = shuffled(&mut self.rng, m);
        negative_from_parts(&literals, b, side, &order).expect("sampled parts are valid")
    }

    /// Draws negatives until one is convertible, then converts it.
    pub fn positive(&mut self) -> Result<Example> {
        if self.m < 2 {
            return Err(Error::Generation(format!("no convertible negatives exist for m = {}", self.m)));
        }
        loop {
            let neg = self.negative();
            if is_convertible(&neg) {
                return to_positive(&neg);
            }
        }
    }
}

fn shuffled(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Draws a negative with a fresh generator (convenience for one-off use).
pub fn gen_negative(n: usize, m: usize, rng_seed: u64) -> Result<Example> {
    Ok(Generator::new(n, m, rng_seed)?.negative())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    All,
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub supervision: Supervision,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.label).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn layout(&self) -> vocab::Layout {
        vocab::Layout::new(self.m, self.supervision)
    }

    /// Examples with the given label.
    pub fn subset(&self, label: bool) -> Dataset {
        Dataset {
            examples: self.examples.iter().filter(|e| e.label == label).cloned().collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            examples: Vec::new(),
            seed: self.seed,
            n: self.n,
            m: self.m,
            supervision: self.supervision,
            split: self.split,
        }
    }
}

/// Retry budget per requested example before giving up on deduplication.
const RETRIES_PER_EXAMPLE: usize = 100;

/// Generates a balanced, deduplicated dataset. Even indices are negatives,
/// odd indices positives.
pub fn gen_dataset(count: usize, n: usize, m: usize, seed: u64, supervision: Supervision) -> Result<Dataset> {
    generate(count, n, m, seed, supervision, RETRIES_PER_EXAMPLE)
}

fn generate(
    count: usize,
    n: usize,
    m: usize,
    seed: u64,
    supervision: Supervision,
    retries_per_example: usize,
) -> Result<Dataset> {
    let space = count_space(n, m)?;
    if BigUint::from(count) * BigUint::from(2u32) > space {
        return Err(Error::Config(format!(
            "{count} examples exceed half of the {space} possible generations"
        )));
    }
    let mut generator = Generator::new(n, m, seed)?;
    let mut seen = HashSet::with_capacity(count);
    let mut examples = Vec::with_capacity(count);
    let budget = retries_per_example.saturating_mul(count.max(1));
    let mut attempts = 0usize;
    while examples.len() < count {
        if attempts >= budget {
            return Err(Error::Generation(format!(
                "only {} unique examples after {attempts} attempts",
                examples.len()
            )));
        }
        attempts += 1;
        let mut example = if examples.len() % 2 == 0 {
            generator.negative()
        } else {
            generator.positive()?
        };
        if seen.insert(example.prompt()) {
            if supervision == Supervision::Binary {
                example.target = if example.label { "1" } else { "0" }.to_string();
            }
            examples.push(example);
        }
    }
    Ok(Dataset {
        examples,
        seed,
        n,
        m,
        supervision,
        split: SplitTag::All,
    })
}

/// Random partition; the first `round(ratio * len)` shuffled examples train.
pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled(&mut rng, dataset.len());
    let cut = (ratio * dataset.len() as f64).round() as usize;
    let pick = |idx: &[usize], split| Dataset {
        examples: idx.iter().map(|&i| dataset.examples[i].clone()).collect(),
        split,
        ..dataset.clone_meta()
    };
    Ok((pick(&order[..cut], SplitTag::Train), pick(&order[cut..], SplitTag::Val)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lits(s: &str) -> Vec<Literal> {
        s.chars().map(|c| Literal::from_char(c).unwrap()).collect()
    }

    fn rules(s: &str) -> Vec<Rule> {
        parse_prompt(&format!("{s}|A>A")).unwrap().0
    }

    #[test]
    fn cot_of_worked_examples() {
        let l = lits("AEF");
        let pos = build_cot(&rules("K>F,C>D,B>C,A>B,D>E"), l[0], l[1], 5);
        assert_eq!(pos.text, "A>B,B>C,C>D,D>E,_>_-1");
        assert!(pos.label);
        let neg = build_cot(&rules("E>F,C>K,B>C,A>B,D>E"), l[0], l[2], 5);
        assert_eq!(neg.text, "A>B,B>C,C>K,_>_,_>_-0");
        assert!(!neg.label);
        let empty = build_cot(&rules("K>F,C>D,B>C,Q>B,D>E"), l[0], l[1], 5);
        assert_eq!(empty.text, "_>_,_>_,_>_,_>_,_>_-0");
    }

    #[test]
    fn negative_from_worked_parts() {
        // chain A..F with K injected as the tail of rule 3
        let neg = negative_from_parts(&lits("ABCDEFK"), 3, Side::Tail, &[4, 2, 1, 0, 3]).unwrap();
        assert_eq!(neg.prompt(), "E>F,C>K,B>C,A>B,D>E|A>F");
        assert_eq!(neg.target, "A>B,B>C,C>K,_>_,_>_-0");
        assert!(!neg.label);
    }

    #[test]
    fn positive_conversions() {
        let neg = negative_from_parts(&lits("ABCDEFG"), 4, Side::Tail, &[0, 1, 2, 3, 4]).unwrap();
        let pos = to_positive(&neg).unwrap();
        assert_eq!(pos.q1, Literal::from_char('G').unwrap());
        assert_eq!(pos.target, "A>B,B>C,C>D,D>G,_>_-1");
        assert_eq!(pos.break_point, 4);

        let guiding = negative_from_parts(&lits("ABCDEGF"), 5, Side::Tail, &[2, 0, 1, 4, 3]).unwrap();
        let pos = to_positive(&guiding).unwrap();
        assert_eq!(pos.prompt(), "C>D,A>B,B>C,E>F,D>E|A>F");
        assert_eq!(pos.target, "A>B,B>C,C>D,D>E,E>F-1");

        let head = negative_from_parts(&lits("ABCDEFG"), 2, Side::Head, &[0, 1, 2, 3, 4]).unwrap();
        let pos = to_positive(&head).unwrap();
        assert_eq!(pos.target, "A>B,_>_,_>_,_>_,_>_-1");
        assert_eq!(pos.break_point, 1);
    }

    #[test]
    fn conversion_rejections() {
        let b1 = negative_from_parts(&lits("ABCDEFG"), 1, Side::Tail, &[0, 1, 2, 3, 4]).unwrap();
        assert!(matches!(to_positive(&b1), Err(Error::Rejected(_))));
        let b1h = negative_from_parts(&lits("ABCDEFG"), 1, Side::Head, &[0, 1, 2, 3, 4]).unwrap();
        assert!(matches!(to_positive(&b1h), Err(Error::Rejected(_))));
        let parsed = Example::parse_line("E>F,C>K,B>C,A>B,D>E|A>F\tA>B,B>C,C>K,_>_,_>_-0").unwrap();
        assert!(matches!(to_positive(&parsed), Err(Error::Rejected(_))));
    }

    #[test]
    fn oracle_on_worked_examples() {
        let l = lits("AEF");
        let v = oracle_label(&rules("K>F,C>D,B>C,A>B,D>E"), l[0], l[1]);
        assert!(v.reachable && v.unique);
        assert_eq!(v.path.len(), 4);
        let v = oracle_label(&rules("E>F,C>K,B>C,A>B,D>E"), l[0], l[2]);
        assert!(!v.reachable && v.path.is_empty());
        let v = oracle_label(&rules("B>C,C>D"), l[0], l[1]);
        assert!(!v.reachable);
        let v = oracle_label(&rules("A>B,A>C,B>E,C>E"), l[0], l[1]);
        assert!(v.reachable && !v.unique);
    }

    #[test]
    fn space_counts() {
        assert_eq!(count_space(20, 5).unwrap(), BigUint::from(468_840_960_000u64));
        assert_eq!(count_space(7, 5).unwrap(), BigUint::from(6_048_000u64));
        // n = m + 2: P(7,7) = 5040, same as above since 7! = P(7,7)
        assert_eq!(count_space(3, 1).unwrap(), BigUint::from(6u32 * 2));
        assert!(matches!(count_space(6, 5), Err(Error::Config(_))));
        assert!(matches!(count_space(21, 5), Err(Error::Config(_))));
    }

    #[test]
    fn small_vocabulary_uses_all_literals() {
        let mut g = Generator::new(7, 5, 11).unwrap();
        for _ in 0..200 {
            let e = g.negative();
            let mut used: Vec<Literal> = e.rules.iter().flat_map(|r| [r.head, r.tail]).collect();
            used.extend([e.q0, e.q1]);
            used.sort();
            used.dedup();
            assert_eq!(used.len(), 7);
            assert_eq!(e.rules.len(), 5);
        }
    }

    #[test]
    fn dataset_balance_and_split() {
        let ds = gen_dataset(101, 20, 5, 3, Supervision::Cot).unwrap();
        assert_eq!((ds.negatives(), ds.positives()), (51, 50));
        let ten = gen_dataset(10, 20, 5, 3, Supervision::Cot).unwrap();
        let (a, b) = split(&ten, 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        assert!(split(&ten, 1.0, 1).is_err());
        assert!(split(&ten, 0.0, 1).is_err());
    }

    #[test]
    fn dedup_starvation_is_an_error() {
        // n = 4, m = 2 admits only 96 distinct positives; 48 draws in 96
        // attempts cannot avoid a collision
        match generate(96, 4, 2, 0, Supervision::Cot, 1) {
            Err(Error::Generation(_)) => {}
            other => panic!("expected starvation, got {other:?}"),
        }
        assert!(generate(96, 4, 2, 0, Supervision::Cot, RETRIES_PER_EXAMPLE).is_ok());
        assert!(matches!(gen_dataset(4, 3, 1, 0, Supervision::Cot), Err(Error::Generation(_))));
        assert!(matches!(gen_dataset(7, 3, 1, 0, Supervision::Cot), Err(Error::Config(_))));
    }

    #[test]
    fn binary_targets() {
        let ds = gen_dataset(20, 20, 5, 9, Supervision::Binary).unwrap();
        for e in &ds.examples {
            assert_eq!(e.target, if e.label { "1" } else { "0" });
            assert_eq!(e.tokens().len(), 25);
        }
    }

    #[test]
    fn line_round_trip() {
        let ds = gen_dataset(50, 20, 5, 4, Supervision::Cot).unwrap();
        for e in &ds.examples {
            let back = Example::parse_line(&e.to_line()).unwrap();
            assert_eq!(back.prompt(), e.prompt());
            assert_eq!(back.target, e.target);
            assert_eq!(back.label, e.label);
            if e.label {
                assert_eq!(back.break_point, e.break_point);
            }
        }
    }
}
