//! Synthetic two-view (query, answer) tasks.
//!
//! The pattern task maps a descriptor sentence onto a pattern string through
//! a fixed compositional grammar; its answers end in one of two functionally
//! equivalent suffixes whose frequencies are deliberately imbalanced. The
//! copy task is a sanity check whose answer repeats the query.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::transformer::TokenId;

/// Fixed vocabulary layout.
pub mod vocab {
    use super::TokenId;
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const MASK: TokenId = 3;
    pub const SEP: TokenId = 4;
    /// Ids below this are special; models must have at least this many.
    pub const RESERVED: usize = 4;
    pub const FIRST_CONTENT: TokenId = 5;
}

/// Token ids of the pattern grammar. Descriptor words and pattern symbols
/// occupy disjoint ranges.
pub mod pattern {
    use super::TokenId;

    // Descriptor side.
    pub const STARTS_WITH: TokenId = 5;
    pub const THEN: TokenId = 6;
    pub const CONTAINS: TokenId = 7;
    pub const NOT: TokenId = 8;
    /// Eight character classes.
    pub const CLASS_WORDS: TokenId = 9;
    /// Six quantifier words.
    pub const QUANT_WORDS: TokenId = 17;
    pub const TAIL_COMMON: TokenId = 23;
    pub const TAIL_RARE: TokenId = 24;

    // Pattern side.
    pub const CARET: TokenId = 30;
    pub const LPAREN: TokenId = 31;
    pub const RPAREN: TokenId = 32;
    pub const NEG_OPEN: TokenId = 33;
    pub const NEG_CLOSE: TokenId = 34;
    pub const CLASS_SYMBOLS: TokenId = 35;
    /// Quantifier symbols for the five non-trivial quantifiers
    /// (`{2}`, `{3}`, `+`, `*`, `?`); "once" emits nothing.
    pub const QUANT_SYMBOLS: TokenId = 43;
    /// The `.*` suffix token.
    pub const DOTSTAR: TokenId = 48;

    pub const N_CLASSES: u32 = 8;
    pub const N_QUANTS: u32 = 6;
    /// Highest id the grammar uses.
    pub const MAX_ID: TokenId = DOTSTAR;
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task request: {0}")]
    Invalid(String),
    #[error("sequence of {len} tokens overflows capacity {max}")]
    Overflow { len: usize, max: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SuffixClass {
    Star,
    StarStar,
    None,
}

impl fmt::Display for SuffixClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SuffixClass::Star => "STAR",
            SuffixClass::StarStar => "STARSTAR",
            SuffixClass::None => "NONE",
        })
    }
}

impl FromStr for SuffixClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "STAR" => Ok(SuffixClass::Star),
            "STARSTAR" => Ok(SuffixClass::StarStar),
            "NONE" => Ok(SuffixClass::None),
            other => Err(format!("unknown suffix class `{other}`")),
        }
    }
}

/// Positions inside the full sequence BOS ⊕ inst ⊕ query ⊕ SEP ⊕ answer ⊕ EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Marks {
    pub query_start: usize,
    pub query_end: usize,
    pub answer_start: usize,
    /// Position of the closing EOS.
    pub answer_end: usize,
}

impl Marks {
    pub fn validate(&self, len: usize) -> bool {
        self.query_start >= 1
            && self.query_start <= self.query_end
            && self.answer_start == self.query_end + 2
            && self.answer_start < self.answer_end
            && self.answer_end + 1 == len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamplePair {
    pub instruction: Vec<TokenId>,
    pub query: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub suffix: SuffixClass,
}

impl ExamplePair {
    pub fn new(query: Vec<TokenId>, answer: Vec<TokenId>, suffix: SuffixClass) -> Result<Self, DataError> {
        if query.is_empty() || answer.is_empty() {
            return Err(DataError::Invalid("query and answer must be nonempty".into()));
        }
        Ok(Self {
            instruction: Vec::new(),
            query,
            answer,
            suffix,
        })
    }

    pub fn len(&self) -> usize {
        self.instruction.len() + self.query.len() + self.answer.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sequence(&self) -> Vec<TokenId> {
        let mut s = self.prompt();
        s.extend_from_slice(&self.answer);
        s.push(vocab::EOS);
        s
    }

    /// BOS ⊕ inst ⊕ query ⊕ SEP, the decoding prompt.
    pub fn prompt(&self) -> Vec<TokenId> {
        let mut s = Vec::with_capacity(self.len());
        s.push(vocab::BOS);
        s.extend_from_slice(&self.instruction);
        s.extend_from_slice(&self.query);
        s.push(vocab::SEP);
        s
    }

    /// answer ⊕ EOS, the exact-match reference.
    pub fn target(&self) -> Vec<TokenId> {
        let mut t = self.answer.clone();
        t.push(vocab::EOS);
        t
    }

    pub fn marks(&self) -> Marks {
        let query_start = 1 + self.instruction.len();
        let query_end = query_start + self.query.len() - 1;
        Marks {
            query_start,
            query_end,
            answer_start: query_end + 2,
            answer_end: self.len() - 1,
        }
    }

    /// Per-position flag: does the prediction made at position i (of token
    /// i+1) count toward the next-token loss? True exactly when token i+1
    /// belongs to the answer or is the closing EOS.
    pub fn loss_mask(&self) -> Vec<bool> {
        let m = self.marks();
        (0..self.len())
            .map(|i| i + 1 >= m.answer_start && i < m.answer_end)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskTag {
    Pattern,
    Copy,
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskTag::Pattern => "pattern",
            TaskTag::Copy => "copy",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ExamplePair>,
    pub test: Vec<ExamplePair>,
    pub seed: u64,
    pub task: TaskTag,
}

impl DatasetSplit {
    pub fn max_len(&self) -> usize {
        self.train.iter().chain(&self.test).map(ExamplePair::len).max().unwrap_or(0)
    }

    pub fn check_capacity(&self, max_seq_len: usize) -> Result<(), DataError> {
        let len = self.max_len();
        if len > max_seq_len {
            return Err(DataError::Overflow { len, max: max_seq_len });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternTaskSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// STAR : STARSTAR odds.
    pub suffix_ratio: f64,
    pub min_clauses: usize,
    pub max_clauses: usize,
}

impl Default for PatternTaskSpec {
    fn default() -> Self {
        Self {
            n_train: 800,
            n_test: 200,
            suffix_ratio: 8.0,
            min_clauses: 2,
            max_clauses: 4,
        }
    }
}

/// One descriptor clause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Clause {
    connective: TokenId,
    class: u32,
    quant: u32,
}

impl Clause {
    // Descriptor order: connective, quantifier, class ("contains one-or-more
    // digits"); the pattern emits class before quantifier.
    fn describe(&self, out: &mut Vec<TokenId>) {
        out.push(self.connective);
        out.push(pattern::QUANT_WORDS + self.quant);
        out.push(pattern::CLASS_WORDS + self.class);
    }

    fn render(&self, out: &mut Vec<TokenId>) {
        let body = |out: &mut Vec<TokenId>| {
            out.push(pattern::CLASS_SYMBOLS + self.class);
            if self.quant > 0 {
                out.push(pattern::QUANT_SYMBOLS + self.quant - 1);
            }
        };
        match self.connective {
            pattern::STARTS_WITH => {
                out.push(pattern::CARET);
                body(out);
            }
            pattern::THEN => body(out),
            pattern::CONTAINS => {
                out.push(pattern::LPAREN);
                body(out);
                out.push(pattern::RPAREN);
            }
            pattern::NOT => {
                out.push(pattern::NEG_OPEN);
                body(out);
                out.push(pattern::NEG_CLOSE);
            }
            other => unreachable!("connective {other}"),
        }
    }
}

fn sample_query(rng: &mut rng::Rng, spec: &PatternTaskSpec) -> Vec<Clause> {
    let k = rng.gen_range(spec.min_clauses..=spec.max_clauses);
    (0..k)
        .map(|i| {
            let connective = if i == 0 {
                [pattern::STARTS_WITH, pattern::THEN, pattern::CONTAINS, pattern::NOT][rng.gen_range(0..4)]
            } else {
                [pattern::THEN, pattern::CONTAINS, pattern::NOT][rng.gen_range(0..3)]
            };
            Clause {
                connective,
                class: rng.gen_range(0..pattern::N_CLASSES),
                quant: rng.gen_range(0..pattern::N_QUANTS),
            }
        })
        .collect()
}

fn pattern_example(clauses: &[Clause], suffix: SuffixClass) -> ExamplePair {
    let mut query = Vec::new();
    let mut answer = Vec::new();
    for c in clauses {
        c.describe(&mut query);
        c.render(&mut answer);
    }
    match suffix {
        SuffixClass::Star => {
            query.push(pattern::TAIL_COMMON);
            answer.push(pattern::DOTSTAR);
        }
        SuffixClass::StarStar => {
            query.push(pattern::TAIL_RARE);
            answer.extend([pattern::DOTSTAR, pattern::DOTSTAR]);
        }
        SuffixClass::None => {}
    }
    ExamplePair::new(query, answer, suffix).expect("grammar emits nonempty sides")
}

/// Descriptor → pattern task. Train and test queries are disjoint.
pub fn generate_pattern_task(seed: u64, spec: &PatternTaskSpec) -> Result<DatasetSplit, DataError> {
    if spec.n_train < 64 {
        return Err(DataError::Invalid(format!("n_train {} < 64", spec.n_train)));
    }
    if !(spec.suffix_ratio >= 1.0 && spec.suffix_ratio.is_finite()) {
        return Err(DataError::Invalid(format!("suffix_ratio {} < 1", spec.suffix_ratio)));
    }
    if spec.min_clauses == 0 || spec.min_clauses > spec.max_clauses {
        return Err(DataError::Invalid("clause range".into()));
    }
    let mut rng = rng::stream(seed, Stream::Dataset, 0);
    let p_rare = 1.0 / (spec.suffix_ratio + 1.0);
    let mut seen: HashSet<Vec<Clause>> = HashSet::new();
    let draw = |rng: &mut rng::Rng, n: usize, seen: &mut HashSet<Vec<Clause>>| {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(DataError::Invalid("query space exhausted".into()));
            }
            let clauses = sample_query(rng, spec);
            let suffix = if rng.gen::<f64>() < p_rare {
                SuffixClass::StarStar
            } else {
                SuffixClass::Star
            };
            if seen.insert(clauses.clone()) {
                out.push(pattern_example(&clauses, suffix));
            }
        }
        Ok(out)
    };
    let train = draw(&mut rng, spec.n_train, &mut seen)?;
    let test = draw(&mut rng, spec.n_test, &mut seen)?;
    Ok(DatasetSplit {
        train,
        test,
        seed,
        task: TaskTag::Pattern,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopyTaskSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub payload_len: usize,
    /// Test payloads drawn from an alphabet the training set never uses.
    pub disjoint_alphabets: bool,
    pub alphabet: usize,
}

impl Default for CopyTaskSpec {
    fn default() -> Self {
        Self {
            n_train: 800,
            n_test: 200,
            payload_len: 8,
            disjoint_alphabets: false,
            alphabet: 16,
        }
    }
}

pub fn generate_copy_task(seed: u64, spec: &CopyTaskSpec) -> Result<DatasetSplit, DataError> {
    if spec.payload_len == 0 {
        return Err(DataError::Invalid("payload_len must be positive".into()));
    }
    if spec.alphabet < 2 || (spec.disjoint_alphabets && spec.alphabet < 4) {
        return Err(DataError::Invalid(format!("alphabet {} too small", spec.alphabet)));
    }
    let mut rng = rng::stream(seed, Stream::Dataset, 1);
    let (train_alpha, test_alpha) = if spec.disjoint_alphabets {
        let half = spec.alphabet / 2;
        ((0, half), (half, spec.alphabet))
    } else {
        ((0, spec.alphabet), (0, spec.alphabet))
    };
    let mut seen = HashSet::new();
    let mut draw = |n: usize, (lo, hi): (usize, usize), rng: &mut rng::Rng| {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(DataError::Invalid("payload space exhausted".into()));
            }
            let payload: Vec<TokenId> = (0..spec.payload_len)
                .map(|_| vocab::FIRST_CONTENT + rng.gen_range(lo..hi) as TokenId)
                .collect();
            if seen.insert(payload.clone()) {
                out.push(ExamplePair::new(payload.clone(), payload, SuffixClass::None)?);
            }
        }
        Ok(out)
    };
    let train = draw(spec.n_train, train_alpha, &mut rng)?;
    let test = draw(spec.n_test, test_alpha, &mut rng)?;
    Ok(DatasetSplit {
        train,
        test,
        seed,
        task: TaskTag::Copy,
    })
}

/// Result of carving a 1/n training subset.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionPlan {
    pub split: DatasetSplit,
    pub divisor: usize,
    /// Factor applied to the base epoch count.
    pub epoch_scale: f64,
    /// Factor applied to the base learning rate.
    pub lr_scale: f64,
}

pub const FRACTION_DIVISORS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Uniform subset of ⌊|train|/n⌋ examples (original order kept) with an n×
/// epoch multiplier, or n/2× epochs at 2× learning rate for `half_compute`.
pub fn subset_fraction(
    split: &DatasetSplit,
    divisor: usize,
    seed: u64,
    half_compute: bool,
) -> Result<FractionPlan, DataError> {
    if !FRACTION_DIVISORS.contains(&divisor) {
        return Err(DataError::Invalid(format!(
            "fraction divisor {divisor} not in {FRACTION_DIVISORS:?}"
        )));
    }
    let keep = split.train.len() / divisor;
    if keep == 0 {
        return Err(DataError::Invalid(format!(
            "1/{divisor} of {} examples is empty",
            split.train.len()
        )));
    }
    let mut idx: Vec<usize> = (0..split.train.len()).collect();
    if divisor > 1 {
        let mut rng = rng::stream(seed, Stream::Subset, divisor as u64);
        idx.shuffle(&mut rng);
        idx.truncate(keep);
        idx.sort_unstable();
    }
    let train = idx.iter().map(|&i| split.train[i].clone()).collect();
    let (epoch_scale, lr_scale) = if half_compute {
        (divisor as f64 / 2.0, 2.0)
    } else {
        (divisor as f64, 1.0)
    };
    Ok(FractionPlan {
        split: DatasetSplit {
            train,
            test: split.test.clone(),
            seed: split.seed,
            task: split.task,
        },
        divisor,
        epoch_scale,
        lr_scale,
    })
}

/// Inserts instruction tokens right after BOS; all marks shift by their count.
pub fn prepend_instruction(
    pair: &ExamplePair,
    instruction: &[TokenId],
    max_seq_len: usize,
) -> Result<ExamplePair, DataError> {
    let mut out = pair.clone();
    out.instruction.splice(0..0, instruction.iter().copied());
    if out.len() > max_seq_len {
        return Err(DataError::Overflow {
            len: out.len(),
            max: max_seq_len,
        });
    }
    Ok(out)
}

fn join(ids: &[TokenId]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

/// One example per line: query ids, answer ids, suffix class, tab-separated.
pub fn write_examples<W: Write>(mut w: W, examples: &[ExamplePair]) -> io::Result<()> {
    for e in examples {
        writeln!(w, "{}\t{}\t{}", join(&e.query), join(&e.answer), e.suffix)?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(r: R) -> Result<Vec<ExamplePair>, DataError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let ids = |s: &str| -> Result<Vec<TokenId>, DataError> {
            s.split_whitespace()
                .map(|t| t.parse::<TokenId>().map_err(|e| err(format!("token `{t}`: {e}"))))
                .collect()
        };
        let suffix = fields[2].trim().parse::<SuffixClass>().map_err(err)?;
        out.push(
            ExamplePair::new(ids(fields[0])?, ids(fields[1])?, suffix)
                .map_err(|e| DataError::Parse { line: lineno, msg: e.to_string() })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marks_and_mask() {
        let e = ExamplePair::new(vec![10, 11, 12, 13], vec![20, 21], SuffixClass::None).unwrap();
        // BOS q q q q SEP a a EOS
        assert_eq!(e.sequence(), vec![1, 10, 11, 12, 13, 4, 20, 21, 2]);
        let m = e.marks();
        assert_eq!((m.query_start, m.query_end, m.answer_start, m.answer_end), (1, 4, 6, 8));
        assert!(m.validate(e.len()));
        // Predictions made at SEP, a0, a1 cover a0, a1, EOS.
        let mask = e.loss_mask();
        let on: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        assert_eq!(on, vec![5, 6, 7]);
    }

    #[test]
    fn instruction_shifts_marks() {
        let e = ExamplePair::new(vec![10, 11], vec![20], SuffixClass::Star).unwrap();
        assert_eq!(prepend_instruction(&e, &[], 96).unwrap(), e);
        let shifted = prepend_instruction(&e, &[40, 41, 42, 43], 96).unwrap();
        let (a, b) = (e.marks(), shifted.marks());
        assert_eq!(b.query_start, a.query_start + 4);
        assert_eq!(b.query_end, a.query_end + 4);
        assert_eq!(b.answer_start, a.answer_start + 4);
        assert_eq!(b.answer_end, a.answer_end + 4);
        assert!(b.validate(shifted.len()));
        assert_eq!(shifted.sequence()[1..5], [40, 41, 42, 43]);
        assert!(prepend_instruction(&e, &[40; 10], 12).is_err());
    }

    #[test]
    fn grammar_swaps_class_and_quantifier() {
        let c = Clause {
            connective: pattern::CONTAINS,
            class: 2,
            quant: 3,
        };
        let (mut q, mut a) = (Vec::new(), Vec::new());
        c.describe(&mut q);
        c.render(&mut a);
        assert_eq!(q, vec![pattern::CONTAINS, pattern::QUANT_WORDS + 3, pattern::CLASS_WORDS + 2]);
        assert_eq!(
            a,
            vec![pattern::LPAREN, pattern::CLASS_SYMBOLS + 2, pattern::QUANT_SYMBOLS + 2, pattern::RPAREN]
        );
        const { assert!(pattern::CLASS_WORDS + pattern::N_CLASSES <= pattern::QUANT_WORDS) };
        const { assert!(pattern::QUANT_WORDS + pattern::N_QUANTS <= pattern::TAIL_COMMON) };
        const { assert!(pattern::CLASS_SYMBOLS + pattern::N_CLASSES <= pattern::QUANT_SYMBOLS) };
        const { assert!(pattern::QUANT_SYMBOLS + pattern::N_QUANTS - 1 <= pattern::DOTSTAR) };
    }

    #[test]
    fn rejects_bad_requests() {
        let mut s = PatternTaskSpec::default();
        s.n_train = 10;
        assert!(generate_pattern_task(1, &s).is_err());
        let mut s = PatternTaskSpec::default();
        s.suffix_ratio = 0.5;
        assert!(generate_pattern_task(1, &s).is_err());
        let split = generate_copy_task(1, &CopyTaskSpec { n_train: 8, n_test: 2, ..Default::default() }).unwrap();
        assert!(subset_fraction(&split, 3, 0, false).is_err());
        assert!(subset_fraction(&split, 16, 0, false).is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "5 6\t7\tSTAR\n5 x\t7\tSTAR\n";
        match read_examples(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(read_examples("5\t6\tPLUS\n".as_bytes()).is_err());
        assert!(read_examples("5\t6\n".as_bytes()).is_err());
    }
}
