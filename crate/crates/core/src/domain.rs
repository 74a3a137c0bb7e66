//! Shared value types: vocabulary, token sequences, patch grids, prompts and
//! rollout groups.
//!
//! The vocabulary is one index space. Text tokens (digits, `END`, color
//! words, function words) occupy `[0, TEXT_VOCAB)`; patch symbols occupy
//! `[TEXT_VOCAB, TEXT_VOCAB + SYMBOL_COUNT)`. Token sequences only ever hold
//! text tokens and grids only ever hold symbols, so each type stores its local
//! index and [`Symbol::global_index`] maps into the shared space.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

pub type TokenId = u16;

/// Text vocabulary. Indices are stable and part of the checkpoint contract.
pub mod vocab {
    use super::TokenId;

    pub const DIGIT_0: TokenId = 0;
    pub const END: TokenId = 10;
    pub const RED: TokenId = 11;
    pub const GREEN: TokenId = 12;
    pub const BLUE: TokenId = 13;
    pub const YELLOW: TokenId = 14;
    pub const HOW: TokenId = 15;
    pub const MANY: TokenId = 16;
    pub const THERE: TokenId = 17;
    pub const ARE: TokenId = 18;
    pub const IS: TokenId = 19;
    pub const WHICH: TokenId = 20;
    pub const MORE: TokenId = 21;
    pub const CELLS: TokenId = 22;
    pub const OF: TokenId = 23;
    pub const THE: TokenId = 24;
    pub const GRID: TokenId = 25;
    pub const QMARK: TokenId = 26;
    pub const PERIOD: TokenId = 27;

    /// Number of text tokens.
    pub const TEXT_VOCAB: usize = 28;

    pub const WORDS: [&str; TEXT_VOCAB] = [
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "<end>", "red", "green", "blue",
        "yellow", "how", "many", "there", "are", "is", "which", "more", "cells", "of", "the",
        "grid", "?", ".",
    ];

    pub fn digit(d: u32) -> TokenId {
        assert!(d < 10);
        DIGIT_0 + d as TokenId
    }

    pub fn is_digit(t: TokenId) -> bool {
        t < 10
    }

    pub fn word(t: TokenId) -> &'static str {
        WORDS.get(t as usize).copied().unwrap_or("<unk>")
    }

    /// Digit tokens of a non-negative integer, most significant first.
    pub fn number(n: u32) -> Vec<TokenId> {
        n.to_string()
            .bytes()
            .map(|b| digit((b - b'0') as u32))
            .collect()
    }
}

/// Color of a patch. Doubles as the patch-symbol alphabet together with
/// `Empty` and `Masked`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn token(self) -> TokenId {
        match self {
            Color::Red => vocab::RED,
            Color::Green => vocab::GREEN,
            Color::Blue => vocab::BLUE,
            Color::Yellow => vocab::YELLOW,
        }
    }

    pub fn symbol(self) -> Symbol {
        Symbol(1 + self as u8)
    }
}

/// Patch symbol: 0 is empty, 1..=4 the colors, 5 the mask marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Symbol(pub u8);

impl Symbol {
    pub const EMPTY: Symbol = Symbol(0);
    pub const MASKED: Symbol = Symbol(5);
    /// Size of the patch alphabet.
    pub const COUNT: usize = 6;

    pub fn color(self) -> Option<Color> {
        match self.0 {
            1..=4 => Some(Color::ALL[self.0 as usize - 1]),
            _ => None,
        }
    }

    pub fn global_index(self) -> usize {
        vocab::TEXT_VOCAB + self.0 as usize
    }
}

/// Nonempty sequence of text tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Shape("token sequence must be nonempty".into()));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab::TEXT_VOCAB) {
            return Err(Error::Domain(format!(
                "token {bad} outside vocabulary of {}",
                vocab::TEXT_VOCAB
            )));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Whether `needle` occurs as a contiguous run inside this sequence.
    pub fn contains_run(&self, needle: &[TokenId]) -> bool {
        !needle.is_empty() && self.0.windows(needle.len()).any(|w| w == needle)
    }
}

impl TryFrom<Vec<TokenId>> for TokenSeq {
    type Error = Error;
    fn try_from(v: Vec<TokenId>) -> Result<Self> {
        TokenSeq::new(v)
    }
}

impl From<TokenSeq> for Vec<TokenId> {
    fn from(t: TokenSeq) -> Self {
        t.0
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<_> = self.0.iter().map(|&t| vocab::word(t)).collect();
        f.write_str(&words.join(" "))
    }
}

/// Grid of patch symbols in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridImage {
    width: usize,
    height: usize,
    cells: Vec<Symbol>,
}

impl GridImage {
    pub fn new(width: usize, height: usize, cells: Vec<Symbol>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("grid dimensions must be positive".into()));
        }
        if cells.len() != width * height {
            return Err(Error::Shape(format!(
                "grid {width}x{height} needs {} cells, got {}",
                width * height,
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|s| s.0 as usize >= Symbol::COUNT) {
            return Err(Error::Domain(format!("unknown patch symbol {}", bad.0)));
        }
        Ok(Self {
            width,
            height,
            cells,
        })
    }

    pub fn filled(width: usize, height: usize, symbol: Symbol) -> Result<Self> {
        Self::new(width, height, vec![symbol; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_patches(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[Symbol] {
        &self.cells
    }

    pub fn count(&self, symbol: Symbol) -> usize {
        self.cells.iter().filter(|&&s| s == symbol).count()
    }

    /// Copy with the flagged patches replaced by [`Symbol::MASKED`].
    pub fn with_masked(&self, masked: &[bool]) -> Result<Self> {
        if masked.len() != self.cells.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries for {} patches",
                masked.len(),
                self.cells.len()
            )));
        }
        let cells = self
            .cells
            .iter()
            .zip(masked)
            .map(|(&s, &m)| if m { Symbol::MASKED } else { s })
            .collect();
        Ok(Self {
            width: self.width,
            height: self.height,
            cells,
        })
    }
}

/// How much of the answer-determining information lives in the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dependency {
    Low,
    Medium,
    High,
}

impl Dependency {
    pub const ALL: [Dependency; 3] = [Dependency::Low, Dependency::Medium, Dependency::High];
}

impl fmt::Display for Dependency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dependency::Low => "low",
            Dependency::Medium => "medium",
            Dependency::High => "high",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CountColor,
    CompareCounts,
}

/// The well-formed answers of a task, used to constrain decoding.
///
/// A response is well formed when it spells one of the answers followed by
/// END. Decoding under a space only ever offers continuations of some answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<TokenId>>", into = "Vec<Vec<TokenId>>")]
pub struct AnswerSpace(Vec<Vec<TokenId>>);

impl AnswerSpace {
    pub fn new(answers: Vec<Vec<TokenId>>) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::Validation("answer space is empty".into()));
        }
        if answers.iter().any(|a| a.is_empty() || a.contains(&vocab::END)) {
            return Err(Error::Validation("answers must be nonempty and END-free".into()));
        }
        Ok(Self(answers))
    }

    pub fn answers(&self) -> &[Vec<TokenId>] {
        &self.0
    }

    pub fn contains(&self, answer: &[TokenId]) -> bool {
        self.0.iter().any(|a| a == answer)
    }

    /// Tokens (indexed up to `vocab_size`) that keep `prefix` on the way to
    /// some answer; END is allowed once `prefix` is a complete answer.
    pub fn allowed(&self, prefix: &[TokenId], vocab_size: usize) -> Result<Vec<bool>> {
        let mut mask = vec![false; vocab_size];
        let mut any = false;
        for a in self.0.iter().filter(|a| a.starts_with(prefix)) {
            let next = a.get(prefix.len()).copied().unwrap_or(vocab::END);
            let slot = mask
                .get_mut(next as usize)
                .ok_or_else(|| Error::Domain(format!("answer token {next} outside vocabulary")))?;
            *slot = true;
            any = true;
        }
        if any {
            Ok(mask)
        } else {
            Err(Error::Domain(format!("prefix {prefix:?} leaves the answer space")))
        }
    }

    /// Longest answer plus its END token.
    pub fn max_len(&self) -> usize {
        self.0.iter().map(Vec::len).max().unwrap_or(0) + 1
    }
}

impl TryFrom<Vec<Vec<TokenId>>> for AnswerSpace {
    type Error = Error;
    fn try_from(v: Vec<Vec<TokenId>>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AnswerSpace> for Vec<Vec<TokenId>> {
    fn from(s: AnswerSpace) -> Self {
        s.0
    }
}

/// Generator metadata kept alongside a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub kind: TaskKind,
    /// Colors the question is about (one for counting, two for comparison).
    pub colors: Vec<Color>,
    /// Patch indices holding task-relevant symbols.
    pub target_cells: Vec<usize>,
    /// Well-formed answers; decoding is unconstrained when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_space: Option<AnswerSpace>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub question: TokenSeq,
    pub image: GridImage,
    pub answer: TokenSeq,
    pub dependency: Dependency,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskMeta>,
}

impl Prompt {
    pub fn new(
        question: TokenSeq,
        image: GridImage,
        answer: TokenSeq,
        dependency: Dependency,
        task: Option<TaskMeta>,
    ) -> Result<Self> {
        if dependency == Dependency::Low && !question.contains_run(answer.tokens()) {
            return Err(Error::Validation(
                "low-dependency prompt must state its answer in the question".into(),
            ));
        }
        if image.cells().contains(&Symbol::MASKED) {
            return Err(Error::Validation("prompt image contains masked patches".into()));
        }
        if let Some(space) = task.as_ref().and_then(|t| t.answer_space.as_ref()) {
            if !space.contains(answer.tokens()) {
                return Err(Error::Validation("answer lies outside the prompt's answer space".into()));
            }
        }
        Ok(Self {
            question,
            image,
            answer,
            dependency,
            task,
        })
    }
}

impl Prompt {
    pub fn answer_space(&self) -> Option<&AnswerSpace> {
        self.task.as_ref().and_then(|t| t.answer_space.as_ref())
    }
}

/// One prompt's sampled responses with everything the objectives need.
///
/// Log-probability tables are indexed `[response][token]` and always match
/// the response lengths. `masked_images[i]` is the corrupted image used to
/// evaluate response `i` (identical entries when one mask is shared).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Prompt,
    pub responses: Vec<TokenSeq>,
    pub rewards: Vec<f64>,
    pub logp_new: Vec<Vec<f64>>,
    pub logp_old: Vec<Vec<f64>>,
    pub logp_ref: Vec<Vec<f64>>,
    pub logp_mask: Vec<Vec<f64>>,
    pub masked_images: Vec<GridImage>,
    /// Set when dynamic sampling gave up without finding a mixed group.
    pub degenerate: bool,
}

/// Tables for [`RolloutGroup::new`].
#[derive(Debug, Clone, Default)]
pub struct LogpTables {
    pub new: Vec<Vec<f64>>,
    pub old: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    pub mask: Vec<Vec<f64>>,
}

impl RolloutGroup {
    pub fn new(
        prompt: Prompt,
        responses: Vec<TokenSeq>,
        rewards: Vec<f64>,
        logp: LogpTables,
        masked_images: Vec<GridImage>,
    ) -> Result<Self> {
        let g = responses.len();
        if rewards.len() != g || masked_images.len() != g {
            return Err(Error::Shape(format!(
                "{g} responses but {} rewards and {} masked images",
                rewards.len(),
                masked_images.len()
            )));
        }
        if let Some(r) = rewards.iter().find(|&&r| r != 0.0 && r != 1.0) {
            return Err(Error::Domain(format!("reward {r} is not binary")));
        }
        for (name, table) in [
            ("logp_new", &logp.new),
            ("logp_old", &logp.old),
            ("logp_ref", &logp.reference),
            ("logp_mask", &logp.mask),
        ] {
            check_table(name, table, &responses)?;
        }
        Ok(Self {
            prompt,
            responses,
            rewards,
            logp_new: logp.new,
            logp_old: logp.old,
            logp_ref: logp.reference,
            logp_mask: logp.mask,
            masked_images,
            degenerate: false,
        })
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.responses.iter().map(TokenSeq::len).sum()
    }

    pub fn num_correct(&self) -> usize {
        self.rewards.iter().filter(|&&r| r == 1.0).count()
    }

    /// At least one correct and one incorrect response.
    pub fn is_mixed(&self) -> bool {
        let c = self.num_correct();
        c > 0 && c < self.size()
    }

    /// Re-checks shape alignment of every table.
    pub fn validate(&self) -> Result<()> {
        for (name, table) in [
            ("logp_new", &self.logp_new),
            ("logp_old", &self.logp_old),
            ("logp_ref", &self.logp_ref),
            ("logp_mask", &self.logp_mask),
        ] {
            check_table(name, table, &self.responses)?;
        }
        if self.rewards.len() != self.size() || self.masked_images.len() != self.size() {
            return Err(Error::Shape("rewards or masked images misaligned".into()));
        }
        Ok(())
    }
}

fn check_table(name: &str, table: &[Vec<f64>], responses: &[TokenSeq]) -> Result<()> {
    if table.len() != responses.len() {
        return Err(Error::Shape(format!(
            "{name} has {} rows for {} responses",
            table.len(),
            responses.len()
        )));
    }
    for (i, (row, resp)) in table.iter().zip(responses).enumerate() {
        if row.len() != resp.len() {
            return Err(Error::Shape(format!(
                "{name}[{i}] has {} entries for a {}-token response",
                row.len(),
                resp.len()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: &[TokenId]) -> TokenSeq {
        TokenSeq::new(t.to_vec()).unwrap()
    }

    #[test]
    fn token_seq_rejects_empty_and_out_of_range() {
        assert!(matches!(TokenSeq::new(vec![]), Err(Error::Shape(_))));
        assert!(matches!(
            TokenSeq::new(vec![vocab::TEXT_VOCAB as TokenId]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn grid_checks_cell_count() {
        assert!(GridImage::new(2, 2, vec![Symbol::EMPTY; 3]).is_err());
        let g = GridImage::filled(2, 3, Symbol::EMPTY).unwrap();
        assert_eq!(g.num_patches(), 6);
    }

    #[test]
    fn masked_copy_only_touches_flagged_cells() {
        let g = GridImage::new(3, 1, vec![Color::Red.symbol(), Symbol::EMPTY, Color::Blue.symbol()])
            .unwrap();
        let m = g.with_masked(&[false, true, false]).unwrap();
        assert_eq!(m.cells()[0], Color::Red.symbol());
        assert_eq!(m.cells()[1], Symbol::MASKED);
        assert_eq!(m.cells()[2], Color::Blue.symbol());
    }

    #[test]
    fn low_dependency_prompt_requires_answer_in_question() {
        let img = GridImage::filled(2, 2, Symbol::EMPTY).unwrap();
        let q = seq(&[vocab::HOW, vocab::MANY, vocab::RED, vocab::QMARK]);
        let a = seq(&[vocab::digit(0)]);
        assert!(Prompt::new(q.clone(), img.clone(), a.clone(), Dependency::Low, None).is_err());
        assert!(Prompt::new(q, img, a, Dependency::High, None).is_ok());
    }

    #[test]
    fn rollout_group_rejects_misaligned_tables() {
        let img = GridImage::filled(2, 2, Symbol::EMPTY).unwrap();
        let prompt = Prompt::new(
            seq(&[vocab::HOW]),
            img.clone(),
            seq(&[vocab::digit(1)]),
            Dependency::High,
            None,
        )
        .unwrap();
        let responses = vec![seq(&[1, vocab::END]), seq(&[2])];
        let good = vec![vec![-0.1, -0.2], vec![-0.3]];
        let bad = vec![vec![-0.1], vec![-0.3]];
        let tables = |mask: Vec<Vec<f64>>| LogpTables {
            new: good.clone(),
            old: good.clone(),
            reference: good.clone(),
            mask,
        };
        let imgs = vec![img.clone(), img];
        assert!(RolloutGroup::new(
            prompt.clone(),
            responses.clone(),
            vec![1.0, 0.0],
            tables(good.clone()),
            imgs.clone()
        )
        .is_ok());
        assert!(matches!(
            RolloutGroup::new(prompt.clone(), responses.clone(), vec![1.0, 0.0], tables(bad), imgs.clone()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            RolloutGroup::new(prompt, responses, vec![0.5, 0.0], tables(good.clone()), imgs),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn number_tokens() {
        assert_eq!(vocab::number(7), vec![7]);
        assert_eq!(vocab::number(12), vec![1, 2]);
    }

    #[test]
    fn answer_space_offers_continuations() {
        let space = AnswerSpace::new(vec![vec![1], vec![1, 0], vec![7]]).unwrap();
        let open = |prefix: &[TokenId]| {
            let m = space.allowed(prefix, vocab::TEXT_VOCAB).unwrap();
            (0..vocab::TEXT_VOCAB as TokenId).filter(|&t| m[t as usize]).collect::<Vec<_>>()
        };
        assert_eq!(open(&[]), vec![1, 7]);
        assert_eq!(open(&[1]), vec![0, vocab::END]);
        assert_eq!(open(&[1, 0]), vec![vocab::END]);
        assert!(matches!(space.allowed(&[2], vocab::TEXT_VOCAB), Err(Error::Domain(_))));
        assert!(matches!(space.allowed(&[], 5), Err(Error::Domain(_))));
        assert!(space.contains(&[1, 0]) && !space.contains(&[0]));
        assert_eq!(space.max_len(), 3);
    }

    #[test]
    fn answer_space_validation_and_serde() {
        assert!(AnswerSpace::new(vec![]).is_err());
        assert!(AnswerSpace::new(vec![vec![]]).is_err());
        assert!(AnswerSpace::new(vec![vec![3, vocab::END]]).is_err());
        let space = AnswerSpace::new(vec![vec![vocab::RED], vec![vocab::BLUE]]).unwrap();
        let text = serde_json::to_string(&space).unwrap();
        assert_eq!(text, "[[11],[13]]");
        assert_eq!(serde_json::from_str::<AnswerSpace>(&text).unwrap(), space);
        assert!(serde_json::from_str::<AnswerSpace>("[[10]]").is_err());
    }
}
