//! Synthetic counting tasks over colored grids with controllable vision
//! dependency, and the exact-match verifier.
//!
//! Question templates (tokens shown as words):
//!
//! | task | high | medium | low |
//! |---|---|---|---|
//! | count_color | `how many red ?` | `there are 4 blue . how many red ?` | `there are 3 red . how many red ?` |
//! | compare_counts | `which more red blue ?` | `there are 4 red . which more red blue ?` | `blue is more . which more red blue ?` |
//!
//! With `constrained` set, each prompt carries its answer space: the numbers
//! `0..=answer_range` for counting, the two named colors for comparison.
//!
//! Every color count is drawn uniformly from `0..=answer_range`, so no single
//! count answer carries more than `1/(answer_range+1)` of the mass.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{vocab, AnswerSpace, Color, Dependency, GridImage, Prompt, Symbol, TaskKind, TaskMeta, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub width: usize,
    pub height: usize,
    pub colors: Vec<Color>,
    pub dependency: Dependency,
    /// Largest per-color count.
    pub answer_range: u32,
    /// Restrict decoding to well-formed answers.
    pub constrained: bool,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::CountColor,
            width: 8,
            height: 8,
            colors: vec![Color::Red, Color::Green, Color::Blue],
            dependency: Dependency::High,
            answer_range: 9,
            constrained: true,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self, max_answer_len: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.width == 0 || self.height == 0 {
            return fail("env grid dimensions must be positive".into());
        }
        let mut uniq = self.colors.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != self.colors.len() || self.colors.is_empty() {
            return fail("env.colors must be nonempty and distinct".into());
        }
        if self.task == TaskKind::CompareCounts && self.colors.len() < 2 {
            return fail("compare_counts needs at least two colors".into());
        }
        if self.task == TaskKind::CompareCounts && self.answer_range == 0 {
            return fail("compare_counts needs answer_range >= 1".into());
        }
        if self.colors.len() * self.answer_range as usize > self.width * self.height {
            return fail(format!(
                "{} colors with up to {} cells each do not fit a {}x{} grid",
                self.colors.len(),
                self.answer_range,
                self.width,
                self.height
            ));
        }
        let digits = self.answer_range.to_string().len();
        if digits + 1 > max_answer_len {
            return fail(format!(
                "answers up to {} need {} tokens plus END; arch.max_answer_len is {max_answer_len}",
                self.answer_range, digits
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.width * self.height
    }
}

fn count_question(dependency: Dependency, target: Color, cue: Option<(u32, Color)>, answer: u32) -> Vec<TokenId> {
    let mut q = Vec::new();
    match dependency {
        Dependency::High => {}
        Dependency::Medium => {
            if let Some((n, c)) = cue {
                q.extend([vocab::THERE, vocab::ARE]);
                q.extend(vocab::number(n));
                q.extend([c.token(), vocab::PERIOD]);
            }
        }
        Dependency::Low => {
            q.extend([vocab::THERE, vocab::ARE]);
            q.extend(vocab::number(answer));
            q.extend([target.token(), vocab::PERIOD]);
        }
    }
    q.extend([vocab::HOW, vocab::MANY, target.token(), vocab::QMARK]);
    q
}

fn compare_question(dependency: Dependency, a: Color, b: Color, cue: u32, winner: Color) -> Vec<TokenId> {
    let mut q = Vec::new();
    match dependency {
        Dependency::High => {}
        Dependency::Medium => {
            q.extend([vocab::THERE, vocab::ARE]);
            q.extend(vocab::number(cue));
            q.extend([a.token(), vocab::PERIOD]);
        }
        Dependency::Low => q.extend([winner.token(), vocab::IS, vocab::MORE, vocab::PERIOD]),
    }
    q.extend([vocab::WHICH, vocab::MORE, a.token(), b.token(), vocab::QMARK]);
    q
}

/// Well-formed answers for a question about `colors`.
pub fn answer_space(task: TaskKind, answer_range: u32, colors: &[Color]) -> Result<AnswerSpace> {
    match task {
        TaskKind::CountColor => AnswerSpace::new((0..=answer_range).map(vocab::number).collect()),
        TaskKind::CompareCounts => AnswerSpace::new(colors.iter().map(|c| vec![c.token()]).collect()),
    }
}

/// Draws one prompt from the task distribution.
pub fn generate_task(spec: &TaskSpec, stream: RngStream) -> Result<Prompt> {
    let mut rng = stream.rng();
    let range = spec.answer_range;
    let k = spec.colors.len();
    let mut counts: Vec<u32> = (0..k).map(|_| rng.random_range(0..=range)).collect();

    let (question, answer, focus) = match spec.task {
        TaskKind::CountColor => {
            let ti = rng.random_range(0..k);
            // cue color drawn from the others; with one color there is no cue
            let cue = if k > 1 {
                let mut ci = rng.random_range(0..k - 1);
                if ci >= ti {
                    ci += 1;
                }
                Some((counts[ci], spec.colors[ci]))
            } else {
                None
            };
            let target = spec.colors[ti];
            let q = count_question(spec.dependency, target, cue, counts[ti]);
            (q, vocab::number(counts[ti]), vec![ti])
        }
        TaskKind::CompareCounts => {
            let ai = rng.random_range(0..k);
            let mut bi = rng.random_range(0..k - 1);
            if bi >= ai {
                bi += 1;
            }
            // redraw b's count from the values that differ from a's
            let mut v = rng.random_range(0..range);
            if v >= counts[ai] {
                v += 1;
            }
            counts[bi] = v;
            let (a, b) = (spec.colors[ai], spec.colors[bi]);
            let winner = if counts[ai] > counts[bi] { a } else { b };
            let q = compare_question(spec.dependency, a, b, counts[ai], winner);
            (q, vec![winner.token()], vec![ai, bi])
        }
    };

    let mut order: Vec<usize> = (0..spec.num_patches()).collect();
    order.shuffle(&mut rng);
    let mut cells = vec![Symbol::EMPTY; spec.num_patches()];
    let mut placed = order.into_iter();
    let mut target_cells = Vec::new();
    for (ci, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let at = placed.next().expect("validated: counts fit the grid");
            cells[at] = spec.colors[ci].symbol();
            if focus.contains(&ci) {
                target_cells.push(at);
            }
        }
    }
    target_cells.sort_unstable();

    let colors: Vec<Color> = focus.iter().map(|&i| spec.colors[i]).collect();
    let answer_space = if spec.constrained {
        Some(answer_space(spec.task, range, &colors)?)
    } else {
        None
    };
    Prompt::new(
        TokenSeq::new(question)?,
        GridImage::new(spec.width, spec.height, cells)?,
        TokenSeq::new(answer)?,
        spec.dependency,
        Some(TaskMeta {
            kind: spec.task,
            colors,
            target_cells,
            answer_space,
        }),
    )
}

/// Reward 1.0 when the response, cut at its first END, equals the answer.
pub fn verify(answer: &TokenSeq, response: &TokenSeq) -> f64 {
    let body = match response.tokens().iter().position(|&t| t == vocab::END) {
        Some(e) => &response.tokens()[..e],
        None => response.tokens(),
    };
    let want = match answer.tokens().iter().position(|&t| t == vocab::END) {
        Some(e) => &answer.tokens()[..e],
        None => answer.tokens(),
    };
    if body == want {
        1.0
    } else {
        0.0
    }
}

/// Answer read directly off the grid (a perfect sighted predictor).
pub fn sighted_answer(prompt: &Prompt) -> Result<TokenSeq> {
    let meta = prompt
        .task
        .as_ref()
        .ok_or_else(|| Error::Unsupported("prompt carries no task metadata".into()))?;
    let count = |c: Color| prompt.image.count(c.symbol()) as u32;
    match meta.kind {
        TaskKind::CountColor => TokenSeq::new(vocab::number(count(meta.colors[0]))),
        TaskKind::CompareCounts => {
            let (a, b) = (meta.colors[0], meta.colors[1]);
            TokenSeq::new(vec![if count(a) > count(b) { a.token() } else { b.token() }])
        }
    }
}

/// Best text-only predictor for a task distribution, found by enumerating
/// every generator outcome with its exact probability.
#[derive(Debug, Clone)]
pub struct BlindOracle {
    table: HashMap<Vec<TokenId>, Vec<TokenId>>,
    accuracy: f64,
}

impl BlindOracle {
    pub fn enumerate(spec: &TaskSpec) -> Result<Self> {
        // question -> answer -> probability
        let mut joint: HashMap<Vec<TokenId>, HashMap<Vec<TokenId>, f64>> = HashMap::new();
        let k = spec.colors.len();
        let r = spec.answer_range;
        let pc = 1.0 / (r as f64 + 1.0);
        let mut add = |q: Vec<TokenId>, a: Vec<TokenId>, p: f64| {
            *joint.entry(q).or_default().entry(a).or_insert(0.0) += p;
        };
        match spec.task {
            TaskKind::CountColor => {
                // only the target's count and the cue color's count matter
                for ti in 0..k {
                    let p_t = 1.0 / k as f64;
                    if k == 1 {
                        for n in 0..=r {
                            let q = count_question(spec.dependency, spec.colors[ti], None, n);
                            add(q, vocab::number(n), p_t * pc);
                        }
                        continue;
                    }
                    for ci in (0..k).filter(|&c| c != ti) {
                        let p_c = 1.0 / (k - 1) as f64;
                        for n in 0..=r {
                            for m in 0..=r {
                                let q = count_question(spec.dependency, spec.colors[ti], Some((m, spec.colors[ci])), n);
                                add(q, vocab::number(n), p_t * p_c * pc * pc);
                            }
                        }
                    }
                }
            }
            TaskKind::CompareCounts => {
                for ai in 0..k {
                    for bi in (0..k).filter(|&b| b != ai) {
                        let p_pair = 1.0 / (k * (k - 1)) as f64;
                        let (a, b) = (spec.colors[ai], spec.colors[bi]);
                        for na in 0..=r {
                            for nb in (0..=r).filter(|&v| v != na) {
                                let p = p_pair * pc / r as f64;
                                let w = if na > nb { a } else { b };
                                let q = compare_question(spec.dependency, a, b, na, w);
                                add(q, vec![w.token()], p);
                            }
                        }
                    }
                }
            }
        }
        let mut table = HashMap::new();
        let mut accuracy = 0.0;
        for (q, answers) in joint {
            let mut best: Vec<(&Vec<TokenId>, &f64)> = answers.iter().collect();
            // highest mass, ties to the lexicographically smallest answer
            best.sort_by(|x, y| y.1.total_cmp(x.1).then(x.0.cmp(y.0)));
            let (a, p) = best[0];
            accuracy += p;
            table.insert(q, a.clone());
        }
        Ok(Self { table, accuracy })
    }

    /// Exact expected accuracy over the task distribution.
    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    pub fn predict(&self, question: &TokenSeq) -> Option<&[TokenId]> {
        self.table.get(question.tokens()).map(Vec::as_slice)
    }
}

/// One line of a task dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub question: TokenSeq,
    pub grid: GridImage,
    pub answer: TokenSeq,
    pub dependency: Dependency,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskMeta>,
}

impl From<&Prompt> for TaskRecord {
    fn from(p: &Prompt) -> Self {
        Self {
            question: p.question.clone(),
            grid: p.image.clone(),
            answer: p.answer.clone(),
            dependency: p.dependency,
            task: p.task.clone(),
        }
    }
}

impl TryFrom<TaskRecord> for Prompt {
    type Error = Error;
    fn try_from(r: TaskRecord) -> Result<Self> {
        Prompt::new(r.question, r.grid, r.answer, r.dependency, r.task)
    }
}

/// Writes prompts as newline-delimited JSON records.
pub fn write_task_dump<W: Write>(mut out: W, prompts: &[Prompt]) -> Result<()> {
    for p in prompts {
        serde_json::to_writer(&mut out, &TaskRecord::from(p))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_task_dump<R: BufRead>(input: R) -> Result<Vec<Prompt>> {
    let mut prompts = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Validation(format!("task dump line {}: {e}", i + 1)))?;
        prompts.push(rec.try_into()?);
    }
    Ok(prompts)
}

pub fn load_task_dump(path: &Path) -> Result<Vec<Prompt>> {
    let f = std::fs::File::open(path).map_err(|_| Error::NotFound(path.to_path_buf()))?;
    read_task_dump(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: TaskKind, dependency: Dependency) -> TaskSpec {
        TaskSpec {
            task,
            dependency,
            ..TaskSpec::default()
        }
    }

    fn seq(t: &[TokenId]) -> TokenSeq {
        TokenSeq::new(t.to_vec()).unwrap()
    }

    #[test]
    fn verify_examples() {
        let a = seq(&[3]);
        assert_eq!(verify(&a, &seq(&[3])), 1.0);
        assert_eq!(verify(&a, &seq(&[3, vocab::END])), 1.0);
        assert_eq!(verify(&a, &seq(&[4, vocab::END])), 0.0);
        assert_eq!(verify(&a, &seq(&[3, 3])), 0.0);
        assert_eq!(verify(&a, &seq(&[vocab::END])), 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = TaskSpec::default();
        let st = RngStream::new(5).derive("task");
        assert_eq!(generate_task(&s, st).unwrap(), generate_task(&s, st).unwrap());
    }

    #[test]
    fn answers_match_the_grid() {
        for task in [TaskKind::CountColor, TaskKind::CompareCounts] {
            for dep in Dependency::ALL {
                let s = spec(task, dep);
                for i in 0..300 {
                    let p = generate_task(&s, RngStream::new(1).derive_indexed("t", i)).unwrap();
                    assert_eq!(sighted_answer(&p).unwrap(), p.answer, "{task:?} {dep:?}");
                    if dep == Dependency::Low {
                        assert!(p.question.contains_run(p.answer.tokens()));
                    }
                    let meta = p.task.as_ref().unwrap();
                    for &c in &meta.target_cells {
                        assert!(meta.colors.contains(&p.image.cells()[c].color().unwrap()));
                    }
                }
            }
        }
    }

    #[test]
    fn count_answer_spells_the_count() {
        // fixed grid with three red cells
        let s = spec(TaskKind::CountColor, Dependency::High);
        for i in 0..200 {
            let p = generate_task(&s, RngStream::new(2).derive_indexed("t", i)).unwrap();
            let meta = p.task.as_ref().unwrap();
            let n = p.image.count(meta.colors[0].symbol());
            assert_eq!(meta.target_cells.len(), n);
            if n == 3 {
                assert_eq!(p.answer.tokens(), &[vocab::digit(3)]);
            }
        }
    }

    #[test]
    fn marginal_answer_distribution_is_spread() {
        let s = TaskSpec::default();
        let mut hist = [0usize; 10];
        let n = 5000;
        for i in 0..n {
            let p = generate_task(&s, RngStream::new(3).derive_indexed("t", i)).unwrap();
            hist[p.answer.tokens()[0] as usize] += 1;
        }
        assert!(hist.iter().all(|&c| (c as f64) < 0.5 * n as f64));
        assert!(hist.iter().all(|&c| c > 0));
    }

    #[test]
    fn blind_oracle_exact_values() {
        let high = BlindOracle::enumerate(&spec(TaskKind::CountColor, Dependency::High)).unwrap();
        assert!((high.accuracy() - 0.1).abs() < 1e-12);
        let med = BlindOracle::enumerate(&spec(TaskKind::CountColor, Dependency::Medium)).unwrap();
        assert!((med.accuracy() - 0.1).abs() < 1e-12);
        let low = BlindOracle::enumerate(&spec(TaskKind::CountColor, Dependency::Low)).unwrap();
        assert!((low.accuracy() - 1.0).abs() < 1e-12);
        let cmp = BlindOracle::enumerate(&spec(TaskKind::CompareCounts, Dependency::High)).unwrap();
        assert!((cmp.accuracy() - 0.5).abs() < 1e-12);
        let cmp_low = BlindOracle::enumerate(&spec(TaskKind::CompareCounts, Dependency::Low)).unwrap();
        assert!((cmp_low.accuracy() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(TaskSpec::default().validate(3).is_ok());
        let big = TaskSpec {
            answer_range: 30,
            ..TaskSpec::default()
        };
        assert!(big.validate(3).is_err());
        let long = TaskSpec {
            answer_range: 12,
            width: 10,
            height: 10,
            ..TaskSpec::default()
        };
        assert!(long.validate(2).is_err());
        assert!(long.validate(3).is_ok());
        let dup = TaskSpec {
            colors: vec![Color::Red, Color::Red],
            ..TaskSpec::default()
        };
        assert!(dup.validate(3).is_err());
    }

    #[test]
    fn task_dump_round_trip() {
        let s = spec(TaskKind::CompareCounts, Dependency::Medium);
        let prompts: Vec<Prompt> = (0..5)
            .map(|i| generate_task(&s, RngStream::new(9).derive_indexed("t", i)).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_task_dump(&mut buf, &prompts).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 5);
        assert_eq!(read_task_dump(&buf[..]).unwrap(), prompts);
    }
}
