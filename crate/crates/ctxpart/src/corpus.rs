//! Synthetic multi-task character corpus.
//!
//! Five deterministic sequence tasks over a 60-token vocabulary stand in for
//! a real multi-domain corpus; the task tag doubles as the context label the
//! partitioner clusters against. Generation, splitting and serialization are
//! fully deterministic: every random choice comes from a seeded splitmix64
//! stream, one independent substream per task.

use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Total vocabulary: 26 lowercase + 26 uppercase + 5 task tags + pad/bos/eos.
pub const VOCAB_SIZE: usize = 60;
pub const PAD: usize = 57;
pub const BOS: usize = 58;
pub const EOS: usize = 59;
/// Task-tag token ids occupy `TAG_BASE..TAG_BASE + 5`.
pub const TAG_BASE: usize = 52;
/// Body lengths must stay inside [2, 32].
pub const MAX_BODY_LEN: usize = 32;
pub const MIN_BODY_LEN: usize = 2;

const SPLIT_STREAM_TAG: u64 = 0x53504c49;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("length range [{min},{max}] invalid: need {lo} <= min <= max <= {hi}", lo = MIN_BODY_LEN, hi = MAX_BODY_LEN)]
    InvalidLenRange { min: usize, max: usize },
    #[error("example count must be positive")]
    EmptyCount,
    #[error("character {ch:?} at position {position} is outside the a-z/A-Z alphabet")]
    BadChar { position: usize, ch: char },
    #[error("token id {id} at position {position} does not decode to a letter")]
    BadTokenId { position: usize, id: usize },
    #[error("split needs at least 3 examples, got {0}")]
    TooFewExamples(usize),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error("line {line}: target {found:?} does not match task {task} applied to {input:?}")]
    TargetMismatch {
        line: usize,
        task: &'static str,
        input: String,
        found: String,
    },
    #[error("jsonl io: {0}")]
    Io(String),
}

/// The five sequence tasks. `code()` is the stable context label `c` used by
/// attribution and metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    Copy,
    Reverse,
    SortChars,
    MajoritySymbol,
    CaseFlip,
}

/// Number of context classes (= tasks).
pub const NUM_TASKS: usize = 5;

impl TaskId {
    pub const ALL: [TaskId; NUM_TASKS] = [
        TaskId::Copy,
        TaskId::Reverse,
        TaskId::SortChars,
        TaskId::MajoritySymbol,
        TaskId::CaseFlip,
    ];

    pub fn code(self) -> usize {
        match self {
            TaskId::Copy => 0,
            TaskId::Reverse => 1,
            TaskId::SortChars => 2,
            TaskId::MajoritySymbol => 3,
            TaskId::CaseFlip => 4,
        }
    }

    pub fn from_code(code: usize) -> Option<TaskId> {
        TaskId::ALL.get(code).copied()
    }

    /// The tag token that opens every input sequence of this task.
    pub fn tag_token(self) -> usize {
        TAG_BASE + self.code()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Copy => "copy",
            TaskId::Reverse => "reverse",
            TaskId::SortChars => "sort_chars",
            TaskId::MajoritySymbol => "majority_symbol",
            TaskId::CaseFlip => "case_flip",
        }
    }

    /// The task function: what the model must produce for a given body.
    /// Ordering and tie-breaks use character code, not token id.
    pub fn apply(self, body: &str) -> String {
        match self {
            TaskId::Copy => body.to_string(),
            TaskId::Reverse => body.chars().rev().collect(),
            TaskId::SortChars => {
                let mut chars: Vec<char> = body.chars().collect();
                chars.sort_unstable();
                chars.into_iter().collect()
            }
            TaskId::MajoritySymbol => {
                let mut counts: [usize; 128] = [0; 128];
                for ch in body.chars() {
                    counts[ch as usize] += 1;
                }
                let best = (0..128u32)
                    .max_by_key(|&c| (counts[c as usize], std::cmp::Reverse(c)))
                    .unwrap();
                char::from_u32(best).unwrap().to_string()
            }
            TaskId::CaseFlip => body
                .chars()
                .map(|ch| {
                    if ch.is_ascii_lowercase() {
                        ch.to_ascii_uppercase()
                    } else {
                        ch.to_ascii_lowercase()
                    }
                })
                .collect(),
        }
    }
}

/// One training/evaluation item. `input_tokens` is `[tag, bos, body.., eos]`,
/// `target_tokens` is `[task(body).., eos]`; the model trains on the
/// concatenation with loss masked to the target region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub task: TaskId,
    pub input_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
}

impl Example {
    pub fn from_body(task: TaskId, body: &str) -> Result<Example, CorpusError> {
        let body_ids = encode(body)?;
        let target_ids = encode(&task.apply(body))?;
        let mut input_tokens = Vec::with_capacity(body_ids.len() + 3);
        input_tokens.push(task.tag_token());
        input_tokens.push(BOS);
        input_tokens.extend_from_slice(&body_ids);
        input_tokens.push(EOS);
        let mut target_tokens = target_ids;
        target_tokens.push(EOS);
        Ok(Example {
            task,
            input_tokens,
            target_tokens,
        })
    }

    /// The body token ids (input without tag/bos/eos framing).
    pub fn body_tokens(&self) -> &[usize] {
        &self.input_tokens[2..self.input_tokens.len() - 1]
    }

    pub fn body_text(&self) -> String {
        decode(self.body_tokens()).expect("body tokens are letters by construction")
    }

    pub fn target_text(&self) -> String {
        decode(&self.target_tokens[..self.target_tokens.len() - 1])
            .expect("target tokens are letters by construction")
    }

    /// Input followed by target: the sequence the model actually consumes.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut seq = self.input_tokens.clone();
        seq.extend_from_slice(&self.target_tokens);
        seq
    }

    /// Positions `p` of the full sequence whose *next* token is a target
    /// token; cross-entropy is evaluated at exactly these logit rows, with
    /// label `full_sequence[p + 1]`.
    pub fn loss_positions(&self) -> std::ops::Range<usize> {
        let start = self.input_tokens.len() - 1;
        start..start + self.target_tokens.len()
    }
}

pub fn char_to_id(ch: char) -> Option<usize> {
    match ch {
        'a'..='z' => Some(ch as usize - 'a' as usize),
        'A'..='Z' => Some(26 + ch as usize - 'A' as usize),
        _ => None,
    }
}

pub fn id_to_char(id: usize) -> Option<char> {
    match id {
        0..=25 => Some((b'a' + id as u8) as char),
        26..=51 => Some((b'A' + (id - 26) as u8) as char),
        _ => None,
    }
}

/// Letters-only text to token ids. Tag/pad/bos/eos ids are never produced.
pub fn encode(text: &str) -> Result<Vec<usize>, CorpusError> {
    text.chars()
        .enumerate()
        .map(|(position, ch)| char_to_id(ch).ok_or(CorpusError::BadChar { position, ch }))
        .collect()
}

/// Token ids back to text; rejects ids outside the letter range.
pub fn decode(ids: &[usize]) -> Result<String, CorpusError> {
    ids.iter()
        .enumerate()
        .map(|(position, &id)| id_to_char(id).ok_or(CorpusError::BadTokenId { position, id }))
        .collect()
}

const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn random_body(task: TaskId, len: usize, rng: &mut SplitMix64) -> String {
    match task {
        TaskId::Copy | TaskId::Reverse | TaskId::SortChars => (0..len)
            .map(|_| LOWER[rng.next_index(26)] as char)
            .collect(),
        TaskId::CaseFlip => (0..len)
            .map(|_| {
                let ch = LOWER[rng.next_index(26)] as char;
                if rng.next_index(2) == 1 {
                    ch.to_ascii_uppercase()
                } else {
                    ch
                }
            })
            .collect(),
        TaskId::MajoritySymbol => {
            // Plant a strict majority so the label is visually dominant; the
            // target is still recomputed from the definition, never assumed.
            let major = LOWER[rng.next_index(26)] as char;
            let major_count = len / 2 + 1 + rng.next_index(len - len / 2);
            let major_count = major_count.min(len);
            let mut chars: Vec<char> = Vec::with_capacity(len);
            for i in 0..len {
                if i < major_count {
                    chars.push(major);
                } else {
                    chars.push(LOWER[rng.next_index(26)] as char);
                }
            }
            rng.shuffle(&mut chars);
            chars.into_iter().collect()
        }
    }
}

/// Deterministically generate `count` examples of one task with body lengths
/// uniform over `len_range` (inclusive).
pub fn generate(
    task: TaskId,
    seed: u64,
    count: usize,
    len_range: (usize, usize),
) -> Result<Vec<Example>, CorpusError> {
    let (min_len, max_len) = len_range;
    if min_len < MIN_BODY_LEN || max_len > MAX_BODY_LEN || min_len > max_len {
        return Err(CorpusError::InvalidLenRange {
            min: min_len,
            max: max_len,
        });
    }
    if count == 0 {
        return Err(CorpusError::EmptyCount);
    }
    let mut rng = SplitMix64::substream(seed, task.code() as u64);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = min_len + rng.next_index(max_len - min_len + 1);
        let body = random_body(task, len, &mut rng);
        out.push(Example::from_body(task, &body).expect("generated bodies are alphabetic"));
    }
    Ok(out)
}

/// Generate `count_per_task` examples for every task with per-task
/// substreams, interleaved round-robin so batches drawn in order stay
/// context-balanced.
pub fn generate_mixture(
    tasks: &[TaskId],
    seed: u64,
    count_per_task: usize,
    len_range: (usize, usize),
) -> Result<Vec<Example>, CorpusError> {
    let per_task: Vec<Vec<Example>> = tasks
        .iter()
        .map(|&t| generate(t, seed, count_per_task, len_range))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(tasks.len() * count_per_task);
    for i in 0..count_per_task {
        for stream in &per_task {
            out.push(stream[i].clone());
        }
    }
    Ok(out)
}

/// Stratified train/val/test split: per task, largest-remainder rounding of
/// the fractions, shuffled by a task-keyed substream. Exhaustive, disjoint,
/// per-task proportions within one example of the requested fractions.
#[allow(clippy::type_complexity)]
pub fn split(
    examples: &[Example],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>), CorpusError> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&x| x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadFractions(f));
    }
    if examples.len() < 3 {
        return Err(CorpusError::TooFewExamples(examples.len()));
    }

    let mut out: [Vec<Example>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for task in TaskId::ALL {
        let mut idx: Vec<usize> = (0..examples.len())
            .filter(|&i| examples[i].task == task)
            .collect();
        if idx.is_empty() {
            continue;
        }
        // Distinct tag space from generate()'s per-task streams.
        let mut rng = SplitMix64::substream(seed, SPLIT_STREAM_TAG + task.code() as u64);
        rng.shuffle(&mut idx);

        let n = idx.len();
        let mut counts = [0usize; 3];
        let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(3);
        let mut assigned = 0;
        for s in 0..3 {
            let quota = f[s] * n as f64;
            counts[s] = quota.floor() as usize;
            assigned += counts[s];
            remainders.push((s, quota - quota.floor()));
        }
        // Largest remainder first; ties resolved by split order (train, val,
        // test) for determinism.
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..(n - assigned) {
            counts[remainders[k % 3].0] += 1;
        }

        let mut cursor = 0;
        for s in 0..3 {
            for &i in &idx[cursor..cursor + counts[s]] {
                out[s].push(examples[i].clone());
            }
            cursor += counts[s];
        }
    }
    let [train, val, test] = out;
    Ok((train, val, test))
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    task: String,
    input: String,
    target: String,
}

/// One JSON object per line: `{"task": .., "input": .., "target": ..}` with
/// decoded body/target text. Byte-exact round-trip with [`load_jsonl`].
pub fn dump_jsonl<W: Write>(examples: &[Example], mut w: W) -> Result<(), CorpusError> {
    for ex in examples {
        let row = JsonlRow {
            task: ex.task.name().to_string(),
            input: ex.body_text(),
            target: ex.target_text(),
        };
        let line = serde_json::to_string(&row).map_err(|e| CorpusError::Io(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CorpusError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn load_jsonl<R: BufRead>(r: R) -> Result<Vec<Example>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| CorpusError::BadLine {
            line: line_no,
            msg: e.to_string(),
        })?;
        let task = TaskId::ALL
            .iter()
            .copied()
            .find(|t| t.name() == row.task)
            .ok_or_else(|| CorpusError::BadLine {
                line: line_no,
                msg: format!("unknown task {:?}", row.task),
            })?;
        if task.apply(&row.input) != row.target {
            return Err(CorpusError::TargetMismatch {
                line: line_no,
                task: task.name(),
                input: row.input,
                found: row.target,
            });
        }
        out.push(Example::from_body(task, &row.input).map_err(|e| CorpusError::BadLine {
            line: line_no,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_definitions_on_forced_cases() {
        assert_eq!(TaskId::Reverse.apply("abc"), "cba");
        assert_eq!(TaskId::MajoritySymbol.apply("aab"), "a");
        assert_eq!(TaskId::Copy.apply("xyz"), "xyz");
        assert_eq!(TaskId::SortChars.apply("bca"), "abc");
        // code order puts uppercase before lowercase
        assert_eq!(TaskId::SortChars.apply("aZb"), "Zab");
        assert_eq!(TaskId::CaseFlip.apply("aBc"), "AbC");
        // majority tie breaks toward the smallest character code
        assert_eq!(TaskId::MajoritySymbol.apply("ba"), "a");
        assert_eq!(TaskId::MajoritySymbol.apply("aB"), "B");
    }

    #[test]
    fn encode_decode_round_trip() {
        let text = "Hello";
        assert_eq!(decode(&encode(text).unwrap()).unwrap(), text);
        assert_eq!(encode("abc").unwrap().len(), 3);
    }

    #[test]
    fn encode_rejects_out_of_alphabet() {
        assert_eq!(
            encode("é").unwrap_err(),
            CorpusError::BadChar {
                position: 0,
                ch: 'é'
            }
        );
        assert_eq!(
            encode("ab cd").unwrap_err(),
            CorpusError::BadChar {
                position: 2,
                ch: ' '
            }
        );
    }

    #[test]
    fn encode_never_emits_special_tokens() {
        let all: String = ('a'..='z').chain('A'..='Z').collect();
        for id in encode(&all).unwrap() {
            assert!(id < TAG_BASE);
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let a = generate(TaskId::Copy, 7, 10, (4, 8)).unwrap();
        let b = generate(TaskId::Copy, 7, 10, (4, 8)).unwrap();
        assert_eq!(a, b);
        let c = generate(TaskId::Copy, 8, 10, (4, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generate_enforces_length_range() {
        assert!(matches!(
            generate(TaskId::Copy, 1, 5, (1, 8)),
            Err(CorpusError::InvalidLenRange { .. })
        ));
        assert!(matches!(
            generate(TaskId::Copy, 1, 5, (4, 40)),
            Err(CorpusError::InvalidLenRange { .. })
        ));
        assert!(matches!(
            generate(TaskId::Copy, 1, 5, (8, 4)),
            Err(CorpusError::InvalidLenRange { .. })
        ));
        assert_eq!(generate(TaskId::Copy, 1, 0, (4, 8)), Err(CorpusError::EmptyCount));
        for ex in generate(TaskId::Reverse, 3, 50, (4, 8)).unwrap() {
            let len = ex.body_tokens().len();
            assert!((4..=8).contains(&len));
        }
    }

    #[test]
    fn example_framing_and_loss_positions() {
        let ex = Example::from_body(TaskId::Reverse, "abc").unwrap();
        assert_eq!(ex.input_tokens[0], TaskId::Reverse.tag_token());
        assert_eq!(ex.input_tokens[1], BOS);
        assert_eq!(*ex.input_tokens.last().unwrap(), EOS);
        assert_eq!(ex.target_text(), "cba");
        assert_eq!(*ex.target_tokens.last().unwrap(), EOS);

        let seq = ex.full_sequence();
        let positions = ex.loss_positions();
        assert_eq!(positions.len(), ex.target_tokens.len());
        for (k, p) in positions.enumerate() {
            assert_eq!(seq[p + 1], ex.target_tokens[k]);
        }
    }

    #[test]
    fn split_sizes_follow_largest_remainder() {
        let examples = generate(TaskId::Copy, 11, 10, (4, 6)).unwrap();
        let (train, val, test) = split(&examples, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));
    }

    #[test]
    fn split_rejects_zero_fraction_and_tiny_input() {
        let examples = generate(TaskId::Copy, 11, 10, (4, 6)).unwrap();
        assert!(matches!(
            split(&examples, (1.0, 0.0, 0.0), 5),
            Err(CorpusError::BadFractions(_))
        ));
        assert!(matches!(
            split(&examples[..2], (0.8, 0.1, 0.1), 5),
            Err(CorpusError::TooFewExamples(2))
        ));
    }

    #[test]
    fn split_is_an_exhaustive_disjoint_partition() {
        let examples = generate_mixture(&TaskId::ALL, 13, 20, (4, 8)).unwrap();
        for seed in [0u64, 1, 99] {
            let (train, val, test) = split(&examples, (0.6, 0.2, 0.2), seed).unwrap();
            assert_eq!(train.len() + val.len() + test.len(), examples.len());
            let mut merged: Vec<String> = train
                .iter()
                .chain(&val)
                .chain(&test)
                .map(|e| format!("{}:{}", e.task.name(), e.body_text()))
                .collect();
            merged.sort();
            let mut original: Vec<String> = examples
                .iter()
                .map(|e| format!("{}:{}", e.task.name(), e.body_text()))
                .collect();
            original.sort();
            assert_eq!(merged, original);
        }
    }

    #[test]
    fn split_is_stratified_within_one_example() {
        let examples = generate_mixture(&TaskId::ALL, 17, 21, (4, 8)).unwrap();
        let (train, val, test) = split(&examples, (0.7, 0.15, 0.15), 3).unwrap();
        for task in TaskId::ALL {
            let n = 21.0;
            let count = |xs: &[Example]| xs.iter().filter(|e| e.task == task).count() as f64;
            assert!((count(&train) - 0.7 * n).abs() <= 1.0);
            assert!((count(&val) - 0.15 * n).abs() <= 1.0);
            assert!((count(&test) - 0.15 * n).abs() <= 1.0);
        }
    }

    #[test]
    fn per_task_balance_when_divisible() {
        let examples = generate_mixture(&TaskId::ALL, 23, 8, (4, 8)).unwrap();
        for task in TaskId::ALL {
            assert_eq!(examples.iter().filter(|e| e.task == task).count(), 8);
        }
    }

    #[test]
    fn jsonl_round_trip_is_byte_exact() {
        let examples = generate_mixture(&TaskId::ALL, 41, 6, (4, 8)).unwrap();
        let mut buf = Vec::new();
        dump_jsonl(&examples, &mut buf).unwrap();
        let reloaded = load_jsonl(buf.as_slice()).unwrap();
        assert_eq!(reloaded, examples);
        let mut buf2 = Vec::new();
        dump_jsonl(&reloaded, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn jsonl_load_rejects_inconsistent_targets() {
        let line = r#"{"task":"reverse","input":"abc","target":"abc"}"#;
        assert!(matches!(
            load_jsonl(line.as_bytes()),
            Err(CorpusError::TargetMismatch { line: 1, .. })
        ));
    }

    #[test]
    fn majority_bodies_have_strict_majority() {
        for ex in generate(TaskId::MajoritySymbol, 29, 200, (4, 9)).unwrap() {
            let body = ex.body_text();
            let target = ex.target_text();
            let target_ch = target.chars().next().unwrap();
            let count = body.chars().filter(|&c| c == target_ch).count();
            assert!(2 * count > body.chars().count(), "body {body:?}");
        }
    }
}
