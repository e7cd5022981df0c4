//! Best-path CTC decoding and word error rate.
//!
//! Without a language model the Viterbi path through the CTC lattice is the
//! per-frame argmax path, so [`best_path_decode`] is the Viterbi decoder:
//! take the argmax of every frame, merge runs of the same token, and drop
//! blanks.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BLANK: usize = 0;
/// Token that separates words.
pub const BOUNDARY: usize = 1;

/// Decoded token ids. Never contains [`BLANK`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(tokens: Vec<usize>, n_tokens: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t == BLANK || t >= n_tokens) {
            return Err(Error::Contract(format!(
                "token id {bad} outside [1, {n_tokens})"
            )));
        }
        Ok(TokenSeq(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Words between [`BOUNDARY`] tokens; empty words are dropped.
    pub fn words(&self) -> Vec<Vec<usize>> {
        self.0
            .split(|&t| t == BOUNDARY)
            .filter(|w| !w.is_empty())
            .map(|w| w.to_vec())
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Collapses a frame-level path: merge repeats, then remove blanks.
pub fn collapse(path: &[usize]) -> TokenSeq {
    let mut out = Vec::new();
    let mut prev = None;
    for &t in path {
        if Some(t) != prev && t != BLANK {
            out.push(t);
        }
        prev = Some(t);
    }
    TokenSeq(out)
}

/// Greedy best-path decoding of `N×M` logits or probabilities.
pub fn best_path_decode(logits: &Tensor) -> TokenSeq {
    let path: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
    collapse(&path)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Levenshtein alignment of `hypothesis` against `reference`.
///
/// Minimises substitutions + insertions + deletions; among equal totals the
/// alignment with the fewest insertions wins, which fixes the split.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    #[derive(Clone, Copy)]
    struct Cell {
        cost: usize,
        counts: EditCounts,
    }
    let key = |c: &Cell| (c.cost, c.counts.insertions);
    let h = hypothesis.len();
    let mut prev: Vec<Cell> = (0..=h)
        .map(|j| Cell {
            cost: j,
            counts: EditCounts {
                insertions: j,
                ..Default::default()
            },
        })
        .collect();
    let mut cur = prev.clone();
    for (i, r) in reference.iter().enumerate() {
        cur[0] = Cell {
            cost: i + 1,
            counts: EditCounts {
                deletions: i + 1,
                ..Default::default()
            },
        };
        for (j, hy) in hypothesis.iter().enumerate() {
            let mut diag = prev[j];
            if r != hy {
                diag.cost += 1;
                diag.counts.substitutions += 1;
            }
            let mut del = prev[j + 1];
            del.cost += 1;
            del.counts.deletions += 1;
            let mut ins = cur[j];
            ins.cost += 1;
            ins.counts.insertions += 1;
            let mut best = diag;
            for cand in [del, ins] {
                if key(&cand) < key(&best) {
                    best = cand;
                }
            }
            cur[j + 1] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[h].counts
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WerReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    pub wer: f64,
}

/// Corpus-level error rate: total edits over total reference length.
pub fn wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::Contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut report = WerReport::default();
    for (r, h) in refs.iter().zip(hyps) {
        let c = edit_distance(r, h);
        report.substitutions += c.substitutions;
        report.insertions += c.insertions;
        report.deletions += c.deletions;
        report.ref_len += r.len();
    }
    if report.ref_len == 0 {
        return Err(Error::Contract("reference corpus has no words".into()));
    }
    report.wer = (report.substitutions + report.insertions + report.deletions) as f64
        / report.ref_len as f64;
    Ok(report)
}

/// Word error rate over token transcripts, splitting words at [`BOUNDARY`].
pub fn word_error_rate(refs: &[TokenSeq], hyps: &[TokenSeq]) -> Result<WerReport> {
    let r: Vec<_> = refs.iter().map(TokenSeq::words).collect();
    let h: Vec<_> = hyps.iter().map(TokenSeq::words).collect();
    wer(&r, &h)
}

/// Token-level error rate, reported alongside WER for diagnostics.
pub fn token_error_rate(refs: &[TokenSeq], hyps: &[TokenSeq]) -> Result<WerReport> {
    let r: Vec<_> = refs.iter().map(|s| s.0.clone()).collect();
    let h: Vec<_> = hyps.iter().map(|s| s.0.clone()).collect();
    wer(&r, &h)
}

/// Printable names for token ids: `|` for the boundary, then `a`, `b`, …
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub n_tokens: usize,
}

impl Vocab {
    pub fn new(n_tokens: usize) -> Self {
        Vocab { n_tokens }
    }

    pub fn name(&self, id: usize) -> String {
        match id {
            BLANK => "<blank>".into(),
            BOUNDARY => "|".into(),
            _ if id - 2 < 26 => ((b'a' + (id - 2) as u8) as char).to_string(),
            _ => format!("t{}", id - 2),
        }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        let id = match name {
            "|" => BOUNDARY,
            s if s.len() == 1 && s.as_bytes()[0].is_ascii_lowercase() => {
                (s.as_bytes()[0] - b'a') as usize + 2
            }
            s => s.strip_prefix('t')?.parse::<usize>().ok()? + 2,
        };
        (id < self.n_tokens).then_some(id)
    }

    /// One dump line: space-separated token names.
    pub fn format(&self, seq: &TokenSeq) -> String {
        let names: Vec<String> = seq.tokens().iter().map(|&t| self.name(t)).collect();
        names.join(" ")
    }

    pub fn parse(&self, line: &str) -> Result<TokenSeq> {
        let tokens = line
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Malformed(format!("unknown token {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        TokenSeq::new(tokens, self.n_tokens)
    }
}

/// Writes one utterance per line.
pub fn write_dump(path: impl AsRef<Path>, vocab: &Vocab, seqs: &[TokenSeq]) -> Result<()> {
    let mut text = String::new();
    for s in seqs {
        writeln!(text, "{}", vocab.format(s)).unwrap();
    }
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<TokenSeq>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(|l| vocab.parse(l)).collect()
}
