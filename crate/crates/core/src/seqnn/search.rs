//! Greedy and beam search over any step-wise decoder.

use std::cmp::Ordering;

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// A decoder that can be advanced one token at a time.
pub trait StepDecoder {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the vocabulary after feeding `tokens[i]` in
    /// `states[i]`, together with the successor states.
    fn step(&self, states: &[Self::State], tokens: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Self::State>)>;
}

/// PAD and BOS are never emitted.
fn emittable(id: usize) -> bool {
    id != PAD && id != BOS
}

/// Greedy decoding of every start state in parallel. Each output holds the
/// content tokens (EOS stripped); at most `max_len` tokens including EOS are
/// generated. Ties go to the lowest token id.
pub fn decode_greedy<D: StepDecoder>(dec: &D, starts: Vec<D::State>, max_len: usize) -> Result<Vec<Vec<usize>>> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let n = starts.len();
    let mut out = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut states = starts;
    let mut last = vec![BOS; n];
    for _ in 0..max_len {
        let live: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
        if live.is_empty() {
            break;
        }
        let live_states: Vec<D::State> = live.iter().map(|&i| states[i].clone()).collect();
        let live_tokens: Vec<usize> = live.iter().map(|&i| last[i]).collect();
        let (logp, next) = dec.step(&live_states, &live_tokens)?;
        for (k, &i) in live.iter().enumerate() {
            let mut best = None;
            for (id, &lp) in logp[k].iter().enumerate() {
                if emittable(id) && best.is_none_or(|(_, b)| lp > b) {
                    best = Some((id, lp));
                }
            }
            let (tok, _) = best.expect("vocabulary has emittable tokens");
            states[i] = next[k].clone();
            last[i] = tok;
            if tok == EOS {
                done[i] = true;
            } else {
                out[i].push(tok);
            }
        }
    }
    Ok(out)
}

/// A finished beam hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Content tokens (EOS stripped).
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, EOS included.
    pub log_prob: f64,
    /// `log_prob` divided by the number of generated tokens.
    pub score: f64,
    /// Whether the hypothesis ended with EOS rather than at `max_len`.
    pub ended: bool,
}

impl Hypothesis {
    /// Every generated token, EOS included when emitted.
    pub fn generated(&self) -> Vec<usize> {
        let mut s = self.tokens.clone();
        if self.ended {
            s.push(EOS);
        }
        s
    }
}

struct Candidate<S> {
    seq: Vec<usize>,
    log_prob: f64,
    state: S,
}

fn rank(a_score: f64, a_seq: &[usize], b_score: f64, b_seq: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_seq.cmp(b_seq))
}

/// Length-normalized beam search returning the `n_best` highest scoring of
/// the `beam` hypotheses retired at EOS (or truncated at `max_len`), sorted by
/// (score desc, token sequence asc).
pub fn decode_beam<D: StepDecoder>(
    dec: &D,
    start: D::State,
    beam: usize,
    n_best: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if n_best > beam {
        return Err(Error::Contract(format!("n_best {n_best} exceeds beam size {beam}")));
    }
    if beam == 0 || max_len == 0 {
        return Err(Error::Contract("beam size and max_len must be at least 1".into()));
    }
    let mut live = vec![Candidate {
        seq: Vec::new(),
        log_prob: 0.0,
        state: start,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        if live.is_empty() || finished.len() >= beam {
            break;
        }
        let states: Vec<D::State> = live.iter().map(|c| c.state.clone()).collect();
        let tokens: Vec<usize> = live.iter().map(|c| c.seq.last().copied().unwrap_or(BOS)).collect();
        let (logp, next) = dec.step(&states, &tokens)?;
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (k, row) in logp.iter().enumerate() {
            for (id, &lp) in row.iter().enumerate() {
                if emittable(id) {
                    cands.push((k, id, live[k].log_prob + lp));
                }
            }
        }
        let len = (step + 1) as f64;
        let seq_of = |k: usize, id: usize| {
            let mut s = live[k].seq.clone();
            s.push(id);
            s
        };
        let mut scored: Vec<(Vec<usize>, usize, f64)> =
            cands.into_iter().map(|(k, id, lp)| (seq_of(k, id), k, lp)).collect();
        scored.sort_by(|a, b| rank(a.2 / len, &a.0, b.2 / len, &b.0));
        scored.truncate(beam - finished.len());
        let last_step = step + 1 == max_len;
        let mut new_live = Vec::new();
        for (seq, k, lp) in scored {
            let ended = seq.last() == Some(&EOS);
            if ended || last_step {
                let tokens = if ended { seq[..seq.len() - 1].to_vec() } else { seq };
                finished.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    score: lp / len,
                    ended,
                });
            } else {
                new_live.push(Candidate {
                    seq,
                    log_prob: lp,
                    state: next[k].clone(),
                });
            }
        }
        live = new_live;
    }
    finished.sort_by(|a, b| rank(a.score, &a.generated(), b.score, &b.generated()));
    finished.truncate(n_best);
    Ok(finished)
}
