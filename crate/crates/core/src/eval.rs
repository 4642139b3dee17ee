//! Accuracy and diversity metrics, the KL-vanishing monitor and end-to-end
//! evaluation of a trained model.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, OneToManyExample, Padded, Pair, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::Rng;
use crate::seqnn::{decode_beam, decode_greedy};
use crate::train::streams;

/// Mean KL per pair below which the latent variable counts as unused.
pub const KL_VANISHING_THRESHOLD: f64 = 0.01;

/// Longest generated sequence, EOS included.
pub const DEFAULT_MAX_LEN: usize = 30;

const MAX_ORDER: usize = 3;

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence similarity `d(r, h)`: the average of cumulative BLEU-1, BLEU-2
/// and BLEU-3. Clipped n-gram precisions use add-one smoothing for n ≥ 2;
/// BLEU-n is the geometric mean of the first n precisions times the brevity
/// penalty `exp(min(0, 1 − |r|/|h|))`. An empty hypothesis scores 0.
pub fn sentence_bleu<T: Eq + std::hash::Hash + Clone>(reference: &[T], hypothesis: &[T]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let bp = (1.0 - reference.len() as f64 / hypothesis.len() as f64).min(0.0).exp();
    let mut log_sum = 0.0;
    let mut total = 0.0;
    for n in 1..=MAX_ORDER {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        let matched: usize = hyp.iter().map(|(g, &c)| c.min(*refc.get(g).unwrap_or(&0))).sum();
        let count = hypothesis.len().saturating_sub(n - 1);
        let p = if n == 1 {
            matched as f64 / count as f64
        } else {
            (matched as f64 + 1.0) / (count as f64 + 1.0)
        };
        if p == 0.0 {
            // Every cumulative score from here on is zero.
            break;
        }
        log_sum += p.ln();
        total += bp * (log_sum / n as f64).exp();
    }
    total / MAX_ORDER as f64
}

/// Mean over hypotheses of the best `d` against any reference.
pub fn bleu_precision<T: Eq + std::hash::Hash + Clone>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Contract("BLEU precision needs at least one hypothesis".into()));
    }
    Ok(best_match_mean(hypotheses, references, |h, r| sentence_bleu(r, h)))
}

/// Mean over references of the best `d` achieved by any hypothesis.
pub fn bleu_recall<T: Eq + std::hash::Hash + Clone>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Contract("BLEU recall needs at least one reference".into()));
    }
    Ok(best_match_mean(references, hypotheses, |r, h| sentence_bleu(r, h)))
}

fn best_match_mean<T>(outer: &[Vec<T>], inner: &[Vec<T>], d: impl Fn(&[T], &[T]) -> f64) -> f64 {
    let sum: f64 = outer
        .iter()
        .map(|o| inner.iter().map(|i| d(o, i)).fold(0.0, f64::max))
        .sum();
    sum / outer.len() as f64
}

/// Distinct n-grams across all hypotheses divided by the total number of
/// generated tokens; 0 when nothing was generated.
pub fn distinct_n<T: Eq + std::hash::Hash + Clone>(hypotheses: &[Vec<T>], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    let tokens: usize = hypotheses.iter().map(Vec::len).sum();
    if tokens == 0 {
        return 0.0;
    }
    let unique: HashSet<&[T]> = hypotheses
        .iter()
        .filter(|h| h.len() >= n)
        .flat_map(|h| h.windows(n))
        .collect();
    unique.len() as f64 / tokens as f64
}

/// Mean `KL(q(z|x,c) ‖ p(z|c))` over the pairs.
pub fn kl_monitor(model: &Model, pairs: &[Pair], batch_size: usize) -> Result<f64> {
    if !model.mode().has_latent() {
        return Err(Error::Contract(format!("mode {} has no latent variable to monitor", model.mode())));
    }
    if pairs.is_empty() {
        return Err(Error::Contract("KL monitor needs at least one pair".into()));
    }
    let mut sum = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        sum += model.kl_per_pair(&Batch::from_pairs(chunk))?.iter().sum::<f64>();
    }
    Ok(sum / pairs.len() as f64)
}

/// How the hypotheses for one source are produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeSpec {
    /// Greedy decoding of independent contexts; latent models draw one prior
    /// sample per hypothesis.
    Greedy,
    /// N-best beam search of one context.
    Beam(usize),
    /// Greedy decoding of summaries perturbed by Gaussian noise of this scale.
    Noise(f64),
}

impl fmt::Display for DecodeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeSpec::Greedy => write!(f, "greedy"),
            DecodeSpec::Beam(b) => write!(f, "beam:{b}"),
            DecodeSpec::Noise(s) => write!(f, "noise:{s}"),
        }
    }
}

impl FromStr for DecodeSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("invalid decode spec '{s}' (expected greedy, beam:B or noise:SIGMA)");
        match s.split_once(':') {
            None if s == "greedy" || s == "greedy-prior-sample" => Ok(DecodeSpec::Greedy),
            Some(("beam", b)) => match b.parse::<usize>() {
                Ok(b) if b >= 1 => Ok(DecodeSpec::Beam(b)),
                _ => Err(bad()),
            },
            Some(("noise", x)) => match x.parse::<f64>() {
                Ok(x) if x >= 0.0 && x.is_finite() => Ok(DecodeSpec::Noise(x)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

/// `n` hypotheses (content tokens) for one source summary.
pub fn generate_from_summary(
    model: &Model,
    summary: &[f64],
    n: usize,
    spec: DecodeSpec,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Contract("number of hypotheses must be positive".into()));
    }
    let stepper = model.decoder.stepper(&model.store);
    match spec {
        DecodeSpec::Greedy | DecodeSpec::Noise(_) => {
            let sigma = if let DecodeSpec::Noise(s) = spec { s } else { 0.0 };
            let ctx = model.contexts(summary, n, sigma, rng)?;
            let starts = model.decoder.start_states(&model.store, &ctx)?;
            decode_greedy(&stepper, starts, max_len)
        }
        DecodeSpec::Beam(b) => {
            let ctx = model.contexts(summary, 1, 0.0, rng)?;
            let start = model.decoder.start_states(&model.store, &ctx)?.remove(0);
            Ok(decode_beam(&stepper, start, b, n, max_len)?
                .into_iter()
                .map(|h| h.tokens)
                .collect())
        }
    }
}

/// Hypotheses for every source, in order.
pub fn generate(
    model: &Model,
    sources: &[Vec<usize>],
    n: usize,
    spec: DecodeSpec,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<Vec<usize>>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let summaries = model.source_summaries(&Padded::from_seqs(sources))?;
    (0..sources.len())
        .map(|i| generate_from_summary(model, summaries.row(i), n, spec, max_len, rng))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu_precision: f64,
    pub bleu_recall: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    /// Mean KL per pair; absent for models without a latent variable.
    pub mean_kl: Option<f64>,
    pub n: usize,
    pub sources: usize,
    pub decode_spec: String,
    pub seed: u64,
}

/// Generates `n` hypotheses per source and scores them against every
/// reference target of that source.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    examples: &[OneToManyExample],
    n: usize,
    spec: DecodeSpec,
    max_len: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let sources: Vec<Vec<usize>> = examples.iter().map(|e| vocab.encode(&e.source)).collect();
    let mut rng = Rng::derived(seed, streams::EVAL);
    let hyps = generate(model, &sources, n, spec, max_len, &mut rng)?;
    let mut precision = 0.0;
    let mut recall = 0.0;
    for (ex, h) in examples.iter().zip(&hyps) {
        let refs: Vec<Vec<usize>> = ex.targets.iter().map(|t| vocab.encode(t)).collect();
        precision += bleu_precision(&refs, h)?;
        recall += bleu_recall(&refs, h)?;
    }
    let all: Vec<Vec<usize>> = hyps.into_iter().flatten().collect();
    let mean_kl = if model.mode().has_latent() {
        let pairs = crate::corpus::flatten(examples, vocab);
        Some(kl_monitor(model, &pairs, 64)?)
    } else {
        None
    };
    let k = examples.len() as f64;
    Ok(MetricsReport {
        bleu_precision: precision / k,
        bleu_recall: recall / k,
        distinct_1: distinct_n(&all, 1),
        distinct_2: distinct_n(&all, 2),
        mean_kl,
        n,
        sources: examples.len(),
        decode_spec: spec.to_string(),
        seed,
    })
}
