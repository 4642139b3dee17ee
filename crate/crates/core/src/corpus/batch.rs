use crate::corpus::{OneToManyExample, Vocab, BOS, EOS, PAD};
use crate::numeric::Rng;

/// A right-padded matrix of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub width: usize,
    pub lens: Vec<usize>,
}

impl Padded {
    pub fn from_seqs<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * width];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * width..r * width + s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Self {
            ids,
            rows: seqs.len(),
            width,
            lens: seqs.iter().map(|s| s.as_ref().len()).collect(),
        }
    }

    pub fn at(&self, row: usize, t: usize) -> usize {
        self.ids[row * self.width + t]
    }

    /// Token ids of column `t` across all rows.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.rows).map(|r| self.at(r, t)).collect()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.width..r * self.width + self.lens[r]]
    }

    /// `true` at real (non-pad) positions, row-major.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.rows)
            .flat_map(|r| (0..self.width).map(move |t| (r, t)))
            .map(|(r, t)| t < self.lens[r])
            .collect()
    }
}

/// One (source, single target) training pair in id space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: Padded,
    /// Target content tokens, without framing.
    pub target: Padded,
    /// Targets framed as `BOS … EOS`.
    pub framed: Padded,
}

impl Batch {
    pub fn from_pairs(pairs: &[Pair]) -> Self {
        let sources: Vec<&[usize]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let targets: Vec<&[usize]> = pairs.iter().map(|p| p.target.as_slice()).collect();
        let framed: Vec<Vec<usize>> = pairs
            .iter()
            .map(|p| {
                let mut f = Vec::with_capacity(p.target.len() + 2);
                f.push(BOS);
                f.extend_from_slice(&p.target);
                f.push(EOS);
                f
            })
            .collect();
        Self {
            source: Padded::from_seqs(&sources),
            target: Padded::from_seqs(&targets),
            framed: Padded::from_seqs(&framed),
        }
    }

    pub fn len(&self) -> usize {
        self.source.rows
    }

    pub fn is_empty(&self) -> bool {
        self.source.rows == 0
    }
}

/// Every (source, target) combination: one pair per target, sharing its source.
pub fn flatten(examples: &[OneToManyExample], vocab: &Vocab) -> Vec<Pair> {
    examples
        .iter()
        .flat_map(|ex| {
            let source = vocab.encode(&ex.source);
            ex.targets.iter().map(move |t| Pair {
                source: source.clone(),
                target: vocab.encode(t),
            })
        })
        .collect()
}

/// Seeded shuffle of `pairs` cut into padded batches of `batch_size` (the last
/// batch may be smaller).
pub fn batchify(pairs: &[Pair], batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let picked: Vec<Pair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            Batch::from_pairs(&picked)
        })
        .collect()
}
