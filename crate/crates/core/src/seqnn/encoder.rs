use crate::corpus::Padded;
use crate::error::{Error, Result};
use crate::numeric::{Graph, Group, ParamStore, Rng, Tensor, Var};
use crate::seqnn::{EmbeddingTable, GruLayer, GruStack};

/// Number of recurrent layers in every stack.
pub const NUM_LAYERS: usize = 2;

/// Two-layer bidirectional GRU encoder. Layers above the first read the
/// concatenated forward and backward states of the layer below (`2H` wide).
#[derive(Clone, Debug)]
pub struct BiEncoder {
    pub fwd: GruStack,
    pub bwd: GruStack,
}

impl BiEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed: usize,
        hidden: usize,
        group: Group,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut build = |dir: &str, rng: &mut Rng| -> Result<GruStack> {
            let layers = (0..NUM_LAYERS)
                .map(|l| {
                    let in_dim = if l == 0 { embed } else { 2 * hidden };
                    GruLayer::new(store, &format!("{name}.{dir}.l{l}"), in_dim, hidden, group, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GruStack { layers })
        };
        let fwd = build("fwd", rng)?;
        let bwd = build("bwd", rng)?;
        Ok(Self { fwd, bwd })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    /// Width of the summary: final forward and backward top-layer states.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }

    /// Encodes every row of `seqs` into a `B × 2H` summary.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, emb: &EmbeddingTable, seqs: &Padded) -> Result<Var> {
        if seqs.rows == 0 || seqs.lens.contains(&0) {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        let (batch, steps, hd) = (seqs.rows, seqs.width, self.hidden());
        let ids: Vec<usize> = (0..steps).flat_map(|t| seqs.column(t)).collect();
        let masks: Vec<Vec<bool>> = (0..steps)
            .map(|t| seqs.lens.iter().map(|&l| t < l).collect())
            .collect();
        let mut input = emb.lookup(g, store, &ids)?;
        let h0 = g.constant(Tensor::zeros(&[batch, hd]));
        let mut last = (h0, h0);
        for l in 0..NUM_LAYERS {
            let (lf, lb) = (&self.fwd.layers[l], &self.bwd.layers[l]);
            let xf = lf.project_input(g, store, input)?;
            let fwd = lf.run(g, store, xf, &masks, h0, false)?;
            let xb = lb.project_input(g, store, input)?;
            let bwd = lb.run(g, store, xb, &masks, h0, true)?;
            last = (fwd[steps - 1], bwd[0]);
            if l + 1 < NUM_LAYERS {
                let per_step = (0..steps)
                    .map(|t| g.concat_cols(&[fwd[t], bwd[t]]))
                    .collect::<Result<Vec<_>>>()?;
                input = g.concat_rows(&per_step)?;
            }
        }
        g.concat_cols(&[last.0, last.1])
    }

    /// Summary plus `sigma`-scaled standard normal noise of the same shape.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_with_noise(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        emb: &EmbeddingTable,
        seqs: &Padded,
        sigma: f64,
        rng: &mut Rng,
    ) -> Result<Var> {
        if sigma < 0.0 {
            return Err(Error::Contract(format!("noise sigma must be non-negative, got {sigma}")));
        }
        let clean = self.encode(g, store, emb, seqs)?;
        if sigma == 0.0 {
            return Ok(clean);
        }
        let shape = g.value(clean).shape().to_vec();
        let noise = Tensor::randn(&shape, rng).map(|x| sigma * x);
        let n = g.constant(noise);
        g.add(clean, n)
    }
}

/// Single-sequence convenience wrapper returning the `2H` summary vector.
pub fn encode_bidirectional(
    ids: &[usize],
    emb: &EmbeddingTable,
    encoder: &BiEncoder,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let v = encoder.encode(&mut g, store, emb, &Padded::from_seqs(&[ids]))?;
    let t = g.value(v).clone();
    let n = t.len();
    t.reshape(&[n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64) -> (ParamStore, EmbeddingTable, BiEncoder) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let emb = EmbeddingTable::new(&mut store, "emb", 10, 4, Group::Recognition, &mut rng).unwrap();
        let enc = BiEncoder::new(&mut store, "enc", 4, 3, Group::Recognition, &mut rng).unwrap();
        (store, emb, enc)
    }

    #[test]
    fn summary_has_width_2h_and_is_deterministic() {
        let (store, emb, enc) = setup(1);
        let a = encode_bidirectional(&[4, 5, 6], &emb, &enc, &store).unwrap();
        let b = encode_bidirectional(&[4, 5, 6], &emb, &enc, &store).unwrap();
        assert_eq!(a.len(), 6);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn length_one_sequence() {
        let (store, emb, enc) = setup(2);
        let s = encode_bidirectional(&[7], &emb, &enc, &store).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.is_finite());
    }

    #[test]
    fn palindrome_with_shared_weights_is_symmetric() {
        let (mut store, emb, mut enc) = setup(3);
        enc.bwd = enc.fwd.clone();
        // The second layer reads [fwd, bwd] in one direction and, on a
        // palindrome, [bwd, fwd] in the other; equal input halves make the
        // two readings identical.
        let wx = enc.fwd.layers[1].wx;
        let h = enc.hidden();
        let v = store.get_mut(wx).value.data_mut();
        let cols = 3 * h;
        for r in 0..h {
            for c in 0..cols {
                v[(r + h) * cols + c] = v[r * cols + c];
            }
        }
        let s = encode_bidirectional(&[4, 8, 5, 8, 4], &emb, &enc, &store).unwrap();
        for i in 0..h {
            assert!((s.data()[i] - s.data()[h + i]).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_does_not_change_summaries() {
        let (store, emb, enc) = setup(4);
        let alone = encode_bidirectional(&[4, 5], &emb, &enc, &store).unwrap();
        let mut g = Graph::inference();
        let batch = Padded::from_seqs(&[vec![6, 7, 8, 9], vec![4, 5]]);
        let v = enc.encode(&mut g, &store, &emb, &batch).unwrap();
        let row = g.value(v).row(1);
        for (a, b) in row.iter().zip(alone.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let (store, emb, enc) = setup(5);
        assert!(matches!(
            encode_bidirectional(&[], &emb, &enc, &store),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            encode_bidirectional(&[10], &emb, &enc, &store),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn noise() {
        let (store, emb, enc) = setup(6);
        let seqs = Padded::from_seqs(&[vec![4, 5, 6]]);
        let clean = encode_bidirectional(&[4, 5, 6], &emb, &enc, &store).unwrap();
        let noisy = |sigma: f64, rng: &mut Rng| {
            let mut g = Graph::inference();
            let v = enc.encode_with_noise(&mut g, &store, &emb, &seqs, sigma, rng).unwrap();
            g.value(v).clone()
        };
        let mut rng = Rng::new(0);
        assert_eq!(noisy(0.0, &mut rng).data(), clean.data());
        let a = noisy(0.5, &mut rng);
        let b = noisy(0.5, &mut rng);
        assert_ne!(a.data(), b.data());

        // Empirical spread of (noisy − clean) over many draws.
        let sigma = 0.5;
        let mut sq = 0.0;
        let mut count = 0.0;
        for _ in 0..10_000 / 6 + 1 {
            let n = noisy(sigma, &mut rng);
            for (x, c) in n.data().iter().zip(clean.data()) {
                sq += (x - c).powi(2);
                count += 1.0;
            }
        }
        let std = (sq / count).sqrt();
        // Standard error of a sample std is about sigma / sqrt(2n).
        assert!((std - sigma).abs() < 3.0 * sigma / (2.0 * count).sqrt(), "{std}");
        assert!(matches!(
            enc.encode_with_noise(&mut Graph::inference(), &store, &emb, &seqs, -1.0, &mut rng),
            Err(Error::Contract(_))
        ));
    }
}
