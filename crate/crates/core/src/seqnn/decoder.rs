use crate::corpus::{Padded, BOS, UNK};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Group, ParamStore, Rng, Tensor, Var};
use crate::seqnn::{Affine, EmbeddingTable, GruLayer, GruStack, StepDecoder, NUM_LAYERS};

/// Unidirectional two-layer GRU decoder. The initial state of every layer
/// comes from one affine map (plus tanh) of the decoding context, which is
/// the source summary optionally concatenated with a latent sample.
#[derive(Clone, Debug)]
pub struct DecoderNet {
    pub embed: EmbeddingTable,
    pub init: Affine,
    pub stack: GruStack,
    pub out: Affine,
}

/// Outputs of a teacher-forced pass.
pub struct TeacherForced {
    /// Logits for every step, stacked time-major (`steps·B × V`).
    pub logits: Var,
    /// Per-sequence mean cross-entropy, averaged over the batch.
    pub loss: Var,
    /// Token fed at each step, time-major (after word dropout).
    pub inputs: Vec<usize>,
}

impl DecoderNet {
    pub fn new(
        store: &mut ParamStore,
        embed: EmbeddingTable,
        context_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let group = Group::Decoder;
        let init = Affine::new(store, "dec.init", context_dim, NUM_LAYERS * hidden, group, rng)?;
        let layers = (0..NUM_LAYERS)
            .map(|l| {
                let in_dim = if l == 0 { embed.dim } else { hidden };
                GruLayer::new(store, &format!("dec.l{l}"), in_dim, hidden, group, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Affine::new(store, "dec.out", hidden, embed.vocab_size, group, rng)?;
        Ok(Self {
            embed,
            init,
            stack: GruStack { layers },
            out,
        })
    }

    pub fn hidden(&self) -> usize {
        self.stack.hidden()
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.vocab_size
    }

    /// Per-layer initial states (`B × H` each) from a `B × context_dim` context.
    pub fn initial_states(&self, g: &mut Graph, store: &ParamStore, context: Var) -> Result<Vec<Var>> {
        let pre = self.init.forward(g, store, context)?;
        let h = g.tanh(pre);
        let hd = self.hidden();
        (0..NUM_LAYERS).map(|l| g.slice_cols(h, l * hd, (l + 1) * hd)).collect()
    }

    /// Teacher-forced pass over `BOS … EOS` framed targets. At each step after
    /// the first, the fed gold token is replaced by UNK with probability
    /// `wd_rate`.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        context: Var,
        framed: &Padded,
        wd_rate: f64,
        rng: &mut Rng,
    ) -> Result<TeacherForced> {
        if !(0.0..=1.0).contains(&wd_rate) {
            return Err(Error::Contract(format!("word dropout rate {wd_rate} outside [0, 1]")));
        }
        let batch = framed.rows;
        for r in 0..batch {
            let row = framed.row(r);
            if row.len() < 2 || row[0] != BOS || row[row.len() - 1] != crate::corpus::EOS {
                return Err(Error::Contract(format!("target row {r} is not framed by BOS/EOS")));
            }
        }
        let steps = framed.width - 1;
        let mut inputs = Vec::with_capacity(steps * batch);
        for t in 0..steps {
            for r in 0..batch {
                let tok = framed.at(r, t);
                let real = t + 1 < framed.lens[r];
                let dropped = t > 0 && real && wd_rate > 0.0 && rng.uniform() < wd_rate;
                inputs.push(if dropped { UNK } else { tok });
            }
        }
        let init = self.initial_states(g, store, context)?;
        let masks = vec![vec![true; batch]; steps];
        let mut layer_in = self.embed.lookup(g, store, &inputs)?;
        let mut outs = Vec::new();
        for (l, layer) in self.stack.layers.iter().enumerate() {
            let xw = layer.project_input(g, store, layer_in)?;
            outs = layer.run(g, store, xw, &masks, init[l], false)?;
            layer_in = g.concat_rows(&outs)?;
        }
        debug_assert_eq!(outs.len(), steps);
        let logits = self.out.forward(g, store, layer_in)?;
        let mut targets = Vec::with_capacity(steps * batch);
        let mut weights = Vec::with_capacity(steps * batch);
        for t in 0..steps {
            for r in 0..batch {
                let len = framed.lens[r];
                if t + 1 < len {
                    targets.push(framed.at(r, t + 1));
                    weights.push(1.0 / ((len - 1) as f64 * batch as f64));
                } else {
                    targets.push(0);
                    weights.push(0.0);
                }
            }
        }
        let loss = g.softmax_xent(logits, &targets, &weights)?;
        Ok(TeacherForced { logits, loss, inputs })
    }

    /// Frozen step-by-step view for search procedures.
    pub fn stepper<'a>(&'a self, store: &'a ParamStore) -> GruStepper<'a> {
        GruStepper { net: self, store }
    }

    /// Initial per-layer hidden vectors for each context row, as plain tensors.
    pub fn start_states(&self, store: &ParamStore, context: &Tensor) -> Result<Vec<DecoderState>> {
        let mut g = Graph::inference();
        let c = g.constant(context.clone());
        let init = self.initial_states(&mut g, store, c)?;
        let rows = context.rows();
        Ok((0..rows)
            .map(|r| DecoderState {
                layers: init.iter().map(|&v| g.value(v).row(r).to_vec()).collect(),
            })
            .collect())
    }
}

/// Hidden vector of every decoder layer for one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<Vec<f64>>,
}

pub struct GruStepper<'a> {
    net: &'a DecoderNet,
    store: &'a ParamStore,
}

impl StepDecoder for GruStepper<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.net.vocab_size()
    }

    fn step(&self, states: &[DecoderState], tokens: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<DecoderState>)> {
        let n = states.len();
        let hd = self.net.hidden();
        let mut g = Graph::inference();
        let mut x = self.net.embed.lookup(&mut g, self.store, tokens)?;
        let mut next = vec![
            DecoderState {
                layers: Vec::with_capacity(NUM_LAYERS)
            };
            n
        ];
        for (l, layer) in self.net.stack.layers.iter().enumerate() {
            let data: Vec<f64> = states.iter().flat_map(|s| s.layers[l].iter().copied()).collect();
            let h = g.constant(Tensor::matrix(n, hd, data)?);
            let h2 = layer.cell(&mut g, self.store, x, h)?;
            for (r, st) in next.iter_mut().enumerate() {
                st.layers.push(g.value(h2).row(r).to_vec());
            }
            x = h2;
        }
        let logits = self.net.out.forward(&mut g, self.store, x)?;
        let lv = g.value(logits);
        let logp = (0..n).map(|r| log_softmax(lv.row(r))).collect();
        Ok((logp, next))
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EOS, PAD};
    use crate::numeric::grad_check;

    fn setup(vocab: usize, seed: u64) -> (ParamStore, DecoderNet) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let emb = EmbeddingTable::new(&mut store, "emb", vocab, 3, Group::Decoder, &mut rng).unwrap();
        let dec = DecoderNet::new(&mut store, emb, 4, 3, &mut rng).unwrap();
        (store, dec)
    }

    fn zero_out(store: &mut ParamStore, dec: &DecoderNet) {
        for id in [dec.out.w, dec.out.b] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    fn run(store: &ParamStore, dec: &DecoderNet, framed: &Padded, wd: f64, seed: u64) -> (f64, Vec<usize>) {
        let mut g = Graph::inference();
        let ctx = g.constant(Tensor::full(&[framed.rows, 4], 0.3));
        let mut rng = Rng::new(seed);
        let tf = dec.teacher_forced(&mut g, store, ctx, framed, wd, &mut rng).unwrap();
        (g.value(tf.loss).item(), tf.inputs)
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (mut store, dec) = setup(8, 1);
        zero_out(&mut store, &dec);
        let framed = Padded::from_seqs(&[vec![BOS, 5, 6, EOS], vec![BOS, 7, EOS]]);
        let (loss, _) = run(&store, &dec, &framed, 0.0, 0);
        assert!((loss - 8f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn word_dropout_extremes() {
        let (store, dec) = setup(8, 2);
        let framed = Padded::from_seqs(&[vec![BOS, 5, 6, 4, EOS], vec![BOS, 7, EOS]]);
        let (_, gold) = run(&store, &dec, &framed, 0.0, 3);
        // Time-major: row 0 feeds BOS 5 6 4, row 1 feeds BOS 7 then pads.
        assert_eq!(gold, vec![BOS, BOS, 5, 7, 6, EOS, 4, PAD]);
        let (_, all_unk) = run(&store, &dec, &framed, 1.0, 3);
        assert_eq!(all_unk, vec![BOS, BOS, UNK, UNK, UNK, EOS, UNK, PAD]);
    }

    #[test]
    fn framing_and_rate_are_checked() {
        let (store, dec) = setup(8, 3);
        let mut g = Graph::inference();
        let ctx = g.constant(Tensor::zeros(&[1, 4]));
        let mut rng = Rng::new(0);
        let unframed = Padded::from_seqs(&[vec![5, 6]]);
        assert!(dec.teacher_forced(&mut g, &store, ctx, &unframed, 0.0, &mut rng).is_err());
        let framed = Padded::from_seqs(&[vec![BOS, 5, EOS]]);
        assert!(dec.teacher_forced(&mut g, &store, ctx, &framed, 1.5, &mut rng).is_err());
    }

    #[test]
    fn padding_does_not_change_loss_or_gradients() {
        let (mut store, dec) = setup(8, 4);
        let short = Padded::from_seqs(&[vec![BOS, 5, EOS]]);
        let (alone, _) = run(&store, &dec, &short, 0.0, 0);
        let both = Padded::from_seqs(&[vec![BOS, 5, EOS], vec![BOS, 6, 7, 4, 5, EOS]]);
        let mut g = Graph::new();
        let ctx = g.constant(Tensor::full(&[2, 4], 0.3));
        let tf = dec.teacher_forced(&mut g, &store, ctx, &both, 0.0, &mut Rng::new(0)).unwrap();
        let row_losses: f64 = {
            let (other, _) = run(&store, &dec, &Padded::from_seqs(&[vec![BOS, 6, 7, 4, 5, EOS]]), 0.0, 0);
            (alone + other) / 2.0
        };
        assert!((g.value(tf.loss).item() - row_losses).abs() < 1e-12);
        g.backward(tf.loss, &mut store).unwrap();
        assert!(store.grad(dec.out.b).is_finite());
    }

    #[test]
    fn decoder_gradients() {
        let (mut store, dec) = setup(7, 5);
        let framed = Padded::from_seqs(&[vec![BOS, 5, 6, EOS], vec![BOS, 4, EOS]]);
        let ctx = Tensor::randn(&[2, 4], &mut Rng::new(9));
        let err = grad_check(
            |g, s| {
                let c = g.constant(ctx.clone());
                Ok(dec.teacher_forced(g, s, c, &framed, 0.0, &mut Rng::new(1))?.loss)
            },
            &mut store,
            1e-5,
            &mut Rng::new(2),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn stepper_matches_teacher_forcing() {
        let (store, dec) = setup(8, 6);
        let framed = Padded::from_seqs(&[vec![BOS, 5, 6, EOS]]);
        let ctx = Tensor::full(&[1, 4], 0.3);
        let mut g = Graph::inference();
        let c = g.constant(ctx.clone());
        let tf = dec.teacher_forced(&mut g, &store, c, &framed, 0.0, &mut Rng::new(0)).unwrap();
        let logits = g.value(tf.logits).clone();
        let stepper = dec.stepper(&store);
        let mut states = dec.start_states(&store, &ctx).unwrap();
        for (t, &tok) in framed.row(0)[..3].iter().enumerate() {
            let (logp, next) = stepper.step(&states, &[tok]).unwrap();
            let expected = log_softmax(logits.row(t));
            for (a, b) in logp[0].iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
            states = next;
        }
    }

    #[test]
    fn gru_cell_reference() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        let cell = GruLayer::new(&mut store, "c", 3, 2, Group::Decoder, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 3], &mut rng);
        let h = Tensor::randn(&[2, 2], &mut rng);
        let err = grad_check(
            |g, s| {
                let (xv, hv) = (g.constant(x.clone()), g.constant(h.clone()));
                let out = cell.cell(g, s, xv, hv)?;
                let sq = g.mul(out, out)?;
                Ok(g.sum(sq))
            },
            &mut store,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");

        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut g = Graph::inference();
        let (xv, hv) = (g.constant(x.clone()), g.constant(h.clone()));
        let out = cell.cell(&mut g, &store, xv, hv).unwrap();
        // z = 0.5 and a zero candidate: the state halves.
        for (a, b) in g.value(out).data().iter().zip(h.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(cell.cell(&mut g, &store, xv, bad).is_err());
    }
}
