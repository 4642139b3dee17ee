//! The complete network for each training mode and its forward passes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Padded};
use crate::error::{Error, Result};
use crate::latent::{
    bow_loss, combine_losses, expressiveness_loss, gaussian_head, kl_diag_gaussian, kl_rows, labeling_forward,
    reparameterize, slcvae_loss, GaussianParams, GaussianVars, LossBreakdown,
};
use crate::numeric::{Graph, Group, ParamStore, Rng, Tensor, Var};
use crate::seqnn::{Affine, BiEncoder, DecoderNet, EmbeddingTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Seq2seq,
    Cvae,
    CvaeBow,
    Slcvae,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Seq2seq, Mode::Cvae, Mode::CvaeBow, Mode::Slcvae];

    pub fn has_latent(self) -> bool {
        self != Mode::Seq2seq
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Seq2seq => "seq2seq",
            Mode::Cvae => "cvae",
            Mode::CvaeBow => "cvae-bow",
            Mode::Slcvae => "slcvae",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode '{s}' (expected seq2seq, cvae, cvae-bow or slcvae)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub vocab_size: usize,
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 || self.embed == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::Contract(format!("invalid model dimensions {self:?}")));
        }
        Ok(())
    }

    /// Width of the decoder conditioning vector.
    pub fn context_dim(&self) -> usize {
        2 * self.hidden + if self.mode.has_latent() { self.latent } else { 0 }
    }
}

/// The labeling network: its own embedding, source and target encoders and
/// a deterministic head producing latent labels.
#[derive(Clone, Debug)]
pub struct LabelingNet {
    pub embed: EmbeddingTable,
    pub src: BiEncoder,
    pub tgt: BiEncoder,
    pub head: Affine,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: EmbeddingTable,
    pub src_enc: BiEncoder,
    pub tgt_enc: Option<BiEncoder>,
    pub rnet: Option<Affine>,
    pub pnet: Option<Affine>,
    pub decoder: DecoderNet,
    pub bow: Option<Affine>,
    pub labeling: Option<LabelingNet>,
}

/// Graph nodes of one CVAE-phase forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CvaeForward {
    pub recon: Var,
    pub kl: Option<Var>,
    pub exp: Option<Var>,
    pub bow: Option<Var>,
    pub total: Var,
    pub kla_weight: f64,
    pub lambda_weight: f64,
}

impl CvaeForward {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        slcvae_loss(
            g.value(self.recon).item(),
            val(self.kl),
            val(self.exp),
            val(self.bow),
            self.kla_weight,
            self.lambda_weight,
        )
    }
}

impl Model {
    /// Builds every network of `config.mode`, drawing initial values from
    /// `rng` in a fixed order.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            mode,
            vocab_size,
            embed,
            hidden,
            latent,
        } = config;
        let mut store = ParamStore::new();
        let s = &mut store;
        let emb = EmbeddingTable::new(s, "embed", vocab_size, embed, Group::Decoder, rng)?;
        let src_enc = BiEncoder::new(s, "enc.src", embed, hidden, Group::Recognition, rng)?;
        let (tgt_enc, rnet, pnet) = if mode.has_latent() {
            (
                Some(BiEncoder::new(s, "enc.tgt", embed, hidden, Group::Recognition, rng)?),
                Some(Affine::new(s, "rnet", 4 * hidden, 2 * latent, Group::Recognition, rng)?),
                Some(Affine::new(s, "pnet", 2 * hidden, 2 * latent, Group::Prior, rng)?),
            )
        } else {
            (None, None, None)
        };
        let decoder = DecoderNet::new(s, emb.clone(), config.context_dim(), hidden, rng)?;
        let bow = if mode == Mode::CvaeBow {
            Some(Affine::new(s, "bow", latent + 2 * hidden, vocab_size, Group::Decoder, rng)?)
        } else {
            None
        };
        let labeling = if mode == Mode::Slcvae {
            let g = Group::Labeling;
            Some(LabelingNet {
                embed: EmbeddingTable::new(s, "label.embed", vocab_size, embed, g, rng)?,
                src: BiEncoder::new(s, "label.src", embed, hidden, g, rng)?,
                tgt: BiEncoder::new(s, "label.tgt", embed, hidden, g, rng)?,
                head: Affine::new(s, "label.head", 4 * hidden, latent, g, rng)?,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            embed: emb,
            src_enc,
            tgt_enc,
            rnet,
            pnet,
            decoder,
            bow,
            labeling,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    fn latent_parts(&self) -> Result<(&BiEncoder, &Affine, &Affine)> {
        match (&self.tgt_enc, &self.rnet, &self.pnet) {
            (Some(t), Some(r), Some(p)) => Ok((t, r, p)),
            _ => Err(Error::Contract(format!("mode {} has no latent variable", self.mode()))),
        }
    }

    pub fn encode_source(&self, g: &mut Graph, source: &Padded) -> Result<Var> {
        self.src_enc.encode(g, &self.store, &self.embed, source)
    }

    pub fn encode_target(&self, g: &mut Graph, target: &Padded) -> Result<Var> {
        let (tgt, _, _) = self.latent_parts()?;
        tgt.encode(g, &self.store, &self.embed, target)
    }

    /// Approximate posterior `q(z | x, c)`.
    pub fn recognition(&self, g: &mut Graph, x_enc: Var, c_enc: Var) -> Result<GaussianVars> {
        let (_, rnet, _) = self.latent_parts()?;
        let input = g.concat_cols(&[x_enc, c_enc])?;
        gaussian_head(g, &self.store, rnet, input)
    }

    /// Conditional prior `p(z | c)`.
    pub fn prior(&self, g: &mut Graph, c_enc: Var) -> Result<GaussianVars> {
        let (_, _, pnet) = self.latent_parts()?;
        gaussian_head(g, &self.store, pnet, c_enc)
    }

    /// Latent labels from the labeling network's own encoders.
    pub fn label(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let lab = self
            .labeling
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("mode {} has no labeling network", self.mode())))?;
        let x = lab.tgt.encode(g, &self.store, &lab.embed, &batch.target)?;
        let c = lab.src.encode(g, &self.store, &lab.embed, &batch.source)?;
        labeling_forward(g, &self.store, &lab.head, x, c)
    }

    /// Loss of the CVAE phase. Noise for the latent sample is drawn from
    /// `rng` before any word-dropout draws.
    pub fn cvae_forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        kla_weight: f64,
        lambda_weight: f64,
        wd_rate: f64,
        rng: &mut Rng,
    ) -> Result<CvaeForward> {
        let mode = self.mode();
        let c_enc = self.encode_source(g, &batch.source)?;
        let (context, kl, exp, bow) = if mode.has_latent() {
            let x_enc = self.encode_target(g, &batch.target)?;
            let q = self.recognition(g, x_enc, c_enc)?;
            let p = self.prior(g, c_enc)?;
            let eps = g.constant(Tensor::randn(&[batch.len(), self.config.latent], rng));
            let z = reparameterize(g, &q, eps)?;
            let kl = kl_diag_gaussian(g, &q, &p)?;
            let exp = if mode == Mode::Slcvae {
                let z_label = self.label(g, batch)?;
                Some(expressiveness_loss(g, z, z_label)?)
            } else {
                None
            };
            let bow = match &self.bow {
                Some(head) => Some(bow_loss(g, &self.store, head, z, c_enc, &batch.target)?),
                None => None,
            };
            (g.concat_cols(&[c_enc, z])?, Some(kl), exp, bow)
        } else {
            (c_enc, None, None, None)
        };
        let recon = self
            .decoder
            .teacher_forced(g, &self.store, context, &batch.framed, wd_rate, rng)?
            .loss;
        let total = combine_losses(g, recon, kl, exp, bow, kla_weight, lambda_weight)?;
        Ok(CvaeForward {
            recon,
            kl,
            exp,
            bow,
            total,
            kla_weight,
            lambda_weight,
        })
    }

    /// Reconstruction loss of the targets when the decoder is conditioned on
    /// the labeling network's output instead of a posterior sample.
    pub fn labeling_loss(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let z_label = self.label(g, batch)?;
        let c_enc = self.encode_source(g, &batch.source)?;
        let context = g.concat_cols(&[c_enc, z_label])?;
        let mut unused = Rng::new(0);
        Ok(self
            .decoder
            .teacher_forced(g, &self.store, context, &batch.framed, 0.0, &mut unused)?
            .loss)
    }

    /// Posterior and prior parameters for every pair in the batch.
    pub fn posterior_and_prior(&self, batch: &Batch) -> Result<(GaussianParams, GaussianParams)> {
        let mut g = Graph::inference();
        let c_enc = self.encode_source(&mut g, &batch.source)?;
        let x_enc = self.encode_target(&mut g, &batch.target)?;
        let q = self.recognition(&mut g, x_enc, c_enc)?;
        let p = self.prior(&mut g, c_enc)?;
        Ok((q.values(&g), p.values(&g)))
    }

    /// `KL(q(z|x,c) ‖ p(z|c))` of every pair in the batch.
    pub fn kl_per_pair(&self, batch: &Batch) -> Result<Vec<f64>> {
        let (q, p) = self.posterior_and_prior(batch)?;
        kl_rows(&q, &p)
    }

    /// Source summaries (`rows × 2H`).
    pub fn source_summaries(&self, sources: &Padded) -> Result<Tensor> {
        let mut g = Graph::inference();
        let v = self.encode_source(&mut g, sources)?;
        Ok(g.value(v).clone())
    }

    /// `n` decoder contexts for one source summary. Latent modes append a
    /// prior sample per context; `sigma > 0` adds Gaussian noise to the
    /// summary first.
    pub fn contexts(&self, c_enc: &[f64], n: usize, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
        if sigma < 0.0 {
            return Err(Error::Contract(format!("noise sigma must be non-negative, got {sigma}")));
        }
        let width = c_enc.len();
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row: Vec<f64> = c_enc.to_vec();
            if sigma > 0.0 {
                for x in row.iter_mut() {
                    *x += sigma * rng.normal();
                }
            }
            rows.push(row);
        }
        let summaries = Tensor::matrix(n, width, rows.concat())?;
        if !self.mode().has_latent() {
            return Ok(summaries);
        }
        let mut g = Graph::inference();
        let c = g.constant(summaries.clone());
        let p = self.prior(&mut g, c)?;
        let eps = g.constant(Tensor::randn(&[n, self.config.latent], rng));
        let z = reparameterize(&mut g, &p, eps)?;
        let joined = g.concat_cols(&[c, z])?;
        Ok(g.value(joined).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Pair;
    use crate::numeric::{grad_check_where, Phase};

    pub(crate) fn tiny(mode: Mode, seed: u64) -> Model {
        let cfg = ModelConfig {
            mode,
            vocab_size: 9,
            embed: 3,
            hidden: 2,
            latent: 2,
        };
        Model::new(cfg, &mut Rng::new(seed)).unwrap()
    }

    pub(crate) fn tiny_batch() -> Batch {
        Batch::from_pairs(&[
            Pair {
                source: vec![4, 5, 6],
                target: vec![7, 8],
            },
            Pair {
                source: vec![5, 4],
                target: vec![6, 4, 8],
            },
        ])
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("vae".parse::<Mode>().is_err());
    }

    #[test]
    fn parameter_sets_follow_mode() {
        let names = |m: &Model| m.store.iter().map(|(_, p)| p.name.clone()).collect::<Vec<_>>();
        let s2s = names(&tiny(Mode::Seq2seq, 1));
        assert!(!s2s.iter().any(|n| n.starts_with("rnet") || n.starts_with("label")));
        let sl = names(&tiny(Mode::Slcvae, 1));
        assert!(sl.iter().any(|n| n == "label.head.w"));
        assert!(!sl.iter().any(|n| n.starts_with("bow")));
        assert!(names(&tiny(Mode::CvaeBow, 1)).iter().any(|n| n == "bow.w"));
        let a = tiny(Mode::Slcvae, 3);
        let b = tiny(Mode::Slcvae, 3);
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert!(p.value.bit_eq(&q.value));
        }
    }

    #[test]
    fn zero_heads_give_standard_normals() {
        let mut m = tiny(Mode::Cvae, 2);
        for id in [m.rnet.as_ref().unwrap().w, m.rnet.as_ref().unwrap().b, m.pnet.as_ref().unwrap().w, m.pnet.as_ref().unwrap().b] {
            m.store.get_mut(id).value.data_mut().fill(0.0);
        }
        let (q, p) = m.posterior_and_prior(&tiny_batch()).unwrap();
        for t in [&q.mu, &q.logvar, &p.mu, &p.logvar] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
        assert_eq!(m.kl_per_pair(&tiny_batch()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn priors_depend_on_source() {
        let m = tiny(Mode::Cvae, 4);
        let mut g = Graph::inference();
        let c = g.constant(Tensor::matrix(2, 4, vec![0.1, -0.4, 0.3, 0.9, -0.7, 0.2, 0.5, -0.1]).unwrap());
        let p = m.prior(&mut g, c).unwrap().values(&g);
        assert_ne!(p.mu.row(0), p.mu.row(1));
    }

    #[test]
    fn seq2seq_has_no_latent() {
        let m = tiny(Mode::Seq2seq, 5);
        assert!(matches!(m.kl_per_pair(&tiny_batch()), Err(Error::Contract(_))));
        let mut g = Graph::inference();
        let f = m.cvae_forward(&mut g, &tiny_batch(), 1.0, 1.0, 0.0, &mut Rng::new(0)).unwrap();
        assert!(f.kl.is_none() && f.exp.is_none() && f.bow.is_none());
        assert_eq!(g.value(f.total).item(), g.value(f.recon).item());
    }

    #[test]
    fn loss_reduces_to_negative_elbo() {
        // With λ = 0, kla = 1 and no bag-of-words term the total is exactly
        // reconstruction plus KL, computed here independently.
        let m = tiny(Mode::Slcvae, 6);
        let batch = tiny_batch();
        let mut g = Graph::inference();
        let f = m.cvae_forward(&mut g, &batch, 1.0, 0.0, 0.0, &mut Rng::new(3)).unwrap();
        let b = f.breakdown(&g);
        let (q, p) = m.posterior_and_prior(&batch).unwrap();
        let kl = kl_rows(&q, &p).unwrap();
        let kl_mean = kl.iter().sum::<f64>() / kl.len() as f64;
        assert!((b.kl - kl_mean).abs() < 1e-12);
        assert_eq!(g.value(f.total).item(), b.recon + b.kl);
        assert!((b.total - g.value(f.total).item()).abs() < 1e-12);
    }

    #[test]
    fn uniform_decoder_labeling_loss_is_log_vocab() {
        let mut m = tiny(Mode::Slcvae, 7);
        for id in [m.decoder.out.w, m.decoder.out.b] {
            m.store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut g = Graph::inference();
        let l = m.labeling_loss(&mut g, &tiny_batch()).unwrap();
        assert!((g.value(l).item() - 9f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn contexts_shapes_and_noise() {
        let m = tiny(Mode::Cvae, 8);
        let c = vec![0.1, 0.2, 0.3, 0.4];
        let t = m.contexts(&c, 3, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(t.shape(), &[3, 6]);
        assert_ne!(t.row(0)[4..], t.row(1)[4..]);
        assert_eq!(&t.row(2)[..4], c.as_slice());
        let s = tiny(Mode::Seq2seq, 8);
        let plain = s.contexts(&c, 2, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(plain.row(0), plain.row(1));
        let noisy = s.contexts(&c, 2, 0.5, &mut Rng::new(1)).unwrap();
        assert_ne!(noisy.row(0), noisy.row(1));
        assert!(s.contexts(&c, 2, -1.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn full_loss_gradients() {
        for mode in Mode::ALL {
            let mut m = tiny(mode, 9);
            let batch = tiny_batch();
            let mut store = std::mem::take(&mut m.store);
            let err = grad_check_where(
                |g, s| {
                    m.store = s.clone();
                    Ok(m.cvae_forward(g, &batch, 0.7, 0.5, 0.0, &mut Rng::new(11))?.total)
                },
                &mut store,
                1e-5,
                |p| p.group.phase() == Phase::Cvae,
                &mut Rng::new(1),
            )
            .unwrap();
            assert!(err < 1e-3, "{mode}: {err}");
        }
    }

    #[test]
    fn labeling_loss_gradients() {
        let mut m = tiny(Mode::Slcvae, 10);
        let batch = tiny_batch();
        let mut store = std::mem::take(&mut m.store);
        let err = grad_check_where(
            |g, s| {
                m.store = s.clone();
                m.labeling_loss(g, &batch)
            },
            &mut store,
            1e-5,
            |p| p.group == Group::Labeling,
            &mut Rng::new(2),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
