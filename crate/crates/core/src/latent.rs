//! Latent-variable pieces: Gaussian heads, reparameterization, the
//! closed-form diagonal-Gaussian KL and the auxiliary losses.

use serde::{Deserialize, Serialize};

use crate::corpus::Padded;
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamStore, Tensor, Var};
use crate::seqnn::Affine;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Diagonal Gaussian as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// Diagonal Gaussian as graph nodes (`B × d` each).
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianVars {
    pub fn constant(g: &mut Graph, p: &GaussianParams) -> Self {
        Self {
            mu: g.constant(p.mu.clone()),
            logvar: g.constant(p.logvar.clone()),
        }
    }

    pub fn values(&self, g: &Graph) -> GaussianParams {
        GaussianParams {
            mu: g.value(self.mu).clone(),
            logvar: g.value(self.logvar).clone(),
        }
    }
}

/// Affine map of `input` to `(mu, logvar)` with logvar clamped to
/// `[LOGVAR_MIN, LOGVAR_MAX]`.
pub fn gaussian_head(g: &mut Graph, store: &ParamStore, head: &Affine, input: Var) -> Result<GaussianVars> {
    if !head.out_dim.is_multiple_of(2) {
        return Err(Error::Contract("gaussian head needs an even output width".into()));
    }
    let d = head.out_dim / 2;
    let out = head.forward(g, store, input)?;
    let mu = g.slice_cols(out, 0, d)?;
    let raw = g.slice_cols(out, d, 2 * d)?;
    let logvar = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
    Ok(GaussianVars { mu, logvar })
}

/// `z = mu + exp(logvar / 2) ⊙ eps`.
pub fn reparameterize(g: &mut Graph, q: &GaussianVars, eps: Var) -> Result<Var> {
    if g.value(eps).shape() != g.value(q.mu).shape() {
        return Err(Error::Shape {
            op: "reparameterize",
            left: g.value(q.mu).shape().to_vec(),
            right: g.value(eps).shape().to_vec(),
        });
    }
    let half = g.scale(q.logvar, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(q.mu, noise)
}

/// `KL(q ‖ p)` summed over latent dimensions and averaged over rows:
/// `½ Σ [log σp² − log σq² + (σq² + (μq − μp)²) / σp² − 1]`.
pub fn kl_diag_gaussian(g: &mut Graph, q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
    let rows = g.value(q.mu).rows() as f64;
    let lv_diff = g.sub(p.logvar, q.logvar)?;
    let dmu = g.sub(q.mu, p.mu)?;
    let dmu2 = g.mul(dmu, dmu)?;
    let q_var = g.exp(q.logvar);
    let num = g.add(q_var, dmu2)?;
    let neg_lvp = g.scale(p.logvar, -1.0);
    let inv_p = g.exp(neg_lvp);
    let ratio = g.mul(num, inv_p)?;
    let t = g.add(lv_diff, ratio)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.sum(t);
    Ok(g.scale(s, 0.5 / rows))
}

/// Per-row KL values of plain Gaussians.
pub fn kl_rows(q: &GaussianParams, p: &GaussianParams) -> Result<Vec<f64>> {
    if q.mu.shape() != p.mu.shape() || q.logvar.shape() != p.logvar.shape() || q.mu.shape() != q.logvar.shape() {
        return Err(Error::Shape {
            op: "kl_diag_gaussian",
            left: q.mu.shape().to_vec(),
            right: p.mu.shape().to_vec(),
        });
    }
    let d = q.mu.cols();
    Ok((0..q.mu.rows())
        .map(|r| {
            (0..d)
                .map(|j| {
                    let (mq, lq) = (q.mu.row(r)[j], q.logvar.row(r)[j]);
                    let (mp, lp) = (p.mu.row(r)[j], p.logvar.row(r)[j]);
                    0.5 * (lp - lq + (lq.exp() + (mq - mp).powi(2)) / lp.exp() - 1.0)
                })
                .sum()
        })
        .collect())
}

/// Squared distance between each latent sample and its label, averaged over
/// rows. The label is detached: no gradient reaches the labeling network.
pub fn expressiveness_loss(g: &mut Graph, z: Var, z_label: Var) -> Result<Var> {
    let rows = g.value(z).rows() as f64;
    let label = g.detach(z_label);
    let diff = g.sub(z, label)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / rows))
}

/// Bag-of-words loss: logits from `concat(z, c_enc)` scored against every
/// content token of the target, averaged per target and then over rows.
pub fn bow_loss(
    g: &mut Graph,
    store: &ParamStore,
    head: &Affine,
    z: Var,
    c_enc: Var,
    target: &Padded,
) -> Result<Var> {
    if target.lens.contains(&0) {
        return Err(Error::Contract("bag-of-words loss needs non-empty targets".into()));
    }
    let input = g.concat_cols(&[z, c_enc])?;
    let logits = head.forward(g, store, input)?;
    let rows = target.rows;
    let mut row_ids = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for r in 0..rows {
        let toks = target.row(r);
        for &t in toks {
            row_ids.push(r);
            targets.push(t);
            weights.push(1.0 / (toks.len() as f64 * rows as f64));
        }
    }
    let expanded = g.gather(logits, &row_ids)?;
    g.softmax_xent(expanded, &targets, &weights)
}

/// Deterministic latent label from the labeling network's encodings.
pub fn labeling_forward(g: &mut Graph, store: &ParamStore, head: &Affine, x_enc: Var, c_enc: Var) -> Result<Var> {
    let input = g.concat_cols(&[x_enc, c_enc])?;
    head.forward(g, store, input)
}

/// Loss components of one CVAE-phase batch with their schedule weights.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub exp: f64,
    pub bow: f64,
    pub kla_weight: f64,
    pub lambda_weight: f64,
    pub total: f64,
}

/// `total = recon + kla·kl + λ·exp + bow`.
pub fn slcvae_loss(recon: f64, kl: f64, exp: f64, bow: f64, kla_weight: f64, lambda_weight: f64) -> LossBreakdown {
    LossBreakdown {
        recon,
        kl,
        exp,
        bow,
        kla_weight,
        lambda_weight,
        total: recon + kla_weight * kl + lambda_weight * exp + bow,
    }
}

/// Graph-level counterpart of [`slcvae_loss`]; absent terms count as zero.
pub fn combine_losses(
    g: &mut Graph,
    recon: Var,
    kl: Option<Var>,
    exp: Option<Var>,
    bow: Option<Var>,
    kla_weight: f64,
    lambda_weight: f64,
) -> Result<Var> {
    let mut total = recon;
    if let Some(kl) = kl {
        let w = g.scale(kl, kla_weight);
        total = g.add(total, w)?;
    }
    if let Some(exp) = exp {
        let w = g.scale(exp, lambda_weight);
        total = g.add(total, w)?;
    }
    if let Some(bow) = bow {
        total = g.add(total, bow)?;
    }
    Ok(total)
}
