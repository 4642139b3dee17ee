//! Finite-difference gradient suites over every elementary op, one GRU cell
//! and the complete training losses.

use serde::Serialize;

use crate::corpus::{Batch, Pair};
use crate::error::Result;
use crate::latent::kl_diag_gaussian;
use crate::model::{Mode, Model, ModelConfig};
use crate::numeric::{grad_check, grad_check_where, Graph, Group, ParamStore, Phase, Rng, Tensor, Var};
use crate::seqnn::GruLayer;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// (name, input shapes, op). Inputs are drawn away from non-differentiable points.
fn elementary_ops() -> Vec<(&'static str, Vec<[usize; 2]>, OpFn)> {
    vec![
        ("matmul", vec![[3, 4], [4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("add", vec![[3, 4], [3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![[3, 4], [3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![[3, 4], [3, 4]], |g, v| g.mul(v[0], v[1])),
        ("add_row", vec![[3, 4], [1, 4]], |g, v| g.add_row(v[0], v[1])),
        ("scale", vec![[3, 4]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_scalar", vec![[3, 4]], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        ("sigmoid", vec![[3, 4]], |g, v| Ok(g.sigmoid(v[0]))),
        ("tanh", vec![[3, 4]], |g, v| Ok(g.tanh(v[0]))),
        ("exp", vec![[3, 4]], |g, v| Ok(g.exp(v[0]))),
        ("relu", vec![[3, 4]], |g, v| Ok(g.relu(v[0]))),
        ("clamp", vec![[3, 4]], |g, v| Ok(g.clamp(v[0], -0.5, 0.5))),
        ("concat_cols", vec![[3, 2], [3, 3]], |g, v| g.concat_cols(&[v[0], v[1]])),
        ("slice_cols", vec![[3, 5]], |g, v| g.slice_cols(v[0], 1, 4)),
        ("concat_rows", vec![[2, 3], [3, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("slice_rows", vec![[5, 3]], |g, v| g.slice_rows(v[0], 1, 3)),
        ("gather", vec![[4, 3]], |g, v| g.gather(v[0], &[2, 0, 2, 3])),
        ("select_rows", vec![[3, 2], [3, 2]], |g, v| g.select_rows(&[true, false, true], v[0], v[1])),
        ("softmax_xent", vec![[3, 5]], |g, v| g.softmax_xent(v[0], &[1, 4, 0], &[0.5, 0.0, 0.25])),
        ("sum", vec![[3, 4]], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![[3, 4]], |g, v| Ok(g.mean(v[0]))),
    ]
}

/// Values with magnitude in [0.1, 1.5] and either sign, so no input sits
/// within the finite-difference step of a kink.
fn away_from_kinks(shape: [usize; 2], rng: &mut Rng) -> Tensor {
    let data = (0..shape[0] * shape[1])
        .map(|_| {
            let m = 0.1 + 1.4 * rng.uniform();
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Worst error of each elementary op under a random linear read-out.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for (name, shapes, op) in elementary_ops() {
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, &s)| store.add(format!("x{i}"), away_from_kinks(s, &mut rng), Group::Decoder))
            .collect::<Result<Vec<_>>>()?;
        // Probe the output shape once to draw read-out weights.
        let mut probe = Graph::inference();
        let vars: Vec<Var> = ids.iter().map(|&id| probe.param(&store, id)).collect();
        let y = op(&mut probe, &vars)?;
        let w = Tensor::randn(probe.value(y).shape(), &mut rng);
        let worst = grad_check(
            |g, s| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let y = op(g, &vars)?;
                let wv = g.constant(w.clone());
                let prod = g.mul(y, wv)?;
                Ok(g.sum(prod))
            },
            &mut store,
            EPS,
            &mut rng,
        )?;
        out.push(SuiteResult {
            name: format!("op {name}"),
            worst,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(out)
}

/// One GRU cell step under a random linear read-out.
pub fn gru_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let cell = GruLayer::new(&mut store, "cell", 4, 3, Group::Decoder, &mut rng)?;
    let x = store.add("x", Tensor::randn(&[2, 4], &mut rng), Group::Decoder)?;
    let h = store.add("h", Tensor::randn(&[2, 3], &mut rng), Group::Decoder)?;
    let w = Tensor::randn(&[2, 3], &mut rng);
    let worst = grad_check(
        |g, s| {
            let (xv, hv) = (g.param(s, x), g.param(s, h));
            let out = cell.cell(g, s, xv, hv)?;
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv)?;
            Ok(g.sum(prod))
        },
        &mut store,
        EPS,
        &mut rng,
    )?;
    Ok(SuiteResult {
        name: "gru cell".into(),
        worst,
        tolerance: OP_TOLERANCE,
    })
}

pub fn tiny_model(mode: Mode, seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        mode,
        vocab_size: 10,
        embed: 4,
        hidden: 3,
        latent: 2,
    };
    Model::new(cfg, &mut Rng::new(seed))
}

pub fn tiny_batch() -> Batch {
    Batch::from_pairs(&[
        Pair {
            source: vec![4, 5, 6, 7],
            target: vec![8, 9, 4],
        },
        Pair {
            source: vec![6, 9],
            target: vec![5, 7],
        },
        Pair {
            source: vec![7, 4, 8],
            target: vec![9],
        },
    ])
}

/// The complete CVAE-phase loss of each mode on a tiny batch. Latent noise
/// and word dropout come from a generator reseeded for every evaluation, so
/// the loss is a deterministic function of the parameters. Only parameters
/// trained in that phase are checked: the labeling network feeds the
/// expressiveness term through a detached label.
pub fn loss_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let batch = tiny_batch();
    let mut out = Vec::new();
    for mode in Mode::ALL {
        let mut model = tiny_model(mode, seed)?;
        let mut store = std::mem::take(&mut model.store);
        let worst = grad_check_where(
            |g, s| {
                model.store = s.clone();
                Ok(model.cvae_forward(g, &batch, 0.8, 0.6, 0.3, &mut Rng::new(seed ^ 0x5eed))?.total)
            },
            &mut store,
            EPS,
            |p| p.group.phase() == Phase::Cvae,
            &mut Rng::new(seed),
        )?;
        out.push(SuiteResult {
            name: format!("{mode} loss"),
            worst,
            tolerance: LOSS_TOLERANCE,
        });
    }

    let mut model = tiny_model(Mode::Slcvae, seed)?;
    let mut store = std::mem::take(&mut model.store);
    let worst = grad_check_where(
        |g, s| {
            model.store = s.clone();
            model.labeling_loss(g, &batch)
        },
        &mut store,
        EPS,
        |p| p.group == Group::Labeling,
        &mut Rng::new(seed),
    )?;
    out.push(SuiteResult {
        name: "labeling loss".into(),
        worst,
        tolerance: OP_TOLERANCE,
    });

    let mut model = tiny_model(Mode::Cvae, seed)?;
    let mut store = std::mem::take(&mut model.store);
    let worst = grad_check_where(
        |g, s| {
            model.store = s.clone();
            let c = model.encode_source(g, &batch.source)?;
            let x = model.encode_target(g, &batch.target)?;
            let q = model.recognition(g, x, c)?;
            let p = model.prior(g, c)?;
            kl_diag_gaussian(g, &q, &p)
        },
        &mut store,
        EPS,
        |p| p.group == Group::Recognition || p.group == Group::Prior,
        &mut Rng::new(seed),
    )?;
    out.push(SuiteResult {
        name: "recognition and prior through KL".into(),
        worst,
        tolerance: OP_TOLERANCE,
    });
    Ok(out)
}

/// Every suite in a fixed order.
pub fn all_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = op_suite(seed)?;
    out.push(gru_suite(seed)?);
    out.extend(loss_suite(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for r in all_suites(3).unwrap() {
            assert!(r.passed(), "{} {}", r.name, r.worst);
        }
    }
}
