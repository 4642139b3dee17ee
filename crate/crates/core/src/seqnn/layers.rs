use crate::error::{Error, Result};
use crate::numeric::{Graph, Group, ParamId, ParamStore, Rng, Tensor, Var};

/// Fully connected layer `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: Group,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[in_dim, out_dim], bound, rng), group)?;
        let b = store.add(format!("{name}.b"), Tensor::uniform(&[out_dim], bound, rng), group)?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// Token embedding table `V × E`.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        dim: usize,
        group: Group,
        rng: &mut Rng,
    ) -> Result<Self> {
        let table = store.add(name, Tensor::randn(&[vocab_size, dim], rng), group)?;
        Ok(Self {
            table,
            vocab_size,
            dim,
        })
    }

    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.gather(t, ids)
    }
}

/// One GRU layer. Gate blocks are packed along columns in the order
/// (update z, reset r, candidate):
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// h̃  = tanh(x·Wh + (r ⊙ h)·Uh + bh)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Debug)]
pub struct GruLayer {
    /// `in × 3H`
    pub wx: ParamId,
    /// `H × 2H` (update and reset recurrences)
    pub uzr: ParamId,
    /// `H × H`
    pub uh: ParamId,
    /// `3H`
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        group: Group,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let wx = store.add(format!("{name}.wx"), Tensor::uniform(&[in_dim, 3 * hidden], bound, rng), group)?;
        let uzr = store.add(format!("{name}.uzr"), Tensor::uniform(&[hidden, 2 * hidden], bound, rng), group)?;
        let uh = store.add(format!("{name}.uh"), Tensor::uniform(&[hidden, hidden], bound, rng), group)?;
        let b = store.add(format!("{name}.b"), Tensor::uniform(&[3 * hidden], bound, rng), group)?;
        Ok(Self {
            wx,
            uzr,
            uh,
            b,
            in_dim,
            hidden,
        })
    }

    /// `x·Wx + b` for any number of rows.
    pub fn project_input(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.in_dim {
            return Err(Error::Shape {
                op: "gru input",
                left: vec![cols],
                right: vec![self.in_dim],
            });
        }
        let (wx, b) = (g.param(store, self.wx), g.param(store, self.b));
        let xw = g.matmul(x, wx)?;
        g.add_row(xw, b)
    }

    /// One step from an already projected input `xw` (`B × 3H`).
    pub fn step_projected(&self, g: &mut Graph, store: &ParamStore, xw: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        if g.value(h).cols() != hd {
            return Err(Error::Shape {
                op: "gru hidden",
                left: g.value(h).shape().to_vec(),
                right: vec![hd],
            });
        }
        let (uzr, uh) = (g.param(store, self.uzr), g.param(store, self.uh));
        let hu = g.matmul(h, uzr)?;
        let xz = g.slice_cols(xw, 0, hd)?;
        let xr = g.slice_cols(xw, hd, 2 * hd)?;
        let xh = g.slice_cols(xw, 2 * hd, 3 * hd)?;
        let hz = g.slice_cols(hu, 0, hd)?;
        let hr = g.slice_cols(hu, hd, 2 * hd)?;
        let z_pre = g.add(xz, hz)?;
        let z = g.sigmoid(z_pre);
        let r_pre = g.add(xr, hr)?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h)?;
        let rhu = g.matmul(rh, uh)?;
        let c_pre = g.add(xh, rhu)?;
        let cand = g.tanh(c_pre);
        let delta = g.sub(cand, h)?;
        let zd = g.mul(z, delta)?;
        g.add(h, zd)
    }

    /// The full cell: next hidden state from input `x` (`B × in`) and `h` (`B × H`).
    pub fn cell(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        if g.value(x).rows() != g.value(h).rows() {
            return Err(Error::Shape {
                op: "gru_cell",
                left: g.value(x).shape().to_vec(),
                right: g.value(h).shape().to_vec(),
            });
        }
        let xw = self.project_input(g, store, x)?;
        self.step_projected(g, store, xw, h)
    }

    /// Runs over `steps` time steps whose projected inputs are stacked
    /// time-major in `xw_all` (`steps·B × 3H`). Rows where `mask[t][b]` is
    /// false keep their previous state. Returns the state after every step.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xw_all: Var,
        masks: &[Vec<bool>],
        h0: Var,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let batch = g.value(h0).rows();
        let steps = masks.len();
        let mut outs = vec![h0; steps];
        let mut h = h0;
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xw = g.slice_rows(xw_all, t * batch, (t + 1) * batch)?;
            let next = self.step_projected(g, store, xw, h)?;
            h = if masks[t].iter().all(|&m| m) {
                next
            } else {
                g.select_rows(&masks[t], next, h)?
            };
            outs[t] = h;
        }
        Ok(outs)
    }
}

/// A stack of GRU layers; layer `l > 0` reads the states of layer `l − 1`.
#[derive(Clone, Debug)]
pub struct GruStack {
    pub layers: Vec<GruLayer>,
}

impl GruStack {
    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }
}
