//! Token encoder: embedding lookup, affine projection, two-layer BiGRU.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::init;
use crate::training::dropout::{apply_dropout, RunMode};

/// Weights of one GRU direction. Input matrices are `input×hidden`,
/// recurrent matrices `hidden×hidden`; rows are multiplied on the left.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_r: Tensor,
    pub w_z: Tensor,
    pub w_h: Tensor,
    pub u_r: Tensor,
    pub u_z: Tensor,
    pub u_h: Tensor,
    /// Gate biases; `None` reproduces the bias-free gate equations.
    pub b_r: Option<Tensor>,
    pub b_z: Option<Tensor>,
    pub b_h: Option<Tensor>,
}

impl GruParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, bias: bool) -> Self {
        let w = |rng: &mut R| init::uniform(rng, vec![input, hidden], input);
        let u = |rng: &mut R| init::uniform(rng, vec![hidden, hidden], hidden);
        let b = || bias.then(|| init::zeros(vec![hidden]));
        Self {
            w_r: w(rng),
            w_z: w(rng),
            w_h: w(rng),
            u_r: u(rng),
            u_z: u(rng),
            u_h: u(rng),
            b_r: b(),
            b_z: b(),
            b_h: b(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_r.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_r.shape()[0]
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (n, t) in [
            ("W_r", &self.w_r),
            ("W_z", &self.w_z),
            ("W_h", &self.w_h),
            ("U_r", &self.u_r),
            ("U_z", &self.u_z),
            ("U_h", &self.u_h),
        ] {
            out.push((format!("{prefix}.{n}"), t));
        }
        for (n, t) in [("b_r", &self.b_r), ("b_z", &self.b_z), ("b_h", &self.b_h)] {
            if let Some(t) = t {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (n, t) in [
            ("W_r", &mut self.w_r),
            ("W_z", &mut self.w_z),
            ("W_h", &mut self.w_h),
            ("U_r", &mut self.u_r),
            ("U_z", &mut self.u_z),
            ("U_h", &mut self.u_h),
        ] {
            out.push((format!("{prefix}.{n}"), t));
        }
        for (n, t) in [("b_r", &mut self.b_r), ("b_z", &mut self.b_z), ("b_h", &mut self.b_h)] {
            if let Some(t) = t {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
    }

    /// Input projections `x·W_* (+ b_*)` for every row of `x` at once.
    pub fn project_inputs<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Result<[Var; 3], TensorError> {
        let proj = |w: &'p Tensor, b: &'p Option<Tensor>, g: &mut Graph<'p>| {
            let wv = g.leaf(w);
            let p = g.matmul(x, wv)?;
            match b {
                Some(b) => {
                    let bv = g.leaf(b);
                    g.add(p, bv)
                }
                None => Ok(p),
            }
        };
        Ok([
            proj(&self.w_r, &self.b_r, g)?,
            proj(&self.w_z, &self.b_z, g)?,
            proj(&self.w_h, &self.b_h, g)?,
        ])
    }

    /// One update given precomputed input projections:
    ///
    /// ```text
    /// r  = σ(xr + h·U_r)
    /// z  = σ(xz + h·U_z)
    /// h̃  = tanh(xh + r ⊙ (h·U_h))
    /// h' = (1 − z) ⊙ h + z ⊙ h̃
    /// ```
    pub fn step_projected<'p>(
        &'p self,
        g: &mut Graph<'p>,
        [xr, xz, xh]: [Var; 3],
        h_prev: Var,
    ) -> Result<Var, TensorError> {
        let (ur, uz, uh) = (g.leaf(&self.u_r), g.leaf(&self.u_z), g.leaf(&self.u_h));
        let hr = g.matmul(h_prev, ur)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let hz = g.matmul(h_prev, uz)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let hu = g.matmul(h_prev, uh)?;
        let gated = g.mul(r, hu)?;
        let cand = g.add(xh, gated)?;
        let cand = g.tanh(cand)?;
        let keep = g.one_minus(z)?;
        let old = g.mul(keep, h_prev)?;
        let new = g.mul(z, cand)?;
        g.add(old, new)
    }

    /// `h_t = GRU(x_t, h_{t−1})` for a batch of rows: `x` is `n×input`,
    /// `h_prev` is `n×hidden`, rows are independent.
    pub fn step<'p>(&'p self, g: &mut Graph<'p>, x: Var, h_prev: Var) -> Result<Var, TensorError> {
        let s = g.shape(h_prev);
        if s.len() != 2 || s[1] != self.hidden_dim() || g.shape(x).first() != s.first() {
            return Err(TensorError::Shape {
                op: "gru_step",
                lhs: g.shape(x).to_vec(),
                rhs: s.to_vec(),
            });
        }
        let proj = self.project_inputs(g, x)?;
        self.step_projected(g, proj, h_prev)
    }
}

#[derive(Debug, Clone)]
pub struct BiGruParams {
    pub forward: GruParams,
    pub backward: GruParams,
}

impl BiGruParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, bias: bool) -> Self {
        Self {
            forward: GruParams::init(rng, input, hidden, bias),
            backward: GruParams::init(rng, input, hidden, bias),
        }
    }
}

fn run_direction<'p>(g: &mut Graph<'p>, p: &'p GruParams, x: Var, reverse: bool) -> Result<Var, TensorError> {
    let steps = g.shape(x)[0];
    let [xr, xz, xh] = p.project_inputs(g, x)?;
    let mut h = g.zeros(vec![1, p.hidden_dim()]);
    let mut states = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let proj = [
            g.slice_rows(xr, t, 1)?,
            g.slice_rows(xz, t, 1)?,
            g.slice_rows(xh, t, 1)?,
        ];
        h = p.step_projected(g, proj, h)?;
        states[t] = h;
    }
    g.stack_rows(&states)
}

/// One bidirectional layer over `x: T×input`. Row `t` of the result is the
/// forward state after reading `x_0..=x_t` followed by the backward state
/// after reading `x_t..x_{T−1}` right to left, both starting from zero.
pub fn bigru_layer<'p>(g: &mut Graph<'p>, p: &'p BiGruParams, x: Var) -> Result<Var, TensorError> {
    let s = g.shape(x);
    if s.len() != 2 || s[0] == 0 || s[1] != p.forward.input_dim() {
        return Err(TensorError::Shape {
            op: "bigru_layer",
            lhs: s.to_vec(),
            rhs: vec![p.forward.input_dim()],
        });
    }
    let fwd = run_direction(g, &p.forward, x, false)?;
    let bwd = run_direction(g, &p.backward, x, true)?;
    g.concat(fwd, bwd)
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// `|V|×d_e`
    pub embedding: Tensor,
    /// `d_e×d_e`
    pub affine_w: Tensor,
    pub affine_b: Tensor,
    pub layers: Vec<BiGruParams>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        layers: usize,
        bias: bool,
    ) -> Self {
        // An embedding row is selected by a one-hot input, so its fan-in is 1.
        let embedding = init::uniform(rng, vec![vocab, embed_dim], 1);
        let affine_w = init::uniform(rng, vec![embed_dim, embed_dim], embed_dim);
        let affine_b = init::uniform(rng, vec![embed_dim], embed_dim);
        let layers = (0..layers)
            .map(|l| {
                let input = if l == 0 { embed_dim } else { 2 * hidden };
                BiGruParams::init(rng, input, hidden, bias)
            })
            .collect();
        Self {
            embedding,
            affine_w,
            affine_b,
            layers,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.layers.last().map_or(0, |l| l.forward.hidden_dim())
    }

    pub fn named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("encoder.embedding".into(), &self.embedding));
        out.push(("encoder.affine.W".into(), &self.affine_w));
        out.push(("encoder.affine.b".into(), &self.affine_b));
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward.named(&format!("encoder.l{}.fwd", l + 1), out);
            layer.backward.named(&format!("encoder.l{}.bwd", l + 1), out);
        }
    }

    pub fn named_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push(("encoder.embedding".into(), &mut self.embedding));
        out.push(("encoder.affine.W".into(), &mut self.affine_w));
        out.push(("encoder.affine.b".into(), &mut self.affine_b));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.forward.named_mut(&format!("encoder.l{}.fwd", l + 1), out);
            layer.backward.named_mut(&format!("encoder.l{}.bwd", l + 1), out);
        }
    }
}

/// Row `t` is `E[id_t]·W + b`.
pub fn embed_affine<'p>(g: &mut Graph<'p>, p: &'p EncoderParams, ids: &[usize]) -> Result<Var, TensorError> {
    if ids.is_empty() {
        return Err(TensorError::Domain("cannot encode an empty utterance".into()));
    }
    let table = g.leaf(&p.embedding);
    let e = g.gather_rows(table, ids)?;
    let w = g.leaf(&p.affine_w);
    let b = g.leaf(&p.affine_b);
    let x = g.matmul(e, w)?;
    g.add(x, b)
}

/// Contextual representation `T×2d_h` of a token sequence. Dropout is
/// applied to the projected embeddings and between recurrent layers.
pub fn encode<'p>(
    g: &mut Graph<'p>,
    p: &'p EncoderParams,
    ids: &[usize],
    dropout: f64,
    mode: &mut RunMode<'_>,
) -> Result<Var, TensorError> {
    let mut h = embed_affine(g, p, ids)?;
    for layer in &p.layers {
        h = apply_dropout(g, h, dropout, mode)?;
        h = bigru_layer(g, layer, h)?;
    }
    Ok(h)
}
