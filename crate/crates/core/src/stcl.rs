//! Spatio-temporal causal learning over road pairs: residual temporal
//! blocks, 2x2 spatial causal mixing, nonlinear feature layers, aggregation
//! and projection to a per-road, per-horizon representation.

use icst_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IcstError, Result};
use crate::nn::{glorot, Linear};
use crate::roadnet::RoadPair;

/// How the aggregated pair features are expanded to one row per road.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expansion {
    /// Sum over pairs, flatten the `2 x d` result and map it to `N x d`
    /// with a learned affine layer.
    Affine,
    /// Add each pair's row for road `m` into road `m`'s slot and its row for
    /// road `n` into road `n`'s slot.
    RoadScatter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StclConfig {
    /// Residual block count `Q_R`.
    pub blocks: usize,
    /// Relevance `gamma` of the last block.
    pub gamma_terminal: f64,
    /// Nonlinear feature layer count `D`.
    pub nf_layers: usize,
    /// Share temporal and nonlinear weights across pairs (causal matrices
    /// stay per pair).
    pub share_weights: bool,
    pub expansion: Expansion,
}

impl Default for StclConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            gamma_terminal: 0.5,
            nf_layers: 3,
            share_weights: false,
            expansion: Expansion::RoadScatter,
        }
    }
}

/// `gamma_q = 1 - (q / Q_R) * (1 - gamma_terminal)` for `1 <= q <= Q_R`,
/// evaluated as one division so simple fractions come out correctly rounded.
pub fn layer_relevance(q: usize, blocks: usize, gamma_terminal: f64) -> Result<f64> {
    if q == 0 || q > blocks {
        return Err(IcstError::Config(format!(
            "block {q} outside 1..={blocks}"
        )));
    }
    Ok(((blocks - q) as f64 + q as f64 * gamma_terminal) / blocks as f64)
}

pub fn relevance_schedule(blocks: usize, gamma_terminal: f64) -> Vec<f64> {
    (1..=blocks)
        .map(|q| layer_relevance(q, blocks, gamma_terminal).expect("q in range"))
        .collect()
}

/// Residual stack: `R1 = relu((1 + gamma_1) R0 B1)` (the first skip is the
/// `B1` projection of the input), `Rq = relu(gamma_q R(q-1) Bq + R(q-1))`.
///
/// `r0: [G, M, P]`, `b[q]: [G, in, d]` (or `[1, in, d]` when shared).
/// Returns every block output `[G, M, d]`.
pub fn tcl_forward(g: &mut Graph, r0: Var, b: &[Var], gammas: &[f64]) -> Result<Vec<Var>> {
    if b.is_empty() || b.len() != gammas.len() {
        return Err(IcstError::Config(format!(
            "{} residual weights for {} relevances",
            b.len(),
            gammas.len()
        )));
    }
    let mut outs = Vec::with_capacity(b.len());
    let y = grouped_matmul(g, r0, b[0])?;
    let y = g.scale(y, 1.0 + gammas[0]);
    let mut r = g.relu(y);
    outs.push(r);
    for (bq, &gamma) in b.iter().zip(gammas).skip(1) {
        let y = grouped_matmul(g, r, *bq)?;
        let y = g.scale(y, gamma);
        let y = g.add(y, r)?;
        r = g.relu(y);
        outs.push(r);
    }
    Ok(outs)
}

/// `x: [G, M, k] @ w: [G, k, n]`; a single shared `w: [1, k, n]` applies to
/// every group.
pub fn grouped_matmul(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let (xs, ws) = (g.shape(x).to_vec(), g.shape(w).to_vec());
    if ws[0] == 1 && xs[0] != 1 {
        let flat = g.reshape(x, &[1, xs[0] * xs[1], xs[2]])?;
        let y = g.bmm(flat, w, false, false)?;
        Ok(g.reshape(y, &[xs[0], xs[1], ws[2]])?)
    } else {
        Ok(g.bmm(x, w, false, false)?)
    }
}

/// Spatial causal mixing per pair: `out_n = a12 r_m + a22 r_n`,
/// `out_m = a11 r_m + a21 r_n`. `r: [G, .., 2, d]`, `a: [G, 2, 2]`.
pub fn scl_forward(g: &mut Graph, r: Var, a: Var) -> Result<Var> {
    Ok(g.pair_mix(r, a)?)
}

/// `D` tanh layers: `x <- tanh(x W_s + b_s)`. `x: [G, M, k]`,
/// `w_s: [G|1, in, d]`, `b_s: [G|1, 1, d]`.
pub fn nf_forward(g: &mut Graph, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
    if layers.is_empty() {
        return Err(IcstError::Config("nonlinear feature stack needs at least one layer".into()));
    }
    let mut h = x;
    for &(w, b) in layers {
        let y = grouped_matmul(g, h, w)?;
        let y = g.add(y, b)?;
        h = g.tanh(y);
    }
    Ok(h)
}

/// Sum per-pair outputs `[G, ..]` over the pair axis.
pub fn aggregate_pairs(g: &mut Graph, per_pair: Var) -> Result<Var> {
    if g.shape(per_pair).first().copied().unwrap_or(0) == 0 {
        return Err(IcstError::Config("empty road-pair set".into()));
    }
    Ok(g.sum_axis(per_pair, 0)?)
}

/// Per-road features `[B, N, d]` mapped through `W_P: [Q, d, d]` into
/// `[B, Q, N, d]`.
pub fn stcl_project(g: &mut Graph, per_road: Var, w_p: Var) -> Result<Var> {
    let s = g.shape(per_road).to_vec();
    let ws = g.shape(w_p).to_vec();
    let (b, n, d, q) = (s[0], s[1], s[2], ws[0]);
    let w = g.permute(w_p, &[1, 0, 2])?;
    let w = g.reshape(w, &[d, q * d])?;
    let y = g.matmul(per_road, w)?;
    let y = g.reshape(y, &[b, n, q, d])?;
    Ok(g.permute(y, &[0, 2, 1, 3])?)
}

/// Parameter handles of one pair (or of the shared set).
#[derive(Clone, Debug)]
pub struct PairParams {
    pub b: Vec<ParamId>,
    pub nf: Vec<(ParamId, ParamId)>,
}

/// The STCL branch with per-pair parameters.
#[derive(Clone, Debug)]
pub struct Stcl {
    pub cfg: StclConfig,
    pub pairs: Vec<RoadPair>,
    pub roads: usize,
    pub history: usize,
    pub d: usize,
    pub horizon: usize,
    pub gammas: Vec<f64>,
    /// Temporal and nonlinear weights, one entry per pair or one shared.
    pub weights: Vec<PairParams>,
    /// Causal matrices `A^q`, indexed `[pair][block]`.
    pub causal: Vec<Vec<ParamId>>,
    pub expand: Option<Linear>,
    pub w_p: ParamId,
}

pub fn pair_prefix(p: &RoadPair) -> String {
    format!("stcl/pair_{}_{}", p.m, p.n)
}

impl Stcl {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &StclConfig,
        pairs: &[RoadPair],
        roads: usize,
        history: usize,
        d: usize,
        horizon: usize,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(IcstError::Config("STCL needs at least one road pair".into()));
        }
        if cfg.blocks == 0 || cfg.nf_layers == 0 {
            return Err(IcstError::Config("STCL needs at least one block and one NF layer".into()));
        }
        let lead = if cfg.share_weights { 1 } else { 0 };
        let weight_set = |store: &mut ParamStore, prefix: &str, rng: &mut R| -> Result<PairParams> {
            let mut b = Vec::new();
            for q in 1..=cfg.blocks {
                let rows = if q == 1 { history } else { d };
                let mut shape = vec![rows, d];
                if lead == 1 {
                    shape.insert(0, 1);
                }
                b.push(store.add(format!("{prefix}/B{q}"), glorot(&shape, rng), true)?);
            }
            let mut nf = Vec::new();
            for s in 1..=cfg.nf_layers {
                let rows = if s == 1 { cfg.blocks * d } else { d };
                let (mut ws, mut bs) = (vec![rows, d], vec![1, d]);
                if lead == 1 {
                    ws.insert(0, 1);
                    bs.insert(0, 1);
                }
                let w = store.add(format!("{prefix}/nf{s}"), glorot(&ws, rng), true)?;
                let bias = store.add(format!("{prefix}/nf{s}_bias"), Tensor::zeros(&bs), false)?;
                nf.push((w, bias));
            }
            Ok(PairParams { b, nf })
        };
        let mut weights = Vec::new();
        if cfg.share_weights {
            weights.push(weight_set(store, "stcl/shared", rng)?);
        }
        let mut causal = Vec::new();
        for p in pairs {
            let prefix = pair_prefix(p);
            if !cfg.share_weights {
                weights.push(weight_set(store, &prefix, rng)?);
            }
            let a = (1..=cfg.blocks)
                .map(|q| store.add(format!("{prefix}/A{q}"), Tensor::eye(2), true))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            causal.push(a);
        }
        let expand = match cfg.expansion {
            Expansion::Affine => Some(Linear::new(store, rng, "stcl/expand", 2 * d, roads * d, true)?),
            Expansion::RoadScatter => None,
        };
        let w_p = store.add("stcl/W_P", glorot(&[horizon, d, d], rng), true)?;
        Ok(Self {
            cfg: cfg.clone(),
            pairs: pairs.to_vec(),
            roads,
            history,
            d,
            horizon,
            gammas: relevance_schedule(cfg.blocks, cfg.gamma_terminal),
            weights,
            causal,
            expand,
            w_p,
        })
    }

    /// Pair histories `[G, B*2, P]` from normalized history `[B, P, N]`:
    /// row `2b` is road `m`, row `2b+1` is road `n`.
    pub fn pair_inputs(&self, hist: &Tensor) -> Tensor {
        let s = hist.shape();
        let (b, p, n) = (s[0], s[1], s[2]);
        let g = self.pairs.len();
        let src = hist.data();
        let mut out = vec![0.0; g * b * 2 * p];
        for (gi, pair) in self.pairs.iter().enumerate() {
            for bi in 0..b {
                for (r, road) in [pair.m, pair.n].into_iter().enumerate() {
                    let dst = ((gi * b + bi) * 2 + r) * p;
                    for t in 0..p {
                        out[dst + t] = src[(bi * p + t) * n + road];
                    }
                }
            }
        }
        Tensor::new(&[g, b * 2, p], out).expect("shape matches")
    }

    fn stacked(&self, g: &mut Graph, store: &ParamStore, ids: impl Iterator<Item = ParamId>) -> Result<Var> {
        let vars: Vec<Var> = ids.map(|id| g.param(store, id)).collect();
        if vars.len() == 1 && self.cfg.share_weights {
            return Ok(vars[0]);
        }
        Ok(g.stack(&vars)?)
    }

    /// Per-pair nonlinear features `[G, B, 2, d]` and the mixed block
    /// outputs, from normalized history `[B, P, N]`.
    pub fn pair_features(&self, g: &mut Graph, store: &ParamStore, hist: &Tensor) -> Result<Var> {
        let batch = hist.shape()[0];
        let groups = self.pairs.len();
        let r0 = g.constant(self.pair_inputs(hist));
        let b: Vec<Var> = (0..self.cfg.blocks)
            .map(|q| self.stacked(g, store, self.weights.iter().map(|w| w.b[q])))
            .collect::<Result<_>>()?;
        let blocks = tcl_forward(g, r0, &b, &self.gammas)?;
        let mut mixed = Vec::with_capacity(blocks.len());
        for (q, r) in blocks.into_iter().enumerate() {
            let r = g.reshape(r, &[groups, batch, 2, self.d])?;
            let a_vars: Vec<Var> = self.causal.iter().map(|a| g.param(store, a[q])).collect();
            let a = g.stack(&a_vars)?;
            mixed.push(scl_forward(g, r, a)?);
        }
        let cat = g.concat(&mixed, 3)?;
        let cat = g.reshape(cat, &[groups, batch * 2, self.cfg.blocks * self.d])?;
        let layers: Vec<(Var, Var)> = (0..self.cfg.nf_layers)
            .map(|s| {
                let w = self.stacked(g, store, self.weights.iter().map(|p| p.nf[s].0))?;
                let bias = self.stacked(g, store, self.weights.iter().map(|p| p.nf[s].1))?;
                Ok((w, bias))
            })
            .collect::<Result<_>>()?;
        let f = nf_forward(g, cat, &layers)?;
        Ok(g.reshape(f, &[groups, batch, 2, self.d])?)
    }

    /// `H_STCL: [B, Q, N, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hist: &Tensor) -> Result<Var> {
        let batch = hist.shape()[0];
        let f = self.pair_features(g, store, hist)?;
        let per_road = match (&self.cfg.expansion, &self.expand) {
            (Expansion::Affine, Some(lin)) => {
                let agg = aggregate_pairs(g, f)?;
                let flat = g.reshape(agg, &[batch, 2 * self.d])?;
                let y = lin.forward(g, store, flat)?;
                g.reshape(y, &[batch, self.roads, self.d])?
            }
            _ => {
                let t = g.permute(f, &[1, 0, 2, 3])?;
                let t = g.reshape(t, &[batch, self.pairs.len() * 2, self.d])?;
                let index: Vec<usize> = self.pairs.iter().flat_map(|p| [p.m, p.n]).collect();
                g.index_add(t, 1, &index, self.roads)?
            }
        };
        let w_p = g.param(store, self.w_p);
        stcl_project(g, per_road, w_p)
    }

    /// Current `A^q` values of pair `i`.
    pub fn causal_matrices(&self, store: &ParamStore, i: usize) -> Vec<[[f64; 2]; 2]> {
        self.causal[i]
            .iter()
            .map(|&id| {
                let v = store.value(id).data();
                [[v[0], v[1]], [v[2], v[3]]]
            })
            .collect()
    }

    /// `B1` of pair `i` (the shared one when weights are shared).
    pub fn first_block(&self, store: &ParamStore, i: usize) -> Tensor {
        let set = if self.cfg.share_weights { 0 } else { i };
        let t = store.value(self.weights[set].b[0]);
        t.reshape(&[self.history, self.d]).expect("B1 is P x d")
    }
}
