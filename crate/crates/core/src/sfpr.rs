//! Fluctuation-pattern branch: speed and spatio-temporal embeddings,
//! spatial/temporal attention, ST-Fusion, similar attention and the
//! encoder/decoder blocks.

use icst_tensor::{Activation, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IcstError, Result};
use crate::nn::{attend, merge_heads, split_heads, AttendOver, BatchNorm, Linear, Mlp2};

/// Attention hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    /// Activation of the per-head query/key/value maps.
    pub qkv_activation: Activation,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            head_dim: 16,
            spatial_layers: 1,
            temporal_layers: 2,
            qkv_activation: Activation::Relu,
        }
    }
}

impl AttentionConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Pointwise two-layer map from a scalar speed to `d_model` features.
#[derive(Clone, Debug)]
pub struct SpeedEmbedding {
    pub mlp: Mlp2,
}

impl SpeedEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp2::new(store, rng, name, 1, d, d)?,
        })
    }

    /// `[B, S, N] -> [B, S, N, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut s = g.shape(x).to_vec();
        s.push(1);
        let x = g.reshape(x, &s)?;
        self.mlp.forward(g, store, x)
    }
}

/// Spatio-temporal embedding: projected road embedding plus projected
/// calendar encoding, summed.
#[derive(Clone, Debug)]
pub struct SteEmbedding {
    pub spatial: Mlp2,
    /// First temporal layer; its weight rows are indexed by the one-hot.
    pub temporal_in: Linear,
    pub temporal_out: Linear,
    pub slots: usize,
}

impl SteEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        raw_dim: usize,
        slots: usize,
        d: usize,
    ) -> Result<Self> {
        Ok(Self {
            spatial: Mlp2::new(store, rng, &format!("{name}/spatial"), raw_dim, d, d)?,
            temporal_in: Linear::new(store, rng, &format!("{name}/temporal/fc1"), 7 + slots, d, true)?,
            temporal_out: Linear::new(store, rng, &format!("{name}/temporal/fc2"), d, d, true)?,
            slots,
        })
    }

    /// `[N, raw] -> [N, d]`.
    pub fn spatial(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<Var> {
        self.spatial.forward(g, store, raw)
    }

    /// Calendar projection for `(day, slot)` pairs: `[len, d]`. Equivalent to
    /// the two-layer map applied to the day-of-week/slot-of-day one-hot.
    pub fn temporal(&self, g: &mut Graph, store: &ParamStore, calendar: &[(usize, usize)]) -> Result<Var> {
        if calendar.is_empty() {
            return Err(IcstError::Config("empty step list for STE".into()));
        }
        let w = g.param(store, self.temporal_in.w);
        let days: Vec<usize> = calendar.iter().map(|c| c.0).collect();
        let slots: Vec<usize> = calendar.iter().map(|c| 7 + c.1).collect();
        let a = g.gather_rows(w, &days)?;
        let b = g.gather_rows(w, &slots)?;
        let mut h = g.add(a, b)?;
        if let Some(bias) = self.temporal_in.b {
            let bias = g.param(store, bias);
            h = g.add(h, bias)?;
        }
        let h = g.relu(h);
        self.temporal_out.forward_act(g, store, h, Activation::Relu)
    }

    /// `STE[b, s, i] = spatial[i] + temporal[b, s]`, shape `[B, S, N, d]`.
    /// `calendar` lists `B * S` entries in sample-major order.
    pub fn build(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        spatial: Var,
        calendar: &[(usize, usize)],
        batch: usize,
    ) -> Result<Var> {
        let t = self.temporal(g, store, calendar)?;
        let d = g.shape(t)[1];
        let t = g.reshape(t, &[batch, calendar.len() / batch, 1, d])?;
        Ok(g.add(t, spatial)?)
    }
}

/// Multi-head attention over roads at each step, keyed on `[H || STE]`,
/// followed by an output map, residual connection and batch norm.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub bn: BatchNorm,
    pub heads: usize,
    pub activation: Activation,
}

/// Output of one attention layer with its attention weights.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    /// `[groups, len_q, len_k]`, each row a probability vector.
    pub weights: Var,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &AttentionConfig,
        use_ste: bool,
    ) -> Result<Self> {
        let d = cfg.d_model();
        let input = if use_ste { 2 * d } else { d };
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}/q"), input, d, true)?,
            k: Linear::new(store, rng, &format!("{name}/k"), input, d, true)?,
            v: Linear::new(store, rng, &format!("{name}/v"), input, d, true)?,
            out: Linear::new(store, rng, &format!("{name}/out"), d, d, true)?,
            bn: BatchNorm::new(store, &format!("{name}/bn"), d)?,
            heads: cfg.heads,
            activation: cfg.qkv_activation,
        })
    }

    /// `h: [B, S, N, d]`, `ste: [B, S, N, d]` when present.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, ste: Option<Var>) -> Result<Attended> {
        let s = g.shape(h).to_vec();
        let x = match ste {
            Some(e) => g.concat(&[h, e], 3)?,
            None => h,
        };
        let over = AttendOver::Roads;
        let q = self.q.forward_act(g, store, x, self.activation)?;
        let k = self.k.forward_act(g, store, x, self.activation)?;
        let v = self.v.forward_act(g, store, x, self.activation)?;
        let (q, k, v) = (
            split_heads(g, q, self.heads, over)?,
            split_heads(g, k, self.heads, over)?,
            split_heads(g, v, self.heads, over)?,
        );
        let (mixed, weights) = attend(g, q, k, v)?;
        let mixed = merge_heads(g, mixed, (s[0], s[1], s[2]), self.heads, over)?;
        let y = self.out.forward(g, store, mixed)?;
        let y = g.add(y, h)?;
        let out = self.bn.forward(g, store, y)?;
        Ok(Attended { out, weights })
    }
}

/// Multi-head self-attention over the steps of each road, from the speed
/// representation alone.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub bn: BatchNorm,
    pub heads: usize,
    pub activation: Activation,
}

impl TemporalAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let d = cfg.d_model();
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}/q"), d, d, true)?,
            k: Linear::new(store, rng, &format!("{name}/k"), d, d, true)?,
            v: Linear::new(store, rng, &format!("{name}/v"), d, d, true)?,
            out: Linear::new(store, rng, &format!("{name}/out"), d, d, true)?,
            bn: BatchNorm::new(store, &format!("{name}/bn"), d)?,
            heads: cfg.heads,
            activation: cfg.qkv_activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Attended> {
        let s = g.shape(h).to_vec();
        let over = AttendOver::Steps;
        let q = self.q.forward_act(g, store, h, self.activation)?;
        let k = self.k.forward_act(g, store, h, self.activation)?;
        let v = self.v.forward_act(g, store, h, self.activation)?;
        let (q, k, v) = (
            split_heads(g, q, self.heads, over)?,
            split_heads(g, k, self.heads, over)?,
            split_heads(g, v, self.heads, over)?,
        );
        let (mixed, weights) = attend(g, q, k, v)?;
        let mixed = merge_heads(g, mixed, (s[0], s[1], s[2]), self.heads, over)?;
        let y = self.out.forward(g, store, mixed)?;
        let y = g.add(y, h)?;
        let out = self.bn.forward(g, store, y)?;
        Ok(Attended { out, weights })
    }
}

/// Gate `z = sigmoid((HS * HT) W_ST + HT W_T + b)`, output
/// `HS * z + HT * (1 - z)`.
#[derive(Clone, Debug)]
pub struct StFusion {
    pub w_st: ParamId,
    pub w_t: ParamId,
    pub b: ParamId,
}

impl StFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            w_st: store.add(format!("{name}/w_st"), crate::nn::glorot(&[d, d], rng), true)?,
            w_t: store.add(format!("{name}/w_t"), crate::nn::glorot(&[d, d], rng), true)?,
            b: store.add(format!("{name}/b"), Tensor::zeros(&[d]), false)?,
        })
    }

    /// Returns `(output, gate)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hs: Var, ht: Var) -> Result<(Var, Var)> {
        let (w_st, w_t, b) = (g.param(store, self.w_st), g.param(store, self.w_t), g.param(store, self.b));
        let prod = g.mul(hs, ht)?;
        let a = g.matmul(prod, w_st)?;
        let c = g.matmul(ht, w_t)?;
        let pre = g.add(a, c)?;
        let pre = g.add(pre, b)?;
        let z = g.sigmoid(pre);
        let left = g.mul(hs, z)?;
        let zc = g.one_minus(z);
        let right = g.mul(ht, zc)?;
        Ok((g.add(left, right)?, z))
    }
}

/// Component switches for ablation variants of the encoder/decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub spatial: bool,
    pub temporal: bool,
    pub ste: bool,
    pub fusion: bool,
}

/// Parallel spatial and temporal branches merged by ST-Fusion (or summed
/// when fusion is disabled).
#[derive(Clone, Debug)]
pub struct StBlock {
    pub spatial: Vec<SpatialAttention>,
    pub temporal: Vec<TemporalAttention>,
    pub fusion: Option<StFusion>,
    pub layout: BlockLayout,
}

impl StBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &AttentionConfig,
        layout: BlockLayout,
    ) -> Result<Self> {
        let d = cfg.d_model();
        let spatial = if layout.spatial {
            (0..cfg.spatial_layers)
                .map(|l| SpatialAttention::new(store, rng, &format!("{name}/spatial{l}"), cfg, layout.ste))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let temporal = if layout.temporal {
            (0..cfg.temporal_layers)
                .map(|l| TemporalAttention::new(store, rng, &format!("{name}/temporal{l}"), cfg))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let fusion = if layout.fusion && layout.spatial && layout.temporal {
            Some(StFusion::new(store, rng, &format!("{name}/fusion"), d)?)
        } else {
            None
        };
        Ok(Self {
            spatial,
            temporal,
            fusion,
            layout,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, ste: Option<Var>) -> Result<Var> {
        let ste = if self.layout.ste { ste } else { None };
        let mut hs = None;
        if self.layout.spatial {
            let mut x = h;
            for layer in &self.spatial {
                x = layer.forward(g, store, x, ste)?.out;
            }
            hs = Some(x);
        }
        let mut ht = None;
        if self.layout.temporal {
            let mut x = h;
            for layer in &self.temporal {
                x = layer.forward(g, store, x)?.out;
            }
            ht = Some(x);
        }
        match (hs, ht, &self.fusion) {
            (Some(s), Some(t), Some(f)) => Ok(f.forward(g, store, s, t)?.0),
            (Some(s), Some(t), None) => Ok(g.add(s, t)?),
            (Some(x), None, _) | (None, Some(x), _) => Ok(x),
            (None, None, _) => Ok(h),
        }
    }
}

/// Cross attention from future STEs to historical STEs, mixing encoder
/// outputs into decoder inputs.
#[derive(Clone, Debug)]
pub struct SimilarAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub bn: BatchNorm,
    pub heads: usize,
    pub activation: Activation,
}

impl SimilarAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let d = cfg.d_model();
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}/q"), d, d, true)?,
            k: Linear::new(store, rng, &format!("{name}/k"), d, d, true)?,
            v: Linear::new(store, rng, &format!("{name}/v"), d, d, true)?,
            out: Linear::new(store, rng, &format!("{name}/out"), d, d, true)?,
            bn: BatchNorm::new(store, &format!("{name}/bn"), d)?,
            heads: cfg.heads,
            activation: cfg.qkv_activation,
        })
    }

    /// `hst_enc, ste_hist: [B, P, N, d]`, `ste_future: [B, Q, N, d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hst_enc: Var,
        ste_hist: Var,
        ste_future: Var,
    ) -> Result<Attended> {
        let fs = g.shape(ste_future).to_vec();
        let over = AttendOver::Steps;
        let q = self.q.forward_act(g, store, ste_future, self.activation)?;
        let k = self.k.forward_act(g, store, ste_hist, self.activation)?;
        let v = self.v.forward_act(g, store, hst_enc, self.activation)?;
        let (q, k, v) = (
            split_heads(g, q, self.heads, over)?,
            split_heads(g, k, self.heads, over)?,
            split_heads(g, v, self.heads, over)?,
        );
        let (mixed, weights) = attend(g, q, k, v)?;
        let mixed = merge_heads(g, mixed, (fs[0], fs[1], fs[2]), self.heads, over)?;
        let y = self.out.forward(g, store, mixed)?;
        let out = self.bn.forward(g, store, y)?;
        Ok(Attended { out, weights })
    }
}

/// Affine map over the time axis, `[B, P, N, d] -> [B, Q, N, d]`, used by
/// variants without similar attention and decoding.
#[derive(Clone, Debug)]
pub struct HorizonProjection {
    pub map: Linear,
}

impl HorizonProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, p: usize, q: usize) -> Result<Self> {
        Ok(Self {
            map: Linear::new(store, rng, name, p, q, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let x = g.permute(h, &[0, 2, 3, 1])?;
        let y = self.map.forward(g, store, x)?;
        Ok(g.permute(y, &[0, 3, 1, 2])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(heads: usize, head_dim: usize) -> AttentionConfig {
        AttentionConfig {
            heads,
            head_dim,
            spatial_layers: 1,
            temporal_layers: 1,
            qkv_activation: Activation::Relu,
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn zero_qk(store: &mut ParamStore, lin: &Linear) {
        let w = store.param(lin.w).value.shape().to_vec();
        store.param_mut(lin.w).value = Tensor::zeros(&w);
        if let Some(b) = lin.b {
            let s = store.param(b).value.shape().to_vec();
            store.param_mut(b).value = Tensor::full(&s, 0.3);
        }
    }

    #[test]
    fn spatial_weights_are_distributions_and_uniform_when_scores_equal() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = cfg(2, 3);
        let layer = SpatialAttention::new(&mut store, &mut rng, "sa", &c, true).unwrap();
        let mut g = Graph::new();
        let h = g.constant(randn(&[2, 3, 4, 6], 1));
        let e = g.constant(randn(&[2, 3, 4, 6], 2));
        let a = layer.forward(&mut g, &store, h, Some(e)).unwrap();
        for row in g.value(a.weights).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|w| *w >= 0.0));
        }

        zero_qk(&mut store, &layer.q.clone());
        zero_qk(&mut store, &layer.k.clone());
        let mut g = Graph::new();
        let h = g.constant(randn(&[2, 3, 4, 6], 1));
        let e = g.constant(randn(&[2, 3, 4, 6], 2));
        let a = layer.forward(&mut g, &store, h, Some(e)).unwrap();
        assert!(g.value(a.weights).data().iter().all(|w| (w - 0.25).abs() < 1e-12));
    }

    #[test]
    fn singleton_softmax_puts_all_weight_on_self() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = SpatialAttention::new(&mut store, &mut rng, "sa", &cfg(2, 2), false).unwrap();
        let mut g = Graph::new();
        let h = g.constant(randn(&[2, 2, 1, 4], 4));
        let a = layer.forward(&mut g, &store, h, None).unwrap();
        assert!(g.value(a.weights).data().iter().all(|w| *w == 1.0));

        let t = TemporalAttention::new(&mut store, &mut rng, "ta", &cfg(2, 2)).unwrap();
        let h = g.constant(randn(&[2, 1, 3, 4], 5));
        let a = t.forward(&mut g, &store, h).unwrap();
        assert!(g.value(a.weights).data().iter().all(|w| *w == 1.0));
    }

    #[test]
    fn temporal_attention_commutes_with_road_permutation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = TemporalAttention::new(&mut store, &mut rng, "ta", &cfg(2, 2)).unwrap();
        let x = randn(&[3, 4, 3, 4], 9);
        let perm = [2, 0, 1];
        let permuted = Tensor::from_fn(&[3, 4, 3, 4], |i| {
            let (b, s, n, d) = (i / 48, (i / 12) % 4, (i / 4) % 3, i % 4);
            x.at(&[b, s, perm[n], d])
        });
        let mut g = Graph::new();
        let a = g.constant(x);
        let b = g.constant(permuted);
        let ya = layer.forward(&mut g, &store, a).unwrap().out;
        let yb = layer.forward(&mut g, &store, b).unwrap().out;
        let (ya, yb) = (g.value(ya).clone(), g.value(yb).clone());
        for i in 0..ya.numel() {
            let (b, s, n, d) = (i / 48, (i / 12) % 4, (i / 4) % 3, i % 4);
            assert!((yb.at(&[b, s, n, d]) - ya.at(&[b, s, perm[n], d])).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_gate_saturation_and_convexity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f = StFusion::new(&mut store, &mut rng, "f", 4).unwrap();
        let hs = randn(&[2, 3, 2, 4], 1);
        let ht = randn(&[2, 3, 2, 4], 2);
        let mut g = Graph::new();
        let (a, b) = (g.constant(hs.clone()), g.constant(ht.clone()));
        let (out, z) = f.forward(&mut g, &store, a, b).unwrap();
        assert!(g.value(z).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        for ((o, s), t) in g.value(out).data().iter().zip(hs.data()).zip(ht.data()) {
            assert!(*o >= s.min(*t) - 1e-12 && *o <= s.max(*t) + 1e-12);
        }
        for (bias, want) in [(100.0, &hs), (-100.0, &ht)] {
            store.param_mut(f.b).value = Tensor::full(&[4], bias);
            let mut g = Graph::new();
            let (a, b) = (g.constant(hs.clone()), g.constant(ht.clone()));
            let (out, _) = f.forward(&mut g, &store, a, b).unwrap();
            assert!(g.value(out).max_abs_diff(want) < 1e-9);
        }
    }

    #[test]
    fn similar_attention_picks_matching_step() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = AttentionConfig { qkv_activation: Activation::Identity, ..cfg(1, 4) };
        let layer = SimilarAttention::new(&mut store, &mut rng, "sim", &c).unwrap();
        for lin in [&layer.q, &layer.k] {
            store.param_mut(lin.w).value = Tensor::eye(4);
        }
        // history steps are scaled orthogonal directions; the future step matches step 2
        let scale = 4.0;
        let hist = Tensor::from_fn(&[2, 3, 1, 4], |i| {
            let (s, d) = ((i / 4) % 3, i % 4);
            if s == d { scale } else { 0.0 }
        });
        let fut = Tensor::from_fn(&[2, 1, 1, 4], |i| if i % 4 == 2 { scale } else { 0.0 });
        let mut g = Graph::new();
        let (h, e, f) = (g.constant(randn(&[2, 3, 1, 4], 3)), g.constant(hist), g.constant(fut));
        let a = layer.forward(&mut g, &store, h, e, f).unwrap();
        let w = g.value(a.weights);
        assert!(w.at(&[0, 0, 2]) > 0.9, "{:?}", w.data());

        // identical history STEs give uniform weights
        let mut g = Graph::new();
        let same = Tensor::from_fn(&[2, 3, 1, 4], |i| (i % 4) as f64);
        let (h, e, f) = (g.constant(randn(&[2, 3, 1, 4], 3)), g.constant(same), g.constant(randn(&[2, 2, 1, 4], 7)));
        let a = layer.forward(&mut g, &store, h, e, f).unwrap();
        assert!(g.value(a.weights).data().iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
    }

    /// Single-head, single-layer spatial attention on 2 roads and 3 steps
    /// recomputed with scalar loops.
    #[test]
    fn spatial_attention_matches_scalar_loops() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let c = cfg(1, 2);
        let layer = SpatialAttention::new(&mut store, &mut rng, "sa", &c, true).unwrap();
        let h = randn(&[2, 3, 2, 2], 1);
        let e = randn(&[2, 3, 2, 2], 2);
        let mut g = Graph::new();
        let (hv, ev) = (g.constant(h.clone()), g.constant(e.clone()));
        let out = layer.forward(&mut g, &store, hv, Some(ev)).unwrap().out;
        let got = g.value(out).clone();

        let p = |id: icst_tensor::ParamId| store.value(id).data().to_vec();
        let lin = |l: &Linear, x: &[f64], relu: bool| -> Vec<f64> {
            let (w, b) = (p(l.w), p(l.b.unwrap()));
            let (k, n) = (x.len(), b.len());
            (0..n)
                .map(|j| {
                    let v = b[j] + (0..k).map(|i| x[i] * w[i * n + j]).sum::<f64>();
                    if relu { v.max(0.0) } else { v }
                })
                .collect()
        };
        let mut pre = vec![0.0; 24];
        for b in 0..2 {
            for s in 0..3 {
                let xs: Vec<Vec<f64>> = (0..2)
                    .map(|n| {
                        let mut x: Vec<f64> = (0..2).map(|d| h.at(&[b, s, n, d])).collect();
                        x.extend((0..2).map(|d| e.at(&[b, s, n, d])));
                        x
                    })
                    .collect();
                let qs: Vec<_> = xs.iter().map(|x| lin(&layer.q, x, true)).collect();
                let ks: Vec<_> = xs.iter().map(|x| lin(&layer.k, x, true)).collect();
                let vs: Vec<_> = xs.iter().map(|x| lin(&layer.v, x, true)).collect();
                for i in 0..2 {
                    let sc: Vec<f64> = (0..2)
                        .map(|j| (qs[i][0] * ks[j][0] + qs[i][1] * ks[j][1]) / 2f64.sqrt())
                        .collect();
                    let mx = sc[0].max(sc[1]);
                    let ex: Vec<f64> = sc.iter().map(|v| (v - mx).exp()).collect();
                    let z = ex[0] + ex[1];
                    let mixed: Vec<f64> = (0..2).map(|d| (ex[0] * vs[0][d] + ex[1] * vs[1][d]) / z).collect();
                    let o = lin(&layer.out, &mixed, false);
                    for d in 0..2 {
                        pre[((b * 3 + s) * 2 + i) * 2 + d] = o[d] + h.at(&[b, s, i, d]);
                    }
                }
            }
        }
        for d in 0..2 {
            let col: Vec<f64> = (0..12).map(|r| pre[r * 2 + d]).collect();
            let m = col.iter().sum::<f64>() / 12.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 12.0;
            for r in 0..12 {
                let want = (col[r] - m) / (v + icst_tensor::BN_EPS).sqrt();
                assert!((got.data()[r * 2 + d] - want).abs() < 1e-6);
            }
        }
    }
}
