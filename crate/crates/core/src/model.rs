//! The full forecaster and its ablation variants: branch assembly, fused
//! prediction head, configuration hashing and checkpoints.

use std::fmt;
use std::path::Path;

use icst_tensor::archive::{read_archive, sha256_hex, write_archive};
use icst_tensor::{Adam, AdamConfig, BufferId, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{build_time_filter, calendar_of, steps_per_day, NormalizationStats, SpeedSeries, TimeFilter};
use crate::embeddings::{learn_spatial_embedding, DeepWalkConfig};
use crate::error::{IcstError, Result};
use crate::nn::Linear;
use crate::roadnet::{enumerate_road_pairs, RoadNetwork, RoadPair};
use crate::sfpr::{AttentionConfig, BlockLayout, HorizonProjection, SimilarAttention, SpeedEmbedding, StBlock, SteEmbedding};
use crate::stcl::{Stcl, StclConfig};

/// Architecture subsets, each adding one component to the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "Basic")]
    Basic,
    #[serde(rename = "+TA")]
    Ta,
    #[serde(rename = "+SA")]
    Sa,
    #[serde(rename = "+STE")]
    Ste,
    #[serde(rename = "+STF")]
    Stf,
    #[serde(rename = "+SimA&STD")]
    SimaStd,
    #[serde(rename = "+TFM")]
    Tfm,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Basic,
        Variant::Ta,
        Variant::Sa,
        Variant::Ste,
        Variant::Stf,
        Variant::SimaStd,
        Variant::Tfm,
        Variant::Full,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Basic => "Basic",
            Variant::Ta => "+TA",
            Variant::Sa => "+SA",
            Variant::Ste => "+STE",
            Variant::Stf => "+STF",
            Variant::SimaStd => "+SimA&STD",
            Variant::Tfm => "+TFM",
            Variant::Full => "full",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == tag.trim())
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|v| v.tag()).collect();
                IcstError::Config(format!("unknown variant {tag:?}; valid tags: {}", valid.join(", ")))
            })
    }

    fn layout(self) -> BlockLayout {
        BlockLayout {
            spatial: self >= Variant::Sa,
            temporal: self >= Variant::Ta,
            ste: self >= Variant::Ste,
            fusion: self >= Variant::Stf,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Forecast horizon `Q`.
    pub horizon: usize,
    /// Time filter: recent steps, daily-periodic and weekly-periodic picks.
    pub recent: usize,
    pub daily: usize,
    pub weekly: usize,
    pub attention: AttentionConfig,
    pub stcl: StclConfig,
    pub embedding: DeepWalkConfig,
    /// Keep at most this many road pairs (in enumeration order).
    pub max_pairs: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            horizon: 12,
            recent: 12,
            daily: 6,
            weekly: 2,
            attention: AttentionConfig::default(),
            stcl: StclConfig::default(),
            embedding: DeepWalkConfig::default(),
            max_pairs: None,
        }
    }
}

impl ModelConfig {
    /// The periodic filter, which also fixes the raw window every variant
    /// draws its samples from.
    pub fn data_filter(&self, slot_minutes: u32) -> Result<TimeFilter> {
        build_time_filter(self.recent, self.daily, self.weekly, slot_minutes)
    }

    /// The filter this variant reads: the periodic one from `+TFM` on, the
    /// same number of most recent steps before that.
    pub fn model_filter(&self, slot_minutes: u32) -> Result<TimeFilter> {
        let f = self.data_filter(slot_minutes)?;
        if self.variant >= Variant::Tfm {
            Ok(f)
        } else {
            TimeFilter::contiguous(f.len())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.attention;
        if self.horizon == 0 || a.heads == 0 || a.head_dim == 0 || a.spatial_layers == 0 || a.temporal_layers == 0 {
            return Err(IcstError::Config(
                "horizon, heads, head_dim and layer counts must be positive".into(),
            ));
        }
        if self.stcl.blocks == 0 || self.stcl.nf_layers == 0 {
            return Err(IcstError::Config("STCL needs at least one block and one NF layer".into()));
        }
        if !(0.0..=1.0).contains(&self.stcl.gamma_terminal) {
            return Err(IcstError::Config("gamma_terminal must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Hash of everything that fixes parameter shapes and meaning.
pub fn config_hash(cfg: &ModelConfig, network: &RoadNetwork, slot_minutes: u32) -> String {
    let v = serde_json::json!({
        "config": cfg,
        "roads": network.num_roads(),
        "edges": network.edges(),
        "slot_minutes": slot_minutes,
    });
    sha256_hex(v.to_string().as_bytes())
}

/// One minibatch in normalized units.
#[derive(Clone, Debug)]
pub struct Batch {
    pub origins: Vec<usize>,
    /// `[B, P, N]`, ascending time.
    pub hist: Tensor,
    /// `(day, slot)` of every history step, sample-major.
    pub hist_calendar: Vec<(usize, usize)>,
    /// `(day, slot)` of every future step, sample-major.
    pub future_calendar: Vec<(usize, usize)>,
    /// `[B, Q, N]`.
    pub target: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.origins.len()
    }
}

/// Gather a batch of windows at `origins` from a normalized series.
pub fn make_batch(series: &SpeedSeries, filter: &TimeFilter, horizon: usize, origins: &[usize]) -> Result<Batch> {
    let n = series.roads();
    let asc = filter.ascending();
    let (mut hist, mut target) = (Vec::new(), Vec::new());
    let (mut hist_calendar, mut future_calendar) = (Vec::new(), Vec::new());
    let cal = |t: usize| calendar_of(t, series.start, series.slot_minutes);
    for &o in origins {
        if (o as i64) + asc[0] < 0 || o + horizon >= series.steps() {
            return Err(IcstError::Range {
                what: "window origin".into(),
                index: o,
                size: series.steps(),
            });
        }
        for &off in &asc {
            let t = (o as i64 + off) as usize;
            hist.extend_from_slice(series.row(t));
            hist_calendar.push(cal(t));
        }
        for t in o + 1..=o + horizon {
            target.extend_from_slice(series.row(t));
            future_calendar.push(cal(t));
        }
    }
    let b = origins.len();
    Ok(Batch {
        origins: origins.to_vec(),
        hist: Tensor::new(&[b, asc.len(), n], hist)?,
        hist_calendar,
        future_calendar,
        target: Tensor::new(&[b, horizon, n], target)?,
    })
}

/// Two stacked affine maps over each road's history, with no activation.
#[derive(Clone, Debug)]
struct BasicBody {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct AttentionBody {
    speed: SpeedEmbedding,
    ste: Option<SteEmbedding>,
    encoder: StBlock,
    horizon: Option<HorizonProjection>,
    similar: Option<SimilarAttention>,
    decoder: Option<StBlock>,
}

#[derive(Clone, Debug)]
enum Body {
    Basic(BasicBody),
    Attention(Box<AttentionBody>),
}

/// A built model with its parameters.
#[derive(Clone, Debug)]
pub struct IcstModel {
    pub config: ModelConfig,
    pub network: RoadNetwork,
    pub slot_minutes: u32,
    pub filter: TimeFilter,
    pub pairs: Vec<RoadPair>,
    pub store: ParamStore,
    /// Normalization of the training split, when known.
    pub normalization: Option<NormalizationStats>,
    pub seed: u64,
    body: Body,
    /// DeepWalk road embedding, stored as a buffer.
    raw_embedding: Option<BufferId>,
    stcl: Option<Stcl>,
    alpha_logit: Option<ParamId>,
    head: Option<Linear>,
}

/// Forward outputs kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// `[B, Q, N]` normalized predictions.
    pub pred: Var,
    /// `[B, Q, N, d]` branch outputs before fusion, when present.
    pub sfpr: Option<Var>,
    pub stcl: Option<Var>,
}

impl IcstModel {
    /// Build with a freshly learned road embedding.
    pub fn new(cfg: &ModelConfig, network: &RoadNetwork, slot_minutes: u32, seed: u64) -> Result<Self> {
        let emb = if cfg.variant >= Variant::Ste {
            Some(learn_spatial_embedding(network, &cfg.embedding, seed)?)
        } else {
            None
        };
        Self::with_embedding(cfg, network, slot_minutes, seed, emb)
    }

    /// Build around a given `[N, dim]` road embedding (ignored by variants
    /// without STE).
    pub fn with_embedding(
        cfg: &ModelConfig,
        network: &RoadNetwork,
        slot_minutes: u32,
        seed: u64,
        embedding: Option<Tensor>,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = network.num_roads();
        let filter = cfg.model_filter(slot_minutes)?;
        let p = filter.len();
        let q = cfg.horizon;
        let d = cfg.attention.d_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (mut raw_embedding, mut stcl, mut alpha_logit, mut head) = (None, None, None, None);
        let mut pairs = Vec::new();
        let body = if cfg.variant == Variant::Basic {
            Body::Basic(BasicBody {
                fc1: Linear::new(&mut store, &mut rng, "basic/fc1", p, d, true)?,
                fc2: Linear::new(&mut store, &mut rng, "basic/fc2", d, q, true)?,
            })
        } else {
            let layout = cfg.variant.layout();
            let speed = SpeedEmbedding::new(&mut store, &mut rng, "sfpr/speed", d)?;
            let ste = if layout.ste {
                let emb = embedding.ok_or_else(|| IcstError::Config("variant needs a road embedding".into()))?;
                if emb.shape() != [n, cfg.embedding.dim] {
                    return Err(IcstError::Config(format!(
                        "road embedding shape {:?}, expected [{n}, {}]",
                        emb.shape(),
                        cfg.embedding.dim
                    )));
                }
                raw_embedding = Some(store.add_buffer("embed/spatial_raw", emb)?);
                Some(SteEmbedding::new(
                    &mut store,
                    &mut rng,
                    "embed/ste",
                    cfg.embedding.dim,
                    steps_per_day(slot_minutes)?,
                    d,
                )?)
            } else {
                None
            };
            let encoder = StBlock::new(&mut store, &mut rng, "sfpr/enc", &cfg.attention, layout)?;
            let decoding = cfg.variant >= Variant::SimaStd;
            let (horizon, similar, decoder) = if decoding {
                (
                    None,
                    Some(SimilarAttention::new(&mut store, &mut rng, "sfpr/similar", &cfg.attention)?),
                    Some(StBlock::new(&mut store, &mut rng, "sfpr/dec", &cfg.attention, layout)?),
                )
            } else {
                (Some(HorizonProjection::new(&mut store, &mut rng, "sfpr/horizon", p, q)?), None, None)
            };
            if cfg.variant == Variant::Full {
                pairs = enumerate_road_pairs(network, None, cfg.max_pairs)?;
                stcl = Some(Stcl::new(&mut store, &mut rng, &cfg.stcl, &pairs, n, p, d, q)?);
                alpha_logit = Some(store.add("fusion/alpha_logit", Tensor::zeros(&[1]), false)?);
            }
            head = Some(Linear::new(&mut store, &mut rng, "head", d, 1, true)?);
            Body::Attention(Box::new(AttentionBody {
                speed,
                ste,
                encoder,
                horizon,
                similar,
                decoder,
            }))
        };
        Ok(Self {
            config: cfg.clone(),
            network: network.clone(),
            slot_minutes,
            filter,
            pairs,
            store,
            normalization: None,
            seed,
            body,
            raw_embedding,
            stcl,
            alpha_logit,
            head,
        })
    }

    pub fn roads(&self) -> usize {
        self.network.num_roads()
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config, &self.network, self.slot_minutes)
    }

    pub fn stcl(&self) -> Option<&Stcl> {
        self.stcl.as_ref()
    }

    pub fn alpha_logit(&self) -> Option<ParamId> {
        self.alpha_logit
    }

    /// Current fusion weight of the fluctuation branch.
    pub fn alpha(&self) -> Option<f64> {
        self.alpha_logit
            .map(|id| 1.0 / (1.0 + (-self.store.value(id).item()).exp()))
    }

    /// Batch of this model's windows at `origins` of a normalized series.
    pub fn batch(&self, series: &SpeedSeries, origins: &[usize]) -> Result<Batch> {
        make_batch(series, &self.filter, self.config.horizon, origins)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<ForwardOut> {
        let b = batch.size();
        let n = self.roads();
        let q = self.config.horizon;
        let p = self.filter.len();
        if batch.hist.shape() != [b, p, n] {
            return Err(IcstError::Config(format!(
                "batch history shape {:?}, model expects [{b}, {p}, {n}]",
                batch.hist.shape()
            )));
        }
        let hist = g.constant(batch.hist.clone());
        let body = match &self.body {
            Body::Basic(m) => {
                let x = g.permute(hist, &[0, 2, 1])?;
                let h = m.fc1.forward(g, store, x)?;
                let y = m.fc2.forward(g, store, h)?;
                let pred = g.permute(y, &[0, 2, 1])?;
                return Ok(ForwardOut { pred, sfpr: None, stcl: None });
            }
            Body::Attention(m) => m,
        };
        let x = body.speed.forward(g, store, hist)?;
        let (ste_hist, ste_future) = match (&body.ste, self.raw_embedding) {
            (Some(ste), Some(raw)) => {
                let raw = g.constant(store.buffer(raw).clone());
                let spatial = ste.spatial(g, store, raw)?;
                (
                    Some(ste.build(g, store, spatial, &batch.hist_calendar, b)?),
                    Some(ste.build(g, store, spatial, &batch.future_calendar, b)?),
                )
            }
            _ => (None, None),
        };
        let enc = body.encoder.forward(g, store, x, ste_hist)?;
        let h = match (&body.similar, &body.decoder, &body.horizon) {
            (Some(sim), Some(dec), _) => {
                let (sh, sf) = match (ste_hist, ste_future) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(IcstError::Config("similar attention needs STEs".into())),
                };
                let dec_in = sim.forward(g, store, enc, sh, sf)?.out;
                dec.forward(g, store, dec_in, Some(sf))?
            }
            (_, _, Some(proj)) => proj.forward(g, store, enc)?,
            _ => unreachable!("attention body has a decoder or a horizon projection"),
        };
        let (fused, stcl_out) = match (&self.stcl, self.alpha_logit) {
            (Some(stcl), Some(logit)) => {
                let hs = stcl.forward(g, store, &batch.hist)?;
                let logit = g.param(store, logit);
                let alpha = g.sigmoid(logit);
                let a = g.mul(h, alpha)?;
                let rest = g.one_minus(alpha);
                let c = g.mul(hs, rest)?;
                (g.add(a, c)?, Some(hs))
            }
            _ => (h, None),
        };
        let head = self.head.as_ref().expect("attention variants have a head");
        let y = head.forward(g, store, fused)?;
        let pred = g.reshape(y, &[b, q, n])?;
        Ok(ForwardOut {
            pred,
            sfpr: Some(h),
            stcl: stcl_out,
        })
    }

    /// Normalized predictions `[B, Q, N]` with running batch-norm statistics.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, &self.store, batch)?;
        Ok(g.value(out.pred).clone())
    }
}

/// Mean squared error of `pred` against a constant target.
pub fn mse(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    let r = g.sub(pred, t)?;
    let sq = g.mul(r, r)?;
    Ok(g.mean(sq))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config_hash: String,
    config: ModelConfig,
    roads: usize,
    edges: Vec<(usize, usize)>,
    slot_minutes: u32,
    seed: u64,
    normalization: Option<NormalizationStats>,
    adam: Option<AdamMeta>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step_count: u64,
}

const CHECKPOINT_FORMAT: &str = "icst-checkpoint-1";

/// Write parameters, buffers, optimizer moments and enough metadata to
/// rebuild the model.
pub fn save_checkpoint(path: &Path, model: &IcstModel, adam: Option<&Adam>) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        config_hash: model.config_hash(),
        config: model.config.clone(),
        roads: model.roads(),
        edges: model.network.edges().to_vec(),
        slot_minutes: model.slot_minutes,
        seed: model.seed,
        normalization: model.normalization,
        adam: adam.map(|a| AdamMeta {
            config: a.config,
            step_count: a.step_count(),
        }),
    };
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for p in model.store.params() {
        entries.push((p.name.clone(), &p.value));
    }
    for b in model.store.buffers() {
        entries.push((b.name.clone(), &b.value));
    }
    if let Some(a) = adam {
        for (p, m) in model.store.params().iter().zip(a.first_moments()) {
            entries.push((format!("adam/m/{}", p.name), m));
        }
        for (p, v) in model.store.params().iter().zip(a.second_moments()) {
            entries.push((format!("adam/v/{}", p.name), v));
        }
    }
    let meta = serde_json::to_value(&meta).map_err(|e| IcstError::Config(e.to_string()))?;
    write_archive(path, &meta, &entries)?;
    Ok(())
}

/// Load a checkpoint. When `expected_hash` is given it must match the
/// stored configuration hash.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<(IcstModel, Option<Adam>)> {
    let (meta, entries) = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| IcstError::Parse {
        path: path.display().to_string(),
        line: 0,
        reason: format!("checkpoint metadata: {e}"),
    })?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(IcstError::Incompatible {
            expected: CHECKPOINT_FORMAT.into(),
            found: meta.format,
        });
    }
    if let Some(h) = expected_hash {
        if h != meta.config_hash {
            return Err(IcstError::Incompatible {
                expected: h.into(),
                found: meta.config_hash,
            });
        }
    }
    let network = RoadNetwork::new(meta.roads, &meta.edges)?;
    let found = config_hash(&meta.config, &network, meta.slot_minutes);
    if found != meta.config_hash {
        return Err(IcstError::Incompatible {
            expected: meta.config_hash,
            found,
        });
    }
    let emb = entries
        .iter()
        .find(|(name, _)| name == "embed/spatial_raw")
        .map(|(_, t)| t.clone());
    let mut model = IcstModel::with_embedding(&meta.config, &network, meta.slot_minutes, meta.seed, emb)?;
    model.normalization = meta.normalization;
    let expected = model.store.len() + model.store.buffers().len();
    let mut seen = 0;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix("adam/m/") {
            first.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("adam/v/") {
            second.push((rest.to_string(), t));
        } else {
            model.store.assign(&name, t)?;
            seen += 1;
        }
    }
    if seen != expected {
        return Err(IcstError::Incompatible {
            expected: format!("{expected} tensors"),
            found: format!("{seen} tensors"),
        });
    }
    let adam = match meta.adam {
        Some(a) => {
            let order = |list: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
                let mut map: std::collections::HashMap<String, Tensor> = list.into_iter().collect();
                model
                    .store
                    .params()
                    .iter()
                    .map(|p| {
                        map.remove(&p.name)
                            .ok_or_else(|| IcstError::Data(format!("checkpoint lacks moments of {}", p.name)))
                    })
                    .collect()
            };
            let (m, v) = (order(first)?, order(second)?);
            Some(Adam::from_parts(a.config, a.step_count, m, v, &model.store)?)
        }
        None => None,
    };
    Ok((model, adam))
}
