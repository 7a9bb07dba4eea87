//! Dataset preparation, joint training, evaluation metrics, baselines and
//! ablation runs.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use icst_tensor::{Adam, AdamConfig, Graph, BN_MOMENTUM};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    split_bounds, valid_origins, zscore_fit_transform, NormalizationStats, SpeedSeries, Split, SplitBounds,
    TimeFilter,
};
use crate::error::{IcstError, Result};
use crate::model::{mse, IcstModel, ModelConfig, Variant};
use crate::roadnet::RoadNetwork;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_l2: f64,
    pub seed: u64,
    /// Restore the parameters with the best validation MAE at the end.
    pub keep_best: bool,
    /// Use every `train_stride`-th training window.
    pub train_stride: usize,
    /// Use every `eval_stride`-th validation window for the epoch log.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 128,
            batch_size: 128,
            lr: 1e-3,
            lambda_l2: 1e-5,
            seed: 0,
            keep_best: false,
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || self.train_stride == 0 || self.eval_stride == 0 {
            return Err(IcstError::Config(
                "epochs and strides must be positive and batch_size at least 2".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.lambda_l2 >= 0.0) {
            return Err(IcstError::Config("lr must be positive and lambda_l2 nonnegative".into()));
        }
        Ok(())
    }
}

/// A normalized, split and windowed speed series with its network.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub raw: SpeedSeries,
    pub normalized: SpeedSeries,
    pub stats: NormalizationStats,
    pub bounds: SplitBounds,
    pub network: RoadNetwork,
    pub horizon: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Windows are those whose raw span fits `filter` and whose future
    /// steps all fall in one split.
    pub fn new(
        raw: SpeedSeries,
        network: RoadNetwork,
        filter: &TimeFilter,
        horizon: usize,
        ratios: (u32, u32, u32),
    ) -> Result<Self> {
        if network.num_roads() != raw.roads() {
            return Err(IcstError::Data(format!(
                "network has {} roads, series has {}",
                network.num_roads(),
                raw.roads()
            )));
        }
        let bounds = split_bounds(raw.steps(), ratios)?;
        let (normalized, stats) = zscore_fit_transform(&raw, bounds.train_end)?;
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for o in valid_origins(raw.steps(), filter, horizon) {
            match bounds.split_of_window(o, horizon) {
                Some(Split::Train) => train.push(o),
                Some(Split::Val) => val.push(o),
                Some(Split::Test) => test.push(o),
                None => {}
            }
        }
        if train.is_empty() || val.is_empty() || test.is_empty() {
            return Err(IcstError::Data(format!(
                "windows per split (train/val/test) = {}/{}/{}; every split needs at least one (series has {} steps, filter span {})",
                train.len(),
                val.len(),
                test.len(),
                raw.steps(),
                filter.span()
            )));
        }
        Ok(Self {
            raw,
            normalized,
            stats,
            bounds,
            network,
            horizon,
            train,
            val,
            test,
        })
    }

    /// Dataset for a model configuration with the default 7:1:2 split.
    pub fn for_model(raw: SpeedSeries, network: RoadNetwork, cfg: &ModelConfig) -> Result<Self> {
        let filter = cfg.data_filter(raw.slot_minutes)?;
        Self::new(raw, network, &filter, cfg.horizon, (7, 1, 2))
    }

    /// Renormalize with given statistics, such as those stored with a model.
    pub fn with_stats(mut self, stats: NormalizationStats) -> Self {
        self.normalized = self.raw.map(|v| stats.normalize(v));
        self.stats = stats;
        self
    }

    pub fn origins(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// MAE, RMSE and MAPE (percent) over a set of entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Horizons `1..=Q`.
    pub per_horizon: Vec<Metric>,
    /// Pooled over every horizon.
    pub avg: Metric,
    /// Entries left out of MAPE because the prediction was zero.
    pub mape_masked: usize,
}

#[derive(Default)]
struct Acc {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    n_pct: usize,
}

impl Acc {
    fn push(&mut self, pred: f64, obs: f64) -> bool {
        let e = pred - obs;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if pred != 0.0 {
            self.pct += (e / pred).abs();
            self.n_pct += 1;
            true
        } else {
            false
        }
    }

    fn metric(&self) -> Metric {
        let n = self.n.max(1) as f64;
        Metric {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.n_pct == 0 { 0.0 } else { 100.0 * self.pct / self.n_pct as f64 },
        }
    }
}

/// Metrics of `[B, Q, N]` predictions against observations, both in speed
/// units. MAPE divides by the prediction.
pub fn compute_metrics(pred: &[f64], obs: &[f64], horizon: usize, roads: usize) -> Result<MetricsReport> {
    if pred.len() != obs.len() || horizon == 0 || roads == 0 || pred.len() % (horizon * roads) != 0 {
        return Err(IcstError::Data(format!(
            "metrics need equal [B, {horizon}, {roads}] arrays, got {} and {} values",
            pred.len(),
            obs.len()
        )));
    }
    let mut per: Vec<Acc> = (0..horizon).map(|_| Acc::default()).collect();
    let mut all = Acc::default();
    let mut masked = 0;
    for (i, (&p, &o)) in pred.iter().zip(obs).enumerate() {
        let h = (i / roads) % horizon;
        per[h].push(p, o);
        if !all.push(p, o) {
            masked += 1;
        }
    }
    Ok(MetricsReport {
        per_horizon: per.iter().map(Acc::metric).collect(),
        avg: all.metric(),
        mape_masked: masked,
    })
}

impl MetricsReport {
    /// `{"h3":{..},"h6":{..},"h12":{..},"avg":{..}}` restricted to horizons
    /// the report covers.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for h in [3usize, 6, 12] {
            if let Some(m) = self.per_horizon.get(h - 1) {
                map.insert(format!("h{h}"), serde_json::to_value(m).expect("metric serializes"));
            }
        }
        let mut avg = serde_json::to_value(self.avg).expect("metric serializes");
        avg["over"] = serde_json::json!(format!("all {} horizons", self.per_horizon.len()));
        map.insert("avg".into(), avg);
        map.insert("mape_masked".into(), serde_json::json!(self.mape_masked));
        serde_json::Value::Object(map)
    }
}

/// Worker threads for evaluation: `ICST_THREADS` when set, otherwise the
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("ICST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

const EVAL_BATCH: usize = 64;

/// Normalized predictions and targets `[B, Q, N]` at `origins`.
pub fn predict_normalized(model: &IcstModel, data: &Dataset, origins: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let chunks: Vec<&[usize]> = origins.chunks(EVAL_BATCH).collect();
    let threads = worker_threads().min(chunks.len()).max(1);
    let run = |part: &[&[usize]]| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        part.iter()
            .map(|c| {
                let batch = model.batch(&data.normalized, c)?;
                let y = model.predict(&batch)?;
                Ok((y.into_data(), batch.target.into_data()))
            })
            .collect()
    };
    let per = chunks.len().div_ceil(threads);
    let results: Vec<Result<Vec<(Vec<f64>, Vec<f64>)>>> = if threads == 1 {
        vec![run(&chunks)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks.chunks(per).map(|part| s.spawn(move || run(part))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation thread")).collect()
        })
    };
    let (mut pred, mut obs) = (Vec::new(), Vec::new());
    for r in results {
        for (p, o) in r? {
            pred.extend(p);
            obs.extend(o);
        }
    }
    Ok((pred, obs))
}

/// Metrics in speed units on the given windows.
pub fn evaluate_origins(model: &IcstModel, data: &Dataset, origins: &[usize]) -> Result<MetricsReport> {
    let (pred, obs) = predict_normalized(model, data, origins)?;
    let pred: Vec<f64> = pred.iter().map(|&z| data.stats.denormalize(z)).collect();
    let obs: Vec<f64> = obs.iter().map(|&z| data.stats.denormalize(z)).collect();
    compute_metrics(&pred, &obs, model.horizon(), model.roads())
}

pub fn evaluate(model: &IcstModel, data: &Dataset, split: Split) -> Result<MetricsReport> {
    evaluate_origins(model, data, data.origins(split))
}

/// MAE in normalized units over a split.
pub fn normalized_mae(model: &IcstModel, data: &Dataset, split: Split) -> Result<f64> {
    let (pred, obs) = predict_normalized(model, data, data.origins(split))?;
    Ok(pred.iter().zip(&obs).map(|(p, o)| (p - o).abs()).sum::<f64>() / pred.len().max(1) as f64)
}

/// `mse + (lambda / 2) * sum ||W||^2` over decayed parameters.
pub fn regularized_loss(mse: f64, store: &icst_tensor::ParamStore, lambda: f64) -> f64 {
    mse + lambda * store.l2_half_norm()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_mae,val_rmse,val_mape,seconds";

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            e.epoch, e.train_loss, e.val_mae, e.val_rmse, e.val_mape, e.seconds
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub adam: Adam,
}

/// Shuffled minibatches of `origins`; a trailing batch of one joins the
/// previous batch since batch norm needs two samples.
pub fn epoch_batches(origins: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = origins.to_vec();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map(Vec::len) == Some(1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

/// Epoch-at-a-time training state for one model and dataset.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    train_origins: Vec<usize>,
    val_origins: Vec<usize>,
    rng: ChaCha8Rng,
    adam: Adam,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &mut IcstModel, data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.roads() != data.raw.roads() || model.horizon() != data.horizon {
            return Err(IcstError::Config("model and dataset disagree on roads or horizon".into()));
        }
        model.normalization = Some(data.stats);
        let train_origins: Vec<usize> = data.train.iter().step_by(cfg.train_stride).copied().collect();
        let val_origins: Vec<usize> = data.val.iter().step_by(cfg.eval_stride).copied().collect();
        if train_origins.len() < 2 {
            return Err(IcstError::Data("training needs at least two windows".into()));
        }
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &model.store,
        );
        Ok(Self {
            cfg: cfg.clone(),
            train_origins,
            val_origins,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            adam,
            epoch: 0,
        })
    }

    /// Completed epochs.
    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn into_adam(self) -> Adam {
        self.adam
    }

    /// One pass over the training windows followed by validation.
    pub fn epoch(&mut self, model: &mut IcstModel, data: &Dataset) -> Result<EpochLog> {
        self.epoch += 1;
        let epoch = self.epoch;
        let started = Instant::now();
        let good = model.store.clone();
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for origins in epoch_batches(&self.train_origins, self.cfg.batch_size, &mut self.rng) {
            let batch = model.batch(&data.normalized, &origins)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &model.store, &batch)?;
            let l = mse(&mut g, out.pred, &batch.target)?;
            let loss = regularized_loss(g.value(l).item(), &model.store, self.cfg.lambda_l2);
            if !loss.is_finite() {
                model.store = good;
                return Err(IcstError::Training(format!(
                    "loss became {loss} in epoch {epoch}; parameters restored to the start of the epoch"
                )));
            }
            let grads = g.backward(l)?;
            model.store.zero_grad();
            model.store.accumulate(&g, &grads);
            model.store.add_l2_grad(self.cfg.lambda_l2);
            self.adam.step(&mut model.store)?;
            model.store.apply_bn_updates(g.bn_updates(), BN_MOMENTUM);
            loss_sum += loss * origins.len() as f64;
            count += origins.len();
        }
        let val = evaluate_origins(model, data, &self.val_origins)?;
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / count as f64,
            val_mae: val.avg.mae,
            val_rmse: val.avg.rmse,
            val_mape: val.avg.mape,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val mae {:.4} ({:.1}s)",
            row.train_loss,
            row.val_mae,
            row.seconds
        );
        Ok(row)
    }
}

/// Jointly train every branch with Adam. `on_epoch` sees each log row as it
/// is produced.
pub fn train(
    model: &mut IcstModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, data, cfg)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let (mut best_epoch, mut best_val) = (0, f64::INFINITY);
    let mut best_store = None;
    for _ in 0..cfg.epochs {
        let row = trainer.epoch(model, data)?;
        on_epoch(&row);
        if row.val_mae < best_val {
            best_val = row.val_mae;
            best_epoch = row.epoch;
            if cfg.keep_best {
                best_store = Some(model.store.clone());
            }
        }
        log.push(row);
    }
    if let Some(s) = best_store {
        model.store = s;
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_mae: best_val,
        adam: trainer.into_adam(),
    })
}

/// Write the epoch log as CSV.
pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| IcstError::io(path, e))?;
    f.write_all(log_to_csv(log).as_bytes()).map_err(|e| IcstError::io(path, e))
}

/// Mean speed per (road, slot of week) over the training range, falling
/// back to the road's training mean for unseen slots.
#[derive(Clone, Debug)]
pub struct HistoricalAverage {
    slots_per_week: usize,
    roads: usize,
    table: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit(series: &SpeedSeries, train_end: usize) -> Result<Self> {
        let n = series.roads();
        let spw = 7 * series.steps_per_day();
        let (mut sum, mut cnt) = (vec![0.0; spw * n], vec![0usize; spw * n]);
        let (mut road_sum, mut road_cnt) = (vec![0.0; n], 0usize);
        for t in 0..train_end.min(series.steps()) {
            let k = slot_of_week(series, t);
            for (i, &v) in series.row(t).iter().enumerate() {
                sum[k * n + i] += v;
                cnt[k * n + i] += 1;
                road_sum[i] += v;
            }
            road_cnt += 1;
        }
        if road_cnt == 0 {
            return Err(IcstError::Data("historical average needs training steps".into()));
        }
        let table = (0..spw * n)
            .map(|j| {
                if cnt[j] > 0 {
                    sum[j] / cnt[j] as f64
                } else {
                    road_sum[j % n] / road_cnt as f64
                }
            })
            .collect();
        Ok(Self {
            slots_per_week: spw,
            roads: n,
            table,
        })
    }

    pub fn predict(&self, series: &SpeedSeries, step: usize, road: usize) -> f64 {
        let k = slot_of_week(series, step) % self.slots_per_week;
        self.table[k * self.roads + road]
    }
}

fn slot_of_week(series: &SpeedSeries, step: usize) -> usize {
    let (day, slot) = crate::dataio::calendar_of(step, series.start, series.slot_minutes);
    day * series.steps_per_day() + slot
}

/// Which simple baseline to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    HistoricalAverage,
    Persistence,
}

/// Baseline metrics on the windows of `split`, in speed units.
pub fn baseline_metrics(data: &Dataset, split: Split, which: Baseline) -> Result<MetricsReport> {
    let s = &data.raw;
    let n = s.roads();
    let q = data.horizon;
    let ha = HistoricalAverage::fit(s, data.bounds.train_end)?;
    let (mut pred, mut obs) = (Vec::new(), Vec::new());
    for &o in data.origins(split) {
        for t in o + 1..=o + q {
            for r in 0..n {
                pred.push(match which {
                    Baseline::HistoricalAverage => ha.predict(s, t, r),
                    Baseline::Persistence => s.at(o, r),
                });
                obs.push(s.at(t, r));
            }
        }
    }
    compute_metrics(&pred, &obs, q, n)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub seed: u64,
    pub test: MetricsReport,
    pub best_val_mae: f64,
}

/// Build, train and test one variant on a prepared dataset. The dataset's
/// windows must come from `cfg.data_filter`.
pub fn run_ablation(
    variant: Variant,
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<AblationResult> {
    let cfg = ModelConfig {
        variant,
        ..model_cfg.clone()
    };
    let mut model = IcstModel::new(&cfg, &data.network, data.raw.slot_minutes, train_cfg.seed)?;
    let out = train(&mut model, data, train_cfg, |_| {})?;
    Ok(AblationResult {
        variant,
        seed: train_cfg.seed,
        test: evaluate(&model, data, Split::Test)?,
        best_val_mae: out.best_val_mae,
    })
}
