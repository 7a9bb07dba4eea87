//! Speed series ingestion, normalization, chronological splitting, time
//! filtering, windowing and the synthetic diffusion generator.

use std::path::Path;

pub use chrono::NaiveDateTime;
use chrono::{Datelike, NaiveDate, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_string, IcstError, Result};
use crate::roadnet::{enumerate_road_pairs, PairOrder, RoadNetwork};

pub const MINUTES_PER_DAY: u32 = 1440;

/// Steps per day for a slot length, rejecting lengths that do not divide a day.
pub fn steps_per_day(slot_minutes: u32) -> Result<usize> {
    if slot_minutes == 0 || MINUTES_PER_DAY % slot_minutes != 0 {
        return Err(IcstError::Config(format!(
            "slot length {slot_minutes} min does not divide a day"
        )));
    }
    Ok((MINUTES_PER_DAY / slot_minutes) as usize)
}

/// Default calendar origin: midnight of 2012-03-01.
pub fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2012, 3, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

/// Single-channel speed tensor of `T` timesteps by `N` roads, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedSeries {
    values: Vec<f64>,
    steps: usize,
    roads: usize,
    pub start: NaiveDateTime,
    pub slot_minutes: u32,
}

impl SpeedSeries {
    pub fn new(
        values: Vec<f64>,
        steps: usize,
        roads: usize,
        start: NaiveDateTime,
        slot_minutes: u32,
    ) -> Result<Self> {
        if steps == 0 || roads == 0 || values.len() != steps * roads {
            return Err(IcstError::Data(format!(
                "series needs T>=1, N>=1 and T*N values; got T={steps}, N={roads}, {} values",
                values.len()
            )));
        }
        steps_per_day(slot_minutes)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(IcstError::Data(format!(
                "non-finite value at step {}, road {}",
                i / roads,
                i % roads
            )));
        }
        Ok(Self {
            values,
            steps,
            roads,
            start,
            slot_minutes,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn roads(&self) -> usize {
        self.roads
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, step: usize, road: usize) -> f64 {
        self.values[step * self.roads + road]
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.values[step * self.roads..(step + 1) * self.roads]
    }

    /// Steps per day for this series' slot length.
    pub fn steps_per_day(&self) -> usize {
        (MINUTES_PER_DAY / self.slot_minutes) as usize
    }

    /// Contiguous sub-series `[from, to)` keeping the calendar aligned.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.steps {
            return Err(IcstError::Data(format!(
                "invalid slice [{from}, {to}) of {} steps",
                self.steps
            )));
        }
        let start = self.start
            + chrono::Duration::minutes(from as i64 * self.slot_minutes as i64);
        Self::new(
            self.values[from * self.roads..to * self.roads].to_vec(),
            to - from,
            self.roads,
            start,
            self.slot_minutes,
        )
    }

    /// Keep only the first `roads` columns.
    pub fn take_roads(&self, roads: usize) -> Result<Self> {
        if roads == 0 || roads > self.roads {
            return Err(IcstError::Range {
                what: "road count",
                index: roads,
                size: self.roads,
            });
        }
        let values = (0..self.steps)
            .flat_map(|t| self.row(t)[..roads].to_vec())
            .collect();
        Self::new(values, self.steps, roads, self.start, self.slot_minutes)
    }

    /// Map every value, keeping the calendar.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// CSV with header `road_0,...`, one row per timestep.
    pub fn to_csv(&self) -> String {
        let mut s = (0..self.roads)
            .map(|i| format!("road_{i}"))
            .collect::<Vec<_>>()
            .join(",");
        s.push('\n');
        for t in 0..self.steps {
            let row: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_csv())
    }
}

/// Parse a series start such as `2012-03-01 00:00` or `2012-03-01T00:00:00`.
pub fn parse_start(text: &str) -> Result<NaiveDateTime> {
    ["%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(text.trim(), f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
        .ok_or_else(|| IcstError::Config(format!("cannot parse start time {text:?}")))
}

/// Day of week (Monday = 0) and slot of day of absolute step `step`.
pub fn calendar_of(step: usize, start: NaiveDateTime, slot_minutes: u32) -> (usize, usize) {
    let t = start + chrono::Duration::minutes(step as i64 * slot_minutes as i64);
    let day = t.weekday().num_days_from_monday() as usize;
    let slot = (t.hour() * 60 + t.minute()) / slot_minutes;
    (day, slot as usize)
}

/// Read a `T x N` speed CSV. Blank or `nan` cells are filled by linear
/// interpolation along time, extending the nearest value at the edges.
pub fn ingest_csv(path: &Path, slot_minutes: u32, start: NaiveDateTime) -> Result<SpeedSeries> {
    let text = read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let fail = |reason: String| IcstError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let cells: Vec<Option<Option<f64>>> = rec.iter().map(parse_cell).collect();
        if i == 0 && cells.iter().any(|c| c.is_none()) {
            width = Some(cells.len());
            continue; // header row
        }
        match width {
            Some(w) if w != cells.len() => {
                return Err(fail(format!("ragged row: {} fields, expected {w}", cells.len())))
            }
            _ => width = Some(cells.len()),
        }
        let row = cells
            .into_iter()
            .enumerate()
            .map(|(j, c)| c.ok_or_else(|| fail(format!("unparseable cell in column {j}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let roads = width.unwrap_or(0);
    let steps = rows.len();
    if steps == 0 || roads == 0 {
        return Err(IcstError::Data(format!("{} holds no data rows", path.display())));
    }
    let mut values = vec![0.0; steps * roads];
    for j in 0..roads {
        let column: Vec<Option<f64>> = rows.iter().map(|r| r[j]).collect();
        let filled = impute_linear(&column)
            .ok_or_else(|| IcstError::Data(format!("column {j} has no observed values")))?;
        for (t, v) in filled.into_iter().enumerate() {
            values[t * roads + j] = v;
        }
    }
    SpeedSeries::new(values, steps, roads, start, slot_minutes)
}

/// `None` for unparseable text, `Some(None)` for a missing cell.
fn parse_cell(s: &str) -> Option<Option<f64>> {
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Some(None);
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some)
}

/// Linear interpolation over gaps with constant extension at both ends.
/// Returns `None` when nothing is observed.
pub fn impute_linear(column: &[Option<f64>]) -> Option<Vec<f64>> {
    let observed: Vec<usize> = (0..column.len()).filter(|&i| column[i].is_some()).collect();
    let (&first, &last) = (observed.first()?, observed.last()?);
    let mut out = vec![0.0; column.len()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = if i <= first {
            column[first].unwrap()
        } else if i >= last {
            column[last].unwrap()
        } else if let Some(v) = column[i] {
            v
        } else {
            let k = observed.partition_point(|&o| o < i);
            let (lo, hi) = (observed[k - 1], observed[k]);
            let (a, b) = (column[lo].unwrap(), column[hi].unwrap());
            a + (b - a) * (i - lo) as f64 / (hi - lo) as f64
        };
    }
    Some(out)
}

/// Z-score statistics of the training portion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    /// Population mean and standard deviation of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(IcstError::Normalization("no values to fit".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            return Err(IcstError::Normalization(format!(
                "standard deviation is zero (mean {mean})"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_string(path, &serde_json::to_string_pretty(self).expect("stats serialize"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_to_string(path)?).map_err(|e| IcstError::json(path, e))
    }
}

/// Normalize the whole series with statistics from steps `[0, train_end)`.
pub fn zscore_fit_transform(
    series: &SpeedSeries,
    train_end: usize,
) -> Result<(SpeedSeries, NormalizationStats)> {
    let end = train_end.min(series.steps()) * series.roads();
    let stats = NormalizationStats::fit(&series.values()[..end])?;
    Ok((series.map(|v| stats.normalize(v)), stats))
}

pub fn zscore_inverse(normalized: &SpeedSeries, stats: &NormalizationStats) -> SpeedSeries {
    normalized.map(|z| stats.denormalize(z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Chronological split boundaries: train `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, steps)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub steps: usize,
    pub train_end: usize,
    pub val_end: usize,
}

impl SplitBounds {
    pub fn split_of(&self, step: usize) -> Split {
        if step < self.train_end {
            Split::Train
        } else if step < self.val_end {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Split holding every future step of the window at `origin`, if any.
    pub fn split_of_window(&self, origin: usize, horizon: usize) -> Option<Split> {
        let (a, b) = (self.split_of(origin + 1), self.split_of(origin + horizon));
        (a == b && origin + horizon < self.steps).then_some(a)
    }
}

/// Boundaries at `floor(r_train/10 * T)` and `floor((r_train + r_val)/10 * T)`.
pub fn split_bounds(steps: usize, ratios: (u32, u32, u32)) -> Result<SplitBounds> {
    let (a, b, c) = ratios;
    if a + b + c != 10 {
        return Err(IcstError::Config(format!(
            "split ratios {a}:{b}:{c} must sum to 10"
        )));
    }
    if steps < 10 {
        return Err(IcstError::Data(format!("{steps} steps is too short to split")));
    }
    Ok(SplitBounds {
        steps,
        train_end: steps * a as usize / 10,
        val_end: steps * (a + b) as usize / 10,
    })
}

/// Contiguous train/validation/test slices of `series`.
pub fn chronological_split(
    series: &SpeedSeries,
    ratios: (u32, u32, u32),
) -> Result<(SpeedSeries, SpeedSeries, SpeedSeries)> {
    let b = split_bounds(series.steps(), ratios)?;
    Ok((
        series.slice(0, b.train_end)?,
        series.slice(b.train_end, b.val_end)?,
        series.slice(b.val_end, b.steps)?,
    ))
}

/// Nonpositive history offsets relative to a window origin, strictly
/// decreasing from 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeFilter {
    offsets: Vec<i64>,
}

impl TimeFilter {
    pub fn from_offsets(offsets: &[i64]) -> Result<Self> {
        let mut o: Vec<i64> = offsets.to_vec();
        o.sort_unstable_by(|a, b| b.cmp(a));
        o.dedup();
        if o.first() != Some(&0) || o.iter().any(|&v| v > 0) {
            return Err(IcstError::Config(format!(
                "offsets {offsets:?} must be nonpositive and include 0"
            )));
        }
        Ok(Self { offsets: o })
    }

    /// The `p` most recent steps.
    pub fn contiguous(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(IcstError::Config("window length must be positive".into()));
        }
        Self::from_offsets(&(0..p as i64).map(|i| -i).collect::<Vec<_>>())
    }

    /// Offsets, most recent first.
    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }

    /// Offsets in ascending time order (the order of gathered history).
    pub fn ascending(&self) -> Vec<i64> {
        self.offsets.iter().rev().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Raw window length spanned by the offsets.
    pub fn span(&self) -> usize {
        (-self.offsets.last().copied().unwrap_or(0)) as usize + 1
    }
}

/// Recent, daily-periodic and weekly-periodic history offsets.
pub fn build_time_filter(recent: usize, daily: usize, weekly: usize, slot_minutes: u32) -> Result<TimeFilter> {
    if recent == 0 {
        return Err(IcstError::Config("recent must be at least 1".into()));
    }
    let s = steps_per_day(slot_minutes)? as i64;
    let mut offsets: Vec<i64> = (0..recent as i64).map(|i| -i).collect();
    offsets.extend((1..=daily as i64).map(|d| -d * s));
    offsets.extend((1..=weekly as i64).map(|w| -7 * w * s));
    TimeFilter::from_offsets(&offsets)
}

/// One forecasting sample: filtered history and the next `Q` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub origin: usize,
    /// `P x N`, ascending time.
    pub history: Vec<f64>,
    pub history_indices: Vec<usize>,
    /// `Q x N`.
    pub future: Vec<f64>,
    pub future_indices: Vec<usize>,
}

/// Origins `t` with `t + min(offset) >= 0` and `t + horizon < steps`.
pub fn valid_origins(steps: usize, filter: &TimeFilter, horizon: usize) -> Vec<usize> {
    let first = filter.span() - 1;
    if horizon == 0 || steps <= horizon || first + horizon >= steps {
        return Vec::new();
    }
    (first..steps - horizon).collect()
}

/// Absolute history indices of the window at `origin`, ascending.
pub fn history_indices(origin: usize, filter: &TimeFilter) -> Vec<usize> {
    filter
        .ascending()
        .iter()
        .map(|&o| (origin as i64 + o) as usize)
        .collect()
}

pub fn gather_window(series: &SpeedSeries, filter: &TimeFilter, horizon: usize, origin: usize) -> WindowedSample {
    let history_indices = history_indices(origin, filter);
    let future_indices: Vec<usize> = (origin + 1..=origin + horizon).collect();
    let take = |idx: &[usize]| idx.iter().flat_map(|&t| series.row(t).to_vec()).collect();
    WindowedSample {
        origin,
        history: take(&history_indices),
        history_indices,
        future: take(&future_indices),
        future_indices,
    }
}

/// Every valid window in origin order.
pub fn make_windows(series: &SpeedSeries, filter: &TimeFilter, horizon: usize) -> Vec<WindowedSample> {
    let origins = valid_origins(series.steps(), filter, horizon);
    if origins.is_empty() {
        log::warn!(
            "no valid window: {} steps, span {}, horizon {horizon}",
            series.steps(),
            filter.span()
        );
    }
    origins
        .into_iter()
        .map(|t| gather_window(series, filter, horizon, t))
        .collect()
}

/// Planted causal edge `src -> dst`: `dst` at `t` responds to `src` at `t - lag`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalEdge {
    pub src: usize,
    pub dst: usize,
    pub lag: usize,
    pub gain: f64,
}

/// Ground-truth causal structure of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    #[serde(skip)]
    pub num_roads: usize,
    pub edges: Vec<CausalEdge>,
}

impl SyntheticTruth {
    /// Directed adjacency, `adj[src * N + dst]`.
    pub fn adjacency(&self) -> Vec<bool> {
        let n = self.num_roads;
        let mut a = vec![false; n * n];
        for e in &self.edges {
            a[e.src * n + e.dst] = true;
        }
        a
    }

    pub fn lags(&self) -> Vec<usize> {
        let n = self.num_roads;
        let mut a = vec![0; n * n];
        for e in &self.edges {
            a[e.src * n + e.dst] = e.lag;
        }
        a
    }

    pub fn gains(&self) -> Vec<f64> {
        let n = self.num_roads;
        let mut a = vec![0.0; n * n];
        for e in &self.edges {
            a[e.src * n + e.dst] = e.gain;
        }
        a
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }

    pub fn read(path: &Path, num_roads: usize) -> Result<Self> {
        let mut t: Self =
            serde_json::from_str(&read_to_string(path)?).map_err(|e| IcstError::json(path, e))?;
        t.num_roads = num_roads;
        if let Some(e) = t.edges.iter().find(|e| e.src >= num_roads || e.dst >= num_roads) {
            return Err(IcstError::Range {
                what: "truth edge endpoint",
                index: e.src.max(e.dst),
                size: num_roads,
            });
        }
        Ok(t)
    }
}

/// Parameters of the synthetic diffusion generator.
///
/// Road `i` follows `base + amplitude * sin(2*pi*slot/S) + e_i(t)
/// + sum_{j->i} gain_ji * tanh((x_j(t - lag_ji) - base) / coupling_scale)`,
/// where `e_i` is a stationary AR(1) Gaussian process with standard
/// deviation `noise_std` and coefficient `noise_ar`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub roads: usize,
    pub steps: usize,
    pub slot_minutes: u32,
    pub edge_prob: f64,
    pub seed: u64,
    pub base: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    pub noise_ar: f64,
    /// Probability that a pair within distance 2 carries a causal edge.
    pub coupling_prob: f64,
    pub first_order_gain: (f64, f64),
    pub second_order_gain: (f64, f64),
    pub lag_range: (usize, usize),
    pub coupling_scale: f64,
    pub start: NaiveDateTime,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            roads: 6,
            steps: 28 * 288,
            slot_minutes: 5,
            edge_prob: 0.4,
            seed: 0,
            base: 60.0,
            amplitude: 8.0,
            noise_std: 4.0,
            noise_ar: 0.8,
            coupling_prob: 0.5,
            first_order_gain: (6.0, 9.0),
            second_order_gain: (3.0, 4.5),
            lag_range: (1, 3),
            coupling_scale: 10.0,
            start: default_start(),
        }
    }
}

/// Generated series, its road network and the planted causal edges.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub series: SpeedSeries,
    pub network: RoadNetwork,
    pub truth: SyntheticTruth,
}

pub fn synth_diffusion(cfg: &SynthConfig) -> Result<SynthOutput> {
    let s = steps_per_day(cfg.slot_minutes)?;
    if cfg.roads < 3 {
        return Err(IcstError::Config(format!("need at least 3 roads, got {}", cfg.roads)));
    }
    if cfg.steps < 4 * s {
        return Err(IcstError::Config(format!(
            "need at least 4 days ({} steps), got {}",
            4 * s,
            cfg.steps
        )));
    }
    if cfg.lag_range.0 == 0 || cfg.lag_range.0 > cfg.lag_range.1 {
        return Err(IcstError::Config(format!("invalid lag range {:?}", cfg.lag_range)));
    }
    if !(0.0..1.0).contains(&cfg.noise_ar) || cfg.coupling_scale <= 0.0 {
        return Err(IcstError::Config("noise_ar must be in [0, 1) and coupling_scale > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.roads;
    let network = RoadNetwork::random(n, cfg.edge_prob, true, &mut rng);
    let mut edges = Vec::new();
    let pairs = enumerate_road_pairs(&network, None, None)?;
    for p in &pairs {
        let couple = rng.random::<f64>() < cfg.coupling_prob;
        let forward = rng.random::<bool>();
        let (lo, hi) = match p.order {
            PairOrder::First => cfg.first_order_gain,
            PairOrder::Second => cfg.second_order_gain,
        };
        let gain = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let lag = rng.random_range(cfg.lag_range.0..=cfg.lag_range.1);
        if couple && gain != 0.0 {
            let (src, dst) = if forward { (p.m, p.n) } else { (p.n, p.m) };
            edges.push(CausalEdge { src, dst, lag, gain });
        }
    }
    if edges.is_empty() && cfg.coupling_prob > 0.0 && !pairs.is_empty() {
        let p = pairs[rng.random_range(0..pairs.len())];
        let (lo, hi) = match p.order {
            PairOrder::First => cfg.first_order_gain,
            PairOrder::Second => cfg.second_order_gain,
        };
        let gain = if hi > lo { rng.random_range(lo..hi) } else { lo };
        if gain != 0.0 {
            let lag = rng.random_range(cfg.lag_range.0..=cfg.lag_range.1);
            edges.push(CausalEdge { src: p.m, dst: p.n, lag, gain });
        }
    }
    let innovation = cfg.noise_std * (1.0 - cfg.noise_ar * cfg.noise_ar).sqrt();
    let mut noise: Vec<f64> = (0..n)
        .map(|_| cfg.noise_std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let mut x = vec![0.0; cfg.steps * n];
    for t in 0..cfg.steps {
        let (_, slot) = calendar_of(t, cfg.start, cfg.slot_minutes);
        let angle = 2.0 * std::f64::consts::PI * slot as f64 / s as f64;
        let season = cfg.amplitude * angle.sin();
        for i in 0..n {
            if t > 0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                noise[i] = cfg.noise_ar * noise[i] + innovation * z;
            }
            x[t * n + i] = cfg.base + season + noise[i];
        }
        for e in &edges {
            if t >= e.lag {
                let drive = x[(t - e.lag) * n + e.src] - cfg.base;
                x[t * n + e.dst] += e.gain * (drive / cfg.coupling_scale).tanh();
            }
        }
    }
    NormalizationStats::fit(&x)
        .map_err(|_| IcstError::Data("generated series has zero variance".into()))?;
    let series = SpeedSeries::new(x, cfg.steps, n, cfg.start, cfg.slot_minutes)?;
    Ok(SynthOutput {
        series,
        network,
        truth: SyntheticTruth { num_roads: n, edges },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn series_from(steps: usize, roads: usize, f: impl FnMut(usize) -> f64) -> SpeedSeries {
        SpeedSeries::new((0..steps * roads).map(f).collect(), steps, roads, default_start(), 5).unwrap()
    }

    #[test]
    fn start_times_parse() {
        assert_eq!(parse_start("2012-03-01").unwrap(), default_start());
        assert_eq!(parse_start("2012-03-01 00:00").unwrap(), default_start());
        assert!(parse_start("March").is_err());
    }

    #[test]
    fn ingest_small_csv_and_impute() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "60,55\n58,54\n59,53\n").unwrap();
        let s = ingest_csv(&p, 5, default_start()).unwrap();
        assert_eq!((s.steps(), s.roads()), (3, 2));
        std::fs::write(&p, "road_0,road_1\n60,55\n,54\n59,53\n").unwrap();
        let s = ingest_csv(&p, 5, default_start()).unwrap();
        assert_eq!(s.at(1, 0), 59.5);
        std::fs::write(&p, "60,55\n58\n").unwrap();
        assert!(matches!(ingest_csv(&p, 5, default_start()), Err(IcstError::Parse { line: 2, .. })));
        std::fs::write(&p, "60,\n58,\n").unwrap();
        let e = ingest_csv(&p, 5, default_start()).unwrap_err().to_string();
        assert!(e.contains("column 1"), "{e}");
    }

    #[test]
    fn imputation_extends_edges() {
        let got = impute_linear(&[None, Some(2.0), None, None, Some(5.0), None]).unwrap();
        assert_eq!(got, vec![2.0, 2.0, 3.0, 4.0, 5.0, 5.0]);
        assert!(impute_linear(&[None, None]).is_none());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = series_from(7, 3, |i| (i as f64 * 1.37).sin() * 20.0 + 50.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        s.write_csv(&p).unwrap();
        assert_eq!(ingest_csv(&p, 5, default_start()).unwrap(), s);
    }

    #[test]
    fn zscore_cases() {
        let c = series_from(20, 1, |_| 3.0);
        assert!(matches!(zscore_fit_transform(&c, 14), Err(IcstError::Normalization(_))));
        let stats = NormalizationStats { mean: 53.71, std: 20.26 };
        assert_eq!(stats.normalize(53.71), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = series_from(50, 4, |_| rng.random_range(0.0..100.0));
        let b = split_bounds(50, (7, 1, 2)).unwrap();
        let (z, st) = zscore_fit_transform(&s, b.train_end).unwrap();
        let back = zscore_inverse(&z, &st);
        let err = s.values().iter().zip(back.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
        let train = &z.values()[..b.train_end * 4];
        let m = train.iter().sum::<f64>() / train.len() as f64;
        let sd = (train.iter().map(|v| (v - m).powi(2)).sum::<f64>() / train.len() as f64).sqrt();
        assert!(m.abs() < 1e-8 && (sd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn split_boundaries() {
        let b = split_bounds(100, (7, 1, 2)).unwrap();
        assert_eq!((b.train_end, b.val_end), (70, 80));
        assert_eq!(split_bounds(34272, (7, 1, 2)).unwrap().train_end, 34272 * 7 / 10);
        assert_eq!(split_bounds(34272, (7, 1, 2)).unwrap().train_end, 23990);
        assert!(split_bounds(9, (7, 1, 2)).is_err());
        assert!(split_bounds(100, (7, 2, 2)).is_err());
        let s = series_from(100, 2, |i| i as f64);
        let (a, b2, c) = chronological_split(&s, (7, 1, 2)).unwrap();
        let joined: Vec<f64> = [a.values(), b2.values(), c.values()].concat();
        assert_eq!(joined, s.values());
        assert_eq!(b2.start, s.start + chrono::Duration::minutes(70 * 5));
    }

    #[test]
    fn time_filter_examples() {
        let f = build_time_filter(5, 2, 2, 60).unwrap();
        assert_eq!(f.offsets(), &[0, -1, -2, -3, -4, -24, -48, -168, -336]);
        let f = build_time_filter(12, 6, 2, 5).unwrap();
        assert_eq!(f.len(), 20);
        assert_eq!(*f.offsets().last().unwrap(), -4032);
        assert_eq!(build_time_filter(1, 0, 0, 5).unwrap().offsets(), &[0]);
        assert!(build_time_filter(1, 0, 0, 7).is_err());
        assert!(build_time_filter(0, 1, 0, 5).is_err());
        // overlapping daily and weekly offsets collapse
        let f = build_time_filter(1, 7, 1, 60).unwrap();
        assert_eq!(f.len(), 8);
    }

    #[test]
    fn window_examples() {
        let s = series_from(10, 1, |i| i as f64);
        let f = TimeFilter::from_offsets(&[0, -2]).unwrap();
        let w = make_windows(&s, &f, 1);
        assert_eq!(w.iter().map(|w| w.origin).collect::<Vec<_>>(), (2..=8).collect::<Vec<_>>());
        assert_eq!(w[0].history_indices, vec![0, 2]);
        assert_eq!(w[0].future_indices, vec![3]);
        assert!(make_windows(&s, &f, 11).is_empty());

        let f = build_time_filter(12, 6, 2, 5).unwrap();
        let scan = (0..4032 + 13).filter(|&t| t >= 4032 && t + 12 < 4032 + 13).count();
        assert_eq!(scan, 1);
        assert_eq!(valid_origins(4032 + 13, &f, 12).len(), 1);
    }

    #[test]
    fn window_split_assignment() {
        let b = split_bounds(100, (7, 1, 2)).unwrap();
        assert_eq!(b.split_of_window(57, 12), Some(Split::Train));
        assert_eq!(b.split_of_window(58, 12), None);
        assert_eq!(b.split_of_window(69, 10), Some(Split::Val));
        assert_eq!(b.split_of_window(87, 12), Some(Split::Test));
        assert_eq!(b.split_of_window(88, 12), None);
    }

    #[test]
    fn calendar_wraps_by_day() {
        let start = default_start();
        let (d0, s0) = calendar_of(17, start, 5);
        let (d1, s1) = calendar_of(17 + 288, start, 5);
        assert_eq!(s0, s1);
        assert_eq!(d1, (d0 + 1) % 7);
        assert_eq!(calendar_of(0, start, 5), (3, 0)); // 2012-03-01 was a Thursday
    }

    fn small_synth(seed: u64) -> SynthConfig {
        SynthConfig { roads: 6, steps: 4 * 288, seed, ..Default::default() }
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig { edge_prob: 0.4, seed: 11, ..small_synth(11) };
        let a = synth_diffusion(&cfg).unwrap();
        let b = synth_diffusion(&cfg).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.network, b.network);
        let pairs = enumerate_road_pairs(&a.network, None, None).unwrap();
        for e in &a.truth.edges {
            let (m, n) = (e.src.min(e.dst), e.src.max(e.dst));
            assert!(pairs.iter().any(|p| p.m == m && p.n == n));
            assert!(e.lag >= 1 && e.src != e.dst);
        }
    }

    #[test]
    fn synth_zero_gain_is_uncoupled() {
        let cfg = SynthConfig {
            first_order_gain: (0.0, 0.0),
            second_order_gain: (0.0, 0.0),
            ..small_synth(2)
        };
        assert!(synth_diffusion(&cfg).unwrap().truth.edges.is_empty());
        let cfg = SynthConfig { amplitude: 0.0, noise_std: 0.0, coupling_prob: 0.0, ..small_synth(2) };
        assert!(synth_diffusion(&cfg).is_err());
        assert!(synth_diffusion(&SynthConfig { roads: 2, ..small_synth(2) }).is_err());
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn planted_edge_shows_directional_lagged_correlation() {
        let mut forward = 0.0;
        let mut backward = 0.0;
        for seed in 0..5 {
            let cfg = SynthConfig {
                coupling_prob: 1.0,
                first_order_gain: (5.0, 5.0),
                second_order_gain: (5.0, 5.0),
                lag_range: (2, 2),
                ..small_synth(100 + seed)
            };
            let out = synth_diffusion(&cfg).unwrap();
            let e = out.truth.edges[0];
            let s = &out.series;
            // remove the shared daily profile so the noise drives the correlation
            let col = |r: usize| -> Vec<f64> { (0..s.steps()).map(|t| s.at(t, r)).collect() };
            let (xj, xi) = (col(e.src), col(e.dst));
            let t = s.steps();
            forward += corr(&xj[..t - 2], &xi[2..]);
            backward += corr(&xi[..t - 2], &xj[2..]);
        }
        assert!(forward > backward, "forward {forward} backward {backward}");
    }

    proptest! {
        #[test]
        fn windows_gather_directly(seed in 0u64..200, q in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = series_from(40, 3, |_| rng.random_range(0.0..1.0));
            let f = TimeFilter::from_offsets(&[0, -1, -5, -7]).unwrap();
            for w in make_windows(&s, &f, q) {
                prop_assert!(w.history_indices.windows(2).all(|p| p[0] < p[1]));
                for (k, &t) in w.history_indices.iter().enumerate() {
                    for r in 0..3 {
                        prop_assert_eq!(w.history[k * 3 + r], s.at(t, r));
                    }
                }
                for (k, &t) in w.future_indices.iter().enumerate() {
                    prop_assert_eq!(t, w.origin + 1 + k);
                    for r in 0..3 {
                        prop_assert_eq!(w.future[k * 3 + r], s.at(t, r));
                    }
                }
            }
        }

        #[test]
        fn filter_ignores_duplication_and_order(mut offs in prop::collection::vec(-50i64..=0, 0..10)) {
            offs.push(0);
            let a = TimeFilter::from_offsets(&offs).unwrap();
            let mut doubled = offs.clone();
            doubled.extend(offs.iter().rev());
            let b = TimeFilter::from_offsets(&doubled).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(TimeFilter::from_offsets(a.offsets()).unwrap(), a.clone());
            prop_assert!(a.offsets().windows(2).all(|w| w[0] > w[1]));
        }

        #[test]
        fn splits_reassemble(t in 10usize..300) {
            let s = series_from(t, 2, |i| i as f64);
            let (a, b, c) = chronological_split(&s, (7, 1, 2)).unwrap();
            prop_assert_eq!(a.steps() + b.steps() + c.steps(), t);
            prop_assert_eq!([a.values(), b.values(), c.values()].concat(), s.values().to_vec());
        }
    }
}
