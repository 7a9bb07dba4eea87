//! Spatial road embeddings (DeepWalk skip-gram), calendar encodings and the
//! embedding cache.

use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use icst_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{calendar_of, steps_per_day};
use crate::error::{read_to_string, write_string, IcstError, Result};
use crate::roadnet::RoadNetwork;

/// Unbiased random-walk skip-gram settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepWalkConfig {
    pub walk_length: usize,
    pub walks_per_road: usize,
    pub window: usize,
    pub dim: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for DeepWalkConfig {
    fn default() -> Self {
        Self {
            walk_length: 20,
            walks_per_road: 10,
            window: 5,
            dim: 64,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
        }
    }
}

/// Uniform random walks, `walks_per_road` rounds over a shuffled road order.
pub fn random_walks<R: Rng + ?Sized>(net: &RoadNetwork, cfg: &DeepWalkConfig, rng: &mut R) -> Vec<Vec<usize>> {
    let adj: Vec<Vec<usize>> = (0..net.num_roads()).map(|r| net.neighbors(r).collect()).collect();
    let mut order: Vec<usize> = (0..net.num_roads()).collect();
    let mut walks = Vec::with_capacity(order.len() * cfg.walks_per_road);
    for _ in 0..cfg.walks_per_road {
        order.shuffle(rng);
        for &s in &order {
            let mut walk = vec![s];
            while walk.len() < cfg.walk_length {
                let nbrs = &adj[*walk.last().unwrap()];
                if nbrs.is_empty() {
                    break;
                }
                walk.push(nbrs[rng.random_range(0..nbrs.len())]);
            }
            walks.push(walk);
        }
    }
    walks
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Learn an `N x dim` road embedding with skip-gram and negative sampling
/// over unbiased random walks. Deterministic for a given seed.
pub fn learn_spatial_embedding(net: &RoadNetwork, cfg: &DeepWalkConfig, seed: u64) -> Result<Tensor> {
    let n = net.num_roads();
    if cfg.dim < 2 {
        return Err(IcstError::Config(format!("embedding dim must be >= 2, got {}", cfg.dim)));
    }
    if n <= 1 {
        log::warn!("a single road has no structure to embed; using zeros");
        return Ok(Tensor::zeros(&[n, cfg.dim]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let walks = random_walks(net, cfg, &mut rng);
    let dim = cfg.dim;
    let mut input: Vec<f64> = (0..n * dim)
        .map(|_| rng.random_range(-0.5..0.5) / dim as f64)
        .collect();
    let mut output = vec![0.0; n * dim];

    // Negative sampling from the unigram distribution raised to 3/4.
    let mut counts = vec![0.0f64; n];
    for w in &walks {
        for &v in w {
            counts[v] += 1.0;
        }
    }
    let mut cdf: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let total: f64 = cdf.iter().sum();
    let mut acc = 0.0;
    for c in &mut cdf {
        acc += *c / total;
        *c = acc;
    }
    let draw = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        cdf.partition_point(|&c| c < u).min(n - 1)
    };

    let pairs_per_epoch: usize = walks
        .iter()
        .map(|w| (0..w.len()).map(|i| w.len().min(i + cfg.window + 1) - i.saturating_sub(cfg.window) - 1).sum::<usize>())
        .sum();
    let total_steps = (pairs_per_epoch * cfg.epochs).max(1) as f64;
    let mut step = 0usize;
    let mut grad = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        for walk in &walks {
            for (i, &center) in walk.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = walk.len().min(i + cfg.window + 1);
                for (j, &context) in walk.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = (cfg.learning_rate * (1.0 - step as f64 / total_steps)).max(cfg.learning_rate * 1e-4);
                    step += 1;
                    grad.fill(0.0);
                    let c = center * dim;
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let t = draw(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let o = target * dim;
                        let dot: f64 = (0..dim).map(|d| input[c + d] * output[o + d]).sum();
                        let g = lr * (label - sigmoid(dot));
                        for d in 0..dim {
                            grad[d] += g * output[o + d];
                            output[o + d] += g * input[c + d];
                        }
                    }
                    for d in 0..dim {
                        input[c + d] += grad[d];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[n, dim], input)?)
}

#[derive(Serialize, Deserialize)]
struct CacheSidecar {
    n: usize,
    dim: usize,
    seed: u64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Write an `N x dim` embedding as little-endian `f64` with a JSON sidecar
/// `<path>.json` holding `{"n", "dim", "seed"}`.
pub fn save_embedding(path: &Path, emb: &Tensor, seed: u64) -> Result<()> {
    let (n, dim) = (emb.shape()[0], emb.shape()[1]);
    let bytes: Vec<u8> = emb.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| IcstError::io(path, e))?;
    let side = serde_json::to_string(&CacheSidecar { n, dim, seed }).expect("sidecar serializes");
    write_string(&sidecar_path(path), &side)
}

/// Read a cached embedding and the seed it was learned with.
pub fn load_embedding(path: &Path) -> Result<(Tensor, u64)> {
    let side_path = sidecar_path(path);
    let side: CacheSidecar = serde_json::from_str(&read_to_string(&side_path)?)
        .map_err(|e| IcstError::json(&side_path, e))?;
    let bytes = std::fs::read(path).map_err(|e| IcstError::io(path, e))?;
    if bytes.len() != side.n * side.dim * 8 {
        return Err(IcstError::Data(format!(
            "{}: expected {} bytes for {}x{}, found {}",
            path.display(),
            side.n * side.dim * 8,
            side.n,
            side.dim,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(&[side.n, side.dim], data)?, side.seed))
}

/// Calendar position of a timestep: day of week and slot of day.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalEncoding {
    pub day: usize,
    pub slot: usize,
    /// Slots per day.
    pub slots: usize,
}

impl TemporalEncoding {
    pub fn width(&self) -> usize {
        7 + self.slots
    }

    /// Day-of-week one-hot followed by slot-of-day one-hot.
    pub fn onehot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        v[self.day] = 1.0;
        v[7 + self.slot] = 1.0;
        v
    }

    /// Indices of the two ones in [`Self::onehot`].
    pub fn active(&self) -> [usize; 2] {
        [self.day, 7 + self.slot]
    }
}

pub fn encode_time(abs_step: usize, start: NaiveDateTime, slot_minutes: u32) -> Result<TemporalEncoding> {
    let slots = steps_per_day(slot_minutes)?;
    let (day, slot) = calendar_of(abs_step, start, slot_minutes);
    Ok(TemporalEncoding { day, slot, slots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::default_start;
    use proptest::prelude::*;

    fn two_cliques() -> RoadNetwork {
        let mut e = Vec::new();
        for base in [0, 5] {
            for a in 0..5 {
                for b in a + 1..5 {
                    e.push((base + a, base + b));
                }
            }
        }
        RoadNetwork::new(10, &e).unwrap()
    }

    fn cosine(t: &Tensor, a: usize, b: usize) -> f64 {
        let d = t.shape()[1];
        let (x, y) = (&t.data()[a * d..(a + 1) * d], &t.data()[b * d..(b + 1) * d]);
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (nx * ny)
    }

    #[test]
    fn cliques_separate() {
        let emb = learn_spatial_embedding(&two_cliques(), &DeepWalkConfig::default(), 5).unwrap();
        let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0, 0);
        for a in 0..10 {
            for b in a + 1..10 {
                if (a < 5) == (b < 5) {
                    intra += cosine(&emb, a, b);
                    ni += 1;
                } else {
                    inter += cosine(&emb, a, b);
                    nx += 1;
                }
            }
        }
        assert!(intra / ni as f64 > inter / nx as f64);
    }

    #[test]
    fn embedding_is_deterministic_and_cacheable() {
        let cfg = DeepWalkConfig { epochs: 1, ..Default::default() };
        let a = learn_spatial_embedding(&two_cliques(), &cfg, 9).unwrap();
        let b = learn_spatial_embedding(&two_cliques(), &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[10, 64]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        save_embedding(&p, &a, 9).unwrap();
        let (c, seed) = load_embedding(&p).unwrap();
        assert_eq!((c, seed), (a, 9));
        std::fs::write(&p, [0u8; 12]).unwrap();
        assert!(load_embedding(&p).is_err());
    }

    #[test]
    fn single_road_embeds_to_zeros() {
        let net = RoadNetwork::new(1, &[]).unwrap();
        let e = learn_spatial_embedding(&net, &DeepWalkConfig::default(), 1).unwrap();
        assert!(e.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoding_widths() {
        assert_eq!(encode_time(0, default_start(), 5).unwrap().width(), 295);
        assert_eq!(encode_time(0, default_start(), 15).unwrap().width(), 103);
    }

    proptest! {
        #[test]
        fn onehot_has_two_ones_and_weekly_period(step in 0usize..100_000) {
            let e = encode_time(step, default_start(), 5).unwrap();
            let v = e.onehot();
            prop_assert_eq!(v.iter().filter(|x| **x == 1.0).count(), 2);
            prop_assert!(v[..7].iter().sum::<f64>() == 1.0);
            let later = encode_time(step + 7 * 288, default_start(), 5).unwrap();
            prop_assert_eq!(e, later);
            let next_day = encode_time(step + 288, default_start(), 5).unwrap();
            prop_assert_eq!(next_day.slot, e.slot);
            prop_assert_eq!(next_day.day, (e.day + 1) % 7);
        }
    }
}
