//! Undirected road network, neighbourhood queries and road-pair enumeration.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, IcstError, Result};

/// Undirected, unweighted road graph over `num_roads` roads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoadNetwork {
    num_roads: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct NetworkJson {
    num_roads: usize,
    edges: Vec<[usize; 2]>,
}

impl RoadNetwork {
    /// Build from an edge list. Duplicate edges are merged; self loops and
    /// out-of-range endpoints are rejected.
    pub fn new(num_roads: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            for v in [a, b] {
                if v >= num_roads {
                    return Err(IcstError::Range {
                        what: "road",
                        index: v,
                        size: num_roads,
                    });
                }
            }
            if a == b {
                return Err(IcstError::Data(format!("self edge on road {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let mut adjacency = vec![false; num_roads * num_roads];
        for &(a, b) in &set {
            adjacency[a * num_roads + b] = true;
            adjacency[b * num_roads + a] = true;
        }
        Ok(Self {
            num_roads,
            edges: set.into_iter().collect(),
            adjacency,
        })
    }

    /// Erdős–Rényi graph `G(n, p)`. With `connect`, components are joined by
    /// linking each component's smallest road to the previous component.
    pub fn random<R: Rng + ?Sized>(n: usize, p: f64, connect: bool, rng: &mut R) -> Self {
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((a, b));
                }
            }
        }
        let mut net = Self::new(n, &edges).expect("generated edges are in range");
        if connect {
            let comps = net.components();
            for w in comps.windows(2) {
                let a = w[0][rng.random_range(0..w[0].len())];
                let b = w[1][rng.random_range(0..w[1].len())];
                edges.push((a, b));
            }
            net = Self::new(n, &edges).expect("generated edges are in range");
        }
        net
    }

    pub fn num_roads(&self) -> usize {
        self.num_roads
    }

    /// Sorted unordered edges with `a < b`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a * self.num_roads + b]
    }

    pub fn neighbors(&self, road: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_roads).filter(move |&b| self.is_adjacent(road, b))
    }

    fn check_road(&self, road: usize) -> Result<()> {
        if road >= self.num_roads {
            return Err(IcstError::Range {
                what: "road",
                index: road,
                size: self.num_roads,
            });
        }
        Ok(())
    }

    /// Breadth-first distances from `road`, `None` when unreachable.
    pub fn distances_from(&self, road: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_roads];
        dist[road] = Some(0);
        let mut queue = VecDeque::from([road]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.num_roads];
        let mut out = Vec::new();
        for s in 0..self.num_roads {
            if seen[s] {
                continue;
            }
            let comp: Vec<usize> = self
                .distances_from(s)
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.map(|_| i))
                .collect();
            for &i in &comp {
                seen[i] = true;
            }
            out.push(comp);
        }
        out
    }

    /// Roads at graph distance `1..=max_order` from `road`, with their
    /// minimal distance.
    pub fn neighbors_up_to_order(&self, road: usize, max_order: usize) -> Result<Vec<(usize, usize)>> {
        self.check_road(road)?;
        Ok(self
            .distances_from(road)
            .into_iter()
            .enumerate()
            .filter_map(|(i, d)| match d {
                Some(d) if d >= 1 && d <= max_order => Some((i, d)),
                _ => None,
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        let j = NetworkJson {
            num_roads: self.num_roads,
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
        };
        serde_json::to_string_pretty(&j).expect("network serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("m,n\n");
        for (a, b) in &self.edges {
            s.push_str(&format!("{a},{b}\n"));
        }
        s
    }
}

/// Load a network from a `m,n` edge-list CSV or a JSON object
/// `{"num_roads": N, "edges": [[m, n], ...]}`. For CSV, `num_roads`
/// defaults to one past the largest index.
pub fn load_network(path: &Path, num_roads: Option<usize>) -> Result<RoadNetwork> {
    let text = read_to_string(path)?;
    if text.trim_start().starts_with('{') {
        let j: NetworkJson = serde_json::from_str(&text).map_err(|e| IcstError::json(path, e))?;
        if let Some(n) = num_roads {
            if n != j.num_roads {
                return Err(IcstError::Data(format!(
                    "{} declares {} roads, expected {n}",
                    path.display(),
                    j.num_roads
                )));
            }
        }
        let edges: Vec<_> = j.edges.iter().map(|e| (e[0], e[1])).collect();
        return RoadNetwork::new(j.num_roads, &edges);
    }
    let edges = parse_edge_csv(&text, path)?;
    let n = num_roads.unwrap_or_else(|| edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0));
    RoadNetwork::new(n, &edges)
}

fn parse_edge_csv(text: &str, path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut edges = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| IcstError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let fail = |reason: String| IcstError::Parse {
            path: path.display().to_string(),
            line,
            reason,
        };
        if rec.len() != 2 {
            return Err(fail(format!("expected `m,n`, got {} fields", rec.len())));
        }
        match (rec[0].parse::<usize>(), rec[1].parse::<usize>()) {
            (Ok(a), Ok(b)) => edges.push((a, b)),
            _ if edges.is_empty() && i == 0 => {} // header row
            _ => return Err(fail(format!("cannot parse `{},{}` as road indices", &rec[0], &rec[1]))),
        }
    }
    Ok(edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairOrder {
    First,
    Second,
}

/// Unordered road pair `(m, n)` with `m < n` at graph distance 1 or 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoadPair {
    pub m: usize,
    pub n: usize,
    pub order: PairOrder,
}

/// Enumerate the pair set: every unordered pair at distance 1 or 2 with at
/// least one endpoint in `targets` (all roads when `None`), sorted
/// lexicographically and truncated to `max_pairs` when given.
pub fn enumerate_road_pairs(
    net: &RoadNetwork,
    targets: Option<&[usize]>,
    max_pairs: Option<usize>,
) -> Result<Vec<RoadPair>> {
    let n = net.num_roads();
    let mut is_target = vec![targets.is_none(); n];
    for &t in targets.unwrap_or(&[]) {
        net.check_road(t)?;
        is_target[t] = true;
    }
    let mut pairs = Vec::new();
    for m in 0..n {
        let dist = net.distances_from(m);
        for (k, d) in dist.iter().enumerate().skip(m + 1) {
            let order = match d {
                Some(1) => PairOrder::First,
                Some(2) => PairOrder::Second,
                _ => continue,
            };
            if is_target[m] || is_target[k] {
                pairs.push(RoadPair { m, n: k, order });
            }
        }
    }
    if let Some(cap) = max_pairs {
        pairs.truncate(cap);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path(n: usize) -> RoadNetwork {
        let e: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        RoadNetwork::new(n, &e).unwrap()
    }

    #[test]
    fn adjacency_is_symmetric() {
        let net = RoadNetwork::new(3, &[(0, 1), (1, 2)]).unwrap();
        let count = (0..3).flat_map(|a| (0..3).map(move |b| (a, b))).filter(|&(a, b)| net.is_adjacent(a, b)).count();
        assert_eq!(count, 4);
        assert_eq!(net.edges().len(), 2);
    }

    #[test]
    fn empty_network_has_isolated_roads() {
        let net = RoadNetwork::new(4, &[]).unwrap();
        assert!(net.edges().is_empty());
        assert!(net.neighbors_up_to_order(2, 2).unwrap().is_empty());
    }

    #[test]
    fn rejects_self_and_out_of_range_edges() {
        assert!(RoadNetwork::new(3, &[(1, 1)]).is_err());
        assert!(matches!(RoadNetwork::new(3, &[(0, 3)]), Err(IcstError::Range { index: 3, .. })));
        let net = RoadNetwork::new(3, &[(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(net.edges(), &[(0, 1)]);
    }

    #[test]
    fn path_neighbors() {
        let net = path(3);
        assert_eq!(net.neighbors_up_to_order(0, 2).unwrap(), vec![(1, 1), (2, 2)]);
        assert!(net.neighbors_up_to_order(3, 2).is_err());
    }

    #[test]
    fn star_leaf_sees_center_and_other_leaves() {
        let edges: Vec<_> = (1..=5).map(|i| (0, i)).collect();
        let net = RoadNetwork::new(6, &edges).unwrap();
        let got = net.neighbors_up_to_order(3, 2).unwrap();
        let want: Vec<_> = vec![(0, 1), (1, 2), (2, 2), (4, 2), (5, 2)];
        assert_eq!(got, want);
    }

    #[test]
    fn triangle_pairs_are_first_order() {
        let net = RoadNetwork::new(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let pairs = enumerate_road_pairs(&net, None, None).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.order == PairOrder::First));
    }

    #[test]
    fn targeted_pairs_on_path() {
        let pairs = enumerate_road_pairs(&path(4), Some(&[0]), None).unwrap();
        assert_eq!(
            pairs,
            vec![
                RoadPair { m: 0, n: 1, order: PairOrder::First },
                RoadPair { m: 0, n: 2, order: PairOrder::Second },
            ]
        );
    }

    #[test]
    fn max_pairs_truncates_lexicographically() {
        let pairs = enumerate_road_pairs(&path(5), None, Some(2)).unwrap();
        assert_eq!(pairs.iter().map(|p| (p.m, p.n)).collect::<Vec<_>>(), vec![(0, 1), (0, 2)]);
    }

    /// All-pairs shortest paths by Floyd–Warshall.
    fn floyd(net: &RoadNetwork) -> Vec<Vec<usize>> {
        let n = net.num_roads();
        let inf = usize::MAX / 4;
        let mut d = vec![vec![inf; n]; n];
        for i in 0..n {
            d[i][i] = 0;
        }
        for &(a, b) in net.edges() {
            d[a][b] = 1;
            d[b][a] = 1;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn pair_count_matches_floyd_warshall() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = RoadNetwork::random(10, 0.3, false, &mut rng);
        let d = floyd(&net);
        let want = (0..10)
            .flat_map(|i| (i + 1..10).map(move |j| (i, j)))
            .filter(|&(i, j)| d[i][j] == 1 || d[i][j] == 2)
            .count();
        assert_eq!(enumerate_road_pairs(&net, None, None).unwrap().len(), want);
    }

    #[test]
    fn csv_and_json_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "m,n\n0,1\n1,2\n").unwrap();
        let net = load_network(&p, None).unwrap();
        assert_eq!(net.num_roads(), 3);
        std::fs::write(&p, "0,1\n1,x\n").unwrap();
        match load_network(&p, None) {
            Err(IcstError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "0,5\n").unwrap();
        assert!(matches!(load_network(&p, Some(3)), Err(IcstError::Range { .. })));
        std::fs::write(&p, "").unwrap();
        assert_eq!(load_network(&p, Some(4)).unwrap().num_roads(), 4);

        let j = dir.path().join("e.json");
        std::fs::write(&j, net.to_json()).unwrap();
        assert_eq!(load_network(&j, None).unwrap(), net);
    }

    proptest! {
        #[test]
        fn pairs_respect_distance_and_bound(seed in 0u64..500, n in 2usize..12, p in 0.05f64..0.8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = RoadNetwork::random(n, p, false, &mut rng);
            let d = floyd(&net);
            let pairs = enumerate_road_pairs(&net, None, None).unwrap();
            prop_assert!(pairs.len() <= n * (n - 1) / 2);
            let mut seen = BTreeSet::new();
            for pr in &pairs {
                prop_assert!(pr.m < pr.n);
                prop_assert!(seen.insert((pr.m, pr.n)));
                let dist = d[pr.m][pr.n];
                prop_assert!(dist == 1 || dist == 2);
                prop_assert_eq!(pr.order == PairOrder::First, dist == 1);
            }
        }

        #[test]
        fn pairs_are_relabeling_equivariant(seed in 0u64..500, n in 3usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = RoadNetwork::random(n, 0.35, false, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % n);
            let edges: Vec<_> = net.edges().iter().map(|&(a, b)| (perm[a], perm[b])).collect();
            let relabeled = RoadNetwork::new(n, &edges).unwrap();
            let mut mapped: Vec<_> = enumerate_road_pairs(&net, None, None)
                .unwrap()
                .iter()
                .map(|p| (perm[p.m].min(perm[p.n]), perm[p.m].max(perm[p.n]), p.order))
                .collect();
            mapped.sort();
            let got: Vec<_> = enumerate_road_pairs(&relabeled, None, None)
                .unwrap()
                .iter()
                .map(|p| (p.m, p.n, p.order))
                .collect();
            prop_assert_eq!(got, mapped);
        }
    }
}
