//! Seeded hierarchical navigable small world graph over fixed points.
//!
//! Classic layered proximity graph: each node draws its top layer from a
//! geometric distribution (decay `1/ln(M)`), layer 0 holds every node,
//! searches descend greedily through upper layers and run a best-first beam
//! of width `ef` at the bottom. Neighbor selection uses the pruning
//! heuristic with kept-pruned backfill. All tie-breaking is by node id and
//! the level generator is seeded, so identical inputs build identical graphs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HnswParams {
    /// Max neighbors per node per layer (layer 0 allows `2 * m`).
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self { m: 32, ef_construction: 200, ef_search: 64, seed: 0x5EED }
    }
}

/// (squared distance, id) with total order: distance first, then smaller id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DistId {
    dist: f64,
    id: u32,
}

impl Eq for DistId {}

impl Ord for DistId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .partial_cmp(&other.dist)
            .expect("distances are finite")
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for DistId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct Node {
    /// Neighbor lists, one per layer `0..=top_layer`.
    links: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct Hnsw {
    params: HnswParams,
    dim: usize,
    /// Row-major point storage; the graph owns its copy.
    points: Vec<f64>,
    nodes: Vec<Node>,
    entry: u32,
    top_layer: usize,
}

impl Hnsw {
    /// Builds the graph by inserting every point in index order.
    pub fn build(points: &[f64], dim: usize, params: HnswParams) -> Self {
        assert!(dim > 0 && points.len() % dim == 0, "points must be n x dim");
        let n = points.len() / dim;
        assert!(n > 0, "need at least one point");
        let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m as f64).ln();
        let mut hnsw = Self {
            params,
            dim,
            points: points.to_vec(),
            nodes: Vec::with_capacity(n),
            entry: 0,
            top_layer: 0,
        };
        for id in 0..n as u32 {
            let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
            let level = (-u.ln() * ml).floor() as usize;
            hnsw.insert(id, level);
        }
        hnsw
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn point(&self, id: u32) -> &[f64] {
        let i = id as usize * self.dim;
        &self.points[i..i + self.dim]
    }

    fn dist_to(&self, q: &[f64], id: u32) -> f64 {
        sq_dist(q, self.point(id))
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, id: u32, level: usize) {
        let node = Node { links: vec![Vec::new(); level + 1] };
        self.nodes.push(node);
        if self.nodes.len() == 1 {
            self.entry = id;
            self.top_layer = level;
            return;
        }
        let q = self.point(id).to_vec();
        let mut ep = self.entry;
        // Greedy descent through layers above the node's top layer.
        for layer in ((level + 1)..=self.top_layer).rev() {
            ep = self.greedy_closest(&q, ep, layer);
        }
        // Beam search and linking from min(level, top) down to 0.
        for layer in (0..=level.min(self.top_layer)).rev() {
            let found = self.search_layer(&q, &[ep], self.params.ef_construction, layer);
            let selected = self.select_neighbors(&found, self.params.m);
            for &DistId { id: nbr, .. } in &selected {
                self.nodes[id as usize].links[layer].push(nbr);
                self.nodes[nbr as usize].links[layer].push(id);
                let cap = self.max_links(layer);
                if self.nodes[nbr as usize].links[layer].len() > cap {
                    self.shrink_links(nbr, layer, cap);
                }
            }
            if let Some(best) = found.first() {
                ep = best.id;
            }
        }
        if level > self.top_layer {
            self.top_layer = level;
            self.entry = id;
        }
    }

    fn shrink_links(&mut self, node: u32, layer: usize, cap: usize) {
        let center = self.point(node).to_vec();
        let mut cands: Vec<DistId> = self.nodes[node as usize].links[layer]
            .iter()
            .map(|&n| DistId { dist: self.dist_to(&center, n), id: n })
            .collect();
        cands.sort();
        cands.dedup_by_key(|c| c.id);
        let selected = self.select_neighbors(&cands, cap);
        self.nodes[node as usize].links[layer] = selected.into_iter().map(|c| c.id).collect();
    }

    /// Pruning heuristic: keep a candidate only if it is closer to the query
    /// than to every already-kept neighbor; backfill with pruned candidates
    /// if the quota is not met.
    fn select_neighbors(&self, sorted: &[DistId], m: usize) -> Vec<DistId> {
        let mut kept: Vec<DistId> = Vec::with_capacity(m);
        let mut pruned: Vec<DistId> = Vec::new();
        for &cand in sorted {
            if kept.len() >= m {
                break;
            }
            let cp = self.point(cand.id);
            let dominated = kept.iter().any(|k| sq_dist(cp, self.point(k.id)) < cand.dist);
            if dominated {
                pruned.push(cand);
            } else {
                kept.push(cand);
            }
        }
        for cand in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(cand);
        }
        kept
    }

    fn greedy_closest(&self, q: &[f64], start: u32, layer: usize) -> u32 {
        let mut best = start;
        let mut best_dist = self.dist_to(q, best);
        loop {
            let mut improved = false;
            for &nbr in &self.nodes[best as usize].links[layer] {
                let d = self.dist_to(q, nbr);
                if d < best_dist || (d == best_dist && nbr < best) {
                    best = nbr;
                    best_dist = d;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Best-first beam search restricted to `layer`; returns up to `ef`
    /// results sorted ascending by (distance, id).
    fn search_layer(&self, q: &[f64], entries: &[u32], ef: usize, layer: usize) -> Vec<DistId> {
        let mut visited = vec![false; self.nodes.len()];
        // Min-heap of candidates via Reverse ordering, max-heap of results.
        let mut candidates: BinaryHeap<std::cmp::Reverse<DistId>> = BinaryHeap::new();
        let mut results: BinaryHeap<DistId> = BinaryHeap::new();
        for &e in entries {
            if visited[e as usize] {
                continue;
            }
            visited[e as usize] = true;
            let d = DistId { dist: self.dist_to(q, e), id: e };
            candidates.push(std::cmp::Reverse(d));
            results.push(d);
        }
        while let Some(std::cmp::Reverse(cand)) = candidates.pop() {
            let worst = results.peek().copied().expect("results nonempty");
            if results.len() >= ef && cand.dist > worst.dist {
                break;
            }
            for &nbr in &self.nodes[cand.id as usize].links[layer] {
                if visited[nbr as usize] {
                    continue;
                }
                visited[nbr as usize] = true;
                let d = DistId { dist: self.dist_to(q, nbr), id: nbr };
                let worst = results.peek().copied().expect("results nonempty");
                if results.len() < ef || d < worst {
                    candidates.push(std::cmp::Reverse(d));
                    results.push(d);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<DistId> = results.into_vec();
        out.sort();
        out
    }

    /// Approximate `n` nearest neighbors of `q` (squared L2), ascending by
    /// (distance, id). `ef` widens the bottom-layer beam; it is clamped to
    /// at least `n`.
    pub fn search(&self, q: &[f64], n: usize, ef: usize) -> Vec<(u32, f64)> {
        assert_eq!(q.len(), self.dim, "query dimension mismatch");
        if self.nodes.is_empty() || n == 0 {
            return Vec::new();
        }
        let mut ep = self.entry;
        for layer in (1..=self.top_layer).rev() {
            ep = self.greedy_closest(q, ep, layer);
        }
        let found = self.search_layer(q, &[ep], ef.max(n), 0);
        found.into_iter().take(n).map(|d| (d.id, d.dist)).collect()
    }

    /// Top layer of each node; layer 0 contains all nodes by construction.
    pub fn node_levels(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.links.len() - 1).collect()
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points(n: usize) -> Vec<f64> {
        // 2-d grid: exact nearest neighbors are easy to reason about.
        (0..n).flat_map(|i| vec![(i % 10) as f64, (i / 10) as f64]).collect()
    }

    #[test]
    fn single_point_graph_returns_it() {
        let h = Hnsw::build(&[1.0, 2.0, 3.0], 3, HnswParams::default());
        let r = h.search(&[0.0, 0.0, 0.0], 1, 16);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].0, 0);
    }

    #[test]
    fn exhaustive_ef_returns_all_points_in_distance_order() {
        let pts = grid_points(60);
        let h = Hnsw::build(&pts, 2, HnswParams { m: 8, ef_construction: 40, ef_search: 60, seed: 7 });
        let q = [3.2, 2.9];
        let r = h.search(&q, 60, 60);
        assert_eq!(r.len(), 60);
        for w in r.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
        let mut ids: Vec<u32> = r.iter().map(|x| x.0).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn builds_are_deterministic() {
        let pts = grid_points(80);
        let p = HnswParams { m: 6, ef_construction: 30, ef_search: 20, seed: 42 };
        let a = Hnsw::build(&pts, 2, p);
        let b = Hnsw::build(&pts, 2, p);
        assert_eq!(a.node_levels(), b.node_levels());
        for q in [[0.0, 0.0], [9.0, 5.0], [4.5, 4.5]] {
            assert_eq!(a.search(&q, 5, 20), b.search(&q, 5, 20));
        }
    }

    #[test]
    fn layer_zero_contains_every_node() {
        let pts = grid_points(50);
        let h = Hnsw::build(&pts, 2, HnswParams { m: 4, ..Default::default() });
        assert_eq!(h.node_levels().len(), 50);
    }

    #[test]
    fn finds_exact_neighbor_on_grid() {
        let pts = grid_points(100);
        let h = Hnsw::build(&pts, 2, HnswParams { m: 8, ef_construction: 60, ef_search: 40, seed: 3 });
        // Query exactly at point 37 = (7, 3).
        let r = h.search(&[7.0, 3.0], 1, 40);
        assert_eq!(r[0].0, 37);
        assert_eq!(r[0].1, 0.0);
    }
}
