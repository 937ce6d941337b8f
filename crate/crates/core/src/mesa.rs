//! Sparse area matching over two Area Graphs.
//!
//! For every source area an Area Markov Random Field is built over the
//! target graph, its binary energy is minimized exactly with an s-t min-cut,
//! and the resulting candidates are ranked by a global energy that also
//! looks at parents, children and neighbors of both areas.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, Area};
use crate::graph::{AreaGraph, NodeOrigin};
use crate::similarity::{Cell, SimilarityError, SimilarityMatrix, SimilarityProvider};

#[derive(Debug, Error)]
pub enum MesaError {
    #[error("labeling has {got} entries, field has {expected} nodes")]
    SizeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

/// Binary field over target nodes. `unary[i]` is the similarity of node
/// `nodes[i]` to the source; edges use local indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Amrf {
    pub nodes: Vec<usize>,
    pub unary: Vec<f64>,
    pub edges: Vec<(usize, usize, f64)>,
    pub lambda: f64,
}

impl Amrf {
    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    /// Local edges of the general adjacency (adjacency plus inclusion,
    /// undirected) among `nodes`, weighted by IoU.
    pub fn edges_from_graph(g: &AreaGraph, nodes: &[usize]) -> Vec<(usize, usize, f64)> {
        let mut local = vec![usize::MAX; g.len()];
        for (i, &n) in nodes.iter().enumerate() {
            local[n] = i;
        }
        let mut pairs: Vec<(usize, usize)> = g
            .adjacency_edges()
            .iter()
            .chain(g.inclusion_edges())
            .filter_map(|&(a, b)| {
                let (la, lb) = (local[a], local[b]);
                (la != usize::MAX && lb != usize::MAX && la != lb).then_some((la.min(lb), la.max(lb)))
            })
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
            .into_iter()
            .map(|(a, b)| {
                let w = iou(&g.nodes()[nodes[a]].area, &g.nodes()[nodes[b]].area);
                (a, b, w)
            })
            .collect()
    }
}

/// `sum |x_i - S_i| + lambda * sum w_ij [x_i != x_j]`.
pub fn total_energy(x: &[bool], f: &Amrf) -> Result<f64, MesaError> {
    if x.len() != f.len() {
        return Err(MesaError::SizeMismatch {
            expected: f.len(),
            got: x.len(),
        });
    }
    let unary: f64 = x
        .iter()
        .zip(&f.unary)
        .map(|(&xi, &s)| (if xi { 1.0 } else { 0.0 } - s).abs())
        .sum();
    let pair: f64 = f
        .edges
        .iter()
        .filter(|&&(i, j, _)| x[i] != x[j])
        .map(|&(_, _, w)| w)
        .sum();
    Ok(unary + f.lambda * pair)
}

const FLOW_EPS: f64 = 1e-12;

/// Dinic max-flow on real capacities.
struct FlowNet {
    head: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<f64>,
}

impl FlowNet {
    fn new(n: usize) -> Self {
        Self {
            head: vec![Vec::new(); n],
            to: Vec::new(),
            cap: Vec::new(),
        }
    }

    fn add_edge(&mut self, u: usize, v: usize, c: f64) {
        self.head[u].push(self.to.len());
        self.to.push(v);
        self.cap.push(c);
        self.head[v].push(self.to.len());
        self.to.push(u);
        self.cap.push(0.0);
    }

    fn levels(&self, s: usize) -> Vec<Option<usize>> {
        let mut level = vec![None; self.head.len()];
        level[s] = Some(0);
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.head[u] {
                let v = self.to[e];
                if self.cap[e] > FLOW_EPS && level[v].is_none() {
                    level[v] = Some(level[u].unwrap() + 1);
                    queue.push_back(v);
                }
            }
        }
        level
    }

    fn augment(&mut self, u: usize, t: usize, pushed: f64, level: &[Option<usize>], next: &mut [usize]) -> f64 {
        if u == t {
            return pushed;
        }
        while next[u] < self.head[u].len() {
            let e = self.head[u][next[u]];
            let v = self.to[e];
            if self.cap[e] > FLOW_EPS && level[v] == level[u].map(|l| l + 1) {
                let f = self.augment(v, t, pushed.min(self.cap[e]), level, next);
                if f > 0.0 {
                    self.cap[e] -= f;
                    self.cap[e ^ 1] += f;
                    return f;
                }
            }
            next[u] += 1;
        }
        0.0
    }

    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        loop {
            let level = self.levels(s);
            if level[t].is_none() {
                return flow;
            }
            let mut next = vec![0; self.head.len()];
            loop {
                let f = self.augment(s, t, f64::INFINITY, &level, &mut next);
                if f <= 0.0 {
                    break;
                }
                flow += f;
            }
        }
    }
}

/// Exact minimizer of [`total_energy`] by s-t min-cut. Nodes left on the
/// source side of the cut take label 1.
pub fn min_cut_solve(f: &Amrf) -> Vec<bool> {
    let n = f.len();
    if n == 0 {
        return Vec::new();
    }
    let (s, t) = (n, n + 1);
    let mut net = FlowNet::new(n + 2);
    for (i, &si) in f.unary.iter().enumerate() {
        // Cutting s->i labels i with 0 and costs S_i; cutting i->t costs 1 - S_i.
        net.add_edge(s, i, si);
        net.add_edge(i, t, 1.0 - si);
    }
    for &(i, j, w) in &f.edges {
        let c = f.lambda * w;
        if c > 0.0 {
            net.add_edge(i, j, c);
            net.add_edge(j, i, c);
        }
    }
    net.max_flow(s, t);
    let level = net.levels(s);
    (0..n).map(|i| level[i].is_some()).collect()
}

/// Weights of the four global-energy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            mu: 4.0,
            alpha: 2.0,
            beta: 2.0,
            gamma: 2.0,
        }
    }
}

/// Global-energy terms; relation terms are `None` when either side lacks
/// that relation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    pub e_self: f64,
    pub e_parent: Option<f64>,
    pub e_children: Option<f64>,
    pub e_neighbor: Option<f64>,
}

impl EnergyTerms {
    /// Weighted mean of the present terms.
    pub fn combine(&self, w: &EnergyWeights) -> f64 {
        let mut num = w.mu * self.e_self;
        let mut z = w.mu;
        for (term, weight) in [
            (self.e_parent, w.alpha),
            (self.e_children, w.beta),
            (self.e_neighbor, w.gamma),
        ] {
            if let Some(e) = term {
                num += weight * e;
                z += weight;
            }
        }
        if z > 0.0 {
            num / z
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Source in image 0, target in image 1.
    Forward,
    /// Source in image 1, target in image 0.
    Reverse,
    /// Both passes agreed.
    Both,
}

/// A matched pair of areas, `area0` in image 0 and `area1` in image 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaMatch {
    /// Source node id in the graph of the source image.
    pub source: usize,
    pub area0: Area,
    pub area1: Area,
    pub energy: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MesaParams {
    pub lambda: f64,
    pub weights: EnergyWeights,
    pub t_emax: f64,
    pub t_er: f64,
    pub source_level: usize,
    pub bidirectional: bool,
}

impl Default for MesaParams {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            weights: EnergyWeights::default(),
            t_emax: 0.35,
            t_er: 0.1,
            source_level: 1,
            bidirectional: false,
        }
    }
}

/// Similarity lookups from one graph's point of view. With pruning enabled
/// every request first resolves the pairs of its parents so that a weak
/// parent pair can prune it before the provider is asked.
pub struct SimView<'a> {
    pub g0: &'a AreaGraph,
    pub g1: &'a AreaGraph,
    pub ms: &'a SimilarityMatrix,
    pub provider: &'a dyn SimilarityProvider,
    pub reversed: bool,
}

impl SimView<'_> {
    fn src_graph(&self) -> &AreaGraph {
        if self.reversed {
            self.g1
        } else {
            self.g0
        }
    }

    fn tgt_graph(&self) -> &AreaGraph {
        if self.reversed {
            self.g0
        } else {
            self.g1
        }
    }

    /// Similarity of source-graph node `s` and target-graph node `t`.
    pub fn sim(&self, s: usize, t: usize) -> Result<f64, SimilarityError> {
        let (i, j) = if self.reversed { (t, s) } else { (s, t) };
        match self.ms.cell(i, j)? {
            Cell::Value(v) => return Ok(v),
            Cell::Pruned => return Ok(0.0),
            Cell::Uncomputed => {}
        }
        if self.ms.pruning() {
            let ps = self.src_graph().parents(s).unwrap_or(&[]);
            let pt = self.tgt_graph().parents(t).unwrap_or(&[]);
            for &p in ps {
                for &q in pt {
                    self.sim(p, q)?;
                }
            }
        }
        self.ms.get_or_compute(i, j, self.g0, self.g1, self.provider)
    }

    fn min_over(&self, a: &[usize], b: &[usize]) -> Result<Option<f64>, SimilarityError> {
        let mut best: Option<f64> = None;
        for &p in a {
            for &q in b {
                let e = (1.0 - self.sim(p, q)?).abs();
                best = Some(best.map_or(e, |m| m.min(e)));
            }
        }
        Ok(best)
    }

    pub fn e_self(&self, src: usize, h: usize) -> Result<f64, SimilarityError> {
        Ok((1.0 - self.sim(src, h)?).abs())
    }

    pub fn e_parent(&self, src: usize, h: usize) -> Result<Option<f64>, SimilarityError> {
        self.min_over(
            self.src_graph().parents(src).unwrap_or(&[]),
            self.tgt_graph().parents(h).unwrap_or(&[]),
        )
    }

    pub fn e_children(&self, src: usize, h: usize) -> Result<Option<f64>, SimilarityError> {
        self.min_over(
            self.src_graph().children(src).unwrap_or(&[]),
            self.tgt_graph().children(h).unwrap_or(&[]),
        )
    }

    pub fn e_neighbor(&self, src: usize, h: usize) -> Result<Option<f64>, SimilarityError> {
        self.min_over(
            self.src_graph().neighbors(src).unwrap_or(&[]),
            self.tgt_graph().neighbors(h).unwrap_or(&[]),
        )
    }

    pub fn terms(&self, src: usize, h: usize) -> Result<EnergyTerms, SimilarityError> {
        Ok(EnergyTerms {
            e_self: self.e_self(src, h)?,
            e_parent: self.e_parent(src, h)?,
            e_children: self.e_children(src, h)?,
            e_neighbor: self.e_neighbor(src, h)?,
        })
    }

    pub fn global_energy(&self, src: usize, h: usize, w: &EnergyWeights) -> Result<f64, SimilarityError> {
        Ok(self.terms(src, h)?.combine(w))
    }

    /// Field over every non-fallback node of the target graph.
    pub fn build_amrf(&self, src: usize, lambda: f64) -> Result<Amrf, SimilarityError> {
        let g = self.tgt_graph();
        let nodes: Vec<usize> = g
            .nodes()
            .iter()
            .filter(|n| n.origin != NodeOrigin::Fallback)
            .map(|n| n.id)
            .collect();
        let unary = nodes.iter().map(|&t| self.sim(src, t)).collect::<Result<Vec<_>, _>>()?;
        let edges = Amrf::edges_from_graph(g, &nodes);
        Ok(Amrf {
            nodes,
            unary,
            edges,
            lambda,
        })
    }
}

/// Outcome of refining one candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub area: Area,
    pub energy: f64,
    /// Candidates that were fused, best first.
    pub fused: Vec<usize>,
}

/// Pick the lowest-energy candidate (ties to the lowest id), reject it above
/// `t_emax`, then fuse every candidate within `t_er` of it by softmin-weighted
/// corner averaging.
pub fn refine_and_fuse(candidates: &[(usize, Area, f64)], t_emax: f64, t_er: f64) -> Option<Refined> {
    let &(_, _, best) = candidates
        .iter()
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)))?;
    if best > t_emax {
        return None;
    }
    let mut kept: Vec<&(usize, Area, f64)> = candidates.iter().filter(|c| (c.2 - best).abs() <= t_er).collect();
    kept.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    let weights: Vec<f64> = kept.iter().map(|c| (-c.2).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut corners = [0.0f64; 4];
    for (c, w) in kept.iter().zip(&weights) {
        let a = &c.1;
        for (acc, v) in corners.iter_mut().zip([a.x_min(), a.y_min(), a.x_max(), a.y_max()]) {
            *acc += w / total * v as f64;
        }
    }
    let [x0, y0, x1, y1] = corners.map(|v| v.round() as i32);
    let area = Area::new(x0, y0, x1.max(x0 + 1), y1.max(y0 + 1)).expect("non-degenerate fused area");
    Some(Refined {
        area,
        energy: best,
        fused: kept.iter().map(|c| c.0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source: usize,
    pub direction: Direction,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MesaReport {
    pub matches: Vec<AreaMatch>,
    /// Forward source nodes without a match.
    pub unmatched: Vec<usize>,
    pub failures: Vec<SourceFailure>,
}

fn match_one(view: &SimView<'_>, src: usize, params: &MesaParams) -> Result<Option<AreaMatch>, SimilarityError> {
    let field = view.build_amrf(src, params.lambda)?;
    let labels = min_cut_solve(&field);
    let tgt = view.tgt_graph();
    let mut candidates = Vec::new();
    for (i, &on) in labels.iter().enumerate() {
        if on {
            let h = field.nodes[i];
            let e = view.global_energy(src, h, &params.weights)?;
            candidates.push((h, tgt.nodes()[h].area, e));
        }
    }
    let Some(r) = refine_and_fuse(&candidates, params.t_emax, params.t_er) else {
        return Ok(None);
    };
    let own = view.src_graph().nodes()[src].area;
    let (area0, area1, direction) = if view.reversed {
        (r.area, own, Direction::Reverse)
    } else {
        (own, r.area, Direction::Forward)
    };
    Ok(Some(AreaMatch {
        source: src,
        area0,
        area1,
        energy: r.energy,
        direction,
    }))
}

fn run_pass(view: &SimView<'_>, params: &MesaParams) -> Vec<(usize, Result<Option<AreaMatch>, SimilarityError>)> {
    let sources = view.src_graph().source_nodes(params.source_level);
    if view.tgt_graph().is_empty() {
        return sources.into_iter().map(|s| (s, Ok(None))).collect();
    }
    // Pruning makes cell contents depend on request order, so keep it sequential.
    if view.ms.pruning() {
        sources.into_iter().map(|s| (s, match_one(view, s, params))).collect()
    } else {
        sources.into_par_iter().map(|s| (s, match_one(view, s, params))).collect()
    }
}

/// Merge forward and reverse matches. A forward match pairs with the unused
/// reverse match of highest agreement when both images' areas overlap with
/// IoU at least 0.5; paired matches are averaged.
pub fn merge_bidirectional(forward: Vec<AreaMatch>, reverse: Vec<AreaMatch>) -> Vec<AreaMatch> {
    let mut used = vec![false; reverse.len()];
    let mut out = Vec::with_capacity(forward.len() + reverse.len());
    for f in forward {
        let mut best: Option<(usize, f64)> = None;
        for (k, r) in reverse.iter().enumerate() {
            if used[k] {
                continue;
            }
            let agree = iou(&f.area0, &r.area0).min(iou(&f.area1, &r.area1));
            if agree >= 0.5 && best.is_none_or(|(_, b)| agree > b) {
                best = Some((k, agree));
            }
        }
        match best {
            Some((k, _)) => {
                used[k] = true;
                let r = &reverse[k];
                out.push(AreaMatch {
                    source: f.source,
                    area0: average(&f.area0, &r.area0),
                    area1: average(&f.area1, &r.area1),
                    energy: (f.energy + r.energy) / 2.0,
                    direction: Direction::Both,
                });
            }
            None => out.push(f),
        }
    }
    out.extend(reverse.into_iter().zip(used).filter(|(_, u)| !u).map(|(r, _)| r));
    out
}

fn average(a: &Area, b: &Area) -> Area {
    let m = |p: i32, q: i32| ((p as f64 + q as f64) / 2.0).round() as i32;
    let (x0, y0) = (m(a.x_min(), b.x_min()), m(a.y_min(), b.y_min()));
    let (x1, y1) = (m(a.x_max(), b.x_max()), m(a.y_max(), b.y_max()));
    Area::new(x0, y0, x1.max(x0 + 1), y1.max(y0 + 1)).expect("non-degenerate average")
}

/// Match every level-`source_level` node of `g0` into `g1`, optionally also
/// from `g1` into `g0`. Similarities are shared through `ms`.
pub fn match_source_areas(
    g0: &AreaGraph,
    g1: &AreaGraph,
    provider: &dyn SimilarityProvider,
    ms: &SimilarityMatrix,
    params: &MesaParams,
) -> MesaReport {
    let mut report = MesaReport::default();
    let collect = |results: Vec<(usize, Result<Option<AreaMatch>, SimilarityError>)>,
                       direction: Direction,
                       report: &mut MesaReport| {
        let mut found = Vec::new();
        for (s, r) in results {
            match r {
                Ok(Some(m)) => found.push(m),
                Ok(None) => {
                    if direction == Direction::Forward {
                        report.unmatched.push(s);
                    }
                }
                Err(e) => report.failures.push(SourceFailure {
                    source: s,
                    direction,
                    reason: e.to_string(),
                }),
            }
        }
        found
    };
    let forward_view = SimView {
        g0,
        g1,
        ms,
        provider,
        reversed: false,
    };
    let forward = collect(run_pass(&forward_view, params), Direction::Forward, &mut report);
    if params.bidirectional {
        let reverse_view = SimView {
            reversed: true,
            ..forward_view
        };
        let reverse = collect(run_pass(&reverse_view, params), Direction::Reverse, &mut report);
        report.matches = merge_bidirectional(forward, reverse);
    } else {
        report.matches = forward;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageDims;
    use crate::graph::{build_initial_graph, complete_graph, GraphParams};
    use crate::ingest::{Candidate, CandidateSet, CandidateSource};
    use crate::similarity::AreaPair;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(unary: Vec<f64>, edges: Vec<(usize, usize, f64)>) -> Amrf {
        Amrf {
            nodes: (0..unary.len()).collect(),
            unary,
            edges,
            lambda: 0.1,
        }
    }

    #[test]
    fn energy_examples() {
        assert_eq!(total_energy(&[true], &field(vec![1.0], vec![])).unwrap(), 0.0);
        assert_eq!(total_energy(&[false], &field(vec![1.0], vec![])).unwrap(), 1.0);
        let f = field(vec![0.9, 0.1], vec![(0, 1, 0.5)]);
        let e = total_energy(&[true, false], &f).unwrap();
        let oracle = (1.0f64 - 0.9).abs() + (0.0f64 - 0.1).abs() + 0.1 * 0.5;
        assert!((e - oracle).abs() < 1e-15);
        assert!((e - 0.25).abs() < 1e-12);
        assert!(matches!(total_energy(&[true], &f), Err(MesaError::SizeMismatch { .. })));
    }

    #[test]
    fn min_cut_examples() {
        assert_eq!(min_cut_solve(&field(vec![0.9], vec![])), vec![true]);
        let f = field(vec![0.0; 5], vec![(0, 1, 1.0), (2, 3, 0.3)]);
        let x = min_cut_solve(&f);
        assert!(x.iter().all(|v| !v));
        assert_eq!(total_energy(&x, &f).unwrap(), 0.0);
        assert!(min_cut_solve(&field(vec![], vec![])).is_empty());
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize) -> Amrf {
        let unary = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.4) {
                    edges.push((i, j, rng.random::<f64>()));
                }
            }
        }
        Amrf {
            nodes: (0..n).collect(),
            unary,
            edges,
            lambda: rng.random_range(0.05..3.0),
        }
    }

    fn brute_force(f: &Amrf) -> f64 {
        let n = f.len();
        (0u32..1 << n)
            .map(|mask| {
                let x: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                total_energy(&x, f).unwrap()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn min_cut_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let n = rng.random_range(1..=10);
            let f = random_field(&mut rng, n);
            let x = min_cut_solve(&f);
            assert_eq!(total_energy(&x, &f).unwrap(), brute_force(&f));
            for _ in 0..50 {
                let y: Vec<bool> = (0..n).map(|_| rng.random()).collect();
                assert!(total_energy(&x, &f).unwrap() <= total_energy(&y, &f).unwrap());
            }
        }
    }

    #[test]
    fn global_energy_examples() {
        let w = EnergyWeights::default();
        let zero = EnergyTerms {
            e_self: 0.0,
            e_parent: Some(0.0),
            e_children: Some(0.0),
            e_neighbor: Some(0.0),
        };
        assert_eq!(zero.combine(&w), 0.0);
        let full = EnergyTerms { e_self: 1.0, ..zero };
        assert!((full.combine(&w) - 4.0 / 10.0).abs() < 1e-12);
        let alone = EnergyTerms {
            e_self: 0.5,
            e_parent: None,
            e_children: None,
            e_neighbor: None,
        };
        assert_eq!(alone.combine(&w), 0.5);
        let no_parent = EnergyTerms {
            e_self: 1.0,
            e_parent: None,
            ..zero
        };
        assert!((no_parent.combine(&w) - 4.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn refine_examples() {
        let a = Area::new(0, 0, 100, 100).unwrap();
        let b = Area::new(50, 50, 150, 150).unwrap();
        let r = refine_and_fuse(&[(3, a, 0.2)], 0.35, 0.1).unwrap();
        assert_eq!((r.area, r.fused.clone()), (a, vec![3]));
        let r = refine_and_fuse(&[(1, a, 0.40), (2, b, 0.20)], 0.35, 0.1).unwrap();
        assert_eq!((r.area, r.energy), (b, 0.20));
        assert!(refine_and_fuse(&[(1, a, 0.5), (2, b, 0.36)], 0.35, 0.1).is_none());
        assert!(refine_and_fuse(&[], 0.35, 0.1).is_none());
        // Equal energies fuse to the midpoint; ties order by id.
        let r = refine_and_fuse(&[(7, b, 0.1), (4, a, 0.1)], 0.35, 0.1).unwrap();
        assert_eq!(r.fused, vec![4, 7]);
        assert_eq!(r.area, Area::new(25, 25, 125, 125).unwrap());
    }

    #[test]
    fn fused_area_within_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..6);
            let cands: Vec<(usize, Area, f64)> = (0..n)
                .map(|i| {
                    let x = rng.random_range(0..200);
                    let y = rng.random_range(0..200);
                    let a = Area::new(x, y, x + rng.random_range(1..100), y + rng.random_range(1..100)).unwrap();
                    (i, a, rng.random_range(0.0..0.3))
                })
                .collect();
            let r = refine_and_fuse(&cands, 0.35, 0.1).unwrap();
            let env = r
                .fused
                .iter()
                .map(|&i| cands[i].1)
                .reduce(|p, q| crate::geometry::fuse(&p, &q))
                .unwrap();
            assert!(env.contains(&r.area));
        }
    }

    struct Oracle;

    impl SimilarityProvider for Oracle {
        fn similarity(&self, p: &AreaPair<'_>) -> Result<f64, SimilarityError> {
            Ok(iou(p.src_area, p.tgt_area))
        }
    }

    struct Identity;

    impl SimilarityProvider for Identity {
        fn similarity(&self, p: &AreaPair<'_>) -> Result<f64, SimilarityError> {
            Ok(if p.src_area == p.tgt_area { 1.0 } else { 0.01 })
        }
    }

    fn graph(areas: &[Area]) -> AreaGraph {
        let c = CandidateSet {
            dims: ImageDims::new(640, 480).unwrap(),
            areas: areas
                .iter()
                .map(|a| Candidate {
                    area: *a,
                    source: CandidateSource::Segmentation,
                })
                .collect(),
            warnings: vec![],
        };
        let p = GraphParams::default();
        complete_graph(build_initial_graph(&c, &p), &p)
    }

    fn scene() -> Vec<Area> {
        vec![
            Area::new(20, 20, 130, 130).unwrap(),
            Area::new(300, 40, 420, 150).unwrap(),
            Area::new(100, 250, 220, 370).unwrap(),
            Area::new(0, 0, 300, 300).unwrap(),
            Area::new(400, 250, 520, 360).unwrap(),
        ]
    }

    #[test]
    fn identity_scene_matches_itself() {
        let g = graph(&scene());
        let ms = SimilarityMatrix::for_graphs(&g, &g, 0.05, false);
        let report = match_source_areas(&g, &g, &Identity, &ms, &MesaParams::default());
        let sources = g.source_nodes(1);
        assert!(!sources.is_empty());
        assert_eq!(report.matches.len(), sources.len());
        for m in &report.matches {
            assert_eq!(m.area0, m.area1);
            assert_eq!(m.area0, g.nodes()[m.source].area);
        }
    }

    #[test]
    fn bidirectional_identity_merges() {
        let g = graph(&scene());
        let ms = SimilarityMatrix::for_graphs(&g, &g, 0.05, false);
        let params = MesaParams {
            bidirectional: true,
            ..MesaParams::default()
        };
        let report = match_source_areas(&g, &g, &Identity, &ms, &params);
        assert!(report.matches.iter().all(|m| m.direction == Direction::Both));
        assert!(report.matches.iter().all(|m| m.area0 == m.area1));
    }

    struct Flat(f64);

    impl SimilarityProvider for Flat {
        fn similarity(&self, _: &AreaPair<'_>) -> Result<f64, SimilarityError> {
            Ok(self.0)
        }
    }

    #[test]
    fn low_similarity_gives_no_match() {
        let g = graph(&scene());
        let ms = SimilarityMatrix::for_graphs(&g, &g, 0.05, false);
        let report = match_source_areas(&g, &g, &Flat(0.02), &ms, &MesaParams::default());
        assert!(report.matches.is_empty());
        assert_eq!(report.unmatched, g.source_nodes(1));
    }

    #[test]
    fn empty_target_graph() {
        let g0 = graph(&scene());
        let g1 = graph(&[]);
        let ms = SimilarityMatrix::for_graphs(&g0, &g1, 0.05, false);
        let report = match_source_areas(&g0, &g1, &Oracle, &ms, &MesaParams::default());
        assert!(report.matches.is_empty());
    }

    #[test]
    fn pruning_saves_calls_with_same_result() {
        let g = graph(&scene());
        let run = |pruning: bool| {
            let ms = SimilarityMatrix::for_graphs(&g, &g, 0.05, pruning);
            let r = match_source_areas(&g, &g, &Flat(0.01), &ms, &MesaParams::default());
            (r, ms.provider_calls())
        };
        let (a, calls_on) = run(true);
        let (b, calls_off) = run(false);
        assert!(calls_on < calls_off, "{calls_on} vs {calls_off}");
        assert_eq!(a.matches, b.matches);
    }

    #[test]
    fn parent_term_is_min_over_pairs() {
        let g = graph(&scene());
        let src = g.source_nodes(1)[0];
        assert!(!g.parents(src).unwrap().is_empty());
        let ms = SimilarityMatrix::for_graphs(&g, &g, 0.05, false);
        let view = SimView {
            g0: &g,
            g1: &g,
            ms: &ms,
            provider: &Oracle,
            reversed: false,
        };
        assert_eq!(view.e_self(src, src).unwrap(), 0.0);
        let mut oracle = f64::INFINITY;
        for &p in g.parents(src).unwrap() {
            for &q in g.parents(src).unwrap() {
                oracle = oracle.min(1.0 - iou(&g.nodes()[p].area, &g.nodes()[q].area));
            }
        }
        assert_eq!(view.e_parent(src, src).unwrap(), Some(oracle));
        let e = view.global_energy(src, src, &EnergyWeights::default()).unwrap();
        assert!((0.0..=1.0).contains(&e));
    }
}
