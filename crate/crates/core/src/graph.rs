//! Area Graph: areas as nodes at size levels, undirected adjacency edges and
//! directed inclusion edges (parent contains child).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::kmeans_elbow;
use crate::geometry::{assign_level, expand_to_level, fuse, overlap_ratio, Area, ImageDims, LevelThresholds};
use crate::ingest::CandidateSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("invalid graph: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOrigin {
    Segmentation,
    Generated,
    /// Full-image node adopting areas that could not be grown.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaNode {
    pub id: usize,
    pub area: Area,
    pub level: usize,
    pub origin: NodeOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// `parent_first` is true when the first argument contains the second.
    Inclusion { parent_first: bool },
    Adjacency,
    None,
}

/// Classify the relation between two areas by their overlap ratio.
///
/// The larger area is the parent of an inclusion; equal sizes make the first
/// argument the parent.
pub fn link_predict(a: &Area, b: &Area, delta_l: f64, delta_h: f64) -> EdgeKind {
    let delta = overlap_ratio(a, b);
    if delta >= delta_h {
        EdgeKind::Inclusion {
            parent_first: a.size() >= b.size(),
        }
    } else if delta > delta_l {
        EdgeKind::Adjacency
    } else {
        EdgeKind::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphParams {
    pub thresholds: LevelThresholds,
    pub delta_l: f64,
    pub delta_h: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            thresholds: LevelThresholds::default(),
            delta_l: 0.1,
            delta_h: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GraphRecord {
    dims: ImageDims,
    num_levels: usize,
    nodes: Vec<AreaNode>,
    adjacency_edges: Vec<(usize, usize)>,
    inclusion_edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRecord", into = "GraphRecord")]
pub struct AreaGraph {
    dims: ImageDims,
    num_levels: usize,
    nodes: Vec<AreaNode>,
    adjacency: Vec<(usize, usize)>,
    /// `(parent, child)`.
    inclusion: Vec<(usize, usize)>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    neighbors: Vec<Vec<usize>>,
}

impl From<AreaGraph> for GraphRecord {
    fn from(g: AreaGraph) -> Self {
        GraphRecord {
            dims: g.dims,
            num_levels: g.num_levels,
            nodes: g.nodes,
            adjacency_edges: g.adjacency,
            inclusion_edges: g.inclusion,
        }
    }
}

impl TryFrom<GraphRecord> for AreaGraph {
    type Error = GraphError;

    fn try_from(r: GraphRecord) -> Result<Self, Self::Error> {
        let n = r.nodes.len();
        for (i, node) in r.nodes.iter().enumerate() {
            if node.id != i {
                return Err(GraphError::Invalid(format!("node at index {i} has id {}", node.id)));
            }
            if node.level >= r.num_levels {
                return Err(GraphError::Invalid(format!("node {i} has level {}", node.level)));
            }
        }
        let mut g = AreaGraph::empty(r.dims, r.num_levels);
        g.nodes = r.nodes;
        g.parents = vec![Vec::new(); n];
        g.children = vec![Vec::new(); n];
        g.neighbors = vec![Vec::new(); n];
        for (a, b) in r.adjacency_edges {
            if a >= n || b >= n || a == b {
                return Err(GraphError::Invalid(format!("bad adjacency edge ({a}, {b})")));
            }
            g.add_adjacency(a, b);
        }
        for (p, c) in r.inclusion_edges {
            if p >= n || c >= n || p == c {
                return Err(GraphError::Invalid(format!("bad inclusion edge ({p}, {c})")));
            }
            g.add_inclusion(p, c);
        }
        if g.has_inclusion_cycle() {
            return Err(GraphError::Invalid("inclusion edges contain a cycle".into()));
        }
        Ok(g)
    }
}

impl AreaGraph {
    fn empty(dims: ImageDims, num_levels: usize) -> Self {
        Self {
            dims,
            num_levels,
            nodes: Vec::new(),
            adjacency: Vec::new(),
            inclusion: Vec::new(),
            parents: Vec::new(),
            children: Vec::new(),
            neighbors: Vec::new(),
        }
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn top_level(&self) -> usize {
        self.num_levels - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[AreaNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Result<&AreaNode, GraphError> {
        self.nodes.get(id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn adjacency_edges(&self) -> &[(usize, usize)] {
        &self.adjacency
    }

    /// `(parent, child)` pairs.
    pub fn inclusion_edges(&self) -> &[(usize, usize)] {
        &self.inclusion
    }

    pub fn parents(&self, id: usize) -> Result<&[usize], GraphError> {
        self.parents.get(id).map(Vec::as_slice).ok_or(GraphError::UnknownNode(id))
    }

    pub fn children(&self, id: usize) -> Result<&[usize], GraphError> {
        self.children.get(id).map(Vec::as_slice).ok_or(GraphError::UnknownNode(id))
    }

    pub fn neighbors(&self, id: usize) -> Result<&[usize], GraphError> {
        self.neighbors.get(id).map(Vec::as_slice).ok_or(GraphError::UnknownNode(id))
    }

    pub fn nodes_at_level(&self, level: usize) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.level == level).map(|n| n.id).collect()
    }

    /// Nodes used as matching sources: every non-fallback node at `level`.
    pub fn source_nodes(&self, level: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.level == level && n.origin != NodeOrigin::Fallback)
            .map(|n| n.id)
            .collect()
    }

    fn add_adjacency(&mut self, a: usize, b: usize) {
        let (a, b) = (a.min(b), a.max(b));
        if self.neighbors[a].contains(&b) {
            return;
        }
        self.adjacency.push((a, b));
        self.neighbors[a].push(b);
        self.neighbors[b].push(a);
    }

    fn add_inclusion(&mut self, parent: usize, child: usize) {
        if self.children[parent].contains(&child) {
            return;
        }
        self.inclusion.push((parent, child));
        self.children[parent].push(child);
        self.parents[child].push(parent);
    }

    fn push_node(&mut self, area: Area, level: usize, origin: NodeOrigin) -> usize {
        let id = self.nodes.len();
        self.nodes.push(AreaNode { id, area, level, origin });
        self.parents.push(Vec::new());
        self.children.push(Vec::new());
        self.neighbors.push(Vec::new());
        id
    }

    /// Add a node and link-predict it against every existing non-fallback node.
    fn insert_linked(&mut self, area: Area, level: usize, origin: NodeOrigin, delta_l: f64, delta_h: f64) -> usize {
        let id = self.push_node(area, level, origin);
        for other in 0..id {
            if self.nodes[other].origin == NodeOrigin::Fallback {
                continue;
            }
            let other_area = self.nodes[other].area;
            match link_predict(&other_area, &area, delta_l, delta_h) {
                EdgeKind::Inclusion { parent_first: true } => self.add_inclusion(other, id),
                EdgeKind::Inclusion { parent_first: false } => self.add_inclusion(id, other),
                EdgeKind::Adjacency => self.add_adjacency(other, id),
                EdgeKind::None => {}
            }
        }
        id
    }

    fn has_higher_parent(&self, id: usize) -> bool {
        let level = self.nodes[id].level;
        self.parents[id].iter().any(|&p| self.nodes[p].level > level)
    }

    fn fallback_node(&mut self) -> usize {
        if let Some(n) = self.nodes.iter().find(|n| n.origin == NodeOrigin::Fallback) {
            return n.id;
        }
        let top = self.top_level();
        self.push_node(self.dims.full_area(), top, NodeOrigin::Fallback)
    }

    fn has_inclusion_cycle(&self) -> bool {
        // Kahn's algorithm over parent -> child.
        let n = self.nodes.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(v) = stack.pop() {
            seen += 1;
            for &c in &self.children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    stack.push(c);
                }
            }
        }
        seen != n
    }

    /// Structural audit; an empty list means every invariant holds.
    pub fn audit(&self, params: &GraphParams) -> Vec<String> {
        let mut problems = Vec::new();
        if self.has_inclusion_cycle() {
            problems.push("inclusion edges contain a directed cycle".to_string());
        }
        for node in &self.nodes {
            if !node.area.is_inside(self.dims) {
                problems.push(format!("node {} lies outside the image", node.id));
            }
            if node.origin != NodeOrigin::Fallback
                && assign_level(&node.area, &params.thresholds) != Some(node.level)
            {
                problems.push(format!("node {} level {} disagrees with its size", node.id, node.level));
            }
            if node.level < self.top_level() && self.parents[node.id].is_empty() {
                problems.push(format!("node {} (level {}) has no parent", node.id, node.level));
            }
        }
        for &(p, c) in &self.inclusion {
            let (pn, cn) = (&self.nodes[p], &self.nodes[c]);
            if pn.level < cn.level {
                problems.push(format!("inclusion {p}->{c} goes from level {} to {}", pn.level, cn.level));
            }
            if pn.origin != NodeOrigin::Fallback && overlap_ratio(&pn.area, &cn.area) < params.delta_h {
                problems.push(format!("inclusion {p}->{c} below delta_h"));
            }
        }
        for &(a, b) in &self.adjacency {
            let d = overlap_ratio(&self.nodes[a].area, &self.nodes[b].area);
            if !(d > params.delta_l && d < params.delta_h) {
                problems.push(format!("adjacency {a}-{b} has overlap ratio {d:.3}"));
            }
        }
        problems
    }
}

/// One node per candidate, every pair run through [`link_predict`].
///
/// Candidates smaller than the lowest level are grown to level 0 first;
/// those that cannot be grown inside the image are skipped.
pub fn build_initial_graph(c: &CandidateSet, params: &GraphParams) -> AreaGraph {
    let t = &params.thresholds;
    let mut g = AreaGraph::empty(c.dims, t.num_levels());
    for cand in &c.areas {
        let area = match assign_level(&cand.area, t) {
            Some(_) => cand.area,
            None => match expand_to_level(&cand.area, 0, t, c.dims) {
                Ok(a) => a,
                Err(_) => continue,
            },
        };
        let level = assign_level(&area, t).expect("area reaches level 0");
        if g.nodes.iter().any(|n| n.area == area) {
            continue;
        }
        g.insert_linked(area, level, NodeOrigin::Segmentation, params.delta_l, params.delta_h);
    }
    g
}

/// Generate parents for orphan nodes level by level until every node below
/// the top level has a parent at a higher level.
///
/// Orphans at a level are clustered by center; each unfused member of a
/// multi-node cluster is fused with its nearest cluster-mate, singletons
/// are grown to the next level. A generated area that stays at the current
/// level is grown as well. Anything that cannot be grown inside the image
/// is adopted by a single full-image fallback node at the top level.
pub fn complete_graph(mut g: AreaGraph, params: &GraphParams) -> AreaGraph {
    let dims = g.dims;
    let top = g.top_level();
    for level in 0..top {
        let orphans: Vec<usize> = g
            .nodes
            .iter()
            .filter(|n| n.level == level && n.origin != NodeOrigin::Fallback && !g.has_higher_parent(n.id))
            .map(|n| n.id)
            .collect();
        if orphans.is_empty() {
            continue;
        }
        let centers: Vec<[f64; 2]> = orphans
            .iter()
            .map(|&i| {
                let (x, y) = g.nodes[i].area.center();
                [x, y]
            })
            .collect();
        let clustering = kmeans_elbow(&centers, orphans.len());
        let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); clustering.k];
        for (idx, &label) in clustering.labels.iter().enumerate() {
            clusters[label].push(idx);
        }

        for members in clusters {
            if members.len() >= 2 {
                let mut fused = vec![false; members.len()];
                for k in 0..members.len() {
                    if fused[k] {
                        continue;
                    }
                    let ck = centers[members[k]];
                    let nearest = (0..members.len())
                        .filter(|&m| m != k)
                        .min_by(|&a, &b| {
                            let da = (centers[members[a]][0] - ck[0]).powi(2) + (centers[members[a]][1] - ck[1]).powi(2);
                            let db = (centers[members[b]][0] - ck[0]).powi(2) + (centers[members[b]][1] - ck[1]).powi(2);
                            da.total_cmp(&db)
                        })
                        .expect("cluster has at least two members");
                    fused[k] = true;
                    fused[nearest] = true;
                    let (vk, vn) = (orphans[members[k]], orphans[members[nearest]]);
                    let area = fuse(&g.nodes[vk].area, &g.nodes[vn].area);
                    generate_parent(&mut g, area, level, &[vk, vn], params, dims);
                }
            } else {
                let v = orphans[members[0]];
                let area = g.nodes[v].area;
                generate_parent(&mut g, area, level, &[v], params, dims);
            }
        }
    }
    g
}

fn generate_parent(g: &mut AreaGraph, area: Area, level: usize, kids: &[usize], params: &GraphParams, dims: ImageDims) {
    let t = &params.thresholds;
    let grown = match assign_level(&area, t) {
        Some(l) if l > level => Ok(area),
        _ => expand_to_level(&area, level + 1, t, dims),
    };
    let Ok(grown) = grown else {
        let fb = g.fallback_node();
        for &k in kids {
            g.add_inclusion(fb, k);
        }
        return;
    };
    let new_level = assign_level(&grown, t).expect("grown area has a level");
    let id = match g
        .nodes
        .iter()
        .find(|n| n.area == grown && n.origin != NodeOrigin::Fallback)
    {
        Some(n) => n.id,
        None => g.insert_linked(grown, new_level, NodeOrigin::Generated, params.delta_l, params.delta_h),
    };
    for &k in kids {
        if !g.parents[k].iter().any(|&p| g.nodes[p].level > level) {
            // A parent normally appears through link prediction; this only
            // triggers when delta_h > 1 makes containment undetectable.
            g.add_inclusion(id, k);
        }
    }
}
