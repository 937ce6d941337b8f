//! Area apparent similarity and the cross-graph similarity matrix.
//!
//! Similarity of two area images is the product of the mean patch
//! activities of their activity maps. Activities come from an
//! [`ActivityModel`]; the bundled [`NccActivity`] is a deterministic
//! correlation stand-in for a learned patch classifier. Externally computed
//! similarities can be injected through [`SimilarityTable`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Area;
use crate::graph::AreaGraph;
use crate::image::GrayImage;
use crate::ncc::{PatchGrid, PATCH};

/// Side of the square area images fed to the activity model.
pub const AREA_IMAGE_SIDE: usize = 64;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("area images differ in size: {0}x{1} vs {2}x{3}")]
    DimsMismatch(usize, usize, usize, usize),
    #[error("area image side {0} is not a positive multiple of 8")]
    BadSide(usize),
    #[error("index ({0}, {1}) outside a {2}x{3} similarity matrix")]
    OutOfRange(usize, usize, usize, usize),
    #[error("no injected similarity for pair ({0}, {1})")]
    MissingEntry(usize, usize),
    #[error("similarity {0} outside [0, 1]")]
    OutOfUnitRange(f64),
    #[error("similarity table {path}: {reason}")]
    Table { path: String, reason: String },
}

/// Per-patch activities in `[0, 1]`, row-major over the 8x8 patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMap {
    pub cols: usize,
    pub rows: usize,
    pub values: Vec<f64>,
}

impl ActivityMap {
    /// Expectation of the activities.
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Produces the two activity maps for a pair of equally sized area images.
pub trait ActivityModel: Sync {
    fn activity_maps(&self, a: &GrayImage, b: &GrayImage) -> Result<(ActivityMap, ActivityMap), SimilarityError>;
}

/// Best-partner ZNCC activities; see [`baseline_activity`].
#[derive(Debug, Clone, Copy, Default)]
pub struct NccActivity;

impl ActivityModel for NccActivity {
    fn activity_maps(&self, a: &GrayImage, b: &GrayImage) -> Result<(ActivityMap, ActivityMap), SimilarityError> {
        baseline_activity(a, b)
    }
}

fn one_way_activity(from: &PatchGrid, to: &PatchGrid) -> ActivityMap {
    let best = from.best_matches(to);
    let values = (0..from.len())
        .map(|i| {
            if from.is_flat(i) {
                // Flat patches are judged by the closest mean intensity.
                let m = from.mean(i);
                (0..to.len())
                    .map(|j| 1.0 - ((m - to.mean(j)).abs() / 255.0) as f64)
                    .fold(0.0, f64::max)
                    .clamp(0.0, 1.0)
            } else {
                best[i].map_or(0.0, |(_, s)| (s as f64).clamp(0.0, 1.0))
            }
        })
        .collect();
    ActivityMap {
        cols: from.cols,
        rows: from.rows,
        values,
    }
}

/// Activity of each patch = its best zero-mean NCC against the other
/// image's patches, clamped to `[0, 1]`.
pub fn baseline_activity(a: &GrayImage, b: &GrayImage) -> Result<(ActivityMap, ActivityMap), SimilarityError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(SimilarityError::DimsMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    for side in [a.width(), a.height()] {
        if side % PATCH != 0 {
            return Err(SimilarityError::BadSide(side));
        }
    }
    let (ga, gb) = (PatchGrid::new(a), PatchGrid::new(b));
    Ok((one_way_activity(&ga, &gb), one_way_activity(&gb, &ga)))
}

/// `Sim = E[map_a] * E[map_b]`.
pub fn area_similarity(a: &GrayImage, b: &GrayImage, model: &dyn ActivityModel) -> Result<f64, SimilarityError> {
    let (ma, mb) = model.activity_maps(a, b)?;
    Ok((ma.mean() * mb.mean()).clamp(0.0, 1.0))
}

/// One cell request: node `src_id` of graph 0 against node `tgt_id` of graph 1.
#[derive(Debug, Clone, Copy)]
pub struct AreaPair<'a> {
    pub src_id: usize,
    pub src_area: &'a Area,
    pub tgt_id: usize,
    pub tgt_area: &'a Area,
}

/// Source of area similarities for one image pair. Must be stateless
/// between calls.
pub trait SimilarityProvider: Sync {
    fn similarity(&self, pair: &AreaPair<'_>) -> Result<f64, SimilarityError>;
}

/// Crops both areas, resizes them to 64x64 and scores them with an activity model.
pub struct ImageSimilarity<'a, M: ActivityModel = NccActivity> {
    pub img0: &'a GrayImage,
    pub img1: &'a GrayImage,
    pub model: M,
    pub side: usize,
}

impl<'a> ImageSimilarity<'a, NccActivity> {
    pub fn baseline(img0: &'a GrayImage, img1: &'a GrayImage) -> Self {
        Self {
            img0,
            img1,
            model: NccActivity,
            side: AREA_IMAGE_SIDE,
        }
    }
}

fn area_image(img: &GrayImage, a: &Area, side: usize) -> GrayImage {
    img.resample_window(
        a.x_min() as f64,
        a.y_min() as f64,
        a.width() as f64,
        a.height() as f64,
        side,
        side,
    )
}

impl<M: ActivityModel> SimilarityProvider for ImageSimilarity<'_, M> {
    fn similarity(&self, pair: &AreaPair<'_>) -> Result<f64, SimilarityError> {
        let a = area_image(self.img0, pair.src_area, self.side);
        let b = area_image(self.img1, pair.tgt_area, self.side);
        area_similarity(&a, &b, &self.model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub src: usize,
    pub tgt: usize,
    pub sim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableFile {
    entries: Vec<SimilarityEntry>,
}

/// Injected similarities keyed by `(graph-0 node id, graph-1 node id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityTable {
    entries: BTreeMap<(usize, usize), f64>,
}

impl SimilarityTable {
    pub fn insert(&mut self, src: usize, tgt: usize, sim: f64) -> Result<(), SimilarityError> {
        if !(0.0..=1.0).contains(&sim) {
            return Err(SimilarityError::OutOfUnitRange(sim));
        }
        self.entries.insert((src, tgt), sim);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimilarityError> {
        let err = |reason: String| SimilarityError::Table {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: TableFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let mut t = SimilarityTable::default();
        for e in file.entries {
            t.insert(e.src, e.tgt, e.sim)?;
        }
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        let file = TableFile {
            entries: self
                .entries
                .iter()
                .map(|(&(src, tgt), &sim)| SimilarityEntry { src, tgt, sim })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("table serializes")
    }
}

impl SimilarityProvider for SimilarityTable {
    fn similarity(&self, pair: &AreaPair<'_>) -> Result<f64, SimilarityError> {
        self.entries
            .get(&(pair.src_id, pair.tgt_id))
            .copied()
            .ok_or(SimilarityError::MissingEntry(pair.src_id, pair.tgt_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Uncomputed,
    /// Zeroed by a low-similarity parent pair.
    Pruned,
    Value(f64),
}

/// Why a cell was pruned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneRecord {
    pub parent: (usize, usize),
    pub parent_value: f64,
    pub cell: (usize, usize),
}

/// Lazily filled `|V0| x |V1|` similarity table.
///
/// A computed value below `T_as` writes pruned zeros into every
/// child-by-child pair of the two nodes (direct children only). Cells are
/// write-once: pruning never replaces a value and a value never replaces
/// a prune.
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    threshold: f64,
    pruning: bool,
    cells: Mutex<Vec<Cell>>,
    prune_log: Mutex<Vec<PruneRecord>>,
    calls: AtomicUsize,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, threshold: f64, pruning: bool) -> Self {
        Self {
            rows,
            cols,
            threshold,
            pruning,
            cells: Mutex::new(vec![Cell::Uncomputed; rows * cols]),
            prune_log: Mutex::new(Vec::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn for_graphs(g0: &AreaGraph, g1: &AreaGraph, threshold: f64, pruning: bool) -> Self {
        Self::new(g0.len(), g1.len(), threshold, pruning)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pruning(&self) -> bool {
        self.pruning
    }

    /// Number of provider invocations so far.
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn cell(&self, i: usize, j: usize) -> Result<Cell, SimilarityError> {
        self.check(i, j)?;
        Ok(self.cells.lock().expect("cells lock")[i * self.cols + j])
    }

    pub fn prune_log(&self) -> Vec<PruneRecord> {
        self.prune_log.lock().expect("prune log lock").clone()
    }

    fn check(&self, i: usize, j: usize) -> Result<(), SimilarityError> {
        if i >= self.rows || j >= self.cols {
            return Err(SimilarityError::OutOfRange(i, j, self.rows, self.cols));
        }
        Ok(())
    }

    /// Cached or pruned value if present, otherwise ask the provider.
    pub fn get_or_compute(
        &self,
        i: usize,
        j: usize,
        g0: &AreaGraph,
        g1: &AreaGraph,
        provider: &dyn SimilarityProvider,
    ) -> Result<f64, SimilarityError> {
        self.check(i, j)?;
        let idx = i * self.cols + j;
        match self.cells.lock().expect("cells lock")[idx] {
            Cell::Value(v) => return Ok(v),
            Cell::Pruned => return Ok(0.0),
            Cell::Uncomputed => {}
        }
        let (a0, a1) = (
            g0.node(i).map_err(|_| SimilarityError::OutOfRange(i, j, self.rows, self.cols))?,
            g1.node(j).map_err(|_| SimilarityError::OutOfRange(i, j, self.rows, self.cols))?,
        );
        self.calls.fetch_add(1, Ordering::Relaxed);
        let v = provider.similarity(&AreaPair {
            src_id: i,
            src_area: &a0.area,
            tgt_id: j,
            tgt_area: &a1.area,
        })?;
        if !(0.0..=1.0).contains(&v) {
            return Err(SimilarityError::OutOfUnitRange(v));
        }

        let mut cells = self.cells.lock().expect("cells lock");
        match cells[idx] {
            Cell::Value(existing) => return Ok(existing),
            Cell::Pruned => return Ok(0.0),
            Cell::Uncomputed => cells[idx] = Cell::Value(v),
        }
        if self.pruning && v < self.threshold {
            let mut log = self.prune_log.lock().expect("prune log lock");
            for &h in g0.children(i).unwrap_or(&[]) {
                for &k in g1.children(j).unwrap_or(&[]) {
                    let c = &mut cells[h * self.cols + k];
                    if *c == Cell::Uncomputed {
                        *c = Cell::Pruned;
                        log.push(PruneRecord {
                            parent: (i, j),
                            parent_value: v,
                            cell: (h, k),
                        });
                    }
                }
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageDims;
    use crate::graph::{build_initial_graph, GraphParams};
    use crate::ingest::{Candidate, CandidateSet, CandidateSource};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, side: usize) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(side, side, |_, _| rng.random_range(0.0..255.0))
    }

    #[test]
    fn identical_images_have_unit_activity() {
        let a = noise(1, 64);
        let (ma, mb) = baseline_activity(&a, &a).unwrap();
        assert!(ma.values.iter().all(|v| (v - 1.0).abs() < 1e-5));
        assert!(mb.values.iter().all(|v| (v - 1.0).abs() < 1e-5));
        assert!((area_similarity(&a, &a, &NccActivity).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_images_use_mean_rule() {
        let a = GrayImage::filled(64, 64, 100.0);
        let (ma, _) = baseline_activity(&a, &a).unwrap();
        assert!(ma.values.iter().all(|v| *v == 1.0));
        let b = GrayImage::filled(64, 64, 151.0);
        let (ma, _) = baseline_activity(&a, &b).unwrap();
        assert!(ma.values.iter().all(|v| (v - 0.8).abs() < 1e-6));
    }

    #[test]
    fn independent_noise_has_low_activity() {
        let mut total = 0.0;
        for seed in 0..20 {
            let (ma, _) = baseline_activity(&noise(seed, 64), &noise(seed + 1000, 64)).unwrap();
            total += ma.mean();
        }
        assert!(total / 20.0 < 0.5);
    }

    #[test]
    fn similarity_is_product_and_symmetric() {
        let map = |v: f64| ActivityMap {
            cols: 1,
            rows: 1,
            values: vec![v],
        };
        assert!((map(0.8).mean() * map(0.5).mean() - 0.4).abs() < 1e-12);
        let (a, b) = (noise(3, 64), noise(4, 64));
        let ab = area_similarity(&a, &b, &NccActivity).unwrap();
        let ba = area_similarity(&b, &a, &NccActivity).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 0.25);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = GrayImage::filled(64, 64, 1.0);
        let b = GrayImage::filled(32, 64, 1.0);
        assert!(matches!(baseline_activity(&a, &b), Err(SimilarityError::DimsMismatch(..))));
        let c = GrayImage::filled(60, 60, 1.0);
        assert!(matches!(baseline_activity(&c, &c), Err(SimilarityError::BadSide(60))));
    }

    struct Counting<'a> {
        value: f64,
        calls: &'a AtomicUsize,
    }

    impl SimilarityProvider for Counting<'_> {
        fn similarity(&self, _: &AreaPair<'_>) -> Result<f64, SimilarityError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.value)
        }
    }

    fn nested_graph() -> AreaGraph {
        let areas = [
            Area::new(0, 0, 300, 300).unwrap(),
            Area::new(10, 10, 110, 110).unwrap(),
            Area::new(150, 150, 250, 250).unwrap(),
        ];
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
        build_initial_graph(&c, &GraphParams::default())
    }

    #[test]
    fn memoizes_cells() {
        let g = nested_graph();
        let calls = AtomicUsize::new(0);
        let p = Counting { value: 0.9, calls: &calls };
        let m = SimilarityMatrix::for_graphs(&g, &g, 0.05, true);
        assert_eq!(m.get_or_compute(0, 0, &g, &g, &p).unwrap(), 0.9);
        assert_eq!(m.get_or_compute(0, 0, &g, &g, &p).unwrap(), 0.9);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert!(m.prune_log().is_empty());
        assert!(matches!(m.get_or_compute(5, 0, &g, &g, &p), Err(SimilarityError::OutOfRange(..))));
    }

    #[test]
    fn low_value_prunes_children_pairs() {
        let g = nested_graph();
        assert_eq!(g.children(0).unwrap(), &[1, 2]);
        let calls = AtomicUsize::new(0);
        let p = Counting { value: 0.01, calls: &calls };
        let m = SimilarityMatrix::for_graphs(&g, &g, 0.05, true);
        m.get_or_compute(1, 2, &g, &g, &p).unwrap();
        assert_eq!(m.get_or_compute(0, 0, &g, &g, &p).unwrap(), 0.01);
        assert_eq!(m.cell(1, 1).unwrap(), Cell::Pruned);
        assert_eq!(m.cell(2, 1).unwrap(), Cell::Pruned);
        // Already computed before the prune: untouched.
        assert_eq!(m.cell(1, 2).unwrap(), Cell::Value(0.01));
        assert_eq!(m.get_or_compute(1, 1, &g, &g, &p).unwrap(), 0.0);
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(m.prune_log().len(), 3);
        assert!(m.prune_log().iter().all(|r| r.parent == (0, 0)));
    }

    #[test]
    fn no_pruning_when_disabled() {
        let g = nested_graph();
        let calls = AtomicUsize::new(0);
        let p = Counting { value: 0.01, calls: &calls };
        let m = SimilarityMatrix::for_graphs(&g, &g, 0.05, false);
        m.get_or_compute(0, 0, &g, &g, &p).unwrap();
        assert_eq!(m.cell(1, 1).unwrap(), Cell::Uncomputed);
    }

    #[test]
    fn table_provider_round_trip() {
        let mut t = SimilarityTable::default();
        t.insert(0, 1, 0.5).unwrap();
        assert!(t.insert(0, 2, 1.5).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sim.json");
        std::fs::write(&p, t.to_json()).unwrap();
        let back = SimilarityTable::load(&p).unwrap();
        assert_eq!(back, t);
        let a = Area::new(0, 0, 8, 8).unwrap();
        let pair = AreaPair {
            src_id: 0,
            src_area: &a,
            tgt_id: 1,
            tgt_area: &a,
        };
        assert_eq!(back.similarity(&pair).unwrap(), 0.5);
        let missing = AreaPair { tgt_id: 3, ..pair };
        assert!(matches!(back.similarity(&missing), Err(SimilarityError::MissingEntry(0, 3))));
    }
}
