//! Segmentation masks in, filtered candidate areas out.
//!
//! Two on-disk layouts are accepted:
//!
//! * a directory of single-channel raster masks (nonzero = foreground),
//!   optionally with a `manifest.json` naming the files and the image size;
//! * a JSON file of column-major run-length encodings (`size = [h, w]`,
//!   `counts` alternating background/foreground runs, background first).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fuse, Area, ImageDims};
use crate::image::{GrayImage, ImageError};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("mask path {0} does not exist")]
    MissingPath(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed mask file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("mask {id} is {got_w}x{got_h} but the image is {want_w}x{want_h}")]
    DimsMismatch {
        id: String,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("mask {0} has no foreground pixels")]
    EmptyMask(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMask {
    pub id: String,
    dims: ImageDims,
    bits: Vec<bool>,
}

impl SegmentMask {
    pub fn new(id: impl Into<String>, dims: ImageDims, bits: Vec<bool>) -> Result<Self, IngestError> {
        let id = id.into();
        if bits.len() as i64 != dims.pixel_count() {
            return Err(IngestError::Malformed {
                path: PathBuf::from(&id),
                reason: format!("{} bits for a {}x{} mask", bits.len(), dims.width, dims.height),
            });
        }
        Ok(Self { id, dims, bits })
    }

    /// Mask with exactly the pixels of `area` set.
    pub fn from_area(id: impl Into<String>, dims: ImageDims, area: &Area) -> Self {
        let w = dims.width as usize;
        let mut bits = vec![false; dims.pixel_count() as usize];
        if let Some(a) = area.clipped(dims) {
            for y in a.y_min()..a.y_max() {
                let row = y as usize * w;
                bits[row + a.x_min() as usize..row + a.x_max() as usize].fill(true);
            }
        }
        Self {
            id: id.into(),
            dims,
            bits,
        }
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.dims.width as usize + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Uncompressed column-major RLE counts, background run first.
    pub fn to_rle_counts(&self) -> Vec<u64> {
        let (w, h) = (self.dims.width as usize, self.dims.height as usize);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for x in 0..w {
            for y in 0..h {
                let b = self.bits[y * w + x];
                if b != current {
                    counts.push(run);
                    run = 0;
                    current = b;
                }
                run += 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn from_rle_counts(id: impl Into<String>, dims: ImageDims, counts: &[u64]) -> Result<Self, IngestError> {
        let id = id.into();
        let (w, h) = (dims.width as usize, dims.height as usize);
        let total: u64 = counts.iter().sum();
        if total != (w * h) as u64 {
            return Err(IngestError::Malformed {
                path: PathBuf::from(&id),
                reason: format!("RLE counts sum to {total}, expected {}", w * h),
            });
        }
        let mut bits = vec![false; w * h];
        let mut pos = 0usize;
        for (i, &c) in counts.iter().enumerate() {
            let fg = i % 2 == 1;
            for k in pos..pos + c as usize {
                if fg {
                    let (x, y) = (k / h, k % h);
                    bits[y * w + x] = true;
                }
            }
            pos += c as usize;
        }
        Ok(Self { id, dims, bits })
    }
}

/// A mask that was read but refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRejection {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedMasks {
    /// Image size declared by the manifest or RLE file, if any.
    pub dims: Option<ImageDims>,
    pub masks: Vec<SegmentMask>,
    pub rejected: Vec<MaskRejection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    width: u32,
    height: u32,
    masks: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RleRecord {
    #[serde(default)]
    pub id: Option<String>,
    /// `[height, width]`.
    pub size: [u32; 2],
    pub counts: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RleFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub masks: Vec<RleRecord>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RleInput {
    File(RleFile),
    List(Vec<RleRecord>),
}

/// Load masks from a directory (format A) or an RLE JSON file (format B).
///
/// Masks come back sorted by filename (format A) or in file order with
/// their ids (format B). Empty masks are rejected individually rather than
/// failing the whole load.
pub fn load_masks(path: &Path) -> Result<LoadedMasks, IngestError> {
    if !path.exists() {
        return Err(IngestError::MissingPath(path.to_path_buf()));
    }
    let mut loaded = if path.is_dir() {
        load_mask_dir(path)?
    } else {
        load_rle_file(path)?
    };
    let mut kept = Vec::with_capacity(loaded.masks.len());
    for m in loaded.masks.drain(..) {
        if let Some(d) = loaded.dims {
            if m.dims != d {
                return Err(IngestError::DimsMismatch {
                    id: m.id,
                    got_w: m.dims.width,
                    got_h: m.dims.height,
                    want_w: d.width,
                    want_h: d.height,
                });
            }
        }
        if m.foreground_count() == 0 {
            loaded.rejected.push(MaskRejection {
                id: m.id.clone(),
                reason: "no foreground pixels".into(),
            });
        } else {
            kept.push(m);
        }
    }
    loaded.masks = kept;
    Ok(loaded)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_raster(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "pgm" | "pbm" | "bmp" | "tif" | "tiff")
    )
}

fn load_mask_dir(dir: &Path) -> Result<LoadedMasks, IngestError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let (dims, mut files) = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| IngestError::Malformed {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        let dims = ImageDims::new(m.width, m.height).map_err(|e| IngestError::Malformed {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        (Some(dims), m.masks.iter().map(|f| dir.join(f)).collect::<Vec<_>>())
    } else {
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let p = entry.map_err(io_err(dir))?.path();
            if p.is_file() && is_raster(&p) {
                files.push(p);
            }
        }
        (None, files)
    };
    files.sort();
    let mut masks = Vec::with_capacity(files.len());
    for f in files {
        if !f.exists() {
            return Err(IngestError::MissingPath(f));
        }
        let img = GrayImage::load(&f).map_err(|e| IngestError::Malformed {
            path: f.clone(),
            reason: e.to_string(),
        })?;
        let id = f
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let bits = img.data().iter().map(|v| *v > 0.0).collect();
        masks.push(SegmentMask {
            id,
            dims: img.dims(),
            bits,
        });
    }
    Ok(LoadedMasks {
        dims,
        masks,
        rejected: Vec::new(),
    })
}

fn load_rle_file(path: &Path) -> Result<LoadedMasks, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let input: RleInput = serde_json::from_str(&text).map_err(|e| IngestError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (dims, records) = match input {
        RleInput::File(f) => {
            let dims = match (f.width, f.height) {
                (Some(w), Some(h)) => Some(ImageDims::new(w, h).map_err(|e| IngestError::Malformed {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?),
                _ => None,
            };
            (dims, f.masks)
        }
        RleInput::List(l) => (None, l),
    };
    let mut masks = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let id = r.id.unwrap_or_else(|| format!("{i:04}"));
        let d = ImageDims::new(r.size[1], r.size[0]).map_err(|e| IngestError::Malformed {
            path: path.to_path_buf(),
            reason: format!("mask {id}: {e}"),
        })?;
        masks.push(SegmentMask::from_rle_counts(id, d, &r.counts)?);
    }
    Ok(LoadedMasks {
        dims,
        masks,
        rejected: Vec::new(),
    })
}

/// Tight bounding box of the foreground pixels.
pub fn mask_to_area(m: &SegmentMask) -> Result<Area, IngestError> {
    let w = m.dims.width as usize;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for (i, _) in m.bits.iter().enumerate().filter(|(_, b)| **b) {
        let (x, y) = (i % w, i / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if x0 == usize::MAX {
        return Err(IngestError::EmptyMask(m.id.clone()));
    }
    Ok(Area::new(x0 as i32, y0 as i32, x1 as i32 + 1, y1 as i32 + 1).expect("non-empty bbox"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Segmentation,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub area: Area,
    pub source: CandidateSource,
}

/// Filtered areas ready for graph construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub dims: ImageDims,
    pub areas: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CandidateSet {
    pub fn rects(&self) -> impl Iterator<Item = &Area> {
        self.areas.iter().map(|c| &c.area)
    }
}

/// Size and aspect screening applied before graph construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningParams {
    /// Minimum pixel count `T_s`.
    pub min_size: i64,
    /// Maximum aspect ratio `T_r`.
    pub max_aspect: f64,
}

impl Default for ScreeningParams {
    fn default() -> Self {
        Self {
            min_size: 80 * 80,
            max_aspect: 4.0,
        }
    }
}

impl ScreeningParams {
    pub fn passes(&self, a: &Area) -> bool {
        a.size() >= self.min_size && a.aspect() <= self.max_aspect
    }
}

fn center_dist2(a: &Area, b: &Area) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).powi(2) + (ay - by).powi(2)
}

/// Screen out small or elongated areas and fuse each into its nearest
/// surviving neighbor, repeating until nothing is screened out.
///
/// Identical rectangles are collapsed first. Areas outside `dims` are clipped.
pub fn preprocess(areas: &[Area], params: ScreeningParams, dims: ImageDims) -> CandidateSet {
    let mut warnings = Vec::new();
    let mut current: Vec<Candidate> = Vec::with_capacity(areas.len());
    for a in areas {
        let Some(a) = a.clipped(dims) else {
            warnings.push(format!("area {a:?} lies outside the image and was dropped"));
            continue;
        };
        if current.iter().all(|c| c.area != a) {
            current.push(Candidate {
                area: a,
                source: CandidateSource::Segmentation,
            });
        }
    }

    loop {
        let (mut passing, failing): (Vec<Candidate>, Vec<Candidate>) =
            current.into_iter().partition(|c| params.passes(&c.area));
        if failing.is_empty() {
            current = passing;
            break;
        }
        if passing.is_empty() {
            for f in &failing {
                warnings.push(format!(
                    "area {:?} failed screening with no candidate to fuse into; dropped",
                    <[i32; 4]>::from(f.area)
                ));
            }
            current = passing;
            break;
        }
        for f in &failing {
            let nearest = passing
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    center_dist2(&f.area, &a.area).total_cmp(&center_dist2(&f.area, &b.area))
                })
                .map(|(i, _)| i)
                .expect("passing is non-empty");
            passing[nearest] = Candidate {
                area: fuse(&passing[nearest].area, &f.area),
                source: CandidateSource::Fused,
            };
        }
        // Fusion may have produced duplicates.
        let mut dedup: Vec<Candidate> = Vec::with_capacity(passing.len());
        for c in passing {
            if dedup.iter().all(|d| d.area != c.area) {
                dedup.push(c);
            }
        }
        current = dedup;
    }

    CandidateSet {
        dims,
        areas: current,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(x0: i32, y0: i32, x1: i32, y1: i32) -> Area {
        Area::new(x0, y0, x1, y1).unwrap()
    }

    fn dims() -> ImageDims {
        ImageDims::new(640, 480).unwrap()
    }

    #[test]
    fn bbox_of_single_pixel_and_full_frame() {
        let d = ImageDims::new(20, 10).unwrap();
        let mut bits = vec![false; 200];
        bits[3 * 20 + 7] = true;
        let m = SegmentMask::new("p", d, bits).unwrap();
        assert_eq!(mask_to_area(&m).unwrap(), r(7, 3, 8, 4));
        let full = SegmentMask::new("f", d, vec![true; 200]).unwrap();
        assert_eq!(mask_to_area(&full).unwrap(), d.full_area());
    }

    #[test]
    fn bbox_of_l_shape() {
        let d = ImageDims::new(32, 32).unwrap();
        let mut bits = vec![false; 32 * 32];
        for i in 0..10 {
            bits[i * 32] = true; // column 0, rows 0..10
            bits[i] = true; // row 0, columns 0..10
        }
        let m = SegmentMask::new("l", d, bits).unwrap();
        assert_eq!(mask_to_area(&m).unwrap(), r(0, 0, 10, 10));
    }

    #[test]
    fn empty_mask_errors() {
        let d = ImageDims::new(4, 4).unwrap();
        let m = SegmentMask::new("e", d, vec![false; 16]).unwrap();
        assert!(matches!(mask_to_area(&m), Err(IngestError::EmptyMask(_))));
    }

    #[test]
    fn preprocess_fixed_point() {
        let areas = vec![r(0, 0, 100, 100), r(200, 200, 350, 300)];
        let c = preprocess(&areas, ScreeningParams::default(), dims());
        assert_eq!(c.rects().copied().collect::<Vec<_>>(), areas);
        assert!(c.areas.iter().all(|a| a.source == CandidateSource::Segmentation));
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn preprocess_fuses_small_into_neighbor() {
        let small = r(300, 300, 310, 310);
        let big = r(50, 50, 250, 250);
        let c = preprocess(&[small, big], ScreeningParams::default(), dims());
        assert_eq!(c.areas.len(), 1);
        assert_eq!(c.areas[0].area, r(50, 50, 310, 310));
        assert_eq!(c.areas[0].source, CandidateSource::Fused);
    }

    #[test]
    fn preprocess_drops_lonely_small_area() {
        let c = preprocess(&[r(0, 0, 10, 10)], ScreeningParams::default(), dims());
        assert!(c.areas.is_empty());
        assert_eq!(c.warnings.len(), 1);
    }

    #[test]
    fn preprocess_dedupes_identical() {
        let a = r(0, 0, 100, 100);
        let c = preprocess(&[a, a, a], ScreeningParams::default(), dims());
        assert_eq!(c.areas.len(), 1);
    }

    #[test]
    fn preprocess_rescreens_fused_aspect() {
        // A thin strip fused into a square far to the right yields a wide
        // envelope; the loop keeps going until everything passes.
        let params = ScreeningParams::default();
        let areas = [r(0, 0, 100, 100), r(500, 0, 520, 10), r(0, 300, 100, 400)];
        let c = preprocess(&areas, params, dims());
        assert!(c.areas.iter().all(|a| params.passes(&a.area)));
    }

    #[test]
    fn rle_round_trip_and_column_major() {
        let d = ImageDims::new(3, 2).unwrap();
        // Column-major: (x=0,y=0),(0,1),(1,0),(1,1),(2,0),(2,1)
        let m = SegmentMask::from_rle_counts("r", d, &[1, 2, 3]).unwrap();
        assert!(!m.get(0, 0));
        assert!(m.get(0, 1));
        assert!(m.get(1, 0));
        assert!(!m.get(1, 1));
        assert_eq!(m.to_rle_counts(), vec![1, 2, 3]);
        assert!(SegmentMask::from_rle_counts("bad", d, &[1, 2]).is_err());
    }

    #[test]
    fn load_dir_in_filename_order() {
        let dir = tempfile::tempdir().unwrap();
        let d = ImageDims::new(16, 12).unwrap();
        for (name, a) in [("b.png", r(1, 1, 5, 5)), ("a.png", r(2, 2, 8, 9)), ("c.png", r(0, 0, 16, 12))] {
            let m = SegmentMask::from_area(name, d, &a);
            let img = GrayImage::from_fn(16, 12, |x, y| if m.get(x, y) { 255.0 } else { 0.0 });
            img.save_png(&dir.path().join(name)).unwrap();
        }
        let loaded = load_masks(dir.path()).unwrap();
        let ids: Vec<_> = loaded.masks.iter().map(|m| m.id.as_str()).collect();
        assert_eq!(ids, ["a.png", "b.png", "c.png"]);
        assert_eq!(mask_to_area(&loaded.masks[0]).unwrap(), r(2, 2, 8, 9));
    }

    #[test]
    fn load_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        let loaded = load_masks(dir.path()).unwrap();
        assert!(loaded.masks.is_empty());
        assert!(loaded.rejected.is_empty());
    }

    #[test]
    fn load_rejects_empty_mask_and_checks_manifest_dims() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::filled(8, 8, 0.0).save_png(&dir.path().join("z.png")).unwrap();
        GrayImage::filled(8, 8, 255.0).save_png(&dir.path().join("y.png")).unwrap();
        fs::write(
            dir.path().join(MANIFEST_NAME),
            r#"{"width": 8, "height": 8, "masks": ["z.png", "y.png"]}"#,
        )
        .unwrap();
        let loaded = load_masks(dir.path()).unwrap();
        assert_eq!(loaded.masks.len(), 1);
        assert_eq!(loaded.rejected.len(), 1);
        assert_eq!(loaded.rejected[0].id, "z.png");

        fs::write(
            dir.path().join(MANIFEST_NAME),
            r#"{"width": 9, "height": 8, "masks": ["y.png"]}"#,
        )
        .unwrap();
        assert!(matches!(load_masks(dir.path()), Err(IngestError::DimsMismatch { .. })));
    }

    #[test]
    fn load_rle_file_and_missing_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("masks.json");
        fs::write(
            &p,
            r#"{"width": 3, "height": 2, "masks": [{"id": "m", "size": [2, 3], "counts": [1, 2, 3]}]}"#,
        )
        .unwrap();
        let loaded = load_masks(&p).unwrap();
        assert_eq!(loaded.masks.len(), 1);
        assert_eq!(mask_to_area(&loaded.masks[0]).unwrap(), r(0, 0, 2, 2));
        assert!(matches!(
            load_masks(&dir.path().join("nope")),
            Err(IngestError::MissingPath(_))
        ));
        fs::write(&p, "{not json").unwrap();
        assert!(matches!(load_masks(&p), Err(IngestError::Malformed { .. })));
    }
}
