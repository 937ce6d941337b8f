use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use areamatch::config::RunConfig;
use areamatch::dmesa::{match_areas_dmesa, match_areas_injected, BaselineCoarse, CoarseMatchFile};
use areamatch::eval::{area_report, evaluate_points, to_matrix, EvalReport, GroundTruth, PoseParams};
use areamatch::geometry::{Area, ImageDims};
use areamatch::graph::{build_initial_graph, complete_graph, AreaGraph, NodeOrigin};
use areamatch::image::GrayImage;
use areamatch::ingest::{load_masks, mask_to_area, preprocess, CandidateSet, RleFile, RleRecord, SegmentMask};
use areamatch::mesa::match_source_areas;
use areamatch::pipeline::{run_a2pm, BaselinePointMatcher, PointMatch};
use areamatch::similarity::{ImageSimilarity, SimilarityMatrix, SimilarityProvider, SimilarityTable};
use areamatch::synthetic::{gen_synthetic, SyntheticSpec};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser)]
#[command(name = "areamatch", version, about = "Semantic area matching and area-to-point matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Mesa,
    Dmesa,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a directory of masks (or an RLE file) into a candidate set.
    Ingest {
        #[arg(long)]
        masks: PathBuf,
        /// Image size as WxH.
        #[arg(long, value_parser = parse_dims)]
        dims: ImageDims,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and complete the area graph of a candidate set.
    BuildGraph {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print structural violations (none are expected).
        #[arg(long)]
        audit: bool,
    },
    /// Match source areas of graph 0 into image 1.
    MatchAreas {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        graph0: PathBuf,
        #[arg(long)]
        graph1: Option<PathBuf>,
        #[arg(long)]
        img0: PathBuf,
        #[arg(long)]
        img1: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Injected area similarities (mesa).
        #[arg(long)]
        similarity: Option<PathBuf>,
        /// Injected coarse patch matches (dmesa).
        #[arg(long)]
        coarse: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full area-to-point matching on an image pair.
    RunPipeline {
        #[arg(long)]
        img0: PathBuf,
        #[arg(long)]
        img1: PathBuf,
        #[arg(long)]
        masks0: Option<PathBuf>,
        #[arg(long)]
        masks1: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ground truth; adds metrics to the output.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score point or area matches against ground truth.
    Eval {
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write seeded synthetic scenes.
    GenSynthetic {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_dims(s: &str) -> std::result::Result<ImageDims, String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: u32 = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: u32 = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    ImageDims::new(w, h).map_err(|e| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string())),
        None => Ok(RunConfig::default()),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    s.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, s).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_image(path: &Path) -> Result<GrayImage> {
    GrayImage::load(path).map_err(data)
}

fn candidates_from_masks(path: &Path, dims: Option<ImageDims>, cfg: &RunConfig) -> Result<CandidateSet> {
    let loaded = load_masks(path).map_err(data)?;
    let dims = match (dims, loaded.dims) {
        (Some(d), Some(m)) if d != m => {
            return Err(CliError::Data(format!(
                "masks declare {}x{} but the image is {}x{}",
                m.width, m.height, d.width, d.height
            )))
        }
        (Some(d), _) | (None, Some(d)) => d,
        (None, None) => match loaded.masks.first() {
            Some(m) => m.dims(),
            None => return Err(CliError::Data("cannot infer image size from an empty mask set".into())),
        },
    };
    let mut areas = Vec::with_capacity(loaded.masks.len());
    for m in &loaded.masks {
        if m.dims() != dims {
            return Err(CliError::Data(format!("mask {} has size {}x{}, expected {}x{}", m.id, m.dims().width, m.dims().height, dims.width, dims.height)));
        }
        areas.push(mask_to_area(m).map_err(data)?);
    }
    let mut set = preprocess(&areas, cfg.screening(), dims);
    for r in loaded.rejected {
        set.warnings.push(format!("mask {} rejected: {}", r.id, r.reason));
    }
    Ok(set)
}

fn graph_from_candidates(c: &CandidateSet, cfg: &RunConfig) -> AreaGraph {
    let p = cfg.graph();
    complete_graph(build_initial_graph(c, &p), &p)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AreaPairRecord {
    source: usize,
    area0: Area,
    area1: Area,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct AreaMatchOutput {
    method: String,
    matches: Vec<AreaPairRecord>,
    unmatched: Vec<usize>,
    failures: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provider_calls: Option<usize>,
}

impl AreaMatchOutput {
    fn pairs(&self) -> Vec<(Area, Area)> {
        self.matches.iter().map(|m| (m.area0, m.area1)).collect()
    }
}

fn run_mesa(g0: &AreaGraph, g1: &AreaGraph, provider: &dyn SimilarityProvider, cfg: &RunConfig) -> AreaMatchOutput {
    let ms = SimilarityMatrix::for_graphs(g0, g1, cfg.t_as, cfg.abn_pruning);
    let r = match_source_areas(g0, g1, provider, &ms, &cfg.mesa());
    AreaMatchOutput {
        method: "mesa".into(),
        matches: r
            .matches
            .iter()
            .map(|m| AreaPairRecord {
                source: m.source,
                area0: m.area0,
                area1: m.area1,
                energy: Some(m.energy),
            })
            .collect(),
        unmatched: r.unmatched,
        failures: r.failures.iter().map(|f| format!("source {}: {}", f.source, f.reason)).collect(),
        provider_calls: Some(ms.provider_calls()),
    }
}

fn dmesa_sources(g0: &AreaGraph, cfg: &RunConfig) -> Vec<(usize, Area)> {
    g0.source_nodes(cfg.l_star)
        .into_iter()
        .map(|id| &g0.nodes()[id])
        .filter(|n| n.origin != NodeOrigin::Fallback)
        .map(|n| (n.id, n.area))
        .collect()
}

fn cmd_ingest(masks: &Path, dims: ImageDims, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let set = candidates_from_masks(masks, Some(dims), &cfg)?;
    write_json(out, &set)
}

fn cmd_build_graph(candidates: &Path, config: Option<&Path>, out: &Path, audit: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let c: CandidateSet = read_json(candidates)?;
    let g = graph_from_candidates(&c, &cfg);
    if audit {
        let problems = g.audit(&cfg.graph());
        println!("audit: {} violation(s)", problems.len());
        for p in &problems {
            println!("  {p}");
        }
    }
    write_json(out, &g)
}

#[allow(clippy::too_many_arguments)]
fn cmd_match_areas(
    method: Method,
    graph0: &Path,
    graph1: Option<&Path>,
    img0: &Path,
    img1: &Path,
    config: Option<&Path>,
    similarity: Option<&Path>,
    coarse: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let g0: AreaGraph = read_json(graph0)?;
    let (i0, i1) = (load_image(img0)?, load_image(img1)?);
    if g0.dims() != i0.dims() {
        return Err(CliError::Data("graph0 and img0 sizes differ".into()));
    }
    let output = match method {
        Method::Mesa => {
            let path = graph1.ok_or_else(|| CliError::Usage("--graph1 is required for mesa".into()))?;
            let g1: AreaGraph = read_json(path)?;
            if g1.dims() != i1.dims() {
                return Err(CliError::Data("graph1 and img1 sizes differ".into()));
            }
            match similarity {
                Some(p) => {
                    let table = SimilarityTable::load(p).map_err(data)?;
                    run_mesa(&g0, &g1, &table, &cfg)
                }
                None => run_mesa(&g0, &g1, &ImageSimilarity::baseline(&i0, &i1), &cfg),
            }
        }
        Method::Dmesa => {
            let sources = dmesa_sources(&g0, &cfg);
            let r = match coarse {
                Some(p) => {
                    let file = CoarseMatchFile::load(p).map_err(data)?;
                    match_areas_injected(&sources, i0.dims(), i1.dims(), &file, &cfg.dmesa())
                }
                None => match_areas_dmesa(&sources, &i0, &i1, &BaselineCoarse, &cfg.dmesa()),
            };
            AreaMatchOutput {
                method: "dmesa".into(),
                matches: r
                    .matches
                    .iter()
                    .map(|m| AreaPairRecord {
                        source: m.source,
                        area0: m.area0,
                        area1: m.area1,
                        energy: None,
                    })
                    .collect(),
                unmatched: r.unmatched,
                failures: r.failures.iter().map(|(s, e)| format!("source {s}: {e}")).collect(),
                provider_calls: None,
            }
        }
    };
    write_json(out, &output)
}

#[derive(Debug, Serialize, Deserialize)]
struct PipelineFile {
    area_matches: AreaMatchOutput,
    matches: Vec<PointMatch>,
    coverage: f64,
    global_added: usize,
    warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metrics: Option<EvalReport>,
}

fn load_gt(path: &Path) -> Result<GroundTruth> {
    let gt: GroundTruth = read_json(path)?;
    gt.validate().map_err(data)?;
    Ok(gt)
}

fn evaluate(points: &[PointMatch], areas: &[(Area, Area)], gt: &GroundTruth, cfg: &RunConfig) -> EvalReport {
    let pose = PoseParams {
        seed: cfg.seed,
        ..PoseParams::default()
    };
    let mut report = evaluate_points(points, gt, &pose);
    if let GroundTruth::Homography { h, dims0, dims1 } = gt {
        report.areas = Some(area_report(areas, &to_matrix(h), *dims0, *dims1));
    }
    report
}

#[allow(clippy::too_many_arguments)]
fn cmd_run_pipeline(
    img0: &Path,
    img1: &Path,
    masks0: Option<&Path>,
    masks1: Option<&Path>,
    config: Option<&Path>,
    gt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (i0, i1) = (load_image(img0)?, load_image(img1)?);
    let gt = gt.map(load_gt).transpose()?;
    let mut warnings = Vec::new();
    let areas = match (masks0, masks1) {
        (Some(m0), Some(m1)) => {
            let c0 = candidates_from_masks(m0, Some(i0.dims()), &cfg)?;
            let c1 = candidates_from_masks(m1, Some(i1.dims()), &cfg)?;
            let g0 = graph_from_candidates(&c0, &cfg);
            let g1 = graph_from_candidates(&c1, &cfg);
            run_mesa(&g0, &g1, &ImageSimilarity::baseline(&i0, &i1), &cfg)
        }
        (None, None) => {
            warnings.push("no masks given: area matching skipped".to_string());
            AreaMatchOutput {
                method: "none".into(),
                ..AreaMatchOutput::default()
            }
        }
        _ => return Err(CliError::Usage("--masks0 and --masks1 must be given together".into())),
    };
    let pairs = areas.pairs();
    let result = run_a2pm(&i0, &i1, &pairs, &BaselinePointMatcher, &cfg.pipeline()).map_err(|e| CliError::Internal(e.to_string()))?;
    warnings.extend(result.warnings);
    let metrics = gt.as_ref().map(|g| evaluate(&result.matches, &pairs, g, &cfg));
    write_json(
        out,
        &PipelineFile {
            area_matches: areas,
            matches: result.matches,
            coverage: result.coverage,
            global_added: result.global_added,
            warnings,
            metrics,
        },
    )
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MatchInput {
    Pipeline(PipelineFile),
    Areas(AreaMatchOutput),
    Points(Vec<PointMatch>),
}

fn cmd_eval(matches: &Path, gt: &Path, report: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let gt = load_gt(gt)?;
    let input: MatchInput = read_json(matches)?;
    let r = match input {
        MatchInput::Pipeline(p) => evaluate(&p.matches, &p.area_matches.pairs(), &gt, &cfg),
        MatchInput::Points(p) => evaluate(&p, &[], &gt, &cfg),
        MatchInput::Areas(a) => {
            let GroundTruth::Homography { h, dims0, dims1 } = &gt else {
                return Err(CliError::Data("area matches need a homography ground truth".into()));
            };
            EvalReport {
                areas: Some(area_report(&a.pairs(), &to_matrix(h), *dims0, *dims1)),
                ..EvalReport::default()
            }
        }
    };
    write_json(report, &r)?;
    print!("{}", r.to_table());
    Ok(())
}

fn rle_file(areas: &[Area], dims: ImageDims) -> RleFile {
    RleFile {
        width: Some(dims.width),
        height: Some(dims.height),
        masks: areas
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let m = SegmentMask::from_area(format!("seg_{i:03}"), dims, a);
                RleRecord {
                    id: Some(m.id.clone()),
                    size: [dims.height, dims.width],
                    counts: m.to_rle_counts(),
                }
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct Correspondence {
    index: usize,
    area0: Area,
    area1: Area,
}

fn cmd_gen_synthetic(spec: &Path, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = {
        let s = fs::read_to_string(spec).map_err(|e| CliError::Usage(format!("{}: {e}", spec.display())))?;
        serde_json::from_str(&s).map_err(|e| CliError::Usage(format!("invalid spec: {e}")))?
    };
    if spec.width < 16 || spec.height < 16 || !(spec.texture_scale > 0.0) || !(spec.scale > 0.0) {
        return Err(CliError::Usage("spec needs width, height >= 16 and positive scales".into()));
    }
    for s in gen_synthetic(&spec) {
        let dir = out.join(format!("scene_{:03}", s.index));
        fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        s.img0.save_png(&dir.join("img0.png")).map_err(data)?;
        s.img1.save_png(&dir.join("img1.png")).map_err(data)?;
        write_json(&dir.join("masks0.json"), &rle_file(&s.areas0, s.img0.dims()))?;
        write_json(&dir.join("masks1.json"), &rle_file(&s.areas1, s.img1.dims()))?;
        write_json(&dir.join("gt.json"), &s.ground_truth())?;
        let table: Vec<Correspondence> = s
            .pairs()
            .into_iter()
            .enumerate()
            .map(|(index, (area0, area1))| Correspondence { index, area0, area1 })
            .collect();
        write_json(&dir.join("areas.json"), &table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { masks, dims, config, out } => cmd_ingest(&masks, dims, config.as_deref(), &out),
        Command::BuildGraph { candidates, config, out, audit } => cmd_build_graph(&candidates, config.as_deref(), &out, audit),
        Command::MatchAreas {
            method,
            graph0,
            graph1,
            img0,
            img1,
            config,
            similarity,
            coarse,
            out,
        } => cmd_match_areas(
            method,
            &graph0,
            graph1.as_deref(),
            &img0,
            &img1,
            config.as_deref(),
            similarity.as_deref(),
            coarse.as_deref(),
            &out,
        ),
        Command::RunPipeline {
            img0,
            img1,
            masks0,
            masks1,
            config,
            gt,
            out,
        } => cmd_run_pipeline(&img0, &img1, masks0.as_deref(), masks1.as_deref(), config.as_deref(), gt.as_deref(), &out),
        Command::Eval { matches, gt, report, config } => cmd_eval(&matches, &gt, &report, config.as_deref()),
        Command::GenSynthetic { spec, out } => cmd_gen_synthetic(&spec, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
        Err(_) => ExitCode::from(3),
    }
}
