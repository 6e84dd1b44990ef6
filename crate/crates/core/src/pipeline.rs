//! Dataset-level fit and evaluation, shared by the CLI and the tests.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::finch::{finch, select_partition, Partition, PartitionHierarchy, DEFAULT_MAX_CLUSTERS};
use crate::kernels::RowMatrix;
use crate::metrics::{
    auroc, pixel_auroc, pro_score, EvalReport, Mask, DEFAULT_FPR_LIMIT, DEFAULT_PRO_THRESHOLDS,
};
use crate::prototype::{build_bank, BankMeta, PrototypeBank};
use crate::scoring::{score_image, PostprocessConfig, ScoreMap};
use crate::tensor::{l2_normalize, nearest_resize, read_tensor, DEFAULT_NORM_EPSILON};

/// Runs `f` on a dedicated pool of `workers` threads (all cores when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_clusters: usize,
    /// Informational label of the backbone stages the features came from.
    pub feature_levels: String,
    pub postprocess: PostprocessConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_clusters: DEFAULT_MAX_CLUSTERS,
            feature_levels: "1,2,3".into(),
            postprocess: PostprocessConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub bank: PrototypeBank,
    /// Patch vectors clustered (zero-norm cells excluded).
    pub n_points: usize,
    pub n_zero_cells: usize,
    pub level_counts: Vec<usize>,
    pub selected_level: usize,
    pub fallback: bool,
    pub elapsed: Duration,
}

/// Pools every training patch vector, normalized, with zero cells dropped.
pub fn pool_features(paths: &[PathBuf]) -> Result<(RowMatrix, usize)> {
    let mut dim = None;
    let mut data = Vec::new();
    let mut zero = 0;
    for path in paths {
        let t = read_tensor(path)?;
        match dim {
            None => dim = Some(t.channels()),
            Some(c) if c != t.channels() => {
                return Err(Error::Dataset(format!(
                    "{} has {} channels, expected {c}",
                    path.display(),
                    t.channels()
                )))
            }
            _ => {}
        }
        let n = l2_normalize(&t, DEFAULT_NORM_EPSILON);
        zero += n.zero_count();
        let mut skip = n.zero_cells.iter().peekable();
        for (idx, row) in n.tensor.rows().enumerate() {
            if skip.peek() == Some(&&idx) {
                skip.next();
                continue;
            }
            data.extend_from_slice(row);
        }
    }
    let dim = dim.ok_or_else(|| Error::Dataset("no training tensors".into()))?;
    let rows = data.len() / dim;
    Ok((RowMatrix::new(rows, dim, data)?, zero))
}

fn cluster(points: &RowMatrix) -> Result<PartitionHierarchy> {
    if points.rows() == 1 {
        return PartitionHierarchy::new(vec![Partition::from_labels(points, vec![0])?]);
    }
    finch(points)
}

/// Learns the prototype bank from the training split.
pub fn fit(index: &DatasetIndex, cfg: &FitConfig) -> Result<FitOutcome> {
    let start = Instant::now();
    let (points, n_zero_cells) = pool_features(&index.train_normal)?;
    if points.rows() == 0 {
        return Err(Error::Dataset("every training cell has zero norm".into()));
    }
    log::info!(
        "clustering {} patch vectors of dimension {}",
        points.rows(),
        points.dim()
    );
    let hierarchy = cluster(&points)?;
    let selection = select_partition(&hierarchy, cfg.max_clusters)?;
    let level_counts = hierarchy.counts();
    let mut meta = BankMeta {
        category: index.category.clone(),
        feature_levels: cfg.feature_levels.clone(),
        max_clusters: cfg.max_clusters,
        partition_level: selection.level,
        ..BankMeta::default()
    };
    let hierarchy_text = level_counts
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join("/");
    for (k, v) in [
        ("hierarchy", hierarchy_text),
        ("n_points", points.rows().to_string()),
        ("n_zero_cells", n_zero_cells.to_string()),
        ("partition_fallback", selection.fallback.to_string()),
        ("sigma", cfg.postprocess.sigma.to_string()),
        (
            "output_size",
            format!(
                "{}x{}",
                cfg.postprocess.output_height, cfg.postprocess.output_width
            ),
        ),
    ] {
        meta.extra.insert(k.to_string(), v);
    }
    let bank = build_bank(&points, selection.partition, meta)?;
    Ok(FitOutcome {
        n_points: points.rows(),
        n_zero_cells,
        level_counts,
        selected_level: selection.level,
        fallback: selection.fallback,
        bank,
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub postprocess: PostprocessConfig,
    pub fpr_limit: f64,
    pub pro_thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            postprocess: PostprocessConfig::default(),
            fpr_limit: DEFAULT_FPR_LIMIT,
            pro_thresholds: DEFAULT_PRO_THRESHOLDS,
        }
    }
}

/// Scores one feature file.
pub fn score_file(path: &Path, bank: &PrototypeBank, cfg: &PostprocessConfig) -> Result<ScoreMap> {
    let t = read_tensor(path)?;
    score_image(&t, bank, cfg).map_err(|e| match e {
        Error::Shape(msg) => Error::Shape(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Image scores of many files, in input order.
pub fn image_scores(
    paths: &[PathBuf],
    bank: &PrototypeBank,
    cfg: &PostprocessConfig,
) -> Result<Vec<f32>> {
    paths
        .par_iter()
        .map(|p| score_file(p, bank, cfg).map(|m| m.image_score))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ScoredItem {
    pub path: PathBuf,
    pub anomalous: bool,
    pub image_score: f32,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub items: Vec<ScoredItem>,
}

/// Scores the test split and computes the image/pixel/region metrics.
pub fn evaluate(
    index: &DatasetIndex,
    bank: &PrototypeBank,
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    let anomalous = index.n_anomalous();
    let normal = index.test_items.len() - anomalous;
    if anomalous == 0 || normal == 0 {
        return Err(Error::Metric(format!(
            "evaluation needs normal and anomalous test items, found {normal} normal and {anomalous} anomalous"
        )));
    }
    let pp = cfg.postprocess;
    let (oh, ow) = (pp.output_height, pp.output_width);
    let scored: Vec<(ScoreMap, Mask)> = index
        .test_items
        .par_iter()
        .map(|item| {
            let map = score_file(&item.path, bank, &pp)?;
            let mut mask = item.load_mask(oh, ow)?;
            if (mask.height(), mask.width()) != (oh, ow) {
                mask = Mask::from_tensor(&nearest_resize(&mask.to_tensor(), oh, ow)?)?;
            }
            Ok((map, mask))
        })
        .collect::<Result<_>>()?;

    let scores: Vec<f64> = scored.iter().map(|(m, _)| m.image_score as f64).collect();
    let labels: Vec<bool> = index.test_items.iter().map(|t| t.is_anomalous()).collect();
    let image_auroc = auroc(&scores, &labels)?;

    let maps: Vec<_> = scored.iter().map(|(m, _)| &m.pixels).collect();
    let masks: Vec<Mask> = scored.iter().map(|(_, g)| g.clone()).collect();
    let pixel = pixel_auroc(&maps, &masks)?;
    let pro = pro_score(&maps, &masks, cfg.fpr_limit, cfg.pro_thresholds)?;

    let report = EvalReport {
        category: index.category.clone(),
        image_auroc,
        pixel_auroc: pixel,
        pro_score: pro.score,
        n_images: scored.len(),
        n_anomalous_images: anomalous,
        n_pixels: scored.len() * oh * ow,
        n_anomalous_pixels: masks.iter().map(Mask::count).sum(),
        n_regions: pro.regions,
        sigma: pp.sigma,
        output_size: (oh, ow),
        pro_thresholds: cfg.pro_thresholds,
        fpr_limit: cfg.fpr_limit,
        pro_integrated_to: pro.integrated_to,
    };
    let items = index
        .test_items
        .iter()
        .zip(&scored)
        .map(|(t, (m, _))| ScoredItem {
            path: t.path.clone(),
            anomalous: t.is_anomalous(),
            image_score: m.image_score,
        })
        .collect();
    Ok(EvalOutcome { report, items })
}
