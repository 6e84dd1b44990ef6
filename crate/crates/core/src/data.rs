//! Dataset layout and the synthetic feature-space generator.
//!
//! Layout under `<root>/<category>/`:
//!
//! ```text
//! train/good/*.pft                     normal training tensors
//! test/good/*.pft                      normal test tensors
//! test/<defect>/*.pft                  anomalous test tensors
//! ground_truth/<defect>/<stem>_mask.pft  one-channel 0/1 masks
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::scoring::gaussian_smooth;
use crate::tensor::{read_tensor, read_tensor_header, write_tensor, FeatureTensor};

pub const GOOD: &str = "good";
pub const SYNTH_DEFECT: &str = "synthetic_defect";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestItem {
    pub path: PathBuf,
    pub defect_type: String,
    pub mask: Option<PathBuf>,
}

impl TestItem {
    pub fn is_anomalous(&self) -> bool {
        self.defect_type != GOOD
    }

    /// Ground-truth mask, or an empty mask of the given size for normal items.
    pub fn load_mask(&self, height: usize, width: usize) -> Result<Mask> {
        match &self.mask {
            Some(p) => Mask::from_tensor(&read_tensor(p)?),
            None => Mask::empty(height, width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub category: String,
    pub train_normal: Vec<PathBuf>,
    pub test_items: Vec<TestItem>,
    /// Mask resolution shared by every ground-truth file, if any exist.
    pub mask_size: Option<(usize, usize)>,
}

impl DatasetIndex {
    pub fn n_anomalous(&self) -> usize {
        self.test_items.iter().filter(|t| t.is_anomalous()).count()
    }
}

fn sorted_pft(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "pft") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Indexes and validates `<root>/<category>`. Tensor and mask headers are
/// checked; payloads are read on demand.
pub fn load_dataset(root: impl AsRef<Path>, category: &str) -> Result<DatasetIndex> {
    let base = root.as_ref().join(category);
    let train_dir = base.join("train").join(GOOD);
    if !train_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing train directory {}",
            train_dir.display()
        )));
    }
    let train_normal = sorted_pft(&train_dir)?;
    if train_normal.is_empty() {
        return Err(Error::Dataset(format!(
            "no training tensors in {}",
            train_dir.display()
        )));
    }
    for p in &train_normal {
        read_tensor_header(p)?;
    }

    let mut test_items = Vec::new();
    let mut mask_size = None;
    let test_dir = base.join("test");
    if test_dir.is_dir() {
        for (defect, dir) in sorted_subdirs(&test_dir)? {
            for path in sorted_pft(&dir)? {
                read_tensor_header(&path)?;
                let mask = if defect == GOOD {
                    None
                } else {
                    let stem = path.file_stem().unwrap().to_string_lossy();
                    let mask = base
                        .join("ground_truth")
                        .join(&defect)
                        .join(format!("{stem}_mask.pft"));
                    if !mask.is_file() {
                        return Err(Error::Dataset(format!(
                            "anomalous item {} has no mask at {}",
                            path.display(),
                            mask.display()
                        )));
                    }
                    let (mh, mw, mc) = read_tensor_header(&mask)?;
                    if mc != 1 {
                        return Err(Error::Dataset(format!(
                            "mask {} has {mc} channels, expected 1",
                            mask.display()
                        )));
                    }
                    match mask_size {
                        None => mask_size = Some((mh, mw)),
                        Some(s) if s != (mh, mw) => {
                            return Err(Error::Dataset(format!(
                                "mask {} is {mh}x{mw}, others are {}x{}",
                                mask.display(),
                                s.0,
                                s.1
                            )))
                        }
                        _ => {}
                    }
                    Some(mask)
                };
                test_items.push(TestItem {
                    path,
                    defect_type: defect.clone(),
                    mask,
                });
            }
        }
    }
    Ok(DatasetIndex {
        category: category.to_string(),
        train_normal,
        test_items,
        mask_size,
    })
}

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub category: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    /// Smoothing (in cells) of the field that assigns latent directions.
    pub smoothness: f64,
    pub n_directions: usize,
    /// Per-component standard deviation of the jitter added to a direction.
    pub jitter: f64,
    /// Inclusive range of defect rectangle side lengths, in cells.
    pub defect_size: (usize, usize),
    /// Rotation of defect vectors away from the latent directions, degrees.
    pub defect_shift_deg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            category: "synthetic".into(),
            seed: 7,
            n_train: 40,
            n_test_normal: 20,
            n_test_anomalous: 20,
            grid: (32, 32),
            channels: 64,
            smoothness: 3.0,
            n_directions: 8,
            jitter: 0.1,
            defect_size: (4, 10),
            defect_shift_deg: 45.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        let (lo, hi) = self.defect_size;
        let checks = [
            (self.n_train >= 1, "n_train must be at least 1"),
            (self.n_test_normal >= 1, "n_test_normal must be at least 1"),
            (h >= 1 && w >= 1, "grid must be non-empty"),
            (self.n_directions >= 1, "need at least one latent direction"),
            (
                self.channels > self.n_directions,
                "channels must exceed the number of latent directions",
            ),
            (lo >= 1 && lo <= hi, "defect size range is empty"),
            (hi <= h.min(w), "defect size exceeds the grid"),
            (self.smoothness > 0.0, "smoothness must be positive"),
            (self.jitter >= 0.0, "jitter must be non-negative"),
            (
                (0.0..=90.0).contains(&self.defect_shift_deg),
                "defect shift must be within [0, 90] degrees",
            ),
            (!self.category.is_empty(), "category must be non-empty"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Invalid(msg.into()));
            }
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Removes from `v` its components along the (orthonormal) `basis`.
fn reject(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn latent_directions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_directions);
    while basis.len() < cfg.n_directions {
        let mut v = gaussian_vec(rng, cfg.channels);
        reject(&mut v, &basis);
        if normalize(&mut v) > 1e-6 {
            basis.push(v);
        }
    }
    basis
}

fn item_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_sample(
    cfg: &SynthConfig,
    dirs: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<FeatureTensor> {
    let (h, w) = cfg.grid;
    let radius = (3.0 * cfg.smoothness).ceil() as usize;
    let fields = dirs
        .iter()
        .map(|_| {
            let noise: Vec<f32> = (0..h * w)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            FeatureTensor::new(h, w, 1, noise).map(|t| gaussian_smooth(&t, cfg.smoothness, radius))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(h * w * cfg.channels);
    for idx in 0..h * w {
        let pick = (0..dirs.len())
            .max_by(|&a, &b| fields[a].data()[idx].total_cmp(&fields[b].data()[idx]))
            .unwrap();
        let magnitude = rng.random_range(0.5..2.0);
        for &d in &dirs[pick] {
            let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.jitter;
            data.push((magnitude * (d + jitter)) as f32);
        }
    }
    FeatureTensor::new(h, w, cfg.channels, data)
}

/// Rotates `x` by `theta` toward a random direction orthogonal to every
/// latent direction and to `x`, so the result is at least `theta` away from
/// each latent direction. Keeps the norm of `x`.
fn rotate_away(x: &[f32], dirs: &[Vec<f64>], theta: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut unit: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let norm = normalize(&mut unit);
    let max_cos = theta.cos() + 1e-9;
    for _ in 0..64 {
        let mut u = gaussian_vec(rng, x.len());
        reject(&mut u, dirs);
        reject(&mut u, std::slice::from_ref(&unit));
        if normalize(&mut u) < 1e-6 {
            continue;
        }
        let v: Vec<f64> = unit
            .iter()
            .zip(&u)
            .map(|(a, b)| theta.cos() * a + theta.sin() * b)
            .collect();
        if dirs.iter().all(|d| dot(&v, d).abs() <= max_cos) {
            return v.iter().map(|&c| (c * norm) as f32).collect();
        }
    }
    unreachable!("rotation orthogonal to the latent span always satisfies the angle bound")
}

/// Writes a synthetic dataset to `out_dir/<category>` and returns its index.
///
/// Anomalous item `k` copies normal test item `k mod n_test_normal` and
/// rewrites a random rectangle with rotated vectors; with a zero shift it is
/// an exact copy.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    cfg.validate()?;
    let root = out_dir.as_ref();
    let base = root.join(&cfg.category);
    let dirs_to_make = [
        base.join("train").join(GOOD),
        base.join("test").join(GOOD),
        base.join("test").join(SYNTH_DEFECT),
        base.join("ground_truth").join(SYNTH_DEFECT),
    ];
    for d in &dirs_to_make[..2] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    if cfg.n_test_anomalous > 0 {
        for d in &dirs_to_make[2..] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
    }

    let mut rng = item_rng(cfg.seed, 0);
    let dirs = latent_directions(cfg, &mut rng);
    let mut stream = 1u64;
    let mut next_rng = || {
        stream += 1;
        item_rng(cfg.seed, stream)
    };

    for k in 0..cfg.n_train {
        let t = normal_sample(cfg, &dirs, &mut next_rng())?;
        write_tensor(
            &t,
            base.join("train").join(GOOD).join(format!("{k:03}.pft")),
        )?;
    }
    let mut test_normals = Vec::with_capacity(cfg.n_test_normal);
    for k in 0..cfg.n_test_normal {
        let t = normal_sample(cfg, &dirs, &mut next_rng())?;
        write_tensor(&t, base.join("test").join(GOOD).join(format!("{k:03}.pft")))?;
        test_normals.push(t);
    }

    let (h, w) = cfg.grid;
    let theta = cfg.defect_shift_deg * PI / 180.0;
    for k in 0..cfg.n_test_anomalous {
        let mut rng = next_rng();
        let source = &test_normals[k % cfg.n_test_normal];
        let rh = rng.random_range(cfg.defect_size.0..=cfg.defect_size.1);
        let rw = rng.random_range(cfg.defect_size.0..=cfg.defect_size.1);
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        let mut data = source.data().to_vec();
        let mut mask = vec![0f32; h * w];
        for i in top..top + rh {
            for j in left..left + rw {
                let idx = i * w + j;
                mask[idx] = 1.0;
                if cfg.defect_shift_deg > 0.0 {
                    let span = idx * cfg.channels..(idx + 1) * cfg.channels;
                    let rotated = rotate_away(&data[span.clone()], &dirs, theta, &mut rng);
                    data[span].copy_from_slice(&rotated);
                }
            }
        }
        let t = FeatureTensor::new(h, w, cfg.channels, data)?;
        write_tensor(
            &t,
            base.join("test")
                .join(SYNTH_DEFECT)
                .join(format!("{k:03}.pft")),
        )?;
        let m = FeatureTensor::new(h, w, 1, mask)?;
        write_tensor(
            &m,
            base.join("ground_truth")
                .join(SYNTH_DEFECT)
                .join(format!("{k:03}_mask.pft")),
        )?;
    }
    load_dataset(root, &cfg.category)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 2,
            n_test_normal: 2,
            n_test_anomalous: 2,
            grid: (8, 8),
            channels: 16,
            defect_size: (2, 4),
            ..SynthConfig::default()
        }
    }

    fn cos(a: &[f32], b: &[f64]) -> f64 {
        let a64: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        dot(&a64, b) / dot(&a64, &a64).sqrt()
    }

    #[test]
    fn generates_and_loads_layout() {
        let dir = tempfile::tempdir().unwrap();
        let idx = synth_generate(&small(), dir.path()).unwrap();
        assert_eq!(idx.train_normal.len(), 2);
        assert_eq!(idx.test_items.len(), 4);
        assert_eq!(idx.n_anomalous(), 2);
        assert_eq!(idx.mask_size, Some((8, 8)));
        for item in idx.test_items.iter().filter(|t| t.is_anomalous()) {
            let m = item.load_mask(8, 8).unwrap();
            assert!(m.count() >= 4 && m.count() <= 16);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ia = synth_generate(&small(), a.path()).unwrap();
        let ib = synth_generate(&small(), b.path()).unwrap();
        let files = |i: &DatasetIndex| {
            let mut v: Vec<PathBuf> = i.train_normal.clone();
            for t in &i.test_items {
                v.push(t.path.clone());
                v.extend(t.mask.clone());
            }
            v
        };
        for (pa, pb) in files(&ia).iter().zip(files(&ib)) {
            assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
        }
    }

    #[test]
    fn zero_shift_copies_source() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            defect_shift_deg: 0.0,
            ..small()
        };
        let idx = synth_generate(&cfg, dir.path()).unwrap();
        let goods: Vec<_> = idx
            .test_items
            .iter()
            .filter(|t| !t.is_anomalous())
            .collect();
        let bads: Vec<_> = idx.test_items.iter().filter(|t| t.is_anomalous()).collect();
        for (k, bad) in bads.iter().enumerate() {
            assert_eq!(
                fs::read(&bad.path).unwrap(),
                fs::read(&goods[k % goods.len()].path).unwrap()
            );
        }
    }

    #[test]
    fn defects_are_rotated_away_and_masks_cover_them() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let idx = synth_generate(&cfg, dir.path()).unwrap();
        let dirs = latent_directions(&cfg, &mut item_rng(cfg.seed, 0));
        let goods: Vec<_> = idx
            .test_items
            .iter()
            .filter(|t| !t.is_anomalous())
            .collect();
        for (k, bad) in idx
            .test_items
            .iter()
            .filter(|t| t.is_anomalous())
            .enumerate()
        {
            let t = read_tensor(&bad.path).unwrap();
            let src = read_tensor(&goods[k % goods.len()].path).unwrap();
            let m = bad.load_mask(8, 8).unwrap();
            for (c, &fg) in m.data().iter().enumerate() {
                if fg {
                    for d in &dirs {
                        assert!(cos(t.row(c), d).abs() <= (45f64.to_radians()).cos() + 1e-6);
                    }
                } else {
                    assert_eq!(t.row(c), src.row(c));
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig {
            n_train: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            defect_size: (3, 9),
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            channels: 8,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            n_test_anomalous: 0,
            ..small()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn load_rejects_missing_mask() {
        let dir = tempfile::tempdir().unwrap();
        synth_generate(&small(), dir.path()).unwrap();
        let mask = dir
            .path()
            .join("synthetic/ground_truth")
            .join(SYNTH_DEFECT)
            .join("001_mask.pft");
        fs::remove_file(&mask).unwrap();
        match load_dataset(dir.path(), "synthetic") {
            Err(Error::Dataset(msg)) => assert!(msg.contains("001.pft"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_empty_train() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("cat/train/good")).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), "cat"),
            Err(Error::Dataset(_))
        ));
        assert!(load_dataset(dir.path(), "missing").is_err());
    }

    #[test]
    fn load_small_tree() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("cat");
        for d in [
            "train/good",
            "test/good",
            "test/crack",
            "ground_truth/crack",
        ] {
            fs::create_dir_all(base.join(d)).unwrap();
        }
        let t = FeatureTensor::zeros(2, 2, 3).unwrap();
        write_tensor(&t, base.join("train/good/a.pft")).unwrap();
        write_tensor(&t, base.join("train/good/b.pft")).unwrap();
        write_tensor(&t, base.join("test/good/n.pft")).unwrap();
        write_tensor(&t, base.join("test/crack/x.pft")).unwrap();
        let m = FeatureTensor::new(2, 2, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        write_tensor(&m, base.join("ground_truth/crack/x_mask.pft")).unwrap();
        let idx = load_dataset(dir.path(), "cat").unwrap();
        assert_eq!(idx.train_normal.len(), 2);
        assert_eq!(idx.test_items.len(), 2);
        assert_eq!(idx.test_items[0].defect_type, "crack");
        assert_eq!(idx.test_items[1].defect_type, GOOD);
    }
}
