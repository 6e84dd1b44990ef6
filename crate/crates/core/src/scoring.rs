//! Anomaly scoring against a prototype bank.
//!
//! The per-cell score is one minus the best cosine similarity to any
//! prototype. With unit-norm features and kernels that is a 1x1 convolution
//! (one matrix product), a channel max-pool and a subtraction. The patch map
//! is then upsampled and Gaussian-smoothed for localization; the image score
//! is the maximum of the patch map before upsampling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::{exact_dot, gemm_abt};
use crate::prototype::PrototypeBank;
use crate::tensor::{bilinear_resize, l2_normalize, FeatureTensor, DEFAULT_NORM_EPSILON};

pub const DEFAULT_SIGMA: f64 = 4.0;
pub const DEFAULT_OUTPUT_SIZE: usize = 224;

const FEATURE_UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessConfig {
    pub output_height: usize,
    pub output_width: usize,
    pub sigma: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            output_height: DEFAULT_OUTPUT_SIZE,
            output_width: DEFAULT_OUTPUT_SIZE,
            sigma: DEFAULT_SIGMA,
        }
    }
}

impl PostprocessConfig {
    pub fn square(size: usize, sigma: f64) -> Self {
        Self {
            output_height: size,
            output_width: size,
            sigma,
        }
    }

    /// Kernel radius in output pixels, `ceil(3 sigma)`.
    pub fn radius(&self) -> usize {
        (3.0 * self.sigma).ceil() as usize
    }

    pub fn validate(&self, grid_h: usize, grid_w: usize) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Invalid(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.output_height < grid_h || self.output_width < grid_w {
            return Err(Error::Invalid(format!(
                "output {}x{} is smaller than the {grid_h}x{grid_w} feature grid",
                self.output_height, self.output_width
            )));
        }
        Ok(())
    }
}

/// Scores of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// Upsampled and smoothed anomaly map, `C = 1`.
    pub pixels: FeatureTensor,
    /// Patch-grid anomaly map before upsampling, `C = 1`.
    pub patch: FeatureTensor,
    /// Maximum of `patch`.
    pub image_score: f32,
    /// Flat indices of feature cells that had zero norm (scored as 1).
    pub zero_cells: Vec<usize>,
}

impl ScoreMap {
    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn values(&self) -> &[f32] {
        self.pixels.data()
    }
}

/// Cosine similarity of every cell to every prototype, `H x W x K`.
///
/// `features` must already be L2-normalized (zero cells allowed).
pub fn similarity_tensor(features: &FeatureTensor, bank: &PrototypeBank) -> Result<FeatureTensor> {
    let c = features.channels();
    if c != bank.dim() {
        return Err(Error::Shape(format!(
            "features have {c} channels but the bank has dimension {}",
            bank.dim()
        )));
    }
    for (idx, cell) in features.rows().enumerate() {
        let sq = exact_dot(cell, cell);
        if sq != 0.0 && (sq.sqrt() - 1.0).abs() > FEATURE_UNIT_TOLERANCE {
            return Err(Error::Invalid(format!(
                "feature cell {idx} is not normalized (norm {})",
                sq.sqrt()
            )));
        }
    }
    let m = features.num_cells();
    let k = bank.len();
    let mut out = vec![0f32; m * k];
    gemm_abt(features.data(), m, bank.kernels().data(), k, c, &mut out);
    FeatureTensor::new(features.height(), features.width(), k, out)
}

/// Per-cell maximum over channels.
pub fn channel_max_pool(sim: &FeatureTensor) -> FeatureTensor {
    let data = sim
        .rows()
        .map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    FeatureTensor::new(sim.height(), sim.width(), 1, data).expect("shape preserved")
}

/// `1 - normal`, clamped to `[0, 2]` to absorb rounding in the cosines.
pub fn anomaly_map(normal: &FeatureTensor) -> FeatureTensor {
    let data = normal
        .data()
        .iter()
        .map(|&v| (1.0 - v).clamp(0.0, 2.0))
        .collect();
    FeatureTensor::new(normal.height(), normal.width(), normal.channels(), data)
        .expect("shape preserved")
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur of a single-channel map with reflected borders.
pub fn gaussian_smooth(map: &FeatureTensor, sigma: f64, radius: usize) -> FeatureTensor {
    let (h, w) = (map.height(), map.width());
    let taps = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let src = map.data();
    let mut horizontal = vec![0f64; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            horizontal[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, wt)| wt * row[reflect_index(x as isize + t as isize - r, w)] as f64)
                .sum();
        }
    }
    let mut data = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = taps
                .iter()
                .enumerate()
                .map(|(t, wt)| {
                    wt * horizontal[reflect_index(y as isize + t as isize - r, h) * w + x]
                })
                .sum();
            data[y * w + x] = v as f32;
        }
    }
    FeatureTensor::new(h, w, 1, data).expect("shape preserved")
}

/// Bilinear upsampling to the output size followed by Gaussian smoothing.
pub fn postprocess(map: &FeatureTensor, cfg: &PostprocessConfig) -> Result<FeatureTensor> {
    if map.channels() != 1 {
        return Err(Error::Shape(format!(
            "score map must have one channel, got {}",
            map.channels()
        )));
    }
    cfg.validate(map.height(), map.width())?;
    let up = bilinear_resize(map, cfg.output_height, cfg.output_width)?;
    Ok(gaussian_smooth(&up, cfg.sigma, cfg.radius()))
}

/// Image-level score: the largest patch anomaly score.
pub fn image_score(m: &ScoreMap) -> f32 {
    m.patch.max_value()
}

/// Full scoring path for one image's (unnormalized) features.
pub fn score_image(
    features: &FeatureTensor,
    bank: &PrototypeBank,
    cfg: &PostprocessConfig,
) -> Result<ScoreMap> {
    let normalized = l2_normalize(features, DEFAULT_NORM_EPSILON);
    if normalized.zero_count() > 0 {
        log::debug!("{} zero-norm cells scored as 1", normalized.zero_count());
    }
    let sim = similarity_tensor(&normalized.tensor, bank)?;
    let patch = anomaly_map(&channel_max_pool(&sim));
    let pixels = postprocess(&patch, cfg)?;
    let mut out = ScoreMap {
        pixels,
        image_score: 0.0,
        patch,
        zero_cells: normalized.zero_cells,
    };
    out.image_score = image_score(&out);
    Ok(out)
}

/// 8-bit gray level for a score in `[0, 2]`.
#[inline]
pub fn heat_level(s: f32) -> u8 {
    (255.0 * s as f64 / 2.0).round().clamp(0.0, 255.0) as u8
}

fn heat_bytes(map: &FeatureTensor) -> Vec<u8> {
    map.data().iter().map(|&s| heat_level(s)).collect()
}

pub fn write_heatmap_png(map: &FeatureTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        map.width() as u32,
        map.height() as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&heat_bytes(map)).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Binary PGM (`P5`) variant of the heatmap.
pub fn write_heatmap_pgm(map: &FeatureTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write!(out, "P5\n{} {}\n255\n", map.width(), map.height())
        .and_then(|_| out.write_all(&heat_bytes(map)))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::RowMatrix;
    use crate::prototype::BankMeta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, c: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        crate::tensor::normalize_in_place(&mut v, 1e-12);
        v
    }

    fn bank_of(rows: Vec<Vec<f32>>) -> PrototypeBank {
        let c = rows[0].len();
        let m = RowMatrix::from_rows(c, rows.iter().map(|r| r.as_slice())).unwrap();
        PrototypeBank::new(m, BankMeta::default()).unwrap()
    }

    fn basis(c: usize, k: usize) -> Vec<f32> {
        (0..c).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn self_similarity_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<_> = (0..5).map(|_| unit(&mut rng, 6)).collect();
        let target = rows[3].clone();
        let bank = bank_of(rows);
        let f = FeatureTensor::from_fn(3, 2, 6, |_, _, c| target[c]).unwrap();
        let sim = similarity_tensor(&f, &bank).unwrap();
        assert_eq!(sim.channels(), 5);
        for cell in sim.rows() {
            assert!((cell[3] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_features_give_zero_similarity() {
        let bank = bank_of(vec![basis(4, 0), basis(4, 1)]);
        let f =
            FeatureTensor::from_fn(2, 2, 4, |i, _, c| if c == 2 + i { 1.0 } else { 0.0 }).unwrap();
        let sim = similarity_tensor(&f, &bank).unwrap();
        assert!(sim.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = bank_of((0..3).map(|_| unit(&mut rng, 4)).collect());
        let cells: Vec<f32> = (0..4).flat_map(|_| unit(&mut rng, 4)).collect();
        let f = FeatureTensor::new(2, 2, 4, cells).unwrap();
        let sim = similarity_tensor(&f, &bank).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    let mut dot = 0f64;
                    for c in 0..4 {
                        dot += f.get(i, j, c) as f64 * bank.kernels().row(k)[c] as f64;
                    }
                    assert!((sim.get(i, j, k) as f64 - dot).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn similarity_rejects_mismatch_and_unnormalized() {
        let bank = bank_of(vec![basis(3, 0)]);
        let f = FeatureTensor::zeros(1, 1, 4).unwrap();
        assert!(matches!(similarity_tensor(&f, &bank), Err(Error::Shape(_))));
        let g = FeatureTensor::new(1, 1, 3, vec![2.0, 0.0, 0.0]).unwrap();
        assert!(similarity_tensor(&g, &bank).is_err());
    }

    #[test]
    fn channel_max_examples() {
        let one = FeatureTensor::new(1, 2, 1, vec![0.3, -0.2]).unwrap();
        assert_eq!(channel_max_pool(&one), one);
        let t = FeatureTensor::new(1, 1, 3, vec![0.2, 0.9, -1.0]).unwrap();
        assert_eq!(channel_max_pool(&t).data(), &[0.9]);
    }

    #[test]
    fn channel_max_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = FeatureTensor::from_fn(4, 5, 7, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let pooled = channel_max_pool(&t);
        for i in 0..4 {
            for j in 0..5 {
                let mut best = f32::NEG_INFINITY;
                for k in 0..7 {
                    if t.get(i, j, k) > best {
                        best = t.get(i, j, k);
                    }
                }
                assert_eq!(pooled.get(i, j, 0), best);
            }
        }
    }

    #[test]
    fn anomaly_map_examples() {
        let t = FeatureTensor::new(1, 3, 1, vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(anomaly_map(&t).data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<_> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn kernel_sums_to_one() {
        let k = gaussian_kernel(4.0, 12);
        assert_eq!(k.len(), 25);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k[12] > k[11] && (k[11] - k[13]).abs() < 1e-15);
    }

    #[test]
    fn constant_map_survives_postprocess() {
        let t = FeatureTensor::new(4, 4, 1, vec![0.7; 16]).unwrap();
        let out = postprocess(&t, &PostprocessConfig::square(32, 4.0)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn hot_pixel_is_flattened() {
        let mut data = vec![0.0; 64];
        data[27] = 1.5;
        let t = FeatureTensor::new(8, 8, 1, data).unwrap();
        let out = postprocess(&t, &PostprocessConfig::square(8, 1.0)).unwrap();
        assert!(out.max_value() < 1.5);
        assert!(out.data().iter().all(|&v| (0.0..=2.0).contains(&v)));
    }

    #[test]
    fn postprocess_matches_direct_convolution() {
        // naive 2-D convolution with the full (outer-product) Gaussian
        let t = FeatureTensor::new(2, 2, 1, vec![0.1, 0.9, 1.4, 0.3]).unwrap();
        let cfg = PostprocessConfig::square(8, 1.0);
        let out = postprocess(&t, &cfg).unwrap();
        let up = bilinear_resize(&t, 8, 8).unwrap();
        let r = cfg.radius() as isize;
        let g = |d: isize| (-(d * d) as f64 / 2.0).exp();
        let norm: f64 = (-r..=r)
            .flat_map(|a| (-r..=r).map(move |b| g(a) * g(b)))
            .sum();
        for y in 0..8isize {
            for x in 0..8isize {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = reflect_index(y + dy, 8);
                        let sx = reflect_index(x + dx, 8);
                        acc += g(dy) * g(dx) * up.get(sy, sx, 0) as f64;
                    }
                }
                let expect = acc / norm;
                assert!((out.get(y as usize, x as usize, 0) as f64 - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn postprocess_config_validation() {
        let t = FeatureTensor::zeros(8, 8, 1).unwrap();
        assert!(postprocess(&t, &PostprocessConfig::square(4, 1.0)).is_err());
        assert!(postprocess(&t, &PostprocessConfig::square(8, 0.0)).is_err());
    }

    #[test]
    fn image_score_examples() {
        let bank = bank_of(vec![basis(3, 0)]);
        let f = FeatureTensor::from_fn(4, 4, 3, |_, _, c| if c == 0 { 2.0 } else { 0.0 }).unwrap();
        let m = score_image(&f, &bank, &PostprocessConfig::square(16, 2.0)).unwrap();
        assert_eq!(m.image_score, 0.0);
        assert!(m.values().iter().all(|&v| v.abs() < 1e-6));

        let mut patch = vec![0.0; 16];
        patch[5] = 1.7;
        let patch = FeatureTensor::new(4, 4, 1, patch).unwrap();
        let sm = ScoreMap {
            pixels: patch.clone(),
            patch,
            image_score: 0.0,
            zero_cells: vec![],
        };
        assert_eq!(image_score(&sm), 1.7);
    }

    #[test]
    fn zero_cells_score_one() {
        let bank = bank_of(vec![basis(2, 0)]);
        let f = FeatureTensor::new(1, 2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let m = score_image(&f, &bank, &PostprocessConfig::square(2, 0.5)).unwrap();
        assert_eq!(m.zero_cells, vec![0]);
        assert_eq!(m.patch.data(), &[1.0, 0.0]);
        assert_eq!(m.image_score, 1.0);
    }

    #[test]
    fn heat_levels() {
        assert_eq!(heat_level(0.0), 0);
        assert_eq!(heat_level(1.0), 128);
        assert_eq!(heat_level(2.0), 255);
    }

    #[test]
    fn heatmap_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = FeatureTensor::new(2, 3, 1, vec![0.0, 0.5, 1.0, 1.5, 2.0, 1.0]).unwrap();
        write_heatmap_png(&t, dir.path().join("h.png")).unwrap();
        let png = std::fs::read(dir.path().join("h.png")).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        write_heatmap_pgm(&t, dir.path().join("h.pgm")).unwrap();
        let pgm = std::fs::read(dir.path().join("h.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 64, 128, 191, 255, 128]);
    }
}
