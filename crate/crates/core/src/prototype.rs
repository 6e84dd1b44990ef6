//! The prototype bank: unit-norm cluster means that act as the kernels of
//! the 1x1 convolution used for scoring, plus the `.ptb` file format.
//!
//! File layout (little-endian): magic `PROTOBK1`, `u32` version (1), `u32` K,
//! `u32` C, `u32` meta length M, M bytes of UTF-8 `key=value` lines, then
//! `K*C` `f32` kernel values, row-major.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::finch::Partition;
use crate::kernels::{exact_dot, similar_pairs, RowMatrix};

pub const BANK_MAGIC: &[u8; 8] = b"PROTOBK1";
pub const BANK_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Rows whose cosine similarity reaches this value are merged.
pub const DUPLICATE_COSINE: f64 = 1.0 - 1e-9;
const UNIT_TOLERANCE: f64 = 1e-6;

/// Provenance recorded alongside the kernels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BankMeta {
    pub category: String,
    pub feature_levels: String,
    pub max_clusters: usize,
    pub partition_level: usize,
    /// Free-form extra keys, written in sorted order.
    pub extra: BTreeMap<String, String>,
}

impl BankMeta {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "category={}", self.category);
        let _ = writeln!(out, "feature_levels={}", self.feature_levels);
        let _ = writeln!(out, "max_clusters={}", self.max_clusters);
        let _ = writeln!(out, "partition_level={}", self.partition_level);
        for (k, v) in &self.extra {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = BankMeta::default();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("meta line without '=': {line:?}")))?;
            let number = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Invalid(format!("meta {key} is not an integer: {v:?}")))
            };
            match key {
                "category" => meta.category = value.to_string(),
                "feature_levels" => meta.feature_levels = value.to_string(),
                "max_clusters" => meta.max_clusters = number(value)?,
                "partition_level" => meta.partition_level = number(value)?,
                _ => {
                    meta.extra.insert(key.to_string(), value.to_string());
                }
            }
        }
        Ok(meta)
    }

    fn validate(&self) -> Result<()> {
        let fields = [&self.category, &self.feature_levels];
        let bad = fields.iter().any(|v| v.contains('\n'))
            || self
                .extra
                .iter()
                .any(|(k, v)| k.is_empty() || k.contains(['=', '\n']) || v.contains('\n'));
        if bad {
            return Err(Error::Invalid(
                "meta keys and values must be single-line".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    kernels: RowMatrix,
    meta: BankMeta,
}

impl PrototypeBank {
    /// Wraps an existing kernel matrix; every row must be unit-norm.
    pub fn new(kernels: RowMatrix, meta: BankMeta) -> Result<Self> {
        if kernels.rows() == 0 {
            return Err(Error::Invalid(
                "prototype bank needs at least one kernel".into(),
            ));
        }
        for (k, row) in kernels.iter_rows().enumerate() {
            let norm = exact_dot(row, row).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Invalid(format!("kernel {k} has norm {norm}")));
            }
        }
        meta.validate()?;
        Ok(Self { kernels, meta })
    }

    /// Number of prototypes.
    pub fn len(&self) -> usize {
        self.kernels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.kernels.dim()
    }

    pub fn kernels(&self) -> &RowMatrix {
        &self.kernels
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BankMeta {
        &mut self.meta
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.meta.to_text();
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + self.kernels.data().len() * 4);
        out.extend_from_slice(BANK_MAGIC);
        for v in [
            BANK_VERSION,
            self.len() as u32,
            self.dim() as u32,
            meta.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(meta.as_bytes());
        for v in self.kernels.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..8] != BANK_MAGIC {
            return Err(Error::format(0, "bad magic, expected PROTOBK1"));
        }
        let word =
            |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let version = word(8) as u32;
        if version != BANK_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (k, c, m) = (word(12), word(16), word(20));
        if k == 0 {
            return Err(Error::format(12, "prototype count must be positive"));
        }
        if c == 0 {
            return Err(Error::format(16, "dimension must be positive"));
        }
        let payload = k
            .checked_mul(c)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(12, "dimension product overflows"))?;
        let expected = HEADER_LEN + m + payload;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::format(
                expected,
                "dimension mismatch: trailing bytes after the declared kernels",
            ));
        }
        let meta_text = std::str::from_utf8(&bytes[HEADER_LEN..HEADER_LEN + m])
            .map_err(|e| Error::format(HEADER_LEN + e.valid_up_to(), "meta is not UTF-8"))?;
        let meta = BankMeta::parse(meta_text)?;
        let data = bytes[HEADER_LEN + m..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(RowMatrix::new(k, c, data)?, meta)
    }
}

pub fn save_bank(bank: &PrototypeBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<PrototypeBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PrototypeBank::from_bytes(&bytes)
}

/// Builds the bank from the renormalized cluster means of `features` under
/// `part`'s labels, then drops rows that duplicate an earlier row.
///
/// The number of dropped rows is recorded under the `deduplicated` meta key.
pub fn build_bank(
    features: &RowMatrix,
    part: &Partition,
    mut meta: BankMeta,
) -> Result<PrototypeBank> {
    if part.labels().len() != features.rows() {
        return Err(Error::Shape(format!(
            "partition has {} labels but there are {} features",
            part.labels().len(),
            features.rows()
        )));
    }
    let means = Partition::from_labels(features, part.labels().to_vec())?
        .means()
        .clone();
    let mut keep = vec![true; means.rows()];
    for (i, j) in similar_pairs(&means, DUPLICATE_COSINE) {
        if keep[j] {
            keep[i] = false;
        }
    }
    let removed = keep.iter().filter(|&&k| !k).count();
    let kernels = if removed == 0 {
        means
    } else {
        let kept = (0..means.rows()).filter(|&k| keep[k]).map(|k| means.row(k));
        RowMatrix::from_rows(means.dim(), kept)?
    };
    meta.extra
        .insert("deduplicated".to_string(), removed.to_string());
    PrototypeBank::new(kernels, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f32]]) -> RowMatrix {
        RowMatrix::from_rows(rows[0].len(), rows.iter().copied()).unwrap()
    }

    fn meta() -> BankMeta {
        BankMeta {
            category: "toy".into(),
            feature_levels: "1,2,3".into(),
            max_clusters: 10_000,
            partition_level: 1,
            extra: BTreeMap::from([("sigma".into(), "4".into())]),
        }
    }

    #[test]
    fn singleton_cluster_is_its_member() {
        let f = matrix(&[&[0.6, 0.8]]);
        let part = Partition::from_labels(&f, vec![0]).unwrap();
        let bank = build_bank(&f, &part, meta()).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.kernels().row(0), &[0.6, 0.8]);
    }

    #[test]
    fn orthonormal_pair_mean() {
        let f = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let part = Partition::from_labels(&f, vec![0, 0]).unwrap();
        let bank = build_bank(&f, &part, meta()).unwrap();
        let s = std::f32::consts::FRAC_1_SQRT_2;
        for v in bank.kernels().row(0) {
            assert!((v - s).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_means_are_deduplicated() {
        let f = matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let part = Partition::from_labels(&f, vec![0, 0, 1, 1]).unwrap();
        let bank = build_bank(&f, &part, meta()).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.meta().extra["deduplicated"], "1");
    }

    #[test]
    fn label_length_mismatch() {
        let f = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let g = matrix(&[&[1.0, 0.0]]);
        let part = Partition::from_labels(&g, vec![0]).unwrap();
        assert!(matches!(
            build_bank(&f, &part, meta()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rejects_non_unit_kernels() {
        assert!(PrototypeBank::new(matrix(&[&[2.0, 0.0]]), meta()).is_err());
    }

    #[test]
    fn meta_round_trip() {
        let m = meta();
        assert_eq!(BankMeta::parse(&m.to_text()).unwrap(), m);
        assert!(BankMeta::parse("nokey").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ptb");
        let bank = PrototypeBank::new(matrix(&[&[0.6, 0.8], &[0.0, 1.0]]), meta()).unwrap();
        save_bank(&bank, &path).unwrap();
        let back = load_bank(&path).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.to_bytes(), bank.to_bytes());
    }

    #[test]
    fn rejects_truncated_and_versions() {
        let bank = PrototypeBank::new(matrix(&[&[0.6, 0.8]]), meta()).unwrap();
        let bytes = bank.to_bytes();
        assert!(matches!(
            PrototypeBank::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            PrototypeBank::from_bytes(&bytes[..12]),
            Err(Error::Truncated { .. })
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            PrototypeBank::from_bytes(&v2),
            Err(Error::UnsupportedVersion(2))
        ));
        let mut bad = bytes.clone();
        bad[3] = b'x';
        assert!(matches!(
            PrototypeBank::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut long = bytes;
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            PrototypeBank::from_bytes(&long),
            Err(Error::Format { .. })
        ));
    }
}
