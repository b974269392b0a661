//! Dataset ingestion and seeded mini-batching.
//!
//! Supported containers:
//!
//! * `.amat` text: one example per line, 784 whitespace-separated `0`/`1`
//!   tokens, optionally followed by a label column that is dropped.
//! * IDX images: big-endian magic `0x00000803`, `u32` N, rows, cols, then
//!   `N·rows·cols` bytes scaled to `[0, 1]`.
//! * Patch container: 8-byte magic `VPFPATCH`, little-endian `u32` N and D,
//!   then `N·D` little-endian `f64` values in `[0, 1]`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, SALT_BATCHES};
use crate::tensor_ad::Tensor;

pub const IMAGE_DIM: usize = 784;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const PATCH_MAGIC: &[u8; 8] = b"VPFPATCH";
const PATCH_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Binary,
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    examples: Tensor,
    kind: DataKind,
    split: Split,
}

impl Dataset {
    /// Wraps an `N × D` matrix, checking the value range for `kind`.
    pub fn new(examples: Tensor, kind: DataKind) -> Result<Self> {
        examples.dims2()?;
        match kind {
            DataKind::Binary => {
                if let Some(bad) = examples.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Data(format!("binary dataset holds value {bad}")));
                }
            }
            DataKind::Continuous => {
                if let Some(bad) = examples.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Data(format!("value {bad} outside [0, 1]")));
                }
            }
        }
        Ok(Dataset {
            examples,
            kind,
            split: Split::Train,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.examples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.examples.shape()[1]
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn examples(&self) -> &Tensor {
        &self.examples
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        self.examples.select_rows(indices)
    }

    /// First `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Ok(Dataset {
            examples: self.batch(&idx)?,
            kind: self.kind,
            split: self.split,
        })
    }
}

pub fn load_amat(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_amat(&text).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_amat(text: &str) -> Result<Dataset> {
    let mut values = Vec::new();
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != IMAGE_DIM && tokens.len() != IMAGE_DIM + 1 {
            return Err(Error::Format(format!(
                "line {}: expected {IMAGE_DIM} or {} tokens, found {}",
                lineno + 1,
                IMAGE_DIM + 1,
                tokens.len()
            )));
        }
        for tok in &tokens[..IMAGE_DIM] {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Data(format!("line {}: token '{tok}' is not numeric", lineno + 1)))?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Data(format!("line {}: pixel '{tok}' is not 0 or 1", lineno + 1)));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("no examples".into()));
    }
    Dataset::new(Tensor::new(&[rows, IMAGE_DIM], values)?, DataKind::Binary)
}

/// Writes a binary dataset as `.amat` text: single spaces, LF line endings.
pub fn write_amat(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(amat_string(ds)?.as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn amat_string(ds: &Dataset) -> Result<String> {
    if ds.kind() != DataKind::Binary {
        return Err(Error::Data("only binary datasets can be exported as amat".into()));
    }
    let d = ds.dim();
    let mut s = String::with_capacity(ds.len() * (2 * d));
    for row in ds.examples().data().chunks(d) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(' ');
            }
            s.push(if *v == 1.0 { '1' } else { '0' });
        }
        s.push('\n');
    }
    Ok(s)
}

/// Loads IDX images scaled by 1/255; with a threshold, pixels become
/// `1` when `v ≥ threshold` and `0` otherwise.
pub fn load_idx(path: impl AsRef<Path>, binarize_threshold: Option<f64>) -> Result<Dataset> {
    parse_idx(&fs::read(path)?, binarize_threshold)
}

pub fn parse_idx(bytes: &[u8], binarize_threshold: Option<f64>) -> Result<Dataset> {
    let header = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Format("truncated IDX header".into()))
    };
    let magic = header(0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!("bad IDX magic {magic:#010x}")));
    }
    let (n, rows, cols) = (header(1)? as usize, header(2)? as usize, header(3)? as usize);
    let d = rows * cols;
    let payload = &bytes[16..];
    if n == 0 || d == 0 {
        return Err(Error::Data("IDX file holds no pixels".into()));
    }
    if payload.len() < n * d {
        return Err(Error::Format(format!(
            "truncated IDX payload: need {} bytes, found {}",
            n * d,
            payload.len()
        )));
    }
    let scaled = payload[..n * d].iter().map(|&b| f64::from(b) / 255.0);
    let (values, kind): (Vec<f64>, _) = match binarize_threshold {
        Some(t) => (scaled.map(|v| if v >= t { 1.0 } else { 0.0 }).collect(), DataKind::Binary),
        None => (scaled.collect(), DataKind::Continuous),
    };
    Dataset::new(Tensor::new(&[n, d], values)?, kind)
}

/// IDX image file bytes for `n` images of `rows × cols` pixels.
pub fn idx_bytes(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != n * rows * cols {
        return Err(Error::invalid("idx_bytes", "pixel count does not match dimensions"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn load_patches(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_patches(&fs::read(path)?)
}

pub fn parse_patches(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 16 || &bytes[..8] != PATCH_MAGIC {
        return Err(Error::Format("missing VPFPATCH magic".into()));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[16..];
    if payload.len() != n * d * 8 {
        return Err(Error::Format(format!(
            "patch payload holds {} bytes, header promises {}",
            payload.len(),
            n * d * 8
        )));
    }
    if n == 0 || d == 0 {
        return Err(Error::Data("patch file holds no values".into()));
    }
    let mut values = Vec::with_capacity(n * d);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !(-PATCH_TOL..=1.0 + PATCH_TOL).contains(&v) {
            return Err(Error::Data(format!("patch value {v} at index {i} outside [0, 1]")));
        }
        values.push(v.clamp(0.0, 1.0));
    }
    Dataset::new(Tensor::new(&[n, d], values)?, DataKind::Continuous)
}

pub fn patches_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * ds.examples().len());
    out.extend_from_slice(PATCH_MAGIC);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    for v in ds.examples().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_patches(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, patches_bytes(ds))?;
    Ok(())
}

/// Picks a loader from the file extension: `.amat`, `.idx`/`-ubyte`
/// (binarized at 0.5) or anything else as a patch container.
pub fn load_any(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path.to_string_lossy();
    if name.ends_with(".amat") {
        load_amat(path)
    } else if name.ends_with(".idx") || name.ends_with("-ubyte") {
        load_idx(path, Some(0.5))
    } else {
        load_patches(path)
    }
}

/// One epoch's visiting order, split into mini-batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    order: Vec<usize>,
    batch_size: usize,
}

impl BatchPlan {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Index slices of at most `batch_size`; the short last batch is kept.
    pub fn iter(&self) -> std::slice::Chunks<'_, usize> {
        self.order.chunks(self.batch_size)
    }
}

/// Seeded permutation of `0..n` for `(seed, epoch)`.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchPlan> {
    if n == 0 {
        return Err(Error::Data("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, SALT_BATCHES, epoch));
    Ok(BatchPlan { order, batch_size })
}

/// Smooth-blob gray patches: each image sums one to three isotropic
/// Gaussian bumps with random centre, width and amplitude, clipped to `[0, 1]`.
pub fn synthetic_blobs(n: usize, side: usize, rng: &mut impl Rng) -> Result<Dataset> {
    let mut values = Vec::with_capacity(n * side * side);
    let s = side as f64;
    for _ in 0..n {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(1..=3))
            .map(|_| {
                (
                    rng.gen_range(0.2 * s..0.8 * s),
                    rng.gen_range(0.2 * s..0.8 * s),
                    rng.gen_range(0.07 * s..0.18 * s),
                    rng.gen_range(0.4..1.0),
                )
            })
            .collect();
        for r in 0..side {
            for c in 0..side {
                let v: f64 = blobs
                    .iter()
                    .map(|&(cy, cx, w, a)| {
                        let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                        a * (-0.5 * d2 / (w * w)).exp()
                    })
                    .sum();
                values.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(Tensor::new(&[n, side * side], values)?, DataKind::Continuous)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeros_amat(lines: usize) -> String {
        let line = vec!["0"; IMAGE_DIM].join(" ");
        (0..lines).map(|_| format!("{line}\n")).collect()
    }

    #[test]
    fn amat_zeros_and_label_column() {
        let ds = parse_amat(&zeros_amat(3)).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.examples().data().iter().all(|&v| v == 0.0));

        let mut line = vec!["1"; IMAGE_DIM];
        line.push("7");
        let ds = parse_amat(&format!("{}\n", line.join(" "))).unwrap();
        assert_eq!(ds.dim(), IMAGE_DIM);
        assert!(ds.examples().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn amat_rejections_carry_line_numbers() {
        let mut text = zeros_amat(2);
        let mut bad = vec!["0"; IMAGE_DIM];
        bad[10] = "0.5";
        text.push_str(&bad.join(" "));
        match parse_amat(&text) {
            Err(Error::Data(m)) => assert!(m.contains("line 3"), "{m}"),
            other => panic!("{other:?}"),
        }
        match parse_amat("0 1 0\n") {
            Err(Error::Format(m)) => assert!(m.contains("line 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn amat_export_is_canonical() {
        let text = zeros_amat(2).replace("0 0 0 0", "0 1 0 1");
        let ds = parse_amat(&text).unwrap();
        assert_eq!(amat_string(&ds).unwrap(), text);

        let cont = Dataset::new(Tensor::full(&[1, 4], 0.5), DataKind::Continuous).unwrap();
        assert!(amat_string(&cont).is_err());
    }

    #[test]
    fn idx_round_trip_and_threshold() {
        let pixels: Vec<u8> = (0..2 * 784).map(|i| (i % 256) as u8).collect();
        let bytes = idx_bytes(2, 28, 28, &pixels).unwrap();
        let ds = parse_idx(&bytes, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.kind(), DataKind::Continuous);
        for (v, p) in ds.examples().data().iter().zip(&pixels) {
            assert!((v - f64::from(*p) / 255.0).abs() < 1e-12);
        }

        // ≥ rule at the boundary: 0.5 exactly maps to 1
        let ds = parse_idx(&idx_bytes(1, 1, 2, &[255, 0]).unwrap(), Some(0.5)).unwrap();
        assert_eq!(ds.examples().data(), &[1.0, 0.0]);
        let ds = parse_idx(&idx_bytes(1, 1, 2, &[128, 127]).unwrap(), Some(128.0 / 255.0)).unwrap();
        assert_eq!(ds.examples().data(), &[1.0, 0.0]);
    }

    #[test]
    fn idx_errors() {
        let mut bytes = idx_bytes(2, 28, 28, &[0; 2 * 784]).unwrap();
        bytes[3] = 0x01;
        assert!(matches!(parse_idx(&bytes, None), Err(Error::Format(_))));
        let bytes = idx_bytes(2, 28, 28, &[0; 2 * 784]).unwrap();
        assert!(matches!(parse_idx(&bytes[..bytes.len() - 1], None), Err(Error::Format(_))));
    }

    #[test]
    fn patches_cases() {
        let ds = Dataset::new(Tensor::full(&[2, 784], 0.5), DataKind::Continuous).unwrap();
        let bytes = patches_bytes(&ds);
        assert_eq!(bytes.len(), 16 + 2 * 784 * 8);
        assert_eq!(parse_patches(&bytes).unwrap(), ds);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_patches(&bad), Err(Error::Format(_))));

        let mut out_of_range = bytes.clone();
        out_of_range[16..24].copy_from_slice(&1.5f64.to_le_bytes());
        assert!(matches!(parse_patches(&out_of_range), Err(Error::Data(_))));

        assert!(matches!(parse_patches(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
    }

    #[test]
    fn batch_plan_cases() {
        let plan = batches(5, 2, 1, 1).unwrap();
        let sizes: Vec<usize> = plan.iter().map(<[usize]>::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(plan.num_batches(), 3);
        assert_eq!(batches(5, 2, 1, 1).unwrap(), plan);
        assert_ne!(batches(100, 10, 1, 2).unwrap(), batches(100, 10, 1, 1).unwrap());

        let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert!(batches(0, 2, 1, 1).is_err());
        assert!(batches(3, 0, 1, 1).is_err());
    }

    #[test]
    fn synthetic_blobs_are_in_range_and_smooth() {
        let ds = synthetic_blobs(20, 28, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ds.dim(), 784);
        assert_eq!(ds.kind(), DataKind::Continuous);
        let max = ds.examples().data().iter().copied().fold(0.0, f64::max);
        assert!(max > 0.3);
    }
}
