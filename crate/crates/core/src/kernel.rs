//! Gaussian kernel evaluation and the per-worker kernel blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{take, take_u64, Shard, SparseVec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Regularization constant and Gaussian kernel width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda: f64,
    pub sigma: f64,
}

impl HyperParams {
    pub fn new(lambda: f64, sigma: f64) -> Result<Self> {
        let p = HyperParams { lambda, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Only the Gaussian kernel exists; the id is carried in files so other
/// kernels can be added without a format change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KernelKind {
    #[default]
    Gaussian,
}

/// `exp(-||x - xbar||^2 / (2 sigma^2))`.
///
/// The squared distance is `||x||^2 + ||xbar||^2 - 2 x.xbar` with cached
/// norms, clamped at zero.
pub fn gaussian(x: &SparseVec, xbar: &SparseVec, sigma: f64) -> f64 {
    let dist2 = (x.sq_norm() + xbar.sq_norm() - 2.0 * x.dot(xbar)).max(0.0);
    (-dist2 / (2.0 * sigma * sigma)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisSource {
    Random,
    KMeans,
}

impl BasisSource {
    pub fn as_str(self) -> &'static str {
        match self {
            BasisSource::Random => "random",
            BasisSource::KMeans => "kmeans",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BasisSource::Random),
            "kmeans" => Ok(BasisSource::KMeans),
            other => Err(Error::Format(format!("unknown basis source `{other}`"))),
        }
    }
}

/// The basis points defining the columns of C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub points: Vec<SparseVec>,
    pub source: BasisSource,
    pub sigma: f64,
}

impl BasisSet {
    pub fn m(&self) -> usize {
        self.points.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.push(match self.source {
            BasisSource::Random => 0,
            BasisSource::KMeans => 1,
        });
        buf.extend_from_slice(&self.sigma.to_le_bytes());
        buf.extend_from_slice(&(self.points.len() as u64).to_le_bytes());
        for p in &self.points {
            p.encode_into(&mut buf);
        }
        buf
    }

    pub fn decode(mut buf: &[u8]) -> Result<Self> {
        let source = match take::<1>(&mut buf)?[0] {
            0 => BasisSource::Random,
            1 => BasisSource::KMeans,
            b => return Err(Error::Format(format!("bad basis source byte {b}"))),
        };
        let sigma = f64::from_le_bytes(take::<8>(&mut buf)?);
        let m = take_u64(&mut buf)? as usize;
        let points = (0..m)
            .map(|_| SparseVec::decode_from(&mut buf))
            .collect::<Result<Vec<_>>>()?;
        if !buf.is_empty() {
            return Err(Error::Format("trailing bytes after basis set".into()));
        }
        Ok(BasisSet { points, source, sigma })
    }

    /// SHA-256 of the binary encoding.
    pub fn hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.encode());
        let mut out = [0u8; 32];
        out.copy_from_slice(digest.as_slice());
        out
    }
}

/// Contiguous W row ranges of size `ceil(m/p)`; trailing workers may get an
/// empty range when `m` is small.
pub fn w_row_ranges(m: usize, p: usize) -> Vec<Range<usize>> {
    let chunk = m.div_ceil(p.max(1));
    (0..p)
        .map(|j| {
            let start = (j * chunk).min(m);
            start..((j + 1) * chunk).min(m)
        })
        .collect()
}

/// A worker's rows of C, its slice of W rows and the matching labels.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlock {
    /// `n_j x m`, rows aligned with `labels`.
    pub c_block: Matrix,
    /// Global W row index of each row in `w_rows`.
    pub w_row_ids: Vec<usize>,
    /// `|w_row_ids| x m`.
    pub w_rows: Matrix,
    pub labels: Vec<f64>,
    /// Kernel evaluations spent on `c_block` / `w_rows` so far.
    pub c_evals: u64,
    pub w_evals: u64,
}

impl KernelBlock {
    pub fn m(&self) -> usize {
        self.c_block.cols()
    }

    pub fn n(&self) -> usize {
        self.c_block.rows()
    }
}

/// Builds rows of C for `shard` and rows `w_row_range` of W.
pub fn build_kernel_block(
    shard: &Shard,
    basis: &BasisSet,
    params: &HyperParams,
    w_row_range: Range<usize>,
) -> Result<KernelBlock> {
    params.validate()?;
    let m = basis.m();
    if basis.sigma != params.sigma {
        return Err(Error::Config(format!(
            "basis was built for sigma={} but params say sigma={}",
            basis.sigma, params.sigma
        )));
    }
    if w_row_range.start > w_row_range.end || w_row_range.end > m {
        return Err(Error::Config(format!(
            "W row range {w_row_range:?} out of bounds for m={m}"
        )));
    }
    let sigma = params.sigma;
    let c_block = Matrix::from_fn(shard.len(), m, |i, k| {
        gaussian(&shard.examples[i].features, &basis.points[k], sigma)
    });
    let w_row_ids: Vec<usize> = w_row_range.collect();
    let w_rows = Matrix::from_fn(w_row_ids.len(), m, |r, l| {
        gaussian(&basis.points[w_row_ids[r]], &basis.points[l], sigma)
    });
    Ok(KernelBlock {
        c_evals: (c_block.rows() * m) as u64,
        w_evals: (w_rows.rows() * m) as u64,
        c_block,
        w_row_ids,
        w_rows,
        labels: shard.examples.iter().map(|e| e.label).collect(),
    })
}

const CACHE_MAGIC: &[u8; 4] = b"KBC1";

/// Writes a kernel block cache:
/// `"KBC1" | n_j u64 | m u64 | sigma f64 | basis sha256 | C row-major f64 |
///  w_count u64 | w row ids u64.. | W rows row-major f64 | labels f64..`,
/// all little-endian.
pub fn write_block_cache(
    path: impl AsRef<Path>,
    block: &KernelBlock,
    basis: &BasisSet,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&(block.n() as u64).to_le_bytes())?;
    out.write_all(&(block.m() as u64).to_le_bytes())?;
    out.write_all(&basis.sigma.to_le_bytes())?;
    out.write_all(&basis.hash())?;
    for v in block.c_block.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(block.w_row_ids.len() as u64).to_le_bytes())?;
    for &id in &block.w_row_ids {
        out.write_all(&(id as u64).to_le_bytes())?;
    }
    for v in block.w_rows.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in &block.labels {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a cache written by [`write_block_cache`], refusing it unless it was
/// built against `basis`.
pub fn read_block_cache(path: impl AsRef<Path>, basis: &BasisSet) -> Result<KernelBlock> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut buf = &bytes[..];
    if &take::<4>(&mut buf)? != CACHE_MAGIC {
        return Err(Error::Format("not a kernel block cache".into()));
    }
    let n = take_u64(&mut buf)? as usize;
    let m = take_u64(&mut buf)? as usize;
    let sigma = f64::from_le_bytes(take::<8>(&mut buf)?);
    let hash = take::<32>(&mut buf)?;
    if m != basis.m() || sigma != basis.sigma || hash != basis.hash() {
        return Err(Error::Format("kernel block cache was built for a different basis".into()));
    }
    let mut floats = |count: usize| -> Result<Vec<f64>> {
        (0..count).map(|_| take::<8>(&mut buf).map(f64::from_le_bytes)).collect()
    };
    let c = floats(n * m)?;
    let w_count = take_u64(&mut buf)? as usize;
    let w_row_ids = (0..w_count)
        .map(|_| take_u64(&mut buf).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut floats = |count: usize| -> Result<Vec<f64>> {
        (0..count).map(|_| take::<8>(&mut buf).map(f64::from_le_bytes)).collect()
    };
    let w = floats(w_count * m)?;
    let labels = floats(n)?;
    if !buf.is_empty() {
        return Err(Error::Format("trailing bytes in kernel block cache".into()));
    }
    Ok(KernelBlock {
        c_block: Matrix::from_vec(n, m, c),
        w_row_ids,
        w_rows: Matrix::from_vec(w_count, m, w),
        labels,
        c_evals: 0,
        w_evals: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SparseExample;

    fn sv(pairs: &[(u32, f64)]) -> SparseVec {
        SparseVec::new(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn gaussian_at_zero_distance_is_one() {
        let x = sv(&[(0, 0.3), (4, -1.7), (9, 2.5)]);
        assert_eq!(gaussian(&x, &x, 0.7), 1.0);
    }

    #[test]
    fn gaussian_unit_offset() {
        // Independent scalar evaluation of exp(-1 / 2).
        let expected = (-0.5f64).exp();
        let v = gaussian(&sv(&[(0, 1.0)]), &sv(&[]), 1.0);
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn gaussian_is_symmetric() {
        let a = sv(&[(0, 0.3), (2, 1.1)]);
        let b = sv(&[(1, -0.4), (2, 0.2), (7, 3.0)]);
        assert_eq!(gaussian(&a, &b, 1.3).to_bits(), gaussian(&b, &a, 1.3).to_bits());
    }

    fn shard_of(points: Vec<SparseVec>) -> Shard {
        let n = points.len();
        Shard {
            worker_id: 0,
            examples: points
                .into_iter()
                .enumerate()
                .map(|(i, f)| SparseExample { features: f, label: if i % 2 == 0 { 1.0 } else { -1.0 } })
                .collect(),
            global_ids: (0..n).collect(),
        }
    }

    #[test]
    fn single_point_identity_block() {
        let p = sv(&[(1, 2.0)]);
        let basis = BasisSet { points: vec![p.clone()], source: BasisSource::Random, sigma: 1.0 };
        let block = build_kernel_block(&shard_of(vec![p]), &basis, &HyperParams::new(1.0, 1.0).unwrap(), 0..1).unwrap();
        assert_eq!(block.c_block.as_slice(), &[1.0]);
        assert_eq!(block.w_rows.as_slice(), &[1.0]);
    }

    #[test]
    fn full_w_is_symmetric_with_unit_diagonal() {
        let pts = vec![sv(&[(0, 1.0)]), sv(&[(1, 1.0)]), sv(&[(0, 0.5), (1, 0.5)])];
        let basis = BasisSet { points: pts.clone(), source: BasisSource::Random, sigma: 0.8 };
        let block = build_kernel_block(&shard_of(pts), &basis, &HyperParams::new(1.0, 0.8).unwrap(), 0..3).unwrap();
        let w = &block.w_rows;
        for i in 0..3 {
            assert_eq!(w[(i, i)], 1.0);
            for j in 0..3 {
                assert_eq!(w[(i, j)].to_bits(), w[(j, i)].to_bits());
            }
        }
        // Every basis point is in the shard, so W rows are a subset of C rows.
        assert_eq!(block.w_rows, block.c_block);
    }

    #[test]
    fn block_matches_brute_force_double_loop() {
        let pts: Vec<SparseVec> = (0..5)
            .map(|i| sv(&[(0, (i as f64 * 0.37).sin()), (3, (i as f64 * 1.3).cos())]))
            .collect();
        let basis = BasisSet {
            points: vec![sv(&[(0, 0.2)]), sv(&[(1, -0.5), (3, 0.9)])],
            source: BasisSource::KMeans,
            sigma: 0.6,
        };
        let shard = shard_of(pts.clone());
        let block = build_kernel_block(&shard, &basis, &HyperParams::new(2.0, 0.6).unwrap(), 1..2).unwrap();
        for i in 0..5 {
            for k in 0..2 {
                assert_eq!(block.c_block[(i, k)], gaussian(&pts[i], &basis.points[k], 0.6));
                assert!(block.c_block[(i, k)] > 0.0 && block.c_block[(i, k)] <= 1.0);
            }
        }
        assert_eq!(block.w_row_ids, vec![1]);
        assert_eq!(block.w_rows[(0, 1)], 1.0);
        assert_eq!(block.c_evals, 10);
        assert_eq!(block.w_evals, 2);
    }

    #[test]
    fn bad_row_range_and_sigma_mismatch() {
        let basis = BasisSet { points: vec![sv(&[(0, 1.0)])], source: BasisSource::Random, sigma: 1.0 };
        let shard = shard_of(vec![sv(&[(0, 1.0)])]);
        let params = HyperParams::new(1.0, 1.0).unwrap();
        assert!(matches!(build_kernel_block(&shard, &basis, &params, 0..2), Err(Error::Config(_))));
        let other = HyperParams::new(1.0, 2.0).unwrap();
        assert!(matches!(build_kernel_block(&shard, &basis, &other, 0..1), Err(Error::Config(_))));
    }

    #[test]
    fn row_ranges_cover_m() {
        assert_eq!(w_row_ranges(10, 4), vec![0..3, 3..6, 6..9, 9..10]);
        assert_eq!(w_row_ranges(2, 4), vec![0..1, 1..2, 2..2, 2..2]);
        assert_eq!(w_row_ranges(5, 1), vec![0..5]);
    }

    #[test]
    fn cache_round_trip_and_mismatch() {
        let pts = vec![sv(&[(0, 1.0)]), sv(&[(1, 0.5)])];
        let basis = BasisSet { points: pts.clone(), source: BasisSource::Random, sigma: 1.5 };
        let block = build_kernel_block(&shard_of(pts), &basis, &HyperParams::new(1.0, 1.5).unwrap(), 1..2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("block.kbc");
        write_block_cache(&path, &block, &basis).unwrap();
        let back = read_block_cache(&path, &basis).unwrap();
        assert_eq!(back.c_block, block.c_block);
        assert_eq!(back.w_rows, block.w_rows);
        assert_eq!(back.w_row_ids, block.w_row_ids);
        assert_eq!(back.labels, block.labels);

        let mut other = basis.clone();
        other.sigma = 2.0;
        assert!(read_block_cache(&path, &other).is_err());
    }

    fn random_examples(n: usize, seed: u64) -> Vec<SparseExample> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| SparseExample {
                features: SparseVec::from_dense(&[rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0)]),
                label: if i % 3 == 0 { 1.0 } else { -1.0 },
            })
            .collect()
    }

    #[test]
    fn stacked_blocks_reproduce_serial_matrices() {
        let examples = random_examples(23, 5);
        let basis = BasisSet {
            points: examples[..7].iter().map(|e| e.features.clone()).collect(),
            source: BasisSource::Random,
            sigma: 0.8,
        };
        let params = HyperParams::new(1.0, 0.8).unwrap();
        let p = 4;
        let shards = crate::data::shard_random(&examples, p, 3).unwrap();
        let blocks: Vec<KernelBlock> = shards
            .iter()
            .zip(w_row_ranges(7, p))
            .map(|(s, r)| build_kernel_block(s, &basis, &params, r).unwrap())
            .collect();

        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (s, b) in shards.iter().zip(&blocks) {
            for (i, &g) in s.global_ids.iter().enumerate() {
                rows.push((g, b.c_block.row(i).to_vec()));
            }
        }
        rows.sort_by_key(|r| r.0);
        for (g, row) in rows {
            for (k, v) in row.iter().enumerate() {
                assert_eq!(v.to_bits(), gaussian(&examples[g].features, &basis.points[k], 0.8).to_bits());
            }
        }

        let mut w = crate::linalg::Matrix::zeros(7, 7);
        for b in &blocks {
            for (r, &id) in b.w_row_ids.iter().enumerate() {
                w.row_mut(id).copy_from_slice(b.w_rows.row(r));
            }
        }
        assert_eq!(w, w.transpose());
        let eig = crate::reference::sym_eigen(&w).unwrap();
        let scale = w.frobenius_norm();
        assert!(eig.values.iter().all(|&l| l >= -1e-10 * scale));
    }

    #[test]
    fn w_rows_equal_c_rows_when_basis_is_in_shard() {
        let examples = random_examples(6, 8);
        let shard = shard_of(examples.iter().map(|e| e.features.clone()).collect());
        let basis = BasisSet {
            points: examples[1..4].iter().map(|e| e.features.clone()).collect(),
            source: BasisSource::Random,
            sigma: 0.5,
        };
        let b = build_kernel_block(&shard, &basis, &HyperParams::new(1.0, 0.5).unwrap(), 0..3).unwrap();
        for r in 0..3 {
            assert_eq!(b.w_rows.row(r), b.c_block.row(r + 1));
        }
    }
}
