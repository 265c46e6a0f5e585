//! Sparse examples, libsvm text I/O and random sharding across workers.
//!
//! ```text
//! +1 3:0.5 7:1.0
//! -1
//! ```
//!
//! Feature ids are 1-based in files and 0-based in memory.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Sparse vector with strictly increasing 0-based indices and no stored zeros.
/// The squared norm is cached for kernel evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVec {
    indices: Vec<u32>,
    values: Vec<f64>,
    sq_norm: f64,
}

impl SparseVec {
    /// Builds from `(index, value)` pairs. Zeros are dropped; indices must be
    /// strictly increasing.
    pub fn new(pairs: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, v) in pairs {
            if let Some(&last) = indices.last() {
                if i <= last {
                    return Err(Error::Format(format!(
                        "feature indices not strictly increasing ({} after {})",
                        i + 1,
                        last + 1
                    )));
                }
            }
            if !v.is_finite() {
                return Err(Error::Format(format!("non-finite value at feature {}", i + 1)));
            }
            if v != 0.0 {
                indices.push(i);
                values.push(v);
            }
        }
        Ok(Self::from_parts(indices, values))
    }

    fn from_parts(indices: Vec<u32>, values: Vec<f64>) -> Self {
        let sq_norm = values.iter().map(|v| v * v).sum();
        SparseVec { indices, values, sq_norm }
    }

    /// Drops zeros of a dense vector.
    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .unzip();
        Self::from_parts(indices, values)
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn sq_norm(&self) -> f64 {
        self.sq_norm
    }

    /// One past the largest stored index (0 for the empty vector).
    pub fn dim(&self) -> usize {
        self.indices.last().map_or(0, |&i| i as usize + 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// Merge-based sparse dot product. `x.dot(x)` is bitwise equal to
    /// `x.sq_norm()`.
    pub fn dot(&self, other: &SparseVec) -> f64 {
        let (mut a, mut b) = (0, 0);
        let mut acc = 0.0;
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[a] * other.values[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    /// Dot product against a dense vector; indices past its end count as zero.
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.iter()
            .filter(|(i, _)| (*i as usize) < dense.len())
            .map(|(i, v)| v * dense[i as usize])
            .sum()
    }

    /// `dense += alpha * self`
    pub fn add_to_dense(&self, alpha: f64, dense: &mut [f64]) {
        for (i, v) in self.iter() {
            dense[i as usize] += alpha * v;
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut d = vec![0.0; dim];
        self.add_to_dense(1.0, &mut d);
        d
    }

    /// libsvm feature list (`idx:val ...`, 1-based), no label.
    pub fn to_libsvm_features(&self) -> String {
        let mut s = String::new();
        for (k, (i, v)) in self.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{}:{}", i + 1, v);
        }
        s
    }

    /// Bit-exact binary encoding: `nnz u64 | indices u32.. | values f64..`, LE.
    pub fn encode_into(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&(self.nnz() as u64).to_le_bytes());
        for i in &self.indices {
            buf.extend_from_slice(&i.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn decode_from(buf: &mut &[u8]) -> Result<Self> {
        let nnz = take_u64(buf)? as usize;
        let mut indices = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            indices.push(u32::from_le_bytes(take::<4>(buf)?));
        }
        let mut values = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            values.push(f64::from_le_bytes(take::<8>(buf)?));
        }
        SparseVec::new(indices.into_iter().zip(values))
    }
}

pub(crate) fn take<const N: usize>(buf: &mut &[u8]) -> Result<[u8; N]> {
    if buf.len() < N {
        return Err(Error::Format("truncated buffer".into()));
    }
    let (head, rest) = buf.split_at(N);
    *buf = rest;
    Ok(head.try_into().expect("split at N"))
}

pub(crate) fn take_u64(buf: &mut &[u8]) -> Result<u64> {
    take::<8>(buf).map(u64::from_le_bytes)
}

/// One labeled point. `label` is always `+1.0` or `-1.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseExample {
    pub features: SparseVec,
    pub label: f64,
}

impl SparseExample {
    pub fn new(features: SparseVec, label: f64) -> Result<Self> {
        if label != 1.0 && label != -1.0 {
            return Err(Error::Config(format!("label must be +1 or -1, got {label}")));
        }
        Ok(SparseExample { features, label })
    }

    pub fn to_libsvm_line(&self) -> String {
        let label = if self.label > 0.0 { "+1" } else { "-1" };
        if self.features.nnz() == 0 {
            label.to_string()
        } else {
            format!("{label} {}", self.features.to_libsvm_features())
        }
    }
}

/// A parsed file: examples in file order plus the feature dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<SparseExample>,
    /// Largest 1-based feature index seen.
    pub dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn to_libsvm(&self) -> String {
        let mut s = String::new();
        for ex in &self.examples {
            s.push_str(&ex.to_libsvm_line());
            s.push('\n');
        }
        s
    }
}

/// Parses sparse features `idx:val ...` (1-based). Shared with the basis and
/// model file readers.
pub(crate) fn parse_features<'a>(
    tokens: impl Iterator<Item = &'a str>,
    line: usize,
) -> Result<SparseVec> {
    let mut pairs = Vec::new();
    for tok in tokens {
        let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `index:value`, found `{tok}`"),
        })?;
        let idx: u32 = idx.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad feature index `{idx}`"),
        })?;
        if idx == 0 {
            return Err(Error::Parse { line, msg: "feature indices are 1-based".into() });
        }
        let val: f64 = val.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad feature value `{val}`"),
        })?;
        pairs.push((idx - 1, val));
    }
    SparseVec::new(pairs).map_err(|e| Error::Parse { line, msg: e.to_string() })
}

/// Parses libsvm text. Labels `+1`/`1`/`-1` are kept; `0` is mapped to `-1`
/// with a warning. Blank lines and `#` comments are skipped.
pub fn parse_dataset(reader: impl BufRead) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut dim = 0;
    let mut remapped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let raw_label = tokens.next().expect("non-empty line has a token");
        let label = match raw_label.parse::<f64>() {
            Ok(v) if v == 1.0 => 1.0,
            Ok(v) if v == -1.0 => -1.0,
            Ok(v) if v == 0.0 => {
                remapped += 1;
                -1.0
            }
            Ok(_) => {
                return Err(Error::UnsupportedLabel { line: lineno, label: raw_label.into() })
            }
            Err(_) => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("bad label `{raw_label}`"),
                })
            }
        };
        let features = parse_features(tokens, lineno)?;
        dim = dim.max(features.dim());
        examples.push(SparseExample { features, label });
    }
    if remapped > 0 {
        log::warn!("remapped {remapped} labels from 0 to -1");
    }
    Ok(Dataset { examples, dim })
}

/// Opens a plain or gzip-compressed libsvm file (detected by magic bytes).
pub fn open_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut file = BufReader::new(File::open(path)?);
    let is_gzip = file.fill_buf()?.starts_with(&[0x1f, 0x8b]);
    if is_gzip {
        parse_dataset(BufReader::new(GzDecoder::new(file)))
    } else {
        parse_dataset(file)
    }
}

/// Reads a whole stream into a dataset, sniffing gzip like [`open_dataset`].
pub fn read_dataset(mut reader: impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        parse_dataset(BufReader::new(GzDecoder::new(&bytes[..])))
    } else {
        parse_dataset(io::Cursor::new(bytes))
    }
}

/// The examples held by one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub worker_id: usize,
    pub examples: Vec<SparseExample>,
    /// Row index of each example in the original dataset.
    pub global_ids: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Sizes of `p` contiguous chunks of `n` items; the first `n % p` get one
/// extra.
pub fn chunk_sizes(n: usize, p: usize) -> Vec<usize> {
    (0..p).map(|j| n / p + usize::from(j < n % p)).collect()
}

/// The seeded permutation used by [`shard_random`]; independent of `p`.
pub fn shard_permutation(n: usize, seed: u64) -> Vec<usize> {
    rng::permutation(n, &mut rng::stream(seed, Purpose::Shard, 0))
}

/// The global ids that worker `worker` of `p` receives.
pub fn shard_ids(n: usize, p: usize, worker: usize, seed: u64) -> Result<Vec<usize>> {
    check_shard_config(n, p)?;
    let perm = shard_permutation(n, seed);
    let sizes = chunk_sizes(n, p);
    let start: usize = sizes[..worker].iter().sum();
    Ok(perm[start..start + sizes[worker]].to_vec())
}

fn check_shard_config(n: usize, p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    if p > n {
        return Err(Error::Config(format!("{p} workers but only {n} examples")));
    }
    Ok(())
}

/// Randomly distributes examples over `p` workers: one seeded permutation,
/// cut into contiguous chunks whose sizes differ by at most one.
pub fn shard_random(examples: &[SparseExample], p: usize, seed: u64) -> Result<Vec<Shard>> {
    check_shard_config(examples.len(), p)?;
    let perm = shard_permutation(examples.len(), seed);
    let mut shards = Vec::with_capacity(p);
    let mut offset = 0;
    for (worker_id, size) in chunk_sizes(examples.len(), p).into_iter().enumerate() {
        let global_ids = perm[offset..offset + size].to_vec();
        offset += size;
        shards.push(Shard {
            worker_id,
            examples: global_ids.iter().map(|&g| examples[g].clone()).collect(),
            global_ids,
        });
    }
    Ok(shards)
}
