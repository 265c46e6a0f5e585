//! Basis selection: per-worker random sampling, distributed K-means (Lloyd)
//! and stage-wise growth of a trained model.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::allreduce::{local_mesh, Communicator, Transport, TreeTopology};
use crate::data::{chunk_sizes, parse_features, Shard, SparseVec};
use crate::error::{Error, Result};
use crate::kernel::{gaussian, w_row_ranges, BasisSet, BasisSource, KernelBlock};
use crate::objective::{header_fields, ModelState};
use crate::rng::{self, Purpose};

/// How the driver picks basis points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisPolicy {
    Random,
    KMeans,
    /// K-means while `m` and the feature count are small, random otherwise.
    Auto { max_m: usize, max_features: usize },
}

impl BasisPolicy {
    pub const AUTO_MAX_M: usize = 5000;
    pub const AUTO_MAX_FEATURES: usize = 1000;

    pub fn auto() -> Self {
        BasisPolicy::Auto { max_m: Self::AUTO_MAX_M, max_features: Self::AUTO_MAX_FEATURES }
    }

    pub fn resolve(self, m: usize, features: usize) -> BasisSource {
        match self {
            BasisPolicy::Random => BasisSource::Random,
            BasisPolicy::KMeans => BasisSource::KMeans,
            BasisPolicy::Auto { max_m, max_features } => {
                if m <= max_m && features < max_features {
                    BasisSource::KMeans
                } else {
                    BasisSource::Random
                }
            }
        }
    }
}

/// Positions (into `shard.examples`) worker `worker` contributes to the
/// basis at `stage`, skipping `exclude`.
pub fn pick_local(
    shard: &Shard,
    quota: usize,
    seed: u64,
    stage: u64,
    exclude: &HashSet<usize>,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..shard.len()).filter(|i| !exclude.contains(i)).collect();
    if quota > pool.len() {
        return Err(Error::Config(format!(
            "worker {} must pick {quota} basis points but has {} eligible examples",
            shard.worker_id,
            pool.len()
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Basis, (stage << 32) | shard.worker_id as u64);
    Ok(rng::sample_without_replacement(pool.len(), quota, &mut rng).into_iter().map(|k| pool[k]).collect())
}

/// Quotas per worker: `floor(m/p)`, plus one for the first `m mod p`.
pub fn quotas(m: usize, p: usize) -> Vec<usize> {
    chunk_sizes(m, p)
}

/// Each worker samples its quota without replacement from its own shard;
/// the union (in worker order) is the basis.
pub fn select_random(shards: &[Shard], m: usize, seed: u64, sigma: f64) -> Result<BasisSet> {
    let n: usize = shards.iter().map(Shard::len).sum();
    if m == 0 || m > n {
        return Err(Error::Config(format!("cannot pick {m} basis points from {n} examples")));
    }
    let mut points = Vec::with_capacity(m);
    for (shard, quota) in shards.iter().zip(quotas(m, shards.len())) {
        for i in pick_local(shard, quota, seed, 0, &HashSet::new())? {
            points.push(shard.examples[i].features.clone());
        }
    }
    Ok(BasisSet { points, source: BasisSource::Random, sigma })
}

fn encode_points(points: &[SparseVec]) -> Vec<u8> {
    let mut buf = (points.len() as u64).to_le_bytes().to_vec();
    for p in points {
        p.encode_into(&mut buf);
    }
    buf
}

fn decode_points(mut buf: &[u8]) -> Result<Vec<SparseVec>> {
    let n = crate::data::take_u64(&mut buf)? as usize;
    (0..n).map(|_| SparseVec::decode_from(&mut buf)).collect()
}

/// Collective step 2: every worker contributes its picks, the root
/// concatenates them in worker order, and one broadcast delivers the new
/// points to all. `picked` accumulates this worker's used positions across
/// stages.
pub fn exchange_random_points<T: Transport>(
    comm: &mut Communicator<T>,
    shard: &Shard,
    count: usize,
    seed: u64,
    stage: u64,
    picked: &mut HashSet<usize>,
) -> Result<Vec<SparseVec>> {
    let quota = quotas(count, comm.size())[comm.rank()];
    let mine = pick_local(shard, quota, seed, stage, picked)?;
    picked.extend(&mine);
    let points: Vec<SparseVec> = mine.iter().map(|&i| shard.examples[i].features.clone()).collect();
    let gathered = comm.gather(encode_points(&points))?;
    let payload = match gathered {
        Some(parts) => {
            let mut all = Vec::with_capacity(count);
            for part in parts {
                all.extend(decode_points(&part)?);
            }
            Some(encode_points(&all))
        }
        None => None,
    };
    let root = comm.topology().root();
    decode_points(&comm.broadcast(payload, root)?)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KMeansReport {
    /// Total within-cluster squared distance at each assignment step.
    pub inertia: Vec<f64>,
    /// Empty clusters re-seeded over the whole run.
    pub reseeded: usize,
}

fn nearest(x: &SparseVec, centers: &[Vec<f64>], center_norms: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, (center, cn)) in centers.iter().zip(center_norms).enumerate() {
        let d2 = (x.sq_norm() + cn - 2.0 * x.dot_dense(center)).max(0.0);
        if d2 < best.1 {
            best = (c, d2);
        }
    }
    best
}

/// Lloyd iterations over the workers' shards starting from `init`. Every
/// worker returns the same centers.
///
/// Per iteration one allreduce carries `[sums (m*dim) | counts (m) |
/// inertia]`. Empty clusters are re-seeded with the points farthest from
/// their assigned centers (ties to the lowest global id), which costs one
/// extra allreduce in the iterations where it happens.
pub fn kmeans_worker<T: Transport>(
    comm: &mut Communicator<T>,
    shard: &Shard,
    init: &BasisSet,
    iters: usize,
    dim: usize,
) -> Result<(BasisSet, KMeansReport)> {
    if iters == 0 {
        return Err(Error::Config("k-means needs at least one iteration".into()));
    }
    let m = init.m();
    let mut centers: Vec<Vec<f64>> = init.points.iter().map(|p| p.to_dense(dim)).collect();
    let mut report = KMeansReport::default();

    for _ in 0..iters {
        let norms: Vec<f64> = centers.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        let mut buf = vec![0.0; m * dim + m + 1];
        let mut dists = Vec::with_capacity(shard.len());
        for ex in &shard.examples {
            let (c, d2) = nearest(&ex.features, &centers, &norms);
            ex.features.add_to_dense(1.0, &mut buf[c * dim..(c + 1) * dim]);
            buf[m * dim + c] += 1.0;
            buf[m * dim + m] += d2;
            dists.push(d2);
        }
        let total = comm.allreduce_sum(&buf)?;
        report.inertia.push(total[m * dim + m]);

        let mut empty = Vec::new();
        for (c, center) in centers.iter_mut().enumerate() {
            let count = total[m * dim + c];
            if count > 0.0 {
                for (v, s) in center.iter_mut().zip(&total[c * dim..(c + 1) * dim]) {
                    *v = s / count;
                }
            } else {
                empty.push(c);
            }
        }
        if !empty.is_empty() {
            let seeds = farthest_points(comm, shard, &dists, empty.len(), dim)?;
            for (c, point) in empty.iter().zip(seeds) {
                centers[*c] = point;
            }
            report.reseeded += empty.len();
        }
    }
    let points = centers.iter().map(|c| SparseVec::from_dense(c)).collect();
    Ok((BasisSet { points, source: BasisSource::KMeans, sigma: init.sigma }, report))
}

/// The `k` globally farthest points (by distance to their center, ties to
/// the lowest global id), as dense vectors.
fn farthest_points<T: Transport>(
    comm: &mut Communicator<T>,
    shard: &Shard,
    dists: &[f64],
    k: usize,
    dim: usize,
) -> Result<Vec<Vec<f64>>> {
    let entry = 2 + dim;
    let slot = k * entry;
    let mut order: Vec<usize> = (0..shard.len()).collect();
    order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(shard.global_ids[a].cmp(&shard.global_ids[b])));
    let mut buf = vec![0.0; comm.size() * slot];
    let base = comm.rank() * slot;
    for e in 0..k {
        let at = base + e * entry;
        match order.get(e) {
            Some(&i) => {
                buf[at] = dists[i];
                buf[at + 1] = shard.global_ids[i] as f64;
                shard.examples[i].features.add_to_dense(1.0, &mut buf[at + 2..at + entry]);
            }
            None => buf[at] = -1.0,
        }
    }
    let all = comm.allreduce_sum(&buf)?;
    let mut candidates: Vec<&[f64]> = all.chunks_exact(entry).filter(|c| c[0] >= 0.0).collect();
    candidates.sort_by(|a, b| b[0].total_cmp(&a[0]).then(a[1].total_cmp(&b[1])));
    Ok(candidates.into_iter().take(k).map(|c| c[2..].to_vec()).collect())
}

/// Runs [`kmeans_worker`] over `shards` on in-process workers.
pub fn kmeans_from(shards: &[Shard], init: &BasisSet, iters: usize, dim: usize) -> Result<(BasisSet, KMeansReport)> {
    let topo = TreeTopology::binary(shards.len())?;
    let comms = local_mesh(&topo, Duration::from_secs(600));
    let results: Vec<Result<(BasisSet, KMeansReport)>> = thread::scope(|s| {
        let handles: Vec<_> = comms
            .into_iter()
            .zip(shards)
            .map(|(mut comm, shard)| s.spawn(move || kmeans_worker(&mut comm, shard, init, iters, dim)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("k-means worker panicked")).collect()
    });
    results.into_iter().next().expect("at least one worker")
}

/// K-means basis: random initial centers, then `iters` Lloyd iterations.
pub fn select_kmeans(
    shards: &[Shard],
    m: usize,
    iters: usize,
    seed: u64,
    sigma: f64,
    dim: usize,
) -> Result<(BasisSet, KMeansReport)> {
    let init = select_random(shards, m, seed, sigma)?;
    kmeans_from(shards, &init, iters, dim)
}

fn point_key(p: &SparseVec) -> Vec<u8> {
    let mut b = Vec::new();
    p.encode_into(&mut b);
    b
}

/// Drops new points that duplicate the basis or each other (exact match).
pub fn dedupe_new_points(existing: &[SparseVec], new: Vec<SparseVec>) -> Vec<SparseVec> {
    let mut seen: HashSet<Vec<u8>> = existing.iter().map(point_key).collect();
    let before = new.len();
    let kept: Vec<SparseVec> = new.into_iter().filter(|p| seen.insert(point_key(p))).collect();
    if kept.len() < before {
        log::warn!("skipped {} duplicate basis points", before - kept.len());
    }
    kept
}

/// Grows one worker's block by `new_points` (already de-duplicated): the
/// new C columns, the new columns of its existing W rows, and the worker's
/// share of the new W rows. Existing entries are not recomputed.
pub fn extend_block(
    block: &mut KernelBlock,
    shard: &Shard,
    old_points: &[SparseVec],
    new_points: &[SparseVec],
    sigma: f64,
    worker: usize,
    p: usize,
) {
    let m = old_points.len();
    let q = new_points.len();
    if q == 0 {
        return;
    }
    block.c_block.append_cols(q, |i, j| gaussian(&shard.examples[i].features, &new_points[j], sigma));
    block.c_evals += (shard.len() * q) as u64;

    let ids = block.w_row_ids.clone();
    block.w_rows.append_cols(q, |r, j| gaussian(&old_points[ids[r]], &new_points[j], sigma));
    block.w_evals += (ids.len() * q) as u64;

    let all: Vec<&SparseVec> = old_points.iter().chain(new_points).collect();
    let range = w_row_ranges(q, p)[worker].clone();
    for j in range {
        let row: Vec<f64> = all.iter().map(|x| gaussian(&new_points[j], x, sigma)).collect();
        block.w_rows.push_row(&row);
        block.w_row_ids.push(m + j);
        block.w_evals += (m + q) as u64;
    }
}

/// Adds basis points to a model, padding beta with zeros, and extends every
/// worker's block in place. Duplicates are skipped with a warning.
pub fn extend_model(
    model: &ModelState,
    new_points: Vec<SparseVec>,
    shards: &[Shard],
    blocks: &mut [KernelBlock],
) -> Result<ModelState> {
    if shards.len() != blocks.len() {
        return Err(Error::Config(format!("{} shards but {} blocks", shards.len(), blocks.len())));
    }
    let accepted = dedupe_new_points(&model.basis.points, new_points);
    let p = blocks.len();
    for (j, (block, shard)) in blocks.iter_mut().zip(shards).enumerate() {
        extend_block(block, shard, &model.basis.points, &accepted, model.params.sigma, j, p);
    }
    let mut next = model.clone();
    next.beta.resize(model.m() + accepted.len(), 0.0);
    next.basis.points.extend(accepted);
    Ok(next)
}

/// `#basis m=<m> sigma=<sigma> source=<random|kmeans> seed=<seed>` followed
/// by one `idx:val ...` line per point.
pub fn basis_to_text(basis: &BasisSet, seed: u64) -> String {
    let mut s = format!(
        "#basis m={} sigma={:?} source={} seed={}\n",
        basis.m(),
        basis.sigma,
        basis.source.as_str(),
        seed
    );
    for p in &basis.points {
        let _ = writeln!(s, "{}", p.to_libsvm_features());
    }
    s
}

pub fn basis_from_text(text: &str) -> Result<(BasisSet, u64)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty basis file".into()))?;
    let fields = header_fields(header, "#basis")?;
    let get = |key: &str| {
        fields
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Format(format!("basis header lacks `{key}`")))
    };
    let bad = |key: &str| Error::Format(format!("bad `{key}` in basis header"));
    let m: usize = get("m")?.parse().map_err(|_| bad("m"))?;
    let sigma: f64 = get("sigma")?.parse().map_err(|_| bad("sigma"))?;
    let seed: u64 = get("seed")?.parse().map_err(|_| bad("seed"))?;
    let source = BasisSource::parse(get("source")?)?;
    let points = (0..m)
        .map(|k| {
            let line = lines.next().ok_or_else(|| Error::Format(format!("basis file has fewer than {m} points")))?;
            parse_features(line.split_whitespace(), k + 2)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((BasisSet { points, source, sigma }, seed))
}

pub fn write_basis_file(path: impl AsRef<Path>, basis: &BasisSet, seed: u64) -> Result<()> {
    fs::write(path, basis_to_text(basis, seed))?;
    Ok(())
}

pub fn read_basis_file(path: impl AsRef<Path>) -> Result<(BasisSet, u64)> {
    basis_from_text(&fs::read_to_string(path)?)
}
