//! Synthetic data and the non-i.i.d. partitioners.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{self, StreamRng};
use crate::posterior::SideInfoKey;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One client's data. `source` maps rows back to the generating dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardDataset {
    pub shard_id: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub side: Vec<usize>,
    pub source: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub classes: usize,
    pub side_categories: usize,
}

impl ShardDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Side category of row `i` under `key`.
    pub fn category(&self, key: SideInfoKey, i: usize) -> usize {
        match key {
            SideInfoKey::Label => self.y[i],
            SideInfoKey::TransformIndex => self.side[i],
        }
    }

    pub fn num_categories(&self, key: SideInfoKey) -> usize {
        match key {
            SideInfoKey::Label => self.classes,
            SideInfoKey::TransformIndex => self.side_categories,
        }
    }

    pub fn category_counts(&self, key: SideInfoKey, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_categories(key)];
        for &i in self.split(split) {
            counts[self.category(key, i)] += 1;
        }
        counts
    }

    pub fn label_marginal(&self, split: Split) -> Vec<f64> {
        let counts = self.category_counts(SideInfoKey::Label, split);
        let n: usize = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect()
    }
}

/// `classes` Gaussian clusters around orthonormal means (random unit
/// directions when `classes > dim`); label of point `i` is `i % classes`.
pub fn make_blobs(classes: usize, dim: usize, n: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if dim < 2 {
        return Err(Error::config("dataset.dim", "must be at least 2"));
    }
    if classes < 2 {
        return Err(Error::config("dataset.classes", "must be at least 2"));
    }
    if n < classes {
        return Err(Error::config("dataset.n", format!("must be at least the class count {classes}")));
    }
    if !(spread >= 0.0) {
        return Err(Error::config("dataset.spread", "must be nonnegative"));
    }
    let mut r = rng::stream(seed, "data", &[0]);
    let raw: Vec<Vec<f64>> = (0..classes).map(|_| gaussian_vec(&mut r, dim)).collect();
    let means = if classes <= dim {
        gram_schmidt(raw)
    } else {
        raw.into_iter().map(normalize).collect()
    };
    let mut r = rng::stream(seed, "data", &[1]);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let noise = gaussian_vec(&mut r, dim);
        x.push(means[c].iter().zip(noise).map(|(m, e)| m + spread * e).collect());
        y.push(c);
    }
    Ok(Dataset { x, y, classes })
}

fn gaussian_vec(r: &mut StreamRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(r)).collect()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

fn gram_schmidt(vs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for mut v in vs {
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        out.push(normalize(v));
    }
    out
}

/// Symmetric Dirichlet draw via normalized Gamma variates. If every variate
/// underflows, all mass goes to one uniformly chosen coordinate.
pub fn sample_dirichlet(r: &mut StreamRng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(r)).collect();
    let s: f64 = draws.iter().sum();
    if s > 0.0 && s.is_finite() {
        draws.into_iter().map(|d| d / s).collect()
    } else {
        let mut out = vec![0.0; n];
        out[r.random_range(0..n)] = 1.0;
        out
    }
}

fn sample_categorical(r: &mut StreamRng, p: &[f64]) -> usize {
    let total: f64 = p.iter().sum();
    let u = r.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in p.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Orthogonal input transforms; index 0 is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformBank {
    pub matrices: Vec<Vec<Vec<f64>>>,
}

impl TransformBank {
    pub fn new(dim: usize, count: usize, seed: u64) -> Self {
        let mut matrices = Vec::with_capacity(count);
        for t in 0..count {
            if t == 0 {
                matrices.push((0..dim).map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect());
                continue;
            }
            let mut r = rng::stream(seed, "transforms", &[t as u64]);
            let rows: Vec<Vec<f64>> = (0..dim).map(|_| gaussian_vec(&mut r, dim)).collect();
            matrices.push(gram_schmidt(rows));
        }
        TransformBank { matrices }
    }

    pub fn apply(&self, t: usize, x: &[f64]) -> Vec<f64> {
        self.matrices[t]
            .iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    DirichletLabel,
    TransformSkew,
    /// Dirichlet label skew and transform skew together.
    TransformLabelSkew,
    LabelPermutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub shards: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_permutations")]
    pub n_permutations: usize,
    #[serde(default = "default_transforms")]
    pub transform_count: usize,
    #[serde(skip)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_permutations() -> usize {
    4
}

fn default_transforms() -> usize {
    8
}

impl PartitionSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.shards == 0 {
            return Err(Error::config("partition.shards", "must be at least 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("partition.alpha", "must be > 0"));
        }
        if self.transform_count == 0 {
            return Err(Error::config("partition.transform_count", "must be at least 1"));
        }
        if self.scheme == PartitionScheme::LabelPermutation {
            if self.n_permutations == 0 {
                return Err(Error::config("partition.n_permutations", "must be at least 1"));
            }
            let fact = (1..=classes).try_fold(1usize, |a, b| a.checked_mul(b)).unwrap_or(usize::MAX);
            if self.n_permutations > fact {
                return Err(Error::config(
                    "partition.n_permutations",
                    format!("{} exceeds {classes}! distinct permutations", self.n_permutations),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<ShardDataset>,
    /// Cluster id per shard (label permutation scheme only).
    pub ground_truth: Option<Vec<usize>>,
    pub permutations: Option<Vec<Vec<usize>>>,
}

pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate(ds.classes)?;
    match spec.scheme {
        PartitionScheme::DirichletLabel => Ok(Partition {
            shards: dirichlet_label_partition(ds, spec.shards, spec.alpha, spec.seed)?,
            ground_truth: None,
            permutations: None,
        }),
        PartitionScheme::TransformSkew | PartitionScheme::TransformLabelSkew => Ok(Partition {
            shards: transform_partition(
                ds,
                spec.shards,
                spec.alpha,
                spec.transform_count,
                spec.scheme == PartitionScheme::TransformLabelSkew,
                spec.seed,
            )?,
            ground_truth: None,
            permutations: None,
        }),
        PartitionScheme::LabelPermutation => {
            let (shards, gt, perms) = permutation_partition(ds, spec.shards, spec.n_permutations, spec.seed)?;
            Ok(Partition {
                shards,
                ground_truth: Some(gt),
                permutations: Some(perms),
            })
        }
    }
}

fn shard_sizes(n: usize, shards: usize) -> Vec<usize> {
    (0..shards).map(|s| n / shards + usize::from(s < n % shards)).collect()
}

fn assign_uniform(n: usize, shards: usize, r: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    let mut out = Vec::with_capacity(shards);
    let mut start = 0;
    for size in shard_sizes(n, shards) {
        out.push(idx[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Each shard draws a class mix from `Dir(alpha)`; shards take turns pulling
/// one point at a time from per-class pools. An exhausted class is dropped
/// from a shard's mix and the remaining proportions renormalized.
fn assign_dirichlet(ds: &Dataset, shards: usize, alpha: f64, r: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &y) in ds.y.iter().enumerate() {
        pools[y].push(i);
    }
    for p in pools.iter_mut() {
        p.shuffle(r);
    }
    let props: Vec<Vec<f64>> = (0..shards).map(|_| sample_dirichlet(r, alpha, ds.classes)).collect();
    let sizes = shard_sizes(ds.len(), shards);
    let mut out: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let max = sizes.iter().copied().max().unwrap_or(0);
    for _ in 0..max {
        for s in 0..shards {
            if out[s].len() >= sizes[s] {
                continue;
            }
            let mut p: Vec<f64> = props[s]
                .iter()
                .zip(&pools)
                .map(|(&w, pool)| if pool.is_empty() { 0.0 } else { w })
                .collect();
            if p.iter().sum::<f64>() <= 0.0 {
                // Every preferred class is exhausted: fall back to what is left.
                p = pools.iter().map(|pool| if pool.is_empty() { 0.0 } else { 1.0 }).collect();
            }
            let c = sample_categorical(r, &p);
            out[s].push(pools[c].pop().expect("nonempty pool"));
        }
    }
    out
}

fn make_splits(n: usize, r: &mut StreamRng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    if n < 10 {
        return (idx, vec![], vec![]);
    }
    let held = ((n as f64) * 0.1).round().max(1.0) as usize;
    let val = idx[..held].to_vec();
    let test = idx[held..2 * held].to_vec();
    let train = idx[2 * held..].to_vec();
    (train, val, test)
}

fn build_shard(
    ds: &Dataset,
    shard_id: usize,
    members: &[usize],
    side_categories: usize,
    seed: u64,
    mut map: impl FnMut(usize, &[f64], usize) -> (Vec<f64>, usize, usize),
) -> ShardDataset {
    let mut x = Vec::with_capacity(members.len());
    let mut y = Vec::with_capacity(members.len());
    let mut side = Vec::with_capacity(members.len());
    for &i in members {
        let (xi, yi, si) = map(i, &ds.x[i], ds.y[i]);
        x.push(xi);
        y.push(yi);
        side.push(si);
    }
    let mut r = rng::stream(seed, "split", &[shard_id as u64]);
    let (train, val, test) = make_splits(members.len(), &mut r);
    if members.len() < 10 {
        log::warn!("shard {shard_id} has {} examples; all assigned to train", members.len());
    }
    ShardDataset {
        shard_id,
        x,
        y,
        side,
        source: members.to_vec(),
        train,
        val,
        test,
        classes: ds.classes,
        side_categories,
    }
}

pub fn dirichlet_label_partition(ds: &Dataset, shards: usize, alpha: f64, seed: u64) -> Result<Vec<ShardDataset>> {
    if shards == 0 {
        return Err(Error::config("partition.shards", "must be at least 1"));
    }
    if !(alpha > 0.0) {
        return Err(Error::config("partition.alpha", "must be > 0"));
    }
    let mut r = rng::stream(seed, "partition", &[0]);
    let groups = assign_dirichlet(ds, shards, alpha, &mut r);
    Ok(groups
        .iter()
        .enumerate()
        .map(|(s, m)| build_shard(ds, s, m, 1, seed, |_, x, y| (x.to_vec(), y, 0)))
        .collect())
}

/// Splits data over shards (uniformly, or with Dirichlet label skew) and
/// transforms every point with an index drawn from its shard's `Dir(alpha)`
/// distribution over `count` orthogonal transforms.
pub fn transform_partition(
    ds: &Dataset,
    shards: usize,
    alpha: f64,
    count: usize,
    label_skew: bool,
    seed: u64,
) -> Result<Vec<ShardDataset>> {
    if shards == 0 {
        return Err(Error::config("partition.shards", "must be at least 1"));
    }
    if !(alpha > 0.0) {
        return Err(Error::config("partition.alpha", "must be > 0"));
    }
    let bank = TransformBank::new(ds.dim(), count, seed);
    let mut r = rng::stream(seed, "partition", &[0]);
    let groups = if label_skew {
        assign_dirichlet(ds, shards, alpha, &mut r)
    } else {
        assign_uniform(ds.len(), shards, &mut r)
    };
    let mut out = Vec::with_capacity(shards);
    for (s, members) in groups.iter().enumerate() {
        let mut tr = rng::stream(seed, "partition", &[1, s as u64]);
        let dist = sample_dirichlet(&mut tr, alpha, count);
        out.push(build_shard(ds, s, members, count, seed, |_, x, y| {
            let t = sample_categorical(&mut tr, &dist);
            (bank.apply(t, x), y, t)
        }));
    }
    Ok(out)
}

fn distinct_permutations(classes: usize, n: usize, r: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(n);
    while perms.len() < n {
        let mut p: Vec<usize> = (0..classes).collect();
        p.shuffle(r);
        if !perms.contains(&p) {
            perms.push(p);
        }
    }
    perms
}

/// Uniform split; shard `s` relabels `y -> perms[assignment[s]][y]`.
pub fn permutation_partition_with(
    ds: &Dataset,
    perms: &[Vec<usize>],
    assignment: &[usize],
    seed: u64,
) -> Result<Vec<ShardDataset>> {
    let shards = assignment.len();
    if shards == 0 {
        return Err(Error::config("partition.shards", "must be at least 1"));
    }
    for p in perms {
        let mut sorted = p.clone();
        sorted.sort_unstable();
        if sorted != (0..ds.classes).collect::<Vec<_>>() {
            return Err(Error::Contract(format!("{p:?} is not a permutation of the classes")));
        }
    }
    let mut r = rng::stream(seed, "partition", &[0]);
    let groups = assign_uniform(ds.len(), shards, &mut r);
    Ok(groups
        .iter()
        .enumerate()
        .map(|(s, m)| {
            let perm = &perms[assignment[s]];
            build_shard(ds, s, m, 1, seed, |_, x, y| (x.to_vec(), perm[y], 0))
        })
        .collect())
}

/// Returns the shards, the permutation id of each shard and the permutations.
/// Permutation ids are assigned round-robin over a shuffled shard order.
pub fn permutation_partition(
    ds: &Dataset,
    shards: usize,
    n_permutations: usize,
    seed: u64,
) -> Result<(Vec<ShardDataset>, Vec<usize>, Vec<Vec<usize>>)> {
    let mut r = rng::stream(seed, "partition", &[2]);
    let perms = distinct_permutations(ds.classes, n_permutations, &mut r);
    let mut assignment: Vec<usize> = (0..shards).map(|s| s % n_permutations).collect();
    assignment.shuffle(&mut r);
    let out = permutation_partition_with(ds, &perms, &assignment, seed)?;
    Ok((out, assignment, perms))
}

pub fn csv_header(dim: usize) -> String {
    let mut h = String::from("shard,split,side,y");
    for j in 0..dim {
        h.push_str(&format!(",x{j}"));
    }
    h
}

/// Writes every row of every shard as `shard,split,side,y,x0,...`.
pub fn write_shards_csv<W: Write>(shards: &[ShardDataset], mut w: W) -> Result<()> {
    let dim = shards.iter().find_map(|s| s.x.first()).map_or(0, Vec::len);
    writeln!(w, "{}", csv_header(dim))?;
    for s in shards {
        for split in [Split::Train, Split::Val, Split::Test] {
            for &i in s.split(split) {
                write!(w, "{},{},{},{}", s.shard_id, split.as_str(), s.side[i], s.y[i])?;
                for v in &s.x[i] {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
    }
    Ok(())
}

/// Reads shards written by [`write_shards_csv`]. Rows are regrouped per shard
/// in file order; `source` indexes rows within the file.
pub fn read_shards_csv<R: Read>(r: R, classes: usize, side_categories: usize) -> Result<Vec<ShardDataset>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let dim = headers.len().saturating_sub(4);
    if headers.iter().take(4).collect::<Vec<_>>() != ["shard", "split", "side", "y"] {
        return Err(Error::Format {
            what: "dataset csv",
            detail: format!("unexpected header {headers:?}"),
        });
    }
    let bad = |detail: String| Error::Format {
        what: "dataset csv",
        detail,
    };
    let mut shards: Vec<ShardDataset> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let shard: usize = rec[0].parse().map_err(|e| bad(format!("row {row}: {e}")))?;
        let split = match &rec[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(bad(format!("row {row}: unknown split {other}"))),
        };
        let side: usize = rec[2].parse().map_err(|e| bad(format!("row {row}: {e}")))?;
        let y: usize = rec[3].parse().map_err(|e| bad(format!("row {row}: {e}")))?;
        if y >= classes {
            return Err(bad(format!("row {row}: label {y} >= {classes}")));
        }
        let x = (0..dim)
            .map(|j| rec[4 + j].parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row {row}: {e}")))?;
        while shards.len() <= shard {
            let id = shards.len();
            shards.push(ShardDataset {
                shard_id: id,
                x: vec![],
                y: vec![],
                side: vec![],
                source: vec![],
                train: vec![],
                val: vec![],
                test: vec![],
                classes,
                side_categories,
            });
        }
        let s = &mut shards[shard];
        let i = s.len();
        s.x.push(x);
        s.y.push(y);
        s.side.push(side);
        s.source.push(row);
        match split {
            Split::Train => s.train.push(i),
            Split::Val => s.val.push(i),
            Split::Test => s.test.push(i),
        }
    }
    Ok(shards)
}
