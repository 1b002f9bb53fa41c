//! Class-conditioned memory banks: k-means initialization, the memory
//! regularizer, unit-norm maintenance and usage telemetry.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, norm, Tensor};

pub const DEFAULT_MEMORY_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankSide {
    Pos,
    Neg,
}

impl BankSide {
    pub fn name(self) -> &'static str {
        match self {
            BankSide::Pos => "pos",
            BankSide::Neg => "neg",
        }
    }
}

impl fmt::Display for BankSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `C⁺` and `C⁻`, each `n × D_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub pos: Tensor,
    pub neg: Tensor,
}

impl MemoryBank {
    pub fn n(&self) -> usize {
        self.pos.rows()
    }

    pub fn dim(&self) -> usize {
        self.pos.cols()
    }

    pub fn side(&self, side: BankSide) -> &Tensor {
        match side {
            BankSide::Pos => &self.pos,
            BankSide::Neg => &self.neg,
        }
    }

    /// `max |‖row‖ − 1|` over both banks.
    pub fn max_norm_deviation(&self) -> f64 {
        [&self.pos, &self.neg]
            .iter()
            .flat_map(|t| (0..t.rows()).map(move |r| (norm(t.row_slice(r)) - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row_slice(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (m, d) = points.dims2();
    let mut centroids = Vec::with_capacity(k * d);
    centroids.extend_from_slice(points.row_slice(rng.random_range(0..m)));
    let mut dist: Vec<f64> = (0..m).map(|i| sq_dist(points.row_slice(i), &centroids[..d])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, w) in dist.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        let row = points.row_slice(pick).to_vec();
        for (i, slot) in dist.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(points.row_slice(i), &row));
        }
        centroids.extend_from_slice(&row);
    }
    Tensor::matrix(k, d, centroids).expect("k rows of width d")
}

/// Lloyd iterations from k-means++ seeds. Empty clusters are re-seeded with
/// the points farthest from their current centroid.
pub fn lloyd_kmeans(points: &Tensor, k: usize, opts: &KMeansOptions, rng: &mut ChaCha8Rng) -> Result<KMeansResult> {
    let (m, d) = points.dims2();
    if k == 0 || m < k {
        return Err(Error::Data(format!("k-means needs at least k = {k} points, got {m}")));
    }
    if !points.is_finite() {
        return Err(Error::Numeric("k-means input contains non-finite values".into()));
    }
    let mut centroids = plus_plus_seeds(points, k, rng);
    let mut assignments = vec![0; m];
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        for (i, a) in assignments.iter_mut().enumerate() {
            *a = nearest(points.row_slice(i), &centroids).0;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row_slice(i)) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in next.row_slice_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut spread: Vec<(f64, usize)> = (0..m)
                .map(|i| (sq_dist(points.row_slice(i), next.row_slice(assignments[i])), i))
                .collect();
            spread.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (c, (_, i)) in empty.into_iter().zip(spread) {
                next.row_slice_mut(c).copy_from_slice(points.row_slice(i));
                assignments[i] = c;
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row_slice(c), centroids.row_slice(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < opts.tol {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        iterations,
    })
}

fn normalize_rows(t: &mut Tensor) {
    for r in 0..t.rows() {
        let row = t.row_slice_mut(r);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Random unit rows used to replace collapsed memory components.
pub fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        loop {
            let row: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = norm(&row);
            if n > 1e-3 {
                data.extend(row.iter().map(|v| v / n));
                break;
            }
        }
    }
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Runs k-means separately on patches from positive and negative slides.
///
/// `labels[i]` is the class of the slide patch `i` came from.
pub fn kmeans_init(
    patches: &Tensor,
    labels: &[u8],
    n: usize,
    opts: &KMeansOptions,
    seed: u64,
) -> Result<MemoryBank> {
    let (m, d) = patches.dims2();
    if labels.len() != m {
        return Err(Error::shape("kmeans_init", format!("{m} patches but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::Config(format!("memory size must be at least 2, got {n}")));
    }
    if m < 2 * n {
        return Err(Error::Data(format!(
            "k-means sample has {m} patches but needs at least {}; increase kmeans_sample",
            2 * n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank_for = |class: u8, stream: u64| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..m)
            .filter(|&i| labels[i] == class)
            .map(|i| patches.row_slice(i).to_vec())
            .collect();
        if rows.len() < n {
            return Err(Error::Data(format!(
                "k-means sample has {} patches from class {class} but needs at least {n}; increase kmeans_sample",
                rows.len()
            )));
        }
        let pts = Tensor::from_rows(&rows)?;
        rng.set_stream(stream);
        let mut c = lloyd_kmeans(&pts, n, opts, &mut rng)?.centroids;
        normalize_rows(&mut c);
        let mut fallback = ChaCha8Rng::seed_from_u64(seed ^ 0x6b6d);
        fallback.set_stream(stream);
        renormalize(&mut c, &random_unit_rows(&mut fallback, n, d));
        Ok(c)
    };
    Ok(MemoryBank {
        pos: bank_for(1, 1)?,
        neg: bank_for(0, 2)?,
    })
}

/// Divides every row by its norm. Zero or non-finite rows are replaced with
/// the matching row of `fallback`; returns how many were replaced.
pub fn renormalize(bank: &mut Tensor, fallback: &Tensor) -> usize {
    let mut reseeded = 0;
    for r in 0..bank.rows() {
        let row = bank.row_slice_mut(r);
        let n = norm(row);
        if n > 0.0 && n.is_finite() {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            log::warn!("memory row {r} collapsed (norm {n}); re-seeding from a random unit vector");
            row.copy_from_slice(fallback.row_slice(r));
            reseeded += 1;
        }
    }
    reseeded
}

/// Pooled nearest component for each row of `f_p`: indices `0..n` are `C⁺`,
/// `n..2n` are `C⁻`. Ties go to the lower pooled index.
pub fn pooled_nearest(f_p: &Tensor, bank: &MemoryBank) -> Vec<usize> {
    let n = bank.n();
    (0..f_p.rows())
        .map(|i| {
            let row = f_p.row_slice(i);
            let (p, dp) = nearest(row, &bank.pos);
            let (q, dq) = nearest(row, &bank.neg);
            if dp <= dq {
                p
            } else {
                n + q
            }
        })
        .collect()
}

/// Terms of the memory regularizer.
#[derive(Clone, Copy, Debug)]
pub struct MemLoss {
    pub commitment: Var,
    pub orthogonality: Var,
    pub total: Var,
}

fn orthogonality(tape: &mut Tape, c: Var) -> Result<Var> {
    let n = tape.value(c).rows();
    let unit = tape.l2_normalize(c, 1)?;
    let gram = tape.matmul_t(unit, unit)?;
    let sq = tape.mul(gram, gram)?;
    let mut mask = vec![1.0; n * n];
    (0..n).for_each(|i| mask[i * n + i] = 0.0);
    let mask = tape.constant(Tensor::matrix(n, n, mask)?);
    let off = tape.mul(sq, mask)?;
    tape.sum(off)
}

/// Commitment of patches to their pooled nearest component (targets held
/// constant) plus squared cosines between distinct rows of each bank.
///
/// Commitment targets are read from `anchor` when given, otherwise from the
/// current bank values.
pub fn mem_loss(tape: &mut Tape, f_p: Var, pos: Var, neg: Var, anchor: Option<&MemoryBank>) -> Result<MemLoss> {
    let bank = match anchor {
        Some(b) => b.clone(),
        None => MemoryBank {
            pos: tape.value(pos).clone(),
            neg: tape.value(neg).clone(),
        },
    };
    let fp = tape.value(f_p).clone();
    let (rows, d) = fp.dims2();
    if rows == 0 {
        return Err(Error::Data("memory loss over an empty patch set".into()));
    }
    if d != bank.dim() || bank.neg.dims2() != bank.pos.dims2() {
        return Err(Error::shape(
            "mem_loss",
            format!("patches {:?}, banks {:?} / {:?}", fp.shape(), bank.pos.shape(), bank.neg.shape()),
        ));
    }
    let n = bank.n();
    let mut target = Vec::with_capacity(rows * d);
    for k in pooled_nearest(&fp, &bank) {
        let src = if k < n { bank.pos.row_slice(k) } else { bank.neg.row_slice(k - n) };
        target.extend_from_slice(src);
    }
    let target = tape.constant(Tensor::matrix(rows, d, target)?);
    let diff = tape.sub(f_p, target)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq)?;
    let commitment = tape.scale(s, 1.0 / rows as f64)?;
    let op = orthogonality(tape, pos)?;
    let on = orthogonality(tape, neg)?;
    let orthogonality = tape.add(op, on)?;
    let total = tape.add(commitment, orthogonality)?;
    Ok(MemLoss {
        commitment,
        orthogonality,
        total,
    })
}

/// Per-bank hard-assignment counts for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsageCounter {
    pub pos: Vec<u64>,
    pub neg: Vec<u64>,
}

fn argmax_similarity(row: &[f64], bank: &Tensor) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..bank.rows() {
        let s = dot(row, bank.row_slice(c));
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

impl UsageCounter {
    pub fn new(n: usize) -> Self {
        Self {
            pos: vec![0; n],
            neg: vec![0; n],
        }
    }

    pub fn counts(&self, side: BankSide) -> &[u64] {
        match side {
            BankSide::Pos => &self.pos,
            BankSide::Neg => &self.neg,
        }
    }

    /// Patch vectors recorded so far.
    pub fn assigned(&self) -> u64 {
        self.pos.iter().sum()
    }

    /// Counts the most similar component in each bank for every row of `f_p`.
    pub fn record(&mut self, f_p: &Tensor, bank: &MemoryBank) {
        for i in 0..f_p.rows() {
            let row = f_p.row_slice(i);
            self.pos[argmax_similarity(row, &bank.pos)] += 1;
            self.neg[argmax_similarity(row, &bank.neg)] += 1;
        }
    }

    pub fn reset(&mut self) {
        self.pos.iter_mut().chain(self.neg.iter_mut()).for_each(|c| *c = 0);
    }

    pub fn epoch_dynamics(&self, epoch: usize) -> [DynamicsRecord; 2] {
        [BankSide::Pos, BankSide::Neg].map(|bank| {
            let counts = self.counts(bank);
            DynamicsRecord {
                epoch,
                bank,
                active_ratio: active_ratio(counts),
                perplexity: perplexity(counts),
            }
        })
    }
}

/// Fraction of components with a nonzero count; `None` for an empty epoch.
pub fn active_ratio(counts: &[u64]) -> Option<f64> {
    let total: u64 = counts.iter().sum();
    (total > 0).then(|| counts.iter().filter(|&&c| c > 0).count() as f64 / counts.len() as f64)
}

/// `exp` of the usage entropy, clamped to `[1, n]`; `None` for an empty epoch.
pub fn perplexity(counts: &[u64]) -> Option<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let t = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum();
    Some(h.exp().clamp(1.0, counts.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub epoch: usize,
    pub bank: BankSide,
    pub active_ratio: Option<f64>,
    pub perplexity: Option<f64>,
}

pub const DYNAMICS_HEADER: &str = "epoch,bank,active_ratio,perplexity";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| format!("{x}"))
}

pub fn write_dynamics_csv<W: Write>(out: &mut W, records: &[DynamicsRecord]) -> std::io::Result<()> {
    writeln!(out, "{DYNAMICS_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.epoch, r.bank, opt(r.active_ratio), opt(r.perplexity))?;
    }
    Ok(())
}

/// Parses a dynamics CSV, rejecting any header other than [`DYNAMICS_HEADER`].
pub fn read_dynamics_csv(text: &str) -> Result<Vec<DynamicsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(DYNAMICS_HEADER) => {}
        other => return Err(Error::Data(format!("unexpected dynamics header {other:?}"))),
    }
    let bad = |n: usize, line: &str| Error::Data(format!("dynamics line {}: cannot parse {line:?}", n + 2));
    let value = |f: &str| -> Option<Option<f64>> {
        if f == "null" {
            Some(None)
        } else {
            f.parse().ok().map(Some)
        }
    };
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(n, line));
            }
            let bank = match f[1] {
                "pos" => BankSide::Pos,
                "neg" => BankSide::Neg,
                _ => return Err(bad(n, line)),
            };
            Ok(DynamicsRecord {
                epoch: f[0].parse().map_err(|_| bad(n, line))?,
                bank,
                active_ratio: value(f[2]).ok_or_else(|| bad(n, line))?,
                perplexity: value(f[3]).ok_or_else(|| bad(n, line))?,
            })
        })
        .collect()
}
