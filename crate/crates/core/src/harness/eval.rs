//! Retrieval metrics and positive-pair distance histograms.

use std::io::{BufRead, Write};

use crate::error::{domain, shape, Result};
use crate::math::{similarity, Matrix, SimilarityKind, Vector};
use crate::meta::{MetaLearnerParams, Mode};
use crate::record::{read_vector, write_vector, Records};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// `cmc[k - 1]`: fraction of queries with a positive in the top `k`.
    pub cmc: Vector,
    pub ap: Vector,
}

impl EvalResult {
    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "rank1 {}", self.rank1)?;
        writeln!(out, "rank5 {}", self.rank5)?;
        writeln!(out, "rank10 {}", self.rank10)?;
        writeln!(out, "mAP {}", self.map)?;
        write_vector(out, "cmc", &self.cmc)?;
        write_vector(out, "ap", &self.ap)
    }

    pub fn read_text<R: BufRead>(records: &mut Records<R>) -> Result<Self> {
        let rank1 = records.expect_tag("rank1")?.f64_at(0)?;
        let rank5 = records.expect_tag("rank5")?.f64_at(0)?;
        let rank10 = records.expect_tag("rank10")?.f64_at(0)?;
        let map = records.expect_tag("mAP")?.f64_at(0)?;
        let cmc = read_vector(records, "cmc")?;
        let ap = read_vector(records, "ap")?;
        Ok(Self { rank1, rank5, rank10, map, cmc, ap })
    }
}

/// Gallery order for one query: descending cosine similarity, ties by
/// gallery index.
pub fn rank_gallery(query: &[f64], gallery: &Matrix) -> Result<Vec<usize>> {
    let sims: Vec<f64> = (0..gallery.rows())
        .map(|g| similarity(query, gallery.row(g), SimilarityKind::Cosine))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    // stable sort keeps index order among equal similarities
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    Ok(order)
}

/// Ranks the gallery for every query and scores the ranking.
///
/// AP for a query is the mean over its positives, in rank order, of
/// `i / r_i` where `r_i` is the 1-based rank of the `i`-th positive.
pub fn evaluate_retrieval(
    query: &Matrix,
    query_labels: &[usize],
    gallery: &Matrix,
    gallery_labels: &[usize],
) -> Result<EvalResult> {
    if query.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(shape("features and labels disagree in length"));
    }
    if query.rows() == 0 || gallery.rows() == 0 {
        return Err(domain("empty query or gallery set"));
    }
    if query.cols() != gallery.cols() {
        return Err(shape("query and gallery dimensions differ"));
    }
    if !(query.is_finite() && gallery.is_finite()) {
        return Err(crate::Error::Numeric("non-finite retrieval features".into()));
    }
    let n_gallery = gallery.rows();
    let mut first_hit = vec![0usize; n_gallery];
    let mut ap = Vec::with_capacity(query.rows());
    for q in 0..query.rows() {
        let label = query_labels[q];
        if !gallery_labels.contains(&label) {
            return Err(domain(format!("query {q} (identity {label}) has no gallery positive")));
        }
        let order = rank_gallery(query.row(q), gallery)?;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &g) in order.iter().enumerate() {
            if gallery_labels[g] == label {
                if hits == 0 {
                    first_hit[pos] += 1;
                }
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
        }
        ap.push(precision_sum / hits as f64);
    }
    let nq = query.rows() as f64;
    let mut cmc = Vec::with_capacity(n_gallery);
    let mut running = 0usize;
    for count in first_hit {
        running += count;
        cmc.push(running as f64 / nq);
    }
    let at = |k: usize| cmc[k.min(n_gallery) - 1];
    let map = ap.iter().sum::<f64>() / nq;
    Ok(EvalResult { rank1: at(1), rank5: at(5), rank10: at(10), map, cmc, ap })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairHistogram {
    /// `bins + 1` edges spanning `[0, 2]`.
    pub edges: Vector,
    pub original: Vec<u64>,
    pub meta: Vec<u64>,
    pub mean_original: f64,
    pub mean_meta: f64,
    pub pairs: u64,
}

impl PairHistogram {
    pub fn bins(&self) -> usize {
        self.original.len()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "bin_lo,bin_hi,count_original,count_meta")?;
        for b in 0..self.bins() {
            writeln!(out, "{},{},{},{}", self.edges[b], self.edges[b + 1], self.original[b], self.meta[b])?;
        }
        Ok(())
    }
}

/// Bin of a cosine distance in `[0, 2]` split into `bins` equal parts.
pub fn distance_bin(distance: f64, bins: usize) -> usize {
    let b = (distance / 2.0 * bins as f64).floor();
    if b < 0.0 {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

/// `1 − cos` over every unordered same-identity pair, on `features` and on
/// their meta-learner images (eval mode), binned over `[0, 2]`.
pub fn positive_pair_histogram(
    features: &Matrix,
    labels: &[usize],
    meta: &MetaLearnerParams,
    bins: usize,
) -> Result<PairHistogram> {
    if bins == 0 {
        return Err(domain("histogram needs at least one bin"));
    }
    if features.rows() != labels.len() {
        return Err(shape("features and labels disagree in length"));
    }
    let mapped = meta.forward_batch(features, Mode::Eval)?.output;
    let mut original = vec![0u64; bins];
    let mut meta_counts = vec![0u64; bins];
    let (mut sum_o, mut sum_m) = (0.0, 0.0);
    let mut pairs = 0u64;
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] != labels[j] {
                continue;
            }
            let d_o = 1.0 - similarity(features.row(i), features.row(j), SimilarityKind::Cosine)?;
            let d_m = 1.0 - similarity(mapped.row(i), mapped.row(j), SimilarityKind::Cosine)?;
            original[distance_bin(d_o, bins)] += 1;
            meta_counts[distance_bin(d_m, bins)] += 1;
            sum_o += d_o;
            sum_m += d_m;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(domain("no same-identity pair to histogram"));
    }
    let edges = (0..=bins).map(|b| 2.0 * b as f64 / bins as f64).collect();
    Ok(PairHistogram {
        edges,
        original,
        meta: meta_counts,
        mean_original: sum_o / pairs as f64,
        mean_meta: sum_m / pairs as f64,
        pairs,
    })
}
