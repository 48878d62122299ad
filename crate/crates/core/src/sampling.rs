//! P×K batch construction, tuple enumeration and sampling, batch-hard mining
//! and tuple counting.
//!
//! Throughout this module `n_classes` is the number of identities a tuple
//! touches: the anchor's class plus `n_classes - 1` negative classes. A
//! triplet has `n_classes = 2`. In a balanced batch of `P` classes with `K`
//! samples each the number of distinct tuples is
//!
//! ```text
//! C(P, N) · K^N · N · (K - 1)
//! ```
//!
//! (choose the classes, one sample per class, which of them is the anchor,
//! then the anchor's positive).

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::batch::class_members;
use crate::error::{domain, Error, Result};
use crate::math::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub k: usize,
}

impl BatchSpec {
    pub fn new(p: usize, k: usize) -> Result<Self> {
        let spec = Self { p, k };
        spec.validate(false)?;
        Ok(spec)
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// `K = 1` is only allowed when no loss needs a positive pair.
    pub fn validate(&self, needs_pairs: bool) -> Result<()> {
        if self.p < 2 {
            return Err(domain(format!("P = {} but at least 2 identities are required", self.p)));
        }
        let min_k = if needs_pairs { 2 } else { 1 };
        if self.k < min_k {
            return Err(domain(format!("K = {} but at least {min_k} samples per identity are required", self.k)));
        }
        Ok(())
    }
}

/// Indices of one tuple inside a batch.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TupleIndex {
    pub anchor: usize,
    pub positive: usize,
    /// One sample per negative class.
    pub negatives: Vec<usize>,
}

impl TupleIndex {
    /// Checks the role invariants against `labels`.
    pub fn is_valid(&self, labels: &[usize]) -> bool {
        let n = labels.len();
        if self.anchor >= n || self.positive >= n || self.negatives.iter().any(|&j| j >= n) {
            return false;
        }
        let a = labels[self.anchor];
        if self.anchor == self.positive || labels[self.positive] != a {
            return false;
        }
        let mut seen = vec![a];
        for &j in &self.negatives {
            if seen.contains(&labels[j]) {
                return false;
            }
            seen.push(labels[j]);
        }
        true
    }
}

/// An anchor compared against class prototypes: its own class plus
/// `negative_classes`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PrototypeTuple {
    pub anchor: usize,
    pub negative_classes: Vec<usize>,
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

fn check_counting_args(p: usize, k: usize, n: usize) -> Result<()> {
    if n < 2 {
        return Err(domain(format!("a tuple needs at least 2 classes, got N = {n}")));
    }
    if n > p {
        return Err(domain(format!("N = {n} exceeds the {p} identities in a batch")));
    }
    if k < 2 {
        return Err(domain(format!("K = {k} leaves no positive for the anchor")));
    }
    Ok(())
}

/// Number of instance tuples with `n` classes in a balanced `P×K` batch.
pub fn count_tuples(p: usize, k: usize, n: usize) -> Result<u128> {
    check_counting_args(p, k, n)?;
    let pow = (k as u128).checked_pow(n as u32).ok_or_else(|| Error::Numeric("tuple count overflow".into()))?;
    binomial(p, n)
        .checked_mul(pow)
        .and_then(|v| v.checked_mul(n as u128))
        .and_then(|v| v.checked_mul((k - 1) as u128))
        .ok_or_else(|| Error::Numeric("tuple count overflow".into()))
}

/// Tuple count once class prototypes replace instances: `B · C(P, N)`.
pub fn count_prototype_tuples(p: usize, k: usize, n: usize) -> Result<u128> {
    check_counting_args(p, k, n)?;
    Ok((p * k) as u128 * binomial(p, n))
}

/// Elementary symmetric polynomial `e_r` of `values`.
fn elementary_symmetric(values: &[u128], r: usize) -> u128 {
    let mut e = vec![0u128; r + 1];
    e[0] = 1;
    for &v in values {
        for j in (1..=r).rev() {
            e[j] = e[j].saturating_add(e[j - 1].saturating_mul(v));
        }
    }
    e[r]
}

fn check_tuple_batch(members: &BTreeMap<usize, Vec<usize>>, n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(domain(format!("a tuple needs at least 2 classes, got N = {n_classes}")));
    }
    if n_classes > members.len() {
        return Err(domain(format!(
            "N = {n_classes} exceeds the {} classes in the batch",
            members.len()
        )));
    }
    if members.values().all(|m| m.len() < 2) {
        return Err(domain("no class has two samples, so no positive exists"));
    }
    Ok(())
}

/// Number of valid instance tuples in an arbitrary labelled batch.
pub fn count_batch_tuples(labels: &[usize], n_classes: usize) -> Result<u128> {
    let members = class_members(labels);
    check_tuple_batch(&members, n_classes)?;
    let mut total: u128 = 0;
    for (class, rows) in &members {
        let others: Vec<u128> = members
            .iter()
            .filter(|(c, _)| *c != class)
            .map(|(_, r)| r.len() as u128)
            .collect();
        let per_anchor = (rows.len() as u128 - 1).saturating_mul(elementary_symmetric(&others, n_classes - 1));
        total = total.saturating_add(per_anchor.saturating_mul(rows.len() as u128));
    }
    Ok(total)
}

/// Advances `combo` to the next `r`-combination of `0..n` in lexicographic
/// order. Returns `false` after the last one.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let r = combo.len();
    for i in (0..r).rev() {
        if combo[i] < n - r + i {
            combo[i] += 1;
            for j in i + 1..r {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Every `r`-subset of `0..n`, lexicographic.
fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    if r > n {
        return Vec::new();
    }
    let mut combo: Vec<usize> = (0..r).collect();
    let mut out = vec![combo.clone()];
    while next_combination(&mut combo, n) {
        out.push(combo.clone());
    }
    out
}

/// All valid instance tuples with `n_classes` classes, in a fixed order:
/// anchor, then positive, then negative classes lexicographically, then
/// negative members.
pub fn enumerate_tuples(labels: &[usize], n_classes: usize) -> Result<Vec<TupleIndex>> {
    let members = class_members(labels);
    check_tuple_batch(&members, n_classes)?;
    let classes: Vec<usize> = members.keys().copied().collect();
    let mut out = Vec::new();
    for (anchor, &class) in labels.iter().enumerate() {
        let others: Vec<usize> = classes.iter().copied().filter(|&c| c != class).collect();
        let subsets = combinations(others.len(), n_classes - 1);
        for &positive in &members[&class] {
            if positive == anchor {
                continue;
            }
            for subset in &subsets {
                let pools: Vec<&Vec<usize>> = subset.iter().map(|&i| &members[&others[i]]).collect();
                let mut digits = vec![0usize; pools.len()];
                'members: loop {
                    let negatives = digits.iter().zip(&pools).map(|(&d, p)| p[d]).collect();
                    out.push(TupleIndex { anchor, positive, negatives });
                    // odometer over one member per negative class
                    let mut i = pools.len();
                    loop {
                        if i == 0 {
                            break 'members;
                        }
                        i -= 1;
                        digits[i] += 1;
                        if digits[i] < pools[i].len() {
                            continue 'members;
                        }
                        digits[i] = 0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `m` instance tuples drawn uniformly with replacement by direct
/// construction: `N` classes, the anchor class among them, an anchor and a
/// positive from it, and one member of every other chosen class. The draw is
/// uniform over the enumerable set when the batch is balanced.
pub fn sample_tuples<R: Rng + ?Sized>(
    labels: &[usize],
    n_classes: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<TupleIndex>> {
    let members = class_members(labels);
    check_tuple_batch(&members, n_classes)?;
    let pools: Vec<&Vec<usize>> = members.values().collect();
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let chosen = index::sample(rng, pools.len(), n_classes).into_vec();
        let anchor_slot = rng.gen_range(0..n_classes);
        let anchor_pool = pools[chosen[anchor_slot]];
        if anchor_pool.len() < 2 {
            continue;
        }
        let pair = index::sample(rng, anchor_pool.len(), 2);
        let negatives = chosen
            .iter()
            .enumerate()
            .filter(|(slot, _)| *slot != anchor_slot)
            .map(|(_, &c)| pools[c][rng.gen_range(0..pools[c].len())])
            .collect();
        out.push(TupleIndex {
            anchor: anchor_pool[pair.index(0)],
            positive: anchor_pool[pair.index(1)],
            negatives,
        });
    }
    Ok(out)
}

fn check_prototype_batch(members: &BTreeMap<usize, Vec<usize>>, n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(domain(format!("a tuple needs at least 2 classes, got N = {n_classes}")));
    }
    if n_classes > members.len() {
        return Err(domain(format!(
            "N = {n_classes} exceeds the {} classes in the batch",
            members.len()
        )));
    }
    Ok(())
}

/// Every (anchor, negative-class subset) pair, anchors ascending, subsets
/// lexicographic.
pub fn enumerate_prototype_tuples(labels: &[usize], n_classes: usize) -> Result<Vec<PrototypeTuple>> {
    let members = class_members(labels);
    check_prototype_batch(&members, n_classes)?;
    let classes: Vec<usize> = members.keys().copied().collect();
    let mut out = Vec::new();
    for (anchor, &class) in labels.iter().enumerate() {
        let others: Vec<usize> = classes.iter().copied().filter(|&c| c != class).collect();
        for subset in combinations(others.len(), n_classes - 1) {
            out.push(PrototypeTuple {
                anchor,
                negative_classes: subset.iter().map(|&i| others[i]).collect(),
            });
        }
    }
    Ok(out)
}

pub fn count_batch_prototype_tuples(labels: &[usize], n_classes: usize) -> Result<u128> {
    let members = class_members(labels);
    check_prototype_batch(&members, n_classes)?;
    Ok(labels.len() as u128 * binomial(members.len() - 1, n_classes - 1))
}

/// `m` prototype tuples: a uniform anchor and a uniform subset of the other
/// classes.
pub fn sample_prototype_tuples<R: Rng + ?Sized>(
    labels: &[usize],
    n_classes: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<PrototypeTuple>> {
    let members = class_members(labels);
    check_prototype_batch(&members, n_classes)?;
    let classes: Vec<usize> = members.keys().copied().collect();
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let anchor = rng.gen_range(0..labels.len());
        let others: Vec<usize> = classes.iter().copied().filter(|&c| c != labels[anchor]).collect();
        let mut picked: Vec<usize> = index::sample(rng, others.len(), n_classes - 1)
            .into_iter()
            .map(|i| others[i])
            .collect();
        picked.sort_unstable();
        out.push(PrototypeTuple { anchor, negative_classes: picked });
    }
    Ok(out)
}

/// Hardest positive (least similar) and hardest negative (most similar) for
/// every anchor. Ties go to the lowest index; anchors without a positive or
/// a negative are skipped.
pub fn batch_hard_mining(sim: &Matrix, labels: &[usize]) -> Result<Vec<TupleIndex>> {
    let n = labels.len();
    if sim.shape() != (n, n) {
        return Err(crate::error::shape(format!(
            "similarity matrix is {:?} for {n} labels",
            sim.shape()
        )));
    }
    let mut out = Vec::new();
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let s = sim.get(a, j);
            if labels[j] == labels[a] {
                if pos.map_or(true, |(_, best)| s < best) {
                    pos = Some((j, s));
                }
            } else if neg.map_or(true, |(_, best)| s > best) {
                neg = Some((j, s));
            }
        }
        if let (Some((p, _)), Some((q, _))) = (pos, neg) {
            out.push(TupleIndex { anchor: a, positive: p, negatives: vec![q] });
        }
    }
    Ok(out)
}

/// `P·K` dataset indices covering `P` distinct classes with `K` samples
/// each, grouped by class. Classes with fewer than `K` samples are sampled
/// with replacement.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    labels: &[usize],
    spec: BatchSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let members = class_members(labels);
    if members.len() < spec.p {
        return Err(domain(format!(
            "dataset has {} classes but P = {}",
            members.len(),
            spec.p
        )));
    }
    let classes: Vec<usize> = members.keys().copied().collect();
    let chosen: Vec<usize> = index::sample(rng, classes.len(), spec.p)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    Ok(draw_members(&members, &chosen, spec.k, rng))
}

fn draw_members<R: Rng + ?Sized>(
    members: &BTreeMap<usize, Vec<usize>>,
    classes: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(classes.len() * k);
    for class in classes {
        let pool = &members[class];
        if pool.len() >= k {
            out.extend(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]));
        } else {
            out.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
    }
    out
}

/// One epoch: the identity list is shuffled and cut into `⌈ids / P⌉` groups
/// of `P`; a short final group is topped up with other random identities.
pub fn epoch_batches<R: Rng + ?Sized>(
    labels: &[usize],
    spec: BatchSpec,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let members = class_members(labels);
    if members.len() < spec.p {
        return Err(domain(format!(
            "dataset has {} classes but P = {}",
            members.len(),
            spec.p
        )));
    }
    let mut ids: Vec<usize> = members.keys().copied().collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), rng);
    let mut batches = Vec::new();
    for chunk in ids.chunks(spec.p) {
        let mut group = chunk.to_vec();
        if group.len() < spec.p {
            let rest: Vec<usize> = ids.iter().copied().filter(|c| !group.contains(c)).collect();
            let extra = index::sample(rng, rest.len(), spec.p - group.len());
            group.extend(extra.into_iter().map(|i| rest[i]));
        }
        batches.push(draw_members(&members, &group, spec.k, rng));
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeSet, HashMap};

    fn pk_labels(p: usize, k: usize) -> Vec<usize> {
        (0..p).flat_map(|c| std::iter::repeat(c).take(k)).collect()
    }

    /// Brute force over every (anchor, positive, negatives) assignment.
    fn brute_force_count(labels: &[usize], n_classes: usize) -> usize {
        let n = labels.len();
        let mut count = 0;
        for a in 0..n {
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                // negatives as a strictly increasing index sequence with
                // pairwise distinct, non-anchor classes
                let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, vec![])];
                while let Some((start, chosen)) = stack.pop() {
                    if chosen.len() == n_classes - 1 {
                        let mut classes: Vec<usize> = chosen.iter().map(|&j| labels[j]).collect();
                        classes.sort_unstable();
                        classes.dedup();
                        if classes.len() == chosen.len() && !classes.contains(&labels[a]) {
                            count += 1;
                        }
                        continue;
                    }
                    for j in start..n {
                        let mut next = chosen.clone();
                        next.push(j);
                        stack.push((j + 1, next));
                    }
                }
            }
        }
        count
    }

    #[test]
    fn counting_examples() {
        assert_eq!(count_tuples(16, 4, 2).unwrap(), 11520);
        assert_eq!(count_tuples(2, 2, 2).unwrap(), 8);
        assert_eq!(brute_force_count(&pk_labels(2, 2), 2), 8);
        assert_eq!(count_prototype_tuples(16, 4, 16).unwrap(), 64);
        assert!(matches!(count_tuples(3, 2, 4), Err(Error::Domain(_))));
        assert!(count_tuples(3, 1, 2).is_err());
    }

    #[test]
    fn enumeration_matches_formula_and_brute_force() {
        for p in 2..=4 {
            for k in 2..=3 {
                for n in 2..=p {
                    let labels = pk_labels(p, k);
                    let tuples = enumerate_tuples(&labels, n).unwrap();
                    let expected = count_tuples(p, k, n).unwrap() as usize;
                    assert_eq!(tuples.len(), expected, "P={p} K={k} N={n}");
                    assert_eq!(brute_force_count(&labels, n), expected);
                    assert_eq!(count_batch_tuples(&labels, n).unwrap() as usize, expected);
                    let unique: BTreeSet<_> = tuples.iter().collect();
                    assert_eq!(unique.len(), tuples.len());
                    assert!(tuples.iter().all(|t| t.is_valid(&labels)));
                }
            }
        }
        assert_eq!(enumerate_tuples(&pk_labels(3, 2), 3).unwrap().len(), 24);
    }

    #[test]
    fn enumeration_errors() {
        assert!(matches!(enumerate_tuples(&pk_labels(2, 1), 2), Err(Error::Domain(_))));
        assert!(matches!(enumerate_tuples(&pk_labels(2, 2), 3), Err(Error::Domain(_))));
    }

    #[test]
    fn unbalanced_batch_count() {
        let labels = vec![0, 0, 0, 1, 2, 2];
        for n in 2..=3 {
            assert_eq!(
                enumerate_tuples(&labels, n).unwrap().len(),
                brute_force_count(&labels, n)
            );
            assert_eq!(count_batch_tuples(&labels, n).unwrap() as usize, brute_force_count(&labels, n));
        }
    }

    #[test]
    fn sampled_tuples_are_uniform() {
        let labels = pk_labels(2, 2);
        let all = enumerate_tuples(&labels, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = 100_000;
        let draws = sample_tuples(&labels, 2, m, &mut rng).unwrap();
        let mut freq: HashMap<TupleIndex, usize> = HashMap::new();
        for t in draws {
            assert!(t.is_valid(&labels));
            *freq.entry(t).or_default() += 1;
        }
        assert_eq!(freq.len(), 8);
        let p = 1.0 / 8.0;
        let sigma = (m as f64 * p * (1.0 - p)).sqrt();
        for t in &all {
            let got = freq[t] as f64;
            assert!((got - m as f64 * p).abs() <= 3.0 * sigma, "{t:?}: {got}");
        }
    }

    #[test]
    fn sampling_determinism_and_empty() {
        let labels = pk_labels(4, 3);
        let a = sample_tuples(&labels, 3, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_tuples(&labels, 3, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(sample_tuples(&labels, 3, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().is_empty());
    }

    #[test]
    fn prototype_tuples() {
        let labels = pk_labels(4, 3);
        let all = enumerate_prototype_tuples(&labels, 3).unwrap();
        assert_eq!(all.len(), 12 * 3);
        assert_eq!(count_batch_prototype_tuples(&labels, 3).unwrap(), 36);
        let full = enumerate_prototype_tuples(&pk_labels(16, 4), 16).unwrap();
        assert_eq!(full.len() as u128, count_prototype_tuples(16, 4, 16).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in sample_prototype_tuples(&labels, 3, 40, &mut rng).unwrap() {
            assert_eq!(t.negative_classes.len(), 2);
            assert!(!t.negative_classes.contains(&labels[t.anchor]));
        }
    }

    #[test]
    fn hard_mining_hand_built() {
        // classes: 0 0 1 1
        let labels = vec![0, 0, 1, 1];
        let sim = Matrix::from_rows(&[
            vec![1.0, 0.2, 0.9, 0.1],
            vec![0.2, 1.0, 0.3, 0.4],
            vec![0.9, 0.3, 1.0, 0.5],
            vec![0.1, 0.4, 0.5, 1.0],
        ])
        .unwrap();
        let got = batch_hard_mining(&sim, &labels).unwrap();
        let expect = [(0, 1, 2), (1, 0, 3), (2, 3, 0), (3, 2, 1)];
        assert_eq!(got.len(), 4);
        for (t, (a, p, n)) in got.iter().zip(expect) {
            assert_eq!((t.anchor, t.positive, t.negatives[0]), (a, p, n));
        }
    }

    #[test]
    fn hard_mining_ties_and_skips() {
        let labels = vec![0, 0, 0, 1, 1, 2];
        let sim = Matrix::from_fn(6, 6, |_, _| 0.5);
        let got = batch_hard_mining(&sim, &labels).unwrap();
        // class 2 has a single member and is skipped
        assert_eq!(got.len(), 5);
        assert_eq!((got[0].positive, got[0].negatives[0]), (1, 3));
        assert_eq!((got[1].positive, got[1].negatives[0]), (0, 3));
        assert_eq!((got[3].positive, got[3].negatives[0]), (4, 0));
    }

    #[test]
    fn pk_batches() {
        let labels: Vec<usize> = (0..4).flat_map(|c| [c; 3]).collect();
        let spec = BatchSpec::new(2, 2).unwrap();
        let idx = sample_pk_batch(&labels, spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(idx.len(), 4);
        let classes: BTreeSet<usize> = idx.iter().map(|&i| labels[i]).collect();
        assert_eq!(classes.len(), 2);
        for c in classes {
            assert_eq!(idx.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
        let again = sample_pk_batch(&labels, spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(idx, again);
        assert!(sample_pk_batch(&labels, BatchSpec::new(5, 2).unwrap(), &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn small_class_sampled_with_replacement() {
        // class 0 has two images, K = 4: every output lies in {0, 1}^4
        let labels = vec![0, 0, 1, 1, 1, 1];
        let spec = BatchSpec::new(2, 4).unwrap();
        for seed in 0..20 {
            let idx = sample_pk_batch(&labels, spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let class0: Vec<usize> = idx.iter().copied().filter(|&i| labels[i] == 0).collect();
            assert_eq!(class0.len(), 4);
            assert!(class0.iter().all(|&i| i < 2));
        }
    }

    #[test]
    fn epochs_cover_every_identity() {
        let labels: Vec<usize> = (0..10).flat_map(|c| [c; 4]).collect();
        let spec = BatchSpec::new(4, 2).unwrap();
        let batches = epoch_batches(&labels, spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(batches.len(), 3);
        let mut covered = BTreeSet::new();
        for b in &batches {
            assert_eq!(b.len(), 8);
            let classes: BTreeSet<usize> = b.iter().map(|&i| labels[i]).collect();
            assert_eq!(classes.len(), 4);
            covered.extend(classes);
        }
        assert_eq!(covered.len(), 10);
    }
}
