//! Capacity-bounded replay memory with class-balancing greedy eviction.
//!
//! On every task boundary the memory and the incoming task data are pooled
//! and samples are removed one at a time, each time dropping the sample
//! whose removal leaves the pool's instance-label distribution closest (L1)
//! to uniform over every class seen so far, until the pool fits.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One stored image: a reference, its per-class instance counts and the
/// task it came from. Counts only cover classes labelled in that task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySample {
    pub image_id: u64,
    pub histogram: BTreeMap<usize, u32>,
    pub source_task: usize,
}

impl MemorySample {
    pub fn new(image_id: u64, class_ids: impl IntoIterator<Item = usize>, source_task: usize) -> Self {
        let mut histogram = BTreeMap::new();
        for c in class_ids {
            *histogram.entry(c).or_insert(0) += 1;
        }
        Self {
            image_id,
            histogram,
            source_task,
        }
    }
}

/// Result of one [`ReplayMemory::update`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub pooled: usize,
    pub evicted: usize,
    /// L1 distance to uniform of the kept samples.
    pub distance_to_uniform: f64,
}

/// A replay draw. `with_replacement` is set when more samples were asked
/// for than stored; `empty` when the memory held nothing to draw from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplayBatch {
    pub indices: Vec<usize>,
    pub with_replacement: bool,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayMemory {
    capacity: usize,
    samples: Vec<MemorySample>,
    seen_classes: BTreeSet<usize>,
}

/// Normalised per-class frequencies over `classes`; all zeros when the
/// counts sum to zero.
pub fn label_distribution(counts: &BTreeMap<usize, u64>, classes: &BTreeSet<usize>) -> Vec<f64> {
    let total: u64 = classes.iter().map(|c| counts.get(c).copied().unwrap_or(0)).sum();
    classes
        .iter()
        .map(|c| {
            if total == 0 {
                0.0
            } else {
                counts.get(c).copied().unwrap_or(0) as f64 / total as f64
            }
        })
        .collect()
}

/// L1 distance between the distribution of `counts` and uniform over `classes`.
pub fn distance_to_uniform(counts: &BTreeMap<usize, u64>, classes: &BTreeSet<usize>) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    let u = 1.0 / classes.len() as f64;
    label_distribution(counts, classes).iter().map(|p| (p - u).abs()).sum()
}

/// Summed instance counts of a set of samples.
pub fn pooled_counts<'a>(samples: impl IntoIterator<Item = &'a MemorySample>) -> BTreeMap<usize, u64> {
    let mut counts = BTreeMap::new();
    for s in samples {
        for (&c, &n) in &s.histogram {
            *counts.entry(c).or_insert(0) += n as u64;
        }
    }
    counts
}

const TIE_TOLERANCE: f64 = 1e-12;

/// Greedy class-balancing selection of at most `capacity` samples from `pool`.
///
/// Returns the indices (into `pool`, ascending) that are kept. Among removals
/// that reach the same distance, samples from newer tasks go first, then the
/// lower pool index.
pub fn greedy_select(pool: &[MemorySample], capacity: usize, classes: &BTreeSet<usize>) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; pool.len()];
    let mut counts = pooled_counts(pool);
    let mut remaining = pool.len();
    while remaining > capacity {
        let mut best: Option<(f64, usize)> = None;
        for (i, s) in pool.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            for (c, n) in &s.histogram {
                *counts.get_mut(c).expect("counted") -= *n as u64;
            }
            let d = distance_to_uniform(&counts, classes);
            for (c, n) in &s.histogram {
                *counts.get_mut(c).expect("counted") += *n as u64;
            }
            let better = match best {
                None => true,
                Some((bd, bi)) => {
                    d < bd - TIE_TOLERANCE
                        || (d <= bd + TIE_TOLERANCE && s.source_task > pool[bi].source_task)
                }
            };
            if better {
                best = Some((d, i));
            }
        }
        let (_, victim) = best.expect("pool is non-empty while above capacity");
        for (c, n) in &pool[victim].histogram {
            *counts.get_mut(c).expect("counted") -= *n as u64;
        }
        alive[victim] = false;
        remaining -= 1;
    }
    (0..pool.len()).filter(|&i| alive[i]).collect()
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            samples: Vec::new(),
            seen_classes: BTreeSet::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[MemorySample] {
        &self.samples
    }

    pub fn seen_classes(&self) -> &BTreeSet<usize> {
        &self.seen_classes
    }

    /// Adds classes to the balancing target even if no stored sample has them.
    pub fn register_classes(&mut self, classes: impl IntoIterator<Item = usize>) {
        self.seen_classes.extend(classes);
    }

    pub fn counts(&self) -> BTreeMap<usize, u64> {
        pooled_counts(&self.samples)
    }

    pub fn distance_to_uniform(&self) -> f64 {
        distance_to_uniform(&self.counts(), &self.seen_classes)
    }

    /// Pools the memory with `incoming` and evicts down to capacity.
    pub fn update(&mut self, incoming: Vec<MemorySample>) -> UpdateReport {
        for s in &incoming {
            self.seen_classes.extend(s.histogram.keys().copied());
        }
        let mut pool = std::mem::take(&mut self.samples);
        pool.extend(incoming);
        let pooled = pool.len();
        let keep = greedy_select(&pool, self.capacity, &self.seen_classes);
        let mut keep_iter = keep.iter().peekable();
        self.samples = pool
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| {
                if keep_iter.peek() == Some(&&i) {
                    keep_iter.next();
                    Some(s)
                } else {
                    None
                }
            })
            .collect();
        UpdateReport {
            pooled,
            evicted: pooled - self.samples.len(),
            distance_to_uniform: self.distance_to_uniform(),
        }
    }

    /// Draws `k` sample indices: without replacement when `k ≤ len`, with
    /// replacement otherwise.
    pub fn sample_batch<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> ReplayBatch {
        let n = self.samples.len();
        if k == 0 {
            return ReplayBatch::default();
        }
        if n == 0 {
            return ReplayBatch {
                empty: true,
                ..Default::default()
            };
        }
        if k <= n {
            ReplayBatch {
                indices: index::sample(rng, n, k).into_vec(),
                ..Default::default()
            }
        } else {
            ReplayBatch {
                indices: (0..k).map(|_| rng.random_range(0..n)).collect(),
                with_replacement: true,
                empty: false,
            }
        }
    }

    pub fn to_manifest(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let memory: Self = serde_json::from_str(text)?;
        if memory.samples.len() > memory.capacity {
            return Err(Error::Integrity(format!(
                "memory manifest holds {} samples but capacity is {}",
                memory.samples.len(),
                memory.capacity
            )));
        }
        Ok(memory)
    }
}

/// Bytes needed to store raw head outputs for `samples` images, as a
/// dense-output replay scheme would.
pub fn der_storage_bytes(
    num_anchors: u64,
    num_classes: u64,
    reg_max: u64,
    bytes_per_value: u64,
    num_samples: u64,
) -> u64 {
    num_samples * num_anchors * (num_classes + 4 * reg_max) * bytes_per_value
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(id: u64, classes: &[usize], task: usize) -> MemorySample {
        MemorySample::new(id, classes.iter().copied(), task)
    }

    #[test]
    fn storage_examples() {
        assert_eq!(der_storage_bytes(8400, 1, 16, 4, 1), 2_184_000);
        assert_eq!(der_storage_bytes(8400, 1, 16, 4, 800), 1_747_200_000);
        assert_eq!(der_storage_bytes(1, 1, 1, 1, 1), 5);
    }

    #[test]
    fn distribution_examples() {
        let classes: BTreeSet<usize> = [0, 1].into();
        let mut counts = BTreeMap::new();
        assert_eq!(label_distribution(&counts, &classes), vec![0.0, 0.0]);
        assert_eq!(distance_to_uniform(&counts, &classes), 1.0);
        counts.insert(0, 3);
        assert_eq!(distance_to_uniform(&counts, &classes), 1.0);
        counts.insert(1, 3);
        assert_eq!(distance_to_uniform(&counts, &classes), 0.0);
    }

    #[test]
    fn under_capacity_keeps_everything() {
        let mut m = ReplayMemory::new(5);
        let r = m.update(vec![sample(1, &[0], 0), sample(2, &[0, 0], 0)]);
        assert_eq!(r.evicted, 0);
        assert_eq!(m.len(), 2);
        let mut z = ReplayMemory::new(0);
        z.update(vec![sample(1, &[0], 0)]);
        assert!(z.is_empty());
    }

    #[test]
    fn eviction_balances_classes() {
        let mut m = ReplayMemory::new(2);
        m.update(vec![sample(1, &[0], 0), sample(2, &[0], 0), sample(3, &[0], 0)]);
        assert_eq!(m.len(), 2);
        m.update(vec![sample(4, &[1], 1), sample(5, &[1], 1)]);
        let ids: BTreeSet<u64> = m.samples().iter().map(|s| s.image_id).collect();
        let counts = m.counts();
        assert_eq!(counts.get(&0), Some(&1));
        assert_eq!(counts.get(&1), Some(&1));
        assert_eq!(ids.len(), 2);
        assert_eq!(m.distance_to_uniform(), 0.0);
    }

    #[test]
    fn ties_drop_newer_task_first() {
        let mut m = ReplayMemory::new(1);
        m.update(vec![sample(1, &[0], 0)]);
        m.update(vec![sample(2, &[0], 1)]);
        assert_eq!(m.samples()[0].image_id, 1);
    }

    #[test]
    fn batch_sampling_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = ReplayMemory::new(3);
        assert!(empty.sample_batch(2, &mut rng).empty);
        assert!(!empty.sample_batch(0, &mut rng).empty);
        let mut m = ReplayMemory::new(3);
        m.update((0..3).map(|i| sample(i, &[0], 0)).collect());
        let b = m.sample_batch(3, &mut rng);
        let mut idx = b.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(!b.with_replacement);
        let b = m.sample_batch(7, &mut rng);
        assert_eq!(b.indices.len(), 7);
        assert!(b.with_replacement);
        let again = m.sample_batch(2, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(again, m.sample_batch(2, &mut ChaCha8Rng::seed_from_u64(5)));
    }

    #[test]
    fn manifest_roundtrip() {
        let mut m = ReplayMemory::new(2);
        m.update(vec![sample(7, &[0, 1], 0), sample(9, &[1], 0)]);
        let back = ReplayMemory::from_manifest(&m.to_manifest().unwrap()).unwrap();
        assert_eq!(back, m);
        let mut text: serde_json::Value = serde_json::from_str(&m.to_manifest().unwrap()).unwrap();
        text["capacity"] = 1.into();
        assert!(ReplayMemory::from_manifest(&text.to_string()).is_err());
    }
}
