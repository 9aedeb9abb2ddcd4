//! GPU expert cache: one global pool of expert slots shared by all layers,
//! with score-aware (MRS), least-recently-used and least-frequently-used
//! replacement.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{top_indices, ExpertRef};
use crate::scheduler::Residency;

pub const DEFAULT_MRS_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Mrs,
    Lru,
    Lfu,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Mrs, PolicyKind::Lru, PolicyKind::Lfu];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Mrs => "mrs",
            PolicyKind::Lru => "lru",
            PolicyKind::Lfu => "lfu",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mrs" => Ok(PolicyKind::Mrs),
            "lru" => Ok(PolicyKind::Lru),
            "lfu" => Ok(PolicyKind::Lfu),
            other => Err(format!(
                "unknown cache policy '{other}' (expected mrs, lru or lfu)"
            )),
        }
    }
}

/// Exponentially averaged top-p routing scores, one entry per routed expert
/// of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MrsState {
    scores: Vec<f64>,
    num_routed: usize,
    pub alpha: f64,
    pub p: usize,
    /// When false, experts outside the top p keep their score instead of
    /// decaying by (1 - alpha).
    pub decay_unselected: bool,
}

impl MrsState {
    /// Uniform prior of 1/num_routed for every expert.
    pub fn new(num_layers: usize, num_routed: usize, alpha: f64, p: usize) -> Self {
        assert!(num_routed > 0, "num_routed must be positive");
        assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1]");
        MrsState {
            scores: vec![1.0 / num_routed as f64; num_layers * num_routed],
            num_routed,
            alpha,
            p: p.min(num_routed),
            decay_unselected: true,
        }
    }

    pub fn num_routed(&self) -> usize {
        self.num_routed
    }

    pub fn score(&self, e: ExpertRef) -> f64 {
        self.scores[self.index(e)]
    }

    pub fn layer_scores(&self, layer: usize) -> &[f64] {
        &self.scores[layer * self.num_routed..(layer + 1) * self.num_routed]
    }

    pub fn set_score(&mut self, e: ExpertRef, value: f64) {
        assert!(value >= 0.0, "scores are nonnegative");
        let i = self.index(e);
        self.scores[i] = value;
    }

    /// `S <- alpha * TopP(s) + (1 - alpha) * S` for every expert of `layer`.
    /// Panics if `scores` does not have one entry per routed expert.
    pub fn update(&mut self, layer: usize, scores: &[f64]) {
        assert_eq!(
            scores.len(),
            self.num_routed,
            "score vector must cover every routed expert"
        );
        let top = top_p(scores, self.p);
        let (alpha, decay) = (self.alpha, self.decay_unselected);
        let base = layer * self.num_routed;
        for (i, s) in self.scores[base..base + self.num_routed]
            .iter_mut()
            .enumerate()
        {
            if top[i] > 0.0 || decay {
                *s = alpha * top[i] + (1.0 - alpha) * *s;
            }
        }
    }

    fn index(&self, e: ExpertRef) -> usize {
        e.layer as usize * self.num_routed + e.expert as usize
    }
}

/// Keeps the `p` largest entries (ties to the lower index) and zeroes the rest.
pub fn top_p(scores: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    for i in top_indices(scores, p) {
        out[i] = scores[i];
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    pub inserts: u64,
    pub evictions: u64,
}

impl CacheStats {
    /// `None` when nothing was looked up.
    pub fn hit_rate(&self) -> Option<f64> {
        (self.lookups > 0).then(|| self.hits as f64 / self.lookups as f64)
    }

    pub fn merge(&mut self, other: &CacheStats) {
        self.lookups += other.lookups;
        self.hits += other.hits;
        self.inserts += other.inserts;
        self.evictions += other.evictions;
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("{0} is already resident")]
    AlreadyResident(ExpertRef),
    #[error("cache has no slots")]
    ZeroCapacity,
    #[error("cache is full and every resident expert is pinned")]
    AllPinned,
}

/// Resident set plus the metadata every policy needs. Indexed densely by
/// `layer * num_routed + expert`.
#[derive(Debug, Clone)]
pub struct CacheState {
    policy: PolicyKind,
    capacity: usize,
    num_routed: usize,
    resident: Vec<bool>,
    pinned: Vec<bool>,
    members: Vec<usize>,
    last_access: Vec<u64>,
    frequency: Vec<u64>,
    clock: u64,
    mrs: MrsState,
    stats: CacheStats,
}

impl CacheState {
    pub fn new(policy: PolicyKind, capacity: usize, mrs: MrsState) -> Self {
        let slots = mrs.scores.len();
        let capacity = capacity.min(slots);
        CacheState {
            policy,
            capacity,
            num_routed: mrs.num_routed,
            resident: vec![false; slots],
            pinned: vec![false; slots],
            members: Vec::with_capacity(capacity),
            last_access: vec![0; slots],
            frequency: vec![0; slots],
            clock: 0,
            mrs,
            stats: CacheStats::default(),
        }
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.members.len() >= self.capacity
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn mrs(&self) -> &MrsState {
        &self.mrs
    }

    pub fn mrs_mut(&mut self) -> &mut MrsState {
        &mut self.mrs
    }

    pub fn contains(&self, e: ExpertRef) -> bool {
        self.resident[self.index(e)]
    }

    pub fn is_pinned(&self, e: ExpertRef) -> bool {
        self.pinned[self.index(e)]
    }

    /// Resident experts in `ExpertRef` order.
    pub fn resident(&self) -> Vec<ExpertRef> {
        let mut out: Vec<ExpertRef> = self.members.iter().map(|&i| self.expert(i)).collect();
        out.sort();
        out
    }

    /// Counts one lookup. Every lookup adds to the expert's activation
    /// count, resident or not; a hit also refreshes recency.
    pub fn lookup(&mut self, e: ExpertRef) -> bool {
        self.stats.lookups += 1;
        let i = self.index(e);
        self.frequency[i] += 1;
        if !self.resident[i] {
            return false;
        }
        self.stats.hits += 1;
        self.touch(i);
        true
    }

    /// Inserts a non-resident expert, evicting the policy's victim among the
    /// unpinned residents when full. Returns the victim.
    pub fn insert(&mut self, e: ExpertRef) -> Result<Option<ExpertRef>, CacheError> {
        let i = self.index(e);
        if self.resident[i] {
            return Err(CacheError::AlreadyResident(e));
        }
        if self.capacity == 0 {
            return Err(CacheError::ZeroCapacity);
        }
        let victim = if self.is_full() {
            let slot = self.victim_slot().ok_or(CacheError::AllPinned)?;
            let v = self.members.swap_remove(slot);
            self.resident[v] = false;
            self.stats.evictions += 1;
            Some(self.expert(v))
        } else {
            None
        };
        self.resident[i] = true;
        self.members.push(i);
        self.touch(i);
        self.stats.inserts += 1;
        Ok(victim)
    }

    /// Pins a resident expert so it cannot be evicted. Returns false if the
    /// expert is not resident.
    pub fn pin(&mut self, e: ExpertRef) -> bool {
        let i = self.index(e);
        if self.resident[i] {
            self.pinned[i] = true;
        }
        self.resident[i]
    }

    pub fn unpin(&mut self, e: ExpertRef) {
        let i = self.index(e);
        self.pinned[i] = false;
    }

    pub fn pinned_count(&self) -> usize {
        self.members.iter().filter(|&&i| self.pinned[i]).count()
    }

    fn touch(&mut self, i: usize) {
        self.clock += 1;
        self.last_access[i] = self.clock;
    }

    fn victim_slot(&self) -> Option<usize> {
        let candidates = self
            .members
            .iter()
            .enumerate()
            .filter(|(_, &i)| !self.pinned[i]);
        match self.policy {
            PolicyKind::Mrs => candidates
                .min_by(|(_, &a), (_, &b)| {
                    self.mrs.scores[a]
                        .total_cmp(&self.mrs.scores[b])
                        .then(a.cmp(&b))
                })
                .map(|(slot, _)| slot),
            PolicyKind::Lru => candidates
                .min_by_key(|(_, &i)| (self.last_access[i], i))
                .map(|(slot, _)| slot),
            PolicyKind::Lfu => candidates
                .min_by_key(|(_, &i)| (self.frequency[i], self.last_access[i], i))
                .map(|(slot, _)| slot),
        }
    }

    fn index(&self, e: ExpertRef) -> usize {
        let i = e.layer as usize * self.num_routed + e.expert as usize;
        assert!(
            (e.expert as usize) < self.num_routed && i < self.resident.len(),
            "{e} is outside the model"
        );
        i
    }

    fn expert(&self, i: usize) -> ExpertRef {
        ExpertRef::new(i / self.num_routed, i % self.num_routed)
    }
}

impl Residency for CacheState {
    fn is_resident(&self, e: ExpertRef) -> bool {
        self.contains(e)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{HashMap, VecDeque};

    use proptest::prelude::*;

    use super::*;

    fn e(i: usize) -> ExpertRef {
        ExpertRef::new(0, i)
    }

    fn cache(policy: PolicyKind, capacity: usize, n: usize) -> CacheState {
        CacheState::new(policy, capacity, MrsState::new(1, n, 0.5, 2))
    }

    #[test]
    fn alpha_one_collapses_to_top_p() {
        let mut s = MrsState::new(2, 4, 1.0, 2);
        let scores = [0.1, 0.4, 0.3, 0.2];
        s.update(1, &scores);
        assert_eq!(s.layer_scores(1), &[0.0, 0.4, 0.3, 0.0]);
        assert_eq!(s.layer_scores(0), &[0.25; 4]);
    }

    #[test]
    fn half_alpha_hand_values() {
        let mut s = MrsState::new(1, 3, 0.5, 2);
        for (i, v) in [0.4, 0.2, 0.0].into_iter().enumerate() {
            s.set_score(e(i), v);
        }
        s.update(0, &[0.6, 0.3, 0.1]);
        assert_eq!(s.layer_scores(0), &[0.5, 0.25, 0.0]);
    }

    #[test]
    fn equal_scores_accumulate_lowest_indices() {
        let mut s = MrsState::new(1, 5, 1.0, 2);
        s.update(0, &[0.2; 5]);
        assert_eq!(s.layer_scores(0), &[0.2, 0.2, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn alpha_zero_is_identity() {
        let mut s = MrsState::new(1, 4, 0.0, 2);
        let before = s.clone();
        s.update(0, &[0.7, 0.1, 0.1, 0.1]);
        assert_eq!(s, before);
    }

    #[test]
    fn unselected_scores_decay_geometrically() {
        let alpha = 0.5;
        let mut s = MrsState::new(1, 4, alpha, 1);
        let original = s.score(e(3));
        for k in 1..=20 {
            s.update(0, &[0.7, 0.1, 0.1, 0.1]);
            assert_eq!(s.score(e(3)), (1.0 - alpha).powi(k) * original);
        }
    }

    #[test]
    fn no_decay_variant_keeps_unselected() {
        let mut s = MrsState::new(1, 4, 0.5, 1);
        s.decay_unselected = false;
        s.update(0, &[0.7, 0.1, 0.1, 0.1]);
        assert_eq!(s.layer_scores(0), &[0.475, 0.25, 0.25, 0.25]);
    }

    #[test]
    #[should_panic(expected = "every routed expert")]
    fn wrong_length_scores_panic() {
        MrsState::new(1, 4, 0.5, 2).update(0, &[0.5, 0.5]);
    }

    #[test]
    fn lookup_examples() {
        let mut c = cache(PolicyKind::Lru, 2, 4);
        assert!(!c.lookup(e(0)));
        c.insert(e(0)).unwrap();
        assert!(c.lookup(e(0)));
        assert_eq!(c.stats().hit_rate(), Some(0.5));
    }

    #[test]
    fn lru_evicts_least_recent() {
        let mut c = cache(PolicyKind::Lru, 2, 4);
        c.insert(e(0)).unwrap();
        c.insert(e(1)).unwrap();
        c.lookup(e(0));
        assert_eq!(c.insert(e(2)).unwrap(), Some(e(1)));
        assert_eq!(c.resident(), vec![e(0), e(2)]);
    }

    #[test]
    fn mrs_evicts_only_candidate() {
        let mut c = cache(PolicyKind::Mrs, 1, 4);
        c.mrs_mut().set_score(e(0), 0.1);
        c.insert(e(0)).unwrap();
        assert_eq!(c.insert(e(1)).unwrap(), Some(e(0)));
    }

    #[test]
    fn mrs_evicts_minimum_score() {
        let mut c = cache(PolicyKind::Mrs, 2, 4);
        c.mrs_mut().set_score(e(0), 0.5);
        c.mrs_mut().set_score(e(1), 0.2);
        c.insert(e(0)).unwrap();
        c.insert(e(1)).unwrap();
        assert_eq!(c.insert(e(2)).unwrap(), Some(e(1)));
    }

    #[test]
    fn all_pinned_fails() {
        let mut c = cache(PolicyKind::Mrs, 1, 4);
        c.insert(e(0)).unwrap();
        assert!(c.pin(e(0)));
        assert_eq!(c.insert(e(1)), Err(CacheError::AllPinned));
        assert!(c.contains(e(0)));
        c.unpin(e(0));
        assert_eq!(c.insert(e(1)).unwrap(), Some(e(0)));
    }

    #[test]
    fn double_insert_and_zero_capacity_fail() {
        let mut c = cache(PolicyKind::Lfu, 2, 4);
        c.insert(e(0)).unwrap();
        assert_eq!(c.insert(e(0)), Err(CacheError::AlreadyResident(e(0))));
        let mut z = cache(PolicyKind::Lfu, 0, 4);
        assert_eq!(z.insert(e(0)), Err(CacheError::ZeroCapacity));
    }

    #[test]
    fn hit_rate_cases() {
        let s = CacheStats {
            lookups: 100,
            hits: 30,
            ..Default::default()
        };
        assert_eq!(s.hit_rate(), Some(0.30));
        let all = CacheStats {
            lookups: 7,
            hits: 7,
            ..Default::default()
        };
        assert_eq!(all.hit_rate(), Some(1.0));
        assert_eq!(CacheStats::default().hit_rate(), None);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.as_str().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("fifo".parse::<PolicyKind>().is_err());
    }

    /// Textbook LRU: a recency queue, most recent at the back.
    fn reference_lru(accesses: &[usize], capacity: usize) -> Vec<bool> {
        let mut q: VecDeque<usize> = VecDeque::new();
        accesses
            .iter()
            .map(|&x| {
                if let Some(pos) = q.iter().position(|&y| y == x) {
                    q.remove(pos);
                    q.push_back(x);
                    return true;
                }
                if q.len() == capacity {
                    q.pop_front();
                }
                q.push_back(x);
                false
            })
            .collect()
    }

    /// Textbook perfect LFU: counts every access and keeps counts across
    /// evictions; evicts the lowest count, oldest access first.
    fn reference_lfu(accesses: &[usize], capacity: usize) -> Vec<bool> {
        let mut counts: HashMap<usize, u64> = HashMap::new();
        let mut cached: HashMap<usize, usize> = HashMap::new();
        accesses
            .iter()
            .enumerate()
            .map(|(t, &x)| {
                *counts.entry(x).or_default() += 1;
                if let Some(last) = cached.get_mut(&x) {
                    *last = t;
                    return true;
                }
                if cached.len() == capacity {
                    let (&victim, _) = cached
                        .iter()
                        .min_by_key(|(k, t)| (counts[*k], **t, **k))
                        .unwrap();
                    cached.remove(&victim);
                }
                cached.insert(x, t);
                false
            })
            .collect()
    }

    fn replay(policy: PolicyKind, accesses: &[usize], capacity: usize, n: usize) -> Vec<bool> {
        let mut c = cache(policy, capacity, n);
        accesses
            .iter()
            .map(|&x| {
                let hit = c.lookup(e(x));
                if !hit {
                    c.insert(e(x)).unwrap();
                }
                hit
            })
            .collect()
    }

    #[test]
    fn lru_and_lfu_match_reference_on_adversarial_cycles() {
        // A cyclic scan one larger than the cache defeats LRU completely.
        let scan: Vec<usize> = (0..50).map(|t| t % 4).collect();
        assert!(replay(PolicyKind::Lru, &scan, 3, 8).iter().all(|h| !h));
        assert_eq!(
            replay(PolicyKind::Lru, &scan, 3, 8),
            reference_lru(&scan, 3)
        );
        assert_eq!(
            replay(PolicyKind::Lfu, &scan, 3, 8),
            reference_lfu(&scan, 3)
        );
    }

    proptest! {
        #[test]
        fn lru_matches_reference(accesses in prop::collection::vec(0usize..8, 1..200), capacity in 1usize..6) {
            prop_assert_eq!(replay(PolicyKind::Lru, &accesses, capacity, 8), reference_lru(&accesses, capacity));
        }

        #[test]
        fn lfu_matches_reference(accesses in prop::collection::vec(0usize..8, 1..200), capacity in 1usize..6) {
            prop_assert_eq!(replay(PolicyKind::Lfu, &accesses, capacity, 8), reference_lfu(&accesses, capacity));
        }

        #[test]
        fn mrs_victim_has_minimum_unpinned_score(
            raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..30),
            inserts in prop::collection::vec(0usize..12, 1..40),
            pin_mask in 0u32..4096,
        ) {
            let mut c = CacheState::new(PolicyKind::Mrs, 4, MrsState::new(2, 6, 0.5, 4));
            for (t, scores) in raw.iter().enumerate() {
                let sum: f64 = scores.iter().sum::<f64>().max(1e-12);
                let probs: Vec<f64> = scores.iter().map(|s| s / sum).collect();
                c.mrs_mut().update(t % 2, &probs);
            }
            for &x in &inserts {
                let r = ExpertRef::new(x / 6, x % 6);
                if c.contains(r) {
                    continue;
                }
                for m in c.resident() {
                    if pin_mask & (1 << (m.layer as usize * 6 + m.expert as usize)) != 0 {
                        c.pin(m);
                    } else {
                        c.unpin(m);
                    }
                }
                let unpinned: Vec<ExpertRef> = c.resident().into_iter().filter(|&m| !c.is_pinned(m)).collect();
                let full = c.is_full();
                match c.insert(r) {
                    Ok(Some(victim)) => {
                        let min = unpinned.iter().map(|&m| c.mrs().score(m)).fold(f64::INFINITY, f64::min);
                        prop_assert!(!c.is_pinned(victim));
                        prop_assert_eq!(c.mrs().score(victim), min);
                    }
                    Ok(None) => prop_assert!(!full),
                    Err(err) => {
                        prop_assert_eq!(err, CacheError::AllPinned);
                        prop_assert!(unpinned.is_empty());
                    }
                }
                prop_assert!(c.len() <= c.capacity());
            }
            let stats = c.stats();
            prop_assert!(stats.evictions <= stats.inserts);
        }

        #[test]
        fn mrs_scores_stay_bounded(
            raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 1..50),
            alpha in 0.0f64..=1.0,
        ) {
            let mut s = MrsState::new(1, 5, alpha, 2);
            for scores in &raw {
                let sum: f64 = scores.iter().sum::<f64>().max(1e-12);
                let probs: Vec<f64> = scores.iter().map(|x| x / sum).collect();
                s.update(0, &probs);
                for &v in s.layer_scores(0) {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
