//! Differentiable neural dictionary: episode-scoped append-only key-value
//! memory with cosine-similarity top-k softmax-weighted reads.
//!
//! Entries are tape handles, so a read is differentiable with respect to the
//! query, the stored keys, and the stored values — the path that trains the
//! encoders through the prediction loss. A store never outlives its
//! episode's tape.

use crate::numerics::tape::{Tape, Var};

pub const DEFAULT_TOP_K: usize = 5;
/// Softmax sharpness: similarities are scaled by 1/κ before the softmax.
/// Raw cosines span ≤ 2, so κ = 1 (the literal reading) is nearly uniform
/// over the top 5; the default sharpens reads enough to act as memory.
pub const DEFAULT_KAPPA: f64 = 0.1;

pub struct DndStore {
    key_dim: usize,
    value_dim: usize,
    top_k: usize,
    kappa: f64,
    entries: Vec<(Var, Var)>,
}

impl DndStore {
    pub fn new(key_dim: usize, value_dim: usize, top_k: usize, kappa: f64) -> DndStore {
        assert!(top_k > 0, "top_k must be positive");
        assert!(kappa > 0.0, "kappa must be positive");
        DndStore { key_dim, value_dim, top_k, kappa, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append an entry. Duplicates are kept; earlier entries are untouched.
    pub fn write(&mut self, tape: &Tape, key: Var, value: Var) {
        assert_eq!(tape.value(key).len(), self.key_dim, "key dimension mismatch");
        assert_eq!(tape.value(value).len(), self.value_dim, "value dimension mismatch");
        self.entries.push((key, value));
    }

    /// Empty the store (episode boundary). The tape itself is untouched.
    pub fn reset(&mut self) {
        self.entries.clear();
    }

    /// Softmax-weighted sum of the values whose keys are most similar to the
    /// query: similarities to every key, top-k selection (ties favor the
    /// earlier entry), weights = softmax(similarities·(1/κ)) over the
    /// selected entries, output = Σ wᵢ·valueᵢ in selection order.
    pub fn read(&self, tape: &mut Tape, query: Var) -> Var {
        assert!(!self.entries.is_empty(), "read from empty store");
        assert_eq!(tape.value(query).len(), self.key_dim, "query dimension mismatch");
        let sims: Vec<Var> =
            self.entries.iter().map(|&(k, _)| tape.cosine(query, k)).collect();
        let sim_values: Vec<f64> = sims.iter().map(|&s| tape.item(s)).collect();
        let selected = top_k_indices(&sim_values, self.top_k);
        let sel_sims: Vec<Var> = selected.iter().map(|&i| sims[i]).collect();
        let sel_values: Vec<Var> = selected.iter().map(|&i| self.entries[i].1).collect();
        let sim_vec = tape.concat(&sel_sims);
        let sharpened = tape.scale(sim_vec, 1.0 / self.kappa);
        let weights = tape.softmax(sharpened);
        tape.mix(weights, &sel_values)
    }
}

/// Indices of the k largest entries, descending; ties keep insertion order.
pub fn top_k_indices(sims: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    // Stable sort: equal similarities stay in ascending-index order.
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    idx.truncate(k);
    idx
}
