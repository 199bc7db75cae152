//! Named parameter storage shared by all trainable models.

use crate::mat::Mat;
use crate::rng::Prng;
use std::collections::HashMap;

/// Flat store of named parameter matrices. Models hold slot ids into the
/// store; training owns the single mutable reference while forward passes
/// read it concurrently.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
pub type Gradients = Vec<Mat>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Mat) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.values.push(value);
        id
    }

    /// Glorot-uniform initialized matrix.
    pub fn add_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut Prng) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform_in(-bound, bound)).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.add(name, Mat::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.values.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect()
    }

    pub fn total_parameters(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Replaces every value from another store with identical layout.
    pub fn load_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        self.values = other.values.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_resolve_names_and_values() {
        let mut store = ParamStore::new();
        let a = store.add("enc.w", Mat::zeros(2, 3));
        let b = store.add("enc.b", Mat::zeros(1, 3));
        assert_eq!(store.name(a), "enc.w");
        assert_eq!(store.id_of("enc.b"), Some(b));
        assert_eq!(store.total_parameters(), 9);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::new();
        store.add("p", Mat::zeros(1, 1));
        store.add("p", Mat::zeros(1, 1));
    }
}
