use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
///
/// Order is insertion order and is part of the contract: optimizer state,
/// checkpoints and finite-difference sweeps all walk parameters in it.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CoreError::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    /// Kaiming-style uniform init scaled by fan-in, matching the init used
    /// for every linear layer in the model.
    pub fn add_linear_init(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| CoreError::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(CoreError::invalid(format!("unknown parameter {name}"))),
        }
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor) {
        (&self.names[i], &self.values[i])
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Merge another set under a name prefix.
    pub fn absorb(&mut self, prefix: &str, other: ParamSet) -> Result<()> {
        for (name, value) in other.names.into_iter().zip(other.values) {
            self.add(format!("{prefix}.{name}"), value)?;
        }
        Ok(())
    }

    /// FNV-1a over the exact bit patterns of every value, in parameter order.
    /// Bit-identical parameters give identical checksums.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for (name, value) in self.iter() {
            eat(name.as_bytes());
            for v in value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::zeros(1, 1)).unwrap();
        assert!(p.add("w", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn checksum_tracks_bit_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamSet::new();
        p.add_linear_init("w", 3, 4, 3, &mut rng).unwrap();
        let before = p.checksum();
        assert_eq!(before, p.checksum());
        let w = p.get_mut("w").unwrap();
        let old = w.at(0, 0);
        w.set(0, 0, f64::from_bits(old.to_bits() ^ 1));
        assert_ne!(before, p.checksum());
    }
}
