use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Real;

/// Location of one parameter tensor inside the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn get<'a, T>(&self, buf: &'a [T]) -> &'a [T] {
        &buf[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn get_mut<'a, T>(&self, buf: &'a mut [T]) -> &'a mut [T] {
        &mut buf[self.offset..self.offset + self.len]
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
    /// `[out, 2 * out]` projection weighting both halves by 0.5.
    Average { out_channels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub init: Init,
}

/// Names, shapes and initializers of every parameter tensor of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.total,
            len,
        };
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            len,
            init,
        });
        self.total += len;
        slot
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Deterministic initial values drawn in entry order.
    pub fn initialize<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            match e.init {
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("valid std");
                    out.extend((0..e.len).map(|_| T::of(dist.sample(&mut rng))));
                }
                Init::Zeros => out.extend((0..e.len).map(|_| T::zero())),
                Init::Ones => out.extend((0..e.len).map(|_| T::one())),
                Init::Average { out_channels } => {
                    let cols = 2 * out_channels;
                    out.extend((0..e.len).map(|i| {
                        let (o, j) = (i / cols, i % cols);
                        if j == o || j == o + out_channels {
                            T::of(0.5)
                        } else {
                            T::zero()
                        }
                    }));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_and_average_init() {
        let mut l = ParamLayout::new();
        let a = l.push("a", &[2, 4], Init::Average { out_channels: 2 });
        let b = l.push("b", &[3], Init::Ones);
        assert_eq!(a, Slot { offset: 0, len: 8 });
        assert_eq!(b, Slot { offset: 8, len: 3 });
        let p: Vec<f64> = l.initialize(0);
        assert_eq!(&p[..8], &[0.5, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.5]);
        assert_eq!(b.get(&p), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn init_is_seeded() {
        let mut l = ParamLayout::new();
        l.push("w", &[64], Init::HeNormal { fan_in: 9 });
        let x: Vec<f32> = l.initialize(5);
        assert_eq!(x, l.initialize::<f32>(5));
        assert_ne!(x, l.initialize::<f32>(6));
    }
}
