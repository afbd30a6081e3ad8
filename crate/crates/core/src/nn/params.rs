use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LayerSpec, ModelConfig};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Learnable tensors grouped per layer, aligned with `ModelConfig::layers`.
/// Layers without parameters hold an empty group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    layers: Vec<Vec<Tensor<T>>>,
}

/// Model parameters.
pub type Parameters<T> = ParamSet<T>;
/// Gradients share the parameter layout exactly.
pub type Gradients<T> = ParamSet<T>;

impl<T: Real> ParamSet<T> {
    pub fn from_layers(layers: Vec<Vec<Tensor<T>>>) -> Self {
        Self { layers }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, unit norm scale and
    /// zero shift, drawn from a ChaCha stream seeded with `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let shapes = cfg.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for (layer, input) in cfg.layers.iter().zip(&shapes) {
            let group = match layer {
                LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. } => {
                    let ps = layer.param_shapes(input);
                    let fan_in: usize = ps[0][1..].iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let w = Tensor::from_fn(&ps[0], |_| {
                        T::from_f64(rng.gen_range(-bound..bound))
                    });
                    vec![w, Tensor::zeros(&ps[1])]
                }
                LayerSpec::Norm => {
                    let ps = layer.param_shapes(input);
                    vec![Tensor::filled(&ps[0], T::one()), Tensor::zeros(&ps[1])]
                }
                _ => Vec::new(),
            };
            layers.push(group);
        }
        Ok(Self { layers })
    }

    /// All-zero set with the layout implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let shapes = cfg.shapes()?;
        Ok(Self {
            layers: cfg
                .layers
                .iter()
                .zip(&shapes)
                .map(|(l, s)| l.param_shapes(s).iter().map(|ps| Tensor::zeros(ps)).collect())
                .collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|g| g.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &[Tensor<T>] {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut [Tensor<T>] {
        &mut self.layers[i]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flatten()
    }

    /// Stable names of the form `<layer>.<kind>.<role>`.
    pub fn names(&self, cfg: &ModelConfig) -> Vec<String> {
        let mut names = Vec::new();
        for (i, (layer, group)) in cfg.layers.iter().zip(&self.layers).enumerate() {
            for (role, _) in layer.param_names().iter().zip(group) {
                names.push(format!("{i}.{}.{role}", layer.kind_name()));
            }
        }
        names
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.count());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites all values from a flat vector in `flatten` order.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::input(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Reads or writes the scalar at flat position `index`.
    pub fn get_flat(&self, mut index: usize) -> Option<T> {
        for t in self.tensors() {
            if index < t.len() {
                return Some(t.data()[index]);
            }
            index -= t.len();
        }
        None
    }

    pub fn set_flat(&mut self, mut index: usize, value: T) -> bool {
        for t in self.tensors_mut() {
            if index < t.len() {
                t.data_mut()[index] = value;
                return true;
            }
            index -= t.len();
        }
        false
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
            })
    }

    pub fn ensure_layout(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Invariant(format!("{context}: parameter layouts differ")))
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.ensure_layout(other, "axpy")?;
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for t in self.tensors_mut() {
            for x in t.data_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in self.tensors() {
            t.hash_into(&mut h);
        }
        h.finalize()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|g| g.iter().map(Tensor::cast).collect())
                .collect(),
        }
    }

    /// Splits into layers `[0, at)` and `[at, len)`.
    pub fn split_at(&self, at: usize) -> (Self, Self) {
        (
            Self {
                layers: self.layers[..at].to_vec(),
            },
            Self {
                layers: self.layers[at..].to_vec(),
            },
        )
    }

    pub fn concat(&self, tail: &Self) -> Self {
        let mut layers = self.layers.clone();
        layers.extend(tail.layers.iter().cloned());
        Self { layers }
    }

    pub fn into_layers(self) -> Vec<Vec<Tensor<T>>> {
        self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_reproducible_and_shaped() {
        let cfg = ModelConfig::default_cnn(5);
        let a = Parameters::<f32>::init(&cfg, 7).unwrap();
        let b = Parameters::<f32>::init(&cfg, 7).unwrap();
        let c = Parameters::<f32>::init(&cfg, 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.layer(0)[0].shape(), &[64, 1, 3, 3]);
        assert_eq!(a.layer(13)[0].shape(), &[64, 256]);
        assert_eq!(a.layer(17)[0].shape(), &[5, 64]);
        assert!(a.layer(0)[1].data().iter().all(|&v| v == 0.0));
        assert!(a.layer(1)[0].data().iter().all(|&v| v == 1.0));
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(a.layer(0)[0].data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn flat_roundtrip_and_names() {
        let cfg = ModelConfig::default_cnn(3);
        let p = Parameters::<f64>::init(&cfg, 1).unwrap();
        let mut q = p.zeros_like();
        q.assign_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        let names = p.names(&cfg);
        assert_eq!(names.len(), p.tensors().count());
        assert_eq!(names[0], "0.conv.weight");
        assert_eq!(names[2], "1.norm.scale");
    }

    #[test]
    fn split_concat_identity() {
        let cfg = ModelConfig::default_cnn(3);
        let p = Parameters::<f32>::init(&cfg, 3).unwrap();
        let (a, b) = p.split_at(8);
        assert_eq!(a.concat(&b), p);
    }
}
