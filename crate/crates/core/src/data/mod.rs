//! Image-class datasets: the Omniglot directory loader and a seeded
//! synthetic glyph generator used when no download is available.

mod omniglot;
mod synth;

pub use omniglot::{area_resize, load_omniglot, load_omniglot_image};
pub use synth::{synth_glyphs, GlyphGenConfig};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, Tensor};
use crate::rng::stream;

pub const IMAGE_SIDE: usize = ModelConfig::IMAGE_SIDE;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageClass {
    pub id: String,
    /// Each image is `(1, 28, 28)` with values in `[0, 1]`, ink = 1.
    pub images: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    MetaTrain,
    MetaTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    classes: Vec<ImageClass>,
    meta_train: Vec<usize>,
    meta_test: Vec<usize>,
}

impl Dataset {
    /// All classes start in the meta-train pool.
    pub fn new(classes: Vec<ImageClass>) -> Result<Self> {
        for c in &classes {
            if let Some(img) = c.images.iter().find(|t| t.shape() != [1, IMAGE_SIDE, IMAGE_SIDE]) {
                return Err(Error::input(format!("class {} has an image of shape {:?}", c.id, img.shape())));
            }
        }
        let meta_train = (0..classes.len()).collect();
        Ok(Self {
            classes,
            meta_train,
            meta_test: Vec::new(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, idx: usize) -> &ImageClass {
        &self.classes[idx]
    }

    pub fn classes(&self) -> &[ImageClass] {
        &self.classes
    }

    pub fn pool(&self, pool: Pool) -> &[usize] {
        match pool {
            Pool::MetaTrain => &self.meta_train,
            Pool::MetaTest => &self.meta_test,
        }
    }

    pub fn min_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).min().unwrap_or(0)
    }

    /// Seeded class-level split; `meta_test_fraction` of the classes go to
    /// the meta-test pool.
    pub fn split_pools(mut self, meta_test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&meta_test_fraction) {
            return Err(Error::config(format!(
                "meta_test_fraction must lie in [0, 1), got {meta_test_fraction}"
            )));
        }
        let n = self.classes.len();
        let n_test = (n as f64 * meta_test_fraction).round() as usize;
        if meta_test_fraction > 0.0 && (n_test == 0 || n_test == n) {
            return Err(Error::config(format!(
                "{n} classes are too few for a meta-test fraction of {meta_test_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, &[0x9001]));
        let (test, train) = order.split_at(n_test);
        self.meta_test = test.to_vec();
        self.meta_test.sort_unstable();
        self.meta_train = train.to_vec();
        self.meta_train.sort_unstable();
        Ok(self)
    }
}

/// Free-function form of [`Dataset::split_pools`].
pub fn split_pools(dataset: Dataset, meta_test_fraction: f64, seed: u64) -> Result<Dataset> {
    dataset.split_pools(meta_test_fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        synth_glyphs(&GlyphGenConfig {
            num_classes: n,
            images_per_class: 2,
            ..GlyphGenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let d = tiny(100).split_pools(0.2, 3).unwrap();
        assert_eq!(d.pool(Pool::MetaTrain).len(), 80);
        assert_eq!(d.pool(Pool::MetaTest).len(), 20);
        for seed in 0..20 {
            let d = tiny(30).split_pools(0.3, seed).unwrap();
            assert!(d.pool(Pool::MetaTest).iter().all(|c| !d.pool(Pool::MetaTrain).contains(c)));
            assert_eq!(d.pool(Pool::MetaTest).len() + d.pool(Pool::MetaTrain).len(), 30);
        }
    }

    #[test]
    fn zero_fraction_keeps_everything_for_training() {
        let d = tiny(7).split_pools(0.0, 1).unwrap();
        assert_eq!(d.pool(Pool::MetaTrain).len(), 7);
        assert!(d.pool(Pool::MetaTest).is_empty());
    }

    #[test]
    fn too_few_classes_rejected() {
        assert!(tiny(2).split_pools(0.1, 0).is_err());
        assert!(tiny(5).split_pools(1.0, 0).is_err());
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let c = ImageClass {
            id: "x".into(),
            images: vec![Tensor::zeros(&[1, 5, 5])],
        };
        assert!(Dataset::new(vec![c]).is_err());
    }
}
