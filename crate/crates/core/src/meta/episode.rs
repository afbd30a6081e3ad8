use rand::seq::index::sample;
use rand::Rng;

use crate::data::{Dataset, Pool, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// A `Y`-way problem over dataset class indices; position in `classes` is
/// the episode label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T = f32> {
    pub task: Task,
    /// `(K·Y, 1, 28, 28)`, class-major.
    pub support_x: Tensor<T>,
    pub support_y: Vec<usize>,
    /// `(Q·Y, 1, 28, 28)`, class-major.
    pub query_x: Tensor<T>,
    pub query_y: Vec<usize>,
}

impl<T: Real> Episode<T> {
    pub fn cast<U: Real>(&self) -> Episode<U> {
        Episode {
            task: self.task.clone(),
            support_x: self.support_x.cast(),
            support_y: self.support_y.clone(),
            query_x: self.query_x.cast(),
            query_y: self.query_y.clone(),
        }
    }
}

/// Draws `ways` distinct classes from `pool`.
pub fn sample_task<R: Rng>(dataset: &Dataset, pool: Pool, ways: usize, id: usize, rng: &mut R) -> Result<Task> {
    let ids = dataset.pool(pool);
    if ids.len() < ways {
        return Err(Error::config(format!(
            "{pool:?} pool has {} classes, a task needs {ways}",
            ids.len()
        )));
    }
    Ok(Task {
        id,
        classes: sample(rng, ids.len(), ways).into_iter().map(|i| ids[i]).collect(),
    })
}

fn batch(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    if items.is_empty() {
        return Ok(Tensor::zeros(&[0, 1, IMAGE_SIDE, IMAGE_SIDE]));
    }
    Tensor::stack(items)
}

/// Samples `shots + queries` distinct images per class without replacement;
/// the first `shots` form the support set.
pub fn sample_episode<R: Rng>(dataset: &Dataset, task: &Task, shots: usize, queries: usize, rng: &mut R) -> Result<Episode> {
    let need = shots + queries;
    let mut support = Vec::with_capacity(shots * task.classes.len());
    let mut query = Vec::with_capacity(queries * task.classes.len());
    let (mut support_y, mut query_y) = (Vec::new(), Vec::new());
    for (label, &c) in task.classes.iter().enumerate() {
        let class = dataset.class(c);
        if class.images.len() < need {
            return Err(Error::config(format!(
                "class {} has {} images, episode needs {need}",
                class.id,
                class.images.len()
            )));
        }
        let picks = sample(rng, class.images.len(), need).into_vec();
        for (j, &i) in picks.iter().enumerate() {
            if j < shots {
                support.push(&class.images[i]);
                support_y.push(label);
            } else {
                query.push(&class.images[i]);
                query_y.push(label);
            }
        }
    }
    Ok(Episode {
        task: task.clone(),
        support_x: batch(&support)?,
        support_y,
        query_x: batch(&query)?,
        query_y,
    })
}
