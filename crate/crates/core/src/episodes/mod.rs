//! Datasets with disjoint class splits, N-way K-shot episode sampling, and
//! rotation augmentation.

mod augment;
mod dataset;
mod loader;
mod synthetic;

pub use augment::{rotate, AugmentationSpec, Rotation};
pub use dataset::{ChannelStats, ClassRecord, Dataset, Image, Split};
pub use loader::{
    encode_png, format_manifest, is_png, load_dataset, load_image, parse_manifest, write_dataset,
    MANIFEST_NAME,
};
pub use synthetic::generate_synthetic;

use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct EpisodeItem {
    pub image: Arc<Tensor>,
    /// Episode-local class index in `0..n_way`.
    pub label: usize,
    pub image_id: u64,
}

/// One N-way K-shot task. Support and query items are grouped by label in
/// ascending order.
#[derive(Clone, Debug)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// Dataset class name behind each episode label.
    pub class_names: Vec<String>,
}

impl Episode {
    /// Support items of class `label`.
    pub fn shots(&self, label: usize) -> &[EpisodeItem] {
        &self.support[label * self.k_shot..(label + 1) * self.k_shot]
    }
}

/// Samples `n_way` classes without replacement, then `k_shot + q_queries`
/// distinct images of each. The first `k_shot` become support, the rest
/// queries. Deterministic in `seed`.
pub fn sample_episode(
    dataset: &Dataset,
    n_way: usize,
    k_shot: usize,
    q_queries: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || q_queries == 0 {
        return Err(Error::Config(format!(
            "episode shape {n_way}-way {k_shot}-shot with {q_queries} queries has an empty part"
        )));
    }
    let classes = dataset.classes();
    if classes.len() < n_way {
        return Err(Error::Data(format!(
            "{n_way}-way episodes need {n_way} classes, split has {}",
            classes.len()
        )));
    }
    let need = k_shot + q_queries;
    if let Some(short) = classes.iter().find(|c| c.images.len() < need) {
        return Err(Error::Data(format!(
            "class `{}` has {} images, episodes need {need} ({k_shot} support + {q_queries} query)",
            short.name,
            short.images.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, classes.len(), n_way);
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_queries);
    let mut class_names = Vec::with_capacity(n_way);
    for (label, ci) in chosen.iter().enumerate() {
        let class = &classes[ci];
        class_names.push(class.name.clone());
        let picks = index::sample(&mut rng, class.images.len(), need);
        for (slot, ii) in picks.iter().enumerate() {
            let img = &class.images[ii];
            let item = EpisodeItem {
                image: Arc::clone(&img.pixels),
                label,
                image_id: img.id,
            };
            if slot < k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        q_queries,
        support,
        query,
        class_names,
    })
}

#[cfg(test)]
mod tests;
