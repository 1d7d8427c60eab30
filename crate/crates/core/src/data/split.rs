//! Identity-disjoint train/test splits with a cross-camera query/gallery
//! protocol.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, TrackletRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Dataset,
    /// Test tracklets from each identity's lowest camera tag.
    pub query: Vec<TrackletRecord>,
    /// Test tracklets from the identity's other cameras.
    pub gallery: Vec<TrackletRecord>,
    /// Test identities dropped because only one camera saw them.
    pub excluded_identities: Vec<u32>,
}

/// Shuffles identities with `seed`, gives `round(train_fraction · n)` of
/// them to training and the rest to testing.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train_fraction {train_fraction} outside [0, 1]")));
    }
    let mut ids = dataset.identities();
    if ids.len() < 2 {
        return Err(Error::Data(format!("split needs at least 2 identities, found {}", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let train_ids: Vec<u32> = ids[..n_train].to_vec();

    let mut by_id: BTreeMap<u32, Vec<&TrackletRecord>> = BTreeMap::new();
    for t in &dataset.tracklets {
        by_id.entry(t.identity).or_default().push(t);
    }
    let mut out = Split::default();
    for (id, tracklets) in by_id {
        if train_ids.contains(&id) {
            out.train.tracklets.extend(tracklets.into_iter().cloned());
            continue;
        }
        let query_cam = tracklets.iter().map(|t| t.camera).min().expect("non-empty");
        if tracklets.iter().all(|t| t.camera == query_cam) {
            log::warn!("identity {id} appears under a single camera; left out of the test set");
            out.excluded_identities.push(id);
            continue;
        }
        for t in tracklets {
            if t.camera == query_cam {
                out.query.push(t.clone());
            } else {
                out.gallery.push(t.clone());
            }
        }
    }
    Ok(out)
}
