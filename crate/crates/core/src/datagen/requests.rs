//! Ranking requests for CTR training and evaluation.
//!
//! A request at session position `t` shows the clicked item plus hard
//! (same block) and easy (other block) negatives. Requests are not stored in
//! the dataset file: they are regenerated from the config seed and the
//! interaction's timestamp, which keeps them stable under cropping.

use std::ops::Range;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{context_features, GeneratorConfig, Session};
use crate::error::{Error, Result};

/// Width of the per-candidate cross features.
pub const CROSS_DIM: usize = 8;

/// Column ranges of the cross-feature groups.
pub const CROSS_GROUPS: [Range<usize>; 3] = [0..3, 3..5, 5..8];

/// Label-dependent mean shift per cross column, in units of `cross_signal`.
const CROSS_SHIFT: [f64; CROSS_DIM] = [1.0, 0.0, 0.5, 1.0, 0.0, 0.7, 0.0, 0.4];

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub item: u32,
    pub label: u8,
    /// Dense context features of the candidate pair, width `feature_dim`.
    pub features: Vec<f32>,
    /// Cross features, width [`CROSS_DIM`]; missing groups are zero.
    pub cross: Vec<f32>,
    pub group_present: [bool; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtrRequest {
    pub position: usize,
    pub query_topic: u32,
    pub query_text: u32,
    pub candidates: Vec<Candidate>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn request_seed(cfg: &GeneratorConfig, s: &Session, t: usize) -> u64 {
    splitmix(splitmix(cfg.rng_seed ^ s.timestamps[t]) ^ s.item_ids[t] as u64)
}

/// Builds the ranking request for position `t` (`1 <= t < valid_len`).
pub fn make_request(
    cfg: &GeneratorConfig,
    signatures: &[f32],
    s: &Session,
    t: usize,
) -> Result<CtrRequest> {
    if t == 0 || t >= s.valid_len {
        return Err(Error::OutOfRange {
            what: "request position",
            index: t,
            size: s.valid_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(request_seed(cfg, s, t));
    let m = cfg.items_per_topic;
    let k = cfg.num_topics;
    let pos_item = s.item_ids[t];
    let block = pos_item as usize / m;
    let gap = s.timestamps[t] - s.timestamps[t - 1];

    let mut items = vec![(pos_item, 1u8)];
    let hard = sample(&mut rng, m, cfg.hard_negatives + 1);
    items.extend(
        hard.iter()
            .map(|i| (block * m + i) as u32)
            .filter(|&i| i != pos_item)
            .take(cfg.hard_negatives)
            .map(|i| (i, 0)),
    );
    if cfg.easy_negatives > 0 {
        let easy = sample(&mut rng, (k - 1) * m, cfg.easy_negatives);
        items.extend(easy.iter().map(|i| {
            let (b, j) = (i / m, i % m);
            let b = if b >= block { b + 1 } else { b };
            ((b * m + j) as u32, 0)
        }));
    }
    items.shuffle(&mut rng);

    let candidates = items
        .into_iter()
        .map(|(item, label)| {
            let mut features = vec![0.0; cfg.feature_dim];
            let topic = item as usize / m;
            context_features(cfg, signatures, topic, t, gap, 0.0, &mut rng, &mut features);
            let mut cross: Vec<f32> = CROSS_SHIFT
                .iter()
                .map(|&shift| {
                    let z: f64 = rng.sample(StandardNormal);
                    (z + shift * cfg.cross_signal * label as f64) as f32
                })
                .collect();
            let mut group_present = [true; 3];
            for (g, range) in CROSS_GROUPS.iter().enumerate() {
                if rng.random::<f64>() < cfg.group_missing_prob {
                    group_present[g] = false;
                    cross[range.clone()].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            Candidate {
                item,
                label,
                features,
                cross,
                group_present,
            }
        })
        .collect();

    Ok(CtrRequest {
        position: t,
        query_topic: s.query_topic_ids[t],
        query_text: s.query_text_ids[t],
        candidates,
    })
}

/// Request positions of a session: every `t >= 1` among the last `tail`
/// valid positions (0 = all), thinned to at most `max_count` (0 = all) by a
/// hash of the interaction timestamp. Returned in ascending order.
pub fn request_positions(s: &Session, tail: usize, max_count: usize, seed: u64) -> Vec<usize> {
    let start = if tail == 0 {
        1
    } else {
        s.valid_len.saturating_sub(tail).max(1)
    };
    let mut pos: Vec<usize> = (start..s.valid_len).collect();
    if max_count > 0 && pos.len() > max_count {
        pos.sort_by_key(|&t| splitmix(seed ^ s.timestamps[t]));
        pos.truncate(max_count);
        pos.sort_unstable();
    }
    pos
}
