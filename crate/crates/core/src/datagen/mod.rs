//! Synthetic query-driven session generator.
//!
//! Topics own disjoint item blocks. A Markov chain over topics stays with
//! probability `1 - p` and otherwise jumps to a uniformly chosen other
//! topic, so the stationary topic distribution is uniform and
//! `H(item | query) = H(w)`, `H(item) = ln K + H(w)`.
//!
//! Inside a topic an interaction either re-clicks an earlier satisfied item
//! of the same topic (recency weighted) or draws fresh from `w`. The
//! re-click choice never looks at item identities, so every item is still
//! marginally distributed as `w` given its topic.

mod io;
mod requests;

pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset};
pub use requests::{make_request, request_positions, Candidate, CtrRequest, CROSS_DIM, CROSS_GROUPS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of fixed leading feature columns before the topic signature.
pub const BASE_FEATURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// K.
    pub num_topics: usize,
    /// M; the vocabulary is `K * M`.
    pub items_per_topic: usize,
    /// Per-step probability of jumping to another topic.
    pub query_switch_prob: f64,
    /// Within-topic popularity `w_i ~ (i + 1)^-s`; 0 gives uniform.
    pub zipf_exponent: f64,
    /// L.
    pub session_len: usize,
    /// Lower bound of the per-session valid length.
    pub min_valid_len: usize,
    pub num_sessions: usize,
    /// d_f; at least 4.
    pub feature_dim: usize,
    pub feature_noise_std: f64,
    /// Query text ids per topic (`topic * query_variants + variant`).
    pub query_variants: usize,
    /// Probability of re-clicking an earlier satisfied item of the topic.
    pub repeat_prob: f64,
    /// Recency weight `decay^age` for re-click candidates.
    pub repeat_decay: f64,
    /// Probability an interaction is satisfied (long dwell).
    pub satisfied_prob: f64,
    /// Hard negatives per ranking request (same block as the click).
    pub hard_negatives: usize,
    /// Easy negatives per ranking request (other blocks).
    pub easy_negatives: usize,
    /// Mean shift of the label-correlated cross features.
    pub cross_signal: f64,
    /// Probability that a cross-feature group is missing for a candidate.
    pub group_missing_prob: f64,
    pub rng_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_topics: 8,
            items_per_topic: 16,
            query_switch_prob: 0.5,
            zipf_exponent: 0.0,
            session_len: 64,
            min_valid_len: 48,
            num_sessions: 2000,
            feature_dim: 16,
            feature_noise_std: 0.1,
            query_variants: 2,
            repeat_prob: 0.5,
            repeat_decay: 0.98,
            satisfied_prob: 0.5,
            hard_negatives: 4,
            easy_negatives: 5,
            cross_signal: 0.5,
            group_missing_prob: 0.0,
            rng_seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn vocab_size(&self) -> usize {
        self.num_topics * self.items_per_topic
    }

    pub fn query_vocab_size(&self) -> usize {
        self.num_topics * self.query_variants
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(format!("generator: {m}")));
        if self.num_topics == 0 || self.items_per_topic == 0 {
            return fail("num_topics and items_per_topic must be >= 1".into());
        }
        if self.session_len < 2 {
            return fail(format!("session_len {} < 2", self.session_len));
        }
        if self.min_valid_len < 2 || self.min_valid_len > self.session_len {
            return fail(format!(
                "min_valid_len {} not in [2, {}]",
                self.min_valid_len, self.session_len
            ));
        }
        for (name, v) in [
            ("query_switch_prob", self.query_switch_prob),
            ("repeat_prob", self.repeat_prob),
            ("satisfied_prob", self.satisfied_prob),
            ("group_missing_prob", self.group_missing_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} not in [0, 1]"));
            }
        }
        if !(self.repeat_decay > 0.0 && self.repeat_decay <= 1.0) {
            return fail(format!("repeat_decay {} not in (0, 1]", self.repeat_decay));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return fail(format!("zipf_exponent {} must be >= 0", self.zipf_exponent));
        }
        if self.feature_noise_std < 0.0 || self.cross_signal < 0.0 {
            return fail("noise and signal scales must be >= 0".into());
        }
        if self.feature_dim < BASE_FEATURES + 1 {
            return fail(format!("feature_dim {} < {}", self.feature_dim, BASE_FEATURES + 1));
        }
        if self.query_variants == 0 {
            return fail("query_variants must be >= 1".into());
        }
        if self.hard_negatives >= self.items_per_topic {
            return fail(format!(
                "hard_negatives {} needs more than that many items per topic",
                self.hard_negatives
            ));
        }
        if self.easy_negatives > (self.num_topics - 1) * self.items_per_topic {
            return fail(format!(
                "easy_negatives {} exceeds the {} items outside one block",
                self.easy_negatives,
                (self.num_topics - 1) * self.items_per_topic
            ));
        }
        let vocab = self.vocab_size() as u64;
        if vocab > u32::MAX as u64 || self.query_vocab_size() as u64 > u32::MAX as u64 {
            return fail("vocabulary exceeds u32 ids".into());
        }
        Ok(())
    }

    /// Within-topic item distribution `w`.
    pub fn within_topic_dist(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.items_per_topic)
            .map(|i| ((i + 1) as f64).powf(-self.zipf_exponent))
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / z).collect()
    }
}

/// One user's chronologically ordered interactions. Positions at or after
/// `valid_len` are zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub query_topic_ids: Vec<u32>,
    pub query_text_ids: Vec<u32>,
    pub item_ids: Vec<u32>,
    pub timestamps: Vec<u64>,
    pub click_labels: Vec<u8>,
    /// Row-major `[L, feature_dim]`.
    pub features: Vec<f32>,
    pub feature_dim: usize,
    pub valid_len: usize,
}

impl Session {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn feature_row(&self, t: usize) -> &[f32] {
        &self.features[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    /// Keeps the last `len` valid interactions, re-padded to exactly `len`
    /// positions.
    pub fn crop_last(&self, len: usize) -> Session {
        let start = self.valid_len.saturating_sub(len);
        let keep = self.valid_len - start;
        let d = self.feature_dim;
        let pad = |v: &[u32]| {
            let mut out = v[start..start + keep].to_vec();
            out.resize(len, 0);
            out
        };
        let mut timestamps = self.timestamps[start..start + keep].to_vec();
        timestamps.resize(len, 0);
        let mut click_labels = self.click_labels[start..start + keep].to_vec();
        click_labels.resize(len, 0);
        let mut features = self.features[start * d..(start + keep) * d].to_vec();
        features.resize(len * d, 0.0);
        Session {
            query_topic_ids: pad(&self.query_topic_ids),
            query_text_ids: pad(&self.query_text_ids),
            item_ids: pad(&self.item_ids),
            timestamps,
            click_labels,
            features,
            feature_dim: d,
            valid_len: keep,
        }
    }
}

/// Entropies (nats) of the generator's stationary item distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OracleStats {
    pub h_item_given_query: f64,
    pub h_item_marginal: f64,
    pub mutual_info: f64,
}

fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter()
        .filter(|&x| x > 0.0)
        .map(|x| -x * x.ln())
        .sum()
}

pub fn oracle_entropies(cfg: &GeneratorConfig) -> OracleStats {
    let w = cfg.within_topic_dist();
    let h_cond = entropy(w.iter().copied());
    let k = cfg.num_topics as f64;
    let h_marg = entropy((0..cfg.num_topics).flat_map(|_| w.iter().map(move |&x| x / k)));
    OracleStats {
        h_item_given_query: h_cond,
        h_item_marginal: h_marg,
        mutual_info: (h_marg - h_cond).max(0.0),
    }
}

/// Fixed per-topic feature signature, `[K, feature_dim - 3]`, drawn from the
/// config seed so every session of a dataset shares it.
pub fn topic_signatures(cfg: &GeneratorConfig) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let width = cfg.feature_dim - BASE_FEATURES;
    (0..cfg.num_topics * width)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}

/// Context features of an interaction or candidate.
pub(crate) fn context_features(
    cfg: &GeneratorConfig,
    signatures: &[f32],
    topic: usize,
    position: usize,
    gap: u64,
    dwell: f64,
    rng: &mut ChaCha8Rng,
    out: &mut [f32],
) {
    let width = cfg.feature_dim - BASE_FEATURES;
    let noise = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal) * cfg.feature_noise_std;
    out[0] = (position as f64 / cfg.session_len as f64) as f32;
    out[1] = ((1.0 + gap as f64).ln() / 5.0) as f32;
    out[2] = if dwell == 0.0 {
        0.0
    } else {
        (dwell + noise(rng)) as f32
    };
    let sig = &signatures[topic * width..(topic + 1) * width];
    for (o, &s) in out[BASE_FEATURES..].iter_mut().zip(sig) {
        *o = (s as f64 + noise(rng)) as f32;
    }
}

fn sample_categorical(w: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

/// Generates one session. Deterministic in `(cfg, seed)`.
pub fn generate_session(cfg: &GeneratorConfig, seed: u64) -> Session {
    let sigs = topic_signatures(cfg);
    generate_with(cfg, &cfg.within_topic_dist(), &sigs, seed)
}

fn generate_with(cfg: &GeneratorConfig, w: &[f64], sigs: &[f32], seed: u64) -> Session {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = cfg.session_len;
    let d = cfg.feature_dim;
    let k = cfg.num_topics;
    let m = cfg.items_per_topic;
    let valid_len = rng.random_range(cfg.min_valid_len..=l);
    let gap_dist = Exp::new(1.0 / 60.0).unwrap();

    let mut s = Session {
        query_topic_ids: vec![0; l],
        query_text_ids: vec![0; l],
        item_ids: vec![0; l],
        timestamps: vec![0; l],
        click_labels: vec![0; l],
        features: vec![0.0; l * d],
        feature_dim: d,
        valid_len,
    };
    // (position, item) of satisfied clicks, per topic.
    let mut satisfied: Vec<Vec<(usize, u32)>> = vec![Vec::new(); k];
    let mut topic = rng.random_range(0..k);
    let mut ts: u64 = 1_000_000 + rng.random_range(0..1_000_000u64);
    let mut weights = Vec::new();

    for t in 0..valid_len {
        if t > 0 && k > 1 && rng.random::<f64>() < cfg.query_switch_prob {
            let jump = rng.random_range(0..k - 1);
            topic = if jump >= topic { jump + 1 } else { jump };
        }
        let gap = if t == 0 {
            0
        } else {
            1 + gap_dist.sample(&mut rng) as u64
        };
        ts += gap;

        let pool = &satisfied[topic];
        let item = if !pool.is_empty() && rng.random::<f64>() < cfg.repeat_prob {
            weights.clear();
            weights.extend(pool.iter().map(|&(pos, _)| cfg.repeat_decay.powi((t - pos) as i32)));
            let z: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|x| *x /= z);
            pool[sample_categorical(&weights, &mut rng)].1
        } else {
            (topic * m + sample_categorical(w, &mut rng)) as u32
        };
        let is_satisfied = rng.random::<f64>() < cfg.satisfied_prob;
        if is_satisfied {
            satisfied[topic].push((t, item));
        }

        s.query_topic_ids[t] = topic as u32;
        s.query_text_ids[t] = (topic * cfg.query_variants + rng.random_range(0..cfg.query_variants)) as u32;
        s.item_ids[t] = item;
        s.timestamps[t] = ts;
        s.click_labels[t] = 1;
        let dwell = if is_satisfied { 1.0 } else { -1.0 };
        context_features(cfg, sigs, topic, t, gap, dwell, &mut rng, &mut s.features[t * d..(t + 1) * d]);
    }
    s
}

/// Generates `cfg.num_sessions` sessions; session `i` uses seed
/// `rng_seed + i`.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<Session>> {
    cfg.validate()?;
    let w = cfg.within_topic_dist();
    let sigs = topic_signatures(cfg);
    Ok((0..cfg.num_sessions)
        .map(|i| generate_with(cfg, &w, &sigs, cfg.rng_seed.wrapping_add(i as u64)))
        .collect())
}

/// Item block owning `item`.
pub fn topic_of_item(cfg: &GeneratorConfig, item: u32) -> usize {
    item as usize / cfg.items_per_topic
}
