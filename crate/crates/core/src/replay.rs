//! Replay buffer: whole-episode storage with FIFO eviction and fixed-length
//! subsequence sampling for training and validation.

use crate::rng::substream;
use crate::types::{read_episodes, write_episodes, Action, Episode, State12, TypeError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("episode must contain at least 2 states (1 transition)")]
    TooShort,
    #[error(transparent)]
    Invalid(#[from] TypeError),
    #[error("no stored episode is long enough: need {required} transitions, longest eligible has {available}")]
    NoEligibleEpisode { required: usize, available: usize },
    #[error("buffer i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// An episode plus the stable id it received on insertion.
#[derive(Debug, Clone)]
pub struct StoredEpisode {
    pub id: u64,
    pub episode: Episode,
}

/// Fixed-capacity store of whole episodes. Capacity is counted in transitions
/// and eviction removes whole episodes, oldest first, so sampled windows never
/// straddle an eviction boundary.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    episodes: VecDeque<StoredEpisode>,
    capacity_steps: usize,
    total_steps: usize,
    next_id: u64,
}

/// One training/validation item: a rollout start, the action sequence to
/// replay, the ground-truth states it produced, and the preceding history
/// window for recurrent hidden-state initialization.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub episode_id: u64,
    /// State index within the episode where the rollout starts.
    pub start: usize,
    pub init_state: State12,
    pub actions: Vec<Action>,
    /// `truth[k]` is the episode state at `start + k + 1`.
    pub truth: Vec<State12>,
    /// Oldest-first history of the `history` steps before `start`; entries
    /// before the episode start are zeroed with `valid = false`.
    pub history: Vec<HistoryStep>,
}

#[derive(Debug, Clone, Copy)]
pub struct HistoryStep {
    pub state: State12,
    pub action: Action,
    pub valid: bool,
}

impl ReplayBuffer {
    pub fn new(capacity_steps: usize) -> Self {
        assert!(capacity_steps > 0, "capacity must be positive");
        Self {
            episodes: VecDeque::new(),
            capacity_steps,
            total_steps: 0,
            next_id: 0,
        }
    }

    pub fn len_steps(&self) -> usize {
        self.total_steps
    }

    pub fn len_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.episodes.iter().map(|e| e.episode.duration()).sum()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &StoredEpisode> {
        self.episodes.iter()
    }

    pub fn get(&self, id: u64) -> Option<&StoredEpisode> {
        self.episodes.iter().find(|e| e.id == id)
    }

    /// Validates and stores an episode, evicting oldest episodes while the
    /// step budget is exceeded. Returns the id the episode was stored under.
    pub fn append(&mut self, episode: Episode) -> Result<u64, ReplayError> {
        if episode.states.len() < 2 {
            return Err(ReplayError::TooShort);
        }
        episode.validate()?;
        let id = self.next_id;
        self.next_id += 1;
        self.total_steps += episode.len();
        self.episodes.push_back(StoredEpisode { id, episode });
        while self.total_steps > self.capacity_steps && self.episodes.len() > 1 {
            let evicted = self.episodes.pop_front().expect("nonempty");
            self.total_steps -= evicted.episode.len();
        }
        Ok(id)
    }

    /// Samples `batch` windows of `horizon` transitions uniformly over all
    /// eligible (episode, start) pairs, restricted to episodes accepted by
    /// `filter`. Start offsets with fewer than `history` preceding steps are
    /// zero-padded and masked.
    pub fn sample_sequences_filtered<F>(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
        horizon: usize,
        history: usize,
        filter: F,
    ) -> Result<Vec<SequenceSample>, ReplayError>
    where
        F: Fn(&StoredEpisode) -> bool,
    {
        assert!(horizon >= 1, "horizon must be at least 1");
        let eligible: Vec<(usize, usize)> = self
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| filter(e))
            .filter_map(|(i, e)| {
                let n = e.episode.len();
                (n >= horizon).then(|| (i, n - horizon + 1))
            })
            .collect();
        if eligible.is_empty() {
            let available = self
                .episodes
                .iter()
                .filter(|e| filter(e))
                .map(|e| e.episode.len())
                .max()
                .unwrap_or(0);
            return Err(ReplayError::NoEligibleEpisode {
                required: horizon,
                available,
            });
        }
        let total_windows: usize = eligible.iter().map(|(_, w)| w).sum();
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut pick = rng.gen_range(0..total_windows);
            let mut chosen = eligible[0].0;
            let mut start = 0;
            for (i, windows) in &eligible {
                if pick < *windows {
                    chosen = *i;
                    start = pick;
                    break;
                }
                pick -= windows;
            }
            out.push(self.extract(chosen, start, horizon, history));
        }
        Ok(out)
    }

    pub fn sample_sequences(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
        horizon: usize,
        history: usize,
    ) -> Result<Vec<SequenceSample>, ReplayError> {
        self.sample_sequences_filtered(rng, batch, horizon, history, |_| true)
    }

    fn extract(
        &self,
        index: usize,
        start: usize,
        horizon: usize,
        history: usize,
    ) -> SequenceSample {
        let stored = &self.episodes[index];
        let e = &stored.episode;
        let mut hist = Vec::with_capacity(history);
        for k in 0..history {
            let offset = start as i64 - history as i64 + k as i64;
            if offset >= 0 {
                let o = offset as usize;
                hist.push(HistoryStep {
                    state: e.states[o],
                    action: e.actions[o],
                    valid: true,
                });
            } else {
                hist.push(HistoryStep {
                    state: State12::zero(),
                    action: Action::zero(),
                    valid: false,
                });
            }
        }
        SequenceSample {
            episode_id: stored.id,
            start,
            init_state: e.states[start],
            actions: e.actions[start..start + horizon].to_vec(),
            truth: e.states[start + 1..start + horizon + 1].to_vec(),
            history: hist,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    capacity_steps: usize,
    total_steps: usize,
    episode_count: usize,
    files: Vec<String>,
}

/// Persists the buffer as a directory holding a manifest and one
/// line-delimited JSON episode file.
pub fn save_buffer(buf: &ReplayBuffer, dir: &Path) -> Result<(), ReplayError> {
    std::fs::create_dir_all(dir)?;
    let episodes: Vec<Episode> = buf.episodes.iter().map(|e| e.episode.clone()).collect();
    write_episodes(&dir.join("episodes.jsonl"), &episodes)?;
    let manifest = Manifest {
        version: 1,
        capacity_steps: buf.capacity_steps,
        total_steps: buf.total_steps,
        episode_count: episodes.len(),
        files: vec!["episodes.jsonl".to_string()],
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Loads a buffer directory written by [`save_buffer`]. Episode ids are
/// reassigned in stored order, so a saved and reloaded buffer samples
/// identically.
pub fn load_buffer_dir(dir: &Path) -> Result<ReplayBuffer, ReplayError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut buf = ReplayBuffer::new(manifest.capacity_steps);
    for file in &manifest.files {
        for episode in read_episodes(&dir.join(file))? {
            buf.append(episode)?;
        }
    }
    Ok(buf)
}

/// Deterministic helper used in tests and examples: a rng substream dedicated
/// to replay sampling.
pub fn sampling_rng(seed: u64, index: u64) -> ChaCha8Rng {
    substream(seed, "replay-sampling", index)
}
