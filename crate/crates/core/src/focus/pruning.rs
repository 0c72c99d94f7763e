//! Layer-wise document scoring and the pruning schedule.
//!
//! Cache ids are retrieval ranks: id 0 is the best-retrieved document.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMap, Segment};

pub const DEFAULT_INTERVAL: usize = 4;
pub const DEFAULT_K_FINISH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningSchedule {
    /// Prune after every `n`-th layer.
    pub n: usize,
    /// Caches left after the last pruning event.
    pub k_finish: usize,
}

impl Default for PruningSchedule {
    fn default() -> Self {
        Self {
            n: DEFAULT_INTERVAL,
            k_finish: DEFAULT_K_FINISH,
        }
    }
}

impl PruningSchedule {
    pub fn new(n: usize, k_finish: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("pruning interval n must be positive".into()));
        }
        if k_finish == 0 {
            return Err(Error::Config("k_finish must be at least 1".into()));
        }
        Ok(Self { n, k_finish })
    }

    /// 1-based layers after which pruning happens: `n, 2n, ...` up to and including `num_layers`.
    pub fn event_layers(&self, num_layers: usize) -> Result<Vec<usize>> {
        if self.n == 0 || self.n > num_layers {
            return Err(Error::Config(format!(
                "pruning interval {} must be in 1..={num_layers}",
                self.n
            )));
        }
        Ok((self.n..=num_layers).step_by(self.n).collect())
    }

    /// Caches removed per event, rounded down.
    pub fn k_prune(&self, k: usize, num_layers: usize) -> Result<usize> {
        let events = self.event_layers(num_layers)?.len();
        Ok(k.saturating_sub(self.k_finish) / events)
    }

    /// Removal count at each event. The last event absorbs the rounding remainder.
    pub fn removals(&self, k: usize, num_layers: usize) -> Result<Vec<usize>> {
        let events = self.event_layers(num_layers)?.len();
        let total = k.saturating_sub(self.k_finish);
        let each = total / events;
        let mut out = vec![each; events];
        out[events - 1] = total - each * (events - 1);
        Ok(out)
    }
}

/// Attention mass on document `id`, averaged over heads and query rows.
pub fn document_mass(map: &AttentionMap, id: usize) -> f64 {
    let target = Segment::Document(id as u32);
    map.mean_mass(|s| s == target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningState {
    schedule: PruningSchedule,
    events: Vec<usize>,
    removals: Vec<usize>,
    active: bool,
    surviving: Vec<usize>,
    scores: Vec<f64>,
    pruned_at: Vec<Option<usize>>,
    history: Vec<Vec<(usize, f64)>>,
}

impl PruningState {
    /// `k` caches, ids `0..k` in retrieval order. Pruning is off when `k <= k_finish`.
    pub fn new(k: usize, schedule: PruningSchedule, num_layers: usize) -> Result<Self> {
        PruningSchedule::new(schedule.n, schedule.k_finish)?;
        let events = schedule.event_layers(num_layers)?;
        let removals = schedule.removals(k, num_layers)?;
        Ok(Self {
            schedule,
            events,
            removals,
            active: k > schedule.k_finish,
            surviving: (0..k).collect(),
            scores: vec![0.0; k],
            pruned_at: vec![None; k],
            history: Vec::new(),
        })
    }

    /// Without pruning or re-ordering: scores are still accumulated.
    pub fn pass_through(k: usize, schedule: PruningSchedule) -> Self {
        Self {
            schedule,
            events: Vec::new(),
            removals: Vec::new(),
            active: false,
            surviving: (0..k).collect(),
            scores: vec![0.0; k],
            pruned_at: vec![None; k],
            history: Vec::new(),
        }
    }

    pub fn schedule(&self) -> PruningSchedule {
        self.schedule
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn events(&self) -> &[usize] {
        &self.events
    }

    pub fn removals(&self) -> &[usize] {
        &self.removals
    }

    /// Current order: retrieval order until the first event, then by score.
    pub fn surviving(&self) -> &[usize] {
        &self.surviving
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, id: usize) -> f64 {
        self.scores[id]
    }

    /// 1-based layer at which each id was dropped.
    pub fn pruned_at(&self) -> &[Option<usize>] {
        &self.pruned_at
    }

    /// Surviving ids with their cumulative scores, recorded after each layer's
    /// accumulation and before that layer's pruning.
    pub fn history(&self) -> &[Vec<(usize, f64)>] {
        &self.history
    }

    /// Adds this layer's per-document mass to the surviving ids' scores.
    /// Returns the increments in surviving order.
    pub fn accumulate(&mut self, map: &AttentionMap) -> Vec<f64> {
        let increments: Vec<f64> = self.surviving.iter().map(|&id| document_mass(map, id)).collect();
        for (&id, inc) in self.surviving.iter().zip(&increments) {
            self.scores[id] += inc;
        }
        self.history
            .push(self.surviving.iter().map(|&id| (id, self.scores[id])).collect());
        increments
    }

    /// Survivors by descending score, ties by retrieval rank.
    pub fn ranked(&self) -> Vec<usize> {
        let mut ids = self.surviving.clone();
        ids.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        ids
    }

    /// Ends 1-based layer `layer`. At a pruning event the survivors are re-ordered
    /// by score and the lowest ones removed; returns the removed ids.
    pub fn end_layer(&mut self, layer: usize) -> Vec<usize> {
        if !self.active {
            return Vec::new();
        }
        let Some(e) = self.events.iter().position(|&l| l == layer) else {
            return Vec::new();
        };
        let mut ids = self.ranked();
        let keep = ids.len().saturating_sub(self.removals[e]).max(self.schedule.k_finish);
        let dropped = ids.split_off(keep.min(ids.len()));
        for &id in &dropped {
            self.pruned_at[id] = Some(layer);
        }
        self.surviving = ids;
        dropped
    }
}

/// Folds one layer's attention map into `state`.
pub fn accumulate_scores(map: &AttentionMap, state: &mut PruningState) -> Vec<f64> {
    state.accumulate(map)
}
