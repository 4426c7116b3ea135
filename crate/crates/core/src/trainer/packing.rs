use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::rng::derived_rng;

const SHUFFLE_TAG: u64 = 0x5348_5546;

/// Where a lane currently is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneCursor {
    pub utt: usize,
    pub offset: usize,
    /// How many times this utterance had been pulled before this one.
    pub encounter: u64,
}

/// Resumable iterator state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackerState {
    pub queue: VecDeque<usize>,
    pub epoch: u64,
    pub lanes: Vec<Option<LaneCursor>>,
    pub encounters: Vec<u64>,
}

/// Whether the utterance queue is refilled (reshuffled) when it runs dry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PackOrder {
    /// One pass over the corpus, then lanes go idle.
    Finite,
    /// Endless epochs, each in a fresh shuffled order.
    Cycle,
}

/// One lane's slice of a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LaneWindow {
    pub utt: usize,
    pub offset: usize,
    pub len: usize,
    pub reset: bool,
    pub encounter: u64,
}

/// Frame ranges for one TBPTT window; idle lanes are `None`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub lanes: Vec<Option<LaneWindow>>,
    /// Longest lane slice; shorter lanes are zero padded up to it.
    pub steps: usize,
}

/// Continuous packing of utterances into `batch` lanes.
///
/// Each lane walks through its current utterance `tbptt` frames at a time
/// and pulls the next utterance from a shuffled queue once it is used up;
/// a window never spans two utterances in one lane.
#[derive(Clone, Debug)]
pub struct Packer {
    lengths: Vec<usize>,
    tbptt: usize,
    seed: u64,
    order: PackOrder,
    state: PackerState,
}

impl Packer {
    pub fn new(lengths: Vec<usize>, batch: usize, tbptt: usize, seed: u64, order: PackOrder) -> Result<Self, TrainError> {
        if lengths.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        if batch == 0 || tbptt == 0 {
            return Err(TrainError::Invalid("batch size and tbptt length must be positive".into()));
        }
        if let Some(i) = lengths.iter().position(|&l| l == 0) {
            return Err(TrainError::Invalid(format!("utterance {i} has no frames")));
        }
        let n = lengths.len();
        let mut packer = Self {
            lengths,
            tbptt,
            seed,
            order,
            state: PackerState {
                queue: VecDeque::new(),
                epoch: 0,
                lanes: vec![None; batch],
                encounters: vec![0; n],
            },
        };
        packer.refill();
        Ok(packer)
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut derived_rng(self.seed, &[SHUFFLE_TAG, self.state.epoch]));
        self.state.queue = order.into();
    }

    fn pull(&mut self) -> Option<usize> {
        if self.state.queue.is_empty() && self.order == PackOrder::Cycle {
            self.state.epoch += 1;
            self.refill();
        }
        self.state.queue.pop_front()
    }

    pub fn state(&self) -> &PackerState {
        &self.state
    }

    /// Replaces the iterator position, as stored in a checkpoint.
    pub fn restore(&mut self, state: PackerState) -> Result<(), TrainError> {
        let n = self.lengths.len();
        let bad_lane = state
            .lanes
            .iter()
            .flatten()
            .any(|c| c.utt >= n || c.offset > self.lengths[c.utt]);
        if state.lanes.len() != self.state.lanes.len()
            || state.encounters.len() != n
            || state.queue.iter().any(|&u| u >= n)
            || bad_lane
        {
            return Err(TrainError::Checkpoint("packer state does not match the corpus".into()));
        }
        self.state = state;
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.state.lanes.len()
    }

    pub fn next_window(&mut self) -> Option<WindowPlan> {
        let mut lanes = Vec::with_capacity(self.batch());
        for b in 0..self.batch() {
            let exhausted = match self.state.lanes[b] {
                Some(c) => c.offset >= self.lengths[c.utt],
                None => true,
            };
            if exhausted {
                self.state.lanes[b] = self.pull().map(|utt| {
                    let encounter = self.state.encounters[utt];
                    self.state.encounters[utt] += 1;
                    LaneCursor {
                        utt,
                        offset: 0,
                        encounter,
                    }
                });
            }
            lanes.push(self.state.lanes[b].as_mut().map(|c| {
                let len = (self.lengths[c.utt] - c.offset).min(self.tbptt);
                let w = LaneWindow {
                    utt: c.utt,
                    offset: c.offset,
                    len,
                    reset: c.offset == 0,
                    encounter: c.encounter,
                };
                c.offset += len;
                w
            }));
        }
        let steps = lanes.iter().flatten().map(|w| w.len).max()?;
        Some(WindowPlan { lanes, steps })
    }
}

impl Iterator for Packer {
    type Item = WindowPlan;

    fn next(&mut self) -> Option<WindowPlan> {
        self.next_window()
    }
}

/// Window plans over utterances of the given frame counts.
pub fn pack_minibatches(
    lengths: Vec<usize>,
    batch: usize,
    tbptt: usize,
    seed: u64,
    order: PackOrder,
) -> Result<Packer, TrainError> {
    Packer::new(lengths, batch, tbptt, seed, order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_long_utterance() {
        let plans: Vec<_> = pack_minibatches(vec![600], 1, 256, 0, PackOrder::Finite).unwrap().collect();
        let lens: Vec<_> = plans.iter().map(|p| p.lanes[0].unwrap().len).collect();
        let resets: Vec<_> = plans.iter().map(|p| p.lanes[0].unwrap().reset).collect();
        assert_eq!(lens, [256, 256, 88]);
        assert_eq!(resets, [true, false, false]);
    }

    #[test]
    fn exact_fit_then_next_utterance() {
        let mut p = pack_minibatches(vec![64, 10], 1, 64, 0, PackOrder::Finite).unwrap();
        let first = p.next_window().unwrap().lanes[0].unwrap();
        let second = p.next_window().unwrap().lanes[0].unwrap();
        assert_eq!(first.len, [64, 10][first.utt]);
        assert!(second.reset);
        assert_ne!(first.utt, second.utt);
        assert!(p.next_window().is_none());
    }

    #[test]
    fn cycle_reshuffles_and_counts_encounters() {
        let mut p = pack_minibatches(vec![3, 3, 3], 1, 8, 5, PackOrder::Cycle).unwrap();
        for _ in 0..9 {
            p.next_window().unwrap();
        }
        assert_eq!(p.state().epoch, 2);
        assert_eq!(p.state().encounters, [3, 3, 3]);
    }

    #[test]
    fn rejects_empty_inputs() {
        assert!(matches!(
            pack_minibatches(vec![], 1, 8, 0, PackOrder::Finite),
            Err(TrainError::EmptyCorpus)
        ));
        assert!(pack_minibatches(vec![3, 0], 1, 8, 0, PackOrder::Finite).is_err());
    }
}
