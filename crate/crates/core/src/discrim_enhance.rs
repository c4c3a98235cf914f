//! Per-class memory bank of confident salient snippet features and the
//! memory interaction that injects it into refined features.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;

use crate::boundary_refine::temporal_interact;
use crate::config::MemoryMode;
use crate::tensor::{Graph, Result, Tensor, Var};

/// Initialization state of one class's slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotState {
    /// Never filled; excluded from interaction.
    Empty = 0,
    /// Filled from fewer than `N` distinct candidates.
    Partial = 1,
    Full = 2,
}

impl SlotState {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(SlotState::Empty),
            1 => Some(SlotState::Partial),
            2 => Some(SlotState::Full),
            _ => None,
        }
    }

    pub fn is_initialized(self) -> bool {
        self != SlotState::Empty
    }
}

/// One snippet offered to the memory for class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub feature: Vec<f64>,
    pub score: f64,
    pub video: String,
    pub snippet: usize,
}

/// Descending score, then ascending `(video, snippet)`.
fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.video.cmp(&b.video))
        .then(a.snippet.cmp(&b.snippet))
}

/// The `n` best candidates in slot order.
pub fn top_candidates(mut candidates: Vec<Candidate>, n: usize) -> Vec<Candidate> {
    candidates.sort_by(candidate_order);
    candidates.truncate(n);
    candidates
}

/// `n` candidates drawn without regard to score, then put in slot order.
pub fn random_candidates<R: Rng + ?Sized>(candidates: Vec<Candidate>, n: usize, rng: &mut R) -> Vec<Candidate> {
    let m = candidates.len();
    let mut picked: Vec<Candidate> = if m <= n {
        candidates
    } else {
        let mut idx = sample(rng, m, n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| candidates[i].clone()).collect()
    };
    picked.sort_by(candidate_order);
    picked
}

/// `η = η₀·ln(exp(e/E) + 1)`.
pub fn momentum_eta(eta0: f64, epoch: usize, total_epochs: usize) -> f64 {
    let x = if total_epochs == 0 {
        0.0
    } else {
        epoch as f64 / total_epochs as f64
    };
    eta0 * (x.exp() + 1.0).ln()
}

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("memory candidate has width {got}, expected {expected}")]
    Width { got: usize, expected: usize },
    #[error("class {class} out of range for {classes} classes")]
    Class { class: usize, classes: usize },
    #[error("corrupt memory section: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `C×N×D` memory with per-slot scores, slots sorted by descending score.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    classes: usize,
    slots: usize,
    dim: usize,
    data: Vec<f64>,
    scores: Vec<f64>,
    state: Vec<SlotState>,
}

impl MemoryBank {
    pub fn new(classes: usize, slots: usize, dim: usize) -> Self {
        MemoryBank {
            classes,
            slots,
            dim,
            data: vec![0.0; classes * slots * dim],
            scores: vec![0.0; classes * slots],
            state: vec![SlotState::Empty; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, class: usize) -> SlotState {
        self.state[class]
    }

    pub fn scores(&self, class: usize) -> &[f64] {
        &self.scores[class * self.slots..(class + 1) * self.slots]
    }

    /// Row-major `N×D` slot block of `class`.
    pub fn class_slots(&self, class: usize) -> &[f64] {
        let n = self.slots * self.dim;
        &self.data[class * n..(class + 1) * n]
    }

    pub fn slot(&self, class: usize, slot: usize) -> &[f64] {
        let start = (class * self.slots + slot) * self.dim;
        &self.data[start..start + self.dim]
    }

    fn check(&self, class: usize, candidates: &[Candidate]) -> std::result::Result<(), MemoryError> {
        if class >= self.classes {
            return Err(MemoryError::Class {
                class,
                classes: self.classes,
            });
        }
        if let Some(c) = candidates.iter().find(|c| c.feature.len() != self.dim) {
            return Err(MemoryError::Width {
                got: c.feature.len(),
                expected: self.dim,
            });
        }
        Ok(())
    }

    fn write_slot(&mut self, class: usize, slot: usize, feature: &[f64], score: f64) {
        let start = (class * self.slots + slot) * self.dim;
        self.data[start..start + self.dim].copy_from_slice(feature);
        self.scores[class * self.slots + slot] = score;
    }

    /// Fills the slots of `class` with its `N` best candidates. With fewer
    /// than `N`, the best one is repeated and the class marked partial;
    /// with none, the class stays empty.
    pub fn init_class(&mut self, class: usize, candidates: Vec<Candidate>) -> std::result::Result<(), MemoryError> {
        self.check(class, &candidates)?;
        let best = top_candidates(candidates, self.slots);
        if best.is_empty() {
            log::warn!("no memory candidates for class {class}; slots left empty");
            for s in 0..self.slots {
                self.write_slot(class, s, &vec![0.0; self.dim], 0.0);
            }
            self.state[class] = SlotState::Empty;
            return Ok(());
        }
        for s in 0..self.slots {
            let c = best.get(s).unwrap_or(&best[0]);
            self.write_slot(class, s, &c.feature, c.score);
        }
        if best.len() < self.slots {
            self.sort_class(class);
            self.state[class] = SlotState::Partial;
        } else {
            self.state[class] = SlotState::Full;
        }
        Ok(())
    }

    /// Applies one update with `new` already in slot order (best first).
    /// Rank `i` of `new` updates slot `i`; slots beyond `new.len()` keep
    /// their values. An empty class is initialized directly.
    pub fn update_class(
        &mut self,
        class: usize,
        new: &[Candidate],
        eta: f64,
        mode: MemoryMode,
    ) -> std::result::Result<(), MemoryError> {
        self.check(class, new)?;
        if new.is_empty() {
            return Ok(());
        }
        if !self.state[class].is_initialized() {
            return self.init_class(class, new.to_vec());
        }
        let m = new.len().min(self.slots);
        match mode {
            MemoryMode::Direct => {
                for (s, c) in new.iter().take(m).enumerate() {
                    self.write_slot(class, s, &c.feature, c.score);
                }
                self.sort_class(class);
            }
            MemoryMode::Ours | MemoryMode::MomentumAll => {
                let eta = eta.clamp(0.0, 1.0);
                for (s, c) in new.iter().take(m).enumerate() {
                    let start = (class * self.slots + s) * self.dim;
                    for (slot, &x) in self.data[start..start + self.dim].iter_mut().zip(&c.feature) {
                        *slot = (1.0 - eta) * *slot + eta * x;
                    }
                    let sc = &mut self.scores[class * self.slots + s];
                    *sc = sc.max(c.score);
                }
            }
        }
        if m == self.slots {
            self.state[class] = SlotState::Full;
        }
        Ok(())
    }

    fn sort_class(&mut self, class: usize) {
        let mut order: Vec<usize> = (0..self.slots).collect();
        let scores = self.scores(class).to_vec();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let block = self.class_slots(class).to_vec();
        for (dst, &src) in order.iter().enumerate() {
            let feature = block[src * self.dim..(src + 1) * self.dim].to_vec();
            self.write_slot(class, dst, &feature, scores[src]);
        }
    }

    /// Stacked slots of the initialized classes among `classes`, or `None`.
    pub fn keys(&self, classes: &[usize]) -> Option<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        for &c in classes {
            if c < self.classes && self.state[c].is_initialized() {
                data.extend_from_slice(self.class_slots(c));
                rows += self.slots;
            }
        }
        if rows == 0 {
            return None;
        }
        Some(Tensor::matrix(rows, self.dim, data).expect("memory key shape"))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().chain(&self.scores).all(|v| v.is_finite())
    }

    /// Header `C N D` (u32 LE), one state byte per class, then scores and
    /// slots as f64 LE.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::result::Result<(), MemoryError> {
        for v in [self.classes, self.slots, self.dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let states: Vec<u8> = self.state.iter().map(|&s| s as u8).collect();
        w.write_all(&states)?;
        for v in self.scores.iter().chain(&self.data) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::result::Result<Self, MemoryError> {
        let mut u32buf = [0u8; 4];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            r.read_exact(&mut u32buf)?;
            *h = u32::from_le_bytes(u32buf) as usize;
        }
        let [classes, slots, dim] = header;
        let total = classes
            .checked_mul(slots)
            .and_then(|v| v.checked_mul(dim))
            .filter(|&v| v <= 1 << 28)
            .ok_or_else(|| MemoryError::Corrupt(format!("implausible shape {classes}x{slots}x{dim}")))?;
        let mut states = vec![0u8; classes];
        r.read_exact(&mut states)?;
        let state = states
            .into_iter()
            .map(|b| SlotState::from_u8(b).ok_or_else(|| MemoryError::Corrupt(format!("bad slot state {b}"))))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut read_f64s = |n: usize| -> std::result::Result<Vec<f64>, MemoryError> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let scores = read_f64s(classes * slots)?;
        let data = read_f64s(total)?;
        Ok(MemoryBank {
            classes,
            slots,
            dim,
            data,
            scores,
            state,
        })
    }
}

/// `F̂ = softmax(F̃·Kᵀ)·K` with `K` the stacked slots of `classes`. Returns
/// `F̃` unchanged when none of the classes has initialized memory.
pub fn memory_interact(g: &mut Graph, refined: Var, bank: &MemoryBank, classes: &[usize], scaled: bool) -> Result<Var> {
    match bank.keys(classes) {
        Some(keys) => {
            let k = g.constant(keys);
            temporal_interact(g, refined, k, scaled)
        }
        None => {
            log::debug!("no initialized memory for classes {classes:?}; identity interaction");
            Ok(refined)
        }
    }
}
