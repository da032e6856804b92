use crate::error::{invalid, Result};
use crate::tensor::Visibility;

/// Row arrangement of a packed thought sequence.
///
/// The first `seq_len` rows hold the original tokens. Each selected base
/// position `j` then owns `slots` thought rows: slot 0 is the
/// start-of-thought delimiter, followed by content tokens, the
/// end-of-thought delimiter and (when scoring) teacher-forced ahead tokens.
/// Rows are slot-major: `row(a, p) = seq_len + a * positions.len() + p`, so
/// each generation round appends one contiguous block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedLayout {
    seq_len: usize,
    positions: Vec<usize>,
    slots: usize,
}

impl PackedLayout {
    pub fn new(seq_len: usize, positions: Vec<usize>, slots: usize) -> Result<Self> {
        if let Some(&bad) = positions.iter().find(|&&j| j >= seq_len) {
            return Err(invalid(format!("thought position {bad} outside sequence of {seq_len}")));
        }
        Ok(Self {
            seq_len,
            positions,
            slots,
        })
    }

    /// Thought blocks at every base position.
    pub fn full(seq_len: usize, slots: usize) -> Self {
        Self {
            seq_len,
            positions: (0..seq_len).collect(),
            slots,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn len(&self) -> usize {
        self.seq_len + self.positions.len() * self.slots
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, slot: usize, pos_index: usize) -> usize {
        debug_assert!(slot < self.slots && pos_index < self.positions.len());
        self.seq_len + slot * self.positions.len() + pos_index
    }

    /// Thought slot `a` after base position `j` gets position id `j + 1 + a`.
    pub fn position_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.seq_len).collect();
        for a in 0..self.slots {
            ids.extend(self.positions.iter().map(|&j| j + 1 + a));
        }
        ids
    }

    /// Original tokens see earlier original tokens; a thought slot sees the
    /// prefix through its base position plus earlier slots of its own block.
    pub fn visibility(&self) -> Visibility {
        let mut rows: Vec<Vec<usize>> = (0..self.seq_len).map(|i| (0..=i).collect()).collect();
        for a in 0..self.slots {
            for (p, &j) in self.positions.iter().enumerate() {
                let mut r: Vec<usize> = (0..=j).collect();
                r.extend((0..=a).map(|b| self.row(b, p)));
                rows.push(r);
            }
        }
        Visibility::from_rows(rows).expect("layout rows are in range")
    }

    /// Packs base tokens followed by `slot_token(slot, pos_index)` for each thought row.
    pub fn tokens(&self, base: &[u32], slot_token: impl Fn(usize, usize) -> u32) -> Vec<u32> {
        let mut t = base.to_vec();
        for a in 0..self.slots {
            t.extend((0..self.positions.len()).map(|p| slot_token(a, p)));
        }
        t
    }
}

/// Visibility for generation round `step` of an `n_thought` trace over every
/// position of a `seq_len` sequence. Round 1 holds only the start-of-thought
/// slots, round `k` adds content slot `k - 1`, and round `n_thought + 1` adds
/// the end-of-thought slot.
pub fn build_thought_mask(seq_len: usize, n_thought: usize, step: usize) -> Result<Visibility> {
    if step == 0 || step > n_thought + 1 {
        return Err(invalid(format!(
            "generation round {step} outside 1..={} for n_thought {n_thought}",
            n_thought + 1
        )));
    }
    Ok(PackedLayout::full(seq_len, step).visibility())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_slot_of_single_token_sees_two_entries() {
        let v = build_thought_mask(1, 4, 1).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.row(1), &[0, 1]);
    }

    #[test]
    fn blocks_of_different_positions_are_isolated() {
        let l = PackedLayout::full(5, 4);
        let v = l.visibility();
        for a in 0..4 {
            for b in 0..4 {
                for p in 0..5 {
                    for q in 0..5 {
                        if p != q {
                            assert!(!v.is_visible(l.row(a, p), l.row(b, q)));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn base_rows_are_causal_and_blind_to_thoughts() {
        let l = PackedLayout::full(4, 3);
        let v = l.visibility();
        for i in 0..4 {
            assert_eq!(v.row(i).len(), i + 1);
            assert!(v.row(i).iter().all(|&k| (k as usize) <= i));
        }
    }

    #[test]
    fn step_out_of_range_fails() {
        assert!(build_thought_mask(3, 4, 0).is_err());
        assert!(build_thought_mask(3, 4, 6).is_err());
        assert!(build_thought_mask(3, 4, 5).is_ok());
    }

    #[test]
    fn packed_length_is_linear_in_budget() {
        for n in 2..8 {
            let v = build_thought_mask(6, n, n + 1).unwrap();
            assert_eq!(v.len(), 6 + 6 * (n + 1));
        }
    }

    #[test]
    fn position_ids_continue_from_base() {
        let l = PackedLayout::new(5, vec![1, 3], 3).unwrap();
        let ids = l.position_ids();
        assert_eq!(ids[l.row(0, 0)], 2);
        assert_eq!(ids[l.row(2, 1)], 6);
    }

    /// Naive per-position constructor for comparison.
    fn sequential_mask(seq_len: usize, n: usize, step: usize) -> Vec<Vec<bool>> {
        let total = seq_len + seq_len * step;
        let mut m = vec![vec![false; total]; total];
        for i in 0..seq_len {
            for k in 0..=i {
                m[i][k] = true;
            }
        }
        for j in 0..seq_len {
            for a in 0..step {
                let q = seq_len + a * seq_len + j;
                for k in 0..=j {
                    m[q][k] = true;
                }
                for b in 0..=a {
                    m[q][seq_len + b * seq_len + j] = true;
                }
            }
        }
        let _ = n;
        m
    }

    #[test]
    fn full_mask_is_union_of_per_position_masks() {
        for step in 1..=5 {
            let v = build_thought_mask(4, 4, step).unwrap();
            assert_eq!(v.to_dense(), sequential_mask(4, 4, step));
        }
    }
}
