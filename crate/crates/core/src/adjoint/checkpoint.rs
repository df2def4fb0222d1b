//! Snapshot schedules for reversing long time integrations under a memory cap.
//!
//! Storing every intermediate state of an `n`-step integration so it can be
//! differentiated in reverse costs O(n) memory. With only `s` snapshot slots
//! the reversal must recompute some forward steps instead. The planner here
//! produces a schedule that minimizes the number of recomputed steps for a
//! given `(n, s)` via the classic divide-and-conquer (binomial) recursion.
//!
//! The execution model the schedules assume is strictly two-phase:
//!
//! 1. a single recording-free forward sweep over all `n` steps that may
//!    deposit snapshots along the way (these sweep steps are not counted as
//!    recomputation — the trajectory has to be run once regardless), then
//! 2. the reversal, which for each step `i = n-1, …, 0` restores the nearest
//!    snapshot at or below `i`, re-advances to `i` (these advances are the
//!    counted recomputation), and differentiates step `i` in isolation.
//!
//! Holding a recorded step across phase boundaries is deliberately not part
//! of the model: a recorded step is far larger than a state snapshot, so the
//! forward sweep must stay recording-free.

use crate::error::{Error, Result};

/// One instruction in a checkpoint schedule. `Store`/`Restore`/`Discard`
/// manage snapshot slots keyed by state index (the state reached after that
/// many steps); `Advance { from, to }` runs steps `from..to` without
/// recording; `Reverse { step }` re-runs exactly step `step` with recording
/// and accumulates its contribution to the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Store { step: usize },
    Restore { step: usize },
    Discard { step: usize },
    Advance { from: usize, to: usize },
    Reverse { step: usize },
}

/// A complete reversal schedule for an `n_steps` trajectory.
///
/// Invariants (enforced by construction, checked by the executor):
/// - at most `n_snapshots` states are stored simultaneously,
/// - every `Reverse`/`Advance` has its required state available,
/// - `recomputed_steps` equals the minimum achievable for `(n_steps,
///   n_snapshots)` under the two-phase model above.
#[derive(Debug, Clone)]
pub struct CheckpointPlan {
    pub n_steps: usize,
    pub n_snapshots: usize,
    pub actions: Vec<Action>,
    /// Forward steps re-run during the reversal phase (sweep steps excluded).
    pub recomputed_steps: usize,
}

/// Default snapshot budget: ⌈√n⌉, the usual memory/recompute compromise
/// (recomputation stays within one extra sweep of the trajectory).
pub fn default_snapshot_budget(n_steps: usize) -> usize {
    let mut r = (n_steps as f64).sqrt() as usize;
    while r * r < n_steps {
        r += 1;
    }
    while r > 1 && (r - 1) * (r - 1) >= n_steps {
        r -= 1;
    }
    r.max(1)
}

/// Longest trajectory reversible with `s` snapshot slots if no schedule may
/// re-advance any segment more than `r` times, i.e. the binomial bound
/// β(s, r) = β(s-1, r) + β(s, r-1) with β(·, 0) = β(0, ·) = 1, which Pascal's
/// rule closes to C(s + r, s). Saturates instead of overflowing.
pub fn max_reversible_steps(s: usize, r: usize) -> usize {
    let mut row = vec![1usize; r + 1];
    for _ in 1..=s {
        for j in 1..=r {
            row[j] = row[j].saturating_add(row[j - 1]);
        }
    }
    row[r]
}

struct Tables {
    /// cost2[len][sigma]: minimal counted advances to reverse a segment of
    /// `len` steps whose start state is snapshotted, using `sigma` slots
    /// (including the one holding the start), when the segment's interior
    /// carries no other snapshots yet.
    cost2: Vec<Vec<usize>>,
    choice2: Vec<Vec<usize>>,
    /// sweep[len][sigma]: same, except the segment is still ahead of the
    /// forward sweep, so the sweep may deposit a free snapshot chain in it.
    sweep: Vec<Vec<usize>>,
    /// Chain split for the sweep phase; `None` means deposit nothing.
    choice_sweep: Vec<Vec<Option<usize>>>,
}

fn build_tables(n: usize, s: usize) -> Tables {
    let mut cost2 = vec![vec![usize::MAX; s + 1]; n + 1];
    let mut choice2 = vec![vec![0usize; s + 1]; n + 1];
    let mut sweep = vec![vec![usize::MAX; s + 1]; n + 1];
    let mut choice_sweep = vec![vec![None; s + 1]; n + 1];
    for sigma in 1..=s {
        for len in 1..=n {
            cost2[len][sigma] = if len == 1 {
                0
            } else if sigma == 1 {
                // Each target i = len-1, …, 1 restores the start and
                // re-advances i steps.
                len * (len - 1) / 2
            } else {
                let mut best = usize::MAX;
                let mut arg = 1;
                for m in 1..len {
                    // Re-advance m steps, snapshot there, reverse the right
                    // part with one slot fewer, then the left part.
                    let c = m + cost2[len - m][sigma - 1] + cost2[m][sigma];
                    if c < best {
                        best = c;
                        arg = m;
                    }
                }
                choice2[len][sigma] = arg;
                best
            };
            let mut best = cost2[len][sigma];
            let mut arg = None;
            if sigma >= 2 {
                for m in 1..len {
                    // The sweep drops a snapshot after m steps for free; the
                    // right part keeps sweep accounting with one slot fewer,
                    // the left part is reversed cold.
                    let c = sweep[len - m][sigma - 1] + cost2[m][sigma];
                    if c < best {
                        best = c;
                        arg = Some(m);
                    }
                }
            }
            sweep[len][sigma] = best;
            choice_sweep[len][sigma] = arg;
        }
    }
    Tables { cost2, choice2, sweep, choice_sweep }
}

fn emit_cost2(b: usize, e: usize, sigma: usize, t: &Tables, out: &mut Vec<Action>) {
    let len = e - b;
    if len == 1 {
        out.push(Action::Restore { step: b });
        out.push(Action::Reverse { step: b });
        return;
    }
    if sigma == 1 {
        for i in (b + 1..e).rev() {
            out.push(Action::Restore { step: b });
            out.push(Action::Advance { from: b, to: i });
            out.push(Action::Reverse { step: i });
        }
        out.push(Action::Restore { step: b });
        out.push(Action::Reverse { step: b });
        return;
    }
    let m = t.choice2[len][sigma];
    out.push(Action::Restore { step: b });
    out.push(Action::Advance { from: b, to: b + m });
    out.push(Action::Store { step: b + m });
    emit_cost2(b + m, e, sigma - 1, t, out);
    out.push(Action::Discard { step: b + m });
    emit_cost2(b, b + m, sigma, t, out);
}

fn emit_sweep(b: usize, len: usize, sigma: usize, t: &Tables, out: &mut Vec<Action>) {
    match t.choice_sweep[len][sigma] {
        None => {
            out.push(Action::Advance { from: b, to: b + len });
            emit_cost2(b, b + len, sigma, t, out);
        }
        Some(m) => {
            out.push(Action::Advance { from: b, to: b + m });
            out.push(Action::Store { step: b + m });
            emit_sweep(b + m, len - m, sigma - 1, t, out);
            out.push(Action::Discard { step: b + m });
            emit_cost2(b, b + m, sigma, t, out);
        }
    }
}

/// Builds the minimal-recomputation schedule for `n_steps` with at most
/// `n_snapshots` simultaneously stored states. The initial state always
/// occupies one slot, so `n_snapshots` must be at least 1.
pub fn plan_checkpoints(n_steps: usize, n_snapshots: usize) -> Result<CheckpointPlan> {
    if n_snapshots < 1 {
        return Err(Error::InvalidBudget { s: n_snapshots });
    }
    if n_steps == 0 {
        return Ok(CheckpointPlan {
            n_steps: 0,
            n_snapshots: 1,
            actions: Vec::new(),
            recomputed_steps: 0,
        });
    }
    // Only the n states 0..n-1 are ever worth storing.
    let s_eff = n_snapshots.min(n_steps);
    let t = build_tables(n_steps, s_eff);
    let mut actions = Vec::new();
    actions.push(Action::Store { step: 0 });
    emit_sweep(0, n_steps, s_eff, &t, &mut actions);
    actions.push(Action::Discard { step: 0 });
    Ok(CheckpointPlan {
        n_steps,
        n_snapshots: s_eff,
        actions,
        recomputed_steps: t.sweep[n_steps][s_eff],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap, VecDeque};

    /// Replays a plan symbolically and checks every invariant: states are
    /// available when used, the slot cap holds, targets come out in reverse
    /// order, and the advance count past the sweep matches the claim.
    fn check_plan(plan: &CheckpointPlan) -> (usize, usize) {
        let n = plan.n_steps;
        // The initial state is in hand when execution starts.
        let mut cur: Option<usize> = Some(0);
        let mut stored = BTreeSet::new();
        let mut frontier = 0usize;
        let mut counted = 0usize;
        let mut peak = 0usize;
        let mut targets = Vec::new();
        for a in &plan.actions {
            match *a {
                Action::Store { step } => {
                    assert_eq!(cur, Some(step), "store must snapshot the current state");
                    assert!(stored.insert(step), "slot {step} already occupied");
                    peak = peak.max(stored.len());
                    assert!(stored.len() <= plan.n_snapshots, "slot cap exceeded");
                }
                Action::Restore { step } => {
                    assert!(stored.contains(&step), "restore of unstored state {step}");
                    cur = Some(step);
                }
                Action::Discard { step } => {
                    assert!(stored.remove(&step), "discard of unstored state {step}");
                }
                Action::Advance { from, to } => {
                    assert_eq!(cur, Some(from));
                    assert!(from < to && to <= n);
                    for c in from..to {
                        if c < frontier {
                            counted += 1;
                        } else {
                            assert_eq!(c, frontier, "sweep skipped a step");
                            frontier += 1;
                        }
                    }
                    cur = Some(to);
                }
                Action::Reverse { step } => {
                    assert_eq!(cur, Some(step), "reverse without the step's state");
                    targets.push(step);
                    cur = None;
                }
            }
        }
        let expect: Vec<usize> = (0..n).rev().collect();
        assert_eq!(targets, expect, "targets must be reversed in order");
        assert!(stored.is_empty(), "all snapshots must be discarded");
        assert_eq!(frontier, n, "sweep must cover the whole trajectory");
        (counted, peak)
    }

    #[test]
    fn single_step_plan_stores_initial_state_and_recomputes_nothing() {
        let plan = plan_checkpoints(1, 1).unwrap();
        assert_eq!(plan.recomputed_steps, 0);
        assert!(plan.actions.contains(&Action::Store { step: 0 }));
        let (counted, peak) = check_plan(&plan);
        assert_eq!(counted, 0);
        assert_eq!(peak, 1);
    }

    #[test]
    fn four_steps_two_snapshots_recompute_exactly_two() {
        let plan = plan_checkpoints(4, 2).unwrap();
        assert_eq!(plan.recomputed_steps, 2);
        let (counted, peak) = check_plan(&plan);
        assert_eq!(counted, 2);
        assert!(peak <= 2);
    }

    #[test]
    fn zero_snapshot_budget_is_rejected() {
        match plan_checkpoints(5, 0) {
            Err(Error::InvalidBudget { s }) => assert_eq!(s, 0),
            other => panic!("expected InvalidBudget, got {other:?}"),
        }
    }

    #[test]
    fn zero_step_plan_is_empty() {
        let plan = plan_checkpoints(0, 3).unwrap();
        assert!(plan.actions.is_empty());
        assert_eq!(plan.recomputed_steps, 0);
    }

    #[test]
    fn budget_at_or_above_step_count_recomputes_nothing() {
        for n in 1..=12usize {
            for s in [n, n + 1, n + 5] {
                let plan = plan_checkpoints(n, s).unwrap();
                assert_eq!(plan.recomputed_steps, 0, "n={n} s={s}");
                check_plan(&plan);
            }
        }
    }

    #[test]
    fn feasibility_bound_matches_binomials() {
        assert_eq!(max_reversible_steps(2, 2), 6);
        assert_eq!(max_reversible_steps(3, 3), 20);
        assert_eq!(max_reversible_steps(1, 7), 8);
        assert_eq!(max_reversible_steps(7, 1), 8);
        assert_eq!(max_reversible_steps(5, 0), 1);
        assert_eq!(max_reversible_steps(0, 5), 1);
        // C(s + r, s) cross-check.
        let choose = |a: usize, b: usize| -> usize {
            let mut v = 1usize;
            for i in 0..b {
                v = v * (a - i) / (i + 1);
            }
            v
        };
        for s in 0..=6 {
            for r in 0..=6 {
                assert_eq!(max_reversible_steps(s, r), choose(s + r, s.min(r)), "s={s} r={r}");
            }
        }
    }

    #[test]
    fn default_budget_is_square_root_ceiling() {
        for (n, want) in [(0, 1), (1, 1), (2, 2), (4, 2), (8, 3), (9, 3), (10, 4), (100, 10), (101, 11)] {
            assert_eq!(default_snapshot_budget(n), want, "n={n}");
        }
    }

    /// Cheapest reversal found by exhaustive shortest-path search over the
    /// full (position, slots, target, sweep-frontier) state space. Advances
    /// past the frontier are free (they belong to the mandatory forward
    /// sweep); everything else costs one per step.
    fn oracle(n: usize, s: usize) -> usize {
        assert!(n >= 1 && n <= 16);
        let none_cur = (n + 1) as u64;
        let pack = |cur: u64, mask: u64, tgt1: u64, fr: u64| -> u64 {
            cur | (mask << 8) | (tgt1 << 28) | (fr << 36)
        };
        let start = pack(0, 1, n as u64, 0);
        let mut dist: HashMap<u64, u32> = HashMap::new();
        let mut dq: VecDeque<(u64, u32)> = VecDeque::new();
        dist.insert(start, 0);
        dq.push_back((start, 0));
        while let Some((st, d)) = dq.pop_front() {
            if dist.get(&st) != Some(&d) {
                continue;
            }
            let cur = st & 0xff;
            let mask = (st >> 8) & 0xfffff;
            let tgt1 = (st >> 28) & 0xff;
            let fr = (st >> 36) & 0xff;
            if tgt1 == 0 {
                return d as usize;
            }
            let mut relax = |ns: u64, nd: u32, dq: &mut VecDeque<(u64, u32)>| {
                let e = dist.entry(ns).or_insert(u32::MAX);
                if nd < *e {
                    *e = nd;
                    if nd == d {
                        dq.push_front((ns, nd));
                    } else {
                        dq.push_back((ns, nd));
                    }
                }
            };
            if cur != none_cur {
                let c = cur as usize;
                if c < n {
                    let cost = if (cur) < fr { 1 } else { 0 };
                    let nfr = fr.max(cur + 1);
                    relax(pack(cur + 1, mask, tgt1, nfr), d + cost, &mut dq);
                }
                if c < n && mask & (1 << c) == 0 && mask.count_ones() < s as u32 {
                    relax(pack(cur, mask | (1 << c), tgt1, fr), d, &mut dq);
                }
                // Reversal can only start once the sweep has covered the
                // whole trajectory: the loss needs every step's observables
                // before any cotangent exists.
                if cur + 1 == tgt1 && fr == n as u64 {
                    relax(pack(none_cur, mask, tgt1 - 1, fr), d, &mut dq);
                }
            }
            for b in 0..n as u64 {
                if mask & (1 << b) != 0 {
                    relax(pack(b, mask, tgt1, fr), d, &mut dq);
                    relax(pack(cur, mask & !(1 << b), tgt1, fr), d, &mut dq);
                }
            }
        }
        panic!("oracle found no reversal for n={n} s={s}");
    }

    #[test]
    fn exhaustive_search_agrees_with_planner() {
        for n in 1..=10usize {
            for s in 1..=4usize {
                let plan = plan_checkpoints(n, s).unwrap();
                let best = oracle(n, s.min(n));
                assert_eq!(plan.recomputed_steps, best, "n={n} s={s}");
            }
        }
        let plan = plan_checkpoints(16, 2).unwrap();
        assert_eq!(plan.recomputed_steps, oracle(16, 2));
    }

    #[test]
    fn plans_replay_cleanly_and_costs_shrink_with_budget() {
        for n in 1..=40usize {
            let mut prev = usize::MAX;
            for s in 1..=6usize {
                let plan = plan_checkpoints(n, s).unwrap();
                let (counted, peak) = check_plan(&plan);
                assert_eq!(counted, plan.recomputed_steps, "n={n} s={s}");
                assert!(peak <= plan.n_snapshots);
                assert!(plan.recomputed_steps <= prev, "cost must not grow with budget");
                prev = plan.recomputed_steps;
            }
        }
    }
}
