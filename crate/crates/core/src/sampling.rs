//! Finite-statistics measurement records drawn from a true state as seen
//! through each party's (possibly mistaken) frame.
//!
//! Frame errors are modeled by transforming the Bloch parameters before
//! sampling: a party whose detector frame is wrong produces an internally
//! consistent record stream that is simply expressed in the wrong frame,
//! and sampling the transformed parameters is mathematically identical.
//! Each pair's outcome comes from its own derived RNG stream, so results
//! do not depend on iteration or arrival order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pauli::BlochParams;
use crate::rng;
use crate::witness::{apply_frame_maps, FrameMap, Party};

/// One party's record for one pair: which axis was measured and the ±1
/// outcome. The axis is fixed at measurement time and never edited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub pair_id: u64,
    /// Axis index in 1..=3.
    pub axis: u8,
    /// +1 or −1.
    pub outcome: i8,
}

impl MeasurementRecord {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.axis) {
            return Err(Error::InvalidParameter(format!(
                "record for pair {} has axis {} outside 1..=3",
                self.pair_id, self.axis
            )));
        }
        if self.outcome != 1 && self.outcome != -1 {
            return Err(Error::InvalidParameter(format!(
                "record for pair {} has outcome {} (must be ±1)",
                self.pair_id, self.outcome
            )));
        }
        Ok(())
    }
}

/// How each party picks its measurement axis per pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisPolicy {
    /// Cycle through all nine (n, m) combinations so every cell gets
    /// exactly `pairs_per_axis_combo` pairs. Needs only the pair index,
    /// so it is still a local choice.
    RoundRobin,
    /// Each party draws its axis uniformly from its own seed-derived
    /// stream.
    IndependentUniformRandom,
}

/// Measurement plan: total pair count is 9 × pairs_per_axis_combo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementSchedule {
    pub pairs_per_axis_combo: u64,
    pub axis_policy: AxisPolicy,
}

impl MeasurementSchedule {
    pub fn round_robin(pairs_per_axis_combo: u64) -> Self {
        MeasurementSchedule {
            pairs_per_axis_combo,
            axis_policy: AxisPolicy::RoundRobin,
        }
    }

    pub fn total_pairs(&self) -> u64 {
        9 * self.pairs_per_axis_combo
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_axis_combo == 0 {
            return Err(Error::InvalidParameter(
                "pairs_per_axis_combo must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// The axis (1..=3) a party measures on pair `pair_id`. Used identically
/// by the direct sampler and by the protocol agents.
pub fn party_axis(policy: AxisPolicy, seed: u64, party: Party, pair_id: u64) -> u8 {
    match policy {
        AxisPolicy::RoundRobin => match party {
            Party::Alice => (pair_id % 3) as u8 + 1,
            Party::Bob => ((pair_id / 3) % 3) as u8 + 1,
        },
        AxisPolicy::IndependentUniformRandom => {
            let label = match party {
                Party::Alice => "axis-alice",
                Party::Bob => "axis-bob",
            };
            rng::stream(seed, label, pair_id).gen_range(1..=3)
        }
    }
}

/// Born probability of outcomes (α, β) when Alice measures axis n and Bob
/// axis m: (1 + α a_n + β b_m + α β c_nm) / 4.
///
/// For a valid state the four values for fixed (n, m) are non-negative and
/// sum to one. A genuinely negative value can only come from parameters
/// that do not describe a state and is reported as an error; values within
/// round-off of zero are clamped to zero.
pub fn joint_probability(p: &BlochParams, n: u8, m: u8, alpha: i8, beta: i8) -> Result<f64> {
    if !(1..=3).contains(&n) || !(1..=3).contains(&m) {
        return Err(Error::InvalidParameter(format!(
            "axis indices must be in 1..=3, got ({n}, {m})"
        )));
    }
    if alpha.abs() != 1 || beta.abs() != 1 {
        return Err(Error::InvalidParameter(format!(
            "outcomes must be ±1, got ({alpha}, {beta})"
        )));
    }
    let (ni, mi) = ((n - 1) as usize, (m - 1) as usize);
    let (af, bf) = (f64::from(alpha), f64::from(beta));
    let value = (1.0 + af * p.a()[ni] + bf * p.b()[mi] + af * bf * p.c()[ni][mi]) / 4.0;
    if value < -1e-12 {
        return Err(Error::InvalidState(format!(
            "joint probability for axes ({n}, {m}), outcomes ({alpha}, {beta}) is {value}; \
             parameters do not describe a state"
        )));
    }
    Ok(value.max(0.0))
}

/// The four cell probabilities for axes (n, m), ordered
/// (+,+), (+,−), (−,+), (−,−).
pub fn cell_distribution(p: &BlochParams, n: u8, m: u8) -> Result<[f64; 4]> {
    Ok([
        joint_probability(p, n, m, 1, 1)?,
        joint_probability(p, n, m, 1, -1)?,
        joint_probability(p, n, m, -1, 1)?,
        joint_probability(p, n, m, -1, -1)?,
    ])
}

/// All nine cell distributions, indexed [n−1][m−1].
pub fn all_cell_distributions(p: &BlochParams) -> Result<[[[f64; 4]; 3]; 3]> {
    let mut cells = [[[0.0f64; 4]; 3]; 3];
    for n in 1..=3u8 {
        for m in 1..=3u8 {
            cells[(n - 1) as usize][(m - 1) as usize] = cell_distribution(p, n, m)?;
        }
    }
    Ok(cells)
}

/// Draw one joint outcome (α, β) for pair `pair_id` from the cell
/// distribution, using the pair's own derived stream.
pub fn draw_outcome(cell: &[f64; 4], seed: u64, pair_id: u64) -> (i8, i8) {
    let u: f64 = rng::stream(seed, "pair", pair_id).gen();
    let outcomes = [(1i8, 1i8), (1, -1), (-1, 1), (-1, -1)];
    let mut acc = 0.0;
    for (k, &(alpha, beta)) in outcomes.iter().enumerate() {
        acc += cell[k];
        if u < acc {
            return (alpha, beta);
        }
    }
    // Cumulative round-off can leave u just past the last bin edge.
    outcomes[3]
}

/// Sample a full run: for every pair, pick axes per schedule and draw the
/// joint outcome from the true state as seen through the frame errors.
/// Deterministic given the seed.
pub fn sample_run(
    p: &BlochParams,
    schedule: &MeasurementSchedule,
    f_alice: &FrameMap,
    f_bob: &FrameMap,
    seed: u64,
) -> Result<(Vec<MeasurementRecord>, Vec<MeasurementRecord>)> {
    schedule.validate()?;
    if !p.is_physical() {
        return Err(Error::InvalidState(
            "sample_run requires a positive true state".to_string(),
        ));
    }
    let effective = apply_frame_maps(p, f_alice, f_bob)?;
    let cells = all_cell_distributions(&effective)?;

    let total = schedule.total_pairs();
    let mut alice_records = Vec::with_capacity(total as usize);
    let mut bob_records = Vec::with_capacity(total as usize);
    for pair_id in 0..total {
        let n = party_axis(schedule.axis_policy, seed, Party::Alice, pair_id);
        let m = party_axis(schedule.axis_policy, seed, Party::Bob, pair_id);
        let cell = &cells[(n - 1) as usize][(m - 1) as usize];
        let (alpha, beta) = draw_outcome(cell, seed, pair_id);
        alice_records.push(MeasurementRecord {
            pair_id,
            axis: n,
            outcome: alpha,
        });
        bob_records.push(MeasurementRecord {
            pair_id,
            axis: m,
            outcome: beta,
        });
    }
    Ok((alice_records, bob_records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pauli::Preset;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mixed_state_is_uniform() {
        let p = BlochParams::zero();
        for n in 1..=3 {
            for m in 1..=3 {
                for alpha in [-1i8, 1] {
                    for beta in [-1i8, 1] {
                        assert_abs_diff_eq!(
                            joint_probability(&p, n, m, alpha, beta).unwrap(),
                            0.25,
                            epsilon = 0.0
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn singlet_anticorrelation() {
        let p = Preset::Singlet.bloch_params().unwrap();
        for n in 1..=3 {
            assert_abs_diff_eq!(
                joint_probability(&p, n, n, 1, -1).unwrap(),
                0.5,
                epsilon = 1e-15
            );
            assert_abs_diff_eq!(
                joint_probability(&p, n, n, 1, 1).unwrap(),
                0.0,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn phi_minus_third_axis_correlation() {
        let p = Preset::PhiMinus.bloch_params().unwrap();
        assert_abs_diff_eq!(
            joint_probability(&p, 3, 3, 1, 1).unwrap(),
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn round_robin_covers_all_cells() {
        let mut seen = [[0u32; 3]; 3];
        for pair_id in 0..9u64 {
            let n = party_axis(AxisPolicy::RoundRobin, 0, Party::Alice, pair_id);
            let m = party_axis(AxisPolicy::RoundRobin, 0, Party::Bob, pair_id);
            seen[(n - 1) as usize][(m - 1) as usize] += 1;
        }
        assert!(seen.iter().flatten().all(|&k| k == 1));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = Preset::Werner { p: 0.8 }.bloch_params().unwrap();
        let sched = MeasurementSchedule::round_robin(20);
        let id = FrameMap::identity();
        let run1 = sample_run(&p, &sched, &id, &id, 12345).unwrap();
        let run2 = sample_run(&p, &sched, &id, &id, 12345).unwrap();
        assert_eq!(run1, run2);
        let run3 = sample_run(&p, &sched, &id, &id, 12346).unwrap();
        assert_ne!(run1, run3);
    }

    #[test]
    fn sampling_rejects_indefinite_true_state() {
        let candidate = Preset::BellDiagonal { c: [1.0, 1.0, 1.0] }
            .bloch_params()
            .unwrap();
        let sched = MeasurementSchedule::round_robin(1);
        let id = FrameMap::identity();
        assert!(sample_run(&candidate, &sched, &id, &id, 0).is_err());
    }

    #[test]
    fn negative_cell_probability_is_an_error() {
        // Legal entries, impossible state: full local polarizations with
        // anti-correlation drive one cell probability to -1/2.
        let p = BlochParams::new(
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [[-1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
        )
        .unwrap();
        assert!(matches!(
            joint_probability(&p, 1, 1, -1, -1),
            Err(crate::error::Error::InvalidState(_))
        ));
    }

    #[test]
    fn random_axis_policy_is_local_and_deterministic() {
        let sched = MeasurementSchedule {
            pairs_per_axis_combo: 200,
            axis_policy: AxisPolicy::IndependentUniformRandom,
        };
        let p = Preset::Singlet.bloch_params().unwrap();
        let id = FrameMap::identity();
        let (a1, b1) = sample_run(&p, &sched, &id, &id, 17).unwrap();
        let (a2, b2) = sample_run(&p, &sched, &id, &id, 17).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        // Each party exercises all three axes.
        for records in [&a1, &b1] {
            for axis in 1..=3u8 {
                assert!(records.iter().any(|r| r.axis == axis));
            }
        }
        // Axis draws must not depend on the other party's stream.
        let alice_axes: Vec<u8> = a1.iter().map(|r| r.axis).collect();
        let expected: Vec<u8> = (0..sched.total_pairs())
            .map(|i| party_axis(AxisPolicy::IndependentUniformRandom, 17, Party::Alice, i))
            .collect();
        assert_eq!(alice_axes, expected);
    }

    #[test]
    fn flipped_frame_changes_reported_correlation_sign() {
        let p = Preset::Singlet.bloch_params().unwrap();
        let sched = MeasurementSchedule::round_robin(2000);
        let (alice, bob) = sample_run(
            &p,
            &sched,
            &FrameMap::identity(),
            &FrameMap::space_reflected(),
            99,
        )
        .unwrap();
        // Empirical c_11 over cells where both measured axis 1.
        let mut sum = 0.0;
        let mut count = 0;
        for (ra, rb) in alice.iter().zip(bob.iter()) {
            if ra.axis == 1 && rb.axis == 1 {
                sum += f64::from(ra.outcome) * f64::from(rb.outcome);
                count += 1;
            }
        }
        let c11 = sum / f64::from(count);
        assert!(c11 > 0.9, "expected strongly positive correlation, got {c11}");
    }
}
