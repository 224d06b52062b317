//! Reconstruction of the bona-fide state from exchanged records and the
//! calibration verdict.
//!
//! The decision statistic is the minimum eigenvalue of the reconstructed
//! matrix. Reconstruction never projects onto the positive cone: a
//! negative eigenvalue is the signal, not a numerical defect to repair.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pauli::{BlochParams, POSITIVITY_TOL};
use crate::rng;
use crate::sampling::MeasurementRecord;

/// Bootstrap standard errors at or below this are treated as "tight" when
/// the point estimate is non-negative: an order of magnitude below the
/// physical scale (0.5) of a genuine frame mismatch.
pub const TIGHT_STD_BAND: f64 = 0.05;

/// Joint outcome counts for one (axis, axis) cell, ordered
/// (+,+), (+,−), (−,+), (−,−).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub pp: u64,
    pub pm: u64,
    pub mp: u64,
    pub mm: u64,
}

impl CellCounts {
    pub fn total(&self) -> u64 {
        self.pp + self.pm + self.mp + self.mm
    }

    fn as_array(&self) -> [u64; 4] {
        [self.pp, self.pm, self.mp, self.mm]
    }

    /// Σ α over the cell (Alice-side outcome sum).
    fn alpha_sum(&self) -> i64 {
        self.pp as i64 + self.pm as i64 - self.mp as i64 - self.mm as i64
    }

    /// Σ β over the cell (Bob-side outcome sum).
    fn beta_sum(&self) -> i64 {
        self.pp as i64 - self.pm as i64 + self.mp as i64 - self.mm as i64
    }

    /// Σ αβ over the cell.
    fn product_sum(&self) -> i64 {
        self.pp as i64 - self.pm as i64 - self.mp as i64 + self.mm as i64
    }
}

/// Reconstructed Bloch parameters with their counting statistics.
///
/// The per-cell outcome counts are the complete sufficient statistic of a
/// run; parameters and standard errors are derived from them. An exact
/// (infinite-statistics) estimate carries zero counts and zero errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub params: BlochParams,
    pub cells: [[CellCounts; 3]; 3],
    pub a_std: [f64; 3],
    pub b_std: [f64; 3],
    pub c_std: [[f64; 3]; 3],
}

impl Estimate {
    /// Linear-inversion estimate from one party's record list each.
    ///
    /// Records must join one-to-one on pair_id; every (n, m) cell must
    /// have been measured at least once.
    pub fn from_records(
        alice_records: &[MeasurementRecord],
        bob_records: &[MeasurementRecord],
    ) -> Result<Estimate> {
        if alice_records.len() != bob_records.len() {
            return Err(Error::RecordJoin(format!(
                "record counts differ: alice {}, bob {}",
                alice_records.len(),
                bob_records.len()
            )));
        }
        let mut bob_by_pair = std::collections::HashMap::with_capacity(bob_records.len());
        for r in bob_records {
            r.validate()?;
            if bob_by_pair.insert(r.pair_id, r).is_some() {
                return Err(Error::RecordJoin(format!(
                    "duplicate bob record for pair {}",
                    r.pair_id
                )));
            }
        }
        let mut cells = [[CellCounts::default(); 3]; 3];
        let mut seen = std::collections::HashSet::with_capacity(alice_records.len());
        for ra in alice_records {
            ra.validate()?;
            if !seen.insert(ra.pair_id) {
                return Err(Error::RecordJoin(format!(
                    "duplicate alice record for pair {}",
                    ra.pair_id
                )));
            }
            let rb = bob_by_pair.get(&ra.pair_id).ok_or_else(|| {
                Error::RecordJoin(format!("no bob record for pair {}", ra.pair_id))
            })?;
            let cell = &mut cells[(ra.axis - 1) as usize][(rb.axis - 1) as usize];
            match (ra.outcome, rb.outcome) {
                (1, 1) => cell.pp += 1,
                (1, -1) => cell.pm += 1,
                (-1, 1) => cell.mp += 1,
                (-1, -1) => cell.mm += 1,
                _ => unreachable!("outcomes validated above"),
            }
        }
        Estimate::from_cells(cells)
    }

    /// Rebuild parameters and standard errors from cell counts. Shared by
    /// the record path and the bootstrap resampler.
    pub fn from_cells(cells: [[CellCounts; 3]; 3]) -> Result<Estimate> {
        let mut a = [0.0f64; 3];
        let mut b = [0.0f64; 3];
        let mut c = [[0.0f64; 3]; 3];
        let mut a_std = [0.0f64; 3];
        let mut b_std = [0.0f64; 3];
        let mut c_std = [[0.0f64; 3]; 3];

        for n in 0..3 {
            for m in 0..3 {
                let cell = &cells[n][m];
                let total = cell.total();
                if total == 0 {
                    return Err(Error::InsufficientData(format!(
                        "no measurements for axis pair ({}, {})",
                        n + 1,
                        m + 1
                    )));
                }
                let v = cell.product_sum() as f64 / total as f64;
                c[n][m] = v;
                c_std[n][m] = ((1.0 - v * v).max(0.0) / total as f64).sqrt();
            }
        }
        for n in 0..3 {
            let row_total: u64 = (0..3).map(|m| cells[n][m].total()).sum();
            let alpha: i64 = (0..3).map(|m| cells[n][m].alpha_sum()).sum();
            let v = alpha as f64 / row_total as f64;
            a[n] = v;
            a_std[n] = ((1.0 - v * v).max(0.0) / row_total as f64).sqrt();
        }
        for m in 0..3 {
            let col_total: u64 = (0..3).map(|n| cells[n][m].total()).sum();
            let beta: i64 = (0..3).map(|n| cells[n][m].beta_sum()).sum();
            let v = beta as f64 / col_total as f64;
            b[m] = v;
            b_std[m] = ((1.0 - v * v).max(0.0) / col_total as f64).sqrt();
        }

        Ok(Estimate {
            params: BlochParams::new(a, b, c)?,
            cells,
            a_std,
            b_std,
            c_std,
        })
    }

    /// Infinite-statistics estimate: the parameters are taken as exact.
    pub fn exact(params: BlochParams) -> Estimate {
        Estimate {
            params,
            cells: [[CellCounts::default(); 3]; 3],
            a_std: [0.0; 3],
            b_std: [0.0; 3],
            c_std: [[0.0; 3]; 3],
        }
    }

    pub fn is_exact(&self) -> bool {
        self.cells.iter().flatten().all(|c| c.total() == 0)
    }
}

/// Linear-inversion tomography from the two exchanged record lists.
pub fn estimate(
    alice_records: &[MeasurementRecord],
    bob_records: &[MeasurementRecord],
) -> Result<Estimate> {
    Estimate::from_records(alice_records, bob_records)
}

/// Verdict decision modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Threshold the minimum eigenvalue directly at −1e-10.
    Exact,
    /// Bootstrap the minimum eigenvalue's standard error and decide on a
    /// z-score.
    Statistical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Compatible,
    Incompatible,
    Inconclusive,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Decision::Compatible => "compatible",
            Decision::Incompatible => "incompatible",
            Decision::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

/// The calibration outcome: minimum eigenvalue of the reconstructed
/// matrix, its bootstrap uncertainty, and the resulting decision.
///
/// The verdict is relational only — it never attributes the mismatch to a
/// specific party.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationVerdict {
    pub min_eigenvalue: f64,
    pub min_eigenvalue_std: f64,
    pub decision: Decision,
    /// min_eigenvalue / min_eigenvalue_std. When the standard error is
    /// zero (exact mode, degenerate bootstrap) the score is reported
    /// against the positivity tolerance instead, keeping it finite.
    pub z_score: f64,
}

fn min_eigenvalue_of(params: &BlochParams) -> f64 {
    params.to_matrix().spectrum().min_eigenvalue
}

fn zero_std_verdict(min_eigenvalue: f64) -> CalibrationVerdict {
    let decision = if min_eigenvalue < -POSITIVITY_TOL {
        Decision::Incompatible
    } else {
        Decision::Compatible
    };
    CalibrationVerdict {
        min_eigenvalue,
        min_eigenvalue_std: 0.0,
        decision,
        z_score: min_eigenvalue / POSITIVITY_TOL,
    }
}

/// Resample one cell's outcome counts from its empirical distribution.
fn resample_cell<R: Rng>(cell: &CellCounts, rng: &mut R) -> CellCounts {
    let total = cell.total();
    let counts = cell.as_array();
    let mut out = [0u64; 4];
    let mut remaining = total;
    let mut prob_left = 1.0f64;
    for k in 0..3 {
        if remaining == 0 {
            break;
        }
        let p = (counts[k] as f64 / total as f64 / prob_left).clamp(0.0, 1.0);
        let draw = if p >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, p)
                .expect("binomial parameters are valid")
                .sample(rng)
        };
        out[k] = draw;
        remaining -= draw;
        prob_left -= counts[k] as f64 / total as f64;
    }
    out[3] = remaining;
    CellCounts {
        pp: out[0],
        pm: out[1],
        mp: out[2],
        mm: out[3],
    }
}

/// Decide compatibility from an estimate.
///
/// Exact mode thresholds the minimum eigenvalue at −1e-10. Statistical
/// mode resamples the per-cell outcome counts `n_bootstrap` times,
/// estimates the standard error of the minimum eigenvalue, and declares
/// incompatibility only when z = min/std falls below −z_threshold. A
/// non-negative minimum with tight error is compatible; anything else in
/// the band is inconclusive.
pub fn verdict(
    est: &Estimate,
    mode: Mode,
    z_threshold: f64,
    n_bootstrap: u32,
    seed: u64,
) -> CalibrationVerdict {
    let min_eigenvalue = min_eigenvalue_of(&est.params);
    if mode == Mode::Exact || est.is_exact() || n_bootstrap == 0 {
        return zero_std_verdict(min_eigenvalue);
    }

    let mut resampled_mins = Vec::with_capacity(n_bootstrap as usize);
    for k in 0..n_bootstrap {
        let mut rng = rng::stream(seed, "bootstrap", u64::from(k));
        let mut cells = est.cells;
        for row in cells.iter_mut() {
            for cell in row.iter_mut() {
                *cell = resample_cell(cell, &mut rng);
            }
        }
        let resampled =
            Estimate::from_cells(cells).expect("resampled cells keep their totals");
        resampled_mins.push(min_eigenvalue_of(&resampled.params));
    }
    let n = resampled_mins.len() as f64;
    let mean = resampled_mins.iter().sum::<f64>() / n;
    let var = resampled_mins
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (n - 1.0);
    let std = var.sqrt();

    if std == 0.0 {
        // Degenerate bootstrap: fall back to the exact decision.
        return zero_std_verdict(min_eigenvalue);
    }
    let z_score = min_eigenvalue / std;
    let decision = if z_score < -z_threshold {
        Decision::Incompatible
    } else if z_score > z_threshold
        || (min_eigenvalue >= -POSITIVITY_TOL && std <= TIGHT_STD_BAND)
    {
        Decision::Compatible
    } else {
        Decision::Inconclusive
    };
    CalibrationVerdict {
        min_eigenvalue,
        min_eigenvalue_std: std,
        decision,
        z_score,
    }
}
