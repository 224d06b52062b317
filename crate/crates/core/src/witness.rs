//! Single-sided parity/time maps, frame-error maps, and the witness tests
//! built on them.
//!
//! A chirality mismatch acts on the reported Bloch data as a one-sided spin
//! flip (all three σ components negated); a time-arrow mismatch acts as a
//! one-sided σ₂ sign reversal, which is the partial transpose in this
//! crate's Pauli convention. Both can turn a legitimate shared state into
//! parameters whose matrix is indefinite — that indefiniteness is the
//! calibration signal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pauli::{BlochParams, Spectrum, POSITIVITY_TOL};

/// Tolerance for the orthogonality and determinant checks on frame
/// rotations.
const ORTHOGONALITY_TOL: f64 = 1e-12;

/// One of the two measuring parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Alice,
    Bob,
}

impl Party {
    pub fn other(&self) -> Party {
        match self {
            Party::Alice => Party::Bob,
            Party::Bob => Party::Alice,
        }
    }
}

/// Which side(s) a spin flip acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipSide {
    Alice,
    Bob,
    Both,
}

/// The four single-sided witness maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessMap {
    SpinFlipAlice,
    SpinFlipBob,
    TimeReversalAlice,
    TimeReversalBob,
}

impl WitnessMap {
    pub const ALL: [WitnessMap; 4] = [
        WitnessMap::SpinFlipAlice,
        WitnessMap::SpinFlipBob,
        WitnessMap::TimeReversalAlice,
        WitnessMap::TimeReversalBob,
    ];

    /// CLI spelling, e.g. `spin-flip-alice`.
    pub fn parse(text: &str) -> Result<WitnessMap> {
        match text.trim().replace('_', "-").as_str() {
            "spin-flip-alice" => Ok(WitnessMap::SpinFlipAlice),
            "spin-flip-bob" => Ok(WitnessMap::SpinFlipBob),
            "time-reversal-alice" => Ok(WitnessMap::TimeReversalAlice),
            "time-reversal-bob" => Ok(WitnessMap::TimeReversalBob),
            other => Err(Error::InvalidParameter(format!(
                "unknown witness map '{other}'"
            ))),
        }
    }

    pub fn apply(&self, p: &BlochParams) -> BlochParams {
        match self {
            WitnessMap::SpinFlipAlice => spin_flip(p, FlipSide::Alice),
            WitnessMap::SpinFlipBob => spin_flip(p, FlipSide::Bob),
            WitnessMap::TimeReversalAlice => time_reversal(p, Party::Alice),
            WitnessMap::TimeReversalBob => time_reversal(p, Party::Bob),
        }
    }
}

impl std::fmt::Display for WitnessMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            WitnessMap::SpinFlipAlice => "spin-flip-alice",
            WitnessMap::SpinFlipBob => "spin-flip-bob",
            WitnessMap::TimeReversalAlice => "time-reversal-alice",
            WitnessMap::TimeReversalBob => "time-reversal-bob",
        };
        f.write_str(name)
    }
}

/// Raw frame map as written in config files: either a shorthand name or an
/// explicit rotation matrix plus time-arrow flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RawFrameMap {
    Named(String),
    Full {
        rotation: [[f64; 3]; 3],
        #[serde(default)]
        time_flip: bool,
    },
}

/// A party's frame error: an orthogonal 3x3 matrix (proper rotation or
/// improper reflection) plus a time-arrow flag. The time flip composes
/// after the rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawFrameMap", try_from = "RawFrameMap")]
pub struct FrameMap {
    rotation: [[f64; 3]; 3],
    time_flip: bool,
}

impl From<FrameMap> for RawFrameMap {
    fn from(f: FrameMap) -> RawFrameMap {
        RawFrameMap::Full {
            rotation: f.rotation,
            time_flip: f.time_flip,
        }
    }
}

impl TryFrom<RawFrameMap> for FrameMap {
    type Error = Error;
    fn try_from(raw: RawFrameMap) -> Result<FrameMap> {
        match raw {
            RawFrameMap::Named(name) => match name.replace('-', "_").as_str() {
                "identity" => Ok(FrameMap::identity()),
                "space_reflected" => Ok(FrameMap::space_reflected()),
                "time_reversed" => Ok(FrameMap::time_reversed()),
                other => Err(Error::InvalidFrame(format!(
                    "unknown frame name '{other}' (expected identity, space_reflected, or time_reversed)"
                ))),
            },
            RawFrameMap::Full { rotation, time_flip } => FrameMap::new(rotation, time_flip),
        }
    }
}

impl FrameMap {
    /// Validating constructor: R must satisfy R Rᵀ = I within 1e-12.
    pub fn new(rotation: [[f64; 3]; 3], time_flip: bool) -> Result<Self> {
        for row in &rotation {
            for v in row {
                if !v.is_finite() {
                    return Err(Error::InvalidFrame("non-finite rotation entry".to_string()));
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += rotation[i][k] * rotation[j][k];
                }
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ORTHOGONALITY_TOL {
                    return Err(Error::InvalidFrame(format!(
                        "rotation is not orthogonal: (R Rᵀ)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        Ok(FrameMap { rotation, time_flip })
    }

    pub fn identity() -> Self {
        FrameMap {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            time_flip: false,
        }
    }

    /// The fully space-reflected frame, R = −I (improper).
    pub fn space_reflected() -> Self {
        FrameMap {
            rotation: [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            time_flip: false,
        }
    }

    /// Correct axes, mistaken time-arrow.
    pub fn time_reversed() -> Self {
        FrameMap {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            time_flip: true,
        }
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn time_flip(&self) -> bool {
        self.time_flip
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// True for det = +1 (a mere rotation), false for det = −1 (a
    /// chirality mismatch).
    pub fn is_proper(&self) -> bool {
        self.determinant() > 0.0
    }

    pub fn is_identity(&self) -> bool {
        !self.time_flip
            && self
                .rotation
                .iter()
                .enumerate()
                .all(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .all(|(j, v)| (v - if i == j { 1.0 } else { 0.0 }).abs() == 0.0)
                })
    }
}

impl Default for FrameMap {
    fn default() -> Self {
        FrameMap::identity()
    }
}

/// Result of the Peres–Horodecki test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityResult {
    pub separable: bool,
    /// Absolute sum of the negative partial-transpose eigenvalues; zero
    /// exactly when separable.
    pub negativity: f64,
}

/// Reverse all spin components on the given side(s): the reported data of
/// a party whose frame chirality is mistaken.
///
/// alice: (a, b, c) → (−a, b, −c); bob: (a, b, c) → (a, −b, −c);
/// both: (a, b, c) → (−a, −b, c).
pub fn spin_flip(p: &BlochParams, side: FlipSide) -> BlochParams {
    let mut a = *p.a();
    let mut b = *p.b();
    let mut c = *p.c();
    let (flip_a, flip_b) = match side {
        FlipSide::Alice => (true, false),
        FlipSide::Bob => (false, true),
        FlipSide::Both => (true, true),
    };
    if flip_a {
        for v in a.iter_mut() {
            *v = -*v;
        }
    }
    if flip_b {
        for v in b.iter_mut() {
            *v = -*v;
        }
    }
    // c picks up one sign per flipped side.
    if flip_a ^ flip_b {
        for row in c.iter_mut() {
            for v in row.iter_mut() {
                *v = -*v;
            }
        }
    }
    BlochParams::new_unchecked(a, b, c)
}

/// Partial transpose on the given side: a σ₂ sign reversal for that party.
/// For alice: a₂ → −a₂ and c_{2m} → −c_{2m}; for bob: b₂ → −b₂ and
/// c_{n2} → −c_{n2}.
pub fn time_reversal(p: &BlochParams, party: Party) -> BlochParams {
    let mut a = *p.a();
    let mut b = *p.b();
    let mut c = *p.c();
    match party {
        Party::Alice => {
            a[1] = -a[1];
            for m in 0..3 {
                c[1][m] = -c[1][m];
            }
        }
        Party::Bob => {
            b[1] = -b[1];
            for n in 0..3 {
                c[n][1] = -c[n][1];
            }
        }
    }
    BlochParams::new_unchecked(a, b, c)
}

fn rotate_vec(r: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0f64; 3];
    for i in 0..3 {
        for k in 0..3 {
            out[i] += r[i][k] * v[k];
        }
    }
    out
}

/// The Bloch parameters each party would report through its frame error:
/// a′ = R_A a, b′ = R_B b, c′ = R_A c R_Bᵀ, then the σ₂ sign pattern of
/// any side whose time-arrow is flipped.
///
/// For parameters describing an actual state the transformed entries stay
/// within [−1, 1]; other inputs can push an entry out of range, which is
/// reported as an invalid-parameter error.
pub fn apply_frame_maps(
    p: &BlochParams,
    f_alice: &FrameMap,
    f_bob: &FrameMap,
) -> Result<BlochParams> {
    let ra = f_alice.rotation();
    let rb = f_bob.rotation();
    let a = rotate_vec(ra, p.a());
    let b = rotate_vec(rb, p.b());
    let mut c = [[0.0f64; 3]; 3];
    for n in 0..3 {
        for m in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    acc += ra[n][k] * p.c()[k][l] * rb[m][l];
                }
            }
            c[n][m] = acc;
        }
    }
    let mut out = BlochParams::new(a, b, c)?;
    if f_alice.time_flip() {
        out = time_reversal(&out, Party::Alice);
    }
    if f_bob.time_flip() {
        out = time_reversal(&out, Party::Bob);
    }
    Ok(out)
}

/// Peres–Horodecki test: in 2x2 dimensions a state is separable exactly
/// when its partial transpose is positive.
///
/// Errors if `p` is not itself a positive state.
pub fn separability_test(p: &BlochParams) -> Result<SeparabilityResult> {
    let spectrum = p.to_matrix().spectrum();
    if spectrum.min_eigenvalue < -POSITIVITY_TOL {
        return Err(Error::InvalidState(format!(
            "separability test requires a positive state; min eigenvalue = {}",
            spectrum.min_eigenvalue
        )));
    }
    let pt_spectrum = time_reversal(p, Party::Alice).to_matrix().spectrum();
    let negativity: f64 = pt_spectrum
        .eigenvalues
        .iter()
        .filter(|&&e| e < -POSITIVITY_TOL)
        .map(|e| -e)
        .sum();
    Ok(SeparabilityResult {
        separable: negativity == 0.0,
        negativity,
    })
}

/// Spectrum of the candidate matrix after one witness map. The state
/// witnesses the map when the minimum eigenvalue is below −1e-10.
pub fn witness_check(p: &BlochParams, map: WitnessMap) -> Spectrum {
    map.apply(p).to_matrix().spectrum()
}
