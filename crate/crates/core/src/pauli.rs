//! Two-qubit states in the Pauli/Bloch representation.
//!
//! A state is written as
//!
//! ```text
//! ρ = (1/4) (1⊗1 + Σ a_n σ_n⊗1 + Σ b_n 1⊗σ_n + Σ c_nm σ_n⊗σ_m)
//! ```
//!
//! with local polarization vectors `a`, `b` and correlation tensor `c`.
//! The convention is the standard Pauli representation (σ₁ real
//! off-diagonal, σ₂ imaginary, σ₃ diagonal) in the product basis
//! |++⟩, |+−⟩, |−+⟩, |−−⟩ where |±⟩ are the σ₃ eigenvectors. In this
//! convention transposing one subsystem is exactly a sign flip of that
//! side's σ₂ terms.
//!
//! `BlochParams` only promises bounded entries, not positivity: the whole
//! point of the reconstruction pipeline is that frame-corrupted parameter
//! sets can describe matrices that are not states at all.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix4c;

/// Entrywise tolerance for Hermiticity checks on density matrices.
pub const HERMITICITY_TOL: f64 = 1e-12;

/// Tolerance for |Tr ρ − 1|.
pub const TRACE_TOL: f64 = 1e-12;

/// Eigenvalues above −POSITIVITY_TOL count as non-negative. Shared by
/// every positivity, separability, and witness decision in the crate.
pub const POSITIVITY_TOL: f64 = 1e-10;

/// Slack on the |entry| ≤ 1 Bloch bound, covering rotation round-off.
/// Anything beyond it is rejected, never clamped: estimators of ±1-valued
/// observables cannot exceed 1, so an excess signals a bug upstream.
const ENTRY_SLACK: f64 = 1e-9;

fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// σ_n for n ∈ 1..=3 as 2x2 blocks.
pub(crate) fn pauli(n: usize) -> [[Complex64; 2]; 2] {
    match n {
        1 => [[c64(0.0, 0.0), c64(1.0, 0.0)], [c64(1.0, 0.0), c64(0.0, 0.0)]],
        2 => [[c64(0.0, 0.0), c64(0.0, -1.0)], [c64(0.0, 1.0), c64(0.0, 0.0)]],
        3 => [[c64(1.0, 0.0), c64(0.0, 0.0)], [c64(0.0, 0.0), c64(-1.0, 0.0)]],
        _ => unreachable!("pauli index must be 1..=3"),
    }
}

fn identity2() -> [[Complex64; 2]; 2] {
    [[c64(1.0, 0.0), c64(0.0, 0.0)], [c64(0.0, 0.0), c64(1.0, 0.0)]]
}

/// Raw, unvalidated Bloch parameters as they appear in config files and
/// wire payloads.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RawBloch {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub c: [[f64; 3]; 3],
}

/// Local polarization vectors and correlation tensor of a two-qubit state.
///
/// Construction enforces finiteness and the |entry| ≤ 1 bound (every entry
/// is an expectation of a ±1-valued observable). It does NOT enforce
/// positivity of the corresponding matrix; that is a separate check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawBloch", try_from = "RawBloch")]
pub struct BlochParams {
    a: [f64; 3],
    b: [f64; 3],
    c: [[f64; 3]; 3],
}

impl From<BlochParams> for RawBloch {
    fn from(p: BlochParams) -> RawBloch {
        RawBloch { a: p.a, b: p.b, c: p.c }
    }
}

impl TryFrom<RawBloch> for BlochParams {
    type Error = Error;
    fn try_from(raw: RawBloch) -> Result<BlochParams> {
        BlochParams::new(raw.a, raw.b, raw.c)
    }
}

impl BlochParams {
    pub fn new(a: [f64; 3], b: [f64; 3], c: [[f64; 3]; 3]) -> Result<Self> {
        let check = |label: &str, v: f64| -> Result<()> {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite Bloch entry {label} = {v}"
                )));
            }
            if v.abs() > 1.0 + ENTRY_SLACK {
                return Err(Error::InvalidParameter(format!(
                    "Bloch entry {label} = {v} exceeds |entry| <= 1"
                )));
            }
            Ok(())
        };
        for n in 0..3 {
            check(&format!("a[{n}]"), a[n])?;
            check(&format!("b[{n}]"), b[n])?;
            for m in 0..3 {
                check(&format!("c[{n}][{m}]"), c[n][m])?;
            }
        }
        Ok(BlochParams { a, b, c })
    }

    /// Construction path for transforms that provably preserve the entry
    /// bound (sign flips, already-validated data).
    pub(crate) fn new_unchecked(a: [f64; 3], b: [f64; 3], c: [[f64; 3]; 3]) -> Self {
        debug_assert!(BlochParams::new(a, b, c).is_ok());
        BlochParams { a, b, c }
    }

    /// All-zero parameters: the maximally mixed state.
    pub fn zero() -> Self {
        BlochParams {
            a: [0.0; 3],
            b: [0.0; 3],
            c: [[0.0; 3]; 3],
        }
    }

    pub fn a(&self) -> &[f64; 3] {
        &self.a
    }

    pub fn b(&self) -> &[f64; 3] {
        &self.b
    }

    pub fn c(&self) -> &[[f64; 3]; 3] {
        &self.c
    }

    /// Expand into the 4x4 matrix (1/4)(1⊗1 + Σ aσ⊗1 + Σ b1⊗σ + Σ cσ⊗σ).
    /// Hermitian with unit trace by construction; possibly indefinite.
    pub fn to_matrix(&self) -> DensityMatrix {
        let mut acc = Matrix4c::identity();
        for n in 0..3 {
            let sn = pauli(n + 1);
            if self.a[n] != 0.0 {
                acc = acc.add(&Matrix4c::kron(&sn, &identity2()).scale(self.a[n]));
            }
            if self.b[n] != 0.0 {
                acc = acc.add(&Matrix4c::kron(&identity2(), &sn).scale(self.b[n]));
            }
            for m in 0..3 {
                if self.c[n][m] != 0.0 {
                    let sm = pauli(m + 1);
                    acc = acc.add(&Matrix4c::kron(&sn, &sm).scale(self.c[n][m]));
                }
            }
        }
        DensityMatrix::from_valid(acc.scale(0.25))
    }

    /// Whether the corresponding matrix is positive within POSITIVITY_TOL,
    /// i.e. the parameters describe an actual quantum state.
    pub fn is_physical(&self) -> bool {
        self.to_matrix().spectrum().min_eigenvalue >= -POSITIVITY_TOL
    }

    /// Largest entrywise difference across a, b, c.
    pub fn max_abs_diff(&self, other: &BlochParams) -> f64 {
        let mut worst = 0.0f64;
        for n in 0..3 {
            worst = worst.max((self.a[n] - other.a[n]).abs());
            worst = worst.max((self.b[n] - other.b[n]).abs());
            for m in 0..3 {
                worst = worst.max((self.c[n][m] - other.c[n][m]).abs());
            }
        }
        worst
    }
}

/// A 4x4 complex matrix validated to be Hermitian with unit trace.
///
/// Positivity is deliberately not part of the invariant: reconstructed
/// candidates are allowed to be indefinite, and detecting that is the
/// protocol's entire job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix {
    entries: Matrix4c,
}

impl DensityMatrix {
    /// Validating constructor: Hermitian within 1e-12 entrywise and trace
    /// within 1e-12 of one.
    pub fn from_entries(entries: Matrix4c) -> Result<Self> {
        let defect = entries.hermiticity_defect();
        if defect > HERMITICITY_TOL {
            return Err(Error::InvalidState(format!(
                "matrix is not Hermitian: max |M - M†| = {defect:.3e}"
            )));
        }
        let trace = entries.trace();
        if (trace.re - 1.0).abs() > TRACE_TOL || trace.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!(
                "matrix trace is {trace}, expected 1"
            )));
        }
        Ok(DensityMatrix { entries })
    }

    /// For matrices that are Hermitian and unit-trace by construction.
    pub(crate) fn from_valid(entries: Matrix4c) -> Self {
        debug_assert!(entries.hermiticity_defect() <= 16.0 * HERMITICITY_TOL);
        debug_assert!((entries.trace().re - 1.0).abs() <= 16.0 * TRACE_TOL);
        DensityMatrix { entries }
    }

    /// ρ = |v⟩⟨v| for a unit vector v.
    pub fn from_pure(v: &[Complex64; 4]) -> Result<Self> {
        let norm_sq: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if (norm_sq - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "state vector has squared norm {norm_sq}, expected 1"
            )));
        }
        Ok(DensityMatrix::from_valid(Matrix4c::outer(v)))
    }

    pub fn maximally_mixed() -> Self {
        DensityMatrix::from_valid(Matrix4c::identity().scale(0.25))
    }

    pub fn entries(&self) -> &Matrix4c {
        &self.entries
    }

    /// Recover Bloch parameters via a_n = Tr[ρ(σ_n⊗1)] and friends.
    ///
    /// Fails if an extracted entry falls outside [−1, 1]; that can only
    /// happen for Hermitian trace-one matrices too indefinite to carry the
    /// expectation-value interpretation, which never arise from `to_matrix`.
    pub fn to_bloch(&self) -> Result<BlochParams> {
        let mut a = [0.0f64; 3];
        let mut b = [0.0f64; 3];
        let mut cc = [[0.0f64; 3]; 3];
        for n in 0..3 {
            let sn = pauli(n + 1);
            a[n] = self
                .entries
                .matmul(&Matrix4c::kron(&sn, &identity2()))
                .trace()
                .re;
            b[n] = self
                .entries
                .matmul(&Matrix4c::kron(&identity2(), &sn))
                .trace()
                .re;
            for m in 0..3 {
                let sm = pauli(m + 1);
                cc[n][m] = self
                    .entries
                    .matmul(&Matrix4c::kron(&sn, &sm))
                    .trace()
                    .re;
            }
        }
        BlochParams::new(a, b, cc)
    }

    /// Eigenvalues of the (Hermitian) matrix, ascending.
    pub fn spectrum(&self) -> Spectrum {
        let eigenvalues = self.entries.hermitian_eigenvalues();
        Spectrum {
            eigenvalues,
            min_eigenvalue: eigenvalues[0],
        }
    }

    /// ⟨v|ρ|v⟩ for a unit vector v. Real because ρ is Hermitian.
    pub fn fidelity_with_pure(&self, v: &[Complex64; 4]) -> Result<f64> {
        let norm_sq: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if (norm_sq - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "probe vector has squared norm {norm_sq}, expected 1"
            )));
        }
        Ok(self.entries.quadratic_form(v))
    }

    pub fn is_positive(&self) -> bool {
        self.spectrum().min_eigenvalue >= -POSITIVITY_TOL
    }
}

/// Eigenvalues of a Hermitian 4x4 matrix, sorted ascending.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub eigenvalues: [f64; 4],
    pub min_eigenvalue: f64,
}

/// The singlet vector (|+−⟩ − |−+⟩)/√2 in the crate basis ordering.
pub fn singlet_vector() -> [Complex64; 4] {
    let inv = 1.0 / 2.0f64.sqrt();
    [c64(0.0, 0.0), c64(inv, 0.0), c64(-inv, 0.0), c64(0.0, 0.0)]
}

/// The totally correlated vector (|++⟩ − |−−⟩)/√2.
pub fn phi_minus_vector() -> [Complex64; 4] {
    let inv = 1.0 / 2.0f64.sqrt();
    [c64(inv, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), c64(-inv, 0.0)]
}

/// Named state families used throughout the CLI and tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Preset {
    /// Totally anti-correlated pure state: a = b = 0, c = −I.
    Singlet,
    /// Totally correlated pure state (|++⟩ − |−−⟩)/√2: c = diag(−1, 1, 1).
    PhiMinus,
    /// p·singlet + (1−p)·maximally-mixed, i.e. c = −p·I.
    Werner { p: f64 },
    /// a = b = 0 with diagonal correlation tensor.
    BellDiagonal { c: [f64; 3] },
    /// Uncorrelated product state: c = a bᵀ.
    Product { a: [f64; 3], b: [f64; 3] },
}

impl Preset {
    /// Bloch parameterization of the named state.
    pub fn bloch_params(&self) -> Result<BlochParams> {
        match *self {
            Preset::Singlet => BlochParams::new(
                [0.0; 3],
                [0.0; 3],
                [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            ),
            Preset::PhiMinus => BlochParams::new(
                [0.0; 3],
                [0.0; 3],
                [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            ),
            Preset::Werner { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidParameter(format!(
                        "werner mixing parameter p = {p} outside [0, 1]"
                    )));
                }
                BlochParams::new(
                    [0.0; 3],
                    [0.0; 3],
                    [[-p, 0.0, 0.0], [0.0, -p, 0.0], [0.0, 0.0, -p]],
                )
            }
            Preset::BellDiagonal { c } => BlochParams::new(
                [0.0; 3],
                [0.0; 3],
                [[c[0], 0.0, 0.0], [0.0, c[1], 0.0], [0.0, 0.0, c[2]]],
            ),
            Preset::Product { a, b } => {
                let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm(&a) > 1.0 + ENTRY_SLACK || norm(&b) > 1.0 + ENTRY_SLACK {
                    return Err(Error::InvalidParameter(
                        "product-state polarization vectors must lie in the unit ball"
                            .to_string(),
                    ));
                }
                let mut c = [[0.0f64; 3]; 3];
                for n in 0..3 {
                    for m in 0..3 {
                        c[n][m] = a[n] * b[m];
                    }
                }
                BlochParams::new(a, b, c)
            }
        }
    }
}

/// A state as configured: either a named preset or explicit parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateSpec {
    Preset(Preset),
    Explicit(BlochParams),
}

impl StateSpec {
    pub fn bloch_params(&self) -> Result<BlochParams> {
        match self {
            StateSpec::Preset(p) => p.bloch_params(),
            StateSpec::Explicit(p) => Ok(*p),
        }
    }
}

/// Named-state lookup matching the CLI `--state` syntax: a preset name,
/// optionally with `:`-separated parameters (`werner:0.3`,
/// `bell_diagonal:-1,0.5,0.5`, `product:1,0,0;0,0,1`), `mixed` for the
/// maximally mixed state, or an inline JSON object with explicit a/b/c.
pub fn parse_state_spec(text: &str) -> Result<StateSpec> {
    let trimmed = text.trim();
    if trimmed.starts_with('{') {
        let params: BlochParams = serde_json::from_str(trimmed)?;
        return Ok(StateSpec::Explicit(params));
    }
    let (name, args) = match trimmed.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (trimmed, None),
    };
    let parse_floats = |s: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidParameter(format!("cannot parse '{tok}' as a number"))
                })
            })
            .collect()
    };
    let preset = match (name.replace('-', "_").as_str(), args) {
        ("singlet", None) => Preset::Singlet,
        ("phi_minus", None) => Preset::PhiMinus,
        ("mixed", None) => Preset::Werner { p: 0.0 },
        ("werner", Some(a)) => {
            let vals = parse_floats(a)?;
            if vals.len() != 1 {
                return Err(Error::InvalidParameter(
                    "werner takes exactly one parameter, e.g. werner:0.5".to_string(),
                ));
            }
            Preset::Werner { p: vals[0] }
        }
        ("bell_diagonal", Some(a)) => {
            let vals = parse_floats(a)?;
            if vals.len() != 3 {
                return Err(Error::InvalidParameter(
                    "bell_diagonal takes three parameters, e.g. bell_diagonal:-1,0,0"
                        .to_string(),
                ));
            }
            Preset::BellDiagonal {
                c: [vals[0], vals[1], vals[2]],
            }
        }
        ("product", Some(a)) => {
            let halves: Vec<&str> = a.split(';').collect();
            if halves.len() != 2 {
                return Err(Error::InvalidParameter(
                    "product takes two vectors separated by ';', e.g. product:0,0,1;0,0,-1"
                        .to_string(),
                ));
            }
            let av = parse_floats(halves[0])?;
            let bv = parse_floats(halves[1])?;
            if av.len() != 3 || bv.len() != 3 {
                return Err(Error::InvalidParameter(
                    "product vectors must each have three components".to_string(),
                ));
            }
            Preset::Product {
                a: [av[0], av[1], av[2]],
                b: [bv[0], bv[1], bv[2]],
            }
        }
        _ => {
            return Err(Error::InvalidParameter(format!(
                "unknown state spec '{trimmed}'"
            )))
        }
    };
    // Surface bad parameters (e.g. werner p out of range) at parse time.
    preset.bloch_params()?;
    Ok(StateSpec::Preset(preset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn maximally_mixed_is_quarter_identity() {
        let m = BlochParams::zero().to_matrix();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 0.25 } else { 0.0 };
                assert_abs_diff_eq!(m.entries().m[i][j].re, expected, epsilon = 1e-15);
                assert_abs_diff_eq!(m.entries().m[i][j].im, 0.0, epsilon = 1e-15);
            }
        }
        let spec = m.spectrum();
        for e in spec.eigenvalues {
            assert_abs_diff_eq!(e, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn singlet_preset_matches_projector() {
        let params = Preset::Singlet.bloch_params().unwrap();
        let m = params.to_matrix();
        let projector = DensityMatrix::from_pure(&singlet_vector()).unwrap();
        assert!(m.entries().max_abs_diff(projector.entries()) < 1e-14);
        let spec = m.spectrum();
        assert_abs_diff_eq!(spec.min_eigenvalue, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spec.eigenvalues[3], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn flipped_singlet_has_minus_half_eigenvalue() {
        // c = +I is the indefinite reconstruction candidate.
        let params = Preset::BellDiagonal { c: [1.0, 1.0, 1.0] }
            .bloch_params()
            .unwrap();
        let spec = params.to_matrix().spectrum();
        let expected = [-0.5, 0.5, 0.5, 0.5];
        for i in 0..4 {
            assert_abs_diff_eq!(spec.eigenvalues[i], expected[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn phi_minus_bloch_form_from_projector() {
        // Build the |++⟩ − |−−⟩ projector directly and read off a, b, c.
        let m = DensityMatrix::from_pure(&phi_minus_vector()).unwrap();
        let p = m.to_bloch().unwrap();
        let expected = Preset::PhiMinus.bloch_params().unwrap();
        assert!(p.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn bloch_extraction_examples() {
        let p = DensityMatrix::maximally_mixed().to_bloch().unwrap();
        assert_eq!(p.max_abs_diff(&BlochParams::zero()), 0.0);

        let singlet = DensityMatrix::from_pure(&singlet_vector()).unwrap();
        let p = singlet.to_bloch().unwrap();
        let expected = Preset::Singlet.bloch_params().unwrap();
        assert!(p.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn fidelity_examples() {
        let singlet = Preset::Singlet.bloch_params().unwrap().to_matrix();
        assert_abs_diff_eq!(
            singlet.fidelity_with_pure(&singlet_vector()).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let flipped = Preset::BellDiagonal { c: [1.0, 1.0, 1.0] }
            .bloch_params()
            .unwrap()
            .to_matrix();
        assert_abs_diff_eq!(
            flipped.fidelity_with_pure(&singlet_vector()).unwrap(),
            -0.5,
            epsilon = 1e-12
        );
        let mixed = DensityMatrix::maximally_mixed();
        assert_abs_diff_eq!(
            mixed.fidelity_with_pure(&singlet_vector()).unwrap(),
            0.25,
            epsilon = 1e-12
        );
    }

    #[test]
    fn fidelity_rejects_unnormalized_vector() {
        let m = DensityMatrix::maximally_mixed();
        let v = [
            Complex64::new(1.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
        ];
        assert!(m.fidelity_with_pure(&v).is_err());
    }

    #[test]
    fn bloch_bound_is_strict() {
        assert!(BlochParams::new([1.2, 0.0, 0.0], [0.0; 3], [[0.0; 3]; 3]).is_err());
        assert!(BlochParams::new([f64::NAN, 0.0, 0.0], [0.0; 3], [[0.0; 3]; 3]).is_err());
    }

    #[test]
    fn werner_bounds() {
        assert!(Preset::Werner { p: -0.1 }.bloch_params().is_err());
        assert!(Preset::Werner { p: 1.1 }.bloch_params().is_err());
        let zero = Preset::Werner { p: 0.0 }.bloch_params().unwrap();
        assert!(zero.max_abs_diff(&BlochParams::zero()) == 0.0);
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut m = Matrix4c::identity().scale(0.25);
        m.m[0][1] = Complex64::new(0.3, 0.0);
        assert!(DensityMatrix::from_entries(m).is_err());
    }

    #[test]
    fn pure_presets_are_projectors() {
        for preset in [
            Preset::Singlet,
            Preset::PhiMinus,
            Preset::Product {
                a: [0.0, 0.0, 1.0],
                b: [1.0, 0.0, 0.0],
            },
        ] {
            let m = preset.bloch_params().unwrap().to_matrix();
            let m2 = m.entries().matmul(m.entries());
            assert!(
                m2.max_abs_diff(m.entries()) < 1e-10,
                "{preset:?} is not idempotent"
            );
        }
    }

    #[test]
    fn parse_state_specs() {
        assert_eq!(
            parse_state_spec("singlet").unwrap(),
            StateSpec::Preset(Preset::Singlet)
        );
        assert_eq!(
            parse_state_spec("werner:0.2").unwrap(),
            StateSpec::Preset(Preset::Werner { p: 0.2 })
        );
        assert_eq!(
            parse_state_spec("mixed").unwrap(),
            StateSpec::Preset(Preset::Werner { p: 0.0 })
        );
        assert!(parse_state_spec("werner:1.5").is_err());
        assert!(parse_state_spec("nonsense").is_err());
        let explicit = parse_state_spec(r#"{"a":[0,0,0],"b":[0,0,0],"c":[[0,0,0],[0,0,0],[0,0,0]]}"#)
            .unwrap();
        assert_eq!(
            explicit.bloch_params().unwrap().max_abs_diff(&BlochParams::zero()),
            0.0
        );
    }
}
