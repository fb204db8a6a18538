//! Synthetic noisy linear systems `y = A x + n` with a right-rotationally-
//! invariant measurement matrix.
//!
//! `A = U S V^T` is held in factored form: `V` is Haar distributed, `U` is
//! the identity (any fixed unitary factor gives the same observable
//! behavior, since the noise is isotropic and the iteration touches `A`
//! only through `A^T A` and `A^T y`), and the singular values follow a
//! controlled profile normalized to `tr(A A^T)/N = 1`. The signal is IID
//! Bernoulli-Gaussian with unit variance; the noise is white Gaussian.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use thiserror::Error;

/// Largest dimension for which the Haar factor is realized by dense QR
/// orthogonalization; beyond it a fast randomized surrogate is used.
pub const DENSE_HAAR_MAX_DIM: usize = 4096;

const DUMP_MAGIC: &[u8; 4] = b"SSMP";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("invalid system specification: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("instance cannot be serialized: {0}")]
    UnsupportedDump(String),
    #[error("corrupt instance dump: {0}")]
    CorruptDump(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Shape of the nonzero singular value profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumProfile {
    Flat,
    Geometric,
}

impl std::str::FromStr for SpectrumProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "flat" => Ok(Self::Flat),
            "geometric" => Ok(Self::Geometric),
            other => Err(format!("unknown spectrum profile `{other}`")),
        }
    }
}

/// Dimensions and spectral shape of the measurement matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    /// Signal length `N`.
    pub n: usize,
    /// Aspect ratio `M/N`.
    pub delta: f64,
    /// Condition number of the nonzero singular values.
    pub kappa: f64,
    pub profile: SpectrumProfile,
}

impl SpectrumSpec {
    pub fn validate(&self) -> Result<(), SystemError> {
        if self.n == 0 {
            return Err(SystemError::InvalidSpec("signal length must be positive".into()));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(SystemError::InvalidSpec(format!(
                "delta must be in (0, inf), got {}",
                self.delta
            )));
        }
        if !(self.kappa >= 1.0) || !self.kappa.is_finite() {
            return Err(SystemError::InvalidSpec(format!(
                "kappa must be at least 1, got {}",
                self.kappa
            )));
        }
        if self.profile == SpectrumProfile::Flat && self.kappa != 1.0 {
            return Err(SystemError::InvalidSpec(
                "flat profile requires kappa = 1".into(),
            ));
        }
        Ok(())
    }

    /// Observation length `M = round(delta N)`, at least 1.
    pub fn rows(&self) -> usize {
        ((self.delta * self.n as f64).round() as usize).max(1)
    }

    /// Deterministic singular values for this spec, normalized so that
    /// `sum(sigma_i^2) / N = 1` to machine precision.
    pub fn spectrum(&self) -> Result<Spectrum, SystemError> {
        self.validate()?;
        let n = self.n;
        let m = self.rows();
        let k = m.min(n);
        let mut sigma: Vec<f64> = if self.kappa == 1.0 {
            vec![1.0; k]
        } else {
            if k < 2 {
                return Err(SystemError::InvalidSpec(
                    "kappa > 1 needs at least two nonzero singular values".into(),
                ));
            }
            // sigma_i = r^i with r fixed by the condition number
            let r = self.kappa.powf(-1.0 / (k as f64 - 1.0));
            (0..k).map(|i| r.powi(i as i32)).collect()
        };
        let second_moment: f64 = sigma.iter().map(|s| s * s).sum::<f64>() / n as f64;
        let scale = second_moment.sqrt();
        for s in &mut sigma {
            *s /= scale;
        }
        Ok(Spectrum { n, m, sigma })
    }
}

/// Realized singular value array together with the system dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    n: usize,
    m: usize,
    sigma: Vec<f64>,
}

impl Spectrum {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `(1/N) sum_i sigma_i^(2k)` over the nonzero spectrum. `k = 0` counts
    /// the rank block: `min(M, N) / N`.
    pub fn moment(&self, k: usize) -> f64 {
        self.sigma
            .iter()
            .map(|s| s.powi(2 * k as i32))
            .sum::<f64>()
            / self.n as f64
    }

    /// Moments `k = 0..=k_max`.
    pub fn moments(&self, k_max: usize) -> Vec<f64> {
        (0..=k_max).map(|k| self.moment(k)).collect()
    }
}

/// Bernoulli-Gaussian signal prior: each entry is nonzero with probability
/// `rho`, and nonzeros are `N(0, 1/rho)`, so the signal variance is one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalPrior {
    pub rho: f64,
}

impl SignalPrior {
    pub fn new(rho: f64) -> Result<Self, SystemError> {
        let p = Self { rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(SystemError::InvalidSpec(format!(
                "rho must be in (0, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }

    pub fn component_variance(&self) -> f64 {
        1.0 / self.rho
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha20Rng) -> DVector<f64> {
        let sd = self.component_variance().sqrt();
        DVector::from_fn(n, |_, _| {
            if rng.gen::<f64>() < self.rho {
                sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            } else {
                0.0
            }
        })
    }
}

/// One orthogonal factor of the SVD, as an operator.
#[derive(Debug, Clone)]
pub enum OrthogonalFactor {
    Identity(usize),
    Dense(DMatrix<f64>),
    /// Rounds of (sign flip, normalized Walsh-Hadamard transform,
    /// permutation); a standard fast Haar surrogate for large dimensions.
    FastSurrogate(Vec<SurrogateRound>),
}

#[derive(Debug, Clone)]
pub struct SurrogateRound {
    signs: Vec<f64>,
    perm: Vec<usize>,
}

fn fwht_normalized(x: &mut [f64]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(h * 2) {
            for j in block..block + h {
                let a = x[j];
                let b = x[j + h];
                x[j] = a + b;
                x[j + h] = a - b;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / (n as f64).sqrt();
    for v in x.iter_mut() {
        *v *= scale;
    }
}

impl OrthogonalFactor {
    pub fn dim(&self) -> usize {
        match self {
            Self::Identity(n) => *n,
            Self::Dense(q) => q.nrows(),
            Self::FastSurrogate(rounds) => rounds[0].signs.len(),
        }
    }

    /// Haar-distributed dense orthogonal matrix: QR of an IID Gaussian
    /// matrix with the R-diagonal sign correction (plain QR alone is not
    /// Haar).
    pub fn haar_dense(n: usize, rng: &mut ChaCha20Rng) -> Self {
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        let (mut q, r) = g.qr().unpack();
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                for i in 0..n {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        Self::Dense(q)
    }

    /// Fast orthonormal surrogate for dimensions where dense QR is too
    /// expensive. Requires a power-of-two dimension.
    pub fn haar_surrogate(
        n: usize,
        rounds: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self, SystemError> {
        if !n.is_power_of_two() {
            return Err(SystemError::InvalidSpec(format!(
                "fast Haar surrogate needs a power-of-two dimension, got {n}"
            )));
        }
        let mut rs = Vec::with_capacity(rounds);
        for _ in 0..rounds.max(1) {
            let signs = (0..n)
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect();
            // Fisher-Yates
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            rs.push(SurrogateRound { signs, perm });
        }
        Ok(Self::FastSurrogate(rs))
    }

    /// `Q x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Identity(_) => x.clone(),
            Self::Dense(q) => q * x,
            Self::FastSurrogate(rounds) => {
                let mut buf: Vec<f64> = x.as_slice().to_vec();
                let mut tmp = vec![0.0; buf.len()];
                for round in rounds {
                    for (b, s) in buf.iter_mut().zip(&round.signs) {
                        *b *= s;
                    }
                    fwht_normalized(&mut buf);
                    for (i, &p) in round.perm.iter().enumerate() {
                        tmp[i] = buf[p];
                    }
                    std::mem::swap(&mut buf, &mut tmp);
                }
                DVector::from_vec(buf)
            }
        }
    }

    /// `Q^T x`.
    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Identity(_) => x.clone(),
            Self::Dense(q) => q.transpose() * x,
            Self::FastSurrogate(rounds) => {
                let mut buf: Vec<f64> = x.as_slice().to_vec();
                let mut tmp = vec![0.0; buf.len()];
                for round in rounds.iter().rev() {
                    for (i, &p) in round.perm.iter().enumerate() {
                        tmp[p] = buf[i];
                    }
                    std::mem::swap(&mut buf, &mut tmp);
                    fwht_normalized(&mut buf);
                    for (b, s) in buf.iter_mut().zip(&round.signs) {
                        *b *= s;
                    }
                }
                DVector::from_vec(buf)
            }
        }
    }
}

/// One realized system: factored `A`, true signal, observation, noise level.
#[derive(Debug, Clone)]
pub struct SystemInstance {
    spec: SpectrumSpec,
    prior: SignalPrior,
    seed: u64,
    noise_var: f64,
    spectrum: Spectrum,
    u: OrthogonalFactor,
    v: OrthogonalFactor,
    x_true: DVector<f64>,
    y: DVector<f64>,
}

/// Draws a system instance. Deterministic given the seed: the Haar factor
/// is drawn first, then the signal, then the noise.
pub fn generate_system(
    seed: u64,
    spec: &SpectrumSpec,
    prior: &SignalPrior,
    noise_var: f64,
) -> Result<SystemInstance, SystemError> {
    spec.validate()?;
    prior.validate()?;
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(SystemError::InvalidSpec(format!(
            "noise variance must be nonnegative, got {noise_var}"
        )));
    }
    let spectrum = spec.spectrum()?;
    let n = spectrum.n();
    let m = spectrum.m();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let v = if n <= DENSE_HAAR_MAX_DIM {
        OrthogonalFactor::haar_dense(n, &mut rng)
    } else {
        OrthogonalFactor::haar_surrogate(n, 3, &mut rng)?
    };
    let u = OrthogonalFactor::Identity(m);
    let x_true = prior.sample(n, &mut rng);

    let mut inst = SystemInstance {
        spec: *spec,
        prior: *prior,
        seed,
        noise_var,
        spectrum,
        u,
        v,
        x_true,
        y: DVector::zeros(m),
    };
    let mut y = inst.apply_a(&inst.x_true)?;
    if noise_var > 0.0 {
        let sd = noise_var.sqrt();
        for yi in y.iter_mut() {
            *yi += sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
    }
    inst.y = y;
    Ok(inst)
}

impl SystemInstance {
    /// Assemble an instance from explicit parts (used by tests and by
    /// [`SystemInstance::load`]).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        spec: SpectrumSpec,
        prior: SignalPrior,
        seed: u64,
        noise_var: f64,
        spectrum: Spectrum,
        u: OrthogonalFactor,
        v: OrthogonalFactor,
        x_true: DVector<f64>,
        y: DVector<f64>,
    ) -> Result<Self, SystemError> {
        if u.dim() != spectrum.m() {
            return Err(SystemError::DimensionMismatch { expected: spectrum.m(), got: u.dim() });
        }
        if v.dim() != spectrum.n() {
            return Err(SystemError::DimensionMismatch { expected: spectrum.n(), got: v.dim() });
        }
        if x_true.len() != spectrum.n() {
            return Err(SystemError::DimensionMismatch {
                expected: spectrum.n(),
                got: x_true.len(),
            });
        }
        if y.len() != spectrum.m() {
            return Err(SystemError::DimensionMismatch { expected: spectrum.m(), got: y.len() });
        }
        Ok(Self { spec, prior, seed, noise_var, spectrum, u, v, x_true, y })
    }

    pub fn n(&self) -> usize {
        self.spectrum.n()
    }

    pub fn m(&self) -> usize {
        self.spectrum.m()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn spec(&self) -> &SpectrumSpec {
        &self.spec
    }

    pub fn prior(&self) -> &SignalPrior {
        &self.prior
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn x_true(&self) -> &DVector<f64> {
        &self.x_true
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn haar_factor(&self) -> &OrthogonalFactor {
        &self.v
    }

    /// `A x` through the SVD factors.
    pub fn apply_a(&self, x: &DVector<f64>) -> Result<DVector<f64>, SystemError> {
        if x.len() != self.n() {
            return Err(SystemError::DimensionMismatch { expected: self.n(), got: x.len() });
        }
        let t = self.v.apply_transpose(x);
        let mut scaled = DVector::zeros(self.m());
        for (i, &s) in self.spectrum.sigma().iter().enumerate() {
            scaled[i] = s * t[i];
        }
        Ok(self.u.apply(&scaled))
    }

    /// `A^T w` through the SVD factors.
    pub fn apply_ah(&self, w: &DVector<f64>) -> Result<DVector<f64>, SystemError> {
        if w.len() != self.m() {
            return Err(SystemError::DimensionMismatch { expected: self.m(), got: w.len() });
        }
        let t = self.u.apply_transpose(w);
        let mut scaled = DVector::zeros(self.n());
        for (i, &s) in self.spectrum.sigma().iter().enumerate() {
            scaled[i] = s * t[i];
        }
        Ok(self.v.apply(&scaled))
    }

    /// `(1/N) tr((A^T A)^k)` for `k = 0..=k_max` over the nonzero spectrum.
    pub fn spectral_moments(&self, k_max: usize) -> Vec<f64> {
        self.spectrum.moments(k_max)
    }

    /// Binary dump: header (dims, seed, spec, prior, noise), then
    /// little-endian doubles for the singular values, signal, observation,
    /// and any dense orthogonal factors. The fast surrogate is not
    /// serializable.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<(), SystemError> {
        let factor_kind = |f: &OrthogonalFactor| -> Result<u8, SystemError> {
            match f {
                OrthogonalFactor::Identity(_) => Ok(0),
                OrthogonalFactor::Dense(_) => Ok(1),
                OrthogonalFactor::FastSurrogate(_) => Err(SystemError::UnsupportedDump(
                    "fast surrogate factors have no dump format".into(),
                )),
            }
        };
        let u_kind = factor_kind(&self.u)?;
        let v_kind = factor_kind(&self.v)?;
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.m() as u64).to_le_bytes())?;
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        w.write_all(&self.spec.delta.to_le_bytes())?;
        w.write_all(&self.spec.kappa.to_le_bytes())?;
        w.write_all(&[match self.spec.profile {
            SpectrumProfile::Flat => 0u8,
            SpectrumProfile::Geometric => 1u8,
        }])?;
        w.write_all(&self.prior.rho.to_le_bytes())?;
        w.write_all(&self.noise_var.to_le_bytes())?;
        w.write_all(&[u_kind, v_kind])?;
        w.write_all(&(self.spectrum.sigma().len() as u64).to_le_bytes())?;
        let write_slice = |w: &mut W, xs: &[f64]| -> io::Result<()> {
            for &x in xs {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        write_slice(&mut w, self.spectrum.sigma())?;
        write_slice(&mut w, self.x_true.as_slice())?;
        write_slice(&mut w, self.y.as_slice())?;
        if let OrthogonalFactor::Dense(q) = &self.u {
            write_slice(&mut w, q.as_slice())?;
        }
        if let OrthogonalFactor::Dense(q) = &self.v {
            write_slice(&mut w, q.as_slice())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, SystemError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(SystemError::CorruptDump("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != DUMP_VERSION {
            return Err(SystemError::CorruptDump("unsupported version".into()));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64, SystemError> {
            r.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let seed = read_u64(&mut r)?;
        let m = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let mut f64buf = [0u8; 8];
        let mut read_f64 = |r: &mut R| -> Result<f64, SystemError> {
            r.read_exact(&mut f64buf)?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let delta = read_f64(&mut r)?;
        let kappa = read_f64(&mut r)?;
        let mut bytebuf = [0u8; 1];
        r.read_exact(&mut bytebuf)?;
        let profile = match bytebuf[0] {
            0 => SpectrumProfile::Flat,
            1 => SpectrumProfile::Geometric,
            other => return Err(SystemError::CorruptDump(format!("bad profile tag {other}"))),
        };
        let rho = read_f64(&mut r)?;
        let noise_var = read_f64(&mut r)?;
        let mut kinds = [0u8; 2];
        r.read_exact(&mut kinds)?;
        let k = read_u64(&mut r)? as usize;
        if k > m.min(n) {
            return Err(SystemError::CorruptDump("singular value count exceeds rank".into()));
        }
        let read_vec = |r: &mut R, len: usize| -> Result<Vec<f64>, SystemError> {
            let mut out = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                out.push(f64::from_le_bytes(buf));
            }
            Ok(out)
        };
        let sigma = read_vec(&mut r, k)?;
        let x_true = DVector::from_vec(read_vec(&mut r, n)?);
        let y = DVector::from_vec(read_vec(&mut r, m)?);
        let read_factor = |r: &mut R, kind: u8, dim: usize| -> Result<OrthogonalFactor, SystemError> {
            match kind {
                0 => Ok(OrthogonalFactor::Identity(dim)),
                1 => {
                    let data = read_vec(r, dim * dim)?;
                    Ok(OrthogonalFactor::Dense(DMatrix::from_vec(dim, dim, data)))
                }
                other => Err(SystemError::CorruptDump(format!("bad factor tag {other}"))),
            }
        };
        let u = read_factor(&mut r, kinds[0], m)?;
        let v = read_factor(&mut r, kinds[1], n)?;
        Self::from_parts(
            SpectrumSpec { n, delta, kappa, profile },
            SignalPrior { rho },
            seed,
            noise_var,
            Spectrum { n, m, sigma },
            u,
            v,
            x_true,
            y,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn flat_spec(n: usize, delta: f64) -> SpectrumSpec {
        SpectrumSpec { n, delta, kappa: 1.0, profile: SpectrumProfile::Flat }
    }

    #[test]
    fn flat_square_spectrum_is_unit() {
        let s = flat_spec(8, 1.0).spectrum().unwrap();
        for &sv in s.sigma() {
            assert_abs_diff_eq!(sv, 1.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(s.moment(1), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_value_geometric_spectrum_hand_case() {
        // N=4, delta=0.5, kappa=10: sigma = (c, c/10) with c^2 (1 + 1/100) = 4,
        // so sigma_1^2 = 400/101 and sigma_2^2 = 4/101.
        let spec = SpectrumSpec { n: 4, delta: 0.5, kappa: 10.0, profile: SpectrumProfile::Geometric };
        let s = spec.spectrum().unwrap();
        assert_eq!(s.sigma().len(), 2);
        assert_abs_diff_eq!(s.sigma()[0] / s.sigma()[1], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.sigma()[0] * s.sigma()[0], 400.0 / 101.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.moment(1), 1.0, epsilon = 1e-15);
        // second moment by direct power sum
        assert_abs_diff_eq!(s.moment(2), 160016.0 / (10201.0 * 4.0), epsilon = 1e-12);
        // rank block
        assert_abs_diff_eq!(s.moment(0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(flat_spec(0, 1.0).validate().is_err());
        assert!(SpectrumSpec { n: 8, delta: 0.0, kappa: 1.0, profile: SpectrumProfile::Flat }
            .validate()
            .is_err());
        assert!(SpectrumSpec { n: 8, delta: 1.0, kappa: 0.5, profile: SpectrumProfile::Geometric }
            .validate()
            .is_err());
        assert!(SpectrumSpec { n: 8, delta: 1.0, kappa: 2.0, profile: SpectrumProfile::Flat }
            .validate()
            .is_err());
        assert!(SignalPrior::new(0.0).is_err());
        assert!(SignalPrior::new(1.1).is_err());
        assert!(SignalPrior::new(1.0).is_ok());
        assert!(generate_system(0, &flat_spec(8, 1.0), &SignalPrior { rho: 0.5 }, -1.0).is_err());
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let inst =
            generate_system(3, &flat_spec(32, 0.5), &SignalPrior { rho: 0.25 }, 0.0).unwrap();
        let ax = inst.apply_a(inst.x_true()).unwrap();
        assert_eq!(inst.y(), &ax);
    }

    #[test]
    fn observation_noise_level_matches() {
        let noise_var = 0.3;
        let inst = generate_system(
            9,
            &flat_spec(2048, 0.5),
            &SignalPrior { rho: 0.2 },
            noise_var,
        )
        .unwrap();
        let m = inst.m();
        let resid = inst.y() - inst.apply_a(inst.x_true()).unwrap();
        let level = resid.norm_squared() / m as f64;
        let slack = 5.0 / (m as f64).sqrt();
        assert!((level / noise_var - 1.0).abs() < slack, "noise level {level}");
    }

    #[test]
    fn identity_factors_give_identity_operator() {
        let spec = flat_spec(4, 1.0);
        let spectrum = spec.spectrum().unwrap();
        let inst = SystemInstance::from_parts(
            spec,
            SignalPrior { rho: 1.0 },
            0,
            0.0,
            spectrum,
            OrthogonalFactor::Identity(4),
            OrthogonalFactor::Identity(4),
            DVector::zeros(4),
            DVector::zeros(4),
        )
        .unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(inst.apply_a(&e1).unwrap(), e1);
        assert_eq!(inst.apply_ah(&e1).unwrap(), e1);
    }

    #[test]
    fn adjoint_identity_holds() {
        let inst = generate_system(
            5,
            &SpectrumSpec { n: 64, delta: 0.75, kappa: 10.0, profile: SpectrumProfile::Geometric },
            &SignalPrior { rho: 0.3 },
            0.01,
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        for _ in 0..5 {
            let x = DVector::from_fn(inst.n(), |_, _| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let w = DVector::from_fn(inst.m(), |_, _| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let lhs = inst.apply_a(&x).unwrap().dot(&w);
            let rhs = x.dot(&inst.apply_ah(&w).unwrap());
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn unitary_case_round_trips() {
        let inst = generate_system(7, &flat_spec(64, 1.0), &SignalPrior { rho: 0.5 }, 0.0).unwrap();
        let x = inst.x_true().clone();
        let back = inst.apply_ah(&inst.apply_a(&x).unwrap()).unwrap();
        assert!((&back - &x).norm() < 1e-10 * x.norm().max(1.0));
    }

    #[test]
    fn haar_factor_sanity() {
        let n = 64;
        let inst = generate_system(21, &flat_spec(n, 1.0), &SignalPrior { rho: 0.5 }, 0.0).unwrap();
        let q = match inst.haar_factor() {
            OrthogonalFactor::Dense(q) => q.clone(),
            _ => panic!("expected dense factor"),
        };
        let gram = q.transpose() * &q;
        assert!((gram - DMatrix::identity(n, n)).abs().max() < 1e-10);
        let entries: Vec<f64> = q.iter().copied().collect();
        let mean = entries.iter().sum::<f64>() / entries.len() as f64;
        let var = entries.iter().map(|e| e * e).sum::<f64>() / entries.len() as f64;
        assert!(mean.abs() < 5.0 / n as f64);
        assert!((var - 1.0 / n as f64).abs() < 5.0 / n as f64);
    }

    #[test]
    fn prior_sample_statistics() {
        let prior = SignalPrior { rho: 0.15 };
        let n = 4096;
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let x = prior.sample(n, &mut rng);
        let emp_var = x.norm_squared() / n as f64;
        let emp_rho = x.iter().filter(|v| **v != 0.0).count() as f64 / n as f64;
        let slack = 5.0 / (n as f64).sqrt();
        assert!((emp_var - 1.0).abs() < slack, "variance {emp_var}");
        assert!((emp_rho - prior.rho).abs() < slack, "sparsity {emp_rho}");
    }

    #[test]
    fn identical_seeds_reproduce_bit_identical_instances() {
        let spec = SpectrumSpec { n: 32, delta: 0.5, kappa: 5.0, profile: SpectrumProfile::Geometric };
        let prior = SignalPrior { rho: 0.4 };
        let a = generate_system(42, &spec, &prior, 0.05).unwrap();
        let b = generate_system(42, &spec, &prior, 0.05).unwrap();
        assert_eq!(a.x_true(), b.x_true());
        assert_eq!(a.y(), b.y());
        let probe = DVector::from_element(32, 1.0);
        assert_eq!(a.apply_a(&probe).unwrap(), b.apply_a(&probe).unwrap());
    }

    #[test]
    fn dump_load_round_trip() {
        let spec = SpectrumSpec { n: 24, delta: 0.5, kappa: 3.0, profile: SpectrumProfile::Geometric };
        let prior = SignalPrior { rho: 0.4 };
        let inst = generate_system(11, &spec, &prior, 0.02).unwrap();
        let mut buf = Vec::new();
        inst.dump(&mut buf).unwrap();
        let loaded = SystemInstance::load(buf.as_slice()).unwrap();
        assert_eq!(loaded.x_true(), inst.x_true());
        assert_eq!(loaded.y(), inst.y());
        assert_eq!(loaded.spectrum().sigma(), inst.spectrum().sigma());
        let probe = DVector::from_element(inst.n(), 0.5);
        assert_eq!(loaded.apply_a(&probe).unwrap(), inst.apply_a(&probe).unwrap());
    }

    #[test]
    fn surrogate_factor_is_orthonormal() {
        let n = 256;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let f = OrthogonalFactor::haar_surrogate(n, 3, &mut rng).unwrap();
        let mut rng2 = ChaCha20Rng::seed_from_u64(4);
        let x = DVector::from_fn(n, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng2)
        });
        let z = DVector::from_fn(n, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng2)
        });
        let qx = f.apply(&x);
        let qz = f.apply(&z);
        assert_abs_diff_eq!(qx.dot(&qz), x.dot(&z), epsilon = 1e-10 * x.norm() * z.norm());
        let back = f.apply_transpose(&qx);
        assert!((&back - &x).norm() < 1e-10 * x.norm());
        assert!(OrthogonalFactor::haar_surrogate(100, 3, &mut rng).is_err());
    }
}
