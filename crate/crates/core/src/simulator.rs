//! Trajectory generation for the state recursion `h_{t+1} = φ(A·h_t + B·u_t)`.
//!
//! Reproducibility contract: every randomized routine is driven either by a
//! caller-supplied generator or by a `(master_seed, index)` pair fed through
//! [`derive_seed`], so per-trajectory results do not depend on evaluation
//! order and replays are bit-for-bit identical.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::activation::Activation;
use crate::{Error, Result};

/// Derive an independent stream seed from a master seed and a stream index.
///
/// SplitMix64 finalizer over `master + (index + 1)·φ64`; distinct indices can
/// never collide under the same master because the golden-ratio constant is
/// odd. Used as the counter scheme for per-trajectory, per-realization, and
/// per-run generators throughout the crate.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded generator for stream `index` of the given master seed.
pub fn stream_rng(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

/// State matrices plus the entrywise activation.
///
/// `a` is n×n, `b` is n×p; dimension consistency is established at
/// construction and preserved by the read-only accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    act: Activation,
}

impl SystemParams {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, act: Activation) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!(
                "state matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::Dimension(format!(
                "input matrix has {} rows but the state dimension is {}",
                b.nrows(),
                a.nrows()
            )));
        }
        if a.nrows() == 0 || b.ncols() == 0 {
            return Err(Error::Dimension("state and input dimensions must be positive".into()));
        }
        Ok(SystemParams { a, b, act })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn act(&self) -> &Activation {
        &self.act
    }

    /// Same matrices, different activation (systems are compared across
    /// activations on shared draws).
    pub fn with_activation(&self, act: Activation) -> SystemParams {
        SystemParams { a: self.a.clone(), b: self.b.clone(), act }
    }

    /// Next state `φ(A·h + B·u)`.
    pub fn step(&self, h: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut next = DVector::zeros(self.state_dim());
        self.step_into(h, u, &mut next);
        next
    }

    /// Allocation-free variant of [`SystemParams::step`]; `next` must have
    /// length `state_dim`. Both entry points share this arithmetic, so
    /// replays agree bit-for-bit.
    pub fn step_into(&self, h: &DVector<f64>, u: &DVector<f64>, next: &mut DVector<f64>) {
        next.gemv(1.0, &self.a, h, 0.0);
        next.gemv(1.0, &self.b, u, 1.0);
        for v in next.iter_mut() {
            *v = self.act.eval(*v);
        }
    }
}

/// A realized trajectory: inputs `u_0..u_{T−1}` and states `h_0..h_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub inputs: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Number of input steps `T`; there is always one more state.
    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    /// CSV dump for inspection: header `t,u0..,h0..`, one row per step and a
    /// final row holding the terminal state with empty input fields.
    pub fn to_csv(&self) -> String {
        let p = self.input_dim();
        let n = self.state_dim();
        let mut out = String::from("t");
        for j in 0..p {
            out.push_str(&format!(",u{j}"));
        }
        for j in 0..n {
            out.push_str(&format!(",h{j}"));
        }
        out.push('\n');
        for (t, state) in self.states.iter().enumerate() {
            out.push_str(&t.to_string());
            for j in 0..p {
                out.push(',');
                if t < self.inputs.len() {
                    out.push_str(&format!("{}", self.inputs[t][j]));
                }
            }
            for j in 0..n {
                out.push_str(&format!(",{}", state[j]));
            }
            out.push('\n');
        }
        out
    }
}

/// Run the recursion from `h0` (zero when `None`) over the given inputs.
pub fn simulate(
    params: &SystemParams,
    inputs: &[DVector<f64>],
    h0: Option<&DVector<f64>>,
) -> Result<Trajectory> {
    let n = params.state_dim();
    let p = params.input_dim();
    let mut h = match h0 {
        Some(h0) => {
            if h0.len() != n {
                return Err(Error::Dimension(format!(
                    "initial state has length {}, expected {n}",
                    h0.len()
                )));
            }
            h0.clone()
        }
        None => DVector::zeros(n),
    };
    for (t, u) in inputs.iter().enumerate() {
        if u.len() != p {
            return Err(Error::Dimension(format!(
                "input {t} has length {}, expected {p}",
                u.len()
            )));
        }
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(h.clone());
    for u in inputs {
        h = params.step(&h, u);
        states.push(h.clone());
    }
    Ok(Trajectory { inputs: inputs.to_vec(), states })
}

/// `t` i.i.d. standard Gaussian input vectors of dimension `p`.
pub fn gaussian_inputs<R: Rng>(p: usize, t: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..t)
        .map(|_| DVector::from_fn(p, |_, _| StandardNormal.sample(rng)))
        .collect()
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// R-diagonal sign correction.
fn haar_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Random system: `A` is `target_spectral_norm` times a Haar orthogonal
/// matrix (so every singular value equals the target exactly), `B` has
/// i.i.d. standard Gaussian entries.
pub fn random_system<R: Rng>(
    n: usize,
    p: usize,
    target_spectral_norm: f64,
    act: Activation,
    rng: &mut R,
) -> Result<SystemParams> {
    if n == 0 || p == 0 {
        return Err(Error::Dimension("state and input dimensions must be positive".into()));
    }
    if !(target_spectral_norm >= 0.0 && target_spectral_norm.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "target spectral norm must be finite and nonnegative, got {target_spectral_norm}"
        )));
    }
    let a = if target_spectral_norm == 0.0 {
        DMatrix::zeros(n, n)
    } else {
        haar_orthogonal(n, rng) * target_spectral_norm
    };
    let b = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng));
    SystemParams::new(a, b, act)
}

/// State at time `t` of the auxiliary system whose inputs `u_τ` are zeroed
/// for `τ < t − l` (the `l`-truncated state, started from the zero state).
///
/// Because the activation fixes the origin, the auxiliary state is exactly
/// zero until the window opens, so the recursion starts at `max(0, t − l)`.
pub fn truncated_state(
    params: &SystemParams,
    inputs: &[DVector<f64>],
    t: usize,
    l: usize,
) -> Result<DVector<f64>> {
    if t > inputs.len() {
        return Err(Error::Dimension(format!(
            "requested state at time {t} but only {} inputs are available",
            inputs.len()
        )));
    }
    let start = t.saturating_sub(l);
    let mut h = DVector::zeros(params.state_dim());
    let mut next = DVector::zeros(params.state_dim());
    for u in &inputs[start..t] {
        params.step_into(&h, u, &mut next);
        std::mem::swap(&mut h, &mut next);
    }
    Ok(h)
}

/// Sub-sample `(h, u)` pairs at timestamps `(i − 1)·l + tau` for `i = 1, 2, …`
/// while the timestamp admits a pair; requires `1 ≤ tau ≤ l`. Returns an
/// empty vector when the trajectory is too short to reach `tau`.
pub fn subsample(
    traj: &Trajectory,
    l: usize,
    tau: usize,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    if l < 1 || tau < 1 || tau > l {
        return Err(Error::InvalidParameter(format!(
            "sub-sampling requires 1 ≤ tau ≤ l, got l = {l}, tau = {tau}"
        )));
    }
    if traj.num_inputs() == 0 {
        return Ok(Vec::new());
    }
    let max_t = traj.num_inputs() - 1;
    let mut out = Vec::new();
    let mut t = tau;
    while t <= max_t {
        out.push((traj.states[t].clone(), traj.inputs[t].clone()));
        t += l;
    }
    Ok(out)
}

/// One regression sample drawn from an independent trajectory:
/// `(h_{t0+1}, h_{t0}, u_{t0})`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSample {
    pub next_state: DVector<f64>,
    pub state: DVector<f64>,
    pub input: DVector<f64>,
}

/// Draw `num_trajectories` independent trajectories from the zero state and
/// keep the triple `(h_{t0+1}, h_{t0}, u_{t0})` from each. Trajectory `i`
/// uses the generator for stream `i` of `master_seed`.
pub fn multi_trajectory_sample(
    params: &SystemParams,
    num_trajectories: usize,
    t0: usize,
    master_seed: u64,
) -> Result<Vec<StateSample>> {
    if t0 < 1 {
        return Err(Error::InvalidParameter("sampling horizon t0 must be at least 1".into()));
    }
    let p = params.input_dim();
    let mut out = Vec::with_capacity(num_trajectories);
    for i in 0..num_trajectories {
        let mut rng = stream_rng(master_seed, i as u64);
        let inputs = gaussian_inputs(p, t0 + 1, &mut rng);
        let traj = simulate(params, &inputs, None)?;
        out.push(StateSample {
            next_state: traj.states[t0 + 1].clone(),
            state: traj.states[t0].clone(),
            input: traj.inputs[t0].clone(),
        });
    }
    Ok(out)
}
