//! Constrained mean-field inference for the binary dense CRF.
//!
//! With `p_j = q_j(1)` and `W` the kernel-weight matrix including its
//! diagonal `c_j`, the expected Potts energy is
//! `sum_j p_j D_j - p'Wp + sum_j c_j p_j^2`. `W` is positive semi-definite, so
//! `-p'Wp` is the concave part. Each step linearizes it at the current
//! marginals and minimizes the convex remainder (entropy, unaries and the
//! `c_j p_j^2` curvature) exactly, optionally under `sum_j p_j = tau m`.
//! That step never increases the objective.

use crate::energy::{
    compat_energy_pixel, guard_size, pair_weight, CrfParams, KernelFeatures, MessageBackend, UnaryField,
    EXACT_AUTO_LIMIT,
};
use crate::error::{domain_err, shape_err, Error, Result};
use crate::permutohedral::Lattice;
use crate::types::{ImageLabel, ImagePair, PixelLabeling};

/// Largest pixel count for which [`MessageBackend::Exact`] stores the kernel matrix.
pub const EXACT_MATRIX_LIMIT: usize = 4096;

/// Early-stop threshold on the largest marginal change between steps.
pub const CONVERGENCE_TOL: f64 = 1e-5;

/// Mass tolerance actually used inside the solver, relative to `m`.
///
/// Much tighter than the configured `lambda_tol`: a loose mass would let
/// successive steps land on different constraint sets.
const INNER_MASS_TOL: f64 = 1e-12;

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Factorized posterior `q_j = [q_j(0), q_j(1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    width: usize,
    height: usize,
    probs: Vec<[f64; 2]>,
    target_mass: Option<f64>,
    multiplier: Option<f64>,
}

impl MarginalField {
    pub fn new(width: usize, height: usize, probs: Vec<[f64; 2]>) -> Result<Self> {
        if probs.len() != width * height {
            return Err(shape_err(format!(
                "{} marginals for a {width}x{height} grid",
                probs.len()
            )));
        }
        for q in &probs {
            if !(q[0] >= 0.0 && q[1] >= 0.0 && (q[0] + q[1] - 1.0).abs() <= 1e-9) {
                return Err(domain_err(format!("marginal {q:?} is not a distribution")));
            }
        }
        Ok(Self {
            width,
            height,
            probs,
            target_mass: None,
            multiplier: None,
        })
    }

    /// Marginals from foreground log-odds.
    pub fn from_logits(width: usize, height: usize, z: &[f64]) -> Self {
        let probs = z.iter().map(|&z| [sigmoid(-z), sigmoid(z)]).collect();
        Self {
            width,
            height,
            probs,
            target_mass: None,
            multiplier: None,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[[f64; 2]] {
        &self.probs
    }

    pub fn get(&self, j: usize) -> [f64; 2] {
        self.probs[j]
    }

    /// Active constraint mass `tau m`, if the last step was constrained.
    pub fn target_mass(&self) -> Option<f64> {
        self.target_mass
    }

    /// The constraint multiplier that produced this field, if constrained.
    pub fn multiplier(&self) -> Option<f64> {
        self.multiplier
    }

    /// `sum_j q_j(1)`.
    pub fn foreground_mass(&self) -> f64 {
        self.probs.iter().map(|q| q[1]).sum()
    }

    /// Marginal mode per pixel; ties go to no-change.
    pub fn decode(&self) -> PixelLabeling {
        let labels = self.probs.iter().map(|q| q[1] > q[0]).collect();
        PixelLabeling::new(self.width, self.height, labels).expect("dimensions are consistent")
    }

    fn max_change(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a[1] - b[1]).abs())
            .fold(0.0, f64::max)
    }
}

/// Pixel unaries plus the coupling to the image label.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveUnary {
    width: usize,
    height: usize,
    y: ImageLabel,
    energies: Vec<[f64; 2]>,
}

impl EffectiveUnary {
    pub fn new(unary: &UnaryField, y: ImageLabel, pair: &ImagePair, params: &CrfParams) -> Result<Self> {
        if unary.len() != pair.len() || unary.width() != pair.width() {
            return Err(shape_err(format!(
                "unary field {}x{} does not match pair {}x{}",
                unary.width(),
                unary.height(),
                pair.width(),
                pair.height()
            )));
        }
        let delta = pair.difference_map();
        let energies = unary
            .energies()
            .iter()
            .zip(&delta)
            .map(|(u, &d)| {
                [
                    u[0] + compat_energy_pixel(false, y, d, params),
                    u[1] + compat_energy_pixel(true, y, d, params),
                ]
            })
            .collect();
        Ok(Self {
            width: unary.width(),
            height: unary.height(),
            y,
            energies,
        })
    }

    /// Wraps precomputed energies `a_j(l)`.
    pub fn from_energies(width: usize, height: usize, y: ImageLabel, energies: Vec<[f64; 2]>) -> Result<Self> {
        let u = UnaryField::new(width, height, energies)?;
        Ok(Self {
            width,
            height,
            y,
            energies: u.energies().to_vec(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn label(&self) -> ImageLabel {
        self.y
    }

    pub fn energies(&self) -> &[[f64; 2]] {
        &self.energies
    }
}

/// `q_j = softmax(-a_j)`.
pub fn init_marginals(a: &EffectiveUnary) -> MarginalField {
    let z: Vec<f64> = a.energies.iter().map(|e| e[0] - e[1]).collect();
    MarginalField::from_logits(a.width, a.height, &z)
}

#[derive(Debug, Clone)]
enum Kernel {
    Zero,
    Exact(Vec<f64>),
    Lattice {
        ap: Box<Lattice>,
        sm: Box<Lattice>,
        alpha_ap: f64,
        alpha_sm: f64,
    },
}

/// The pairwise coupling of one image, ready for repeated message passing.
#[derive(Debug, Clone)]
pub struct PairwiseOperator {
    m: usize,
    kernel: Kernel,
    /// Kernel weight of each pixel with itself.
    self_weight: Vec<f64>,
}

impl PairwiseOperator {
    pub fn build(feats: &KernelFeatures, params: &CrfParams) -> Result<Self> {
        let m = feats.len();
        if params.alpha_ap == 0.0 && params.alpha_sm == 0.0 {
            return Ok(Self {
                m,
                kernel: Kernel::Zero,
                self_weight: vec![0.0; m],
            });
        }
        let exact = match params.backend {
            MessageBackend::Exact => true,
            MessageBackend::Lattice => false,
            MessageBackend::Auto => m <= EXACT_AUTO_LIMIT,
        };
        if exact {
            Self::exact(feats, params)
        } else {
            Ok(Self::lattice(feats, params))
        }
    }

    fn exact(feats: &KernelFeatures, params: &CrfParams) -> Result<Self> {
        let m = feats.len();
        if m > EXACT_MATRIX_LIMIT {
            return Err(Error::TooLarge {
                size: m,
                limit: EXACT_MATRIX_LIMIT,
            });
        }
        let mut w = vec![0.0; m * m];
        for j in 0..m {
            for k in j + 1..m {
                let v = pair_weight(feats, params, j, k);
                w[j * m + k] = v;
                w[k * m + j] = v;
            }
        }
        let c = params.alpha_ap + params.alpha_sm;
        Ok(Self {
            m,
            kernel: Kernel::Exact(w),
            self_weight: vec![c; m],
        })
    }

    fn lattice(feats: &KernelFeatures, params: &CrfParams) -> Self {
        let ap = Lattice::build(&feats.appearance);
        let sm = Lattice::build(&feats.smoothness);
        let self_weight = ap
            .self_weights()
            .iter()
            .zip(sm.self_weights())
            .map(|(a, s)| params.alpha_ap * a + params.alpha_sm * s)
            .collect();
        Self {
            m: feats.len(),
            kernel: Kernel::Lattice {
                ap: Box::new(ap),
                sm: Box::new(sm),
                alpha_ap: params.alpha_ap,
                alpha_sm: params.alpha_sm,
            },
            self_weight,
        }
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self.kernel, Kernel::Lattice { .. })
    }

    pub fn self_weights(&self) -> &[f64] {
        &self.self_weight
    }

    /// `msg_j(l) = sum_{k != j} w_jk q_k(1 - l)`.
    pub fn messages(&self, q: &MarginalField) -> Result<Vec<[f64; 2]>> {
        if q.len() != self.m {
            return Err(shape_err(format!(
                "{} marginals for an operator over {} pixels",
                q.len(),
                self.m
            )));
        }
        match &self.kernel {
            Kernel::Zero => Ok(vec![[0.0; 2]; self.m]),
            Kernel::Exact(w) => Ok(w
                .chunks_exact(self.m)
                .map(|row| {
                    let (mut s0, mut s1) = (0.0, 0.0);
                    for (wk, qk) in row.iter().zip(&q.probs) {
                        s0 += wk * qk[0];
                        s1 += wk * qk[1];
                    }
                    [s1, s0]
                })
                .collect()),
            Kernel::Lattice {
                ap,
                sm,
                alpha_ap,
                alpha_sm,
            } => lattice_messages(q, ap, sm, *alpha_ap, *alpha_sm),
        }
    }
}

fn lattice_messages(
    q: &MarginalField,
    ap: &Lattice,
    sm: &Lattice,
    alpha_ap: f64,
    alpha_sm: f64,
) -> Result<Vec<[f64; 2]>> {
    let flat: Vec<f64> = q.probs.iter().flatten().copied().collect();
    let mut msg = vec![[0.0; 2]; q.len()];
    for (lattice, alpha) in [(ap, alpha_ap), (sm, alpha_sm)] {
        if alpha == 0.0 {
            continue;
        }
        let out = lattice.filter(&flat, 2, false)?;
        let sw = lattice.self_weights();
        for (j, m) in msg.iter_mut().enumerate() {
            let qj = q.probs[j];
            m[0] += alpha * (out[2 * j + 1] - sw[j] * qj[1]);
            m[1] += alpha * (out[2 * j] - sw[j] * qj[0]);
        }
    }
    Ok(msg)
}

/// Lattice messages with the lattice's own self-weights removed.
pub fn compute_messages(
    q: &MarginalField,
    lattice_ap: &Lattice,
    lattice_sm: &Lattice,
    alpha_ap: f64,
    alpha_sm: f64,
) -> Result<Vec<[f64; 2]>> {
    if lattice_ap.num_points() != q.len() || lattice_sm.num_points() != q.len() {
        return Err(shape_err(format!(
            "lattices over {} and {} points, marginals over {}",
            lattice_ap.num_points(),
            lattice_sm.num_points(),
            q.len()
        )));
    }
    lattice_messages(q, lattice_ap, lattice_sm, alpha_ap, alpha_sm)
}

fn check_target(m: usize, target: f64) -> Result<()> {
    if !(target > 0.0 && target < m as f64) {
        return Err(domain_err(format!("target mass {target} outside (0, {m})")));
    }
    Ok(())
}

/// Root of an increasing `f` inside `[lo, hi]` with `f(lo) <= 0 <= f(hi)`.
///
/// Newton steps are taken only while they stay in the bracket and at least
/// halve the previous step; otherwise the bracket is bisected, which rules
/// out the cycling plain Newton shows on sigmoid-shaped residuals.
fn safeguarded_root(mut lo: f64, mut hi: f64, start: f64, tol: f64, mut f: impl FnMut(f64) -> (f64, f64)) -> f64 {
    let mut x = start.clamp(lo, hi);
    let mut prev_step = hi - lo;
    for _ in 0..300 {
        let (r, dr) = f(x);
        if r.abs() <= tol {
            return x;
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - r / dr;
        let step = (r / dr).abs();
        // a step below rounding means x is the root to working precision
        if dr > 0.0 && step <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
            return x;
        }
        let next = if dr > 0.0 && newton >= lo && newton <= hi && step * 2.0 <= prev_step {
            newton
        } else {
            0.5 * (lo + hi)
        };
        prev_step = (next - x).abs();
        if prev_step <= f64::EPSILON * (1.0 + x.abs()) || hi - lo <= f64::EPSILON * (1.0 + x.abs()) {
            return next;
        }
        x = next;
    }
    x
}

/// Multiplier for a strictly increasing mass function.
///
/// Safeguarded Newton from `start`; the bracket is found on the way by
/// doubling steps, so a good warm start costs only a few evaluations.
fn find_root(target: f64, tol: f64, start: f64, mut mass: impl FnMut(f64) -> (f64, f64)) -> Result<f64> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut x = start;
    let mut reach = 1.0f64;
    loop {
        let (g, dg) = mass(x);
        let r = g - target;
        if r.abs() <= tol {
            return Ok(x);
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if lo.is_finite() && hi.is_finite() {
            return Ok(safeguarded_root(lo, hi, x, tol, |lam| {
                let (g, dg) = mass(lam);
                (g - target, dg)
            }));
        }
        // still one-sided: Newton, capped by a doubling reach
        let dir = if r < 0.0 { 1.0 } else { -1.0 };
        let newton = if dg > 0.0 { (r / dg).abs() } else { f64::INFINITY };
        x += dir * newton.min(reach);
        reach *= 2.0;
        if x.abs() > 1e12 {
            return Err(domain_err("no bracket for the multiplier"));
        }
    }
}

/// Multiplier `lambda` with `|sum_j sigmoid(b_j + lambda) - target_mass| <= tol`.
pub fn solve_lambda(b: &[f64], target_mass: f64, tol: f64) -> Result<f64> {
    check_target(b.len(), target_mass)?;
    find_root(target_mass, tol, 0.0, |lam| {
        b.iter().fold((0.0, 0.0), |(g, dg), &bj| {
            let s = sigmoid(bj + lam);
            (g + s, dg + s * (1.0 - s))
        })
    })
}

/// Solves `z + 2c sigmoid(z) = t` for `z`; the left side is increasing.
fn solve_curved(t: f64, c: f64, warm: f64) -> f64 {
    if c == 0.0 {
        return t;
    }
    safeguarded_root(t - 2.0 * c, t, warm, 0.0, |z| {
        let s = sigmoid(z);
        (z + 2.0 * c * s - t, 1.0 + 2.0 * c * s * (1.0 - s))
    })
}

/// One concave-convex step.
///
/// `tau` switches on the mass constraint `sum_j q_j(1) = tau m`.
pub fn cccp_step(
    q: &MarginalField,
    a: &EffectiveUnary,
    op: &PairwiseOperator,
    params: &CrfParams,
    tau: Option<f64>,
) -> Result<MarginalField> {
    let m = a.len();
    if q.len() != m || op.len() != m {
        return Err(shape_err(format!(
            "marginals ({}), unaries ({m}) and operator ({}) disagree",
            q.len(),
            op.len()
        )));
    }
    let msg = op.messages(q)?;
    let c = op.self_weights();
    // right-hand side of logit(p) + 2c p = t + lambda
    let t: Vec<f64> = (0..m)
        .map(|j| {
            let b = a.energies[j][1] - a.energies[j][0] + msg[j][1] - msg[j][0];
            -b + 2.0 * c[j] * q.probs[j][1]
        })
        .collect();
    let curved = c.iter().any(|&cj| cj != 0.0);

    let Some(tau) = tau else {
        let z: Vec<f64> = (0..m).map(|j| solve_curved(t[j], c[j], t[j])).collect();
        return Ok(MarginalField::from_logits(a.width, a.height, &z));
    };

    let target = tau * m as f64;
    let tol = params.lambda_tol.min(INNER_MASS_TOL) * m as f64;
    let (z, lam) = if curved {
        let mut z = t.clone();
        let lam = {
            let z = &mut z;
            check_target(m, target)?;
            find_root(target, tol, q.multiplier.unwrap_or(0.0), |lam| {
                let mut g = 0.0;
                let mut dg = 0.0;
                for j in 0..m {
                    z[j] = solve_curved(t[j] + lam, c[j], z[j]);
                    let s = sigmoid(z[j]);
                    let v = s * (1.0 - s);
                    g += s;
                    dg += v / (1.0 + 2.0 * c[j] * v);
                }
                (g, dg)
            })?
        };
        (
            (0..m)
                .map(|j| solve_curved(t[j] + lam, c[j], z[j]))
                .collect::<Vec<f64>>(),
            lam,
        )
    } else {
        let lam = solve_lambda(&t, target, tol)?;
        (t.iter().map(|tj| tj + lam).collect::<Vec<f64>>(), lam)
    };
    let mut out = MarginalField::from_logits(a.width, a.height, &z);
    out.target_mass = Some(target);
    out.multiplier = Some(lam);
    Ok(out)
}

/// Mean-field KL objective up to the log-partition constant, evaluated exactly.
pub fn kl_objective(q: &MarginalField, a: &EffectiveUnary, feats: &KernelFeatures, params: &CrfParams) -> Result<f64> {
    let m = q.len();
    if a.len() != m || feats.len() != m {
        return Err(shape_err(format!(
            "marginals ({m}), unaries ({}) and features ({}) disagree",
            a.len(),
            feats.len()
        )));
    }
    guard_size(m)?;
    let mut total = 0.0;
    for (qj, aj) in q.probs.iter().zip(&a.energies) {
        for l in 0..2 {
            if qj[l] > 0.0 {
                total += qj[l] * qj[l].ln();
            }
            total += qj[l] * aj[l];
        }
    }
    for j in 0..m {
        let qj = q.probs[j];
        for k in j + 1..m {
            let qk = q.probs[k];
            let disagree = qj[0] * qk[1] + qj[1] * qk[0];
            if disagree != 0.0 {
                total += pair_weight(feats, params, j, k) * disagree;
            }
        }
    }
    Ok(total)
}

/// Outcome of [`run_inference`].
#[derive(Debug, Clone)]
pub struct Inference {
    pub marginals: MarginalField,
    pub labeling: PixelLabeling,
    /// CCCP steps taken.
    pub iterations: usize,
    pub converged: bool,
}

/// Mean-field inference; see [`run_inference_with`].
pub fn run_inference(
    a: &EffectiveUnary,
    op: &PairwiseOperator,
    params: &CrfParams,
    tau: Option<f64>,
) -> Result<Inference> {
    run_inference_with(a, op, params, tau, |_, _| {})
}

/// Runs up to `mf_iters` steps from `softmax(-a)`, calling `observe` with the
/// step number (0 for the initial marginals) after each.
///
/// A pair labelled unchanged skips inference and returns the all-zero map.
pub fn run_inference_with(
    a: &EffectiveUnary,
    op: &PairwiseOperator,
    params: &CrfParams,
    tau: Option<f64>,
    mut observe: impl FnMut(usize, &MarginalField),
) -> Result<Inference> {
    if let Some(t) = tau {
        if !(t > 0.0 && t < 1.0) {
            return Err(domain_err(format!("tau must lie in (0, 1), got {t}")));
        }
    }
    if a.y == ImageLabel::NoChange {
        let marginals = MarginalField {
            width: a.width,
            height: a.height,
            probs: vec![[1.0, 0.0]; a.len()],
            target_mass: None,
            multiplier: None,
        };
        observe(0, &marginals);
        return Ok(Inference {
            labeling: PixelLabeling::zeros(a.width, a.height),
            marginals,
            iterations: 0,
            converged: true,
        });
    }
    let mut q = init_marginals(a);
    observe(0, &q);
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=params.mf_iters {
        let next = cccp_step(&q, a, op, params, tau)?;
        observe(it, &next);
        iterations = it;
        let change = next.max_change(&q);
        q = next;
        if change < CONVERGENCE_TOL {
            converged = true;
            break;
        }
    }
    Ok(Inference {
        labeling: q.decode(),
        marginals: q,
        iterations,
        converged,
    })
}
