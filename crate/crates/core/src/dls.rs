//! Cayley-parameterized direct least squares for points and lines with
//! whitened algebraic residuals (DLS and its uncertainty-aware variants).
//!
//! The translation is eliminated in closed form, the remaining cost becomes
//! a quartic in the Cayley parameters after multiplication by
//! `(1 + ‖s‖²)²`, and its stationary points are found by damped Newton from
//! a fixed quasi-uniform grid of starting rotations.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{cayley_to_rotation, rotation_to_cayley, Pose};
use crate::poly::Poly3;
use crate::problem::{residual_covariances, Correspondences, Weighting};
use crate::scalar::Real;

pub type Matrix2x9<T> = SMatrix<T, 2, 9>;
pub type Matrix9<T> = SMatrix<T, 9, 9>;
pub type Vector9<T> = SVector<T, 9>;

/// `r = A vec(R) + T t` for one feature (column-major `vec`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedResidual<T: Real> {
    pub a: Matrix2x9<T>,
    pub t: Matrix2x3<T>,
    pub cov: Matrix2<T>,
}

impl<T: Real> LinearizedResidual<T> {
    pub fn eval(&self, rotation: &Matrix3<T>, translation: &Vector3<T>) -> nalgebra::Vector2<T> {
        self.a * vec9(rotation) + self.t * translation
    }
}

pub fn vec9<T: Real>(r: &Matrix3<T>) -> Vector9<T> {
    Vector9::from_column_slice(r.as_slice())
}

pub fn unvec9<T: Real>(v: &Vector9<T>) -> Matrix3<T> {
    Matrix3::from_column_slice(v.as_slice())
}

/// Row `a x ⊗ …` acting on `vec(R)`: `aᵀ R x = (x ⊗ a)ᵀ vec(R)`.
fn kron_row<T: Real>(x: &Vector3<T>, a: &Vector3<T>) -> SMatrix<T, 1, 9> {
    SMatrix::<T, 1, 9>::from_fn(|_, k| x[k / 3] * a[k % 3])
}

/// One block per feature, points first; `covs` are the residual covariances.
pub fn assemble<T: Real>(corr: &Correspondences<T>, covs: &[Matrix2<T>]) -> Vec<LinearizedResidual<T>> {
    let mut out = Vec::with_capacity(corr.len());
    let (e1, e2) = (Vector3::x(), Vector3::y());
    for (p, cov) in corr.points.iter().zip(covs) {
        let a1 = e1 - Vector3::z() * p.u.x;
        let a2 = e2 - Vector3::z() * p.u.y;
        let mut a = Matrix2x9::zeros();
        a.set_row(0, &kron_row(&p.x, &a1));
        a.set_row(1, &kron_row(&p.x, &a2));
        let mut t = Matrix2x3::zeros();
        t.set_row(0, &a1.transpose());
        t.set_row(1, &a2.transpose());
        out.push(LinearizedResidual { a, t, cov: *cov });
    }
    for (l, cov) in corr.lines.iter().zip(&covs[corr.points.len()..]) {
        let mut a = Matrix2x9::zeros();
        a.set_row(0, &kron_row(&l.p, &l.l));
        a.set_row(1, &kron_row(&l.q, &l.l));
        let mut t = Matrix2x3::zeros();
        t.set_row(0, &l.l.transpose());
        t.set_row(1, &l.l.transpose());
        out.push(LinearizedResidual { a, t, cov: *cov });
    }
    out
}

/// `vec(R̃(s)) = B m(s)` where `R̃ = (1 + ‖s‖²) R(s)`.
pub fn cayley_basis<T: Real>() -> SMatrix<T, 9, 10> {
    let mut b = SMatrix::<T, 9, 10>::zeros();
    let one = T::one();
    let two = T::lit(2.0);
    let mut set = |r: usize, entries: &[(usize, T)]| {
        for &(c, v) in entries {
            b[(r, c)] = v;
        }
    };
    // monomial order: 1, s1, s2, s3, s1², s2², s3², s1s2, s1s3, s2s3
    set(0, &[(0, one), (4, one), (5, -one), (6, -one)]);
    set(1, &[(3, two), (7, two)]);
    set(2, &[(2, -two), (8, two)]);
    set(3, &[(3, -two), (7, two)]);
    set(4, &[(0, one), (4, -one), (5, one), (6, -one)]);
    set(5, &[(1, two), (9, two)]);
    set(6, &[(2, two), (8, two)]);
    set(7, &[(1, -two), (9, two)]);
    set(8, &[(0, one), (4, -one), (5, -one), (6, one)]);
    b
}

/// Quartic `f(s) = ½ m(s)ᵀ Bᵀ G B m(s)` in one rotation chart, with its
/// gradient and Hessian polynomials.
#[derive(Debug, Clone)]
pub struct ChartPolynomial<T: Real> {
    /// Rotations in this chart are `R(s) · base`.
    pub base: Matrix3<T>,
    pub cost: Poly3<T>,
    pub gradient: [Poly3<T>; 3],
    pub hessian: [[Poly3<T>; 3]; 3],
    /// Frobenius norm of the quadratic-form matrix, the chart's cost scale.
    pub scale: T,
}

impl<T: Real> ChartPolynomial<T> {
    fn new(g: &Matrix9<T>, base: Matrix3<T>) -> Self {
        // vec(R(s) base) = (baseᵀ ⊗ I) vec(R(s))
        let k = Matrix9::from_fn(|r, c| {
            let (rc, rr) = (r / 3, r % 3);
            let (cc, cr) = (c / 3, c % 3);
            if rr == cr {
                base[(cc, rc)]
            } else {
                T::zero()
            }
        });
        let b = cayley_basis::<T>();
        let h = b.transpose() * k.transpose() * g * k * b;
        let h = (h + h.transpose()) * T::lit(0.5);
        let cost = Poly3::from_quadratic_form(&h);
        let gradient = [cost.derivative(0), cost.derivative(1), cost.derivative(2)];
        let hessian = [0, 1, 2].map(|i| [0, 1, 2].map(|j| gradient[i].derivative(j)));
        Self {
            base,
            cost,
            gradient,
            hessian,
            scale: h.norm(),
        }
    }

    pub fn rotation(&self, s: &Vector3<T>) -> Matrix3<T> {
        cayley_to_rotation(s) * self.base
    }

    pub fn eval_gradient(&self, s: &Vector3<T>) -> Vector3<T> {
        Vector3::new(self.gradient[0].eval(s), self.gradient[1].eval(s), self.gradient[2].eval(s))
    }

    pub fn eval_hessian(&self, s: &Vector3<T>) -> Matrix3<T> {
        Matrix3::from_fn(|i, j| self.hessian[i][j].eval(s))
    }

    /// Gradient tolerance for a stationary point at `s`.
    pub fn gradient_tolerance(&self, s: &Vector3<T>) -> T {
        let growth = (T::one() + s.norm_squared()).powf(T::lit(1.5));
        T::lit(GRADIENT_TOL) * self.scale.max(T::lit(f64::MIN_POSITIVE)) * growth
    }

    /// Cost with the translation eliminated, `f(s) / (1 + ‖s‖²)²`, with its
    /// gradient and Hessian.
    pub fn true_cost(&self, s: &Vector3<T>) -> (T, Vector3<T>, Matrix3<T>) {
        let f = self.cost.eval(s);
        let gf = self.eval_gradient(s);
        let hf = self.eval_hessian(s);
        let q = T::one() + s.norm_squared();
        let h = T::one() / (q * q);
        let gh = s * (T::lit(-4.0) / (q * q * q));
        let hh = Matrix3::identity() * (T::lit(-4.0) / (q * q * q))
            + s * s.transpose() * (T::lit(24.0) / (q * q * q * q));
        let c = f * h;
        let g = gf * h + gh * f;
        let hess = hf * h + gf * gh.transpose() + gh * gf.transpose() + hh * f;
        (c, g, (hess + hess.transpose()) * T::lit(0.5))
    }
}

/// Relative tolerance on the quartic's gradient.
pub const GRADIENT_TOL: f64 = 1e-8;

/// Cost after eliminating the translation: `½ vec(R)ᵀ G vec(R)`, plus the
/// map `t(R) = −Q_tt⁻¹ Q_tr vec(R)`.
#[derive(Debug, Clone)]
pub struct ReducedCost<T: Real> {
    pub g: Matrix9<T>,
    pub q_tt_inv: Matrix3<T>,
    pub q_tr: SMatrix<T, 3, 9>,
    /// Quartic in the identity chart.
    pub polynomial: ChartPolynomial<T>,
}

impl<T: Real> ReducedCost<T> {
    pub fn translation(&self, r: &Matrix3<T>) -> Vector3<T> {
        -(self.q_tt_inv * (self.q_tr * vec9(r)))
    }

    /// `½ vec(R)ᵀ G vec(R)`.
    pub fn rotation_cost(&self, r: &Matrix3<T>) -> T {
        let v = vec9(r);
        v.dot(&(self.g * v)) * T::lit(0.5)
    }

    /// Quartic for rotations `R(s) · base`.
    pub fn chart(&self, base: Matrix3<T>) -> ChartPolynomial<T> {
        ChartPolynomial::new(&self.g, base)
    }
}

/// Whitened cost `½ Σ ‖W (A vec(R) + T t)‖²` evaluated directly.
pub fn direct_cost<T: Real>(
    blocks: &[LinearizedResidual<T>],
    rotation: &Matrix3<T>,
    translation: &Vector3<T>,
) -> Result<T> {
    let mut c = T::zero();
    for b in blocks {
        let w = crate::linalg::whitening2(&b.cov)?;
        c += (w * b.eval(rotation, translation)).norm_squared();
    }
    Ok(c * T::lit(0.5))
}

const MAX_TRANSLATION_COND: f64 = 1e10;

/// Normal equations in `t` solved symbolically.
pub fn eliminate_translation<T: Real>(blocks: &[LinearizedResidual<T>]) -> Result<ReducedCost<T>> {
    let mut q_tt = Matrix3::zeros();
    let mut q_tr = SMatrix::<T, 3, 9>::zeros();
    let mut q_rr = Matrix9::zeros();
    for b in blocks {
        let info = crate::linalg::information2(&b.cov)?;
        let ti = b.t.transpose() * info;
        q_tt += ti * b.t;
        q_tr += ti * b.a;
        q_rr += b.a.transpose() * info * b.a;
    }
    let q_tt = (q_tt + q_tt.transpose()) * T::lit(0.5);
    let sv = q_tt.singular_values();
    if !(sv.min() * T::lit(MAX_TRANSLATION_COND) > sv.max()) {
        return Err(Error::TranslationGaugeDegenerate);
    }
    let q_tt_inv = q_tt.try_inverse().ok_or(Error::TranslationGaugeDegenerate)?;
    let g = q_rr - q_tr.transpose() * q_tt_inv * q_tr;
    let g = (g + g.transpose()) * T::lit(0.5);
    let polynomial = ChartPolynomial::new(&g, Matrix3::identity());
    Ok(ReducedCost {
        g,
        q_tt_inv,
        q_tr,
        polynomial,
    })
}

/// Unit quaternions `(x, y, z, w)` on a super-Fibonacci spiral.
pub fn super_fibonacci<T: Real>(n: usize) -> Vec<[T; 4]> {
    const PSI: f64 = 1.533_751_168_755_204_3;
    let phi = 2f64.sqrt();
    (0..n)
        .map(|i| {
            let s = i as f64 + 0.5;
            let r = (s / n as f64).sqrt();
            let big_r = (1.0 - s / n as f64).sqrt();
            let alpha = 2.0 * std::f64::consts::PI * s / phi;
            let beta = 2.0 * std::f64::consts::PI * s / PSI;
            [r * alpha.sin(), r * alpha.cos(), big_r * beta.sin(), big_r * beta.cos()].map(T::lit)
        })
        .collect()
}

/// Cayley starting points: the quasi-uniform grid minus rotations beyond
/// `max_angle_deg`.
pub fn seed_grid<T: Real>(n: usize, max_angle_deg: f64) -> Vec<Vector3<T>> {
    let min_w = T::lit((max_angle_deg.to_radians() / 2.0).cos());
    super_fibonacci::<T>(n)
        .into_iter()
        .filter(|q| q[3].abs() >= min_w)
        .map(|q| Vector3::new(q[0], q[1], q[2]) / q[3])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlsConfig<T: Real> {
    pub weighting: Weighting<T>,
    pub n_starts: usize,
    /// Grid rotations beyond this angle are skipped.
    pub max_start_angle_deg: f64,
    /// Also search the charts pre-rotated by 180° about each axis.
    pub extra_charts: bool,
    /// Newton polish of the translation-eliminated cost.
    pub polish: bool,
}

impl<T: Real> DlsConfig<T> {
    pub fn new(weighting: Weighting<T>) -> Self {
        Self {
            weighting,
            n_starts: 40,
            max_start_angle_deg: 175.0,
            extra_charts: true,
            polish: true,
        }
    }
}

/// Stationary point of a chart quartic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlsCandidate<T: Real> {
    pub chart: usize,
    pub s: Vector3<T>,
    pub rotation: Matrix3<T>,
    pub gradient_norm: T,
    /// Translation-eliminated cost `½ vec(R)ᵀ G vec(R)`.
    pub cost: T,
}

const NEWTON_ITERS: usize = 100;
const DEDUP_TOL: f64 = 1e-6;

/// Damped Newton towards a stationary point of the chart quartic.
fn newton_stationary<T: Real>(poly: &ChartPolynomial<T>, mut s: Vector3<T>) -> Option<Vector3<T>> {
    let mut f = poly.cost.eval(&s);
    let mut mu = T::lit(1e-3);
    for _ in 0..NEWTON_ITERS {
        let g = poly.eval_gradient(&s);
        if g.norm() <= poly.gradient_tolerance(&s) {
            return Some(s);
        }
        let h = poly.eval_hessian(&s);
        let diag = (0..3).fold(T::zero(), |a, i| a.max(h[(i, i)].abs())).max(T::lit(f64::MIN_POSITIVE));
        let mut accepted = false;
        for _ in 0..20 {
            let damped = h + Matrix3::identity() * (mu * diag);
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                mu *= T::lit(10.0);
                continue;
            };
            let trial = s + step;
            let ft = poly.cost.eval(&trial);
            if ft <= f {
                s = trial;
                f = ft;
                mu = (mu / T::lit(10.0)).max(T::lit(1e-12));
                accepted = true;
                break;
            }
            mu *= T::lit(10.0);
        }
        if !accepted || !s.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    // undamped Newton to settle onto the stationary point
    for _ in 0..8 {
        let g = poly.eval_gradient(&s);
        if g.norm() <= poly.gradient_tolerance(&s) {
            return Some(s);
        }
        let step = poly.eval_hessian(&s).lu().solve(&(-g))?;
        s += step;
        if !s.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    (poly.eval_gradient(&s).norm() <= poly.gradient_tolerance(&s)).then_some(s)
}

/// Damped Newton on the translation-eliminated cost inside one chart.
fn polish_true_cost<T: Real>(poly: &ChartPolynomial<T>, mut s: Vector3<T>) -> Vector3<T> {
    let (mut c, _, _) = poly.true_cost(&s);
    let mut mu = T::lit(1e-6);
    for _ in 0..30 {
        let (_, g, h) = poly.true_cost(&s);
        let diag = (0..3).fold(T::zero(), |a, i| a.max(h[(i, i)].abs())).max(T::lit(f64::MIN_POSITIVE));
        let mut moved = false;
        for _ in 0..12 {
            let Some(step) = (h + Matrix3::identity() * (mu * diag)).cholesky().map(|ch| ch.solve(&(-g))) else {
                mu *= T::lit(10.0);
                continue;
            };
            let trial = s + step;
            let (ct, _, _) = poly.true_cost(&trial);
            if ct < c {
                let small = step.norm() <= T::lit(1e-14) * (T::one() + s.norm());
                s = trial;
                c = ct;
                mu = (mu / T::lit(10.0)).max(T::lit(1e-12));
                moved = !small;
                break;
            }
            mu *= T::lit(10.0);
        }
        if !moved {
            break;
        }
    }
    s
}

/// Chart base rotations: identity and, optionally, half turns about x, y, z.
pub fn chart_bases<T: Real>(extra: bool) -> Vec<Matrix3<T>> {
    let mut out = vec![Matrix3::identity()];
    if extra {
        for k in 0..3 {
            let mut d = Matrix3::from_diagonal_element(-T::one());
            d[(k, k)] = T::one();
            out.push(d);
        }
    }
    out
}

/// Stationary points of the chart quartics reached from the seed grid,
/// deduplicated by rotation and sorted by cost.
pub fn solve_polynomial_system<T: Real>(
    cost: &ReducedCost<T>,
    config: &DlsConfig<T>,
) -> Result<Vec<DlsCandidate<T>>> {
    let seeds = seed_grid::<T>(config.n_starts, config.max_start_angle_deg);
    let mut found: Vec<DlsCandidate<T>> = Vec::new();
    for (chart, base) in chart_bases::<T>(config.extra_charts).into_iter().enumerate() {
        let poly = if chart == 0 {
            cost.polynomial.clone()
        } else {
            cost.chart(base)
        };
        for s0 in &seeds {
            let Some(s) = newton_stationary(&poly, *s0) else {
                continue;
            };
            let rotation = poly.rotation(&s);
            let cand = DlsCandidate {
                chart,
                s,
                rotation,
                gradient_norm: poly.eval_gradient(&s).norm(),
                cost: cost.rotation_cost(&rotation),
            };
            match found
                .iter_mut()
                .find(|c| (c.rotation - rotation).norm() < T::lit(DEDUP_TOL))
            {
                Some(existing) => {
                    if cand.cost < existing.cost {
                        *existing = cand;
                    }
                }
                None => found.push(cand),
            }
        }
    }
    if found.is_empty() {
        return Err(Error::NoStationaryPoint);
    }
    found.sort_by(|a, b| {
        a.cost
            .partial_cmp(&b.cost)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| lexicographic(&a.s, &b.s))
    });
    Ok(found)
}

fn lexicographic<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> std::cmp::Ordering {
    for i in 0..3 {
        match a[i].partial_cmp(&b[i]) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

#[derive(Debug, Clone, PartialEq)]
pub struct DlsSolution<T: Real> {
    pub pose: Pose<T>,
    pub cost: T,
    pub candidates: Vec<DlsCandidate<T>>,
}

/// Uncertainty-aware DLS(L); `Weighting::Identity` gives the unweighted
/// solver.
pub fn solve_dlsu<T: Real>(corr: &Correspondences<T>, config: &DlsConfig<T>) -> Result<DlsSolution<T>> {
    if corr.len() < 3 {
        return Err(Error::NotEnoughCorrespondences {
            required: 3,
            actual: corr.len(),
        });
    }
    let covs = residual_covariances(corr, &config.weighting)?;
    let blocks = assemble(corr, &covs);
    let reduced = eliminate_translation(&blocks)?;
    let candidates = solve_polynomial_system(&reduced, config)?;

    let bases = chart_bases::<T>(config.extra_charts);
    let mut best: Option<(T, Pose<T>)> = None;
    for cand in &candidates {
        let rotation = if config.polish {
            let poly = reduced.chart(bases[cand.chart]);
            let s = polish_true_cost(&poly, cand.s);
            poly.rotation(&s)
        } else {
            cand.rotation
        };
        let pose = Pose::new(rotation, reduced.translation(&rotation));
        if !(corr.mean_depth(&pose) > T::zero()) {
            continue;
        }
        let c = reduced.rotation_cost(&rotation);
        if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
            best = Some((c, pose));
        }
    }
    let (cost, pose) = best.ok_or(Error::AllCandidatesBehindCamera)?;
    Ok(DlsSolution {
        pose,
        cost,
        candidates,
    })
}

/// Classical DLS(L) with unit weights.
pub fn solve_dls<T: Real>(corr: &Correspondences<T>) -> Result<DlsSolution<T>> {
    solve_dlsu(corr, &DlsConfig::new(Weighting::Identity))
}

/// Cayley parameters of a rotation in the first chart that represents it
/// without the 180° singularity.
pub fn chart_coordinates<T: Real>(r: &Matrix3<T>, extra: bool) -> Option<(usize, Vector3<T>)> {
    chart_bases::<T>(extra)
        .into_iter()
        .enumerate()
        .filter_map(|(k, b)| rotation_to_cayley(&(r * b.transpose())).ok().map(|s| (k, s)))
        .min_by(|a, b| {
            a.1.norm()
                .partial_cmp(&b.1.norm())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}
