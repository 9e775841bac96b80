//! Control-point linear solver for points and lines with whitened algebraic
//! residuals (EPnP, EPnPL and their uncertainty-aware variants).

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::linalg::{eigen3_descending, sorted_symmetric_eigen, weighted_procrustes};
use crate::problem::{whitening_factors, Correspondences, Weighting};
use crate::residuals::{line_algebraic_residual, point_algebraic_residual};
use crate::scalar::Real;

/// Relative singular value below which the feature cloud counts as planar.
pub const PLANAR_THRESHOLD: f64 = 1e-6;
const MAX_COND: f64 = 1e8;

/// What to do with a planar feature set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlanarPolicy {
    /// Three control points spanning the plane and a 9-column system.
    #[default]
    ThreeControlPoints,
    Reject,
}

/// Control points in the world frame: four for general scenes, three for
/// planar ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPointBasis<T: Real> {
    pub points: Vec<Vector3<T>>,
    inverse: Matrix4<T>,
}

/// Barycentric coordinates; the fourth entry is zero for a planar basis.
pub type Barycentric<T> = Vector4<T>;

impl<T: Real> ControlPointBasis<T> {
    /// Basis from explicit control points (3 coplanar or 4 affinely
    /// independent ones).
    pub fn new(points: Vec<Vector3<T>>) -> Result<Self> {
        let inverse = match points.len() {
            4 => {
                let h = Matrix4::from_fn(|r, c| if r < 3 { points[c][r] } else { T::one() });
                let sv = h.singular_values();
                if !(sv.min() > sv.max() / T::lit(MAX_COND)) {
                    return Err(Error::DegenerateGeometry("control points not affinely independent"));
                }
                h.try_inverse()
                    .ok_or(Error::DegenerateGeometry("control points not affinely independent"))?
            }
            3 => {
                // rows 0,1 map x - c1 onto the in-plane coordinates
                let e1 = points[1] - points[0];
                let e2 = points[2] - points[0];
                let g = nalgebra::Matrix2::new(e1.dot(&e1), e1.dot(&e2), e1.dot(&e2), e2.dot(&e2));
                let gi = g
                    .try_inverse()
                    .ok_or(Error::DegenerateGeometry("planar control points are collinear"))?;
                let mut m = Matrix4::zeros();
                for c in 0..3 {
                    m[(0, c)] = gi[(0, 0)] * e1[c] + gi[(0, 1)] * e2[c];
                    m[(1, c)] = gi[(1, 0)] * e1[c] + gi[(1, 1)] * e2[c];
                }
                m
            }
            _ => return Err(Error::DegenerateGeometry("basis needs 3 or 4 control points")),
        };
        Ok(Self { points, inverse })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_planar(&self) -> bool {
        self.points.len() == 3
    }

    /// Coordinates `α` with `C α = x` and `Σ α = 1` (for a planar basis,
    /// `x` is first projected onto the plane).
    pub fn barycentric(&self, x: &Vector3<T>) -> Barycentric<T> {
        if self.is_planar() {
            let d = x - self.points[0];
            let a = self.inverse[(0, 0)] * d.x + self.inverse[(0, 1)] * d.y + self.inverse[(0, 2)] * d.z;
            let b = self.inverse[(1, 0)] * d.x + self.inverse[(1, 1)] * d.y + self.inverse[(1, 2)] * d.z;
            Vector4::new(T::one() - a - b, a, b, T::zero())
        } else {
            self.inverse * Vector4::new(x.x, x.y, x.z, T::one())
        }
    }

    pub fn reconstruct(&self, alpha: &Barycentric<T>) -> Vector3<T> {
        self.points
            .iter()
            .enumerate()
            .fold(Vector3::zeros(), |acc, (j, c)| acc + c * alpha[j])
    }
}

/// Feature weights `1/σ²`; zero variances are floored relative to the rest and
/// a set without any 3D uncertainty gets uniform weights.
pub fn feature_weights<T: Real>(sigma2: &[T]) -> Vec<T> {
    let positive: Vec<T> = sigma2.iter().copied().filter(|&s| s > T::zero()).collect();
    if positive.is_empty() {
        return vec![T::one(); sigma2.len()];
    }
    let mean = positive.iter().fold(T::zero(), |a, &b| a + b) / T::from_usize_lossy(positive.len());
    let floor = mean * T::lit(1e-6);
    sigma2.iter().map(|&s| T::one() / s.max(floor)).collect()
}

/// Weighted-PCA control points: the weighted mean plus the principal axes of
/// the `σ⁻²`-weighted scatter, each scaled by the weighted standard deviation
/// along it.
pub fn select_control_points_weighted<T: Real>(
    points: &[Vector3<T>],
    sigma2: &[T],
    planar: PlanarPolicy,
) -> Result<ControlPointBasis<T>> {
    if points.len() < 3 || sigma2.len() != points.len() {
        return Err(Error::DegenerateGeometry("control points need at least 3 features"));
    }
    let w = feature_weights(sigma2);
    let wsum = w.iter().fold(T::zero(), |a, &b| a + b);
    let c1 = points
        .iter()
        .zip(&w)
        .fold(Vector3::zeros(), |acc, (x, &wi)| acc + x * wi)
        / wsum;
    let scatter = points.iter().zip(&w).fold(nalgebra::Matrix3::zeros(), |acc, (x, &wi)| {
        let d = x - c1;
        acc + d * d.transpose() * wi
    }) / wsum;
    let (vals, vecs) = eigen3_descending(&scatter);
    let l1 = vals[0];
    let rel = |l: T| (l.max(T::zero()) / l1).sqrt();
    if !(l1 > T::zero()) || rel(vals[1]) < T::lit(PLANAR_THRESHOLD) {
        return Err(Error::DegenerateGeometry("features are collinear"));
    }
    // eigenvector signs are arbitrary; orient each axis by the weighted
    // third moment so the basis moves with the world frame
    let mut vecs = vecs;
    for v in vecs.iter_mut() {
        let m3 = points.iter().zip(&w).fold(T::zero(), |acc, (x, &wi)| {
            let s = (x - c1).dot(v);
            acc + wi * s * s * s
        });
        if m3 < T::zero() {
            *v = -*v;
        }
    }
    let axis = |k: usize| c1 + vecs[k] * vals[k].max(T::zero()).sqrt();
    if rel(vals[2]) < T::lit(PLANAR_THRESHOLD) {
        return match planar {
            PlanarPolicy::ThreeControlPoints => ControlPointBasis::new(vec![c1, axis(0), axis(1)]),
            PlanarPolicy::Reject => Err(Error::DegenerateGeometry("features are coplanar")),
        };
    }
    ControlPointBasis::new(vec![c1, axis(0), axis(1), axis(2)])
}

/// Whitened design matrix and its sorted normal-matrix eigensystem.
#[derive(Debug, Clone)]
pub struct EpnpSystem<T: Real> {
    pub m: DMatrix<T>,
    /// Ascending eigenvalues of `MᵀM`.
    pub eigenvalues: DVector<T>,
    /// Matching eigenvectors in columns.
    pub eigenvectors: DMatrix<T>,
}

/// Stacks the point and line blocks in control-point unknowns, each
/// left-multiplied by its whitening factor.
pub fn build_system<T: Real>(
    corr: &Correspondences<T>,
    basis: &ControlPointBasis<T>,
    whitening: &[Matrix2<T>],
) -> Result<EpnpSystem<T>> {
    if whitening.len() != corr.len() {
        return Err(Error::InvalidInput("one whitening factor per feature expected".into()));
    }
    let ncp = basis.len();
    let mut m = DMatrix::zeros(2 * corr.len(), 3 * ncp);
    let mut put = |row: usize, w: &Matrix2<T>, block: &[[T; 12]; 2]| {
        for c in 0..3 * ncp {
            m[(row, c)] = w[(0, 0)] * block[0][c] + w[(0, 1)] * block[1][c];
            m[(row + 1, c)] = w[(1, 0)] * block[0][c] + w[(1, 1)] * block[1][c];
        }
    };
    for (i, p) in corr.points.iter().enumerate() {
        let a = basis.barycentric(&p.x);
        let mut block = [[T::zero(); 12]; 2];
        for j in 0..ncp {
            block[0][3 * j] = a[j];
            block[0][3 * j + 2] = -a[j] * p.u.x;
            block[1][3 * j + 1] = a[j];
            block[1][3 * j + 2] = -a[j] * p.u.y;
        }
        put(2 * i, &whitening[i], &block);
    }
    let np = corr.points.len();
    for (i, l) in corr.lines.iter().enumerate() {
        let ap = basis.barycentric(&l.p);
        let aq = basis.barycentric(&l.q);
        let mut block = [[T::zero(); 12]; 2];
        for j in 0..ncp {
            for c in 0..3 {
                block[0][3 * j + c] = ap[j] * l.l[c];
                block[1][3 * j + c] = aq[j] * l.l[c];
            }
        }
        put(2 * (np + i), &whitening[np + i], &block);
    }
    let mtm = m.transpose() * &m;
    let (eigenvalues, eigenvectors) = sorted_symmetric_eigen(&((&mtm + mtm.transpose()) * T::lit(0.5)));
    Ok(EpnpSystem {
        m,
        eigenvalues,
        eigenvectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpnpConfig<T: Real> {
    pub weighting: Weighting<T>,
    pub planar: PlanarPolicy,
    /// Gauss-Newton iterations on the null-space coefficients.
    pub gn_iters: usize,
}

impl<T: Real> EpnpConfig<T> {
    pub fn new(weighting: Weighting<T>) -> Self {
        Self {
            weighting,
            planar: PlanarPolicy::default(),
            gn_iters: 10,
        }
    }
}

/// Pose recovered from one null-space dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpnpCandidate<T: Real> {
    pub null_dim: usize,
    pub pose: Pose<T>,
    /// Whitened algebraic cost at `pose`.
    pub cost: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpnpSolution<T: Real> {
    pub pose: Pose<T>,
    pub cost: T,
    pub null_dim: usize,
    pub planar: bool,
    pub candidates: Vec<EpnpCandidate<T>>,
}

/// Whitened algebraic cost `Σ ‖W r‖²` of a pose.
pub fn whitened_algebraic_cost<T: Real>(
    corr: &Correspondences<T>,
    whitening: &[Matrix2<T>],
    pose: &Pose<T>,
) -> T {
    let np = corr.points.len();
    let pts = corr
        .points
        .iter()
        .zip(whitening)
        .fold(T::zero(), |a, (p, w)| a + (w * point_algebraic_residual(pose, p)).norm_squared());
    corr.lines
        .iter()
        .zip(&whitening[np..])
        .fold(pts, |a, (l, w)| a + (w * line_algebraic_residual(pose, l)).norm_squared())
}

/// Uncertainty-aware EPnP(L); `Weighting::Identity` gives the classical solver.
pub fn solve_epnpu<T: Real>(corr: &Correspondences<T>, config: &EpnpConfig<T>) -> Result<EpnpSolution<T>> {
    if corr.len() < 4 {
        return Err(Error::NotEnoughCorrespondences {
            required: 4,
            actual: corr.len(),
        });
    }
    let feats = corr.world_features();
    let sigma2 = match config.weighting {
        Weighting::Identity => vec![T::zero(); feats.len()],
        Weighting::Uncertainty(_) => corr.feature_variances(),
    };
    let basis = select_control_points_weighted(&feats, &sigma2, config.planar)?;
    let weights = feature_weights(&sigma2);
    let whitening = normalize_scale(whitening_factors(corr, &config.weighting)?);
    let system = build_system(corr, &basis, &whitening)?;
    let alphas: Vec<_> = feats.iter().map(|x| basis.barycentric(x)).collect();

    let ncp = basis.len();
    let pairs: Vec<(usize, usize)> = (0..ncp).flat_map(|a| (a + 1..ncp).map(move |b| (a, b))).collect();
    let rho: Vec<T> = pairs
        .iter()
        .map(|&(a, b)| (basis.points[a] - basis.points[b]).norm_squared())
        .collect();

    let mut candidates = Vec::new();
    for n in 1..=ncp {
        let Some(init) = initial_betas(&system, &pairs, &rho, n, ncp) else {
            continue;
        };
        let betas = refine_betas(&system, &pairs, &rho, init, config.gn_iters, ncp);
        let Some(pose) = pose_from_betas(&system, &betas, &alphas, &feats, &weights, ncp) else {
            continue;
        };
        candidates.push(EpnpCandidate {
            null_dim: n,
            pose,
            cost: whitened_algebraic_cost(corr, &whitening, &pose),
        });
    }
    let best = candidates
        .iter()
        .filter(|c| c.cost.is_finite())
        .min_by(|a, b| a.cost.partial_cmp(&b.cost).unwrap_or(std::cmp::Ordering::Equal))
        .copied()
        .ok_or(Error::AllCandidatesBehindCamera)?;
    Ok(EpnpSolution {
        pose: best.pose,
        cost: best.cost,
        null_dim: best.null_dim,
        planar: basis.is_planar(),
        candidates,
    })
}

/// Divides all whitening factors by their largest diagonal entry. The
/// solution does not depend on a common scale, and equal covariances then
/// reduce exactly to unit weights.
fn normalize_scale<T: Real>(mut w: Vec<Matrix2<T>>) -> Vec<Matrix2<T>> {
    let s = w
        .iter()
        .fold(T::zero(), |m, w| m.max(w[(0, 0)].abs()).max(w[(1, 1)].abs()));
    if s > T::zero() && s.is_finite() {
        w.iter_mut().for_each(|w| *w /= s);
    }
    w
}

/// Classical EPnP(L) with unit weights.
pub fn solve_epnp<T: Real>(corr: &Correspondences<T>) -> Result<EpnpSolution<T>> {
    solve_epnpu(corr, &EpnpConfig::new(Weighting::Identity))
}

/// Difference of two control points inside null vector `k`.
fn delta<T: Real>(sys: &EpnpSystem<T>, k: usize, a: usize, b: usize, ncp: usize) -> Vector3<T> {
    let v = sys.eigenvectors.column(k);
    debug_assert!(3 * ncp == v.len());
    Vector3::new(
        v[3 * a] - v[3 * b],
        v[3 * a + 1] - v[3 * b + 1],
        v[3 * a + 2] - v[3 * b + 2],
    )
}

/// Coefficients of `β_i β_j` (i ≤ j) in each squared control-point distance.
fn distance_coeffs<T: Real>(
    sys: &EpnpSystem<T>,
    pairs: &[(usize, usize)],
    n: usize,
    ncp: usize,
) -> Vec<Vec<((usize, usize), T)>> {
    pairs
        .iter()
        .map(|&(a, b)| {
            let d: Vec<_> = (0..n).map(|k| delta(sys, k, a, b, ncp)).collect();
            let mut row = Vec::new();
            for i in 0..n {
                for j in i..n {
                    let f = if i == j { T::one() } else { T::lit(2.0) };
                    row.push(((i, j), d[i].dot(&d[j]) * f));
                }
            }
            row
        })
        .collect()
}

fn least_squares<T: Real>(a: DMatrix<T>, b: DVector<T>) -> Option<DVector<T>> {
    let svd = a.svd(true, true);
    let eps = svd.singular_values.max() * T::lit(1e-12);
    svd.solve(&b, eps).ok()
}

/// Linearized null-space coefficients for dimension `n`.
fn initial_betas<T: Real>(
    sys: &EpnpSystem<T>,
    pairs: &[(usize, usize)],
    rho: &[T],
    n: usize,
    ncp: usize,
) -> Option<Vec<T>> {
    let coeffs = distance_coeffs(sys, pairs, n, ncp);
    let solve = |unknowns: &[(usize, usize)]| -> Option<Vec<T>> {
        let a = DMatrix::from_fn(pairs.len(), unknowns.len(), |r, c| {
            coeffs[r]
                .iter()
                .find(|(ij, _)| *ij == unknowns[c])
                .map(|(_, v)| *v)
                .unwrap_or_else(T::zero)
        });
        least_squares(a, DVector::from_column_slice(rho)).map(|x| x.iter().copied().collect())
    };
    // first-row rule: β₁ from B₁₁, the others from B₁ₖ / β₁
    let first_row = |b: Vec<T>| -> Option<Vec<T>> {
        let sign = if b[0] < T::zero() { -T::one() } else { T::one() };
        let b1 = (b[0] * sign).sqrt();
        if !(b1 > T::zero()) {
            return None;
        }
        Some(
            std::iter::once(b1)
                .chain(b[1..].iter().map(|&v| v * sign / b1))
                .collect(),
        )
    };
    // two-leading rule from (B₁₁, B₁₂, B₂₂)
    let two_leading = |b11: T, b12: T, b22: T| -> Option<(T, T)> {
        let (mut b1, b2) = if b11 < T::zero() {
            ((-b11).sqrt(), if b22 < T::zero() { (-b22).sqrt() } else { T::zero() })
        } else {
            (b11.sqrt(), if b22 > T::zero() { b22.sqrt() } else { T::zero() })
        };
        if b12 < T::zero() {
            b1 = -b1;
        }
        if b1 == T::zero() {
            return None;
        }
        Some((b1, b2))
    };
    match (n, ncp) {
        (1, _) => first_row(solve(&[(0, 0)])?),
        (2, _) => {
            let b = solve(&[(0, 0), (0, 1), (1, 1)])?;
            let (b1, b2) = two_leading(b[0], b[1], b[2])?;
            Some(vec![b1, b2])
        }
        (3, 4) => {
            let b = solve(&[(0, 0), (0, 1), (1, 1), (0, 2), (1, 2)])?;
            let (b1, b2) = two_leading(b[0], b[1], b[2])?;
            Some(vec![b1, b2, b[3] / b1])
        }
        (3, 3) => first_row(solve(&[(0, 0), (0, 1), (0, 2)])?),
        (4, 4) => first_row(solve(&[(0, 0), (0, 1), (0, 2), (0, 3)])?),
        _ => None,
    }
}

/// Gauss-Newton on the squared-distance constraints.
fn refine_betas<T: Real>(
    sys: &EpnpSystem<T>,
    pairs: &[(usize, usize)],
    rho: &[T],
    mut betas: Vec<T>,
    iters: usize,
    ncp: usize,
) -> Vec<T> {
    let n = betas.len();
    let coeffs = distance_coeffs(sys, pairs, n, ncp);
    let eval = |b: &[T]| -> (DVector<T>, DMatrix<T>) {
        let mut r = DVector::zeros(pairs.len());
        let mut j = DMatrix::zeros(pairs.len(), n);
        for (p, row) in coeffs.iter().enumerate() {
            let mut v = -rho[p];
            for &((a, c), l) in row {
                v += l * b[a] * b[c];
                j[(p, a)] += l * b[c];
                j[(p, c)] += l * b[a];
            }
            r[p] = v;
        }
        (r, j)
    };
    let mut err = eval(&betas).0.norm_squared();
    for _ in 0..iters {
        let (r, j) = eval(&betas);
        let Some(step) = least_squares(j, -r) else {
            break;
        };
        let trial: Vec<T> = betas.iter().zip(step.iter()).map(|(&b, &s)| b + s).collect();
        let e = eval(&trial).0.norm_squared();
        if !(e < err) {
            break;
        }
        betas = trial;
        err = e;
    }
    betas
}

fn pose_from_betas<T: Real>(
    sys: &EpnpSystem<T>,
    betas: &[T],
    alphas: &[Barycentric<T>],
    feats: &[Vector3<T>],
    weights: &[T],
    ncp: usize,
) -> Option<Pose<T>> {
    let mut cams = vec![Vector3::zeros(); ncp];
    for (k, &b) in betas.iter().enumerate() {
        let v = sys.eigenvectors.column(k);
        for (j, c) in cams.iter_mut().enumerate() {
            *c += Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * b;
        }
    }
    let mut xc: Vec<Vector3<T>> = alphas
        .iter()
        .map(|a| cams.iter().enumerate().fold(Vector3::zeros(), |acc, (j, c)| acc + c * a[j]))
        .collect();
    let mean_z = xc.iter().fold(T::zero(), |a, x| a + x.z);
    if mean_z < T::zero() {
        xc.iter_mut().for_each(|x| *x = -*x);
    }
    let (r, t) = weighted_procrustes(feats, &xc, weights).ok()?;
    let pose = Pose::new(r, t);
    let depth = feats.iter().fold(T::zero(), |a, x| a + pose.transform(x).z);
    if depth > T::zero() && r.iter().all(|v| v.is_finite()) {
        Some(pose)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, so3_exp};
    use crate::residuals::{normalize_line, LineObservation, PointObservation, SceneDepth};
    use crate::problem::DepthSource;
    use nalgebra::{Matrix3, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(rng: &mut ChaCha8Rng, np: usize, nl: usize) -> (Pose<f64>, Correspondences<f64>) {
        let pose = Pose::new(
            so3_exp(&Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            )),
            Vector3::new(0.1, -0.2, 6.0),
        );
        let inv = pose.inverse();
        let mut cam = || {
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(4.0..8.0),
            )
        };
        let points = (0..np)
            .map(|_| {
                let xc = cam();
                PointObservation::new(
                    inv.transform(&xc),
                    Matrix3::identity() * 0.01,
                    project(&xc).unwrap(),
                    Matrix2::identity() * 1e-6,
                )
            })
            .collect();
        let lines = (0..nl)
            .map(|_| {
                let (p, q) = (cam(), cam());
                LineObservation {
                    p: inv.transform(&p),
                    q: inv.transform(&q),
                    cov_p: Matrix3::identity() * 0.01,
                    cov_q: Matrix3::identity() * 0.02,
                    l: normalize_line(&p.cross(&q)).unwrap(),
                    sigma_l2: 1e-6,
                }
            })
            .collect();
        (pose, Correspondences::new(points, lines))
    }

    fn rot_err(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        crate::geometry::so3_log(&(a.transpose() * b)).norm().to_degrees()
    }

    #[test]
    fn barycentric_examples() {
        let cps = vec![
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(2.0, 2.0, 3.0),
            Vector3::new(1.0, 4.0, 3.0),
            Vector3::new(1.0, 2.0, 0.0),
        ];
        let b = ControlPointBasis::new(cps.clone()).unwrap();
        assert!((b.barycentric(&cps[0]) - Vector4::new(1.0, 0.0, 0.0, 0.0)).norm() < 1e-12);
        let mid = (cps[0] + cps[1]) / 2.0;
        assert!((b.barycentric(&mid) - Vector4::new(0.5, 0.5, 0.0, 0.0)).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x: Vector3<f64> = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let a = b.barycentric(&x);
            assert!((b.reconstruct(&a) - x).norm() < 1e-9);
            assert!((a.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn equal_sigma_gives_classical_pca() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vector3<f64>> = (0..30)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..0.5)))
            .collect();
        let w = select_control_points_weighted(&pts, &vec![0.3; 30], PlanarPolicy::Reject).unwrap();
        let u = select_control_points_weighted(&pts, &vec![0.0; 30], PlanarPolicy::Reject).unwrap();
        // classical construction: mean plus sqrt(eig/n) along the axes
        let mean = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / 30.0;
        let cov: Matrix3<f64> = pts.iter().fold(Matrix3::zeros(), |a, p| a + (p - mean) * (p - mean).transpose());
        let eig = cov.symmetric_eigen();
        for (a, b) in w.points.iter().zip(&u.points) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!((w.points[0] - mean).norm() < 1e-12);
        for k in 0..3 {
            let offset = w.points[k + 1] - mean;
            let len = offset.norm();
            let matches = (0..3).any(|i| {
                let v = eig.eigenvectors.column(i);
                (len - (eig.eigenvalues[i] / 30.0).sqrt()).abs() < 1e-10 && (offset.dot(&v).abs() - len).abs() < 1e-10
            });
            assert!(matches);
        }
    }

    #[test]
    fn weighted_mean_tracks_confident_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = Vec::new();
        let mut s2 = Vec::new();
        for i in 0..40 {
            let centre = if i < 20 { Vector3::new(0.0, 0.0, 5.0) } else { Vector3::new(3.0, 1.0, 7.0) };
            pts.push(centre + Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)));
            let sigma: f64 = if i < 20 { 0.01 } else { 10.0 };
            s2.push(sigma * sigma);
        }
        let low_mean = pts[..20].iter().fold(Vector3::zeros(), |a, p| a + p) / 20.0;
        let b = select_control_points_weighted(&pts, &s2, PlanarPolicy::Reject).unwrap();
        assert!((b.points[0] - low_mean).norm() < 1e-3);
    }

    #[test]
    fn planar_points_use_three_control_points_or_fail() {
        let pts: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, (i * i % 7) as f64, 2.0)).collect();
        let s2 = vec![0.0; 10];
        let b = select_control_points_weighted(&pts, &s2, PlanarPolicy::ThreeControlPoints).unwrap();
        assert!(b.is_planar());
        for p in &pts {
            assert!((b.reconstruct(&b.barycentric(p)) - p).norm() < 1e-9);
        }
        assert!(matches!(
            select_control_points_weighted(&pts, &s2, PlanarPolicy::Reject),
            Err(Error::DegenerateGeometry(_))
        ));
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(select_control_points_weighted(&line, &s2, PlanarPolicy::ThreeControlPoints).is_err());
    }

    #[test]
    fn exact_data_is_in_the_null_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (pose, corr) = scene(&mut rng, 12, 4);
        let basis = select_control_points_weighted(&corr.world_features(), &corr.feature_variances(), PlanarPolicy::Reject).unwrap();
        let w = whitening_factors(&corr, &Weighting::Uncertainty(DepthSource::Scene(SceneDepth::new(6.0).unwrap()))).unwrap();
        let sys = build_system(&corr, &basis, &w).unwrap();
        let c_true = DVector::from_iterator(12, basis.points.iter().flat_map(|c| {
            let v = pose.transform(c);
            [v.x, v.y, v.z]
        }));
        assert!((&sys.m * c_true).norm() < 1e-9);
    }

    #[test]
    fn identity_whitening_is_the_plain_matrix_and_doubling_scales_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (_, corr) = scene(&mut rng, 8, 0);
        let basis = select_control_points_weighted(&corr.world_features(), &[0.0; 8], PlanarPolicy::Reject).unwrap();
        let plain = build_system(&corr, &basis, &vec![Matrix2::identity(); 8]).unwrap();
        let mut w = vec![Matrix2::identity(); 8];
        w[3] = crate::linalg::whitening2(&(Matrix2::identity() * 2.0)).unwrap();
        let scaled = build_system(&corr, &basis, &w).unwrap();
        for r in 0..16 {
            let f = if r / 2 == 3 { 1.0 / 2f64.sqrt() } else { 1.0 };
            for c in 0..12 {
                assert!((scaled.m[(r, c)] - f * plain.m[(r, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_points_and_lines_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (np, nl) in [(20, 0), (10, 10), (6, 0), (0, 8)] {
            let (pose, corr) = scene(&mut rng, np, nl);
            for weighting in [
                Weighting::Identity,
                Weighting::Uncertainty(DepthSource::Scene(SceneDepth::new(6.0).unwrap())),
                Weighting::Uncertainty(DepthSource::Hypothesis(pose)),
            ] {
                let sol = solve_epnpu(&corr, &EpnpConfig::new(weighting)).unwrap();
                assert!(rot_err(&sol.pose.rotation, &pose.rotation) < 1e-6, "{np} {nl}");
                assert!((sol.pose.translation - pose.translation).norm() / pose.translation.norm() < 1e-8);
                assert!(sol.candidates.iter().all(|c| sol.cost <= c.cost));
            }
        }
    }

    #[test]
    fn exact_planar_scene_is_recovered() {
        let pose = Pose::new(so3_exp(&Vector3::new(0.3, -0.4, 0.2)), Vector3::new(0.2, 0.1, 5.0));
        let points: Vec<_> = (0..12)
            .map(|i| {
                let x = Vector3::new((i % 4) as f64 - 1.5, (i / 4) as f64 - 1.0 + 0.1 * (i % 3) as f64, 0.0);
                PointObservation::new(x, Matrix3::zeros(), project(&pose.transform(&x)).unwrap(), Matrix2::identity())
            })
            .collect();
        let sol = solve_epnp(&Correspondences::points_only(points)).unwrap();
        assert!(sol.planar);
        assert!(rot_err(&sol.pose.rotation, &pose.rotation) < 1e-6);
    }

    #[test]
    fn common_covariance_scale_does_not_move_the_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (_, mut corr) = scene(&mut rng, 15, 3);
        for p in corr.points.iter_mut() {
            p.u += Vector2::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3));
        }
        let cfg = EpnpConfig::new(Weighting::Uncertainty(DepthSource::Scene(SceneDepth::new(6.0).unwrap())));
        let a = solve_epnpu(&corr, &cfg).unwrap();
        let mut scaled = corr.clone();
        for p in scaled.points.iter_mut() {
            p.cov_x *= 4.0;
            p.cov_u *= 4.0;
        }
        for l in scaled.lines.iter_mut() {
            l.cov_p *= 4.0;
            l.cov_q *= 4.0;
            l.sigma_l2 *= 4.0;
        }
        let b = solve_epnpu(&scaled, &cfg).unwrap();
        assert!((a.pose.rotation - b.pose.rotation).norm() < 1e-10);
        assert!((a.pose.translation - b.pose.translation).norm() < 1e-10);
    }

    #[test]
    fn too_few_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (_, corr) = scene(&mut rng, 3, 0);
        assert!(matches!(solve_epnp(&corr), Err(Error::NotEnoughCorrespondences { .. })));
    }
}
