use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{score, Problem, WarmStart, MAX_INNER, MAX_OUTER, OUTER_TOL};
use crate::error::{Error, Result};
use crate::glm::FitResult;
use crate::tabular::ColumnRole;

const INNER_TOL: f64 = 1e-13;
/// Stationarity residual at which a latent fit is accepted.
const KKT_TOL: f64 = 1e-9;
/// Floor on the stationarity residual of the quadratic model at which block descent stops.
const INNER_KKT_TOL: f64 = 1e-11;
/// Block descent only needs to beat the current outer residual by this factor.
const INNER_FORCING: f64 = 0.01;
/// Sweeps between stationarity checks of the quadratic model.
const CHECK_EVERY: usize = 10;

#[derive(Debug, Clone)]
struct Group {
    /// Design columns receiving the latent copies, in latent order.
    cols: Vec<usize>,
    weight: f64,
    /// Offset of the group in the latent vector.
    start: usize,
}

/// Overlapping latent parameterization of the hierarchical group lasso.
///
/// Unpenalized columns get one free latent coordinate each. Every penalized
/// main effect (treatment included) is a singleton group of weight 1, and every
/// treatment interaction forms a group with fresh copies of the treatment and
/// covariate main effects, weighted by the square root of its size. The
/// design-scale coefficient of a column is the sum of its copies.
#[derive(Debug, Clone)]
pub(crate) struct LatentMap {
    n_cols: usize,
    free: Vec<usize>,
    groups: Vec<Group>,
    dim: usize,
}

impl LatentMap {
    pub(crate) fn new(roles: &[ColumnRole], penalize_treatment_main: bool) -> Self {
        let treatment = roles.iter().position(|r| *r == ColumnRole::Treatment);
        let main_col = |k: usize| roles.iter().position(|r| *r == ColumnRole::Main(k));
        let mut free = Vec::new();
        let mut group_cols: Vec<Vec<usize>> = Vec::new();
        for (j, role) in roles.iter().enumerate() {
            match role {
                ColumnRole::Intercept => free.push(j),
                ColumnRole::Treatment if !penalize_treatment_main => free.push(j),
                ColumnRole::Treatment | ColumnRole::Main(_) => group_cols.push(vec![j]),
                ColumnRole::Interaction(k) => {
                    let mut cols = Vec::with_capacity(3);
                    if penalize_treatment_main {
                        cols.extend(treatment);
                    }
                    cols.extend(main_col(*k));
                    cols.push(j);
                    group_cols.push(cols);
                }
            }
        }
        let mut start = free.len();
        let groups = group_cols
            .into_iter()
            .map(|cols| {
                let g = Group {
                    weight: (cols.len() as f64).sqrt(),
                    start,
                    cols,
                };
                start += g.cols.len();
                g
            })
            .collect();
        LatentMap {
            n_cols: roles.len(),
            free,
            groups,
            dim: start,
        }
    }

    fn to_effective(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut beta = DVector::zeros(self.n_cols);
        for (k, &j) in self.free.iter().enumerate() {
            beta[j] += v[k];
        }
        for g in &self.groups {
            for (l, &j) in g.cols.iter().enumerate() {
                beta[j] += v[g.start + l];
            }
        }
        beta
    }

    fn from_effective_free(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim);
        for (k, &j) in self.free.iter().enumerate() {
            v[k] = beta[j];
        }
        v
    }

    fn group_norm(&self, g: &Group, x: &DVector<f64>) -> f64 {
        g.cols.iter().enumerate().map(|(l, _)| x[g.start + l].powi(2)).sum::<f64>().sqrt()
    }

    fn penalty(&self, v: &DVector<f64>) -> f64 {
        self.groups.iter().map(|g| g.weight * self.group_norm(g, v)).sum()
    }

    /// Smallest penalty at which every group is zero, given the null-model score.
    pub(crate) fn lambda_max(&self, score: &DVector<f64>) -> f64 {
        self.groups
            .iter()
            .map(|g| g.cols.iter().map(|&j| score[j].powi(2)).sum::<f64>().sqrt() / g.weight)
            .fold(0.0, f64::max)
    }
}

/// Quadratic block `A` of one latent group, with its eigendecomposition
/// cached for the group subproblem.
struct Block {
    cols: Vec<usize>,
    start: usize,
    weight: f64,
    a: DMatrix<f64>,
    eig: Option<SymmetricEigen<f64, nalgebra::Dyn>>,
}

impl Block {
    fn new(cols: Vec<usize>, start: usize, weight: f64, h: &DMatrix<f64>) -> Self {
        let a = DMatrix::from_fn(cols.len(), cols.len(), |i, j| h[(cols[i], cols[j])]);
        let eig = (cols.len() > 1).then(|| SymmetricEigen::new(a.clone()));
        Block {
            cols,
            start,
            weight,
            a,
            eig,
        }
    }

    /// Solves `min 0.5 x'Ax - r'x + t ||x||`.
    fn solve(&self, r: &DVector<f64>, t: f64) -> DVector<f64> {
        let rnorm = r.norm();
        if rnorm <= t {
            return DVector::zeros(r.len());
        }
        let Some(eig) = &self.eig else {
            return DVector::from_element(1, (rnorm - t) * r[0].signum() / self.a[(0, 0)].max(1e-300));
        };
        let rt = eig.eigenvectors.tr_mul(r);
        let lam: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
        let u = if t == 0.0 { 0.0 } else { secular_root(&rt, &lam, t) };
        let xt = DVector::from_iterator(rt.len(), rt.iter().zip(&lam).map(|(ri, li)| ri / (li + u)));
        &eig.eigenvectors * xt
    }
}

/// Root in `u > 0` of `sum_i (r_i u / (l_i + u))^2 = t^2`, where `||r|| > t`.
///
/// With `x = (A + uI)^{-1} r` and `u = t / ||x||` this is the stationarity
/// condition of the group subproblem. The left side increases in `u`, so a
/// bracketed Newton iteration on `1/t - 1/||.||` (close to linear in `u`)
/// converges quickly.
fn secular_root(rt: &DVector<f64>, lam: &[f64], t: f64) -> f64 {
    let norm = |u: f64| -> (f64, f64) {
        // value and derivative of f(u) = sqrt(sum (r u/(l+u))^2)
        let mut s = 0.0;
        let mut ds = 0.0;
        for (r, l) in rt.iter().zip(lam) {
            let q = u / (l + u);
            s += (r * q).powi(2);
            ds += 2.0 * r * r * q * l / (l + u).powi(2);
        }
        let f = s.sqrt();
        (f, if f > 0.0 { ds / (2.0 * f) } else { 0.0 })
    };
    let mut hi = 1.0;
    while norm(hi).0 <= t && hi < 1e300 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    let mut u = 0.5 * hi;
    for _ in 0..100 {
        let (f, df) = norm(u);
        if f > t {
            hi = u;
        } else {
            lo = u;
        }
        // Newton on g(u) = 1/t - 1/f(u), g' = f'/f^2
        let step = if f > 0.0 && df > 0.0 { (1.0 / t - 1.0 / f) * f * f / df } else { f64::NAN };
        let mut next = u - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - u).abs() <= 1e-15 * u.max(1e-300) {
            return next;
        }
        u = next;
    }
    u
}

/// Block coordinate descent over free coordinates and groups on the latent
/// quadratic `0.5 v'M'HMv - (M'c)'v + lambda * sum_g w_g ||v_g||`.
fn block_descent(map: &LatentMap, h: &DMatrix<f64>, c: &DVector<f64>, v: &mut DVector<f64>, lambda: f64, tol: f64) -> Result<usize> {
    let mut beta = map.to_effective(v);
    let mut hb = h * &beta;
    let blocks: Vec<Block> = map
        .free
        .iter()
        .enumerate()
        .map(|(k, &j)| Block::new(vec![j], k, 0.0, h))
        .chain(map.groups.iter().map(|g| Block::new(g.cols.clone(), g.start, g.weight, h)))
        .collect();
    let mut full_pass = true;
    for sweep in 1..=MAX_INNER {
        let mut max_delta: f64 = 0.0;
        for block in &blocks {
            let m = block.cols.len();
            let old = v.rows(block.start, m).clone_owned();
            if !full_pass && old.iter().all(|x| *x == 0.0) {
                continue;
            }
            // linear term of the block problem with the other blocks held fixed
            let r = DVector::from_fn(m, |l, _| c[block.cols[l]] - hb[block.cols[l]]) + &block.a * &old;
            let new = block.solve(&r, lambda * block.weight);
            let delta = &new - &old;
            let dmax = delta.amax();
            if dmax > 0.0 {
                for (l, &j) in block.cols.iter().enumerate() {
                    if delta[l] != 0.0 {
                        beta[j] += delta[l];
                        hb.axpy(delta[l], &h.column(j), 1.0);
                    }
                }
                v.rows_mut(block.start, m).copy_from(&new);
                max_delta = max_delta.max(dmax);
            }
        }
        let stationary = || {
            let grad = &hb - c;
            latent_residual(map, &grad, v, lambda) < tol
        };
        if sweep % CHECK_EVERY == 0 && stationary() {
            return Ok(sweep);
        }
        if max_delta < INNER_TOL {
            if full_pass {
                return Ok(sweep);
            }
            full_pass = true;
        } else {
            full_pass = false;
        }
    }
    Err(Error::NoConvergence { iterations: MAX_INNER })
}

/// Max violation of the latent stationarity conditions.
fn kkt_residual(problem: &Problem, map: &LatentMap, v: &DVector<f64>, lambda: f64) -> f64 {
    let beta = map.to_effective(v);
    let grad = -score(problem.design, &problem.y, &beta);
    latent_residual(map, &grad, v, lambda)
}

/// Latent stationarity residual for a smooth part with design-scale gradient `grad`.
fn latent_residual(map: &LatentMap, grad: &DVector<f64>, v: &DVector<f64>, lambda: f64) -> f64 {
    let mut worst: f64 = map.free.iter().map(|&j| grad[j].abs()).fold(0.0, f64::max);
    for g in &map.groups {
        let gg = DVector::from_iterator(g.cols.len(), g.cols.iter().map(|&j| grad[j]));
        let vg = v.rows(g.start, g.cols.len());
        let norm = vg.norm();
        let t = lambda * g.weight;
        let r = if norm > 0.0 {
            (gg + vg * (t / norm)).norm()
        } else {
            (gg.norm() - t).max(0.0)
        };
        worst = worst.max(r);
    }
    worst
}

pub(super) fn solve(problem: &Problem, map: &LatentMap, lambda: f64, warm: &mut Option<WarmStart>) -> Result<FitResult> {
    let null_v = map.from_effective_free(&problem.null_beta);
    if map.lambda_max(&problem.null_score) <= lambda {
        let kkt = kkt_residual(problem, map, &null_v, lambda);
        *warm = Some(WarmStart::Latent(null_v.clone()));
        return problem.finish(&problem.null_beta, 0, lambda, kkt);
    }
    let mut v = match warm {
        Some(WarmStart::Latent(w)) if w.len() == map.dim => w.clone(),
        _ => null_v,
    };
    let objective = |v: &DVector<f64>| problem.loss(&map.to_effective(v)) + lambda * map.penalty(v);
    let mut obj = objective(&v);
    let mut kkt = kkt_residual(problem, map, &v, lambda);
    for outer in 1..=MAX_OUTER {
        let (h, c) = problem.quadratic(&map.to_effective(&v));
        let mut candidate = v.clone();
        block_descent(map, &h, &c, &mut candidate, lambda, (INNER_FORCING * kkt).max(INNER_KKT_TOL))?;
        let mut cand_obj = objective(&candidate);
        let mut halvings = 0;
        while !(cand_obj <= obj + 1e-13 * obj.abs()) && halvings < 40 {
            candidate = (&candidate + &v) * 0.5;
            cand_obj = objective(&candidate);
            halvings += 1;
        }
        let change = (&candidate - &v).amax();
        v = candidate;
        obj = cand_obj;
        kkt = kkt_residual(problem, map, &v, lambda);
        if change < OUTER_TOL || kkt < KKT_TOL {
            let beta = map.to_effective(&v);
            *warm = Some(WarmStart::Latent(v));
            return problem.finish(&beta, outer, lambda, kkt);
        }
    }
    Err(Error::NoConvergence { iterations: MAX_OUTER })
}

#[cfg(test)]
mod tests {
    use super::super::tests::sim_data;
    use super::super::*;
    use super::*;
    use crate::tabular::{build_design, DesignSpec};

    #[test]
    fn latent_layout_for_full_interaction() {
        let roles = DesignSpec::full_interaction(2).roles();
        let map = LatentMap::new(&roles, true);
        // intercept free; T, M0, M1 singletons; two interaction groups of three
        assert_eq!(map.free, vec![0]);
        assert_eq!(map.groups.len(), 5);
        assert_eq!(map.dim, 1 + 3 + 6);
        let v = DVector::from_fn(map.dim, |i, _| i as f64);
        let beta = map.to_effective(&v);
        assert_eq!(beta.len(), roles.len());
        let unpenalized_t = LatentMap::new(&roles, false);
        assert_eq!(unpenalized_t.free, vec![0, 1]);
        assert!(unpenalized_t.groups.iter().all(|g| g.cols.len() <= 2));
    }

    #[test]
    fn group_subproblem_satisfies_optimality() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5]);
        let r = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let t = 0.7;
        let h = a.clone();
        let block = Block::new(vec![0, 1, 2], 0, 1.0, &h);
        let x = block.solve(&r, t);
        let resid = &a * &x - &r + &x * (t / x.norm());
        assert!(resid.amax() < 1e-10, "{resid}");
        assert_eq!(block.solve(&r, 10.0), DVector::zeros(3));
        let x0 = block.solve(&r, 0.0);
        assert!((&a * &x0 - &r).amax() < 1e-10);
    }

    #[test]
    fn hierarchy_and_kkt_along_path() {
        let d = sim_data(300, 4, 21, 0.9);
        let dm = build_design(&d, &DesignSpec::full_interaction(4)).unwrap();
        let path = lambda_path(&dm, d.outcome(), &PenaltyConfig::hgl(0.0).with_path(15, None)).unwrap();
        let roles = dm.roles();
        let col = |role: ColumnRole| roles.iter().position(|r| *r == role).unwrap();
        for fit in &path.fits {
            assert!(fit.kkt_residual.unwrap() <= 1e-6, "{:?}", fit.kkt_residual);
            for k in 0..4 {
                if fit.beta_std[col(ColumnRole::Interaction(k))] != 0.0 {
                    assert!(fit.beta_std[col(ColumnRole::Treatment)] != 0.0);
                    assert!(fit.beta_std[col(ColumnRole::Main(k))] != 0.0);
                }
            }
        }
        assert!(path.fits.last().unwrap().beta_std.iter().skip(1).all(|b| *b != 0.0));
    }
}
