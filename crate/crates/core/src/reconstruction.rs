//! AM-guided shape fitting in the eigenface space and per-vertex evaluation.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Mesh, ResolvedAm};
use crate::shapespace::ShapeBasis;
use crate::stats::AmTestResult;

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOP_AMS: usize = 10;

/// Fit `beta` so the reconstructed face matches target AMs:
///
/// ```text
/// minimise  lambda * |g|^2 + sum_k z_k (Q_k(mean + P diag(sqrt(eig)) g) - target_k)^2
/// ```
///
/// with `beta = diag(sqrt(eig)) g`, so the ridge acts in units of the
/// training-shape standard deviations.
#[derive(Debug, Clone)]
pub struct ReconstructionProblem<'a> {
    pub basis: &'a ShapeBasis,
    pub ams: &'a [ResolvedAm],
    /// Targets in measurement units.
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub mesh: Mesh,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl<'a> ReconstructionProblem<'a> {
    pub fn new(basis: &'a ShapeBasis, ams: &'a [ResolvedAm], targets: Vec<f64>, weights: Vec<f64>, lambda: f64) -> Result<Self> {
        let p = Self {
            basis,
            ams,
            targets,
            weights,
            lambda,
            max_iter: DEFAULT_MAX_ITER,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let k = self.ams.len();
        for (len, what) in [(self.targets.len(), "reconstruction targets"), (self.weights.len(), "reconstruction weights")] {
            if len != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    actual: len,
                    context: what,
                });
            }
        }
        if !(self.lambda >= 0.0) || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::OutOfRange("lambda and weights must be non-negative".into()));
        }
        if self.targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("reconstruction targets"));
        }
        Ok(())
    }

    fn scales(&self) -> Vec<f64> {
        self.basis.eigenvalues.iter().map(|e| e.max(0.0).sqrt()).collect()
    }

    fn flat(&self, g: &[f64]) -> DVector<f64> {
        let beta: Vec<f64> = g.iter().zip(self.scales()).map(|(g, s)| g * s).collect();
        &self.basis.mean + &self.basis.components * DVector::from_vec(beta)
    }

    /// Weighted residuals `sqrt(z_k) (Q_k - target_k)` at scaled coefficients `g`.
    pub fn residuals(&self, g: &[f64]) -> Result<Vec<f64>> {
        let flat = self.flat(g);
        self.ams
            .iter()
            .zip(&self.targets)
            .zip(&self.weights)
            .map(|((am, t), w)| Ok(w.sqrt() * (am.value(flat.as_slice())? - t)))
            .collect()
    }

    /// Jacobian of [`Self::residuals`] with respect to `g` (`K x d`).
    pub fn jacobian(&self, g: &[f64]) -> Result<DMatrix<f64>> {
        let flat = self.flat(g);
        let d = self.basis.dim();
        let scales = self.scales();
        let mut j = DMatrix::zeros(self.ams.len(), d);
        for (row, (am, w)) in self.ams.iter().zip(&self.weights).enumerate() {
            if *w == 0.0 {
                continue;
            }
            let grad = am.gradient(flat.as_slice())?;
            let sw = w.sqrt();
            for (v, gv) in &grad.entries {
                for a in 0..3 {
                    let prow = self.basis.components.row(3 * v + a);
                    for c in 0..d {
                        j[(row, c)] += sw * gv[a] * prow[c] * scales[c];
                    }
                }
            }
        }
        Ok(j)
    }

    pub fn objective(&self, g: &[f64]) -> Result<f64> {
        let r = self.residuals(g)?;
        Ok(self.lambda * g.iter().map(|x| x * x).sum::<f64>() + r.iter().map(|x| x * x).sum::<f64>())
    }

    /// Levenberg-Marquardt from the mean face.
    pub fn fit(&self) -> Result<FitResult> {
        self.validate()?;
        let d = self.basis.dim();
        let mut g = vec![0.0; d];
        let mut obj = self.objective(&g)?;
        if !obj.is_finite() {
            return Err(Error::NonFinite("reconstruction objective"));
        }
        let mut trace = vec![obj];
        let mut mu = 1e-3;
        let mut stalls = 0;
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..self.max_iter {
            iterations = it + 1;
            let r = DVector::from_vec(self.residuals(&g)?);
            let j = self.jacobian(&g)?;
            let gv = DVector::from_column_slice(&g);
            let grad = j.tr_mul(&r) + &gv * self.lambda;
            let jtj = j.tr_mul(&j);
            let mut accepted = false;
            let mut step_norm = 0.0;
            for _ in 0..30 {
                let mut a = jtj.clone();
                for c in 0..d {
                    a[(c, c)] += self.lambda + mu * (1.0 + jtj[(c, c)]);
                }
                let Some(chol) = a.cholesky() else {
                    mu *= 4.0;
                    continue;
                };
                let step = chol.solve(&(-&grad));
                step_norm = step.norm();
                let trial: Vec<f64> = g.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                match self.objective(&trial) {
                    Ok(t) if t.is_finite() && t <= obj => {
                        let rel = (obj - t) / obj.max(f64::MIN_POSITIVE);
                        g = trial;
                        stalls = if rel < 1e-10 { stalls + 1 } else { 0 };
                        obj = t;
                        trace.push(obj);
                        mu = (mu / 3.0).max(1e-12);
                        accepted = true;
                        break;
                    }
                    _ => mu *= 4.0,
                }
                if step_norm < 1e-8 {
                    break;
                }
            }
            if step_norm < 1e-8 || stalls >= 5 || grad.norm() == 0.0 {
                converged = true;
                break;
            }
            if !accepted {
                // no descent even under heavy damping: at a minimum to working precision
                converged = true;
                break;
            }
        }
        if !converged {
            warn!("reconstruction hit the {} iteration cap", self.max_iter);
        }
        let beta: Vec<f64> = g.iter().zip(self.scales()).map(|(g, s)| g * s).collect();
        let mesh = self.basis.reconstruct_mesh(&beta)?;
        Ok(FitResult {
            beta,
            mesh,
            objective_trace: trace,
            converged,
            iterations,
        })
    }
}

/// Euclidean distance per vertex.
pub fn per_vertex_error(fitted: &Mesh, truth: &Mesh) -> Result<Vec<f64>> {
    fitted.check_same_topology(truth)?;
    Ok(fitted
        .vertices
        .iter()
        .zip(&truth.vertices)
        .map(|(a, b)| (a - b).norm())
        .collect())
}

/// Mean error field over the retained fits at each level.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub level: f64,
    pub retained: usize,
    pub field: Vec<f64>,
    pub mean: f64,
}

/// `fits[i] = (sample id, uncertainty, per-vertex errors)`. At each level the
/// lowest-uncertainty fraction (ties by id) is averaged.
pub fn filtered_error_maps(fits: &[(String, f64, Vec<f64>)], levels: &[f64]) -> Result<Vec<ErrorMap>> {
    let mut order: Vec<usize> = (0..fits.len()).collect();
    order.sort_by(|&a, &b| fits[a].1.total_cmp(&fits[b].1).then_with(|| fits[a].0.cmp(&fits[b].0)));
    levels
        .iter()
        .map(|&level| {
            let keep = (level * fits.len() as f64).ceil() as usize;
            if keep == 0 || fits.is_empty() {
                return Err(Error::NotEnoughSamples {
                    needed: 1,
                    got: 0,
                    context: "fits retained at a filter level",
                });
            }
            let t = fits[order[0]].2.len();
            let mut field = vec![0.0; t];
            for &i in &order[..keep] {
                if fits[i].2.len() != t {
                    return Err(Error::DimensionMismatch {
                        expected: t,
                        actual: fits[i].2.len(),
                        context: "per-vertex error field",
                    });
                }
                for (f, e) in field.iter_mut().zip(&fits[i].2) {
                    *f += e / keep as f64;
                }
            }
            let mean = field.iter().sum::<f64>() / t as f64;
            Ok(ErrorMap {
                level,
                retained: keep,
                field,
                mean,
            })
        })
        .collect()
}

/// Selection mask over `tests` (one level): 1 for the `count` predictable
/// AMs with the highest `1 - CI_u`, ties by id. The flag is true when fewer
/// than `count` AMs were predictable.
pub fn select_top_ams(tests: &[AmTestResult], count: usize) -> (Vec<f64>, bool) {
    let mut idx: Vec<usize> = (0..tests.len()).filter(|&i| tests[i].predictable).collect();
    idx.sort_by(|&a, &b| {
        tests[a]
            .ci_upper
            .total_cmp(&tests[b].ci_upper)
            .then_with(|| tests[a].am_id.cmp(&tests[b].am_id))
    });
    let short = idx.len() < count;
    if short {
        warn!("only {} predictable AMs available, {count} requested", idx.len());
    }
    idx.truncate(count);
    let mut z = vec![0.0; tests.len()];
    for i in idx {
        z[i] = 1.0;
    }
    (z, short)
}

/// Optional confidence weighting: selected weights divided by the calibrated
/// uncertainty, rescaled so the mean selected weight is 1.
pub fn confidence_weights(mask: &[f64], uncertainties: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = mask
        .iter()
        .zip(uncertainties)
        .map(|(m, u)| if *m > 0.0 { m / u.max(1e-12) } else { 0.0 })
        .collect();
    let active = raw.iter().filter(|w| **w > 0.0).count();
    let sum: f64 = raw.iter().sum();
    if active == 0 || sum <= 0.0 {
        return raw;
    }
    raw.iter().map(|w| w * active as f64 / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{resolve_all, AmDefinition, LandmarkMap, Point};
    use crate::shapespace::{build_basis, flatten};
    use crate::stats::FilterLevel;
    use rand::Rng;

    fn setup(seed: u64) -> (ShapeBasis, Vec<ResolvedAm>, Vec<Mesh>) {
        let mut rng = crate::rng::rng_from(seed, &[]);
        let base = [
            Point::new(0.0, 0.0, 0.0),
            Point::new(30.0, 0.0, 0.0),
            Point::new(15.0, 25.0, 5.0),
            Point::new(15.0, -20.0, 10.0),
            Point::new(0.0, 10.0, 20.0),
            Point::new(25.0, 15.0, -10.0),
        ];
        let meshes: Vec<Mesh> = (0..12)
            .map(|_| {
                let v = base
                    .iter()
                    .map(|p| p + Point::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                    .collect();
                Mesh::new(v, "t").unwrap()
            })
            .collect();
        let basis = build_basis(&meshes, 11).unwrap();
        let lm = LandmarkMap::from_pairs((0..6).map(|i| (format!("p{i}"), i))).unwrap();
        let defs = vec![
            AmDefinition::distance("d01", "p0", "p1"),
            AmDefinition::distance("d23", "p2", "p3"),
            AmDefinition::proportion("r", "p0", "p2", "p1", "p3"),
            AmDefinition::angle("a", "p0", "p4", "p5"),
        ];
        (basis, resolve_all(&lm, &defs).unwrap(), meshes)
    }

    #[test]
    fn zero_weights_return_the_mean_face() {
        let (basis, ams, _) = setup(1);
        let p = ReconstructionProblem::new(&basis, &ams, vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4], 0.1).unwrap();
        let fit = p.fit().unwrap();
        assert!(fit.beta.iter().all(|b| *b == 0.0));
        assert_eq!(fit.mesh, basis.mean_mesh());
        assert!(fit.converged);
    }

    #[test]
    fn in_span_targets_are_recovered() {
        let (basis, ams, _) = setup(2);
        let beta: Vec<f64> = (0..basis.dim()).map(|i| 0.3 * basis.eigenvalues[i].sqrt() * (i as f64 - 4.0) / 4.0).collect();
        let truth = basis.reconstruct(&beta).unwrap();
        let targets: Vec<f64> = ams.iter().map(|a| a.value(truth.as_slice()).unwrap()).collect();
        let p = ReconstructionProblem::new(&basis, &ams, targets, vec![1.0; 4], 1e-8).unwrap();
        let fit = p.fit().unwrap();
        let r = p.residuals(&fit.beta.iter().zip(p.scales()).map(|(b, s)| b / s).collect::<Vec<_>>()).unwrap();
        assert!(r.iter().all(|x| x.abs() < 1e-4), "{r:?}");
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit.objective_trace.last().unwrap() <= &fit.objective_trace[0]);
    }

    #[test]
    fn ridge_shrinks_coefficients() {
        let (basis, ams, meshes) = setup(3);
        let truth = flatten(&meshes[0]);
        let targets: Vec<f64> = ams.iter().map(|a| a.value(truth.as_slice()).unwrap() + 1.0).collect();
        let norms: Vec<f64> = [1e-2, 1.0, 1e2]
            .iter()
            .map(|&l| {
                let fit = ReconstructionProblem::new(&basis, &ams, targets.clone(), vec![1.0; 4], l).unwrap().fit().unwrap();
                fit.beta.iter().map(|b| b * b).sum::<f64>().sqrt()
            })
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let (basis, ams, _) = setup(4);
        let p = ReconstructionProblem::new(&basis, &ams, vec![30.0, 45.0, 0.7, 80.0], vec![1.0, 0.5, 2.0, 1.0], 0.0).unwrap();
        let mut rng = crate::rng::rng_from(5, &[]);
        let g: Vec<f64> = (0..basis.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let j = p.jacobian(&g).unwrap();
        let h = 1e-6;
        for c in 0..basis.dim() {
            let mut a = g.clone();
            a[c] += h;
            let mut b = g.clone();
            b[c] -= h;
            let (ra, rb) = (p.residuals(&a).unwrap(), p.residuals(&b).unwrap());
            for k in 0..ams.len() {
                let fd = (ra[k] - rb[k]) / (2.0 * h);
                assert!((fd - j[(k, c)]).abs() <= 1e-5 * fd.abs().max(j[(k, c)].abs()).max(1e-3), "{k},{c}");
            }
        }
    }

    #[test]
    fn per_vertex_error_examples() {
        let (_, _, meshes) = setup(6);
        let m = &meshes[0];
        assert!(per_vertex_error(m, m).unwrap().iter().all(|e| *e == 0.0));
        let shifted = m.translated(Point::new(1.0, 0.0, 0.0));
        assert!(per_vertex_error(&shifted, m).unwrap().iter().all(|e| (e - 1.0).abs() < 1e-12));
        let other = Mesh::new(m.vertices.clone(), "other").unwrap();
        assert!(per_vertex_error(&other, m).is_err());
    }

    #[test]
    fn filtered_maps() {
        let fits = vec![
            ("a".to_string(), 0.3, vec![1.0, 1.0]),
            ("b".to_string(), 0.1, vec![3.0, 1.0]),
            ("c".to_string(), 0.2, vec![2.0, 2.0]),
            ("d".to_string(), 0.4, vec![6.0, 4.0]),
        ];
        let maps = filtered_error_maps(&fits, &[1.0, 0.5]).unwrap();
        assert_eq!(maps[0].field, vec![3.0, 2.0]);
        assert_eq!(maps[1].retained, 2);
        assert_eq!(maps[1].field, vec![2.5, 1.5]);
        let tied: Vec<_> = fits.iter().map(|(i, _, e)| (i.clone(), 1.0, e.clone())).collect();
        assert_eq!(filtered_error_maps(&tied, &[0.5]).unwrap()[0].field, vec![2.0, 1.0]);
        assert!(filtered_error_maps(&[], &[1.0]).is_err());
    }

    fn report(cis: &[f64]) -> Vec<AmTestResult> {
        cis.iter()
            .enumerate()
            .map(|(i, &c)| AmTestResult {
                am_id: format!("am{i:02}"),
                level: FilterLevel(1.0),
                mean: c - 0.01,
                sd: 0.01,
                ci_upper: c,
                predictable: c < 1.0,
            })
            .collect()
    }

    #[test]
    fn top_am_selection() {
        let ten: Vec<f64> = (0..10).map(|i| 0.5 + 0.01 * i as f64).chain([1.1, 1.2]).collect();
        let (z, short) = select_top_ams(&report(&ten), 10);
        assert!(!short);
        assert_eq!(z.iter().sum::<f64>(), 10.0);
        assert_eq!(&z[10..], &[0.0, 0.0]);
        let twelve: Vec<f64> = (0..12).map(|i| 0.9 - 0.01 * i as f64).collect();
        let (z, _) = select_top_ams(&report(&twelve), 10);
        assert_eq!(&z[..2], &[0.0, 0.0]);
        let three = [0.5, 1.2, 0.7, 1.5, 0.9];
        let (z, short) = select_top_ams(&report(&three), 10);
        assert!(short);
        assert_eq!(z, vec![1.0, 0.0, 1.0, 0.0, 1.0]);
        let w = confidence_weights(&z, &[1.0, 1.0, 2.0, 1.0, 4.0]);
        assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-12 && w[0] > w[2] && w[2] > w[4]);
    }
}
