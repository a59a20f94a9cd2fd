use serde::Serialize;

use super::EvalError;
use crate::synth::Label;

pub const PCA_TOL: f64 = 1e-10;
pub const PCA_MAX_ITER: usize = 10_000;

/// Two-component PCA of a point cloud.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    pub directions: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<Label>,
}

impl PcaProjection {
    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        [dot(&centred, &self.directions[0]), dot(&centred, &self.directions[1])]
    }

    /// Distance between the live and spoof centroids divided by the mean
    /// distance of points to their own class centroid.
    pub fn class_separation(&self) -> Result<f64, EvalError> {
        class_separation(&self.points, &self.labels)
    }
}

/// Projects `rows` (`n` points of dimension `d`) onto their top two
/// principal directions. In strict mode a vanishing second component is an
/// error; otherwise an arbitrary orthogonal zero-variance direction is used.
pub fn pca_2d(rows: &[Vec<f64>], labels: &[Label], strict: bool) -> Result<PcaProjection, EvalError> {
    let n = rows.len();
    if n < 3 {
        return Err(EvalError::Pca(format!("need at least 3 points, got {n}")));
    }
    if labels.len() != n {
        return Err(EvalError::LengthMismatch { scores: n, labels: labels.len() });
    }
    let d = rows[0].len();
    if d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(EvalError::Pca(format!("points must share a dimension of at least 2 (first is {d})")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::Pca("non-finite coordinates".into()));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; d * d];
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total <= 0.0 {
        return Err(EvalError::Degenerate("all points coincide".into()));
    }
    let zero_var = total * 1e-12;

    let v1 = power_iteration(&cov, d, &[], total)?.ok_or_else(|| EvalError::Degenerate("no variance".into()))?;
    let l1 = rayleigh(&cov, d, &v1);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, l2) = match power_iteration(&deflated, d, &[&v1], total)? {
        Some(v) if rayleigh(&cov, d, &v) > zero_var => {
            let l = rayleigh(&cov, d, &v);
            (v, l)
        }
        _ if strict => {
            return Err(EvalError::Degenerate(
                "second principal direction has zero variance".into(),
            ))
        }
        _ => (any_orthogonal(&v1), 0.0),
    };
    let (v1, v2) = (canonical_sign(v1), canonical_sign(v2));
    let mut proj = PcaProjection {
        mean,
        directions: [v1, v2],
        explained_variance: [l1, l2],
        points: Vec::with_capacity(n),
        labels: labels.to_vec(),
    };
    proj.points = rows.iter().map(|r| proj.project(r)).collect();
    Ok(proj)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn matvec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| dot(&m[i * d..(i + 1) * d], v)).collect()
}

fn rayleigh(m: &[f64], d: usize, v: &[f64]) -> f64 {
    dot(v, &matvec(m, d, v))
}

fn orthogonalize(v: &mut [f64], against: &[&Vec<f64>]) {
    for u in against {
        let p = dot(v, u);
        v.iter_mut().zip(u.iter()).for_each(|(a, b)| *a -= p * b);
    }
}

/// Dominant eigenvector of the symmetric PSD matrix `m`, kept orthogonal
/// to `against`. Converges when the eigen-residual `|Mv − (vᵀMv)v|` drops
/// below `tol · scale`. Returns `None` when `m` annihilates the start.
fn power_iteration(m: &[f64], d: usize, against: &[&Vec<f64>], scale: f64) -> Result<Option<Vec<f64>>, EvalError> {
    // start from the matrix column with the most energy: never orthogonal
    // to the dominant eigenspace unless the matrix is zero there
    let col = |j: usize| (0..d).map(|i| m[i * d + j]).collect::<Vec<f64>>();
    let mut v = (0..d)
        .map(col)
        .map(|mut c| {
            orthogonalize(&mut c, against);
            c
        })
        .max_by(|a, b| norm(a).total_cmp(&norm(b)))
        .unwrap_or_default();
    let floor = scale * 1e-12;
    if norm(&v) <= floor {
        return Ok(None);
    }
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    for _ in 0..PCA_MAX_ITER {
        let mut w = matvec(m, d, &v);
        orthogonalize(&mut w, against);
        let lambda = dot(&v, &w);
        let residual = norm(&w.iter().zip(&v).map(|(a, b)| a - lambda * b).collect::<Vec<_>>());
        let nw = norm(&w);
        if nw <= floor {
            return Ok(None);
        }
        if residual <= PCA_TOL * scale {
            return Ok(Some(v));
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Err(EvalError::NonConvergence(PCA_MAX_ITER))
}

fn any_orthogonal(v1: &[f64]) -> Vec<f64> {
    let d = v1.len();
    // the basis vector least aligned with v1
    let j = (0..d).min_by(|&a, &b| v1[a].abs().total_cmp(&v1[b].abs())).unwrap_or(0);
    let mut e = vec![0.0; d];
    e[j] = 1.0;
    let owned = v1.to_vec();
    orthogonalize(&mut e, &[&owned]);
    let n = norm(&e);
    e.into_iter().map(|x| x / n).collect()
}

/// Flips `v` so its largest-magnitude component is positive.
fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    let big = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

pub fn class_separation(points: &[[f64; 2]], labels: &[Label]) -> Result<f64, EvalError> {
    let centroid = |label: Label| -> Option<[f64; 2]> {
        let sel: Vec<&[f64; 2]> = points.iter().zip(labels).filter(|(_, &l)| l == label).map(|(p, _)| p).collect();
        (!sel.is_empty()).then(|| {
            let k = sel.len() as f64;
            [sel.iter().map(|p| p[0]).sum::<f64>() / k, sel.iter().map(|p| p[1]).sum::<f64>() / k]
        })
    };
    let (Some(cl), Some(cs)) = (centroid(Label::Live), centroid(Label::Spoof)) else {
        return Err(EvalError::SingleClass);
    };
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let within: f64 = points
        .iter()
        .zip(labels)
        .map(|(p, &l)| dist(p, if l == Label::Live { &cl } else { &cs }))
        .sum::<f64>()
        / points.len() as f64;
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(dist(&cl, &cs) / within)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand_distr::{Distribution, Normal};

    fn unlabelled(n: usize) -> Vec<Label> {
        (0..n).map(|i| if i % 2 == 0 { Label::Live } else { Label::Spoof }).collect()
    }

    #[test]
    fn line_data_is_degenerate_in_strict_mode() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, i as f64]).collect();
        assert!(matches!(pca_2d(&rows, &unlabelled(5), true), Err(EvalError::Degenerate(_))));
        let p = pca_2d(&rows, &unlabelled(5), false).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.directions[0][0] - s).abs() < 1e-9 && (p.directions[0][1] - s).abs() < 1e-9);
        assert_eq!(p.explained_variance[1], 0.0);
        assert!(dot(&p.directions[0], &p.directions[1]).abs() < 1e-12);
    }

    #[test]
    fn known_diagonal_covariance_is_recovered() {
        let mut rng = substream(42, 0);
        let (a, b) = (Normal::new(0.0, 2.0).unwrap(), Normal::new(0.0, 1.0).unwrap());
        let rows: Vec<Vec<f64>> = (0..20_000).map(|_| vec![a.sample(&mut rng), b.sample(&mut rng)]).collect();
        let p = pca_2d(&rows, &unlabelled(rows.len()), true).unwrap();
        assert!((p.explained_variance[0] - 4.0).abs() < 0.2, "{:?}", p.explained_variance);
        assert!((p.explained_variance[1] - 1.0).abs() < 0.05);
        assert!(p.directions[0][0] > 0.99 && p.directions[1][1] > 0.99);
    }

    #[test]
    fn mean_projects_to_origin() {
        let rows = vec![vec![1.0, 2.0, 0.5], vec![3.0, -1.0, 2.0], vec![0.0, 0.0, 1.0], vec![2.0, 5.0, -3.0]];
        let p = pca_2d(&rows, &unlabelled(4), true).unwrap();
        let o = p.project(&p.mean);
        assert!(o[0].abs() < 1e-15 && o[1].abs() < 1e-15);
    }

    #[test]
    fn rejects_tiny_inputs() {
        assert!(pca_2d(&[vec![1.0, 2.0], vec![2.0, 1.0]], &unlabelled(2), true).is_err());
        assert!(pca_2d(&[vec![1.0], vec![2.0], vec![0.0]], &unlabelled(3), true).is_err());
        let same = vec![vec![1.0, 1.0]; 4];
        assert!(matches!(pca_2d(&same, &unlabelled(4), false), Err(EvalError::Degenerate(_))));
    }

    #[test]
    fn separation_of_split_clusters() {
        let pts = [[0.0, 1.0], [0.0, -1.0], [4.0, 1.0], [4.0, -1.0]];
        let labels = [Label::Live, Label::Live, Label::Spoof, Label::Spoof];
        assert_eq!(class_separation(&pts, &labels).unwrap(), 4.0);
    }
}
