//! Linear stability of computed steady states: leading eigenvalues of the
//! generalized problem -J psi = mu M psi, where J is the steady-state
//! Jacobian and M the block mass matrix, so Re mu > 0 means a growing
//! perturbation of the time-dependent problem.
//!
//! Small problems go through a dense Schur solve of M^-1 (-J) with a bounded
//! iteration budget (the unbounded QR iteration can stall on pathological
//! matrices); large ones, and any dense failure, go through shift-inverted
//! Arnoldi. The Arnoldi path combines two shifts: one just right of the
//! imaginary axis for the near-critical eigenvalues that drive event
//! detection, and one in the middle of the physically reachable unstable
//! range so that strongly unstable eigenvalues far from the axis still enter
//! the count. Single-vector Krylov iteration resolves one copy of an exactly
//! degenerate eigenvalue, so production meshes keep hx != hy, which splits
//! the accidental symmetry ties of the 1 x 4 rectangle at the discrete level.

use nalgebra::{DMatrix, Schur};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::fem::FemWorkspace;
use crate::linalg::{arnoldi_ritz_values, BandMatrix};
use crate::models::Jacobian;

/// Real parts within this distance of zero count as marginal, not unstable.
pub const STABILITY_TOL: f64 = 1e-8;

/// Problem size at which the dense path hands over to Arnoldi.
const DENSE_LIMIT: usize = 420;

/// Near-axis shift for the Arnoldi transformation (A - sigma M)^-1 M.
const SIGMA_NEAR: f64 = 0.1;

/// Far shift probing the strongly unstable range; growth rates of these
/// kinetics are bounded by roughly r1, so eigenvalues within the resolved
/// radius around 2.5 cover everything that can destabilize.
const SIGMA_FAR: f64 = 2.5;

/// Leading part of a spectrum, sorted by descending real part.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSlice {
    pub eigenvalues: Vec<Complex<f64>>,
    pub n_unstable: usize,
    pub marginal: bool,
    /// False when the iterative path delivered fewer converged eigenvalues
    /// than requested even after restarting with a larger Krylov space, or
    /// when its roster never reached below the imaginary axis (so the
    /// unstable count may be a lower bound).
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumMethod {
    Auto,
    Dense,
    ShiftInvert,
}

/// Counts eigenvalues with Re > tol and reports whether any sits within tol
/// of the imaginary axis.
pub fn classify(eigenvalues: &[Complex<f64>], tol: f64) -> (usize, bool) {
    let n_unstable = eigenvalues.iter().filter(|z| z.re > tol).count();
    let marginal = eigenvalues.iter().any(|z| z.re.abs() <= tol);
    (n_unstable, marginal)
}

/// The `k` rightmost eigenvalues of -J psi = mu M psi.
pub fn leading_spectrum(jac: &Jacobian, mass: &BandMatrix, k: usize) -> Result<SpectrumSlice> {
    leading_spectrum_with(jac, mass, k, SpectrumMethod::Auto)
}

pub fn leading_spectrum_with(
    jac: &Jacobian,
    mass: &BandMatrix,
    k: usize,
    method: SpectrumMethod,
) -> Result<SpectrumSlice> {
    let n = jac.n();
    if k == 0 {
        return Err(Error::invalid("requested zero eigenvalues"));
    }
    if mass.n != n {
        return Err(Error::invalid(format!("mass is {} x {0}, Jacobian {n} x {n}", mass.n)));
    }
    match method {
        SpectrumMethod::Dense => dense_spectrum(jac, mass, k),
        SpectrumMethod::ShiftInvert => arnoldi_spectrum(jac, mass, k),
        SpectrumMethod::Auto => {
            if n <= DENSE_LIMIT {
                dense_spectrum(jac, mass, k).or_else(|_| arnoldi_spectrum(jac, mass, k))
            } else {
                arnoldi_spectrum(jac, mass, k)
            }
        }
    }
}

/// Eigenvalues through a real Schur decomposition with a bounded iteration
/// budget; `None` when the QR iteration fails to settle within it.
fn bounded_eigenvalues(m: DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    let n = m.nrows();
    let schur = Schur::try_new(m, f64::EPSILON, 50 * n + 2000)?;
    Some(schur.complex_eigenvalues().iter().copied().collect())
}

fn dense_spectrum(jac: &Jacobian, mass: &BandMatrix, k: usize) -> Result<SpectrumSlice> {
    let n = jac.n();
    let a = -jac.band.to_dense();
    let m = mass.to_dense();
    let lu = m.lu();
    let minv_a = lu
        .solve(&a)
        .ok_or_else(|| Error::Linear("mass matrix is singular".into()))?;
    let mut all = bounded_eigenvalues(minv_a)
        .ok_or_else(|| Error::Linear("dense QR iteration did not converge".into()))?;
    all.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    // classify over the full spectrum, then truncate the report
    let (n_unstable, marginal) = classify(&all, STABILITY_TOL);
    all.truncate(k.min(n));
    Ok(SpectrumSlice { eigenvalues: all, n_unstable, marginal, converged: true })
}

/// Converged Ritz eigenvalues of the pencil around one shift, untruncated.
fn shift_ritz(
    jac: &Jacobian,
    mass: &BandMatrix,
    sigma: f64,
    m_krylov: usize,
) -> Result<Vec<Complex<f64>>> {
    let n = jac.n();
    // A - sigma M with A = -J
    let shifted = BandMatrix::linear_combination(-1.0, &jac.band, -sigma, mass);
    let lu = shifted.factor()?;
    let mut apply = |x: &[f64]| -> Vec<f64> {
        let mut y = mass.matvec(x);
        lu.solve_in_place(&mut y).expect("factored operator application");
        y
    };
    let ritz = arnoldi_ritz_values(&mut apply, n, m_krylov.min(n));
    let theta_max = ritz.first().map(|r| r.theta.norm()).unwrap_or(0.0);
    if theta_max == 0.0 {
        return Err(Error::Linear("Arnoldi produced an empty spectrum".into()));
    }
    let mut accepted: Vec<Complex<f64>> = ritz
        .iter()
        .filter(|r| r.theta.norm() > 1e-8 * theta_max && r.residual <= 1e-8 * r.theta.norm())
        .map(|r| sigma + r.theta.inv())
        .collect();
    accepted.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    Ok(accepted)
}

fn arnoldi_spectrum(jac: &Jacobian, mass: &BandMatrix, k: usize) -> Result<SpectrumSlice> {
    let n = jac.n();
    let mut m_near = (6 * k).max(90);
    for attempt in 0..2 {
        let near = shift_ritz(jac, mass, SIGMA_NEAR, m_near)?;
        let far = shift_ritz(jac, mass, SIGMA_FAR, (4 * k).max(60))?;
        // union, preferring the near-shift copies (better resolved at the axis)
        let mut merged = near.clone();
        for z in &far {
            if !merged.iter().any(|w| (w - z).norm() <= 1e-9 * (1.0 + z.norm())) {
                merged.push(*z);
            }
        }
        merged.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
        // the near roster must reach below the axis, otherwise unstable
        // eigenvalues may hide beyond its resolved radius
        let reached_below = near.iter().any(|z| z.re < -STABILITY_TOL);
        let converged = near.len() >= k.min(n) && reached_below;
        if converged || attempt == 1 {
            let (n_unstable, marginal) = classify(&merged, STABILITY_TOL);
            merged.truncate(k);
            return Ok(SpectrumSlice { eigenvalues: merged, n_unstable, marginal, converged });
        }
        m_near = (2 * m_near).min(n);
    }
    unreachable!()
}

/// Smallest `k` nonzero eigenvalues of the discrete scalar Neumann
/// Laplacian, K psi = lambda M psi, ascending. These are the mesh-level
/// counterparts of the analytic Laplace modes and feed the discrete
/// bifurcation predictions.
pub fn scalar_laplace_modes(ws: &FemWorkspace, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("requested zero Laplace modes"));
    }
    let nn = ws.node_count;
    if nn <= DENSE_LIMIT {
        let kd = ws.k1.to_dense();
        let md = ws.m1.to_dense();
        let lu = md.lu();
        let minv_k = lu
            .solve(&kd)
            .ok_or_else(|| Error::Linear("scalar mass matrix is singular".into()))?;
        if let Some(eigs) = bounded_eigenvalues(minv_k) {
            let mut lams: Vec<f64> = eigs.iter().map(|z| z.re).collect();
            lams.sort_by(f64::total_cmp);
            let scale = lams.last().copied().unwrap_or(1.0).max(1.0);
            let nonzero: Vec<f64> = lams.into_iter().filter(|&l| l > 1e-10 * scale).collect();
            if nonzero.len() < k {
                return Err(Error::InsufficientData(format!(
                    "mesh supports only {} nonzero Laplace modes",
                    nonzero.len()
                )));
            }
            return Ok(nonzero[..k].to_vec());
        }
        // fall through to the iterative path on a QR stall
    }
    // shift-invert at sigma = -1 (safely left of the spectrum):
    // T = (K + M)^-1 M has theta = 1/(lambda + 1), largest at lambda = 0
    let band_k = ws.csr_to_band(&ws.k1);
    let band_m = ws.csr_to_band(&ws.m1);
    let shifted = BandMatrix::linear_combination(1.0, &band_k, 1.0, &band_m);
    let lu = shifted.factor()?;
    let mut apply = |x: &[f64]| -> Vec<f64> {
        let mut y = band_m.matvec(x);
        lu.solve_in_place(&mut y).expect("factored operator application");
        y
    };
    let m_krylov = (4 * (k + 1)).max(60).min(nn);
    let ritz = arnoldi_ritz_values(&mut apply, nn, m_krylov);
    let theta_max = ritz.first().map(|r| r.theta.norm()).unwrap_or(0.0);
    let mut lams: Vec<f64> = ritz
        .iter()
        .filter(|r| r.theta.norm() > 1e-8 * theta_max && r.residual <= 1e-10 * r.theta.norm())
        .map(|r| 1.0 / r.theta.re - 1.0)
        .collect();
    lams.sort_by(f64::total_cmp);
    let nonzero: Vec<f64> = lams.into_iter().filter(|&l| l > 1e-8).collect();
    if nonzero.len() < k {
        return Err(Error::Linear(format!(
            "only {} scalar Laplace modes converged, wanted {k}",
            nonzero.len()
        )));
    }
    Ok(nonzero[..k].to_vec())
}

/// Exact nonzero eigenvalues of the uniform-interval P1 pencil,
/// lambda_h = (6/h^2) (1 - cos(k pi h / L)) / (2 + cos(k pi h / L));
/// a closed-form oracle used by tests and the discrete predictions.
pub fn interval_laplace_exact(l: f64, n_nodes: usize, k: usize) -> f64 {
    let h = l / (n_nodes - 1) as f64;
    let t = (k as f64 * std::f64::consts::PI * h / l).cos();
    6.0 / (h * h) * (1.0 - t) / (2.0 + t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FemWorkspace;
    use crate::mesh::build_interval_mesh;
    use crate::models::{
        block_mass, homogeneous_state, jacobian, ModelKind, Params,
    };
    use crate::turing::{char_det, critical_d};

    const PI: f64 = std::f64::consts::PI;

    #[test]
    fn scalar_modes_match_the_exact_discrete_formula() {
        let mesh = build_interval_mesh(1.0, 26).unwrap();
        let ws = FemWorkspace::new(&mesh);
        let lams = scalar_laplace_modes(&ws, 5).unwrap();
        for (i, &lam) in lams.iter().enumerate() {
            let exact = interval_laplace_exact(1.0, 26, i + 1);
            assert!(
                (lam - exact).abs() < 1e-9 * exact,
                "mode {}: {lam} vs {exact}",
                i + 1
            );
        }
        // second-order consistency with the continuous eigenvalues
        assert!((lams[0] - PI * PI).abs() / (PI * PI) < 5e-3);
    }

    #[test]
    fn homogeneous_spectrum_reduces_to_the_mode_blocks() {
        // at a constant state the discrete eigenvalues are exactly the
        // eigenvalues of J* - lambda_h D over discrete Laplace modes
        let mesh = build_interval_mesh(1.0, 26).unwrap();
        let ws = FemWorkspace::new(&mesh);
        let p = Params::table1().with_active(0.03);
        let s = homogeneous_state(&ws, &p, ModelKind::Cross).unwrap();
        let jac = jacobian(&ws, &p, &s).unwrap();
        let mass = block_mass(&ws, 2);
        let slice = leading_spectrum(&jac, &mass, 6).unwrap();

        // predicted leading eigenvalue: max over modes of the 2 x 2 blocks
        let lin = crate::turing::linearize(&p).unwrap();
        let mut best = f64::NEG_INFINITY;
        for k in 0..26 {
            let lam = if k == 0 { 0.0 } else { interval_laplace_exact(1.0, 26, k) };
            let m11 = lin.j[0][0] - lam * (p.d1 + p.d12 * lin.v_star);
            let m12 = lin.j[0][1] - lam * p.d12 * lin.u_star;
            let m21 = lin.j[1][0];
            let m22 = lin.j[1][1] - lam * p.d2;
            let tr = m11 + m22;
            let det = m11 * m22 - m12 * m21;
            let disc = tr * tr - 4.0 * det;
            let re_max = if disc >= 0.0 { 0.5 * (tr + disc.sqrt()) } else { 0.5 * tr };
            best = best.max(re_max);
        }
        let lead = slice.eigenvalues[0];
        assert!(lead.im.abs() < 1e-9);
        assert!((lead.re - best).abs() < 1e-9, "{} vs {best}", lead.re);
    }

    #[test]
    fn unstable_counts_follow_the_thresholds() {
        let mesh = build_interval_mesh(1.0, 26).unwrap();
        let ws = FemWorkspace::new(&mesh);
        let mass = block_mass(&ws, 2);
        // d = 0.04 above every threshold: stable; d = 0.03 between the first
        // and second thresholds: exactly one unstable mode; d = 0.018 below
        // the second: three unstable (the mode-2 pair of signs only adds one
        // eigenvalue per mode here, counts are per real crossing)
        for (d, expected) in [(0.04, 0), (0.03, 1), (0.018, 2)] {
            let p = Params::table1().with_active(d);
            let s = homogeneous_state(&ws, &p, ModelKind::Cross).unwrap();
            let jac = jacobian(&ws, &p, &s).unwrap();
            let slice = leading_spectrum(&jac, &mass, 6).unwrap();
            assert_eq!(slice.n_unstable, expected, "d = {d}");
            assert!(slice.converged);
        }
    }

    #[test]
    fn fast_model_counts_follow_their_shifted_thresholds() {
        let mesh = build_interval_mesh(1.0, 26).unwrap();
        let ws = FemWorkspace::new(&mesh);
        let mass = block_mass(&ws, 3);
        let mut p = Params::table1();
        p.eps = 0.01; // B1 ~ 0.0245, B2 ~ 0.0143
        for (d, expected) in [(0.03, 0), (0.02, 1), (0.012, 2)] {
            let q = p.with_active(d);
            let s = homogeneous_state(&ws, &q, ModelKind::Fast).unwrap();
            let jac = jacobian(&ws, &q, &s).unwrap();
            let slice = leading_spectrum(&jac, &mass, 8).unwrap();
            assert_eq!(slice.n_unstable, expected, "d = {d}");
        }
    }

    #[test]
    fn dense_and_arnoldi_paths_agree() {
        let mesh = build_interval_mesh(1.0, 41).unwrap();
        let ws = FemWorkspace::new(&mesh);
        let p = Params::table1().with_active(0.025);
        let s = homogeneous_state(&ws, &p, ModelKind::Cross).unwrap();
        let jac = jacobian(&ws, &p, &s).unwrap();
        let mass = block_mass(&ws, 2);
        let dense = leading_spectrum_with(&jac, &mass, 4, SpectrumMethod::Dense).unwrap();
        let arn = leading_spectrum_with(&jac, &mass, 4, SpectrumMethod::ShiftInvert).unwrap();
        assert!(arn.converged);
        assert_eq!(dense.n_unstable, arn.n_unstable);
        for (a, b) in dense.eigenvalues.iter().zip(&arn.eigenvalues) {
            assert!((a - b).norm() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn two_shift_union_counts_a_deeply_unstable_state() {
        // far below every threshold the homogeneous state has several
        // unstable modes spread over a range of growth rates; the union of
        // both shifts must agree with the dense count
        let mesh = build_interval_mesh(1.0, 41).unwrap();
        let ws = FemWorkspace::new(&mesh);
        let p = Params::table1().with_active(0.005);
        let s = homogeneous_state(&ws, &p, ModelKind::Cross).unwrap();
        let jac = jacobian(&ws, &p, &s).unwrap();
        let mass = block_mass(&ws, 2);
        let dense = leading_spectrum_with(&jac, &mass, 8, SpectrumMethod::Dense).unwrap();
        let arn = leading_spectrum_with(&jac, &mass, 8, SpectrumMethod::ShiftInvert).unwrap();
        assert!(dense.n_unstable >= 3, "expected a deeply unstable state");
        assert_eq!(dense.n_unstable, arn.n_unstable);
        assert!(arn.converged);
    }

    #[test]
    fn marginal_flag_fires_at_a_discrete_threshold() {
        // with d set to the discrete mode-1 threshold, the leading
        // eigenvalue sits on the axis up to solver noise
        let mesh = build_interval_mesh(1.0, 26).unwrap();
        let ws = FemWorkspace::new(&mesh);
        let lam_h = interval_laplace_exact(1.0, 26, 1);
        let p0 = Params::table1();
        let d_h = critical_d(&p0, lam_h).unwrap().unwrap();
        assert!(char_det(&p0, lam_h, d_h).unwrap().abs() < 1e-12);

        let p = p0.with_active(d_h);
        let s = homogeneous_state(&ws, &p, ModelKind::Cross).unwrap();
        let jac = jacobian(&ws, &p, &s).unwrap();
        let mass = block_mass(&ws, 2);
        let slice = leading_spectrum(&jac, &mass, 4).unwrap();
        let lead = slice.eigenvalues[0];
        assert!(lead.re.abs() < 1e-9, "leading Re = {}", lead.re);
        let (_, marginal) = classify(&slice.eigenvalues, 1e-6);
        assert!(marginal);
    }
}
