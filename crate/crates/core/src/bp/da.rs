//! Iterative probabilistic data association on scalar message ratios.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest value a message ratio may take; keeps later products finite when
/// a denominator vanishes.
pub const MESSAGE_CAP: f64 = 1e300;

/// Likelihood ratios entering the association step.
///
/// `beta` is `I x (J + 1)` with column 0 holding `beta_i(0)`. `xi` holds the
/// ratio `xi_j(0) / xi_j(i)` per measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaInputs {
    #[serde(with = "crate::model::matrix_rows")]
    pub beta: DMatrix<f64>,
    pub xi: Vec<f64>,
}

impl DaInputs {
    pub fn new(beta: DMatrix<f64>, xi: Vec<f64>) -> Result<Self> {
        let inputs = DaInputs { beta, xi };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn n_objects(&self) -> usize {
        self.beta.nrows()
    }

    pub fn n_measurements(&self) -> usize {
        self.xi.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.ncols() != self.xi.len() + 1 {
            return Err(Error::Shape {
                expected: self.xi.len() + 1,
                actual: self.beta.ncols(),
            });
        }
        if self
            .beta
            .iter()
            .chain(&self.xi)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::NonFinite(
                "likelihood ratios must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Converged ratios. `phi[(i, j)]` is the object-to-measurement ratio and
/// `nu[(i, j)]` the measurement-to-object ratio for the pair `(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaMessages {
    #[serde(with = "crate::model::matrix_rows")]
    pub phi: DMatrix<f64>,
    #[serde(with = "crate::model::matrix_rows")]
    pub nu: DMatrix<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

fn capped(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den > 0.0 {
        (num / den).min(MESSAGE_CAP)
    } else {
        MESSAGE_CAP
    }
}

/// Exclusive sums `sum_{k != m} x_k` for every `m`, from prefix and suffix
/// sums so that no subtraction (and no cancellation) is involved.
fn exclusive_sums(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    let mut acc = 0.0;
    for m in 0..n {
        out[m] = acc;
        acc += x[m];
    }
    let mut acc = 0.0;
    for m in (0..n).rev() {
        out[m] += acc;
        acc += x[m];
    }
}

fn update_nu(inputs: &DaInputs, phi: &DMatrix<f64>, nu: &mut DMatrix<f64>, buf: &mut [f64]) {
    let n_obj = phi.nrows();
    for j in 0..phi.ncols() {
        let col = phi.column(j);
        let excl = &mut buf[..n_obj];
        exclusive_sums(col.as_slice(), excl);
        for i in 0..n_obj {
            nu[(i, j)] = capped(1.0, inputs.xi[j] + excl[i]);
        }
    }
}

fn update_phi(
    inputs: &DaInputs,
    nu: &DMatrix<f64>,
    phi: &mut DMatrix<f64>,
    terms: &mut [f64],
    excl: &mut [f64],
) {
    let n_meas = inputs.n_measurements();
    for i in 0..inputs.n_objects() {
        for j in 0..n_meas {
            terms[j] = inputs.beta[(i, j + 1)] * nu[(i, j)];
        }
        exclusive_sums(&terms[..n_meas], &mut excl[..n_meas]);
        let b0 = inputs.beta[(i, 0)];
        for j in 0..n_meas {
            phi[(i, j)] = capped(inputs.beta[(i, j + 1)], b0 + excl[j]);
        }
    }
}

fn relative_change(old: f64, new: f64) -> f64 {
    let scale = old.abs().max(new.abs());
    if scale == 0.0 {
        0.0
    } else {
        (new - old).abs() / scale
    }
}

/// Runs the ratio iteration from `phi = 1` until the largest relative change
/// of any ratio is at most `tol`, or `max_iter` iterations have run.
pub fn iterate_da(inputs: &DaInputs, max_iter: usize, tol: f64) -> DaMessages {
    let (n_obj, n_meas) = (inputs.n_objects(), inputs.n_measurements());
    let mut phi = DMatrix::from_element(n_obj, n_meas, 1.0);
    let mut nu = DMatrix::zeros(n_obj, n_meas);
    let mut next = DMatrix::zeros(n_obj, n_meas);
    let mut buf = vec![0.0; n_obj.max(n_meas)];
    let mut excl = vec![0.0; n_meas];

    if n_obj == 0 || n_meas == 0 {
        return DaMessages {
            phi,
            nu,
            iterations_used: 0,
            converged: true,
        };
    }

    let mut converged = false;
    let mut iterations_used = 0;
    for it in 1..=max_iter {
        update_nu(inputs, &phi, &mut nu, &mut buf);
        update_phi(inputs, &nu, &mut next, &mut buf, &mut excl);
        iterations_used = it;
        let change = phi
            .iter()
            .zip(next.iter())
            .map(|(o, n)| relative_change(*o, *n))
            .fold(0.0, f64::max);
        std::mem::swap(&mut phi, &mut next);
        if change <= tol {
            converged = true;
            break;
        }
    }
    update_nu(inputs, &phi, &mut nu, &mut buf);
    DaMessages {
        phi,
        nu,
        iterations_used,
        converged,
    }
}

/// Largest relative violation of the two fixed-point equations by `msgs`.
pub fn fixed_point_residual(inputs: &DaInputs, msgs: &DaMessages) -> f64 {
    let (n_obj, n_meas) = (inputs.n_objects(), inputs.n_measurements());
    let mut nu = DMatrix::zeros(n_obj, n_meas);
    let mut phi = DMatrix::zeros(n_obj, n_meas);
    let mut buf = vec![0.0; n_obj.max(n_meas)];
    let mut excl = vec![0.0; n_meas];
    update_nu(inputs, &msgs.phi, &mut nu, &mut buf);
    update_phi(inputs, &msgs.nu, &mut phi, &mut buf, &mut excl);
    let r_nu = nu
        .iter()
        .zip(msgs.nu.iter())
        .map(|(a, b)| relative_change(*a, *b));
    let r_phi = phi
        .iter()
        .zip(msgs.phi.iter())
        .map(|(a, b)| relative_change(*a, *b));
    r_nu.chain(r_phi).fold(0.0, f64::max)
}

/// Approximate association marginals.
///
/// Row `i` of the first matrix is `p(a_i = 0..=J)`, row `j` of the second
/// is `p(b_j = 0..=I)`.
pub fn association_marginals(inputs: &DaInputs, msgs: &DaMessages) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n_obj, n_meas) = (inputs.n_objects(), inputs.n_measurements());
    let mut pa = DMatrix::zeros(n_obj, n_meas + 1);
    for i in 0..n_obj {
        pa[(i, 0)] = inputs.beta[(i, 0)];
        for j in 0..n_meas {
            pa[(i, j + 1)] = inputs.beta[(i, j + 1)] * msgs.nu[(i, j)];
        }
        normalize_row(&mut pa, i);
    }
    let mut pb = DMatrix::zeros(n_meas, n_obj + 1);
    for j in 0..n_meas {
        pb[(j, 0)] = inputs.xi[j];
        for i in 0..n_obj {
            pb[(j, i + 1)] = msgs.phi[(i, j)];
        }
        normalize_row(&mut pb, j);
    }
    (pa, pb)
}

fn normalize_row(m: &mut DMatrix<f64>, r: usize) {
    let s: f64 = m.row(r).sum();
    if s > 0.0 && s.is_finite() {
        m.row_mut(r).iter_mut().for_each(|v| *v /= s);
    } else {
        // degenerate row: all mass on the "not associated" entry
        m.row_mut(r).fill(0.0);
        m[(r, 0)] = 1.0;
    }
}

/// Exact association marginals by enumerating every consistent
/// object-to-measurement map. Exponential; meant for small problems and
/// tests.
pub fn enumerate_marginals(inputs: &DaInputs) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n_obj, n_meas) = (inputs.n_objects(), inputs.n_measurements());
    let mut pa = DMatrix::zeros(n_obj, n_meas + 1);
    let mut pb = DMatrix::zeros(n_meas, n_obj + 1);
    let mut a = vec![0usize; n_obj];
    let mut used = vec![false; n_meas];

    #[allow(clippy::too_many_arguments)]
    fn rec(
        i: usize,
        weight: f64,
        inputs: &DaInputs,
        a: &mut Vec<usize>,
        used: &mut Vec<bool>,
        pa: &mut DMatrix<f64>,
        pb: &mut DMatrix<f64>,
    ) {
        if i == a.len() {
            let mut w = weight;
            for (j, u) in used.iter().enumerate() {
                if !u {
                    w *= inputs.xi[j];
                }
            }
            for (obj, &aj) in a.iter().enumerate() {
                pa[(obj, aj)] += w;
                if aj > 0 {
                    pb[(aj - 1, obj + 1)] += w;
                }
            }
            for (j, u) in used.iter().enumerate() {
                if !u {
                    pb[(j, 0)] += w;
                }
            }
            return;
        }
        a[i] = 0;
        rec(i + 1, weight * inputs.beta[(i, 0)], inputs, a, used, pa, pb);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                a[i] = j + 1;
                rec(i + 1, weight * inputs.beta[(i, j + 1)], inputs, a, used, pa, pb);
                used[j] = false;
            }
        }
        a[i] = 0;
    }

    rec(0, 1.0, inputs, &mut a, &mut used, &mut pa, &mut pb);
    for i in 0..n_obj {
        normalize_row(&mut pa, i);
    }
    for j in 0..n_meas {
        normalize_row(&mut pb, j);
    }
    (pa, pb)
}

/// Total-variation distance between two stochastic matrices, maximized over
/// rows.
pub fn max_row_tv(p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (0..p.nrows())
        .map(|r| {
            0.5 * p
                .row(r)
                .iter()
                .zip(q.row(r).iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inputs(beta: &[&[f64]], xi: &[f64]) -> DaInputs {
        let rows = beta.len();
        let cols = xi.len() + 1;
        let flat: Vec<f64> = beta.iter().flat_map(|r| r.iter().copied()).collect();
        DaInputs::new(DMatrix::from_row_slice(rows, cols, &flat), xi.to_vec()).unwrap()
    }

    #[test]
    fn single_pair_is_exact() {
        let inp = inputs(&[&[1.0, 1.0]], &[1.0]);
        let msgs = iterate_da(&inp, 200, 1e-12);
        let (pa, pb) = association_marginals(&inp, &msgs);
        assert_eq!(pa[(0, 1)], 0.5);
        assert_eq!(pb[(0, 1)], 0.5);
    }

    #[test]
    fn zero_likelihood_forces_missed_detection() {
        let inp = inputs(&[&[0.3, 0.0, 0.0], &[0.5, 2.0, 1.0]], &[1.5, 2.0]);
        let msgs = iterate_da(&inp, 200, 1e-12);
        assert!(msgs.phi.row(0).iter().all(|v| *v == 0.0));
        let (pa, _) = association_marginals(&inp, &msgs);
        assert_eq!(pa[(0, 0)], 1.0);
    }

    #[test]
    fn near_deterministic_case_converges_slowly() {
        let inp = inputs(
            &[&[0.01, 11.434678757392685, 18.674165307487492], &[0.01, 9.542160174168362, 16.341298427937286]],
            &[1.0, 1.0],
        );
        assert!(!iterate_da(&inp, 200, 1e-10).converged);
        let msgs = iterate_da(&inp, 1000, 1e-10);
        assert!(msgs.converged && msgs.iterations_used > 200);
        assert!(fixed_point_residual(&inp, &msgs) <= 1e-9);
    }

    #[test]
    fn loopy_error_is_usually_small() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut tvs: Vec<f64> = (0..2000)
            .map(|_| {
                let beta = DMatrix::from_fn(3, 4, |_, _| rng.random_range(0.0..1.0));
                let xi = (0..3).map(|_| 1.0 + rng.random_range(0.0..1.0)).collect();
                let inp = DaInputs::new(beta, xi).unwrap();
                let msgs = iterate_da(&inp, 200, 1e-10);
                let (pa, pb) = association_marginals(&inp, &msgs);
                let (ea, eb) = enumerate_marginals(&inp);
                max_row_tv(&pa, &ea).max(max_row_tv(&pb, &eb))
            })
            .collect();
        tvs.sort_by(f64::total_cmp);
        // 3x3 is the most loopy case allowed; the worst instance is ~0.12
        assert!(tvs[1000] < 0.02, "median {}", tvs[1000]);
        assert!(tvs[1900] < 0.05, "95th percentile {}", tvs[1900]);
    }

    #[test]
    fn empty_problem() {
        let inp = DaInputs::new(DMatrix::zeros(0, 3), vec![1.0, 1.0]).unwrap();
        let msgs = iterate_da(&inp, 200, 1e-10);
        assert!(msgs.converged);
        let (pa, pb) = association_marginals(&inp, &msgs);
        assert_eq!(pa.nrows(), 0);
        assert!(pb.column(0).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn zero_denominator_is_capped() {
        // certain detection of a certain object with one candidate
        let inp = inputs(&[&[0.0, 2.0]], &[1.0]);
        let msgs = iterate_da(&inp, 200, 1e-12);
        assert!(msgs.phi[(0, 0)].is_finite());
        let (pa, _) = association_marginals(&inp, &msgs);
        assert!((pa[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_negative_and_nonfinite_inputs() {
        let bad = DaInputs::new(DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), vec![1.0]);
        assert!(bad.is_err());
        let bad = DaInputs::new(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), vec![f64::NAN]);
        assert!(bad.is_err());
        let bad = DaInputs::new(DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]), vec![1.0]);
        assert!(bad.is_err());
    }

    fn random_inputs() -> impl Strategy<Value = DaInputs> {
        (1usize..=3, 1usize..=3).prop_flat_map(|(i, j)| {
            (
                proptest::collection::vec(0.01f64..1.0, i),
                proptest::collection::vec(0.0f64..20.0, i * j),
                proptest::collection::vec(1.0f64..3.0, j),
            )
                .prop_map(move |(b0, bj, xi)| {
                    let mut beta = DMatrix::zeros(i, j + 1);
                    for r in 0..i {
                        beta[(r, 0)] = b0[r];
                        for c in 0..j {
                            beta[(r, c + 1)] = bj[r * j + c];
                        }
                    }
                    DaInputs::new(beta, xi).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn exact_on_trees(inp in random_inputs()) {
            prop_assume!(inp.n_objects() == 1 || inp.n_measurements() == 1);
            let msgs = iterate_da(&inp, 200, 1e-10);
            prop_assert!(msgs.converged);
            let (pa, pb) = association_marginals(&inp, &msgs);
            let (ea, eb) = enumerate_marginals(&inp);
            prop_assert!(max_row_tv(&pa, &ea) <= 1e-9);
            prop_assert!(max_row_tv(&pb, &eb) <= 1e-9);
        }

        #[test]
        fn converged_messages_are_a_fixed_point(inp in random_inputs()) {
            let msgs = iterate_da(&inp, 5000, 1e-10);
            prop_assert!(msgs.converged);
            prop_assert!(fixed_point_residual(&inp, &msgs) <= 1e-9);
            prop_assert!(msgs.phi.iter().chain(msgs.nu.iter()).all(|v| v.is_finite() && *v >= 0.0));
        }

        #[test]
        fn marginals_are_stochastic(inp in random_inputs()) {
            let msgs = iterate_da(&inp, 200, 1e-10);
            let (pa, pb) = association_marginals(&inp, &msgs);
            for r in 0..pa.nrows() {
                prop_assert!((pa.row(r).sum() - 1.0).abs() < 1e-9);
            }
            for r in 0..pb.nrows() {
                prop_assert!((pb.row(r).sum() - 1.0).abs() < 1e-9);
            }
        }
    }
}
