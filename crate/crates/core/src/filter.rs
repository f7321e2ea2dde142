//! Code compression through a shared K×K filter matrix.
//!
//! A multi-layer code set stores Υ codes per sample. Instead of keeping all
//! of them, we keep only the deepest code plus one matrix F that walks the
//! chain back: each shallower code is recovered as sign of the normalized
//! product F·b. One F serves every adjacent layer pair, so the stored
//! payload drops from M·Υ·K code bits to M·K bits plus the matrix.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::io::{unpack_code, CodeSet};
use crate::tape::Tape;

pub const FIT_STEPS: usize = 500;
pub const FIT_STEP_SIZE: f64 = 1e-2;
const SIGMA_FLOOR: f64 = 1e-8;

/// The learned K×K recovery matrix. Codes are normalized per vector (own
/// mean and standard deviation) before the sign.
pub struct FilterMatrix {
    f: Array,
}

impl FilterMatrix {
    pub fn new(f: Array) -> Result<FilterMatrix> {
        if f.rank() != 2 || f.shape()[0] != f.shape()[1] {
            return Err(Error::op("filter", format!("matrix must be square, got {:?}", f.shape())));
        }
        if !f.all_finite() {
            return Err(Error::op("filter", "matrix has non-finite entries"));
        }
        Ok(FilterMatrix { f })
    }

    pub fn k(&self) -> usize {
        self.f.shape()[0]
    }

    pub fn matrix(&self) -> &Array {
        &self.f
    }

    /// One chain step: F times the deeper code, normalized by the result's
    /// own mean and standard deviation (floored at 1e-8), then signed.
    pub fn derive_code(&self, deeper: &[f64]) -> Result<Vec<f64>> {
        let k = self.k();
        if deeper.len() != k {
            return Err(Error::op(
                "derive_code",
                format!("code has {} entries, filter expects {k}", deeper.len()),
            ));
        }
        let mut v = vec![0.0; k];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = (0..k).map(|j| self.f.at(&[i, j]) * deeper[j]).sum();
        }
        let mean = v.iter().sum::<f64>() / k as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k as f64;
        let sigma = var.sqrt().max(SIGMA_FLOOR);
        Ok(v.into_iter().map(|x| crate::sign((x - mean) / sigma)).collect())
    }

    /// Recovers all Υ layers from the stored deepest code, shallow first.
    /// The deepest layer is returned as stored, never re-normalized.
    pub fn derive_chain(&self, deepest: &[f64], upsilon: usize) -> Result<Vec<Vec<f64>>> {
        if upsilon == 0 {
            return Err(Error::op("derive_chain", "zero layers"));
        }
        let mut chain = vec![deepest.to_vec()];
        for _ in 1..upsilon {
            let next = self.derive_code(chain.last().expect("chain is never empty"))?;
            chain.push(next);
        }
        chain.reverse();
        Ok(chain)
    }
}

/// How a fit went: `underdetermined` flags fewer training rows than code
/// bits, and the losses bracket the descent phase.
#[derive(Clone, Copy, Debug)]
pub struct FitReport {
    pub underdetermined: bool,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn fit_filter(codes: &CodeSet) -> Result<FilterMatrix> {
    Ok(fit_filter_with_report(codes)?.0)
}

/// Fits the shared matrix on all adjacent layer pairs of `codes`: rows are
/// deeper codes, targets their shallower neighbors. A ridge least-squares
/// solve seeds F, then plain gradient descent polishes the real objective
/// mean((normalize(F·b) − b_prev)²), stopping early once a step stops
/// improving the loss.
pub fn fit_filter_with_report(codes: &CodeSet) -> Result<(FilterMatrix, FitReport)> {
    let (k, upsilon, m) = (codes.k(), codes.upsilon(), codes.samples());
    if upsilon < 2 {
        return Err(Error::op("fit_filter", "need at least two layers to relate"));
    }
    if m == 0 {
        return Err(Error::op("fit_filter", "empty code set"));
    }
    let rows = m * (upsilon - 1);
    let mut x = Vec::with_capacity(rows * k);
    let mut y = Vec::with_capacity(rows * k);
    for sample in 0..m {
        for tau in 1..upsilon {
            x.extend(unpack_code(codes.code(sample, tau), k));
            y.extend(unpack_code(codes.code(sample, tau - 1), k));
        }
    }
    let x = Array::from_vec(vec![rows, k], x)?;
    let y = Array::from_vec(vec![rows, k], y)?;

    let mut f = least_squares_seed(&x, &y, rows, k)?;

    let eval = |f_current: &Array| -> Result<(f64, Array)> {
        let tape = Tape::new();
        let fv = tape.var(f_current.clone());
        let gain = tape.constant(Array::ones(&[k]));
        let bias = tape.constant(Array::zeros(&[k]));
        let pred = tape.constant(x.clone()).matmul(&fv.transpose(0, 1)?)?;
        let normed = pred.layer_norm(&gain, &bias, 1, SIGMA_FLOOR * SIGMA_FLOOR)?;
        let diff = normed.sub(&tape.constant(y.clone()))?;
        let loss = diff.mul(&diff)?.mean_all();
        let value = loss.value().item();
        let grads = loss.backward()?;
        Ok((value, grads.wrt(&fv)))
    };

    let (mut loss, mut grad) = eval(&f)?;
    let initial_loss = loss;
    let mut steps = 0;
    for _ in 0..FIT_STEPS {
        if !loss.is_finite() {
            return Err(Error::Numeric("filter fit diverged".into()));
        }
        let candidate = Array::from_vec(
            vec![k, k],
            f.data()
                .iter()
                .zip(grad.data())
                .map(|(v, g)| v - FIT_STEP_SIZE * g)
                .collect(),
        )?;
        let (next_loss, next_grad) = eval(&candidate)?;
        if next_loss + 1e-12 * (1.0 + loss) >= loss {
            break;
        }
        f = candidate;
        loss = next_loss;
        grad = next_grad;
        steps += 1;
    }

    let report = FitReport { underdetermined: rows < k, steps, initial_loss, final_loss: loss };
    Ok((FilterMatrix::new(f)?, report))
}

/// Ridge-regularized least squares for the unnormalized warm start:
/// (XᵀX + εI) Fᵀ = XᵀY, solved by Gaussian elimination with partial
/// pivoting.
fn least_squares_seed(x: &Array, y: &Array, rows: usize, k: usize) -> Result<Array> {
    let xd = x.data();
    let yd = y.data();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k * k];
    for r in 0..rows {
        let xr = &xd[r * k..(r + 1) * k];
        let yr = &yd[r * k..(r + 1) * k];
        for i in 0..k {
            let xi = xr[i];
            for j in 0..k {
                gram[i * k + j] += xi * xr[j];
            }
            for j in 0..k {
                rhs[i * k + j] += xi * yr[j];
            }
        }
    }
    for i in 0..k {
        gram[i * k + i] += 1e-8;
    }

    // Eliminate in place; rhs columns are the transposed filter.
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&a, &b| {
                gram[a * k + col].abs().partial_cmp(&gram[b * k + col].abs()).expect("finite")
            })
            .expect("nonempty range");
        if gram[pivot * k + col].abs() < 1e-14 {
            return Err(Error::Numeric("filter seed system is singular".into()));
        }
        if pivot != col {
            for j in 0..k {
                gram.swap(col * k + j, pivot * k + j);
                rhs.swap(col * k + j, pivot * k + j);
            }
        }
        let diag = gram[col * k + col];
        for row in col + 1..k {
            let factor = gram[row * k + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..k {
                gram[row * k + j] -= factor * gram[col * k + j];
            }
            for j in 0..k {
                rhs[row * k + j] -= factor * rhs[col * k + j];
            }
        }
    }
    let mut solution = vec![0.0; k * k];
    for row in (0..k).rev() {
        for j in 0..k {
            let mut acc = rhs[row * k + j];
            for col in row + 1..k {
                acc -= gram[row * k + col] * solution[col * k + j];
            }
            solution[row * k + j] = acc / gram[row * k + row];
        }
    }
    // solution holds Fᵀ; emit F.
    Ok(Array::from_fn(&[k, k], |flat| solution[(flat % k) * k + flat / k]))
}

/// Stored bits over naive multi-layer bits: (M·K + K²) / (M·Υ·K).
pub fn compression_ratio(m: usize, k: usize, upsilon: usize) -> Result<f64> {
    if m == 0 || k == 0 || upsilon == 0 {
        return Err(Error::op("compression_ratio", "all arguments must be positive"));
    }
    Ok((m * k + k * k) as f64 / (m * upsilon * k) as f64)
}
