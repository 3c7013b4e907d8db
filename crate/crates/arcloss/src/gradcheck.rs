//! Central finite-difference gradient checking.
//!
//! The check recomputes the target scalar from perturbed inputs only, so it
//! stays independent of the backward pass it validates. A coordinate passes
//! when `|analytic - numeric| <= rtol * max(|analytic|, |numeric|) + atol`;
//! the additive floor keeps near-zero gradients from tripping the relative
//! test on finite-difference noise.

/// h = 1e-5 in f64 balances truncation against round-off.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-5, rtol: 1e-4, atol: 1e-8 }
    }
}

/// Largest relative mismatch observed, for reporting.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckReport {
    pub max_rel: f64,
    pub max_abs: f64,
    pub coords: usize,
}

impl GradCheck {
    /// Central difference of `f` along coordinate `i` of `x`.
    pub fn central_diff<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x: &[f64], i: usize) -> f64 {
        let mut xp = x.to_vec();
        xp[i] = x[i] + self.h;
        let fp = f(&xp);
        xp[i] = x[i] - self.h;
        let fm = f(&xp);
        (fp - fm) / (2.0 * self.h)
    }

    /// Compare `analytic` against central differences at `coords`.
    pub fn check_coords<F: FnMut(&[f64]) -> f64>(
        &self,
        mut f: F,
        x: &[f64],
        analytic: &[f64],
        coords: &[usize],
        what: &str,
    ) -> Result<CheckReport, String> {
        let mut report = CheckReport::default();
        for &i in coords {
            let numeric = self.central_diff(&mut f, x, i);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
            if abs > self.rtol * a.abs().max(numeric.abs()) + self.atol {
                return Err(format!(
                    "{what}: coord {i}: analytic {a:e} vs numeric {numeric:e} (abs {abs:e}, rel {rel:e})"
                ));
            }
            report.max_abs = report.max_abs.max(abs);
            report.max_rel = report.max_rel.max(rel);
            report.coords += 1;
        }
        Ok(report)
    }

    /// Check every coordinate (small tensors only).
    pub fn check_all<F: FnMut(&[f64]) -> f64>(
        &self,
        f: F,
        x: &[f64],
        analytic: &[f64],
        what: &str,
    ) -> Result<CheckReport, String> {
        let coords: Vec<usize> = (0..x.len()).collect();
        self.check_coords(f, x, analytic, &coords, what)
    }
}

/// Deterministic coordinate sample: `count` indices spread over `len` with a
/// seed-dependent offset, so repeated runs probe the same coordinates.
pub fn sample_coords(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let stride = len / count;
    (0..count).map(|i| (i * stride + (seed as usize) % stride.max(1)) % len).collect()
}
