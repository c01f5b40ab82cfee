//! Sliced Wasserstein-2 distance between embedding sets.
//!
//! Projects both sets onto random unit directions and averages the exact
//! one-dimensional W2 distance (quantile matching) over projections. Exact
//! in 1-D, dependency-free, and cheap at desk scale.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::numerics::standard_normal;

#[derive(Clone, Debug)]
pub struct ShiftReport {
    /// Mean over projections of the 1-D W2 distance.
    pub estimate: f64,
    pub n_projections: usize,
    /// Bootstrap 95% interval over projections.
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Exact W2 between two 1-D empirical distributions: the L2 norm of the
/// quantile-function difference, integrated piecewise over the merged
/// breakpoints (handles unequal sample counts).
pub fn w2_1d(xs: &[f64], ys: &[f64]) -> f64 {
    assert!(!xs.is_empty() && !ys.is_empty(), "empty sample set");
    let mut x = xs.to_vec();
    let mut y = ys.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    // Integrate (F^-1(u) - G^-1(u))^2 du over [0,1]; both inverses are step
    // functions with breakpoints at i/n and j/m.
    let mut acc = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    while i < n && j < m {
        let next_x = (i + 1) as f64 / n as f64;
        let next_y = (j + 1) as f64 / m as f64;
        let next = next_x.min(next_y);
        let d = x[i] - y[j];
        acc += d * d * (next - u);
        u = next;
        if next_x <= next {
            i += 1;
        }
        if next_y <= next {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

/// Average over random unit directions of the exact projected W2.
/// `x` and `y` are row-major `[n, width]` sample sets of equal width.
pub fn sliced_wasserstein(
    x: &[f64],
    y: &[f64],
    width: usize,
    n_projections: usize,
    seed: u64,
) -> ShiftReport {
    assert!(width > 0 && n_projections >= 1);
    assert!(!x.is_empty() && !y.is_empty(), "empty sample set");
    assert_eq!(x.len() % width, 0, "x length not a multiple of width");
    assert_eq!(y.len() % width, 0, "y length not a multiple of width");
    let nx = x.len() / width;
    let ny = y.len() / width;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut per_proj = Vec::with_capacity(n_projections);
    for _ in 0..n_projections {
        let dir = standard_normal::<f64>(&mut rng, &[1, width]);
        let norm = dir.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let proj = |set: &[f64], n: usize| -> Vec<f64> {
            (0..n)
                .map(|r| {
                    let mut acc = 0.0;
                    for c in 0..width {
                        acc += set[r * width + c] * dir.data()[c];
                    }
                    acc / norm
                })
                .collect()
        };
        let px = proj(x, nx);
        let py = proj(y, ny);
        per_proj.push(w2_1d(&px, &py));
    }
    let estimate = per_proj.iter().sum::<f64>() / n_projections as f64;

    // Bootstrap the projection average.
    let boots = 200;
    let mut means: Vec<f64> = (0..boots)
        .map(|_| {
            let mut acc = 0.0;
            for _ in 0..n_projections {
                let k = rand::Rng::gen_range(&mut rng, 0..n_projections);
                acc += per_proj[k];
            }
            acc / n_projections as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = means[(0.025 * boots as f64) as usize];
    let hi = means[((0.975 * boots as f64) as usize).min(boots - 1)];

    ShiftReport {
        estimate,
        n_projections,
        ci_low: lo,
        ci_high: hi,
    }
}
