//! Reference computations used as test oracles.
//!
//! Nothing here shares code with `mphd-core`: dense linear algebra is done by
//! Gaussian elimination rather than Cholesky, integrals by adaptive
//! Gauss-Kronrod quadrature, and expectations by plain Monte Carlo.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Seeded generator for test fixtures.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matérn covariance written out term by term from its closed form.
pub fn matern_reference(nu_times_two: u32, r: f64, signal_variance: f64) -> f64 {
    match nu_times_two {
        3 => {
            let s = 3f64.sqrt() * r;
            signal_variance * (1.0 + s) * (-s).exp()
        }
        5 => {
            let s = 5f64.sqrt() * r;
            signal_variance * (1.0 + s + s * s / 3.0) * (-s).exp()
        }
        _ => panic!("unsupported smoothness"),
    }
}

/// Anisotropic scaled distance between two points.
pub fn scaled_distance(a: &[f64], b: &[f64], length_scales: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(length_scales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Naive double loop covariance matrix (with optional diagonal addition).
pub fn brute_force_gram(
    nu_times_two: u32,
    xs: &[Vec<f64>],
    length_scales: &[f64],
    signal_variance: f64,
    diagonal: f64,
) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let r = scaled_distance(&xs[i], &xs[j], length_scales);
            k[i][j] = matern_reference(nu_times_two, r, signal_variance);
            if i == j {
                k[i][j] += diagonal;
            }
        }
    }
    k
}

/// LU decomposition with partial pivoting. Returns (lu, permutation, sign).
fn lu(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let n = a.len();
    let mut m = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if pivot != col {
            m.swap(pivot, col);
            perm.swap(pivot, col);
            sign = -sign;
        }
        let p = m[col][col];
        assert!(p != 0.0, "singular matrix in oracle");
        for row in col + 1..n {
            let factor = m[row][col] / p;
            m[row][col] = factor;
            for k in col + 1..n {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    (m, perm, sign)
}

/// Solve `A x = b` by LU.
pub fn lu_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let (m, perm, _) = lu(a);
    let mut y: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
    for i in 0..n {
        for k in 0..i {
            y[i] -= m[i][k] * y[k];
        }
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= m[i][k] * y[k];
        }
        y[i] /= m[i][i];
    }
    y
}

/// Explicit inverse by solving against each unit vector.
pub fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(lu_solve(a, &e));
    }
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

/// log |det A| via LU.
pub fn log_abs_det(a: &[Vec<f64>]) -> f64 {
    let (m, _, _) = lu(a);
    (0..a.len()).map(|i| m[i][i].abs().ln()).sum()
}

/// Negative log density of `N(mean, K)` at `y`, from an explicit inverse and LU determinant.
pub fn dense_mvn_nll(k: &[Vec<f64>], y: &[f64], mean: f64) -> f64 {
    let n = y.len();
    let r: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let inv = inverse(k);
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += r[i] * inv[i][j] * r[j];
        }
    }
    0.5 * quad + 0.5 * log_abs_det(k) + 0.5 * n as f64 * LN_2PI
}

/// Posterior mean and latent variance from the textbook formula with an explicit inverse.
pub fn explicit_posterior(
    k_train: &[Vec<f64>],
    k_cross: &[Vec<f64>],
    prior_var: f64,
    y: &[f64],
    mean: f64,
) -> (Vec<f64>, Vec<f64>) {
    let inv = inverse(k_train);
    let n = y.len();
    let r: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for ks in k_cross {
        let mut m = mean;
        let mut v = prior_var;
        for i in 0..n {
            for j in 0..n {
                m += ks[i] * inv[i][j] * r[j];
                v -= ks[i] * inv[i][j] * ks[j];
            }
        }
        means.push(m);
        vars.push(v);
    }
    (means, vars)
}

/// Central finite-difference gradient.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

/// Relative difference with an absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS_K: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const GK_WEIGHTS_G: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WEIGHTS_K[7] * fc;
    let mut g = GK_WEIGHTS_G[3] * fc;
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let s = f(c - dx) + f(c + dx);
        k += GK_WEIGHTS_K[i] * s;
        if i % 2 == 1 {
            g += GK_WEIGHTS_G[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (v, err) = gk15(f, a, b);
    // below round-off the Kronrod error estimate cannot shrink further
    if err <= tol.max(1e-15 * v.abs()) || err < 1e-300 || depth == 0 {
        return v;
    }
    let m = 0.5 * (a + b);
    adaptive(f, a, m, tol * 0.5, depth - 1) + adaptive(f, m, b, tol * 0.5, depth - 1)
}

/// Adaptive Gauss-Kronrod (7-15) quadrature on a finite interval.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    // Pre-split so narrow features are not missed by the first estimate.
    let pieces = 64;
    let w = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| adaptive(&f, a + i as f64 * w, a + (i + 1) as f64 * w, tol / pieces as f64, 30))
        .sum()
}

/// ln Γ by Stirling series after upward recurrence; independent of the crate's Lanczos code.
pub fn ln_gamma_stirling(x: f64) -> f64 {
    let mut shift = 0.0;
    let mut z = x;
    while z < 20.0 {
        shift -= z.ln();
        z += 1.0;
    }
    let z2 = z * z;
    let series = 1.0 / (12.0 * z) - 1.0 / (360.0 * z * z2) + 1.0 / (1260.0 * z2 * z2 * z)
        - 1.0 / (1680.0 * z2 * z2 * z2 * z);
    shift + (z - 0.5) * z.ln() - z + 0.5 * LN_2PI + series
}

/// Gamma(shape, rate) log density, evaluated independently.
pub fn gamma_log_density(shape: f64, rate: f64, x: f64) -> f64 {
    shape * rate.ln() - ln_gamma_stirling(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// KL(p || q) between Gamma distributions by quadrature in log-space.
pub fn gamma_kl_quadrature(ap: f64, bp: f64, aq: f64, bq: f64) -> f64 {
    // substitute x = exp(u); integrand p(x) x log(p/q)
    let integrand = |u: f64| {
        let x = u.exp();
        let lp = gamma_log_density(ap, bp, x);
        let lq = gamma_log_density(aq, bq, x);
        (lp + u).exp() * (lp - lq)
    };
    let centre = (ap / bp).ln();
    let lo = centre - 60.0 / ap.min(1.0) - 10.0;
    let hi = ((ap + 40.0 * ap.sqrt() + 60.0) / bp).ln();
    integrate(integrand, lo.max(-800.0), hi, 1e-12)
}

/// Monte-Carlo estimate of E[g(Z)] with Z ~ N(mu, sigma²); returns (mean, standard error).
pub fn monte_carlo_normal<G: Fn(f64) -> f64>(mu: f64, sigma: f64, draws: usize, seed: u64, g: G) -> (f64, f64) {
    let mut r = rng(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let z: f64 = StandardNormal.sample(&mut r);
        let v = g(mu + sigma * z);
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Index of the maximum by linear scan, lowest index on ties.
pub fn brute_force_argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if *v > values[b] => best = Some(i),
            _ => {}
        }
    }
    best
}
