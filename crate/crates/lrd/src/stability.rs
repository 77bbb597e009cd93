//! Spectral and local-Lipschitz probes: power-iteration spectral norms, the
//! quadratic per-head bound c * sigma(W_V) * sigma(W_Q W_K^T) * eps^2, the
//! empirical Lipschitz ratio of a single attention layer near the MASK
//! embedding, and embedding-norm statistics.

use crate::denoiser::DenoiserModel;
use crate::tensor::{l2_norm, Matrix};
use crate::{Error, Result};
use rand::Rng;

/// Converged power-iteration result. `residual` is the change in the
/// estimate over the final iteration.
#[derive(Debug, Clone, Copy)]
pub struct SpectralEstimate {
    pub sigma_max: f64,
    pub iterations: usize,
    pub residual: f64,
}

const POWER_ITER_TOL: f64 = 1e-12;
const POWER_ITER_MAX: usize = 100_000;

/// Largest singular value of `m` via power iteration on M^T M, with a
/// deterministic start vector.
pub fn spectral_norm(m: &Matrix) -> Result<SpectralEstimate> {
    spectral_norm_with_vector(m).map(|(est, _)| est)
}

/// As `spectral_norm`, also returning the converged right singular vector.
pub fn spectral_norm_with_vector(m: &Matrix) -> Result<(SpectralEstimate, Vec<f64>)> {
    if !m.is_finite() {
        return Err(Error::InvalidArgument(
            "spectral_norm requires finite entries".into(),
        ));
    }
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::InvalidArgument("spectral_norm on empty matrix".into()));
    }
    let n = m.cols;
    // Deterministic start with unequal components so it is not orthogonal
    // to the top eigenvector by symmetry.
    let mut v: Vec<f64> = (0..n).map(|j| 1.0 + 0.01 * j as f64).collect();
    normalize(&mut v);
    let mt = m.transpose();
    let mut sigma = 0.0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < POWER_ITER_MAX {
        iterations += 1;
        let mv = apply(m, &v);
        let new_sigma = l2_norm(&mv);
        let mut w = apply(&mt, &mv);
        let wn = l2_norm(&w);
        residual = (new_sigma - sigma).abs();
        sigma = new_sigma;
        if wn == 0.0 {
            // Image collapsed: v is in the null space of M^T M.
            residual = 0.0;
            sigma = 0.0;
            break;
        }
        for x in w.iter_mut() {
            *x /= wn;
        }
        v = w;
        if residual < POWER_ITER_TOL {
            break;
        }
    }
    Ok((
        SpectralEstimate {
            sigma_max: sigma,
            iterations,
            residual,
        },
        v,
    ))
}

fn apply(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows).map(|i| crate::tensor::dot(m.row(i), v)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Where the probe's epsilon-ball is centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BallCenter {
    MaskEmbedding,
    Origin,
}

/// One local-Lipschitz probe configuration.
#[derive(Debug, Clone)]
pub struct LipschitzProbe {
    /// Ball radii, in embedding-norm units.
    pub epsilons: Vec<f64>,
    /// Pairs sampled per radius.
    pub n_samples: usize,
    /// Proportionality constant of the quadratic bound.
    pub c: f64,
    pub center: BallCenter,
}

impl Default for LipschitzProbe {
    fn default() -> Self {
        LipschitzProbe {
            epsilons: vec![0.01, 0.05, 0.1, 0.5, 1.0],
            n_samples: 64,
            c: 1.0,
            center: BallCenter::MaskEmbedding,
        }
    }
}

impl LipschitzProbe {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty()
            || self.epsilons[0] <= 0.0
            || self.epsilons.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "epsilons must be positive and strictly increasing".into(),
            ));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be >= 2".into()));
        }
        if !self.c.is_finite() || self.c <= 0.0 {
            return Err(Error::Config("c must be positive".into()));
        }
        Ok(())
    }
}

/// The quadratic local bound for one head:
/// c * sigma_max(W_V^h) * sigma_max(W_Q^h (W_K^h)^T) * eps^2.
pub fn lipschitz_bound(
    model: &DenoiserModel,
    layer: usize,
    head: usize,
    epsilon: f64,
    c: f64,
) -> Result<f64> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
    }
    let (w_qk, w_v) = model.spectral_inputs(layer, head)?;
    let sigma_qk = spectral_norm(&w_qk)?.sigma_max;
    let sigma_v = spectral_norm(&w_v)?.sigma_max;
    Ok(c * sigma_v * sigma_qk * epsilon * epsilon)
}

/// Max and median of output/input difference-norm ratios over sampled pairs.
#[derive(Debug, Clone, Copy)]
pub struct RatioStats {
    pub max_ratio: f64,
    pub median_ratio: f64,
    /// Pairs with a non-degenerate input difference.
    pub n_pairs: usize,
}

/// Difference-norm ratios of `map` over explicit input pairs. Pairs whose
/// input difference is (numerically) zero are excluded from the statistics.
pub fn ratio_stats(
    map: impl Fn(&Matrix) -> Result<Matrix>,
    pairs: &[(Matrix, Matrix)],
) -> Result<RatioStats> {
    let mut ratios = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let mut diff_in = a.clone();
        diff_in.add_scaled(b, -1.0);
        let din = diff_in.frobenius_norm();
        if din < 1e-12 {
            continue;
        }
        let mut diff_out = map(a)?;
        diff_out.add_scaled(&map(b)?, -1.0);
        ratios.push(diff_out.frobenius_norm() / din);
    }
    if ratios.is_empty() {
        return Err(Error::InvalidArgument(
            "no pair with a non-zero input difference".into(),
        ));
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = ratios.len();
    let median = if n % 2 == 1 {
        ratios[n / 2]
    } else {
        0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
    };
    Ok(RatioStats {
        max_ratio: ratios[n - 1],
        median_ratio: median,
        n_pairs: n,
    })
}

/// Samples `n_samples` pairs of seq_len x d content matrices whose rows lie
/// in the epsilon-ball around `center`.
pub fn sample_ball_pairs(
    seq_len: usize,
    center: &[f64],
    epsilon: f64,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Vec<(Matrix, Matrix)> {
    (0..n_samples)
        .map(|_| {
            (
                ball_point(seq_len, center, epsilon, rng),
                ball_point(seq_len, center, epsilon, rng),
            )
        })
        .collect()
}

fn ball_point(seq_len: usize, center: &[f64], epsilon: f64, rng: &mut impl Rng) -> Matrix {
    let d = center.len();
    Matrix::from_rows(
        (0..seq_len)
            .map(|_| {
                let mut dir = Matrix::randn(1, d, 1.0, rng).data;
                normalize(&mut dir);
                // Radius with the uniform-in-ball density in d dimensions.
                let r = epsilon * rng.gen::<f64>().powf(1.0 / d as f64);
                dir.iter().zip(center).map(|(u, c)| c + r * u).collect()
            })
            .collect(),
    )
}

/// Empirical local-Lipschitz ratios of a single attention layer (no layer
/// norm, residual, or feed-forward) over pairs sampled in the epsilon-ball.
pub fn empirical_lipschitz(
    model: &DenoiserModel,
    layer: usize,
    epsilon: f64,
    n_samples: usize,
    center: BallCenter,
    seq_len: usize,
    rng: &mut impl Rng,
) -> Result<RatioStats> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    if seq_len == 0 || seq_len > model.config.l_max {
        return Err(Error::SequenceTooLong {
            len: seq_len,
            max: model.config.l_max,
        });
    }
    let center_vec = match center {
        BallCenter::MaskEmbedding => model.mask_embedding().to_vec(),
        BallCenter::Origin => vec![0.0; model.config.d],
    };
    let pairs = sample_ball_pairs(seq_len, &center_vec, epsilon, n_samples, rng);
    ratio_stats(|x| model.attention_map(layer, x), &pairs)
}

/// One row of the probe CSV.
#[derive(Debug, Clone, Copy)]
pub struct ProbeRow {
    pub epsilon: f64,
    pub bound: f64,
    pub max_ratio: f64,
    pub median_ratio: f64,
    pub n_pairs: usize,
}

pub const PROBE_CSV_HEADER: &str = "epsilon,bound,max_ratio,median_ratio,n_pairs";

pub fn probe_rows_to_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from(PROBE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epsilon, r.bound, r.max_ratio, r.median_ratio, r.n_pairs
        ));
    }
    out
}

/// Runs the full probe for one layer/head: empirical ratios at every radius
/// plus the quadratic bound with `probe.c`.
pub fn run_probe(
    model: &DenoiserModel,
    layer: usize,
    head: usize,
    probe: &LipschitzProbe,
    seq_len: usize,
    rng: &mut (impl Rng + Clone),
) -> Result<Vec<ProbeRow>> {
    probe.validate()?;
    let mut rows = Vec::with_capacity(probe.epsilons.len());
    for &eps in &probe.epsilons {
        // Common random numbers across radii: the same directions and unit
        // radii at every epsilon, so per-pair ratios vary smoothly in eps.
        let mut eps_rng = rng.clone();
        let stats = empirical_lipschitz(
            model,
            layer,
            eps,
            probe.n_samples,
            probe.center,
            seq_len,
            &mut eps_rng,
        )?;
        rows.push(ProbeRow {
            epsilon: eps,
            bound: lipschitz_bound(model, layer, head, eps, probe.c)?,
            max_ratio: stats.max_ratio,
            median_ratio: stats.median_ratio,
            n_pairs: stats.n_pairs,
        });
    }
    Ok(rows)
}

/// The single-point calibration of c: the smallest constant making the
/// quadratic bound match the measured max ratio at the smallest radius.
pub fn calibrate_c(rows_at_c1: &[ProbeRow]) -> Result<f64> {
    let first = rows_at_c1
        .first()
        .ok_or_else(|| Error::InvalidArgument("no probe rows".into()))?;
    if first.bound <= 0.0 {
        return Err(Error::InvalidArgument(
            "bound at the smallest radius is zero; cannot calibrate".into(),
        ));
    }
    Ok(first.max_ratio / first.bound)
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingNormStats {
    pub mask_norm: f64,
    pub mean_token_norm: f64,
    pub ratio: f64,
}

/// L2 norm of the MASK row (last row), mean L2 norm of the token rows, and
/// their ratio.
pub fn embedding_norm_stats(table: &Matrix) -> Result<EmbeddingNormStats> {
    if table.rows < 2 {
        return Err(Error::InvalidArgument(
            "embedding table needs at least one token row plus MASK".into(),
        ));
    }
    let mask_norm = l2_norm(table.row(table.rows - 1));
    let mean_token_norm = (0..table.rows - 1)
        .map(|i| l2_norm(table.row(i)))
        .sum::<f64>()
        / (table.rows - 1) as f64;
    Ok(EmbeddingNormStats {
        mask_norm,
        mean_token_norm,
        ratio: mask_norm / mean_token_norm,
    })
}
