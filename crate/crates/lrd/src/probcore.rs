//! Exact probability primitives for the absorbing diffusion process:
//! categorical distributions, entropy, smoothed KL, nucleus truncation,
//! noise schedules and the true reverse posterior.

use crate::{Error, Result};
use rand::Rng;

pub type TokenId = usize;

/// Sum-to-one tolerance accepted on construction. Any renormalizing
/// constructor produces an exact sum of 1.
pub const SUM_TOL: f64 = 1e-9;

/// A probability vector over a vocabulary (MASK excluded unless stated).
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidProbability("empty vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidProbability(
                "entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidProbability(format!(
                "entries sum to {sum}, expected 1 within {SUM_TOL}"
            )));
        }
        Ok(Categorical { probs })
    }

    /// Normalizes a non-negative weight vector; the result sums to 1 exactly
    /// up to one final division.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidProbability("empty vector".into()));
        }
        if weights.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidProbability(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidProbability("zero total mass".into()));
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        Ok(Categorical { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Categorical {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, idx: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[idx] = 1.0;
        Categorical { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Highest-probability token, ties broken by ascending token id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats, with 0 log 0 = 0.
    pub fn entropy(&self) -> f64 {
        entropy(self)
    }
}

/// Shannon entropy in nats; lies in [0, log V].
pub fn entropy(p: &Categorical) -> f64 {
    let mut h = 0.0;
    for &x in p.probs() {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h.max(0.0)
}

/// Reverse-posterior belief for a masked position: mass on the clean token
/// versus mass on staying masked. `p_x0 + p_mask = 1` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorBelief {
    pub p_x0: f64,
    pub p_mask: f64,
    pub x0_token: TokenId,
}

/// Monotone survival probabilities of the absorbing forward process,
/// indexed 0..=T with `alpha(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// Largest valid timestep index T.
    pub fn t_max(&self) -> usize {
        self.alphas.len() - 1
    }

    /// Linear per-step masking, convenient for training sweeps.
    pub fn linear(t_steps: usize, beta_max: f64) -> Result<Self> {
        let betas: Vec<f64> = (1..=t_steps)
            .map(|s| beta_max * s as f64 / t_steps as f64)
            .collect();
        schedule_from_betas(&betas)
    }
}

/// Survival probabilities as the running product of (1 - beta_s).
pub fn schedule_from_betas(betas: &[f64]) -> Result<NoiseSchedule> {
    let mut alphas = Vec::with_capacity(betas.len() + 1);
    alphas.push(1.0);
    let mut acc = 1.0;
    for &b in betas {
        if !(0.0..=1.0).contains(&b) || !b.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "beta {b} outside [0, 1]"
            )));
        }
        acc *= 1.0 - b;
        alphas.push(acc);
    }
    Ok(NoiseSchedule { alphas })
}

/// One cumulative forward step: each position independently keeps its token
/// with probability alpha*_t, otherwise becomes MASK (`None`).
pub fn forward_mask(
    x0: &[TokenId],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Vec<Option<TokenId>> {
    let alpha = schedule.alpha(t);
    x0.iter()
        .map(|&tok| {
            if rng.gen::<f64>() < alpha {
                Some(tok)
            } else {
                None
            }
        })
        .collect()
}

/// Closed-form reverse posterior for a masked position:
/// p_x0 = (alpha_{t-1} - alpha_t) / (1 - alpha_t).
pub fn true_posterior(
    alpha_prev: f64,
    alpha_cur: f64,
    x0_token: TokenId,
) -> Result<PosteriorBelief> {
    if !(0.0..1.0).contains(&alpha_cur) {
        return Err(Error::InvalidSchedule(format!(
            "alpha_cur {alpha_cur} must lie in [0, 1): a masked position requires masking probability > 0"
        )));
    }
    if !(0.0..=1.0).contains(&alpha_prev) || alpha_prev < alpha_cur {
        return Err(Error::InvalidSchedule(format!(
            "alpha_prev {alpha_prev} must lie in [alpha_cur, 1]"
        )));
    }
    let p_x0 = (alpha_prev - alpha_cur) / (1.0 - alpha_cur);
    Ok(PosteriorBelief {
        p_x0,
        p_mask: 1.0 - p_x0,
        x0_token,
    })
}

/// Minimal descending-probability prefix reaching cumulative mass
/// `p_thresh`, with probabilities renormalized over the prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct NucleusResult {
    /// Token ids in selection order (probability descending, id ascending on
    /// ties).
    pub support: Vec<TokenId>,
    /// Renormalized probabilities aligned with `support`; sums to 1.
    pub renorm_probs: Vec<f64>,
}

impl NucleusResult {
    /// Entropy of the renormalized nucleus distribution, in nats.
    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for &p in &self.renorm_probs {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        h.max(0.0)
    }
}

/// Slack absorbing float drift in the cumulative sum, so that an exact-mass
/// prefix (e.g. 0.6 + 0.3 vs 0.9) is not skipped over.
const NUCLEUS_CUM_TOL: f64 = 1e-12;

/// Top-p truncation. Ties on probability are broken by ascending token id;
/// zero-probability tokens are never included.
pub fn top_p_nucleus(p: &Categorical, p_thresh: f64) -> Result<NucleusResult> {
    if !(p_thresh > 0.0) || p_thresh > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "p_thresh {p_thresh} must lie in (0, 1]"
        )));
    }
    let mut order: Vec<TokenId> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        p.probs()[b]
            .partial_cmp(&p.probs()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut support = Vec::new();
    let mut mass = 0.0;
    for id in order {
        let prob = p.probs()[id];
        if prob <= 0.0 {
            break;
        }
        support.push(id);
        mass += prob;
        if mass >= p_thresh - NUCLEUS_CUM_TOL {
            break;
        }
    }
    let renorm_probs = support.iter().map(|&id| p.probs()[id] / mass).collect();
    Ok(NucleusResult {
        support,
        renorm_probs,
    })
}

/// Normalized entropy of the nucleus: entropy of the renormalized nucleus
/// distribution divided by log of the support size, clamped to [0, 1].
/// A singleton support is fully confident and returns 0.
pub fn normalized_entropy(nucleus: &NucleusResult) -> f64 {
    let n = nucleus.support.len();
    if n <= 1 {
        return 0.0;
    }
    (nucleus.entropy() / (n as f64).ln()).clamp(0.0, 1.0)
}

/// Variant normalization: full-vocabulary entropy divided by log V.
/// Kept behind a config switch for comparison with the default.
pub fn normalized_entropy_full_vocab(p: &Categorical) -> f64 {
    let v = p.len();
    if v <= 1 {
        return 0.0;
    }
    (entropy(p) / (v as f64).ln()).clamp(0.0, 1.0)
}

/// KL(p || q) in nats. With `smoothing = 0` the result is exact and returns
/// `f64::INFINITY` when q assigns zero mass where p is positive; with
/// `smoothing > 0` both vectors get the smoothing added and are renormalized
/// before the exact formula.
pub fn kl(p: &Categorical, q: &Categorical, smoothing: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    if smoothing < 0.0 {
        return Err(Error::InvalidArgument("smoothing must be >= 0".into()));
    }
    if smoothing == 0.0 {
        let mut acc = 0.0;
        for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
            if pi > 0.0 {
                if qi == 0.0 {
                    return Ok(f64::INFINITY);
                }
                acc += pi * (pi / qi).ln();
            }
        }
        return Ok(acc.max(0.0));
    }
    let n = p.len() as f64;
    let ps = 1.0 + n * smoothing;
    let qs = ps;
    let mut acc = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        let a = (pi + smoothing) / ps;
        let b = (qi + smoothing) / qs;
        acc += a * (a / b).ln();
    }
    Ok(acc.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cat(v: &[f64]) -> Categorical {
        Categorical::new(v.to_vec()).unwrap()
    }

    #[test]
    fn schedule_running_product() {
        let s = schedule_from_betas(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.alphas(), &[1.0, 1.0, 1.0, 1.0]);

        let s = schedule_from_betas(&[0.5, 0.5]).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.5, 0.25]);

        let s = schedule_from_betas(&[1.0, 0.3]).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn schedule_rejects_bad_beta() {
        assert!(schedule_from_betas(&[1.2]).is_err());
        assert!(schedule_from_betas(&[-0.1]).is_err());
    }

    #[test]
    fn forward_mask_identity_and_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = vec![3usize, 1, 4, 1, 5];
        let s = schedule_from_betas(&[0.0, 1.0]).unwrap();
        let kept = forward_mask(&x0, 1, &s, &mut rng);
        assert_eq!(kept, x0.iter().map(|&t| Some(t)).collect::<Vec<_>>());
        let gone = forward_mask(&x0, 2, &s, &mut rng);
        assert!(gone.iter().all(|p| p.is_none()));
    }

    #[test]
    fn forward_mask_binomial_count() {
        // alpha = 0.7, L = 1000: masked count within 3 sigma of 300.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = vec![0usize; 1000];
        let s = schedule_from_betas(&[0.3]).unwrap();
        let masked = forward_mask(&x0, 1, &s, &mut rng)
            .iter()
            .filter(|p| p.is_none())
            .count() as f64;
        let sigma = (1000.0 * 0.3 * 0.7f64).sqrt();
        assert!((masked - 300.0).abs() < 3.0 * sigma, "masked = {masked}");
    }

    #[test]
    fn posterior_closed_form() {
        let b = true_posterior(1.0, 0.5, 2).unwrap();
        assert_eq!((b.p_x0, b.p_mask), (1.0, 0.0));

        let b = true_posterior(0.5, 0.5, 2).unwrap();
        assert_eq!((b.p_x0, b.p_mask), (0.0, 1.0));

        let b = true_posterior(0.8, 0.5, 2).unwrap();
        assert!((b.p_x0 - 0.6).abs() < 1e-15);
        assert!((b.p_mask - 0.4).abs() < 1e-15);
        assert_eq!(b.p_x0 + b.p_mask, 1.0);
    }

    #[test]
    fn posterior_rejects_degenerate() {
        assert!(true_posterior(1.0, 1.0, 0).is_err());
        assert!(true_posterior(0.4, 0.5, 0).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&Categorical::one_hot(5, 2)), 0.0);
        assert!((entropy(&Categorical::uniform(4)) - 4.0f64.ln()).abs() < 1e-12);
        assert!((entropy(&cat(&[0.5, 0.5, 0.0, 0.0])) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn normalized_entropy_values() {
        let one_hot = top_p_nucleus(&Categorical::one_hot(4, 1), 0.9).unwrap();
        assert_eq!(normalized_entropy(&one_hot), 0.0);

        let uni = top_p_nucleus(&Categorical::uniform(6), 1.0).unwrap();
        assert!((normalized_entropy(&uni) - 1.0).abs() < 1e-12);

        // support {a: 2/3, b: 1/3}: (ln 3 - (2/3) ln 2) / ln 2 = 0.91830.
        let n = NucleusResult {
            support: vec![0, 1],
            renorm_probs: vec![2.0 / 3.0, 1.0 / 3.0],
        };
        assert!((normalized_entropy(&n) - 0.918_295_834_054_489_6).abs() < 1e-5);
    }

    #[test]
    fn kl_values() {
        let p = cat(&[0.9, 0.1]);
        let q = cat(&[0.5, 0.5]);
        assert_eq!(kl(&p, &p, 0.0).unwrap(), 0.0);
        let expected = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((kl(&p, &q, 0.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.368_06).abs() < 1e-4);

        let one_hot = Categorical::one_hot(4, 0);
        let uni = Categorical::uniform(4);
        assert!((kl(&one_hot, &uni, 0.0).unwrap() - 4.0f64.ln()).abs() < 1e-12);

        let q0 = cat(&[1.0, 0.0]);
        assert_eq!(kl(&p, &q0, 0.0).unwrap(), f64::INFINITY);
        assert!(kl(&p, &q0, 1e-10).unwrap().is_finite());
    }

    #[test]
    fn kl_dimension_mismatch() {
        let p = cat(&[0.5, 0.5]);
        let q = Categorical::uniform(3);
        assert!(kl(&p, &q, 0.0).is_err());
    }

    #[test]
    fn nucleus_examples() {
        let p = cat(&[0.6, 0.3, 0.08, 0.02]);
        let n = top_p_nucleus(&p, 0.9).unwrap();
        assert_eq!(n.support, vec![0, 1]);
        assert!((n.renorm_probs[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((n.renorm_probs[1] - 1.0 / 3.0).abs() < 1e-12);

        let full = top_p_nucleus(&cat(&[0.5, 0.0, 0.5]), 1.0).unwrap();
        assert_eq!(full.support, vec![0, 2]);

        let one = top_p_nucleus(&Categorical::one_hot(4, 3), 0.9).unwrap();
        assert_eq!(one.support, vec![3]);

        assert!(top_p_nucleus(&p, 0.0).is_err());
    }

    #[test]
    fn nucleus_tie_break_ascending_id() {
        let p = cat(&[0.25, 0.25, 0.25, 0.25]);
        let n = top_p_nucleus(&p, 0.5).unwrap();
        assert_eq!(n.support, vec![0, 1]);
    }

    #[test]
    fn posterior_simulation_agreement() {
        // Conditional frequencies of x_{t-1} given x_t = MASK over simulated
        // two-step chains match the closed form within 3 binomial SEs.
        let schedule = schedule_from_betas(&[0.2, 0.375]).unwrap();
        let (ap, ac) = (schedule.alpha(1), schedule.alpha(2));
        let belief = true_posterior(ap, ac, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut masked_at_t = 0usize;
        let mut kept_at_prev = 0usize;
        for _ in 0..200_000 {
            let kept_prev = rng.gen::<f64>() < ap;
            let kept_t = kept_prev && rng.gen::<f64>() < ac / ap;
            if !kept_t {
                masked_at_t += 1;
                if kept_prev {
                    kept_at_prev += 1;
                }
            }
        }
        let freq = kept_at_prev as f64 / masked_at_t as f64;
        let se = (belief.p_x0 * belief.p_mask / masked_at_t as f64).sqrt();
        assert!((freq - belief.p_x0).abs() < 3.0 * se);
    }

    #[test]
    fn stepwise_marginal_matches_cumulative() {
        // Applying per-step masking with beta_s for s = 1..t keeps a token
        // with marginal probability alpha*_t.
        let betas = [0.1, 0.25, 0.4];
        let schedule = schedule_from_betas(&betas).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut kept = 0usize;
        for _ in 0..n {
            let mut alive = true;
            for &b in &betas {
                if alive && rng.gen::<f64>() < b {
                    alive = false;
                }
            }
            if alive {
                kept += 1;
            }
        }
        let a = schedule.alpha(3);
        let se = (a * (1.0 - a) / n as f64).sqrt();
        assert!((kept as f64 / n as f64 - a).abs() < 4.0 * se);
    }

    proptest! {
        #[test]
        fn prop_kl_nonnegative(raw in proptest::collection::vec(1e-6..1.0f64, 2..8),
                               raw2 in proptest::collection::vec(1e-6..1.0f64, 2..8)) {
            let n = raw.len().min(raw2.len());
            let p = Categorical::from_weights(raw[..n].to_vec()).unwrap();
            let q = Categorical::from_weights(raw2[..n].to_vec()).unwrap();
            let d = kl(&p, &q, 0.0).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!(kl(&p, &p, 0.0).unwrap() < 1e-12);
        }

        #[test]
        fn prop_nucleus_deterministic_and_shrinking(
            raw in proptest::collection::vec(0.0..1.0f64, 2..10),
            thresh in 0.05..1.0f64,
        ) {
            prop_assume!(raw.iter().sum::<f64>() > 0.0);
            let p = Categorical::from_weights(raw).unwrap();
            let n1 = top_p_nucleus(&p, thresh).unwrap();
            prop_assert_eq!(&n1, &top_p_nucleus(&p, thresh).unwrap());
            // Re-truncating the renormalized nucleus at the same threshold
            // never grows the support (renormalization concentrates mass, so
            // a shorter prefix may now suffice) and reaches a fixpoint.
            let mut dense = vec![0.0; p.len()];
            for (id, pr) in n1.support.iter().zip(&n1.renorm_probs) {
                dense[*id] = *pr;
            }
            let renorm = Categorical::from_weights(dense).unwrap();
            let n2 = top_p_nucleus(&renorm, thresh).unwrap();
            prop_assert!(n2.support.len() <= n1.support.len());
            prop_assert!(n2.support.iter().all(|id| n1.support.contains(id)));
            let sum: f64 = n2.renorm_probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn prop_nucleus_idempotent_at_full_mass(
            raw in proptest::collection::vec(0.0..1.0f64, 2..10),
        ) {
            prop_assume!(raw.iter().sum::<f64>() > 0.0);
            let p = Categorical::from_weights(raw).unwrap();
            let n1 = top_p_nucleus(&p, 1.0).unwrap();
            let mut dense = vec![0.0; p.len()];
            for (id, pr) in n1.support.iter().zip(&n1.renorm_probs) {
                dense[*id] = *pr;
            }
            let renorm = Categorical::from_weights(dense).unwrap();
            let n2 = top_p_nucleus(&renorm, 1.0).unwrap();
            prop_assert_eq!(&n1.support, &n2.support);
        }

        #[test]
        fn prop_normalized_entropy_range(raw in proptest::collection::vec(1e-9..1.0f64, 1..10)) {
            let p = Categorical::from_weights(raw).unwrap();
            let n = top_p_nucleus(&p, 0.9).unwrap();
            let h = normalized_entropy(&n);
            prop_assert!((0.0..=1.0).contains(&h));
        }
    }
}
