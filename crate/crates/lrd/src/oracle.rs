//! Brute-force ground truth on enumerable instances: exact clean-sequence
//! posteriors by enumeration, exact reverse posteriors with a Monte-Carlo
//! validator, and the hard-vs-soft KL comparison. Everything here is meant
//! to be slow, obvious, and independently derived from the forward-process
//! definition so the fast paths can be checked against it.

use crate::probcore::{true_posterior, Categorical, PosteriorBelief, TokenId};
use crate::sampler::{BeliefModel, PosInput, SamplerConfig};
use crate::{Error, Result};
use rand::Rng;
use std::path::Path;

/// Enumeration ceiling; brute force is the point, not scale.
pub const SUPPORT_LIMIT: usize = 4096;

/// Tolerance for the support probabilities summing to one.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// A fully enumerated data distribution over equal-length token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumerableDistribution {
    support: Vec<(Vec<TokenId>, f64)>,
    seq_len: usize,
}

impl EnumerableDistribution {
    pub fn new(support: Vec<(Vec<TokenId>, f64)>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidArgument("empty support".into()));
        }
        if support.len() > SUPPORT_LIMIT {
            return Err(Error::SupportTooLarge {
                size: support.len(),
                limit: SUPPORT_LIMIT,
            });
        }
        let seq_len = support[0].0.len();
        let mut sum = 0.0;
        for (seq, p) in &support {
            if seq.len() != seq_len {
                return Err(Error::DimensionMismatch {
                    expected: seq_len,
                    got: seq.len(),
                });
            }
            if !p.is_finite() || *p <= 0.0 {
                return Err(Error::InvalidProbability(format!(
                    "support probability {p} must be positive and finite"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidProbability(format!(
                "support probabilities sum to {sum}, not 1"
            )));
        }
        let mut seqs: Vec<&Vec<TokenId>> = support.iter().map(|(s, _)| s).collect();
        seqs.sort();
        if seqs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(
                "duplicate sequence in support".into(),
            ));
        }
        Ok(EnumerableDistribution { support, seq_len })
    }

    pub fn support(&self) -> &[(Vec<TokenId>, f64)] {
        &self.support
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Largest token id appearing anywhere in the support.
    pub fn max_token(&self) -> TokenId {
        self.support
            .iter()
            .flat_map(|(s, _)| s.iter().copied())
            .max()
            .unwrap_or(0)
    }

    /// Parses the text format: one `probability<TAB>space-separated-token-ids`
    /// line per support element. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut support = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| {
                Error::InvalidArgument(format!("support line {}: {what}", lineno + 1))
            };
            let (p_str, toks_str) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected probability<TAB>token-ids"))?;
            let p: f64 = p_str
                .trim()
                .parse()
                .map_err(|_| bad("unparseable probability"))?;
            let seq: Vec<TokenId> = toks_str
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("unparseable token id")))
                .collect::<Result<_>>()?;
            support.push((seq, p));
        }
        EnumerableDistribution::new(support)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Conditions the support on the unmasked positions of `x_t` and returns the
/// per-position marginal over the clean token, for every position (unmasked
/// positions come back as point masses at the observed token).
pub fn exact_x0_posterior(
    x_t: &[Option<TokenId>],
    dist: &EnumerableDistribution,
    vocab: usize,
) -> Result<Vec<Categorical>> {
    if x_t.len() != dist.seq_len() {
        return Err(Error::DimensionMismatch {
            expected: dist.seq_len(),
            got: x_t.len(),
        });
    }
    for tok in x_t.iter().flatten() {
        if *tok >= vocab {
            return Err(Error::TokenOutOfRange {
                id: *tok,
                vocab,
            });
        }
    }
    if dist.max_token() >= vocab {
        return Err(Error::TokenOutOfRange {
            id: dist.max_token(),
            vocab,
        });
    }
    let consistent: Vec<&(Vec<TokenId>, f64)> = dist
        .support()
        .iter()
        .filter(|(seq, _)| {
            x_t.iter()
                .zip(seq)
                .all(|(obs, &s)| obs.map_or(true, |o| o == s))
        })
        .collect();
    let mass: f64 = consistent.iter().map(|(_, p)| p).sum();
    if mass <= 0.0 || consistent.is_empty() {
        return Err(Error::InconsistentEvidence);
    }
    let mut out = Vec::with_capacity(x_t.len());
    for i in 0..x_t.len() {
        let mut w = vec![0.0; vocab];
        for (seq, p) in &consistent {
            w[seq[i]] += p / mass;
        }
        out.push(Categorical::from_weights(w)?);
    }
    Ok(out)
}

/// The exact tabular denoiser: drives the sampler with enumeration-derived
/// posteriors instead of a neural network. It has no embedding space, so
/// soft inputs carry no information and are treated as MASK.
#[derive(Debug, Clone)]
pub struct TabularDenoiser {
    dist: EnumerableDistribution,
    vocab: usize,
}

impl TabularDenoiser {
    pub fn new(dist: EnumerableDistribution, vocab: usize) -> Self {
        assert!(
            dist.max_token() < vocab,
            "support token {} outside vocab {}",
            dist.max_token(),
            vocab
        );
        TabularDenoiser { dist, vocab }
    }

    pub fn distribution(&self) -> &EnumerableDistribution {
        &self.dist
    }
}

impl BeliefModel for TabularDenoiser {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn mask_content(&self) -> Vec<f64> {
        Vec::new()
    }

    fn mix(&self, _dist: &Categorical, _config: &SamplerConfig) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn predict(&self, inputs: &[PosInput]) -> Result<Vec<Categorical>> {
        let x_t: Vec<Option<TokenId>> = inputs
            .iter()
            .map(|inp| match inp {
                PosInput::Token(t) if *t < self.vocab => Ok(Some(*t)),
                PosInput::Token(t) if *t == self.vocab => Ok(None),
                PosInput::Token(t) => Err(Error::TokenOutOfRange {
                    id: *t,
                    vocab: self.vocab,
                }),
                PosInput::Soft(_) => Ok(None),
            })
            .collect::<Result<_>>()?;
        exact_x0_posterior(&x_t, &self.dist, self.vocab)
    }
}

/// Reverse posterior for a masked position derived by enumerating the three
/// two-step forward events rather than by the closed form: kept through both
/// steps (alpha_cur), kept then masked (alpha_prev - alpha_cur), masked at
/// both (1 - alpha_prev). Conditioning on "masked now" leaves the latter two.
pub fn exact_reverse_posterior(
    alpha_prev: f64,
    alpha_cur: f64,
    x0_token: TokenId,
) -> Result<PosteriorBelief> {
    // Reuse the closed form's precondition checks.
    true_posterior(alpha_prev, alpha_cur, x0_token)?;
    let kept_then_masked = alpha_prev - alpha_cur;
    let masked_both = 1.0 - alpha_prev;
    let total = kept_then_masked + masked_both;
    let p_x0 = kept_then_masked / total;
    Ok(PosteriorBelief {
        p_x0,
        p_mask: 1.0 - p_x0,
        x0_token,
    })
}

/// Outcome of the Monte-Carlo cross-check of the reverse posterior.
#[derive(Debug, Clone, Copy)]
pub struct McCheck {
    pub observed_p_x0: f64,
    pub expected_p_x0: f64,
    /// Chains that ended masked (the conditioning event).
    pub n_masked: usize,
    /// Binomial standard error at the expected rate.
    pub sigma: f64,
}

impl McCheck {
    pub fn within_3_sigma(&self) -> bool {
        (self.observed_p_x0 - self.expected_p_x0).abs() <= 3.0 * self.sigma
    }
}

/// Simulates `n_chains` two-step forward chains, conditions on "masked at
/// the later step", and compares the unmasked-earlier frequency against the
/// closed-form reverse posterior.
pub fn monte_carlo_reverse_check(
    alpha_prev: f64,
    alpha_cur: f64,
    n_chains: usize,
    rng: &mut impl Rng,
) -> Result<McCheck> {
    let expected = true_posterior(alpha_prev, alpha_cur, 0)?.p_x0;
    let step_keep = if alpha_prev > 0.0 {
        alpha_cur / alpha_prev
    } else {
        0.0
    };
    let mut n_masked = 0usize;
    let mut n_survived_prev = 0usize;
    for _ in 0..n_chains {
        let kept_prev = rng.gen::<f64>() < alpha_prev;
        let kept_cur = kept_prev && rng.gen::<f64>() < step_keep;
        if !kept_cur {
            n_masked += 1;
            if kept_prev {
                n_survived_prev += 1;
            }
        }
    }
    if n_masked == 0 {
        return Err(Error::InvalidArgument(
            "no chain ended masked; cannot condition".into(),
        ));
    }
    let observed = n_survived_prev as f64 / n_masked as f64;
    let sigma = (expected * (1.0 - expected) / n_masked as f64).sqrt();
    Ok(McCheck {
        observed_p_x0: observed,
        expected_p_x0: expected,
        n_masked,
        sigma,
    })
}

/// A degenerate or soft approximation to the reverse posterior of one
/// masked position.
#[derive(Debug, Clone, PartialEq)]
pub enum ApproxPosterior {
    /// Point mass at a token, or at MASK when `None`.
    Hard(Option<TokenId>),
    /// Full distribution over V tokens plus MASK at index `vocab`.
    Soft(Categorical),
}

/// KL divergence that distinguishes exact infinity from overflow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlValue {
    Finite(f64),
    Infinite,
}

impl KlValue {
    pub fn is_finite(&self) -> bool {
        matches!(self, KlValue::Finite(_))
    }

    pub fn unwrap_finite(&self) -> f64 {
        match self {
            KlValue::Finite(v) => *v,
            KlValue::Infinite => panic!("KL value is infinite"),
        }
    }
}

/// Collapses an approximation to the {x0, MASK, other} partition and returns
/// the unsmoothed KL of the true posterior against it. The true posterior
/// puts zero mass on "other", so only the x0 and MASK cells matter.
fn kl_over_partition(q_star: &PosteriorBelief, q_x0: f64, q_mask: f64) -> KlValue {
    let mut acc = 0.0;
    for (p, q) in [(q_star.p_x0, q_x0), (q_star.p_mask, q_mask)] {
        if p > 0.0 {
            if q <= 0.0 {
                return KlValue::Infinite;
            }
            acc += p * (p / q).ln();
        }
    }
    KlValue::Finite(acc)
}

/// The central pathology: a hard (degenerate) approximation has infinite KL
/// from the true reverse posterior unless that posterior is itself
/// degenerate, while any strictly positive soft approximation stays finite.
pub fn kl_hard_vs_soft(
    q_star: &PosteriorBelief,
    hard: &ApproxPosterior,
    soft: &ApproxPosterior,
    vocab: usize,
) -> Result<(KlValue, KlValue)> {
    let collapse = |approx: &ApproxPosterior| -> Result<(f64, f64)> {
        match approx {
            ApproxPosterior::Hard(Some(t)) => {
                if *t >= vocab {
                    return Err(Error::TokenOutOfRange { id: *t, vocab });
                }
                Ok(if *t == q_star.x0_token {
                    (1.0, 0.0)
                } else {
                    (0.0, 0.0)
                })
            }
            ApproxPosterior::Hard(None) => Ok((0.0, 1.0)),
            ApproxPosterior::Soft(c) => {
                if c.len() != vocab + 1 {
                    return Err(Error::DimensionMismatch {
                        expected: vocab + 1,
                        got: c.len(),
                    });
                }
                Ok((c.probs()[q_star.x0_token], c.probs()[vocab]))
            }
        }
    };
    let (hx, hm) = collapse(hard)?;
    let (sx, sm) = collapse(soft)?;
    Ok((
        kl_over_partition(q_star, hx, hm),
        kl_over_partition(q_star, sx, sm),
    ))
}

/// Per-position marginals of one exact reverse step, via the factorized
/// formula: masked positions get p_x0 * posterior(v) on tokens and p_mask on
/// MASK (index `vocab`); unmasked positions are point masses.
pub fn formula_reverse_marginals(
    x_t: &[Option<TokenId>],
    dist: &EnumerableDistribution,
    alpha_prev: f64,
    alpha_cur: f64,
    vocab: usize,
) -> Result<Vec<Categorical>> {
    let belief = true_posterior(alpha_prev, alpha_cur, 0)?;
    let post = exact_x0_posterior(x_t, dist, vocab)?;
    x_t.iter()
        .zip(post)
        .map(|(obs, p)| match obs {
            Some(t) => Ok(Categorical::one_hot(vocab + 1, *t)),
            None => {
                let mut w = vec![0.0; vocab + 1];
                for (v, &pv) in p.probs().iter().enumerate() {
                    w[v] = belief.p_x0 * pv;
                }
                w[vocab] = belief.p_mask;
                Categorical::from_weights(w)
            }
        })
        .collect()
}

/// The same marginals by full enumeration straight from the forward-process
/// definition: every support sequence crossed with every assignment of the
/// three per-position two-step events, conditioned on reproducing `x_t`.
/// Cubic-ish in everything; only run on tiny instances.
pub fn enumerated_reverse_marginals(
    x_t: &[Option<TokenId>],
    dist: &EnumerableDistribution,
    alpha_prev: f64,
    alpha_cur: f64,
    vocab: usize,
) -> Result<Vec<Categorical>> {
    if x_t.len() != dist.seq_len() {
        return Err(Error::DimensionMismatch {
            expected: dist.seq_len(),
            got: x_t.len(),
        });
    }
    if !(0.0..1.0).contains(&alpha_cur) || alpha_prev < alpha_cur || alpha_prev > 1.0 {
        return Err(Error::InvalidSchedule(format!(
            "need 0 <= alpha_cur <= alpha_prev <= 1 with alpha_cur < 1, got ({alpha_prev}, {alpha_cur})"
        )));
    }
    let l = x_t.len();
    // Event 0: kept at both steps; 1: kept then masked; 2: masked at both.
    let event_p = [alpha_cur, alpha_prev - alpha_cur, 1.0 - alpha_prev];
    let mut total = 0.0;
    // marginal[i][v] accumulates weight for x_{t-1}^i = v (vocab = MASK).
    let mut marginal = vec![vec![0.0; vocab + 1]; l];
    for (seq, pi) in dist.support() {
        if seq.iter().any(|&t| t >= vocab) {
            return Err(Error::TokenOutOfRange {
                id: *seq.iter().max().unwrap(),
                vocab,
            });
        }
        let mut events = vec![0usize; l];
        loop {
            let consistent = (0..l).all(|i| match events[i] {
                0 => x_t[i] == Some(seq[i]),
                _ => x_t[i].is_none(),
            });
            if consistent {
                let w = pi * events.iter().map(|&e| event_p[e]).product::<f64>();
                total += w;
                for i in 0..l {
                    let v = if events[i] == 2 { vocab } else { seq[i] };
                    marginal[i][v] += w;
                }
            }
            // Odometer over {0, 1, 2}^L.
            let mut i = 0;
            loop {
                if i == l {
                    break;
                }
                events[i] += 1;
                if events[i] < 3 {
                    break;
                }
                events[i] = 0;
                i += 1;
            }
            if i == l {
                break;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::InconsistentEvidence);
    }
    marginal
        .into_iter()
        .map(Categorical::from_weights)
        .collect()
}
