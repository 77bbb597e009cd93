//! Training loop and the benchmark / ablation / sweep / KL-dynamics runners
//! behind the CLI.

use crate::denoiser::{DenoiserModel, Sgd};
use crate::harness::config::RunConfig;
use crate::harness::task::generate_task;
use crate::probcore::{NoiseSchedule, TokenId};
use crate::sampler::{
    decode_baseline, decode_lrd, BeliefModel, DecodeTrace, InterCommitRefine, SamplerConfig,
};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Trains a fresh denoiser on the configured task; returns the model and the
/// per-step loss curve.
pub fn train_model(cfg: &RunConfig, seed: u64) -> Result<(DenoiserModel, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DenoiserModel::init(cfg.denoiser_config(), &mut rng)?;
    let mut opt = Sgd::new(&cfg.denoiser_config(), cfg.lr, cfg.momentum);
    let schedule = NoiseSchedule::linear(cfg.t_steps, cfg.beta_max)?;
    let mut losses = Vec::with_capacity(cfg.train_steps);
    for step in 0..cfg.train_steps {
        // A fresh slice of the corpus per step, deterministic in (seed, step).
        let task = cfg.synthetic_task(seed.wrapping_add(1 + step as u64));
        let batch: Vec<Vec<TokenId>> = generate_task(&task, cfg.batch_size)?
            .into_iter()
            .map(|(mut p, t)| {
                p.extend(t);
                p
            })
            .collect();
        losses.push(crate::denoiser::train_step(
            &mut model,
            &mut opt,
            &batch,
            &schedule,
            &mut rng,
        )?);
    }
    Ok((model, losses))
}

/// Decoding strategy under benchmark.
#[derive(Debug, Clone)]
pub enum Method {
    /// Hard-assignment baseline committing `k` positions per step.
    Baseline { k: usize },
    Lrd(SamplerConfig),
}

#[derive(Debug, Clone)]
pub struct MethodSpec {
    pub label: String,
    pub method: Method,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub label: String,
    pub exact_match: f64,
    pub mean_forward_passes: f64,
    pub mean_wallclock_ns: f64,
    /// Mean generated tokens strictly before the first EOS.
    pub e_token: f64,
    pub n_sequences: usize,
}

pub const BENCH_CSV_HEADER: &str =
    "label,exact_match,mean_forward_passes,mean_wallclock_ns,e_token,n_sequences";

/// With `include_timings` false the wall-clock column is written as 0 so
/// seeded runs are byte-identical.
pub fn bench_results_to_csv(rows: &[BenchResult], include_timings: bool) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let wc = if include_timings {
            r.mean_wallclock_ns
        } else {
            0.0
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label, r.exact_match, r.mean_forward_passes, wc, r.e_token, r.n_sequences
        ));
    }
    out
}

/// The prefix of `tokens` strictly before the first `eos`.
pub fn truncate_at_eos(tokens: &[TokenId], eos: TokenId) -> &[TokenId] {
    let end = tokens.iter().position(|&t| t == eos).unwrap_or(tokens.len());
    &tokens[..end]
}

/// Runs every method on the identical corpus and aggregates the metrics;
/// also returns the per-sequence traces per method.
pub fn run_benchmark(
    model: &dyn BeliefModel,
    corpus: &[(Vec<TokenId>, Vec<TokenId>)],
    methods: &[MethodSpec],
    eos: TokenId,
) -> Result<(Vec<BenchResult>, Vec<Vec<DecodeTrace>>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut results = Vec::with_capacity(methods.len());
    let mut all_traces = Vec::with_capacity(methods.len());
    for spec in methods {
        let mut n_match = 0usize;
        let mut passes = 0usize;
        let mut wallclock = 0u128;
        let mut e_token = 0usize;
        let mut traces = Vec::with_capacity(corpus.len());
        for (prompt, target) in corpus {
            let started = Instant::now();
            let outcome = match &spec.method {
                Method::Baseline { k } => decode_baseline(model, prompt, target.len(), *k)?,
                Method::Lrd(cfg) => decode_lrd(model, prompt, target.len(), cfg)?,
            };
            wallclock += started.elapsed().as_nanos();
            passes += outcome.forward_passes;
            if truncate_at_eos(&outcome.tokens, eos) == truncate_at_eos(target, eos) {
                n_match += 1;
            }
            e_token += truncate_at_eos(&outcome.tokens, eos).len();
            traces.push(outcome.trace);
        }
        let n = corpus.len() as f64;
        results.push(BenchResult {
            label: spec.label.clone(),
            exact_match: n_match as f64 / n,
            mean_forward_passes: passes as f64 / n,
            mean_wallclock_ns: wallclock as f64 / n,
            e_token: e_token as f64 / n,
            n_sequences: corpus.len(),
        });
        all_traces.push(traces);
    }
    Ok((results, all_traces))
}

/// The ablation table: baseline, the full method, each component removed,
/// forced inter-commit refinement LF x1..x5, and the Auto variant.
pub fn ablation_methods(base: &SamplerConfig) -> Vec<MethodSpec> {
    let variant = |label: &str, f: &dyn Fn(&mut SamplerConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        MethodSpec {
            label: label.to_string(),
            method: Method::Lrd(cfg),
        }
    };
    let mut methods = vec![
        MethodSpec {
            label: "baseline".into(),
            method: Method::Baseline {
                k: base.commits_per_step,
            },
        },
        variant("full", &|_| {}),
        variant("wo_latent_refinement", &|c| c.t_refine = 0),
        variant("wo_mix_embed", &|c| c.r_f = 0.0),
        variant("wo_early_stop", &|c| c.early_stop_enabled = false),
    ];
    for k in 1..=5 {
        methods.push(variant(&format!("lf_x{k}"), &|c| {
            c.inter_commit_refine = InterCommitRefine::Fixed(k)
        }));
    }
    methods.push(variant("auto", &|c| {
        c.inter_commit_refine = InterCommitRefine::Auto
    }));
    methods
}

pub fn run_ablations(
    model: &dyn BeliefModel,
    corpus: &[(Vec<TokenId>, Vec<TokenId>)],
    base: &SamplerConfig,
    eos: TokenId,
) -> Result<Vec<BenchResult>> {
    Ok(run_benchmark(model, corpus, &ablation_methods(base), eos)?.0)
}

#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    /// The swept parameter value (r_f or top_p).
    pub value: f64,
    pub exact_match: f64,
    pub mean_nucleus_fraction: f64,
}

pub const SWEEP_CSV_HEADER: &str = "value,exact_match,mean_nucleus_fraction";

pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.value, r.exact_match, r.mean_nucleus_fraction
        ));
    }
    out
}

pub const RF_GRID: [f64; 6] = [0.0, 0.15, 0.3, 0.5, 0.75, 1.0];
pub const TOP_P_GRID: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0];

/// Sweeps r_f (with the default grid including both endpoints) and top_p
/// likewise, reporting accuracy and mean nucleus-size fraction per point.
pub fn run_sweeps(
    model: &dyn BeliefModel,
    corpus: &[(Vec<TokenId>, Vec<TokenId>)],
    base: &SamplerConfig,
    eos: TokenId,
) -> Result<(Vec<SweepRow>, Vec<SweepRow>)> {
    let sweep = |param: &dyn Fn(&mut SamplerConfig, f64), grid: &[f64]| -> Result<Vec<SweepRow>> {
        grid.iter()
            .map(|&v| {
                let mut cfg = base.clone();
                param(&mut cfg, v);
                let mut n_match = 0usize;
                let mut frac_sum = 0.0;
                let mut obs = 0usize;
                for (prompt, target) in corpus {
                    let out = decode_lrd(model, prompt, target.len(), &cfg)?;
                    if truncate_at_eos(&out.tokens, eos) == truncate_at_eos(target, eos) {
                        n_match += 1;
                    }
                    frac_sum += out.nucleus_frac_sum;
                    obs += out.nucleus_obs;
                }
                Ok(SweepRow {
                    value: v,
                    exact_match: n_match as f64 / corpus.len() as f64,
                    mean_nucleus_fraction: if obs == 0 { 0.0 } else { frac_sum / obs as f64 },
                })
            })
            .collect()
    };
    let rf = sweep(&|c, v| c.r_f = v, &RF_GRID)?;
    let top_p = sweep(&|c, v| c.top_p = v, &TOP_P_GRID)?;
    Ok((rf, top_p))
}

/// The two KL-dynamics exports.
#[derive(Debug, Clone)]
pub struct KlDynamics {
    /// `step,phase,mean_kl,n_traces`: per-step mean KL across sequences,
    /// aligned at the refine/decode boundary.
    pub aligned_csv: String,
    /// `step,frac_two_step,frac_three_step`: fraction of sequences first
    /// satisfying the threshold at each refine step, under the two-step KL
    /// criterion and the three-step KL-difference criterion.
    pub convergence_csv: String,
}

pub const ALIGNED_CSV_HEADER: &str = "step,phase,mean_kl,n_traces";
pub const CONVERGENCE_CSV_HEADER: &str = "step,frac_two_step,frac_three_step";

/// Builds both exports from traces decoded with a fixed refinement length.
/// Traces whose refine-phase lengths differ are rejected: the aligned export
/// is only meaningful when no sequence exited Phase 1 early.
pub fn emit_kl_dynamics(traces: &[DecodeTrace], tau: f64) -> Result<KlDynamics> {
    if traces.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let refine_kls: Vec<Vec<Option<f64>>> = traces
        .iter()
        .map(|t| {
            t.records
                .iter()
                .filter(|r| r.phase == crate::sampler::Phase::Refine)
                .map(|r| r.mean_kl)
                .collect()
        })
        .collect();
    let t_r = refine_kls[0].len();
    if refine_kls.iter().any(|k| k.len() != t_r) {
        return Err(Error::InvalidArgument(
            "traces have differing refinement lengths; aligned export needs a fixed T_refine"
                .into(),
        ));
    }
    let decode_kls: Vec<Vec<Option<f64>>> = traces
        .iter()
        .map(|t| {
            t.records
                .iter()
                .filter(|r| r.phase == crate::sampler::Phase::Decode)
                .map(|r| r.mean_kl)
                .collect()
        })
        .collect();

    let mut aligned = String::from(ALIGNED_CSV_HEADER);
    aligned.push('\n');
    let mut push_row = |step: usize, phase: &str, kls: Vec<Option<f64>>| {
        let present: Vec<f64> = kls.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            String::new()
        } else {
            format!("{}", present.iter().sum::<f64>() / present.len() as f64)
        };
        aligned.push_str(&format!("{step},{phase},{mean},{}\n", kls.len()));
    };
    for s in 0..t_r {
        push_row(s + 1, "refine", refine_kls.iter().map(|k| k[s]).collect());
    }
    let max_decode = decode_kls.iter().map(|k| k.len()).max().unwrap_or(0);
    for s in 0..max_decode {
        let kls: Vec<Option<f64>> = decode_kls
            .iter()
            .filter(|k| s < k.len())
            .map(|k| k[s])
            .collect();
        push_row(t_r + s + 1, "decode", kls);
    }

    let n = traces.len() as f64;
    let mut two_step = vec![0usize; t_r];
    let mut three_step = vec![0usize; t_r];
    for kls in &refine_kls {
        if let Some(s) = kls
            .iter()
            .position(|k| k.is_some_and(|v| v < tau))
        {
            two_step[s] += 1;
        }
        let first_diff = (1..kls.len()).find(|&s| {
            matches!((kls[s - 1], kls[s]), (Some(a), Some(b)) if (b - a).abs() < tau)
        });
        if let Some(s) = first_diff {
            three_step[s] += 1;
        }
    }
    let mut convergence = String::from(CONVERGENCE_CSV_HEADER);
    convergence.push('\n');
    for s in 0..t_r {
        convergence.push_str(&format!(
            "{},{},{}\n",
            s + 1,
            two_step[s] as f64 / n,
            three_step[s] as f64 / n
        ));
    }
    Ok(KlDynamics {
        aligned_csv: aligned,
        convergence_csv: convergence,
    })
}
