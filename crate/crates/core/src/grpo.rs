//! Group-relative advantages and the clipped surrogate objective.
//!
//! All losses take per-trajectory log-probability vectors (one entry per output token, in
//! the order trajectories appear across the groups) and return the value together with its
//! gradient with respect to the new-policy log-probabilities. Token terms are averaged over
//! every output token in the batch.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{mean_and_population_std, score_sequence, PolicyModel, RolloutGroup};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub epsilon_clip: f64,
    pub beta_kl: f64,
    pub entropy_coef: f64,
    pub eps_std: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { epsilon_clip: 0.2, beta_kl: 0.001, entropy_coef: 0.01, eps_std: 1e-8 }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip < 1.0) {
            return invalid("epsilon_clip must lie in (0, 1)");
        }
        if !(self.beta_kl >= 0.0 && self.entropy_coef >= 0.0) {
            return invalid("beta_kl and entropy_coef must be nonnegative");
        }
        if !(self.eps_std > 0.0) {
            return invalid("eps_std must be positive");
        }
        Ok(())
    }
}

/// `(R_i - mean) / (std + eps_std)` with the population standard deviation; all zeros when
/// every reward is equal or the spread is below `eps_std`.
pub fn group_advantages<F: Scalar>(rewards: &[F], eps_std: F) -> Result<Vec<F>> {
    if rewards.len() < 2 {
        return invalid(format!("advantages need a group of at least 2, got {}", rewards.len()));
    }
    let (mean, std) = mean_and_population_std(rewards);
    if rewards.iter().all(|&r| r == rewards[0]) || std < eps_std {
        return Ok(vec![F::zero(); rewards.len()]);
    }
    Ok(rewards.iter().map(|&r| (r - mean) / (std + eps_std)).collect())
}

/// A scalar loss term and its gradient w.r.t. the new log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<F> {
    pub value: F,
    pub d_new_lp: Vec<Vec<F>>,
}

fn check_aligned<F: Scalar>(a: &[Vec<F>], b: &[Vec<F>], what: &str) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} trajectories", a.len(), b.len())));
    }
    let mut tokens = 0;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{what}: trajectory {i} has {} vs {} tokens", x.len(), y.len())));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what}: log-probabilities of trajectory {i}")));
        }
        tokens += x.len();
    }
    if tokens == 0 {
        return invalid(format!("{what}: no tokens"));
    }
    Ok(tokens)
}

fn advantages_per_trajectory<F: Scalar>(groups: &[RolloutGroup<F>], new_lp: &[Vec<F>]) -> Result<Vec<F>> {
    let adv: Vec<F> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
    let lens = groups.iter().flat_map(|g| g.trajectories.iter().map(|t| t.output_tokens.len()));
    if adv.len() != new_lp.len() {
        return Err(Error::Shape(format!("{} advantages for {} trajectories", adv.len(), new_lp.len())));
    }
    for (i, (len, lp)) in lens.zip(new_lp).enumerate() {
        if len != lp.len() {
            return Err(Error::Shape(format!("trajectory {i} has {len} tokens but {} log-probs", lp.len())));
        }
    }
    Ok(adv)
}

/// `min(r·A, clip(r, 1-ε, 1+ε)·A)` for one token.
pub fn clipped_term<F: Scalar>(ratio: F, advantage: F, epsilon: F) -> F {
    let clipped = ratio.max(F::one() - epsilon).min(F::one() + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// `∂/∂r` of [`clipped_term`]: `A` wherever the selected branch depends on `r`, else 0.
fn clipped_term_dr<F: Scalar>(ratio: F, advantage: F, epsilon: F) -> F {
    let lo = F::one() - epsilon;
    let hi = F::one() + epsilon;
    let clipped = ratio.max(lo).min(hi);
    if ratio * advantage <= clipped * advantage || (ratio >= lo && ratio <= hi) {
        advantage
    } else {
        F::zero()
    }
}

/// `-(1/Σ|τ_i|) Σ_i Σ_t min(r_it·A_i, clip(r_it)·A_i)` with `r_it = exp(new - old)`.
pub fn clipped_surrogate<F: Scalar>(
    groups: &[RolloutGroup<F>],
    new_lp: &[Vec<F>],
    old_lp: &[Vec<F>],
    cfg: &ClipConfig,
) -> Result<LossGrad<F>> {
    let n_tokens = check_aligned(new_lp, old_lp, "clipped surrogate")?;
    let adv = advantages_per_trajectory(groups, new_lp)?;
    let eps = F::lit(cfg.epsilon_clip);
    let inv_n = F::one() / F::from_usize_lossy(n_tokens);
    let mut total = F::zero();
    let mut grads = Vec::with_capacity(new_lp.len());
    for ((new, old), &a) in new_lp.iter().zip(old_lp).zip(&adv) {
        let mut g = Vec::with_capacity(new.len());
        for (&ln, &lo) in new.iter().zip(old) {
            let r = (ln - lo).exp();
            total += clipped_term(r, a, eps);
            g.push(-inv_n * clipped_term_dr(r, a, eps) * r);
        }
        grads.push(g);
    }
    Ok(LossGrad { value: -total * inv_n, d_new_lp: grads })
}

/// Mean over tokens of `exp(Δ) - Δ - 1`, `Δ = ref - new`.
pub fn kl_penalty<F: Scalar>(new_lp: &[Vec<F>], ref_lp: &[Vec<F>]) -> Result<LossGrad<F>> {
    let n_tokens = check_aligned(new_lp, ref_lp, "kl penalty")?;
    let inv_n = F::one() / F::from_usize_lossy(n_tokens);
    let mut total = F::zero();
    let mut grads = Vec::with_capacity(new_lp.len());
    for (new, rf) in new_lp.iter().zip(ref_lp) {
        let mut g = Vec::with_capacity(new.len());
        for (&ln, &lr) in new.iter().zip(rf) {
            let delta = lr - ln;
            let e = delta.exp();
            total += e - delta - F::one();
            g.push(inv_n * (F::one() - e));
        }
        grads.push(g);
    }
    Ok(LossGrad { value: total * inv_n, d_new_lp: grads })
}

/// Composite RL loss with each term reported separately.
#[derive(Debug, Clone, PartialEq)]
pub struct RlObjective<F> {
    pub total: F,
    pub surrogate: F,
    pub kl: F,
    pub entropy: F,
    pub d_new_lp: Vec<Vec<F>>,
    /// `∂total/∂H_t` for each token's next-token entropy.
    pub d_entropy: Vec<Vec<F>>,
}

/// `surrogate + β·KL − c_H·mean_entropy`. `ref_lp` may be omitted when `β = 0`.
pub fn rl_objective<F: Scalar>(
    groups: &[RolloutGroup<F>],
    new_lp: &[Vec<F>],
    old_lp: &[Vec<F>],
    ref_lp: Option<&[Vec<F>]>,
    entropies: &[Vec<F>],
    cfg: &ClipConfig,
) -> Result<RlObjective<F>> {
    cfg.validate()?;
    let surr = clipped_surrogate(groups, new_lp, old_lp, cfg)?;
    let n_tokens = check_aligned(new_lp, entropies, "entropy")?;
    let mut d_new_lp = surr.d_new_lp;
    let beta = F::lit(cfg.beta_kl);
    let kl = match ref_lp {
        Some(rf) => {
            let kl = kl_penalty(new_lp, rf)?;
            if cfg.beta_kl != 0.0 {
                for (g, k) in d_new_lp.iter_mut().zip(&kl.d_new_lp) {
                    for (a, &b) in g.iter_mut().zip(k) {
                        *a += beta * b;
                    }
                }
            }
            kl.value
        }
        None if cfg.beta_kl == 0.0 => F::zero(),
        None => return invalid("reference log-probabilities are required when beta_kl > 0"),
    };
    let inv_n = F::one() / F::from_usize_lossy(n_tokens);
    let entropy = entropies.iter().flatten().copied().sum::<F>() * inv_n;
    let coef = F::lit(cfg.entropy_coef);
    let d_entropy = entropies.iter().map(|e| vec![-coef * inv_n; e.len()]).collect();
    let total = surr.value + beta * kl - coef * entropy;
    Ok(RlObjective { total, surrogate: surr.value, kl, entropy, d_new_lp, d_entropy })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient<F> {
    pub objective: RlObjective<F>,
    pub grad: Vec<F>,
    pub new_lp: Vec<Vec<F>>,
}

/// [`rl_objective`] evaluated for `policy`, with the gradient chained through to its
/// parameters. `old_lp`/`ref_lp` are fixed inputs (no gradient flows into them).
pub fn policy_rl_gradient<F: Scalar, P: PolicyModel<F>>(
    policy: &P,
    groups: &[RolloutGroup<F>],
    old_lp: &[Vec<F>],
    ref_lp: Option<&[Vec<F>]>,
    temperature: F,
    cfg: &ClipConfig,
) -> Result<PolicyGradient<F>> {
    let trajs: Vec<_> = groups.iter().flat_map(|g| g.trajectories.iter()).collect();
    let mut scores = Vec::with_capacity(trajs.len());
    for t in &trajs {
        scores.push(score_sequence(policy, &t.prompt_tokens, &t.output_tokens, temperature)?);
    }
    let new_lp: Vec<Vec<F>> = scores.iter().map(|s| s.log_probs.clone()).collect();
    let entropies: Vec<Vec<F>> = scores.iter().map(|s| s.entropies.clone()).collect();
    let obj = rl_objective(groups, &new_lp, old_lp, ref_lp, &entropies, cfg)?;
    if !obj.total.is_finite() {
        return Err(Error::NonFinite("rl objective".into()));
    }
    let mut grad = vec![F::zero(); policy.num_params()];
    let use_entropy = cfg.entropy_coef != 0.0;
    for (i, (t, s)) in trajs.iter().zip(&scores).enumerate() {
        let d_ent = use_entropy.then(|| obj.d_entropy[i].as_slice());
        let dl = s.dlogits(&t.output_tokens, &obj.d_new_lp[i], d_ent)?;
        policy.backward(&s.tape, &dl, &mut grad)?;
    }
    Ok(PolicyGradient { objective: obj, grad, new_lp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Degeneracy, Trajectory};
    use crate::toyenv::{LengthTask, ToyVocabulary, EOS};
    use proptest::prelude::*;

    fn group_with(advantages: Vec<f64>, lens: &[usize]) -> RolloutGroup<f64> {
        let vocab = ToyVocabulary::new(32).unwrap();
        let task = LengthTask::new("t", 5).unwrap();
        let trajectories = lens
            .iter()
            .map(|&n| {
                let mut out: Vec<u32> = (0..n.saturating_sub(1)).map(|i| 16 + i as u32 % 8).collect();
                out.push(EOS);
                Trajectory::score(&task, out, &vocab, false, Degeneracy::default()).unwrap()
            })
            .collect();
        RolloutGroup { task, trajectories, mu_r: 0.0, sigma_r: 0.0, advantages }
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[0.5, 0.5, 0.5, 0.5], 1e-8).unwrap(), vec![0.0; 4]);
        let a = group_advantages(&[1.0f64, 0.0], 1e-8).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-7 && (a[1] + 1.0).abs() < 1e-7);
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-8).unwrap();
        let sigma = 0.1875f64.sqrt();
        assert!((a[0] - 0.75 / sigma).abs() < 1e-6);
        assert!((a[0] - 1.7321).abs() < 1e-4);
        for &x in &a[1..] {
            assert!((x + 0.5774).abs() < 1e-4);
        }
        assert!(group_advantages(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn surrogate_examples() {
        let cfg = ClipConfig::default();
        let g = group_with(vec![0.5], &[2]);
        let lp = vec![vec![-1.0, -2.0]];
        let s = clipped_surrogate(&[g], &lp, &lp, &cfg).unwrap();
        assert!((s.value + 0.5).abs() < 1e-12);

        let g = group_with(vec![1.0], &[1]);
        let s = clipped_surrogate(&[g], &[vec![1.5f64.ln()]], &[vec![0.0]], &cfg).unwrap();
        assert!((s.value + 1.2).abs() < 1e-12);
        assert_eq!(s.d_new_lp[0][0], 0.0);

        let g = group_with(vec![0.0, 0.0], &[3, 2]);
        let new = vec![vec![-0.1, -0.2, -0.3], vec![-1.0, -0.5]];
        let old = vec![vec![-0.2, -0.1, -0.3], vec![-0.9, -0.5]];
        let s = clipped_surrogate(&[g], &new, &old, &cfg).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.d_new_lp.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn surrogate_rejects_mismatch_and_nonfinite() {
        let cfg = ClipConfig::default();
        let g = group_with(vec![1.0], &[2]);
        assert!(matches!(clipped_surrogate(&[g.clone()], &[vec![0.0]], &[vec![0.0]], &cfg), Err(Error::Shape(_))));
        assert!(matches!(
            clipped_surrogate(&[g], &[vec![0.0, f64::NAN]], &[vec![0.0, 0.0]], &cfg),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let z = kl_penalty(&[vec![-0.3, -1.0]], &[vec![-0.3, -1.0]]).unwrap();
        assert_eq!(z.value, 0.0);
        let k = kl_penalty(&[vec![0.0]], &[vec![2f64.ln()]]).unwrap();
        assert!((k.value - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((k.value - 0.3069).abs() < 1e-4);
        let k = kl_penalty(&[vec![0.5f64]], &[vec![0.0]]).unwrap();
        assert!((k.value - 0.1065).abs() < 1e-4);
    }

    #[test]
    fn objective_reductions() {
        let g = group_with(vec![0.7, -0.7], &[2, 3]);
        let new = vec![vec![-0.1, -0.2], vec![-0.3, -0.4, -0.5]];
        let old = vec![vec![-0.15, -0.2], vec![-0.3, -0.35, -0.5]];
        let ent = vec![vec![1.0, 0.9], vec![0.8, 0.7, 0.6]];
        let cfg0 = ClipConfig { beta_kl: 0.0, entropy_coef: 0.0, ..ClipConfig::default() };
        let o = rl_objective(&[g.clone()], &new, &old, None, &ent, &cfg0).unwrap();
        let s = clipped_surrogate(&[g.clone()], &new, &old, &cfg0).unwrap();
        assert_eq!(o.total, s.value);

        let gz = group_with(vec![0.0, 0.0], &[2, 3]);
        let cfg = ClipConfig { beta_kl: 0.0, ..ClipConfig::default() };
        let o = rl_objective(&[gz], &new, &new, None, &ent, &cfg).unwrap();
        assert!((o.total + 0.01 * 0.8).abs() < 1e-15);
        assert!(rl_objective(&[g], &new, &old, None, &ent, &ClipConfig::default()).is_err());
    }

    #[test]
    fn objective_matches_scalar_oracle() {
        // Independent scalar evaluation of the composed objective on a fixed fixture.
        let g = group_with(vec![1.2, -0.8], &[2, 2]);
        let new = vec![vec![-0.2, -1.0], vec![-0.7, -0.1]];
        let old = vec![vec![-0.5, -1.0], vec![-0.2, -0.3]];
        let rf = vec![vec![-0.4, -0.9], vec![-0.6, -0.2]];
        let ent = vec![vec![1.1, 0.4], vec![0.9, 1.3]];
        let cfg = ClipConfig::default();
        let o = rl_objective(&[g], &new, &old, Some(&rf), &ent, &cfg).unwrap();

        let adv = [1.2, -0.8];
        let mut surr = 0.0;
        let mut kl = 0.0;
        let mut h = 0.0;
        for i in 0..2 {
            for t in 0..2 {
                let r: f64 = (new[i][t] - old[i][t]).exp();
                let unclipped = r * adv[i];
                let clipped = r.clamp(0.8, 1.2) * adv[i];
                surr += if unclipped < clipped { unclipped } else { clipped };
                let d: f64 = rf[i][t] - new[i][t];
                kl += d.exp() - d - 1.0;
                h += ent[i][t];
            }
        }
        let expected = -surr / 4.0 + 0.001 * kl / 4.0 - 0.01 * h / 4.0;
        assert!((o.total - expected).abs() < 1e-14, "{} vs {expected}", o.total);
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        use crate::policy::{sequence_log_probs, TabularConfig, TabularStoppingPolicy};
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        let cfg_t = TabularConfig { vocab_size: 20, target_rows: 6, positions: 5 };
        let p = TabularStoppingPolicy::<f64>::random(cfg_t, 0.5, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let old = TabularStoppingPolicy::<f64>::random(cfg_t, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let rf = TabularStoppingPolicy::<f64>::random(cfg_t, 0.5, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let mut g = group_with(vec![], &[3, 5, 2]);
        g.advantages = vec![1.1, -0.4, -0.7];
        let temp = 0.7;
        let lp_of = |m: &TabularStoppingPolicy<f64>| -> Vec<Vec<f64>> {
            g.trajectories.iter().map(|t| sequence_log_probs(m, &t.prompt_tokens, &t.output_tokens, temp).unwrap()).collect()
        };
        let old_lp = lp_of(&old);
        let ref_lp = lp_of(&rf);
        let cfg = ClipConfig { epsilon_clip: 0.3, beta_kl: 0.05, entropy_coef: 0.1, eps_std: 1e-8 };
        let groups = [g.clone()];
        let grad = policy_rl_gradient(&p, &groups, &old_lp, Some(&ref_lp), temp, &cfg).unwrap().grad;
        let h = 1e-6;
        let mut checked = 0;
        for i in 0..p.num_params() {
            let mut q = p.clone();
            q.params_mut()[i] += h;
            let up = policy_rl_gradient(&q, &groups, &old_lp, Some(&ref_lp), temp, &cfg).unwrap().objective.total;
            q.params_mut()[i] -= 2.0 * h;
            let down = policy_rl_gradient(&q, &groups, &old_lp, Some(&ref_lp), temp, &cfg).unwrap().objective.total;
            let fd = (up - down) / (2.0 * h);
            if fd.abs() > 1e-7 || grad[i].abs() > 1e-7 {
                checked += 1;
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
                assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", grad[i]);
            }
        }
        assert!(checked > 20);
    }

    fn lp_vecs(lens: Vec<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
        lens.into_iter().map(|n| proptest::collection::vec(-3.0f64..0.0, n)).collect::<Vec<_>>()
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rewards in proptest::collection::vec(0.0f64..1.0, 2..12)) {
            let a = group_advantages(&rewards, 1e-8).unwrap();
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            let (_, sigma) = mean_and_population_std(&rewards);
            if sigma >= 1e-8 {
                let (_, s) = mean_and_population_std(&a);
                prop_assert!((s - sigma / (sigma + 1e-8)).abs() < 1e-9, "std {s}");
                if sigma >= 1e-2 {
                    prop_assert!((s - 1.0).abs() < 1e-6, "std {s}");
                }
            } else {
                prop_assert!(a.iter().all(|&x| x == 0.0));
            }
        }

        #[test]
        fn advantages_shift_invariant_and_sign_equivariant(rewards in proptest::collection::vec(0.0f64..1.0, 2..10), shift in -5.0f64..5.0) {
            let a = group_advantages(&rewards, 1e-8).unwrap();
            let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let b = group_advantages(&shifted, 1e-8).unwrap();
            let negated: Vec<f64> = rewards.iter().map(|r| -r).collect();
            let c = group_advantages(&negated, 1e-8).unwrap();
            for i in 0..a.len() {
                prop_assert!((a[i] - b[i]).abs() < 1e-6);
                prop_assert!((a[i] + c[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn clip_never_exceeds_unclipped(r in 0.0f64..3.0, a in -3.0f64..3.0, eps in 0.01f64..0.99) {
            prop_assert!(clipped_term(r, a, eps) <= r * a);
        }

        #[test]
        fn kl_is_nonnegative_and_zero_only_at_equality(
            (new, rf) in proptest::collection::vec(1usize..5, 1..4).prop_flat_map(|lens| (lp_vecs(lens.clone()), lp_vecs(lens)))
        ) {
            let k = kl_penalty(&new, &rf).unwrap();
            prop_assert!(k.value >= 0.0);
            let same = kl_penalty(&new, &new).unwrap();
            prop_assert_eq!(same.value, 0.0);
            let differs = new.iter().flatten().zip(rf.iter().flatten()).any(|(a, b)| (a - b).abs() > 1e-3);
            if differs {
                prop_assert!(k.value > 0.0);
            }
        }
    }
}
