//! Gradient-bandit search over prompt insertion layers.
//!
//! Arms are insertion layers `1..=M`. Preferences `H` define the softmax
//! policy `pi`; each step trains one uniformly drawn arm, scores `n` arms
//! drawn from `pi` without replacement, and moves each scored arm's
//! preference by `alpha * (R - R_b) * pi(K) * (1 - pi(K))`, where `R_b` is
//! the mean of the step's rewards and `pi` is the policy at the start of the
//! step. Unscored arms are left untouched.

use std::io::Write;

use rand::distributions::{Distribution, Uniform};
use rand::Rng as _;

use crate::error::{invalid, DvpError, Result};
use crate::numerics::{seeded_rng, Rng};

pub const DEFAULT_ALPHA: f64 = 5e-3;
pub const DEFAULT_SAMPLES: usize = 5;

/// Softmax of the preferences with max subtraction.
pub fn policy_from_preferences(h: &[f64]) -> Result<Vec<f64>> {
    if h.is_empty() {
        return Err(invalid("policy over zero arms"));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(DvpError::NonFinite { op: "policy_from_preferences" });
    }
    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = h.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn check_reward(what: &str, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(invalid(format!("{what} {r} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub preferences: Vec<f64>,
    pub alpha: f64,
    pub step: u64,
}

impl PolicyState {
    pub fn new(arms: usize, alpha: f64) -> Result<Self> {
        if arms == 0 {
            return Err(invalid("bandit needs at least one arm"));
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(invalid(format!("learning rate {alpha} must be finite and non-negative")));
        }
        Ok(PolicyState { preferences: vec![0.0; arms], alpha, step: 0 })
    }

    pub fn arms(&self) -> usize {
        self.preferences.len()
    }

    pub fn policy(&self) -> Vec<f64> {
        policy_from_preferences(&self.preferences).expect("preferences stay finite")
    }

    fn check_arm(&self, arm: usize) -> Result<()> {
        if arm < 1 || arm > self.arms() {
            return Err(DvpError::OutOfRange { what: "arm", value: arm, lo: 1, hi: self.arms() });
        }
        Ok(())
    }

    /// One preference update for `arm` (1-based) using the current policy.
    pub fn update_preference(&mut self, arm: usize, reward: f64, baseline: f64) -> Result<()> {
        let pi = self.policy();
        self.update_with_policy(arm, reward, baseline, &pi)
    }

    /// One preference update for `arm` using a policy snapshot `pi`.
    pub fn update_with_policy(&mut self, arm: usize, reward: f64, baseline: f64, pi: &[f64]) -> Result<()> {
        self.check_arm(arm)?;
        check_reward("reward", reward)?;
        check_reward("baseline", baseline)?;
        let p = pi[arm - 1];
        self.preferences[arm - 1] += self.alpha * (reward - baseline) * p * (1.0 - p);
        Ok(())
    }

    /// Applies the updates of one search step against the step's starting
    /// policy and advances the step counter. Returns the baseline.
    pub fn apply_step(&mut self, arms: &[usize], rewards: &[f64]) -> Result<f64> {
        if arms.len() != rewards.len() {
            return Err(invalid("one reward per sampled arm"));
        }
        let baseline = compute_baseline(rewards)?;
        let pi = self.policy();
        for (&arm, &r) in arms.iter().zip(rewards) {
            self.update_with_policy(arm, r, baseline, &pi)?;
        }
        self.step += 1;
        Ok(baseline)
    }

    /// Arm with the largest preference; ties go to the deeper layer, which
    /// is never more expensive to run.
    pub fn best_arm(&self) -> usize {
        argmax_prefer_last(&self.preferences) + 1
    }
}

/// Index of the maximum, last one on ties.
pub fn argmax_prefer_last(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v >= values[best] {
            best = i;
        }
    }
    best
}

/// Uniform draw from `1..=arms`.
pub fn sample_training_arm(arms: usize, rng: &mut Rng) -> usize {
    Uniform::new_inclusive(1, arms.max(1)).sample(rng)
}

/// `n` distinct arms drawn sequentially with probability proportional to
/// `pi`, renormalizing over the arms not yet drawn.
pub fn sample_validation_arms(pi: &[f64], n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n > pi.len() {
        return Err(invalid(format!("cannot draw {n} distinct arms from {}", pi.len())));
    }
    let mut weights = pi.to_vec();
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = weights.iter().sum();
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut choice = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            choice = Some(i);
            if u < acc {
                break;
            }
        }
        let i = match choice {
            Some(i) => i,
            // every remaining weight underflowed to zero
            None => (0..weights.len()).find(|i| !picked.contains(&(i + 1))).expect("n <= arms"),
        };
        weights[i] = 0.0;
        picked.push(i + 1);
    }
    Ok(picked)
}

/// Mean of the step's rewards, accumulated as offsets from the first one so
/// that equal rewards give back exactly that reward.
pub fn compute_baseline(rewards: &[f64]) -> Result<f64> {
    let Some(&first) = rewards.first() else {
        return Err(invalid("baseline of zero rewards"));
    };
    Ok(first + rewards.iter().map(|r| r - first).sum::<f64>() / rewards.len() as f64)
}

/// Scores insertion layers for the search loop.
pub trait RewardOracle {
    /// One training step with `arm` active. Oracles without a model ignore it.
    fn train(&mut self, _arm: usize, _step: usize) -> Result<()> {
        Ok(())
    }

    /// Rewards in `[0, 1]` for each of `arms`, scored on the same data.
    fn rewards(&mut self, arms: &[usize], step: usize) -> Result<Vec<f64>>;
}

/// Fixed reward per arm.
#[derive(Clone, Debug)]
pub struct ScriptedOracle {
    pub rewards: Vec<f64>,
}

impl RewardOracle for ScriptedOracle {
    fn rewards(&mut self, arms: &[usize], _step: usize) -> Result<Vec<f64>> {
        arms.iter()
            .map(|&a| self.rewards.get(a - 1).copied().ok_or_else(|| invalid(format!("no reward for arm {a}"))))
            .collect()
    }
}

/// Bernoulli reward with a fixed mean per arm.
#[derive(Clone, Debug)]
pub struct BernoulliOracle {
    pub means: Vec<f64>,
    rng: Rng,
}

impl BernoulliOracle {
    pub fn new(means: Vec<f64>, seed: u64) -> Self {
        BernoulliOracle { means, rng: seeded_rng(seed) }
    }
}

impl RewardOracle for BernoulliOracle {
    fn rewards(&mut self, arms: &[usize], _step: usize) -> Result<Vec<f64>> {
        arms.iter()
            .map(|&a| {
                let p = *self.means.get(a - 1).ok_or_else(|| invalid(format!("no mean for arm {a}")))?;
                Ok(if self.rng.gen::<f64>() < p { 1.0 } else { 0.0 })
            })
            .collect()
    }
}

/// Replays a recorded per-step reward table (cycled when exhausted).
#[derive(Clone, Debug)]
pub struct ReplayOracle {
    pub table: Vec<Vec<f64>>,
}

impl RewardOracle for ReplayOracle {
    fn rewards(&mut self, arms: &[usize], step: usize) -> Result<Vec<f64>> {
        if self.table.is_empty() {
            return Err(invalid("empty replay table"));
        }
        let row = &self.table[step % self.table.len()];
        arms.iter()
            .map(|&a| row.get(a - 1).copied().ok_or_else(|| invalid(format!("no reward for arm {a}"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub arms: usize,
    /// Validation arms per step.
    pub samples: usize,
    pub steps: usize,
    pub alpha: f64,
    pub train_batch: usize,
    pub val_batch: usize,
    pub seed: u64,
}

impl SearchConfig {
    pub fn new(arms: usize, steps: usize, seed: u64) -> Self {
        SearchConfig {
            arms,
            samples: DEFAULT_SAMPLES.min(arms),
            steps,
            alpha: DEFAULT_ALPHA,
            train_batch: 32,
            val_batch: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 || self.samples > self.arms {
            return Err(invalid(format!("samples per step {} must be in 1..={}", self.samples, self.arms)));
        }
        if self.train_batch == 0 || self.val_batch == 0 {
            return Err(invalid("batch sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub trained_arm: usize,
    pub sampled_arms: Vec<usize>,
    pub rewards: Vec<f64>,
    pub baseline: f64,
    /// Preferences after this step's updates.
    pub preferences: Vec<f64>,
    /// Policy after this step's updates.
    pub policy: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best_arm: usize,
    pub state: PolicyState,
    pub trace: Vec<TraceRow>,
}

impl SearchOutcome {
    pub fn final_policy(&self) -> Vec<f64> {
        self.state.policy()
    }
}

/// Runs the full search loop against `oracle`.
pub fn run_search<O: RewardOracle + ?Sized>(oracle: &mut O, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut state = PolicyState::new(cfg.arms, cfg.alpha)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let wrap = |step: usize| move |e: DvpError| DvpError::Oracle { step, msg: e.to_string() };
    for step in 0..cfg.steps {
        let trained_arm = sample_training_arm(cfg.arms, &mut rng);
        oracle.train(trained_arm, step).map_err(wrap(step))?;
        let pi = state.policy();
        let sampled_arms = sample_validation_arms(&pi, cfg.samples, &mut rng)?;
        let rewards = oracle.rewards(&sampled_arms, step).map_err(wrap(step))?;
        if rewards.len() != sampled_arms.len() {
            return Err(DvpError::Oracle { step, msg: "wrong number of rewards".into() });
        }
        if let Some(bad) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(DvpError::Oracle { step, msg: format!("reward {bad} outside [0, 1]") });
        }
        let baseline = state.apply_step(&sampled_arms, &rewards)?;
        trace.push(TraceRow {
            step: step + 1,
            trained_arm,
            sampled_arms,
            rewards,
            baseline,
            preferences: state.preferences.clone(),
            policy: state.policy(),
        });
    }
    Ok(SearchOutcome { best_arm: state.best_arm(), state, trace })
}

pub const TRACE_CSV_VERSION: &str = "# dvp search-trace v1";

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

/// Writes the trace as CSV with a leading version comment.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TraceRow], arms: usize) -> Result<()> {
    writeln!(out, "{TRACE_CSV_VERSION}")?;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["step", "trained_arm", "sampled_arms", "rewards", "baseline"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=arms).map(|i| format!("H_{i}")));
    header.extend((1..=arms).map(|i| format!("pi_{i}")));
    w.write_record(&header)?;
    for row in trace {
        let mut rec = vec![
            row.step.to_string(),
            row.trained_arm.to_string(),
            join(&row.sampled_arms),
            join(&row.rewards),
            row.baseline.to_string(),
        ];
        rec.extend(row.preferences.iter().map(|v| v.to_string()));
        rec.extend(row.policy.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_examples() {
        assert_eq!(policy_from_preferences(&[0.3; 4]).unwrap(), vec![0.25; 4]);
        let p = policy_from_preferences(&[1.0, 0.0]).unwrap();
        assert!((p[0] - 0.731059).abs() < 1e-6 && (p[1] - 0.268941).abs() < 1e-6);
        let q = policy_from_preferences(&[1.0 + 7.5, 7.5]).unwrap();
        assert!((p[0] - q[0]).abs() < 1e-15);
        assert!(policy_from_preferences(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn update_examples() {
        let mut s = PolicyState::new(2, 5e-3).unwrap();
        s.update_preference(1, 0.4, 0.4).unwrap();
        assert_eq!(s.preferences, vec![0.0, 0.0]);
        s.update_preference(1, 1.0, 0.5).unwrap();
        assert!((s.preferences[0] - 6.25e-4).abs() < 1e-18);
        assert_eq!(s.preferences[1], 0.0);
        assert!(s.update_preference(3, 1.0, 0.5).is_err());
        assert!(s.update_preference(0, 1.0, 0.5).is_err());
        assert!(s.update_preference(1, 1.5, 0.5).is_err());
    }

    #[test]
    fn saturated_policy_barely_moves() {
        let mut s = PolicyState { preferences: vec![40.0, 0.0], alpha: 1.0, step: 0 };
        s.update_preference(1, 1.0, 0.0).unwrap();
        assert!((s.preferences[0] - 40.0).abs() < 1e-15);
    }

    #[test]
    fn baseline_examples() {
        let r = [0.2, 0.4, 0.6];
        let b = compute_baseline(&r).unwrap();
        assert!((b - 0.4).abs() < 1e-15);
        assert_eq!(compute_baseline(&[0.7]).unwrap(), 0.7);
        assert!(compute_baseline(&[]).is_err());
    }

    #[test]
    fn validation_sampling_contract() {
        let mut rng = seeded_rng(1);
        let pi = [0.1, 0.2, 0.3, 0.4];
        let mut all = sample_validation_arms(&pi, 4, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, vec![1, 2, 3, 4]);
        assert!(sample_validation_arms(&pi, 5, &mut rng).is_err());
        for _ in 0..100 {
            let mut s = sample_validation_arms(&pi, 3, &mut rng).unwrap();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
    }

    #[test]
    fn training_arm_single() {
        let mut rng = seeded_rng(5);
        assert!((0..100).all(|_| sample_training_arm(1, &mut rng) == 1));
    }

    #[test]
    fn scripted_search_finds_best() {
        let mut oracle = ScriptedOracle { rewards: vec![0.5, 0.5, 0.9, 0.5] };
        let cfg = SearchConfig { samples: 4, alpha: 1.0, ..SearchConfig::new(4, 2000, 3) };
        let out = run_search(&mut oracle, &cfg).unwrap();
        assert_eq!(out.best_arm, 3);
        assert!(out.final_policy()[2] > 0.9);
        assert_eq!(out.trace.len(), 2000);
    }

    #[test]
    fn oracle_failure_reports_step() {
        let mut oracle = ScriptedOracle { rewards: vec![0.5] };
        let cfg = SearchConfig::new(2, 10, 0);
        match run_search(&mut oracle, &cfg) {
            Err(DvpError::Oracle { step, .. }) => assert_eq!(step, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trace_csv_shape() {
        let mut oracle = ScriptedOracle { rewards: vec![0.1, 0.9] };
        let cfg = SearchConfig::new(2, 3, 0);
        let out = run_search(&mut oracle, &cfg).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &out.trace, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRACE_CSV_VERSION);
        assert_eq!(lines[1], "step,trained_arm,sampled_arms,rewards,baseline,H_1,H_2,pi_1,pi_2");
        assert_eq!(lines.len(), 5);
    }
}
