//! DPO loss with an NLL term on the chosen response, a tabular softmax
//! policy to exercise it, analytic gradients, and a plain gradient-descent
//! trainer.
//!
//! Per-example loss (minimized):
//!
//! ```text
//! L = -log σ(β·[(log πθ(c) - log π(c)) - (log πθ(r) - log π(r))]) - α·log πθ(c)
//! ```

use std::collections::BTreeMap;
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite loss at step {step}: loss={loss}, max |logit|={max_abs_logit}")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        max_abs_logit: f64,
    },
    #[error("malformed preference record on line {line}: {detail}")]
    BadRecord { line: usize, detail: String },
    #[error("io error: {0}")]
    Io(String),
}

/// The four log-probabilities entering one loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProbPair {
    pub policy_chosen: f64,
    pub policy_rejected: f64,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    pub beta: f64,
    pub alpha: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            alpha: 1.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LossError::InvalidParameter("beta must be > 0".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LossError::InvalidParameter("alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// `log σ(z)` without overflow in either tail.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// `σ(z)` without overflow in either tail.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss from the policy and reference log-ratio margins directly. Keeping the
/// margins as differences of logits avoids cancellation through the softmax
/// normalizer.
fn loss_from_margins(
    policy_margin: f64,
    ref_margin: f64,
    policy_chosen: f64,
    params: LossParams,
) -> f64 {
    -log_sigmoid(params.beta * (policy_margin - ref_margin)) - params.alpha * policy_chosen
}

pub fn dpo_nll_loss(pair: LogProbPair, params: LossParams) -> f64 {
    let chosen_ratio = pair.policy_chosen - pair.ref_chosen;
    let rejected_ratio = pair.policy_rejected - pair.ref_rejected;
    -log_sigmoid(params.beta * (chosen_ratio - rejected_ratio)) - params.alpha * pair.policy_chosen
}

/// One preference record over the toy policy's candidate table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: usize,
    pub chosen: usize,
    pub rejected: usize,
}

/// Per-prompt categorical policy over `K` candidates: `πθ(k|p) = softmax(θ[p])_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    prompts: Vec<String>,
    k: usize,
    logits: Vec<f64>,
    reference_logits: Vec<f64>,
}

impl ToyPolicy {
    /// Policy initialized to the reference.
    pub fn from_reference(
        prompts: Vec<String>,
        k: usize,
        reference_logits: Vec<f64>,
    ) -> Result<Self, LossError> {
        if k < 2 {
            return Err(LossError::InvalidParameter("K must be >= 2".into()));
        }
        if reference_logits.len() != prompts.len() * k {
            return Err(LossError::InvalidParameter(format!(
                "expected {} reference logits, got {}",
                prompts.len() * k,
                reference_logits.len()
            )));
        }
        if reference_logits.iter().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidParameter(
                "reference logits must be finite".into(),
            ));
        }
        Ok(Self {
            prompts,
            k,
            logits: reference_logits.clone(),
            reference_logits,
        })
    }

    pub fn uniform(num_prompts: usize, k: usize) -> Result<Self, LossError> {
        let prompts = (0..num_prompts).map(|i| format!("p{i}")).collect();
        Self::from_reference(prompts, k, vec![0.0; num_prompts * k])
    }

    /// Reference logits drawn uniformly from `[-scale, scale]` with a seed.
    pub fn random(num_prompts: usize, k: usize, scale: f64, seed: u64) -> Result<Self, LossError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..num_prompts * k)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        let prompts = (0..num_prompts).map(|i| format!("p{i}")).collect();
        Self::from_reference(prompts, k, logits)
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn candidates_per_prompt(&self) -> usize {
        self.k
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn reference_logits(&self) -> &[f64] {
        &self.reference_logits
    }

    fn row(values: &[f64], k: usize, p: usize) -> &[f64] {
        &values[p * k..(p + 1) * k]
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        softmax(Self::row(&self.logits, self.k, prompt))
    }

    pub fn log_probs(&self, prompt: usize) -> Vec<f64> {
        log_softmax(Self::row(&self.logits, self.k, prompt))
    }

    pub fn reference_log_probs(&self, prompt: usize) -> Vec<f64> {
        log_softmax(Self::row(&self.reference_logits, self.k, prompt))
    }

    pub fn log_prob_pair(&self, pair: &PreferencePair) -> LogProbPair {
        let lp = self.log_probs(pair.prompt);
        let rp = self.reference_log_probs(pair.prompt);
        LogProbPair {
            policy_chosen: lp[pair.chosen],
            policy_rejected: lp[pair.rejected],
            ref_chosen: rp[pair.chosen],
            ref_rejected: rp[pair.rejected],
        }
    }

    fn check(&self, dataset: &[PreferencePair]) -> Result<(), LossError> {
        if dataset.is_empty() {
            return Err(LossError::EmptyDataset);
        }
        for (i, d) in dataset.iter().enumerate() {
            if d.prompt >= self.prompts.len() || d.chosen >= self.k || d.rejected >= self.k {
                return Err(LossError::IndexOutOfRange(format!(
                    "record {i}: prompt {} chosen {} rejected {} (prompts={}, K={})",
                    d.prompt,
                    d.chosen,
                    d.rejected,
                    self.prompts.len(),
                    self.k
                )));
            }
            if d.chosen == d.rejected {
                return Err(LossError::IndexOutOfRange(format!(
                    "record {i}: chosen and rejected are both {}",
                    d.chosen
                )));
            }
        }
        Ok(())
    }

    fn example_loss(&self, d: &PreferencePair, params: LossParams) -> f64 {
        let row = Self::row(&self.logits, self.k, d.prompt);
        let ref_row = Self::row(&self.reference_logits, self.k, d.prompt);
        let policy_chosen = row[d.chosen] - log_sum_exp(row);
        loss_from_margins(
            row[d.chosen] - row[d.rejected],
            ref_row[d.chosen] - ref_row[d.rejected],
            policy_chosen,
            params,
        )
    }

    /// Fraction of pairs where the policy ranks chosen strictly above rejected.
    pub fn pairwise_accuracy(&self, dataset: &[PreferencePair]) -> f64 {
        if dataset.is_empty() {
            return 0.0;
        }
        let hits = dataset
            .iter()
            .filter(|d| {
                let row = Self::row(&self.logits, self.k, d.prompt);
                row[d.chosen] > row[d.rejected]
            })
            .count();
        hits as f64 / dataset.len() as f64
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean loss over the dataset, summed in record order.
pub fn dpo_nll_batch_loss(
    policy: &ToyPolicy,
    dataset: &[PreferencePair],
    params: LossParams,
) -> Result<f64, LossError> {
    policy.check(dataset)?;
    let total: f64 = dataset.iter().map(|d| policy.example_loss(d, params)).sum();
    Ok(total / dataset.len() as f64)
}

/// Analytic gradient of [`dpo_nll_batch_loss`] with respect to the policy
/// logits, row-major like [`ToyPolicy::logits`].
///
/// With `z = β·(margin_θ − margin_ref)` and `p = softmax(θ[prompt])`:
/// `∂L/∂θ_j = −β·σ(−z)·(1[j=c] − 1[j=r]) − α·(1[j=c] − p_j)`.
pub fn dpo_nll_grad(
    policy: &ToyPolicy,
    dataset: &[PreferencePair],
    params: LossParams,
) -> Result<Vec<f64>, LossError> {
    policy.check(dataset)?;
    let k = policy.k;
    let scale = 1.0 / dataset.len() as f64;
    let mut grad = vec![0.0; policy.logits.len()];
    for d in dataset {
        let row = ToyPolicy::row(&policy.logits, k, d.prompt);
        let ref_row = ToyPolicy::row(&policy.reference_logits, k, d.prompt);
        let z = params.beta
            * ((row[d.chosen] - row[d.rejected]) - (ref_row[d.chosen] - ref_row[d.rejected]));
        let dpo_weight = params.beta * sigmoid(-z);
        let probs = softmax(row);
        let g = &mut grad[d.prompt * k..(d.prompt + 1) * k];
        for (j, (gj, pj)) in g.iter_mut().zip(&probs).enumerate() {
            let chosen = if j == d.chosen { 1.0 } else { 0.0 };
            let rejected = if j == d.rejected { 1.0 } else { 0.0 };
            *gj += scale * (-dpo_weight * (chosen - rejected) - params.alpha * (chosen - pj));
        }
    }
    Ok(grad)
}

/// Largest relative deviation between the analytic gradient and central
/// finite differences, `|a − n| / max(1e-8, |n|)` over all coordinates.
pub fn check_gradient(
    policy: &ToyPolicy,
    dataset: &[PreferencePair],
    params: LossParams,
    epsilon: f64,
) -> Result<f64, LossError> {
    if !(1e-6..=1e-2).contains(&epsilon) {
        return Err(LossError::InvalidParameter(format!(
            "epsilon must lie in [1e-6, 1e-2], got {epsilon}"
        )));
    }
    let analytic = dpo_nll_grad(policy, dataset, params)?;
    let mut probe = policy.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = probe.logits[i];
        probe.logits[i] = orig + epsilon;
        let plus = dpo_nll_batch_loss(&probe, dataset, params)?;
        probe.logits[i] = orig - epsilon;
        let minus = dpo_nll_batch_loss(&probe, dataset, params)?;
        probe.logits[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1e-8));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Loss before each step, followed by the final loss.
    pub loss_curve: Vec<f64>,
    pub accuracy_curve: Vec<f64>,
}

impl TrainingReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_curve[0]
    }
}

/// Plain gradient descent on the policy logits.
pub fn train_toy(
    policy: &mut ToyPolicy,
    dataset: &[PreferencePair],
    params: LossParams,
    steps: usize,
    lr: f64,
) -> Result<TrainingReport, LossError> {
    params.validate()?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(LossError::InvalidParameter("lr must be > 0".into()));
    }
    let mut loss_curve = Vec::with_capacity(steps + 1);
    let mut accuracy_curve = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let loss = dpo_nll_batch_loss(policy, dataset, params)?;
        if !loss.is_finite() {
            let max_abs_logit = policy.logits.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(LossError::NonFiniteLoss {
                step,
                loss,
                max_abs_logit,
            });
        }
        loss_curve.push(loss);
        accuracy_curve.push(policy.pairwise_accuracy(dataset));
        if step == steps {
            break;
        }
        let grad = dpo_nll_grad(policy, dataset, params)?;
        for (w, g) in policy.logits.iter_mut().zip(grad) {
            *w -= lr * g;
        }
    }
    Ok(TrainingReport {
        final_loss: *loss_curve.last().expect("at least one evaluation"),
        final_accuracy: *accuracy_curve.last().expect("at least one evaluation"),
        loss_curve,
        accuracy_curve,
    })
}

/// Reference logit spread used by the synthetic benchmark.
pub const SYNTHETIC_REFERENCE_SCALE: f64 = 0.5;

/// Seeded synthetic benchmark: `num_prompts` prompts with `k` candidates,
/// reference logits uniform in `[-reference_scale, reference_scale]`, and one
/// random (chosen, rejected) pair per prompt. The policy starts at the
/// reference.
pub fn synthetic_task(
    num_prompts: usize,
    k: usize,
    reference_scale: f64,
    seed: u64,
) -> Result<(ToyPolicy, Vec<PreferencePair>), LossError> {
    let policy = ToyPolicy::random(num_prompts, k, reference_scale, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let dataset = (0..num_prompts)
        .map(|prompt| {
            let chosen = rng.random_range(0..k);
            let mut rejected = rng.random_range(0..k - 1);
            if rejected >= chosen {
                rejected += 1;
            }
            PreferencePair {
                prompt,
                chosen,
                rejected,
            }
        })
        .collect();
    Ok((policy, dataset))
}

#[derive(Deserialize)]
struct PrefLine {
    id: String,
    document: String,
    chosen: String,
    rejected: String,
}

/// Toy dataset built from preference JSONL.
#[derive(Debug, Clone)]
pub struct ImportedPreferences {
    pub policy: ToyPolicy,
    pub dataset: Vec<PreferencePair>,
    /// Candidate strings per prompt; rows shorter than K are padded with
    /// inert placeholder candidates.
    pub candidates: Vec<Vec<String>>,
}

/// Turns preference records into a toy task: each distinct document becomes
/// a prompt and its chosen/rejected strings (deduplicated) become candidates.
/// The reference is uniform and the policy starts at the reference.
pub fn import_preferences<R: BufRead>(reader: R) -> Result<ImportedPreferences, LossError> {
    let mut prompt_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut prompts: Vec<String> = Vec::new();
    let mut candidates: Vec<Vec<String>> = Vec::new();
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LossError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PrefLine = serde_json::from_str(&line).map_err(|e| LossError::BadRecord {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if rec.chosen == rec.rejected {
            continue;
        }
        let p = *prompt_index.entry(rec.document.clone()).or_insert_with(|| {
            prompts.push(rec.id.clone());
            candidates.push(Vec::new());
            prompts.len() - 1
        });
        let mut slot = |text: &str| -> usize {
            let row = &mut candidates[p];
            row.iter().position(|c| c == text).unwrap_or_else(|| {
                row.push(text.to_string());
                row.len() - 1
            })
        };
        let chosen = slot(&rec.chosen);
        let rejected = slot(&rec.rejected);
        pairs.push(PreferencePair {
            prompt: p,
            chosen,
            rejected,
        });
    }
    if pairs.is_empty() {
        return Err(LossError::EmptyDataset);
    }
    let k = candidates.iter().map(Vec::len).max().unwrap_or(2).max(2);
    for row in &mut candidates {
        while row.len() < k {
            row.push(format!("<pad{}>", row.len()));
        }
    }
    let policy = ToyPolicy::from_reference(prompts.clone(), k, vec![0.0; prompts.len() * k])?;
    Ok(ImportedPreferences {
        policy,
        dataset: pairs,
        candidates,
    })
}
