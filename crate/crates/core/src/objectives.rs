//! Span masking, the contrastive and diversity pretraining losses, and CTC.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_add_exp, Graph, Tensor, Var};
use crate::digest::derive_seed;
use crate::error::{Result, SoaError};

/// Hyperparameters of the masked contrastive objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub mask_prob: f64,
    pub mask_span: usize,
    pub num_distractors: usize,
    pub kappa: f64,
    pub diversity_weight: f64,
    pub gumbel_start: f64,
    pub gumbel_end: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mask_prob: 0.065,
            mask_span: 10,
            num_distractors: 10,
            kappa: 0.1,
            diversity_weight: 0.1,
            gumbel_start: 2.0,
            gumbel_end: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(SoaError::config("objective.mask_prob", "must lie in [0, 1]"));
        }
        if self.mask_span == 0 || self.num_distractors == 0 {
            return Err(SoaError::config("objective", "mask_span and num_distractors must be ≥ 1"));
        }
        if !(self.kappa > 0.0) || !(self.gumbel_start > 0.0) || !(self.gumbel_end > 0.0) {
            return Err(SoaError::config("objective", "temperatures must be positive"));
        }
        if !(self.diversity_weight >= 0.0) {
            return Err(SoaError::config("objective.diversity_weight", "must be nonnegative"));
        }
        Ok(())
    }

    /// Gumbel temperature after `step` of `total` steps, linear in progress.
    pub fn gumbel_temperature(&self, step: usize, total: usize) -> f64 {
        let frac = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
        self.gumbel_start + (self.gumbel_end - self.gumbel_start) * frac
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    pub start_prob: f64,
    pub span: usize,
}

impl MaskPlan {
    pub fn positions(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
    }
}

/// Marks spans of `span` frames starting at each position with probability
/// `p`. When nothing ends up masked one span is placed uniformly at random.
pub fn sample_mask(frames: usize, p: f64, span: usize, seed: u64) -> Result<MaskPlan> {
    sample_spans(frames, p, span, seed, true)
}

/// Span masking with the empty-mask fallback optional.
pub fn sample_spans(frames: usize, p: f64, span: usize, seed: u64, force_one: bool) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SoaError::contract(format!("mask probability {p} outside [0, 1]")));
    }
    if span == 0 || span > frames {
        return Err(SoaError::contract(format!("mask span {span} must lie in 1..={frames}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x3A5C));
    let mut mask = vec![false; frames];
    for s in 0..frames {
        if rng.random_bool(p) {
            mask[s..(s + span).min(frames)].iter_mut().for_each(|m| *m = true);
        }
    }
    if force_one && !mask.iter().any(|m| *m) {
        let s = rng.random_range(0..=frames - span);
        mask[s..s + span].iter_mut().for_each(|m| *m = true);
    }
    Ok(MaskPlan { mask, start_prob: p, span })
}

/// Masked positions paired with their sampled distractor positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub positions: Vec<usize>,
    /// `positions.len() × K` indices, row-major.
    pub distractors: Vec<usize>,
    pub num_distractors: usize,
    pub kappa: f64,
}

impl ContrastiveBatch {
    /// Draws `k` distractors per masked position, with replacement, from the
    /// other masked positions.
    pub fn sample(plan: &MaskPlan, k: usize, kappa: f64, seed: u64) -> Result<Self> {
        let positions = plan.positions();
        if positions.len() < 2 {
            return Err(SoaError::contract("contrastive loss needs at least two masked positions"));
        }
        if k == 0 || !(kappa > 0.0) {
            return Err(SoaError::contract("need K ≥ 1 and κ > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD157));
        let n = positions.len();
        let mut distractors = Vec::with_capacity(n * k);
        for i in 0..n {
            for _ in 0..k {
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                distractors.push(positions[j]);
            }
        }
        Ok(ContrastiveBatch { positions, distractors, num_distractors: k, kappa })
    }
}

/// Mean over masked positions of the cross-entropy of identifying the true
/// target among the distractors by cosine similarity over κ.
///
/// `contexts` and `targets` are `T × d` projections of the same utterance.
pub fn contrastive_loss(g: &mut Graph, contexts: Var, targets: Var, batch: &ContrastiveBatch) -> Result<Var> {
    let k1 = batch.num_distractors + 1;
    if batch.num_distractors == 0 || !(batch.kappa > 0.0) {
        return Err(SoaError::contract("need K ≥ 1 and κ > 0"));
    }
    if batch.distractors.len() != batch.positions.len() * batch.num_distractors {
        return Err(SoaError::contract("distractor table must be positions × K"));
    }
    let n = batch.positions.len();
    let c = g.gather_rows(contexts, &batch.positions)?;
    let c = g.normalize_rows(c)?;
    let mut c_idx = Vec::with_capacity(n * k1);
    let mut cand = Vec::with_capacity(n * k1);
    for (i, &pos) in batch.positions.iter().enumerate() {
        c_idx.extend(std::iter::repeat_n(i, k1));
        cand.push(pos);
        cand.extend_from_slice(&batch.distractors[i * batch.num_distractors..(i + 1) * batch.num_distractors]);
    }
    let c_rep = g.gather_rows(c, &c_idx)?;
    let q = g.gather_rows(targets, &cand)?;
    let q = g.normalize_rows(q)?;
    let prod = g.mul(c_rep, q)?;
    let sims = g.sum_axis(prod, 1)?;
    let sims = g.reshape(sims, &[n, k1])?;
    let logits = g.scale(sims, 1.0 / batch.kappa);
    let lsm = g.log_softmax(logits, 1)?;
    let truth = g.gather_cols(lsm, &vec![0; n], 1)?;
    let mean = g.mean(truth);
    Ok(g.scale(mean, -1.0))
}

/// Loss value for explicit context and target matrices.
pub fn contrastive_loss_value(contexts: &Tensor, targets: &Tensor, batch: &ContrastiveBatch) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.constant(contexts.clone());
    let q = g.constant(targets.clone());
    let l = contrastive_loss(&mut g, c, q, batch)?;
    g.value(l).item()
}

fn check_probs(p: &Tensor) -> Result<(usize, usize)> {
    let (groups, v) = p.dims2()?;
    if groups == 0 || v == 0 {
        return Err(SoaError::contract("code probabilities must be non-empty"));
    }
    if p.data().iter().any(|x| !(*x >= 0.0)) {
        return Err(SoaError::contract("code probabilities must be nonnegative"));
    }
    for r in 0..groups {
        let s: f64 = p.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(SoaError::contract(format!("code probabilities of group {r} sum to {s}")));
        }
    }
    Ok((groups, v))
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `(1/G) Σ_g (1 − exp(H(p̄_g)) / V)` for averaged code probabilities `G × V`.
pub fn diversity_loss_value(avg_probs: &Tensor) -> Result<f64> {
    let (groups, v) = check_probs(avg_probs)?;
    let s: f64 = (0..groups).map(|r| 1.0 - entropy(avg_probs.row(r)).exp() / v as f64).sum();
    Ok(s / groups as f64)
}

/// Graph form of [`diversity_loss_value`].
pub fn diversity_loss(g: &mut Graph, avg_probs: Var) -> Result<Var> {
    let p = g.value(avg_probs).clone();
    let value = diversity_loss_value(&p)?;
    let (groups, v) = p.dims2()?;
    let norm = (groups * v) as f64;
    let mut grad = Vec::with_capacity(p.numel());
    for r in 0..groups {
        let row = p.row(r);
        let perplexity = entropy(row).exp();
        grad.extend(row.iter().map(|x| perplexity * (x.max(1e-12).ln() + 1.0) / norm));
    }
    g.scalar_fn(avg_probs, value, grad)
}

/// Shortest frame count able to emit `target` under CTC.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_ctc(log_probs: &Tensor, target: &[usize]) -> Result<(usize, usize)> {
    let (t, c) = log_probs.dims2()?;
    if c < 2 {
        return Err(SoaError::contract("CTC needs blank plus at least one symbol"));
    }
    if let Some(bad) = target.iter().find(|&&k| k == 0 || k >= c) {
        return Err(SoaError::contract(format!("target label {bad} outside 1..{c} (0 is blank)")));
    }
    let need = ctc_min_frames(target).max(1);
    if t < need {
        return Err(SoaError::InfeasibleTarget { frames: t, needed: need });
    }
    Ok((t, c))
}

/// Negative log-likelihood and its gradient with respect to `log_probs`.
///
/// Column 0 of `log_probs` is the blank; `target` holds column indices.
pub fn ctc_loss_and_grad(log_probs: &Tensor, target: &[usize]) -> Result<(f64, Tensor)> {
    let (t, c) = check_ctc(log_probs, target)?;
    let s = 2 * target.len() + 1;
    let label = |i: usize| if i.is_multiple_of(2) { 0 } else { target[i / 2] };
    let skip = |i: usize| i % 2 == 1 && i >= 3 && target[i / 2] != target[i / 2 - 1];
    let lp = |tt: usize, i: usize| log_probs.at2(tt, label(i));
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t * s];
    alpha[0] = lp(0, 0);
    if s > 1 {
        alpha[1] = lp(0, 1);
    }
    for tt in 1..t {
        for i in 0..s {
            let mut a = alpha[(tt - 1) * s + i];
            if i >= 1 {
                a = log_add_exp(a, alpha[(tt - 1) * s + i - 1]);
            }
            if skip(i) {
                a = log_add_exp(a, alpha[(tt - 1) * s + i - 2]);
            }
            alpha[tt * s + i] = a + lp(tt, i);
        }
    }
    // beta[t][i]: log-probability of the suffix after frame t given state i at t.
    let mut beta = vec![ninf; t * s];
    beta[(t - 1) * s + s - 1] = 0.0;
    if s > 1 {
        beta[(t - 1) * s + s - 2] = 0.0;
    }
    for tt in (0..t - 1).rev() {
        for i in 0..s {
            let mut b = beta[(tt + 1) * s + i] + lp(tt + 1, i);
            if i + 1 < s {
                b = log_add_exp(b, beta[(tt + 1) * s + i + 1] + lp(tt + 1, i + 1));
            }
            if i + 2 < s && skip(i + 2) {
                b = log_add_exp(b, beta[(tt + 1) * s + i + 2] + lp(tt + 1, i + 2));
            }
            beta[tt * s + i] = b;
        }
    }
    let mut log_p = alpha[(t - 1) * s + s - 1];
    if s > 1 {
        log_p = log_add_exp(log_p, alpha[(t - 1) * s + s - 2]);
    }
    if !log_p.is_finite() {
        return Err(SoaError::InfeasibleTarget { frames: t, needed: ctc_min_frames(target) });
    }
    let mut grad = vec![0.0; t * c];
    for tt in 0..t {
        for i in 0..s {
            let occ = alpha[tt * s + i] + beta[tt * s + i] - log_p;
            if occ.is_finite() {
                grad[tt * c + label(i)] -= occ.exp();
            }
        }
    }
    Ok((-log_p, Tensor::new(vec![t, c], grad)?))
}

pub fn ctc_loss_value(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    ctc_loss_and_grad(log_probs, target).map(|(l, _)| l)
}

/// CTC loss as a graph node over frame log-probabilities.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &[usize]) -> Result<Var> {
    let (loss, grad) = ctc_loss_and_grad(g.value(log_probs), target)?;
    g.scalar_fn(log_probs, loss, grad.into_data())
}

/// Removes repeats, then blanks (column 0).
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exhaustive CTC likelihood over every frame labelling; returns `+∞` when
/// no path yields `target`.
pub fn ctc_brute_force(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    let (t, c) = log_probs.dims2()?;
    if t > 8 {
        return Err(SoaError::contract(format!("brute-force CTC refuses T = {t} > 8")));
    }
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; t];
    loop {
        if collapse(&path) == target {
            let lp: f64 = path.iter().enumerate().map(|(tt, &k)| log_probs.at2(tt, k)).sum();
            total = log_add_exp(total, lp);
        }
        let mut i = 0;
        loop {
            if i == t {
                return Ok(-total);
            }
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}
