//! Learning-rate schedules, Adam, and the freeze-controlled stage runner for
//! pretraining, CTC finetuning and continual pretraining.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::digest::{derive_seed, Fingerprint};
use crate::error::{Result, SoaError};
use crate::model::{
    context_encode, ctc_log_probs, feature_encode, init_ctc_head, project_contexts, project_targets, quantize,
    round_to_storage, sample_gumbel, Bound, Component, Model, ParamMap,
};
use crate::objectives::{
    contrastive_loss, ctc_loss, diversity_loss, sample_mask, sample_spans, ContrastiveBatch, ObjectiveConfig,
};
use crate::surgery::{LineageEntry, ModelCheckpoint};
use crate::synthdata::Corpus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Pretrain,
    Finetune,
    ContinualPretrain,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Pretrain => "pretrain",
            StageKind::Finetune => "finetune",
            StageKind::ContinualPretrain => "continual_pretrain",
        }
    }

    fn is_self_supervised(self) -> bool {
        !matches!(self, StageKind::Finetune)
    }
}

/// Linear warmup to `peak` over `warmup` steps, `hold` steps at peak, then
/// exponential decay reaching `peak · lambda` after `decay` more steps.
pub fn noam_hold_decay_lr(step: usize, warmup: usize, hold: usize, decay: usize, peak: f64, lambda: f64) -> f64 {
    let (w, h, d) = (warmup.max(1), hold, decay.max(1));
    if step <= w {
        peak * step as f64 / w as f64
    } else if step <= w + h {
        peak
    } else if step <= w + h + d {
        peak * lambda.powf((step - w - h) as f64 / d as f64)
    } else {
        peak * lambda
    }
}

/// Steps of linear warmup used by [`warmup_poly_lr`]: 8% of the total, rounded up.
pub fn poly_warmup_steps(total: usize) -> usize {
    (0.08 * total as f64).ceil() as usize
}

/// Linear warmup over the first 8% of `total` steps, then polynomial decay
/// to zero at `total`.
pub fn warmup_poly_lr(step: usize, total: usize, peak: f64, power: f64) -> f64 {
    let w = poly_warmup_steps(total);
    let step = step.min(total);
    if step <= w {
        return if w == 0 { peak } else { peak * step as f64 / w as f64 };
    }
    let progress = (step - w) as f64 / (total - w) as f64;
    peak * (1.0 - progress).powf(power)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheduler {
    NoamHoldDecay { warmup: usize, hold: usize, decay: usize, peak: f64, lambda: f64 },
    WarmupPoly { peak: f64, power: f64 },
    Constant { lr: f64 },
}

impl Scheduler {
    pub fn lr(&self, step: usize, total: usize) -> f64 {
        match *self {
            Scheduler::NoamHoldDecay { warmup, hold, decay, peak, lambda } => {
                noam_hold_decay_lr(step, warmup, hold, decay, peak, lambda)
            }
            Scheduler::WarmupPoly { peak, power } => warmup_poly_lr(step, total, peak, power),
            Scheduler::Constant { lr } => lr,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Scheduler::NoamHoldDecay { warmup, decay, peak, lambda, .. } => {
                warmup >= 1 && decay >= 1 && peak >= 0.0 && lambda > 0.0 && lambda <= 1.0
            }
            Scheduler::WarmupPoly { peak, power } => peak >= 0.0 && power > 0.0,
            Scheduler::Constant { lr } => lr >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(SoaError::config("stage.scheduler", format!("invalid parameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(cfg: &AdamConfig) -> Self {
        OptimizerState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One bias-corrected Adam update of the parameters for which `trainable`
/// holds. Gradients of other parameters are ignored.
pub fn adam_step(
    params: &mut ParamMap,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(SoaError::contract(format!("learning rate {lr} must be nonnegative")));
    }
    for (name, g) in grads {
        let p =
            params.get(name).ok_or_else(|| SoaError::contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(SoaError::contract(format!(
                "gradient shape {:?} does not match parameter `{name}` {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        if !trainable(name) {
            continue;
        }
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: StageKind,
    pub freeze: BTreeSet<Component>,
    pub scheduler: Scheduler,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Share of draws taken from the first corpus when mixing two corpora;
    /// `None` samples uniformly over the union of utterances.
    #[serde(default)]
    pub first_corpus_share: Option<f64>,
    /// Span-masking probability applied to latents during finetuning.
    #[serde(default)]
    pub finetune_mask_prob: f64,
    /// Permits freeze sets that break the adaptation contract.
    #[serde(default)]
    pub allow_freeze_override: bool,
    #[serde(default)]
    pub label: Option<String>,
}

impl StageConfig {
    pub fn pretrain(steps: usize, seed: u64) -> Self {
        StageConfig {
            kind: StageKind::Pretrain,
            freeze: BTreeSet::new(),
            scheduler: Scheduler::WarmupPoly { peak: 2e-3, power: 1.0 },
            steps,
            batch_size: 4,
            seed,
            objective: ObjectiveConfig::default(),
            adam: AdamConfig::default(),
            grad_clip: Some(5.0),
            first_corpus_share: None,
            finetune_mask_prob: 0.0,
            allow_freeze_override: false,
            label: Some("M1".into()),
        }
    }

    pub fn finetune(steps: usize, seed: u64) -> Self {
        let scale = |paper: usize| ((paper as f64) * steps as f64 / 80_000.0).round().max(1.0) as usize;
        StageConfig {
            kind: StageKind::Finetune,
            freeze: [Component::FeatureEncoder, Component::Quantizer].into(),
            scheduler: Scheduler::NoamHoldDecay {
                warmup: scale(8_000),
                hold: scale(32_000),
                decay: scale(40_000),
                peak: 1e-3,
                lambda: 0.05,
            },
            finetune_mask_prob: 0.05,
            label: Some("M2".into()),
            ..Self::pretrain(steps, seed)
        }
    }

    pub fn continual(steps: usize, seed: u64) -> Self {
        StageConfig {
            kind: StageKind::ContinualPretrain,
            freeze: [Component::ContextualEncoder, Component::CtcHead].into(),
            scheduler: Scheduler::WarmupPoly { peak: 3e-4, power: 1.0 },
            // Resuming from a trained codebook; a hot restart scrambles it.
            objective: ObjectiveConfig { gumbel_start: 0.5, ..ObjectiveConfig::default() },
            label: Some("M3".into()),
            ..Self::pretrain(steps, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scheduler.validate()?;
        self.objective.validate()?;
        if self.batch_size == 0 {
            return Err(SoaError::config("stage.batch_size", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(SoaError::config("stage.grad_clip", "must be positive"));
            }
        }
        if let Some(s) = self.first_corpus_share {
            if !(0.0..=1.0).contains(&s) {
                return Err(SoaError::config("stage.first_corpus_share", "must lie in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.finetune_mask_prob) {
            return Err(SoaError::config("stage.finetune_mask_prob", "must lie in [0, 1]"));
        }
        if self.allow_freeze_override {
            return Ok(());
        }
        let required: &[Component] = match self.kind {
            StageKind::Pretrain => &[],
            StageKind::Finetune => &[Component::FeatureEncoder],
            StageKind::ContinualPretrain => &[Component::ContextualEncoder, Component::CtcHead],
        };
        if let Some(missing) = required.iter().find(|c| !self.freeze.contains(c)) {
            return Err(SoaError::config(
                "stage.freeze",
                format!(
                    "{} stages must freeze {} (set allow_freeze_override to bypass)",
                    self.kind.as_str(),
                    missing.name()
                ),
            ));
        }
        Ok(())
    }

    fn trainable(&self, name: &str) -> bool {
        match Component::of(name) {
            Some(c) if self.freeze.contains(&c) => false,
            Some(Component::Quantizer) => self.kind.is_self_supervised(),
            Some(Component::CtcHead) => !self.kind.is_self_supervised(),
            Some(_) => true,
            None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub theta_checksum: String,
    pub phi_checksum: String,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<LogRow>,
    /// Utterances skipped because their CTC target could not be aligned
    /// or they were too short for a mask span.
    pub skipped: usize,
    pub wall_seconds: f64,
}

impl StageOutcome {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        write_log(&self.log, path)
    }
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Combined fingerprint of the corpora a stage consumed.
pub fn data_fingerprint(corpora: &[Corpus]) -> String {
    let mut fp = Fingerprint::new();
    for c in corpora {
        fp.str(&c.fingerprint());
    }
    fp.finish()
}

fn check_corpora(kind: StageKind, corpora: &[Corpus]) -> Result<()> {
    if corpora.is_empty() || corpora.iter().all(|c| c.is_empty()) {
        return Err(SoaError::DataContract(format!("{} stage received no utterances", kind.as_str())));
    }
    for c in corpora {
        let ok = if kind.is_self_supervised() { c.is_unlabeled() } else { c.is_labeled() };
        if !ok {
            return Err(SoaError::DataContract(format!(
                "{} stage needs {} audio, corpus `{}` ({}) does not match",
                kind.as_str(),
                if kind.is_self_supervised() { "unlabeled" } else { "labeled" },
                c.domain,
                c.split.as_str()
            )));
        }
    }
    Ok(())
}

struct Sampler<'a> {
    corpora: &'a [Corpus],
    share: Option<f64>,
    total: usize,
}

impl Sampler<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        match self.share {
            Some(s) if self.corpora.len() >= 2 => {
                let first = rng.random_bool(s);
                let pool: Vec<usize> = if first { vec![0] } else { (1..self.corpora.len()).collect() };
                let pool: Vec<usize> = pool.into_iter().filter(|&c| !self.corpora[c].is_empty()).collect();
                let pool = if pool.is_empty() {
                    (0..self.corpora.len()).filter(|&c| !self.corpora[c].is_empty()).collect()
                } else {
                    pool
                };
                let c = pool[rng.random_range(0..pool.len())];
                (c, rng.random_range(0..self.corpora[c].len()))
            }
            _ => {
                let mut i = rng.random_range(0..self.total);
                for (c, corpus) in self.corpora.iter().enumerate() {
                    if i < corpus.len() {
                        return (c, i);
                    }
                    i -= corpus.len();
                }
                unreachable!("index below total")
            }
        }
    }
}

enum Sample {
    Loss(f64, BTreeMap<String, Tensor>),
    Skip,
}

fn pretrain_sample(
    cfg: &StageConfig,
    ckpt: &ModelCheckpoint,
    waveform: &[f64],
    temperature: f64,
    seed: u64,
) -> Result<Sample> {
    let mc = &ckpt.config;
    let obj = &cfg.objective;
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &ckpt.params, |n| cfg.trainable(n));
    let z = feature_encode(&mut g, mc, &b, waveform)?;
    let t = g.shape(z)[0];
    if t < obj.mask_span {
        return Ok(Sample::Skip);
    }
    let plan = sample_mask(t, obj.mask_prob, obj.mask_span, derive_seed(seed, 1))?;
    if plan.positions().len() < 2 {
        return Ok(Sample::Skip);
    }
    let batch = ContrastiveBatch::sample(&plan, obj.num_distractors, obj.kappa, derive_seed(seed, 2))?;
    let c = context_encode(&mut g, mc, &b, z, &plan.mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let noise = sample_gumbel(mc, t, &mut rng);
    let (q, avg) = quantize(&mut g, mc, &b, z, temperature, true, Some(&noise))?;
    let cp = project_contexts(&mut g, &b, c)?;
    let qp = project_targets(&mut g, &b, q)?;
    let lc = contrastive_loss(&mut g, cp, qp, &batch)?;
    let ld = diversity_loss(&mut g, avg)?;
    let ld = g.scale(ld, obj.diversity_weight);
    let loss = g.add(lc, ld)?;
    finish(&g, &b, cfg, loss)
}

fn finetune_sample(
    cfg: &StageConfig,
    ckpt: &ModelCheckpoint,
    waveform: &[f64],
    cached_latents: Option<&Tensor>,
    transcript: &[usize],
    seed: u64,
) -> Result<Sample> {
    let mc = &ckpt.config;
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &ckpt.params, |n| cfg.trainable(n));
    let z = match cached_latents {
        Some(z) => g.constant(z.clone()),
        None => feature_encode(&mut g, mc, &b, waveform)?,
    };
    let t = g.shape(z)[0];
    let mask = if cfg.finetune_mask_prob > 0.0 && t >= cfg.objective.mask_span {
        sample_spans(t, cfg.finetune_mask_prob, cfg.objective.mask_span, seed, false)?.mask
    } else {
        vec![false; t]
    };
    let c = context_encode(&mut g, mc, &b, z, &mask)?;
    let lp = ctc_log_probs(&mut g, &b, c)?;
    let target: Vec<usize> = transcript.iter().map(|k| k + 1).collect();
    let loss = match ctc_loss(&mut g, lp, &target) {
        Ok(l) => l,
        Err(SoaError::InfeasibleTarget { .. }) => return Ok(Sample::Skip),
        Err(e) => return Err(e),
    };
    finish(&g, &b, cfg, loss)
}

fn finish(g: &Graph, b: &Bound, cfg: &StageConfig, loss: crate::autodiff::Var) -> Result<Sample> {
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let out =
        b.iter().filter(|(name, _)| cfg.trainable(name)).map(|(name, &v)| (name.clone(), grads.take(v))).collect();
    Ok(Sample::Loss(value, out))
}

/// Runs one training stage from `start` and returns the trained checkpoint.
///
/// Parameters of frozen components come back bit-identical. Finetuning adds
/// a freshly initialised CTC head when `start` has none.
pub fn run_stage(cfg: &StageConfig, start: &ModelCheckpoint, corpora: &[Corpus]) -> Result<StageOutcome> {
    cfg.validate()?;
    check_corpora(cfg.kind, corpora)?;
    let clock = Instant::now();
    let mut ckpt = start.clone();
    if cfg.kind == StageKind::Finetune && !ckpt.has_component(Component::CtcHead) {
        ckpt.params.extend(init_ctc_head(&ckpt.config, derive_seed(cfg.seed, 0xEAD)));
    }
    if cfg.kind.is_self_supervised() && ckpt.params.keys().all(|k| !Component::Quantizer.owns(k)) {
        return Err(SoaError::contract("self-supervised stages need quantizer parameters"));
    }

    let cache: Option<Vec<Vec<Tensor>>> =
        if cfg.kind == StageKind::Finetune && !cfg.trainable_component(Component::FeatureEncoder) {
            let model = Model::new(&ckpt.config, &ckpt.params);
            Some(
                corpora
                    .iter()
                    .map(|c| c.utterances.iter().map(|u| model.latents(&u.waveform)).collect::<Result<_>>())
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };

    let sampler = Sampler { corpora, share: cfg.first_corpus_share, total: corpora.iter().map(|c| c.len()).sum() };
    let mut state = OptimizerState::new(&cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut skipped = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x57A6E));

    for step in 1..=cfg.steps {
        let lr = cfg.scheduler.lr(step, cfg.steps);
        let temperature = cfg.objective.gumbel_temperature(step - 1, cfg.steps);
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let (ci, ui) = sampler.draw(&mut rng);
            let utt = &corpora[ci].utterances[ui];
            let seed = derive_seed(derive_seed(cfg.seed, step as u64), slot as u64);
            let sample = if cfg.kind.is_self_supervised() {
                pretrain_sample(cfg, &ckpt, &utt.waveform, temperature, seed)?
            } else {
                let transcript = utt.transcript.as_deref().expect("labeled corpus checked");
                let cached = cache.as_ref().map(|c| &c[ci][ui]);
                finetune_sample(cfg, &ckpt, &utt.waveform, cached, transcript, seed)?
            };
            match sample {
                Sample::Skip => skipped += 1,
                Sample::Loss(l, g) => {
                    losses.push(l);
                    for (k, v) in g {
                        match grads.get_mut(&k) {
                            Some(acc) => acc.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(k, v);
                            }
                        }
                    }
                }
            }
        }
        let loss = if losses.is_empty() {
            f64::NAN
        } else {
            let n = losses.len() as f64;
            grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= n));
            losses.iter().sum::<f64>() / n
        };
        if !losses.is_empty() {
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(SoaError::contract(format!(
                    "{} step {step}: non-finite loss or gradient",
                    cfg.kind.as_str()
                )));
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.values().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
                }
            }
            adam_step(&mut ckpt.params, &grads, &mut state, lr, |n| cfg.trainable(n))?;
        }
        log.push(LogRow {
            step,
            lr,
            loss,
            theta_checksum: ckpt.component_digest(Component::FeatureEncoder),
            phi_checksum: ckpt.component_digest(Component::ContextualEncoder),
        });
    }

    for (name, t) in ckpt.params.iter_mut() {
        if cfg.trainable(name) {
            round_to_storage(t);
        }
    }
    ckpt.lineage.push(LineageEntry {
        stage: cfg.kind.as_str().into(),
        label: cfg.label.clone(),
        data_fingerprint: Some(data_fingerprint(corpora)),
        steps: cfg.steps,
        parents: vec![start.digest()],
    });
    Ok(StageOutcome { checkpoint: ckpt, log, skipped, wall_seconds: clock.elapsed().as_secs_f64() })
}

impl StageConfig {
    fn trainable_component(&self, c: Component) -> bool {
        let probe = format!("{}.probe", c.name());
        self.trainable(&probe)
    }
}

/// Floating-point operations implied by a wall-clock budget on
/// `n_devices` devices of `device_tflops` single-precision throughput.
pub fn estimate_flops(wall_seconds: f64, n_devices: usize, device_tflops: f64) -> Result<f64> {
    if !(wall_seconds >= 0.0) || !(device_tflops >= 0.0) {
        return Err(SoaError::contract("FLOPs inputs must be nonnegative"));
    }
    Ok(wall_seconds * n_devices as f64 * device_tflops * 1e12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn noam_examples() {
        let (w, h, d) = (8000, 32000, 40000);
        assert!(rel(noam_hold_decay_lr(8000, w, h, d, 3e-5, 0.05), 3e-5) < 1e-12);
        assert!(rel(noam_hold_decay_lr(4000, w, h, d, 3e-5, 0.05), 1.5e-5) < 1e-12);
        assert!(rel(noam_hold_decay_lr(w + h + d, w, h, d, 3e-5, 0.05), 1.5e-6) < 1e-12);
        assert!(rel(noam_hold_decay_lr(w + h + d + 999, w, h, d, 3e-5, 0.05), 1.5e-6) < 1e-12);
        assert_eq!(noam_hold_decay_lr(0, w, h, d, 3e-5, 0.05), 0.0);
        assert_eq!(noam_hold_decay_lr(w + h, w, h, d, 3e-5, 0.05), 3e-5);
    }

    #[test]
    fn warmup_poly_examples() {
        assert_eq!(poly_warmup_steps(1000), 80);
        assert_eq!(poly_warmup_steps(999), 80);
        assert_eq!(poly_warmup_steps(500), 40);
        assert!(rel(warmup_poly_lr(80, 1000, 3e-5, 1.0), 3e-5) < 1e-12);
        assert!(warmup_poly_lr(79, 1000, 3e-5, 1.0) < 3e-5);
        assert!(warmup_poly_lr(81, 1000, 3e-5, 1.0) < 3e-5);
        assert_eq!(warmup_poly_lr(0, 1000, 3e-5, 1.0), 0.0);
        assert!(rel(warmup_poly_lr(540, 1000, 3e-5, 1.0), 1.5e-5) < 1e-12);
        assert_eq!(warmup_poly_lr(1000, 1000, 3e-5, 1.0), 0.0);
    }

    #[test]
    fn adam_single_step() {
        let mut params: ParamMap = [("w".to_string(), Tensor::scalar(1.0))].into();
        let grads = [("w".to_string(), Tensor::scalar(0.5))].into();
        let mut state = OptimizerState::new(&AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 });
        adam_step(&mut params, &grads, &mut state, 0.1, |_| true).unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((params["w"].item().unwrap() - expected).abs() < 1e-15);
        assert!((state.m["w"].item().unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_and_frozen() {
        let mut params: ParamMap =
            [("a".to_string(), Tensor::vector(vec![0.25, -3.0])), ("b".to_string(), Tensor::vector(vec![1.5, 2.5]))]
                .into();
        let before = params.clone();
        let grads = [("a".to_string(), Tensor::zeros(&[2])), ("b".to_string(), Tensor::vector(vec![7.0, -1.0]))].into();
        let mut state = OptimizerState::new(&AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut params, &grads, &mut state, 0.1, |n| n == "a").unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step, 3);
        assert_eq!(state.m["a"].shape(), &[2]);
        assert!(!state.m.contains_key("b"));
    }

    #[test]
    fn adam_rejects_bad_shapes() {
        let mut params: ParamMap = [("a".to_string(), Tensor::zeros(&[2]))].into();
        let mut state = OptimizerState::new(&AdamConfig::default());
        let bad = [("a".to_string(), Tensor::zeros(&[3]))].into();
        assert!(matches!(adam_step(&mut params, &bad, &mut state, 0.1, |_| true), Err(SoaError::Contract(_))));
        let unknown = [("z".to_string(), Tensor::zeros(&[2]))].into();
        assert!(adam_step(&mut params, &unknown, &mut state, 0.1, |_| true).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn flops_examples() {
        assert_eq!(estimate_flops(0.0, 2, 19.17).unwrap(), 0.0);
        assert!(rel(estimate_flops(3600.0, 1, 19.17).unwrap(), 6.9012e16) < 1e-12);
        assert!(rel(estimate_flops(39121.0, 2, 19.17).unwrap(), 1.5e18) < 0.01);
        assert!(estimate_flops(-1.0, 1, 19.17).is_err());
    }

    #[test]
    fn validator_enforces_freeze_contract() {
        assert!(StageConfig::pretrain(10, 0).validate().is_ok());
        assert!(StageConfig::finetune(10, 0).validate().is_ok());
        assert!(StageConfig::continual(10, 0).validate().is_ok());

        let mut ft = StageConfig::finetune(10, 0);
        ft.freeze.clear();
        let err = ft.validate().unwrap_err();
        assert!(matches!(err, SoaError::Config { .. }));
        assert_eq!(err.exit_code(), 2);
        ft.allow_freeze_override = true;
        assert!(ft.validate().is_ok());

        let mut cp = StageConfig::continual(10, 0);
        cp.freeze.remove(&Component::CtcHead);
        assert!(cp.validate().is_err());

        let mut bad = StageConfig::pretrain(10, 0);
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trainable_sets_follow_stage_kind() {
        let ft = StageConfig::finetune(1, 0);
        assert!(!ft.trainable("feature_encoder.conv0.weight"));
        assert!(!ft.trainable("quantizer.codebook"));
        assert!(ft.trainable("contextual_encoder.block0.attn.q.weight"));
        assert!(ft.trainable("ctc_head.weight"));
        let cp = StageConfig::continual(1, 0);
        assert!(cp.trainable("feature_encoder.conv0.weight"));
        assert!(cp.trainable("quantizer.codebook"));
        assert!(!cp.trainable("contextual_encoder.block0.attn.q.weight"));
        assert!(!cp.trainable("ctc_head.weight"));
    }

    #[test]
    fn scaled_finetune_schedule() {
        match StageConfig::finetune(1000, 0).scheduler {
            Scheduler::NoamHoldDecay { warmup, hold, decay, lambda, .. } => {
                assert_eq!((warmup, hold, decay), (100, 400, 500));
                assert_eq!(lambda, 0.05);
            }
            other => panic!("unexpected scheduler {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn noam_is_continuous(w in 1usize..500, h in 0usize..500, d in 1usize..500,
                              peak in 1e-6f64..1e-2, lambda in 0.01f64..1.0) {
            let bound = peak / w as f64 + peak * (1.0 - lambda.powf(1.0 / d as f64)) + 1e-18;
            for b in [w, w + h, w + h + 1, w + h + d, w + h + d + 1] {
                let jump = (noam_hold_decay_lr(b - 1, w, h, d, peak, lambda)
                    - noam_hold_decay_lr(b, w, h, d, peak, lambda)).abs();
                prop_assert!(jump <= bound, "jump {jump} at {b} exceeds {bound}");
            }
        }

        #[test]
        fn warmup_poly_peaks_once(total in 13usize..5000, peak in 1e-6f64..1e-2) {
            let w = poly_warmup_steps(total);
            let lrs: Vec<f64> = (0..=total).map(|s| warmup_poly_lr(s, total, peak, 1.0)).collect();
            prop_assert!(rel(lrs[w], peak) < 1e-12);
            prop_assert!(lrs[..w].windows(2).all(|p| p[0] < p[1]));
            prop_assert!(lrs[w..].windows(2).all(|p| p[0] > p[1]));
        }
    }
}
