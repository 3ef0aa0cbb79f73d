//! Greedy CTC decoding, word error rate, and the sinusoid probe of the
//! feature encoder.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tensor};
use crate::error::{Result, SoaError};
use crate::model::Model;
use crate::objectives::collapse;
use crate::surgery::ModelCheckpoint;
use crate::synthdata::{Corpus, PEAK_AMPLITUDE};

/// Per-frame argmax, repeats merged, blanks (column 0) dropped. Returned
/// labels are column indices.
pub fn greedy_ctc_decode(log_probs: &Tensor) -> Result<Vec<usize>> {
    let (t, _) = log_probs.dims2()?;
    let path: Vec<usize> = (0..t).map(|r| argmax(log_probs.row(r))).collect();
    Ok(collapse(&path))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // Each cell holds (cost, S, I, D); ties prefer substitutions, then deletions.
    let mut prev: Vec<(usize, EditCounts)> =
        (0..=m).map(|j| (j, EditCounts { insertions: j, ..Default::default() })).collect();
    for i in 1..=n {
        let mut cur = Vec::with_capacity(m + 1);
        cur.push((i, EditCounts { deletions: i, ..Default::default() }));
        for j in 1..=m {
            let same = reference[i - 1] == hyp[j - 1];
            let (dc, mut de) = prev[j - 1];
            let diag = if same { dc } else { dc + 1 };
            if !same {
                de.substitutions += 1;
            }
            let (uc, mut ue) = prev[j];
            ue.deletions += 1;
            let (lc, mut le) = cur[j - 1];
            le.insertions += 1;
            let best = if diag <= uc + 1 && diag <= lc + 1 {
                (diag, de)
            } else if uc <= lc {
                (uc + 1, ue)
            } else {
                (lc + 1, le)
            };
            cur.push(best);
        }
        prev = cur;
    }
    prev[m].1
}

/// Word error rate `(S + I + D) / |reference|` with the edit counts.
pub fn word_error_rate<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<(f64, EditCounts)> {
    if reference.is_empty() {
        return Err(SoaError::contract("word error rate is undefined for an empty reference"));
    }
    let e = edit_counts(reference, hyp);
    Ok((e.total() as f64 / reference.len() as f64, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: String,
    pub split: String,
    pub model: String,
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
    pub utterances: usize,
    pub checkpoint_digest: String,
}

/// Symbol sequences decoded greedily for each utterance of `corpus`.
pub fn transcribe(ckpt: &ModelCheckpoint, corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
    let model = Model::new(&ckpt.config, &ckpt.params);
    corpus
        .utterances
        .iter()
        .map(|u| {
            let lp = model.log_probs(&u.waveform)?;
            Ok(greedy_ctc_decode(&lp)?.into_iter().map(|c| c - 1).collect())
        })
        .collect()
}

/// Corpus-level WER of greedy transcripts.
pub fn evaluate(ckpt: &ModelCheckpoint, corpus: &Corpus) -> Result<EvalReport> {
    if !corpus.is_labeled() {
        return Err(SoaError::DataContract(format!("evaluation corpus `{}` is not labeled", corpus.domain)));
    }
    let hyps = transcribe(ckpt, corpus)?;
    let mut edits = EditCounts::default();
    let mut words = 0;
    for (u, hyp) in corpus.utterances.iter().zip(&hyps) {
        let reference = u.transcript.as_deref().expect("labeled");
        let e = edit_counts(reference, hyp);
        edits.substitutions += e.substitutions;
        edits.insertions += e.insertions;
        edits.deletions += e.deletions;
        words += reference.len();
    }
    if words == 0 {
        return Err(SoaError::contract("evaluation corpus has no reference words"));
    }
    Ok(EvalReport {
        domain: corpus.domain.clone(),
        split: corpus.split.as_str().into(),
        model: ckpt.label().unwrap_or("model").into(),
        wer: edits.total() as f64 / words as f64,
        substitutions: edits.substitutions,
        insertions: edits.insertions,
        deletions: edits.deletions,
        reference_words: words,
        utterances: corpus.len(),
        checkpoint_digest: ckpt.digest(),
    })
}

pub fn write_eval_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SoaError::contract(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SoaError::DegenerateInput("zero-norm vector in cosine similarity".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub index: usize,
    pub frequency_hz: f64,
    pub similarity: f64,
    pub prominence: f64,
}

/// Topographic prominence of the local maximum at `i`.
pub fn prominence(curve: &[f64], i: usize) -> f64 {
    let h = curve[i];
    let mut left_min = h;
    for &v in curve[..i].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &curve[i + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Local maxima of `curve` whose prominence reaches `min_prominence`,
/// in grid order. A plateau counts once, at its first sample.
pub fn find_peaks(grid: &[f64], curve: &[f64], min_prominence: f64) -> Result<Vec<Peak>> {
    if grid.len() != curve.len() {
        return Err(SoaError::contract("grid and curve lengths differ"));
    }
    let n = curve.len();
    let mut peaks = Vec::new();
    if n < 3 {
        return Ok(peaks);
    }
    let mut i = 1;
    while i < n - 1 {
        if curve[i] > curve[i - 1] {
            let mut j = i;
            while j + 1 < n && curve[j + 1] == curve[i] {
                j += 1;
            }
            if j + 1 < n && curve[j + 1] < curve[i] {
                let p = prominence(curve, i);
                if p >= min_prominence {
                    peaks.push(Peak { index: i, frequency_hz: grid[i], similarity: curve[i], prominence: p });
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    Ok(peaks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub frequencies_hz: Vec<f64>,
    pub similarities: Vec<f64>,
    pub peaks: Vec<Peak>,
    pub reference_formants_hz: Option<Vec<f64>>,
}

impl ProbeReport {
    pub fn argmax_hz(&self) -> f64 {
        self.frequencies_hz[argmax(&self.similarities)]
    }

    /// The `n` most prominent peaks, in frequency order.
    pub fn dominant_peaks(&self, n: usize) -> Vec<Peak> {
        let mut p = self.peaks.clone();
        p.sort_by(|a, b| b.prominence.total_cmp(&a.prominence));
        p.truncate(n);
        p.sort_by(|a, b| a.frequency_hz.total_cmp(&b.frequency_hz));
        p
    }

    /// Prominence of the strongest peak within `tolerance_hz` of each
    /// reference formant (zero when there is none).
    pub fn formant_prominences(&self, tolerance_hz: f64) -> Vec<f64> {
        self.reference_formants_hz
            .iter()
            .flatten()
            .map(|f| {
                self.peaks
                    .iter()
                    .filter(|p| (p.frequency_hz - f).abs() <= tolerance_hz)
                    .map(|p| p.prominence)
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["frequency_hz", "similarity"])?;
        for (f, s) in self.frequencies_hz.iter().zip(&self.similarities) {
            w.write_record([f.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub step_hz: f64,
    pub amplitude: f64,
    pub duration_s: f64,
    pub min_prominence: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            f_lo_hz: 10.0,
            f_hi_hz: 8000.0,
            step_hz: 10.0,
            amplitude: PEAK_AMPLITUDE,
            duration_s: 1.0,
            min_prominence: 0.02,
        }
    }
}

impl ProbeConfig {
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.f_hi_hz - self.f_lo_hz) / self.step_hz + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.f_lo_hz + i as f64 * self.step_hz).collect()
    }
}

/// `amplitude · sin(2π f t)` sampled at `sample_rate_hz`.
pub fn sinusoid(freq_hz: f64, amplitude: f64, duration_s: f64, sample_rate_hz: u32) -> Vec<f64> {
    let n = (duration_s * sample_rate_hz as f64).round() as usize;
    (0..n).map(|i| amplitude * (2.0 * PI * freq_hz * i as f64 / sample_rate_hz as f64).sin()).collect()
}

/// Time-averaged feature-encoder latents of every probe sinusoid for one
/// checkpoint; reusable across audio segments.
#[derive(Clone, Debug)]
pub struct ProbeBank {
    pub config: ProbeConfig,
    pub frequencies_hz: Vec<f64>,
    pub latents: Vec<Vec<f64>>,
    pub sample_rate_hz: u32,
}

impl ProbeBank {
    pub fn build(ckpt: &ModelCheckpoint, config: &ProbeConfig, sample_rate_hz: u32) -> Result<Self> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        if config.f_hi_hz > nyquist || !(config.f_lo_hz > 0.0) || !(config.step_hz > 0.0) {
            return Err(SoaError::contract(format!(
                "probe grid {}..{} Hz step {} must be positive and below Nyquist {nyquist}",
                config.f_lo_hz, config.f_hi_hz, config.step_hz
            )));
        }
        let model = Model::new(&ckpt.config, &ckpt.params);
        let grid = config.grid();
        let latents = grid
            .iter()
            .map(|&f| model.mean_latent(&sinusoid(f, config.amplitude, config.duration_s, sample_rate_hz)))
            .collect::<Result<_>>()?;
        Ok(ProbeBank { config: config.clone(), frequencies_hz: grid, latents, sample_rate_hz })
    }

    /// Similarity curve of `segment` against every probe sinusoid.
    pub fn probe(&self, ckpt: &ModelCheckpoint, segment: &[f64], formants: Option<&[f64]>) -> Result<ProbeReport> {
        let model = Model::new(&ckpt.config, &ckpt.params);
        let target = model.mean_latent(segment)?;
        let similarities = self.latents.iter().map(|z| cosine_similarity(z, &target)).collect::<Result<Vec<_>>>()?;
        let peaks = find_peaks(&self.frequencies_hz, &similarities, self.config.min_prominence)?;
        Ok(ProbeReport {
            frequencies_hz: self.frequencies_hz.clone(),
            similarities,
            peaks,
            reference_formants_hz: formants.map(|f| f.to_vec()),
        })
    }
}

/// One-shot probe of `segment`; build a [`ProbeBank`] to probe many segments.
pub fn sinusoid_probe(
    ckpt: &ModelCheckpoint,
    segment: &[f64],
    config: &ProbeConfig,
    sample_rate_hz: u32,
) -> Result<ProbeReport> {
    ProbeBank::build(ckpt, config, sample_rate_hz)?.probe(ckpt, segment, None)
}

/// Upper-tail binomial probability `P(X ≥ k)` for `X ~ Bin(n, 1/2)`.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    let mut log_c = 0.0;
    let mut total = 0.0;
    for i in 0..=trials {
        if i > 0 {
            log_c += ((trials - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= wins {
            total += (log_c - trials as f64 * 2f64.ln()).exp();
        }
    }
    total.min(1.0)
}
