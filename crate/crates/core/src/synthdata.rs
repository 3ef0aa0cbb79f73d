//! Synthetic formant-based speech domains, SNR-controlled noise mixing and
//! corpus persistence.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::digest::{derive_seed, Fingerprint};
use crate::error::{Result, SoaError};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const SYMBOL_DURATION_S: f64 = 0.06;
pub const PEAK_AMPLITUDE: f64 = 0.5;
/// Level of the shaped noise floor added to every segment, in dB re. the segment.
pub const SEGMENT_NOISE_DB: f64 = -30.0;

/// Pseudo-phone inventory: adult vowel formant averages (Hz).
const VOWELS: [(&str, [f64; 3]); 8] = [
    ("iy", [270.0, 2290.0, 3010.0]),
    ("ih", [390.0, 1990.0, 2550.0]),
    ("eh", [530.0, 1840.0, 2480.0]),
    ("ae", [660.0, 1720.0, 2410.0]),
    ("aa", [730.0, 1090.0, 2440.0]),
    ("ao", [570.0, 840.0, 2410.0]),
    ("uh", [440.0, 1020.0, 2240.0]),
    ("uw", [300.0, 870.0, 2240.0]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub id: String,
    pub formants_hz: [f64; 3],
    pub amplitudes: [f64; 3],
    pub duration_s: f64,
}

impl SymbolSpec {
    pub fn new(id: &str, formants_hz: [f64; 3]) -> Self {
        SymbolSpec { id: id.to_string(), formants_hz, amplitudes: [1.0, 0.6, 0.3], duration_s: SYMBOL_DURATION_S }
    }
}

/// Generative description of one synthetic speech domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub sample_rate_hz: u32,
    pub symbols: Vec<SymbolSpec>,
    /// Multiplier applied to every formant of the inventory.
    pub formant_scale: f64,
    #[serde(default)]
    pub noise_snr_range_db: Option<[f64; 2]>,
    pub seed: u64,
}

impl DomainSpec {
    fn vowel_inventory() -> Vec<SymbolSpec> {
        VOWELS.iter().map(|(id, f)| SymbolSpec::new(id, *f)).collect()
    }

    /// Source ("adult") domain.
    pub fn source(seed: u64) -> Self {
        DomainSpec {
            name: "source".into(),
            sample_rate_hz: SAMPLE_RATE_HZ,
            symbols: Self::vowel_inventory(),
            formant_scale: 1.0,
            noise_snr_range_db: None,
            seed,
        }
    }

    /// Target ("child") domain: the source inventory with formants raised 30%.
    pub fn target(seed: u64) -> Self {
        DomainSpec { name: "target".into(), formant_scale: 1.3, ..Self::source(seed) }
    }

    /// Source speech mixed with noise at SNRs drawn from [0, 15] dB.
    pub fn noisy(seed: u64) -> Self {
        DomainSpec { name: "noisy".into(), noise_snr_range_db: Some([0.0, 15.0]), ..Self::source(seed) }
    }

    pub fn nyquist_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / 2.0
    }

    pub fn symbol_ids(&self) -> Vec<String> {
        self.symbols.iter().map(|s| s.id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SoaError::config(format!("domain `{}`", self.name), msg));
        if self.symbols.is_empty() {
            return bad("symbol inventory is empty".into());
        }
        if !(self.formant_scale > 0.0) {
            return bad(format!("formant_scale {} must be positive", self.formant_scale));
        }
        let nyq = self.nyquist_hz();
        for s in &self.symbols {
            let [f1, f2, f3] = s.formants_hz.map(|f| f * self.formant_scale);
            if !(0.0 < f1 && f1 < f2 && f2 < f3 && f3 < nyq) {
                return bad(format!(
                    "symbol `{}`: scaled formants ({f1}, {f2}, {f3}) must increase and stay below {nyq} Hz",
                    s.id
                ));
            }
            if !(s.duration_s > 0.0) {
                return bad(format!("symbol `{}`: duration must be positive", s.id));
            }
        }
        if let Some([lo, hi]) = self.noise_snr_range_db {
            if !(lo <= hi) {
                return bad(format!("noise SNR range [{lo}, {hi}] is inverted"));
            }
        }
        Ok(())
    }

    pub fn token(&self, id: &str) -> Result<usize> {
        self.symbols.iter().position(|s| s.id == id).ok_or_else(|| SoaError::Vocabulary(id.to_string()))
    }

    pub fn tokenize(&self, ids: &[&str]) -> Result<Vec<usize>> {
        ids.iter().map(|id| self.token(id)).collect()
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("domain spec serializes");
        crate::digest::sha256_hex(json.as_bytes())
    }
}

/// Renders `tokens` as concatenated damped-formant segments.
///
/// Each segment is the sum of three exponentially damped sinusoids at the
/// scaled formants plus a low-passed noise floor 30 dB below the segment.
/// The whole waveform is normalized to a peak of 0.5.
pub fn synth_utterance(spec: &DomainSpec, tokens: &[usize], seed: u64) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(SoaError::contract("cannot synthesize an empty token sequence"));
    }
    if let Some(t) = tokens.iter().find(|&&t| t >= spec.symbols.len()) {
        return Err(SoaError::Vocabulary(format!("token index {t}")));
    }
    let sr = spec.sample_rate_hz as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, seed));
    let mut wave = Vec::new();
    for &tok in tokens {
        let sym = &spec.symbols[tok];
        let n = (sym.duration_s * sr).round() as usize;
        let decay = 2.0 / sym.duration_s;
        let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let mut seg: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let env = (-decay * t).exp();
                (0..3)
                    .map(|k| {
                        let f = sym.formants_hz[k] * spec.formant_scale;
                        sym.amplitudes[k] * env * (2.0 * PI * f * t + phases[k]).sin()
                    })
                    .sum()
            })
            .collect();
        let p_seg = power(&seg);
        let mut state = 0.0;
        let mut floor: Vec<f64> = (0..n)
            .map(|_| {
                let w: f64 = rng.sample(StandardNormal);
                state = 0.7 * state + w;
                state
            })
            .collect();
        let p_floor = power(&floor);
        if p_floor > 0.0 && p_seg > 0.0 {
            let g = (p_seg * 10f64.powf(SEGMENT_NOISE_DB / 10.0) / p_floor).sqrt();
            floor.iter_mut().for_each(|v| *v *= g);
            seg.iter_mut().zip(&floor).for_each(|(s, f)| *s += f);
        }
        wave.extend(seg);
    }
    let peak = wave.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK_AMPLITUDE / peak;
        wave.iter_mut().for_each(|v| *v *= g);
    }
    Ok(wave)
}

/// Mean power of a signal.
pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// Gain applied to `noise` (truncated to the clean length) so that the
/// clean-to-noise power ratio equals `snr_db`.
pub fn noise_gain(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    if noise.len() < clean.len() {
        return Err(SoaError::DegenerateInput(format!(
            "noise has {} samples, clean needs {}",
            noise.len(),
            clean.len()
        )));
    }
    let p_clean = power(clean);
    let p_noise = power(&noise[..clean.len()]);
    if p_clean == 0.0 || p_noise == 0.0 {
        return Err(SoaError::DegenerateInput("clean and noise signals must have nonzero power".into()));
    }
    Ok((p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `clean + g·noise` with `g` from [`noise_gain`].
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    let g = noise_gain(clean, noise, snr_db)?;
    Ok(clean.iter().zip(noise).map(|(c, n)| c + g * n).collect())
}

/// `10·log10(P_clean / P_noise)`.
pub fn measured_snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(clean) / power(noise)).log10()
}

/// Fixed collection of coloured-noise clips used for noisy domains.
#[derive(Clone, Debug)]
pub struct NoiseBank {
    clips: Vec<Vec<f64>>,
}

impl NoiseBank {
    pub fn new(seed: u64, n_clips: usize, clip_len: usize, sample_rate_hz: u32) -> Self {
        let sr = sample_rate_hz as f64;
        let clips = (0..n_clips)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4E01_5E00 + c as u64));
                // Two-pole resonance at a random centre plus a low-passed bed.
                let centre = rng.random_range(150.0..6000.0);
                let r: f64 = rng.random_range(0.90..0.99);
                let (a1, a2) = (2.0 * r * (2.0 * PI * centre / sr).cos(), -r * r);
                let bed_mix = rng.random_range(0.2..1.0);
                let (mut y1, mut y2, mut lp) = (0.0, 0.0, 0.0);
                let mut clip: Vec<f64> = (0..clip_len)
                    .map(|_| {
                        let w: f64 = rng.sample(StandardNormal);
                        let y = w + a1 * y1 + a2 * y2;
                        y2 = y1;
                        y1 = y;
                        lp = 0.9 * lp + 0.1 * w;
                        y * (1.0 - r) + bed_mix * lp
                    })
                    .collect();
                let p = power(&clip).sqrt();
                clip.iter_mut().for_each(|v| *v /= p);
                clip
            })
            .collect();
        NoiseBank { clips }
    }

    pub fn for_domain(spec: &DomainSpec) -> Self {
        NoiseBank::new(spec.seed, 16, 2 * spec.sample_rate_hz as usize, spec.sample_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// `len` samples of clip `clip` starting at `offset`, wrapping around.
    pub fn excerpt(&self, clip: usize, offset: usize, len: usize) -> Vec<f64> {
        let c = &self.clips[clip % self.clips.len()];
        (0..len).map(|i| c[(offset + i) % c.len()]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7EA1,
            Split::Dev => 0xDE71,
            Split::Test => 0x7E57,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(SoaError::DataContract(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub waveform: Vec<f64>,
    pub transcript: Option<Vec<usize>>,
    /// Requested SNR when the utterance was mixed with noise.
    pub snr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub domain: String,
    pub split: Split,
    pub sample_rate_hz: u32,
    pub symbols: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.utterances.is_empty() && self.utterances.iter().all(|u| u.transcript.is_some())
    }

    pub fn is_unlabeled(&self) -> bool {
        self.utterances.iter().all(|u| u.transcript.is_none())
    }

    /// Copy without transcripts.
    pub fn unlabeled(&self) -> Corpus {
        Corpus {
            utterances: self.utterances.iter().map(|u| Utterance { transcript: None, ..u.clone() }).collect(),
            ..self.clone()
        }
    }

    /// The first `ceil(fraction · n)` utterances (at least one).
    pub fn subset(&self, fraction: f64) -> Corpus {
        let n = ((self.len() as f64 * fraction).ceil() as usize).clamp(1, self.len().max(1));
        Corpus { utterances: self.utterances[..n.min(self.len())].to_vec(), ..self.clone() }
    }

    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprint::new();
        fp.str(&self.domain).str(self.split.as_str()).u64(self.sample_rate_hz as u64);
        for u in &self.utterances {
            fp.f64s(&u.waveform);
            match &u.transcript {
                Some(t) => fp.f64s(&t.iter().map(|&x| x as f64).collect::<Vec<_>>()),
                None => fp.str("-"),
            };
        }
        fp.finish()
    }
}

/// Draws `n` utterances with uniform token sequences for the training split.
pub fn sample_corpus(
    spec: &DomainSpec,
    n_utterances: usize,
    len_range: (usize, usize),
    labeled: bool,
    seed: u64,
) -> Result<Corpus> {
    sample_split(spec, Split::Train, n_utterances, len_range, labeled, seed)
}

/// Like [`sample_corpus`] with a seed stream private to `split`.
pub fn sample_split(
    spec: &DomainSpec,
    split: Split,
    n_utterances: usize,
    len_range: (usize, usize),
    labeled: bool,
    seed: u64,
) -> Result<Corpus> {
    spec.validate()?;
    let (lo, hi) = len_range;
    if n_utterances == 0 || lo == 0 || lo > hi {
        return Err(SoaError::contract(format!(
            "corpus needs n >= 1 and 1 <= min <= max, got n={n_utterances}, range=({lo}, {hi})"
        )));
    }
    let stream = derive_seed(seed, split.stream());
    let bank = spec.noise_snr_range_db.map(|_| NoiseBank::for_domain(spec));
    let utterances = (0..n_utterances)
        .map(|i| {
            let utt_seed = derive_seed(stream, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
            let len = rng.random_range(lo..=hi);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.symbols.len())).collect();
            let mut waveform = synth_utterance(spec, &tokens, utt_seed)?;
            let mut snr_db = None;
            if let (Some([a, b]), Some(bank)) = (spec.noise_snr_range_db, &bank) {
                let snr = if a == b { a } else { rng.random_range(a..b) };
                let clip = rng.random_range(0..bank.len());
                let offset = rng.random_range(0..spec.sample_rate_hz as usize);
                let noise = bank.excerpt(clip, offset, waveform.len());
                waveform = mix_at_snr(&waveform, &noise, snr)?;
                snr_db = Some(snr);
            }
            Ok(Utterance { waveform, transcript: labeled.then_some(tokens), snr_db })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        domain: spec.name.clone(),
        split,
        sample_rate_hz: spec.sample_rate_hz,
        symbols: spec.symbol_ids(),
        utterances,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    transcript: String,
    domain: String,
    split: String,
    sample_rate_hz: u32,
}

/// Writes `manifest.csv`, `symbols.txt` and one raw little-endian `f32`
/// file per utterance under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("audio"))?;
    fs::write(dir.join("symbols.txt"), corpus.symbols.join("\n") + "\n")?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    for (i, u) in corpus.utterances.iter().enumerate() {
        let rel = format!("audio/{i:06}.f32");
        let mut f = BufWriter::new(fs::File::create(dir.join(&rel))?);
        for v in &u.waveform {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        f.flush()?;
        let transcript = u
            .transcript
            .as_ref()
            .map(|t| t.iter().map(|&k| corpus.symbols[k].as_str()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        w.serialize(ManifestRow {
            path: rel,
            transcript,
            domain: corpus.domain.clone(),
            split: corpus.split.as_str().into(),
            sample_rate_hz: corpus.sample_rate_hz,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let symbols: Vec<String> =
        fs::read_to_string(dir.join("symbols.txt"))?.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
    let mut rd = csv::Reader::from_path(dir.join("manifest.csv"))?;
    let mut utterances = Vec::new();
    let mut meta: Option<(String, Split, u32)> = None;
    for row in rd.deserialize() {
        let row: ManifestRow = row?;
        let bytes = fs::read(dir.join(&row.path))?;
        if bytes.len() % 4 != 0 {
            return Err(SoaError::DataContract(format!("{}: truncated sample", row.path)));
        }
        let waveform = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let transcript = if row.transcript.trim().is_empty() {
            None
        } else {
            Some(
                row.transcript
                    .split_whitespace()
                    .map(|t| symbols.iter().position(|s| s == t).ok_or_else(|| SoaError::Vocabulary(t.to_string())))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        if meta.is_none() {
            meta = Some((row.domain.clone(), Split::parse(&row.split)?, row.sample_rate_hz));
        }
        utterances.push(Utterance { waveform, transcript, snr_db: None });
    }
    let (domain, split, sample_rate_hz) =
        meta.ok_or_else(|| SoaError::DataContract(format!("{}: empty manifest", dir.display())))?;
    Ok(Corpus { domain, split, sample_rate_hz, symbols, utterances })
}
