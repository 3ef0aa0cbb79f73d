//! Experiment configuration, the end-to-end pipeline with M1/M2 caching,
//! and the command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::digest::{derive_seed, sha256_hex, Fingerprint};
use crate::error::{Result, SoaError};
use crate::eval::{evaluate, write_eval_csv, EvalReport, ProbeBank, ProbeConfig, ProbeReport};
use crate::model::{init_params, ModelConfig};
use crate::surgery::{combine, load_checkpoint, save_checkpoint, LineageEntry, ModelCheckpoint};
use crate::synthdata::{
    load_corpus, sample_split, save_corpus, synth_utterance, Corpus, DomainSpec, Split, SymbolSpec,
};
use crate::training::{estimate_flops, run_stage, write_log, StageConfig, StageOutcome};

/// Environment variable naming the default output root.
pub const RUN_ROOT_ENV: &str = "SOA_RUN_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Share of the target training corpus used for continual pretraining.
    pub target_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_utterances: 400, test_utterances: 50, min_tokens: 4, max_tokens: 12, target_fraction: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub data: DataConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub continual: StageConfig,
    pub probe: ProbeConfig,
    /// Formants of the vowel probed after training.
    pub probe_formants_hz: [f64; 3],
    /// Throughput assumed for FLOPs estimates, in TFLOPS.
    pub device_tflops: f64,
}

impl ExperimentConfig {
    pub fn toy(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            model: ModelConfig::toy(),
            source: DomainSpec::source(seed),
            target: DomainSpec::target(seed),
            data: DataConfig::default(),
            pretrain: StageConfig::pretrain(2000, seed),
            finetune: StageConfig::finetune(1000, seed),
            continual: StageConfig::continual(500, seed),
            probe: ProbeConfig::default(),
            probe_formants_hz: [568.0, 1559.0, 2944.0],
            device_tflops: 0.05,
        }
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.source.seed = seed;
        self.target.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.continual.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.source.validate()?;
        self.target.validate()?;
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                SoaError::Config { path, msg } => SoaError::config(format!("{section}.{path}"), msg),
                other => other,
            })
        };
        wrap("pretrain", self.pretrain.validate())?;
        wrap("finetune", self.finetune.validate())?;
        wrap("continual", self.continual.validate())?;
        let d = &self.data;
        if d.train_utterances == 0 || d.test_utterances == 0 {
            return Err(SoaError::config("data", "utterance counts must be positive"));
        }
        if d.min_tokens == 0 || d.min_tokens > d.max_tokens {
            return Err(SoaError::config("data", "need 1 <= min_tokens <= max_tokens"));
        }
        if !(d.target_fraction > 0.0 && d.target_fraction <= 1.0) {
            return Err(SoaError::config("data.target_fraction", "must lie in (0, 1]"));
        }
        if self.source.symbols != self.target.symbols {
            return Err(SoaError::config("target.symbols", "must match the source inventory"));
        }
        if self.model.vocab_size != self.source.symbols.len() {
            return Err(SoaError::config("model.vocab_size", "must equal the number of symbols"));
        }
        if !(self.device_tflops >= 0.0) {
            return Err(SoaError::config("device_tflops", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SoaError::config(path.display().to_string(), e.to_string()))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| SoaError::config(format!("{}:{}:{}", path.display(), e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn digest_of(parts: &[String]) -> String {
        let mut fp = Fingerprint::new();
        for p in parts {
            fp.str(p);
        }
        fp.finish()
    }

    fn json<T: Serialize>(v: &T) -> String {
        serde_json::to_string(v).expect("config serializes")
    }

    /// Cache key of the pretrained model.
    pub fn m1_key(&self) -> String {
        Self::digest_of(&[
            "M1".into(),
            self.seed.to_string(),
            Self::json(&self.model),
            Self::json(&self.source),
            Self::json(&self.data_without_target()),
            Self::json(&self.pretrain),
        ])
    }

    /// Cache key of the source-finetuned model.
    pub fn m2_key(&self) -> String {
        Self::digest_of(&["M2".into(), self.m1_key(), Self::json(&self.finetune)])
    }

    fn data_without_target(&self) -> DataConfig {
        DataConfig { target_fraction: 1.0, ..self.data.clone() }
    }

    pub fn digest(&self) -> String {
        sha256_hex(Self::json(self).as_bytes())
    }
}

/// Corpora used by one experiment.
pub struct Corpora {
    pub source_train: Corpus,
    pub source_test: Corpus,
    pub target_train: Corpus,
    pub target_test: Corpus,
}

impl Corpora {
    pub fn synthesize(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.data;
        let range = (d.min_tokens, d.max_tokens);
        let split = |spec: &DomainSpec, split: Split, n: usize, labeled: bool| {
            sample_split(spec, split, n, range, labeled, spec.seed)
        };
        Ok(Corpora {
            source_train: split(&cfg.source, Split::Train, d.train_utterances, true)?,
            source_test: split(&cfg.source, Split::Test, d.test_utterances, true)?,
            target_train: split(&cfg.target, Split::Train, d.train_utterances, false)?.subset(d.target_fraction),
            target_test: split(&cfg.target, Split::Test, d.test_utterances, true)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, c) in self.named() {
            save_corpus(c, &dir.join(name))?;
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, &Corpus); 4] {
        [
            ("source_train", &self.source_train),
            ("source_test", &self.source_test),
            ("target_train", &self.target_train),
            ("target_test", &self.target_test),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub label: String,
    pub steps_run: usize,
    pub cached: bool,
    pub skipped_utterances: usize,
    pub wall_seconds: f64,
    pub estimated_flops: f64,
    pub checkpoint_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerTable {
    pub m2_source: f64,
    pub m2_target: f64,
    pub m4_source: f64,
    pub m4_target: f64,
}

impl WerTable {
    pub fn source_delta(&self) -> f64 {
        self.m4_source - self.m2_source
    }

    pub fn target_delta(&self) -> f64 {
        self.m4_target - self.m2_target
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_digest: String,
    pub seed: u64,
    pub wer: WerTable,
    pub source_delta: f64,
    pub target_delta: f64,
    pub stages: Vec<StageSummary>,
    pub evaluations: Vec<EvalReport>,
    pub probe_peaks_hz: Vec<(String, Vec<f64>)>,
}

/// Checkpoints produced by [`run_pipeline`].
pub struct PipelineArtifacts {
    pub m1: ModelCheckpoint,
    pub m2: ModelCheckpoint,
    pub m3: ModelCheckpoint,
    pub m4: ModelCheckpoint,
    pub corpora: Corpora,
    pub report: PipelineReport,
}

fn stage_err(stage: &str) -> impl Fn(SoaError) -> SoaError + '_ {
    move |e| SoaError::Stage { stage: stage.to_string(), source: Box::new(e) }
}

const CACHE_KEY_FILE: &str = "cache_key.txt";

fn load_cached(dir: &Path, key: &str) -> Option<ModelCheckpoint> {
    let stored = fs::read_to_string(dir.join(CACHE_KEY_FILE)).ok()?;
    if stored.trim() != key {
        return None;
    }
    load_checkpoint(dir).ok()
}

fn store_cached(dir: &Path, key: &str, ckpt: &ModelCheckpoint) -> Result<()> {
    save_checkpoint(ckpt, dir)?;
    fs::write(dir.join(CACHE_KEY_FILE), key)?;
    Ok(())
}

fn summary(name: &str, outcome: Option<&StageOutcome>, ckpt: &ModelCheckpoint, tflops: f64) -> Result<StageSummary> {
    let (steps, skipped, wall) = outcome.map_or((0, 0, 0.0), |o| (o.log.len(), o.skipped, o.wall_seconds));
    Ok(StageSummary {
        name: name.into(),
        label: ckpt.label().unwrap_or("").into(),
        steps_run: steps,
        cached: outcome.is_none(),
        skipped_utterances: skipped,
        wall_seconds: wall,
        estimated_flops: estimate_flops(wall, 1, tflops)?,
        checkpoint_digest: ckpt.digest(),
    })
}

fn initial_checkpoint(cfg: &ExperimentConfig) -> Result<ModelCheckpoint> {
    let params = init_params(&cfg.model, derive_seed(cfg.seed, 0x1417))?;
    ModelCheckpoint::new(
        cfg.model.clone(),
        params,
        vec![LineageEntry {
            stage: "init".into(),
            label: Some("M0".into()),
            data_fingerprint: None,
            steps: 0,
            parents: vec![],
        }],
    )
}

/// Runs (or reuses) one cached stage and writes its log under `out`.
fn cached_stage(
    name: &str,
    key: &str,
    cache_dir: &Path,
    out: &Path,
    cfg: &ExperimentConfig,
    run: impl FnOnce() -> Result<StageOutcome>,
) -> Result<(ModelCheckpoint, StageSummary)> {
    let dir = cache_dir.join(format!("{name}-{}", &key[..16]));
    if let Some(ckpt) = load_cached(&dir, key) {
        write_log(&[], &out.join(format!("{name}_log.csv")))?;
        let s = summary(name, None, &ckpt, cfg.device_tflops)?;
        return Ok((ckpt, s));
    }
    let outcome = run().map_err(stage_err(name))?;
    outcome.write_log(&out.join(format!("{name}_log.csv")))?;
    store_cached(&dir, key, &outcome.checkpoint)?;
    let s = summary(name, Some(&outcome), &outcome.checkpoint, cfg.device_tflops)?;
    Ok((outcome.checkpoint, s))
}

/// Synthesizes the probe vowel for `formants` at the source sample rate.
pub fn probe_vowel(cfg: &ExperimentConfig, formants: [f64; 3], seed: u64) -> Result<Vec<f64>> {
    let spec = DomainSpec {
        name: "probe".into(),
        symbols: vec![SymbolSpec::new("probe", formants)],
        formant_scale: 1.0,
        noise_snr_range_db: None,
        ..cfg.source.clone()
    };
    synth_utterance(&spec, &[0], seed)
}

/// Synthesize, pretrain (M1), finetune (M2), continually pretrain (M3),
/// combine (M4), evaluate M2 and M4 on both domains and probe them.
///
/// M1 and M2 are cached under `cache_dir` by configuration digest.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path, cache_dir: &Path) -> Result<PipelineArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::create_dir_all(cache_dir)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let corpora = Corpora::synthesize(cfg).map_err(stage_err("synth"))?;

    let source_unlabeled = corpora.source_train.unlabeled();
    let (m1, s1) = cached_stage("pretrain", &cfg.m1_key(), cache_dir, out, cfg, || {
        run_stage(&cfg.pretrain, &initial_checkpoint(cfg)?, std::slice::from_ref(&source_unlabeled))
    })?;
    let (m2, s2) = cached_stage("finetune", &cfg.m2_key(), cache_dir, out, cfg, || {
        run_stage(&cfg.finetune, &m1, std::slice::from_ref(&corpora.source_train))
    })?;
    let o3 = run_stage(&cfg.continual, &m1, &[source_unlabeled, corpora.target_train.clone()])
        .map_err(stage_err("continual_pretrain"))?;
    o3.write_log(&out.join("continual_pretrain_log.csv"))?;
    let s3 = summary("continual_pretrain", Some(&o3), &o3.checkpoint, cfg.device_tflops)?;
    let m3 = o3.checkpoint;
    let mut m4 = combine(&m3, &m2).map_err(stage_err("combine"))?;
    if let Some(last) = m4.lineage.last_mut() {
        last.label = Some("M4".into());
    }
    let s4 = summary("combine", None, &m4, cfg.device_tflops)?;

    let ckpt_dir = out.join("checkpoints");
    for (name, c) in [("M1", &m1), ("M2", &m2), ("M3", &m3), ("M4", &m4)] {
        save_checkpoint(c, &ckpt_dir.join(name))?;
    }

    let ev = |c: &ModelCheckpoint, corpus: &Corpus| evaluate(c, corpus).map_err(stage_err("eval"));
    let evaluations = vec![
        ev(&m2, &corpora.source_test)?,
        ev(&m2, &corpora.target_test)?,
        ev(&m4, &corpora.source_test)?,
        ev(&m4, &corpora.target_test)?,
    ];
    write_eval_csv(&evaluations, &out.join("wer.csv"))?;
    let wer = WerTable {
        m2_source: evaluations[0].wer,
        m2_target: evaluations[1].wer,
        m4_source: evaluations[2].wer,
        m4_target: evaluations[3].wer,
    };

    let segment = probe_vowel(cfg, cfg.probe_formants_hz, cfg.seed)?;
    let mut probe_peaks_hz = Vec::new();
    for (name, c) in [("M2", &m2), ("M4", &m4)] {
        let report = probe_report(c, cfg, &segment).map_err(stage_err("probe"))?;
        report.write_csv(&out.join(format!("probe_{name}.csv")))?;
        probe_peaks_hz.push((name.to_string(), report.dominant_peaks(3).iter().map(|p| p.frequency_hz).collect()));
    }

    let report = PipelineReport {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        source_delta: wer.source_delta(),
        target_delta: wer.target_delta(),
        wer,
        stages: vec![s1, s2, s3, s4],
        evaluations,
        probe_peaks_hz,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(PipelineArtifacts { m1, m2, m3, m4, corpora, report })
}

fn probe_report(ckpt: &ModelCheckpoint, cfg: &ExperimentConfig, segment: &[f64]) -> Result<ProbeReport> {
    let bank = ProbeBank::build(ckpt, &cfg.probe, cfg.source.sample_rate_hz)?;
    bank.probe(ckpt, segment, Some(&cfg.probe_formants_hz))
}

#[derive(Parser, Debug)]
#[command(name = "soa", version, about = "Speech-only adaptation on synthetic formant speech")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment configuration (JSON); defaults to the built-in toy config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the step budget of the stage being run.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `$SOA_RUN_ROOT/<command>` or `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize source and target corpora.
    Synth(Common),
    /// Pretrain M1 on unlabeled source audio.
    Pretrain(Common),
    /// Finetune with CTC on labeled source audio (feature encoder frozen).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: PathBuf,
    },
    /// Continually pretrain on source and target audio (contextual encoder frozen).
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: PathBuf,
    },
    /// Pair one checkpoint's feature encoder with another's contextual encoder and CTC head.
    Combine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        phi: PathBuf,
    },
    /// Word error rate of a checkpoint on a synthesized or saved test corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `source` or `target`, or a saved corpus directory.
        #[arg(long, default_value = "target")]
        corpus: String,
    },
    /// Sinusoid probe of a checkpoint's feature encoder on a synthesized vowel.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated formants in Hz.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        formants: Option<Vec<f64>>,
    },
    /// FLOPs implied by wall time, device count and device throughput.
    Flops {
        #[arg(long)]
        seconds: f64,
        #[arg(long, default_value_t = 1)]
        devices: usize,
        #[arg(long)]
        tflops: f64,
    },
    /// Full pipeline: synth, M1, M2, M3, M4, evaluation and probe.
    Pipeline(Common),
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::toy(0),
        };
        if let Some(s) = self.seed {
            cfg.reseed(s);
        }
        Ok(cfg)
    }

    fn out_dir(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| run_root().join(command))
    }
}

fn write_stage(out: &Path, name: &str, outcome: &StageOutcome) -> Result<String> {
    fs::create_dir_all(out)?;
    outcome.write_log(&out.join(format!("{name}_log.csv")))?;
    save_checkpoint(&outcome.checkpoint, &out.join("checkpoint"))?;
    Ok(format!(
        "{name}: {} steps, final loss {:.4}, checkpoint {}",
        outcome.log.len(),
        outcome.log.last().map_or(f64::NAN, |r| r.loss),
        out.join("checkpoint").display()
    ))
}

fn resolve_corpus(cfg: &ExperimentConfig, which: &str) -> Result<Corpus> {
    let d = &cfg.data;
    let range = (d.min_tokens, d.max_tokens);
    match which {
        "source" => sample_split(&cfg.source, Split::Test, d.test_utterances, range, true, cfg.source.seed),
        "target" => sample_split(&cfg.target, Split::Test, d.test_utterances, range, true, cfg.target.seed),
        path => load_corpus(Path::new(path)),
    }
}

/// Executes one CLI command and returns the summary line.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.experiment()?;
            cfg.validate()?;
            let out = c.out_dir("synth");
            Corpora::synthesize(&cfg)?.save(&out)?;
            Ok(format!("corpora written to {}", out.display()))
        }
        Command::Pretrain(c) => {
            let cfg = c.experiment()?;
            cfg.validate()?;
            let mut stage = cfg.pretrain.clone();
            stage.steps = c.steps.unwrap_or(stage.steps);
            let corpora = Corpora::synthesize(&cfg)?;
            let o = run_stage(&stage, &initial_checkpoint(&cfg)?, &[corpora.source_train.unlabeled()])
                .map_err(stage_err("pretrain"))?;
            write_stage(&c.out_dir("pretrain"), "pretrain", &o)
        }
        Command::Finetune { common: c, init } => {
            let cfg = c.experiment()?;
            cfg.validate()?;
            let mut stage = cfg.finetune.clone();
            stage.steps = c.steps.unwrap_or(stage.steps);
            let start = load_checkpoint(&init)?;
            let corpora = Corpora::synthesize(&cfg)?;
            let o = run_stage(&stage, &start, &[corpora.source_train]).map_err(stage_err("finetune"))?;
            write_stage(&c.out_dir("finetune"), "finetune", &o)
        }
        Command::Adapt { common: c, init } => {
            let cfg = c.experiment()?;
            cfg.validate()?;
            let mut stage = cfg.continual.clone();
            stage.steps = c.steps.unwrap_or(stage.steps);
            let start = load_checkpoint(&init)?;
            let corpora = Corpora::synthesize(&cfg)?;
            let o = run_stage(&stage, &start, &[corpora.source_train.unlabeled(), corpora.target_train])
                .map_err(stage_err("continual_pretrain"))?;
            write_stage(&c.out_dir("adapt"), "continual_pretrain", &o)
        }
        Command::Combine { common: c, theta, phi } => {
            let m = combine(&load_checkpoint(&theta)?, &load_checkpoint(&phi)?)?;
            let out = c.out_dir("combine");
            save_checkpoint(&m, &out)?;
            Ok(format!("combined checkpoint {} written to {}", &m.digest()[..16], out.display()))
        }
        Command::Eval { common: c, checkpoint, corpus } => {
            let cfg = c.experiment()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let corpus = resolve_corpus(&cfg, &corpus)?;
            let report = evaluate(&ckpt, &corpus)?;
            let out = c.out_dir("eval");
            fs::create_dir_all(&out)?;
            write_eval_csv(std::slice::from_ref(&report), &out.join("wer.csv"))?;
            Ok(format!(
                "{} {} WER {:.4} (S={} I={} D={}, {} words)",
                report.domain,
                report.split,
                report.wer,
                report.substitutions,
                report.insertions,
                report.deletions,
                report.reference_words
            ))
        }
        Command::Probe { common: c, checkpoint, formants } => {
            let cfg = c.experiment()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let f = match formants.as_deref() {
                Some(&[a, b, c]) => [a, b, c],
                _ => cfg.probe_formants_hz,
            };
            let segment = probe_vowel(&cfg, f, cfg.seed)?;
            let bank = ProbeBank::build(&ckpt, &cfg.probe, cfg.source.sample_rate_hz)?;
            let report = bank.probe(&ckpt, &segment, Some(&f))?;
            let out = c.out_dir("probe");
            fs::create_dir_all(&out)?;
            report.write_csv(&out.join("probe.csv"))?;
            let peaks: Vec<String> =
                report.dominant_peaks(3).iter().map(|p| format!("{:.0}", p.frequency_hz)).collect();
            Ok(format!("probe peaks at [{}] Hz for formants {:?}", peaks.join(", "), f))
        }
        Command::Flops { seconds, devices, tflops } => {
            let f = estimate_flops(seconds, devices, tflops)?;
            Ok(format!("{f:.4e} FLOPs"))
        }
        Command::Pipeline(c) => {
            let mut cfg = c.experiment()?;
            if let Some(s) = c.steps {
                cfg.continual.steps = s;
            }
            let out = c.out_dir("pipeline");
            let cache = run_root().join("cache");
            let a = run_pipeline(&cfg, &out, &cache)?;
            let w = &a.report.wer;
            Ok(format!(
                "WER source M2 {:.4} M4 {:.4} (delta {:+.4}); target M2 {:.4} M4 {:.4} (delta {:+.4}); report {}",
                w.m2_source,
                w.m4_source,
                w.source_delta(),
                w.m2_target,
                w.m4_target,
                w.target_delta(),
                out.join("report.json").display()
            ))
        }
    }
}
