//! Miniature wav2vec-style network: convolutional feature encoder,
//! transformer contextual encoder, Gumbel-softmax quantizer and heads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvOptions, Graph, Tensor, Var};
use crate::digest::{derive_seed, sha256_hex};
use crate::error::{Result, SoaError};

/// Named parameters; names carry a component prefix.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    FeatureEncoder,
    ContextualEncoder,
    Quantizer,
    CtcHead,
}

impl Component {
    pub const ALL: [Component; 4] =
        [Component::FeatureEncoder, Component::ContextualEncoder, Component::Quantizer, Component::CtcHead];

    pub fn name(self) -> &'static str {
        match self {
            Component::FeatureEncoder => "feature_encoder",
            Component::ContextualEncoder => "contextual_encoder",
            Component::Quantizer => "quantizer",
            Component::CtcHead => "ctc_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| SoaError::contract(format!("unknown component `{s}`")))
    }

    /// Component owning a parameter name, if its prefix is recognised.
    pub fn of(param: &str) -> Option<Self> {
        let prefix = param.split('.').next()?;
        Component::ALL.into_iter().find(|c| c.name() == prefix)
    }

    pub fn owns(self, param: &str) -> bool {
        Component::of(param) == Some(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_layers: Vec<ConvLayer>,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub codebook_groups: usize,
    pub codebook_entries: usize,
    pub codevector_dim: usize,
    pub final_dim: usize,
    /// Output symbols, excluding the CTC blank.
    pub vocab_size: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Default desk-scale model: 10 ms hop, width 64, two blocks of two heads,
    /// two codebooks of 20 entries.
    pub fn toy() -> Self {
        ModelConfig {
            conv_layers: vec![
                ConvLayer { channels: 32, kernel: 64, stride: 8 },
                ConvLayer { channels: 32, kernel: 8, stride: 4 },
                ConvLayer { channels: 64, kernel: 8, stride: 5 },
            ],
            model_dim: 64,
            num_blocks: 2,
            num_heads: 2,
            ffn_dim: 128,
            pos_conv_kernel: 15,
            pos_conv_groups: 4,
            codebook_groups: 2,
            codebook_entries: 20,
            codevector_dim: 64,
            final_dim: 64,
            vocab_size: 8,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(SoaError::config("model", msg));
        if self.conv_layers.is_empty() {
            return bad("at least one conv layer is required");
        }
        if self.conv_layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return bad("conv layers need positive channels, kernel and stride");
        }
        if self.conv_layers.last().map(|l| l.channels) != Some(self.model_dim) {
            return bad("last conv layer width must equal model_dim");
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad("num_heads must divide model_dim");
        }
        if self.pos_conv_kernel.is_multiple_of(2) {
            return bad("pos_conv_kernel must be odd");
        }
        if self.pos_conv_groups == 0 || !self.model_dim.is_multiple_of(self.pos_conv_groups) {
            return bad("pos_conv_groups must divide model_dim");
        }
        if self.codebook_groups == 0
            || self.codebook_entries == 0
            || !self.codevector_dim.is_multiple_of(self.codebook_groups)
        {
            return bad("codebook_groups must divide codevector_dim");
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.final_dim == 0 {
            return bad("vocab_size, ffn_dim and final_dim must be positive");
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.conv_layers.iter().map(|l| l.stride).product()
    }

    /// Input samples seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.conv_layers {
            rf += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        rf
    }

    /// Frames produced by the feature encoder for `input_samples` samples.
    pub fn output_lengths(&self, input_samples: usize) -> Result<usize> {
        let rf = self.receptive_field();
        if input_samples < rf {
            return Err(SoaError::InputTooShort { what: "waveform", len: input_samples, min: rf });
        }
        let mut len = input_samples;
        for l in &self.conv_layers {
            len = (len - l.kernel) / l.stride + 1;
        }
        Ok(len)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Rounds every value to the nearest `f32`, the checkpoint storage precision.
pub fn round_to_storage(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

fn insert_norm(p: &mut ParamMap, name: &str, width: usize) {
    p.insert(format!("{name}.gamma"), Tensor::filled(&[width], 1.0));
    p.insert(format!("{name}.beta"), Tensor::zeros(&[width]));
}

fn insert_linear(p: &mut ParamMap, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) {
    let std = (1.0 / fan_in as f64).sqrt();
    p.insert(format!("{name}.weight"), normal(&[fan_in, fan_out], std, rng));
    if bias {
        p.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }
}

/// Freshly initialised feature encoder, contextual encoder and quantizer.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamMap> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1417));
    let mut p = ParamMap::new();
    let d = cfg.model_dim;

    let mut c_in = 1;
    for (i, l) in cfg.conv_layers.iter().enumerate() {
        let std = (2.0 / (c_in * l.kernel) as f64).sqrt();
        p.insert(format!("feature_encoder.conv{i}.weight"), normal(&[l.channels, c_in, l.kernel], std, &mut rng));
        p.insert(format!("feature_encoder.conv{i}.bias"), Tensor::zeros(&[l.channels]));
        insert_norm(&mut p, &format!("feature_encoder.norm{i}"), l.channels);
        c_in = l.channels;
    }
    insert_norm(&mut p, "feature_encoder.out_norm", d);

    p.insert("contextual_encoder.mask_emb".into(), uniform(&[d], 0.0, 1.0, &mut rng));
    let cg = d / cfg.pos_conv_groups;
    let pos_std = (4.0 / (cfg.pos_conv_kernel * d) as f64).sqrt();
    p.insert("contextual_encoder.pos_conv.weight".into(), normal(&[d, cg, cfg.pos_conv_kernel], pos_std, &mut rng));
    p.insert("contextual_encoder.pos_conv.bias".into(), Tensor::zeros(&[d]));
    insert_norm(&mut p, "contextual_encoder.input_norm", d);
    for b in 0..cfg.num_blocks {
        let pre = format!("contextual_encoder.block{b}");
        insert_linear(&mut p, &format!("{pre}.attn.q"), d, d, true, &mut rng);
        // Key bias cancels inside the softmax, so it is omitted.
        insert_linear(&mut p, &format!("{pre}.attn.k"), d, d, false, &mut rng);
        insert_linear(&mut p, &format!("{pre}.attn.v"), d, d, true, &mut rng);
        insert_linear(&mut p, &format!("{pre}.attn.o"), d, d, true, &mut rng);
        insert_norm(&mut p, &format!("{pre}.attn_norm"), d);
        insert_linear(&mut p, &format!("{pre}.ffn.fc1"), d, cfg.ffn_dim, true, &mut rng);
        insert_linear(&mut p, &format!("{pre}.ffn.fc2"), cfg.ffn_dim, d, true, &mut rng);
        insert_norm(&mut p, &format!("{pre}.ffn_norm"), d);
    }

    let gv = cfg.codebook_groups * cfg.codebook_entries;
    p.insert("quantizer.logits.weight".into(), normal(&[d, gv], 1.0, &mut rng));
    p.insert("quantizer.logits.bias".into(), Tensor::zeros(&[gv]));
    p.insert(
        "quantizer.codebook".into(),
        uniform(
            &[cfg.codebook_groups, cfg.codebook_entries, cfg.codevector_dim / cfg.codebook_groups],
            0.0,
            1.0,
            &mut rng,
        ),
    );
    insert_linear(&mut p, "quantizer.project_q", cfg.codevector_dim, cfg.final_dim, true, &mut rng);
    insert_linear(&mut p, "quantizer.final_proj", d, cfg.final_dim, true, &mut rng);

    p.values_mut().for_each(round_to_storage);
    Ok(p)
}

/// Freshly initialised CTC output projection (vocabulary plus blank).
pub fn init_ctc_head(cfg: &ModelConfig, seed: u64) -> ParamMap {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xC7C));
    let mut p = ParamMap::new();
    insert_linear(&mut p, "ctc_head", cfg.model_dim, cfg.vocab_size + 1, true, &mut rng);
    p.values_mut().for_each(round_to_storage);
    p
}

/// Parameters registered as graph leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every parameter; those for which `trainable` holds track gradients.
    pub fn bind(g: &mut Graph, params: &ParamMap, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params.iter().map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable(k)))).collect();
        Bound { vars }
    }

    /// Wraps leaves the caller already registered, e.g. for gradient checks.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| SoaError::contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let y = g.matmul(x, self.get(&format!("{name}.weight"))?)?;
        match self.vars.get(&format!("{name}.bias")) {
            Some(&b) => g.add_row(y, b),
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str, eps: f64) -> Result<Var> {
        let gamma = self.get(&format!("{name}.gamma"))?;
        let beta = self.get(&format!("{name}.beta"))?;
        g.layer_norm(x, gamma, beta, eps)
    }
}

/// Waveform to latent frames `T × model_dim`.
pub fn feature_encode(g: &mut Graph, cfg: &ModelConfig, b: &Bound, waveform: &[f64]) -> Result<Var> {
    cfg.output_lengths(waveform.len())?;
    let mut x = g.constant(Tensor::new(vec![1, waveform.len()], waveform.to_vec())?);
    let n = cfg.conv_layers.len();
    for (i, l) in cfg.conv_layers.iter().enumerate() {
        let w = b.get(&format!("feature_encoder.conv{i}.weight"))?;
        let bias = b.get(&format!("feature_encoder.conv{i}.bias"))?;
        let y = g.conv1d_ext(x, w, Some(bias), ConvOptions { stride: l.stride, ..ConvOptions::default() })?;
        let yt = g.transpose(y)?;
        let yn = b.norm(g, yt, &format!("feature_encoder.norm{i}"), cfg.norm_eps)?;
        let ya = g.gelu(yn);
        x = if i + 1 < n { g.transpose(ya)? } else { ya };
    }
    b.norm(g, x, "feature_encoder.out_norm", cfg.norm_eps)
}

fn attention(g: &mut Graph, cfg: &ModelConfig, b: &Bound, x: Var, pre: &str) -> Result<Var> {
    let q = b.linear(g, x, &format!("{pre}.attn.q"))?;
    let k = b.linear(g, x, &format!("{pre}.attn.k"))?;
    let v = b.linear(g, x, &format!("{pre}.attn.v"))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s, 1)?;
        heads.push(g.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    b.linear(g, cat, &format!("{pre}.attn.o"))
}

/// Latents with masked rows replaced by the mask embedding, through the
/// positional convolution and the transformer blocks.
pub fn context_encode(g: &mut Graph, cfg: &ModelConfig, b: &Bound, latents: Var, mask: &[bool]) -> Result<Var> {
    let x = if mask.iter().any(|m| *m) {
        g.mask_rows(latents, b.get("contextual_encoder.mask_emb")?, mask)?
    } else {
        let rows = g.shape(latents).first().copied().unwrap_or(0);
        if mask.len() != rows {
            return Err(SoaError::contract(format!("mask length {} does not match {rows} frames", mask.len())));
        }
        latents
    };
    let xt = g.transpose(x)?;
    let pos = g.conv1d_ext(
        xt,
        b.get("contextual_encoder.pos_conv.weight")?,
        Some(b.get("contextual_encoder.pos_conv.bias")?),
        ConvOptions { stride: 1, padding: cfg.pos_conv_kernel / 2, groups: cfg.pos_conv_groups },
    )?;
    let pos = g.gelu(pos);
    let pos = g.transpose(pos)?;
    let x = g.add(x, pos)?;
    let mut x = b.norm(g, x, "contextual_encoder.input_norm", cfg.norm_eps)?;
    for blk in 0..cfg.num_blocks {
        let pre = format!("contextual_encoder.block{blk}");
        let a = attention(g, cfg, b, x, &pre)?;
        let r = g.add(x, a)?;
        x = b.norm(g, r, &format!("{pre}.attn_norm"), cfg.norm_eps)?;
        let h = b.linear(g, x, &format!("{pre}.ffn.fc1"))?;
        let h = g.gelu(h);
        let f = b.linear(g, h, &format!("{pre}.ffn.fc2"))?;
        let r = g.add(x, f)?;
        x = b.norm(g, r, &format!("{pre}.ffn_norm"), cfg.norm_eps)?;
    }
    Ok(x)
}

/// Gumbel-softmax product quantizer.
///
/// Returns the quantized vectors (`T × codevector_dim`) and the per-group
/// code probabilities averaged over time (`G × V`, computed without noise).
pub fn quantize(
    g: &mut Graph,
    cfg: &ModelConfig,
    b: &Bound,
    latents: Var,
    temperature: f64,
    hard: bool,
    gumbel_noise: Option<&Tensor>,
) -> Result<(Var, Var)> {
    if !(temperature > 0.0) {
        return Err(SoaError::contract(format!("temperature {temperature} must be positive")));
    }
    let (gr, v) = (cfg.codebook_groups, cfg.codebook_entries);
    let t = g.shape(latents)[0];
    let logits = b.linear(g, latents, "quantizer.logits")?;
    let noisy = match gumbel_noise {
        Some(n) => {
            if n.shape() != [t, gr * v] {
                return Err(SoaError::contract("gumbel noise must be T × (G·V)"));
            }
            let c = g.constant(n.clone());
            g.add(logits, c)?
        }
        None => logits,
    };
    let scaled = g.scale(noisy, 1.0 / temperature);
    let r = g.reshape(scaled, &[t, gr, v])?;
    let p = g.softmax(r, 2)?;
    let p = g.reshape(p, &[t, gr * v])?;
    let sel = if hard { g.straight_through(p, v)? } else { p };

    let cb = g.reshape(b.get("quantizer.codebook")?, &[gr * v, cfg.codevector_dim / gr])?;
    let mut parts = Vec::with_capacity(gr);
    for grp in 0..gr {
        let sg = g.slice_cols(sel, grp * v, (grp + 1) * v)?;
        let rows: Vec<usize> = (grp * v..(grp + 1) * v).collect();
        let cbg = g.gather_rows(cb, &rows)?;
        parts.push(g.matmul(sg, cbg)?);
    }
    let q = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };

    let r = g.reshape(logits, &[t, gr, v])?;
    let p = g.softmax(r, 2)?;
    let p = g.reshape(p, &[t, gr * v])?;
    let avg = g.mean_axis(p, 0)?;
    let avg = g.reshape(avg, &[gr, v])?;
    Ok((q, avg))
}

/// Gumbel(0, 1) samples shaped `T × (G·V)`.
pub fn sample_gumbel(cfg: &ModelConfig, frames: usize, rng: &mut impl Rng) -> Tensor {
    let n = frames * cfg.codebook_groups * cfg.codebook_entries;
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(1e-12..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(vec![frames, cfg.codebook_groups * cfg.codebook_entries], data).expect("shape")
}

/// Context vectors projected into the contrastive space.
pub fn project_contexts(g: &mut Graph, b: &Bound, contexts: Var) -> Result<Var> {
    b.linear(g, contexts, "quantizer.final_proj")
}

/// Quantized vectors projected into the contrastive space.
pub fn project_targets(g: &mut Graph, b: &Bound, quantized: Var) -> Result<Var> {
    b.linear(g, quantized, "quantizer.project_q")
}

/// Frame log-probabilities over blank plus vocabulary.
pub fn ctc_log_probs(g: &mut Graph, b: &Bound, contexts: Var) -> Result<Var> {
    let logits = b.linear(g, contexts, "ctc_head")?;
    g.log_softmax(logits, 1)
}

/// Convenience inference wrappers over a parameter map.
pub struct Model<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamMap,
}

impl<'a> Model<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamMap) -> Self {
        Model { config, params }
    }

    fn bound(&self, g: &mut Graph) -> Bound {
        Bound::bind(g, self.params, |_| false)
    }

    pub fn latents(&self, waveform: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bound(&mut g);
        let z = feature_encode(&mut g, self.config, &b, waveform)?;
        Ok(g.value(z).clone())
    }

    /// Latents averaged over frames.
    pub fn mean_latent(&self, waveform: &[f64]) -> Result<Vec<f64>> {
        let z = self.latents(waveform)?;
        let (t, d) = z.dims2()?;
        let mut m = vec![0.0; d];
        for r in 0..t {
            m.iter_mut().zip(z.row(r)).for_each(|(s, v)| *s += v);
        }
        m.iter_mut().for_each(|v| *v /= t as f64);
        Ok(m)
    }

    pub fn contexts(&self, waveform: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bound(&mut g);
        let z = feature_encode(&mut g, self.config, &b, waveform)?;
        let t = g.shape(z)[0];
        let c = context_encode(&mut g, self.config, &b, z, &vec![false; t])?;
        Ok(g.value(c).clone())
    }

    pub fn log_probs(&self, waveform: &[f64]) -> Result<Tensor> {
        if !self.params.keys().any(|k| Component::CtcHead.owns(k)) {
            return Err(SoaError::contract("model has no CTC head"));
        }
        let mut g = Graph::new();
        let b = self.bound(&mut g);
        let z = feature_encode(&mut g, self.config, &b, waveform)?;
        let t = g.shape(z)[0];
        let c = context_encode(&mut g, self.config, &b, z, &vec![false; t])?;
        let lp = ctc_log_probs(&mut g, &b, c)?;
        Ok(g.value(lp).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_stack() -> ModelConfig {
        ModelConfig {
            conv_layers: vec![
                ConvLayer { channels: 8, kernel: 10, stride: 5 },
                ConvLayer { channels: 8, kernel: 3, stride: 2 },
                ConvLayer { channels: 8, kernel: 3, stride: 2 },
            ],
            model_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            ffn_dim: 16,
            pos_conv_kernel: 3,
            pos_conv_groups: 2,
            codebook_groups: 2,
            codebook_entries: 4,
            codevector_dim: 8,
            final_dim: 8,
            vocab_size: 3,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn floor_chain_frame_count() {
        let cfg = example_stack();
        assert_eq!(cfg.output_lengths(16000).unwrap(), 799);
        let p = init_params(&cfg, 0).unwrap();
        let z = Model::new(&cfg, &p).latents(&vec![0.01; 16000]).unwrap();
        assert_eq!(z.shape(), &[799, 8]);
        assert_eq!(cfg.output_lengths(32000).unwrap(), 1599);
    }

    #[test]
    fn receptive_field_yields_one_frame() {
        for cfg in [example_stack(), ModelConfig::toy()] {
            let rf = cfg.receptive_field();
            assert_eq!(cfg.output_lengths(rf).unwrap(), 1);
            assert!(matches!(cfg.output_lengths(rf - 1), Err(SoaError::InputTooShort { .. })));
        }
        assert_eq!(ModelConfig::toy().total_stride(), 160);
    }

    #[test]
    fn zero_waveform_encodes_to_finite_latents() {
        let cfg = ModelConfig::toy();
        let p = init_params(&cfg, 3).unwrap();
        let z = Model::new(&cfg, &p).latents(&vec![0.0; 4000]).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn every_parameter_has_one_component() {
        let cfg = ModelConfig::toy();
        let mut p = init_params(&cfg, 1).unwrap();
        p.extend(init_ctc_head(&cfg, 1));
        for name in p.keys() {
            let owners = Component::ALL.iter().filter(|c| c.owns(name)).count();
            assert_eq!(owners, 1, "{name}");
        }
        assert!(p.values().all(|t| t.data().iter().all(|v| *v == *v as f32 as f64)));
    }

    #[test]
    fn all_false_mask_equals_unmasked_forward() {
        let cfg = example_stack();
        let p = init_params(&cfg, 2).unwrap();
        let wave: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &p, |_| false);
        let z = feature_encode(&mut g, &cfg, &b, &wave).unwrap();
        let t = g.shape(z)[0];
        let c1 = context_encode(&mut g, &cfg, &b, z, &vec![false; t]).unwrap();
        assert_eq!(g.value(c1), &Model::new(&cfg, &p).contexts(&wave).unwrap());
        let mut m = vec![false; t];
        m[3] = true;
        let c2 = context_encode(&mut g, &cfg, &b, z, &m).unwrap();
        assert_ne!(g.value(c1), g.value(c2));
        assert!(context_encode(&mut g, &cfg, &b, z, &[false; 3]).is_err());
    }

    #[test]
    fn quantizer_contracts() {
        let cfg = example_stack();
        let p = init_params(&cfg, 5).unwrap();
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &p, |_| false);
        let z = g.constant(normal(&[6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9)));
        assert!(quantize(&mut g, &cfg, &b, z, 0.0, true, None).is_err());
        let (q, avg) = quantize(&mut g, &cfg, &b, z, 1.0, true, None).unwrap();
        let cb = p["quantizer.codebook"].data();
        let width = cfg.codevector_dim / cfg.codebook_groups;
        for r in 0..6 {
            let row = g.value(q).row(r);
            for grp in 0..2 {
                let chunk = &row[grp * width..(grp + 1) * width];
                let hit = (0..4).any(|e| &cb[(grp * 4 + e) * width..(grp * 4 + e + 1) * width] == chunk);
                assert!(hit, "row {r} group {grp} is not a codebook entry");
            }
        }
        for grp in 0..2 {
            let s: f64 = g.value(avg).row(grp).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let (soft, _) = quantize(&mut g, &cfg, &b, z, 0.01, false, None).unwrap();
        assert!(g.value(soft).max_abs_diff(g.value(q)) < 1e-3);
    }

    #[test]
    fn straight_through_reaches_quantizer_logits() {
        let cfg = example_stack();
        let p = init_params(&cfg, 6).unwrap();
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &p, |n| n == "quantizer.logits.weight");
        let z = g.constant(normal(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let (q, _) = quantize(&mut g, &cfg, &b, z, 2.0, true, None).unwrap();
        let w = g.constant(normal(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let prod = g.mul(q, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(b.get("quantizer.logits.weight").unwrap());
        assert!(gw.data().iter().any(|v| v.abs() > 1e-8));
    }

    #[test]
    fn single_block_attention_matches_direct_formula() {
        let mut cfg = example_stack();
        cfg.model_dim = 4;
        cfg.num_heads = 2;
        cfg.conv_layers.last_mut().unwrap().channels = 4;
        cfg.pos_conv_groups = 2;
        cfg.codevector_dim = 4;
        cfg.final_dim = 4;
        let p = init_params(&cfg, 8).unwrap();
        let x: Vec<f64> = (0..12).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &p, |_| false);
        let xv = g.constant(Tensor::new(vec![3, 4], x.clone()).unwrap());
        let out = attention(&mut g, &cfg, &b, xv, "contextual_encoder.block0").unwrap();

        let mat = |name: &str| p[name].data().to_vec();
        let lin = |w: &[f64], bias: Option<Vec<f64>>| -> Vec<f64> {
            let mut y = vec![0.0; 12];
            for t in 0..3 {
                for j in 0..4 {
                    let mut s = bias.as_ref().map_or(0.0, |b| b[j]);
                    for i in 0..4 {
                        s += x[t * 4 + i] * w[i * 4 + j];
                    }
                    y[t * 4 + j] = s;
                }
            }
            y
        };
        let pre = "contextual_encoder.block0.attn";
        let q = lin(&mat(&format!("{pre}.q.weight")), Some(mat(&format!("{pre}.q.bias"))));
        let k = lin(&mat(&format!("{pre}.k.weight")), None);
        let v = lin(&mat(&format!("{pre}.v.weight")), Some(mat(&format!("{pre}.v.bias"))));
        let mut heads = [0.0; 12];
        for h in 0..2 {
            for t in 0..3 {
                let scores: Vec<f64> = (0..3)
                    .map(|u| (0..2).map(|j| q[t * 4 + h * 2 + j] * k[u * 4 + h * 2 + j]).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for j in 0..2 {
                    heads[t * 4 + h * 2 + j] = (0..3).map(|u| scores[u].exp() / z * v[u * 4 + h * 2 + j]).sum();
                }
            }
        }
        let wo = mat(&format!("{pre}.o.weight"));
        let bo = mat(&format!("{pre}.o.bias"));
        for t in 0..3 {
            for j in 0..4 {
                let expect: f64 = bo[j] + (0..4).map(|i| heads[t * 4 + i] * wo[i * 4 + j]).sum::<f64>();
                assert!((g.value(out).at2(t, j) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn batch_order_does_not_change_outputs() {
        let cfg = example_stack();
        let p = init_params(&cfg, 4).unwrap();
        let wa: Vec<f64> = (0..1500).map(|i| (i as f64 * 0.07).sin() * 0.4).collect();
        let wb: Vec<f64> = (0..1800).map(|i| (i as f64 * 0.21).cos() * 0.2).collect();
        let run = |order: [&Vec<f64>; 2]| {
            let mut g = Graph::new();
            let b = Bound::bind(&mut g, &p, |_| false);
            order
                .iter()
                .map(|w| {
                    let z = feature_encode(&mut g, &cfg, &b, w).unwrap();
                    let t = g.shape(z)[0];
                    let c = context_encode(&mut g, &cfg, &b, z, &vec![false; t]).unwrap();
                    g.value(c).clone()
                })
                .collect::<Vec<_>>()
        };
        let ab = run([&wa, &wb]);
        let ba = run([&wb, &wa]);
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
    }

    #[test]
    fn end_to_end_forward_is_finite() {
        let cfg = ModelConfig::toy();
        let mut p = init_params(&cfg, 10).unwrap();
        p.extend(init_ctc_head(&cfg, 10));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wave: Vec<f64> = (0..6000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let lp = Model::new(&cfg, &p).log_probs(&wave).unwrap();
        assert!(lp.is_finite());
        assert_eq!(lp.shape()[1], 9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn output_lengths_match_encoder(len in 344usize..5000) {
                let cfg = ModelConfig::toy();
                let p = init_params(&cfg, 0).unwrap();
                let z = Model::new(&cfg, &p).latents(&vec![0.1; len]).unwrap();
                prop_assert_eq!(z.shape()[0], cfg.output_lengths(len).unwrap());
            }

            #[test]
            fn output_lengths_are_monotone(len in 344usize..100_000) {
                let cfg = ModelConfig::toy();
                prop_assert!(cfg.output_lengths(len + 1).unwrap() >= cfg.output_lengths(len).unwrap());
            }
        }
    }
}
