//! Multi-encoder, shared-fusion-decoder segmentation network.
//!
//! Every modality has its own encoder producing one feature map per
//! resolution level. Features of available modalities are fused level by
//! level and decoded U-Net style by a single decoder with a 1×1 logit head
//! at every level. The uni-modal pathway of modality `m` runs the same
//! decoder on the fusion of `m` alone, i.e. with every other modality's
//! features set to zero.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, Kernel, UpsampleMode};
use crate::data::MultiModalSample;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::{Spatial, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Sum,
    /// Sum divided by the number of available modalities.
    Mean,
    /// 1×1 convolution over the concatenated (zero-filled) modality features.
    LearnedMix,
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            "mix" | "learned-mix" => Ok(Self::LearnedMix),
            other => Err(Error::Parse(format!("unknown fusion rule `{other}`"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::LearnedMix => "learned-mix",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub n_modalities: usize,
    pub n_classes: usize,
    /// Channels at the finest level; level `l` has `width << l`.
    pub width: usize,
    /// Number of resolution levels, `L + 1`.
    pub depth: usize,
    pub rank: usize,
    pub fusion: Fusion,
    /// Interpolation for bringing deep-supervision logits to full resolution.
    pub upsample: UpsampleMode,
}

impl BackboneConfig {
    pub fn new(n_modalities: usize, n_classes: usize) -> Self {
        Self {
            n_modalities,
            n_classes,
            width: 8,
            depth: 3,
            rank: 2,
            fusion: Fusion::Mean,
            upsample: UpsampleMode::Nearest,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument("backbone depth must be >= 2".into()));
        }
        if self.width < 4 {
            return Err(Error::InvalidArgument("backbone width must be >= 4".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("n_classes must be >= 2".into()));
        }
        if self.n_modalities < 1 {
            return Err(Error::InvalidArgument("n_modalities must be >= 1".into()));
        }
        if self.rank != 2 && self.rank != 3 {
            return Err(Error::InvalidArgument(format!("unsupported rank {}", self.rank)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.width << level
    }

    /// Index of the coarsest level, `L`.
    pub fn last_level(&self) -> usize {
        self.depth - 1
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("n_modalities", self.n_modalities);
        kv.set("n_classes", self.n_classes);
        kv.set("width", self.width);
        kv.set("depth", self.depth);
        kv.set("rank", self.rank);
        kv.set("fusion", self.fusion);
        kv.set("upsample", self.upsample);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let req = |k: &str| -> Result<usize> {
            kv.get(k)?
                .ok_or_else(|| Error::Parse(format!("backbone config missing `{k}`")))
        };
        let cfg = Self {
            n_modalities: req("n_modalities")?,
            n_classes: req("n_classes")?,
            width: req("width")?,
            depth: req("depth")?,
            rank: req("rank")?,
            fusion: kv.get_or("fusion", Fusion::Mean)?,
            upsample: kv.get_or("upsample", UpsampleMode::Nearest)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    weight: usize,
    bias: usize,
    c_out: usize,
    kernel: Kernel,
}

#[derive(Debug, Clone)]
struct Layout {
    encoders: Vec<Vec<ConvSlot>>,
    mixers: Vec<ConvSlot>,
    decoder: Vec<ConvSlot>,
    heads: Vec<ConvSlot>,
}

/// Named flat parameter arrays (or gradients with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn build_layout(cfg: &BackboneConfig, names: &mut Vec<String>, shapes: &mut Vec<(usize, usize, Kernel)>) -> Layout {
    let k3 = Kernel::cube(3, cfg.rank);
    let k1 = Kernel::cube(1, cfg.rank);
    let mut push = |name: String, c_in: usize, c_out: usize, kernel: Kernel| -> ConvSlot {
        let weight = names.len();
        names.push(format!("{name}.weight"));
        shapes.push((c_in, c_out, kernel));
        names.push(format!("{name}.bias"));
        shapes.push((0, c_out, kernel));
        ConvSlot {
            weight,
            bias: weight + 1,
            c_out,
            kernel,
        }
    };
    let levels = cfg.depth;
    let encoders = (0..cfg.n_modalities)
        .map(|m| {
            (0..levels)
                .map(|l| {
                    let c_in = if l == 0 { 1 } else { cfg.channels(l - 1) };
                    push(format!("encoder{m}.level{l}"), c_in, cfg.channels(l), k3)
                })
                .collect()
        })
        .collect();
    let mixers = if cfg.fusion == Fusion::LearnedMix {
        (0..levels)
            .map(|l| {
                push(
                    format!("mix.level{l}"),
                    cfg.n_modalities * cfg.channels(l),
                    cfg.channels(l),
                    k1,
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let decoder = (0..levels)
        .map(|l| {
            let c_in = if l == cfg.last_level() {
                cfg.channels(l)
            } else {
                cfg.channels(l + 1) + cfg.channels(l)
            };
            push(format!("decoder.level{l}"), c_in, cfg.channels(l), k3)
        })
        .collect();
    let heads = (0..levels)
        .map(|l| push(format!("head.level{l}"), cfg.channels(l), cfg.n_classes, k1))
        .collect();
    Layout {
        encoders,
        mixers,
        decoder,
        heads,
    }
}

/// Number of trainable scalars for a configuration.
pub fn parameter_count(cfg: &BackboneConfig) -> usize {
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    build_layout(cfg, &mut names, &mut shapes);
    shapes
        .iter()
        .map(|&(c_in, c_out, k)| if c_in == 0 { c_out } else { c_in * c_out * k.volume() })
        .sum()
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    /// Fused logits per level; level `l` is at 1/2^l resolution.
    pub fused_logits: Vec<Tensor>,
    /// Output-level logits of each available modality's uni-modal pathway.
    pub uni_logits: BTreeMap<usize, Tensor>,
    /// Full uni-modal logit pyramids, when requested.
    pub uni_pyramids: Option<BTreeMap<usize, Vec<Tensor>>>,
    pub present: Vec<usize>,
}

impl FeaturePyramid {
    pub fn uni_pyramid(&self, m: usize) -> Option<&[Tensor]> {
        self.uni_pyramids.as_ref()?.get(&m).map(Vec::as_slice)
    }
}

/// Loss gradients with respect to the pyramid's logits. Missing entries
/// contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct PyramidGrads {
    pub fused: Vec<Option<Tensor>>,
    pub uni: BTreeMap<usize, Vec<Option<Tensor>>>,
}

impl PyramidGrads {
    pub fn new(levels: usize) -> Self {
        Self {
            fused: vec![None; levels],
            uni: BTreeMap::new(),
        }
    }

    fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
        match slot {
            Some(existing) => existing.add_assign(&grad),
            None => *slot = Some(grad),
        }
    }

    pub fn add_fused(&mut self, level: usize, grad: Tensor) {
        Self::accumulate(&mut self.fused[level], grad);
    }

    pub fn add_uni(&mut self, m: usize, level: usize, grad: Tensor) {
        let levels = self.fused.len();
        let entry = self.uni.entry(m).or_insert_with(|| vec![None; levels]);
        Self::accumulate(&mut entry[level], grad);
    }
}

struct EncoderCache {
    /// Convolution input per level (image, then pooled features).
    inputs: Vec<Tensor>,
    /// Post-ReLU features per level.
    outputs: Vec<Tensor>,
}

struct PathwayCache {
    /// Mixer input per level (learned-mix fusion only).
    mix_inputs: Vec<Tensor>,
    fused: Vec<Tensor>,
    dec_inputs: Vec<Tensor>,
    dec_outputs: Vec<Tensor>,
}

/// Forward outputs plus the activations needed for [`Backbone::backward`].
pub struct ForwardPass {
    pub pyramid: FeaturePyramid,
    spatial: Spatial,
    encoders: Vec<Option<EncoderCache>>,
    /// Modalities whose encoder ran but whose features were replaced by zeros.
    zeroed: Vec<bool>,
    fused: PathwayCache,
    uni: BTreeMap<usize, PathwayCache>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    layout: Layout,
    params: ParamSet,
}

impl Backbone {
    /// He-initialised network, deterministic under `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let layout = build_layout(&config, &mut names, &mut shapes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = shapes
            .iter()
            .map(|&(c_in, c_out, k)| {
                if c_in == 0 {
                    return vec![0.0; c_out];
                }
                let fan_in = (c_in * k.volume()) as f64;
                let std = if k.volume() == 1 {
                    (1.0 / fan_in).sqrt()
                } else {
                    (2.0 / fan_in).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..c_in * c_out * k.volume())
                    .map(|_| normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            layout,
            params: ParamSet { names, values },
        })
    }

    pub fn from_params(config: BackboneConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.names != params.names {
            return Err(Error::Parse("parameter names do not match config".into()));
        }
        for (name, (a, b)) in params
            .names
            .iter()
            .zip(template.params.values.iter().zip(&params.values))
        {
            if a.len() != b.len() {
                return Err(Error::Parse(format!("parameter `{name}` has wrong length")));
            }
        }
        Ok(Self {
            config,
            layout: template.layout,
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_len()
    }

    /// Parameter indices belonging to modality `m`'s encoder.
    pub fn encoder_param_indices(&self, m: usize) -> Vec<usize> {
        self.layout.encoders[m]
            .iter()
            .flat_map(|s| [s.weight, s.bias])
            .collect()
    }

    fn conv(&self, slot: &ConvSlot, input: &Tensor) -> Tensor {
        ops::conv_forward(
            input,
            &self.params.values[slot.weight],
            &self.params.values[slot.bias],
            slot.c_out,
            slot.kernel,
        )
    }

    fn conv_back(&self, slot: &ConvSlot, input: &Tensor, grad_out: &Tensor, out: &mut ParamSet, need_input_grad: bool) -> Option<Tensor> {
        let (head, tail) = out.values.split_at_mut(slot.bias);
        ops::conv_backward(
            input,
            &self.params.values[slot.weight],
            grad_out,
            slot.kernel,
            &mut head[slot.weight],
            &mut tail[0],
            need_input_grad,
        )
    }

    fn check_inputs(&self, inputs: &[Option<Tensor>]) -> Result<Spatial> {
        if inputs.len() != self.config.n_modalities {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs for {} modalities",
                inputs.len(),
                self.config.n_modalities
            )));
        }
        let mut spatial = None;
        for t in inputs.iter().flatten() {
            if t.channels() != 1 {
                return Err(Error::ShapeMismatch("inputs must be single-channel".into()));
            }
            match spatial {
                None => spatial = Some(t.spatial()),
                Some(s) if s != t.spatial() => {
                    return Err(Error::ShapeMismatch("modalities differ in shape".into()))
                }
                _ => {}
            }
        }
        let spatial =
            spatial.ok_or_else(|| Error::InvalidArgument("no modality present".into()))?;
        if (self.config.rank == 2) != (spatial.d == 1) {
            return Err(Error::ShapeMismatch(format!(
                "input {spatial} does not have rank {}",
                self.config.rank
            )));
        }
        let factor = 1usize << self.config.last_level();
        if spatial.downsampled(factor, self.config.rank).is_none() {
            return Err(Error::ShapeMismatch(format!(
                "input {spatial} not divisible by {factor}"
            )));
        }
        Ok(spatial)
    }

    fn encode(&self, m: usize, image: &Tensor) -> EncoderCache {
        let mut inputs = Vec::with_capacity(self.config.depth);
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.config.depth);
        for (l, slot) in self.layout.encoders[m].iter().enumerate() {
            let input = if l == 0 {
                image.clone()
            } else {
                ops::avg_pool2(&outputs[l - 1], self.config.rank)
            };
            let out = ops::relu(self.conv(slot, &input));
            inputs.push(input);
            outputs.push(out);
        }
        EncoderCache { inputs, outputs }
    }

    /// Fuses one level. `features[m]` is `None` for omitted modalities;
    /// `count` is the number of available modalities.
    fn fuse_level(&self, level: usize, features: &[Option<&Tensor>], count: usize, sp: Spatial) -> (Tensor, Option<Tensor>) {
        let c = self.config.channels(level);
        match self.config.fusion {
            Fusion::Sum | Fusion::Mean => {
                let mut fused = Tensor::zeros(c, sp);
                for f in features.iter().flatten() {
                    fused.add_assign(f);
                }
                if self.config.fusion == Fusion::Mean && count > 1 {
                    fused.scale(1.0 / count as f64);
                }
                (fused, None)
            }
            Fusion::LearnedMix => {
                let zero = Tensor::zeros(c, sp);
                let parts: Vec<&Tensor> = features.iter().map(|f| f.unwrap_or(&zero)).collect();
                let stacked = Tensor::concat_channels(&parts);
                let fused = self.conv(&self.layout.mixers[level], &stacked);
                (fused, Some(stacked))
            }
        }
    }

    fn decode(&self, fused: Vec<Tensor>, mix_inputs: Vec<Tensor>, heads: HeadSet) -> (PathwayCache, Vec<Option<Tensor>>) {
        let levels = self.config.depth;
        let last = self.config.last_level();
        let mut dec_inputs: Vec<Option<Tensor>> = vec![None; levels];
        let mut dec_outputs: Vec<Option<Tensor>> = vec![None; levels];
        for l in (0..levels).rev() {
            let input = if l == last {
                fused[l].clone()
            } else {
                let up = ops::upsample(
                    dec_outputs[l + 1].as_ref().expect("coarser level decoded"),
                    2,
                    self.config.rank,
                    UpsampleMode::Nearest,
                )
                .expect("factor 2");
                Tensor::concat_channels(&[&up, &fused[l]])
            };
            let out = ops::relu(self.conv(&self.layout.decoder[l], &input));
            dec_inputs[l] = Some(input);
            dec_outputs[l] = Some(out);
        }
        let dec_inputs: Vec<Tensor> = dec_inputs.into_iter().map(Option::unwrap).collect();
        let dec_outputs: Vec<Tensor> = dec_outputs.into_iter().map(Option::unwrap).collect();
        let logits = (0..levels)
            .map(|l| {
                (heads == HeadSet::All || l == 0)
                    .then(|| self.conv(&self.layout.heads[l], &dec_outputs[l]))
            })
            .collect();
        (
            PathwayCache {
                mix_inputs,
                fused,
                dec_inputs,
                dec_outputs,
            },
            logits,
        )
    }

    fn fused_pathway(&self, feats: &[Option<Vec<&Tensor>>], count: usize, sp: &[Spatial], heads: HeadSet) -> (PathwayCache, Vec<Option<Tensor>>) {
        let mut fused = Vec::with_capacity(self.config.depth);
        let mut mix_inputs = Vec::new();
        for l in 0..self.config.depth {
            let level_feats: Vec<Option<&Tensor>> =
                feats.iter().map(|f| f.as_ref().map(|v| v[l])).collect();
            let (f, mix) = self.fuse_level(l, &level_feats, count, sp[l]);
            fused.push(f);
            if let Some(mix) = mix {
                mix_inputs.push(mix);
            }
        }
        self.decode(fused, mix_inputs, heads)
    }

    fn run(
        &self,
        encoders: Vec<Option<EncoderCache>>,
        zeroed: Vec<bool>,
        spatial: Spatial,
        need_uni_pyramids: bool,
        with_uni: bool,
    ) -> Result<ForwardPass> {
        let m_count = self.config.n_modalities;
        let levels = self.config.depth;
        let sp: Vec<Spatial> = (0..levels)
            .map(|l| spatial.downsampled(1 << l, self.config.rank).expect("checked"))
            .collect();
        let present: Vec<usize> = (0..m_count)
            .filter(|&m| encoders[m].is_some() && !zeroed[m])
            .collect();
        if present.is_empty() {
            return Err(Error::InvalidArgument("empty presence".into()));
        }
        let zero_levels: Vec<Tensor> = (0..levels)
            .map(|l| Tensor::zeros(self.config.channels(l), sp[l]))
            .collect();
        let feats: Vec<Option<Vec<&Tensor>>> = (0..m_count)
            .map(|m| {
                encoders[m].as_ref().map(|e| {
                    if zeroed[m] {
                        zero_levels.iter().collect()
                    } else {
                        e.outputs.iter().collect()
                    }
                })
            })
            .collect();

        let (fused_cache, fused_logits) =
            self.fused_pathway(&feats, present.len(), &sp, HeadSet::All);
        let fused_logits: Vec<Tensor> = fused_logits.into_iter().map(Option::unwrap).collect();

        let mut uni = BTreeMap::new();
        let mut uni_logits = BTreeMap::new();
        let mut uni_pyramids = need_uni_pyramids.then(BTreeMap::new);
        if with_uni {
            let heads = if need_uni_pyramids {
                HeadSet::All
            } else {
                HeadSet::OutputOnly
            };
            for &m in &present {
                let single: Vec<Option<Vec<&Tensor>>> = (0..m_count)
                    .map(|j| if j == m { feats[m].clone() } else { None })
                    .collect();
                let (cache, logits) = self.fused_pathway(&single, 1, &sp, heads);
                let mut logits = logits.into_iter();
                let out = logits.next().flatten().expect("output head");
                if let Some(p) = uni_pyramids.as_mut() {
                    let mut pyr = vec![out.clone()];
                    pyr.extend(logits.map(Option::unwrap));
                    p.insert(m, pyr);
                }
                uni_logits.insert(m, out);
                uni.insert(m, cache);
            }
        }
        drop(feats);

        Ok(ForwardPass {
            pyramid: FeaturePyramid {
                fused_logits,
                uni_logits,
                uni_pyramids,
                present,
            },
            spatial,
            encoders,
            zeroed,
            fused: fused_cache,
            uni,
        })
    }

    /// Runs encoders for the present inputs only; absent modalities get
    /// all-zero features.
    pub fn forward(&self, inputs: &[Option<Tensor>], need_uni_pyramids: bool) -> Result<ForwardPass> {
        let spatial = self.check_inputs(inputs)?;
        let encoders = inputs
            .iter()
            .enumerate()
            .map(|(m, t)| t.as_ref().map(|t| self.encode(m, t)))
            .collect();
        self.run(
            encoders,
            vec![false; self.config.n_modalities],
            spatial,
            need_uni_pyramids,
            true,
        )
    }

    pub fn forward_sample(&self, sample: &MultiModalSample, need_uni_pyramids: bool) -> Result<ForwardPass> {
        self.forward(&sample.input_tensors(), need_uni_pyramids)
    }

    /// Encodes every input, then replaces the encoded features of modalities
    /// with `keep[m] == false` by zeros before fusion.
    pub fn forward_zero_masked(&self, inputs: &[Tensor], keep: &[bool], need_uni_pyramids: bool) -> Result<ForwardPass> {
        let wrapped: Vec<Option<Tensor>> = inputs.iter().cloned().map(Some).collect();
        let spatial = self.check_inputs(&wrapped)?;
        if keep.len() != inputs.len() {
            return Err(Error::ShapeMismatch("keep mask length".into()));
        }
        let encoders = inputs
            .iter()
            .enumerate()
            .map(|(m, t)| Some(self.encode(m, t)))
            .collect();
        let zeroed = keep.iter().map(|&k| !k).collect();
        self.run(encoders, zeroed, spatial, need_uni_pyramids, true)
    }

    /// Fused output-level logits only, skipping uni-modal pathways.
    pub fn predict(&self, inputs: &[Option<Tensor>]) -> Result<Tensor> {
        let spatial = self.check_inputs(inputs)?;
        let encoders = inputs
            .iter()
            .enumerate()
            .map(|(m, t)| t.as_ref().map(|t| self.encode(m, t)))
            .collect();
        let pass = self.run(
            encoders,
            vec![false; self.config.n_modalities],
            spatial,
            false,
            false,
        )?;
        Ok(pass.pyramid.fused_logits.into_iter().next().expect("level 0"))
    }

    fn backward_pathway(
        &self,
        cache: &PathwayCache,
        grads: &[Option<Tensor>],
        out: &mut ParamSet,
    ) -> Vec<Tensor> {
        let levels = self.config.depth;
        let last = self.config.last_level();
        let mut grad_dec: Vec<Option<Tensor>> = vec![None; levels];
        for (l, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let slot = &self.layout.heads[l];
                let gi = self.conv_back(slot, &cache.dec_outputs[l], g, out, true)
                .expect("input grad");
                PyramidGrads::accumulate(&mut grad_dec[l], gi);
            }
        }
        let mut grad_fused: Vec<Tensor> = (0..levels)
            .map(|l| Tensor::zeros(self.config.channels(l), cache.fused[l].spatial()))
            .collect();
        // Walk fine to coarse: level l feeds the upsampled output of l + 1.
        for l in 0..levels {
            let Some(g) = grad_dec[l].take() else {
                continue;
            };
            let g = ops::relu_backward(&cache.dec_outputs[l], g);
            let slot = &self.layout.decoder[l];
            let gi = self.conv_back(slot, &cache.dec_inputs[l], &g, out, true)
            .expect("input grad");
            if l == last {
                grad_fused[l].add_assign(&gi);
            } else {
                let c_up = self.config.channels(l + 1);
                let parts = gi.split_channels(&[c_up, self.config.channels(l)]);
                grad_fused[l].add_assign(&parts[1]);
                let g_up = ops::upsample_backward(
                    &parts[0],
                    cache.dec_outputs[l + 1].spatial(),
                    2,
                    self.config.rank,
                    UpsampleMode::Nearest,
                )
                .expect("factor 2");
                PyramidGrads::accumulate(&mut grad_dec[l + 1], g_up);
            }
        }
        grad_fused
    }

    /// Gradients of a scalar loss with respect to every parameter, given
    /// the loss gradients with respect to the pass's logits.
    pub fn backward(&self, pass: &ForwardPass, grads: &PyramidGrads) -> Result<ParamSet> {
        let levels = self.config.depth;
        let m_count = self.config.n_modalities;
        let mut out = self.params.zeros_like();
        if grads.fused.len() != levels {
            return Err(Error::ShapeMismatch("fused gradient levels".into()));
        }
        let sp: Vec<Spatial> = (0..levels)
            .map(|l| pass.spatial.downsampled(1 << l, self.config.rank).expect("checked"))
            .collect();
        let mut grad_feats: Vec<Vec<Tensor>> = (0..m_count)
            .map(|_| {
                (0..levels)
                    .map(|l| Tensor::zeros(self.config.channels(l), sp[l]))
                    .collect()
            })
            .collect();
        let count = pass.pyramid.present.len();

        let mut route = |cache: &PathwayCache, g: &[Option<Tensor>], members: &[usize], count: usize, out: &mut ParamSet| {
            if g.iter().all(Option::is_none) {
                return;
            }
            let gf = self.backward_pathway(cache, g, out);
            for (l, gl) in gf.into_iter().enumerate() {
                match self.config.fusion {
                    Fusion::Sum | Fusion::Mean => {
                        let mut gl = gl;
                        if self.config.fusion == Fusion::Mean && count > 1 {
                            gl.scale(1.0 / count as f64);
                        }
                        for &m in members {
                            grad_feats[m][l].add_assign(&gl);
                        }
                    }
                    Fusion::LearnedMix => {
                        let slot = &self.layout.mixers[l];
                        let gi = self.conv_back(slot, &cache.mix_inputs[l], &gl, out, true)
                        .expect("input grad");
                        let sizes = vec![self.config.channels(l); m_count];
                        let parts = gi.split_channels(&sizes);
                        for &m in members {
                            grad_feats[m][l].add_assign(&parts[m]);
                        }
                    }
                }
            }
        };

        route(&pass.fused, &grads.fused, &pass.pyramid.present, count, &mut out);
        for (&m, g) in &grads.uni {
            let cache = pass.uni.get(&m).ok_or_else(|| {
                Error::InvalidArgument(format!("no uni-modal pathway for modality {m}"))
            })?;
            if g.len() != levels {
                return Err(Error::ShapeMismatch("uni gradient levels".into()));
            }
            route(cache, g, &[m], 1, &mut out);
        }

        for (m, enc) in pass.encoders.iter().enumerate() {
            let Some(enc) = enc else { continue };
            if pass.zeroed[m] {
                continue;
            }
            let mut carry: Option<Tensor> = None;
            for l in (0..levels).rev() {
                let mut g = std::mem::replace(&mut grad_feats[m][l], Tensor::zeros(0, sp[l]));
                if let Some(c) = carry.take() {
                    g.add_assign(&c);
                }
                let g = ops::relu_backward(&enc.outputs[l], g);
                let slot = &self.layout.encoders[m][l];
                let gi = self.conv_back(slot, &enc.inputs[l], &g, &mut out, l > 0);
                if l > 0 {
                    carry = Some(ops::avg_pool2_backward(
                        &gi.expect("input grad"),
                        sp[l - 1],
                        self.config.rank,
                    ));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeadSet {
    All,
    OutputOnly,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn inputs(cfg: &BackboneConfig, sp: Spatial, present: &[bool], seed: u64) -> Vec<Option<Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.n_modalities)
            .map(|m| {
                let t = Tensor::from_vec(
                    1,
                    sp,
                    (0..sp.volume()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                present[m].then_some(t)
            })
            .collect()
    }

    #[test]
    fn pyramid_shape_contract() {
        let mut cfg = BackboneConfig::new(3, 4);
        cfg.depth = 4;
        let net = Backbone::new(cfg.clone(), 1).unwrap();
        let x = inputs(&cfg, Spatial::new_2d(64, 64), &[true, false, true], 2);
        let pass = net.forward(&x, true).unwrap();
        let sizes: Vec<usize> = pass.pyramid.fused_logits.iter().map(|t| t.spatial().h).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8]);
        assert!(pass.pyramid.fused_logits.iter().all(|t| t.channels() == 4 && t.is_finite()));
        assert_eq!(pass.pyramid.present, vec![0, 2]);
        assert_eq!(pass.pyramid.uni_logits.keys().copied().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(pass.pyramid.uni_pyramid(2).unwrap().len(), 4);
    }

    #[test]
    fn singleton_fusion_equals_uni_pathway() {
        for fusion in [Fusion::Sum, Fusion::Mean] {
            let mut cfg = BackboneConfig::new(3, 3);
            cfg.fusion = fusion;
            let net = Backbone::new(cfg.clone(), 4).unwrap();
            let x = inputs(&cfg, Spatial::new_2d(16, 16), &[false, true, false], 5);
            let pass = net.forward(&x, true).unwrap();
            assert_eq!(
                pass.pyramid.fused_logits.as_slice(),
                pass.pyramid.uni_pyramid(1).unwrap()
            );
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = BackboneConfig::new(2, 3);
        let net = Backbone::new(cfg.clone(), 0).unwrap();
        let x = inputs(&cfg, Spatial::new_2d(10, 10), &[true, true], 0);
        assert!(net.forward(&x, false).is_err());
        let none = inputs(&cfg, Spatial::new_2d(8, 8), &[false, false], 0);
        assert!(net.forward(&none, false).is_err());
        assert!(Backbone::new(BackboneConfig { depth: 1, ..cfg.clone() }, 0).is_err());
        assert!(Backbone::new(BackboneConfig { width: 2, ..cfg }, 0).is_err());
    }

    #[test]
    fn parameter_count_scaling() {
        let cfg = BackboneConfig::new(3, 3);
        let a = parameter_count(&cfg);
        assert_eq!(a, parameter_count(&cfg));
        assert_eq!(a, Backbone::new(cfg.clone(), 0).unwrap().parameter_count());
        let deeper = BackboneConfig { depth: cfg.depth + 1, ..cfg.clone() };
        assert!(parameter_count(&deeper) > a);

        // Interior decoder conv at the coarsest level: (w·2^L)² · 9 weights.
        let wide = BackboneConfig { width: 2 * cfg.width, ..cfg.clone() };
        let interior = |c: &BackboneConfig| {
            let net = Backbone::new(c.clone(), 0).unwrap();
            let i = net.params.find("decoder.level2.weight").unwrap();
            net.params.values[i].len()
        };
        assert_eq!(interior(&wide), 4 * interior(&cfg));
    }

    #[test]
    fn deterministic_forward() {
        let cfg = BackboneConfig::new(3, 3);
        let net = Backbone::new(cfg.clone(), 9).unwrap();
        let x = inputs(&cfg, Spatial::new_2d(16, 16), &[true, true, false], 1);
        let a = net.forward(&x, true).unwrap().pyramid;
        let b = net.forward(&x, true).unwrap().pyramid;
        assert_eq!(a, b);
    }

    /// Finite-difference check of the full network backward pass on a
    /// random linear functional of every output.
    #[test]
    fn backward_matches_finite_differences() {
        for fusion in [Fusion::Mean, Fusion::LearnedMix] {
            let mut cfg = BackboneConfig::new(2, 3);
            cfg.width = 4;
            cfg.depth = 2;
            cfg.fusion = fusion;
            let mut net = Backbone::new(cfg.clone(), 3).unwrap();
            let sp = Spatial::new_2d(4, 4);
            let x = inputs(&cfg, sp, &[true, true], 7);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let pass = net.forward(&x, true).unwrap();
            let weights = |t: &Tensor, rng: &mut ChaCha8Rng| {
                Tensor::from_vec(
                    t.channels(),
                    t.spatial(),
                    (0..t.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            let mut grads = PyramidGrads::new(cfg.depth);
            for (l, t) in pass.pyramid.fused_logits.iter().enumerate() {
                grads.add_fused(l, weights(t, &mut rng));
            }
            for (&m, pyr) in pass.pyramid.uni_pyramids.as_ref().unwrap() {
                for (l, t) in pyr.iter().enumerate() {
                    grads.add_uni(m, l, weights(t, &mut rng));
                }
            }
            let objective = |net: &Backbone| {
                let p = net.forward(&x, true).unwrap().pyramid;
                let mut s = 0.0;
                for (l, t) in p.fused_logits.iter().enumerate() {
                    let w = grads.fused[l].as_ref().unwrap();
                    s += t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
                }
                for (m, pyr) in p.uni_pyramids.as_ref().unwrap() {
                    for (l, t) in pyr.iter().enumerate() {
                        let w = grads.uni[m][l].as_ref().unwrap();
                        s += t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                s
            };
            let analytic = net.backward(&pass, &grads).unwrap();
            let h = 1e-6;
            let mut checked = 0;
            for p in 0..analytic.values.len() {
                for i in (0..analytic.values[p].len()).step_by(7) {
                    let orig = net.params.values[p][i];
                    net.params.values[p][i] = orig + h;
                    let up = objective(&net);
                    net.params.values[p][i] = orig - h;
                    let down = objective(&net);
                    net.params.values[p][i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = analytic.values[p][i];
                    assert!(
                        (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                        "{} [{i}]: fd {fd} vs analytic {an}",
                        analytic.names[p]
                    );
                    checked += 1;
                }
            }
            assert!(checked > 50);
        }
    }
}
