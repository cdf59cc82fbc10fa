//! Multimodal mixture of experts for beam prediction, and the baselines it is
//! compared against.
//!
//! A [`BeamModel`] maps the synchronized modality inputs of one time slot to
//! `M` beam logits:
//!
//! * every consumed modality `d` goes through its own expert network,
//!   producing an embedding `z_d` of the shared width `L_z`;
//! * the gating network reads the concatenated raw inputs (or, optionally,
//!   the concatenated embeddings) and emits one logit per modality, turned
//!   into fusion weights `w` by a softmax;
//! * the fused embedding `z = sum_d w_d z_d` goes through the output head.
//!
//! Baselines reuse the same pieces: a single expert feeding the head
//! (vision-only, position-only) or the concatenation `[z_1, ..., z_D]`
//! feeding a wider head (feature concatenation). All kinds train through the
//! same per-sample gradient-descent loop over a cross-entropy loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{
    argmax, cross_entropy_loss, softmax, AdamParams, AdamState, DenseNet, DenseNetSpec,
    ForwardCache, GradientSet,
};
use crate::seed::{self, streams};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Modality index of the position input.
pub const POSITION: usize = 0;
/// Modality index of the visual input.
pub const VISUAL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PositionOnly,
    VisionOnly,
    ConcatFusion,
    Moe,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::PositionOnly,
        ModelKind::VisionOnly,
        ModelKind::ConcatFusion,
        ModelKind::Moe,
    ];

    /// Short name used on the command line and in reports.
    pub fn short_name(&self) -> &'static str {
        match self {
            ModelKind::PositionOnly => "position",
            ModelKind::VisionOnly => "vision",
            ModelKind::ConcatFusion => "concat",
            ModelKind::Moe => "moe",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" | "position_only" => Ok(ModelKind::PositionOnly),
            "vision" | "vision_only" => Ok(ModelKind::VisionOnly),
            "concat" | "concat_fusion" => Ok(ModelKind::ConcatFusion),
            "moe" => Ok(ModelKind::Moe),
            other => Err(Error::config("model", format!("unknown model kind `{other}`"))),
        }
    }
}

/// What the gating network reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingInput {
    /// Concatenated raw modality inputs, in modality order.
    Raw,
    /// Concatenated expert embeddings.
    Embeddings,
}

/// Layer counts count affine layers, so `2` means `in -> width -> out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub position_expert_layers: usize,
    pub position_expert_width: usize,
    pub visual_expert_layers: usize,
    pub visual_expert_width: usize,
    /// Experts for modalities beyond position and visual.
    pub extra_expert_layers: usize,
    pub extra_expert_width: usize,
    pub gating_layers: usize,
    pub gating_width: usize,
    pub head_layers: usize,
    pub head_width: usize,
    pub gating_input: GatingInput,
    /// Pin the fusion weights at `1/D` and never train the gating network.
    pub freeze_gating: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            position_expert_layers: 2,
            position_expert_width: 64,
            visual_expert_layers: 3,
            visual_expert_width: 64,
            extra_expert_layers: 2,
            extra_expert_width: 64,
            gating_layers: 3,
            gating_width: 64,
            head_layers: 1,
            head_width: 64,
            gating_input: GatingInput::Raw,
            freeze_gating: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("position_expert_layers", self.position_expert_layers),
            ("position_expert_width", self.position_expert_width),
            ("visual_expert_layers", self.visual_expert_layers),
            ("visual_expert_width", self.visual_expert_width),
            ("extra_expert_layers", self.extra_expert_layers),
            ("extra_expert_width", self.extra_expert_width),
            ("gating_layers", self.gating_layers),
            ("gating_width", self.gating_width),
            ("head_layers", self.head_layers),
            ("head_width", self.head_width),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        Ok(())
    }

    fn expert_shape(&self, modality: usize) -> (usize, usize) {
        match modality {
            POSITION => (self.position_expert_layers, self.position_expert_width),
            VISUAL => (self.visual_expert_layers, self.visual_expert_width),
            _ => (self.extra_expert_layers, self.extra_expert_width),
        }
    }
}

/// Softmax-normalized, non-negative per-modality weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::domain("fusion weights are empty"));
        }
        if w.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::domain(format!("fusion weights must be >= 0: {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::domain(format!("fusion weights sum to {sum}")));
        }
        Ok(Self(w))
    }

    pub fn uniform(d: usize) -> Self {
        Self(vec![1.0 / d as f64; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `sum_d w_d z_d`.
pub fn fuse<Z: AsRef<[f64]>>(embeddings: &[Z], weights: &FusionWeights) -> Result<Vec<f64>> {
    if embeddings.len() != weights.len() {
        return Err(Error::shape(format!(
            "{} embeddings for {} weights",
            embeddings.len(),
            weights.len()
        )));
    }
    let width = embeddings[0].as_ref().len();
    if embeddings.iter().any(|z| z.as_ref().len() != width) {
        return Err(Error::shape("embeddings differ in length"));
    }
    let w = weights.as_slice();
    let mut z: Vec<f64> = embeddings[0].as_ref().iter().map(|v| w[0] * v).collect();
    for (zd, &wd) in embeddings.iter().zip(w).skip(1) {
        for (acc, v) in z.iter_mut().zip(zd.as_ref()) {
            *acc += wd * v;
        }
    }
    Ok(z)
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// Arg-max beam, lowest index on ties.
    pub beam: usize,
    /// Present for mixture-of-experts models only.
    pub weights: Option<FusionWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamModel {
    kind: ModelKind,
    modality_dims: Vec<usize>,
    /// Modalities consumed by the experts, in order.
    active: Vec<usize>,
    experts: Vec<DenseNet>,
    gating: Option<DenseNet>,
    head: DenseNet,
    gating_input: GatingInput,
    freeze_gating: bool,
}

/// Gradients for every network of a [`BeamModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub experts: Vec<GradientSet>,
    pub gating: Option<GradientSet>,
    pub head: GradientSet,
}

impl ModelGradients {
    pub fn zeros_like(model: &BeamModel) -> Self {
        Self {
            experts: model.experts.iter().map(GradientSet::zeros_like).collect(),
            gating: model.gating.as_ref().map(GradientSet::zeros_like),
            head: GradientSet::zeros_like(&model.head),
        }
    }

    pub fn fill_zero(&mut self) {
        self.experts.iter_mut().for_each(GradientSet::fill_zero);
        if let Some(g) = &mut self.gating {
            g.fill_zero();
        }
        self.head.fill_zero();
    }

    /// Same order as [`BeamModel::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.experts {
            out.extend(g.flat());
        }
        if let Some(g) = &self.gating {
            out.extend(g.flat());
        }
        out.extend(self.head.flat());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.experts.iter().all(GradientSet::is_finite)
            && self.gating.as_ref().is_none_or(GradientSet::is_finite)
            && self.head.is_finite()
    }
}

struct Trace {
    expert_caches: Vec<ForwardCache>,
    embeddings: Vec<Vec<f64>>,
    gating_cache: Option<ForwardCache>,
    weights: Option<Vec<f64>>,
    head_cache: ForwardCache,
    logits: Vec<f64>,
}

fn concat<X: AsRef<[f64]>>(parts: impl Iterator<Item = X>) -> Vec<f64> {
    let mut out = Vec::new();
    for p in parts {
        out.extend_from_slice(p.as_ref());
    }
    out
}

impl BeamModel {
    /// Initializes a model of the given kind for data with `modality_dims`.
    pub fn build(
        kind: ModelKind,
        modality_dims: &[usize],
        num_beams: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_beams == 0 {
            return Err(Error::domain("num_beams must be >= 1"));
        }
        if modality_dims.is_empty() || modality_dims.contains(&0) {
            return Err(Error::domain(format!("bad modality dims {modality_dims:?}")));
        }
        let active: Vec<usize> = match kind {
            ModelKind::PositionOnly => vec![POSITION],
            ModelKind::VisionOnly => vec![VISUAL],
            ModelKind::ConcatFusion | ModelKind::Moe => (0..modality_dims.len()).collect(),
        };
        if let Some(&d) = active.iter().find(|&&d| d >= modality_dims.len()) {
            return Err(Error::domain(format!(
                "{kind} needs modality {d}, data has {}",
                modality_dims.len()
            )));
        }
        let mut rng = seed::rng(cfg.init_seed, kind as u64, streams::INIT);
        let lz = cfg.embedding_dim;
        let experts = active
            .iter()
            .map(|&d| {
                let (layers, width) = cfg.expert_shape(d);
                Ok(DenseNet::init(
                    DenseNetSpec::mlp(modality_dims[d], width, layers, lz)?,
                    &mut rng,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let gating = if kind == ModelKind::Moe {
            let input = match cfg.gating_input {
                GatingInput::Raw => modality_dims.iter().sum(),
                GatingInput::Embeddings => lz * active.len(),
            };
            Some(DenseNet::init(
                DenseNetSpec::mlp(input, cfg.gating_width, cfg.gating_layers, active.len())?,
                &mut rng,
            ))
        } else {
            None
        };
        let head_in = if kind == ModelKind::ConcatFusion {
            lz * active.len()
        } else {
            lz
        };
        let head = DenseNet::init(
            DenseNetSpec::mlp(head_in, cfg.head_width, cfg.head_layers, num_beams)?,
            &mut rng,
        );
        let model = Self {
            kind,
            modality_dims: modality_dims.to_vec(),
            active,
            experts,
            gating,
            head,
            gating_input: cfg.gating_input,
            freeze_gating: cfg.freeze_gating,
        };
        model.check()?;
        Ok(model)
    }

    /// Assembles a model from explicit networks; shapes are validated.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kind: ModelKind,
        modality_dims: Vec<usize>,
        active: Vec<usize>,
        experts: Vec<DenseNet>,
        gating: Option<DenseNet>,
        head: DenseNet,
        gating_input: GatingInput,
        freeze_gating: bool,
    ) -> Result<Self> {
        let model = Self {
            kind,
            modality_dims,
            active,
            experts,
            gating,
            head,
            gating_input,
            freeze_gating,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        if self.experts.is_empty() || self.experts.len() != self.active.len() {
            return Err(Error::shape("one expert per active modality required"));
        }
        let lz = self.experts[0].output_dim();
        for (e, &d) in self.experts.iter().zip(&self.active) {
            let dim = *self
                .modality_dims
                .get(d)
                .ok_or_else(|| Error::shape(format!("active modality {d} out of range")))?;
            if e.input_dim() != dim {
                return Err(Error::shape(format!(
                    "expert for modality {d} takes {} inputs, modality has {dim}",
                    e.input_dim()
                )));
            }
            if e.output_dim() != lz {
                return Err(Error::shape("experts must share the embedding width"));
            }
        }
        let single = matches!(self.kind, ModelKind::PositionOnly | ModelKind::VisionOnly);
        if single && self.active.len() != 1 {
            return Err(Error::shape("unimodal model needs exactly one expert"));
        }
        match (self.kind, &self.gating) {
            (ModelKind::Moe, Some(g)) => {
                let want = match self.gating_input {
                    GatingInput::Raw => self.modality_dims.iter().sum(),
                    GatingInput::Embeddings => lz * self.active.len(),
                };
                if g.input_dim() != want {
                    return Err(Error::shape(format!(
                        "gating takes {} inputs, expected {want}",
                        g.input_dim()
                    )));
                }
                if g.output_dim() != self.active.len() {
                    return Err(Error::shape("gating output must equal the number of experts"));
                }
                if self.gating_input == GatingInput::Raw && self.active.len() != self.modality_dims.len() {
                    return Err(Error::shape("raw-input gating requires every modality active"));
                }
            }
            (ModelKind::Moe, None) => return Err(Error::shape("mixture model needs a gating network")),
            (_, Some(_)) => return Err(Error::shape("only mixture models carry a gating network")),
            (_, None) => {}
        }
        let head_in = if self.kind == ModelKind::ConcatFusion {
            lz * self.active.len()
        } else {
            lz
        };
        if self.head.input_dim() != head_in {
            return Err(Error::shape(format!(
                "head takes {} inputs, expected {head_in}",
                self.head.input_dim()
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn modality_dims(&self) -> &[usize] {
        &self.modality_dims
    }

    pub fn active_modalities(&self) -> &[usize] {
        &self.active
    }

    pub fn experts(&self) -> &[DenseNet] {
        &self.experts
    }

    pub fn gating(&self) -> Option<&DenseNet> {
        self.gating.as_ref()
    }

    pub fn head(&self) -> &DenseNet {
        &self.head
    }

    pub fn gating_input(&self) -> GatingInput {
        self.gating_input
    }

    pub fn freeze_gating(&self) -> bool {
        self.freeze_gating
    }

    pub fn embedding_dim(&self) -> usize {
        self.experts[0].output_dim()
    }

    pub fn num_beams(&self) -> usize {
        self.head.output_dim()
    }

    /// Networks in checkpoint order: experts, gating, head.
    pub fn networks(&self) -> Vec<&DenseNet> {
        let mut out: Vec<&DenseNet> = self.experts.iter().collect();
        if let Some(g) = &self.gating {
            out.push(g);
        }
        out.push(&self.head);
        out
    }

    pub fn networks_mut(&mut self) -> Vec<&mut DenseNet> {
        let mut out: Vec<&mut DenseNet> = self.experts.iter_mut().collect();
        if let Some(g) = &mut self.gating {
            out.push(g);
        }
        out.push(&mut self.head);
        out
    }

    /// Names matching [`BeamModel::networks`].
    pub fn network_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .active
            .iter()
            .map(|&d| format!("expert_{d}"))
            .collect();
        if self.gating.is_some() {
            out.push("gating".into());
        }
        out.push("head".into());
        out
    }

    pub fn num_params(&self) -> usize {
        self.networks().iter().map(|n| n.num_params()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.networks().iter().flat_map(|n| n.params_flat()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for net in self.networks_mut() {
            let n = net.num_params();
            net.set_params_flat(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    /// Flat parameter ranges of the expert, gating and head groups.
    pub fn param_groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        let experts: usize = self.experts.iter().map(|e| e.num_params()).sum();
        out.push(("experts".to_owned(), offset..offset + experts));
        offset += experts;
        if let Some(g) = &self.gating {
            out.push(("gating".to_owned(), offset..offset + g.num_params()));
            offset += g.num_params();
        }
        out.push(("head".to_owned(), offset..offset + self.head.num_params()));
        out
    }

    fn check_inputs<X: AsRef<[f64]>>(&self, x: &[X]) -> Result<()> {
        if x.len() != self.modality_dims.len() {
            return Err(Error::shape(format!(
                "model expects {} modalities, got {}",
                self.modality_dims.len(),
                x.len()
            )));
        }
        for (d, (xd, &dim)) in x.iter().zip(&self.modality_dims).enumerate() {
            if xd.as_ref().len() != dim {
                return Err(Error::shape(format!(
                    "modality {d} has dim {}, model expects {dim}",
                    xd.as_ref().len()
                )));
            }
        }
        Ok(())
    }

    fn expert_slot(&self, modality: usize) -> Result<usize> {
        self.active
            .iter()
            .position(|&d| d == modality)
            .ok_or_else(|| Error::domain(format!("model has no expert for modality {modality}")))
    }

    /// Embedding `z_d` of one modality input.
    pub fn expert_forward(&self, modality: usize, x_d: &[f64]) -> Result<Vec<f64>> {
        let slot = self.expert_slot(modality)?;
        self.experts[slot].eval(x_d)
    }

    fn gating_from_logits(&self, gating_logits: &[f64]) -> Result<FusionWeights> {
        FusionWeights::new(softmax(gating_logits)?)
    }

    /// Fusion weights for the full multimodal input, consumed in modality
    /// order. Frozen gating yields `1/D` for every modality.
    pub fn gating_forward<X: AsRef<[f64]>>(&self, x: &[X]) -> Result<FusionWeights> {
        let gating = self
            .gating
            .as_ref()
            .ok_or_else(|| Error::domain(format!("{} model has no gating network", self.kind)))?;
        self.check_inputs(x)?;
        if self.freeze_gating {
            return Ok(FusionWeights::uniform(self.active.len()));
        }
        let input = match self.gating_input {
            GatingInput::Raw => concat(x.iter().map(AsRef::as_ref)),
            GatingInput::Embeddings => {
                let zs = self
                    .active
                    .iter()
                    .zip(&self.experts)
                    .map(|(&d, e)| e.eval(x[d].as_ref()))
                    .collect::<Result<Vec<_>>>()?;
                concat(zs.iter())
            }
        };
        self.gating_from_logits(&gating.eval(&input)?)
    }

    fn trace<X: AsRef<[f64]>>(&self, x: &[X]) -> Result<Trace> {
        self.check_inputs(x)?;
        let mut expert_caches = Vec::with_capacity(self.experts.len());
        let mut embeddings = Vec::with_capacity(self.experts.len());
        for (&d, e) in self.active.iter().zip(&self.experts) {
            let (z, cache) = e.forward(x[d].as_ref())?;
            embeddings.push(z);
            expert_caches.push(cache);
        }
        let (fused, gating_cache, weights) = match self.kind {
            ModelKind::PositionOnly | ModelKind::VisionOnly => (embeddings[0].clone(), None, None),
            ModelKind::ConcatFusion => (concat(embeddings.iter()), None, None),
            ModelKind::Moe => {
                let (w, cache) = if self.freeze_gating {
                    (FusionWeights::uniform(self.active.len()), None)
                } else {
                    let gating = self.gating.as_ref().expect("checked at construction");
                    let input = match self.gating_input {
                        GatingInput::Raw => concat(x.iter().map(AsRef::as_ref)),
                        GatingInput::Embeddings => concat(embeddings.iter()),
                    };
                    let (g_logits, cache) = gating.forward(&input)?;
                    (self.gating_from_logits(&g_logits)?, Some(cache))
                };
                (fuse(&embeddings, &w)?, cache, Some(w.0))
            }
        };
        let (logits, head_cache) = self.head.forward(&fused)?;
        Ok(Trace {
            expert_caches,
            embeddings,
            gating_cache,
            weights,
            head_cache,
            logits,
        })
    }

    pub fn predict<X: AsRef<[f64]>>(&self, x: &[X]) -> Result<Prediction> {
        let t = self.trace(x)?;
        Ok(Prediction {
            beam: argmax(&t.logits),
            logits: t.logits,
            weights: t.weights.map(FusionWeights),
        })
    }

    /// Adds `scale * dL/dtheta` for one sample into `grads` and returns the
    /// sample's cross-entropy loss.
    pub fn accumulate_gradients<X: AsRef<[f64]>>(
        &self,
        x: &[X],
        label: usize,
        grads: &mut ModelGradients,
        scale: f64,
    ) -> Result<f64> {
        let t = self.trace(x)?;
        if t.logits.iter().any(|v| !v.is_finite()) {
            return Ok(f64::NAN);
        }
        let (loss, dlogits) = cross_entropy_loss(&t.logits, label)?;
        let dfused = self
            .head
            .backward_into(&t.head_cache, &dlogits, &mut grads.head, scale)?;
        let lz = self.embedding_dim();
        let mut dz: Vec<Vec<f64>> = match self.kind {
            ModelKind::PositionOnly | ModelKind::VisionOnly => vec![dfused],
            ModelKind::ConcatFusion => dfused.chunks(lz).map(<[f64]>::to_vec).collect(),
            ModelKind::Moe => {
                let w = t.weights.as_ref().expect("mixture trace has weights");
                let mut dz: Vec<Vec<f64>> = w
                    .iter()
                    .map(|&wd| dfused.iter().map(|g| wd * g).collect())
                    .collect();
                if let Some(cache) = &t.gating_cache {
                    // dL/dw_d = <dL/dz, z_d>; softmax Jacobian: da_k = w_k (dw_k - sum_j w_j dw_j)
                    let dw: Vec<f64> = t
                        .embeddings
                        .iter()
                        .map(|z| z.iter().zip(&dfused).map(|(a, b)| a * b).sum())
                        .collect();
                    let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                    let da: Vec<f64> = w.iter().zip(&dw).map(|(wk, g)| wk * (g - mean)).collect();
                    let gating = self.gating.as_ref().expect("checked at construction");
                    let gating_grads = grads.gating.as_mut().ok_or_else(|| {
                        Error::shape("gradient set lacks a gating entry")
                    })?;
                    let dinput = gating.backward_into(cache, &da, gating_grads, scale)?;
                    if self.gating_input == GatingInput::Embeddings {
                        for (dzd, chunk) in dz.iter_mut().zip(dinput.chunks(lz)) {
                            for (a, b) in dzd.iter_mut().zip(chunk) {
                                *a += b;
                            }
                        }
                    }
                }
                dz
            }
        };
        for (((e, cache), g), dzd) in self
            .experts
            .iter()
            .zip(&t.expert_caches)
            .zip(&mut grads.experts)
            .zip(dz.iter_mut())
        {
            e.backward_into(cache, dzd, g, scale)?;
        }
        Ok(loss)
    }

    /// Cross-entropy loss of one sample and exact gradients for every
    /// expert, the gating network and the head.
    pub fn moe_backward<X: AsRef<[f64]>>(
        &self,
        x: &[X],
        label: usize,
    ) -> Result<(f64, ModelGradients)> {
        if label >= self.num_beams() {
            return Err(Error::domain(format!(
                "label {label} outside [0, {})",
                self.num_beams()
            )));
        }
        let mut grads = ModelGradients::zeros_like(self);
        let loss = self.accumulate_gradients(x, label, &mut grads, 1.0)?;
        Ok((loss, grads))
    }

    pub fn loss<X: AsRef<[f64]>>(&self, x: &[X], label: usize) -> Result<f64> {
        Ok(cross_entropy_loss(&self.predict(x)?.logits, label)?.0)
    }

    pub fn apply_gradients(&mut self, grads: &ModelGradients, lr: f64) -> Result<()> {
        for (e, g) in self.experts.iter_mut().zip(&grads.experts) {
            e.apply_gradient(g, lr)?;
        }
        if !self.freeze_gating {
            if let (Some(net), Some(g)) = (&mut self.gating, &grads.gating) {
                net.apply_gradient(g, lr)?;
            }
        }
        self.head.apply_gradient(&grads.head, lr)
    }

    /// Whether the model can consume samples shaped like `dataset`.
    pub fn check_compatible(&self, dataset: &Dataset) -> Result<()> {
        if dataset.modality_dims() != self.modality_dims.as_slice() {
            return Err(Error::shape(format!(
                "model modality dims {:?} vs dataset {:?}",
                self.modality_dims,
                dataset.modality_dims()
            )));
        }
        if dataset.header().num_beams != self.num_beams() {
            return Err(Error::shape(format!(
                "model predicts {} beams, dataset has {}",
                self.num_beams(),
                dataset.header().num_beams
            )));
        }
        Ok(())
    }
}

/// Unimodal, concatenation or mixture model with the shared interface.
pub fn build_baseline(
    kind: ModelKind,
    modality_dims: &[usize],
    num_beams: usize,
    cfg: &ModelConfig,
) -> Result<BeamModel> {
    BeamModel::build(kind, modality_dims, num_beams, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Samples per update; gradients are averaged over the batch. `1`
    /// updates after every sample.
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Stop after this many epochs without a validation top-1 improvement.
    pub early_stop_patience: Option<usize>,
    pub optimizer: OptimizerKind,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 150,
            batch_size: 32,
            shuffle_seed: 0,
            early_stop_patience: None,
            optimizer: OptimizerKind::Sgd,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::config("early_stop_patience", "must be >= 1 when set"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation split is empty.
    pub val_top1: Option<f64>,
}

/// Adaptive-moment state for every network, in [`BeamModel::networks`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAdamState {
    pub networks: Vec<AdamState>,
}

/// A model together with everything needed to continue training it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub model: BeamModel,
    pub history: Vec<EpochRecord>,
    pub adam: Option<ModelAdamState>,
}

impl TrainingRun {
    pub fn new(model: BeamModel) -> Self {
        Self {
            model,
            history: Vec::new(),
            adam: None,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    fn early_stopped(&self, patience: Option<usize>) -> bool {
        let Some(p) = patience else { return false };
        let mut best = f64::NEG_INFINITY;
        let mut since = 0;
        for rec in &self.history {
            match rec.val_top1 {
                Some(v) if v > best => {
                    best = v;
                    since = 0;
                }
                _ => since += 1,
            }
        }
        since >= p
    }
}

/// Top-1 accuracy of `model` over `indices` of `dataset`; `None` if empty.
pub fn top1_on(model: &BeamModel, dataset: &Dataset, indices: &[usize]) -> Result<Option<f64>> {
    if indices.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for &i in indices {
        let s = &dataset.samples()[i];
        if model.predict(&s.modalities)?.beam == s.label {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / indices.len() as f64))
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train(model: BeamModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainingRun> {
    continue_training(TrainingRun::new(model), dataset, cfg)
}

/// Runs epochs `run.epochs_done() + 1 ..= cfg.epochs`.
///
/// Each epoch shuffles the training split with a generator keyed by
/// `(shuffle_seed, epoch)`, walks it in batches of `batch_size`, and applies
/// one update per batch with the batch-averaged gradient. Training from
/// scratch to `E` epochs and resuming a run stopped at `k < E` produce the
/// same parameters.
pub fn continue_training(
    mut run: TrainingRun,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainingRun> {
    cfg.validate()?;
    run.model.check_compatible(dataset)?;
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::domain("training split is empty"));
    }
    let val_idx = dataset.indices(Split::Val);
    if cfg.optimizer == OptimizerKind::Adam && run.adam.is_none() {
        run.adam = Some(ModelAdamState {
            networks: run.model.networks().into_iter().map(AdamState::new).collect(),
        });
    }
    let mut grads = ModelGradients::zeros_like(&run.model);
    let mut order = train_idx.clone();
    while run.epochs_done() < cfg.epochs && !run.early_stopped(cfg.early_stop_patience) {
        let epoch = run.epochs_done() + 1;
        order.copy_from_slice(&train_idx);
        order.shuffle(&mut seed::rng(cfg.shuffle_seed, epoch as u64, streams::SHUFFLE));
        let mut total_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &dataset.samples()[i];
                let loss = run
                    .model
                    .accumulate_gradients(&s.modalities, s.label, &mut grads, scale)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        sample_id: s.sample_id,
                        value: loss,
                    });
                }
                total_loss += loss;
            }
            match (&cfg.optimizer, &mut run.adam) {
                (OptimizerKind::Adam, Some(state)) => {
                    let mut gs: Vec<&GradientSet> = grads.experts.iter().collect();
                    let freeze = run.model.freeze_gating;
                    if let Some(g) = &grads.gating {
                        gs.push(g);
                    }
                    gs.push(&grads.head);
                    let n_experts = run.model.experts.len();
                    for (k, ((net, st), g)) in run
                        .model
                        .networks_mut()
                        .into_iter()
                        .zip(&mut state.networks)
                        .zip(gs)
                        .enumerate()
                    {
                        let is_gating = freeze && k == n_experts && grads.gating.is_some();
                        if !is_gating {
                            st.update(net, g, cfg.learning_rate, &cfg.adam)?;
                        }
                    }
                }
                _ => run.model.apply_gradients(&grads, cfg.learning_rate)?,
            }
        }
        let train_loss = total_loss / train_idx.len() as f64;
        let val_top1 = top1_on(&run.model, dataset, &val_idx)?;
        run.history.push(EpochRecord {
            epoch,
            train_loss,
            val_top1,
        });
    }
    Ok(run)
}
