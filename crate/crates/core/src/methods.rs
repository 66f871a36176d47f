//! Trainers and scorers for the eleven baselines: four fusion autoencoders
//! (SUM, MAX, NN, TF), three alignment autoencoders (DIS, SIM, DCCA), the
//! per-view DAE, the simplified per-view DSVDD (DSV), and the two generative
//! self-supervised predictors (PPRD, SPRD).
//!
//! Loss conventions: reconstruction terms are summed over views and averaged
//! over the batch. The DIS and SIM alignment measures sum over the batch, so
//! they are scaled by 1/N before entering L = L_r + alpha * (-A); the DCCA
//! correlation is already batch-normalized. L2 regularization is applied by
//! the optimizer (gradient + lambda * theta), matching a lambda/2 ||theta||^2
//! loss term.

use crate::alignment::{alignment_measure, combined_loss, AlignKind, AlignSpec};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, init_fusion, install_fusion, FusionKind, FusionParams, FusionSpec, FusionVars,
};
use crate::nn::{forward_mlp, install_mlp, Activation, Adam, Mlp, MlpSpec, MlpVars};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::fmt;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodId {
    Sum,
    Max,
    Nn,
    Tf,
    Dis,
    Sim,
    Dcca,
    Dae,
    Dsv,
    Pprd,
    Sprd,
}

pub const ALL_METHODS: [MethodId; 11] = [
    MethodId::Sum,
    MethodId::Max,
    MethodId::Nn,
    MethodId::Tf,
    MethodId::Dis,
    MethodId::Sim,
    MethodId::Dcca,
    MethodId::Dae,
    MethodId::Dsv,
    MethodId::Pprd,
    MethodId::Sprd,
];

impl MethodId {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sum => "SUM",
            Self::Max => "MAX",
            Self::Nn => "NN",
            Self::Tf => "TF",
            Self::Dis => "DIS",
            Self::Sim => "SIM",
            Self::Dcca => "DCCA",
            Self::Dae => "DAE",
            Self::Dsv => "DSV",
            Self::Pprd => "PPRD",
            Self::Sprd => "SPRD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SUM" => Ok(Self::Sum),
            "MAX" => Ok(Self::Max),
            "NN" => Ok(Self::Nn),
            "TF" => Ok(Self::Tf),
            "DIS" => Ok(Self::Dis),
            "SIM" => Ok(Self::Sim),
            "DCCA" => Ok(Self::Dcca),
            "DAE" => Ok(Self::Dae),
            "DSV" => Ok(Self::Dsv),
            "PPRD" => Ok(Self::Pprd),
            "SPRD" => Ok(Self::Sprd),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }

    pub fn is_fusion(self) -> bool {
        matches!(self, Self::Sum | Self::Max | Self::Nn | Self::Tf)
    }

    pub fn is_alignment(self) -> bool {
        matches!(self, Self::Dis | Self::Sim | Self::Dcca)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl serde::Serialize for MethodId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

/// View-index partition for the generative pretext tasks: inputs P are
/// encoded and fused, targets Q are decoded and supervised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewPartition {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl ViewPartition {
    pub fn new(inputs: Vec<usize>, targets: Vec<usize>, view_count: usize) -> Result<Self> {
        if inputs.is_empty() || targets.is_empty() {
            return Err(Error::Config("partition sides must be non-empty".into()));
        }
        let mut sorted_in = inputs.clone();
        let mut sorted_tg = targets.clone();
        sorted_in.sort_unstable();
        sorted_in.dedup();
        sorted_tg.sort_unstable();
        sorted_tg.dedup();
        if sorted_in == sorted_tg {
            return Err(Error::Config("partition sides must differ".into()));
        }
        let mut union = sorted_in;
        union.extend(&sorted_tg);
        union.sort_unstable();
        union.dedup();
        if union != (0..view_count).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "partition must cover all {view_count} views, got union {union:?}"
            )));
        }
        Ok(Self { inputs, targets })
    }

    /// Predict view v from all the others.
    pub fn pprd(v: usize, view_count: usize) -> Result<Self> {
        let inputs = (0..view_count).filter(|&i| i != v).collect();
        Self::new(inputs, vec![v], view_count)
    }

    /// Predict all views from view v alone.
    pub fn sprd(v: usize, view_count: usize) -> Result<Self> {
        Self::new(vec![v], (0..view_count).collect(), view_count)
    }
}

#[derive(Debug, Clone)]
pub struct MethodConfig {
    pub method: MethodId,
    pub view_dims: Vec<usize>,
    /// Shared embedding dimension D.
    pub bottleneck: usize,
    /// Encoder hidden widths; None means one layer of max(64, d_v / 2).
    pub hidden: Option<Vec<usize>>,
    pub fusion: Option<FusionSpec>,
    pub align: Option<AlignSpec>,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub dsv_pretrain_epochs: usize,
}

impl MethodConfig {
    pub fn new(method: MethodId, view_dims: Vec<usize>) -> Self {
        let bottleneck = 32;
        let fusion = match method {
            MethodId::Sum => Some(FusionSpec::sum()),
            MethodId::Max => Some(FusionSpec::max()),
            MethodId::Nn => Some(FusionSpec::nn(vec![64.max(bottleneck)])),
            MethodId::Tf => Some(FusionSpec::tf(crate::fusion::DEFAULT_TF_RANK)),
            _ => None,
        };
        let align = match method {
            MethodId::Dis => Some(AlignSpec::dis()),
            MethodId::Sim => Some(AlignSpec::sim()),
            MethodId::Dcca => Some(AlignSpec::dcca()),
            _ => None,
        };
        Self {
            method,
            view_dims,
            bottleneck,
            hidden: None,
            fusion,
            align,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 200,
            batch: 128,
            seed: 0,
            dsv_pretrain_epochs: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // DAE has no cross-view coupling, so a single view is meaningful
        // (best-single-view reference); every other method needs >= 2
        let min_views = if self.method == MethodId::Dae { 1 } else { 2 };
        if self.view_dims.len() < min_views {
            return Err(Error::Config(format!(
                "method {} needs at least {min_views} views, got {}",
                self.method,
                self.view_dims.len()
            )));
        }
        if self.view_dims.contains(&0) {
            return Err(Error::Config("zero view dimension".into()));
        }
        if self.bottleneck == 0 {
            return Err(Error::Config("bottleneck must be >= 1".into()));
        }
        if let Some(h) = &self.hidden {
            if h.contains(&0) {
                return Err(Error::Config("zero hidden width".into()));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be >= 1".into()));
        }
        match (&self.fusion, self.method.is_fusion()) {
            (Some(f), true) => {
                let want = match self.method {
                    MethodId::Sum => FusionKind::Sum,
                    MethodId::Max => FusionKind::Max,
                    MethodId::Nn => FusionKind::Nn,
                    _ => FusionKind::Tf,
                };
                if f.kind != want {
                    return Err(Error::Config(format!(
                        "method {} requires {want:?} fusion, got {:?}",
                        self.method, f.kind
                    )));
                }
                f.validate(&vec![self.bottleneck; self.view_dims.len()])?;
            }
            (None, true) => {
                return Err(Error::Config(format!(
                    "method {} requires a fusion spec",
                    self.method
                )))
            }
            (Some(_), false) => {
                return Err(Error::Config(format!(
                    "method {} takes no fusion spec",
                    self.method
                )))
            }
            (None, false) => {}
        }
        match (&self.align, self.method.is_alignment()) {
            (Some(a), true) => {
                let want = match self.method {
                    MethodId::Dis => AlignKind::Dis,
                    MethodId::Sim => AlignKind::Sim,
                    _ => AlignKind::Dcca,
                };
                if a.kind != want {
                    return Err(Error::Config(format!(
                        "method {} requires {want:?} alignment, got {:?}",
                        self.method, a.kind
                    )));
                }
                a.validate()?;
            }
            (None, true) => {
                return Err(Error::Config(format!(
                    "method {} requires an alignment spec",
                    self.method
                )))
            }
            (Some(_), false) => {
                return Err(Error::Config(format!(
                    "method {} takes no alignment spec",
                    self.method
                )))
            }
            (None, false) => {}
        }
        Ok(())
    }

    fn hidden_for(&self, d_in: usize) -> Vec<usize> {
        self.hidden
            .clone()
            .unwrap_or_else(|| vec![64.max(d_in / 2)])
    }

    fn encoder_spec(&self, view: usize) -> MlpSpec {
        let d = self.view_dims[view];
        let mut dims = vec![d];
        dims.extend(self.hidden_for(d));
        dims.push(self.bottleneck);
        let mut spec = MlpSpec::new(dims);
        if self.method == MethodId::Dsv {
            // a bias-free encoder with bounded activations can still collapse
            // to a near-constant map (saturation acts like a bias); relu is
            // positively homogeneous, which rules that out
            spec = spec.without_bias();
            spec.hidden = Activation::Relu;
        }
        spec
    }

    fn decoder_spec(&self, view: usize) -> MlpSpec {
        let d = self.view_dims[view];
        let mut dims = vec![self.bottleneck];
        let mut hidden = self.hidden_for(d);
        hidden.reverse();
        dims.extend(hidden);
        dims.push(d);
        MlpSpec::new(dims)
    }
}

/// A trained model: per-view encoders and decoders, fusion parameters for
/// the fusion methods, and fixed per-view centers for DSV.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: MethodConfig,
    pub encoders: Vec<Mlp>,
    pub decoders: Vec<Mlp>,
    pub fusion: Option<FusionParams>,
    pub centers: Option<Vec<Tensor>>,
}

impl Model {
    pub fn init(config: MethodConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let v_count = config.view_dims.len();
        let mut encoders = Vec::with_capacity(v_count);
        for v in 0..v_count {
            encoders.push(Mlp::init(config.encoder_spec(v), rng)?);
        }
        let mut decoders = Vec::with_capacity(v_count);
        for v in 0..v_count {
            decoders.push(Mlp::init(config.decoder_spec(v), rng)?);
        }
        let fusion = match &config.fusion {
            Some(spec) => Some(init_fusion(
                spec,
                &vec![config.bottleneck; v_count],
                config.bottleneck,
                rng,
            )?),
            None => None,
        };
        Ok(Self {
            config,
            encoders,
            decoders,
            fusion,
            centers: None,
        })
    }

    /// Named parameter tensors (plus centers) in canonical order.
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (v, m) in self.encoders.iter().enumerate() {
            for (l, w) in m.weights.iter().enumerate() {
                out.push((format!("enc{v}.w{l}"), w));
            }
            for (l, b) in m.biases.iter().enumerate() {
                out.push((format!("enc{v}.b{l}"), b));
            }
        }
        for (v, m) in self.decoders.iter().enumerate() {
            for (l, w) in m.weights.iter().enumerate() {
                out.push((format!("dec{v}.w{l}"), w));
            }
            for (l, b) in m.biases.iter().enumerate() {
                out.push((format!("dec{v}.b{l}"), b));
            }
        }
        if let Some(f) = &self.fusion {
            if let Some(mlp) = &f.nn {
                for (l, w) in mlp.weights.iter().enumerate() {
                    out.push((format!("fusion.nn.w{l}"), w));
                }
                for (l, b) in mlp.biases.iter().enumerate() {
                    out.push((format!("fusion.nn.b{l}"), b));
                }
            }
            for (v, t) in f.tf_factors.iter().enumerate() {
                out.push((format!("fusion.tf{v}"), t));
            }
            if let Some(b) = &f.tf_bias {
                out.push(("fusion.tfb".to_string(), b));
            }
        }
        if let Some(cs) = &self.centers {
            for (v, c) in cs.iter().enumerate() {
                out.push((format!("center{v}"), c));
            }
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (v, m) in self.encoders.iter_mut().enumerate() {
            for (l, w) in m.weights.iter_mut().enumerate() {
                out.push((format!("enc{v}.w{l}"), w));
            }
            for (l, b) in m.biases.iter_mut().enumerate() {
                out.push((format!("enc{v}.b{l}"), b));
            }
        }
        for (v, m) in self.decoders.iter_mut().enumerate() {
            for (l, w) in m.weights.iter_mut().enumerate() {
                out.push((format!("dec{v}.w{l}"), w));
            }
            for (l, b) in m.biases.iter_mut().enumerate() {
                out.push((format!("dec{v}.b{l}"), b));
            }
        }
        if let Some(f) = &mut self.fusion {
            if let Some(mlp) = &mut f.nn {
                for (l, w) in mlp.weights.iter_mut().enumerate() {
                    out.push((format!("fusion.nn.w{l}"), w));
                }
                for (l, b) in mlp.biases.iter_mut().enumerate() {
                    out.push((format!("fusion.nn.b{l}"), b));
                }
            }
            for (v, t) in f.tf_factors.iter_mut().enumerate() {
                out.push((format!("fusion.tf{v}"), t));
            }
            if let Some(b) = &mut f.tf_bias {
                out.push(("fusion.tfb".to_string(), b));
            }
        }
        if let Some(cs) = &mut self.centers {
            for (v, c) in cs.iter_mut().enumerate() {
                out.push((format!("center{v}"), c));
            }
        }
        out
    }

    /// Serialize as magic "MVOC", version u32, then length-prefixed named
    /// f64 tensors (u32 name length, name, u32 rank, u32 dims, LE f64 data).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MVOC");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for (name, t) in self.named_tensors() {
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Rebuild a model from `save` output; the config must match the one the
    /// model was trained with.
    pub fn load(config: MethodConfig, path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 8 || &bytes[..4] != b"MVOC" {
            return Err(Error::Data(format!(
                "{}: missing MVOC magic header",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != 1 {
            return Err(Error::Data(format!("unsupported model version {version}")));
        }
        let mut loaded: Vec<(String, Tensor)> = Vec::new();
        let mut pos = 8usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Data("model file truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        while pos < bytes.len() {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Data("model tensor name is not utf-8".into()))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let data: Vec<f64> = take(&mut pos, count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            loaded.push((name, Tensor::new(shape, data)?));
        }
        let mut model = Model::init(config, &mut Rng::new(0))?;
        let has_centers = loaded.iter().any(|(n, _)| n.starts_with("center"));
        if has_centers {
            let d = model.config.bottleneck;
            model.centers = Some(vec![Tensor::zeros(&[d]); model.config.view_dims.len()]);
        }
        let mut slots = model.named_tensors_mut();
        for (name, value) in loaded {
            let slot = slots
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Data(format!("unexpected tensor '{name}' in model file")))?;
            if slot.1.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "tensor '{name}': file shape {:?}, config shape {:?}",
                    value.shape(),
                    slot.1.shape()
                )));
            }
            *slot.1 = value;
        }
        Ok(model)
    }
}

/// Column mean of the embeddings with entries forced away from zero:
/// |c_i| < 0.1 becomes +/-0.1 with the sign preserved (+0.1 at exact zero).
pub fn dsvdd_init_center(embeddings: &Tensor) -> Result<Tensor> {
    let c = embeddings.col_means()?;
    Ok(c.map(|v| {
        if v.abs() >= 0.1 {
            v
        } else if v < 0.0 {
            -0.1
        } else {
            0.1
        }
    }))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    /// DSV only: autoencoder warm-up before the center objective.
    Pretrain,
    Main,
}

fn uses_decoders(method: MethodId, stage: Stage) -> bool {
    !(method == MethodId::Dsv && stage == Stage::Main)
}

enum Outputs {
    /// Per-view reconstruction of the inputs.
    Recon(Vec<NodeId>),
    /// Per-view embeddings (DSV).
    Embed(Vec<NodeId>),
    /// PPRD: prediction of view v from the rest.
    Pred(Vec<NodeId>),
    /// SPRD: grid[input][target] prediction.
    Grid(Vec<Vec<NodeId>>),
}

struct Built {
    g: Graph,
    inputs: Vec<NodeId>,
    params: Vec<NodeId>,
    loss: Option<NodeId>,
    /// Reconstruction (or primary objective) component for logging.
    recon: Option<NodeId>,
    outputs: Outputs,
    warning: Option<String>,
    rounds: Vec<ViewPartition>,
}

/// Handles for differentiating a method's training loss on a fixed batch.
pub struct LossGraph {
    pub graph: Graph,
    pub inputs: Vec<NodeId>,
    pub params: Vec<NodeId>,
    pub loss: NodeId,
}

/// (1/n) sum_v ||pred_v - target_v||^2 over already-built nodes.
fn recon_loss(g: &mut Graph, preds: &[NodeId], targets: &[NodeId], n: usize) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, &t) in preds.iter().zip(targets) {
        let d = g.sub(p, t)?;
        terms.push(g.sum_squares(d));
    }
    let total = g.add_n(&terms)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

fn check_views(config: &MethodConfig, views: &[Tensor]) -> Result<usize> {
    if views.len() != config.view_dims.len() {
        return Err(Error::Data(format!(
            "expected {} views, got {}",
            config.view_dims.len(),
            views.len()
        )));
    }
    let (n, _) = views[0].dims2()?;
    for (v, t) in views.iter().enumerate() {
        let (rows, d) = t.dims2()?;
        if d != config.view_dims[v] {
            return Err(Error::Shape(format!(
                "view {v}: expected dim {}, got {d}",
                config.view_dims[v]
            )));
        }
        if rows != n {
            return Err(Error::Data(format!("view {v}: {rows} rows, expected {n}")));
        }
    }
    Ok(n)
}

/// Build the method's computation for one bound batch. Inputs are bound
/// immediately so data-dependent checks (DCCA conditioning) can run.
fn build(model: &Model, stage: Stage, batch: &[Tensor], with_loss: bool) -> Result<Built> {
    let cfg = &model.config;
    let n = check_views(cfg, batch)?;
    let v_count = batch.len();
    let mut g = Graph::new();
    let mut inputs = Vec::with_capacity(v_count);
    for (v, x) in batch.iter().enumerate() {
        let id = g.leaf(&format!("x{v}"), x.shape());
        g.bind(id, x.clone())?;
        inputs.push(id);
    }
    let mut params = Vec::new();
    let mut enc_vars = Vec::with_capacity(v_count);
    for (v, m) in model.encoders.iter().enumerate() {
        let vars = install_mlp(&mut g, &format!("enc{v}"), m);
        params.extend(vars.weights.iter().copied());
        params.extend(vars.biases.iter().copied());
        enc_vars.push(vars);
    }
    let mut dec_vars: Vec<MlpVars> = Vec::new();
    if uses_decoders(cfg.method, stage) {
        for (v, m) in model.decoders.iter().enumerate() {
            let vars = install_mlp(&mut g, &format!("dec{v}"), m);
            params.extend(vars.weights.iter().copied());
            params.extend(vars.biases.iter().copied());
            dec_vars.push(vars);
        }
    }
    let fusion_vars = match &model.fusion {
        Some(f) => {
            let vars = install_fusion(&mut g, "fusion", f)?;
            if let Some(mlp) = &vars.nn {
                params.extend(mlp.weights.iter().copied());
                params.extend(mlp.biases.iter().copied());
            }
            params.extend(vars.tf_factors.iter().copied());
            if let Some(b) = vars.tf_bias {
                params.push(b);
            }
            Some(vars)
        }
        None => None,
    };

    let mut warning = None;
    let mut rounds = Vec::new();
    let (loss, recon, outputs) = match (stage, cfg.method) {
        (Stage::Pretrain, _) | (_, MethodId::Dae) => {
            // per-view autoencoders
            let mut xhats = Vec::with_capacity(v_count);
            for v in 0..v_count {
                let h = forward_mlp(&mut g, &enc_vars[v], inputs[v])?;
                xhats.push(forward_mlp(&mut g, &dec_vars[v], h)?);
            }
            let loss = if with_loss {
                Some(recon_loss(&mut g, &xhats, &inputs, n)?)
            } else {
                None
            };
            (loss, loss, Outputs::Recon(xhats))
        }
        (_, MethodId::Sum | MethodId::Max | MethodId::Nn | MethodId::Tf) => {
            let spec = cfg.fusion.as_ref().unwrap();
            let vars = fusion_vars.as_ref().unwrap();
            let mut hs = Vec::with_capacity(v_count);
            for v in 0..v_count {
                hs.push(forward_mlp(&mut g, &enc_vars[v], inputs[v])?);
            }
            let fused = fuse(&mut g, spec, vars, &hs)?;
            let mut xhats = Vec::with_capacity(v_count);
            for v in 0..v_count {
                xhats.push(forward_mlp(&mut g, &dec_vars[v], fused)?);
            }
            let loss = if with_loss {
                Some(recon_loss(&mut g, &xhats, &inputs, n)?)
            } else {
                None
            };
            (loss, loss, Outputs::Recon(xhats))
        }
        (_, MethodId::Dis | MethodId::Sim | MethodId::Dcca) => {
            let spec = cfg.align.as_ref().unwrap();
            let mut hs = Vec::with_capacity(v_count);
            let mut xhats = Vec::with_capacity(v_count);
            for v in 0..v_count {
                let h = forward_mlp(&mut g, &enc_vars[v], inputs[v])?;
                hs.push(h);
                xhats.push(forward_mlp(&mut g, &dec_vars[v], h)?);
            }
            if with_loss {
                let lr = recon_loss(&mut g, &xhats, &inputs, n)?;
                let measure = alignment_measure(&mut g, spec, &hs)?;
                warning = measure.warning;
                // DIS and SIM sum over the batch; DCCA does not
                let a = match spec.kind {
                    AlignKind::Dis | AlignKind::Sim => g.scale(measure.node, 1.0 / n as f64),
                    AlignKind::Dcca => measure.node,
                };
                let loss = combined_loss(&mut g, spec, lr, a)?;
                (Some(loss), Some(lr), Outputs::Recon(xhats))
            } else {
                (None, None, Outputs::Recon(xhats))
            }
        }
        (_, MethodId::Dsv) => {
            let mut hs = Vec::with_capacity(v_count);
            for v in 0..v_count {
                hs.push(forward_mlp(&mut g, &enc_vars[v], inputs[v])?);
            }
            let loss = if with_loss {
                let centers = model.centers.as_ref().ok_or_else(|| {
                    Error::Config("DSV center objective requires initialized centers".into())
                })?;
                let mut terms = Vec::with_capacity(v_count);
                for (v, &h) in hs.iter().enumerate() {
                    let neg_c = g.constant(&format!("negcenter{v}"), centers[v].scale(-1.0));
                    let d = g.add_row_broadcast(h, neg_c)?;
                    terms.push(g.sum_squares(d));
                }
                let total = g.add_n(&terms)?;
                Some(g.scale(total, 1.0 / n as f64))
            } else {
                None
            };
            (loss, loss, Outputs::Embed(hs))
        }
        (_, MethodId::Pprd) => {
            let sum_spec = FusionSpec::sum();
            let no_vars = FusionVars::default();
            let mut hs = Vec::with_capacity(v_count);
            for v in 0..v_count {
                hs.push(forward_mlp(&mut g, &enc_vars[v], inputs[v])?);
            }
            let mut preds = Vec::with_capacity(v_count);
            let mut terms = Vec::with_capacity(v_count);
            for v in 0..v_count {
                let part = ViewPartition::pprd(v, v_count)?;
                let in_hs: Vec<NodeId> = part.inputs.iter().map(|&i| hs[i]).collect();
                let fused = if in_hs.len() == 1 {
                    in_hs[0]
                } else {
                    fuse(&mut g, &sum_spec, &no_vars, &in_hs)?
                };
                let pred = forward_mlp(&mut g, &dec_vars[v], fused)?;
                if with_loss {
                    let d = g.sub(pred, inputs[v])?;
                    terms.push(g.sum_squares(d));
                }
                preds.push(pred);
                rounds.push(part);
            }
            let loss = if with_loss {
                let total = g.add_n(&terms)?;
                Some(g.scale(total, 1.0 / n as f64))
            } else {
                None
            };
            (loss, loss, Outputs::Pred(preds))
        }
        (_, MethodId::Sprd) => {
            let mut grid = Vec::with_capacity(v_count);
            let mut terms = Vec::new();
            for v in 0..v_count {
                let part = ViewPartition::sprd(v, v_count)?;
                let h = forward_mlp(&mut g, &enc_vars[v], inputs[v])?;
                let mut row = Vec::with_capacity(v_count);
                for &j in &part.targets {
                    let pred = forward_mlp(&mut g, &dec_vars[j], h)?;
                    if with_loss {
                        let d = g.sub(pred, inputs[j])?;
                        terms.push(g.sum_squares(d));
                    }
                    row.push(pred);
                }
                grid.push(row);
                rounds.push(part);
            }
            let loss = if with_loss {
                let total = g.add_n(&terms)?;
                Some(g.scale(total, 1.0 / n as f64))
            } else {
                None
            };
            (loss, loss, Outputs::Grid(grid))
        }
    };

    Ok(Built {
        g,
        inputs,
        params,
        loss,
        recon,
        outputs,
        warning,
        rounds,
    })
}

/// Training loss graph for a fixed batch (gradient-checking entry point).
/// For DSV this is the center objective, so centers must be initialized.
pub fn loss_graph(model: &Model, batch: &[Tensor]) -> Result<LossGraph> {
    let built = build(model, Stage::Main, batch, true)?;
    Ok(LossGraph {
        graph: built.g,
        inputs: built.inputs,
        params: built.params,
        loss: built.loss.unwrap(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Mean total loss per epoch of the main stage.
    pub epoch_losses: Vec<f64>,
    /// Mean reconstruction (or primary objective) per epoch.
    pub epoch_recon: Vec<f64>,
    pub warnings: Vec<String>,
    /// Round partitions of the last built batch (PPRD/SPRD bookkeeping).
    pub rounds: Vec<ViewPartition>,
    /// DSV center objective on the full training set (after center
    /// initialization, after training).
    pub dsv_center_objective: Option<(f64, f64)>,
}

fn gather(views: &[Tensor], idx: &[usize]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(views.len());
    for view in views {
        let (_, d) = view.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(view.row(i));
        }
        out.push(Tensor::new(vec![idx.len(), d], data)?);
    }
    Ok(out)
}

/// Current master parameter tensors for a stage, in install order.
fn stage_params_mut(model: &mut Model, stage: Stage) -> Vec<&mut Tensor> {
    let method = model.config.method;
    let mut out: Vec<&mut Tensor> = Vec::new();
    for m in model.encoders.iter_mut() {
        out.extend(m.weights.iter_mut());
        out.extend(m.biases.iter_mut());
    }
    if uses_decoders(method, stage) {
        for m in model.decoders.iter_mut() {
            out.extend(m.weights.iter_mut());
            out.extend(m.biases.iter_mut());
        }
    }
    if let Some(f) = &mut model.fusion {
        if let Some(mlp) = &mut f.nn {
            out.extend(mlp.weights.iter_mut());
            out.extend(mlp.biases.iter_mut());
        }
        out.extend(f.tf_factors.iter_mut());
        if let Some(b) = &mut f.tf_bias {
            out.push(b);
        }
    }
    out
}

/// Value in the shape the graph leaf expects (TF factors install flat).
fn graph_form(value: &Tensor, leaf_shape: &[usize]) -> Result<Tensor> {
    if value.shape() == leaf_shape {
        Ok(value.clone())
    } else {
        value.reshape(leaf_shape)
    }
}

fn run_stage(
    model: &mut Model,
    stage: Stage,
    epochs: usize,
    views: &[Tensor],
    rng: &mut Rng,
    log: &mut TrainLog,
    record: bool,
) -> Result<()> {
    let n = check_views(&model.config, views)?;
    let eff_batch = model.config.batch.min(n).max(1);
    let shapes: Vec<Vec<usize>> = stage_params_mut(model, stage)
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let mut adam = Adam::new(model.config.lr, model.config.weight_decay, &shapes);
    let mut order: Vec<usize> = (0..n).collect();
    let mut built: Option<Built> = None;
    let mut built_size = 0usize;
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let mut losses = Vec::new();
        let mut recons = Vec::new();
        let mut start = 0usize;
        while start < n {
            let end = (start + eff_batch).min(n);
            let b = end - start;
            // a trailing singleton breaks batch-statistics measures; drop it
            if b == 1 && n > 1 {
                break;
            }
            let batch = gather(views, &order[start..end])?;
            if built_size != b {
                let bt = build(model, stage, &batch, true)?;
                if let Some(w) = &bt.warning {
                    if !log.warnings.contains(w) {
                        log.warnings.push(w.clone());
                    }
                }
                if record && !bt.rounds.is_empty() {
                    log.rounds = bt.rounds.clone();
                }
                built = Some(bt);
                built_size = b;
            }
            let bt = built.as_mut().unwrap();
            for (&leaf, x) in bt.inputs.iter().zip(&batch) {
                bt.g.bind(leaf, x.clone())?;
            }
            let masters: Vec<Tensor> = stage_params_mut(model, stage)
                .iter()
                .map(|t| (**t).clone())
                .collect();
            for (&id, value) in bt.params.iter().zip(&masters) {
                bt.g.bind(id, graph_form(value, bt.g.shape_of(id))?)?;
            }
            let loss_id = bt.loss.unwrap();
            // shapes are fixed at build time, so a forward-time Shape error
            // can only be the non-finite guard tripping on an overflow
            let diverged = |e: Error| match e {
                Error::Shape(_) => Error::Divergence { epoch },
                other => other,
            };
            let loss_val = bt.g.forward(loss_id).map_err(diverged)?.item();
            if !loss_val.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let recon_val = match bt.recon {
                Some(r) => bt.g.forward(r).map_err(diverged)?.item(),
                None => loss_val,
            };
            let all_grads = bt.g.backward(loss_id)?;
            let mut updated = masters;
            let grads: Vec<Tensor> = bt
                .params
                .iter()
                .zip(&updated)
                .map(|(&id, m)| {
                    let gt = &all_grads[id];
                    if gt.shape() == m.shape() {
                        Ok(gt.clone())
                    } else {
                        gt.reshape(m.shape())
                    }
                })
                .collect::<Result<_>>()?;
            adam.step(&mut updated, &grads)?;
            for (slot, value) in stage_params_mut(model, stage).into_iter().zip(updated) {
                *slot = value;
            }
            losses.push(loss_val);
            recons.push(recon_val);
            start = end;
        }
        if record && !losses.is_empty() {
            log.epoch_losses
                .push(losses.iter().sum::<f64>() / losses.len() as f64);
            log.epoch_recon
                .push(recons.iter().sum::<f64>() / recons.len() as f64);
        }
    }
    Ok(())
}

/// Per-view embeddings of the full input set (no loss graph).
fn forward_embeddings(model: &Model, views: &[Tensor]) -> Result<Vec<Tensor>> {
    let built = build(model, Stage::Main, views, false)?;
    let mut g = built.g;
    let Outputs::Embed(hs) = built.outputs else {
        return Err(Error::Config("embeddings only defined for DSV".into()));
    };
    hs.into_iter().map(|h| g.forward(h).cloned()).collect()
}

/// DSV center objective over the full training set.
fn center_objective(model: &Model, views: &[Tensor]) -> Result<f64> {
    let built = build(model, Stage::Main, views, true)?;
    let mut g = built.g;
    Ok(g.forward(built.loss.unwrap())?.item())
}

pub fn train(config: &MethodConfig, train_views: &[Tensor]) -> Result<Model> {
    train_with_log(config, train_views).map(|(m, _)| m)
}

pub fn train_with_log(config: &MethodConfig, train_views: &[Tensor]) -> Result<(Model, TrainLog)> {
    config.validate()?;
    if train_views.is_empty() {
        return Err(Error::Data("no training views".into()));
    }
    check_views(config, train_views)?;
    let mut rng = Rng::new(config.seed);
    let mut model = Model::init(config.clone(), &mut rng)?;
    let mut log = TrainLog::default();
    if config.method == MethodId::Dsv {
        run_stage(
            &mut model,
            Stage::Pretrain,
            config.dsv_pretrain_epochs,
            train_views,
            &mut rng,
            &mut log,
            false,
        )?;
        let embeds = forward_embeddings(&model, train_views)?;
        let centers: Result<Vec<Tensor>> = embeds.iter().map(dsvdd_init_center).collect();
        model.centers = Some(centers?);
        let before = center_objective(&model, train_views)?;
        run_stage(
            &mut model,
            Stage::Main,
            config.epochs,
            train_views,
            &mut rng,
            &mut log,
            true,
        )?;
        let after = center_objective(&model, train_views)?;
        log.dsv_center_objective = Some((before, after));
    } else {
        run_stage(
            &mut model,
            Stage::Main,
            config.epochs,
            train_views,
            &mut rng,
            &mut log,
            true,
        )?;
    }
    Ok((model, log))
}

/// Sum of squared differences per row.
fn rowwise_sq_err(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = pred.dims2()?;
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..d {
            let diff = pred.get2(i, j) - target.get2(i, j);
            s += diff * diff;
        }
        out.push(s);
    }
    Ok(out)
}

/// Per-view anomaly scores, one column per view, higher = more anomalous.
/// Reconstruction and prediction errors are normalized by the view dimension;
/// DSV distances by the embedding dimension.
pub fn score(model: &Model, test_views: &[Tensor]) -> Result<Tensor> {
    let cfg = &model.config;
    if test_views.len() != cfg.view_dims.len() {
        return Err(Error::Shape(format!(
            "expected {} views, got {}",
            cfg.view_dims.len(),
            test_views.len()
        )));
    }
    for (v, t) in test_views.iter().enumerate() {
        let (_, d) = t.dims2()?;
        if d != cfg.view_dims[v] {
            return Err(Error::Shape(format!(
                "view {v}: expected dim {}, got {d}",
                cfg.view_dims[v]
            )));
        }
    }
    let n = test_views[0].dims2()?.0;
    let v_count = test_views.len();
    let built = build(model, Stage::Main, test_views, false)?;
    let mut g = built.g;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(v_count);
    match built.outputs {
        Outputs::Recon(xhats) | Outputs::Pred(xhats) => {
            for (v, &node) in xhats.iter().enumerate() {
                let pred = g.forward(node)?.clone();
                let errs = rowwise_sq_err(&pred, &test_views[v])?;
                let d = cfg.view_dims[v] as f64;
                cols.push(errs.into_iter().map(|e| e / d).collect());
            }
        }
        Outputs::Embed(hs) => {
            let centers = model
                .centers
                .as_ref()
                .ok_or_else(|| Error::Config("DSV model has no centers".into()))?;
            let dd = cfg.bottleneck as f64;
            for (v, &node) in hs.iter().enumerate() {
                let h = g.forward(node)?.clone();
                let c = &centers[v];
                let (rows, d) = h.dims2()?;
                let mut col = Vec::with_capacity(rows);
                for i in 0..rows {
                    let mut s = 0.0;
                    for j in 0..d {
                        let diff = h.get2(i, j) - c.data()[j];
                        s += diff * diff;
                    }
                    col.push(s / dd);
                }
                cols.push(col);
            }
        }
        Outputs::Grid(grid) => {
            for (v, row) in grid.iter().enumerate() {
                let part = ViewPartition::sprd(v, v_count)?;
                let mut col = vec![0.0; n];
                for (k, &j) in part.targets.iter().enumerate() {
                    let pred = g.forward(row[k])?.clone();
                    let errs = rowwise_sq_err(&pred, &test_views[j])?;
                    let d = cfg.view_dims[j] as f64;
                    for (acc, e) in col.iter_mut().zip(errs) {
                        *acc += e / (d * part.targets.len() as f64);
                    }
                }
                cols.push(col);
            }
        }
    }
    let mut data = Vec::with_capacity(n * v_count);
    for i in 0..n {
        for col in &cols {
            data.push(col[i]);
        }
    }
    Tensor::new(vec![n, v_count], data)
}
