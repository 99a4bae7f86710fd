//! The conditional denoiser f(x, y_t, t): a small UNet with FiLM time
//! conditioning, its named parameter set, and the EMA shadow copy.

mod checkpoint;
mod unet;

pub use checkpoint::{read_checkpoint, write_checkpoint};

use std::collections::HashMap;

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::field::DenseField;
use crate::graph::{DiffGraph, VarId};
use crate::rng;

/// Architecture descriptor. Channel counts follow the task: depth conditions
/// on one RGB image (ch_in = 3 + 1, ch_out = 1), flow on two (ch_in = 2*3 + 2,
/// ch_out = 2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserArch {
    pub ch_in: usize,
    pub ch_out: usize,
    pub base_width: usize,
    /// Number of stride-2 downsampling stages.
    pub levels: usize,
    pub attn_at_bottom: bool,
    /// Sinusoidal time embedding width; must be even.
    pub time_dim: usize,
    /// Group-norm group count; must divide every feature width.
    pub groups: usize,
}

impl DenoiserArch {
    pub fn depth_default() -> Self {
        Self {
            ch_in: 4,
            ch_out: 1,
            base_width: 32,
            levels: 2,
            attn_at_bottom: true,
            time_dim: 64,
            groups: 8,
        }
    }

    pub fn flow_default() -> Self {
        Self {
            ch_in: 8,
            ch_out: 2,
            base_width: 32,
            levels: 2,
            attn_at_bottom: true,
            time_dim: 64,
            groups: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::InvalidArg(format!("time_dim must be even, got {}", self.time_dim)));
        }
        if self.levels == 0 {
            return Err(Error::InvalidArg("levels must be >= 1".into()));
        }
        if self.base_width == 0 || self.base_width % self.groups != 0 {
            return Err(Error::InvalidArg(format!(
                "base_width {} must be a positive multiple of groups {}",
                self.base_width, self.groups
            )));
        }
        if self.ch_in == 0 || self.ch_out == 0 {
            return Err(Error::InvalidArg("ch_in and ch_out must be positive".into()));
        }
        Ok(())
    }

    /// Feature width at level i (0-based); level `levels` is the bottleneck.
    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels
    }
}

/// Sinusoidal embedding of t in [0, 1]: dim/2 sines then dim/2 cosines over
/// geometrically spaced frequencies in [1, 1000] rad. Values stay in [-1, 1];
/// the 1000 rad ceiling bounds the Lipschitz constant.
pub fn time_embed(t: f64, dim: usize) -> Result<DenseField> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::InvalidArg(format!("time embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = DenseField::zeros(1, 1, dim);
    for j in 0..half {
        let frac = if half == 1 { 0.0 } else { j as f64 / (half - 1) as f64 };
        let omega = 1000f64.powf(frac);
        out.data_mut()[j] = (omega * t).sin();
        out.data_mut()[half + j] = (omega * t).cos();
    }
    Ok(out)
}

/// Ordered, named parameter tensors. Names are stable and used as checkpoint
/// table keys.
#[derive(Clone, Debug)]
pub struct ParamSet {
    entries: Vec<(String, DenseField)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, field: DenseField) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate param {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, field));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn field(&self, i: usize) -> &DenseField {
        &self.entries[i].1
    }

    pub fn field_mut(&mut self, i: usize) -> &mut DenseField {
        &mut self.entries[i].1
    }

    pub fn by_name(&self, name: &str) -> Option<&DenseField> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseField)> {
        self.entries.iter().map(|(n, f)| (n.as_str(), f))
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, f)| f.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters bound to a graph as grad leaves, aligned with ParamSet order.
pub struct BoundParams {
    pub ids: Vec<VarId>,
}

/// The denoiser: architecture, trainable parameters, and their EMA shadow.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub arch: DenoiserArch,
    pub params: ParamSet,
    pub ema_params: ParamSet,
    layout: unet::UNetLayout,
}

impl DenoiserModel {
    /// Fresh model with seeded init. Conv kernels use fan-in scaled normals,
    /// biases start at zero, the output head starts at exactly zero (so the
    /// initial prediction is identically zero), and FiLM scales start at one.
    pub fn new(arch: DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let mut stream = rng::stream(seed ^ 0xdd00_1111);
        let layout = unet::UNetLayout::build(&arch, &mut params, &mut stream);
        let ema_params = params.clone();
        Ok(Self { arch, params, ema_params, layout })
    }

    pub(crate) fn from_parts(arch: DenoiserArch, params: ParamSet, ema_params: ParamSet) -> Result<Self> {
        arch.validate()?;
        // Rebuild the layout against a scratch set to learn the canonical
        // names, then remap onto the loaded tensors.
        let mut scratch = ParamSet::new();
        let mut s = rng::stream(0);
        let layout = unet::UNetLayout::build(&arch, &mut scratch, &mut s);
        if scratch.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint carries {} tensors, architecture needs {}",
                params.len(),
                scratch.len()
            )));
        }
        for i in 0..scratch.len() {
            let want = scratch.name(i);
            if params.name(i) != want {
                return Err(Error::Format(format!(
                    "checkpoint tensor {i} named '{}', expected '{want}'",
                    params.name(i)
                )));
            }
            if params.field(i).shape() != scratch.field(i).shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{want}' has shape {:?}, expected {:?}",
                    params.field(i).shape(),
                    scratch.field(i).shape()
                )));
            }
            if ema_params.name(i) != want || ema_params.field(i).shape() != scratch.field(i).shape() {
                return Err(Error::Format(format!("EMA table mismatch at '{want}'")));
            }
        }
        Ok(Self { arch, params, ema_params, layout })
    }

    /// Register all parameters (live or EMA) on a graph as grad leaves.
    pub fn bind(&self, graph: &mut DiffGraph, use_ema: bool) -> BoundParams {
        let set = if use_ema { &self.ema_params } else { &self.params };
        let ids = set.iter().map(|(_, f)| graph.param(f.clone())).collect();
        BoundParams { ids }
    }

    /// Build the forward pass on an existing graph, returning the output var.
    pub fn forward_on(
        &self,
        graph: &mut DiffGraph,
        bound: &BoundParams,
        x: &DenseField,
        y_t: &DenseField,
        t: f64,
    ) -> Result<VarId> {
        self.check_inputs(x, y_t)?;
        self.layout.forward(graph, bound, &self.arch, x, y_t, t)
    }

    /// Plain inference forward on a throwaway graph.
    pub fn forward(&self, x: &DenseField, y_t: &DenseField, t: f64, use_ema: bool) -> Result<DenseField> {
        let mut graph = DiffGraph::new();
        let bound = self.bind(&mut graph, use_ema);
        let out = self.forward_on(&mut graph, &bound, x, y_t, t)?;
        let value = graph.value(out).clone();
        if !value.all_finite() {
            return Err(Error::NonFinite { context: "denoiser forward".into() });
        }
        Ok(value)
    }

    fn check_inputs(&self, x: &DenseField, y_t: &DenseField) -> Result<()> {
        if x.height() != y_t.height() || x.width() != y_t.width() {
            return Err(Error::shape_mismatch(x.shape(), y_t.shape()));
        }
        let got = x.channels() + y_t.channels();
        if got != self.arch.ch_in {
            return Err(Error::ChannelMismatch { expected: self.arch.ch_in, got });
        }
        let div = self.arch.spatial_divisor();
        if x.height() % div != 0 || x.width() % div != 0 {
            return Err(Error::InvalidArg(format!(
                "spatial shape ({}, {}) not divisible by 2^levels = {div}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// One EMA step: ema <- decay * ema + (1 - decay) * params.
    pub fn ema_update(&mut self, decay: f64) {
        for i in 0..self.params.len() {
            let src = self.params.field(i).clone();
            let dst = self.ema_params.field_mut(i);
            for (e, p) in dst.data_mut().iter_mut().zip(src.data()) {
                *e = decay * *e + (1.0 - decay) * p;
            }
        }
    }

    /// Sampler-facing view with the EMA/live choice fixed.
    pub fn denoiser(&self, use_ema: bool) -> ModelDenoiser<'_> {
        ModelDenoiser { model: self, use_ema }
    }
}

/// Borrowed view implementing [`Denoiser`] for the sampling loops.
pub struct ModelDenoiser<'a> {
    model: &'a DenoiserModel,
    use_ema: bool,
}

impl Denoiser for ModelDenoiser<'_> {
    fn predict(&self, x: &DenseField, y_t: &DenseField, t: f64) -> Result<DenseField> {
        self.model.forward(x, y_t, t, self.use_ema)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn time_embed_at_zero() {
        let e = time_embed(0.0, 8).unwrap();
        for j in 0..4 {
            assert_eq!(e.data()[j], 0.0);
            assert_eq!(e.data()[4 + j], 1.0);
        }
    }

    #[test]
    fn time_embed_deterministic_and_lipschitz() {
        let a = time_embed(0.3, 64).unwrap();
        let b = time_embed(0.3, 64).unwrap();
        assert_eq!(a.data(), b.data());
        let c = time_embed(0.3 + 1e-9, 64).unwrap();
        let max = a.max_abs_diff(&c).unwrap();
        assert!(max < 1e-6, "embedding moved {max} for a 1e-9 time change");
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn time_embed_odd_dim_rejected() {
        assert!(time_embed(0.5, 7).is_err());
    }

    #[test]
    fn zero_initialized_head_predicts_zero() {
        let arch = DenoiserArch { base_width: 16, levels: 1, attn_at_bottom: false, ..DenoiserArch::depth_default() };
        let model = DenoiserModel::new(arch, 1).unwrap();
        let mut rng = stream(2);
        let x = crate::rng::normal_field(&mut rng, 8, 8, 3);
        let y_t = crate::rng::normal_field(&mut rng, 8, 8, 1);
        let out = model.forward(&x, &y_t, 0.5, false).unwrap();
        assert_eq!(out.shape(), (8, 8, 1));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_tracks_input_shape() {
        let arch = DenoiserArch { base_width: 16, levels: 2, attn_at_bottom: true, ..DenoiserArch::flow_default() };
        let model = DenoiserModel::new(arch, 3).unwrap();
        let mut rng = stream(4);
        for (h, w) in [(8, 8), (8, 12), (16, 8)] {
            let x = crate::rng::normal_field(&mut rng, h, w, 6);
            let y_t = crate::rng::normal_field(&mut rng, h, w, 2);
            let out = model.forward(&x, &y_t, 0.4, false).unwrap();
            assert_eq!(out.shape(), (h, w, 2));
        }
        // not divisible by 2^levels
        let x = crate::rng::normal_field(&mut rng, 6, 8, 6);
        let y_t = crate::rng::normal_field(&mut rng, 6, 8, 2);
        assert!(model.forward(&x, &y_t, 0.4, false).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let model = DenoiserModel::new(
            DenoiserArch { base_width: 16, levels: 1, attn_at_bottom: false, ..DenoiserArch::depth_default() },
            1,
        )
        .unwrap();
        let x = DenseField::zeros(8, 8, 3);
        let bad = DenseField::zeros(8, 8, 2); // 3 + 2 != 4
        assert!(model.forward(&x, &bad, 0.5, false).is_err());
    }

    #[test]
    fn ema_matches_scalar_oracle() {
        let arch = DenoiserArch { base_width: 16, levels: 1, attn_at_bottom: false, ..DenoiserArch::depth_default() };
        let mut model = DenoiserModel::new(arch, 7).unwrap();
        let decay = 0.9;
        // track one scalar through k updates with a closed-form oracle
        let probe = 3usize;
        let init = model.ema_params.field(0).data()[probe];
        let mut history = Vec::new();
        for step in 0..5 {
            let v = 0.1 * (step as f64 + 1.0);
            model.params.field_mut(0).data_mut()[probe] = v;
            history.push(v);
            model.ema_update(decay);
        }
        let k = history.len() as u32;
        let mut expect = decay.powi(k as i32) * init;
        for (i, v) in history.iter().enumerate() {
            expect += (1.0 - decay) * decay.powi((k - 1 - i as u32) as i32) * v;
        }
        let got = model.ema_params.field(0).data()[probe];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn per_sample_independence() {
        let arch = DenoiserArch { base_width: 16, levels: 1, attn_at_bottom: false, ..DenoiserArch::depth_default() };
        let mut model = DenoiserModel::new(arch, 9).unwrap();
        // give the head nonzero weights so outputs are nontrivial
        let head = model.params.len() - 2;
        for v in model.params.field_mut(head).data_mut() {
            *v = 0.01;
        }
        let mut rng = stream(11);
        let xa = crate::rng::normal_field(&mut rng, 8, 8, 3);
        let ya = crate::rng::normal_field(&mut rng, 8, 8, 1);
        let xb = crate::rng::normal_field(&mut rng, 8, 8, 3);
        let yb = crate::rng::normal_field(&mut rng, 8, 8, 1);
        let oa1 = model.forward(&xa, &ya, 0.3, false).unwrap();
        let ob1 = model.forward(&xb, &yb, 0.3, false).unwrap();
        // reversed order gives identical per-sample outputs
        let ob2 = model.forward(&xb, &yb, 0.3, false).unwrap();
        let oa2 = model.forward(&xa, &ya, 0.3, false).unwrap();
        assert_eq!(oa1.data(), oa2.data());
        assert_eq!(ob1.data(), ob2.data());
    }
}
