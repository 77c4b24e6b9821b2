use serde::{Deserialize, Serialize};

use super::ops::{
    concat_channels, conv2d_backward, conv2d_forward, maxpool2, maxpool2_backward, relu,
    relu_backward_inplace, split_channels, upconv2, upconv2_backward,
};
use super::{Real, Tensor4};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, DetRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub encoder_depth: usize,
    pub first_filters: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { encoder_depth: 4, first_filters: 32, in_channels: 1, num_classes: 2, input_size: 256 }
    }
}

impl UNetConfig {
    pub fn new(encoder_depth: usize, first_filters: usize, input_size: usize) -> Self {
        Self { encoder_depth, first_filters, input_size, ..Self::default() }
    }

    /// Depth 2, 8 first filters, 64 px patches.
    pub fn desk() -> Self {
        Self::new(2, 8, 64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_depth == 0 || self.first_filters == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArgument(format!("degenerate U-Net config {self:?}")));
        }
        if self.num_classes != 2 {
            return Err(Error::InvalidArgument(format!("num_classes must be 2, got {}", self.num_classes)));
        }
        let f = 1usize << self.encoder_depth;
        if self.input_size == 0 || self.input_size % f != 0 {
            return Err(Error::NotDivisible { width: self.input_size, height: self.input_size, patch: f });
        }
        Ok(())
    }

    /// Filter count at encoder level `level`; level `encoder_depth` is the bridge.
    pub fn filters(&self, level: usize) -> usize {
        self.first_filters << level
    }

    /// Number of parameterised layers: two convs per encoder level, two in
    /// the bridge, upconv plus two convs per decoder level, one head.
    pub fn num_layers(&self) -> usize {
        5 * self.encoder_depth + 3
    }

    /// Unrolled layer sequence, ReLUs omitted.
    pub fn layer_sequence(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for _ in 0..self.encoder_depth {
            out.extend(["conv", "conv", "pool"]);
        }
        out.extend(["conv", "conv"]);
        for _ in 0..self.encoder_depth {
            out.extend(["upconv", "concat", "conv", "conv"]);
        }
        out.push("head");
        out
    }

    /// `(kind, cin, cout)` of every parameterised layer in storage order.
    pub fn layer_shapes(&self) -> Vec<(LayerKind, usize, usize)> {
        let d = self.encoder_depth;
        let mut out = Vec::with_capacity(self.num_layers());
        let mut cin = self.in_channels;
        for l in 0..d {
            out.push((LayerKind::Conv3, cin, self.filters(l)));
            out.push((LayerKind::Conv3, self.filters(l), self.filters(l)));
            cin = self.filters(l);
        }
        out.push((LayerKind::Conv3, cin, self.filters(d)));
        out.push((LayerKind::Conv3, self.filters(d), self.filters(d)));
        for l in (0..d).rev() {
            out.push((LayerKind::UpConv2, self.filters(l + 1), self.filters(l)));
            out.push((LayerKind::Conv3, 2 * self.filters(l), self.filters(l)));
            out.push((LayerKind::Conv3, self.filters(l), self.filters(l)));
        }
        out.push((LayerKind::Conv1, self.filters(0), self.num_classes));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3,
    Conv1,
    UpConv2,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv3 => 0,
            LayerKind::Conv1 => 1,
            LayerKind::UpConv2 => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(LayerKind::Conv3),
            1 => Some(LayerKind::Conv1),
            2 => Some(LayerKind::UpConv2),
            _ => None,
        }
    }
}

/// Weights, biases and Adam moments of one layer. Convolution weights are
/// `(cout, cin, k, k)`; up-convolution weights are `(cin, cout, 2, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub m_weight: Vec<T>,
    pub v_weight: Vec<T>,
    pub m_bias: Vec<T>,
    pub v_bias: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn zeros(kind: LayerKind, cin: usize, cout: usize) -> Self {
        let nw = Self::weight_len(kind, cin, cout);
        let z = |n| vec![T::zero(); n];
        Self {
            kind,
            cin,
            cout,
            weight: z(nw),
            bias: z(cout),
            m_weight: z(nw),
            v_weight: z(nw),
            m_bias: z(cout),
            v_bias: z(cout),
        }
    }

    pub fn weight_len(kind: LayerKind, cin: usize, cout: usize) -> usize {
        match kind {
            LayerKind::Conv3 => cout * cin * 9,
            LayerKind::Conv1 => cout * cin,
            LayerKind::UpConv2 => cin * cout * 4,
        }
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Conv3 => [self.cout, self.cin, 3, 3],
            LayerKind::Conv1 => [self.cout, self.cin, 1, 1],
            LayerKind::UpConv2 => [self.cin, self.cout, 2, 2],
        }
    }

    /// Inputs feeding one output value, used for He scaling.
    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv3 => self.cin * 9,
            LayerKind::Conv1 => self.cin,
            LayerKind::UpConv2 => self.cin,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn cast<U: Real>(&self) -> LayerParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        LayerParams {
            kind: self.kind,
            cin: self.cin,
            cout: self.cout,
            weight: c(&self.weight),
            bias: c(&self.bias),
            m_weight: c(&self.m_weight),
            v_weight: c(&self.v_weight),
            m_bias: c(&self.m_bias),
            v_bias: c(&self.v_bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<LayerParams<T>>,
    pub step: u64,
}

impl<T: Real> ModelParams<T> {
    /// He-uniform weights drawn from a per-layer stream of `seed`, zero biases
    /// and moments.
    pub fn init(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (kind, cin, cout))| {
                let mut l = LayerParams::zeros(kind, cin, cout);
                let limit = (6.0 / l.fan_in() as f64).sqrt();
                let mut rng = DetRng::new(derive_seed(seed, i as u64));
                l.weight.iter_mut().for_each(|w| *w = T::from_f64(rng.uniform_in(-limit, limit)));
                l
            })
            .collect();
        Ok(Self { layers, step: 0 })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { layers: self.layers.iter().map(|l| l.cast()).collect(), step: self.step }
    }

    /// Flat view index `i` over all weights then biases, layer by layer.
    pub fn param_mut(&mut self, mut i: usize) -> &mut T {
        for l in &mut self.layers {
            if i < l.weight.len() {
                return &mut l.weight[i];
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return &mut l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }
}

/// Per-layer `(weight gradient, bias gradient)` in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Same flat indexing as [`ModelParams::param_mut`].
    pub fn get(&self, mut i: usize) -> T {
        for (w, b) in &self.layers {
            if i < w.len() {
                return w[i];
            }
            i -= w.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("gradient index out of range");
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

#[derive(Debug, Clone)]
struct Cache<T> {
    /// Input of every parameterised layer.
    inputs: Vec<Tensor4<T>>,
    /// Post-ReLU output of every layer except the head.
    acts: Vec<Tensor4<T>>,
    pools: Vec<(Vec<u8>, [usize; 4])>,
}

/// The network: config, parameters and the cache of the last training
/// forward pass.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    pub cfg: UNetConfig,
    pub params: ModelParams<T>,
    cache: Option<Cache<T>>,
}

impl<T: Real> UNet<T> {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        Ok(Self { cfg, params: ModelParams::init(&cfg, seed)?, cache: None })
    }

    pub fn from_params(cfg: UNetConfig, params: ModelParams<T>) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.layer_shapes();
        let ok = shapes.len() == params.layers.len()
            && shapes.iter().zip(&params.layers).all(|(&(k, ci, co), l)| {
                l.kind == k
                    && l.cin == ci
                    && l.cout == co
                    && l.weight.len() == LayerParams::<T>::weight_len(k, ci, co)
                    && l.bias.len() == co
                    && l.m_weight.len() == l.weight.len()
                    && l.v_weight.len() == l.weight.len()
                    && l.m_bias.len() == co
                    && l.v_bias.len() == co
            });
        if !ok {
            return Err(Error::ShapeMismatch("parameters do not match the U-Net config".into()));
        }
        Ok(Self { cfg, params, cache: None })
    }

    /// Training forward pass; keeps the activations for [`UNet::backward`].
    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut cache = Cache { inputs: Vec::new(), acts: Vec::new(), pools: Vec::new() };
        let out = self.run(x, Some(&mut cache))?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Forward pass without caching.
    pub fn predict(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.run(x, None)
    }

    /// Per-pixel argmax labels of [`UNet::predict`]; ties go to class 0.
    pub fn predict_labels(&self, x: &Tensor4<T>) -> Result<Vec<u8>> {
        let logits = self.predict(x)?;
        Ok(argmax_labels(&logits))
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Signs of every cached ReLU output and every pooling choice; two
    /// forward passes with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self) -> Option<Vec<u8>> {
        let c = self.cache.as_ref()?;
        let mut out = Vec::new();
        for a in &c.acts {
            out.extend(a.data().iter().map(|&v| (v > T::zero()) as u8));
        }
        for (idx, _) in &c.pools {
            out.extend_from_slice(idx);
        }
        Some(out)
    }

    fn run(&self, x: &Tensor4<T>, mut cache: Option<&mut Cache<T>>) -> Result<Tensor4<T>> {
        let d = self.cfg.encoder_depth;
        let [_, c, h, w] = x.dims();
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!("input has {c} channels, network expects {}", self.cfg.in_channels)));
        }
        let f = 1usize << d;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::NotDivisible { width: w, height: h, patch: f });
        }
        let layers = &self.params.layers;
        let conv_relu = |idx: usize, input: Tensor4<T>, cache: &mut Option<&mut Cache<T>>| -> Result<Tensor4<T>> {
            let l = &layers[idx];
            let a = relu(&conv2d_forward(&input, &l.weight, &l.bias, l.cout, 3)?);
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(input);
                c.acts.push(a.clone());
            }
            Ok(a)
        };

        let mut skips = Vec::with_capacity(d);
        let mut hcur = x.clone();
        let mut idx = 0;
        for _ in 0..d {
            let a = conv_relu(idx, hcur, &mut cache)?;
            let b = conv_relu(idx + 1, a, &mut cache)?;
            idx += 2;
            let (p, arg) = maxpool2(&b)?;
            if let Some(c) = cache.as_deref_mut() {
                c.pools.push((arg, b.dims()));
            }
            skips.push(b);
            hcur = p;
        }
        let a = conv_relu(idx, hcur, &mut cache)?;
        hcur = conv_relu(idx + 1, a, &mut cache)?;
        idx += 2;
        for l in (0..d).rev() {
            let up = &layers[idx];
            let u = relu(&upconv2(&hcur, &up.weight, &up.bias, up.cout)?);
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(hcur);
                c.acts.push(u.clone());
            }
            let cat = concat_channels(&u, &skips[l])?;
            let a = conv_relu(idx + 1, cat, &mut cache)?;
            hcur = conv_relu(idx + 2, a, &mut cache)?;
            idx += 3;
        }
        let head = &layers[idx];
        let logits = conv2d_forward(&hcur, &head.weight, &head.bias, head.cout, 1)?;
        if let Some(c) = cache.as_deref_mut() {
            c.inputs.push(hcur);
        }
        Ok(logits)
    }

    /// Consumes the cache of the last [`UNet::forward`] and returns the
    /// gradient of every parameter given the gradient of the logits.
    pub fn backward(&mut self, dlogits: &Tensor4<T>) -> Result<Gradients<T>> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let d = self.cfg.encoder_depth;
        let n_layers = self.cfg.num_layers();
        let layers = &self.params.layers;
        let mut grads: Vec<(Vec<T>, Vec<T>)> = vec![(Vec::new(), Vec::new()); n_layers];

        let head_idx = n_layers - 1;
        let head = &layers[head_idx];
        let g = conv2d_backward(&cache.inputs[head_idx], &head.weight, head.cout, 1, dlogits, true)?;
        grads[head_idx] = (g.dw, g.db);
        let mut gcur = g.dx.expect("requested");

        let conv_back = |idx: usize, mut g: Tensor4<T>, need_dx: bool, grads: &mut Vec<(Vec<T>, Vec<T>)>| -> Result<Option<Tensor4<T>>> {
            relu_backward_inplace(&mut g, &cache.acts[idx]);
            let l = &layers[idx];
            let r = conv2d_backward(&cache.inputs[idx], &l.weight, l.cout, 3, &g, need_dx)?;
            grads[idx] = (r.dw, r.db);
            Ok(r.dx)
        };

        let mut skip_grads: Vec<Option<Tensor4<T>>> = vec![None; d];
        // decoder levels were built deepest first, so walk them back shallowest first
        for l in 0..d {
            let base = 2 * d + 2 + 3 * (d - 1 - l);
            gcur = conv_back(base + 2, gcur, true, &mut grads)?.expect("requested");
            let gcat = conv_back(base + 1, gcur, true, &mut grads)?.expect("requested");
            let up = &layers[base];
            let (mut gu, gskip) = split_channels(&gcat, up.cout)?;
            skip_grads[l] = Some(gskip);
            relu_backward_inplace(&mut gu, &cache.acts[base]);
            let r = upconv2_backward(&cache.inputs[base], &up.weight, up.cout, &gu, true)?;
            grads[base] = (r.dw, r.db);
            gcur = r.dx.expect("requested");
        }
        gcur = conv_back(2 * d + 1, gcur, true, &mut grads)?.expect("requested");
        gcur = conv_back(2 * d, gcur, true, &mut grads)?.expect("requested");
        for l in (0..d).rev() {
            let (arg, dims) = &cache.pools[l];
            let mut g = maxpool2_backward(&gcur, arg, *dims);
            let skip = skip_grads[l].take().expect("set above");
            for (a, &b) in g.data_mut().iter_mut().zip(skip.data()) {
                *a = *a + b;
            }
            let g = conv_back(2 * l + 1, g, true, &mut grads)?.expect("requested");
            match conv_back(2 * l, g, l > 0, &mut grads)? {
                Some(dx) => gcur = dx,
                None => break,
            }
        }
        Ok(Gradients { layers: grads })
    }
}

/// Per-pixel argmax over channels in batch-major raster order; ties go to
/// the lower class.
pub fn argmax_labels<T: Real>(logits: &Tensor4<T>) -> Vec<u8> {
    let [n, c, h, w] = logits.dims();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        let z = logits.sample(s);
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if z[ch * hw + p] > z[best * hw + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
