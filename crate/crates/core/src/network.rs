//! Mask-based separation network with SFI encoder and decoder.
//!
//! encoder (latent-filter kernels, ReLU) → mask predictor (1×1 conv, GLN,
//! U-ConvBlocks, 1×1 conv to `M·C`, ReLU) → per-source masking → shared
//! decoder (transposed conv with latent-filter kernels).

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filter_design::{AnalogFilterBank, MgfParams};
use crate::sfi_layers::{decode, encode, kernel_weights_var, KernelCache, SfiGeometry};
use crate::tensor::{Graph, Shape, Tensor, Var};

/// Number of resolution levels inside a U-ConvBlock.
pub const U_LEVELS: usize = 5;
const DEPTHWISE_KERNEL: usize = 5;
const GLN_EPS: f64 = 1e-8;
/// Smallest admissible latent-filter bandwidth (rad/s) after an update.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder channels `C` (latent filter pairs).
    pub channels: usize,
    /// Mask-predictor bottleneck width `C_b`.
    pub bottleneck: usize,
    /// Expanded width `E` inside each U-ConvBlock.
    pub expanded: usize,
    /// Number of U-ConvBlocks `B`.
    pub blocks: usize,
    /// Output channels `M`.
    pub outputs: usize,
    pub fs_train: u32,
    pub kernel_size: usize,
    pub stride: usize,
    /// Frequency grid points `I` for kernel design.
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            bottleneck: 16,
            expanded: 32,
            blocks: 2,
            outputs: 4,
            fs_train: 8000,
            kernel_size: 40,
            stride: 20,
            grid_size: 160,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("bottleneck", self.bottleneck),
            ("expanded", self.expanded),
            ("outputs", self.outputs),
            ("kernel_size", self.kernel_size),
            ("stride", self.stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return invalid(format!("model config: {name} must be positive"));
            }
        }
        if self.outputs > 8 {
            return invalid("model config: at most 8 outputs (exhaustive permutation search)");
        }
        if self.fs_train == 0 {
            return invalid("model config: fs_train must be positive");
        }
        if self.grid_size < 2 {
            return invalid("model config: grid_size must be at least 2");
        }
        Ok(())
    }

    /// Smallest latent-filter width, in rad/s: the frequency-grid spacing at
    /// `fs_train`. A narrower Gaussian falls between grid points and the
    /// designed kernel then depends on where the grid happens to lie.
    pub fn sigma_floor(&self) -> f64 {
        std::f64::consts::PI * self.fs_train as f64 / (self.grid_size - 1) as f64
    }

    pub fn geometry(&self) -> SfiGeometry {
        SfiGeometry {
            k_train: self.kernel_size,
            s_train: self.stride,
            fs_train: self.fs_train,
            grid_size: self.grid_size,
        }
    }
}

/// Index of a tensor in the model's parameter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the parameter list (and in optimizer state).
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct NamedParam {
    name: String,
    value: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Mgf {
    mu: ParamId,
    sigma: ParamId,
    phi: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ConvNorm {
    weight: ParamId,
    bias: ParamId,
    gain: ParamId,
    shift: ParamId,
    slope: ParamId,
}

#[derive(Clone, Debug)]
struct BlockLayout {
    expand: ConvNorm,
    levels: [ConvNorm; U_LEVELS],
    proj_weight: ParamId,
    proj_bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Mgf,
    decoder: Mgf,
    in_weight: ParamId,
    in_bias: ParamId,
    in_gain: ParamId,
    in_shift: ParamId,
    blocks: Vec<BlockLayout>,
    out_weight: ParamId,
    out_bias: ParamId,
}

pub struct SeparationModel {
    config: ModelConfig,
    params: Vec<NamedParam>,
    layout: Layout,
    encoder_cache: KernelCache,
    decoder_cache: KernelCache,
}

impl std::fmt::Debug for SeparationModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeparationModel")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Clone for SeparationModel {
    /// Copies parameters; the clone starts with empty kernel caches.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            encoder_cache: KernelCache::new(),
            decoder_cache: KernelCache::new(),
        }
    }
}

struct Builder<'a> {
    params: Vec<NamedParam>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.params.push(NamedParam { name, value });
        ParamId(self.params.len() - 1)
    }

    fn uniform(&mut self, name: String, shape: Shape, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..shape.numel()).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::from_vec(shape, data).expect("shape matches data");
        self.push(name, t)
    }

    fn constant(&mut self, name: String, shape: Shape, value: f64) -> ParamId {
        self.push(name, Tensor::full(shape, value))
    }

    fn mgf(&mut self, prefix: &str, c: usize, fs_train: u32) -> Mgf {
        let mu = (0..c).map(|i| PI * fs_train as f64 * (i + 1) as f64 / c as f64).collect();
        let phi = (0..c).map(|_| self.rng.gen_range(-PI..PI)).collect();
        let shape = Shape::new(1, c, 1);
        Mgf {
            mu: self.push(format!("{prefix}.mu"), Tensor::from_vec(shape, mu).expect("c values")),
            sigma: self.constant(format!("{prefix}.sigma"), shape, 50.0 * PI),
            phi: self.push(format!("{prefix}.phi"), Tensor::from_vec(shape, phi).expect("c values")),
        }
    }

    fn conv_norm(&mut self, prefix: &str, cout: usize, cin_per_group: usize, k: usize) -> ConvNorm {
        let col = Shape::new(1, cout, 1);
        ConvNorm {
            weight: self.uniform(format!("{prefix}.weight"), Shape::new(cout, cin_per_group, k), cin_per_group * k),
            bias: self.constant(format!("{prefix}.bias"), col, 0.0),
            gain: self.constant(format!("{prefix}.norm_gain"), col, 1.0),
            shift: self.constant(format!("{prefix}.norm_bias"), col, 0.0),
            slope: self.constant(format!("{prefix}.prelu"), col, 0.25),
        }
    }
}

/// Builds a freshly initialized model.
pub fn build_model(config: ModelConfig) -> Result<SeparationModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut b = Builder {
        params: Vec::new(),
        rng: &mut rng,
    };
    let (c, cb, e, m) = (config.channels, config.bottleneck, config.expanded, config.outputs);
    let encoder = b.mgf("encoder", c, config.fs_train);
    let decoder = b.mgf("decoder", c, config.fs_train);
    let in_weight = b.uniform("input.weight".into(), Shape::new(cb, c, 1), c);
    let in_bias = b.constant("input.bias".into(), Shape::new(1, cb, 1), 0.0);
    let in_gain = b.constant("input.norm_gain".into(), Shape::new(1, cb, 1), 1.0);
    let in_shift = b.constant("input.norm_bias".into(), Shape::new(1, cb, 1), 0.0);
    let mut blocks = Vec::with_capacity(config.blocks);
    for i in 0..config.blocks {
        let expand = b.conv_norm(&format!("block{i}.expand"), e, cb, 1);
        let levels = std::array::from_fn(|l| b.conv_norm(&format!("block{i}.level{l}"), e, 1, DEPTHWISE_KERNEL));
        let proj_weight = b.uniform(format!("block{i}.project.weight"), Shape::new(cb, e, 1), e);
        let proj_bias = b.constant(format!("block{i}.project.bias"), Shape::new(1, cb, 1), 0.0);
        blocks.push(BlockLayout {
            expand,
            levels,
            proj_weight,
            proj_bias,
        });
    }
    let out_weight = b.uniform("output.weight".into(), Shape::new(m * c, cb, 1), cb);
    let out_bias = b.constant("output.bias".into(), Shape::new(1, m * c, 1), 0.0);
    let layout = Layout {
        encoder,
        decoder,
        in_weight,
        in_bias,
        in_gain,
        in_shift,
        blocks,
        out_weight,
        out_bias,
    };
    Ok(SeparationModel {
        config,
        params: b.params,
        layout,
        encoder_cache: KernelCache::new(),
        decoder_cache: KernelCache::new(),
    })
}

/// Model parameters recorded on a graph, one [`Var`] per [`ParamId`].
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn mgf_bank(params: &[NamedParam], mgf: Mgf) -> Result<AnalogFilterBank> {
    let (mu, sigma, phi) = (&params[mgf.mu.0].value, &params[mgf.sigma.0].value, &params[mgf.phi.0].value);
    let bank = (0..mu.shape().channels())
        .map(|c| MgfParams {
            mu: mu.data()[c],
            sigma: sigma.data()[c],
            phi: phi.data()[c],
        })
        .collect();
    AnalogFilterBank::new(bank)
}

impl SeparationModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Mutable access to a parameter; drops cached kernels since they may
    /// depend on it.
    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.invalidate_kernels();
        &mut self.params[id.0].value
    }

    /// Mutable access to every parameter at once, in [`ParamId`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.invalidate_kernels();
        self.params.iter_mut().map(|p| &mut p.value).collect()
    }

    pub fn param_shapes(&self) -> Vec<Shape> {
        self.params.iter().map(|p| p.value.shape()).collect()
    }

    /// `(μ, σ, φ)` parameter ids of the encoder (`decoder = false`) or decoder.
    pub fn mgf_ids(&self, decoder: bool) -> [ParamId; 3] {
        let m = if decoder { self.layout.decoder } else { self.layout.encoder };
        [m.mu, m.sigma, m.phi]
    }

    pub fn encoder_bank(&self) -> Result<AnalogFilterBank> {
        mgf_bank(&self.params, self.layout.encoder)
    }

    pub fn decoder_bank(&self) -> Result<AnalogFilterBank> {
        mgf_bank(&self.params, self.layout.decoder)
    }

    pub fn encoder_cache(&self) -> &KernelCache {
        &self.encoder_cache
    }

    pub fn decoder_cache(&self) -> &KernelCache {
        &self.decoder_cache
    }

    /// Ids of the last projection of U-ConvBlock `block` (weight, bias).
    pub fn block_projection(&self, block: usize) -> Option<(ParamId, ParamId)> {
        self.layout.blocks.get(block).map(|b| (b.proj_weight, b.proj_bias))
    }

    fn invalidate_kernels(&self) {
        self.encoder_cache.invalidate();
        self.decoder_cache.invalidate();
    }

    /// Maps latent filters back to their canonical parametrization after an
    /// optimizer step: `σ ≥ sigma_floor` and `μ ≥ 0` (a negative centre is
    /// mirrored, which conjugates the phase and leaves the response unchanged).
    pub fn canonicalize_latent_filters(&mut self) {
        let floor = self.config.sigma_floor();
        for mgf in [self.layout.encoder, self.layout.decoder] {
            let c = self.params[mgf.mu.0].value.shape().channels();
            for ch in 0..c {
                let s = &mut self.params[mgf.sigma.0].value.data_mut()[ch];
                *s = s.abs().max(floor);
                if self.params[mgf.mu.0].value.data()[ch] < 0.0 {
                    self.params[mgf.mu.0].value.data_mut()[ch] *= -1.0;
                    self.params[mgf.phi.0].value.data_mut()[ch] *= -1.0;
                }
            }
        }
        self.invalidate_kernels();
    }

    /// Records every parameter on `graph`, trainable or as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Uses existing graph leaves (one per parameter, in [`ParamId`] order).
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return invalid(format!("expected {} parameter vars, got {}", self.params.len(), vars.len()));
        }
        Ok(BoundParams { vars })
    }

    fn conv_norm_act(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        layer: &ConvNorm,
        x: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let y = g.conv1d(x, p.var(layer.weight), stride, padding, groups)?;
        let y = g.add(y, p.var(layer.bias))?;
        let y = g.global_layer_norm(y, p.var(layer.gain), p.var(layer.shift), GLN_EPS)?;
        g.prelu(y, p.var(layer.slope))
    }

    /// Residual five-level U-ConvBlock on `x: (B, C_b, T)`, `T ≥ 16`.
    pub fn u_conv_block_var(&self, g: &mut Graph, p: &BoundParams, block: usize, x: Var) -> Result<Var> {
        let layout = self
            .layout
            .blocks
            .get(block)
            .ok_or_else(|| Error::InvalidArgument(format!("no U-ConvBlock {block}")))?;
        let [_, c, t] = g.shape(x).0;
        if c != self.config.bottleneck {
            return invalid(format!("U-ConvBlock expects {} channels, got {c}", self.config.bottleneck));
        }
        if t < 1 << (U_LEVELS - 1) {
            return invalid(format!("U-ConvBlock needs at least 16 frames, got {t}"));
        }
        let e = self.config.expanded;
        let mut cur = self.conv_norm_act(g, p, &layout.expand, x, 1, 0, 1)?;
        let mut skips = Vec::with_capacity(U_LEVELS);
        for (level, conv) in layout.levels.iter().enumerate() {
            let stride = if level == 0 { 1 } else { 2 };
            cur = self.conv_norm_act(g, p, conv, cur, stride, DEPTHWISE_KERNEL / 2, e)?;
            skips.push(cur);
        }
        let mut y = skips[U_LEVELS - 1];
        for skip in skips[..U_LEVELS - 1].iter().rev() {
            let len = g.shape(*skip).time();
            let up = g.upsample2(y);
            let up = g.fit_time(up, len);
            y = g.add(*skip, up)?;
        }
        let out = g.conv1d(y, p.var(layout.proj_weight), 1, 0, 1)?;
        let out = g.add(out, p.var(layout.proj_bias))?;
        g.add(out, x)
    }

    /// Mask predictor on `v: (B, C, T)`; returns the ReLU masks as `(B, M·C, T)`.
    pub fn predict_masks_var(&self, g: &mut Graph, p: &BoundParams, v: Var) -> Result<Var> {
        let c = g.shape(v).channels();
        if c != self.config.channels {
            return invalid(format!("mask predictor expects {} channels, got {c}", self.config.channels));
        }
        let l = &self.layout;
        let h = g.conv1d(v, p.var(l.in_weight), 1, 0, 1)?;
        let h = g.add(h, p.var(l.in_bias))?;
        let mut h = g.global_layer_norm(h, p.var(l.in_gain), p.var(l.in_shift), GLN_EPS)?;
        for block in 0..l.blocks.len() {
            h = self.u_conv_block_var(g, p, block, h)?;
        }
        let m = g.conv1d(h, p.var(l.out_weight), 1, 0, 1)?;
        let m = g.add(m, p.var(l.out_bias))?;
        Ok(g.relu(m))
    }

    /// Applies the masks `(B, M·C, T)` to `v: (B, C, T)`, giving `(B·M, C, T)`.
    fn apply_masks(&self, g: &mut Graph, v: Var, masks: Var) -> Result<Var> {
        let [b, c, t] = g.shape(v).0;
        let m = self.config.outputs;
        let masks = g.reshape(masks, Shape::new(b, m, c * t))?;
        let flat = g.reshape(v, Shape::new(b, 1, c * t))?;
        let masked = g.mul(masks, flat)?;
        g.reshape(masked, Shape::new(b * m, c, t))
    }

    /// Fully differentiable forward pass used for training.
    ///
    /// `mixtures` are equal-length waveforms at `fs`; kernels are generated
    /// on the graph so the loss reaches the latent filter parameters.
    /// Returns `(B, M, L)`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, mixtures: &[Vec<f64>], fs: u32) -> Result<Var> {
        let Some(first) = mixtures.first() else {
            return invalid("empty batch");
        };
        let len = first.len();
        if mixtures.iter().any(|x| x.len() != len) {
            return invalid("batch waveforms must share one length");
        }
        let layer = self.config.geometry().at(fs)?;
        if len < layer.kernel_size {
            return invalid(format!("input of {len} samples is shorter than the {}-tap kernel", layer.kernel_size));
        }
        let batch = mixtures.len();
        let data = mixtures.iter().flat_map(|x| x.iter().copied()).collect();
        let x = g.constant(Tensor::from_vec(Shape::new(batch, 1, len), data)?);
        let enc = self.layout.encoder;
        let dec = self.layout.decoder;
        let enc_solver = self.encoder_cache.solver(fs, layer.kernel_size, self.config.grid_size)?;
        let dec_solver = self.decoder_cache.solver(fs, layer.kernel_size, self.config.grid_size)?;
        let enc_w = kernel_weights_var(g, p.var(enc.mu), p.var(enc.sigma), p.var(enc.phi), enc_solver)?;
        let dec_w = kernel_weights_var(g, p.var(dec.mu), p.var(dec.sigma), p.var(dec.phi), dec_solver)?;
        let v = g.conv1d(x, enc_w, layer.stride, 0, 1)?;
        let v = g.relu(v);
        let masks = self.predict_masks_var(g, p, v)?;
        let masked = self.apply_masks(g, v, masks)?;
        let y = g.conv_transpose1d(masked, dec_w, layer.stride)?;
        let y = g.fit_time(y, len);
        g.reshape(y, Shape::new(batch, self.config.outputs, len))
    }

    /// Masks for `v: (B, C, T)`, one `(B, C, T)` tensor per output.
    pub fn predict_masks(&self, v: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        g.set_finite_checks(false);
        let p = self.bind(&mut g, false);
        let vv = g.constant(v.clone());
        let masks = self.predict_masks_var(&mut g, &p, vv)?;
        let [b, c, t] = v.shape().0;
        let all = g.value(masks).data();
        let m = self.config.outputs;
        Ok((0..m)
            .map(|src| {
                let mut data = Vec::with_capacity(b * c * t);
                for item in 0..b {
                    let start = (item * m + src) * c * t;
                    data.extend_from_slice(&all[start..start + c * t]);
                }
                Tensor::from_vec(Shape::new(b, c, t), data).expect("mask slice shape")
            })
            .collect())
    }

    /// Separates a mixture sampled at `fs` into `M` waveforms of its length.
    ///
    /// Kernels for `fs` are generated on first use and reused afterwards.
    pub fn separate(&self, x: &[f64], fs: u32) -> Result<Vec<Vec<f64>>> {
        let geometry = self.config.geometry();
        geometry.at(fs)?;
        let enc_bank = self.encoder_bank()?;
        let dec_bank = self.decoder_bank()?;
        let v = encode(x, &enc_bank, &self.encoder_cache, &geometry, fs)?;
        let masks = self.predict_masks(&v)?;
        let [_, c, t] = v.shape().0;
        let m = self.config.outputs;
        let mut masked = Vec::with_capacity(m * c * t);
        for mask in &masks {
            masked.extend(mask.data().iter().zip(v.data()).map(|(a, b)| a * b));
        }
        let masked = Tensor::from_vec(Shape::new(m, c, t), masked)?;
        decode(&masked, &dec_bank, &self.decoder_cache, &geometry, fs, x.len())
    }

    /// Encoder kernels for `fs`, through the cache.
    pub fn encoder_kernels(&self, fs: u32) -> Result<Arc<crate::sfi_layers::CachedKernels>> {
        self.encoder_cache
            .get_or_generate(&self.encoder_bank()?, &self.config.geometry(), fs)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SFICKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 3],
    offset: usize,
    dtype: DType,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn is_latent_filter(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("decoder.")
}

impl SeparationModel {
    /// Writes the checkpoint: magic, header length (u64 LE), JSON header,
    /// then raw little-endian blobs (latent filters at 64-bit, the rest at 32-bit).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let dtype = if is_latent_filter(&p.name) { DType::F64 } else { DType::F32 };
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().0,
                offset: blob.len(),
                dtype,
            });
            for &v in p.value.data() {
                match dtype {
                    DType::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            tensors,
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&blob)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing checkpoint magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])?;
        let blob = &bytes[header_end..];
        let mut model = build_model(header.config)?;
        if header.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, config implies {}",
                header.tensors.len(),
                model.params.len()
            )));
        }
        for (entry, p) in header.tensors.iter().zip(model.params.iter_mut()) {
            if entry.name != p.name || entry.shape != p.value.shape().0 {
                return Err(Error::Checkpoint(format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            let width = match entry.dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let n = p.value.shape().numel();
            let raw = blob
                .get(entry.offset..entry.offset + n * width)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} exceeds the data section", entry.name)))?;
            for (dst, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(width)) {
                *dst = match entry.dtype {
                    DType::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
                    DType::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
                };
            }
        }
        model.encoder_bank()?;
        model.decoder_bank()?;
        Ok(model)
    }

    /// Rounds every 32-bit-stored parameter to what a save/load round trip yields.
    pub fn quantize_like_checkpoint(&mut self) {
        for p in &mut self.params {
            if !is_latent_filter(&p.name) {
                p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
        self.invalidate_kernels();
    }
}
