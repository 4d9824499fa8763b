//! Sampling-frequency-independent encoder and decoder layers.
//!
//! Kernel size and stride are rescaled with the input sampling frequency so
//! that they keep their duration in seconds, and the kernels themselves are
//! regenerated from the latent analog filters. Generated kernels are cached
//! per sampling frequency; the cache publishes each entry exactly once.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::filter_design::{generate_with_solver, AnalogFilterBank, KernelSet, KernelSolver};
use crate::tensor::{conv1d, conv_output_len, conv_transpose1d, CustomBackward, Graph, Shape, Tensor, Var};

/// Rescales a training-time kernel size and stride to `fs_target`.
///
/// Both values must stay integers; fractional geometries are rejected.
pub fn adjust_kernel_stride(
    k_train: usize,
    s_train: usize,
    fs_train: u32,
    fs_target: u32,
) -> Result<(usize, usize)> {
    if k_train == 0 || s_train == 0 || fs_train == 0 || fs_target == 0 {
        return invalid("kernel size, stride and sampling frequencies must be positive");
    }
    let scale = |v: usize, what: &str| -> Result<usize> {
        let num = v as u64 * fs_target as u64;
        if !num.is_multiple_of(fs_train as u64) {
            return Err(Error::UnsupportedSamplingFrequency {
                fs: fs_target,
                reason: format!(
                    "{what} {} is not an integer at {fs_target} Hz",
                    num as f64 / fs_train as f64
                ),
            });
        }
        Ok((num / fs_train as u64) as usize)
    };
    let k = scale(k_train, "kernel size")?;
    let s = scale(s_train, "stride")?;
    if k == 0 || s == 0 {
        return Err(Error::UnsupportedSamplingFrequency {
            fs: fs_target,
            reason: "kernel size or stride rounds to zero".into(),
        });
    }
    Ok((k, s))
}

/// Concrete convolution geometry at one sampling frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub fs: u32,
}

impl LayerGeometry {
    pub fn frames(&self, len: usize) -> Result<usize> {
        conv_output_len(len, self.kernel_size, self.stride, self.padding)
    }
}

/// Training-time constants shared by an encoder/decoder pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SfiGeometry {
    pub k_train: usize,
    pub s_train: usize,
    pub fs_train: u32,
    pub grid_size: usize,
}

impl SfiGeometry {
    pub fn at(&self, fs: u32) -> Result<LayerGeometry> {
        let (kernel_size, stride) = adjust_kernel_stride(self.k_train, self.s_train, self.fs_train, fs)?;
        Ok(LayerGeometry {
            kernel_size,
            stride,
            padding: 0,
            fs,
        })
    }
}

/// Kernels generated for one sampling frequency.
#[derive(Debug)]
pub struct CachedKernels {
    pub geometry: LayerGeometry,
    pub kernels: KernelSet,
    /// `(C, 1, K)`: encoder weights `(Cout, Cin, K)` and decoder weights `(Cin, Cout, K)`.
    pub weights: Tensor,
}

impl CachedKernels {
    fn new(geometry: LayerGeometry, kernels: KernelSet) -> Self {
        let c = kernels.kernels.len();
        let data = kernels.kernels.iter().flat_map(|k| k.taps.iter().copied()).collect();
        let weights = Tensor::from_vec(Shape::new(c, 1, geometry.kernel_size), data)
            .expect("kernel set matches its geometry");
        Self {
            geometry,
            kernels,
            weights,
        }
    }
}

type SolverKey = (u32, usize, usize);

/// Per-layer store of generated kernels (keyed by integer Hz) and of the
/// least-squares solvers they came from.
#[derive(Debug, Default)]
pub struct KernelCache {
    entries: RwLock<HashMap<u32, Arc<CachedKernels>>>,
    solvers: RwLock<HashMap<SolverKey, Arc<KernelSolver>>>,
    generations: AtomicUsize,
    hits: AtomicUsize,
}

impl KernelCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of kernel generations performed (cache misses).
    pub fn generation_count(&self) -> usize {
        self.generations.load(Ordering::SeqCst)
    }

    pub fn hit_count(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn contains(&self, fs: u32) -> bool {
        self.entries.read().expect("cache lock").contains_key(&fs)
    }

    pub fn get(&self, fs: u32) -> Option<Arc<CachedKernels>> {
        self.entries.read().expect("cache lock").get(&fs).cloned()
    }

    /// Drops every generated kernel set (solvers stay); call after the
    /// latent filters change.
    pub fn invalidate(&self) {
        self.entries.write().expect("cache lock").clear();
    }

    pub fn solver(&self, fs: u32, kernel_size: usize, grid_size: usize) -> Result<Arc<KernelSolver>> {
        let key = (fs, kernel_size, grid_size);
        if let Some(s) = self.solvers.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(s));
        }
        let built = Arc::new(KernelSolver::new(fs as f64, kernel_size, grid_size)?);
        let mut map = self.solvers.write().expect("cache lock");
        Ok(Arc::clone(map.entry(key).or_insert(built)))
    }

    /// Returns the kernels for `fs`, generating and publishing them on first use.
    ///
    /// Concurrent first calls may both generate, but only the first insert is
    /// published and every caller receives that entry.
    pub fn get_or_generate(
        &self,
        bank: &AnalogFilterBank,
        geometry: &SfiGeometry,
        fs: u32,
    ) -> Result<Arc<CachedKernels>> {
        if let Some(hit) = self.get(fs) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        let layer = geometry.at(fs)?;
        let solver = self.solver(fs, layer.kernel_size, geometry.grid_size)?;
        let kernels = generate_with_solver(bank, fs, &solver)?;
        self.generations.fetch_add(1, Ordering::SeqCst);
        let fresh = Arc::new(CachedKernels::new(layer, kernels));
        let mut map = self.entries.write().expect("cache lock");
        Ok(Arc::clone(map.entry(fs).or_insert(fresh)))
    }
}

/// Encodes a waveform into the nonnegative `(1, C, T)` representation.
pub fn encode(
    x: &[f64],
    bank: &AnalogFilterBank,
    cache: &KernelCache,
    geometry: &SfiGeometry,
    fs: u32,
) -> Result<Tensor> {
    let kernels = cache.get_or_generate(bank, geometry, fs)?;
    let layer = kernels.geometry;
    if x.len() < layer.kernel_size {
        return invalid(format!(
            "input of {} samples is shorter than the {}-tap kernel at {fs} Hz",
            x.len(),
            layer.kernel_size
        ));
    }
    let input = Tensor::from_vec(Shape::new(1, 1, x.len()), x.to_vec())?;
    let mut v = conv1d(&input, &kernels.weights, layer.stride, layer.padding, 1)?;
    v.data_mut().iter_mut().for_each(|s| *s = s.max(0.0));
    Ok(v)
}

/// Decodes a `(B, C, T)` masked representation into `B` waveforms of `out_len` samples.
pub fn decode(
    masked: &Tensor,
    bank: &AnalogFilterBank,
    cache: &KernelCache,
    geometry: &SfiGeometry,
    fs: u32,
    out_len: usize,
) -> Result<Vec<Vec<f64>>> {
    let kernels = cache.get_or_generate(bank, geometry, fs)?;
    let layer = kernels.geometry;
    let [_, c, t] = masked.shape().0;
    if c != bank.channel_pairs() {
        return invalid(format!(
            "masked representation has {c} channels, decoder expects {}",
            bank.channel_pairs()
        ));
    }
    let expected = layer.frames(out_len)?;
    if t != expected {
        return invalid(format!(
            "masked representation has {t} frames, {out_len} samples at {fs} Hz give {expected}"
        ));
    }
    let raw = conv_transpose1d(masked, &kernels.weights, layer.stride)?;
    let raw_len = raw.shape().time();
    Ok(raw
        .data()
        .chunks_exact(raw_len)
        .map(|row| {
            let mut out = vec![0.0; out_len];
            let keep = raw_len.min(out_len);
            out[..keep].copy_from_slice(&row[..keep]);
            out
        })
        .collect())
}

/// Records kernel generation as a differentiable op.
///
/// `mu`, `sigma` and `phi` are `(1, C, 1)` parameter tensors; the result is
/// the `(C, 1, K)` weight tensor (time-reversed least-squares kernels).
pub fn kernel_weights_var(
    graph: &mut Graph,
    mu: Var,
    sigma: Var,
    phi: Var,
    solver: Arc<KernelSolver>,
) -> Result<Var> {
    let (mus, sigmas, phis) = (graph.value(mu), graph.value(sigma), graph.value(phi));
    let c = mus.shape().channels();
    for v in [sigmas, phis] {
        if v.shape() != mus.shape() {
            return invalid("latent filter parameter tensors must share one shape");
        }
    }
    let k_n = solver.kernel_size();
    let mut weights = Vec::with_capacity(c * k_n);
    for ch in 0..c {
        let p = crate::filter_design::MgfParams {
            mu: mus.data()[ch],
            sigma: sigmas.data()[ch],
            phi: phis.data()[ch],
        };
        let target: Vec<Complex64> = solver.grid().omegas().iter().map(|&w| p.response(w)).collect();
        let b = solver.solve(&target)?;
        weights.extend(b.iter().rev());
    }
    let out = Tensor::from_vec(Shape::new(c, 1, k_n), weights)?;
    Ok(graph.custom(&[mu, sigma, phi], out, Box::new(KernelGenBackward { solver })))
}

struct KernelGenBackward {
    solver: Arc<KernelSolver>,
}

impl CustomBackward for KernelGenBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let shape = inputs[0].shape();
        let c = shape.channels();
        let k_n = self.solver.kernel_size();
        let mut grads = [Tensor::zeros(shape), Tensor::zeros(shape), Tensor::zeros(shape)];
        for ch in 0..c {
            let p = crate::filter_design::MgfParams {
                mu: inputs[0].data()[ch],
                sigma: inputs[1].data()[ch],
                phi: inputs[2].data()[ch],
            };
            let grad_b: Vec<f64> = grad_output.data()[ch * k_n..(ch + 1) * k_n].iter().rev().copied().collect();
            let (g_re, g_im) = self.solver.backpropagate(&grad_b);
            let mut acc = [0.0; 3];
            for (i, &w) in self.solver.grid().omegas().iter().enumerate() {
                let dg = p.response_gradient(w);
                for (a, d) in acc.iter_mut().zip(dg) {
                    *a += g_re[i] * d.re + g_im[i] * d.im;
                }
            }
            for (g, a) in grads.iter_mut().zip(acc) {
                g.data_mut()[ch] = a;
            }
        }
        grads.into()
    }
}
