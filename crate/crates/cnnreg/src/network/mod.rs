//! The 2-channel volumetric scoring network.
//!
//! A stack of strided valid convolutions with ReLUs, finished by a
//! convolution without nonlinearity, maps a 2 x p^3 patch pair to a single
//! dissimilarity score (negative = similar, positive = dissimilar). The same
//! weights evaluated fully convolutionally over a whole volume produce a
//! dissimilarity map with one element per receptive-field patch, spaced by
//! the net stride. Backpropagation through the map yields both parameter
//! gradients (training) and the gradient with respect to the warped input
//! channel (registration).

mod conv;

pub use conv::{ConvLayer, LayerGrads, LayerSpec, Tensor};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Architecture description: patch size, net stride and the layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkConfig {
    /// Desk-scale reference architecture: 5 layers, receptive field 17,
    /// stride 4, small channel counts that train in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            patch_size: 17,
            stride: 4,
            layers: vec![
                LayerSpec { c_in: 2, c_out: 16, k: 5, stride: 2, relu: true },
                LayerSpec { c_in: 16, c_out: 32, k: 3, stride: 2, relu: true },
                LayerSpec { c_in: 32, c_out: 64, k: 3, stride: 1, relu: true },
                LayerSpec { c_in: 64, c_out: 64, k: 1, stride: 1, relu: true },
                LayerSpec { c_in: 64, c_out: 1, k: 1, stride: 1, relu: false },
            ],
        }
    }

    /// Same layer geometry with wide channels (millions of parameters).
    /// Selectable for full-scale runs; not the test default.
    pub fn paper() -> Self {
        Self {
            patch_size: 17,
            stride: 4,
            layers: vec![
                LayerSpec { c_in: 2, c_out: 64, k: 5, stride: 2, relu: true },
                LayerSpec { c_in: 64, c_out: 128, k: 3, stride: 2, relu: true },
                LayerSpec { c_in: 128, c_out: 256, k: 3, stride: 1, relu: true },
                LayerSpec { c_in: 256, c_out: 512, k: 1, stride: 1, relu: true },
                LayerSpec { c_in: 512, c_out: 1, k: 1, stride: 1, relu: false },
            ],
        }
    }

    /// Receptive field and stride product of the layer stack.
    pub fn receptive_field(&self) -> (usize, usize) {
        let mut rf = 1usize;
        let mut jump = 1usize;
        for l in &self.layers {
            rf += (l.k - 1) * jump;
            jump *= l.stride;
        }
        (rf, jump)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if self.layers[0].c_in != 2 {
            return Err(Error::Config("first layer must take the 2-channel patch pair".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].c_out != w[1].c_in {
                return Err(Error::Config(format!(
                    "channel chain break: {} out vs {} in",
                    w[0].c_out, w[1].c_in
                )));
            }
        }
        let last = self.layers.last().unwrap();
        if last.relu {
            return Err(Error::Config("final layer must not have a nonlinearity".into()));
        }
        if last.c_out != 1 {
            return Err(Error::Config("final layer must produce a single channel".into()));
        }
        if self.layers.iter().any(|l| l.k == 0 || l.stride == 0) {
            return Err(Error::Config("kernel size and stride must be >= 1".into()));
        }
        let (rf, jump) = self.receptive_field();
        if rf != self.patch_size {
            return Err(Error::Config(format!(
                "receptive field {rf} does not equal patch size {}",
                self.patch_size
            )));
        }
        if jump != self.stride {
            return Err(Error::Config(format!(
                "stride product {jump} does not equal net stride {}",
                self.stride
            )));
        }
        Ok(())
    }
}

/// Dense grid of patch dissimilarity scores at net stride, produced by one
/// fully convolutional pass. Element `e` scores the patch whose first voxel
/// is `e * stride` (valid convolution: the first patch starts at voxel 0;
/// trailing voxels that cannot host a full patch are excluded).
#[derive(Debug, Clone)]
pub struct DissimilarityMap {
    pub dims: [usize; 3],
    pub stride: usize,
    pub patch_size: usize,
    pub scores: Vec<f32>,
}

impl DissimilarityMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    #[inline]
    pub fn get(&self, e: [usize; 3]) -> f32 {
        self.scores[e[0] + self.dims[0] * (e[1] + self.dims[1] * e[2])]
    }

    /// First voxel of the receptive-field patch of element `e`.
    pub fn patch_start(&self, e: [usize; 3]) -> [usize; 3] {
        [e[0] * self.stride, e[1] * self.stride, e[2] * self.stride]
    }

    /// Sum of all scores, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.scores.iter().map(|&v| v as f64).sum()
    }
}

/// Map dims for a given input extent: `(n - p)/s + 1` per axis.
pub fn map_dims(input_dims: [usize; 3], patch_size: usize, stride: usize) -> Result<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        if input_dims[a] < patch_size {
            return Err(Error::Shape(format!(
                "input extent {} smaller than patch size {patch_size}",
                input_dims[a]
            )));
        }
        out[a] = (input_dims[a] - patch_size) / stride + 1;
    }
    Ok(out)
}

/// Cached activations of one forward pass: `activations[0]` is the input,
/// `activations[i+1]` the output of layer `i`.
pub struct ForwardCache {
    pub activations: Vec<Tensor>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("non-empty cache")
    }
}

/// Parameter gradients for every layer of a network.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    pub fn zeros(net: &Network) -> Self {
        Self { layers: net.layers.iter().map(|l| LayerGrads::zeros(&l.spec)).collect() }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for l in &mut self.layers {
            l.scale(s);
        }
    }
}

/// SGD momentum state, one velocity slot per parameter.
pub struct SgdState {
    pub velocity: NetGrads,
}

impl SgdState {
    pub fn zeros(net: &Network) -> Self {
        Self { velocity: NetGrads::zeros(net) }
    }
}

/// One SGD update with classical momentum:
/// `v <- momentum * v - lr * g; w <- w + v` for every kernel and bias.
pub fn sgd_step(net: &mut Network, grads: &NetGrads, lr: f32, momentum: f32, state: &mut SgdState) {
    for ((layer, g), v) in
        net.layers.iter_mut().zip(&grads.layers).zip(&mut state.velocity.layers)
    {
        for (w, (gv, vv)) in
            layer.kernel.iter_mut().zip(g.kernel.iter().zip(v.kernel.iter_mut()))
        {
            *vv = momentum * *vv - lr * gv;
            *w += *vv;
        }
        for (w, (gv, vv)) in layer.bias.iter_mut().zip(g.bias.iter().zip(v.bias.iter_mut())) {
            *vv = momentum * *vv - lr * gv;
            *w += *vv;
        }
    }
}

/// The patch scorer: an ordered stack of volumetric conv layers.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<ConvLayer>,
    patch_size: usize,
    stride: usize,
}

impl Network {
    /// Initialize from an architecture description: weights uniform in
    /// `+- sqrt(6 / fan_in)`, biases zero, deterministic given the seed.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let mut rng = crate::seeded_rng(seed, 0x6e65745f696e6974); // "net_init"
        let layers = config
            .layers
            .iter()
            .map(|&spec| {
                let fan_in = (spec.c_in * spec.k * spec.k * spec.k) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let kernel = (0..spec.kernel_len())
                    .map(|_| rng.gen_range(-bound..bound) as f32)
                    .collect();
                ConvLayer::new(spec, kernel, vec![0.0; spec.c_out])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { layers, patch_size: config.patch_size, stride: config.stride })
    }

    pub fn from_layers(layers: Vec<ConvLayer>, patch_size: usize, stride: usize) -> Result<Self> {
        let config = NetworkConfig {
            patch_size,
            stride,
            layers: layers.iter().map(|l| l.spec).collect(),
        };
        config.validate()?;
        Ok(Self { layers, patch_size, stride })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn config(&self) -> NetworkConfig {
        NetworkConfig {
            patch_size: self.patch_size,
            stride: self.stride,
            layers: self.layers.iter().map(|l| l.spec).collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }

    /// Forward pass keeping every intermediate activation.
    pub fn forward_cached(&self, input: &Tensor) -> Result<ForwardCache> {
        if input.channels() != 2 {
            return Err(Error::Shape(format!(
                "network input must have 2 channels, got {}",
                input.channels()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().unwrap())?;
            activations.push(next);
        }
        Ok(ForwardCache { activations })
    }

    /// Score one 2 x p^3 patch pair.
    pub fn forward_patch(&self, patch: &Tensor) -> Result<f32> {
        if patch.dims() != [self.patch_size; 3] {
            return Err(Error::Shape(format!(
                "patch dims {:?} do not match patch size {}",
                patch.dims(),
                self.patch_size
            )));
        }
        let mut cur = None;
        for layer in &self.layers {
            let next = layer.forward(cur.as_ref().unwrap_or(patch))?;
            cur = Some(next);
        }
        let out = cur.unwrap();
        debug_assert_eq!(out.dims(), [1, 1, 1]);
        debug_assert_eq!(out.channels(), 1);
        Ok(out.data()[0])
    }

    /// Fully convolutional evaluation over a whole 2-channel volume: every
    /// map element equals [`Self::forward_patch`] on its receptive field.
    pub fn forward_full(&self, input: &Tensor) -> Result<DissimilarityMap> {
        let cache = self.forward_cached(input)?;
        Ok(self.map_from_cache(&cache))
    }

    pub fn map_from_cache(&self, cache: &ForwardCache) -> DissimilarityMap {
        let out = cache.output();
        DissimilarityMap {
            dims: out.dims(),
            stride: self.stride,
            patch_size: self.patch_size,
            scores: out.data().to_vec(),
        }
    }

    /// Shared backward pass: propagate `seed` (shaped like the final output)
    /// back through the stack.
    fn backprop(
        &self,
        cache: &ForwardCache,
        seed: Tensor,
        want_input: bool,
        want_params: bool,
    ) -> Result<(Option<Tensor>, Option<NetGrads>)> {
        let mut grad = seed;
        let mut param_grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_input = i > 0 || want_input;
            let (gin, grads) =
                layer.backward(&cache.activations[i], &cache.activations[i + 1], &grad, need_input)?;
            if want_params {
                param_grads.push(grads);
            }
            match gin {
                Some(g) => grad = g,
                None => {
                    debug_assert_eq!(i, 0);
                    return Ok((
                        None,
                        want_params.then(|| {
                            param_grads.reverse();
                            NetGrads { layers: param_grads }
                        }),
                    ));
                }
            }
        }
        Ok((
            Some(grad),
            want_params.then(|| {
                param_grads.reverse();
                NetGrads { layers: param_grads }
            }),
        ))
    }

    /// Gradient of the sum of all dissimilarity-map elements with respect to
    /// every input voxel (both channels), via one full backward pass seeded
    /// with ones. Channel 1 carries the derivative with respect to the
    /// warped moving image.
    pub fn input_gradient(&self, input: &Tensor) -> Result<Tensor> {
        let cache = self.forward_cached(input)?;
        self.input_gradient_cached(&cache)
    }

    pub fn input_gradient_cached(&self, cache: &ForwardCache) -> Result<Tensor> {
        let out = cache.output();
        let seed = Tensor::new(1, out.dims(), vec![1.0; out.data().len()])?;
        let (gin, _) = self.backprop(cache, seed, true, false)?;
        Ok(gin.expect("input gradient requested"))
    }

    /// Parameter gradients for one cached patch forward pass, seeded with a
    /// scalar output gradient.
    pub fn patch_param_gradients(&self, cache: &ForwardCache, seed: f32) -> Result<NetGrads> {
        let out = cache.output();
        if out.data().len() != 1 {
            return Err(Error::Shape("patch cache expected a scalar output".into()));
        }
        let seed = Tensor::new(1, out.dims(), vec![seed])?;
        let (_, grads) = self.backprop(cache, seed, false, true)?;
        Ok(grads.expect("param gradients requested"))
    }

    /// Save as a checkpoint directory: a JSON manifest plus one raw
    /// little-endian f32 file per parameter tensor.
    pub fn save_checkpoint(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = CheckpointManifest { architecture: self.config(), meta: meta.clone() };
        let file = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
        for (i, layer) in self.layers.iter().enumerate() {
            io::write_f32_raw(&dir.join(format!("layer{i}.kernel.bin")), &layer.kernel)?;
            io::write_f32_raw(&dir.join(format!("layer{i}.bias.bin")), &layer.bias)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Network, CheckpointMeta)> {
        let file = std::fs::File::open(dir.join("manifest.json"))?;
        let manifest: CheckpointManifest =
            serde_json::from_reader(std::io::BufReader::new(file))?;
        manifest.architecture.validate()?;
        let mut layers = Vec::with_capacity(manifest.architecture.layers.len());
        for (i, &spec) in manifest.architecture.layers.iter().enumerate() {
            let kernel =
                io::read_f32_raw(&dir.join(format!("layer{i}.kernel.bin")), spec.kernel_len())?;
            let bias = io::read_f32_raw(&dir.join(format!("layer{i}.bias.bin")), spec.c_out)?;
            layers.push(ConvLayer::new(spec, kernel, bias)?);
        }
        Ok((
            Network {
                layers,
                patch_size: manifest.architecture.patch_size,
                stride: manifest.architecture.stride,
            },
            manifest.meta,
        ))
    }
}

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub hyperparameters: Hyperparameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self { learning_rate: 0.01, momentum: 0.9, batch_size: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    architecture: NetworkConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
}
