//! 3D generator and discriminator, the composite-output rule, and bundle
//! checkpointing.
//!
//! The generator is an encoder/decoder: a 7x7x7 stem, two stride-2
//! downsampling stages, eight dilated residual blocks, two stride-2
//! transposed-convolution upsampling stages, and a 7x7x7 head with a sigmoid
//! output. Every hidden convolution carries spectral normalization followed
//! by instance normalization. The discriminator is a 3D PatchGAN: stacked
//! 4x4x4 spectrally normalized convolutions emitting a grid of logits.

use std::cell::RefCell;
use std::path::Path;

use ndarray::{Array1, Array3, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::channels::{ChannelStack, LABEL_SCALE};
use crate::dropout::DropoutMask;
use crate::error::{Error, Result};
use crate::io::blob::{read_blob, write_blob, BlobEntry};
use crate::rng::RngStream;
use crate::tensor::{
    conv3d, conv_transpose3d, instance_norm3d, no_grad, power_iteration, reflect_pad3d,
    spectral_scale, Tensor,
};
use crate::volume::{Modality, TissueLabelVolume, Volume};

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Grid of per-patch realness logits.
pub type PatchLogits = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    SpectralInstance,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    Sigmoid,
    None,
}

/// Structural description of one convolution layer, used both to build the
/// network and to assert architecture invariants in tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub transposed: bool,
    /// reflection padding applied before the conv (zero padding otherwise)
    pub reflect_pad: usize,
    pub zero_pad: usize,
    pub norm: Option<NormKind>,
    pub activation: ActivationKind,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_downsamples: usize,
    pub n_residual_blocks: usize,
    pub residual_dilation: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            in_channels: 11,
            base_width: 64,
            n_downsamples: 2,
            n_residual_blocks: 8,
            residual_dilation: 2,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidArgument(
                "generator spec needs nonzero channels and width".into(),
            ));
        }
        if self.n_downsamples == 0 {
            return Err(Error::InvalidArgument(
                "generator spec needs at least one downsampling stage".into(),
            ));
        }
        Ok(())
    }

    /// Spatial divisibility demanded by the stride-2 stages.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.n_downsamples
    }

    fn width_at(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn layers(&self) -> Vec<LayerDesc> {
        let mut layers = Vec::new();
        layers.push(LayerDesc {
            name: "stem".into(),
            in_ch: self.in_channels,
            out_ch: self.base_width,
            kernel: 7,
            stride: 1,
            dilation: 1,
            transposed: false,
            reflect_pad: 3,
            zero_pad: 0,
            norm: Some(NormKind::SpectralInstance),
            activation: ActivationKind::Relu,
        });
        for d in 0..self.n_downsamples {
            layers.push(LayerDesc {
                name: format!("down{d}"),
                in_ch: self.width_at(d),
                out_ch: self.width_at(d + 1),
                kernel: 4,
                stride: 2,
                dilation: 1,
                transposed: false,
                reflect_pad: 0,
                zero_pad: 1,
                norm: Some(NormKind::SpectralInstance),
                activation: ActivationKind::Relu,
            });
        }
        let mid = self.width_at(self.n_downsamples);
        for r in 0..self.n_residual_blocks {
            for half in 0..2 {
                layers.push(LayerDesc {
                    name: format!("res{r}.conv{half}"),
                    in_ch: mid,
                    out_ch: mid,
                    kernel: 3,
                    stride: 1,
                    dilation: self.residual_dilation,
                    transposed: false,
                    reflect_pad: 0,
                    zero_pad: self.residual_dilation,
                    norm: Some(NormKind::SpectralInstance),
                    activation: if half == 0 {
                        ActivationKind::Relu
                    } else {
                        ActivationKind::None
                    },
                });
            }
        }
        for u in 0..self.n_downsamples {
            let stage = self.n_downsamples - u;
            layers.push(LayerDesc {
                name: format!("up{u}"),
                in_ch: self.width_at(stage),
                out_ch: self.width_at(stage - 1),
                kernel: 4,
                stride: 2,
                dilation: 1,
                transposed: true,
                reflect_pad: 0,
                zero_pad: 1,
                norm: Some(NormKind::SpectralInstance),
                activation: ActivationKind::Relu,
            });
        }
        layers.push(LayerDesc {
            name: "head".into(),
            in_ch: self.base_width,
            out_ch: 1,
            kernel: 7,
            stride: 1,
            dilation: 1,
            transposed: false,
            reflect_pad: 3,
            zero_pad: 0,
            norm: None,
            activation: ActivationKind::Sigmoid,
        });
        layers
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    /// image channels + tissue-label channels
    pub in_channels: usize,
    pub base_width: usize,
    pub n_stride2_blocks: usize,
    pub n_stride1_blocks: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            in_channels: 2,
            base_width: 64,
            n_stride2_blocks: 3,
            n_stride1_blocks: 1,
        }
    }
}

impl DiscriminatorSpec {
    pub fn layers(&self) -> Vec<LayerDesc> {
        let mut layers = Vec::new();
        let mut in_ch = self.in_channels;
        let mut width = self.base_width;
        for b in 0..self.n_stride2_blocks {
            layers.push(LayerDesc {
                name: format!("block{b}"),
                in_ch,
                out_ch: width,
                kernel: 4,
                stride: 2,
                dilation: 1,
                transposed: false,
                reflect_pad: 0,
                zero_pad: 1,
                norm: Some(NormKind::Spectral),
                activation: ActivationKind::LeakyRelu,
            });
            in_ch = width;
            width *= 2;
        }
        for b in 0..self.n_stride1_blocks {
            layers.push(LayerDesc {
                name: format!("block{}", self.n_stride2_blocks + b),
                in_ch,
                out_ch: width,
                kernel: 4,
                stride: 1,
                dilation: 1,
                transposed: false,
                reflect_pad: 0,
                zero_pad: 1,
                norm: Some(NormKind::Spectral),
                activation: ActivationKind::LeakyRelu,
            });
            in_ch = width;
        }
        layers.push(LayerDesc {
            name: "output".into(),
            in_ch,
            out_ch: 1,
            kernel: 4,
            stride: 1,
            dilation: 1,
            transposed: false,
            reflect_pad: 0,
            zero_pad: 1,
            norm: Some(NormKind::Spectral),
            activation: ActivationKind::None,
        });
        layers
    }

    /// Logit grid extent for a given input extent (floor arithmetic of the
    /// configured stack of kernel-4 convolutions); `None` when the input is
    /// too small for the configured depth.
    pub fn logit_extent(&self, mut n: usize) -> Option<usize> {
        for l in self.layers() {
            let padded = n + 2 * l.zero_pad;
            if padded < l.kernel {
                return None;
            }
            n = (padded - l.kernel) / l.stride + 1;
        }
        Some(n)
    }

    /// Smallest input extent the configured depth accepts.
    pub fn min_input_extent(&self) -> usize {
        (8..512)
            .find(|&n| self.logit_extent(n).is_some())
            .unwrap_or(512)
    }
}

/// One spectrally normalized convolution with optional instance norm; the
/// shared building block of both networks.
struct SpectralConvLayer {
    desc: LayerDesc,
    w: Tensor,
    b: Tensor,
    gamma: Option<Tensor>,
    beta: Option<Tensor>,
    u: RefCell<Array1<f64>>,
    v: RefCell<Array1<f64>>,
}

impl SpectralConvLayer {
    fn init(desc: LayerDesc, rng: &mut RngStream) -> Self {
        let k = desc.kernel;
        let wshape: Vec<usize> = if desc.transposed {
            vec![desc.in_ch, desc.out_ch, k, k, k]
        } else {
            vec![desc.out_ch, desc.in_ch, k, k, k]
        };
        let w = ArrayD::from_shape_simple_fn(IxDyn(&wshape), || 0.02 * rng.standard_normal());
        let rows = wshape[0];
        let cols: usize = wshape[1..].iter().product();
        let mut u = Array1::from_shape_simple_fn(rows, || rng.standard_normal());
        let mut v = Array1::from_shape_simple_fn(cols, || rng.standard_normal());
        normalize_vec(&mut u);
        normalize_vec(&mut v);
        let (gamma, beta) = match desc.norm {
            Some(NormKind::SpectralInstance) => (
                Some(Tensor::parameter(ArrayD::ones(IxDyn(&[desc.out_ch])))),
                Some(Tensor::parameter(ArrayD::zeros(IxDyn(&[desc.out_ch])))),
            ),
            _ => (None, None),
        };
        let bias = Tensor::parameter(ArrayD::zeros(IxDyn(&[desc.out_ch])));
        SpectralConvLayer {
            desc,
            w: Tensor::parameter(w),
            b: bias,
            gamma,
            beta,
            u: RefCell::new(u),
            v: RefCell::new(v),
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        if training {
            let wd = self.w.to_array();
            power_iteration(&wd, &mut self.u.borrow_mut(), &mut self.v.borrow_mut());
        }
        let w_sn = spectral_scale(&self.w, &self.u.borrow(), &self.v.borrow());
        let x = if self.desc.reflect_pad > 0 {
            reflect_pad3d(x, self.desc.reflect_pad)
        } else {
            x.clone()
        };
        let y = if self.desc.transposed {
            conv_transpose3d(&x, &w_sn, Some(&self.b), self.desc.stride, self.desc.zero_pad)
        } else {
            conv3d(
                &x,
                &w_sn,
                Some(&self.b),
                self.desc.stride,
                self.desc.zero_pad,
                self.desc.dilation,
            )
        };
        let y = match (&self.gamma, &self.beta) {
            (Some(g), Some(b)) => instance_norm3d(&y, g, b, NORM_EPS),
            _ => y,
        };
        match self.desc.activation {
            ActivationKind::Relu => y.relu(),
            ActivationKind::LeakyRelu => y.leaky_relu(LEAKY_SLOPE),
            ActivationKind::Sigmoid => y.sigmoid(),
            ActivationKind::None => y,
        }
    }

    fn parameters(&self) -> Vec<Tensor> {
        let mut p = vec![self.w.clone(), self.b.clone()];
        if let Some(g) = &self.gamma {
            p.push(g.clone());
        }
        if let Some(b) = &self.beta {
            p.push(b.clone());
        }
        p
    }

    fn state_dict(&self, prefix: &str, out: &mut Vec<(String, ArrayD<f64>)>) {
        out.push((format!("{prefix}.w"), self.w.to_array()));
        out.push((format!("{prefix}.b"), self.b.to_array()));
        if let Some(g) = &self.gamma {
            out.push((format!("{prefix}.gamma"), g.to_array()));
        }
        if let Some(b) = &self.beta {
            out.push((format!("{prefix}.beta"), b.to_array()));
        }
        out.push((format!("{prefix}.u"), self.u.borrow().clone().into_dyn()));
        out.push((format!("{prefix}.v"), self.v.borrow().clone().into_dyn()));
    }

    fn load_state(
        &self,
        prefix: &str,
        map: &mut std::collections::HashMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        fn take(
            map: &mut std::collections::HashMap<String, ArrayD<f64>>,
            key: String,
        ) -> Result<ArrayD<f64>> {
            map.remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {key}")))
        }
        fn assign(t: &Tensor, a: ArrayD<f64>, key: &str) -> Result<()> {
            if t.shape() != a.shape().to_vec() {
                return Err(Error::Checkpoint(format!(
                    "parameter {key} shape {:?} does not match spec {:?}",
                    a.shape(),
                    t.shape()
                )));
            }
            t.set_data(a);
            Ok(())
        }
        assign(&self.w, take(map, format!("{prefix}.w"))?, "w")?;
        assign(&self.b, take(map, format!("{prefix}.b"))?, "b")?;
        if let Some(g) = &self.gamma {
            assign(g, take(map, format!("{prefix}.gamma"))?, "gamma")?;
        }
        if let Some(b) = &self.beta {
            assign(b, take(map, format!("{prefix}.beta"))?, "beta")?;
        }
        let u = take(map, format!("{prefix}.u"))?;
        let v = take(map, format!("{prefix}.v"))?;
        *self.u.borrow_mut() = u.into_dimensionality::<ndarray::Ix1>().map_err(err_dim)?;
        *self.v.borrow_mut() = v.into_dimensionality::<ndarray::Ix1>().map_err(err_dim)?;
        Ok(())
    }
}

fn err_dim(e: ndarray::ShapeError) -> Error {
    Error::Checkpoint(format!("buffer shape: {e}"))
}

fn normalize_vec(x: &mut Array1<f64>) {
    let n = x.dot(x).sqrt();
    if n > 1e-12 {
        x.mapv_inplace(|v| v / n);
    }
}

pub struct Generator {
    pub spec: GeneratorSpec,
    layers: Vec<SpectralConvLayer>,
}

impl Generator {
    pub fn init(spec: GeneratorSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers()
            .into_iter()
            .map(|d| SpectralConvLayer::init(d, rng))
            .collect();
        Ok(Generator { spec, layers })
    }

    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "generator input must be (C,H,W,D), got {shape:?}"
            )));
        }
        if shape[0] != self.spec.in_channels {
            return Err(Error::InvalidArgument(format!(
                "generator expects {} channels, got {}",
                self.spec.in_channels, shape[0]
            )));
        }
        let m = self.spec.spatial_multiple();
        for &n in &shape[1..] {
            if n % m != 0 || n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "generator spatial dims must be positive multiples of {m}, got {shape:?}"
                )));
            }
        }
        Ok(())
    }

    /// Forward pass producing a `(H,W,D)` tensor in `[0,1]`.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        self.validate_input(&x.shape())?;
        let n_down = self.spec.n_downsamples;
        let n_res = self.spec.n_residual_blocks;
        let mut idx = 0;
        let mut y = self.layers[idx].forward(x, training);
        idx += 1;
        for _ in 0..n_down {
            y = self.layers[idx].forward(&y, training);
            idx += 1;
        }
        for _ in 0..n_res {
            let h = self.layers[idx].forward(&y, training);
            let h = self.layers[idx + 1].forward(&h, training);
            y = y.add(&h);
            idx += 2;
        }
        for _ in 0..n_down {
            y = self.layers[idx].forward(&y, training);
            idx += 1;
        }
        y = self.layers[idx].forward(&y, training);
        let s = y.shape();
        Ok(y.reshape(&[s[1], s[2], s[3]]))
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn state_dict(&self, out: &mut Vec<(String, ArrayD<f64>)>) {
        for l in &self.layers {
            l.state_dict(&format!("g.{}", l.desc.name), out);
        }
    }

    pub fn load_state(
        &self,
        map: &mut std::collections::HashMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        for l in &self.layers {
            l.load_state(&format!("g.{}", l.desc.name), map)?;
        }
        Ok(())
    }
}

pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    layers: Vec<SpectralConvLayer>,
}

impl Discriminator {
    pub fn init(spec: DiscriminatorSpec, rng: &mut RngStream) -> Self {
        let layers = spec
            .layers()
            .into_iter()
            .map(|d| SpectralConvLayer::init(d, rng))
            .collect();
        Discriminator { spec, layers }
    }

    /// Forward pass over a `(C,H,W,D)` input; returns the `(1,h,w,d)` logit
    /// grid as a tensor.
    pub fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        let mut y = x.clone();
        for l in &self.layers {
            y = l.forward(&y, training);
        }
        y
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn state_dict(&self, out: &mut Vec<(String, ArrayD<f64>)>) {
        for l in &self.layers {
            l.state_dict(&format!("d.{}", l.desc.name), out);
        }
    }

    pub fn load_state(
        &self,
        map: &mut std::collections::HashMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        for l in &self.layers {
            l.load_state(&format!("d.{}", l.desc.name), map)?;
        }
        Ok(())
    }
}

/// Training metadata carried with a checkpointed model pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleMeta {
    pub epoch: usize,
    pub seed: u64,
    pub dataset_id: String,
    pub target: Modality,
}

pub struct ModelBundle {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub spe: crate::spe::SpeConfig,
    pub meta: BundleMeta,
}

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    version: u32,
    crate_version: String,
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    spe: crate::spe::SpeConfig,
    meta: BundleMeta,
    params_sha256: String,
    params: Vec<BlobEntry>,
}

impl ModelBundle {
    /// Fresh bundle with seeded initialization.
    pub fn init(
        gen_spec: GeneratorSpec,
        disc_spec: DiscriminatorSpec,
        spe: crate::spe::SpeConfig,
        meta: BundleMeta,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(ModelBundle {
            generator: Generator::init(gen_spec, &mut rng.derive("generator"))?,
            discriminator: Discriminator::init(disc_spec, &mut rng.derive("discriminator")),
            spe,
            meta,
        })
    }

    pub fn state_dict(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.generator.state_dict(&mut out);
        self.discriminator.state_dict(&mut out);
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let state = self.state_dict();
        let (params, sha) = write_blob(&dir.join("params.bin"), &state)?;
        let manifest = BundleManifest {
            version: BUNDLE_FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            gen_spec: self.generator.spec.clone(),
            disc_spec: self.discriminator.spec.clone(),
            spe: self.spe,
            meta: self.meta.clone(),
            params_sha256: sha,
            params,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), text).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: BundleManifest = serde_json::from_str(&text)?;
        if manifest.version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {BUNDLE_FORMAT_VERSION})",
                manifest.version
            )));
        }
        let arrays = read_blob(
            &dir.join("params.bin"),
            &manifest.params,
            &manifest.params_sha256,
        )?;
        let mut map: std::collections::HashMap<String, ArrayD<f64>> =
            arrays.into_iter().collect();
        let mut rng = RngStream::new(0);
        let bundle = ModelBundle::init(
            manifest.gen_spec,
            manifest.disc_spec,
            manifest.spe,
            manifest.meta,
            &mut rng,
        )?;
        bundle.generator.load_state(&mut map)?;
        bundle.discriminator.load_state(&mut map)?;
        if !map.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} unused parameters (e.g. {:?})",
                map.len(),
                map.keys().next()
            )));
        }
        Ok(bundle)
    }

    /// SHA-256 of the current parameter state, for provenance records.
    pub fn params_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, a) in self.state_dict() {
            hasher.update(name.as_bytes());
            for v in a.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Scale a tissue-label volume into the `[0,1]` channel encoding used as
/// discriminator input.
pub fn tissue_channel(tis: &TissueLabelVolume) -> Array3<f64> {
    tis.data.mapv(|c| c as f64 / LABEL_SCALE)
}

/// Run the generator on an assembled channel stack (evaluation mode).
pub fn generator_forward(stack: &ChannelStack, bundle: &ModelBundle) -> Result<Volume> {
    let data = no_grad(|| {
        let x = Tensor::constant(stack.channels.clone().into_dyn());
        bundle
            .generator
            .forward(&x, false)
            .map(|t| t.to_array().into_dimensionality::<ndarray::Ix3>().unwrap())
    })?;
    Ok(Volume {
        data,
        spacing: stack.spacing,
        affine: stack.affine,
        modality: bundle.meta.target,
    })
}

/// Composite output: synthesized voxels inside the mask, original voxels
/// outside, bit-exactly.
pub fn composite(pred: &Volume, orig: &Volume, mask: &DropoutMask) -> Result<Volume> {
    if pred.shape() != orig.shape() || pred.shape() != mask.shape() {
        return Err(Error::shape_mismatch(
            "composite",
            &pred.shape(),
            &mask.shape(),
        ));
    }
    let mut out = orig.data.clone();
    ndarray::Zip::from(&mut out)
        .and(&pred.data)
        .and(&mask.data)
        .for_each(|o, &p, &m| {
            if m != 0 {
                *o = p;
            }
        });
    Ok(orig.with_data(out, orig.modality))
}

/// Composite as a graph node: `pred * mask + orig * (1-mask)`; gradients flow
/// only through masked voxels.
pub fn composite_t(pred: &Tensor, orig: &Array3<f64>, mask: &Array3<f64>) -> Tensor {
    let keep = orig * &mask.mapv(|m| 1.0 - m);
    pred.mul_const(&mask.clone().into_dyn())
        .add_const(&keep.into_dyn())
}

/// Discriminator logits for an (image, tissue-label) pair in eval mode.
pub fn discriminator_forward(
    img: &Volume,
    tis: &TissueLabelVolume,
    bundle: &ModelBundle,
) -> Result<PatchLogits> {
    if img.shape() != tis.shape() {
        return Err(Error::shape_mismatch(
            "discriminator_forward",
            &img.shape(),
            &tis.shape(),
        ));
    }
    let logits = no_grad(|| {
        let x = disc_input(&img.data, &tissue_channel(tis));
        bundle.discriminator.forward(&x, false)
    });
    let a = logits.to_array();
    let s = a.shape().to_vec();
    Ok(a
        .into_shape_with_order(IxDyn(&[s[1], s[2], s[3]]))
        .unwrap()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap())
}

/// Stack an image and a scaled tissue channel into discriminator input.
pub fn disc_input(img: &Array3<f64>, tis_channel: &Array3<f64>) -> Tensor {
    let d = img.dim();
    let mut x = Array4::zeros((2, d.0, d.1, d.2));
    x.index_axis_mut(Axis(0), 0).assign(img);
    x.index_axis_mut(Axis(0), 1).assign(tis_channel);
    Tensor::constant(x.into_dyn())
}
