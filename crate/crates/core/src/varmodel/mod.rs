//! The joint visual-audio representation: dual-branch encoders with
//! projection heads onto a unit hypersphere, binary empty-intent heads that
//! gate the joint-space output, contrastive training objectives, and the
//! training loops.

mod losses;
mod train;

pub use losses::{bce_terms, finetune_loss, ssc_loss, supcon_loss, triplet_loss, triplet_loss_batch, var_loss, BoundVar};
pub use train::{train_var, LossMode, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::MfccMatrix;
use crate::checkpoint::{self, CheckpointError};
use crate::envsim::ObsImage;
use crate::numerics::{ef, Element, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::seeding;
use rand_distr::{Distribution, Normal};

/// Fixed input scaling for MFCC values, keeping conv activations O(1) while
/// preserving the all-zero empty-intent matrix at exactly zero.
pub const MFCC_INPUT_SCALE: f64 = 1.0 / 50.0;

#[derive(Debug, Error)]
pub enum VarError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("every anchor was skipped: all labels unique")]
    AllAnchorsSkipped,
    #[error("invalid pairing: {0}")]
    UnpairedElement(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("batch size {0} too small (need >= 2)")]
    BatchTooSmall(usize),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarConfig {
    pub image_size: usize,
    /// (l, m) of the sound observation.
    pub sound_shape: (usize, usize),
    pub image_channels: Vec<usize>,
    pub sound_channels: Vec<usize>,
    pub d_image: usize,
    pub d_sound: usize,
    pub d_joint: usize,
    pub temperature: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub margin: f64,
    /// Non-empty intent count M; label M is the empty intent.
    pub intent_count: usize,
    /// When false (the "non-centered" ablation) the binary-head loss terms
    /// and the output gate are disabled: v = z always.
    pub centered: bool,
}

impl Default for VarConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            sound_shape: (100, 13),
            image_channels: vec![16, 32, 32],
            sound_channels: vec![8, 16],
            d_image: 128,
            d_sound: 128,
            d_joint: 32,
            temperature: 0.1,
            alpha1: 1.0,
            alpha2: 0.5,
            margin: 0.5,
            intent_count: 4,
            centered: true,
        }
    }
}

impl VarConfig {
    pub fn empty_intent(&self) -> usize {
        self.intent_count
    }

    fn image_spatial_after_convs(&self) -> usize {
        let mut s = self.image_size;
        for _ in &self.image_channels {
            s = (s + 2 - 3) / 2 + 1; // k=3, stride 2, pad 1
        }
        s
    }

    fn sound_spatial_after_convs(&self) -> (usize, usize) {
        let (mut l, m) = self.sound_shape;
        for _ in &self.sound_channels {
            l = (l + 2 - 3) / 2 + 1; // k=3, stride (2,1), pad 1
        }
        (l, m)
    }

    /// Parameter names and shapes in serialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let d_joint = self.d_joint;
        let mut push_branch = |prefix: &str, in_ch: usize, channels: &[usize], flat: usize, d_repr: usize| {
            let mut prev = in_ch;
            for (i, &ch) in channels.iter().enumerate() {
                out.push((format!("{prefix}.conv{i}.w"), vec![ch, prev, 3, 3]));
                out.push((format!("{prefix}.conv{i}.b"), vec![ch]));
                prev = ch;
            }
            out.push((format!("{prefix}.fc.w"), vec![flat, d_repr]));
            out.push((format!("{prefix}.fc.b"), vec![d_repr]));
            out.push((format!("{prefix}.proj.w1"), vec![d_repr, d_repr]));
            out.push((format!("{prefix}.proj.b1"), vec![d_repr]));
            out.push((format!("{prefix}.proj.w2"), vec![d_repr, d_joint]));
            out.push((format!("{prefix}.proj.b2"), vec![d_joint]));
            out.push((format!("{prefix}.bin.w"), vec![d_repr, 1]));
            out.push((format!("{prefix}.bin.b"), vec![1]));
        };
        let s = self.image_spatial_after_convs();
        push_branch("img", 3, &self.image_channels, self.image_channels.last().unwrap() * s * s, self.d_image);
        let (l, m) = self.sound_spatial_after_convs();
        push_branch("snd", 1, &self.sound_channels, self.sound_channels.last().unwrap() * l * m, self.d_sound);
        out
    }
}

/// Trained (or training) representation parameters.
#[derive(Clone)]
pub struct VarParams<E: Element> {
    pub cfg: VarConfig,
    pub store: ParamStore<E>,
}

impl<E: Element> VarParams<E> {
    /// He-normal initialization. Projection biases start slightly off zero
    /// so the all-zero empty-intent input does not project onto the origin
    /// (which would make L2 normalization degenerate) before training.
    pub fn init(cfg: VarConfig, seed: u64) -> Self {
        let mut rng = seeding::rng(seed, "var-init", 0);
        let mut store = ParamStore::new();
        for (name, shape) in cfg.parameter_shapes() {
            let n: usize = shape.iter().product();
            let tensor = if shape.len() == 1 {
                if name.contains(".proj.") {
                    let dist = Normal::new(0.0, 0.1).unwrap();
                    Tensor::from_f64(shape, &(0..n).map(|_| dist.sample(&mut rng)).collect::<Vec<f64>>()).unwrap()
                } else {
                    Tensor::zeros(shape)
                }
            } else {
                let fan_in: usize = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                Tensor::from_f64(shape, &(0..n).map(|_| dist.sample(&mut rng)).collect::<Vec<f64>>()).unwrap()
            };
            store.push(name, tensor);
        }
        Self { cfg, store }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), VarError> {
        checkpoint::save(path, &self.store, serde_json::to_value(&self.cfg).expect("config serializes"))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, VarError> {
        let (store, manifest) = checkpoint::load::<E>(path)?;
        let cfg: VarConfig = serde_json::from_value(manifest.config.clone()).map_err(CheckpointError::Manifest)?;
        checkpoint::validate_shapes(&store, &cfg.parameter_shapes())?;
        Ok(Self { cfg, store })
    }
}

/// Per-input encoder output: representation, hypersphere embedding,
/// empty-intent probability, and the gated joint-space vector.
#[derive(Debug, Clone)]
pub struct VarOutput<E: Element> {
    pub h: Tensor<E>,
    pub z: Tensor<E>,
    pub e_hat: f64,
    pub v: Tensor<E>,
}

/// Apply the output gate: v = z when the non-empty probability clears 0.5
/// (boundary included), else the zero vector. The non-centered ablation
/// always passes z through.
pub fn gate<E: Element>(z: &Tensor<E>, e_hat: f64, centered: bool) -> Tensor<E> {
    if !centered || e_hat >= 0.5 {
        z.clone()
    } else {
        Tensor::zeros(z.shape().to_vec())
    }
}

/// Batch of images as a [B,3,n,n] tensor in [0,1].
pub fn images_to_tensor<E: Element>(images: &[&ObsImage], expected_size: usize) -> Result<Tensor<E>, VarError> {
    let b = images.len();
    let n = expected_size;
    let mut data = Vec::with_capacity(b * 3 * n * n);
    for img in images {
        if img.size != n {
            return Err(VarError::ShapeMismatch(format!("image size {} != config {}", img.size, n)));
        }
        data.extend(img.to_chw_f64().into_iter().map(|x| ef::<E>(x)));
    }
    Tensor::new(vec![b, 3, n, n], data).map_err(VarError::from)
}

/// Batch of sounds as a [B,1,l,m] tensor, input-scaled.
pub fn sounds_to_tensor<E: Element>(sounds: &[&MfccMatrix], expected: (usize, usize)) -> Result<Tensor<E>, VarError> {
    let b = sounds.len();
    let (l, m) = expected;
    let mut data = Vec::with_capacity(b * l * m);
    for s in sounds {
        if s.shape() != expected {
            return Err(VarError::ShapeMismatch(format!("sound shape {:?} != config {:?}", s.shape(), expected)));
        }
        data.extend(s.values().iter().map(|&x| ef::<E>(x * MFCC_INPUT_SCALE)));
    }
    Tensor::new(vec![b, 1, l, m], data).map_err(VarError::from)
}

/// Batched encoder outputs on an existing tape (training path).
pub struct BatchEncoding<E: Element> {
    pub h: Var<E>,
    pub z: Var<E>,
    pub e_hat: Var<E>,
}

pub(crate) fn encode_branch<E: Element>(
    bound: &BoundVar<E>,
    prefix: &str,
    input: &Var<E>,
    conv_count: usize,
    stride: (usize, usize),
) -> Result<BatchEncoding<E>, VarError> {
    let mut x = input.clone();
    for i in 0..conv_count {
        x = x
            .conv2d(&bound.get(&format!("{prefix}.conv{i}.w")), &bound.get(&format!("{prefix}.conv{i}.b")), stride, (1, 1))
            .relu();
    }
    let shape = x.shape();
    let flat = shape[1] * shape[2] * shape[3];
    let h = x
        .reshape(vec![shape[0], flat])
        .affine(&bound.get(&format!("{prefix}.fc.w")), &bound.get(&format!("{prefix}.fc.b")));
    let hidden = h.affine(&bound.get(&format!("{prefix}.proj.w1")), &bound.get(&format!("{prefix}.proj.b1"))).relu();
    let z_raw = hidden.affine(&bound.get(&format!("{prefix}.proj.w2")), &bound.get(&format!("{prefix}.proj.b2")));
    let z = z_raw.l2_normalize_rows()?;
    let logits = h.affine(&bound.get(&format!("{prefix}.bin.w")), &bound.get(&format!("{prefix}.bin.b")));
    let e_hat = logits.reshape(vec![shape[0]]).sigmoid();
    Ok(BatchEncoding { h, z, e_hat })
}

/// Encode a batch of images on the tape.
pub fn encode_images_on_tape<E: Element>(
    bound: &BoundVar<E>,
    cfg: &VarConfig,
    images: &Var<E>,
) -> Result<BatchEncoding<E>, VarError> {
    encode_branch(bound, "img", images, cfg.image_channels.len(), (2, 2))
}

/// Encode a batch of sounds on the tape.
pub fn encode_sounds_on_tape<E: Element>(
    bound: &BoundVar<E>,
    cfg: &VarConfig,
    sounds: &Var<E>,
) -> Result<BatchEncoding<E>, VarError> {
    encode_branch(bound, "snd", sounds, cfg.sound_channels.len(), (2, 1))
}

fn outputs_from_encoding<E: Element>(enc: &BatchEncoding<E>, cfg: &VarConfig) -> Vec<VarOutput<E>> {
    let h = enc.h.value();
    let z = enc.z.value();
    let e = enc.e_hat.value();
    let b = h.shape()[0];
    let (dh, dz) = (h.shape()[1], z.shape()[1]);
    (0..b)
        .map(|k| {
            let hk = Tensor::new(vec![dh], h.data()[k * dh..(k + 1) * dh].to_vec()).unwrap();
            let zk = Tensor::new(vec![dz], z.data()[k * dz..(k + 1) * dz].to_vec()).unwrap();
            let e_hat = e.data()[k].to_f64().unwrap();
            let v = gate(&zk, e_hat, cfg.centered);
            VarOutput { h: hk, z: zk, e_hat, v }
        })
        .collect()
}

/// Frozen inference over a batch of images.
pub fn encode_image_batch<E: Element>(params: &VarParams<E>, images: &[&ObsImage]) -> Result<Vec<VarOutput<E>>, VarError> {
    let tape = Tape::new();
    let bound = BoundVar::frozen(&tape, &params.store);
    let input = tape.constant(images_to_tensor(images, params.cfg.image_size)?);
    let enc = encode_images_on_tape(&bound, &params.cfg, &input)?;
    Ok(outputs_from_encoding(&enc, &params.cfg))
}

/// Frozen inference over a batch of sounds.
pub fn encode_sound_batch<E: Element>(params: &VarParams<E>, sounds: &[&MfccMatrix]) -> Result<Vec<VarOutput<E>>, VarError> {
    let tape = Tape::new();
    let bound = BoundVar::frozen(&tape, &params.store);
    let input = tape.constant(sounds_to_tensor(sounds, params.cfg.sound_shape)?);
    let enc = encode_sounds_on_tape(&bound, &params.cfg, &input)?;
    Ok(outputs_from_encoding(&enc, &params.cfg))
}

/// Encoder output (h, z, e_hat, v) for one image.
pub fn encode_image<E: Element>(params: &VarParams<E>, image: &ObsImage) -> Result<VarOutput<E>, VarError> {
    Ok(encode_image_batch(params, &[image])?.pop().unwrap())
}

/// Encoder output (h, z, e_hat, v) for one sound.
pub fn encode_sound<E: Element>(params: &VarParams<E>, sound: &MfccMatrix) -> Result<VarOutput<E>, VarError> {
    Ok(encode_sound_batch(params, &[sound])?.pop().unwrap())
}

#[cfg(test)]
pub(crate) fn tiny_config() -> VarConfig {
    VarConfig {
        image_size: 16,
        sound_shape: (20, 5),
        image_channels: vec![4, 8],
        sound_channels: vec![4],
        d_image: 16,
        d_sound: 12,
        d_joint: 8,
        intent_count: 3,
        ..VarConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u8) -> ObsImage {
        let mut img = ObsImage::filled(16, [seed, 128, 40]);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = b.wrapping_add((i % 13) as u8).wrapping_mul(seed | 1);
        }
        img
    }

    #[test]
    fn outputs_live_on_unit_hypersphere() {
        let params = VarParams::<f64>::init(tiny_config(), 4);
        for seed in 0..100u8 {
            let out = encode_image(&params, &test_image(seed)).unwrap();
            let norm: f64 = out.z.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "seed {seed}: |z| = {norm}");
            let vnorm: f64 = out.v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(vnorm.abs() < 1e-6 || (vnorm - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&out.e_hat));
        }
    }

    #[test]
    fn gate_threshold_boundary() {
        let z = Tensor::<f64>::from_f64(vec![3], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(gate(&z, 0.49, true).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(gate(&z, 0.5, true).data(), z.data());
        assert_eq!(gate(&z, 0.49, false).data(), z.data(), "non-centered ablation never gates");
    }

    #[test]
    fn zero_sound_encodes_without_degenerate_norm() {
        let params = VarParams::<f64>::init(tiny_config(), 11);
        let zero = MfccMatrix::zero(20, 5);
        let out = encode_sound(&params, &zero).unwrap();
        let norm: f64 = out.z.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let params = VarParams::<f32>::init(tiny_config(), 9);
        let dir = std::env::temp_dir().join(format!("var-ckpt-{}", std::process::id()));
        let path = dir.join("var.ckpt");
        params.save(&path).unwrap();
        let loaded = VarParams::<f32>::load(&path).unwrap();
        assert_eq!(loaded.store, params.store);
        let out_a = encode_image(&params, &test_image(3)).unwrap();
        let out_b = encode_image(&loaded, &test_image(3)).unwrap();
        assert_eq!(out_a.z, out_b.z);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shape_mismatch_rejected() {
        let params = VarParams::<f64>::init(tiny_config(), 2);
        let wrong = ObsImage::filled(32, [1, 2, 3]);
        assert!(matches!(encode_image(&params, &wrong), Err(VarError::ShapeMismatch(_))));
        let wrong_sound = MfccMatrix::zero(10, 5);
        assert!(matches!(encode_sound(&params, &wrong_sound), Err(VarError::ShapeMismatch(_))));
    }
}
