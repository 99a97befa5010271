//! Frozen stand-ins for the pretrained visual and audio encoders.
//!
//! Both are random projections fixed by a seed and never trained. The
//! visual encoder is a tiny four-stage conv pyramid; the audio encoder sums
//! fixed per-category signature vectors for the audible categories.

use serde::{Deserialize, Serialize};

use super::scene::Sample;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channel widths of `V2..V5`.
    pub visual_channels: [usize; 4],
    /// Audio rows `S`.
    pub audio_rows: usize,
    /// Audio channels `C^a`.
    pub audio_channels: usize,
    pub audio_noise_sigma: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { visual_channels: [32, 64, 128, 256], audio_rows: 8, audio_channels: 32, audio_noise_sigma: 0.05 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.visual_channels.contains(&0) || self.audio_rows == 0 || self.audio_channels == 0 {
            return Err(Error::config("encoder widths must be positive"));
        }
        if !(self.audio_noise_sigma >= 0.0) {
            return Err(Error::config("audio_noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Encoder outputs for one frame. Visual maps are `H_i×W_i×C_i` with
/// `H_i = H / 2^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    /// `[V2, V3, V4, V5]`.
    pub visual: [Tensor<T>; 4],
    /// `S×C^a`.
    pub audio: Tensor<T>,
}

impl<T: Real> FeatureBundle<T> {
    pub fn v(&self, level: usize) -> &Tensor<T> {
        &self.visual[level - 2]
    }

    pub fn cast<U: Real>(&self) -> FeatureBundle<U> {
        FeatureBundle { visual: self.visual.each_ref().map(|t| t.cast()), audio: self.audio.cast() }
    }
}

struct Stage {
    weight: Vec<f64>,
    bias: Vec<f64>,
    cin: usize,
    cout: usize,
}

/// Frozen visual pyramid: 2×2 average-pool stem, then four stages of
/// `conv3×3 → ReLU → 2×2 average pool`. Convolutions replicate edges so a
/// constant image yields spatially constant features.
pub struct VisualEncoder {
    stages: Vec<Stage>,
}

fn avg_pool2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let p = |yy: usize, xq: usize| x[(yy * w + xq) * c + ch];
                out[(y * ow + xx) * c + ch] =
                    0.25 * (p(2 * y, 2 * xx) + p(2 * y, 2 * xx + 1) + p(2 * y + 1, 2 * xx) + p(2 * y + 1, 2 * xx + 1));
            }
        }
    }
    out
}

fn conv3x3_replicate(x: &[f64], h: usize, w: usize, st: &Stage) -> Vec<f64> {
    let (cin, cout) = (st.cin, st.cout);
    let mut cols = vec![0.0; h * w * 9 * cin];
    for y in 0..h {
        for xx in 0..w {
            for dy in 0..3 {
                let sy = (y + dy).saturating_sub(1).min(h - 1);
                for dx in 0..3 {
                    let sx = (xx + dx).saturating_sub(1).min(w - 1);
                    let dst = ((y * w + xx) * 9 + dy * 3 + dx) * cin;
                    let src = (sy * w + sx) * cin;
                    cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(h * w * cout);
    for _ in 0..h * w {
        out.extend_from_slice(&st.bias);
    }
    kernels::matmul_acc(&cols, &st.weight, &mut out, h * w, 9 * cin, cout);
    out
}

impl VisualEncoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let mut stages = Vec::new();
        let mut cin = 3;
        for &cout in &cfg.visual_channels {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let weight = (0..9 * cin * cout).map(|_| std * rng.normal()).collect();
            let bias = (0..cout).map(|_| 0.1 * rng.normal()).collect();
            stages.push(Stage { weight, bias, cin, cout });
            cin = cout;
        }
        VisualEncoder { stages }
    }

    /// `[V2, V3, V4, V5]` for an `H×W×3` image.
    pub fn encode<T: Real>(&self, image: &Tensor<f32>) -> Result<[Tensor<T>; 4]> {
        let d = image.dims();
        if d.len() != 3 || d[2] != 3 {
            return Err(Error::shape(format!("image must be H×W×3, got {d:?}")));
        }
        let (mut h, mut w) = (d[0], d[1]);
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("image size {h}×{w} is not divisible by 32")));
        }
        let mut x: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
        x = avg_pool2(&x, h, w, 3);
        h /= 2;
        w /= 2;
        let mut outs = Vec::with_capacity(4);
        for st in &self.stages {
            let mut y = conv3x3_replicate(&x, h, w, st);
            for v in &mut y {
                *v = v.max(0.0);
            }
            x = avg_pool2(&y, h, w, st.cout);
            h /= 2;
            w /= 2;
            outs.push(Tensor::new([h, w, st.cout], x.iter().map(|&v| T::from_f64_lossy(v)).collect())?);
        }
        Ok(outs.try_into().expect("four stages"))
    }
}

/// `K` fixed random unit vectors of length `C^a`.
pub struct SignatureBank {
    signatures: Vec<Vec<f64>>,
    noise_seed: u64,
}

impl SignatureBank {
    pub fn new(num_categories: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let signatures = (0..num_categories)
            .map(|_| {
                let v: Vec<f64> = (0..cfg.audio_channels).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        SignatureBank { signatures, noise_seed: rng.next_u64() }
    }

    pub fn signature(&self, k: usize) -> &[f64] {
        &self.signatures[k]
    }

    /// `S×C^a` audio feature: the sum of audible signatures on every row,
    /// plus Gaussian noise keyed by the frame index.
    pub fn encode<T: Real>(&self, presence: &[bool], frame_index: u64, cfg: &EncoderConfig) -> Result<Tensor<T>> {
        if presence.len() != self.signatures.len() {
            return Err(Error::shape(format!(
                "presence vector has {} entries, bank has {} categories",
                presence.len(),
                self.signatures.len()
            )));
        }
        let c = cfg.audio_channels;
        let mut mix = vec![0.0; c];
        for (sig, _) in self.signatures.iter().zip(presence).filter(|(_, &p)| p) {
            for (m, s) in mix.iter_mut().zip(sig) {
                *m += s;
            }
        }
        let mut rng = Rng::new(self.noise_seed).split(frame_index);
        let data = (0..cfg.audio_rows * c)
            .map(|i| {
                let noise = if cfg.audio_noise_sigma > 0.0 { cfg.audio_noise_sigma * rng.normal() } else { 0.0 };
                T::from_f64_lossy(mix[i % c] + noise)
            })
            .collect();
        Tensor::new([cfg.audio_rows, c], data)
    }
}

/// Both frozen encoders, seeded once per experiment.
pub struct StubEncoders {
    pub config: EncoderConfig,
    pub visual: VisualEncoder,
    pub audio: SignatureBank,
}

const VISUAL_KEY: u64 = 0x5649_5355;
const AUDIO_KEY: u64 = 0x4155_4449;

impl StubEncoders {
    pub fn new(cfg: &EncoderConfig, num_categories: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        Ok(StubEncoders {
            config: cfg.clone(),
            visual: VisualEncoder::new(cfg, &mut root.split(VISUAL_KEY)),
            audio: SignatureBank::new(num_categories, cfg, &mut root.split(AUDIO_KEY)),
        })
    }

    pub fn encode<T: Real>(&self, sample: &Sample) -> Result<FeatureBundle<T>> {
        Ok(FeatureBundle {
            visual: self.visual.encode(&sample.image)?,
            audio: self.audio.encode(&sample.presence, sample.frame_index, &self.config)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, SceneConfig};

    fn encoders() -> StubEncoders {
        StubEncoders::new(&EncoderConfig::default(), 4, 11).unwrap()
    }

    #[test]
    fn pyramid_shapes_follow_stride() {
        let enc = encoders();
        let img = Tensor::zeros([64, 64, 3]);
        let v: [Tensor<f32>; 4] = enc.visual.encode(&img).unwrap();
        assert_eq!(v[0].dims(), &[16, 16, 32]);
        assert_eq!(v[1].dims(), &[8, 8, 64]);
        assert_eq!(v[2].dims(), &[4, 4, 128]);
        assert_eq!(v[3].dims(), &[2, 2, 256]);
    }

    #[test]
    fn zero_image_gives_constant_nonnegative_features() {
        let enc = encoders();
        let v: [Tensor<f64>; 4] = enc.visual.encode(&Tensor::zeros([64, 64, 3])).unwrap();
        for t in &v {
            let c = t.dims()[2];
            let d = t.data();
            assert!(d.iter().all(|&x| x >= 0.0));
            for p in 1..d.len() / c {
                assert_eq!(&d[p * c..(p + 1) * c], &d[..c]);
            }
        }
    }

    #[test]
    fn indivisible_size_is_config_error() {
        let enc = encoders();
        let r: Result<[Tensor<f32>; 4]> = enc.visual.encode(&Tensor::zeros([48, 64, 3]));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn audio_closed_forms() {
        let cfg = EncoderConfig { audio_noise_sigma: 0.0, ..Default::default() };
        let enc = StubEncoders::new(&cfg, 4, 5).unwrap();
        let a: Tensor<f64> = enc.audio.encode(&[false; 4], 0, &cfg).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
        let a: Tensor<f64> = enc.audio.encode(&[false, false, true, false], 0, &cfg).unwrap();
        assert_eq!(a.dims(), &[8, 32]);
        for row in a.data().chunks(32) {
            assert_eq!(row, enc.audio.signature(2));
        }
        let norm: f64 = enc.audio.signature(1).iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_scale_audio_shape() {
        let cfg = EncoderConfig { audio_rows: 24, audio_channels: 128, ..Default::default() };
        let enc = StubEncoders::new(&cfg, 4, 5).unwrap();
        let a: Tensor<f32> = enc.audio.encode(&[true; 4], 3, &cfg).unwrap();
        assert_eq!(a.dims(), &[24, 128]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = encoders();
        let s = generate_scene(&mut Rng::new(1), &SceneConfig::default(), 7).unwrap();
        let a: FeatureBundle<f32> = enc.encode(&s).unwrap();
        let b: FeatureBundle<f32> = encoders().encode(&s).unwrap();
        for (x, y) in a.visual.iter().zip(&b.visual) {
            assert!(x.bit_eq(y));
        }
        assert!(a.audio.bit_eq(&b.audio));
    }
}
