//! Small deterministic backbone for CPU-scale runs and gradient checks.
//!
//! * Autoencoder: 64×64 RGB ↔ 4×8×8 latent through a fixed map whose rows are
//!   orthonormal on each 8×8 patch (per-channel means plus a diagonal ramp).
//!   Images inside the decoder's range round-trip exactly.
//! * Denoiser: a two-scale attention UNet (8×8 and 4×4) with one
//!   self-attention and one cross-attention layer per block. The encoder has
//!   one block per scale, the decoder two, so the decoder owns four
//!   self-attention layers. Weights are drawn from a seeded ChaCha stream.
//! * Tokenizer: lower-cased words split into chunks of at most five
//!   characters, framed by `<bos>`/`<eos>` and padded to eight tokens.
//!
//! Everything runs in `f64` so finite differences are meaningful.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    normalize_word, Backbone, BackboneCapabilities, DenoiserOutput, DiffusionSchedule,
    FeatureMap, Instrumentation, LatentTensor, LayerId, LayerPartition, PromptEncoding,
};
use crate::attention::{scaled_dot_product_attention, AttentionRecord};
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const IMAGE_SIZE: usize = 64;
pub const LATENT_CHANNELS: usize = 4;
pub const GRID: usize = 8;
const PATCH: usize = IMAGE_SIZE / GRID;
const HIDDEN: usize = 16;
const TEXT_DIM: usize = 16;
const HEADS: usize = 2;
const TIME_DIM: usize = 16;
const MIN_TOKENS: usize = 8;
const MAX_CHUNK: usize = 5;
const LATENT_SCALE: f64 = 0.25;
/// Weight of the network residual in the noise prediction.
const NET_GAIN: f64 = 0.06;
const CONV_IN_GAIN: f64 = 2.0;
const SELF_QK_GAIN: f64 = 5.0;
const SELF_OUT_GAIN: f64 = 0.1;
const CROSS_QK_GAIN: f64 = 1.5;
const CROSS_OUT_GAIN: f64 = 0.25;
const AUTOENCODER_TOLERANCE: f64 = 1e-5;

pub const SEMANTIC_TAP: &str = "decoder_block_3";

struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64, bias: bool, dev: &Device) -> Result<Self> {
        let weight = normal(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt(), dev)?;
        let bias = if bias {
            Some(normal(rng, &[fan_out], 0.1, dev)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, dev: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let s: f64 = StandardNormal.sample(rng);
            s * std
        })
        .collect();
    Ok(Tensor::from_vec(v, shape, dev)?)
}

fn silu(x: &Tensor) -> Result<Tensor> {
    let denom = (x.neg()?.exp()? + 1.0)?;
    Ok((x / denom)?)
}

/// `(positions, channels)` → `(heads, positions, head_dim)`.
fn split_heads(x: &Tensor) -> Result<Tensor> {
    let (p, c) = x.dims2()?;
    Ok(x.reshape((p, HEADS, c / HEADS))?.transpose(0, 1)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (h, p, d) = x.dims3()?;
    Ok(x.transpose(0, 1)?.contiguous()?.reshape((p, h * d))?)
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(rng: &mut ChaCha8Rng, ctx_dim: usize, qk_gain: f64, out_gain: f64, dev: &Device) -> Result<Self> {
        Ok(Self {
            q: Linear::new(rng, HIDDEN, HIDDEN, qk_gain, false, dev)?,
            k: Linear::new(rng, ctx_dim, HIDDEN, qk_gain, false, dev)?,
            v: Linear::new(rng, ctx_dim, HIDDEN, 1.0, false, dev)?,
            o: Linear::new(rng, HIDDEN, HIDDEN, out_gain, true, dev)?,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    Encoder,
    Middle,
    Decoder,
}

struct Block {
    name: &'static str,
    stage: Stage,
    /// Side length of the block's spatial grid.
    res: usize,
    skip: Option<Linear>,
    self_attn: Attention,
    cross_attn: Attention,
    mlp_in: Linear,
    mlp_out: Linear,
    /// Decoder feature-tap name, if this block is tapped.
    tap: Option<&'static str>,
}

impl Block {
    fn self_layer(&self) -> LayerId {
        LayerId::new(format!("{}.self", self.name))
    }

    fn cross_layer(&self) -> LayerId {
        LayerId::new(format!("{}.cross", self.name))
    }
}

struct Weights {
    time_in: Linear,
    time_out: Linear,
    conv_in: Linear,
    down: Linear,
    up: Linear,
    conv_out: Linear,
    blocks: Vec<Block>,
}

const BLOCK_LAYOUT: [(&str, Stage, usize, bool, Option<&str>); 7] = [
    ("enc0", Stage::Encoder, GRID, false, None),
    ("enc1", Stage::Encoder, GRID / 2, false, None),
    ("mid", Stage::Middle, GRID / 2, false, None),
    ("dec1", Stage::Decoder, GRID / 2, true, Some("decoder_block_1")),
    ("dec2", Stage::Decoder, GRID / 2, false, Some("decoder_block_2")),
    ("dec3", Stage::Decoder, GRID, true, Some("decoder_block_3")),
    ("dec4", Stage::Decoder, GRID, false, Some("decoder_block_4")),
];

impl Weights {
    fn new(seed: u64, dev: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let time_in = Linear::new(&mut rng, TIME_DIM, HIDDEN, 1.0, true, dev)?;
        let time_out = Linear::new(&mut rng, HIDDEN, HIDDEN, 0.5, true, dev)?;
        let conv_in = Linear::new(&mut rng, LATENT_CHANNELS, HIDDEN, CONV_IN_GAIN, true, dev)?;
        let down = Linear::new(&mut rng, HIDDEN, HIDDEN, 1.0, false, dev)?;
        let up = Linear::new(&mut rng, HIDDEN, HIDDEN, 1.0, false, dev)?;
        let mut blocks = Vec::with_capacity(BLOCK_LAYOUT.len());
        for (name, stage, res, skip, tap) in BLOCK_LAYOUT {
            let skip = if skip {
                Some(Linear::new(&mut rng, 2 * HIDDEN, HIDDEN, 1.0, false, dev)?)
            } else {
                None
            };
            blocks.push(Block {
                name,
                stage,
                res,
                skip,
                self_attn: Attention::new(&mut rng, HIDDEN, SELF_QK_GAIN, SELF_OUT_GAIN, dev)?,
                cross_attn: Attention::new(&mut rng, TEXT_DIM, CROSS_QK_GAIN, CROSS_OUT_GAIN, dev)?,
                mlp_in: Linear::new(&mut rng, HIDDEN, 2 * HIDDEN, 1.0, true, dev)?,
                mlp_out: Linear::new(&mut rng, 2 * HIDDEN, HIDDEN, 0.5, true, dev)?,
                tap,
            });
        }
        let conv_out = Linear::new(&mut rng, HIDDEN, LATENT_CHANNELS, 1.0, true, dev)?;
        Ok(Self {
            time_in,
            time_out,
            conv_in,
            down,
            up,
            conv_out,
            blocks,
        })
    }
}

/// CPU-scale backbone with the same instrumentation surface as a checkpoint backbone.
pub struct ToyBackbone {
    seed: u64,
    device: Device,
    schedule: DiffusionSchedule,
    weights: Weights,
    /// Orthonormal patch basis, `LATENT_CHANNELS × (3·PATCH·PATCH)`.
    basis: Vec<Vec<f64>>,
    calls: usize,
}

impl ToyBackbone {
    pub fn new(seed: u64, num_steps: usize, guidance_scale: f64) -> Result<Self> {
        let device = Device::Cpu;
        Ok(Self {
            seed,
            schedule: DiffusionSchedule::new(num_steps, guidance_scale)?,
            weights: Weights::new(seed, &device)?,
            basis: patch_basis(),
            device,
            calls: 0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.dims() != [LATENT_CHANNELS, GRID, GRID] {
            return Err(Error::DimensionMismatch(format!(
                "toy latent must be {:?}, got {:?}",
                [LATENT_CHANNELS, GRID, GRID],
                z.dims()
            )));
        }
        Ok(())
    }

    fn token_embedding(&self, token: &str, position: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        let mut pos_rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(31).wrapping_add(position as u64 + 1));
        (0..TEXT_DIM)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                let p: f64 = StandardNormal.sample(&mut pos_rng);
                e + 0.3 * p
            })
            .collect()
    }

    fn run_block(
        &self,
        block: &Block,
        mut h: Tensor,
        skip: Option<&Tensor>,
        ctx: &Tensor,
        inst: &mut Instrumentation<'_>,
        record: &mut AttentionRecord,
    ) -> Result<Tensor> {
        if let (Some(proj), Some(s)) = (&block.skip, skip) {
            h = proj.forward(&Tensor::cat(&[&h, s], 1)?)?;
        }

        // self-attention
        let layer = block.self_layer();
        let a = &block.self_attn;
        let q = split_heads(&a.q.forward(&h)?)?;
        let k = split_heads(&a.k.forward(&h)?)?;
        let v = split_heads(&a.v.forward(&h)?)?;
        if inst.self_kv_layers.contains(&layer) {
            record.self_kv.insert(layer.clone(), (k.detach(), v.detach()));
        }
        let injected = match inst.kv_injector.as_deref_mut() {
            Some(injector) => injector.replace(&layer, &q)?,
            None => None,
        };
        let out = match injected {
            Some(out) => out,
            None => scaled_dot_product_attention(&q, &k, &v)?.0,
        };
        h = (h + a.o.forward(&merge_heads(&out)?)?)?;

        // cross-attention
        let c = &block.cross_attn;
        let q = split_heads(&c.q.forward(&h)?)?;
        let k = split_heads(&c.k.forward(ctx)?)?;
        let v = split_heads(&c.v.forward(ctx)?)?;
        let (out, probs) = scaled_dot_product_attention(&q, &k, &v)?;
        if inst.cross_attention_at == Some((block.res, block.res)) {
            let layer = block.cross_layer();
            record.cross_resolution.insert(layer.clone(), (block.res, block.res));
            record.cross_maps.insert(layer, probs);
        }
        h = (h + c.o.forward(&merge_heads(&out)?)?)?;

        let m = block.mlp_out.forward(&silu(&block.mlp_in.forward(&h)?)?)?;
        Ok((h + m)?)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn patch_basis() -> Vec<Vec<f64>> {
    let n = PATCH * PATCH;
    let mut basis = vec![vec![0.0; 3 * n]; LATENT_CHANNELS];
    for c in 0..3 {
        for i in 0..n {
            basis[c][c * n + i] = 1.0 / (n as f64).sqrt();
        }
    }
    let centre = (PATCH as f64 - 1.0) / 2.0;
    let ramp: Vec<f64> = (0..n)
        .map(|i| (i % PATCH) as f64 - centre + (i / PATCH) as f64 - centre)
        .collect();
    let norm = (3.0 * ramp.iter().map(|r| r * r).sum::<f64>()).sqrt();
    for c in 0..3 {
        for i in 0..n {
            basis[3][c * n + i] = ramp[i] / norm;
        }
    }
    basis
}

/// Splits a prompt into toy tokens and records each word's token span.
pub fn tokenize(text: &str) -> (Vec<String>, BTreeMap<String, Vec<usize>>) {
    let mut tokens = vec!["<bos>".to_string()];
    let mut spans: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for word in text.split_whitespace() {
        let key = normalize_word(word);
        let chars: Vec<char> = key.chars().collect();
        for chunk in chars.chunks(MAX_CHUNK) {
            spans.entry(key.clone()).or_default().push(tokens.len());
            tokens.push(chunk.iter().collect());
        }
    }
    tokens.push("<eos>".to_string());
    while tokens.len() < MIN_TOKENS {
        tokens.push("<pad>".to_string());
    }
    (tokens, spans)
}

impl Backbone for ToyBackbone {
    fn capabilities(&self) -> BackboneCapabilities {
        let mut encoder = Vec::new();
        let mut middle = Vec::new();
        let mut decoder = Vec::new();
        let mut cross = Vec::new();
        let mut taps = Vec::new();
        for b in &self.weights.blocks {
            match b.stage {
                Stage::Encoder => encoder.push(b.self_layer()),
                Stage::Middle => middle.push(b.self_layer()),
                Stage::Decoder => decoder.push(b.self_layer()),
            }
            cross.push((b.cross_layer(), (b.res, b.res)));
            if let Some(tap) = b.tap {
                taps.push((tap.to_string(), (b.res, b.res)));
            }
        }
        BackboneCapabilities {
            name: format!("toy(seed={})", self.seed),
            image_size: IMAGE_SIZE,
            downsample_factor: PATCH,
            latent_shape: [LATENT_CHANNELS, GRID, GRID],
            semantic_resolution: (GRID, GRID),
            self_attention: LayerPartition {
                encoder,
                middle,
                decoder,
            },
            cross_attention: cross,
            feature_taps: taps,
            semantic_feature_tap: SEMANTIC_TAP.to_string(),
            autoencoder_tolerance: AUTOENCODER_TOLERANCE,
        }
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn set_num_steps(&mut self, num_steps: usize) -> Result<()> {
        self.schedule = DiffusionSchedule::new(num_steps, self.schedule.guidance_scale)?;
        Ok(())
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn dtype(&self) -> DType {
        DType::F64
    }

    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor> {
        if image.width() != IMAGE_SIZE || image.height() != IMAGE_SIZE {
            return Err(Error::DimensionMismatch(format!(
                "toy backbone expects {IMAGE_SIZE}x{IMAGE_SIZE} images, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let n = PATCH * PATCH;
        let mut latent = vec![0.0f64; LATENT_CHANNELS * GRID * GRID];
        for gy in 0..GRID {
            for gx in 0..GRID {
                let mut patch = vec![0.0f64; 3 * n];
                for py in 0..PATCH {
                    for px in 0..PATCH {
                        let pixel = image.pixel(gx * PATCH + px, gy * PATCH + py);
                        for c in 0..3 {
                            patch[c * n + py * PATCH + px] = pixel[c] as f64 - 0.5;
                        }
                    }
                }
                for (ch, row) in self.basis.iter().enumerate() {
                    let dot: f64 = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    latent[ch * GRID * GRID + gy * GRID + gx] = LATENT_SCALE * dot;
                }
            }
        }
        let data = Tensor::from_vec(latent, (LATENT_CHANNELS, GRID, GRID), &self.device)?;
        Ok(LatentTensor::new(data, 0))
    }

    fn decode_latent(&self, z: &LatentTensor) -> Result<RgbImage> {
        self.check_latent(&z.data)?;
        let values = z.data.flatten_all()?.to_vec1::<f64>()?;
        let n = PATCH * PATCH;
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut data = vec![0.0f32; 3 * plane];
        for gy in 0..GRID {
            for gx in 0..GRID {
                let coeffs: Vec<f64> = (0..LATENT_CHANNELS)
                    .map(|ch| values[ch * GRID * GRID + gy * GRID + gx] / LATENT_SCALE)
                    .collect();
                for c in 0..3 {
                    for py in 0..PATCH {
                        for px in 0..PATCH {
                            let i = c * n + py * PATCH + px;
                            let v: f64 = 0.5
                                + coeffs
                                    .iter()
                                    .zip(&self.basis)
                                    .map(|(a, row)| a * row[i])
                                    .sum::<f64>();
                            let (x, y) = (gx * PATCH + px, gy * PATCH + py);
                            data[c * plane + y * IMAGE_SIZE + x] = v.clamp(0.0, 1.0) as f32;
                        }
                    }
                }
            }
        }
        RgbImage::new(IMAGE_SIZE, IMAGE_SIZE, data)
    }

    fn encode_prompt(&self, text: &str) -> Result<PromptEncoding> {
        let (tokens, token_spans) = tokenize(text);
        let mut flat = Vec::with_capacity(tokens.len() * TEXT_DIM);
        for (pos, tok) in tokens.iter().enumerate() {
            flat.extend(self.token_embedding(tok, pos));
        }
        let embeddings = Tensor::from_vec(flat, (tokens.len(), TEXT_DIM), &self.device)?;
        Ok(PromptEncoding {
            text: text.to_string(),
            embeddings,
            token_spans,
            is_unconditional: text.trim().is_empty(),
        })
    }

    fn denoise(
        &mut self,
        z: &Tensor,
        t: u32,
        cond: &PromptEncoding,
        inst: &mut Instrumentation<'_>,
    ) -> Result<DenoiserOutput> {
        self.check_latent(z)?;
        if !self.schedule.contains(t) {
            return Err(Error::TimestepOutsideSchedule(t));
        }
        let caps = self.capabilities();
        let known_self = caps.self_attention.all();
        if let Some(bad) = inst.self_kv_layers.iter().find(|l| !known_self.contains(l)) {
            return Err(Error::UnknownLayer(bad.to_string()));
        }
        if let Some(bad) = inst
            .feature_taps
            .iter()
            .find(|name| caps.feature_resolution(name).is_none())
        {
            return Err(Error::UnknownLayer(bad.clone()));
        }
        self.calls += 1;

        let w = &self.weights;
        let dev = &self.device;
        let ctx = cond.embeddings.to_dtype(DType::F64)?;

        let half = TIME_DIM / 2;
        let temb: Vec<f64> = (0..TIME_DIM)
            .map(|i| {
                let freq = (-(10000f64.ln()) * (i % half) as f64 / half as f64).exp();
                let arg = t as f64 * freq;
                if i < half {
                    arg.sin()
                } else {
                    arg.cos()
                }
            })
            .collect();
        let temb = Tensor::from_vec(temb, (1, TIME_DIM), dev)?;
        let temb = w.time_out.forward(&silu(&w.time_in.forward(&temb)?)?)?;

        let mut record = AttentionRecord::default();
        let mut taps = BTreeMap::new();

        // (C, H, W) -> (H·W, C)
        let x = z.reshape((LATENT_CHANNELS, GRID * GRID))?.t()?.contiguous()?;
        let mut h = w.conv_in.forward(&x)?.broadcast_add(&temb)?;
        let mut skips: Vec<Tensor> = Vec::new();
        for block in &w.blocks {
            let current_res = (h.dims2()?.0 as f64).sqrt() as usize;
            if block.res < current_res {
                let g = block.res;
                h = h
                    .reshape((g, 2, g, 2, HIDDEN))?
                    .mean(3)?
                    .mean(1)?
                    .reshape((g * g, HIDDEN))?;
                h = w.down.forward(&h)?;
            } else if block.res > current_res {
                let g = current_res;
                h = h
                    .reshape((g, 1, g, 1, HIDDEN))?
                    .broadcast_as((g, 2, g, 2, HIDDEN))?
                    .contiguous()?
                    .reshape((4 * g * g, HIDDEN))?;
                h = w.up.forward(&h)?;
            }
            let skip = if block.skip.is_some() { skips.pop() } else { None };
            h = self.run_block(block, h, skip.as_ref(), &ctx, inst, &mut record)?;
            if block.stage == Stage::Encoder {
                skips.push(h.clone());
            }
            if let Some(tap) = block.tap {
                if inst.feature_taps.iter().any(|n| n == tap) {
                    let g = block.res;
                    let data = h.t()?.contiguous()?.reshape((HIDDEN, g, g))?;
                    taps.insert(
                        tap.to_string(),
                        FeatureMap {
                            data,
                            layer_name: tap.to_string(),
                        },
                    );
                }
            }
        }
        let net = w
            .conv_out
            .forward(&h)?
            .t()?
            .contiguous()?
            .reshape((LATENT_CHANNELS, GRID, GRID))?;
        let sigma = (1.0 - self.schedule.alpha_cumprod(t)).sqrt();
        let noise_prediction = ((z * sigma)? + (net * NET_GAIN)?)?;

        Ok(DenoiserOutput {
            noise_prediction,
            attention: inst.records_attention().then_some(record),
            feature_taps: taps,
        })
    }

    fn call_count(&self) -> usize {
        self.calls
    }
}
