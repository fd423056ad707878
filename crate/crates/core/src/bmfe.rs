//! Band-masked frequency encoder.
//!
//! Image → Haar detail bands `[LH | HL | HH]` → per-band Bernoulli patch
//! masking (training only) → two conv/BN/ReLU blocks → global average pool
//! → linear, dropout, LayerNorm → one frequency token of width `D`.

use crate::nn::{dropout, BatchNorm2d, Conv2d, LayerNorm, Linear, ParamStore, Session};
use crate::rng::{Purpose, Rng};
use crate::tensor::{Result, Tensor, TensorError, Var};
use crate::wavelet::{self, BandStack};

/// Number of high-frequency bands that receive independent masks.
pub const NUM_BANDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub rho: f64,
    pub patch_size: usize,
    pub grid: (usize, usize),
}

impl MaskSpec {
    pub fn new(rho: f64, patch_size: usize, h_f: usize, w_f: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(TensorError::InvalidArgument {
                op: "mask_spec",
                detail: format!("mask ratio {rho} outside [0, 1]"),
            });
        }
        if patch_size == 0 || h_f % patch_size != 0 || w_f % patch_size != 0 {
            return Err(TensorError::InvalidArgument {
                op: "mask_spec",
                detail: format!("band size {h_f}x{w_f} not divisible by patch size {patch_size}"),
            });
        }
        Ok(MaskSpec {
            rho,
            patch_size,
            grid: (h_f / patch_size, w_f / patch_size),
        })
    }
}

/// Binary keep-mask `[3, H_p, W_p]`, one plane per detail band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMask {
    pub m: Tensor,
}

impl BandMask {
    pub fn ones(spec: &MaskSpec) -> Self {
        BandMask {
            m: Tensor::ones(&[NUM_BANDS, spec.grid.0, spec.grid.1]),
        }
    }

    pub fn keep_rate(&self) -> f64 {
        self.m.mean()
    }
}

/// Each cell kept with probability `1 − rho`, drawn in (band, row, col) raster order.
pub fn sample_mask(spec: &MaskSpec, rng: &mut Rng) -> BandMask {
    let keep = 1.0 - spec.rho;
    let m = Tensor::from_fn(&[NUM_BANDS, spec.grid.0, spec.grid.1], |_| {
        if rng.bernoulli(keep) {
            1.0
        } else {
            0.0
        }
    });
    BandMask { m }
}

/// Nearest-neighbour upsampling of the mask to `[3C, H_f, W_f]`, repeating
/// each band plane over that band's `C` channels.
pub fn expand_mask(mask: &BandMask, spec: &MaskSpec, channels_per_band: usize) -> Tensor {
    let (hp, wp) = spec.grid;
    let s = spec.patch_size;
    let (hf, wf) = (hp * s, wp * s);
    let mut out = Tensor::zeros(&[NUM_BANDS * channels_per_band, hf, wf]);
    let data = out.data_mut();
    for b in 0..NUM_BANDS {
        for c in 0..channels_per_band {
            let plane = &mut data[((b * channels_per_band + c) * hf * wf)..][..hf * wf];
            for y in 0..hf {
                for x in 0..wf {
                    plane[y * wf + x] = mask.m.data()[(b * hp + y / s) * wp + x / s];
                }
            }
        }
    }
    out
}

pub fn apply_mask(stack: &BandStack, mask: &BandMask, spec: &MaskSpec) -> Result<BandStack> {
    let (hp, wp) = spec.grid;
    if stack.h_f != hp * spec.patch_size || stack.w_f != wp * spec.patch_size {
        return Err(TensorError::InvalidArgument {
            op: "apply_mask",
            detail: format!(
                "stack {}x{} does not match grid {hp}x{wp} with patch {}",
                stack.h_f, stack.w_f, spec.patch_size
            ),
        });
    }
    let up = expand_mask(mask, spec, stack.channels_per_band);
    Ok(BandStack {
        data: stack.data.zip_with(&up, |x, m| x * m)?,
        ..stack.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BmfeConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub stem_c1: usize,
    pub stem_c2: usize,
    pub embed_dim: usize,
    pub rho: f64,
    pub mask_patch: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct Bmfe {
    pub cfg: BmfeConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    proj: Linear,
    proj_ln: LayerNorm,
}

impl Bmfe {
    pub fn new(store: &mut ParamStore, cfg: BmfeConfig, rng: &mut Rng) -> Result<Self> {
        let h_f = cfg.image_size / 2;
        if cfg.image_size % 2 != 0 || h_f % 4 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "bmfe",
                detail: format!("image size {} must be divisible by 8", cfg.image_size),
            });
        }
        MaskSpec::new(cfg.rho, cfg.mask_patch, h_f, h_f)?;
        let c_hf = NUM_BANDS * cfg.in_channels;
        Ok(Bmfe {
            conv1: Conv2d::new(store, "bmfe.conv1", c_hf, cfg.stem_c1, 3, 2, 1, rng),
            bn1: BatchNorm2d::new(store, "bmfe.bn1", cfg.stem_c1),
            conv2: Conv2d::new(store, "bmfe.conv2", cfg.stem_c1, cfg.stem_c2, 3, 2, 1, rng),
            bn2: BatchNorm2d::new(store, "bmfe.bn2", cfg.stem_c2),
            proj: Linear::new(store, "bmfe.proj", cfg.stem_c2, cfg.embed_dim, rng, true),
            proj_ln: LayerNorm::new(store, "bmfe.proj_ln", cfg.embed_dim, true),
            cfg,
        })
    }

    pub fn mask_spec(&self) -> MaskSpec {
        let h_f = self.cfg.image_size / 2;
        MaskSpec::new(self.cfg.rho, self.cfg.mask_patch, h_f, h_f).expect("validated at construction")
    }

    /// `[B, 3C, H_f, W_f]` → `[B, C', H_f/4, W_f/4]`.
    pub fn conv_stem(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != NUM_BANDS * self.cfg.in_channels {
            return Err(TensorError::InvalidArgument {
                op: "conv_stem",
                detail: format!(
                    "expected [B, {}, H, W], got {shape:?}",
                    NUM_BANDS * self.cfg.in_channels
                ),
            });
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv_stem",
                detail: format!("spatial dims {}x{} not divisible by 4", shape[2], shape[3]),
            });
        }
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.tape.relu(h);
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        Ok(s.tape.relu(h))
    }

    /// Spatial mean of `[B, C', H', W']` then projection to `[B, D]`.
    pub fn pool_and_project(&self, s: &mut Session, z: Var, rng: &mut Rng) -> Result<Var> {
        let v = global_avg_pool(s, z)?;
        let t = self.proj.forward(s, v)?;
        let t = dropout(s, t, self.cfg.dropout, rng)?;
        self.proj_ln.forward(s, t)
    }

    /// Frequency tokens `[B, D]` for a batch of images `[B, C, H, W]`.
    /// Masks are sampled per image from the session's mask stream while
    /// training and skipped at evaluation.
    pub fn forward(&self, s: &mut Session, images: Var) -> Result<Var> {
        let masks = if s.training && self.cfg.rho > 0.0 {
            let spec = self.mask_spec();
            let base = s.rng(Purpose::Mask);
            let b = s.tape.shape(images)[0];
            Some(
                (0..b)
                    .map(|i| sample_mask(&spec, &mut base.fork(i as u64)))
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        self.forward_with_masks(s, images, masks.as_deref())
    }

    /// As [`Bmfe::forward`] with caller-provided masks (one per image).
    pub fn forward_with_masks(&self, s: &mut Session, images: Var, masks: Option<&[BandMask]>) -> Result<Var> {
        let hf = wavelet::haar_hf_stack(&mut s.tape, images)?;
        let hf = match masks {
            Some(masks) => {
                let shape = s.tape.shape(hf).to_vec();
                if masks.len() != shape[0] {
                    return Err(TensorError::InvalidArgument {
                        op: "bmfe",
                        detail: format!("{} masks for batch of {}", masks.len(), shape[0]),
                    });
                }
                let spec = self.mask_spec();
                let c = self.cfg.in_channels;
                let parts: Vec<Tensor> = masks.iter().map(|m| expand_mask(m, &spec, c)).collect();
                let refs: Vec<&Tensor> = parts.iter().collect();
                let full = Tensor::concat(&refs, 0)?.reshape(&shape)?;
                s.tape.mask_mul(hf, full)?
            }
            None => hf,
        };
        let z = self.conv_stem(s, hf)?;
        let mut rng = s.rng(Purpose::Dropout).fork(0xb3f3);
        self.pool_and_project(s, z, &mut rng)
    }
}

/// Mean over the two trailing spatial axes of `[B, C, H, W]`.
pub fn global_avg_pool(s: &mut Session, z: Var) -> Result<Var> {
    let shape = s.tape.shape(z).to_vec();
    let [b, c, h, w] = shape[..] else {
        return Err(TensorError::InvalidArgument {
            op: "global_avg_pool",
            detail: format!("expected [B, C, H, W], got {shape:?}"),
        });
    };
    let flat = s.tape.reshape(z, &[b, c, h * w])?;
    s.tape.mean_axis(flat, 2)
}
