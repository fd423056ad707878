//! The composed detector: frequency encoder, ViT backbone with gated
//! injection, embedding projection and classifier, plus the ablation menu.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{GateMode, GateVector, LoraConfig, Vit, VitConfig};
use crate::bmfe::{Bmfe, BmfeConfig};
use crate::head::{Classifier, CosfaceHead, EmbedProjection, HeadOutput};
use crate::nn::{init_trunc_normal, Linear, ParamId, ParamStore, Session};
use crate::rng::{Purpose, Rng};
use crate::tensor::{Result, Tensor, TensorError, Var};

/// Which contiguous third of the blocks owns a gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRange {
    All,
    Early,
    Middle,
    Late,
}

impl LayerRange {
    /// Half-open block interval. Thirds split at `round(N·k/3)`.
    pub fn bounds(self, depth: usize) -> (usize, usize) {
        let cut = |k: usize| ((depth * k) as f64 / 3.0).round() as usize;
        match self {
            LayerRange::All => (0, depth),
            LayerRange::Early => (0, cut(1)),
            LayerRange::Middle => (cut(1), cut(2)),
            LayerRange::Late => (cut(2), depth),
        }
    }
}

/// How the frequency token reaches the class token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// No frequency branch.
    None,
    /// `cls_N + t_freq` after the last block.
    LateAdd,
    /// `Linear(concat(cls_N, t_freq))`.
    LateConcat,
    /// One cross-attention layer with the class token as query.
    LateCrossAttn,
    /// Per-block injection; `gated = false` fixes every gate at 1.
    Injection { range: LayerRange, gated: bool },
}

/// Named model variant from the ablation menu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub fusion: Fusion,
    /// Band masking during training (frequency branch only).
    pub masking: bool,
    /// Cosine-margin head; otherwise a linear softmax head.
    pub hcl: bool,
}

pub const VARIANT_IDS: [&str; 13] = [
    "baseline",
    "+bmfe",
    "+lgfi",
    "+bmfe+lgfi",
    "full",
    "late-add",
    "late-concat",
    "late-crossattn",
    "lfi-ungated",
    "lgfi-early",
    "lgfi-middle",
    "lgfi-late",
    "lgfi-all",
];

impl Variant {
    pub const FULL: Variant = Variant {
        fusion: Fusion::Injection {
            range: LayerRange::All,
            gated: true,
        },
        masking: true,
        hcl: true,
    };

    pub fn has_frequency(&self) -> bool {
        self.fusion != Fusion::None
    }
}

impl FromStr for Variant {
    type Err = TensorError;

    fn from_str(id: &str) -> Result<Self> {
        let inj = |range, gated| Fusion::Injection { range, gated };
        let v = |fusion, masking, hcl| Variant { fusion, masking, hcl };
        Ok(match id {
            "baseline" => v(Fusion::None, false, false),
            "+bmfe" => v(Fusion::LateAdd, true, false),
            "+lgfi" => v(inj(LayerRange::All, true), false, false),
            "+bmfe+lgfi" => v(inj(LayerRange::All, true), true, false),
            "full" | "lgfi-all" => Variant::FULL,
            "late-add" => v(Fusion::LateAdd, true, true),
            "late-concat" => v(Fusion::LateConcat, true, true),
            "late-crossattn" => v(Fusion::LateCrossAttn, true, true),
            "lfi-ungated" => v(inj(LayerRange::All, false), true, true),
            "lgfi-early" => v(inj(LayerRange::Early, true), true, true),
            "lgfi-middle" => v(inj(LayerRange::Middle, true), true, true),
            "lgfi-late" => v(inj(LayerRange::Late, true), true, true),
            other => {
                return Err(TensorError::InvalidArgument {
                    op: "variant",
                    detail: format!("unknown variant '{other}' (expected one of {})", VARIANT_IDS.join(", ")),
                })
            }
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let id = VARIANT_IDS
            .iter()
            .find(|id| id.parse::<Variant>().ok().as_ref() == Some(self))
            .copied()
            .unwrap_or("custom");
        f.write_str(id)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub stem_c1: usize,
    pub stem_c2: usize,
    pub rho: f64,
    pub mask_patch: usize,
    pub freq_dropout: f64,
    pub gate_init: f64,
    pub scale: f64,
    pub margin: f64,
    pub variant: String,
}

impl ModelConfig {
    pub fn vit(&self) -> VitConfig {
        VitConfig {
            in_channels: self.in_channels,
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn parsed_variant(&self) -> Result<Variant> {
        self.variant.parse()
    }
}

/// Late-fusion modules that act on the final class token.
#[derive(Debug, Clone)]
enum LateFusion {
    Add,
    Concat(Linear),
    CrossAttn { q: Linear, k: Linear, v: Linear, out: Linear },
}

/// All tape handles a forward pass exposes.
pub struct ForwardOutput {
    pub t_freq: Option<Var>,
    /// Class token after the backbone (and fusion), before the final norm.
    pub cls: Var,
    pub embedding: Var,
    pub head: HeadOutput,
}

#[derive(Debug, Clone)]
pub struct FgiNet {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub vit: Vit,
    pub bmfe: Option<Bmfe>,
    pub gates: Option<GateVector>,
    late: Option<LateFusion>,
    pub embed: EmbedProjection,
    pub classifier: Classifier,
}

impl FgiNet {
    /// Builds the model and its parameters from `Purpose::Init` streams of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let variant = cfg.parsed_variant()?;
        let mut store = ParamStore::new();
        let init = Rng::stream(seed, 0, 0, Purpose::Init);
        let vit = Vit::new(
            &mut store,
            cfg.vit(),
            LoraConfig {
                rank: cfg.lora_rank,
                scale: cfg.lora_scale,
            },
            &mut init.fork(0),
        )?;
        let d = cfg.embed_dim;
        let bmfe = if variant.has_frequency() {
            let bcfg = BmfeConfig {
                in_channels: cfg.in_channels,
                image_size: cfg.image_size,
                stem_c1: cfg.stem_c1,
                stem_c2: cfg.stem_c2,
                embed_dim: d,
                rho: if variant.masking { cfg.rho } else { 0.0 },
                mask_patch: cfg.mask_patch,
                dropout: cfg.freq_dropout,
            };
            Some(Bmfe::new(&mut store, bcfg, &mut init.fork(1))?)
        } else {
            None
        };
        let gates = match variant.fusion {
            Fusion::Injection { range, gated } => {
                let (lo, hi) = range.bounds(cfg.depth);
                let modes = (0..cfg.depth)
                    .map(|l| match (lo <= l && l < hi, gated) {
                        (false, _) => GateMode::Off,
                        (true, true) => GateMode::Learned,
                        (true, false) => GateMode::Fixed(1.0),
                    })
                    .collect();
                Some(GateVector::new(&mut store, modes, cfg.gate_init))
            }
            _ => None,
        };
        let mut rng = init.fork(2);
        let late = match variant.fusion {
            Fusion::LateAdd => Some(LateFusion::Add),
            Fusion::LateConcat => Some(LateFusion::Concat(Linear::new(&mut store, "fusion.concat", 2 * d, d, &mut rng, true))),
            Fusion::LateCrossAttn => Some(LateFusion::CrossAttn {
                q: Linear::new(&mut store, "fusion.xattn.q", d, d, &mut rng, true),
                k: Linear::new(&mut store, "fusion.xattn.k", d, d, &mut rng, true),
                v: Linear::new(&mut store, "fusion.xattn.v", d, d, &mut rng, true),
                out: Linear::new(&mut store, "fusion.xattn.out", d, d, &mut rng, true),
            }),
            _ => None,
        };
        let mut rng = init.fork(3);
        let embed = EmbedProjection::new(&mut store, d, d, &mut rng);
        let classifier = if variant.hcl {
            Classifier::Cosface(CosfaceHead::new(&mut store, d, cfg.scale, cfg.margin, &mut rng)?)
        } else {
            let lin = Linear::new(&mut store, "head.linear", d, 2, &mut rng, true);
            Classifier::Softmax(lin)
        };
        Ok((
            FgiNet {
                cfg: cfg.clone(),
                variant,
                vit,
                bmfe,
                gates,
                late,
                embed,
                classifier,
            },
            store,
        ))
    }

    /// Gate value per block (0 where the block has no injection).
    pub fn gate_values(&self, store: &ParamStore) -> Vec<f64> {
        match &self.gates {
            Some(g) => g.values(store),
            None => vec![0.0; self.cfg.depth],
        }
    }

    pub fn gate_params(&self) -> Vec<Option<ParamId>> {
        self.gates.as_ref().map(|g| g.alphas.clone()).unwrap_or_default()
    }

    /// Full forward over images `[B, C, H, W]`.
    pub fn forward(&self, s: &mut Session, images: Var) -> Result<ForwardOutput> {
        let t_freq = match &self.bmfe {
            Some(b) => Some(b.forward(s, images)?),
            None => None,
        };
        self.forward_with_token(s, images, t_freq)
    }

    /// Forward with an externally computed frequency token.
    pub fn forward_with_token(&self, s: &mut Session, images: Var, t_freq: Option<Var>) -> Result<ForwardOutput> {
        let mut cls = self.vit.forward(s, images, t_freq, self.gates.as_ref())?;
        if let (Some(late), Some(tf)) = (&self.late, t_freq) {
            cls = late_fuse(s, late, cls, tf)?;
        }
        let normed = self.vit.final_ln.forward(s, cls)?;
        let embedding = self.embed.forward(s, normed)?;
        let head = self.classifier.forward(s, embedding)?;
        Ok(ForwardOutput {
            t_freq,
            cls,
            embedding,
            head,
        })
    }

    pub fn loss(&self, s: &mut Session, out: &ForwardOutput, labels: &[usize]) -> Result<Var> {
        self.classifier.loss(&mut s.tape, &out.head, labels)
    }
}

fn late_fuse(s: &mut Session, late: &LateFusion, cls: Var, tf: Var) -> Result<Var> {
    match late {
        LateFusion::Add => s.tape.add(cls, tf),
        LateFusion::Concat(lin) => {
            let both = s.tape.concat(&[cls, tf], 1)?;
            lin.forward(s, both)
        }
        LateFusion::CrossAttn { q, k, v, out } => {
            let shape = s.tape.shape(cls).to_vec();
            let (b, d) = (shape[0], shape[1]);
            let c3 = s.tape.reshape(cls, &[b, 1, d])?;
            let t3 = s.tape.reshape(tf, &[b, 1, d])?;
            let kv_in = s.tape.concat(&[t3, c3], 1)?;
            let qv = q.forward(s, c3)?;
            let kv = k.forward(s, kv_in)?;
            let vv = v.forward(s, kv_in)?;
            let kt = s.tape.permute(kv, &[0, 2, 1])?;
            let scores = s.tape.matmul(qv, kt)?;
            let scores = s.tape.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = s.tape.softmax(scores);
            let ctx = s.tape.matmul(attn, vv)?;
            let o = out.forward(s, ctx)?;
            let o = s.tape.reshape(o, &[b, d])?;
            s.tape.add(cls, o)
        }
    }
}

/// Random non-zero LoRA `B` matrices, for tests that need adapters active.
pub fn perturb_lora(store: &mut ParamStore, std: f64, rng: &mut Rng) {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.param(id).name.ends_with(".lora_b"))
        .collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = init_trunc_normal(&shape, std, rng);
    }
}

/// Set every learned gate to `value`.
pub fn set_gates(model: &FgiNet, store: &mut ParamStore, value: f64) {
    for id in model.gate_params().into_iter().flatten() {
        *store.get_mut(id) = Tensor::scalar(value);
    }
}
