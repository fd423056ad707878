//! Compact pre-norm ViT with LoRA on the Q/K/V projections and layer-wise
//! gated injection of the frequency token into the class token.

use crate::nn::{init_uniform, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(TensorError::InvalidArgument {
                op: "vit_config",
                detail: format!(
                    "image size {} not divisible by patch size {}",
                    self.image_size, self.patch_size
                ),
            });
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "vit_config",
                detail: format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads),
            });
        }
        if self.depth == 0 {
            return Err(TensorError::InvalidArgument {
                op: "vit_config",
                detail: "depth must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
}

/// Frozen linear layer plus a trainable low-rank update.
///
/// With the row-vector convention `y = x·W`, the adapter stores
/// `a: [d_in, r]` and `b: [r, d_out]` (the transposes of the usual
/// `A: [r, d_in]`, `B: [d_out, r]`) and adds `(scale / r)·x·a·b`.
/// `b` starts at zero, so the layer initially equals the frozen base.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraLinear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, lora: LoraConfig, rng: &mut Rng) -> Self {
        let base = Linear::new(store, name, d_in, d_out, rng, false);
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = store.add(
            format!("{name}.lora_a"),
            init_uniform(&[d_in, lora.rank], bound, rng),
            true,
        );
        let b = store.add(format!("{name}.lora_b"), Tensor::zeros(&[lora.rank, d_out]), true);
        LoraLinear {
            base,
            a,
            b,
            rank: lora.rank,
            scaling: lora.scale / lora.rank as f64,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.base.forward(s, x)?;
        let (a, b) = (s.p(self.a), s.p(self.b));
        let low = s.tape.matmul(x, a)?;
        let up = s.tape.matmul(low, b)?;
        let up = s.tape.scale(up, self.scaling);
        s.tape.add(y, up)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &VitConfig, lora: LoraConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, false),
            q: LoraLinear::new(store, &format!("{name}.attn.q"), d, d, lora, rng),
            k: LoraLinear::new(store, &format!("{name}.attn.k"), d, d, lora, rng),
            v: LoraLinear::new(store, &format!("{name}.attn.v"), d, d, lora, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, rng, false),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, false),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, hidden, rng, false),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, d, rng, false),
            heads: cfg.heads,
        }
    }

    /// Returns the block output and the attention probabilities `[B, H, T, T]`.
    pub fn forward_with_attention(&self, s: &mut Session, x: Var) -> Result<(Var, Var)> {
        let shape = s.tape.shape(x).to_vec();
        let [b, t, d] = shape[..] else {
            return Err(TensorError::InvalidArgument {
                op: "transformer_block",
                detail: format!("expected [B, T, D], got {shape:?}"),
            });
        };
        let (h, dh) = (self.heads, d / self.heads);
        let n = self.ln1.forward(s, x)?;
        let q = self.q.forward(s, n)?;
        let k = self.k.forward(s, n)?;
        let v = self.v.forward(s, n)?;
        let q = s.tape.reshape(q, &[b, t, h, dh])?;
        let q = s.tape.permute(q, &[0, 2, 1, 3])?;
        let k = s.tape.reshape(k, &[b, t, h, dh])?;
        let kt = s.tape.permute(k, &[0, 2, 3, 1])?;
        let v = s.tape.reshape(v, &[b, t, h, dh])?;
        let v = s.tape.permute(v, &[0, 2, 1, 3])?;
        let scores = s.tape.matmul(q, kt)?;
        let scores = s.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = s.tape.softmax(scores);
        let ctx = s.tape.matmul(attn, v)?;
        let ctx = s.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.tape.reshape(ctx, &[b, t, d])?;
        let out = self.proj.forward(s, ctx)?;
        let x = s.tape.add(x, out)?;
        let n2 = self.ln2.forward(s, x)?;
        let m = self.fc1.forward(s, n2)?;
        let m = s.tape.gelu(m);
        let m = self.fc2.forward(s, m)?;
        Ok((s.tape.add(x, m)?, attn))
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(s, x)?.0)
    }
}

/// How one layer's gate behaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    /// Learnable scalar gate.
    Learned,
    /// Constant gate without gradient (ungated injection uses 1.0).
    Fixed(f64),
    /// No injection after this block.
    Off,
}

/// Per-layer gates; learned layers own a one-element parameter.
#[derive(Debug, Clone)]
pub struct GateVector {
    pub modes: Vec<GateMode>,
    pub alphas: Vec<Option<ParamId>>,
}

impl GateVector {
    pub fn new(store: &mut ParamStore, modes: Vec<GateMode>, init: f64) -> Self {
        let alphas = modes
            .iter()
            .enumerate()
            .map(|(l, m)| match m {
                GateMode::Learned => Some(store.add(format!("backbone.gate.{l}"), Tensor::scalar(init), true)),
                _ => None,
            })
            .collect();
        GateVector { modes, alphas }
    }

    pub fn depth(&self) -> usize {
        self.modes.len()
    }

    /// Effective gate value per layer (0 where injection is off).
    pub fn values(&self, store: &ParamStore) -> Vec<f64> {
        self.modes
            .iter()
            .zip(&self.alphas)
            .map(|(m, a)| match (m, a) {
                (GateMode::Learned, Some(id)) => store.get(*id).item(),
                (GateMode::Fixed(c), _) => *c,
                _ => 0.0,
            })
            .collect()
    }
}

/// `cls + alpha · t_freq`, broadcasting a one-element `alpha`.
pub fn inject_gate(tape: &mut Tape, cls: Var, t_freq: Var, alpha: Var) -> Result<Var> {
    let scaled = tape.mul(t_freq, alpha)?;
    tape.add(cls, scaled)
}

#[derive(Debug, Clone)]
pub struct Vit {
    pub cfg: VitConfig,
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
}

impl Vit {
    pub fn new(store: &mut ParamStore, cfg: VitConfig, lora: LoraConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let pdim = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let d = cfg.embed_dim;
        let patch = Linear::new(store, "vit.patch_embed", pdim, d, rng, false);
        let cls = store.add("vit.cls", crate::nn::init_trunc_normal(&[d], 0.02, rng), false);
        let pos = store.add(
            "vit.pos",
            crate::nn::init_trunc_normal(&[cfg.num_patches() + 1, d], 0.02, rng),
            false,
        );
        let blocks = (0..cfg.depth)
            .map(|l| Block::new(store, &format!("vit.block{l}"), &cfg, lora, rng))
            .collect();
        let final_ln = LayerNorm::new(store, "vit.norm", d, false);
        Ok(Vit {
            cfg,
            patch,
            cls,
            pos,
            blocks,
            final_ln,
        })
    }

    /// `[B, C, H, W]` → `[B, 1 + P, D]` with the class token at position 0.
    pub fn patch_embed(&self, s: &mut Session, images: Var) -> Result<Var> {
        let shape = s.tape.shape(images).to_vec();
        let p = self.cfg.patch_size;
        let [b, c, h, w] = shape[..] else {
            return Err(TensorError::InvalidArgument {
                op: "patch_embed",
                detail: format!("expected [B, C, H, W], got {shape:?}"),
            });
        };
        if h % p != 0 || w % p != 0 || c != self.cfg.in_channels {
            return Err(TensorError::InvalidArgument {
                op: "patch_embed",
                detail: format!("image {shape:?} incompatible with patch {p} / {} channels", self.cfg.in_channels),
            });
        }
        let (hp, wp) = (h / p, w / p);
        let x = s.tape.reshape(images, &[b, c, hp, p, wp, p])?;
        let x = s.tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = s.tape.reshape(x, &[b, hp * wp, c * p * p])?;
        let tokens = self.patch.forward(s, x)?;
        let d = self.cfg.embed_dim;
        let cls = s.p(self.cls);
        let cls = s.tape.broadcast_to(cls, &[b, 1, d])?;
        let seq = s.tape.concat(&[cls, tokens], 1)?;
        let pos = s.p(self.pos);
        if s.tape.shape(pos)[0] != hp * wp + 1 {
            return Err(TensorError::InvalidArgument {
                op: "patch_embed",
                detail: format!("positional table has {} rows for {} tokens", s.tape.shape(pos)[0], hp * wp + 1),
            });
        }
        s.tape.add(seq, pos)
    }

    /// Replace the class token of `[B, T, D]` by `cls + alpha · t_freq`.
    pub fn inject(&self, s: &mut Session, x: Var, t_freq: Var, alpha: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let cls = s.tape.narrow(x, 1, 0, 1)?;
        let tf = s.tape.reshape(t_freq, &[b, 1, d])?;
        let new_cls = inject_gate(&mut s.tape, cls, tf, alpha)?;
        let rest = s.tape.narrow(x, 1, 1, t - 1)?;
        s.tape.concat(&[new_cls, rest], 1)
    }

    /// Run all blocks, injecting after each block whose gate is active.
    /// Returns the full token sequence after the last block/injection.
    pub fn forward_tokens(&self, s: &mut Session, images: Var, t_freq: Option<Var>, gates: Option<&GateVector>) -> Result<Var> {
        let mut x = self.patch_embed(s, images)?;
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(s, x)?;
            if let (Some(tf), Some(g)) = (t_freq, gates) {
                let alpha = match (g.modes[l], g.alphas[l]) {
                    (GateMode::Learned, Some(id)) => Some(s.p(id)),
                    (GateMode::Fixed(c), _) => Some(s.tape.constant(Tensor::scalar(c))),
                    _ => None,
                };
                if let Some(alpha) = alpha {
                    x = self.inject(s, x, tf, alpha)?;
                }
            }
        }
        Ok(x)
    }

    /// The class token `[B, D]` after the final block (and injection).
    pub fn forward(&self, s: &mut Session, images: Var, t_freq: Option<Var>, gates: Option<&GateVector>) -> Result<Var> {
        let x = self.forward_tokens(s, images, t_freq, gates)?;
        let shape = s.tape.shape(x).to_vec();
        let cls = s.tape.narrow(x, 1, 0, 1)?;
        s.tape.reshape(cls, &[shape[0], shape[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BindMode;
    use crate::rng::Purpose;

    fn tiny() -> VitConfig {
        VitConfig {
            in_channels: 3,
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn token_count() {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(0, 0, 0, Purpose::Init);
        let vit = Vit::new(&mut store, tiny(), LoraConfig { rank: 2, scale: 4.0 }, &mut rng).unwrap();
        let mut s = Session::new(&store, BindMode::None, false);
        let img = s.tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let tok = vit.patch_embed(&mut s, img).unwrap();
        assert_eq!(s.tape.shape(tok), &[1, 17, 16]);
        // Zero image and zero bias: patch tokens are the positional embeddings.
        let pos = store.get(vit.pos);
        let got = s.tape.value(tok).narrow(1, 1, 16).unwrap();
        assert_eq!(got.data(), &pos.data()[16..]);
    }

    #[test]
    fn lora_scalar_arithmetic() {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(0, 0, 0, Purpose::Init);
        let l = LoraLinear::new(&mut store, "l", 1, 1, LoraConfig { rank: 1, scale: 2.0 }, &mut rng);
        *store.get_mut(l.base.w) = Tensor::scalar(1.0).reshape(&[1, 1]).unwrap();
        *store.get_mut(l.a) = Tensor::scalar(2.0).reshape(&[1, 1]).unwrap();
        *store.get_mut(l.b) = Tensor::scalar(3.0).reshape(&[1, 1]).unwrap();
        let mut s = Session::new(&store, BindMode::Trainable, false);
        let x = s.tape.constant(Tensor::ones(&[1, 1]));
        let y = l.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.value(y).item(), 13.0);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.patch_size = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn gate_injection_arithmetic() {
        let mut tape = Tape::new();
        let cls = tape.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let tf = tape.constant(Tensor::new(&[2], vec![2.0, -2.0]).unwrap());
        let a = tape.constant(Tensor::scalar(0.01));
        let y = inject_gate(&mut tape, cls, tf, a).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.02).abs() < 1e-15 && (v[1] - 0.98).abs() < 1e-15);
        let z = tape.constant(Tensor::scalar(0.0));
        let y = inject_gate(&mut tape, cls, tf, z).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
    }
}
