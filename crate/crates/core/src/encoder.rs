//! A toy CLIP-style dual encoder: a patch transformer for images, a token
//! transformer for class prompts, and cosine-similarity classification.

use fedsparse_tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, LayerNorm, Linear, Mode, Module, ParamKind, INIT_STD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub feature_dim: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            feature_dim: 32,
            image_size: 16,
            channels: 3,
            patch_size: 4,
            vocab_size: 64,
            max_tokens: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("feature_dim", self.feature_dim),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("vocab_size", self.vocab_size),
            ("max_tokens", self.max_tokens),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be at least 1"));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config("model.heads", format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "model.patch_size",
                format!("image size {} is not divisible by patch size {}", self.image_size, self.patch_size),
            ));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Visual,
    Text,
}

impl Tower {
    pub const BOTH: [Tower; 2] = [Tower::Visual, Tower::Text];

    pub fn name(self) -> &'static str {
        match self {
            Tower::Visual => "visual",
            Tower::Text => "text",
        }
    }
}

impl std::fmt::Display for Tower {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An attention projection that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Q,
    K,
    V,
    O,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteKey {
    pub tower: Tower,
    pub layer: usize,
    pub site: Site,
}

/// Hook run after each attention projection; returns the adapted output.
pub trait ProjectionAdapter {
    fn adapt(&self, tape: &mut Tape, key: SiteKey, input: Var, base: Var, mode: &mut Mode) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    fn new(width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Attention {
            q: Linear::new(width, width, true, rng),
            k: Linear::new(width, width, true, rng),
            v: Linear::new(width, width, true, rng),
            o: Linear::new(width, width, true, rng),
            heads,
        }
    }

    pub fn projection(&self, site: Site) -> &Linear {
        match site {
            Site::Q => &self.q,
            Site::K => &self.k,
            Site::V => &self.v,
            Site::O => &self.o,
        }
    }

    pub fn projection_mut(&mut self, site: Site) -> &mut Linear {
        match site {
            Site::Q => &mut self.q,
            Site::K => &mut self.k,
            Site::V => &mut self.v,
            Site::O => &mut self.o,
        }
    }

    fn project(&self, tape: &mut Tape, x: Var, key: SiteKey, hook: Hook<'_>, mode: &mut Mode) -> Result<Var> {
        let y = self.projection(key.site).forward(tape, x)?;
        match hook {
            Some(h) => h.adapt(tape, key, x, y, mode),
            None => Ok(y),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, tower: Tower, layer: usize, hook: Hook<'_>, mode: &mut Mode) -> Result<Var> {
        let (b, t, w) = match *tape.shape(x) {
            [b, t, w] => (b, t, w),
            ref s => return Err(Error::Dimension(format!("attention expects [batch, tokens, width], got {s:?}"))),
        };
        let (h, dh) = (self.heads, w / self.heads);
        let key = |site| SiteKey { tower, layer, site };
        let q = self.project(tape, x, key(Site::Q), hook, mode)?;
        let k = self.project(tape, x, key(Site::K), hook, mode)?;
        let v = self.project(tape, x, key(Site::V), hook, mode)?;
        let split = |tape: &mut Tape, z: Var| -> Result<Var> {
            let z = tape.reshape(z, &[b, t, h, dh])?;
            let z = tape.permute(z, &[0, 2, 1, 3])?;
            Ok(tape.reshape(z, &[b * h, t, dh])?)
        };
        let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
        let scores = tape.matmul_t(q, k, false, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
        let weights = tape.softmax(scores, 2)?;
        let mixed = tape.matmul(weights, v)?;
        let mixed = tape.reshape(mixed, &[b, h, t, dh])?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[b, t, w])?;
        self.project(tape, mixed, key(Site::O), hook, mode)
    }
}

pub type Hook<'a> = Option<&'a dyn ProjectionAdapter>;

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new(width: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::new(width),
            attn: Attention::new(width, heads, rng),
            ln2: LayerNorm::new(width),
            fc1: Linear::new(width, width * mlp_ratio, true, rng),
            fc2: Linear::new(width * mlp_ratio, width, true, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, tower: Tower, layer: usize, hook: Hook<'_>, mode: &mut Mode) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, tower, layer, hook, mode)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        Ok(tape.add(x, h)?)
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        for site in [Site::Q, Site::K, Site::V, Site::O] {
            self.attn.projection(site).visit(&join(prefix, &format!("attn.{}", site.name())), f);
        }
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        for site in [Site::Q, Site::K, Site::V, Site::O] {
            self.attn.projection_mut(site).visit_mut(&join(prefix, &format!("attn.{}", site.name())), f);
        }
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// A stack of blocks with input embedding, final norm, mean pooling and a
/// bias-free projection to the shared feature space.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub tower: Tower,
    /// Patch projection (visual) or token table `[vocab, width]` (text).
    pub embed: Embed,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub enum Embed {
    Patch(Linear),
    Token(Tensor),
}

impl Encoder {
    fn new(tower: Tower, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let (embed, positions) = match tower {
            Tower::Visual => (Embed::Patch(Linear::new(cfg.patch_dim(), cfg.width, true, rng)), cfg.patches()),
            Tower::Text => (Embed::Token(Tensor::randn(&[cfg.vocab_size, cfg.width], INIT_STD, rng)), cfg.max_tokens),
        };
        Encoder {
            tower,
            embed,
            pos: Tensor::randn(&[positions, cfg.width], INIT_STD, rng),
            blocks: (0..cfg.depth).map(|_| Block::new(cfg.width, cfg.heads, cfg.mlp_ratio, rng)).collect(),
            ln_final: LayerNorm::new(cfg.width),
            proj: Linear::new(cfg.width, cfg.feature_dim, false, rng),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Runs the blocks on embedded tokens `[B, T, width]` and returns unit-norm features.
    fn trunk(&self, tape: &mut Tape, x: Var, hook: Hook<'_>, mode: &mut Mode) -> Result<Var> {
        let t = tape.shape(x)[1];
        let pos = tape.leaf(&self.pos);
        let pos = tape.narrow(pos, 0, 0, t)?;
        let mut x = tape.add(x, pos)?;
        for (layer, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, x, self.tower, layer, hook, mode)?;
        }
        let x = self.ln_final.forward(tape, x)?;
        let pooled = tape.mean_axis(x, 1)?;
        let feats = self.proj.forward(tape, pooled)?;
        Ok(tape.l2_normalize(feats)?)
    }
}

impl Encoder {
    /// Image features for a visual tower; errors on a text tower.
    pub fn encode_images(
        &self,
        cfg: &EncoderConfig,
        tape: &mut Tape,
        images: &[f32],
        batch: usize,
        hook: Hook<'_>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let Embed::Patch(embed) = &self.embed else {
            return Err(Error::Input("the text tower cannot encode images".into()));
        };
        let expected = batch * cfg.pixels_per_image();
        if images.len() != expected || batch == 0 {
            return Err(Error::Dimension(format!(
                "expected {batch} images of {s}x{s}x{c} ({expected} values), got {}",
                images.len(),
                s = cfg.image_size,
                c = cfg.channels
            )));
        }
        let x = tape.constant(vec![batch * cfg.patches(), cfg.patch_dim()], patchify(images, batch, cfg))?;
        let x = embed.forward(tape, x)?;
        let x = tape.reshape(x, &[batch, cfg.patches(), cfg.width])?;
        self.trunk(tape, x, hook, mode)
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        match &self.embed {
            Embed::Patch(l) => l.visit(&join(prefix, "patch_embed"), f),
            Embed::Token(t) => f(&join(prefix, "token_embed"), t, ParamKind::Weight),
        }
        f(&join(prefix, "pos"), &self.pos, ParamKind::Weight);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit(&join(prefix, "ln_final"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        match &mut self.embed {
            Embed::Patch(l) => l.visit_mut(&join(prefix, "patch_embed"), f),
            Embed::Token(t) => f(&join(prefix, "token_embed"), t, ParamKind::Weight),
        }
        f(&join(prefix, "pos"), &mut self.pos, ParamKind::Weight);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_final.visit_mut(&join(prefix, "ln_final"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Image and text towers plus the logit temperature. All weights start frozen.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub visual: Encoder,
    pub text: Encoder,
    pub logit_scale: Tensor,
}

impl DualEncoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let visual = Encoder::new(Tower::Visual, &config, rng);
        let text = Encoder::new(Tower::Text, &config, rng);
        Ok(DualEncoder { config, visual, text, logit_scale: Tensor::scalar((1.0f32 / 0.07).ln()) })
    }

    pub fn tower(&self, tower: Tower) -> &Encoder {
        match tower {
            Tower::Visual => &self.visual,
            Tower::Text => &self.text,
        }
    }

    pub fn tower_mut(&mut self, tower: Tower) -> &mut Encoder {
        match tower {
            Tower::Visual => &mut self.visual,
            Tower::Text => &mut self.text,
        }
    }

    /// `images` holds `batch` row-major `H×W×C` images back to back.
    pub fn encode_image(&self, tape: &mut Tape, images: &[f32], batch: usize, hook: Hook<'_>, mode: &mut Mode) -> Result<Var> {
        self.visual.encode_images(&self.config, tape, images, batch, hook, mode)
    }

    /// All sequences must share one length of at most `max_tokens`.
    pub fn encode_text(&self, tape: &mut Tape, tokens: &[Vec<usize>], hook: Hook<'_>, mode: &mut Mode) -> Result<Var> {
        let cfg = &self.config;
        let len = tokens.first().map_or(0, Vec::len);
        if tokens.is_empty() || len == 0 {
            return Err(Error::Input("no token sequences".into()));
        }
        if len > cfg.max_tokens || tokens.iter().any(|s| s.len() != len) {
            return Err(Error::Input(format!("sequences must share one length of at most {} tokens", cfg.max_tokens)));
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} is outside the vocabulary of {}", cfg.vocab_size)));
        }
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let Embed::Token(table) = &self.text.embed else { unreachable!("text tower embeds tokens") };
        let table = tape.leaf(table);
        let x = tape.embedding(table, &ids)?;
        let x = tape.reshape(x, &[tokens.len(), len, cfg.width])?;
        self.text.trunk(tape, x, hook, mode)
    }

    pub fn logits_with(
        &self,
        tape: &mut Tape,
        images: &[f32],
        batch: usize,
        prompts: &[Vec<usize>],
        hook: Hook<'_>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let v = self.encode_image(tape, images, batch, hook, mode)?;
        let t = self.encode_text(tape, prompts, hook, mode)?;
        let s = tape.leaf(&self.logit_scale);
        class_logits(tape, v, t, s)
    }

    /// Parameters of the transformer blocks only.
    pub fn block_params(&self) -> usize {
        use crate::nn::ModuleExt;
        Tower::BOTH.iter().flat_map(|&t| &self.tower(t).blocks).map(|b| b.num_params()).sum()
    }
}

impl Module for DualEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.visual.visit(&join(prefix, "visual"), f);
        self.text.visit(&join(prefix, "text"), f);
        f(&join(prefix, "logit_scale"), &self.logit_scale, ParamKind::Weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.visual.visit_mut(&join(prefix, "visual"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
        f(&join(prefix, "logit_scale"), &mut self.logit_scale, ParamKind::Weight);
    }
}

/// Something that maps a batch of images to class logits against prompts.
pub trait Classifier: Module {
    fn logits(&mut self, tape: &mut Tape, images: &[f32], batch: usize, prompts: &[Vec<usize>], mode: &mut Mode) -> Result<Var>;
}

impl Classifier for DualEncoder {
    fn logits(&mut self, tape: &mut Tape, images: &[f32], batch: usize, prompts: &[Vec<usize>], mode: &mut Mode) -> Result<Var> {
        self.logits_with(tape, images, batch, prompts, None, mode)
    }
}

/// `exp(scale)·V·Tᵀ` for unit-norm rows `V: [B, d]`, `T: [K, d]`.
pub fn class_logits(tape: &mut Tape, v: Var, t: Var, logit_scale: Var) -> Result<Var> {
    let (vs, ts) = (tape.shape(v).to_vec(), tape.shape(t).to_vec());
    if vs.len() != 2 || ts.len() != 2 || vs[1] != ts[1] {
        return Err(Error::Dimension(format!("image features {vs:?} and text features {ts:?} do not share a feature dim")));
    }
    let sims = tape.matmul_t(v, t, false, true)?;
    let temp = tape.exp(logit_scale);
    Ok(tape.mul(sims, temp)?)
}

/// `[B, H, W, C]` pixels to `[B·P, p·p·C]` patch rows, patches in raster order.
fn patchify(images: &[f32], batch: usize, cfg: &EncoderConfig) -> Vec<f32> {
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let side = s / p;
    let mut out = Vec::with_capacity(images.len());
    for img in images.chunks(s * s * c).take(batch) {
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    let row = (py * p + y) * s + px * p;
                    out.extend_from_slice(&img[row * c..(row + p) * c]);
                }
            }
        }
    }
    out
}
