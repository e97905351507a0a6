//! Minimal Vision Transformer with the augmentation and filtering
//! mechanisms attached at their prescribed positions.
//!
//! Forward order: patchify → sta_augment (when configured) → embed →
//! [block → anf_filter at planned indices] × L → layernorm →
//! class-token head. The per-layer token states are retained in a
//! trace for the diagnostics module.

use serde::{Deserialize, Serialize};

use crate::anf::{self, AnfConfig, AnfLayer, AnfParams, Placement, LN_EPS};
use crate::error::{Result, VitError};
use crate::rng::RngStream;
use crate::sta::{self, PatchGrid, StaConfig};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Model shape plus mechanism toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub num_registers: usize,
    pub seed: u64,
    pub sta: Option<StaConfig>,
    pub anf: Option<AnfConfig>,
}

impl Default for ViTConfig {
    /// Desk-scale shape: small enough for 64-bit finite-difference
    /// checks yet deep enough to exercise every mechanism.
    fn default() -> Self {
        ViTConfig {
            image_h: 32,
            image_w: 32,
            channels: 1,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 4,
            mlp_ratio: 4.0,
            num_classes: 4,
            num_registers: 0,
            seed: 0,
            sta: None,
            anf: None,
        }
    }
}

impl ViTConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    /// Smallest config that still composes every primitive; used by
    /// the gradient-check preset.
    pub fn tiny() -> Self {
        ViTConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
            num_registers: 1,
            seed: 7,
            sta: None,
            anf: Some(AnfConfig::default()),
        }
    }

    /// ViT-B/16 at 224×224 (196 patch tokens).
    pub fn vitb16() -> Self {
        ViTConfig {
            image_h: 224,
            image_w: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 768,
            num_heads: 12,
            num_blocks: 12,
            mlp_ratio: 4.0,
            num_classes: 1000,
            num_registers: 0,
            seed: 0,
            sta: None,
            anf: None,
        }
    }

    /// ViT-B/16 at 256×256 (256 patch tokens), the token count at
    /// which the published register-overhead figures hold.
    pub fn vitb16_256() -> Self {
        ViTConfig { image_h: 256, image_w: 256, ..Self::vitb16() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_h % self.patch_size != 0
            || self.image_w % self.patch_size != 0
        {
            return Err(VitError::IndivisibleImage {
                image_h: self.image_h,
                image_w: self.image_w,
                patch_size: self.patch_size,
            });
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(VitError::Parse {
                key: "model.embed_dim".into(),
                reason: format!(
                    "embed_dim {} must be a positive multiple of num_heads {}",
                    self.embed_dim, self.num_heads
                ),
            });
        }
        if self.num_blocks == 0 {
            return Err(VitError::Parse {
                key: "model.num_blocks".into(),
                reason: "must be at least 1".into(),
            });
        }
        if self.channels == 0 {
            return Err(VitError::Parse {
                key: "model.channels".into(),
                reason: "must be at least 1".into(),
            });
        }
        if self.num_classes < 2 {
            return Err(VitError::Parse {
                key: "model.num_classes".into(),
                reason: "need at least 2 classes".into(),
            });
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(VitError::Parse {
                key: "model.mlp_ratio".into(),
                reason: format!("must be positive, got {}", self.mlp_ratio),
            });
        }
        if let Some(sta) = &self.sta {
            sta.validate()?;
        }
        if let Some(anf) = &self.anf {
            anf.validate()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Total tokens: class + registers + patches.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_registers + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// 1-based block indices followed by an ANF layer.
    pub fn anf_plan(&self) -> Vec<usize> {
        match &self.anf {
            Some(cfg) => anf::placement_plan(cfg.placement, self.num_blocks),
            None => Vec::new(),
        }
    }
}

/// Ordered token state: class token at row 0, registers at rows 1..=R,
/// patch tokens after that.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// [(1+R+N)×D]
    pub tokens: Tensor,
    pub num_registers: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenSequence {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Row index of the first patch token.
    pub fn patch_offset(&self) -> usize {
        1 + self.num_registers
    }

    /// Patch-token rows as an [N×D] tensor.
    pub fn patch_tokens(&self) -> Tensor {
        let (rows, d) = self.tokens.dims2().expect("token matrix is 2-D");
        let start = self.patch_offset();
        let n = rows - start;
        Tensor::from_vec_unchecked(
            vec![n, d],
            self.tokens.data()[start * d..rows * d].to_vec(),
        )
    }
}

/// Splits an image laid out as [C×H×W] (row-major, values in [0,1])
/// into a grid of flattened patches. Within a patch the layout is
/// channel-major: index = c·p² + py·p + px.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<PatchGrid> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(VitError::ShapeMismatch {
            op: "patchify",
            detail: format!("expected [C,H,W], got {:?}", shape),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(VitError::IndivisibleImage { image_h: h, image_w: w, patch_size });
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let p2 = patch_size * patch_size;
    let pdim = c * p2;
    let mut patches = vec![0.0; gh * gw * pdim];
    let img = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let n = gy * gw + gx;
            for ch in 0..c {
                for py in 0..patch_size {
                    for px in 0..patch_size {
                        let src = ch * h * w + (gy * patch_size + py) * w + (gx * patch_size + px);
                        patches[n * pdim + ch * p2 + py * patch_size + px] = img[src];
                    }
                }
            }
        }
    }
    PatchGrid::new(Tensor::from_vec(vec![gh * gw, pdim], patches)?, gh, gw)
}

/// Inverse of [`patchify`]; reassembles the [C×H×W] image bit-exactly.
pub fn unpatchify(grid: &PatchGrid, patch_size: usize, channels: usize) -> Result<Tensor> {
    let (n, pdim) = grid.patches.dims2()?;
    let p2 = patch_size * patch_size;
    if pdim != channels * p2 || n != grid.grid_h * grid.grid_w {
        return Err(VitError::ShapeMismatch {
            op: "unpatchify",
            detail: format!("patch dim {pdim} vs {channels}x{patch_size}x{patch_size}"),
        });
    }
    let (h, w) = (grid.grid_h * patch_size, grid.grid_w * patch_size);
    let mut img = vec![0.0; channels * h * w];
    let pv = grid.patches.data();
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let idx = gy * grid.grid_w + gx;
            for ch in 0..channels {
                for py in 0..patch_size {
                    for px in 0..patch_size {
                        let dst = ch * h * w + (gy * patch_size + py) * w + (gx * patch_size + px);
                        img[dst] = pv[idx * pdim + ch * p2 + py * patch_size + px];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![channels, h, w], img)
}

/// Parameters of one pre-norm transformer block, generic over storage.
#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w_up: T,
    pub b_up: T,
    pub w_down: T,
    pub b_down: T,
}

impl<T> BlockParams<T> {
    fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
            w_up: f(&self.w_up),
            b_up: f(&self.b_up),
            w_down: f(&self.w_down),
            b_down: f(&self.b_down),
        }
    }

    fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        f("ln1.gamma", &self.ln1_gamma);
        f("ln1.beta", &self.ln1_beta);
        f("attn.wq", &self.wq);
        f("attn.bq", &self.bq);
        f("attn.wk", &self.wk);
        f("attn.bk", &self.bk);
        f("attn.wv", &self.wv);
        f("attn.bv", &self.bv);
        f("attn.wo", &self.wo);
        f("attn.bo", &self.bo);
        f("ln2.gamma", &self.ln2_gamma);
        f("ln2.beta", &self.ln2_beta);
        f("mlp.w_up", &self.w_up);
        f("mlp.b_up", &self.b_up);
        f("mlp.w_down", &self.w_down);
        f("mlp.b_down", &self.b_down);
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("ln1.gamma", &mut self.ln1_gamma);
        f("ln1.beta", &mut self.ln1_beta);
        f("attn.wq", &mut self.wq);
        f("attn.bq", &mut self.bq);
        f("attn.wk", &mut self.wk);
        f("attn.bk", &mut self.bk);
        f("attn.wv", &mut self.wv);
        f("attn.bv", &mut self.bv);
        f("attn.wo", &mut self.wo);
        f("attn.bo", &mut self.bo);
        f("ln2.gamma", &mut self.ln2_gamma);
        f("ln2.beta", &mut self.ln2_beta);
        f("mlp.w_up", &mut self.w_up);
        f("mlp.b_up", &mut self.b_up);
        f("mlp.w_down", &mut self.w_down);
        f("mlp.b_down", &mut self.b_down);
    }
}

/// Every learnable tensor of the model, generic over storage so the
/// same structure holds owned tensors, tape bindings, or velocities.
#[derive(Debug, Clone)]
pub struct VitParams<T> {
    pub embed_weight: T,
    pub embed_bias: T,
    pub pos_embed: T,
    pub class_token: T,
    pub register_tokens: Option<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// (1-based insertion index, layer parameters), sorted by index.
    pub anf_layers: Vec<(usize, AnfParams<T>)>,
    pub final_ln_gamma: T,
    pub final_ln_beta: T,
    pub head_weight: T,
    pub head_bias: T,
}

impl<T> VitParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> VitParams<U> {
        VitParams {
            embed_weight: f(&self.embed_weight),
            embed_bias: f(&self.embed_bias),
            pos_embed: f(&self.pos_embed),
            class_token: f(&self.class_token),
            register_tokens: self.register_tokens.as_ref().map(&mut f),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            anf_layers: self
                .anf_layers
                .iter()
                .map(|(i, l)| (*i, l.map(&mut f)))
                .collect(),
            final_ln_gamma: f(&self.final_ln_gamma),
            final_ln_beta: f(&self.final_ln_beta),
            head_weight: f(&self.head_weight),
            head_bias: f(&self.head_bias),
        }
    }

    /// Visits every parameter in a fixed canonical order with a stable
    /// dotted name. Checkpoints, the optimizer, and gradient collection
    /// all rely on this order being identical across calls.
    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        f("embed.weight", &self.embed_weight);
        f("embed.bias", &self.embed_bias);
        f("pos_embed", &self.pos_embed);
        f("class_token", &self.class_token);
        if let Some(r) = &self.register_tokens {
            f("register_tokens", r);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each(|name, t| f(&format!("blocks.{i}.{name}"), t));
        }
        for (idx, layer) in &self.anf_layers {
            layer.for_each(|name, t| f(&format!("anf.{idx}.{name}"), t));
        }
        f("final_ln.gamma", &self.final_ln_gamma);
        f("final_ln.beta", &self.final_ln_beta);
        f("head.weight", &self.head_weight);
        f("head.bias", &self.head_bias);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("embed.weight", &mut self.embed_weight);
        f("embed.bias", &mut self.embed_bias);
        f("pos_embed", &mut self.pos_embed);
        f("class_token", &mut self.class_token);
        if let Some(r) = &mut self.register_tokens {
            f("register_tokens", r);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(|name, t| f(&format!("blocks.{i}.{name}"), t));
        }
        for (idx, layer) in &mut self.anf_layers {
            layer.for_each_mut(|name, t| f(&format!("anf.{idx}.{name}"), t));
        }
        f("final_ln.gamma", &mut self.final_ln_gamma);
        f("final_ln.beta", &mut self.final_ln_beta);
        f("head.weight", &mut self.head_weight);
        f("head.bias", &mut self.head_bias);
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _| n += 1);
        n
    }
}

const INIT_STD: f64 = 0.02;
const INIT_CLIP: f64 = 2.0;

fn trunc_normal_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.trunc_normal(INIT_STD, INIT_CLIP)).collect();
    Tensor::from_vec_unchecked(shape.to_vec(), data)
}

impl VitParams<Tensor> {
    /// Deterministic initialization from the config seed: truncated
    /// normal (std 0.02) for projections and token embeddings, zeros
    /// for biases, unit layernorm affine. ANF layers start from the
    /// constant near-identity state and consume no random draws.
    pub fn init(cfg: &ViTConfig) -> VitParams<Tensor> {
        let mut rng = RngStream::new(cfg.seed).derive(0x1717);
        let d = cfg.embed_dim;
        let p = cfg.patch_dim();
        let n = cfg.num_patches();
        let hidden = cfg.mlp_hidden();
        let kernel = cfg.anf.map(|a| a.kernel_size).unwrap_or(3);

        let embed_weight = trunc_normal_tensor(&mut rng, &[p, d]);
        let embed_bias = Tensor::zeros(&[d]);
        let pos_embed = trunc_normal_tensor(&mut rng, &[n, d]);
        let class_token = trunc_normal_tensor(&mut rng, &[1, d]);
        let register_tokens = if cfg.num_registers > 0 {
            Some(trunc_normal_tensor(&mut rng, &[cfg.num_registers, d]))
        } else {
            None
        };
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::filled(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                wq: trunc_normal_tensor(&mut rng, &[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: trunc_normal_tensor(&mut rng, &[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: trunc_normal_tensor(&mut rng, &[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: trunc_normal_tensor(&mut rng, &[d, d]),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::filled(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                w_up: trunc_normal_tensor(&mut rng, &[d, hidden]),
                b_up: Tensor::zeros(&[hidden]),
                w_down: trunc_normal_tensor(&mut rng, &[hidden, d]),
                b_down: Tensor::zeros(&[d]),
            })
            .collect();
        let anf_layers = cfg
            .anf_plan()
            .into_iter()
            .map(|idx| (idx, AnfLayer::init(d, kernel)))
            .collect();
        VitParams {
            embed_weight,
            embed_bias,
            pos_embed,
            class_token,
            register_tokens,
            blocks,
            anf_layers,
            final_ln_gamma: Tensor::filled(&[d], 1.0),
            final_ln_beta: Tensor::zeros(&[d]),
            head_weight: trunc_normal_tensor(&mut rng, &[d, cfg.num_classes]),
            head_bias: Tensor::zeros(&[cfg.num_classes]),
        }
    }
}

/// One retained token state of a forward pass.
#[derive(Debug, Clone)]
pub struct TraceStage {
    pub label: String,
    pub seq: TokenSequence,
}

/// Per-layer token states: post-embed, post-block, post-ANF, final norm.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub stages: Vec<TraceStage>,
}

impl ForwardTrace {
    pub fn stage(&self, label: &str) -> Option<&TraceStage> {
        self.stages.iter().find(|s| s.label == label)
    }
}

/// Result of a traced forward pass on a tape.
pub struct ForwardPass {
    pub logits: VarId,
    pub trace: ForwardTrace,
    /// Row-stochastic attention matrices, one per (block, head).
    pub attn_probs: Vec<VarId>,
}

/// Plain-value result of [`VitModel::infer`].
pub struct InferOutput {
    pub logits: Tensor,
    pub trace: ForwardTrace,
}

pub struct VitModel {
    pub config: ViTConfig,
    pub params: VitParams<Tensor>,
}

impl VitModel {
    pub fn new(config: ViTConfig) -> Result<VitModel> {
        config.validate()?;
        let params = VitParams::init(&config);
        Ok(VitModel { config, params })
    }

    /// Places every parameter on the tape; `trainable` decides whether
    /// gradients will be accumulated for them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> VitParams<VarId> {
        self.params
            .map(|t| tape.leaf(t.clone().with_requires_grad(trainable)))
    }

    /// Traced forward pass over one image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ids: &VitParams<VarId>,
        image: &Tensor,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<ForwardPass> {
        let grid = patchify(image, self.config.patch_size)?;
        self.forward_grid(tape, ids, &grid, training, rng)
    }

    /// Forward pass starting from an already-patchified grid.
    pub fn forward_grid(
        &self,
        tape: &mut Tape,
        ids: &VitParams<VarId>,
        grid: &PatchGrid,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let grid = match &cfg.sta {
            Some(sta_cfg) => sta::sta_augment(grid, sta_cfg, rng, training)?,
            None => grid.clone(),
        };
        let (gh, gw) = (grid.grid_h, grid.grid_w);
        let r = cfg.num_registers;

        let mut trace = ForwardTrace::default();
        let mut attn_probs = Vec::new();

        // Embed: linear projection + positional embeddings on patch
        // tokens, then class and register tokens prepended.
        let patches = tape.constant(grid.patches.clone());
        let projected = tape.matmul(patches, ids.embed_weight)?;
        let biased = tape.add_row_vector(projected, ids.embed_bias)?;
        let positioned = tape.add(biased, ids.pos_embed)?;
        let mut parts = vec![ids.class_token];
        if let Some(regs) = ids.register_tokens {
            parts.push(regs);
        }
        parts.push(positioned);
        let mut seq = tape.concat_rows(&parts)?;

        let snapshot = |tape: &Tape, label: String, id: VarId| TraceStage {
            label,
            seq: TokenSequence {
                tokens: tape.value(id).clone(),
                num_registers: r,
                grid_h: gh,
                grid_w: gw,
            },
        };
        trace.stages.push(snapshot(tape, "embed".into(), seq));

        let plan = cfg.anf_plan();
        for (i, block) in ids.blocks.iter().enumerate() {
            let block_no = i + 1;
            seq = self.block_forward(tape, block, seq, &mut attn_probs)?;
            trace.stages.push(snapshot(tape, format!("block{block_no}"), seq));
            if plan.contains(&block_no) {
                let layer = ids
                    .anf_layers
                    .iter()
                    .find(|(idx, _)| *idx == block_no)
                    .map(|(_, l)| l)
                    .expect("planned ANF layer is initialized");
                seq = self.anf_apply(tape, layer, seq)?;
                trace.stages.push(snapshot(tape, format!("anf{block_no}"), seq));
            }
        }

        let normed = tape.layernorm(seq, ids.final_ln_gamma, ids.final_ln_beta, LN_EPS)?;
        trace.stages.push(snapshot(tape, "final_ln".into(), normed));

        // Registers and patches are dropped here; only the class token
        // reaches the head.
        let cls = tape.slice_rows(normed, 0, 1)?;
        let scores = tape.matmul(cls, ids.head_weight)?;
        let logits = tape.add_row_vector(scores, ids.head_bias)?;

        Ok(ForwardPass { logits, trace, attn_probs })
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        block: &BlockParams<VarId>,
        x: VarId,
        attn_probs: &mut Vec<VarId>,
    ) -> Result<VarId> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let n1 = tape.layernorm(x, block.ln1_gamma, block.ln1_beta, LN_EPS)?;
        let q = {
            let p = tape.matmul(n1, block.wq)?;
            tape.add_row_vector(p, block.bq)?
        };
        let k = {
            let p = tape.matmul(n1, block.wk)?;
            tape.add_row_vector(p, block.bk)?
        };
        let v = {
            let p = tape.matmul(n1, block.wv)?;
            tape.add_row_vector(p, block.bv)?
        };
        let mut ctx_parts = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let scaled = tape.scale(raw, scale)?;
            let probs = tape.softmax_rows(scaled)?;
            attn_probs.push(probs);
            ctx_parts.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&ctx_parts)?;
        let proj = tape.matmul(ctx, block.wo)?;
        let attn_out = tape.add_row_vector(proj, block.bo)?;
        let x = tape.add(x, attn_out)?;

        let n2 = tape.layernorm(x, block.ln2_gamma, block.ln2_beta, LN_EPS)?;
        let up = {
            let p = tape.matmul(n2, block.w_up)?;
            tape.add_row_vector(p, block.b_up)?
        };
        let act = tape.gelu(up)?;
        let down = {
            let p = tape.matmul(act, block.w_down)?;
            tape.add_row_vector(p, block.b_down)?
        };
        tape.add(x, down)
    }

    fn anf_apply(
        &self,
        tape: &mut Tape,
        layer: &AnfParams<VarId>,
        seq: VarId,
    ) -> Result<VarId> {
        let apply_special = self
            .config
            .anf
            .map(|a| a.apply_to_special_tokens)
            .unwrap_or(false);
        if apply_special {
            return anf::anf_filter(tape, layer, seq);
        }
        let split = 1 + self.config.num_registers;
        let rows = tape.value(seq).dims2()?.0;
        let special = tape.slice_rows(seq, 0, split)?;
        let patches = tape.slice_rows(seq, split, rows)?;
        let filtered = anf::anf_filter(tape, layer, patches)?;
        tape.concat_rows(&[special, filtered])
    }

    /// Convenience inference pass on a private tape with untracked
    /// parameters: returns plain logits and the token-state trace.
    pub fn infer(&self, image: &Tensor, rng: &mut RngStream) -> Result<InferOutput> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let pass = self.forward(&mut tape, &ids, image, false, rng)?;
        Ok(InferOutput {
            logits: tape.value(pass.logits).clone(),
            trace: pass.trace,
        })
    }
}
