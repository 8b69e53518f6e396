//! The assembled classifier: backbone (or supplied hierarchy) → multi-scale
//! tokens → scale token → local blocks → global layers → linear head.

use serde::{Deserialize, Serialize};

use crate::attention::{
    check_heads, embed_without_token, extract_scale_tokens, global_attention_layer, prepend_scale_token,
    AttentionMode, LocalBlock, MultiHeadAttention,
};
use crate::backbone::{Backbone, BackboneConfig, FeatureHierarchy};
use crate::error::{Error, Result, StageContext};
use crate::nn::{join, Linear, Mode, Module};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::scale_token::{ScaleToken, ScaleTokenConfig, ScaleTokenMode};
use crate::tensor::{RunningStats, Tensor};
use crate::tokenizer::{exact_sqrt, Tokenizer, TokenizerConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Raw images run through the owned backbone.
    #[default]
    Image,
    /// Precomputed feature hierarchies; the model owns no backbone.
    Hierarchy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub heads: usize,
    pub depth: usize,
    /// FFN hidden width; `4·D` when absent.
    #[serde(default)]
    pub ffn_hidden: Option<usize>,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuoFormerConfig {
    pub backbone: BackboneConfig,
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub scale_token: ScaleTokenConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub attention: AttentionMode,
    #[serde(default)]
    pub input: InputKind,
    #[serde(default)]
    pub frozen_backbone: bool,
}

impl DuoFormerConfig {
    /// H=64, N=4, D=32, 4 heads, depth 2, channels (16, 32, 64, 128), all scales.
    pub fn desk(n_classes: usize) -> Self {
        DuoFormerConfig {
            backbone: BackboneConfig::default(),
            tokenizer: TokenizerConfig {
                patch_count: 4,
                embed_dim: 32,
                scale_subset: vec![0, 1, 2, 3],
            },
            scale_token: ScaleTokenConfig::default(),
            encoder: EncoderConfig {
                heads: 4,
                depth: 2,
                ffn_hidden: None,
                n_classes,
            },
            attention: AttentionMode::Duo,
            input: InputKind::Image,
            frozen_backbone: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.tokenizer.embed_dim
    }

    pub fn ffn_hidden(&self) -> usize {
        self.encoder.ffn_hidden.unwrap_or(4 * self.embed_dim())
    }

    /// Multi-scale token length `S`.
    pub fn token_length(&self) -> usize {
        self.tokenizer.total_length(self.backbone.image_size)
    }

    /// Local sequence length: `S + 1` with a prepended scale token, else `S`.
    pub fn local_length(&self) -> usize {
        self.token_length() + usize::from(self.scale_token.mode.prepends())
    }

    /// Every violated constraint, in a fixed order; empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let h = self.backbone.image_size;
        let n = self.tokenizer.patch_count;
        if h == 0 || h % 32 != 0 {
            out.push(format!("image size {h} is not a positive multiple of 32"));
        }
        if self.backbone.stage_channels.contains(&0) || self.backbone.blocks_per_stage == 0 {
            out.push("backbone channels and blocks must be positive".into());
        }
        let grid = exact_sqrt(n).filter(|&g| g > 0);
        if grid.is_none() {
            out.push(format!("N={n} is not a perfect square"));
        }
        let scales = self.tokenizer.scales();
        if scales.is_empty() {
            out.push("scale subset is empty".into());
        }
        if let Some(&bad) = scales.iter().find(|&&s| s > 3) {
            out.push(format!("scale {bad} out of range 0..=3"));
        }
        if let Some(g) = grid {
            for &s in scales.iter().filter(|&&s| s <= 3) {
                let step = (4 << s) * g;
                if h % step != 0 {
                    out.push(format!("H={h} not divisible by 4*2^{s}*sqrt(N)={step} for scale {s}"));
                }
            }
            let p3 = self.backbone.stage_size(3);
            let needs_p3 = self.scale_token.mode == ScaleTokenMode::Fused || scales.contains(&3);
            if needs_p3 && p3 != g {
                out.push(format!("P3={p3} must equal sqrt(N)={g} for the fused scale token or scale 3"));
            }
        }
        let d = self.embed_dim();
        if d == 0 {
            out.push("embed_dim must be positive".into());
        } else if check_heads(d, self.encoder.heads).is_err() {
            out.push(format!("D={d} not divisible by n_h={}", self.encoder.heads));
        }
        if self.encoder.depth == 0 {
            out.push("depth must be at least 1".into());
        }
        if self.encoder.n_classes < 2 {
            out.push("need at least 2 classes".into());
        }
        if self.encoder.ffn_hidden == Some(0) {
            out.push("ffn_hidden must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// Attention weights of every layer of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace<T: Scalar> {
    /// `[n, N, n_h, T, T]` per local block.
    pub local: Vec<Tensor<T>>,
    /// `[n, n_h, N+1, N+1]` per global layer.
    pub global: Vec<Tensor<T>>,
}

pub enum ModelInput<'a, T: Scalar> {
    Image(&'a Tensor<T>),
    Hierarchy(&'a FeatureHierarchy<T>),
}

pub struct DuoFormer<T: Scalar> {
    pub cfg: DuoFormerConfig,
    pub backbone: Option<Backbone<T>>,
    pub tokenizer: Tokenizer<T>,
    pub scale_token: ScaleToken<T>,
    /// `[S+1, D]`, shared across patches.
    pub local_pos: Tensor<T>,
    pub local_blocks: Vec<LocalBlock<T>>,
    /// `[1, D]`.
    pub cls: Option<Tensor<T>>,
    /// `[N+1, D]`.
    pub global_pos: Option<Tensor<T>>,
    pub global_layers: Vec<MultiHeadAttention<T>>,
    pub head: Linear<T>,
}

fn embedding<T: Scalar>(rng: &mut Rng, rows: usize, d: usize) -> Tensor<T> {
    Tensor::param([rows, d], rng.trunc_normal_vec(rows * d, 0.02)).expect("shape")
}

impl<T: Scalar> DuoFormer<T> {
    /// Each component draws from its own stream derived from `seed`, so
    /// variants that share a component also share its initial parameters.
    pub fn new(cfg: &DuoFormerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim();
        let n = cfg.tokenizer.patch_count;
        let s = cfg.token_length();
        let backbone = match cfg.input {
            InputKind::Image => {
                let mut b = Backbone::new(&cfg.backbone, &mut Rng::derived(seed, "backbone"))?;
                if cfg.frozen_backbone {
                    b.freeze();
                }
                Some(b)
            }
            InputKind::Hierarchy => None,
        };
        let tokenizer = Tokenizer::new(&cfg.tokenizer, &cfg.backbone, &mut Rng::derived(seed, "tokenizer"))?;
        let scale_token = ScaleToken::new(
            &cfg.scale_token,
            &cfg.tokenizer,
            &cfg.backbone,
            &mut Rng::derived(seed, "scale_token"),
        )?;
        let mut rng = Rng::derived(seed, "local");
        let local_pos = embedding(&mut rng, s + 1, d);
        let local_blocks = if cfg.attention.has_local() {
            (0..cfg.encoder.depth)
                .map(|_| LocalBlock::new(&mut rng, d, cfg.encoder.heads, cfg.ffn_hidden()))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut rng = Rng::derived(seed, "global");
        let (cls, global_pos, global_layers) = if cfg.attention.has_global() {
            let cls = embedding(&mut rng, 1, d);
            let pos = embedding(&mut rng, n + 1, d);
            let layers = (0..cfg.encoder.depth)
                .map(|_| MultiHeadAttention::new(&mut rng, d, cfg.encoder.heads))
                .collect::<Result<_>>()?;
            (Some(cls), Some(pos), layers)
        } else {
            (None, None, Vec::new())
        };
        let head = Linear::new(&mut Rng::derived(seed, "head"), d, cfg.encoder.n_classes);
        Ok(DuoFormer {
            cfg: cfg.clone(),
            backbone,
            tokenizer,
            scale_token,
            local_pos,
            local_blocks,
            cls,
            global_pos,
            global_layers,
            head,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.cfg.encoder.n_classes
    }

    pub fn features(&self, input: ModelInput<'_, T>) -> Result<FeatureHierarchy<T>> {
        match input {
            ModelInput::Hierarchy(h) => {
                h.check(&self.cfg.backbone).stage("input")?;
                Ok(h.clone())
            }
            ModelInput::Image(img) => match &self.backbone {
                Some(b) => b.forward(img).stage("backbone"),
                None => Err(Error::Config("model takes feature hierarchies, not images".into())),
            },
        }
    }

    pub fn forward(&self, input: ModelInput<'_, T>, mode: Mode) -> Result<(Tensor<T>, AttentionTrace<T>)> {
        let hier = self.features(input)?;
        self.forward_hierarchy(&hier, mode)
    }

    pub fn forward_hierarchy(&self, hier: &FeatureHierarchy<T>, mode: Mode) -> Result<(Tensor<T>, AttentionTrace<T>)> {
        let mut trace = AttentionTrace::default();
        let tokens = self.tokenizer.assemble(hier).stage("tokenizer")?;
        let st_mode = self.scale_token.mode;
        let x0 = if st_mode.prepends() {
            let x_s = self.scale_token.make_scale_token(hier, &tokens, mode).stage("scale_token")?;
            prepend_scale_token(&tokens.tokens, &x_s, &self.local_pos).stage("scale_token")?
        } else {
            embed_without_token(&tokens.tokens, &self.local_pos).stage("scale_token")?
        };
        let mut y = x0;
        for block in &self.local_blocks {
            let (next, w) = block.forward(&y).stage("local_attention")?;
            trace.local.push(w);
            y = next;
        }
        let z = extract_scale_tokens(&y, st_mode, tokens.total_length(), tokens.last_scale_offset())
            .stage("local_attention")?;
        let logits = match (&self.cls, &self.global_pos) {
            (Some(cls), Some(pos)) => {
                let (n, d) = (z.dim(0), z.dim(2));
                let cls = cls.reshape([1, 1, d])?.broadcast_to([n, 1, d])?;
                let mut g = Tensor::concat(&[cls, z], 1)?.add(pos).stage("global_attention")?;
                for layer in &self.global_layers {
                    let (next, w) = global_attention_layer(&g, layer).stage("global_attention")?;
                    trace.global.push(w);
                    g = next;
                }
                self.head.forward(&g.narrow(1, 0, 1)?.reshape([n, d])?).stage("head")?
            }
            _ => local_only_head(&z, &self.head).stage("head")?,
        };
        Ok((logits, trace))
    }

    /// Parameters that receive a gradient from the loss and are not frozen.
    ///
    /// Backbone stages past the deepest included scale feed nothing and are
    /// excluded.
    pub fn trainable_params(&self) -> Vec<(String, Tensor<T>)> {
        let deepest = self.cfg.tokenizer.scales().last().copied().unwrap_or(0);
        self.named_params()
            .into_iter()
            .filter(|(name, t)| {
                t.requires_grad()
                    && name
                        .strip_prefix("backbone.stage")
                        .and_then(|rest| rest[..1].parse::<usize>().ok())
                        .is_none_or(|s| s <= deepest)
            })
            .collect()
    }
}

/// Mean of the per-patch scale tokens, then the linear classifier.
pub fn local_only_head<T: Scalar>(z: &Tensor<T>, head: &Linear<T>) -> Result<Tensor<T>> {
    head.forward(&z.mean_axis(1)?)
}

impl<T: Scalar> Module<T> for DuoFormer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.tokenizer.visit(&join(prefix, "tokenizer"), f);
        self.scale_token.visit(&join(prefix, "scale_token"), f);
        f(join(prefix, "local_pos"), &self.local_pos);
        self.local_blocks.visit(&join(prefix, "local"), f);
        self.cls.visit(&join(prefix, "cls"), f);
        self.global_pos.visit(&join(prefix, "global_pos"), f);
        self.global_layers.visit(&join(prefix, "global"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.tokenizer.visit_mut(&join(prefix, "tokenizer"), f);
        self.scale_token.visit_mut(&join(prefix, "scale_token"), f);
        f(join(prefix, "local_pos"), &mut self.local_pos);
        self.local_blocks.visit_mut(&join(prefix, "local"), f);
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.global_pos.visit_mut(&join(prefix, "global_pos"), f);
        self.global_layers.visit_mut(&join(prefix, "global"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &std::sync::Mutex<RunningStats<T>>)) {
        self.scale_token.visit_buffers(&join(prefix, "scale_token"), f);
    }
}
