use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ensure_finite, normal, xavier, Classifier, ModelError, ParamKind, ParamStore};
use crate::graph::{Graph, Var};
use crate::pyramid::ImageShape;
use crate::tensor::Tensor;

/// Pre-norm vision transformer with a class token and learned positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image: ImageShape,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::new(32, 32, 3),
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 2,
            num_classes: 10,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let p = self.patch_size;
        let bad = |m: String| Err(ModelError::InvalidArch(m));
        if p == 0 || !self.image.height.is_multiple_of(p) || !self.image.width.is_multiple_of(p) {
            return bad(format!(
                "patch size {p} must divide image {}x{}",
                self.image.height, self.image.width
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("embedding dim must be divisible by the head count".into());
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.num_classes < 2 || self.image.channels == 0 {
            return bad("depth, mlp ratio, channels must be positive and classes >= 2".into());
        }
        Ok(())
    }

    /// Number of patch tokens (without the class token).
    pub fn num_patches(&self) -> usize {
        (self.image.height / self.patch_size) * (self.image.width / self.patch_size)
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image.channels
    }
}

const PER_BLOCK: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct TinyVit {
    config: VitConfig,
    params: ParamStore,
}

impl TinyVit {
    pub fn new<R: Rng>(config: VitConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let seq = config.num_patches() + 1;
        let mut ps = ParamStore::default();
        ps.push("patch_embed.weight", ParamKind::Weight, xavier(d, config.patch_dim(), rng));
        ps.push("patch_embed.bias", ParamKind::Bias, Tensor::zeros(&[d]));
        ps.push("cls_token", ParamKind::Embedding, normal(&[d], 0.02, rng));
        ps.push("pos_embed", ParamKind::Embedding, normal(&[seq, d], 0.02, rng));
        for i in 0..config.depth {
            let n = |s: &str| format!("blocks.{i}.{s}");
            ps.push(n("norm1.weight"), ParamKind::Norm, Tensor::full(&[d], 1.0));
            ps.push(n("norm1.bias"), ParamKind::Norm, Tensor::zeros(&[d]));
            ps.push(n("attn.qkv.weight"), ParamKind::Weight, xavier(3 * d, d, rng));
            ps.push(n("attn.qkv.bias"), ParamKind::Bias, Tensor::zeros(&[3 * d]));
            ps.push(n("attn.proj.weight"), ParamKind::Weight, xavier(d, d, rng));
            ps.push(n("attn.proj.bias"), ParamKind::Bias, Tensor::zeros(&[d]));
            ps.push(n("norm2.weight"), ParamKind::Norm, Tensor::full(&[d], 1.0));
            ps.push(n("norm2.bias"), ParamKind::Norm, Tensor::zeros(&[d]));
            ps.push(n("mlp.fc1.weight"), ParamKind::Weight, xavier(hidden, d, rng));
            ps.push(n("mlp.fc1.bias"), ParamKind::Bias, Tensor::zeros(&[hidden]));
            ps.push(n("mlp.fc2.weight"), ParamKind::Weight, xavier(d, hidden, rng));
            ps.push(n("mlp.fc2.bias"), ParamKind::Bias, Tensor::zeros(&[d]));
        }
        ps.push("norm.weight", ParamKind::Norm, Tensor::full(&[d], 1.0));
        ps.push("norm.bias", ParamKind::Norm, Tensor::zeros(&[d]));
        ps.push("head.weight", ParamKind::Weight, xavier(config.num_classes, d, rng));
        ps.push("head.bias", ParamKind::Bias, Tensor::zeros(&[config.num_classes]));
        Ok(Self { config, params: ps })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    /// `[batch, H, W, C]` pixels to `[batch * patches, p * p * C]` rows.
    fn patchify_index(&self, batch: usize) -> Vec<usize> {
        let ImageShape {
            height: h,
            width: w,
            channels: c,
        } = self.config.image;
        let p = self.config.patch_size;
        let mut idx = Vec::with_capacity(batch * h * w * c);
        for b in 0..batch {
            for py in 0..h / p {
                for px in 0..w / p {
                    for dy in 0..p {
                        for dx in 0..p {
                            let base = ((b * h + py * p + dy) * w + px * p + dx) * c;
                            idx.extend(base..base + c);
                        }
                    }
                }
            }
        }
        idx
    }

    /// Picks one of q/k/v out of `[batch, seq, 3d]`, laid out `[batch * heads, seq, hd]`.
    fn split_heads_index(&self, batch: usize, seq: usize, which: usize) -> Vec<usize> {
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let hd = d / heads;
        let mut idx = Vec::with_capacity(batch * seq * d);
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let base = (b * seq + t) * 3 * d + which * d + h * hd;
                    idx.extend(base..base + hd);
                }
            }
        }
        idx
    }

    /// `[batch * heads, seq, hd]` back to `[batch, seq, d]`.
    fn merge_heads_index(&self, batch: usize, seq: usize) -> Vec<usize> {
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let hd = d / heads;
        let mut idx = Vec::with_capacity(batch * seq * d);
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let base = ((b * heads + h) * seq + t) * hd;
                    idx.extend(base..base + hd);
                }
            }
        }
        idx
    }
}

impl Classifier for TinyVit {
    fn image_shape(&self) -> ImageShape {
        self.config.image
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn build_logits(&self, g: &mut Graph, p: &[Var], images: Var) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1..] != cfg.image.dims() {
            return Err(ModelError::InputShape {
                got: s,
                expected: cfg.image.dims().to_vec(),
            });
        }
        let batch = s[0];
        let d = cfg.embed_dim;
        let heads = cfg.num_heads;
        let hd = d / heads;
        let tokens = cfg.num_patches();
        let seq = tokens + 1;

        let patches = g.gather(
            images,
            Arc::new(self.patchify_index(batch)),
            &[batch * tokens, cfg.patch_dim()],
        );
        let x = g.linear(patches, p[0], Some(p[1]));
        let x = g.reshape(x, &[batch, tokens, d]);
        let x = g.prepend_token(x, p[2]);
        let mut x = g.add_broadcast(x, p[3]);
        ensure_finite(g, x, "patch_embed")?;

        let q_idx = Arc::new(self.split_heads_index(batch, seq, 0));
        let k_idx = Arc::new(self.split_heads_index(batch, seq, 1));
        let v_idx = Arc::new(self.split_heads_index(batch, seq, 2));
        let merge_idx = Arc::new(self.merge_heads_index(batch, seq));
        let attn_scale = 1.0 / (hd as f64).sqrt();
        for i in 0..cfg.depth {
            let w = &p[4 + i * PER_BLOCK..4 + (i + 1) * PER_BLOCK];
            let h = g.layer_norm(x, w[0], w[1]);
            let qkv = g.linear(h, w[2], Some(w[3]));
            let qkv_shape = [batch * heads, seq, hd];
            let q = g.gather(qkv, q_idx.clone(), &qkv_shape);
            let k = g.gather(qkv, k_idx.clone(), &qkv_shape);
            let v = g.gather(qkv, v_idx.clone(), &qkv_shape);
            let scores = g.bmm(q, k, false, true);
            let scores = g.scale(scores, attn_scale);
            let attn = g.softmax(scores);
            let o = g.bmm(attn, v, false, false);
            let merged = g.gather(o, merge_idx.clone(), &[batch, seq, d]);
            let proj = g.linear(merged, w[4], Some(w[5]));
            x = g.add(x, proj);
            let h = g.layer_norm(x, w[6], w[7]);
            let f = g.linear(h, w[8], Some(w[9]));
            let f = g.gelu(f);
            let f = g.linear(f, w[10], Some(w[11]));
            x = g.add(x, f);
            ensure_finite(g, x, &format!("blocks.{i}"))?;
        }
        let base = 4 + cfg.depth * PER_BLOCK;
        let x = g.layer_norm(x, p[base], p[base + 1]);
        let cls = g.select_token(x, 0);
        let logits = g.linear(cls, p[base + 2], Some(p[base + 3]));
        ensure_finite(g, logits, "head")?;
        Ok(logits)
    }
}
