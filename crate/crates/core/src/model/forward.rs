use rayon::prelude::*;

use super::{
    attn_output_name, intermediate_name, key_name, output_name, query_name, store_as, value_name,
    VitModel, CLASSIFIER, PATCH_EMBED,
};
use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Dtype, Tensor};

/// Receives linear-layer activations during a forward pass.
///
/// `input` is what the linear consumed; `output` is what it fed forward:
/// after GELU for `intermediate.dense`, the raw output for every other linear.
pub trait ForwardObserver {
    /// Whether `layer` should be reported at all.
    fn wants(&self, layer: &str) -> bool;

    fn observe(&mut self, layer: &str, input: &Tensor, output: &Tensor);
}

/// Unfolds `[B, C, H, W]` images into `[B, N, C*p*p]` patches. Patches are
/// ordered row-major over the patch grid, features as `(channel, dy, dx)`.
pub fn patchify(images: &[f32], batch: usize, channels: usize, size: usize, patch: usize) -> Vec<f32> {
    let grid = size / patch;
    let dim = channels * patch * patch;
    let mut out = Vec::with_capacity(batch * grid * grid * dim);
    for b in 0..batch {
        let img = &images[b * channels * size * size..(b + 1) * channels * size * size];
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..channels {
                    for dy in 0..patch {
                        let row = c * size * size + (gy * patch + dy) * size + gx * patch;
                        out.extend_from_slice(&img[row..row + patch]);
                    }
                }
            }
        }
    }
    out
}

fn report(
    observer: &mut Option<&mut dyn ForwardObserver>,
    name: impl FnOnce() -> String,
    input: &Tensor,
    output: &Tensor,
) {
    if let Some(obs) = observer.as_deref_mut() {
        let name = name();
        if obs.wants(&name) {
            obs.observe(&name, input, output);
        }
    }
}

fn add_into(x: &mut [f32], delta: &Tensor) {
    match delta.as_f32() {
        Ok(d) => x.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        Err(_) => x.iter_mut().zip(delta.to_f32_vec()).for_each(|(a, b)| *a += b),
    }
}

/// Multi-head scaled dot-product attention over `[B, T, H]` q/k/v buffers.
fn attention(q: &[f32], k: &[f32], v: &[f32], batch: usize, tokens: usize, hidden: usize, heads: usize) -> Vec<f32> {
    let d = hidden / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let gather = |src: &[f32], b: usize, h: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(tokens * d);
        for t in 0..tokens {
            let at = (b * tokens + t) * hidden + h * d;
            out.extend_from_slice(&src[at..at + d]);
        }
        out
    };
    let blocks: Vec<Vec<f32>> = (0..batch * heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / heads, bh % heads);
            let qh = gather(q, b, h);
            let kh = gather(k, b, h);
            let vh = gather(v, b, h);
            // kh is [T, d]; scores need its transpose
            let mut kt = vec![0.0f32; d * tokens];
            for t in 0..tokens {
                for j in 0..d {
                    kt[j * tokens + t] = kh[t * d + j];
                }
            }
            let mut scores = gemm(&qh, &kt, tokens, d, tokens);
            scores.iter_mut().for_each(|s| *s *= scale);
            let probs = tensor::softmax(&Tensor::from_f32(vec![tokens, tokens], scores).unwrap(), 1)
                .unwrap()
                .into_f32_vec();
            gemm(&probs, &vh, tokens, tokens, d)
        })
        .collect();
    let mut ctx = vec![0.0f32; batch * tokens * hidden];
    for (bh, block) in blocks.iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        for t in 0..tokens {
            let at = (b * tokens + t) * hidden + h * d;
            ctx[at..at + d].copy_from_slice(&block[t * d..(t + 1) * d]);
        }
    }
    ctx
}

impl VitModel {
    /// Pre-LN ViT forward pass returning `[B, num_classes]` f32 logits.
    ///
    /// Residual adds, layer norms and softmax run in f32 whatever the storage
    /// dtype of the linears.
    pub fn forward(&self, images: &Tensor, mut observer: Option<&mut dyn ForwardObserver>) -> Result<Tensor> {
        let c = &self.config;
        let shape = images.shape();
        let expect = [c.num_channels, c.image_size, c.image_size];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::Dimension(format!(
                "images of shape {shape:?} do not match [B, {}, {}, {}]",
                expect[0], expect[1], expect[2]
            )));
        }
        let batch = shape[0];
        let pixels = images.to_f32_vec();
        let (h, t, n) = (c.hidden_size, c.seq_len(), c.num_patches());

        let patches = Tensor::from_f32(
            vec![batch, n, c.patch_dim()],
            patchify(&pixels, batch, c.num_channels, c.image_size, c.patch_size),
        )?;
        let embedded = self.patch_embed.forward(&patches)?;
        report(&mut observer, || PATCH_EMBED.to_string(), &patches, &embedded);
        let embedded = embedded.into_f32_vec();
        let cls = self.cls_token.as_f32()?;
        let pos = self.pos_embed.as_f32()?;
        let mut x = vec![0.0f32; batch * t * h];
        for b in 0..batch {
            let base = b * t * h;
            for i in 0..h {
                x[base + i] = cls[i] + pos[i];
            }
            for p in 0..n {
                for i in 0..h {
                    x[base + (p + 1) * h + i] = embedded[(b * n + p) * h + i] + pos[(p + 1) * h + i];
                }
            }
        }

        let mut xt = Tensor::from_f32(vec![batch, t, h], x)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let normed = layer.norm_before.forward(&xt)?;
            let q = layer.query.forward(&normed)?;
            report(&mut observer, || query_name(l), &normed, &q);
            let k = layer.key.forward(&normed)?;
            report(&mut observer, || key_name(l), &normed, &k);
            let v = layer.value.forward(&normed)?;
            report(&mut observer, || value_name(l), &normed, &v);
            let ctx = attention(
                &q.into_f32_vec(),
                &k.into_f32_vec(),
                &v.into_f32_vec(),
                batch,
                t,
                h,
                c.num_heads,
            );
            let ctx = store_as(layer.value.activation_dtype(), Tensor::from_f32(vec![batch, t, h], ctx)?)?;
            let attn = layer.attn_output.forward(&ctx)?;
            report(&mut observer, || attn_output_name(l), &ctx, &attn);
            add_into(xt.as_f32_mut()?, &attn);

            let normed = layer.norm_after.forward(&xt)?;
            let pre = layer.intermediate.forward(&normed)?;
            let act = store_as(layer.intermediate.activation_dtype(), tensor::gelu(&pre)?)?;
            report(&mut observer, || intermediate_name(l), &normed, &act);
            let out = layer.output.forward(&act)?;
            report(&mut observer, || output_name(l), &act, &out);
            add_into(xt.as_f32_mut()?, &out);
        }

        let xv = xt.as_f32()?;
        let mut cls_rows = Vec::with_capacity(batch * h);
        for b in 0..batch {
            cls_rows.extend_from_slice(&xv[b * t * h..b * t * h + h]);
        }
        let cls_rows = self.final_norm.forward(&Tensor::from_f32(vec![batch, h], cls_rows)?)?;
        let logits = self.head.forward(&cls_rows)?;
        report(&mut observer, || CLASSIFIER.to_string(), &cls_rows, &logits);
        tensor::cast(&logits, Dtype::F32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn patchify_small_image() {
        // 1 channel 4x4, patch 2: first patch is the top-left 2x2 block
        let img: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let p = patchify(&img, 1, 1, 4, 2);
        assert_eq!(&p[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_images_give_finite_logits() {
        let m = VitModel::init(ModelConfig::vit_toy(), 0).unwrap();
        let imgs = Tensor::zeros(vec![2, 3, 32, 32]).unwrap();
        let logits = m.forward(&imgs, None).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(logits.as_f32().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_image_shape() {
        let m = VitModel::init(ModelConfig::vit_toy(), 0).unwrap();
        let imgs = Tensor::zeros(vec![2, 3, 16, 16]).unwrap();
        assert!(matches!(m.forward(&imgs, None), Err(Error::Dimension(_))));
    }
}
