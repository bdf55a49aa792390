//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's numeric kernels; models are only read for their parameters.

#![allow(dead_code)]

use vitopt::model::{ModelConfig, Projection, VitModel};

pub const LN_EPS: f64 = 1e-6;

fn params(p: &Projection) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let Projection::Float(l) = p else {
        panic!("reference forward needs float layers")
    };
    let w = l.weight.to_f32_vec().into_iter().map(f64::from).collect();
    let b = l.bias.to_f32_vec().into_iter().map(f64::from).collect();
    (w, b, l.out_features(), l.in_features())
}

fn dense(p: &Projection, x: &[f64]) -> Vec<f64> {
    let (w, b, out, inp) = params(p);
    let rows = x.len() / inp;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut acc = b[o];
            for i in 0..inp {
                acc += x[r * inp + i] * w[o * inp + i];
            }
            y[r * out + o] = acc;
        }
    }
    y
}

fn norm(x: &[f64], gamma: &[f32], beta: &[f32]) -> Vec<f64> {
    let h = gamma.len();
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(h) {
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..h {
            y.push((row[i] - mean) * inv * f64::from(gamma[i]) + f64::from(beta[i]));
        }
    }
    y
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

/// Straight-line f64 evaluation of a float ViT, one image at a time.
pub fn reference_logits(m: &VitModel, images: &[f32], batch: usize) -> Vec<Vec<f64>> {
    let c: ModelConfig = m.config;
    let (h, heads, p, s, ch) = (c.hidden_size, c.num_heads, c.patch_size, c.image_size, c.num_channels);
    let grid = s / p;
    let t = grid * grid + 1;
    let d = h / heads;
    let cls = m.cls_token.to_f32_vec();
    let pos = m.pos_embed.to_f32_vec();
    let mut all = Vec::with_capacity(batch);
    for b in 0..batch {
        let img = &images[b * ch * s * s..(b + 1) * ch * s * s];
        let mut patches = Vec::new();
        for gy in 0..grid {
            for gx in 0..grid {
                for cc in 0..ch {
                    for dy in 0..p {
                        for dx in 0..p {
                            patches.push(f64::from(img[cc * s * s + (gy * p + dy) * s + gx * p + dx]));
                        }
                    }
                }
            }
        }
        let emb = dense(&m.patch_embed, &patches);
        let mut x = vec![0.0; t * h];
        for i in 0..h {
            x[i] = f64::from(cls[i]) + f64::from(pos[i]);
        }
        for tok in 1..t {
            for i in 0..h {
                x[tok * h + i] = emb[(tok - 1) * h + i] + f64::from(pos[tok * h + i]);
            }
        }
        for layer in &m.layers {
            let n1 = norm(&x, &layer.norm_before.gamma.to_f32_vec(), &layer.norm_before.beta.to_f32_vec());
            let q = dense(&layer.query, &n1);
            let k = dense(&layer.key, &n1);
            let v = dense(&layer.value, &n1);
            let mut ctx = vec![0.0; t * h];
            for hd in 0..heads {
                for i in 0..t {
                    let scores: Vec<f64> = (0..t)
                        .map(|j| (0..d).map(|e| q[i * h + hd * d + e] * k[j * h + hd * d + e]).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = ex.iter().sum();
                    for e in 0..d {
                        ctx[i * h + hd * d + e] = (0..t).map(|j| ex[j] / z * v[j * h + hd * d + e]).sum();
                    }
                }
            }
            let a = dense(&layer.attn_output, &ctx);
            x.iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);
            let n2 = norm(&x, &layer.norm_after.gamma.to_f32_vec(), &layer.norm_after.beta.to_f32_vec());
            let inter: Vec<f64> = dense(&layer.intermediate, &n2).into_iter().map(gelu).collect();
            let o = dense(&layer.output, &inter);
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);
        }
        let fin = norm(&x[..h], &m.final_norm.gamma.to_f32_vec(), &m.final_norm.beta.to_f32_vec());
        all.push(dense(&m.head, &fin));
    }
    all
}

/// Byte accounting of a ViT written out from its config alone.
pub struct Accounting {
    pub config: ModelConfig,
}

impl Accounting {
    fn linears(&self, widths: &[usize]) -> Vec<(usize, usize)> {
        let c = &self.config;
        let h = c.hidden_size;
        let mut v = vec![(h, c.num_channels * c.patch_size * c.patch_size)];
        for &m in widths {
            v.extend([(h, h), (h, h), (h, h), (h, h), (m, h), (h, m)]);
        }
        v.push((c.num_classes, h));
        v
    }

    fn other_f32_params(&self) -> usize {
        let c = &self.config;
        let t = (c.image_size / c.patch_size).pow(2) + 1;
        c.hidden_size + t * c.hidden_size + 2 * c.hidden_size * (2 * c.num_layers + 1)
    }

    pub fn f32_weight_bytes(&self, widths: &[usize]) -> u64 {
        let lin: usize = self.linears(widths).iter().map(|(o, i)| o * i + o).sum();
        4 * (lin + self.other_f32_params()) as u64
    }

    /// Every linear INT8 with f32 bias, per-row scales, per-column factors and
    /// two scalars.
    pub fn int8_weight_bytes(&self, widths: &[usize]) -> u64 {
        let lin: usize = self
            .linears(widths)
            .iter()
            .map(|(o, i)| o * i + 4 * o + 4 * (o + i + 2))
            .sum();
        (lin + 4 * self.other_f32_params()) as u64
    }

    /// Residual stream + f32 scores + MLP intermediate at `mlp_bytes` per element.
    pub fn peak_activation_bytes(&self, widths: &[usize], batch: usize, mlp_bytes: usize) -> u64 {
        let c = &self.config;
        let t = (c.image_size / c.patch_size).pow(2) + 1;
        let max_m = widths.iter().copied().max().unwrap();
        (4 * batch * t * c.hidden_size + 4 * batch * c.num_heads * t * t + mlp_bytes * batch * t * max_m) as u64
    }
}
