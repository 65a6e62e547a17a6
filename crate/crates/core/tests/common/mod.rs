//! Naive double-precision oracles shared by the integration tests. Nothing
//! here calls into the library's kernels; parameters are only read out of a
//! model's weight store.

#![allow(dead_code)]

use fusionformer::model::Param;
use fusionformer::tensor::Tensor;
use fusionformer::Model;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .zip(b)
                .map(|(wr, &bo)| bo + wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + eps).sqrt() * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

pub struct Bn {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

pub fn batch_norm(x: &Mat, bn: &Bn) -> Mat {
    x.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - bn.mean[c]) / (bn.var[c] + bn.eps).sqrt() * bn.gamma[c] + bn.beta[c])
                .collect()
        })
        .collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn swish(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| v * sigmoid(v)).collect()).collect()
}

pub fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect()
}

pub fn glu(x: &Mat) -> Mat {
    x.iter()
        .map(|r| {
            let h = r.len() / 2;
            (0..h).map(|i| r[i] * sigmoid(r[h + i])).collect()
        })
        .collect()
}

/// `y[t][c] = b[c] + sum_j w[c][j] * x[t + j - pad][c]`, zero outside.
pub fn depthwise(x: &Mat, w: &Mat, b: &[f64], causal: bool) -> Mat {
    let k = w[0].len();
    let pad = if causal { k - 1 } else { k / 2 } as isize;
    let t_len = x.len() as isize;
    (0..x.len())
        .map(|t| {
            (0..b.len())
                .map(|c| {
                    let mut acc = b[c];
                    for j in 0..k {
                        let s = t as isize + j as isize - pad;
                        if s >= 0 && s < t_len {
                            acc += w[c][j] * x[s as usize][c];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Keys visible to query `i` under the floor-division chunk rule.
pub fn chunk_allowed(i: usize, j: usize, chunk: Option<usize>, left: Option<usize>) -> bool {
    let Some(cs) = chunk else { return true };
    let (ci, cj) = (i / cs, j / cs);
    cj <= ci && left.is_none_or(|l| ci - cj <= l)
}

/// Multi-head scaled dot-product attention, one query at a time.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let d = q[0].len();
    let dk = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for (i, qi) in q.iter().enumerate() {
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let keys: Vec<usize> = (0..k.len()).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| cols.clone().map(|c| qi[c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (&j, s) in keys.iter().zip(&scores) {
                let p = (s - m).exp() / z;
                for c in cols.clone() {
                    out[i][c] += p * v[j][c];
                }
            }
        }
    }
    out
}

pub fn positions(t: usize, d: usize) -> Mat {
    (0..t)
        .map(|p| {
            (0..d)
                .map(|c| {
                    let angle = p as f64 / 10000f64.powf((c - c % 2) as f64 / d as f64);
                    if c % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// Kernel-3, stride-2, padding-1 convolution over `[h][w][cin]` with weight
/// `[cout][3][3][cin]`, followed by ReLU.
pub fn conv2d_relu(x: &[Mat], w: &[f64], b: &[f64], cin: usize) -> Vec<Mat> {
    let (h, wd) = (x.len() as isize, x[0].len() as isize);
    let out_len = |n: isize| ((n + 2 - 3) / 2 + 1) as usize;
    let cout = b.len();
    (0..out_len(h))
        .map(|oh| {
            (0..out_len(wd))
                .map(|ow| {
                    (0..cout)
                        .map(|o| {
                            let mut acc = b[o];
                            for i in 0..3 {
                                for j in 0..3 {
                                    let (ih, iw) = (2 * oh as isize + i - 1, 2 * ow as isize + j - 1);
                                    if ih < 0 || iw < 0 || ih >= h || iw >= wd {
                                        continue;
                                    }
                                    for c in 0..cin {
                                        acc += w[((o * 3 + i as usize) * 3 + j as usize) * cin + c]
                                            * x[ih as usize][iw as usize][c];
                                    }
                                }
                            }
                            acc.max(0.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Parameter accessors over an f64 model.
pub struct Params<'a>(pub &'a Model<f64>);

impl Params<'_> {
    fn get(&self, path: &str) -> &Param<f64> {
        self.0.weights.get(path).unwrap_or_else(|| panic!("missing {path}"))
    }

    pub fn linear(&self, path: &str) -> (Mat, Vec<f64>) {
        match self.get(path) {
            Param::Linear(p) => (to_mat(p.weight()), p.bias().data().to_vec()),
            other => panic!("{path} is {}", other.kind_name()),
        }
    }

    pub fn apply_linear(&self, path: &str, x: &Mat) -> Mat {
        let (w, b) = self.linear(path);
        linear(x, &w, &b)
    }

    pub fn layer_norm(&self, path: &str, x: &Mat) -> Mat {
        match self.get(path) {
            Param::LayerNorm(p) => layer_norm(x, p.gamma.data(), p.beta.data(), p.eps),
            other => panic!("{path} is {}", other.kind_name()),
        }
    }

    pub fn bn(&self, path: &str) -> Bn {
        match self.get(path) {
            Param::BatchNorm(p) => Bn {
                gamma: p.gamma.data().to_vec(),
                beta: p.beta.data().to_vec(),
                mean: p.running_mean.data().to_vec(),
                var: p.running_var.data().to_vec(),
                eps: p.eps,
            },
            other => panic!("{path} is {}", other.kind_name()),
        }
    }

    pub fn depthwise(&self, path: &str, x: &Mat, causal: bool) -> Mat {
        match self.get(path) {
            Param::DepthwiseConv(p) => depthwise(x, &to_mat(&p.weight), p.bias.data(), causal),
            other => panic!("{path} is {}", other.kind_name()),
        }
    }

    pub fn conv2d(&self, path: &str) -> (Vec<f64>, Vec<f64>, usize) {
        match self.get(path) {
            Param::Conv2d(p) => (p.weight().data().to_vec(), p.bias().data().to_vec(), p.in_channels()),
            other => panic!("{path} is {}", other.kind_name()),
        }
    }

    pub fn embedding(&self, path: &str) -> Mat {
        match self.get(path) {
            Param::Embedding(t) => to_mat(t),
            other => panic!("{path} is {}", other.kind_name()),
        }
    }
}

/// Subsampling front end plus scaled positions.
pub fn reference_subsample(m: &Params, features: &Mat) -> Mat {
    let d = m.0.config.hidden;
    let mut x: Vec<Mat> = features.iter().map(|r| r.iter().map(|&v| vec![v]).collect()).collect();
    for name in ["conv1", "conv2"] {
        let (w, b, cin) = m.conv2d(&format!("encoder.subsample.{name}"));
        x = conv2d_relu(&x, &w, &b, cin);
    }
    let flat: Mat = x.iter().map(|row| row.iter().flatten().copied().collect()).collect();
    let y = m.apply_linear("encoder.subsample.out", &flat);
    add_positions(&y, d)
}

pub fn add_positions(x: &Mat, d: usize) -> Mat {
    let pe = positions(x.len(), d);
    x.iter()
        .zip(&pe)
        .map(|(r, p)| r.iter().zip(p).map(|(v, e)| v * (d as f64).sqrt() + e).collect())
        .collect()
}

pub fn add(x: &Mat, h: &Mat, scale: f64) -> Mat {
    x.iter()
        .zip(h)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + scale * q).collect())
        .collect()
}

fn mha(m: &Params, prefix: &str, x: &Mat, mem: &Mat, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let q = m.apply_linear(&format!("{prefix}.linear_q"), x);
    let k = m.apply_linear(&format!("{prefix}.linear_k"), mem);
    let v = m.apply_linear(&format!("{prefix}.linear_v"), mem);
    let a = attention(&q, &k, &v, m.0.config.heads, allowed);
    m.apply_linear(&format!("{prefix}.linear_out"), &a)
}

/// One LayerNorm Conformer block written out op by op.
pub fn reference_conformer_ln_block(m: &Params, b: usize, x: &Mat, chunk: Option<usize>, left: Option<usize>) -> Mat {
    let p = format!("encoder.block{b}");
    let causal = m.0.config.causal_conv;
    let ffn = |name: &str, x: &Mat| {
        let n = m.layer_norm(&format!("{p}.{name}.norm"), x);
        let h = swish(&m.apply_linear(&format!("{p}.{name}.linear1"), &n));
        m.apply_linear(&format!("{p}.{name}.linear2"), &h)
    };
    let x = add(x, &ffn("ffn1", x), 0.5);

    let n = m.layer_norm(&format!("{p}.mhsa.norm"), &x);
    let h = mha(m, &format!("{p}.mhsa"), &n, &n, |i, j| chunk_allowed(i, j, chunk, left));
    let x = add(&x, &h, 1.0);

    let n = m.layer_norm(&format!("{p}.conv.norm"), &x);
    let h = glu(&m.apply_linear(&format!("{p}.conv.pointwise1"), &n));
    let h = m.depthwise(&format!("{p}.conv.depthwise"), &h, causal);
    let h = swish(&batch_norm(&h, &m.bn(&format!("{p}.conv.bn"))));
    let h = m.apply_linear(&format!("{p}.conv.pointwise2"), &h);
    let x = add(&x, &h, 1.0);

    let x = add(&x, &ffn("ffn2", &x), 0.5);
    m.layer_norm(&format!("{p}.final_norm"), &x)
}

/// Whole LayerNorm Conformer encoder.
pub fn reference_conformer_ln_encoder(m: &Params, features: &Mat, chunk: Option<usize>, left: Option<usize>) -> Mat {
    let mut x = reference_subsample(m, features);
    for b in 0..m.0.config.num_encoder_blocks {
        x = reference_conformer_ln_block(m, b, &x, chunk, left);
    }
    m.layer_norm("encoder.final_norm", &x)
}

/// FusionFormer encoder with every ReLU removed: the function the model
/// computes whenever all ReLU inputs are positive.
pub fn reference_fusionformer_linear_encoder(m: &Params, features: &Mat) -> Mat {
    let causal = m.0.config.causal_conv;
    let layer = |path: &str, x: &Mat| batch_norm(&m.apply_linear(path, x), &m.bn(&format!("{path}.bn")));
    let mut x = reference_subsample(m, features);
    for b in 0..m.0.config.num_encoder_blocks {
        let p = format!("encoder.block{b}");
        let ffn = |name: &str, x: &Mat| {
            let h = layer(&format!("{p}.{name}.linear1"), x);
            layer(&format!("{p}.{name}.linear2"), &h)
        };
        x = add(&x, &ffn("ffn1", &x), 0.5);
        let q = layer(&format!("{p}.mhsa.linear_q"), &x);
        let k = layer(&format!("{p}.mhsa.linear_k"), &x);
        let v = layer(&format!("{p}.mhsa.linear_v"), &x);
        let a = attention(&q, &k, &v, m.0.config.heads, |_, _| true);
        x = add(&x, &layer(&format!("{p}.mhsa.linear_out"), &a), 1.0);
        let h = layer(&format!("{p}.conv.pointwise1"), &x);
        let dw = format!("{p}.conv.depthwise");
        let h = batch_norm(&m.depthwise(&dw, &h, causal), &m.bn(&format!("{dw}.bn")));
        x = add(&x, &layer(&format!("{p}.conv.pointwise2"), &h), 1.0);
        x = add(&x, &ffn("ffn2", &x), 0.5);
    }
    x
}

/// Population mean and variance over every element, in f64.
pub fn flatten_stats(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}
