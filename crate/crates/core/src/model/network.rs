//! Dense weights of the conv + pre-LN transformer classifier, and its forward
//! pass with optional multiplicative gates.

use rand_distr::{Distribution, Normal};

use super::descriptor::ArchDescriptor;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct ConvBlock {
    /// `[C_out, C_in, K]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionHead {
    /// `[d, d_head]`
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    /// `[d_head, d]`
    pub wo: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub heads: Vec<AttentionHead>,
    pub attn_out_bias: Tensor,
    pub ffn_norm_gain: Tensor,
    pub ffn_norm_bias: Tensor,
    /// `[d, d_int]`
    pub ffn_in: Tensor,
    pub ffn_in_bias: Tensor,
    /// `[d_int, d]`
    pub ffn_out: Tensor,
    pub ffn_out_bias: Tensor,
}

/// Multiplicative gate values for every pruning unit of a [`Network`].
#[derive(Debug, Clone)]
pub struct GateValues {
    /// One `[C_out]` vector per conv layer.
    pub conv: Vec<Tensor>,
    /// One `[heads]` vector per transformer layer.
    pub heads: Vec<Tensor>,
    /// One `[d_int]` vector per transformer layer.
    pub ffn: Vec<Tensor>,
    /// `[d]`, shared by every layer.
    pub hidden: Tensor,
}

impl GateValues {
    pub fn ones(desc: &ArchDescriptor) -> Self {
        GateValues {
            conv: desc.conv_layers.iter().map(|c| Tensor::full(&[c.out_channels], 1.0)).collect(),
            heads: desc.transformer_layers.iter().map(|t| Tensor::full(&[t.heads], 1.0)).collect(),
            ffn: desc.transformer_layers.iter().map(|t| Tensor::full(&[t.ffn_intermediate], 1.0)).collect(),
            hidden: Tensor::full(&[desc.hidden], 1.0),
        }
    }
}

/// Trainable network: conv frontend (conv → GeLU per layer), linear
/// projection to the hidden size, pre-LN transformer layers, final norm,
/// mean pooling over time and a linear classifier.
///
/// Layer norms normalize over `norm_width` entries. For an unpruned network
/// this is the hidden size; after hidden-dimension pruning it stays at the
/// original size so that removed (zero) entries are accounted for exactly.
#[derive(Debug, Clone)]
pub struct Network {
    pub descriptor: ArchDescriptor,
    pub norm_width: usize,
    pub num_classes: usize,
    pub conv: Vec<ConvBlock>,
    /// `[C_last, d]`
    pub projection: Tensor,
    pub projection_bias: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
    /// `[d, classes]`
    pub classifier: Tensor,
    pub classifier_bias: Tensor,
}

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn constant(shape: &[usize], value: f64) -> Tensor {
    Tensor::param(shape, vec![value; shape.iter().product()]).expect("shape")
}

/// Checks a tensor for NaN/inf; reported with the location that produced it.
fn finite(t: Tensor, location: impl FnOnce() -> String) -> Result<Tensor> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(t)
    } else {
        Err(Error::NonFinite { location: location() })
    }
}

impl Network {
    /// Fan-in scaled Gaussian weights, zero biases, unit norm gains.
    pub fn init(descriptor: &ArchDescriptor, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        descriptor.validate()?;
        if descriptor.positional_conv.is_some() {
            return Err(Error::Config("the trainable network has no positional convolution".into()));
        }
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let d = descriptor.hidden;
        let conv = descriptor
            .conv_layers
            .iter()
            .map(|c| ConvBlock {
                weight: normal(rng, &[c.out_channels, c.in_channels, c.kernel], (1.0 / (c.in_channels * c.kernel) as f64).sqrt()),
                bias: constant(&[c.out_channels], 0.0),
            })
            .collect();
        let c_last = descriptor.frontend_channels();
        let projection = normal(rng, &[c_last, d], (1.0 / c_last as f64).sqrt());
        let std_d = (1.0 / d as f64).sqrt();
        let layers = descriptor
            .transformer_layers
            .iter()
            .map(|t| {
                let heads = (0..t.heads)
                    .map(|_| AttentionHead {
                        wq: normal(rng, &[d, t.head_dim], std_d),
                        bq: constant(&[t.head_dim], 0.0),
                        wk: normal(rng, &[d, t.head_dim], std_d),
                        bk: constant(&[t.head_dim], 0.0),
                        wv: normal(rng, &[d, t.head_dim], std_d),
                        bv: constant(&[t.head_dim], 0.0),
                        wo: normal(rng, &[t.head_dim, d], (1.0 / (t.heads * t.head_dim) as f64).sqrt()),
                    })
                    .collect();
                EncoderLayer {
                    attn_norm_gain: constant(&[d], 1.0),
                    attn_norm_bias: constant(&[d], 0.0),
                    heads,
                    attn_out_bias: constant(&[d], 0.0),
                    ffn_norm_gain: constant(&[d], 1.0),
                    ffn_norm_bias: constant(&[d], 0.0),
                    ffn_in: normal(rng, &[d, t.ffn_intermediate], std_d),
                    ffn_in_bias: constant(&[t.ffn_intermediate], 0.0),
                    ffn_out: normal(rng, &[t.ffn_intermediate, d], (1.0 / t.ffn_intermediate as f64).sqrt()),
                    ffn_out_bias: constant(&[d], 0.0),
                }
            })
            .collect();
        Ok(Network {
            descriptor: descriptor.clone(),
            norm_width: d,
            num_classes,
            conv,
            projection,
            projection_bias: constant(&[d], 0.0),
            layers,
            final_norm_gain: constant(&[d], 1.0),
            final_norm_bias: constant(&[d], 0.0),
            classifier: normal(rng, &[d, num_classes], std_d),
            classifier_bias: constant(&[num_classes], 0.0),
        })
    }

    /// Every trainable tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push((format!("conv.{i}.weight"), c.weight.clone()));
            out.push((format!("conv.{i}.bias"), c.bias.clone()));
        }
        out.push(("projection.weight".into(), self.projection.clone()));
        out.push(("projection.bias".into(), self.projection_bias.clone()));
        for (j, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layer.{j}.{n}");
            out.push((p("attn_norm.gain"), l.attn_norm_gain.clone()));
            out.push((p("attn_norm.bias"), l.attn_norm_bias.clone()));
            for (k, h) in l.heads.iter().enumerate() {
                for (n, t) in [("wq", &h.wq), ("bq", &h.bq), ("wk", &h.wk), ("bk", &h.bk), ("wv", &h.wv), ("bv", &h.bv), ("wo", &h.wo)] {
                    out.push((p(&format!("head.{k}.{n}")), t.clone()));
                }
            }
            out.push((p("attn_out.bias"), l.attn_out_bias.clone()));
            out.push((p("ffn_norm.gain"), l.ffn_norm_gain.clone()));
            out.push((p("ffn_norm.bias"), l.ffn_norm_bias.clone()));
            out.push((p("ffn_in.weight"), l.ffn_in.clone()));
            out.push((p("ffn_in.bias"), l.ffn_in_bias.clone()));
            out.push((p("ffn_out.weight"), l.ffn_out.clone()));
            out.push((p("ffn_out.bias"), l.ffn_out_bias.clone()));
        }
        out.push(("final_norm.gain".into(), self.final_norm_gain.clone()));
        out.push(("final_norm.bias".into(), self.final_norm_bias.clone()));
        out.push(("classifier.weight".into(), self.classifier.clone()));
        out.push(("classifier.bias".into(), self.classifier_bias.clone()));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    /// Independent copy with fresh parameter leaves.
    pub fn deep_clone(&self) -> Network {
        let mut copy = self.clone();
        copy.map_tensors(|t| t.deep_clone_param());
        copy
    }

    fn map_tensors(&mut self, mut f: impl FnMut(&Tensor) -> Tensor) {
        for c in &mut self.conv {
            c.weight = f(&c.weight);
            c.bias = f(&c.bias);
        }
        self.projection = f(&self.projection);
        self.projection_bias = f(&self.projection_bias);
        for l in &mut self.layers {
            l.attn_norm_gain = f(&l.attn_norm_gain);
            l.attn_norm_bias = f(&l.attn_norm_bias);
            for h in &mut l.heads {
                for t in [&mut h.wq, &mut h.bq, &mut h.wk, &mut h.bk, &mut h.wv, &mut h.bv, &mut h.wo] {
                    *t = f(t);
                }
            }
            l.attn_out_bias = f(&l.attn_out_bias);
            l.ffn_norm_gain = f(&l.ffn_norm_gain);
            l.ffn_norm_bias = f(&l.ffn_norm_bias);
            l.ffn_in = f(&l.ffn_in);
            l.ffn_in_bias = f(&l.ffn_in_bias);
            l.ffn_out = f(&l.ffn_out);
            l.ffn_out_bias = f(&l.ffn_out_bias);
        }
        self.final_norm_gain = f(&self.final_norm_gain);
        self.final_norm_bias = f(&self.final_norm_bias);
        self.classifier = f(&self.classifier);
        self.classifier_bias = f(&self.classifier_bias);
    }

    /// Encoder output `[B, T_out, d]` for a waveform batch `[B, T_in]`.
    pub fn encode(&self, batch: &Tensor, gates: Option<&GateValues>) -> Result<Tensor> {
        if batch.ndim() != 2 {
            return Err(Error::shape("encode", format!("expected [B, T_in], got {:?}", batch.shape())));
        }
        let (b, t_in) = (batch.shape()[0], batch.shape()[1]);
        let mut h = batch.reshape(&[b, 1, t_in])?;
        for (i, (block, spec)) in self.conv.iter().zip(&self.descriptor.conv_layers).enumerate() {
            h = h.conv1d(&block.weight, spec.stride)?;
            h = h.add(&block.bias.reshape(&[spec.out_channels, 1])?)?.gelu();
            if let Some(g) = gates {
                h = h.mul(&g.conv[i].reshape(&[spec.out_channels, 1])?)?;
            }
            h = finite(h, || format!("conv layer {i}"))?;
        }
        let mut x = h.transpose_last2()?.matmul(&self.projection)?.add(&self.projection_bias)?;
        let hidden_gate = gates.map(|g| &g.hidden);
        let gate = |t: Tensor| -> Result<Tensor> {
            match hidden_gate {
                Some(z) => t.mul(z),
                None => Ok(t),
            }
        };
        x = gate(x)?;
        for (j, layer) in self.layers.iter().enumerate() {
            let head_gates = gates.map(|g| &g.heads[j]);
            let ffn_gates = gates.map(|g| &g.ffn[j]);
            // Attention block; the residual stream is gated on entry.
            let a = gate(x)?;
            let u = gate(self.norm(&a, &layer.attn_norm_gain, &layer.attn_norm_bias)?)?;
            let attn = self.attention(&u, layer, head_gates)?;
            let h = a.add(&attn)?;
            // Feed-forward block.
            let b_in = gate(h)?;
            let v = gate(self.norm(&b_in, &layer.ffn_norm_gain, &layer.ffn_norm_bias)?)?;
            let mut inner = v.matmul(&layer.ffn_in)?.add(&layer.ffn_in_bias)?.gelu();
            if let Some(z) = ffn_gates {
                inner = inner.mul(z)?;
            }
            let ffn = inner.matmul(&layer.ffn_out)?.add(&layer.ffn_out_bias)?;
            x = finite(b_in.add(&ffn)?, || format!("transformer layer {j}"))?;
        }
        let x = gate(x)?;
        gate(self.norm(&x, &self.final_norm_gain, &self.final_norm_bias)?)
    }

    fn norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.norm_width)?.mul(gain)?.add(bias)
    }

    /// `Σ_k z_k · ATT_k(u) + b_o`, with `z_k = 1` when ungated.
    fn attention(&self, u: &Tensor, layer: &EncoderLayer, head_gates: Option<&Tensor>) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (k, head) in layer.heads.iter().enumerate() {
            let d_head = head.wq.shape()[1];
            let q = u.matmul(&head.wq)?.add(&head.bq)?;
            let key = u.matmul(&head.wk)?.add(&head.bk)?;
            let v = u.matmul(&head.wv)?.add(&head.bv)?;
            let scores = q.matmul(&key.transpose_last2()?)?.scale(1.0 / (d_head as f64).sqrt());
            let mut out = scores.softmax()?.matmul(&v)?.matmul(&head.wo)?;
            if let Some(z) = head_gates {
                out = out.mul(&z.slice(0, k, k + 1)?)?;
            }
            acc = Some(match acc {
                None => out,
                Some(a) => a.add(&out)?,
            });
        }
        acc.expect("at least one head").add(&layer.attn_out_bias)
    }

    /// Logits `[B, classes]` from an encoder output.
    pub fn classify(&self, encoded: &Tensor) -> Result<Tensor> {
        encoded.mean_axis(1)?.matmul(&self.classifier)?.add(&self.classifier_bias)
    }

    pub fn forward(&self, batch: &Tensor, gates: Option<&GateValues>) -> Result<Tensor> {
        self.classify(&self.encode(batch, gates)?)
    }
}

/// Mean cross-entropy of `logits [B, C]` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b || labels.iter().any(|&y| y >= c) {
        return Err(Error::shape("cross_entropy", format!("{b} rows × {c} classes vs labels {labels:?}")));
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let onehot = Tensor::new(&[b, c], onehot)?;
    Ok(logits.log_softmax()?.mul(&onehot)?.sum().scale(-1.0 / b as f64))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let data = logits.data();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &data[i * c..(i + 1) * c];
            let best = (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            best == y
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}
