//! Binarizing gates and physically removing pruned units.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gates::GateGroup;
use crate::model::{ArchDescriptor, AttentionHead, ConvBlock, EncoderLayer, GateValues, GatedModel, Network};
use crate::sparsity::{exact_profile, BlockKind};

/// Keep flags for every gate group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub conv: Vec<Vec<bool>>,
    pub heads: Vec<Vec<bool>>,
    pub ffn: Vec<Vec<bool>>,
    pub hidden: Vec<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn count(v: &[bool]) -> usize {
    v.iter().filter(|&&k| k).count()
}

fn indices(v: &[bool]) -> Vec<usize> {
    v.iter().enumerate().filter_map(|(i, &k)| k.then_some(i)).collect()
}

fn to_tensor(v: &[bool]) -> Tensor {
    Tensor::new(&[v.len()], v.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()).expect("1-d")
}

impl PruneMask {
    pub fn all_kept(desc: &ArchDescriptor) -> Self {
        PruneMask {
            conv: desc.conv_layers.iter().map(|c| vec![true; c.out_channels]).collect(),
            heads: desc.transformer_layers.iter().map(|t| vec![true; t.heads]).collect(),
            ffn: desc.transformer_layers.iter().map(|t| vec![true; t.ffn_intermediate]).collect(),
            hidden: vec![true; desc.hidden],
            warnings: vec![],
        }
    }

    /// Gate values equal to the mask (1 kept, 0 pruned).
    pub fn gate_values(&self) -> GateValues {
        GateValues {
            conv: self.conv.iter().map(|v| to_tensor(v)).collect(),
            heads: self.heads.iter().map(|v| to_tensor(v)).collect(),
            ffn: self.ffn.iter().map(|v| to_tensor(v)).collect(),
            hidden: to_tensor(&self.hidden),
        }
    }

    /// Arity against `desc`, and at least one kept unit per group.
    pub fn validate(&self, desc: &ArchDescriptor) -> Result<()> {
        let check = |name: String, keep: &[bool], expected: usize| -> Result<()> {
            if keep.len() != expected {
                return Err(Error::Mask { tensor: name, detail: format!("{} flags for {expected} units", keep.len()) });
            }
            if count(keep) == 0 {
                return Err(Error::Mask { tensor: name, detail: "every unit pruned".into() });
            }
            Ok(())
        };
        if self.conv.len() != desc.conv_layers.len() || self.heads.len() != desc.transformer_layers.len() || self.ffn.len() != desc.transformer_layers.len() {
            return Err(Error::Mask { tensor: "mask".into(), detail: "group count differs from architecture".into() });
        }
        for (i, (k, c)) in self.conv.iter().zip(&desc.conv_layers).enumerate() {
            check(format!("conv.{i}.weight"), k, c.out_channels)?;
        }
        for (j, t) in desc.transformer_layers.iter().enumerate() {
            check(format!("layer.{j}.heads"), &self.heads[j], t.heads)?;
            check(format!("layer.{j}.ffn_in.weight"), &self.ffn[j], t.ffn_intermediate)?;
        }
        check("projection.weight".into(), &self.hidden, desc.hidden)
    }

    /// Architecture that remains after removing the pruned units.
    pub fn apply_to(&self, desc: &ArchDescriptor) -> ArchDescriptor {
        let mut out = desc.clone();
        let mut prev = None;
        for (spec, keep) in out.conv_layers.iter_mut().zip(&self.conv) {
            if let Some(p) = prev {
                spec.in_channels = p;
            }
            spec.out_channels = count(keep);
            prev = Some(spec.out_channels);
        }
        for ((spec, h), f) in out.transformer_layers.iter_mut().zip(&self.heads).zip(&self.ffn) {
            spec.heads = count(h);
            spec.ffn_intermediate = count(f);
        }
        out.hidden = count(&self.hidden);
        out
    }

    pub fn kept_units(&self) -> usize {
        self.conv.iter().chain(&self.heads).chain(&self.ffn).map(|v| count(v)).sum::<usize>() + count(&self.hidden)
    }
}

fn binarize_group(group: &GateGroup, threshold: f64, name: String, warnings: &mut Vec<String>) -> Vec<bool> {
    let p = group.keep_probability().to_vec();
    let mut keep: Vec<bool> = p.iter().map(|&v| v >= threshold).collect();
    if count(&keep) == 0 {
        // Keep-one floor: the most probable unit survives.
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        keep[best] = true;
        warnings.push(format!("{name}: all units below threshold {threshold}; kept unit {best} (p = {:.3e})", p[best]));
    }
    keep
}

/// Thresholds every gate group's keep probability, keeping at least one unit per group.
pub fn binarize(model: &GatedModel, threshold: f64) -> PruneMask {
    let mut warnings = Vec::new();
    let conv = model.conv_gates.iter().enumerate().map(|(i, g)| binarize_group(g, threshold, format!("conv{i}"), &mut warnings)).collect();
    let heads = model.head_gates.iter().enumerate().map(|(j, g)| binarize_group(g, threshold, format!("layer{j}.heads"), &mut warnings)).collect();
    let ffn = model.ffn_gates.iter().enumerate().map(|(j, g)| binarize_group(g, threshold, format!("layer{j}.ffn"), &mut warnings)).collect();
    let hidden = binarize_group(&model.hidden_gate, threshold, "hidden".into(), &mut warnings);
    PruneMask { conv, heads, ffn, hidden, warnings }
}

/// Copy of `t` restricted to `keep` indices along `axis`.
fn select(t: &Tensor, axis: usize, keep: &[usize]) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let data = t.data();
    let mut out = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            out.extend_from_slice(&data[(o * n + k) * inner..(o * n + k + 1) * inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    Tensor::param(&new_shape, out).expect("selected shape")
}

fn fresh(t: &Tensor) -> Tensor {
    t.deep_clone_param()
}

/// Removes masked units from a dense network.
pub fn prune_network(net: &Network, mask: &PruneMask) -> Result<Network> {
    mask.validate(&net.descriptor)?;
    let hid = indices(&mask.hidden);
    let conv_keep: Vec<Vec<usize>> = mask.conv.iter().map(|k| indices(k)).collect();

    let conv = net
        .conv
        .iter()
        .enumerate()
        .map(|(i, block)| {
            let mut w = select(&block.weight, 0, &conv_keep[i]);
            if i > 0 {
                w = select(&w, 1, &conv_keep[i - 1]);
            }
            ConvBlock { weight: w, bias: select(&block.bias, 0, &conv_keep[i]) }
        })
        .collect();
    let mut projection = select(&net.projection, 1, &hid);
    if let Some(last) = conv_keep.last() {
        projection = select(&projection, 0, last);
    }

    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let heads = indices(&mask.heads[j])
                .into_iter()
                .map(|k| {
                    let h = &l.heads[k];
                    AttentionHead {
                        wq: select(&h.wq, 0, &hid),
                        bq: fresh(&h.bq),
                        wk: select(&h.wk, 0, &hid),
                        bk: fresh(&h.bk),
                        wv: select(&h.wv, 0, &hid),
                        bv: fresh(&h.bv),
                        wo: select(&h.wo, 1, &hid),
                    }
                })
                .collect();
            let units = indices(&mask.ffn[j]);
            EncoderLayer {
                attn_norm_gain: select(&l.attn_norm_gain, 0, &hid),
                attn_norm_bias: select(&l.attn_norm_bias, 0, &hid),
                heads,
                attn_out_bias: select(&l.attn_out_bias, 0, &hid),
                ffn_norm_gain: select(&l.ffn_norm_gain, 0, &hid),
                ffn_norm_bias: select(&l.ffn_norm_bias, 0, &hid),
                ffn_in: select(&select(&l.ffn_in, 0, &hid), 1, &units),
                ffn_in_bias: select(&l.ffn_in_bias, 0, &units),
                ffn_out: select(&select(&l.ffn_out, 0, &units), 1, &hid),
                ffn_out_bias: select(&l.ffn_out_bias, 0, &hid),
            }
        })
        .collect();

    Ok(Network {
        descriptor: mask.apply_to(&net.descriptor),
        norm_width: net.norm_width,
        num_classes: net.num_classes,
        conv,
        projection,
        projection_bias: select(&net.projection_bias, 0, &hid),
        layers,
        final_norm_gain: select(&net.final_norm_gain, 0, &hid),
        final_norm_bias: select(&net.final_norm_bias, 0, &hid),
        classifier: select(&net.classifier, 0, &hid),
        classifier_bias: fresh(&net.classifier_bias),
    })
}

/// A pruned network with no gate machinery left.
#[derive(Debug, Clone)]
pub struct ExtractedModel {
    pub network: Network,
    /// Architecture before pruning.
    pub original: ArchDescriptor,
    pub provenance: PruneMask,
}

impl ExtractedModel {
    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.network.descriptor
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.network.forward(batch, None)
    }
}

/// Removes the units `mask` prunes from `model`'s network.
pub fn extract(model: &GatedModel, mask: &PruneMask) -> Result<ExtractedModel> {
    Ok(ExtractedModel {
        network: prune_network(&model.network, mask)?,
        original: model.descriptor().clone(),
        provenance: mask.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub layer_kind: &'static str,
    pub index: usize,
    pub kept_units: usize,
    pub original_units: usize,
    pub kept_mac_share: f64,
}

/// One row per conv layer, per attention block, per FFN block, and one for
/// the hidden size. The MAC share is kept MACs over original MACs of the
/// same block (whole model for the hidden row).
pub fn architecture_report(extracted: &ExtractedModel, seconds: f64) -> Result<Vec<ReportRow>> {
    let before = exact_profile(&extracted.original, seconds)?;
    let after = exact_profile(extracted.descriptor(), seconds)?;
    let share = |kept: u64, orig: u64| if orig == 0 { 1.0 } else { kept as f64 / orig as f64 };
    let mut rows = Vec::new();
    let pairs: Vec<_> = before.blocks.iter().zip(&after.blocks).collect();
    let mut conv_i = 0;
    let mut layer_i = [0usize; 2];
    for (b, a) in pairs {
        let (kind, index) = match b.kind {
            BlockKind::Conv => {
                conv_i += 1;
                ("conv_channels", conv_i - 1)
            }
            BlockKind::Attention => {
                layer_i[0] += 1;
                ("attention_heads", layer_i[0] - 1)
            }
            BlockKind::FeedForward => {
                layer_i[1] += 1;
                ("ffn_intermediate", layer_i[1] - 1)
            }
            _ => continue,
        };
        rows.push(ReportRow {
            layer_kind: kind,
            index,
            kept_units: a.units as usize,
            original_units: b.units as usize,
            kept_mac_share: share(a.macs, b.macs),
        });
    }
    rows.push(ReportRow {
        layer_kind: "hidden",
        index: 0,
        kept_units: extracted.descriptor().hidden,
        original_units: extracted.original.hidden,
        kept_mac_share: share(after.macs, before.macs),
    });
    Ok(rows)
}

pub fn write_report<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::gates::HardConcreteParams;
    use crate::model::{toy_descriptor, GateMode};
    use crate::rng::seeded;
    use crate::sparsity::{expected_sparsity_from, RegimeKind, SparsityRegime};

    fn toy_model(seed: u64) -> GatedModel {
        let net = Network::init(&toy_descriptor(), 4, &mut seeded(seed, 1)).unwrap();
        GatedModel::new(net, HardConcreteParams::default()).unwrap()
    }

    fn random_mask(desc: &ArchDescriptor, rng: &mut crate::rng::Rng) -> PruneMask {
        let mut group = |n: usize| {
            let mut v: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            if !v.contains(&true) {
                v[rng.random_range(0..n)] = true;
            }
            v
        };
        PruneMask {
            conv: desc.conv_layers.iter().map(|c| group(c.out_channels)).collect(),
            heads: desc.transformer_layers.iter().map(|t| group(t.heads)).collect(),
            ffn: desc.transformer_layers.iter().map(|t| group(t.ffn_intermediate)).collect(),
            hidden: group(desc.hidden),
            warnings: vec![],
        }
    }

    fn input(rng: &mut crate::rng::Rng, b: usize, t: usize) -> Tensor {
        Tensor::new(&[b, t], (0..b * t).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
        let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        a.data().iter().zip(b.data().iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
    }

    #[test]
    fn saturated_open_gates_keep_everything() {
        let m = toy_model(0);
        for g in m.gate_groups() {
            g.log_alpha.set_data(&vec![40.0; g.len()]);
        }
        let mask = binarize(&m, 0.5);
        assert_eq!(mask, PruneMask::all_kept(m.descriptor()));
    }

    #[test]
    fn emptied_group_keeps_one_unit_with_warning() {
        let m = toy_model(0);
        m.head_gates[1].log_alpha.set_data(&[-40.0, -39.0, -40.0, -40.0]);
        let mask = binarize(&m, 0.5);
        assert_eq!(mask.heads[1], vec![false, true, false, false]);
        assert_eq!(mask.warnings.len(), 1);
        assert!(mask.warnings[0].contains("layer1.heads"));
    }

    #[test]
    fn all_ones_extraction_is_exact() {
        let m = toy_model(1);
        let ex = extract(&m, &PruneMask::all_kept(m.descriptor())).unwrap();
        let x = input(&mut seeded(2, 0), 2, 200);
        let a = ex.network.encode(&x, None).unwrap();
        let b = m.network.encode(&x, None).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn extraction_matches_pinned_gates() {
        let m = toy_model(2);
        let mut rng = seeded(3, 0);
        for _ in 0..10 {
            let mask = random_mask(m.descriptor(), &mut rng);
            let ex = extract(&m, &mask).unwrap();
            let x = input(&mut rng, 2, 200);
            let pinned = m.logits(&x, GateMode::Fixed(&mask.gate_values())).unwrap();
            let pruned = ex.forward(&x).unwrap();
            assert!(max_rel(&pruned, &pinned) < 1e-10);
        }
    }

    #[test]
    fn extracted_profile_matches_pinned_accounting() {
        let m = toy_model(4);
        let mut rng = seeded(5, 0);
        let mask = random_mask(m.descriptor(), &mut rng);
        let ex = extract(&m, &mask).unwrap();
        let regime = SparsityRegime::with_seconds(RegimeKind::MacOverall, 2.0);
        let pinned = expected_sparsity_from(m.descriptor(), &mask.gate_values(), regime).unwrap();
        let p = exact_profile(ex.descriptor(), 2.0).unwrap();
        assert_eq!(pinned.kept_macs.item(), p.macs as f64);
        assert_eq!(pinned.kept_params.item(), p.params as f64);
        assert_eq!(ex.network.parameter_count() as u64, p.params + (mask.hidden.iter().filter(|&&k| k).count() as u64 + 1) * 4);
    }

    #[test]
    fn re_extracting_with_all_ones_is_identity() {
        let m = toy_model(6);
        let mask = random_mask(m.descriptor(), &mut seeded(7, 0));
        let ex = extract(&m, &mask).unwrap();
        let again = prune_network(&ex.network, &PruneMask::all_kept(ex.descriptor())).unwrap();
        assert_eq!(again.descriptor, ex.network.descriptor);
        for ((na, a), (_, b)) in again.named_tensors().iter().zip(ex.network.named_tensors()) {
            assert_eq!(a.to_vec(), b.to_vec(), "{na}");
        }
    }

    #[test]
    fn inconsistent_mask_names_tensor() {
        let m = toy_model(0);
        let mut mask = PruneMask::all_kept(m.descriptor());
        mask.ffn[1].pop();
        match extract(&m, &mask) {
            Err(Error::Mask { tensor, .. }) => assert_eq!(tensor, "layer.1.ffn_in.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn report_shape_for_unpruned_model() {
        let m = toy_model(0);
        let ex = extract(&m, &PruneMask::all_kept(m.descriptor())).unwrap();
        let rows = architecture_report(&ex, 1.0).unwrap();
        assert_eq!(rows.len(), 4 + 2 * 2 + 1);
        assert!(rows.iter().all(|r| r.kept_units == r.original_units && r.kept_mac_share == 1.0));
    }
}
