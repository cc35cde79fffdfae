//! Parameter and MAC accounting.
//!
//! The same cost formulas drive both the exact integer profiler
//! ([`exact_profile`]) and the differentiable expected accounting
//! ([`expected_sparsity`]); they are written once, generic over [`Count`].
//!
//! Per block, with sequence length `T`, hidden size `d`, `h` heads of width
//! `d_head`, FFN width `d_int`:
//!
//! * attention: `4·T·h·d·d_head + 2·T²·h·d_head` MACs
//! * feed-forward: `2·T·d·d_int` MACs
//! * 1-D conv: `T_out·C_out·C_in·K` MACs
//! * projection to hidden: `T·C_last·d` MACs
//!
//! Parameter counts include biases and layer-norm gains/biases. The task
//! classifier is not part of the architecture and is never counted.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ArchDescriptor, GateValues, GatedModel};

pub const DEFAULT_VIRTUAL_SECONDS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    SizeOverall,
    SizeSeparate,
    MacOverall,
}

impl RegimeKind {
    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::SizeOverall => "size_overall",
            RegimeKind::SizeSeparate => "size_separate",
            RegimeKind::MacOverall => "mac_overall",
        }
    }
}

fn default_virtual_seconds() -> f64 {
    DEFAULT_VIRTUAL_SECONDS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityRegime {
    pub kind: RegimeKind,
    #[serde(default = "default_virtual_seconds")]
    pub virtual_seconds: f64,
}

impl SparsityRegime {
    pub fn new(kind: RegimeKind) -> Self {
        SparsityRegime { kind, virtual_seconds: DEFAULT_VIRTUAL_SECONDS }
    }

    pub fn with_seconds(kind: RegimeKind, virtual_seconds: f64) -> Self {
        SparsityRegime { kind, virtual_seconds }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.virtual_seconds > 0.0 && self.virtual_seconds.is_finite()) {
            return Err(Error::Config(format!("virtual_seconds must be positive, got {}", self.virtual_seconds)));
        }
        Ok(())
    }
}

/// Numbers the cost formulas can be evaluated in.
pub trait Count: Clone {
    fn lit(v: u64) -> Self;
    fn plus(&self, other: &Self) -> Self;
    fn times(&self, other: &Self) -> Self;
    fn times_lit(&self, c: u64) -> Self;
}

impl Count for u128 {
    fn lit(v: u64) -> Self {
        v as u128
    }
    fn plus(&self, other: &Self) -> Self {
        self + other
    }
    fn times(&self, other: &Self) -> Self {
        self * other
    }
    fn times_lit(&self, c: u64) -> Self {
        self * c as u128
    }
}

impl Count for Tensor {
    fn lit(v: u64) -> Self {
        Tensor::scalar(v as f64)
    }
    fn plus(&self, other: &Self) -> Self {
        self.add(other).expect("scalar add")
    }
    fn times(&self, other: &Self) -> Self {
        self.mul(other).expect("scalar mul")
    }
    fn times_lit(&self, c: u64) -> Self {
        self.scale(c as f64)
    }
}

/// Kept-unit counts for every gate group.
#[derive(Debug, Clone)]
pub struct Kept<C> {
    pub conv_out: Vec<C>,
    pub heads: Vec<C>,
    pub ffn: Vec<C>,
    pub hidden: C,
}

impl Kept<u128> {
    pub fn full(desc: &ArchDescriptor) -> Self {
        Kept {
            conv_out: desc.conv_layers.iter().map(|c| c.out_channels as u128).collect(),
            heads: desc.transformer_layers.iter().map(|t| t.heads as u128).collect(),
            ffn: desc.transformer_layers.iter().map(|t| t.ffn_intermediate as u128).collect(),
            hidden: desc.hidden as u128,
        }
    }
}

impl Kept<Tensor> {
    /// Expected kept counts `Σ_j p_j` from per-gate keep probabilities.
    pub fn from_probabilities(p: &GateValues) -> Self {
        Kept {
            conv_out: p.conv.iter().map(Tensor::sum).collect(),
            heads: p.heads.iter().map(Tensor::sum).collect(),
            ffn: p.ffn.iter().map(Tensor::sum).collect(),
            hidden: p.hidden.sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv,
    Projection,
    PositionalConv,
    Attention,
    FeedForward,
    Norm,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Conv => "conv",
            BlockKind::Projection => "projection",
            BlockKind::PositionalConv => "positional_conv",
            BlockKind::Attention => "mha",
            BlockKind::FeedForward => "ffn",
            BlockKind::Norm => "norm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Cnn,
    Transformer,
}

#[derive(Debug, Clone)]
pub struct Block<C> {
    pub id: String,
    pub kind: BlockKind,
    pub component: Component,
    pub kept_units: C,
    pub params: C,
    pub macs: C,
}

/// Per-block parameter and MAC counts for `samples` input samples.
pub fn block_costs<C: Count>(desc: &ArchDescriptor, kept: &Kept<C>, samples: usize) -> Result<Vec<Block<C>>> {
    let lengths = desc.conv_lengths(samples)?;
    let t = lengths.last().copied().unwrap_or(samples) as u64;
    let d = &kept.hidden;
    let mut blocks = Vec::new();

    let mut c_in = C::lit(desc.conv_layers.first().map_or(1, |c| c.in_channels) as u64);
    for (i, spec) in desc.conv_layers.iter().enumerate() {
        let c_out = &kept.conv_out[i];
        let weights = c_out.times(&c_in).times_lit(spec.kernel as u64);
        blocks.push(Block {
            id: format!("conv{i}"),
            kind: BlockKind::Conv,
            component: Component::Cnn,
            kept_units: c_out.clone(),
            params: weights.plus(c_out),
            macs: weights.times_lit(lengths[i] as u64),
        });
        c_in = c_out.clone();
    }

    let proj = c_in.times(d);
    blocks.push(Block {
        id: "projection".into(),
        kind: BlockKind::Projection,
        component: Component::Transformer,
        kept_units: d.clone(),
        params: proj.plus(d),
        macs: proj.times_lit(t),
    });

    if let Some(pc) = desc.positional_conv {
        let per_group = (desc.hidden / pc.groups) as u64;
        let weights = d.times_lit(per_group * pc.kernel as u64);
        blocks.push(Block {
            id: "positional_conv".into(),
            kind: BlockKind::PositionalConv,
            component: Component::Transformer,
            kept_units: d.clone(),
            params: weights.plus(d),
            macs: weights.times_lit(t),
        });
    }

    for (j, spec) in desc.transformer_layers.iter().enumerate() {
        let dh = spec.head_dim as u64;
        let h = &kept.heads[j];
        let hd = h.times(d);
        blocks.push(Block {
            id: format!("layer{j}.mha"),
            kind: BlockKind::Attention,
            component: Component::Transformer,
            kept_units: h.clone(),
            params: hd.times_lit(4 * dh).plus(&h.times_lit(3 * dh)).plus(&d.times_lit(3)),
            macs: hd.times_lit(4 * t * dh).plus(&h.times_lit(2 * t * t * dh)),
        });
        let dint = &kept.ffn[j];
        let ddint = d.times(dint);
        blocks.push(Block {
            id: format!("layer{j}.ffn"),
            kind: BlockKind::FeedForward,
            component: Component::Transformer,
            kept_units: dint.clone(),
            params: ddint.times_lit(2).plus(dint).plus(&d.times_lit(3)),
            macs: ddint.times_lit(2 * t),
        });
    }

    blocks.push(Block {
        id: "encoder_norm".into(),
        kind: BlockKind::Norm,
        component: Component::Transformer,
        kept_units: d.clone(),
        params: d.times_lit(2),
        macs: C::lit(0),
    });
    Ok(blocks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockProfile {
    pub id: String,
    pub kind: BlockKind,
    pub component: Component,
    pub units: u64,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Profile {
    pub samples: usize,
    pub frames: usize,
    pub macs: u64,
    pub params: u64,
    pub blocks: Vec<BlockProfile>,
}

impl Profile {
    fn component_sum(&self, c: Component, f: impl Fn(&BlockProfile) -> u64) -> u64 {
        self.blocks.iter().filter(|b| b.component == c).map(f).sum()
    }

    pub fn cnn_macs(&self) -> u64 {
        self.component_sum(Component::Cnn, |b| b.macs)
    }

    pub fn cnn_params(&self) -> u64 {
        self.component_sum(Component::Cnn, |b| b.params)
    }

    pub fn transformer_macs(&self) -> u64 {
        self.component_sum(Component::Transformer, |b| b.macs)
    }

    pub fn transformer_params(&self) -> u64 {
        self.component_sum(Component::Transformer, |b| b.params)
    }

    pub fn cnn_mac_share(&self) -> f64 {
        self.cnn_macs() as f64 / self.macs as f64
    }

    pub fn cnn_param_share(&self) -> f64 {
        self.cnn_params() as f64 / self.params as f64
    }

    /// `block_id,kind,params,macs,mac_share`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["block_id", "kind", "params", "macs", "mac_share"])?;
        for b in &self.blocks {
            let share = if self.macs == 0 { 0.0 } else { b.macs as f64 / self.macs as f64 };
            w.write_record([b.id.clone(), b.kind.name().into(), b.params.to_string(), b.macs.to_string(), format!("{share:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "total {:.1} GMAC ({} MACs), {:.2} M params; CNN {:.1}% of MACs, {:.2}% of params; Transformer {:.1}% of MACs",
            self.macs as f64 / 1e9,
            self.macs,
            self.params as f64 / 1e6,
            100.0 * self.cnn_mac_share(),
            100.0 * self.cnn_param_share(),
            100.0 * self.transformer_macs() as f64 / self.macs as f64,
        )
    }
}

/// Exact MAC and parameter counts of `desc` for `seconds` of input.
pub fn exact_profile(desc: &ArchDescriptor, seconds: f64) -> Result<Profile> {
    if !(seconds > 0.0) {
        return Err(Error::Config(format!("seconds must be positive, got {seconds}")));
    }
    desc.validate()?;
    let samples = desc.samples_for(seconds);
    let blocks = block_costs(desc, &Kept::full(desc), samples)?;
    let to_u64 = |v: u128| u64::try_from(v).expect("count fits in u64");
    let blocks: Vec<BlockProfile> = blocks
        .into_iter()
        .map(|b| BlockProfile {
            id: b.id,
            kind: b.kind,
            component: b.component,
            units: to_u64(b.kept_units),
            params: to_u64(b.params),
            macs: to_u64(b.macs),
        })
        .collect();
    Ok(Profile {
        samples,
        frames: desc.output_frames(samples)?,
        macs: blocks.iter().map(|b| b.macs).sum(),
        params: blocks.iter().map(|b| b.params).sum(),
        blocks,
    })
}

/// `round((1 − t) · MACs)` of the dense architecture.
pub fn mac_budget_from_sparsity(desc: &ArchDescriptor, target_sparsity: f64, seconds: f64) -> Result<u64> {
    if !(0.0..=1.0).contains(&target_sparsity) {
        return Err(Error::Config(format!("target sparsity {target_sparsity} outside [0, 1]")));
    }
    let macs = exact_profile(desc, seconds)?.macs;
    Ok(((1.0 - target_sparsity) * macs as f64).round() as u64)
}

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub id: String,
    pub kind: BlockKind,
    pub kept_units: f64,
    /// Expected parameters (size regimes) or MACs (MAC regime).
    pub cost: f64,
}

/// Differentiable sparsity under one regime.
#[derive(Debug, Clone)]
pub struct SparsityReport {
    pub regime: SparsityRegime,
    /// Fraction of the regime's cost removed, over the whole model.
    pub overall: Tensor,
    pub cnn: Tensor,
    pub transformer: Tensor,
    pub kept_params: Tensor,
    pub kept_macs: Tensor,
    pub full_params: f64,
    pub full_macs: f64,
    pub per_block: Vec<BlockReport>,
}

impl SparsityReport {
    /// Expected-parameter sparsity regardless of regime.
    pub fn param_sparsity(&self) -> f64 {
        1.0 - self.kept_params.item() / self.full_params
    }

    pub fn mac_sparsity(&self) -> f64 {
        1.0 - self.kept_macs.item() / self.full_macs
    }
}

fn sum_where(blocks: &[Block<Tensor>], pick: impl Fn(&Block<Tensor>) -> Option<&Tensor>) -> Tensor {
    blocks.iter().filter_map(pick).fold(Tensor::scalar(0.0), |acc, t| acc.plus(t))
}

fn one_minus_ratio(kept: &Tensor, full: f64) -> Tensor {
    if full == 0.0 {
        return Tensor::scalar(0.0);
    }
    kept.scale(-1.0 / full).shift(1.0)
}

/// Sparsity with caller-supplied keep probabilities (one tensor per gate group).
pub fn expected_sparsity_from(desc: &ArchDescriptor, keep: &GateValues, regime: SparsityRegime) -> Result<SparsityReport> {
    regime.validate()?;
    let samples = desc.samples_for(regime.virtual_seconds);
    let full = exact_profile(desc, regime.virtual_seconds)?;
    let blocks = block_costs(desc, &Kept::from_probabilities(keep), samples)?;

    let kept_params = sum_where(&blocks, |b| Some(&b.params));
    let kept_macs = sum_where(&blocks, |b| Some(&b.macs));
    let by_mac = regime.kind == RegimeKind::MacOverall;
    let cost = |b: &Block<Tensor>| if by_mac { b.macs.clone() } else { b.params.clone() };
    let kept_cnn = sum_where(&blocks, |b| (b.component == Component::Cnn).then(|| if by_mac { &b.macs } else { &b.params }));
    let kept_trans =
        sum_where(&blocks, |b| (b.component == Component::Transformer).then(|| if by_mac { &b.macs } else { &b.params }));
    let (full_total, full_cnn, full_trans) = if by_mac {
        (full.macs, full.cnn_macs(), full.transformer_macs())
    } else {
        (full.params, full.cnn_params(), full.transformer_params())
    };
    let overall = if by_mac {
        one_minus_ratio(&kept_macs, full_total as f64)
    } else {
        one_minus_ratio(&kept_params, full_total as f64)
    };
    let per_block = blocks
        .iter()
        .map(|b| BlockReport { id: b.id.clone(), kind: b.kind, kept_units: b.kept_units.item(), cost: cost(b).item() })
        .collect();
    Ok(SparsityReport {
        regime,
        overall,
        cnn: one_minus_ratio(&kept_cnn, full_cnn as f64),
        transformer: one_minus_ratio(&kept_trans, full_trans as f64),
        kept_params,
        kept_macs,
        full_params: full.params as f64,
        full_macs: full.macs as f64,
        per_block,
    })
}

/// Current gate keep probabilities for every group of `model`.
pub fn keep_probabilities(model: &GatedModel) -> GateValues {
    GateValues {
        conv: model.conv_gates.iter().map(|g| g.keep_probability()).collect(),
        heads: model.head_gates.iter().map(|g| g.keep_probability()).collect(),
        ffn: model.ffn_gates.iter().map(|g| g.keep_probability()).collect(),
        hidden: model.hidden_gate.keep_probability(),
    }
}

/// Expected sparsity of `model` under `regime`, differentiable w.r.t. every `log α`.
pub fn expected_sparsity(model: &GatedModel, regime: SparsityRegime) -> Result<SparsityReport> {
    expected_sparsity_from(model.descriptor(), &keep_probabilities(model), regime)
}
