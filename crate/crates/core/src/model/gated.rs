use super::descriptor::ArchDescriptor;
use super::network::{GateValues, Network};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gates::{GateGroup, HardConcreteParams, UnitKind};
use crate::rng::Rng;

/// A [`Network`] with Hard Concrete gates on conv channels, attention heads,
/// FFN intermediate units and the shared hidden dimension.
#[derive(Debug, Clone)]
pub struct GatedModel {
    pub network: Network,
    pub conv_gates: Vec<GateGroup>,
    pub head_gates: Vec<GateGroup>,
    pub ffn_gates: Vec<GateGroup>,
    pub hidden_gate: GateGroup,
}

/// How gate values are produced for a forward pass.
pub enum GateMode<'a> {
    /// One Hard Concrete sample per gate.
    Train(&'a mut Rng),
    /// Keep probability thresholded to {0, 1}.
    Eval { threshold: f64 },
    /// Caller-supplied values.
    Fixed(&'a GateValues),
}

impl GatedModel {
    /// Attaches fresh gates (`log α = 0`) to `network`.
    pub fn new(network: Network, params: HardConcreteParams) -> Result<Self> {
        params.validate()?;
        let desc = network.descriptor.clone();
        if network.norm_width != desc.hidden {
            return Err(Error::Config("gates can only be attached to an unpruned network".into()));
        }
        let d = desc.hidden;
        let conv_gates = desc
            .conv_layers
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let consumer = desc.conv_layers.get(i + 1).map_or(d, |n| n.out_channels * n.kernel);
                GateGroup::new(c.out_channels, UnitKind::ConvChannel, c.in_channels * c.kernel + 1 + consumer, params)
            })
            .collect();
        let head_gates = desc
            .transformer_layers
            .iter()
            .map(|t| GateGroup::new(t.heads, UnitKind::AttnHead, 4 * d * t.head_dim + 3 * t.head_dim, params))
            .collect();
        let ffn_gates = desc
            .transformer_layers
            .iter()
            .map(|t| GateGroup::new(t.ffn_intermediate, UnitKind::FfnIntermediate, 2 * d + 1, params))
            .collect();
        let per_hidden = desc.frontend_channels()
            + 1
            + desc
                .transformer_layers
                .iter()
                .map(|t| 4 + t.heads * 4 * t.head_dim + 1 + 2 * t.ffn_intermediate + 1)
                .sum::<usize>()
            + 2;
        let hidden_gate = GateGroup::new(d, UnitKind::HiddenDim, per_hidden, params);
        Ok(GatedModel { network, conv_gates, head_gates, ffn_gates, hidden_gate })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.network.descriptor
    }

    /// All gate groups in a fixed order: conv, heads, ffn, hidden.
    pub fn gate_groups(&self) -> Vec<&GateGroup> {
        self.conv_gates
            .iter()
            .chain(&self.head_gates)
            .chain(&self.ffn_gates)
            .chain(std::iter::once(&self.hidden_gate))
            .collect()
    }

    pub fn gate_parameters(&self) -> Vec<Tensor> {
        self.gate_groups().into_iter().map(|g| g.log_alpha.clone()).collect()
    }

    pub fn sample_gates(&self, rng: &mut Rng) -> GateValues {
        GateValues {
            conv: self.conv_gates.iter().map(|g| g.sample(rng)).collect(),
            heads: self.head_gates.iter().map(|g| g.sample(rng)).collect(),
            ffn: self.ffn_gates.iter().map(|g| g.sample(rng)).collect(),
            hidden: self.hidden_gate.sample(rng),
        }
    }

    pub fn deterministic_gates(&self, threshold: f64) -> GateValues {
        GateValues {
            conv: self.conv_gates.iter().map(|g| g.deterministic(threshold)).collect(),
            heads: self.head_gates.iter().map(|g| g.deterministic(threshold)).collect(),
            ffn: self.ffn_gates.iter().map(|g| g.deterministic(threshold)).collect(),
            hidden: self.hidden_gate.deterministic(threshold),
        }
    }

    /// Encoder output `[B, T_out, d]` with gates applied per `mode`.
    pub fn gated_forward(&self, batch: &Tensor, mode: GateMode<'_>) -> Result<Tensor> {
        let gates = match mode {
            GateMode::Train(rng) => self.sample_gates(rng),
            GateMode::Eval { threshold } => self.deterministic_gates(threshold),
            GateMode::Fixed(g) => return self.network.encode(batch, Some(g)),
        };
        self.network.encode(batch, Some(&gates))
    }

    pub fn logits(&self, batch: &Tensor, mode: GateMode<'_>) -> Result<Tensor> {
        self.network.classify(&self.gated_forward(batch, mode)?)
    }

    /// Independent copy with fresh parameter leaves for weights and gates.
    pub fn deep_clone(&self) -> GatedModel {
        let fresh = |g: &GateGroup| GateGroup { log_alpha: g.log_alpha.deep_clone_param(), ..g.clone() };
        GatedModel {
            network: self.network.deep_clone(),
            conv_gates: self.conv_gates.iter().map(fresh).collect(),
            head_gates: self.head_gates.iter().map(fresh).collect(),
            ffn_gates: self.ffn_gates.iter().map(fresh).collect(),
            hidden_gate: fresh(&self.hidden_gate),
        }
    }
}

/// Free-function form of [`GatedModel::gated_forward`].
pub fn gated_forward(model: &GatedModel, batch: &Tensor, mode: GateMode<'_>) -> Result<Tensor> {
    model.gated_forward(batch, mode)
}
