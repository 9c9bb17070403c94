//! The expandable model: a three-block base-layer, one residual expand-layer
//! per task, an MLP adapt-layer and either the fixed ETF head or a trainable
//! fully connected head (ablation).

mod checkpoint;
mod layers;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use layers::{AdaptLayer, Linear, ResidualBlock};

use crate::diffcore::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::EtfClassifier;

pub const BASE_BLOCKS: usize = 3;

/// How a new expand-layer is fed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wiring {
    /// `[base output, previous expand output]`
    #[default]
    Parallel,
    /// previous expand output only
    Serial,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Etf,
    Fc,
}

impl std::fmt::Display for Wiring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Wiring::Parallel => "parallel",
            Wiring::Serial => "serial",
        })
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Etf => "etf",
            HeadKind::Fc => "fc",
        })
    }
}

impl std::str::FromStr for Wiring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Wiring::Parallel),
            "serial" => Ok(Wiring::Serial),
            other => Err(Error::config("wiring", format!("expected parallel or serial, got `{other}`"))),
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "etf" => Ok(HeadKind::Etf),
            "fc" => Ok(HeadKind::Fc),
            other => Err(Error::config("head", format!("expected etf or fc, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    /// Width of the base-layer and of every expand-layer output.
    pub width: usize,
    /// Classifier dimension `d`.
    pub head_dim: usize,
    pub adapt: bool,
    pub wiring: Wiring,
    pub head: HeadKind,
    /// Prototype norm budget `E_W` of the ETF head.
    pub etf_budget: f64,
    /// Feature norm budget `E_Z`; the FC head rescales its input to it.
    pub feature_budget: f64,
    pub seed: u64,
}

impl ArchConfig {
    /// Width of the representation the head consumes.
    pub fn head_input_dim(&self) -> usize {
        if self.adapt {
            self.head_dim
        } else {
            self.width
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("dataset", "input dimension must be positive"));
        }
        if self.width == 0 {
            return Err(Error::config("model.width", "must be positive"));
        }
        if self.head_dim == 0 {
            return Err(Error::config("model.etf_dim", "must be positive"));
        }
        if !self.adapt && self.head == HeadKind::Etf && self.head_dim != self.width {
            return Err(Error::config(
                "model.etf_dim",
                format!("without an adapt-layer the ETF dimension must equal model.width ({})", self.width),
            ));
        }
        if !(self.etf_budget > 0.0 && self.etf_budget.is_finite()) {
            return Err(Error::config("loss.E_W", "must be positive"));
        }
        if !(self.feature_budget > 0.0 && self.feature_budget.is_finite()) {
            return Err(Error::config("loss.E_Z", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Etf(EtfClassifier),
    Fc { linear: Linear, class_ids: Vec<usize> },
}

impl Head {
    pub fn class_ids(&self) -> &[usize] {
        match self {
            Head::Etf(e) => e.class_ids(),
            Head::Fc { class_ids, .. } => class_ids,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids().len()
    }

    pub fn column_of(&self, class_id: usize) -> Option<usize> {
        match self {
            Head::Etf(e) => e.column_of(class_id),
            Head::Fc { class_ids, .. } => class_ids.iter().position(|&c| c == class_id),
        }
    }

    pub fn etf(&self) -> Option<&EtfClassifier> {
        match self {
            Head::Etf(e) => Some(e),
            Head::Fc { .. } => None,
        }
    }
}

/// Per-component scalar parameter counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub base: usize,
    pub expands: usize,
    pub adapt: usize,
    /// ETF prototypes are counted although they are never trained.
    pub head: usize,
    pub total: usize,
    pub trainable: usize,
}

/// Tape handles produced by one forward pass at a given stage.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub base: Var,
    /// Outputs of expand-layers `0..=stage`, in order.
    pub expands: Vec<Var>,
    /// Representation fed to the head (adapt output, or the current expand
    /// output when the adapt-layer is disabled).
    pub adapted: Var,
    pub logits: Var,
}

impl StageOutputs {
    pub fn current(&self) -> Var {
        *self.expands.last().expect("at least one expand-layer")
    }

    /// Previous expand output; the base output at stage 0.
    pub fn previous(&self) -> Var {
        if self.expands.len() >= 2 {
            self.expands[self.expands.len() - 2]
        } else {
            self.base
        }
    }

    /// Consecutive expand-layer pairs; empty at the base task.
    pub fn distill_pairs(&self) -> Vec<(Var, Var)> {
        self.expands.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub store: ParamStore,
    arch: ArchConfig,
    stem: Option<Linear>,
    base: Vec<ResidualBlock>,
    expands: Vec<ResidualBlock>,
    adapt: Option<AdaptLayer>,
    head: Head,
    training: bool,
}

impl ModelState {
    /// Creates the base-layer, adapt-layer and a head over `class_ids`. No
    /// expand-layer exists yet.
    pub fn new(arch: ArchConfig, class_ids: &[usize]) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let seed = arch.seed;
        let stem = (arch.input_dim != arch.width).then(|| Linear::new(&mut store, "base.stem", arch.input_dim, arch.width, true, seed));
        let base = (0..BASE_BLOCKS)
            .map(|i| ResidualBlock::new(&mut store, &format!("base.block{i}"), arch.width, arch.width, seed))
            .collect();
        let adapt = arch.adapt.then(|| AdaptLayer::new(&mut store, arch.width, arch.head_dim, seed));
        let head = match arch.head {
            HeadKind::Etf => {
                let etf = EtfClassifier::build(class_ids.len(), arch.head_dim, arch.etf_budget, seed)?
                    .with_class_ids(class_ids.to_vec())?;
                Head::Etf(etf)
            }
            HeadKind::Fc => {
                if class_ids.is_empty() {
                    return Err(Error::Contract("head needs at least one class".into()));
                }
                let linear = Linear::new(&mut store, "head.fc", arch.head_input_dim(), class_ids.len(), true, seed);
                Head::Fc {
                    linear,
                    class_ids: class_ids.to_vec(),
                }
            }
        };
        Ok(ModelState {
            store,
            arch,
            stem,
            base,
            expands: Vec::new(),
            adapt,
            head,
            training: false,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn num_expands(&self) -> usize {
        self.expands.len()
    }

    pub fn expand_layers(&self) -> &[ResidualBlock] {
        &self.expands
    }

    pub fn adapt_layer(&self) -> Option<&AdaptLayer> {
        self.adapt.as_ref()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn base_params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.stem.iter().flat_map(Linear::params).collect();
        p.extend(self.base.iter().flat_map(ResidualBlock::params));
        p
    }

    fn expand_input_dim(&self, index: usize) -> usize {
        match (index, self.arch.wiring) {
            (0, _) | (_, Wiring::Serial) => self.arch.width,
            (_, Wiring::Parallel) => 2 * self.arch.width,
        }
    }

    /// Appends a trainable expand-layer. When earlier expand-layers exist the
    /// base-layer and all of them are frozen first. The new layer starts as a
    /// copy of the previous stage's output, so predictions are unchanged
    /// until it trains.
    pub fn add_expand_layer(&mut self) -> Result<()> {
        if self.training {
            return Err(Error::Protocol("add_expand_layer called while a task is training".into()));
        }
        if !self.expands.is_empty() {
            for id in self.base_params() {
                self.store.set_frozen(id, true);
            }
            for id in self.expands.iter().flat_map(ResidualBlock::params).collect::<Vec<_>>() {
                self.store.set_frozen(id, true);
            }
        }
        let index = self.expands.len();
        let in_dim = self.expand_input_dim(index);
        let blk = ResidualBlock::continuation(
            &mut self.store,
            &format!("expand{index}"),
            in_dim,
            self.arch.width,
            self.arch.seed,
        );
        self.expands.push(blk);
        Ok(())
    }

    /// Adds classes to the head. The ETF frame is regenerated with stable
    /// columns for old classes; the FC head gets new output columns.
    pub fn grow_head(&mut self, new_ids: &[usize]) -> Result<()> {
        if self.training {
            return Err(Error::Protocol("grow_head called while a task is training".into()));
        }
        match &mut self.head {
            Head::Etf(etf) => *etf = etf.expand_with_ids(new_ids)?,
            Head::Fc { linear, class_ids } => {
                if let Some(dup) = new_ids.iter().find(|id| class_ids.contains(id)) {
                    return Err(Error::Contract(format!("class {dup} is already mapped")));
                }
                let old_k = class_ids.len();
                let new_k = old_k + new_ids.len();
                let d = linear.in_dim;
                let wname = format!("head.fc.weight@{new_k}");
                let init = layers::kaiming_uniform(&wname, d, new_k, self.arch.seed);
                let old_w = self.store.get(linear.weight).value.clone();
                let mut w = vec![0.0; d * new_k];
                for i in 0..d {
                    for j in 0..new_k {
                        w[i * new_k + j] = if j < old_k { old_w.get(i, j) } else { init[i * new_k + j] };
                    }
                }
                self.store.replace_value(linear.weight, Tensor::new(vec![d, new_k], w)?);
                if let Some(b) = linear.bias {
                    let mut bias = self.store.get(b).value.data().to_vec();
                    bias.resize(new_k, 0.0);
                    self.store.replace_value(b, Tensor::vector(bias));
                }
                linear.out_dim = new_k;
                class_ids.extend_from_slice(new_ids);
            }
        }
        Ok(())
    }

    pub fn begin_task(&mut self) -> Result<()> {
        if self.expands.is_empty() {
            return Err(Error::Protocol("a task needs at least one expand-layer".into()));
        }
        self.training = true;
        Ok(())
    }

    pub fn end_task(&mut self) {
        self.training = false;
    }

    /// `mu_b`: stem (when the input width differs) and three residual blocks.
    pub fn forward_base(&self, tape: &mut Tape, bind: &mut Bindings, x: Var) -> Result<Var> {
        let width = tape.shape(x).last().copied().unwrap_or(0);
        if width != self.arch.input_dim {
            return Err(Error::dim("forward_base", tape.shape(x), &[self.arch.input_dim]));
        }
        let mut h = match &self.stem {
            Some(s) => s.forward(&self.store, tape, bind, x)?,
            None => x,
        };
        for blk in &self.base {
            h = blk.forward(&self.store, tape, bind, h)?;
        }
        Ok(h)
    }

    pub fn adapt_forward(&self, tape: &mut Tape, bind: &mut Bindings, mu_e: Var) -> Result<Var> {
        match &self.adapt {
            Some(a) => a.forward(&self.store, tape, bind, mu_e),
            None => Ok(mu_e),
        }
    }

    pub fn head_forward(&self, tape: &mut Tape, bind: &mut Bindings, z: Var) -> Result<Var> {
        match &self.head {
            Head::Etf(etf) => {
                let w = tape.constant(etf.weights().clone());
                tape.matmul(z, w)
            }
            Head::Fc { linear, .. } => {
                let z = tape.clip_norm(z, self.arch.feature_budget.sqrt())?;
                linear.forward(&self.store, tape, bind, z)
            }
        }
    }

    /// Full forward pass using expand-layers `0..=stage`.
    pub fn forward_stage(&self, tape: &mut Tape, bind: &mut Bindings, x: Var, stage: usize) -> Result<StageOutputs> {
        if stage >= self.expands.len() {
            return Err(Error::Protocol(format!(
                "stage {stage} out of range: {} expand-layers",
                self.expands.len()
            )));
        }
        let base = self.forward_base(tape, bind, x)?;
        let mut expands = Vec::with_capacity(stage + 1);
        let mut prev = base;
        for (i, blk) in self.expands[..=stage].iter().enumerate() {
            let input = match (i, self.arch.wiring) {
                (0, _) | (_, Wiring::Serial) => prev,
                (_, Wiring::Parallel) => tape.concat(base, prev)?,
            };
            prev = blk.forward(&self.store, tape, bind, input)?;
            expands.push(prev);
        }
        let adapted = self.adapt_forward(tape, bind, prev)?;
        let logits = self.head_forward(tape, bind, adapted)?;
        Ok(StageOutputs {
            base,
            expands,
            adapted,
            logits,
        })
    }

    /// Forward pass without gradients; the current stage is the last
    /// expand-layer.
    pub fn infer(&self, x: &Tensor) -> Result<(Tape, StageOutputs)> {
        let mut tape = Tape::new();
        let mut bind = Bindings::no_grad();
        let xv = tape.constant(x.clone());
        let stage = self.expands.len().checked_sub(1).ok_or_else(|| Error::Protocol("no expand-layer".into()))?;
        let out = self.forward_stage(&mut tape, &mut bind, xv, stage)?;
        Ok((tape, out))
    }

    /// Predicted class ids (argmax of the logits, ties to the lowest id).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (tape, out) = self.infer(x)?;
        let logits = tape.value(out.logits);
        let ids = self.head.class_ids();
        Ok((0..logits.rows())
            .map(|i| crate::geometry::argmax_lowest_id(logits.row(i), ids))
            .collect())
    }

    pub fn param_count(&self) -> ParamCount {
        let base = self.stem.as_ref().map_or(0, Linear::param_count)
            + self.base.iter().map(ResidualBlock::param_count).sum::<usize>();
        let expands = self.expands.iter().map(ResidualBlock::param_count).sum();
        let adapt = self.adapt.as_ref().map_or(0, AdaptLayer::param_count);
        let head = match &self.head {
            Head::Etf(e) => e.dim() * e.num_classes(),
            Head::Fc { linear, .. } => linear.param_count(),
        };
        ParamCount {
            base,
            expands,
            adapt,
            head,
            total: base + expands + adapt + head,
            trainable: self.store.trainable_count(),
        }
    }

    /// SHA-256 over the names and raw bits of every frozen parameter.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter().filter(|(_, p)| p.frozen) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub(crate) fn from_parts(
        store: ParamStore,
        arch: ArchConfig,
        num_expands: usize,
        head_classes: Vec<usize>,
    ) -> Result<Self> {
        let mut m = ModelState::new(arch, &head_classes)?;
        for _ in 0..num_expands {
            let index = m.expands.len();
            let in_dim = m.expand_input_dim(index);
            let blk = ResidualBlock::continuation(&mut m.store, &format!("expand{index}"), in_dim, m.arch.width, m.arch.seed);
            m.expands.push(blk);
        }
        if store.len() != m.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, architecture expects {}",
                store.len(),
                m.store.len()
            )));
        }
        for (id, p) in store.iter() {
            let mine = m.store.get(id);
            if mine.name != p.name || mine.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        m.store = store;
        Ok(m)
    }
}
