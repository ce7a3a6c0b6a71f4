use rand::Rng;

use super::config::Architecture;
use crate::autograd::{Tape, Var};
use crate::discovery::{JointHead, PrototypeStore};
use crate::error::{Error, Result};
use crate::ops::{ConvSpec, BN_EPSILON};
use crate::reparam::{fold_conv_bn, BatchStats, BnMode, ConvBnUnit, DualBranchLayer, FoldedConv, MergeMode, UnitVars};
use crate::tensor::Tensor;

/// One backbone block: either a single folded convolution with its gate
/// vector, or a frozen base paired with a trainable novel branch.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Single { conv: FoldedConv<f32>, gamma: Vec<f32> },
    Dual(DualBranchLayer<f32>),
}

impl Layer {
    pub fn base(&self) -> &FoldedConv<f32> {
        match self {
            Layer::Single { conv, .. } => conv,
            Layer::Dual(d) => &d.base,
        }
    }

    pub fn gamma(&self) -> &[f32] {
        match self {
            Layer::Single { gamma, .. } => gamma,
            Layer::Dual(d) => &d.gate_gamma,
        }
    }

    pub fn spec(&self) -> ConvSpec {
        self.base().spec
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Layer::Single { conv, .. } => conv.forward(x),
            Layer::Dual(d) => d.forward(x),
        }
    }

    /// Trainable and folded entries; running statistics are not counted.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Single { conv, .. } => conv.param_count(),
            Layer::Dual(d) => d.base.param_count() + d.novel.param_count(),
        }
    }
}

fn relu(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.max(0.0))
}

fn global_avg_pool(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [n, c, h, w] = match *t.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::shape("global_avg_pool", "rank", 4, t.rank())),
    };
    let hw = (h * w) as f32;
    let data = t.data().chunks(h * w).map(|ch| ch.iter().sum::<f32>() / hw).collect();
    Tensor::from_vec(&[n, c], data)
}

/// Reshapes flat `[N, D]` samples to the backbone's `[N, C, H, W]` input.
pub fn to_input(arch: &Architecture, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    if x.rank() == 4 {
        return Ok(x.clone());
    }
    if x.rank() != 2 || x.shape()[1] != arch.input_dim() {
        return Err(Error::shape(
            "model_input",
            "sample width",
            arch.input_dim(),
            x.shape().get(1).copied().unwrap_or(0),
        ));
    }
    x.clone().reshape(&arch.input_shape(x.shape()[0]))
}

/// Base network during supervised pre-training: unfolded CONV+BN units.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseNetwork {
    pub arch: Architecture,
    pub units: Vec<ConvBnUnit<f32>>,
    pub head: JointHead<f32>,
}

impl BaseNetwork {
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, num_base: usize, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let units = arch
            .specs()?
            .into_iter()
            .map(|s| ConvBnUnit::he_init(s, BN_EPSILON as f32, rng))
            .collect();
        Ok(Self {
            arch: arch.clone(),
            units,
            head: JointHead::init_base(arch.feature_dim(), num_base, rng),
        })
    }

    /// Features `[N, D]` on the tape; returns per-unit batch statistics in training mode.
    pub fn features_on_tape(
        &self,
        tape: &mut Tape<f32>,
        x: Var,
        vars: &[UnitVars],
        mode: BnMode,
    ) -> Result<(Var, Vec<Option<BatchStats<f32>>>)> {
        let mut h = x;
        let mut stats = Vec::with_capacity(self.units.len());
        for (unit, &v) in self.units.iter().zip(vars) {
            let (y, s) = unit.forward_on_tape(tape, h, v, mode)?;
            h = tape.relu(y);
            stats.push(s);
        }
        Ok((tape.global_avg_pool(h)?, stats))
    }

    /// Folds every unit; the pre-fold BN scales become the gate vectors.
    pub fn fold(&self) -> Result<Model> {
        let layers = self
            .units
            .iter()
            .map(|u| {
                Ok(Layer::Single {
                    conv: fold_conv_bn(u)?,
                    gamma: u.bn.gamma.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            arch: self.arch.clone(),
            layers,
            head: self.head.clone(),
            prototypes: PrototypeStore::new(vec![])?,
            class_counts: vec![self.head.num_base()],
            task_cursor: 0,
        })
    }
}

/// The deployable model: backbone layers, joint head and replay prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
    pub head: JointHead<f32>,
    pub prototypes: PrototypeStore<f32>,
    /// Head columns per task: base classes first, then each novel task.
    pub class_counts: Vec<usize>,
    /// Number of novel tasks completed.
    pub task_cursor: usize,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        let specs = self.arch.specs()?;
        if specs.len() != self.layers.len() {
            return Err(Error::shape("model", "layer count", specs.len(), self.layers.len()));
        }
        for (s, l) in specs.iter().zip(&self.layers) {
            if *s != l.spec() {
                return Err(Error::invalid("model", format!("layer geometry {:?} differs from {:?}", l.spec(), s)));
            }
        }
        self.head.validate()?;
        if self.head.feature_dim() != self.arch.feature_dim() {
            return Err(Error::shape("model", "head feature width", self.arch.feature_dim(), self.head.feature_dim()));
        }
        let total: usize = self.class_counts.iter().sum();
        if total != self.head.num_classes() {
            return Err(Error::shape("model", "head classes", total, self.head.num_classes()));
        }
        Ok(())
    }

    pub fn is_expanded(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Dual(_)))
    }

    pub fn mode(&self) -> Option<MergeMode> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dual(d) => Some(d.mode),
            Layer::Single { .. } => None,
        })
    }

    /// Entries of the backbone (base plus any novel branches).
    pub fn backbone_param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.backbone_param_count() + self.head.param_count()
    }

    /// The folded base convolutions, in layer order.
    pub fn base_convs(&self) -> Vec<FoldedConv<f32>> {
        self.layers.iter().map(|l| l.base().clone()).collect()
    }

    pub fn gammas(&self) -> Vec<Vec<f32>> {
        self.layers.iter().map(|l| l.gamma().to_vec()).collect()
    }

    /// Column range of the classes introduced by task `t` (0 is the base task).
    pub fn task_columns(&self, t: usize) -> std::ops::Range<usize> {
        let start: usize = self.class_counts[..t].iter().sum();
        start..start + self.class_counts[t]
    }

    /// Features `[N, D]` from the full model (every branch, running statistics).
    pub fn features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut h = to_input(&self.arch, x)?;
        for l in &self.layers {
            h = relu(&l.forward(&h)?);
        }
        global_avg_pool(&h)
    }

    /// Features of the base branches alone, i.e. the model as it was before expansion.
    pub fn base_features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut h = to_input(&self.arch, x)?;
        for l in &self.layers {
            h = relu(&l.base().forward(&h)?);
        }
        global_avg_pool(&h)
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.head.logits(&self.features(x)?)
    }

    /// Joint-head argmax per sample; ties go to the lowest column.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.shape()[0])
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Base output and (gated) novel contribution of the last block, before
    /// the activation. Fails on a folded model.
    pub fn last_branch_outputs(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if !self.is_expanded() {
            return Err(Error::State(
                "the model is folded: base and novel branches are no longer separable".into(),
            ));
        }
        let mut h = to_input(&self.arch, x)?;
        let (last, rest) = self.layers.split_last().expect("validated layer list");
        for l in rest {
            h = relu(&l.forward(&h)?);
        }
        match last {
            Layer::Dual(d) => {
                let fb = d.base_forward(&h)?;
                let contribution = d.novel_contribution(&h, &fb)?;
                Ok((fb, contribution))
            }
            Layer::Single { .. } => Err(Error::State("last block has no novel branch".into())),
        }
    }

    /// Registers every novel unit on the tape as trainable.
    pub fn register_novel(&self, tape: &mut Tape<f32>) -> Result<Vec<UnitVars>> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dual(d) => Ok(d.novel.register(tape, true)),
                Layer::Single { .. } => Err(Error::State("model has not been expanded".into())),
            })
            .collect()
    }

    /// Features `[N, D]` of an expanded model on the tape. Base branches and
    /// gates are constants.
    pub fn features_on_tape(
        &self,
        tape: &mut Tape<f32>,
        x: Var,
        vars: &[UnitVars],
        mode: BnMode,
    ) -> Result<(Var, Vec<Option<BatchStats<f32>>>)> {
        if vars.len() != self.layers.len() {
            return Err(Error::shape("features_on_tape", "novel units", self.layers.len(), vars.len()));
        }
        let mut h = x;
        let mut stats = Vec::with_capacity(self.layers.len());
        for (l, &v) in self.layers.iter().zip(vars) {
            let (y, s) = match l {
                Layer::Dual(d) => d.forward_on_tape(tape, h, v, mode)?,
                Layer::Single { conv, .. } => (conv.forward_on_tape(tape, h)?, None),
            };
            h = tape.relu(y);
            stats.push(s);
        }
        Ok((tape.global_avg_pool(h)?, stats))
    }

    /// Adds a novel branch to every block and `num_novel` head columns.
    pub fn expand<R: Rng + ?Sized>(&mut self, num_novel: usize, mode: MergeMode, head_std: f64, rng: &mut R) -> Result<()> {
        if self.is_expanded() {
            return Err(Error::State(
                "model already carries novel branches; merge them before expanding again".into(),
            ));
        }
        if num_novel == 0 {
            return Err(Error::invalid("expand_novel_branch", "a novel task needs at least one class"));
        }
        let layers = std::mem::take(&mut self.layers);
        self.layers = layers
            .into_iter()
            .map(|l| match l {
                Layer::Single { conv, gamma } => {
                    let novel = ConvBnUnit::novel_init(conv.spec, BN_EPSILON as f32, rng);
                    Ok(Layer::Dual(DualBranchLayer::new(conv, novel, gamma, mode)?))
                }
                Layer::Dual(_) => unreachable!("checked above"),
            })
            .collect::<Result<_>>()?;
        self.head.add_novel_columns(num_novel, head_std, rng)?;
        self.class_counts.push(num_novel);
        Ok(())
    }

    /// Folds every novel branch into its base, updates the gates and turns
    /// the novel head columns into known-class columns.
    pub fn merge(&mut self) -> Result<()> {
        if !self.is_expanded() {
            return Err(Error::State("nothing to merge: the model has no novel branches".into()));
        }
        let merged: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dual(d) => d.merge().map(|(conv, gamma)| Layer::Single { conv, gamma }),
                single => Ok(single.clone()),
            })
            .collect::<Result<_>>()?;
        self.layers = merged;
        self.head.absorb_novel()?;
        self.task_cursor += 1;
        Ok(())
    }
}
