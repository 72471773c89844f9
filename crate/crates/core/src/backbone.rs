//! ResNet-style host networks with LHC insertion points.
//!
//! A [`BackboneSpec`] describes a pre-activation residual network: a stem
//! convolution (optionally strided and followed by 2×2 pooling), a list of
//! stages of basic residual units, global average pooling and a dense
//! classifier. LHC blocks can be inserted after the stem or after any stage,
//! either as plain residuals `x + LHC(x)` or gated as `x + tanh(θ)·LHC(x)`.
//!
//! The full-scale spec ([`BackboneSpec::full`]) is used for parameter
//! accounting and shape checks. [`TinyNet`] trains specs without batch
//! normalisation and with a unit-stride stem; stage downsampling there is a
//! 2×2 max pool.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, Precision};

use crate::error::{Error, Result};
use crate::lhc::{lhc_branch, LhcConfig, LhcParams, LhcWeights};
use crate::seed::{derive_seed, stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SPEC_SCHEMA_VERSION: u32 = 1;

/// Initial gate values θ for the gated five-block network.
pub const GATED_THETA_INIT: [f64; 5] = [0.0, 0.0, 0.0, -1.0, -0.5];

/// Host-network size reported for the pretrained 34-layer residual network
/// (trunk plus its classifier head). The trunk alone is counted exactly from
/// the spec; the head behind this figure is not described layer by layer.
pub const RESNET34_REPORTED_PARAMS: u64 = 27_600_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 2×2 stride-2 pooling after the convolution.
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub filters: usize,
    pub blocks: usize,
    /// Halve the spatial size on entry.
    pub downsample: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Stem,
    Stage(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub after: Position,
    pub lhc: LhcConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GateMode {
    Plain,
    /// One learnable θ per insertion, in insertion order.
    Gated { theta: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub schema_version: u32,
    pub name: String,
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub batch_norm: bool,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub insertions: Vec<Insertion>,
    pub gate: GateMode,
    pub seed: u64,
    /// Overrides the computed host size in the census when set.
    #[serde(default)]
    pub reported_backbone_params: Option<u64>,
}

impl BackboneSpec {
    /// 34-layer pre-activation residual network on 224×224×3 input with the
    /// five LHC blocks of the reference configuration.
    pub fn full() -> Self {
        let lhc = |n, d, shape| LhcConfig::new(n, d, 3, 1.0, 3, shape);
        Self {
            schema_version: SPEC_SCHEMA_VERSION,
            name: "resnet34v2-lhc".into(),
            input_shape: [224, 224, 3],
            classes: 7,
            batch_norm: true,
            stem: StemSpec {
                filters: 64,
                kernel: 7,
                stride: 2,
                pool: true,
            },
            stages: vec![
                StageSpec { filters: 64, blocks: 3, downsample: false },
                StageSpec { filters: 128, blocks: 4, downsample: true },
                StageSpec { filters: 256, blocks: 6, downsample: true },
                StageSpec { filters: 512, blocks: 3, downsample: true },
            ],
            insertions: vec![
                Insertion { after: Position::Stem, lhc: lhc(8, 196, [56, 56, 64]) },
                Insertion { after: Position::Stage(0), lhc: lhc(8, 196, [56, 56, 64]) },
                Insertion { after: Position::Stage(1), lhc: lhc(7, 56, [28, 28, 128]) },
                Insertion { after: Position::Stage(2), lhc: lhc(7, 14, [14, 14, 256]) },
                Insertion { after: Position::Stage(3), lhc: lhc(1, 25, [7, 7, 512]) },
            ],
            gate: GateMode::Plain,
            seed: 0,
            reported_backbone_params: Some(RESNET34_REPORTED_PARAMS),
        }
    }

    /// [`BackboneSpec::full`] with tanh gates initialised to [`GATED_THETA_INIT`].
    pub fn full_gated() -> Self {
        Self {
            name: "resnet34v2-lhc-gated".into(),
            gate: GateMode::Gated {
                theta: GATED_THETA_INIT.to_vec(),
            },
            ..Self::full()
        }
    }

    /// Desk-scale network: 8-filter stem, two single-unit stages (8 and 16
    /// filters, the second downsampling), one LHC block after the stem.
    pub fn tiny(input_shape: [usize; 3], classes: usize, seed: u64) -> Self {
        let [h, w, _] = input_shape;
        let heads = if (h * w) % 4 == 0 { 4 } else { 1 };
        let dim = (h * w / (2 * heads)).max(2);
        Self {
            schema_version: SPEC_SCHEMA_VERSION,
            name: "tiny-lhc".into(),
            input_shape,
            classes,
            batch_norm: false,
            stem: StemSpec {
                filters: 8,
                kernel: 3,
                stride: 1,
                pool: false,
            },
            stages: vec![
                StageSpec { filters: 8, blocks: 1, downsample: false },
                StageSpec { filters: 16, blocks: 1, downsample: true },
            ],
            insertions: vec![Insertion {
                after: Position::Stem,
                lhc: LhcConfig::new(heads, dim, 3, 1.0, 3, [h, w, 8]),
            }],
            gate: GateMode::Plain,
            seed,
            reported_backbone_params: None,
        }
    }

    /// Feature-map shape after the stem and after each stage.
    pub fn feature_shapes(&self) -> Result<([usize; 3], Vec<[usize; 3]>)> {
        let [h, w, _] = self.input_shape;
        if self.stem.stride == 0 {
            return Err(Error::config("stem stride must be positive"));
        }
        let (mut h, mut w) = (h.div_ceil(self.stem.stride), w.div_ceil(self.stem.stride));
        if self.stem.pool {
            (h, w) = (h.div_ceil(2), w.div_ceil(2));
        }
        let stem = [h, w, self.stem.filters];
        let mut stages = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            if st.downsample {
                (h, w) = (h.div_ceil(2), w.div_ceil(2));
            }
            stages.push([h, w, st.filters]);
        }
        Ok((stem, stages))
    }

    pub fn shape_at(&self, pos: Position) -> Result<[usize; 3]> {
        let (stem, stages) = self.feature_shapes()?;
        match pos {
            Position::Stem => Ok(stem),
            Position::Stage(i) => stages
                .get(i)
                .copied()
                .ok_or_else(|| Error::config(format!("no stage {i}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SPEC_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported spec schema version {}",
                self.schema_version
            )));
        }
        if self.input_shape.contains(&0) || self.classes == 0 {
            return Err(Error::config("input shape and class count must be positive"));
        }
        if self.stem.filters == 0 || self.stem.kernel.is_multiple_of(2) {
            return Err(Error::config("stem needs filters and an odd kernel"));
        }
        if self.stages.iter().any(|s| s.filters == 0 || s.blocks == 0) {
            return Err(Error::config("every stage needs filters and at least one unit"));
        }
        let mut last = None;
        for (i, ins) in self.insertions.iter().enumerate() {
            ins.lhc.validate()?;
            let shape = self.shape_at(ins.after)?;
            if shape != ins.lhc.input_shape {
                return Err(Error::config(format!(
                    "insertion {i} after {:?}: feature map is {shape:?}, LHC expects {:?}",
                    ins.after, ins.lhc.input_shape
                )));
            }
            let order = position_order(ins.after);
            if last.is_some_and(|l| order <= l) {
                return Err(Error::config("insertions must be in network order, one per position"));
            }
            last = Some(order);
        }
        if let GateMode::Gated { theta } = &self.gate {
            if theta.len() != self.insertions.len() {
                return Err(Error::config(format!(
                    "{} gate values for {} insertions",
                    theta.len(),
                    self.insertions.len()
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    fn gate_count(&self) -> usize {
        match &self.gate {
            GateMode::Plain => 0,
            GateMode::Gated { theta } => theta.len(),
        }
    }
}

fn position_order(p: Position) -> usize {
    match p {
        Position::Stem => 0,
        Position::Stage(i) => i + 1,
    }
}

/// Exact parameter census of a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCensus {
    pub total: u64,
    /// Host parameters used for the share; the reported figure when the spec
    /// carries one, otherwise [`ParamCensus::backbone_computed`].
    pub backbone_only: u64,
    /// Host parameters counted layer by layer from the spec.
    pub backbone_computed: u64,
    pub attention_only: u64,
    pub gate_params: u64,
    pub attention_share: f64,
    /// Per-insertion attention parameter counts.
    pub per_block: Vec<u64>,
}

fn conv_params(k: usize, cin: usize, cout: usize, bias: bool) -> u64 {
    (k * k * cin * cout + if bias { cout } else { 0 }) as u64
}

/// Host parameters of a spec: convolutions, projections, batch-norm scale
/// and shift (when enabled) and the dense classifier.
pub fn backbone_param_count(spec: &BackboneSpec) -> u64 {
    let bias = !spec.batch_norm;
    let bn = |c: usize| if spec.batch_norm { 2 * c as u64 } else { 0 };
    let mut total = conv_params(spec.stem.kernel, spec.input_shape[2], spec.stem.filters, bias);
    let mut cin = spec.stem.filters;
    for st in &spec.stages {
        for u in 0..st.blocks {
            let inp = if u == 0 { cin } else { st.filters };
            total += bn(inp) + conv_params(3, inp, st.filters, bias);
            total += bn(st.filters) + conv_params(3, st.filters, st.filters, bias);
            if inp != st.filters {
                total += conv_params(1, inp, st.filters, bias);
            }
        }
        cin = st.filters;
    }
    total += bn(cin);
    total + (cin * spec.classes + spec.classes) as u64
}

pub fn count_params(spec: &BackboneSpec) -> Result<ParamCensus> {
    spec.validate()?;
    let per_block: Vec<u64> = spec.insertions.iter().map(|i| i.lhc.param_count()).collect();
    let attention_only: u64 = per_block.iter().sum();
    let backbone_computed = backbone_param_count(spec);
    let backbone_only = spec.reported_backbone_params.unwrap_or(backbone_computed);
    let gate_params = spec.gate_count() as u64;
    let total = backbone_only + attention_only + gate_params;
    Ok(ParamCensus {
        total,
        backbone_only,
        backbone_computed,
        attention_only,
        gate_params,
        attention_share: attention_only as f64 / total as f64,
        per_block,
    })
}

/// `x + tanh(θ)·branch` with θ a single-element node.
pub fn gated_residual(tape: &mut Tape, x: Var, branch: Var, theta: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(branch) {
        return Err(Error::shape("gated_residual", tape.shape(x), tape.shape(branch)));
    }
    let gate = tape.tanh(theta);
    let scaled = tape.mul_by_scalar(branch, gate)?;
    tape.add(x, scaled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: T,
    pub bias: T,
}

/// Pre-activation basic unit: `shortcut(x) + conv2(relu(conv1(relu(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub proj: Option<ConvParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    pub weight: T,
    pub bias: T,
}

/// Every trainable tensor of a [`TinyNet`], generic over storage.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub stem: ConvParams<T>,
    pub stages: Vec<Vec<UnitParams<T>>>,
    pub lhc: Vec<LhcParams<T>>,
    pub gates: Vec<T>,
    pub head: DenseParams<T>,
}

impl<T> ConvParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvParams<U> {
        ConvParams {
            kernel: f(&self.kernel),
            bias: f(&self.bias),
        }
    }
}

impl<T> NetParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> NetParams<U> {
        NetParams {
            stem: self.stem.map(&mut f),
            stages: self
                .stages
                .iter()
                .map(|units| {
                    units
                        .iter()
                        .map(|u| UnitParams {
                            conv1: u.conv1.map(&mut f),
                            conv2: u.conv2.map(&mut f),
                            proj: u.proj.as_ref().map(|p| p.map(&mut f)),
                        })
                        .collect()
                })
                .collect(),
            lhc: self.lhc.iter().map(|b| b.map(&mut f)).collect(),
            gates: self.gates.iter().map(&mut f).collect(),
            head: DenseParams {
                weight: f(&self.head.weight),
                bias: f(&self.head.bias),
            },
        }
    }

    /// Checkpoint names in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("stem.kernel".to_string(), &self.stem.kernel),
            ("stem.bias".to_string(), &self.stem.bias),
        ];
        for (s, units) in self.stages.iter().enumerate() {
            for (u, unit) in units.iter().enumerate() {
                let p = format!("stage{s}.unit{u}");
                out.push((format!("{p}.conv1.kernel"), &unit.conv1.kernel));
                out.push((format!("{p}.conv1.bias"), &unit.conv1.bias));
                out.push((format!("{p}.conv2.kernel"), &unit.conv2.kernel));
                out.push((format!("{p}.conv2.bias"), &unit.conv2.bias));
                if let Some(proj) = &unit.proj {
                    out.push((format!("{p}.proj.kernel"), &proj.kernel));
                    out.push((format!("{p}.proj.bias"), &proj.bias));
                }
            }
        }
        for (i, block) in self.lhc.iter().enumerate() {
            for (name, t) in block.named() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        for (i, g) in self.gates.iter().enumerate() {
            out.push((format!("gate{i}.theta"), g));
        }
        out.push(("fc.weight".to_string(), &self.head.weight));
        out.push(("fc.bias".to_string(), &self.head.bias));
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.named().into_iter().map(|(_, t)| t)
    }

    /// Mutable access in the same order as [`NetParams::named`].
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let mut out: Vec<&mut T> = vec![&mut self.stem.kernel, &mut self.stem.bias];
        for units in &mut self.stages {
            for unit in units {
                out.push(&mut unit.conv1.kernel);
                out.push(&mut unit.conv1.bias);
                out.push(&mut unit.conv2.kernel);
                out.push(&mut unit.conv2.bias);
                if let Some(proj) = &mut unit.proj {
                    out.push(&mut proj.kernel);
                    out.push(&mut proj.bias);
                }
            }
        }
        for block in &mut self.lhc {
            out.extend(block.iter_mut());
        }
        out.extend(self.gates.iter_mut());
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out.into_iter()
    }
}

fn glorot_kernel(k: usize, cin: usize, cout: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, &[]);
    let limit = (6.0 / ((k * k * cin) + (k * k * cout)) as f64).sqrt();
    Tensor::random_uniform([k, k, cin, cout], -limit, limit, &mut rng)
}

fn conv_init(k: usize, cin: usize, cout: usize, seed: u64) -> ConvParams<Tensor> {
    ConvParams {
        kernel: glorot_kernel(k, cin, cout, seed),
        bias: Tensor::zeros([cout]),
    }
}

/// Seed of LHC block `index` for a network seeded with `seed`.
pub fn lhc_block_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[1, index as u64])
}

/// Trainable desk-scale network built from a [`BackboneSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    pub spec: BackboneSpec,
    pub params: NetParams<Tensor>,
    /// Per-insertion switch; a disabled block passes its input through.
    pub enabled: Vec<bool>,
}

impl TinyNet {
    pub fn new(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        if spec.batch_norm {
            return Err(Error::config("trainable networks do not support batch normalisation"));
        }
        if spec.stem.stride != 1 {
            return Err(Error::config("trainable networks need a unit-stride stem"));
        }
        let seed = spec.seed;
        let cin = spec.input_shape[2];
        let stem = conv_init(spec.stem.kernel, cin, spec.stem.filters, derive_seed(seed, &[0]));
        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut prev = spec.stem.filters;
        for (s, st) in spec.stages.iter().enumerate() {
            let mut units = Vec::with_capacity(st.blocks);
            for u in 0..st.blocks {
                let inp = if u == 0 { prev } else { st.filters };
                let base = derive_seed(seed, &[2, s as u64, u as u64]);
                units.push(UnitParams {
                    conv1: conv_init(3, inp, st.filters, derive_seed(base, &[1])),
                    conv2: conv_init(3, st.filters, st.filters, derive_seed(base, &[2])),
                    proj: (inp != st.filters)
                        .then(|| conv_init(1, inp, st.filters, derive_seed(base, &[3]))),
                });
            }
            stages.push(units);
            prev = st.filters;
        }
        let lhc = spec
            .insertions
            .iter()
            .enumerate()
            .map(|(i, ins)| LhcWeights::init(&ins.lhc, lhc_block_seed(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        let gates = match &spec.gate {
            GateMode::Plain => Vec::new(),
            GateMode::Gated { theta } => theta.iter().map(|&t| Tensor::scalar(t)).collect(),
        };
        let limit = (6.0 / (prev + spec.classes) as f64).sqrt();
        let mut rng = stream(seed, &[3]);
        let head = DenseParams {
            weight: Tensor::random_uniform([prev, spec.classes], -limit, limit, &mut rng),
            bias: Tensor::zeros([spec.classes]),
        };
        let enabled = vec![true; spec.insertions.len()];
        Ok(Self {
            spec,
            params: NetParams {
                stem,
                stages,
                lhc,
                gates,
                head,
            },
            enabled,
        })
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|t| t.len() as u64).sum()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn bind(&self, tape: &mut Tape) -> NetParams<Var> {
        self.params.map(|t| tape.leaf(t.clone()))
    }

    pub fn bind_const(&self, tape: &mut Tape) -> NetParams<Var> {
        self.params.map(|t| tape.constant(t.clone()))
    }

    fn insert(
        &self,
        tape: &mut Tape,
        x: Var,
        pos: Position,
        p: &NetParams<Var>,
        taps: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let Some(i) = self.spec.insertions.iter().position(|ins| ins.after == pos) else {
            return Ok(x);
        };
        if let Some(t) = taps.as_deref_mut() {
            t.push(tape.value(x).clone());
        }
        if !self.enabled[i] {
            return Ok(x);
        }
        let trace = lhc_branch(tape, x, &self.spec.insertions[i].lhc, &p.lhc[i])?;
        match self.spec.gate {
            GateMode::Plain => tape.add(x, trace.branch),
            GateMode::Gated { .. } => gated_residual(tape, x, trace.branch, p.gates[i]),
        }
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        x: Var,
        p: &NetParams<Var>,
        mut taps: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        if tape.shape(x) != self.spec.input_shape {
            return Err(Error::shape("tiny_forward", tape.shape(x), &self.spec.input_shape));
        }
        let mut h = tape.conv2d_same(x, p.stem.kernel, p.stem.bias)?;
        if self.spec.stem.pool {
            h = tape.max_pool2(h)?;
        }
        h = self.insert(tape, h, Position::Stem, p, &mut taps)?;
        for (s, (st, units)) in self.spec.stages.iter().zip(&p.stages).enumerate() {
            if st.downsample {
                h = tape.max_pool2(h)?;
            }
            for unit in units {
                let a = tape.relu(h);
                let c1 = tape.conv2d_same(a, unit.conv1.kernel, unit.conv1.bias)?;
                let a2 = tape.relu(c1);
                let c2 = tape.conv2d_same(a2, unit.conv2.kernel, unit.conv2.bias)?;
                let shortcut = match &unit.proj {
                    Some(proj) => tape.conv2d_same(h, proj.kernel, proj.bias)?,
                    None => h,
                };
                h = tape.add(shortcut, c2)?;
            }
            h = self.insert(tape, h, Position::Stage(s), p, &mut taps)?;
        }
        let a = tape.relu(h);
        let pooled = tape.global_avg_pool(a)?;
        let row = tape.reshape(pooled, [1, self.spec.stages.last().map_or(self.spec.stem.filters, |s| s.filters)])?;
        let logits = tape.matmul(row, p.head.weight)?;
        let logits = tape.add_row_bias(logits, p.head.bias)?;
        tape.reshape(logits, [self.spec.classes])
    }

    /// Logits `[K]` of one sample.
    pub fn forward(&self, tape: &mut Tape, x: Var, p: &NetParams<Var>) -> Result<Var> {
        self.forward_impl(tape, x, p, None)
    }

    /// Logits `[B,K]` for a batch.
    pub fn forward_batch(&self, tape: &mut Tape, xs: &[Tensor], p: &NetParams<Var>) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut rows = Vec::with_capacity(xs.len());
        for x in xs {
            let xv = tape.constant(x.clone());
            rows.push(self.forward(tape, xv, p)?);
        }
        tape.stack(&rows)
    }

    /// Inference logits `[B,K]`.
    pub fn logits(&self, xs: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind_const(&mut tape);
        let out = self.forward_batch(&mut tape, xs, &p)?;
        Ok(tape.value(out).clone())
    }

    /// Inputs reaching each LHC insertion point for one sample.
    pub fn block_inputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.bind_const(&mut tape);
        let xv = tape.constant(x.clone());
        let mut taps = Vec::new();
        self.forward_impl(&mut tape, xv, &p, Some(&mut taps))?;
        Ok(taps)
    }

    /// Replaces the weights of LHC block `index` with its seeded initialisation.
    pub fn reinit_block(&mut self, index: usize, seed: u64) -> Result<()> {
        let ins = self
            .spec
            .insertions
            .get(index)
            .ok_or_else(|| Error::config(format!("no LHC block {index}")))?;
        self.params.lhc[index] = LhcWeights::init(&ins.lhc, seed)?;
        Ok(())
    }

    /// Writes `<stem>.manifest`, `<stem>.bin` and the spec as `<stem>.spec.toml`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut c = Container::new();
        for (name, t) in self.named_params() {
            c.push(name, t.clone(), Precision::F64)?;
        }
        c.save(stem)?;
        fs::write(stem.with_extension("spec.toml"), self.spec.to_toml()?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let spec = BackboneSpec::from_toml(&fs::read_to_string(stem.with_extension("spec.toml"))?)?;
        let c = Container::load(stem)?;
        let mut net = TinyNet::new(spec)?;
        net.load_named(|name| c.get(name).cloned())?;
        Ok(net)
    }

    /// Named tensors for the checkpoint container.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.params.named()
    }

    /// Loads tensors by name; every parameter must be present with its shape.
    pub fn load_named(&mut self, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        let names: Vec<String> = self.params.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.params.iter_mut()) {
            let t = lookup(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}
