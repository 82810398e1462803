//! A small set-abstraction encoder-decoder with per-stage ambiguity
//! supervision, its joint objective and a deterministic training loop.
//!
//! Encoder stage `s` samples a quarter of its parent's points, gathers each
//! sample's `group_k` nearest parents and max-pools an MLP over
//! `offset ⊙ feature`. Decoder stages upsample by inverse-distance blending
//! of the nearest coarse points, fuse with the encoder twin and emit the
//! embeddings the contrastive loss and the masked refinement act on.

mod check;
pub mod optim;
mod plan;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aef::AefConfig;
use crate::apm::{self, ApmBlock};
use crate::autograd::{BatchStats, NormMode, RunningStats, Tape, Tensor, Var, BN_EPS};
use crate::cloudgeom::{Point3, PointCloud};
use crate::error::{invalid, Error, Result};
use crate::margin_contrast::{loss_am, ContrastBatch, MarginConfig};
use crate::refine::{build_masks, MaskSet, RefineConfig};

pub use check::{
    embeddings_well_conditioned, gradient_suite, joint_gradient_error, GradcheckRow, CHECK_STEP,
    CHECK_TOLERANCE,
};
pub use plan::{stage_sizes, CloudPlan, StagePlan, StageSupervision};

use optim::{cosine_lr, MomentumSgd};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding width per stage; the stage count is its length.
    pub dims: Vec<usize>,
    /// Downsampling factor per stage.
    pub ratios: Vec<usize>,
    pub group_k: usize,
    /// Neighbors blended when upsampling decoder features.
    pub interp_k: usize,
    pub aef: AefConfig,
    pub margin: MarginConfig,
    pub lambda: f64,
    pub omega: f64,
    pub refine: RefineConfig,
    /// When false the refinement op is not recorded at all.
    pub refine_enabled: bool,
    /// Stops regression gradients from reaching the backbone.
    pub apm_detach: bool,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Passes over every cloud within one epoch.
    pub loops: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: vec![16, 32],
            ratios: vec![4, 4],
            group_k: 16,
            interp_k: 3,
            aef: AefConfig::default(),
            margin: MarginConfig::default(),
            lambda: 0.1,
            omega: 0.01,
            refine: RefineConfig::default(),
            refine_enabled: true,
            apm_detach: true,
            lr: 0.01,
            momentum: 0.9,
            epochs: 150,
            loops: 8,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(invalid("need at least one stage, each of positive width"));
        }
        if self.ratios.len() != self.dims.len() || self.ratios.iter().any(|&r| r < 1) {
            return Err(invalid("one downsampling ratio >= 1 per stage required"));
        }
        if self.group_k == 0 || self.interp_k == 0 {
            return Err(invalid("group_k and interp_k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(invalid(format!("omega must be non-negative, got {}", self.omega)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.loops == 0 {
            return Err(invalid("batch size and loops must be positive"));
        }
        self.aef.validate()?;
        self.margin.validate()?;
        self.refine.validate()
    }
}

/// Per-stage view of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StageState {
    pub stage: usize,
    pub indices: Vec<usize>,
    pub positions: Vec<Point3>,
    /// Encoder features, `[n, D]` row-major.
    pub features: Vec<f64>,
    /// Decoder embeddings after refinement.
    pub embeddings: Vec<f64>,
    pub dim: usize,
    pub labels: Option<Vec<usize>>,
    pub ambiguity: Option<Vec<f64>>,
    pub margins: Option<Vec<f64>>,
    pub predicted: Vec<f64>,
    pub masks: Option<MaskSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[n, C]`.
    pub scores: Tensor,
    pub stages: Vec<StageState>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_am: Vec<f64>,
    pub l_reg: Vec<f64>,
    pub l_seg: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l_ce.is_finite()
            && self.l_seg.is_finite()
            && self.l_total.is_finite()
            && self.l_am.iter().chain(&self.l_reg).all(|v| v.is_finite())
    }

    fn accumulate(&mut self, other: &LossReport, w: f64) {
        if self.l_am.is_empty() {
            self.l_am = vec![0.0; other.l_am.len()];
            self.l_reg = vec![0.0; other.l_reg.len()];
        }
        self.l_ce += w * other.l_ce;
        self.l_seg += w * other.l_seg;
        self.l_total += w * other.l_total;
        for (a, b) in self.l_am.iter_mut().zip(&other.l_am) {
            *a += w * b;
        }
        for (a, b) in self.l_reg.iter_mut().zip(&other.l_reg) {
            *a += w * b;
        }
    }
}

/// Fills the combined terms from the per-part losses.
pub fn loss_joint(l_ce: f64, l_am: &[f64], l_reg: &[f64], lambda: f64, omega: f64) -> LossReport {
    let l_seg = lambda * l_ce + (1.0 - lambda) * l_am.iter().sum::<f64>();
    LossReport {
        l_ce,
        l_am: l_am.to_vec(),
        l_reg: l_reg.to_vec(),
        l_seg,
        l_total: l_seg + omega * l_reg.iter().sum::<f64>(),
    }
}

/// Labels of the sampled subset.
pub fn mine_labels(parent_labels: &[usize], sampled: &[usize]) -> Result<Vec<usize>> {
    sampled
        .iter()
        .map(|&i| {
            parent_labels.get(i).copied().ok_or_else(|| {
                invalid(format!(
                    "sampled index {i} out of range for {} labels",
                    parent_labels.len()
                ))
            })
        })
        .collect()
}

/// Parameter slots of one affine layer, optionally followed by batch
/// normalization with a learnable scale and shift.
#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
    norm: Option<Norm>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    scale: usize,
    shift: usize,
    running: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub in_dim: usize,
    pub num_classes: usize,
    names: Vec<String>,
    params: Vec<Tensor>,
    running: Vec<(String, RunningStats)>,
    stem: Linear,
    encoders: Vec<Linear>,
    decoders: Vec<[Linear; 2]>,
    fuse: Linear,
    head: Linear,
    pub apm: Vec<ApmBlock>,
}

struct Recorded {
    logits: Var,
    encoded: Vec<Var>,
    decoded: Vec<Var>,
    refined: Vec<Var>,
    apm_out: Vec<Var>,
    stats: NormStats,
    predicted: Vec<Vec<f64>>,
    masks: Vec<Option<MaskSet>>,
}

/// Per-cloud result of a training-mode pass.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub report: LossReport,
    /// Flat, in [`Model::params`] order.
    pub grad: Vec<f64>,
    pub stats: NormStats,
    /// Decoder embeddings per stage before refinement, as the contrastive
    /// loss saw them.
    pub embeddings: Vec<Tensor>,
}

/// Batch statistics gathered by one training-mode pass, in layer order.
#[derive(Debug, Clone, Default)]
pub struct NormStats {
    /// Keyed by backbone normalization slot.
    pub backbone: Vec<(usize, BatchStats)>,
    pub apm: Vec<Vec<BatchStats>>,
}

impl Model {
    pub fn new(config: ModelConfig, in_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if in_dim < 3 || num_classes == 0 {
            return Err(invalid("input width must be at least 3 and classes at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut build = |name: String, out: usize, fan_in: usize, normed: bool, rng: &mut ChaCha8Rng| {
            names.push(format!("{name}.weight"));
            params.push(apm::xavier_uniform(rng, out, fan_in));
            names.push(format!("{name}.bias"));
            params.push(Tensor::zeros(&[out]));
            let weight = params.len() - 2;
            let norm = normed.then(|| {
                names.push(format!("{name}.norm_scale"));
                params.push(Tensor::vector(vec![1.0; out]));
                names.push(format!("{name}.norm_shift"));
                params.push(Tensor::zeros(&[out]));
                running.push((name.clone(), RunningStats::new(out)));
                Norm {
                    scale: params.len() - 2,
                    shift: params.len() - 1,
                    running: running.len() - 1,
                }
            });
            Linear {
                weight,
                bias: weight + 1,
                norm,
            }
        };
        let dims = config.dims.clone();
        let d0 = dims[0];
        let stem = build("stem".into(), d0, in_dim, true, &mut rng);
        let mut encoders = Vec::new();
        let mut prev = d0;
        for (s, &d) in dims.iter().enumerate() {
            encoders.push(build(format!("enc{}", s + 1), d, 3 + prev, true, &mut rng));
            prev = d;
        }
        let mut decoders = Vec::new();
        for (s, &d) in dims.iter().enumerate() {
            let fan_in = d + dims.get(s + 1).copied().unwrap_or(0);
            let a = build(format!("dec{}.hidden", s + 1), d, fan_in, true, &mut rng);
            let b = build(format!("dec{}.embed", s + 1), d, d, false, &mut rng);
            decoders.push([a, b]);
        }
        let fuse = build("fuse".into(), d0, d0 + dims[0], true, &mut rng);
        let head = build("head".into(), num_classes, d0, false, &mut rng);
        let apm = dims
            .iter()
            .enumerate()
            .map(|(s, &d)| ApmBlock::new(s + 1, d, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            in_dim,
            num_classes,
            names,
            params,
            running,
            stem,
            encoders,
            decoders,
            fuse,
            head,
            apm,
        })
    }

    /// Trainable tensors: backbone first, then every prediction block.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.params.iter().collect();
        for b in &self.apm {
            out.extend(b.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.params.iter_mut().collect();
        for b in &mut self.apm {
            out.extend(b.params_mut());
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.names.clone();
        for b in &self.apm {
            out.extend(b.param_names());
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(invalid(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Every tensor a checkpoint needs, running statistics included.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .param_names()
            .into_iter()
            .zip(self.params().into_iter().cloned())
            .collect();
        for (name, r) in &self.running {
            out.push((format!("{name}.running_mean"), Tensor::vector(r.mean.clone())));
            out.push((format!("{name}.running_var"), Tensor::vector(r.var.clone())));
        }
        for b in &self.apm {
            for (t, layer) in b.layers.iter().enumerate() {
                let base = format!("apm{}.layer{}", b.stage, t);
                out.push((
                    format!("{base}.running_mean"),
                    Tensor::vector(layer.running.mean.clone()),
                ));
                out.push((
                    format!("{base}.running_var"),
                    Tensor::vector(layer.running.var.clone()),
                ));
            }
        }
        out
    }

    /// Rebuilds a model from [`Model::named_tensors`] output.
    pub fn from_named(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let in_dim = find("stem.weight")?.cols();
        let num_classes = find("head.weight")?.rows();
        let mut model = Model::new(config, in_dim, num_classes)?;
        let names = model.param_names();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = find(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        for (name, r) in &mut model.running {
            let mean = find(&format!("{name}.running_mean"))?;
            let var = find(&format!("{name}.running_var"))?;
            if mean.numel() != r.mean.len() || var.numel() != r.var.len() {
                return Err(Error::Format(format!(
                    "running statistics of {name} have the wrong size"
                )));
            }
            r.mean = mean.data().to_vec();
            r.var = var.data().to_vec();
        }
        for b in &mut model.apm {
            for (t, layer) in b.layers.iter_mut().enumerate() {
                let base = format!("apm{}.layer{}", b.stage, t);
                let mean = find(&format!("{base}.running_mean"))?;
                let var = find(&format!("{base}.running_var"))?;
                if mean.numel() != layer.running.mean.len() || var.numel() != layer.running.var.len() {
                    return Err(Error::Format(format!(
                        "running statistics of {base} have the wrong size"
                    )));
                }
                layer.running.mean = mean.data().to_vec();
                layer.running.var = var.data().to_vec();
            }
        }
        if tensors.len() != model.named_tensors().len() {
            return Err(Error::Format("checkpoint holds unexpected tensors".into()));
        }
        Ok(model)
    }

    pub fn plan(&self, cloud: &PointCloud, with_labels: bool) -> Result<CloudPlan> {
        if 3 + cloud.feature_dim() != self.in_dim {
            return Err(invalid(format!(
                "model expects {} input features per point, cloud has {}",
                self.in_dim - 3,
                cloud.feature_dim()
            )));
        }
        if with_labels && cloud.labels().iter().any(|&l| l >= self.num_classes) {
            return Err(invalid("cloud has labels beyond the model's classes"));
        }
        CloudPlan::build(cloud, &self.config, with_labels)
    }

    /// Affine map, then normalization for layers that carry it: batch
    /// statistics (recorded into `stats`) when given, running ones otherwise.
    fn layer(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        l: Linear,
        stats: &mut Option<Vec<(usize, BatchStats)>>,
    ) -> Result<Var> {
        let a = tape.affine(x, vars[l.weight], vars[l.bias])?;
        let Some(n) = l.norm else { return Ok(a) };
        let y = match stats {
            Some(out) => {
                let (y, s) = tape.batch_norm_train(a, BN_EPS)?;
                out.push((n.running, s));
                y
            }
            None => tape.batch_norm_infer(a, &self.running[n.running].1, BN_EPS)?,
        };
        tape.scale_shift(y, vars[n.scale], vars[n.shift])
    }

    /// Records one pass. `train` selects batch statistics for the
    /// prediction blocks' regression output; refinement always uses the
    /// running statistics.
    fn record(&self, tape: &mut Tape, vars: &[Var], plan: &CloudPlan, train: bool) -> Result<Recorded> {
        let nb = self.params.len();
        let mut bstats = train.then(Vec::new);
        let input = tape.constant(plan.input.clone());
        let stem = self.layer(tape, vars, input, self.stem, &mut bstats)?;
        let f0 = tape.relu(stem);

        let mut encoded = Vec::with_capacity(plan.stages.len());
        let mut parent = f0;
        for (s, st) in plan.stages.iter().enumerate() {
            let grouped = tape.gather_rows(parent, &st.groups)?;
            let off = tape.constant(st.offsets.clone());
            let cat = tape.concat_cols(off, grouped)?;
            let h = self.layer(tape, vars, cat, self.encoders[s], &mut bstats)?;
            let h = tape.relu(h);
            let f = tape.group_max(h, st.group_k)?;
            encoded.push(f);
            parent = f;
        }

        let mut apm_out = Vec::new();
        let mut apm_stats = Vec::new();
        let mut predicted = Vec::new();
        let mut offset = nb;
        for (s, st) in plan.stages.iter().enumerate() {
            let block = &self.apm[s];
            let n_vars = 4 * block.layers.len();
            let bvars = &vars[offset..offset + n_vars];
            offset += n_vars;
            let feat = tape.value(encoded[s]).clone();
            let z_val = apm::stack_inputs(&st.positions, feat.data(), feat.cols())?;
            predicted.push(block.predict(&z_val)?.values);
            if train {
                let z = if self.config.apm_detach {
                    tape.constant(z_val)
                } else {
                    let pos = Tensor::matrix(
                        st.len(),
                        3,
                        st.positions.iter().flat_map(|p| p.iter().copied()).collect(),
                    )?;
                    let p = tape.constant(pos);
                    tape.concat_cols(p, encoded[s])?
                };
                let (out, stats) = block.forward(tape, bvars, z, NormMode::Train)?;
                apm_out.push(out);
                apm_stats.push(stats);
            }
        }

        let stages = plan.stages.len();
        let mut decoded = vec![None; stages];
        let mut refined: Vec<Option<Var>> = vec![None; stages];
        let mut masks = vec![None; stages];
        for s in (0..stages).rev() {
            let x = if s + 1 == stages {
                encoded[s]
            } else {
                let up = upsample(tape, refined[s + 1].unwrap(), &plan.stages[s + 1].interp)?;
                tape.concat_cols(encoded[s], up)?
            };
            let [hid, emb] = self.decoders[s];
            let h = self.layer(tape, vars, x, hid, &mut bstats)?;
            let h = tape.relu(h);
            let g = self.layer(tape, vars, h, emb, &mut bstats)?;
            decoded[s] = Some(g);
            refined[s] = Some(if self.config.refine_enabled {
                let m = build_masks(
                    &predicted[s],
                    &plan.stages[s].refine_neighbors,
                    &self.config.refine,
                )?;
                let r = tape.refine(g, &m.sources(), self.config.refine.gamma)?;
                masks[s] = Some(m);
                r
            } else {
                g
            });
        }
        let up = upsample(tape, refined[0].unwrap(), &plan.stages[0].interp)?;
        let x = tape.concat_cols(f0, up)?;
        let h = self.layer(tape, vars, x, self.fuse, &mut bstats)?;
        let h = tape.relu(h);
        let logits = self.layer(tape, vars, h, self.head, &mut bstats)?;
        Ok(Recorded {
            logits,
            encoded,
            decoded: decoded.into_iter().map(Option::unwrap).collect(),
            refined: refined.into_iter().map(Option::unwrap).collect(),
            apm_out,
            stats: NormStats {
                backbone: bstats.unwrap_or_default(),
                apm: apm_stats,
            },
            predicted,
            masks,
        })
    }

    fn constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Inference-mode pass: no labels are read and no state changes.
    pub fn forward(&self, plan: &CloudPlan) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let rec = self.record(&mut tape, &vars, plan, false)?;
        let mut stages = Vec::with_capacity(plan.stages.len());
        for (s, st) in plan.stages.iter().enumerate() {
            let sup = st.supervision.as_ref();
            let enc = tape.value(rec.encoded[s]);
            stages.push(StageState {
                stage: st.stage,
                indices: st.indices.clone(),
                positions: st.positions.clone(),
                features: enc.data().to_vec(),
                embeddings: tape.value(rec.refined[s]).data().to_vec(),
                dim: enc.cols(),
                labels: sup.map(|x| x.labels.clone()),
                ambiguity: sup.map(|x| x.ambiguity.values.clone()),
                margins: sup.map(|x| x.margins.values.clone()),
                predicted: rec.predicted[s].clone(),
                masks: rec.masks[s].clone(),
            });
        }
        Ok(ForwardOutput {
            scores: tape.value(rec.logits).clone(),
            stages,
        })
    }

    /// Training-mode pass on a labeled plan: joint loss, its gradient with
    /// respect to every parameter, and the batch statistics to fold in.
    pub fn loss_and_grad(&self, plan: &CloudPlan) -> Result<StepResult> {
        self.train_pass(plan, true)
    }

    /// The training-mode loss alone, without the backward sweep.
    pub fn loss(&self, plan: &CloudPlan) -> Result<LossReport> {
        Ok(self.train_pass(plan, false)?.report)
    }

    fn train_pass(&self, plan: &CloudPlan, with_grad: bool) -> Result<StepResult> {
        let labels = plan
            .labels
            .as_ref()
            .ok_or_else(|| invalid("training needs a labeled plan"))?;
        let cfg = &self.config;
        let mut tape = Tape::new();
        let vars: Vec<Var> = if with_grad {
            self.params().into_iter().map(|t| tape.param(t.clone())).collect()
        } else {
            self.constants(&mut tape)
        };
        let rec = self.record(&mut tape, &vars, plan, true)?;

        let ce = tape.softmax_cross_entropy(rec.logits, labels)?;
        let mut am_vars = Vec::new();
        let mut reg_vars = Vec::new();
        for (s, st) in plan.stages.iter().enumerate() {
            let sup = st.supervision.as_ref().expect("labeled plan");
            let g = tape.value(rec.decoded[s]);
            let am = loss_am(
                &ContrastBatch {
                    features: g.data(),
                    dim: g.cols(),
                    partitions: &sup.partitions,
                    margins: &sup.margins.values,
                },
                &cfg.margin,
            )?;
            let grad = Tensor::new(g.shape().to_vec(), am.grad)?;
            am_vars.push(tape.external(rec.decoded[s], am.loss, grad)?);
            reg_vars.push(tape.mean_abs_error(rec.apm_out[s], &sup.ambiguity.values)?);
        }
        let sum = |tape: &mut Tape, vs: &[Var]| -> Result<Var> {
            let mut acc = vs[0];
            for &v in &vs[1..] {
                acc = tape.add(acc, v)?;
            }
            Ok(acc)
        };
        let am_sum = sum(&mut tape, &am_vars)?;
        let reg_sum = sum(&mut tape, &reg_vars)?;
        let a = tape.scale(ce, cfg.lambda);
        let b = tape.scale(am_sum, 1.0 - cfg.lambda);
        let seg = tape.add(a, b)?;
        let c = tape.scale(reg_sum, cfg.omega);
        let total = tape.add(seg, c)?;

        let report = loss_joint(
            tape.value(ce).item(),
            &am_vars.iter().map(|&v| tape.value(v).item()).collect::<Vec<_>>(),
            &reg_vars.iter().map(|&v| tape.value(v).item()).collect::<Vec<_>>(),
            cfg.lambda,
            cfg.omega,
        );
        let grad = if with_grad {
            let grads = tape.backward(total)?;
            vars.iter()
                .flat_map(|&v| grads.wrt(&tape, v).into_data())
                .collect()
        } else {
            Vec::new()
        };
        Ok(StepResult {
            report,
            grad,
            embeddings: rec.decoded.iter().map(|&v| tape.value(v).clone()).collect(),
            stats: rec.stats,
        })
    }

    pub fn apply_stats(&mut self, stats: &NormStats) {
        for (slot, s) in &stats.backbone {
            self.running[*slot].1.update(s);
        }
        for (block, s) in self.apm.iter_mut().zip(&stats.apm) {
            block.apply_stats(s);
        }
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<Prediction> {
        let plan = self.plan(cloud, false)?;
        let out = self.forward(&plan)?;
        let labels = argmax_rows(&out.scores);
        let first = &out.stages[0];
        let point_ambiguity = plan.stages[0]
            .upsample
            .iter()
            .map(|&u| first.predicted[u])
            .collect();
        Ok(Prediction {
            labels,
            stage_ambiguity: first.predicted.clone(),
            point_ambiguity,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// Predicted ambiguity of every stage-1 point.
    pub stage_ambiguity: Vec<f64>,
    /// Each input point takes the value of its nearest stage-1 point.
    pub point_ambiguity: Vec<f64>,
}

/// Weighted sum of coarse rows for every fine point.
fn upsample(tape: &mut Tape, coarse: Var, interp: &[Vec<(usize, f64)>]) -> Result<Var> {
    let k = interp.iter().map(Vec::len).max().unwrap_or(0);
    let cols = tape.value(coarse).cols();
    if k == 1 {
        let idx: Vec<usize> = interp.iter().map(|w| w[0].0).collect();
        return tape.gather_rows(coarse, &idx);
    }
    let mut acc: Option<Var> = None;
    for slot in 0..k {
        // rows with fewer neighbors (exact hits) repeat their first one at weight 0
        let idx: Vec<usize> = interp.iter().map(|w| w.get(slot).unwrap_or(&w[0]).0).collect();
        let weights: Vec<f64> = interp
            .iter()
            .flat_map(|w| std::iter::repeat_n(w.get(slot).map_or(0.0, |p| p.1), cols))
            .collect();
        let g = tape.gather_rows(coarse, &idx)?;
        let w = tape.constant(Tensor::matrix(interp.len(), cols, weights)?);
        let term = tape.try_mul(g, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| invalid("nothing to upsample from"))
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean report per epoch.
    pub history: Vec<LossReport>,
}

/// Builds a fresh model for `dataset` and fits it.
pub fn train(dataset: &[PointCloud], config: &ModelConfig) -> Result<TrainOutcome> {
    let first = dataset.first().ok_or_else(|| invalid("dataset is empty"))?;
    let classes = dataset.iter().map(|c| c.num_classes()).max().unwrap_or(1);
    let model = Model::new(config.clone(), 3 + first.feature_dim(), classes)?;
    train_model(model, dataset, |_, _| {})
}

/// Fits an existing model; `on_epoch` sees every epoch's mean report.
pub fn train_model(
    mut model: Model,
    dataset: &[PointCloud],
    mut on_epoch: impl FnMut(usize, &LossReport),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let plans = dataset
        .iter()
        .map(|c| model.plan(c, true))
        .collect::<Result<Vec<_>>>()?;
    let cfg = model.config.clone();
    let mut opt = MomentumSgd::new(cfg.lr, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut epoch_report = LossReport::default();
        let weight = 1.0 / (plans.len() * cfg.loops) as f64;
        for batch in (0..cfg.loops).flat_map(|_| plans.chunks(cfg.batch_size)) {
            let w = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; model.num_params()];
            let mut stats = Vec::new();
            for plan in batch {
                let step = model.loss_and_grad(plan)?;
                if !step.report.is_finite() || step.grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("non-finite loss {:?}", step.report),
                    });
                }
                for (a, g) in grad.iter_mut().zip(&step.grad) {
                    *a += w * g;
                }
                epoch_report.accumulate(&step.report, weight);
                stats.push(step.stats);
            }
            for s in &stats {
                model.apply_stats(s);
            }
            opt.step(model.params_mut(), &grad, lr);
        }
        on_epoch(epoch, &epoch_report);
        history.push(epoch_report);
    }
    Ok(TrainOutcome { model, history })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
