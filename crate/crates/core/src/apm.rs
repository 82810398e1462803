//! Ambiguity prediction: a per-stage stack of `sigmoid(norm(W x + b))`
//! layers with widths `(3 + D, 32, 16, 8, 4, 2, 1)`, regressed onto the
//! label-derived ambiguity with a mean absolute error.

use rand::Rng;

use crate::aef::AmbiguityMap;
use crate::autograd::{BatchStats, NormMode, RunningStats, Tape, Tensor, Var, BN_EPS};
use crate::error::{invalid, Result};
use crate::nettrain::optim::MomentumSgd;

pub const HIDDEN_WIDTHS: [usize; 6] = [32, 16, 8, 4, 2, 1];

/// Number of transformation layers in a block.
pub const LAYERS: usize = HIDDEN_WIDTHS.len();

#[derive(Debug, Clone, PartialEq)]
pub struct ApmLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Learnable per-channel scale and shift applied after normalization.
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
    pub running: RunningStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApmBlock {
    pub stage: usize,
    pub feature_dim: usize,
    pub layers: Vec<ApmLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedAmbiguity {
    pub values: Vec<f64>,
    pub stage: usize,
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_out: usize, fan_in: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::matrix(fan_out, fan_in, data).expect("shape matches data")
}

impl ApmBlock {
    pub fn new<R: Rng>(stage: usize, feature_dim: usize, rng: &mut R) -> Result<Self> {
        Self::build(stage, feature_dim, |o, i| xavier_uniform(rng, o, i))
    }

    /// All weights and biases zero.
    pub fn zeroed(stage: usize, feature_dim: usize) -> Result<Self> {
        Self::build(stage, feature_dim, |o, i| Tensor::zeros(&[o, i]))
    }

    fn build(
        stage: usize,
        feature_dim: usize,
        mut weight: impl FnMut(usize, usize) -> Tensor,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(invalid("feature dimension must be at least 1"));
        }
        let mut fan_in = 3 + feature_dim;
        let layers = HIDDEN_WIDTHS
            .iter()
            .map(|&out| {
                let layer = ApmLayer {
                    weight: weight(out, fan_in),
                    bias: Tensor::zeros(&[out]),
                    norm_scale: Tensor::vector(vec![1.0; out]),
                    norm_shift: Tensor::zeros(&[out]),
                    running: RunningStats::new(out),
                };
                fan_in = out;
                layer
            })
            .collect();
        Ok(Self {
            stage,
            feature_dim,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        3 + self.feature_dim
    }

    /// Trainable tensors, four per layer: weight, bias, norm scale, norm shift.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias, &l.norm_scale, &l.norm_shift])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias, &mut l.norm_scale, &mut l.norm_shift])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|t| {
                ["weight", "bias", "norm_scale", "norm_shift"]
                    .map(|p| format!("apm{}.layer{}.{}", self.stage, t, p))
            })
            .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Records the block on `tape`. `vars` come from [`ApmBlock::register`]
    /// (or equivalent constants). Train mode returns the batch statistics of
    /// every layer; they are not folded into the running averages here.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
        mode: NormMode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        if vars.len() != 4 * self.layers.len() {
            return Err(invalid("parameter handles do not match the block"));
        }
        if tape.value(z).cols() != self.input_dim() || tape.value(z).rank() != 2 {
            return Err(invalid(format!(
                "block input has shape {:?}, expected [n, {}]",
                tape.value(z).shape(),
                self.input_dim()
            )));
        }
        let mut x = z;
        let mut stats = Vec::new();
        for (t, layer) in self.layers.iter().enumerate() {
            let v = &vars[4 * t..4 * t + 4];
            let a = tape.affine(x, v[0], v[1])?;
            let normed = match mode {
                NormMode::Train => {
                    let (y, s) = tape.batch_norm_train(a, BN_EPS)?;
                    stats.push(s);
                    y
                }
                NormMode::Infer => tape.batch_norm_infer(a, &layer.running, BN_EPS)?,
            };
            let shifted = tape.scale_shift(normed, v[2], v[3])?;
            x = tape.sigmoid(shifted);
        }
        Ok((x, stats))
    }

    pub fn apply_stats(&mut self, stats: &[BatchStats]) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            layer.running.update(s);
        }
    }

    /// Infer-mode prediction on plain values, no gradients.
    pub fn predict(&self, z: &Tensor) -> Result<PredictedAmbiguity> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let zi = tape.constant(z.clone());
        let (out, _) = self.forward(&mut tape, &vars, zi, NormMode::Infer)?;
        Ok(PredictedAmbiguity {
            values: tape.value(out).data().to_vec(),
            stage: self.stage,
        })
    }
}

/// `z = p ⊙ f`, position first.
pub fn concat_input(p: &[f64; 3], f: &[f64], expected_dim: usize) -> Result<Vec<f64>> {
    if f.is_empty() {
        return Err(invalid("feature vector must not be empty"));
    }
    if f.len() != expected_dim {
        return Err(invalid(format!(
            "feature of length {} for a stage of width {}",
            f.len(),
            expected_dim
        )));
    }
    let mut z = Vec::with_capacity(3 + f.len());
    z.extend_from_slice(p);
    z.extend_from_slice(f);
    Ok(z)
}

/// Stacks `[p_i ⊙ f_i]` rows into an `[n, 3 + D]` matrix.
pub fn stack_inputs(positions: &[[f64; 3]], features: &[f64], dim: usize) -> Result<Tensor> {
    if features.len() != positions.len() * dim {
        return Err(invalid("feature buffer does not match the position count"));
    }
    let mut data = Vec::with_capacity(positions.len() * (3 + dim));
    for (i, p) in positions.iter().enumerate() {
        data.extend(concat_input(p, &features[i * dim..(i + 1) * dim], dim)?);
    }
    Tensor::matrix(positions.len(), 3 + dim, data)
}

/// Runs the block on a batch; train mode folds batch statistics into the
/// running averages.
pub fn block_forward(z: &Tensor, block: &mut ApmBlock, mode: NormMode) -> Result<PredictedAmbiguity> {
    if z.rows() == 0 {
        return Err(invalid("empty batch"));
    }
    match mode {
        NormMode::Infer => block.predict(z),
        NormMode::Train => {
            let mut tape = Tape::new();
            let vars: Vec<Var> = block
                .params()
                .into_iter()
                .map(|t| tape.constant(t.clone()))
                .collect();
            let zi = tape.constant(z.clone());
            let (out, stats) = block.forward(&mut tape, &vars, zi, NormMode::Train)?;
            block.apply_stats(&stats);
            Ok(PredictedAmbiguity {
                values: tape.value(out).data().to_vec(),
                stage: block.stage,
            })
        }
    }
}

pub fn loss_reg(pred: &PredictedAmbiguity, target: &AmbiguityMap) -> Result<f64> {
    if pred.values.len() != target.values.len() {
        return Err(invalid(format!(
            "{} predictions for {} targets",
            pred.values.len(),
            target.values.len()
        )));
    }
    if pred.values.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(p, a)| (p - a).abs())
        .sum();
    Ok(total / pred.values.len() as f64)
}

/// L_REG value and gradient with respect to every block parameter, in
/// [`ApmBlock::params`] order, flattened.
pub fn loss_reg_with_grad(
    block: &ApmBlock,
    z: &Tensor,
    target: &[f64],
) -> Result<(f64, Vec<f64>, Vec<BatchStats>)> {
    let mut tape = Tape::new();
    let vars = block.register(&mut tape);
    let zi = tape.constant(z.clone());
    let (out, stats) = block.forward(&mut tape, &vars, zi, NormMode::Train)?;
    let loss = tape.mean_abs_error(out, target)?;
    let grads = tape.backward(loss)?;
    let flat = vars
        .iter()
        .flat_map(|&v| grads.wrt(&tape, v).into_data())
        .collect();
    Ok((tape.value(loss).item(), flat, stats))
}

/// Fits a block to fixed inputs with momentum SGD on the regression loss.
/// Returns the train-mode loss before every step and after the last one.
pub fn fit(block: &mut ApmBlock, z: &Tensor, target: &[f64], steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut opt = MomentumSgd::new(lr, 0.9);
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grad, stats) = loss_reg_with_grad(block, z, target)?;
        history.push(loss);
        block.apply_stats(&stats);
        opt.step(block.params_mut(), &grad, lr);
    }
    history.push(loss_reg_with_grad(block, z, target)?.0);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_dims_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ApmBlock::new(1, 16, &mut rng).unwrap();
        assert_eq!(b.layers.len(), 6);
        let dims: Vec<_> = b.layers.iter().map(|l| l.weight.shape().to_vec()).collect();
        assert_eq!(
            dims,
            vec![
                vec![32, 19],
                vec![16, 32],
                vec![8, 16],
                vec![4, 8],
                vec![2, 4],
                vec![1, 2]
            ]
        );
        assert!(ApmBlock::new(1, 0, &mut rng).is_err());
    }

    #[test]
    fn concat_examples() {
        assert_eq!(
            concat_input(&[1.0, 2.0, 3.0], &[4.0, 5.0], 2).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0]
        );
        assert!(concat_input(&[1.0, 2.0, 3.0], &[], 0).is_err());
        assert!(concat_input(&[1.0, 2.0, 3.0], &[4.0], 2).is_err());
    }

    #[test]
    fn zero_block_outputs_half() {
        let mut b = ApmBlock::zeroed(1, 2).unwrap();
        let z = Tensor::matrix(3, 5, (0..15).map(|v| v as f64 * 0.3).collect()).unwrap();
        let out = block_forward(&z, &mut b, NormMode::Train).unwrap();
        assert_eq!(out.values, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = ApmBlock::new(2, 4, &mut rng).unwrap();
        let z = Tensor::matrix(20, 7, (0..140).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        for mode in [NormMode::Train, NormMode::Infer] {
            let out = block_forward(&z, &mut b, mode).unwrap();
            assert!(out.values.iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn infer_mode_is_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = ApmBlock::new(1, 3, &mut rng).unwrap();
        let z = Tensor::matrix(10, 6, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        block_forward(&z, &mut b, NormMode::Train).unwrap();
        let all = b.predict(&z).unwrap();
        for i in 0..10 {
            let one = Tensor::matrix(1, 6, z.row(i).to_vec()).unwrap();
            assert_eq!(b.predict(&one).unwrap().values[0], all.values[i]);
            assert_eq!(b.predict(&one).unwrap(), b.predict(&one).unwrap());
        }
    }

    #[test]
    fn loss_reg_examples() {
        let t = |v: Vec<f64>| AmbiguityMap { values: v, stage: 1 };
        let p = |v: Vec<f64>| PredictedAmbiguity { values: v, stage: 1 };
        assert_eq!(loss_reg(&p(vec![0.3, 0.9]), &t(vec![0.3, 0.9])).unwrap(), 0.0);
        let l = loss_reg(&p(vec![0.2, 0.8]), &t(vec![0.4, 0.6])).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
        assert!(loss_reg(&p(vec![0.2]), &t(vec![0.4, 0.6])).is_err());
    }

    #[test]
    fn regression_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 3 {
            let block = ApmBlock::new(1, 2, &mut rng).unwrap();
            let z = Tensor::matrix(12, 5, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let target: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
            let base: Vec<f64> = block.params().iter().flat_map(|t| t.data().to_vec()).collect();
            let f = |p: &[f64]| {
                let mut b = block.clone();
                let mut off = 0;
                for t in b.params_mut() {
                    let n = t.numel();
                    t.data_mut().copy_from_slice(&p[off..off + n]);
                    off += n;
                }
                let (l, g, _) = loss_reg_with_grad(&b, &z, &target).unwrap();
                (l, g)
            };
            // resample when any residual sits on the |.| kink
            let mut tape = Tape::new();
            let vars = block.register(&mut tape);
            let zi = tape.constant(z.clone());
            let (out, _) = block.forward(&mut tape, &vars, zi, NormMode::Train).unwrap();
            if tape
                .value(out)
                .data()
                .iter()
                .zip(&target)
                .any(|(a, b)| (a - b).abs() < 1e-6)
            {
                continue;
            }
            let err = finite_diff_check(f, &base, 1e-5).unwrap();
            assert!(err <= 1e-4, "{err}");
            checked += 1;
        }
    }

    #[test]
    fn fit_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = ApmBlock::new(1, 2, &mut rng).unwrap();
        let z = Tensor::matrix(40, 5, (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let target: Vec<f64> = (0..40)
            .map(|i| if z.row(i)[0] > 0.5 { 0.8 } else { 0.0 })
            .collect();
        let hist = fit(&mut block, &z, &target, 200, 0.1).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
    }
}
