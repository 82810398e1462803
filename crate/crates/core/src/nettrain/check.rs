//! Finite-difference checks of every objective on small seeded models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::apm::{loss_reg_with_grad, ApmBlock};
use crate::autograd::{finite_diff_check, finite_diff_check_with, NormMode, Tape, Tensor};
use crate::cloudgeom::{synth_scene, SceneKind, SceneSpec};
use crate::error::{invalid, Result};

use super::{CloudPlan, Model, ModelConfig};

pub const CHECK_STEP: f64 = 1e-5;
pub const CHECK_TOLERANCE: f64 = 1e-4;
const ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub objective: &'static str,
    pub params: usize,
    pub max_rel_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= CHECK_TOLERANCE
    }
}

/// Largest relative error of the total loss gradient over all parameters.
pub fn joint_gradient_error(model: &Model, plan: &CloudPlan) -> Result<f64> {
    let analytic = model.loss_and_grad(plan)?.grad;
    let mut m = model.clone();
    let value = |p: &[f64]| {
        m.set_flat_params(p)
            .and_then(|_| m.loss(plan))
            .map_or(f64::NAN, |r| r.l_total)
    };
    finite_diff_check_with(value, &analytic, &model.flat_params(), CHECK_STEP)
}

/// Cosine similarity is singular at the origin, so a model whose decoder
/// emits a near-zero embedding row is not a fair subject for differencing.
pub fn embeddings_well_conditioned(model: &Model, plan: &CloudPlan) -> Result<bool> {
    let step = model.loss_and_grad(plan)?;
    Ok(step
        .embeddings
        .iter()
        .all(|e| (0..e.rows()).all(|r| e.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-3)))
}

fn backbone_check(
    base: &ModelConfig,
    seed: u64,
    objective: &'static str,
    lambda: f64,
    omega: f64,
) -> Result<GradcheckRow> {
    let cloud = synth_scene(&SceneSpec::new(SceneKind::PlanarBoundary, 32, 0.02, seed))?;
    for attempt in 0..ATTEMPTS {
        let cfg = ModelConfig {
            dims: vec![4, 4],
            ratios: vec![4, 4],
            lambda,
            omega,
            apm_detach: false,
            seed: seed.wrapping_mul(ATTEMPTS).wrapping_add(attempt),
            ..base.clone()
        };
        let model = Model::new(cfg, 3, 2)?;
        let plan = model.plan(&cloud, true)?;
        if !embeddings_well_conditioned(&model, &plan)? {
            continue;
        }
        return Ok(GradcheckRow {
            objective,
            params: model.num_params(),
            max_rel_error: joint_gradient_error(&model, &plan)?,
        });
    }
    Err(invalid(format!("no well-conditioned toy model for seed {seed}")))
}

fn regression_check(seed: u64) -> Result<GradcheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..ATTEMPTS {
        let block = ApmBlock::new(1, 1, &mut rng)?;
        let z = Tensor::matrix(12, 4, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let target: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        // |.| has a kink at zero residual
        let mut tape = Tape::new();
        let vars = block.register(&mut tape);
        let zi = tape.constant(z.clone());
        let (out, _) = block.forward(&mut tape, &vars, zi, NormMode::Train)?;
        if tape
            .value(out)
            .data()
            .iter()
            .zip(&target)
            .any(|(a, b)| (a - b).abs() < 1e-6)
        {
            continue;
        }
        let base: Vec<f64> = block.params().iter().flat_map(|t| t.data().to_vec()).collect();
        let f = |p: &[f64]| {
            let mut b = block.clone();
            let mut off = 0;
            for t in b.params_mut() {
                let n = t.numel();
                t.data_mut().copy_from_slice(&p[off..off + n]);
                off += n;
            }
            loss_reg_with_grad(&b, &z, &target)
                .map(|(l, g, _)| (l, g))
                .unwrap_or((f64::NAN, vec![f64::NAN; p.len()]))
        };
        return Ok(GradcheckRow {
            objective: "reg",
            params: base.len(),
            max_rel_error: finite_diff_check(f, &base, CHECK_STEP)?,
        });
    }
    Err(invalid(format!("no kink-free regression sample for seed {seed}")))
}

/// Cross-entropy alone, the contrastive term alone, the ambiguity
/// regression alone and the full joint objective of `base`.
pub fn gradient_suite(base: &ModelConfig, seed: u64) -> Result<Vec<GradcheckRow>> {
    Ok(vec![
        backbone_check(base, seed, "ce", 1.0, 0.0)?,
        backbone_check(base, seed, "am", 0.0, 0.0)?,
        regression_check(seed)?,
        backbone_check(base, seed, "joint", base.lambda, base.omega)?,
    ])
}
