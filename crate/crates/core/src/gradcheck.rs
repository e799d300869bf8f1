//! Finite-difference verification of every parameter gradient of the full
//! model on a small fixed graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Matrix, Mode, OpKind, Tape};
use crate::dataset::GraphInstance;
use crate::features::compute_wl_codes;
use crate::model::{
    classification_loss, forward_batch, prepare_graph, reconstruction_loss, structure_loss, Bound,
    ModelConfig, ModelError, ModelParams, PreparedGraph, ResidualMode,
};
use crate::unify::{Strategy, UnifyPlan};

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub intermediate: usize,
    pub residual: ResidualMode,
    pub step: f64,
    pub init_std: f64,
    pub seed: u64,
    /// Corrupts the backward rule of one op kind (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            hidden: 32,
            heads: 2,
            layers: 2,
            intermediate: 32,
            residual: ResidualMode::None,
            step: 1e-5,
            init_std: 0.3,
            seed: 7,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub relative_error: f64,
    pub max_analytic: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.relative_error).fold(0.0, f64::max)
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&GroupError> {
        self.groups
            .iter()
            .filter(|g| !(g.relative_error < tolerance))
            .collect()
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.failures(tolerance).is_empty()
    }
}

/// Five nodes, a triangle plus a tail, with tags and two-dimensional
/// attributes.
pub fn toy_graph() -> GraphInstance {
    GraphInstance::from_undirected(
        5,
        &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0)],
        1,
    )
    .and_then(|g| g.with_tags(vec![0, 1, 0, 2, 1]))
    .and_then(|g| {
        g.with_attributes(Matrix::from_vec(
            5,
            2,
            vec![0.5, -1.0, 1.5, 0.25, -0.75, 0.8, 0.1, -0.3, 1.2, 0.6],
        ))
    })
    .expect("toy graph is valid")
}

fn setup(opts: &GradcheckOptions) -> Result<(ModelParams, PreparedGraph), ModelError> {
    let g = toy_graph();
    // Two segments of three slots, so dummy slots take part.
    let plan = UnifyPlan {
        strategy: Strategy::SegmentShifting,
        k: 3,
        n_adj: 6,
    };
    let config = ModelConfig {
        hidden: opts.hidden,
        heads: opts.heads,
        layers: opts.layers,
        intermediate: opts.intermediate,
        residual: opts.residual,
        attr_dim: 2,
        n_adj: plan.n_adj,
        classes: 3,
        tag_vocab_size: 3,
        init_std: opts.init_std,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&config, opts.seed)?;
    let codes = compute_wl_codes(&g, 2)?;
    let order: Vec<usize> = (0..g.node_count).collect();
    let prepared = prepare_graph(&g, &codes, &plan, &config, &order)?;
    Ok((params, prepared))
}

/// Classification + structure + reconstruction loss in train mode with a
/// dropout stream reseeded on every call.
fn total_loss(
    tape: &mut Tape,
    params: &ModelParams,
    graph: &PreparedGraph,
    seed: u64,
) -> Result<(crate::autodiff::Tensor, Bound), ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = Bound::new(tape, params)?;
    let graphs = [graph];
    let out = forward_batch(tape, params, &bound, &graphs, &mut rng)?;
    let ce = classification_loss(tape, &out, &graphs)?;
    let rec = reconstruction_loss(tape, params, &bound, &out, &graphs)?;
    let mut loss = tape.add(ce, rec)?;
    if let Some(s) = structure_loss(tape, &out, &graphs)? {
        loss = tape.add(loss, s)?;
    }
    Ok((loss, bound))
}

fn loss_value(params: &ModelParams, graph: &PreparedGraph, seed: u64) -> Result<f64, ModelError> {
    let mut tape = Tape::new(Mode::Train);
    tape.set_recording(false);
    let (loss, _) = total_loss(&mut tape, params, graph, seed)?;
    Ok(tape.value(loss).item())
}

/// Floor of the relative-error denominator. The key bias has an identically
/// zero gradient (softmax is shift invariant), so its differences are pure
/// rounding noise of order 1e-11.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Relative error per parameter tensor:
/// `max|analytic − numeric| / max(max|analytic|, max|numeric|, GRADIENT_FLOOR)`.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, ModelError> {
    let (mut params, graph) = setup(opts)?;
    let dropout_seed = opts.seed.wrapping_add(1);

    let mut tape = Tape::new(Mode::Train);
    tape.inject_backward_fault(opts.fault);
    let (loss, bound) = total_loss(&mut tape, &params, &graph, dropout_seed)?;
    tape.backward(loss)?;
    let analytic = bound.grads(&tape, &params);

    let mut groups = Vec::with_capacity(analytic.len());
    for (p, grad) in analytic.iter().enumerate() {
        let mut numeric = Matrix::zeros(grad.rows(), grad.cols());
        for i in 0..grad.len() {
            let orig = params.tensors()[p].data()[i];
            params.tensors_mut()[p].data_mut()[i] = orig + opts.step;
            let up = loss_value(&params, &graph, dropout_seed)?;
            params.tensors_mut()[p].data_mut()[i] = orig - opts.step;
            let down = loss_value(&params, &graph, dropout_seed)?;
            params.tensors_mut()[p].data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * opts.step);
        }
        let scale = grad.max_abs().max(numeric.max_abs()).max(GRADIENT_FLOOR);
        groups.push(GroupError {
            name: params.names()[p].clone(),
            relative_error: grad.max_abs_diff(&numeric) / scale,
            max_analytic: grad.max_abs(),
        });
    }
    Ok(GradcheckReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(residual: ResidualMode) -> GradcheckOptions {
        GradcheckOptions {
            hidden: 8,
            heads: 2,
            layers: 1,
            intermediate: 8,
            residual,
            ..GradcheckOptions::default()
        }
    }

    #[test]
    fn small_model_passes_in_both_modes() {
        for mode in [ResidualMode::None, ResidualMode::Raw] {
            let r = run_gradcheck(&small(mode)).unwrap();
            assert!(r.passed(GRADCHECK_TOLERANCE), "{mode}: {:?}", r.failures(GRADCHECK_TOLERANCE));
            assert_eq!(
                r.groups.iter().any(|g| g.name.starts_with("residual")),
                mode == ResidualMode::Raw
            );
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        for op in [OpKind::SoftmaxRows, OpKind::LayerNorm, OpKind::Gelu, OpKind::CosineRows] {
            let opts = GradcheckOptions {
                fault: Some(op),
                ..small(ResidualMode::None)
            };
            let r = run_gradcheck(&opts).unwrap();
            assert!(!r.passed(GRADCHECK_TOLERANCE), "{op} fault went unnoticed");
        }
    }
}
