//! Central finite-difference verification of the backward passes.
//!
//! Checks run in double precision with step `h = 1e-5` and compare the
//! analytic gradient of a scalar readout against `(f(x+h) - f(x-h)) / 2h`
//! per element, reporting the max relative error per tensor.

use super::graph::{Graph, NodeId};
use super::ParamStore;
use crate::error::Result;
use crate::rng::rng_from_seed;
use crate::tensor::{Shape, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Scale floor in the relative-error denominator: gradients smaller than
/// this are compared at the floor's scale, i.e. effectively absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Verify every parameter and input gradient of the scalar function built by
/// `builder` against central finite differences.
///
/// `builder` receives leaf node ids for `inputs` in order and must return a
/// scalar output node. It is re-invoked for each perturbed evaluation, so it
/// must be a pure function of the store and inputs.
pub fn gradcheck<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    builder: F,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = builder(&mut g, &ids)?;
        Ok(g.scalar_value(out))
    };

    // Analytic gradients.
    let mut g = Graph::new(store);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = builder(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut entries = Vec::new();

    // Parameters.
    let mut fd_store = store.clone();
    for p in 0..store.len() {
        let name = store.tensor(p).name().to_string();
        let numel = store.tensor(p).shape().numel();
        let mut max_rel: f64 = 0.0;
        for i in 0..numel {
            let orig = fd_store.tensor(p).values().data()[i];
            fd_store.tensor_mut(p).values_mut().data_mut()[i] = orig + FD_STEP;
            let up = eval(&fd_store, inputs)?;
            fd_store.tensor_mut(p).values_mut().data_mut()[i] = orig - FD_STEP;
            let down = eval(&fd_store, inputs)?;
            fd_store.tensor_mut(p).values_mut().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.params[p]
                .as_ref()
                .map(|t| t.data()[i])
                .unwrap_or(0.0);
            max_rel = max_rel.max(relative_error(analytic, fd));
        }
        entries.push(GradCheckEntry {
            pass: max_rel < tol,
            name,
            max_rel_err: max_rel,
        });
    }

    // Inputs.
    let mut fd_inputs = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        for i in 0..input.shape().numel() {
            let orig = fd_inputs[k].data()[i];
            fd_inputs[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(store, &fd_inputs)?;
            fd_inputs[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(store, &fd_inputs)?;
            fd_inputs[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.nodes[ids[k]]
                .as_ref()
                .map(|t| t.data()[i])
                .unwrap_or(0.0);
            max_rel = max_rel.max(relative_error(analytic, fd));
        }
        entries.push(GradCheckEntry {
            pass: max_rel < tol,
            name: format!("input{k}"),
            max_rel_err: max_rel,
        });
    }

    Ok(GradCheckReport { tol, entries })
}

/// Gradient checks for every substrate op, each against a random readout.
/// Returns `(check name, report)` pairs; the full-network check lives with
/// the network module.
pub fn substrate_suite() -> Result<Vec<(String, GradCheckReport)>> {
    let tol = 1e-4;
    let mut rng = rng_from_seed(0x5eed);
    let mut out = Vec::new();

    // conv2d, stride 1 and 2
    for stride in [1usize, 2] {
        let mut store = ParamStore::<f64>::new();
        store.add("conv.weight", Tensor::zeros(Shape::new(3, 2, 3, 3)))?;
        store.add("conv.bias", Tensor::zeros(Shape::new(1, 3, 1, 1)))?;
        store.randomize_all(&mut rng, 0.5);
        let x = Tensor::<f64>::randn(Shape::new(2, 2, 5, 5), &mut rng);
        let oh = Shape::new(2, 3, 5usize.div_ceil(stride), 5usize.div_ceil(stride));
        let readout = Tensor::<f64>::randn(oh, &mut rng);
        let report = gradcheck(
            &store,
            &[x],
            |g, ids| {
                let y = g.conv2d(ids[0], 0, 1, stride)?;
                g.weighted_sum(y, readout.clone())
            },
            tol,
        )?;
        out.push((format!("conv2d_stride{stride}"), report));
    }

    // upsample_nearest
    {
        let store = ParamStore::<f64>::new();
        let x = Tensor::<f64>::randn(Shape::new(1, 2, 3, 4), &mut rng);
        let readout = Tensor::<f64>::randn(Shape::new(1, 2, 6, 8), &mut rng);
        let report = gradcheck(
            &store,
            &[x],
            |g, ids| {
                let y = g.upsample_nearest(ids[0]);
                g.weighted_sum(y, readout.clone())
            },
            tol,
        )?;
        out.push(("upsample_nearest".into(), report));
    }

    // silu
    {
        let store = ParamStore::<f64>::new();
        let x = Tensor::<f64>::randn(Shape::new(1, 1, 4, 4), &mut rng);
        let readout = Tensor::<f64>::randn(Shape::new(1, 1, 4, 4), &mut rng);
        let report = gradcheck(
            &store,
            &[x],
            |g, ids| {
                let y = g.silu(ids[0]);
                g.weighted_sum(y, readout.clone())
            },
            tol,
        )?;
        out.push(("silu".into(), report));
    }

    // leaky_relu, keeping inputs away from the kink at 0
    {
        let store = ParamStore::<f64>::new();
        let x = Tensor::<f64>::randn(Shape::new(1, 1, 4, 4), &mut rng)
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let readout = Tensor::<f64>::randn(Shape::new(1, 1, 4, 4), &mut rng);
        let report = gradcheck(
            &store,
            &[x],
            |g, ids| {
                let y = g.leaky_relu(ids[0], 0.2);
                g.weighted_sum(y, readout.clone())
            },
            tol,
        )?;
        out.push(("leaky_relu".into(), report));
    }

    // reflect_pad + crop
    {
        let store = ParamStore::<f64>::new();
        let x = Tensor::<f64>::randn(Shape::new(1, 2, 4, 5), &mut rng);
        let readout = Tensor::<f64>::randn(Shape::new(1, 2, 3, 4), &mut rng);
        let report = gradcheck(
            &store,
            &[x],
            |g, ids| {
                let p = g.reflect_pad(ids[0], [1, 2, 2, 1])?;
                let c = g.crop(p, 2, 1, 3, 4)?;
                g.weighted_sum(c, readout.clone())
            },
            tol,
        )?;
        out.push(("reflect_pad_crop".into(), report));
    }

    // concat + arithmetic
    {
        let store = ParamStore::<f64>::new();
        let a = Tensor::<f64>::randn(Shape::new(1, 2, 3, 3), &mut rng);
        let b = Tensor::<f64>::randn(Shape::new(1, 1, 3, 3), &mut rng);
        let readout = Tensor::<f64>::randn(Shape::new(1, 3, 3, 3), &mut rng);
        let report = gradcheck(
            &store,
            &[a, b],
            |g, ids| {
                let s = g.scale(ids[1], -0.7);
                let d = g.sub(ids[1], s)?;
                let cat = g.concat_channels(&[ids[0], d])?;
                g.weighted_sum(cat, readout.clone())
            },
            tol,
        )?;
        out.push(("concat_scale_sub".into(), report));
    }

    // mean-abs-error loss, inputs kept away from the |.| kink
    {
        let store = ParamStore::<f64>::new();
        let x = Tensor::<f64>::randn(Shape::new(1, 1, 4, 4), &mut rng).map(|v| v + 3.0);
        let target = Tensor::<f64>::randn(Shape::new(1, 1, 4, 4), &mut rng);
        let report = gradcheck(
            &store,
            &[x],
            |g, ids| g.mean_abs_error(ids[0], target.clone()),
            tol,
        )?;
        out.push(("mean_abs_error".into(), report));
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substrate_ops_pass_fd_checks() {
        for (name, report) in substrate_suite().unwrap() {
            assert!(
                report.all_pass(),
                "{name} failed: max rel err {}",
                report.max_err()
            );
        }
    }

    /// A purely linear map has no truncation error: FD agrees to roundoff.
    #[test]
    fn linear_layer_is_exact_to_roundoff() {
        let mut rng = rng_from_seed(77);
        let mut store = ParamStore::<f64>::new();
        store
            .add("lin.weight", Tensor::zeros(Shape::new(2, 2, 1, 1)))
            .unwrap();
        store
            .add("lin.bias", Tensor::zeros(Shape::new(1, 2, 1, 1)))
            .unwrap();
        store.randomize_all(&mut rng, 1.0);
        let x = Tensor::<f64>::randn(Shape::new(1, 2, 3, 3), &mut rng);
        let readout = Tensor::<f64>::randn(Shape::new(1, 2, 3, 3), &mut rng);
        let report = gradcheck(
            &store,
            &[x],
            |g, ids| {
                let y = g.conv2d(ids[0], 0, 1, 1)?;
                g.weighted_sum(y, readout.clone())
            },
            1e-8,
        )
        .unwrap();
        assert!(report.all_pass(), "max rel err {}", report.max_err());
    }

    /// Negative control: a corrupted analytic gradient must be reported.
    #[test]
    fn corrupted_gradient_is_detected() {
        let fd = 1.0;
        let corrupted = 1.01; // 1% off
        assert!(relative_error(corrupted, fd) > 1e-4);
        // and through the full harness: claim the graph computes silu but
        // evaluate leaky_relu in its place for the FD probes
        let store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(5);
        let x = Tensor::<f64>::randn(Shape::new(1, 1, 3, 3), &mut rng).map(|v| v + 2.0);
        let readout = Tensor::<f64>::randn(Shape::new(1, 1, 3, 3), &mut rng);
        let first_call = std::cell::Cell::new(true);
        let report = gradcheck(
            &store,
            &[x],
            |g, ids| {
                // first invocation (analytic pass) builds a different graph
                // than the FD re-evaluations: a deliberately wrong backward
                let y = if first_call.replace(false) {
                    g.scale(ids[0], 0.5)
                } else {
                    g.silu(ids[0])
                };
                g.weighted_sum(y, readout.clone())
            },
            1e-4,
        )
        .unwrap();
        assert!(!report.all_pass(), "corruption went undetected");
    }

    #[test]
    fn report_collects_per_tensor_errors() {
        let suite = substrate_suite().unwrap();
        let (_, conv) = &suite[0];
        // weight, bias, input
        assert_eq!(conv.entries.len(), 3);
        assert!(conv.entries.iter().all(|e| e.max_rel_err < 1e-4));
    }

    #[test]
    fn property_random_shapes_silu_conv_chain() {
        let mut rng = rng_from_seed(123);
        for _ in 0..5 {
            let ci = rng.random_range(1..3);
            let co = rng.random_range(1..3);
            let h = rng.random_range(3..6);
            let w = rng.random_range(3..6);
            let mut store = ParamStore::<f64>::new();
            store
                .add("w", Tensor::zeros(Shape::new(co, ci, 3, 3)))
                .unwrap();
            store
                .add("b", Tensor::zeros(Shape::new(1, co, 1, 1)))
                .unwrap();
            store.randomize_all(&mut rng, 0.5);
            let x = Tensor::<f64>::randn(Shape::new(1, ci, h, w), &mut rng);
            let readout = Tensor::<f64>::randn(Shape::new(1, co, h, w), &mut rng);
            let report = gradcheck(
                &store,
                &[x],
                |g, ids| {
                    let a = g.silu(ids[0]);
                    let y = g.conv2d(a, 0, 1, 1)?;
                    let z = g.silu(y);
                    g.weighted_sum(z, readout.clone())
                },
                1e-4,
            )
            .unwrap();
            assert!(report.all_pass(), "cfg ({ci},{co},{h},{w})");
        }
    }
}
