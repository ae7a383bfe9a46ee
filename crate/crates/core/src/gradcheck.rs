//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>, // input, element, analytic, fd
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Compares analytic gradients of a scalar readout against central finite
/// differences. `build` must construct the same computation from the given
/// leaf nodes every time it is called.
///
/// Relative error uses a small absolute floor so that exactly-zero gradient
/// pairs compare clean.
pub fn check_gradients<T, F>(
    inputs: &[Tensor<T>],
    build: F,
    step: f64,
    max_probes_per_input: usize,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor<T>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let root = build(&mut g, &ids);
        g.value(root).item().as_f64()
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &ids);
    let grads = g.backward(root, None);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };

    for (ii, input) in inputs.iter().enumerate() {
        let n = input.len();
        if n == 0 {
            continue;
        }
        let analytic = grads.of(ids[ii]);
        let elems: Vec<usize> = if n <= max_probes_per_input {
            (0..n).collect()
        } else {
            (0..max_probes_per_input)
                .map(|_| rng.gen_range(0..n))
                .collect()
        };
        for e in elems {
            let an = analytic.map(|t| t.data()[e].as_f64()).unwrap_or(0.0);
            let mut plus = inputs.to_vec();
            plus[ii].data_mut()[e] = plus[ii].data()[e] + T::of_f64(step);
            let mut minus = inputs.to_vec();
            minus[ii].data_mut()[e] = minus[ii].data()[e] - T::of_f64(step);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let denom = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ii, e, an, fd));
            }
        }
    }
    report
}
