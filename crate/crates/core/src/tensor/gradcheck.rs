use super::{Graph, NodeId, ParamStore, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients against central differences with step
/// `epsilon` for every scalar of every trainable parameter, returning the
/// worst relative error. Returns 0 when nothing is trainable.
///
/// `loss` must build a scalar loss from the given store on a fresh graph.
pub fn grad_check<F>(store: &ParamStore, epsilon: f64, loss: F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let root = loss(store, &mut g)?;
    let grads = g.backward(root)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss(s, &mut g)?;
        Ok(g.value(root).values()[0])
    };

    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.trainable_ids() {
        let original = store.get(id).tensor().values().to_vec();
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; original.len()]);
        let mut probe = original.clone();
        for i in 0..original.len() {
            probe[i] = original[i] + epsilon;
            work.load_values(id, &probe)?;
            let up = eval(&work)?;
            probe[i] = original[i] - epsilon;
            work.load_values(id, &probe)?;
            let down = eval(&work)?;
            probe[i] = original[i];
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        work.load_values(id, &original)?;
    }
    Ok(worst)
}
