use super::{Graph, NumericsError, ParamStore, Var};

/// Compares analytic gradients against central differences.
///
/// `f` must build a deterministic scalar computation from the parameters in
/// `store`. At most `max_coords_per_param` coordinates of each parameter are
/// probed (evenly strided); pass `usize::MAX` to probe all of them. Returns the
/// maximum of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradient_check<F>(
    store: &mut ParamStore,
    h: f64,
    max_coords_per_param: usize,
    mut f: F,
) -> Result<f64, NumericsError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, NumericsError>,
{
    store.clear_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_param_grads(store);

    let mut eval = |store: &ParamStore| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        Ok(g.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).tensor.numel();
        let stride = if max_coords_per_param >= n {
            1
        } else {
            n.div_ceil(max_coords_per_param.max(1))
        };
        let analytic = store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; n]);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    store.clear_grad();
    Ok(worst)
}
