//! Central finite-difference checks of reverse-mode gradients (f64 only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, ParamStore, Tensor, Var};

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// A seeded random subset of at most this many coordinates.
    Sample { count: usize, seed: u64 },
}

fn pick(total: usize, coords: Coords) -> Vec<usize> {
    match coords {
        Coords::All => (0..total).collect(),
        Coords::Sample { count, .. } if count >= total => (0..total).collect(),
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, total, count).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, point: &[Tensor<f64>]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars = point
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).is_scalar() {
        return Err(AutodiffError::NonScalarLoss(g.shape(loss).to_vec()));
    }
    Ok(g.value(loss).item())
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over the probed
/// coordinates of the input tensors of `f`.
pub fn finite_diff_check<F>(f: F, point: &[Tensor<f64>], epsilon: f64, coords: Coords) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars = point
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let sizes: Vec<usize> = point.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut worst = 0.0f64;
    for flat in pick(total, coords) {
        let (mut t, mut i) = (0, flat);
        while i >= sizes[t] {
            i -= sizes[t];
            t += 1;
        }
        let analytic = grads.wrt(vars[t]).map_or(0.0, |gr| gr[i]);
        let mut probe = point.to_vec();
        let base = point[t].data()[i];
        probe[t].data_mut()[i] = base + epsilon;
        let up = eval_scalar(&f, &probe)?;
        probe[t].data_mut()[i] = base - epsilon;
        let down = eval_scalar(&f, &probe)?;
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * epsilon)));
    }
    Ok(worst)
}

/// Same check over the trainable parameters of a store. `f` builds the loss
/// from the (perturbed) store.
pub fn finite_diff_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    epsilon: f64,
    coords: Coords,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut analytic_store = store.clone();
    analytic_store.load_grads(&grads);

    let names: Vec<(String, usize)> = store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.value.numel()))
        .collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let eval = |s: &ParamStore<f64>| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0f64;
    for flat in pick(total, coords) {
        let (mut k, mut i) = (0, flat);
        while i >= names[k].1 {
            i -= names[k].1;
            k += 1;
        }
        let name = &names[k].0;
        let id = store.id(name)?;
        let analytic = analytic_store.get(id).grad[i];
        let mut probe = store.clone();
        let base = store.get(id).value.data()[i];
        probe.get_mut(id).value.data_mut()[i] = base + epsilon;
        let up = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[i] = base - epsilon;
        let down = eval(&probe)?;
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * epsilon)));
    }
    Ok(worst)
}
