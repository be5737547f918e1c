use rand::seq::SliceRandom;

use crate::datagen::{LabeledDataset, Partition};
use crate::error::{invalid, Error, Result};
use crate::model::{evaluate, loss_and_grad, ModelSpec, ParamVector};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSgd {
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

/// One client's local dataset.
#[derive(Debug, Clone, Copy)]
pub struct ClientData<'a> {
    pub id: usize,
    pub data: &'a LabeledDataset,
    pub indices: &'a [usize],
}

/// Runs local mini-batch SGD from `global` and returns the sum of the step
/// gradients, i.e. `(global - local_final) / lr`.
pub fn local_update(
    global: &ParamVector,
    spec: &ModelSpec,
    client: ClientData<'_>,
    sgd: &LocalSgd,
    lr: f64,
    rng: &mut Rng,
) -> Result<ParamVector> {
    if client.indices.is_empty() {
        return Err(invalid(format!("client {} has no data", client.id)));
    }
    if sgd.epochs == 0 || sgd.batch_size == 0 {
        return Err(invalid("local SGD needs epochs >= 1 and batch_size >= 1"));
    }
    let mut local = global.clone();
    let mut cumulative = global.zeros_like();
    let mut order = client.indices.to_vec();
    for _ in 0..sgd.epochs {
        order.shuffle(rng);
        for batch in order.chunks(sgd.batch_size) {
            let (_, grad) = match loss_and_grad(&local, spec, client.data, batch, sgd.weight_decay) {
                Ok(v) => v,
                Err(Error::NonFiniteActivation { .. } | Error::Numeric(_)) => {
                    return Err(Error::NonFiniteGradient { client: client.id })
                }
                Err(e) => return Err(e),
            };
            if grad.values().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { client: client.id });
            }
            local.add_scaled(-lr, &grad);
            cumulative.add_scaled(1.0, &grad);
        }
    }
    Ok(cumulative)
}

/// `global - lr / C * sum(cumgrads)`, summed in the order given.
pub fn aggregate(global: &ParamVector, cumgrads: &[&ParamVector], lr: f64) -> Result<ParamVector> {
    if cumgrads.is_empty() {
        return Err(invalid("aggregate needs at least one update"));
    }
    if let Some(i) = cumgrads.iter().position(|g| !g.same_layout(global)) {
        return Err(invalid(format!("update {i} does not match the model layout")));
    }
    let mut sum = global.zeros_like();
    for g in cumgrads {
        sum.add_scaled(1.0, g);
    }
    let mut out = global.clone();
    out.add_scaled(-lr / cumgrads.len() as f64, &sum);
    Ok(out)
}

/// Training loss of every client on its full local dataset (no decay term).
pub fn evaluate_all_losses(
    params: &ParamVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
    partition: &Partition,
) -> Result<Vec<f64>> {
    let eval = |k: usize| evaluate(params, spec, data, partition.client(k)).map(|(loss, _)| loss);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..partition.num_clients()).into_par_iter().map(eval).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..partition.num_clients()).map(eval).collect()
    }
}

/// `sum_k p_k l_k`.
pub fn global_loss(losses: &[f64], partition: &Partition) -> f64 {
    losses.iter().zip(partition.weights()).map(|(l, p)| l * p).sum()
}
