use rand::seq::index;

use super::network::{Example, FRec, Mode};
use crate::error::Result;
use crate::numerics::{finite_difference_check_on, CheckReport, Evaluation, Graph};
use crate::seeds;

/// Central-difference check of the training loss of `examples` with
/// respect to the trainable parameters. With `max_coordinates`, a seeded
/// uniform subset of coordinates is checked.
pub fn loss_gradient_check(model: &FRec, examples: &[Example], eps: f64, max_coordinates: Option<usize>, seed: u64) -> Result<CheckReport> {
    let base = model.store.flatten_trainable();
    let coordinates: Vec<usize> = match max_coordinates {
        Some(cap) if cap < base.len() => {
            let mut picked = index::sample(&mut seeds::rng(seed, "gradcheck", &[]), base.len(), cap).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..base.len()).collect(),
    };
    let mut probe = model.clone();
    finite_difference_check_on(
        |x, want| {
            probe.store.assign_trainable(x)?;
            let mut g = Graph::new();
            let out = probe.forward_batch(&mut g, examples, Mode::Train)?;
            let value = g.value(out.loss).item()?;
            let gradient = if want {
                let grads = g.backward(out.loss)?;
                Some(probe.store.flatten_gradients(grads.params()))
            } else {
                None
            };
            Ok(Evaluation {
                value,
                gradient,
                kinks: g.kink_signature(),
            })
        },
        &base,
        eps,
        &coordinates,
    )
}
