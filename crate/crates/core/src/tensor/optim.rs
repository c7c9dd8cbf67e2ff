use super::ParamStore;
use crate::error::{Error, Result};

/// Plain gradient descent: `value -= lr * grad` for every trainable
/// parameter, then every gradient is reset to zero.
pub fn sgd_update(store: &mut ParamStore, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::usage(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    for p in store.iter_mut() {
        if p.trainable() {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= learning_rate * g;
            }
        }
        p.grad.fill(0.0);
    }
    Ok(())
}
