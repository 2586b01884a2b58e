use crate::error::{Error, Result};
use crate::models::{Grads, ParamSet};
use crate::scalar::Scalar;

/// Plain SGD: `θ ← θ − lr·g` for every trainable, unfrozen block in `grads`.
///
/// Frozen blocks and running-stat buffers are never written. Blocks without
/// an entry in `grads` are left as they are.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, grads: &Grads<T>, lr: T) -> Result<()> {
    for (name, g) in grads {
        let block = params
            .get(name)
            .ok_or_else(|| Error::Misaligned(format!("gradient for unknown block {name}")))?;
        if block.numel() != g.len() {
            return Err(Error::Misaligned(format!(
                "gradient for {name} has {} elements, block has {}",
                g.len(),
                block.numel()
            )));
        }
        if params.is_buffer(name) {
            return Err(Error::Misaligned(format!("gradient for buffer {name}")));
        }
    }
    if lr == T::zero() {
        return Ok(());
    }
    for (name, g) in grads {
        if params.is_frozen(name) {
            continue;
        }
        let block = params.get_mut_unchecked(name);
        for (p, &d) in block.data_mut().iter_mut().zip(g) {
            *p = *p - lr * d;
        }
    }
    Ok(())
}
