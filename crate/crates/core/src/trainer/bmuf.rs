//! Block-wise model-update filtering with Nesterov block momentum.

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// One synchronization step. The block gradient is the mean worker drift
/// from the global model; the momentum buffer low-passes it, the global
/// model absorbs the update, and workers restart from the global model plus
/// a momentum lookahead. Afterwards every worker holds identical parameters.
pub fn bmuf_sync(
    global: &mut ModelParams,
    workers: &mut [ModelParams],
    delta: &mut ModelParams,
    block_momentum: f64,
    block_lr: f64,
) -> Result<()> {
    if workers.is_empty() {
        return Err(Error::Contract("bmuf_sync needs at least one worker".into()));
    }
    for w in workers.iter() {
        if !w.same_names(global) {
            return Err(Error::Contract("worker parameter set does not match global".into()));
        }
    }
    if !delta.same_names(global) {
        return Err(Error::Contract("momentum buffer does not match global".into()));
    }
    // G = mean(worker) - global
    let inv = 1.0 / workers.len() as f32;
    let mut block_grad = global.zeros_like();
    for w in workers.iter() {
        block_grad.axpy(inv, w)?;
    }
    block_grad.axpy(-1.0, global)?;

    delta.scale(block_momentum as f32);
    delta.axpy(block_lr as f32, &block_grad)?;
    global.axpy(1.0, delta)?;

    for w in workers.iter_mut() {
        *w = global.clone();
        w.axpy(block_momentum as f32, delta)?;
    }
    Ok(())
}
