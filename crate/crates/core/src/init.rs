//! Parameter initialisation helpers shared by the layers.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `[fan_in, fan_out]` weight drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<ParamId> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.add(name, Tensor::uniform(&[fan_in, fan_out], bound, rng), true)
}

/// `[1, n]` bias filled with `value`.
pub(crate) fn bias(store: &mut ParamStore, name: &str, n: usize, value: f64) -> Result<ParamId> {
    store.add(name, Tensor::filled(&[1, n], value), true)
}
