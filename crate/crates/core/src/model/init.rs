use rand::Rng as _;

use crate::numerics::Tensor;
use crate::rng::Rng;

/// Glorot-uniform initialization.
pub fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, limit)
}

/// Uniform entries in `(-limit, limit)`.
pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(rows, cols, data).expect("shape matches length")
}

/// Creates fresh parameters or looks up existing ones by name, so layer
/// constructors serve both initialization and checkpoint loading.
pub enum ParamSource<'a> {
    Create {
        store: &'a mut crate::numerics::ParamStore,
        rng: &'a mut Rng,
    },
    Attach(&'a crate::numerics::ParamStore),
}

impl ParamSource<'_> {
    pub fn param(
        &mut self,
        name: &str,
        make: impl FnOnce(&mut Rng) -> Tensor,
    ) -> crate::Result<crate::numerics::ParamId> {
        match self {
            ParamSource::Create { store, rng } => Ok(store.add(name, make(rng))),
            ParamSource::Attach(store) => store
                .id(name)
                .ok_or_else(|| crate::Error::Contract(format!("missing parameter {name}"))),
        }
    }
}
