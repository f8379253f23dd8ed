use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{Model, ModelConfig, ModelError};
use crate::numerics::Real;

/// Which target parameters were copied from the source and which were freshly initialized.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub initialized: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransferError {
    ShapeConflict { name: String, source: (usize, usize), target: (usize, usize) },
    Model(ModelError),
}

impl fmt::Display for TransferError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransferError::ShapeConflict { name, source, target } => write!(
                f,
                "cannot transfer {name}: pretrained shape {}x{} but target needs {}x{}",
                source.0, source.1, target.0, target.1
            ),
            TransferError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TransferError {}

/// Builds a model for `target` seeded with `seed`, then overwrites every parameter the source shares by name.
pub fn transfer_weights<T: Real>(
    source: &Model<T>,
    target: ModelConfig,
    seed: u64,
) -> Result<(Model<T>, TransferReport), TransferError> {
    let mut model = Model::new(target, seed).map_err(TransferError::Model)?;
    let mut report = TransferReport::default();
    for p in model.params.iter_mut() {
        match source.params.find(&p.name) {
            Some(id) => {
                let src = &source.params.get(id).value;
                if src.dims2() != p.value.dims2() {
                    return Err(TransferError::ShapeConflict {
                        name: p.name.clone(),
                        source: src.dims2(),
                        target: p.value.dims2(),
                    });
                }
                p.value = src.clone();
                report.copied.push(p.name.clone());
            }
            None => report.initialized.push(p.name.clone()),
        }
    }
    Ok((model, report))
}
