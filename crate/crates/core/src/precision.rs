//! Selective FP16 conversion.
//!
//! Matched linears store weight and bias as binary16 and emit binary16
//! activations. Everything else runs in f32: layer norm statistics and
//! parameters, softmax, residual adds, the class/position embeddings, and
//! every matmul accumulator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Linear, Projection, VitModel};
use crate::pattern::{any_match, LayerPattern};
use crate::tensor::{cast, Dtype};

/// Operations and parameters that are never converted, whatever the policy.
/// None of them is a linear layer name, so no convert pattern can reach them.
pub const KEEP_F32: [&str; 5] = [
    "layernorm parameters",
    "softmax",
    "residual adds",
    "embeddings (class token, position)",
    "matmul accumulation",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub convert: Vec<LayerPattern>,
}

impl Default for PrecisionPolicy {
    /// Every attention and MLP linear, the patch embedding and the classifier.
    fn default() -> Self {
        PrecisionPolicy {
            convert: vec![LayerPattern::new("**")],
        }
    }
}

impl PrecisionPolicy {
    pub fn new(convert: Vec<LayerPattern>) -> Self {
        PrecisionPolicy { convert }
    }
}

/// Casts every linear matched by `policy` to F16 (round to nearest even).
/// Layers already in F16 are left untouched, so conversion is idempotent.
pub fn to_fp16(model: &VitModel, policy: &PrecisionPolicy) -> Result<VitModel> {
    let mut out = model.clone();
    for (name, proj) in out.projections_mut() {
        if !any_match(&policy.convert, &name) {
            continue;
        }
        match proj {
            Projection::Quantized(_) => {
                return Err(Error::PrecisionState(format!(
                    "`{name}` is INT8-quantized and cannot also be converted to f16"
                )))
            }
            Projection::Float(l) if l.dtype() == Dtype::F16 => {}
            Projection::Float(l) => {
                *l = Linear::new(cast(&l.weight, Dtype::F16)?, cast(&l.bias, Dtype::F16)?)?;
            }
        }
    }
    Ok(out)
}
