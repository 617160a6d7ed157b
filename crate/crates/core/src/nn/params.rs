use serde::{Deserialize, Serialize};

use crate::error::{FedbmError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub len: usize,
}

/// Names and sizes of every trainable parameter and every state buffer
/// (BN running statistics), in flattening order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub params: Vec<Segment>,
    pub buffers: Vec<Segment>,
}

impl Layout {
    pub fn param_len(&self) -> usize {
        self.params.iter().map(|s| s.len).sum()
    }

    pub fn buffer_len(&self) -> usize {
        self.buffers.iter().map(|s| s.len).sum()
    }

    /// Prefixes every segment name, e.g. to nest a sub-model's layout.
    pub fn prefixed(mut self, prefix: &str) -> Self {
        for s in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            s.name = format!("{prefix}.{}", s.name);
        }
        self
    }

    pub fn extend(&mut self, other: Layout) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }
}

/// Flat model snapshot. Parameters and buffers are kept apart so that
/// optimizers only ever touch `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub layout: Layout,
    pub params: Vec<f64>,
    pub buffers: Vec<f64>,
}

impl ParameterVector {
    pub fn new(layout: Layout, params: Vec<f64>, buffers: Vec<f64>) -> Result<Self> {
        let v = Self {
            layout,
            params,
            buffers,
        };
        v.check()?;
        Ok(v)
    }

    pub fn check(&self) -> Result<()> {
        if self.params.len() != self.layout.param_len() {
            return Err(FedbmError::LayoutMismatch(format!(
                "{} parameters for a layout of {}",
                self.params.len(),
                self.layout.param_len()
            )));
        }
        if self.buffers.len() != self.layout.buffer_len() {
            return Err(FedbmError::LayoutMismatch(format!(
                "{} buffer values for a layout of {}",
                self.buffers.len(),
                self.layout.buffer_len()
            )));
        }
        Ok(())
    }

    /// Exact bit pattern of every value, for byte-equality assertions.
    pub fn to_bits(&self) -> Vec<u64> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|v| v.to_bits())
            .collect()
    }
}

/// Models that can be flattened to a [`ParameterVector`] and restored from one.
pub trait Parameterized {
    fn layout(&self) -> Layout;

    /// Parameter slices in layout order.
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn buffer_slices(&self) -> Vec<&[f64]> {
        Vec::new()
    }
    fn buffer_slices_mut(&mut self) -> Vec<&mut [f64]> {
        Vec::new()
    }

    /// Called after parameters were overwritten.
    fn touch(&mut self) {}

    fn flatten(&self) -> ParameterVector {
        ParameterVector {
            layout: self.layout(),
            params: self.param_slices().concat(),
            buffers: self.buffer_slices().concat(),
        }
    }

    fn load(&mut self, vector: &ParameterVector) -> Result<()> {
        vector.check()?;
        if vector.layout != self.layout() {
            return Err(FedbmError::LayoutMismatch(
                "vector layout differs from model layout".into(),
            ));
        }
        load_params(self, &vector.params)?;
        let mut offset = 0;
        for slot in self.buffer_slices_mut() {
            let n = slot.len();
            slot.copy_from_slice(&vector.buffers[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Overwrites only the trainable parameters.
pub fn load_params<M: Parameterized + ?Sized>(model: &mut M, params: &[f64]) -> Result<()> {
    let expected = model.layout().param_len();
    if params.len() != expected {
        return Err(FedbmError::LayoutMismatch(format!(
            "{} parameters for a layout of {expected}",
            params.len()
        )));
    }
    let mut offset = 0;
    for slot in model.param_slices_mut() {
        let n = slot.len();
        slot.copy_from_slice(&params[offset..offset + n]);
        offset += n;
    }
    model.touch();
    Ok(())
}

pub(crate) fn segment(name: &str, len: usize) -> Segment {
    Segment {
        name: name.to_string(),
        len,
    }
}
