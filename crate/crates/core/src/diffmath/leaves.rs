use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{GdmError, Result};

/// Parameter containers that expose their trainable arrays in a fixed order.
///
/// `arrays` returns the unconstrained training representation (for example
/// log standard deviations); `set_arrays` consumes the same order back.
pub trait Trainable {
    fn arrays(&self) -> Vec<Matrix>;

    fn set_arrays(&mut self, arrays: &mut ArrayCursor<'_>) -> Result<()>;

    fn num_arrays(&self) -> usize {
        self.arrays().len()
    }

    /// Registers every array as a tape parameter, in order.
    fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.arrays().into_iter().map(|a| tape.param(a)).collect()
    }

    /// Pushes every array as a constant.
    fn constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.arrays().into_iter().map(|a| tape.constant(a)).collect()
    }

    fn with_arrays(&self, arrays: &[Matrix]) -> Result<Self>
    where
        Self: Clone,
    {
        let mut out = self.clone();
        let mut cur = ArrayCursor::new(arrays);
        out.set_arrays(&mut cur)?;
        cur.finish()?;
        Ok(out)
    }
}

/// Sequential reader over tape leaves used when binding parameters.
pub struct Leaves<'a, 't> {
    vars: &'a [Var<'t>],
    pos: usize,
}

impl<'a, 't> Leaves<'a, 't> {
    pub fn new(vars: &'a [Var<'t>]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next(&mut self) -> Result<Var<'t>> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| GdmError::Dimension(format!("ran out of leaves at {}", self.pos)))?;
        self.pos += 1;
        Ok(v)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.vars.len() {
            return Err(GdmError::Dimension(format!(
                "{} leaves supplied, {} consumed",
                self.vars.len(),
                self.pos
            )));
        }
        Ok(())
    }
}

pub struct ArrayCursor<'a> {
    arrays: &'a [Matrix],
    pos: usize,
}

impl<'a> ArrayCursor<'a> {
    pub fn new(arrays: &'a [Matrix]) -> Self {
        Self { arrays, pos: 0 }
    }

    /// Next array, which must have the given shape.
    pub fn take(&mut self, shape: (usize, usize)) -> Result<Matrix> {
        let m = self
            .arrays
            .get(self.pos)
            .ok_or_else(|| GdmError::Dimension(format!("ran out of arrays at {}", self.pos)))?;
        if m.shape() != shape {
            return Err(GdmError::Dimension(format!(
                "array {} has shape {:?}, expected {:?}",
                self.pos,
                m.shape(),
                shape
            )));
        }
        self.pos += 1;
        Ok(m.clone())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.arrays.len() {
            return Err(GdmError::Dimension(format!(
                "{} arrays supplied, {} consumed",
                self.arrays.len(),
                self.pos
            )));
        }
        Ok(())
    }
}
