use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, NumericArray, Tape, Var};

/// One named block of a flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Segment table. Segments are contiguous and cover the buffer exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, shape) in blocks {
            let n: usize = shape.iter().product();
            segments.push(Segment {
                name: name.into(),
                shape,
                offset,
            });
            offset += n;
        }
        Self { segments, len: offset }
    }

    /// Checks that a deserialized table is contiguous and non-overlapping.
    pub fn validate(&self) -> Result<(), AutodiffError> {
        let mut offset = 0;
        for s in &self.segments {
            if s.offset != offset {
                return Err(AutodiffError::LayoutMismatch);
            }
            offset += s.len();
        }
        if offset != self.len {
            return Err(AutodiffError::LayoutMismatch);
        }
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

fn same_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

macro_rules! flat_buffer {
    ($name:ident) => {
        impl $name {
            pub fn zeros(layout: Arc<Layout>) -> Self {
                let data = vec![0.0; layout.len()];
                Self { layout, data }
            }

            pub fn from_vec(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self, AutodiffError> {
                if data.len() != layout.len() {
                    return Err(AutodiffError::LayoutMismatch);
                }
                Ok(Self { layout, data })
            }

            pub fn layout(&self) -> &Arc<Layout> {
                &self.layout
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.data
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.data
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn segment(&self, name: &str) -> Option<&[f64]> {
                self.layout.segment(name).map(|s| &self.data[s.range()])
            }

            pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
                let r = self.layout.segment(name)?.range();
                Some(&mut self.data[r])
            }

            pub fn segment_array(&self, index: usize) -> NumericArray {
                let s = &self.layout.segments()[index];
                NumericArray::new(s.shape.clone(), self.data[s.range()].to_vec())
                    .expect("segment shape matches its range")
            }

            pub fn norm(&self) -> f64 {
                self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|v| v.is_finite())
            }

            pub fn same_layout(&self, layout: &Arc<Layout>) -> bool {
                same_layout(&self.layout, layout)
            }
        }
    };
}

/// Flat model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

/// `∂L/∂θ` with the same layout as the parameters it differentiates.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

flat_buffer!(ParameterVector);
flat_buffer!(GradientVector);

impl ParameterVector {
    /// `θ += a · g`
    pub fn axpy(&mut self, a: f64, g: &GradientVector) -> Result<(), AutodiffError> {
        if !same_layout(&self.layout, &g.layout) {
            return Err(AutodiffError::LayoutMismatch);
        }
        for (p, d) in self.data.iter_mut().zip(&g.data) {
            *p += a * d;
        }
        Ok(())
    }

    pub fn add(&self, other: &ParameterVector) -> Result<ParameterVector, AutodiffError> {
        if !same_layout(&self.layout, &other.layout) {
            return Err(AutodiffError::LayoutMismatch);
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self {
            layout: self.layout.clone(),
            data,
        })
    }
}

impl GradientVector {
    pub(crate) fn from_parts(layout: Arc<Layout>, parts: Vec<NumericArray>) -> Result<Self, AutodiffError> {
        if parts.len() != layout.segments().len() {
            return Err(AutodiffError::LayoutMismatch);
        }
        let mut data = Vec::with_capacity(layout.len());
        for (seg, part) in layout.segments().iter().zip(parts) {
            if part.len() != seg.len() {
                return Err(AutodiffError::LayoutMismatch);
            }
            data.extend(part.into_data());
        }
        Ok(Self { layout, data })
    }

    pub fn add_assign(&mut self, other: &GradientVector) -> Result<(), AutodiffError> {
        if !same_layout(&self.layout, &other.layout) {
            return Err(AutodiffError::LayoutMismatch);
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Rescales to `max_norm` if the global L2 norm exceeds it. Returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }
}

/// Tape nodes standing in for each segment of a parameter vector. The nodes
/// are leaves when bound directly, or arbitrary nodes (e.g. an adapted
/// `θ - α∇L`) when created with [`ParamNodes::with_vars`].
#[derive(Clone, Debug)]
pub struct ParamNodes {
    tape_id: u64,
    layout: Arc<Layout>,
    vars: Vec<Var>,
}

impl ParamNodes {
    pub fn bind(tape: &mut Tape, params: &ParameterVector) -> Result<Self, AutodiffError> {
        let vars = (0..params.layout.segments().len())
            .map(|i| tape.leaf(params.segment_array(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            tape_id: tape.id(),
            layout: params.layout.clone(),
            vars,
        })
    }

    pub fn with_vars(&self, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), self.vars.len());
        Self {
            tape_id: self.tape_id,
            layout: self.layout.clone(),
            vars,
        }
    }

    pub fn tape_id(&self) -> u64 {
        self.tape_id
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.layout.index_of(name).map(|i| self.vars[i])
    }
}
