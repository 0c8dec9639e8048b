use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentKind {
    LinearWeight,
    Bias,
    Embedding,
    NormScale,
}

impl SegmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentKind::LinearWeight => "linear-weight",
            SegmentKind::Bias => "bias",
            SegmentKind::Embedding => "embedding",
            SegmentKind::NormScale => "norm-scale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "linear-weight" => SegmentKind::LinearWeight,
            "bias" => SegmentKind::Bias,
            "embedding" => SegmentKind::Embedding,
            "norm-scale" => SegmentKind::NormScale,
            _ => return None,
        })
    }
}

/// A named, contiguous slice of the flat parameter vector.
///
/// Matrices are stored row-major as `[fan_in, fan_out]`, so an affine map
/// computes `x · W` for row vectors `x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSegment {
    pub name: String,
    pub offset: usize,
    pub size: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub kind: SegmentKind,
}

impl LayerSegment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.size
    }

    /// Shape as `(rows, cols)` when the segment is viewed as a matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.fan_in, self.fan_out)
    }
}

/// Ordered segment list covering a parameter vector end to end.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<LayerSegment>,
    len: usize,
}

/// Index of a segment inside its [`Layout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentId(pub usize);

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment of `fan_in × fan_out` scalars.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        kind: SegmentKind,
    ) -> SegmentId {
        assert!(fan_in >= 1 && fan_out >= 1, "segment dims must be >= 1");
        let size = fan_in * fan_out;
        self.segments.push(LayerSegment {
            name: name.into(),
            offset: self.len,
            size,
            fan_in,
            fan_out,
            kind,
        });
        self.len += size;
        SegmentId(self.segments.len() - 1)
    }

    pub fn from_segments(segments: Vec<LayerSegment>) -> Result<Self> {
        let mut offset = 0;
        for s in &segments {
            if s.offset != offset {
                return Err(Error::config(format!(
                    "segment {} starts at {} but expected {}",
                    s.name, s.offset, offset
                )));
            }
            if s.fan_in == 0 || s.fan_out == 0 || s.size != s.fan_in * s.fan_out {
                return Err(Error::config(format!(
                    "segment {} has size {} inconsistent with {}x{}",
                    s.name, s.size, s.fan_in, s.fan_out
                )));
            }
            offset += s.size;
        }
        Ok(Self {
            segments,
            len: offset,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[LayerSegment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &LayerSegment {
        &self.segments[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&LayerSegment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// The flat trainable parameter vector together with its segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::config(format!(
                "parameter vector has {} values but layout covers {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the values; the length stays fixed.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn segment_values(&self, id: SegmentId) -> &[f64] {
        &self.values[self.layout.segment(id).range()]
    }

    /// Returns `θ ⊙ M`.
    pub fn masked(&self, mask: &[bool]) -> Result<ParamVector> {
        if mask.len() != self.len() {
            return Err(Error::config(format!(
                "mask length {} does not match parameter length {}",
                mask.len(),
                self.len()
            )));
        }
        let values = self
            .values
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }
}

/// A gradient over every coordinate of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
}

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Zeroes every coordinate whose mask bit is off.
    pub fn apply_mask(&mut self, mask: &[bool]) {
        for (g, &m) in self.values.iter_mut().zip(mask) {
            if !m {
                *g = 0.0;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &GradVector) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}
