use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer: usize,
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

    /// Weight-decay applies to `weight` segments only; biases and
    /// normalization affine terms stay unregularized.
    pub fn decays(&self) -> bool {
        self.name == "weight"
    }
}

/// Ordered segment table over a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total number of scalar parameters, `M`.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for s in &self.segments {
            if s.decays() {
                mask[s.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    total: usize,
}

impl LayoutBuilder {
    /// Appends a segment and returns its offset.
    pub fn push(&mut self, layer: usize, name: &str, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let seg = Segment { layer, name: name.to_string(), shape, offset };
        self.total += seg.len();
        self.segments.push(seg);
        offset
    }

    pub fn build(self) -> ParamLayout {
        ParamLayout { segments: self.segments, total: self.total }
    }
}

/// Flat view of every trainable value of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    layout: Arc<ParamLayout>,
    data: Vec<T>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![T::zero(); layout.len()];
        ParamVector { layout, data }
    }

    pub fn from_vec(layout: Arc<ParamLayout>, data: Vec<T>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::Layout(format!(
                "layout has {} values, got {}",
                layout.len(),
                data.len()
            )));
        }
        Ok(ParamVector { layout, data })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn segment(&self, name: &str, layer: usize) -> Option<&[T]> {
        self.layout
            .segments()
            .iter()
            .find(|s| s.layer == layer && s.name == name)
            .map(|s| &self.data[s.range()])
    }

    pub fn same_layout(&self, other: &ParamVector<T>) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_layout(&self, other: &ParamVector<T>) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout("parameter vectors use different segment tables".into()))
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn segments_tile_the_array(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..3), 1..6)) {
            let mut b = ParamLayout::builder();
            for (i, s) in shapes.iter().enumerate() {
                b.push(i, if i % 2 == 0 { "weight" } else { "bias" }, s.clone());
            }
            let layout = b.build();
            let mut covered = vec![0u8; layout.len()];
            for s in layout.segments() {
                for j in s.range() {
                    covered[j] += 1;
                }
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn decay_mask_covers_weights_only() {
        let mut b = ParamLayout::builder();
        b.push(0, "weight", vec![2, 2]);
        b.push(0, "bias", vec![2]);
        b.push(1, "gamma", vec![2]);
        let mask = b.build().decay_mask();
        assert_eq!(mask, vec![true, true, true, true, false, false, false, false]);
    }
}
