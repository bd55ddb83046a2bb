//! Named, shaped, flat-ordered parameter vectors. Everything the protocol
//! moves between clients and server is one of these; keys are not
//! parameters and never appear here.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentShape {
    Matrix { rows: usize, cols: usize },
    Vector { len: usize },
}

impl SegmentShape {
    pub fn count(&self) -> usize {
        match *self {
            SegmentShape::Matrix { rows, cols } => rows * cols,
            SegmentShape::Vector { len } => len,
        }
    }
}

impl std::fmt::Display for SegmentShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            SegmentShape::Matrix { rows, cols } => write!(f, "{rows}x{cols}"),
            SegmentShape::Vector { len } => write!(f, "{len}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: SegmentShape,
    pub values: Vec<f64>,
}

/// Ordered list of named segments; the order is the flat order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new() -> ParamVector {
        ParamVector::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        shape: SegmentShape,
        values: Vec<f64>,
    ) -> Result<()> {
        let name = name.into();
        if values.len() != shape.count() {
            return Err(Error::shape(
                "ParamVector::push",
                format!("segment {name}: shape {shape} vs {} values", values.len()),
            ));
        }
        if self.segments.iter().any(|s| s.name == name) {
            return Err(Error::invalid("segment name", format!("{name} repeated")));
        }
        self.segments.push(Segment { name, shape, values });
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    /// First segment where the two layouts disagree, if any.
    pub fn layout_mismatch(&self, other: &ParamVector) -> Option<String> {
        let n = self.segments.len().max(other.segments.len());
        for i in 0..n {
            match (self.segments.get(i), other.segments.get(i)) {
                (Some(a), Some(b)) => {
                    if a.name != b.name || a.shape != b.shape {
                        return Some(format!(
                            "position {i}: {} {} vs {} {}",
                            a.name, a.shape, b.name, b.shape
                        ));
                    }
                }
                (Some(a), None) => return Some(format!("position {i}: {} vs nothing", a.name)),
                (None, Some(b)) => return Some(format!("position {i}: nothing vs {}", b.name)),
                (None, None) => unreachable!(),
            }
        }
        None
    }

    pub(crate) fn require_same_layout(&self, other: &ParamVector, op: &'static str) -> Result<()> {
        match self.layout_mismatch(other) {
            None => Ok(()),
            Some(detail) => Err(Error::shape(op, detail)),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &ParamVector, s: f64) -> Result<()> {
        self.require_same_layout(other, "params add")?;
        for (a, b) in self.segments.iter_mut().zip(&other.segments) {
            for (x, &y) in a.values.iter_mut().zip(&b.values) {
                *x += s * y;
            }
        }
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.require_same_layout(other, "params sub")?;
        let mut out = self.clone();
        for (a, b) in out.segments.iter_mut().zip(&other.segments) {
            for (x, &y) in a.values.iter_mut().zip(&b.values) {
                *x -= y;
            }
        }
        Ok(out)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for seg in &mut self.segments {
            for v in &mut seg.values {
                *v *= s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| &s.values)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Unweighted elementwise mean; layouts must agree exactly.
    pub fn mean(items: &[ParamVector]) -> Result<ParamVector> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("params mean", "empty list"))?;
        let mut acc = first.clone();
        for item in &items[1..] {
            acc.add_assign_scaled(item, 1.0)?;
        }
        acc.scale_in_place(1.0 / items.len() as f64);
        Ok(acc)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.segments.iter().flat_map(|s| s.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.segments.iter_mut().flat_map(|s| s.values.iter_mut())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// Rebuilds a vector with this layout from a flat value list;
    /// round-trips `flatten` bitwise.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != self.total_len() {
            return Err(Error::shape(
                "unflatten",
                format!("{} values vs layout of {}", flat.len(), self.total_len()),
            ));
        }
        let mut out = self.clone();
        let mut at = 0;
        for seg in &mut out.segments {
            let n = seg.values.len();
            seg.values.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamVector {
        let mut pv = ParamVector::new();
        pv.push("a.w", SegmentShape::Matrix { rows: 2, cols: 3 }, vec![1.0; 6]).unwrap();
        pv.push("a.b", SegmentShape::Vector { len: 2 }, vec![0.5, -0.5]).unwrap();
        pv
    }

    #[test]
    fn push_validates_shape_and_name() {
        let mut pv = sample();
        assert!(pv.push("c", SegmentShape::Vector { len: 3 }, vec![0.0]).is_err());
        assert!(pv.push("a.w", SegmentShape::Vector { len: 1 }, vec![0.0]).is_err());
    }

    #[test]
    fn arithmetic_and_norm() {
        let mut a = sample();
        let b = sample();
        a.add_assign_scaled(&b, 2.0).unwrap();
        assert_eq!(a.get("a.w").unwrap().values[0], 3.0);
        let d = a.sub(&b).unwrap();
        assert_eq!(d.get("a.w").unwrap().values[0], 2.0);
        let mean = ParamVector::mean(&[sample(), sample()]).unwrap();
        assert_eq!(mean, sample());
        assert!((sample().l2_norm() - (6.0f64 + 0.5).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mismatched_layouts_name_first_offender() {
        let a = sample();
        let mut b = ParamVector::new();
        b.push("a.w", SegmentShape::Matrix { rows: 3, cols: 2 }, vec![1.0; 6]).unwrap();
        b.push("a.b", SegmentShape::Vector { len: 2 }, vec![0.0; 2]).unwrap();
        let err = a.sub(&b).unwrap_err().to_string();
        assert!(err.contains("a.w"), "{err}");
        assert!(ParamVector::mean(&[]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 8)) {
            let mut pv = ParamVector::new();
            pv.push("m", SegmentShape::Matrix { rows: 2, cols: 3 }, vals[..6].to_vec()).unwrap();
            pv.push("v", SegmentShape::Vector { len: 2 }, vals[6..].to_vec()).unwrap();
            let flat = pv.flatten();
            let back = pv.unflatten_like(&flat).unwrap();
            prop_assert_eq!(&back, &pv);
            prop_assert_eq!(back.flatten(), flat);
        }
    }
}
