use std::ops::Range;

use crate::error::{Error, Result};

/// Ordered list of named tensors that defines how a flat parameter vector
/// is cut into layers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    entries: Vec<(String, Vec<usize>)>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        self.entries.push((name.into(), shape));
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    /// Total number of scalars described by the layout.
    pub fn len(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of the named tensor inside the flat vector.
    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        let mut offset = 0;
        for (n, shape) in &self.entries {
            let size: usize = shape.iter().product();
            if n == name {
                return Some(offset..offset + size);
            }
            offset += size;
        }
        None
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }

    /// Returns a copy with every tensor name prefixed by `prefix`.
    pub fn prefixed(&self, prefix: &str) -> Layout {
        Layout {
            entries: self
                .entries
                .iter()
                .map(|(n, s)| (format!("{prefix}{n}"), s.clone()))
                .collect(),
        }
    }
}

/// Flat real-valued parameter vector together with its layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if layout.len() != values.len() {
            return Err(Error::Shape(format!(
                "layout describes {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter entry {i}")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { values, layout }
    }

    /// Vector with the same layout and new values. Length is checked, finiteness is not.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len(), "parameter length changed");
        Self {
            values,
            layout: self.layout.clone(),
        }
    }

    /// Concatenates the named tensors into one flat vector, in layout order.
    pub fn flatten(layout: Layout, tensors: &[(String, Vec<f64>)]) -> Result<Self> {
        let mut values = Vec::with_capacity(layout.len());
        for (name, shape) in layout.entries() {
            let (_, data) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            let size: usize = shape.iter().product();
            if data.len() != size {
                return Err(Error::Shape(format!(
                    "tensor {name} has {} entries, layout expects {size}",
                    data.len()
                )));
            }
            values.extend_from_slice(data);
        }
        Self::new(layout, values)
    }

    /// Splits the vector back into its named tensors.
    pub fn unflatten(&self) -> Vec<(String, Vec<f64>)> {
        let mut offset = 0;
        self.layout
            .entries()
            .iter()
            .map(|(name, shape)| {
                let size: usize = shape.iter().product();
                let data = self.values[offset..offset + size].to_vec();
                offset += size;
                (name.clone(), data)
            })
            .collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.range(name).map(|r| &self.values[r])
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self + alpha * direction`
    pub fn add_scaled(&self, alpha: f64, direction: &[f64]) -> ParamVector {
        assert_eq!(direction.len(), self.values.len());
        let values = self
            .values
            .iter()
            .zip(direction)
            .map(|(a, d)| a + alpha * d)
            .collect();
        self.with_values(values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Layout {
        let mut l = Layout::new();
        l.push("a.weight", vec![2, 3]);
        l.push("a.bias", vec![3]);
        l.push("log_std", vec![1]);
        l
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            ParamVector::new(layout(), vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut v = vec![0.0; 10];
        v[4] = f64::NAN;
        assert!(matches!(
            ParamVector::new(layout(), v),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn ranges_follow_declaration_order() {
        let l = layout();
        assert_eq!(l.len(), 10);
        assert_eq!(l.range("a.weight"), Some(0..6));
        assert_eq!(l.range("a.bias"), Some(6..9));
        assert_eq!(l.range("log_std"), Some(9..10));
        assert_eq!(l.range("missing"), None);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_bit_exact(values in proptest::collection::vec(-1e6f64..1e6, 10)) {
            let p = ParamVector::new(layout(), values.clone()).unwrap();
            let back = ParamVector::flatten(layout(), &p.unflatten()).unwrap();
            prop_assert_eq!(
                back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
