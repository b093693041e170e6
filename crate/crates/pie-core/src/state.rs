//! Flat or grid-shaped real-valued states.
//!
//! A [`State`] is the object being edited: either a flat latent vector or an
//! H x W grayscale grid. The shape is fixed for the lifetime of a trajectory;
//! elementwise operations check it.

use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};

/// Shape descriptor for a [`State`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// Flat vector of the given dimension.
    Flat(usize),
    /// Row-major grid, `rows x cols`.
    Grid { rows: usize, cols: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Grid { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Flat(d) => write!(f, "flat({d})"),
            Shape::Grid { rows, cols } => write!(f, "grid({rows}x{cols})"),
        }
    }
}

/// Real-valued state with a fixed shape. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    shape: Shape,
    values: Vec<f64>,
}

impl State {
    /// Flat vector state.
    pub fn flat(values: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Flat(values.len()), values)
    }

    /// Grid state from row-major values.
    pub fn grid(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Grid { rows, cols }, values)
    }

    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(PieError::invalid(format!(
                "state has {} values but shape {} needs {}",
                values.len(),
                shape,
                shape.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(PieError::invalid(format!("non-finite state entry {v}")));
        }
        Ok(State { shape, values })
    }

    /// All-zero state of the given shape.
    pub fn zeros(shape: Shape) -> Self {
        State {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn check_same_shape(&self, other: &State) -> Result<()> {
        if self.shape != other.shape {
            return Err(PieError::ShapeMismatch {
                left: self.shape.to_string(),
                right: other.shape.to_string(),
            });
        }
        Ok(())
    }

    /// Elementwise map into a new state.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> State {
        State {
            shape: self.shape,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combine with another state of the same shape.
    pub fn zip_map(&self, other: &State, f: impl Fn(f64, f64) -> f64) -> Result<State> {
        self.check_same_shape(other)?;
        Ok(State {
            shape: self.shape,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `a*self + b*other`, shape-checked.
    pub fn affine_combine(&self, a: f64, other: &State, b: f64) -> Result<State> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn add(&self, other: &State) -> Result<State> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &State) -> Result<State> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> State {
        self.map(|v| c * v)
    }

    pub fn dot(&self, other: &State) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Max-abs norm.
    pub fn inf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Euclidean distance to another state of the same shape.
    pub fn distance(&self, other: &State) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = State::flat(vec![1.0, 2.0]).unwrap();
        let b = State::flat(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(a.add(&b), Err(PieError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        assert!(State::flat(vec![1.0, f64::NAN]).is_err());
        assert!(State::flat(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn grid_needs_matching_len() {
        assert!(State::grid(2, 3, vec![0.0; 5]).is_err());
        assert!(State::grid(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn norms() {
        let s = State::flat(vec![3.0, -4.0]).unwrap();
        assert_eq!(s.norm(), 5.0);
        assert_eq!(s.inf_norm(), 4.0);
    }
}
