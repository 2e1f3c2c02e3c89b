use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};

/// One item per (layer, head), stored layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadGrid<T> {
    layers: usize,
    heads: usize,
    cells: Vec<T>,
}

impl<T> HeadGrid<T> {
    pub fn from_fn(layers: usize, heads: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut cells = Vec::with_capacity(layers * heads);
        for l in 0..layers {
            for h in 0..heads {
                cells.push(f(l, h));
            }
        }
        Self { layers, heads, cells }
    }

    pub fn try_from_fn<E>(
        layers: usize,
        heads: usize,
        mut f: impl FnMut(usize, usize) -> std::result::Result<T, E>,
    ) -> std::result::Result<Self, E> {
        let mut cells = Vec::with_capacity(layers * heads);
        for l in 0..layers {
            for h in 0..heads {
                cells.push(f(l, h)?);
            }
        }
        Ok(Self { layers, heads, cells })
    }

    pub fn from_cells(layers: usize, heads: usize, cells: Vec<T>) -> Result<Self> {
        if cells.len() != layers * heads {
            return Err(shape(format!(
                "grid {layers}x{heads} needs {} cells, got {}",
                layers * heads,
                cells.len()
            )));
        }
        Ok(Self { layers, heads, cells })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn same_geometry<U>(&self, other: &HeadGrid<U>) -> bool {
        self.layers == other.layers && self.heads == other.heads
    }

    #[inline]
    pub fn get(&self, layer: usize, head: usize) -> &T {
        assert!(layer < self.layers && head < self.heads, "head index out of grid");
        &self.cells[layer * self.heads + head]
    }

    #[inline]
    pub fn get_mut(&mut self, layer: usize, head: usize) -> &mut T {
        assert!(layer < self.layers && head < self.heads, "head index out of grid");
        &mut self.cells[layer * self.heads + head]
    }

    /// Iterates `(layer, head, item)` in layer-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let heads = self.heads;
        self.cells.iter().enumerate().map(move |(i, c)| (i / heads, i % heads, c))
    }

    pub fn cells(&self) -> &[T] {
        &self.cells
    }

    pub fn map<U>(&self, mut f: impl FnMut(usize, usize, &T) -> U) -> HeadGrid<U> {
        HeadGrid {
            layers: self.layers,
            heads: self.heads,
            cells: self.iter().map(|(l, h, c)| f(l, h, c)).collect(),
        }
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(usize, usize, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<HeadGrid<U>, E> {
        let cells = self
            .iter()
            .map(|(l, h, c)| f(l, h, c))
            .collect::<std::result::Result<Vec<_>, E>>()?;
        Ok(HeadGrid { layers: self.layers, heads: self.heads, cells })
    }

    pub fn into_cells(self) -> Vec<T> {
        self.cells
    }
}
