//! Truncated uniform spatial lattice, uniform time partition, and the
//! time-indexed vector fields that live on them.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Uniform tensor-product lattice on the box `[lo, hi]`.
///
/// Nodes are numbered with the last axis varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    lo: Vec<T>,
    hi: Vec<T>,
    nodes: Vec<usize>,
    spacing: Vec<T>,
    strides: Vec<usize>,
    len: usize,
}

impl<T: Real> Grid<T> {
    pub fn new(lo: Vec<T>, hi: Vec<T>, nodes: Vec<usize>) -> Result<Self> {
        let dim = lo.len();
        if dim == 0 {
            return Err(Error::invalid("grid dimension must be positive"));
        }
        if hi.len() != dim || nodes.len() != dim {
            return Err(Error::invalid("grid lo/hi/nodes length mismatch"));
        }
        for axis in 0..dim {
            if !(lo[axis].is_finite() && hi[axis].is_finite()) || lo[axis] >= hi[axis] {
                return Err(Error::invalid(format!("grid axis {axis}: require lo < hi")));
            }
            if nodes[axis] < 3 {
                return Err(Error::invalid(format!(
                    "grid axis {axis}: at least 3 nodes required, got {}",
                    nodes[axis]
                )));
            }
        }
        let spacing = (0..dim)
            .map(|a| (hi[a] - lo[a]) / T::from_count(nodes[a] - 1))
            .collect();
        let mut strides = vec![1; dim];
        for a in (0..dim - 1).rev() {
            strides[a] = strides[a + 1] * nodes[a + 1];
        }
        let len = nodes.iter().product();
        Ok(Self {
            lo,
            hi,
            nodes,
            spacing,
            strides,
            len,
        })
    }

    /// Same bounds and node count on every axis.
    pub fn uniform(dim: usize, lo: T, hi: T, nodes: usize) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim], vec![nodes; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[T] {
        &self.lo
    }

    pub fn hi(&self) -> &[T] {
        &self.hi
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes
    }

    pub fn spacing(&self) -> &[T] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Coordinate of index `i` along `axis`; the last index maps to `hi` exactly.
    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> T {
        if i + 1 == self.nodes[axis] {
            self.hi[axis]
        } else {
            self.lo[axis] + self.spacing[axis] * T::from_count(i)
        }
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        self.multi_index_into(node, &mut out);
        out
    }

    #[inline]
    pub fn multi_index_into(&self, mut node: usize, out: &mut [usize]) {
        for a in 0..self.dim() {
            out[a] = node / self.strides[a];
            node %= self.strides[a];
        }
    }

    pub fn linear_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn node_coords(&self, node: usize) -> DVector<T> {
        let mut idx = vec![0; self.dim()];
        self.multi_index_into(node, &mut idx);
        DVector::from_iterator(
            self.dim(),
            idx.iter().enumerate().map(|(a, &i)| self.coord(a, i)),
        )
    }

    pub fn clamp(&self, x: &[T]) -> DVector<T> {
        DVector::from_iterator(
            self.dim(),
            x.iter()
                .enumerate()
                .map(|(a, &v)| v.max(self.lo[a]).min(self.hi[a])),
        )
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.iter()
            .enumerate()
            .all(|(a, &v)| v >= self.lo[a] && v <= self.hi[a])
    }

    /// Trapezoidal quadrature weight of a node (half spacing on faces).
    pub fn node_weight(&self, node: usize) -> T {
        let half = T::lit(0.5);
        let mut idx = vec![0; self.dim()];
        self.multi_index_into(node, &mut idx);
        idx.iter().enumerate().fold(T::one(), |w, (a, &i)| {
            let h = self.spacing[a];
            if i == 0 || i + 1 == self.nodes[a] {
                w * h * half
            } else {
                w * h
            }
        })
    }

    pub fn node_weights(&self) -> Vec<T> {
        (0..self.len).map(|n| self.node_weight(n)).collect()
    }

    /// True when every index of the node is strictly inside the lattice.
    pub fn is_interior(&self, node: usize) -> bool {
        let mut idx = vec![0; self.dim()];
        self.multi_index_into(node, &mut idx);
        idx.iter()
            .enumerate()
            .all(|(a, &i)| i > 0 && i + 1 < self.nodes[a])
    }

    /// Tensor-product cubic Lagrange weights for `x`, clamped to the box.
    ///
    /// Each axis uses the four nodes around the cell (shifted inward at the
    /// faces; three nodes when the axis has only three). Reproduces cubic
    /// polynomials and is exact at nodes.
    pub fn cubic_stencil(&self, x: &[T]) -> Stencil<T> {
        let dim = self.dim();
        assert!(dim <= MAX_DIM, "grid dimension above {MAX_DIM}");
        let mut axes: Vec<(usize, [T; 4], usize)> = Vec::with_capacity(dim);
        for a in 0..dim {
            let v = x[a].max(self.lo[a]).min(self.hi[a]);
            let n = self.nodes[a];
            let width = n.min(4);
            let s = ((v - self.lo[a]) / self.spacing[a]).floor();
            let cell = s.to_usize().unwrap_or(0).min(n - 2);
            let start = cell.saturating_sub(1).min(n - width);
            let mut w = [T::zero(); 4];
            for j in 0..width {
                let xj = self.coord(a, start + j);
                let mut l = T::one();
                for k in 0..width {
                    if k != j {
                        let xk = self.coord(a, start + k);
                        l *= (v - xk) / (xj - xk);
                    }
                }
                w[j] = l;
            }
            axes.push((start, w, width));
        }
        let total: usize = axes.iter().map(|a| a.2).product();
        let mut entries = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut w = T::one();
            let mut idx = 0;
            for (a, (start, weights, width)) in axes.iter().enumerate() {
                let j = rem % width;
                rem /= width;
                w *= weights[j];
                idx += (start + j) * self.strides[a];
            }
            if w != T::zero() {
                entries.push((idx, w));
            }
        }
        Stencil { entries }
    }

    /// Multilinear interpolation weights for `x`, clamped to the box.
    ///
    /// Corners with zero weight are omitted, so evaluation at a node touches
    /// only that node.
    pub fn stencil(&self, x: &[T]) -> Stencil<T> {
        let dim = self.dim();
        let mut cell = [0usize; MAX_DIM];
        let mut frac = [T::zero(); MAX_DIM];
        assert!(dim <= MAX_DIM, "grid dimension above {MAX_DIM}");
        for a in 0..dim {
            let v = x[a].max(self.lo[a]).min(self.hi[a]);
            let s = ((v - self.lo[a]) / self.spacing[a]).floor();
            let last = self.nodes[a] - 2;
            let i = s.to_usize().unwrap_or(0).min(last);
            let left = self.coord(a, i);
            let right = self.coord(a, i + 1);
            cell[a] = i;
            frac[a] = ((v - left) / (right - left)).max(T::zero()).min(T::one());
        }
        let mut entries = Vec::with_capacity(1 << dim);
        for mask in 0..(1usize << dim) {
            let mut w = T::one();
            let mut idx = 0;
            for a in 0..dim {
                let bit = (mask >> a) & 1;
                w *= if bit == 1 { frac[a] } else { T::one() - frac[a] };
                idx += (cell[a] + bit) * self.strides[a];
            }
            if w != T::zero() {
                entries.push((idx, w));
            }
        }
        Stencil { entries }
    }
}

const MAX_DIM: usize = 8;

/// Node indices and weights of one interpolation.
#[derive(Clone, Debug)]
pub struct Stencil<T> {
    pub entries: Vec<(usize, T)>,
}

impl<T: Real> Stencil<T> {
    /// Applies the stencil to a slice with `c` interleaved components.
    pub fn apply(&self, slice: &[T], c: usize) -> DVector<T> {
        let mut out = DVector::zeros(c);
        for &(node, w) in &self.entries {
            let base = node * c;
            for k in 0..c {
                out[k] += w * slice[base + k];
            }
        }
        out
    }
}

/// Uniform partition of `[t0, t_final]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<T> {
    t0: T,
    t_final: T,
    steps: usize,
    dt: T,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(t0: T, t_final: T, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_final.is_finite()) || t0 >= t_final {
            return Err(Error::invalid("time grid requires t0 < T"));
        }
        if steps == 0 {
            return Err(Error::invalid("time grid requires at least one step"));
        }
        let dt = (t_final - t0) / T::from_count(steps);
        Ok(Self {
            t0,
            t_final,
            steps,
            dt,
        })
    }

    pub fn t0(&self) -> T {
        self.t0
    }

    pub fn t_final(&self) -> T {
        self.t_final
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Time of slice `k`; the last slice is `t_final` exactly.
    #[inline]
    pub fn time(&self, k: usize) -> T {
        if k >= self.steps {
            self.t_final
        } else {
            self.t0 + self.dt * T::from_count(k)
        }
    }

    pub fn times(&self) -> Vec<T> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Interval index `k` and fraction in `[0, 1]` locating `t` between
    /// slices `k` and `k + 1` (clamped to the grid).
    pub fn locate(&self, t: T) -> (usize, T) {
        let t = t.max(self.t0).min(self.t_final);
        let s = ((t - self.t0) / self.dt).floor();
        let k = s.to_usize().unwrap_or(0).min(self.steps - 1);
        let left = self.time(k);
        let right = self.time(k + 1);
        let frac = ((t - left) / (right - left)).max(T::zero()).min(T::one());
        (k, frac)
    }

    /// Index of the first slice at or after `t` (within rounding).
    pub fn index_at_or_after(&self, t: T) -> usize {
        let (k, frac) = self.locate(t);
        if frac == T::zero() {
            k
        } else {
            k + 1
        }
    }
}

/// Time-indexed grid field with `components` values per node.
///
/// Storage is `(time slice, node, component)` with components fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField<T> {
    grid: Grid<T>,
    time: TimeGrid<T>,
    components: usize,
    values: Vec<T>,
}

impl<T: Real> GridField<T> {
    pub fn zeros(grid: Grid<T>, time: TimeGrid<T>, components: usize) -> Self {
        assert!(components > 0, "field needs at least one component");
        let len = (time.steps() + 1) * grid.len() * components;
        Self {
            grid,
            time,
            components,
            values: vec![T::zero(); len],
        }
    }

    /// Samples `f(t, x)` at every node of every slice.
    pub fn from_fn<F>(grid: Grid<T>, time: TimeGrid<T>, components: usize, f: F) -> Self
    where
        F: Fn(T, &DVector<T>) -> DVector<T>,
    {
        let mut field = Self::zeros(grid, time, components);
        for k in 0..=field.time.steps() {
            let t = field.time.time(k);
            for node in 0..field.grid.len() {
                let x = field.grid.node_coords(node);
                let v = f(t, &x);
                assert_eq!(v.len(), components, "sampled value has wrong length");
                field.node_mut(k, node).copy_from_slice(v.as_slice());
            }
        }
        field
    }

    pub fn from_values(
        grid: Grid<T>,
        time: TimeGrid<T>,
        components: usize,
        values: Vec<T>,
    ) -> Result<Self> {
        let expected = (time.steps() + 1) * grid.len() * components;
        if components == 0 || values.len() != expected {
            return Err(Error::invalid(format!(
                "field shape mismatch: expected {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            grid,
            time,
            components,
            values,
        })
    }

    /// Field with the same grids and a different component count.
    pub fn zeros_like(&self, components: usize) -> Self {
        Self::zeros(self.grid.clone(), self.time.clone(), components)
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn time_grid(&self) -> &TimeGrid<T> {
        &self.time
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn slice_len(&self) -> usize {
        self.grid.len() * self.components
    }

    pub fn slice(&self, k: usize) -> &[T] {
        let n = self.slice_len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [T] {
        let n = self.slice_len();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn node(&self, k: usize, node: usize) -> &[T] {
        let c = self.components;
        let base = k * self.slice_len() + node * c;
        &self.values[base..base + c]
    }

    pub fn node_mut(&mut self, k: usize, node: usize) -> &mut [T] {
        let c = self.components;
        let base = k * self.slice_len() + node * c;
        &mut self.values[base..base + c]
    }

    pub fn node_vector(&self, k: usize, node: usize) -> DVector<T> {
        DVector::from_column_slice(self.node(k, node))
    }

    /// Mutable views of all slices, for slice-parallel writes.
    pub fn slices_mut(&mut self) -> std::slice::ChunksExactMut<'_, T> {
        let n = self.slice_len();
        self.values.chunks_exact_mut(n)
    }

    pub fn all_finite(&self) -> bool {
        crate::scalar::all_finite(&self.values)
    }

    /// Spatial interpolation inside slice `k`.
    pub fn interpolate_in_slice(&self, k: usize, x: &[T]) -> DVector<T> {
        self.grid.stencil(x).apply(self.slice(k), self.components)
    }

    /// Multilinear in `x`, linear in `t`; `x` is clamped to the box and `t`
    /// to the time grid.
    pub fn interpolate(&self, t: T, x: &[T]) -> DVector<T> {
        let stencil = self.grid.stencil(x);
        let (k, frac) = self.time.locate(t);
        if frac == T::zero() {
            return stencil.apply(self.slice(k), self.components);
        }
        if frac == T::one() {
            return stencil.apply(self.slice(k + 1), self.components);
        }
        let (a, b) = (self.slice(k), self.slice(k + 1));
        let c = self.components;
        let mut out = DVector::zeros(c);
        for &(node, w) in &stencil.entries {
            let (wa, wb) = (w * (T::one() - frac), w * frac);
            for j in 0..c {
                out[j] += wa * a[node * c + j] + wb * b[node * c + j];
            }
        }
        out
    }

    /// Largest Euclidean node norm over all slices.
    pub fn max_node_norm(&self) -> T {
        self.values
            .chunks_exact(self.components)
            .map(node_norm)
            .fold(T::zero(), |m, v| m.max(v))
    }
}

#[inline]
pub(crate) fn node_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |s, &x| s + x * x).sqrt()
}

/// Spatial Jacobian of a field slice: a `components × dim` matrix per node.
#[derive(Clone, Debug)]
pub struct GradientSlice<T> {
    components: usize,
    dim: usize,
    values: Vec<T>,
}

impl<T: Real> GradientSlice<T> {
    #[inline]
    pub fn entry(&self, node: usize, comp: usize, axis: usize) -> T {
        self.values[(node * self.components + comp) * self.dim + axis]
    }

    pub fn at(&self, node: usize) -> DMatrix<T> {
        let cd = self.components * self.dim;
        // stored row-major per node
        DMatrix::from_row_slice(
            self.components,
            self.dim,
            &self.values[node * cd..(node + 1) * cd],
        )
    }

    /// Row-major `components × dim` block per node.
    pub fn raw(&self) -> &[T] {
        &self.values
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Interpolated Jacobian at `x`.
    pub fn interpolate(&self, grid: &Grid<T>, x: &[T]) -> DMatrix<T> {
        let stencil = grid.stencil(x);
        let cd = self.components * self.dim;
        let mut out = DMatrix::zeros(self.components, self.dim);
        for &(node, w) in &stencil.entries {
            let block = &self.values[node * cd..(node + 1) * cd];
            for i in 0..self.components {
                for j in 0..self.dim {
                    out[(i, j)] += w * block[i * self.dim + j];
                }
            }
        }
        out
    }

    /// Largest Frobenius norm over nodes; the discrete Lipschitz monitor.
    pub fn max_norm(&self) -> T {
        let cd = self.components * self.dim;
        self.values
            .chunks_exact(cd)
            .map(node_norm)
            .fold(T::zero(), |m, v| m.max(v))
    }
}

/// Finite-difference spatial gradient of slice `time_index`.
pub fn spatial_gradient<T: Real>(field: &GridField<T>, time_index: usize) -> GradientSlice<T> {
    slice_gradient(field.grid(), field.slice(time_index), field.components())
}

/// Central differences inside, second-order one-sided differences on faces.
pub fn slice_gradient<T: Real>(grid: &Grid<T>, slice: &[T], components: usize) -> GradientSlice<T> {
    let dim = grid.dim();
    let c = components;
    let mut values = vec![T::zero(); grid.len() * c * dim];
    let half = T::lit(0.5);
    let (three, four) = (T::lit(3.0), T::lit(4.0));
    let mut idx = vec![0; dim];
    for node in 0..grid.len() {
        grid.multi_index_into(node, &mut idx);
        for a in 0..dim {
            let n = grid.nodes_per_axis()[a];
            let s = grid.strides()[a];
            let inv_h = T::one() / grid.spacing()[a];
            let i = idx[a];
            for comp in 0..c {
                let at = |m: usize| slice[m * c + comp];
                let d = if i == 0 {
                    (-three * at(node) + four * at(node + s) - at(node + 2 * s)) * half * inv_h
                } else if i + 1 == n {
                    (three * at(node) - four * at(node - s) + at(node - 2 * s)) * half * inv_h
                } else {
                    (at(node + s) - at(node - s)) * half * inv_h
                };
                values[(node * c + comp) * dim + a] = d;
            }
        }
    }
    GradientSlice {
        components: c,
        dim,
        values,
    }
}
