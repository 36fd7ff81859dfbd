//! Rectangular tensor grids and fields sampled on them.
//!
//! Nodes are ordered with the first axis fastest. All integrals use the
//! product trapezoidal rule so that densities, centering checks and averages
//! are discretely consistent with each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One uniform axis `lo = x_0 < … < x_{nodes-1} = hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) || nodes < 2 {
            return Err(Error::InvalidArgument(format!("degenerate axis [{lo}, {hi}] with {nodes} nodes")));
        }
        Ok(Self { lo, hi, nodes })
    }

    #[inline]
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    /// Cell index and (possibly out-of-range) fraction for linear interpolation.
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let t = (x - self.lo) / self.step();
        let i = (t.floor().max(0.0) as usize).min(self.nodes - 2);
        (i, t - i as f64)
    }

    fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.nodes {
            0.5 * self.step()
        } else {
            self.step()
        }
    }
}

/// Tensor-product grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one axis".into()));
        }
        for a in &axes {
            Axis::new(a.lo, a.hi, a.nodes)?;
        }
        Ok(Self { axes })
    }

    /// Skips validation; single-node axes are allowed (sampling boxes).
    pub(crate) fn from_axes_unchecked(axes: Vec<Axis>) -> Self {
        Self { axes }
    }

    /// Same axis repeated `dim` times.
    pub fn cube(dim: usize, lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        Self::new(vec![Axis::new(lo, hi, nodes)?; dim])
    }

    /// The default fast-variable grid: `[-6, 6]` with 601 nodes per axis.
    pub fn default_fast(dim: usize) -> Self {
        Self::cube(dim, -6.0, 6.0, 601).expect("static grid")
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &Axis {
        &self.axes[k]
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stride(&self, k: usize) -> usize {
        self.axes[..k].iter().map(|a| a.nodes).product()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        self.axes
            .iter()
            .map(|a| {
                let i = idx % a.nodes;
                idx /= a.nodes;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().enumerate().map(|(k, &i)| i * self.stride(k)).sum()
    }

    pub fn point_into(&self, idx: usize, out: &mut [f64]) {
        let mut rem = idx;
        for (o, a) in out.iter_mut().zip(&self.axes) {
            *o = a.coord(rem % a.nodes);
            rem /= a.nodes;
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_into(idx, &mut p);
        p
    }

    pub fn radius(&self, idx: usize) -> f64 {
        self.point(idx).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Product trapezoidal weights.
    pub fn weights(&self) -> Vec<f64> {
        (0..self.len())
            .map(|idx| {
                let mut rem = idx;
                self.axes
                    .iter()
                    .map(|a| {
                        let w = a.weight(rem % a.nodes);
                        rem /= a.nodes;
                        w
                    })
                    .product()
            })
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.axes).all(|(v, a)| *v >= a.lo && *v <= a.hi)
    }

    /// Whether node `idx` lies on the boundary of the box.
    pub fn is_boundary(&self, idx: usize) -> bool {
        self.multi_index(idx)
            .iter()
            .zip(&self.axes)
            .any(|(&i, a)| i == 0 || i + 1 == a.nodes)
    }

    /// Radius of the largest origin-centred ball inside the box (0 if the
    /// origin is outside).
    pub fn inscribed_radius(&self) -> f64 {
        self.axes.iter().map(|a| (-a.lo).min(a.hi)).fold(f64::INFINITY, f64::min).max(0.0)
    }

    /// Corner nodes and multilinear weights at `x`. Points outside the box are
    /// extrapolated linearly from the nearest cell.
    pub fn stencil(&self, x: &[f64]) -> Stencil {
        let dim = self.dim();
        let mut base = 0usize;
        let mut fr = [0.0f64; 4];
        for k in 0..dim {
            let (i, f) = self.axes[k].locate(x[k]);
            base += i * self.stride(k);
            fr[k.min(3)] = f;
        }
        let mut st = Stencil { nodes: [0; 16], weights: [0.0; 16], len: 1 << dim };
        for corner in 0..(1usize << dim) {
            let mut idx = base;
            let mut w = 1.0;
            for k in 0..dim {
                if corner >> k & 1 == 1 {
                    idx += self.stride(k);
                    w *= fr[k];
                } else {
                    w *= 1.0 - fr[k];
                }
            }
            st.nodes[corner] = idx;
            st.weights[corner] = w;
        }
        st
    }
}

/// Interpolation stencil (at most 4 dimensions).
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub nodes: [usize; 16],
    pub weights: [f64; 16],
    pub len: usize,
}

impl Stencil {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes[..self.len].iter().copied().zip(self.weights[..self.len].iter().copied())
    }
}

/// What a [`GridField`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldRole {
    Density,
    Corrector,
    CorrectorGradient,
    Fluctuation,
    QField,
    /// Generic sampled function (right-hand sides, diagnostics).
    Sampled,
}

/// Values of a function of `z` on a grid, at a fixed slow value `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub y: Vec<f64>,
    pub grid: Grid,
    /// Numbers stored per node (`p`, `p·d`, `p·p`, …).
    pub components: usize,
    /// Node-major values, `components` per node.
    pub values: Vec<f64>,
    pub role: FieldRole,
}

impl GridField {
    pub fn zeros(grid: &Grid, y: &[f64], components: usize, role: FieldRole) -> Self {
        Self { y: y.to_vec(), grid: grid.clone(), components, values: vec![0.0; grid.len() * components], role }
    }

    /// Samples `f(z, out)` at every node.
    pub fn from_fn(
        grid: &Grid,
        y: &[f64],
        components: usize,
        role: FieldRole,
        mut f: impl FnMut(&[f64], &mut [f64]),
    ) -> Self {
        let mut field = Self::zeros(grid, y, components, role);
        let mut z = vec![0.0; grid.dim()];
        for (idx, chunk) in field.values.chunks_mut(components).enumerate() {
            grid.point_into(idx, &mut z);
            f(&z, chunk);
        }
        field
    }

    pub fn node(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.components..(idx + 1) * self.components]
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.components).copied().collect()
    }

    pub fn with_role(mut self, role: FieldRole) -> Self {
        self.role = role;
        self
    }

    /// Multilinear interpolation (linear extrapolation outside the box).
    pub fn interpolate(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let st = self.grid.stencil(z);
        for (node, w) in st.iter() {
            let v = self.node(node);
            for (o, x) in out.iter_mut().zip(v) {
                *o += w * x;
            }
        }
    }

    /// Trapezoidal integral of each component.
    pub fn integral(&self) -> Vec<f64> {
        let w = self.grid.weights();
        let mut acc = vec![0.0; self.components];
        for (idx, wi) in w.iter().enumerate() {
            for (a, v) in acc.iter_mut().zip(self.node(idx)) {
                *a += wi * v;
            }
        }
        acc
    }

    /// Trapezoidal integral of each component against a density on the same grid.
    pub fn integral_against(&self, pi: &GridField) -> Result<Vec<f64>> {
        self.same_grid(pi)?;
        let w = self.grid.weights();
        let mut acc = vec![0.0; self.components];
        for (idx, wi) in w.iter().enumerate() {
            let wp = wi * pi.values[idx];
            for (a, v) in acc.iter_mut().zip(self.node(idx)) {
                *a += wp * v;
            }
        }
        Ok(acc)
    }

    pub fn same_grid(&self, other: &GridField) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("fields live on different grids".into()));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// CSV: node coordinates followed by the stored values.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.grid.dim()).map(|k| format!("z_{k}")).collect();
        header.extend((1..=self.components).map(|c| format!("v_{c}")));
        wr.write_record(&header)?;
        let mut z = vec![0.0; self.grid.dim()];
        for idx in 0..self.grid.len() {
            self.grid.point_into(idx, &mut z);
            let rec: Vec<String> = z.iter().chain(self.node(idx)).map(|v| v.to_string()).collect();
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let g = Grid::new(vec![Axis::new(-1.0, 2.0, 7).unwrap(), Axis::new(0.0, 1.0, 5).unwrap()]).unwrap();
        let f = GridField::from_fn(&g, &[], 1, FieldRole::Sampled, |z, o| o[0] = 1.0 + z[0] + 2.0 * z[1]);
        // ∫∫ (1 + x + 2y) over [-1,2]x[0,1] = 3 + 1.5 + 3
        assert!((f.integral()[0] - 7.5).abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_bilinear() {
        let g = Grid::cube(2, -1.0, 1.0, 5).unwrap();
        let f = GridField::from_fn(&g, &[], 1, FieldRole::Sampled, |z, o| o[0] = 3.0 * z[0] - z[1] + z[0] * z[1]);
        let mut out = [0.0];
        for p in [[0.13, -0.77], [0.9, 0.99], [1.4, -1.2]] {
            f.interpolate(&p, &mut out);
            assert!((out[0] - (3.0 * p[0] - p[1] + p[0] * p[1])).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn index_roundtrip() {
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 3).unwrap(), Axis::new(0.0, 1.0, 4).unwrap()]).unwrap();
        for idx in 0..g.len() {
            assert_eq!(g.flat_index(&g.multi_index(idx)), idx);
        }
        assert!(g.is_boundary(0));
        assert!(!g.is_boundary(g.flat_index(&[1, 1])));
        assert_eq!(g.axis(0).coord(2), 1.0);
    }

    #[test]
    fn rejects_degenerate_axes() {
        assert!(Axis::new(1.0, 1.0, 5).is_err());
        assert!(Axis::new(0.0, 1.0, 1).is_err());
    }
}
