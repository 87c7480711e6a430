//! Structured triangulations of rectangular domains and piecewise-linear
//! evaluation of mesh functions at arbitrary locations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        libm::hypot(self.x - other.x, self.y - other.y)
    }
}

/// Axis-aligned analysis window.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Domain {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Domain {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let d = Domain { x_min, x_max, y_min, y_max };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            return Err(Error::InvalidInput(alloc::format!(
                "degenerate domain [{}, {}] x [{}, {}]",
                self.x_min,
                self.x_max,
                self.y_min,
                self.y_max
            )));
        }
        Ok(())
    }

    /// Smallest domain containing every point.
    pub fn bounding(points: &[Point]) -> Result<Self> {
        let mut d = Domain {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for p in points {
            d.x_min = d.x_min.min(p.x);
            d.x_max = d.x_max.max(p.x);
            d.y_min = d.y_min.min(p.y);
            d.y_max = d.y_max.max(p.y);
        }
        d.validate()?;
        Ok(d)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        libm::hypot(self.width(), self.height())
    }

    /// 20% of the shorter side; the default outer buffer for SPDE meshes.
    pub fn default_extension(&self) -> f64 {
        0.2 * self.width().min(self.height())
    }

    pub fn extended(&self, by: f64) -> Domain {
        Domain {
            x_min: self.x_min - by,
            x_max: self.x_max + by,
            y_min: self.y_min - by,
            y_max: self.y_max + by,
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }
}

/// Conforming triangulation with counter-clockwise triangles.
#[derive(Clone, Debug)]
pub struct TriMesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    extension: f64,
    locator: Locator,
}

impl PartialEq for TriMesh {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices
            && self.triangles == other.triangles
            && self.extension.to_bits() == other.extension.to_bits()
    }
}

const MIN_TRIANGLE_AREA: f64 = 1e-14;

impl TriMesh {
    /// Wraps explicit geometry. Clockwise triangles are re-oriented; zero-area
    /// triangles are rejected.
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>, extension: f64) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidInput(alloc::format!(
                "a mesh needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if triangles.is_empty() {
            return Err(Error::InvalidInput("a mesh needs at least one triangle".into()));
        }
        let mut triangles = triangles;
        for (t, tri) in triangles.iter_mut().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidInput(alloc::format!(
                    "triangle {t} references a vertex out of range"
                )));
            }
            let area = signed_area(&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]]);
            if area.abs() < MIN_TRIANGLE_AREA {
                return Err(Error::DegenerateTriangle { triangle: t, area });
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
        }
        let locator = Locator::build(&vertices, &triangles);
        Ok(TriMesh { vertices, triangles, extension, locator })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Width of the outer buffer the mesh was built with (0 for imported meshes).
    pub fn extension(&self) -> f64 {
        self.extension
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(&self.vertices[a], &self.vertices[b], &self.vertices[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Lowest-index triangle containing `p` together with its barycentric
    /// weights, or `None` outside the hull.
    pub fn locate(&self, p: &Point) -> Option<(usize, [f64; 3])> {
        for &t in self.locator.candidates(p) {
            let [a, b, c] = self.triangles[t];
            let w = barycentric(&self.vertices[a], &self.vertices[b], &self.vertices[c], p);
            if w.iter().all(|&v| v >= -BARY_TOL) {
                return Some((t, w));
            }
        }
        None
    }

    /// Observation-to-mesh projector for `points`.
    pub fn project(&self, points: &[Point]) -> Result<Projector> {
        let mut row_ptr = Vec::with_capacity(points.len() + 1);
        let mut cols = Vec::with_capacity(3 * points.len());
        let mut vals = Vec::with_capacity(3 * points.len());
        row_ptr.push(0);
        for (i, p) in points.iter().enumerate() {
            let (t, mut w) = self.locate(p).ok_or(Error::OutOfDomain { index: i })?;
            for v in w.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            let s: f64 = w.iter().sum();
            let tri = self.triangles[t];
            let mut entries: [(usize, f64); 3] =
                [(tri[0], w[0] / s), (tri[1], w[1] / s), (tri[2], w[2] / s)];
            entries.sort_by_key(|e| e.0);
            for (c, v) in entries {
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Projector { n_cols: self.vertices.len(), row_ptr, cols, vals })
    }
}

const BARY_TOL: f64 = 1e-12;

fn signed_area(a: &Point, b: &Point, c: &Point) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

fn barycentric(a: &Point, b: &Point, c: &Point, p: &Point) -> [f64; 3] {
    let det = (b.y - c.y) * (a.x - c.x) + (c.x - b.x) * (a.y - c.y);
    let wa = ((b.y - c.y) * (p.x - c.x) + (c.x - b.x) * (p.y - c.y)) / det;
    let wb = ((c.y - a.y) * (p.x - c.x) + (a.x - c.x) * (p.y - c.y)) / det;
    [wa, wb, 1.0 - wa - wb]
}

/// Uniform bucket grid over triangle bounding boxes. Buckets list triangle
/// indices in ascending order, so the first hit is the lowest index.
#[derive(Clone, Debug)]
struct Locator {
    origin: Point,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl Locator {
    fn build(vertices: &[Point], triangles: &[[usize; 3]]) -> Self {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in vertices {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        let w = (hi.x - lo.x).max(f64::MIN_POSITIVE);
        let h = (hi.y - lo.y).max(f64::MIN_POSITIVE);
        let target = (triangles.len() as f64 / 2.0).max(1.0);
        let cell = libm::sqrt(w * h / target).max(f64::MIN_POSITIVE);
        let nx = ((w / cell) as usize + 1).max(1);
        let ny = ((h / cell) as usize + 1).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        let pad = 1e-9 * cell;
        for (t, tri) in triangles.iter().enumerate() {
            let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
            let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &v in tri {
                x0 = x0.min(vertices[v].x);
                y0 = y0.min(vertices[v].y);
                x1 = x1.max(vertices[v].x);
                y1 = y1.max(vertices[v].y);
            }
            let (i0, j0) = cell_of(lo, cell, nx, ny, x0 - pad, y0 - pad);
            let (i1, j1) = cell_of(lo, cell, nx, ny, x1 + pad, y1 + pad);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(t);
                }
            }
        }
        Locator { origin: lo, cell, nx, ny, buckets }
    }

    fn candidates(&self, p: &Point) -> &[usize] {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return &[];
        }
        let fx = (p.x - self.origin.x) / self.cell;
        let fy = (p.y - self.origin.y) / self.cell;
        // Points marginally outside the box may still be within tolerance of
        // a hull edge; anything further out has no candidates.
        if fx < -1.0 || fy < -1.0 || fx > self.nx as f64 + 1.0 || fy > self.ny as f64 + 1.0 {
            return &[];
        }
        let (i, j) = cell_of(self.origin, self.cell, self.nx, self.ny, p.x, p.y);
        &self.buckets[j * self.nx + i]
    }
}

fn cell_of(origin: Point, cell: f64, nx: usize, ny: usize, x: f64, y: f64) -> (usize, usize) {
    let i = libm::floor((x - origin.x) / cell).clamp(0.0, (nx - 1) as f64) as usize;
    let j = libm::floor((y - origin.y) / cell).clamp(0.0, (ny - 1) as f64) as usize;
    (i, j)
}

/// Regular lattice over `domain` grown by `extension` on every side, each
/// cell split along its lower-left/upper-right diagonal.
pub fn build_mesh(domain: &Domain, max_edge: f64, extension: f64) -> Result<TriMesh> {
    domain.validate()?;
    if !(max_edge > 0.0) || !max_edge.is_finite() {
        return Err(Error::InvalidInput(alloc::format!("max_edge must be > 0, got {max_edge}")));
    }
    if !(extension >= 0.0) || !extension.is_finite() {
        return Err(Error::InvalidInput(alloc::format!(
            "extension must be >= 0, got {extension}"
        )));
    }
    let ext = domain.extended(extension);
    let nx = cells_along(ext.width(), max_edge);
    let ny = cells_along(ext.height(), max_edge);
    let dx = ext.width() / nx as f64;
    let dy = ext.height() / ny as f64;

    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        // Pin the last row/column to the exact boundary.
        let y = if j == ny { ext.y_max } else { ext.y_min + j as f64 * dy };
        for i in 0..=nx {
            let x = if i == nx { ext.x_max } else { ext.x_min + i as f64 * dx };
            vertices.push(Point::new(x, y));
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let v00 = idx(i, j);
            let v10 = idx(i + 1, j);
            let v01 = idx(i, j + 1);
            let v11 = idx(i + 1, j + 1);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    TriMesh::new(vertices, triangles, extension)
}

fn cells_along(length: f64, max_edge: f64) -> usize {
    let n = libm::ceil(length / max_edge - 1e-9);
    (n as usize).max(1)
}

/// Largest `max_edge` whose lattice vertex count is closest to `target`
/// for the given domain and buffer.
pub fn max_edge_for_target(domain: &Domain, extension: f64, target: usize) -> Result<f64> {
    domain.validate()?;
    if target < 4 {
        return Err(Error::InvalidInput("target vertex count must be >= 4".into()));
    }
    let ext = domain.extended(extension);
    let (w, h) = (ext.width(), ext.height());
    let mut best = (usize::MAX, w);
    for nx in 1..=target {
        let edge = w / nx as f64;
        let ny = cells_along(h, edge);
        let count = (nx + 1) * (ny + 1);
        let gap = count.abs_diff(target);
        if gap < best.0 {
            best = (gap, edge);
        }
        if count > 2 * target {
            break;
        }
    }
    Ok(best.1)
}

/// Sparse `n × m` matrix of barycentric weights (CSR, at most three entries
/// per row).
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Projector {
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Projector {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    /// `A v` for a mesh vector `v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_cols, "projector/vector size mismatch");
        (0..self.n_rows()).map(|i| self.row(i).map(|(c, w)| w * v[c]).sum()).collect()
    }

    /// `Aᵀ w` for an observation vector `w`.
    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.n_rows(), "projector/vector size mismatch");
        let mut out = vec![0.0; self.n_cols];
        for (i, &wi) in w.iter().enumerate() {
            for (c, a) in self.row(i) {
                out[c] += a * wi;
            }
        }
        out
    }

    /// The same matrix in column-compressed form.
    pub fn to_csc(&self) -> crate::sparse::CscMatrix {
        let mut trip = Vec::with_capacity(self.vals.len());
        for i in 0..self.n_rows() {
            trip.extend(self.row(i).map(|(c, w)| (i, c, w)));
        }
        crate::sparse::CscMatrix::from_triplets(self.n_rows(), self.n_cols, &trip)
    }

    /// Dense row-major copy, for small problems and tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_rows())
            .map(|i| {
                let mut row = vec![0.0; self.n_cols];
                for (c, w) in self.row(i) {
                    row[c] = w;
                }
                row
            })
            .collect()
    }
}
