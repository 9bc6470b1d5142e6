//! Uniform P1 meshes on intervals and axis-aligned rectangles.
//!
//! Rectangles are triangulated by splitting every grid cell along the same
//! diagonal (lower-left to upper-right) so results are reproducible; nodes are
//! numbered x-fastest, with node 0 at the lower-left corner of the domain.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Domain geometry. The rectangle default is centered so that the reference
/// 1x4 domain reads [-0.5, 0.5] x [-2, 2]; intervals start at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    Interval {
        lx: f64,
        #[serde(default)]
        offset: Option<f64>,
    },
    Rectangle {
        lx: f64,
        ly: f64,
        #[serde(default)]
        offset: Option<(f64, f64)>,
    },
}

impl DomainSpec {
    pub fn interval(lx: f64) -> Self {
        DomainSpec::Interval { lx, offset: None }
    }

    pub fn rectangle(lx: f64, ly: f64) -> Self {
        DomainSpec::Rectangle { lx, ly, offset: None }
    }

    pub fn measure(&self) -> f64 {
        match *self {
            DomainSpec::Interval { lx, .. } => lx,
            DomainSpec::Rectangle { lx, ly, .. } => lx * ly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DomainSpec::Interval { lx, .. } if lx <= 0.0 => {
                Err(Error::invalid(format!("interval length must be positive, got {lx}")))
            }
            DomainSpec::Rectangle { lx, ly, .. } if lx <= 0.0 || ly <= 0.0 => {
                Err(Error::invalid(format!("rectangle sides must be positive, got {lx} x {ly}")))
            }
            _ => Ok(()),
        }
    }
}

/// P1 mesh: nodes, elements (2-node segments or 3-node triangles) and their
/// measures. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub spec: DomainSpec,
    /// Node coordinates; y is 0 for interval meshes.
    pub nodes: Vec<[f64; 2]>,
    /// Vertex indices per element; segments leave the third slot at usize::MAX.
    pub elements: Vec<[usize; 3]>,
    /// 2 for segments, 3 for triangles.
    pub nodes_per_element: usize,
    /// Element lengths (1D) or areas (2D).
    pub element_measures: Vec<f64>,
    /// Grid resolution used to build the mesh: (n, 1) for intervals, (nx, ny).
    pub grid: (usize, usize),
}

impl Mesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    pub fn is_interval(&self) -> bool {
        self.nodes_per_element == 2
    }

    /// Vertex indices of element `e` (2 or 3 of them).
    pub fn element_nodes(&self, e: usize) -> &[usize] {
        &self.elements[e][..self.nodes_per_element]
    }

    pub fn domain_measure(&self) -> f64 {
        self.spec.measure()
    }
}

/// `n` equally spaced nodes on an interval of length `l`, n-1 segments.
pub fn build_interval_mesh(l: f64, n: usize) -> Result<Mesh> {
    build_interval_mesh_at(l, 0.0, n)
}

/// Interval mesh starting at `x0` instead of 0.
pub fn build_interval_mesh_at(l: f64, x0: f64, n: usize) -> Result<Mesh> {
    if n < 2 {
        return Err(Error::invalid(format!("interval mesh needs at least 2 nodes, got {n}")));
    }
    if l <= 0.0 {
        return Err(Error::invalid(format!("interval length must be positive, got {l}")));
    }
    let h = l / (n - 1) as f64;
    let nodes: Vec<[f64; 2]> = (0..n).map(|i| [x0 + i as f64 * h, 0.0]).collect();
    let elements: Vec<[usize; 3]> = (0..n - 1).map(|i| [i, i + 1, usize::MAX]).collect();
    let element_measures = vec![h; n - 1];
    Ok(Mesh {
        spec: DomainSpec::Interval { lx: l, offset: Some(x0) },
        nodes,
        elements,
        nodes_per_element: 2,
        element_measures,
        grid: (n, 1),
    })
}

/// Structured triangulation of a rectangle: nx*ny nodes (x-fastest), each of
/// the (nx-1)(ny-1) cells split lower-left to upper-right into two triangles.
pub fn build_rectangle_mesh(spec: DomainSpec, nx: usize, ny: usize) -> Result<Mesh> {
    let (lx, ly, offset) = match spec {
        DomainSpec::Rectangle { lx, ly, offset } => (lx, ly, offset),
        DomainSpec::Interval { .. } => {
            return Err(Error::invalid("build_rectangle_mesh called with an interval spec"))
        }
    };
    spec.validate()?;
    if nx < 2 || ny < 2 {
        return Err(Error::invalid(format!("rectangle mesh needs nx, ny >= 2, got {nx} x {ny}")));
    }
    let (x0, y0) = offset.unwrap_or((-lx / 2.0, -ly / 2.0));
    let hx = lx / (nx - 1) as f64;
    let hy = ly / (ny - 1) as f64;

    let mut nodes = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            nodes.push([x0 + i as f64 * hx, y0 + j as f64 * hy]);
        }
    }
    let mut elements = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    let mut element_measures = Vec::with_capacity(elements.capacity());
    let area = 0.5 * hx * hy;
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let ll = j * nx + i;
            let lr = ll + 1;
            let ul = ll + nx;
            let ur = ul + 1;
            elements.push([ll, lr, ur]);
            elements.push([ll, ur, ul]);
            element_measures.push(area);
            element_measures.push(area);
        }
    }
    Ok(Mesh {
        spec: DomainSpec::Rectangle { lx, ly, offset: Some((x0, y0)) },
        nodes,
        elements,
        nodes_per_element: 3,
        element_measures,
        grid: (nx, ny),
    })
}

/// Interpolates a nodal vector to element centers (arithmetic mean of the
/// vertex values), the coefficient evaluation the assembly scheme relies on.
pub fn point_to_center(mesh: &Mesh, nodal: &[f64]) -> Result<Vec<f64>> {
    if nodal.len() != mesh.node_count() {
        return Err(Error::invalid(format!(
            "nodal vector has length {}, mesh has {} nodes",
            nodal.len(),
            mesh.node_count()
        )));
    }
    let inv = 1.0 / mesh.nodes_per_element as f64;
    Ok((0..mesh.element_count())
        .map(|e| mesh.element_nodes(e).iter().map(|&v| nodal[v]).sum::<f64>() * inv)
        .collect())
}

/// Writes the plain-text mesh snapshot consumed by `xdcont mesh dump` users.
pub fn write_mesh_snapshot(mesh: &Mesh, w: &mut impl Write) -> Result<()> {
    use crate::output::fmt_g17 as g;
    match mesh.spec {
        DomainSpec::Interval { lx, offset } => {
            writeln!(w, "xdcont-mesh interval")?;
            writeln!(w, "lx {}", g(lx))?;
            writeln!(w, "offset {}", g(offset.unwrap_or(0.0)))?;
        }
        DomainSpec::Rectangle { lx, ly, offset } => {
            let (x0, y0) = offset.unwrap_or((-lx / 2.0, -ly / 2.0));
            writeln!(w, "xdcont-mesh rectangle")?;
            writeln!(w, "lx {}", g(lx))?;
            writeln!(w, "ly {}", g(ly))?;
            writeln!(w, "offset {} {}", g(x0), g(y0))?;
        }
    }
    writeln!(w, "grid {} {}", mesh.grid.0, mesh.grid.1)?;
    writeln!(w, "nodes {}", mesh.node_count())?;
    for p in &mesh.nodes {
        if mesh.is_interval() {
            writeln!(w, "{}", g(p[0]))?;
        } else {
            writeln!(w, "{} {}", g(p[0]), g(p[1]))?;
        }
    }
    writeln!(w, "elements {}", mesh.element_count())?;
    for e in 0..mesh.element_count() {
        let verts = mesh.element_nodes(e);
        let line: Vec<String> = verts.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Rebuilds a mesh from its snapshot (used by the CLI round-trip tests).
pub fn read_mesh_snapshot(r: &mut impl BufRead) -> Result<Mesh> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse("unexpected end of mesh snapshot".into()))?
            .map_err(Error::from)
    };
    let header = next()?;
    let kind = header
        .strip_prefix("xdcont-mesh ")
        .ok_or_else(|| Error::Parse(format!("not a mesh snapshot: `{header}`")))?
        .to_string();
    let field = |line: String, key: &str| -> Result<Vec<f64>> {
        let rest = line
            .strip_prefix(key)
            .ok_or_else(|| Error::Parse(format!("expected `{key}`, got `{line}`")))?;
        rest.split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
            .collect()
    };
    let spec = match kind.as_str() {
        "interval" => {
            let lx = field(next()?, "lx")?[0];
            let offset = field(next()?, "offset")?[0];
            DomainSpec::Interval { lx, offset: Some(offset) }
        }
        "rectangle" => {
            let lx = field(next()?, "lx")?[0];
            let ly = field(next()?, "ly")?[0];
            let off = field(next()?, "offset")?;
            DomainSpec::Rectangle { lx, ly, offset: Some((off[0], off[1])) }
        }
        other => return Err(Error::Parse(format!("unknown mesh kind `{other}`"))),
    };
    let grid = field(next()?, "grid")?;
    let (nx, ny) = (grid[0] as usize, grid[1] as usize);
    match spec {
        DomainSpec::Interval { lx, offset } => build_interval_mesh_at(lx, offset.unwrap_or(0.0), nx),
        DomainSpec::Rectangle { .. } => build_rectangle_mesh(spec, nx, ny),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_matches_reference_resolution() {
        let mesh = build_interval_mesh(1.0, 26).unwrap();
        assert_eq!(mesh.node_count(), 26);
        assert_eq!(mesh.element_count(), 25);
        for &m in &mesh.element_measures {
            assert!((m - 0.04).abs() < 1e-15);
        }
    }

    #[test]
    fn interval_minimal_and_summed_measures() {
        let mesh = build_interval_mesh(1.0, 2).unwrap();
        assert_eq!(mesh.element_count(), 1);
        assert!((mesh.element_measures[0] - 1.0).abs() < 1e-15);

        let mesh = build_interval_mesh(1.0, 101).unwrap();
        let total: f64 = mesh.element_measures.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interval_rejects_bad_arguments() {
        assert!(build_interval_mesh(1.0, 1).is_err());
        assert!(build_interval_mesh(0.0, 5).is_err());
        assert!(build_interval_mesh(-1.0, 5).is_err());
    }

    #[test]
    fn rectangle_counts_and_corner() {
        let mesh = build_rectangle_mesh(DomainSpec::rectangle(1.0, 4.0), 26, 101).unwrap();
        assert_eq!(mesh.node_count(), 2626);
        assert_eq!(mesh.element_count(), 5000);
        // node 0 sits at the lower-left corner of the centered domain
        assert!((mesh.nodes[0][0] + 0.5).abs() < 1e-15);
        assert!((mesh.nodes[0][1] + 2.0).abs() < 1e-15);
        let total: f64 = mesh.element_measures.iter().sum();
        assert!((total - 4.0).abs() < 1e-12 * 4.0);
    }

    #[test]
    fn unit_square_splits_into_two_half_triangles() {
        let mesh = build_rectangle_mesh(DomainSpec::rectangle(1.0, 1.0), 2, 2).unwrap();
        assert_eq!(mesh.element_count(), 2);
        for &a in &mesh.element_measures {
            assert!((a - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn point_to_center_linear_exactness() {
        let mesh = build_interval_mesh(1.0, 3).unwrap();
        let vals = point_to_center(&mesh, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(vals, vec![0.25, 0.75]);

        let c = point_to_center(&mesh, &[3.25; 3]).unwrap();
        assert!(c.iter().all(|&v| (v - 3.25).abs() < 1e-15));
    }

    #[test]
    fn point_to_center_matches_direct_mean_in_2d() {
        let mesh = build_rectangle_mesh(DomainSpec::rectangle(1.0, 4.0), 5, 9).unwrap();
        let nodal: Vec<f64> = (0..mesh.node_count()).map(|i| (i as f64 * 0.7).sin()).collect();
        let vals = point_to_center(&mesh, &nodal).unwrap();
        for e in 0..mesh.element_count() {
            let verts = mesh.element_nodes(e);
            let mean = verts.iter().map(|&v| nodal[v]).sum::<f64>() / 3.0;
            assert!((vals[e] - mean).abs() < 1e-15);
        }
        assert!(point_to_center(&mesh, &nodal[1..]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mesh = build_rectangle_mesh(DomainSpec::rectangle(1.0, 4.0), 4, 7).unwrap();
        let mut buf = Vec::new();
        write_mesh_snapshot(&mesh, &mut buf).unwrap();
        let back = read_mesh_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back.node_count(), mesh.node_count());
        assert_eq!(back.elements, mesh.elements);
        for (a, b) in back.nodes.iter().zip(&mesh.nodes) {
            assert!((a[0] - b[0]).abs() < 1e-16 && (a[1] - b[1]).abs() < 1e-16);
        }
    }
}
