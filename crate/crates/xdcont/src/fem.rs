//! P1 finite element assembly with homogeneous Neumann conditions: mass,
//! coefficient-weighted stiffness, and load operators. Diffusion coefficients
//! are element-wise constants (the models interpolate nodal fields to element
//! centers first); mass and load use the exact P1 x P1 integrals, so no
//! quadrature error enters anywhere.

use crate::error::{Error, Result};
use crate::linalg::{BandMatrix, CsrMatrix};
use crate::mesh::Mesh;

/// Element-wise coefficient; scalars broadcast to every element.
#[derive(Debug, Clone, Copy)]
pub enum Coefficient<'a> {
    Scalar(f64),
    PerElement(&'a [f64]),
}

impl<'a> Coefficient<'a> {
    fn check(&self, element_count: usize, what: &str) -> Result<()> {
        if let Coefficient::PerElement(v) = self {
            if v.len() != element_count {
                return Err(Error::invalid(format!(
                    "{what} coefficient has {} entries, mesh has {element_count} elements",
                    v.len()
                )));
            }
        }
        Ok(())
    }

    #[inline]
    fn at(&self, e: usize) -> f64 {
        match *self {
            Coefficient::Scalar(s) => s,
            Coefficient::PerElement(v) => v[e],
        }
    }
}

/// Stiffness, mass and load operators for one coefficient set.
#[derive(Debug, Clone)]
pub struct AssembledOperators {
    pub k: CsrMatrix,
    pub mmass: CsrMatrix,
    pub f: Vec<f64>,
}

/// Precomputed geometry and sparsity for repeated assembly on one mesh:
/// local stiffness matrices, the node-adjacency CSR pattern with per-element
/// scatter slots, and the unit stiffness/mass operators.
#[derive(Debug, Clone)]
pub struct FemWorkspace {
    pub node_count: usize,
    pub nloc: usize,
    pub elements: Vec<[usize; 3]>,
    pub measures: Vec<f64>,
    /// Unit-coefficient local stiffness, row-major nloc x nloc per element.
    pub kloc: Vec<[f64; 9]>,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    /// CSR value index for each (element, iloc*nloc + jloc) pair.
    slots: Vec<[usize; 9]>,
    /// Unit stiffness (c = 1).
    pub k1: CsrMatrix,
    /// Unit mass (a = 1).
    pub m1: CsrMatrix,
    pub domain_measure: f64,
    /// Largest |i - j| over adjacent node pairs; sizes banded Jacobians.
    pub max_node_offset: usize,
}

/// Exact P1 mass weights: integral of phi_i phi_j over an element of unit
/// measure (2-point values on segments, 3-point on triangles).
#[inline]
pub fn mass_weight(nloc: usize, i: usize, j: usize) -> f64 {
    let denom = if nloc == 2 { 6.0 } else { 12.0 };
    if i == j {
        2.0 / denom
    } else {
        1.0 / denom
    }
}

impl FemWorkspace {
    pub fn new(mesh: &Mesh) -> Self {
        let nloc = mesh.nodes_per_element;
        let ne = mesh.element_count();
        let n = mesh.node_count();

        let mut kloc = vec![[0.0f64; 9]; ne];
        for e in 0..ne {
            let verts = mesh.element_nodes(e);
            if nloc == 2 {
                let h = mesh.element_measures[e];
                let k = 1.0 / h;
                kloc[e][0] = k;
                kloc[e][1] = -k;
                kloc[e][2] = -k;
                kloc[e][3] = k;
            } else {
                let p: Vec<[f64; 2]> = verts.iter().map(|&v| mesh.nodes[v]).collect();
                let area = mesh.element_measures[e];
                // gradient components of the barycentric basis functions
                let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
                let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
                for i in 0..3 {
                    for j in 0..3 {
                        kloc[e][i * 3 + j] = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
                    }
                }
            }
        }

        // adjacency pattern and element scatter slots
        let mut triplets = Vec::with_capacity(ne * nloc * nloc);
        for e in 0..ne {
            let verts = mesh.element_nodes(e);
            for &i in verts {
                for &j in verts {
                    triplets.push((i, j, 0.0));
                }
            }
        }
        let pattern = CsrMatrix::from_triplets(n, &triplets);
        let find = |r: usize, c: usize| -> usize {
            for k in pattern.indptr[r]..pattern.indptr[r + 1] {
                if pattern.indices[k] == c {
                    return k;
                }
            }
            unreachable!("pattern misses its own entry")
        };
        let mut slots = vec![[0usize; 9]; ne];
        for e in 0..ne {
            let verts = mesh.element_nodes(e);
            for (il, &i) in verts.iter().enumerate() {
                for (jl, &j) in verts.iter().enumerate() {
                    slots[e][il * nloc + jl] = find(i, j);
                }
            }
        }
        let mut max_node_offset = 0usize;
        for r in 0..n {
            for k in pattern.indptr[r]..pattern.indptr[r + 1] {
                max_node_offset = max_node_offset.max(r.abs_diff(pattern.indices[k]));
            }
        }

        let elements: Vec<[usize; 3]> = mesh.elements.clone();
        let measures = mesh.element_measures.clone();

        let mut ws = FemWorkspace {
            node_count: n,
            nloc,
            elements,
            measures,
            kloc,
            indptr: pattern.indptr,
            indices: pattern.indices,
            slots,
            k1: CsrMatrix { n, indptr: vec![], indices: vec![], values: vec![] },
            m1: CsrMatrix { n, indptr: vec![], indices: vec![], values: vec![] },
            domain_measure: mesh.domain_measure(),
            max_node_offset,
        };
        ws.k1 = ws.stiffness(Coefficient::Scalar(1.0)).expect("unit stiffness");
        ws.m1 = ws.mass(Coefficient::Scalar(1.0)).expect("unit mass");
        ws
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    fn empty_values(&self) -> CsrMatrix {
        CsrMatrix {
            n: self.node_count,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: vec![0.0; self.indices.len()],
        }
    }

    /// K_ij = integral of c grad(phi_i) . grad(phi_j).
    pub fn stiffness(&self, c: Coefficient) -> Result<CsrMatrix> {
        c.check(self.element_count(), "diffusion")?;
        let mut k = self.empty_values();
        let nloc = self.nloc;
        for e in 0..self.element_count() {
            let ce = c.at(e);
            for il in 0..nloc {
                for jl in 0..nloc {
                    k.values[self.slots[e][il * nloc + jl]] += ce * self.kloc[e][il * nloc + jl];
                }
            }
        }
        Ok(k)
    }

    /// Mmass_ij = integral of a phi_i phi_j.
    pub fn mass(&self, a: Coefficient) -> Result<CsrMatrix> {
        a.check(self.element_count(), "reaction")?;
        let mut m = self.empty_values();
        let nloc = self.nloc;
        for e in 0..self.element_count() {
            let scale = a.at(e) * self.measures[e];
            for il in 0..nloc {
                for jl in 0..nloc {
                    m.values[self.slots[e][il * nloc + jl]] += scale * mass_weight(nloc, il, jl);
                }
            }
        }
        Ok(m)
    }

    /// F_i = integral of f phi_i with f the P1 interpolant of the nodal data,
    /// i.e. the unit mass matrix applied to `f`, accumulated element-wise.
    pub fn load(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.node_count {
            return Err(Error::invalid(format!(
                "load vector has {} entries, mesh has {} nodes",
                f.len(),
                self.node_count
            )));
        }
        let mut out = vec![0.0; self.node_count];
        self.load_into(f, &mut out);
        Ok(out)
    }

    pub fn load_into(&self, f: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let nloc = self.nloc;
        for e in 0..self.element_count() {
            let verts = &self.elements[e][..nloc];
            let scale = self.measures[e];
            for (il, &i) in verts.iter().enumerate() {
                let mut acc = 0.0;
                for (jl, &j) in verts.iter().enumerate() {
                    acc += mass_weight(nloc, il, jl) * f[j];
                }
                out[i] += scale * acc;
            }
        }
    }

    /// One-call assembly of all three operators.
    pub fn assemble(&self, c: Coefficient, a: Coefficient, f: &[f64]) -> Result<AssembledOperators> {
        Ok(AssembledOperators { k: self.stiffness(c)?, mmass: self.mass(a)?, f: self.load(f)? })
    }

    /// Copies a node-pattern CSR matrix into band storage with the given
    /// half-bandwidth (used for the scalar Laplace eigenproblem).
    pub fn csr_to_band(&self, m: &CsrMatrix) -> BandMatrix {
        let bw = self.max_node_offset;
        let mut band = BandMatrix::new(m.n, bw, bw);
        for r in 0..m.n {
            for k in m.indptr[r]..m.indptr[r + 1] {
                band.add(r, m.indices[k], m.values[k]);
            }
        }
        band
    }
}

/// Convenience entry point: build the workspace and assemble in one call.
pub fn assemble(
    mesh: &Mesh,
    c: Coefficient,
    a: Coefficient,
    f: &[f64],
) -> Result<AssembledOperators> {
    FemWorkspace::new(mesh).assemble(c, a, f)
}
