//! Structured triangulations of the unit square, quadrature rules and
//! degree-of-freedom maps for P0, P1 and P2 spaces.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Side of the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

    pub fn contains(self, p: Point) -> bool {
        const TOL: f64 = 1e-12;
        match self {
            Side::Left => p[0].abs() <= TOL,
            Side::Right => (p[0] - 1.0).abs() <= TOL,
            Side::Bottom => p[1].abs() <= TOL,
            Side::Top => (p[1] - 1.0).abs() <= TOL,
        }
    }

    pub fn outward_normal(self) -> Point {
        match self {
            Side::Left => [-1.0, 0.0],
            Side::Right => [1.0, 0.0],
            Side::Bottom => [0.0, -1.0],
            Side::Top => [0.0, 1.0],
        }
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            "bottom" => Ok(Side::Bottom),
            "top" => Ok(Side::Top),
            other => Err(Error::invalid(format!("unknown side tag `{other}`"))),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Bottom => "bottom",
            Side::Top => "top",
        };
        f.write_str(s)
    }
}

/// A mesh edge: sorted corner pair plus the global index of its midpoint
/// node in the P2 numbering (corners first, then edges).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub nodes: [usize; 2],
    pub midpoint: usize,
}

#[derive(Clone, Debug)]
pub struct Mesh {
    /// Subdivisions per side.
    pub n: usize,
    /// Corner node coordinates, row-major.
    pub nodes: Vec<Point>,
    /// Counterclockwise corner triples.
    pub elements: Vec<[usize; 3]>,
    pub edges: Vec<Edge>,
    /// Local edges of each element, ordered (v0,v1), (v1,v2), (v2,v0).
    pub element_edges: Vec<[usize; 3]>,
    pub boundary_nodes: BTreeSet<usize>,
    pub boundary_edges: Vec<(usize, Side)>,
}

/// Builds the `n x n` structured triangulation of the unit square. Every grid
/// cell is split along its lower-left to upper-right diagonal.
pub fn build_unit_square_mesh(n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::invalid("mesh needs at least one subdivision"));
    }
    let np = n + 1;
    let mut nodes = Vec::with_capacity(np * np);
    for j in 0..np {
        for i in 0..np {
            nodes.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let id = |i: usize, j: usize| j * np + i;
    let mut elements = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let a = id(i, j);
            let b = id(i + 1, j);
            let c = id(i + 1, j + 1);
            let d = id(i, j + 1);
            elements.push([a, b, c]);
            elements.push([a, c, d]);
        }
    }

    let n_corners = nodes.len();
    let mut edge_ids: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges = Vec::new();
    let mut element_edges = Vec::with_capacity(elements.len());
    for tri in &elements {
        let mut local = [0; 3];
        for (k, slot) in local.iter_mut().enumerate() {
            let (p, q) = (tri[k], tri[(k + 1) % 3]);
            let key = (p.min(q), p.max(q));
            *slot = *edge_ids.entry(key).or_insert_with(|| {
                edges.push(Edge {
                    nodes: [key.0, key.1],
                    midpoint: n_corners + edges.len(),
                });
                edges.len() - 1
            });
        }
        element_edges.push(local);
    }

    let boundary_nodes = (0..n_corners)
        .filter(|&k| Side::ALL.iter().any(|s| s.contains(nodes[k])))
        .collect();
    let mut boundary_edges = Vec::new();
    for (e, edge) in edges.iter().enumerate() {
        let (p, q) = (nodes[edge.nodes[0]], nodes[edge.nodes[1]]);
        if let Some(side) = Side::ALL.iter().find(|s| s.contains(p) && s.contains(q)) {
            boundary_edges.push((e, *side));
        }
    }

    Ok(Mesh {
        n,
        nodes,
        elements,
        edges,
        element_edges,
        boundary_nodes,
        boundary_edges,
    })
}

impl Mesh {
    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn corners(&self, e: usize) -> [Point; 3] {
        let t = self.elements[e];
        [self.nodes[t[0]], self.nodes[t[1]], self.nodes[t[2]]]
    }

    pub fn signed_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.corners(e);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    pub fn edge_midpoint(&self, edge: usize) -> Point {
        let [p, q] = self.edges[edge].nodes;
        [
            0.5 * (self.nodes[p][0] + self.nodes[q][0]),
            0.5 * (self.nodes[p][1] + self.nodes[q][1]),
        ]
    }

    /// Maps a reference point (xi, eta) of element `e` to physical space.
    pub fn map_point(&self, e: usize, r: Point) -> Point {
        let [a, b, c] = self.corners(e);
        let l0 = 1.0 - r[0] - r[1];
        [
            l0 * a[0] + r[0] * b[0] + r[1] * c[0],
            l0 * a[1] + r[0] * b[1] + r[1] * c[1],
        ]
    }

    /// Index of an element containing `p` (closed triangles; first match wins).
    pub fn locate(&self, p: Point) -> Option<usize> {
        let n = self.n as f64;
        let i = ((p[0] * n).floor() as isize).clamp(0, self.n as isize - 1) as usize;
        let j = ((p[1] * n).floor() as isize).clamp(0, self.n as isize - 1) as usize;
        if !(-1e-12..=1.0 + 1e-12).contains(&p[0]) || !(-1e-12..=1.0 + 1e-12).contains(&p[1]) {
            return None;
        }
        let cell = 2 * (j * self.n + i);
        // lower triangle lies below the diagonal of the cell
        let lx = p[0] * n - i as f64;
        let ly = p[1] * n - j as f64;
        Some(if ly <= lx { cell } else { cell + 1 })
    }

    /// Plain-text dump: a `nodes <n> elements <m>` header, one `x y` line per
    /// node and one line of three 0-based indices per element.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "nodes {} elements {}", self.nodes.len(), self.elements.len())?;
        for p in &self.nodes {
            writeln!(w, "{:.17e} {:.17e}", p[0], p[1])?;
        }
        for t in &self.elements {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

/// Quadrature rule on the reference triangle {(xi, eta): xi, eta >= 0, xi + eta <= 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub degree: usize,
    pub points: Vec<Point>,
    /// Sums to 1/2, the reference area.
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Symmetric Gauss rules with positive weights. Degree 3 uses the 6-point
/// degree-4 rule.
pub fn quadrature(degree: usize) -> Result<QuadratureRule> {
    let (points, weights) = match degree {
        1 => (vec![[1.0 / 3.0, 1.0 / 3.0]], vec![0.5]),
        2 => (
            vec![
                [1.0 / 6.0, 1.0 / 6.0],
                [2.0 / 3.0, 1.0 / 6.0],
                [1.0 / 6.0, 2.0 / 3.0],
            ],
            vec![1.0 / 6.0; 3],
        ),
        3 | 4 => {
            let a1 = 0.445_948_490_915_964_886_318_329_253_883_05;
            let b1 = 1.0 - 2.0 * a1;
            let w1 = 0.223_381_589_678_011_465_695_007_008_433_12 / 2.0;
            let a2 = 0.091_576_213_509_770_743_459_571_463_402_202;
            let b2 = 1.0 - 2.0 * a2;
            let w2 = 0.109_951_743_655_321_867_638_326_324_900_21 / 2.0;
            (
                vec![[a1, a1], [b1, a1], [a1, b1], [a2, a2], [b2, a2], [a2, b2]],
                vec![w1, w1, w1, w2, w2, w2],
            )
        }
        d => return Err(Error::invalid(format!("no quadrature rule of degree {d}"))),
    };
    Ok(QuadratureRule {
        degree: if degree == 3 { 4 } else { degree },
        points,
        weights,
    })
}

/// Physical coordinates of every quadrature point, element-major.
pub fn quad_points(mesh: &Mesh, rule: &QuadratureRule) -> Vec<Point> {
    (0..mesh.num_elements())
        .flat_map(|e| rule.points.iter().map(move |&r| mesh.map_point(e, r)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpaceKind {
    P0,
    P1,
    P2,
    P1Vector,
    P2Vector,
}

impl SpaceKind {
    pub fn components(self) -> usize {
        match self {
            SpaceKind::P1Vector | SpaceKind::P2Vector => 2,
            _ => 1,
        }
    }

    /// The scalar space each component lives in.
    pub fn scalar(self) -> SpaceKind {
        match self {
            SpaceKind::P1Vector => SpaceKind::P1,
            SpaceKind::P2Vector => SpaceKind::P2,
            k => k,
        }
    }

    /// Basis functions per element for one component.
    pub fn local_size(self) -> usize {
        match self.scalar() {
            SpaceKind::P0 => 1,
            SpaceKind::P1 => 3,
            _ => 6,
        }
    }
}

/// Global numbering of a finite element space. Vector spaces interleave the
/// two components: dof `2 * node + component`.
#[derive(Clone, Debug, PartialEq)]
pub struct DofMap {
    pub kind: SpaceKind,
    pub num_dofs: usize,
    /// Scalar node index of each scalar basis function, per element.
    pub element_nodes: Vec<Vec<usize>>,
    /// Global dofs per element; vector spaces list (node0 x, node0 y, node1 x, ...).
    pub element_dofs: Vec<Vec<usize>>,
    /// Coordinates of every scalar node.
    pub node_coords: Vec<Point>,
    pub dirichlet: BTreeMap<usize, f64>,
}

pub fn build_dofmap(mesh: &Mesh, kind: SpaceKind) -> DofMap {
    let (element_nodes, node_coords): (Vec<Vec<usize>>, Vec<Point>) = match kind.scalar() {
        SpaceKind::P0 => (
            (0..mesh.num_elements()).map(|e| vec![e]).collect(),
            (0..mesh.num_elements())
                .map(|e| mesh.map_point(e, [1.0 / 3.0, 1.0 / 3.0]))
                .collect(),
        ),
        SpaceKind::P1 => (
            mesh.elements.iter().map(|t| t.to_vec()).collect(),
            mesh.nodes.clone(),
        ),
        _ => {
            let nodes = mesh
                .elements
                .iter()
                .zip(&mesh.element_edges)
                .map(|(t, ed)| {
                    let mut v = t.to_vec();
                    v.extend(ed.iter().map(|&k| mesh.edges[k].midpoint));
                    v
                })
                .collect();
            let mut coords = mesh.nodes.clone();
            coords.extend((0..mesh.edges.len()).map(|k| mesh.edge_midpoint(k)));
            (nodes, coords)
        }
    };
    let ncomp = kind.components();
    let element_dofs = element_nodes
        .iter()
        .map(|ns| {
            ns.iter()
                .flat_map(|&a| (0..ncomp).map(move |c| ncomp * a + c))
                .collect()
        })
        .collect();
    DofMap {
        kind,
        num_dofs: node_coords.len() * ncomp,
        element_nodes,
        element_dofs,
        node_coords,
        dirichlet: BTreeMap::new(),
    }
}

impl DofMap {
    pub fn components(&self) -> usize {
        self.kind.components()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_coords.len()
    }

    /// Scalar nodes lying on `side`.
    pub fn nodes_on(&self, side: Side) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&a| side.contains(self.node_coords[a]))
            .collect()
    }

    /// Constrains component `comp` of every node on `side` to `value(x)`.
    pub fn constrain_side(
        &mut self,
        side: Side,
        comp: usize,
        value: impl Fn(Point) -> f64,
    ) -> Result<()> {
        if self.kind == SpaceKind::P0 {
            return Err(Error::invalid("P0 spaces carry no boundary dofs"));
        }
        if comp >= self.components() {
            return Err(Error::invalid(format!("component {comp} out of range")));
        }
        let ncomp = self.components();
        for a in self.nodes_on(side) {
            self.dirichlet
                .insert(ncomp * a + comp, value(self.node_coords[a]));
        }
        Ok(())
    }

    /// Dirichlet values as a full-length vector (zero on free dofs).
    pub fn dirichlet_lift(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_dofs];
        for (&d, &g) in &self.dirichlet {
            v[d] = g;
        }
        v
    }
}
