use crate::mesh::{Mesh, Point, QuadratureRule, SpaceKind};

/// Values and reference gradients of the scalar basis of `kind` at reference
/// point `r`. P2 ordering: the three vertices, then the midpoints of
/// (v0,v1), (v1,v2), (v2,v0).
pub fn shape_eval(kind: SpaceKind, r: Point) -> (Vec<f64>, Vec<Point>) {
    let l = [1.0 - r[0] - r[1], r[0], r[1]];
    let dl: [Point; 3] = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
    match kind.scalar() {
        SpaceKind::P0 => (vec![1.0], vec![[0.0, 0.0]]),
        SpaceKind::P1 => (l.to_vec(), dl.to_vec()),
        _ => {
            let mut v = Vec::with_capacity(6);
            let mut g = Vec::with_capacity(6);
            for i in 0..3 {
                v.push(l[i] * (2.0 * l[i] - 1.0));
                let s = 4.0 * l[i] - 1.0;
                g.push([s * dl[i][0], s * dl[i][1]]);
            }
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                v.push(4.0 * l[i] * l[j]);
                g.push([
                    4.0 * (dl[i][0] * l[j] + l[i] * dl[j][0]),
                    4.0 * (dl[i][1] * l[j] + l[i] * dl[j][1]),
                ]);
            }
            (v, g)
        }
    }
}

/// Tabulated basis values, physical gradients and `|J| w` at every
/// quadrature point of every element, for one scalar space.
#[derive(Clone, Debug)]
pub struct ShapeTable {
    pub kind: SpaceKind,
    /// Basis functions per element.
    pub nb: usize,
    /// Quadrature points per element.
    pub nq: usize,
    values: Vec<f64>,
    grads: Vec<Point>,
    jxw: Vec<f64>,
}

impl ShapeTable {
    pub fn new(mesh: &Mesh, kind: SpaceKind, rule: &QuadratureRule) -> Self {
        let kind = kind.scalar();
        let nq = rule.len();
        let ref_tab: Vec<(Vec<f64>, Vec<Point>)> =
            rule.points.iter().map(|&r| shape_eval(kind, r)).collect();
        let nb = ref_tab[0].0.len();
        let ne = mesh.num_elements();
        let mut values = Vec::with_capacity(ne * nq * nb);
        let mut grads = Vec::with_capacity(ne * nq * nb);
        let mut jxw = Vec::with_capacity(ne * nq);
        for e in 0..ne {
            let [a, b, c] = mesh.corners(e);
            // J = [b - a | c - a]
            let (j00, j01, j10, j11) = (b[0] - a[0], c[0] - a[0], b[1] - a[1], c[1] - a[1]);
            let det = j00 * j11 - j01 * j10;
            for (q, (v, g)) in ref_tab.iter().enumerate() {
                values.extend_from_slice(v);
                // grad_x = J^{-T} grad_ref
                grads.extend(g.iter().map(|r| {
                    [
                        (j11 * r[0] - j10 * r[1]) / det,
                        (-j01 * r[0] + j00 * r[1]) / det,
                    ]
                }));
                jxw.push(det.abs() * rule.weights[q]);
            }
        }
        ShapeTable {
            kind,
            nb,
            nq,
            values,
            grads,
            jxw,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.jxw.len() / self.nq
    }

    #[inline]
    pub fn values(&self, e: usize, q: usize) -> &[f64] {
        let o = (e * self.nq + q) * self.nb;
        &self.values[o..o + self.nb]
    }

    #[inline]
    pub fn grads(&self, e: usize, q: usize) -> &[Point] {
        let o = (e * self.nq + q) * self.nb;
        &self.grads[o..o + self.nb]
    }

    #[inline]
    pub fn jxw(&self, e: usize, q: usize) -> f64 {
        self.jxw[e * self.nq + q]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_unit_square_mesh, quadrature};

    #[test]
    fn p1_centroid() {
        let (v, _) = shape_eval(SpaceKind::P1, [1.0 / 3.0, 1.0 / 3.0]);
        for x in v {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn p2_nodal_property() {
        let nodes = [
            [0.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.5, 0.0],
            [0.5, 0.5],
            [0.0, 0.5],
        ];
        for (k, &p) in nodes.iter().enumerate() {
            let (v, _) = shape_eval(SpaceKind::P2, p);
            for (m, x) in v.iter().enumerate() {
                let expect = if m == k { 1.0 } else { 0.0 };
                assert!((x - expect).abs() < 1e-15, "node {k} basis {m}");
            }
        }
        let (v, _) = shape_eval(SpaceKind::P0, [0.2, 0.2]);
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn p2_integrals_against_analytic() {
        // int over the reference triangle: vertex functions 0, edge functions 1/6
        let q = quadrature(4).unwrap();
        let mut ints = [0.0; 6];
        for (p, w) in q.points.iter().zip(&q.weights) {
            let (v, _) = shape_eval(SpaceKind::P2, *p);
            for k in 0..6 {
                ints[k] += w * v[k];
            }
        }
        for (k, &got) in ints.iter().enumerate() {
            let exact = if k < 3 { 0.0 } else { 1.0 / 6.0 };
            assert!((got - exact).abs() < 1e-15);
        }
    }

    #[test]
    fn partition_of_unity_everywhere() {
        let mesh = build_unit_square_mesh(3).unwrap();
        for kind in [SpaceKind::P1, SpaceKind::P2] {
            for deg in [1, 2, 4] {
                let t = ShapeTable::new(&mesh, kind, &quadrature(deg).unwrap());
                for e in 0..mesh.num_elements() {
                    for q in 0..t.nq {
                        let s: f64 = t.values(e, q).iter().sum();
                        assert!((s - 1.0).abs() < 1e-12);
                        let g = t.grads(e, q).iter().fold([0.0, 0.0], |acc, g| {
                            [acc[0] + g[0], acc[1] + g[1]]
                        });
                        assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_weights_sum_to_area() {
        for n in [1, 3, 6] {
            let mesh = build_unit_square_mesh(n).unwrap();
            for deg in 1..=4 {
                let t = ShapeTable::new(&mesh, SpaceKind::P1, &quadrature(deg).unwrap());
                let total: f64 = (0..mesh.num_elements())
                    .flat_map(|e| (0..t.nq).map(move |q| (e, q)))
                    .map(|(e, q)| t.jxw(e, q))
                    .sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn physical_gradients_of_linear_function() {
        // interpolant of f = 2x - 3y has gradient (2, -3) everywhere
        let mesh = build_unit_square_mesh(2).unwrap();
        let t = ShapeTable::new(&mesh, SpaceKind::P1, &quadrature(2).unwrap());
        for e in 0..mesh.num_elements() {
            let vals: Vec<f64> = mesh.elements[e]
                .iter()
                .map(|&a| 2.0 * mesh.nodes[a][0] - 3.0 * mesh.nodes[a][1])
                .collect();
            for q in 0..t.nq {
                let g = t.grads(e, q);
                let gx: f64 = (0..3).map(|k| vals[k] * g[k][0]).sum();
                let gy: f64 = (0..3).map(|k| vals[k] * g[k][1]).sum();
                assert!((gx - 2.0).abs() < 1e-13 && (gy + 3.0).abs() < 1e-13);
            }
        }
    }
}
