//! The two parameterizations of an unknown coefficient field: a tanh MLP
//! over coordinates, and direct per-quadrature-point / per-element values.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};

pub const DEFAULT_LAYERS: [usize; 5] = [2, 20, 20, 20, 1];

/// Fully connected network `R^2 -> R` with tanh hidden layers and a linear
/// output, plus a constant positive shift added to the output.
///
/// Weights are stored flat, layer by layer: the row-major `out x in` weight
/// matrix followed by the bias vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpField {
    layers: Vec<usize>,
    pub theta: Vec<f64>,
    pub output_shift: f64,
    pub seed: Option<u64>,
}

pub fn num_weights(layers: &[usize]) -> usize {
    layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp(seed: u64, layers: &[usize], output_shift: f64) -> Result<MlpField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Vec::with_capacity(num_weights(layers));
    for w in layers.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        theta.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        theta.extend(std::iter::repeat_n(0.0, fan_out));
    }
    let mut f = MlpField::new(layers.to_vec(), theta, output_shift)?;
    f.seed = Some(seed);
    Ok(f)
}

impl MlpField {
    pub fn new(layers: Vec<usize>, theta: Vec<f64>, output_shift: f64) -> Result<Self> {
        if layers.len() < 2 || layers[0] != 2 || *layers.last().unwrap() != 1 {
            return Err(Error::invalid(format!(
                "layer sizes {layers:?} must start with 2 and end with 1"
            )));
        }
        if theta.len() != num_weights(&layers) {
            return Err(Error::invalid(format!(
                "{} weights for layers {layers:?} (expected {})",
                theta.len(),
                num_weights(&layers)
            )));
        }
        if !(output_shift > 0.0) {
            return Err(Error::invalid("output shift must be positive"));
        }
        Ok(MlpField {
            layers,
            theta,
            output_shift,
            seed: None,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    // Runs one point forward and returns the activations of every layer
    // (input first, raw linear output last).
    fn activations(&self, x: Point) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let nl = self.layers.len() - 1;
        for (l, w) in self.layers.windows(2).enumerate() {
            let (ni, no) = (w[0], w[1]);
            let weights = &self.theta[off..off + ni * no];
            let bias = &self.theta[off + ni * no..off + ni * no + no];
            off += ni * no + no;
            let input = acts.last().unwrap();
            let z: Vec<f64> = (0..no)
                .map(|o| {
                    let row = &weights[o * ni..(o + 1) * ni];
                    bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            acts.push(if l + 1 < nl { z.iter().map(|v| v.tanh()).collect() } else { z });
        }
        acts
    }

    pub fn forward(&self, coords: &[Point]) -> Vec<f64> {
        coords
            .iter()
            .map(|&x| self.activations(x).last().unwrap()[0] + self.output_shift)
            .collect()
    }

    /// Gradient of `sum_k vbar[k] * forward(coords)[k]` with respect to the
    /// flat weight vector.
    pub fn vjp(&self, coords: &[Point], vbar: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != vbar.len() {
            return Err(Error::invalid(format!(
                "mlp vjp: {} adjoints for {} points",
                vbar.len(),
                coords.len()
            )));
        }
        let mut grad = vec![0.0; self.theta.len()];
        let nl = self.layers.len() - 1;
        let mut offsets = Vec::with_capacity(nl);
        let mut off = 0;
        for w in self.layers.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        for (&x, &vb) in coords.iter().zip(vbar) {
            if vb == 0.0 {
                continue;
            }
            let acts = self.activations(x);
            // adjoint of the pre-activation of the current layer
            let mut delta = vec![vb];
            for l in (0..nl).rev() {
                let (ni, no) = (self.layers[l], self.layers[l + 1]);
                let o = offsets[l];
                let input = &acts[l];
                for r in 0..no {
                    for c in 0..ni {
                        grad[o + r * ni + c] += delta[r] * input[c];
                    }
                    grad[o + ni * no + r] += delta[r];
                }
                if l == 0 {
                    break;
                }
                let weights = &self.theta[o..o + ni * no];
                delta = (0..ni)
                    .map(|c| {
                        let back: f64 = (0..no).map(|r| weights[r * ni + c] * delta[r]).sum();
                        back * (1.0 - input[c] * input[c])
                    })
                    .collect();
            }
        }
        Ok(grad)
    }

    /// Bound on |output - shift| implied by the tanh hidden layers.
    pub fn output_bound(&self) -> f64 {
        let nl = self.layers.len();
        let ni = self.layers[nl - 2];
        let o = self.theta.len() - ni - 1;
        self.theta[o..o + ni].iter().map(|w| w.abs()).sum::<f64>() + self.theta[o + ni].abs()
    }

    /// Text checkpoint: a header line followed by one weight per line.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let seed = self.seed.map_or("none".to_string(), |s| s.to_string());
        writeln!(w, "mlp {layers} shift={} seed={seed}", self.output_shift)?;
        for v in &self.theta {
            writeln!(w, "{v:.17e}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty checkpoint"))??;
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some("mlp") {
            return Err(Error::invalid("checkpoint header must start with `mlp`"));
        }
        let mut layers = Vec::new();
        let mut shift = None;
        let mut seed = None;
        for t in tokens {
            if let Some(v) = t.strip_prefix("shift=") {
                shift = Some(v.parse::<f64>().map_err(|e| Error::invalid(e.to_string()))?);
            } else if let Some(v) = t.strip_prefix("seed=") {
                seed = v.parse::<u64>().ok();
            } else {
                layers.push(t.parse::<usize>().map_err(|e| Error::invalid(e.to_string()))?);
            }
        }
        let theta = lines
            .map(|l| {
                let l = l?;
                l.trim().parse::<f64>().map_err(|e| Error::invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let shift = shift.ok_or_else(|| Error::invalid("checkpoint header lacks shift="))?;
        let mut f = MlpField::new(layers, theta, shift)?;
        f.seed = seed;
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerQuadPoint,
    PerElement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Abs,
    None,
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(Transform::Abs),
            "none" => Ok(Transform::None),
            other => Err(Error::invalid(format!("unknown transform `{other}`"))),
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transform::Abs => "abs",
            Transform::None => "none",
        })
    }
}

/// Field values stored directly at quadrature points or per element.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedField {
    pub granularity: Granularity,
    pub transform: Transform,
    pub theta: Vec<f64>,
    num_elements: usize,
    nq: usize,
}

impl DiscretizedField {
    pub fn new(
        granularity: Granularity,
        transform: Transform,
        theta: Vec<f64>,
        num_elements: usize,
        nq: usize,
    ) -> Result<Self> {
        let expected = match granularity {
            Granularity::PerQuadPoint => num_elements * nq,
            Granularity::PerElement => num_elements,
        };
        if theta.len() != expected {
            return Err(Error::invalid(format!(
                "{} field values, expected {expected}",
                theta.len()
            )));
        }
        Ok(DiscretizedField {
            granularity,
            transform,
            theta,
            num_elements,
            nq,
        })
    }

    fn apply(&self, v: f64) -> f64 {
        match self.transform {
            Transform::Abs => v.abs(),
            Transform::None => v,
        }
    }

    fn slope(&self, v: f64) -> f64 {
        match self.transform {
            // sign(0) := 0
            Transform::Abs if v > 0.0 => 1.0,
            Transform::Abs if v < 0.0 => -1.0,
            Transform::Abs => 0.0,
            Transform::None => 1.0,
        }
    }

    /// Values at every quadrature point (element-major).
    pub fn eval(&self) -> Vec<f64> {
        match self.granularity {
            Granularity::PerQuadPoint => self.theta.iter().map(|&v| self.apply(v)).collect(),
            Granularity::PerElement => self
                .theta
                .iter()
                .flat_map(|&v| std::iter::repeat_n(self.apply(v), self.nq))
                .collect(),
        }
    }

    pub fn vjp(&self, vbar: &[f64]) -> Result<Vec<f64>> {
        if vbar.len() != self.num_elements * self.nq {
            return Err(Error::invalid(format!(
                "discretized vjp: {} adjoints, expected {}",
                vbar.len(),
                self.num_elements * self.nq
            )));
        }
        Ok(match self.granularity {
            Granularity::PerQuadPoint => self
                .theta
                .iter()
                .zip(vbar)
                .map(|(&t, &b)| self.slope(t) * b)
                .collect(),
            Granularity::PerElement => self
                .theta
                .iter()
                .zip(vbar.chunks(self.nq))
                .map(|(&t, b)| self.slope(t) * b.iter().sum::<f64>())
                .collect(),
        })
    }
}

/// A trainable field bound to a mesh and its quadrature points.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldParam {
    Mlp(MlpField),
    Discretized(DiscretizedField),
}

impl FieldParam {
    pub fn theta(&self) -> &[f64] {
        match self {
            FieldParam::Mlp(m) => &m.theta,
            FieldParam::Discretized(d) => &d.theta,
        }
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.theta().len() {
            return Err(Error::invalid("parameter vector length changed"));
        }
        let mut out = self.clone();
        match &mut out {
            FieldParam::Mlp(m) => m.theta.copy_from_slice(theta),
            FieldParam::Discretized(d) => d.theta.copy_from_slice(theta),
        }
        Ok(out)
    }

    /// Field values at the quadrature points `coords`.
    pub fn eval(&self, coords: &[Point]) -> Result<Vec<f64>> {
        match self {
            FieldParam::Mlp(m) => Ok(m.forward(coords)),
            FieldParam::Discretized(d) => {
                let v = d.eval();
                if v.len() != coords.len() {
                    return Err(Error::invalid("discretized field bound to a different mesh"));
                }
                Ok(v)
            }
        }
    }

    pub fn vjp(&self, coords: &[Point], vbar: &[f64]) -> Result<Vec<f64>> {
        match self {
            FieldParam::Mlp(m) => m.vjp(coords, vbar),
            FieldParam::Discretized(d) => d.vjp(vbar),
        }
    }

    /// Point evaluation anywhere in the domain. Discretized fields are
    /// piecewise constant: per element, or on the nearest quadrature point
    /// of the containing element.
    pub fn sample(&self, p: Point, mesh: &Mesh, quad_coords: &[Point]) -> Result<f64> {
        match self {
            FieldParam::Mlp(m) => Ok(m.forward(&[p])[0]),
            FieldParam::Discretized(d) => {
                let e = mesh
                    .locate(p)
                    .ok_or_else(|| Error::invalid(format!("point {p:?} outside the mesh")))?;
                let k = match d.granularity {
                    Granularity::PerElement => e,
                    Granularity::PerQuadPoint => {
                        let base = e * d.nq;
                        (base..base + d.nq)
                            .min_by(|&a, &b| {
                                let da = dist2(quad_coords[a], p);
                                let db = dist2(quad_coords[b], p);
                                da.total_cmp(&db)
                            })
                            .expect("at least one quadrature point")
                    }
                };
                Ok(d.apply(d.theta[k]))
            }
        }
    }
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_mlp(shift: f64) -> MlpField {
        MlpField::new(DEFAULT_LAYERS.to_vec(), vec![0.0; 921], shift).unwrap()
    }

    #[test]
    fn weight_count() {
        assert_eq!(num_weights(&DEFAULT_LAYERS), 921);
        assert_eq!(init_mlp(0, &DEFAULT_LAYERS, 1.0).unwrap().theta.len(), 921);
    }

    #[test]
    fn zero_network_outputs_shift() {
        let m = zero_mlp(1.0);
        assert_eq!(m.forward(&[[0.1, 0.2], [0.9, 0.4]]), vec![1.0, 1.0]);
    }

    #[test]
    fn last_bias_is_affine_path() {
        let mut m = zero_mlp(1.0);
        *m.theta.last_mut().unwrap() = 0.5;
        assert_eq!(m.forward(&[[0.3, 0.3]]), vec![1.5]);
    }

    // straightforward matrix-vector formulation, independent of the flat
    // layout walk in `activations`
    fn reference_forward(m: &MlpField, x: Point) -> f64 {
        let mut layers = Vec::new();
        let mut off = 0;
        for w in m.layers().windows(2) {
            let (ni, no) = (w[0], w[1]);
            let mat: Vec<Vec<f64>> = (0..no)
                .map(|r| m.theta[off + r * ni..off + (r + 1) * ni].to_vec())
                .collect();
            let b = m.theta[off + ni * no..off + ni * no + no].to_vec();
            off += ni * no + no;
            layers.push((mat, b));
        }
        let mut h = x.to_vec();
        let last = layers.len() - 1;
        for (l, (mat, b)) in layers.iter().enumerate() {
            let mut z = b.clone();
            for (r, row) in mat.iter().enumerate() {
                for (c, w) in row.iter().enumerate() {
                    z[r] += w * h[c];
                }
            }
            h = if l < last { z.into_iter().map(f64::tanh).collect() } else { z };
        }
        h[0] + m.output_shift
    }

    #[test]
    fn forward_matches_reference() {
        let mut m = init_mlp(3, &DEFAULT_LAYERS, 1.0).unwrap();
        for (k, v) in m.theta.iter_mut().enumerate() {
            *v += 0.01 * (k as f64).sin();
        }
        let pts = [[0.1, 0.2], [0.5, 0.5], [0.9, 0.1], [0.0, 1.0], [0.33, 0.77]];
        let out = m.forward(&pts);
        for (p, o) in pts.iter().zip(&out) {
            assert!((reference_forward(&m, *p) - o).abs() < 1e-14);
        }
    }

    #[test]
    fn vjp_matches_fd_all_weights() {
        for seed in [1, 2, 3] {
            let mut m = init_mlp(seed, &DEFAULT_LAYERS, 1.0).unwrap();
            for (k, v) in m.theta.iter_mut().enumerate() {
                *v += 0.05 * ((k * 7 + seed as usize) as f64).cos();
            }
            let p = [[0.3, 0.7]];
            let g = m.vjp(&p, &[1.0]).unwrap();
            for k in 0..m.theta.len() {
                let h = 1e-5;
                let mut mp = m.clone();
                mp.theta[k] += h;
                let mut mm = m.clone();
                mm.theta[k] -= h;
                let fd = (mp.forward(&p)[0] - mm.forward(&p)[0]) / (2.0 * h);
                let err = (fd - g[k]).abs() / (g[k].abs() + 1e-12);
                assert!(err <= 1e-6 || (fd - g[k]).abs() < 1e-10, "weight {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn vjp_zero_and_linear() {
        let m = init_mlp(9, &DEFAULT_LAYERS, 1.0).unwrap();
        let pts = [[0.2, 0.1], [0.6, 0.6]];
        assert!(m.vjp(&pts, &[0.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));
        let g1 = m.vjp(&pts, &[0.3, -1.2]).unwrap();
        let g2 = m.vjp(&pts, &[0.6, -2.4]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
        assert!(m.vjp(&pts, &[1.0]).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_mlp(5, &DEFAULT_LAYERS, 1.0).unwrap();
        let b = init_mlp(5, &DEFAULT_LAYERS, 1.0).unwrap();
        let c = init_mlp(6, &DEFAULT_LAYERS, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.theta, c.theta);
        let v = a.forward(&[[0.5, 0.5], [0.1, 0.9]]);
        for x in v {
            assert!((x - 1.0).abs() <= a.output_bound());
        }
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(MlpField::new(vec![2, 3, 1], vec![0.0; 5], 1.0).is_err());
        assert!(MlpField::new(vec![2, 3, 1], vec![0.0; 13], 0.0).is_err());
        assert!(MlpField::new(vec![3, 1], vec![0.0; 4], 1.0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = init_mlp(12, &DEFAULT_LAYERS, 0.5).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("mlp 2 20 20 20 1 shift=0.5 seed=12\n"));
        let back = MlpField::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn discretized_abs_per_element() {
        let d = DiscretizedField::new(Granularity::PerElement, Transform::Abs, vec![-2.0, 3.0], 2, 3)
            .unwrap();
        assert_eq!(d.eval(), vec![2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(d.vjp(&[1.0, 1.0, 1.0, 0.5, 0.5, 0.5]).unwrap(), vec![-3.0, 1.5]);
    }

    #[test]
    fn discretized_identity_accumulates() {
        let d = DiscretizedField::new(Granularity::PerElement, Transform::None, vec![-2.0, 3.0], 2, 2)
            .unwrap();
        assert_eq!(d.eval(), vec![-2.0, -2.0, 3.0, 3.0]);
        assert_eq!(d.vjp(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![3.0, 7.0]);
        assert!(d.vjp(&[1.0]).is_err());
        let z = DiscretizedField::new(Granularity::PerQuadPoint, Transform::Abs, vec![0.0, -1.0], 1, 2)
            .unwrap();
        assert_eq!(z.vjp(&[5.0, 5.0]).unwrap(), vec![0.0, -5.0]);
    }

    #[test]
    fn discretized_vjp_matches_fd() {
        let theta: Vec<f64> = (0..12).map(|k| (k as f64 - 5.5) * 0.3).collect();
        let vbar: Vec<f64> = (0..12).map(|k| (k as f64).sin()).collect();
        for transform in [Transform::Abs, Transform::None] {
            let d = DiscretizedField::new(Granularity::PerQuadPoint, transform, theta.clone(), 4, 3)
                .unwrap();
            let g = d.vjp(&vbar).unwrap();
            let f = |t: &[f64]| -> f64 {
                let dd = DiscretizedField::new(Granularity::PerQuadPoint, transform, t.to_vec(), 4, 3)
                    .unwrap();
                dd.eval().iter().zip(&vbar).map(|(a, b)| a * b).sum()
            };
            for k in 0..12 {
                let h = 1e-6;
                let mut tp = theta.clone();
                tp[k] += h;
                let mut tm = theta.clone();
                tm[k] -= h;
                let fd = (f(&tp) - f(&tm)) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-8 * g[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn per_element_equals_constant_per_quad() {
        let pe = DiscretizedField::new(Granularity::PerElement, Transform::Abs, vec![1.5, -0.5, 2.0], 3, 4)
            .unwrap();
        let pq_theta: Vec<f64> = pe.theta.iter().flat_map(|&v| [v; 4]).collect();
        let pq = DiscretizedField::new(Granularity::PerQuadPoint, Transform::Abs, pq_theta, 3, 4)
            .unwrap();
        assert_eq!(pe.eval(), pq.eval());
    }

    proptest! {
        #[test]
        fn abs_output_nonnegative(theta in prop::collection::vec(-10.0f64..10.0, 6)) {
            let d = DiscretizedField::new(Granularity::PerQuadPoint, Transform::Abs, theta, 2, 3).unwrap();
            prop_assert!(d.eval().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn mlp_output_bounded(seed in 0u64..1000, scale in 0.1f64..5.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let mut m = init_mlp(seed, &DEFAULT_LAYERS, 1.0).unwrap();
            m.theta.iter_mut().for_each(|v| *v *= scale);
            let out = m.forward(&[[x, y]])[0];
            prop_assert!((out - m.output_shift).abs() <= m.output_bound() + 1e-12);
        }
    }
}
