//! Coarse-grained reverse-mode computational graph.
//!
//! Nodes are solver-scale operators (field evaluation, assembly, linear and
//! nonlinear solves, time marching, losses). Forward values are computed
//! eagerly when a node is recorded; [`Tape::backward`] then walks the nodes
//! in reverse and calls each operator's vector-Jacobian product.
//!
//! Matrix-valued adjoints live on the pattern of the forward matrix.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::la::SparseMatrix;

/// Forward value (and adjoint) carried by a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Vector(Vec<f64>),
    Matrix(SparseMatrix),
}

impl Value {
    pub fn scalar(v: f64) -> Self {
        Value::Vector(vec![v])
    }

    pub fn as_vector(&self) -> Result<&[f64]> {
        match self {
            Value::Vector(v) => Ok(v),
            Value::Matrix(_) => Err(Error::invalid("expected a vector value, found a matrix")),
        }
    }

    pub fn as_matrix(&self) -> Result<&SparseMatrix> {
        match self {
            Value::Matrix(m) => Ok(m),
            Value::Vector(_) => Err(Error::invalid("expected a matrix value, found a vector")),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Value::Vector(v) => v.len(),
            Value::Matrix(m) => m.nnz(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_finite(&self) -> bool {
        match self {
            Value::Vector(v) => v.iter().all(|x| x.is_finite()),
            Value::Matrix(m) => m.values.iter().all(|x| x.is_finite()),
        }
    }

    fn accumulate(&mut self, other: Value) -> Result<()> {
        match (self, other) {
            (Value::Vector(a), Value::Vector(b)) if a.len() == b.len() => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(())
            }
            (Value::Matrix(a), Value::Matrix(b)) if a.same_pattern(&b) => {
                a.values.iter_mut().zip(b.values).for_each(|(x, y)| *x += y);
                Ok(())
            }
            _ => Err(Error::invalid("adjoint contributions have mismatched shapes")),
        }
    }
}

/// A differentiable operator. `forward` may stash whatever context the
/// reverse rule needs (factorizations, converged states) in `self`.
pub trait Operator {
    fn tag(&self) -> &str;

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value>;

    /// Adjoints of the inputs given the adjoint of the output. Inputs with
    /// `wanted[k] == false` may be skipped by returning `None`.
    fn vjp(
        &self,
        _inputs: &[&Value],
        _output: &Value,
        _adjoint: &Value,
        _wanted: &[bool],
    ) -> Result<Vec<Option<Value>>> {
        Err(Error::UnsupportedOperator(self.tag().to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

enum NodeKind<'a> {
    Parameter(String),
    Constant,
    Op(Box<dyn Operator + 'a>),
}

struct Node<'a> {
    kind: NodeKind<'a>,
    inputs: Vec<NodeId>,
    output: Value,
    requires_grad: bool,
}

/// The tape. Nodes are appended in evaluation order, which is a valid
/// topological order by construction.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a named trainable leaf.
    pub fn parameter(&mut self, name: impl Into<String>, value: Vec<f64>) -> NodeId {
        self.push(Node {
            kind: NodeKind::Parameter(name.into()),
            inputs: Vec::new(),
            output: Value::Vector(value),
            requires_grad: true,
        })
    }

    pub fn constant(&mut self, value: Value) -> NodeId {
        self.push(Node {
            kind: NodeKind::Constant,
            inputs: Vec::new(),
            output: value,
            requires_grad: false,
        })
    }

    fn push(&mut self, node: Node<'a>) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id.0].output
    }

    /// Runs `op` forward on `inputs` and appends it.
    pub fn record(
        &mut self,
        mut op: impl Operator + 'a,
        inputs: &[NodeId],
    ) -> Result<NodeId> {
        let index = self.nodes.len();
        if let Some(bad) = inputs.iter().find(|id| id.0 >= index) {
            return Err(Error::invalid(format!("input node {} is not on the tape", bad.0)));
        }
        let values: Vec<&Value> = inputs.iter().map(|id| &self.nodes[id.0].output).collect();
        let output = op.forward(&values).map_err(|e| Error::NodeFailed {
            node: index,
            tag: op.tag().to_string(),
            source: Box::new(e),
        })?;
        if !output.is_finite() && values.iter().all(|v| v.is_finite()) {
            return Err(Error::NodeFailed {
                node: index,
                tag: op.tag().to_string(),
                source: Box::new(Error::NonPhysical("non-finite operator output".into())),
            });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Node {
            kind: NodeKind::Op(Box::new(op)),
            inputs: inputs.to_vec(),
            output,
            requires_grad,
        }))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Vec<f64>>> {
        let out = self.nodes[loss.0].output.as_vector()?;
        if out.len() != 1 {
            return Err(Error::invalid(format!(
                "loss must be a scalar, node {} has length {}",
                loss.0,
                out.len()
            )));
        }
        let mut adjoints: Vec<Option<Value>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(Value::scalar(1.0));
        let mut grads = BTreeMap::new();

        for index in (0..=loss.0).rev() {
            let node = &self.nodes[index];
            let Some(adj) = adjoints[index].take() else {
                if let NodeKind::Parameter(name) = &node.kind {
                    grads
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; node.output.len()]);
                }
                continue;
            };
            match &node.kind {
                NodeKind::Parameter(name) => {
                    let g = match adj {
                        Value::Vector(v) => v,
                        Value::Matrix(_) => unreachable!("parameters are vectors"),
                    };
                    grads
                        .entry(name.clone())
                        .and_modify(|acc: &mut Vec<f64>| {
                            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b)
                        })
                        .or_insert(g);
                }
                NodeKind::Constant => {}
                NodeKind::Op(op) => {
                    if !node.requires_grad {
                        continue;
                    }
                    let values: Vec<&Value> =
                        node.inputs.iter().map(|id| &self.nodes[id.0].output).collect();
                    let wanted: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|id| self.nodes[id.0].requires_grad)
                        .collect();
                    let contribs = op
                        .vjp(&values, &node.output, &adj, &wanted)
                        .map_err(|e| match e {
                            Error::UnsupportedOperator(_) => e,
                            other => Error::NodeFailed {
                                node: index,
                                tag: op.tag().to_string(),
                                source: Box::new(other),
                            },
                        })?;
                    for ((id, contrib), want) in node.inputs.iter().zip(contribs).zip(&wanted) {
                        let (Some(c), true) = (contrib, *want) else {
                            continue;
                        };
                        match &mut adjoints[id.0] {
                            Some(acc) => acc.accumulate(c)?,
                            slot => *slot = Some(c),
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// One line per node: `index op_tag input_indices output_len`.
    pub fn write_debug<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, node) in self.nodes.iter().enumerate() {
            let tag = match &node.kind {
                NodeKind::Parameter(name) => format!("param:{name}"),
                NodeKind::Constant => "const".to_string(),
                NodeKind::Op(op) => op.tag().to_string(),
            };
            let inputs = if node.inputs.is_empty() {
                "-".to_string()
            } else {
                node.inputs
                    .iter()
                    .map(|id| id.0.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            writeln!(w, "{k} {tag} {inputs} {}", node.output.len())?;
        }
        Ok(())
    }
}

/// Elementwise sum of two vectors.
pub struct Add;

impl Operator for Add {
    fn tag(&self) -> &str {
        "add"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        let (a, b) = (inputs[0].as_vector()?, inputs[1].as_vector()?);
        if a.len() != b.len() {
            return Err(Error::invalid("add: length mismatch"));
        }
        Ok(Value::Vector(a.iter().zip(b).map(|(x, y)| x + y).collect()))
    }

    fn vjp(&self, _: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        Ok(vec![Some(adj.clone()), Some(adj.clone())])
    }
}

/// Inner product of two vectors.
pub struct Dot;

impl Operator for Dot {
    fn tag(&self) -> &str {
        "dot"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        let (a, b) = (inputs[0].as_vector()?, inputs[1].as_vector()?);
        if a.len() != b.len() {
            return Err(Error::invalid("dot: length mismatch"));
        }
        Ok(Value::scalar(crate::la::dot(a, b)))
    }

    fn vjp(&self, inputs: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let s = adj.as_vector()?[0];
        let (a, b) = (inputs[0].as_vector()?, inputs[1].as_vector()?);
        Ok(vec![
            Some(Value::Vector(b.iter().map(|v| s * v).collect())),
            Some(Value::Vector(a.iter().map(|v| s * v).collect())),
        ])
    }
}

/// Sum of the entries of a vector.
pub struct Sum;

impl Operator for Sum {
    fn tag(&self) -> &str {
        "sum"
    }

    fn forward(&mut self, inputs: &[&Value]) -> Result<Value> {
        Ok(Value::scalar(inputs[0].as_vector()?.iter().sum()))
    }

    fn vjp(&self, inputs: &[&Value], _: &Value, adj: &Value, _: &[bool]) -> Result<Vec<Option<Value>>> {
        let s = adj.as_vector()?[0];
        Ok(vec![Some(Value::Vector(vec![s; inputs[0].len()]))])
    }
}
