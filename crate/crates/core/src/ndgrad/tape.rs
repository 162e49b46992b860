use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::matrix::{Matrix, Shape};
use super::ops::{vjp, Op};
use super::GradError;

/// Recording of operations applied to variables, replayed in reverse by
/// [`DiffArray::backward`].
///
/// Node ids are assigned in creation order, so every node's parents precede
/// it. A tape lives on one thread; build a fresh one per training step.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    /// Raised to 1 while a graph-building backward pass runs; nodes created
    /// in that window are first-order gradient nodes.
    level: u8,
}

struct Node {
    op: Op,
    parents: Vec<Parent>,
    value: Matrix,
    order: u8,
}

#[derive(Clone)]
pub(crate) enum Parent {
    Var(usize),
    Const(Matrix),
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
    order: u8,
}

/// A dense array that may participate in a [`Tape`].
///
/// Arrays without a tape node are constants: operations on constants are
/// evaluated eagerly and never recorded.
#[derive(Clone)]
pub struct DiffArray {
    value: Matrix,
    node: Option<NodeRef>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` as a differentiable leaf.
    pub fn var(&self, value: &Matrix) -> DiffArray {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let order = inner.level;
        inner.nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            value: value.clone(),
            order,
        });
        DiffArray {
            value: value.clone(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
                order,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn handle(&self, id: usize) -> DiffArray {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        DiffArray {
            value: node.value.clone(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
                order: node.order,
            }),
        }
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

struct LevelGuard<'a>(&'a Tape);

impl<'a> LevelGuard<'a> {
    fn raise(tape: &'a Tape) -> Self {
        tape.inner.borrow_mut().level = 1;
        Self(tape)
    }
}

impl Drop for LevelGuard<'_> {
    fn drop(&mut self) {
        self.0.inner.borrow_mut().level = 0;
    }
}

impl DiffArray {
    pub fn constant(value: Matrix) -> Self {
        Self { value, node: None }
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    /// Handle of this array's tape, if it was recorded on one.
    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Gradient nesting order: 0 for ordinary nodes, 1 for nodes that depend
    /// on a gradient built by [`grad`] with `create_graph`.
    pub fn order(&self) -> u8 {
        self.node.as_ref().map_or(0, |n| n.order)
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Self {
        Self::constant(self.value.clone())
    }

    /// Records `op` with the given parents. Returns a constant when no parent
    /// is on a tape.
    pub(crate) fn record(op: Op, parents: &[&DiffArray], value: Matrix) -> Result<Self, GradError> {
        let mut tape: Option<&Tape> = None;
        let mut order = 0u8;
        for p in parents {
            if let Some(n) = &p.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(t) if !t.same(&n.tape) => return Err(GradError::TapeMismatch),
                    Some(_) => {}
                }
                order = order.max(n.order);
            }
        }
        let Some(tape) = tape else {
            return Ok(Self::constant(value));
        };
        let links = parents
            .iter()
            .map(|p| match &p.node {
                Some(n) => Parent::Var(n.id),
                None => Parent::Const(p.value.clone()),
            })
            .collect();
        let mut inner = tape.inner.borrow_mut();
        let order = order.max(inner.level);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            parents: links,
            value: value.clone(),
            order,
        });
        Ok(Self {
            value,
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
                order,
            }),
        })
    }

    /// Reverse sweep from this single-element array.
    ///
    /// A constant output yields empty gradients (every query returns zeros).
    pub fn backward(&self) -> Result<Gradients, GradError> {
        let grads = self.sweep(false)?;
        Ok(Gradients {
            tape: self.node.as_ref().map(|n| n.tape.clone()),
            grads,
        })
    }

    fn sweep(&self, create_graph: bool) -> Result<Vec<Option<DiffArray>>, GradError> {
        if self.value.len() != 1 {
            return Err(GradError::NotScalar(self.shape()));
        }
        let Some(out) = &self.node else {
            return Ok(Vec::new());
        };
        if create_graph && out.order >= 1 {
            return Err(GradError::NestingTooDeep);
        }
        let tape = &out.tape;
        let mut grads: Vec<Option<DiffArray>> = vec![None; out.id + 1];
        grads[out.id] = Some(DiffArray::constant(Matrix::ones(self.shape())));
        let _guard = create_graph.then(|| LevelGuard::raise(tape));

        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let (op, parents, value) = {
                let inner = tape.inner.borrow();
                let node = &inner.nodes[id];
                if matches!(node.op, Op::Leaf) {
                    continue;
                }
                (node.op.clone(), node.parents.clone(), node.value.clone())
            };
            if create_graph && !op.twice_differentiable() {
                return Err(GradError::NoSecondDerivative(op.name()));
            }
            let inputs: Vec<DiffArray> = parents
                .iter()
                .map(|p| match p {
                    Parent::Var(pid) if create_graph => tape.handle(*pid),
                    Parent::Var(pid) => {
                        DiffArray::constant(tape.inner.borrow().nodes[*pid].value.clone())
                    }
                    Parent::Const(m) => DiffArray::constant(m.clone()),
                })
                .collect();
            let output = if create_graph {
                tape.handle(id)
            } else {
                DiffArray::constant(value)
            };
            let needs: Vec<bool> = parents.iter().map(|p| matches!(p, Parent::Var(_))).collect();
            let contribs = vjp(&op, &inputs, &output, &g, &needs)?;
            for (p, c) in parents.iter().zip(contribs) {
                if let (Parent::Var(pid), Some(c)) = (p, c) {
                    grads[*pid] = Some(match grads[*pid].take() {
                        None => c,
                        Some(prev) => prev.add(&c)?,
                    });
                }
            }
        }
        Ok(grads)
    }
}

impl fmt::Debug for DiffArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "DiffArray(node {}, order {}) ", n.id, n.order)?,
            None => write!(f, "DiffArray(const) ")?,
        }
        self.value.fmt(f)
    }
}

/// Result of a reverse sweep: gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    tape: Option<Tape>,
    grads: Vec<Option<DiffArray>>,
}

impl Gradients {
    /// Gradient with respect to `x`; zeros when `x` did not influence the output.
    pub fn get(&self, x: &DiffArray) -> Matrix {
        self.lookup(x)
            .map(|g| g.value.clone())
            .unwrap_or_else(|| Matrix::zeros(x.shape()))
    }

    fn lookup(&self, x: &DiffArray) -> Option<&DiffArray> {
        let (tape, node) = (self.tape.as_ref()?, x.node.as_ref()?);
        if !tape.same(&node.tape) {
            return None;
        }
        self.grads.get(node.id)?.as_ref()
    }
}

/// Gradients of the single-element `output` with respect to each of `wrt`.
///
/// With `create_graph`, the returned arrays are themselves recorded on the
/// tape and can be differentiated once more. A gradient of a gradient cannot
/// be built again: that request fails with [`GradError::NestingTooDeep`].
pub fn grad(output: &DiffArray, wrt: &[&DiffArray], create_graph: bool) -> Result<Vec<DiffArray>, GradError> {
    let grads = output.sweep(create_graph)?;
    let tape = output.node.as_ref().map(|n| &n.tape);
    Ok(wrt
        .iter()
        .map(|x| {
            let found = match (tape, &x.node) {
                (Some(t), Some(n)) if t.same(&n.tape) => grads.get(n.id).and_then(Clone::clone),
                _ => None,
            };
            let g = found.unwrap_or_else(|| DiffArray::constant(Matrix::zeros(x.shape())));
            if create_graph {
                g
            } else {
                g.detach()
            }
        })
        .collect())
}

/// Differentiates `outer_fn(∇_{wrt_inner} inner)` once more.
///
/// Returns the outer scalar together with its gradients, which can be queried
/// for any leaf on the tape (typically the parameters that `inner` depends on).
pub fn grad_nested<F>(inner: &DiffArray, wrt_inner: &DiffArray, outer_fn: F) -> Result<(DiffArray, Gradients), GradError>
where
    F: FnOnce(&DiffArray) -> Result<DiffArray, GradError>,
{
    let g = grad(inner, &[wrt_inner], true)?.remove(0);
    let outer = outer_fn(&g)?;
    let grads = outer.backward()?;
    Ok((outer, grads))
}
