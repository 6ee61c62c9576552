//! Minimal dense-tensor library with reverse-mode automatic
//! differentiation.
//!
//! Values live on a [`Tape`]: every operation appends a node holding the
//! forward result and a closure that turns the node's output gradient into
//! gradient contributions for its parents. Calling [`backward`] on a scalar
//! walks the tape once in reverse. Tensors are 64-bit floats in row-major
//! order.
//!
//! A tape is single-threaded and cheap to create; training loops build one
//! tape per step, bind parameters onto it as leaves, and drop it after the
//! update. Nodes derived only from constants record no backward closure, so
//! evaluation-time forwards pay nothing for the machinery.

mod conv;
mod gradcheck;
mod params;

pub use conv::{conv2d_out_dim, deconv2d_out_dim};
pub use gradcheck::finite_diff_check;
pub use params::{
    load_checkpoint, param, save_checkpoint, AdamConfig, Binding, ParamStore, ParamTensors,
    SharedParamStore, CHECKPOINT_MAGIC,
};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLength {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type TensorResult = Result<Tensor, TensorError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Arguments handed to a node's backward closure.
pub(crate) struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    grad: &'a [f64],
    /// This node's forward output.
    value: &'a [f64],
    /// Parent `(data, shape)` views in parent order.
    parents: &'a [(&'a [f64], &'a [usize])],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Vec<f64>>>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording tape for reverse-mode differentiation.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            data,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Tensor {
            tape: self.clone(),
            idx,
        }
    }

    /// A differentiable leaf (a parameter or checked input).
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> TensorResult {
        if numel(shape) != data.len() {
            return Err(TensorError::BadLength {
                op: "leaf",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Vec::new(), true, None))
    }

    /// A constant input; no gradient flows into it or out of anything
    /// computed purely from constants.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> TensorResult {
        if numel(shape) != data.len() {
            return Err(TensorError::BadLength {
                op: "constant",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Vec::new(), false, None))
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(&[1], vec![v]).unwrap()
    }

    /// An all-zero constant of the given shape.
    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        self.constant(shape, vec![0.0; numel(shape)]).unwrap()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    idx: usize,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.idx];
        write!(f, "Tensor(shape={:?}, node={})", node.shape, self.idx)
    }
}

/// Gradients produced by [`backward`], indexed by tape node.
pub struct Gradients {
    values: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `t`, if any path reached it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.values
            .get(t.idx)
            .and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `t`, or zeros of its shape.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

/// Reverse pass from a scalar loss. Returns the gradients of every node
/// that requires them.
pub fn backward(loss: &Tensor) -> Result<Gradients, TensorError> {
    let inner = loss.tape.inner.borrow();
    let nodes = &inner.nodes;
    if numel(&nodes[loss.idx].shape) != 1 {
        return Err(TensorError::Invalid {
            op: "backward",
            msg: format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.idx].shape
            ),
        });
    }
    let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
    grads[loss.idx] = Some(vec![1.0]);
    for idx in (0..=loss.idx).rev() {
        if grads[idx].is_none() {
            continue;
        }
        let node = &nodes[idx];
        let Some(back) = &node.backward else { continue };
        let parent_views: Vec<(&[f64], &[usize])> = node
            .parents
            .iter()
            .map(|&p| (&nodes[p].data[..], &nodes[p].shape[..]))
            .collect();
        let contribs = {
            let g = grads[idx].as_ref().unwrap();
            back(&BackwardCtx {
                grad: g,
                value: &node.data,
                parents: &parent_views,
            })
        };
        debug_assert_eq!(contribs.len(), node.parents.len());
        for (contrib, &p) in contribs.into_iter().zip(&node.parents) {
            if !nodes[p].requires_grad {
                continue;
            }
            debug_assert_eq!(contrib.len(), nodes[p].data.len());
            match &mut grads[p] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        }
    }
    Ok(Gradients { values: grads })
}

macro_rules! same_shape {
    ($op:expr, $a:expr, $b:expr) => {
        if $a.shape() != $b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: $op,
                lhs: $a.shape(),
                rhs: $b.shape(),
            });
        }
    };
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().nodes[self.idx].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.idx].data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.idx];
        assert_eq!(node.data.len(), 1, "item() on non-scalar");
        node.data[0]
    }

    /// Errors if the forward value contains NaN or infinities.
    pub fn validate_finite(&self, op: &'static str) -> Result<(), TensorError> {
        let inner = self.tape.inner.borrow();
        if inner.nodes[self.idx].data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    fn same_tape(&self, other: &Tensor) -> Result<(), TensorError> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    fn with<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.idx])
    }

    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        back: impl Fn(f64, f64, f64, f64) -> (f64, f64) + 'static,
    ) -> TensorResult {
        self.same_tape(other)?;
        same_shape!(op, self, other);
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[other.idx];
            let data = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| fwd(x, y))
                .collect();
            (a.shape.clone(), data)
        };
        let requires = self.requires_grad() || other.requires_grad();
        let backward: BackwardFn = Box::new(move |ctx| {
            let (a, _) = ctx.parents[0];
            let (b, _) = ctx.parents[1];
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for i in 0..a.len() {
                let (da, db) = back(a[i], b[i], ctx.value[i], ctx.grad[i]);
                ga[i] = da;
                gb[i] = db;
            }
            vec![ga, gb]
        });
        Ok(self.tape.push(
            shape,
            data,
            vec![self.idx, other.idx],
            requires,
            Some(backward),
        ))
    }

    fn unary(
        &self,
        fwd: impl Fn(f64) -> f64,
        back: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx];
            (a.shape.clone(), a.data.iter().map(|&x| fwd(x)).collect())
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let (a, _) = ctx.parents[0];
            vec![(0..a.len())
                .map(|i| back(a[i], ctx.value[i], ctx.grad[i]))
                .collect()]
        });
        self.tape.push(
            shape,
            data,
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        )
    }

    pub fn add(&self, other: &Tensor) -> TensorResult {
        self.binary(other, "add", |a, b| a + b, |_, _, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult {
        self.binary(other, "sub", |a, b| a - b, |_, _, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult {
        self.binary(other, "mul", |a, b| a * b, |a, b, _, g| (g * b, g * a))
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _, g| -g)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_, _, g| c * g)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _, g| g)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(
            |x| if x > 0.0 { x } else { 0.0 },
            |x, _, g| if x > 0.0 { g } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, y, g| g * y * (1.0 - y),
        )
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(|x| x.tanh(), |_, y, g| g * (1.0 - y * y))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.with(|n| n.data.iter().sum());
        let backward: BackwardFn = Box::new(|ctx| {
            let (a, _) = ctx.parents[0];
            vec![vec![ctx.grad[0]; a.len()]]
        });
        self.tape.push(
            vec![1],
            vec![total],
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        )
    }

    /// Matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&self, other: &Tensor) -> TensorResult {
        self.same_tape(other)?;
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx].data;
            let b = &inner.nodes[other.idx].data;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
            out
        };
        let requires = self.requires_grad() || other.requires_grad();
        let backward: BackwardFn = Box::new(move |ctx| {
            let (a, _) = ctx.parents[0];
            let (b, _) = ctx.parents[1];
            let g = ctx.grad;
            // gA = G B^T ; gB = A^T G
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for j in 0..n {
                    let gv = g[i * n + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        ga[i * k + p] += gv * b[p * n + j];
                        gb[p * n + j] += a[i * k + p] * gv;
                    }
                }
            }
            vec![ga, gb]
        });
        Ok(self.tape.push(
            vec![m, n],
            data,
            vec![self.idx, other.idx],
            requires,
            Some(backward),
        ))
    }

    /// Matrix-vector product `(m,n) x (n) -> (m)`.
    pub fn matvec(&self, x: &Tensor) -> TensorResult {
        self.same_tape(x)?;
        let sw = self.shape();
        let sx = x.shape();
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: sw,
                rhs: sx,
            });
        }
        let (m, n) = (sw[0], sw[1]);
        let data = {
            let inner = self.tape.inner.borrow();
            let w = &inner.nodes[self.idx].data;
            let v = &inner.nodes[x.idx].data;
            (0..m)
                .map(|i| {
                    let row = &w[i * n..(i + 1) * n];
                    row.iter().zip(v).map(|(&a, &b)| a * b).sum()
                })
                .collect()
        };
        let requires = self.requires_grad() || x.requires_grad();
        let backward: BackwardFn = Box::new(move |ctx| {
            let (w, _) = ctx.parents[0];
            let (v, _) = ctx.parents[1];
            let g = ctx.grad;
            let mut gw = vec![0.0; m * n];
            let mut gv = vec![0.0; n];
            for i in 0..m {
                let gi = g[i];
                if gi == 0.0 {
                    continue;
                }
                let wrow = &w[i * n..(i + 1) * n];
                let gw_row = &mut gw[i * n..(i + 1) * n];
                for j in 0..n {
                    gw_row[j] += gi * v[j];
                    gv[j] += gi * wrow[j];
                }
            }
            vec![gw, gv]
        });
        Ok(self.tape.push(
            vec![m],
            data,
            vec![self.idx, x.idx],
            requires,
            Some(backward),
        ))
    }

    /// Same data, new shape (row-major reinterpretation).
    pub fn reshape(&self, shape: &[usize]) -> TensorResult {
        if numel(shape) != self.len() {
            return Err(TensorError::BadLength {
                op: "reshape",
                len: self.len(),
                shape: shape.to_vec(),
            });
        }
        let data = self.data();
        let backward: BackwardFn = Box::new(|ctx| vec![ctx.grad.to_vec()]);
        Ok(self.tape.push(
            shape.to_vec(),
            data,
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        ))
    }

    /// Concatenation along axis 0; trailing dimensions must agree.
    /// Joining `(c1,h,w)` with `(c2,h,w)` stacks channels.
    pub fn concat0(&self, other: &Tensor) -> TensorResult {
        self.same_tape(other)?;
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat0",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut shape = sa.clone();
        shape[0] = sa[0] + sb[0];
        let mut data = self.data();
        data.extend(other.data());
        let split = self.len();
        let requires = self.requires_grad() || other.requires_grad();
        let backward: BackwardFn = Box::new(move |ctx| {
            vec![ctx.grad[..split].to_vec(), ctx.grad[split..].to_vec()]
        });
        Ok(self.tape.push(
            shape,
            data,
            vec![self.idx, other.idx],
            requires,
            Some(backward),
        ))
    }

    /// Splits axis 0 into `parts` equal slices (the text-slicing and
    /// gate-splitting primitive).
    pub fn split0(&self, parts: usize) -> Result<Vec<Tensor>, TensorError> {
        let shape = self.shape();
        if parts == 0 || shape[0] % parts != 0 {
            return Err(TensorError::Invalid {
                op: "split0",
                msg: format!("cannot split axis of size {} into {parts} parts", shape[0]),
            });
        }
        let chunk_rows = shape[0] / parts;
        let row_size: usize = shape[1..].iter().product();
        let chunk = chunk_rows * row_size;
        let data = self.data();
        let total = data.len();
        let mut out_shape = shape.clone();
        out_shape[0] = chunk_rows;
        let requires = self.requires_grad();
        let mut out = Vec::with_capacity(parts);
        for part in 0..parts {
            let piece = data[part * chunk..(part + 1) * chunk].to_vec();
            let backward: BackwardFn = Box::new(move |ctx| {
                let mut g = vec![0.0; total];
                g[part * chunk..(part + 1) * chunk].copy_from_slice(ctx.grad);
                vec![g]
            });
            out.push(self.tape.push(
                out_shape.clone(),
                piece,
                vec![self.idx],
                requires,
                Some(backward),
            ));
        }
        Ok(out)
    }

    /// Contiguous element range `[start, start+len)` of a vector, as a
    /// vector of length `len`.
    pub fn slice_range(&self, start: usize, len: usize) -> TensorResult {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(TensorError::BadRank {
                op: "slice_range",
                expected: 1,
                shape,
            });
        }
        let total = shape[0];
        if start + len > total || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice_range",
                msg: format!("range {start}..{} out of {total}", start + len),
            });
        }
        let data = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].data[start..start + len].to_vec()
        };
        let backward: BackwardFn = Box::new(move |ctx| {
            let mut g = vec![0.0; total];
            g[start..start + len].copy_from_slice(ctx.grad);
            vec![g]
        });
        Ok(self.tape.push(
            vec![len],
            data,
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        ))
    }

    /// Row `i` of a rank-2 tensor, as a vector.
    pub fn row(&self, i: usize) -> TensorResult {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::BadRank {
                op: "row",
                expected: 2,
                shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if i >= rows {
            return Err(TensorError::Invalid {
                op: "row",
                msg: format!("row {i} out of {rows}"),
            });
        }
        let data = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].data[i * cols..(i + 1) * cols].to_vec()
        };
        let total = rows * cols;
        let backward: BackwardFn = Box::new(move |ctx| {
            let mut g = vec![0.0; total];
            g[i * cols..(i + 1) * cols].copy_from_slice(ctx.grad);
            vec![g]
        });
        Ok(self.tape.push(
            vec![cols],
            data,
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        ))
    }

    /// Gathers embedding rows: `(vocab, dim)` table and `ids` to `(l, dim)`.
    /// Gradients scatter back into the table; the ids are constants.
    pub fn embedding_lookup(&self, ids: &[usize]) -> TensorResult {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::BadRank {
                op: "embedding_lookup",
                expected: 2,
                shape,
            });
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: "empty id sequence".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: format!("id {bad} out of vocabulary of size {vocab}"),
            });
        }
        let data = {
            let inner = self.tape.inner.borrow();
            let table = &inner.nodes[self.idx].data;
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                out.extend_from_slice(&table[id * dim..(id + 1) * dim]);
            }
            out
        };
        let ids_owned = ids.to_vec();
        let backward: BackwardFn = Box::new(move |ctx| {
            let mut g = vec![0.0; vocab * dim];
            for (k, &id) in ids_owned.iter().enumerate() {
                for d in 0..dim {
                    g[id * dim + d] += ctx.grad[k * dim + d];
                }
            }
            vec![g]
        });
        Ok(self.tape.push(
            vec![ids.len(), dim],
            data,
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. The mask is drawn once and treated as a
    /// constant on the tape. Training-only; evaluation paths simply skip the
    /// call.
    pub fn dropout(&self, p: f64, mut rng: impl Rng) -> TensorResult {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let data = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx]
                .data
                .iter()
                .zip(&mask)
                .map(|(&x, &m)| x * m)
                .collect()
        };
        let shape = self.shape();
        let backward: BackwardFn = Box::new(move |ctx| {
            vec![ctx.grad.iter().zip(&mask).map(|(&g, &m)| g * m).collect()]
        });
        Ok(self.tape.push(
            shape,
            data,
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        ))
    }

    /// Replicates a vector `(t)` across a spatial grid to `(t,h,w)`.
    pub fn broadcast_pixels(&self, h: usize, w: usize) -> TensorResult {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(TensorError::BadRank {
                op: "broadcast_pixels",
                expected: 1,
                shape,
            });
        }
        let t = shape[0];
        let src = self.data();
        let mut data = vec![0.0; t * h * w];
        for c in 0..t {
            data[c * h * w..(c + 1) * h * w].fill(src[c]);
        }
        let backward: BackwardFn = Box::new(move |ctx| {
            let mut g = vec![0.0; t];
            for (c, slot) in g.iter_mut().enumerate() {
                *slot = ctx.grad[c * h * w..(c + 1) * h * w].iter().sum();
            }
            vec![g]
        });
        Ok(self.tape.push(
            vec![t, h, w],
            data,
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        ))
    }

    /// Adds a per-row bias to a rank-2 tensor: `out[i][j] = x[i][j] + b[i]`.
    pub fn add_col_bias(&self, bias: &Tensor) -> TensorResult {
        self.same_tape(bias)?;
        let shape = self.shape();
        let bs = bias.shape();
        if shape.len() != 2 || bs != vec![shape[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_col_bias",
                lhs: shape,
                rhs: bs,
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let data = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].data;
            let b = &inner.nodes[bias.idx].data;
            let mut out = x.clone();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += b[i];
                }
            }
            out
        };
        let requires = self.requires_grad() || bias.requires_grad();
        let backward: BackwardFn = Box::new(move |ctx| {
            let gx = ctx.grad.to_vec();
            let gb = (0..m)
                .map(|i| ctx.grad[i * n..(i + 1) * n].iter().sum())
                .collect();
            vec![gx, gb]
        });
        Ok(self.tape.push(
            vec![m, n],
            data,
            vec![self.idx, bias.idx],
            requires,
            Some(backward),
        ))
    }

    /// Adds a per-channel bias to a rank-3 tensor `(c,h,w)`.
    pub fn add_chan_bias(&self, bias: &Tensor) -> TensorResult {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(TensorError::BadRank {
                op: "add_chan_bias",
                expected: 3,
                shape,
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        self.reshape(&[c, h * w])?
            .add_col_bias(bias)?
            .reshape(&[c, h, w])
    }

    /// Softmax over every element of the tensor, numerically stabilized by
    /// max subtraction. Shapes are preserved: applied to an `(h,w)` score
    /// map it yields a distribution over pixels.
    pub fn softmax_pixels(&self) -> TensorResult {
        self.validate_finite("softmax_pixels")?;
        let shape = self.shape();
        let x = self.data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|&e| e / total).collect();
        let backward: BackwardFn = Box::new(|ctx| {
            let y = ctx.value;
            let dot: f64 = y.iter().zip(ctx.grad).map(|(&p, &g)| p * g).sum();
            vec![y
                .iter()
                .zip(ctx.grad)
                .map(|(&p, &g)| p * (g - dot))
                .collect()]
        });
        Ok(self.tape.push(
            shape,
            data,
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        ))
    }

    /// Log-softmax over every element (stable path for likelihood losses).
    pub fn log_softmax(&self) -> TensorResult {
        self.validate_finite("log_softmax")?;
        let shape = self.shape();
        let x = self.data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_total = x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        let data: Vec<f64> = x.iter().map(|&v| v - log_total).collect();
        let backward: BackwardFn = Box::new(|ctx| {
            let total_g: f64 = ctx.grad.iter().sum();
            vec![ctx
                .value
                .iter()
                .zip(ctx.grad)
                .map(|(&lp, &g)| g - lp.exp() * total_g)
                .collect()]
        });
        Ok(self.tape.push(
            shape,
            data,
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        ))
    }

    /// Element `i` of a vector, as a scalar tensor.
    pub fn pick(&self, i: usize) -> TensorResult {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(TensorError::BadRank {
                op: "pick",
                expected: 1,
                shape,
            });
        }
        if i >= shape[0] {
            return Err(TensorError::Invalid {
                op: "pick",
                msg: format!("index {i} out of {}", shape[0]),
            });
        }
        let v = self.data()[i];
        let n = shape[0];
        let backward: BackwardFn = Box::new(move |ctx| {
            let mut g = vec![0.0; n];
            g[i] = ctx.grad[0];
            vec![g]
        });
        Ok(self.tape.push(
            vec![1],
            vec![v],
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        ))
    }

    /// KL divergence `Σ t·ln(t/p)` between a constant target distribution
    /// and this (strictly positive) predicted distribution, with
    /// `0·ln 0 = 0`.
    pub fn kl_from_target(&self, target: &[f64]) -> TensorResult {
        if target.len() != self.len() {
            return Err(TensorError::BadLength {
                op: "kl_loss",
                len: target.len(),
                shape: self.shape(),
            });
        }
        let p = self.data();
        let mut total = 0.0;
        for (&t, &pv) in target.iter().zip(&p) {
            if t > 0.0 {
                if pv <= 0.0 {
                    return Err(TensorError::Invalid {
                        op: "kl_loss",
                        msg: "predicted probability is zero where target is positive".into(),
                    });
                }
                total += t * (t / pv).ln();
            }
        }
        let target_owned = target.to_vec();
        let backward: BackwardFn = Box::new(move |ctx| {
            let (p, _) = ctx.parents[0];
            let g = ctx.grad[0];
            vec![target_owned
                .iter()
                .zip(p)
                .map(|(&t, &pv)| if t > 0.0 { -g * t / pv } else { 0.0 })
                .collect()]
        });
        Ok(self.tape.push(
            vec![1],
            vec![total],
            vec![self.idx],
            self.requires_grad(),
            Some(backward),
        ))
    }

    /// 2-D cross-correlation. Input `(c_in,h,w)`, kernel
    /// `(c_out,c_in,kh,kw)`, output `(c_out,h',w')` with
    /// `h' = (h + 2·pad − kh)/stride + 1`; the division must be exact.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> TensorResult {
        conv::conv2d(self, kernel, stride, padding)
    }

    /// Transposed convolution: the adjoint of [`Tensor::conv2d`] with the
    /// same kernel, stride, and padding, so that
    /// `⟨conv2d(x,K), y⟩ = ⟨x, deconv2d(y,K)⟩`.
    pub fn deconv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> TensorResult {
        conv::deconv2d(self, kernel, stride, padding)
    }

    pub(crate) fn tape(&self) -> &Tape {
        &self.tape
    }

    pub(crate) fn push_on_tape(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        self.tape.push(shape, data, parents, requires_grad, backward)
    }

    pub(crate) fn node_index(&self) -> usize {
        self.idx
    }
}

/// Fully-connected layer `W·x (+ b)` for a vector input.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> TensorResult {
    let y = w.matvec(x)?;
    match b {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// Weights of one LSTM cell: stacked gate blocks in `[input, forget,
/// candidate, output]` order.
pub struct LstmWeights<'a> {
    /// `(4·hidden, input)`
    pub w_x: &'a Tensor,
    /// `(4·hidden, hidden)`
    pub w_h: &'a Tensor,
    /// `(4·hidden)`
    pub bias: &'a Tensor,
}

/// One step of a standard LSTM cell. Returns `(h_t, c_t)`.
pub fn lstm_step(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    w: &LstmWeights<'_>,
) -> Result<(Tensor, Tensor), TensorError> {
    let gates = w.w_x.matvec(x)?.add(&w.w_h.matvec(h_prev)?)?.add(w.bias)?;
    let parts = gates.split0(4)?;
    let input_gate = parts[0].sigmoid();
    let forget_gate = parts[1].sigmoid();
    let candidate = parts[2].tanh();
    let output_gate = parts[3].sigmoid();
    let c_t = forget_gate.mul(c_prev)?.add(&input_gate.mul(&candidate)?)?;
    let h_t = output_gate.mul(&c_t.tanh())?;
    Ok((h_t, c_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn relu_values() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![0.0, -2.0, 3.0]).unwrap();
        assert_eq!(x.relu().data(), vec![0.0, 0.0, 3.0]);
    }

    #[test]
    fn concat_channels_shapes() {
        let tape = Tape::new();
        let a = tape.zeros(&[2, 4, 4]);
        let b = tape.zeros(&[3, 4, 4]);
        assert_eq!(a.concat0(&b).unwrap().shape(), vec![5, 4, 4]);
        let c = tape.zeros(&[3, 5, 4]);
        assert!(a.concat0(&c).is_err());
    }

    #[test]
    fn split_vector_into_parts() {
        let tape = Tape::new();
        let x = tape.leaf(&[600], (0..600).map(|i| i as f64).collect()).unwrap();
        let parts = x.split0(2).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].shape(), vec![300]);
        assert_eq!(parts[1].shape(), vec![300]);
        assert_eq!(parts[1].data()[0], 300.0);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let tape = Tape::new();
        let x = tape.leaf(&[2, 2], vec![1.0; 4]).unwrap();
        let p = x.softmax_pixels().unwrap();
        for v in p.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let y = tape.leaf(&[2], vec![0.0, 3.0f64.ln()]).unwrap();
        let q = y.softmax_pixels().unwrap().data();
        assert!((q[0] - 0.25).abs() < 1e-12);
        assert!((q[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            x.softmax_pixels(),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn kl_closed_forms() {
        let tape = Tape::new();
        let p = tape.leaf(&[2], vec![0.5, 0.5]).unwrap();
        let loss = p.kl_from_target(&[1.0, 0.0]).unwrap();
        assert!((loss.item() - 2.0f64.ln()).abs() < 1e-12);

        let q = tape.leaf(&[2], vec![0.3, 0.7]).unwrap();
        let zero = q.kl_from_target(&[0.3, 0.7]).unwrap();
        assert!(zero.item().abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut r = rng(11);
        let tape = Tape::new();
        for _ in 0..50 {
            let raw: Vec<f64> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
            let t_raw: Vec<f64> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
            let p = tape
                .leaf(&[8], raw)
                .unwrap()
                .softmax_pixels()
                .unwrap();
            let t = tape
                .constant(&[8], t_raw)
                .unwrap()
                .softmax_pixels()
                .unwrap()
                .data();
            assert!(p.kl_from_target(&t).unwrap().item() >= -1e-12);
        }
    }

    #[test]
    fn backward_through_mul_chain() {
        // d/dx of sum((2x)^2) = 8x.
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = x.scale(2.0);
        let loss = y.mul(&y).unwrap().sum();
        let grads = backward(&loss).unwrap();
        let g = grads.get(&x).unwrap();
        assert_eq!(g, &[8.0, -16.0, 4.0]);
    }

    #[test]
    fn constants_record_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
        let x = tape.leaf(&[2], vec![3.0, 4.0]).unwrap();
        let loss = c.mul(&x).unwrap().sum();
        let grads = backward(&loss).unwrap();
        assert!(grads.get(&c).is_none());
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn lstm_zero_weights_zero_state_gives_zero_output() {
        let tape = Tape::new();
        let hidden = 3;
        let w_x = tape.zeros(&[4 * hidden, 2]);
        let w_h = tape.zeros(&[4 * hidden, hidden]);
        let bias = tape.zeros(&[4 * hidden]);
        let x = tape.leaf(&[2], vec![1.0, -1.0]).unwrap();
        let h = tape.zeros(&[hidden]);
        let c = tape.zeros(&[hidden]);
        let (h_t, c_t) = lstm_step(
            &x,
            &h,
            &c,
            &LstmWeights {
                w_x: &w_x,
                w_h: &w_h,
                bias: &bias,
            },
        )
        .unwrap();
        assert!(h_t.data().iter().all(|&v| v == 0.0));
        assert!(c_t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_large_forget_bias_carries_cell_state() {
        // All weights zero except a large forget-gate bias: c_t ≈ c_prev.
        let tape = Tape::new();
        let w_x = tape.zeros(&[4, 1]);
        let w_h = tape.zeros(&[4, 1]);
        let bias = tape.leaf(&[4], vec![0.0, 50.0, 0.0, 0.0]).unwrap();
        let x = tape.leaf(&[1], vec![0.3]).unwrap();
        let h = tape.zeros(&[1]);
        let c = tape.leaf(&[1], vec![0.8]).unwrap();
        let (_, c_t) = lstm_step(
            &x,
            &h,
            &c,
            &LstmWeights {
                w_x: &w_x,
                w_h: &w_h,
                bias: &bias,
            },
        )
        .unwrap();
        assert!((c_t.data()[0] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn dropout_scales_survivors() {
        let tape = Tape::new();
        let mut r = rng(3);
        let x = tape.leaf(&[1000], vec![1.0; 1000]).unwrap();
        let y = x.dropout(0.5, &mut r).unwrap().data();
        for &v in &y {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
        let kept = y.iter().filter(|&&v| v != 0.0).count();
        assert!((350..650).contains(&kept), "kept {kept} of 1000");
    }

    #[test]
    fn embedding_lookup_and_scatter() {
        let tape = Tape::new();
        let table = tape
            .leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let rows = table.embedding_lookup(&[2, 0, 2]).unwrap();
        assert_eq!(rows.data(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = rows.sum();
        let grads = backward(&loss).unwrap();
        // Row 2 gathered twice, row 0 once, row 1 never.
        assert_eq!(grads.get(&table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(table.embedding_lookup(&[3]).is_err());
    }

    #[test]
    fn matmul_matches_hand_case() {
        let tape = Tape::new();
        let a = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.leaf(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), vec![17.0, 39.0]);
    }
}
