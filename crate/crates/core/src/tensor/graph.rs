//! The computation tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking them backwards is a valid topological order
//! for the reverse sweep. Parameters enter the graph as leaves that remember
//! their [`ParamId`]; [`Graph::backward`] writes their gradients back into the
//! owning [`ParamSet`]s.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamSet, Real, Tensor};
use crate::error::{contract, ensure, Error, Result};

/// Train mode enables dropout; eval mode makes the forward pass deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Vector norm used by the row-norm primitive and the losses built on it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    #[default]
    L2,
}

impl std::str::FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(NormKind::L1),
            "l2" => Ok(NormKind::L2),
            other => Err(format!("unknown norm {other:?} (expected l1 or l2)")),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::L1 => "l1",
            NormKind::L2 => "l2",
        })
    }
}

/// Counter-based dropout randomness: call `n` on a stream seeded with `s`
/// always draws from ChaCha8 stream `n` of key `s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropoutStream {
    seed: u64,
    counter: u64,
}

impl DropoutStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn next_rng(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.counter);
        self.counter += 1;
        rng
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Softmax(Var),
    Dropout { x: Var, mask: Vec<S> },
    GatherRows { x: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowNorm { x: Var, kind: NormKind },
    ClampMax { x: Var, max: S },
    Attention { q: Var, k: Var, v: Var, segments: Vec<(usize, usize)>, heads: usize, probs: Vec<S> },
}

struct Node<S> {
    value: Vec<S>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op<S>,
}

/// Reverse-mode tape over row-major matrices.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    mode: Mode,
    dropout: DropoutStream,
}

impl<S: Real> Graph<S> {
    pub fn new(mode: Mode, dropout: DropoutStream) -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), mode, dropout }
    }

    /// An eval-mode graph; dropout is the identity so no stream is consumed.
    pub fn eval() -> Self {
        Self::new(Mode::Eval, DropoutStream::new(0))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Hands back the dropout stream so the caller can continue its counter.
    pub fn into_dropout(self) -> DropoutStream {
        self.dropout
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(&[n.rows, n.cols], n.value.clone()).expect("node shapes are valid")
    }

    /// Gradient of the last backward pass with respect to `v`, if it was needed.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Vec<S>, rows: usize, cols: usize, needs_grad: bool, op: Op<S>) -> Result<Var> {
        debug_assert_eq!(value.len(), rows * cols);
        if let Some(pos) = value.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("{} produced a non-finite value at element {pos}", op_name(&op))));
        }
        self.nodes.push(Node { value, rows, cols, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, tensor: &Tensor<S>) -> Result<Var> {
        self.push(tensor.data().to_vec(), tensor.rows(), tensor.cols(), false, Op::Leaf(None))
    }

    pub fn input_matrix(&mut self, rows: usize, cols: usize, data: Vec<S>) -> Result<Var> {
        ensure!(rows > 0 && cols > 0, "empty input matrix {rows}x{cols}");
        ensure!(data.len() == rows * cols, "input matrix {rows}x{cols} given {} values", data.len());
        self.push(data, rows, cols, false, Op::Leaf(None))
    }

    /// A parameter leaf. Frozen tensors (`requires_grad == false`) enter as constants.
    pub fn param(&mut self, set: &ParamSet<S>, id: ParamId) -> Result<Var> {
        let t = set.get(id);
        let source = t.requires_grad().then_some(id);
        self.push(t.data().to_vec(), t.rows(), t.cols(), source.is_some(), Op::Leaf(source))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        ensure!(k == k2, "matmul of {m}x{k} by {k2}x{n}");
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, S::zero());
        let ng = self.needs(&[a, b]);
        self.push(out, m, n, ng, Op::MatMul(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{what} of mismatched shapes {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.needs(&[a, b]);
        self.push(out, r, c, ng, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the single row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        ensure!(self.shape(row) == (1, c), "add_row of {:?} onto {r}x{c}", self.shape(row));
        let b = self.value(row);
        let out = self.value(a).chunks(c).flat_map(|xs| xs.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        let ng = self.needs(&[a, row]);
        self.push(out, r, c, ng, Op::AddRow(a, row))
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.needs(&[a]);
        self.push(out, r, c, ng, op)
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var> {
        self.map(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Elementwise `min(x, max)`; the gradient is zero wherever `x >= max`.
    pub fn clamp_max(&mut self, a: Var, max: S) -> Result<Var> {
        self.map(a, |x| if x < max { x } else { max }, Op::ClampMax { x: a, max })
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        ensure!(self.shape(gain) == (1, c) && self.shape(bias) == (1, c), "layer_norm gain/bias must be 1x{c}");
        let eps = S::of(1e-5);
        let n = S::from_usize(c);
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        let (g, b) = (self.value(gain), self.value(bias));
        for row in self.value(x).chunks(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.needs(&[x, gain, bias]);
        self.push(out, r, c, ng, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c) {
            softmax_into(row, &mut out);
        }
        let ng = self.needs(&[a]);
        self.push(out, r, c, ng, Op::Softmax(a))
    }

    /// Inverted dropout with drop probability `p`; identity in eval mode.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        ensure!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let mut rng = self.dropout.next_rng();
        let keep = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> =
            (0..self.nodes[a.0].value.len()).map(|_| if rng.random::<f64>() < p { S::zero() } else { keep }).collect();
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let ng = self.needs(&[a]);
        self.push(out, r, c, ng, Op::Dropout { x: a, mask })
    }

    /// Selects rows of `a` by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        ensure!(!indices.is_empty(), "gather_rows with no indices");
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(contract!("row index {bad} out of range for {r} rows"));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.needs(&[a]);
        self.push(out, indices.len(), c, ng, Op::GatherRows { x: a, indices: indices.to_vec() })
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.shape(parts[0]).1;
        ensure!(parts.iter().all(|&p| self.shape(p).1 == c), "concat_rows needs equal column counts");
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p));
            rows += self.shape(p).0;
        }
        let ng = self.needs(parts);
        self.push(out, rows, c, ng, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.shape(parts[0]).0;
        ensure!(parts.iter().all(|&p| self.shape(p).0 == r), "concat_cols needs equal row counts");
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = self.needs(parts);
        self.push(out, r, cols, ng, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        ensure!(len > 0 && start + len <= r, "slice_rows {start}..{} of {r} rows", start + len);
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.needs(&[a]);
        self.push(out, len, c, ng, Op::SliceRows { x: a, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        ensure!(len > 0 && start + len <= c, "slice_cols {start}..{} of {c} columns", start + len);
        let out = self.value(a).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let ng = self.needs(&[a]);
        self.push(out, r, len, ng, Op::SliceCols { x: a, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        let ng = self.needs(&[a]);
        self.push(vec![s], 1, 1, ng, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().copied().sum::<S>() / S::from_usize(v.len());
        let ng = self.needs(&[a]);
        self.push(vec![s], 1, 1, ng, Op::Mean(a))
    }

    /// Norm of every row, as an `rows x 1` column.
    pub fn row_norm(&mut self, a: Var, kind: NormKind) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).chunks(c).map(|row| norm(row, kind)).collect();
        let ng = self.needs(&[a]);
        self.push(out, r, 1, ng, Op::RowNorm { x: a, kind })
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2norm(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let flat = if r == 1 { a } else { self.reshape(a, 1, r * c)? };
        self.row_norm(flat, NormKind::L2)
    }

    /// Reinterprets the row-major buffer with a new `rows x cols` shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        ensure!(rows * cols == r * c && rows > 0, "cannot reshape {r}x{c} into {rows}x{cols}");
        let out = self.value(a).to_vec();
        let ng = self.needs(&[a]);
        self.push(out, rows, cols, ng, Op::Reshape(a))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k` and `v` are `n x (heads * head_dim)`. `segments` lists the
    /// `(start, len)` row ranges of independent sequences; they must tile
    /// `0..n` in order. With `causal`, position `i` attends only to `j <= i`
    /// within its segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (n, width) = self.shape(q);
        ensure!(self.shape(k) == (n, width) && self.shape(v) == (n, width), "attention q/k/v shapes differ");
        ensure!(heads > 0 && width % heads == 0, "width {width} not divisible into {heads} heads");
        let mut next = 0;
        for &(start, len) in segments {
            ensure!(start == next && len > 0, "attention segments must tile the rows in order");
            next = start + len;
        }
        ensure!(next == n, "attention segments cover {next} of {n} rows");
        let dh = width / heads;
        let scale = S::one() / S::from_usize(dh).sqrt();
        let mut out = vec![S::zero(); n * width];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.1 * s.1).sum::<usize>() * heads);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for &(start, len) in segments {
            for h in 0..heads {
                let qh = head_block(qv, start, len, width, h, dh);
                let kh = head_block(kv, start, len, width, h, dh);
                let vh = head_block(vv, start, len, width, h, dh);
                let mut scores = vec![S::zero(); len * len];
                S::gemm(len, dh, len, &qh, false, &kh, true, &mut scores, S::zero());
                let mut p = Vec::with_capacity(len * len);
                for i in 0..len {
                    let row = &mut scores[i * len..(i + 1) * len];
                    row.iter_mut().for_each(|s| *s *= scale);
                    let visible = if causal { i + 1 } else { len };
                    softmax_into(&row[..visible], &mut p);
                    p.extend(std::iter::repeat_n(S::zero(), len - visible));
                }
                let mut oh = vec![S::zero(); len * dh];
                S::gemm(len, len, dh, &p, false, &vh, false, &mut oh, S::zero());
                scatter_head_block(&mut out, &oh, start, len, width, h, dh);
                probs.extend_from_slice(&p);
            }
        }
        let ng = self.needs(&[q, k, v]);
        self.push(out, n, width, ng, Op::Attention { q, k, v, segments: segments.to_vec(), heads, probs })
    }

    /// Reverse sweep from the scalar `loss`. Gradients of parameter leaves are
    /// added into the matching tensors of `sets`; every set that owns a
    /// trainable leaf on this graph must be supplied.
    pub fn backward(&mut self, loss: Var, sets: &mut [&mut ParamSet<S>]) -> Result<()> {
        ensure!(self.shape(loss) == (1, 1), "backward needs a scalar loss, got {:?}", self.shape(loss));
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(pid)) = node.op {
                let Some(g) = grads[idx].as_deref() else { continue };
                if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at element {pos} of a parameter")));
                }
                let set = sets
                    .iter_mut()
                    .find(|s| s.id() == pid.set())
                    .ok_or_else(|| contract!("backward reached a parameter whose set was not supplied"))?;
                set.get_mut(pid).accumulate_grad(g)?;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.nodes[a.0].needs_grad {
                    let ga = slot(grads, *a, m * k);
                    S::gemm(m, n, k, g, false, self.value(*b), true, ga, S::one());
                }
                if self.nodes[b.0].needs_grad {
                    let gb = slot(grads, *b, k * n);
                    S::gemm(k, m, n, self.value(*a), true, g, false, gb, S::one());
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y));
                self.acc(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.iter().copied());
                if self.nodes[row.0].needs_grad {
                    let mut colsum = vec![S::zero(); cols];
                    for r in g.chunks(cols) {
                        colsum.iter_mut().zip(r).for_each(|(s, &x)| *s += x);
                    }
                    self.acc(grads, *row, colsum.into_iter());
                }
            }
            Op::Scale(a, f) => self.acc(grads, *a, g.iter().map(|&x| x * *f)),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, g.iter().zip(av).map(|(&x, &y)| if y > S::zero() { x } else { S::zero() }));
            }
            Op::Tanh(a) => {
                let out = &node.value;
                self.acc(grads, *a, g.iter().zip(out).map(|(&x, &y)| x * (S::one() - y * y)));
            }
            Op::ClampMax { x, max } => {
                let xv = self.value(*x);
                self.acc(grads, *x, g.iter().zip(xv).map(|(&d, &v)| if v < *max { d } else { S::zero() }));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                let n = S::from_usize(cols);
                if self.nodes[x.0].needs_grad {
                    let mut dx = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let dh: Vec<S> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<S>() / n;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<S>() / n;
                        for j in 0..cols {
                            dx.push(inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h));
                        }
                    }
                    self.acc(grads, *x, dx.into_iter());
                }
                if self.nodes[gain.0].needs_grad {
                    let mut dg = vec![S::zero(); cols];
                    for (i, (&d, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % cols] += d * h;
                    }
                    self.acc(grads, *gain, dg.into_iter());
                }
                if self.nodes[bias.0].needs_grad {
                    let mut db = vec![S::zero(); cols];
                    for (i, &d) in g.iter().enumerate() {
                        db[i % cols] += d;
                    }
                    self.acc(grads, *bias, db.into_iter());
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    softmax_backward(&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols], &mut dx);
                }
                self.acc(grads, *a, dx.into_iter());
            }
            Op::Dropout { x, mask } => self.acc(grads, *x, g.iter().zip(mask).map(|(&d, &m)| d * m)),
            Op::GatherRows { x, indices } => {
                if self.nodes[x.0].needs_grad {
                    let (xr, xc) = self.shape(*x);
                    let gx = slot(grads, *x, xr * xc);
                    for (out_row, &src) in indices.iter().enumerate() {
                        for j in 0..xc {
                            gx[src * xc + j] += g[out_row * xc + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.acc(grads, *p, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col0 = 0;
                for p in parts {
                    let pc = self.shape(*p).1;
                    if self.nodes[p.0].needs_grad {
                        let vals = (0..rows).flat_map(|r| g[r * cols + col0..r * cols + col0 + pc].iter().copied());
                        self.acc(grads, *p, vals);
                    }
                    col0 += pc;
                }
            }
            Op::SliceRows { x, start } => {
                if self.nodes[x.0].needs_grad {
                    let (xr, xc) = self.shape(*x);
                    let gx = slot(grads, *x, xr * xc);
                    gx[start * xc..start * xc + g.len()].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                if self.nodes[x.0].needs_grad {
                    let (xr, xc) = self.shape(*x);
                    let gx = slot(grads, *x, xr * xc);
                    for r in 0..rows {
                        for j in 0..cols {
                            gx[r * xc + start + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => self.acc(grads, *a, g.iter().copied()),
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.len();
                self.acc(grads, *a, std::iter::repeat_n(g[0], len));
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                let d = g[0] / S::from_usize(len);
                self.acc(grads, *a, std::iter::repeat_n(d, len));
            }
            Op::RowNorm { x, kind } => {
                let xc = self.shape(*x).1;
                let xv = self.value(*x);
                let out = &node.value;
                let mut dx = Vec::with_capacity(xv.len());
                for r in 0..rows {
                    for &v in &xv[r * xc..(r + 1) * xc] {
                        let d = match kind {
                            // Subgradient 0 at the origin.
                            NormKind::L2 if out[r] == S::zero() => S::zero(),
                            NormKind::L2 => v / out[r],
                            NormKind::L1 if v == S::zero() => S::zero(),
                            NormKind::L1 => v.signum(),
                        };
                        dx.push(g[r] * d);
                    }
                }
                self.acc(grads, *x, dx.into_iter());
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                let width = cols;
                let dh = width / heads;
                let scale = S::one() / S::from_usize(dh).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![S::zero(); rows * width];
                let mut dk = vec![S::zero(); rows * width];
                let mut dv = vec![S::zero(); rows * width];
                let mut p_off = 0;
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let p = &probs[p_off..p_off + len * len];
                        p_off += len * len;
                        let qh = head_block(qv, start, len, width, h, dh);
                        let kh = head_block(kv, start, len, width, h, dh);
                        let vh = head_block(vv, start, len, width, h, dh);
                        let go = head_block(g, start, len, width, h, dh);
                        // dV = P^T dO
                        let mut dvh = vec![S::zero(); len * dh];
                        S::gemm(len, len, dh, p, true, &go, false, &mut dvh, S::zero());
                        // dP = dO V^T
                        let mut dp = vec![S::zero(); len * len];
                        S::gemm(len, dh, len, &go, false, &vh, true, &mut dp, S::zero());
                        let mut ds = Vec::with_capacity(len * len);
                        for i in 0..len {
                            softmax_backward(&p[i * len..(i + 1) * len], &dp[i * len..(i + 1) * len], &mut ds);
                        }
                        ds.iter_mut().for_each(|x| *x *= scale);
                        let mut dqh = vec![S::zero(); len * dh];
                        S::gemm(len, len, dh, &ds, false, &kh, false, &mut dqh, S::zero());
                        let mut dkh = vec![S::zero(); len * dh];
                        S::gemm(len, len, dh, &ds, true, &qh, false, &mut dkh, S::zero());
                        scatter_head_block(&mut dq, &dqh, start, len, width, h, dh);
                        scatter_head_block(&mut dk, &dkh, start, len, width, h, dh);
                        scatter_head_block(&mut dv, &dvh, start, len, width, h, dh);
                    }
                }
                self.acc(grads, *q, dq.into_iter());
                self.acc(grads, *k, dk.into_iter());
                self.acc(grads, *v, dv.into_iter());
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<S>>], target: Var, values: impl Iterator<Item = S>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let len = self.nodes[target.0].value.len();
        let buf = slot(grads, target, len);
        for (b, v) in buf.iter_mut().zip(values) {
            *b += v;
        }
    }
}

fn slot<S: Real>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn norm<S: Real>(row: &[S], kind: NormKind) -> S {
    match kind {
        NormKind::L1 => row.iter().map(|v| v.abs()).sum(),
        NormKind::L2 => row.iter().map(|&v| v * v).sum::<S>().sqrt(),
    }
}

fn softmax_into<S: Real>(row: &[S], out: &mut Vec<S>) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let start = out.len();
    let mut total = S::zero();
    for &v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= total);
}

fn softmax_backward<S: Real>(y: &[S], dy: &[S], out: &mut Vec<S>) {
    let dot: S = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    out.extend(y.iter().zip(dy).map(|(&a, &b)| a * (b - dot)));
}

fn head_block<S: Real>(m: &[S], start: usize, len: usize, width: usize, h: usize, dh: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(len * dh);
    for r in start..start + len {
        out.extend_from_slice(&m[r * width + h * dh..r * width + (h + 1) * dh]);
    }
    out
}

fn scatter_head_block<S: Real>(m: &mut [S], block: &[S], start: usize, len: usize, width: usize, h: usize, dh: usize) {
    for i in 0..len {
        let r = start + i;
        m[r * width + h * dh..r * width + (h + 1) * dh].copy_from_slice(&block[i * dh..(i + 1) * dh]);
    }
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf(_) => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Tanh(_) => "tanh",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(_) => "softmax",
        Op::Dropout { .. } => "dropout",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Reshape(_) => "reshape",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::RowNorm { .. } => "row_norm",
        Op::ClampMax { .. } => "clamp_max",
        Op::Attention { .. } => "attention",
    }
}
