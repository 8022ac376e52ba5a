//! Reverse-mode differentiation over dense 2-D blocks.
//!
//! Every value on the tape is an `Array2<f64>`; scalars are `1×1`. A forward
//! evaluation appends nodes in topological order, so the backward sweep is a
//! single reverse walk over the node list.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    SegmentMean(Var, Vec<Vec<usize>>),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    AppendOnes(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Parameter gradients produced by [`Tape::backward`], indexed like the
/// parameter slots passed to [`Tape::param`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Array2<f64>> {
        self.grads.get(slot).and_then(|g| g.as_ref())
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_slots: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Column vector constant (`n×1`).
    pub fn column(&mut self, values: &[f64]) -> Var {
        let a = Array2::from_shape_vec((values.len(), 1), values.to_vec())
            .expect("column shape");
        self.constant(a)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// A trainable leaf; its gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, value: Array2<f64>) -> Var {
        self.n_slots = self.n_slots.max(slot + 1);
        self.push(value, Op::Param(slot))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (da, db) = (self.value(a).dim(), self.value(b).dim());
        if da != db {
            return Err(Error::Shape(format!("{what} {da:?} vs {db:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a + row`, broadcasting a `1×c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                av.dim(),
                rv.dim()
            )));
        }
        let out = av + rv;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Ln(a))
    }

    /// Elementwise clamp; gradient passes only where the input is inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * v);
        self.push(out, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Empty("mean of an empty block".into()));
        }
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        Ok(self.push(out, Op::Mean(a)))
    }

    /// Column means as a `1×c` row.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = v
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::Empty("column mean over zero rows".into()))?
            .insert_axis(Axis(0));
        Ok(self.push(out, Op::ColMean(a)))
    }

    /// One output row per segment: the mean of the listed input rows.
    pub fn segment_mean(&mut self, a: Var, segments: Vec<Vec<usize>>) -> Result<Var> {
        let v = self.value(a);
        let mut out = Array2::zeros((segments.len(), v.ncols()));
        for (j, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::Empty(format!("segment {j} has no rows")));
            }
            let mut row = out.row_mut(j);
            for &i in seg {
                if i >= v.nrows() {
                    return Err(Error::Shape(format!(
                        "segment row {i} out of {}",
                        v.nrows()
                    )));
                }
                row += &v.row(i);
            }
            row /= seg.len() as f64;
        }
        Ok(self.push(out, Op::SegmentMean(a, segments)))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.nrows() {
                return Err(Error::Shape(format!(
                    "id {id} outside table of {} rows",
                    t.nrows()
                )));
            }
            out.row_mut(r).assign(&t.row(id));
        }
        Ok(self.push(out, Op::Gather(table, ids)))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("concat: {e}")))?;
        Ok(self.push(out, Op::ConcatCols(parts)))
    }

    /// Appends a constant-1 column.
    pub fn append_ones(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Array2::ones((v.nrows(), v.ncols() + 1));
        out.slice_mut(s![.., ..v.ncols()]).assign(v);
        self.push(out, Op::AppendOnes(a))
    }

    /// Gradients of the scalar `root` with respect to every parameter leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_dim = self.value(root).dim();
        if root_dim != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {root_dim:?}"
            )));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Array2::ones((1, 1)));
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.n_slots];

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(slot) => accumulate(&mut grads[*slot], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Transpose(a) => accumulate(&mut adj[a.0], g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut adj[b.0], g.clone());
                    accumulate(&mut adj[a.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[b.0], -&g);
                    accumulate(&mut adj[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adj[row.0], gr);
                    accumulate(&mut adj[a.0], g);
                }
                Op::Scale(a, c) => accumulate(&mut adj[a.0], g * *c),
                Op::AddScalar(a) => accumulate(&mut adj[a.0], g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|d, &s| *d *= s * (1.0 - s));
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Ln(a) => {
                    let ga = g / self.value(*a);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Square(a) => {
                    let ga = g * self.value(*a) * 2.0;
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Abs(a) => {
                    let ga = g * &self.value(*a).mapv(f64::signum);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Mean(a) => {
                    let v = self.value(*a);
                    let ga = Array2::from_elem(v.dim(), g[[0, 0]] / v.len() as f64);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::ColMean(a) => {
                    let v = self.value(*a);
                    let n = v.nrows() as f64;
                    let row = g.row(0).mapv(|x| x / n);
                    let ga = row.broadcast(v.dim()).expect("broadcast").to_owned();
                    accumulate(&mut adj[a.0], ga);
                }
                Op::SegmentMean(a, segments) => {
                    let v = self.value(*a);
                    let mut ga = Array2::zeros(v.dim());
                    for (j, seg) in segments.iter().enumerate() {
                        let share = g.row(j).mapv(|x| x / seg.len() as f64);
                        for &i in seg {
                            let mut r = ga.row_mut(i);
                            r += &share;
                        }
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    accumulate(&mut adj[table.0], gt);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let gp = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut adj[p.0], gp);
                        offset += w;
                    }
                }
                Op::AppendOnes(a) => {
                    let w = self.value(*a).ncols();
                    let ga = g.slice(s![.., ..w]).to_owned();
                    accumulate(&mut adj[a.0], ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
