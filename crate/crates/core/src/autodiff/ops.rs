//! Forward kernels and their backward rules.

use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    AddCol,
    MulCol,
    Scale(f64),
    AddScalar,
    MatMul,
    Transpose,
    SumRows,
    SumCols,
    SumAll,
    ExpandRows,
    ExpandCols,
    Gather(Rc<[usize]>),
    ScatterAdd(Rc<[usize]>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    Reshape,
    RepeatCols(usize),
    GroupSumCols(usize),
    TileCols(usize),
    FoldSumCols(usize),
    Exp,
    Log,
    Sigmoid,
    Relu,
    Powf(f64),
    Softmax(Axis),
}

/// Reduction axis for [`Tensor::softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Normalise each column (over rows).
    Rows,
    /// Normalise each row (over columns).
    Cols,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = zip_map(self, other, |x, y| x + y);
        Ok(Tensor::from_op(Op::Add, vec![self.clone(), other.clone()], self.shape(), data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = zip_map(self, other, |x, y| x - y);
        Ok(Tensor::from_op(Op::Sub, vec![self.clone(), other.clone()], self.shape(), data))
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = zip_map(self, other, |x, y| x * y);
        Ok(Tensor::from_op(Op::Mul, vec![self.clone(), other.clone()], self.shape(), data))
    }

    fn row_broadcast(&self, row: &Tensor, op: &'static str) -> Result<()> {
        if row.rows() != 1 || row.cols() != self.cols() {
            return Err(shape_err(op, self, row));
        }
        Ok(())
    }

    fn col_broadcast(&self, col: &Tensor, op: &'static str) -> Result<()> {
        if col.cols() != 1 || col.rows() != self.rows() {
            return Err(shape_err(op, self, col));
        }
        Ok(())
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.row_broadcast(row, "add_row")?;
        let c = self.cols();
        let data = self.data().iter().enumerate().map(|(k, x)| x + row.data()[k % c]).collect();
        Ok(Tensor::from_op(Op::AddRow, vec![self.clone(), row.clone()], self.shape(), data))
    }

    /// Multiplies every row element-wise by a `1 x cols` row.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        self.row_broadcast(row, "mul_row")?;
        let c = self.cols();
        let data = self.data().iter().enumerate().map(|(k, x)| x * row.data()[k % c]).collect();
        Ok(Tensor::from_op(Op::MulRow, vec![self.clone(), row.clone()], self.shape(), data))
    }

    /// Learnable per-channel scaling; an alias of [`Tensor::mul_row`].
    pub fn layer_scale(&self, scale: &Tensor) -> Result<Tensor> {
        self.mul_row(scale)
    }

    /// Adds a `rows x 1` column to every column.
    pub fn add_col(&self, col: &Tensor) -> Result<Tensor> {
        self.col_broadcast(col, "add_col")?;
        let c = self.cols();
        let data = self.data().iter().enumerate().map(|(k, x)| x + col.data()[k / c]).collect();
        Ok(Tensor::from_op(Op::AddCol, vec![self.clone(), col.clone()], self.shape(), data))
    }

    /// Scales each row `i` by `col[i]`.
    pub fn mul_col(&self, col: &Tensor) -> Result<Tensor> {
        self.col_broadcast(col, "mul_col")?;
        let c = self.cols();
        let data = self.data().iter().enumerate().map(|(k, x)| x * col.data()[k / c]).collect();
        Ok(Tensor::from_op(Op::MulCol, vec![self.clone(), col.clone()], self.shape(), data))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(Op::Scale(c), vec![self.clone()], self.shape(), data)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(Op::AddScalar, vec![self.clone()], self.shape(), data)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [n, k] = self.shape();
        let [k2, m] = other.shape();
        if k != k2 {
            return Err(shape_err("matmul", self, other));
        }
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * m..(p + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(Tensor::from_op(Op::MatMul, vec![self.clone(), other.clone()], [n, m], out))
    }

    pub fn transpose(&self) -> Tensor {
        let [r, c] = self.shape();
        let d = self.data();
        let data = (0..r * c).map(|k| d[(k % r) * c + k / r]).collect();
        Tensor::from_op(Op::Transpose, vec![self.clone()], [c, r], data)
    }

    /// Sums over rows, giving `1 x cols`.
    pub fn sum_rows(&self) -> Tensor {
        let [r, c] = self.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row_slice(i)) {
                *o += v;
            }
        }
        Tensor::from_op(Op::SumRows, vec![self.clone()], [1, c], out)
    }

    /// Sums over columns, giving `rows x 1`.
    pub fn sum_cols(&self) -> Tensor {
        let r = self.rows();
        let out = (0..r).map(|i| self.row_slice(i).iter().sum()).collect();
        Tensor::from_op(Op::SumCols, vec![self.clone()], [r, 1], out)
    }

    pub fn reduce_sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(Op::SumAll, vec![self.clone()], [1, 1], vec![s])
    }

    pub fn reduce_mean(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.reduce_sum().scale(1.0 / n)
    }

    /// Column means, `1 x cols`.
    pub fn mean_rows(&self) -> Tensor {
        self.sum_rows().scale(1.0 / self.rows().max(1) as f64)
    }

    /// Row means, `rows x 1`.
    pub fn mean_cols(&self) -> Tensor {
        self.sum_cols().scale(1.0 / self.cols().max(1) as f64)
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn expand_rows(&self, n: usize) -> Result<Tensor> {
        if self.rows() != 1 {
            return Err(Error::Shape {
                op: "expand_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let data = (0..n).flat_map(|_| self.data().iter().copied()).collect();
        Ok(Tensor::from_op(Op::ExpandRows, vec![self.clone()], [n, self.cols()], data))
    }

    /// Repeats an `r x 1` column `m` times.
    pub fn expand_cols(&self, m: usize) -> Result<Tensor> {
        if self.cols() != 1 {
            return Err(Error::Shape {
                op: "expand_cols",
                lhs: self.shape().to_vec(),
                rhs: vec![m],
            });
        }
        let data = self.data().iter().flat_map(|v| std::iter::repeat_n(*v, m)).collect();
        Ok(Tensor::from_op(Op::ExpandCols, vec![self.clone()], [self.rows(), m], data))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&self, index: &Rc<[usize]>) -> Result<Tensor> {
        let [r, c] = self.shape();
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(self.row_slice(i));
        }
        Ok(Tensor::from_op(Op::Gather(index.clone()), vec![self.clone()], [index.len(), c], data))
    }

    /// Adds row `k` into output row `index[k]`; the adjoint of [`Tensor::gather_rows`].
    pub fn scatter_add_rows(&self, index: &Rc<[usize]>, out_rows: usize) -> Result<Tensor> {
        let [r, c] = self.shape();
        if index.len() != r || index.iter().any(|&i| i >= out_rows) {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![index.len(), out_rows],
            });
        }
        let mut data = vec![0.0; out_rows * c];
        for (k, &i) in index.iter().enumerate() {
            for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(self.row_slice(k)) {
                *o += v;
            }
        }
        Ok(Tensor::from_op(Op::ScatterAdd(index.clone()), vec![self.clone()], [out_rows, c], data))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let r = first.rows();
        if let Some(bad) = parts.iter().find(|p| p.rows() != r) {
            return Err(shape_err("concat_cols", first, bad));
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row_slice(i));
            }
        }
        Ok(Tensor::from_op(Op::ConcatCols(widths), parts.to_vec(), [r, total], data))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let r = self.rows();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.row_slice(i)[start..end]);
        }
        Ok(Tensor::from_op(Op::SliceCols(start, end), vec![self.clone()], [r, end - start], data))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let c = first.cols();
        if let Some(bad) = parts.iter().find(|p| p.cols() != c) {
            return Err(shape_err("concat_rows", first, bad));
        }
        let heights: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
        let total: usize = heights.iter().sum();
        let mut data = Vec::with_capacity(total * c);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(Op::ConcatRows(heights), parts.to_vec(), [total, c], data))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let c = self.cols();
        let data = self.data()[start * c..end * c].to_vec();
        Ok(Tensor::from_op(Op::SliceRows(start, end), vec![self.clone()], [end - start, c], data))
    }

    /// Row-major reinterpretation.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        Ok(Tensor::from_op(Op::Reshape, vec![self.clone()], [rows, cols], self.data().to_vec()))
    }

    /// Each column repeated `r` times in place: `[a, b] -> [a, a, b, b]` for `r = 2`.
    pub fn repeat_cols(&self, r: usize) -> Tensor {
        let [n, c] = self.shape();
        let mut data = Vec::with_capacity(n * c * r);
        for v in self.data() {
            data.extend(std::iter::repeat_n(*v, r));
        }
        Tensor::from_op(Op::RepeatCols(r), vec![self.clone()], [n, c * r], data)
    }

    /// Sums each block of `r` consecutive columns; the adjoint of [`Tensor::repeat_cols`].
    pub fn group_sum_cols(&self, r: usize) -> Result<Tensor> {
        let [n, c] = self.shape();
        if r == 0 || c % r != 0 {
            return Err(Error::Shape {
                op: "group_sum_cols",
                lhs: self.shape().to_vec(),
                rhs: vec![r],
            });
        }
        let data = self.data().chunks(r).map(|ch| ch.iter().sum()).collect();
        Ok(Tensor::from_op(Op::GroupSumCols(r), vec![self.clone()], [n, c / r], data))
    }

    /// Whole rows tiled `r` times: `[a, b] -> [a, b, a, b]` for `r = 2`.
    pub fn tile_cols(&self, r: usize) -> Tensor {
        let [n, c] = self.shape();
        let mut data = Vec::with_capacity(n * c * r);
        for i in 0..n {
            for _ in 0..r {
                data.extend_from_slice(self.row_slice(i));
            }
        }
        Tensor::from_op(Op::TileCols(r), vec![self.clone()], [n, c * r], data)
    }

    /// Sums the `r` column blocks of each row; the adjoint of [`Tensor::tile_cols`].
    pub fn fold_sum_cols(&self, r: usize) -> Result<Tensor> {
        let [n, c] = self.shape();
        if r == 0 || c % r != 0 {
            return Err(Error::Shape {
                op: "fold_sum_cols",
                lhs: self.shape().to_vec(),
                rhs: vec![r],
            });
        }
        let w = c / r;
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            let row = self.row_slice(i);
            for (k, v) in row.iter().enumerate() {
                data[i * w + k % w] += v;
            }
        }
        Ok(Tensor::from_op(Op::FoldSumCols(r), vec![self.clone()], [n, w], data))
    }

    /// Row-wise Kronecker product: row `p` becomes `a_p (x) b_p`.
    pub fn row_kron(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(shape_err("row_kron", self, other));
        }
        self.repeat_cols(other.cols()).mul(&other.tile_cols(self.cols()))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|x| f(*x)).collect();
        Tensor::from_op(op, vec![self.clone()], self.shape(), data)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self) -> Tensor {
        self.mul(&self.sigmoid()).expect("same shape")
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(Op::Powf(p), move |x| x.powf(p))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same shape")
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&self, axis: Axis) -> Tensor {
        let [r, c] = self.shape();
        let d = self.data();
        let mut out = vec![0.0; r * c];
        match axis {
            Axis::Cols => {
                for i in 0..r {
                    let row = &d[i * c..(i + 1) * c];
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for j in 0..c {
                        let e = (row[j] - m).exp();
                        out[i * c + j] = e;
                        s += e;
                    }
                    out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= s);
                }
            }
            Axis::Rows => {
                for j in 0..c {
                    let m = (0..r).map(|i| d[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for i in 0..r {
                        let e = (d[i * c + j] - m).exp();
                        out[i * c + j] = e;
                        s += e;
                    }
                    for i in 0..r {
                        out[i * c + j] /= s;
                    }
                }
            }
        }
        Tensor::from_op(Op::Softmax(axis), vec![self.clone()], [r, c], out)
    }
}

/// Gradients of `op`'s inputs given the output gradient `g`.
///
/// `parents` and `out` are detached copies unless a differentiable backward
/// graph was requested, in which case they are the live nodes.
pub(crate) fn backward_rule(op: &Op, parents: &[Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
    let p0 = &parents[0];
    Ok(match op {
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), g.neg()],
        Op::Mul => vec![g.mul(&parents[1])?, g.mul(p0)?],
        Op::AddRow => vec![g.clone(), g.sum_rows()],
        Op::MulRow => vec![g.mul_row(&parents[1])?, g.mul(p0)?.sum_rows()],
        Op::AddCol => vec![g.clone(), g.sum_cols()],
        Op::MulCol => vec![g.mul_col(&parents[1])?, g.mul(p0)?.sum_cols()],
        Op::Scale(c) => vec![g.scale(*c)],
        Op::AddScalar => vec![g.clone()],
        Op::MatMul => vec![g.matmul(&parents[1].transpose())?, p0.transpose().matmul(g)?],
        Op::Transpose => vec![g.transpose()],
        Op::SumRows => vec![g.expand_rows(p0.rows())?],
        Op::SumCols => vec![g.expand_cols(p0.cols())?],
        Op::SumAll => vec![g.expand_cols(p0.cols())?.expand_rows(p0.rows())?],
        Op::ExpandRows => vec![g.sum_rows()],
        Op::ExpandCols => vec![g.sum_cols()],
        Op::Gather(idx) => vec![g.scatter_add_rows(idx, p0.rows())?],
        Op::ScatterAdd(idx) => vec![g.gather_rows(idx)?],
        Op::ConcatCols(widths) => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for w in widths {
                grads.push(g.slice_cols(start, start + w)?);
                start += w;
            }
            grads
        }
        Op::SliceCols(start, end) => {
            let r = g.rows();
            let mut parts = Vec::with_capacity(3);
            if *start > 0 {
                parts.push(Tensor::zeros(r, *start));
            }
            parts.push(g.clone());
            if *end < p0.cols() {
                parts.push(Tensor::zeros(r, p0.cols() - end));
            }
            vec![Tensor::concat_cols(&parts)?]
        }
        Op::ConcatRows(heights) => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(heights.len());
            for h in heights {
                grads.push(g.slice_rows(start, start + h)?);
                start += h;
            }
            grads
        }
        Op::SliceRows(start, end) => {
            let c = g.cols();
            let mut parts = Vec::with_capacity(3);
            if *start > 0 {
                parts.push(Tensor::zeros(*start, c));
            }
            parts.push(g.clone());
            if *end < p0.rows() {
                parts.push(Tensor::zeros(p0.rows() - end, c));
            }
            vec![Tensor::concat_rows(&parts)?]
        }
        Op::Reshape => vec![g.reshape(p0.rows(), p0.cols())?],
        Op::RepeatCols(r) => vec![g.group_sum_cols(*r)?],
        Op::GroupSumCols(r) => vec![g.repeat_cols(*r)],
        Op::TileCols(r) => vec![g.fold_sum_cols(*r)?],
        Op::FoldSumCols(r) => vec![g.tile_cols(*r)],
        Op::Exp => vec![g.mul(out)?],
        Op::Log => vec![g.mul(&p0.powf(-1.0))?],
        Op::Sigmoid => vec![g.mul(&out.sub(&out.square())?)?],
        Op::Relu => {
            let mask = Tensor::from_fn(p0.rows(), p0.cols(), |i, j| if p0.get(i, j) > 0.0 { 1.0 } else { 0.0 });
            vec![g.mul(&mask)?]
        }
        Op::Powf(p) => vec![g.mul(&p0.powf(p - 1.0).scale(*p))?],
        Op::Softmax(axis) => {
            let gy = g.mul(out)?;
            let centred = match axis {
                Axis::Cols => g.sub(&gy.sum_cols().expand_cols(g.cols())?)?,
                Axis::Rows => g.sub(&gy.sum_rows().expand_rows(g.rows())?)?,
            };
            vec![centred.mul(out)?]
        }
    })
}
