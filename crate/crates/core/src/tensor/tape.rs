use super::array::{Scalar, ShapeError, Tensor};
use super::params::{Gradients, ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Biaffine {
        x: Var,
        y: Var,
        u: Var,
        w: Var,
        b: Var,
        xu: Tensor<T>,
    },
    Bce {
        logits: Var,
        grad: Tensor<T>,
    },
    SoftmaxCe {
        logits: Var,
        grad: Tensor<T>,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Counter-based dropout keyed by (seed, site, step, example); the same key
/// always yields the same mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub seed: u64,
    pub step: u64,
    pub example: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Dropout {
    /// Uniform draw in [0, 1) for element `index` at dropout `site`.
    pub fn uniform(&self, site: u64, index: u64) -> f64 {
        let mut h = splitmix(self.seed);
        for part in [site, self.step, self.example, index] {
            h = splitmix(h ^ part);
        }
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Inverted-dropout mask: kept entries scaled by `1 / (1 - rate)`.
    pub fn mask<T: Scalar>(&self, site: u64, shape: &[usize], rate: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let keep = T::lit(1.0 / (1.0 - rate));
        let data = (0..n)
            .map(|i| {
                if self.uniform(site, i as u64) < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        Tensor::from_vec(shape, data).expect("mask shape")
    }
}

const LN_EPS: f64 = 1e-5;

/// Records a forward computation and replays it backwards.
pub struct Tape<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    dropout: Option<Dropout>,
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T, ShapeError> {
    Err(ShapeError::new(op, detail))
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, dropout: Option<Dropout>) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Free input whose gradient is tracked (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: (n, k)`, `b: (m, k)`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return shape_err("matmul_bt", format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            T::one(),
            av.data(),
            (k, 1),
            bv.data(),
            (1, k),
            T::zero(),
            &mut out,
            (m, 1),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&[n, m], out)?, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `(1, m)` or `(m)` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, ShapeError> {
        let (av, bv) = (self.value(a), self.value(bias));
        let m = av.cols();
        if bv.len() != m {
            return shape_err("add_row", format!("{:?} + row {:?}", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(m.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var, ShapeError> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return shape_err("mul_const", format!("{:?} * {:?}", av.shape(), c.shape()));
        }
        let data = av.data().iter().zip(c.data()).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    /// Inverted dropout at `site`; identity outside training or at rate 0.
    pub fn dropout(&mut self, a: Var, site: u64, rate: f64) -> Var {
        match self.dropout {
            Some(d) if rate > 0.0 => {
                let mask = d.mask(site, self.value(a).shape(), rate);
                self.mul_const(a, mask).expect("mask matches input")
            }
            _ => a,
        }
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, ShapeError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return shape_err("layer_norm", format!("{:?} with gain {:?}", xv.shape(), gv.shape()));
        }
        let n = T::lit(c as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(r);
        let mut out = xv.clone();
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.data_mut()[i * c + j] = h;
                out.data_mut()[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols().max(1);
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, ShapeError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return shape_err("slice_cols", format!("[{start}, {}) of {c}", start + len));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::from_vec(&[r, len], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return shape_err("concat_cols", "row counts differ".into());
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_vec(&[r, c], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return shape_err("concat_rows", "column counts differ".into());
        }
        let r: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(r * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[r, c], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Embedding lookup: row `index[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var, ShapeError> {
        let tv = self.value(table);
        let c = tv.cols();
        if let Some(&bad) = index.iter().find(|&&i| i >= tv.rows()) {
            return shape_err("gather_rows", format!("row {bad} of {}", tv.rows()));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_vec(&[index.len(), c], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Biaffine scores `out[i, j, c] = xᵢᵀ U[:, c, :] yⱼ + W[:, c]ᵀ [xᵢ; yⱼ] + b[c]`
    /// for `x: (n, d1)`, `y: (m, d2)`, `U: (d1, k, d2)`, `W: (d1 + d2, k)`,
    /// `b: (k)`. The result has shape `(n, m, k)`.
    pub fn biaffine(&mut self, x: Var, y: Var, u: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
        let (xv, yv, uv, wv, bv) = (
            self.value(x),
            self.value(y),
            self.value(u),
            self.value(w),
            self.value(b),
        );
        let (n, d1) = (xv.rows(), xv.cols());
        let (m, d2) = (yv.rows(), yv.cols());
        let k = bv.len();
        if uv.len() != d1 * k * d2 || uv.rows() != d1 || wv.shape() != [d1 + d2, k] {
            return shape_err(
                "biaffine",
                format!(
                    "x {:?}, y {:?}, U {:?}, W {:?}, b {:?}",
                    xv.shape(),
                    yv.shape(),
                    uv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            );
        }
        let kd2 = k * d2;
        let mut xu = vec![T::zero(); n * kd2];
        T::gemm(n, d1, kd2, T::one(), xv.data(), (d1, 1), uv.data(), (kd2, 1), T::zero(), &mut xu, (kd2, 1));
        let mut out = vec![T::zero(); n * m * k];
        for c in 0..k {
            T::gemm(
                n,
                d2,
                m,
                T::one(),
                &xu[c * d2..],
                (kd2, 1),
                yv.data(),
                (1, d2),
                T::zero(),
                &mut out[c..],
                (m * k, k),
            );
        }
        let mut xw = vec![T::zero(); n * k];
        T::gemm(n, d1, k, T::one(), xv.data(), (d1, 1), wv.data(), (k, 1), T::zero(), &mut xw, (k, 1));
        let mut yw = vec![T::zero(); m * k];
        T::gemm(m, d2, k, T::one(), yv.data(), (d2, 1), &wv.data()[d1 * k..], (k, 1), T::zero(), &mut yw, (k, 1));
        for i in 0..n {
            for j in 0..m {
                for c in 0..k {
                    let o = &mut out[(i * m + j) * k + c];
                    *o = *o + xw[i * k + c] + yw[j * k + c] + bv.data()[c];
                }
            }
        }
        let out = Tensor::from_vec(&[n, m, k], out)?;
        let xu = Tensor::from_vec(&[n, kd2], xu)?;
        let ng = [x, y, u, w, b].iter().any(|&v| self.ng(v));
        Ok(self.push(out, Op::Biaffine { x, y, u, w, b, xu }, ng))
    }

    /// Mean binary cross-entropy over entries where `mask` is set; zero when
    /// the mask is empty.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[T],
        mask: &[bool],
    ) -> Result<Var, ShapeError> {
        let lv = self.value(logits);
        if targets.len() != lv.len() || mask.len() != lv.len() {
            return shape_err(
                "bce_with_logits",
                format!("{} logits, {} targets, {} mask", lv.len(), targets.len(), mask.len()),
            );
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut grad = Tensor::zeros(lv.shape());
        let mut total = T::zero();
        if count > 0 {
            let inv = T::one() / T::lit(count as f64);
            for (i, (&x, &t)) in lv.data().iter().zip(targets).enumerate() {
                if !mask[i] {
                    continue;
                }
                total = total + bce_term(x, t);
                grad.data_mut()[i] = (sigmoid(x) - t) * inv;
            }
            total = total * inv;
        }
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(total), Op::Bce { logits, grad }, ng))
    }

    /// Mean softmax cross-entropy; `targets` lists `(row, class)` pairs over
    /// a logits tensor viewed as `(rows, classes)`. Zero when empty.
    pub fn softmax_ce(
        &mut self,
        logits: Var,
        classes: usize,
        targets: &[(usize, usize)],
    ) -> Result<Var, ShapeError> {
        let lv = self.value(logits);
        if classes == 0 || !lv.len().is_multiple_of(classes) {
            return shape_err("softmax_ce", format!("{:?} with {classes} classes", lv.shape()));
        }
        let rows = lv.len() / classes;
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= rows || c >= classes) {
            return shape_err("softmax_ce", format!("target ({r}, {c}) outside {rows}x{classes}"));
        }
        let mut grad = Tensor::zeros(lv.shape());
        let mut total = T::zero();
        if !targets.is_empty() {
            let inv = T::one() / T::lit(targets.len() as f64);
            for &(r, c) in targets {
                let row = &lv.data()[r * classes..(r + 1) * classes];
                let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let lse = max + row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln();
                total = total + lse - row[c];
                let g = &mut grad.data_mut()[r * classes..(r + 1) * classes];
                for (j, gj) in g.iter_mut().enumerate() {
                    let p = (row[j] - lse).exp();
                    let t = if j == c { T::one() } else { T::zero() };
                    *gj = *gj + (p - t) * inv;
                }
            }
            total = total * inv;
        }
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(total), Op::SoftmaxCe { logits, grad }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `Σ wᵢ · termsᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let s = terms
            .iter()
            .fold(T::zero(), |acc, &(v, w)| acc + w * self.value(v).item());
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Backpropagates from a scalar and returns gradients for every node.
    pub fn backward(&self, loss: Var) -> TapeGrads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        TapeGrads { grads }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[idx].op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    T::gemm(n, m, k, T::one(), g.data(), (m, 1), bv.data(), (1, m), T::zero(), &mut ga, (k, 1));
                    acc(*a, Tensor::from_vec(av.shape(), ga).unwrap());
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); k * m];
                    T::gemm(k, n, m, T::one(), av.data(), (1, k), g.data(), (m, 1), T::zero(), &mut gb, (m, 1));
                    acc(*b, Tensor::from_vec(bv.shape(), gb).unwrap());
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    T::gemm(n, m, k, T::one(), g.data(), (m, 1), bv.data(), (k, 1), T::zero(), &mut ga, (k, 1));
                    acc(*a, Tensor::from_vec(av.shape(), ga).unwrap());
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), (1, m), av.data(), (k, 1), T::zero(), &mut gb, (k, 1));
                    acc(*b, Tensor::from_vec(bv.shape(), gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if self.ng(*bias) {
                    let bshape = self.value(*bias).shape().to_vec();
                    let m = g.cols().max(1);
                    let mut gb = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s = *s + v;
                        }
                    }
                    acc(*bias, Tensor::from_vec(&bshape, gb).unwrap());
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * *s)),
            Op::MulConst(a, c) => {
                let data = g.data().iter().zip(c.data()).map(|(&x, &m)| x * m).collect();
                acc(*a, Tensor::from_vec(g.shape(), data).unwrap());
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &x)| gi * gelu_grad(x))
                    .collect();
                acc(*a, Tensor::from_vec(g.shape(), data).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let (r, c) = (xhat.rows(), xhat.cols());
                let n = T::lit(c as f64);
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    let grow = g.row(i);
                    let hrow = xhat.row(i);
                    let mut mean_gh = T::zero();
                    let mut mean_ghh = T::zero();
                    for j in 0..c {
                        ggamma[j] = ggamma[j] + grow[j] * hrow[j];
                        gbeta[j] = gbeta[j] + grow[j];
                        let gh = grow[j] * gv.data()[j];
                        mean_gh = mean_gh + gh;
                        mean_ghh = mean_ghh + gh * hrow[j];
                    }
                    mean_gh = mean_gh / n;
                    mean_ghh = mean_ghh / n;
                    for j in 0..c {
                        let gh = grow[j] * gv.data()[j];
                        gx[i * c + j] = rstd[i] * (gh - mean_gh - hrow[j] * mean_ghh);
                    }
                }
                let gshape = gv.shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                acc(*x, Tensor::from_vec(xhat.shape(), gx).unwrap());
                acc(*gamma, Tensor::from_vec(&gshape, ggamma).unwrap());
                acc(*beta, Tensor::from_vec(&bshape, gbeta).unwrap());
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[idx].value.as_ref().expect("softmax output");
                let c = y.cols().max(1);
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), out) in y
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(gx.chunks_mut(c))
                {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..yr.len() {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::from_vec(y.shape(), gx).unwrap());
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let len = g.cols();
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                acc(*x, Tensor::from_vec(xv.shape(), gx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (r, c) = (pv.rows(), pv.cols());
                    let mut gp = Vec::with_capacity(r * c);
                    for i in 0..r {
                        gp.extend_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    offset += c;
                    acc(p, Tensor::from_vec(pv.shape(), gp).unwrap());
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    acc(p, Tensor::from_vec(pv.shape(), g.data()[offset..offset + n].to_vec()).unwrap());
                    offset += n;
                }
            }
            Op::GatherRows { table, index } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut gt = Tensor::zeros(tv.shape());
                for (i, &row) in index.iter().enumerate() {
                    let dst = &mut gt.data_mut()[row * c..(row + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(g.row(i)) {
                        *d = *d + s;
                    }
                }
                acc(*table, gt);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.clone().reshaped(&shape).unwrap());
            }
            Op::Biaffine { x, y, u, w, b, xu } => {
                self.biaffine_backward(g, [*x, *y, *u, *w, *b], xu, &mut acc);
            }
            Op::Bce { logits, grad } | Op::SoftmaxCe { logits, grad } => {
                let s = g.item();
                acc(*logits, grad.map(|v| v * s));
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::WeightedSum(terms) => {
                let s = g.item();
                for &(v, w) in terms {
                    acc(v, Tensor::full(self.value(v).shape(), s * w));
                }
            }
        }
    }

    fn biaffine_backward(
        &self,
        g: &Tensor<T>,
        [x, y, u, w, b]: [Var; 5],
        xu: &Tensor<T>,
        acc: &mut impl FnMut(Var, Tensor<T>),
    ) {
        let (xv, yv, uv, wv, bv) = (
            self.value(x),
            self.value(y),
            self.value(u),
            self.value(w),
            self.value(b),
        );
        let (n, d1) = (xv.rows(), xv.cols());
        let (m, d2) = (yv.rows(), yv.cols());
        let k = bv.len();
        let kd2 = k * d2;
        let gd = g.data();

        let mut gb = vec![T::zero(); k];
        let mut gx_rows = vec![T::zero(); n * k];
        let mut gy_rows = vec![T::zero(); m * k];
        for i in 0..n {
            for j in 0..m {
                for c in 0..k {
                    let v = gd[(i * m + j) * k + c];
                    gb[c] = gb[c] + v;
                    gx_rows[i * k + c] = gx_rows[i * k + c] + v;
                    gy_rows[j * k + c] = gy_rows[j * k + c] + v;
                }
            }
        }
        let wx = &wv.data()[..d1 * k];
        let wy = &wv.data()[d1 * k..];

        let mut gx = vec![T::zero(); n * d1];
        let mut gy = vec![T::zero(); m * d2];
        // linear part
        T::gemm(n, k, d1, T::one(), &gx_rows, (k, 1), wx, (1, k), T::zero(), &mut gx, (d1, 1));
        T::gemm(m, k, d2, T::one(), &gy_rows, (k, 1), wy, (1, k), T::zero(), &mut gy, (d2, 1));
        let mut gw = vec![T::zero(); (d1 + d2) * k];
        T::gemm(d1, n, k, T::one(), xv.data(), (1, d1), &gx_rows, (k, 1), T::zero(), &mut gw[..d1 * k], (k, 1));
        T::gemm(d2, m, k, T::one(), yv.data(), (1, d2), &gy_rows, (k, 1), T::zero(), &mut gw[d1 * k..], (k, 1));

        // bilinear part
        let mut gxu = vec![T::zero(); n * kd2];
        for c in 0..k {
            T::gemm(n, m, d2, T::one(), &gd[c..], (m * k, k), yv.data(), (d2, 1), T::zero(), &mut gxu[c * d2..], (kd2, 1));
            T::gemm(m, n, d2, T::one(), &gd[c..], (k, m * k), &xu.data()[c * d2..], (kd2, 1), T::one(), &mut gy, (d2, 1));
        }
        let mut gu = vec![T::zero(); d1 * kd2];
        T::gemm(d1, n, kd2, T::one(), xv.data(), (1, d1), &gxu, (kd2, 1), T::zero(), &mut gu, (kd2, 1));
        T::gemm(n, kd2, d1, T::one(), &gxu, (kd2, 1), uv.data(), (1, kd2), T::one(), &mut gx, (d1, 1));

        let shapes = [
            xv.shape().to_vec(),
            yv.shape().to_vec(),
            uv.shape().to_vec(),
            wv.shape().to_vec(),
            bv.shape().to_vec(),
        ];
        acc(x, Tensor::from_vec(&shapes[0], gx).unwrap());
        acc(y, Tensor::from_vec(&shapes[1], gy).unwrap());
        acc(u, Tensor::from_vec(&shapes[2], gu).unwrap());
        acc(w, Tensor::from_vec(&shapes[3], gw).unwrap());
        acc(b, Tensor::from_vec(&shapes[4], gb).unwrap());
    }
}

/// Gradients of every node on a tape.
pub struct TapeGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> TapeGrads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Collects parameter gradients, summing repeated uses of a parameter.
    pub fn params(self, tape: &Tape<'_, T>) -> Gradients<T> {
        let mut out = Gradients::empty(tape.store.len());
        for (node, g) in tape.nodes.iter().zip(self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                out.accumulate_owned(*id, g);
            }
        }
        out
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn bce_term<T: Scalar>(x: T, t: T) -> T {
    x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln()
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}
