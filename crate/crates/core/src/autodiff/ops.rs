//! Differentiable operations recorded on a [`Tape`].

use nalgebra::DMatrix;

use crate::autodiff::tape::{broadcast_map, broadcast_shape, conv1d_forward, resample_source, sigmoid, Op, Tape, Var};
use crate::autodiff::tensor::numel;
use crate::error::{Error, Result};

/// Output length of a 1-D convolution.
pub fn conv1d_output_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel > t + 2 * padding {
        return None;
    }
    Some((t + 2 * padding - kernel) / stride + 1)
}

impl Tape {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let value: Vec<f64> = if self.shape(a) == self.shape(b) {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_map(&shape, self.shape(a));
            let ib = broadcast_map(&shape, self.shape(b));
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        self.push(name, shape, value, op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(name, shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|x| x.exp().is_infinite()) {
            return Err(Error::domain("exp", format!("overflow at {x}")));
        }
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("non-positive argument {x}")));
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Vec::new(), vec![m], Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.numel(a) {
            return Err(Error::dim("reshape", "element count", self.numel(a), numel(shape)));
        }
        let value = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a))
    }

    /// `input: [C_in, T]`, `kernel: [C_out, C_in, K]`, `bias: [C_out]`, zero padding.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv1d";
        let xs = self.shape(input).to_vec();
        let ws = self.shape(kernel).to_vec();
        if xs.len() != 2 {
            return Err(Error::dim(OP, "input rank", 2, xs.len()));
        }
        if ws.len() != 3 {
            return Err(Error::dim(OP, "kernel rank", 3, ws.len()));
        }
        if ws[1] != xs[0] {
            return Err(Error::dim(OP, "input channels", ws[1], xs[0]));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(Error::dim(
                OP,
                "bias channels",
                ws[0],
                format!("{:?}", self.shape(bias)),
            ));
        }
        if stride == 0 {
            return Err(Error::dim(OP, "stride", ">= 1", 0));
        }
        let Some(_) = conv1d_output_len(xs[1], ws[2], stride, padding) else {
            return Err(Error::dim(
                OP,
                "time (kernel > T + 2*padding)",
                format!("<= {}", xs[1] + 2 * padding),
                ws[2],
            ));
        };
        let (value, t_out) = conv1d_forward(
            self.value(input),
            &xs,
            self.value(kernel),
            &ws,
            self.value(bias),
            stride,
            padding,
        );
        self.push(
            OP,
            vec![ws[0], t_out],
            value,
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        )
    }

    /// `out[c] = in[c] * sigmoid(in[C + c])` over the leading axis of extent `2C`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || !shape[0].is_multiple_of(2) {
            return Err(Error::dim(
                "glu",
                "channels",
                "even extent",
                shape.first().copied().unwrap_or(0),
            ));
        }
        let x = self.value(a);
        let half = x.len() / 2;
        let value = (0..half).map(|k| x[k] * sigmoid(x[half + k])).collect();
        let mut out_shape = shape;
        out_shape[0] /= 2;
        self.push("glu", out_shape, value, Op::Glu(a))
    }

    /// Concatenates 2-D values along the channel axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let cols = self.shape(*first)[1];
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 {
                return Err(Error::dim("concat", "rank", 2, s.len()));
            }
            if s[1] != cols {
                return Err(Error::dim("concat", "time", cols, s[1]));
            }
            rows += s[0];
            value.extend_from_slice(self.value(p));
        }
        self.push("concat", vec![rows, cols], value, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..start + len` of a 2-D value.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("slice", "rank", 2, s.len()));
        }
        if len == 0 || start + len > s[0] {
            return Err(Error::dim(
                "slice",
                "channels",
                format!("{}..{}", start, start + len),
                s[0],
            ));
        }
        let cols = s[1];
        let value = self.value(a)[start * cols..(start + len) * cols].to_vec();
        self.push("slice", vec![len, cols], value, Op::SliceRows { input: a, start })
    }

    /// Nearest-neighbour resampling of the time axis of a 2-D value.
    pub fn resample_time(&mut self, a: Var, t_out: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("resample", "rank", 2, s.len()));
        }
        if t_out == 0 {
            return Err(Error::dim("resample", "time", "positive", 0));
        }
        if s[1] == t_out {
            return Ok(a);
        }
        let x = self.value(a);
        let mut value = Vec::with_capacity(s[0] * t_out);
        for r in 0..s[0] {
            for t in 0..t_out {
                value.push(x[r * s[1] + resample_source(t, s[1], t_out)]);
            }
        }
        self.push("resample", vec![s[0], t_out], value, Op::Resample(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", "rank", 2, format!("{}x{}", sa.len(), sb.len())));
        }
        if sa[1] != sb[0] {
            return Err(Error::dim("matmul", "inner", sa[1], sb[0]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = va[i * k + l];
                for j in 0..n {
                    value[i * n + j] += av * vb[l * n + j];
                }
            }
        }
        self.push("matmul", vec![m, n], value, Op::MatMul(a, b))
    }

    /// `log |det W|` of a square matrix via LU factorization.
    pub fn log_abs_det(&mut self, w: Var) -> Result<Var> {
        let s = self.shape(w).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim("log_abs_det", "shape", "square", format!("{s:?}")));
        }
        let n = s[0];
        let m = DMatrix::from_row_slice(n, n, self.value(w));
        let lu = m.lu();
        let det = lu.determinant();
        if !(det.abs() >= 1e-12) {
            return Err(Error::Singular { det: det.abs() });
        }
        let inv = lu.try_inverse().ok_or(Error::Singular { det: det.abs() })?;
        // W^{-T} in row-major order equals W^{-1} in column-major order.
        let inv_t: Vec<f64> = inv.as_slice().to_vec();
        self.push("log_abs_det", Vec::new(), vec![det.abs().ln()], Op::LogAbsDet(w, inv_t))
    }
}
