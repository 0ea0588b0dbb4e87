//! Parameter blocks over one flat `f64` buffer, with forward and backward
//! passes for the few layer types the classifier needs.

/// A `rows x cols` row-major block inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named blocks in allocation order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    pub blocks: Vec<(String, Span)>,
    pub total: usize,
}

impl Layout {
    pub fn span(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Span {
        let s = Span { offset: self.total, rows, cols };
        self.total += s.len();
        self.blocks.push((name.into(), s));
        s
    }

    pub fn linear(&mut self, name: &str, out: usize, inp: usize) -> Linear {
        Linear { w: self.span(format!("{name}.weight"), out, inp), b: self.span(format!("{name}.bias"), out, 1) }
    }

    /// Block name owning parameter `i`.
    pub fn block_of(&self, i: usize) -> &str {
        self.blocks.iter().find(|(_, s)| s.range().contains(&i)).map(|(n, _)| n.as_str()).unwrap_or("?")
    }
}

/// `y = W x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: Span,
    pub b: Span,
}

impl Linear {
    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        let w = &p[self.w.range()];
        let b = &p[self.b.range()];
        (0..self.out_dim())
            .map(|i| {
                let row = &w[i * self.w.cols..(i + 1) * self.w.cols];
                b[i] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64]) -> Vec<f64> {
        let cols = self.w.cols;
        let mut dx = vec![0.0; cols];
        for (i, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g[self.b.offset + i] += d;
            let row = self.w.offset + i * cols;
            for j in 0..cols {
                g[row + j] += d * x[j];
                dx[j] += p[row + j] * d;
            }
        }
        dx
    }
}

pub fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// Backpropagates through `y = tanh(x)` given `y`.
pub fn tanh_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter().zip(dy).map(|(y, d)| d * (1.0 - y * y)).collect()
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
