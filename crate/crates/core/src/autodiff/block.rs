use std::fmt;

/// Dense row-major matrix of `f64` values carried by every graph node.
///
/// Rows index features, columns index lanes (particles or collocation
/// points). Scalars are `1 x 1` blocks.
#[derive(Clone, PartialEq)]
pub struct Block {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Block {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "block data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    /// A `1 x n` block, one value per lane.
    pub fn lanes(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(1, n, values)
    }

    /// A `n x 1` block.
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(n, 1, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a `1 x 1` block.
    ///
    /// Panics when the block is not scalar.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "expected a 1x1 block, got {}x{}", self.rows, self.cols);
        self.data[0]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Block {
        Block {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Block) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Block({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

/// Shape of the result of a broadcasting binary operation, if compatible.
pub(crate) fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    }
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Elementwise combination with singleton-dimension broadcasting.
pub(crate) fn zip_with(a: &Block, b: &Block, f: impl Fn(f64, f64) -> f64) -> Block {
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Block::new(a.rows, a.cols, data);
    }
    if b.is_scalar() {
        let y = b.data[0];
        return a.map(|x| f(x, y));
    }
    if a.is_scalar() {
        let x = a.data[0];
        return b.map(|y| f(x, y));
    }
    let (rows, cols) = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()));
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ra = if a.rows == 1 { 0 } else { r };
        let rb = if b.rows == 1 { 0 } else { r };
        for c in 0..cols {
            let ca = if a.cols == 1 { 0 } else { c };
            let cb = if b.cols == 1 { 0 } else { c };
            data.push(f(a.get(ra, ca), b.get(rb, cb)));
        }
    }
    Block::new(rows, cols, data)
}

/// Three-way elementwise combination, all operands broadcast to `shape`.
pub(crate) fn zip3_with(
    shape: (usize, usize),
    a: &Block,
    b: &Block,
    c: &Block,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Block {
    let (rows, cols) = shape;
    if a.shape() == shape && b.shape() == shape && c.shape() == shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .zip(&c.data)
            .map(|((&x, &y), &z)| f(x, y, z))
            .collect();
        return Block::new(rows, cols, data);
    }
    let pick = |m: &Block, r: usize, col: usize| {
        let rr = if m.rows == 1 { 0 } else { r };
        let cc = if m.cols == 1 { 0 } else { col };
        m.get(rr, cc)
    };
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for col in 0..cols {
            data.push(f(pick(a, r, col), pick(b, r, col), pick(c, r, col)));
        }
    }
    Block::new(rows, cols, data)
}

/// Sum a full-shape adjoint down to the (possibly broadcast) input shape.
pub(crate) fn reduce_to(full: Block, shape: (usize, usize)) -> Block {
    if full.shape() == shape {
        return full;
    }
    let (rows, cols) = shape;
    let mut out = Block::zeros(rows, cols);
    for r in 0..full.rows {
        let ro = if rows == 1 { 0 } else { r };
        for c in 0..full.cols {
            let co = if cols == 1 { 0 } else { c };
            out.data[ro * cols + co] += full.data[r * full.cols + c];
        }
    }
    out
}

/// `C = op(A) * op(B)` accumulated into `out` with `beta = 1`.
///
/// Transposition is expressed through strides so no copies are made.
pub(crate) fn gemm_acc(a: &Block, trans_a: bool, b: &Block, trans_b: bool, out: &mut Block) {
    let (m, k, rsa, csa) = if trans_a {
        (a.cols, a.rows, 1isize, a.cols as isize)
    } else {
        (a.rows, a.cols, a.cols as isize, 1isize)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b.cols, b.rows, 1isize, b.cols as isize)
    } else {
        (b.rows, b.cols, b.cols as isize, 1isize)
    };
    assert_eq!(k, kb, "inner dimensions differ in matrix product");
    assert_eq!(out.shape(), (m, n), "output shape mismatch in matrix product");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape((1, 5), (3, 1)), Some((3, 5)));
        assert_eq!(broadcast_shape((2, 5), (3, 5)), None);
        let a = Block::new(2, 1, vec![1.0, 2.0]);
        let b = Block::lanes(vec![10.0, 20.0, 30.0]);
        let c = zip_with(&a, &b, |x, y| x + y);
        assert_eq!(c.as_slice(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let r = reduce_to(c, (2, 1));
        assert_eq!(r.as_slice(), &[63.0, 66.0]);
    }

    #[test]
    fn gemm_with_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = Block::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Block::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let mut c = Block::zeros(2, 2);
        gemm_acc(&a, false, &b, false, &mut c);
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
        let mut c = Block::zeros(2, 2);
        gemm_acc(&a, true, &b, false, &mut c);
        assert_eq!(c.as_slice(), &[26.0, 30.0, 38.0, 44.0]);
        let mut c = Block::zeros(2, 2);
        gemm_acc(&a, false, &b, true, &mut c);
        assert_eq!(c.as_slice(), &[17.0, 23.0, 39.0, 53.0]);
    }
}
