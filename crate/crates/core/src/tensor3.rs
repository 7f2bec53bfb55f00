//! Dense real third-order tensors and the structural operators behind the
//! T-product: frontal slices, permutation, `unfold`/`fold` and the
//! block-circulant embedding `bcirc`.
//!
//! Storage is frontal-slice-major and row-major inside each slice: entry
//! `(i, j, k)` of an `m x n x p` tensor lives at offset `(k * m + i) * n + j`.
//! All indices in this crate are 0-based.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self.data[i * self.cols + l];
                let src = &rhs.data[l * rhs.cols..(l + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        max_abs_diff(&self.data, &other.data)
    }

    /// Textual dump: a `matrix <rows> <cols>` header then one line per row,
    /// each value printed with 17 significant digits.
    pub fn to_dump(&self) -> String {
        let mut s = format!("matrix {} {}\n", self.rows, self.cols);
        for i in 0..self.rows {
            write_row(&mut s, &self.data[i * self.cols..(i + 1) * self.cols]);
        }
        s
    }

    pub fn from_dump(text: &str) -> Result<Matrix> {
        let mut tokens = dump_tokens(text);
        expect_token(&mut tokens, "matrix")?;
        let rows = parse_usize(tokens.next())?;
        let cols = parse_usize(tokens.next())?;
        let data = parse_values(&mut tokens, rows * cols)?;
        if tokens.next().is_some() {
            return Err(Error::Format("trailing data after matrix".into()));
        }
        Matrix::from_vec(rows, cols, data)
    }
}

/// Dense real `m x n x p` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    m: usize,
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(m: usize, n: usize, p: usize) -> Self {
        Tensor3 {
            m,
            n,
            p,
            data: vec![0.0; m * n * p],
        }
    }

    pub fn ones(m: usize, n: usize, p: usize) -> Self {
        Tensor3 {
            m,
            n,
            p,
            data: vec![1.0; m * n * p],
        }
    }

    /// Builds a tensor from data in canonical layout. Rejects wrong lengths
    /// and non-finite entries.
    pub fn from_vec(m: usize, n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * n * p {
            return Err(Error::Shape(format!(
                "tensor {m}x{n}x{p} needs {} entries, got {}",
                m * n * p,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite entry {} at offset {bad}",
                data[bad]
            )));
        }
        Ok(Tensor3 { m, n, p, data })
    }

    pub fn from_fn(m: usize, n: usize, p: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(m * n * p);
        for k in 0..p {
            for i in 0..m {
                for j in 0..n {
                    data.push(f(i, j, k));
                }
            }
        }
        Tensor3 { m, n, p, data }
    }

    /// Stacks `p` equally sized `m x n` matrices as frontal slices.
    pub fn from_slices(slices: &[Matrix]) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(Error::Argument("need at least one slice".into()));
        };
        let (m, n) = (first.rows, first.cols);
        let mut data = Vec::with_capacity(m * n * slices.len());
        for s in slices {
            if (s.rows, s.cols) != (m, n) {
                return Err(Error::Shape(format!(
                    "slice {}x{} differs from {m}x{n}",
                    s.rows, s.cols
                )));
            }
            data.extend_from_slice(&s.data);
        }
        Tensor3::from_vec(m, n, slices.len(), data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.m, self.n, self.p)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.m + i) * self.n + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    /// The tube `A[i, j, :]`.
    pub fn tube(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.p).map(|k| self.get(i, j, k)).collect()
    }

    /// Borrowed frontal slice `k` in row-major order.
    pub fn slice_data(&self, k: usize) -> &[f64] {
        let sz = self.m * self.n;
        &self.data[k * sz..(k + 1) * sz]
    }

    /// Copy of frontal slice `k` as an `m x n` matrix.
    pub fn frontal_slice(&self, k: usize) -> Result<Matrix> {
        if k >= self.p {
            return Err(Error::Range(format!(
                "frontal slice {k} of a tensor with {} slices",
                self.p
            )));
        }
        Ok(Matrix {
            rows: self.m,
            cols: self.n,
            data: self.slice_data(k).to_vec(),
        })
    }

    /// Reorders the axes: result axis `d` is source axis `axes[d]`.
    ///
    /// With `axes = [0, 2, 1]` an `m x n x 3` image becomes `m x 3 x n` with
    /// `out[i, c, j] = img[i, j, c]`.
    pub fn permute(&self, axes: [usize; 3]) -> Result<Tensor3> {
        let mut seen = [false; 3];
        for &a in &axes {
            if a > 2 || seen[a] {
                return Err(Error::Argument(format!("{axes:?} is not a permutation of 0..3")));
            }
            seen[a] = true;
        }
        let src = [self.m, self.n, self.p];
        let (m, n, p) = (src[axes[0]], src[axes[1]], src[axes[2]]);
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = [0usize; 3];
        for k in 0..p {
            idx[axes[2]] = k;
            for i in 0..m {
                idx[axes[0]] = i;
                for j in 0..n {
                    idx[axes[1]] = j;
                    data.push(self.get(idx[0], idx[1], idx[2]));
                }
            }
        }
        Ok(Tensor3 { m, n, p, data })
    }

    /// Frontal slices stacked vertically: an `mp x n` matrix.
    pub fn unfold(&self) -> Matrix {
        Matrix {
            rows: self.m * self.p,
            cols: self.n,
            data: self.data.clone(),
        }
    }

    /// Inverse of [`Tensor3::unfold`].
    pub fn fold(mat: &Matrix, p: usize) -> Result<Tensor3> {
        if p == 0 || !mat.rows.is_multiple_of(p) {
            return Err(Error::Shape(format!(
                "cannot fold {} rows into {p} slices",
                mat.rows
            )));
        }
        Tensor3::from_vec(mat.rows / p, mat.cols, p, mat.data.clone())
    }

    /// Block-circulant matrix: block `(r, c)` is frontal slice `(r - c) mod p`.
    pub fn bcirc(&self) -> Matrix {
        let (m, n, p) = self.dims();
        let mut out = Matrix::zeros(m * p, n * p);
        for r in 0..p {
            for c in 0..p {
                let slice = self.slice_data((r + p - c) % p);
                for i in 0..m {
                    let row = (r * m + i) * n * p + c * n;
                    out.data[row..row + n].copy_from_slice(&slice[i * n..(i + 1) * n]);
                }
            }
        }
        out
    }

    /// Recovers a tensor from its block-circulant matrix, reading only the
    /// first block column.
    pub fn bcirc_inv(mat: &Matrix, dims: (usize, usize, usize)) -> Result<Tensor3> {
        let (m, n, p) = dims;
        if mat.rows != m * p || mat.cols != n * p {
            return Err(Error::Shape(format!(
                "{}x{} is not the block-circulant shape of {m}x{n}x{p}",
                mat.rows, mat.cols
            )));
        }
        Ok(Tensor3::from_fn(m, n, p, |i, j, k| mat.get(k * m + i, j)))
    }

    pub fn hadamard(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            m: self.m,
            n: self.n,
            p: self.p,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor3) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        self.check_same(other)?;
        Ok(Tensor3 {
            m: self.m,
            n: self.n,
            p: self.p,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    fn check_same(&self, other: &Tensor3) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff on mismatched dims");
        max_abs_diff(&self.data, &other.data)
    }

    /// FNV-1a over the raw bit patterns; equal checksums mean bit-identical
    /// contents for all practical purposes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Textual dump: a `tensor3 <m> <n> <p>` header, then each frontal slice
    /// introduced by `slice <k>` with one line per row, 17 significant digits.
    pub fn to_dump(&self) -> String {
        let mut s = format!("tensor3 {} {} {}\n", self.m, self.n, self.p);
        for k in 0..self.p {
            let _ = writeln!(s, "slice {k}");
            let slice = self.slice_data(k);
            for i in 0..self.m {
                write_row(&mut s, &slice[i * self.n..(i + 1) * self.n]);
            }
        }
        s
    }

    pub fn from_dump(text: &str) -> Result<Tensor3> {
        let mut tokens = dump_tokens(text);
        let t = Tensor3::parse_dump(&mut tokens)?;
        if tokens.next().is_some() {
            return Err(Error::Format("trailing data after tensor".into()));
        }
        Ok(t)
    }

    pub(crate) fn parse_dump<'a>(tokens: &mut impl Iterator<Item = &'a str>) -> Result<Tensor3> {
        expect_token(tokens, "tensor3")?;
        let m = parse_usize(tokens.next())?;
        let n = parse_usize(tokens.next())?;
        let p = parse_usize(tokens.next())?;
        let mut data = Vec::with_capacity(m * n * p);
        for k in 0..p {
            expect_token(tokens, "slice")?;
            if parse_usize(tokens.next())? != k {
                return Err(Error::Format(format!("expected slice {k}")));
            }
            data.extend(parse_values(tokens, m * n)?);
        }
        Tensor3::from_vec(m, n, p, data)
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

fn write_row(s: &mut String, row: &[f64]) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:.16e}");
    }
    s.push('\n');
}

pub(crate) fn dump_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub(crate) fn expect_token<'a>(
    tokens: &mut impl Iterator<Item = &'a str>,
    want: &str,
) -> Result<()> {
    match tokens.next() {
        Some(t) if t == want => Ok(()),
        other => Err(Error::Format(format!("expected `{want}`, found {other:?}"))),
    }
}

pub(crate) fn parse_usize(tok: Option<&str>) -> Result<usize> {
    tok.ok_or_else(|| Error::Format("unexpected end of dump".into()))?
        .parse()
        .map_err(|e| Error::Format(format!("bad integer: {e}")))
}

fn parse_values<'a>(tokens: &mut impl Iterator<Item = &'a str>, count: usize) -> Result<Vec<f64>> {
    (0..count)
        .map(|_| {
            tokens
                .next()
                .ok_or_else(|| Error::Format("unexpected end of dump".into()))?
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("bad value: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two_by_two() -> Tensor3 {
        Tensor3::from_slices(&[
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap(),
        ])
        .unwrap()
    }

    fn tube(v: &[f64]) -> Tensor3 {
        Tensor3::from_vec(1, 1, v.len(), v.to_vec()).unwrap()
    }

    fn arb_tensor(max: (usize, usize, usize)) -> impl Strategy<Value = Tensor3> {
        (1..=max.0, 1..=max.1, 1..=max.2).prop_flat_map(|(m, n, p)| {
            prop::collection::vec(-1.0f64..1.0, m * n * p)
                .prop_map(move |d| Tensor3::from_vec(m, n, p, d).unwrap())
        })
    }

    #[test]
    fn frontal_slice_reads_back() {
        let t = two_by_two_by_two();
        let s = t.frontal_slice(1).unwrap();
        assert_eq!(s, Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());

        let z = Tensor3::zeros(3, 4, 5).frontal_slice(2).unwrap();
        assert_eq!(z, Matrix::zeros(3, 4));

        let single = Tensor3::from_fn(2, 3, 1, |i, j, _| (i * 3 + j) as f64);
        assert_eq!(single.frontal_slice(0).unwrap().data(), single.data());
    }

    #[test]
    fn frontal_slice_out_of_range() {
        assert!(matches!(
            two_by_two_by_two().frontal_slice(2),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn permute_shapes_and_entries() {
        let t = Tensor3::from_fn(2, 3, 4, |i, j, k| (100 * i + 10 * j + k) as f64);
        assert_eq!(t.permute([0, 2, 1]).unwrap().dims(), (2, 4, 3));
        assert_eq!(t.permute([0, 1, 2]).unwrap(), t);

        let img = Tensor3::from_fn(32, 32, 3, |i, j, c| (i * 1000 + j * 10 + c) as f64);
        let p = img.permute([1, 2, 0]).unwrap();
        assert_eq!(p.dims(), (32, 3, 32));
        for (i, j, c) in [(0, 0, 0), (5, 17, 2), (31, 30, 1)] {
            assert_eq!(p.get(j, c, i), img.get(i, j, c));
        }
    }

    #[test]
    fn permute_rejects_bad_axes() {
        let t = Tensor3::zeros(2, 2, 2);
        assert!(matches!(t.permute([0, 0, 1]), Err(Error::Argument(_))));
        assert!(matches!(t.permute([0, 1, 3]), Err(Error::Argument(_))));
    }

    #[test]
    fn unfold_examples() {
        assert_eq!(tube(&[1.0, 2.0]).unfold().data(), &[1.0, 2.0]);
        let u = two_by_two_by_two().unfold();
        assert_eq!((u.rows(), u.cols()), (4, 2));
        assert_eq!(u.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let flat = Tensor3::from_fn(2, 3, 1, |i, j, _| (i + j) as f64);
        assert_eq!(flat.unfold(), flat.frontal_slice(0).unwrap());
    }

    #[test]
    fn fold_examples() {
        let u = Matrix::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            vec![7.0, 8.0],
        ])
        .unwrap();
        assert_eq!(Tensor3::fold(&u, 2).unwrap(), two_by_two_by_two());
        let f = Tensor3::fold(&u, 1).unwrap();
        assert_eq!(f.dims(), (4, 2, 1));
        assert_eq!(f.frontal_slice(0).unwrap(), u);
        assert!(matches!(Tensor3::fold(&u, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn bcirc_examples() {
        assert_eq!(
            tube(&[1.0, 2.0]).bcirc(),
            Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap()
        );
        assert_eq!(
            tube(&[1.0, 2.0, 3.0]).bcirc(),
            Matrix::from_rows(&[
                vec![1.0, 3.0, 2.0],
                vec![2.0, 1.0, 3.0],
                vec![3.0, 2.0, 1.0]
            ])
            .unwrap()
        );
        let flat = Tensor3::from_fn(2, 3, 1, |i, j, _| (i * 3 + j) as f64);
        assert_eq!(flat.bcirc(), flat.frontal_slice(0).unwrap());
    }

    #[test]
    fn bcirc_inv_examples() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(Tensor3::bcirc_inv(&m, (1, 1, 2)).unwrap(), tube(&[1.0, 2.0]));

        let id = Tensor3::bcirc_inv(&Matrix::identity(4), (2, 2, 2)).unwrap();
        let expect = Tensor3::from_fn(2, 2, 2, |i, j, k| f64::from(u8::from(k == 0 && i == j)));
        assert_eq!(id, expect);

        assert!(matches!(
            Tensor3::bcirc_inv(&Matrix::identity(4), (2, 2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn hadamard_examples() {
        let a = Tensor3::from_fn(2, 3, 4, |i, j, k| (i + 2 * j) as f64 - k as f64);
        assert_eq!(a.hadamard(&Tensor3::ones(2, 3, 4)).unwrap(), a);
        assert_eq!(
            a.hadamard(&Tensor3::zeros(2, 3, 4)).unwrap(),
            Tensor3::zeros(2, 3, 4)
        );
        assert_eq!(
            tube(&[1.0, 2.0]).hadamard(&tube(&[3.0, 4.0])).unwrap(),
            tube(&[3.0, 8.0])
        );
        assert!(matches!(
            a.hadamard(&Tensor3::zeros(3, 2, 4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor3::from_vec(1, 1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            Tensor3::from_vec(1, 1, 2, vec![1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dump_is_exact() {
        let t = Tensor3::from_fn(2, 3, 2, |i, j, k| {
            (i as f64 + 0.1) / (j as f64 + 3.0) - (k as f64) * std::f64::consts::PI
        });
        let text = t.to_dump();
        assert!(text.starts_with("tensor3 2 3 2\nslice 0\n"));
        assert_eq!(Tensor3::from_dump(&text).unwrap(), t);

        let m = Matrix::from_fn(2, 2, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        assert_eq!(Matrix::from_dump(&m.to_dump()).unwrap(), m);
        assert!(Tensor3::from_dump("tensor3 1 1 1\nslice 0\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trips_are_exact(t in arb_tensor((4, 4, 6))) {
            let (_, _, p) = t.dims();
            prop_assert_eq!(Tensor3::fold(&t.unfold(), p).unwrap(), t.clone());
            prop_assert_eq!(Tensor3::bcirc_inv(&t.bcirc(), t.dims()).unwrap(), t.clone());
            for axes in [[0, 2, 1], [1, 2, 0], [2, 0, 1], [1, 0, 2], [2, 1, 0]] {
                let mut inv = [0; 3];
                for (d, &a) in axes.iter().enumerate() {
                    inv[a] = d;
                }
                prop_assert_eq!(t.permute(axes).unwrap().permute(inv).unwrap(), t.clone());
            }
        }

        #[test]
        fn bcirc_is_block_circulant(t in arb_tensor((4, 4, 6))) {
            let (m, n, p) = t.dims();
            let b = t.bcirc();
            for r in 0..p {
                for c in 0..p {
                    let (r0, c0) = ((r + 1) % p, (c + 1) % p);
                    for i in 0..m {
                        for j in 0..n {
                            prop_assert_eq!(b.get(r * m + i, c * n + j), b.get(r0 * m + i, c0 * n + j));
                        }
                    }
                }
            }
            // unfold is the first block column
            let u = t.unfold();
            for row in 0..m * p {
                for j in 0..n {
                    prop_assert_eq!(b.get(row, j), u.get(row, j));
                }
            }
        }
    }
}
