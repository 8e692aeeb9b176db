//! Column-pivoted Householder QR for least squares.

use num_traits::{Float, FromPrimitive};

/// Dense matrix, column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Float> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// From row-major rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        let mut m = Self::zeros(n, k);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), k, "ragged rows");
            for (j, &v) in r.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn col(&self, j: usize) -> &[T] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn col_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[j * self.rows + i]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[j * self.rows + i]
    }
}

/// `A P = Q R` with `Q` held as Householder vectors.
#[derive(Clone, Debug)]
pub struct Qr<T> {
    r: Matrix<T>,
    vectors: Vec<(Vec<T>, T)>,
    /// `perm[i]` is the original column in position `i`.
    pub perm: Vec<usize>,
    pub rank: usize,
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<T: Float + FromPrimitive> Qr<T> {
    /// Columns whose remaining norm falls to `tol` times the largest
    /// diagonal are treated as dependent.
    pub fn new(a: &Matrix<T>, tol: T) -> Self {
        let (n, k) = (a.rows, a.cols);
        let mut r = a.clone();
        let mut perm: Vec<usize> = (0..k).collect();
        let mut vectors = Vec::new();
        let mut rank = 0;
        let mut first = T::zero();
        for s in 0..n.min(k) {
            let norm2 = |m: &Matrix<T>, j: usize| dot(&m.col(j)[s..], &m.col(j)[s..]);
            let p = (s..k)
                .max_by(|&x, &y| norm2(&r, x).partial_cmp(&norm2(&r, y)).expect("finite"))
                .expect("non-empty");
            if p != s {
                for i in 0..n {
                    let tmp = r[(i, s)];
                    r[(i, s)] = r[(i, p)];
                    r[(i, p)] = tmp;
                }
                perm.swap(s, p);
            }
            let norm = norm2(&r, s).sqrt();
            if s == 0 {
                first = norm;
            }
            if norm <= tol * first || norm == T::zero() {
                break;
            }
            let x0 = r[(s, s)];
            let alpha = if x0 > T::zero() { -norm } else { norm };
            let mut v: Vec<T> = r.col(s)[s..].to_vec();
            v[0] = v[0] - alpha;
            let vv = dot(&v, &v);
            let beta = T::from_f64(2.0).expect("2") / vv;
            for j in s..k {
                let c = &mut r.col_mut(j)[s..];
                let f = beta * dot(&v, c);
                for (ci, &vi) in c.iter_mut().zip(&v) {
                    *ci = *ci - f * vi;
                }
            }
            vectors.push((v, beta));
            rank = s + 1;
        }
        Qr { r, vectors, perm, rank }
    }

    /// `Qᵀ y`.
    pub fn qt(&self, y: &[T]) -> Vec<T> {
        let mut y = y.to_vec();
        for (s, (v, beta)) in self.vectors.iter().enumerate() {
            let f = *beta * dot(v, &y[s..]);
            for (yi, &vi) in y[s..].iter_mut().zip(v) {
                *yi = *yi - f * vi;
            }
        }
        y
    }

    /// Least-squares coefficients in original column order. Requires full rank.
    pub fn solve(&self, y: &[T]) -> Vec<T> {
        let k = self.perm.len();
        assert_eq!(self.rank, k, "rank deficient");
        let qty = self.qt(y);
        let mut z = vec![T::zero(); k];
        for i in (0..k).rev() {
            let mut acc = qty[i];
            for j in i + 1..k {
                acc = acc - self.r[(i, j)] * z[j];
            }
            z[i] = acc / self.r[(i, i)];
        }
        let mut beta = vec![T::zero(); k];
        for (i, &p) in self.perm.iter().enumerate() {
            beta[p] = z[i];
        }
        beta
    }

    /// `(AᵀA)⁻¹` in original column order. Requires full rank.
    pub fn xtx_inverse(&self) -> Matrix<T> {
        let k = self.perm.len();
        assert_eq!(self.rank, k, "rank deficient");
        // Inverse of the upper-triangular R, column by column.
        let mut rinv = Matrix::zeros(k, k);
        for j in 0..k {
            rinv[(j, j)] = T::one() / self.r[(j, j)];
            for i in (0..j).rev() {
                let mut acc = T::zero();
                for m in i + 1..=j {
                    acc = acc + self.r[(i, m)] * rinv[(m, j)];
                }
                rinv[(i, j)] = -acc / self.r[(i, i)];
            }
        }
        let mut out = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let mut acc = T::zero();
                for m in i.max(j)..k {
                    acc = acc + rinv[(i, m)] * rinv[(j, m)];
                }
                out[(self.perm[i], self.perm[j])] = acc;
            }
        }
        out
    }

    /// Original indices of columns judged dependent on the others.
    pub fn dependent_columns(&self) -> Vec<usize> {
        let mut v = self.perm[self.rank..].to_vec();
        v.sort_unstable();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_recovers_coefficients() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, i as f64, (i * i) as f64 % 5.0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 2.0 - 3.0 * r[1] + 0.5 * r[2]).collect();
        let qr = Qr::new(&Matrix::from_rows(&rows), 1e-10);
        assert_eq!(qr.rank, 3);
        let b = qr.solve(&y);
        for (got, want) in b.iter().zip([2.0, -3.0, 0.5]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn collinear_column_is_named() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64, 2.0 * i as f64 + 1.0]).collect();
        let qr = Qr::new(&Matrix::from_rows(&rows), 1e-10);
        assert_eq!(qr.rank, 2);
        assert_eq!(qr.dependent_columns().len(), 1);
    }

    #[test]
    fn inverse_times_gram_is_identity() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![1.0, (i as f64).sin(), (i as f64 * 0.7).cos()])
            .collect();
        let a = Matrix::from_rows(&rows);
        let inv = Qr::new(&a, 1e-10).xtx_inverse();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for m in 0..3 {
                    acc += dot(a.col(i), a.col(m)) * inv[(m, j)];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((acc - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let rows: Vec<Vec<f32>> = (0..6).map(|i| vec![1.0, i as f32]).collect();
        let y: Vec<f32> = (0..6).map(|i| 1.0 + 2.0 * i as f32).collect();
        let b = Qr::new(&Matrix::from_rows(&rows), 1e-6).solve(&y);
        assert!((b[0] - 1.0).abs() < 1e-4 && (b[1] - 2.0).abs() < 1e-4);
    }
}
