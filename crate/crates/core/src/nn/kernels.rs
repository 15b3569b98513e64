//! Forward kernels shared by the autograd tape and the cache-based inference path.

use crate::tensor::{Real, Tensor};

/// Contiguous run of rows belonging to one sample in a batch-concatenated matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }
}

/// Segments for a batch of sequences with the given lengths, laid out back to back.
pub fn segments_from_lengths(lengths: &[usize]) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let s = Segment::new(start, len);
            start += len;
            s
        })
        .collect()
}

/// `x · w (+ b)` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (m, k, n) = (x.rows(), x.cols(), w.cols());
    debug_assert_eq!(w.rows(), k);
    let mut out = match b {
        Some(b) => {
            let mut out = Tensor::zeros([m, n]);
            for i in 0..m {
                out.row_mut(i).copy_from_slice(b.data());
            }
            out
        }
        None => Tensor::zeros([m, n]),
    };
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        x.data(),
        (k as isize, 1),
        w.data(),
        (n as isize, 1),
        beta,
        out.data_mut(),
        (n as isize, 1),
    );
    out
}

pub struct LayerNormOut<T> {
    pub y: Tensor<T>,
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> LayerNormOut<T> {
    let (m, n) = (x.rows(), x.cols());
    let nf = T::from_usize(n).unwrap();
    let mut y = Tensor::zeros(x.shape().to_vec());
    let mut mean = Vec::with_capacity(m);
    let mut rstd = Vec::with_capacity(m);
    for i in 0..m {
        let row = x.row(i);
        let mu = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
        let r = T::one() / (var + eps).sqrt();
        let out = y.row_mut(i);
        for j in 0..n {
            out[j] = (row[j] - mu) * r * gamma.data()[j] + beta.data()[j];
        }
        mean.push(mu);
        rstd.push(r);
    }
    LayerNormOut { y, mean, rstd }
}

// tanh approximation; smooth everywhere, which keeps finite-difference checks clean.
const GELU_C: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let s = T::from_f64_lossy(SQRT_2_OVER_PI);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (s * (x + c * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let s = T::from_f64_lossy(SQRT_2_OVER_PI);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + three * c * x * x)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for i in 0..y.rows() {
        softmax_in_place(y.row_mut(i));
    }
    y
}

/// Numerically stable `log Σ exp(row)`.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Shape parameters of a fused multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub heads: usize,
    pub q_segments: Vec<Segment>,
    pub k_segments: Vec<Segment>,
    /// Query `i` of a segment sees key `j` only if `j <= i + (k_len - q_len)`.
    pub causal: bool,
}

impl AttentionLayout {
    /// Offset of each (segment, head) probability block in the flat buffer.
    pub(crate) fn prob_offsets(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.q_segments.len());
        let mut total = 0;
        for (qs, ks) in self.q_segments.iter().zip(&self.k_segments) {
            offsets.push(total);
            total += self.heads * qs.len * ks.len;
        }
        (offsets, total)
    }

    #[inline]
    pub(crate) fn visible(&self, i: usize, j: usize, q_len: usize, k_len: usize) -> bool {
        !self.causal || j + q_len <= i + k_len
    }
}

/// Scaled dot-product attention over per-sample segments, all heads at once.
///
/// `q: [rows_q, d]`, `k, v: [rows_k, d]`. Returns the concatenated head outputs
/// `[rows_q, d]` and the attention probabilities (row-major per segment and head).
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &AttentionLayout,
) -> (Tensor<T>, Vec<T>) {
    let d = q.cols();
    let dh = d / layout.heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let (offsets, total) = layout.prob_offsets();
    let mut probs = vec![T::zero(); total];
    let mut out = Tensor::zeros([q.rows(), d]);
    let ds = d as isize;

    for (s, (qs, ks)) in layout.q_segments.iter().zip(&layout.k_segments).enumerate() {
        let (nq, nk) = (qs.len, ks.len);
        if nq == 0 || nk == 0 {
            continue;
        }
        for h in 0..layout.heads {
            let p = &mut probs[offsets[s] + h * nq * nk..offsets[s] + (h + 1) * nq * nk];
            let q_off = qs.start * d + h * dh;
            let k_off = ks.start * d + h * dh;
            T::gemm(
                nq,
                dh,
                nk,
                scale,
                &q.data()[q_off..],
                (ds, 1),
                &k.data()[k_off..],
                (1, ds),
                T::zero(),
                p,
                (nk as isize, 1),
            );
            for i in 0..nq {
                let row = &mut p[i * nk..(i + 1) * nk];
                let visible = (0..nk).filter(|&j| layout.visible(i, j, nq, nk)).count();
                softmax_in_place(&mut row[..visible]);
                for x in &mut row[visible..] {
                    *x = T::zero();
                }
            }
            let v_off = ks.start * d + h * dh;
            let o_off = qs.start * d + h * dh;
            T::gemm(
                nq,
                nk,
                dh,
                T::one(),
                p,
                (nk as isize, 1),
                &v.data()[v_off..],
                (ds, 1),
                T::zero(),
                &mut out.data_mut()[o_off..],
                (ds, 1),
            );
        }
    }
    (out, probs)
}
