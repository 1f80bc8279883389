//! Floating-point element types and a small-batch matrix product against a
//! right-hand side that is packed once and reused for every time step.

use std::fmt::Debug;
use std::ops::{AddAssign, Neg, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};

/// Element type the recurrent network can compute in.
pub trait Real:
    LinalgScalar + ScalarOperand + AddAssign + SubAssign + Neg<Output = Self> + PartialOrd + Debug + Send + Sync
{
    /// Column panel width of [`PackedRhs`].
    const PANEL: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;

    /// `c = a · rhs`, or `c += a · rhs` when `accumulate`. `a` is `(m, rhs.k)`
    /// and `c` is `(m, rhs.n)`, both row-major and contiguous.
    fn matmul_packed(a: &[Self], m: usize, rhs: &PackedRhs<Self>, c: &mut [Self], accumulate: bool);
}

macro_rules! real_common {
    () => {
        #[inline]
        fn exp(self) -> Self {
            self.exp()
        }

        #[inline]
        fn tanh(self) -> Self {
            self.tanh()
        }

        #[inline]
        fn sqrt(self) -> Self {
            self.sqrt()
        }
    };
}

impl Real for f64 {
    const PANEL: usize = 8;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    real_common!();

    fn matmul_packed(a: &[f64], m: usize, rhs: &PackedRhs<f64>, c: &mut [f64], accumulate: bool) {
        check_shapes(a, m, rhs, c);
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                // SAFETY: the required CPU features were detected at runtime.
                unsafe { x86::f64_avx512(a, m, rhs, c, accumulate) };
                return;
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: as above.
                unsafe { x86::f64_avx2(a, m, rhs, c, accumulate) };
                return;
            }
        }
        matmul_portable(a, m, rhs, c, accumulate);
    }
}

impl Real for f32 {
    const PANEL: usize = 16;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    real_common!();

    fn matmul_packed(a: &[f32], m: usize, rhs: &PackedRhs<f32>, c: &mut [f32], accumulate: bool) {
        check_shapes(a, m, rhs, c);
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                // SAFETY: the required CPU features were detected at runtime.
                unsafe { x86::f32_avx512(a, m, rhs, c, accumulate) };
                return;
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: as above.
                unsafe { x86::f32_avx2(a, m, rhs, c, accumulate) };
                return;
            }
        }
        matmul_portable(a, m, rhs, c, accumulate);
    }
}

/// `(k, n)` matrix stored as column panels of width `F::PANEL`, zero padded.
#[derive(Clone, Debug)]
pub struct PackedRhs<F> {
    k: usize,
    n: usize,
    data: Vec<F>,
}

impl<F: Real> PackedRhs<F> {
    /// Packs the matrix whose `(row, col)` entry is `value(row, col)`.
    pub fn from_fn(k: usize, n: usize, value: impl Fn(usize, usize) -> F) -> Self {
        let nr = F::PANEL;
        let panels = n.div_ceil(nr);
        let mut data = vec![F::from_f64(0.0); panels * k * nr];
        for p in 0..panels {
            let panel = &mut data[p * k * nr..(p + 1) * k * nr];
            for row in 0..k {
                for c in 0..nr.min(n - p * nr) {
                    panel[row * nr + c] = value(row, p * nr + c);
                }
            }
        }
        PackedRhs { k, n, data }
    }
}

fn check_shapes<F>(a: &[F], m: usize, rhs: &PackedRhs<F>, c: &[F]) {
    assert_eq!(a.len(), m * rhs.k, "left operand shape");
    assert_eq!(c.len(), m * rhs.n, "output shape");
}

/// Row blocks of `a` interleaved so one step over `k` reads `mr` consecutive values.
fn pack_lhs<F: Real>(a: &[F], m: usize, k: usize, mr: usize) -> Vec<F> {
    let blocks = m.div_ceil(mr);
    let mut packed = vec![F::from_f64(0.0); blocks * k * mr];
    for i in 0..m {
        let (block, r) = (i / mr, i % mr);
        let dst = &mut packed[block * k * mr..(block + 1) * k * mr];
        for (kk, &v) in a[i * k..(i + 1) * k].iter().enumerate() {
            dst[kk * mr + r] = v;
        }
    }
    packed
}

/// Writes the valid part of a tile whose rows start at `row0` and columns at `col0`.
fn store_tile<F: Real>(
    tile: &[F],
    c: &mut [F],
    m: usize,
    n: usize,
    row0: usize,
    col0: usize,
    accumulate: bool,
) {
    let nr = F::PANEL;
    let width = nr.min(n - col0);
    for (r, tile_row) in tile.chunks_exact(nr).enumerate() {
        let i = row0 + r;
        if i >= m {
            break;
        }
        let out = &mut c[i * n + col0..i * n + col0 + width];
        if accumulate {
            for (o, &v) in out.iter_mut().zip(tile_row) {
                *o += v;
            }
        } else {
            out.copy_from_slice(&tile_row[..width]);
        }
    }
}

fn matmul_portable<F: Real>(a: &[F], m: usize, rhs: &PackedRhs<F>, c: &mut [F], accumulate: bool) {
    const MR: usize = 4;
    let (k, n, nr) = (rhs.k, rhs.n, F::PANEL);
    let a_packed = pack_lhs(a, m, k, MR);
    let mut tile = vec![F::from_f64(0.0); MR * nr];
    for (p, panel) in rhs.data.chunks_exact(k * nr).enumerate() {
        for (block, a_block) in a_packed.chunks_exact(k * MR).enumerate() {
            tile.fill(F::from_f64(0.0));
            for (b, x) in panel.chunks_exact(nr).zip(a_block.chunks_exact(MR)) {
                for (r, &xr) in x.iter().enumerate() {
                    for (t, &bj) in tile[r * nr..(r + 1) * nr].iter_mut().zip(b) {
                        *t += xr * bj;
                    }
                }
            }
            store_tile(&tile, c, m, n, block * MR, p * nr, accumulate);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    //! Register-blocked micro-kernels. Every tile keeps eight vector
    //! accumulators live across the `k` loop.

    use std::arch::x86_64::*;

    use super::{pack_lhs, store_tile, PackedRhs};

    macro_rules! kernel {
        (
            $name:ident, $feature:literal, $ty:ty, $vec:ty, $mr:expr, $per_row:expr, $lanes:expr,
            $zero:ident, $load:ident, $splat:ident, $fmadd:ident, $store:ident
        ) => {
            #[target_feature(enable = $feature)]
            pub(super) unsafe fn $name(
                a: &[$ty],
                m: usize,
                rhs: &PackedRhs<$ty>,
                c: &mut [$ty],
                accumulate: bool,
            ) {
                const MR: usize = $mr;
                const NR: usize = $per_row * $lanes;
                let (k, n) = (rhs.k, rhs.n);
                let a_packed = pack_lhs(a, m, k, MR);
                let mut tile = [0.0 as $ty; MR * NR];
                for (p, panel) in rhs.data.chunks_exact(k * NR).enumerate() {
                    for (block, a_block) in a_packed.chunks_exact(k * MR).enumerate() {
                        let mut acc: [$vec; MR * $per_row] = [$zero(); MR * $per_row];
                        let mut bp = panel.as_ptr();
                        let mut ap = a_block.as_ptr();
                        for _ in 0..k {
                            // SAFETY: `bp` and `ap` advance by NR and MR per
                            // step; the panels hold exactly k*NR and k*MR values.
                            let b: [$vec; $per_row] =
                                std::array::from_fn(|v| unsafe { $load(bp.add(v * $lanes)) });
                            for r in 0..MR {
                                let x = $splat(unsafe { *ap.add(r) });
                                for v in 0..$per_row {
                                    acc[r * $per_row + v] = $fmadd(x, b[v], acc[r * $per_row + v]);
                                }
                            }
                            bp = unsafe { bp.add(NR) };
                            ap = unsafe { ap.add(MR) };
                        }
                        for (v, acc_v) in acc.iter().enumerate() {
                            // SAFETY: `tile` has MR*NR slots and v*lanes < MR*NR.
                            unsafe { $store(tile.as_mut_ptr().add(v * $lanes), *acc_v) };
                        }
                        store_tile(&tile, c, m, n, block * MR, p * NR, accumulate);
                    }
                }
            }
        };
    }

    kernel!(
        f64_avx512, "avx512f", f64, __m512d, 8, 1, 8,
        _mm512_setzero_pd, _mm512_loadu_pd, _mm512_set1_pd, _mm512_fmadd_pd, _mm512_storeu_pd
    );
    kernel!(
        f64_avx2, "avx2,fma", f64, __m256d, 4, 2, 4,
        _mm256_setzero_pd, _mm256_loadu_pd, _mm256_set1_pd, _mm256_fmadd_pd, _mm256_storeu_pd
    );
    kernel!(
        f32_avx512, "avx512f", f32, __m512, 8, 1, 16,
        _mm512_setzero_ps, _mm512_loadu_ps, _mm512_set1_ps, _mm512_fmadd_ps, _mm512_storeu_ps
    );
    kernel!(
        f32_avx2, "avx2,fma", f32, __m256, 4, 2, 8,
        _mm256_setzero_ps, _mm256_loadu_ps, _mm256_set1_ps, _mm256_fmadd_ps, _mm256_storeu_ps
    );
}
