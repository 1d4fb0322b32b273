# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Hot loops behind the inference path: direct dilated 3x3 convolution
plus the fused normalization/rectifier epilogue.

The convolution reads its input unpadded (implicit zero boundary):
interior tiles take a branch-free path, border tiles a guarded one. The
accumulator tile is fixed at 32 lanes, 64-byte aligned, because the
compiler keeps it vectorized only for literal loop bounds and emits
aligned SIMD stores for it; narrower networks run on zero-padded weight
rows and only store their true width. The numpy implementations remain
the reference; these are drop-in accelerations dispatched at runtime
when the extension compiled."""

WIDTHS = (24, 32)
LANES = 32

cdef extern from *:
    """
    /* vectorized accumulator rows: 128 bytes each, 64-byte aligned, so the
       compiler's aligned SIMD stores are always legal */
    typedef float acc_row[32] __attribute__((aligned(64)));
    """
    ctypedef float acc_row[32]


cdef inline long _imin(long a, long b) nogil:
    return a if a < b else b


cdef void _conv_rows(const float *x, const float *wt, float *out,
                     double *stat_sum, double *stat_sq,
                     long ci_n, long co_out, long h, long w, long d) nogil:
    # wt is (3, 3, ci_n, 32) with channels beyond co_out zeroed; per-channel
    # sum / sum-of-squares of the output accumulate into stat_sum / stat_sq
    cdef long y, x0, ti, ky, kx, ci, i, co, yy, xx
    cdef float v, sq
    cdef acc_row acc[6]
    cdef const float *xr
    cdef const float *wv
    cdef bint interior_y
    for y in range(h):
        interior_y = (y >= d) and (y + d < h)
        x0 = 0
        while x0 < w:
            ti = _imin(6, w - x0)
            for i in range(6):
                for co in range(32):
                    acc[i][co] = 0.0
            if interior_y and x0 >= d and x0 + ti - 1 + d < w:
                for ky in range(3):
                    for kx in range(3):
                        for ci in range(ci_n):
                            xr = x + (ci * h + y + (ky - 1) * d) * w + x0 + (kx - 1) * d
                            wv = wt + ((ky * 3 + kx) * ci_n + ci) * 32
                            for i in range(ti):
                                v = xr[i]
                                for co in range(32):
                                    acc[i][co] += v * wv[co]
            else:
                for ky in range(3):
                    yy = y + (ky - 1) * d
                    if yy < 0 or yy >= h:
                        continue
                    for kx in range(3):
                        for i in range(ti):
                            xx = x0 + i + (kx - 1) * d
                            if xx < 0 or xx >= w:
                                continue
                            for ci in range(ci_n):
                                v = x[(ci * h + yy) * w + xx]
                                wv = wt + ((ky * 3 + kx) * ci_n + ci) * 32
                                for co in range(32):
                                    acc[i][co] += v * wv[co]
            for i in range(ti):
                for co in range(co_out):
                    out[(co * h + y) * w + x0 + i] = acc[i][co]
            # per-tile partial sums in float, folded into float64 per tile
            for co in range(co_out):
                v = 0.0
                sq = 0.0
                for i in range(ti):
                    v += acc[i][co]
                    sq += acc[i][co] * acc[i][co]
                stat_sum[co] += v
                stat_sq[co] += sq
            x0 += 6


def conv3x3(const float[:, :, ::1] x, const float[:, :, :, ::1] wt,
            float[:, :, ::1] out, long d,
            double[::1] stat_sum, double[::1] stat_sq):
    """out (Co, H, W) = dilated 3x3 conv of x (Ci, H, W), zero boundary.

    ``wt`` must be laid out (3, 3, Ci, 32) with any lanes beyond Co zeroed.
    Per-channel output sums and sums of squares accumulate into the two
    stat vectors (callers zero them first).
    """
    if wt.shape[3] != LANES:
        raise ValueError("weights must be padded to 32 output lanes")
    if out.shape[0] > LANES or stat_sum.shape[0] < out.shape[0] \
            or stat_sq.shape[0] < out.shape[0]:
        raise ValueError("at most 32 output channels with matching stat vectors")
    _conv_rows(&x[0, 0, 0], &wt[0, 0, 0, 0], &out[0, 0, 0],
               &stat_sum[0], &stat_sq[0],
               x.shape[0], out.shape[0], x.shape[1], x.shape[2], d)


def channel_stats(const float[:, :, ::1] y, double[::1] total, double[::1] total_sq):
    """Per-channel sum and sum of squares over (N, C, H*W), float64 accumulation."""
    cdef long n = y.shape[0]
    cdef long c = y.shape[1]
    cdef long m = y.shape[2]
    cdef long i, j, k
    cdef double s, sq, v
    for j in range(c):
        s = 0.0
        sq = 0.0
        for i in range(n):
            for k in range(m):
                v = y[i, j, k]
                s += v
                sq += v * v
        total[j] = s
        total_sq[j] = sq


def affine_lrelu(float[:, :, ::1] y, const float[::1] scale, const float[::1] shift,
                 float slope, bint rectify):
    """In place: y = scale_c * y + shift_c, then optionally max(y, slope*y)."""
    cdef long n = y.shape[0]
    cdef long c = y.shape[1]
    cdef long m = y.shape[2]
    cdef long i, j, k
    cdef float a, b, v, neg
    for i in range(n):
        for j in range(c):
            a = scale[j]
            b = shift[j]
            for k in range(m):
                v = a * y[i, j, k] + b
                if rectify:
                    neg = slope * v
                    if neg > v:
                        v = neg
                y[i, j, k] = v
