"""Hot inner loops for mixture evaluation.

Every kernel exists twice, a numba ``@njit`` version and a pure-numpy
version with the same signature and semantics.  The numba path is used when
numba imports cleanly and ``VSDLAB_DISABLE_NUMBA`` is unset (or ``0``).

Kernels take per-query ``alpha``/``sigma`` arrays so a single call can mix
diffusion times; a static (undiffused) evaluation passes ``alpha=1``,
``sigma=0``.
"""

import math
import os

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# numpy fallback processes queries in chunks so that chunk * n stays bounded
_CHUNK_ELEMS = 1 << 21


def _env_disabled():
    return os.environ.get("VSDLAB_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


# --------------------------------------------------------------------------
# numpy implementations


def iso_mixture_numpy(x, centers, alpha, sigma):
    """Equal-weight isotropic mixture ``(1/n) sum_i N(alpha*c_i, sigma^2 I)``.

    Returns ``(logp, eps)`` where ``eps = -sigma * grad_x log q``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    B, m = x.shape
    n = centers.shape[0]
    logp = np.empty(B)
    eps = np.empty((B, m))
    step = max(1, _CHUNK_ELEMS // max(n, 1))
    for lo in range(0, B, step):
        hi = min(B, lo + step)
        a = alpha[lo:hi, None, None]
        s = sigma[lo:hi]
        diff = x[lo:hi, None, :] - a * centers[None, :, :]  # (b, n, m)
        sq = np.einsum("bnm,bnm->bn", diff, diff)
        logits = -0.5 * sq / (s[:, None] ** 2)
        mx = logits.max(axis=1)
        w = np.exp(logits - mx[:, None])
        tot = w.sum(axis=1)
        logp[lo:hi] = mx + np.log(tot) - math.log(n) - m * np.log(s) - 0.5 * m * LOG_2PI
        r = w / tot[:, None]
        eps[lo:hi] = np.einsum("bn,bnm->bm", r, diff) / s[:, None]
    return logp, eps


def gmm_numpy(x, alpha, sigma, log_weights, means, covs):
    """Gaussian mixture diffused to per-query ``(alpha, sigma)``.

    Component ``k`` becomes ``N(alpha*m_k, alpha^2 S_k + sigma^2 I)``.
    Returns ``(logp, score)`` with ``score = grad_x log p``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    B, d = x.shape
    K = means.shape[0]
    logp = np.empty(B)
    score = np.empty((B, d))
    eye = np.eye(d)
    step = max(1, _CHUNK_ELEMS // max(K * d * d, 1))
    for lo in range(0, B, step):
        hi = min(B, lo + step)
        a = alpha[lo:hi]
        s = sigma[lo:hi]
        C = (a**2)[:, None, None, None] * covs[None] + (s**2)[:, None, None, None] * eye
        diff = x[lo:hi, None, :] - a[:, None, None] * means[None]  # (b, K, d)
        L = np.linalg.cholesky(C)
        sol = np.linalg.solve(C, diff[..., None])[..., 0]
        maha = np.einsum("bkd,bkd->bk", diff, sol)
        logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
        comp = log_weights[None, :] - 0.5 * maha - 0.5 * logdet - 0.5 * d * LOG_2PI
        mx = comp.max(axis=1)
        w = np.exp(comp - mx[:, None])
        tot = w.sum(axis=1)
        logp[lo:hi] = mx + np.log(tot)
        r = w / tot[:, None]
        score[lo:hi] = -np.einsum("bk,bkd->bd", r, sol)
    return logp, score


# --------------------------------------------------------------------------
# numba implementations

try:
    import numba
    from numba import njit, prange

    # prefer OpenMP; the bundled TBB may be too old and only warns
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False


if HAS_NUMBA:

    @njit(cache=True, parallel=True, fastmath=False)
    def iso_mixture_numba(x, centers, alpha, sigma):
        B, m = x.shape
        n = centers.shape[0]
        logp = np.empty(B)
        eps = np.empty((B, m))
        log_n = math.log(n)
        for b in prange(B):
            a = alpha[b]
            s = sigma[b]
            inv2v = 0.5 / (s * s)
            logits = np.empty(n)
            mx = -np.inf
            for i in range(n):
                sq = 0.0
                for j in range(m):
                    dj = x[b, j] - a * centers[i, j]
                    sq += dj * dj
                v = -sq * inv2v
                logits[i] = v
                if v > mx:
                    mx = v
            tot = 0.0
            acc = np.zeros(m)
            for i in range(n):
                w = math.exp(logits[i] - mx)
                tot += w
                for j in range(m):
                    acc[j] += w * (x[b, j] - a * centers[i, j])
            logp[b] = mx + math.log(tot) - log_n - m * math.log(s) - 0.5 * m * LOG_2PI
            for j in range(m):
                eps[b, j] = acc[j] / tot / s
        return logp, eps

    @njit(cache=True, parallel=True, fastmath=False)
    def gmm_numba(x, alpha, sigma, log_weights, means, covs):
        B, d = x.shape
        K = means.shape[0]
        logp = np.empty(B)
        score = np.empty((B, d))
        for b in prange(B):
            a = alpha[b]
            s = sigma[b]
            comp = np.empty(K)
            sols = np.empty((K, d))
            L = np.empty((d, d))
            z = np.empty(d)
            diff = np.empty(d)
            mx = -np.inf
            for k in range(K):
                # cholesky of a^2 S_k + s^2 I
                for i in range(d):
                    for j in range(i + 1):
                        c = a * a * covs[k, i, j]
                        if i == j:
                            c += s * s
                        for q in range(j):
                            c -= L[i, q] * L[j, q]
                        if i == j:
                            # PD is checked at mixture construction; a NaN here surfaces downstream
                            L[i, i] = math.sqrt(c) if c > 0.0 else np.nan
                        else:
                            L[i, j] = c / L[j, j]
                for i in range(d):
                    diff[i] = x[b, i] - a * means[k, i]
                # forward solve L z = diff
                logdet = 0.0
                maha = 0.0
                for i in range(d):
                    acc = diff[i]
                    for q in range(i):
                        acc -= L[i, q] * z[q]
                    z[i] = acc / L[i, i]
                    maha += z[i] * z[i]
                    logdet += 2.0 * math.log(L[i, i])
                # back solve L^T u = z
                for i in range(d - 1, -1, -1):
                    acc = z[i]
                    for q in range(i + 1, d):
                        acc -= L[q, i] * sols[k, q]
                    sols[k, i] = acc / L[i, i]
                v = log_weights[k] - 0.5 * maha - 0.5 * logdet - 0.5 * d * LOG_2PI
                comp[k] = v
                if v > mx:
                    mx = v
            tot = 0.0
            for k in range(K):
                comp[k] = math.exp(comp[k] - mx)
                tot += comp[k]
            logp[b] = mx + math.log(tot)
            for i in range(d):
                acc = 0.0
                for k in range(K):
                    acc += comp[k] * sols[k, i]
                score[b, i] = -acc / tot
        return logp, score

else:  # pragma: no cover
    iso_mixture_numba = None
    gmm_numba = None


USE_NUMBA = HAS_NUMBA and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"


def set_threads(n):
    """Cap numba's worker threads; no-op on the numpy path."""
    if HAS_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


_QUIET = {"invalid": "ignore", "over": "ignore", "divide": "ignore"}


def _as_query(alpha, sigma, B):
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (B,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,))
    return np.ascontiguousarray(alpha), np.ascontiguousarray(sigma)


def iso_mixture(x, centers, alpha, sigma):
    x = np.ascontiguousarray(x, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    alpha, sigma = _as_query(alpha, sigma, x.shape[0])
    if USE_NUMBA:
        return iso_mixture_numba(x, centers, alpha, sigma)
    # non-finite inputs propagate as NaN like the compiled path; callers check
    with np.errstate(**_QUIET):
        return iso_mixture_numpy(x, centers, alpha, sigma)


def gmm(x, alpha, sigma, log_weights, means, covs):
    x = np.ascontiguousarray(x, dtype=np.float64)
    alpha, sigma = _as_query(alpha, sigma, x.shape[0])
    args = (
        x,
        alpha,
        sigma,
        np.ascontiguousarray(log_weights, dtype=np.float64),
        np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(covs, dtype=np.float64),
    )
    if USE_NUMBA:
        return gmm_numba(*args)
    with np.errstate(**_QUIET):
        return gmm_numpy(*args)
