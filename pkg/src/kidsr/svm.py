"""GMM supervectors and one-vs-rest linear SVM speaker models."""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadModelFile, DegenerateData, DimMismatch, InsufficientData, ModelMismatch
from .features import FRAME_HOP, FULLBAND, extract
from .gmm import DEFAULT_RELEVANCE, adapt

N_ENROLL_SEGMENTS = 3
MIN_ENROLL_SECONDS = 48.0
# Maximal KKT violation accepted at exit (the model contract is 1e-6). The
# supervector dual is degenerate and badly conditioned, so the interior-point
# start lands around 1e-8..1e-7 and first-order steps crawl much below that.
KKT_TOLERANCE = 1e-7
_TAU = 1e-12


@dataclass(frozen=True, eq=False)
class Supervector:
    speaker_id: str
    segment_index: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class LinearSvmModel:
    speaker_id: str
    weights: np.ndarray
    bias: float
    c_param: float = 1.0
    kkt_residual: float = 0.0
    n_iterations: int = field(default=0, compare=False)

    def decision(self, x):
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias


def build_supervector(adapted, ubm, speaker_id="", segment_index=0):
    """Stack adapted means scaled by sqrt(weight) / std of the UBM component."""
    if adapted.k != ubm.k or adapted.dim != ubm.dim:
        raise ModelMismatch(f"adapted model {adapted.k}x{adapted.dim} vs UBM {ubm.k}x{ubm.dim}")
    if not (np.array_equal(adapted.weights, ubm.weights)
            and np.array_equal(adapted.variances, ubm.variances)):
        raise ModelMismatch("adapted model must share the UBM's weights and variances")
    scale = np.sqrt(ubm.weights)[:, None] / np.sqrt(ubm.variances)
    values = (scale * adapted.means).ravel()
    return Supervector(speaker_id, segment_index, values)


def supervector_from_features(ubm, features, relevance_r=DEFAULT_RELEVANCE,
                              speaker_id="", segment_index=0):
    return build_supervector(adapt(ubm, features, relevance_r), ubm, speaker_id, segment_index)


def split_enrollment(enrollment, n_segments=N_ENROLL_SEGMENTS):
    """Cut an enrollment clip into equal-duration pieces on frame-hop boundaries."""
    if enrollment.duration_s < MIN_ENROLL_SECONDS - 1e-9:
        raise InsufficientData(
            f"{enrollment.utterance_id}: {enrollment.duration_s:.2f} s enrollment, "
            f"need {MIN_ENROLL_SECONDS:g} s",
            enrollment.duration_s,
        )
    seg = (len(enrollment) // n_segments) // FRAME_HOP * FRAME_HOP
    return [
        enrollment.with_samples(enrollment.samples[i * seg:(i + 1) * seg],
                                f"{enrollment.utterance_id}-seg{i}")
        for i in range(n_segments)
    ]


def enrollment_supervectors(enrollment, ubm, band_mode=FULLBAND, relevance_r=DEFAULT_RELEVANCE):
    """Three supervectors from three equal slices of one speaker's enrollment."""
    return [
        supervector_from_features(ubm, extract(piece, band_mode), relevance_r,
                                  enrollment.speaker_id, i)
        for i, piece in enumerate(split_enrollment(enrollment))
    ]


# --------------------------------------------------------------------------
# training

def _interior_point(gram, y, c, max_iter=100, tol=1e-12):
    """Mehrotra predictor-corrector on the dual box QP.

    Gets within a few digits of the optimum in a few dozen dense Newton
    steps regardless of how badly the Gram matrix is conditioned; SMO then
    finishes from there.
    """
    n = y.size
    q = np.outer(y, y) * gram
    scale = max(1.0, float(np.max(np.abs(q))))
    a = np.full(n, 0.5 * c)
    z = np.ones(n)  # multipliers of a >= 0
    u = np.ones(n)  # multipliers of a <= C
    nu = 0.0
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, n] = y
    kkt[n, :n] = y
    for _ in range(max_iter):
        slack = c - a
        r_dual = q @ a - 1.0 - z + u + nu * y
        r_prim = y @ a
        mu = (z @ a + u @ slack) / (2 * n)
        if mu < tol * c and np.max(np.abs(r_dual)) < tol * scale and abs(r_prim) < tol * c:
            break
        kkt[:n, :n] = q
        kkt[np.arange(n), np.arange(n)] += z / a + u / slack

        def direction(target, da_dz=0.0, da_du=0.0):
            # target: complementarity goal; da_dz / da_du: Mehrotra second-order terms
            rhs = np.append(-r_dual + (target - da_dz) / a - z - (target - da_du) / slack + u, -r_prim)
            sol = np.linalg.solve(kkt, rhs)
            da = sol[:n]
            dz = (target - da_dz) / a - z - z / a * da
            du = (target - da_du) / slack - u + u / slack * da
            return da, dz, du, sol[n]

        def max_step(da, dz, du):
            ratios = [1.0]
            for v, dv in ((a, da), (slack, -da), (z, dz), (u, du)):
                neg = dv < 0
                if neg.any():
                    ratios.append(float(np.min(-v[neg] / dv[neg])))
            return min(ratios)

        da, dz, du, _ = direction(0.0)
        step = max_step(da, dz, du)
        mu_aff = ((a + step * da) @ (z + step * dz) + (slack - step * da) @ (u + step * du)) / (2 * n)
        sigma = (mu_aff / mu) ** 3
        da, dz, du, dnu = direction(sigma * mu, da * dz, -da * du)
        step = min(1.0, 0.99 * max_step(da, dz, du))
        a = a + step * da
        z = z + step * dz
        u = u + step * du
        nu = nu + step * dnu
    return a


def _smo(gram, y, c, tol=KKT_TOLERANCE, max_iter=1_000_000, alpha=None):
    """Dual soft-margin SVM with bias, second-order working set selection.

    Minimises 0.5 a'Qa - sum(a) subject to y'a = 0, 0 <= a <= C, where
    Q = (y y') * gram, optionally warm-started from a feasible ``alpha``.
    Returns (alpha, gradient, violation, iterations).
    """
    alpha = np.zeros(y.size) if alpha is None else np.array(alpha, dtype=np.float64)
    grad = (np.outer(y, y) * gram) @ alpha - 1.0
    diag = np.diag(gram)
    pos = y > 0
    it = 0
    while True:
        v = -y * grad
        up = np.where(pos, alpha < c, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < c)
        v_up = np.where(up, v, -np.inf)
        i = int(np.argmax(v_up))
        m_up = v_up[i]
        m_low = np.min(np.where(low, v, np.inf))
        gap = m_up - m_low
        if gap <= tol or it >= max_iter:
            return alpha, grad, max(gap, 0.0), it
        b = m_up - v
        cand = low & (b > 0)
        curv = diag[i] + diag - 2.0 * gram[i]
        curv = np.where(curv > 0, curv, _TAU)
        score = np.where(cand, -(b * b) / curv, np.inf)
        j = int(np.argmin(score))
        # move along a_i += y_i t, a_j -= y_j t
        t = b[j] / curv[j]
        cap_i = c - alpha[i] if pos[i] else alpha[i]
        cap_j = alpha[j] if pos[j] else c - alpha[j]
        t = min(t, cap_i, cap_j)
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        for idx, cap in ((i, cap_i), (j, cap_j)):
            if t == cap:
                alpha[idx] = c if (idx == i) == pos[idx] else 0.0
        alpha[i] = min(max(alpha[i], 0.0), c)
        alpha[j] = min(max(alpha[j], 0.0), c)
        grad += t * y * (gram[:, i] - gram[:, j])
        it += 1


def _snap(alpha, y, c, eps=1e-9):
    """Round near-bound multipliers onto the bounds, then repair y'a = 0 using
    the free multipliers so that SMO can start from a feasible point."""
    a = np.clip(alpha, 0.0, c)
    a[a < eps * c] = 0.0
    a[a > (1 - eps) * c] = c
    excess = y @ a
    free = (a > 0) & (a < c)
    if free.any() and excess != 0.0:
        a[free] = np.clip(a[free] - y[free] * excess / free.sum(), 0.0, c)
    return a if abs(y @ a) <= 1e-12 * max(1.0, c * y.size) else None


def _bias(alpha, grad, y, c):
    v = -y * grad
    free = (alpha > 0) & (alpha < c)
    if np.any(free):
        return float(np.mean(v[free]))
    pos = y > 0
    lower = np.where((pos & (alpha <= 0)) | (~pos & (alpha >= c)), v, -np.inf).max()
    upper = np.where((~pos & (alpha <= 0)) | (pos & (alpha >= c)), v, np.inf).min()
    if np.isfinite(lower) and np.isfinite(upper):
        return float(0.5 * (lower + upper))
    return float(lower if np.isfinite(lower) else upper)


def train_svm(x, y, c_param=1.0, speaker_id="", tol=KKT_TOLERANCE):
    """Linear soft-margin SVM on rows of ``x`` with labels +/-1."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if c_param <= 0:
        raise ValueError("C must be positive")
    if np.all(x == x[0]):
        raise DegenerateData("all training points are identical")
    gram = x @ x.T
    start = _snap(_interior_point(gram, y, float(c_param)), y, float(c_param))
    alpha, grad, residual, iters = _smo(gram, y, float(c_param), tol, alpha=start)
    weights = (alpha * y) @ x
    bias = _bias(alpha, grad, y, float(c_param))
    residual = max(residual, abs(float(alpha @ y)))
    return LinearSvmModel(speaker_id, weights, bias, float(c_param), residual, iters)


def train_one_vs_rest(target, background, c_param=1.0):
    """One speaker's SVM: its supervectors labelled +1, everyone else's -1."""
    if not target or not background:
        raise ValueError("need at least one target and one background supervector")
    length = target[0].values.size
    if any(sv.values.size != length for sv in (*target, *background)):
        raise DimMismatch("supervectors differ in length")
    x = np.stack([sv.values for sv in target] + [sv.values for sv in background])
    y = np.concatenate([np.ones(len(target)), -np.ones(len(background))])
    return train_svm(x, y, c_param, speaker_id=target[0].speaker_id)


def svm_score(model, sv):
    values = sv.values if isinstance(sv, Supervector) else np.asarray(sv, dtype=np.float64)
    if values.size != model.weights.size:
        raise DimMismatch(f"supervector length {values.size}, model expects {model.weights.size}")
    return float(values @ model.weights + model.bias)


def primal_objective(model, x, y):
    margins = y * (np.asarray(x) @ model.weights + model.bias)
    return float(0.5 * model.weights @ model.weights
                 + model.c_param * np.maximum(0.0, 1.0 - margins).sum())


# --------------------------------------------------------------------------
# model file

_SVM_MAGIC = b"KSVM"
_SVM_VERSION = 1
_SVM_HEADER = struct.Struct("<4sII")


def save_svm(path, model):
    """Header, weights, bias, KKT residual, C; all little-endian float64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tail = np.array([model.bias, model.kkt_residual, model.c_param], dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_SVM_HEADER.pack(_SVM_MAGIC, _SVM_VERSION, model.weights.size))
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
        fh.write(tail.tobytes())


def load_svm(path, speaker_id=None):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _SVM_HEADER.size:
        raise BadModelFile(f"{path}: truncated SVM header")
    magic, version, length = _SVM_HEADER.unpack_from(data)
    if magic != _SVM_MAGIC or version != _SVM_VERSION:
        raise BadModelFile(f"{path}: not a KSVM v{_SVM_VERSION} file")
    if len(data) != _SVM_HEADER.size + 8 * (length + 3):
        raise BadModelFile(f"{path}: expected {length + 3} values after the header")
    body = np.frombuffer(data, dtype="<f8", offset=_SVM_HEADER.size)
    weights = body[:length].astype(np.float64)
    bias, residual, c = body[length:]
    return LinearSvmModel(speaker_id if speaker_id is not None else path.stem,
                          weights, float(bias), float(c), float(residual))
