"""Diagonal-covariance Gaussian mixtures: UBM training by binary-splitting
EM, mean-only MAP adaptation and average log-likelihood scoring.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import BadModelFile, DimMismatch, NonFiniteInput, TooFewFrames
from .features import FeatureMatrix

LOG_2PI = np.log(2.0 * np.pi)
VARIANCE_FLOOR_RATIO = 1e-3
MIN_VARIANCE = 1e-8  # absolute floor for dimensions with (near) zero global variance
SPLIT_OFFSET = 0.2
EM_ITERATIONS = 10
FINAL_MAX_ITERATIONS = 100
FINAL_TOLERANCE = 1e-4  # per-frame log-likelihood gain that ends the last stage
DEFAULT_RELEVANCE = 16.0
_DEAD_COUNT = 1e-10


@dataclass(frozen=True, eq=False)
class DiagGmm:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, dim)
    variances: np.ndarray  # (k, dim)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        mu = np.array(self.means, dtype=np.float64)
        var = np.array(self.variances, dtype=np.float64)
        if mu.ndim != 2 or var.shape != mu.shape or w.shape != (mu.shape[0],):
            raise ValueError(f"inconsistent shapes {w.shape}, {mu.shape}, {var.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise NonFiniteInput("GMM parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        for arr in (w, mu, var):
            arr.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def k(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]


@dataclass(frozen=True, eq=False)
class SufficientStats:
    n: np.ndarray  # soft counts, (k,)
    first_moment: np.ndarray  # (k, dim)


def _frames_of(features, dim=None):
    """Stack FeatureMatrix objects / arrays into one (T, dim) float array.

    An empty collection yields a (0, dim) array when ``dim`` is given.
    """
    if isinstance(features, FeatureMatrix):
        return features.values
    if isinstance(features, np.ndarray):
        return np.atleast_2d(np.asarray(features, dtype=np.float64))
    parts = [_frames_of(f) for f in features]
    if not parts:
        if dim is None:
            raise TooFewFrames("no feature frames")
        return np.zeros((0, dim))
    return np.concatenate(parts, axis=0)


def _check_dims(gmm, x):
    if x.shape[1] != gmm.dim:
        raise DimMismatch(f"features have dim {x.shape[1]}, model has dim {gmm.dim}")


def _augment(x):
    """[x, x*x, 1] so a single GEMM evaluates every Gaussian's quadratic form."""
    return np.hstack([x, x * x, np.ones((x.shape[0], 1))])


def _projection(gmm):
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    inv_var = 1.0 / gmm.variances
    const = log_w - 0.5 * (gmm.dim * LOG_2PI + np.log(gmm.variances).sum(axis=1)
                           + np.sum(gmm.means ** 2 * inv_var, axis=1))
    return np.vstack([(gmm.means * inv_var).T, -0.5 * inv_var.T, const[None, :]])


def weighted_log_densities(gmm, x, augmented=None):
    """(T, k) matrix of ln w_k + ln N(x_t; mu_k, var_k)."""
    if augmented is None:
        augmented = _augment(np.asarray(x, dtype=np.float64))
    return augmented @ _projection(gmm)


def frame_log_likelihoods(gmm, features):
    x = _frames_of(features)
    _check_dims(gmm, x)
    return logsumexp(weighted_log_densities(gmm, x), axis=1)


def log_likelihood(gmm, features):
    """Average per-frame log-likelihood over all components."""
    x = _frames_of(features)
    _check_dims(gmm, x)
    if x.shape[0] == 0:
        raise TooFewFrames("cannot score zero frames")
    return float(np.mean(frame_log_likelihoods(gmm, x)))


def _posteriors(gmm, x, augmented=None):
    gamma = weighted_log_densities(gmm, x, augmented)
    peak = gamma.max(axis=1, keepdims=True)
    gamma -= peak
    np.exp(gamma, out=gamma)
    total = gamma.sum(axis=1, keepdims=True)
    gamma /= total
    return gamma, (peak + np.log(total))[:, 0]


def _em_step(gmm, x, floor, augmented):
    """One EM iteration. Returns the total log-likelihood of ``gmm`` and the update."""
    gamma, ll = _posteriors(gmm, x, augmented)
    stats = gamma.T @ augmented  # first moments, second moments, counts
    d = gmm.dim
    n = stats[:, 2 * d]
    live = n > _DEAD_COUNT
    means = np.array(gmm.means)
    variances = np.array(gmm.variances)
    means[live] = stats[live, :d] / n[live, None]
    variances[live] = stats[live, d:2 * d] / n[live, None] - means[live] ** 2
    variances = np.maximum(variances, floor)
    weights = n / n.sum()
    return float(np.sum(ll)), DiagGmm(weights, means, variances)


def _split(gmm, direction):
    offset = SPLIT_OFFSET * np.sqrt(gmm.variances) * direction
    means = np.empty((2 * gmm.k, gmm.dim))
    means[0::2] = gmm.means - offset
    means[1::2] = gmm.means + offset
    weights = np.repeat(gmm.weights / 2.0, 2)
    variances = np.repeat(gmm.variances, 2, axis=0)
    return DiagGmm(weights / weights.sum(), means, variances)


def train_ubm(features, k, seed=0, iterations=EM_ITERATIONS, trace=None,
              final_max_iterations=FINAL_MAX_ITERATIONS, final_tolerance=FINAL_TOLERANCE):
    """Train a diagonal GMM with ``k`` components by binary splitting.

    Starts from the single global Gaussian; each stage splits every
    component into two means offset by +/- 0.2 standard deviations along a
    seeded sign pattern and runs ``iterations`` EM steps. The last stage
    keeps iterating until the per-frame log-likelihood gain drops below
    ``final_tolerance`` (at most ``final_max_iterations`` steps): a freshly
    split symmetric pair can sit near a saddle for dozens of iterations.
    Variances are floored at 1e-3 times the global per-dimension variance.

    If ``trace`` is a list, one ``(n_components, iteration, total_loglik)``
    tuple is appended per EM iteration, plus a final entry per stage for the
    model the stage ends with.
    """
    if k < 1 or k & (k - 1):
        raise ValueError(f"component count {k} is not a power of two")
    x = _frames_of(features)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("features contain non-finite values")
    if x.shape[0] < 10 * k:
        raise TooFewFrames(f"{x.shape[0]} frames, need at least {10 * k} for {k} components")

    n_frames = x.shape[0]
    mean = x.mean(axis=0)
    var = np.mean((x - mean) ** 2, axis=0)
    floor = np.maximum(VARIANCE_FLOOR_RATIO * var, MIN_VARIANCE)
    gmm = DiagGmm(np.ones(1), mean[None, :], np.maximum(var, floor)[None, :])
    rng = np.random.default_rng(seed)
    augmented = _augment(x)
    while gmm.k < k:
        gmm = _split(gmm, rng.choice([-1.0, 1.0], size=gmm.dim))
        last_stage = gmm.k == k
        budget = max(iterations, final_max_iterations) if last_stage else iterations
        previous = None
        for it in range(budget):
            total, gmm = _em_step(gmm, x, floor, augmented)
            if trace is not None:
                trace.append((gmm.k, it, total))
            if it + 1 >= iterations and (not last_stage or (
                    previous is not None and (total - previous) / n_frames < final_tolerance)):
                break
            previous = total
        if trace is not None:
            trace.append((gmm.k, it + 1, float(np.sum(frame_log_likelihoods(gmm, x)))))
    return gmm


def accumulate_stats(ubm, features):
    x = _frames_of(features, dim=ubm.dim)
    _check_dims(ubm, x)
    if x.shape[0] == 0:
        return SufficientStats(np.zeros(ubm.k), np.zeros((ubm.k, ubm.dim)))
    gamma, _ = _posteriors(ubm, x)
    return SufficientStats(gamma.sum(axis=0), gamma.T @ x)


def map_adapt(ubm, stats, relevance_r=DEFAULT_RELEVANCE):
    """Mean-only MAP adaptation; weights and variances are the UBM's."""
    if relevance_r < 0:
        raise ValueError("relevance factor must be nonnegative")
    n = np.asarray(stats.n, dtype=np.float64)
    means = np.array(ubm.means)
    live = n > 0
    alpha = n[live] / (n[live] + relevance_r)
    data_mean = stats.first_moment[live] / n[live, None]
    means[live] = alpha[:, None] * data_mean + (1.0 - alpha[:, None]) * ubm.means[live]
    return DiagGmm(ubm.weights, means, ubm.variances)


def adapt(ubm, features, relevance_r=DEFAULT_RELEVANCE):
    return map_adapt(ubm, accumulate_stats(ubm, features), relevance_r)


# --------------------------------------------------------------------------
# model file

_GMM_MAGIC = b"KSGM"
_GMM_VERSION = 1
_GMM_HEADER = struct.Struct("<4sIII")


def save_gmm(path, gmm):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_GMM_HEADER.pack(_GMM_MAGIC, _GMM_VERSION, gmm.k, gmm.dim))
        for arr in (gmm.weights, gmm.means, gmm.variances):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_gmm(path):
    data = Path(path).read_bytes()
    if len(data) < _GMM_HEADER.size:
        raise BadModelFile(f"{path}: truncated GMM header")
    magic, version, k, dim = _GMM_HEADER.unpack_from(data)
    if magic != _GMM_MAGIC or version != _GMM_VERSION:
        raise BadModelFile(f"{path}: not a KSGM v{_GMM_VERSION} file")
    n_values = k + 2 * k * dim
    if len(data) != _GMM_HEADER.size + 8 * n_values:
        raise BadModelFile(f"{path}: expected {n_values} values after the header")
    body = np.frombuffer(data, dtype="<f8", offset=_GMM_HEADER.size)
    w = body[:k]
    mu = body[k:k + k * dim].reshape(k, dim)
    var = body[k + k * dim:].reshape(k, dim)
    return DiagGmm(w, mu, var)
