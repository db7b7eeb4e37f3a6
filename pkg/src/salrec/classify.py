"""Chi-squared kernels, one-vs-rest kernel SVMs, and two-kernel fusion.

The SVM dual is solved over precomputed kernels with most-violating-pair
coordinate updates. Kernel fusion learns the convex combination weight of
two kernels by cross-validated grid search and retrains on the winner.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .encoding import SpmVector
from .errors import DataError

_SMKL_MAGIC = b"SMKL"

# Stopping rule: maximal KKT violation below this, or the iteration cap.
# 1e-6 is deliberately tighter than the 1e-3 contract bound so the dual
# objective lands within 1e-6 of an exact QP solution on small problems.
_SVM_TOL = 1e-6
_SVM_MAX_ITER = 100_000
_BOX_EPS = 1e-12


def _as_matrix(X) -> np.ndarray:
    if isinstance(X, np.ndarray):
        arr = X.astype(np.float64, copy=False)
    else:
        rows = [v.values if isinstance(v, SpmVector) else np.asarray(v, dtype=np.float64) for v in X]
        arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D stack of feature vectors")
    return arr


def chi2_distance(x, y) -> float:
    """Sum of (x_i - y_i)^2 / (x_i + y_i); terms with zero denominator drop out."""
    xv = x.values if isinstance(x, SpmVector) else np.asarray(x, dtype=np.float64)
    yv = y.values if isinstance(y, SpmVector) else np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape:
        raise ValueError(f"length mismatch: {xv.shape} vs {yv.shape}")
    if xv.size and (xv.min() < 0 or yv.min() < 0):
        raise ValueError("chi-squared distance requires non-negative entries")
    num = (xv - yv) ** 2
    den = xv + yv
    mask = den > 0
    return float((num[mask] / den[mask]).sum())


def _chi2_distance_matrix(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    n, d = X.shape
    m = Y.shape[0]
    out = np.empty((n, m))
    chunk = max(1, int(3e7 / max(1, m * d)))
    for lo in range(0, n, chunk):
        xb = X[lo : lo + chunk][:, None, :]
        num = xb - Y[None, :, :]
        np.square(num, out=num)
        den = xb + Y[None, :, :]
        np.divide(num, den, out=num, where=den > 0)
        out[lo : lo + chunk] = num.sum(axis=2)
    return out


@dataclass(frozen=True)
class KernelMatrix:
    """Precomputed kernel values plus the bandwidth that generated them."""

    values: np.ndarray
    bandwidth: float | None = None

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("kernel matrix must be 2-D")
        self.values.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def chi2_kernel_matrix(X, Y=None, bandwidth: float | None = None) -> KernelMatrix:
    """Exponentiated chi-squared kernel: k(x, y) = exp(-chi2(x, y) / (2A)).

    With ``Y=None`` a square training kernel is built and, unless given,
    A is set to the mean chi-squared distance over distinct training
    pairs (A := 1 when that mean is zero). Cross kernels must reuse the
    training bandwidth.
    """
    Xm = _as_matrix(X)
    if Xm.size and Xm.min() < 0:
        raise ValueError("chi-squared kernel requires non-negative entries")
    if bandwidth is not None and bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if Y is None:
        D = _chi2_distance_matrix(Xm, Xm)
        if bandwidth is None:
            n = Xm.shape[0]
            if n > 1:
                iu = np.triu_indices(n, k=1)
                mean_d = float(D[iu].mean())
            else:
                mean_d = 0.0
            bandwidth = mean_d if mean_d > 0 else 1.0
    else:
        if bandwidth is None:
            raise ValueError("cross kernels must reuse the training bandwidth")
        Ym = _as_matrix(Y)
        if Ym.size and Ym.min() < 0:
            raise ValueError("chi-squared kernel requires non-negative entries")
        if Xm.shape[1] != Ym.shape[1]:
            raise ValueError("vector length mismatch between X and Y")
        D = _chi2_distance_matrix(Xm, Ym)
    K = np.exp(-D / (2.0 * bandwidth))
    return KernelMatrix(values=K, bandwidth=float(bandwidth))


def combine_kernels(ks: KernelMatrix, kns: KernelMatrix, alpha: float) -> KernelMatrix:
    """Convex combination alpha*Ks + (1-alpha)*Kns, elementwise."""
    if ks.values.shape != kns.values.shape:
        raise ValueError("kernel shapes differ")
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    return KernelMatrix(values=alpha * ks.values + (1.0 - alpha) * kns.values)


# ---------------------------------------------------------------------------
# SVM


@dataclass
class SvmModel:
    """One-vs-rest kernel SVM: per-class support vectors over the training set."""

    n_classes: int
    n_train: int
    C: float
    sv_indices: list[np.ndarray]
    dual_coefs: list[np.ndarray]  # signed alpha_i * y_i
    biases: np.ndarray


def _kernel_values(K) -> np.ndarray:
    return K.values if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)


def _solve_binary(
    K: np.ndarray,
    y: np.ndarray,
    C: float,
    tol: float = _SVM_TOL,
    max_iter: int = _SVM_MAX_ITER,
    trace: list | None = None,
):
    """Most-violating-pair dual ascent for the soft-margin kernel SVM.

    Returns (alpha, bias). ``trace``, when given, records the dual
    objective after every update (tests assert it never decreases).
    """
    n = K.shape[0]
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of the minimization objective
    v = -y * grad

    pos = y > 0
    for _ in range(max_iter):
        up = (pos & (alpha < C - _BOX_EPS)) | (~pos & (alpha > _BOX_EPS))
        low = (pos & (alpha > _BOX_EPS)) | (~pos & (alpha < C - _BOX_EPS))
        if not up.any() or not low.any():
            break
        vi = np.where(up, v, -np.inf)
        vj = np.where(low, v, np.inf)
        i = int(np.argmax(vi))
        j = int(np.argmin(vj))
        gap = v[i] - v[j]
        if gap < tol:
            break
        quad = max(K[i, i] + K[j, j] - 2.0 * K[i, j], 1e-12)
        t = gap / quad
        cap_i = (C - alpha[i]) if pos[i] else alpha[i]
        cap_j = alpha[j] if pos[j] else (C - alpha[j])
        t = min(t, cap_i, cap_j)
        alpha[i] += t if pos[i] else -t
        alpha[j] -= t if pos[j] else -t
        np.clip(alpha, 0.0, C, out=alpha)
        dv = t * (K[:, i] - K[:, j])
        v -= dv
        if trace is not None:
            grad_now = -v * y
            obj = alpha.sum() - 0.5 * float(alpha @ (grad_now + 1.0))
            trace.append(obj)

    up = (pos & (alpha < C - _BOX_EPS)) | (~pos & (alpha > _BOX_EPS))
    low = (pos & (alpha > _BOX_EPS)) | (~pos & (alpha < C - _BOX_EPS))
    free = (alpha > _BOX_EPS) & (alpha < C - _BOX_EPS)
    if free.any():
        bias = float(v[free].mean())
    elif up.any() and low.any():
        bias = float((v[up].max() + v[low].min()) / 2.0)
    else:
        bias = 0.0
    return alpha, bias


def dual_objective(K: np.ndarray, y: np.ndarray, alpha: np.ndarray) -> float:
    """Value of the (maximized) dual: sum(alpha) - 1/2 alpha' Q alpha."""
    q = (K * np.outer(y, y)) @ alpha
    return float(alpha.sum() - 0.5 * alpha @ q)


def train_svm(K, labels, C: float = 10.0, tol: float = _SVM_TOL, max_iter: int = _SVM_MAX_ITER) -> SvmModel:
    """Train one binary SVM per class (one-vs-rest) on a precomputed kernel."""
    Kv = _kernel_values(K)
    if Kv.shape[0] != Kv.shape[1]:
        raise ValueError("training kernel must be square")
    if float(np.abs(Kv - Kv.T).max()) > 1e-8:
        raise ValueError("training kernel must be symmetric (tolerance 1e-8)")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape[0] != Kv.shape[0]:
        raise ValueError("labels length must match kernel size")
    n_classes = int(labels.max()) + 1
    present = np.bincount(labels, minlength=n_classes)
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    missing = np.flatnonzero(present == 0)
    if missing.size:
        raise ValueError(f"class {int(missing[0])} is absent from the labels")
    if C <= 0:
        raise ValueError("C must be positive")

    sv_indices, dual_coefs, biases = [], [], []
    for c in range(n_classes):
        y = np.where(labels == c, 1.0, -1.0)
        alpha, bias = _solve_binary(Kv, y, C, tol=tol, max_iter=max_iter)
        sv = np.flatnonzero(alpha > _BOX_EPS)
        sv_indices.append(sv)
        dual_coefs.append(alpha[sv] * y[sv])
        biases.append(bias)
    return SvmModel(
        n_classes=n_classes,
        n_train=Kv.shape[0],
        C=C,
        sv_indices=sv_indices,
        dual_coefs=dual_coefs,
        biases=np.asarray(biases),
    )


def decision_values(model: SvmModel, K_test) -> np.ndarray:
    """Per-class decision values, shape (n_test, n_classes)."""
    Kv = _kernel_values(K_test)
    if Kv.shape[1] != model.n_train:
        raise ValueError(f"test kernel has {Kv.shape[1]} columns, expected {model.n_train}")
    out = np.empty((Kv.shape[0], model.n_classes))
    for c in range(model.n_classes):
        out[:, c] = Kv[:, model.sv_indices[c]] @ model.dual_coefs[c] + model.biases[c]
    return out


def predict(model: SvmModel, K_test) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class ids (argmax decision, ties to the lowest id) and decisions."""
    dec = decision_values(model, K_test)
    return np.argmax(dec, axis=1), dec


# ---------------------------------------------------------------------------
# Two-kernel fusion


@dataclass
class MklModel:
    """Learned convex combination of two kernels plus the SVM trained on it."""

    alpha: float
    svm: SvmModel
    bandwidths: tuple[float, float]


def stratified_folds(labels: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Deterministic stratified folds: per class, shuffle then deal round-robin."""
    labels = np.asarray(labels)
    folds: list[list[int]] = [[] for _ in range(k)]
    rng = np.random.default_rng(seed)
    for c in np.unique(labels):
        ids = np.flatnonzero(labels == c)
        perm = rng.permutation(len(ids))
        for pos, j in enumerate(perm):
            folds[pos % k].append(int(ids[j]))
    return [np.array(sorted(f), dtype=np.intp) for f in folds]


def _grid(step: float) -> list[float]:
    n = int(round(1.0 / step))
    return [i / n for i in range(n + 1)]


def _cv_accuracy(Kstar: np.ndarray, labels: np.ndarray, C: float, folds: list[np.ndarray]) -> float:
    accs = []
    all_idx = np.arange(len(labels))
    for te in folds:
        tr = np.setdiff1d(all_idx, te)
        model = train_svm(Kstar[np.ix_(tr, tr)], labels[tr], C=C)
        pred, _ = predict(model, Kstar[np.ix_(te, tr)])
        accs.append(float((pred == labels[te]).mean()))
    return float(np.mean(accs))


def train_mkl(
    ks: KernelMatrix,
    kns: KernelMatrix,
    labels,
    C: float = 10.0,
    grid_step: float = 0.05,
    seed: int = 0,
) -> MklModel:
    """Pick the combination weight by cross-validated grid search.

    Every grid value of alpha is scored with seeded stratified 3-fold
    cross-validation; ties prefer the value nearest 0.5, then the lower
    one. If some class has fewer than 3 items the search falls back to
    2-fold CV, and below that to picking the alpha whose fully-trained
    models have the smallest summed dual objective.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if ks.values.shape != kns.values.shape:
        raise ValueError("kernel shapes differ")
    if ks.values.shape[0] != len(labels):
        raise ValueError("labels length must match kernel size")
    counts = np.bincount(labels)
    min_count = int(counts[counts > 0].min())

    alphas = _grid(grid_step)
    scored: list[tuple[float, float]] = []  # (alpha, score)

    if min_count >= 2:
        k = 3 if min_count >= 3 else 2
        if k == 2:
            warnings.warn("a class has fewer than 3 items; falling back to 2-fold CV")
        folds = stratified_folds(labels, k, seed)
        for a in alphas:
            Kstar = combine_kernels(ks, kns, a).values
            scored.append((a, _cv_accuracy(Kstar, labels, C, folds)))
        best = max(
            scored,
            key=lambda t: (t[1], -round(abs(t[0] - 0.5), 9), -t[0]),
        )
    else:
        warnings.warn(
            "a class has a single item; selecting alpha by the training objective"
        )
        for a in alphas:
            Kstar = combine_kernels(ks, kns, a).values
            total = 0.0
            for c in range(int(labels.max()) + 1):
                y = np.where(labels == c, 1.0, -1.0)
                alpha_vec, _ = _solve_binary(Kstar, y, C)
                total += dual_objective(Kstar, y, alpha_vec)
            scored.append((a, -total))  # lower objective is better
        best = max(scored, key=lambda t: (t[1], -round(abs(t[0] - 0.5), 9), -t[0]))

    alpha_star = best[0]
    svm = train_svm(combine_kernels(ks, kns, alpha_star), labels, C=C)
    bw = (ks.bandwidth if ks.bandwidth is not None else 1.0,
          kns.bandwidth if kns.bandwidth is not None else 1.0)
    return MklModel(alpha=alpha_star, svm=svm, bandwidths=bw)


# ---------------------------------------------------------------------------
# Model file format


def save_model(model: MklModel, path) -> None:
    """Write a fusion model: magic, alpha, both bandwidths, per-class SVs."""
    svm = model.svm
    with open(path, "wb") as fh:
        fh.write(_SMKL_MAGIC)
        fh.write(struct.pack("<ddd", model.alpha, model.bandwidths[0], model.bandwidths[1]))
        fh.write(struct.pack("<I", svm.n_classes))
        for c in range(svm.n_classes):
            sv = svm.sv_indices[c]
            coef = svm.dual_coefs[c]
            fh.write(struct.pack("<I", len(sv)))
            for idx, co in zip(sv, coef):
                fh.write(struct.pack("<Id", int(idx), float(co)))
            fh.write(struct.pack("<d", float(svm.biases[c])))


def load_model(path, n_train: int | None = None, C: float = 10.0) -> MklModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SMKL_MAGIC:
            raise DataError(f"not a model file (bad magic): {path}")
        try:
            alpha, bw_s, bw_ns = struct.unpack("<ddd", fh.read(24))
            (n_classes,) = struct.unpack("<I", fh.read(4))
            sv_indices, dual_coefs, biases = [], [], []
            for _ in range(n_classes):
                (n_sv,) = struct.unpack("<I", fh.read(4))
                idx = np.empty(n_sv, dtype=np.intp)
                coef = np.empty(n_sv)
                for i in range(n_sv):
                    idx[i], coef[i] = struct.unpack("<Id", fh.read(12))
                sv_indices.append(idx)
                dual_coefs.append(coef)
                (b,) = struct.unpack("<d", fh.read(8))
                biases.append(b)
        except struct.error as exc:
            raise DataError(f"truncated model file: {path}") from exc
    max_idx = max((int(i.max()) + 1 for i in sv_indices if len(i)), default=0)
    svm = SvmModel(
        n_classes=n_classes,
        n_train=n_train if n_train is not None else max_idx,
        C=C,
        sv_indices=sv_indices,
        dual_coefs=dual_coefs,
        biases=np.asarray(biases),
    )
    return MklModel(alpha=alpha, svm=svm, bandwidths=(bw_s, bw_ns))
