"""
Classical out-of-distribution baselines over frame embeddings.

- PCA by eigendecomposition of the sample covariance
- Gaussian mixture fitted by EM in PCA coordinates
- scorers: mixture negative log-likelihood, minimum component Mahalanobis
  distance, linear reconstruction error, and externally supplied scores
- quantile threshold calibration on nominal scores

All covariances use the maximum-likelihood (1/n) normalisation. Fitted
models are immutable; scoring is a pure function of (model, vector).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from .episodes import Classification, Episode, Frame, MonitorVerdict
from .exceptions import (
    CalibrationError,
    ConfigError,
    DimensionMismatchError,
    ModelError,
    ModelFitError,
)
from .logging_utils import WarningTally, get_logger, log_fit_stats

logger = get_logger("baselines")
tally = WarningTally("baselines")

FORMAT_VERSION = 1
SCORE_KINDS = ("gmm_nll", "mahalanobis_min", "recon_error")
EXTERNAL_PREFIX = "external:"
DEFAULT_PCA_DIM = 32
DEFAULT_N_COMPONENTS = 5
COMPONENT_CANDIDATES = (1, 2, 5, 10)
EMPTY_COMPONENT_MASS = 1e-8

LOG_2PI = math.log(2.0 * math.pi)

ArrayLike = Union[np.ndarray, Sequence[Sequence[float]]]


def _as_matrix(vectors: ArrayLike, model: str) -> np.ndarray:
    data = np.asarray(vectors, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ModelFitError(f"{model} needs a nonempty list of vectors", model=model)
    if not np.all(np.isfinite(data)):
        raise ModelFitError(f"{model} input contains non-finite values", model=model)
    return data


def _as_vector(x: Any, dim: int, model: str) -> np.ndarray:
    vec = np.asarray(x, dtype=np.float64).reshape(-1)
    if vec.shape[0] != dim:
        raise DimensionMismatchError(dim, vec.shape[0], model)
    return vec


def sample_covariance(data: np.ndarray) -> np.ndarray:
    centered = data - data.mean(axis=0)
    return (centered.T @ centered) / data.shape[0]


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    """Rank-k linear subspace: rows of ``components`` are principal directions"""

    mean: np.ndarray
    components: np.ndarray
    explained_variances: np.ndarray

    def __post_init__(self) -> None:
        for name in ("mean", "components", "explained_variances"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.components.ndim != 2 or self.components.shape[1] != self.mean.shape[0]:
            raise ModelError(
                f"PCA components must be k x {self.mean.shape[0]}, got {self.components.shape}"
            )
        if self.explained_variances.shape[0] != self.components.shape[0]:
            raise ModelError("PCA needs one explained variance per component")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def k(self) -> int:
        return int(self.components.shape[0])

    def project(self, x: Any) -> np.ndarray:
        return (_as_vector(x, self.dim, "pca") - self.mean) @ self.components.T

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.components + self.mean


def fit_pca(vectors: ArrayLike, k: int) -> PcaModel:
    """
    Top-k principal directions of the sample covariance.

    Each direction's sign is fixed so its largest-magnitude entry is
    positive, which keeps saved models stable across runs.

    Raises:
        ModelFitError: n < 2, k outside [1, min(n-1, d)], or all inputs identical
    """
    data = _as_matrix(vectors, "pca")
    n, d = data.shape
    if n < 2:
        raise ModelFitError(f"PCA needs at least 2 vectors, got {n}", model="pca")
    if not 1 <= k <= min(n - 1, d):
        raise ModelFitError(
            f"PCA dimension k={k} out of range [1, {min(n - 1, d)}] for n={n}, d={d}",
            model="pca",
            k=k,
        )

    cov = sample_covariance(data)
    if float(np.trace(cov)) <= 0.0:
        raise ModelFitError("PCA input is degenerate: all vectors are identical", model="pca")

    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:k]
    components = eigenvectors[:, order].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    variances = np.clip(eigenvalues[order], 0.0, None)

    model = PcaModel(data.mean(axis=0), components, variances)
    retained = float(variances.sum() / np.clip(eigenvalues, 0.0, None).sum())
    log_fit_stats("pca", {"n": n, "d": d, "k": k, "retained_variance": round(retained, 4)})
    return model


def score_recon_error(pca: PcaModel, x: Any) -> float:
    """Squared distance between x and its rank-k reconstruction"""
    centered = _as_vector(x, pca.dim, "pca") - pca.mean
    residual = centered - (centered @ pca.components.T) @ pca.components
    return float(residual @ residual)


# ---------------------------------------------------------------------------
# Gaussian mixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianMixtureModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    fit_log: Tuple[float, ...] = ()
    reg_covar: float = 0.0
    _cholesky: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        for name in ("weights", "means", "covariances"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "fit_log", tuple(float(v) for v in self.fit_log))
        K = self.weights.shape[0]
        if K < 1 or self.means.ndim != 2 or self.means.shape[0] != K:
            raise ModelError(f"GMM needs K >= 1 means matching {K} weights")
        k = self.means.shape[1]
        if self.covariances.shape != (K, k, k):
            raise ModelError(f"GMM covariances must be {K} x {k} x {k}")
        if np.any(self.weights < 0) or abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ModelError("GMM weights must be nonnegative and sum to 1")
        try:
            chol = np.stack(
                [scipy.linalg.cholesky(cov, lower=True) for cov in self.covariances]
            )
        except np.linalg.LinAlgError as e:
            raise ModelError(f"GMM covariance is not positive definite: {e}") from e
        object.__setattr__(self, "_cholesky", chol)

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def component_log_densities(self, data: np.ndarray) -> np.ndarray:
        """n x K matrix of log N(x_i; mu_j, Sigma_j)"""
        n, k = data.shape
        out = np.empty((n, self.n_components))
        for j in range(self.n_components):
            L = self._cholesky[j]
            soln = scipy.linalg.solve_triangular(L, (data - self.means[j]).T, lower=True)
            log_det = 2.0 * np.sum(np.log(np.diag(L)))
            out[:, j] = -0.5 * (k * LOG_2PI + log_det + np.sum(soln**2, axis=0))
        return out

    def mahalanobis(self, x: np.ndarray) -> np.ndarray:
        """Distance from x to every component mean"""
        distances = np.empty(self.n_components)
        for j in range(self.n_components):
            soln = scipy.linalg.solve_triangular(self._cholesky[j], x - self.means[j], lower=True)
            distances[j] = math.sqrt(float(soln @ soln))
        return distances

    def log_likelihood(self, data: np.ndarray) -> float:
        weighted = self.component_log_densities(data) + _log_weights(self.weights)
        return float(np.sum(logsumexp(weighted, axis=1)))


def _log_weights(weights: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(weights)


def _kmeans_plus_plus(data: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centers = [data[int(rng.integers(n))]]
    for _ in range(1, K):
        d2 = np.min([np.sum((data - c) ** 2, axis=1) for c in centers], axis=0)
        total = float(d2.sum())
        if total <= 0.0:
            centers.append(data[int(rng.integers(n))])
        else:
            centers.append(data[int(rng.choice(n, p=d2 / total))])
    return np.array(centers)


def _covariance_penalty(covariances: np.ndarray, strength: float) -> float:
    # prior term -(strength/2) * sum_j tr(Sigma_j^-1)
    if strength == 0.0:
        return 0.0
    return -0.5 * strength * sum(float(np.trace(np.linalg.inv(c))) for c in covariances)


def fit_gmm(
    vectors: ArrayLike,
    K: int = DEFAULT_N_COMPONENTS,
    max_iter: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
    covariance_prior: bool = False,
) -> GaussianMixtureModel:
    """
    Fit a K-component full-covariance mixture by EM.

    Every M-step adds ``reg_covar * I`` to each component covariance, with
    ``reg_covar = 1e-6 * trace(data covariance) / k``, and ``fit_log`` holds
    the log-likelihood after each iteration. With ``covariance_prior`` the
    addition becomes a weak prior instead, ``reg_covar * n / N_j`` on the
    diagonal of component j (exactly ``reg_covar`` at K=1), and ``fit_log``
    holds the prior-penalised log-likelihood, which EM never decreases. A
    component left with no responsibility mass is reinitialised at a random
    data point.

    Raises:
        ModelFitError: K < 1 or fewer vectors than components
    """
    data = _as_matrix(vectors, "gmm")
    n, k = data.shape
    if K < 1:
        raise ModelFitError(f"GMM needs K >= 1, got {K}", model="gmm")
    if n < K:
        raise ModelFitError(f"GMM with K={K} needs at least {K} vectors, got {n}", model="gmm")

    rng = np.random.default_rng(seed)
    data_cov = sample_covariance(data)
    trace = float(np.trace(data_cov))
    reg = 1e-6 * trace / k if trace > 0 else 1e-6
    strength = reg * n if covariance_prior else 0.0
    eye = np.eye(k)

    weights = np.full(K, 1.0 / K)
    means = _kmeans_plus_plus(data, K, rng)
    covariances = np.stack([data_cov + reg * eye for _ in range(K)])

    fit_log: List[float] = []
    reinitialized = 0
    converged = False
    for _ in range(max_iter):
        model = GaussianMixtureModel(weights, means, covariances, reg_covar=reg)
        weighted = model.component_log_densities(data) + _log_weights(weights)
        per_point = logsumexp(weighted, axis=1)
        objective = float(per_point.sum()) + _covariance_penalty(covariances, strength)
        if fit_log and objective - fit_log[-1] < tol:
            fit_log.append(objective)
            converged = True
            break
        fit_log.append(objective)

        resp = np.exp(weighted - per_point[:, None])
        mass = resp.sum(axis=0)
        weights = mass / n
        means = np.empty((K, k))
        covariances = np.empty((K, k, k))
        for j in range(K):
            if mass[j] < EMPTY_COMPONENT_MASS * n:
                reinitialized += 1
                logger.info(f"♻️ GMM component {j} lost its mass; reinitialising")
                means[j] = data[int(rng.integers(n))]
                covariances[j] = data_cov + reg * eye
                weights[j] = 1.0 / n
                continue
            means[j] = resp[:, j] @ data / mass[j]
            centered = data - means[j]
            scatter = (resp[:, j][:, None] * centered).T @ centered
            if covariance_prior:
                cov = (scatter + strength * eye) / mass[j]
            else:
                cov = scatter / mass[j] + reg * eye
            covariances[j] = 0.5 * (cov + cov.T)
        weights = weights / weights.sum()
    else:
        model = GaussianMixtureModel(weights, means, covariances, reg_covar=reg)
        fit_log.append(model.log_likelihood(data) + _covariance_penalty(covariances, strength))

    result = GaussianMixtureModel(weights, means, covariances, tuple(fit_log), reg)
    log_fit_stats(
        "gmm",
        {
            "n": n,
            "k": k,
            "K": K,
            "iterations": len(fit_log) - 1,
            "converged": converged,
            "covariance_prior": covariance_prior,
            "objective": round(fit_log[-1], 4),
        },
        reinitialized=reinitialized,
    )
    return result


def select_n_components(
    vectors: ArrayLike,
    candidates: Sequence[int] = COMPONENT_CANDIDATES,
    holdout: float = 0.2,
    seed: int = 0,
) -> int:
    """
    Component count with the best held-out mean log-likelihood.

    Candidates larger than the training split are skipped; ties go to the
    smaller K.
    """
    data = _as_matrix(vectors, "gmm")
    n = data.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * holdout)))
    test, train = data[order[:n_test]], data[order[n_test:]]
    if train.shape[0] < 1:
        raise ModelFitError("Too few vectors to hold out a validation split", model="gmm")

    scores: Dict[int, float] = {}
    for K in sorted(set(candidates)):
        if K < 1 or K > train.shape[0]:
            continue
        model = fit_gmm(train, K, seed=seed)
        scores[K] = model.log_likelihood(test) / test.shape[0]
    if not scores:
        raise ModelFitError(f"No candidate K in {list(candidates)} fits {n} vectors", model="gmm")

    best = max(scores, key=lambda K: (scores[K], -K))
    logger.info(
        "🧮 Held-out log-likelihood by K: "
        + ", ".join(f"{K}={v:.3f}" for K, v in scores.items())
        + f" -> K={best}"
    )
    return best


def score_gmm_nll(model: GaussianMixtureModel, x: Any) -> float:
    """-log sum_j w_j N(x; mu_j, Sigma_j); higher is more anomalous"""
    vec = _as_vector(x, model.dim, "gmm")
    weighted = model.component_log_densities(vec[None, :])[0] + _log_weights(model.weights)
    return float(-logsumexp(weighted))


def score_mahalanobis_min(model: GaussianMixtureModel, x: Any) -> float:
    """Smallest Mahalanobis distance from x to any component"""
    vec = _as_vector(x, model.dim, "gmm")
    return float(np.min(model.mahalanobis(vec)))


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def validate_score_kind(score_kind: str) -> str:
    if score_kind in SCORE_KINDS:
        return score_kind
    if score_kind.startswith(EXTERNAL_PREFIX) and len(score_kind) > len(EXTERNAL_PREFIX):
        return score_kind
    raise ConfigError(
        f"Unknown score kind '{score_kind}' "
        f"(choose from {', '.join(SCORE_KINDS)} or {EXTERNAL_PREFIX}<name>)",
        key="score_kind",
    )


@dataclass(frozen=True)
class CalibratedDetector:
    score_kind: str
    threshold: float
    quantile: float
    calibration_size: int

    def __post_init__(self) -> None:
        validate_score_kind(self.score_kind)
        if not 0.0 < self.quantile < 1.0:
            raise CalibrationError(f"Quantile must lie in (0, 1), got {self.quantile}")


def calibrate(
    scores: Iterable[float], quantile: float = 0.95, score_kind: str = "gmm_nll"
) -> CalibratedDetector:
    """
    Threshold at the ceil(quantile * n)-th smallest calibration score.

    With strict flagging (score > threshold) at most a (1 - quantile)
    fraction of the calibration set is flagged, ties included.

    Raises:
        CalibrationError: no scores, a non-finite score, or quantile outside (0, 1)
    """
    values = np.sort(np.asarray(list(scores), dtype=np.float64))
    n = values.shape[0]
    if n == 0:
        raise CalibrationError("Cannot calibrate on an empty score list")
    if not 0.0 < quantile < 1.0:
        raise CalibrationError(f"Quantile must lie in (0, 1), got {quantile}")
    if not np.all(np.isfinite(values)):
        raise CalibrationError("Calibration scores must be finite")

    index = math.ceil(round(quantile * n, 9))
    index = min(max(index, 1), n)
    threshold = float(values[index - 1])
    detector = CalibratedDetector(score_kind, threshold, quantile, n)

    flagged = int(np.sum(values > threshold))
    logger.summary(
        f"🎚️ Calibrated {score_kind} at q={quantile}: threshold {threshold:.6g} "
        f"({flagged}/{n} calibration scores above)"
    )
    return detector


def flag(detector: CalibratedDetector, score: float) -> Classification:
    return Classification.ANOMALY if score > detector.threshold else Classification.NORMAL


# ---------------------------------------------------------------------------
# Frame scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineModels:
    pca: Optional[PcaModel] = None
    gmm: Optional[GaussianMixtureModel] = None


def score_frame(models: BaselineModels, score_kind: str, frame: Frame) -> Optional[float]:
    """
    Score one frame; None when the frame lacks the needed input.

    GMM scores are computed in PCA coordinates when a PCA model is present.
    """
    validate_score_kind(score_kind)
    if score_kind.startswith(EXTERNAL_PREFIX):
        name = score_kind[len(EXTERNAL_PREFIX) :]
        if name not in frame.external_scores:
            tally.warn("missing_external_score", f"Frame has no external score '{name}'")
            return None
        return float(frame.external_scores[name])

    if frame.embedding is None:
        tally.warn("missing_embedding", "Frame has no embedding; skipped")
        return None

    if score_kind == "recon_error":
        if models.pca is None:
            raise ModelError("recon_error scoring needs a PCA model")
        return score_recon_error(models.pca, frame.embedding)

    if models.gmm is None:
        raise ModelError(f"{score_kind} scoring needs a GMM")
    x = models.pca.project(frame.embedding) if models.pca is not None else frame.embedding
    if score_kind == "gmm_nll":
        return score_gmm_nll(models.gmm, x)
    return score_mahalanobis_min(models.gmm, x)


def episode_scores(
    models: BaselineModels, score_kind: str, episodes: Iterable[Episode]
) -> List[Tuple[str, int, float]]:
    """(episode id, timestep, score) for every scorable frame"""
    rows = []
    for episode in episodes:
        for frame in episode.frames:
            score = score_frame(models, score_kind, frame)
            if score is not None:
                rows.append((episode.id, frame.timestep, score))
    return rows


def detector_verdicts(
    models: BaselineModels,
    detector: CalibratedDetector,
    episodes: Iterable[Episode],
    monitor_name: Optional[str] = None,
) -> List[MonitorVerdict]:
    """One flag verdict per scorable frame, comparable to monitor verdicts"""
    name = monitor_name or detector.score_kind
    verdicts = []
    for episode_id, timestep, score in episode_scores(models, detector.score_kind, episodes):
        verdicts.append(
            MonitorVerdict(
                episode_id,
                timestep,
                (),
                flag(detector, score),
                rationale=f"score={score:.6f} threshold={detector.threshold:.6f}",
                monitor=name,
            )
        )
    return verdicts


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

Model = Union[PcaModel, GaussianMixtureModel, CalibratedDetector]


def _to_document(model: Model) -> Dict[str, Any]:
    if isinstance(model, PcaModel):
        return {
            "kind": "pca",
            "mean": model.mean.tolist(),
            "components": model.components.tolist(),
            "explained_variances": model.explained_variances.tolist(),
        }
    if isinstance(model, GaussianMixtureModel):
        return {
            "kind": "gmm",
            "weights": model.weights.tolist(),
            "means": model.means.tolist(),
            "covariances": model.covariances.tolist(),
            "fit_log": list(model.fit_log),
            "reg_covar": model.reg_covar,
        }
    return {
        "kind": "detector",
        "score_kind": model.score_kind,
        "threshold": model.threshold,
        "quantile": model.quantile,
        "calibration_size": model.calibration_size,
    }


def save_model(model: Model, path: Union[str, Path]) -> None:
    """Write a model as a versioned JSON document"""
    document = {"format_version": FORMAT_VERSION, **_to_document(model)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2, allow_nan=False)
        handle.write("\n")


def load_model(path: Union[str, Path], expected_kind: Optional[str] = None) -> Model:
    """
    Read a model file written by ``save_model``.

    Raises:
        ConfigError: the file does not exist
        ModelError: unreadable document, unknown version or kind, or wrong kind
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(
            f"Model file not found: {path} (run 'semsentry fit' first)", path=str(path)
        )
    try:
        with path.open("r", encoding="utf-8") as handle:
            document = json.load(handle)
    except json.JSONDecodeError as e:
        raise ModelError(f"{path}: not a model document: {e}", path=str(path)) from e

    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelError(f"{path}: unsupported format_version {version!r}", path=str(path))
    kind = document.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise ModelError(f"{path}: expected a {expected_kind} model, found {kind!r}")

    try:
        if kind == "pca":
            return PcaModel(
                np.array(document["mean"]),
                np.array(document["components"]),
                np.array(document["explained_variances"]),
            )
        if kind == "gmm":
            return GaussianMixtureModel(
                np.array(document["weights"]),
                np.array(document["means"]),
                np.array(document["covariances"]),
                tuple(document.get("fit_log", ())),
                float(document.get("reg_covar", 0.0)),
            )
        if kind == "detector":
            return CalibratedDetector(
                str(document["score_kind"]),
                float(document["threshold"]),
                float(document["quantile"]),
                int(document["calibration_size"]),
            )
    except KeyError as e:
        raise ModelError(f"{path}: {kind} model is missing field {e}", path=str(path)) from e
    raise ModelError(f"{path}: unknown model kind {kind!r}", path=str(path))
