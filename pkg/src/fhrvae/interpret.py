"""
Latent-space interpretation
R² panels, PLS feature directions, latent traversals and PCA/ICA decompositions
"""

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import integrate, stats
from sklearn.cross_decomposition import PLSRegression
from sklearn.decomposition import PCA, FastICA
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LinearRegression

from .checkpoint import ModelCheckpoint
from .errors import ConvergenceError, DataValidationError, FhrVaeError, InsufficientDataError, ShapeError
from .models import FEATURE_NAMES, SegmentSet
from .preprocess import unstandardize
from .vae import SupervisedVae

logger = logging.getLogger(__name__)

NEGLIGIBLE_NEGENTROPY = 1e-3
PANEL_COLUMNS = [
    "feature",
    "latents_r2",
    "labels_r2",
    "scores_r2",
    "error_r2",
    "labels_projection_r2",
    "scores_projection_r2",
]


@dataclass
class LatentMatrix:
    """Posterior means, one row per segment, aligned to (ctg_id, start_offset)."""
    values: np.ndarray
    ctg_ids: np.ndarray
    start_offsets: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if not np.all(np.isfinite(self.values)):
            raise DataValidationError("latent matrix has missing or non-finite entries")
        if len(self.ctg_ids) != self.values.shape[0] or len(self.start_offsets) != self.values.shape[0]:
            raise ShapeError("latent rows and their (ctg_id, start_offset) index differ in length")

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def latent_dim(self) -> int:
        return int(self.values.shape[1])

    @property
    def column_sd(self) -> np.ndarray:
        return self.values.std(axis=0)

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "LatentMatrix":
        n = np.atleast_2d(values).shape[0]
        return cls(values, np.array([f"row-{i}" for i in range(n)], dtype=object), np.zeros(n))

    @classmethod
    def from_segments(cls, segments: SegmentSet, mu: np.ndarray) -> "LatentMatrix":
        return cls(mu, segments.parent_ids.copy(), segments.start_offsets.copy())

    def to_pandas(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=[f"z{d}" for d in range(self.latent_dim)])
        frame.insert(0, "start_offset", self.start_offsets)
        frame.insert(0, "ctg_id", self.ctg_ids)
        return frame


@dataclass
class Direction:
    vector: np.ndarray
    feature: str
    projection_sd: float

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if abs(float(np.linalg.norm(self.vector)) - 1.0) > 1e-9:
            raise DataValidationError("direction vector must have unit norm")

    def project(self, latents: LatentMatrix) -> np.ndarray:
        return (latents.values - latents.mean) @ self.vector


@dataclass
class TraversalFamily:
    """Decoded signals (bpm) for evenly spaced multipliers along one latent vector."""
    name: str
    multipliers: np.ndarray
    signals: np.ndarray


@dataclass
class PcaResult:
    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray

    def loadings(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.components, columns=[f"z{d}" for d in range(self.components.shape[1])])
        frame.insert(0, "explained_variance_ratio", self.explained_variance_ratio)
        frame.insert(0, "explained_variance", self.explained_variance)
        frame.insert(0, "component", np.arange(len(frame)))
        return frame


@dataclass
class IcaResult:
    """
    Independent components ordered by decreasing negentropy.

    `whitened_unmixing` rows are orthonormal in the whitened space;
    `unmixing` maps centred latents to unit-variance sources and
    `mixing` rows are each source's latent-space direction.
    """
    whitened_unmixing: np.ndarray
    unmixing: np.ndarray
    mixing: np.ndarray
    negentropy: np.ndarray
    mean: np.ndarray
    converged: bool
    n_iter: int

    def sources(self, latents: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(latents) - self.mean) @ self.unmixing.T

    def loadings(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.mixing, columns=[f"z{d}" for d in range(self.mixing.shape[1])])
        frame.insert(0, "negentropy", self.negentropy)
        frame.insert(0, "component", np.arange(len(frame)))
        return frame


def _check_target(values: np.ndarray, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    if np.ptp(values) == 0.0:
        raise DataValidationError(f"{name} is constant; R² is undefined")
    return values


def r2_multi(latents: LatentMatrix, target: Sequence[float]) -> float:
    """In-sample R² of an OLS fit (with intercept) of the target on all latent columns."""
    y = _check_target(np.asarray(target), "target")
    if y.size != len(latents):
        raise ShapeError("target length differs from the number of latent rows")
    if len(latents) < latents.latent_dim + 2:
        raise InsufficientDataError(f"r2_multi needs at least {latents.latent_dim + 2} rows, got {len(latents)}")
    regression = LinearRegression().fit(latents.values, y)
    return float(regression.score(latents.values, y))


def r2_single(x: Sequence[float], y: Sequence[float]) -> float:
    xs = _check_target(np.asarray(x), "x")
    ys = _check_target(np.asarray(y), "y")
    if xs.size != ys.size:
        raise ShapeError("x and y differ in length")
    return float(stats.linregress(xs, ys).rvalue ** 2)


def pls_direction(latents: LatentMatrix, feature: Sequence[float], name: str = "feature") -> Direction:
    """First PLS weight vector, oriented so projections grow with the feature."""
    y = np.asarray(feature, dtype=np.float64).ravel()
    if y.size != len(latents):
        raise ShapeError("feature length differs from the number of latent rows")
    xc = latents.values - latents.mean
    yc = y - y.mean()
    covariance = xc.T @ yc
    if np.linalg.norm(covariance) <= 1e-12 * max(np.linalg.norm(xc) * np.linalg.norm(yc), 1e-300):
        raise DataValidationError(f"{name} has zero covariance with every latent direction")

    pls = PLSRegression(n_components=1, scale=False).fit(latents.values, y)
    vector = pls.x_weights_[:, 0] / np.linalg.norm(pls.x_weights_[:, 0])
    if vector @ covariance < 0:
        vector = -vector
    projection = xc @ vector
    return Direction(vector=vector, feature=name, projection_sd=float(projection.std()))


def _traverse(
    model: SupervisedVae,
    checkpoint: ModelCheckpoint,
    center: np.ndarray,
    vector: np.ndarray,
    sd: float,
    steps: int,
    span: float,
    name: str,
) -> TraversalFamily:
    multipliers = np.linspace(-span, span, steps)
    points = np.stack([center + (m * sd) * vector for m in multipliers])
    decoded = model.decode_rows(points)
    return TraversalFamily(name=name, multipliers=multipliers, signals=unstandardize(decoded, checkpoint.norm_stats))


def traverse_direction(
    checkpoint: ModelCheckpoint,
    latents: LatentMatrix,
    direction: Direction,
    steps: int = 9,
    span: float = 10.0,
    model: Optional[SupervisedVae] = None,
) -> TraversalFamily:
    """Decode mean_mu + m·projection_sd·v for m evenly spaced in [-span, span]."""
    return _traverse(
        model or checkpoint.model(),
        checkpoint,
        latents.mean,
        direction.vector,
        direction.projection_sd,
        steps,
        span,
        f"direction_{direction.feature}",
    )


def traverse_dimension(
    checkpoint: ModelCheckpoint,
    latents: LatentMatrix,
    dim: int,
    steps: int = 9,
    span: float = 5.0,
    model: Optional[SupervisedVae] = None,
) -> TraversalFamily:
    if not 0 <= dim < latents.latent_dim:
        raise ShapeError(f"latent dimension {dim} out of range [0, {latents.latent_dim})")
    unit = np.zeros(latents.latent_dim)
    unit[dim] = 1.0
    return _traverse(
        model or checkpoint.model(),
        checkpoint,
        latents.mean,
        unit,
        float(latents.column_sd[dim]),
        steps,
        span,
        f"dimension_{dim}",
    )


def traverse_component(
    checkpoint: ModelCheckpoint,
    center: np.ndarray,
    direction: np.ndarray,
    name: str,
    steps: int = 9,
    span: float = 5.0,
    model: Optional[SupervisedVae] = None,
) -> TraversalFamily:
    """`direction` is the latent change for one SD of the component; its norm sets the step."""
    norm = float(np.linalg.norm(direction))
    vector = direction / norm if norm > 0 else np.zeros_like(direction)
    return _traverse(model or checkpoint.model(), checkpoint, center, vector, norm, steps, span, name)


def pca(latents: LatentMatrix) -> PcaResult:
    if len(latents) <= latents.latent_dim:
        raise InsufficientDataError(f"pca needs more than {latents.latent_dim} rows, got {len(latents)}")
    model = PCA(svd_solver="full").fit(latents.values)
    return PcaResult(
        components=model.components_,
        explained_variance=model.explained_variance_,
        explained_variance_ratio=model.explained_variance_ratio_,
        mean=model.mean_,
    )


def _gaussian_logcosh() -> float:
    value, _ = integrate.quad(lambda u: (np.logaddexp(u, -u) - math.log(2.0)) * stats.norm.pdf(u), -np.inf, np.inf)
    return float(value)


_GAUSSIAN_LOGCOSH = _gaussian_logcosh()


def negentropy(sources: np.ndarray) -> np.ndarray:
    """log-cosh approximation (E[G(s)] - E[G(v)])² per standardised column."""
    s = np.atleast_2d(sources)
    std = s.std(axis=0)
    flat = std == 0.0
    s = (s - s.mean(axis=0)) / np.where(flat, 1.0, std)
    expected = (np.logaddexp(s, -s) - math.log(2.0)).mean(axis=0)
    return np.where(flat, 0.0, (expected - _GAUSSIAN_LOGCOSH) ** 2)


def ica(
    latents: LatentMatrix,
    n_components: int,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-6,
    require_convergence: bool = False,
) -> IcaResult:
    """
    Fixed-point ICA (tanh contrast, deflation) on PCA-whitened latents.

    Non-convergence is logged and flagged on the result, or raised as
    ConvergenceError when `require_convergence` is set.
    """
    k = min(n_components, latents.latent_dim)
    if len(latents) <= k:
        raise InsufficientDataError(f"ica needs more than {k} rows, got {len(latents)}")
    whitener = PCA(n_components=k, whiten=True, svd_solver="full").fit(latents.values)
    whitened = whitener.transform(latents.values)

    fast_ica = FastICA(
        whiten=False,
        fun="logcosh",
        algorithm="deflation",
        max_iter=max_iter,
        tol=tol,
        random_state=seed,
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        sources = fast_ica.fit_transform(whitened)
    warned = any(issubclass(w.category, ConvergenceWarning) for w in caught)
    # deflation does not warn; a component that used every iteration did not converge
    converged = not warned and int(fast_ica.n_iter_) < max_iter
    if not converged:
        if require_convergence:
            raise ConvergenceError(f"ICA did not converge within {max_iter} iterations")
        logger.warning(f"ICA did not converge within {max_iter} iterations")

    w = fast_ica.components_
    scores = negentropy(sources)
    order = np.argsort(-scores, kind="stable")
    w, scores = w[order], scores[order]
    root = np.sqrt(whitener.explained_variance_)
    unmixing = (w / root) @ whitener.components_
    mixing = (w * root) @ whitener.components_
    if scores.max() < NEGLIGIBLE_NEGENTROPY:
        logger.warning(f"ICA components carry negligible negentropy (max {scores.max():.2e})")
    return IcaResult(
        whitened_unmixing=w,
        unmixing=unmixing,
        mixing=mixing,
        negentropy=scores,
        mean=whitener.mean_,
        converged=converged,
        n_iter=int(fast_ica.n_iter_),
    )


def _panel_value(compute: Callable[[], float], feature: str, panel: str) -> float:
    try:
        return compute()
    except (DataValidationError, InsufficientDataError) as e:
        logger.warning(f"R² {panel} undefined for {feature}: {e}")
        return math.nan


def r2_panel(
    features: pd.DataFrame,
    latents: LatentMatrix,
    scores: Sequence[float],
    labels: Sequence[int],
) -> pd.DataFrame:
    """
    One row per clinical feature: R² against the latents, labels, scores and
    |score - label|, and of labels/scores against the feature's PLS projection.
    Rows whose feature is undefined are left out of that feature's fits.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(features) != len(latents) or scores.size != len(latents) or labels.size != len(latents):
        raise ShapeError("features, latents, scores and labels must be row-aligned")
    error = np.abs(scores - labels)

    rows: List[Dict[str, object]] = []
    for name in FEATURE_NAMES:
        values = features[name].to_numpy(dtype=np.float64)
        keep = np.isfinite(values)
        sub = LatentMatrix(latents.values[keep], latents.ctg_ids[keep], latents.start_offsets[keep])
        x = values[keep]
        row: Dict[str, object] = {"feature": name}
        row["latents_r2"] = _panel_value(lambda: r2_multi(sub, x), name, "latents")
        row["labels_r2"] = _panel_value(lambda: r2_single(x, labels[keep]), name, "labels")
        row["scores_r2"] = _panel_value(lambda: r2_single(x, scores[keep]), name, "scores")
        row["error_r2"] = _panel_value(lambda: r2_single(x, error[keep]), name, "error")
        try:
            projection = pls_direction(sub, x, name).project(sub)
        except FhrVaeError as e:
            logger.warning(f"No PLS direction for {name}: {e}")
            projection = None
        for target, values_ in (("labels", labels), ("scores", scores)):
            column = f"{target}_projection_r2"
            if projection is None:
                row[column] = math.nan
            else:
                row[column] = _panel_value(lambda: r2_single(projection, values_[keep]), name, column)
        rows.append(row)
    return pd.DataFrame(rows, columns=PANEL_COLUMNS)


def dimensions_to_traverse(directions: Sequence[Direction], latents: LatentMatrix, count: int) -> List[int]:
    """Dimensions dominating the given directions first, then the highest-variance others."""
    chosen: List[int] = []
    for direction in directions:
        dim = int(np.argmax(np.abs(direction.vector)))
        if dim not in chosen:
            chosen.append(dim)
    for dim in np.argsort(-latents.column_sd, kind="stable"):
        if len(chosen) >= count:
            break
        if int(dim) not in chosen:
            chosen.append(int(dim))
    return chosen[:count]
