"""Structure-preserving colour normalization via sparse stain separation.

Brightfield H&E images are factored in optical-density space, where the two
dyes mix linearly: V ~ W H with a 3x2 non-negative stain colour basis W
(unit-norm columns, hematoxylin first) and non-negative per-pixel densities
H. Fitting minimizes ||V - W H||_F^2 + lambda * ||H||_1 by alternating an
exact non-negative lasso on H (coordinate descent, cheap for two stains)
with an exact per-column update of W on the non-negative unit sphere, so the
objective never increases. Normalizing an image rescales its densities to a
target image's 99th percentiles and reconstructs with the target basis,
changing colour statistics while leaving morphology untouched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .rng import RngStream
from .validation import check_rgb_u8

MAX_OD = float(np.log(255.0))

DEFAULT_FIT_LAMBDA = 0.1
DEFAULT_DENSITY_LAMBDA = 0.01
DEFAULT_BACKGROUND_BETA = 0.15
DEFAULT_MAX_ITERS = 200
DEFAULT_TOL = 1e-6
DEFAULT_PERCENTILE = 99.0
DEFAULT_MAX_PIXELS = 50_000
MIN_TISSUE_PIXELS = 100

# generic brightfield H&E absorption directions, used to seed the solver
_INIT_BASIS = np.array([[0.650, 0.072],
                        [0.704, 0.990],
                        [0.286, 0.105]])


class BlankImageError(ValueError):
    """Too few tissue pixels to fit a stain basis."""


@dataclass
class ODImage:
    """Optical densities of an RGB image, flattened to (P, 3)."""

    pixels: np.ndarray
    height: int
    width: int


@dataclass
class StainBasis:
    """3x2 stain colour matrix; columns unit-norm, hematoxylin first."""

    W: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.shape != (3, 2):
            raise ValueError(f"stain basis must be 3x2, got {W.shape}")
        if (W < -1e-9).any():
            raise ValueError("stain basis entries must be non-negative")
        norms = np.linalg.norm(W, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError(f"stain basis columns must be unit-norm, got {norms}")
        self.W = W


@dataclass
class StainModel:
    """Target basis plus its per-stain density percentiles."""

    basis: StainBasis
    p99: np.ndarray
    target_hash: str = ""

    def __post_init__(self):
        self.p99 = np.asarray(self.p99, dtype=np.float64)
        if self.p99.shape != (2,) or (self.p99 <= 0).any():
            raise ValueError(f"percentiles must be two positive floats, got {self.p99}")


# ---------------------------------------------------------------------------
# optical density transforms
# ---------------------------------------------------------------------------

def rgb_to_od(image: np.ndarray) -> ODImage:
    """Beer-Lambert transform: od = -ln(max(I,1)/255), entries in [0, ln 255]."""
    img = check_rgb_u8(image)
    h, w, _ = img.shape
    clipped = np.maximum(img.reshape(-1, 3).astype(np.float64), 1.0)
    od = -np.log(clipped / 255.0)
    return ODImage(pixels=od, height=h, width=w)


def od_to_rgb(od: ODImage | np.ndarray, height: Optional[int] = None,
              width: Optional[int] = None) -> np.ndarray:
    """Inverse transform back to 8-bit RGB (round to nearest, clipped)."""
    if isinstance(od, ODImage):
        pixels, height, width = od.pixels, od.height, od.width
    else:
        pixels = np.asarray(od, dtype=np.float64)
    rgb = 255.0 * np.exp(-pixels)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return rgb.reshape(height, width, 3)


def tissue_mask(od: ODImage, beta: float = DEFAULT_BACKGROUND_BETA) -> np.ndarray:
    """Pixels whose OD vector magnitude reaches ``beta`` (i.e. not background)."""
    return np.linalg.norm(od.pixels, axis=1) >= beta


# ---------------------------------------------------------------------------
# sparse non-negative factorization
# ---------------------------------------------------------------------------

def _nonneg_lasso(V: np.ndarray, W: np.ndarray, lam: float,
                  inner_iters: int = 50, tol: float = 1e-10) -> np.ndarray:
    """Exact per-pixel solve of min ||v - W h||^2 + lam ||h||_1, h >= 0.

    V: (P,3), W: (3,2) with unit columns. Returns H as (P,2). Coordinate
    descent over the two stains, vectorized across pixels.
    """
    g01 = float(W[:, 0] @ W[:, 1])
    C = V @ W  # (P,2): per-pixel correlations with each stain vector
    H = np.zeros((V.shape[0], 2))
    half = lam / 2.0
    for _ in range(inner_iters):
        prev = H.copy()
        H[:, 0] = np.maximum(0.0, C[:, 0] - g01 * H[:, 1] - half)
        H[:, 1] = np.maximum(0.0, C[:, 1] - g01 * H[:, 0] - half)
        if np.abs(H - prev).max() < tol:
            break
    return H


def _snmf_objective(V: np.ndarray, W: np.ndarray, H: np.ndarray, lam: float) -> float:
    resid = V - H @ W.T
    return float((resid * resid).sum() + lam * H.sum())


def sparse_stain_factorization(
        V: np.ndarray, lam: float = DEFAULT_FIT_LAMBDA,
        iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
        init_w: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Alternating minimization of the sparse stain objective.

    V: (P,3) optical densities of tissue pixels. Returns (W, H, objectives)
    with W (3,2) and H (P,2). The objective history is non-increasing.
    """
    W = np.array(_INIT_BASIS if init_w is None else init_w, dtype=np.float64)
    W /= np.linalg.norm(W, axis=0, keepdims=True)
    H = _nonneg_lasso(V, W, lam)
    objectives = [_snmf_objective(V, W, H, lam)]
    for _ in range(iters):
        # exact column update: argmin over the non-negative unit sphere
        for k in range(2):
            j = 1 - k
            u = V.T @ H[:, k] - W[:, j] * float(H[:, j] @ H[:, k])
            u = np.maximum(u, 0.0)
            norm = np.linalg.norm(u)
            if norm > 1e-12:
                W[:, k] = u / norm
        H = _nonneg_lasso(V, W, lam)
        assert (H >= 0).all() and (W >= -1e-12).all(), "factor positivity violated"
        assert np.allclose(np.linalg.norm(W, axis=0), 1.0, atol=1e-9), \
            "basis columns drifted off the unit sphere"
        objectives.append(_snmf_objective(V, W, H, lam))
        if abs(objectives[-2] - objectives[-1]) <= tol * max(objectives[-2], 1e-300):
            break
    return W, H, objectives


def _order_stains(W: np.ndarray) -> np.ndarray:
    """Hematoxylin first: the column with the larger blue OD, red breaks ties."""
    if (W[2, 0], W[0, 0]) < (W[2, 1], W[0, 1]):
        return W[:, ::-1].copy()
    return W


def estimate_stain_basis(od: ODImage, lam: float = DEFAULT_FIT_LAMBDA,
                         iters: int = DEFAULT_MAX_ITERS,
                         rng: Optional[RngStream] = None,
                         beta: float = DEFAULT_BACKGROUND_BETA,
                         tol: float = DEFAULT_TOL,
                         max_pixels: int = DEFAULT_MAX_PIXELS) -> StainBasis:
    """Fit the stain colour basis of one image from its tissue pixels."""
    mask = tissue_mask(od, beta)
    n_tissue = int(mask.sum())
    if n_tissue < MIN_TISSUE_PIXELS:
        raise BlankImageError(
            f"blank image: only {n_tissue} tissue pixels above OD {beta} "
            f"(need {MIN_TISSUE_PIXELS})")
    V = od.pixels[mask]
    if len(V) > max_pixels:
        gen = (rng or RngStream(0)).generator("stain.subsample")
        V = V[gen.choice(len(V), max_pixels, replace=False)]
    W, _, _ = sparse_stain_factorization(V, lam=lam, iters=iters, tol=tol)
    return StainBasis(W=_order_stains(W))


def compute_density(od: ODImage, basis: StainBasis,
                    lam: float = DEFAULT_DENSITY_LAMBDA) -> np.ndarray:
    """Per-pixel stain concentrations, returned as a (2, P) map."""
    return _nonneg_lasso(od.pixels, basis.W, lam).T


# ---------------------------------------------------------------------------
# fitting a target and normalizing sources
# ---------------------------------------------------------------------------

def fit_target(image: np.ndarray, fit_lambda: float = DEFAULT_FIT_LAMBDA,
               density_lambda: float = DEFAULT_DENSITY_LAMBDA,
               beta: float = DEFAULT_BACKGROUND_BETA,
               iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
               percentile: float = DEFAULT_PERCENTILE,
               max_pixels: int = DEFAULT_MAX_PIXELS,
               rng: Optional[RngStream] = None) -> StainModel:
    """Fit the reference basis and density percentiles of the target image."""
    image = check_rgb_u8(image)
    od = rgb_to_od(image)
    basis = estimate_stain_basis(od, lam=fit_lambda, iters=iters, rng=rng,
                                 beta=beta, tol=tol, max_pixels=max_pixels)
    dens = compute_density(od, basis, lam=density_lambda)
    p99 = np.percentile(dens, percentile, axis=1)
    if (p99 <= 0).any():
        raise BlankImageError(f"target stain percentiles degenerate: {p99}")
    return StainModel(basis=basis, p99=p99,
                      target_hash=hashlib.sha256(image.tobytes()).hexdigest())


def normalize_image(image: np.ndarray, model: StainModel,
                    density_lambda: float = DEFAULT_DENSITY_LAMBDA,
                    fit_lambda: float = DEFAULT_FIT_LAMBDA,
                    beta: float = DEFAULT_BACKGROUND_BETA,
                    iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                    percentile: float = DEFAULT_PERCENTILE,
                    max_pixels: int = DEFAULT_MAX_PIXELS,
                    rng: Optional[RngStream] = None) -> tuple[np.ndarray, bool]:
    """Recombine a source image's densities with the target basis.

    Returns ``(rgb, was_blank)``; blank sources pass through unchanged with
    the flag set.
    """
    image = check_rgb_u8(image)
    od = rgb_to_od(image)
    try:
        basis_src = estimate_stain_basis(od, lam=fit_lambda, iters=iters, rng=rng,
                                         beta=beta, tol=tol, max_pixels=max_pixels)
    except BlankImageError:
        return image.copy(), True
    dens = compute_density(od, basis_src, lam=density_lambda)
    p99_src = np.percentile(dens, percentile, axis=1)
    scale = np.where(p99_src > 1e-8, model.p99 / np.maximum(p99_src, 1e-8), 1.0)
    od_hat = (model.basis.W @ (dens * scale[:, None])).T
    return od_to_rgb(od_hat, od.height, od.width), False


# ---------------------------------------------------------------------------
# persistence: small text file, 9 significant digits
# ---------------------------------------------------------------------------

_STAIN_FILE_HEADER = "HTXS1"


def save_stain_model(model: StainModel, path: str | Path) -> None:
    lines = [f"{_STAIN_FILE_HEADER} {model.target_hash}"]
    for row in model.basis.W:
        lines.append(" ".join(f"{v:.9g}" for v in row))
    lines.append(" ".join(f"{v:.9g}" for v in model.p99))
    Path(path).write_text("\n".join(lines) + "\n")


def load_stain_model(path: str | Path) -> StainModel:
    lines = Path(path).read_text().strip().splitlines()
    if len(lines) != 5 or not lines[0].startswith(_STAIN_FILE_HEADER):
        raise ValueError(f"not a stain model file: {path}")
    target_hash = lines[0].split(" ", 1)[1] if " " in lines[0] else ""
    W = np.array([[float(v) for v in line.split()] for line in lines[1:4]])
    p99 = np.array([float(v) for v in lines[4].split()])
    return StainModel(basis=StainBasis(W=W), p99=p99, target_hash=target_hash)


# ---------------------------------------------------------------------------
# estimator facade
# ---------------------------------------------------------------------------

class StainNormalizer(BaseEstimator, TransformerMixin):
    """Colour normalizer with the usual fit/transform surface.

    ``fit`` takes the target image; ``transform`` accepts a single (H,W,3)
    uint8 image or a sequence of them and returns the normalized result in
    the same form. Blank inputs pass through; ``blank_flags_`` records which.
    """

    def __init__(self, fit_lambda: float = DEFAULT_FIT_LAMBDA,
                 density_lambda: float = DEFAULT_DENSITY_LAMBDA,
                 background_beta: float = DEFAULT_BACKGROUND_BETA,
                 max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                 percentile: float = DEFAULT_PERCENTILE,
                 max_pixels: int = DEFAULT_MAX_PIXELS, seed: int = 0):
        self.fit_lambda = fit_lambda
        self.density_lambda = density_lambda
        self.background_beta = background_beta
        self.max_iters = max_iters
        self.tol = tol
        self.percentile = percentile
        self.max_pixels = max_pixels
        self.seed = seed

    def _kwargs(self) -> dict:
        return dict(fit_lambda=self.fit_lambda, density_lambda=self.density_lambda,
                    beta=self.background_beta, iters=self.max_iters, tol=self.tol,
                    percentile=self.percentile, max_pixels=self.max_pixels,
                    rng=RngStream(self.seed))

    def fit(self, X, y=None) -> "StainNormalizer":
        self.model_ = fit_target(X, **self._kwargs())
        return self

    def transform(self, X):
        if not hasattr(self, "model_"):
            raise RuntimeError("StainNormalizer is not fitted; call fit(target) first")
        kwargs = self._kwargs()
        single = isinstance(X, np.ndarray) and X.ndim == 3
        images = [X] if single else list(X)
        out, flags = [], []
        for img in images:
            rgb, blank = normalize_image(img, self.model_, **kwargs)
            out.append(rgb)
            flags.append(blank)
        self.blank_flags_ = flags
        return out[0] if single else out
