"""Posterior summaries: intervals, diagnostics, correlation, and maps.

Summaries operate on the ``Draws`` containers produced by the sampler. The
report covers every tracked scalar (regression coefficients, detection
probabilities, noise parameters, the species covariance, and derived
square-root diagonals of the covariance) with posterior means, standard
deviations, central credible intervals, effective sample sizes, and
split-chain scale-reduction factors. Spatial prediction extends the latent
biomass field to new coordinates through the Gaussian kernel row
conditional, and the biodiversity index rescales and sums the per-species
surfaces.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .datamodel import HyperParams, OtuDataset
from .state import Draws

__all__ = [
    "SummaryReport",
    "BiomassSurface",
    "summarize_draws",
    "effective_sample_size",
    "split_rhat",
    "species_correlation",
    "predict_biomass_grid",
    "biodiversity_index",
]


# -- Convergence diagnostics -------------------------------------------------


def _autocovariances(x: np.ndarray) -> np.ndarray:
    """Biased sample autocovariances of each column of x, via FFT."""
    n = x.shape[0]
    centred = x - x.mean(axis=0)
    size = 1
    while size < 2 * n:
        size <<= 1
    freq = np.fft.rfft(centred, n=size, axis=0)
    acov = np.fft.irfft(freq * np.conj(freq), n=size, axis=0)[:n]
    return acov / n


def effective_sample_size(chain: np.ndarray) -> np.ndarray:
    """Initial-positive-sequence effective sample size per scalar.

    The integrated autocorrelation time sums consecutive even-odd
    autocovariance pairs and truncates at the first pair with a
    non-positive sum. The estimate is capped at the number of draws, and
    constant scalars (zero variance) report the full draw count.
    """
    x = np.asarray(chain, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("chain must be a (draws, scalars) array with >= 2 rows")
    n, d = x.shape
    acov = _autocovariances(x)
    ess = np.full(d, float(n))
    for j in range(d):
        g0 = acov[0, j]
        if not g0 > 0.0:
            continue
        tau = -g0
        k = 0
        while 2 * k + 1 < n:
            pair = acov[2 * k, j] + acov[2 * k + 1, j]
            if pair <= 0.0:
                break
            tau += 2.0 * pair
            k += 1
        if tau > 0.0:
            ess[j] = min(float(n), n * g0 / tau)
    return ess[0] if squeeze else ess


def split_rhat(chains: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    """Split-chain potential scale reduction per scalar.

    Every chain is split in half (dropping one draw when the length is
    odd) and the classic between/within variance ratio is computed over
    the resulting half-chains. Constant scalars return exactly 1.
    """
    if isinstance(chains, np.ndarray):
        chains = [chains]
    halves = []
    for c in chains:
        c = np.asarray(c, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        half = c.shape[0] // 2
        if half < 2:
            raise ValueError("each chain needs >= 4 draws for split R-hat")
        halves.append(c[:half])
        halves.append(c[half : 2 * half])
    width = halves[0].shape[1]
    if any(h.shape[1] != width for h in halves):
        raise ValueError("chains must track the same scalars")
    length = min(h.shape[0] for h in halves)
    stack = np.stack([h[:length] for h in halves])
    within = stack.var(axis=1, ddof=1).mean(axis=0)
    between = length * stack.mean(axis=1).var(axis=0, ddof=1)
    var_plus = (length - 1) / length * within + between / length
    out = np.ones(width)
    ok = within > 0.0
    out[ok] = np.sqrt(var_plus[ok] / within[ok])
    return out


# -- Scalar summary report ---------------------------------------------------


@dataclass(frozen=True)
class SummaryReport:
    """Per-scalar posterior summaries and convergence diagnostics.

    Arrays are aligned with ``names``; ``lower``/``upper`` bound the
    central credible interval at the requested level.
    """

    names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ess: np.ndarray
    rhat: np.ndarray
    interval: float
    n_draws: int
    n_chains: int

    def rows(self):
        """Yield (name, mean, sd, lower, upper, ess, rhat) per scalar."""
        for i, name in enumerate(self.names):
            yield (
                name,
                float(self.mean[i]),
                float(self.sd[i]),
                float(self.lower[i]),
                float(self.upper[i]),
                float(self.ess[i]),
                float(self.rhat[i]),
            )

    def __getitem__(self, name: str) -> dict[str, float]:
        i = self.names.index(name)
        return {
            "mean": float(self.mean[i]),
            "sd": float(self.sd[i]),
            "lower": float(self.lower[i]),
            "upper": float(self.upper[i]),
            "ess": float(self.ess[i]),
            "rhat": float(self.rhat[i]),
        }


def _sqrt_t_diagonal(samples: np.ndarray, labels: list[str]):
    """Square roots of the species-covariance diagonal draws."""
    dim = samples.shape[1]
    n_species = math.isqrt(dim)
    if n_species * n_species != dim:
        raise ValueError("covariance draws do not flatten a square matrix")
    idx = np.arange(n_species) * (n_species + 1)
    diag = samples[:, idx]
    if np.any(diag <= 0.0):
        raise ValueError("covariance draws have non-positive diagonal entries")
    names = []
    for i in idx:
        pair = labels[i]
        names.append(f"sqrt_T:{pair[: (len(pair) - 1) // 2]}")
    return np.sqrt(diag), names


def summarize_draws(
    draws: Draws | Sequence[Draws],
    names: Sequence[str] | None = None,
    interval: float = 0.95,
) -> SummaryReport:
    """Summarise the tracked scalars of one chain or several chains.

    Multiple chains must track the same groups; their draws are pooled
    for moments and quantiles, effective sample sizes are summed across
    chains (capped at the pooled draw count), and the scale reduction is
    the split-chain statistic over all chains. Quantiles use linear
    interpolation on the order statistics (numpy's default). When the
    species covariance is tracked, derived square roots of its diagonal
    are appended to the report. Requires at least 100 pooled draws.
    """
    chains = [draws] if isinstance(draws, Draws) else list(draws)
    if not chains:
        raise ValueError("no draws provided")
    if not 0.0 < interval < 1.0:
        raise ValueError("interval must be strictly between 0 and 1")
    if names is None:
        names = list(chains[0].samples)
    mats: list[np.ndarray] = []
    labels: list[str] | None = None
    for chain in chains:
        mat, labs = chain.stacked(names)
        if "T" in names:
            extra, extra_labs = _sqrt_t_diagonal(
                chain.samples["T"], chain.columns["T"]
            )
            mat = np.hstack([mat, extra])
            labs = labs + extra_labs
        if labels is None:
            labels = labs
        elif labs != labels:
            raise ValueError("chains track different scalars")
        mats.append(mat)
    pooled = np.vstack(mats)
    total = pooled.shape[0]
    if total < 100:
        raise ValueError(f"too few draws: need at least 100, got {total}")
    alpha = 0.5 * (1.0 - interval)
    lower, upper = np.quantile(pooled, [alpha, 1.0 - alpha], axis=0)
    mean = pooled.mean(axis=0)
    sd = pooled.std(axis=0, ddof=1)
    # Constant scalars summarise exactly; summation roundoff would
    # otherwise leave the mean an ulp outside the collapsed interval.
    constant = np.ptp(pooled, axis=0) == 0.0
    mean[constant] = pooled[0, constant]
    sd[constant] = 0.0
    lower[constant] = pooled[0, constant]
    upper[constant] = pooled[0, constant]
    ess = np.minimum(
        float(total), sum(effective_sample_size(mat) for mat in mats)
    )
    return SummaryReport(
        names=tuple(labels),
        mean=mean,
        sd=sd,
        lower=lower,
        upper=upper,
        ess=ess,
        rhat=split_rhat(mats),
        interval=interval,
        n_draws=total,
        n_chains=len(chains),
    )


# -- Species correlation -----------------------------------------------------


def species_correlation(draws: Draws | np.ndarray) -> np.ndarray:
    """Posterior-mean correlation matrix of the species covariance.

    Accepts a ``Draws`` container (uses its tracked covariance group), a
    (draws, S, S) stack, or a (draws, S*S) flattened stack. Each draw is
    converted to a correlation matrix before averaging; the result is
    symmetrised with an exact unit diagonal.
    """
    if isinstance(draws, Draws):
        mats = np.asarray(draws.samples["T"], dtype=float)
    else:
        mats = np.asarray(draws, dtype=float)
    if mats.ndim == 2:
        n_species = math.isqrt(mats.shape[1])
        if n_species * n_species != mats.shape[1]:
            raise ValueError("covariance draws do not flatten a square matrix")
        mats = mats.reshape(-1, n_species, n_species)
    if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
        raise ValueError("expected a (draws, S, S) covariance stack")
    if mats.shape[0] == 0:
        raise ValueError("no covariance draws provided")
    diag = np.diagonal(mats, axis1=1, axis2=2)
    if np.any(diag <= 0.0):
        raise ValueError("covariance draws have non-positive diagonal entries")
    scale = np.sqrt(diag)
    corr = mats / (scale[:, :, None] * scale[:, None, :])
    mean = corr.mean(axis=0)
    mean = 0.5 * (mean + mean.T)
    np.fill_diagonal(mean, 1.0)
    return mean


# -- Spatial prediction ------------------------------------------------------


@dataclass(frozen=True)
class BiomassSurface:
    """Posterior-mean log-biomass over a prediction grid.

    ``mean_log_biomass`` has one row per grid point and one column per
    target species; ``index`` is the per-point biodiversity index (sum of
    min-max rescaled species surfaces, in [0, S]).
    """

    grid_coordinates: np.ndarray
    mean_log_biomass: np.ndarray
    species: tuple[str, ...]
    index: np.ndarray


def _site_unit_transform(coords: np.ndarray):
    """Parameters of the unit-square map fitted to the site coordinates."""
    mins = coords.min(axis=0)
    ranges = coords.max(axis=0) - mins
    span = ranges.max()
    return mins, ranges, span


def _apply_unit_transform(points, mins, ranges, span):
    pts = np.asarray(points, dtype=float)
    if span <= 0.0:
        return np.full_like(pts, 0.5)
    out = (pts - mins) / span
    out[:, ranges == 0.0] = 0.5
    return out


def _minmax_index(surface: np.ndarray) -> np.ndarray:
    lo = surface.min(axis=0)
    rng = surface.max(axis=0) - lo
    scaled = np.zeros_like(surface)
    keep = rng > 0.0
    scaled[:, keep] = (surface[:, keep] - lo[keep]) / rng[keep]
    return scaled.sum(axis=1)


def predict_biomass_grid(
    draws: Draws,
    dataset: OtuDataset,
    grid_coordinates: np.ndarray,
    grid_covariates: np.ndarray | None = None,
    hyper: HyperParams | None = None,
) -> BiomassSurface:
    """Posterior-mean log-biomass at new coordinates.

    Under the fitted model the site-by-species biomass matrix is matrix
    normal with the spatial kernel as row covariance, so its rows at new
    coordinates are Gaussian given the sampled rows. Per draw the
    conditional mean at the grid is

        X_g C + K_gs K_ss^{-1} (L - X C)

    applied species by species; the species covariance cancels from the
    conditional mean, so it enters only through the sampled biomass. The
    returned surface averages these means over draws.

    Grid coordinates are mapped into the unit square with the same affine
    transform fitted to the site coordinates, preserving relative
    distances; when the sites have zero spatial extent every kernel
    distance degenerates to zero. Grid covariate values are required
    whenever the fitted model used site covariates; nothing is imputed.
    Grid points outside the surveyed bounding box trigger an
    extrapolation warning.
    """
    if hyper is None:
        hyper = HyperParams()
    grid = np.asarray(grid_coordinates, dtype=float)
    if grid.ndim != 2 or grid.shape[1] != 2:
        raise ValueError("grid_coordinates must be a (points, 2) array")
    if grid.shape[0] == 0:
        raise ValueError("empty grid")
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid_coordinates must be finite")
    n_sites = dataset.n_sites
    n_species = dataset.n_species
    n_z = dataset.n_site_covariates
    if n_z > 0:
        if grid_covariates is None:
            raise ValueError(
                "grid_covariates are required: the fitted model uses "
                f"{n_z} site covariate(s) and values are never imputed"
            )
        z_grid = np.atleast_2d(np.asarray(grid_covariates, dtype=float))
        if z_grid.shape != (grid.shape[0], n_z):
            raise ValueError(
                "grid_covariates must have shape "
                f"({grid.shape[0]}, {n_z}), got {z_grid.shape}"
            )
        if not np.all(np.isfinite(z_grid)):
            raise ValueError("grid_covariates must be finite")
    else:
        if grid_covariates is not None and np.size(grid_covariates) > 0:
            raise ValueError("dataset has no site covariates")
        z_grid = np.zeros((grid.shape[0], 0))
    for group in ("beta0_bar", "B", "L_bar"):
        if group not in draws.samples:
            raise ValueError(f"draws do not track the {group} group")
    kept = draws.samples["L_bar"].shape[0]
    if kept == 0:
        raise ValueError("no kept draws to average over")
    if draws.samples["L_bar"].shape[1] != n_sites * n_species:
        raise ValueError("biomass draws do not match the dataset dimensions")
    if draws.samples["B"].shape[1] != n_z * n_species:
        raise ValueError("coefficient draws do not match the site covariates")

    coords = np.asarray(dataset.coordinates, dtype=float)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    if np.any(grid < lo) or np.any(grid > hi):
        warnings.warn(
            "grid extends outside the surveyed bounding box; "
            "predictions there extrapolate the kernel",
            stacklevel=2,
        )
    mins, ranges, span = _site_unit_transform(coords)
    site_unit = _apply_unit_transform(coords, mins, ranges, span)
    grid_unit = _apply_unit_transform(grid, mins, ranges, span)
    k_ss = np.exp(
        -cdist(site_unit, site_unit, "sqeuclidean") / (2.0 * hyper.l_Sigma)
    )
    k_gs = np.exp(
        -cdist(grid_unit, site_unit, "sqeuclidean") / (2.0 * hyper.l_Sigma)
    )
    try:
        fac = cho_factor(k_ss, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "spatial kernel is singular at the site coordinates"
        ) from exc
    weights = cho_solve(fac, k_gs.T)  # (n_sites, points)

    x_sites = np.hstack([np.ones((n_sites, 1)), dataset.site_covariates])
    x_grid = np.hstack([np.ones((grid.shape[0], 1)), z_grid])
    total = np.zeros((grid.shape[0], n_species))
    for d in range(kept):
        coef = np.vstack(
            [
                draws.samples["beta0_bar"][d][None, :],
                draws.samples["B"][d].reshape(n_z, n_species),
            ]
        )
        resid = (
            draws.samples["L_bar"][d].reshape(n_sites, n_species)
            - x_sites @ coef
        )
        total += x_grid @ coef + weights.T @ resid
    species = tuple(dataset.species_labels()[:n_species])
    mean = total / kept
    return BiomassSurface(
        grid_coordinates=grid,
        mean_log_biomass=mean,
        species=species,
        index=_minmax_index(mean),
    )


def biodiversity_index(surface: BiomassSurface | np.ndarray) -> np.ndarray:
    """Per-point biodiversity index of a log-biomass surface.

    Each species surface is min-max rescaled to [0, 1] over the grid and
    the rescaled values are summed across species, so the index lies in
    [0, S]. Species with zero range over the grid contribute 0: a flat
    surface carries no spatial information. Constant shifts of any
    species surface leave the index unchanged.
    """
    if isinstance(surface, BiomassSurface):
        mat = surface.mean_log_biomass
    else:
        mat = np.asarray(surface, dtype=float)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise ValueError("empty grid")
    return _minmax_index(mat)
