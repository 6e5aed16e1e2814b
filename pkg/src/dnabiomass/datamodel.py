"""Survey dataset container, prior hyperparameters, and validation.

The observed survey is stored in flat PCR-major arrays: one row per PCR
replicate, rows grouped by sample and samples grouped by site. Integer index
arrays map PCR rows to samples and samples to sites; this is the layout the
sampler updates consume directly (segment reductions over contiguous groups).

Read-count columns are ordered target species first, then spike-in species.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

__all__ = [
    "OtuDataset",
    "HyperParams",
    "ValidationReport",
    "validate_dataset",
    "require_valid",
    "rescale_to_unit_square",
]


def rescale_to_unit_square(coordinates: np.ndarray) -> np.ndarray:
    """Map planar site coordinates into the unit square.

    Both axes are shifted to zero and divided by the larger of the two
    coordinate ranges, so relative distances are preserved (the longer axis
    spans [0, 1], the shorter a sub-interval). Degenerate axes with zero
    range map to 0.5.
    """
    coords = np.asarray(coordinates, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coordinates must be an (n_sites, 2) array")
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must be finite")
    mins = coords.min(axis=0)
    ranges = coords.max(axis=0) - mins
    span = ranges.max()
    if span <= 0.0:
        return np.full_like(coords, 0.5)
    out = (coords - mins) / span
    out[:, ranges == 0.0] = 0.5
    return out


@dataclass(frozen=True)
class HyperParams:
    """Fixed prior hyperparameters for the read-count model.

    Fields suffixed ``_sq`` are variances; ``sigma_mu``, ``nu_fixed`` and
    ``sigma_r`` are standard deviations; ``*_rate`` fields are exponential
    rates; remaining ``a_* / b_*`` pairs are Beta or inverse-gamma
    shape/scale pairs.
    """

    sigma_beta_sq: float = 1.0  # variance of regression-coefficient priors
    l_Sigma: float = 0.05  # spatial kernel length-scale on the unit square
    a_zeta: float = 1.0  # Beta prior on the contamination probability
    b_zeta: float = 50.0
    sigma_mu: float = 1.0  # sd of the contamination-level prior
    nu_fixed: float = 1.0  # fixed sd of contaminated log-quantities
    a_p: float = 20.0  # Beta prior on the amplification probability
    b_p: float = 1.0
    a_q: float = 1.0  # Beta prior on the noise-amplification probability
    b_q: float = 100.0
    mu_r: float = 100.0  # truncated-normal prior on the NB sizes
    sigma_r: float = 100.0
    a_sigma: float = 2.0  # inverse-gamma prior on the sample noise variances
    b_sigma: float = 1.0
    a_u: float = 2.0  # inverse-gamma prior on the PCR effect variance
    b_u: float = 1.0
    a_pi: float = 1.0  # Beta prior on the zero-inflation weight
    b_pi: float = 1.0
    sigma_phi_sq: float = 1.0  # variance of logistic-coefficient priors
    lambda_GH: float = 1.0  # exponential rate on precision diagonals
    mu_tilde_rate: float = 0.01  # exponential prior on the noise-read mean
    mu0_rate: float = 0.1  # exponential priors on the zero-model NB
    n0_rate: float = 0.1

    def validate(self) -> None:
        """Raise ValueError unless every hyperparameter is finite and > 0."""
        for f in fields(self):
            value = float(getattr(self, f.name))
            if not np.isfinite(value) or value <= 0.0:
                raise ValueError(
                    f"hyperparameter {f.name} must be strictly positive, "
                    f"got {value!r}"
                )


def _frozen_array(values, dtype=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def _as_labels(values: Sequence[str] | None) -> tuple[str, ...] | None:
    if values is None:
        return None
    return tuple(str(v) for v in values)


@dataclass(frozen=True)
class OtuDataset:
    """An observed metabarcoding survey in flat PCR-major layout.

    Attributes
    ----------
    reads : (n_pcr, n_species + n_spikes) array
        Read counts; one row per PCR replicate, target species columns
        first, spike-in columns last.
    offsets : (n_pcr,) array
        Log-scale normalisation offsets per PCR replicate.
    sample_of_pcr : (n_pcr,) int array
        Sample index of each PCR row; must be non-decreasing.
    site_of_sample : (n_samples,) int array
        Site index of each sample; must be non-decreasing.
    coordinates : (n_sites, 2) array
        Planar site coordinates in arbitrary units; ``unit_coordinates``
        gives the rescaled version used by the spatial kernel.
    site_covariates : (n_sites, n_site_covariates) array
        Covariates entering the biomass regression (may have 0 columns).
    sample_covariates : (n_samples, n_sample_covariates) array
        Covariates entering the collection stage (may have 0 columns).
    n_spikes : int
        Number of spike-in species (the trailing read columns).
    spike_log_amounts : (n_samples, n_spikes) array
        Known log amounts of spiked DNA per sample (0 for equal amounts).
    negative_control : (n_samples,) bool array
        True for field/lab negative-control samples.
    """

    reads: np.ndarray
    offsets: np.ndarray
    sample_of_pcr: np.ndarray
    site_of_sample: np.ndarray
    coordinates: np.ndarray
    site_covariates: np.ndarray | None = None
    sample_covariates: np.ndarray | None = None
    n_spikes: int = 0
    spike_log_amounts: np.ndarray | None = None
    negative_control: np.ndarray | None = None
    site_ids: tuple[str, ...] | None = None
    sample_ids: tuple[str, ...] | None = None
    pcr_ids: tuple[str, ...] | None = None
    species_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "reads", _frozen_array(self.reads))
        set_(self, "offsets", _frozen_array(self.offsets, dtype=float))
        set_(self, "sample_of_pcr", _frozen_array(self.sample_of_pcr))
        set_(self, "site_of_sample", _frozen_array(self.site_of_sample))
        set_(self, "coordinates", _frozen_array(self.coordinates, dtype=float))

        n_sites = self.coordinates.shape[0] if self.coordinates.ndim == 2 else 0
        n_samples = self.site_of_sample.shape[0]
        if self.site_covariates is None:
            set_(self, "site_covariates", _frozen_array(np.zeros((n_sites, 0))))
        else:
            set_(self, "site_covariates",
                 _frozen_array(np.atleast_2d(self.site_covariates), dtype=float))
        if self.sample_covariates is None:
            set_(self, "sample_covariates",
                 _frozen_array(np.zeros((n_samples, 0))))
        else:
            set_(self, "sample_covariates",
                 _frozen_array(np.atleast_2d(self.sample_covariates), dtype=float))
        if self.spike_log_amounts is None:
            set_(self, "spike_log_amounts",
                 _frozen_array(np.zeros((n_samples, int(self.n_spikes)))))
        else:
            set_(self, "spike_log_amounts",
                 _frozen_array(np.atleast_2d(self.spike_log_amounts), dtype=float))
        if self.negative_control is None:
            set_(self, "negative_control",
                 _frozen_array(np.zeros(n_samples, dtype=bool)))
        else:
            set_(self, "negative_control",
                 _frozen_array(self.negative_control, dtype=bool))

        set_(self, "n_spikes", int(self.n_spikes))
        set_(self, "site_ids", _as_labels(self.site_ids))
        set_(self, "sample_ids", _as_labels(self.sample_ids))
        set_(self, "pcr_ids", _as_labels(self.pcr_ids))
        set_(self, "species_ids", _as_labels(self.species_ids))

    # Derived dimensions -------------------------------------------------

    @property
    def n_pcr(self) -> int:
        return self.reads.shape[0]

    @property
    def n_samples(self) -> int:
        return self.site_of_sample.shape[0]

    @property
    def n_sites(self) -> int:
        return self.coordinates.shape[0]

    @property
    def n_species(self) -> int:
        """Number of target species (read columns minus spike-ins)."""
        return self.reads.shape[1] - self.n_spikes

    @property
    def n_species_total(self) -> int:
        return self.reads.shape[1]

    @property
    def n_site_covariates(self) -> int:
        return self.site_covariates.shape[1]

    @property
    def n_sample_covariates(self) -> int:
        return self.sample_covariates.shape[1]

    @property
    def samples_per_site(self) -> np.ndarray:
        return np.bincount(self.site_of_sample.astype(np.int64),
                           minlength=self.n_sites)

    @property
    def pcrs_per_sample(self) -> np.ndarray:
        return np.bincount(self.sample_of_pcr.astype(np.int64),
                           minlength=self.n_samples)

    @property
    def site_of_pcr(self) -> np.ndarray:
        return self.site_of_sample[self.sample_of_pcr]

    @property
    def unit_coordinates(self) -> np.ndarray:
        return rescale_to_unit_square(self.coordinates)

    def species_labels(self) -> tuple[str, ...]:
        """Species column labels, synthesised when none were provided."""
        if self.species_ids is not None:
            return self.species_ids
        targets = tuple(f"species_{j + 1}" for j in range(self.n_species))
        spikes = tuple(f"spike_{j + 1}" for j in range(self.n_spikes))
        return targets + spikes


@dataclass
class ValidationReport:
    """Outcome of dataset validation: fatal errors and design warnings."""

    errors: list[str]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.errors


def _is_integral(arr: np.ndarray) -> bool:
    if np.issubdtype(arr.dtype, np.integer):
        return True
    if np.issubdtype(arr.dtype, np.floating):
        finite = np.isfinite(arr)
        return bool(np.all(finite)) and bool(np.all(arr == np.round(arr)))
    return False


def validate_dataset(raw: OtuDataset) -> ValidationReport:
    """Check structural consistency and flag confounded designs.

    Returns a report whose ``errors`` make the dataset unusable downstream
    and whose ``warnings`` flag designs where variance components cannot be
    separated (single species, single PCR everywhere, single sample
    everywhere).
    """
    errors: list[str] = []
    warnings: list[str] = []

    reads = raw.reads
    n_pcr = raw.n_pcr
    n_samples = raw.n_samples
    n_sites = raw.n_sites

    if reads.ndim != 2:
        errors.append("reads must be a 2-d array (pcr rows, species columns)")
        return ValidationReport(errors, warnings)
    if not _is_integral(reads):
        errors.append("reads must be non-negative integers")
    elif np.any(np.asarray(reads) < 0):
        errors.append("reads contain negative counts")

    if not (0 <= raw.n_spikes <= reads.shape[1]):
        errors.append("n_spikes must lie between 0 and the read column count")
    elif raw.n_species < 1:
        errors.append("at least one target species column is required")

    if raw.offsets.shape != (n_pcr,):
        errors.append("offsets must have one entry per PCR row")
    elif not np.all(np.isfinite(raw.offsets)):
        errors.append("offsets contain non-finite values")

    if raw.sample_of_pcr.shape != (n_pcr,):
        errors.append("sample_of_pcr must have one entry per PCR row")
    elif not np.issubdtype(raw.sample_of_pcr.dtype, np.integer):
        errors.append("sample_of_pcr must be integer sample indices")
    else:
        som = raw.sample_of_pcr
        if n_pcr and (som.min() < 0 or som.max() >= n_samples):
            errors.append("sample_of_pcr indices out of range")
        elif np.any(np.diff(som) < 0):
            errors.append("PCR rows must be grouped by sample "
                          "(sample_of_pcr non-decreasing)")
        elif np.any(np.bincount(som, minlength=n_samples) == 0):
            errors.append("every sample needs at least one PCR replicate")

    if not np.issubdtype(raw.site_of_sample.dtype, np.integer):
        errors.append("site_of_sample must be integer site indices")
    else:
        sos = raw.site_of_sample
        if n_samples and (sos.min() < 0 or sos.max() >= n_sites):
            errors.append("site_of_sample indices out of range")
        elif np.any(np.diff(sos) < 0):
            errors.append("samples must be grouped by site "
                          "(site_of_sample non-decreasing)")

    if raw.coordinates.ndim != 2 or raw.coordinates.shape != (n_sites, 2):
        errors.append("coordinates must be an (n_sites, 2) array")
    elif not np.all(np.isfinite(raw.coordinates)):
        errors.append("coordinates contain non-finite values")
    if n_sites < 1:
        errors.append("at least one site is required")

    if raw.site_covariates.shape[0] != n_sites:
        errors.append("site_covariates must have one row per site")
    elif not np.all(np.isfinite(raw.site_covariates)):
        errors.append("site_covariates contain non-finite values")

    if raw.sample_covariates.shape[0] != n_samples:
        errors.append("sample_covariates must have one row per sample")
    elif not np.all(np.isfinite(raw.sample_covariates)):
        errors.append("sample_covariates contain non-finite values")

    if raw.spike_log_amounts.shape != (n_samples, raw.n_spikes):
        errors.append("spike_log_amounts must be (n_samples, n_spikes)")
    elif not np.all(np.isfinite(raw.spike_log_amounts)):
        errors.append("spike_log_amounts contain non-finite values")

    if raw.negative_control.shape != (n_samples,):
        errors.append("negative_control must have one flag per sample")

    for name, labels, expected in [
        ("site_ids", raw.site_ids, n_sites),
        ("sample_ids", raw.sample_ids, n_samples),
        ("pcr_ids", raw.pcr_ids, n_pcr),
        ("species_ids", raw.species_ids, reads.shape[1] if reads.ndim == 2 else 0),
    ]:
        if labels is not None and len(labels) != expected:
            errors.append(f"{name} must have {expected} entries")

    if errors:
        return ValidationReport(errors, warnings)

    if raw.n_species == 1:
        warnings.append(
            "single target species: pipeline effect u confounded with r_s"
        )
    if np.all(raw.pcrs_per_sample == 1):
        warnings.append(
            "every sample has a single PCR replicate: PCR variance "
            "sigma_u^2 confounded with sample noise sigma_s^2"
        )
    occupied = raw.samples_per_site[raw.samples_per_site > 0]
    if occupied.size and np.all(occupied == 1):
        warnings.append(
            "every site has a single sample: sample noise sigma_s^2 "
            "confounded with between-site variation"
        )

    return ValidationReport(errors, warnings)


def require_valid(dataset: OtuDataset) -> ValidationReport:
    """Validate and raise ValueError when the dataset has fatal errors."""
    report = validate_dataset(dataset)
    if not report.ok:
        raise ValueError("invalid dataset: " + "; ".join(report.errors))
    return report
