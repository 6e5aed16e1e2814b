"""Versioned text formats for datasets, configs, draws, and reports.

All files are UTF-8 with LF line endings and '.' as the decimal
separator. The first line of every file names its kind and format
version (for example ``# dnabiomass-reads v1``); readers reject missing
or unknown versions. Floating-point values are written with 17
significant digits so that reading them back reproduces the exact
binary values, which makes byte-identical re-runs checkable by hashing.

The dataset lives in long-format delimited text: a reads table with one
row per (PCR replicate, species) cell, a sites table with coordinates
and site covariates, an optional samples sidecar with negative-control
flags and sample covariates, and an optional spikes sidecar naming the
spike-in species and their known log amounts. Ragged designs (unequal
samples per site or PCR replicates per sample) are expressed naturally
by the long format. Zero read counts are data and must be present: each
PCR replicate needs exactly one row per species.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import fields
from pathlib import Path

import numpy as np

from .datamodel import HyperParams, OtuDataset, require_valid
from .simulate import SimSettings
from .state import ChainConfig, Draws, ModelState

FORMAT_VERSION = 1

__all__ = [
    "FORMAT_VERSION",
    "FileFormatError",
    "read_config",
    "write_config",
    "config_text",
    "config_sha256",
    "file_sha256",
    "read_settings",
    "write_settings",
    "settings_text",
    "settings_sha256",
    "read_dataset",
    "write_dataset",
    "site_covariate_names",
    "read_grid",
    "write_draws",
    "read_draws",
    "write_summary",
    "write_surface",
    "write_truth",
    "read_truth",
    "write_manifest",
    "read_manifest",
]


class FileFormatError(ValueError):
    """A file violates its declared format or cannot be parsed."""


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _version_line(kind: str) -> str:
    return f"# dnabiomass-{kind} v{FORMAT_VERSION}"


def _check_version(first_line: str, kind: str, path) -> None:
    token = first_line.strip()
    prefix = f"# dnabiomass-{kind} v"
    if not token.startswith(prefix):
        raise FileFormatError(
            f"{path}:1: expected format line '{_version_line(kind)}', "
            f"got {token!r}"
        )
    version = token[len(prefix) :]
    if not version.isdigit() or int(version) != FORMAT_VERSION:
        raise FileFormatError(
            f"{path}:1: unsupported {kind} format version {version!r} "
            f"(this reader supports v{FORMAT_VERSION})"
        )


# -- Generic tables ----------------------------------------------------------


def _read_table(path, kind):
    """Header and (line_number, row) pairs of a versioned CSV file."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if first == "":
            raise FileFormatError(f"{path}:1: empty file")
        _check_version(first, kind, path)
        reader = csv.reader(fh)
        try:
            header = [cell.strip() for cell in next(reader)]
        except StopIteration:
            raise FileFormatError(f"{path}:2: missing header row") from None
        rows = []
        for lineno, row in enumerate(reader, start=3):
            if not row:
                continue
            if len(row) != len(header):
                raise FileFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            rows.append((lineno, [cell.strip() for cell in row]))
    return header, rows


def _write_table(path, kind, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_version_line(kind) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _require_columns(header, required, path):
    indices = {}
    for name in required:
        if name not in header:
            raise FileFormatError(f"{path}: missing required column '{name}'")
        indices[name] = header.index(name)
    return indices


def _parse_float(cell, path, lineno, column) -> float:
    try:
        return float(cell)
    except ValueError:
        raise FileFormatError(
            f"{path}:{lineno}: column '{column}' has non-numeric "
            f"value {cell!r}"
        ) from None


def _parse_count(cell, path, lineno, column) -> int:
    try:
        value = int(cell)
    except ValueError:
        raise FileFormatError(
            f"{path}:{lineno}: column '{column}' has non-integer "
            f"value {cell!r}"
        ) from None
    if value < 0:
        raise FileFormatError(
            f"{path}:{lineno}: column '{column}' must be non-negative, "
            f"got {value}"
        )
    return value


def _parse_flag(cell, path, lineno, column) -> bool:
    token = cell.strip().lower()
    if token in ("1", "true", "yes"):
        return True
    if token in ("0", "false", "no"):
        return False
    raise FileFormatError(
        f"{path}:{lineno}: column '{column}' must be a 0/1 flag, "
        f"got {cell!r}"
    )


# -- Key-value files ---------------------------------------------------------


def _read_keyvalue(path, kind) -> dict[str, tuple[int, str]]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if first == "":
            raise FileFormatError(f"{path}:1: empty file")
        _check_version(first, kind, path)
        entries: dict[str, tuple[int, str]] = {}
        for lineno, raw in enumerate(fh, start=2):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FileFormatError(
                    f"{path}:{lineno}: expected 'key = value', got {raw!r}"
                )
            key, value = line.split("=", 1)
            key = key.strip()
            if key in entries:
                raise FileFormatError(
                    f"{path}:{lineno}: duplicate key '{key}'"
                )
            entries[key] = (lineno, value.strip())
    return entries


def _write_keyvalue(path, kind, pairs) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_version_line(kind) + "\n")
        for key, value in pairs:
            fh.write(f"{key} = {value}\n")


def _coerce(text: str, default, key: str, path, lineno):
    """Parse a key-value entry with the type of the dataclass default."""
    if isinstance(default, bool):
        return _parse_flag(text, path, lineno, key)
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise FileFormatError(
            f"{path}:{lineno}: key '{key}' has invalid value {text!r}"
        ) from None
    if isinstance(default, tuple):
        return tuple(part.strip() for part in text.split(",") if part.strip())
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _fmt(value)
    if isinstance(value, tuple):
        return ",".join(str(part) for part in value)
    return str(value)


# -- Sampler configuration ---------------------------------------------------

_HYPER_DEFAULT = HyperParams()
_CHAIN_DEFAULT = ChainConfig()
_HYPER_FIELDS = {f.name: getattr(_HYPER_DEFAULT, f.name) for f in fields(HyperParams)}
_CHAIN_FIELDS = {f.name: getattr(_CHAIN_DEFAULT, f.name) for f in fields(ChainConfig)}


def read_config(path) -> tuple[HyperParams, ChainConfig]:
    """Parse a flat key-value configuration file.

    Keys mirror the hyperparameter and chain-configuration field names;
    unknown keys are rejected. Both objects are validated before return.
    """
    entries = _read_keyvalue(path, "config")
    hyper_kwargs = {}
    chain_kwargs = {}
    for key, (lineno, text) in entries.items():
        if key in _HYPER_FIELDS:
            hyper_kwargs[key] = _coerce(text, _HYPER_FIELDS[key], key, path, lineno)
        elif key in _CHAIN_FIELDS:
            chain_kwargs[key] = _coerce(text, _CHAIN_FIELDS[key], key, path, lineno)
        else:
            raise FileFormatError(
                f"{path}:{lineno}: unknown configuration key '{key}'"
            )
    hyper = HyperParams(**hyper_kwargs)
    config = ChainConfig(**chain_kwargs)
    hyper.validate()
    config.validate()
    return hyper, config


def config_text(hyper: HyperParams, config: ChainConfig) -> str:
    """Canonical configuration serialisation (used for files and hashing)."""
    buf = io.StringIO()
    buf.write(_version_line("config") + "\n")
    buf.write("# prior hyperparameters\n")
    for f in fields(HyperParams):
        buf.write(f"{f.name} = {_render(getattr(hyper, f.name))}\n")
    buf.write("# chain configuration\n")
    for f in fields(ChainConfig):
        buf.write(f"{f.name} = {_render(getattr(config, f.name))}\n")
    return buf.getvalue()


def write_config(path, hyper: HyperParams, config: ChainConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(config_text(hyper, config))


def config_sha256(hyper: HyperParams, config: ChainConfig) -> str:
    digest = hashlib.sha256(config_text(hyper, config).encode("utf-8"))
    return digest.hexdigest()


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


# -- Simulation settings -----------------------------------------------------

_SETTINGS_DEFAULT = SimSettings()
_SETTINGS_FIELDS = {
    f.name: getattr(_SETTINGS_DEFAULT, f.name)
    for f in fields(SimSettings)
    if f.name != "species_cov"
}


def settings_text(settings: SimSettings) -> str:
    """Canonical settings serialisation (used for files and hashing)."""
    buf = io.StringIO()
    buf.write(_version_line("settings") + "\n")
    for name in _SETTINGS_FIELDS:
        buf.write(f"{name} = {_render(getattr(settings, name))}\n")
    return buf.getvalue()


def settings_sha256(settings: SimSettings) -> str:
    return hashlib.sha256(settings_text(settings).encode("utf-8")).hexdigest()


def read_settings(path) -> SimSettings:
    """Parse simulation settings from a flat key-value file.

    The optional species covariance matrix cannot be expressed in the
    flat format and stays at its default.
    """
    entries = _read_keyvalue(path, "settings")
    kwargs = {}
    for key, (lineno, text) in entries.items():
        if key not in _SETTINGS_FIELDS:
            raise FileFormatError(
                f"{path}:{lineno}: unknown settings key '{key}'"
            )
        kwargs[key] = _coerce(text, _SETTINGS_FIELDS[key], key, path, lineno)
    settings = SimSettings(**kwargs)
    settings.validate()
    return settings


def write_settings(path, settings: SimSettings) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(settings_text(settings))


# -- Dataset -----------------------------------------------------------------


def _read_sites(path):
    header, rows = _read_table(path, "sites")
    idx = _require_columns(header, ("site_id", "x", "y"), path)
    cov_names = [h for h in header if h not in ("site_id", "x", "y")]
    cov_idx = [header.index(h) for h in cov_names]
    ids: list[str] = []
    coords: list[list[float]] = []
    covs: list[list[float]] = []
    seen: dict[str, int] = {}
    for lineno, row in rows:
        site = row[idx["site_id"]]
        if site in seen:
            raise FileFormatError(
                f"{path}:{lineno}: duplicate site_id '{site}'"
            )
        seen[site] = len(ids)
        ids.append(site)
        coords.append(
            [
                _parse_float(row[idx["x"]], path, lineno, "x"),
                _parse_float(row[idx["y"]], path, lineno, "y"),
            ]
        )
        covs.append(
            [_parse_float(row[j], path, lineno, header[j]) for j in cov_idx]
        )
    if not ids:
        raise FileFormatError(f"{path}: no sites listed")
    return ids, np.array(coords), np.array(covs).reshape(len(ids), -1), cov_names


def _read_samples(path):
    header, rows = _read_table(path, "samples")
    idx = _require_columns(header, ("sample_id", "is_negative_control"), path)
    cov_names = [
        h for h in header if h not in ("sample_id", "is_negative_control")
    ]
    cov_idx = [header.index(h) for h in cov_names]
    flags: dict[str, bool] = {}
    covs: dict[str, list[float]] = {}
    for lineno, row in rows:
        sample = row[idx["sample_id"]]
        if sample in flags:
            raise FileFormatError(
                f"{path}:{lineno}: duplicate sample_id '{sample}'"
            )
        flags[sample] = _parse_flag(
            row[idx["is_negative_control"]], path, lineno, "is_negative_control"
        )
        covs[sample] = [
            _parse_float(row[j], path, lineno, header[j]) for j in cov_idx
        ]
    return flags, covs, cov_names


def _read_spikes(path):
    header, rows = _read_table(path, "spikes")
    idx = _require_columns(header, ("species_id", "sample_id", "log_amount"), path)
    order: list[str] = []
    amounts: dict[tuple[str, str], float] = {}
    for lineno, row in rows:
        species = row[idx["species_id"]]
        sample = row[idx["sample_id"]]
        if species not in order:
            order.append(species)
        key = (species, sample)
        if key in amounts:
            raise FileFormatError(
                f"{path}:{lineno}: duplicate spike entry for species "
                f"'{species}', sample '{sample}'"
            )
        amounts[key] = _parse_float(
            row[idx["log_amount"]], path, lineno, "log_amount"
        )
    return order, amounts


_READS_COLUMNS = ("site_id", "sample_id", "pcr_id", "species_id", "reads", "offset")


def read_dataset(
    reads_path,
    sites_path,
    samples_path=None,
    spikes_path=None,
    validate: bool = True,
) -> OtuDataset:
    """Assemble a dataset from its long-format text files.

    Site order follows the sites file; sample and PCR order follow first
    appearance in the reads file (grouped by site and sample
    respectively); species columns follow first appearance with spike-in
    species (those named in the spikes sidecar) moved after the targets.
    Every PCR replicate must carry exactly one row per species. When a
    samples sidecar is given it must cover every sample. Spike log
    amounts default to 0 for pairs the spikes sidecar does not list.
    """
    site_ids, coords, site_covs, _ = _read_sites(sites_path)
    site_index = {s: i for i, s in enumerate(site_ids)}
    if samples_path is not None:
        nc_flags, sample_covs, sample_cov_names = _read_samples(samples_path)
    else:
        nc_flags, sample_covs, sample_cov_names = {}, {}, []
    if spikes_path is not None:
        spike_order, spike_amounts = _read_spikes(spikes_path)
    else:
        spike_order, spike_amounts = [], {}

    header, rows = _read_table(reads_path, "reads")
    _require_columns(header, _READS_COLUMNS, reads_path)
    unexpected = [h for h in header if h not in _READS_COLUMNS]
    if unexpected:
        raise FileFormatError(
            f"{reads_path}: unexpected columns {unexpected}; the reads "
            f"table has exactly the columns {list(_READS_COLUMNS)}"
        )
    col = {name: header.index(name) for name in _READS_COLUMNS}

    sample_site: dict[str, str] = {}
    sample_seen: list[str] = []
    pcr_sample: dict[str, str] = {}
    pcr_seen: list[str] = []
    species_seen: list[str] = []
    cells: dict[tuple[str, str], tuple[int, float, int]] = {}
    for lineno, row in rows:
        site = row[col["site_id"]]
        sample = row[col["sample_id"]]
        pcr = row[col["pcr_id"]]
        species = row[col["species_id"]]
        if site not in site_index:
            raise FileFormatError(
                f"{reads_path}:{lineno}: unknown site_id '{site}' "
                f"(not listed in the sites file)"
            )
        if sample in sample_site:
            if sample_site[sample] != site:
                raise FileFormatError(
                    f"{reads_path}:{lineno}: sample '{sample}' appears "
                    f"under two sites ('{sample_site[sample]}' and '{site}')"
                )
        else:
            sample_site[sample] = site
            sample_seen.append(sample)
        if pcr in pcr_sample:
            if pcr_sample[pcr] != sample:
                raise FileFormatError(
                    f"{reads_path}:{lineno}: pcr_id '{pcr}' appears under "
                    f"two samples ('{pcr_sample[pcr]}' and '{sample}')"
                )
        else:
            pcr_sample[pcr] = sample
            pcr_seen.append(pcr)
        if species not in species_seen:
            species_seen.append(species)
        key = (pcr, species)
        if key in cells:
            raise FileFormatError(
                f"{reads_path}:{lineno}: duplicate cell for pcr_id "
                f"'{pcr}', species_id '{species}'"
            )
        count = _parse_count(row[col["reads"]], reads_path, lineno, "reads")
        offset = _parse_float(row[col["offset"]], reads_path, lineno, "offset")
        cells[key] = (count, offset, lineno)
    if not cells:
        raise FileFormatError(f"{reads_path}: no read rows")

    unknown_spikes = [s for s in spike_order if s not in species_seen]
    if unknown_spikes:
        raise FileFormatError(
            f"{spikes_path}: spike species {unknown_spikes} never appear "
            f"in the reads table"
        )
    targets = [s for s in species_seen if s not in spike_order]
    species_order = targets + spike_order

    if samples_path is not None:
        missing = [s for s in sample_seen if s not in nc_flags]
        if missing:
            raise FileFormatError(
                f"{samples_path}: samples {missing} appear in the reads "
                f"table but are not listed"
            )
        orphans = [s for s in nc_flags if s not in sample_site]
        if orphans:
            raise FileFormatError(
                f"{samples_path}: samples {orphans} never appear in the "
                f"reads table"
            )
    for species, sample in spike_amounts:
        if sample not in sample_site:
            raise FileFormatError(
                f"{spikes_path}: sample '{sample}' never appears in the "
                f"reads table"
            )

    sample_order = sorted(
        sample_seen,
        key=lambda s: (site_index[sample_site[s]], sample_seen.index(s)),
    )
    sample_index = {s: j for j, s in enumerate(sample_order)}
    pcr_order = sorted(
        pcr_seen,
        key=lambda p: (sample_index[pcr_sample[p]], pcr_seen.index(p)),
    )

    n_pcr = len(pcr_order)
    n_species_total = len(species_order)
    reads = np.zeros((n_pcr, n_species_total), dtype=np.int64)
    offsets = np.zeros(n_pcr)
    for i, pcr in enumerate(pcr_order):
        row_offset = None
        for j, species in enumerate(species_order):
            entry = cells.pop((pcr, species), None)
            if entry is None:
                raise FileFormatError(
                    f"{reads_path}: pcr_id '{pcr}' has no row for "
                    f"species_id '{species}' (every PCR replicate needs "
                    f"one row per species; zero counts are data)"
                )
            count, offset, lineno = entry
            reads[i, j] = count
            if row_offset is None:
                row_offset = offset
            elif row_offset != offset:
                raise FileFormatError(
                    f"{reads_path}:{lineno}: pcr_id '{pcr}' has "
                    f"inconsistent offsets ({_fmt(row_offset)} vs "
                    f"{_fmt(offset)})"
                )
        offsets[i] = row_offset
    if cells:
        (pcr, species), (_, _, lineno) = next(iter(cells.items()))
        raise FileFormatError(
            f"{reads_path}:{lineno}: unreachable cell for pcr_id '{pcr}', "
            f"species_id '{species}'"
        )

    n_samples = len(sample_order)
    sample_of_pcr = np.array(
        [sample_index[pcr_sample[p]] for p in pcr_order], dtype=np.int64
    )
    site_of_sample = np.array(
        [site_index[sample_site[s]] for s in sample_order], dtype=np.int64
    )
    negative_control = np.array(
        [nc_flags.get(s, False) for s in sample_order], dtype=bool
    )
    if sample_cov_names:
        sample_cov = np.array([sample_covs[s] for s in sample_order])
    else:
        sample_cov = np.zeros((n_samples, 0))
    n_spikes = len(spike_order)
    spike_log = np.zeros((n_samples, n_spikes))
    for k, species in enumerate(spike_order):
        for j, sample in enumerate(sample_order):
            spike_log[j, k] = spike_amounts.get((species, sample), 0.0)

    dataset = OtuDataset(
        reads=reads,
        offsets=offsets,
        sample_of_pcr=sample_of_pcr,
        site_of_sample=site_of_sample,
        coordinates=coords,
        site_covariates=site_covs,
        sample_covariates=sample_cov,
        n_spikes=n_spikes,
        spike_log_amounts=spike_log,
        negative_control=negative_control,
        site_ids=tuple(site_ids),
        sample_ids=tuple(sample_order),
        pcr_ids=tuple(pcr_order),
        species_ids=tuple(species_order),
    )
    if validate:
        require_valid(dataset)
    return dataset


def _dataset_ids(dataset: OtuDataset):
    sites = dataset.site_ids or tuple(
        f"site_{i + 1}" for i in range(dataset.n_sites)
    )
    samples = dataset.sample_ids or tuple(
        f"sample_{j + 1}" for j in range(dataset.n_samples)
    )
    pcrs = dataset.pcr_ids or tuple(
        f"pcr_{i + 1}" for i in range(dataset.n_pcr)
    )
    species = dataset.species_labels()
    return sites, samples, pcrs, species


def write_dataset(dataset: OtuDataset, directory) -> dict[str, Path]:
    """Write the dataset's text files and return their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sites, samples, pcrs, species = _dataset_ids(dataset)
    paths = {
        "reads": directory / "reads.csv",
        "sites": directory / "sites.csv",
        "samples": directory / "samples.csv",
    }

    z_names = [f"z{k + 1}" for k in range(dataset.n_site_covariates)]
    site_rows = [
        [sites[i], _fmt(dataset.coordinates[i, 0]), _fmt(dataset.coordinates[i, 1])]
        + [_fmt(v) for v in dataset.site_covariates[i]]
        for i in range(dataset.n_sites)
    ]
    _write_table(paths["sites"], "sites", ["site_id", "x", "y", *z_names], site_rows)

    w_names = [f"w{k + 1}" for k in range(dataset.n_sample_covariates)]
    sample_rows = [
        [samples[j], "1" if dataset.negative_control[j] else "0"]
        + [_fmt(v) for v in dataset.sample_covariates[j]]
        for j in range(dataset.n_samples)
    ]
    _write_table(
        paths["samples"],
        "samples",
        ["sample_id", "is_negative_control", *w_names],
        sample_rows,
    )

    read_rows = []
    for i in range(dataset.n_pcr):
        j = int(dataset.sample_of_pcr[i])
        site = sites[int(dataset.site_of_sample[j])]
        for s, name in enumerate(species):
            read_rows.append(
                [
                    site,
                    samples[j],
                    pcrs[i],
                    name,
                    str(int(dataset.reads[i, s])),
                    _fmt(dataset.offsets[i]),
                ]
            )
    _write_table(paths["reads"], "reads", list(_READS_COLUMNS), read_rows)

    if dataset.n_spikes > 0:
        spike_rows = []
        for k in range(dataset.n_spikes):
            name = species[dataset.n_species + k]
            for j in range(dataset.n_samples):
                spike_rows.append(
                    [name, samples[j], _fmt(dataset.spike_log_amounts[j, k])]
                )
        paths["spikes"] = directory / "spikes.csv"
        _write_table(
            paths["spikes"],
            "spikes",
            ["species_id", "sample_id", "log_amount"],
            spike_rows,
        )
    return paths


def site_covariate_names(sites_path) -> list[str]:
    """Covariate column names of a sites file (order preserved)."""
    return _read_sites(sites_path)[3]


def read_grid(path, covariate_names):
    """Read a prediction grid with the covariate columns the fit used.

    The grid must provide exactly the covariate columns named in the
    sites file, in the same order; nothing is imputed.
    """
    header, rows = _read_table(path, "grid")
    _require_columns(header, ("point_id", "x", "y"), path)
    provided = [h for h in header if h not in ("point_id", "x", "y")]
    expected = list(covariate_names)
    if provided != expected:
        raise FileFormatError(
            f"{path}: grid covariate columns {provided} do not match the "
            f"site covariate columns {expected}; grid covariate values "
            f"are required and never imputed"
        )
    idx = {name: header.index(name) for name in header}
    ids = []
    coords = []
    covs = []
    for lineno, row in rows:
        point = row[idx["point_id"]]
        if point in ids:
            raise FileFormatError(
                f"{path}:{lineno}: duplicate point_id '{point}'"
            )
        ids.append(point)
        coords.append(
            [
                _parse_float(row[idx["x"]], path, lineno, "x"),
                _parse_float(row[idx["y"]], path, lineno, "y"),
            ]
        )
        covs.append(
            [
                _parse_float(row[idx[name]], path, lineno, name)
                for name in expected
            ]
        )
    if not ids:
        raise FileFormatError(f"{path}: no grid points listed")
    return ids, np.array(coords), np.array(covs).reshape(len(ids), -1)


# -- Draws and reports -------------------------------------------------------


def write_draws(draws: Draws, directory) -> list[Path]:
    """Write one tabular text file per tracked parameter group."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for group, matrix in draws.samples.items():
        path = directory / f"draws_{group}.csv"
        header = ["iteration", *draws.columns[group]]
        rows = [
            [str(int(draws.iterations[k]))]
            + [_fmt(v) for v in matrix[k]]
            for k in range(matrix.shape[0])
        ]
        _write_table(path, "draws", header, rows)
        paths.append(path)
    return paths


def read_draws(directory) -> Draws:
    """Rebuild a draws container from a directory of group files."""
    directory = Path(directory)
    files = sorted(directory.glob("draws_*.csv"))
    if not files:
        raise FileFormatError(f"{directory}: no draws_*.csv files found")
    samples: dict[str, np.ndarray] = {}
    columns: dict[str, list[str]] = {}
    iterations: np.ndarray | None = None
    for path in files:
        group = path.stem[len("draws_") :]
        header, rows = _read_table(path, "draws")
        if not header or header[0] != "iteration":
            raise FileFormatError(
                f"{path}: first column must be 'iteration'"
            )
        labels = header[1:]
        iters = np.array(
            [_parse_count(row[0], path, lineno, "iteration") for lineno, row in rows],
            dtype=np.int64,
        )
        matrix = np.array(
            [
                [
                    _parse_float(cell, path, lineno, header[1 + k])
                    for k, cell in enumerate(row[1:])
                ]
                for lineno, row in rows
            ]
        ).reshape(len(rows), len(labels))
        if iterations is None:
            iterations = iters
        elif not np.array_equal(iterations, iters):
            raise FileFormatError(
                f"{path}: iteration column differs from the other groups"
            )
        samples[group] = matrix
        columns[group] = labels
    return Draws(
        samples=samples,
        columns=columns,
        iterations=iterations,
        config=ChainConfig(),
        meta={"source": str(directory)},
    )


def write_summary(report, path) -> None:
    header = ["name", "mean", "sd", "lower", "upper", "ess", "rhat"]
    rows = [
        [name, _fmt(mean), _fmt(sd), _fmt(lo), _fmt(hi), _fmt(ess), _fmt(rhat)]
        for name, mean, sd, lo, hi, ess, rhat in report.rows()
    ]
    _write_table(path, "summary", header, rows)


def write_surface(surface, surface_path, index_path, point_ids=None) -> None:
    """Write prediction surfaces and the per-point biodiversity index."""
    grid = surface.grid_coordinates
    count = grid.shape[0]
    if point_ids is None:
        point_ids = [f"point_{g + 1}" for g in range(count)]
    rows = []
    for g in range(count):
        for s, name in enumerate(surface.species):
            rows.append(
                [
                    point_ids[g],
                    _fmt(grid[g, 0]),
                    _fmt(grid[g, 1]),
                    name,
                    _fmt(surface.mean_log_biomass[g, s]),
                ]
            )
    _write_table(
        surface_path,
        "surface",
        ["point_id", "x", "y", "species_id", "mean_log_biomass"],
        rows,
    )
    index_rows = [
        [point_ids[g], _fmt(grid[g, 0]), _fmt(grid[g, 1]), _fmt(surface.index[g])]
        for g in range(count)
    ]
    _write_table(index_path, "index", ["point_id", "x", "y", "index"], index_rows)


# -- Simulation truth --------------------------------------------------------

_TRUTH_ARRAYS = (
    "lam",
    "beta0_bar",
    "B",
    "L_bar",
    "u",
    "v_bar",
    "delta",
    "gamma",
    "c",
    "eta",
    "r",
    "beta_w",
    "sigma_s_sq",
    "mu_bar",
    "phi1",
    "phi",
    "zeta",
    "p",
    "q",
)
_TRUTH_SCALARS = ("sigma_u_sq", "nu_sq", "pi", "mu0", "n0", "mu_tilde")


def write_truth(state: ModelState, path) -> None:
    """Serialise the generating parameter values of a simulated dataset."""
    rows = []

    def emit(name, array):
        arr = np.asarray(array, dtype=float)
        if arr.ndim == 0:
            rows.append([name, "", _fmt(arr)])
            return
        for index in np.ndindex(arr.shape):
            rows.append(
                [
                    name,
                    ":".join(str(i) for i in index),
                    _fmt(arr[index]),
                ]
            )

    for name in _TRUTH_ARRAYS:
        emit(name, getattr(state, name))
    for name in _TRUTH_SCALARS:
        emit(name, getattr(state, name))
    emit("T", np.linalg.inv(state.gh.precision))
    _write_table(path, "truth", ["parameter", "index", "value"], rows)


def read_truth(path) -> dict[str, np.ndarray]:
    """Read a truth file back into named float arrays."""
    header, rows = _read_table(path, "truth")
    idx = _require_columns(header, ("parameter", "index", "value"), path)
    collected: dict[str, dict[tuple[int, ...], float]] = {}
    for lineno, row in rows:
        name = row[idx["parameter"]]
        index_text = row[idx["index"]]
        value = _parse_float(row[idx["value"]], path, lineno, "value")
        try:
            index = (
                tuple(int(part) for part in index_text.split(":"))
                if index_text
                else ()
            )
        except ValueError:
            raise FileFormatError(
                f"{path}:{lineno}: bad index {index_text!r}"
            ) from None
        collected.setdefault(name, {})[index] = value
    out: dict[str, np.ndarray] = {}
    for name, values in collected.items():
        first = next(iter(values))
        if first == ():
            out[name] = np.float64(values[()])
            continue
        shape = tuple(
            1 + max(index[d] for index in values) for d in range(len(first))
        )
        if len(values) != math.prod(shape):
            raise FileFormatError(
                f"{path}: parameter '{name}' has {len(values)} entries "
                f"but implies shape {shape}"
            )
        arr = np.empty(shape)
        for index, value in values.items():
            arr[index] = value
        out[name] = arr
    return out


# -- Run manifest ------------------------------------------------------------


def write_manifest(path, entries: dict[str, str]) -> None:
    """Write run provenance as ordered key-value pairs.

    Entries must make re-running bit-exact (seed, configuration hash,
    input hashes, software version, backend); timestamps are never
    included so identical runs produce identical manifests.
    """
    _write_keyvalue(path, "manifest", list(entries.items()))


def read_manifest(path) -> dict[str, str]:
    entries = _read_keyvalue(path, "manifest")
    return {key: value for key, (_, value) in entries.items()}
