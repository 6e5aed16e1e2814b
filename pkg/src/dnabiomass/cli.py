"""Command-line entry points: fit, simulate, design, and summarize.

Artifacts are plain versioned text files (see the file formats module).
Exit codes: 0 on success, 1 on validation or format errors, 2 on I/O
errors. Multi-chain fits use seeds ``seed + chain_index``; on a
single-core host the chains execute sequentially, which is
observationally identical to concurrent execution because each chain is
independent given its seed.
"""

from __future__ import annotations

import argparse
import itertools
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import BACKEND_NAME
from .datamodel import HyperParams
from .design import DesignSpec, gaussian_design_oracle, var_beta, var_biomass_diff
from .engine import run_chain
from .fileio import (
    FileFormatError,
    config_sha256,
    file_sha256,
    read_config,
    read_dataset,
    read_draws,
    read_grid,
    read_settings,
    site_covariate_names,
    write_config,
    write_dataset,
    write_draws,
    write_manifest,
    write_settings,
    write_summary,
    write_surface,
    write_truth,
    settings_sha256,
)
from .simulate import SimSettings, simulate_dataset
from .state import ChainConfig, Draws
from .summaries import predict_biomass_grid, summarize_draws

__all__ = ["main", "cmd_fit", "cmd_simulate", "cmd_design", "cmd_summarize"]


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with the validation code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit_WithCode(f"error: {message}", 1)


class SystemExit_WithCode(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected a comma-separated integer list, got {text!r}"
        ) from None
    if not values:
        raise argparse.ArgumentTypeError("empty integer list")
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="dnabiomass",
        description=(
            "Hierarchical joint modelling of species biomass from DNA "
            "metabarcoding read counts"
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="run the MCMC sampler on a dataset")
    fit.add_argument("--reads", required=True, help="long-format reads table")
    fit.add_argument("--sites", required=True, help="site coordinates and covariates")
    fit.add_argument("--samples", help="sample sidecar (negative controls, covariates)")
    fit.add_argument("--spikes", help="spike-in sidecar (known log amounts)")
    fit.add_argument("--config", help="flat key-value sampler configuration")
    fit.add_argument("--chains", type=int, default=1, help="number of chains")
    fit.add_argument("--seed", type=int, help="override the configured seed")
    fit.add_argument("--out", required=True, help="output directory")

    sim = sub.add_parser("simulate", help="draw a synthetic survey")
    sim.add_argument("--settings", help="flat key-value simulation settings")
    sim.add_argument("--seed", type=int, default=0, help="simulation seed")
    sim.add_argument("--out", required=True, help="output directory")

    design = sub.add_parser("design", help="closed-form study-design variances")
    design.add_argument("--n-sites", type=_int_list, default=[10])
    design.add_argument("--m-samples", type=_int_list, default=[1])
    design.add_argument("--k-pcr", type=_int_list, default=[1])
    design.add_argument("--n-spikes", type=_int_list, default=[0])
    design.add_argument("--n-species", type=int, default=1)
    design.add_argument("--sigma-sq", type=float, default=1.0)
    design.add_argument("--sigma-y-sq", type=float, default=1.0)
    design.add_argument("--sigma-u-sq", type=float, default=1.0)
    design.add_argument("--tau-sq", type=float, default=1.0)
    design.add_argument(
        "--oracle",
        action="store_true",
        help="add exact Gaussian-model oracle columns",
    )
    design.add_argument("--oracle-draws", type=int, default=200)
    design.add_argument("--out", help="output file (defaults to stdout)")

    summ = sub.add_parser("summarize", help="summarise stored draws")
    summ.add_argument("--draws", required=True, help="draws directory (or parent of chain_* directories)")
    summ.add_argument("--out", required=True, help="output directory")
    summ.add_argument("--grid", help="prediction grid (point_id,x,y,covariates)")
    summ.add_argument("--reads", help="reads table (required with --grid)")
    summ.add_argument("--sites", help="sites table (required with --grid)")
    summ.add_argument("--samples", help="sample sidecar")
    summ.add_argument("--spikes", help="spike-in sidecar")
    summ.add_argument("--config", help="configuration used for the fit")
    return parser


# -- fit ---------------------------------------------------------------------


def cmd_fit(args) -> int:
    if args.config is not None:
        hyper, config = read_config(args.config)
    else:
        hyper, config = HyperParams(), ChainConfig()
    if args.seed is not None:
        config = replace(config, seed=int(args.seed))
    if args.chains < 1:
        raise ValueError("--chains must be at least 1")
    dataset = read_dataset(args.reads, args.sites, args.samples, args.spikes)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chains: list[Draws] = []
    clamp_events = 0
    for index in range(args.chains):
        chain_config = replace(config, seed=config.seed + index)
        draws = run_chain(dataset, hyper, chain_config)
        write_draws(draws, out / f"chain_{index:02d}")
        chains.append(draws)
        clamp_events += int(draws.meta.get("clamp_events", 0))
        print(f"chain {index}: {draws.n_draws} draws kept (seed {chain_config.seed})")

    report = summarize_draws(chains)
    write_summary(report, out / "summary.csv")
    write_config(out / "config.txt", hyper, config)

    sample_ids = dataset.sample_ids or tuple(
        f"sample_{j + 1}" for j in range(dataset.n_samples)
    )
    nc_ids = [
        sample_ids[j]
        for j in range(dataset.n_samples)
        if dataset.negative_control[j]
    ]
    spike_ids = list(dataset.species_labels()[dataset.n_species :])
    manifest = {
        "command": "fit",
        "software_version": __version__,
        "backend": BACKEND_NAME,
        "seed": str(config.seed),
        "chains": str(args.chains),
        "config_sha256": config_sha256(hyper, config),
        "reads_sha256": file_sha256(args.reads),
        "sites_sha256": file_sha256(args.sites),
    }
    if args.samples is not None:
        manifest["samples_sha256"] = file_sha256(args.samples)
    if args.spikes is not None:
        manifest["spikes_sha256"] = file_sha256(args.spikes)
    manifest["clamp_negative_controls"] = ",".join(nc_ids)
    manifest["clamp_spike_species"] = ",".join(spike_ids)
    manifest["clamp_events"] = str(clamp_events)
    write_manifest(out / "manifest.txt", manifest)
    print(f"wrote {out / 'summary.csv'} and {out / 'manifest.txt'}")
    return 0


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.settings is not None:
        settings = read_settings(args.settings)
    else:
        settings = SimSettings()
    dataset, truth = simulate_dataset(settings, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = write_dataset(dataset, out)
    write_truth(truth, out / "truth.csv")
    write_settings(out / "settings.txt", settings)
    manifest = {
        "command": "simulate",
        "software_version": __version__,
        "seed": str(args.seed),
        "settings_sha256": settings_sha256(settings),
    }
    write_manifest(out / "manifest.txt", manifest)
    names = ", ".join(str(path) for path in paths.values())
    print(f"wrote {names}, {out / 'truth.csv'}")
    return 0


# -- design ------------------------------------------------------------------


def cmd_design(args) -> int:
    header = [
        "n_sites",
        "m_samples",
        "k_pcr",
        "n_spikes",
        "var_biomass_diff",
        "var_beta",
    ]
    if args.oracle:
        header += ["oracle_diff", "oracle_beta"]
    rows = []
    grid = itertools.product(
        sorted(set(args.n_sites)),
        sorted(set(args.m_samples)),
        sorted(set(args.k_pcr)),
        sorted(set(args.n_spikes)),
    )
    for n, m, k, s_star in grid:
        spec = DesignSpec(
            n_sites=n,
            m_samples=m,
            k_pcr=k,
            n_species=args.n_species,
            n_spikes=s_star,
            sigma_sq=args.sigma_sq,
            sigma_y_sq=args.sigma_y_sq,
            sigma_u_sq=args.sigma_u_sq,
            tau_sq=args.tau_sq,
        )
        diff = var_biomass_diff(spec)
        beta = var_beta(spec) if n >= 2 else float("nan")
        row = [str(n), str(m), str(k), str(s_star), f"{diff:.17g}", f"{beta:.17g}"]
        if args.oracle:
            oracle_diff = gaussian_design_oracle(spec, mode="diff")
            oracle_beta = (
                gaussian_design_oracle(spec, mode="beta", n_draws=args.oracle_draws)
                if n >= 2
                else float("nan")
            )
            row += [f"{oracle_diff:.17g}", f"{oracle_beta:.17g}"]
        rows.append(row)
    lines = ["# dnabiomass-design v1", ",".join(header)]
    lines += [",".join(row) for row in rows]
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    return 0


# -- summarize ---------------------------------------------------------------


def _load_chain_draws(directory: Path) -> list[Draws]:
    subdirs = sorted(
        (d for d in directory.glob("chain_*") if d.is_dir()),
        key=lambda d: d.name,
    )
    if subdirs:
        return [read_draws(d) for d in subdirs]
    return [read_draws(directory)]


def _concat_chains(chains: list[Draws]) -> Draws:
    first = chains[0]
    if len(chains) == 1:
        return first
    samples = {
        group: np.concatenate([c.samples[group] for c in chains], axis=0)
        for group in first.samples
    }
    iterations = np.concatenate([c.iterations for c in chains])
    return Draws(
        samples=samples,
        columns=first.columns,
        iterations=iterations,
        config=first.config,
        meta={"chains": len(chains)},
    )


def cmd_summarize(args) -> int:
    chains = _load_chain_draws(Path(args.draws))
    report = summarize_draws(chains)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_summary(report, out / "summary.csv")
    print(f"wrote {out / 'summary.csv'}")

    if args.grid is None:
        return 0
    if args.reads is None or args.sites is None:
        raise ValueError(
            "--grid prediction needs the fitted dataset: pass --reads "
            "and --sites (plus --samples/--spikes when the fit used them)"
        )
    dataset = read_dataset(args.reads, args.sites, args.samples, args.spikes)
    if args.config is not None:
        hyper, _ = read_config(args.config)
    else:
        hyper = HyperParams()
    point_ids, grid_coords, grid_covs = read_grid(
        args.grid, site_covariate_names(args.sites)
    )
    pooled = _concat_chains(chains)
    surface = predict_biomass_grid(
        pooled,
        dataset,
        grid_coords,
        grid_covariates=grid_covs if grid_covs.shape[1] > 0 else None,
        hyper=hyper,
    )
    write_surface(surface, out / "surface.csv", out / "index.csv", point_ids)
    print(f"wrote {out / 'surface.csv'} and {out / 'index.csv'}")
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "design": cmd_design,
    "summarize": cmd_summarize,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit_WithCode as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except (FileFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
