"""Command-line orchestration: synth, measure, estimate, surrogate.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or data error.
The CDEV_THREADS environment variable overrides the worker count (0 = auto).
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import causal, corpus, plots, surrogate
from .corpus import Manifest, read_kv
from .signal import ConfigError, DataError, Spectrum
from .signal import _next_pow2
from .surrogate import SurrogateConfig

CLICK_OBSERVABLES = ("n_clicks", "mean_ici", "std_ici")
SPECTRAL_OBSERVABLES = ("spectral_mean_hz", "spectral_mean_std_hz", "coda_spectral_mean_hz")
ALL_OBSERVABLES = CLICK_OBSERVABLES + SPECTRAL_OBSERVABLES
STRATIFIED_OBSERVABLES = ("mean_ici", "std_ici")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run the full pipeline from one flat config file."""

    manifest: Manifest
    out_dir: str
    baseline_clicks: float = -1.0
    baseline_spectral: float = 1.0
    theta_restricted_min: float = 1.0
    sign_na_as_minus_one: bool = False
    surrogate: SurrogateConfig = SurrogateConfig()


def load_experiment_config(path) -> ExperimentConfig:
    kv = read_kv(path)
    base = Manifest(n_units=2500).to_kv()
    manifest_kv = dict(base)
    surrogate_kwargs = {}
    extras = {}
    for key, value in kv.items():
        if key.startswith("surrogate."):
            surrogate_kwargs[key.split(".", 1)[1]] = value
        elif key.startswith("estimator.") or key == "out_dir":
            extras[key] = value
        else:
            manifest_kv[key] = value
    if "out_dir" not in extras:
        raise ConfigError(f"{path}: missing key 'out_dir'")
    manifest = Manifest.from_kv(manifest_kv)

    sur_fields = {f.name: f.type for f in fields(SurrogateConfig)}
    parsed_sur = {}
    for name, value in surrogate_kwargs.items():
        if name not in sur_fields:
            raise ConfigError(f"{path}: unknown key surrogate.{name}")
        if name == "max_leaves_grid":
            parsed_sur[name] = tuple(int(v) for v in value.split(","))
        else:
            parsed_sur[name] = corpus._parse_typed(value, sur_fields[name])

    def est(key: str, default: str) -> str:
        return extras.get(f"estimator.{key}", default)

    return ExperimentConfig(
        manifest=manifest,
        out_dir=extras["out_dir"],
        baseline_clicks=float(est("baseline_clicks", "-1.0")),
        baseline_spectral=float(est("baseline_spectral", "1.0")),
        theta_restricted_min=float(est("theta_restricted_min", "1.0")),
        sign_na_as_minus_one=est("sign_na_as_minus_one", "false").lower()
        in ("1", "true", "yes"),
        surrogate=SurrogateConfig(**parsed_sur),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = load_experiment_config(args.config)
    count = corpus.generate_corpus(config.manifest, config.out_dir, overwrite=args.overwrite)
    manifest_path = Path(config.out_dir) / corpus.MANIFEST_NAME
    print(f"wrote {count} clips to {config.out_dir}")
    print(f"manifest: {manifest_path}")
    return 0


def cmd_measure(args) -> int:
    records, skipped = corpus.measure_corpus(args.in_dir, keep_spectra=args.spectra)
    total = len(records) + len(skipped)
    corpus.write_observables_csv(records, args.out_csv)
    print(f"measured {len(records)} clips, skipped {len(skipped)}")
    if args.spectra:
        sidecar = _spectra_path(args.out_csv)
        corpus.write_spectra_csv(records, sidecar)
        print(f"spectra sidecar: {sidecar}")
    print(f"observables: {args.out_csv}")
    if total and len(skipped) > 0.5 * total:
        print(f"error: {len(skipped)}/{total} files skipped", file=sys.stderr)
        return 3
    return 0


def _spectra_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + "_spectra" + p.suffix)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _cell(value) -> str:
    return corpus._cell(value)


def _curve_rows(curves, stratum=None):
    for curve in curves:
        for dose, est, n in zip(curve.doses, curve.estimates, curve.counts):
            yield [
                _cell(curve.bit),
                curve.observable,
                "" if stratum is None else _cell(stratum),
                _cell(dose),
                _cell(est),
                _cell(n),
            ]


_CURVE_HEADER = ("bit", "observable", "stratum", "dose", "estimate", "n")


def _find_manifest(args_manifest, in_csv) -> Manifest | None:
    if args_manifest:
        return Manifest.from_kv(read_kv(args_manifest))
    sibling = Path(in_csv).parent / corpus.MANIFEST_NAME
    if sibling.is_file():
        return Manifest.from_kv(read_kv(sibling))
    return None


def cmd_estimate(args) -> int:
    records = corpus.read_observables_csv(args.in_csv)
    if not records:
        raise DataError(f"{args.in_csv}: no records")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bits = sorted({r.bit for r in records})

    theta_rows = []
    for observable in ALL_OBSERVABLES:
        baseline = args.baseline_clicks if observable in CLICK_OBSERVABLES else args.baseline_spectral
        grids = {b: causal.build_grid(records, b, observable) for b in bits}
        grids = {b: g for b, g in grids.items() if g.doses}
        if not grids:
            continue
        for b, grid in grids.items():
            if baseline not in grid.doses:
                raise ConfigError(
                    f"baseline dose {baseline} for {observable} is not in the dose grid"
                )
        ates = [causal.ate_curve(g, baseline) for g in grids.values()]
        _write_rows(out / f"ate_{observable}.csv", _CURVE_HEADER, _curve_rows(ates))
        plots.plot_effect_curves(
            ates, out / f"ate_{observable}.svg", f"ATE: {observable}", f"effect on {observable}"
        )
        ices = [causal.ice_curve(g) for g in grids.values()]
        _write_rows(out / f"ice_{observable}.csv", _CURVE_HEADER, _curve_rows(ices))
        plots.plot_effect_curves(
            ices, out / f"ice_{observable}.svg", f"ICE: {observable}", f"effect on {observable}"
        )
        for b, grid in grids.items():
            for variant, dose_min in (("full", None), ("t_ge_1", args.theta_min)):
                try:
                    theta = causal.theta_fs(grid, dose_min)
                except DataError:
                    continue
                theta_rows.append([_cell(b), observable, "", variant, _cell(theta)])

    # dispersion of the click count across units
    nclick_grids = {b: causal.build_grid(records, b, "n_clicks") for b in bits}
    dispersions = [
        causal.dispersion_curve(g, args.baseline_clicks)
        for g in nclick_grids.values()
        if g.doses
    ]
    if dispersions:
        _write_rows(out / "dispersion_nclicks.csv", _CURVE_HEADER, _curve_rows(dispersions))
        plots.plot_effect_curves(
            dispersions,
            out / "dispersion_nclicks.svg",
            "Across-unit dispersion: n_clicks",
            "std(n_clicks) - std at baseline",
        )

    # stratified infinitesimal effects and their sign scores
    sign_rows = []
    for observable in STRATIFIED_OBSERVABLES:
        universe: set[int] = set()
        theta_by_bit: dict[int, dict[int, float | None]] = {}
        for b in bits:
            strata = causal.stratify(records, observable, b)
            universe.update(strata)
            thetas: dict[int, float | None] = {}
            for k, grid in strata.items():
                try:
                    thetas[k] = causal.theta_fs(grid)
                except DataError:
                    thetas[k] = None
                for variant, dose_min in (("full", None), ("t_ge_1", args.theta_min)):
                    try:
                        theta = causal.theta_fs(grid, dose_min)
                    except DataError:
                        continue
                    theta_rows.append([_cell(b), observable, _cell(k), variant, _cell(theta)])
            theta_by_bit[b] = thetas
        for b in bits:
            full = {k: theta_by_bit[b].get(k) for k in sorted(universe)}
            if not full:
                continue
            sign_rows.append(
                [
                    observable,
                    _cell(b),
                    _cell(len(full)),
                    _cell(causal.sign_score(full)),
                    _cell(causal.sign_score(full, na_as_minus_one=True)),
                ]
            )
    _write_rows(out / "theta_fs.csv", ("bit", "observable", "stratum", "variant", "theta"), theta_rows)
    _write_rows(
        out / "sign_scores.csv",
        ("observable", "bit", "n_strata", "score", "score_na_minus_one"),
        sign_rows,
    )

    _estimate_wasserstein(args, records, bits, out, theta_rows)
    print(f"reports written to {out}")
    return 0


def _estimate_wasserstein(args, records, bits, out, theta_rows) -> None:
    sidecar = _spectra_path(args.in_csv)
    if not sidecar.is_file():
        print("no spectra sidecar found; skipping Wasserstein distances")
        return
    manifest = _find_manifest(args.manifest, args.in_csv)
    if manifest is None:
        print(
            "spectra sidecar present but no manifest to recover the frequency grid; "
            "skipping Wasserstein distances (pass --manifest)"
        )
        return
    nfft = _next_pow2(manifest.clip_len)
    freqs = np.fft.rfftfreq(nfft, d=1.0 / manifest.sample_rate)
    by_bit = corpus.read_spectra_csv(sidecar)
    curves = []
    for b in bits:
        if b not in by_bit:
            continue
        spectra_by_dose = {}
        for dose, vectors in by_bit[b].items():
            specs = []
            for vec in vectors:
                power = np.zeros(len(freqs))
                power[: len(vec)] = vec[: len(freqs)]
                specs.append(Spectrum(freqs, power))
            spectra_by_dose[dose] = specs
        curve = causal.spectral_distance_curve(
            spectra_by_dose, args.baseline_spectral, bit=b
        )
        curves.append(curve)
        for variant, dose_min in (("full", None), ("t_ge_1", args.theta_min)):
            try:
                theta = causal.curve_theta_fs(curve, dose_min)
            except DataError:
                continue
            theta_rows.append([_cell(b), "wasserstein_w1", "", variant, _cell(theta)])
    if curves:
        _write_rows(out / "wasserstein.csv", _CURVE_HEADER, _curve_rows(curves))
        plots.plot_effect_curves(
            curves,
            out / "wasserstein.svg",
            "Wasserstein distance of average coda spectra",
            "W1 to baseline spectrum (Hz)",
        )
        # theta_fs.csv gains the Wasserstein rows; rewrite it with them included
        _write_rows(
            out / "theta_fs.csv", ("bit", "observable", "stratum", "variant", "theta"), theta_rows
        )


def cmd_surrogate(args) -> int:
    records = corpus.read_observables_csv(args.in_csv)
    if args.observable not in ALL_OBSERVABLES:
        raise ConfigError(
            f"unknown observable {args.observable!r}; expected one of {', '.join(ALL_OBSERVABLES)}"
        )
    manifest = _find_manifest(args.manifest, args.in_csv)
    if manifest is None:
        raise ConfigError(
            "surrogate needs the corpus manifest to rebuild covariates; pass --manifest"
        )
    if not 0 <= args.bit < manifest.n_bits:
        raise ConfigError(f"bit {args.bit} out of range for {manifest.n_bits} bits")
    covariates = corpus.draw_covariates(
        manifest.covariate_seed, manifest.n_units, manifest.covariate_dim
    )
    report = surrogate.consistency_scan(
        records, covariates, args.bit, args.observable, n_bits=manifest.n_bits
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for e in report.entries:
        rows.append(
            [
                _cell(report.bit),
                report.observable,
                "" if e.stratum is None else _cell(e.stratum),
                _cell(e.max_leaves),
                _cell(e.val_mse),
                _cell(e.treatment_rank),
                e.top_feature,
                "true" if (not e.qualifying or e.treatment_on_top) else "false",
            ]
        )
    _write_rows(
        out / "surrogate_report.csv",
        ("bit", "observable", "stratum", "max_leaves", "val_mse", "treatment_rank",
         "top_feature", "consistent_flag"),
        rows,
    )
    for stratum in report.skipped_strata:
        print(f"notice: stratum {stratum} skipped (too few rows)")
    print(f"bit {report.bit} / {report.observable}: {report.verdict}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdev",
        description="Randomized dose-response probing of a coda generator's encoding bits",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a builtin corpus from a config file")
    p.add_argument("--config", required=True, help="flat key=value experiment config")
    p.add_argument("--overwrite", action="store_true", help="replace an existing corpus")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("measure", help="measure every clip in a corpus directory")
    p.add_argument("--in", dest="in_dir", required=True, help="corpus directory")
    p.add_argument("--out", dest="out_csv", required=True, help="observables CSV to write")
    p.add_argument("--spectra", action="store_true", help="also write the coda-spectra sidecar")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("estimate", help="effect curves, thetas, sign scores and plots")
    p.add_argument("--in", dest="in_csv", required=True, help="observables CSV")
    p.add_argument("--out", dest="out_dir", required=True, help="report directory")
    p.add_argument("--baseline-clicks", type=float, default=-1.0)
    p.add_argument("--baseline-spectral", type=float, default=1.0)
    p.add_argument("--theta-min", type=float, default=1.0, help="restricted theta lower dose")
    p.add_argument("--manifest", default=None, help="corpus manifest (for spectra grids)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("surrogate", help="boosted-tree attribution consistency scan")
    p.add_argument("--in", dest="in_csv", required=True, help="observables CSV")
    p.add_argument("--bit", type=int, required=True)
    p.add_argument("--observable", required=True)
    p.add_argument("--out", dest="out_dir", required=True, help="report directory")
    p.add_argument("--manifest", default=None, help="corpus manifest (for covariates)")
    p.set_defaults(func=cmd_surrogate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
