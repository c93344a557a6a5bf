"""Effect estimators over the randomized dose grid.

All estimators are pure functions of immutable outcome grids. Unit lists are
sorted internally and reductions use compensated summation, so results do not
depend on record input order or worker scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .observables import ObservableRecord
from .signal import ConfigError, DataError, Spectrum


@dataclass(frozen=True)
class OutcomeGrid:
    """Per-dose outcome samples for one (bit, observable) pair.

    values maps each dose to ((unit_id, y), ...) sorted by unit_id, with
    absent outcomes already excluded.
    """

    bit: int
    observable: str
    doses: tuple[float, ...]
    values: Mapping[float, tuple[tuple[int, float], ...]]

    def count(self, dose: float) -> int:
        return len(self.values.get(dose, ()))

    def unit_map(self, dose: float) -> dict[int, float]:
        return dict(self.values.get(dose, ()))


@dataclass(frozen=True)
class EffectCurve:
    """Per-dose estimates for one (bit, observable); None marks an absent
    estimate. ATE-type curves carry their baseline dose and are exactly zero
    there; ICE curves have baseline None and are indexed by left endpoint."""

    bit: int
    observable: str
    doses: tuple[float, ...]
    estimates: tuple[float | None, ...]
    counts: tuple[int, ...]
    baseline: float | None = None

    def at(self, dose: float) -> float | None:
        return self.estimates[self.doses.index(dose)]


def build_grid(records: Sequence[ObservableRecord], bit: int, observable: str) -> OutcomeGrid:
    """Collect one (bit, observable) grid from measured records."""
    by_dose: dict[float, list[tuple[int, float]]] = {}
    for rec in records:
        if rec.bit != bit:
            continue
        value = getattr(rec, observable)
        if value is None:
            continue
        by_dose.setdefault(rec.dose, []).append((rec.unit_id, float(value)))
    doses = tuple(sorted(by_dose))
    values = {d: tuple(sorted(by_dose[d])) for d in doses}
    for d in doses:
        units = [u for u, _ in values[d]]
        if len(set(units)) != len(units):
            raise DataError(f"duplicate unit ids at bit={bit}, dose={d}")
    return OutcomeGrid(bit=bit, observable=observable, doses=doses, values=values)


def ate_curve(grid: OutcomeGrid, baseline: float) -> EffectCurve:
    """Average treatment effect versus a baseline dose.

    At each dose, the estimate is the mean of within-unit contrasts over the
    units observed at both that dose and the baseline; it is exactly zero at
    the baseline and absent where no units pair up.
    """
    if baseline not in grid.doses:
        raise ConfigError(f"baseline dose {baseline} not in grid doses")
    base = grid.unit_map(baseline)
    estimates: list[float | None] = []
    counts: list[int] = []
    for dose in grid.doses:
        if dose == baseline:
            estimates.append(0.0)
            counts.append(len(base))
            continue
        diffs = [y - base[u] for u, y in grid.values[dose] if u in base]
        if not diffs:
            estimates.append(None)
            counts.append(0)
        else:
            estimates.append(math.fsum(diffs) / len(diffs))
            counts.append(len(diffs))
    return EffectCurve(grid.bit, grid.observable, grid.doses, tuple(estimates), tuple(counts), baseline)


def _pop_std(values: Sequence[float]) -> float:
    n = len(values)
    mean = math.fsum(values) / n
    return math.sqrt(math.fsum((v - mean) ** 2 for v in values) / n)


def dispersion_curve(grid: OutcomeGrid, baseline: float) -> EffectCurve:
    """Across-unit population standard deviation of Y per dose, relative to
    the baseline dose. Doses with fewer than two units are absent."""
    if baseline not in grid.doses:
        raise ConfigError(f"baseline dose {baseline} not in grid doses")
    base_vals = [y for _, y in grid.values[baseline]]
    base_std = _pop_std(base_vals) if len(base_vals) >= 2 else None
    estimates: list[float | None] = []
    counts: list[int] = []
    for dose in grid.doses:
        vals = [y for _, y in grid.values[dose]]
        counts.append(len(vals))
        if len(vals) < 2 or base_std is None:
            estimates.append(None)
        elif dose == baseline:
            estimates.append(0.0)
        else:
            estimates.append(_pop_std(vals) - base_std)
    return EffectCurve(grid.bit, grid.observable, grid.doses, tuple(estimates), tuple(counts), baseline)


def ice_curve(grid: OutcomeGrid) -> EffectCurve:
    """Incremental effect: mean per-unit forward difference per grid step.

    Entry k is mean_i [Y_i(t_{k+1}) - Y_i(t_k)] / (t_{k+1} - t_k) over units
    observed at both endpoints, indexed by the left endpoint t_k.
    """
    if len(grid.doses) < 2:
        raise DataError("ICE needs at least two doses")
    estimates: list[float | None] = []
    counts: list[int] = []
    for left, right in zip(grid.doses, grid.doses[1:]):
        right_map = grid.unit_map(right)
        diffs = [y2 - y1 for (u, y1) in grid.values[left] if (y2 := right_map.get(u)) is not None]
        if not diffs:
            estimates.append(None)
            counts.append(0)
        else:
            estimates.append(math.fsum(diffs) / len(diffs) / (right - left))
            counts.append(len(diffs))
    return EffectCurve(grid.bit, grid.observable, grid.doses[:-1], tuple(estimates), tuple(counts))


def theta_fs(grid: OutcomeGrid, dose_min: float | None = None) -> float:
    """Expected effect of an infinitesimal dose increase: the unweighted mean
    of the ICE curve, optionally restricted to steps with left endpoint at
    least dose_min."""
    ice = ice_curve(grid)
    steps = [
        e
        for d, e in zip(ice.doses, ice.estimates)
        if e is not None and (dose_min is None or d >= dose_min)
    ]
    if not steps:
        raise DataError(f"no ICE steps with left endpoint >= {dose_min}")
    return math.fsum(steps) / len(steps)


def curve_theta_fs(curve: EffectCurve, dose_min: float | None = None) -> float:
    """Mean forward-difference slope of an effect curve itself (used for
    curves without a unit dimension, like average-spectrum distances)."""
    steps = []
    for (d1, e1), (d2, e2) in zip(
        zip(curve.doses, curve.estimates), zip(curve.doses[1:], curve.estimates[1:])
    ):
        if e1 is None or e2 is None:
            continue
        if dose_min is not None and d1 < dose_min:
            continue
        steps.append((e2 - e1) / (d2 - d1))
    if not steps:
        raise DataError("no usable steps in curve")
    return math.fsum(steps) / len(steps)


def stratify(
    records: Sequence[ObservableRecord], observable: str, bit: int
) -> dict[int, OutcomeGrid]:
    """Partition one bit's records by click count and build per-stratum grids.

    A record joins stratum k iff its n_clicks equals k at that (unit, dose);
    records whose observable is absent never enter. Empty strata are simply
    missing from the map.
    """
    by_stratum: dict[int, list[ObservableRecord]] = {}
    for rec in records:
        if rec.bit != bit or getattr(rec, observable) is None:
            continue
        by_stratum.setdefault(rec.n_clicks, []).append(rec)
    return {k: build_grid(rows, bit, observable) for k, rows in sorted(by_stratum.items())}


def sign_score(
    theta_by_stratum: Mapping[int, float | None], *, na_as_minus_one: bool = False
) -> int:
    """Sum of sign(theta) across click-count strata, with sign(0) = 0.

    Strata whose theta is unavailable (None) contribute 0 by default; the
    na_as_minus_one flag switches them to -1 to probe the alternative
    convention.
    """
    if not theta_by_stratum:
        raise DataError("sign_score needs at least one stratum")
    total = 0
    for theta in theta_by_stratum.values():
        if theta is None:
            total += -1 if na_as_minus_one else 0
        elif theta > 0:
            total += 1
        elif theta < 0:
            total -= 1
    return total


# ---------------------------------------------------------------------------
# Spectral distances
# ---------------------------------------------------------------------------


def _check_distribution(spectrum: Spectrum, label: str) -> None:
    total = float(spectrum.power.sum())
    if abs(total - 1.0) > 1e-6:
        raise DataError(f"{label} is not normalized (total power {total!r})")


def wasserstein_1d(p: Spectrum, q: Spectrum) -> float:
    """Exact 1-Wasserstein distance between two normalized spectra on one
    common uniform bin grid: sum_j |CDF_p(j) - CDF_q(j)| * bin width (Hz)."""
    if len(p) != len(q) or not np.array_equal(p.bin_freqs, q.bin_freqs):
        raise DataError("spectra must share an identical bin grid")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    cdf_p = np.cumsum(p.power)
    cdf_q = np.cumsum(q.power)
    return math.fsum(np.abs(cdf_p - cdf_q)) * p.bin_width_hz


def average_spectrum(spectra: Sequence[Spectrum]) -> Spectrum:
    """Mean of normalized spectra, renormalized to unit mass."""
    if not spectra:
        raise DataError("cannot average zero spectra")
    grid = spectra[0].bin_freqs
    for s in spectra[1:]:
        if not np.array_equal(s.bin_freqs, grid):
            raise DataError("spectra must share an identical bin grid")
    mean = np.mean([s.power for s in spectra], axis=0)
    total = float(mean.sum())
    if total <= 0:
        raise DataError("average spectrum has zero power")
    return Spectrum(grid, mean / total)


def spectral_distance_curve(
    spectra_by_dose: Mapping[float, Sequence[Spectrum]],
    baseline: float,
    *,
    bit: int = -1,
    observable: str = "wasserstein_w1",
) -> EffectCurve:
    """Wasserstein distance of each dose's average spectrum to the baseline's.

    Doses with no usable spectra are absent. The value at the baseline dose is
    exactly zero.
    """
    doses = tuple(sorted(spectra_by_dose))
    if baseline not in doses:
        raise ConfigError(f"baseline dose {baseline} not among spectra doses")
    if not spectra_by_dose[baseline]:
        raise DataError("baseline dose has no spectra")
    ref = average_spectrum(spectra_by_dose[baseline])
    estimates: list[float | None] = []
    counts: list[int] = []
    for dose in doses:
        group = spectra_by_dose[dose]
        counts.append(len(group))
        if not group:
            estimates.append(None)
        else:
            estimates.append(wasserstein_1d(average_spectrum(group), ref))
    return EffectCurve(bit, observable, doses, tuple(estimates), tuple(counts), baseline)
