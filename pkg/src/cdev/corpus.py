"""Corpus persistence and ingestion: WAV I/O, manifests, batch pipelines.

A corpus is a flat directory of 16-bit PCM mono WAV files named
unit<UUUUU>_bit<B>_t<+DDD.DDD>.wav plus a manifest of key=value lines. The
layout carries all experiment coordinates in filenames so externally produced
corpora (e.g. real generator outputs) can be measured with zero extra tooling.
"""

from __future__ import annotations

import logging
import os
import re
import struct
import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .detector import DetectorConfig
from .observables import ObservableRecord, ObservablesConfig, measure
from .signal import AudioClip, ConfigError, DataError
from .synthgen import (
    BitEffect,
    GeneratorConfig,
    LatentInput,
    PlantedEncoding,
    default_encoding,
    synth_coda,
)
from .detector import detect_clicks
from .observables import ici_stats

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.txt"

OBSERVABLE_COLUMNS = (
    "n_clicks",
    "mean_ici",
    "std_ici",
    "spectral_mean_hz",
    "spectral_mean_std_hz",
    "coda_spectral_mean_hz",
)
CSV_HEADER = ("unit_id", "bit", "dose") + OBSERVABLE_COLUMNS
SPECTRA_HEADER = ("bit", "dose", "unit_id", "bin_index", "power")


class WavFormatError(DataError):
    """The file is RIFF/WAVE but not 16-bit PCM mono."""


class WavReadError(OSError):
    """The file is truncated or not a RIFF/WAVE container."""


class CorpusExistsError(OSError):
    """Refusing to write into an existing non-empty corpus directory."""


# ---------------------------------------------------------------------------
# WAV read/write (RIFF, PCM 16-bit, mono)
# ---------------------------------------------------------------------------


def write_wav(clip: AudioClip, path: str | os.PathLike) -> None:
    """Write a clip as 16-bit PCM mono; quantization error is at most 2^-15."""
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    sr = clip.sample_rate
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE")
        fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sr, sr * 2, 2, 16))
        fh.write(b"data" + struct.pack("<I", len(data)))
        fh.write(data)


def read_wav(path: str | os.PathLike) -> AudioClip:
    """Read a 16-bit PCM mono RIFF/WAVE file.

    Unsupported encodings raise WavFormatError naming the offending chunk;
    truncated files raise WavReadError.
    """
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise WavReadError(f"{path}: truncated RIFF header")
        if head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise WavReadError(f"{path}: not a RIFF/WAVE file")
        fmt = None
        data = None
        while True:
            chunk_head = fh.read(8)
            if not chunk_head:
                break
            if len(chunk_head) < 8:
                raise WavReadError(f"{path}: truncated chunk header")
            tag, size = chunk_head[:4], struct.unpack("<I", chunk_head[4:])[0]
            body = fh.read(size)
            if len(body) < size:
                raise WavReadError(f"{path}: truncated {tag.decode('ascii', 'replace')} chunk")
            if size % 2:  # RIFF chunks are word-aligned
                fh.read(1)
            if tag == b"fmt ":
                if len(body) < 16:
                    raise WavFormatError(f"{path}: fmt chunk too short ({size} bytes)")
                audio_format, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
                if audio_format != 1:
                    raise WavFormatError(
                        f"{path}: fmt chunk: format code {audio_format}, expected PCM (1)"
                    )
                if channels != 1:
                    raise WavFormatError(
                        f"{path}: fmt chunk: {channels} channels, expected mono"
                    )
                if bits != 16:
                    raise WavFormatError(f"{path}: fmt chunk: {bits}-bit, expected 16-bit")
                fmt = rate
            elif tag == b"data":
                data = body
        if fmt is None:
            raise WavFormatError(f"{path}: missing fmt chunk")
        if data is None:
            raise WavFormatError(f"{path}: missing data chunk")
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0
    return AudioClip(samples, int(fmt))


# ---------------------------------------------------------------------------
# key=value files (manifest and experiment configs share one grammar)
# ---------------------------------------------------------------------------


def write_kv(path: str | os.PathLike, items: dict[str, str]) -> None:
    lines = [f"{key}={value}" for key, value in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: malformed line {raw!r} (expected key=value)")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def default_dose_grid() -> tuple[float, ...]:
    """-1.0 to 12.5 in steps of 0.5 (28 levels)."""
    return tuple(-1.0 + 0.5 * k for k in range(28))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Manifest:
    """Complete, re-runnable description of one corpus."""

    n_units: int
    sample_rate: int = 32000
    clip_len: int = 65536
    n_bits: int = 5
    covariate_dim: int = 95
    covariate_seed: int = 0
    dose_grid: tuple[float, ...] = ()
    generator: str = "builtin"
    detector: DetectorConfig = DetectorConfig()
    observables: ObservablesConfig = ObservablesConfig()
    encoding: PlantedEncoding | None = None
    gen_cfg: GeneratorConfig | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.n_units <= 0:
            raise ConfigError(f"n_units must be positive, got {self.n_units}")
        if self.generator not in ("builtin", "external"):
            raise ConfigError(f"generator must be builtin or external, got {self.generator!r}")
        grid = tuple(float(d) for d in (self.dose_grid or default_dose_grid()))
        if len(grid) < 1 or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("dose_grid must be non-empty and strictly increasing")
        object.__setattr__(self, "dose_grid", grid)
        if self.generator == "builtin":
            enc = self.encoding or default_encoding(self.n_bits)
            if enc.n_bits != self.n_bits:
                raise ConfigError(
                    f"planted encoding has {enc.n_bits} bits, manifest says {self.n_bits}"
                )
            gen = self.gen_cfg or GeneratorConfig(
                sample_rate=self.sample_rate, clip_len=self.clip_len
            )
            gen = replace(gen, sample_rate=self.sample_rate, clip_len=self.clip_len)
            object.__setattr__(self, "encoding", enc)
            object.__setattr__(self, "gen_cfg", gen)

    def to_kv(self) -> dict[str, str]:
        items: dict[str, str] = {
            "schema_version": _fmt(self.schema_version),
            "sample_rate": _fmt(self.sample_rate),
            "clip_len": _fmt(self.clip_len),
            "n_units": _fmt(self.n_units),
            "n_bits": _fmt(self.n_bits),
            "covariate_dim": _fmt(self.covariate_dim),
            "covariate_seed": _fmt(self.covariate_seed),
            "dose_grid": ",".join(repr(d) for d in self.dose_grid),
            "generator": self.generator,
        }
        for f in fields(DetectorConfig):
            items[f"detector.{f.name}"] = _fmt(getattr(self.detector, f.name))
        for f in fields(ObservablesConfig):
            items[f"observables.{f.name}"] = _fmt(getattr(self.observables, f.name))
        if self.generator == "builtin":
            for i, eff in enumerate(self.encoding.bits):
                items[f"planted.bit{i}.target"] = eff.target
                items[f"planted.bit{i}.slope"] = _fmt(eff.slope)
                items[f"planted.bit{i}.entangle_amp"] = _fmt(eff.entangle_amp)
                items[f"planted.bit{i}.noise_coeff"] = _fmt(eff.noise_coeff)
            for f in fields(GeneratorConfig):
                if f.name in ("sample_rate", "clip_len"):
                    continue  # owned by the top-level manifest keys
                items[f"planted.gen.{f.name}"] = _fmt(getattr(self.gen_cfg, f.name))
        return items

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "Manifest":
        def need(key: str) -> str:
            if key not in kv:
                raise ConfigError(f"manifest is missing key {key!r}")
            return kv[key]

        n_bits = int(need("n_bits"))
        generator = need("generator")
        detector = DetectorConfig(
            **{
                f.name: _parse_typed(kv[f"detector.{f.name}"], f.type)
                for f in fields(DetectorConfig)
                if f"detector.{f.name}" in kv
            }
        )
        observables = ObservablesConfig(
            **{
                f.name: _parse_typed(kv[f"observables.{f.name}"], f.type)
                for f in fields(ObservablesConfig)
                if f"observables.{f.name}" in kv
            }
        )
        encoding = None
        gen_cfg = None
        if generator == "builtin":
            present = [i for i in range(n_bits) if f"planted.bit{i}.target" in kv]
            if present and len(present) != n_bits:
                missing = sorted(set(range(n_bits)) - set(present))
                raise ConfigError(
                    f"planted encoding incomplete: missing planted.bit{{{missing[0]}}}.target "
                    f"(bits {missing} of {n_bits})"
                )
            if present:
                bits = tuple(
                    BitEffect(
                        target=kv[f"planted.bit{i}.target"],
                        slope=float(kv.get(f"planted.bit{i}.slope", "0.0")),
                        entangle_amp=float(kv.get(f"planted.bit{i}.entangle_amp", "0.0")),
                        noise_coeff=float(kv.get(f"planted.bit{i}.noise_coeff", "0.0")),
                    )
                    for i in range(n_bits)
                )
                encoding = PlantedEncoding(bits)
            else:
                encoding = default_encoding(n_bits)
            gen_kwargs = {}
            for f in fields(GeneratorConfig):
                key = f"planted.gen.{f.name}"
                if key in kv:
                    gen_kwargs[f.name] = _parse_typed(kv[key], f.type)
            gen_cfg = GeneratorConfig(
                sample_rate=int(need("sample_rate")),
                clip_len=int(need("clip_len")),
                **gen_kwargs,
            )
        return cls(
            schema_version=int(need("schema_version")),
            sample_rate=int(need("sample_rate")),
            clip_len=int(need("clip_len")),
            n_units=int(need("n_units")),
            n_bits=n_bits,
            covariate_dim=int(need("covariate_dim")),
            covariate_seed=int(need("covariate_seed")),
            dose_grid=tuple(float(v) for v in need("dose_grid").split(",")),
            generator=generator,
            detector=detector,
            observables=observables,
            encoding=encoding,
            gen_cfg=gen_cfg,
        )


def _parse_typed(text: str, type_name: str):
    if type_name == "int":
        return int(text)
    if type_name == "float":
        return float(text)
    if type_name == "bool":
        return text.lower() in ("1", "true", "yes")
    return text


def write_manifest(manifest: Manifest, directory: str | os.PathLike) -> Path:
    path = Path(directory) / MANIFEST_NAME
    write_kv(path, manifest.to_kv())
    return path


def read_manifest(directory: str | os.PathLike) -> Manifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise WavReadError(f"no {MANIFEST_NAME} in {directory}")
    return Manifest.from_kv(read_kv(path))


# ---------------------------------------------------------------------------
# Corpus layout
# ---------------------------------------------------------------------------

_FILENAME_RE = re.compile(r"^unit(\d+)_bit(\d+)_t([+-]\d+\.\d+)\.wav$")


def clip_filename(unit: int, bit: int, dose: float) -> str:
    return f"unit{unit:05d}_bit{bit}_t{dose:+08.3f}.wav"


def parse_clip_filename(name: str) -> tuple[int, int, float] | None:
    m = _FILENAME_RE.match(name)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2)), float(m.group(3))


def draw_covariates(seed: int, n_units: int, dim: int) -> np.ndarray:
    """Unit covariates: i.i.d. uniform on [-1, 1]^dim, one row per unit."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.uniform(-1.0, 1.0, size=(n_units, dim))


def treatment_vector(n_bits: int, bit: int, dose: float) -> np.ndarray:
    """Dose on one bit, zero elsewhere."""
    t = np.zeros(n_bits)
    t[bit] = dose
    return t


# ---------------------------------------------------------------------------
# Parallel helpers
# ---------------------------------------------------------------------------


def worker_count() -> int:
    """Worker pool size; the CDEV_THREADS env var overrides (0 = auto)."""
    env = os.environ.get("CDEV_THREADS", "").strip()
    if env:
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f"CDEV_THREADS must be an integer, got {env!r}") from exc
        if value < 0:
            raise ConfigError(f"CDEV_THREADS must be >= 0, got {value}")
        if value > 0:
            return value
    return os.cpu_count() or 1


def parallel_map(fn, tasks, workers: int | None = None) -> list:
    """Order-preserving map over a process pool (serial when workers <= 1)."""
    tasks = list(tasks)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    chunk = max(1, len(tasks) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=chunk))


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _synth_one(task) -> str:
    x, t, enc, gen_cfg, path = task
    clip = synth_coda(LatentInput(x, t), enc, gen_cfg)
    write_wav(clip, path)
    return path


def generate_corpus(
    manifest: Manifest,
    out_dir: str | os.PathLike,
    *,
    overwrite: bool = False,
    workers: int | None = None,
) -> int:
    """Generate the full (unit x bit x dose) grid of WAVs plus the manifest.

    Covariates are drawn once per unit and reused across every treatment
    level. Returns the number of audio files written.
    """
    if manifest.generator != "builtin":
        raise ConfigError("generate_corpus requires the builtin generator")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise CorpusExistsError(f"{out} exists and is not empty (pass overwrite to replace)")
    out.mkdir(parents=True, exist_ok=True)

    covariates = draw_covariates(manifest.covariate_seed, manifest.n_units, manifest.covariate_dim)
    tasks = []
    for unit in range(manifest.n_units):
        for bit in range(manifest.n_bits):
            for dose in manifest.dose_grid:
                t = treatment_vector(manifest.n_bits, bit, dose)
                path = str(out / clip_filename(unit, bit, dose))
                tasks.append((covariates[unit], t, manifest.encoding, manifest.gen_cfg, path))
    parallel_map(_synth_one, tasks, workers)
    write_manifest(manifest, out)
    return len(tasks)


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------


def _measure_file(task):
    path, unit, bit, dose, det_cfg, obs_cfg, keep = task
    try:
        clip = read_wav(path)
    except (WavFormatError, WavReadError, DataError) as exc:
        return ("skip", os.path.basename(path), str(exc))
    record = measure(clip, unit, bit, dose, det_cfg, obs_cfg, keep_spectrum=keep)
    return ("ok", record)


def measure_corpus(
    directory: str | os.PathLike,
    *,
    keep_spectra: bool = False,
    workers: int | None = None,
) -> tuple[list[ObservableRecord], list[str]]:
    """Measure every WAV in a corpus directory.

    Returns records sorted by (bit, dose, unit_id) plus the names of skipped
    files (unparseable names or unreadable audio); skips are warnings, not
    errors.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    tasks = []
    skipped: list[str] = []
    for path in sorted(directory.iterdir()):
        if path.name == MANIFEST_NAME or path.is_dir():
            continue
        coords = parse_clip_filename(path.name)
        if coords is None:
            if path.suffix.lower() == ".wav":
                skipped.append(path.name)
                log.warning("skipping %s: filename does not match the corpus convention", path.name)
            continue
        unit, bit, dose = coords
        tasks.append((str(path), unit, bit, dose, manifest.detector, manifest.observables, keep_spectra))

    records: list[ObservableRecord] = []
    for result in parallel_map(_measure_file, tasks, workers):
        if result[0] == "ok":
            records.append(result[1])
        else:
            skipped.append(result[1])
            log.warning("skipping %s: %s", result[1], result[2])
    records.sort(key=lambda r: (r.bit, r.dose, r.unit_id))
    return records, skipped


def _measure_builtin_unit(task):
    manifest, unit, x, full, keep = task
    out = []
    for bit in range(manifest.n_bits):
        for dose in manifest.dose_grid:
            t = treatment_vector(manifest.n_bits, bit, dose)
            clip = synth_coda(LatentInput(x, t), manifest.encoding, manifest.gen_cfg)
            if full:
                out.append(
                    measure(clip, unit, bit, dose, manifest.detector, manifest.observables,
                            keep_spectrum=keep)
                )
            else:
                train = detect_clicks(clip, manifest.detector)
                mean_ici, std_ici = ici_stats(train)
                out.append(
                    ObservableRecord(unit, bit, dose, len(train), mean_ici, std_ici,
                                     None, None, None)
                )
    return out


def measure_builtin(
    manifest: Manifest,
    *,
    full: bool = True,
    keep_spectra: bool = False,
    workers: int | None = None,
) -> list[ObservableRecord]:
    """Generate and measure a builtin corpus in memory, no WAVs on disk.

    Numerically this differs from the file path only by the absent 16-bit
    quantization. full=False measures click-train observables only (the
    spectral fields stay absent), which is considerably faster.
    """
    if manifest.generator != "builtin":
        raise ConfigError("measure_builtin requires the builtin generator")
    covariates = draw_covariates(manifest.covariate_seed, manifest.n_units, manifest.covariate_dim)
    tasks = [
        (manifest, unit, covariates[unit], full, keep_spectra)
        for unit in range(manifest.n_units)
    ]
    records: list[ObservableRecord] = []
    for chunk in parallel_map(_measure_builtin_unit, tasks, workers):
        records.extend(chunk)
    records.sort(key=lambda r: (r.bit, r.dose, r.unit_id))
    return records


# ---------------------------------------------------------------------------
# CSV (RFC-4180 fields, LF line endings, '.' decimal separator)
# ---------------------------------------------------------------------------


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_observables_csv(records, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(
                [
                    _cell(r.unit_id),
                    _cell(r.bit),
                    _cell(r.dose),
                    _cell(r.n_clicks),
                    _cell(r.mean_ici),
                    _cell(r.std_ici),
                    _cell(r.spectral_mean_hz),
                    _cell(r.spectral_mean_std_hz),
                    _cell(r.coda_spectral_mean_hz),
                ]
            )


def read_observables_csv(path: str | os.PathLike) -> list[ObservableRecord]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty CSV")
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise ConfigError(f"{path}: missing columns: {', '.join(missing)}")
        idx = {c: header.index(c) for c in CSV_HEADER}
        records = []
        for row in reader:
            if not row:
                continue

            def opt(col):
                text = row[idx[col]]
                return float(text) if text != "" else None

            records.append(
                ObservableRecord(
                    unit_id=int(row[idx["unit_id"]]),
                    bit=int(row[idx["bit"]]),
                    dose=float(row[idx["dose"]]),
                    n_clicks=int(row[idx["n_clicks"]]),
                    mean_ici=opt("mean_ici"),
                    std_ici=opt("std_ici"),
                    spectral_mean_hz=opt("spectral_mean_hz"),
                    spectral_mean_std_hz=opt("spectral_mean_std_hz"),
                    coda_spectral_mean_hz=opt("coda_spectral_mean_hz"),
                )
            )
    return records


def write_spectra_csv(records, path: str | os.PathLike) -> None:
    """Sidecar of normalized coda spectra, one row per frequency bin."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SPECTRA_HEADER)
        for r in records:
            if r.coda_spectrum is None:
                continue
            for j, p in enumerate(r.coda_spectrum.power):
                writer.writerow([r.bit, _cell(r.dose), r.unit_id, j, repr(float(p))])


def read_spectra_csv(path: str | os.PathLike) -> dict[int, dict[float, list[np.ndarray]]]:
    """Load sidecar spectra as power vectors grouped by bit, then dose.

    The frequency grid is not stored in the sidecar; callers rebuild it from
    the corpus manifest (sample_rate, clip_len).
    """
    acc: dict[int, dict[float, dict[int, dict[int, float]]]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SPECTRA_HEADER:
            raise ConfigError(f"{path}: expected header {','.join(SPECTRA_HEADER)}")
        for row in reader:
            if not row:
                continue
            bit, dose, unit = int(row[0]), float(row[1]), int(row[2])
            acc.setdefault(bit, {}).setdefault(dose, {}).setdefault(unit, {})[int(row[3])] = float(
                row[4]
            )
    out: dict[int, dict[float, list[np.ndarray]]] = {}
    for bit, by_dose in acc.items():
        out[bit] = {}
        for dose, by_unit in by_dose.items():
            vectors = []
            for unit in sorted(by_unit):
                bins = by_unit[unit]
                vec = np.zeros(max(bins) + 1)
                for j, p in bins.items():
                    vec[j] = p
                vectors.append(vec)
            out[bit][dose] = vectors
    return out
