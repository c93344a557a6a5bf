import hashlib
import struct

import numpy as np
import pytest

from cdev.corpus import (
    CorpusExistsError,
    Manifest,
    WavFormatError,
    WavReadError,
    clip_filename,
    default_dose_grid,
    draw_covariates,
    generate_corpus,
    measure_builtin,
    measure_corpus,
    parse_clip_filename,
    read_kv,
    read_observables_csv,
    read_spectra_csv,
    read_wav,
    write_kv,
    write_manifest,
    write_observables_csv,
    write_spectra_csv,
    write_wav,
)
from cdev.detector import DetectorConfig
from cdev.observables import ObservableRecord
from cdev.signal import AudioClip, ConfigError

SR = 32000
TINY_GRID = (-1.0, 1.0, 6.0, 12.5)


def tiny_manifest(**kw):
    defaults = dict(n_units=2, dose_grid=TINY_GRID, covariate_seed=42)
    defaults.update(kw)
    return Manifest(**defaults)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = tiny_manifest()
    count = generate_corpus(manifest, out, workers=1)
    return out, manifest, count


class TestWav:
    def test_roundtrip_quantization_bound(self, tmp_path, rng):
        clip = AudioClip(rng.uniform(-1, 1, 4096), SR)
        path = tmp_path / "x.wav"
        write_wav(clip, path)
        back = read_wav(path)
        assert back.sample_rate == SR and len(back) == len(clip)
        assert np.abs(back.samples - clip.samples).max() <= 2.0**-15

    def test_accepts_standard_header(self, tmp_path):
        path = tmp_path / "ok.wav"
        write_wav(AudioClip(np.zeros(64), SR), path)
        raw = path.read_bytes()
        assert raw[:4] == b"RIFF" and raw[8:12] == b"WAVE"
        fmt = struct.unpack("<HHIIHH", raw[20:36])
        assert fmt[0] == 1 and fmt[1] == 1 and fmt[2] == SR and fmt[5] == 16

    def test_rejects_stereo(self, tmp_path):
        path = tmp_path / "stereo.wav"
        data = struct.pack("<4096h", *([0] * 4096))
        with open(path, "wb") as fh:
            fh.write(b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE")
            fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, SR, SR * 4, 4, 16))
            fh.write(b"data" + struct.pack("<I", len(data)) + data)
        with pytest.raises(WavFormatError, match="fmt chunk: 2 channels"):
            read_wav(path)

    def test_rejects_float_pcm(self, tmp_path):
        path = tmp_path / "float.wav"
        data = b"\x00" * 64
        with open(path, "wb") as fh:
            fh.write(b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE")
            fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 3, 1, SR, SR * 4, 4, 32))
            fh.write(b"data" + struct.pack("<I", len(data)) + data)
        with pytest.raises(WavFormatError, match="format code 3"):
            read_wav(path)

    def test_truncated_data(self, tmp_path):
        path = tmp_path / "trunc.wav"
        with open(path, "wb") as fh:
            fh.write(b"RIFF" + struct.pack("<I", 1000) + b"WAVE")
            fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, SR, SR * 2, 2, 16))
            fh.write(b"data" + struct.pack("<I", 512) + b"\x00" * 10)
        with pytest.raises(WavReadError, match="truncated data"):
            read_wav(path)

    def test_missing_data_chunk(self, tmp_path):
        path = tmp_path / "nodata.wav"
        with open(path, "wb") as fh:
            fh.write(b"RIFF" + struct.pack("<I", 24) + b"WAVE")
            fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, SR, SR * 2, 2, 16))
        with pytest.raises(WavFormatError, match="missing data chunk"):
            read_wav(path)

    def test_not_riff(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"OggS" + b"\x00" * 40)
        with pytest.raises(WavReadError, match="not a RIFF"):
            read_wav(path)


class TestKvAndManifest:
    def test_kv_roundtrip(self, tmp_path):
        path = tmp_path / "kv.txt"
        items = {"a": "1", "b.c": "hello", "grid": "-1.0,0.5"}
        write_kv(path, items)
        assert read_kv(path) == items

    def test_kv_rejects_malformed(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("just some text\n")
        with pytest.raises(ConfigError):
            read_kv(path)

    def test_manifest_roundtrip_exact(self):
        manifest = tiny_manifest(detector=DetectorConfig(rel_threshold=0.35))
        back = Manifest.from_kv(manifest.to_kv())
        assert back == manifest

    def test_manifest_key_set(self):
        kv = tiny_manifest().to_kv()
        for key in (
            "schema_version",
            "sample_rate",
            "clip_len",
            "n_units",
            "n_bits",
            "covariate_dim",
            "covariate_seed",
            "dose_grid",
            "generator",
        ):
            assert key in kv
        assert any(k.startswith("detector.") for k in kv)
        assert any(k.startswith("observables.") for k in kv)
        assert any(k.startswith("planted.") for k in kv)

    def test_default_grid(self):
        grid = default_dose_grid()
        assert len(grid) == 28
        assert grid[0] == -1.0 and grid[-1] == 12.5

    def test_descending_grid_rejected(self):
        with pytest.raises(ConfigError, match="dose_grid"):
            Manifest(n_units=1, dose_grid=(1.0, 0.0))

    def test_partial_planted_keys_rejected(self):
        kv = tiny_manifest().to_kv()
        del kv["planted.bit3.target"]
        with pytest.raises(ConfigError, match="planted"):
            Manifest.from_kv(kv)


class TestFilenames:
    def test_format_examples(self):
        assert clip_filename(7, 1, 12.5) == "unit00007_bit1_t+012.500.wav"
        assert clip_filename(0, 0, -1.0) == "unit00000_bit0_t-001.000.wav"

    def test_roundtrip(self):
        for unit, bit, dose in [(0, 0, -1.0), (123, 4, 0.0), (99999, 2, 12.5)]:
            assert parse_clip_filename(clip_filename(unit, bit, dose)) == (unit, bit, dose)

    def test_rejects_foreign_names(self):
        assert parse_clip_filename("foo.wav") is None
        assert parse_clip_filename("unit1_bit_t+1.wav") is None


class TestGeneration:
    def test_file_count(self, tiny_corpus):
        out, manifest, count = tiny_corpus
        assert count == 2 * 5 * len(TINY_GRID)
        wavs = list(out.glob("*.wav"))
        assert len(wavs) == count
        assert (out / "manifest.txt").is_file()

    def test_deterministic_bytes(self, tiny_corpus, tmp_path):
        out, manifest, _ = tiny_corpus
        again = tmp_path / "again"
        generate_corpus(manifest, again, workers=1)
        for path in sorted(out.glob("*.wav")):
            a = hashlib.sha256(path.read_bytes()).hexdigest()
            b = hashlib.sha256((again / path.name).read_bytes()).hexdigest()
            assert a == b, path.name

    def test_seed_changes_audio(self, tiny_corpus, tmp_path):
        out, manifest, count = tiny_corpus
        other_dir = tmp_path / "other"
        other = tiny_manifest(covariate_seed=43)
        assert generate_corpus(other, other_dir, workers=1) == count
        name = sorted(out.glob("*.wav"))[0].name
        assert (out / name).read_bytes() != (other_dir / name).read_bytes()

    def test_refuses_nonempty_dir(self, tiny_corpus):
        out, manifest, _ = tiny_corpus
        with pytest.raises(CorpusExistsError):
            generate_corpus(manifest, out)

    def test_overwrite_flag(self, tiny_corpus, tmp_path):
        target = tmp_path / "ow"
        target.mkdir()
        (target / "sentinel.txt").write_text("x")
        generate_corpus(tiny_manifest(n_units=1, dose_grid=(0.0,)), target, overwrite=True, workers=1)
        assert (target / "manifest.txt").is_file()


class TestMeasurement:
    def test_measure_matches_layout(self, tiny_corpus):
        out, manifest, count = tiny_corpus
        records, skipped = measure_corpus(out, workers=1)
        assert len(records) == count and not skipped
        keys = [(r.bit, r.dose, r.unit_id) for r in records]
        assert keys == sorted(keys)

    def test_rerun_is_byte_identical(self, tiny_corpus, tmp_path):
        out, _, _ = tiny_corpus
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        records, _ = measure_corpus(out, workers=1)
        write_observables_csv(records, a)
        records2, _ = measure_corpus(out, workers=2)
        write_observables_csv(records2, b)
        assert a.read_bytes() == b.read_bytes()

    def test_builtin_inmemory_agrees_on_counts(self, tiny_corpus):
        out, manifest, _ = tiny_corpus
        disk, _ = measure_corpus(out, workers=1)
        mem = measure_builtin(manifest, workers=1)
        assert [r.n_clicks for r in disk] == [r.n_clicks for r in mem]

    def test_skip_corrupt_and_foreign_files(self, tiny_corpus, tmp_path):
        out, manifest, count = tiny_corpus
        work = tmp_path / "work"
        work.mkdir()
        for p in out.iterdir():
            (work / p.name).write_bytes(p.read_bytes())
        (work / "unit00000_bit0_t+099.000.wav").write_bytes(b"garbage")
        (work / "notes.txt").write_text("irrelevant")
        records, skipped = measure_corpus(work, workers=1)
        assert len(records) == count
        assert skipped == ["unit00000_bit0_t+099.000.wav"]

    def test_silence_corpus_external_generator(self, tmp_path):
        # externally authored corpus: silent clips plus a manifest
        ext = tmp_path / "ext"
        ext.mkdir()
        manifest = Manifest(
            n_units=2, dose_grid=(0.0, 1.0), generator="external", covariate_seed=0
        )
        for unit in range(2):
            for bit in range(5):
                for dose in (0.0, 1.0):
                    write_wav(AudioClip(np.zeros(8192), SR), ext / clip_filename(unit, bit, dose))
        write_manifest(manifest, ext)
        records, skipped = measure_corpus(ext, workers=1)
        assert not skipped and len(records) == 20
        assert all(r.n_clicks == 0 and r.mean_ici is None for r in records)
        assert all(r.coda_spectral_mean_hz is None for r in records)

    def test_missing_manifest(self, tmp_path):
        empty = tmp_path / "nothing"
        empty.mkdir()
        with pytest.raises(WavReadError, match="manifest"):
            measure_corpus(empty)


class TestCsv:
    def test_roundtrip(self, tmp_path):
        records = [
            ObservableRecord(0, 1, -1.0, 5, 0.2, 0.01, 6000.0, 250.0, 6100.0),
            ObservableRecord(1, 1, -1.0, 0, None, None, None, None, None),
        ]
        path = tmp_path / "obs.csv"
        write_observables_csv(records, path)
        back = read_observables_csv(path)
        assert back == records

    def test_absent_serialized_as_empty(self, tmp_path):
        records = [ObservableRecord(0, 0, 0.0, 0, None, None, None, None, None)]
        path = tmp_path / "obs.csv"
        write_observables_csv(records, path)
        lines = path.read_text().splitlines()
        assert lines[1] == "0,0,0.0,0,,,,,"
        assert path.read_text().endswith("\n") and "\r" not in path.read_text()

    def test_missing_column_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("unit_id,bit,dose\n0,0,0.0\n")
        with pytest.raises(ConfigError, match="n_clicks"):
            read_observables_csv(path)

    def test_spectra_sidecar_roundtrip(self, tmp_path):
        from cdev.signal import Spectrum

        spec = Spectrum(np.array([0.0, 10.0, 20.0]), np.array([0.25, 0.5, 0.25]))
        records = [
            ObservableRecord(4, 2, 1.5, 3, 0.1, 0.0, 5000.0, 0.0, 5000.0, coda_spectrum=spec)
        ]
        path = tmp_path / "spec.csv"
        write_spectra_csv(records, path)
        loaded = read_spectra_csv(path)
        np.testing.assert_allclose(loaded[2][1.5][0], [0.25, 0.5, 0.25])


class TestCovariates:
    def test_shape_and_range(self):
        x = draw_covariates(5, 10, 95)
        assert x.shape == (10, 95)
        assert np.abs(x).max() <= 1.0

    def test_seeded(self):
        np.testing.assert_array_equal(draw_covariates(5, 4, 8), draw_covariates(5, 4, 8))
        assert not np.array_equal(draw_covariates(5, 4, 8), draw_covariates(6, 4, 8))
