"""Tests for SDR, the evaluation report and oracle masks."""

import math
import os

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtfatt.config import ModelConfig
from mtfatt.dataio import synthetic_splits
from mtfatt.metrics import MissingModelError, SdrReport, UndefinedMetricError, evaluate, evaluate_async, oracle_mask_sdr, sdr
from mtfatt.tensor import DimensionError


class TestSdr:
    """Test the plain energy-ratio SDR."""

    def test_perfect_estimate(self, rng):
        """Test that an exact estimate is capped at 100 dB."""
        s = rng.standard_normal((100, 2))
        assert sdr(s, s) == 100.0

    def test_zero_estimate(self, rng):
        """Test that silence as the estimate scores 0 dB."""
        s = rng.standard_normal((100, 2))
        assert sdr(s, np.zeros_like(s)) == pytest.approx(0.0)

    def test_ten_db(self):
        """Test a noise of one tenth of the signal energy."""
        s = np.ones((100, 2))
        estimate = s + np.sqrt(0.1)
        assert sdr(s, estimate) == pytest.approx(10.0)

    def test_half_scale(self, rng):
        """Test that a half-amplitude estimate scores 20*log10(2) dB."""
        s = rng.standard_normal((100, 2))
        assert sdr(s, 0.5 * s) == pytest.approx(6.0206, abs=1e-3)

    def test_joint_scaling_invariance(self, rng):
        """Test that scaling reference and estimate together leaves SDR unchanged."""
        s, e = rng.standard_normal((100, 2)), rng.standard_normal((100, 2))
        assert sdr(3.0 * s, 3.0 * e) == pytest.approx(sdr(s, e))

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.int64, (16, 2), elements=st.integers(-1000, 1000)),
        arrays(np.int64, (16, 2), elements=st.integers(-1000, 1000)),
        st.floats(0.01, 100.0),
    )
    def test_scaling_invariance_property(self, reference, estimate, scale):
        """Test sdr(a*s, a*e) == sdr(s, e) for any positive a."""
        assume(np.any(reference))
        s, e = reference / 1000.0, estimate / 1000.0
        assert sdr(scale * s, scale * e) == pytest.approx(sdr(s, e), rel=1e-9, abs=1e-9)

    def test_silent_reference(self):
        """Test that a silent reference is undefined."""
        with pytest.raises(UndefinedMetricError):
            sdr(np.zeros((10, 2)), np.ones((10, 2)))

    def test_shape_mismatch(self):
        """Test that reference and estimate must match."""
        with pytest.raises(DimensionError):
            sdr(np.ones((10, 2)), np.ones((11, 2)))


class TestReport:
    """Test aggregation and the written outputs."""

    def make(self):
        report = SdrReport(variant="MTFAtt")
        for song, value in (("a", 1.0), ("b", 2.0), ("c", 6.0)):
            report.add("vocals", song, value)
        for song, value in (("a", 4.0), ("b", 8.0)):
            report.add("bass", song, value)
        return report

    def test_median_and_mean(self):
        """Test per-stem median and mean."""
        report = self.make()
        assert report.median("vocals") == 2.0
        assert report.mean("vocals") == 3.0
        assert report.median("bass") == 6.0
        assert math.isnan(report.median("drums"))

    def test_summary_all_row(self):
        """Test that the All row averages the per-stem aggregates."""
        rows = self.make().summary()
        assert rows[-1] == ("All", 4.0, 4.5, 3)

    def test_unscored_stem_left_out_of_all(self):
        """Test that a stem with only silent references shows NaN without touching the All row."""
        report = self.make()
        report.values["drums"] = {}
        rows = report.summary()
        drums = next(r for r in rows if r[0] == "drums")
        assert math.isnan(drums[1]) and math.isnan(drums[2]) and drums[3] == 0
        assert rows[-1] == ("All", 4.0, 4.5, 3)
        assert "nan" not in report.to_records()[-1]

    def test_nothing_scored(self):
        """Test that no All row is produced when no stem has a score."""
        report = SdrReport(values={"vocals": {}})
        assert [r[0] for r in report.summary()] == ["vocals"]

    def test_table(self):
        """Test the table header and one row per stem plus All."""
        lines = self.make().to_table().splitlines()
        assert lines[0] == "plain SDR (dB), variant MTFAtt"
        assert lines[1].split() == ["Stem", "Median", "Mean", "Songs"]
        assert lines[2].split() == ["vocals", "2.00", "3.00", "3"]
        assert lines[-1].split()[0] == "All"

    def test_records(self, tmp_path):
        """Test per-song and summary records written to disk."""
        report = self.make()
        table, records = os.path.join(tmp_path, "sdr.txt"), os.path.join(tmp_path, "sdr.records")
        report.write(table, records)
        with open(records) as f:
            lines = f.read().splitlines()
        assert lines[0] == "metric=plain_SDR stem=vocals song=a sdr=1.000000"
        assert "metric=plain_SDR stem=All median=4.000000 mean=4.500000 songs=3" in lines
        with open(table) as f:
            assert f.read().startswith("plain SDR")


class TestEvaluate:
    """Test concurrent evaluation over songs."""

    @pytest.fixture
    def songs(self, synthetic_config):
        return synthetic_splits(synthetic_config, 8000)["train"]

    def test_pass_through_scores_cap(self, songs):
        """Test that returning the reference itself scores 100 dB for every stem."""
        lookup = {id(s.mixture): s for s in songs}
        models = {stem: (lambda mix, stem=stem: lookup[id(mix)].stems[stem]) for stem in ("vocals", "bass", "drums", "other")}
        report = evaluate(models, songs, threads=2)
        assert report.stems == ["vocals", "bass", "drums", "other"]
        for stem in report.stems:
            assert list(report.values[stem].values()) == [100.0, 100.0]

    def test_mixture_estimate(self, songs):
        """Test that the unprocessed mixture scores below the cap and above -inf."""
        report = evaluate({"vocals": lambda mix: mix}, songs)
        assert all(-30.0 < v < 10.0 for v in report.values["vocals"].values())

    async def test_async_semaphore(self, songs):
        """Test the coroutine API with one worker."""
        report = await evaluate_async({"bass": lambda mix: np.zeros_like(mix)}, songs, threads=1, variant="noAtt")
        assert report.variant == "noAtt"
        assert report.values["bass"] == {songs[0].name: pytest.approx(0.0), songs[1].name: pytest.approx(0.0)}

    def test_missing_model(self, songs):
        """Test that requesting a stem without a model is an error."""
        with pytest.raises(MissingModelError) as excinfo:
            evaluate({"vocals": lambda mix: mix}, songs, stems=["vocals", "drums"])
        assert "drums" in str(excinfo.value)

    def test_silent_reference_skipped(self, songs):
        """Test that a song whose stem is silent is left out, not scored."""
        songs[0].stems["drums"] = np.zeros_like(songs[0].stems["drums"])
        report = evaluate({"drums": lambda mix: mix}, songs)
        assert list(report.values["drums"]) == [songs[1].name]

    def test_real_model(self, songs, tiny_model32):
        """Test evaluation of a separation model over whole songs."""
        report = evaluate({"vocals": tiny_model32.eval()}, songs[:1])
        assert np.isfinite(report.values["vocals"][songs[0].name])


class TestOracleMask:
    """Test oracle complex ratio masks on synthetic songs."""

    def test_wider_clip_is_better(self, synthetic_config):
        """Test that clipping at 2 scores at least as well as clipping at 1, on average over songs and stems."""
        config = ModelConfig.desk_scale()
        wide, narrow = [], []
        for song in synthetic_splits(synthetic_config, 8000)["train"]:
            for stem in ("vocals", "bass", "drums", "other"):
                wide.append(oracle_mask_sdr(song, stem, config, clip=2.0))
                narrow.append(oracle_mask_sdr(song, stem, config, clip=1.0))
        assert np.mean(wide) >= np.mean(narrow)

    def test_unclipped_is_near_perfect(self, synthetic_song):
        """Test that the unclipped oracle mask recovers a stem almost exactly."""
        assert oracle_mask_sdr(synthetic_song, "bass", ModelConfig.desk_scale(), clip=None, eps=1e-12) > 30.0

    def test_disjoint_bands_separate_well(self, synthetic_song):
        """Test that band-disjoint stems are recovered well by their clipped oracle mask."""
        assert oracle_mask_sdr(synthetic_song, "vocals", ModelConfig.desk_scale()) > 10.0
