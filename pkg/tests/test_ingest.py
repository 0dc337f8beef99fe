import json

import numpy as np
import pytest

from dyngroup.generator import GenConfig, ObservationSet, apply_missing_mask, sample_dataset
from dyngroup.ingest import (
    CoauthorRecord,
    IngestError,
    build_coauthor_tensor,
    export_events,
    load_events,
    read_coauthor_records,
    sidecar_path,
)
from dyngroup.model import InvalidArgumentError


def write_events(tmp_path, rows, dims):
    path = tmp_path / "events.csv"
    path.write_text("source,time,x,y,count\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    sidecar_path(path).write_text(json.dumps({"dims": dims}))
    return path


DIMS = {"T": 1, "I": 1, "K": 3, "N": 3}


class TestEvents:
    def test_single_row(self, tmp_path):
        obs = load_events(write_events(tmp_path, [(0, 0, 1, 2, 5)], DIMS))
        assert obs.counts[0, 0, 1, 2] == 5 and obs.counts.sum() == 5
        assert obs.n[0, 0] == 5
        assert obs.Z[0, 0, 1, 2] == 1.0

    def test_duplicates_summed(self, tmp_path):
        obs = load_events(write_events(tmp_path, [(0, 0, 1, 2, 5), (0, 0, 1, 2, 2), (0, 0, 0, 0, 1)], DIMS))
        assert obs.counts[0, 0, 1, 2] == 7
        assert obs.n[0, 0] == 8

    def test_empty_slice_is_missing(self, tmp_path):
        obs = load_events(write_events(tmp_path, [(0, 0, 1, 2, 5)], dict(DIMS, T=2)))
        np.testing.assert_array_equal(obs.missing_slices[:, 0], [False, True])

    def test_out_of_range_names_row(self, tmp_path):
        path = write_events(tmp_path, [(0, 0, 1, 2, 5), (0, 0, 3, 0, 1)], DIMS)
        with pytest.raises(IngestError, match="row 3"):
            load_events(path)

    @pytest.mark.parametrize("row", [(0, 0, 0, 0, 0), (0, 0, 0, 0, "x"), (0, 0.5, 0, 0, 1)])
    def test_bad_values(self, tmp_path, row):
        with pytest.raises(IngestError, match="row 2"):
            load_events(write_events(tmp_path, [row], DIMS))

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "events.csv"
        path.write_text("source,time,x,y,count\n")
        with pytest.raises(IngestError):
            load_events(path)

    def test_bad_header(self, tmp_path):
        path = write_events(tmp_path, [], DIMS)
        path.write_text("a,b\n1,2\n")
        with pytest.raises(IngestError, match="missing columns"):
            load_events(path)

    def test_roundtrip(self, tmp_path, medium_params):
        obs, _ = sample_dataset(GenConfig(medium_params, T=5, poisson_rate=20, seed=0))
        export_events(obs, tmp_path / "out.csv")
        back = load_events(tmp_path / "out.csv")
        np.testing.assert_array_equal(back.counts, obs.counts)
        np.testing.assert_array_equal(back.n, obs.n)
        np.testing.assert_array_equal(back.Z, obs.Z)

    def test_roundtrip_masked_keeps_counts(self, tmp_path, medium_params):
        obs, _ = sample_dataset(GenConfig(medium_params, T=3, fixed_n=20, seed=0))
        masked = apply_missing_mask(obs, 0.3, seed=0)
        export_events(masked, tmp_path / "m.csv")
        back = load_events(tmp_path / "m.csv")
        np.testing.assert_array_equal(back.counts, masked.counts)


def rec(a, b, w=1.0, source="s", time=0.0):
    return CoauthorRecord(source=source, time=time, author_a=a, author_b=b, weight=w)


class TestCoauthor:
    def test_normalized_symmetric_slice(self):
        out = build_coauthor_tensor([rec("a", "b", 2), rec("b", "c", 2)], time_bucket_len=3)
        Z = out.obs.Z[0, 0]
        ia = out.author_index
        assert Z[ia["a"], ia["b"]] == Z[ia["b"], ia["a"]] == pytest.approx(0.25)
        assert Z[ia["b"], ia["c"]] == Z[ia["c"], ia["b"]] == pytest.approx(0.25)
        assert Z.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(np.diag(Z), 0.0)
        assert out.symmetric and out.obs.K == out.obs.N == 3

    def test_author_below_threshold_removed(self):
        records = [rec("a", f"x{k}") for k in range(29)] + [rec("b", f"y{k}") for k in range(30)]
        out = build_coauthor_tensor(records, 3, min_entity_count=30, entity_counts={
            "a": 29, "b": 30, **{f"x{k}": 30 for k in range(29)}, **{f"y{k}": 30 for k in range(30)}})
        assert "a" not in out.authors and "b" in out.authors

    def test_default_counts_from_weights(self):
        records = [rec("a", "b", 29), rec("b", "c", 30)]
        out = build_coauthor_tensor(records, 3, min_entity_count=30)
        assert out.authors == ["b", "c"]

    def test_source_dropped_if_any_bucket_short(self):
        records = [rec("a", "b", 5, "s1", 0), rec("a", "b", 5, "s1", 4),
                   rec("a", "b", 5, "s2", 0), rec("a", "b", 1, "s2", 4)]
        out = build_coauthor_tensor(records, 3, min_source_count=2)
        assert out.sources == ["s1"]
        assert out.obs.T == 2

    def test_left_closed_buckets(self):
        records = [rec("a", "b", time=0.0), rec("a", "b", time=2.999), rec("a", "b", time=3.0)]
        out = build_coauthor_tensor(records, 3)
        np.testing.assert_array_equal(out.obs.n[:, 0], [4, 2])
        assert out.bucket_starts == [0.0, 3.0]

    def test_gap_bucket_missing(self):
        out = build_coauthor_tensor([rec("a", "b", time=0), rec("a", "b", time=7)], 3)
        np.testing.assert_array_equal(out.obs.missing_slices[:, 0], [False, True, False])

    def test_index_stable(self):
        records = [rec("z", "b"), rec("b", "m"), rec("m", "z")]
        a = build_coauthor_tensor(records, 3)
        b = build_coauthor_tensor(records[::-1], 3)
        assert a.authors == b.authors == ["b", "m", "z"]
        np.testing.assert_array_equal(a.obs.counts, b.obs.counts)

    def test_everything_filtered(self):
        with pytest.raises(InvalidArgumentError):
            build_coauthor_tensor([rec("a", "b")], 3, min_entity_count=5)

    def test_record_checks(self):
        with pytest.raises(IngestError):
            rec("a", "a")
        with pytest.raises(IngestError):
            rec("a", "b", 0.5)

    def test_read_records(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("source,time,author_a,author_b,weight\nPRL,1990,x,y,2\nPRL,1991,x,x,1\n")
        with pytest.raises(IngestError, match="row 3"):
            read_coauthor_records(path)
        path.write_text("source,time,author_a,author_b,weight\nPRL,1990,x,y,2\n")
        assert read_coauthor_records(path) == [CoauthorRecord("PRL", 1990.0, "x", "y", 2.0)]

    def test_save(self, tmp_path):
        out = build_coauthor_tensor([rec("a", "b", 2), rec("b", "c", 2)], 3)
        out.save(tmp_path)
        index = json.loads((tmp_path / "index.json").read_text())
        assert index["authors"] == ["a", "b", "c"] and index["symmetric"]
        np.testing.assert_array_equal(ObservationSet.load(tmp_path).counts, out.obs.counts)
