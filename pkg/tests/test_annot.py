import io
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselseg.annot import (
    AnnotationRecord,
    ClassLabel,
    Polygon,
    Split,
    class_histogram,
    filter_labeled,
    parse_annotations,
    serialize_annotations,
    split_train_val,
)
from vesselseg.errors import AnnotationError, DataError


def line(tile_id, anns):
    return json.dumps({"id": tile_id, "annotations": anns}) + "\n"


def vessel(coords):
    return {"type": "blood_vessel", "coordinates": [coords]}


class TestParse:
    def test_single_line_echo(self):
        stream = io.StringIO(
            '{"id":"t1","annotations":[{"type":"blood_vessel",'
            '"coordinates":[[[0,0],[10,0],[0,10]]]}]}\n'
        )
        records = parse_annotations(stream)
        assert len(records) == 1
        rec = records[0]
        assert rec.tile_id == "t1"
        assert len(rec.polygons) == 1
        assert rec.polygons[0].label is ClassLabel.BLOOD_VESSEL
        assert rec.polygons[0].ring == ((0.0, 0.0), (10.0, 0.0), (0.0, 10.0))

    def test_empty_stream(self):
        assert parse_annotations(io.StringIO("")) == []

    def test_unknown_class_names_line(self):
        stream = io.StringIO(line("t1", [{"type": "artery", "coordinates": [[[0, 0], [1, 0], [0, 1]]]}]))
        with pytest.raises(AnnotationError, match="line 1.*artery"):
            parse_annotations(stream)

    def test_error_line_number_is_one_based(self):
        good = line("t1", [vessel([[0, 0], [1, 0], [0, 1]])])
        bad = "not json\n"
        with pytest.raises(AnnotationError, match="line 2"):
            parse_annotations(io.StringIO(good + bad))

    def test_too_few_vertices(self):
        stream = io.StringIO(line("t1", [vessel([[0, 0], [1, 1]])]))
        with pytest.raises(AnnotationError, match="2 vertices"):
            parse_annotations(stream)

    def test_out_of_bounds_coordinate_rejected(self):
        stream = io.StringIO(line("t1", [vessel([[0, 0], [513, 0], [0, 10]])]))
        with pytest.raises(AnnotationError, match="outside"):
            parse_annotations(stream)

    @pytest.mark.parametrize(
        "payload",
        [
            '{"id":"t1","annotations":42}',
            '{"id":"t1","annotations":[{"type":"unsure","coordinates":7}]}',
            '{"id":"t1","annotations":[5]}',
            '{"id":"","annotations":[]}',
        ],
    )
    def test_malformed_structures_rejected(self, payload):
        with pytest.raises(AnnotationError, match="line 1"):
            parse_annotations(io.StringIO(payload + "\n"))

    def test_multiple_rings_flatten_to_polygons(self):
        ann = {
            "type": "glomerulus",
            "coordinates": [[[0, 0], [1, 0], [0, 1]], [[5, 5], [6, 5], [5, 6]]],
        }
        records = parse_annotations(io.StringIO(line("t1", [ann])))
        assert len(records[0].polygons) == 2
        assert all(p.label is ClassLabel.GLOMERULUS for p in records[0].polygons)

    def test_explicitly_empty_record(self):
        records = parse_annotations(io.StringIO(line("t9", [])))
        assert records[0].polygons == ()

    def test_round_trip(self):
        text = (
            line("a", [vessel([[0, 0], [12.5, 0], [0, 12.5]])])
            + line("b", [{"type": "unsure", "coordinates": [[[1, 2], [3, 4], [5, 0.5]]]}])
            + line("c", [])
        )
        records = parse_annotations(io.StringIO(text))
        again = parse_annotations(io.StringIO(serialize_annotations(records)))
        assert records == again


class TestFilterLabeled:
    def rec(self, tid, labels):
        ring = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0))
        return AnnotationRecord(tid, tuple(Polygon(l, ring) for l in labels))

    def test_counts_and_order(self):
        all_ids = [f"t{i:04d}" for i in range(7033)]
        records = [self.rec(f"t{i:04d}", [ClassLabel.BLOOD_VESSEL]) for i in range(1633)]
        index = filter_labeled(all_ids, records)
        assert len(index) == 1633
        assert index.tile_ids() == sorted(index.tile_ids())

    def test_glomerulus_only_excluded(self):
        index = filter_labeled(["a", "b"], [self.rec("a", [ClassLabel.GLOMERULUS])])
        assert len(index) == 0

    def test_empty_records(self):
        assert len(filter_labeled(["a"], [])) == 0

    def test_missing_image_errors(self):
        with pytest.raises(DataError, match="zz"):
            filter_labeled(["a"], [self.rec("zz", [ClassLabel.BLOOD_VESSEL])])

    def test_subset_and_idempotent(self):
        ids = ["c", "a", "b"]
        records = [
            self.rec("b", [ClassLabel.BLOOD_VESSEL, ClassLabel.UNSURE]),
            self.rec("a", [ClassLabel.UNSURE]),
            self.rec("c", [ClassLabel.BLOOD_VESSEL]),
        ]
        index = filter_labeled(ids, records)
        assert set(index.tile_ids()) <= set(ids)
        again = filter_labeled(index.tile_ids(), [e.record for e in index.entries])
        assert again.tile_ids() == index.tile_ids()


class TestSplit:
    def small_index(self, n):
        ring = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0))
        recs = [
            AnnotationRecord(f"t{i:03d}", (Polygon(ClassLabel.BLOOD_VESSEL, ring),))
            for i in range(n)
        ]
        return filter_labeled([r.tile_id for r in recs], recs)

    def test_val_count_rounding(self):
        index = split_train_val(self.small_index(10), 0.2, seed=7)
        assert len(index.split_entries(Split.VAL)) == 2
        assert len(index.split_entries(Split.TRAIN)) == 8

    def test_1633_gives_327_val(self):
        index = split_train_val(self.small_index(1633), 0.2, seed=0)
        assert len(index.split_entries(Split.VAL)) == 327

    def test_deterministic(self):
        a = split_train_val(self.small_index(50), 0.3, seed=11)
        b = split_train_val(self.small_index(50), 0.3, seed=11)
        assert [e.split for e in a.entries] == [e.split for e in b.entries]

    def test_partition(self):
        index = split_train_val(self.small_index(31), 0.25, seed=3)
        train = {e.tile_id for e in index.split_entries(Split.TRAIN)}
        val = {e.tile_id for e in index.split_entries(Split.VAL)}
        assert train | val == set(index.tile_ids())
        assert train & val == set()

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
    def test_bad_fraction(self, bad):
        with pytest.raises(ValueError):
            split_train_val(self.small_index(5), bad, seed=0)


class TestHistogram:
    def test_mixed_counts(self):
        ring = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0))
        rec = AnnotationRecord(
            "t",
            (
                Polygon(ClassLabel.BLOOD_VESSEL, ring),
                Polygon(ClassLabel.BLOOD_VESSEL, ring),
                Polygon(ClassLabel.UNSURE, ring),
            ),
        )
        assert class_histogram([rec]) == {
            ClassLabel.BLOOD_VESSEL: 2,
            ClassLabel.UNSURE: 1,
            ClassLabel.GLOMERULUS: 0,
        }

    def test_empty(self):
        assert class_histogram([]) == {label: 0 for label in ClassLabel}

    def test_fixture_tally(self):
        ring = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0))
        spec = [
            ("a", [ClassLabel.BLOOD_VESSEL] * 3),
            ("b", [ClassLabel.GLOMERULUS]),
            ("c", [ClassLabel.UNSURE, ClassLabel.BLOOD_VESSEL]),
            ("d", [ClassLabel.BLOOD_VESSEL] * 2),
            ("e", [ClassLabel.GLOMERULUS, ClassLabel.UNSURE, ClassLabel.BLOOD_VESSEL]),
        ]
        records = [
            AnnotationRecord(tid, tuple(Polygon(l, ring) for l in labels))
            for tid, labels in spec
        ]
        # 11 polygons total: 7 vessel, 2 glomerulus, 2 unsure.
        hist = class_histogram(records)
        assert sum(hist.values()) == 11
        assert hist[ClassLabel.BLOOD_VESSEL] == 7
        assert hist[ClassLabel.GLOMERULUS] == 2
        assert hist[ClassLabel.UNSURE] == 2


@settings(max_examples=40)
@given(
    st.lists(
        st.tuples(
            st.text("abcdef", min_size=1, max_size=6),
            st.lists(
                st.lists(
                    st.tuples(
                        st.floats(0, 512, allow_nan=False),
                        st.floats(0, 512, allow_nan=False),
                    ),
                    min_size=3,
                    max_size=6,
                ),
                max_size=3,
            ),
        ),
        max_size=5,
        unique_by=lambda t: t[0],
    )
)
def test_parse_serialize_round_trip_property(items):
    records = [
        AnnotationRecord(
            tid,
            tuple(
                Polygon(ClassLabel.BLOOD_VESSEL, tuple(ring)) for ring in rings
            ),
        )
        for tid, rings in items
    ]
    text = serialize_annotations(records)
    assert parse_annotations(io.StringIO(text)) == records
