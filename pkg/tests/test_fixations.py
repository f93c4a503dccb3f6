"""Fixation CSV parsing, validation and round-tripping."""

import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazedistill.errors import ParseError, ValidationError
from gazedistill.fixations import (
    FixationPoint,
    GazeSequence,
    first_sequence_per_image,
    parse_fixation_csv,
    serialize_fixation_csv,
    validate_sequence,
)

SAMPLE = """image_id,x_px,y_px,onset_ms,duration_ms
img_a,10.5,20.0,100,250
img_b,5,6,0,100
img_a,30.0,40.0,50,80
img_a,1,2,900,120
"""


def test_parse_groups_by_image_and_sorts_by_onset():
    seqs = parse_fixation_csv(io.StringIO(SAMPLE))
    # independent group-by: collect rows per id, sort by onset
    rows = [line.split(",") for line in SAMPLE.strip().split("\n")[1:]]
    by_id = {}
    for r in rows:
        by_id.setdefault(r[0], []).append(tuple(float(v) for v in r[1:]))
    for key in by_id:
        by_id[key].sort(key=lambda t: t[2])

    assert [s.image_id for s in seqs] == ["img_a", "img_b"]
    got_a = [(p.x_px, p.y_px, p.onset_ms, p.duration_ms) for p in seqs[0].points]
    assert got_a == by_id["img_a"]
    assert seqs[0].points[0].onset_ms == 50.0  # sorted, not file order


def test_total_duration_is_last_offset():
    seqs = parse_fixation_csv(io.StringIO(SAMPLE))
    assert seqs[0].total_duration_ms == 900 + 120
    assert GazeSequence("x", ()).total_duration_ms == 0.0


def test_reader_column_keys_sequences_separately():
    text = (
        "image_id,x_px,y_px,onset_ms,duration_ms,reader\n"
        "img,1,1,0,100,r1\n"
        "img,2,2,50,100,r2\n"
        "img,3,3,100,100,r1\n"
    )
    seqs = parse_fixation_csv(io.StringIO(text))
    assert [(s.image_id, s.reader, len(s.points)) for s in seqs] == [
        ("img", "r1", 2),
        ("img", "r2", 1),
    ]
    assert first_sequence_per_image(seqs)["img"].reader == "r1"


def test_round_trip_through_serializer():
    seqs = parse_fixation_csv(io.StringIO(SAMPLE))
    again = parse_fixation_csv(io.StringIO(serialize_fixation_csv(seqs)))
    assert again == seqs


@given(
    st.lists(
        st.tuples(
            st.floats(0, 500, allow_nan=False, width=32),
            st.floats(0, 500, allow_nan=False, width=32),
            st.floats(0, 5000, allow_nan=False, width=32),
            st.floats(0, 800, allow_nan=False, width=32),
        ),
        min_size=1,
        max_size=8,
    )
)
@settings(max_examples=40, deadline=None)
def test_round_trip_property(rows):
    pts = tuple(sorted((FixationPoint(*r) for r in rows), key=lambda p: p.onset_ms))
    seq = GazeSequence("img", pts)
    back = parse_fixation_csv(io.StringIO(serialize_fixation_csv([seq])))
    assert back == [seq]


class TestParseErrors:
    def test_bad_header(self):
        with pytest.raises(ParseError, match="header"):
            parse_fixation_csv(io.StringIO("a,b,c\n1,2,3\n"))

    def test_malformed_row_names_line_number(self):
        text = SAMPLE.rsplit("img_a,1,2,900,120\n", 1)[0] + "img_c,1,2\n"
        with pytest.raises(ParseError, match="line 5"):
            parse_fixation_csv(io.StringIO(text))

    def test_non_numeric_field_names_line_number(self):
        text = "image_id,x_px,y_px,onset_ms,duration_ms\nimg,oops,2,3,4\n"
        with pytest.raises(ParseError, match="line 2"):
            parse_fixation_csv(io.StringIO(text))

    def test_negative_duration_is_validation_error(self):
        text = "image_id,x_px,y_px,onset_ms,duration_ms\nimg,1,2,3,-4\n"
        with pytest.raises(ValidationError, match="line 2.*duration"):
            parse_fixation_csv(io.StringIO(text))


class TestValidateSequence:
    def test_out_of_bounds_point_clamps_to_boundary(self):
        seq = GazeSequence("img", (FixationPoint(64 + 5, 10, 0, 100),))
        fixed, report = validate_sequence(seq, width=64, height=64)
        assert (fixed.points[0].x_px, fixed.points[0].y_px) == (63.0, 10.0)
        assert report.n_clamped == 1 and report.n_points == 1

    def test_in_bounds_points_untouched(self):
        seq = GazeSequence("img", (FixationPoint(10, 20, 0, 100), FixationPoint(0, 63, 5, 50)))
        fixed, report = validate_sequence(seq, width=64, height=64)
        assert fixed == seq
        assert report.n_clamped == 0

    def test_negative_coordinates_clamp_to_zero(self):
        seq = GazeSequence("img", (FixationPoint(-3.5, -1, 0, 10),))
        fixed, report = validate_sequence(seq, 32, 32)
        assert (fixed.points[0].x_px, fixed.points[0].y_px) == (0.0, 0.0)
        assert report.n_clamped == 1
