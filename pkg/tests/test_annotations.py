import io
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from benthoscan.annotations import (
    AnnotationError,
    CabofLabel,
    KeyframeBox,
    SpeciesClass,
    SubstrateClass,
    SubstrateInterval,
    boxes_at_frame,
    cabof_totals,
    cooccurrence_counts,
    cooccurrence_table,
    format_timestamp,
    frame_index,
    frame_substrate_labels,
    interpolate_keyframes,
    parse_annotation_csv,
    parse_timestamp,
    read_keyframes,
    serialize_annotation_csv,
    substrate_multihot,
    write_keyframes,
)

# A small dive transcript exercising every row kind: overlapping substrates of
# different kinds, repeated substrate later in the dive, species rows in between.
SAMPLE_CSV = """\
Annotation,Begin,End,Count
Boulder,0:00:20,0:00:25,
FPU,0:00:21,,2
Cobble,0:00:23,0:01:30,
Mud,0:00:40,0:01:20,
SL,0:00:49,,1
SL,0:00:51,,3
Rock,0:01:00,0:03:50,
Mud,0:02:10,0:02:15,
"""


def test_enums_fixed_and_ordered():
    assert [s.value for s in SubstrateClass] == ["Boulder", "Cobble", "Mud", "Rock"]
    assert [s.value for s in SpeciesClass] == [
        "BS", "FPU", "GG", "LLS", "RSG", "SL", "LS", "WSSC", "WSpSC", "YG",
    ]


def test_parse_sample():
    intervals, cabofs = parse_annotation_csv(io.StringIO(SAMPLE_CSV))
    assert intervals[0] == SubstrateInterval(SubstrateClass.BOULDER, 20.0, 25.0)
    assert len(intervals) == 5
    assert cabofs[0] == CabofLabel(SpeciesClass.FPU, 21.0, 2)
    assert [c.count for c in cabofs] == [2, 1, 3]


def test_parse_empty_input():
    assert parse_annotation_csv(io.StringIO("")) == ([], [])
    assert parse_annotation_csv(io.StringIO(" \n \n")) == ([], [])


@pytest.mark.parametrize(
    "row, message",
    [
        ("Boulder,0:00:25,0:00:20,", "precedes"),
        ("Basalt,0:00:20,0:00:25,", "unknown annotation name"),
        ("FPU,0:00:21,,", "End (substrate) or Count"),
        ("FPU,0:00:21,,0", "count must be >= 1"),
        ("FPU,0:00:21,,two", "bad Count"),
        ("FPU,bad,,2", "bad timestamp"),
        ("Boulder,0:00:20,0:00:25,3", "both End and Count"),
        (",0:00:20,0:00:25,", "missing annotation name"),
        ("Mud,,0:00:25,", "missing Begin"),
    ],
)
def test_parse_rejects_malformed_rows_with_row_number(row, message):
    text = "Annotation,Begin,End,Count\n" + row + "\n"
    with pytest.raises(AnnotationError, match="row 2"):
        parse_annotation_csv(io.StringIO(text))
    with pytest.raises(AnnotationError, match=message.replace("(", "\\(").replace(")", "\\)")):
        parse_annotation_csv(io.StringIO(text))


def test_parse_rejects_bad_header():
    with pytest.raises(AnnotationError, match="row 1"):
        parse_annotation_csv(io.StringIO("a,b\nBoulder,0:00:20,0:00:25,\n"))


def test_parse_rejects_same_substrate_overlap():
    text = (
        "Annotation,Begin,End,Count\n"
        "Mud,0:00:10,0:00:20,\n"
        "Mud,0:00:20,0:00:30,\n"  # endpoints inclusive: touching counts as overlap
    )
    with pytest.raises(AnnotationError, match="overlap"):
        parse_annotation_csv(io.StringIO(text))


def test_parse_unknown_species_with_count_goes_to_other_bucket():
    text = "Annotation,Begin,End,Count\nUI anemone,0:00:21,,4\n"
    intervals, cabofs = parse_annotation_csv(io.StringIO(text))
    assert intervals == []
    assert cabofs[0].species is None
    assert cabofs[0].other_name == "UI anemone"
    assert cabof_totals(cabofs) == {sp: 0 for sp in SpeciesClass}


def test_timestamp_parsing():
    assert parse_timestamp("0:00:20") == 20.0
    assert parse_timestamp("1:02:03") == 3723.0
    assert format_timestamp(3723.0) == "1:02:03"
    for bad in ("20", "0:61:00", "0:00:61", "-0:00:01", "0:0:0:0"):
        with pytest.raises(AnnotationError):
            parse_timestamp(bad)


def test_frame_index_rounds_half_up():
    assert frame_index(1.0, 30) == 30
    assert frame_index(1.25, 30) == 38  # 37.5 rounds up, not to even
    assert frame_index(4.0, 29.97) == 120  # 119.88
    assert frame_index(5.0, 29.97) == 150  # 149.85


def test_frame_substrate_labels_from_sample():
    intervals, _ = parse_annotation_csv(io.StringIO(SAMPLE_CSV))
    assert frame_substrate_labels(intervals, 24) == {SubstrateClass.BOULDER, SubstrateClass.COBBLE}
    assert frame_substrate_labels(intervals, 132) == {SubstrateClass.ROCK, SubstrateClass.MUD}
    assert frame_substrate_labels(intervals, 10) == frozenset()
    # endpoints are inclusive on both sides
    assert SubstrateClass.BOULDER in frame_substrate_labels(intervals, 20)
    assert SubstrateClass.BOULDER in frame_substrate_labels(intervals, 25)


def test_substrate_multihot_order():
    v = substrate_multihot({SubstrateClass.ROCK, SubstrateClass.BOULDER})
    assert v.tolist() == [1.0, 0.0, 0.0, 1.0]


KF = lambda frame, box: KeyframeBox("v", frame, 7, SpeciesClass.SL, *box)


def test_interpolation_fixture():
    a = KF(100, (10, 10, 20, 20))
    b = KF(130, (10, 40, 20, 50))
    assert interpolate_keyframes(a, b, 115).box == (10, 25, 20, 35)
    assert interpolate_keyframes(a, b, 100) == a
    assert interpolate_keyframes(a, b, 130).box == b.box
    # fraction 0.8 of the way down
    assert interpolate_keyframes(a, b, 124).box == (10, 34, 20, 44)


def test_interpolation_argument_order_irrelevant():
    a = KF(100, (10, 10, 20, 20))
    b = KF(130, (10, 40, 20, 50))
    assert interpolate_keyframes(b, a, 115) == interpolate_keyframes(a, b, 115)


def test_interpolation_rejects_bad_input():
    a = KF(100, (10, 10, 20, 20))
    b = KF(130, (10, 40, 20, 50))
    with pytest.raises(AnnotationError, match="outside"):
        interpolate_keyframes(a, b, 131)
    other = KeyframeBox("v", 130, 8, SpeciesClass.SL, 10, 40, 20, 50)
    with pytest.raises(AnnotationError, match="different targets"):
        interpolate_keyframes(a, other, 115)


@given(
    f0=st.integers(0, 500),
    span=st.integers(1, 400),
    frame_off=st.integers(0, 400),
    x1=st.floats(0, 100), y1=st.floats(0, 100),
    w0=st.floats(1, 50), h0=st.floats(1, 50),
    x1b=st.floats(0, 100), y1b=st.floats(0, 100),
    w1=st.floats(1, 50), h1=st.floats(1, 50),
)
def test_interpolation_stays_inside_endpoint_hull(
    f0, span, frame_off, x1, y1, w0, h0, x1b, y1b, w1, h1
):
    a = KF(f0, (x1, y1, x1 + w0, y1 + h0))
    b = KF(f0 + span, (x1b, y1b, x1b + w1, y1b + h1))
    mid = interpolate_keyframes(a, b, f0 + frame_off % (span + 1))
    for i in range(4):
        lo, hi = min(a.box[i], b.box[i]), max(a.box[i], b.box[i])
        assert lo - 1e-9 <= mid.box[i] <= hi + 1e-9


def test_boxes_at_frame_materializes_all_targets():
    kfs = [
        KF(100, (10, 10, 20, 20)),
        KF(130, (10, 40, 20, 50)),
        KeyframeBox("v", 110, 9, SpeciesClass.FPU, 50, 50, 60, 60),
        KeyframeBox("v", 120, 9, SpeciesClass.FPU, 50, 70, 60, 80),
        KeyframeBox("w", 115, 1, SpeciesClass.GG, 0, 0, 5, 5),  # other video
    ]
    boxes = boxes_at_frame(kfs, "v", 115)
    assert {b.target for b in boxes} == {7, 9}
    assert boxes[0].box == (10, 25, 20, 35)
    assert boxes[1].box == (50, 60, 60, 70)
    assert boxes_at_frame(kfs, "v", 99) == []


def test_round_trip_of_sample():
    records = parse_annotation_csv(io.StringIO(SAMPLE_CSV))
    again = parse_annotation_csv(io.StringIO(serialize_annotation_csv(*records)))
    assert again == records


_species = st.sampled_from(list(SpeciesClass))
_substrates = st.sampled_from(list(SubstrateClass))
_seconds = st.integers(0, 9 * 3600).map(float)


@st.composite
def _interval_lists(draw):
    intervals = []
    for sub in draw(st.lists(_substrates, max_size=4, unique=True)):
        t = 0.0
        for _ in range(draw(st.integers(1, 3))):
            begin = t + draw(st.integers(1, 100))
            end = begin + draw(st.integers(0, 100))
            intervals.append(SubstrateInterval(sub, float(begin), float(end)))
            t = end + 1  # keep same-substrate intervals strictly apart
    return intervals


@st.composite
def _cabof_lists(draw):
    return [
        CabofLabel(draw(_species), draw(_seconds), draw(st.integers(1, 40)))
        for _ in range(draw(st.integers(0, 8)))
    ]


@given(_interval_lists(), _cabof_lists())
def test_round_trip_property(intervals, cabofs):
    text = serialize_annotation_csv(intervals, cabofs)
    parsed = parse_annotation_csv(io.StringIO(text))
    assert parsed == (intervals, cabofs)


def test_cooccurrence_fixture_exact():
    # 813 of 1000 FPU individuals while mud is visible: entry is exactly 0.813.
    intervals = [
        SubstrateInterval(SubstrateClass.MUD, 0.0, 100.0),
        SubstrateInterval(SubstrateClass.ROCK, 101.0, 200.0),
    ]
    cabofs = [
        CabofLabel(SpeciesClass.FPU, 50.0, 813),
        CabofLabel(SpeciesClass.FPU, 150.0, 187),
    ]
    table = cooccurrence_table(intervals, cabofs)
    assert table[SubstrateClass.MUD][SpeciesClass.FPU] == 0.813
    assert table[SubstrateClass.ROCK][SpeciesClass.FPU] == 0.187
    assert SpeciesClass.SL not in table[SubstrateClass.MUD]  # no individuals


def test_cooccurrence_counts_individuals_not_labels():
    intervals = [SubstrateInterval(SubstrateClass.COBBLE, 0.0, 10.0)]
    cabofs = [CabofLabel(SpeciesClass.SL, 5.0, 3), CabofLabel(SpeciesClass.SL, 20.0, 1)]
    num, den = cooccurrence_counts([(intervals, cabofs)])
    assert num[SubstrateClass.COBBLE][SpeciesClass.SL] == 3
    assert den[SpeciesClass.SL] == 4


@given(_interval_lists(), _cabof_lists())
def test_cooccurrence_matches_brute_force_recount(intervals, cabofs):
    table = cooccurrence_table(intervals, cabofs)
    # independent recount in exact rational arithmetic
    for sub in SubstrateClass:
        for sp in SpeciesClass:
            den = sum(c.count for c in cabofs if c.species is sp)
            if den == 0:
                assert sp not in table[sub]
                continue
            num = sum(
                c.count
                for c in cabofs
                if c.species is sp
                and any(iv.substrate is sub and iv.begin <= c.at <= iv.end for iv in intervals)
            )
            assert table[sub][sp] == float(Fraction(num, den))


# Frozen distribution of counted individuals per species and split; the totals
# line must stay arithmetically consistent with the per-species entries.
CABOF_DISTRIBUTION = {
    "train": {
        "BS": 292, "FPU": 2828, "GG": 398, "LLS": 269, "RSG": 190,
        "SL": 1649, "LS": 517, "WSSC": 832, "WSpSC": 279, "YG": 103,
    },
    "val": {
        "BS": 17, "FPU": 154, "GG": 80, "LLS": 8, "RSG": 19,
        "SL": 208, "LS": 40, "WSSC": 164, "WSpSC": 22, "YG": 9,
    },
    "test": {
        "BS": 52, "FPU": 420, "GG": 78, "LLS": 29, "RSG": 48,
        "SL": 742, "LS": 75, "WSSC": 317, "WSpSC": 17, "YG": 38,
    },
}
CABOF_SPLIT_TOTALS = {"train": 7357, "val": 721, "test": 1816}


@pytest.mark.parametrize("split", list(CABOF_DISTRIBUTION))
def test_cabof_totals_reproduce_reference_distribution(split):
    # One label per species carrying the split's total individual count.
    cabofs = [
        CabofLabel(SpeciesClass(name), 1.0, n)
        for name, n in CABOF_DISTRIBUTION[split].items()
        if n > 0
    ]
    totals = cabof_totals(cabofs)
    assert {sp.value: n for sp, n in totals.items()} == CABOF_DISTRIBUTION[split]
    assert sum(totals.values()) == CABOF_SPLIT_TOTALS[split]
    assert totals[SpeciesClass.FPU] == CABOF_DISTRIBUTION[split]["FPU"]


def test_keyframe_jsonl_round_trip(tmp_path):
    kfs = [
        KeyframeBox("dive1", 120, 3, SpeciesClass.YG, 1.5, 2.5, 9.0, 12.0),
        KeyframeBox("dive1", 130, 3, SpeciesClass.YG, 1.5, 12.5, 9.0, 22.0),
    ]
    path = tmp_path / "kf.jsonl"
    write_keyframes(path, kfs)
    assert read_keyframes(path) == kfs


def test_keyframe_validation():
    with pytest.raises(AnnotationError, match="degenerate"):
        KeyframeBox("v", 0, 1, SpeciesClass.BS, 10, 10, 10, 20)
    with pytest.raises(AnnotationError, match="negative frame"):
        KeyframeBox("v", -1, 1, SpeciesClass.BS, 0, 0, 10, 20)


def test_cabof_label_validation():
    with pytest.raises(AnnotationError, match="count"):
        CabofLabel(SpeciesClass.BS, 1.0, 0)
    with pytest.raises(AnnotationError, match="negative timestamp"):
        CabofLabel(SpeciesClass.BS, -1.0, 1)


def test_interval_validation():
    with pytest.raises(AnnotationError):
        SubstrateInterval(SubstrateClass.MUD, 10.0, 5.0)
    with pytest.raises(AnnotationError):
        SubstrateInterval(SubstrateClass.MUD, -1.0, 5.0)
