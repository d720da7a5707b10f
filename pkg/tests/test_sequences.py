import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvwb.errors import ConfigError, SpecError
from nvwb.sequences import (
    PROTOCOLS,
    ProtocolSpec,
    PulseSequence,
    Segment,
    build,
    export_timing_table,
    parse_sweep,
    parse_timing_table,
    validate,
)

G = 1000
INIT = 5_000_000
EXP = 500_000


def spec(kind, sweep, **kw):
    if kind in ("ramsey", "hahn", "rabi"):
        kw.setdefault("pi_half", 54)
    return ProtocolSpec(kind, sweep, **kw)


def test_rabi_single_microwave_segment():
    seq = build(spec("rabi", [108]), 108)
    mw = seq.on("microwave")
    assert len(mw) == 1
    s = mw[0]
    assert s.duration == 108
    init_end = INIT
    assert s.start == init_end + G
    signal_end = seq.on("laser")[1].end
    assert s.end < seq.on("camera")[0].start < signal_end
    # nothing in the reference half
    assert all(m.end <= signal_end for m in mw)


def test_rabi_timing_table_rows():
    # the reference half keeps the idle microwave slot, so both halves share timing
    text = export_timing_table(build(spec("rabi", [108]), 108))
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    assert rows[0] == "channel,start_ns,end_ns"
    assert rows[1:] == [
        "laser,0,5000000",
        "microwave,5001000,5001108",
        "camera,5002108,5502108",
        "laser,5002108,5504108",
        "laser,5505108,10505108",
        "camera,10507216,11007216",
        "laser,10507216,11009216",
    ]


def test_ramsey_zero_gap():
    seq = build(spec("ramsey", [0, 100]), 0)
    a, b = seq.on("microwave")
    assert a.duration == b.duration == 54
    assert b.start == a.end


def test_t1_camera_arithmetic():
    seq = build(ProtocolSpec("t1", [1_000_000]), 1_000_000)
    cam = seq.on("camera")[0]
    assert cam.start == INIT + 1_000_000
    assert cam.duration == EXP
    readout = seq.on("laser")[1]
    assert readout.start <= cam.start and cam.end <= readout.end
    assert not seq.on("microwave")


def test_hahn_pi_bisects_free_evolution():
    for tau in (0, 1, 999, 10_000, 46_701):
        seq = build(spec("hahn", [tau]), tau)
        h1, pi, h2 = seq.on("microwave")
        assert pi.duration == 108
        free_mid = (h1.end + h2.start) / 2
        assert abs((pi.start + pi.end) / 2 - free_mid) <= 1


def test_odmr_layout():
    seq = build(ProtocolSpec("odmr", [2.87e9]), 2.87e9)
    lasers = seq.on("laser")
    assert len(lasers) == 1 and lasers[0].start == 0 and lasers[0].end == seq.total_duration
    assert len(seq.on("microwave")) == 1
    assert len(seq.on("camera")) == 2
    assert seq.meta["mw_frequency_hz"] == 2.87e9
    assert validate(seq) == []


def test_spec_validation():
    with pytest.raises(SpecError):
        ProtocolSpec("bogus", [1])
    with pytest.raises(SpecError):
        ProtocolSpec("rabi", [])
    with pytest.raises(SpecError):
        ProtocolSpec("rabi", [-1])
    with pytest.raises(SpecError):
        ProtocolSpec("ramsey", [1], pi_half=54, pi=120)
    with pytest.raises(SpecError):
        build(ProtocolSpec("ramsey", [10]), 10)
    with pytest.raises(SpecError):
        build(spec("rabi", [10]), 11)
    assert ProtocolSpec("hahn", [1], pi=108).pi_half == 54


def test_spec_text_round_trip():
    s = spec("hahn", parse_sweep("0:120000:500"), include_reference=False, repeats=5)
    assert ProtocolSpec.from_text(s.to_text()) == s
    with pytest.raises(ConfigError):
        ProtocolSpec.from_text("kind = rabi\nsweep = 1\nwhat = 3\n")


def test_parse_sweep():
    assert parse_sweep("0:300:100") == (0.0, 100.0, 200.0, 300.0)
    assert parse_sweep("5, 7,9") == (5.0, 7.0, 9.0)
    with pytest.raises(ValueError):
        parse_sweep("0:1")


def test_validator_flags_containment():
    seq = PulseSequence((Segment("laser", 0, 100), Segment("camera", 150, 200)), 300,
                        exposure=50)
    v = validate(seq)
    assert [x.kind for x in v] == ["containment"]


def test_validator_flags_overlap():
    seq = PulseSequence((Segment("laser", 0, 100), Segment("microwave", 10, 50),
                         Segment("microwave", 40, 60)), 100)
    assert [x.kind for x in validate(seq)] == ["overlap"]


def test_validator_flags_other_problems():
    seq = PulseSequence((Segment("laser", 0, 100), Segment("camera", 10, 30),
                         Segment("strobe", 0, 5), Segment("microwave", 90, 120)), 100,
                        exposure=50)
    kinds = sorted(x.kind for x in validate(seq))
    assert kinds == ["bounds", "channel", "exposure"]


def test_empty_sequence_exports_header_only():
    assert export_timing_table(PulseSequence((), 0)) == "channel,start_ns,end_ns\n"


sweep_values = st.integers(0, 200_000)


@settings(max_examples=150)
@given(st.sampled_from(PROTOCOLS), sweep_values, st.booleans(), st.integers(0, 5000))
def test_built_sequences_are_valid_and_deterministic(kind, tau, ref, guard):
    value = 2.8e9 + tau if kind == "odmr" else tau
    s = spec(kind, [value], include_reference=ref, guard=guard)
    a, b = build(s, value), build(s, value)
    assert validate(a) == []
    assert export_timing_table(a) == export_timing_table(b)
    back = parse_timing_table(export_timing_table(a))
    assert back == a
    assert all(c.duration == s.exposure for c in a.on("camera"))
    if ref:
        split = max(x.end for x in a.segments if x.channel == "camera" and x.start < a.total_duration / 2)
        assert all(m.start < split for m in a.on("microwave"))


@settings(max_examples=60)
@given(st.sampled_from(["rabi", "ramsey", "hahn", "t1"]), st.lists(sweep_values, min_size=2,
                                                                     max_size=6, unique=True))
def test_total_duration_monotone(kind, taus):
    taus = sorted(taus)
    s = spec(kind, taus)
    totals = [build(s, t).total_duration for t in taus]
    assert all(b >= a for a, b in zip(totals, totals[1:]))


def test_reference_half_has_no_microwave_all_protocols():
    for kind in PROTOCOLS:
        value = 2.87e9 if kind == "odmr" else 2000
        seq = build(spec(kind, [value]), value)
        cams = seq.on("camera")
        assert len(cams) == 2
        mid = (cams[0].end + cams[1].start) / 2
        assert all(m.end <= mid for m in seq.on("microwave"))


def test_timing_table_parse_errors():
    with pytest.raises(ConfigError):
        parse_timing_table("a,b,c\n")
    with pytest.raises(ConfigError):
        parse_timing_table("# protocol: rabi\n")
    seq = parse_timing_table("channel,start_ns,end_ns\nlaser,0,10\n")
    assert seq.total_duration == 10 and np.all([s.channel == "laser" for s in seq.segments])
