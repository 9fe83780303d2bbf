import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_rir
from revrir.catalog import DimensionRange, RoomSpec, RoomType, TypeRanges, enumerate_rooms
from revrir.errors import FormatError, GeometryError, SamplingError, ValidationError
from revrir.simulate import (
    AcousticConfig,
    Placement,
    fractional_delay_taps,
    generate_rir,
    generate_rir_bank,
    read_bank,
    sample_placement,
    write_bank,
)

ROOM = RoomSpec(0, RoomType.SMALL, 3500, 4500, 3000)
PLACE = Placement((1.1, 1.7, 1.3), (2.45, 3.05, 1.62))
CFG = AcousticConfig()


def rir(placement=PLACE, beta=0.89, room=ROOM, **kw):
    return generate_rir(room, placement, AcousticConfig(**kw), beta=beta).samples


@pytest.mark.parametrize(
    "beta",
    [0.89, (0.9, 0.7, 0.5, 0.85, 0.3, 0.6)],
    ids=["uniform", "per-facet"],
)
def test_matches_brute_force_images_up_to_order_two(beta):
    got = generate_rir(ROOM, PLACE, AcousticConfig(max_image_order=2), beta=beta).samples
    betas = np.broadcast_to(beta, (6,))
    ref = brute_force_rir(ROOM.dims, PLACE.source, PLACE.microphone, betas, 8000, 343.0, 4096, 2)
    assert np.max(np.abs(got - ref)) < 1e-6


def test_free_field_peak_at_integer_delay():
    # 1.715 m at 343 m/s and 8 kHz is exactly 40 samples
    room = RoomSpec(0, RoomType.LARGE, 10000, 10000, 5000)
    p = Placement((3.0, 5.0, 2.5), (4.715, 5.0, 2.5))
    h = generate_rir(room, p, CFG, beta=0.0).samples
    assert int(np.argmax(np.abs(h))) == 40
    expected = 1 / (4 * math.pi * 1.715)
    assert abs(h.max() - expected) / expected < 0.02


@settings(max_examples=25, deadline=None)
@given(
    st.tuples(*(st.floats(0.6, 2.9) for _ in range(3))),
    st.tuples(*(st.floats(0.6, 2.9) for _ in range(3))),
)
def test_direct_path_arrival_near_expected_sample(src, mic):
    d = math.dist(src, mic)
    if d < 0.5:
        return
    h = rir(Placement(src, mic))
    expected = round(8000 * d / 343)
    # arrival: first sample reaching half the direct-path amplitude
    first = int(np.argmax(np.abs(h) >= 0.5 / (4 * math.pi * d)))
    assert abs(first - expected) <= 2


@pytest.mark.xfail(
    strict=True,
    reason="an 81-tap windowed sinc rings up to 40 samples before each arrival, "
    "so the first sample above 1e-9 cannot sit within 2 samples of the direct path",
)
def test_first_nonzero_sample_within_two_of_direct_path():
    h = rir()
    expected = round(8000 * PLACE.distance / 343)
    first = int(np.argmax(np.abs(h) > 1e-9))
    assert abs(first - expected) <= 2


@pytest.mark.xfail(
    strict=True,
    reason="between grid points the interpolated peak drops to about 64% of 1/(4 pi d) "
    "(half-sample delay), so the 2% bound only holds near integer delays",
)
def test_beta_zero_peak_amplitude_off_grid():
    d = 40.5 * 343 / 8000
    room = RoomSpec(0, RoomType.LARGE, 10000, 10000, 5000)
    h = generate_rir(room, Placement((3.0, 5.0, 2.5), (3.0 + d, 5.0, 2.5)), CFG, beta=0.0).samples
    expected = 1 / (4 * math.pi * d)
    assert abs(np.max(np.abs(h)) - expected) / expected < 0.02


def test_energy_grows_with_beta():
    e = {b: float(np.sum(rir(beta=b) ** 2)) for b in (0.5, 0.88, 0.9)}
    assert e[0.9] > e[0.88] > e[0.5]


def test_energy_ordering_against_brute_force_order_three():
    energies = []
    for b in (0.5, 0.9):
        ref = brute_force_rir(ROOM.dims, PLACE.source, PLACE.microphone, [b] * 6, 8000, 343.0, 4096, 3)
        got = rir(beta=b, max_image_order=3)
        assert np.max(np.abs(got - ref)) < 1e-6
        energies.append(np.sum(got**2))
    assert energies[1] > energies[0]


def test_reciprocity():
    a = rir(PLACE)
    b = rir(PLACE.swapped())
    assert np.max(np.abs(a - b)) < 1e-9


def test_fractional_delay_kernel_on_grid_is_impulse():
    first, taps = fractional_delay_taps(12.0)
    assert first == 12 - 40
    assert taps[40] == pytest.approx(1.0)
    np.testing.assert_allclose(np.delete(taps, 40), 0.0, atol=1e-12)


def test_rir_length_and_finite():
    h = rir()
    assert h.shape == (4096,) and np.all(np.isfinite(h))


def test_direct_path_must_fit():
    with pytest.raises(ValidationError):
        rir(rir_length=10)


def test_placement_outside_room():
    with pytest.raises(GeometryError):
        rir(Placement((4.0, 1.0, 1.0), (1.0, 1.0, 1.0)))


def test_placement_constraints_and_determinism():
    cfg = AcousticConfig()
    for seed in range(20):
        p = sample_placement(ROOM, np.random.default_rng(seed), cfg)
        for point in (p.source, p.microphone):
            assert all(0.5 <= point[a] <= ROOM.dims[a] - 0.5 for a in range(3))
        assert p.distance >= 0.5
    a = sample_placement(ROOM, np.random.default_rng(42), cfg)
    b = sample_placement(ROOM, np.random.default_rng(42), cfg)
    assert a == b


def test_placement_geometry_errors():
    tiny = RoomSpec(0, RoomType.SMALL, 1000, 1000, 1000)
    with pytest.raises(GeometryError):
        sample_placement(tiny, np.random.default_rng(0), CFG)
    narrow = RoomSpec(0, RoomType.SMALL, 1200, 1200, 1200)
    with pytest.raises(GeometryError):
        sample_placement(narrow, np.random.default_rng(0), AcousticConfig(min_src_mic_distance=0.5))


def test_rejection_budget():
    room = RoomSpec(0, RoomType.SMALL, 1400, 1400, 1400)
    # feasible in principle (diagonal 0.69 m) but rarely hit
    cfg = AcousticConfig(min_src_mic_distance=0.68, max_tries=5)
    with pytest.raises(SamplingError):
        sample_placement(room, np.random.default_rng(0), cfg)


def test_acoustic_config_validation():
    with pytest.raises(ValidationError):
        AcousticConfig(beta=1.0)
    with pytest.raises(ValidationError):
        AcousticConfig(rir_length=0)
    with pytest.raises(ValidationError):
        AcousticConfig(max_image_order=-1)


def _three_rooms():
    one = TypeRanges(DimensionRange.single(3.0), DimensionRange.single(3.5), DimensionRange.single(2.5))
    return enumerate_rooms({t: one for t in RoomType})


def test_bank_counts_determinism_and_parallel_equality():
    cat = _three_rooms()
    cfg = AcousticConfig(rir_length=512)
    a = generate_rir_bank(cat, 2, 7, cfg)
    b = generate_rir_bank(cat, 2, 7, cfg)
    assert [r.class_id for r in a] == [0, 0, 1, 1, 2, 2]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.samples, y.samples)
        assert 0.88 <= x.beta[0] <= 0.9 and len(set(x.beta)) == 1
    c = generate_rir_bank(cat, 2, 7, cfg, jobs=2)
    for x, y in zip(a, c):
        np.testing.assert_array_equal(x.samples, y.samples)
    assert len({r.placement for r in a}) == 6


def test_bank_roundtrip(tmp_path):
    cat = _three_rooms()
    bank = generate_rir_bank(cat, 1, 3, AcousticConfig(rir_length=256))
    path = tmp_path / "bank.bin"
    write_bank(path, bank, "ab" * 32)
    back, h = read_bank(path)
    assert h == "ab" * 32
    for x, y in zip(bank, back):
        assert x.class_id == y.class_id and x.placement == y.placement and x.beta == y.beta
        assert np.max(np.abs(x.samples - y.samples)) < 1e-6
    raw = path.read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_bank(tmp_path / "cut.bin")
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_bank(tmp_path / "bad.bin")
