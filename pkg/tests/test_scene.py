import math

import numpy as np
import pytest
from scipy.stats import chisquare

from spatial_llm import scene
from spatial_llm.foa import FoaClip, intensity_vectors, stft
from spatial_llm.localisation import Direction, angular_distance, doa_from_iv
from spatial_llm.scene import (
    DatasetConfig,
    GeometryError,
    PlacementError,
    RoomSpec,
    SceneManifest,
    build_dataset,
    co_active_span,
    convolve_foa,
    direction_between,
    first_arrival_doa,
    gen_toy_utterance,
    image_source_rir,
    image_sources,
    mix_scene,
    read_manifest,
    render_symbols,
    sample_placement,
    simulate_scene,
)

ROOM = RoomSpec((6.0, 5.0, 3.0), 0.9)
RCV = (3.0, 2.5, 1.5)


def test_room_validation():
    with pytest.raises(GeometryError):
        RoomSpec((1.0, 5.0, 3.0))
    with pytest.raises(GeometryError):
        RoomSpec((4.0, 4.0, 3.0), 0.0)
    assert RoomSpec((4, 4, 3), 0.5).absorption == (0.5,) * 6


def test_toy_symbol_frequency():
    seg = render_symbols([0])
    assert len(seg) == 1600
    spec = stft(seg)
    # 400 Hz sits on bin 20 of the 800-point frame
    assert (np.abs(spec.bins).argmax(axis=1) == 20).all()


def test_toy_utterance_bounds_and_determinism():
    for seed in range(50):
        sig, text = gen_toy_utterance(np.random.default_rng(seed))
        words = text.split()
        assert 5 <= len(words) <= 12
        assert all(w in "abcdefghijklmnop" for w in words)
        assert len(sig) == 1600 * len(words)
    a = gen_toy_utterance(np.random.default_rng(3))
    b = gen_toy_utterance(np.random.default_rng(3))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    with pytest.raises(ValueError):
        gen_toy_utterance(np.random.default_rng(0), lexicon_size=27)


def test_left_right_windows(rng):
    for _ in range(200):
        left, right = sample_placement("left_right", rng, ROOM, RCV)
        assert 60 <= left.direction_from_receiver.azimuth <= 120
        assert -120 <= right.direction_from_receiver.azimuth <= -60
        for p in (left, right):
            assert -30 <= p.direction_from_receiver.elevation <= 30
            assert ROOM.contains(p.position)
            assert p.distance > 0.3
            d = direction_between(p.position, RCV)
            assert angular_distance(d, p.direction_from_receiver) < 1e-6


def test_random_azimuth_uniformity():
    rng = np.random.default_rng(11)
    az = []
    while len(az) < 10000:
        for p in sample_placement("random", rng, ROOM, RCV):
            az.append(p.direction_from_receiver.azimuth)
            assert abs(p.direction_from_receiver.elevation) <= 60 + 1e-9
    counts, _ = np.histogram(az[:10000], bins=12, range=(-180, 180))
    assert chisquare(counts).pvalue > 0.01


def test_placement_needs_clearance(rng):
    with pytest.raises(GeometryError):
        sample_placement("random", rng, ROOM, (0.2, 2.5, 1.5))


def test_placement_failure_when_nothing_fits(rng, monkeypatch):
    monkeypatch.setattr(scene, "MIN_SOURCE_DISTANCE", 5.0)
    with pytest.raises(PlacementError):
        sample_placement("left_right", rng, RoomSpec((4.0, 4.0, 3.0), 0.9), (2.0, 2.0, 1.5))


def test_image_count_per_axis():
    pos, counts, _ = image_sources(RoomSpec((5, 5, 3), 0.5, max_order=3), (1, 1, 1))
    assert len(pos) == 7**3
    assert counts.min() == 0


def test_anechoic_rir_single_group_and_doa(rng):
    room = RoomSpec((6, 5, 3), 1.0)
    src = (4.5, 3.5, 2.0)
    rir = image_source_rir(room, src, RCV)
    assert len(rir) <= 16 + int(rir.direct_delay) + 1
    clip = convolve_foa(rng.standard_normal(8000), rir)
    truth = direction_between(src, RCV)
    assert angular_distance(doa_from_iv(intensity_vectors(clip)), truth) < 1.0


def test_direct_path_inverse_distance():
    room = RoomSpec((10, 10, 3), 1.0)
    rcv = (2.0, 5.0, 1.5)
    step = 343.0 / 16000  # metres per sample
    near = image_source_rir(room, (2.0 + 64 * step, 5.0, 1.5), rcv)
    far = image_source_rir(room, (2.0 + 128 * step, 5.0, 1.5), rcv)
    # integer-sample delays give a single unit sinc tap
    assert np.abs(near.taps[0]).max() == pytest.approx(2 * np.abs(far.taps[0]).max(), rel=1e-6)


def test_first_tap_near_direct_delay():
    rir = image_source_rir(ROOM, (4.7, 3.9, 2.2), RCV)
    w = np.abs(rir.taps[0])
    first = int(np.argmax(w >= 0.5 * w.max()))
    assert abs(first - rir.direct_delay) <= 1


def test_first_arrival_doa_reverberant(rng):
    errs = []
    for _ in range(30):
        left, right = sample_placement("random", rng, ROOM, RCV)
        for p in (left, right):
            rir = image_source_rir(ROOM, p.position, RCV)
            errs.append(angular_distance(first_arrival_doa(rir), p.direction_from_receiver))
    assert max(errs) < 5.0


def test_convolution_contracts(rng):
    rir = image_source_rir(ROOM, (4.0, 3.0, 1.0), RCV)
    imp = np.zeros(1)
    imp[0] = 1
    assert np.array_equal(convolve_foa(imp, rir).samples.round(12), rir.taps.round(12))
    a, b = rng.standard_normal((2, 500))
    lhs = convolve_foa(a + b, rir).samples
    rhs = convolve_foa(a, rir).samples + convolve_foa(b, rir).samples
    assert np.abs(lhs - rhs).max() < 1e-9
    assert len(convolve_foa(a, rir)) == 500 + len(rir) - 1
    assert not convolve_foa(np.zeros(100), rir).samples.any()


def _clip(n, value=0.1):
    return FoaClip(np.full((4, n), value))


@pytest.mark.parametrize("ratio", [0.0, 0.25, 0.5, 0.7, 1.0])
def test_overlap_span_exact(ratio):
    for len1, len2 in ((32000, 16000), (12345, 20001), (1600, 1600)):
        res = mix_scene(_clip(len1), _clip(len2), ratio)
        assert res.onsets[1] == len1 - round(ratio * min(len1, len2))
        assert co_active_span(len1, len2, res.onsets) == round(ratio * min(len1, len2))


def test_overlap_examples():
    res = mix_scene(_clip(32000), _clip(16000), 0.5)
    assert co_active_span(32000, 16000, res.onsets) == 8000
    sim = mix_scene(_clip(32000), _clip(16000), simultaneous=True)
    assert sim.onsets == (0, 0)
    assert co_active_span(32000, 16000, sim.onsets) == 16000
    zero = mix_scene(_clip(1000), _clip(700), 0.0)
    assert co_active_span(1000, 700, zero.onsets) == 0


def test_mix_energy_identity(rng):
    w1 = FoaClip(rng.uniform(-0.8, 0.8, (4, 3000)))
    w2 = FoaClip(rng.uniform(-0.8, 0.8, (4, 2000)))
    res = mix_scene(w1, w2, 0.7)
    assert res.gain < 1.0
    assert np.abs(res.clip.samples).max() == pytest.approx(0.9)
    ref = np.zeros_like(res.clip.samples)
    ref[:, :3000] += w1.samples
    ref[:, res.onsets[1] : res.onsets[1] + 2000] += w2.samples
    assert np.array_equal(res.clip.samples, ref * res.gain)
    quiet = mix_scene(_clip(100, 0.1), _clip(100, 0.1), 0.0)
    assert quiet.gain == 1.0


def test_simulated_ground_truth_consistency():
    cfg = DatasetConfig(mode="random", n_scenes=40, seed=5)
    for i in range(cfg.n_scenes):
        scene = simulate_scene(cfg, i)
        for wet, d in zip(scene.wet, scene.manifest.directions()):
            assert angular_distance(doa_from_iv(intensity_vectors(wet)), d) < 5.0


def test_manifest_onsets_and_windows():
    cfg = DatasetConfig(mode="left_right", n_scenes=10, overlap_ratio=0.0, seed=3)
    for i in range(10):
        m = simulate_scene(cfg, i).manifest
        dirs = m.directions()
        assert len(m.transcripts) == 2
        assert sorted(d.azimuth > 0 for d in dirs) == [False, True]
        for d in dirs:
            assert 60 <= abs(d.azimuth) <= 120 and -30 <= d.elevation <= 30


def test_scene_independent_of_order():
    cfg = DatasetConfig(mode="random", n_scenes=5, seed=9)
    late = simulate_scene(cfg, 4)
    for i in range(4):
        simulate_scene(cfg, i)
    again = simulate_scene(cfg, 4)
    assert late.manifest.to_json() == again.manifest.to_json()
    assert np.array_equal(late.mixture.samples, again.mixture.samples)


def test_single_source_scene():
    m = simulate_scene(DatasetConfig(mode="random", count_sources=1, seed=1), 0).manifest
    assert len(m.placements) == 1 and len(m.transcripts) == 1 and m.onsets == [0]


def test_build_dataset_byte_identical(tmp_path):
    cfg = DatasetConfig(mode="left_right", n_scenes=4, overlap_ratio=0.25, seed=7)
    a = build_dataset(cfg, tmp_path / "a")
    b = build_dataset(cfg, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    for name in sorted(p.name for p in (tmp_path / "a" / "audio").iterdir()):
        assert (tmp_path / "a" / "audio" / name).read_bytes() == (tmp_path / "b" / "audio" / name).read_bytes()
    assert len(read_manifest(a)) == 4
    assert DatasetConfig.from_text((tmp_path / "a" / "config.txt").read_text()) == cfg


def test_manifest_json_round_trip():
    m = simulate_scene(DatasetConfig(seed=2), 0).manifest
    import json

    back = SceneManifest.from_dict(json.loads(m.to_json()))
    assert back == m
