import math

import numpy as np
import pytest

from spatial_llm import tasks
from spatial_llm.localisation import Direction
from spatial_llm.neural import model as nm
from spatial_llm.neural.model import AlignerConfig, DecoderConfig, ModelConfig
from spatial_llm.scene import DatasetConfig, SceneManifest, simulate_scene

SMALL = ModelConfig(
    AlignerConfig(heads=2, ffn=16, d_enc=8, d_q=8, d_llm=16),
    DecoderConfig(d_model=16, layers=1, heads=2, ffn=16, max_len=128, lora_rank=2, lora_alpha=2.0),
    n_mels=80,
    seed=0,
)


def manifest_with(directions, transcripts=("a b c d e", "f g h i j")):
    m = simulate_scene(DatasetConfig(mode="left_right", seed=1), 0).manifest
    placements = []
    for p, d in zip(m.placements, directions):
        placements.append({**p, "direction_from_receiver": Direction(*d).as_dict()})
    return SceneManifest(**{**m.__dict__, "placements": placements, "transcripts": list(transcripts)})


@pytest.fixture(scope="module")
def single():
    return tasks.simulate_features(DatasetConfig(mode="random", n_scenes=6, count_sources=1, seed=4, prefix="s"))


@pytest.fixture(scope="module")
def pairs():
    return tasks.simulate_features(DatasetConfig(mode="left_right", n_scenes=4, seed=4, prefix="p"))


def test_ssl_gives_two_questions(single):
    manifests, feats = single
    qa = list(tasks.make_qa(manifests[:1], "ssl", feats))
    assert [q.task for q in qa] == ["ssl_azimuth", "ssl_elevation"]
    truth = manifests[0].directions()[0]
    assert qa[0].target == str(round(truth.azimuth)) and qa[1].target == str(round(truth.elevation))
    assert qa[0].prompt == "What is the azimuth angle of the sound?"
    assert all(-180 <= int(q.target) <= 180 for q in qa)


def test_fsr_target_verbatim(single):
    manifests, feats = single
    qa = list(tasks.make_qa(manifests, "fsr", feats))
    assert [q.target for q in qa] == [m.transcripts[0] for m in manifests]
    assert qa[0].prompt == "Please transcribe the speech into a written format."


def test_lse_side_rule(pairs):
    _, feats = pairs
    m = manifest_with([(-90, 0), (90, 0)])
    feats = {m.scene_id: next(iter(feats.values()))}
    qa = {q.task: q for q in tasks.make_qa([m], "lse", feats)}
    assert qa["lse_left"].target == "f g h i j"
    assert qa["lse_left"].meta["distractor"] == "a b c d e"
    assert qa["lse_right"].target == "a b c d e"
    assert qa["lse_left"].prompt == "Please transcribe the speech on your left into a written format."


def test_lse_random_mode_uses_lateral_component():
    assert tasks.lateral_order([Direction(10, 0), Direction(150, 0)]) == (1, 0)
    assert tasks.lateral_order([Direction(-30, 0), Direction(-100, 0)]) == (0, 1)


def test_arity_errors(single, pairs):
    with pytest.raises(tasks.TaskArityError):
        list(tasks.make_qa(pairs[0], "ssl", pairs[1]))
    with pytest.raises(tasks.TaskArityError):
        list(tasks.make_qa(single[0], "lse", single[1]))
    with pytest.raises(ValueError):
        list(tasks.make_qa(single[0], "nope", single[1]))


def test_score_ssl_examples():
    truths = {f"s{i}": Direction(a, 0) for i, a in enumerate((10, -100, 175))}
    perfect = {k: (str(int(d.azimuth)), "0") for k, d in truths.items()}
    errs = tasks.score_ssl(perfect, truths).errors
    assert (errs.delta_a, errs.delta_e, errs.delta_d) == (0, 0, 0)
    shifted = {k: (str(int(d.azimuth) + 5), "0") for k, d in truths.items()}
    errs = tasks.score_ssl(shifted, truths).errors
    assert errs.delta_a == pytest.approx(5) and errs.delta_d == pytest.approx(5) and errs.delta_e == 0


def test_score_ssl_unparseable_penalty():
    truths = {"a": Direction(0, 0), "b": Direction(0, 0)}
    errs = tasks.score_ssl({"a": ("north", "0"), "b": ("0", "0")}, truths).errors
    assert errs.delta_a == 90 and errs.delta_d == 90
    assert errs.unparseable_rate == 0.25


def test_score_ssl_order_invariant():
    rng = np.random.default_rng(0)
    truths = {f"s{i}": Direction(rng.uniform(-180, 180), rng.uniform(-60, 60)) for i in range(30)}
    answers = {k: (str(int(rng.integers(-180, 181))), str(int(rng.integers(-90, 91)))) for k in truths}
    a = tasks.score_ssl(answers, truths).errors
    b = tasks.score_ssl(dict(reversed(list(answers.items()))), truths).errors
    assert a == b


def test_constant_predictor_is_chance():
    rng = np.random.default_rng(1)
    truths = {f"s{i}": Direction(rng.uniform(-180, 180), 0) for i in range(20000)}
    errs = tasks.score_ssl({k: ("0", "0") for k in truths}, truths).errors
    assert errs.delta_a == pytest.approx(90, abs=1.5)


def _qa(targets, distractors):
    return [
        tasks.QaExample(f"s{i}", "lse_left", "", t, None, {"distractor": d, "mode": "left_right",
                                                        "activation": "sequential", "overlap_ratio": 0.0})
        for i, (t, d) in enumerate(zip(targets, distractors))
    ]


def test_lse_aggregation_examples():
    targets = ["a b c d", "e f g h", "a a b b", "c c d d"]
    distractors = ["i j k l", "m n o p", "i i j j", "k k l l"]
    qa = _qa(targets, distractors)
    perfect = tasks.aggregate_lse(tasks.judge_lse(qa, targets))
    assert perfect == (1.0, 0.0, 0.0)
    alternating = [targets[0], distractors[1], targets[2], distractors[3]]
    res = tasks.judge_lse(qa, alternating)
    sr, swer, w = tasks.aggregate_lse(res)
    assert sr == 0.5 and swer == 0.0
    assert w == np.mean([r.wer_vs_target for r in res if not r.success]) / 2


def test_lse_aggregate_identity():
    rng = np.random.default_rng(5)
    letters = list("abcdefgh")
    targets = [" ".join(rng.choice(letters, 6)) for _ in range(200)]
    distractors = [" ".join(rng.choice(letters, 7)) for _ in range(200)]
    hyps = [" ".join(rng.choice(letters, int(rng.integers(0, 8)))) for _ in range(200)]
    res = tasks.judge_lse(_qa(targets, distractors), hyps)
    sr, swer, w = tasks.aggregate_lse(res)
    fail = [r.wer_vs_target for r in res if not r.success]
    assert 0 < sr < 1
    assert abs(w - (sr * swer + (1 - sr) * sum(fail) / len(fail))) < 1e-12


def test_lse_buckets_group_by_ratio():
    qa = _qa(["a b", "c d", "e f"], ["x y", "x y", "x y"])
    qa[2].meta["overlap_ratio"] = 0.5
    buckets = tasks.bucket_lse(qa, tasks.judge_lse(qa, ["a b", "x y", "e f"]))
    assert [(b.overlap_ratio, b.n, b.sr) for b in buckets] == [(0.0, 2, 0.5), (0.5, 1, 1.0)]
    assert math.isnan(tasks.aggregate_lse(tasks.judge_lse(qa[1:2], ["x y"]))[1])


def test_corpus_wer():
    assert tasks.corpus_wer(["a b", "c d"], ["a b", "c"]) == 0.25
    with pytest.raises(ValueError):
        tasks.corpus_wer([], [])


def test_text_example_layout():
    rng = np.random.default_rng(0)
    tok = nm.init_state(SMALL).tokenizer
    for _ in range(20):
        ex = tasks.text_example(rng, tok)
        assert ex.answer and ex.prompt[-1] == 2  # SEP
        assert len(ex.prompt) + len(ex.answer) < 128


def test_training_is_deterministic_and_partitioned(single):
    manifests, feats = single
    qa = list(tasks.make_qa(manifests, "ssl", feats))
    base = nm.init_state(SMALL)
    cfg = tasks.TrainConfig(task="ssl", fusion="after", steps=6, batch=4, eval_every=3)
    r1 = tasks.train(cfg, base, qa[:8], qa[8:])
    r2 = tasks.train(cfg, base, qa[:8], qa[8:])
    assert r1.losses == r2.losses and r1.val_log == r2.val_log
    for k in base.params:
        if k.startswith(("enc.", "dec.")):
            assert np.array_equal(r1.state.params[k], base.params[k])
    assert any(not np.array_equal(r1.state.params[k], nm.init_state(SMALL.with_fusion("after")).params[k])
               for k in r1.state.group("aln."))


def test_first_step_loss_uniform_head(single):
    manifests, feats = single
    qa = list(tasks.make_qa(manifests, "ssl", feats))
    base = nm.init_state(SMALL)
    base.params["dec.out"] = np.zeros_like(base.params["dec.out"])
    r = tasks.train(tasks.TrainConfig(task="ssl", steps=1, batch=4), base, qa)
    assert r.losses[0] == pytest.approx(math.log(base.tokenizer.vocab_size), abs=1e-9)


def test_stage0_lowers_loss():
    st = nm.init_state(SMALL)
    losses = tasks.pretrain_decoder(st, steps=30, batch=8, lr=3e-3, log_every=0)
    assert np.mean(losses[-5:]) < losses[0]
    assert st.trainable == {k for k in st.params if k.startswith(("aln.", "proj.", "lora."))}


def test_load_features_matches_simulation(tmp_path):
    from spatial_llm.scene import build_dataset, read_manifest

    cfg = DatasetConfig(mode="random", n_scenes=2, count_sources=1, seed=8)
    build_dataset(cfg, tmp_path)
    ms = read_manifest(tmp_path / "manifest.jsonl")
    disk = tasks.load_features(tmp_path, ms)
    _, mem = tasks.simulate_features(cfg)
    for k in mem:
        assert np.allclose(disk[k].iv, mem[k].iv, atol=1e-4)
        # float32 storage perturbs only the quietest bins
        assert np.allclose(disk[k].mel, mem[k].mel, atol=0.05)
