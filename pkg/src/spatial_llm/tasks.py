"""QA construction for SSL / FSR / LSE, decoder pretraining, task training and evaluation."""

from __future__ import annotations

import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .foa import FoaClip, clip_features, load_foa_wav
from .localisation import Direction, SslErrors, aggregate_ssl, azimuth_error, angular_distance
from .metrics import lse_judge, parse_angle, wer
from .neural import model as nm
from .neural.model import Example, ModelConfig, ModelState
from .neural.optim import AdamState, adam_step, clip_grad_norm
from .neural.tokenizer import Tokenizer
from .scene import DatasetConfig, SceneManifest, iter_scenes

log = logging.getLogger(__name__)

TASKS = ("ssl_azimuth", "ssl_elevation", "fsr", "lse_left", "lse_right")
PROMPT_AZIMUTH = "What is the azimuth angle of the sound?"
PROMPT_ELEVATION = "What is the elevation angle of the sound?"
PROMPT_FSR = "Please transcribe the speech into a written format."
PROMPT_LSE = "Please transcribe the speech on your {side} into a written format."
UNPARSEABLE_PENALTY = 180.0


class TaskArityError(ValueError):
    """Manifest has the wrong number of sources for the requested task."""


# ------------------------------------------------------------------ features


@dataclass
class SceneFeatures:
    scene_id: str
    mel: np.ndarray
    iv: np.ndarray
    valid: np.ndarray


def featurize(scene_id: str, clip: FoaClip) -> SceneFeatures:
    mel, iv = clip_features(clip)
    return SceneFeatures(scene_id, mel.features.astype(np.float32), iv.vectors.astype(np.float32), iv.valid)


def simulate_features(cfg: DatasetConfig) -> tuple[list[SceneManifest], dict[str, SceneFeatures]]:
    """Simulate scenes in memory and keep only manifests and features."""
    manifests, feats = [], {}
    for scene in iter_scenes(cfg):
        manifests.append(scene.manifest)
        feats[scene.manifest.scene_id] = featurize(scene.manifest.scene_id, scene.mixture)
    return manifests, feats


def load_features(dataset_dir: str | os.PathLike, manifests: Sequence[SceneManifest]) -> dict[str, SceneFeatures]:
    """Featurise the stored mixtures of a dataset written by ``build_dataset``."""
    root = Path(dataset_dir)
    feats = {}
    for m in manifests:
        path = root / (m.audio_path or f"audio/{m.scene_id}.wav")
        feats[m.scene_id] = featurize(m.scene_id, load_foa_wav(path))
    return feats


# ------------------------------------------------------------------ QA examples


@dataclass
class QaExample:
    scene_id: str
    task: str
    prompt: str
    target: str
    features: SceneFeatures
    meta: dict = field(default_factory=dict)


def lateral_order(directions: Sequence[Direction]) -> tuple[int, int]:
    """Indices of the (left, right) source: left has the larger lateral (+y) component."""
    y = [d.unit_vector()[1] for d in directions]
    return (0, 1) if y[0] > y[1] else (1, 0)


def make_qa(
    manifests: Iterable[SceneManifest], task: str, features: Mapping[str, SceneFeatures]
) -> Iterator[QaExample]:
    """Yield QA examples; ``task`` is ``ssl``, ``fsr`` or ``lse``.

    SSL gives an azimuth and an elevation question per scene; LSE gives one
    question per side.
    """
    for m in manifests:
        n_src = len(m.placements)
        if task in ("ssl", "fsr") and n_src != 1:
            raise TaskArityError(f"{task} needs single-source scenes, {m.scene_id} has {n_src}")
        if task == "lse" and n_src != 2:
            raise TaskArityError(f"lse needs two-source scenes, {m.scene_id} has {n_src}")
        feats = features[m.scene_id]
        dirs = m.directions()
        if task == "ssl":
            d = dirs[0]
            meta = {"truth": d}
            yield QaExample(m.scene_id, "ssl_azimuth", PROMPT_AZIMUTH, str(int(round(d.azimuth))), feats, meta)
            yield QaExample(m.scene_id, "ssl_elevation", PROMPT_ELEVATION, str(int(round(d.elevation))), feats, meta)
        elif task == "fsr":
            yield QaExample(m.scene_id, "fsr", PROMPT_FSR, m.transcripts[0], feats, {})
        elif task == "lse":
            left, right = lateral_order(dirs)
            for side, tgt, dis in (("left", left, right), ("right", right, left)):
                meta = {
                    "distractor": m.transcripts[dis],
                    "mode": m.mode,
                    "activation": m.activation,
                    "overlap_ratio": m.overlap_ratio,
                }
                yield QaExample(
                    m.scene_id, f"lse_{side}", PROMPT_LSE.format(side=side), m.transcripts[tgt], feats, meta
                )
        else:
            raise ValueError(f"unknown task {task!r}")


class EncoderCache:
    """Memoises the frozen encoder output per scene."""

    def __init__(self, state: ModelState) -> None:
        self.state = state
        self._z: dict[str, np.ndarray] = {}

    def __call__(self, feats: SceneFeatures) -> np.ndarray:
        z = self._z.get(feats.scene_id)
        if z is None:
            z = self._z[feats.scene_id] = nm.surrogate_encode(feats.mel.astype(np.float64), self.state)
        return z


def to_examples(
    qa: Sequence[QaExample], tok: Tokenizer, enc: EncoderCache, with_answer: bool = True
) -> list[Example]:
    return [
        Example(
            enc(q.features),
            q.features.iv.astype(np.float64),
            tok.prompt_ids(q.prompt),
            tok.encode(q.target) if with_answer else [],
        )
        for q in qa
    ]


# ------------------------------------------------------------------ stage-0 text pretraining


def _random_transcript(rng: np.random.Generator, lexicon: int = 16, lo: int = 5, hi: int = 12) -> str:
    return " ".join(chr(ord("a") + int(k)) for k in rng.integers(0, lexicon, size=int(rng.integers(lo, hi + 1))))


def text_example(rng: np.random.Generator, tok: Tokenizer) -> Example:
    """One synthetic pretraining item: content text in the prefix slot, a task
    prompt, and the part of the content the prompt asks for.

    Angle items carry both angles and the prompt picks one. Side items carry
    two transcripts in random order, the left one in lower case and the right
    one in upper case; the answer is always lower case.
    """
    kind = int(rng.integers(4))
    if kind < 2:
        az, el = int(rng.integers(-180, 181)), int(rng.integers(-90, 91))
        prefix = f"{az} {el}"
        prompt, answer = ((PROMPT_AZIMUTH, str(az)), (PROMPT_ELEVATION, str(el)))[kind]
    elif kind == 2:
        answer, prompt = _random_transcript(rng), PROMPT_FSR
        prefix = answer.upper() if rng.random() < 0.5 else answer
    else:
        left, right = _random_transcript(rng), _random_transcript(rng)
        parts = [left, right.upper()]
        if rng.random() < 0.5:
            parts.reverse()
        prefix = " ".join(parts)
        side = ("left", "right")[int(rng.integers(2))]
        prompt, answer = PROMPT_LSE.format(side=side), left if side == "left" else right
    return Example(np.zeros((0, 0)), np.zeros((0, 3)), tok.prompt_ids(prompt, tok.encode(prefix)), tok.encode(answer))


def pretrain_decoder(
    state: ModelState, steps: int = 8000, batch: int = 32, lr: float = 3e-3, seed: int = 0, log_every: int = 200
) -> list[float]:
    """Stage 0: train the base decoder on synthetic text, in place."""
    rng = np.random.default_rng(seed)
    state.set_stage0()
    opt = AdamState(lr=lr)
    losses = []
    for step in range(steps):
        exs = [text_example(rng, state.tokenizer) for _ in range(batch)]
        loss, _, tape = nm.forward(state, exs, with_audio=False)
        grads = nm.backward(tape, state)
        clip_grad_norm(grads, 1.0)
        cur = lr * min(1.0, (step + 1) / 100) * 0.5 * (1 + math.cos(math.pi * step / steps))
        adam_step(state.params, grads, opt, cur)
        losses.append(loss)
        if log_every and step % log_every == 0:
            log.info("stage0 step %d loss %.4f", step, loss)
    state.set_task()
    return losses


# ------------------------------------------------------------------ task training


@dataclass
class TrainConfig:
    task: str = "ssl"
    fusion: str = "before"
    special_tokens: bool = False
    steps: int = 3000
    batch: int = 16
    lr: float = 3e-3
    seed: int = 0
    eval_every: int = 250
    clip: float = 1.0
    warmup: int = 100
    lora_b_lr_mult: float = 4.0


@dataclass
class TrainResult:
    state: ModelState
    losses: list[float]
    val_log: list[tuple[int, float]]
    best_step: int


def task_state(base: ModelState, fusion: str, special_tokens: bool, seed: int = 0) -> ModelState:
    """Fresh aligner/projection/LoRA around the pretrained decoder of ``base``."""
    state = nm.init_state(base.config.with_fusion(fusion), aligner_seed=seed)
    for k in state.params:
        if k.startswith(("dec.", "enc.")):
            state.params[k] = base.params[k].copy()
    state = nm.expand_vocab(state, special_tokens, seed=seed + 1)
    state.set_task()
    return state


def _lr_at(cfg: TrainConfig, step: int) -> float:
    warm = min(1.0, (step + 1) / max(1, cfg.warmup))
    return cfg.lr * warm * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))


def mean_loss(state: ModelState, examples: Sequence[Example], batch: int = 64) -> float:
    total, count = 0.0, 0
    for i in range(0, len(examples), batch):
        chunk = examples[i : i + batch]
        loss, _, tape = nm.forward(state, chunk)
        total += loss * tape.n_targets
        count += tape.n_targets
    return total / max(count, 1)


def train(
    cfg: TrainConfig,
    base: ModelState,
    train_qa: Sequence[QaExample],
    val_qa: Sequence[QaExample] = (),
    enc: EncoderCache | None = None,
) -> TrainResult:
    """Train the task-trainable partition; keep the best state on validation loss."""
    state = task_state(base, cfg.fusion, cfg.special_tokens, cfg.seed)
    enc = enc or EncoderCache(state)
    tok = state.tokenizer
    train_ex = to_examples(train_qa, tok, enc)
    val_ex = to_examples(val_qa, tok, enc)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(lr=cfg.lr)
    order = rng.permutation(len(train_ex))
    pos = 0
    losses: list[float] = []
    val_log: list[tuple[int, float]] = []
    best = (math.inf, 0, None)
    # the zero-initialised adapter half learns faster with a larger step
    lr_scale = {k: cfg.lora_b_lr_mult for k in state.trainable if k.startswith("lora.") and k.endswith(".B")}
    for step in range(cfg.steps):
        if pos + cfg.batch > len(order):
            order, pos = rng.permutation(len(train_ex)), 0
        batch = [train_ex[i] for i in order[pos : pos + cfg.batch]]
        pos += cfg.batch
        loss, _, tape = nm.forward(state, batch)
        grads = nm.backward(tape, state)
        clip_grad_norm(grads, cfg.clip)
        adam_step(state.params, grads, opt, _lr_at(cfg, step), lr_scale)
        losses.append(loss)
        last = step == cfg.steps - 1
        if val_ex and (cfg.eval_every and (step + 1) % cfg.eval_every == 0 or last):
            vl = mean_loss(state, val_ex)
            val_log.append((step + 1, vl))
            log.info("%s/%s step %d train %.4f val %.4f", cfg.task, cfg.fusion, step + 1, loss, vl)
            if vl < best[0]:
                best = (vl, step + 1, state.copy())
    if best[2] is None:
        return TrainResult(state, losses, val_log, cfg.steps)
    return TrainResult(best[2], losses, val_log, best[1])


# ------------------------------------------------------------------ evaluation


def predict(
    state: ModelState, qa: Sequence[QaExample], enc: EncoderCache | None = None, max_len: int = 40, batch: int = 64
) -> list[str]:
    enc = enc or EncoderCache(state)
    out: list[str] = []
    for i in range(0, len(qa), batch):
        exs = to_examples(qa[i : i + batch], state.tokenizer, enc, with_answer=False)
        for ids in nm.generate(state, exs, max_len=max_len):
            out.append(state.tokenizer.decode(ids))
    return out


@dataclass
class SslReport:
    errors: SslErrors
    records: list[dict]


def score_ssl(answers: Mapping[str, tuple[str, str]], truths: Mapping[str, Direction]) -> SslReport:
    """Pair the azimuth and elevation answers of each scene into one Direction.

    An unparseable component scores the full 180 degree penalty on its own
    error and on the angular distance; the unparseable rate is reported.
    """
    records = []
    unparseable = 0
    sums = np.zeros(3)
    for sid in sorted(answers):
        az_txt, el_txt = answers[sid]
        truth = truths[sid]
        az, el = parse_angle(az_txt), parse_angle(el_txt)
        if el is not None and not -90 <= el <= 90:
            el = None
        bad = (az is None) + (el is None)
        unparseable += bad
        da = UNPARSEABLE_PENALTY if az is None else azimuth_error(az, truth.azimuth)
        de = UNPARSEABLE_PENALTY if el is None else abs(el - truth.elevation)
        if bad:
            dd = UNPARSEABLE_PENALTY
            pred = None
        else:
            pred = Direction(az, el)
            dd = angular_distance(pred, truth)
        sums += (da, de, dd)
        records.append({"scene_id": sid, "azimuth": az, "elevation": el, "truth": truth, "da": da, "de": de, "dd": dd})
    n = len(records)
    if n == 0:
        raise ValueError("no SSL answers to score")
    errs = SslErrors(*(sums / n), n=n, unparseable_rate=unparseable / (2 * n))
    return SslReport(errs, records)


def eval_ssl(state: ModelState, qa: Sequence[QaExample], enc: EncoderCache | None = None) -> SslReport:
    hyps = predict(state, qa, enc, max_len=8)
    answers: dict[str, list[str]] = defaultdict(lambda: ["", ""])
    truths: dict[str, Direction] = {}
    for q, h in zip(qa, hyps):
        answers[q.scene_id][0 if q.task == "ssl_azimuth" else 1] = h
        truths[q.scene_id] = q.meta["truth"]
    return score_ssl({k: tuple(v) for k, v in answers.items()}, truths)


def corpus_wer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Mean per-utterance WER."""
    if not refs:
        raise ValueError("no utterances")
    return sum(wer(r, h) for r, h in zip(refs, hyps)) / len(refs)


@dataclass
class LseResult:
    success: bool
    wer_vs_target: float
    hypothesis: str


@dataclass
class LseBucket:
    mode: str
    activation: str
    overlap_ratio: float
    n: int
    sr: float
    swer: float
    wer: float


def judge_lse(qa: Sequence[QaExample], hyps: Sequence[str]) -> list[LseResult]:
    return [
        LseResult(lse_judge(h, q.target, q.meta["distractor"]), wer(q.target, h), h) for q, h in zip(qa, hyps)
    ]


def aggregate_lse(results: Sequence[LseResult]) -> tuple[float, float, float]:
    """(SR, sWER, WER); sWER averages successes only and is NaN when there are none."""
    n = len(results)
    if n == 0:
        raise ValueError("no LSE results")
    ok = [r.wer_vs_target for r in results if r.success]
    sr = len(ok) / n
    swer = sum(ok) / len(ok) if ok else float("nan")
    return sr, swer, sum(r.wer_vs_target for r in results) / n


def bucket_lse(qa: Sequence[QaExample], results: Sequence[LseResult]) -> list[LseBucket]:
    groups: dict[tuple, list[LseResult]] = defaultdict(list)
    for q, r in zip(qa, results):
        groups[(q.meta["mode"], q.meta["activation"], float(q.meta["overlap_ratio"]))].append(r)
    out = []
    for key in sorted(groups):
        sr, swer, w = aggregate_lse(groups[key])
        out.append(LseBucket(key[0], key[1], key[2], len(groups[key]), sr, swer, w))
    return out


def eval_lse(state: ModelState, qa: Sequence[QaExample], enc: EncoderCache | None = None) -> list[LseBucket]:
    hyps = predict(state, qa, enc, max_len=32)
    return bucket_lse(qa, judge_lse(qa, hyps))


def eval_fsr(state: ModelState, qa: Sequence[QaExample], enc: EncoderCache | None = None) -> float:
    hyps = predict(state, qa, enc, max_len=32)
    return corpus_wer([q.target for q in qa], hyps)
