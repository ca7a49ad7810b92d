"""Toy spatial-audio LLM: frozen surrogate encoder, window-level Q-Former,
intensity-vector fusion, projection and a small causal decoder with LoRA.

Shapes at the default configuration::

    mel (T, 80) -> Z (T, 64) -> Z' (T, 64 | 67) -> H (Tw, 64)
        -> H' (Tw, 128) -> decoder over [H' ; prompt ; answer]

with ``Tw = ceil(T / window_frames) * queries_per_window``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..foa import IntensityFrames, MelFrames
from . import ops
from .tokenizer import EOS, N_ANGLE_TOKENS, Tokenizer

FUSIONS = ("none", "before", "after")
MEL_OFFSET = -8.0
MEL_SCALE = 8.0
IV_DIM = 3
ENC_KERNEL = 5


class SequenceTooLongError(ValueError):
    pass


class FrameMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class AlignerConfig:
    fusion: str = "none"
    window_frames: int = 17
    queries_per_window: int = 1
    layers: int = 2
    heads: int = 4
    ffn: int = 128
    d_enc: int = 64
    d_q: int = 64
    d_llm: int = 128

    def __post_init__(self) -> None:
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.window_frames < 1 or self.queries_per_window < 1:
            raise ValueError("window_frames and queries_per_window must be >= 1")

    @property
    def d_in(self) -> int:
        return self.d_enc + (IV_DIM if self.fusion == "before" else 0)

    @property
    def d_proj_in(self) -> int:
        return self.d_q + (IV_DIM if self.fusion == "after" else 0)


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 128
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    max_len: int = 512
    lora_rank: int = 8
    lora_alpha: float = 4.0


@dataclass(frozen=True)
class ModelConfig:
    aligner: AlignerConfig = AlignerConfig()
    decoder: DecoderConfig = DecoderConfig()
    n_mels: int = 80
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "aligner": self.aligner.__dict__.copy(),
            "decoder": self.decoder.__dict__.copy(),
            "n_mels": self.n_mels,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(AlignerConfig(**d["aligner"]), DecoderConfig(**d["decoder"]), d["n_mels"], d["seed"])

    def with_fusion(self, fusion: str) -> "ModelConfig":
        return ModelConfig(
            AlignerConfig(**{**self.aligner.__dict__, "fusion": fusion}), self.decoder, self.n_mels, self.seed
        )


@dataclass
class ModelState:
    """All parameter tables plus the explicit frozen/trainable partition."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    trainable: set[str]
    tokenizer: Tokenizer = field(default_factory=Tokenizer)

    @property
    def frozen(self) -> set[str]:
        return set(self.params) - self.trainable

    @property
    def n_base(self) -> int:
        return self.tokenizer.n_base

    @property
    def n_new(self) -> int:
        return N_ANGLE_TOKENS if self.tokenizer.expanded else 0

    @property
    def lora_scale(self) -> float:
        d = self.config.decoder
        return d.lora_alpha / d.lora_rank

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            set(self.trainable),
            copy.deepcopy(self.tokenizer),
        )

    def group(self, prefix: str) -> list[str]:
        return sorted(k for k in self.params if k.startswith(prefix))

    def set_stage0(self) -> None:
        """Text pretraining: only the base decoder learns."""
        self.trainable = {
            k for k in self.params if k.startswith("dec.") and k not in ("dec.tok_new", "dec.out_new")
        }

    def set_task(self) -> None:
        """Task training: aligner, projection, LoRA and new vocabulary rows learn."""
        self.trainable = {
            k
            for k in self.params
            if k.startswith(("aln.", "proj.", "lora.")) or k in ("dec.tok_new", "dec.out_new")
        }


# ------------------------------------------------------------------ initialisation


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def init_state(config: ModelConfig = ModelConfig(), aligner_seed: int = 0) -> ModelState:
    """Seeded parameters. The encoder and decoder depend only on
    ``config.seed``; the aligner and projection also on ``aligner_seed``."""
    a, d = config.aligner, config.decoder
    rng = np.random.default_rng([config.seed, 0])
    p: dict[str, np.ndarray] = {}
    # frozen surrogate encoder
    p["enc.W1"] = _normal(rng, (config.n_mels, a.d_enc), 1.0 / math.sqrt(config.n_mels))
    p["enc.b1"] = _normal(rng, (a.d_enc,), 0.1)
    p["enc.W2"] = _normal(rng, (a.d_enc, a.d_enc), 1.5 / math.sqrt(a.d_enc))
    p["enc.b2"] = _normal(rng, (a.d_enc,), 0.1)
    p["enc.conv"] = _normal(rng, (ENC_KERNEL, a.d_enc, a.d_enc), 1.5 / math.sqrt(ENC_KERNEL * a.d_enc))
    p["enc.convb"] = np.zeros(a.d_enc)
    # aligner
    rng = np.random.default_rng([config.seed, 1, aligner_seed])
    p["aln.in.W"] = _normal(rng, (a.d_in, a.d_q), 1.0 / math.sqrt(a.d_in))
    p["aln.in.b"] = np.zeros(a.d_q)
    p["aln.pos"] = _normal(rng, (a.window_frames, a.d_q), 0.02)
    p["aln.in_ln.g"] = np.ones(a.d_q)
    p["aln.in_ln.b"] = np.zeros(a.d_q)
    p["aln.query"] = _normal(rng, (a.queries_per_window, a.d_q), 1.0)
    for l in range(a.layers):
        pre = f"aln.l{l}."
        for n in "qkvo":
            p[f"{pre}attn.{n}.W"] = _normal(rng, (a.d_q, a.d_q), 1.0 / math.sqrt(a.d_q))
            p[f"{pre}attn.{n}.b"] = np.zeros(a.d_q)
        p[f"{pre}ffn1.W"] = _normal(rng, (a.d_q, a.ffn), 1.0 / math.sqrt(a.d_q))
        p[f"{pre}ffn1.b"] = np.zeros(a.ffn)
        p[f"{pre}ffn2.W"] = _normal(rng, (a.ffn, a.d_q), 1.0 / math.sqrt(a.ffn))
        p[f"{pre}ffn2.b"] = np.zeros(a.d_q)
        for n in ("ln1", "ln2"):
            p[f"{pre}{n}.g"] = np.ones(a.d_q)
            p[f"{pre}{n}.b"] = np.zeros(a.d_q)
    # projection into the decoder embedding space
    p["proj.W"] = _normal(rng, (a.d_proj_in, a.d_llm), 0.02)
    p["proj.b"] = np.zeros(a.d_llm)
    # decoder
    rng = np.random.default_rng([config.seed, 2])
    tok = Tokenizer()
    p["dec.tok"] = _normal(rng, (tok.n_base, d.d_model), 0.02)
    p["dec.pos"] = _normal(rng, (d.max_len, d.d_model), 0.02)
    resid_std = 0.02 / math.sqrt(2 * d.layers)
    for l in range(d.layers):
        pre = f"dec.l{l}."
        for n in "qkv":
            p[f"{pre}attn.{n}.W"] = _normal(rng, (d.d_model, d.d_model), 0.02)
            p[f"{pre}attn.{n}.b"] = np.zeros(d.d_model)
        p[f"{pre}attn.o.W"] = _normal(rng, (d.d_model, d.d_model), resid_std)
        p[f"{pre}attn.o.b"] = np.zeros(d.d_model)
        p[f"{pre}ffn1.W"] = _normal(rng, (d.d_model, d.ffn), 0.02)
        p[f"{pre}ffn1.b"] = np.zeros(d.ffn)
        p[f"{pre}ffn2.W"] = _normal(rng, (d.ffn, d.d_model), resid_std)
        p[f"{pre}ffn2.b"] = np.zeros(d.d_model)
        for n in ("ln1", "ln2"):
            p[f"{pre}{n}.g"] = np.ones(d.d_model)
            p[f"{pre}{n}.b"] = np.zeros(d.d_model)
        for n in "qv":
            p[f"lora.l{l}.{n}.A"] = _normal(rng, (d.lora_rank, d.d_model), 0.02)
            p[f"lora.l{l}.{n}.B"] = np.zeros((d.d_model, d.lora_rank))
    p["dec.lnf.g"] = np.ones(d.d_model)
    p["dec.lnf.b"] = np.zeros(d.d_model)
    p["dec.out"] = _normal(rng, (d.d_model, tok.n_base), 0.02)
    state = ModelState(config, p, set(), tok)
    state.set_task()
    return state


def expand_vocab(state: ModelState, enable: bool = True, seed: int | None = None) -> ModelState:
    """Add the 361 angle tokens: new embedding rows (trainable, N(0, 0.02)) and
    a zero-initialised output block next to the frozen head."""
    if not enable:
        return state
    if state.tokenizer.expanded:
        raise ValueError("vocabulary already expanded")
    rng = np.random.default_rng(state.config.seed + 1 if seed is None else seed)
    d = state.config.decoder.d_model
    out = state.copy()
    out.params["dec.tok_new"] = _normal(rng, (N_ANGLE_TOKENS, d), 0.02)
    out.params["dec.out_new"] = np.zeros((d, N_ANGLE_TOKENS))
    out.tokenizer = Tokenizer(expanded=True)
    out.trainable |= {"dec.tok_new", "dec.out_new"}
    return out


# ------------------------------------------------------------------ encoder


def surrogate_encode(mel: MelFrames | np.ndarray, state: ModelState) -> np.ndarray:
    """Frozen Z = Enc(X): two per-frame affine+tanh stages, then a causal
    kernel-5 temporal convolution + tanh. Output (T, d_enc) at the mel frame rate."""
    feats = mel.features if isinstance(mel, MelFrames) else np.asarray(mel)
    p = state.params
    x = (feats - MEL_OFFSET) / MEL_SCALE
    h = np.tanh(x @ p["enc.W1"] + p["enc.b1"])
    h = np.tanh(h @ p["enc.W2"] + p["enc.b2"])
    acc = np.broadcast_to(p["enc.convb"], h.shape).copy()
    for k in range(ENC_KERNEL):
        if k == 0:
            acc += h @ p["enc.conv"][0]
        elif k < len(h):
            acc[k:] += h[:-k] @ p["enc.conv"][k]
    return np.tanh(acc)


# ------------------------------------------------------------------ fusion helpers


def _iv_array(iv) -> np.ndarray:
    return iv.vectors if isinstance(iv, IntensityFrames) else np.asarray(iv, dtype=float)


def fuse_before(z: np.ndarray, iv, fusion: str = "before") -> np.ndarray:
    """Frame-wise Concat(Z, I) for the "before" option; Z unchanged otherwise.

    Frame counts may differ by up to two (both are trimmed to the shorter).
    """
    if fusion != "before":
        return np.asarray(z)
    i = _iv_array(iv)
    if abs(len(z) - len(i)) > 2:
        raise FrameMismatchError(f"encoder has {len(z)} frames, intensity vectors {len(i)}")
    t = min(len(z), len(i))
    return np.concatenate([z[:t], i[:t]], axis=1)


def _interp_rows(i: np.ndarray, length: int) -> np.ndarray:
    if len(i) == length:
        return i.copy()
    if len(i) == 1:
        return np.repeat(i, length, axis=0)
    src = np.linspace(0.0, 1.0, len(i))
    dst = np.linspace(0.0, 1.0, length)
    return np.stack([np.interp(dst, src, i[:, c]) for c in range(i.shape[1])], axis=1)


def interpolate_iv(iv, length: int) -> np.ndarray:
    """Linear resampling of the intensity-vector rows onto ``length`` points (no re-normalisation)."""
    i = _iv_array(iv)
    if len(i) == 0:
        raise ValueError("no intensity frames to interpolate")
    if isinstance(iv, IntensityFrames) and not np.asarray(iv.valid).any():
        raise ValueError("no valid intensity frames to interpolate")
    if length < 1:
        raise ValueError("target length must be >= 1")
    return _interp_rows(i, length)


# ------------------------------------------------------------------ batch plumbing


@dataclass
class Example:
    """One model input: encoder output, intensity vectors, prompt and answer ids.

    ``prompt`` already contains BOS ... SEP; ``answer`` excludes EOS.
    """

    z: np.ndarray
    iv: np.ndarray
    prompt: list[int]
    answer: list[int] = field(default_factory=list)


@dataclass
class Tape:
    caches: dict
    loss: float
    n_targets: int


def _param_view(p: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def _window_stack(zps: Sequence[np.ndarray], w: int, pad_value: float = 0.0):
    counts = [math.ceil(len(z) / w) for z in zps]
    d_in = zps[0].shape[1]
    X = np.full((sum(counts), w, d_in), pad_value, dtype=float)
    mask = np.zeros((sum(counts), w), dtype=bool)
    r = 0
    for z, c in zip(zps, counts):
        t = len(z)
        blk = np.full((c * w, d_in), pad_value, dtype=float)
        blk[:t] = z
        X[r : r + c] = blk.reshape(c, w, d_in)
        m = np.zeros(c * w, dtype=bool)
        m[:t] = True
        mask[r : r + c] = m.reshape(c, w)
        r += c
    return X, mask, counts


def aligner_fwd(state: ModelState, zps: Sequence[np.ndarray], pad_value: float = 0.0):
    """Q-Former over non-overlapping windows of every sequence.

    Returns the per-sequence H blocks and a cache for ``aligner_bwd``.
    """
    a = state.config.aligner
    p = state.params
    if any(len(z) < 1 for z in zps):
        raise ValueError("aligner input needs at least one frame")
    X, mask, counts = _window_stack(zps, a.window_frames, pad_value)
    e_pre = X @ p["aln.in.W"] + p["aln.in.b"] + p["aln.pos"]
    E, ln_in = ops.layernorm_fwd(e_pre, p["aln.in_ln.g"], p["aln.in_ln.b"])
    allowed = mask[:, None, None, :]
    Q = np.broadcast_to(p["aln.query"], (len(X),) + p["aln.query"].shape).copy()
    layer_caches = []
    for l in range(a.layers):
        pre = f"aln.l{l}."
        pv = _param_view(p, pre + "attn.")
        att, c_att = ops.mha_fwd(Q, E, pv, pre + "attn.", a.heads, allowed)
        Q1, c_ln1 = ops.layernorm_fwd(Q + att, p[pre + "ln1.g"], p[pre + "ln1.b"])
        f, c_ffn = ops.ffn_fwd(Q1, _param_view(p, pre))
        Q, c_ln2 = ops.layernorm_fwd(Q1 + f, p[pre + "ln2.g"], p[pre + "ln2.b"])
        layer_caches.append((c_att, c_ln1, c_ffn, c_ln2))
    q = a.queries_per_window
    H, r = [], 0
    for c in counts:
        H.append(Q[r : r + c].reshape(c * q, a.d_q))
        r += c
    return H, (X, ln_in, layer_caches, counts)


def aligner_bwd(state: ModelState, dH: Sequence[np.ndarray], cache, need: set, grads: dict) -> None:
    a = state.config.aligner
    p = state.params
    X, ln_in, layer_caches, counts = cache
    q = a.queries_per_window
    dQ = np.concatenate([g.reshape(c, q, a.d_q) for g, c in zip(dH, counts)], axis=0)
    dE = np.zeros(X.shape[:2] + (a.d_q,))
    for l in reversed(range(a.layers)):
        pre = f"aln.l{l}."
        c_att, c_ln1, c_ffn, c_ln2 = layer_caches[l]
        dsum, dg, db = ops.layernorm_bwd(dQ, c_ln2, pre + "ln2.g" in need)
        if dg is not None:
            grads[pre + "ln2.g"], grads[pre + "ln2.b"] = dg, db
        dQ1 = dsum + ops.ffn_bwd(dsum, c_ffn, _param_view(p, pre), pre, need, grads)
        dsum, dg, db = ops.layernorm_bwd(dQ1, c_ln1, pre + "ln1.g" in need)
        if dg is not None:
            grads[pre + "ln1.g"], grads[pre + "ln1.b"] = dg, db
        dQq, dEl = ops.mha_bwd(dsum, c_att, _param_view(p, pre + "attn."), need, grads)
        dQ = dsum + dQq
        dE += dEl
    if "aln.query" in need:
        grads["aln.query"] = dQ.sum(axis=0)
    de_pre, dg, db = ops.layernorm_bwd(dE, ln_in, "aln.in_ln.g" in need)
    if dg is not None:
        grads["aln.in_ln.g"], grads["aln.in_ln.b"] = dg, db
    if "aln.pos" in need:
        grads["aln.pos"] = de_pre.sum(axis=0)
    if "aln.in.W" in need:
        grads["aln.in.W"] = X.reshape(-1, X.shape[-1]).T @ de_pre.reshape(-1, a.d_q)
    if "aln.in.b" in need:
        grads["aln.in.b"] = de_pre.reshape(-1, a.d_q).sum(axis=0)


def qformer(zp: np.ndarray, state: ModelState, pad_value: float = 0.0) -> np.ndarray:
    """H = Aligner(Z') for a single sequence, shape (ceil(T / w) * q, d_q)."""
    H, _ = aligner_fwd(state, [np.asarray(zp, dtype=float)], pad_value)
    return H[0]


def fuse_after(H: np.ndarray, ip: np.ndarray | None, state: ModelState) -> np.ndarray:
    """H' = Linear(Concat(H, I')) for the "after" option, Linear(H) otherwise."""
    p = state.params
    if state.config.aligner.fusion == "after":
        if ip is None or len(ip) != len(H):
            raise FrameMismatchError("interpolated intensity vectors must match H in length")
        H = np.concatenate([H, ip], axis=1)
    return H @ p["proj.W"] + p["proj.b"]


def soft_tokens_fwd(state: ModelState, examples: Sequence[Example], pad_value: float = 0.0):
    fusion = state.config.aligner.fusion
    zps = [fuse_before(ex.z, ex.iv, fusion) for ex in examples]
    H, a_cache = aligner_fwd(state, zps, pad_value)
    ins = []
    for h, ex in zip(H, examples):
        if fusion == "after":
            h = np.concatenate([h, _interp_rows(_iv_array(ex.iv), len(h))], axis=1)
        ins.append(h)
    p = state.params
    soft = [x @ p["proj.W"] + p["proj.b"] for x in ins]
    return soft, (a_cache, ins)


def soft_tokens_bwd(state: ModelState, dsoft: Sequence[np.ndarray], cache, need: set, grads: dict) -> None:
    a_cache, ins = cache
    p = state.params
    if "proj.W" in need:
        grads["proj.W"] = sum(x.T @ g for x, g in zip(ins, dsoft))
    if "proj.b" in need:
        grads["proj.b"] = sum(g.sum(axis=0) for g in dsoft)
    if not any(k.startswith("aln.") for k in need):
        return
    d_q = state.config.aligner.d_q
    dH = [(g @ p["proj.W"].T)[:, :d_q] for g in dsoft]
    aligner_bwd(state, dH, a_cache, need, grads)


# ------------------------------------------------------------------ decoder


def _embed(state: ModelState, ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(ids, dtype=int)
    p = state.params
    out = np.empty((len(ids), state.config.decoder.d_model))
    base = ids < state.n_base
    out[base] = p["dec.tok"][ids[base]]
    if (~base).any():
        out[~base] = p["dec.tok_new"][ids[~base] - state.n_base]
    return out


def _lora_tables(state: ModelState, l: int, use_lora: bool):
    if not use_lora:
        return None, None
    p = state.params
    tables = {n: (p[f"lora.l{l}.{n}.A"], p[f"lora.l{l}.{n}.B"]) for n in "qv"}
    names = {n: (f"lora.l{l}.{n}.A", f"lora.l{l}.{n}.B") for n in "qv"}
    return tables, names


def decoder_fwd(
    state: ModelState,
    soft: Sequence[np.ndarray],
    seqs: Sequence[Sequence[int]],
    rows: Sequence[np.ndarray],
    use_lora: bool = True,
):
    """Run the decoder over [soft ; seq] for each item and return logits at
    the requested positions (``rows[i]`` indexes positions of item ``i``)."""
    d = state.config.decoder
    p = state.params
    lengths = [len(s) + len(q) for s, q in zip(soft, seqs)]
    L = max(lengths)
    if L > d.max_len:
        raise SequenceTooLongError(f"sequence of {L} positions exceeds max_len {d.max_len}")
    B = len(seqs)
    x = np.zeros((B, L, d.d_model))
    for i, (s, q) in enumerate(zip(soft, seqs)):
        ns = len(s)
        if ns:
            x[i, :ns] = s
        if len(q):
            x[i, ns : ns + len(q)] = _embed(state, q)
        x[i, : lengths[i]] += p["dec.pos"][: lengths[i]]
    valid = np.arange(L)[None, :] < np.asarray(lengths)[:, None]
    causal = np.tril(np.ones((L, L), dtype=bool))
    allowed = causal[None, None] & valid[:, None, None, :]
    caches = []
    for l in range(d.layers):
        pre = f"dec.l{l}."
        lora, _ = _lora_tables(state, l, use_lora)
        a_in, c_ln1 = ops.layernorm_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        att, c_att = ops.mha_fwd(
            a_in, a_in, _param_view(p, pre + "attn."), pre + "attn.", d.heads, allowed, lora, state.lora_scale
        )
        x = x + att
        f_in, c_ln2 = ops.layernorm_fwd(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f, c_ffn = ops.ffn_fwd(f_in, _param_view(p, pre))
        x = x + f
        caches.append((c_ln1, c_att, c_ln2, c_ffn))
    h, c_lnf = ops.layernorm_fwd(x, p["dec.lnf.g"], p["dec.lnf.b"])
    bi = np.concatenate([np.full(len(r), i) for i, r in enumerate(rows)]).astype(int)
    pi = np.concatenate([np.asarray(r, dtype=int) for r in rows]).astype(int)
    hg = h[bi, pi]
    logits = hg @ p["dec.out"]
    if state.n_new:
        logits = np.concatenate([logits, hg @ p["dec.out_new"]], axis=1)
    cache = (soft, seqs, lengths, allowed, caches, c_lnf, h.shape, bi, pi, hg, use_lora)
    return logits, cache


def decoder_bwd(state: ModelState, dlogits: np.ndarray, cache, need: set, grads: dict) -> list[np.ndarray]:
    """Back-propagate through the decoder; returns gradients w.r.t. the soft tokens."""
    d = state.config.decoder
    p = state.params
    soft, seqs, lengths, allowed, caches, c_lnf, hshape, bi, pi, hg, use_lora = cache
    n = state.n_base
    if "dec.out" in need:
        grads["dec.out"] = hg.T @ dlogits[:, :n]
    dhg = dlogits[:, :n] @ p["dec.out"].T
    if state.n_new:
        if "dec.out_new" in need:
            grads["dec.out_new"] = hg.T @ dlogits[:, n:]
        dhg = dhg + dlogits[:, n:] @ p["dec.out_new"].T
    dh = np.zeros(hshape)
    np.add.at(dh, (bi, pi), dhg)
    dx, dg, db = ops.layernorm_bwd(dh, c_lnf, "dec.lnf.g" in need)
    if dg is not None:
        grads["dec.lnf.g"], grads["dec.lnf.b"] = dg, db
    for l in reversed(range(d.layers)):
        pre = f"dec.l{l}."
        c_ln1, c_att, c_ln2, c_ffn = caches[l]
        lora, lora_names = _lora_tables(state, l, use_lora)
        df = ops.ffn_bwd(dx, c_ffn, _param_view(p, pre), pre, need, grads)
        dfi, dg, db = ops.layernorm_bwd(df, c_ln2, pre + "ln2.g" in need)
        if dg is not None:
            grads[pre + "ln2.g"], grads[pre + "ln2.b"] = dg, db
        dx = dx + dfi
        da_in, _ = ops.mha_bwd(
            dx, c_att, _param_view(p, pre + "attn."), need, grads, lora, lora_names, state.lora_scale, self_attn=True
        )
        dxi, dg, db = ops.layernorm_bwd(da_in, c_ln1, pre + "ln1.g" in need)
        if dg is not None:
            grads[pre + "ln1.g"], grads[pre + "ln1.b"] = dg, db
        dx = dx + dxi
    if "dec.pos" in need:
        gpos = np.zeros_like(p["dec.pos"])
        for i, L in enumerate(lengths):
            gpos[:L] += dx[i, :L]
        grads["dec.pos"] = gpos
    want_tok = "dec.tok" in need
    want_new = state.n_new and "dec.tok_new" in need
    if want_tok:
        grads["dec.tok"] = np.zeros_like(p["dec.tok"])
    if want_new:
        grads["dec.tok_new"] = np.zeros_like(p["dec.tok_new"])
    dsoft = []
    for i, (s, q) in enumerate(zip(soft, seqs)):
        ns = len(s)
        dsoft.append(dx[i, :ns].copy())
        if not len(q) or not (want_tok or want_new):
            continue
        ids = np.asarray(q, dtype=int)
        g = dx[i, ns : ns + len(q)]
        base = ids < n
        if want_tok:
            np.add.at(grads["dec.tok"], ids[base], g[base])
        if want_new and (~base).any():
            np.add.at(grads["dec.tok_new"], ids[~base] - n, g[~base])
    return dsoft


# ------------------------------------------------------------------ full model


def _targets(ex: Example, n_soft: int) -> tuple[list[int], np.ndarray, np.ndarray]:
    seq = list(ex.prompt) + list(ex.answer)
    start = n_soft + len(ex.prompt) - 1
    rows = np.arange(start, start + len(ex.answer) + 1) if ex.prompt else np.arange(0)
    targets = np.asarray(list(ex.answer) + [EOS], dtype=int)[: len(rows)]
    return seq, rows, targets


def forward(
    state: ModelState,
    examples: Sequence[Example],
    use_lora: bool = True,
    answer_weight: Sequence[bool] | None = None,
    with_audio: bool = True,
    pad_value: float = 0.0,
) -> tuple[float, np.ndarray, Tape]:
    """Teacher-forced forward pass; loss is the mean cross-entropy over answer
    positions (answer tokens plus EOS). Items with ``answer_weight`` False
    contribute no loss terms."""
    if with_audio:
        soft, s_cache = soft_tokens_fwd(state, examples, pad_value)
    else:
        soft, s_cache = [np.zeros((0, state.config.decoder.d_model)) for _ in examples], None
    seqs, rows, targets = [], [], []
    for i, (ex, s) in enumerate(zip(examples, soft)):
        seq, r, t = _targets(ex, len(s))
        if answer_weight is not None and not answer_weight[i]:
            r, t = r[:0], t[:0]
        seqs.append(seq)
        rows.append(r)
        targets.append(t)
    logits, d_cache = decoder_fwd(state, soft, seqs, rows, use_lora)
    tgt = np.concatenate(targets).astype(int)
    loss, dlogits = ops.cross_entropy(logits, tgt)
    tape = Tape({"soft": s_cache, "dec": d_cache, "dlogits": dlogits}, loss, len(tgt))
    return loss, logits, tape


def backward(tape: Tape, state: ModelState) -> dict[str, np.ndarray]:
    """Exact gradients of the tape's loss for every trainable parameter (and nothing else)."""
    need = state.trainable
    grads: dict[str, np.ndarray] = {}
    dsoft = decoder_bwd(state, tape.caches["dlogits"], tape.caches["dec"], need, grads)
    if tape.caches["soft"] is not None:
        soft_tokens_bwd(state, dsoft, tape.caches["soft"], need, grads)
    for k in need:
        if k not in grads:
            grads[k] = np.zeros_like(state.params[k])
    return grads


def decoder_forward(
    prompt: Sequence[int], hp: np.ndarray, answer: Sequence[int], state: ModelState, use_lora: bool = True
) -> tuple[np.ndarray, float]:
    """Logits at the answer positions and the answer cross-entropy for a
    precomputed H' (used where the soft tokens are given directly)."""
    ex = Example(np.zeros((0, 0)), np.zeros((0, 3)), list(prompt), list(answer))
    seq, rows, targets = _targets(ex, len(hp))
    logits, _ = decoder_fwd(state, [np.asarray(hp, dtype=float)], [seq], [rows], use_lora)
    loss, _ = ops.cross_entropy(logits, targets)
    return logits, loss


def generate(
    state: ModelState,
    examples: Sequence[Example],
    max_len: int = 32,
    with_audio: bool = True,
    soft: Sequence[np.ndarray] | None = None,
) -> list[list[int]]:
    """Greedy arg-max decoding for each example until EOS or ``max_len`` tokens."""
    if soft is None:
        if with_audio:
            soft, _ = soft_tokens_fwd(state, examples)
        else:
            soft = [np.zeros((0, state.config.decoder.d_model)) for _ in examples]
    seqs = [list(ex.prompt) for ex in examples]
    outs: list[list[int]] = [[] for _ in examples]
    active = list(range(len(examples)))
    for _ in range(max_len):
        if not active:
            break
        rows = [np.array([len(soft[i]) + len(seqs[i]) - 1]) for i in active]
        logits, _ = decoder_fwd(state, [soft[i] for i in active], [seqs[i] for i in active], rows)
        nxt = logits.argmax(axis=1)
        still = []
        for i, t in zip(active, nxt):
            t = int(t)
            if t == EOS:
                continue
            outs[i].append(t)
            seqs[i].append(t)
            still.append(i)
        active = still
    return outs
