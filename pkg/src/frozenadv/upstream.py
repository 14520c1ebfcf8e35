"""Two toy self-supervised speech encoders.

Both share the layout waveform -> 3 strided conv layers (64-sample frames) ->
3 pre-LN transformer blocks, and emit four feature matrices: the conv output
and each block output.  They differ in attention heads, feed-forward width,
init seed and pretraining objective:

* ``"a"``: masked contrastive, the wav2vec 2.0 stand-in.  The projected
  block-3 output at each masked frame must pick out that frame's acoustic
  target (standardized log band energies) among distractor frames, half of
  them from the same utterance (InfoNCE).
* ``"b"``: masked prediction of k-means pseudo-labels computed offline from
  the same log band energies, the HuBERT stand-in.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from .autodiff import Graph
from .data import N_SAMPLES, Dataset, Waveform
from .optim import Adam

_MAGIC = b"FRUP1"
_HP = struct.Struct("<B11IQ")


class FrozenModelError(RuntimeError):
    pass


class InputLengthError(ValueError):
    pass


@dataclass(frozen=True)
class Hyper:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_blocks: int = 3
    conv_channels: tuple[int, int] = (32, 64)
    conv_kernels: tuple[int, int, int] = (32, 8, 8)
    stride: int = 4
    n_samples: int = N_SAMPLES
    init_seed: int = 1

    @property
    def n_frames(self) -> int:
        return self.n_samples // self.stride ** 3

    @property
    def n_layers(self) -> int:
        return 1 + self.n_blocks


ARCH_HYPER = {
    "a": Hyper(n_heads=4, d_ff=128, init_seed=101),
    "b": Hyper(n_heads=2, d_ff=256, init_seed=202),
}


@dataclass
class UpstreamModel:
    arch: str
    hyper: Hyper
    params: dict[str, np.ndarray]
    frozen: bool = False
    pretrain_log: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_layers(self) -> int:
        return self.hyper.n_layers

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


@dataclass
class LayerFeatures:
    """Per-layer hidden features; ``graph``/``nodes`` allow backprop to the input."""
    layers: list[np.ndarray]
    graph: Graph | None = None
    nodes: list[int] | None = None
    input_node: int | None = None


def _param_shapes(hp: Hyper) -> list[tuple[str, tuple[int, ...]]]:
    c1, c2 = hp.conv_channels
    k1, k2, k3 = hp.conv_kernels
    d, f = hp.d_model, hp.d_ff
    shapes = [
        ("conv1.w", (k1, 1, c1)), ("conv1.b", (c1,)),
        ("conv2.w", (k2, c1, c2)), ("conv2.b", (c2,)),
        ("conv3.w", (k3, c2, d)), ("conv3.b", (d,)),
        ("conv_ln.g", (d,)), ("conv_ln.b", (d,)),
        ("mask_emb", (d,)),
    ]
    for i in range(hp.n_blocks):
        p = f"block{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "ff1.w", (d, f)), (p + "ff1.b", (f,)),
            (p + "ff2.w", (f, d)), (p + "ff2.b", (d,)),
        ]
    return shapes


def init_model(arch: str, hyper: Hyper | None = None) -> UpstreamModel:
    if arch not in ARCH_HYPER:
        raise ValueError(f"unknown arch {arch!r}; expected 'a' or 'b'")
    hp = hyper or ARCH_HYPER[arch]
    rng = np.random.default_rng(hp.init_seed)
    params = {}
    for name, shape in _param_shapes(hp):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif leaf in ("b", "bq", "bk", "bv", "bo") or name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif name == "mask_emb":
            params[name] = rng.normal(0, 1.0, shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.normal(0, 1.0 / np.sqrt(fan_in), shape)
    return UpstreamModel(arch, hp, params)


def freeze(model: UpstreamModel) -> UpstreamModel:
    params = {}
    for k, v in model.params.items():
        a = np.array(v, dtype=np.float64)
        a.setflags(write=False)
        params[k] = a
    return replace(model, params=params, frozen=True)


def param_checksum(model: UpstreamModel) -> str:
    h = hashlib.sha256()
    for name, _ in _param_shapes(model.hyper):
        h.update(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def _positional(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000 ** (2 * i / d))
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


def _frontend(g: Graph, hp: Hyper, P: dict, x: int) -> int:
    """(B, L) waveform node -> (B, T, D) conv features, normalized."""
    bsz = g.value(x).shape[0]
    ones, zeros = g.const(np.ones(hp.n_samples)), g.const(np.zeros(hp.n_samples))
    h = g.op("layernorm", x, ones, zeros)           # per-utterance waveform normalization
    h = g.op("reshape", h, shape=(bsz, hp.n_samples, 1))
    for i, k in enumerate(hp.conv_kernels, start=1):
        pad = (k - hp.stride) // 2
        h = g.op("conv1d", h, P[f"conv{i}.w"], P[f"conv{i}.b"], stride=hp.stride, padding=pad)
        if i < 3:
            h = g.op("gelu", h)
    return g.op("layernorm", h, P["conv_ln.g"], P["conv_ln.b"])


def _block(g: Graph, hp: Hyper, P: dict, i: int, x: int) -> int:
    p = f"block{i}."
    bsz, t, d = g.value(x).shape
    nh, dh = hp.n_heads, d // hp.n_heads

    def heads(node):
        node = g.op("reshape", node, shape=(bsz, t, nh, dh))
        return g.op("transpose", node, axes=(0, 2, 1, 3))

    a = g.op("layernorm", x, P[p + "ln1.g"], P[p + "ln1.b"])
    q = heads(g.op("linear", a, P[p + "wq"], P[p + "bq"]))
    k = heads(g.op("linear", a, P[p + "wk"], P[p + "bk"]))
    v = heads(g.op("linear", a, P[p + "wv"], P[p + "bv"]))
    att = g.op("scaled-dot-product-attention", q, k, v)
    att = g.op("reshape", g.op("transpose", att, axes=(0, 2, 1, 3)), shape=(bsz, t, d))
    x = g.op("add", x, g.op("linear", att, P[p + "wo"], P[p + "bo"]))
    f = g.op("layernorm", x, P[p + "ln2.g"], P[p + "ln2.b"])
    f = g.op("gelu", g.op("linear", f, P[p + "ff1.w"], P[p + "ff1.b"]))
    return g.op("add", x, g.op("linear", f, P[p + "ff2.w"], P[p + "ff2.b"]))


def _param_nodes(g: Graph, model: UpstreamModel) -> dict[str, int]:
    return {k: g.param(v) for k, v in model.params.items()}


def build_encoder(g: Graph, model: UpstreamModel, x: int, P: dict | None = None,
                  frame_mask: np.ndarray | None = None) -> list[int]:
    """Add the encoder to ``g``; returns node ids of h_1..h_n.

    ``frame_mask`` (B, T) replaces masked conv frames by the learned mask
    embedding before the transformer blocks (pretraining only).
    """
    hp = model.hyper
    if P is None:
        P = _param_nodes(g, model)
    conv = _frontend(g, hp, P, x)
    h = conv
    if frame_mask is not None:
        m = np.broadcast_to(np.asarray(frame_mask, bool)[..., None], g.value(conv).shape)
        h = g.op("mask-fill", h, P["mask_emb"], mask=m)
    h = g.op("add", h, g.const(_positional(hp.n_frames, hp.d_model)))
    outs = [conv]
    for i in range(hp.n_blocks):
        h = _block(g, hp, P, i, h)
        outs.append(h)
    return outs


def _as_batch(model: UpstreamModel, wave) -> tuple[np.ndarray, bool]:
    if isinstance(wave, Waveform):
        wave = wave.samples
    arr = np.asarray(wave, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr[None] if single else arr
    if arr.ndim != 2 or arr.shape[1] != model.hyper.n_samples:
        raise InputLengthError(f"expected waveform length {model.hyper.n_samples}, got shape {np.shape(wave)}")
    return arr, single


def extract_features(model: UpstreamModel, wave, graph: Graph | None = None) -> LayerFeatures:
    """Per-layer features for one waveform ``(L,)`` or a batch ``(B, L)``.

    The returned ``graph`` reaches back to the input node, so callers can
    differentiate any function of the features with respect to the samples.
    """
    arr, single = _as_batch(model, wave)
    g = graph if graph is not None else Graph(mode="frozen" if model.frozen else "training")
    x = g.input(arr)
    nodes = build_encoder(g, model, x)
    layers = [g.value(n)[0] if single else g.value(n) for n in nodes]
    return LayerFeatures(layers, g, nodes, x)


def layer_stack(model: UpstreamModel, waves: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Features as one array (N, n_layers, T, D), no graph retained."""
    waves = np.asarray(waves, dtype=np.float64)
    out = []
    for s in range(0, len(waves), chunk):
        g = Graph(mode="frozen")
        x = g.input(waves[s:s + chunk], requires_grad=False)
        nodes = build_encoder(g, model, x)
        out.append(np.stack([g.value(n) for n in nodes], axis=1))
    hp = model.hyper
    if not out:
        return np.zeros((0, hp.n_layers, hp.n_frames, hp.d_model))
    return np.concatenate(out)


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1000
    batch: int = 8
    lr: float = 2e-3
    mask_ratio: float = 0.3
    n_distractors: int = 8
    same_utterance_distractors: int = 4
    temperature: float = 0.1
    n_clusters: int = 16
    kmeans_utterances: int = 64
    kmeans_iters: int = 20


def _draw_mask(rng, bsz, t, ratio):
    n = max(1, int(round(ratio * t)))
    m = np.zeros((bsz, t), bool)
    for b in range(bsz):
        m[b, rng.choice(t, size=n, replace=False)] = True
    return m


def _contrastive_loss(g, model, P, aux, x, mask, targets, rng, cfg):
    outs = build_encoder(g, model, x, P, frame_mask=mask)
    bsz, t, d = g.value(outs[-1]).shape
    flat_idx = np.flatnonzero(mask.reshape(-1))
    m = len(flat_idx)
    c = g.op("linear", g.op("reshape", outs[-1], shape=(bsz * t, d)), aux["proj.w"], aux["proj.b"])
    c = g.op("index", c, index=flat_idx)
    q = g.const(targets.reshape(bsz * t, -1)[flat_idx])

    def unit(node):
        n = g.op("reshape", g.op("l2-norm", node, axis=-1), shape=(m, 1))
        return g.op("div", node, n)

    sim = g.op("matmul", unit(c), g.op("transpose", unit(q), axes=(1, 0)))
    # some distractors come from the same utterance, so the positive cannot
    # be picked out by speaker cues alone; the rest from the whole batch
    utt = flat_idx // t
    k = min(cfg.n_distractors, m - 1)
    k_same = min(cfg.same_utterance_distractors, k, int(np.bincount(utt).min()) - 1)
    cand = np.empty((m, k + 1), dtype=np.int64)
    cand[:, 0] = np.arange(m)
    for i in range(m):
        same = np.flatnonzero(utt == utt[i])
        same = same[same != i]
        cand[i, 1:1 + k_same] = rng.choice(same, size=k_same, replace=False)
        rest = np.setdiff1d(np.arange(m), np.append(cand[i, 1:1 + k_same], i))
        cand[i, 1 + k_same:] = rng.choice(rest, size=k - k_same, replace=False)
    picked = g.op("index", g.op("reshape", sim, shape=(m * m,)), index=np.arange(m)[:, None] * m + cand)
    logits = g.op("scale", picked, factor=1.0 / cfg.temperature)
    return g.op("cross-entropy", logits, labels=np.zeros(m, dtype=np.int64))


def _pseudo_label_loss(g, model, P, aux, x, mask, labels):
    outs = build_encoder(g, model, x, P, frame_mask=mask)
    bsz, t, d = g.value(outs[-1]).shape
    flat_idx = np.flatnonzero(mask.reshape(-1))
    logits = g.op("linear", g.op("reshape", outs[-1], shape=(bsz * t, d)), aux["cls.w"], aux["cls.b"])
    logits = g.op("index", logits, index=flat_idx)
    return g.op("cross-entropy", logits, labels=labels.reshape(-1)[flat_idx])


def acoustic_frames(waves: np.ndarray, frame_len: int = 64, n_bands: int = 32) -> np.ndarray:
    """Log band energies of a 2x-frame Hann window centred on every frame, (N, T, n_bands)."""
    waves = np.atleast_2d(np.asarray(waves, dtype=np.float64))
    n, length = waves.shape
    win = 2 * frame_len
    padded = np.pad(waves, ((0, 0), (frame_len // 2, frame_len // 2)))
    idx = np.arange(length // frame_len)[:, None] * frame_len + np.arange(win)[None, :]
    power = np.abs(np.fft.rfft(padded[:, idx] * np.hanning(win), axis=-1)[..., 1:]) ** 2
    bands = power.reshape(n, length // frame_len, n_bands, -1).sum(-1)
    return np.log(bands + 1e-8)


def cluster_targets(waves: np.ndarray, cfg: PretrainConfig, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded k-means over standardized acoustic frames of a random utterance sample.

    Returns ``(centroids, mean, std)``; the standardization is part of the
    label definition and must be reused by :func:`assign_clusters`.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    pick = rng.choice(len(waves), size=min(cfg.kmeans_utterances, len(waves)), replace=False)
    frames = acoustic_frames(waves[np.sort(pick)])
    frames = frames.reshape(-1, frames.shape[-1])
    mu, sd = frames.mean(0), frames.std(0) + 1e-8
    centroids, _ = kmeans2((frames - mu) / sd, cfg.n_clusters, iter=cfg.kmeans_iters, minit="++",
                           seed=np.random.default_rng(np.random.SeedSequence([seed, 8])))
    return centroids, mu, sd


def assign_clusters(waves: np.ndarray, centroids: np.ndarray, mu: np.ndarray, sd: np.ndarray) -> np.ndarray:
    f = (acoustic_frames(waves) - mu) / sd
    d2 = ((f[..., None, :] - centroids) ** 2).sum(-1)
    return d2.argmin(-1)


class _Objective:
    """Masked objective for one architecture, usable for training and held-out scoring."""

    def __init__(self, model, waves, cfg, seed):
        self.cfg = cfg
        self.arch = model.arch
        d = model.hyper.d_model
        rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
        if model.arch == "a":
            frames = acoustic_frames(waves)
            self.stats = frames.mean((0, 1)), frames.std((0, 1)) + 1e-8
            nb = frames.shape[-1]
            self.aux = {"proj.w": rng.normal(0, 1 / np.sqrt(d), (d, nb)), "proj.b": np.zeros(nb)}
        else:
            self.centroids = cluster_targets(waves, cfg, seed)
            self.aux = {"cls.w": rng.normal(0, 1 / np.sqrt(d), (d, cfg.n_clusters)),
                        "cls.b": np.zeros(cfg.n_clusters)}

    def labels_for(self, waves):
        """Frame targets: standardized acoustic frames (a) or cluster ids (b)."""
        if self.arch == "a":
            mu, sd = self.stats
            return (acoustic_frames(waves) - mu) / sd
        return assign_clusters(waves, *self.centroids)

    def loss(self, g, model, P, A, waves, labels, rng):
        hp = model.hyper
        x = g.input(waves, requires_grad=False)
        mask = _draw_mask(rng, len(waves), hp.n_frames, self.cfg.mask_ratio)
        if self.arch == "a":
            return _contrastive_loss(g, model, P, A, x, mask, labels, rng, self.cfg)
        return _pseudo_label_loss(g, model, P, A, x, mask, labels)

    def evaluate(self, model, waves, labels, seed) -> float:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 9]))
        g = Graph(mode="frozen")
        P = _param_nodes(g, model)
        A = {k: g.param(v) for k, v in self.aux.items()}
        return float(g.value(self.loss(g, model, P, A, waves, labels, rng)))


def pretrain(model: UpstreamModel, dataset: Dataset, steps: int | None = None, seed: int = 0,
             cfg: PretrainConfig | None = None) -> UpstreamModel:
    """Self-supervised pretraining on the train split; returns a frozen copy.

    ``pretrain_log`` records the per-step loss and the masked objective on
    the validation split before and after training (same masks both times).
    """
    if model.frozen:
        raise FrozenModelError("model is already frozen; pretraining would mutate it")
    cfg = cfg or PretrainConfig()
    steps = cfg.steps if steps is None else steps
    train = dataset.waves("train")
    held = dataset.waves("val")[:32]
    obj = _Objective(model, train, cfg, seed)
    train_labels = obj.labels_for(train)
    held_labels = obj.labels_for(held)

    log = {"train_loss": [], "heldout_before": obj.evaluate(model, held, held_labels, seed)}
    params = {k: np.array(v) for k, v in model.params.items()}
    aux = {k: np.array(v) for k, v in obj.aux.items()}
    opt = Adam({**params, **{"aux." + k: v for k, v in aux.items()}}, lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    cur = replace(model, params=params)
    for _ in range(steps):
        pick = rng.choice(len(train), size=cfg.batch, replace=False)
        g = Graph()
        P = _param_nodes(g, cur)
        A = {k: g.param(v) for k, v in aux.items()}
        root = obj.loss(g, cur, P, A, train[pick], train_labels[pick], rng)
        g.backward(root)
        log["train_loss"].append(float(g.value(root)))
        grads = {k: g.grad(n) for k, n in P.items()}
        grads.update({"aux." + k: g.grad(n) for k, n in A.items()})
        new = opt.step({**cur.params, **{"aux." + k: v for k, v in aux.items()}}, grads)
        cur = replace(cur, params={k: new[k] for k in cur.params})
        aux = {k: new["aux." + k] for k in aux}
    obj.aux = aux
    log["heldout_after"] = obj.evaluate(cur, held, held_labels, seed)
    out = freeze(cur)
    out.pretrain_log = log
    return out


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: UpstreamModel, path) -> None:
    hp = model.hyper
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HP.pack(ord(model.arch), hp.d_model, hp.n_heads, hp.d_ff, hp.n_blocks,
                          *hp.conv_channels, *hp.conv_kernels, hp.stride, hp.n_samples,
                          hp.init_seed))
        fh.write(struct.pack("<B", int(model.frozen)))
        for name, shape in _param_shapes(hp):
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> UpstreamModel:
    raw = Path(path).read_bytes()
    if raw[:5] != _MAGIC:
        raise ValueError(f"{path}: not a FRUP1 checkpoint")
    tag, d, nh, ff, nb, c1, c2, k1, k2, k3, stride, ns, iseed = _HP.unpack_from(raw, 5)
    hp = Hyper(d, nh, ff, nb, (c1, c2), (k1, k2, k3), stride, ns, iseed)
    off = 5 + _HP.size
    frozen = bool(raw[off])
    off += 1
    params = {}
    for name, shape in _param_shapes(hp):
        n = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    model = UpstreamModel(chr(tag), hp, params)
    return freeze(model) if frozen else model
