"""Layer-wise weighted sum and the four lightweight downstream heads.

Heads never touch upstream weights: features are extracted once from the
frozen encoder and the head (plus its layer-weight logits) is trained on
those cached arrays.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, ShapeError
from .data import Dataset, TrialPair, Utterance, generate_trials
from .optim import Adam
from .upstream import LayerFeatures, UpstreamModel, layer_stack

TASKS = ("KS", "SID", "ASV", "PRA")
ASV_EMBED_DIM = 32
_MAGIC = b"FRHD1"
_HDR = struct.Struct("<B4Id")


class NotFrozenError(RuntimeError):
    pass


class InsufficientTrialsError(ValueError):
    pass


class EmptyEvaluationError(ValueError):
    pass


@dataclass
class LayerWeights:
    w: np.ndarray
    trainable: bool = True

    @property
    def effective(self) -> np.ndarray:
        e = np.exp(self.w - self.w.max())
        return e / e.sum()


@dataclass
class DownstreamHead:
    task: str
    params: dict[str, np.ndarray]
    layer_weights: LayerWeights
    tau: float | None = None
    history: list = field(default_factory=list, compare=False, repr=False)
    norm: tuple[np.ndarray, np.ndarray] | None = None     # per-layer (mean, std), each (L, D)

    @property
    def pooled(self) -> bool:
        return self.task != "PRA"

    @property
    def kind(self) -> str:
        return "linear-per-frame" if self.task == "PRA" else "linear-after-mean-pool"


@dataclass(frozen=True)
class HeadConfig:
    epochs: int = 20
    lr: float = 1e-2
    batch: int = 16
    n_trials: int = 50
    calib_trials: int = 200


def preprocess(wave, kind: str = "identity", coef: float = 0.97) -> np.ndarray:
    """Waveform pre-processing applied before feature extraction.

    ``"identity"`` (default) or ``"pre-emphasis"``: y[n] = x[n] - coef * x[n-1].
    Attacked audio is fed through the same hook as clean audio.
    """
    x = np.asarray(getattr(wave, "samples", wave), dtype=np.float64)
    if kind == "identity":
        return x
    if kind == "pre-emphasis":
        y = x.copy()
        y[..., 1:] = x[..., 1:] - coef * x[..., :-1]
        return y
    raise ValueError(f"unknown pre-processing {kind!r}")


def _layers_array(features) -> np.ndarray:
    if isinstance(features, LayerFeatures):
        features = features.layers
    if isinstance(features, np.ndarray):
        return features
    return np.stack(features, axis=0)


def weighted_sum(features, weights: LayerWeights) -> np.ndarray:
    """z = sum_i softmax(w)_i * h_i over the layer axis (leading axis)."""
    h = _layers_array(features)
    if len(weights.w) != h.shape[0]:
        raise ShapeError("weighted_sum", (len(weights.w),), h.shape, detail="one logit per layer")
    a = weights.effective
    return np.tensordot(a, h, axes=(0, 0))


def build_weighted_sum(g: Graph, feats: int, logits: int) -> int:
    """Graph version; ``feats`` is (N, L, T, D), ``logits`` is (L,)."""
    n_layers = g.value(logits).shape[0]
    if g.value(feats).shape[1] != n_layers:
        raise ShapeError("weighted_sum", g.value(logits).shape, g.value(feats).shape)
    a = g.op("reshape", g.op("softmax", logits), shape=(1, n_layers, 1, 1))
    return g.op("sum", g.op("mul", feats, a), axis=1)


def _head_shapes(task: str, d: int, n_out: int):
    if task == "ASV":
        # no bias on the embedding layer: inputs are centred, so embeddings
        # stay centred and cosine scores are not inflated by a shared offset
        return [("w1", (d, ASV_EMBED_DIM)), ("w2", (ASV_EMBED_DIM, n_out)), ("b2", (n_out,))]
    return [("w", (d, n_out)), ("b", (n_out,))]


def init_head(task: str, n_layers: int, d: int, n_out: int, seed: int) -> DownstreamHead:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11, TASKS.index(task)]))
    params = {}
    # the classifier starts at zero so an untrained head is exactly at chance;
    # only the ASV embedding layer needs a random start to break symmetry
    for name, shape in _head_shapes(task, d, n_out):
        params[name] = rng.normal(0, 1 / np.sqrt(shape[0]), shape) if name == "w1" else np.zeros(shape)
    return DownstreamHead(task, params, LayerWeights(np.zeros(n_layers)))


def feature_stats(task: str, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer, per-dimension mean and std of the head inputs on training data.

    Pooled tasks use statistics of the utterance-level (mean-pooled)
    features, frame tasks those of individual frames.
    """
    n_layers, d = feats.shape[1], feats.shape[-1]
    x = feats.mean(axis=2) if task != "PRA" else feats.transpose(0, 2, 1, 3).reshape(-1, n_layers, d)
    return x.mean(axis=0), x.std(axis=0) + 1e-5


def _head_input(head: DownstreamHead, feats: np.ndarray) -> np.ndarray:
    """Standardize each layer; pooled tasks are pooled first (pooling commutes with the weighted sum)."""
    x = feats.mean(axis=2, keepdims=True) if head.pooled else feats
    if head.norm is None:
        return x
    mu, sd = head.norm
    return (x - mu[:, None, :]) / sd[:, None, :]


def _forward(g: Graph, head: DownstreamHead, feats: np.ndarray, train: bool):
    """Returns (output node, embedding node or None, param node ids)."""
    mk = g.param if train else g.const
    P = {k: mk(v) for k, v in head.params.items()}
    P["layer_w"] = mk(head.layer_weights.w)
    x = g.input(_head_input(head, feats), requires_grad=False)
    z = build_weighted_sum(g, x, P["layer_w"])
    if head.task == "PRA":
        return g.op("linear", z, P["w"], P["b"]), None, P
    pooled = g.op("mean-pool", z)
    if head.task == "ASV":
        emb = g.op("matmul", pooled, P["w1"])
        return g.op("linear", emb, P["w2"], P["b2"]), emb, P
    return g.op("linear", pooled, P["w"], P["b"]), None, P


def _labels(task: str, items: list[Utterance]) -> np.ndarray:
    if task == "KS":
        return np.array([u.keyword_label for u in items])
    if task == "PRA":
        return np.stack([u.frame_labels for u in items])
    return np.array([u.speaker_label for u in items])


def _n_out(task: str, dataset: Dataset) -> int:
    c = dataset.config
    return {"KS": c.n_keywords, "SID": c.n_speakers, "ASV": c.n_speakers, "PRA": c.n_phones}[task]


def predict(head: DownstreamHead, feats: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Argmax predictions: (N,) for pooled tasks, (N, T) for PRA."""
    out = []
    for s in range(0, len(feats), chunk):
        g = Graph(mode="frozen")
        o, _, _ = _forward(g, head, feats[s:s + chunk], train=False)
        out.append(g.value(o).argmax(-1))
    return np.concatenate(out)


def embed(head: DownstreamHead, feats: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(feats), chunk):
        g = Graph(mode="frozen")
        _, e, _ = _forward(g, head, feats[s:s + chunk], train=False)
        out.append(g.value(e))
    return np.concatenate(out)


def _check_frozen(upstream: UpstreamModel):
    if not upstream.frozen:
        raise NotFrozenError("downstream heads require a frozen upstream model")


def fit_head(task: str, feats: np.ndarray, labels: np.ndarray, n_out: int, epochs: int, seed: int,
             cfg: HeadConfig = HeadConfig()) -> DownstreamHead:
    """Train a head on cached layer features (N, L, T, D)."""
    head = init_head(task, feats.shape[1], feats.shape[-1], n_out, seed)
    head.norm = feature_stats(task, feats)
    keys = list(head.params) + ["layer_w"]
    cur = {**head.params, "layer_w": head.layer_weights.w}
    opt = Adam(cur, lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    for _ in range(epochs):
        order = rng.permutation(len(feats))
        for s in range(0, len(order), cfg.batch):
            idx = order[s:s + cfg.batch]
            h = DownstreamHead(task, {k: cur[k] for k in head.params}, LayerWeights(cur["layer_w"]),
                               norm=head.norm)
            g = Graph()
            out, _, P = _forward(g, h, feats[idx], train=True)
            y = labels[idx]
            if task == "PRA":
                t, c = g.value(out).shape[1:]
                out = g.op("reshape", out, shape=(len(idx) * t, c))
                y = y.reshape(-1)
            loss = g.op("cross-entropy", out, labels=y)
            g.backward(loss)
            head.history.append(float(g.value(loss)))
            cur = opt.step(cur, {k: g.grad(P[k]) for k in keys})
    head.params = {k: cur[k] for k in head.params}
    head.layer_weights = LayerWeights(cur["layer_w"])
    return head


def train_head(task: str, upstream: UpstreamModel, dataset: Dataset, epochs: int | None = None,
               seed: int = 0, cfg: HeadConfig = HeadConfig(), features: dict | None = None):
    """Train one downstream head on frozen features.

    Returns ``(head, metrics)`` where metrics holds clean ``val`` and ``test``
    values.  The ASV head is trained as a speaker classifier and calibrated on
    clean validation trials before it is returned.  ``features`` may carry
    precomputed ``layer_stack`` arrays keyed by split.
    """
    _check_frozen(upstream)
    epochs = cfg.epochs if epochs is None else epochs
    features = features if features is not None else {}
    for split in ("train", "val", "test"):
        if split not in features:
            features[split] = layer_stack(upstream, dataset.waves(split))
    items = dataset.splits["train"]
    head = fit_head(task, features["train"], _labels(task, items), _n_out(task, dataset), epochs, seed, cfg)
    metrics = {}
    if task == "ASV":
        val_trials = generate_trials(dataset.splits["val"], cfg.calib_trials, cfg.calib_trials, seed)
        head.tau = calibrate_asv(head, val_trials, upstream, feats=features["val"]).tau
        for split in ("val", "test"):
            trials = generate_trials(dataset.splits[split], cfg.n_trials, cfg.n_trials, seed)
            metrics[split] = asv_accuracy(head, trials, features[split])
    else:
        for split in ("val", "test"):
            metrics[split] = evaluate_features(task, head, features[split], dataset.splits[split])
    return head, metrics


# --------------------------------------------------------------------------
# ASV scoring
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AsvThreshold:
    tau: float


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.maximum(np.linalg.norm(a, axis=-1), 1e-12)
    nb = np.maximum(np.linalg.norm(b, axis=-1), 1e-12)
    return (a * b).sum(-1) / (na * nb)


def eer_threshold(scores: np.ndarray, same: np.ndarray) -> float:
    """Threshold at the equal-error point; accept when ``score >= tau``."""
    scores = np.asarray(scores, float)
    same = np.asarray(same, bool)
    u = np.unique(scores)
    cands = np.concatenate([[u[0] - 1e-6], (u[:-1] + u[1:]) / 2, [u[-1] + 1e-6]])
    tgt, non = scores[same], scores[~same]
    frr = (tgt[None, :] < cands[:, None]).mean(1)
    far = (non[None, :] >= cands[:, None]).mean(1)
    acc = ((tgt[None, :] >= cands[:, None]).sum(1) + (non[None, :] < cands[:, None]).sum(1))
    gap = np.abs(far - frr)
    best = np.flatnonzero(gap == gap.min())
    best = best[np.argmax(acc[best])]
    return float(np.clip(cands[best], -1.0, 1.0))


def trial_scores(head: DownstreamHead, feats_a: np.ndarray, feats_b: np.ndarray) -> np.ndarray:
    return _cosine(embed(head, feats_a), embed(head, feats_b))


def _trial_feats(trials: list[TrialPair], upstream, feats=None):
    if feats is not None and all(t.index_a >= 0 for t in trials):
        ia = np.array([t.index_a for t in trials])
        ib = np.array([t.index_b for t in trials])
        return feats[ia], feats[ib]
    fa = layer_stack(upstream, np.stack([t.wave_a.samples for t in trials]))
    fb = layer_stack(upstream, np.stack([t.wave_b.samples for t in trials]))
    return fa, fb


def calibrate_asv(head: DownstreamHead, trials: list[TrialPair], upstream: UpstreamModel | None = None,
                  feats: np.ndarray | None = None, scores: np.ndarray | None = None) -> AsvThreshold:
    same = np.array([t.same_speaker for t in trials], bool)
    if same.sum() < 20 or (~same).sum() < 20:
        raise InsufficientTrialsError(
            f"calibration needs >= 20 trials per class, got {same.sum()} target / {(~same).sum()} non-target")
    if scores is None:
        fa, fb = _trial_feats(trials, upstream, feats)
        scores = trial_scores(head, fa, fb)
    return AsvThreshold(eer_threshold(scores, same))


def asv_decisions(scores: np.ndarray, tau: float) -> np.ndarray:
    return np.asarray(scores) >= tau


def asv_accuracy(head: DownstreamHead, trials: list[TrialPair], feats: np.ndarray | None = None,
                 upstream: UpstreamModel | None = None, feats_b: np.ndarray | None = None) -> float:
    """Trial accuracy in percent.  ``feats_b`` overrides the test-side features."""
    if head.tau is None:
        raise ValueError("ASV head has no calibrated threshold")
    if not trials:
        raise EmptyEvaluationError("empty evaluation set")
    fa, fb = _trial_feats(trials, upstream, feats)
    if feats_b is not None:
        fb = feats_b
    same = np.array([t.same_speaker for t in trials], bool)
    dec = asv_decisions(trial_scores(head, fa, fb), head.tau)
    return 100.0 * float((dec == same).mean())


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def evaluate_features(task: str, head: DownstreamHead, feats: np.ndarray, items: list[Utterance]) -> float:
    """Accuracy % (KS, SID) or frame error rate % (PRA) from cached features."""
    if len(items) == 0:
        raise EmptyEvaluationError("empty evaluation set")
    pred = predict(head, feats)
    y = _labels(task, items)
    if task == "PRA":
        return 100.0 * float((pred != y).mean())
    return 100.0 * float((pred == y).mean())


def evaluate(task: str, head: DownstreamHead, upstream: UpstreamModel, items) -> float:
    """Metric of ``head`` on utterances (KS/SID/PRA) or trial pairs (ASV)."""
    _check_frozen(upstream)
    if len(items) == 0:
        raise EmptyEvaluationError("empty evaluation set")
    if task == "ASV":
        return asv_accuracy(head, list(items), upstream=upstream)
    feats = layer_stack(upstream, np.stack([u.wave.samples for u in items]))
    return evaluate_features(task, head, feats, list(items))


def performance(task: str, metric: float) -> float:
    """Higher-is-better view of a metric (PRA error rate becomes frame accuracy)."""
    return 100.0 - metric if task == "PRA" else metric


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_head(head: DownstreamHead, path) -> None:
    d = (head.params["w1"] if head.task == "ASV" else head.params["w"]).shape[0]
    n_out = (head.params["w2"] if head.task == "ASV" else head.params["w"]).shape[1]
    emb = ASV_EMBED_DIM if head.task == "ASV" else 0
    tau = float("nan") if head.tau is None else head.tau
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HDR.pack(TASKS.index(head.task), len(head.layer_weights.w), d, n_out, emb, tau))
        fh.write(np.ascontiguousarray(head.layer_weights.w, dtype="<f8").tobytes())
        mu, sd = head.norm if head.norm is not None else (np.zeros((len(head.layer_weights.w), d)),
                                                          np.ones((len(head.layer_weights.w), d)))
        fh.write(np.ascontiguousarray(mu, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sd, dtype="<f8").tobytes())
        for name, _ in _head_shapes(head.task, d, n_out):
            fh.write(np.ascontiguousarray(head.params[name], dtype="<f8").tobytes())


def load_head(path) -> DownstreamHead:
    raw = Path(path).read_bytes()
    if raw[:5] != _MAGIC:
        raise ValueError(f"{path}: not a FRHD1 head file")
    t, n_layers, d, n_out, _, tau = _HDR.unpack_from(raw, 5)
    task = TASKS[t]
    off = 5 + _HDR.size
    lw = np.frombuffer(raw, "<f8", n_layers, off).astype(np.float64)
    off += 8 * n_layers
    stats = []
    for _ in range(2):
        stats.append(np.frombuffer(raw, "<f8", n_layers * d, off).reshape(n_layers, d).astype(np.float64))
        off += 8 * n_layers * d
    params = {}
    for name, shape in _head_shapes(task, d, n_out):
        n = int(np.prod(shape))
        params[name] = np.frombuffer(raw, "<f8", n, off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return DownstreamHead(task, params, LayerWeights(lw), None if np.isnan(tau) else float(tau),
                          norm=(stats[0], stats[1]))
