"""Seeded synthetic speech-like corpus.

Each utterance is a speaker-specific harmonic carrier (fundamental plus a
timbre envelope) whose harmonics are gated by a keyword-specific sequence of
"phones", each phone being a formant-like spectral envelope held for a run of
64-sample frames.  Background noise is added at a fixed SNR.

Everything is a pure function of ``(DataConfig, master_seed)``: templates come
from one RNG stream and every utterance draws from its own stream keyed by
``(master_seed, utterance index)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 4000
N_SAMPLES = 4096
FRAME_LEN = 64
SPLITS = ("train", "val", "test")

_MAGIC = b"FRAD1"
_HEADER = struct.Struct("<10IQ")
_RECORD = struct.Struct("<QII")


class DataConfigError(ValueError):
    pass


class InsufficientUtterancesError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Utterance:
    wave: Waveform
    keyword_label: int
    speaker_label: int
    frame_labels: np.ndarray
    seed: int


@dataclass(frozen=True)
class TrialPair:
    wave_a: Waveform
    wave_b: Waveform
    same_speaker: bool
    index_a: int = -1
    index_b: int = -1


@dataclass(frozen=True)
class DataConfig:
    n_keywords: int = 10
    n_speakers: int = 20
    n_phones: int = 8
    n_train: int = 640
    n_val: int = 160
    n_test: int = 300
    master_seed: int = 0
    snr_db: float = 20.0
    sample_rate: int = SAMPLE_RATE
    n_samples: int = N_SAMPLES
    frame_len: int = FRAME_LEN

    def validate(self):
        if self.n_keywords < 4:
            raise DataConfigError(f"need at least 4 keywords, got {self.n_keywords}")
        if self.n_speakers < 8:
            raise DataConfigError(f"need at least 8 speakers, got {self.n_speakers}")
        for split in SPLITS:
            n = getattr(self, f"n_{split}")
            if n < 32:
                raise DataConfigError(f"need at least 32 {split} utterances, got {n}")
        if self.n_phones < 4 or self.n_phones > 255:
            raise DataConfigError(f"n_phones must lie in [4, 255], got {self.n_phones}")
        if self.n_samples % self.frame_len:
            raise DataConfigError("n_samples must be a multiple of frame_len")

    @property
    def n_frames(self) -> int:
        return self.n_samples // self.frame_len


@dataclass
class Dataset:
    config: DataConfig
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    def waves(self, split: str) -> np.ndarray:
        return np.stack([u.wave.samples for u in self.splits[split]])

    def keyword_labels(self, split: str) -> np.ndarray:
        return np.array([u.keyword_label for u in self.splits[split]])

    def speaker_labels(self, split: str) -> np.ndarray:
        return np.array([u.speaker_label for u in self.splits[split]])

    def frame_labels(self, split: str) -> np.ndarray:
        return np.stack([u.frame_labels for u in self.splits[split]])

    def __len__(self):
        return sum(len(v) for v in self.splits.values())


@dataclass(frozen=True)
class _Templates:
    phone_formants: np.ndarray   # (P, 2) centre frequencies
    phone_gains: np.ndarray      # (P, 2)
    keyword_phones: np.ndarray   # (K, 4) phone ids
    speaker_f0: np.ndarray       # (S,)
    speaker_tilt: np.ndarray     # (S,)
    speaker_bumps: np.ndarray    # (S, 3, 2) centre, gain
    speaker_breath: np.ndarray   # (S,)


def _templates(cfg: DataConfig) -> _Templates:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, 0]))
    p = cfg.n_phones
    # spread formants over a grid so phones stay separable
    f1 = np.linspace(280, 850, p)[rng.permutation(p)] + rng.uniform(-20, 20, p)
    f2 = np.linspace(950, 1850, p)[rng.permutation(p)] + rng.uniform(-20, 20, p)
    formants = np.stack([f1, f2], axis=1)
    gains = rng.uniform(0.8, 1.6, size=(p, 2))

    # keyword phone bags share at most two phones while that is still achievable
    keywords: list[np.ndarray] = []
    max_shared, tries = 2, 0
    while len(keywords) < cfg.n_keywords:
        seq = rng.choice(p, size=4, replace=False)
        tries += 1
        if tries > 2000:
            max_shared, tries = max_shared + 1, 0
        if all(len(set(seq) & set(k)) <= max_shared for k in keywords) and \
                all(set(seq) != set(k) for k in keywords):
            keywords.append(seq)

    s = cfg.n_speakers
    f0 = np.exp(np.linspace(np.log(80.0), np.log(400.0), s))[rng.permutation(s)]
    f0 = f0 * rng.uniform(0.98, 1.02, s)
    tilt = rng.uniform(0.2, 0.9, s)
    bumps = np.stack([rng.uniform(200, 1800, (s, 3)), rng.uniform(0.6, 1.6, (s, 3))], axis=2)
    breath = rng.uniform(0.05, 0.5, s)
    return _Templates(formants, gains, np.array(keywords), f0, tilt, bumps, breath)


def _utterance_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, 1, index]).generate_state(1, np.uint64)[0])


def _phone_envelope(freqs, formants, gains):
    env = np.full_like(freqs, 0.05)
    for (fc, g) in zip(formants, gains):
        env = env + g * np.exp(-0.5 * ((freqs - fc) / 160.0) ** 2)
    return env


def _timbre(freqs, tilt, bumps):
    t = (np.maximum(freqs, 50.0) / 100.0) ** (-tilt)
    for fc, g in bumps:
        t = t * (1.0 + g * np.exp(-0.5 * ((freqs - fc) / 180.0) ** 2))
    return t


def synthesize(cfg: DataConfig, seed: int, templates: _Templates | None = None) -> Utterance:
    """Render one utterance; labels are drawn from ``seed`` itself."""
    tp = templates if templates is not None else _templates(cfg)
    rng = np.random.default_rng(seed)
    kw = int(rng.integers(cfg.n_keywords))
    spk = int(rng.integers(cfg.n_speakers))
    n, sr, fl = cfg.n_samples, cfg.sample_rate, cfg.frame_len
    nf = cfg.n_frames

    # phone segment boundaries in frames, jittered around equal quarters
    base = np.array([nf // 4, nf // 2, 3 * nf // 4])
    jit = max(1, nf // 20)
    bounds = base + rng.integers(-jit, jit + 1, size=3)
    phones = tp.keyword_phones[kw]
    frame_labels = np.empty(nf, dtype=np.int64)
    edges = np.concatenate([[0], bounds, [nf]])
    for j in range(4):
        frame_labels[edges[j]:edges[j + 1]] = phones[j]

    t = np.arange(n) / sr
    f0 = tp.speaker_f0[spk] * (1.0 + 0.01 * rng.normal())
    vib = 1.0 + 0.008 * np.sin(2 * np.pi * rng.uniform(4, 6) * t + rng.uniform(0, 2 * np.pi))
    inst_phase = 2 * np.pi * np.cumsum(f0 * vib) / sr
    n_harm = int(0.47 * sr // f0)
    h = np.arange(1, n_harm + 1)
    hf = h * f0
    timbre = _timbre(hf, tp.speaker_tilt[spk], tp.speaker_bumps[spk])

    # per-frame harmonic gains, smoothed across boundaries by a short ramp
    env = np.stack([_phone_envelope(hf, tp.phone_formants[p], tp.phone_gains[p]) for p in range(cfg.n_phones)])
    gains_frame = env[frame_labels]                      # (nf, H)
    gains = np.repeat(gains_frame, fl, axis=0)           # (n, H)
    ramp = 16
    kernel = np.ones(ramp) / ramp
    gains = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, gains)

    phases = rng.uniform(0, 2 * np.pi, n_harm)
    carrier = np.sin(inst_phase[:, None] * h[None, :] + phases[None, :])
    sig = (carrier * gains * timbre[None, :]).sum(axis=1)

    # aspiration noise coloured by the current phone's envelope, so phone
    # identity stays visible between widely spaced harmonics
    sig = sig / (np.sqrt(np.mean(sig ** 2)) + 1e-12)
    spec = np.fft.rfft(rng.normal(size=(nf, 2 * fl)), axis=1)
    fgrid = np.fft.rfftfreq(2 * fl, 1 / sr)
    shaped = np.fft.irfft(spec * np.stack([_phone_envelope(fgrid, tp.phone_formants[p], tp.phone_gains[p])
                                           for p in frame_labels]), axis=1)[:, fl // 2:fl // 2 + fl]
    asp = shaped.reshape(-1)
    asp = asp / (np.sqrt(np.mean(asp ** 2)) + 1e-12)
    sig = sig + tp.speaker_breath[spk] * asp

    fade = int(0.01 * sr)
    win = np.ones(n)
    win[:fade] = np.linspace(0, 1, fade)
    win[-fade:] = np.linspace(1, 0, fade)
    sig = sig * win
    rms = 0.1 * np.exp(0.15 * rng.normal())
    sig = sig * rms / (np.sqrt(np.mean(sig ** 2)) + 1e-12)
    noise_std = np.sqrt(np.mean(sig ** 2)) / (10 ** (cfg.snr_db / 20))
    sig = sig + noise_std * rng.normal(size=n)
    samples = np.clip(sig, -1.0, 1.0).astype(np.float32).astype(np.float64)
    return Utterance(Waveform(samples, sr), kw, spk, frame_labels, seed)


def generate_dataset(cfg: DataConfig) -> Dataset:
    cfg.validate()
    tp = _templates(cfg)
    ds = Dataset(cfg)
    start = 0
    for split in SPLITS:
        count = getattr(cfg, f"n_{split}")
        ds.splits[split] = [synthesize(cfg, _utterance_seed(cfg.master_seed, start + i), tp)
                            for i in range(count)]
        start += count
    return ds


def generate_trials(utterances: list[Utterance], n_target: int, n_nontarget: int, seed: int) -> list[TrialPair]:
    """Draw distinct same-speaker and different-speaker pairs."""
    by_spk: dict[int, list[int]] = {}
    for i, u in enumerate(utterances):
        by_spk.setdefault(u.speaker_label, []).append(i)
    n_possible_target = sum(len(v) * (len(v) - 1) // 2 for v in by_spk.values())
    if n_target > n_possible_target:
        raise InsufficientUtterancesError(
            f"{n_target} target trials requested but only {n_possible_target} distinct pairs exist")
    n = len(utterances)
    n_possible_non = n * (n - 1) // 2 - n_possible_target
    if n_nontarget > n_possible_non:
        raise InsufficientUtterancesError(
            f"{n_nontarget} non-target trials requested but only {n_possible_non} distinct pairs exist")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    multi = sorted(s for s, v in by_spk.items() if len(v) >= 2)
    used = set()
    pairs: list[TrialPair] = []

    def add(a, b, same):
        key = (min(a, b), max(a, b))
        if a == b or key in used:
            return False
        used.add(key)
        ua, ub = utterances[a], utterances[b]
        pairs.append(TrialPair(ua.wave, ub.wave, same, a, b))
        return True

    while sum(p.same_speaker for p in pairs) < n_target:
        spk = multi[rng.integers(len(multi))]
        a, b = rng.choice(by_spk[spk], size=2, replace=False)
        add(int(a), int(b), True)
    while len(pairs) < n_target + n_nontarget:
        a, b = rng.integers(n, size=2)
        if utterances[a].speaker_label != utterances[b].speaker_label:
            add(int(a), int(b), False)
    return pairs


def save_dataset(ds: Dataset, path) -> None:
    c = ds.config
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(c.n_keywords, c.n_speakers, c.n_phones, c.n_train, c.n_val, c.n_test,
                              c.sample_rate, c.n_samples, c.frame_len,
                              int(round(c.snr_db * 1000)), c.master_seed))
        for split in SPLITS:
            for u in ds.splits[split]:
                fh.write(_RECORD.pack(u.seed, u.keyword_label, u.speaker_label))
                fh.write(u.frame_labels.astype("<u1").tobytes())
                fh.write(u.wave.samples.astype("<f4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:5] != _MAGIC:
        raise ValueError(f"{path}: not a FRAD1 dataset file")
    fields = _HEADER.unpack_from(raw, 5)
    k, s, p, ntr, nva, nte, sr, ns, fl, snr_milli, mseed = fields
    cfg = DataConfig(k, s, p, ntr, nva, nte, mseed, snr_milli / 1000, sr, ns, fl)
    off = 5 + _HEADER.size
    nf = ns // fl
    ds = Dataset(cfg)
    for split, count in zip(SPLITS, (ntr, nva, nte)):
        items = []
        for _ in range(count):
            seed, kw, spk = _RECORD.unpack_from(raw, off)
            off += _RECORD.size
            fr = np.frombuffer(raw, dtype="<u1", count=nf, offset=off).astype(np.int64)
            off += nf
            smp = np.frombuffer(raw, dtype="<f4", count=ns, offset=off).astype(np.float64)
            off += 4 * ns
            items.append(Utterance(Waveform(smp, sr), kw, spk, fr, seed))
        ds.splits[split] = items
    return ds
