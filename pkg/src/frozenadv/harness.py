"""Experiment orchestration: the scenario x task matrix, NSR/EDR, reports.

A run is a pure function of :class:`ExperimentConfig`.  Expensive stages
(dataset, pretrained encoders, heads) can be cached in a work directory;
each cached file is tagged with a fingerprint of the config fields it
depends on and is rebuilt when they change.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attack import KINDS, AttackConfig, AttackResult, Scenario, averaged_embedding, bim_attack, gaussian_control
from .data import DataConfig, Dataset, generate_dataset, generate_trials, load_dataset, save_dataset
from .taskhead import (TASKS, DownstreamHead, HeadConfig, asv_accuracy, evaluate_features, load_head,
                       save_head, train_head)
from .upstream import (ARCH_HYPER, PretrainConfig, UpstreamModel, init_model, layer_stack, load_checkpoint,
                       pretrain, save_checkpoint)

log = logging.getLogger(__name__)

ARCHS = ("a", "b")
COLUMNS = ("scenario", "task", "target_arch", "attack_arch", "metric_mean", "metric_std", "nsr_mean", "edr_mean")
REP_COLUMNS = ("scenario", "task", "target_arch", "attack_arch", "rep", "metric", "nsr", "edr")


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


class EdrError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    # synthetic data
    n_keywords: int = 10
    n_speakers: int = 20
    n_phones: int = 8
    n_train: int = 640
    n_val: int = 160
    n_test: int = 300
    snr_db: float = 20.0
    # pretraining, per architecture
    pretrain_steps_a: int = 1000
    pretrain_steps_b: int = 1000
    same_utterance_distractors: int = 4
    pretrain_batch: int = 8
    pretrain_lr: float = 2e-3
    mask_ratio: float = 0.3
    n_distractors: int = 8
    n_clusters: int = 16
    # downstream heads
    head_epochs: int = 20
    head_lr: float = 1e-2
    head_batch: int = 16
    calib_trials: int = 200
    # attack
    epsilon: float = 0.1
    alpha: float | None = None
    n_iters: int = 10
    # protocol
    targets: tuple = ARCHS
    scenarios: tuple = KINDS
    tasks: tuple = TASKS
    n_items: int = 100
    n_trials: int = 50
    n_reps: int = 3
    master_seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.n_reps < 1:
            raise ConfigError(f"n_reps must be >= 1, got {self.n_reps}")
        if self.n_items < 1:
            raise ConfigError(f"n_items must be >= 1, got {self.n_items}")
        if self.n_items > self.n_test:
            raise ConfigError(f"n_items={self.n_items} exceeds the test split size {self.n_test}")
        if self.n_trials < 1:
            raise ConfigError(f"n_trials must be >= 1, got {self.n_trials}")
        for name, allowed in (("targets", ARCHS), ("scenarios", KINDS), ("tasks", TASKS)):
            vals = getattr(self, name)
            bad = [v for v in vals if v not in allowed]
            if bad or not vals:
                raise ConfigError(f"{name}: invalid entries {bad or vals}; allowed {', '.join(allowed)}")
        if self.pretrain_steps_a < 0 or self.pretrain_steps_b < 0 or self.head_epochs < 0:
            raise ConfigError("step and epoch counts must be >= 0")
        try:
            self.data_config().validate()
            self.attack_config().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def data_config(self) -> DataConfig:
        return DataConfig(n_keywords=self.n_keywords, n_speakers=self.n_speakers, n_phones=self.n_phones,
                          n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
                          master_seed=self.master_seed, snr_db=self.snr_db)

    def pretrain_config(self, arch: str) -> PretrainConfig:
        steps = self.pretrain_steps_a if arch == "a" else self.pretrain_steps_b
        return PretrainConfig(steps=steps, batch=self.pretrain_batch, lr=self.pretrain_lr,
                              mask_ratio=self.mask_ratio, n_distractors=self.n_distractors,
                              same_utterance_distractors=self.same_utterance_distractors,
                              n_clusters=self.n_clusters)

    def head_config(self) -> HeadConfig:
        return HeadConfig(epochs=self.head_epochs, lr=self.head_lr, batch=self.head_batch, n_trials=self.n_trials,
                          calib_trials=self.calib_trials)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(epsilon=self.epsilon, alpha=self.alpha, n_iters=self.n_iters, seed=self.master_seed)

    # key = value text format ------------------------------------------------

    @classmethod
    def parse(cls, text: str, **overrides) -> "ExperimentConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment, lists are comma separated."""
        types = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(types[key], val, lineno)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values).validate()

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.parse(text, **overrides)

    def to_text(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(v)
            elif v is None:
                v = "none"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"


def _coerce(f: dataclasses.Field, val: str, lineno: int):
    default = f.default
    try:
        if isinstance(default, tuple):
            return tuple(s.strip() for s in val.split(",") if s.strip())
        if f.name == "alpha":
            return None if val.lower() in ("none", "") else float(val)
        if isinstance(default, bool):
            return val.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
    except ValueError as e:
        raise ConfigError(f"line {lineno}: bad value for {f.name}: {val!r}") from e
    return val


def _fingerprint(cfg: ExperimentConfig, *names: str) -> str:
    blob = json.dumps({n: getattr(cfg, n) for n in names}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


_DATA_KEYS = ("n_keywords", "n_speakers", "n_phones", "n_train", "n_val", "n_test", "snr_db", "master_seed")
_PRE_KEYS = _DATA_KEYS + ("pretrain_batch", "pretrain_lr", "mask_ratio", "n_distractors",
                          "same_utterance_distractors", "n_clusters")
_HEAD_KEYS = ("head_epochs", "head_lr", "head_batch", "n_trials", "calib_trials")


# --------------------------------------------------------------------------
# cached stages
# --------------------------------------------------------------------------

class Workdir:
    """Artifact cache; ``None`` root keeps everything in memory."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def _manifest(self) -> dict:
        p = self.root / "manifest.json"
        return json.loads(p.read_text()) if p.exists() else {}

    def cached(self, name: str, tag: str, build, save, load):
        if self.root is None:
            return build()
        path = self.root / name
        if path.exists() and self._manifest().get(name) == tag:
            return load(path)
        obj = build()
        save(obj, path)
        man = self._manifest()
        man[name] = tag
        (self.root / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True))
        return obj


def get_dataset(cfg: ExperimentConfig, wd: Workdir) -> Dataset:
    return wd.cached("dataset.frad", _fingerprint(cfg, *_DATA_KEYS),
                     lambda: generate_dataset(cfg.data_config()), save_dataset, load_dataset)


def get_upstream(cfg: ExperimentConfig, wd: Workdir, arch: str, dataset: Dataset | None = None) -> UpstreamModel:
    steps_key = "pretrain_steps_a" if arch == "a" else "pretrain_steps_b"

    def build():
        ds = dataset if dataset is not None else get_dataset(cfg, wd)
        log.info("pretraining arch %s for %d steps", arch, getattr(cfg, steps_key))
        return pretrain(init_model(arch), ds, seed=cfg.master_seed, cfg=cfg.pretrain_config(arch))
    return wd.cached(f"upstream_{arch}.frup", _fingerprint(cfg, *_PRE_KEYS, steps_key) + arch,
                     build, save_checkpoint, load_checkpoint)


@dataclass
class TargetHeads:
    heads: dict[str, DownstreamHead]
    clean: dict[str, dict[str, float]]


def get_heads(cfg: ExperimentConfig, wd: Workdir, target: str, dataset: Dataset | None = None,
              model: UpstreamModel | None = None) -> TargetHeads:
    steps_key = "pretrain_steps_a" if target == "a" else "pretrain_steps_b"
    tag = _fingerprint(cfg, *_PRE_KEYS, steps_key, *_HEAD_KEYS) + target

    def build():
        ds = dataset if dataset is not None else get_dataset(cfg, wd)
        up = model if model is not None else get_upstream(cfg, wd, target, ds)
        feats = {s: layer_stack(up, ds.waves(s)) for s in ("train", "val", "test")}
        heads, clean = {}, {}
        for task in TASKS:
            heads[task], clean[task] = train_head(task, up, ds, seed=cfg.master_seed, cfg=cfg.head_config(),
                                                  features=feats)
            log.info("head %s/%s clean %s", target, task, clean[task])
        return TargetHeads(heads, clean)

    def save(th: TargetHeads, path: Path):
        path.mkdir(exist_ok=True)
        for task, h in th.heads.items():
            save_head(h, path / f"{task}.frhd")
        (path / "clean.json").write_text(json.dumps(th.clean, indent=1))

    def load(path: Path) -> TargetHeads:
        return TargetHeads({t: load_head(path / f"{t}.frhd") for t in TASKS},
                           json.loads((path / "clean.json").read_text()))
    return wd.cached(f"heads_{target}", tag, build, save, load)


# --------------------------------------------------------------------------
# metrics and reports
# --------------------------------------------------------------------------

@dataclass
class EdrRecord:
    terms: np.ndarray
    mean: float


def edr_terms(z: np.ndarray, z_adv: np.ndarray) -> np.ndarray:
    z = np.asarray(z, float)
    z_adv = np.asarray(z_adv, float)
    if len(z) == 0:
        raise EdrError("EDR needs at least one pair")
    axes = tuple(range(1, z.ndim))
    nz = np.sqrt((z ** 2).sum(axis=axes)) if axes else np.abs(z)
    if np.any(nz == 0):
        raise EdrError("clean embedding has zero norm; EDR undefined")
    d = z - z_adv
    return (np.sqrt((d ** 2).sum(axis=axes)) if axes else np.abs(d)) / nz


def compute_edr(target: UpstreamModel, pairs) -> EdrRecord:
    """Mean of ||z - z~|| / ||z|| over (original, adversarial) waveform pairs,
    using the target model's equal-weight averaged embedding."""
    pairs = list(pairs)
    if not pairs:
        raise EdrError("EDR needs at least one pair")
    xo = np.stack([np.asarray(getattr(o, "samples", o), float) for o, _ in pairs])
    xa = np.stack([np.asarray(getattr(a, "samples", a), float) for _, a in pairs])
    terms = edr_terms(averaged_embedding(target, xo), averaged_embedding(target, xa))
    return EdrRecord(terms, float(terms.mean()))


@dataclass(frozen=True)
class RepRow:
    scenario: str
    task: str
    target_arch: str
    attack_arch: str
    rep: int
    metric: float
    nsr: float
    edr: float


def _order(scenario: str, task: str, target: str):
    return (KINDS.index(scenario), TASKS.index(task), target)


@dataclass
class ScenarioReport:
    rows: list[RepRow] = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        groups: dict[tuple, list[RepRow]] = {}
        for r in self.rows:
            groups.setdefault((r.scenario, r.task, r.target_arch, r.attack_arch), []).append(r)
        out = []
        for key in sorted(groups, key=lambda k: _order(k[0], k[1], k[2])):
            rs = sorted(groups[key], key=lambda r: r.rep)
            m = np.array([r.metric for r in rs])
            out.append(dict(zip(COLUMNS, (*key, float(m.mean()), float(m.std(ddof=1)) if len(m) > 1 else 0.0,
                                          float(np.mean([r.nsr for r in rs])),
                                          float(np.mean([r.edr for r in rs]))))))
        return out

    def sorted_rows(self) -> list[RepRow]:
        return sorted(self.rows, key=lambda r: (*_order(r.scenario, r.task, r.target_arch), r.rep))

    def cell(self, scenario: str, task: str, target: str) -> dict | None:
        for a in self.aggregate():
            if (a["scenario"], a["task"], a["target_arch"]) == (scenario, task, target):
                return a
        return None


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def report_csv(report: ScenarioReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for a in report.aggregate():
        w.writerow([_fmt(a[c]) for c in COLUMNS])
    return buf.getvalue()


def report_json(report: ScenarioReport) -> str:
    """Aggregated rows plus the per-repetition rows they were computed from.

    Floats are emitted as 4-decimal JSON numbers.
    """
    def num(v):
        return json.loads(_fmt(v)) if isinstance(v, float) else v
    doc = {
        "columns": list(COLUMNS),
        "rows": [{c: num(a[c]) for c in COLUMNS} for a in report.aggregate()],
        "reps": [{c: num(getattr(r, c)) for c in REP_COLUMNS} for r in report.sorted_rows()],
    }
    return json.dumps(doc, indent=1) + "\n"


def export_report(report: ScenarioReport, fmt: str, path) -> None:
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    Path(path).write_text(report_csv(report) if fmt == "csv" else report_json(report))


def import_report(path) -> ScenarioReport:
    doc = json.loads(Path(path).read_text())
    return ScenarioReport([RepRow(**{**r, "rep": int(r["rep"]), "metric": float(r["metric"]),
                                     "nsr": float(r["nsr"]), "edr": float(r["edr"])}) for r in doc["reps"]])


def rounded(report: ScenarioReport, nd: int = 4) -> ScenarioReport:
    """The report as it survives a JSON export (values rounded to ``nd`` places)."""
    return ScenarioReport([dataclasses.replace(r, metric=round(r.metric, nd), nsr=round(r.nsr, nd),
                                               edr=round(r.edr, nd)) for r in report.rows])


# --------------------------------------------------------------------------
# the experiment
# --------------------------------------------------------------------------

def rep_seed(master_seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([master_seed, 20, rep]).generate_state(1, np.uint32)[0])


@dataclass
class RepPlan:
    """Items and trials for one repetition, as indices into the test split."""
    items: np.ndarray
    trials: list
    attack_set: np.ndarray                 # unique test indices that get perturbed

    def positions(self, idx) -> np.ndarray:
        return np.searchsorted(self.attack_set, idx)


def plan_rep(cfg: ExperimentConfig, dataset: Dataset, rep: int) -> RepPlan:
    seed = rep_seed(cfg.master_seed, rep)
    test = dataset.splits["test"]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
    items = np.sort(rng.choice(len(test), size=cfg.n_items, replace=False))
    trials = generate_trials(test, cfg.n_trials, cfg.n_trials, seed) if "ASV" in cfg.tasks else []
    # the enrollment side of each trial stays clean; the test side is perturbed
    b = np.array([t.index_b for t in trials], dtype=np.int64)
    return RepPlan(items, trials, np.unique(np.concatenate([items, b])))


def _attack_arch(kind: str, target: str) -> str:
    if kind == "limited_knowledge":
        return target
    if kind == "zero_knowledge":
        return "b" if target == "a" else "a"
    return "-"


def run_experiment(cfg: ExperimentConfig, threads: int = 1, workdir=None, dataset: Dataset | None = None,
                   models: dict | None = None, heads: dict | None = None) -> ScenarioReport:
    """Run the full scenario x task x target matrix for ``cfg.n_reps`` repetitions.

    BIM results depend only on the attacking architecture, so each is
    computed once per repetition and shared: the limited-knowledge attack
    on one target is the zero-knowledge attack on the other.
    """
    cfg.validate()
    wd = Workdir(workdir)
    with threadpool_limits(limits=1):
        ds = dataset if dataset is not None else get_dataset(cfg, wd)
        needed = set(cfg.targets)
        if "zero_knowledge" in cfg.scenarios:
            needed |= set(ARCHS)
        models = dict(models or {})
        for arch in sorted(needed):
            if arch not in models:
                models[arch] = get_upstream(cfg, wd, arch, ds)
        heads = dict(heads or {})
        for t in cfg.targets:
            if t not in heads:
                heads[t] = get_heads(cfg, wd, t, ds, models[t])
        acfg = cfg.attack_config()
        test = ds.splits["test"]
        X_all = ds.waves("test").astype(np.float64)
        clean_feats = {t: layer_stack(models[t], X_all) for t in cfg.targets}
        report = ScenarioReport()
        for rep in range(cfg.n_reps):
            plan = plan_rep(cfg, ds, rep)
            X = X_all[plan.attack_set]
            bim: dict[str, list[AttackResult]] = {}

            def attacked(arch):
                if arch not in bim:
                    log.info("rep %d: BIM with arch %s on %d utterances", rep, arch, len(X))
                    bim[arch] = bim_attack(models[arch], X, acfg, threads)
                return bim[arch]

            for target in cfg.targets:
                for kind in cfg.scenarios:
                    try:
                        rows = _scenario_rows(cfg, kind, target, rep, plan, X, test, models, heads[target],
                                              clean_feats[target], attacked, acfg)
                    except ExperimentError:
                        raise
                    except Exception as e:
                        raise ExperimentError(f"scenario={kind} target={target} rep={rep}: {e}") from e
                    report.rows.extend(rows)
    report.rows = report.sorted_rows()
    return report


def _scenario_rows(cfg, kind, target, rep, plan, X, test, models, th: TargetHeads, clean_feats, attacked, acfg):
    Scenario(kind, models[target],
             models[_attack_arch(kind, target)] if kind in ("limited_knowledge", "zero_knowledge") else None
             ).validate()
    if kind == "clean":
        adv, nsr, edr = X, np.zeros(len(X)), np.zeros(len(X))
    else:
        if kind == "gaussian":
            res = [gaussian_control(x, m.nsr, rep_seed(cfg.master_seed, rep))
                   for x, m in zip(X, attacked(target))]
        else:
            res = attacked(_attack_arch(kind, target))
        adv = np.stack([r.adversarial.samples for r in res])
        nsr = np.array([r.nsr for r in res])
        edr = edr_terms(averaged_embedding(models[target], X), averaged_embedding(models[target], adv))
    feats = clean_feats[plan.attack_set] if kind == "clean" else layer_stack(models[target], adv)
    rows = []
    for task in cfg.tasks:
        try:
            if task == "ASV":
                pos = plan.positions([t.index_b for t in plan.trials])
                metric = asv_accuracy(th.heads[task], plan.trials, clean_feats, feats_b=feats[pos])
            else:
                pos = plan.positions(plan.items)
                metric = evaluate_features(task, th.heads[task], feats[pos], [test[i] for i in plan.items])
        except Exception as e:
            raise ExperimentError(f"scenario={kind} task={task} target={target} rep={rep}: {e}") from e
        rows.append(RepRow(kind, task, target, _attack_arch(kind, target), rep, float(metric),
                           float(nsr[pos].mean()), float(edr[pos].mean())))
    return rows
