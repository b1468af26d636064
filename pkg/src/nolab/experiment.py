"""Experiment configs, the run pipeline, and on-disk report formats.

Seeds: every consumer of randomness gets ``sub_seed(master, name)``, the
first word of ``SeedSequence([master, crc32(name)])``. Names in use are
``init``, ``noise``, ``shuffle``, ``attack``, ``analysis`` and, for sources
trained inside a run, ``<role>.init`` and ``<role>.shuffle``.

Run directory contents (all CSV files have a header row)::

    config.json         resolved config
    train_metrics.csv   epoch,loss,accuracy,eta,eta_noise,noise_min,noise_max
    checkpoint.bin      latest training state
    eval.csv            attack,threat,eps,accuracy
    variance.csv        k,var
    distance.csv        k,distance
    gaas.csv            order,success
    loss_grid.csv       eps1,eps2,loss
    manifest.json       files, columns and run metadata
    FAILED              written when a stage raises
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import traceback
import zlib
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import analysis as A
from .advtrain import AdvTrainConfig, AdversaryCache, ensadv_epoch, pgdadv_epoch
from .attacks import AttackSpec, ThreatModel, attack_accuracy, craft, min_bb_accuracy
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_mnist, synth_dataset
from .models import Model, build_model
from .noise import NoiseBank, init_noise
from .train import EpochMetrics, TrainConfig, TrainState, accuracy, train_epoch

log = logging.getLogger(__name__)

SCENARIOS = ("sgd", "nol", "sgd_ens", "nol_ens", "sgd_pgd", "nol_pgd")
METRIC_COLUMNS = ("epoch", "loss", "accuracy", "eta", "eta_noise", "noise_min", "noise_max")
REPORT_COLUMNS = {
    "variance.csv": ("k", "var"),
    "distance.csv": ("k", "distance"),
    "gaas.csv": ("order", "success"),
    "loss_grid.csv": ("eps1", "eps2", "loss"),
}


def sub_seed(master: int, name: str) -> int:
    return int(np.random.SeedSequence([master, zlib.crc32(name.encode())]).generate_state(1)[0])


def scenario_parts(scenario: str) -> tuple[bool, Optional[str]]:
    """(uses noise, adversarial protocol or None)."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    base, _, adv = scenario.partition("_")
    return base == "nol", {"": None, "ens": "ensadv", "pgd": "pgdadv"}[adv]


# ---------------------------------------------------------------- config


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSpec(_Strict):
    classes: int = Field(10, ge=2)
    n_train: int = Field(512, ge=2)
    n_test: int = Field(256, ge=2)
    size: int = Field(8, ge=4)
    channels: int = Field(1, ge=1)


class DataSpec(_Strict):
    source: Literal["mnist", "synth"] = "mnist"
    root: Optional[str] = None
    train_subset: Optional[int] = Field(None, ge=1)
    test_subset: Optional[int] = Field(None, ge=1)
    synth: SynthSpec = SynthSpec()


class TrainSpec(_Strict):
    eta: float = 0.01
    eta_adv: Optional[float] = None
    decay: float = 1.0
    decay_step: int = 0
    eta_noise: float = 0.0
    eta_noise_adv: Optional[float] = None
    momentum: float = 0.5
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 64


class NoiseSpec(_Strict):
    mode: Literal["multiplicative", "additive"] = "multiplicative"
    grad_filter: Literal["negative", "all", "template-gate"] = "negative"


class AdvSpec(_Strict):
    eps: float = Field(0.3, ge=0, le=1)
    alpha: Optional[float] = None
    steps: int = 40
    random_start: bool = True
    adv_first: bool = False
    regenerate: Literal["epoch", "run"] = "epoch"


class SourceSpec(_Strict):
    """A source model trained inside the run with plain SGD."""

    architecture: str = "convnet2"
    options: dict = {}
    train: TrainSpec = TrainSpec()


class AttackEntry(_Strict):
    family: Literal["fgsm", "rfgsm", "ifgsm", "pgd"]
    eps: float = Field(ge=0, le=1)
    alpha: Optional[float] = None
    steps: int = 1
    random_start: bool = True
    variant: Literal["paper", "eps-minus-alpha"] = "paper"
    threat: Literal["white-box", "black-box"] = "white-box"


class PcaSpec(_Strict):
    tap: str = "conv1"
    n: int = Field(700, ge=2)
    eps: float = Field(0.1, ge=0, le=1)
    ks: Optional[list[int]] = None


class GaasSpec(_Strict):
    n: int = Field(350, ge=1)
    eps: float = Field(0.1, ge=0, le=1)
    orders: list[int] = [4, 8, 16, 32, 64, 128]
    against: Literal["label", "prediction"] = "label"


class LossSurfaceSpec(_Strict):
    index: int = Field(0, ge=0)
    eps1: tuple[float, float] = (0.0, 0.3)
    eps2: tuple[float, float] = (0.0, 0.3)
    resolution: int = Field(11, ge=1)
    clamp: bool = False


class AnalysisSpec(_Strict):
    pca: Optional[PcaSpec] = None
    gaas: Optional[GaasSpec] = None
    loss_surface: Optional[LossSurfaceSpec] = None


class ExperimentConfig(_Strict):
    name: Optional[str] = None
    scenario: Literal["sgd", "nol", "sgd_ens", "nol_ens", "sgd_pgd", "nol_pgd"]
    architecture: str = "convnet2"
    options: dict = {}
    seed: int = Field(0, ge=0)
    data: DataSpec = DataSpec()
    train: TrainSpec = TrainSpec()
    noise: NoiseSpec = NoiseSpec()
    adv: AdvSpec = AdvSpec()
    ensadv_source: Union[str, SourceSpec, None] = None
    bb_source: Union[str, SourceSpec, None] = None
    attacks: list[AttackEntry] = []
    min_bb_eps: list[float] = []
    analyses: AnalysisSpec = AnalysisSpec()

    def run_name(self) -> str:
        return self.name or f"{self.scenario}-s{self.seed}"


class ConfigError(ValueError):
    """Validation failure; ``errors`` is a list of {field, message} dicts."""

    def __init__(self, errors: list[dict]):
        self.errors = errors
        super().__init__("; ".join(f"{e['field']}: {e['message']}" for e in errors))

    def report(self) -> str:
        return json.dumps({"status": "invalid", "errors": self.errors}, indent=2, sort_keys=True)


def _train_config(spec: TrainSpec, seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, **spec.model_dump())


def validate_config(raw: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(
            [{"field": ".".join(str(p) for p in e["loc"]) or "<root>", "message": e["msg"]} for e in exc.errors()]
        ) from None
    errors = []
    noisy, protocol = scenario_parts(cfg.scenario)
    if protocol == "ensadv" and cfg.ensadv_source is None:
        errors.append({"field": "ensadv_source", "message": f"scenario {cfg.scenario} needs a source model checkpoint or spec"})
    needs_bb = cfg.min_bb_eps or any(a.threat == "black-box" for a in cfg.attacks) or cfg.analyses.pca or cfg.analyses.loss_surface
    if needs_bb and cfg.bb_source is None:
        errors.append({"field": "bb_source", "message": "black-box attacks and analyses need a source model"})
    try:
        _train_config(cfg.train, 0)
    except ValueError as exc:
        errors.append({"field": "train", "message": str(exc)})
    for i, a in enumerate(cfg.attacks):
        try:
            attack_spec(a, 0)
        except ValueError as exc:
            errors.append({"field": f"attacks.{i}", "message": str(exc)})
    if protocol is not None:
        try:
            adv_config(cfg)
        except ValueError as exc:
            errors.append({"field": "adv", "message": str(exc)})
        r = cfg.train
        if (r.eta_adv if r.eta_adv is not None else r.eta) > r.eta:
            errors.append({"field": "train.eta_adv", "message": "eta_adv must not exceed eta"})
        if noisy and r.eta_noise_adv is not None and r.eta_noise_adv > r.eta_noise:
            errors.append({"field": "train.eta_noise_adv", "message": "eta_noise_adv must not exceed eta_noise"})
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    return validate_config(apply_overrides(raw, overrides or {}))


TRAIN_KEYS = set(TrainSpec.model_fields)


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Set dotted keys; bare training keys such as ``eta_noise`` land under ``train``."""
    out = json.loads(json.dumps(raw))
    for key, value in overrides.items():
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in TRAIN_KEYS:
            parts = ["train", parts[0]]
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([{"field": key, "message": f"{p} is not a mapping"}])
        node[parts[-1]] = value
    return out


def attack_spec(entry: AttackEntry, seed: int) -> AttackSpec:
    return AttackSpec(entry.family, entry.eps, entry.alpha, entry.steps, seed, entry.random_start, entry.variant)


def adv_config(cfg: ExperimentConfig) -> AdvTrainConfig | None:
    _, protocol = scenario_parts(cfg.scenario)
    if protocol is None:
        return None
    a = cfg.adv
    seed = sub_seed(cfg.seed, "attack")
    if protocol == "ensadv":
        spec = AttackSpec("fgsm", a.eps, seed=seed)
    else:
        spec = AttackSpec("pgd", a.eps, a.alpha if a.alpha is not None else 0.01, a.steps, seed, a.random_start)
    return AdvTrainConfig(protocol, spec, a.adv_first, a.regenerate)


# ---------------------------------------------------------------- data and models


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "synth":
        s = d.synth
        # one draw, split, so both halves share the class centres
        both = synth_dataset(s.classes, s.n_train + s.n_test, sub_seed(cfg.seed, "data"), s.size, s.channels)
        train, test = both.head(s.n_train), both.subset(slice(s.n_train, None))
    else:
        train, test = load_mnist("train", d.root), load_mnist("test", d.root)
    if d.train_subset:
        train = train.head(min(d.train_subset, len(train)))
    if d.test_subset:
        test = test.head(min(d.test_subset, len(test)))
    return train, test


def new_state(cfg: ExperimentConfig, sample_shape, classes: int) -> TrainState:
    model = build_model(cfg.architecture, classes, sample_shape, sub_seed(cfg.seed, "init"), **cfg.options)
    noisy, _ = scenario_parts(cfg.scenario)
    bank = None
    if noisy:
        bank = init_noise(sample_shape, cfg.train.batch_size, sub_seed(cfg.seed, "noise"), cfg.noise.mode, cfg.noise.grad_filter)
    return TrainState(model, bank)


def train_source(spec: SourceSpec, role: str, master: int, train: Dataset) -> TrainState:
    model = build_model(spec.architecture, train.classes, train.sample_shape, sub_seed(master, f"{role}.init"), **spec.options)
    state = TrainState(model)
    tc = _train_config(spec.train, sub_seed(master, f"{role}.shuffle"))
    for _ in range(tc.epochs):
        train_epoch(state, train, tc)
    return state


def resolve_source(cfg: ExperimentConfig, role: str, run_dir: Path, train: Dataset) -> tuple[Model, NoiseBank | None] | None:
    """Load a source from its checkpoint path, or train it once and cache it in the run directory."""
    spec = getattr(cfg, role)
    if spec is None:
        return None
    if isinstance(spec, str):
        ck = load_checkpoint(spec)
        return ck.state.model, ck.state.bank
    path = run_dir / f"{role}.bin"
    if path.exists():
        ck = load_checkpoint(path, spec.architecture)
        return ck.state.model, ck.state.bank
    log.info("training %s (%s, %d epochs)", role, spec.architecture, spec.train.epochs)
    state = train_source(spec, role, cfg.seed, train)
    save_checkpoint(state, path, cfg.seed)
    return state.model, state.bank


# ---------------------------------------------------------------- formats


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, columns, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def metric_rows(history: list[dict]):
    return [[h[c] for c in METRIC_COLUMNS] for h in history]


def export_report(report: A.AnalysisReport, out_dir) -> list[Path]:
    """Write the non-empty report curves as CSV files; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if report.variance:
        written.append(write_csv(out / "variance.csv", REPORT_COLUMNS["variance.csv"], sorted(report.variance.items())))
    if report.distance:
        written.append(write_csv(out / "distance.csv", REPORT_COLUMNS["distance.csv"], sorted(report.distance.items())))
    if report.gaas:
        written.append(write_csv(out / "gaas.csv", REPORT_COLUMNS["gaas.csv"], sorted(report.gaas.items())))
    if report.loss_grid:
        rows = [(e1, e2, report.loss_grid[i][j]) for i, e1 in enumerate(report.eps1) for j, e2 in enumerate(report.eps2)]
        written.append(write_csv(out / "loss_grid.csv", REPORT_COLUMNS["loss_grid.csv"], rows))
    return written


def write_manifest(run_dir: Path, cfg: ExperimentConfig, extra: dict | None = None) -> Path:
    files = {}
    for p in sorted(run_dir.iterdir()):
        if p.suffix == ".csv":
            files[p.name] = {"columns": next(csv.reader(open(p, newline=""))), "rows": max(sum(1 for _ in open(p)) - 1, 0)}
        elif p.suffix == ".bin":
            files[p.name] = {"bytes": p.stat().st_size, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
    meta = {"name": cfg.run_name(), "scenario": cfg.scenario, "architecture": cfg.architecture, "seed": cfg.seed, "files": files}
    meta.update(extra or {})
    return write_json(run_dir / "manifest.json", meta)


# ---------------------------------------------------------------- pipeline


def runs_root() -> Path:
    return Path(os.environ.get("NOLAB_RUNS", "runs"))


class RunFailed(RuntimeError):
    pass


class Run:
    """One experiment bound to its run directory."""

    def __init__(self, cfg: ExperimentConfig, run_dir=None):
        self.cfg = cfg
        self.dir = Path(run_dir) if run_dir is not None else runs_root() / cfg.run_name()
        self._data: tuple[Dataset, Dataset] | None = None
        self._sources: dict = {}

    @property
    def data(self) -> tuple[Dataset, Dataset]:
        if self._data is None:
            self._data = load_data(self.cfg)
        return self._data

    @property
    def checkpoint_path(self) -> Path:
        return self.dir / "checkpoint.bin"

    def source(self, role: str):
        if role not in self._sources:
            self._sources[role] = resolve_source(self.cfg, role, self.dir, self.data[0])
        return self._sources[role]

    def _guard(self, stage: str, fn):
        self.dir.mkdir(parents=True, exist_ok=True)
        marker = self.dir / "FAILED"
        try:
            out = fn()
        except Exception as exc:
            marker.write_text(f"stage: {stage}\nerror: {type(exc).__name__}: {exc}\n\n{traceback.format_exc()}")
            raise RunFailed(f"{stage} failed: {type(exc).__name__}: {exc}") from exc
        if marker.exists():
            marker.unlink()
        return out

    # -- train

    def train(self, resume: bool = False, stop_after: int | None = None) -> TrainState:
        """Train to ``cfg.train.epochs`` (or ``stop_after``), checkpointing every epoch."""
        return self._guard("train", lambda: self._train(resume, stop_after))

    def _train(self, resume: bool, stop_after: int | None) -> TrainState:
        cfg = self.cfg
        write_json(self.dir / "config.json", cfg.model_dump(mode="json"))
        train, _ = self.data
        if resume and self.checkpoint_path.exists():
            ck = load_checkpoint(self.checkpoint_path, cfg.architecture)
            if ck.seed != cfg.seed:
                raise ValueError(f"checkpoint was written with seed {ck.seed}, config has {cfg.seed}")
            state, history = ck.state, ck.extra.get("history", [])
        else:
            state, history = new_state(cfg, train.sample_shape, train.classes), []
        tc = _train_config(cfg.train, sub_seed(cfg.seed, "shuffle"))
        adv = adv_config(cfg)
        ens_source, cache = None, AdversaryCache()
        if adv is not None and adv.protocol == "ensadv":
            ens_source = self.source("ensadv_source")[0]
        last = tc.epochs if stop_after is None else min(stop_after, tc.epochs)
        while state.epoch < last:
            if adv is None:
                m = train_epoch(state, train, tc)
            elif adv.protocol == "ensadv":
                m = ensadv_epoch(state, ens_source, train, tc, adv, cache)
            else:
                m = pgdadv_epoch(state, train, tc, adv)
            history.append(_metric_dict(m))
            write_csv(self.dir / "train_metrics.csv", METRIC_COLUMNS, metric_rows(history))
            save_checkpoint(state, self.checkpoint_path, cfg.seed, {"history": history})
        if not history:
            write_csv(self.dir / "train_metrics.csv", METRIC_COLUMNS, [])
            save_checkpoint(state, self.checkpoint_path, cfg.seed, {"history": history})
        return state

    def load_state(self) -> TrainState:
        if not self.checkpoint_path.exists():
            raise FileNotFoundError(f"{self.checkpoint_path} does not exist; run the train stage first")
        return load_checkpoint(self.checkpoint_path, self.cfg.architecture).state

    # -- attack

    def attack(self, state: TrainState | None = None) -> list[tuple]:
        return self._guard("attack", lambda: self._attack(state or self.load_state()))

    def _attack(self, state: TrainState) -> list[tuple]:
        cfg = self.cfg
        _, test = self.data
        model, bank = state.model, state.bank
        rows = [("clean", "none", 0.0, accuracy(model, bank, test))]
        seed = sub_seed(cfg.seed, "attack")
        for entry in cfg.attacks:
            spec = attack_spec(entry, seed)
            if entry.threat == "black-box":
                src, src_noise = self.source("bb_source")
                threat = ThreatModel("black-box", src, src_noise)
            else:
                threat = ThreatModel()
            rows.append((spec.label(), entry.threat, entry.eps, attack_accuracy(spec, model, bank, test, threat)))
        for eps in cfg.min_bb_eps:
            res = min_bb_accuracy(model, bank, self.source("bb_source")[0], test, eps, seed)
            rows.append(("min-bb", "black-box", eps, res.accuracy))
        write_csv(self.dir / "eval.csv", ("attack", "threat", "eps", "accuracy"), rows)
        return rows

    # -- analyze

    def analyze(self, state: TrainState | None = None) -> A.AnalysisReport:
        return self._guard("analyze", lambda: self._analyze(state or self.load_state()))

    def _analyze(self, state: TrainState) -> A.AnalysisReport:
        cfg, spec = self.cfg, self.cfg.analyses
        _, test = self.data
        report = A.AnalysisReport()
        if spec.pca:
            src = self.source("bb_source")[0]
            report.variance, report.distance = pca_curves(state, src, test, spec.pca, sub_seed(cfg.seed, "analysis"))
        if spec.gaas:
            pts = sample(test, spec.gaas.n, sub_seed(cfg.seed, "analysis.gaas"))
            report.gaas = A.gaas_success(state.model, pts, spec.gaas.eps, spec.gaas.orders, state.bank, spec.gaas.against)
        if spec.loss_surface:
            ls = spec.loss_surface
            src, src_noise = self.source("bb_source")
            i = ls.index
            report.eps1 = A.grid_axis(*ls.eps1, ls.resolution).tolist()
            report.eps2 = A.grid_axis(*ls.eps2, ls.resolution).tolist()
            grid = A.loss_surface_grid(
                state.model, src, test.images[i : i + 1], test.labels[i : i + 1], report.eps1, report.eps2, state.bank, src_noise, ls.clamp
            )
            report.loss_grid = grid.tolist()
        export_report(report, self.dir)
        return report

    def finish(self) -> Path:
        return write_manifest(self.dir, self.cfg)


def _metric_dict(m: EpochMetrics) -> dict:
    return {c: getattr(m, c) for c in METRIC_COLUMNS}


def sample(data: Dataset, n: int, seed: int) -> Dataset:
    n = min(n, len(data))
    idx = np.sort(np.random.default_rng(seed).choice(len(data), n, replace=False))
    return data.subset(idx)


def pca_curves(state: TrainState, source: Model, test: Dataset, spec: PcaSpec, seed: int) -> tuple[dict, dict]:
    """Variance of clean tap features and clean-vs-adversarial PC distance.

    Adversaries are black-box FGSM examples from ``source``; both feature sets
    are read through the target's mean template when it has one.
    """
    pts = sample(test, spec.n, seed)
    adv = craft(AttackSpec("fgsm", spec.eps), source, pts)
    clean_f = A.tap_features(state.model, pts.images, spec.tap, state.bank)
    adv_f = A.tap_features(state.model, adv, spec.tap, state.bank)
    pca = A.fit_pca(clean_f)
    ks = spec.ks if spec.ks is not None else list(range(pca.rank))
    ks = [k for k in ks if k < pca.rank]
    var = A.variance_curve(pca, ks)
    dist = A.cosine_distance_curve(pca, clean_f, adv_f, ks)
    return dict(zip(ks, var.tolist())), dict(zip(ks, dist.tolist()))


def run_experiment(cfg: ExperimentConfig, run_dir=None, resume: bool = False) -> Path:
    """Train, evaluate and analyse; returns the run directory."""
    run = Run(cfg, run_dir)
    state = run.train(resume=resume)
    run.attack(state)
    run.analyze(state)
    run.finish()
    return run.dir
