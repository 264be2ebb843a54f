"""SGD training, pixel-level metrics and the variant comparison experiment."""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import ops
from .bpfpn import ArchitectureSpec, Kind, Model
from .errors import ContractError, DivergenceError, ParameterError
from .graph import Graph
from .synth import SceneConfig, downsample_mask, generate, scene_configs
from .tensor import Rng

log = logging.getLogger(__name__)

COMPARE_KINDS = (
    Kind.VANILLA, Kind.HIGHRES, Kind.HOURGLASS, Kind.VARIANT1, Kind.VARIANT2,
    Kind.NO_ISOLATION, Kind.NO_SHARING, Kind.MAXPOOL_DOWN, Kind.AVGPOOL_DOWN,
)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_at: float = 0.8  # fraction of total steps

    def lr_at(self, step: int, total: int) -> float:
        return self.lr * (self.lr_decay_factor if step >= int(self.lr_decay_at * total) else 1.0)


@dataclass(frozen=True)
class RunConfig:
    arch: str = "variant2"
    steps: int = 500
    eval_interval: int = 50
    batch_size: int = 4
    seeds: tuple = (0,)
    out: Optional[str] = None
    n_train: int = 200
    n_eval: int = 50
    data_seed: int = 1234
    size: int = 64
    target_sigma: float = 1.5
    target_amplitude: float = 1.0
    clutter_scale: float = 0.2
    max_targets: int = 2
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def validate(self) -> "RunConfig":
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if not self.seeds:
            raise ParameterError("seeds must be non-empty")
        if self.eval_interval < 1 or self.batch_size < 1:
            raise ParameterError("eval_interval and batch_size must be >= 1")
        ArchitectureSpec.parse(self.arch)
        self.scene_base().validate()
        return self

    def scene_base(self) -> SceneConfig:
        return SceneConfig(
            size=self.size, n_targets=self.max_targets, target_sigma=self.target_sigma,
            target_amplitude=self.target_amplitude, clutter_scale=self.clutter_scale,
        )


@dataclass
class RunHistory:
    arch: str
    seed: int
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # dicts: step, precision, recall, f1
    snapshot_hash: str = ""
    seconds_per_step: float = 0.0

    @property
    def final(self) -> dict:
        return self.evals[-1]


# -- optimizer ------------------------------------------------------------


def sgd_step(params, grads, state: dict, cfg: OptimizerConfig, lr: Optional[float] = None) -> None:
    """Heavy-ball SGD with coupled weight decay, in place.

    ``v <- momentum * v + (g + weight_decay * w)``; ``w <- w - lr * v``.
    ``state`` maps parameter name to its velocity and starts empty.
    """
    lr = cfg.lr if lr is None else lr
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ContractError(f"{p.name}: gradient shape {g.shape} != parameter shape {p.value.shape}")
        v = state.get(p.name)
        if v is None:
            v = state[p.name] = np.zeros_like(p.value)
        v *= cfg.momentum
        v += g + cfg.weight_decay * p.value
        p.value -= lr * v


# -- metrics --------------------------------------------------------------


def prf(pred, truth) -> tuple[float, float, float]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def predict_logits(model: Model, images, chunk: int = 25) -> np.ndarray:
    out = []
    for i in range(0, len(images), chunk):
        g = Graph()
        h = model.forward(g, images[i : i + chunk])
        out.append(g.value(h.logits))
    return np.concatenate(out)


def evaluate(model: Model, images, coarse_masks) -> tuple[float, float, float]:
    """Pixel precision/recall/F1 of ``sigmoid(logits) > 0.5`` over all coarse cells."""
    if len(images) == 0:
        raise ParameterError("evaluate needs at least one scene")
    logits = predict_logits(model, images)
    return prf(ops.sigmoid(logits) > 0.5, coarse_masks > 0.5)


# -- data -----------------------------------------------------------------


def build_split(configs) -> tuple[np.ndarray, np.ndarray]:
    scenes = [generate(c) for c in configs]
    images = np.concatenate([s.image for s in scenes])
    masks = np.concatenate([downsample_mask(s.mask, 8) for s in scenes])
    return images, masks


def datasets(run: RunConfig):
    base = run.scene_base()
    train = build_split(scene_configs(run.n_train, base, run.data_seed, run.max_targets))
    held = build_split(scene_configs(run.n_eval, base, run.data_seed + 1_000_003, run.max_targets))
    return train, held


# -- training -------------------------------------------------------------


def _hash_state(model: Model) -> str:
    h = hashlib.sha256()
    for p in model.parameters:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def train_one(run: RunConfig, seed: int, data=None) -> RunHistory:
    """Train one architecture from one seed; the batch order depends on ``seed`` only."""
    run.validate()
    spec = ArchitectureSpec.parse(run.arch)
    (tr_img, tr_mask), (ev_img, ev_mask) = data if data is not None else datasets(run)
    model = Model(spec, seed)
    params = model.parameters
    state: dict = {}
    order = Rng(seed).spawn("batches")
    hist = RunHistory(spec.kind.value, seed)

    def record_eval(step):
        p, r, f1 = evaluate(model, ev_img, ev_mask)
        hist.evals.append({"step": step, "precision": p, "recall": r, "f1": f1})

    record_eval(0)
    started = time.perf_counter()
    for step in range(run.steps):
        idx = order.integers(0, len(tr_img), run.batch_size)
        g = Graph()
        try:
            h = model.forward(g, tr_img[idx])
            loss = ops.bce_with_logits(g, h.logits, tr_mask[idx])
        except ContractError as exc:
            raise DivergenceError(step, float("nan")) from exc
        value = float(g.value(loss)[0, 0, 0, 0])
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        hist.losses.append(value)
        g.backward(loss)
        sgd_step(params, [p.grad for p in params], state, run.optimizer, run.optimizer.lr_at(step, run.steps))
        if (step + 1) % run.eval_interval == 0 or step + 1 == run.steps:
            record_eval(step + 1)
    hist.seconds_per_step = (time.perf_counter() - started) / run.steps
    hist.snapshot_hash = _hash_state(model)
    return hist


def train(run: RunConfig) -> list[RunHistory]:
    data = datasets(run.validate())
    return [train_one(run, seed, data) for seed in run.seeds]


# -- variant comparison ---------------------------------------------------


def _compare_job(args):
    run, seed, data = args
    try:
        return train_one(run, seed, data), None
    except DivergenceError as exc:
        return None, {"arch": run.arch, "seed": seed, "step": exc.step}


def variant_compare(seeds, run: RunConfig, kinds=COMPARE_KINDS, jobs: int = 1) -> dict:
    """Train every kind on every seed over identical data; returns records and the summary.

    Records are ordered by (variant, seed).  A diverged run is excluded from
    the medians and listed under ``diverged``.
    """
    seeds = list(seeds)
    if len(seeds) < 5:
        raise ParameterError(f"variant_compare needs at least 5 seeds, got {len(seeds)}")
    data = datasets(run.validate())
    jobs_args = [(replace(run, arch=Kind(k).value), s, data) for k in kinds for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_compare_job, jobs_args))
    else:
        results = [_compare_job(a) for a in jobs_args]

    histories = {}
    diverged = []
    for (r, s, _), (hist, fail) in zip(jobs_args, results):
        if hist is None:
            diverged.append(fail)
        else:
            histories[(r.arch, s)] = hist

    records = []
    for k in kinds:
        name = Kind(k).value
        for s in seeds:
            hist = histories.get((name, s))
            if hist is None:
                records.append({"name": "variant_compare", "variant": name, "seed": s, "diverged": True})
                continue
            ref = histories.get((Kind.VANILLA.value, s))
            crossing = None
            if ref is not None:
                target = ref.final["f1"]
                crossing = next((e["step"] for e in hist.evals if e["f1"] >= target), None)
            records.append({
                "name": "variant_compare", "variant": name, "seed": s, "diverged": False,
                "final_f1": hist.final["f1"], "final_precision": hist.final["precision"],
                "final_recall": hist.final["recall"], "final_loss": hist.losses[-1],
                "first_loss": hist.losses[0], "crossing_step": crossing,
                "seconds_per_step": hist.seconds_per_step, "snapshot_hash": hist.snapshot_hash,
                "evals": hist.evals,
            })

    medians = {}
    for k in kinds:
        name = Kind(k).value
        f1s = [r["final_f1"] for r in records if r["variant"] == name and not r["diverged"]]
        medians[name] = statistics.median(f1s) if f1s else None
    return {"records": records, "medians": medians, "diverged": diverged, "checks": ordering_checks(medians)}


def ordering_checks(medians: dict) -> dict:
    def ge(a, b):
        if medians.get(a) is None or medians.get(b) is None:
            return None
        return medians[a] >= medians[b]

    return {
        "variant2>=variant1": ge("variant2", "variant1"),
        "variant1>=vanilla": ge("variant1", "vanilla"),
        "variant2>=maxpool_down": ge("variant2", "maxpool_down"),
        "variant2>=avgpool_down": ge("variant2", "avgpool_down"),
    }


# -- config files ---------------------------------------------------------

_OPT_KEYS = {f.name for f in fields(OptimizerConfig)}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"optimizer"}


def _coerce(key: str, raw: str, default):
    if key == "seeds":
        return tuple(int(s) for s in raw.replace(" ", "").split(",") if s)
    if key in ("arch", "out"):
        return raw
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    return float(raw)


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse UTF-8 ``key=value`` lines; ``#`` starts a comment."""
    base = base or RunConfig()
    run_kw, opt_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _OPT_KEYS:
            opt_kw[key] = _coerce(key, raw, getattr(base.optimizer, key))
        elif key in _RUN_KEYS:
            run_kw[key] = _coerce(key, raw, getattr(base, key))
        else:
            raise ParameterError(f"config line {lineno}: unknown key {key!r}")
    return replace(base, optimizer=replace(base.optimizer, **opt_kw), **run_kw)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def write_jsonl(records, fh) -> None:
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def history_record(hist: RunHistory) -> dict:
    return {"name": "train", **asdict(hist)}
