"""Source pretraining, confidence-mixing adaptation, oracle training and sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .detection import Box, Detection, GaussianBox, by_det, nms
from .detector import (SGD, CellTargets, LossGains, ToyDetectorParams, backprop, cell_features,
                       detection_loss, forward, init_params, load_checkpoint, match_targets,
                       save_checkpoint)
from .evaluation import APResult, evaluate_detections, overlay_roles
from .losses import consistency_weight
from .mixing import MixStrategy, combine_labels, compose, plan_mix
from .schedule import Clock, Mode, Schedule, filter_pseudo
from .synthetic import (DEFAULT_TARGET_SHIFT, Dataset, DomainShift, SceneSpec, make_benchmark,
                        read_dataset)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CONFMIX_OUTPUT_ROOT"
SPLITS = ("source_train", "target_train", "target_test", "source_test")
SWEEP_AXES = ("mix_strategy", "schedule_mode", "gamma", "alpha", "c_th", "c_th_gamma")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # data: read from data_dir/<split>/ when set, otherwise generated
    data_dir: Optional[str] = None
    data_seed: int = 0
    n_source: int = 200
    n_target: int = 200
    n_test: int = 100
    scene: dict = field(default_factory=lambda: asdict(SceneSpec()))
    shift: dict = field(default_factory=lambda: asdict(DEFAULT_TARGET_SHIFT))
    # detector and optimiser
    grid: int = 8
    radius: int = 1
    hidden: int = 32
    pretrain_epochs: int = 30
    adapt_epochs: int = 50
    oracle_epochs: int = 30
    batch_size: int = 2
    lr: float = 3e-2
    adapt_lr: Optional[float] = 5e-3
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    flip_aug: bool = True
    box_gain: float = 1.0
    obj_gain: float = 1.0
    cls_gain: float = 1.0
    raw_pdf: bool = False
    var_floor: float = 1e-3
    # pseudo labelling, mixing and consistency weighting
    c_th: float = 0.25
    c_th_gamma: float = 0.5
    nms_iou: float = 0.5
    alpha: float = 5.0
    schedule_mode: str = Mode.DET_TO_COMB_DELTA.value
    mix_strategy: str = MixStrategy.FOUR_DIVISION.value
    gamma_mode: str = "dynamic"
    gamma_const: float = 1.0
    source_labels: str = "pred"
    freeze: bool = False
    # evaluation and output
    eval_conf: float = 0.25
    eval_every: int = 1
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("c_th", "c_th_gamma", "nms_iou", "eval_conf", "gamma_const"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        for name in ("pretrain_epochs", "adapt_epochs", "oracle_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.hidden < 1 or self.grid < 1:
            raise ConfigError("batch_size, hidden and grid must be >= 1")
        if self.radius < 0:
            raise ConfigError("radius must be >= 0")
        try:
            Mode(self.schedule_mode)
            MixStrategy(self.mix_strategy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.gamma_mode not in ("dynamic", "constant"):
            raise ConfigError("gamma_mode must be 'dynamic' or 'constant'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")
        if self.source_labels not in ("pred", "gt"):
            raise ConfigError("source_labels must be 'pred' or 'gt'")
        try:
            SceneSpec(**self.scene)
            shift = DomainShift(**self.shift)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad scene/shift spec: {exc}") from None
        if shift.fog > 0.7:
            raise ConfigError("fog strength above 0.7 hides the objects; not allowed for training")
        if self.data_dir is not None and not Path(self.data_dir).is_dir():
            raise ConfigError(f"data_dir {self.data_dir} does not exist")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    @property
    def gains(self) -> LossGains:
        return LossGains(self.box_gain, self.obj_gain, self.cls_gain)

    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


# -------------------------------------------------------------------- data

def load_data(cfg: RunConfig) -> dict[str, Dataset]:
    if cfg.data_dir is not None:
        root = Path(cfg.data_dir)
        return {s: read_dataset(root / s) for s in SPLITS if (root / s).is_dir()}
    return make_benchmark(cfg.data_seed, cfg.n_source, cfg.n_target, cfg.n_test,
                          SceneSpec(**cfg.scene), DomainShift(**cfg.shift))


def _flip(image: np.ndarray, targets, code: int):
    fx, fy = code & 1, code & 2
    if fx:
        image = image[:, ::-1]
        targets = [(Box(1.0 - b.cx, b.cy, b.w, b.h), c) for b, c in targets]
    if fy:
        image = image[::-1]
        targets = [(Box(b.cx, 1.0 - b.cy, b.w, b.h), c) for b, c in targets]
    return np.ascontiguousarray(image), targets


class ImageBank:
    """Dataset view that caches flipped images, features and cell targets."""

    def __init__(self, ds: Dataset, grid: int, radius: int = 1):
        self.ds = ds
        self.grid = grid
        self.radius = radius
        self._cache: dict[tuple[int, int], tuple] = {}

    def __len__(self):
        return len(self.ds)

    def get(self, i: int, flip: int = 0):
        """``(image, targets, features, cell_targets)`` of item ``i`` under a flip code."""
        key = (int(i), int(flip))
        hit = self._cache.get(key)
        if hit is None:
            item = self.ds[i]
            image, targets = _flip(item.image, item.targets, flip)
            hit = (image, targets, cell_features(image, self.grid, self.radius), match_targets(targets, self.grid))
            self._cache[key] = hit
        return hit


def make_params(cfg: RunConfig, channels: int) -> ToyDetectorParams:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    return init_params(rng, channels=channels, grid=cfg.grid, hidden=cfg.hidden, radius=cfg.radius)


def _stream(cfg: RunConfig, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, tag]))


# --------------------------------------------------------------- evaluation

def detect(params: ToyDetectorParams, feats: np.ndarray, conf: float, iou_thresh: float):
    return nms(forward(params, feats=feats).detections(conf), iou_thresh, conf, by_det)


def evaluate(params: ToyDetectorParams, data: Dataset | ImageBank, cfg: Optional[RunConfig] = None,
             with_overlays: bool = False):
    """mAP report for a split, ranking by detector confidence."""
    cfg = cfg or RunConfig()
    bank = data if isinstance(data, ImageBank) else ImageBank(data, params.grid, params.radius)
    if len(bank) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    dets, gts = [], []
    for i in range(len(bank)):
        _, targets, feats, _ = bank.get(i)
        dets.append(detect(params, feats, cfg.eval_conf, cfg.nms_iou))
        gts.append(targets)
    result = evaluate_detections(dets, gts, 0.5)
    if not with_overlays:
        return result
    overlays = [{"image": i, "objects": overlay_roles(d, g)} for i, (d, g) in enumerate(zip(dets, gts))]
    return result, overlays


# ---------------------------------------------------------------- logging

def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_csv(path: Path, rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    if rows:
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(rows[0]))
        for r in rows:
            writer.writerow([_fmt(v) for v in r.values()])
    path.write_text(buf.getvalue())


def _prepare_output(cfg: RunConfig) -> Path:
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


# ------------------------------------------------------- supervised training

def supervised_grads(params, bank: ImageBank, i: int, flip: int, cfg: RunConfig):
    _, _, feats, targets = bank.get(i, flip)
    pred = forward(params, feats=feats)
    losses, dout = detection_loss(params, pred, targets, cfg.gains, cfg.raw_pdf, cfg.var_floor)
    return losses, backprop(params, pred, dout)


def train_supervised(params: ToyDetectorParams, bank: ImageBank, epochs: int, cfg: RunConfig,
                     rng: np.random.Generator, eval_bank: Optional[ImageBank] = None) -> list[dict]:
    """Plain detection-loss training, ``cfg.batch_size`` images per step (mean loss)."""
    opt = SGD(params, cfg.lr, cfg.momentum)
    rows = []
    n = len(bank)
    steps = epochs * -(-n // cfg.batch_size)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        flips = rng.integers(0, 4, size=n) if cfg.flip_aug else np.zeros(n, dtype=int)
        sums = np.zeros(4)
        for start in range(0, n, cfg.batch_size):
            batch = range(start, min(start + cfg.batch_size, n))
            total = None
            for k in batch:
                losses, g = supervised_grads(params, bank, order[k], flips[k], cfg)
                sums += (losses.l_det, losses.l_box, losses.l_obj, losses.l_cl)
                total = g if total is None else {name: total[name] + g[name] for name in g}
            opt.lr = lr_at(cfg.lr, cfg.lr_schedule, step, steps)
            opt.step(params, {name: v / len(batch) for name, v in total.items()})
            step += 1
        row = {"epoch": epoch + 1, "l_det": sums[0] / n, "l_box": sums[1] / n, "l_obj": sums[2] / n,
               "l_cl": sums[3] / n}
        if eval_bank is not None and _should_eval(epoch, epochs, cfg):
            row["eval_map"] = evaluate(params, eval_bank, cfg).mAP
        elif eval_bank is not None:
            row["eval_map"] = float("nan")
        rows.append(row)
        log.info("epoch %d %s", epoch + 1, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
    return rows


def lr_at(base: float, schedule: str, step: int, total: int) -> float:
    if schedule == "cosine" and total > 0:
        return base * 0.5 * (1.0 + np.cos(np.pi * step / total))
    return base


def _should_eval(epoch: int, epochs: int, cfg: RunConfig) -> bool:
    return cfg.eval_every > 0 and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == epochs)


@dataclass
class RunResult:
    params: ToyDetectorParams
    rows: list[dict]
    summary: dict = field(default_factory=dict)
    kept_sets: Optional[list[list[frozenset]]] = None


def _supervised_run(cfg: RunConfig, data: dict[str, Dataset], train_split: str, epochs: int,
                    name: str, write: bool) -> RunResult:
    banks = {k: ImageBank(v, cfg.grid, cfg.radius) for k, v in data.items()}
    channels = data[train_split][0].image.shape[2]
    params = make_params(cfg, channels)
    rows = train_supervised(params, banks[train_split], epochs, cfg, _stream(cfg, 2),
                            banks.get("target_test"))
    summary = {"run": name, "epochs": epochs}
    for split in ("source_test", "target_test"):
        if split in banks and len(banks[split]):
            summary[f"{split}_map"] = evaluate(params, banks[split], cfg).mAP
    if write:
        out = _prepare_output(cfg)
        save_checkpoint(params, out / f"{name}.ckpt")
        write_csv(out / f"metrics_{name}.csv", rows)
        (out / f"summary_{name}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(params, rows, summary)


def run_pretrain(cfg: RunConfig, data: Optional[dict] = None, write: bool = True) -> RunResult:
    """Supervised training on the labelled source split ("source only")."""
    return _supervised_run(cfg, data or load_data(cfg), "source_train", cfg.pretrain_epochs, "pretrain", write)


def run_oracle(cfg: RunConfig, data: Optional[dict] = None, write: bool = True) -> RunResult:
    """Supervised training on the labelled target split: the upper bound."""
    return _supervised_run(cfg, data or load_data(cfg), "target_train", cfg.oracle_epochs, "oracle", write)


# ---------------------------------------------------------------- adaptation

def epoch_plan(rng: np.random.Generator, n_source: int, n_target: int, flip_aug: bool):
    """Visiting order for one adaptation epoch: every target image once, sources cycled."""
    target_order = rng.permutation(n_target)
    source_order = np.concatenate([rng.permutation(n_source) for _ in range(-(-n_target // n_source))])[:n_target]
    if flip_aug:
        flips = rng.integers(0, 4, size=(n_target, 2))
    else:
        flips = np.zeros((n_target, 2), dtype=int)
    return source_order, target_order, flips


def pseudo_labels(pred, cfg: RunConfig, weight: float, mode: Mode):
    """NMS ranked by detector confidence, then the progressive confidence filter."""
    dets = nms(pred.detections(cfg.c_th), cfg.nms_iou, cfg.c_th, by_det)
    return filter_pseudo(dets, cfg.c_th, weight, mode)


def run_adapt(cfg: RunConfig, params: ToyDetectorParams, data: Optional[dict] = None,
              write: bool = True) -> RunResult:
    """Confidence-mixing adaptation starting from ``params`` (copied, not mutated)."""
    data = data or load_data(cfg)
    params = params.copy()
    src = ImageBank(data["source_train"], params.grid, params.radius)
    tgt = ImageBank(data["target_train"], params.grid, params.radius)
    test = ImageBank(data["target_test"], params.grid, params.radius) if "target_test" in data else None

    n_b = len(tgt)
    mode = Mode(cfg.schedule_mode)
    sched = Schedule(max(cfg.adapt_epochs, 1), n_b, cfg.alpha, mode)
    clock = Clock()
    opt = SGD(params, cfg.adapt_lr if cfg.adapt_lr is not None else cfg.lr, cfg.momentum)
    order_rng, mix_rng = _stream(cfg, 3), _stream(cfg, 4)
    strategy = MixStrategy(cfg.mix_strategy)
    height, width = data["target_train"][0].image.shape[:2]

    rows: list[dict] = []
    kept_sets: list[list[frozenset]] = []
    for epoch in range(cfg.adapt_epochs):
        # frozen diagnostics need each target image seen identically every epoch
        source_order, target_order, flips = epoch_plan(order_rng, len(src), n_b, cfg.flip_aug and not cfg.freeze)
        acc = {"l_det": 0.0, "l_cons": 0.0, "gamma": 0.0, "kept": 0, "no_mix": 0, "c_box": 0.0, "c_det": 0.0}
        epoch_sets: list[frozenset] = [frozenset()] * n_b
        for k in range(n_b):
            weight = sched.weight(clock.t)
            score = sched.selector(clock.t)
            x_s, y_s, f_s, cells_s = src.get(source_order[k], flips[k, 0])
            x_t, _, f_t, _ = tgt.get(target_order[k], flips[k, 1])

            pred_s = forward(params, feats=f_s)
            pred_t = forward(params, feats=f_t)
            dets_t = pseudo_labels(pred_t, cfg, weight, mode)
            acc["kept"] += len(dets_t)
            acc["c_box"] += sum(d.c_box for d in dets_t)
            acc["c_det"] += sum(d.c_det for d in dets_t)
            if cfg.freeze:
                epoch_sets[target_order[k]] = frozenset((d.class_id, d.box.as_tuple()) for d in dets_t)

            det_losses, dout = detection_loss(params, pred_s, cells_s, cfg.gains, cfg.raw_pdf, cfg.var_floor)
            grads = backprop(params, pred_s, dout)
            acc["l_det"] += det_losses.l_det

            plan = plan_mix(dets_t, strategy, width, height, mix_rng, score)
            if plan.no_mix:
                acc["no_mix"] += 1
            else:
                if cfg.source_labels == "gt":
                    dets_s = _gt_as_detections(y_s)
                else:
                    dets_s = pseudo_labels(pred_s, cfg, weight, mode)
                combined = combine_labels(dets_t, dets_s, plan)
                if cfg.gamma_mode == "constant":
                    gamma = cfg.gamma_const
                else:
                    gamma = consistency_weight(combined, cfg.c_th_gamma, weight, mode)
                x_m = compose(x_s, x_t, plan.mask)
                pred_m = forward(params, x_m)
                cells_m = match_targets([(d.box, d.class_id) for d in combined], params.grid)
                cons_losses, dout_m = detection_loss(params, pred_m, cells_m, cfg.gains, cfg.raw_pdf,
                                                     cfg.var_floor)
                acc["l_cons"] += cons_losses.l_det
                acc["gamma"] += gamma
                if gamma:
                    g_m = backprop(params, pred_m, dout_m)
                    grads = {name: grads[name] + gamma * g_m[name] for name in grads}

            if not cfg.freeze:
                opt.step(params, grads)
            clock.advance()

        mixed = n_b - acc["no_mix"]
        row = {
            "epoch": epoch + 1,
            "t": clock.t,
            "delta": sched.weight(clock.t),
            "l_det": acc["l_det"] / n_b,
            "l_cons": acc["l_cons"] / mixed if mixed else 0.0,
            "gamma_mean": acc["gamma"] / mixed if mixed else 0.0,
            "kept_pseudo": acc["kept"],
            "no_mix": acc["no_mix"],
            "pseudo_c_det": acc["c_det"] / acc["kept"] if acc["kept"] else 0.0,
            "pseudo_c_box": acc["c_box"] / acc["kept"] if acc["kept"] else 0.0,
        }
        if test is not None and _should_eval(epoch, cfg.adapt_epochs, cfg):
            row["target_map"] = evaluate(params, test, cfg).mAP
        elif test is not None:
            row["target_map"] = float("nan")
        rows.append(row)
        if cfg.freeze:
            kept_sets.append(epoch_sets)
        log.info("adapt epoch %d %s", epoch + 1, {k: v for k, v in row.items() if k != "epoch"})

    summary = {"run": "adapt", "epochs": cfg.adapt_epochs, "mix_strategy": strategy.value,
               "schedule_mode": mode.value, "gamma_mode": cfg.gamma_mode}
    if test is not None:
        summary["target_test_map"] = evaluate(params, test, cfg).mAP
    if write:
        out = _prepare_output(cfg)
        save_checkpoint(params, out / "adapt.ckpt")
        write_csv(out / "metrics_adapt.csv", rows)
        (out / "summary_adapt.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(params, rows, summary, kept_sets if cfg.freeze else None)


def _gt_as_detections(targets):
    return [Detection.create(GaussianBox(b, (0.0, 0.0, 0.0, 0.0)), c, 1.0) for b, c in targets]


# -------------------------------------------------------------------- sweeps

def _axis_values(axis: str) -> list:
    if axis == "mix_strategy":
        return [s.value for s in MixStrategy]
    if axis == "schedule_mode":
        return [m.value for m in Mode]
    if axis == "gamma":
        return ["dynamic", 0.2, 0.4, 0.6, 0.8, 1.0]
    if axis == "alpha":
        return [1.0, 3.0, 5.0, 10.0]
    if axis == "c_th":
        return [0.1, 0.25, 0.5, 0.7]
    if axis == "c_th_gamma":
        return [0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def _apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "gamma":
        if value == "dynamic":
            return cfg.with_overrides(gamma_mode="dynamic")
        return cfg.with_overrides(gamma_mode="constant", gamma_const=float(value))
    return cfg.with_overrides(**{axis: value})


def run_sweep(cfg: RunConfig, axis: str, values: Optional[Sequence] = None,
              params: Optional[ToyDetectorParams] = None, data: Optional[dict] = None,
              write: bool = True) -> list[dict]:
    """One adaptation run per axis value from a shared pretrained model; rows ranked by mAP."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    values = list(values) if values is not None else _axis_values(axis)
    data = data or load_data(cfg)
    if params is None:
        params = run_pretrain(cfg, data, write=False).params
    rows = []
    for value in values:
        run_cfg = _apply_axis(cfg, axis, value)
        result = run_adapt(run_cfg, params, data, write=False)
        rows.append({"axis": axis, "value": str(value), "target_map": result.summary["target_test_map"]})
    rows.sort(key=lambda r: -r["target_map"])
    for rank, r in enumerate(rows, start=1):
        r["rank"] = rank
    if write:
        out = _prepare_output(cfg)
        write_csv(out / f"sweep_{axis}.csv", rows)
    return rows


def checkpoint_or_pretrain(cfg: RunConfig, path: Optional[str], data: dict) -> ToyDetectorParams:
    if path:
        return load_checkpoint(path)
    return run_pretrain(cfg, data).params
