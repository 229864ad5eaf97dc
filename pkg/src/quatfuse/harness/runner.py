"""Training, evaluation and the ablation matrix."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import numcore as nc
from .. import synthgen, toydet
from ..numcore import ConfigError, NonFiniteError
from .config import RunConfig, config_hash
from .data import Sample, load_split, model_config, without_lidar

CSV_HEADER = ("run_id", "config_hash", "variant", "seed", "step", "loss", "toy_ap",
              "lidar_present", "wall_ms")
AXES = ("components", "framework", "quaternion_axis", "quafa_depth", "dims", "robustness")


@dataclass
class MetricsRecord:
    run_id: str
    config_hash: str
    variant: str
    seed: int
    step: int
    loss: float
    toy_ap: float
    lidar_present: bool
    wall_ms: float

    def as_row(self) -> list[str]:
        return [self.run_id, self.config_hash, self.variant, str(self.seed), str(self.step),
                repr(float(self.loss)), repr(float(self.toy_ap)),
                "true" if self.lidar_present else "false", f"{self.wall_ms:.1f}"]


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    probe: dict = field(default_factory=dict)
    failure: str | None = None

    @property
    def steps_done(self) -> int:
        return len(self.losses)


@dataclass
class RunResult:
    variant: str
    seed: int
    config: RunConfig
    train: TrainResult
    toy_ap: dict  # lidar_present flag -> AP (nan after a failed run)
    finite_outputs: dict  # lidar_present flag -> every eval output finite
    wall_ms: float
    model: object = field(default=None, repr=False, compare=False)


def build_model(cfg: RunConfig, seed: int) -> toydet.ToyDetector:
    return toydet.ToyDetector(model_config(cfg, seed), [synthgen.default_camera()])


def _forward(model, sample: Sample):
    return model(sample.images, sample.depths, sample.bev,
                 camera_only=model.cfg.chain.mode == "camera_only")


def sample_loss(model, sample: Sample) -> nc.Tensor:
    pred = _forward(model, sample)
    return toydet.detection_loss(pred, sample.gt, model.grid_spec, sample.targets)


def mean_loss(model, samples: list[Sample]) -> float:
    with nc.no_grad():
        return float(np.mean([sample_loss(model, s).item() for s in samples]))


def scene_index(seed: int, step: int, n: int) -> int:
    """Training scene used at ``step``: a fresh seeded shuffle every epoch."""
    epoch, k = divmod(step, n)
    return int(np.random.default_rng([seed, 0x5EED, epoch]).permutation(n)[k])


def train_model(model, cfg: RunConfig, seed: int, samples: list[Sample], start: int = 0,
                stop: int | None = None) -> TrainResult:
    """Momentum SGD over steps ``start..stop`` of the seeded scene schedule.

    The loss and gradient norm are checked after every step; the first
    non-finite value stops training and is reported in ``failure``. The
    mean loss over the first ``probe_scenes`` training scenes is recorded
    at step 0 and at ``probe_step`` when those fall inside the range.
    """
    stop = cfg.steps if stop is None else stop
    res = TrainResult()
    opt = toydet.SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.clip_norm)
    probe = samples[:cfg.probe_scenes]
    for step in range(start, stop):
        if step in (0, cfg.probe_step):
            res.probe[step] = mean_loss(model, probe)
        loss = sample_loss(model, samples[scene_index(seed, step, len(samples))])
        try:
            nc.check_finite(loss, f"loss at step {step}")
            nc.backward(loss)
            opt.step()
        except NonFiniteError as exc:
            res.failure = str(exc)
            return res
        finally:
            opt.zero_grad()
        res.losses.append(loss.item())
    if stop == cfg.probe_step:
        res.probe[stop] = mean_loss(model, probe)
    return res


def evaluate(model, samples: list[Sample], cfg: RunConfig) -> tuple[float, bool]:
    """Pooled toy AP over ``samples`` and whether every output was finite."""
    dets, gts, finite = [], [], True
    with nc.no_grad():
        for s in samples:
            pred = _forward(model, s)
            finite &= bool(np.isfinite(pred.heat_logits.data).all()
                           and np.isfinite(pred.sizes.data).all())
            dets.append(toydet.extract_peaks(pred.heatmap, model.grid_spec,
                                             cfg.peak_threshold))
            gts.append(s.gt)
    return toydet.average_precision(dets, gts, cfg.match_radius), finite


_FUSION_FIELDS = ("fusion_mode", "dae", "gae_enc", "gae_dec", "qua_fa", "plain_mixer", "axis",
                  "dae_hidden", "gae_hidden", "depth_state_channels", "gae_quaternion")
_pretrained: dict = {}


def _camera_key(cfg: RunConfig, seed: int) -> str:
    base = RunConfig(**{k: v for k, v in cfg.to_dict().items()
                        if k not in _FUSION_FIELDS}).replace(fusion_mode="camera_only")
    return f"{config_hash(base)}:{seed}"


def inherited_start(cfg: RunConfig, seed: int, samples: list[Sample]):
    """Camera-only weights after ``inherit_steps`` steps, shared by all variants of a seed."""
    key = _camera_key(cfg, seed)
    if key not in _pretrained:
        cam = build_model(cfg.replace(fusion_mode="camera_only"), seed)
        tr = train_model(cam, cfg, seed, samples, 0, cfg.inherit_steps)
        _pretrained.clear()
        _pretrained[key] = ({k: t.data.copy() for k, t in cam.parameters().items()}, tr)
    return _pretrained[key]


def run_single(cfg: RunConfig, variant: str, seed: int,
               eval_lidar: tuple[bool, ...] | None = None) -> RunResult:
    """Train one model on the training split and score it on the held-out split.

    With ``inherit_steps > 0`` the model starts from the camera-only
    detector trained for that many steps (its zero-initialized integrators
    leave that detector's output unchanged) and trains for the rest.
    """
    t0 = time.perf_counter()
    if eval_lidar is None:
        eval_lidar = (cfg.lidar_present,)
    train = load_split(cfg, "train")
    held = load_split(cfg.replace(lidar_present=True), "eval")
    model = build_model(cfg, seed)
    start = 0
    tr = TrainResult()
    if cfg.inherit_steps > 0:
        weights, pre = inherited_start(cfg, seed, train)
        params = model.parameters()
        for name, arr in weights.items():
            params[name].data[...] = arr
        tr = TrainResult(list(pre.losses), dict(pre.probe), pre.failure)
        start = cfg.inherit_steps
    if tr.failure is None:
        rest = train_model(model, cfg, seed, train, start, cfg.steps)
        tr.losses += rest.losses
        tr.probe.update(rest.probe)
        tr.failure = rest.failure
    aps, finite = {}, {}
    for flag in eval_lidar:
        if tr.failure is not None:
            aps[flag], finite[flag] = math.nan, False
            continue
        samples = held if flag else [without_lidar(s) for s in held]
        aps[flag], finite[flag] = evaluate(model, samples, cfg)
    return RunResult(variant, seed, cfg, tr, aps, finite, (time.perf_counter() - t0) * 1e3, model)


def records(run: RunResult) -> list[MetricsRecord]:
    cfg = run.config
    h = config_hash(cfg)
    tr = run.train
    if tr.failure is not None:
        loss = math.nan
    else:
        loss = float(np.mean(tr.losses[-cfg.loss_window:])) if tr.losses else math.nan
    out = []
    for flag, ap in run.toy_ap.items():
        tag = "" if len(run.toy_ap) == 1 else ("-lidar" if flag else "-nolidar")
        out.append(MetricsRecord(f"{h[:12]}-{run.variant}-s{run.seed}{tag}", h, run.variant,
                                 run.seed, tr.steps_done, loss, ap, flag, run.wall_ms))
    return out


# --------------------------------------------------------------------------
# ablation matrix


def variants(base: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    """Named configurations enumerated along one ablation axis."""
    if axis == "components":
        out = []
        for dae in (False, True):
            for enc in (False, True):
                for dec in (False, True):
                    name = "+".join(n for n, on in (("dae", dae), ("gae_enc", enc),
                                                    ("gae_dec", dec)) if on) or "none"
                    out.append((name, base.replace(dae=dae, gae_enc=enc, gae_dec=dec)))
        return out
    if axis == "framework":
        return [(m, base.replace(fusion_mode=m)) for m in
                ("progressive", "separate", "deep_summation", "input_summation",
                 "camera_only")]
    if axis == "quaternion_axis":
        return [(a, base.replace(axis=a)) for a in ("lidar_on_i", "lidar_on_r")]
    if axis == "quafa_depth":
        return [(q, base.replace(qua_fa=q)) for q in ("off", "first_layer", "depth:2", "all")]
    if axis == "dims":
        d, g = base.dae_hidden, base.gae_hidden
        out = [(f"dae{v}", base.replace(dae_hidden=v)) for v in (max(1, d // 2), d, d * 2)]
        out += [(f"gae{v}", base.replace(gae_hidden=v)) for v in (max(1, g // 2), g * 2)]
        return out
    if axis == "robustness":
        return [("base", base)]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def _job(args):
    """All variants of one seed, in order, so they share the inherited start."""
    group, seed, eval_lidar = args
    out = []
    for name, cfg in group:
        run = run_single(cfg, name, seed, eval_lidar)
        run.model = None  # keep results small when they cross process boundaries
        out.append(run)
    return out


def resolve_workers(requested: int, n_jobs: int) -> int:
    n = requested if requested > 0 else (os.cpu_count() or 1)
    return max(1, min(n, n_jobs))


def run_variants(named: list[tuple[str, RunConfig]], seeds, eval_lidar=None,
                 workers: int = 0) -> list[RunResult]:
    """Train and score every (variant, seed); one worker process per seed when useful.

    Results are ordered variant-major, then by seed, whatever the finishing order.
    """
    jobs = [(named, seed, eval_lidar) for seed in seeds]
    n = resolve_workers(workers, len(jobs))
    if n == 1:
        per_seed = [_job(j) for j in jobs]
    else:
        import multiprocessing as mp

        with ProcessPoolExecutor(max_workers=n, mp_context=mp.get_context("spawn")) as pool:
            per_seed = list(pool.map(_job, jobs))
    return [per_seed[s][v] for v in range(len(named)) for s in range(len(jobs))]


@dataclass
class AblationReport:
    axis: str
    runs: list
    rows: list
    csv_path: str | None = None


def run_ablation_matrix(base: RunConfig, axis: str, out_dir: str | None = None,
                        workers: int | None = None) -> AblationReport:
    """Train every variant of ``axis`` for every seed; one CSV row per (variant, seed).

    The robustness axis evaluates each model with and without LiDAR, giving
    two rows per seed. A run whose loss goes non-finite yields a row with
    NaN loss and AP; the remaining runs continue.
    """
    eval_lidar = (True, False) if axis == "robustness" else None
    runs = run_variants(variants(base, axis), base.seeds, eval_lidar,
                        base.workers if workers is None else workers)
    rows = [r for run in runs for r in records(run)]
    path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"ablation_{axis}.csv")
        write_csv(path, rows)
        write_manifest(out_dir, base, {"axis": axis, "csv": os.path.basename(path),
                                       "variants": [n for n, _ in variants(base, axis)]})
    return AblationReport(axis, runs, rows, path)


def write_csv(path: str, rows: list[MetricsRecord], append: bool = False) -> None:
    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not exists:
            w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.as_row())


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_manifest(out_dir: str, cfg: RunConfig, extra: dict | None = None) -> str:
    data = {"config": cfg.to_dict(), "config_hash": config_hash(cfg)}
    data.update(extra or {})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# --------------------------------------------------------------------------
# checkpoints: manifest.json plus one QFT1 snapshot per parameter


def save_checkpoint(directory: str, model, cfg: RunConfig, seed: int) -> None:
    tdir = os.path.join(directory, "tensors")
    os.makedirs(tdir, exist_ok=True)
    params = {}
    for name, t in sorted(model.parameters().items()):
        fname = f"{name}.qft"
        nc.save_tensor(os.path.join(tdir, fname), t)
        params[name] = {"file": f"tensors/{fname}", "shape": list(t.shape)}
    write_manifest(directory, cfg, {"seed": seed, "parameters": params})


def load_checkpoint(directory: str):
    """Rebuild the model recorded in ``directory``; returns (model, cfg, seed)."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        man = json.load(fh)
    cfg = RunConfig(**man["config"])
    seed = int(man["seed"])
    model = build_model(cfg, seed)
    params = model.parameters()
    if set(params) != set(man["parameters"]):
        raise ConfigError("checkpoint parameters do not match the configured model")
    for name, info in man["parameters"].items():
        t = nc.load_tensor(os.path.join(directory, info["file"]))
        if t.shape != params[name].shape:
            raise ConfigError(f"{name}: checkpoint shape {t.shape} vs model {params[name].shape}")
        params[name].data[...] = t.data
    return model, cfg, seed
