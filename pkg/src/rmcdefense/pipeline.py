"""Multi-stage RMC-based optimization: staged adversarial training, curve
connections, optimal-region sampling and final selection, with lineage.

Stage layout for norms [a, b] (two norms) or [a, b, c] (three norms):

1. ``at``      adversarial training of one model per norm (or, with ``srmc``,
               one base model followed by a ``srmc`` stage of short fine-tunes)
2. ``rmc``     curve(s) between endpoint pairs, attacked with the pair's norms
3. ``select``  sweep each curve, pick region(s) around the best DLR, sample t
4. ``at``      adversarial training from the sampled points
5. ``rmc``     one curve between the two new models, attacked with all norms
6. ``select``  sweep, return the model at the best-DLR t
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attack import DEFAULT_BUDGETS, EVAL_STEPS, TRAIN_STEPS, UNIT_BOX, make_specs
from .checkpoint import Checkpoint, save_checkpoint
from .curve import CurveParams, curve_point
from .data import Dataset
from .errors import UsageError
from .evalkit import SweepTable, path_sweep
from .model import ArchSpec, ModelParams, init_params
from .numcore import RngStream, parse_norm, splitmix64_mix
from .train import TrainConfig, adversarial_train, rmc_train

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A stage failed; the lineage up to and including the failure was persisted."""

    def __init__(self, message: str, lineage: "Lineage"):
        super().__init__(message)
        self.lineage = lineage


@dataclass
class PipelineConfig:
    norms: list = field(default_factory=lambda: ["linf", "l2"])
    T: int = 30
    rmc_epochs: int = 20
    grid_n: int = 11
    region_width: float = 0.03
    mid_points: int = 1
    srmc: bool = False
    srmc_epochs: int = 5
    seed: int = 0
    hidden: list = field(default_factory=lambda: [32, 32])
    lr_at: float = 0.1
    lr_curve: float = 0.01
    batch_size: int = 64
    train_steps: int = TRAIN_STEPS
    eval_steps: int = EVAL_STEPS
    budgets: dict = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    pairs: list | None = None

    def __post_init__(self):
        self.norms = [parse_norm(n) for n in self.norms]
        if not 2 <= len(self.norms) <= 3 or len(set(self.norms)) != len(self.norms):
            raise UsageError("pipeline needs 2 or 3 distinct norms")
        if not 0.0 < self.region_width < 0.5:
            raise UsageError("region_width must lie in (0, 0.5)")
        if self.grid_n < 3:
            raise UsageError("grid_n must be at least 3")
        if self.mid_points not in (1, 2):
            raise UsageError("mid_points must be 1 or 2")
        if min(self.T, self.rmc_epochs, self.srmc_epochs) < 0:
            raise UsageError("epoch counts must be nonnegative")
        self.budgets = {**DEFAULT_BUDGETS, **{parse_norm(k): float(v) for k, v in self.budgets.items()}}
        if self.pairs is None:
            self.pairs = default_pairs(self.norms)
        self.pairs = [[parse_norm(a), parse_norm(b)] for a, b in self.pairs]
        if len(self.norms) == 3:
            if len(self.pairs) != 2:
                raise UsageError("three-norm pipelines need exactly two endpoint pairs")
            for pair in self.pairs:
                if len(set(pair)) != 2 or not set(pair) <= set(self.norms):
                    raise UsageError(f"pair {pair} must hold two distinct configured norms")
            if held_out(self.norms, self.pairs[0]) == held_out(self.norms, self.pairs[1]):
                raise UsageError("the two pairs must leave out different norms")
        elif [sorted(p) for p in self.pairs] != [sorted(self.norms)]:
            raise UsageError("a two-norm pipeline connects exactly its two norms")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown pipeline config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def default_pairs(norms) -> list:
    """Three norms [a, b, c] connect (b, c) and (a, c); two norms connect (a, b)."""
    if len(norms) == 2:
        return [list(norms)]
    a, b, c = norms
    return [[b, c], [a, c]]


def held_out(norms, pair) -> str:
    return next(n for n in norms if n not in pair)


@dataclass
class StageRecord:
    stage_id: int
    kind: str
    parent_ids: list
    artifact_path: str
    chosen_t: list | None = None
    metrics: dict = field(default_factory=dict)


@dataclass
class Lineage:
    stages: list = field(default_factory=list)

    def add(self, kind: str, parent_ids, artifact_path: str = "", chosen_t=None, metrics=None) -> StageRecord:
        stage_id = len(self.stages) + 1
        for p in parent_ids:
            if not 1 <= p < stage_id:
                raise UsageError(f"stage {stage_id} cannot depend on stage {p}")
        rec = StageRecord(stage_id, kind, list(parent_ids), artifact_path, chosen_t, metrics or {})
        self.stages.append(rec)
        return rec

    def roots(self) -> list[int]:
        return [s.stage_id for s in self.stages if not s.parent_ids]

    def to_dict(self) -> dict:
        return {"stages": [asdict(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "Lineage":
        lin = cls()
        for s in d["stages"]:
            rec = lin.add(s["kind"], s["parent_ids"], s["artifact_path"], s.get("chosen_t"), s.get("metrics"))
            if rec.stage_id != s["stage_id"]:
                raise UsageError("lineage stage ids must be 1..N in order")
        return lin

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def select_optimal_region(sweep: SweepTable, w: float) -> tuple[float, float]:
    """[t* - w, t* + w] clipped to [0, 1], t* the best-DLR grid point (smallest t on ties)."""
    if not sweep.rows:
        raise UsageError("cannot select a region from an empty sweep")
    t_star = sweep.best().t
    return max(0.0, t_star - w), min(1.0, t_star + w)


def select_regions(sweep: SweepTable, w: float, k: int) -> list[tuple[float, float]]:
    """Up to ``k`` regions around the best DLR grid points, each centre more than
    2w away from the previously chosen ones.

    Greedy over local DLR peaks first (by DLR, then t), then the remaining
    points, so a second region lands on a separate optimum when there is one.
    """
    if not sweep.rows:
        raise UsageError("cannot select a region from an empty sweep")
    ts = sweep.column("t")
    d = sweep.column("dlr")
    padded = np.concatenate([[-np.inf], d, [-np.inf]])
    peak = (d >= padded[:-2]) & (d >= padded[2:])
    order = sorted(range(len(ts)), key=lambda i: (not peak[i], -d[i], ts[i]))
    centres: list[float] = []
    for i in order:
        if all(abs(ts[i] - c) > 2 * w for c in centres):
            centres.append(float(ts[i]))
        if len(centres) == k:
            break
    return [(max(0.0, c - w), min(1.0, c + w)) for c in centres]


def sample_in(region: tuple[float, float], stream: RngStream) -> float:
    lo, hi = region
    return lo + stream.uniform() * (hi - lo)


def _task_seed(seed: int, stage_id: int, task: int) -> int:
    return splitmix64_mix((seed ^ (stage_id << 16) ^ task) & ((1 << 64) - 1))


class _Runner:
    def __init__(self, cfg: PipelineConfig, train: Dataset, test: Dataset, workdir, jobs: int):
        self.cfg = cfg
        self.train = train
        self.test = test
        self.workdir = Path(workdir) if workdir is not None else None
        self.jobs = max(1, int(jobs))
        self.lineage = Lineage()
        self.arch = ArchSpec.mlp([train.d, *cfg.hidden, train.classes])
        self.sweeps: dict[int, dict[str, SweepTable]] = {}

    # -- helpers -----------------------------------------------------------

    def specs(self, norms, steps):
        return make_specs(norms, self.cfg.budgets, steps)

    def stage_dir(self, stage_id: int) -> str:
        rel = f"stage_{stage_id}"
        if self.workdir is not None:
            (self.workdir / rel).mkdir(parents=True, exist_ok=True)
        return rel

    def write(self, rel: str, name: str, obj, **meta):
        if self.workdir is None:
            return
        path = self.workdir / rel / name
        if isinstance(obj, SweepTable):
            obj.write_csv(path)
        elif isinstance(obj, (ModelParams, CurveParams)):
            save_checkpoint(Checkpoint.of(obj, seed=self.cfg.seed, **meta), path)
        else:
            path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")

    def persist(self):
        if self.workdir is not None:
            self.lineage.save(self.workdir / "lineage.json")

    def parallel(self, fns):
        if self.jobs == 1 or len(fns) == 1:
            return [f() for f in fns]
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return [fut.result() for fut in [pool.submit(f) for f in fns]]

    def train_cfg(self, lr, epochs, stage_id, task) -> TrainConfig:
        return TrainConfig(lr, epochs, self.cfg.batch_size, _task_seed(self.cfg.seed, stage_id, task))

    def at_job(self, init: ModelParams, norm: str, epochs: int, stage_id: int, task: int):
        def job():
            hist = []
            cfg = self.train_cfg(self.cfg.lr_at, epochs, stage_id, task)
            out = adversarial_train(init, self.train, cfg, self.specs([norm], self.cfg.train_steps), UNIT_BOX, hist)
            return out, [h.train_loss for h in hist]
        return job

    def rmc_job(self, a, b, norms, stage_id, task):
        def job():
            hist = []
            cfg = self.train_cfg(self.cfg.lr_curve, self.cfg.rmc_epochs, stage_id, task)
            out = rmc_train(a, b, self.train, cfg, self.specs(norms, self.cfg.train_steps), UNIT_BOX, hist)
            return out, [h.train_loss for h in hist]
        return job

    def sweep_job(self, curve, norms):
        return lambda: path_sweep(curve, self.test, self.specs(norms, self.cfg.eval_steps), self.cfg.grid_n)

    def stage(self, kind, parents, body):
        """Run ``body(stage_id, rel_dir) -> (chosen_t, metrics)`` and record it."""
        stage_id = len(self.lineage.stages) + 1
        rel = self.stage_dir(stage_id)
        log.info("stage %d (%s) starting", stage_id, kind)
        try:
            chosen_t, metrics = body(stage_id, rel)
        except Exception as exc:
            self.lineage.add(kind, parents, rel, None, {"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
            self.persist()
            raise PipelineError(f"stage {stage_id} ({kind}) failed: {exc}", self.lineage) from exc
        metrics = {"status": "ok", **metrics}
        self.write(rel, "metrics.json", metrics)
        self.lineage.add(kind, parents, rel, chosen_t, metrics)
        self.persist()
        return stage_id

    # -- stages ------------------------------------------------------------

    def initial_models(self) -> tuple[dict, list[int]]:
        cfg = self.cfg
        models: dict[str, ModelParams] = {}

        def train_initial(stage_id, rel):
            norms = cfg.norms[:1] if cfg.srmc else cfg.norms
            inits = [init_params(self.arch, RngStream.derived(cfg.seed, 1000 + k)) for k in range(len(norms))]
            results = self.parallel(
                [self.at_job(inits[k], n, cfg.T, stage_id, k) for k, n in enumerate(norms)]
            )
            metrics = {"epochs": cfg.T, "models": {}}
            for n, (m, losses) in zip(norms, results):
                models[n] = m
                self.write(rel, f"checkpoint_{n}.json", m, stage_id=stage_id, norm=n, epochs_trained=cfg.T)
                metrics["models"][n] = {"train_loss": losses}
            return None, metrics

        first = self.stage("at", [], train_initial)
        if not cfg.srmc:
            return models, [first]

        def proliferate(stage_id, rel):
            base = models[cfg.norms[0]]
            rest = cfg.norms[1:]
            results = self.parallel(
                [self.at_job(base, n, cfg.srmc_epochs, stage_id, k) for k, n in enumerate(rest)]
            )
            metrics = {"epochs": cfg.srmc_epochs, "base_norm": cfg.norms[0], "models": {}}
            for n, (m, losses) in zip(rest, results):
                models[n] = m
                self.write(rel, f"checkpoint_{n}.json", m, stage_id=stage_id, norm=n,
                           epochs_trained=cfg.T + cfg.srmc_epochs)
                metrics["models"][n] = {"train_loss": losses}
            return None, metrics

        return models, [first, self.stage("srmc", [first], proliferate)]

    def connect(self, pairs, ends, parents, all_norms: bool) -> tuple[int, list[CurveParams]]:
        curves: list[CurveParams] = []

        def body(stage_id, rel):
            jobs = []
            for k, (a, b) in enumerate(pairs):
                norms = self.cfg.norms if all_norms else [a, b]
                jobs.append(self.rmc_job(ends[a], ends[b], norms, stage_id, k))
            results = self.parallel(jobs)
            metrics = {"epochs": self.cfg.rmc_epochs, "curves": {}}
            for (a, b), (curve, losses) in zip(pairs, results):
                curves.append(curve)
                name = f"{a}_{b}"
                self.write(rel, f"checkpoint_{name}.json", curve, stage_id=stage_id,
                           epochs_trained=self.cfg.rmc_epochs)
                metrics["curves"][name] = {"train_loss": losses,
                                           "attack_norms": self.cfg.norms if all_norms else [a, b]}
            return None, metrics

        return self.stage("rmc", parents, body), curves

    def choose(self, curves, pairs, parent, n_samples: int) -> tuple[int, list[float]]:
        chosen: list[float] = []

        def body(stage_id, rel):
            stream = RngStream.derived(self.cfg.seed, stage_id)
            sweeps = self.parallel([self.sweep_job(c, p) for c, p in zip(curves, pairs)])
            metrics = {"curves": {}}
            self.sweeps[stage_id] = {}
            for (a, b), sweep in zip(pairs, sweeps):
                name = f"{a}_{b}"
                self.sweeps[stage_id][name] = sweep
                self.write(rel, f"sweep_{name}.csv", sweep)
                k = n_samples if len(curves) == 1 else 1
                regions = select_regions(sweep, self.cfg.region_width, k)
                if len(regions) < k:
                    regions = regions + [regions[-1]] * (k - len(regions))
                ts = [sample_in(r, stream) for r in regions]
                chosen.extend(ts)
                best = sweep.best()
                metrics["curves"][name] = {"best_t": best.t, "best_dlr": best.dlr,
                                           "regions": [list(r) for r in regions], "sampled_t": ts}
            return list(chosen), metrics

        return self.stage("select", [parent], body), chosen

    def finish(self, curve: CurveParams, parent: int) -> tuple[int, ModelParams]:
        result: list[ModelParams] = []

        def body(stage_id, rel):
            sweep = path_sweep(curve, self.test, self.specs(self.cfg.norms, self.cfg.eval_steps), self.cfg.grid_n)
            self.sweeps[stage_id] = {"final": sweep}
            self.write(rel, "sweep_final.csv", sweep)
            best = sweep.best()
            model = curve_point(curve, best.t)
            result.append(model)
            self.write(rel, "checkpoint.json", model, stage_id=stage_id, t=best.t)
            return [best.t], {"best_t": best.t, "best_dlr": best.dlr, "row": asdict(best)}

        return self.stage("select", [parent], body), result[0]

    def run(self) -> ModelParams:
        cfg = self.cfg
        if self.workdir is not None:
            self.workdir.mkdir(parents=True, exist_ok=True)
            (self.workdir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
        ends, roots = self.initial_models()
        rmc1, curves = self.connect(cfg.pairs, ends, roots, all_norms=False)
        sel1, ts = self.choose(curves, cfg.pairs, rmc1, cfg.mid_points)

        if len(cfg.norms) == 2:
            a, b = cfg.norms
            starts = [curve_point(curves[0], ts[0]), curve_point(curves[0], ts[-1])]
            branch_norms = [a, b]
        else:
            starts = [curve_point(c, t) for c, t in zip(curves, ts)]
            branch_norms = [held_out(cfg.norms, p) for p in cfg.pairs]
        new_ends: dict[str, ModelParams] = {}

        def branches(stage_id, rel):
            results = self.parallel(
                [self.at_job(s, n, cfg.T, stage_id, k) for k, (s, n) in enumerate(zip(starts, branch_norms))]
            )
            metrics = {"epochs": cfg.T, "models": {}}
            for n, t, (m, losses) in zip(branch_norms, ts if len(ts) == 2 else ts * 2, results):
                new_ends[n] = m
                self.write(rel, f"checkpoint_{n}.json", m, stage_id=stage_id, norm=n, start_t=t,
                           epochs_trained=cfg.T)
                metrics["models"][n] = {"train_loss": losses, "start_t": t}
            return None, metrics

        at2 = self.stage("at", [sel1], branches)
        final_pair = [branch_norms]
        rmc2, final_curves = self.connect(final_pair, new_ends, [at2], all_norms=True)
        _, model = self.finish(final_curves[0], rmc2)
        return model


def run_rmc_optimization(cfg: PipelineConfig, train: Dataset, test: Dataset | None = None,
                         workdir=None, jobs: int = 1):
    """Run the staged optimization; returns ``(final_params, lineage)``.

    Sweeps are evaluated on ``test`` (``train`` when omitted). With ``workdir``
    every stage writes its checkpoints, sweeps and ``metrics.json`` under
    ``workdir/stage_<id>/`` and ``workdir/lineage.json`` is rewritten after
    each stage, including a failed one.
    """
    runner = _Runner(cfg, train, test if test is not None else train, workdir, jobs)
    return runner.run(), runner.lineage
