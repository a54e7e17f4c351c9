"""Composite objective and the three-stage optimization protocol.

Stage one grounds the Gaussian tokens (depth) while pretraining the action
head against detached conditioning; stage two turns on chain supervision and
couples everything; stage three fine-tunes the whole stack at a lower rate.
Every stochastic choice in a step comes from a generator seeded by
(base_seed, stage index, step), so runs are resumable and bit-reproducible.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, vocab
from . import pipeline as pl
from .autodiff import ParamStore, Tape

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
CLIP_NORM = 1.0
DIVERGENCE_LIMIT = 1e4
METRICS_HEADER = "step,total,flow,cot,depth,grad_norm"


class TrainingDiverged(RuntimeError):
    """Loss left the finite / bounded regime; the last saved state stands."""


@dataclass(frozen=True)
class StagePlan:
    stage: str                     # "S1" | "S2" | "S3"
    trainable: tuple[str, ...]     # named parameter groups updated this stage
    active_losses: tuple[str, ...]  # subset of {"flow", "cot", "depth"}
    steps: int
    learning_rate: float
    batch_size: int

    def __post_init__(self):
        if self.stage not in ("S1", "S2", "S3"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        bad = set(self.trainable) - set(pl.PARAM_GROUPS)
        if bad or not self.trainable:
            raise ValueError(f"invalid trainable groups {self.trainable}")
        bad = set(self.active_losses) - {"flow", "cot", "depth"}
        if bad or not self.active_losses:
            raise ValueError(f"invalid active losses {self.active_losses}")
        if self.stage == "S1":
            if "reasoner" in self.trainable:
                raise ValueError("the first stage keeps the reasoner frozen")
            if "cot" in self.active_losses:
                raise ValueError("the first stage trains without chain supervision")
        else:
            if set(self.active_losses) != {"flow", "cot", "depth"}:
                raise ValueError(f"{self.stage} must enable all three losses")
        if self.stage == "S3" and set(self.trainable) != set(pl.PARAM_GROUPS):
            raise ValueError("the final stage fine-tunes every parameter group")


def default_plans(
    steps: tuple[int, int, int] = (4000, 2000, 1000),
    batches: tuple[int, int, int] = (16, 8, 4),
) -> tuple[StagePlan, StagePlan, StagePlan]:
    """The desk-scale protocol: step counts and batches scaled down together,
    learning rates kept at their original per-stage values."""
    every = tuple(pl.PARAM_GROUPS)
    return (
        StagePlan("S1", ("gst", "expert"), ("flow", "depth"), steps[0], 3e-4, batches[0]),
        StagePlan("S2", every, ("flow", "cot", "depth"), steps[1], 1e-4, batches[1]),
        StagePlan("S3", every, ("flow", "cot", "depth"), steps[2], 3e-5, batches[2]),
    )


def ablation_plans() -> tuple[StagePlan, StagePlan, StagePlan]:
    """Reduced protocol for the ablation grid (each cell is a full pipeline)."""
    return default_plans(steps=(400, 250, 120), batches=(16, 8, 4))


def plan_to_dict(plan: StagePlan) -> dict:
    return {
        "stage": plan.stage,
        "trainable": list(plan.trainable),
        "active_losses": list(plan.active_losses),
        "steps": plan.steps,
        "learning_rate": plan.learning_rate,
        "batch_size": plan.batch_size,
    }


def plan_from_dict(d: dict) -> StagePlan:
    known = {"stage", "trainable", "active_losses", "steps", "learning_rate", "batch_size"}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown stage-plan keys: {sorted(extra)}")
    missing = known - set(d)
    if missing:
        raise ValueError(f"stage plan missing keys: {sorted(missing)}")
    return StagePlan(
        stage=d["stage"],
        trainable=tuple(d["trainable"]),
        active_losses=tuple(d["active_losses"]),
        steps=int(d["steps"]),
        learning_rate=float(d["learning_rate"]),
        batch_size=int(d["batch_size"]),
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer over a fixed set of named parameters.

    Parameters missing a gradient this step (an expert no token routed to,
    say) are treated as having a zero gradient so moment decay and the step
    count stay uniform across the set.
    """

    def __init__(self, store: ParamStore, names: list[str], lr: float):
        self.store = store
        self.names = sorted(names)
        self.lr = float(lr)
        self.m = {n: np.zeros_like(store[n].data) for n in self.names}
        self.v = {n: np.zeros_like(store[n].data) for n in self.names}
        self.t = 0

    def step(self, clip_norm: float = CLIP_NORM) -> float:
        """One update over all named parameters; returns the pre-clip norm."""
        grads = {}
        sq = 0.0
        for n in self.names:
            g = self.store[n].grad
            if g is None:
                g = np.zeros_like(self.store[n].data)
            grads[n] = g
            sq += float((g * g).sum())
        norm = float(np.sqrt(sq))
        scale = 1.0 if norm <= clip_norm or norm == 0.0 else clip_norm / norm
        self.t += 1
        c1 = 1.0 - BETA1**self.t
        c2 = 1.0 - BETA2**self.t
        for n in self.names:
            g = grads[n] * scale
            self.m[n] = BETA1 * self.m[n] + (1.0 - BETA1) * g
            self.v[n] = BETA2 * self.v[n] + (1.0 - BETA2) * g * g
            p = self.store[n]
            p.data = p.data - self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + EPS)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.names:
            out[f"adam_m/{n}"] = self.m[n]
            out[f"adam_v/{n}"] = self.v[n]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for n in self.names:
            self.m[n] = np.asarray(arrays[f"adam_m/{n}"], dtype=np.float64).reshape(
                self.m[n].shape
            )
            self.v[n] = np.asarray(arrays[f"adam_v/{n}"], dtype=np.float64).reshape(
                self.v[n].shape
            )
        self.t = int(t)


# ---------------------------------------------------------------------------
# composite objective
# ---------------------------------------------------------------------------


def step_rng(base_seed: int, stage_idx: int, step: int) -> np.random.Generator:
    """Stateless per-step generator: resume never disturbs the draw sequence."""
    return np.random.default_rng([int(base_seed), int(stage_idx), int(step)])


def stage_flags(cfg: pl.PipelineConfig, plan: StagePlan) -> vocab.ChainFlags:
    """Chain layout a stage trains against; chain-free stages see structure only.

    Batches fed to :func:`composite_loss` must be collated with these flags.
    """
    return cfg.chain_flags if "cot" in plan.active_losses else vocab.ChainFlags.none()


def composite_loss(
    store: ParamStore,
    cfg: pl.PipelineConfig,
    batch: pl.Batch,
    plan: StagePlan,
    rng: np.random.Generator,
):
    """Weighted sum of the active loss terms plus a float breakdown.

    Draw order is fixed (depth pixels per scene, then flow noise, then flow
    times) so logs are reproducible.  A non-finite component aborts the step
    naming the offender.
    """
    flags = stage_flags(cfg, plan)
    detach = plan.stage == "S1"
    tokens = pl.scene_tokens(store, cfg, batch)
    depth_t = pl.depth_term(store, cfg, tokens, batch, rng) if "depth" in plan.active_losses else None
    cot_t, h_ctx, h_plan = pl.chain_and_conditioning(store, cfg, tokens, batch, flags, detach)
    flow_t = pl.flow_term(store, cfg, batch, h_ctx, h_plan, rng)

    total = flow_t
    if cot_t is not None and "cot" in plan.active_losses:
        total = total + cot_t * cfg.lambda_cot
    else:
        cot_t = None
    if depth_t is not None:
        total = total + depth_t * cfg.lambda_depth

    parts = {
        "flow": float(flow_t.data),
        "cot": float(cot_t.data) if cot_t is not None else 0.0,
        "depth": float(depth_t.data) if depth_t is not None else 0.0,
        "total": float(total.data),
    }
    for name in ("flow", "cot", "depth"):
        if not np.isfinite(parts[name]):
            raise TrainingDiverged(f"{name} loss is non-finite")
    return total, parts


# ---------------------------------------------------------------------------
# checkpoints and integrity
# ---------------------------------------------------------------------------


def group_checksum(store: ParamStore, group: str) -> str:
    h = hashlib.sha256()
    for name in pl.group_names(store, group):
        h.update(name.encode())
        h.update(np.ascontiguousarray(store[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(
    path, store: ParamStore, cfg: pl.PipelineConfig, meta: dict, adam: Adam | None = None
) -> None:
    arrays = {f"param/{k}": v for k, v in store.state_arrays().items()}
    meta = dict(meta)
    meta["config"] = cfg.to_dict()
    if adam is not None:
        arrays.update(adam.state_arrays())
        meta["adam_t"] = adam.t
        meta["adam_lr"] = adam.lr
    checkpoint.save(path, arrays, meta)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return checkpoint.load(path)


def restore_params(store: ParamStore, arrays: dict[str, np.ndarray]) -> None:
    store.load_state(
        {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    )


# ---------------------------------------------------------------------------
# stage runner
# ---------------------------------------------------------------------------


def run_stage(
    store: ParamStore,
    cfg: pl.PipelineConfig,
    plan: StagePlan,
    stage_idx: int,
    train_scenes: list,
    out_dir,
    base_seed: int,
    *,
    start_step: int = 0,
    adam_init: tuple[dict, int] | None = None,
    checkpoint_every: int = 250,
    progress=None,
) -> dict:
    """One optimization stage: fixed plan, per-step metric lines, checkpoints.

    Returns a summary including wall time and frozen-group checksums.  The
    metrics file is created fresh at step 0 and appended to on resume.
    """
    if not train_scenes:
        raise ValueError("training set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / f"metrics_{plan.stage.lower()}.csv"
    ck_path = out_dir / f"checkpoint_{plan.stage.lower()}.ck"

    trainable = sorted(
        n for g in plan.trainable for n in pl.group_names(store, g)
    )
    adam = Adam(store, trainable, plan.learning_rate)
    if adam_init is not None:
        adam.load_state(adam_init[0], adam_init[1])

    frozen = [g for g in pl.PARAM_GROUPS if g not in plan.trainable]
    before = {g: group_checksum(store, g) for g in frozen}
    flags = stage_flags(cfg, plan)

    t0 = time.monotonic()
    mode = "w" if start_step == 0 else "a"
    parts = {"total": float("nan"), "flow": float("nan"), "cot": 0.0, "depth": 0.0}
    with open(metrics_path, mode) as log:
        if start_step == 0:
            log.write(METRICS_HEADER + "\n")
        for step in range(start_step, plan.steps):
            rng = step_rng(base_seed, stage_idx, step)
            idx = rng.choice(
                len(train_scenes), size=plan.batch_size,
                replace=len(train_scenes) < plan.batch_size,
            )
            batch = pl.collate([train_scenes[i] for i in idx], flags)
            store.zero_grad()
            with Tape() as tape:
                total, parts = composite_loss(store, cfg, batch, plan, rng)
                if parts["total"] > DIVERGENCE_LIMIT:
                    raise TrainingDiverged(
                        f"total loss {parts['total']:.3e} exceeded {DIVERGENCE_LIMIT:.0e} "
                        f"at step {step} of {plan.stage}; last saved checkpoint stands"
                    )
                tape.backward(total)
            gnorm = adam.step(CLIP_NORM)
            log.write(
                f"{step},{parts['total']:.12e},{parts['flow']:.12e},"
                f"{parts['cot']:.12e},{parts['depth']:.12e},{gnorm:.12e}\n"
            )
            log.flush()
            if progress is not None:
                progress(plan.stage, step, parts)
            done = step + 1
            if done % checkpoint_every == 0 or done == plan.steps:
                save_checkpoint(
                    ck_path, store, cfg,
                    {
                        "stage": plan.stage, "stage_idx": stage_idx, "step": done,
                        "plan": asdict(plan), "base_seed": int(base_seed),
                    },
                    adam,
                )

    after = {g: group_checksum(store, g) for g in frozen}
    if after != before:
        raise RuntimeError(
            f"frozen groups changed during {plan.stage}: "
            f"{[g for g in frozen if after[g] != before[g]]}"
        )
    return {
        "stage": plan.stage,
        "steps": plan.steps,
        "wall_time_s": time.monotonic() - t0,
        "final": parts,
        "frozen_groups": frozen,
        "frozen_checksums": after,
        "checkpoint": str(ck_path),
        "metrics": str(metrics_path),
    }


def train_all(
    store: ParamStore,
    cfg: pl.PipelineConfig,
    plans,
    train_scenes: list,
    val_scenes: list,
    out_dir,
    base_seed: int,
    *,
    skip_s1: bool = False,
    resume_from=None,
    checkpoint_every: int = 250,
    progress=None,
    eval_after_each: bool = True,
) -> dict:
    """Run the staged protocol end to end, optionally resuming mid-stage.

    Stage indices are fixed at 1, 2, 3 by name even when stage one is
    skipped, so random streams never depend on which stages ran.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plans = [p for p in plans if not (skip_s1 and p.stage == "S1")]
    if not plans:
        raise ValueError("no stages to run")

    resume_stage, resume_step, adam_init = None, 0, None
    if resume_from is not None:
        arrays, meta = load_checkpoint(resume_from)
        restore_params(store, arrays)
        resume_stage = meta["stage"]
        resume_step = int(meta["step"])
        if any(k.startswith("adam_m/") for k in arrays):
            adam_init = (arrays, int(meta["adam_t"]))

    summaries = []
    evals = {}
    t0 = time.monotonic()
    seen_resume = resume_stage is None
    for plan in plans:
        stage_idx = int(plan.stage[1])
        if not seen_resume:
            if plan.stage != resume_stage:
                continue  # stage already completed before the checkpoint
            seen_resume = True
            if resume_step >= plan.steps:
                continue
            summaries.append(
                run_stage(
                    store, cfg, plan, stage_idx, train_scenes, out_dir, base_seed,
                    start_step=resume_step, adam_init=adam_init,
                    checkpoint_every=checkpoint_every, progress=progress,
                )
            )
        else:
            summaries.append(
                run_stage(
                    store, cfg, plan, stage_idx, train_scenes, out_dir, base_seed,
                    checkpoint_every=checkpoint_every, progress=progress,
                )
            )
        util = pl.router_utilization(
            store, cfg, train_scenes[: plan.batch_size], base_seed
        )
        summaries[-1]["router_utilization"] = [float(u) for u in util]
        if eval_after_each and val_scenes:
            evals[plan.stage] = pl.evaluate(
                store, cfg, val_scenes, base_seed,
                with_chain=plan.stage != "S1",
            )
    return {
        "stages": summaries,
        "eval": evals,
        "wall_time_s": time.monotonic() - t0,
        "skip_s1": skip_s1,
    }


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_CELLS = {
    "full": {},
    "pe_learned2d": {"tokenizer": {"pe_mode": "learned2d"}},
    "pool_average": {"tokenizer": {"pool_mode": "average"}},
    "alpha_fixed_one": {"tokenizer": {"opacity_mode": "fixed_one"}},
    "no_cot": {"chain_c1": False, "chain_c2": False, "chain_c3": False, "chain_c4": False},
    "no_s1": {"skip_s1": True},
}


def cell_config(base: pl.PipelineConfig, name: str) -> tuple[pl.PipelineConfig, bool]:
    """Resolve a named grid cell to a pipeline config and a stage-skip flag."""
    if name not in ABLATION_CELLS:
        raise ValueError(
            f"unknown ablation cell {name!r}; choose from {sorted(ABLATION_CELLS)}"
        )
    spec = dict(ABLATION_CELLS[name])
    skip_s1 = spec.pop("skip_s1", False)
    d = base.to_dict()
    for key, val in spec.items():
        if isinstance(val, dict):
            d[key] = {**d[key], **val}
        else:
            d[key] = val
    return pl.PipelineConfig.from_dict(d), skip_s1


def ablation_matrix(
    cells: list[str],
    base_cfg: pl.PipelineConfig,
    plans,
    train_scenes: list,
    val_scenes: list,
    out_dir,
    seed: int,
    *,
    checkpoint_every: int = 250,
    progress=None,
) -> list[dict]:
    """One complete (reduced-scale) pipeline per cell, all from the same seed.

    Returns one row per cell with the validation metrics and the scalar
    composite used for direction checks.
    """
    out_dir = Path(out_dir)
    rows = []
    for name in cells:
        cfg, skip_s1 = cell_config(base_cfg, name)
        store = ParamStore(seed)
        pl.build_params(store, cfg)
        summary = train_all(
            store, cfg, plans, train_scenes, val_scenes, out_dir / name, seed,
            skip_s1=skip_s1, checkpoint_every=checkpoint_every,
            progress=progress, eval_after_each=False,
        )
        metrics = pl.evaluate(store, cfg, val_scenes, seed)
        rows.append(
            {
                "cell": name,
                **{k: v for k, v in metrics.items() if k != "figure_data"},
                "composite": pl.composite_metric(metrics),
                "wall_time_s": summary["wall_time_s"],
            }
        )
    return rows
