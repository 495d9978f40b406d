"""Experiment runner: the single-handover grid over all start
configurations, multi-handover endurance runs, interval statistics and
result files."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from scipy.stats import beta

from .config import Profile
from .errors import (
    GraspMissed,
    HandoverError,
    IoFailure,
    MaxStepsExceeded,
)
from .grasp import Axis, AxisPolicy, constant_policy, execute_grasp, oracle_policy
from .kinematics import Arm
from .servo import StereoEstimator, acquire_needle, handover_position
from .sim import (
    ActionCommand,
    Direction,
    Face,
    Grip,
    Outcome,
    SimWorld,
    StartConfig,
    TrialRecord,
    all_configs,
    build_scene,
    derive_seed,
    make_world,
)

log = logging.getLogger(__name__)

NEEDLE_RADII = {1: 0.0125, 2: 0.0175, 3: 0.0125, 4: 0.0075}
FAILURE_MODES = ("P", "X", "Y", "Timeout")
# stream tag separating trial seeds from the in-world streams
STREAM_TRIAL = 100


class Mode(enum.Enum):
    Single = "single"
    Multi = "multi"
    Fit = "fit"
    Render = "render"


class Fault(enum.Enum):
    """Injected failures for checking the failure bookkeeping."""

    Off = "none"
    ConstantX = "x-constant"  # x policy always answers +1
    ConstantY = "y-constant"
    PresentAt = "p-at"  # forced presentation failure before handover ``fault_at``


@dataclass(frozen=True)
class ExperimentSpec:
    mode: Mode = Mode.Single
    needle_id: int = 1
    direction: Direction = Direction.LeftToRight
    trials_per_config: int = 1
    base_seed: int = 0
    # explicit seeds override base_seed / trials_per_config; may be empty
    seeds: tuple | None = None
    n_max_handoffs: int | None = None  # None: the profile's value
    multi_config: Face = Face.Towards
    profile: Profile = field(default_factory=Profile)
    variant: str = "closed-loop"
    fault: Fault = Fault.Off
    fault_at: int = 0
    occlusion_radius: float | None = None
    workers: int = 1

    def __post_init__(self):
        if self.needle_id not in NEEDLE_RADII:
            raise ValueError(f"needle_id must be one of {sorted(NEEDLE_RADII)}")
        if self.trials_per_config < 1:
            raise ValueError("trials_per_config must be >= 1")
        if self.n_max_handoffs is not None and self.n_max_handoffs < 1:
            raise ValueError("n_max_handoffs must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.occlusion_radius is not None and self.occlusion_radius < 0:
            raise ValueError("occlusion_radius must be >= 0")

    @property
    def radius(self) -> float:
        r = self.profile.needle.radius
        return NEEDLE_RADII[self.needle_id] if r is None else r

    @property
    def seed_list(self) -> list[int]:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return list(range(self.base_seed, self.base_seed + self.trials_per_config))

    @property
    def n_max(self) -> int:
        return self.n_max_handoffs if self.n_max_handoffs is not None else self.profile.harness.n_max

    def echo(self) -> dict:
        return {
            "mode": self.mode.value,
            "needle_id": self.needle_id,
            "radius": self.radius,
            "direction": self.direction.value,
            "seeds": self.seed_list,
            "n_max": self.n_max,
            "multi_config": self.multi_config.value,
            "variant": self.variant,
            "fault": self.fault.value,
            "fault_at": self.fault_at,
            "occlusion_radius": self.occlusion_radius,
            "profile": self.profile.to_dict(),
        }


# -------------------------------------------------------------- statistics


def binomial_ci95(successes: int, total: int) -> tuple[float, float]:
    """Exact two-sided 95% binomial interval, in percent rounded to 0.1."""
    if total < 1 or not 0 <= successes <= total:
        raise ValueError("need 0 <= successes <= total and total >= 1")
    a = 0.05
    low = 0.0 if successes == 0 else beta.ppf(a / 2, successes, total - successes + 1)
    high = 1.0 if successes == total else beta.ppf(1 - a / 2, successes + 1, total - successes)
    return round(100.0 * float(low), 1), round(100.0 * float(high), 1)


@dataclass(frozen=True)
class ResultRow:
    variant: str
    successes: int
    total: int
    percent: float
    ci_low: float
    ci_high: float
    mean_time: float  # simulated seconds over successful trials, nan if none
    fail_p: int = 0
    fail_x: int = 0
    fail_y: int = 0
    timeout: int = 0

    @property
    def failures(self) -> dict:
        return {"P": self.fail_p, "X": self.fail_x, "Y": self.fail_y, "Timeout": self.timeout}


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    trials: list = field(default_factory=list)


def summarize(variant: str, records: list) -> ResultRow | None:
    """Aggregate trial records into one row; ``None`` for no records."""
    if not records:
        return None
    total = len(records)
    ok = [r for r in records if r.outcome is Outcome.Success]
    counts = {m: sum(1 for r in records if r.outcome.value == m) for m in FAILURE_MODES}
    lo, hi = binomial_ci95(len(ok), total)
    mean_time = sum(r.elapsed for r in ok) / len(ok) if ok else math.nan
    return ResultRow(variant, len(ok), total, round(100.0 * len(ok) / total, 1), lo, hi, mean_time,
                     counts["P"], counts["X"], counts["Y"], counts["Timeout"])


# ------------------------------------------------------------------ trials


def world_seed(seed: int, config_index: int, direction: Direction) -> int:
    return derive_seed(seed, STREAM_TRIAL, config_index, list(Direction).index(direction))


def build_world(spec: ExperimentSpec, config: StartConfig, seed: int, config_index: int,
                direction: Direction, scene=None) -> SimWorld:
    prof = spec.profile
    world = make_world(config, spec.radius, world_seed(seed, config_index, direction), prof.noise,
                       scene or build_scene(prof.scene), direction, prof.needle.arc_extent)
    world.occlusion_radius = spec.occlusion_radius
    return world


def _policies(spec: ExperimentSpec, world: SimWorld) -> tuple[AxisPolicy, AxisPolicy]:
    flip = spec.profile.noise.label_flip
    x = oracle_policy(Axis.X, world, flip)
    y = oracle_policy(Axis.Y, world, flip)
    if spec.fault is Fault.ConstantX:
        x = constant_policy(Axis.X)
    elif spec.fault is Fault.ConstantY:
        y = constant_policy(Axis.Y)
    return x, y


class _ForcedFailure(HandoverError):
    pass


def attempt_handover(spec: ExperimentSpec, world: SimWorld) -> tuple[Outcome, str]:
    """One transfer from the current holder to the other arm, failures
    classified as P / X / Y."""
    holder = world.holder
    prof = spec.profile
    estimator = StereoEstimator(spec.radius, prof.ransac)
    try:
        if spec.fault is Fault.PresentAt and world.handovers == spec.fault_at:
            raise _ForcedFailure(f"injected presentation failure at handover {spec.fault_at}")
        est = acquire_needle(world, holder, prof.servo, estimator)
        est = handover_position(world, holder, prof.servo, estimator, estimate=est)
    except HandoverError as exc:
        return Outcome.FailP, f"{type(exc).__name__}: {exc}"
    x, y = _policies(spec, world)
    try:
        execute_grasp(world, holder.other, prof.grasp, est, x, y)
    except GraspMissed as exc:
        return Outcome(exc.mode), f"GraspMissed: {exc}"
    except MaxStepsExceeded as exc:
        return Outcome(exc.axis), f"MaxStepsExceeded: {exc}"
    except HandoverError as exc:
        # pre-grasp unreachable or the receiving gripper left the view
        return Outcome.FailP, f"{type(exc).__name__}: {exc}"
    return Outcome.Success, ""


def run_trial(spec: ExperimentSpec, config_index: int, seed: int, scene=None) -> TrialRecord:
    """Acquire, position and grasp once; a success taking more than
    ``max_steps`` timesteps counts as Timeout."""
    config = all_configs()[config_index]
    world = build_world(spec, config, seed, config_index, spec.direction, scene)
    latency = spec.profile.harness.step_latency
    outcome, detail = attempt_handover(spec, world)
    elapsed = world.clock * latency
    if outcome is Outcome.Success and world.clock > spec.profile.harness.max_steps:
        outcome, detail = Outcome.Timeout, f"took {world.clock} steps"
    return TrialRecord(config, outcome, 1 if outcome is Outcome.Success else 0, world.clock,
                       elapsed, seed, spec.direction, detail)


def _return_home(world: SimWorld, arm: Arm) -> None:
    world.step(ActionCommand.single(arm, world.scene.homes[arm], 0))


def run_multi_trial(spec: ExperimentSpec, seed: int, scene=None) -> TrialRecord:
    """Pass the needle back and forth until a failure or ``n_max``
    handovers. ``elapsed`` is the mean simulated time per completed
    handover."""
    config = StartConfig(spec.multi_config, Grip.Tip, 0)
    index = all_configs().index(config)
    world = build_world(spec, config, seed, index, spec.direction, scene)
    latency = spec.profile.harness.step_latency
    limit = spec.profile.harness.max_steps
    done, outcome, detail = 0, Outcome.Success, ""
    completed_clock = 0
    while done < spec.n_max:
        start = world.clock
        giver = world.holder
        outcome, detail = attempt_handover(spec, world)
        if outcome is Outcome.Success and world.clock - start > limit:
            outcome, detail = Outcome.Timeout, f"handover {done} over the step limit"
        if outcome is not Outcome.Success:
            break
        done += 1
        completed_clock = world.clock
        _return_home(world, giver)
    # mean over completed handovers; the failed attempt is not counted
    elapsed = completed_clock * latency / done if done else 0.0
    return TrialRecord(config, outcome, done, world.clock, elapsed, seed, spec.direction, detail)


def _single_task(args):
    spec, config_index, seed = args
    return run_trial(spec, config_index, seed)


def _multi_task(args):
    spec, seed = args
    return run_multi_trial(spec, seed)


def _run_tasks(fn, tasks, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def run_single_grid(spec: ExperimentSpec) -> ResultTable:
    """Every start configuration once per seed; one summary row."""
    configs = all_configs()
    tasks = [(spec, i, s) for s in spec.seed_list for i in range(len(configs))]
    records = _run_tasks(_single_task, tasks, spec.workers)
    records.sort(key=lambda r: (r.config.sort_key(), r.seed))
    row = summarize(spec.variant, records)
    return ResultTable([row] if row else [], records)


@dataclass(frozen=True)
class MultiRow:
    variant: str
    config: str
    trials: int
    mean_count: float
    std_count: float
    mean_time: float
    fail_p: int = 0
    fail_x: int = 0
    fail_y: int = 0
    timeout: int = 0
    completed: int = 0  # trials reaching n_max


@dataclass
class MultiTable:
    rows: list = field(default_factory=list)
    trials: list = field(default_factory=list)
    n_max: int = 50


def run_multi(spec: ExperimentSpec) -> MultiTable:
    tasks = [(spec, s) for s in spec.seed_list]
    records = _run_tasks(_multi_task, tasks, spec.workers)
    records.sort(key=lambda r: r.seed)
    table = MultiTable([], records, spec.n_max)
    if records:
        counts = [r.handovers_completed for r in records]
        mean = sum(counts) / len(counts)
        var = sum((c - mean) ** 2 for c in counts) / (len(counts) - 1) if len(counts) > 1 else 0.0
        timed = [r.elapsed for r in records if r.handovers_completed]
        fails = {m: sum(1 for r in records if r.outcome.value == m) for m in FAILURE_MODES}
        table.rows.append(MultiRow(
            spec.variant, spec.multi_config.value, len(records), mean, math.sqrt(var),
            sum(timed) / len(timed) if timed else math.nan,
            fails["P"], fails["X"], fails["Y"], fails["Timeout"],
            sum(1 for r in records if r.outcome is Outcome.Success)))
    return table


def failure_label(record: TrialRecord) -> str:
    """Terminal failure mode; ``-`` when the run never failed."""
    return "-" if record.outcome is Outcome.Success else record.outcome.value


# ------------------------------------------------------------------ output


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.2f}"
    return str(v)


TRIAL_COLUMNS = ("config", "seed", "direction", "outcome", "handovers", "steps", "sim_time", "detail")


def trials_csv(records: list) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(TRIAL_COLUMNS)
    for r in records:
        wr.writerow([r.config.key if r.config else "", r.seed, r.direction.value, failure_label(r),
                     r.handovers_completed, r.steps, _fmt(r.elapsed), r.detail])
    return buf.getvalue()


def _json_ready(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    return obj


def summary_dict(table, spec: ExperimentSpec | None = None) -> dict:
    out = {"simulated_time": True}
    if isinstance(table, MultiTable):
        out["kind"] = "multi"
        out["n_max"] = table.n_max
        out["rows"] = [vars(r).copy() for r in table.rows]
    else:
        out["kind"] = "single"
        out["rows"] = [dict(vars(r)) for r in table.rows]
    if spec is not None:
        out["spec"] = spec.echo()
    return _json_ready(out)


def _atomic_write(path: Path, text: str) -> None:
    tmp = None
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def emit_results(table, out_dir, spec: ExperimentSpec | None = None, stem: str = "results") -> list[Path]:
    """Write ``<stem>_trials.csv`` (one row per trial) and
    ``<stem>_summary.json`` into ``out_dir``, each atomically."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {out}: {exc}") from exc
    if not out.is_dir():
        raise IoFailure(f"{out} is not a directory")
    csv_path = out / f"{stem}_trials.csv"
    json_path = out / f"{stem}_summary.json"
    _atomic_write(csv_path, trials_csv(table.trials))
    _atomic_write(json_path, json.dumps(summary_dict(table, spec), indent=2, sort_keys=True) + "\n")
    return [csv_path, json_path]


def format_table(table) -> str:
    """Plain-text rendering of the summary rows for the terminal."""
    if isinstance(table, MultiTable):
        lines = [f"{'variant':<14}{'config':<9}{'trials':>7}{'mean':>8}{'std':>7}"
                 f"{'time/ho':>9}{'P':>4}{'X':>4}{'Y':>4}{'T':>4}{'full':>6}"]
        for r in table.rows:
            lines.append(f"{r.variant:<14}{r.config:<9}{r.trials:>7}{r.mean_count:>8.2f}{r.std_count:>7.2f}"
                         f"{_fmt(r.mean_time):>9}{r.fail_p:>4}{r.fail_x:>4}{r.fail_y:>4}{r.timeout:>4}"
                         f"{r.completed:>6}")
        return "\n".join(lines)
    lines = [f"{'variant':<14}{'success':>10}{'percent':>9}{'95% CI':>15}{'time':>8}"
             f"{'P':>4}{'X':>4}{'Y':>4}{'T':>4}"]
    for r in table.rows:
        ci = f"{r.ci_low:.1f}-{r.ci_high:.1f}"
        lines.append(f"{r.variant:<14}{f'{r.successes}/{r.total}':>10}{r.percent:>9.1f}{ci:>15}"
                     f"{_fmt(r.mean_time):>8}{r.fail_p:>4}{r.fail_x:>4}{r.fail_y:>4}{r.timeout:>4}")
    return "\n".join(lines)
