"""Monte Carlo engine for controlled branching diffusions.

The engine follows the jump-time induction construction: every living
particle carries an exponential clock at the dominating rate; between clock
rings all particles advance in lockstep by Euler-Maruyama steps of at most
the configured step size, with a final partial step landing exactly on the
ring time; at a ring the affected particle draws a uniform mark on
[0, rate_bound] which is classified against its offspring intervals
(thinning): marks at or above the local death rate are phantoms, the lowest
interval is a death, interval l replaces the particle by l children at its
position.  This makes event times exact in law; only the diffusion between
events carries O(step) weak bias.

Per-particle randomness comes from keyed streams (see :mod:`branchdiff.rng`),
so a rerun with the same seed reproduces the path bit for bit, and two runs
with different coefficients but one seed are coupled through identical
Brownian increments, clocks and marks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ExplosionGuardError
from .labels import Label, assert_antichain, children
from .model import ModelParams, offspring_boundaries
from .rng import RandomDriver

_TIME_EPS = 1e-12


# ---------------------------------------------------------------------------
# policies

class ConstantPolicy:
    """Apply one control index to every particle at all times."""

    def __init__(self, control: int):
        self.control = int(control)

    def constant_control(self) -> int | None:
        return self.control

    def control_at(self, t: float, x: np.ndarray, label: Label) -> int:
        return self.control

    def controls_along(self, times: np.ndarray, xs: np.ndarray, label: Label) -> np.ndarray:
        return np.full(len(times), self.control, dtype=np.int64)

    def __eq__(self, other):
        return isinstance(other, ConstantPolicy) and other.control == self.control


class OpenLoopPolicy:
    """Deterministic piecewise-constant control schedules, optionally per label.

    A schedule is (switch_times, controls) with switch_times ascending;
    controls[j] applies on [switch_times[j], switch_times[j+1]).  Labels
    without their own schedule use the default one.
    """

    def __init__(self, default: tuple, per_label: dict[Label, tuple] | None = None):
        self.default = self._check(default)
        self.per_label = {k: self._check(v) for k, v in (per_label or {}).items()}

    @staticmethod
    def _check(schedule):
        times, ctrls = schedule
        times = np.asarray(times, dtype=float)
        ctrls = np.asarray(ctrls, dtype=np.int64)
        if len(times) != len(ctrls) or len(times) == 0:
            raise ConfigurationError("schedule needs matching, non-empty times and controls")
        if np.any(np.diff(times) <= 0):
            raise ConfigurationError("schedule switch times must be strictly increasing")
        return times, ctrls

    def constant_control(self) -> int | None:
        return None

    def _schedule(self, label: Label):
        return self.per_label.get(label, self.default)

    def control_at(self, t: float, x: np.ndarray, label: Label) -> int:
        times, ctrls = self._schedule(label)
        idx = int(np.searchsorted(times, t, side="right")) - 1
        return int(ctrls[max(idx, 0)])

    def controls_along(self, times_q: np.ndarray, xs: np.ndarray, label: Label) -> np.ndarray:
        times, ctrls = self._schedule(label)
        idx = np.searchsorted(times, times_q, side="right") - 1
        return ctrls[np.clip(idx, 0, len(ctrls) - 1)]


# ---------------------------------------------------------------------------
# path records

@dataclass
class JumpEvent:
    time: float
    label: Label
    mark: float
    kind: str            # "phantom" | "death" | "branch"
    n_children: int
    position: np.ndarray
    pop_size_after: int
    cost_integral_after: float


@dataclass
class Segment:
    """Lockstep trajectory slice between consecutive potential jump times.

    All particles alive during the slice share the time grid, so positions
    align row-wise across labels.  ``cost_cum`` is the running-cost integral
    from the start of the whole path, sampled at the grid times.
    """

    times: np.ndarray                      # (K+1,)
    positions: dict[Label, np.ndarray]     # label -> (K+1, d)
    controls: dict[Label, np.ndarray]      # label -> (K,) control indices
    cost_cum: np.ndarray                   # (K+1,)


@dataclass
class PopulationPath:
    start_time: float
    horizon: float
    initial: dict[Label, np.ndarray]
    final: dict[Label, np.ndarray]
    events: list[JumpEvent]
    cost_integral: float
    sup_population: int
    population_record: list[tuple[float, int]]
    seed: int
    n_steps: int
    segments: list[Segment] | None = field(default=None, repr=False)

    @property
    def extinct(self) -> bool:
        return not self.final

    def trajectory(self, label: Label) -> tuple[np.ndarray, np.ndarray]:
        """Sampled (times, positions) over the particle's lifespan."""
        if self.segments is None:
            raise ValueError("path was simulated without trajectory recording")
        ts, xs = [], []
        for seg in self.segments:
            if label not in seg.positions:
                continue
            if ts:
                ts.append(seg.times[1:])
                xs.append(seg.positions[label][1:])
            else:
                ts.append(seg.times)
                xs.append(seg.positions[label])
        if not ts:
            raise KeyError(f"label {label!r} never alive on this path")
        return np.concatenate(ts), np.concatenate(xs, axis=0)

    def state_after_event(self, idx: int) -> tuple[float, dict[Label, np.ndarray], float]:
        """Population and cost integral immediately after event ``idx``."""
        if self.segments is None:
            raise ValueError("path was simulated without trajectory recording")
        seg = self.segments[idx]
        ev = self.events[idx]
        pop = {lab: seg.positions[lab][-1] for lab in seg.positions}
        if ev.kind == "death":
            del pop[ev.label]
        elif ev.kind == "branch":
            del pop[ev.label]
            for child in children(ev.label, ev.n_children):
                pop[child] = ev.position
        return ev.time, pop, ev.cost_integral_after

    def equals(self, other: "PopulationPath") -> bool:
        """Bitwise path equality (the determinism contract)."""
        if (self.start_time != other.start_time or self.horizon != other.horizon
                or self.cost_integral != other.cost_integral
                or self.sup_population != other.sup_population
                or self.n_steps != other.n_steps
                or self.population_record != other.population_record
                or len(self.events) != len(other.events)
                or sorted(self.initial) != sorted(other.initial)
                or sorted(self.final) != sorted(other.final)):
            return False
        for lab in self.initial:
            if not np.array_equal(self.initial[lab], other.initial[lab]):
                return False
        for lab in self.final:
            if not np.array_equal(self.final[lab], other.final[lab]):
                return False
        for a, b in zip(self.events, other.events):
            if (a.time != b.time or a.label != b.label or a.mark != b.mark
                    or a.kind != b.kind or a.n_children != b.n_children
                    or a.pop_size_after != b.pop_size_after
                    or a.cost_integral_after != b.cost_integral_after
                    or not np.array_equal(a.position, b.position)):
                return False
        if (self.segments is None) != (other.segments is None):
            return False
        if self.segments is not None:
            if len(self.segments) != len(other.segments):
                return False
            for sa, sb in zip(self.segments, other.segments):
                if not np.array_equal(sa.times, sb.times):
                    return False
                if sorted(sa.positions) != sorted(sb.positions):
                    return False
                for lab in sa.positions:
                    if not np.array_equal(sa.positions[lab], sb.positions[lab]):
                        return False
                    if not np.array_equal(sa.controls[lab], sb.controls[lab]):
                        return False
                if not np.array_equal(sa.cost_cum, sb.cost_cum):
                    return False
        return True


# ---------------------------------------------------------------------------
# pathwise cost functionals

def pathwise_cost(path: PopulationPath, params: ModelParams) -> float:
    """Discount factor times the product of terminal costs over survivors.

    An extinct population contributes an empty product, i.e. one.
    """
    value = math.exp(-path.cost_integral)
    for x in path.final.values():
        value *= params.terminal_at(x)
    return value


def pathwise_cost_log_form(path: PopulationPath, params: ModelParams) -> float:
    """Same functional written through logarithms; requires a positive
    terminal cost at every surviving particle.  Serves as a consistency
    oracle for :func:`pathwise_cost`."""
    log_total = -path.cost_integral
    for x in path.final.values():
        g = params.terminal_at(x)
        if g <= 0.0:
            raise ValueError("log-form cost undefined: terminal cost is zero "
                             f"at position {np.asarray(x).tolist()}")
        log_total += math.log(g)
    return math.exp(log_total)


# ---------------------------------------------------------------------------
# simulation

@dataclass
class _MotionPlan:
    const_control: int | None
    motion_control: int | None   # control used for motion when control-independent
    linear: bool
    draw_noise: bool
    query_in_loop: bool
    vector_controls: bool
    b_const: np.ndarray | None = None
    sig_const: np.ndarray | None = None


def _make_plan(policy, params: ModelParams) -> _MotionPlan:
    const = 0 if len(params.controls) == 1 else policy.constant_control()
    if const is not None:
        motion_ctrl = const
    elif params.motion_control_independent():
        motion_ctrl = 0
    else:
        motion_ctrl = None
    linear = motion_ctrl is not None and params.motion_state_independent(motion_ctrl)
    if motion_ctrl is not None:
        draw_noise = not params.diffusion[motion_ctrl].is_zero
    else:
        draw_noise = not params.diffusion_is_zero()
    plan = _MotionPlan(
        const_control=const,
        motion_control=motion_ctrl,
        linear=linear,
        draw_noise=draw_noise,
        query_in_loop=motion_ctrl is None,
        vector_controls=const is None and motion_ctrl is not None,
    )
    if linear:
        origin = np.zeros(params.dim)
        plan.b_const = params.drift_at(origin, motion_ctrl)
        plan.sig_const = params.diffusion_at(origin, motion_ctrl)
    return plan


def _step_grid(t0: float, t1: float, step: float) -> np.ndarray:
    span = t1 - t0
    n_full = int(math.floor(span / step + 1e-9))
    grid = t0 + step * np.arange(n_full + 1)
    if span - n_full * step > _TIME_EPS * max(1.0, abs(t1)):
        grid = np.append(grid, t1)
    else:
        grid[-1] = t1
    return grid


def _segment_costs(params: ModelParams, xs_left: np.ndarray, ctrls: np.ndarray) -> np.ndarray:
    """Per-step running cost of one particle, left-endpoint evaluation."""
    out = np.empty(len(ctrls))
    for a in np.unique(ctrls):
        mask = ctrls == a
        out[mask] = params.running_cost_many(xs_left[mask], int(a))
    return out


class _Simulation:
    def __init__(self, t, initial, policy, params: ModelParams, step, horizon, seed,
                 population_cap, record_paths):
        if step <= 0:
            raise ConfigurationError("step size must be positive")
        if t > horizon:
            raise ConfigurationError("start time exceeds horizon")
        init = {}
        for lab, x in initial.items():
            pos = np.atleast_1d(np.asarray(x, dtype=float))
            if pos.shape != (params.dim,):
                raise ConfigurationError(
                    f"position for label {lab!r} has shape {pos.shape}, "
                    f"expected ({params.dim},)")
            init[tuple(lab)] = pos
        assert_antichain(init.keys())
        self.params = params
        self.policy = policy
        self.step = float(step)
        self.start = float(t)
        self.horizon = float(horizon)
        self.cap = int(population_cap)
        self.record = bool(record_paths)
        self.seed = int(seed)
        self.plan = _make_plan(policy, params)
        self.driver = RandomDriver(seed)
        self.pop = init
        self.rings: dict[Label, float] = {}
        self.current = float(t)
        self.cost = 0.0
        self.events: list[JumpEvent] = []
        self.segments: list[Segment] | None = [] if record_paths else None
        self.pop_record: list[tuple[float, int]] = [(float(t), len(init))]
        self.sup_n = len(init)
        self.n_steps = 0
        self.initial_snapshot = {lab: pos.copy() for lab, pos in init.items()}
        self.last_controls: dict[Label, int] = {}
        # event geometry is position-free for many models; cache it per control
        self._static_geom: dict[int, tuple[float, np.ndarray]] = {}
        origin = np.zeros(params.dim)
        for a in params.controls.indices:
            if (params.death_rate[a].state_independent
                    and all(p.state_independent for p in params.offspring[a])):
                self._static_geom[a] = (params.death_rate_at(origin, a),
                                        offspring_boundaries(origin, a, params))

    def _spawn_clock(self, label: Label) -> None:
        if self.params.rate_bound <= 0.0:
            self.rings[label] = math.inf
        else:
            gap = self.driver.event_stream(label).exponential(1.0 / self.params.rate_bound)
            self.rings[label] = self.current + gap

    def run(self) -> PopulationPath:
        for lab in self.pop:
            self._spawn_clock(lab)
        while self.pop:
            next_time = min(self.rings.values())
            if next_time >= self.horizon:
                self._advance(self.horizon)
                self.current = self.horizon
                break
            self._advance(next_time)
            self.current = next_time
            self._fire_event()
        final = {lab: pos.copy() for lab, pos in self.pop.items()}
        return PopulationPath(
            start_time=self.start, horizon=self.horizon,
            initial=self.initial_snapshot, final=final,
            events=self.events, cost_integral=self.cost,
            sup_population=self.sup_n, population_record=self.pop_record,
            seed=self.seed, n_steps=self.n_steps, segments=self.segments,
        )

    # -- between-event diffusion ----------------------------------------------

    def _advance(self, target: float) -> None:
        params = self.params
        if target <= self.current + _TIME_EPS * max(1.0, abs(target)):
            self.last_controls = {}
            if self.record:
                times = np.array([self.current])
                self.segments.append(Segment(
                    times=times,
                    positions={lab: pos[None, :].copy() for lab, pos in self.pop.items()},
                    controls={lab: np.empty(0, dtype=np.int64) for lab in self.pop},
                    cost_cum=np.array([self.cost]),
                ))
            return
        grid = _step_grid(self.current, target, self.step)
        n_steps = len(grid) - 1
        deltas = np.diff(grid)
        sqrt_d = np.sqrt(deltas)
        positions: dict[Label, np.ndarray] = {}
        controls: dict[Label, np.ndarray] = {}
        for lab, x0 in self.pop.items():
            xs, ctrls = self._advance_particle(lab, x0, grid, deltas, sqrt_d)
            positions[lab] = xs
            controls[lab] = ctrls
            self.pop[lab] = xs[-1]
        self.last_controls = {lab: int(c[-1]) for lab, c in controls.items()}
        self.n_steps += n_steps * len(positions)
        step_cost = np.zeros(n_steps)
        if not params.cost_is_zero():
            for lab, xs in positions.items():
                step_cost += _segment_costs(params, xs[:-1], controls[lab])
        seg_cost = np.concatenate(([0.0], np.cumsum(step_cost * deltas)))
        new_cost = self.cost + seg_cost[-1]
        if self.record:
            self.segments.append(Segment(
                times=grid, positions=positions, controls=controls,
                cost_cum=self.cost + seg_cost,
            ))
        self.cost = new_cost

    def _advance_particle(self, lab, x0, grid, deltas, sqrt_d):
        params, plan = self.params, self.plan
        n_steps = len(grid) - 1
        dw = None
        if plan.draw_noise:
            z = self.driver.motion_stream(lab).standard_normal((n_steps, params.noise_dim))
            dw = z * sqrt_d[:, None]
        if plan.linear:
            xs = np.empty((n_steps + 1, params.dim))
            xs[:] = x0
            xs += (grid - grid[0])[:, None] * plan.b_const
            if dw is not None:
                xs[1:] += np.cumsum(dw, axis=0) @ plan.sig_const.T
        else:
            xs = np.empty((n_steps + 1, params.dim))
            xs[0] = x0
            x = x0
            if plan.query_in_loop:
                ctrls = np.empty(n_steps, dtype=np.int64)
                for k in range(n_steps):
                    a = self.policy.control_at(grid[k], x, lab)
                    ctrls[k] = a
                    x = x + params.drift_at(x, a) * deltas[k]
                    if dw is not None:
                        x = x + params.diffusion_at(x, a) @ dw[k]
                    xs[k + 1] = x
                return xs, ctrls
            a = plan.motion_control
            for k in range(n_steps):
                x = x + params.drift_at(x, a) * deltas[k]
                if dw is not None:
                    x = x + params.diffusion_at(x, a) @ dw[k]
                xs[k + 1] = x
        if plan.const_control is not None:
            ctrls = np.full(n_steps, plan.const_control, dtype=np.int64)
        else:
            ctrls = np.asarray(
                self.policy.controls_along(grid[:-1], xs[:-1], lab), dtype=np.int64)
        return xs, ctrls

    # -- events ----------------------------------------------------------------

    def _fire_event(self) -> None:
        params = self.params
        target = min(self.rings.items(), key=lambda kv: (kv[1], kv[0]))
        lab = target[0]
        x = self.pop[lab]
        # control in force at the ring: the last Euler step's left-endpoint
        # control, falling back to a fresh query for zero-length advances
        a = self.last_controls.get(lab)
        if a is None:
            if self.plan.const_control is not None:
                a = self.plan.const_control
            else:
                a = self.policy.control_at(self.current, x, lab)
        mark = float(self.driver.event_stream(lab).uniform(0.0, params.rate_bound))
        geom = self._static_geom.get(a)
        if geom is not None:
            gamma, bounds = geom
        else:
            gamma = params.death_rate_at(x, a)
            bounds = None
        if gamma > params.rate_bound + 1e-9:
            raise ConfigurationError(
                f"death rate {gamma} exceeds the dominating rate {params.rate_bound} "
                f"at x={x.tolist()}, control {a}")
        if mark >= gamma:
            kind, n_children = "phantom", 0
            self._spawn_clock(lab)
        else:
            if bounds is None:
                bounds = offspring_boundaries(x, a, params)
            k = int(np.searchsorted(bounds, mark, side="right")) - 1
            k = min(max(k, 0), params.max_children)
            del self.pop[lab]
            del self.rings[lab]
            if k == 0:
                kind, n_children = "death", 0
            else:
                kind, n_children = "branch", k
                for child in children(lab, k):
                    self.pop[child] = x.copy()
                    self._spawn_clock(child)
            self.pop_record.append((self.current, len(self.pop)))
        self.sup_n = max(self.sup_n, len(self.pop))
        self.events.append(JumpEvent(
            time=self.current, label=lab, mark=mark, kind=kind,
            n_children=n_children, position=x.copy(),
            pop_size_after=len(self.pop), cost_integral_after=self.cost,
        ))
        if len(self.pop) > self.cap:
            raise ExplosionGuardError(
                f"population {len(self.pop)} exceeded cap {self.cap} "
                f"at time {self.current}",
                time_reached=self.current, population=len(self.pop),
                n_events=len(self.events))


def write_path_csv(path: PopulationPath, file) -> None:
    """Dump the event log and terminal population as CSV rows
    (time, label, event, mark, positions...).  Terminal rows use event
    "final" and an empty mark; labels render dot-joined, the root empty."""
    import csv as _csv

    from .labels import label_to_str

    dim = len(next(iter(path.initial.values()))) if path.initial else 1
    writer = _csv.writer(file)
    writer.writerow(["time", "label", "event", "mark"]
                    + [f"x{i}" for i in range(dim)])
    for ev in path.events:
        writer.writerow([format(ev.time, ".17g"), label_to_str(ev.label),
                         ev.kind if ev.kind != "branch" else f"branch({ev.n_children})",
                         format(ev.mark, ".17g")]
                        + [format(v, ".17g") for v in ev.position])
    for lab in sorted(path.final):
        writer.writerow([format(path.horizon, ".17g"), label_to_str(lab), "final", ""]
                        + [format(v, ".17g") for v in path.final[lab]])


def simulate(t: float, initial: dict, policy, params: ModelParams, step: float,
             horizon: float, seed: int, *, population_cap: int = 10**6,
             record_paths: bool = True) -> PopulationPath:
    """Simulate one path of the controlled branching diffusion on [t, horizon].

    ``initial`` maps labels to positions and must satisfy the antichain
    condition.  Fixed seed and inputs give a bit-identical path on every call.
    Raises :class:`ExplosionGuardError` when the population exceeds
    ``population_cap``.
    """
    sim = _Simulation(t, initial, policy, params, step, horizon, seed,
                      population_cap, record_paths)
    return sim.run()


def simulate_coupled(t: float, initial: dict, policy, params: ModelParams,
                     params_tilde: ModelParams, delta: float, step: float,
                     horizon: float, seed: int, *, population_cap: int = 10**6
                     ) -> tuple[PopulationPath, PopulationPath, bool]:
    """Run two models on identical randomness and compare their paths.

    Both runs see the same per-label Brownian increments, clocks and marks.
    Success means the event outcome sequences agree event by event (each
    system classifying marks against its own intervals at its own positions)
    and the particle positions never drift more than ``delta`` apart.  After
    a divergence the runs simply continue independently.
    """
    if (params.rate_bound != params_tilde.rate_bound
            or params.max_children != params_tilde.max_children
            or params.dim != params_tilde.dim
            or params.noise_dim != params_tilde.noise_dim):
        raise ConfigurationError(
            "coupled models must share rate bound, offspring support and dimensions")
    path = simulate(t, initial, policy, params, step, horizon, seed,
                    population_cap=population_cap, record_paths=True)
    path_tilde = simulate(t, initial, policy, params_tilde, step, horizon, seed,
                          population_cap=population_cap, record_paths=True)
    return path, path_tilde, _coupling_success(path, path_tilde, delta)


def _coupling_success(p1: PopulationPath, p2: PopulationPath, delta: float) -> bool:
    if len(p1.events) != len(p2.events):
        return False
    for a, b in zip(p1.events, p2.events):
        if (a.time != b.time or a.label != b.label or a.kind != b.kind
                or a.n_children != b.n_children):
            return False
    for sa, sb in zip(p1.segments, p2.segments):
        if sorted(sa.positions) != sorted(sb.positions):
            return False
        for lab, xa in sa.positions.items():
            xb = sb.positions[lab]
            if xa.shape != xb.shape:
                return False
            gap = np.linalg.norm(xa - xb, axis=1).max() if xa.size else 0.0
            if gap > delta:
                return False
    return True
