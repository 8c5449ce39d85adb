"""Exact simulation of Markov jump processes with Gillespie's direct method.

The inner loops are compiled with numba (``nogil``, so thread pools run them
in parallel). Hazards are evaluated from flat arrays: mass-action reactions
read their reactant row of the pre matrix, expression hazards run a small
postfix program. Kernels therefore compile once per process, not per model.
"""

import csv
import math
from collections import namedtuple
from dataclasses import dataclass

import numba
import numpy as np

MAX_EVENTS = 10_000_000

HAZ_MASS_ACTION = 0
HAZ_EXPR = 1

OP_CONST = 0
OP_STATE = 1
OP_PARAM = 2
OP_TIME = 3
OP_ADD = 4
OP_SUB = 5
OP_MUL = 6
OP_DIV = 7
OP_POW = 8
OP_NEG = 9
OP_EXP = 10
OP_LOG = 11
OP_SQRT = 12

STATUS_OK = 0
STATUS_EXPLODED = 1
STATUS_BAD_HAZARD = 2
STATUS_EARLY_STOP = 3

OBS_GAUSSIAN = 0
OBS_POISSON = 1

HazardKernel = namedtuple(
    "HazardKernel",
    "update kind rate_idx pre ops args consts starts stops stack_size n_species",
)


class SimulationExplosion(RuntimeError):
    """A path exceeded the event budget."""


class HazardError(ValueError):
    """A hazard evaluated to a negative or non-finite value."""


_jit = numba.njit(cache=True, nogil=True, error_model="numpy")
# Per-event helpers are inlined at the IR level: an out-of-line call per event
# pays reference-count traffic on every array argument.
_jit_inline = numba.njit(cache=True, nogil=True, error_model="numpy", inline="always")
_jit_nrt_off = numba.njit(cache=True, nogil=True, error_model="numpy", _nrt=False)


@_jit
def _eval_expr(ops, args, consts, start, stop, x, theta, t, stack):
    sp = 0
    for i in range(start, stop):
        op = ops[i]
        if op == OP_CONST:
            stack[sp] = consts[args[i]]
            sp += 1
        elif op == OP_STATE:
            stack[sp] = x[args[i]]
            sp += 1
        elif op == OP_PARAM:
            stack[sp] = theta[args[i]]
            sp += 1
        elif op == OP_TIME:
            stack[sp] = t
            sp += 1
        elif op == OP_NEG:
            stack[sp - 1] = -stack[sp - 1]
        elif op == OP_EXP:
            stack[sp - 1] = math.exp(stack[sp - 1])
        elif op == OP_LOG:
            a = stack[sp - 1]
            stack[sp - 1] = math.log(a) if a > 0 else (-math.inf if a == 0 else math.nan)
        elif op == OP_SQRT:
            a = stack[sp - 1]
            stack[sp - 1] = math.sqrt(a) if a >= 0 else math.nan
        else:
            b = stack[sp - 1]
            a = stack[sp - 2]
            sp -= 1
            if op == OP_ADD:
                stack[sp - 1] = a + b
            elif op == OP_SUB:
                stack[sp - 1] = a - b
            elif op == OP_MUL:
                stack[sp - 1] = a * b
            elif op == OP_DIV:
                stack[sp - 1] = a / b
            else:
                stack[sp - 1] = a**b
    return stack[0]


@_jit_inline
def _hazards(x, theta, t, kind, rate_idx, pre, ops, args, consts, starts, stops, stack, h):
    """Fill ``h`` and return ``h0``; returns -1 if any hazard is invalid."""
    v = kind.shape[0]
    u = pre.shape[1]
    h0 = 0.0
    for i in range(v):
        if kind[i] == HAZ_MASS_ACTION:
            val = theta[rate_idx[i]]
            for j in range(u):
                p = pre[i, j]
                if p == 0:
                    continue
                xj = x[j]
                if xj < p:
                    val = 0.0
                    break
                c = 1.0
                for k in range(p):
                    c *= (xj - k) / (k + 1.0)
                val *= c
        else:
            val = _eval_expr(ops, args, consts, starts[i], stops[i], x, theta, t, stack)
        if not (val >= 0.0) or val == math.inf:
            return -1.0
        h[i] = val
        h0 += val
    return h0


@_jit_inline
def _pick(h, h0, rng):
    target = rng.random() * h0
    j = 0
    acc = h[0]
    v = h.shape[0]
    while acc <= target and j < v - 1:
        j += 1
        acc += h[j]
    while h[j] == 0.0 and j > 0:
        j -= 1
    return j


@_jit_nrt_off
def _advance(x, t, t_end, theta, update, kind, rate_idx, pre, ops, args, consts, starts, stops, stack, h, rng, events, max_events):
    """Run the direct method on ``x`` (in place) from ``t`` up to ``t_end``.

    Returns ``(status, events)``; the first event after ``t_end`` is discarded.
    """
    u = x.shape[0]
    while True:
        h0 = _hazards(x, theta, t, kind, rate_idx, pre, ops, args, consts, starts, stops, stack, h)
        if h0 < 0.0:
            return STATUS_BAD_HAZARD, events
        if h0 == 0.0:
            return STATUS_OK, events
        t += rng.standard_exponential() / h0
        if t >= t_end:
            return STATUS_OK, events
        j = _pick(h, h0, rng)
        for s in range(u):
            x[s] += update[j, s]
        events += 1
        if events >= max_events:
            return STATUS_EXPLODED, events


@_jit
def _trajectory(x0, t0, t_end, theta, update, kind, rate_idx, pre, ops, args, consts, starts, stops, stack_size, rng, max_events):
    u = x0.shape[0]
    v = kind.shape[0]
    cap = 1024
    times = np.empty(cap)
    states = np.empty((cap, u), dtype=np.int64)
    reactions = np.empty(cap, dtype=np.int64)
    h = np.empty(v)
    stack = np.empty(stack_size)
    x = x0.copy()
    t = t0
    times[0] = t0
    states[0] = x
    reactions[0] = -1
    n = 1
    while True:
        h0 = _hazards(x, theta, t, kind, rate_idx, pre, ops, args, consts, starts, stops, stack, h)
        if h0 < 0.0:
            return times[:n], states[:n], reactions[:n], STATUS_BAD_HAZARD
        if h0 == 0.0:
            break
        t += rng.standard_exponential() / h0
        if t >= t_end:
            break
        j = _pick(h, h0, rng)
        for s in range(u):
            x[s] += update[j, s]
        if n == cap:
            cap *= 2
            times2 = np.empty(cap)
            states2 = np.empty((cap, u), dtype=np.int64)
            reactions2 = np.empty(cap, dtype=np.int64)
            times2[:n] = times[:n]
            states2[:n] = states[:n]
            reactions2[:n] = reactions[:n]
            times, states, reactions = times2, states2, reactions2
        times[n] = t
        states[n] = x
        reactions[n] = j
        n += 1
        if n - 1 >= max_events:
            return times[:n], states[:n], reactions[:n], STATUS_EXPLODED
    return times[:n], states[:n], reactions[:n], STATUS_OK


@_jit
def _simulate_at(x0, t0, times, theta, update, kind, rate_idx, pre, ops, args, consts, starts, stops, stack_size, rng, max_events):
    u = x0.shape[0]
    out = np.zeros((times.shape[0], u), dtype=np.int64)
    h = np.empty(kind.shape[0])
    stack = np.empty(stack_size)
    x = x0.copy()
    t = t0
    events = 0
    for k in range(times.shape[0]):
        if times[k] > t:
            status, events = _advance(
                x, t, times[k], theta, update, kind, rate_idx, pre, ops, args, consts, starts, stops, stack, h, rng, events, max_events
            )
            if status != STATUS_OK:
                return out, status
            t = times[k]
        out[k] = x
    return out, STATUS_OK


@_jit
def _propagate(X, events, t_from, t_to, theta, update, kind, rate_idx, pre, ops, args, consts, starts, stops, stack_size, rng, max_events, status):
    """Advance every particle row of ``X`` in place; per-particle status out."""
    h = np.empty(kind.shape[0])
    stack = np.empty(stack_size)
    for i in range(X.shape[0]):
        st, ev = _advance(
            X[i], t_from, t_to, theta, update, kind, rate_idx, pre, ops, args, consts, starts, stops, stack, h, rng, events[i], max_events
        )
        events[i] = ev
        status[i] = st


@_jit
def _abc_distance(X0, t0, times, data, obs_kind, sigma, obs_mask, theta, update, kind, rate_idx, pre, ops, args, consts, starts, stops, stack_size, rng, max_events, eps2):
    """Squared distance between noisy simulated data and ``data`` (R, T, u).

    Stops early with ``STATUS_EARLY_STOP`` once the partial sum reaches
    ``eps2``, since such a proposal can no longer be accepted.
    """
    R = data.shape[0]
    u = X0.shape[1]
    h = np.empty(kind.shape[0])
    stack = np.empty(stack_size)
    d2 = 0.0
    for r in range(R):
        x = X0[r].copy()
        t = t0
        events = 0
        for k in range(times.shape[0]):
            if times[k] > t:
                status, events = _advance(
                    x, t, times[k], theta, update, kind, rate_idx, pre, ops, args, consts, starts, stops, stack, h, rng, events, max_events
                )
                if status != STATUS_OK:
                    return math.inf, status
                t = times[k]
            for j in range(u):
                d = data[r, k, j]
                if not obs_mask[j] or math.isnan(d):
                    continue
                if obs_kind == OBS_GAUSSIAN:
                    y = x[j] + sigma[j] * rng.standard_normal()
                else:
                    y = float(rng.poisson(x[j]))
                d2 += (y - d) ** 2
            if d2 >= eps2:
                return d2, STATUS_EARLY_STOP
    return d2, STATUS_OK


def _kernel_args(kernel):
    return (
        kernel.update,
        kernel.kind,
        kernel.rate_idx,
        kernel.pre,
        kernel.ops,
        kernel.args,
        kernel.consts,
        kernel.starts,
        kernel.stops,
    )


def _theta(model, theta):
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    if theta.shape != (len(model.param_names),):
        raise ValueError(f"expected {len(model.param_names)} rate parameters, got shape {theta.shape}")
    return theta


def _state(model, x):
    x = np.asarray(x)
    if x.shape != (model.n_species,):
        raise ValueError(f"expected a state of length {model.n_species}, got shape {x.shape}")
    if np.any(x < 0) or np.any(x != np.round(x)):
        raise ValueError("states must be non-negative integers")
    return np.ascontiguousarray(x, dtype=np.int64)


def raise_for_status(status, max_events=MAX_EVENTS):
    if status == STATUS_EXPLODED:
        raise SimulationExplosion(f"path exceeded {max_events} events")
    if status == STATUS_BAD_HAZARD:
        raise HazardError("a hazard evaluated to a negative or non-finite value")


def hazard_vector(model, x, theta, t=0.0):
    """Hazards ``h`` and total ``h0`` at state ``x``, parameters ``theta``, time ``t``."""
    kern = model.kernel
    x = _state(model, x)
    theta = _theta(model, theta)
    h = np.zeros(model.n_reactions)
    stack = np.empty(kern.stack_size)
    h0 = _hazards(x, theta, float(t), kern.kind, kern.rate_idx, kern.pre, kern.ops, kern.args, kern.consts, kern.starts, kern.stops, stack, h)
    if h0 < 0:
        raise HazardError(f"hazard evaluated to a negative or non-finite value at x={x.tolist()}, t={t}")
    return h, h0


@dataclass(frozen=True)
class Trajectory:
    """A right-continuous sample path.

    ``event_times[0]`` is the start time and ``states[0]`` the initial state;
    row ``k > 0`` holds the state just after reaction ``reaction_indices[k-1]``
    (0-based) fired at ``event_times[k]``.
    """

    event_times: np.ndarray
    states: np.ndarray
    reaction_indices: np.ndarray
    t_end: float
    species_names: tuple = ()

    def __len__(self):
        return len(self.event_times)

    def check(self, stoich):
        """Assert the path is consistent with the stoichiometry matrix ``stoich``."""
        steps = np.diff(self.states, axis=0)
        if not np.array_equal(steps, stoich[:, self.reaction_indices].T.reshape(steps.shape)):
            raise AssertionError("state increments do not match the fired reactions")
        if np.any(np.diff(self.event_times) <= 0):
            raise AssertionError("event times are not strictly increasing")
        if np.any(self.states < 0):
            raise AssertionError("negative species count")

    def to_csv(self, path):
        names = list(self.species_names) or [f"x{j}" for j in range(self.states.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "reaction_index", *names])
            for k in range(len(self.event_times)):
                idx = "" if k == 0 else int(self.reaction_indices[k - 1]) + 1
                w.writerow([repr(float(self.event_times[k])), idx, *(int(v) for v in self.states[k])])


def simulate_direct(model, theta, x0, t0, t_end, rng, max_events=MAX_EVENTS):
    """Simulate one exact path on ``[t0, t_end]``; ``theta`` on the natural scale."""
    if not t_end > t0:
        raise ValueError("t_end must exceed t0")
    kern = model.kernel
    x0 = _state(model, x0)
    theta = _theta(model, theta)
    times, states, reactions, status = _trajectory(
        x0, float(t0), float(t_end), theta, *_kernel_args(kern), kern.stack_size, rng, int(max_events)
    )
    raise_for_status(status, max_events)
    return Trajectory(times.copy(), states.copy(), reactions[1:].copy(), float(t_end), model.species_names)


def simulate_at_times(model, theta, x0, times, rng, t0=None, max_events=MAX_EVENTS):
    """States of one exact path at ``times`` (shape ``(len(times), u)``).

    The waiting time that overshoots each observation time is discarded and
    redrawn from there, which memorylessness makes exact; the random draws
    therefore differ from those of :func:`simulate_direct` with the same seed.
    """
    times = np.ascontiguousarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a non-empty increasing sequence")
    t0 = times[0] if t0 is None else float(t0)
    if times[0] < t0:
        raise ValueError("observation times precede the start time")
    kern = model.kernel
    out, status = _simulate_at(
        _state(model, x0), t0, times, _theta(model, theta), *_kernel_args(kern), kern.stack_size, rng, int(max_events)
    )
    raise_for_status(status, max_events)
    return out


def states_at_times(traj, times):
    """State at the latest event time ``<=`` each query time."""
    times = np.asarray(times, dtype=float)
    if np.any(times < traj.event_times[0]) or np.any(times > traj.t_end):
        raise ValueError(f"query times must lie in [{traj.event_times[0]}, {traj.t_end}]")
    idx = np.searchsorted(traj.event_times, times, side="right") - 1
    return traj.states[idx]
