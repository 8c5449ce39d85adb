"""Reaction networks and the model definition language.

A model file is line oriented, ``#`` starts a comment::

    species X = poisson(50)
    species Y = poisson(100)
    param th1
    reaction R1: X -> 2X @ mass_action(th1)
    reaction R3: Y -> 0 @ mass_action(th3)
    reaction pulse: 0 -> X @ expr(b0 * exp(-b1 * (t - b2)^2) + b3)
    prior log th1 ~ uniform(-8, 8)
    prior b1 ~ exponential(1.0)
    obs X ~ normal(10)

Initial counts are an integer, a count distribution, ``observed`` (taken
from the first data row of each replicate) or ``shifted(BASE, dist)``.
"""

import ast
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import priors as pr
from .observation import ObsModel
from .ssa import (
    HAZ_EXPR,
    HAZ_MASS_ACTION,
    OP_ADD,
    OP_CONST,
    OP_DIV,
    OP_EXP,
    OP_LOG,
    OP_MUL,
    OP_NEG,
    OP_PARAM,
    OP_POW,
    OP_SQRT,
    OP_STATE,
    OP_SUB,
    OP_TIME,
    HazardKernel,
)

DATA_DIR = Path(__file__).parent / "data"
BUNDLED_MODELS = ("lv", "aphid", "gene")

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_IDENT_RE = re.compile(rf"^{_IDENT}$")
_TIME_SYMBOL = "t"
_FUNCS = {"exp": OP_EXP, "log": OP_LOG, "sqrt": OP_SQRT}
_BINOPS = {ast.Add: OP_ADD, ast.Sub: OP_SUB, ast.Mult: OP_MUL, ast.Div: OP_DIV, ast.Pow: OP_POW}


class ModelSyntaxError(ValueError):
    """Model source could not be parsed; carries 1-based line and column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class HazardSpec:
    """How reaction ``i`` computes its hazard.

    ``mass_action`` hazards are ``theta[rate_param] * prod_j C(x_j, p_ij)``;
    ``expression`` hazards evaluate ``source`` over species, parameters and ``t``.
    """

    kind: str
    rate_param: str = None
    source: str = None

    def render(self):
        if self.kind == "mass_action":
            return f"mass_action({self.rate_param})"
        return f"expr({self.source})"


def stoichiometry(pre, post):
    """Stoichiometry matrix ``(post - pre)'`` of shape (species, reactions)."""
    pre = np.asarray(pre)
    post = np.asarray(post)
    if pre.shape != post.shape or pre.ndim != 2:
        raise ValueError(f"pre and post matrices must share a 2-d shape, got {pre.shape} and {post.shape}")
    if np.any(pre < 0) or np.any(post < 0):
        raise ValueError("pre and post matrices must be non-negative")
    return (post.astype(np.int64) - pre.astype(np.int64)).T


def _frozen_int(a):
    a = np.array(a, dtype=np.int64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Model:
    """An immutable reaction network with optional priors and observation model."""

    species_names: tuple
    reaction_names: tuple
    pre: np.ndarray
    post: np.ndarray
    hazards: tuple
    param_names: tuple
    init: object = None
    prior: object = None
    obs: object = None

    def __post_init__(self):
        for name in ("species_names", "reaction_names", "hazards", "param_names"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "pre", _frozen_int(self.pre))
        object.__setattr__(self, "post", _frozen_int(self.post))
        u, v = len(self.species_names), len(self.reaction_names)
        if u < 1 or v < 1:
            raise ValueError("a model needs at least one species and one reaction")
        if self.pre.shape != (v, u) or self.post.shape != (v, u):
            raise ValueError(f"pre/post must have shape ({v}, {u})")
        if np.any(self.pre < 0) or np.any(self.post < 0):
            raise ValueError("pre/post coefficients must be non-negative")
        if len(self.hazards) != v:
            raise ValueError("one hazard per reaction is required")
        if len(set(self.param_names)) != len(self.param_names):
            raise ValueError("duplicate parameter names")
        referenced = set()
        for haz in self.hazards:
            referenced |= _hazard_params(haz, self.param_names)
        missing = referenced - set(self.param_names)
        if missing:
            raise ValueError(f"hazards reference undeclared parameters: {sorted(missing)}")
        if self.prior is not None and self.prior.names != self.param_names:
            raise ValueError("prior must list the parameters in declaration order")

    @property
    def n_species(self):
        return len(self.species_names)

    @property
    def n_reactions(self):
        return len(self.reaction_names)

    @property
    def stoich(self):
        return stoichiometry(self.pre, self.post)

    @cached_property
    def kernel(self):
        """Flat arrays consumed by the compiled simulators."""
        return _build_kernel(self)

    def species_index(self, name):
        return self.species_names.index(name)

    def render(self):
        return render_model(self)

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.species_names == other.species_names
            and self.reaction_names == other.reaction_names
            and np.array_equal(self.pre, other.pre)
            and np.array_equal(self.post, other.post)
            and self.hazards == other.hazards
            and self.param_names == other.param_names
            and self.init == other.init
            and self.prior == other.prior
            and self.obs == other.obs
        )

    __hash__ = None


# expressions ---------------------------------------------------------------


def _parse_expression(source):
    try:
        tree = ast.parse(source.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ModelSyntaxError(f"invalid hazard expression {source!r}: {exc.msg}", column=exc.offset) from None
    _check_expression(tree.body, source)
    return tree.body


def _check_expression(node, source):
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        _check_expression(node.left, source)
        _check_expression(node.right, source)
    elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        _check_expression(node.operand, source)
    elif isinstance(node, ast.Call):
        if not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS) or len(node.args) != 1 or node.keywords:
            raise ModelSyntaxError(f"unsupported call in hazard expression {source!r}")
        _check_expression(node.args[0], source)
    elif isinstance(node, ast.Name):
        pass
    elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        pass
    else:
        raise ModelSyntaxError(f"unsupported construct {type(node).__name__} in hazard expression {source!r}")


def _expression_names(node):
    func_nodes = {id(n.func) for n in ast.walk(node) if isinstance(n, ast.Call)}
    return {n.id for n in ast.walk(node) if isinstance(n, ast.Name) and id(n) not in func_nodes}


def _hazard_params(haz, param_names):
    if haz.kind == "mass_action":
        return {haz.rate_param}
    names = _expression_names(_parse_expression(haz.source))
    return {n for n in names if n in param_names}


def _compile_expression(node, species, params, code, consts):
    """Append postfix code for ``node``; returns the stack depth it needs."""
    if isinstance(node, ast.Constant):
        code.append((OP_CONST, len(consts)))
        consts.append(float(node.value))
        return 1
    if isinstance(node, ast.Name):
        if node.id == _TIME_SYMBOL:
            code.append((OP_TIME, 0))
        elif node.id in species:
            code.append((OP_STATE, species.index(node.id)))
        elif node.id in params:
            code.append((OP_PARAM, params.index(node.id)))
        else:
            raise ModelSyntaxError(f"unknown symbol {node.id!r} in hazard expression")
        return 1
    if isinstance(node, ast.UnaryOp):
        depth = _compile_expression(node.operand, species, params, code, consts)
        if isinstance(node.op, ast.USub):
            code.append((OP_NEG, 0))
        return depth
    if isinstance(node, ast.Call):
        depth = _compile_expression(node.args[0], species, params, code, consts)
        code.append((_FUNCS[node.func.id], 0))
        return depth
    left = _compile_expression(node.left, species, params, code, consts)
    right = _compile_expression(node.right, species, params, code, consts)
    code.append((_BINOPS[type(node.op)], 0))
    return max(left, right + 1)


def _build_kernel(model):
    v, u = model.n_reactions, model.n_species
    kind = np.zeros(v, dtype=np.int64)
    rate_idx = np.full(v, -1, dtype=np.int64)
    starts = np.zeros(v, dtype=np.int64)
    stops = np.zeros(v, dtype=np.int64)
    code, consts = [], []
    depth = 1
    for i, haz in enumerate(model.hazards):
        if haz.kind == "mass_action":
            kind[i] = HAZ_MASS_ACTION
            rate_idx[i] = model.param_names.index(haz.rate_param)
        else:
            kind[i] = HAZ_EXPR
            starts[i] = len(code)
            node = _parse_expression(haz.source)
            depth = max(depth, _compile_expression(node, model.species_names, model.param_names, code, consts))
            stops[i] = len(code)
    ops = np.array([c[0] for c in code], dtype=np.int64)
    args = np.array([c[1] for c in code], dtype=np.int64)
    return HazardKernel(
        update=np.ascontiguousarray((model.post - model.pre).astype(np.int64)),
        kind=kind,
        rate_idx=rate_idx,
        pre=np.ascontiguousarray(model.pre.astype(np.int64)),
        ops=ops,
        args=args,
        consts=np.array(consts, dtype=np.float64),
        starts=starts,
        stops=stops,
        stack_size=depth + 1,
        n_species=u,
    )


# parsing -------------------------------------------------------------------

_SPECIES_RE = re.compile(rf"^species\s+({_IDENT})(?:\s*=\s*(.+))?$")
_PARAM_RE = re.compile(rf"^param\s+({_IDENT})$")
_REACTION_RE = re.compile(rf"^reaction\s+({_IDENT})\s*:\s*(.*?)\s*->\s*(.*?)\s*@\s*(.+)$")
_PRIOR_RE = re.compile(rf"^prior\s+(?:(log)\s+)?({_IDENT})\s*~\s*(.+)$")
_OBS_RE = re.compile(rf"^obs\s+({_IDENT})\s*~\s*(.+)$")
_CALL_RE = re.compile(rf"^({_IDENT})\s*(?:\((.*)\))?$")
_TERM_RE = re.compile(rf"^(\d+)?\s*\*?\s*({_IDENT})$")


def _split_args(text):
    """Split on top-level commas."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail or parts:
        parts.append(tail)
    return parts


def _number(text, lineno, col):
    try:
        return float(text)
    except ValueError:
        raise ModelSyntaxError(f"expected a number, got {text!r}", lineno, col) from None


def _parse_distribution(text, lineno, col):
    m = _CALL_RE.match(text.strip())
    if not m:
        raise ModelSyntaxError(f"malformed distribution {text!r}", lineno, col)
    name, argtext = m.group(1), m.group(2)
    args = _split_args(argtext) if argtext is not None else []
    if name == "shifted":
        if len(args) != 2:
            raise ModelSyntaxError("shifted(base, distribution) takes two arguments", lineno, col)
        base = args[0] if _IDENT_RE.match(args[0]) else _number(args[0], lineno, col)
        return pr.Shifted(base, _parse_distribution(args[1], lineno, col))
    if name not in pr.FAMILIES:
        raise ModelSyntaxError(f"unknown distribution {name!r}", lineno, col)
    values = [_number(a, lineno, col) for a in args]
    try:
        return pr.FAMILIES[name](*values)
    except (TypeError, ValueError) as exc:
        raise ModelSyntaxError(f"bad arguments for {name}: {exc}", lineno, col) from None


def _parse_side(text, species, lineno, col, line):
    counts = {}
    text = text.strip()
    if text in ("0", "∅", ""):
        return counts
    for term in text.split("+"):
        term = term.strip()
        m = _TERM_RE.match(term)
        if not m:
            raise ModelSyntaxError(f"malformed reaction term {term!r}", lineno, line.find(term) + 1)
        coef = int(m.group(1)) if m.group(1) else 1
        name = m.group(2)
        if name not in species:
            raise ModelSyntaxError(f"unknown species {name!r}", lineno, line.find(name) + 1)
        counts[name] = counts.get(name, 0) + coef
    return counts


def parse_model(source):
    """Parse model source text into a validated :class:`Model`."""
    if not source or not source.strip():
        raise ModelSyntaxError("empty model source")
    species, inits = [], {}
    params = []
    reactions = []  # (name, lhs, rhs, hazard, lineno)
    prior_entries = {}
    obs_entries = {}
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped:
            continue
        indent = len(line) - len(line.lstrip())
        keyword = stripped.split(None, 1)[0]
        if keyword == "species":
            m = _SPECIES_RE.match(stripped)
            if not m:
                raise ModelSyntaxError("expected 'species NAME [= init]'", lineno, indent + 1)
            name = m.group(1)
            if name in species:
                raise ModelSyntaxError(f"duplicate species {name!r}", lineno, indent + 1)
            species.append(name)
            if m.group(2) is not None:
                init_text = m.group(2).strip()
                col = line.find(init_text) + 1
                if init_text == "observed":
                    inits[name] = pr.Observed()
                elif re.match(r"^\d+$", init_text):
                    inits[name] = pr.PointMass(int(init_text))
                else:
                    inits[name] = _parse_distribution(init_text, lineno, col)
        elif keyword == "param":
            m = _PARAM_RE.match(stripped)
            if not m:
                raise ModelSyntaxError("expected 'param NAME'", lineno, indent + 1)
            if m.group(1) in params:
                raise ModelSyntaxError(f"duplicate parameter {m.group(1)!r}", lineno, indent + 1)
            params.append(m.group(1))
        elif keyword == "reaction":
            m = _REACTION_RE.match(stripped)
            if not m:
                raise ModelSyntaxError("expected 'reaction NAME: LHS -> RHS @ hazard'", lineno, indent + 1)
            name, lhs, rhs, haz_text = m.groups()
            if any(r[0] == name for r in reactions):
                raise ModelSyntaxError(f"duplicate reaction name {name!r}", lineno, line.find(name) + 1)
            reactions.append((name, lhs, rhs, haz_text.strip(), lineno, line))
        elif keyword == "prior":
            m = _PRIOR_RE.match(stripped)
            if not m:
                raise ModelSyntaxError("expected 'prior [log] NAME ~ dist(args)'", lineno, indent + 1)
            is_log, name, dist_text = m.groups()
            if name in prior_entries:
                raise ModelSyntaxError(f"duplicate prior for {name!r}", lineno, indent + 1)
            dist = _parse_distribution(dist_text, lineno, line.find(dist_text) + 1)
            prior_entries[name] = (pr.ParamPrior(name, dist, log_scale=bool(is_log)), lineno)
        elif keyword == "obs":
            m = _OBS_RE.match(stripped)
            if not m:
                raise ModelSyntaxError("expected 'obs SPECIES ~ normal(sigma)' or 'obs SPECIES ~ poisson'", lineno, indent + 1)
            name, dist_text = m.groups()
            call = _CALL_RE.match(dist_text.strip())
            if not call or call.group(1) not in ("normal", "poisson"):
                raise ModelSyntaxError(f"unknown observation model {dist_text!r}", lineno, line.find(dist_text) + 1)
            args = _split_args(call.group(2)) if call.group(2) is not None else []
            obs_entries[name] = (call.group(1), [_number(a, lineno, 1) for a in args], lineno)
        else:
            raise ModelSyntaxError(f"unknown statement {keyword!r}", lineno, indent + 1)

    if not species:
        raise ModelSyntaxError("model declares no species")
    if not reactions:
        raise ModelSyntaxError("model declares no reactions")

    u, v = len(species), len(reactions)
    pre = np.zeros((v, u), dtype=np.int64)
    post = np.zeros((v, u), dtype=np.int64)
    hazards = []
    used_params = set()
    for i, (name, lhs, rhs, haz_text, lineno, line) in enumerate(reactions):
        for side, mat in ((lhs, pre), (rhs, post)):
            for sp, coef in _parse_side(side, species, lineno, 1, line).items():
                mat[i, species.index(sp)] = coef
        col = line.find(haz_text) + 1
        hm = re.match(r"^(mass_action|expr)\s*\((.*)\)$", haz_text)
        if not hm:
            raise ModelSyntaxError(f"expected mass_action(param) or expr(...), got {haz_text!r}", lineno, col)
        if hm.group(1) == "mass_action":
            rate = hm.group(2).strip()
            if rate not in params:
                raise ModelSyntaxError(f"parameter {rate!r} referenced but never declared", lineno, col)
            hazards.append(HazardSpec("mass_action", rate_param=rate))
            used_params.add(rate)
        else:
            try:
                node = _parse_expression(hm.group(2))
            except ModelSyntaxError as exc:
                raise ModelSyntaxError(str(exc), lineno, col) from None
            for sym in _expression_names(node):
                if sym == _TIME_SYMBOL or sym in species:
                    continue
                if sym not in params:
                    raise ModelSyntaxError(f"symbol {sym!r} referenced but never declared", lineno, col)
                used_params.add(sym)
            hazards.append(HazardSpec("expression", source=ast.unparse(node)))
    unused = [p for p in params if p not in used_params]
    if unused:
        raise ModelSyntaxError(f"parameters declared but never used: {unused}")
    clash = set(params) & (set(species) | {_TIME_SYMBOL})
    if clash:
        raise ModelSyntaxError(f"parameter names clash with species or time symbol: {sorted(clash)}")

    prior = None
    if prior_entries:
        unknown = [n for n in prior_entries if n not in params]
        if unknown:
            raise ModelSyntaxError(f"prior for undeclared parameter {unknown[0]!r}", prior_entries[unknown[0]][1])
        missing = [p for p in params if p not in prior_entries]
        if missing:
            raise ModelSyntaxError(f"no prior given for parameters {missing}")
        prior = pr.PriorSpec(tuple(prior_entries[p][0] for p in params))

    init = None
    if inits:
        missing = [s for s in species if s not in inits]
        if missing:
            raise ModelSyntaxError(f"no initial value given for species {missing}")
        try:
            init = pr.InitialStatePrior(species, [inits[s] for s in species])
        except ValueError as exc:
            raise ModelSyntaxError(str(exc)) from None

    obs = None
    if obs_entries:
        for name, (_, _, lineno) in obs_entries.items():
            if name not in species:
                raise ModelSyntaxError(f"observation of unknown species {name!r}", lineno)
        kinds = {k for k, _, _ in obs_entries.values()}
        if len(kinds) > 1:
            raise ModelSyntaxError("all observed species must share one observation model")
        kind = kinds.pop()
        mask = np.array([s in obs_entries for s in species], dtype=bool)
        if kind == "normal":
            sigma = np.ones(u)
            for name, (_, args, lineno) in obs_entries.items():
                if len(args) != 1:
                    raise ModelSyntaxError("normal(sigma) takes one argument", lineno)
                sigma[species.index(name)] = args[0]
            try:
                obs = ObsModel("gaussian", mask, sigma)
            except ValueError as exc:
                raise ModelSyntaxError(str(exc)) from None
        else:
            obs = ObsModel("poisson", mask)

    return Model(
        species_names=tuple(species),
        reaction_names=tuple(r[0] for r in reactions),
        pre=pre,
        post=post,
        hazards=tuple(hazards),
        param_names=tuple(params),
        init=init,
        prior=prior,
        obs=obs,
    )


def _render_side(row, species):
    terms = []
    for j, coef in enumerate(row):
        if coef == 1:
            terms.append(species[j])
        elif coef > 1:
            terms.append(f"{coef}{species[j]}")
    return " + ".join(terms) if terms else "0"


def render_model(model):
    """Canonical source text; ``parse_model(render_model(m)) == m``."""
    lines = []
    for i, name in enumerate(model.species_names):
        if model.init is None:
            lines.append(f"species {name}")
            continue
        spec = model.init.specs[i]
        if isinstance(spec, pr.PointMass):
            lines.append(f"species {name} = {int(spec.value)}")
        else:
            lines.append(f"species {name} = {spec.render()}")
    for p in model.param_names:
        lines.append(f"param {p}")
    for i, name in enumerate(model.reaction_names):
        lhs = _render_side(model.pre[i], model.species_names)
        rhs = _render_side(model.post[i], model.species_names)
        lines.append(f"reaction {name}: {lhs} -> {rhs} @ {model.hazards[i].render()}")
    if model.prior is not None:
        lines.extend(p.render() for p in model.prior.params)
    if model.obs is not None:
        lines.extend(model.obs.render(model.species_names))
    return "\n".join(lines) + "\n"


def load_model(path):
    path = Path(path)
    return parse_model(path.read_text(encoding="utf-8"))


def bundled_model(name):
    """Load one of the bundled models: ``lv``, ``aphid`` or ``gene``."""
    if name not in BUNDLED_MODELS:
        raise ValueError(f"unknown bundled model {name!r}; choose from {BUNDLED_MODELS}")
    return load_model(DATA_DIR / f"{name}.model")
