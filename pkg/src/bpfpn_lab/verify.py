"""Independent oracles and the gradient-flow experiment battery.

Everything here compares the tape against something that does not use it:
central finite differences, or a second graph built with a different
topology.  Reports serialize to flat JSON records via ``to_record``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ops
from .bpfpn import TWO_FUSION_KINDS, ArchitectureSpec, Kind, Model
from .errors import ContractError
from .graph import PARAM_SLOT, Graph
from .tensor import Rng

FD_STEP = 1e-5
GRAD_TOL = 1e-6
# Denominator floor for relative errors.  Central differences at step 1e-5 on
# an O(1) loss carry k * ulp(L) / 2h ~ k * 1e-11 absolute round-off (k = a few
# ulps of evaluation noise), i.e. ~1e-10; a 1e-6 relative check is only
# resolvable for gradients above 1e-4.  Smaller ones are held to 1e-10 absolute.
REL_FLOOR = 1e-4
DECOMP_TOL = 1e-12
STEP_SWEEP = (1e-4, 1e-5, 1e-6)
SEEDS = (0, 1, 2, 3, 4)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    worst_coordinate: Optional[tuple]
    passed: bool
    seeds: list
    tolerance: float = GRAD_TOL
    step: float = FD_STEP
    checked: int = 0
    skipped_near_kink: int = 0
    step_sweep: dict = field(default_factory=dict)
    sampled: list = field(default_factory=list)  # (parameter, flat index) pairs, end-to-end only

    def to_record(self) -> dict:
        return {"name": f"gradcheck:{self.op}", **_jsonable(asdict(self)), "pass": self.passed}


@dataclass
class DecompositionReport:
    check: str
    arch: str
    seed: int
    target: str
    full_norm: float
    path_norms: dict
    residual: float
    passed: bool
    bitwise: bool = False
    size: int = 32

    def to_record(self) -> dict:
        return {"name": f"{self.check}:{self.arch}:{self.target}", **_jsonable(asdict(self)), "pass": self.passed}


@dataclass
class IsolationReport:
    arch: str
    seed: int
    size: int
    diffs: dict  # backbone parameter name -> max abs grad difference
    gils_grad_norm: float
    expect_identical: bool
    passed: bool

    def to_record(self) -> dict:
        return {"name": f"isolation:{self.arch}", **_jsonable(asdict(self)), "pass": self.passed}


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


# -- the oracle -----------------------------------------------------------


def finite_difference_grad(f: Callable, x, step: float = FD_STEP, coords=None) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    Returns the full gradient, or only the entries at the flat indices in
    ``coords`` when given.  ``x`` is not modified.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else [int(i) for i in coords]
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        out[k] = (fp - fm) / (2 * step)
    return out.reshape(x.shape) if coords is None else out


def kink_signature(g: Graph) -> tuple:
    """Activation pattern of every relu and maxpool on the tape."""
    sig = []
    for node in g.nodes:
        if "mask" in node.meta:
            sig.append(node.meta["mask"].tobytes())
        elif "argmax" in node.meta:
            sig.append(node.meta["argmax"].tobytes())
    return tuple(sig)


# -- primitive battery ----------------------------------------------------


def _primitive_cases(rng: Rng) -> dict:
    """name -> (inputs, params, build) where build(g, input_ids, params) -> node."""

    def u(*shape):
        return rng.uniform(int(np.prod(shape))).reshape(shape) * 2.0 - 1.0

    def convw(out_c, in_c, k):
        return {"w": u(out_c, in_c, k, k), "b": u(1, out_c, 1, 1)}

    def conv_build(g, ids, p):
        w = ops.ConvWeights(p["w"], p["b"])
        return ops.conv2d(g, ids[0], w)

    targets = (rng.uniform(2 * 9) < 0.5).astype(float).reshape(2, 1, 3, 3)
    return {
        "conv2d_3x3": ([u(2, 3, 6, 6)], convw(4, 3, 3), conv_build),
        "conv2d_1x1": ([u(2, 5, 4, 4)], convw(3, 5, 1), conv_build),
        "space_to_depth2": ([u(2, 3, 4, 6)], {}, lambda g, i, p: ops.space_to_depth2(g, i[0])),
        "depth_to_space2": ([u(1, 8, 3, 2)], {}, lambda g, i, p: ops.depth_to_space2(g, i[0])),
        "upsample_nearest2": ([u(2, 2, 3, 3)], {}, lambda g, i, p: ops.upsample_nearest2(g, i[0])),
        "maxpool2": ([u(2, 3, 4, 4)], {}, lambda g, i, p: ops.maxpool2(g, i[0])),
        "avgpool2": ([u(2, 3, 4, 4)], {}, lambda g, i, p: ops.avgpool2(g, i[0])),
        "relu": ([u(2, 3, 4, 4)], {}, lambda g, i, p: ops.relu(g, i[0])),
        "add": ([u(2, 3, 3, 3), u(2, 3, 3, 3)], {}, lambda g, i, p: ops.add(g, i[0], i[1])),
        "concat_channels": ([u(1, 2, 4, 4), u(1, 3, 4, 4)], {}, lambda g, i, p: ops.concat_channels(g, i)),
        "mean_scalar": ([u(2, 3, 3, 3)], {}, lambda g, i, p: ops.mean_scalar(g, i[0])),
        "dot_const": ([u(2, 3, 3, 3)], {"r": u(2, 3, 3, 3)}, lambda g, i, p: ops.dot_const(g, i[0], p["r"].value)),
        "bce_with_logits": ([u(2, 1, 3, 3) * 3], {}, lambda g, i, p: ops.bce_with_logits(g, i[0], targets)),
    }


def _as_params(values: dict):
    from .graph import Parameter

    return {k: Parameter(k, v) for k, v in values.items()}


def _primitive_forward(build, inputs, param_values, weights=None):
    g = Graph()
    ids = [g.input(x) for x in inputs]
    params = _as_params(param_values)
    out = build(g, ids, params)
    if weights is None:
        return g, ids, params, out
    return g, ids, params, ops.dot_const(g, out, weights)


def check_primitive(name: str, seed: int, step: float = FD_STEP) -> tuple[float, tuple, int, int]:
    """Max relative error of one primitive over all coordinates of all inputs and parameters."""
    rng = Rng(seed).spawn(name)
    inputs, param_values, build = _primitive_cases(rng)[name]
    g, _, _, out = _primitive_forward(build, inputs, param_values)
    out_shape = g.value(out).shape
    weights = rng.uniform(int(np.prod(out_shape))).reshape(out_shape) * 2.0 - 1.0
    g, ids, params, loss = _primitive_forward(build, inputs, param_values, weights)
    base_sig = kink_signature(g)
    gm = g.backward(loss)
    # dot_const's own weights are a constant, not a differentiable parameter
    trainable = [k for k in param_values if not (name == "dot_const" and k == "r")]

    targets = [(f"input{k}", k, gm[ids[k]]) for k in range(len(inputs))]
    targets += [(f"param:{k}", k, params[k].grad) for k in trainable]

    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for label, key, analytic in targets:
        def f_and_sig(v, key=key, is_input=label.startswith("input")):
            ins = [x.copy() for x in inputs]
            pv = dict(param_values)
            if is_input:
                ins[key] = v
            else:
                pv[key] = v
            g2, _, _, l2 = _primitive_forward(build, ins, pv, weights)
            return float(g2.value(l2)[0, 0, 0, 0]), kink_signature(g2)

        base = inputs[key] if label.startswith("input") else param_values[key]
        flat = base.reshape(-1)
        for i in range(flat.size):
            x = base.copy().reshape(-1)
            x[i] += step
            fp, sp = f_and_sig(x.reshape(base.shape))
            x[i] -= 2 * step
            fm, sm = f_and_sig(x.reshape(base.shape))
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            num = (fp - fm) / (2 * step)
            err = float(rel_error(analytic.reshape(-1)[i], num))
            checked += 1
            if err > worst:
                worst, worst_at = err, (label, i)
    return worst, worst_at, checked, skipped


PRIMITIVES = (
    "conv2d_3x3", "conv2d_1x1", "space_to_depth2", "depth_to_space2", "upsample_nearest2",
    "maxpool2", "avgpool2", "relu", "add", "concat_channels", "mean_scalar", "dot_const",
    "bce_with_logits",
)


def gradcheck_primitives(seeds=SEEDS, tol: float = GRAD_TOL) -> list[GradCheckReport]:
    reports = []
    for name in PRIMITIVES:
        worst, at, checked, skipped = 0.0, None, 0, 0
        for seed in seeds:
            w, a, c, s = check_primitive(name, seed)
            checked += c
            skipped += s
            if w >= worst:
                worst, at = w, (seed, *a) if a else None
        reports.append(GradCheckReport(name, worst, at, worst < tol, list(seeds), tol,
                                       checked=checked, skipped_near_kink=skipped))
    return reports


# -- end-to-end -----------------------------------------------------------


def random_batch(seed: int, size: int = 32, batch: int = 2, positive_rate: float = 0.1):
    """Uniform [0, 1] images and a Bernoulli coarse target mask."""
    rng = Rng(seed).spawn(f"batch{size}x{batch}")
    image = rng.uniform(batch * size * size).reshape(batch, 1, size, size)
    cells = size // 8
    target = (rng.uniform(batch * cells * cells) < positive_rate).astype(float).reshape(batch, 1, cells, cells)
    return image, target


def model_loss(model: Model, image, target, sever_gils: bool = False, gils_input=None):
    g = Graph()
    h = model.forward(g, image, sever_gils=sever_gils, gils_input=gils_input)
    loss = ops.bce_with_logits(g, h.logits, target)
    return g, h, loss


def gradcheck_end_to_end(
    spec: ArchitectureSpec, seed: int, size: int = 32, per_tensor: int = 10,
    steps=STEP_SWEEP, tol: float = GRAD_TOL,
) -> GradCheckReport:
    """FD check of the training loss w.r.t. sampled coordinates of every parameter tensor.

    Where the C2 branch sits behind a stop-gradient, the perturbed forwards
    feed the branch the unperturbed C2 value: that is the function whose
    derivative the tape computes.
    """
    model = Model(spec, seed)
    image, target = random_batch(seed, size)
    g, h, loss = model_loss(model, image, target)
    frozen = None
    if h.gils_source is not None and g.nodes[h.gils_source].barrier:
        frozen = g.value(h.c2).copy()
    base_sig = kink_signature(g)
    g.backward(loss)
    analytic = {p.name: p.grad.copy() for p in model.parameters}
    pick = Rng(seed).spawn(f"fd-coords:{spec.kind.value}")

    def evaluate(param, flat_index, delta):
        saved = param.value
        bumped = saved.copy()
        bumped.reshape(-1)[flat_index] += delta
        param.value = bumped
        try:
            g2, _, l2 = model_loss(model, image, target, gils_input=frozen)
            return float(g2.value(l2)[0, 0, 0, 0]), kink_signature(g2)
        finally:
            param.value = saved

    per_step = {h: 0.0 for h in steps}
    worst_at, checked, skipped, sampled = None, 0, 0, []
    for param in model.parameters:
        want = min(per_tensor, param.size)
        tried = 0
        got = 0
        while got < want and tried < 10 * want:
            tried += 1
            i = int(pick.integers(0, param.size)[0])
            vals = {}
            kinked = False
            for h in steps:
                fp, sp = evaluate(param, i, h)
                fm, sm = evaluate(param, i, -h)
                if sp != base_sig or sm != base_sig:
                    kinked = True
                    break
                vals[h] = (fp - fm) / (2 * h)
            if kinked:
                skipped += 1
                continue
            got += 1
            checked += 1
            sampled.append((param.name, i))
            a = analytic[param.name].reshape(-1)[i]
            for h, num in vals.items():
                err = float(rel_error(a, num))
                if err > per_step[h]:
                    per_step[h] = err
                    if h == FD_STEP:
                        worst_at = (param.name, i)
    worst = per_step[FD_STEP]
    return GradCheckReport(
        f"end_to_end:{spec.kind.value}:{size}", worst, worst_at, worst < tol, [seed], tol,
        checked=checked, skipped_near_kink=skipped, step_sweep={str(h): v for h, v in per_step.items()},
        sampled=sampled,
    )


def validate_oracle() -> dict:
    """Closed-form checks of the finite-difference oracle itself."""
    mean_fd = finite_difference_grad(lambda x: x.mean(), np.random.default_rng(0).random((1, 1, 2, 2)))
    quad_fd = finite_difference_grad(lambda x: np.sum(x * x), np.array([1.0, 2.0]))
    return {
        "mean": float(np.abs(mean_fd - 0.25).max()),
        "sum_of_squares": float(np.abs(quad_fd - np.array([2.0, 4.0])).max()),
    }


# -- superposition and path decomposition ---------------------------------


def _stack(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def _norm(a) -> float:
    return float(np.linalg.norm(a))


def check_superposition(spec: ArchitectureSpec, seed: int, size: int = 32, batch: int = 2) -> DecompositionReport:
    """Shared fusion gradient vs the in-order sum of its two per-use gradients."""
    if not spec.shares_fusion:
        raise ContractError(f"{spec.kind.value} does not share fusion parameters")
    model = Model(spec, seed)
    image, target = random_batch(seed, size, batch)
    g, _, loss = model_loss(model, image, target)
    g.backward(loss)
    fusion = model.convs["fusion"].params
    full, uses, bitwise = [], [[], []], True
    for p in fusion:
        parts = g.per_use_grads(p)
        if len(parts) != 2:
            raise ContractError(f"{p.name} has {len(parts)} use sites, expected 2")
        total = parts[0].copy()
        total += parts[1]
        bitwise &= np.array_equal(total, p.grad)
        full.append(p.grad)
        uses[0].append(parts[0])
        uses[1].append(parts[1])
    full_v = _stack(full)
    residual = float(np.abs(full_v - (_stack(uses[0]) + _stack(uses[1]))).max())
    return DecompositionReport(
        "superposition", spec.kind.value, seed, "theta_share", _norm(full_v),
        {"use_site_1": _norm(_stack(uses[0])), "use_site_2": _norm(_stack(uses[1]))},
        residual, bitwise and residual == 0.0, bitwise, size,
    )


def decomposition_edges(g: Graph, h) -> tuple[set, set]:
    """Edge sets whose masking isolates the direct and the indirect path.

    direct:   block the second fusion call's parameter edges, keeping the
              chain O -> T -> (first fusion).
    indirect: block the O -> T edge, keeping only what reaches the fusion
              parameters at the second call.
    """
    first, second = h.fusions
    slot_t = g.nodes[second.concat].inputs.index(first.out)
    direct_blocked = {(second.conv, PARAM_SLOT), (second.bias, PARAM_SLOT)}
    indirect_blocked = {(second.concat, slot_t)}
    return direct_blocked, indirect_blocked


def check_path_decomposition(spec: ArchitectureSpec, seed: int, size: int = 32, batch: int = 2) -> list[DecompositionReport]:
    """Direct + indirect masked backwards against the full backward.

    Targets: ``X1`` (first operand of the first fusion) and ``theta_1`` (the
    parameters of the first fusion call, which are the shared parameters
    when fusion weights are shared).
    """
    if spec.kind not in TWO_FUSION_KINDS:
        raise ContractError(f"{spec.kind.value} has no two-step fusion to decompose")
    model = Model(spec, seed)
    image, target = random_batch(seed, size, batch)
    g, h, loss = model_loss(model, image, target)
    direct_blocked, indirect_blocked = decomposition_edges(g, h)
    direct = g.backward_masked(loss, direct_blocked)
    indirect = g.backward_masked(loss, indirect_blocked)
    full = g.backward(loss)

    first = h.fusions[0]
    x1 = g.nodes[first.concat].inputs[0]
    theta = [g.nodes[first.conv].param.name, g.nodes[first.bias].param.name]
    targets = {
        "X1": lambda m: np.ravel(m[x1]),
        "theta_1": lambda m: _stack(m.params[name] for name in theta),
    }
    reports = []
    for label, pick in targets.items():
        a, b, c = pick(full), pick(direct), pick(indirect)
        residual = float(np.abs(a - (b + c)).max())
        ok = residual < DECOMP_TOL
        if spec.kind is Kind.NO_SHARING:
            ok = ok and not np.any(c)
        reports.append(DecompositionReport(
            "path_decomposition", spec.kind.value, seed, label, _norm(a),
            {"direct": _norm(b), "indirect": _norm(c)}, residual, ok,
            bool(np.array_equal(a, b + c)), size,
        ))
    return reports


# -- gradient isolation ---------------------------------------------------


def check_isolation(spec: ArchitectureSpec, seed: int, size: int = 32, batch: int = 2) -> IsolationReport:
    """Backbone gradients of ``spec`` vs Variant2 with the C2 branch cut out.

    The reference feeds the C2 branch from a fresh leaf holding C2's value,
    so forward values agree bitwise and only gradient routing differs.
    """
    model = Model(spec, seed)
    reference = Model(ArchitectureSpec(Kind.VARIANT2), seed)
    for p, q in zip(model.backbone_parameters(), reference.backbone_parameters()):
        if p.name != q.name or not np.array_equal(p.value, q.value):
            raise ContractError(f"backbone weights differ at {p.name}")
    image, target = random_batch(seed, size, batch)

    g, _, loss = model_loss(model, image, target)
    g.backward(loss)
    gr, _, loss_r = model_loss(reference, image, target, sever_gils=True)
    gr.backward(loss_r)

    diffs = {
        p.name: float(np.abs(p.grad - q.grad).max())
        for p, q in zip(model.backbone_parameters(), reference.backbone_parameters())
    }
    gils = model.convs.get("gils")
    gils_norm = _norm(_stack(p.grad for p in gils.params)) if gils else 0.0
    expect_identical = spec.kind in (Kind.VARIANT2,)
    if expect_identical:
        passed = all(
            np.array_equal(p.grad, q.grad)
            for p, q in zip(model.backbone_parameters(), reference.backbone_parameters())
        ) and gils_norm > 0
    else:
        passed = diffs["backbone.stage1.weight"] > 0
    return IsolationReport(spec.kind.value, seed, size, diffs, gils_norm, expect_identical, passed)
