"""Property suites packaged for the ``verify`` command and the test-suite.

Each suite runs at tiny shapes and returns a :class:`SuiteResult` whose
checks name the offending case when they fail.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import adapters as ak
from . import autograd as ag
from .adapters import AdapterSpec
from .autograd import Tensor
from .census import count_base, count_composition, census_diff
from .composition import PRESET_NAMES, CompositionSpec, attach, build_preset, trainable_parameters
from .data import featurize, pattern_classification
from .encoder import (ROBERTA_BASE, TINY, Batch, HashTokenizer, ModelConfig, classify,
                      init_model, prompt_prepend)
from .train import AdamW, task_loss

GRAD_TOL = 1e-4
FD_STEP = 1e-3
IDENTITY_TOL = 1e-10

# reference totals at the RoBERTa-base shape: (trainable, percent text)
REFERENCE_TOTALS = {
    "unipelt-lib": (11_083_376, "8.892"),
    "unipelt-paper": (11_083_376, "8.892"),
    "pt-unipelt-lib": (11_091_056, "8.898"),
    "pt-unipelt-paper": (11_091_056, "8.898"),
    "ia3-prefix-seqbn": (10_852_988, "8.707"),
    "unipelt-stack3": (33_250_128, "26.68"),
}
BASE_TOTAL = 124_645_632


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float | int | str | None = None
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        val = "" if self.value is None else f" value={self.value}"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}{val}{extra}"


@dataclass
class SuiteResult:
    suite: str
    checks: list[CheckResult] = field(default_factory=list)
    summary: str = ""
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def add(self, name: str, passed: bool, value=None, detail: str = "") -> None:
        self.checks.append(CheckResult(name, bool(passed), value, detail))

    def lines(self) -> list[str]:
        out = [c.line() for c in self.checks]
        if self.summary:
            out.append(self.summary)
        verdict = "passed" if self.passed else f"FAILED ({len(self.failures)} checks)"
        out.append(f"suite {self.suite}: {verdict} in {self.elapsed:.2f}s")
        return out


# ---------------------------------------------------------------------------
# gradient checks


def _fd_check(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], rng,
              coords: int | None = None, step: float = FD_STEP) -> tuple[float, str]:
    """Worst relative error between backward and central differences."""
    for t in tensors.values():
        t.grad = None
    with ag.Tape() as tape:
        loss = loss_fn()
    ag.backward(tape, loss)

    def f():
        with ag.no_grad():
            return loss_fn().item()

    worst, where = 0.0, ""
    for name, t in tensors.items():
        if coords is None or t.size <= coords:
            idx = np.arange(t.size)
        else:
            idx = rng.choice(t.size, coords, replace=False)
        num = ag.numerical_grad(f, t, step, idx)
        grad = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)[idx]
        err = ag.relative_error(grad, num)
        if err > worst:
            worst, where = err, name
    return worst, where


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def kernel_cases(rng) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """Small differentiable cases, one per primitive and adapter kernel."""
    cases = {}
    B, S, H, r = 2, 4, 6, 3
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]])

    a, b = _leaf(rng, 3, 5), _leaf(rng, 5, 4)
    w = Tensor(rng.standard_normal((3, 4)))
    cases["matmul+sigmoid"] = (lambda: ag.sum_(ag.sigmoid(ag.matmul(a, b)) * w), {"a": a, "b": b})

    xe = _leaf(rng, 3, 5)
    for kind in ("gelu", "tanh"):
        fn = getattr(ag, kind)
        cases[kind] = (lambda fn=fn: ag.sum_(fn(xe) * Tensor(np.arange(15.).reshape(3, 5))),
                       {"x": xe})

    xn, g, be = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    w5 = Tensor(rng.standard_normal((3, 5)))
    cases["layer_norm"] = (lambda: ag.sum_(ag.layer_norm(xn, g, be, 1e-5) * w5),
                           {"x": xn, "gamma": g, "beta": be})

    logits = _leaf(rng, 4, 3)
    labels = np.array([0, 2, 1, 2])
    cases["softmax_cross_entropy"] = (lambda: ag.softmax_cross_entropy(logits, labels),
                                      {"logits": logits})

    sc = _leaf(rng, 2, 3, 5)
    wts = Tensor(np.array([[0.3, 1, 1, 1, 0]] * 3 + [[0.7, 0.7, 1, 1, 1]] * 3).reshape(2, 3, 5))
    w_sm = Tensor(rng.standard_normal((2, 3, 5)))
    cases["weighted_softmax"] = (lambda: ag.sum_(ag.weighted_softmax(sc, wts) * w_sm), {"scores": sc})

    xg, gw, gb = _leaf(rng, B, S, H), _leaf(rng, H), _leaf(rng, 1)
    wg = Tensor(rng.standard_normal(B))
    cases["gate_value"] = (lambda: ag.sum_(ak.gate_value(xg, gw, gb, mask) * wg),
                           {"x": xg, "weight": gw, "bias": gb})

    xl, base = _leaf(rng, B, S, H), _leaf(rng, B, S, H)
    A, Bm = _leaf(rng, r, H), _leaf(rng, H, r)
    gw2, gb2 = _leaf(rng, H), _leaf(rng, 1)
    wl = Tensor(rng.standard_normal((B, S, H)))
    cases["lora_apply"] = (
        lambda: ag.sum_(ak.lora_apply(xl, base, A, Bm, 8.0, r, ak.gate_value(xl, gw2, gb2, mask)) * wl),
        {"x": xl, "base_out": base, "A": A, "B": Bm, "gate.weight": gw2, "gate.bias": gb2})

    k, v, f = _leaf(rng, B, S, H), _leaf(rng, B, S, H), _leaf(rng, B, S, 8)
    lk, lv, lf = _leaf(rng, H), _leaf(rng, H), _leaf(rng, 8)
    gate = _leaf(rng, B, scale=0.5)
    wk, wv, wf = (Tensor(rng.standard_normal(s)) for s in ((B, S, H), (B, S, H), (B, S, 8)))

    def ia3_loss():
        g = ag.sigmoid(gate)
        ko, vo, fo = ak.ia3_apply(k, v, f, lk, lv, lf, g)
        return ag.sum_(ko * wk) + ag.sum_(vo * wv) + ag.sum_(fo * wf)

    cases["ia3_apply"] = (ia3_loss, {"keys": k, "values": v, "ffn": f, "l_k": lk, "l_v": lv,
                                     "l_ff": lf, "gate": gate})

    L, P, R = 2, 3, 5
    emb, w1, b1 = _leaf(rng, P, H), _leaf(rng, H, R, scale=0.5), _leaf(rng, R)
    w2, b2 = _leaf(rng, R, 2 * L * H, scale=0.5), _leaf(rng, 2 * L * H)
    wp = Tensor(rng.standard_normal((L, 2, P, H)))
    cases["prefix_expand"] = (lambda: ag.sum_(ak.prefix_expand(emb, w1, b1, w2, b2, L) * wp),
                              {"embedding": emb, "w1": w1, "b1": b1, "w2": w2, "b2": b2})

    h = _leaf(rng, B, S, H)
    dw, db, uw, ub = _leaf(rng, H, 2), _leaf(rng, 2), _leaf(rng, 2, H), _leaf(rng, H)
    sg = _leaf(rng, B)
    ws = Tensor(rng.standard_normal((B, S, H)))
    cases["seqbn_apply"] = (
        lambda: ag.sum_(ak.seqbn_apply(h, dw, db, uw, ub, ag.sigmoid(sg)) * ws),
        {"h": h, "down.weight": dw, "down.bias": db, "up.weight": uw, "up.bias": ub, "gate": sg})

    e, pr = _leaf(rng, B, S, H), _leaf(rng, 3, H)
    wpp = Tensor(rng.standard_normal((B, S + 3, H)))
    cases["prompt_prepend"] = (lambda: ag.sum_(prompt_prepend(e, pr)[0] * wpp),
                               {"embeddings": e, "prompt": pr})
    return cases


def _model_case(preset: str, rng, cfg: ModelConfig = TINY):
    model = attach(init_model(cfg, 0, head="classification"), build_preset(preset), 1)
    # move every trainable tensor off its identity initialisation so all paths carry gradient
    for _, t in trainable_parameters(model):
        t.data[...] = rng.standard_normal(t.shape) * 0.3
    ids = rng.integers(4, cfg.vocab_size, (2, 5))
    batch = Batch(ids, np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]]))
    labels = np.array([0, 1])
    tensors = dict(trainable_parameters(model))
    return (lambda: ag.softmax_cross_entropy(classify(model, batch), labels)), tensors


def grad_suite(seed: int = 0, coords: int = 4, tol: float = GRAD_TOL) -> SuiteResult:
    """Backward vs central differences for every kernel and every preset."""
    t0 = time.perf_counter()
    res = SuiteResult("grad")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, (fn, tensors) in kernel_cases(rng).items():
        err, where = _fd_check(fn, tensors, rng)
        worst = max(worst, err)
        res.add(f"kernel {name}", err < tol, f"{err:.3e}", f"worst input {where}")
    for preset in PRESET_NAMES:
        fn, tensors = _model_case(preset, rng)
        err, where = _fd_check(fn, tensors, rng, coords=coords)
        worst = max(worst, err)
        res.add(f"model {preset}", err < tol, f"{err:.3e}", f"worst tensor {where}")
    res.summary = f"max relative error {worst:.3e} (tolerance {tol:g}, step {FD_STEP:g})"
    res.elapsed = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# identity at initialisation


def _probe_batch(cfg: ModelConfig, rng) -> Batch:
    ids = rng.integers(4, cfg.vocab_size, (3, 7))
    mask = np.ones((3, 7), dtype=np.int64)
    mask[1, 5:] = 0
    mask[2, 3:] = 0
    return Batch(ids, mask)


def identity_suite(seed: int = 0, cfg: ModelConfig = TINY, tol: float = IDENTITY_TOL) -> SuiteResult:
    """Adapted logits equal bare logits at the pass-through endpoint.

    Free-gate identity is also checked for the members whose initialisation
    alone is neutral (LoRA, IA3, bottleneck).
    """
    t0 = time.perf_counter()
    res = SuiteResult("identity")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for preset in PRESET_NAMES:
        spec = build_preset(preset)
        base = init_model(cfg, seed, head="classification")
        # a zero head would make every comparison trivially exact
        for name in base.head_names():
            base[name].data[...] = rng.standard_normal(base[name].shape)
        batch = _probe_batch(cfg, rng)
        with ag.no_grad():
            bare = classify(base, batch).data.copy()
            adapted = attach(base, spec, seed + 1)
            with adapted.passthrough():
                d = float(np.abs(classify(adapted, batch).data - bare).max())
        worst = max(worst, d)
        res.add(f"passthrough {preset}", d <= tol, f"{d:.3e}")

        neutral = tuple(m for m in spec.layer_members if m.kind in ("lora", "ia3", "seqbn"))
        sub = CompositionSpec(f"{preset}/neutral", neutral, spec.stack_depth)
        with ag.no_grad():
            d = float(np.abs(classify(attach(base, sub, seed + 1), batch).data - bare).max())
        worst = max(worst, d)
        kinds = "+".join(m.kind for m in neutral)
        res.add(f"free gates {preset} [{kinds}]", d == 0.0, f"{d:.3e}", "must be exact")
    res.summary = f"max logit delta {worst:.3e} (tolerance {tol:g})"
    res.elapsed = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# freeze contract


def freeze_suite(seed: int = 0, steps: int = 20, cfg: ModelConfig = TINY,
                 lr: float = 5e-4, batch_size: int = 16) -> SuiteResult:
    """After ``steps`` optimiser steps the backbone is bit-identical and adapters moved."""
    t0 = time.perf_counter()
    res = SuiteResult("freeze")
    data = pattern_classification(32, seed=seed)
    feat = featurize(data, HashTokenizer(cfg.vocab_size), 16)
    for preset in PRESET_NAMES:
        model = attach(init_model(cfg, seed, head="classification"), build_preset(preset), seed + 1)
        before = {n: t.data.copy() for n, t in model.named_parameters()}
        params = trainable_parameters(model)
        opt = AdamW([t for _, t in params], lr)
        rng = np.random.default_rng(seed)
        for _ in range(steps):
            idx = rng.choice(len(feat), batch_size, replace=False)
            opt.zero_grad()
            with ag.Tape() as tape:
                loss = task_loss(model, feat, idx, "train", rng)
            ag.backward(tape, loss)
            opt.step()
        mask = model.freeze_mask.trainable
        changed_frozen = [n for n, t in model.named_parameters()
                          if not mask[n] and t.data.tobytes() != before[n].tobytes()]
        stuck = [n for n in model.adapter_params
                 if np.array_equal(model.adapter_params[n].data, before[n])]
        res.add(f"backbone frozen {preset}", not changed_frozen, len(changed_frozen),
                f"first: {changed_frozen[0]}" if changed_frozen else "bit-identical")
        res.add(f"adapters moved {preset}", not stuck, len(stuck),
                f"first: {stuck[0]}" if stuck else f"{len(model.adapter_params)} tensors")
    res.elapsed = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# census


def random_case(rng) -> tuple[ModelConfig, CompositionSpec]:
    """A random small (config, composition) pair for oracle comparisons."""
    heads = int(rng.integers(1, 4))
    rf = int(rng.choice([1, 2, 4]))
    hidden = heads * rf * int(rng.integers(1, 4))
    prompt_len = int(rng.integers(1, 5))
    cfg = ModelConfig(num_layers=int(rng.integers(1, 4)), hidden=hidden, num_heads=heads,
                      ffn_inner=int(rng.integers(2, 20)), vocab_size=int(rng.integers(8, 40)),
                      max_positions=int(rng.integers(prompt_len + 4, 20)),
                      type_vocab=int(rng.integers(1, 3)))
    members = []
    kinds = [k for k in ak.KINDS if rng.random() < 0.6] or ["lora"]
    depth = 1 if "prompt" in kinds else int(rng.integers(1, 4))
    gated = lambda: bool(rng.random() < 0.7)  # noqa: E731
    for kind in kinds:
        if kind == "lora":
            tg = ("query", "value") if rng.random() < 0.7 else ("query",)
            members.append(AdapterSpec("lora", r=int(rng.integers(1, hidden + 1)),
                                       alpha=float(rng.choice([2.0, 8.0])), targets=tg,
                                       use_gating=gated()))
        elif kind == "ia3":
            tg = tuple(t for t in ak.IA3_TARGETS if rng.random() < 0.8) or ("value",)
            members.append(AdapterSpec("ia3", targets=tg, use_gating=gated()))
        elif kind == "prefix":
            members.append(AdapterSpec("prefix", prefix_length=int(rng.integers(1, 5)),
                                       reparam_hidden=int(rng.integers(1, 9)), use_gating=gated()))
        elif kind == "prompt":
            members.append(AdapterSpec("prompt", prompt_length=prompt_len, use_gating=False))
        else:
            members.append(AdapterSpec("seqbn", reduction_factor=rf, use_gating=gated()))
    return cfg, CompositionSpec("random", tuple(members), depth)


def census_suite(seed: int = 0, pairs: int = 50) -> SuiteResult:
    """Reference totals, differences, stack additivity and the allocation oracle."""
    t0 = time.perf_counter()
    res = SuiteResult("census")
    base = count_base(ROBERTA_BASE)
    res.add("base total", base.total == BASE_TOTAL, base.total, f"expected {BASE_TOTAL}")
    got = {}
    for preset, (total, pct) in REFERENCE_TOTALS.items():
        c = count_composition(build_preset(preset), ROBERTA_BASE)
        got[preset] = c
        ok = c.trainable_total == total and c.percent_text == pct
        res.add(f"reference {preset}", ok, f"{c.trainable_total}/{c.percent_text}%",
                f"expected {total}/{pct}%")
    d = census_diff(got["pt-unipelt-lib"], got["unipelt-lib"])
    res.add("prompt delta", d == {"prompt": 7680}, d)
    three = got["unipelt-stack3"].trainable_total
    res.add("stack additivity", three == 3 * got["unipelt-paper"].trainable_total, three)

    rng = np.random.default_rng(seed)
    bad = None
    for i in range(pairs):
        cfg, spec = random_case(rng)
        model = attach(init_model(cfg, 0), spec)
        alloc = model.adapter_census()
        closed = count_composition(spec, cfg).as_dict()
        base_ok = model.base.backbone_count() == count_base(cfg).total
        if alloc != closed or not base_ok:
            bad = f"case {i}: {cfg} {spec.dumps()!r}"
            break
    res.add(f"allocation oracle ({pairs} random pairs)", bad is None, None, bad or "exact")
    res.elapsed = time.perf_counter() - t0
    return res


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "grad": grad_suite,
    "identity": identity_suite,
    "freeze": freeze_suite,
    "census": census_suite,
}
