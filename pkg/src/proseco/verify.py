"""Self-contained oracle suites behind ``proseco verify``.

Every suite pits a production routine against an independently written
reference (brute-force enumeration, explicit loops in 64-bit, finite
differences, hand arithmetic) and reports how many cases agreed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import BoxN, giou_loss, giou_loss_tensor, iou, l1_coord_loss_tensor, pairwise_iou
from .config import RunConfig
from .detector import Detector, DetectorConfig, ProposalBatch, init_params
from .matching import MatchAssignment, brute_force, hungarian
from .objectives import (
    cross_similarities, global_loss, infonce_loss, locnce_loss, locsce_loss, teacher_relations,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-2


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    total: int = 0
    failures: list[str] = field(default_factory=list)

    def record(self, ok: bool, label: str) -> None:
        self.total += 1
        if ok:
            self.passed += 1
        else:
            self.failures.append(label)

    @property
    def ok(self) -> bool:
        return self.passed == self.total

    def summary(self) -> str:
        return f"{self.name}: {self.passed}/{self.total} passed"


# -- random fixtures ---------------------------------------------------------------


def random_boxes(rng: np.random.Generator, shape) -> np.ndarray:
    """Valid (cx, cy, w, h) arrays well inside the unit square."""
    centers = rng.uniform(0.2, 0.8, tuple(shape) + (2,))
    sizes = rng.uniform(0.05, 0.4, tuple(shape) + (2,))
    return np.concatenate([centers, sizes], axis=-1).astype(np.float32)


def boxes_off_kinks(rng: np.random.Generator, k: int, others: np.ndarray, gap: float = 1e-2) -> np.ndarray:
    """Random boxes whose corners keep ``gap`` away from the paired boxes' corners.

    Min/max/clamp in IoU terms are not differentiable where corners coincide,
    nor is the L1 term where coordinates coincide;
    finite differences straddling such a kink disagree with any one-sided gradient.
    """
    others = np.asarray(others, dtype=np.float64)
    for _ in range(1000):
        cand = random_boxes(rng, (k,))
        ca, co = corners_of(cand), corners_of(others)
        diffs = [np.abs(ca[:, i] - co[:, j]) for i, j in ((0, 0), (2, 2), (0, 2), (2, 0), (1, 1), (3, 3), (1, 3), (3, 1))]
        diffs.append(np.abs(cand - others))  # the L1 term's own kinks
        if min(float(d.min()) for d in diffs) >= gap:
            return cand
    raise RuntimeError("could not draw boxes away from kinks")


def corners_of(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], axis=1)


def random_batch(rng: np.random.Generator, b: int, n: int, d: int = 8, requires_grad=False) -> ProposalBatch:
    z = rng.normal(size=(b, n, d))
    z /= np.linalg.norm(z, axis=-1, keepdims=True)
    return ProposalBatch(Tensor(z, requires_grad=requires_grad),
                         Tensor(random_boxes(rng, (b, n)), requires_grad=requires_grad))


def random_matching(rng: np.random.Generator, b: int, n: int) -> list[MatchAssignment]:
    return [MatchAssignment([(j, int(s)) for j, s in enumerate(rng.permutation(n))], 0.0) for _ in range(b)]


def toy_config(b: int, n: int, **overrides) -> RunConfig:
    base = dict(batch_size=b, num_queries=n, num_ss_boxes=0)
    if b == 1:
        base["relation_mask"] = "self_only"
    base.update(overrides)
    return RunConfig(**base)


# -- independent references ---------------------------------------------------------


def reference_sce(zt, zs, sigma, tau, tau_t, lam, mode="as_written") -> float:
    """SCE with one positive per teacher proposal, written as explicit loops in 64-bit."""
    b, n, _ = zt.shape
    rows = [(i, j) for i in range(b) for j in range(n)]
    perm = [dict(s.pairs) for s in sigma]
    total = 0.0
    for (i, j) in rows:
        t = zt[i, j].astype(np.float64)
        allowed = [(k, m) for (k, m) in rows
                   if (k, m) != (i, j) and (mode == "self_only" or (k != i and m != j))]
        rel = np.array([t @ zt[k, m] / tau_t for (k, m) in allowed])
        rel = np.exp(rel - rel.max()) if len(rel) else rel
        rel = rel / rel.sum() if len(rel) else rel
        p_rel = {a: rel[q] for q, a in enumerate(allowed)}
        cross = np.array([t @ zs[k, m] / tau for (k, m) in rows], dtype=np.float64)
        log_p = cross - cross.max() - np.log(np.exp(cross - cross.max()).sum())
        for (k, m) in rows:
            w = lam * ((k, m) == (i, j)) + (1 - lam) * p_rel.get((k, m), 0.0)
            if w:
                total -= w * log_p[k * n + perm[k][m]]
    return total / (b * n)


def reference_infonce(zt, zs, sigma, tau) -> float:
    b, n, _ = zt.shape
    total = 0.0
    for i in range(b):
        perm = dict(sigma[i].pairs)
        for j in range(n):
            logits = np.array([zt[i, j].astype(np.float64) @ zs[k, m] / tau for k in range(b) for m in range(n)])
            lse = logits.max() + np.log(np.exp(logits - logits.max()).sum())
            total -= logits[i * n + perm[j]] - lse
    return total / (b * n)


# -- suites -------------------------------------------------------------------------


def suite_matching(seed: int = 0, cases: int = 200) -> SuiteResult:
    res = SuiteResult("matching")
    rng = np.random.default_rng(seed)
    for c in range(cases):
        rows, cols = (int(v) for v in rng.integers(1, 8, size=2))
        if c % 2 == 0:
            cost = rng.integers(-20, 21, size=(rows, cols)).astype(np.float64)
        else:
            cost = rng.normal(size=(rows, cols))
        best, _ = brute_force(cost)
        got = hungarian(cost)
        vals = [cost[i, j] for i, j in got.pairs]
        exact = c % 2 == 0
        ok = len(got) == min(rows, cols) and (
            float(sum(vals)) == best if exact else abs(float(sum(vals)) - best) <= 1e-6
        )
        res.record(ok, f"case {c}: {rows}x{cols}")
    return res


def objective_case(rng: np.random.Generator):
    """One random toy batch: ``(teacher, student, sigma, cfg)``."""
    b = int(rng.choice([1, 2, 4]))
    n = int(rng.choice([2, 4, 8]))
    lam = float(rng.choice([0.0, 0.5, 1.0, rng.uniform()]))
    teacher, student = random_batch(rng, b, n), random_batch(rng, b, n)
    return teacher, student, random_matching(rng, b, n), toy_config(b, n, lambda_sce=lam, delta=1.0)


def suite_objectives(seed: int = 0, cases: int = 100) -> SuiteResult:
    """Reductions at delta=1 are compared in 64-bit so the check measures the
    formula, not float32 summation order."""
    res = SuiteResult("objectives")
    rng = np.random.default_rng(seed)
    for c in range(cases):
        with T.precision(np.float64):
            teacher, student, sigma, cfg = objective_case(rng)
            got = locsce_loss(teacher, student, sigma, cfg).item()
            a = locnce_loss(teacher, student, sigma, cfg).item()
            i = infonce_loss(teacher, student, sigma, cfg).item()
        want = reference_sce(teacher.embeddings.data, student.embeddings.data, sigma,
                             cfg.tau, cfg.tau_t, cfg.lambda_sce, cfg.relation_mask)
        ref = reference_infonce(teacher.embeddings.data, student.embeddings.data, sigma, cfg.tau)
        res.record(abs(got - want) <= 1e-6, f"case {c}: locsce(delta=1) vs SCE")
        res.record(abs(a - i) <= 1e-6 and abs(i - ref) <= 1e-6, f"case {c}: locnce(delta=1) vs infonce")
        rel = teacher_relations(teacher.embeddings, cfg.tau_t, cfg.relation_mask).values.data
        cross = cross_similarities(teacher.embeddings, student.embeddings, cfg.tau).values.data
        b, n = cfg.batch_size, cfg.num_queries
        res.record(np.allclose(rel.sum(axis=1), 1.0, atol=1e-5) and np.allclose(cross.sum(axis=1), 1.0, atol=1e-5)
                   and cross.shape == (b * n, b * n), f"case {c}: row normalisation")
    return res


def suite_geometry(seed: int = 0, cases: int = 200) -> SuiteResult:
    res = SuiteResult("geometry")
    rng = np.random.default_rng(seed)
    for c in range(cases):
        a_arr, b_arr = random_boxes(rng, (2,)).astype(np.float64)
        a, b = BoxN(*a_arr), BoxN(*b_arr)
        v = iou(a, b)
        res.record(v == iou(b, a) and 0.0 <= v <= 1.0, f"case {c}: iou symmetry/bounds")
        s = float(rng.uniform(0.3, 1.0))
        scaled = [BoxN.from_corners(*(np.array(x.to_corners()) * s)) for x in (a, b)]
        res.record(abs(iou(*scaled) - v) <= 1e-6, f"case {c}: iou scale invariance")
        g = giou_loss(a, b)
        res.record(0.0 <= g <= 2.0 and 1.0 - g <= v + 1e-12, f"case {c}: giou bounds")
    left = BoxN.from_corners(0.0, 0.0, 1 / 3, 1 / 3)
    right = BoxN.from_corners(2 / 3, 0.0, 1.0, 1 / 3)
    res.record(abs(giou_loss(left, right) - 4 / 3) <= 1e-9, "disjoint worked case 4/3")
    res.record(abs(iou(BoxN.from_corners(0, 0, 2 / 3, 2 / 3), BoxN.from_corners(1 / 3, 1 / 3, 1, 1)) - 1 / 7) <= 1e-9,
               "overlap worked case 1/7")
    for c in range(20):
        m = pairwise_iou(random_boxes(rng, (int(rng.integers(1, 9)),)))
        res.record(np.all(np.diag(m) == 1.0) and np.array_equal(m, m.T), f"pairwise {c}: unit diagonal")
    return res


def _square_broken(x: Tensor) -> Tensor:
    """x**2 with a deliberately wrong backward (drops the factor 2)."""
    return T.make_op(x.data * x.data, (x,), lambda g: ((x, g * x.data),), "broken_square")


def grad_probes(seed: int = 0) -> dict:
    """Named ``(f, x)`` pairs whose analytic gradients are checked numerically."""
    rng = np.random.default_rng(seed)
    b, n = 2, 4
    cfg = toy_config(b, n, num_ss_boxes=2)
    teacher = random_batch(rng, b, n)
    student = random_batch(rng, b, n)
    sigma = random_matching(rng, b, n)
    sigma_box = [MatchAssignment([(0, 1), (1, 3)], 0.0), MatchAssignment([(0, 0), (1, 2)], 0.0)]
    ss = [boxes_off_kinks(rng, 2, student.boxes.data[i][[p for _, p in sigma_box[i].pairs]]) for i in range(b)]
    target_np = random_boxes(rng, (5,))
    target = Tensor(target_np)
    z_raw = rng.normal(size=(b, n, 8))

    def with_z(fn):
        def f(z):
            zs = T.l2_normalize(z.reshape(b * n, 8)).reshape(b, n, 8)
            return fn(ProposalBatch(zs, student.boxes))
        return f

    det_cfg = DetectorConfig(num_queries=3, d_model=8, d_proj=4, proj_hidden=8, input_size=16, grid_size=4)
    det = Detector(det_cfg)
    params = init_params(det_cfg, seed)
    img = rng.uniform(size=(16, 16, 3))

    def detector_probe(name):
        def f(w):
            p = dict(params)
            p[name] = w
            out = det.forward_batch(p, [img])
            return out.embeddings.sum() + out.boxes.sum()
        return f, Tensor(params[name].data)

    probes = {
        "giou_loss": (lambda x: giou_loss_tensor(x, target).sum(), Tensor(boxes_off_kinks(rng, 5, target_np))),
        "l1_coord_loss": (lambda x: l1_coord_loss_tensor(x, target).sum(), Tensor(boxes_off_kinks(rng, 5, target_np))),
        "locsce_loss": (with_z(lambda s: locsce_loss(teacher, s, sigma, cfg)), Tensor(z_raw)),
        "infonce_loss": (with_z(lambda s: infonce_loss(teacher, s, sigma, cfg)), Tensor(z_raw)),
        "locnce_loss": (with_z(lambda s: locnce_loss(teacher, s, sigma, cfg)), Tensor(z_raw)),
        "global_loss(boxes)": (
            lambda x: global_loss(teacher, ProposalBatch(student.embeddings, x), sigma, sigma_box, ss, cfg)[0],
            Tensor(student.boxes.data),
        ),
        "global_loss(embeddings)": (
            with_z(lambda s: global_loss(teacher, s, sigma, sigma_box, ss, cfg)[0]), Tensor(z_raw),
        ),
    }
    for name in ("queries", "attn.wq", "attn.wv", "mlp.w1", "proj.w2", "box.w"):
        probes[f"detector:{name}"] = detector_probe(name)
    return probes


def suite_grad(seed: int = 0) -> SuiteResult:
    res = SuiteResult("grad")
    for name, (f, x) in grad_probes(seed).items():
        err = T.grad_check(f, x, step=1e-4)
        logger.debug("grad %s: rel err %.2e", name, err)
        res.record(err < GRAD_TOLERANCE, f"{name}: rel err {err:.3e}")
    x = Tensor(np.random.default_rng(seed).uniform(0.5, 1.5, size=6))
    err = T.grad_check(lambda t: _square_broken(t).sum(), x)
    res.record(err >= GRAD_TOLERANCE, f"negative control not detected (rel err {err:.3e})")
    return res


SUITES = {
    "matching": suite_matching,
    "objectives": suite_objectives,
    "geometry": suite_geometry,
    "grad": suite_grad,
}


def run_suites(name: str = "all", seed: int = 0, out=print) -> bool:
    names = list(SUITES) if name == "all" else [name]
    ok = True
    for n in names:
        res = SUITES[n](seed=seed)
        out(res.summary())
        for f in res.failures[:10]:
            out(f"  FAIL {f}")
        ok &= res.ok
    return ok
