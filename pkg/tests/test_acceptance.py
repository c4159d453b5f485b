"""Acceptance suite: every criterion at its stated tolerance, one summary line each.

The slow desk-scale comparisons (criteria 6-8) share one cache of trained
runs so each configuration is trained once per session.
"""
import json
import math
import time
from contextlib import contextmanager

import numpy as np

from flatland import tensor as T
from flatland.checkpoint import load as load_checkpoint
from flatland.cli import main as cli_main
import flatland.models as models
from flatland.distill import DistillConfig, TeacherState, cross_entropy, kl_term, mesa_train_step
from flatland.experiments import alrs_vs_cosine
from flatland.landscape import Direction, loss_slice_1d, sample_direction, zero_direction
from flatland.models import PyramidSpec, build_model, fold_batchnorm, load_model, save_model
from flatland.optim import make_optimizer
from flatland.pipeline import mean_loss
from flatland.regularizers import ShakeDropConfig, draw_sample
from flatland.sched import AlrsState, alrs_step
from flatland.tensor import Parameter, Tensor

from conftest import record_acceptance
from desk_runs import DESK, SEEDS, dfp_run, single_run


@contextmanager
def criterion(number, title, budget_s):
    info = {"detail": ""}
    start = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - start
        assert elapsed < budget_s, f"runtime {elapsed:.1f}s exceeds {budget_s}s"
    except BaseException as exc:
        record_acceptance(number, title, False, f"{info['detail']} {type(exc).__name__}: {exc}".strip()[:300])
        raise
    record_acceptance(number, title, True, f"{info['detail']} {time.perf_counter() - start:.1f}s".strip())


# ---------------------------------------------------------------------------
# 1. ALRS exactness
# ---------------------------------------------------------------------------

def d(x, rate=0.9):
    return rate * x


# (name, AlrsState kwargs, losses, expected lrs, expected terminate flags or None for all False)
ALRS_TABLE = [
    ("warmup only", dict(warmup_epochs=5), [5, 4, 3, 2, 1],
     [0.1 * 1 / 5, 0.1 * 2 / 5, 0.1 * 3 / 5, 0.1 * 4 / 5, 0.1], None),
    ("warmup then plateau", dict(warmup_epochs=2), [1.0] * 6,
     [0.1 * 1 / 2, 0.1, d(0.1), d(d(0.1)), d(d(d(0.1))), d(d(d(d(0.1))))], None),
    ("steep descent", {}, [4, 2, 1, 0.5], [0.1, 0.1, 0.1, 0.1], None),
    ("worked: warmup", dict(warmup_epochs=5), [3.0], [0.02], None),
    ("worked: plateau", dict(warmup_epochs=5, current_epoch=9, current_lr=0.1, curr_loss=1.0), [0.999],
     [d(0.1)], None),
    ("worked: steep descent", dict(warmup_epochs=5, current_epoch=9, current_lr=0.1, curr_loss=2.0), [1.0],
     [0.1], None),
    ("worked: termination", dict(warmup_epochs=5, current_epoch=9, current_lr=1e-4, curr_loss=1.0), [1.0],
     [d(1e-4)], [True]),
    ("small increase decays", {}, [1, 1.05, 1.1], [0.1, d(0.1), d(d(0.1))], None),
    ("large absolute change", {}, [10, 9], [0.1, 0.1], None),
    ("large relative change", {}, [0.1, 0.05], [0.1, 0.1], None),
    ("termination", dict(target_lr=0.001, decay_rate=0.5, min_lr=0.0005), [1, 1, 1],
     [0.001, d(0.001, 0.5), d(d(0.001, 0.5), 0.5)], [False, False, True]),
    ("no termination in warmup", dict(warmup_epochs=3, min_lr=0.05), [1, 1, 1, 1],
     [0.1 * 1 / 3, 0.1 * 2 / 3, 0.1, d(0.1)], None),
    ("large oscillation", {}, [1, 1.5, 1, 1.5, 1], [0.1] * 5, None),
    ("small oscillation", {}, [1, 1.1, 1, 1.1], [0.1, d(0.1), d(d(0.1)), d(d(d(0.1)))], None),
    ("mixed, literal rule", {}, [1, 0.999, 1, 0.5, 0.6],
     [0.1, d(0.1), d(d(0.1)), d(d(0.1)), d(d(d(0.1)))], None),
    ("mixed, prose rule", dict(rule="prose"), [1, 0.999, 1, 0.5, 0.6],
     [0.1, 0.1, d(0.1), d(0.1), d(d(0.1))], None),
    ("one warmup epoch", dict(warmup_epochs=1), [1, 1, 1], [0.1, d(0.1), d(d(0.1))], None),
    ("decay rate 0.8", dict(target_lr=0.01, decay_rate=0.8, min_lr=1e-5), [1, 1, 1],
     [0.01, d(0.01, 0.8), d(d(0.01, 0.8), 0.8)], None),
    ("relative threshold boundary", dict(slope_threshold=0.25, diff_threshold=1.0), [1.25, 1.0, 0.875],
     [0.1, 0.1, d(0.1)], None),
    ("absolute threshold boundary", dict(slope_threshold=1.0, diff_threshold=0.5), [2.0, 1.5, 1.25],
     [0.1, 0.1, d(0.1)], None),
    ("noisy descent", {}, [3, 2, 1.9, 1, 0.95, 0.94], [0.1, 0.1, d(0.1), d(0.1), d(d(0.1)), d(d(d(0.1)))], None),
    ("longer warmup, larger target", dict(target_lr=0.2, warmup_epochs=4), [1.0] * 6,
     [0.2 * 1 / 4, 0.2 * 2 / 4, 0.2 * 3 / 4, 0.2, d(0.2), d(d(0.2))], None),
]


def _plateau_to_termination():
    # independent loop: lr shrinks by 0.9 per epoch after the first until it drops below 1e-4
    lrs, lr = [0.1], 0.1
    while lr >= 1e-4:
        lr = 0.9 * lr
        lrs.append(lr)
    flags = [False] * (len(lrs) - 1) + [True]
    return ("plateau to termination", {}, [1.0] * len(lrs), lrs, flags)


ALRS_TABLE.append(_plateau_to_termination())


def test_c01_alrs_exactness():
    with criterion(1, "ALRS replays scripted loss sequences exactly", 1.0) as info:
        assert len(ALRS_TABLE) >= 20
        for name, kw, losses, want_lr, want_stop in ALRS_TABLE:
            kw = {"target_lr": 0.1, **kw}
            s = AlrsState(**kw)
            got = [alrs_step(s, loss) for loss in losses]
            assert [lr for lr, _ in got] == want_lr, name
            assert [stop for _, stop in got] == (want_stop or [False] * len(losses)), name
        assert len(ALRS_TABLE[-1][2]) == 67
        info["detail"] = f"{len(ALRS_TABLE)} sequences"


# ---------------------------------------------------------------------------
# 2. gradient correctness
# ---------------------------------------------------------------------------

TWO_BLOCK = PyramidSpec(input_resolution=8, base_channels=4, total_channel_add=4, num_stages=2, blocks_per_stage=1,
                        bottleneck_ratio=2, num_classes=3)


def _loss(model, x, y):
    model.step = 0  # replay the same ShakeDrop draws
    return cross_entropy(model(x), y)


def _derivative(f):
    """Central difference, shrinking the step while a ReLU kink sits inside it.

    Across a kink the one-sided slopes disagree and a central difference
    measures neither side, so the step is reduced until they agree.
    """
    for eps in (1e-6, 1e-7, 1e-8):
        up, mid, dn = f(eps), f(0.0), f(-eps)
        fwd, bwd = (up - mid) / eps, (mid - dn) / eps
        if abs(fwd - bwd) <= 1e-4 * max(abs(fwd), abs(bwd), 1e-3):
            break
    return (up - dn) / (2 * eps)


def _fd_check(seed):
    cfg = ShakeDropConfig(per_example=True, tie_gamma_to_alpha=True)
    with T.default_dtype(np.float64):
        model = build_model(TWO_BLOCK, cfg, seed=seed)
        rng = np.random.default_rng(seed + 1000)
        x = rng.random((4, 3, 8, 8))
        y = rng.integers(0, 3, 4)
        T.backward(_loss(model, x, y))
        params = model.named_parameters()
        names = sorted(params)
        grads = {k: params[k].grad.copy() for k in names}
        orig = {k: params[k].data.copy() for k in names}
        direction = {k: rng.standard_normal(params[k].shape) for k in names}
        norm = math.sqrt(sum(float(np.sum(v ** 2)) for v in direction.values()))
        direction = {k: v / norm for k, v in direction.items()}

        def along(offsets):
            def f(t):
                for k in names:
                    params[k].data[...] = orig[k] + t * offsets.get(k, 0.0)
                with T.no_grad():
                    return _loss(model, x, y).item()
            return f

        fd = _derivative(along(direction))
        an = sum(float(np.sum(grads[k] * direction[k])) for k in names)
        worst = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        # individual coordinates with gradients large enough to resolve
        for _ in range(6):
            k = names[rng.integers(len(names))]
            idx = tuple(int(rng.integers(s)) for s in params[k].shape)
            if abs(grads[k][idx]) < 1e-4:
                continue
            e = np.zeros(params[k].shape)
            e[idx] = 1.0
            fd = _derivative(along({k: e}))
            worst = max(worst, abs(fd - grads[k][idx]) / max(abs(fd), abs(grads[k][idx])))
        for k in names:
            params[k].data[...] = orig[k]
    return worst


def _grads(model, x, y):
    T.zero_grad(model.parameters())
    T.backward(_loss(model, x, y))
    return {k: p.grad.copy() for k, p in model.named_parameters().items()}


def test_c02_gradient_correctness(monkeypatch):
    with criterion(2, "finite differences over 50 seeds; tied override equals plain chain rule", 120.0) as info:
        worst = max(_fd_check(seed) for seed in range(50))
        assert worst <= 1e-3, f"max relative error {worst:.3g}"

        cfg = ShakeDropConfig(per_example=True, tie_gamma_to_alpha=True)
        rng = np.random.default_rng(0)
        x = rng.random((6, 3, 8, 8)).astype(np.float32)
        y = rng.integers(0, 3, 6)
        model = build_model(TWO_BLOCK, cfg, seed=3)
        with_override = _grads(model, x, y)

        def plain(x_res, x_blk, c, r, gate_prob=None):
            # same draws, no override: backward is the ordinary chain rule
            sample = draw_sample(c, r, x_blk.shape[0], gate_prob)
            return T.scaled_join(x_res, x_blk, sample.forward_coefficient), sample

        monkeypatch.setattr(models, "shakedrop_forward", plain)
        without = _grads(model, x, y)
        for k in with_override:
            assert with_override[k].tobytes() == without[k].tobytes(), k
        info["detail"] = f"max rel err {worst:.2e}"


# ---------------------------------------------------------------------------
# 3. ShakeDrop expectation
# ---------------------------------------------------------------------------

def test_c03_shakedrop_expectation():
    with criterion(3, "ShakeDrop Monte-Carlo mean within 3 SE of 0.75; eval bit-deterministic", 10.0) as info:
        cfg = ShakeDropConfig(gate_prob=0.5, alpha_range=(0.0, 1.0), per_example=True)
        n = 100_000
        coef = np.asarray(draw_sample(cfg, np.random.default_rng(2024), batch=n).forward_coefficient).ravel()
        assert coef.size == n
        mean, se = coef.mean(), coef.std(ddof=1) / math.sqrt(n)
        closed = 0.5 + 0.5 * 0.5  # p + E[alpha](1 - p)
        assert closed == cfg.expected_coefficient() == 0.75
        assert abs(mean - closed) <= 3 * se, (mean, se)

        model = build_model(PyramidSpec(), ShakeDropConfig(), seed=0)
        x = np.random.default_rng(1).random((8, 3, 16, 16)).astype(np.float32)
        model(x)
        model.eval()
        outs = {model(x).data.tobytes() for _ in range(10)}
        assert len(outs) == 1
        info["detail"] = f"mean {mean:.5f} +- {se:.5f}"


# ---------------------------------------------------------------------------
# 4. MESA identities
# ---------------------------------------------------------------------------

def test_c04_mesa_identities():
    with criterion(4, "KL zero at equal logits; rho=0 copies student; teacher never receives gradient", 10.0):
        rng = np.random.default_rng(0)
        for tau in (1.0, 2.0, 5.0):
            for literal in (False, True):
                logits = rng.normal(0, 3, (16, 4)).astype(np.float32)
                cfg = DistillConfig(temperature=tau, kl_literal_order=literal)
                assert kl_term(Tensor(logits), logits.copy(), cfg).item() == 0.0

        spec = PyramidSpec()
        student = build_model(spec, ShakeDropConfig(per_example=True), seed=0)
        x = rng.random((8, 3, 16, 16)).astype(np.float32)
        y = rng.integers(0, 4, 8)
        teacher = TeacherState(student, ema_decay=0.0)
        opt = make_optimizer("sgd", student.parameters(), 0.1)
        mesa_train_step(student, teacher, (x, y), DistillConfig(), opt)
        sp = student.named_parameters()
        for name, arr in teacher.shadow.items():
            assert arr.tobytes() == sp[name].data.tobytes(), name
        for name, b in student.buffers().items():
            assert teacher.model.buffers()[name].tobytes() == b.tobytes(), name

        teacher = TeacherState(student, ema_decay=0.999)
        before = {k: v.copy() for k, v in teacher.shadow.items()}
        mesa_train_step(student, teacher, (x, y), DistillConfig(), opt)
        for p in teacher.model.parameters():
            assert not np.any(p.grad)
            assert not p.requires_grad
        moved = [k for k in before if not np.array_equal(before[k], teacher.shadow[k])]
        assert moved  # the EMA did run


# ---------------------------------------------------------------------------
# 5. BN-fold equivalence
# ---------------------------------------------------------------------------

def test_c05_bn_fold_equivalence():
    with criterion(5, "folded and unfolded desk models agree within 1e-5 on 100 inputs", 30.0) as info:
        spec = PyramidSpec()
        model = build_model(spec, ShakeDropConfig(per_example=True, linear_decay=True), seed=0)
        rng = np.random.default_rng(0)
        for _ in range(5):
            model(rng.random((16, 3, 16, 16)).astype(np.float32))
        for name, p in model.named_parameters().items():
            if ".bn" in name or name.startswith("bn"):
                p.data[...] = p.data + rng.normal(0, 0.3, p.shape)
        model.eval()
        folded = fold_batchnorm(model)
        x = rng.random((100, 3, 16, 16)).astype(np.float32)
        diff = float(np.max(np.abs(folded(x).data.astype(np.float64) - model(x).data)))
        assert diff <= 1e-5
        info["detail"] = f"max |diff| {diff:.1e}"


# ---------------------------------------------------------------------------
# 6-8. desk-scale directional comparisons
# ---------------------------------------------------------------------------

def test_c06_dfp_stage_ordering():
    with criterion(6, "DFP stage 2 >= stage 1 and stage 4 >= stage 3 (mean of 5 seeds, -0.5% slack)", 1800.0) as info:
        accs = np.array([dfp_run(seed).test_acc for seed in SEEDS])
        mean = accs.mean(axis=0)
        info["detail"] = "stage means " + " ".join(f"{a:.4f}" for a in mean)
        assert mean[1] >= mean[0] - 0.005, f"stage 2 {mean[1]:.4f} < stage 1 {mean[0]:.4f} - 0.5%"
        assert mean[3] >= mean[2] - 0.005, f"stage 4 {mean[3]:.4f} < stage 3 {mean[2]:.4f} - 0.5%"


def test_c07_learning_rate_flatness():
    with criterion(7, "lr 0.1 no sharper than lr 0.005; lr 0.05 ~ lr 0.1 within 1%; lr 0.005 trails by >= 1%",
                   1800.0) as info:
        table = {lr: np.array([single_run(seed, lr) for seed in SEEDS]) for lr in (0.005, 0.05, 0.1)}
        acc = {lr: t[:, 0].mean() for lr, t in table.items()}
        sharp = {lr: t[:, 1].mean() for lr, t in table.items()}
        info["detail"] = ("acc " + " ".join(f"{lr}:{a:.4f}" for lr, a in acc.items())
                          + "; sharpness " + " ".join(f"{lr}:{v:.4f}" for lr, v in sharp.items())
                          + "; per-seed acc " + " ".join(f"{lr}:{np.round(t[:, 0], 3).tolist()}"
                                                         for lr, t in table.items()))
        assert sharp[0.1] <= sharp[0.005]
        assert abs(acc[0.05] - acc[0.1]) <= 0.01
        assert acc[0.005] <= min(acc[0.05], acc[0.1]) - 0.01


def test_c08_alrs_vs_cosine():
    with criterion(8, "ALRS (decay 0.9) >= cosine at equal epoch budget, mean over 5 seeds", 1200.0) as info:
        alrs = {}
        for seed in SEEDS:
            acc, _, epochs = single_run(seed, 0.1)
            alrs[seed] = (acc, epochs)
        rows = alrs_vs_cosine(SEEDS, 0.1, DESK, alrs_runs=alrs)
        for a_acc, c_acc, epochs, cos_epochs in rows:
            assert cos_epochs == epochs  # equal budget
        diff = float(np.mean([a - c for a, c, _, _ in rows]))
        info["detail"] = (f"mean ALRS - cosine {diff:+.4f}; per-seed (alrs, cosine, epochs) "
                          + " ".join(f"({a:.3f}, {c:.3f}, {e})" for a, c, e, _ in rows))
        assert diff >= 0


# ---------------------------------------------------------------------------
# 9. landscape identities
# ---------------------------------------------------------------------------

class _Quadratic:
    def __init__(self, theta):
        self.theta = Parameter(np.array([theta], dtype=np.float64), name="theta", dtype=np.float64)

    def named_parameters(self):
        return {"theta": self.theta}


def test_c09_landscape_identities():
    with criterion(9, "origin exact, restoration bit-exact, zero direction constant, quadratic to 1e-12", 60.0):
        model = build_model(PyramidSpec(), ShakeDropConfig(per_example=True, linear_decay=True), seed=0)
        rng = np.random.default_rng(0)
        x = rng.random((64, 3, 16, 16)).astype(np.float32)
        y = rng.integers(0, 4, 64)
        model(x)
        before = {k: v.tobytes() for k, v in model.state_dict().items()}
        direct = mean_loss(model, x, y)
        sl = loss_slice_1d(model, (x, y), sample_direction(model, "filter", rng), 1.0, 41)
        assert sl.values[20] == direct
        assert {k: v.tobytes() for k, v in model.state_dict().items()} == before
        flat = loss_slice_1d(model, (x, y), zero_direction(model), 1.0, 11)
        assert np.all(flat.values == flat.values[5])

        loss = lambda m, _: float(np.sum(m.theta.data ** 2))
        for theta in (0.0, 0.5, -1.25, 3.0):
            q = _Quadratic(theta)
            qs = loss_slice_1d(q, None, Direction({"theta": np.ones(1)}, "none"), 1.0, 3, loss_fn=loss)
            np.testing.assert_allclose(qs.values, [(theta - 1) ** 2, theta ** 2, (theta + 1) ** 2], rtol=0,
                                       atol=1e-12)
            assert q.theta.data[0] == theta


# ---------------------------------------------------------------------------
# 10. end-to-end determinism
# ---------------------------------------------------------------------------

E2E_CONFIG = {
    "seed": 0,
    "shakedrop": {"per_example": True, "linear_decay": True},
    "stages": [{"stage_index": k, "max_epochs": 3} for k in (1, 2, 3, 4)],
}


def test_c10_end_to_end_determinism(tmp_path, monkeypatch):
    with criterion(10, "cmd_train twice gives identical metrics; checkpoints round-trip bit-exactly", 600.0):
        monkeypatch.delenv("FLATLAND_SEED", raising=False)
        cfg = tmp_path / "desk.json"
        cfg.write_text(json.dumps(E2E_CONFIG))
        for run in ("a", "b"):
            assert cli_main(["train", str(cfg), "--out", str(tmp_path / run)]) == 0
        for k in (1, 2, 3, 4):
            name = f"metrics_stage{k}.csv"
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
            ckpt = tmp_path / "a" / f"stage{k}.ckpt"
            tensors, header = load_checkpoint(ckpt)
            model, _ = load_model(ckpt)
            state = model.state_dict()
            assert set(state) == set(tensors)
            for key, arr in tensors.items():
                assert state[key].dtype == arr.dtype and state[key].tobytes() == arr.tobytes(), key
            again = tmp_path / f"again{k}.ckpt"
            save_model(again, model, **header["meta"])
            assert again.read_bytes() == ckpt.read_bytes()
