"""Smoke test for the advopt_py extension.

Build and install first:  maturin build --release -m crates/py/Cargo.toml && pip install target/wheels/*.whl
"""

import json
import math
import random

import advopt_py as ap


def close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def check_model():
    m = ap.Model([4], [5], 3, seed=1)
    rng = random.Random(0)
    x = [rng.random() for _ in range(3 * 4)]
    y = [0, 2, 1]
    grad = m.grad(x, y)
    rows = m.per_example_grads(x, y)
    mean = [sum(col) / len(rows) for col in zip(*rows)]
    assert all(close(a, b, 1e-12) for a, b in zip(grad, mean))

    # Central differences on a few coordinates.
    p = m.params
    for k in (0, 7, len(p) - 1):
        up, down = list(p), list(p)
        up[k] += 1e-6
        down[k] -= 1e-6
        m.params = up
        lu = sum(m.forward(x, y)[0]) / 3
        m.params = down
        ld = sum(m.forward(x, y)[0]) / 3
        m.params = p
        assert close((lu - ld) / 2e-6, grad[k], 1e-5), k

    adv, clean, loss = m.pgd(x, y, ap.Attack(epsilon=0.1, steps=5, step_size=0.03))
    assert max(abs(a - b) for a, b in zip(adv, x)) <= 0.1 + 1e-12
    assert all(l >= c for l, c in zip(loss, clean))
    return m, x, y


def check_optimizers(m, x, y):
    for kind in ("msgd", "mgnc", "sngm"):
        opt = ap.Optimizer(kind, m.num_params, lr=0.0)
        before = m.params
        opt.step(m, grad=m.grad(x, y))
        assert m.params == before, kind
    opt = ap.Optimizer("engm", m.num_params, lr=0.05, alpha=0.5)
    before = m.params
    opt.step(m, per_example=m.per_example_grads(x, y))
    assert m.params != before
    gamma = ap.Gamma(tau=1)
    fast = ap.Optimizer("a-engm", m.num_params, lr=0.05, alpha=0.5)
    d = fast.fast_step(m, gamma, x, y, alpha=0.5)
    assert d["refreshed"] and d["backward_passes"] == 2 + len(y)


def check_stats():
    assert close(ap.overfitting_pct(50.87, 44.15), 13.21, 1e-3)
    slope, intercept = ap.linreg([0.0, 1.0, 2.0], [1.0, 3.0, 5.0])
    assert close(slope, 2.0, 1e-12) and close(intercept, 1.0, 1e-12)
    w = ap.estimate_weights([0.5, 1.0, 4.0], 0.0, 1.0, 1.0)
    assert w == [1.0, 1.0, 0.25]
    assert close(ap.pearson([1, 2, 3], [2, 4, 7]), 0.9933992677987828, 1e-12)
    rows = [[1.0, 0.0], [0.0, 1.0]]
    assert close(ap.grad_mu(rows), 1.0, 1e-15) and close(ap.grad_sigma2(rows), 0.5, 1e-15)
    c = ap.clip_transform([3.0, 4.0], 1.0)
    assert close(math.hypot(*c), 1.0, 1e-15)


def check_training():
    cfg = ap.TrainConfig(
        "data.kind = synthetic-blobs\ndata.subset = 300\ndata.val_size = 100\n"
        "model.hidden = 8\nattack.epsilon = 0\neval.epsilon = 0\ntrain.epochs = 5\nstats.probe_size = 50\n"
    )
    cfg.set("optim.milestones", "")
    r = ap.train(cfg)
    hist = r.history()
    assert len(hist) == 5 and hist[-1]["nat_acc"] > 0.9
    summary = json.loads(r.summary_json())
    assert summary["optimizer"] == "msgd" and 1 <= r.best_epoch <= 5
    try:
        ap.TrainConfig("no.such.key = 1\n")
    except ValueError as e:
        assert "no.such.key" in str(e)
    else:
        raise AssertionError("unknown key accepted")


if __name__ == "__main__":
    m, x, y = check_model()
    check_optimizers(m, x, y)
    check_stats()
    check_training()
    print("advopt_py smoke test passed")
