"""Smoke test for the linattn extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/py`,
then run `python crates/py/python/smoke_test.py`.
"""

import math
import tempfile

import linattn


def close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    assert "setting1" in linattn.presets()

    batch = linattn.Batch.sample(d=5, n=20, count=32, seed=1)
    assert len(batch) == 32
    prompt = batch.prompts[0]
    assert len(prompt) == 6 and len(prompt[0]) == 21
    assert prompt[5][20] == 0.0

    model = linattn.Model(layers=3, d=5, seed=0)
    assert len(model) == 3 * 2 * 36
    loss = model.loss(batch)
    grad = model.grad(batch)
    assert loss > 0.0 and len(grad) == len(model)

    # gradient against a central difference along a random-ish direction
    direction = [math.sin(i + 1.0) for i in range(len(model))]
    base = model.params
    h = 1e-5
    model.params = [p + h * v for p, v in zip(base, direction)]
    up = model.loss(batch)
    model.params = [p - h * v for p, v in zip(base, direction)]
    down = model.loss(batch)
    model.params = base
    fd = (up - down) / (2 * h)
    analytic = sum(g * v for g, v in zip(grad, direction))
    assert close(fd, analytic, 1e-6), (fd, analytic)

    hv = model.hvp(batch, direction)
    quad = sum(a * b for a, b in zip(hv, direction)) / sum(v * v for v in direction)
    assert close(model.directional_smoothness(batch, direction), quad, 1e-4)
    diag = model.hessian_diagonal(batch)
    assert len(diag) == len(model)
    assert linattn.robust_condition_number([3.0, -1.0]) == 3.0
    assert linattn.robust_condition_number([3.0, -1.0, -2.0]) is None

    zero = linattn.Model(layers=3, d=5, init_std=0.0)
    assert all(g == 0.0 for g in zero.grad(batch))

    config = linattn.preset_config("setting1", "adam")
    config = config.replace("iterations = 2000", "iterations = 20")
    config = config.replace("curvature_iters = [750, 1250]", "curvature_iters = []")
    trace = linattn.train(config, 0)
    assert len(trace["rows"]) == 20
    assert trace["diverged_at"] is None

    noise = linattn.noise_at_init(config.replace("noise_samples = 1000", "noise_samples = 50"), 0)
    assert noise["sample_count"] == 50 and len(noise["noise_norms"]) == 50

    fit = linattn.fit_generalized_smoothness([1.0 * i for i in range(12)], [2.0 + 0.5 * i for i in range(12)])
    assert close(fit["l0"], 2.0, 1e-12) and close(fit["l1"], 0.5, 1e-12)

    with tempfile.TemporaryDirectory() as root:
        out = linattn.reproduce("fig4_left", root, seeds=[0], iterations=10)
        assert out["dir"].endswith("fig4_left")

    try:
        linattn.reproduce("fig99", "/tmp")
    except ValueError as e:
        assert "fig99" in str(e)
    else:
        raise AssertionError("unknown target accepted")

    try:
        linattn.Model(layers=0, d=5)
    except ValueError:
        pass
    else:
        raise AssertionError("zero layers accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
