import numpy as np
import pytest

from fgfm import tensor as tn
from fgfm.encoder import EncoderConfig
from fgfm.model import ModelConfig


@pytest.fixture(autouse=True)
def checked_mode():
    with tn.checked(True):
        yield


def central_difference(f, arr, h=1e-5):
    """d f / d arr by central differences; ``f`` re-reads ``arr`` in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        fp = f()
        arr[i] = orig - h
        fm = f()
        arr[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def tiny_model_config(**changes):
    enc = dict(embed_dim=8, num_heads=2, num_blocks=2, block_kind="conformer_lite", conv_module_kernel=5)
    enc.update(changes.pop("encoder", {}))
    values = dict(votes=2, frontend_channels=(4, 6))
    values.update(changes)
    return ModelConfig(encoder=EncoderConfig(**enc), **values)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


def model_gradient_check(seed, num_coords=24, h=1e-5):
    """Worst relative error between tape gradients and central differences for the full model.

    Checks ``num_coords`` random coordinates spread over all parameters plus one
    random direction over every parameter at once. Perturbations that change a
    voting decision are skipped (the loss is only piecewise smooth there).
    """
    from fgfm import model as M

    cfg = tiny_model_config(seed=seed)
    params = M.init_parameters(cfg)
    rng = np.random.default_rng(1000 + seed)
    wave = rng.normal(size=1600) * 0.1
    label = int(seed % 2)

    def run():
        logits, diag = M.forward(wave, cfg, params)
        picks = [tuple(s.indices) for s in diag.selections] + [tuple(diag.cross_selection.indices)]
        return tn.cross_entropy(logits, label), picks

    M.zero_grad(params)
    loss, picks = run()
    tn.backward(loss)
    grads = {k: p.grad.copy() for k, p in params.items()}

    def fd(apply):
        apply(+h)
        lp, pp = run()
        apply(-2 * h)
        lm, pm = run()
        apply(+h)
        if pp != picks or pm != picks:
            return None
        return (float(lp.data) - float(lm.data)) / (2 * h)

    worst, checked = 0.0, 0
    names = list(params)
    while checked < num_coords:
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(n)) for n in p.shape)

        def bump(d, p=p, idx=idx):
            p.data[idx] += d

        num = fd(bump)
        if num is None:
            continue
        worst = max(worst, rel_err(grads[name][idx], num, floor=1e-6))
        checked += 1

    direction = {k: rng.normal(size=p.shape) for k, p in params.items()}

    def step(d):
        for k, p in params.items():
            p.data += d * direction[k]

    num = fd(step)
    if num is not None:
        analytic = sum(float((grads[k] * direction[k]).sum()) for k in params)
        worst = max(worst, rel_err(analytic, num, floor=1e-6))
    M.zero_grad(params)
    return worst


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
    missing = [n for n in range(1, 12) if n not in results]
    if missing:
        terminalreporter.write_line(f"criteria not reached (errored or deselected): {missing}")
