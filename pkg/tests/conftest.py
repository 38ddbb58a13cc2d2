import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kdgat.can_ingest import CanMessage, Label
from kdgat.graph_builder import build_windows

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True)
settings.load_profile("default")


def msg(t, can_id, payload=(0,) * 8, label=Label.BENIGN):
    payload = tuple(payload)
    return CanMessage(float(t), can_id, len(payload), payload, label)


def random_messages(rng, n, ids=(0x0A0, 0x130, 0x316, 0x545), attack_rate=0.0):
    out = []
    for k in range(n):
        attack = rng.random() < attack_rate
        can_id = int(rng.integers(0, 2048)) if attack else int(rng.choice(ids))
        data = tuple(int(b) for b in rng.integers(0, 256, size=int(rng.integers(0, 9))))
        out.append(msg(k * 1e-3, can_id, data, Label.ATTACK if attack else Label.BENIGN))
    return out


def toy_graphs(n_graphs=240, window=10, seed=0):
    """Separable toy set: attack windows carry the reserved id 0x000."""
    rng = np.random.Generator(np.random.PCG64([seed, 99]))
    messages = []
    for g in range(n_graphs):
        attack = g % 4 == 0
        for k in range(window):
            can_id = int(rng.choice([0x100, 0x200, 0x300]))
            label = Label.BENIGN
            if attack and k % 3 == 0:
                can_id, label = 0x000, Label.ATTACK
            messages.append(msg((g * window + k) * 1e-3, can_id,
                                tuple(int(b) for b in rng.integers(0, 256, size=8)), label))
    return build_windows(messages, window, window)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


RESOLVABLE = 1e-6   # below this, central differences at eps=1e-5 drown in round-off
ABS_TOL = 1e-9


def split_grad_check(f, x, coords=None, eps=1e-5):
    """(max relative error on resolvable coords, max absolute error on the rest).

    Coordinates whose analytic gradient is below ``RESOLVABLE`` (for example
    attention slots that cancel under softmax shift invariance) are compared
    absolutely, since the relative metric would only measure round-off.
    """
    from kdgat import tensor as T
    from kdgat.tensor import Tensor, grad_check

    x = x if isinstance(x, Tensor) else Tensor(x)
    probe = Tensor(x.data.copy(), requires_grad=True)
    f(probe).backward()
    ga = np.zeros(x.size) if probe.grad is None else probe.grad.reshape(-1)
    idx = np.arange(x.size) if coords is None else np.asarray(coords)
    big = idx[np.abs(ga[idx]) >= RESOLVABLE]
    small = idx[np.abs(ga[idx]) < RESOLVABLE]
    rel = grad_check(f, x, eps=eps, coords=big) if big.size else 0.0
    worst_abs = 0.0
    flat = x.data.reshape(-1)
    with T.no_grad():
        for i in small:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            worst_abs = max(worst_abs, abs((hi - lo) / (2 * eps) - ga[i]))
    return rel, worst_abs


@pytest.fixture(scope="session")
def quickstart_runs(tmp_path_factory):
    """Two full quickstart runs with the bundled config; CPU seconds of the first one."""
    import time

    from kdgat.cli import main

    runs = []
    for name in ("run_a", "run_b"):
        out = tmp_path_factory.mktemp(name)
        t0 = time.process_time()
        code = main(["quickstart", str(out)])
        runs.append({"dir": out, "code": code, "cpu": time.process_time() - t0})
    return runs
