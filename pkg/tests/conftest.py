import pytest

from sheafpc.experiments import make_chain
from sheafpc.relative import clamp
from sheafpc.sheaf import build_sheaf

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def chain234():
    """Scalar chain x -> h1 -> h2 -> y with weights 2, 3, 4."""
    return make_chain([1, 1, 1, 1], [2.0, 3.0, 4.0])


@pytest.fixture
def small_rel():
    """Scalar chain with weights (2, 1, 1), x = 1, y = 5."""
    sheaf = make_chain([1, 1, 1, 1], [2.0, 1.0, 1.0])
    return clamp(sheaf, {"x": [1.0], "y": [5.0]})


def random_sheaf(rng, max_vertices=8, max_dim=4, max_edges=None, square=False):
    n_v = int(rng.integers(2, max_vertices + 1))
    dims = [int(rng.integers(1, max_dim + 1)) for _ in range(n_v)]
    if square:
        dims = [dims[0]] * n_v
    ids = [f"v{i}" for i in range(n_v)]
    max_edges = max_edges or 2 * n_v
    n_e = int(rng.integers(1, max_edges + 1))
    edges = []
    for k in range(n_e):
        u, v = rng.choice(n_v, size=2, replace=False)
        edges.append((f"e{k}", ids[u], ids[v], rng.standard_normal((dims[v], dims[u]))))
    return build_sheaf(zip(ids, dims), edges)


def random_clamped(rng, **kw):
    """Random sheaf with a random (possibly empty) clamp leaving >= 1 free vertex."""
    sheaf = random_sheaf(rng, **kw)
    ids = sheaf.vertex_ids
    n_clamp = int(rng.integers(0, len(ids)))
    chosen = rng.choice(len(ids), size=n_clamp, replace=False)
    spec = {ids[i]: rng.standard_normal(sheaf.vertex(ids[i]).dim) for i in chosen}
    return clamp(sheaf, spec)
