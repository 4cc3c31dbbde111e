import numpy as np
import pytest
from hypothesis import settings

from promptpose.cloud import EmbeddedCloud, RigidTransform
from promptpose.synth import random_rotation

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# one line per acceptance criterion, printed in the terminal summary
CRITERIA_LINES = []


def record_criterion(number, title, ok, detail):
    CRITERIA_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_transform(rng, scale=1.0, spread=0.5) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-spread, spread, 3), scale)


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def brute_force_dbscan(points, eps, min_pts):
    """Reference DBSCAN from a dense distance matrix and explicit BFS.

    Border points take the cluster of their nearest core neighbor, lower
    index on ties; clusters are numbered by their smallest member.
    """
    n = len(points)
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    near = d2 <= eps * eps
    core = near.sum(axis=1) >= min_pts
    comp = np.full(n, -1)
    ncomp = 0
    for s in range(n):
        if not core[s] or comp[s] >= 0:
            continue
        comp[s] = ncomp
        queue = [s]
        while queue:
            u = queue.pop()
            for v in np.flatnonzero(near[u] & core):
                if comp[v] < 0:
                    comp[v] = ncomp
                    queue.append(v)
        ncomp += 1
    labels = comp.copy()
    for i in range(n):
        if core[i]:
            continue
        cands = [j for j in range(n) if core[j] and near[i, j] and j != i]
        if cands:
            best = min(cands, key=lambda j: (d2[i, j], j))
            labels[i] = comp[best]
    # renumber by smallest member
    remap = {}
    for lab in labels:
        if lab >= 0 and lab not in remap:
            remap[lab] = len(remap)
    return np.array([remap.get(lab, -1) for lab in labels]), len(remap)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def plane_cloud():
    g = np.linspace(0, 1, 21)
    x, y = np.meshgrid(g, g)
    return EmbeddedCloud(np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)]))
