import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def corpus():
    from prismcad.sketch import build_corpus

    return build_corpus()


def sphere_sdf(n, radius=0.3, center=(0.5, 0.5, 0.5)):
    c = (np.arange(n) + 0.5) / n
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    return np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2) - radius


def box_sdf(n, lo, hi):
    """Exact signed distance of an axis-aligned box."""
    c = (np.arange(n) + 0.5) / n
    pts = np.stack(np.meshgrid(*([c] * len(lo)), indexing="ij"), axis=-1)
    lo, hi = np.asarray(lo), np.asarray(hi)
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    q = np.abs(pts - mid) - half
    outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0)
    return outside + inside


TOY_COUNTS = {"rectangle": 100, "circle": 1}


@pytest.fixture(scope="session")
def toy_ckpt2d(tmp_path_factory):
    """Checkpoint of a small image autoencoder trained on rectangles and a circle (under a minute)."""
    from prismcad.config import Train2DConfig
    from prismcad.trainkit import train_2d

    out = tmp_path_factory.mktemp("toy2d") / "m2.ckpt"
    cfg = Train2DConfig(out=str(out), scale=0.25, epochs=20, patience=30, holdout=4, augment=1, lr=1e-3,
                        corpus_counts=TOY_COUNTS)
    train_2d(cfg)
    return out


@pytest.fixture(scope="session")
def toy_model2d(toy_ckpt2d):
    from prismcad.trainkit import load_model2d

    return load_model2d(toy_ckpt2d)[0]


@pytest.fixture(scope="session")
def toy_corpus():
    from prismcad.sketch import build_corpus

    return build_corpus(TOY_COUNTS)


ACCEPTANCE_LINES = []


def report_criterion(number, title, passed, detail=""):
    line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
