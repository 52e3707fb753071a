import numpy as np
import pytest

from r2learn.data import MissingPattern, MultiSourceDataset, SourceData


def make_dataset(S=3, n=40, p=4, seed=0, split="train", noise=0.1):
    gen = np.random.default_rng(seed)
    w = gen.standard_normal(p)
    sources = []
    for s in range(S):
        X = gen.standard_normal((n, p))
        y = X @ (w + 0.1 * s) + noise * gen.standard_normal(n)
        sources.append(SourceData(X, y))
    return MultiSourceDataset(sources, split=split)


def make_blockwise(mask, dims=(3, 2), n=30, seed=0, split="train"):
    gen = np.random.default_rng(seed)
    mask = np.asarray(mask, dtype=bool)
    p = sum(dims)
    sources = []
    for s in range(mask.shape[0]):
        X = gen.standard_normal((n, p))
        y = X.sum(axis=1) + 0.1 * gen.standard_normal(n)
        start = 0
        for m, q in enumerate(dims):
            if not mask[s, m]:
                X[:, start:start + q] = np.nan
            start += q
        y = np.nan_to_num(X).sum(axis=1) + 0.1 * gen.standard_normal(n)
        sources.append(SourceData(X, y))
    return MultiSourceDataset(sources, dims, MissingPattern(mask), split=split)


@pytest.fixture
def small_data():
    return make_dataset()


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


def record_criterion(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} | {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
