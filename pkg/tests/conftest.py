import hypothesis
import numpy as np
import pytest

from dormantrec.core import Behavior, Catalog, Interaction, Item, UserSequence

hypothesis.settings.register_profile("default", max_examples=60, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=500, deadline=None)
hypothesis.settings.load_profile("default")

DAY = 86_400
NOW = 1_700_000_000


def make_item(item_id, category=("dept", "mid", "leaf"), price=100, sales=0, orders=0, dim=4, emb=None):
    if isinstance(category, str):
        category = ("dept", "mid", category)
    vec = np.zeros(dim) if emb is None else np.asarray(emb, dtype=np.float64)
    return Item(item_id, f"title {item_id}", price, tuple(category), sales, orders, vec)


def make_seq(user_id, events, profile_text=""):
    """events: iterable of (item_id, behavior-name, ts)."""
    inter = tuple(Interaction(i, Behavior.parse(b), ts) for i, b, ts in events)
    return UserSequence(user_id, inter, profile_text)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_catalog():
    return Catalog(make_item(f"i{k}", f"c{k % 3}", price=10 + k, sales=k, orders=k) for k in range(9))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
