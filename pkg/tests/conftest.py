"""Shared fixtures: dataset locations and a tiny hand-written TU fixture."""

from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = REPO_ROOT / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def mutag_dir() -> Path:
    d = DATA_DIR / "MUTAG"
    if not d.is_dir():
        pytest.skip("MUTAG data directory not present")
    return DATA_DIR


TINY_FILES = {
    "TINY_A.txt": "1, 2\n2, 1\n1, 3\n3, 1\n2, 3\n3, 2\n4, 5\n5, 4\n",
    "TINY_graph_indicator.txt": "1\n1\n1\n2\n2\n",
    "TINY_graph_labels.txt": "1\n-1\n",
    "TINY_node_labels.txt": "0\n0\n1\n1\n2\n",
}


@pytest.fixture()
def tiny_tu(tmp_path) -> Path:
    """Two graphs: a triangle and a single edge, with node labels."""
    root = tmp_path / "TINY"
    root.mkdir()
    for fname, text in TINY_FILES.items():
        (root / fname).write_text(text)
    return tmp_path
