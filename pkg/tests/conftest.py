import gzip
from pathlib import Path

import numpy as np
import pytest

from splitnn.data import IDX_IMAGES, IDX_LABELS, write_idx


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """IDX files built from the 5000-sample MNIST subset that ships with mlxtend."""
    mlxtend = pytest.importorskip("mlxtend.data")
    path = Path(mlxtend.__file__).parent / "data" / "mnist_5k.csv.gz"
    with gzip.open(path, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    out = tmp_path_factory.mktemp("mnist")
    write_idx(out / "train-images-idx3-ubyte", images, IDX_IMAGES)
    write_idx(out / "train-labels-idx1-ubyte", labels, IDX_LABELS)
    return out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte"


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
