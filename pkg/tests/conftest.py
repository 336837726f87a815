from __future__ import annotations

import numpy as np
import pytest

from entkit.documents import DocType, Document, Field


@pytest.fixture
def biden_doc() -> Document:
    return Document(
        id="d1",
        doc_type=DocType.AD,
        language="en",
        fields=(Field("title", "Joe Biden visited"),),
    )


def random_unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)
