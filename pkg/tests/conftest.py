import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _reset_inpaint_counter():
    from capaint.diffusion import reset_inpaint_call_count

    reset_inpaint_call_count()
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_sequence(frames, source_id="seq0", raw_range=(0.0, 1.0), kind="original"):
    from capaint.dataset import STSequence

    return STSequence(
        frames=np.asarray(frames, dtype=np.float32),
        raw_range=raw_range,
        source_id=source_id,
        kind=kind,
    )


def random_normalized_frames(rng, shape):
    """Frames uniformly in (-1, 1), safely inside the normalized range."""
    return (rng.random(shape, dtype=np.float32) * 1.98 - 0.99).astype(np.float32)
