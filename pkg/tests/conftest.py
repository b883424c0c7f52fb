import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20250817)


def pad_to(values, dim):
    """Embed a short test vector into a full-width space, zero-padded."""
    arr = np.zeros(dim, dtype=np.float32)
    v = np.asarray(values, dtype=np.float32)
    arr[: v.shape[0]] = v
    return arr


SYNTHETIC_CLASSES = ["dog", "cat", "car", "chair", "bottle", "person"]


def synthetic_instances(n, seed=0, size=(48, 64)):
    """Dataset-shaped records: random photos with one box mask each."""
    from clipaway.coco import CocoInstance

    gen = np.random.default_rng(seed)
    h, w = size
    out = []
    for i in range(n):
        image = gen.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        y0 = int(gen.integers(4, h // 2))
        x0 = int(gen.integers(4, w // 2))
        bh = int(gen.integers(6, h // 3))
        bw = int(gen.integers(6, w // 3))
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[y0 : y0 + bh, x0 : x0 + bw] = 1
        out.append(CocoInstance(
            image_id=100 + i,
            instance_id=i + 1,
            class_label=SYNTHETIC_CLASSES[i % len(SYNTHETIC_CLASSES)],
            bbox=(float(x0), float(y0), float(bw), float(bh)),
            image=image,
            mask=mask,
        ))
    return out
