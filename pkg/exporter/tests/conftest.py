import numpy as np
import pytest
from PIL import Image


@pytest.fixture(scope="session")
def toy_source_dir(tmp_path_factory):
    """3 classes, 8 images: one colored shape per image, one binary mask."""
    root = tmp_path_factory.mktemp("toy-src")
    (root / "images").mkdir()
    class_names = ["bottle", "cat", "plane"]
    for name in class_names:
        (root / "masks" / name).mkdir(parents=True)
    rng = np.random.default_rng(9)
    for i in range(8):
        cls = class_names[i % 3]
        h, w = 96, 128
        img = rng.integers(0, 80, size=(h, w, 3), dtype=np.uint8)
        mask = np.zeros((h, w), dtype=np.uint8)
        cy, cx = int(rng.integers(24, h - 24)), int(rng.integers(32, w - 32))
        rh, rw = int(rng.integers(12, 22)), int(rng.integers(16, 28))
        mask[cy - rh:cy + rh, cx - rw:cx + rw] = 255
        img[mask > 0] = [200, 60 * (i % 3), 255 - 60 * (i % 3)]
        Image.fromarray(img).save(root / "images" / f"img{i:02d}.png")
        Image.fromarray(mask).save(root / "masks" / cls / f"img{i:02d}.png")
    return root
