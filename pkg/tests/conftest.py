import numpy as np
import pytest

from wavedense.io import save_image


def fd_grad(f, x, step=1e-5):
    """Central-difference gradient of scalar f() w.r.t. every entry of x (test-side oracle)."""
    g = np.zeros(x.shape)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def max_rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def _gray(name):
    import skimage.data

    im = getattr(skimage.data, name)()
    if im.ndim == 3:
        im = im[..., :3] @ np.array([0.299, 0.587, 0.114])
    return np.asarray(im, dtype=np.float64) / 255.0


TRAIN_SOURCES = ["camera", "moon", "coins", "text", "page", "clock", "grass", "gravel", "brick", "cell"]
TEST_SOURCES = ["astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry"]


def crops(sources, per_image, size, seed):
    rng = np.random.default_rng(seed)
    out = []
    for name in sources:
        im = _gray(name)
        for k in range(per_image):
            y = rng.integers(0, im.shape[0] - size + 1)
            x = rng.integers(0, im.shape[1] - size + 1)
            # round-trip through 8 bits so files and arrays agree exactly
            out.append((f"{name}_{k}.pgm", np.round(im[y:y + size, x:x + size] * 255) / 255))
    return out


def tiny_images(n, size, seed=0):
    """Small synthetic 8-bit images for fast plumbing tests."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    out = []
    for k in range(n):
        img = 0.5 + 0.3 * np.sin(5 * xx + k) * np.cos(3 * yy) + 0.05 * rng.random((size, size))
        out.append((f"tiny_{k}.pgm", np.round(np.clip(img, 0, 1) * 255) / 255))
    return out


def write_folder(folder, images):
    folder.mkdir(parents=True, exist_ok=True)
    for name, img in images:
        save_image(folder / name, img)
    return folder


@pytest.fixture(scope="session")
def train_images():
    """20 natural grayscale 128x128 crops (2 per source image)."""
    return crops(TRAIN_SOURCES, 2, 128, seed=0)


@pytest.fixture(scope="session")
def test_images():
    """10 held-out 96x96 crops from source images never used for training."""
    return crops(TEST_SOURCES, 2, 96, seed=1)


@pytest.fixture(scope="session")
def test_folder(tmp_path_factory, test_images):
    return write_folder(tmp_path_factory.mktemp("testset"), test_images)
