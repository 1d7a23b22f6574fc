import json
import os

import numpy as np
import pytest
from PIL import Image

os.environ.setdefault("APP_ENV", "test")
os.environ.setdefault("PROMPTSEG_LOG_LEVEL", "WARNING")

# Stray PROMPTSEG_* settings from the developer's shell would leak into config tests.
for _key in [k for k in os.environ if k.startswith("PROMPTSEG_") and k not in ("PROMPTSEG_LOG_LEVEL", "PROMPTSEG_RUN_SLOW")]:
    del os.environ[_key]


def write_sample(root, sample_id, label_map, dataset="demo", labels=None, image=None):
    """Write one image/mask pair under root and return its manifest entry."""
    label_map = np.asarray(label_map, dtype=np.uint8)
    if image is None:
        image = np.zeros(label_map.shape + (3,), dtype=np.uint8)
        image[..., 0] = label_map * 60
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(root / "images" / f"{sample_id}.png")
    Image.fromarray(label_map).save(root / "masks" / f"{sample_id}.png")
    return {
        "id": sample_id,
        "image": f"images/{sample_id}.png",
        "mask": f"masks/{sample_id}.png",
        "dataset": dataset,
        "labels": labels or {1: "polyp"},
    }


def write_manifest(root, entries):
    path = root / "manifest.jsonl"
    path.write_text("".join(json.dumps(e) + "\n" for e in entries), encoding="utf-8")
    return path


@pytest.fixture
def tiny_corpus(tmp_path):
    """Two datasets, four samples, 16×16 label maps."""
    entries = []
    for i in range(3):
        label_map = np.zeros((16, 16), dtype=np.uint8)
        label_map[2 + i:6 + i, 3:8] = 1
        label_map[10:14, 9 + i // 2:13] = 2
        entries.append(
            write_sample(tmp_path, f"colon_{i}", label_map, dataset="colon", labels={1: "Polyp", 2: "instrument"})
        )
    label_map = np.zeros((16, 12), dtype=np.uint8)
    label_map[4:9, 2:6] = 1
    entries.append(write_sample(tmp_path, "chest_0", label_map, dataset="chest", labels={1: "lung"}))
    return write_manifest(tmp_path, entries)
