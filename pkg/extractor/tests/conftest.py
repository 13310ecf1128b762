import json
import struct
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

TOY_CAPTIONS = [
    ("cap-00", "a red boat drifting on a calm lake"),
    ("cap-01", "two dogs chasing a yellow ball"),
    ("cap-02", "a plate of pasta with basil leaves"),
    ("cap-03", "snow covered mountains under a blue sky"),
    ("cap-04", "a child reading a book by the window"),
    ("cap-05", "street musicians playing violin at dusk"),
    ("cap-06", "an old lighthouse on a rocky shore"),
    ("cap-07", "fresh oranges stacked at a market stall"),
    ("cap-08", "a cyclist climbing a steep forest road"),
    ("cap-09", "rain falling on a quiet city square"),
    ("cap-10", "a black cat sleeping on a warm radiator"),
    ("cap-11", "hot air balloons rising over farmland"),
    ("cap-12", "a carpenter sanding a wooden chair"),
    ("cap-13", "waves breaking against a concrete pier"),
    ("cap-14", "a field of sunflowers facing the morning sun"),
    ("cap-15", "chess pieces arranged for a new game"),
]


def write_corpus(path: Path, records=TOY_CAPTIONS) -> Path:
    lines = [json.dumps({"id": rid, "text": text}) for rid, text in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def make_image(seed: int, size=(40, 30)) -> Image.Image:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    return Image.fromarray(pixels, mode="RGB")


def write_images(directory: Path, ids, ext=".png") -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for row, rid in enumerate(ids):
        make_image(1000 + row).save(directory / (rid + ext))
    return directory


def read_emb(path: Path):
    """Parse an embedding file by hand: header, payload, ID sidecar."""
    blob = Path(path).read_bytes()
    assert blob[:8] == b"SYNCEMB1"
    n, d, flags = struct.unpack("<QII", blob[8:24])
    data = np.frombuffer(blob[24:], dtype="<f4").reshape(n, d)
    ids = Path(str(path) + ".ids").read_text(encoding="utf-8").splitlines()
    assert len(ids) == n
    return data, ids, flags


@pytest.fixture()
def corpus_file(tmp_path):
    return write_corpus(tmp_path / "captions.jsonl")


@pytest.fixture()
def images_dir(tmp_path):
    return write_images(tmp_path / "images", [rid for rid, _ in TOY_CAPTIONS])
