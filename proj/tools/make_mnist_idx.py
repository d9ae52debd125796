#!/usr/bin/env python3
"""Build desk-scale MNIST / Fashion-MNIST IDX files from npm packages.

mnist@1.1.0 ships 10,000 digits as per-class JSON arrays of 784 floats
(pixel/255 rounded to three decimals). fashion-mnist@1.1.0 ships 7,000 uint8
images per class, of which the first 1,000 per class are kept. The script
shuffles with a fixed seed and writes gzip IDX files:

    data/<name>/train-images-idx3-ubyte.gz   (8000 images)
    data/<name>/train-labels-idx1-ubyte.gz
    data/<name>/t10k-images-idx3-ubyte.gz    (2000 images)
    data/<name>/t10k-labels-idx1-ubyte.gz

Usage: tools/make_mnist_idx.py [--dataset mnist|fashion] [--package DIR] [--out DIR]
If --package is omitted, `npm pack` is run in a temporary directory.
"""
import argparse
import gzip
import json
import random
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

TRAIN_COUNT = 8000
SEED = 20240917


SOURCES = {
    "mnist": ("mnist@1.1.0", "digits", 1.0 / 255.0, None),
    "fashion": ("fashion-mnist@1.1.0", "clothes", 1.0, 1000),
}


def fetch_package(workdir: Path, spec: str) -> Path:
    out = subprocess.run(["npm", "pack", spec], cwd=workdir, check=True,
                         capture_output=True, text=True).stdout.strip().splitlines()[-1]
    with tarfile.open(workdir / out) as tar:
        tar.extractall(workdir)
    return workdir / "package"


def write_idx(path: Path, magic: int, dims, payload: bytes) -> None:
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", choices=sorted(SOURCES), default="mnist")
    ap.add_argument("--package", type=Path)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    spec, folder, unit, per_class = SOURCES[args.dataset]
    out_dir = args.out or Path(__file__).resolve().parent.parent / "data" / args.dataset

    with tempfile.TemporaryDirectory() as tmp:
        pkg = args.package or fetch_package(Path(tmp), spec)
        samples = []
        for label in range(10):
            raw = json.loads((pkg / "src" / folder / f"{label}.json").read_text())["data"]
            rows = [r for r in raw if len(r) == 784] if raw and isinstance(raw[0], list) else \
                [raw[k * 784:(k + 1) * 784] for k in range(len(raw) // 784)]
            for row in rows[:per_class]:
                px = bytes(min(255, max(0, round(v / unit))) for v in row)
                samples.append((px, label))

    random.Random(SEED).shuffle(samples)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", samples[:TRAIN_COUNT]), ("t10k", samples[TRAIN_COUNT:])):
        write_idx(out_dir / f"{name}-images-idx3-ubyte.gz", 0x00000803, (len(part), 28, 28),
                  b"".join(p for p, _ in part))
        write_idx(out_dir / f"{name}-labels-idx1-ubyte.gz", 0x00000801, (len(part),),
                  bytes(l for _, l in part))
        print(f"{name}: {len(part)} samples")


if __name__ == "__main__":
    main()
