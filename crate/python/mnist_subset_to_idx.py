"""Convert the 10,000-digit MNIST subset shipped in the `mnist` npm package
(src/digits/<d>.json, pixels stored as byte/255 rounded to 3 decimals) into a
gzipped IDX image/label pair.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 python/mnist_subset_to_idx.py package/src/digits crates/core/tests/data
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    pixels = bytearray()
    labels = bytearray()
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for v in data:
            b = round(v * 255.0)
            assert 0 <= b <= 255 and abs(v * 255.0 - b) < 0.5
            pixels.append(b)
        labels.extend([digit] * (len(data) // 784))
    count = len(labels)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, count, 28, 28))
        f.write(pixels)
    with gzip.GzipFile(dst / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, count))
        f.write(labels)
    print(f"wrote {count} examples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
