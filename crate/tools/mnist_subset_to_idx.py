"""Convert the 5,000-example MNIST subset shipped inside the mlxtend wheel
into IDX files (train-images-idx3-ubyte / train-labels-idx1-ubyte).

Usage:
    pip download --no-deps -d /tmp/whl mlxtend
    python3 tools/mnist_subset_to_idx.py /tmp/whl/mlxtend-*.whl data/mnist-5k
"""

import gzip
import struct
import sys
import zipfile
from pathlib import Path

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel: str, out_dir: str) -> None:
    with zipfile.ZipFile(wheel) as z:
        rows = gzip.decompress(z.read(MEMBER)).decode().splitlines()
    images = bytearray()
    labels = bytearray()
    for line in rows:
        fields = [int(float(v)) for v in line.split(",")]
        pixels, label = fields[:-1], fields[-1]
        assert len(pixels) == 784 and 0 <= label <= 9
        images.extend(pixels)
        labels.append(label)
    n = len(labels)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x00000803, n, 28, 28) + bytes(images)
    )
    (out / "train-labels-idx1-ubyte").write_bytes(
        struct.pack(">II", 0x00000801, n) + bytes(labels)
    )
    print(f"wrote {n} examples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
