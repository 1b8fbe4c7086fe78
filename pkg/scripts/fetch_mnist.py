"""Fetch the canonical MNIST IDX files into ``data/mnist`` (gzipped).

The files are taken from the ``MNIST-dir`` source distribution on PyPI, which
ships the four uncompressed IDX files; both the archive and the extracted
files are checked against pinned digests.

    python scripts/fetch_mnist.py [--out data/mnist]
"""

import argparse
import gzip
import hashlib
import io
import sys
import tarfile
import urllib.request
from pathlib import Path

SDIST_URL = (
    "https://pypi.org/packages/be/d1/6db83a78917574d10bdbfa61c1d563300770d643735f6cf355a6f9adcabe/"
    "MNIST_dir-0.2.tar.gz"
)
SDIST_SHA256 = "174621ea86e24ebe98d24594d3c26aa206ae51419f0dbf2b750c296603597eee"
FILES = {
    "train-images.idx3-ubyte": ("train-images-idx3-ubyte.gz", "6bbc9ace898e44ae57da46a324031adb"),
    "train-labels.idx1-ubyte": ("train-labels-idx1-ubyte.gz", "a25bea736e30d166cdddb491f175f624"),
    "t10k-images.idx3-ubyte": ("t10k-images-idx3-ubyte.gz", "2646ac647ad5339dbf082846283269ea"),
    "t10k-labels.idx1-ubyte": ("t10k-labels-idx1-ubyte.gz", "27ae3e4e09519cfbb04c329615203637"),
}
DEFAULT_OUT = Path(__file__).resolve().parent.parent / "data" / "mnist"


def fetch(out: Path = DEFAULT_OUT) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    if all((out / gz).exists() for gz, _ in FILES.values()):
        return out
    with urllib.request.urlopen(SDIST_URL, timeout=120) as resp:
        blob = resp.read()
    if hashlib.sha256(blob).hexdigest() != SDIST_SHA256:
        raise RuntimeError("MNIST-dir archive digest mismatch")
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for member in tar.getmembers():
            name = Path(member.name).name
            if name not in FILES:
                continue
            data = tar.extractfile(member).read()
            gz_name, md5 = FILES[name]
            if hashlib.md5(data).hexdigest() != md5:
                raise RuntimeError(f"{name}: digest mismatch")
            (out / gz_name).write_bytes(gzip.compress(data, mtime=0))
    missing = [gz for gz, _ in FILES.values() if not (out / gz).exists()]
    if missing:
        raise RuntimeError(f"archive did not contain {missing}")
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args(argv)
    print(fetch(args.out))


if __name__ == "__main__":
    sys.exit(main())
