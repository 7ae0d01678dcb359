"""Fetch the official MNIST IDX files into data/mnist/.

The usual MNIST mirrors are not always reachable, but the npm package
``mnist-data`` (1.2.6) ships the four original IDX files unmodified. This
script pulls it through ``npm pack``, checks the headers with the package's
own IDX parser and writes gzip copies.

Usage: python scripts/prepare_mnist.py [out_dir]
"""
import gzip
import os
import subprocess
import sys
import tarfile
import tempfile
from glob import glob

from pixreg.datasets import parse_idx_images, parse_idx_labels

FILES = {
    "train-images-idx3-ubyte": (parse_idx_images, 60000),
    "train-labels-idx1-ubyte": (parse_idx_labels, 60000),
    "t10k-images-idx3-ubyte": (parse_idx_images, 10000),
    "t10k-labels-idx1-ubyte": (parse_idx_labels, 10000),
}


def main(out_dir="data/mnist"):
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist-data@1.2.6"], cwd=tmp, check=True, capture_output=True)
        with tarfile.open(glob(os.path.join(tmp, "mnist-data-*.tgz"))[0]) as tar:
            for name, (parse, count) in FILES.items():
                raw = tar.extractfile(f"package/data/{name}").read()
                n = len(parse(raw))
                if n != count:
                    raise SystemExit(f"{name}: {n} records, expected {count}")
                with open(os.path.join(out_dir, name + ".gz"), "wb") as fh:
                    fh.write(gzip.compress(raw, mtime=0))
                print(f"{name}: {n} records")


if __name__ == "__main__":
    main(*sys.argv[1:])
