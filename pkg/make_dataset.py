"""
Write a seeded synthetic dataset as a directory of binary PPM files.

    python make_dataset.py --out data/toy --count 16 --size 64 --seed 0
"""
import argparse
import logging
from pathlib import Path

from storage.datasets import save_ppm, synth_dataset

logging.basicConfig(format="[%(asctime)s] %(levelname)s in %(module)s: %(message)s", level=logging.INFO)
logger = logging.getLogger("lic-quant.make_dataset")


def make_dataset(out: str | Path, count: int, size: int, seed: int) -> list[Path]:
    """
    Materialize ``synth_dataset(count, size, seed)`` as ``img_0000.ppm``, ``img_0001.ppm``...

    :return: Paths written, in dataset order.
    :rtype: list[Path]
    """
    directory = Path(out)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, image in enumerate(synth_dataset(count, size, seed)):
        path = directory / f"img_{i:04d}.ppm"
        save_ppm(image, path)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} images to {directory}")
    return paths


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description="Generate a synthetic PPM dataset.")
    parser.add_argument("--out", required=True)
    parser.add_argument("--count", type=int, default=16)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    make_dataset(args.out, args.count, args.size, args.seed)
