"""Render every ESAug op at a few strengths on one synthetic sample per domain.

Writes one PNG grid per domain: rows are ops, columns are strengths.

    python3 scripts/augment_gallery.py --out gallery --seed 0
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from triplee.core import RngStream
from triplee.datakit import generate_synthetic
from triplee.esaug import FOURIER_MIX, STANDARD_OPS, STYLE_MIX, apply_intra, fourier_mix, style_mix

STRENGTHS = (0, 10, 20, 30)


def to_pixels(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("gallery"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args()

    ds = generate_synthetic(classes=5, per_domain_count=100, image_size=args.size, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    root = RngStream(args.seed, ("gallery",))
    for d, name in enumerate(ds.domain_names):
        ids = ds.domain_indices(d)
        image = ds.images[ids[0]]
        partner = ds.images[ds.domain_indices((d + 1) % ds.domain_count)[1]]
        rows = []
        for k, op in enumerate(STANDARD_OPS):
            rows.append([apply_intra(op, image, s, root.fork(d, k, s).generator(), sign=1) for s in STRENGTHS])
        rows.append([fourier_mix(image, partner, s / 30) for s in STRENGTHS])
        rows.append([style_mix(image, partner)] * len(STRENGTHS))
        grid = np.concatenate([np.concatenate([to_pixels(x) for x in row], axis=1) for row in rows], axis=0)
        path = args.out / f"{name}.png"
        Image.fromarray(grid).resize((grid.shape[1] * 3, grid.shape[0] * 3), Image.NEAREST).save(path)
        print(f"{path}: rows {[op.name for op in STANDARD_OPS] + [FOURIER_MIX.name, STYLE_MIX.name]}")


if __name__ == "__main__":
    main()
