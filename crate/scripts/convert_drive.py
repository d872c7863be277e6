#!/usr/bin/env python3
"""Convert an extracted DRIVE archive into the layout vesselnet reads.

    python3 scripts/convert_drive.py /path/to/DRIVE data/drive

Input (as distributed):
    training/images/21_training.tif     test/images/01_test.tif
    training/1st_manual/21_manual1.gif  test/1st_manual/01_manual1.gif
    training/mask/21_training_mask.gif  test/mask/01_test_mask.gif

Output:
    <out>/{training,test}/{images,truth,mask}/NN.png

Images are written as 8-bit RGB, truth and mask as 8-bit grayscale with
values 0 and 255.
"""

import argparse
import sys
from pathlib import Path

from PIL import Image

SPLITS = {
    "training": (range(21, 41), "training"),
    "test": (range(1, 21), "test"),
}


def sources(root: Path, split: str, stem: str, number: int):
    base = root / split
    return {
        "images": base / "images" / f"{number:02d}_{stem}.tif",
        "truth": base / "1st_manual" / f"{number:02d}_manual1.gif",
        "mask": base / "mask" / f"{number:02d}_{stem}_mask.gif",
    }


def binarize(img: Image.Image) -> Image.Image:
    return img.convert("L").point(lambda v: 255 if v >= 128 else 0)


def convert(root: Path, out: Path, splits) -> int:
    written = 0
    for split in splits:
        ids, stem = SPLITS[split]
        for number in ids:
            paths = sources(root, split, stem, number)
            missing = [str(p) for p in paths.values() if not p.is_file()]
            if missing:
                raise SystemExit(f"missing input: {', '.join(missing)}")
            for kind, src in paths.items():
                with Image.open(src) as img:
                    img = img.convert("RGB") if kind == "images" else binarize(img)
                    dest = out / split / kind / f"{number:02d}.png"
                    dest.parent.mkdir(parents=True, exist_ok=True)
                    img.save(dest)
                    written += 1
    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("drive_root", type=Path, help="directory containing training/ and test/")
    parser.add_argument("out", type=Path, help="output dataset root")
    parser.add_argument("--split", choices=sorted(SPLITS), action="append",
                        help="convert only this split (repeatable)")
    args = parser.parse_args(argv)
    n = convert(args.drive_root, args.out, args.split or list(SPLITS))
    print(f"wrote {n} files under {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
