"""Regenerate data/desk/: 16 168x168 luminance crops of scikit-image's sample images.

The sample images are public domain or CC0.  scikit-image is only needed to
run this script, not to use the package.
"""

from pathlib import Path

import numpy as np
import skimage

from eeds.images import load_png, quantize, rgb_to_ycbcr, save_png

NAMES = ["astronaut.png", "camera.png", "coffee.png", "chelsea.png", "rocket.jpg", "brick.png",
         "grass.png", "gravel.png", "moon.png", "coins.png", "motorcycle_left.png", "page.png",
         "text.png", "retina.jpg", "hubble_deep_field.jpg", "motorcycle_right.png"]
SIZE = 168


def main(out=Path(__file__).resolve().parents[1] / "data" / "desk"):
    out.mkdir(parents=True, exist_ok=True)
    for name in NAMES:
        planes = load_png(Path(skimage.__file__).parent / "data" / name)
        y = planes[0] if len(planes) == 1 else quantize(rgb_to_ycbcr(*planes)[0]).astype(np.float32)
        h, w = y.shape
        top, left = (h - SIZE) // 2, (w - SIZE) // 2
        save_png([y[top: top + SIZE, left: left + SIZE]], out / (Path(name).stem + ".png"))
        assert load_png(out / (Path(name).stem + ".png"))[0].shape == (SIZE, SIZE)
    print(f"wrote {len(NAMES)} images to {out}")


if __name__ == "__main__":
    main()
